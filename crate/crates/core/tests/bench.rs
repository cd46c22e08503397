use phenobody::asset::{generate_toy_humanoid, with_local_morphs, Resolution};
use phenobody::bench::{memory_estimate, run_bench, BenchConfig};

#[test]
fn restricting_parameters_is_not_slower() {
    let b = with_local_morphs(&generate_toy_humanoid(0, Resolution::Coarse), 120, 1);
    let full = b.schema.len();
    let cfg = BenchConfig { batches: vec![16, 256], phenotype_counts: vec![2, full], repeats: 5, seed: 0 };
    let r = run_bench(&b, &cfg).unwrap();
    assert_eq!(r.rows.len(), 4);
    for &batch in &cfg.batches {
        let (two, all) = (r.row(batch, 2).unwrap(), r.row(batch, full).unwrap());
        assert!(two.per_body_ms <= all.per_body_ms, "{}", r.to_table());
        assert!((two.per_body_ms * batch as f64 - two.wall_time_ms).abs() < 1e-9);
        assert_eq!(two.peak_memory_bytes, memory_estimate(batch, b.vertex_count(), 2, b.skeleton.len()).unwrap());
    }
}

#[test]
fn csv_has_one_row_per_cell() {
    let b = generate_toy_humanoid(0, Resolution::Coarse);
    let cfg = BenchConfig { batches: vec![1, 2, 3], phenotype_counts: vec![1, 2, 9], repeats: 1, seed: 4 };
    let r = run_bench(&b, &cfg).unwrap();
    // 9 clamps to the schema size and collapses onto 2
    assert_eq!(r.rows.len(), 6);
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "batch_size,phenotype_count,wall_time_ms,per_body_ms,peak_memory_bytes,error");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert!(cols[3].parse::<f64>().unwrap() > 0.0);
        assert!(cols[5].is_empty());
    }
}
