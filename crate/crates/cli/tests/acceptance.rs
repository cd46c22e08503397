//! End-to-end acceptance checks. Runs without the test harness and prints
//! one `PASS`/`FAIL` line per criterion; exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use phenobody::asset::{
    generate_toy_humanoid, save_bundle, triangulate, with_local_morphs, AssetBundle, Resolution,
};
use phenobody::bench::{run_bench, BenchConfig};
use phenobody::collision::{parts_eligible, self_collide, share_vertex};
use phenobody::fitting::{fit_scan, sample_surface, FitConfig, FitInit, ScanCloud};
use phenobody::geometry::{build_bvh, closest_point_on_triangle, triangle, triangles_intersect};
use phenobody::math::Vec3;
use phenobody::pose::{forward_kinematics, rest_transforms, Body, JacobianRequest, Pose};
use phenobody::regressor::{
    cyclic_error, init_barycentric, init_between, refine, RefineConfig, SparseRegressor, TrainingMesh,
};
use phenobody::shape::{hat_weights, ShapeModel};
use phenobody::stats::{
    beta_moments, calibrate, fit_beta_moments, AgeMap, CalibrationConfig, Calibrator, GrowthRow, GrowthTargets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, t: Instant, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    if e > limit {
        Err(format!("{what} took {e:.1?} (limit {limit:?})"))
    } else {
        Ok(())
    }
}

fn vmax(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn random_pose(rng: &mut impl Rng, bones: usize, root: f64, joints: f64) -> Pose {
    let mut v = |s: f64| Vec3::new(rng.random_range(-s..=s), rng.random_range(-s..=s), rng.random_range(-s..=s));
    Pose {
        root_rotation: v(root),
        root_translation: v(root),
        joint_rotations: (0..bones).map(|_| v(joints)).collect(),
    }
}

fn off_node(rng: &mut impl Rng, grid: &[f64], margin: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(0.0..1.0);
        if grid.iter().all(|g| (v - g).abs() > margin) {
            return v;
        }
    }
}

fn interpolation_exactness() -> Outcome {
    let t = Instant::now();
    let b = generate_toy_humanoid(0, Resolution::Fine);
    let model = ShapeModel::new(&b);
    let grids: Vec<&[f64]> = b.schema.params.iter().map(|p| &p.grid[..]).collect();
    let mut worst = 0.0f64;
    let mut assignments = vec![vec![]];
    for g in &grids {
        assignments = assignments
            .iter()
            .flat_map(|a: &Vec<f64>| g.iter().map(move |&x| [a.clone(), vec![x]].concat()))
            .collect();
    }
    for a in &assignments {
        // oracle: base plus every target whose constraints all hold exactly
        let mut want = b.mesh.vertices.clone();
        for target in &b.targets {
            let on = target
                .constraints
                .iter()
                .all(|(n, node)| a[b.schema.index_of(n).unwrap()] == *node);
            if on {
                for &(i, d) in &target.displacements {
                    want[i as usize] += d;
                }
            }
        }
        worst = worst.max(vmax(&model.vertices(a).unwrap(), &want));
    }
    let age = b.schema.index_of("age").unwrap();
    let w = hat_weights(0.5, grids[age]).unwrap();
    // 1/3 and 2/3 are not representable, so "equal" holds to rounding
    let equal = w.len() == 2 && w.iter().all(|&(_, x)| (x - 0.5).abs() < 1e-12);
    // the 0.5 mesh is the midpoint of the two bracketing node meshes
    let mut p = model.neutral().to_vec();
    let at = |v: f64, p: &mut Vec<f64>| {
        p[age] = v;
        model.vertices(p).unwrap()
    };
    let (lo, hi, mid) = (at(w[0].0, &mut p), at(w[1].0, &mut p), at(0.5, &mut p));
    let blend: Vec<Vec3> = lo.iter().zip(&hi).map(|(x, y)| x * 0.5 + y * 0.5).collect();
    let mid_err = vmax(&mid, &blend);
    within(Duration::from_secs(1), t, "interpolation")?;
    check(
        worst < 1e-12 && equal && mid_err < 1e-12,
        format!(
            "{} node assignments, max deviation {worst:.1e}; age 0.5 weights {w:?}, blend deviation {mid_err:.1e}",
            assignments.len()
        ),
    )
}

fn partition_of_unity() -> Outcome {
    let b = generate_toy_humanoid(0, Resolution::Fine);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for p in &b.schema.params {
        for _ in 0..10_000 {
            let v: f64 = rng.random_range(0.0..=1.0);
            let s: f64 = hat_weights(v, &p.grid).unwrap().iter().map(|w| w.1).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    check(worst <= 1e-12, format!("max |sum - 1| = {worst:.1e} over {} parameters", b.schema.len()))
}

fn identity_fixed_point() -> Outcome {
    let b = generate_toy_humanoid(0, Resolution::Fine);
    let body = Body::new(&b);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let identity = Pose::identity(body.bone_count());
    let mut worst = 0.0f64;
    for i in 0..100 {
        let phen: Vec<f64> = if i == 0 {
            body.shape.neutral().to_vec()
        } else {
            (0..b.schema.len()).map(|_| rng.random_range(0.0..=1.0)).collect()
        };
        let rest = body.shape.vertices(&phen).unwrap();
        let posed = body.eval(&phen, &identity, JacobianRequest::NONE).unwrap().vertices;
        worst = worst.max(vmax(&posed, &rest));
    }
    check(worst < 1e-12, format!("max deviation {worst:.1e} over 100 shapes"))
}

const FD_STEP: f64 = 1e-5;

fn column_error(analytic: &[Vec3], plus: &[Vec3], minus: &[Vec3]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((a, p), m) in analytic.iter().zip(plus).zip(minus) {
        let fd = (p - m) / (2.0 * FD_STEP);
        num = num.max((a - fd).amax());
        den = den.max(fd.amax());
    }
    if den < 1e-9 {
        num
    } else {
        num / den
    }
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let b = generate_toy_humanoid(0, Resolution::Coarse);
    let body = Body::new(&b);
    let nb = body.bone_count();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let configs = 100;
    for _ in 0..configs {
        let phen: Vec<f64> = b.schema.params.iter().map(|p| off_node(&mut rng, &p.grid, 1e-3)).collect();
        let pose = random_pose(&mut rng, nb, 0.5, 1.0);
        let out = body.eval(&phen, &pose, JacobianRequest::ALL).unwrap();
        let pj = out.pose_jacobian.unwrap();
        let sj = out.shape_jacobian.unwrap();
        let q = pose.to_params();
        for k in 0..q.len() {
            let eval = |d: f64| {
                let mut q = q.clone();
                q[k] += d;
                body.eval(&phen, &Pose::from_params(&q, nb).unwrap(), JacobianRequest::NONE).unwrap().vertices
            };
            let analytic: Vec<Vec3> = (0..out.vertices.len()).map(|v| pj.column(v, k)).collect();
            worst = worst.max(column_error(&analytic, &eval(FD_STEP), &eval(-FD_STEP)));
        }
        for k in 0..phen.len() {
            let eval = |d: f64| {
                let mut p = phen.clone();
                p[k] += d;
                body.eval(&p, &pose, JacobianRequest::NONE).unwrap().vertices
            };
            worst = worst.max(column_error(&sj[k], &eval(FD_STEP), &eval(-FD_STEP)));
        }
    }
    within(Duration::from_secs(60), t, "gradient check")?;
    check(worst < 1e-5, format!("max relative error {worst:.1e} over {configs} configurations in {:.1?}", t.elapsed()))
}

fn brute_force_pairs(v: &[Vec3], b: &AssetBundle) -> BTreeSet<(u32, u32)> {
    let tris = triangulate(&b.mesh.faces);
    let labels = &b.mesh.part_labels;
    let mut out = BTreeSet::new();
    for i in 0..tris.len() {
        for j in i + 1..tris.len() {
            let (fa, fb) = (i / 2, j / 2);
            if !parts_eligible(b, labels[fa], labels[fb], false) || share_vertex(&tris[i], &tris[j]) {
                continue;
            }
            if triangles_intersect(&triangle(v, &tris[i]), &triangle(v, &tris[j])) {
                out.insert((fa as u32, fb as u32));
            }
        }
    }
    out
}

fn collision_oracle() -> Outcome {
    let t = Instant::now();
    let b = generate_toy_humanoid(0, Resolution::Coarse);
    let body = Body::new(&b);
    let nb = body.bone_count();
    let neutral = body.shape.neutral().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut poses: Vec<Pose> = (0..20).map(|_| random_pose(&mut rng, nb, 0.0, 1.5)).collect();
    let mut constructed = Vec::new();
    for (bone, rot) in [("lower_arm_l", Vec3::new(0.0, 0.0, 2.8)), ("upper_leg_l", Vec3::new(0.0, 0.0, -0.5))] {
        let mut p = Pose::identity(nb);
        p.joint_rotations[b.skeleton.index_of(bone).unwrap()] = rot;
        constructed.push(poses.len());
        poses.push(p);
    }
    let mut mismatches = 0;
    let mut hits = 0;
    for (i, pose) in poses.iter().enumerate() {
        let v = body.eval(&neutral, pose, JacobianRequest::NONE).unwrap().vertices;
        let fast: BTreeSet<(u32, u32)> = self_collide(&v, &b, false)
            .intersecting_pairs
            .iter()
            .map(|p| (p.face_a, p.face_b))
            .collect();
        let slow = brute_force_pairs(&v, &b);
        if fast != slow {
            mismatches += 1;
        }
        if constructed.contains(&i) && slow.is_empty() {
            return Err(format!("constructed pose {i} does not interpenetrate"));
        }
        hits += usize::from(!fast.is_empty());
    }
    let rest = self_collide(&b.mesh.vertices, &b, false);
    within(Duration::from_secs(60), t, "collision check")?;
    check(
        mismatches == 0 && !rest.colliding && brute_force_pairs(&b.mesh.vertices, &b).is_empty(),
        format!("{} poses ({hits} colliding), {mismatches} mismatches, rest pose clean: {}", poses.len(), !rest.colliding),
    )
}

fn closest_point_oracle() -> Outcome {
    let b = generate_toy_humanoid(0, Resolution::Fine);
    let v = &b.mesh.vertices;
    let tris = b.mesh.triangles();
    let bvh = build_bvh(v, &tris).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.2..2.0), rng.random_range(-0.5..0.5));
        let fast = bvh.closest_point(&p, v, &tris).distance;
        let slow = tris
            .iter()
            .map(|t| (p - closest_point_on_triangle(&p, &triangle(v, t)).0).norm())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((fast - slow).abs());
    }
    check(worst < 1e-12, format!("max distance difference {worst:.1e} over 10^4 points"))
}

fn self_scan(b: &AssetBundle, seed: u64, sigma: f64) -> (FitInit, Vec<Vec3>) {
    let body = Body::new(b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phenotypes: Vec<f64> = (0..b.schema.len()).map(|_| rng.random_range(0.1..0.9)).collect();
    let mut pose = random_pose(&mut rng, body.bone_count(), 0.15, 0.3);
    pose.root_translation *= 0.1 / 0.15;
    let v = body.eval(&phenotypes, &pose, JacobianRequest::NONE).unwrap().vertices;
    let mut points = sample_surface(&v, &b.mesh.triangles(), 20_000, &mut rng).unwrap();
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).unwrap();
        for p in &mut points {
            *p += Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        }
    }
    (FitInit { phenotypes, pose }, points)
}

fn scan_self_recovery() -> Outcome {
    let t = Instant::now();
    let b = generate_toy_humanoid(0, Resolution::Coarse);
    let cfg = FitConfig::default();
    let (truth, clean) = self_scan(&b, 1, 0.0);
    let fixed = fit_scan(&b, &ScanCloud::new(clean), &cfg, None, Some(truth)).unwrap();
    let (_, noisy) = self_scan(&b, 2, 0.001);
    let fitted = fit_scan(&b, &ScanCloud::new(noisy), &cfg, None, None).unwrap();
    within(Duration::from_secs(300), t, "scan fits")?;
    check(
        fixed.mean_error < 1e-6 && fitted.mean_error <= 0.0024,
        format!(
            "ground-truth init {:.1e} m, neutral init with 1 mm noise {:.3} mm ({:.1?})",
            fixed.mean_error,
            fitted.mean_error * 1e3,
            t.elapsed()
        ),
    )
}

fn beta_moment_matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 1000 {
        let mean: f64 = rng.random_range(0.01..0.99);
        let sd: f64 = rng.random_range(0.001..0.5);
        if sd * sd >= mean * (1.0 - mean) {
            continue;
        }
        n += 1;
        let (a, b) = fit_beta_moments(mean, sd).map_err(|e| e.to_string())?;
        let (m, s) = beta_moments(a, b);
        worst = worst.max((m - mean).abs()).max((s - sd).abs());
    }
    let (_, s) = beta_moments(2.0, 2.0);
    let var_err = (s * s - 1.0 / 20.0).abs();
    check(worst < 1e-12 && var_err < 1e-15, format!("round-trip error {worst:.1e}; Beta(2,2) variance error {var_err:.1e}"))
}

fn calibration_self_consistency() -> Outcome {
    let t = Instant::now();
    let b = generate_toy_humanoid(0, Resolution::Coarse);
    let params = vec!["weight".to_string()];
    let age_map = AgeMap::default();
    let cfg = |mc_samples, seed| CalibrationConfig { mc_samples, seed, ..CalibrationConfig::default() };
    let generator = Calibrator::new(&b, &params, age_map.clone(), cfg(4096, 99)).map_err(|e| e.to_string())?;
    let planted = [(24u32, 0u8, 0.35, 0.10), (96, 0, 0.55, 0.15), (96, 1, 0.6, 0.12), (240, 1, 0.45, 0.2)];
    let rows = planted
        .iter()
        .map(|&(age_months, gender, mean, sd)| {
            let ab = fit_beta_moments(mean, sd).unwrap();
            let s = generator.pushforward(age_months as f64 / 12.0, gender, &[ab]).unwrap();
            GrowthRow {
                age_months,
                gender,
                height_mean: s.height_mean,
                height_sd: s.height_sd,
                bmi_mean: s.bmi_mean,
                bmi_sd: s.bmi_sd,
            }
        })
        .collect();
    let targets = GrowthTargets { rows };
    let a = calibrate(&b, &targets, &age_map, &params, cfg(2048, 5)).map_err(|e| e.to_string())?;
    let again = calibrate(&b, &targets, &age_map, &params, cfg(2048, 5)).map_err(|e| e.to_string())?;
    let mut worst = [0.0f64; 4];
    for (r, row) in a.report.iter().zip(&targets.rows) {
        for (w, e) in worst.iter_mut().zip(r.achieved.relative_errors(row)) {
            *w = w.max(e);
        }
    }
    within(Duration::from_secs(600), t, "calibration")?;
    let deterministic = a.table == again.table && a.report == again.report;
    check(
        worst[0] < 0.02 && worst[2] < 0.02 && worst[1] < 0.10 && worst[3] < 0.10 && deterministic,
        format!(
            "{} buckets; worst relative error height mean {:.2e}, height sd {:.2e}, bmi mean {:.2e}, bmi sd {:.2e}; deterministic: {deterministic}",
            a.report.len(),
            worst[0],
            worst[1],
            worst[2],
            worst[3]
        ),
    )
}

fn regressor_properties() -> Outcome {
    let fine = generate_toy_humanoid(0, Resolution::Fine);
    let coarse = generate_toy_humanoid(0, Resolution::Coarse);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ctris = coarse.mesh.triangles();
    let pts = sample_surface(&coarse.mesh.vertices, &ctris, 2000, &mut rng).unwrap();
    let bary = init_barycentric(&coarse.mesh.vertices, &coarse.mesh.faces, &pts, "toy-coarse", "points").unwrap();
    let bary_err = vmax(&bary.apply(&coarse.mesh.vertices).unwrap(), &pts);

    let fp = fine.symmetry.partner_table(fine.vertex_count()).unwrap();
    let cp = coarse.symmetry.partner_table(coarse.vertex_count()).unwrap();
    let nb = fine.skeleton.len();
    let state = |rng: &mut ChaCha8Rng| FitInit {
        phenotypes: (0..fine.schema.len()).map(|_| rng.random_range(0.05..0.95)).collect(),
        pose: random_pose(rng, nb, 0.1, 0.4),
    };
    let train: Vec<FitInit> = (0..6).map(|_| state(&mut rng)).collect();
    let test: Vec<FitInit> = (0..4).map(|_| state(&mut rng)).collect();
    let posed = |b: &AssetBundle, s: &FitInit| {
        Body::new(b).eval(&s.phenotypes, &s.pose, JacobianRequest::NONE).unwrap().vertices
    };
    let to = |b: &AssetBundle| -> Vec<TrainingMesh> {
        train.iter().map(|s| TrainingMesh { vertices: posed(b, s), init: Some(s.clone()) }).collect()
    };
    let fwd0 = init_between(&fine, &coarse).unwrap();
    let bwd0 = init_between(&coarse, &fine).unwrap();
    let cfg = RefineConfig::default();
    let fwd = refine(&fwd0, &fine, &to(&coarse), &fp, &cp, &cfg).unwrap().regressor;
    let bwd = refine(&bwd0, &coarse, &to(&fine), &cp, &fp, &cfg).unwrap().regressor;
    let meshes: Vec<Vec<Vec3>> = test.iter().map(|s| posed(&fine, s)).collect();
    let before = cyclic_error(&fwd0, &bwd0, &meshes).unwrap();
    let after = cyclic_error(&fwd, &bwd, &meshes).unwrap();

    let id = SparseRegressor::identity("toy-fine", fine.vertex_count());
    let id_err = cyclic_error(&id, &id, &meshes).unwrap();
    let idempotent = [(&fwd0, &fp, &cp), (&fwd, &fp, &cp), (&bwd, &cp, &fp)].iter().all(|(r, s, t)| {
        let once = r.symmetrize(s, t).unwrap();
        once.symmetrize(s, t).unwrap() == once
    });
    check(
        bary_err < 1e-12 && after < before && id_err == 0.0 && idempotent,
        format!(
            "barycentric error {bary_err:.1e}; cyclic error init {:.3} mm -> refined {:.3} mm; identity {id_err}; symmetrize idempotent: {idempotent}",
            before * 1e3,
            after * 1e3
        ),
    )
}

fn batch_scaling() -> Outcome {
    let b = with_local_morphs(&generate_toy_humanoid(0, Resolution::Coarse), 120, 1);
    let full = b.schema.len();
    let cfg = BenchConfig { batches: vec![64, 8192], phenotype_counts: vec![2, full], repeats: 41, seed: 0 };
    let r = run_bench(&b, &cfg).map_err(|e| e.to_string())?;
    let per = |batch, k| r.row(batch, k).map(|row| row.per_body_ms).ok_or(format!("cell {batch}x{k} failed"));
    let (small, large) = (per(64, full)?, per(8192, full)?);
    let (small2, large2) = (per(64, 2)?, per(8192, 2)?);
    let scaling = large <= small && large2 <= small2;
    let restriction = small2 <= small && large2 <= large;
    check(
        scaling && restriction,
        format!(
            "per body ms: {full} params {small:.5} @64 / {large:.5} @8192; 2 params {small2:.5} @64 / {large2:.5} @8192 (batch scaling {}, restriction {})",
            if scaling { "ok" } else { "violated" },
            if restriction { "ok" } else { "violated" }
        ),
    )
}

/// Run `phenobody` in `dir`; returns stdout, failing on a nonzero exit
/// other than `allowed`.
fn cli(dir: &Path, args: &[&str], allowed: i32) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_phenobody"))
        .args(args)
        .current_dir(dir)
        .env_remove("PHENOBODY_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    let code = out.status.code().unwrap_or(-1);
    if code != 0 && code != allowed {
        return Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_fixtures(dir: &Path) -> Result<(), String> {
    let coarse = generate_toy_humanoid(0, Resolution::Coarse);
    save_bundle(&coarse, dir.join("coarse.phb")).map_err(|e| e.to_string())?;
    fs::write(
        dir.join("growth.csv"),
        "age_months,gender,height_mean_m,height_sd_m,bmi_mean,bmi_sd\n60,0,1.2,0.002,15.5,1.0\n",
    )
    .map_err(|e| e.to_string())?;
    // world orientations of a posed skeleton, for retargeting
    let body = Body::new(&coarse);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pose = random_pose(&mut rng, body.bone_count(), 0.2, 0.5);
    let shaped = body.shape.eval(body.shape.neutral(), false).unwrap();
    let rest = rest_transforms(&shaped, &coarse.skeleton).unwrap();
    let world = forward_kinematics(&coarse.skeleton, &rest, &pose).world;
    let orientations: BTreeMap<String, [[f64; 3]; 3]> = coarse
        .skeleton
        .bones
        .iter()
        .zip(&world)
        .map(|(bone, w)| (bone.name.clone(), std::array::from_fn(|i| std::array::from_fn(|j| w.rot[(i, j)]))))
        .collect();
    fs::write(dir.join("orientations.json"), serde_json::to_string(&orientations).unwrap()).map_err(|e| e.to_string())
}

/// Every command run twice from scratch; all outputs must match byte for
/// byte. Bench timings are wall-clock, so only its other columns count.
fn cli_determinism() -> Outcome {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut stdout: Vec<Vec<String>> = vec![Vec::new(), Vec::new()];
    let steps: Vec<(Vec<&str>, i32)> = vec![
        (vec!["toy", "--resolution", "fine", "--seed", "0", "--out", "fine.phb"], 0),
        (vec!["shape", "--bundle", "coarse.phb", "--set", "age=0.5", "--out", "shape.obj"], 0),
        (vec!["pose", "--bundle", "coarse.phb", "--random-pose", "0.4", "--seed", "3", "--out", "pose.ply", "--params-out", "pose.json"], 0),
        (vec!["scan", "--bundle", "coarse.phb", "--set", "weight=0.3", "--random-pose", "0.2", "--seed", "5", "--points", "3000", "--noise", "0.001", "--out", "scan.ply", "--truth", "truth.json"], 0),
        (vec!["fit", "--bundle", "coarse.phb", "--scan", "scan.ply", "--seed", "1", "--max-outer-iters", "10", "--out", "fit.json", "--report-csv", "fit.csv", "--report-ply", "fit_errors.ply"], 0),
        (vec!["collide", "--bundle", "coarse.phb", "--random-pose", "1.5", "--seed", "9", "--report", "collide.json"], 1),
        (vec!["retarget", "--bundle", "coarse.phb", "--orientations", "orientations.json", "--out", "retarget.json"], 0),
        (vec!["calibrate", "--bundle", "coarse.phb", "--targets", "growth.csv", "--params", "weight", "--mc-samples", "256", "--seed", "2", "--out", "table.json", "--report", "calibration.json"], 0),
        (vec!["sample", "--table", "table.json", "--age-years", "5", "--gender", "0", "--seed", "7", "--out", "sample.json"], 0),
        (vec!["regressor", "fit", "--source", "fine.phb", "--target", "coarse.phb", "--rounds", "2", "--seed", "4", "--out", "fc.phr", "--report", "fc.json"], 0),
        (vec!["regressor", "fit", "--source", "coarse.phb", "--target", "fine.phb", "--rounds", "2", "--seed", "4", "--out", "cf.phr"], 0),
        (vec!["pose", "--bundle", "fine.phb", "--random-pose", "0.3", "--seed", "8", "--out", "fine_pose.obj"], 0),
        (vec!["regressor", "apply", "--regressor", "fc.phr", "--mesh", "fine_pose.obj", "--target-bundle", "coarse.phb", "--out", "applied.obj"], 0),
        (vec!["regressor", "cycle", "--forward", "fc.phr", "--backward", "cf.phr", "--bundle", "fine.phb", "--seed", "6"], 0),
        (vec!["bench", "--bundle", "coarse.phb", "--batches", "1,8", "--phenotype-counts", "1,full", "--repeats", "1", "--csv", "bench.csv"], 0),
    ];
    for (run, dir) in runs.iter().enumerate() {
        write_fixtures(dir.path())?;
        for (args, allowed) in &steps {
            let out = cli(dir.path(), args, *allowed)?;
            // timing table goes to stdout; keep only non-bench output
            if args[0] != "bench" {
                stdout[run].push(out);
            }
        }
    }
    if stdout[0] != stdout[1] {
        return Err("stdout differs between runs".into());
    }
    let mut files = 0;
    for entry in fs::read_dir(runs[0].path()).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let read = |i: usize| fs::read(runs[i].path().join(&name)).map_err(|e| format!("{name:?}: {e}"));
        let (a, b) = (read(0)?, read(1)?);
        let same = if name == "bench.csv" {
            let strip = |bytes: &[u8]| -> Vec<String> {
                String::from_utf8_lossy(bytes)
                    .lines()
                    .map(|l| {
                        let c: Vec<&str> = l.split(',').collect();
                        format!("{},{},{},{}", c[0], c[1], c[4], c[5])
                    })
                    .collect()
            };
            strip(&a) == strip(&b)
        } else {
            a == b
        };
        if !same {
            return Err(format!("{name:?} differs between runs"));
        }
        files += 1;
    }
    check(files >= 20, format!("{} commands, {files} output files identical across two runs", steps.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("interpolation exactness", interpolation_exactness),
        ("partition of unity", partition_of_unity),
        ("identity-pose fixed point", identity_fixed_point),
        ("gradient correctness", gradient_correctness),
        ("collision oracle equivalence", collision_oracle),
        ("closest-point oracle equivalence", closest_point_oracle),
        ("scan self-recovery", scan_self_recovery),
        ("beta moment matching", beta_moment_matching),
        ("calibration self-consistency", calibration_self_consistency),
        ("regressor properties", regressor_properties),
        ("batch scaling", batch_scaling),
        ("CLI determinism", cli_determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{:.1?}]", t.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
