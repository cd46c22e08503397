//! Forward-pass timing over batch sizes and phenotype counts.
//!
//! Each cell builds a [`Body`] restricted to the first `k` schema parameters,
//! draws random phenotypes and poses, runs one untimed warm-up pass and then
//! reports the median wall time of `repeats` timed passes. Buffers are
//! allocated once per cell with `try_reserve`, so a cell that does not fit in
//! memory is reported as failed while the others still run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asset::AssetBundle;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::pose::{Body, Pose};
use crate::shape::ShapeModel;

/// Joint angles are drawn from `±POSE_RANGE` radians per axis.
pub const POSE_RANGE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batches: Vec<usize>,
    /// Parameter counts to evaluate; each is clamped to the schema size.
    pub phenotype_counts: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if self.batches.is_empty() || self.batches.contains(&0) {
            return bad("batch sizes must be positive");
        }
        if !self.batches.windows(2).all(|w| w[0] < w[1]) {
            return bad("batch sizes must be strictly increasing");
        }
        if self.phenotype_counts.is_empty() || self.phenotype_counts.contains(&0) {
            return bad("phenotype counts must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub phenotype_count: usize,
    pub wall_time_ms: f64,
    pub per_body_ms: f64,
    /// Bytes held by the batch buffers (inputs, output, per-body scratch).
    pub peak_memory_bytes: usize,
    /// Set when the cell could not run; timings are then zero.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub vertex_count: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, batch: usize, phenotype_count: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.batch_size == batch && r.phenotype_count == phenotype_count && r.error.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_size,phenotype_count,wall_time_ms,per_body_ms,peak_memory_bytes,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.batch_size,
                r.phenotype_count,
                r.wall_time_ms,
                r.per_body_ms,
                r.peak_memory_bytes,
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>6} {:>12} {:>12} {:>14}\n",
            "batch", "params", "wall_ms", "per_body_ms", "memory_bytes"
        );
        for r in &self.rows {
            match &r.error {
                Some(e) => out.push_str(&format!("{:>8} {:>6} failed: {e}\n", r.batch_size, r.phenotype_count)),
                None => out.push_str(&format!(
                    "{:>8} {:>6} {:>12.3} {:>12.5} {:>14}\n",
                    r.batch_size, r.phenotype_count, r.wall_time_ms, r.per_body_ms, r.peak_memory_bytes
                )),
            }
        }
        out
    }
}

/// Bytes needed for one cell: output, inputs and per-body joint scratch.
pub fn memory_estimate(batch: usize, vertex_count: usize, params: usize, bones: usize) -> Option<usize> {
    let per_body = vertex_count * size_of::<Vec3>()
        + (params + Pose::param_count(bones)) * size_of::<f64>()
        + bones * (2 * size_of::<Vec3>() + 3 * size_of::<crate::math::Rigid>());
    per_body.checked_mul(batch)
}

fn buffer<T: Clone>(len: usize, fill: T) -> Result<Vec<T>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len)
        .map_err(|e| Error::OutOfMemory(format!("{len} elements: {e}")))?;
    v.resize(len, fill);
    Ok(v)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn run_cell(body: &Body, batch: usize, repeats: usize, seed: u64) -> Result<(f64, usize)> {
    let (np, nb, nv) = (body.shape.param_count(), body.bone_count(), body.shape.vertex_count());
    let nq = Pose::param_count(nb);
    let bytes = memory_estimate(batch, nv, np, nb)
        .ok_or_else(|| Error::OutOfMemory(format!("batch {batch} overflows the address space")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phen = buffer(batch * np, 0.0)?;
    phen.iter_mut().for_each(|p| *p = rng.random_range(0.0..=1.0));
    let mut poses = buffer(batch * nq, 0.0)?;
    for q in poses.chunks_mut(nq) {
        // root translation stays at the origin
        for (i, x) in q.iter_mut().enumerate() {
            if !(3..6).contains(&i) {
                *x = rng.random_range(-POSE_RANGE..POSE_RANGE);
            }
        }
    }
    let mut out = buffer(batch * nv, Vec3::zeros())?;
    body.forward_batch_into(&phen, &poses, &mut out)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        body.forward_batch_into(&phen, &poses, &mut out)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(times), bytes))
}

/// Time the batched forward pass for every (phenotype count, batch) cell.
pub fn run_bench(bundle: &AssetBundle, config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let mut rows = Vec::new();
    let mut counts: Vec<usize> = config.phenotype_counts.iter().map(|&k| k.min(bundle.schema.len())).collect();
    counts.dedup();
    for &k in &counts {
        let body = Body::with_shape(bundle, ShapeModel::restricted(bundle, k));
        for &batch in &config.batches {
            let row = match run_cell(&body, batch, config.repeats, config.seed) {
                Ok((ms, bytes)) => BenchRow {
                    batch_size: batch,
                    phenotype_count: k,
                    wall_time_ms: ms,
                    per_body_ms: ms / batch as f64,
                    peak_memory_bytes: bytes,
                    error: None,
                },
                Err(e @ Error::OutOfMemory(_)) => BenchRow {
                    batch_size: batch,
                    phenotype_count: k,
                    wall_time_ms: 0.0,
                    per_body_ms: 0.0,
                    peak_memory_bytes: 0,
                    error: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    Ok(BenchReport {
        vertex_count: bundle.vertex_count(),
        rows,
    })
}
