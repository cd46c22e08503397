//! Sparse linear vertex regressors between two mesh topologies.
//!
//! Row `j` holds the coefficients that produce target vertex `j` as an
//! affine combination of source vertices. Rows are sorted by source index
//! and keep their sparsity pattern (including explicit zeros) once created.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "PHREGRES"
//! version   u32      currently 1
//! source    str topology id, u64 source vertex count
//! target    str topology id
//! rows      u64 n, n x (u32 k, k x (u32 source vertex, f64 coefficient))
//! end       4 bytes  "END."
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::asset::{triangulate, AssetBundle, Reader, Writer};
use crate::error::{Error, Result};
use crate::fitting::{
    descend, BoundsHandling, FitInit, LinearCorrespondences, Objective, Optimizer, StepSettings,
};
use crate::geometry::build_bvh;
use crate::math::Vec3;
use crate::pose::{Body, JacobianRequest, Pose};

pub const REGRESSOR_MAGIC: &[u8; 8] = b"PHREGRES";
pub const REGRESSOR_VERSION: u32 = 1;
const END_MARK: &[u8; 4] = b"END.";
/// Maximum source contributors per target vertex.
pub const MAX_CONTRIBUTORS: usize = 8;
const AFFINE_TOLERANCE: f64 = 1e-9;
/// Row sums further than this from 1 are rescaled.
const RENORMALIZE_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRegressor {
    pub source_topology: String,
    pub target_topology: String,
    pub source_count: usize,
    /// One row per target vertex: `(source vertex, coefficient)`, sorted.
    pub rows: Vec<Vec<(u32, f64)>>,
}

fn row_sum(row: &[(u32, f64)]) -> f64 {
    // sorted by value so mirrored rows sum identically
    let mut v: Vec<f64> = row.iter().map(|e| e.1).collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

impl SparseRegressor {
    pub fn identity(topology: &str, count: usize) -> Self {
        Self {
            source_topology: topology.into(),
            target_topology: topology.into(),
            source_count: count,
            rows: (0..count as u32).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn target_count(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (j, row) in self.rows.iter().enumerate() {
            if row.is_empty() || row.len() > MAX_CONTRIBUTORS {
                problems.push(format!("row {j} has {} contributors", row.len()));
            }
            if row.windows(2).any(|w| w[0].0 >= w[1].0) {
                problems.push(format!("row {j} is not sorted by source vertex"));
            }
            if row.iter().any(|&(k, w)| k as usize >= self.source_count || !w.is_finite()) {
                problems.push(format!("row {j} has an invalid entry"));
            }
            let s = row_sum(row);
            if (s - 1.0).abs() > AFFINE_TOLERANCE {
                problems.push(format!("row {j} sums to {s}, not 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// `target_j = Σ_k R_jk source_k`.
    pub fn apply(&self, source: &[Vec3]) -> Result<Vec<Vec3>> {
        if source.len() != self.source_count {
            return Err(Error::DimensionMismatch {
                expected: self.source_count,
                actual: source.len(),
            });
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|&(k, w)| source[k as usize] * w).sum())
            .collect())
    }

    /// `R'_{j,k} = R_{σt(j), σs(k)}`: the regressor conjugated by both
    /// mirror maps.
    pub fn mirror(&self, source_partner: &[u32], target_partner: &[u32]) -> Result<Self> {
        self.check_partners(source_partner, target_partner)?;
        let rows = (0..self.rows.len())
            .map(|j| {
                let mut r: Vec<(u32, f64)> = self.rows[target_partner[j] as usize]
                    .iter()
                    .map(|&(k, w)| (source_partner[k as usize], w))
                    .collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        Ok(Self {
            rows,
            ..self.clone()
        })
    }

    /// `½(R + mirror(R))` on the union pattern, rows rescaled to sum to 1.
    /// Exactly mirror-invariant and idempotent.
    pub fn symmetrize(&self, source_partner: &[u32], target_partner: &[u32]) -> Result<Self> {
        let m = self.mirror(source_partner, target_partner)?;
        let rows = self
            .rows
            .iter()
            .zip(&m.rows)
            .map(|(a, b)| {
                let mut acc: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
                for &(k, w) in a {
                    acc.entry(k).or_default().0 = w;
                }
                for &(k, w) in b {
                    acc.entry(k).or_default().1 = w;
                }
                let mut row: Vec<(u32, f64)> = acc.into_iter().map(|(k, (x, y))| (k, 0.5 * (x + y))).collect();
                let s = row_sum(&row);
                if (s - 1.0).abs() > RENORMALIZE_THRESHOLD {
                    row.iter_mut().for_each(|e| e.1 /= s);
                }
                row
            })
            .collect();
        let out = Self { rows, ..self.clone() };
        if out.rows.iter().any(|r| r.len() > MAX_CONTRIBUTORS) {
            return Err(Error::InvalidArgument(format!(
                "symmetrized pattern exceeds {MAX_CONTRIBUTORS} contributors per vertex"
            )));
        }
        Ok(out)
    }

    fn check_partners(&self, source_partner: &[u32], target_partner: &[u32]) -> Result<()> {
        if source_partner.len() != self.source_count {
            return Err(Error::DimensionMismatch {
                expected: self.source_count,
                actual: source_partner.len(),
            });
        }
        if target_partner.len() != self.rows.len() {
            return Err(Error::DimensionMismatch {
                expected: self.rows.len(),
                actual: target_partner.len(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(REGRESSOR_MAGIC);
        w.u32(REGRESSOR_VERSION);
        w.str(&self.source_topology);
        w.u64(self.source_count as u64);
        w.str(&self.target_topology);
        w.u64(self.rows.len() as u64);
        for row in &self.rows {
            w.u32(row.len() as u32);
            for &(k, c) in row {
                w.u32(k);
                w.f64(c);
            }
        }
        w.bytes(END_MARK);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != REGRESSOR_MAGIC {
            return Err(Error::Parse("not a regressor file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != REGRESSOR_VERSION {
            return Err(Error::Parse(format!("unsupported regressor version {version}")));
        }
        let source_topology = r.str()?;
        let source_count = r.u64()? as usize;
        let target_topology = r.str()?;
        let n = r.count(4)?;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let k = r.u32()? as usize;
            rows.push((0..k).map(|_| Ok((r.u32()?, r.f64()?))).collect::<Result<Vec<_>>>()?);
        }
        if r.take(4)? != END_MARK || !r.at_end() {
            return Err(Error::Parse("regressor file has a bad trailer".into()));
        }
        let out = Self {
            source_topology,
            target_topology,
            source_count,
            rows,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Each target vertex expressed by the barycentric coordinates of its
/// closest point on the triangulated source mesh.
pub fn init_barycentric(
    source_vertices: &[Vec3],
    source_faces: &[[u32; 4]],
    target_vertices: &[Vec3],
    source_topology: &str,
    target_topology: &str,
) -> Result<SparseRegressor> {
    let tris = triangulate(source_faces);
    let bvh = build_bvh(source_vertices, &tris)?;
    let rows = target_vertices
        .par_iter()
        .map(|p| {
            let c = bvh.closest_point(p, source_vertices, &tris);
            let t = tris[c.triangle as usize];
            let mut row: BTreeMap<u32, f64> = BTreeMap::new();
            for k in 0..3 {
                *row.entry(t[k]).or_default() += c.barycentric[k];
            }
            row.into_iter().collect()
        })
        .collect();
    Ok(SparseRegressor {
        source_topology: source_topology.into(),
        target_topology: target_topology.into(),
        source_count: source_vertices.len(),
        rows,
    })
}

/// Barycentric regressor between the rest meshes of two bundles.
pub fn init_between(source: &AssetBundle, target: &AssetBundle) -> Result<SparseRegressor> {
    init_barycentric(
        &source.mesh.vertices,
        &source.mesh.faces,
        &target.mesh.vertices,
        &source.topology_id,
        &target.topology_id,
    )
}

/// Mean over meshes and vertices of `‖backward(forward(v)) − v‖`.
pub fn cyclic_error(forward: &SparseRegressor, backward: &SparseRegressor, meshes: &[Vec<Vec3>]) -> Result<f64> {
    if backward.source_count != forward.target_count() || backward.target_count() != forward.source_count {
        return Err(Error::DimensionMismatch {
            expected: forward.source_count,
            actual: backward.target_count(),
        });
    }
    if meshes.is_empty() {
        return Err(Error::InvalidArgument("cyclic error needs at least one mesh".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for m in meshes {
        let back = backward.apply(&forward.apply(m)?)?;
        total += back.iter().zip(m).map(|(a, b)| (a - b).norm()).sum::<f64>();
        count += m.len();
    }
    Ok(total / count as f64)
}

/// One training pair: target-topology vertices and an optional starting
/// point for the source-model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMesh {
    pub vertices: Vec<Vec3>,
    pub init: Option<FitInit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub rounds: usize,
    /// Gauss–Newton steps per source-model fit and round.
    pub fit_steps: usize,
    /// Relative ridge pulling each least-squares row toward its current
    /// value; keeps under-determined rows well posed.
    pub ridge: f64,
    /// Grow each row's pattern with ring-1 source neighbours (nearest
    /// first, mirror-closed) up to the contributor limit before refining.
    pub dilate: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            fit_steps: 10,
            ridge: 1e-9,
            dilate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineReport {
    /// RMS of `apply(R, fitted source) − target` over the training set:
    /// before the first round, then after each round.
    pub residuals: Vec<f64>,
    pub rounds_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub regressor: SparseRegressor,
    pub report: RefineReport,
    /// Fitted source phenotypes and pose per training mesh.
    pub fits: Vec<FitInit>,
}

fn rms_residual(r: &SparseRegressor, sources: &[Vec<Vec3>], targets: &[TrainingMesh]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, t) in sources.iter().zip(targets) {
        let mapped = r.apply(s)?;
        sum += mapped.iter().zip(&t.vertices).map(|(a, b)| (a - b).norm_squared()).sum::<f64>();
        n += mapped.len();
    }
    Ok((sum / n as f64).sqrt())
}

/// Alternate a symmetric, affine least-squares update of the coefficients
/// on their fixed (mirror-closed) pattern with source-model fits to each
/// target through the updated rows. Each round updates the coefficients
/// first, so with ground-truth fit inits the first update sees the true
/// source meshes.
pub fn refine(
    regressor: &SparseRegressor,
    source: &AssetBundle,
    targets: &[TrainingMesh],
    source_partner: &[u32],
    target_partner: &[u32],
    config: &RefineConfig,
) -> Result<Refined> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("refine needs at least one target mesh".into()));
    }
    if regressor.source_count != source.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: source.vertex_count(),
            actual: regressor.source_count,
        });
    }
    for t in targets {
        if t.vertices.len() != regressor.target_count() {
            return Err(Error::DimensionMismatch {
                expected: regressor.target_count(),
                actual: t.vertices.len(),
            });
        }
    }
    let body = Body::new(source);
    let nb = body.bone_count();
    let mut r = regressor.symmetrize(source_partner, target_partner)?;
    if config.dilate {
        r = dilate(&r, &source.mesh.vertices, &source.mesh.faces, source_partner, target_partner)?;
    }
    let mut fits: Vec<FitInit> = targets
        .iter()
        .map(|t| {
            t.init.clone().unwrap_or_else(|| FitInit {
                phenotypes: body.shape.neutral().to_vec(),
                pose: Pose::identity(nb),
            })
        })
        .collect();
    let eval = |f: &FitInit| body.eval(&f.phenotypes, &f.pose, JacobianRequest::NONE).map(|o| o.vertices);
    let mut sources: Vec<Vec<Vec3>> = fits.iter().map(eval).collect::<Result<_>>()?;
    let mut residuals = vec![rms_residual(&r, &sources, targets)?];
    for _ in 0..config.rounds {
        // coefficients first, on the current source meshes
        r = least_squares_rows(&r, &sources, targets, source_partner, target_partner, config.ridge)?;
        r = r.symmetrize(source_partner, target_partner)?;
        // then source-model fits through the updated rows
        fits = fits
            .par_iter()
            .zip(targets)
            .map(|(f, t)| fit_through_rows(&body, &r, f, t, config.fit_steps))
            .collect::<Result<_>>()?;
        sources = fits.iter().map(eval).collect::<Result<_>>()?;
        residuals.push(rms_residual(&r, &sources, targets)?);
    }
    Ok(Refined {
        regressor: r,
        report: RefineReport {
            rounds_run: config.rounds,
            residuals,
        },
        fits,
    })
}

/// Add ring-1 neighbours of each row's pattern, nearest to the row's
/// reconstructed rest point first, with zero coefficients. Rows of a mirror
/// pair get mirrored patterns; self-mirror rows stay mirror-closed.
pub fn dilate(
    r: &SparseRegressor,
    source_vertices: &[Vec3],
    source_faces: &[[u32; 4]],
    source_partner: &[u32],
    target_partner: &[u32],
) -> Result<SparseRegressor> {
    r.check_partners(source_partner, target_partner)?;
    let mut neighbours: Vec<Vec<u32>> = vec![Vec::new(); r.source_count];
    for f in source_faces {
        for a in 0..4 {
            let (u, v) = (f[a], f[(a + 1) % 4]);
            neighbours[u as usize].push(v);
            neighbours[v as usize].push(u);
        }
    }
    for n in &mut neighbours {
        n.sort_unstable();
        n.dedup();
    }
    let rest = r.apply(source_vertices)?;
    let mut rows = r.rows.clone();
    for j in 0..rows.len() {
        let jm = target_partner[j] as usize;
        if jm < j {
            continue;
        }
        let mut pattern: Vec<u32> = rows[j].iter().map(|e| e.0).collect();
        let mut candidates: Vec<u32> = pattern
            .iter()
            .flat_map(|&k| neighbours[k as usize].iter().copied())
            .filter(|k| !pattern.contains(k))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        candidates.sort_by(|a, b| {
            let da = (source_vertices[*a as usize] - rest[j]).norm_squared();
            let db = (source_vertices[*b as usize] - rest[j]).norm_squared();
            da.total_cmp(&db).then(a.cmp(b))
        });
        for k in candidates {
            let add: Vec<u32> = if jm == j {
                let m = source_partner[k as usize];
                if m == k || pattern.contains(&m) { vec![k] } else { vec![k, m] }
            } else {
                vec![k]
            };
            if pattern.contains(&k) || pattern.len() + add.len() > MAX_CONTRIBUTORS {
                continue;
            }
            pattern.extend(add);
        }
        let mut row: Vec<(u32, f64)> = pattern
            .iter()
            .map(|&k| (k, rows[j].iter().find(|e| e.0 == k).map_or(0.0, |e| e.1)))
            .collect();
        row.sort_by_key(|e| e.0);
        if jm != j {
            let mut m: Vec<(u32, f64)> = row.iter().map(|&(k, w)| (source_partner[k as usize], w)).collect();
            m.sort_by_key(|e| e.0);
            rows[jm] = m;
        }
        rows[j] = row;
    }
    Ok(SparseRegressor {
        rows,
        ..r.clone()
    })
}

fn fit_through_rows(body: &Body, r: &SparseRegressor, start: &FitInit, target: &TrainingMesh, steps: usize) -> Result<FitInit> {
    if steps == 0 {
        return Ok(start.clone());
    }
    let mut corr = LinearCorrespondences::new();
    for (p, row) in target.vertices.iter().zip(&r.rows) {
        corr.push(*p, row.iter().copied());
    }
    let obj = Objective {
        body,
        corr: &corr,
        // quadratic everywhere: the alternation minimizes plain squares
        huber_delta: f64::INFINITY,
        bounds: BoundsHandling::Clamp,
        prior: None,
        prior_weight: 0.0,
    };
    let mut x = obj.encode(&start.phenotypes, &start.pose);
    let free = vec![true; x.len()];
    let settings = StepSettings {
        optimizer: Optimizer::LevenbergMarquardt,
        steps,
        step_size: 1.0,
        backtracking: true,
        max_backtracks: 30,
    };
    descend(&obj, &mut x, &free, settings)?;
    let (phenotypes, pose) = obj.decode(&x)?;
    Ok(FitInit { phenotypes, pose })
}

/// Per mirror orbit of target rows, minimize Σ‖Σ_k w_k s_k − t‖² over both
/// rows of the orbit with tied coefficients, subject to Σ w = 1.
fn least_squares_rows(
    r: &SparseRegressor,
    sources: &[Vec<Vec3>],
    targets: &[TrainingMesh],
    source_partner: &[u32],
    target_partner: &[u32],
    ridge: f64,
) -> Result<SparseRegressor> {
    let n = r.rows.len();
    let solved: Vec<Option<Vec<(u32, f64)>>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let jm = target_partner[j] as usize;
            if jm < j {
                return Ok(None);
            }
            let row = &r.rows[j];
            // variables: groups of pattern entries tied by the source mirror
            // when the row is its own mirror, single entries otherwise
            let pos: BTreeMap<u32, usize> = row.iter().enumerate().map(|(i, e)| (e.0, i)).collect();
            let mut group = vec![usize::MAX; row.len()];
            let mut groups = 0;
            for i in 0..row.len() {
                if group[i] != usize::MAX {
                    continue;
                }
                group[i] = groups;
                if jm == j {
                    let partner = pos.get(&source_partner[row[i].0 as usize]).copied();
                    if let Some(p) = partner {
                        group[p] = groups;
                    }
                }
                groups += 1;
            }
            let mut u0 = vec![0.0; groups];
            let mut size = vec![0.0; groups];
            for (i, e) in row.iter().enumerate() {
                u0[group[i]] = e.1;
                size[group[i]] += 1.0;
            }
            let eqs = sources.len() * 3 * 2;
            let mut a = DMatrix::<f64>::zeros(eqs, groups);
            let mut b = DVector::<f64>::zeros(eqs);
            let mut e = 0;
            for (s, t) in sources.iter().zip(targets) {
                for c in 0..3 {
                    for (i, &(k, _)) in row.iter().enumerate() {
                        a[(e, group[i])] += s[k as usize][c];
                        a[(e + 1, group[i])] += s[source_partner[k as usize] as usize][c];
                    }
                    b[e] = t.vertices[j][c];
                    b[e + 1] = t.vertices[jm][c];
                    e += 2;
                }
            }
            let ata = a.transpose() * &a;
            let lambda = ridge * (ata.trace() / groups as f64) + 1e-300;
            let mut kkt = DMatrix::<f64>::zeros(groups + 1, groups + 1);
            let mut rhs = DVector::<f64>::zeros(groups + 1);
            let atb = a.transpose() * &b;
            for p in 0..groups {
                for q in 0..groups {
                    kkt[(p, q)] = ata[(p, q)];
                }
                kkt[(p, p)] += lambda;
                kkt[(p, groups)] = size[p];
                kkt[(groups, p)] = size[p];
                rhs[p] = atb[p] + lambda * u0[p];
            }
            rhs[groups] = 1.0;
            let sol = kkt
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Degenerate(format!("singular least-squares system for row {j}")))?;
            Ok(Some(row.iter().enumerate().map(|(i, e)| (e.0, sol[group[i]])).collect()))
        })
        .collect::<Result<_>>()?;
    let mut rows = r.rows.clone();
    for (j, s) in solved.into_iter().enumerate() {
        if let Some(row) = s {
            let jm = target_partner[j] as usize;
            if jm != j {
                let mut m: Vec<(u32, f64)> = row.iter().map(|&(k, w)| (source_partner[k as usize], w)).collect();
                m.sort_by_key(|e| e.0);
                rows[jm] = m;
            }
            rows[j] = row;
        }
    }
    Ok(SparseRegressor {
        rows,
        ..r.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asset::{generate_toy_humanoid, Resolution};

    fn cube_pair() -> (Vec<Vec3>, Vec<[u32; 4]>) {
        let v = vec![
            Vec3::new(-1.0, 0.0, -1.0),
            Vec3::new(1.0, 0.0, -1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(-1.0, 0.0, 1.0),
        ];
        (v, vec![[0, 3, 2, 1]])
    }

    #[test]
    fn identity_regressor_is_exact() {
        let v: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 1.0, -2.0)).collect();
        let r = SparseRegressor::identity("t", 5);
        assert_eq!(r.apply(&v).unwrap(), v);
        assert_eq!(cyclic_error(&r, &r, &[v]).unwrap(), 0.0);
    }

    #[test]
    fn centroid_gets_thirds() {
        let (v, f) = cube_pair();
        let c = (v[0] + v[3] + v[2]) / 3.0;
        let r = init_barycentric(&v, &f, &[c], "a", "b").unwrap();
        assert_eq!(r.rows[0].len(), 3);
        assert!(r.rows[0].iter().all(|e| (e.1 - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn apply_is_affine_equivariant() {
        let b = generate_toy_humanoid(0, Resolution::Fine);
        let c = generate_toy_humanoid(0, Resolution::Coarse);
        let r = init_between(&b, &c).unwrap();
        r.validate().unwrap();
        let t = Vec3::new(0.3, -1.0, 2.0);
        let base = r.apply(&b.mesh.vertices).unwrap();
        let moved: Vec<Vec3> = b.mesh.vertices.iter().map(|v| v + t).collect();
        for (a, m) in base.iter().zip(r.apply(&moved).unwrap()) {
            assert!((a + t - m).norm() < 1e-12);
        }
        let scaled: Vec<Vec3> = b.mesh.vertices.iter().map(|v| v * 2.0).collect();
        for (a, s) in base.iter().zip(r.apply(&scaled).unwrap()) {
            assert!((a * 2.0 - s).norm() < 1e-12);
        }
        assert!(matches!(r.apply(&c.mesh.vertices), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn symmetrize_is_an_exact_projection() {
        let b = generate_toy_humanoid(0, Resolution::Fine);
        let c = generate_toy_humanoid(0, Resolution::Coarse);
        let sp = b.symmetry.partner_table(b.vertex_count()).unwrap();
        let tp = c.symmetry.partner_table(c.vertex_count()).unwrap();
        let mut r = init_between(&b, &c).unwrap();
        // break the symmetry on purpose
        for row in r.rows.iter_mut().step_by(3) {
            row[0].1 += 0.1;
            row.last_mut().unwrap().1 -= 0.1;
        }
        let s = r.symmetrize(&sp, &tp).unwrap();
        s.validate().unwrap();
        assert_eq!(s.mirror(&sp, &tp).unwrap(), s);
        assert_eq!(s.symmetrize(&sp, &tp).unwrap(), s);
    }

    #[test]
    fn bytes_round_trip() {
        let b = generate_toy_humanoid(0, Resolution::Fine);
        let c = generate_toy_humanoid(0, Resolution::Coarse);
        let r = init_between(&c, &b).unwrap();
        let back = SparseRegressor::from_bytes(&r.to_bytes()).unwrap();
        assert_eq!(back, r);
        let mut bytes = r.to_bytes();
        bytes.truncate(bytes.len() - 2);
        assert!(SparseRegressor::from_bytes(&bytes).is_err());
    }
}
