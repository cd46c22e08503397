//! Registration of the body model to point clouds.
//!
//! Each outer iteration matches every scan point to its closest point on the
//! current posed mesh, then takes a fixed number of damped Gauss–Newton (or
//! preconditioned gradient) steps on the Huber-robustified squared distances
//! with those matches held fixed. The inner optimizer only sees linear correspondences (a scan point
//! and a weighted set of model vertices), so the regressor reuses it with
//! regressor rows in place of closest points.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asset::{export_ply_with_scalar, triangulate, AssetBundle, PhenotypeSchema};
use crate::error::{Error, Result};
use crate::geometry::{build_bvh, triangle, Bvh, ClosestPoint, KdTree};
use crate::math::{log_so3, Mat3, Vec3};
use crate::pose::{Body, JacobianRequest, Pose};
use crate::shape::PhenotypeVector;
use crate::stats::BetaTable;

/// Points handled per parallel work item; fixed so sums do not depend on
/// the thread count.
const CHUNK: usize = 512;
const DIVERGENCE_PATIENCE: usize = 5;
const LATENT_LIMIT: f64 = 30.0;
const PROBE_POINTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionTag {
    Body,
    Head,
    Hand,
    Excluded,
}

impl std::str::FromStr for RegionTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "body" => Ok(Self::Body),
            "head" => Ok(Self::Head),
            "hand" => Ok(Self::Hand),
            "excluded" => Ok(Self::Excluded),
            other => Err(Error::Parse(format!("unknown region tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanCloud {
    pub points: Vec<Vec3>,
    /// One tag per point; `None` means every point is `Body`.
    pub tags: Option<Vec<RegionTag>>,
}

impl ScanCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, tags: None }
    }

    pub fn with_tags(points: Vec<Vec3>, tags: Vec<RegionTag>) -> Result<Self> {
        if tags.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                actual: tags.len(),
            });
        }
        Ok(Self {
            points,
            tags: Some(tags),
        })
    }

    pub fn tag(&self, i: usize) -> RegionTag {
        self.tags.as_ref().map_or(RegionTag::Body, |t| t[i])
    }

    /// Indices of points that are not in `excluded`.
    pub fn kept(&self, excluded: &[RegionTag]) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| !excluded.contains(&self.tag(i)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::Validation(vec![format!("scan point {i} is not finite")]));
        }
        Ok(())
    }

    /// Point cloud from PLY/OBJ plus an optional `point_index,tag` CSV.
    pub fn load(points: impl AsRef<Path>, tags: Option<&Path>) -> Result<Self> {
        let pts = crate::asset::read_point_cloud(points)?;
        let scan = match tags {
            Some(t) => {
                let tags = read_region_tags(t, pts.len())?;
                Self::with_tags(pts, tags)?
            }
            None => Self::new(pts),
        };
        scan.validate()?;
        Ok(scan)
    }
}

/// Sidecar tags: CSV with header `point_index,tag`; unlisted points are body.
pub fn read_region_tags(path: impl AsRef<Path>, count: usize) -> Result<Vec<RegionTag>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut tags = vec![RegionTag::Body; count];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let bad = || Error::Parse(format!("{}: malformed tag row {}", path.display(), row + 1));
        let i: usize = rec.get(0).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let tag: RegionTag = rec.get(1).ok_or_else(bad)?.parse()?;
        *tags.get_mut(i).ok_or_else(|| {
            Error::Parse(format!("tag row {}: point {i} out of range ({count} points)", row + 1))
        })? = tag;
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsHandling {
    Clamp,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Jacobi-preconditioned gradient descent with Armijo backtracking.
    GradientDescent,
    /// Damped Gauss–Newton on the IRLS-weighted residuals.
    LevenbergMarquardt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub optimizer: Optimizer,
    /// Outer iterations with all joints free.
    pub max_outer_iters: usize,
    /// Outer iterations beforehand with joints frozen (root and phenotypes).
    pub rigid_outer_iters: usize,
    pub inner_steps: usize,
    /// First trial step of the line search, relative to the preconditioned
    /// gradient step.
    pub step_size: f64,
    pub backtracking: bool,
    pub max_backtracks: usize,
    pub huber_delta: f64,
    pub prior_weight: f64,
    pub bounds: BoundsHandling,
    /// Stop a phase when the mean error improves by less than this (m).
    pub tolerance: f64,
    /// Random subset of scan points used for the objective, if set.
    pub max_points: Option<usize>,
    /// Without an explicit init, pick starting phenotypes by a coordinate
    /// search over grid nodes and cell midpoints.
    pub init_search: bool,
    /// Region tags left out of both the objective and the error.
    pub excluded: Vec<RegionTag>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::LevenbergMarquardt,
            max_outer_iters: 40,
            rigid_outer_iters: 10,
            inner_steps: 10,
            step_size: 1.0,
            backtracking: true,
            max_backtracks: 30,
            huber_delta: 0.005,
            prior_weight: 0.0,
            bounds: BoundsHandling::Sigmoid,
            tolerance: 1e-5,
            max_points: None,
            init_search: true,
            excluded: vec![RegionTag::Excluded],
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.max_outer_iters == 0 || self.inner_steps == 0 {
            problems.push("iteration counts must be positive".to_string());
        }
        if !(self.huber_delta > 0.0) {
            problems.push("huber_delta must be positive".into());
        }
        if !(self.step_size > 0.0) {
            problems.push("step_size must be positive".into());
        }
        if !(self.prior_weight >= 0.0) {
            problems.push("prior_weight must be non-negative".into());
        }
        if self.max_points == Some(0) {
            problems.push("max_points must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Beta prior per schema parameter; `None` leaves a parameter free.
#[derive(Debug, Clone, PartialEq)]
pub struct FitPrior {
    pub betas: Vec<Option<(f64, f64)>>,
}

impl FitPrior {
    pub fn from_table(table: &BetaTable, schema: &PhenotypeSchema, age_years: f64, gender: u8) -> Result<Self> {
        let ab = table.betas_at(age_years, gender)?;
        let mut betas = vec![None; schema.len()];
        for (name, pair) in table.params.iter().zip(ab) {
            let i = schema
                .index_of(name)
                .ok_or_else(|| Error::InvalidArgument(format!("prior parameter '{name}' is not in the schema")))?;
            betas[i] = Some(pair);
        }
        Ok(Self { betas })
    }

    /// Negative log density (up to constants), its derivative and a
    /// non-negative curvature estimate, at `p`.
    fn term(&self, i: usize, p: f64) -> (f64, f64, f64) {
        let Some((a, b)) = self.betas.get(i).copied().flatten() else {
            return (0.0, 0.0, 0.0);
        };
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        let q = 1.0 - p;
        let f = -(a - 1.0) * p.ln() - (b - 1.0) * q.ln();
        let g = -(a - 1.0) / p + (b - 1.0) / q;
        let h = ((a - 1.0) / (p * p) + (b - 1.0) / (q * q)).max(0.0);
        (f, g, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInit {
    pub phenotypes: Vec<f64>,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub phenotypes: PhenotypeVector,
    /// Dense phenotype values in schema order.
    pub params: Vec<f64>,
    pub pose: Pose,
    /// Scan indices of the evaluated (non-excluded) points.
    pub point_indices: Vec<usize>,
    pub point_to_mesh_errors: Vec<f64>,
    pub mean_error: f64,
    pub iterations_used: usize,
    /// Mean error at the start of every outer iteration.
    pub history: Vec<f64>,
    pub stop: StopReason,
    /// Final posed mesh and the evaluated points, for reporting.
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 4]>,
    pub points: Vec<Vec3>,
}

/// Scan points tied to linear combinations of model vertices, in CSR form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearCorrespondences {
    pub points: Vec<Vec3>,
    /// Relative weight of each correspondence in the objective.
    pub weights: Vec<f64>,
    pub offsets: Vec<usize>,
    pub terms: Vec<(u32, f64)>,
}

impl LinearCorrespondences {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            ..Self::default()
        }
    }

    pub fn push(&mut self, point: Vec3, terms: impl IntoIterator<Item = (u32, f64)>) {
        self.push_weighted(point, 1.0, terms);
    }

    pub fn push_weighted(&mut self, point: Vec3, weight: f64, terms: impl IntoIterator<Item = (u32, f64)>) {
        self.points.push(point);
        self.weights.push(weight);
        self.terms.extend(terms);
        self.offsets.push(self.terms.len());
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn terms(&self, i: usize) -> &[(u32, f64)] {
        &self.terms[self.offsets[i]..self.offsets[i + 1]]
    }

    fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn model_point(&self, i: usize, vertices: &[Vec3]) -> Vec3 {
        self.terms(i).iter().map(|&(v, w)| vertices[v as usize] * w).sum()
    }
}

fn huber(d: f64, delta: f64) -> f64 {
    if d <= delta {
        0.5 * d * d
    } else {
        delta * (d - 0.5 * delta)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln().clamp(-LATENT_LIMIT, LATENT_LIMIT)
}

/// Least-squares style objective over `(phenotypes, pose)` with fixed
/// linear correspondences. Variables are the phenotype latents followed by
/// the flat pose parameters.
pub struct Objective<'a> {
    pub body: &'a Body,
    pub corr: &'a LinearCorrespondences,
    pub huber_delta: f64,
    pub bounds: BoundsHandling,
    pub prior: Option<&'a FitPrior>,
    pub prior_weight: f64,
}

impl Objective<'_> {
    fn phen_count(&self) -> usize {
        self.body.shape.param_count()
    }

    pub fn encode(&self, phenotypes: &[f64], pose: &Pose) -> Vec<f64> {
        let mut x: Vec<f64> = match self.bounds {
            BoundsHandling::Sigmoid => phenotypes.iter().map(|&p| logit(p)).collect(),
            BoundsHandling::Clamp => phenotypes.to_vec(),
        };
        x.extend(pose.to_params());
        x
    }

    pub fn decode(&self, x: &[f64]) -> Result<(Vec<f64>, Pose)> {
        let np = self.phen_count();
        let phen = x[..np]
            .iter()
            .map(|&z| match self.bounds {
                BoundsHandling::Sigmoid => sigmoid(z),
                BoundsHandling::Clamp => z.clamp(0.0, 1.0),
            })
            .collect();
        Ok((phen, Pose::from_params(&x[np..], self.body.bone_count())?))
    }

    /// Keep the variables inside their admissible box.
    fn project(&self, x: &mut [f64]) {
        let np = self.phen_count();
        for z in &mut x[..np] {
            *z = match self.bounds {
                BoundsHandling::Sigmoid => z.clamp(-LATENT_LIMIT, LATENT_LIMIT),
                BoundsHandling::Clamp => z.clamp(0.0, 1.0),
            };
        }
    }

    fn prior_value(&self, phen: &[f64]) -> f64 {
        match self.prior {
            Some(p) if self.prior_weight > 0.0 => {
                self.prior_weight * phen.iter().enumerate().map(|(i, &v)| p.term(i, v).0).sum::<f64>()
            }
            _ => 0.0,
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let (phen, pose) = self.decode(x)?;
        let v = self.body.eval(&phen, &pose, JacobianRequest::NONE)?.vertices;
        let n = self.corr.len();
        let partial: Vec<f64> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                idx.iter()
                    .map(|&i| {
                        let d = (self.corr.points[i] - self.corr.model_point(i, &v)).norm();
                        self.corr.weights[i] * huber(d, self.huber_delta)
                    })
                    .sum::<f64>()
            })
            .collect();
        Ok(partial.iter().sum::<f64>() / self.corr.total_weight() + self.prior_value(&phen))
    }

    /// Value, gradient and Gauss–Newton curvature over the `free`
    /// variables. The curvature is the diagonal (length `nx`) unless `full`
    /// is set, in which case it is the dense `nx × nx` matrix, row-major.
    /// Entries for variables not in `free` are zero.
    pub fn linearize(&self, x: &[f64], free: &[bool], full: bool) -> Result<Linearization> {
        let (phen, pose) = self.decode(x)?;
        let np = phen.len();
        let nx = x.len();
        let want = JacobianRequest {
            pose: free[np..].iter().any(|&f| f),
            shape: free[..np].iter().any(|&f| f),
        };
        let out = self.body.eval(&phen, &pose, want)?;
        let v = &out.vertices;
        // d phenotype / d latent
        let chain: Vec<f64> = phen
            .iter()
            .map(|&p| match self.bounds {
                BoundsHandling::Sigmoid => p * (1.0 - p),
                BoundsHandling::Clamp => 1.0,
            })
            .collect();
        let columns: Vec<usize> = (0..nx).filter(|&j| free[j]).collect();
        let nc = columns.len();
        let hlen = if full { nx * nx } else { nx };
        let n = self.corr.len();
        let partial: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut f = 0.0;
                let mut g = vec![0.0; nx];
                let mut h = vec![0.0; hlen];
                let mut dm = vec![Vec3::zeros(); nc];
                for &i in idx {
                    let e = self.corr.points[i] - self.corr.model_point(i, v);
                    let d = e.norm();
                    let cw = self.corr.weights[i];
                    f += cw * huber(d, self.huber_delta);
                    // IRLS weight of the Huber loss
                    let w = cw * if d <= self.huber_delta { 1.0 } else { self.huber_delta / d };
                    for (c, &j) in columns.iter().enumerate() {
                        dm[c] = Vec3::zeros();
                        for &(vi, b) in self.corr.terms(i) {
                            let col = if j < np {
                                out.shape_jacobian.as_ref().expect("requested")[j][vi as usize] * chain[j]
                            } else {
                                out.pose_jacobian.as_ref().expect("requested").column(vi as usize, j - np)
                            };
                            dm[c] += col * b;
                        }
                        g[j] -= w * e.dot(&dm[c]);
                    }
                    if full {
                        for (a, &ja) in columns.iter().enumerate() {
                            for (b, &jb) in columns.iter().enumerate().skip(a) {
                                h[ja * nx + jb] += w * dm[a].dot(&dm[b]);
                            }
                        }
                    } else {
                        for (c, &j) in columns.iter().enumerate() {
                            h[j] += w * dm[c].norm_squared();
                        }
                    }
                }
                (f, g, h)
            })
            .collect();
        let mut f = 0.0;
        let mut g = vec![0.0; nx];
        let mut h = vec![0.0; hlen];
        for (pf, pg, ph) in partial {
            f += pf;
            g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
            h.iter_mut().zip(&ph).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / self.corr.total_weight();
        f *= inv;
        g.iter_mut().chain(h.iter_mut()).for_each(|x| *x *= inv);
        if full {
            for a in 0..nx {
                for b in 0..a {
                    h[a * nx + b] = h[b * nx + a];
                }
            }
        }
        if let Some(prior) = self.prior.filter(|_| self.prior_weight > 0.0) {
            f += self.prior_value(&phen);
            for j in 0..np {
                let (_, pg, ph) = prior.term(j, phen[j]);
                if free[j] {
                    g[j] += self.prior_weight * pg * chain[j];
                    let k = if full { j * nx + j } else { j };
                    h[k] += self.prior_weight * ph * chain[j] * chain[j];
                }
            }
        }
        Ok(Linearization { value: f, gradient: g, curvature: h })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub curvature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub step_size: f64,
    pub backtracking: bool,
    pub max_backtracks: usize,
}

impl From<&FitConfig> for StepSettings {
    fn from(c: &FitConfig) -> Self {
        Self {
            optimizer: c.optimizer,
            steps: c.inner_steps,
            step_size: c.step_size,
            backtracking: c.backtracking,
            max_backtracks: c.max_backtracks,
        }
    }
}

fn trial(obj: &Objective, x: &[f64], dir: &[f64], a: f64) -> Result<(Vec<f64>, f64)> {
    let mut t: Vec<f64> = x.iter().zip(dir).map(|(x, d)| x + a * d).collect();
    obj.project(&mut t);
    let f = obj.value(&t)?;
    Ok((t, f))
}

/// Inner minimization with correspondences held fixed. Returns the
/// objective after every accepted step (starting value first); accepted
/// steps never increase it when backtracking is on.
pub fn descend(obj: &Objective, x: &mut Vec<f64>, free: &[bool], s: StepSettings) -> Result<Vec<f64>> {
    match s.optimizer {
        Optimizer::GradientDescent => gradient_descent(obj, x, free, s),
        Optimizer::LevenbergMarquardt => levenberg_marquardt(obj, x, free, s),
    }
}

fn gradient_descent(obj: &Objective, x: &mut Vec<f64>, free: &[bool], s: StepSettings) -> Result<Vec<f64>> {
    let mut trace = Vec::new();
    let mut alpha = s.step_size;
    for _ in 0..s.steps {
        let lin = obj.linearize(x, free, false)?;
        let (f, g, h) = (lin.value, lin.gradient, lin.curvature);
        if trace.is_empty() {
            trace.push(f);
        }
        let hmax = h.iter().cloned().fold(0.0, f64::max);
        let damping = 1e-9 * hmax + 1e-300;
        let dir: Vec<f64> = g
            .iter()
            .zip(&h)
            .zip(free)
            .map(|((g, h), &free)| if free { -g / (h + damping) } else { 0.0 })
            .collect();
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            break;
        }
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..=s.max_backtracks {
            let (t, ft) = trial(obj, x, &dir, a)?;
            if !s.backtracking || ft <= f + 1e-4 * a * slope {
                accepted = Some((t, ft));
                break;
            }
            a *= 0.5;
        }
        let Some((t, ft)) = accepted else { break };
        *x = t;
        trace.push(ft);
        // let the step grow back after successful short steps
        alpha = (a * 2.0).min(s.step_size);
    }
    Ok(trace)
}

fn levenberg_marquardt(obj: &Objective, x: &mut Vec<f64>, free: &[bool], s: StepSettings) -> Result<Vec<f64>> {
    let nx = x.len();
    let cols: Vec<usize> = (0..nx).filter(|&j| free[j]).collect();
    let nc = cols.len();
    let mut trace = Vec::new();
    let mut lambda = 1e-3;
    for _ in 0..s.steps {
        let lin = obj.linearize(x, free, true)?;
        let f = lin.value;
        if trace.is_empty() {
            trace.push(f);
        }
        let h = DMatrix::from_fn(nc, nc, |a, b| lin.curvature[cols[a] * nx + cols[b]]);
        let g = DVector::from_fn(nc, |a, _| lin.gradient[cols[a]]);
        let diag_max = (0..nc).map(|a| h[(a, a)]).fold(0.0, f64::max);
        let mut accepted = None;
        for _ in 0..=s.max_backtracks {
            let mut damped = h.clone();
            for a in 0..nc {
                damped[(a, a)] += lambda * h[(a, a)].max(1e-12 * diag_max) + 1e-300;
            }
            let step = damped.cholesky().map(|c| -c.solve(&g));
            if let Some(step) = step {
                let mut dir = vec![0.0; nx];
                for (a, &j) in cols.iter().enumerate() {
                    dir[j] = step[a] * s.step_size;
                }
                let (t, ft) = trial(obj, x, &dir, 1.0)?;
                if !s.backtracking || ft < f {
                    accepted = Some((t, ft));
                    lambda = (lambda / 3.0).max(1e-12);
                    break;
                }
            }
            lambda *= 4.0;
        }
        let Some((t, ft)) = accepted else { break };
        *x = t;
        trace.push(ft);
    }
    Ok(trace)
}

/// Uniform samples on a triangle mesh surface.
pub fn sample_surface(vertices: &[Vec3], triangles: &[[u32; 3]], count: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    let areas: Vec<f64> = triangles
        .iter()
        .map(|t| {
            let [a, b, c] = triangle(vertices, t);
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::Degenerate(format!("cannot sample surface: {e}")))?;
    Ok((0..count)
        .map(|_| {
            let [a, b, c] = triangle(vertices, &triangles[rng.sample(&pick)]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}

/// Area-weighted centroid and second-moment covariance of a surface.
fn surface_moments(vertices: &[Vec3], triangles: &[[u32; 3]]) -> (Vec3, Mat3) {
    let mut area = 0.0;
    let mut first = Vec3::zeros();
    let mut second = Mat3::zeros();
    for t in triangles {
        let [a, b, c] = triangle(vertices, t);
        let ar = 0.5 * (b - a).cross(&(c - a)).norm();
        let s = a + b + c;
        area += ar;
        first += s * (ar / 3.0);
        second += (a * a.transpose() + b * b.transpose() + c * c.transpose() + s * s.transpose()) * (ar / 12.0);
    }
    let mean = first / area;
    (mean, second / area - mean * mean.transpose())
}

fn point_moments(points: &[Vec3]) -> (Vec3, Mat3) {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Mat3>()
        / n;
    (mean, cov)
}

fn principal_axes(cov: &Mat3) -> Mat3 {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Mat3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()))
}

fn mean_distance(points: &[Vec3], vertices: &[Vec3], triangles: &[[u32; 3]], bvh: &Bvh) -> f64 {
    points
        .par_iter()
        .map(|p| bvh.closest_point(p, vertices, triangles).distance)
        .sum::<f64>()
        / points.len() as f64
}

/// Root pose that aligns the model's surface centroid and principal axes
/// with the scan. Candidate rotations (identity and the sign choices of the
/// principal-axis match) are scored on a subset of the scan.
pub fn align_root(body: &Body, phenotypes: &[f64], points: &[Vec3], seed: u64) -> Result<Pose> {
    let nb = body.bone_count();
    let rest = body.eval(phenotypes, &Pose::identity(nb), JacobianRequest::NONE)?.vertices;
    let tris = triangulate(&body.faces);
    let (cm, covm) = surface_moments(&rest, &tris);
    let (cs, covs) = point_moments(points);
    let em = principal_axes(&covm);
    let es = principal_axes(&covs);
    let mut candidates = vec![Mat3::identity()];
    for signs in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
        let s = Mat3::from_diagonal(&Vec3::from(signs));
        let mut r = es * s * em.transpose();
        if r.determinant() < 0.0 {
            r = es * s * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0)) * em.transpose();
        }
        candidates.push(r);
    }
    let probe = probe_subset(points, seed);
    let mut best: Option<(f64, Pose)> = None;
    for r in candidates {
        let rot = log_so3(&r);
        // rotation about the origin, then move the centroid onto the scan's
        let pose = Pose {
            root_rotation: rot,
            root_translation: cs - r * cm,
            joint_rotations: vec![Vec3::zeros(); nb],
        };
        let v = body.eval(phenotypes, &pose, JacobianRequest::NONE)?.vertices;
        let bvh = build_bvh(&v, &tris)?;
        let score = mean_distance(&probe, &v, &tris, &bvh);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, pose));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

fn probe_subset(points: &[Vec3], seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if points.len() > PROBE_POINTS {
        sample(&mut rng, points.len(), PROBE_POINTS).into_iter().map(|i| points[i]).collect()
    } else {
        points.to_vec()
    }
}

/// Starting phenotypes and root pose from two coordinate sweeps over each
/// parameter's grid nodes and cell midpoints, each candidate rigidly
/// aligned and scored by mean scan-to-model distance on a probe subset.
/// Hat interpolation has kinks at grid nodes, so local descent started on
/// a node can head the wrong way; the sweep avoids that.
pub fn search_init(body: &Body, points: &[Vec3], seed: u64) -> Result<FitInit> {
    let probe = probe_subset(points, seed);
    let tris = triangulate(&body.faces);
    let score = |phen: &[f64]| -> Result<(f64, Pose)> {
        let pose = align_root(body, phen, points, seed)?;
        let v = body.eval(phen, &pose, JacobianRequest::NONE)?.vertices;
        let bvh = build_bvh(&v, &tris)?;
        Ok((mean_distance(&probe, &v, &tris, &bvh), pose))
    };
    let mut phen = body.shape.neutral().to_vec();
    let mut best = score(&phen)?;
    for _ in 0..2 {
        for p in 0..phen.len() {
            let grid = body.shape.grid(p);
            let mut values: Vec<f64> = grid.to_vec();
            values.extend(grid.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            for v in values {
                if v == phen[p] {
                    continue;
                }
                let mut trial = phen.clone();
                trial[p] = v;
                let s = score(&trial)?;
                if s.0 < best.0 {
                    best = s;
                    phen = trial;
                }
            }
        }
    }
    Ok(FitInit {
        phenotypes: phen,
        pose: best.1,
    })
}

/// Closest points on the posed mesh for every given scan point.
pub fn closest_points(points: &[Vec3], vertices: &[Vec3], triangles: &[[u32; 3]]) -> Result<Vec<ClosestPoint>> {
    let bvh = build_bvh(vertices, triangles)?;
    Ok(points.par_iter().map(|p| bvh.closest_point(p, vertices, triangles)).collect())
}

/// Register `bundle` to `scan`.
pub fn fit_scan(
    bundle: &AssetBundle,
    scan: &ScanCloud,
    config: &FitConfig,
    prior: Option<&FitPrior>,
    init: Option<FitInit>,
) -> Result<FitResult> {
    fit_body(&Body::new(bundle), &bundle.schema, scan, config, prior, init)
}

pub fn fit_body(
    body: &Body,
    schema: &PhenotypeSchema,
    scan: &ScanCloud,
    config: &FitConfig,
    prior: Option<&FitPrior>,
    init: Option<FitInit>,
) -> Result<FitResult> {
    config.validate()?;
    scan.validate()?;
    let kept = scan.kept(&config.excluded);
    if kept.is_empty() {
        return Err(Error::Degenerate("every scan point is excluded".into()));
    }
    let points: Vec<Vec3> = kept.iter().map(|&i| scan.points[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let active: Vec<usize> = match config.max_points {
        Some(m) if m < points.len() => {
            let mut s = sample(&mut rng, points.len(), m).into_vec();
            s.sort_unstable();
            s
        }
        _ => (0..points.len()).collect(),
    };
    let tris = triangulate(&body.faces);
    let init = match init {
        Some(i) => i,
        None => {
            let seed = rng.random();
            if config.init_search {
                search_init(body, &points, seed)?
            } else {
                let phen = body.shape.neutral().to_vec();
                let pose = align_root(body, &phen, &points, seed)?;
                FitInit { phenotypes: phen, pose }
            }
        }
    };
    let np = body.shape.param_count();
    let nb = body.bone_count();
    if init.phenotypes.len() != np {
        return Err(Error::DimensionMismatch {
            expected: np,
            actual: init.phenotypes.len(),
        });
    }
    init.pose.check(nb)?;

    let mut corr = LinearCorrespondences::new();
    let mut x = {
        let obj = objective(body, &corr, config, prior);
        obj.encode(&init.phenotypes, &init.pose)
    };
    let nx = x.len();
    let rigid: Vec<bool> = (0..nx).map(|j| j < np + 6).collect();
    let all = vec![true; nx];

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, x.clone());
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    'phases: for (free, iters) in [(&rigid, config.rigid_outer_iters), (&all, config.max_outer_iters)] {
        let mut prev = f64::INFINITY;
        let mut worse = 0;
        for _ in 0..iters {
            let obj = objective(body, &corr, config, prior);
            let (phen, pose) = obj.decode(&x)?;
            let v = body.eval(&phen, &pose, JacobianRequest::NONE)?.vertices;
            let cps = closest_points(&points, &v, &tris)?;
            let mean = cps.iter().map(|c| c.distance).sum::<f64>() / cps.len() as f64;
            history.push(mean);
            if mean < best.0 {
                best = (mean, x.clone());
            }
            worse = if mean > prev { worse + 1 } else { 0 };
            if worse >= DIVERGENCE_PATIENCE {
                stop = StopReason::Diverged;
                break 'phases;
            }
            if prev - mean < config.tolerance && mean <= prev {
                stop = StopReason::Converged;
                break;
            }
            prev = mean;
            iterations += 1;
            corr = LinearCorrespondences::new();
            for &i in &active {
                let c = &cps[i];
                let t = tris[c.triangle as usize];
                corr.push(points[i], (0..3).map(|k| (t[k], c.barycentric[k])));
            }
            let obj = objective(body, &corr, config, prior);
            descend(&obj, &mut x, free, config.into())?;
        }
    }
    if stop != StopReason::Diverged {
        // the last inner loop may have improved on the best recorded start
        let obj = objective(body, &corr, config, prior);
        let (phen, pose) = obj.decode(&x)?;
        let v = body.eval(&phen, &pose, JacobianRequest::NONE)?.vertices;
        let mean = closest_points(&points, &v, &tris)?.iter().map(|c| c.distance).sum::<f64>() / points.len() as f64;
        if mean < best.0 {
            best = (mean, x.clone());
        }
    }

    let obj = objective(body, &corr, config, prior);
    let (params, pose) = obj.decode(&best.1)?;
    let vertices = body.eval(&params, &pose, JacobianRequest::NONE)?.vertices;
    let errors: Vec<f64> = closest_points(&points, &vertices, &tris)?.iter().map(|c| c.distance).collect();
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(FitResult {
        phenotypes: PhenotypeVector::from_dense(schema, &params),
        params,
        pose,
        point_indices: kept,
        point_to_mesh_errors: errors,
        mean_error,
        iterations_used: iterations,
        history,
        stop,
        vertices,
        faces: body.faces.clone(),
        points,
    })
}

fn objective<'a>(
    body: &'a Body,
    corr: &'a LinearCorrespondences,
    config: &FitConfig,
    prior: Option<&'a FitPrior>,
) -> Objective<'a> {
    Objective {
        body,
        corr,
        huber_delta: config.huber_delta,
        bounds: config.bounds,
        prior,
        prior_weight: config.prior_weight,
    }
}

/// Error of the nearest evaluated scan point, per mesh vertex.
pub fn vertex_error_field(result: &FitResult) -> Vec<f64> {
    let tree = KdTree::new(&result.points);
    result
        .vertices
        .par_iter()
        .map(|v| tree.nearest(v).map_or(0.0, |(i, _)| result.point_to_mesh_errors[i]))
        .collect()
}

/// Per-point errors as CSV (`point_index,x,y,z,error_m`) and the posed mesh
/// as PLY with a per-vertex `error` property.
pub fn fit_report(result: &FitResult, csv_path: impl AsRef<Path>, ply_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    let mut out = String::from("point_index,x,y,z,error_m\n");
    for ((i, p), e) in result.point_indices.iter().zip(&result.points).zip(&result.point_to_mesh_errors) {
        out.push_str(&format!("{i},{},{},{},{e}\n", p.x, p.y, p.z));
    }
    let mut f = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(csv_path, e))?;
    export_ply_with_scalar(&result.vertices, &result.faces, "error", &vertex_error_field(result), ply_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asset::{generate_toy_humanoid, Resolution};

    #[test]
    fn huber_is_continuous_at_delta() {
        let d = 0.005;
        assert!((huber(d - 1e-12, d) - huber(d + 1e-12, d)).abs() < 1e-13);
        assert_eq!(huber(0.0, d), 0.0);
    }

    #[test]
    fn latent_round_trip() {
        for p in [0.01, 0.3, 0.5, 0.99] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-14);
        }
    }

    #[test]
    fn excluded_points_leave_nothing() {
        let b = generate_toy_humanoid(0, Resolution::Coarse);
        let pts = vec![Vec3::new(0.0, 1.0, 0.0); 3];
        let scan = ScanCloud::with_tags(pts, vec![RegionTag::Excluded; 3]).unwrap();
        let err = fit_scan(&b, &scan, &FitConfig::default(), None, None).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = generate_toy_humanoid(0, Resolution::Coarse);
        let body = Body::new(&b);
        let tris = b.mesh.triangles();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_surface(&b.mesh.vertices, &tris, 300, &mut rng).unwrap();
        let cps = closest_points(&pts, &b.mesh.vertices, &tris).unwrap();
        let mut corr = LinearCorrespondences::new();
        for (p, c) in pts.iter().zip(&cps) {
            let t = tris[c.triangle as usize];
            // shift the scan point so some residuals exceed the Huber knee
            let q = p + Vec3::new(0.004, -0.01 * rng.random::<f64>(), 0.002);
            corr.push(q, (0..3).map(|k| (t[k], c.barycentric[k])));
        }
        let prior = FitPrior {
            betas: vec![Some((2.0, 3.0)), None],
        };
        let obj = Objective {
            body: &body,
            corr: &corr,
            huber_delta: 0.005,
            bounds: BoundsHandling::Sigmoid,
            prior: Some(&prior),
            prior_weight: 1e-4,
        };
        let mut pose = Pose::identity(body.bone_count());
        pose.joint_rotations[3] = Vec3::new(0.1, 0.2, -0.3);
        let x = obj.encode(&[0.3, 0.6], &pose);
        let free = vec![true; x.len()];
        let g = obj.linearize(&x, &free, false).unwrap().gradient;
        for j in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (obj.value(&xp).unwrap() - obj.value(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn descent_never_increases_the_objective() {
        let b = generate_toy_humanoid(0, Resolution::Coarse);
        let body = Body::new(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = body
            .eval(&[0.7, 0.2], &Pose::identity(body.bone_count()), JacobianRequest::NONE)
            .unwrap()
            .vertices;
        let mut corr = LinearCorrespondences::new();
        for _ in 0..400 {
            let v = rng.random_range(0..target.len()) as u32;
            corr.push(target[v as usize], [(v, 1.0)]);
        }
        let obj = Objective {
            body: &body,
            corr: &corr,
            huber_delta: 0.005,
            bounds: BoundsHandling::Clamp,
            prior: None,
            prior_weight: 0.0,
        };
        let mut x = obj.encode(&[0.5, 0.5], &Pose::identity(body.bone_count()));
        let free = vec![true; x.len()];
        let trace = descend(
            &obj,
            &mut x,
            &free,
            StepSettings {
                optimizer: Optimizer::GradientDescent,
                steps: 30,
                step_size: 1.0,
                backtracking: true,
                max_backtracks: 30,
            },
        )
        .unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(trace.last().unwrap() < &(trace[0] * 0.1));
    }
}
