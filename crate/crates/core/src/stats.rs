//! Phenotype distributions: Beta laws per (age bucket, gender), calibrated by
//! Monte-Carlo pushforward against height / BMI reference tables, and body
//! sampling.
//!
//! Growth-target CSV header:
//! `age_months,gender,height_mean_m,height_sd_m,bmi_mean,bmi_sd`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::inv_beta_reg;

use crate::asset::AssetBundle;
use crate::error::{Error, Result};
use crate::shape::{measure, PhenotypeVector, ShapeModel, DEFAULT_DENSITY};

pub const BETA_TABLE_FORMAT: &str = "phenobody-beta-table";
pub const BETA_TABLE_VERSION: u32 = 1;
pub const DEFAULT_MC_SAMPLES: usize = 2048;
/// Relative tolerances on the pushforward statistics.
pub const MEAN_TOLERANCE: f64 = 0.02;
pub const SD_TOLERANCE: f64 = 0.10;

/// `(alpha, beta)` with the requested mean and standard deviation.
pub fn fit_beta_moments(mean: f64, sd: f64) -> Result<(f64, f64)> {
    let var = sd * sd;
    if !(mean > 0.0 && mean < 1.0 && sd > 0.0 && var < mean * (1.0 - mean)) {
        return Err(Error::InfeasibleMoments { mean, sd });
    }
    let k = mean * (1.0 - mean) / var - 1.0;
    Ok((mean * k, (1.0 - mean) * k))
}

/// Mean and standard deviation of Beta(alpha, beta).
pub fn beta_moments(alpha: f64, beta: f64) -> (f64, f64) {
    let s = alpha + beta;
    (alpha / s, (alpha * beta / (s * s * (s + 1.0))).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub age_months: u32,
    pub gender: u8,
    #[serde(rename = "height_mean_m")]
    pub height_mean: f64,
    #[serde(rename = "height_sd_m")]
    pub height_sd: f64,
    pub bmi_mean: f64,
    pub bmi_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GrowthTargets {
    pub rows: Vec<GrowthRow>,
}

impl GrowthTargets {
    /// Check every row; row numbers in messages are 1-based data rows.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut last: [Option<u32>; 2] = [None, None];
        for (i, r) in self.rows.iter().enumerate() {
            let n = i + 1;
            if r.gender > 1 {
                problems.push(format!("row {n}: gender must be 0 or 1, got {}", r.gender));
                continue;
            }
            for (name, v) in [("height_sd_m", r.height_sd), ("bmi_sd", r.bmi_sd)] {
                if !(v > 0.0 && v.is_finite()) {
                    problems.push(format!("row {n}: {name} must be positive, got {v}"));
                }
            }
            for (name, v) in [("height_mean_m", r.height_mean), ("bmi_mean", r.bmi_mean)] {
                if !(v > 0.0 && v.is_finite()) {
                    problems.push(format!("row {n}: {name} must be positive, got {v}"));
                }
            }
            let g = r.gender as usize;
            if let Some(prev) = last[g] {
                if r.age_months <= prev {
                    problems.push(format!(
                        "row {n}: ages for gender {g} must increase ({} after {prev})",
                        r.age_months
                    ));
                }
            }
            last[g] = Some(r.age_months);
        }
        if self.rows.is_empty() {
            problems.push("no growth-target rows".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let expected = ["age_months", "gender", "height_mean_m", "height_sd_m", "bmi_mean", "bmi_sd"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse(format!(
                "growth targets header must be '{}'",
                expected.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize().enumerate() {
            rows.push(rec.map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?);
        }
        let t = Self { rows };
        t.validate()?;
        Ok(t)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub fn load_growth_targets(path: impl AsRef<Path>) -> Result<GrowthTargets> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    GrowthTargets::from_reader(file)
}

/// Piecewise-linear map between age in years and the age parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgeMap {
    /// `(years, parameter)` knots, strictly increasing in both.
    pub knots: Vec<(f64, f64)>,
}

impl Default for AgeMap {
    fn default() -> Self {
        Self {
            knots: vec![(0.0, 0.0), (1.0, 1.0 / 6.0), (6.0, 1.0 / 3.0), (16.0, 2.0 / 3.0), (70.0, 1.0)],
        }
    }
}

fn interp(knots: &[(f64, f64)], x: f64, from: impl Fn(&(f64, f64)) -> f64, to: impl Fn(&(f64, f64)) -> f64) -> Option<f64> {
    let first = from(&knots[0]);
    let last = from(knots.last()?);
    if !(x >= first && x <= last) {
        return None;
    }
    let i = knots[1..knots.len() - 1].partition_point(|k| from(k) <= x);
    let (a, b) = (&knots[i], &knots[i + 1]);
    let t = (x - from(a)) / (from(b) - from(a));
    Some(to(a) + t * (to(b) - to(a)))
}

impl AgeMap {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        let m = Self { knots };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::Validation(vec!["age map needs at least 2 knots".into()]));
        }
        if self
            .knots
            .windows(2)
            .any(|w| !(w[0].0 < w[1].0 && w[0].1 < w[1].1))
        {
            return Err(Error::Validation(vec![
                "age map knots must increase strictly in years and parameter".into(),
            ]));
        }
        if self.knots.iter().any(|k| !(0.0..=1.0).contains(&k.1)) {
            return Err(Error::Validation(vec!["age map parameters must lie in [0, 1]".into()]));
        }
        Ok(())
    }

    pub fn to_param(&self, years: f64) -> Result<f64> {
        interp(&self.knots, years, |k| k.0, |k| k.1).ok_or_else(|| {
            Error::InvalidArgument(format!("age {years} years is outside the age map"))
        })
    }

    pub fn to_years(&self, param: f64) -> Result<f64> {
        interp(&self.knots, param, |k| k.1, |k| k.0).ok_or_else(|| {
            Error::InvalidArgument(format!("age parameter {param} is outside the age map"))
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: AgeMap = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub param: String,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaBucket {
    pub age_months: u32,
    pub gender: u8,
    pub betas: Vec<BetaParams>,
}

/// Calibrated Beta laws, serialized as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaTable {
    pub format: String,
    pub version: u32,
    /// Schema parameter driven by the age map.
    pub age_param: String,
    /// Schema parameter set to the gender value (0 or 1), if any.
    pub gender_param: Option<String>,
    pub age_map: AgeMap,
    /// Calibrated parameters, in the order used by every bucket.
    pub params: Vec<String>,
    pub buckets: Vec<BetaBucket>,
}

impl BetaTable {
    pub fn new(age_map: AgeMap, params: Vec<String>) -> Self {
        Self {
            format: BETA_TABLE_FORMAT.into(),
            version: BETA_TABLE_VERSION,
            age_param: "age".into(),
            gender_param: None,
            age_map,
            params,
            buckets: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.format != BETA_TABLE_FORMAT {
            problems.push(format!("unexpected format '{}'", self.format));
        }
        if self.version != BETA_TABLE_VERSION {
            problems.push(format!("unsupported beta table version {}", self.version));
        }
        for (i, b) in self.buckets.iter().enumerate() {
            let names: Vec<&str> = b.betas.iter().map(|p| p.param.as_str()).collect();
            if names != self.params.iter().map(String::as_str).collect::<Vec<_>>() {
                problems.push(format!("bucket {i} does not list the table parameters in order"));
            }
            for p in &b.betas {
                if !(p.alpha > 0.0 && p.beta > 0.0 && p.alpha.is_finite() && p.beta.is_finite()) {
                    problems.push(format!("bucket {i}: non-positive Beta parameters for '{}'", p.param));
                }
            }
        }
        if let Err(Error::Validation(mut p)) = self.age_map.validate() {
            problems.append(&mut p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Check that the covered parameters exist in `bundle`'s schema.
    pub fn check_schema(&self, bundle: &AssetBundle) -> Result<()> {
        let missing: Vec<String> = self
            .params
            .iter()
            .chain(std::iter::once(&self.age_param))
            .chain(self.gender_param.iter())
            .filter(|p| bundle.schema.index_of(p).is_none())
            .map(|p| format!("beta table parameter '{p}' is not in the schema"))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(missing))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: BetaTable = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `(alpha, beta)` per parameter at `age_years`, linearly interpolated
    /// between the bracketing buckets of `gender`.
    pub fn betas_at(&self, age_years: f64, gender: u8) -> Result<Vec<(f64, f64)>> {
        let buckets: Vec<&BetaBucket> = self.buckets.iter().filter(|b| b.gender == gender).collect();
        let out_of_range = || {
            Error::InvalidArgument(format!(
                "age {age_years} years is outside the calibrated range for gender {gender}"
            ))
        };
        let (first, last) = match (buckets.first(), buckets.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(out_of_range()),
        };
        let years = |b: &BetaBucket| b.age_months as f64 / 12.0;
        if !(age_years >= years(first) && age_years <= years(last)) {
            return Err(out_of_range());
        }
        let i = buckets[..buckets.len() - 1]
            .partition_point(|b| years(b) <= age_years)
            .saturating_sub(1);
        let a = buckets[i];
        let Some(b) = buckets.get(i + 1) else {
            return Ok(a.betas.iter().map(|p| (p.alpha, p.beta)).collect());
        };
        let t = (age_years - years(a)) / (years(b) - years(a));
        Ok(a.betas
            .iter()
            .zip(&b.betas)
            .map(|(p, q)| (p.alpha + t * (q.alpha - p.alpha), p.beta + t * (q.beta - p.beta)))
            .collect())
    }
}

/// Draw a body: age from the age map, calibrated parameters from their
/// (bucket-interpolated) Beta laws; everything else stays neutral.
pub fn sample_body(table: &BetaTable, age_years: f64, gender: u8, age_map: &AgeMap, seed: u64) -> Result<PhenotypeVector> {
    let betas = table.betas_at(age_years, gender)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PhenotypeVector::new().with(&table.age_param, age_map.to_param(age_years)?);
    if let Some(g) = &table.gender_param {
        out.set(g, gender as f64);
    }
    for (name, &(a, b)) in table.params.iter().zip(&betas) {
        let d = Beta::new(a, b).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.set(name, d.sample(&mut rng).clamp(0.0, 1.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushforwardStats {
    pub height_mean: f64,
    pub height_sd: f64,
    pub bmi_mean: f64,
    pub bmi_sd: f64,
}

impl PushforwardStats {
    fn from_samples(h: &[f64], bmi: &[f64]) -> Self {
        let ms = |x: &[f64]| {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            (m, (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
        };
        let (height_mean, height_sd) = ms(h);
        let (bmi_mean, bmi_sd) = ms(bmi);
        Self {
            height_mean,
            height_sd,
            bmi_mean,
            bmi_sd,
        }
    }

    /// Sum of squared residuals, each normalized by the target SD.
    pub fn objective(&self, t: &GrowthRow) -> f64 {
        let r = [
            (self.height_mean - t.height_mean) / t.height_sd,
            (self.height_sd - t.height_sd) / t.height_sd,
            (self.bmi_mean - t.bmi_mean) / t.bmi_sd,
            (self.bmi_sd - t.bmi_sd) / t.bmi_sd,
        ];
        r.iter().map(|x| x * x).sum()
    }

    /// Relative errors of (height mean, height sd, bmi mean, bmi sd).
    pub fn relative_errors(&self, t: &GrowthRow) -> [f64; 4] {
        [
            ((self.height_mean - t.height_mean) / t.height_mean).abs(),
            ((self.height_sd - t.height_sd) / t.height_sd).abs(),
            ((self.bmi_mean - t.bmi_mean) / t.bmi_mean).abs(),
            ((self.bmi_sd - t.bmi_sd) / t.bmi_sd).abs(),
        ]
    }

    pub fn within_tolerance(&self, t: &GrowthRow) -> bool {
        let e = self.relative_errors(t);
        e[0] <= MEAN_TOLERANCE && e[2] <= MEAN_TOLERANCE && e[1] <= SD_TOLERANCE && e[3] <= SD_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub mc_samples: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub density: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            max_iters: 300,
            density: DEFAULT_DENSITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub age_months: u32,
    pub gender: u8,
    pub achieved: PushforwardStats,
    pub objective: f64,
    pub evaluations: usize,
    pub within_tolerance: bool,
    /// Best objective after each Nelder–Mead iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub table: BetaTable,
    pub report: Vec<BucketReport>,
}

impl Calibration {
    pub fn within_tolerance(&self) -> bool {
        self.report.iter().all(|r| r.within_tolerance)
    }
}

/// Monte-Carlo pushforward of Beta laws through shaping and measurement,
/// with fixed uniforms (common random numbers) across evaluations.
pub struct Calibrator {
    model: ShapeModel,
    faces: Vec<[u32; 4]>,
    age_index: usize,
    gender_index: Option<usize>,
    param_index: Vec<usize>,
    params: Vec<String>,
    age_map: AgeMap,
    uniforms: Vec<Vec<f64>>,
    config: CalibrationConfig,
}

impl Calibrator {
    pub fn new(bundle: &AssetBundle, params: &[String], age_map: AgeMap, config: CalibrationConfig) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::InvalidArgument("no phenotype parameters to calibrate".into()));
        }
        if config.mc_samples < 2 {
            return Err(Error::InvalidArgument("need at least 2 Monte-Carlo samples".into()));
        }
        age_map.validate()?;
        let schema = &bundle.schema;
        let age_index = schema
            .index_of("age")
            .ok_or_else(|| Error::InvalidArgument("schema has no 'age' parameter".into()))?;
        let mut param_index = Vec::new();
        for p in params {
            let i = schema
                .index_of(p)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown phenotype '{p}'")))?;
            if i == age_index {
                return Err(Error::InvalidArgument("'age' is set by the age map, not calibrated".into()));
            }
            if param_index.contains(&i) {
                return Err(Error::InvalidArgument(format!("'{p}' listed twice")));
            }
            param_index.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let uniforms = (0..config.mc_samples)
            .map(|_| (0..params.len()).map(|_| rng.random::<f64>()).collect())
            .collect();
        Ok(Self {
            model: ShapeModel::new(bundle),
            faces: bundle.mesh.faces.clone(),
            age_index,
            gender_index: schema.index_of("gender"),
            param_index,
            params: params.to_vec(),
            age_map,
            uniforms,
            config,
        })
    }

    pub fn pushforward(&self, age_years: f64, gender: u8, betas: &[(f64, f64)]) -> Result<PushforwardStats> {
        if betas.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: betas.len(),
            });
        }
        let mut base = self.model.neutral().to_vec();
        base[self.age_index] = self.age_map.to_param(age_years)?;
        if let Some(g) = self.gender_index {
            base[g] = gender as f64;
        }
        let samples: Vec<(f64, f64)> = self
            .uniforms
            .par_iter()
            .map(|u| {
                let mut p = base.clone();
                for ((&i, &(a, b)), &x) in self.param_index.iter().zip(betas).zip(u) {
                    p[i] = inv_beta_reg(a, b, x).clamp(0.0, 1.0);
                }
                let v = self.model.vertices(&p)?;
                let m = measure(&v, &self.faces, self.config.density)?;
                Ok((m.height, m.bmi_proxy))
            })
            .collect::<Result<_>>()?;
        let (h, bmi): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
        Ok(PushforwardStats::from_samples(&h, &bmi))
    }

    fn objective(&self, x: &[f64], row: &GrowthRow) -> Result<(f64, Option<PushforwardStats>)> {
        let mut betas = Vec::with_capacity(self.params.len());
        let mut penalty = 0.0;
        for pair in x.chunks(2) {
            let (m, s) = (pair[0], pair[1]);
            // keep a margin inside the feasible (mean, sd) region
            let m_ok = m.clamp(1e-3, 1.0 - 1e-3);
            let s_max = (m_ok * (1.0 - m_ok)).sqrt() * 0.99;
            let s_ok = s.clamp(1e-4, s_max);
            penalty += (m - m_ok).powi(2) + (s - s_ok).powi(2);
            betas.push(fit_beta_moments(m_ok, s_ok)?);
        }
        if penalty > 0.0 {
            return Ok((1e6 * (1.0 + penalty), None));
        }
        let stats = self.pushforward(row.age_months as f64 / 12.0, row.gender, &betas)?;
        Ok((stats.objective(row), Some(stats)))
    }

    pub fn calibrate(&self, targets: &GrowthTargets) -> Result<Calibration> {
        targets.validate()?;
        let mut table = BetaTable::new(self.age_map.clone(), self.params.clone());
        let mut report = Vec::new();
        for row in &targets.rows {
            let x0: Vec<f64> = self.params.iter().flat_map(|_| [0.5, 0.15]).collect();
            let steps: Vec<f64> = self.params.iter().flat_map(|_| [0.2, 0.08]).collect();
            let mut failure = None;
            let nm = nelder_mead(
                |x| match self.objective(x, row) {
                    Ok((f, _)) => f,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::INFINITY
                    }
                },
                &x0,
                &steps,
                self.config.max_iters,
                1e-10,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let (objective, stats) = self.objective(&nm.x, row)?;
            let achieved = stats.ok_or_else(|| {
                Error::NotConverged(format!(
                    "bucket {} months / gender {} ended outside the feasible region",
                    row.age_months, row.gender
                ))
            })?;
            let betas = nm
                .x
                .chunks(2)
                .zip(&self.params)
                .map(|(ms, name)| {
                    let m = ms[0].clamp(1e-3, 1.0 - 1e-3);
                    let s = ms[1].clamp(1e-4, (m * (1.0 - m)).sqrt() * 0.99);
                    fit_beta_moments(m, s).map(|(alpha, beta)| BetaParams {
                        param: name.clone(),
                        alpha,
                        beta,
                    })
                })
                .collect::<Result<_>>()?;
            table.buckets.push(BetaBucket {
                age_months: row.age_months,
                gender: row.gender,
                betas,
            });
            report.push(BucketReport {
                age_months: row.age_months,
                gender: row.gender,
                within_tolerance: achieved.within_tolerance(row),
                achieved,
                objective,
                evaluations: nm.evaluations,
                history: nm.history,
            });
        }
        // keep buckets grouped by gender, ages increasing
        let mut order: Vec<usize> = (0..table.buckets.len()).collect();
        order.sort_by_key(|&i| (table.buckets[i].gender, table.buckets[i].age_months));
        table.buckets = order.iter().map(|&i| table.buckets[i].clone()).collect();
        report = order.iter().map(|&i| report[i].clone()).collect();
        Ok(Calibration { table, report })
    }
}

/// Calibrate Beta laws for `params` so the pushforward matches `targets`.
pub fn calibrate(
    bundle: &AssetBundle,
    targets: &GrowthTargets,
    age_map: &AgeMap,
    params: &[String],
    config: CalibrationConfig,
) -> Result<Calibration> {
    let c = Calibrator::new(bundle, params, age_map.clone(), config)?;
    let mut out = c.calibrate(targets)?;
    out.table.gender_param = bundle.schema.index_of("gender").map(|_| "gender".to_string());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMead {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub history: Vec<f64>,
}

/// Derivative-free minimization with the standard reflection / expansion /
/// contraction / shrink coefficients (1, 2, 1/2, 1/2).
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    max_iters: usize,
    ftol: f64,
) -> NelderMead {
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evaluations);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let fx = eval(&x, &mut evaluations);
        simplex.push((x, fx));
    }
    let mut history = Vec::new();
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    sort(&mut simplex);
    for _ in 0..max_iters {
        let best = simplex[0].1;
        let worst = simplex[n].1;
        history.push(best);
        if (worst - best).abs() <= ftol * (1.0 + best.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|s| s.0[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evaluations);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evaluations);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = s.0.iter().zip(&x_best).map(|(x, b)| b + 0.5 * (x - b)).collect();
                    s.1 = eval(&s.0, &mut evaluations);
                }
            }
        }
        sort(&mut simplex);
    }
    let (x, fx) = simplex.swap_remove(0);
    history.push(fx);
    NelderMead {
        x,
        f: fx,
        evaluations,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_and_beta22_moments() {
        let (a, b) = fit_beta_moments(0.5, (1.0f64 / 12.0).sqrt()).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        let (a, b) = fit_beta_moments(0.5, (1.0f64 / 20.0).sqrt()).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        let (_, sd) = beta_moments(2.0, 2.0);
        assert!((sd * sd - 0.05).abs() < 1e-15);
    }

    #[test]
    fn infeasible_moments_are_rejected() {
        assert!(matches!(fit_beta_moments(0.5, 0.5), Err(Error::InfeasibleMoments { .. })));
        assert!(fit_beta_moments(0.0, 0.1).is_err());
        assert!(fit_beta_moments(0.3, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn moments_round_trip(mean in 0.01..0.99f64, frac in 0.01..0.99f64) {
            let sd = (frac * mean * (1.0 - mean)).sqrt();
            let (a, b) = fit_beta_moments(mean, sd).unwrap();
            let (m, s) = beta_moments(a, b);
            prop_assert!((m - mean).abs() < 1e-12);
            prop_assert!((s - sd).abs() < 1e-12);
        }

        #[test]
        fn age_map_round_trips(p in 0.0..=1.0f64) {
            let m = AgeMap::default();
            let back = m.to_param(m.to_years(p).unwrap()).unwrap();
            prop_assert!((back - p).abs() < 1e-12);
        }
    }

    #[test]
    fn age_map_rejects_non_monotone_knots() {
        assert!(AgeMap::new(vec![(0.0, 0.0), (5.0, 0.5), (4.0, 1.0)]).is_err());
        assert!(AgeMap::default().to_param(80.0).is_err());
    }

    const HEADER: &str = "age_months,gender,height_mean_m,height_sd_m,bmi_mean,bmi_sd\n";

    #[test]
    fn three_row_csv_parses() {
        let text = format!("{HEADER}0,0,0.5,0.02,13.4,1.1\n12,0,0.75,0.025,17.2,1.3\n24,0,0.87,0.03,16.0,1.2\n");
        let t = GrowthTargets::from_reader(text.as_bytes()).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[1].age_months, 12);
        let again = GrowthTargets::from_reader(t.to_csv().unwrap().as_bytes()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn negative_sd_names_the_row() {
        let text = format!("{HEADER}0,0,0.5,0.02,13.4,1.1\n12,0,0.75,-0.025,17.2,1.3\n");
        let err = GrowthTargets::from_reader(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn non_monotone_ages_are_rejected() {
        let text = format!("{HEADER}12,0,0.75,0.02,17.2,1.3\n6,0,0.6,0.02,16.0,1.2\n");
        let err = GrowthTargets::from_reader(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("increase"), "{err}");
    }

    fn table(alpha: f64, beta: f64) -> BetaTable {
        let mut t = BetaTable::new(AgeMap::default(), vec!["weight".into()]);
        for months in [24, 120] {
            t.buckets.push(BetaBucket {
                age_months: months,
                gender: 0,
                betas: vec![BetaParams {
                    param: "weight".into(),
                    alpha,
                    beta,
                }],
            });
        }
        t
    }

    #[test]
    fn uniform_beta_has_mean_one_half() {
        let t = table(1.0, 1.0);
        let m = AgeMap::default();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Beta::new(1.0, 1.0).unwrap();
        // sample_body reseeds per call, so draw through the same law directly
        let direct: f64 = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((direct - 0.5).abs() < 0.005);
        let via: f64 = (0..2000)
            .map(|s| sample_body(&t, 2.0, 0, &m, s).unwrap().values["weight"])
            .sum::<f64>()
            / 2000.0;
        assert!((via - 0.5).abs() < 0.02);
    }

    #[test]
    fn concentrated_beta_stays_near_its_mean() {
        let t = table(1e6, 1e6);
        for s in 0..50 {
            let p = sample_body(&t, 5.0, 0, &AgeMap::default(), s).unwrap();
            assert!((p.values["weight"] - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_range_checked() {
        let t = table(2.0, 5.0);
        let m = AgeMap::default();
        assert_eq!(sample_body(&t, 5.0, 0, &m, 7).unwrap(), sample_body(&t, 5.0, 0, &m, 7).unwrap());
        assert!(sample_body(&t, 1.0, 0, &m, 7).is_err());
        assert!(sample_body(&t, 5.0, 1, &m, 7).is_err());
    }

    #[test]
    fn bucket_interpolation_is_linear() {
        let mut t = table(2.0, 4.0);
        t.buckets[1].betas[0].alpha = 6.0;
        // halfway between 2 and 10 years
        let b = t.betas_at(6.0, 0).unwrap();
        assert!((b[0].0 - 4.0).abs() < 1e-12 && (b[0].1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn table_json_round_trips() {
        let t = table(2.0, 3.0);
        assert_eq!(BetaTable::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum_monotonically() {
        let r = nelder_mead(
            |x| (x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.1).powi(2),
            &[0.0, 0.0],
            &[0.1, 0.1],
            500,
            1e-14,
        );
        assert!((r.x[0] - 0.3).abs() < 1e-5 && (r.x[1] + 0.1).abs() < 1e-5);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn empty_parameter_list_is_rejected() {
        let b = crate::asset::generate_toy_humanoid(0, crate::asset::Resolution::Coarse);
        assert!(Calibrator::new(&b, &[], AgeMap::default(), CalibrationConfig::default()).is_err());
    }
}
