use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use phenobody::asset::{
    export_mesh, generate_toy_humanoid, load_bundle, read_point_cloud, save_bundle, with_local_morphs, AssetBundle,
    MeshFormat, Resolution,
};
use phenobody::bench::{run_bench, BenchConfig};
use phenobody::collision::self_collide;
use phenobody::fitting::{
    fit_report, fit_scan, sample_surface, BoundsHandling, FitConfig, FitInit, FitPrior, Optimizer, RegionTag,
    ScanCloud,
};
use phenobody::math::{Mat3, Vec3};
use phenobody::pose::{retarget, Body, JacobianRequest, Pose};
use phenobody::regressor::{cyclic_error, init_between, refine, RefineConfig, SparseRegressor, TrainingMesh};
use phenobody::shape::{PhenotypeVector, ShapeModel};
use phenobody::stats::{calibrate, load_growth_targets, sample_body, AgeMap, BetaTable, CalibrationConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::*;

/// Phenotypes and pose as read by `--params`/`--init` and written by `fit`.
#[derive(Debug, Default, Serialize, Deserialize)]
struct BodyParams {
    #[serde(default)]
    phenotypes: PhenotypeVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<Pose>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn bundle(path: &Path) -> Result<AssetBundle> {
    load_bundle(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn mesh_format(out: &MeshOut) -> Result<MeshFormat> {
    match out.format {
        Some(MeshFormatArg::Obj) => Ok(MeshFormat::Obj),
        Some(MeshFormatArg::Ply) => Ok(MeshFormat::Ply),
        None => MeshFormat::from_path(&out.out)
            .ok_or_else(|| usage(format!("cannot infer mesh format of {}; pass --format", out.out.display()))),
    }
}

fn parse_vec3(text: &str) -> Result<Vec3> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("expected X,Y,Z, got '{text}'")))?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(usage(format!("expected three finite numbers, got '{text}'"))),
    }
}

fn split_assignment<'a>(text: &'a str, flag: &str) -> Result<(&'a str, &'a str)> {
    text.split_once('=')
        .ok_or_else(|| usage(format!("--{flag} expects NAME=VALUE, got '{text}'")))
}

/// Phenotypes from `--params` and `--set`, checked against the schema.
fn phenotypes(args: &PhenoArgs, b: &AssetBundle) -> Result<(PhenotypeVector, Option<Pose>)> {
    let base: BodyParams = match &args.params {
        Some(p) => read_json(p)?,
        None => BodyParams::default(),
    };
    let mut phen = base.phenotypes;
    for s in &args.set {
        let (name, value) = split_assignment(s, "set")?;
        let v: f64 = value
            .parse()
            .map_err(|_| usage(format!("--set {name}: '{value}' is not a number")))?;
        phen.set(name, v);
    }
    for (name, &v) in &phen.values {
        if b.schema.index_of(name).is_none() {
            return Err(usage(format!(
                "unknown phenotype '{name}' (schema: {})",
                b.schema.names().join(", ")
            )));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(usage(format!("phenotype '{name}' = {v} is outside [0, 1]")));
        }
    }
    Ok((phen, base.pose))
}

fn random_joints(rng: &mut impl Rng, bones: usize, scale: f64) -> Vec<Vec3> {
    (0..bones)
        .map(|_| {
            Vec3::new(
                rng.random_range(-scale..=scale),
                rng.random_range(-scale..=scale),
                rng.random_range(-scale..=scale),
            )
        })
        .collect()
}

/// Pose from a parameter file (if any), then random joints, then explicit flags.
fn pose(args: &PoseArgs, b: &AssetBundle, base: Option<Pose>) -> Result<Pose> {
    let nb = b.skeleton.len();
    let mut pose = base.unwrap_or_else(|| Pose::identity(nb));
    pose.check(nb)?;
    if let Some(scale) = args.random_pose {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(usage("--random-pose must be a non-negative number"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        pose.joint_rotations = random_joints(&mut rng, nb, scale);
    }
    for j in &args.joints {
        let (name, value) = split_assignment(j, "joint")?;
        let idx = b
            .skeleton
            .index_of(name)
            .ok_or_else(|| usage(format!("unknown bone '{name}'")))?;
        pose.joint_rotations[idx] = parse_vec3(value)?;
    }
    if let Some(r) = &args.root_rotation {
        pose.root_rotation = parse_vec3(r)?;
    }
    if let Some(t) = &args.root_translation {
        pose.root_translation = parse_vec3(t)?;
    }
    Ok(pose)
}

fn posed_vertices(b: &AssetBundle, phen: &PhenotypeVector, pose: &Pose) -> Result<Vec<Vec3>> {
    let params = phen.resolve(&b.schema)?;
    Ok(Body::new(b).eval(&params, pose, JacobianRequest::NONE)?.vertices)
}

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Toy(a) => toy(a),
        Command::Shape(a) => shape(a),
        Command::Pose(a) => pose_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Fit(a) => fit(*a),
        Command::Collide(a) => collide(a),
        Command::Retarget(a) => retarget_cmd(a),
        Command::Regressor(RegressorCommand::Fit(a)) => regressor_fit(a),
        Command::Regressor(RegressorCommand::Apply(a)) => regressor_apply(a),
        Command::Regressor(RegressorCommand::Cycle(a)) => regressor_cycle(a),
        Command::Bench(a) => bench(a),
        Command::Scan(a) => scan(a),
    }
}

fn toy(a: ToyArgs) -> Result<u8> {
    let res = match a.resolution {
        ResolutionArg::Coarse => Resolution::Coarse,
        ResolutionArg::Fine => Resolution::Fine,
    };
    let mut b = generate_toy_humanoid(a.seed, res);
    if a.local_morphs > 0 {
        b = with_local_morphs(&b, a.local_morphs, a.seed);
    }
    save_bundle(&b, &a.out)?;
    println!(
        "wrote {} ({} vertices, {} faces, {} bones, {} parameters)",
        a.out.display(),
        b.vertex_count(),
        b.mesh.faces.len(),
        b.skeleton.len(),
        b.schema.len()
    );
    Ok(0)
}

fn shape(a: ShapeArgs) -> Result<u8> {
    let b = bundle(&a.pheno.bundle)?;
    let format = mesh_format(&a.out)?;
    let (phen, _) = phenotypes(&a.pheno, &b)?;
    let params = phen.resolve(&b.schema)?;
    let v = ShapeModel::new(&b).vertices(&params)?;
    export_mesh(&v, &b.mesh.faces, &a.out.out, format)?;
    Ok(0)
}

fn pose_cmd(a: PoseCmdArgs) -> Result<u8> {
    let b = bundle(&a.pheno.bundle)?;
    let format = mesh_format(&a.out)?;
    let (phen, base) = phenotypes(&a.pheno, &b)?;
    let pose = pose(&a.pose, &b, base)?;
    let v = posed_vertices(&b, &phen, &pose)?;
    export_mesh(&v, &b.mesh.faces, &a.out.out, format)?;
    if let Some(p) = &a.params_out {
        write_json(p, &BodyParams { phenotypes: phen, pose: Some(pose) })?;
    }
    Ok(0)
}

fn sample(a: SampleArgs) -> Result<u8> {
    if !a.age_years.is_finite() {
        return Err(usage("--age-years must be finite"));
    }
    if a.gender > 1 {
        return Err(usage("--gender must be 0 or 1"));
    }
    let table = BetaTable::load(&a.table)?;
    let phen = sample_body(&table, a.age_years, a.gender, &table.age_map, a.seed)?;
    let text = serde_json::to_string_pretty(&BodyParams { phenotypes: phen, pose: None })?;
    match &a.out {
        Some(p) => write_text(p, &(text + "\n"))?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<u8> {
    if a.mc_samples < 2 {
        return Err(usage("--mc-samples must be at least 2"));
    }
    if !(a.density.is_finite() && a.density > 0.0) {
        return Err(usage("--density must be positive"));
    }
    let b = bundle(&a.bundle)?;
    let targets = load_growth_targets(&a.targets)?;
    let age_map = match &a.age_map {
        Some(p) => AgeMap::load(p)?,
        None => AgeMap::default(),
    };
    let config = CalibrationConfig {
        mc_samples: a.mc_samples,
        seed: a.seed,
        max_iters: a.max_iters,
        density: a.density,
    };
    let cal = calibrate(&b, &targets, &age_map, &a.params, config)?;
    cal.table.save(&a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &cal.report)?;
    }
    let met = cal.report.iter().filter(|r| r.within_tolerance).count();
    println!("{met}/{} buckets within tolerance", cal.report.len());
    Ok(0)
}

fn fit(a: FitArgs) -> Result<u8> {
    let b = bundle(&a.bundle)?;
    let excluded = a
        .exclude
        .iter()
        .map(|t| t.parse::<RegionTag>().map_err(|_| usage(format!("unknown region tag '{t}'"))))
        .collect::<Result<Vec<_>>>()?;
    let config = FitConfig {
        optimizer: match a.optimizer {
            OptimizerArg::GradientDescent => Optimizer::GradientDescent,
            OptimizerArg::LevenbergMarquardt => Optimizer::LevenbergMarquardt,
        },
        max_outer_iters: a.max_outer_iters,
        rigid_outer_iters: a.rigid_outer_iters,
        inner_steps: a.inner_steps,
        step_size: a.step_size,
        backtracking: a.backtracking,
        max_backtracks: a.max_backtracks,
        huber_delta: a.huber_delta,
        prior_weight: a.prior_weight,
        bounds: match a.bounds {
            BoundsArg::Clamp => BoundsHandling::Clamp,
            BoundsArg::Sigmoid => BoundsHandling::Sigmoid,
        },
        tolerance: a.tolerance,
        max_points: a.max_points,
        init_search: a.init_search,
        excluded,
        seed: a.seed,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let scan = ScanCloud::load(&a.scan, a.tags.as_deref())?;
    let prior = match &a.prior {
        Some(p) => {
            let table = BetaTable::load(p)?;
            let age = a.prior_age_years.expect("clap enforces --prior-age-years");
            Some(FitPrior::from_table(&table, &b.schema, age, a.prior_gender)?)
        }
        None => None,
    };
    let init = match &a.init {
        Some(p) => {
            let bp: BodyParams = read_json(p)?;
            let pose = bp.pose.unwrap_or_else(|| Pose::identity(b.skeleton.len()));
            Some(FitInit { phenotypes: bp.phenotypes.resolve(&b.schema)?, pose })
        }
        None => None,
    };
    let result = fit_scan(&b, &scan, &config, prior.as_ref(), init)?;
    #[derive(Serialize)]
    struct FitOut<'a> {
        phenotypes: &'a PhenotypeVector,
        pose: &'a Pose,
        mean_error: f64,
        iterations_used: usize,
        stop: phenobody::fitting::StopReason,
        history: &'a [f64],
    }
    write_json(
        &a.out,
        &FitOut {
            phenotypes: &result.phenotypes,
            pose: &result.pose,
            mean_error: result.mean_error,
            iterations_used: result.iterations_used,
            stop: result.stop,
            history: &result.history,
        },
    )?;
    if a.report_csv.is_some() || a.report_ply.is_some() {
        let csv = a.report_csv.clone().unwrap_or_else(|| a.out.with_extension("errors.csv"));
        let ply = a.report_ply.clone().unwrap_or_else(|| a.out.with_extension("errors.ply"));
        fit_report(&result, &csv, &ply)?;
    }
    println!("mean point-to-mesh error {:.6e} m after {} iterations", result.mean_error, result.iterations_used);
    Ok(0)
}

fn collide(a: CollideArgs) -> Result<u8> {
    let b = bundle(&a.pheno.bundle)?;
    let (phen, base) = phenotypes(&a.pheno, &b)?;
    let pose = pose(&a.pose, &b, base)?;
    let v = posed_vertices(&b, &phen, &pose)?;
    let report = self_collide(&v, &b, a.exempt_adjacent);
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!("{} intersecting face pairs", report.intersecting_pairs.len());
    Ok(if report.colliding { 1 } else { 0 })
}

fn retarget_cmd(a: RetargetArgs) -> Result<u8> {
    let b = bundle(&a.pheno.bundle)?;
    let (phen, _) = phenotypes(&a.pheno, &b)?;
    let rows: BTreeMap<String, [[f64; 3]; 3]> = read_json(&a.orientations)?;
    let orientations: BTreeMap<String, Mat3> = rows
        .into_iter()
        .map(|(k, r)| (k, Mat3::from_row_slice(&r.concat())))
        .collect();
    let mapping: BTreeMap<String, String> = match &a.mapping {
        Some(p) => read_json(p)?,
        None => orientations
            .keys()
            .filter(|k| b.skeleton.index_of(k).is_some())
            .map(|k| (k.clone(), k.clone()))
            .collect(),
    };
    let shaped = ShapeModel::new(&b).eval(&phen.resolve(&b.schema)?, false)?;
    let pose = retarget(&orientations, &mapping, &b.skeleton, &shaped)?;
    write_json(&a.out, &pose)?;
    Ok(0)
}

/// Random phenotypes in (0.05, 0.95) and joint rotations in ±scale.
fn random_states(b: &AssetBundle, count: usize, scale: f64, seed: u64) -> Vec<FitInit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let phenotypes = (0..b.schema.len()).map(|_| rng.random_range(0.05..0.95)).collect();
            let joint_rotations = random_joints(&mut rng, b.skeleton.len(), scale);
            FitInit {
                phenotypes,
                pose: Pose { joint_rotations, ..Pose::identity(b.skeleton.len()) },
            }
        })
        .collect()
}

fn check_compatible(a: &AssetBundle, b: &AssetBundle) -> Result<()> {
    if a.schema.names() != b.schema.names() {
        bail!("bundles have different phenotype schemas");
    }
    let names = |x: &AssetBundle| x.skeleton.bones.iter().map(|b| b.name.clone()).collect::<Vec<_>>();
    if names(a) != names(b) {
        bail!("bundles have different skeletons");
    }
    Ok(())
}

fn regressor_fit(a: RegressorFitArgs) -> Result<u8> {
    if a.train == 0 {
        return Err(usage("--train must be at least 1"));
    }
    let src = bundle(&a.source)?;
    let tgt = bundle(&a.target)?;
    check_compatible(&src, &tgt)?;
    let sp = src.symmetry.partner_table(src.vertex_count())?;
    let tp = tgt.symmetry.partner_table(tgt.vertex_count())?;
    let states = random_states(&tgt, a.train, a.pose_scale, a.seed);
    let body = Body::new(&tgt);
    let targets = states
        .iter()
        .map(|s| {
            let vertices = body.eval(&s.phenotypes, &s.pose, JacobianRequest::NONE)?.vertices;
            Ok(TrainingMesh { vertices, init: Some(s.clone()) })
        })
        .collect::<Result<Vec<_>>>()?;
    let init = init_between(&src, &tgt)?;
    let config = RefineConfig {
        rounds: a.rounds,
        fit_steps: a.fit_steps,
        ridge: a.ridge,
        dilate: a.dilate,
    };
    let out = refine(&init, &src, &targets, &sp, &tp, &config)?;
    out.regressor.save(&a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &out.report)?;
    }
    println!(
        "training residual {:.6e} m -> {:.6e} m",
        out.report.residuals[0],
        out.report.residuals.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn regressor_apply(a: RegressorApplyArgs) -> Result<u8> {
    let r = SparseRegressor::load(&a.regressor)?;
    let format = mesh_format(&a.out)?;
    let v = read_point_cloud(&a.mesh)?;
    let out = r.apply(&v)?;
    let faces = match &a.target_bundle {
        Some(p) => {
            let b = bundle(p)?;
            if b.vertex_count() != out.len() {
                bail!("target bundle has {} vertices, regressor produces {}", b.vertex_count(), out.len());
            }
            b.mesh.faces
        }
        None => Vec::new(),
    };
    export_mesh(&out, &faces, &a.out.out, format)?;
    Ok(0)
}

fn regressor_cycle(a: RegressorCycleArgs) -> Result<u8> {
    let fwd = SparseRegressor::load(&a.forward)?;
    let bwd = SparseRegressor::load(&a.backward)?;
    let b = bundle(&a.bundle)?;
    let body = Body::new(&b);
    let meshes = random_states(&b, a.meshes, a.pose_scale, a.seed)
        .iter()
        .map(|s| Ok(body.eval(&s.phenotypes, &s.pose, JacobianRequest::NONE)?.vertices))
        .collect::<Result<Vec<_>>>()?;
    let e = cyclic_error(&fwd, &bwd, &meshes)?;
    println!("cyclic error {e:e} m over {} meshes", meshes.len());
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<u8> {
    let b = bundle(&a.bundle)?;
    let phenotype_counts = a
        .phenotype_counts
        .iter()
        .map(|c| match c.as_str() {
            "full" => Ok(b.schema.len()),
            n => n
                .parse::<usize>()
                .map_err(|_| usage(format!("phenotype count '{n}' is neither a number nor 'full'"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let config = BenchConfig {
        batches: a.batches,
        phenotype_counts,
        repeats: a.repeats,
        seed: a.seed,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let report = run_bench(&b, &config)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
    }
    Ok(0)
}

fn scan(a: ScanArgs) -> Result<u8> {
    if a.points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(usage("--noise must be a non-negative number"));
    }
    let b = bundle(&a.pheno.bundle)?;
    let (phen, base) = phenotypes(&a.pheno, &b)?;
    let pose = pose(&a.pose, &b, base)?;
    let v = posed_vertices(&b, &phen, &pose)?;
    // separate stream from the random pose, which also uses --seed
    let mut rng = ChaCha8Rng::seed_from_u64(a.pose.seed ^ 0x5ca9);
    let mut points = sample_surface(&v, &b.mesh.triangles(), a.points, &mut rng)?;
    if a.noise > 0.0 {
        let n = Normal::new(0.0, a.noise)?;
        for p in &mut points {
            *p += Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        }
    }
    let format = MeshFormat::from_path(&a.out).unwrap_or(MeshFormat::Ply);
    export_mesh(&points, &[], &a.out, format)?;
    if let Some(t) = &a.truth {
        write_json(t, &BodyParams { phenotypes: phen, pose: Some(pose) })?;
    }
    Ok(0)
}
