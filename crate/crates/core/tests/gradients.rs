use phenobody::asset::{generate_toy_humanoid, Resolution};
use phenobody::math::Vec3;
use phenobody::pose::{Body, JacobianRequest, Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// A value inside a grid cell, at least `margin` from every node.
fn off_node(rng: &mut impl Rng, grid: &[f64], margin: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(0.0..1.0);
        if grid.iter().all(|g| (v - g).abs() > margin) {
            return v;
        }
    }
}

fn random_pose(rng: &mut impl Rng, bones: usize, scale: f64) -> Pose {
    let mut v = || Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale));
    Pose {
        root_rotation: v(),
        root_translation: v(),
        joint_rotations: (0..bones).map(|_| v()).collect(),
    }
}

fn column_error(analytic: &[Vec3], plus: &[Vec3], minus: &[Vec3]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((a, p), m) in analytic.iter().zip(plus).zip(minus) {
        let fd = (p - m) / (2.0 * STEP);
        num = num.max((a - fd).amax());
        den = den.max(fd.amax());
    }
    if den < 1e-9 {
        num
    } else {
        num / den
    }
}

fn worst_error(body: &Body, phen: &[f64], pose: &Pose) -> f64 {
    let nb = body.bone_count();
    let out = body.eval(phen, pose, JacobianRequest::ALL).unwrap();
    let pj = out.pose_jacobian.unwrap();
    let sj = out.shape_jacobian.unwrap();
    let nv = out.vertices.len();
    let mut worst = 0.0f64;
    let params = pose.to_params();
    for k in 0..params.len() {
        let eval = |d: f64| {
            let mut q = params.clone();
            q[k] += d;
            let p = Pose::from_params(&q, nb).unwrap();
            body.eval(phen, &p, JacobianRequest::NONE).unwrap().vertices
        };
        let analytic: Vec<Vec3> = (0..nv).map(|v| pj.column(v, k)).collect();
        worst = worst.max(column_error(&analytic, &eval(STEP), &eval(-STEP)));
    }
    for k in 0..phen.len() {
        let eval = |d: f64| {
            let mut q = phen.to_vec();
            q[k] += d;
            body.eval(&q, pose, JacobianRequest::NONE).unwrap().vertices
        };
        worst = worst.max(column_error(&sj[k], &eval(STEP), &eval(-STEP)));
    }
    worst
}

#[test]
fn pose_and_shape_jacobians_match_central_differences() {
    let bundle = generate_toy_humanoid(0, Resolution::Coarse);
    let body = Body::new(&bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let phen: Vec<f64> = bundle
            .schema
            .params
            .iter()
            .map(|p| off_node(&mut rng, &p.grid, 1e-3))
            .collect();
        let pose = random_pose(&mut rng, body.bone_count(), 1.2);
        let err = worst_error(&body, &phen, &pose);
        assert!(err < 1e-5, "relative error {err}");
    }
}

#[test]
fn identity_pose_shape_jacobian_equals_rest_jacobian() {
    let bundle = generate_toy_humanoid(4, Resolution::Fine);
    let body = Body::new(&bundle);
    let phen = [0.2, 0.8];
    let rest = body.shape.eval(&phen, true).unwrap().jacobian.unwrap();
    let out = body
        .eval(&phen, &Pose::identity(body.bone_count()), JacobianRequest::ALL)
        .unwrap();
    assert_eq!(out.shape_jacobian.unwrap(), rest.vertices);
}
