//! Forward kinematics, linear blend skinning, analytic Jacobians and pose
//! retargeting.
//!
//! Rest frame convention: the frame origin is the bone head, the local +Y
//! axis points from head to tail, local +X is `normalize(y × Z)` (world
//! forward as roll reference, or world -Y when the bone is within 1e-6 of
//! parallel to Z) and local +Z completes the right-handed frame. A bone
//! along world +Y therefore has the identity rest rotation.
//!
//! Pose parameters are laid out as `[root rotation (3), root translation (3),
//! joint 0 (3), joint 1 (3), ...]`; joint rotations are rotation vectors in
//! the bone's rest frame.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asset::{AssetBundle, Skeleton, SkinningWeights};
use crate::error::{Error, Result};
use crate::math::{exp_so3, log_so3, right_jacobian, skew, Mat3, Rigid, Vec3};
use crate::shape::{PhenotypeVector, ShapeModel, ShapedRest};

const PARALLEL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Rotation vector (radians) applied about the world origin.
    pub root_rotation: Vec3,
    /// Meters.
    pub root_translation: Vec3,
    /// Per-bone rotation vectors relative to the rest configuration.
    pub joint_rotations: Vec<Vec3>,
}

impl Pose {
    pub fn identity(bones: usize) -> Self {
        Self {
            root_rotation: Vec3::zeros(),
            root_translation: Vec3::zeros(),
            joint_rotations: vec![Vec3::zeros(); bones],
        }
    }

    pub fn param_count(bones: usize) -> usize {
        6 + 3 * bones
    }

    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(self.joint_rotations.len()));
        out.extend(self.root_rotation.iter());
        out.extend(self.root_translation.iter());
        for r in &self.joint_rotations {
            out.extend(r.iter());
        }
        out
    }

    pub fn from_params(params: &[f64], bones: usize) -> Result<Self> {
        if params.len() != Self::param_count(bones) {
            return Err(Error::DimensionMismatch {
                expected: Self::param_count(bones),
                actual: params.len(),
            });
        }
        let v = |i: usize| Vec3::new(params[i], params[i + 1], params[i + 2]);
        Ok(Self {
            root_rotation: v(0),
            root_translation: v(3),
            joint_rotations: (0..bones).map(|b| v(6 + 3 * b)).collect(),
        })
    }

    /// Root transform `x -> Rot(root_rotation) x + root_translation`.
    pub fn root(&self) -> Rigid {
        Rigid::new(exp_so3(&self.root_rotation), self.root_translation)
    }

    pub fn check(&self, bones: usize) -> Result<()> {
        if self.joint_rotations.len() != bones {
            return Err(Error::DimensionMismatch {
                expected: bones,
                actual: self.joint_rotations.len(),
            });
        }
        let finite = std::iter::once(&self.root_rotation)
            .chain(std::iter::once(&self.root_translation))
            .chain(&self.joint_rotations)
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("pose has non-finite values".into()));
        }
        Ok(())
    }
}

fn roll_reference(y: &Vec3) -> Vec3 {
    if y.cross(&Vec3::z()).norm() < PARALLEL_TOLERANCE {
        -Vec3::y()
    } else {
        Vec3::z()
    }
}

/// Rest rotation of a bone from its head and tail.
pub fn rest_frame(head: &Vec3, tail: &Vec3) -> Result<Mat3> {
    let u = tail - head;
    let len = u.norm();
    if !(len > 1e-12) {
        return Err(Error::Degenerate(format!("zero-length bone at {head:?}")));
    }
    let y = u / len;
    let x = y.cross(&roll_reference(&y)).normalize();
    let z = x.cross(&y);
    Ok(Mat3::from_columns(&[x, y, z]))
}

/// Directional derivative of [`rest_frame`] for head/tail velocities.
fn rest_frame_derivative(head: &Vec3, tail: &Vec3, dhead: &Vec3, dtail: &Vec3) -> Mat3 {
    let u = tail - head;
    let len = u.norm();
    let y = u / len;
    let du = dtail - dhead;
    let dy = (du - y * y.dot(&du)) / len;
    let reference = roll_reference(&y);
    let xt = y.cross(&reference);
    let n = xt.norm();
    let x = xt / n;
    let dxt = dy.cross(&reference);
    let dx = (dxt - x * x.dot(&dxt)) / n;
    let dz = dx.cross(&y) + x.cross(&dy);
    Mat3::from_columns(&[dx, dy, dz])
}

/// Rest frames (rotation + head position) of every bone.
pub fn rest_transforms(shaped: &ShapedRest, skeleton: &Skeleton) -> Result<Vec<Rigid>> {
    (0..skeleton.len())
        .map(|b| {
            let h = shaped.joint_heads[b];
            rest_frame(&h, &shaped.joint_tails[b]).map(|r| Rigid::new(r, h))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoneTransforms {
    /// Rest frame of each bone in world coordinates.
    pub rest: Vec<Rigid>,
    /// Posed frame of each bone in world coordinates.
    pub world: Vec<Rigid>,
    /// `world ∘ rest⁻¹`, the transform applied to skinned points.
    pub skinning: Vec<Rigid>,
}

pub fn forward_kinematics(skeleton: &Skeleton, rest: &[Rigid], pose: &Pose) -> BoneTransforms {
    let n = skeleton.len();
    let root = pose.root();
    let mut skinning = vec![Rigid::identity(); n];
    let mut world = vec![Rigid::identity(); n];
    for b in skeleton.topological_order() {
        let r = &rest[b];
        // Rest ∘ Rot(θ) ∘ Rest⁻¹ is a rotation by Rot(R θ) about the head.
        let local = Rigid::about_point(exp_so3(&(r.rot * pose.joint_rotations[b])), &r.trans);
        let parent = skeleton.bones[b].parent.map_or(root, |p| skinning[p]);
        skinning[b] = parent.compose(&local);
        world[b] = skinning[b].compose(r);
    }
    BoneTransforms {
        rest: rest.to_vec(),
        world,
        skinning,
    }
}

/// Dense 3×3 blocks of ∂v'/∂pose per vertex: block 0 is the root rotation,
/// block 1 the root translation and block `2 + b` joint `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseJacobian {
    pub blocks_per_vertex: usize,
    pub blocks: Vec<Mat3>,
}

impl PoseJacobian {
    pub fn block(&self, vertex: usize, block: usize) -> &Mat3 {
        &self.blocks[vertex * self.blocks_per_vertex + block]
    }

    /// ∂v'_vertex / ∂param for one pose parameter.
    pub fn column(&self, vertex: usize, param: usize) -> Vec3 {
        self.block(vertex, param / 3).column(param % 3).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformResult {
    pub vertices: Vec<Vec3>,
    pub pose_jacobian: Option<PoseJacobian>,
    /// `[parameter][vertex]` derivatives of posed vertices.
    pub shape_jacobian: Option<Vec<Vec<Vec3>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JacobianRequest {
    pub pose: bool,
    pub shape: bool,
}

impl JacobianRequest {
    pub const NONE: Self = Self {
        pose: false,
        shape: false,
    };
    pub const ALL: Self = Self {
        pose: true,
        shape: true,
    };
}

/// Linear blend skinning, written as `v + Σ w_b (G_b(v) - v)` so that an
/// identity pose reproduces the shaped rest mesh exactly.
pub fn skin(
    shaped: &ShapedRest,
    skeleton: &Skeleton,
    bones: &BoneTransforms,
    pose: &Pose,
    weights: &SkinningWeights,
    want: JacobianRequest,
) -> Result<DeformResult> {
    let nv = shaped.vertices.len();
    if weights.influences.len() != nv {
        return Err(Error::DimensionMismatch {
            expected: nv,
            actual: weights.influences.len(),
        });
    }
    let g = &bones.skinning;
    let vertices: Vec<Vec3> = shaped
        .vertices
        .iter()
        .zip(&weights.influences)
        .map(|(v, inf)| {
            let mut out = *v;
            for &(b, w) in inf {
                out += (g[b as usize].apply(v) - v) * w;
            }
            out
        })
        .collect();

    let pose_jacobian = want.pose.then(|| pose_jacobian(shaped, skeleton, bones, pose, weights));
    let shape_jacobian = if want.shape {
        Some(shape_jacobian(shaped, skeleton, bones, pose, weights)?)
    } else {
        None
    };
    Ok(DeformResult {
        vertices,
        pose_jacobian,
        shape_jacobian,
    })
}

fn pose_jacobian(
    shaped: &ShapedRest,
    skeleton: &Skeleton,
    bones: &BoneTransforms,
    pose: &Pose,
    weights: &SkinningWeights,
) -> PoseJacobian {
    let nb = skeleton.len();
    let per = nb + 2;
    let chains: Vec<Vec<usize>> = (0..nb).map(|b| skeleton.chain_to_root(b)).collect();
    let axes: Vec<Mat3> = (0..nb)
        .map(|k| bones.world[k].rot * right_jacobian(&pose.joint_rotations[k]))
        .collect();
    let root_axes = exp_so3(&pose.root_rotation) * right_jacobian(&pose.root_rotation);
    let t0 = pose.root_translation;
    let mut blocks = vec![Mat3::zeros(); shaped.vertices.len() * per];
    let mut sums: Vec<(Vec3, f64)> = vec![(Vec3::zeros(), 0.0); nb];
    let mut touched = Vec::new();
    let mut seen = vec![false; nb];
    for (v, (x, inf)) in shaped.vertices.iter().zip(&weights.influences).enumerate() {
        let mut total = (Vec3::zeros(), 0.0);
        for &(b, w) in inf {
            let xb = bones.skinning[b as usize].apply(x);
            total.0 += xb * w;
            total.1 += w;
            for &k in &chains[b as usize] {
                if !seen[k] {
                    seen[k] = true;
                    touched.push(k);
                }
                sums[k].0 += xb * w;
                sums[k].1 += w;
            }
        }
        let out = &mut blocks[v * per..(v + 1) * per];
        out[0] = -skew(&(total.0 - t0 * total.1)) * root_axes;
        out[1] = Mat3::identity() * total.1;
        for k in touched.drain(..) {
            let (s, w) = sums[k];
            out[2 + k] = -skew(&(s - bones.world[k].trans * w)) * axes[k];
            sums[k] = (Vec3::zeros(), 0.0);
            seen[k] = false;
        }
    }
    PoseJacobian {
        blocks_per_vertex: per,
        blocks,
    }
}

fn shape_jacobian(
    shaped: &ShapedRest,
    skeleton: &Skeleton,
    bones: &BoneTransforms,
    pose: &Pose,
    weights: &SkinningWeights,
) -> Result<Vec<Vec<Vec3>>> {
    let jac = shaped.jacobian.as_ref().ok_or_else(|| {
        Error::InvalidArgument("shape Jacobian requested but the shaped rest has none".into())
    })?;
    let nb = skeleton.len();
    let order = skeleton.topological_order();
    let root_rot = exp_so3(&pose.root_rotation);
    // Pose-only quantities shared by every parameter.
    let local: Vec<(Vec3, Mat3, Mat3)> = (0..nb)
        .map(|b| {
            let theta = pose.joint_rotations[b];
            let a = bones.rest[b].rot * theta;
            (theta, exp_so3(&a), right_jacobian(&a))
        })
        .collect();
    let out = jac
        .vertices
        .par_iter()
        .zip(jac.heads.par_iter().zip(&jac.tails))
        .map(|(dv, (dheads, dtails))| {
            let mut dm = vec![Mat3::zeros(); nb];
            let mut dt = vec![Vec3::zeros(); nb];
            for &b in &order {
                let h = shaped.joint_heads[b];
                let dh = dheads[b];
                let (theta, q, jr) = &local[b];
                let dr = rest_frame_derivative(&h, &shaped.joint_tails[b], &dh, &dtails[b]);
                let dq = q * skew(&(jr * (dr * theta)));
                let c = h - q * h;
                let dc = dh - dq * h - q * dh;
                let (mp, dmp, dtp) = match skeleton.bones[b].parent {
                    Some(p) => (bones.skinning[p].rot, dm[p], dt[p]),
                    None => (root_rot, Mat3::zeros(), Vec3::zeros()),
                };
                dm[b] = dmp * q + mp * dq;
                dt[b] = dmp * c + mp * dc + dtp;
            }
            shaped
                .vertices
                .iter()
                .zip(dv)
                .zip(&weights.influences)
                .map(|((x, dx), inf)| {
                    let mut acc = *dx;
                    for &(b, w) in inf {
                        let b = b as usize;
                        acc += (dm[b] * x + bones.skinning[b].rot * dx + dt[b] - dx) * w;
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Ok(out)
}

/// Shaping and posing compiled from one bundle.
#[derive(Debug, Clone)]
pub struct Body {
    pub shape: ShapeModel,
    pub skeleton: Skeleton,
    pub weights: SkinningWeights,
    pub faces: Vec<[u32; 4]>,
}

impl Body {
    pub fn new(bundle: &AssetBundle) -> Self {
        Self::with_shape(bundle, ShapeModel::new(bundle))
    }

    pub fn with_shape(bundle: &AssetBundle, shape: ShapeModel) -> Self {
        Self {
            shape,
            skeleton: bundle.skeleton.clone(),
            weights: bundle.weights.clone(),
            faces: bundle.mesh.faces.clone(),
        }
    }

    pub fn bone_count(&self) -> usize {
        self.skeleton.len()
    }

    pub fn eval(&self, phenotypes: &[f64], pose: &Pose, want: JacobianRequest) -> Result<DeformResult> {
        pose.check(self.skeleton.len())?;
        let shaped = self.shape.eval(phenotypes, want.shape)?;
        let rest = rest_transforms(&shaped, &self.skeleton)?;
        let bones = forward_kinematics(&self.skeleton, &rest, pose);
        skin(&shaped, &self.skeleton, &bones, pose, &self.weights, want)
    }

    /// Posed vertices of one body written into `out`, without Jacobians or
    /// intermediate meshes.
    pub fn forward_into(&self, phenotypes: &[f64], pose: &Pose, out: &mut [Vec3]) -> Result<()> {
        pose.check(self.skeleton.len())?;
        self.shape.vertices_into(phenotypes, out)?;
        let (heads, tails) = self.shape.joints(out);
        let rest = heads
            .iter()
            .zip(&tails)
            .map(|(h, t)| rest_frame(h, t).map(|r| Rigid::new(r, *h)))
            .collect::<Result<Vec<_>>>()?;
        let g = forward_kinematics(&self.skeleton, &rest, pose).skinning;
        for (v, inf) in out.iter_mut().zip(&self.weights.influences) {
            let x = *v;
            for &(b, w) in inf {
                *v += (g[b as usize].apply(&x) - x) * w;
            }
        }
        Ok(())
    }

    /// Batched forward pass. `phenotypes` holds `B × param_count` values and
    /// `poses` holds `B × Pose::param_count(bones)`; `out` receives
    /// `B × vertex_count` points, body after body.
    pub fn forward_batch_into(&self, phenotypes: &[f64], poses: &[f64], out: &mut [Vec3]) -> Result<()> {
        let (np, nq, nv) = (self.shape.param_count(), Pose::param_count(self.bone_count()), self.shape.vertex_count());
        let batch = out.len() / nv.max(1);
        for (len, want) in [(out.len(), batch * nv), (phenotypes.len(), batch * np), (poses.len(), batch * nq)] {
            if len != want {
                return Err(Error::DimensionMismatch { expected: want, actual: len });
            }
        }
        out.par_chunks_mut(nv).enumerate().try_for_each(|(i, chunk)| {
            let pose = Pose::from_params(&poses[i * nq..(i + 1) * nq], self.bone_count())?;
            self.forward_into(&phenotypes[i * np..(i + 1) * np], &pose, chunk)
        })
    }

    /// Posed vertices for many `(phenotypes, pose)` pairs, in parallel.
    pub fn eval_batch(&self, items: &[(Vec<f64>, Pose)]) -> Result<Vec<Vec<Vec3>>> {
        items
            .par_iter()
            .map(|(p, pose)| self.eval(p, pose, JacobianRequest::NONE).map(|r| r.vertices))
            .collect()
    }
}

/// Shape then pose a bundle.
pub fn deform(
    bundle: &AssetBundle,
    phenotypes: &PhenotypeVector,
    pose: &Pose,
    want: JacobianRequest,
) -> Result<DeformResult> {
    let params = phenotypes.resolve(&bundle.schema)?;
    Body::new(bundle).eval(&params, pose, want)
}

/// Joint rotations that reproduce source world orientations on the target
/// skeleton. `mapping` sends source bone names to target bone names and must
/// cover a connected subtree containing the target root.
pub fn retarget(
    source_orientations: &BTreeMap<String, Mat3>,
    mapping: &BTreeMap<String, String>,
    skeleton: &Skeleton,
    shaped: &ShapedRest,
) -> Result<Pose> {
    let mut target_rot: HashMap<usize, Mat3> = HashMap::new();
    for (src, dst) in mapping {
        let b = skeleton
            .index_of(dst)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown target bone '{dst}'")))?;
        let r = source_orientations.get(src).ok_or_else(|| {
            Error::InvalidArgument(format!("no orientation for source bone '{src}'"))
        })?;
        if target_rot.insert(b, *r).is_some() {
            return Err(Error::InvalidArgument(format!(
                "target bone '{dst}' is mapped more than once"
            )));
        }
    }
    if !target_rot.contains_key(&skeleton.root) {
        return Err(Error::InvalidArgument("mapping must include the root bone".into()));
    }
    for &b in target_rot.keys() {
        if let Some(p) = skeleton.bones[b].parent {
            if !target_rot.contains_key(&p) {
                return Err(Error::InvalidArgument(format!(
                    "mapping is disconnected: '{}' is mapped but its parent '{}' is not",
                    skeleton.bones[b].name, skeleton.bones[p].name
                )));
            }
        }
    }
    let rest = rest_transforms(shaped, skeleton)?;
    let mut pose = Pose::identity(skeleton.len());
    // Rotation part of each bone's skinning transform under the pose so far.
    let mut g = vec![Mat3::identity(); skeleton.len()];
    for b in skeleton.topological_order() {
        let rb = rest[b].rot;
        let parent = match skeleton.bones[b].parent {
            Some(p) => g[p],
            None => Mat3::identity(),
        };
        match target_rot.get(&b) {
            Some(want) if skeleton.bones[b].parent.is_none() => {
                pose.root_rotation = log_so3(&(want * rb.transpose()));
            }
            Some(want) => {
                pose.joint_rotations[b] = log_so3(&(rb.transpose() * parent.transpose() * want));
            }
            None => {}
        }
        let local = exp_so3(&(rb * pose.joint_rotations[b]));
        g[b] = if skeleton.bones[b].parent.is_none() {
            exp_so3(&pose.root_rotation) * local
        } else {
            parent * local
        };
    }
    Ok(pose)
}
