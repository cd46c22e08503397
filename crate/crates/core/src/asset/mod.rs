//! Static asset data model: base mesh, skeleton, skinning weights,
//! phenotype schema, blendshape targets and the left/right symmetry map.
//!
//! Assets are validated once when they enter the engine (loading or
//! generation) and are immutable afterwards.

mod format;
mod mesh_io;
pub mod toy;

use std::collections::{BTreeSet, HashMap, HashSet};

pub(crate) use format::{Reader, Writer};
pub use format::{load_bundle, read_bundle, save_bundle, write_bundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use mesh_io::{
    export_mesh, export_ply_with_scalar, read_point_cloud, write_obj, write_ply, MeshFormat,
    PlyFaces,
};
pub use toy::{generate_toy_humanoid, with_local_morphs, Resolution};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Default cap on the number of bone influences per vertex.
pub const DEFAULT_MAX_INFLUENCES: usize = 4;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BaseMesh {
    /// Rest positions in meters, +Y up.
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 4]>,
    /// Body-part label per face.
    pub part_labels: Vec<u16>,
}

/// Split every quad `(a, b, c, d)` into `(a, b, c)` and `(a, c, d)`.
pub fn triangulate(faces: &[[u32; 4]]) -> Vec<[u32; 3]> {
    faces
        .iter()
        .flat_map(|&[a, b, c, d]| [[a, b, c], [a, c, d]])
        .collect()
}

impl BaseMesh {
    pub fn triangles(&self) -> Vec<[u32; 3]> {
        triangulate(&self.faces)
    }

    fn check(&self, problems: &mut Vec<String>) {
        let n = self.vertices.len();
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|x| x.is_finite()) {
                problems.push(format!("vertex {i} has non-finite coordinates"));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            if let Some(&bad) = face.iter().find(|&&i| i as usize >= n) {
                problems.push(format!(
                    "face {f} references vertex {bad} but the mesh has {n} vertices"
                ));
            }
            let distinct: HashSet<u32> = face.iter().copied().collect();
            if distinct.len() != 4 {
                problems.push(format!("face {f} is degenerate: {face:?}"));
            }
        }
        if self.part_labels.len() != self.faces.len() {
            problems.push(format!(
                "{} part labels for {} faces",
                self.part_labels.len(),
                self.faces.len()
            ));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    /// Vertices whose mean places the bone head.
    pub head_anchor: Vec<u32>,
    /// Vertices whose mean places the bone tail.
    pub tail_anchor: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub bones: Vec<Bone>,
    pub root: usize,
}

impl Skeleton {
    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.bones.iter().position(|b| b.name == name)
    }

    pub fn parent(&self, bone: usize) -> Option<usize> {
        self.bones[bone].parent
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.bones.len()];
        for (i, b) in self.bones.iter().enumerate() {
            if let Some(p) = b.parent {
                out[p].push(i);
            }
        }
        out
    }

    /// Bones ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let children = self.children();
        let mut order = Vec::with_capacity(self.bones.len());
        let mut stack = vec![self.root];
        while let Some(b) = stack.pop() {
            order.push(b);
            stack.extend(children[b].iter().rev());
        }
        order
    }

    /// `bone` followed by its ancestors up to the root.
    pub fn chain_to_root(&self, bone: usize) -> Vec<usize> {
        let mut out = vec![bone];
        let mut cur = bone;
        while let Some(p) = self.bones[cur].parent {
            out.push(p);
            cur = p;
        }
        out
    }

    /// Whether one bone is the parent of the other.
    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        a < self.bones.len()
            && b < self.bones.len()
            && (self.bones[a].parent == Some(b) || self.bones[b].parent == Some(a))
    }

    /// Keep only the named bones; each kept bone is re-parented to its
    /// nearest kept ancestor. Returns the subset and, per kept bone, its
    /// index in `self`. The root must be kept.
    pub fn subset(&self, keep: &[&str]) -> Result<(Skeleton, Vec<usize>)> {
        let mut kept = Vec::new();
        for name in keep {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown bone '{name}'")))?;
            kept.push(i);
        }
        if !kept.contains(&self.root) {
            return Err(Error::InvalidArgument(
                "skeleton subset must keep the root bone".into(),
            ));
        }
        // preserve the original ordering
        kept.sort_unstable();
        kept.dedup();
        let new_index: HashMap<usize, usize> =
            kept.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        let bones = kept
            .iter()
            .map(|&o| {
                let mut parent = self.bones[o].parent;
                while let Some(p) = parent {
                    if new_index.contains_key(&p) {
                        break;
                    }
                    parent = self.bones[p].parent;
                }
                Bone {
                    parent: parent.map(|p| new_index[&p]),
                    ..self.bones[o].clone()
                }
            })
            .collect();
        Ok((
            Skeleton {
                bones,
                root: new_index[&self.root],
            },
            kept,
        ))
    }

    fn check(&self, vertex_count: usize, problems: &mut Vec<String>) {
        let n = self.bones.len();
        if n == 0 {
            problems.push("skeleton has no bones".into());
            return;
        }
        if self.root >= n {
            problems.push(format!("root index {} out of range ({n} bones)", self.root));
            return;
        }
        let roots: Vec<usize> = (0..n).filter(|&i| self.bones[i].parent.is_none()).collect();
        if roots != [self.root] {
            problems.push(format!(
                "skeleton must have exactly one parentless bone (the root {}), found {roots:?}",
                self.root
            ));
        }
        let mut names = HashSet::new();
        for (i, b) in self.bones.iter().enumerate() {
            if !names.insert(b.name.as_str()) {
                problems.push(format!("bone {i} reuses the name '{}'", b.name));
            }
            if let Some(p) = b.parent {
                if p >= n {
                    problems.push(format!("bone '{}' has out-of-range parent {p}", b.name));
                }
            }
            for (kind, anchor) in [("head", &b.head_anchor), ("tail", &b.tail_anchor)] {
                if anchor.is_empty() {
                    problems.push(format!("bone '{}' has an empty {kind} anchor", b.name));
                }
                if let Some(&bad) = anchor.iter().find(|&&v| v as usize >= vertex_count) {
                    problems.push(format!(
                        "bone '{}' {kind} anchor references vertex {bad} (vertex count {vertex_count})",
                        b.name
                    ));
                }
            }
        }
        // every bone must reach the root without revisiting a bone
        for start in 0..n {
            let mut seen = HashSet::new();
            let mut cur = start;
            loop {
                if !seen.insert(cur) {
                    problems.push(format!("bone '{}' is part of a parent cycle", self.bones[start].name));
                    break;
                }
                match self.bones[cur].parent {
                    Some(p) if p < n => cur = p,
                    _ => break,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights {
    pub max_influences: usize,
    /// Per vertex: `(bone, weight)` pairs.
    pub influences: Vec<Vec<(u32, f64)>>,
}

impl SkinningWeights {
    fn check(&self, vertex_count: usize, bone_count: usize, problems: &mut Vec<String>) {
        if self.influences.len() != vertex_count {
            problems.push(format!(
                "skinning weights cover {} vertices, mesh has {vertex_count}",
                self.influences.len()
            ));
        }
        for (v, inf) in self.influences.iter().enumerate() {
            if inf.is_empty() {
                problems.push(format!("vertex {v} has no skinning influences"));
                continue;
            }
            if inf.len() > self.max_influences {
                problems.push(format!(
                    "vertex {v} has {} influences (max {})",
                    inf.len(),
                    self.max_influences
                ));
            }
            let mut sum = 0.0;
            for &(b, w) in inf {
                if b as usize >= bone_count {
                    problems.push(format!("vertex {v} references bone {b} ({bone_count} bones)"));
                }
                if !(w >= 0.0 && w.is_finite()) {
                    problems.push(format!("vertex {v} has invalid weight {w}"));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                problems.push(format!("vertex {v} weights sum to {sum}"));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeParam {
    pub name: String,
    /// Interpolation nodes, strictly increasing, first 0 and last 1.
    pub grid: Vec<f64>,
    /// Value used when a phenotype vector does not mention this parameter.
    pub neutral: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhenotypeSchema {
    pub params: Vec<PhenotypeParam>,
}

impl PhenotypeSchema {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Grid node index of `value` in parameter `param` (exact match).
    pub fn node_index(&self, param: usize, value: f64) -> Option<usize> {
        self.params[param].grid.iter().position(|&g| g == value)
    }

    fn check(&self, problems: &mut Vec<String>) {
        let mut names = HashSet::new();
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                problems.push(format!("phenotype '{}' declared twice", p.name));
            }
            if p.grid.len() < 2 {
                problems.push(format!("phenotype '{}' has fewer than 2 grid nodes", p.name));
                continue;
            }
            if p.grid[0] != 0.0 || *p.grid.last().unwrap() != 1.0 {
                problems.push(format!("phenotype '{}' grid must start at 0 and end at 1", p.name));
            }
            if p.grid.windows(2).any(|w| !(w[0] < w[1])) {
                problems.push(format!("phenotype '{}' grid is not strictly increasing", p.name));
            }
            if !(0.0..=1.0).contains(&p.neutral) {
                problems.push(format!("phenotype '{}' neutral {} outside [0,1]", p.name, p.neutral));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendTarget {
    pub name: String,
    /// `(parameter name, grid node value)`, at most one per parameter.
    pub constraints: Vec<(String, f64)>,
    /// Sparse per-vertex offsets in meters.
    pub displacements: Vec<(u32, Vec3)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymmetryMap {
    /// `(left, right)` vertex pairs.
    pub pairs: Vec<(u32, u32)>,
    /// Vertices on the sagittal plane (x = 0).
    pub midline: Vec<u32>,
}

impl SymmetryMap {
    /// Mirror partner of every vertex (midline vertices map to themselves).
    pub fn partner_table(&self, vertex_count: usize) -> Result<Vec<u32>> {
        let mut table = vec![u32::MAX; vertex_count];
        let mut set = |a: u32, b: u32| -> Result<()> {
            let slot = table
                .get_mut(a as usize)
                .ok_or_else(|| Error::Validation(vec![format!("symmetry references vertex {a}")]))?;
            if *slot != u32::MAX {
                return Err(Error::Validation(vec![format!(
                    "vertex {a} appears more than once in the symmetry map"
                )]));
            }
            *slot = b;
            Ok(())
        };
        for &(l, r) in &self.pairs {
            if l == r {
                return Err(Error::Validation(vec![format!("symmetry pair ({l}, {r}) is trivial")]));
            }
            set(l, r)?;
            set(r, l)?;
        }
        for &m in &self.midline {
            set(m, m)?;
        }
        if let Some(missing) = table.iter().position(|&p| p == u32::MAX) {
            return Err(Error::Validation(vec![format!(
                "vertex {missing} is neither paired nor on the midline"
            )]));
        }
        Ok(table)
    }
}

/// Reflection through the sagittal plane.
#[inline]
pub fn reflect(v: &Vec3) -> Vec3 {
    Vec3::new(-v.x, v.y, v.z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetBundle {
    /// Identifies the mesh connectivity; regressors refer to it.
    pub topology_id: String,
    pub mesh: BaseMesh,
    pub skeleton: Skeleton,
    pub weights: SkinningWeights,
    pub schema: PhenotypeSchema,
    pub targets: Vec<BlendTarget>,
    pub symmetry: SymmetryMap,
}

impl AssetBundle {
    pub fn vertex_count(&self) -> usize {
        self.mesh.vertices.len()
    }

    /// Check every invariant; the error lists all violations found.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let nv = self.mesh.vertices.len();
        self.mesh.check(&mut problems);
        self.skeleton.check(nv, &mut problems);
        self.weights.check(nv, self.skeleton.len(), &mut problems);
        self.schema.check(&mut problems);

        let mut seen_sets = HashSet::new();
        for (t, target) in self.targets.iter().enumerate() {
            let mut params = HashSet::new();
            for (name, node) in &target.constraints {
                match self.schema.index_of(name) {
                    None => problems.push(format!(
                        "target {t} ('{}') constrains unknown phenotype '{name}'",
                        target.name
                    )),
                    Some(p) => {
                        if self.schema.node_index(p, *node).is_none() {
                            problems.push(format!(
                                "target {t} ('{}') uses {name}={node}, which is not a grid node",
                                target.name
                            ));
                        }
                    }
                }
                if !params.insert(name.as_str()) {
                    problems.push(format!(
                        "target {t} ('{}') constrains '{name}' more than once",
                        target.name
                    ));
                }
            }
            let key: BTreeSet<(String, u64)> = target
                .constraints
                .iter()
                .map(|(n, v)| (n.clone(), v.to_bits()))
                .collect();
            if !seen_sets.insert(key) {
                problems.push(format!(
                    "target {t} ('{}') duplicates another target's constraint set",
                    target.name
                ));
            }
            for (i, d) in &target.displacements {
                if *i as usize >= nv {
                    problems.push(format!(
                        "target {t} ('{}') displaces vertex {i} (vertex count {nv})",
                        target.name
                    ));
                }
                if !d.iter().all(|x| x.is_finite()) {
                    problems.push(format!("target {t} has a non-finite displacement at {i}"));
                }
            }
        }

        if let Err(Error::Validation(mut p)) = self.symmetry.partner_table(nv) {
            problems.append(&mut p);
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Part label of every face from the bone with the largest summed weight
    /// over the face's vertices (ties go to the lower bone index).
    pub fn dominant_bone_labels(&self) -> Vec<u16> {
        dominant_bone_labels(&self.mesh.faces, &self.weights, self.skeleton.len())
    }
}

pub fn dominant_bone_labels(
    faces: &[[u32; 4]],
    weights: &SkinningWeights,
    bone_count: usize,
) -> Vec<u16> {
    let mut acc = vec![0.0; bone_count];
    faces
        .iter()
        .map(|face| {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &v in face {
                for &(b, w) in &weights.influences[v as usize] {
                    acc[b as usize] += w;
                }
            }
            let mut best = 0;
            for (b, &a) in acc.iter().enumerate() {
                if a > acc[best] {
                    best = b;
                }
            }
            best as u16
        })
        .collect()
}
