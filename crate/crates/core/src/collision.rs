//! Self-collision between body parts of a posed mesh.
//!
//! Parts are the per-face labels of the bundle (dominant skinning bone).
//! Each part gets its own BVH over its triangles and only pairs of distinct
//! parts are traversed. Triangle pairs that share a vertex are ignored, and
//! with `exempt_adjacent` so are parts whose bones are parent and child.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::asset::{triangulate, AssetBundle};
use crate::geometry::{triangle, triangles_intersect, Bvh};
use crate::math::Vec3;

/// Box-overlap slack so that pruning never discards a pair the predicate
/// would accept.
const BOX_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct FacePair {
    pub face_a: u32,
    pub face_b: u32,
    pub part_a: u16,
    pub part_b: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionReport {
    /// Sorted, with `face_a < face_b`.
    pub intersecting_pairs: Vec<FacePair>,
    pub colliding: bool,
}

/// Whether two part labels may be reported against each other.
pub fn parts_eligible(bundle: &AssetBundle, a: u16, b: u16, exempt_adjacent: bool) -> bool {
    a != b && !(exempt_adjacent && bundle.skeleton.are_adjacent(a as usize, b as usize))
}

pub fn share_vertex(a: &[u32; 3], b: &[u32; 3]) -> bool {
    a.iter().any(|x| b.contains(x))
}

pub fn self_collide(vertices: &[Vec3], bundle: &AssetBundle, exempt_adjacent: bool) -> CollisionReport {
    let tris = triangulate(&bundle.mesh.faces);
    let labels = &bundle.mesh.part_labels;
    let mut by_part: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    for t in 0..tris.len() as u32 {
        by_part.entry(labels[t as usize / 2]).or_default().push(t);
    }
    let parts: Vec<(u16, Bvh)> = by_part
        .into_iter()
        .map(|(p, subset)| (p, Bvh::build(vertices, &tris, subset).expect("non-empty part")))
        .collect();
    let mut jobs = Vec::new();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            if parts_eligible(bundle, parts[i].0, parts[j].0, exempt_adjacent) {
                jobs.push((i, j));
            }
        }
    }
    let found: BTreeSet<FacePair> = jobs
        .par_iter()
        .flat_map_iter(|&(i, j)| {
            let mut hits = Vec::new();
            parts[i].1.overlapping_pairs(&parts[j].1, BOX_MARGIN, |ta, tb| {
                let (a, b) = (&tris[ta as usize], &tris[tb as usize]);
                if !share_vertex(a, b)
                    && triangles_intersect(&triangle(vertices, a), &triangle(vertices, b))
                {
                    let (fa, fb) = (ta / 2, tb / 2);
                    let (fa, fb) = (fa.min(fb), fa.max(fb));
                    hits.push(FacePair {
                        face_a: fa,
                        face_b: fb,
                        part_a: labels[fa as usize],
                        part_b: labels[fb as usize],
                    });
                }
            });
            hits
        })
        .collect();
    let intersecting_pairs: Vec<FacePair> = found.into_iter().collect();
    CollisionReport {
        colliding: !intersecting_pairs.is_empty(),
        intersecting_pairs,
    }
}
