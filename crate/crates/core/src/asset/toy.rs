//! Procedural toy humanoid used as a self-contained test asset.
//!
//! The body is five capped tubes of revolution: trunk (pelvis to skull,
//! including a neck), two arms in T-pose along ±X and two legs along -Y.
//! The left side (+X) is built first and the right side is its exact mirror.
//! Phenotypes are `age` (nodes 0, 1/3, 2/3, 1; neutral 2/3) and `weight`
//! (nodes 0, 1/2, 1; neutral 1/2), with one target per node (neutral ones
//! empty) plus a two-parameter `age=0, weight=1` target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use super::{
    dominant_bone_labels, reflect, AssetBundle, BaseMesh, BlendTarget, Bone, PhenotypeParam,
    PhenotypeSchema, Skeleton, SkinningWeights, SymmetryMap, DEFAULT_MAX_INFLUENCES,
};
use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Coarse,
    Fine,
}

impl Resolution {
    pub fn topology_id(self) -> &'static str {
        match self {
            Resolution::Coarse => "toy-coarse",
            Resolution::Fine => "toy-fine",
        }
    }
}

// (axial coordinate, radius) knots per tube.
const TRUNK: [(f64, f64); 13] = [
    (0.88, 0.15),
    (0.95, 0.16),
    (1.05, 0.14),
    (1.15, 0.135),
    (1.25, 0.15),
    (1.35, 0.155),
    (1.42, 0.14),
    (1.48, 0.07),
    (1.53, 0.055),
    (1.58, 0.08),
    (1.64, 0.095),
    (1.70, 0.085),
    (1.74, 0.05),
];
const TRUNK_CAPS: (f64, f64) = (0.85, 1.76);

const ARM_Y: f64 = 1.38;
const ARM: [(f64, f64); 7] = [
    (0.22, 0.05),
    (0.30, 0.048),
    (0.38, 0.044),
    (0.48, 0.04),
    (0.56, 0.037),
    (0.64, 0.034),
    (0.72, 0.03),
];
const ARM_CAPS: (f64, f64) = (0.20, 0.745);

const LEG_X: f64 = 0.1;
// Distance below the hip along -Y is the axial coordinate.
const LEG: [(f64, f64); 8] = [
    (0.80, 0.07),
    (0.70, 0.068),
    (0.60, 0.06),
    (0.48, 0.05),
    (0.38, 0.048),
    (0.25, 0.042),
    (0.12, 0.038),
    (0.05, 0.035),
];
const LEG_CAPS: (f64, f64) = (0.82, 0.0);

const HEAD_CENTER: Vec3 = Vec3::new(0.0, 1.64, 0.0);

const ROOT: u32 = 0;
const SPINE: u32 = 1;
const HEAD: u32 = 2;
const UPPER_ARM_L: u32 = 3;
const LOWER_ARM_L: u32 = 4;
const UPPER_ARM_R: u32 = 5;
const LOWER_ARM_R: u32 = 6;
const UPPER_LEG_L: u32 = 7;
const LOWER_LEG_L: u32 = 8;
const UPPER_LEG_R: u32 = 9;
const LOWER_LEG_R: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Trunk,
    Arm,
    Leg,
}

struct Tube {
    /// First vertex index of each ring.
    rings: Vec<u32>,
    /// Ring index of every input knot.
    knot_ring: Vec<usize>,
    start_center: u32,
    end_center: u32,
}

#[derive(Default)]
struct Builder {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 4]>,
    part: Vec<Part>,
    /// Axial coordinate of each vertex (before any perturbation).
    axial: Vec<f64>,
}

impl Builder {
    fn push(&mut self, p: Vec3, part: Part, axial: f64) -> u32 {
        self.vertices.push(p);
        self.part.push(part);
        self.axial.push(axial);
        (self.vertices.len() - 1) as u32
    }

    /// Tube along `origin + s·axis` with ring points `r(cos φ e1 + sin φ e2)`.
    /// `(e1, e2, axis)` must be right-handed so faces point outwards.
    #[allow(clippy::too_many_arguments)]
    fn tube(
        &mut self,
        part: Part,
        origin: Vec3,
        frame: [Vec3; 3],
        knots: &[(f64, f64)],
        caps: (f64, f64),
        segments: usize,
        fine: bool,
    ) -> Tube {
        let [e1, e2, axis] = frame;
        let mut stations = Vec::new();
        let mut knot_ring = Vec::new();
        for (k, &(s, r)) in knots.iter().enumerate() {
            if fine && k > 0 {
                let (s0, r0) = knots[k - 1];
                stations.push((0.5 * (s0 + s), 0.5 * (r0 + r)));
            }
            knot_ring.push(stations.len());
            stations.push((s, r));
        }
        let n = segments as u32;
        let mut rings = Vec::with_capacity(stations.len());
        for &(s, r) in &stations {
            rings.push(self.vertices.len() as u32);
            for j in 0..segments {
                let phi = 2.0 * PI * j as f64 / segments as f64;
                let p = origin + axis * s + (e1 * phi.cos() + e2 * phi.sin()) * r;
                self.push(p, part, s);
            }
        }
        for w in rings.windows(2) {
            let (a, b) = (w[0], w[1]);
            for j in 0..n {
                let jn = (j + 1) % n;
                self.faces.push([a + j, a + jn, b + jn, b + j]);
            }
        }
        let start_center = self.push(origin + axis * caps.0, part, caps.0);
        let end_center = self.push(origin + axis * caps.1, part, caps.1);
        let first = rings[0];
        let last = *rings.last().unwrap();
        for k in (0..n).step_by(2) {
            let (k1, k2) = ((k + 1) % n, (k + 2) % n);
            self.faces.push([end_center, last + k, last + k1, last + k2]);
            self.faces.push([start_center, first + k2, first + k1, first + k]);
        }
        Tube {
            rings,
            knot_ring,
            start_center,
            end_center,
        }
    }

    /// Append a mirrored copy of vertices `range`; returns the index offset.
    fn mirror(&mut self, range: std::ops::Range<usize>, faces: std::ops::Range<usize>) -> u32 {
        let offset = (self.vertices.len() - range.start) as u32;
        for i in range {
            let p = reflect(&self.vertices[i]);
            let (part, axial) = (self.part[i], self.axial[i]);
            self.push(p, part, axial);
        }
        for f in faces {
            let [a, b, c, d] = self.faces[f];
            self.faces
                .push([a + offset, d + offset, c + offset, b + offset]);
        }
        offset
    }
}

fn ring(tube: &Tube, knot: usize, segments: usize, offset: u32) -> Vec<u32> {
    let start = tube.rings[tube.knot_ring[knot]] + offset;
    (start..start + segments as u32).collect()
}

fn knot_index(knots: &[(f64, f64)], s: f64) -> usize {
    knots.iter().position(|k| k.0 == s).expect("anchor knot")
}

/// Weight of the second bone across a blend zone `[lo, hi]`.
fn ramp(t: f64, lo: f64, hi: f64) -> f64 {
    ((t - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn blend(a: u32, b: u32, t: f64) -> Vec<(u32, f64)> {
    if t <= 0.0 {
        vec![(a, 1.0)]
    } else if t >= 1.0 {
        vec![(b, 1.0)]
    } else {
        vec![(a, 1.0 - t), (b, t)]
    }
}

/// Deterministic toy humanoid. Different seeds perturb the tube radii by up
/// to ±3% and leave the topology unchanged.
pub fn generate_toy_humanoid(seed: u64, resolution: Resolution) -> AssetBundle {
    let fine = resolution == Resolution::Fine;
    let (trunk_n, limb_n) = if fine { (16, 12) } else { (8, 6) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |knots: &[(f64, f64)]| -> Vec<(f64, f64)> {
        knots
            .iter()
            .map(|&(s, r)| (s, r * (1.0 + 0.03 * rng.random_range(-1.0..=1.0))))
            .collect()
    };
    let trunk_knots = jitter(&TRUNK);
    let arm_knots = jitter(&ARM);
    let leg_knots = jitter(&LEG);

    let x = Vec3::x();
    let y = Vec3::y();
    let z = Vec3::z();
    let mut b = Builder::default();
    let trunk = b.tube(
        Part::Trunk,
        Vec3::zeros(),
        [z, x, y],
        &trunk_knots,
        TRUNK_CAPS,
        trunk_n,
        fine,
    );

    let arm_v0 = b.vertices.len();
    let arm_f0 = b.faces.len();
    let arm = b.tube(
        Part::Arm,
        Vec3::new(0.0, ARM_Y, 0.0),
        [y, z, x],
        &arm_knots,
        ARM_CAPS,
        limb_n,
        fine,
    );
    let arm_range = (arm_v0..b.vertices.len(), arm_f0..b.faces.len());
    let arm_r = b.mirror(arm_range.0.clone(), arm_range.1.clone());

    let leg_v0 = b.vertices.len();
    let leg_f0 = b.faces.len();
    let leg = b.tube(
        Part::Leg,
        Vec3::new(LEG_X, 0.0, 0.0),
        [x, z, -y],
        &leg_knots.iter().map(|&(s, r)| (-s, r)).collect::<Vec<_>>(),
        (-LEG_CAPS.0, -LEG_CAPS.1),
        limb_n,
        fine,
    );
    let leg_range = (leg_v0..b.vertices.len(), leg_f0..b.faces.len());
    let leg_r = b.mirror(leg_range.0.clone(), leg_range.1.clone());
    let nv = b.vertices.len();

    // Trunk symmetry: angle index j pairs with n - j; j = 0 and n/2 are on
    // the midline, as are both cap centers.
    let mut pairs = Vec::new();
    let mut midline = vec![trunk.start_center, trunk.end_center];
    let tn = trunk_n as u32;
    for &r0 in &trunk.rings {
        midline.push(r0);
        midline.push(r0 + tn / 2);
        for j in 1..tn / 2 {
            pairs.push((r0 + j, r0 + tn - j));
        }
    }
    for i in arm_range.0.clone() {
        pairs.push((i as u32, i as u32 + arm_r));
    }
    for i in leg_range.0.clone() {
        pairs.push((i as u32, i as u32 + leg_r));
    }
    for &(l, r) in &pairs {
        b.vertices[r as usize] = reflect(&b.vertices[l as usize]);
    }
    for &m in &midline {
        b.vertices[m as usize].x = 0.0;
    }

    // Skinning weights from the axial coordinate of each part.
    let mut influences = vec![Vec::new(); nv];
    for i in 0..nv {
        let s = b.axial[i];
        let left = b.vertices[i].x > 0.0;
        influences[i] = match b.part[i] {
            Part::Trunk => {
                if s < 1.3 {
                    blend(ROOT, SPINE, ramp(s, 1.08, 1.22))
                } else {
                    blend(SPINE, HEAD, ramp(s, 1.48, 1.58))
                }
            }
            Part::Arm => {
                let (u, l) = if left {
                    (UPPER_ARM_L, LOWER_ARM_L)
                } else {
                    (UPPER_ARM_R, LOWER_ARM_R)
                };
                blend(u, l, ramp(s, 0.44, 0.52))
            }
            Part::Leg => {
                let (u, l) = if left {
                    (UPPER_LEG_L, LOWER_LEG_L)
                } else {
                    (UPPER_LEG_R, LOWER_LEG_R)
                };
                blend(u, l, ramp(s, -0.52, -0.44))
            }
        };
    }

    let tring = |s: f64| ring(&trunk, knot_index(&TRUNK, s), trunk_n, 0);
    let aring = |s: f64, off: u32| ring(&arm, knot_index(&ARM, s), limb_n, off);
    let lring = |s: f64, off: u32| ring(&leg, knot_index(&LEG, s), limb_n, off);
    let bone = |name: &str, parent: Option<u32>, head: Vec<u32>, tail: Vec<u32>| Bone {
        name: name.into(),
        parent: parent.map(|p| p as usize),
        head_anchor: head,
        tail_anchor: tail,
    };
    let bones = vec![
        bone("root", None, tring(0.95), tring(1.15)),
        bone("spine", Some(ROOT), tring(1.15), tring(1.53)),
        bone("head", Some(SPINE), tring(1.53), vec![trunk.end_center]),
        bone("upper_arm_l", Some(SPINE), aring(0.22, 0), aring(0.48, 0)),
        bone("lower_arm_l", Some(UPPER_ARM_L), aring(0.48, 0), vec![arm.end_center]),
        bone("upper_arm_r", Some(SPINE), aring(0.22, arm_r), aring(0.48, arm_r)),
        bone(
            "lower_arm_r",
            Some(UPPER_ARM_R),
            aring(0.48, arm_r),
            vec![arm.end_center + arm_r],
        ),
        bone("upper_leg_l", Some(ROOT), lring(0.80, 0), lring(0.48, 0)),
        bone("lower_leg_l", Some(UPPER_LEG_L), lring(0.48, 0), vec![leg.end_center]),
        bone("upper_leg_r", Some(ROOT), lring(0.80, leg_r), lring(0.48, leg_r)),
        bone(
            "lower_leg_r",
            Some(UPPER_LEG_R),
            lring(0.48, leg_r),
            vec![leg.end_center + leg_r],
        ),
    ];
    let skeleton = Skeleton { bones, root: 0 };
    let weights = SkinningWeights {
        max_influences: DEFAULT_MAX_INFLUENCES,
        influences,
    };

    let schema = PhenotypeSchema {
        params: vec![
            PhenotypeParam {
                name: "age".into(),
                grid: vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
                neutral: 2.0 / 3.0,
            },
            PhenotypeParam {
                name: "weight".into(),
                grid: vec![0.0, 0.5, 1.0],
                neutral: 0.5,
            },
        ],
    };

    let symmetry = SymmetryMap { pairs, midline };
    let field = |f: &dyn Fn(Part, &Vec3) -> Vec3| -> Vec<(u32, Vec3)> {
        let mut d: Vec<Vec3> = (0..nv).map(|i| f(b.part[i], &b.vertices[i])).collect();
        for &(l, r) in &symmetry.pairs {
            d[r as usize] = reflect(&d[l as usize]);
        }
        for &m in &symmetry.midline {
            d[m as usize].x = 0.0;
        }
        d.into_iter()
            .enumerate()
            .filter(|(_, v)| *v != Vec3::zeros())
            .map(|(i, v)| (i as u32, v))
            .collect()
    };
    let target = |name: &str, constraints: &[(&str, f64)], d: Vec<(u32, Vec3)>| BlendTarget {
        name: name.into(),
        constraints: constraints.iter().map(|&(n, v)| (n.into(), v)).collect(),
        displacements: d,
    };

    // Fields below are evaluated on the left half and mirrored.
    let head_w = |part: Part, p: &Vec3| {
        if part == Part::Trunk {
            ramp(p.y, 1.50, 1.56)
        } else {
            0.0
        }
    };
    let child = |scale: f64, head: f64| {
        move |part: Part, p: &Vec3| (p + (p - HEAD_CENTER) * (head * head_w(part, p))) * scale - p
    };
    let radial = |part: Part, p: &Vec3| match part {
        Part::Trunk => Vec3::new(p.x, 0.0, p.z),
        Part::Arm => Vec3::new(0.0, p.y - ARM_Y, p.z),
        Part::Leg => Vec3::new(p.x - LEG_X, 0.0, p.z),
    };
    let stoop = |_: Part, p: &Vec3| {
        let t = ramp(p.y, 1.2, 1.76);
        Vec3::new(0.0, -0.03 * t, 0.06 * t * t)
    };
    let thin = |part: Part, p: &Vec3| radial(part, p) * -0.15 + Vec3::new(0.0, 0.008 * p.y, 0.0);
    let heavy = |part: Part, p: &Vec3| {
        let mut d = radial(part, p) * 0.35 + Vec3::new(0.0, -0.012 * p.y, 0.0);
        match part {
            Part::Arm => {
                d.x += 0.07;
                d.y -= 0.1 * (p.x - ARM_CAPS.0).max(0.0);
            }
            Part::Leg => d.x += 0.025,
            Part::Trunk => {}
        }
        d
    };
    let belly = |part: Part, p: &Vec3| {
        if part != Part::Trunk || p.z <= 0.0 {
            return Vec3::zeros();
        }
        let t = ((p.y - 1.15) / 0.15).clamp(-1.0, 1.0);
        let bump = 0.5 * (1.0 + (PI * t).cos());
        Vec3::new(0.0, 0.0, 0.04 * bump * p.z / 0.15)
    };

    let targets = vec![
        target("age_0", &[("age", 0.0)], field(&child(0.42, 0.35))),
        target("age_1_3", &[("age", 1.0 / 3.0)], field(&child(0.7, 0.12))),
        target("age_2_3", &[("age", 2.0 / 3.0)], Vec::new()),
        target("age_1", &[("age", 1.0)], field(&stoop)),
        target("weight_0", &[("weight", 0.0)], field(&thin)),
        target("weight_1_2", &[("weight", 0.5)], Vec::new()),
        target("weight_1", &[("weight", 1.0)], field(&heavy)),
        target(
            "age_0_weight_1",
            &[("age", 0.0), ("weight", 1.0)],
            field(&belly),
        ),
    ];

    let faces = b.faces;
    let part_labels = dominant_bone_labels(&faces, &weights, skeleton.len());
    let bundle = AssetBundle {
        topology_id: resolution.topology_id().into(),
        mesh: BaseMesh {
            vertices: b.vertices,
            faces,
            part_labels,
        },
        skeleton,
        weights,
        schema,
        targets,
        symmetry,
    };
    debug_assert!(bundle.validate().is_ok());
    bundle
}

/// Copy of `bundle` with `count` extra parameters (`local_00`, ...), each
/// with grid {0, 1}, neutral 0 and one target at node 1 that adds a smooth
/// bump around a random vertex. Used to vary the phenotype count.
pub fn with_local_morphs(bundle: &AssetBundle, count: usize, seed: u64) -> AssetBundle {
    let mut out = bundle.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verts = &bundle.mesh.vertices;
    for k in 0..count {
        let name = format!("local_{k:02}");
        let center = verts[rng.random_range(0..verts.len())];
        let dir = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let radius = 0.08;
        let displacements = verts
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let t = (v - center).norm() / radius;
                (t < 1.0).then(|| (i as u32, dir * (0.01 * (1.0 - t * t).powi(2))))
            })
            .collect();
        out.schema.params.push(PhenotypeParam {
            name: name.clone(),
            grid: vec![0.0, 1.0],
            neutral: 0.0,
        });
        out.targets.push(BlendTarget {
            name,
            constraints: vec![(format!("local_{k:02}"), 1.0)],
            displacements,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bundle() {
        assert_eq!(
            generate_toy_humanoid(0, Resolution::Fine),
            generate_toy_humanoid(0, Resolution::Fine)
        );
    }

    #[test]
    fn seeds_change_positions_not_topology() {
        let a = generate_toy_humanoid(0, Resolution::Fine);
        let b = generate_toy_humanoid(1, Resolution::Fine);
        assert_ne!(a.mesh.vertices, b.mesh.vertices);
        assert_eq!(a.mesh.faces, b.mesh.faces);
        assert_eq!(a.skeleton, b.skeleton);
    }

    #[test]
    fn declared_sizes() {
        let fine = generate_toy_humanoid(0, Resolution::Fine);
        assert!(fine.vertex_count() >= 200);
        assert_eq!(fine.skeleton.len(), 11);
        assert_eq!(fine.schema.names(), ["age", "weight"]);
        // one target per grid node plus the two-parameter one
        assert_eq!(fine.targets.len(), 4 + 3 + 1);
        assert!(fine.targets.iter().any(|t| t.constraints.len() == 2));
        let coarse = generate_toy_humanoid(0, Resolution::Coarse);
        assert!(coarse.vertex_count() < fine.vertex_count());
        coarse.validate().unwrap();
    }

    #[test]
    fn mirror_symmetry_is_exact() {
        for res in [Resolution::Fine, Resolution::Coarse] {
            let b = generate_toy_humanoid(7, res);
            let partner = b.symmetry.partner_table(b.vertex_count()).unwrap();
            for (i, v) in b.mesh.vertices.iter().enumerate() {
                assert_eq!(reflect(v), b.mesh.vertices[partner[i] as usize]);
            }
            for t in &b.targets {
                let mut dense = vec![Vec3::zeros(); b.vertex_count()];
                for &(i, d) in &t.displacements {
                    dense[i as usize] = d;
                }
                for (i, d) in dense.iter().enumerate() {
                    assert_eq!(reflect(d), dense[partner[i] as usize], "{}", t.name);
                }
            }
        }
    }

    #[test]
    fn rest_mesh_encloses_positive_volume() {
        let b = generate_toy_humanoid(0, Resolution::Fine);
        let v = &b.mesh.vertices;
        let vol: f64 = b
            .mesh
            .triangles()
            .iter()
            .map(|t| v[t[0] as usize].dot(&v[t[1] as usize].cross(&v[t[2] as usize])) / 6.0)
            .sum();
        assert!(vol > 0.03 && vol < 0.2, "volume {vol}");
    }

    #[test]
    fn local_morphs_extend_the_schema() {
        let b = with_local_morphs(&generate_toy_humanoid(0, Resolution::Coarse), 6, 1);
        b.validate().unwrap();
        assert_eq!(b.schema.len(), 8);
        assert_eq!(b.targets.len(), 14);
    }
}
