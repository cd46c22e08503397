//! Phenotype-driven shaping: piecewise-multilinear blending of targets onto
//! the base mesh, joint placement from anchor means, exact Jacobians.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asset::{triangulate, AssetBundle, PhenotypeSchema};
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Density used to turn mesh volume into mass for the BMI proxy (kg/m³).
pub const DEFAULT_DENSITY: f64 = 1000.0;

/// Named phenotype values; missing parameters take the schema neutral.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhenotypeVector {
    pub values: BTreeMap<String, f64>,
}

impl PhenotypeVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    /// Dense values in schema order.
    pub fn resolve(&self, schema: &PhenotypeSchema) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = schema.params.iter().map(|p| p.neutral).collect();
        for (name, &v) in &self.values {
            let i = schema
                .index_of(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown phenotype '{name}'")))?;
            check_unit(name, v)?;
            out[i] = v;
        }
        Ok(out)
    }

    pub fn from_dense(schema: &PhenotypeSchema, values: &[f64]) -> Self {
        Self {
            values: schema
                .params
                .iter()
                .zip(values)
                .map(|(p, &v)| (p.name.clone(), v))
                .collect(),
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "phenotype '{name}' = {v} is outside [0, 1]"
        )))
    }
}

/// Cell `i` with `grid[i] <= v < grid[i+1]` (the last cell for `v = 1`) and
/// the position `t` of `v` inside it.
fn cell(value: f64, grid: &[f64]) -> (usize, f64) {
    let last = grid.len() - 2;
    let i = grid[1..=last].partition_point(|&g| g <= value);
    (i, (value - grid[i]) / (grid[i + 1] - grid[i]))
}

/// Hat-basis weights of `value` as `(node value, weight)` pairs with
/// nonzero weight.
pub fn hat_weights(value: f64, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_unit("value", value)?;
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 nodes".into()));
    }
    let (i, t) = cell(value, grid);
    Ok([(grid[i], 1.0 - t), (grid[i + 1], t)]
        .into_iter()
        .filter(|&(_, w)| w != 0.0)
        .collect())
}

/// Weight of node `node` at `value` and its right derivative.
fn node_weight(value: f64, grid: &[f64], node: usize) -> (f64, f64) {
    let (i, t) = cell(value, grid);
    let h = grid[i + 1] - grid[i];
    if node == i {
        (1.0 - t, -1.0 / h)
    } else if node == i + 1 {
        (t, 1.0 / h)
    } else {
        (0.0, 0.0)
    }
}

/// Product of hat weights over the target's constraints.
pub fn target_weight(
    schema: &PhenotypeSchema,
    constraints: &[(String, f64)],
    phenotypes: &PhenotypeVector,
) -> Result<f64> {
    let dense = phenotypes.resolve(schema)?;
    let mut w = 1.0;
    for (name, node) in constraints {
        let p = schema
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phenotype '{name}'")))?;
        let n = schema
            .node_index(p, *node)
            .ok_or_else(|| Error::InvalidArgument(format!("{node} is not a node of '{name}'")))?;
        w *= node_weight(dense[p], &schema.params[p].grid, n).0;
    }
    Ok(w)
}

/// Derivatives of shaped vertices and joints, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeJacobian {
    pub vertices: Vec<Vec<Vec3>>,
    pub heads: Vec<Vec<Vec3>>,
    pub tails: Vec<Vec<Vec3>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedRest {
    pub vertices: Vec<Vec3>,
    pub joint_heads: Vec<Vec3>,
    pub joint_tails: Vec<Vec3>,
    pub jacobian: Option<ShapeJacobian>,
}

#[derive(Debug, Clone)]
struct CompiledTarget {
    /// `(parameter, node index)` for active parameters.
    factors: Vec<(usize, usize)>,
    /// Product of the weights of constraints on inactive parameters.
    scale: f64,
    displacements: Vec<(u32, Vec3)>,
}

/// Shaping operator compiled from a bundle. Only the first `active`
/// parameters vary; the rest are held at their neutral values.
#[derive(Debug, Clone)]
pub struct ShapeModel {
    base: Vec<Vec3>,
    grids: Vec<Vec<f64>>,
    neutral: Vec<f64>,
    targets: Vec<CompiledTarget>,
    heads: Vec<Vec<u32>>,
    tails: Vec<Vec<u32>>,
}

impl ShapeModel {
    pub fn new(bundle: &AssetBundle) -> Self {
        Self::restricted(bundle, bundle.schema.len())
    }

    pub fn restricted(bundle: &AssetBundle, active: usize) -> Self {
        let schema = &bundle.schema;
        let active = active.min(schema.len());
        let targets = bundle
            .targets
            .iter()
            .filter_map(|t| {
                let mut factors = Vec::new();
                let mut scale = 1.0;
                for (name, node) in &t.constraints {
                    let p = schema.index_of(name).expect("validated bundle");
                    let n = schema.node_index(p, *node).expect("validated bundle");
                    if p < active {
                        factors.push((p, n));
                    } else {
                        let param = &schema.params[p];
                        scale *= node_weight(param.neutral, &param.grid, n).0;
                    }
                }
                (scale != 0.0 && !t.displacements.is_empty()).then(|| CompiledTarget {
                    factors,
                    scale,
                    displacements: t.displacements.clone(),
                })
            })
            .collect();
        Self {
            base: bundle.mesh.vertices.clone(),
            grids: schema.params[..active].iter().map(|p| p.grid.clone()).collect(),
            neutral: schema.params[..active].iter().map(|p| p.neutral).collect(),
            targets,
            heads: bundle.skeleton.bones.iter().map(|b| b.head_anchor.clone()).collect(),
            tails: bundle.skeleton.bones.iter().map(|b| b.tail_anchor.clone()).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.grids.len()
    }

    /// Grid of active parameter `p`.
    pub fn grid(&self, p: usize) -> &[f64] {
        &self.grids[p]
    }

    pub fn vertex_count(&self) -> usize {
        self.base.len()
    }

    pub fn neutral(&self) -> &[f64] {
        &self.neutral
    }

    fn check(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.grids.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grids.len(),
                actual: params.len(),
            });
        }
        match params.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => check_unit(&format!("#{i}"), params[i]),
            None => Ok(()),
        }
    }

    /// Target weight and, per factor, its partial derivative.
    fn weight(&self, t: &CompiledTarget, params: &[f64], grad: &mut Vec<f64>) -> f64 {
        grad.clear();
        let vals: Vec<(f64, f64)> = t
            .factors
            .iter()
            .map(|&(p, n)| node_weight(params[p], &self.grids[p], n))
            .collect();
        let w = t.scale * vals.iter().map(|v| v.0).product::<f64>();
        for k in 0..vals.len() {
            let mut g = t.scale * vals[k].1;
            for (j, v) in vals.iter().enumerate() {
                if j != k {
                    g *= v.0;
                }
            }
            grad.push(g);
        }
        w
    }

    /// Shaped vertices written into `out` (no joints, no Jacobian).
    pub fn vertices_into(&self, params: &[f64], out: &mut [Vec3]) -> Result<()> {
        self.check(params)?;
        if out.len() != self.base.len() {
            return Err(Error::DimensionMismatch {
                expected: self.base.len(),
                actual: out.len(),
            });
        }
        out.copy_from_slice(&self.base);
        for t in &self.targets {
            let w = t.scale
                * t.factors
                    .iter()
                    .map(|&(p, n)| node_weight(params[p], &self.grids[p], n).0)
                    .product::<f64>();
            if w != 0.0 {
                for &(i, d) in &t.displacements {
                    out[i as usize] += d * w;
                }
            }
        }
        Ok(())
    }

    pub fn vertices(&self, params: &[f64]) -> Result<Vec<Vec3>> {
        let mut out = vec![Vec3::zeros(); self.base.len()];
        self.vertices_into(params, &mut out)?;
        Ok(out)
    }

    /// Bone heads and tails as anchor means over `vertices`.
    pub fn joints(&self, vertices: &[Vec3]) -> (Vec<Vec3>, Vec<Vec3>) {
        let mean = |idx: &[u32]| idx.iter().map(|&i| vertices[i as usize]).sum::<Vec3>() / idx.len() as f64;
        (
            self.heads.iter().map(|a| mean(a)).collect(),
            self.tails.iter().map(|a| mean(a)).collect(),
        )
    }

    pub fn eval(&self, params: &[f64], want_jacobian: bool) -> Result<ShapedRest> {
        let vertices = self.vertices(params)?;
        let (joint_heads, joint_tails) = self.joints(&vertices);
        let jacobian = want_jacobian.then(|| {
            let np = self.grids.len();
            let mut dv = vec![vec![Vec3::zeros(); self.base.len()]; np];
            let mut grad = Vec::new();
            for t in &self.targets {
                self.weight(t, params, &mut grad);
                for (&(p, _), &g) in t.factors.iter().zip(&grad) {
                    if g != 0.0 {
                        for &(i, d) in &t.displacements {
                            dv[p][i as usize] += d * g;
                        }
                    }
                }
            }
            let (heads, tails) = dv.iter().map(|d| self.joints(d)).unzip();
            ShapeJacobian {
                vertices: dv,
                heads,
                tails,
            }
        });
        Ok(ShapedRest {
            vertices,
            joint_heads,
            joint_tails,
            jacobian,
        })
    }

    /// Shaped vertices for a batch of parameter vectors, written into one
    /// contiguous buffer of `batch.len() * vertex_count` points.
    pub fn batch_into(&self, batch: &[Vec<f64>], out: &mut [Vec3]) -> Result<()> {
        let nv = self.base.len();
        if out.len() != batch.len() * nv {
            return Err(Error::DimensionMismatch {
                expected: batch.len() * nv,
                actual: out.len(),
            });
        }
        out.par_chunks_mut(nv)
            .zip(batch.par_iter())
            .try_for_each(|(chunk, p)| self.vertices_into(p, chunk))
    }
}

/// Shape a bundle at named phenotype values.
pub fn shape(
    bundle: &AssetBundle,
    phenotypes: &PhenotypeVector,
    want_jacobian: bool,
) -> Result<ShapedRest> {
    let params = phenotypes.resolve(&bundle.schema)?;
    ShapeModel::new(bundle).eval(&params, want_jacobian)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    /// Vertical (+Y) extent in meters.
    pub height: f64,
    /// Enclosed volume in m³.
    pub volume: f64,
    /// `volume * density / height²` in kg/m².
    pub bmi_proxy: f64,
}

pub fn measure(vertices: &[Vec3], faces: &[[u32; 4]], density: f64) -> Result<Measurements> {
    let (lo, hi) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.y), hi.max(v.y))
        });
    let height = hi - lo;
    if !(height > 0.0) || !height.is_finite() {
        return Err(Error::Degenerate("mesh has zero vertical extent".into()));
    }
    let volume: f64 = triangulate(faces)
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| vertices[i as usize]);
            a.dot(&b.cross(&c))
        })
        .sum::<f64>()
        / 6.0;
    Ok(Measurements {
        height,
        volume,
        bmi_proxy: volume * density / (height * height),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asset::{generate_toy_humanoid, Resolution};

    fn grid4() -> Vec<f64> {
        vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]
    }

    #[test]
    fn age_half_splits_evenly() {
        let w = hat_weights(0.5, &grid4()).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!((w[0].0, w[1].0), (1.0 / 3.0, 2.0 / 3.0));
        // the thirds are not exact in binary, so 0.5 sits an ulp off-center
        assert!((w[0].1 - 0.5).abs() < 1e-15 && (w[1].1 - 0.5).abs() < 1e-15);
        assert_eq!(w[0].1 + w[1].1, 1.0);
    }

    #[test]
    fn node_value_has_single_weight() {
        assert_eq!(hat_weights(1.0 / 3.0, &grid4()).unwrap(), vec![(1.0 / 3.0, 1.0)]);
        assert_eq!(hat_weights(1.0, &grid4()).unwrap(), vec![(1.0, 1.0)]);
        assert_eq!(hat_weights(0.0, &grid4()).unwrap(), vec![(0.0, 1.0)]);
    }

    #[test]
    fn quarter_on_three_node_grid() {
        let w = hat_weights(0.25, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(w, vec![(0.0, 0.5), (0.5, 0.5)]);
    }

    #[test]
    fn out_of_range_value_is_rejected() {
        assert!(hat_weights(1.5, &grid4()).is_err());
        assert!(hat_weights(-0.1, &grid4()).is_err());
    }

    #[test]
    fn two_parameter_target_weight_is_a_product() {
        let b = generate_toy_humanoid(0, Resolution::Coarse);
        let c = vec![("age".to_string(), 1.0 / 3.0), ("weight".to_string(), 0.5)];
        let at_nodes = PhenotypeVector::new().with("age", 1.0 / 3.0).with("weight", 0.5);
        assert_eq!(target_weight(&b.schema, &c, &at_nodes).unwrap(), 1.0);
        let between = PhenotypeVector::new().with("age", 0.5).with("weight", 0.25);
        assert!((target_weight(&b.schema, &c, &between).unwrap() - 0.25).abs() < 1e-15);
        let single = vec![("age".to_string(), 1.0 / 3.0)];
        assert!((target_weight(&b.schema, &single, &between).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn neutral_shape_is_the_base_mesh() {
        let b = generate_toy_humanoid(0, Resolution::Fine);
        let s = shape(&b, &PhenotypeVector::new(), false).unwrap();
        assert_eq!(s.vertices, b.mesh.vertices);
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let b = generate_toy_humanoid(0, Resolution::Coarse);
        let p = PhenotypeVector::new().with("height", 0.5);
        assert!(shape(&b, &p, false).is_err());
    }

    #[test]
    fn unit_cube_measurements() {
        let v: Vec<Vec3> = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let f = vec![
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let m = measure(&v, &f, DEFAULT_DENSITY).unwrap();
        assert_eq!(m.height, 1.0);
        assert!((m.volume - 1.0).abs() < 1e-15);
        let v2: Vec<Vec3> = v.iter().map(|p| p * 2.0).collect();
        let m2 = measure(&v2, &f, DEFAULT_DENSITY).unwrap();
        assert!((m2.volume - 8.0).abs() < 1e-12);
        let flat: Vec<Vec3> = v.iter().map(|p| Vec3::new(p.x, 0.0, p.z)).collect();
        assert!(matches!(measure(&flat, &f, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn restricted_model_matches_full_model_at_neutral_tail() {
        let b = crate::asset::with_local_morphs(&generate_toy_humanoid(0, Resolution::Coarse), 4, 3);
        let full = ShapeModel::new(&b);
        let two = ShapeModel::restricted(&b, 2);
        let mut p = full.neutral().to_vec();
        p[0] = 0.2;
        p[1] = 0.9;
        assert_eq!(two.vertices(&p[..2]).unwrap(), full.vertices(&p).unwrap());
    }
}
