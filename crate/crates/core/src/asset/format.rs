//! Binary bundle container. Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "PHBUNDLE"
//! version    u32      currently 1
//! units      u8       1 = meters
//! topology   str
//! mesh       u64 nv, nv x (f64 x, f64 y, f64 z)
//!            u64 nf, nf x (u32 a, u32 b, u32 c, u32 d), nf x u16 part label
//! skeleton   u64 nb, u64 root,
//!            nb x (str name, i64 parent or -1, u64 n, n x u32 head anchor,
//!                  u64 m, m x u32 tail anchor)
//! weights    u32 max influences, nv x (u8 k, k x (u32 bone, f64 weight))
//! schema     u64 np, np x (str name, f64 neutral, u64 g, g x f64 node)
//! targets    u64 nt, nt x (str name, u64 c, c x (str param, f64 node),
//!                          u64 d, d x (u32 vertex, f64 dx, f64 dy, f64 dz))
//! symmetry   u64 npairs, npairs x (u32 left, u32 right), u64 nm, nm x u32
//! end        4 bytes  "END."
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::path::Path;

use super::{
    AssetBundle, BaseMesh, BlendTarget, Bone, PhenotypeParam, PhenotypeSchema, Skeleton,
    SkinningWeights, SymmetryMap,
};
use crate::error::{Error, Result};
use crate::math::Vec3;

pub const BUNDLE_MAGIC: &[u8; 8] = b"PHBUNDLE";
pub const BUNDLE_VERSION: u32 = 1;
const UNITS_METERS: u8 = 1;
const END_MARK: &[u8; 4] = b"END.";

pub fn load_bundle(path: impl AsRef<Path>) -> Result<AssetBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_bundle(&bytes)
}

pub fn save_bundle(bundle: &AssetBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_bundle(bundle)).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(b: &AssetBundle) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(BUNDLE_MAGIC);
    w.u32(BUNDLE_VERSION);
    w.u8(UNITS_METERS);
    w.str(&b.topology_id);

    w.u64(b.mesh.vertices.len() as u64);
    for v in &b.mesh.vertices {
        w.vec3(v);
    }
    w.u64(b.mesh.faces.len() as u64);
    for f in &b.mesh.faces {
        f.iter().for_each(|&i| w.u32(i));
    }
    for &l in &b.mesh.part_labels {
        w.u16(l);
    }

    w.u64(b.skeleton.bones.len() as u64);
    w.u64(b.skeleton.root as u64);
    for bone in &b.skeleton.bones {
        w.str(&bone.name);
        w.i64(bone.parent.map_or(-1, |p| p as i64));
        w.indices(&bone.head_anchor);
        w.indices(&bone.tail_anchor);
    }

    w.u32(b.weights.max_influences as u32);
    for inf in &b.weights.influences {
        w.u8(inf.len() as u8);
        for &(bone, weight) in inf {
            w.u32(bone);
            w.f64(weight);
        }
    }

    w.u64(b.schema.params.len() as u64);
    for p in &b.schema.params {
        w.str(&p.name);
        w.f64(p.neutral);
        w.u64(p.grid.len() as u64);
        p.grid.iter().for_each(|&g| w.f64(g));
    }

    w.u64(b.targets.len() as u64);
    for t in &b.targets {
        w.str(&t.name);
        w.u64(t.constraints.len() as u64);
        for (name, node) in &t.constraints {
            w.str(name);
            w.f64(*node);
        }
        w.u64(t.displacements.len() as u64);
        for (i, d) in &t.displacements {
            w.u32(*i);
            w.vec3(d);
        }
    }

    w.u64(b.symmetry.pairs.len() as u64);
    for &(l, r) in &b.symmetry.pairs {
        w.u32(l);
        w.u32(r);
    }
    w.indices(&b.symmetry.midline);
    w.bytes(END_MARK);
    w.buf
}

/// Parse and validate a bundle from bytes.
pub fn read_bundle(bytes: &[u8]) -> Result<AssetBundle> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != BUNDLE_MAGIC {
        return Err(Error::Parse("not a bundle file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(Error::Parse(format!("unsupported bundle version {version}")));
    }
    let units = r.u8()?;
    if units != UNITS_METERS {
        return Err(Error::Parse(format!("unsupported unit code {units}")));
    }
    let topology_id = r.str()?;

    let nv = r.count(24)?;
    let vertices = (0..nv).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let nf = r.count(16)?;
    let faces = (0..nf)
        .map(|_| Ok([r.u32()?, r.u32()?, r.u32()?, r.u32()?]))
        .collect::<Result<Vec<_>>>()?;
    let part_labels = (0..nf).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;

    let nb = r.count(1)?;
    let root = r.u64()? as usize;
    let mut bones = Vec::with_capacity(nb);
    for _ in 0..nb {
        let name = r.str()?;
        let parent = r.i64()?;
        let parent = if parent < 0 { None } else { Some(parent as usize) };
        let head_anchor = r.indices()?;
        let tail_anchor = r.indices()?;
        bones.push(Bone {
            name,
            parent,
            head_anchor,
            tail_anchor,
        });
    }

    let max_influences = r.u32()? as usize;
    let mut influences = Vec::with_capacity(nv);
    for _ in 0..nv {
        let k = r.u8()? as usize;
        influences.push((0..k).map(|_| Ok((r.u32()?, r.f64()?))).collect::<Result<Vec<_>>>()?);
    }

    let np = r.count(1)?;
    let mut params = Vec::with_capacity(np);
    for _ in 0..np {
        let name = r.str()?;
        let neutral = r.f64()?;
        let g = r.count(8)?;
        let grid = (0..g).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.push(PhenotypeParam { name, grid, neutral });
    }

    let nt = r.count(1)?;
    let mut targets = Vec::with_capacity(nt);
    for _ in 0..nt {
        let name = r.str()?;
        let c = r.count(1)?;
        let constraints = (0..c)
            .map(|_| Ok((r.str()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        let d = r.count(28)?;
        let displacements = (0..d)
            .map(|_| Ok((r.u32()?, r.vec3()?)))
            .collect::<Result<Vec<_>>>()?;
        targets.push(BlendTarget {
            name,
            constraints,
            displacements,
        });
    }

    let npairs = r.count(8)?;
    let pairs = (0..npairs)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    let midline = r.indices()?;
    if r.take(4)? != END_MARK {
        return Err(Error::Parse("missing end marker".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after end marker",
            bytes.len() - r.pos
        )));
    }

    let bundle = AssetBundle {
        topology_id,
        mesh: BaseMesh {
            vertices,
            faces,
            part_labels,
        },
        skeleton: Skeleton { bones, root },
        weights: SkinningWeights {
            max_influences,
            influences,
        },
        schema: PhenotypeSchema { params },
        targets,
        symmetry: SymmetryMap { pairs, midline },
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Default)]
pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn i64(&mut self, v: i64) {
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub(crate) fn vec3(&mut self, v: &Vec3) {
        self.f64(v.x);
        self.f64(v.y);
        self.f64(v.z);
    }
    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub(crate) fn indices(&mut self, idx: &[u32]) {
        self.u64(idx.len() as u64);
        idx.iter().for_each(|&i| self.u32(i));
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub(crate) fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    /// Element count, rejected early when it cannot fit in the remaining bytes.
    pub(crate) fn count(&mut self, min_elem_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_elem_size as u64) > remaining {
            return Err(Error::Parse(format!(
                "element count {n} at byte {} exceeds remaining data",
                self.pos - 8
            )));
        }
        Ok(n as usize)
    }
    pub(crate) fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Parse(format!("invalid UTF-8 string before byte {}", self.pos)))
    }
    pub(crate) fn indices(&mut self) -> Result<Vec<u32>> {
        let n = self.count(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asset::{generate_toy_humanoid, Resolution};

    #[test]
    fn empty_input_is_a_parse_error() {
        assert!(matches!(read_bundle(&[]), Err(Error::Parse(_))));
    }

    #[test]
    fn truncated_input_is_a_parse_error() {
        let bytes = write_bundle(&generate_toy_humanoid(0, Resolution::Coarse));
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(read_bundle(&bytes[..cut]), Err(Error::Parse(_))), "cut {cut}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let b = generate_toy_humanoid(5, Resolution::Fine);
        let bytes = write_bundle(&b);
        let back = read_bundle(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(write_bundle(&back), bytes);
    }

    #[test]
    fn bundle_without_targets_round_trips() {
        let mut b = generate_toy_humanoid(1, Resolution::Coarse);
        b.targets.clear();
        assert_eq!(read_bundle(&write_bundle(&b)).unwrap(), b);
    }

    #[test]
    fn invalid_face_is_rejected_on_load() {
        let mut b = generate_toy_humanoid(0, Resolution::Coarse);
        b.mesh.faces[0][0] = 1_000_000;
        let err = read_bundle(&write_bundle(&b)).unwrap_err();
        match err {
            Error::Validation(p) => assert!(p.iter().any(|m| m.starts_with("face 0 "))),
            other => panic!("unexpected {other}"),
        }
    }
}
