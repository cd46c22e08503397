//! Bounding-volume hierarchy over triangles, closest-point queries and the
//! triangle–triangle intersection predicate.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Triangles per BVH leaf.
pub const LEAF_SIZE: usize = 4;

/// Signed-volume threshold below which a vertex counts as lying on the
/// other triangle's plane.
pub const COPLANAR_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn of_triangle(t: &[Vec3; 3]) -> Self {
        let mut b = Self::empty();
        for p in t {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= o.min[i] && o.max[i] <= self.max[i])
    }

    /// Whether the boxes overlap once both are grown by `margin`.
    pub fn overlaps(&self, o: &Aabb, margin: f64) -> bool {
        (0..3).all(|i| self.min[i] <= o.max[i] + margin && o.min[i] <= self.max[i] + margin)
    }

    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|i| {
                let d = (self.min[i] - p[i]).max(p[i] - self.max[i]).max(0.0);
                d * d
            })
            .sum()
    }

    fn longest_axis(&self) -> usize {
        let e = self.max - self.min;
        if e.x >= e.y && e.x >= e.z {
            0
        } else if e.y >= e.z {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvhNode {
    pub aabb: Aabb,
    /// Children for inner nodes; unused for leaves.
    pub children: [u32; 2],
    /// Range into [`Bvh::order`]; `count == 0` marks an inner node.
    pub start: u32,
    pub count: u32,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

/// Binary BVH; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Bvh {
    pub nodes: Vec<BvhNode>,
    /// Triangle indices in leaf order.
    pub order: Vec<u32>,
}

pub fn triangle(vertices: &[Vec3], t: &[u32; 3]) -> [Vec3; 3] {
    t.map(|i| vertices[i as usize])
}

/// BVH over all `triangles`.
pub fn build_bvh(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Result<Bvh> {
    Bvh::build(vertices, triangles, (0..triangles.len() as u32).collect())
}

impl Bvh {
    /// BVH over the triangles listed in `subset` (indices into `triangles`).
    pub fn build(vertices: &[Vec3], triangles: &[[u32; 3]], subset: Vec<u32>) -> Result<Bvh> {
        if subset.is_empty() {
            return Err(Error::InvalidArgument("cannot build a BVH without triangles".into()));
        }
        let boxes: Vec<Aabb> = subset
            .iter()
            .map(|&t| Aabb::of_triangle(&triangle(vertices, &triangles[t as usize])))
            .collect();
        let centroids: Vec<Vec3> = boxes.iter().map(|b| (b.min + b.max) * 0.5).collect();
        let mut bvh = Bvh {
            nodes: Vec::with_capacity(2 * subset.len() / LEAF_SIZE + 1),
            order: subset,
        };
        // work on positions into `subset` so boxes stay aligned
        let mut idx: Vec<u32> = (0..bvh.order.len() as u32).collect();
        bvh.split(&mut idx, 0, &boxes, &centroids);
        bvh.order = idx.iter().map(|&i| bvh.order[i as usize]).collect();
        Ok(bvh)
    }

    fn split(&mut self, idx: &mut [u32], start: usize, boxes: &[Aabb], centroids: &[Vec3]) -> u32 {
        let aabb = idx
            .iter()
            .fold(Aabb::empty(), |acc, &i| acc.union(&boxes[i as usize]));
        let node = self.nodes.len() as u32;
        self.nodes.push(BvhNode {
            aabb,
            children: [0, 0],
            start: start as u32,
            count: idx.len() as u32,
        });
        if idx.len() <= LEAF_SIZE {
            return node;
        }
        let axis = aabb.longest_axis();
        idx.sort_by(|&a, &b| {
            centroids[a as usize][axis]
                .partial_cmp(&centroids[b as usize][axis])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mid = idx.len() / 2;
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.split(lo, start, boxes, centroids);
        let right = self.split(hi, start + mid, boxes, centroids);
        let n = &mut self.nodes[node as usize];
        n.children = [left, right];
        n.count = 0;
        node
    }

    pub fn leaf_triangles(&self, node: &BvhNode) -> &[u32] {
        &self.order[node.start as usize..(node.start + node.count) as usize]
    }

    /// Calls `f` for every triangle pair `(a from self, b from other)` whose
    /// boxes overlap within `margin`.
    pub fn overlapping_pairs(&self, other: &Bvh, margin: f64, mut f: impl FnMut(u32, u32)) {
        let mut stack = vec![(0u32, 0u32)];
        while let Some((a, b)) = stack.pop() {
            let (na, nb) = (&self.nodes[a as usize], &other.nodes[b as usize]);
            if !na.aabb.overlaps(&nb.aabb, margin) {
                continue;
            }
            match (na.is_leaf(), nb.is_leaf()) {
                (true, true) => {
                    for &ta in self.leaf_triangles(na) {
                        for &tb in other.leaf_triangles(nb) {
                            f(ta, tb);
                        }
                    }
                }
                (false, true) => {
                    stack.push((na.children[1], b));
                    stack.push((na.children[0], b));
                }
                (true, false) => {
                    stack.push((a, nb.children[1]));
                    stack.push((a, nb.children[0]));
                }
                (false, false) => {
                    for &ca in &na.children {
                        for &cb in &nb.children {
                            stack.push((ca, cb));
                        }
                    }
                }
            }
        }
    }

    /// Exact closest point on the indexed triangles; ties go to the lowest
    /// triangle index.
    pub fn closest_point(&self, p: &Vec3, vertices: &[Vec3], triangles: &[[u32; 3]]) -> ClosestPoint {
        let mut best = ClosestPoint {
            distance: f64::INFINITY,
            point: Vec3::zeros(),
            triangle: u32::MAX,
            barycentric: Vec3::zeros(),
        };
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.aabb.distance_squared(p) > best_d2 {
                continue;
            }
            if node.is_leaf() {
                for &t in self.leaf_triangles(node) {
                    let tri = triangle(vertices, &triangles[t as usize]);
                    let (q, bary) = closest_point_on_triangle(p, &tri);
                    let d2 = (p - q).norm_squared();
                    if d2 < best_d2 || (d2 == best_d2 && t < best.triangle) {
                        best_d2 = d2;
                        best = ClosestPoint {
                            distance: 0.0,
                            point: q,
                            triangle: t,
                            barycentric: bary,
                        };
                    }
                }
            } else {
                let [l, r] = node.children;
                let dl = self.nodes[l as usize].aabb.distance_squared(p);
                let dr = self.nodes[r as usize].aabb.distance_squared(p);
                // nearer child on top of the stack
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.distance = best_d2.sqrt();
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub distance: f64,
    pub point: Vec3,
    pub triangle: u32,
    /// Weights of the triangle's three vertices.
    pub barycentric: Vec3,
}

/// Closest point on a triangle and its barycentric coordinates
/// (region-based, after Ericson).
pub fn closest_point_on_triangle(p: &Vec3, t: &[Vec3; 3]) -> (Vec3, Vec3) {
    let [a, b, c] = *t;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, Vec3::new(1.0, 0.0, 0.0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, Vec3::new(0.0, 1.0, 0.0));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Vec3::new(1.0 - v, v, 0.0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, Vec3::new(0.0, 0.0, 1.0));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Vec3::new(1.0 - w, 0.0, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Vec3::new(0.0, 1.0 - w, w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Vec3::new(1.0 - v - w, v, w))
}

/// Closest point on a mesh via its BVH.
pub fn point_to_mesh(p: &Vec3, vertices: &[Vec3], triangles: &[[u32; 3]], bvh: &Bvh) -> ClosestPoint {
    bvh.closest_point(p, vertices, triangles)
}

/// Static kd-tree over a point set for nearest-neighbour queries.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Point indices arranged as an implicit balanced tree: the median of
    /// each range is its node, split on `axis[node]`.
    order: Vec<u32>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        let mut stack = vec![(0usize, points.len())];
        while let Some((lo, hi)) = stack.pop() {
            if hi <= lo {
                continue;
            }
            let mut b = Aabb::empty();
            order[lo..hi].iter().for_each(|&i| b.grow(&points[i as usize]));
            let ext = b.max - b.min;
            let a = (0..3).max_by(|&x, &y| ext[x].total_cmp(&ext[y])).unwrap_or(0);
            let mid = lo + (hi - lo) / 2;
            order[lo..hi].select_nth_unstable_by(mid - lo, |&x, &y| {
                points[x as usize][a].total_cmp(&points[y as usize][a]).then(x.cmp(&y))
            });
            axis[mid] = a as u8;
            stack.push((lo, mid));
            stack.push((mid + 1, hi));
        }
        Self {
            points: points.to_vec(),
            order,
            axis,
        }
    }

    /// Index of and distance to the nearest point; ties go to the lowest
    /// index. `None` for an empty tree.
    pub fn nearest(&self, p: &Vec3) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(p, 0, self.order.len(), &mut best);
        (best.0 != usize::MAX).then(|| (best.0, best.1.sqrt()))
    }

    fn search(&self, p: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid] as usize;
        let d2 = (self.points[i] - p).norm_squared();
        if d2 < best.1 || (d2 == best.1 && i < best.0) {
            *best = (i, d2);
        }
        let a = self.axis[mid] as usize;
        let delta = p[a] - self.points[i][a];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(p, near.0, near.1, best);
        if delta * delta <= best.1 {
            self.search(p, far.0, far.1, best);
        }
    }
}

fn lex_cmp(a: &[Vec3; 3], b: &[Vec3; 3]) -> Ordering {
    a.iter()
        .flat_map(|v| v.iter())
        .zip(b.iter().flat_map(|v| v.iter()))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Whether two triangles intersect (touching counts; coplanar overlapping
/// triangles count). Symmetric in its arguments.
pub fn triangles_intersect(a: &[Vec3; 3], b: &[Vec3; 3]) -> bool {
    if lex_cmp(a, b) == Ordering::Greater {
        moller(b, a)
    } else {
        moller(a, b)
    }
}

fn snap(d: f64) -> f64 {
    if d.abs() < COPLANAR_EPSILON {
        0.0
    } else {
        d
    }
}

fn moller(v: &[Vec3; 3], u: &[Vec3; 3]) -> bool {
    let n1 = (v[1] - v[0]).cross(&(v[2] - v[0]));
    let du = u.map(|p| snap(n1.dot(&(p - v[0]))));
    if du[0] * du[1] > 0.0 && du[0] * du[2] > 0.0 {
        return false;
    }
    let n2 = (u[1] - u[0]).cross(&(u[2] - u[0]));
    let dv = v.map(|p| snap(n2.dot(&(p - u[0]))));
    if dv[0] * dv[1] > 0.0 && dv[0] * dv[2] > 0.0 {
        return false;
    }
    let dir = n1.cross(&n2);
    let axis = dir.iamax();
    let vp = v.map(|p| p[axis]);
    let up = u.map(|p| p[axis]);
    let (Some(i1), Some(i2)) = (interval(vp, dv), interval(up, du)) else {
        return coplanar(&n1, v, u);
    };
    !(i1.1 < i2.0 || i2.1 < i1.0)
}

/// Interval of the line of plane intersection covered by a triangle, or
/// `None` when the triangle lies in the other plane.
fn interval(p: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let cut = |a: usize, b: usize, c: usize| {
        let s = p[a] + (p[b] - p[a]) * d[a] / (d[a] - d[b]);
        let t = p[a] + (p[c] - p[a]) * d[a] / (d[a] - d[c]);
        if s <= t {
            (s, t)
        } else {
            (t, s)
        }
    };
    if d[0] * d[1] > 0.0 {
        Some(cut(2, 0, 1))
    } else if d[0] * d[2] > 0.0 {
        Some(cut(1, 0, 2))
    } else if d[1] * d[2] > 0.0 || d[0] != 0.0 {
        Some(cut(0, 1, 2))
    } else if d[1] != 0.0 {
        Some(cut(1, 0, 2))
    } else if d[2] != 0.0 {
        Some(cut(2, 0, 1))
    } else {
        None
    }
}

fn coplanar(n: &Vec3, v: &[Vec3; 3], u: &[Vec3; 3]) -> bool {
    // project onto the plane most perpendicular to the normal
    let a = n.abs();
    let (i0, i1) = if a.x >= a.y && a.x >= a.z {
        (1, 2)
    } else if a.y >= a.z {
        (0, 2)
    } else {
        (0, 1)
    };
    let p2 = |p: &Vec3| [p[i0], p[i1]];
    let v2 = v.map(|p| p2(&p));
    let u2 = u.map(|p| p2(&p));
    for i in 0..3 {
        for j in 0..3 {
            if segments_cross(v2[i], v2[(i + 1) % 3], u2[j], u2[(j + 1) % 3]) {
                return true;
            }
        }
    }
    inside(u2[0], &v2) || inside(v2[0], &u2)
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

fn inside(p: [f64; 2], t: &[[f64; 2]; 3]) -> bool {
    let s = [orient(t[0], t[1], p), orient(t[1], t[2], p), orient(t[2], t[0], p)];
    s.iter().all(|&x| x >= 0.0) || s.iter().all(|&x| x <= 0.0)
}

#[cfg(test)]
mod tests {

    #[test]
    fn kd_tree_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.1))
            .collect();
        // duplicates exercise the tie rule
        pts.push(pts[10]);
        let tree = KdTree::new(&pts);
        for _ in 0..500 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .fold((usize::MAX, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            let (i, d) = tree.nearest(&q).unwrap();
            assert_eq!(i, brute.0);
            assert!((d - brute.1.sqrt()).abs() < 1e-15);
        }
        assert_eq!(tree.nearest(&pts[10]).unwrap().0, 10);
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
    }

    use super::*;
    use proptest::prelude::*;

    fn tri(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [Vec3; 3] {
        [Vec3::from(a), Vec3::from(b), Vec3::from(c)]
    }

    #[test]
    fn single_triangle_is_one_leaf_with_exact_box() {
        let v = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.5, 0.0), Vec3::new(0.2, 2.0, -1.0)];
        let bvh = build_bvh(&v, &[[0, 1, 2]]).unwrap();
        assert_eq!(bvh.nodes.len(), 1);
        assert!(bvh.nodes[0].is_leaf());
        assert_eq!(bvh.nodes[0].aabb, Aabb::of_triangle(&[v[0], v[1], v[2]]));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(build_bvh(&[], &[]).is_err());
    }

    #[test]
    fn distant_triangles_get_disjoint_children() {
        let mut v = Vec::new();
        let mut t = Vec::new();
        // five triangles near the origin, five far away, so the root splits
        for k in 0..10u32 {
            let off = if k < 5 { 0.0 } else { 100.0 } + k as f64 * 0.1;
            v.extend([Vec3::new(off, 0.0, 0.0), Vec3::new(off + 0.05, 0.0, 0.0), Vec3::new(off, 0.05, 0.0)]);
            t.push([3 * k, 3 * k + 1, 3 * k + 2]);
        }
        let bvh = build_bvh(&v, &t).unwrap();
        let root = bvh.nodes[0];
        let [l, r] = root.children.map(|c| bvh.nodes[c as usize].aabb);
        assert_eq!(root.aabb, l.union(&r));
        assert!(!l.overlaps(&r, 0.0));
    }

    #[test]
    fn crossing_and_separated_triangles() {
        let a = tri([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let through = tri([0.2, 0.2, -1.0], [0.2, 0.2, 1.0], [0.3, 0.5, 0.0]);
        let above = tri([0.2, 0.2, 0.5], [0.6, 0.2, 0.5], [0.2, 0.6, 0.5]);
        assert!(triangles_intersect(&a, &through));
        assert!(!triangles_intersect(&a, &above));
    }

    #[test]
    fn coplanar_overlap_counts() {
        let a = tri([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let b = tri([0.2, 0.2, 0.0], [2.0, 0.2, 0.0], [0.2, 2.0, 0.0]);
        let far = tri([5.0, 5.0, 0.0], [6.0, 5.0, 0.0], [5.0, 6.0, 0.0]);
        assert!(triangles_intersect(&a, &b));
        assert!(!triangles_intersect(&a, &far));
    }

    #[test]
    fn point_on_surface_and_above_centroid() {
        let t = tri([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let p = Vec3::new(0.25, 0.25, 0.0);
        let (q, bary) = closest_point_on_triangle(&p, &t);
        assert!((q - p).norm() < 1e-15);
        assert!((t[0] * bary.x + t[1] * bary.y + t[2] * bary.z - p).norm() < 1e-15);
        let c = (t[0] + t[1] + t[2]) / 3.0;
        let (q, _) = closest_point_on_triangle(&(c + Vec3::new(0.0, 0.0, 0.7)), &t);
        assert!(((c + Vec3::new(0.0, 0.0, 0.7) - q).norm() - 0.7).abs() < 1e-15);
    }

    fn coord() -> impl Strategy<Value = f64> {
        -1.0..1.0f64
    }

    fn any_tri() -> impl Strategy<Value = [Vec3; 3]> {
        proptest::array::uniform9(coord()).prop_map(|c| {
            [Vec3::new(c[0], c[1], c[2]), Vec3::new(c[3], c[4], c[5]), Vec3::new(c[6], c[7], c[8])]
        })
    }

    proptest! {
        #[test]
        fn intersection_is_symmetric(a in any_tri(), b in any_tri()) {
            prop_assert_eq!(triangles_intersect(&a, &b), triangles_intersect(&b, &a));
        }

        #[test]
        fn barycentrics_are_valid(t in any_tri(), p in proptest::array::uniform3(coord())) {
            let p = Vec3::from(p);
            let (q, b) = closest_point_on_triangle(&p, &t);
            prop_assert!(b.iter().all(|&x| x >= -1e-12));
            prop_assert!((b.sum() - 1.0).abs() < 1e-12);
            let r = t[0] * b.x + t[1] * b.y + t[2] * b.z;
            prop_assert!((r - q).norm() < 1e-9);
        }
    }
}
