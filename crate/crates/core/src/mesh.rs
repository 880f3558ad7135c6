//! Insertable triangle meshes: a Wavefront OBJ subset loader, canonical
//! bounds, and a bounding-volume hierarchy for fast ray queries.
//!
//! Object frame convention: origin at the footprint center, x forward,
//! z up, ground plane at z = 0 after normalization.

use crate::geom::{normalize_yaw, rotate_z, Box3, Point3, Pose3};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh has no usable geometry")]
    NoGeometry,
    #[error("face index {0} out of range (mesh has {1} vertices)")]
    BadIndex(isize, usize),
    #[error("malformed OBJ line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Per-triangle flat albedo in [0, 1]^3. Replaces full material handling.
pub type Albedo = [f32; 3];

const DEFAULT_ALBEDO: Albedo = [0.55, 0.55, 0.6];

/// Minimum triangle area kept at load time.
const DEGENERATE_AREA: f64 = 1e-12;

/// An indexed triangle mesh with per-triangle albedo.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    pub albedo: Vec<Albedo>,
    /// Axis-aligned bounds in the object frame, cached at construction.
    bounds_min: Point3,
    bounds_max: Point3,
}

/// Options for [`load_mesh`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Uniformly scale the mesh so its x extent equals this value.
    pub target_length: Option<f64>,
    /// Albedo per `usemtl` material name; unknown names fall back to the
    /// default gray.
    pub palette: BTreeMap<String, Albedo>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Point3>,
        triangles: Vec<[u32; 3]>,
        albedo: Vec<Albedo>,
    ) -> Result<TriMesh, MeshError> {
        if vertices.len() < 3 {
            return Err(MeshError::NoGeometry);
        }
        for t in &triangles {
            for &i in t {
                if i as usize >= vertices.len() {
                    return Err(MeshError::BadIndex(i as isize, vertices.len()));
                }
            }
        }
        let albedo = if albedo.len() == triangles.len() {
            albedo
        } else {
            vec![DEFAULT_ALBEDO; triangles.len()]
        };
        // Drop degenerate triangles; ray casting divides by their area.
        let mut kept_tris = Vec::with_capacity(triangles.len());
        let mut kept_alb = Vec::with_capacity(triangles.len());
        for (t, a) in triangles.into_iter().zip(albedo.into_iter()) {
            let area = triangle_area(
                &vertices[t[0] as usize],
                &vertices[t[1] as usize],
                &vertices[t[2] as usize],
            );
            if area > DEGENERATE_AREA {
                kept_tris.push(t);
                kept_alb.push(a);
            }
        }
        if kept_tris.is_empty() {
            return Err(MeshError::NoGeometry);
        }
        let mut m = TriMesh {
            vertices,
            triangles: kept_tris,
            albedo: kept_alb,
            bounds_min: Point3::new(0.0, 0.0, 0.0),
            bounds_max: Point3::new(0.0, 0.0, 0.0),
        };
        m.recompute_bounds();
        Ok(m)
    }

    fn recompute_bounds(&mut self) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        // Bounds over referenced vertices only.
        for t in &self.triangles {
            for &i in t {
                let v = &self.vertices[i as usize];
                lo = Point3::new(lo.x.min(v.x), lo.y.min(v.y), lo.z.min(v.z));
                hi = Point3::new(hi.x.max(v.x), hi.y.max(v.y), hi.z.max(v.z));
            }
        }
        self.bounds_min = lo;
        self.bounds_max = hi;
    }

    pub fn bounds(&self) -> (Point3, Point3) {
        (self.bounds_min, self.bounds_max)
    }

    /// Length, width, height of the object-frame bounds.
    pub fn dims(&self) -> (f64, f64, f64) {
        (
            self.bounds_max.x - self.bounds_min.x,
            self.bounds_max.y - self.bounds_min.y,
            self.bounds_max.z - self.bounds_min.z,
        )
    }

    /// Object-frame bounding box as a yaw-0 [`Box3`].
    pub fn canonical_box(&self) -> Box3 {
        let (l, w, h) = self.dims();
        Box3 {
            center: Point3::new(
                (self.bounds_min.x + self.bounds_max.x) / 2.0,
                (self.bounds_min.y + self.bounds_max.y) / 2.0,
                (self.bounds_min.z + self.bounds_max.z) / 2.0,
            ),
            length: l,
            width: w,
            height: h,
            yaw: 0.0,
        }
    }

    /// Translate so the footprint center sits at the origin with min z = 0,
    /// optionally scaling the x extent to `target_length`.
    pub fn normalize(&mut self, target_length: Option<f64>) {
        let cx = (self.bounds_min.x + self.bounds_max.x) / 2.0;
        let cy = (self.bounds_min.y + self.bounds_max.y) / 2.0;
        let z0 = self.bounds_min.z;
        for v in &mut self.vertices {
            *v = Point3::new(v.x - cx, v.y - cy, v.z - z0);
        }
        if let Some(target) = target_length {
            let extent = self.bounds_max.x - self.bounds_min.x;
            if extent > 0.0 && target > 0.0 {
                let s = target / extent;
                for v in &mut self.vertices {
                    *v = v.scale(s);
                }
            }
        }
        self.recompute_bounds();
    }

    pub fn triangle(&self, i: usize) -> (Point3, Point3, Point3) {
        let [a, b, c] = self.triangles[i];
        (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize])
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let (a, b, c) = self.triangle(i);
                triangle_area(&a, &b, &c)
            })
            .sum()
    }

    /// Outward-agnostic unit normal of triangle `i`.
    pub fn triangle_normal(&self, i: usize) -> Point3 {
        let (a, b, c) = self.triangle(i);
        let n = b.sub(&a).cross(&c.sub(&a));
        let len = n.norm();
        if len > 0.0 { n.scale(1.0 / len) } else { Point3::new(0.0, 0.0, 1.0) }
    }
}

pub fn triangle_area(a: &Point3, b: &Point3, c: &Point3) -> f64 {
    b.sub(a).cross(&c.sub(a)).norm() / 2.0
}

/// Parse a Wavefront OBJ subset: `v` lines, `f` lines (fan-triangulated),
/// and `usemtl` mapped through [`LoadOptions::palette`]. The mesh is
/// normalized per [`TriMesh::normalize`].
pub fn load_mesh(obj_text: &str, opts: &LoadOptions) -> Result<TriMesh, MeshError> {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut albedo: Vec<Albedo> = Vec::new();
    let mut current_albedo = DEFAULT_ALBEDO;

    for (lineno, raw) in obj_text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in coords.iter_mut() {
                    let tok = it.next().ok_or_else(|| MeshError::Malformed {
                        line: lineno + 1,
                        reason: "vertex needs 3 coordinates".into(),
                    })?;
                    *c = tok.parse().map_err(|_| MeshError::Malformed {
                        line: lineno + 1,
                        reason: format!("bad coordinate {tok:?}"),
                    })?;
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|tok| {
                        // Accept v, v/vt, v//vn, v/vt/vn forms.
                        let first = tok.split('/').next().unwrap_or("");
                        let i: isize = first.parse().map_err(|_| MeshError::Malformed {
                            line: lineno + 1,
                            reason: format!("bad face index {tok:?}"),
                        })?;
                        let resolved = if i < 0 { vertices.len() as isize + i } else { i - 1 };
                        if resolved < 0 || resolved as usize >= vertices.len() {
                            return Err(MeshError::BadIndex(i, vertices.len()));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(MeshError::Malformed {
                        line: lineno + 1,
                        reason: "face needs at least 3 vertices".into(),
                    });
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                    albedo.push(current_albedo);
                }
            }
            Some("usemtl") => {
                let name = it.next().unwrap_or("");
                current_albedo = opts.palette.get(name).copied().unwrap_or(DEFAULT_ALBEDO);
            }
            // vn/vt/o/g/s/mtllib are irrelevant to flat-shaded ray casting.
            _ => {}
        }
    }
    if triangles.is_empty() {
        return Err(MeshError::NoGeometry);
    }
    let mut mesh = TriMesh::new(vertices, triangles, albedo)?;
    mesh.normalize(opts.target_length);
    Ok(mesh)
}

/// Tightest yaw-aligned box of the mesh under `pose`: the object-frame
/// bounds carried rigidly through the pose.
pub fn mesh_bounds(mesh: &TriMesh, pose: &Pose3) -> Box3 {
    let c = mesh.canonical_box();
    let (x, y) = rotate_z(pose.yaw, c.center.x, c.center.y);
    Box3 {
        center: Point3::new(x + pose.x, y + pose.y, c.center.z + pose.z),
        length: c.length,
        width: c.width,
        height: c.height,
        yaw: normalize_yaw(pose.yaw),
    }
}

// ---------------------------------------------------------------------------
// BVH
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Aabb {
    fn empty() -> Self {
        Aabb { lo: [f64::INFINITY; 3], hi: [f64::NEG_INFINITY; 3] }
    }

    fn grow_point(&mut self, p: &Point3) {
        for (k, v) in [p.x, p.y, p.z].iter().enumerate() {
            self.lo[k] = self.lo[k].min(*v);
            self.hi[k] = self.hi[k].max(*v);
        }
    }

    fn grow(&mut self, o: &Aabb) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(o.lo[k]);
            self.hi[k] = self.hi[k].max(o.hi[k]);
        }
    }

    fn longest_axis(&self) -> usize {
        let ext = [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]];
        let mut best = 0;
        for k in 1..3 {
            if ext[k] > ext[best] {
                best = k;
            }
        }
        best
    }

    /// Slab test; returns true when the ray intersects [0, t_max].
    #[inline]
    fn hit(&self, origin: &[f64; 3], inv_dir: &[f64; 3], t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.lo[k] - origin[k]) * inv_dir[k];
            let b = (self.hi[k] - origin[k]) * inv_dir[k];
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
enum BvhNode {
    Leaf { start: u32, count: u32, bounds: Aabb },
    Inner { left: u32, right: u32, bounds: Aabb },
}

/// Binary AABB tree over triangle ranges; median split on the longest axis,
/// at most [`Bvh::LEAF_SIZE`] triangles per leaf.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    /// Triangle indices, permuted so leaves own contiguous ranges.
    order: Vec<u32>,
    root: u32,
}

/// A ray hit: distance along the (unit) direction and the triangle index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub triangle: usize,
}

/// Ignore hits closer than this to guard against self-intersection.
pub const RAY_EPSILON: f64 = 1e-6;

impl Bvh {
    pub const LEAF_SIZE: usize = 4;

    pub fn build(mesh: &TriMesh) -> Bvh {
        let n = mesh.triangles.len();
        let mut tri_bounds = Vec::with_capacity(n);
        let mut centroids = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b, c) = mesh.triangle(i);
            let mut bb = Aabb::empty();
            bb.grow_point(&a);
            bb.grow_point(&b);
            bb.grow_point(&c);
            tri_bounds.push(bb);
            centroids.push([
                (a.x + b.x + c.x) / 3.0,
                (a.y + b.y + c.y) / 3.0,
                (a.z + b.z + c.z) / 3.0,
            ]);
        }
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::new();
        let root = Self::build_node(&mut nodes, &mut order, 0, n, &tri_bounds, &centroids);
        Bvh { nodes, order, root }
    }

    fn build_node(
        nodes: &mut Vec<BvhNode>,
        order: &mut [u32],
        start: usize,
        end: usize,
        tri_bounds: &[Aabb],
        centroids: &[[f64; 3]],
    ) -> u32 {
        let mut bounds = Aabb::empty();
        let mut centroid_bounds = Aabb::empty();
        for &t in &order[start..end] {
            bounds.grow(&tri_bounds[t as usize]);
            let c = centroids[t as usize];
            centroid_bounds.grow_point(&Point3::new(c[0], c[1], c[2]));
        }
        let count = end - start;
        if count <= Self::LEAF_SIZE {
            nodes.push(BvhNode::Leaf { start: start as u32, count: count as u32, bounds });
            return (nodes.len() - 1) as u32;
        }
        let axis = centroid_bounds.longest_axis();
        let mid = start + count / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a as usize][axis]
                .partial_cmp(&centroids[b as usize][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let left = Self::build_node(nodes, order, start, mid, tri_bounds, centroids);
        let right = Self::build_node(nodes, order, mid, end, tri_bounds, centroids);
        nodes.push(BvhNode::Inner { left, right, bounds });
        (nodes.len() - 1) as u32
    }

    /// Number of triangles reachable through the tree (each exactly once).
    pub fn triangle_count(&self) -> usize {
        self.order.len()
    }

    /// Visit every triangle index exactly once.
    pub fn for_each_triangle(&self, mut f: impl FnMut(usize)) {
        for &t in &self.order {
            f(t as usize);
        }
    }
}

/// Möller-Trumbore intersection; returns t > RAY_EPSILON or None.
#[inline]
pub fn ray_triangle(
    origin: &Point3,
    dir: &Point3,
    a: &Point3,
    b: &Point3,
    c: &Point3,
) -> Option<f64> {
    let e1 = b.sub(a);
    let e2 = c.sub(a);
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin.sub(a);
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t > RAY_EPSILON { Some(t) } else { None }
}

/// First hit of a unit-direction ray against the mesh through its BVH.
pub fn raycast(bvh: &Bvh, mesh: &TriMesh, origin: &Point3, dir: &Point3) -> Option<RayHit> {
    debug_assert!((dir.norm() - 1.0).abs() < 1e-9, "direction must be unit length");
    let o = [origin.x, origin.y, origin.z];
    let inv = [1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z];
    let mut best: Option<RayHit> = None;
    let mut stack = [0u32; 64];
    let mut sp = 0usize;
    stack[sp] = bvh.root;
    sp += 1;
    while sp > 0 {
        sp -= 1;
        let node = &bvh.nodes[stack[sp] as usize];
        let t_max = best.map_or(f64::INFINITY, |h| h.t);
        match node {
            BvhNode::Leaf { start, count, bounds } => {
                if !bounds.hit(&o, &inv, t_max) {
                    continue;
                }
                for &tri in &bvh.order[*start as usize..(*start + *count) as usize] {
                    let (a, b, c) = mesh.triangle(tri as usize);
                    if let Some(t) = ray_triangle(origin, dir, &a, &b, &c) {
                        if best.is_none_or(|h| t < h.t) {
                            best = Some(RayHit { t, triangle: tri as usize });
                        }
                    }
                }
            }
            BvhNode::Inner { left, right, bounds } => {
                if !bounds.hit(&o, &inv, t_max) {
                    continue;
                }
                stack[sp] = *left;
                sp += 1;
                stack[sp] = *right;
                sp += 1;
            }
        }
    }
    best
}

/// Reference all-triangle scan, used by tests and oracle checks.
pub fn raycast_brute_force(mesh: &TriMesh, origin: &Point3, dir: &Point3) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for i in 0..mesh.triangles.len() {
        let (a, b, c) = mesh.triangle(i);
        if let Some(t) = ray_triangle(origin, dir, &a, &b, &c) {
            if best.is_none_or(|h| t < h.t) {
                best = Some(RayHit { t, triangle: i });
            }
        }
    }
    best
}

/// A mesh plus its acceleration structure and database metadata.
#[derive(Debug)]
pub struct LoadedObject {
    pub name: String,
    pub category: String,
    pub mesh: TriMesh,
    pub bvh: Bvh,
}

impl LoadedObject {
    pub fn new(name: impl Into<String>, category: impl Into<String>, mesh: TriMesh) -> Self {
        let bvh = Bvh::build(&mesh);
        Self { name: name.into(), category: category.into(), mesh, bvh }
    }
}

/// A mesh placed in the scene at a pose, with its world-frame bounds.
#[derive(Debug, Clone)]
pub struct ObjectInstance {
    pub object: Arc<LoadedObject>,
    pub pose: Pose3,
    pub box3: Box3,
}

impl ObjectInstance {
    pub fn new(object: Arc<LoadedObject>, pose: Pose3) -> Self {
        let box3 = mesh_bounds(&object.mesh, &pose);
        Self { object, pose, box3 }
    }

    /// Cast a world-frame ray against this instance (ray moved into the
    /// object frame; t is preserved by the rigid motion).
    pub fn raycast(&self, origin: &Point3, dir: &Point3) -> Option<RayHit> {
        let o = self.pose.inverse_transform(origin);
        let d = self.pose.rotate_dir_inverse(dir);
        raycast(&self.object.bvh, &self.object.mesh, &o, &d)
    }

    pub fn raycast_brute_force(&self, origin: &Point3, dir: &Point3) -> Option<RayHit> {
        let o = self.pose.inverse_transform(origin);
        let d = self.pose.rotate_dir_inverse(dir);
        raycast_brute_force(&self.object.mesh, &o, &d)
    }
}

/// Axis-aligned unit-cube OBJ text, handy for tests and examples.
pub fn unit_cube_obj() -> &'static str {
    "v -0.5 -0.5 0\nv 0.5 -0.5 0\nv 0.5 0.5 0\nv -0.5 0.5 0\n\
     v -0.5 -0.5 1\nv 0.5 -0.5 1\nv 0.5 0.5 1\nv -0.5 0.5 1\n\
     f 1 2 3 4\nf 5 8 7 6\nf 1 5 6 2\nf 2 6 7 3\nf 3 7 8 4\nf 4 8 5 1\n"
}
