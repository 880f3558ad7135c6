//! Shared geometric data model: points, poses, oriented boxes, calibration,
//! coordinate transforms and box-overlap math.
//!
//! Conventions are KITTI's: the LiDAR frame is x-forward / y-left / z-up with
//! the sensor at the origin; the camera frame is z-forward / y-down. Boxes
//! carry only a yaw orientation.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point behind camera (depth {0} <= 0)")]
    BehindCamera(f64),
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("box dimensions must be strictly positive, got {0}x{1}x{2}")]
    NonPositiveDims(f64, f64, f64),
    #[error("2D box is empty: ({0},{1})..({2},{3})")]
    EmptyBox2(f64, f64, f64, f64),
    #[error("velo_to_cam upper-left 3x3 is not a rotation (|R R^T - I| or |det - 1| > 1e-6)")]
    NotARotation,
    #[error("velo_to_cam is not invertible")]
    NotInvertible,
    #[error("2D box lies fully outside the image after clamping")]
    OutsideImage,
}

/// Normalize an angle to the half-open interval [-pi, pi).
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = yaw.rem_euclid(two_pi);
    if y >= std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// Rotate (x, y) about the origin by `yaw` radians.
#[inline]
pub fn rotate_z(yaw: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// A point in meters. Frame is context-dependent (LiDAR unless stated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Euclidean distance from the sensor origin.
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn sub(&self, o: &Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn add(&self, o: &Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn scale(&self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }
}

/// An unordered set of LiDAR returns with per-point reflectance in [0, 1].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub intensity: Vec<f32>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, intensity: Vec<f32>) -> Self {
        assert_eq!(points.len(), intensity.len(), "points/intensity length mismatch");
        Self { points, intensity }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Point3, intensity: f32) {
        self.points.push(p);
        self.intensity.push(intensity);
    }

    pub fn is_valid(&self) -> bool {
        self.points.len() == self.intensity.len()
            && self.points.iter().all(|p| p.is_finite())
            && self.intensity.iter().all(|i| i.is_finite())
    }
}

/// Position plus yaw heading in the LiDAR frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose3 {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self { x, y, z, yaw: normalize_yaw(yaw) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, z: 0.0, yaw: 0.0 }
    }

    /// Map a point from the object frame into the world (LiDAR) frame.
    pub fn transform(&self, p: &Point3) -> Point3 {
        let (x, y) = rotate_z(self.yaw, p.x, p.y);
        Point3::new(x + self.x, y + self.y, p.z + self.z)
    }

    /// Map a world-frame point into the object frame.
    pub fn inverse_transform(&self, p: &Point3) -> Point3 {
        let (x, y) = rotate_z(-self.yaw, p.x - self.x, p.y - self.y);
        Point3::new(x, y, p.z - self.z)
    }

    /// Rotate a direction vector (no translation).
    pub fn rotate_dir(&self, d: &Point3) -> Point3 {
        let (x, y) = rotate_z(self.yaw, d.x, d.y);
        Point3::new(x, y, d.z)
    }

    pub fn rotate_dir_inverse(&self, d: &Point3) -> Point3 {
        let (x, y) = rotate_z(-self.yaw, d.x, d.y);
        Point3::new(x, y, d.z)
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

/// Yaw-oriented 3D box: center plus length (x), width (y), height (z) in the
/// box's own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: Point3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
}

impl Box3 {
    pub fn new(center: Point3, length: f64, width: f64, height: f64, yaw: f64) -> Result<Self, GeomError> {
        if !(length > 0.0 && width > 0.0 && height > 0.0) {
            return Err(GeomError::NonPositiveDims(length, width, height));
        }
        if !center.is_finite() || !yaw.is_finite() {
            return Err(GeomError::NonFinite("Box3"));
        }
        Ok(Self { center, length, width, height, yaw: normalize_yaw(yaw) })
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    /// Grow every dimension by `margin` on each side.
    pub fn inflate(&self, margin: f64) -> Box3 {
        Box3 {
            center: self.center,
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
            height: self.height + 2.0 * margin,
            yaw: self.yaw,
        }
    }

    /// True if `p` lies inside the box (boundary inclusive).
    pub fn contains(&self, p: &Point3) -> bool {
        let d = p.sub(&self.center);
        let (lx, ly) = rotate_z(-self.yaw, d.x, d.y);
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0 && d.z.abs() <= self.height / 2.0
    }

    /// BEV footprint corners, counterclockwise when seen from above.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (o, l) in out.iter_mut().zip(local.iter()) {
            let (x, y) = rotate_z(self.yaw, l[0], l[1]);
            *o = [x + self.center.x, y + self.center.y];
        }
        out
    }

    pub fn z_min(&self) -> f64 {
        self.center.z - self.height / 2.0
    }

    pub fn z_max(&self) -> f64 {
        self.center.z + self.height / 2.0
    }
}

/// Axis-aligned 2D box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2 {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeomError> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeomError::EmptyBox2(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Intersect with the image rectangle [0,w]x[0,h].
    pub fn clamp_to_image(&self, width: u32, height: u32) -> Result<Box2, GeomError> {
        let x_min = self.x_min.max(0.0);
        let y_min = self.y_min.max(0.0);
        let x_max = self.x_max.min(width as f64);
        let y_max = self.y_max.min(height as f64);
        if x_min >= x_max || y_min >= y_max {
            return Err(GeomError::OutsideImage);
        }
        Ok(Box2 { x_min, y_min, x_max, y_max })
    }
}

/// Camera projection and LiDAR->camera extrinsics for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// 3x4 pixel projection (intrinsics x rectification).
    pub cam_projection: Matrix3x4<f64>,
    /// Homogeneous LiDAR -> camera transform.
    pub velo_to_cam: Matrix4<f64>,
    /// Cached inverse of `velo_to_cam`.
    cam_to_velo: Matrix4<f64>,
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
}

impl Calibration {
    pub fn new(
        cam_projection: Matrix3x4<f64>,
        velo_to_cam: Matrix4<f64>,
        image_size: (u32, u32),
    ) -> Result<Self, GeomError> {
        if cam_projection.iter().any(|v| !v.is_finite()) || velo_to_cam.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("Calibration"));
        }
        let r: Matrix3<f64> = velo_to_cam.fixed_view::<3, 3>(0, 0).into();
        let rrt = r * r.transpose();
        let dev = (rrt - Matrix3::identity()).abs().max();
        if dev > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeomError::NotARotation);
        }
        let cam_to_velo = velo_to_cam.try_inverse().ok_or(GeomError::NotInvertible)?;
        Ok(Self { cam_projection, velo_to_cam, cam_to_velo, image_size })
    }

    /// Pinhole calibration with identity extrinsics, handy for tests.
    pub fn simple_pinhole(fx: f64, fy: f64, cx: f64, cy: f64, image_size: (u32, u32)) -> Self {
        let mut p = Matrix3x4::zeros();
        p[(0, 0)] = fx;
        p[(1, 1)] = fy;
        p[(0, 2)] = cx;
        p[(1, 2)] = cy;
        p[(2, 2)] = 1.0;
        Self::new(p, Matrix4::identity(), image_size).expect("identity extrinsics are valid")
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.velo_to_cam.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn cam_to_lidar(&self, p: &Point3) -> Point3 {
        let v = self.cam_to_velo * Vector4::new(p.x, p.y, p.z, 1.0);
        Point3::new(v[0] / v[3], v[1] / v[3], v[2] / v[3])
    }

    /// Rotate a camera-frame direction back into the LiDAR frame.
    pub fn cam_dir_to_lidar(&self, d: &Point3) -> Point3 {
        let r = self.rotation().transpose();
        let v = r * nalgebra::Vector3::new(d.x, d.y, d.z);
        Point3::new(v[0], v[1], v[2])
    }

    pub fn lidar_dir_to_cam(&self, d: &Point3) -> Point3 {
        let v = self.rotation() * nalgebra::Vector3::new(d.x, d.y, d.z);
        Point3::new(v[0], v[1], v[2])
    }
}

/// One annotated object: its 3D box in the LiDAR frame, its 2D image box, a
/// category label, and the evaluation-exclusion flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub box3: Box3,
    pub box2: Box2,
    pub category: String,
    pub dont_care: bool,
}

impl GroundTruth {
    /// Build a ground-truth record, clamping the 2D box to the image bounds.
    pub fn new(
        box3: Box3,
        box2: Box2,
        category: impl Into<String>,
        dont_care: bool,
        image_size: (u32, u32),
    ) -> Result<Self, GeomError> {
        let box2 = box2.clamp_to_image(image_size.0, image_size.1)?;
        Ok(Self { box3, box2, category: category.into(), dont_care })
    }
}

/// Transform a LiDAR-frame point into the camera frame.
pub fn lidar_to_cam(p: &Point3, calib: &Calibration) -> Point3 {
    let v = calib.velo_to_cam * Vector4::new(p.x, p.y, p.z, 1.0);
    Point3::new(v[0] / v[3], v[1] / v[3], v[2] / v[3])
}

/// Project a camera-frame point to pixel coordinates.
///
/// Returns (u, v, depth) where depth is the camera-frame z of the input.
pub fn project_to_image(p: &Point3, calib: &Calibration) -> Result<(f64, f64, f64), GeomError> {
    if p.z <= 0.0 {
        return Err(GeomError::BehindCamera(p.z));
    }
    let v = calib.cam_projection * Vector4::new(p.x, p.y, p.z, 1.0);
    Ok((v[0] / v[2], v[1] / v[2], p.z))
}

/// Intersection over union of two axis-aligned pixel boxes.
pub fn iou_2d(a: &Box2, b: &Box2) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Shoelace area of a simple polygon (positive for CCW).
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc / 2.0
}

/// Sutherland-Hodgman clip of `subject` against a convex CCW `clip` polygon.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let c1 = clip[i];
        let c2 = clip[(i + 1) % clip.len()];
        let ex = c2[0] - c1[0];
        let ey = c2[1] - c1[1];
        let inside = |p: &[f64; 2]| ex * (p[1] - c1[1]) - ey * (p[0] - c1[0]) >= 0.0;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(&cur);
            let prev_in = inside(&prev);
            if cur_in != prev_in {
                // Edge crosses the clip line; emit the intersection point.
                let dx = cur[0] - prev[0];
                let dy = cur[1] - prev[1];
                let denom = ex * dy - ey * dx;
                if denom.abs() > 0.0 {
                    let t = (ex * (c1[1] - prev[1]) - ey * (c1[0] - prev[0])) / denom;
                    output.push([prev[0] + t * dx, prev[1] + t * dy]);
                }
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

// Total order over box fields so iou_3d can canonicalize its arguments and
// stay exactly symmetric in floating point.
fn box3_key(b: &Box3) -> [f64; 7] {
    [b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw]
}

/// Intersection over union of two yaw-oriented 3D boxes.
///
/// BEV polygon intersection (convex clipping) times vertical overlap, over
/// the volume union. Degenerate overlaps below 1e-12 m^2 count as zero.
pub fn iou_3d(a: &Box3, b: &Box3) -> f64 {
    let (p, q) = if box3_key(a) <= box3_key(b) { (a, b) } else { (b, a) };
    let dz = p.z_max().min(q.z_max()) - p.z_min().max(q.z_min());
    if dz <= 0.0 {
        return 0.0;
    }
    let bev_p = p.bev_corners();
    let bev_q = q.bev_corners();
    let inter_poly = clip_polygon(&bev_p, &bev_q);
    let inter_area = polygon_area(&inter_poly);
    if inter_area < 1e-12 {
        return 0.0;
    }
    let inter_vol = inter_area * dz;
    // Volumes via the same polygon-area and z-extent paths so iou(a, a) is
    // exactly 1.
    let vol_p = polygon_area(&bev_p) * (p.z_max() - p.z_min());
    let vol_q = polygon_area(&bev_q) * (q.z_max() - q.z_min());
    let denom = vol_p + vol_q - inter_vol;
    (inter_vol / denom).clamp(0.0, 1.0)
}

/// The eight corners of a yaw-rotated box: bottom face then top face, each
/// counterclockwise from above, starting at (+length/2, +width/2).
pub fn box3_corners(b: &Box3) -> [Point3; 8] {
    let bev = b.bev_corners();
    let mut out = [Point3::new(0.0, 0.0, 0.0); 8];
    for (i, c) in bev.iter().enumerate() {
        out[i] = Point3::new(c[0], c[1], b.z_min());
        out[i + 4] = Point3::new(c[0], c[1], b.z_max());
    }
    out
}

/// Rebuild a box from corners laid out as `box3_corners` produces them.
pub fn box3_from_corners(corners: &[Point3; 8]) -> Box3 {
    let center = corners
        .iter()
        .fold(Point3::new(0.0, 0.0, 0.0), |acc, p| acc.add(p))
        .scale(1.0 / 8.0);
    // Corner 0 -> 1 runs along -length, corner 1 -> 2 along -width.
    let du = corners[0].sub(&corners[1]);
    let dv = corners[1].sub(&corners[2]);
    let length = du.norm();
    let width = dv.norm();
    let height = corners[4].z - corners[0].z;
    let yaw = du.y.atan2(du.x);
    Box3 { center, length, width, height, yaw: normalize_yaw(yaw) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_box(rng: &mut ChaCha8Rng) -> Box3 {
        Box3 {
            center: Point3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-2.0..2.0),
            ),
            length: rng.random_range(0.5..6.0),
            width: rng.random_range(0.5..4.0),
            height: rng.random_range(0.5..3.0),
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        }
    }

    /// Monte-Carlo membership estimate of 3D IOU, independent of the
    /// clipping implementation.
    pub(crate) fn mc_iou_3d(a: &Box3, b: &Box3, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
        let ca = box3_corners(a);
        let cb = box3_corners(b);
        let all = ca.iter().chain(cb.iter());
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in all {
            for (k, v) in [p.x, p.y, p.z].iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        let mut n_a = 0u64;
        let mut n_b = 0u64;
        let mut n_ab = 0u64;
        for _ in 0..samples {
            let p = Point3::new(
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
                rng.random_range(lo[2]..hi[2]),
            );
            let ia = a.contains(&p);
            let ib = b.contains(&p);
            n_a += ia as u64;
            n_b += ib as u64;
            n_ab += (ia && ib) as u64;
        }
        let union = n_a + n_b - n_ab;
        if union == 0 { 0.0 } else { n_ab as f64 / union as f64 }
    }

    #[test]
    fn lidar_to_cam_identity() {
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360));
        let p = Point3::new(1.0, 2.0, 3.0);
        let q = lidar_to_cam(&p, &calib);
        assert_eq!(q, p);
    }

    #[test]
    fn lidar_to_cam_translation_cancels() {
        let mut m = Matrix4::identity();
        m[(2, 3)] = -1.73;
        let calib = Calibration::new(
            Calibration::simple_pinhole(1.0, 1.0, 0.0, 0.0, (10, 10)).cam_projection,
            m,
            (10, 10),
        )
        .unwrap();
        let q = lidar_to_cam(&Point3::new(0.0, 0.0, 1.73), &calib);
        assert_relative_eq!(q.x, 0.0);
        assert_relative_eq!(q.y, 0.0);
        assert_relative_eq!(q.z, 0.0);
    }

    #[test]
    fn lidar_to_cam_matches_matrix_oracle() {
        // 90 degree rotation about z plus a translation.
        let mut m = Matrix4::identity();
        m[(0, 0)] = 0.0;
        m[(0, 1)] = -1.0;
        m[(1, 0)] = 1.0;
        m[(1, 1)] = 0.0;
        m[(0, 3)] = 0.5;
        m[(1, 3)] = -0.25;
        m[(2, 3)] = 1.0;
        let calib = Calibration::new(
            Calibration::simple_pinhole(1.0, 1.0, 0.0, 0.0, (10, 10)).cam_projection,
            m,
            (10, 10),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = Point3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            // Hand-rolled homogeneous multiply as the oracle.
            let hom = [p.x, p.y, p.z, 1.0];
            let mut expect = [0.0f64; 4];
            for r in 0..4 {
                for c in 0..4 {
                    expect[r] += m[(r, c)] * hom[c];
                }
            }
            let got = lidar_to_cam(&p, &calib);
            assert_relative_eq!(got.x, expect[0] / expect[3], epsilon = 1e-12);
            assert_relative_eq!(got.y, expect[1] / expect[3], epsilon = 1e-12);
            assert_relative_eq!(got.z, expect[2] / expect[3], epsilon = 1e-12);
        }
    }

    #[test]
    fn lidar_cam_round_trip() {
        let mut m = Matrix4::identity();
        // KITTI-style axis permutation: x_cam = -y, y_cam = -z, z_cam = x.
        m[(0, 0)] = 0.0;
        m[(0, 1)] = -1.0;
        m[(1, 1)] = 0.0;
        m[(1, 2)] = -1.0;
        m[(2, 2)] = 0.0;
        m[(2, 0)] = 1.0;
        m[(0, 3)] = 0.02;
        m[(1, 3)] = -0.08;
        m[(2, 3)] = -0.27;
        let calib = Calibration::new(
            Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360)).cam_projection,
            m,
            (1200, 360),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = Point3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-5.0..5.0),
            );
            let back = calib.cam_to_lidar(&lidar_to_cam(&p, &calib));
            assert!(back.sub(&p).norm() < 1e-9);
        }
    }

    #[test]
    fn projection_hits_principal_point() {
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360));
        let (u, v, d) = project_to_image(&Point3::new(0.0, 0.0, 10.0), &calib).unwrap();
        assert_relative_eq!(u, 600.0);
        assert_relative_eq!(v, 180.0);
        assert_relative_eq!(d, 10.0);
    }

    #[test]
    fn projection_offsets_by_focal_ratio() {
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360));
        let (u, v, d) = project_to_image(&Point3::new(1.0, 0.0, 10.0), &calib).unwrap();
        assert_relative_eq!(u, 670.0);
        assert_relative_eq!(v, 180.0);
        assert_relative_eq!(d, 10.0);
    }

    #[test]
    fn projection_rejects_behind_camera() {
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360));
        assert!(matches!(
            project_to_image(&Point3::new(0.0, 0.0, -1.0), &calib),
            Err(GeomError::BehindCamera(_))
        ));
    }

    #[test]
    fn projection_matches_full_matrix_oracle() {
        // Full 3x4 with a nonzero skew term and fourth column.
        let p = Matrix3x4::from_row_slice(&[
            720.0, 1.5, 610.0, 45.0, //
            0.0, 707.0, 172.0, 0.2, //
            0.0, 0.0, 1.0, 0.003,
        ]);
        let calib = Calibration::new(p, Matrix4::identity(), (1242, 375)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pt = Point3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.5..60.0),
            );
            let (u, v, _) = project_to_image(&pt, &calib).unwrap();
            let hom = [pt.x, pt.y, pt.z, 1.0];
            let mut e = [0.0f64; 3];
            for r in 0..3 {
                for c in 0..4 {
                    e[r] += p[(r, c)] * hom[c];
                }
            }
            assert_relative_eq!(u, e[0] / e[2], epsilon = 1e-9);
            assert_relative_eq!(v, e[1] / e[2], epsilon = 1e-9);
        }
    }

    #[test]
    fn iou_2d_cases() {
        let a = Box2::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou_2d(&a, &a), 1.0);
        let b = Box2::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert_eq!(iou_2d(&a, &b), 1.0 / 3.0);
        let c = Box2::new(2.0, 2.0, 3.0, 3.0).unwrap();
        let d = Box2::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(iou_2d(&d, &c), 0.0);
    }

    #[test]
    fn iou_3d_identity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let b = random_box(&mut rng);
            assert_eq!(iou_3d(&b, &b), 1.0);
        }
    }

    #[test]
    fn iou_3d_axis_aligned_hand_case() {
        let a = Box3::new(Point3::new(0.0, 0.0, 0.0), 4.0, 2.0, 2.0, 0.0).unwrap();
        let b = Box3::new(Point3::new(2.0, 0.0, 0.0), 4.0, 2.0, 2.0, 0.0).unwrap();
        assert_relative_eq!(iou_3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_3d_rotated_matches_monte_carlo() {
        let a = Box3::new(Point3::new(0.0, 0.0, 0.0), 4.0, 2.0, 2.0, 0.0).unwrap();
        let b = Box3::new(Point3::new(2.0, 0.0, 0.0), 4.0, 2.0, 2.0, std::f64::consts::FRAC_PI_4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mc = mc_iou_3d(&a, &b, 1_000_000, &mut rng);
        assert!((iou_3d(&a, &b) - mc).abs() < 1e-2, "iou={} mc={}", iou_3d(&a, &b), mc);
    }

    #[test]
    fn iou_3d_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let ab = iou_3d(&a, &b);
            let ba = iou_3d(&b, &a);
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn iou_3d_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            let a = random_box(&mut rng);
            let mut b = random_box(&mut rng);
            // Pull b near a so a fair share of pairs overlap.
            b.center = a.center.add(&Point3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
            ));
            let t = Point3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-10.0..10.0),
            );
            let mut a2 = a;
            let mut b2 = b;
            a2.center = a.center.add(&t);
            b2.center = b.center.add(&t);
            assert!((iou_3d(&a, &b) - iou_3d(&a2, &b2)).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_3d_touching_boxes_is_zero() {
        let a = Box3::new(Point3::new(0.0, 0.0, 0.0), 2.0, 2.0, 2.0, 0.0).unwrap();
        let b = Box3::new(Point3::new(2.0, 0.0, 0.0), 2.0, 2.0, 2.0, 0.0).unwrap();
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn corners_of_unit_cube() {
        let b = Box3::new(Point3::new(0.0, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0).unwrap();
        let cs = box3_corners(&b);
        for c in &cs {
            assert_relative_eq!(c.x.abs(), 0.5);
            assert_relative_eq!(c.y.abs(), 0.5);
            assert_relative_eq!(c.z.abs(), 0.5);
        }
    }

    #[test]
    fn corners_quarter_turn_swaps_axes() {
        let b = Box3::new(Point3::new(0.0, 0.0, 0.0), 4.0, 2.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap();
        let cs = box3_corners(&b);
        // After a quarter turn the length axis lies along y.
        let max_x = cs.iter().map(|c| c.x.abs()).fold(0.0, f64::max);
        let max_y = cs.iter().map(|c| c.y.abs()).fold(0.0, f64::max);
        assert_relative_eq!(max_x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(max_y, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn corners_centroid_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let b = random_box(&mut rng);
            let cs = box3_corners(&b);
            let centroid = cs
                .iter()
                .fold(Point3::new(0.0, 0.0, 0.0), |acc, p| acc.add(p))
                .scale(1.0 / 8.0);
            assert!(centroid.sub(&b.center).norm() < 1e-9);
            let back = box3_from_corners(&cs);
            assert!(back.center.sub(&b.center).norm() < 1e-9);
            assert!((back.length - b.length).abs() < 1e-9);
            assert!((back.width - b.width).abs() < 1e-9);
            assert!((back.height - b.height).abs() < 1e-9);
            // Yaw may come back flipped by pi for symmetric footprints; the
            // corner layout fixes it uniquely though.
            assert!((normalize_yaw(back.yaw - b.yaw)).abs() < 1e-9);
        }
    }

    #[test]
    fn projected_diagonal_monotone_in_depth() {
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360));
        let mut prev = f64::INFINITY;
        for depth in [10.0, 20.0, 40.0] {
            let b = Box3::new(Point3::new(0.0, 0.0, depth), 2.0, 2.0, 1.5, 0.3).unwrap();
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for c in box3_corners(&b) {
                let (u, v, _) = project_to_image(&c, &calib).unwrap();
                lo[0] = lo[0].min(u);
                lo[1] = lo[1].min(v);
                hi[0] = hi[0].max(u);
                hi[1] = hi[1].max(v);
            }
            let diag = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
            assert!(diag < prev);
            prev = diag;
        }
    }

    #[test]
    fn yaw_normalization() {
        assert_relative_eq!(normalize_yaw(std::f64::consts::PI), -std::f64::consts::PI);
        assert_relative_eq!(normalize_yaw(3.0 * std::f64::consts::PI), -std::f64::consts::PI);
        assert_relative_eq!(normalize_yaw(-std::f64::consts::PI), -std::f64::consts::PI);
        assert_relative_eq!(normalize_yaw(0.5), 0.5);
        assert!(normalize_yaw(7.0) < std::f64::consts::PI);
    }

    #[test]
    fn calibration_rejects_non_rotation() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        let p = Calibration::simple_pinhole(1.0, 1.0, 0.0, 0.0, (4, 4)).cam_projection;
        assert!(matches!(Calibration::new(p, m, (4, 4)), Err(GeomError::NotARotation)));
    }
}
