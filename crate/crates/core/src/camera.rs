//! Virtual camera: rasterize inserted meshes with a depth buffer, composite
//! against the background image using LiDAR-derived background depth,
//! compute 2D ground truth, occlusion ratios, and tone matching.

use crate::geom::{lidar_to_cam, project_to_image, Box2, Calibration, Point3};
use crate::kitti::{Frame, Raster};
use crate::mesh::ObjectInstance;
use serde::{Deserialize, Serialize};

/// Rendering knobs. Defaults match the campaign defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    /// Dilation radius (pixels) for splatted background depth.
    pub r_px: u32,
    /// Depth slack (meters) an object must clear to win a pixel.
    pub eps_z: f64,
    /// Near-plane distance; triangles are clipped against it.
    pub near: f64,
    /// Directional light azimuth in degrees (LiDAR frame).
    pub light_azimuth_deg: f64,
    /// Directional light elevation in degrees.
    pub light_elevation_deg: f64,
    /// Ambient term in [0, 1].
    pub ambient: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            r_px: 5,
            eps_z: 0.2,
            near: 0.1,
            light_azimuth_deg: 135.0,
            light_elevation_deg: 45.0,
            ambient: 0.4,
        }
    }
}

/// Per-pixel depth in meters; `f32::INFINITY` marks unknown.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    depth: Vec<f32>,
}

impl DepthImage {
    pub fn unknown(width: u32, height: u32) -> Self {
        DepthImage { width, height, depth: vec![f32::INFINITY; width as usize * height as usize] }
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let d = self.depth[self.idx(x, y)];
        d.is_finite().then_some(d as f64)
    }

    pub fn min_in(&mut self, x: u32, y: u32, d: f32) {
        let i = self.idx(x, y);
        if d < self.depth[i] {
            self.depth[i] = d;
        }
    }

    pub fn known_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// World-space footprint assumed for one LiDAR return when splatted into
/// the depth image, meters.
const SPLAT_FOOTPRINT_M: f64 = 0.35;

/// Splat every LiDAR point with positive camera depth into the image,
/// keeping the per-pixel minimum, then dilate each known depth to its
/// neighbors. The dilation radius follows the point's angular footprint
/// (focal * footprint / depth), capped at `r_px`: a blind fixed-radius min
/// would bleed near-ground depth upward and occlude the lower body of
/// objects standing on the road.
pub fn background_depth(frame: &Frame, cfg: &CameraConfig) -> DepthImage {
    let (w, h) = frame.calib.image_size;
    let mut sparse = DepthImage::unknown(w, h);
    for p in &frame.cloud.points {
        let cam = lidar_to_cam(p, &frame.calib);
        if cam.z <= 0.0 {
            continue;
        }
        let Ok((u, v, depth)) = project_to_image(&cam, &frame.calib) else { continue };
        if u < 0.0 || v < 0.0 {
            continue;
        }
        let (px, py) = (u.floor() as i64, v.floor() as i64);
        if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
            sparse.min_in(px as u32, py as u32, depth as f32);
        }
    }
    if cfg.r_px == 0 {
        return sparse;
    }
    // Ground-like returns (low world z) see the camera at a grazing angle:
    // their footprint spans a fraction of a row upward, so letting them
    // claim pixels above would falsely occlude objects standing on them.
    let ground_z = {
        let mut zs: Vec<f64> = frame.cloud.points.iter().map(|p| p.z).collect();
        if zs.is_empty() {
            0.0
        } else {
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            zs[zs.len() / 10]
        }
    };
    let mut ground_like = DepthImage::unknown(w, h);
    for p in &frame.cloud.points {
        if p.z >= ground_z + 0.4 {
            continue;
        }
        let cam = lidar_to_cam(p, &frame.calib);
        if cam.z <= 0.0 {
            continue;
        }
        let Ok((u, v, depth)) = project_to_image(&cam, &frame.calib) else { continue };
        let (px, py) = (u.floor() as i64, v.floor() as i64);
        if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
            ground_like.min_in(px as u32, py as u32, depth as f32);
        }
    }
    let focal = frame.calib.cam_projection[(0, 0)].abs().max(1.0);
    let mut out = DepthImage::unknown(w, h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let d = sparse.depth[sparse.idx(x as u32, y as u32)];
            if !d.is_finite() {
                continue;
            }
            let r = ((focal * SPLAT_FOOTPRINT_M / d as f64).round() as i64)
                .clamp(1, cfg.r_px as i64);
            let up = if ground_like.get(x as u32, y as u32) == Some(d as f64) { -1 } else { -r };
            for dy in up..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && (nx as u32) < w && (ny as u32) < h {
                        out.min_in(nx as u32, ny as u32, d);
                    }
                }
            }
        }
    }
    out
}

/// Depth, shaded color and owning instance for pixels covered by inserted
/// geometry.
#[derive(Debug, Clone)]
pub struct InstanceRaster {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub color: Vec<[f32; 3]>,
    /// Owning instance per pixel; -1 where nothing was drawn.
    pub owner: Vec<i32>,
    /// Number of instances that were rasterized (fully occluded ones
    /// included), so downstream vectors keep a slot per instance.
    pub n_instances: usize,
}

impl InstanceRaster {
    fn new(width: u32, height: u32, n_instances: usize) -> Self {
        let n = width as usize * height as usize;
        InstanceRaster {
            width,
            height,
            depth: vec![f32::INFINITY; n],
            color: vec![[0.0; 3]; n],
            owner: vec![-1; n],
            n_instances,
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }
}

/// Clip a camera-space triangle against the z = near plane. Returns 0, 1 or
/// 2 triangles.
fn clip_near(tri: [Point3; 3], near: f64) -> Vec<[Point3; 3]> {
    let inside: Vec<bool> = tri.iter().map(|v| v.z >= near).collect();
    let n_in = inside.iter().filter(|&&b| b).count();
    if n_in == 0 {
        return Vec::new();
    }
    if n_in == 3 {
        return vec![tri];
    }
    // Walk the polygon edges, emitting kept vertices and crossings.
    let mut poly: Vec<Point3> = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let (ain, bin) = (inside[i], inside[(i + 1) % 3]);
        if ain {
            poly.push(a);
        }
        if ain != bin {
            let t = (near - a.z) / (b.z - a.z);
            poly.push(a.add(&b.sub(&a).scale(t)));
        }
    }
    match poly.len() {
        3 => vec![[poly[0], poly[1], poly[2]]],
        4 => vec![[poly[0], poly[1], poly[2]], [poly[0], poly[2], poly[3]]],
        _ => Vec::new(),
    }
}

fn light_dir(cfg: &CameraConfig) -> Point3 {
    let az = cfg.light_azimuth_deg.to_radians();
    let el = cfg.light_elevation_deg.to_radians();
    Point3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Rasterize all instances with a shared z-buffer. Perspective-correct
/// depth (1/z interpolated in screen space), flat Lambertian shading with a
/// fixed sun plus ambient. Equal depths resolve to the smaller instance
/// index because instances are drawn in order under a strict depth test.
pub fn rasterize_instances(
    instances: &[ObjectInstance],
    calib: &Calibration,
    cfg: &CameraConfig,
) -> InstanceRaster {
    let (w, h) = calib.image_size;
    let mut raster = InstanceRaster::new(w, h, instances.len());
    let sun = light_dir(cfg);
    for (inst_idx, inst) in instances.iter().enumerate() {
        let mesh = &inst.object.mesh;
        for t in 0..mesh.triangles.len() {
            let (a, b, c) = mesh.triangle(t);
            let world = [inst.pose.transform(&a), inst.pose.transform(&b), inst.pose.transform(&c)];
            // Flat shading from the world-frame normal; meshes are soups, so
            // treat faces as double-sided.
            let n = world[1].sub(&world[0]).cross(&world[2].sub(&world[0]));
            let n_len = n.norm();
            if n_len <= 0.0 {
                continue;
            }
            let shade =
                cfg.ambient + (1.0 - cfg.ambient) * (n.dot(&sun).abs() / n_len).clamp(0.0, 1.0);
            let albedo = mesh.albedo[t];
            let color = [
                (albedo[0] as f64 * shade) as f32,
                (albedo[1] as f64 * shade) as f32,
                (albedo[2] as f64 * shade) as f32,
            ];
            let cam = world.map(|p| lidar_to_cam(&p, calib));
            for clipped in clip_near(cam, cfg.near) {
                draw_triangle(&mut raster, calib, &clipped, color, inst_idx as i32);
            }
        }
    }
    raster
}

fn draw_triangle(
    raster: &mut InstanceRaster,
    calib: &Calibration,
    tri: &[Point3; 3],
    color: [f32; 3],
    owner: i32,
) {
    let mut pts = [[0.0f64; 2]; 3];
    let mut inv_z = [0.0f64; 3];
    for (k, v) in tri.iter().enumerate() {
        let Ok((u, vpx, depth)) = project_to_image(v, calib) else { return };
        pts[k] = [u, vpx];
        inv_z[k] = 1.0 / depth;
    }
    // Orient counterclockwise in pixel space.
    let area = (pts[1][0] - pts[0][0]) * (pts[2][1] - pts[0][1])
        - (pts[2][0] - pts[0][0]) * (pts[1][1] - pts[0][1]);
    if area.abs() < 1e-12 {
        return;
    }
    let (i1, i2) = if area > 0.0 { (1, 2) } else { (2, 1) };
    let (p0, p1, p2) = (pts[0], pts[i1], pts[i2]);
    let (z0, z1, z2) = (inv_z[0], inv_z[i1], inv_z[i2]);
    let total = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);

    let min_x = p0[0].min(p1[0]).min(p2[0]).floor().max(0.0) as i64;
    let max_x = (p0[0].max(p1[0]).max(p2[0]).ceil() as i64).min(raster.width as i64 - 1);
    let min_y = p0[1].min(p1[1]).min(p2[1]).floor().max(0.0) as i64;
    let max_y = (p0[1].max(p1[1]).max(p2[1]).ceil() as i64).min(raster.height as i64 - 1);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let edge = |a: [f64; 2], b: [f64; 2], x: f64, y: f64| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    for py in min_y..=max_y {
        for px in min_x..=max_x {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let e0 = edge(p0, p1, x, y);
            let e1 = edge(p1, p2, x, y);
            let e2 = edge(p2, p0, x, y);
            if e0 < 0.0 || e1 < 0.0 || e2 < 0.0 {
                continue;
            }
            // Barycentric weights; 1/z is affine in screen space.
            let w0 = e1 / total;
            let w1 = e2 / total;
            let w2 = e0 / total;
            let iz = w0 * z0 + w1 * z1 + w2 * z2;
            if iz <= 0.0 {
                continue;
            }
            let depth = (1.0 / iz) as f32;
            let idx = raster.idx(px as u32, py as u32);
            if depth < raster.depth[idx] {
                raster.depth[idx] = depth;
                raster.color[idx] = color;
                raster.owner[idx] = owner;
            }
        }
    }
}

/// Final composited frame plus per-instance image-space ground truth.
#[derive(Debug, Clone)]
pub struct RenderResult {
    pub image: Raster,
    /// Winning instance per pixel after the background depth test.
    pub winner: Vec<i32>,
    /// Winning pixels per instance.
    pub masks: Vec<Vec<(u32, u32)>>,
    /// Tight bounds of each instance's winning pixels; None when fully
    /// occluded (zero winning pixels).
    pub box2: Vec<Option<Box2>>,
    /// Occlusion ratio per existing ground-truth object.
    pub occlusion_ratios: Vec<f64>,
    /// DontCare promotion flags (ratio > 0.9) per existing object.
    pub dont_care: Vec<bool>,
    /// Rasterized pixel count per instance before the background depth
    /// test; `masks[i].len() / drawn[i]` is the instance's visible fraction.
    pub drawn: Vec<usize>,
}

/// Depth-composite the rasterized instances over the frame image: an object
/// pixel wins iff the background depth there is unknown or farther by more
/// than `eps_z`. Winning pixels are tone-matched per instance and written
/// into the output image.
pub fn composite(frame: &Frame, raster: &InstanceRaster, bg_depth: &DepthImage, cfg: &CameraConfig) -> RenderResult {
    let (w, h) = (raster.width, raster.height);
    let n_instances = raster.n_instances;
    let mut winner = vec![-1i32; w as usize * h as usize];
    let mut masks: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_instances];
    let mut drawn = vec![0usize; n_instances];
    for y in 0..h {
        for x in 0..w {
            let idx = raster.idx(x, y);
            let own = raster.owner[idx];
            if own < 0 {
                continue;
            }
            drawn[own as usize] += 1;
            let obj_depth = raster.depth[idx] as f64;
            let wins = match bg_depth.get(x, y) {
                None => true,
                Some(bg) => obj_depth < bg - cfg.eps_z,
            };
            if wins {
                winner[idx] = own;
                masks[own as usize].push((x, y));
            }
        }
    }
    let box2: Vec<Option<Box2>> = masks
        .iter()
        .map(|mask| {
            if mask.is_empty() {
                return None;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
            for &(x, y) in mask {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            Some(Box2 {
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: (x1 + 1) as f64,
                y_max: (y1 + 1) as f64,
            })
        })
        .collect();

    let mut image = frame.image.clone();
    for (i, mask) in masks.iter().enumerate() {
        let Some(bbox) = &box2[i] else { continue };
        let colors: Vec<[f32; 3]> = mask.iter().map(|&(x, y)| raster.color[raster.idx(x, y)]).collect();
        let adjusted = tone_match(&colors, bbox, &frame.image, &|x, y| winner[raster.idx(x, y)] >= 0);
        for (&(x, y), rgb) in mask.iter().zip(adjusted.iter()) {
            image.set(x, y, *rgb);
        }
    }

    // Occlusion of existing objects by the insertion.
    let ratios = occlusion_ratios(&frame.labels.iter().map(|gt| gt.box2).collect::<Vec<_>>(), &winner, (w, h));
    let dont_care = ratios.iter().map(|&r| r > 0.9).collect();
    RenderResult { image, winner, masks, box2, occlusion_ratios: ratios, dont_care, drawn }
}

/// Fraction of each 2D box covered by winning inserted-object pixels.
pub fn occlusion_ratios(boxes: &[Box2], winner: &[i32], size: (u32, u32)) -> Vec<f64> {
    let (w, h) = size;
    boxes
        .iter()
        .map(|b| {
            let x0 = b.x_min.floor().max(0.0) as u32;
            let y0 = b.y_min.floor().max(0.0) as u32;
            let x1 = (b.x_max.ceil() as u32).min(w);
            let y1 = (b.y_max.ceil() as u32).min(h);
            if x0 >= x1 || y0 >= y1 {
                return 0.0;
            }
            let mut covered = 0usize;
            let mut total = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    total += 1;
                    covered += (winner[y as usize * w as usize + x as usize] >= 0) as usize;
                }
            }
            covered as f64 / total as f64
        })
        .collect()
}

/// Per-channel affine map bringing the object pixels' mean/std to those of
/// the background inside the object's doubled box, object pixels excluded.
/// Falls back to identity scaling (mean shift only) for flat object colors
/// and to identity entirely when the neighborhood is empty.
pub fn tone_match(
    colors: &[[f32; 3]],
    box2: &Box2,
    background: &Raster,
    is_object_pixel: &dyn Fn(u32, u32) -> bool,
) -> Vec<[u8; 3]> {
    // Neighborhood: the box dilated to twice its size, clipped to the image.
    let cx = (box2.x_min + box2.x_max) / 2.0;
    let cy = (box2.y_min + box2.y_max) / 2.0;
    let (bw, bh) = (box2.width(), box2.height());
    let x0 = (cx - bw).floor().max(0.0) as u32;
    let y0 = (cy - bh).floor().max(0.0) as u32;
    let x1 = ((cx + bw).ceil() as u32).min(background.width);
    let y1 = ((cy + bh).ceil() as u32).min(background.height);

    let mut bg_sum = [0.0f64; 3];
    let mut bg_sq = [0.0f64; 3];
    let mut bg_n = 0.0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            if is_object_pixel(x, y) {
                continue;
            }
            let px = background.get(x, y);
            for k in 0..3 {
                bg_sum[k] += px[k] as f64;
                bg_sq[k] += (px[k] as f64) * (px[k] as f64);
            }
            bg_n += 1.0;
        }
    }
    let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    if bg_n < 1.0 || colors.is_empty() {
        // Empty neighborhood: identity mapping of the shaded colors.
        return colors
            .iter()
            .map(|c| [to_u8(c[0] as f64 * 255.0), to_u8(c[1] as f64 * 255.0), to_u8(c[2] as f64 * 255.0)])
            .collect();
    }
    let n = colors.len() as f64;
    let mut obj_mean = [0.0f64; 3];
    let mut obj_sq = [0.0f64; 3];
    for c in colors {
        for k in 0..3 {
            let v = c[k] as f64 * 255.0;
            obj_mean[k] += v;
            obj_sq[k] += v * v;
        }
    }
    let mut scale = [1.0f64; 3];
    let mut offset = [0.0f64; 3];
    for k in 0..3 {
        obj_mean[k] /= n;
        let obj_std = (obj_sq[k] / n - obj_mean[k] * obj_mean[k]).max(0.0).sqrt();
        let bg_mean = bg_sum[k] / bg_n;
        let bg_std = (bg_sq[k] / bg_n - bg_mean * bg_mean).max(0.0).sqrt();
        scale[k] = if obj_std > 1e-6 { bg_std / obj_std } else { 1.0 };
        offset[k] = bg_mean - scale[k] * obj_mean[k];
    }
    colors
        .iter()
        .map(|c| {
            let mut out = [0u8; 3];
            for k in 0..3 {
                out[k] = to_u8(scale[k] * (c[k] as f64 * 255.0) + offset[k]);
            }
            out
        })
        .collect()
}

/// Full camera pipeline for one set of insertions: background depth from the
/// frame's cloud, rasterization, depth compositing, tone matching and
/// occlusion bookkeeping.
pub fn render_insertions(frame: &Frame, instances: &[ObjectInstance], cfg: &CameraConfig) -> RenderResult {
    let bg = background_depth(frame, cfg);
    let raster = rasterize_instances(instances, &frame.calib, cfg);
    composite(frame, &raster, &bg, cfg)
}
