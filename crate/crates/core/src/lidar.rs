//! Virtual LiDAR: generate the beam pattern from a sensor description,
//! ray-cast inserted meshes to synthesize object points, carve background
//! points occluded by the insertion, and apply dropout plus range noise.

use crate::geom::{Point3, PointCloud, Pose3};
use crate::mesh::ObjectInstance;
use crate::rng::indexed_stream;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Sensor description. Angles are degrees in configs, radians in [`RaySet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub num_beams: u32,
    /// Vertical field of view (min, max) in degrees; beams are evenly
    /// spaced across it, both endpoints included.
    pub vertical_fov: (f64, f64),
    /// Azimuth step in degrees.
    pub azimuth_step: f64,
    /// Horizontal field of view [min, max) in degrees.
    pub horizontal_fov: (f64, f64),
    pub max_range: f64,
    /// Probability that a synthesized return is dropped.
    pub dropout_prob: f64,
    /// Gaussian sigma applied to the range of synthesized returns, meters.
    pub range_noise_sigma: f64,
    /// Sensor mount pose in the LiDAR frame.
    pub mount: Pose3,
}

impl Default for LidarConfig {
    fn default() -> Self {
        // HDL-64E-like, with a desk-scale azimuth step.
        LidarConfig {
            num_beams: 64,
            vertical_fov: (-24.8, 2.0),
            azimuth_step: 0.2,
            horizontal_fov: (-180.0, 180.0),
            max_range: 120.0,
            dropout_prob: 0.05,
            range_noise_sigma: 0.02,
            mount: Pose3::identity(),
        }
    }
}

impl LidarConfig {
    /// Disable dropout and range noise (exact geometry).
    pub fn noiseless(mut self) -> Self {
        self.dropout_prob = 0.0;
        self.range_noise_sigma = 0.0;
        self
    }

    pub fn azimuth_count(&self) -> usize {
        let width = self.horizontal_fov.1 - self.horizontal_fov.0;
        let n = width / self.azimuth_step;
        // Guard against 360/0.2-style float drift on exact divisions.
        let n = if (n - n.round()).abs() < 1e-9 { n.round() } else { n.ceil() };
        (n as usize).max(1)
    }
}

/// One simulated beam direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub beam: u32,
    /// Radians.
    pub azimuth: f64,
    /// Radians.
    pub elevation: f64,
    /// Unit direction in the LiDAR frame (mount applied).
    pub dir: Point3,
}

/// The full beam pattern of one sweep.
#[derive(Debug, Clone)]
pub struct RaySet {
    pub rays: Vec<Ray>,
    pub origin: Point3,
}

/// Build the beam pattern: elevations evenly spaced across the vertical FOV,
/// azimuths stepped across the horizontal FOV, direction
/// (cos e cos a, cos e sin a, sin e) rotated by the mount yaw.
pub fn generate_rays(cfg: &LidarConfig) -> RaySet {
    let n_az = cfg.azimuth_count();
    let n_beams = cfg.num_beams.max(1);
    let (v_min, v_max) = (cfg.vertical_fov.0.to_radians(), cfg.vertical_fov.1.to_radians());
    let elev_step = if n_beams > 1 { (v_max - v_min) / (n_beams - 1) as f64 } else { 0.0 };
    let mut rays = Vec::with_capacity(n_beams as usize * n_az);
    for beam in 0..n_beams {
        let elevation = v_min + beam as f64 * elev_step;
        let (se, ce) = elevation.sin_cos();
        for k in 0..n_az {
            let azimuth = (cfg.horizontal_fov.0 + k as f64 * cfg.azimuth_step).to_radians();
            let (sa, ca) = azimuth.sin_cos();
            let local = Point3::new(ce * ca, ce * sa, se);
            rays.push(Ray { beam, azimuth, elevation, dir: cfg.mount.rotate_dir(&local) });
        }
    }
    RaySet { rays, origin: cfg.mount.position() }
}

/// One synthesized return, tagged with the instance that produced it.
#[derive(Debug, Clone, Copy)]
pub struct SimPoint {
    pub instance: usize,
    pub point: Point3,
    pub intensity: f32,
    pub triangle: usize,
}

fn albedo_intensity(inst: &ObjectInstance, triangle: usize) -> f32 {
    let a = inst.object.mesh.albedo[triangle];
    (a[0] + a[1] + a[2]) / 3.0
}

/// Cast every ray against all instances and keep the nearest hit within
/// `max_range`, then apply dropout and Gaussian range noise.
///
/// With `dropout_prob == 0` and `range_noise_sigma == 0` the result is a
/// pure function of the geometry. Otherwise each ray draws from its own
/// index-derived substream, so results do not depend on evaluation order.
pub fn simulate_object_points(
    rays: &RaySet,
    instances: &[ObjectInstance],
    cfg: &LidarConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<SimPoint> {
    let noisy = cfg.dropout_prob > 0.0 || cfg.range_noise_sigma > 0.0;
    let noise_base = if noisy { rng.next_u64() } else { 0 };
    let normal = (cfg.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.range_noise_sigma).expect("sigma >= 0"));
    let mut out = Vec::new();
    for (ray_idx, ray) in rays.rays.iter().enumerate() {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, inst) in instances.iter().enumerate() {
            if let Some(hit) = inst.raycast(&rays.origin, &ray.dir) {
                if hit.t <= cfg.max_range && best.is_none_or(|(t, _, _)| hit.t < t) {
                    best = Some((hit.t, i, hit.triangle));
                }
            }
        }
        let Some((mut t, instance, triangle)) = best else { continue };
        if noisy {
            let mut ray_rng = indexed_stream(noise_base, ray_idx as u64);
            if cfg.dropout_prob > 0.0 && ray_rng.random::<f64>() < cfg.dropout_prob {
                continue;
            }
            if let Some(n) = &normal {
                t += n.sample(&mut ray_rng);
            }
        }
        out.push(SimPoint {
            instance,
            point: rays.origin.add(&ray.dir.scale(t)),
            intensity: albedo_intensity(&instances[instance], triangle),
            triangle,
        });
    }
    out
}

/// Keep/remove decision per background point: a point goes away iff the ray
/// from the sensor through it first hits an inserted instance closer than
/// the point itself (by more than `eps = 3 * range_noise_sigma`).
pub fn carve_mask(cloud: &PointCloud, instances: &[ObjectInstance], cfg: &LidarConfig) -> Vec<bool> {
    let eps = 3.0 * cfg.range_noise_sigma;
    let origin = cfg.mount.position();
    cloud
        .points
        .iter()
        .map(|p| {
            let d = p.sub(&origin);
            let range = d.norm();
            if range <= 0.0 {
                return true;
            }
            let dir = d.scale(1.0 / range);
            let blocked = instances.iter().any(|inst| {
                inst.raycast(&origin, &dir).is_some_and(|hit| hit.t < range - eps)
            });
            !blocked
        })
        .collect()
}

/// Remove background points occluded by the inserted instances, preserving
/// the order of the survivors.
pub fn carve_occluded_background(
    cloud: &PointCloud,
    instances: &[ObjectInstance],
    cfg: &LidarConfig,
) -> PointCloud {
    let mask = carve_mask(cloud, instances, cfg);
    let mut out = PointCloud::default();
    for (i, keep) in mask.iter().enumerate() {
        if *keep {
            out.push(cloud.points[i], cloud.intensity[i]);
        }
    }
    out
}

/// Concatenate the carved background with the synthesized object points.
pub fn merge_clouds(background: &PointCloud, object_points: &[SimPoint]) -> PointCloud {
    let mut out = background.clone();
    for sp in object_points {
        out.push(sp.point, sp.intensity);
    }
    out
}
