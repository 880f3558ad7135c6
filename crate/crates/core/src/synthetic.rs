//! Procedural driving scenes with consistent image, point cloud,
//! calibration and labels. Used by `selfcheck`, the examples, and any test
//! that needs seeds without a real dataset on disk.
//!
//! A scene is road + shoulder walls + parked cars, all triangle meshes. The
//! point cloud is the virtual LiDAR's sweep over those meshes and the image
//! is the rasterizer's view of them, so both modalities agree by
//! construction.

use crate::camera::{rasterize_instances, CameraConfig};
use crate::geom::{
    box3_corners, lidar_to_cam, project_to_image, Box2, Box3, Calibration, GroundTruth, Point3,
    PointCloud, Pose3,
};
use crate::kitti::{Frame, Raster};
use crate::lidar::{generate_rays, simulate_object_points, LidarConfig};
use crate::mesh::{load_mesh, LoadOptions, LoadedObject, ObjectInstance, TriMesh};
use crate::rng::{fnv1a, substream};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

/// Pose-estimation settings matched to [`synthetic_lidar`]'s ring spacing:
/// coarser grid cells keep the road rings 4-connected out to ~50 m.
pub fn synthetic_pose_config() -> crate::pose::PoseConfig {
    crate::pose::PoseConfig {
        cell_size: 2.5,
        ground_band: 0.8,
        ..crate::pose::PoseConfig::default()
    }
}

/// KITTI-style calibration: camera looks along LiDAR +x, y maps to -z.
pub fn kitti_like_calibration(focal: f64, image_size: (u32, u32)) -> Calibration {
    let mut m = nalgebra::Matrix4::identity();
    m[(0, 0)] = 0.0;
    m[(0, 1)] = -1.0;
    m[(1, 1)] = 0.0;
    m[(1, 2)] = -1.0;
    m[(2, 2)] = 0.0;
    m[(2, 0)] = 1.0;
    m[(0, 3)] = 0.02;
    m[(1, 3)] = -0.08;
    m[(2, 3)] = -0.27;
    let p = Calibration::simple_pinhole(
        focal,
        focal,
        image_size.0 as f64 / 2.0,
        image_size.1 as f64 / 2.0,
        image_size,
    )
    .cam_projection;
    Calibration::new(p, m, image_size).expect("axis permutation is a rotation")
}

/// LiDAR pattern dense enough that road rings stay connected on the
/// segmentation grid out to ~50 m.
pub fn synthetic_lidar() -> LidarConfig {
    LidarConfig {
        num_beams: 160,
        vertical_fov: (-14.0, 0.5),
        azimuth_step: 0.4,
        horizontal_fov: (-32.0, 32.0),
        max_range: 90.0,
        dropout_prob: 0.0,
        range_noise_sigma: 0.0,
        mount: Pose3::identity(),
    }
}

/// Box-plus-cabin car mesh as OBJ text; origin at the footprint center.
pub fn car_obj(length: f64, width: f64, height: f64) -> String {
    let hl = length / 2.0;
    let hw = width / 2.0;
    let body_h = height * 0.55;
    let mut s = String::new();
    let mut quad = |verts: [[f64; 3]; 4], mtl: &str, base: &mut usize| {
        s.push_str(&format!("usemtl {mtl}\n"));
        for v in verts {
            s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
        s.push_str(&format!("f {} {} {} {}\n", *base + 1, *base + 2, *base + 3, *base + 4));
        *base += 4;
    };
    let mut base = 0usize;
    // Body: full-footprint box.
    let boxes = [
        ([-hl, -hw, 0.0], [hl, hw, body_h], "body"),
        // Cabin: narrower, behind the middle.
        ([-hl * 0.45, -hw * 0.92, body_h], [hl * 0.35, hw * 0.92, height], "glass"),
    ];
    for (lo, hi, mtl) in boxes {
        let [x0, y0, z0] = lo;
        let [x1, y1, z1] = hi;
        // Six faces.
        quad([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0]], mtl, &mut base);
        quad([[x0, y0, z1], [x0, y1, z1], [x1, y1, z1], [x1, y0, z1]], mtl, &mut base);
        quad([[x0, y0, z0], [x0, y0, z1], [x1, y0, z1], [x1, y0, z0]], mtl, &mut base);
        quad([[x1, y0, z0], [x1, y0, z1], [x1, y1, z1], [x1, y1, z0]], mtl, &mut base);
        quad([[x1, y1, z0], [x1, y1, z1], [x0, y1, z1], [x0, y1, z0]], mtl, &mut base);
        quad([[x0, y1, z0], [x0, y1, z1], [x0, y0, z1], [x0, y0, z0]], mtl, &mut base);
    }
    s
}

fn palette(body: [f32; 3]) -> BTreeMap<String, [f32; 3]> {
    let mut p = BTreeMap::new();
    p.insert("body".to_string(), body);
    p.insert("glass".to_string(), [0.25, 0.3, 0.38]);
    p
}

fn plane_obj(x0: f64, x1: f64, y0: f64, y1: f64, z_at: impl Fn(f64, f64) -> f64, nx: usize) -> String {
    // A strip-subdivided quad so sloped roads stay piecewise planar.
    let mut s = String::new();
    let mut verts = 0usize;
    for i in 0..nx {
        let xa = x0 + (x1 - x0) * i as f64 / nx as f64;
        let xb = x0 + (x1 - x0) * (i + 1) as f64 / nx as f64;
        for (p, q) in [((xa, y0), (xb, y1))] {
            s.push_str(&format!("v {} {} {}\n", p.0, p.1, z_at(p.0, p.1)));
            s.push_str(&format!("v {} {} {}\n", q.0, p.1, z_at(q.0, p.1)));
            s.push_str(&format!("v {} {} {}\n", q.0, q.1, z_at(q.0, q.1)));
            s.push_str(&format!("v {} {} {}\n", p.0, q.1, z_at(p.0, q.1)));
            s.push_str(&format!("f {} {} {} {}\n", verts + 1, verts + 2, verts + 3, verts + 4));
            verts += 4;
        }
    }
    s
}

/// Controls for [`build_scene`].
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_parked: usize,
    pub road_len: f64,
    /// Full road width, meters.
    pub road_width: f64,
    /// Road grade along x (dz/dx).
    pub slope: f64,
    pub sensor_height: f64,
    pub image_size: (u32, u32),
    pub focal: f64,
    pub walls: bool,
    pub lidar: LidarConfig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            n_parked: 3,
            road_len: 55.0,
            road_width: 8.0,
            slope: 0.0,
            sensor_height: 1.73,
            image_size: (640, 192),
            focal: 380.0,
            walls: true,
            lidar: synthetic_lidar(),
        }
    }
}

fn instance_at(mesh: TriMesh, name: &str, pose: Pose3) -> ObjectInstance {
    ObjectInstance::new(Arc::new(LoadedObject::new(name, "scene", mesh)), pose)
}

/// Build one synthetic frame. Deterministic in `spec.seed` and `id`.
pub fn build_scene(spec: &SceneSpec, id: &str) -> Frame {
    let mut rng = substream(spec.seed, fnv1a(id.as_bytes()), 0, 0);
    let calib = kitti_like_calibration(spec.focal, spec.image_size);
    let ground_z0 = -spec.sensor_height;
    let slope = spec.slope;
    let half_w = spec.road_width / 2.0;

    let mut instances: Vec<ObjectInstance> = Vec::new();
    // Road surface mesh (subdivided so the slope renders correctly).
    let road_obj = plane_obj(0.5, spec.road_len, -half_w, half_w, |x, _| ground_z0 + slope * x, 24);
    let road = unnormalized(&road_obj, [0.22, 0.22, 0.24]);
    instances.push(instance_at(road, "road", Pose3::identity()));

    if spec.walls {
        for (side, y) in [(1.0, half_w + 3.0), (-1.0, -(half_w + 3.0))] {
            // Vertical wall: a quad strip in x-z.
            let mut s = String::new();
            let mut verts = 0;
            let nx = 12;
            for i in 0..nx {
                let xa = 0.5 + (spec.road_len - 0.5) * i as f64 / nx as f64;
                let xb = 0.5 + (spec.road_len - 0.5) * (i + 1) as f64 / nx as f64;
                let za = ground_z0 + slope * xa;
                let zb = ground_z0 + slope * xb;
                for v in [
                    [xa, y, za],
                    [xb, y, zb],
                    [xb, y, zb + 3.0],
                    [xa, y, za + 3.0],
                ] {
                    s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
                }
                s.push_str(&format!("f {} {} {} {}\n", verts + 1, verts + 2, verts + 3, verts + 4));
                verts += 4;
            }
            let shade = if side > 0.0 { [0.45, 0.42, 0.4] } else { [0.4, 0.43, 0.45] };
            instances.push(instance_at(unnormalized(&s, shade), "wall", Pose3::identity()));
        }
    }

    // Parked cars along the road edges.
    let mut labels: Vec<GroundTruth> = Vec::new();
    let body_colors = [
        [0.7f32, 0.25, 0.2],
        [0.2, 0.35, 0.7],
        [0.75, 0.75, 0.78],
        [0.2, 0.55, 0.3],
        [0.6, 0.5, 0.2],
    ];
    for k in 0..spec.n_parked {
        let x = rng.random_range(9.0..spec.road_len - 6.0);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y = side * (half_w - 1.2);
        let yaw = if rng.random::<bool>() { 0.0 } else { std::f64::consts::PI } + rng.random_range(-0.06..0.06);
        let length = rng.random_range(3.9..4.8);
        let width = rng.random_range(1.7..1.95);
        let height = rng.random_range(1.4..1.7);
        let obj = car_obj(length, width, height);
        let mesh = load_mesh(
            &obj,
            &LoadOptions { target_length: None, palette: palette(body_colors[k % body_colors.len()]) },
        )
        .unwrap();
        let pose = Pose3::new(x, y, ground_z0 + slope * x, yaw);
        let inst = instance_at(mesh, &format!("parked_{k}"), pose);
        let box3 = inst.box3;
        if let Some(box2) = projected_box2(&box3, &calib) {
            labels.push(GroundTruth { box3, box2, category: "Car".into(), dont_care: false });
            instances.push(inst);
        }
    }

    // Point cloud: one LiDAR sweep over the scene meshes.
    let rays = generate_rays(&spec.lidar);
    let mut sim_rng = substream(spec.seed, fnv1a(id.as_bytes()), 0, 1);
    let points = simulate_object_points(&rays, &instances, &spec.lidar, &mut sim_rng);
    let mut cloud = PointCloud::default();
    for sp in &points {
        cloud.push(sp.point, sp.intensity);
    }

    // Image: shaded rasterization over a sky gradient.
    let (w, h) = spec.image_size;
    let mut image = Raster::new(w, h);
    for y in 0..h {
        let t = y as f32 / h as f32;
        let sky = [
            (150.0 + 40.0 * t) as u8,
            (170.0 + 30.0 * t) as u8,
            (200.0 + 20.0 * t) as u8,
        ];
        for x in 0..w {
            image.set(x, y, sky);
        }
    }
    let cam_cfg = CameraConfig::default();
    let raster = rasterize_instances(&instances, &calib, &cam_cfg);
    for y in 0..h {
        for x in 0..w {
            let i = raster.idx(x, y);
            if raster.owner[i] >= 0 {
                let c = raster.color[i];
                image.set(x, y, [
                    (c[0] * 255.0).clamp(0.0, 255.0) as u8,
                    (c[1] * 255.0).clamp(0.0, 255.0) as u8,
                    (c[2] * 255.0).clamp(0.0, 255.0) as u8,
                ]);
            }
        }
    }

    Frame { id: id.to_string(), cloud, image, calib, labels }
}

/// Load OBJ text without recentring (vertices already in the scene frame).
fn unnormalized(obj: &str, body: [f32; 3]) -> TriMesh {
    let with_mtl = format!("usemtl body\n{obj}");
    let mut mesh = load_mesh(&with_mtl, &LoadOptions { target_length: None, palette: palette(body) }).unwrap();
    // load_mesh recenters; shift vertices back by re-parsing the original
    // coordinates' bounds.
    let raw: Vec<Point3> = obj
        .lines()
        .filter(|l| l.starts_with("v "))
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
            Point3::new(v[0], v[1], v[2])
        })
        .collect();
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &raw {
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let want = Point3::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, lo.z);
    for v in &mut mesh.vertices {
        *v = v.add(&want);
    }
    let verts = mesh.vertices.clone();
    let tris = mesh.triangles.clone();
    let albedo = mesh.albedo.clone();
    TriMesh::new(verts, tris, albedo).unwrap()
}

/// Axis-aligned image bounds of a 3D box, clamped to the image.
pub fn projected_box2(box3: &Box3, calib: &Calibration) -> Option<Box2> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut seen = false;
    for c in box3_corners(box3) {
        let cam = lidar_to_cam(&c, calib);
        let Ok((u, v, _)) = project_to_image(&cam, calib) else { continue };
        lo[0] = lo[0].min(u);
        lo[1] = lo[1].min(v);
        hi[0] = hi[0].max(u);
        hi[1] = hi[1].max(v);
        seen = true;
    }
    if !seen {
        return None;
    }
    Box2::new(lo[0], lo[1], hi[0], hi[1]).ok()?.clamp_to_image(calib.image_size.0, calib.image_size.1).ok()
}

/// Write a procedural vehicle database: `objects/<category>/<name>.obj`
/// plus one `meta.json` per category.
pub fn write_object_database(dir: &Path, seed: u64) -> std::io::Result<usize> {
    let mut rng = substream(seed, fnv1a(b"objectdb"), 0, 0);
    let categories: [(&str, f64, f64, f64); 3] = [
        ("sedan", 4.5, 1.8, 1.45),
        ("suv", 4.7, 1.9, 1.75),
        ("cab", 5.2, 1.95, 2.0),
    ];
    let mut written = 0;
    for (cat, l, w, h) in categories {
        let cat_dir = dir.join(cat);
        std::fs::create_dir_all(&cat_dir)?;
        std::fs::write(
            cat_dir.join("meta.json"),
            format!("{{\n  \"category\": \"{cat}\",\n  \"target_length\": null\n}}\n"),
        )?;
        for k in 0..3 {
            let jitter = |v: f64, r: &mut rand_chacha::ChaCha8Rng| v * r.random_range(0.93..1.07);
            let obj = car_obj(jitter(l, &mut rng), jitter(w, &mut rng), jitter(h, &mut rng));
            std::fs::write(cat_dir.join(format!("{cat}_{k}.obj")), obj)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Write `n` synthetic seed frames in KITTI layout under `dir`.
pub fn write_seed_frames(dir: &Path, spec: &SceneSpec, n: usize) -> Result<Vec<String>, crate::kitti::KittiError> {
    let mut ids = Vec::new();
    for k in 0..n {
        let id = format!("{k:06}");
        let mut frame_spec = spec.clone();
        frame_spec.n_parked = 2 + (k % 3);
        frame_spec.slope = match k % 3 {
            0 => 0.0,
            1 => 0.008,
            _ => -0.006,
        };
        let frame = build_scene(&frame_spec, &id);
        frame.save(dir)?;
        ids.push(id);
    }
    Ok(ids)
}
