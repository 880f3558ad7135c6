//! Physically valid insertion poses: segment drivable ground from the
//! background cloud with a height-map grid, meshify it into a road surface,
//! sample candidate poses on it, and reject collisions.

use crate::geom::{iou_3d, normalize_yaw, rotate_z, Box3, Point3, PointCloud, Pose3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("no grid cell qualifies as ground")]
    NoGround,
    #[error("road grid too sparse to meshify (need at least one quad)")]
    TooSparse,
    #[error("no pose satisfying range bounds after {0} attempts")]
    Exhausted(u32),
}

/// Yaw sampling mode for candidate poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum YawMode {
    /// Uniform over [-pi, pi).
    Uniform,
    /// Principal direction of nearby road cells, flipped at random, with
    /// uniform jitter of +/- `jitter_deg`.
    RoadAligned { jitter_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    /// Grid resolution in meters.
    pub cell_size: f64,
    /// Max (max_z - min_z) within a cell for it to count as ground.
    pub flatness_thresh: f64,
    /// Allowed |mean_z - expected ground| band in meters.
    pub ground_band: f64,
    /// Sensor height above ground; expected ground z is its negative.
    pub sensor_height: f64,
    pub yaw_mode: YawMode,
    /// Inflation applied to the candidate box for the raw-point test.
    pub collision_margin: f64,
    /// Reject poses closer than this to the sensor.
    pub min_range: f64,
    /// Reject poses farther than this from the sensor.
    pub dis_max: f64,
    /// Sampling attempts before giving up on a candidate.
    pub max_attempts: u32,
}

impl Default for PoseConfig {
    fn default() -> Self {
        PoseConfig {
            cell_size: 0.5,
            flatness_thresh: 0.15,
            ground_band: 0.5,
            sensor_height: 1.73,
            yaw_mode: YawMode::RoadAligned { jitter_deg: 10.0 },
            collision_margin: 0.25,
            min_range: 5.0,
            dis_max: 80.0,
            max_attempts: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GridCell {
    pub min_z: f64,
    pub max_z: f64,
    pub sum_z: f64,
    pub count: u32,
    pub is_ground: bool,
    pub is_road: bool,
}

impl GridCell {
    pub fn mean_z(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.sum_z / self.count as f64 }
    }
}

/// Height-map grid over the cloud's XY footprint.
#[derive(Debug, Clone)]
pub struct GroundGrid {
    pub cell_size: f64,
    /// World coordinates of cell (0, 0)'s lower corner.
    pub origin: (f64, f64),
    pub nx: usize,
    pub ny: usize,
    cells: Vec<GridCell>,
}

impl GroundGrid {
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &GridCell {
        &self.cells[j * self.nx + i]
    }

    #[inline]
    fn cell_mut(&mut self, i: usize, j: usize) -> &mut GridCell {
        &mut self.cells[j * self.nx + i]
    }

    /// Cell indices containing world (x, y), or None outside the grid.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x - self.origin.0) / self.cell_size).floor();
        let j = ((y - self.origin.1) / self.cell_size).floor();
        if i < 0.0 || j < 0.0 || i as usize >= self.nx || j as usize >= self.ny {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (i as f64 + 0.5) * self.cell_size,
            self.origin.1 + (j as f64 + 0.5) * self.cell_size,
        )
    }

    /// True when the point's cell is classified as ground.
    pub fn is_ground_point(&self, p: &Point3) -> bool {
        self.locate(p.x, p.y).is_some_and(|(i, j)| self.cell(i, j).is_ground)
    }

    /// Points whose cell is not ground (collision obstacles).
    pub fn non_ground_points(&self, cloud: &PointCloud) -> Vec<Point3> {
        cloud.points.iter().filter(|p| !self.is_ground_point(p)).copied().collect()
    }

    pub fn road_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.ny).flat_map(move |j| {
            (0..self.nx).filter_map(move |i| self.cell(i, j).is_road.then_some((i, j)))
        })
    }
}

/// Seed region for road connectivity: directly in front of the sensor.
const SEED_X: (f64, f64) = (3.0, 10.0);
const SEED_Y_ABS: f64 = 3.0;

/// Classify ground cells by per-cell flatness and height band, then grow the
/// road as the largest 4-connected ground component touching the seed region
/// in front of the sensor.
pub fn segment_ground(cloud: &PointCloud, cfg: &PoseConfig) -> Result<GroundGrid, PoseError> {
    assert!(!cloud.is_empty(), "segment_ground needs a nonempty cloud");
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &cloud.points {
        lo = (lo.0.min(p.x), lo.1.min(p.y));
        hi = (hi.0.max(p.x), hi.1.max(p.y));
    }
    let nx = (((hi.0 - lo.0) / cfg.cell_size).floor() as usize + 1).max(1);
    let ny = (((hi.1 - lo.1) / cfg.cell_size).floor() as usize + 1).max(1);
    let mut grid = GroundGrid {
        cell_size: cfg.cell_size,
        origin: lo,
        nx,
        ny,
        cells: vec![GridCell { min_z: f64::INFINITY, max_z: f64::NEG_INFINITY, ..Default::default() }; nx * ny],
    };
    for p in &cloud.points {
        if let Some((i, j)) = grid.locate(p.x, p.y) {
            let c = grid.cell_mut(i, j);
            c.min_z = c.min_z.min(p.z);
            c.max_z = c.max_z.max(p.z);
            c.sum_z += p.z;
            c.count += 1;
        }
    }
    let expected_z = -cfg.sensor_height;
    let mut any_ground = false;
    for c in &mut grid.cells {
        c.is_ground = c.count >= 3
            && (c.max_z - c.min_z) < cfg.flatness_thresh
            && (c.mean_z() - expected_z).abs() < cfg.ground_band;
        any_ground |= c.is_ground;
    }
    if !any_ground {
        return Err(PoseError::NoGround);
    }

    // Connected components over ground cells (4-neighborhood).
    let mut comp = vec![usize::MAX; grid.cells.len()];
    let mut comp_sizes: Vec<usize> = Vec::new();
    let mut comp_touches_seed: Vec<bool> = Vec::new();
    let in_seed = |grid: &GroundGrid, i: usize, j: usize| {
        let (cx, cy) = grid.cell_center(i, j);
        cx >= SEED_X.0 && cx <= SEED_X.1 && cy.abs() <= SEED_Y_ABS
    };
    let mut stack = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let idx = j * nx + i;
            if !grid.cells[idx].is_ground || comp[idx] != usize::MAX {
                continue;
            }
            let id = comp_sizes.len();
            comp_sizes.push(0);
            comp_touches_seed.push(false);
            stack.push((i, j));
            comp[idx] = id;
            while let Some((ci, cj)) = stack.pop() {
                comp_sizes[id] += 1;
                comp_touches_seed[id] |= in_seed(&grid, ci, cj);
                let neighbors = [
                    (ci.wrapping_sub(1), cj),
                    (ci + 1, cj),
                    (ci, cj.wrapping_sub(1)),
                    (ci, cj + 1),
                ];
                for (niu, nju) in neighbors {
                    if niu < nx && nju < ny {
                        let nidx = nju * nx + niu;
                        if grid.cells[nidx].is_ground && comp[nidx] == usize::MAX {
                            comp[nidx] = id;
                            stack.push((niu, nju));
                        }
                    }
                }
            }
        }
    }
    let road_comp = (0..comp_sizes.len())
        .filter(|&id| comp_touches_seed[id])
        .max_by_key(|&id| comp_sizes[id]);
    if let Some(road_id) = road_comp {
        for (idx, c) in grid.cells.iter_mut().enumerate() {
            c.is_road = c.is_ground && comp[idx] == road_id;
        }
    }
    Ok(grid)
}

/// One triangle of the reconstructed road surface.
#[derive(Debug, Clone, Copy)]
pub struct RoadTriangle {
    /// Vertices as (x, y, z) at road-cell centers.
    pub v: [[f64; 3]; 3],
}

impl RoadTriangle {
    pub fn bev_area(&self) -> f64 {
        let [a, b, c] = self.v;
        ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs() / 2.0
    }

    fn contains_bev(&self, x: f64, y: f64) -> bool {
        let [a, b, c] = self.v;
        let sign = |p: [f64; 3], q: [f64; 3]| (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
        let d1 = sign(a, b);
        let d2 = sign(b, c);
        let d3 = sign(c, a);
        let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
        let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
        !(has_neg && has_pos)
    }

    /// Plane height at (x, y); exact for points on the triangle.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let [a, b, c] = self.v;
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * w[2] - u[2] * w[1],
            u[2] * w[0] - u[0] * w[2],
            u[0] * w[1] - u[1] * w[0],
        ];
        if n[2].abs() < 1e-12 {
            return a[2];
        }
        a[2] - (n[0] * (x - a[0]) + n[1] * (y - a[1])) / n[2]
    }
}

/// Triangulated road surface with area-weighted sampling support.
#[derive(Debug, Clone)]
pub struct RoadSurface {
    pub triangles: Vec<RoadTriangle>,
    /// Cumulative BEV areas for proportional sampling.
    cumulative_area: Vec<f64>,
    /// Road-cell centers (BEV) used for yaw alignment.
    alignment_points: Vec<[f64; 2]>,
}

impl RoadSurface {
    pub fn from_triangles(triangles: Vec<RoadTriangle>) -> RoadSurface {
        let mut cum = Vec::with_capacity(triangles.len());
        let mut acc = 0.0;
        for t in &triangles {
            acc += t.bev_area();
            cum.push(acc);
        }
        let alignment_points = triangles
            .iter()
            .flat_map(|t| t.v.iter().map(|v| [v[0], v[1]]))
            .collect();
        RoadSurface { triangles, cumulative_area: cum, alignment_points }
    }

    pub fn total_area(&self) -> f64 {
        self.cumulative_area.last().copied().unwrap_or(0.0)
    }

    /// Surface height at (x, y), defined exactly on covered ground.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.triangles
            .iter()
            .find(|t| t.contains_bev(x, y))
            .map(|t| t.height_at(x, y))
    }
}

/// Triangulate quads of four mutually adjacent road cells over their mean
/// heights. Needs at least one full quad.
pub fn meshify_road(grid: &GroundGrid) -> Result<RoadSurface, PoseError> {
    let mut triangles = Vec::new();
    let mut alignment = Vec::new();
    let road = |i: usize, j: usize| grid.cell(i, j).is_road;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if road(i, j) {
                let (cx, cy) = grid.cell_center(i, j);
                alignment.push([cx, cy]);
            }
            if i + 1 < grid.nx
                && j + 1 < grid.ny
                && road(i, j)
                && road(i + 1, j)
                && road(i, j + 1)
                && road(i + 1, j + 1)
            {
                let corner = |ii: usize, jj: usize| {
                    let (x, y) = grid.cell_center(ii, jj);
                    [x, y, grid.cell(ii, jj).mean_z()]
                };
                let a = corner(i, j);
                let b = corner(i + 1, j);
                let c = corner(i + 1, j + 1);
                let d = corner(i, j + 1);
                triangles.push(RoadTriangle { v: [a, b, c] });
                triangles.push(RoadTriangle { v: [a, c, d] });
            }
        }
    }
    if triangles.is_empty() {
        return Err(PoseError::TooSparse);
    }
    let mut surface = RoadSurface::from_triangles(triangles);
    surface.alignment_points = alignment;
    Ok(surface)
}

/// A candidate insertion: pose, world-frame object bounds, sensor distance.
#[derive(Debug, Clone, Copy)]
pub struct PoseCandidate {
    pub pose: Pose3,
    pub box3: Box3,
    pub distance: f64,
}

/// Principal direction of alignment points within `radius` of (x, y), if
/// they define one.
fn principal_direction(points: &[[f64; 2]], x: f64, y: f64, radius: f64) -> Option<f64> {
    let near: Vec<&[f64; 2]> = points
        .iter()
        .filter(|p| {
            let dx = p[0] - x;
            let dy = p[1] - y;
            dx * dx + dy * dy <= radius * radius
        })
        .collect();
    if near.len() < 3 {
        return None;
    }
    let n = near.len() as f64;
    let mx = near.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = near.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for p in &near {
        let dx = p[0] - mx;
        let dy = p[1] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx + syy < 1e-9 || (sxy.abs() < 1e-9 && (sxx - syy).abs() < 1e-9) {
        return None; // isotropic patch, no meaningful direction
    }
    Some(0.5 * (2.0 * sxy).atan2(sxx - syy))
}

/// Draw a pose on the road surface: position uniform over road area
/// (triangle picked proportionally to area, barycentric uniform), z set so
/// the object base sits on the road, yaw per config.
///
/// `object_box` is the object-frame bounding box of the mesh to place.
pub fn sample_pose(
    surface: &RoadSurface,
    object_box: &Box3,
    rng: &mut ChaCha8Rng,
    cfg: &PoseConfig,
) -> Result<PoseCandidate, PoseError> {
    let total = surface.total_area();
    assert!(total > 0.0, "road surface has no area");
    for _ in 0..cfg.max_attempts {
        let r = rng.random_range(0.0..total);
        let idx = surface.cumulative_area.partition_point(|&a| a < r).min(surface.triangles.len() - 1);
        let tri = &surface.triangles[idx];
        let mut u: f64 = rng.random();
        let mut v: f64 = rng.random();
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let [a, b, c] = tri.v;
        let x = a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]);
        let y = a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]);
        let z = a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]);
        let yaw = match cfg.yaw_mode {
            YawMode::Uniform => rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            YawMode::RoadAligned { jitter_deg } => {
                match principal_direction(&surface.alignment_points, x, y, 5.0) {
                    Some(dir) => {
                        let flip = if rng.random::<bool>() { std::f64::consts::PI } else { 0.0 };
                        let jitter = rng.random_range(-jitter_deg..jitter_deg).to_radians();
                        normalize_yaw(dir + flip + jitter)
                    }
                    None => rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                }
            }
        };
        // Base of the object sits on the road surface.
        let pose = Pose3 { x, y, z: z - object_box.z_min(), yaw };
        let distance = pose.position().norm();
        if distance < cfg.min_range || distance > cfg.dis_max {
            continue;
        }
        let (bx, by) = rotate_z(yaw, object_box.center.x, object_box.center.y);
        let box3 = Box3 {
            center: Point3::new(bx + pose.x, by + pose.y, object_box.center.z + pose.z),
            length: object_box.length,
            width: object_box.width,
            height: object_box.height,
            yaw,
        };
        return Ok(PoseCandidate { pose, box3, distance });
    }
    Err(PoseError::Exhausted(cfg.max_attempts))
}

/// Per-frame pose-estimation state: the segmented grid, the meshed road
/// surface, and the obstacle points used for collision checks.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub grid: GroundGrid,
    pub surface: RoadSurface,
    pub non_ground: Vec<Point3>,
}

impl SceneContext {
    pub fn build(cloud: &PointCloud, cfg: &PoseConfig) -> Result<SceneContext, PoseError> {
        let grid = segment_ground(cloud, cfg)?;
        let surface = meshify_road(&grid)?;
        let non_ground = grid.non_ground_points(cloud);
        Ok(SceneContext { grid, surface, non_ground })
    }
}

/// Collision verdict for a candidate pose.
#[derive(Debug, Clone, PartialEq)]
pub enum CollisionCheck {
    Valid,
    /// Candidate box overlaps an existing ground-truth box (strict IOU > 0).
    GtOverlap { index: usize, iou: f64 },
    /// Margin-inflated candidate box contains background points.
    PointsInside { count: usize },
}

impl CollisionCheck {
    pub fn is_valid(&self) -> bool {
        matches!(self, CollisionCheck::Valid)
    }
}

/// Reject candidates that overlap an existing box (any IOU > 0) or whose
/// margin-inflated box contains non-ground background points.
pub fn check_collision(
    candidate: &PoseCandidate,
    gt_boxes: &[Box3],
    non_ground: &[Point3],
    cfg: &PoseConfig,
) -> CollisionCheck {
    for (index, gt) in gt_boxes.iter().enumerate() {
        let iou = iou_3d(&candidate.box3, gt);
        if iou > 0.0 {
            return CollisionCheck::GtOverlap { index, iou };
        }
    }
    let inflated = candidate.box3.inflate(cfg.collision_margin);
    let count = non_ground.iter().filter(|p| inflated.contains(p)).count();
    if count > 0 {
        return CollisionCheck::PointsInside { count };
    }
    CollisionCheck::Valid
}
