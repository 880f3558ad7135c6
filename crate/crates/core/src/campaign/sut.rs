//! Detector adapters: the builtin geometric reference detector (so the
//! harness is testable without neural networks) and the process-boundary
//! adapter for external systems.

use super::config::BuiltinParams;
use crate::geom::{normalize_yaw, rotate_z, Box3, Point3};
use crate::kitti::{read_labels, Frame};
use crate::metrics::Detection;
use crate::pose::{segment_ground, PoseConfig};
use crate::rng::{fnv1a, substream};
use crate::synthetic::projected_box2;
use rand::Rng;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SutError {
    #[error("SUT timed out after {0:?}; stderr: {1}")]
    Timeout(Duration, String),
    #[error("SUT exited with status {0}; stderr: {1}")]
    NonZeroExit(i32, String),
    #[error("SUT output unparsable: {0}")]
    UnparsableOutput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An object detector under test. Adapters are stateless across frames
/// from the harness's point of view.
pub trait SutAdapter {
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>, SutError>;
    fn name(&self) -> &str;
}

// ---------------------------------------------------------------------------
// Builtin reference detector
// ---------------------------------------------------------------------------

/// Ground removal + Euclidean clustering + PCA box fit. Fault injectors
/// (max-range cutoff, detection dropout, box inflation) run after detection
/// so campaigns have known faults to reveal.
pub struct BuiltinDetector {
    pub params: BuiltinParams,
    pub pose_cfg: PoseConfig,
    /// Mixed into the per-frame dropout stream.
    pub seed: u64,
}

impl BuiltinDetector {
    pub fn new(params: BuiltinParams, pose_cfg: PoseConfig, seed: u64) -> Self {
        BuiltinDetector { params, pose_cfg, seed }
    }
}

/// Single-linkage Euclidean clustering on a uniform grid hash.
pub fn euclidean_cluster(points: &[Point3], radius: f64, min_points: usize) -> Vec<Vec<usize>> {
    let inv = 1.0 / radius;
    let key = |p: &Point3| {
        (
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        )
    };
    let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut cluster_of = vec![usize::MAX; points.len()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for start in 0..points.len() {
        if cluster_of[start] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut stack = vec![start];
        cluster_of[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (cx, cy, cz) = key(&points[i]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(cell) = cells.get(&(cx + dx, cy + dy, cz + dz)) else { continue };
                        for &j in cell {
                            if cluster_of[j] == usize::MAX {
                                let d = points[j].sub(&points[i]);
                                if d.dot(&d) <= r2 {
                                    cluster_of[j] = id;
                                    stack.push(j);
                                }
                            }
                        }
                    }
                }
            }
        }
        clusters.push(members);
    }
    clusters.retain(|c| c.len() >= min_points);
    clusters
}

/// Fit a yaw-oriented box to a cluster: principal BEV direction, extents
/// along it, z extents.
pub fn fit_cluster_box(points: &[Point3], members: &[usize]) -> Box3 {
    let n = members.len() as f64;
    let mut mx = 0.0;
    let mut my = 0.0;
    for &i in members {
        mx += points[i].x;
        my += points[i].y;
    }
    mx /= n;
    my /= n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &i in members {
        let dx = points[i].x - mx;
        let dy = points[i].y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let yaw = if sxy.abs() < 1e-12 && (sxx - syy).abs() < 1e-12 {
        0.0
    } else {
        0.5 * (2.0 * sxy).atan2(sxx - syy)
    };
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let (mut z0, mut z1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in members {
        let (u, v) = rotate_z(-yaw, points[i].x - mx, points[i].y - my);
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
        z0 = z0.min(points[i].z);
        z1 = z1.max(points[i].z);
    }
    let (cu, cv) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
    let (ox, oy) = rotate_z(yaw, cu, cv);
    Box3 {
        center: Point3::new(mx + ox, my + oy, (z0 + z1) / 2.0),
        length: (u1 - u0).max(0.1),
        width: (v1 - v0).max(0.1),
        height: (z1 - z0).max(0.1),
        yaw: normalize_yaw(yaw),
    }
}

impl SutAdapter for BuiltinDetector {
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>, SutError> {
        let obstacle_points = match segment_ground(&frame.cloud, &self.pose_cfg) {
            Ok(grid) => grid.non_ground_points(&frame.cloud),
            // A frame with no recognizable ground still gets clustered.
            Err(_) => frame.cloud.points.clone(),
        };
        let clusters =
            euclidean_cluster(&obstacle_points, self.params.cluster_radius, self.params.min_points);
        let mut dets = Vec::new();
        for members in &clusters {
            let box3 = fit_cluster_box(&obstacle_points, members);
            let score = (members.len() as f64 / self.params.score_points).min(1.0);
            let box2 = projected_box2(&box3, &frame.calib);
            dets.push(Detection {
                box3: Some(box3),
                box2,
                category: "Car".to_string(),
                score,
                distance_hint: None,
            });
        }
        // Fault injectors, applied after detection.
        if let Some(max_range) = self.params.max_range {
            dets.retain(|d| d.box3.is_none_or(|b| b.center.norm() <= max_range));
        }
        if let Some(p) = self.params.dropout {
            let mut rng = substream(self.seed, fnv1a(frame.id.as_bytes()), u64::MAX, 0);
            dets.retain(|_| rng.random::<f64>() >= p);
        }
        if let Some(s) = self.params.inflate {
            for d in &mut dets {
                if let Some(b) = &mut d.box3 {
                    b.length *= s;
                    b.width *= s;
                    b.height *= s;
                }
                if let Some(b3) = d.box3 {
                    d.box2 = projected_box2(&b3, &frame.calib);
                }
            }
        }
        Ok(dets)
    }

    fn name(&self) -> &str {
        "builtin"
    }
}

// ---------------------------------------------------------------------------
// External process adapter
// ---------------------------------------------------------------------------

/// Runs an external detector: the frame is written in KITTI layout to a
/// temp directory, the command template is executed with `{frame_dir}` and
/// `{out_file}` substituted, and the output file is parsed as 15/16-field
/// label lines.
pub struct ExternalSut {
    pub command_template: String,
    pub timeout: Duration,
}

impl ExternalSut {
    pub fn new(command_template: impl Into<String>, timeout: Duration) -> Self {
        ExternalSut { command_template: command_template.into(), timeout }
    }
}

impl SutAdapter for ExternalSut {
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>, SutError> {
        let dir = tempfile::tempdir()?;
        frame
            .save(dir.path())
            .map_err(|e| SutError::UnparsableOutput(format!("cannot stage frame: {e}")))?;
        let out_file = dir.path().join(format!("{}_detections.txt", frame.id));
        let command = self
            .command_template
            .replace("{frame_dir}", &dir.path().display().to_string())
            .replace("{out_file}", &out_file.display().to_string());
        let mut child = std::process::Command::new("sh")
            .arg("-c")
            .arg(&command)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::piped())
            .spawn()?;
        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() > self.timeout {
                let _ = child.kill();
                let stderr = drain_stderr(&mut child);
                return Err(SutError::Timeout(self.timeout, stderr));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let stderr = drain_stderr(&mut child);
        if !status.success() {
            return Err(SutError::NonZeroExit(status.code().unwrap_or(-1), stderr));
        }
        let text = std::fs::read_to_string(&out_file)
            .map_err(|e| SutError::UnparsableOutput(format!("missing {}: {e}", out_file.display())))?;
        let records = read_labels(&text).map_err(|e| SutError::UnparsableOutput(e.to_string()))?;
        Ok(records.iter().map(|r| Detection::from_label(r, &frame.calib)).collect())
    }

    fn name(&self) -> &str {
        "external"
    }
}

fn drain_stderr(child: &mut std::process::Child) -> String {
    use std::io::Read;
    let mut buf = String::new();
    if let Some(mut err) = child.stderr.take() {
        let _ = err.read_to_string(&mut buf);
    }
    buf.truncate(4096);
    buf
}
