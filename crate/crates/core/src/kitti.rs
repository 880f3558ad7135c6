//! Bit-exact readers and writers for the KITTI-style frame formats the
//! campaign consumes and emits: velodyne `.bin` point clouds, `calib` text
//! files, label text files, and PPM/PNG images.
//!
//! Per-frame directory layout:
//! `velodyne/<id>.bin`, `image_2/<id>.png|.ppm`, `calib/<id>.txt`,
//! `label_2/<id>.txt`. Detections are read from `<sut_out>/<id>.txt` in the
//! same label format plus a 16th confidence column.

use crate::geom::{
    lidar_to_cam, normalize_yaw, Box2, Box3, Calibration, GroundTruth, Point3, PointCloud,
};
use nalgebra::{Matrix3, Matrix3x4, Matrix4};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("malformed point cloud: {0}")]
    MalformedCloud(String),
    #[error("calib file missing key {0}")]
    MissingKey(&'static str),
    #[error("calib matrix {0} malformed: {1}")]
    MalformedMatrix(&'static str, String),
    #[error("label line {line}: expected 15 or 16 fields, got {count}")]
    FieldCount { line: usize, count: usize },
    #[error("label line {line}: non-numeric field {token:?}")]
    NonNumeric { line: usize, token: String },
    #[error("unsupported image format (want P6 PPM or 8-bit RGB PNG)")]
    UnsupportedFormat,
    #[error("corrupt image: {0}")]
    CorruptHeader(String),
    #[error("invalid calibration: {0}")]
    Calibration(#[from] crate::geom::GeomError),
    #[error("frame {0}: missing file {1}")]
    MissingFile(String, PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Packed 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples, `3 * width * height` bytes.
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; (width as usize) * (height as usize) * 3] }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut r = Self::new(width, height);
        for px in r.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        r
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

/// One multi-modal scene: point cloud, image, calibration and labels.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    pub image: Raster,
    pub calib: Calibration,
    pub labels: Vec<GroundTruth>,
}

/// One line of a KITTI label file. Ground-truth records have 15 fields;
/// detections carry a 16th confidence field.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub category: String,
    pub truncation: f64,
    pub occlusion: i32,
    /// Observation angle, kept for format fidelity.
    pub alpha: f64,
    pub box2: Box2,
    /// Box height, width, length in meters.
    pub dimensions: (f64, f64, f64),
    /// Bottom-center of the 3D box in the camera frame.
    pub location: Point3,
    pub rotation_y: f64,
    pub score: Option<f64>,
}

// ---------------------------------------------------------------------------
// Point cloud (velodyne .bin)
// ---------------------------------------------------------------------------

/// Parse little-endian (x, y, z, intensity) float32 quads.
pub fn read_point_cloud(bytes: &[u8]) -> Result<PointCloud, KittiError> {
    if bytes.len() % 16 != 0 {
        return Err(KittiError::MalformedCloud(format!(
            "byte length {} not divisible by 16",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let mut v = [0.0f32; 4];
        for (k, chunk) in rec.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(KittiError::MalformedCloud("non-finite value".into()));
        }
        points.push(Point3::new(v[0] as f64, v[1] as f64, v[2] as f64));
        intensity.push(v[3]);
    }
    Ok(PointCloud { points, intensity })
}

/// Inverse of [`read_point_cloud`]. Coordinates are narrowed to f32.
pub fn write_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (p, &i) in cloud.points.iter().zip(cloud.intensity.iter()) {
        for v in [p.x as f32, p.y as f32, p.z as f32, i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Calibration text
// ---------------------------------------------------------------------------

fn parse_matrix_line(text: &str, key: &'static str, want: usize) -> Result<Vec<f64>, KittiError> {
    let line = text
        .lines()
        .find(|l| l.split(':').next().map(str::trim) == Some(key))
        .ok_or(KittiError::MissingKey(key))?;
    let body = line.splitn(2, ':').nth(1).unwrap_or("");
    let vals: Result<Vec<f64>, _> = body.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| KittiError::MalformedMatrix(key, e.to_string()))?;
    if vals.len() != want {
        return Err(KittiError::MalformedMatrix(
            key,
            format!("expected {want} values, got {}", vals.len()),
        ));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(KittiError::MalformedMatrix(key, "non-finite value".into()));
    }
    Ok(vals)
}

/// Parse a KITTI calib file (keys `P2`, `R0_rect`, `Tr_velo_to_cam`).
///
/// The rectification is folded into the returned projection:
/// `cam_projection = P2 * expand(R0_rect)` and
/// `velo_to_cam = expand(Tr_velo_to_cam)`.
pub fn read_calib(text: &str, image_size: (u32, u32)) -> Result<Calibration, KittiError> {
    let p2 = parse_matrix_line(text, "P2", 12)?;
    let r0 = parse_matrix_line(text, "R0_rect", 9)?;
    let tr = parse_matrix_line(text, "Tr_velo_to_cam", 12)?;

    let p2 = Matrix3x4::from_row_slice(&p2);
    let mut r0_h = Matrix4::identity();
    r0_h.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::from_row_slice(&r0));
    let mut tr_h = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            tr_h[(r, c)] = tr[r * 4 + c];
        }
    }
    Ok(Calibration::new(p2 * r0_h, tr_h, image_size)?)
}

/// Serialize a calibration so that `read_calib` reproduces it exactly
/// (rectification written as identity since it is already folded in).
pub fn write_calib(calib: &Calibration) -> String {
    let fmt_row = |vals: &[f64]| {
        vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
    };
    let p: Vec<f64> = (0..3)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| calib.cam_projection[(r, c)])
        .collect();
    let tr: Vec<f64> = (0..3)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| calib.velo_to_cam[(r, c)])
        .collect();
    let r0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        fmt_row(&p),
        fmt_row(&r0),
        fmt_row(&tr)
    )
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Parse a KITTI label file; 15 fields per line for ground truth, 16 for
/// detections (trailing confidence).
pub fn read_labels(text: &str) -> Result<Vec<LabelRecord>, KittiError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(KittiError::FieldCount { line: idx + 1, count: fields.len() });
        }
        let num = |k: usize| -> Result<f64, KittiError> {
            fields[k]
                .parse::<f64>()
                .map_err(|_| KittiError::NonNumeric { line: idx + 1, token: fields[k].to_string() })
        };
        let box2 = Box2 { x_min: num(4)?, y_min: num(5)?, x_max: num(6)?, y_max: num(7)? };
        out.push(LabelRecord {
            category: fields[0].to_string(),
            truncation: num(1)?,
            occlusion: num(2)? as i32,
            alpha: num(3)?,
            box2,
            dimensions: (num(8)?, num(9)?, num(10)?),
            location: Point3::new(num(11)?, num(12)?, num(13)?),
            rotation_y: num(14)?,
            score: if fields.len() == 16 { Some(num(15)?) } else { None },
        });
    }
    Ok(out)
}

/// Inverse of [`read_labels`]. Floats use shortest round-trip formatting so
/// `read_labels(write_labels(r)) == r` exactly.
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let (h, w, l) = r.dimensions;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            r.category,
            r.truncation,
            r.occlusion,
            r.alpha,
            r.box2.x_min,
            r.box2.y_min,
            r.box2.x_max,
            r.box2.y_max,
            h,
            w,
            l,
            r.location.x,
            r.location.y,
            r.location.z,
            r.rotation_y
        ));
        if let Some(s) = r.score {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
    }
    out
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.category == "DontCare"
    }

    /// 3D box in the LiDAR frame, if the record carries valid 3D data.
    pub fn box3_lidar(&self, calib: &Calibration) -> Option<Box3> {
        let (h, w, l) = self.dimensions;
        if !(h > 0.0 && w > 0.0 && l > 0.0) {
            return None;
        }
        // `location` is the bottom-center in camera coordinates (y points
        // down, so up is -y).
        let center_cam = Point3::new(self.location.x, self.location.y - h / 2.0, self.location.z);
        let center = calib.cam_to_lidar(&center_cam);
        let (s, c) = self.rotation_y.sin_cos();
        let dir_cam = Point3::new(c, 0.0, -s);
        let d = calib.cam_dir_to_lidar(&dir_cam);
        let yaw = d.y.atan2(d.x);
        Some(Box3 { center, length: l, width: w, height: h, yaw: normalize_yaw(yaw) })
    }

    /// 3D box mapped into a z-up frame derived from the camera axes
    /// (x, z, -y), so two records can be compared without calibration.
    pub fn box3_camera_bev(&self) -> Option<Box3> {
        let (h, w, l) = self.dimensions;
        if !(h > 0.0 && w > 0.0 && l > 0.0) {
            return None;
        }
        let center = Point3::new(self.location.x, self.location.z, -self.location.y + h / 2.0);
        Some(Box3 {
            center,
            length: l,
            width: w,
            height: h,
            yaw: normalize_yaw(-self.rotation_y),
        })
    }

    /// Build a record from a LiDAR-frame box. Truncation/occlusion/alpha are
    /// synthesized; `score` stays `None` for ground truth.
    pub fn from_box3(
        category: &str,
        box3: &Box3,
        box2: &Box2,
        calib: &Calibration,
        score: Option<f64>,
    ) -> LabelRecord {
        let bottom = Point3::new(box3.center.x, box3.center.y, box3.center.z - box3.height / 2.0);
        let location = lidar_to_cam(&bottom, calib);
        let (s, c) = box3.yaw.sin_cos();
        let d_cam = calib.lidar_dir_to_cam(&Point3::new(c, s, 0.0));
        let rotation_y = normalize_yaw((-d_cam.z).atan2(d_cam.x));
        // KITTI's alpha is the observation angle: ry minus the bearing.
        let alpha = normalize_yaw(rotation_y - location.x.atan2(location.z));
        LabelRecord {
            category: category.to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha,
            box2: *box2,
            dimensions: (box3.height, box3.width, box3.length),
            location,
            rotation_y,
            score,
        }
    }

    /// Convert to a ground-truth record (None when the 2D box lies fully
    /// outside the image).
    pub fn to_ground_truth(&self, calib: &Calibration) -> Option<GroundTruth> {
        let box3 = self.box3_lidar(calib).unwrap_or_else(|| {
            // DontCare regions have no valid 3D data; park a placeholder box
            // far outside the scene so 3D overlap tests never fire.
            Box3 {
                center: Point3::new(-1e6, -1e6, -1e6),
                length: 0.1,
                width: 0.1,
                height: 0.1,
                yaw: 0.0,
            }
        });
        GroundTruth::new(box3, self.box2, self.category.clone(), self.is_dont_care(), calib.image_size)
            .ok()
    }
}

// ---------------------------------------------------------------------------
// Images (PPM P6 + PNG)
// ---------------------------------------------------------------------------

fn parse_ppm(bytes: &[u8]) -> Result<Raster, KittiError> {
    // Tokenizer over the header: whitespace-separated fields, '#' comments.
    let mut pos = 2; // past "P6"
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(KittiError::CorruptHeader("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(KittiError::CorruptHeader("expected integer".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse::<u64>().map_err(|e| KittiError::CorruptHeader(e.to_string()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(KittiError::UnsupportedFormat);
    }
    if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(KittiError::CorruptHeader(format!("bad dimensions {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(KittiError::CorruptHeader("missing data separator".into()));
    }
    pos += 1;
    let needed = (width as usize) * (height as usize) * 3;
    let avail = bytes.len() - pos;
    // Verify the payload is present before allocating for it.
    if avail < needed {
        return Err(KittiError::CorruptHeader(format!(
            "pixel data truncated: need {needed} bytes, have {avail}"
        )));
    }
    Ok(Raster {
        width: width as u32,
        height: height as u32,
        data: bytes[pos..pos + needed].to_vec(),
    })
}

/// Decode a P6 PPM or 8-bit RGB PNG image.
pub fn read_image(bytes: &[u8]) -> Result<Raster, KittiError> {
    if bytes.starts_with(b"P6") {
        return parse_ppm(bytes);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| KittiError::CorruptHeader(e.to_string()))?
            .to_rgb8();
        return Ok(Raster { width: img.width(), height: img.height(), data: img.into_raw() });
    }
    Err(KittiError::UnsupportedFormat)
}

/// Encode as binary PPM (P6).
pub fn write_image_ppm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}

/// Encode as 8-bit RGB PNG.
pub fn write_image_png(raster: &Raster) -> Result<Vec<u8>, KittiError> {
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(Cursor::new(&mut out));
    image::ImageEncoder::write_image(
        enc,
        &raster.data,
        raster.width,
        raster.height,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| KittiError::CorruptHeader(e.to_string()))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frame directory IO
// ---------------------------------------------------------------------------

fn frame_file(root: &Path, sub: &str, id: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| root.join(sub).join(format!("{id}.{e}")))
        .find(|p| p.is_file())
}

impl Frame {
    /// Load `velodyne/<id>.bin`, `image_2/<id>.png|.ppm`, `calib/<id>.txt`
    /// and (optionally) `label_2/<id>.txt` from a KITTI-layout directory.
    pub fn load(root: &Path, id: &str) -> Result<Frame, KittiError> {
        let miss = |sub: &str, ext: &str| {
            KittiError::MissingFile(id.to_string(), root.join(sub).join(format!("{id}.{ext}")))
        };
        let img_path =
            frame_file(root, "image_2", id, &["png", "ppm"]).ok_or_else(|| miss("image_2", "png"))?;
        let image = read_image(&std::fs::read(&img_path)?)?;
        let calib_path =
            frame_file(root, "calib", id, &["txt"]).ok_or_else(|| miss("calib", "txt"))?;
        let calib = read_calib(&std::fs::read_to_string(&calib_path)?, image.size())?;
        let cloud_path =
            frame_file(root, "velodyne", id, &["bin"]).ok_or_else(|| miss("velodyne", "bin"))?;
        let cloud = read_point_cloud(&std::fs::read(&cloud_path)?)?;
        let labels = match frame_file(root, "label_2", id, &["txt"]) {
            Some(p) => read_labels(&std::fs::read_to_string(&p)?)?
                .iter()
                .filter_map(|r| r.to_ground_truth(&calib))
                .collect(),
            None => Vec::new(),
        };
        Ok(Frame { id: id.to_string(), cloud, image, calib, labels })
    }

    /// List frame ids (velodyne stems) under a KITTI-layout directory, sorted.
    pub fn list_ids(root: &Path) -> Result<Vec<String>, KittiError> {
        let dir = root.join("velodyne");
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Write the frame in KITTI layout (PNG image).
    pub fn save(&self, root: &Path) -> Result<(), KittiError> {
        for sub in ["velodyne", "image_2", "calib", "label_2"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        std::fs::write(root.join("velodyne").join(format!("{}.bin", self.id)), write_point_cloud(&self.cloud))?;
        std::fs::write(root.join("image_2").join(format!("{}.png", self.id)), write_image_png(&self.image)?)?;
        std::fs::write(root.join("calib").join(format!("{}.txt", self.id)), write_calib(&self.calib))?;
        let records: Vec<LabelRecord> = self
            .labels
            .iter()
            .map(|gt| {
                let mut r = LabelRecord::from_box3(&gt.category, &gt.box3, &gt.box2, &self.calib, None);
                if gt.dont_care {
                    r.category = "DontCare".to_string();
                }
                r
            })
            .collect();
        std::fs::write(root.join("label_2").join(format!("{}.txt", self.id)), write_labels(&records))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn point_cloud_single_record() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = read_point_cloud(&bytes).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.points[0], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(c.intensity[0], 0.5);
    }

    #[test]
    fn point_cloud_empty() {
        assert_eq!(read_point_cloud(&[]).unwrap().len(), 0);
        assert!(write_point_cloud(&PointCloud::default()).is_empty());
    }

    #[test]
    fn point_cloud_round_trip_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bytes = Vec::new();
        for _ in 0..1000 {
            for _ in 0..3 {
                bytes.extend_from_slice(&rng.random_range(-80.0f32..80.0).to_le_bytes());
            }
            bytes.extend_from_slice(&rng.random_range(0.0f32..1.0).to_le_bytes());
        }
        let cloud = read_point_cloud(&bytes).unwrap();
        assert_eq!(write_point_cloud(&cloud), bytes);
    }

    #[test]
    fn point_cloud_rejects_truncation() {
        let bytes = vec![0u8; 31];
        assert!(matches!(read_point_cloud(&bytes), Err(KittiError::MalformedCloud(_))));
    }

    #[test]
    fn point_cloud_rejects_non_finite() {
        let mut bytes = Vec::new();
        for v in [f32::NAN, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(read_point_cloud(&bytes), Err(KittiError::MalformedCloud(_))));
    }

    #[test]
    fn calib_identity_rectification() {
        let text = "P2: 700 0 600 0 0 700 180 0 0 0 1 0\n\
                    R0_rect: 1 0 0 0 1 0 0 0 1\n\
                    Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let c = read_calib(text, (1200, 360)).unwrap();
        assert_eq!(c.cam_projection[(0, 0)], 700.0);
        assert_eq!(c.cam_projection[(0, 2)], 600.0);
        assert_eq!(c.velo_to_cam, Matrix4::identity());
    }

    #[test]
    fn calib_translation_only() {
        let text = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                    R0_rect: 1 0 0 0 1 0 0 0 1\n\
                    Tr_velo_to_cam: 1 0 0 0.5 0 1 0 -0.25 0 0 1 1.5\n";
        let c = read_calib(text, (10, 10)).unwrap();
        assert_eq!(c.velo_to_cam[(0, 3)], 0.5);
        assert_eq!(c.velo_to_cam[(1, 3)], -0.25);
        assert_eq!(c.velo_to_cam[(2, 3)], 1.5);
    }

    #[test]
    fn calib_missing_key() {
        assert!(matches!(
            read_calib("P2: 1 0 0 0 0 1 0 0 0 0 1 0\n", (4, 4)),
            Err(KittiError::MissingKey("R0_rect"))
        ));
    }

    #[test]
    fn calib_projects_known_point() {
        // KITTI-like axis permutation: x_cam = -y_v, y_cam = -z_v, z_cam = x_v.
        let text = "P2: 700 0 600 0 0 700 180 0 0 0 1 0\n\
                    R0_rect: 1 0 0 0 1 0 0 0 1\n\
                    Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";
        let c = read_calib(text, (1200, 360)).unwrap();
        // LiDAR point 10 m ahead, 1 m left, at sensor height.
        let p = lidar_to_cam(&Point3::new(10.0, 1.0, 0.0), &c);
        let (u, v, d) = crate::geom::project_to_image(&p, &c).unwrap();
        // Hand-computed: cam point is (-1, 0, 10).
        assert_relative_eq!(u, 600.0 + 700.0 * (-1.0) / 10.0, epsilon = 1e-12);
        assert_relative_eq!(v, 180.0, epsilon = 1e-12);
        assert_relative_eq!(d, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn calib_round_trip() {
        let text = "P2: 707.0493 0 604.0814 45.75831 0 707.0493 180.5066 -0.3454157 0 0 1 0.004981016\n\
                    R0_rect: 0.9999128 0.01009263 -0.008511932 -0.01012729 0.9999406 -0.004037671 0.008470675 0.004123522 0.9999556\n\
                    Tr_velo_to_cam: 0.006927964 -0.9999722 -0.002757829 -0.02457729 -0.001162982 0.002749836 -0.9999955 -0.06127237 0.9999753 0.006931141 -0.001143899 -0.3321029\n";
        let c = read_calib(text, (1242, 375)).unwrap();
        let c2 = read_calib(&write_calib(&c), (1242, 375)).unwrap();
        assert_eq!(c.cam_projection, c2.cam_projection);
        assert_eq!(c.velo_to_cam, c2.velo_to_cam);
    }

    #[test]
    fn labels_dont_care() {
        let text = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n";
        let recs = read_labels(text).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].is_dont_care());
        assert!(recs[0].score.is_none());
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1242, 375));
        let gt = recs[0].to_ground_truth(&calib).unwrap();
        assert!(gt.dont_care);
    }

    #[test]
    fn labels_detection_score() {
        let text = "Car 0 0 1.5 100 100 200 200 1.5 1.6 4.0 1 2 20 0.1 0.87\n";
        let recs = read_labels(text).unwrap();
        assert_eq!(recs[0].score, Some(0.87));
    }

    #[test]
    fn labels_reject_bad_field_count() {
        let text = "Car 0 0 1.5 100 100 200 200 1.5 1.6 4.0 1 2 20\n";
        assert!(matches!(read_labels(text), Err(KittiError::FieldCount { count: 14, .. })));
    }

    #[test]
    fn labels_reject_non_numeric() {
        let text = "Car 0 0 1.5 100 100 200 200 1.5 1.6 4.0 1 2 twenty 0.1\n";
        assert!(matches!(read_labels(text), Err(KittiError::NonNumeric { .. })));
    }

    #[test]
    fn labels_round_trip_50_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut records = Vec::new();
        for i in 0..50 {
            let x0 = rng.random_range(0.0..600.0);
            let y0 = rng.random_range(0.0..200.0);
            records.push(LabelRecord {
                category: if i % 7 == 0 { "DontCare".into() } else { "Car".into() },
                truncation: rng.random_range(0.0..1.0),
                occlusion: rng.random_range(0..3),
                alpha: rng.random_range(-3.14..3.14),
                box2: Box2 {
                    x_min: x0,
                    y_min: y0,
                    x_max: x0 + rng.random_range(1.0..300.0),
                    y_max: y0 + rng.random_range(1.0..100.0),
                },
                dimensions: (
                    rng.random_range(1.0..2.5),
                    rng.random_range(1.4..2.2),
                    rng.random_range(3.0..5.5),
                ),
                location: Point3::new(
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-2.0..3.0),
                    rng.random_range(4.0..70.0),
                ),
                rotation_y: rng.random_range(-3.14..3.14),
                score: if i % 2 == 0 { Some(rng.random_range(0.0..1.0)) } else { None },
            });
        }
        let text = write_labels(&records);
        let back = read_labels(&text).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn label_box3_round_trip_through_camera_frame() {
        let text = "P2: 700 0 600 0 0 700 180 0 0 0 1 0\n\
                    R0_rect: 1 0 0 0 1 0 0 0 1\n\
                    Tr_velo_to_cam: 0 -1 0 0.02 0 0 -1 -0.08 1 0 0 -0.27\n";
        let calib = read_calib(text, (1200, 360)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let b = Box3 {
                center: Point3::new(
                    rng.random_range(5.0..60.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-1.5..0.5),
                ),
                length: rng.random_range(3.0..5.0),
                width: rng.random_range(1.4..2.0),
                height: rng.random_range(1.3..1.9),
                yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            };
            let box2 = Box2 { x_min: 10.0, y_min: 10.0, x_max: 50.0, y_max: 40.0 };
            let rec = LabelRecord::from_box3("Car", &b, &box2, &calib, None);
            let back = rec.box3_lidar(&calib).unwrap();
            assert!(back.center.sub(&b.center).norm() < 1e-9);
            assert!((back.length - b.length).abs() < 1e-12);
            assert!((crate::geom::normalize_yaw(back.yaw - b.yaw)).abs() < 1e-9);
        }
    }

    #[test]
    fn ppm_known_pixels() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c".to_vec();
        let r = read_image(&bytes).unwrap();
        assert_eq!(r.size(), (2, 2));
        assert_eq!(r.get(0, 0), [1, 2, 3]);
        assert_eq!(r.get(1, 0), [4, 5, 6]);
        assert_eq!(r.get(0, 1), [7, 8, 9]);
        assert_eq!(r.get(1, 1), [10, 11, 12]);
    }

    #[test]
    fn ppm_black_1x1_round_trips() {
        let r = Raster::new(1, 1);
        let enc = write_image_ppm(&r);
        assert_eq!(read_image(&enc).unwrap(), r);
    }

    #[test]
    fn ppm_random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = Raster::new(64, 64);
        rng.fill(&mut r.data[..]);
        let enc = write_image_ppm(&r);
        assert_eq!(read_image(&enc).unwrap(), r);
    }

    #[test]
    fn ppm_rejects_truncated_payload() {
        let r = Raster::new(8, 8);
        let mut enc = write_image_ppm(&r);
        enc.pop();
        assert!(matches!(read_image(&enc), Err(KittiError::CorruptHeader(_))));
    }

    #[test]
    fn ppm_rejects_absent_claimed_data_before_allocating() {
        // Header promises 4 Gpx but carries three bytes of payload.
        let bytes = b"P6\n65536 65537\n255\n\x00\x00\x00".to_vec();
        assert!(matches!(read_image(&bytes), Err(KittiError::CorruptHeader(_))));
    }

    #[test]
    fn png_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = Raster::new(32, 20);
        rng.fill(&mut r.data[..]);
        let enc = write_image_png(&r).unwrap();
        assert_eq!(read_image(&enc).unwrap(), r);
    }

    #[test]
    fn png_rejects_truncation() {
        let r = Raster::new(16, 16);
        let mut enc = write_image_png(&r).unwrap();
        enc.truncate(enc.len() - 8);
        assert!(read_image(&enc).is_err());
    }

    #[test]
    fn unknown_format_rejected() {
        assert!(matches!(read_image(b"GIF89a"), Err(KittiError::UnsupportedFormat)));
    }

    #[test]
    fn frame_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let calib = read_calib(
            "P2: 700 0 600 0 0 700 180 0 0 0 1 0\n\
             R0_rect: 1 0 0 0 1 0 0 0 1\n\
             Tr_velo_to_cam: 0 -1 0 0.02 0 0 -1 -0.08 1 0 0 -0.27\n",
            (1200, 360),
        )
        .unwrap();
        let mut cloud = PointCloud::default();
        // f32-exact coordinates: the .bin format narrows to f32.
        cloud.push(Point3::new(10.0, 0.5, -1.0), 0.25);
        cloud.push(Point3::new(22.0, -3.5, -1.25), 0.5);
        let box3 = Box3::new(Point3::new(15.0, 1.0, -0.9), 4.0, 1.8, 1.5, 0.4).unwrap();
        let gt = GroundTruth::new(
            box3,
            Box2::new(500.0, 150.0, 620.0, 240.0).unwrap(),
            "Car",
            false,
            (1200, 360),
        )
        .unwrap();
        let frame = Frame {
            id: "000042".into(),
            cloud,
            image: Raster::filled(1200, 360, [40, 80, 120]),
            calib,
            labels: vec![gt],
        };
        frame.save(dir.path()).unwrap();
        let back = Frame::load(dir.path(), "000042").unwrap();
        assert_eq!(back.cloud, frame.cloud);
        assert_eq!(back.image, frame.image);
        assert_eq!(back.labels.len(), 1);
        assert!(back.labels[0].box3.center.sub(&frame.labels[0].box3.center).norm() < 1e-9);
        assert_eq!(Frame::list_ids(dir.path()).unwrap(), vec!["000042".to_string()]);
    }
}
