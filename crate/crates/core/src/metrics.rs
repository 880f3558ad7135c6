//! Detection-vs-ground-truth evaluation: greedy matching, the fault
//! taxonomy (object missing / false detection / localization error),
//! average precision over the forty-point recall grid, metamorphic-relation
//! verdicts, and the modality-consistency score.

use crate::geom::{
    box3_corners, iou_2d, iou_3d, lidar_to_cam, project_to_image, Box2, Box3, Calibration,
    GroundTruth,
};
use crate::kitti::LabelRecord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no ground truth to evaluate against")]
    NoGroundTruth,
    #[error("mutated ground truth does not extend the seed ground truth at index {0}")]
    InconsistentGt(usize),
    #[error("no inserted objects to score")]
    EmptySet,
}

/// Which geometry the IOU matching runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchMode {
    #[serde(rename = "2d")]
    Mode2d,
    #[serde(rename = "3d")]
    Mode3d,
}

/// Detections with confidence at or above this scored threshold count as
/// fault evidence.
pub const FAULT_SCORE_THRESHOLD: f64 = 0.5;

/// One scored detector output. At least one of the boxes is present.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3: Option<Box3>,
    pub box2: Option<Box2>,
    pub category: String,
    pub score: f64,
    /// Depth estimate for 2D-only detectors (from the LiDAR depth image).
    pub distance_hint: Option<f64>,
}

impl Detection {
    pub fn new3d(box3: Box3, box2: Option<Box2>, category: impl Into<String>, score: f64) -> Self {
        Detection { box3: Some(box3), box2, category: category.into(), score, distance_hint: None }
    }

    /// Distance from the sensor; None when unknown (then the distance
    /// weight in the fitness terms vanishes).
    pub fn distance(&self) -> Option<f64> {
        self.box3.map(|b| b.center.norm()).or(self.distance_hint)
    }

    /// Parse a 16-field KITTI detection line into LiDAR-frame geometry.
    pub fn from_label(rec: &LabelRecord, calib: &Calibration) -> Detection {
        Detection {
            box3: rec.box3_lidar(calib),
            box2: Some(rec.box2),
            category: rec.category.clone(),
            score: rec.score.unwrap_or(1.0),
            distance_hint: None,
        }
    }

    /// Calibration-free variant mapping the camera-frame 3D columns into a
    /// z-up evaluation frame; used by the `evaluate` command.
    pub fn from_label_camera_bev(rec: &LabelRecord) -> Detection {
        Detection {
            box3: rec.box3_camera_bev(),
            box2: Some(rec.box2),
            category: rec.category.clone(),
            score: rec.score.unwrap_or(1.0),
            distance_hint: None,
        }
    }
}

fn pair_iou(gt: &GroundTruth, det: &Detection, mode: MatchMode) -> f64 {
    match mode {
        MatchMode::Mode2d => det.box2.map_or(0.0, |b| iou_2d(&gt.box2, &b)),
        MatchMode::Mode3d => det.box3.map_or(0.0, |b| iou_3d(&gt.box3, &b)),
    }
}

/// Result of pairing one frame's detections with its ground truth.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// (gt index, det index, IOU) for pairs above the threshold.
    pub pairs: Vec<(usize, usize, f64)>,
    /// (gt index, det index, IOU) for residual pairs with 0 < IOU <= tau.
    pub localization_pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gts: Vec<usize>,
    pub unmatched_dets: Vec<usize>,
}

/// Greedy matching, KITTI style: detections in descending score order claim
/// the unmatched non-DontCare ground truth with maximal IOU when that IOU
/// exceeds `tau`; leftovers are paired again (descending IOU) into
/// localization pairs where 0 < IOU <= tau.
pub fn match_detections(
    gts: &[GroundTruth],
    dets: &[Detection],
    tau: f64,
    mode: MatchMode,
) -> MatchResult {
    let mut gt_taken = vec![false; gts.len()];
    let mut det_taken = vec![false; dets.len()];
    let mut result = MatchResult::default();

    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &d in &det_order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.dont_care || gt_taken[g] {
                continue;
            }
            let iou = pair_iou(gt, &dets[d], mode);
            if iou > tau && best.is_none_or(|(_, bi)| iou > bi) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            gt_taken[g] = true;
            det_taken[d] = true;
            result.pairs.push((g, d, iou));
        }
    }

    // Residual pairing for localization errors, greedy by descending IOU.
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        if gt.dont_care || gt_taken[g] {
            continue;
        }
        for (d, det) in dets.iter().enumerate() {
            if det_taken[d] {
                continue;
            }
            let iou = pair_iou(gt, det, mode);
            if iou > 0.0 && iou <= tau {
                candidates.push((g, d, iou));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal).then((a.0, a.1).cmp(&(b.0, b.1)))
    });
    for (g, d, iou) in candidates {
        if !gt_taken[g] && !det_taken[d] {
            gt_taken[g] = true;
            det_taken[d] = true;
            result.localization_pairs.push((g, d, iou));
        }
    }

    for (g, gt) in gts.iter().enumerate() {
        if !gt.dont_care && !gt_taken[g] {
            result.unmatched_gts.push(g);
        }
    }
    for d in 0..dets.len() {
        if !det_taken[d] {
            result.unmatched_dets.push(d);
        }
    }
    result
}

/// Stable identity of a ground-truth object across the seed and its
/// mutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GtId {
    /// Index into the seed frame's label list.
    Seed(usize),
    /// k-th object inserted by the campaign.
    Inserted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    ObjectMissing,
    FalseDetection,
    LocalizationError,
}

/// Key a fault so the same fault observed on seed and mutated frames
/// compares equal. Ground-truth-borne faults key on the object identity;
/// false detections key on the quantized box position (0.1 m / 1 px).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKey {
    Om(GtId),
    Le(GtId),
    Fd3d([i64; 3]),
    Fd2d([i64; 4]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub kind: FaultKind,
    pub key: FaultKey,
    /// Index of the ground-truth subject, for OM/LE.
    pub gt_index: Option<usize>,
    /// Index of the detection subject, for FD/LE.
    pub det_index: Option<usize>,
    /// Distance from the sensor to the subject; None when unknown (treated
    /// as beyond the max recognition distance by the fitness terms).
    pub distance: Option<f64>,
    /// Detection confidence, for detection-borne faults.
    pub score: Option<f64>,
    /// Pair IOU, for localization errors.
    pub iou: Option<f64>,
}

fn fd_key(det: &Detection) -> FaultKey {
    if let Some(b) = det.box3 {
        FaultKey::Fd3d([
            (b.center.x * 10.0).round() as i64,
            (b.center.y * 10.0).round() as i64,
            (b.center.z * 10.0).round() as i64,
        ])
    } else if let Some(b) = det.box2 {
        FaultKey::Fd2d([
            b.x_min.round() as i64,
            b.y_min.round() as i64,
            b.x_max.round() as i64,
            b.y_max.round() as i64,
        ])
    } else {
        FaultKey::Fd3d([i64::MAX, i64::MAX, i64::MAX])
    }
}

/// Classify faults from a match result:
/// - object missing: unmatched GT with zero IOU against every detection;
/// - false detection: unmatched detection with score >= 0.5, zero IOU
///   against every GT, and no overlap with a DontCare region;
/// - localization error: localization pair whose detection scores >= 0.5.
pub fn classify_faults(
    match_result: &MatchResult,
    gts: &[GroundTruth],
    gt_ids: &[GtId],
    dets: &[Detection],
    mode: MatchMode,
) -> Vec<FaultRecord> {
    debug_assert_eq!(gts.len(), gt_ids.len());
    let mut out = Vec::new();
    for &g in &match_result.unmatched_gts {
        let max_iou = dets
            .iter()
            .map(|d| pair_iou(&gts[g], d, mode))
            .fold(0.0f64, f64::max);
        if max_iou <= 0.0 {
            out.push(FaultRecord {
                kind: FaultKind::ObjectMissing,
                key: FaultKey::Om(gt_ids[g]),
                gt_index: Some(g),
                det_index: None,
                distance: Some(gts[g].box3.center.norm()),
                score: None,
                iou: None,
            });
        }
    }
    for &d in &match_result.unmatched_dets {
        let det = &dets[d];
        if det.score < FAULT_SCORE_THRESHOLD {
            continue;
        }
        let max_iou = gts
            .iter()
            .filter(|gt| !gt.dont_care)
            .map(|gt| pair_iou(gt, det, mode))
            .fold(0.0f64, f64::max);
        if max_iou > 0.0 {
            continue;
        }
        // Detections of DontCare regions (e.g. objects the insertion has
        // almost fully hidden) are excluded from evaluation, not penalized.
        let touches_dont_care = gts.iter().any(|gt| {
            gt.dont_care
                && (det.box2.is_some_and(|b| iou_2d(&gt.box2, &b) > 0.0)
                    || pair_iou(gt, det, mode) > 0.0)
        });
        if touches_dont_care {
            continue;
        }
        out.push(FaultRecord {
            kind: FaultKind::FalseDetection,
            key: fd_key(det),
            gt_index: None,
            det_index: Some(d),
            distance: det.distance(),
            score: Some(det.score),
            iou: None,
        });
    }
    for &(g, d, iou) in &match_result.localization_pairs {
        if dets[d].score < FAULT_SCORE_THRESHOLD {
            continue;
        }
        out.push(FaultRecord {
            kind: FaultKind::LocalizationError,
            key: FaultKey::Le(gt_ids[g]),
            gt_index: Some(g),
            det_index: Some(d),
            distance: Some(gts[g].box3.center.norm()),
            score: Some(dets[d].score),
            iou: Some(iou),
        });
    }
    out
}

/// Everything the campaign needs to remember about one SUT run on a frame.
#[derive(Debug, Clone)]
pub struct FrameEval {
    pub gts: Vec<GroundTruth>,
    pub gt_ids: Vec<GtId>,
    pub dets: Vec<Detection>,
    pub match_result: MatchResult,
    pub faults: Vec<FaultRecord>,
}

impl FrameEval {
    pub fn evaluate(
        gts: Vec<GroundTruth>,
        gt_ids: Vec<GtId>,
        dets: Vec<Detection>,
        tau: f64,
        mode: MatchMode,
    ) -> FrameEval {
        let match_result = match_detections(&gts, &dets, tau, mode);
        let faults = classify_faults(&match_result, &gts, &gt_ids, &dets, mode);
        FrameEval { gts, gt_ids, dets, match_result, faults }
    }
}

/// Average precision over detections pooled across frames, interpolated on
/// the forty equally spaced recall levels {1/40, ..., 1}.
pub fn average_precision(
    gts_per_frame: &[Vec<GroundTruth>],
    dets_per_frame: &[Vec<Detection>],
    tau: f64,
    mode: MatchMode,
) -> Result<f64, MetricsError> {
    assert_eq!(gts_per_frame.len(), dets_per_frame.len());
    let total_gt: usize = gts_per_frame
        .iter()
        .map(|gts| gts.iter().filter(|g| !g.dont_care).count())
        .sum();
    if total_gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    // Pool detections, sorted by descending score (stable tie-break).
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (f, dets) in dets_per_frame.iter().enumerate() {
        for d in 0..dets.len() {
            pool.push((f, d));
        }
    }
    pool.sort_by(|&(fa, da), &(fb, db)| {
        let sa = dets_per_frame[fa][da].score;
        let sb = dets_per_frame[fb][db].score;
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then((fa, da).cmp(&(fb, db)))
    });
    let mut gt_taken: Vec<Vec<bool>> = gts_per_frame.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(pool.len()); // (recall, precision)
    for (f, d) in pool {
        let det = &dets_per_frame[f][d];
        let gts = &gts_per_frame[f];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.dont_care || gt_taken[f][g] {
                continue;
            }
            let iou = pair_iou(gt, det, mode);
            if iou > tau && best.is_none_or(|(_, bi)| iou > bi) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                gt_taken[f][g] = true;
                tp += 1;
            }
            None => {
                // Detections covering DontCare regions are ignored.
                let dc = gts.iter().any(|gt| {
                    gt.dont_care && det.box2.is_some_and(|b| iou_2d(&gt.box2, &b) > tau)
                });
                if dc {
                    continue;
                }
                fp += 1;
            }
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    for k in 1..=40 {
        let r = k as f64 / 40.0;
        let rho = curve
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += rho;
    }
    Ok(ap / 40.0)
}

/// Metamorphic-relation verdict for one seed/mutant pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrVerdict {
    pub violated: bool,
    pub new_faults: Vec<FaultRecord>,
}

/// The insertion must not change correct predictions and the inserted
/// object must itself be detected; concretely, the mutated frame's fault
/// set must not contain faults absent from the seed's (keyed by kind plus
/// subject identity — inserted objects carry fresh identities, so an
/// undetected insertion always surfaces as a new object-missing fault).
pub fn check_mr(seed: &FrameEval, mutated: &FrameEval) -> Result<MrVerdict, MetricsError> {
    // The mutated ground truth must extend the seed's: same objects first
    // (DontCare promotion allowed), inserted objects after.
    if mutated.gts.len() < seed.gts.len() {
        return Err(MetricsError::InconsistentGt(mutated.gts.len()));
    }
    for i in 0..seed.gts.len() {
        if mutated.gt_ids[i] != seed.gt_ids[i] {
            return Err(MetricsError::InconsistentGt(i));
        }
        let (a, b) = (&seed.gts[i], &mutated.gts[i]);
        if a.box3.center.sub(&b.box3.center).norm() > 1e-9 || a.category != b.category {
            return Err(MetricsError::InconsistentGt(i));
        }
    }
    for id in &mutated.gt_ids[seed.gts.len()..] {
        if !matches!(id, GtId::Inserted(_)) {
            return Err(MetricsError::InconsistentGt(seed.gts.len()));
        }
    }
    let seed_keys: std::collections::HashSet<&FaultKey> = seed.faults.iter().map(|f| &f.key).collect();
    let new_faults: Vec<FaultRecord> = mutated
        .faults
        .iter()
        .filter(|f| !seed_keys.contains(&f.key))
        .cloned()
        .collect();
    Ok(MrVerdict { violated: !new_faults.is_empty(), new_faults })
}

/// Mean IOU between each inserted object's rendered 2D box and the bounds
/// of its projected 3D box corners (clamped to the image).
pub fn modality_consistency(
    items: &[(&Box3, &Box2, &Calibration)],
) -> Result<f64, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut total = 0.0;
    for (box3, box2, calib) in items {
        total += projected_box_iou(box3, box2, calib);
    }
    Ok(total / items.len() as f64)
}

/// IOU of one rendered 2D box against the projection of its 3D box.
pub fn projected_box_iou(box3: &Box3, box2: &Box2, calib: &Calibration) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut seen = false;
    for corner in box3_corners(box3) {
        let cam = lidar_to_cam(&corner, calib);
        let Ok((u, v, _)) = project_to_image(&cam, calib) else { continue };
        lo[0] = lo[0].min(u);
        lo[1] = lo[1].min(v);
        hi[0] = hi[0].max(u);
        hi[1] = hi[1].max(v);
        seen = true;
    }
    if !seen {
        return 0.0;
    }
    let Ok(projected) = Box2::new(lo[0], lo[1], hi[0], hi[1]) else { return 0.0 };
    let Ok(projected) = projected.clamp_to_image(calib.image_size.0, calib.image_size.1) else {
        return 0.0;
    };
    iou_2d(box2, &projected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn gt_at(x: f64, y: f64, category: &str) -> GroundTruth {
        GroundTruth {
            box3: Box3 { center: Point3::new(x, y, -0.9), length: 4.0, width: 1.8, height: 1.5, yaw: 0.0 },
            box2: Box2 { x_min: 10.0, y_min: 10.0, x_max: 20.0, y_max: 20.0 },
            category: category.into(),
            dont_care: false,
        }
    }

    fn det_at(x: f64, y: f64, score: f64) -> Detection {
        Detection::new3d(
            Box3 { center: Point3::new(x, y, -0.9), length: 4.0, width: 1.8, height: 1.5, yaw: 0.0 },
            None,
            "Car",
            score,
        )
    }

    fn seed_ids(n: usize) -> Vec<GtId> {
        (0..n).map(GtId::Seed).collect()
    }

    #[test]
    fn high_iou_pair_matches() {
        let gts = vec![gt_at(10.0, 0.0, "Car")];
        let dets = vec![det_at(10.1, 0.0, 0.9)];
        let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
        assert_eq!(m.pairs.len(), 1);
        assert!(m.unmatched_gts.is_empty());
        assert!(m.unmatched_dets.is_empty());
    }

    #[test]
    fn zero_iou_leaves_both_unmatched() {
        let gts = vec![gt_at(10.0, 0.0, "Car")];
        let dets = vec![det_at(30.0, 5.0, 0.9)];
        let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_gts, vec![0]);
        assert_eq!(m.unmatched_dets, vec![0]);
        let faults = classify_faults(&m, &gts, &seed_ids(1), &dets, MatchMode::Mode3d);
        assert_eq!(faults.len(), 2);
        assert!(faults.iter().any(|f| f.kind == FaultKind::ObjectMissing));
        assert!(faults.iter().any(|f| f.kind == FaultKind::FalseDetection));
    }

    #[test]
    fn perfect_set_has_no_faults() {
        let gts = vec![gt_at(10.0, 0.0, "Car"), gt_at(20.0, 3.0, "Car")];
        let dets = vec![det_at(10.0, 0.0, 0.9), det_at(20.0, 3.0, 0.8)];
        let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
        assert!(classify_faults(&m, &gts, &seed_ids(2), &dets, MatchMode::Mode3d).is_empty());
    }

    #[test]
    fn empty_detections_all_object_missing() {
        let gts = vec![gt_at(10.0, 0.0, "Car"), gt_at(20.0, 3.0, "Car"), gt_at(30.0, -3.0, "Car")];
        let m = match_detections(&gts, &[], 0.5, MatchMode::Mode3d);
        let faults = classify_faults(&m, &gts, &seed_ids(3), &[], MatchMode::Mode3d);
        assert_eq!(faults.len(), 3);
        assert!(faults.iter().all(|f| f.kind == FaultKind::ObjectMissing));
    }

    #[test]
    fn partial_overlap_is_single_localization_error() {
        let gts = vec![gt_at(10.0, 0.0, "Car")];
        // Offset enough for IOU in (0, 0.5].
        let dets = vec![det_at(12.0, 0.4, 0.8)];
        let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
        assert!(m.pairs.is_empty());
        assert_eq!(m.localization_pairs.len(), 1);
        let faults = classify_faults(&m, &gts, &seed_ids(1), &dets, MatchMode::Mode3d);
        assert_eq!(faults.len(), 1);
        assert_eq!(faults[0].kind, FaultKind::LocalizationError);
    }

    #[test]
    fn low_score_detections_do_not_count_as_faults() {
        let gts = vec![gt_at(10.0, 0.0, "Car")];
        let dets = vec![det_at(40.0, 5.0, 0.3)];
        let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
        let faults = classify_faults(&m, &gts, &seed_ids(1), &dets, MatchMode::Mode3d);
        // The unmatched low-score det is not an FD; the GT still counts OM.
        assert_eq!(faults.len(), 1);
        assert_eq!(faults[0].kind, FaultKind::ObjectMissing);
    }

    #[test]
    fn dont_care_regions_absorb_detections() {
        let mut dc = gt_at(10.0, 0.0, "DontCare");
        dc.dont_care = true;
        let gts = vec![dc];
        let dets = vec![det_at(10.0, 0.0, 0.9)];
        let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
        // DontCare is excluded from matching, and the det overlapping it is
        // not a false detection.
        assert!(m.pairs.is_empty());
        let faults = classify_faults(&m, &gts, &seed_ids(1), &dets, MatchMode::Mode3d);
        assert!(faults.is_empty());
    }

    #[test]
    fn fault_partition_properties() {
        let mut rng = substream(0xAB, 0, 0, 0);
        for _ in 0..100 {
            let gts: Vec<GroundTruth> = (0..5)
                .map(|_| gt_at(rng.random_range(5.0..40.0), rng.random_range(-8.0..8.0), "Car"))
                .collect();
            let dets: Vec<Detection> = (0..5)
                .map(|_| {
                    det_at(
                        rng.random_range(5.0..40.0),
                        rng.random_range(-8.0..8.0),
                        rng.random_range(0.5..1.0),
                    )
                })
                .collect();
            let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
            let faults = classify_faults(&m, &gts, &seed_ids(5), &dets, MatchMode::Mode3d);
            let matched_gts: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
            let matched_dets: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
            let loc_dets: Vec<usize> = m.localization_pairs.iter().map(|p| p.1).collect();
            for f in &faults {
                match f.kind {
                    FaultKind::ObjectMissing => {
                        assert!(!matched_gts.contains(&f.gt_index.unwrap()));
                    }
                    FaultKind::FalseDetection => {
                        let d = f.det_index.unwrap();
                        assert!(!matched_dets.contains(&d));
                        assert!(!loc_dets.contains(&d));
                    }
                    FaultKind::LocalizationError => {}
                }
            }
        }
    }

    /// Exhaustive two-stage assignment: maximize matched count then total
    /// IOU among IOU > tau pairs, then the same among 0 < IOU <= tau
    /// leftovers. Faults derive from the optimal sets.
    fn oracle_faults(
        gts: &[GroundTruth],
        dets: &[Detection],
        tau: f64,
        mode: MatchMode,
    ) -> Vec<(FaultKind, usize)> {
        let iou = |g: usize, d: usize| pair_iou(&gts[g], &dets[d], mode);
        fn best_assignment(
            edges: &[(usize, usize, f64)],
            n_g: usize,
            n_d: usize,
        ) -> Vec<(usize, usize, f64)> {
            // Enumerate all matchings over the edge list (tiny instances).
            fn rec(
                edges: &[(usize, usize, f64)],
                k: usize,
                g_used: &mut Vec<bool>,
                d_used: &mut Vec<bool>,
                current: &mut Vec<(usize, usize, f64)>,
                best: &mut (usize, f64, Vec<(usize, usize, f64)>),
            ) {
                if k == edges.len() {
                    let total: f64 = current.iter().map(|e| e.2).sum();
                    if current.len() > best.0 || (current.len() == best.0 && total > best.1) {
                        *best = (current.len(), total, current.clone());
                    }
                    return;
                }
                let (g, d, w) = edges[k];
                if !g_used[g] && !d_used[d] {
                    g_used[g] = true;
                    d_used[d] = true;
                    current.push((g, d, w));
                    rec(edges, k + 1, g_used, d_used, current, best);
                    current.pop();
                    g_used[g] = false;
                    d_used[d] = false;
                }
                rec(edges, k + 1, g_used, d_used, current, best);
            }
            let mut best = (0usize, 0.0f64, Vec::new());
            rec(
                edges,
                0,
                &mut vec![false; n_g],
                &mut vec![false; n_d],
                &mut Vec::new(),
                &mut best,
            );
            best.2
        }
        let strong: Vec<(usize, usize, f64)> = (0..gts.len())
            .flat_map(|g| (0..dets.len()).map(move |d| (g, d)))
            .filter(|&(g, _)| !gts[g].dont_care)
            .map(|(g, d)| (g, d, iou(g, d)))
            .filter(|&(_, _, w)| w > tau)
            .collect();
        let matched = best_assignment(&strong, gts.len(), dets.len());
        let g_matched: Vec<bool> = {
            let mut v = vec![false; gts.len()];
            for &(g, _, _) in &matched {
                v[g] = true;
            }
            v
        };
        let d_matched: Vec<bool> = {
            let mut v = vec![false; dets.len()];
            for &(_, d, _) in &matched {
                v[d] = true;
            }
            v
        };
        let weak: Vec<(usize, usize, f64)> = (0..gts.len())
            .flat_map(|g| (0..dets.len()).map(move |d| (g, d)))
            .filter(|&(g, d)| !gts[g].dont_care && !g_matched[g] && !d_matched[d])
            .map(|(g, d)| (g, d, iou(g, d)))
            .filter(|&(_, _, w)| w > 0.0 && w <= tau)
            .collect();
        let loc = best_assignment(&weak, gts.len(), dets.len());

        let mut faults = Vec::new();
        for g in 0..gts.len() {
            if gts[g].dont_care || g_matched[g] || loc.iter().any(|&(lg, _, _)| lg == g) {
                continue;
            }
            let max = (0..dets.len()).map(|d| iou(g, d)).fold(0.0f64, f64::max);
            if max <= 0.0 {
                faults.push((FaultKind::ObjectMissing, g));
            }
        }
        for d in 0..dets.len() {
            if d_matched[d] || loc.iter().any(|&(_, ld, _)| ld == d) || dets[d].score < 0.5 {
                continue;
            }
            let max = (0..gts.len())
                .filter(|&g| !gts[g].dont_care)
                .map(|g| iou(g, d))
                .fold(0.0f64, f64::max);
            if max <= 0.0 {
                faults.push((FaultKind::FalseDetection, d));
            }
        }
        for &(g, _, _) in &loc {
            faults.push((FaultKind::LocalizationError, g));
        }
        faults
    }

    #[test]
    fn classification_matches_assignment_oracle_on_random_instances() {
        let mut rng = substream(0x5A, 1, 2, 3);
        let mut checked = 0;
        for _ in 0..200 {
            let gts: Vec<GroundTruth> = (0..5)
                .map(|_| gt_at(rng.random_range(5.0..45.0), rng.random_range(-10.0..10.0), "Car"))
                .collect();
            let dets: Vec<Detection> = (0..5)
                .map(|_| {
                    det_at(
                        rng.random_range(5.0..45.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(0.5..1.0),
                    )
                })
                .collect();
            let m = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
            let got: Vec<(FaultKind, usize)> = classify_faults(&m, &gts, &seed_ids(5), &dets, MatchMode::Mode3d)
                .iter()
                .map(|f| match f.kind {
                    FaultKind::FalseDetection => (f.kind, f.det_index.unwrap()),
                    _ => (f.kind, f.gt_index.unwrap()),
                })
                .collect();
            let mut want = oracle_faults(&gts, &dets, 0.5, MatchMode::Mode3d);
            let mut got_sorted: Vec<(u8, usize)> = got
                .iter()
                .map(|(k, i)| {
                    (
                        match k {
                            FaultKind::ObjectMissing => 0u8,
                            FaultKind::FalseDetection => 1,
                            FaultKind::LocalizationError => 2,
                        },
                        *i,
                    )
                })
                .collect();
            got_sorted.sort_unstable();
            let mut want_sorted: Vec<(u8, usize)> = want
                .drain(..)
                .map(|(k, i)| {
                    (
                        match k {
                            FaultKind::ObjectMissing => 0u8,
                            FaultKind::FalseDetection => 1,
                            FaultKind::LocalizationError => 2,
                        },
                        i,
                    )
                })
                .collect();
            want_sorted.sort_unstable();
            assert_eq!(got_sorted, want_sorted);
            checked += 1;
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn ap_single_perfect_detection() {
        let gts = vec![vec![gt_at(10.0, 0.0, "Car")]];
        let dets = vec![vec![det_at(10.0, 0.0, 0.9)]];
        assert_eq!(average_precision(&gts, &dets, 0.5, MatchMode::Mode3d).unwrap(), 1.0);
    }

    #[test]
    fn ap_no_detections_is_zero() {
        let gts = vec![vec![gt_at(10.0, 0.0, "Car")]];
        let dets = vec![vec![]];
        assert_eq!(average_precision(&gts, &dets, 0.5, MatchMode::Mode3d).unwrap(), 0.0);
    }

    #[test]
    fn ap_errors_without_ground_truth() {
        let dets = vec![vec![det_at(10.0, 0.0, 0.9)]];
        assert!(matches!(
            average_precision(&[vec![]], &dets, 0.5, MatchMode::Mode3d),
            Err(MetricsError::NoGroundTruth)
        ));
    }

    /// Straight R40 sweep over an explicit (recall, precision) curve,
    /// written independently of `average_precision`.
    fn r40_oracle(curve: &[(f64, f64)]) -> f64 {
        let mut total = 0.0;
        for k in 1..=40 {
            let r = k as f64 / 40.0;
            let mut best = 0.0f64;
            for &(rec, prec) in curve {
                if rec >= r && prec > best {
                    best = prec;
                }
            }
            total += best;
        }
        total / 40.0
    }

    #[test]
    fn ap_three_gt_hand_case_matches_sweep_oracle() {
        // 3 GTs; detections: hit at 0.9, miss at 0.8, hit at 0.7.
        let gts = vec![vec![
            gt_at(10.0, 0.0, "Car"),
            gt_at(20.0, 4.0, "Car"),
            gt_at(30.0, -4.0, "Car"),
        ]];
        let dets = vec![vec![
            det_at(10.0, 0.0, 0.9),
            det_at(50.0, 8.0, 0.8),
            det_at(20.0, 4.0, 0.7),
        ]];
        let ap = average_precision(&gts, &dets, 0.5, MatchMode::Mode3d).unwrap();
        // Sweep: TP(p=1, r=1/3), FP(p=1/2, r=1/3), TP(p=2/3, r=2/3).
        let curve = [(1.0 / 3.0, 1.0), (1.0 / 3.0, 0.5), (2.0 / 3.0, 2.0 / 3.0)];
        let want = r40_oracle(&curve);
        assert_relative_eq!(ap, want, epsilon = 1e-12);
        // Thirteen R40 levels sit at/below recall 1/3 (rho = 1) and thirteen
        // more at/below 2/3 (rho = 2/3); the rest see no curve point.
        assert_relative_eq!(want, (13.0 + 13.0 * (2.0 / 3.0)) / 40.0, epsilon = 1e-12);
    }

    #[test]
    fn ap_monotonicity() {
        let gts = vec![vec![
            gt_at(10.0, 0.0, "Car"),
            gt_at(20.0, 4.0, "Car"),
            gt_at(30.0, -4.0, "Car"),
        ]];
        let dets = vec![vec![det_at(10.0, 0.0, 0.9), det_at(50.0, 8.0, 0.8)]];
        let base = average_precision(&gts, &dets, 0.5, MatchMode::Mode3d).unwrap();
        // Adding a correct detection never decreases AP.
        let mut more = dets.clone();
        more[0].push(det_at(20.0, 4.0, 0.7));
        let better = average_precision(&gts, &more, 0.5, MatchMode::Mode3d).unwrap();
        assert!(better >= base);
        // Adding a lowest-score zero-IOU detection never increases it.
        let mut worse = dets.clone();
        worse[0].push(det_at(70.0, -9.0, 0.01));
        let lower = average_precision(&gts, &worse, 0.5, MatchMode::Mode3d).unwrap();
        assert!(lower <= base);
    }

    #[test]
    fn matching_depends_only_on_score_order() {
        let gts = vec![gt_at(10.0, 0.0, "Car"), gt_at(20.0, 4.0, "Car")];
        let dets = vec![det_at(10.0, 0.2, 0.9), det_at(20.0, 4.2, 0.7), det_at(40.0, -5.0, 0.6)];
        let a = match_detections(&gts, &dets, 0.5, MatchMode::Mode3d);
        // Strictly monotone score transform preserving the 0.5 threshold.
        let rescaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: 0.5 + (d.score - 0.5) * 0.9, ..d.clone() })
            .collect();
        let b = match_detections(&gts, &rescaled, 0.5, MatchMode::Mode3d);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.localization_pairs, b.localization_pairs);
        let fa = classify_faults(&a, &gts, &seed_ids(2), &dets, MatchMode::Mode3d);
        let fb = classify_faults(&b, &gts, &seed_ids(2), &rescaled, MatchMode::Mode3d);
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(fb.iter()) {
            assert_eq!(x.kind, y.kind);
            assert_eq!(x.key, y.key);
        }
    }

    fn eval(gts: Vec<GroundTruth>, ids: Vec<GtId>, dets: Vec<Detection>) -> FrameEval {
        FrameEval::evaluate(gts, ids, dets, 0.5, MatchMode::Mode3d)
    }

    #[test]
    fn mr_not_violated_when_all_detected() {
        let seed = eval(vec![gt_at(10.0, 0.0, "Car")], seed_ids(1), vec![det_at(10.0, 0.0, 0.9)]);
        let mutated = eval(
            vec![gt_at(10.0, 0.0, "Car"), gt_at(20.0, 4.0, "Car")],
            vec![GtId::Seed(0), GtId::Inserted(0)],
            vec![det_at(10.0, 0.0, 0.9), det_at(20.0, 4.0, 0.85)],
        );
        let verdict = check_mr(&seed, &mutated).unwrap();
        assert!(!verdict.violated);
        assert!(verdict.new_faults.is_empty());
    }

    #[test]
    fn mr_violated_by_undetected_insertion() {
        let seed = eval(vec![gt_at(10.0, 0.0, "Car")], seed_ids(1), vec![det_at(10.0, 0.0, 0.9)]);
        let mutated = eval(
            vec![gt_at(10.0, 0.0, "Car"), gt_at(20.0, 4.0, "Car")],
            vec![GtId::Seed(0), GtId::Inserted(0)],
            vec![det_at(10.0, 0.0, 0.9)],
        );
        let verdict = check_mr(&seed, &mutated).unwrap();
        assert!(verdict.violated);
        assert_eq!(verdict.new_faults.len(), 1);
        assert_eq!(verdict.new_faults[0].kind, FaultKind::ObjectMissing);
        assert_eq!(verdict.new_faults[0].key, FaultKey::Om(GtId::Inserted(0)));
    }

    #[test]
    fn mr_persistent_seed_fault_not_counted() {
        // Seed already misses its GT; the same miss persists after insertion.
        let seed = eval(vec![gt_at(10.0, 0.0, "Car")], seed_ids(1), vec![]);
        assert_eq!(seed.faults.len(), 1);
        let mutated = eval(
            vec![gt_at(10.0, 0.0, "Car"), gt_at(20.0, 4.0, "Car")],
            vec![GtId::Seed(0), GtId::Inserted(0)],
            vec![det_at(20.0, 4.0, 0.9)],
        );
        let verdict = check_mr(&seed, &mutated).unwrap();
        assert!(!verdict.violated, "the old OM persists, the insertion was detected");
    }

    #[test]
    fn mr_reflexive_on_identical_results() {
        let seed = eval(vec![gt_at(10.0, 0.0, "Car")], seed_ids(1), vec![det_at(40.0, 5.0, 0.9)]);
        let verdict = check_mr(&seed, &seed.clone()).unwrap();
        assert!(!verdict.violated);
    }

    #[test]
    fn mr_rejects_inconsistent_gt() {
        let seed = eval(vec![gt_at(10.0, 0.0, "Car")], seed_ids(1), vec![]);
        let mutated = eval(vec![gt_at(11.0, 0.0, "Car")], seed_ids(1), vec![]);
        assert!(matches!(check_mr(&seed, &mutated), Err(MetricsError::InconsistentGt(0))));
    }

    #[test]
    fn mc_exact_projection_scores_one() {
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360));
        // A box straight ahead in the camera frame (identity extrinsics
        // mean LiDAR frame == camera frame here; keep z positive).
        let box3 = Box3 { center: Point3::new(0.0, 0.0, 15.0), length: 2.0, width: 1.5, height: 1.2, yaw: 0.3 };
        let box2 = {
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for c in box3_corners(&box3) {
                let (u, v, _) = project_to_image(&lidar_to_cam(&c, &calib), &calib).unwrap();
                lo[0] = lo[0].min(u);
                lo[1] = lo[1].min(v);
                hi[0] = hi[0].max(u);
                hi[1] = hi[1].max(v);
            }
            Box2 { x_min: lo[0], y_min: lo[1], x_max: hi[0], y_max: hi[1] }
        };
        let mc = modality_consistency(&[(&box3, &box2, &calib)]).unwrap();
        assert_relative_eq!(mc, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mc_disjoint_scores_zero() {
        let calib = Calibration::simple_pinhole(700.0, 700.0, 600.0, 180.0, (1200, 360));
        let box3 = Box3 { center: Point3::new(0.0, 0.0, 15.0), length: 2.0, width: 1.5, height: 1.2, yaw: 0.0 };
        let far_box2 = Box2 { x_min: 0.0, y_min: 0.0, x_max: 5.0, y_max: 5.0 };
        let mc = modality_consistency(&[(&box3, &far_box2, &calib)]).unwrap();
        assert_eq!(mc, 0.0);
        assert!(matches!(modality_consistency(&[]), Err(MetricsError::EmptySet)));
    }
}
