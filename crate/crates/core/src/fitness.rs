//! Error-revealing fitness: distance-weighted object-missing score,
//! confidence-and-distance-weighted false-detection score, worst
//! localization IOU gap, and their weighted sum.

use crate::metrics::{FaultKind, FaultRecord, FrameEval, MatchResult};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("weights must be non-negative and sum to 1 (got {0} + {1} + {2})")]
    BadWeights(f64, f64, f64),
    #[error("dis_max must be positive, got {0}")]
    BadDisMax(f64),
}

/// Weights and the distance normalizer for the fitness metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitnessConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Max recognition distance of the LiDAR, meters.
    pub dis_max: f64,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        FitnessConfig { alpha: 0.5, beta: 0.25, gamma: 0.25, dis_max: 80.0 }
    }
}

impl FitnessConfig {
    pub fn validate(&self) -> Result<(), FitnessError> {
        let sum = self.alpha + self.beta + self.gamma;
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(FitnessError::BadWeights(self.alpha, self.beta, self.gamma));
        }
        if !(self.dis_max > 0.0) {
            return Err(FitnessError::BadDisMax(self.dis_max));
        }
        Ok(())
    }

    /// The proximity weight 1 - min(dis, dis_max) / dis_max. Unknown
    /// distances count as beyond range (zero weight).
    fn proximity(&self, distance: Option<f64>) -> f64 {
        match distance {
            Some(d) => 1.0 - d.min(self.dis_max) / self.dis_max,
            None => 0.0,
        }
    }
}

/// Per-term breakdown of one frame's fitness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessBreakdown {
    pub f_om: f64,
    pub f_fd: f64,
    pub f_le: f64,
    pub total: f64,
}

/// Sum of proximity weights over object-missing faults.
pub fn f_om(faults: &[FaultRecord], cfg: &FitnessConfig) -> f64 {
    faults
        .iter()
        .filter(|f| f.kind == FaultKind::ObjectMissing)
        .map(|f| cfg.proximity(f.distance))
        .sum()
}

/// Sum of proximity-times-confidence over false-detection faults.
pub fn f_fd(faults: &[FaultRecord], cfg: &FitnessConfig) -> f64 {
    faults
        .iter()
        .filter(|f| f.kind == FaultKind::FalseDetection)
        .map(|f| cfg.proximity(f.distance) * f.score.unwrap_or(0.0))
        .sum()
}

/// Worst localization gap: max over localization pairs of 1 - IOU, zero
/// when no pair exists.
pub fn f_le(match_result: &MatchResult) -> f64 {
    match_result
        .localization_pairs
        .iter()
        .map(|&(_, _, iou)| 1.0 - iou)
        .fold(0.0, f64::max)
}

/// Weighted sum alpha * F_OM + beta * F_FD + gamma * F_LE.
pub fn fitness(eval: &FrameEval, cfg: &FitnessConfig) -> FitnessBreakdown {
    let om = f_om(&eval.faults, cfg);
    let fd = f_fd(&eval.faults, cfg);
    let le = f_le(&eval.match_result);
    FitnessBreakdown { f_om: om, f_fd: fd, f_le: le, total: cfg.alpha * om + cfg.beta * fd + cfg.gamma * le }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Box2, Box3, GroundTruth, Point3};
    use crate::metrics::{Detection, FrameEval, GtId, MatchMode};
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn gt_at(x: f64, y: f64) -> GroundTruth {
        GroundTruth {
            box3: Box3 { center: Point3::new(x, y, 0.0), length: 4.0, width: 1.8, height: 1.5, yaw: 0.0 },
            box2: Box2 { x_min: 0.0, y_min: 0.0, x_max: 10.0, y_max: 10.0 },
            category: "Car".into(),
            dont_care: false,
        }
    }

    fn det_at(x: f64, y: f64, score: f64) -> Detection {
        Detection::new3d(
            Box3 { center: Point3::new(x, y, 0.0), length: 4.0, width: 1.8, height: 1.5, yaw: 0.0 },
            None,
            "Car",
            score,
        )
    }

    fn eval(gts: Vec<GroundTruth>, dets: Vec<Detection>) -> FrameEval {
        let ids = (0..gts.len()).map(GtId::Seed).collect();
        FrameEval::evaluate(gts, ids, dets, 0.5, MatchMode::Mode3d)
    }

    #[test]
    fn om_at_half_range_scores_half() {
        let e = eval(vec![gt_at(40.0, 0.0)], vec![]);
        let cfg = FitnessConfig::default();
        assert_relative_eq!(f_om(&e.faults, &cfg), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn om_beyond_range_scores_zero() {
        let e = eval(vec![gt_at(90.0, 0.0)], vec![]);
        let cfg = FitnessConfig::default();
        assert_eq!(f_om(&e.faults, &cfg), 0.0);
        let clean = eval(vec![gt_at(10.0, 0.0)], vec![det_at(10.0, 0.0, 0.9)]);
        assert_eq!(f_om(&clean.faults, &cfg), 0.0);
    }

    #[test]
    fn fd_weighting_cases() {
        let cfg = FitnessConfig::default();
        // FD at distance ~0 with score 1 contributes ~1.
        let e = eval(vec![gt_at(70.0, 30.0)], vec![det_at(0.1, 0.0, 1.0)]);
        assert!(f_fd(&e.faults, &cfg) > 0.99);
        // FD at 40 m with score 0.6 contributes 0.3.
        let e = eval(vec![gt_at(70.0, 30.0)], vec![det_at(40.0, 0.0, 0.6)]);
        assert_relative_eq!(f_fd(&e.faults, &cfg), 0.3, epsilon = 1e-12);
        // No FD, no score.
        let e = eval(vec![gt_at(10.0, 0.0)], vec![det_at(10.0, 0.0, 0.9)]);
        assert_eq!(f_fd(&e.faults, &cfg), 0.0);
    }

    #[test]
    fn le_takes_worst_pair() {
        // Single pair with IOU 0.4 -> 0.6.
        let e = eval(vec![gt_at(10.0, 0.0)], vec![det_at(11.65, 0.0, 0.9)]);
        assert_eq!(e.match_result.localization_pairs.len(), 1);
        let iou = e.match_result.localization_pairs[0].2;
        assert_relative_eq!(f_le(&e.match_result), 1.0 - iou, epsilon = 1e-12);
        // Two pairs: the worse one wins.
        let e = eval(
            vec![gt_at(10.0, 0.0), gt_at(30.0, 5.0)],
            vec![det_at(11.5, 0.0, 0.9), det_at(32.5, 5.4, 0.8)],
        );
        assert_eq!(e.match_result.localization_pairs.len(), 2);
        let worst = e
            .match_result
            .localization_pairs
            .iter()
            .map(|p| 1.0 - p.2)
            .fold(0.0f64, f64::max);
        assert_eq!(f_le(&e.match_result), worst);
        // No pairs at all: zero by the empty-max convention.
        let e = eval(vec![gt_at(10.0, 0.0)], vec![det_at(10.0, 0.0, 0.9)]);
        assert_eq!(f_le(&e.match_result), 0.0);
    }

    #[test]
    fn weighted_sum_hand_case() {
        let cfg = FitnessConfig::default();
        // (f_om, f_fd, f_le) = (0.5, 0.3, 0.6) -> 0.475 with (.5, .25, .25).
        let total = cfg.alpha * 0.5 + cfg.beta * 0.3 + cfg.gamma * 0.6;
        assert_relative_eq!(total, 0.475, epsilon = 1e-15);
        // Perfect frame scores zero.
        let e = eval(vec![gt_at(10.0, 0.0)], vec![det_at(10.0, 0.0, 0.9)]);
        assert_eq!(fitness(&e, &cfg).total, 0.0);
        // Empty results score zero.
        let empty = eval(vec![], vec![]);
        assert_eq!(fitness(&empty, &cfg).total, 0.0);
    }

    /// Independent transcription of the four formulas, computed straight
    /// from the match result without the FaultRecord plumbing.
    fn fitness_oracle(e: &FrameEval, cfg: &FitnessConfig) -> f64 {
        let w = |d: f64| 1.0 - d.min(cfg.dis_max) / cfg.dis_max;
        let mut om = 0.0;
        for &g in &e.match_result.unmatched_gts {
            let any_overlap = e.dets.iter().any(|det| {
                det.box3.is_some_and(|b| crate::geom::iou_3d(&e.gts[g].box3, &b) > 0.0)
            });
            if !any_overlap {
                om += w(e.gts[g].box3.center.norm());
            }
        }
        let mut fd = 0.0;
        for &d in &e.match_result.unmatched_dets {
            if e.dets[d].score < 0.5 {
                continue;
            }
            let any_overlap = e.gts.iter().any(|gt| {
                e.dets[d].box3.is_some_and(|b| crate::geom::iou_3d(&gt.box3, &b) > 0.0)
            });
            if !any_overlap {
                fd += w(e.dets[d].box3.unwrap().center.norm()) * e.dets[d].score;
            }
        }
        let le = e
            .match_result
            .localization_pairs
            .iter()
            .map(|p| 1.0 - p.2)
            .fold(0.0f64, f64::max);
        cfg.alpha * om + cfg.beta * fd + cfg.gamma * le
    }

    #[test]
    fn matches_transcription_oracle_on_random_results() {
        let cfg = FitnessConfig::default();
        let mut rng = substream(0xF1, 0, 0, 0);
        for _ in 0..50 {
            let gts: Vec<GroundTruth> = (0..rng.random_range(1..6))
                .map(|_| gt_at(rng.random_range(5.0..70.0), rng.random_range(-10.0..10.0)))
                .collect();
            let dets: Vec<Detection> = (0..rng.random_range(0..6))
                .map(|_| {
                    det_at(
                        rng.random_range(5.0..70.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(0.3..1.0),
                    )
                })
                .collect();
            let e = eval(gts, dets);
            let got = fitness(&e, &cfg).total;
            let want = fitness_oracle(&e, &cfg);
            assert!((got - want).abs() < 1e-12, "got {got} want {want}");
        }
    }

    #[test]
    fn total_monotone_in_added_faults() {
        let cfg = FitnessConfig::default();
        let base = eval(vec![gt_at(20.0, 0.0)], vec![]);
        let more = eval(vec![gt_at(20.0, 0.0), gt_at(35.0, 4.0)], vec![]);
        assert!(fitness(&more, &cfg).total >= fitness(&base, &cfg).total);
    }

    #[test]
    fn distance_scaling_invariance() {
        // Scaling all distances and dis_max by the same factor leaves the
        // OM/FD terms unchanged (they depend only on the ratio).
        let cfg1 = FitnessConfig::default();
        let cfg2 = FitnessConfig { dis_max: 160.0, ..cfg1 };
        let e1 = eval(vec![gt_at(40.0, 0.0)], vec![]);
        let e2 = eval(vec![gt_at(80.0, 0.0)], vec![]);
        assert_relative_eq!(f_om(&e1.faults, &cfg1), f_om(&e2.faults, &cfg2), epsilon = 1e-12);
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let cfg = FitnessConfig::default();
        let e = eval(
            vec![gt_at(20.0, 0.0), gt_at(45.0, -5.0)],
            vec![det_at(21.6, 0.2, 0.8), det_at(60.0, 10.0, 0.7)],
        );
        let b = fitness(&e, &cfg);
        assert_relative_eq!(
            b.total,
            cfg.alpha * b.f_om + cfg.beta * b.f_fd + cfg.gamma * b.f_le,
            epsilon = 1e-9
        );
        assert!(b.f_le >= 0.0 && b.f_le <= 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(FitnessConfig::default().validate().is_ok());
        assert!(FitnessConfig { alpha: 0.6, ..Default::default() }.validate().is_err());
        assert!(FitnessConfig { dis_max: 0.0, ..Default::default() }.validate().is_err());
    }
}
