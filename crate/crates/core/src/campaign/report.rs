//! Campaign outputs: the per-seed report, corpus totals, and the generated
//! test manifest. Everything here serializes deterministically (struct
//! field order, no maps with unstable iteration).

use crate::geom::{Box2, Box3, Pose3};
use crate::metrics::{FaultKind, FaultRecord};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultCounts {
    pub object_missing: u32,
    pub false_detection: u32,
    pub localization_error: u32,
}

impl FaultCounts {
    pub fn tally(faults: &[FaultRecord]) -> FaultCounts {
        let mut c = FaultCounts::default();
        for f in faults {
            c.bump(f.kind);
        }
        c
    }

    pub fn bump(&mut self, kind: FaultKind) {
        match kind {
            FaultKind::ObjectMissing => self.object_missing += 1,
            FaultKind::FalseDetection => self.false_detection += 1,
            FaultKind::LocalizationError => self.localization_error += 1,
        }
    }

    pub fn add(&mut self, o: &FaultCounts) {
        self.object_missing += o.object_missing;
        self.false_detection += o.false_detection;
        self.localization_error += o.localization_error;
    }

    pub fn total(&self) -> u32 {
        self.object_missing + self.false_detection + self.localization_error
    }
}

/// Why a trial ended the way it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Accepted,
    RejectedByFitness,
    Collision,
    PoseExhausted,
    /// Too few LiDAR returns on the inserted object.
    NoLidarReturn,
    /// Zero winning pixels (fully occluded or outside the camera FOV).
    NotVisible,
    /// Visible fraction below the configured minimum.
    MostlyOccluded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub insertion_index: u32,
    pub trial: u32,
    pub outcome: TrialOutcome,
    /// Fitness of the mutated frame, when the trial got that far.
    pub fitness: Option<f64>,
}

/// Provenance of one accepted insertion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub insertion_index: u32,
    pub trial: u32,
    pub object_name: String,
    pub category: String,
    pub pose: Pose3,
    /// World-frame bounds; equals the object's canonical bounds under the
    /// pose, exactly.
    pub box3: Box3,
    /// Rendered 2D ground-truth box.
    pub box2: Box2,
    /// (root seed, seed-id hash, insertion, trial) of the deciding stream.
    pub rng_stream: [u64; 4],
    pub fitness_total: f64,
    pub mr_violated: bool,
    pub new_faults: Vec<FaultRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum SeedStatus {
    /// At least one insertion succeeded; the frame was persisted.
    Generated,
    /// Every insertion attempt failed; nothing persisted.
    NoInsertion,
    /// No road surface (or no ground) in the seed.
    Unusable(String),
    /// The SUT failed on this seed; skipped.
    SutFailure(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed_id: String,
    pub status: SeedStatus,
    /// Fitness of the unmodified seed.
    pub fitness_init: f64,
    /// Fitness after each accepted insertion, in order.
    pub fitness_trace: Vec<f64>,
    pub trials: Vec<TrialRecord>,
    pub insertions: Vec<InsertionRecord>,
    /// Fault counts on the final generated frame.
    pub final_faults_3d: FaultCounts,
    pub final_faults_2d: FaultCounts,
    /// Faults on the final frame absent from the seed frame.
    pub new_faults: FaultCounts,
    pub mr_violations: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CampaignTotals {
    pub seeds_total: u32,
    pub seeds_generated: u32,
    pub seeds_unusable: u32,
    pub sut_failures: u32,
    pub inserted_objects: u32,
    pub mr_violations: u32,
    /// AP on seed frames against their own labels.
    pub ap_before: Option<f64>,
    /// AP on the generated frames against the extended labels.
    pub ap_after: Option<f64>,
    pub faults_3d: FaultCounts,
    pub faults_2d: FaultCounts,
    pub new_faults: FaultCounts,
    /// Mean IOU between rendered and projected boxes of all insertions.
    pub modality_consistency: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignReport {
    pub guidance: super::config::Guidance,
    pub rng_seed: u64,
    pub n_insertions: u32,
    pub try_num: u32,
    pub tau: f64,
    pub sut_name: String,
    pub seeds: Vec<SeedReport>,
    pub totals: CampaignTotals,
}

impl CampaignReport {
    /// Totals are a pure fold of the per-seed records.
    pub fn recompute_totals(&self) -> CampaignTotals {
        let mut t = CampaignTotals {
            seeds_total: self.seeds.len() as u32,
            ap_before: self.totals.ap_before,
            ap_after: self.totals.ap_after,
            modality_consistency: self.totals.modality_consistency,
            ..Default::default()
        };
        for s in &self.seeds {
            match &s.status {
                SeedStatus::Generated => {
                    t.seeds_generated += 1;
                    t.faults_3d.add(&s.final_faults_3d);
                    t.faults_2d.add(&s.final_faults_2d);
                    t.new_faults.add(&s.new_faults);
                }
                SeedStatus::NoInsertion => {}
                SeedStatus::Unusable(_) => t.seeds_unusable += 1,
                SeedStatus::SutFailure(_) => t.sut_failures += 1,
            }
            t.inserted_objects += s.insertions.len() as u32;
            t.mr_violations += s.mr_violations;
        }
        t
    }
}

/// Entry for one generated frame in the corpus manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub seed_id: String,
    /// Directory of the persisted frame, relative to the manifest.
    pub path: String,
    pub insertions: Vec<InsertionRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub rng_seed: u64,
    pub frames: Vec<ManifestFrame>,
}
