//! The fitness-guided insertion campaign: iterate seeds, sample objects and
//! poses, simulate both sensors, invoke the system under test, keep
//! fitness-increasing mutants, and persist the generated corpus with its
//! report and manifest.

pub mod config;
pub mod report;
pub mod sut;

pub use config::{load_config, parse_config, BuiltinParams, CampaignConfig, ConfigError, Guidance, SutConfig};
pub use report::{
    CampaignReport, CampaignTotals, FaultCounts, InsertionRecord, Manifest, ManifestFrame,
    SeedReport, SeedStatus, TrialOutcome, TrialRecord,
};
pub use sut::{BuiltinDetector, ExternalSut, SutAdapter, SutError};

use crate::camera::{background_depth, render_insertions, CameraConfig};
use crate::fitness::fitness;
use crate::geom::{Box3, GroundTruth};
use crate::kitti::Frame;
use crate::lidar::{carve_occluded_background, generate_rays, merge_clouds, RaySet};
use crate::mesh::{load_mesh, LoadOptions, LoadedObject, ObjectInstance};
use crate::metrics::{
    average_precision, check_mr, modality_consistency, Detection, FrameEval, GtId, MatchMode,
};
use crate::pose::{check_collision, sample_pose, PoseError, SceneContext};
use crate::rng::{fnv1a, substream};
use rand::Rng;
use serde::Deserialize;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no seed frames found under {0}")]
    NoSeeds(std::path::PathBuf),
    #[error("no loadable objects under {0}")]
    NoObjects(std::path::PathBuf),
    #[error("object {0}: {1}")]
    Object(String, crate::mesh::MeshError),
    #[error(transparent)]
    Kitti(#[from] crate::kitti::KittiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("internal invariant broken: {0}")]
    Internal(String),
}

/// Per-category sidecar for the object database.
#[derive(Debug, Default, Deserialize)]
struct ObjectMeta {
    category: Option<String>,
    target_length: Option<f64>,
    #[serde(default)]
    palette: std::collections::BTreeMap<String, [f32; 3]>,
}

/// Load `objects/<category>/<name>.obj` (plus optional per-category
/// `meta.json`) into BVH-ready objects, sorted for determinism.
pub fn load_object_database(dir: &Path) -> Result<Vec<Arc<LoadedObject>>, CampaignError> {
    let mut out: Vec<Arc<LoadedObject>> = Vec::new();
    let mut cat_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cat_dirs.sort();
    for cat_dir in cat_dirs {
        let dir_name = cat_dir.file_name().and_then(|s| s.to_str()).unwrap_or("object").to_string();
        let meta: ObjectMeta = match std::fs::read_to_string(cat_dir.join("meta.json")) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| CampaignError::Internal(format!("bad meta.json in {dir_name}: {e}")))?,
            Err(_) => ObjectMeta::default(),
        };
        let category = meta.category.unwrap_or(dir_name);
        let opts = LoadOptions { target_length: meta.target_length, palette: meta.palette };
        let mut obj_files: Vec<std::path::PathBuf> = std::fs::read_dir(&cat_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "obj"))
            .collect();
        obj_files.sort();
        for path in obj_files {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("object").to_string();
            let text = std::fs::read_to_string(&path)?;
            let mesh = load_mesh(&text, &opts).map_err(|e| CampaignError::Object(name.clone(), e))?;
            out.push(Arc::new(LoadedObject::new(name, category.clone(), mesh)));
        }
    }
    if out.is_empty() {
        return Err(CampaignError::NoObjects(dir.to_path_buf()));
    }
    Ok(out)
}

/// Build the configured detector adapter.
pub fn make_sut(cfg: &CampaignConfig) -> Box<dyn SutAdapter> {
    match &cfg.sut {
        SutConfig::Builtin { params } => {
            Box::new(BuiltinDetector::new(*params, cfg.pose, cfg.rng_seed))
        }
        SutConfig::External { command, timeout_s } => Box::new(ExternalSut::new(
            command.clone(),
            std::time::Duration::from_secs_f64(*timeout_s),
        )),
    }
}

/// Median known background depth inside a 2D box, the distance fallback for
/// detectors that report no 3D geometry.
fn estimate_depth_in_box(frame: &Frame, det: &crate::geom::Box2, camera: &CameraConfig) -> Option<f64> {
    let depth = background_depth(frame, camera);
    let (w, h) = frame.calib.image_size;
    let x0 = det.x_min.floor().max(0.0) as u32;
    let y0 = det.y_min.floor().max(0.0) as u32;
    let x1 = (det.x_max.ceil() as u32).min(w);
    let y1 = (det.y_max.ceil() as u32).min(h);
    let mut depths: Vec<f64> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if let Some(d) = depth.get(x, y) {
                depths.push(d);
            }
        }
    }
    if depths.is_empty() {
        return None;
    }
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(depths[depths.len() / 2])
}

/// The evaluation subset: labels of the campaign category plus DontCare
/// regions, with their stable identities.
fn eval_subset(
    labels: &[GroundTruth],
    ids: &[GtId],
    category: &str,
) -> (Vec<GroundTruth>, Vec<GtId>) {
    let mut gts = Vec::new();
    let mut out_ids = Vec::new();
    for (gt, id) in labels.iter().zip(ids.iter()) {
        if gt.category == category || gt.dont_care {
            gts.push(gt.clone());
            out_ids.push(*id);
        }
    }
    (gts, out_ids)
}

struct SeedOutcome {
    report: SeedReport,
    generated: Option<GeneratedFrame>,
}

struct GeneratedFrame {
    frame: Frame,
    insertions: Vec<InsertionRecord>,
    seed_eval: FrameEval,
    final_eval: FrameEval,
}

struct SeedRunner<'a> {
    cfg: &'a CampaignConfig,
    objects: &'a [Arc<LoadedObject>],
    sut: &'a dyn SutAdapter,
    rays: &'a RaySet,
}

impl<'a> SeedRunner<'a> {
    fn detect_and_evaluate(
        &self,
        frame: &Frame,
        labels: &[GroundTruth],
        ids: &[GtId],
    ) -> Result<FrameEval, SutError> {
        let mut dets: Vec<Detection> = self
            .sut
            .detect(frame)?
            .into_iter()
            .filter(|d| d.category == self.cfg.category)
            .collect();
        if self.cfg.fitness_mode == MatchMode::Mode2d {
            for d in &mut dets {
                if d.box3.is_none() && d.distance_hint.is_none() {
                    if let Some(b) = d.box2 {
                        d.distance_hint = estimate_depth_in_box(frame, &b, &self.cfg.camera);
                    }
                }
            }
        }
        let (gts, gt_ids) = eval_subset(labels, ids, &self.cfg.category);
        Ok(FrameEval::evaluate(gts, gt_ids, dets, self.cfg.tau, self.cfg.fitness_mode))
    }

    fn run(&self, seed_id: &str) -> Result<SeedOutcome, CampaignError> {
        let mut report = SeedReport {
            seed_id: seed_id.to_string(),
            status: SeedStatus::NoInsertion,
            fitness_init: 0.0,
            fitness_trace: Vec::new(),
            trials: Vec::new(),
            insertions: Vec::new(),
            final_faults_3d: FaultCounts::default(),
            final_faults_2d: FaultCounts::default(),
            new_faults: FaultCounts::default(),
            mr_violations: 0,
        };
        let unusable = |mut report: SeedReport, reason: String| {
            report.status = SeedStatus::Unusable(reason);
            Ok(SeedOutcome { report, generated: None })
        };
        let frame = match Frame::load(&self.cfg.seeds_dir, seed_id) {
            Ok(f) => f,
            Err(e) => return unusable(report, e.to_string()),
        };
        let scene = match SceneContext::build(&frame.cloud, &self.cfg.pose) {
            Ok(s) => s,
            Err(e @ (PoseError::NoGround | PoseError::TooSparse)) => {
                return unusable(report, e.to_string());
            }
            Err(e) => return unusable(report, e.to_string()),
        };
        let seed_hash = fnv1a(seed_id.as_bytes());
        let root = self.cfg.rng_seed;

        let mut labels = frame.labels.clone();
        let mut label_ids: Vec<GtId> = (0..labels.len()).map(GtId::Seed).collect();

        let seed_eval = match self.detect_and_evaluate(&frame, &labels, &label_ids) {
            Ok(e) => e,
            Err(e) => {
                report.status = SeedStatus::SutFailure(e.to_string());
                return Ok(SeedOutcome { report, generated: None });
            }
        };
        let mut fitness_gate = fitness(&seed_eval, &self.cfg.fitness).total;
        report.fitness_init = fitness_gate;

        let mut current = frame;
        let mut prev_eval = seed_eval.clone();
        let mut inserted = 0usize;

        'insertions: for i in 1..=self.cfg.n_insertions {
            let object = {
                let mut rng = substream(root, seed_hash, i as u64, 0);
                &self.objects[rng.random_range(0..self.objects.len())]
            };
            for trial in 1..=self.cfg.try_num {
                let mut rng = substream(root, seed_hash, i as u64, trial as u64);
                let mut record = |outcome, fitness| {
                    report.trials.push(TrialRecord {
                        insertion_index: i,
                        trial,
                        outcome,
                        fitness,
                    });
                };
                let candidate = match sample_pose(
                    &scene.surface,
                    &object.mesh.canonical_box(),
                    &mut rng,
                    &self.cfg.pose,
                ) {
                    Ok(c) => c,
                    Err(PoseError::Exhausted(_)) => {
                        record(TrialOutcome::PoseExhausted, None);
                        continue;
                    }
                    Err(e) => return Err(CampaignError::Internal(e.to_string())),
                };
                let gt_boxes: Vec<Box3> = labels.iter().map(|l| l.box3).collect();
                if !check_collision(&candidate, &gt_boxes, &scene.non_ground, &self.cfg.pose)
                    .is_valid()
                {
                    record(TrialOutcome::Collision, None);
                    continue;
                }
                let instance = ObjectInstance::new(object.clone(), candidate.pose);
                let sim_points = crate::lidar::simulate_object_points(
                    self.rays,
                    std::slice::from_ref(&instance),
                    &self.cfg.lidar,
                    &mut rng,
                );
                if sim_points.len() < self.cfg.min_object_points {
                    record(TrialOutcome::NoLidarReturn, None);
                    continue;
                }
                let render = render_insertions(&current, std::slice::from_ref(&instance), &self.cfg.camera);
                let Some(box2) = render.box2[0] else {
                    record(TrialOutcome::NotVisible, None);
                    continue;
                };
                let visible = render.masks[0].len() as f64 / render.drawn[0].max(1) as f64;
                if visible < self.cfg.min_visible_fraction {
                    record(TrialOutcome::MostlyOccluded, None);
                    continue;
                }
                let carved = carve_occluded_background(
                    &current.cloud,
                    std::slice::from_ref(&instance),
                    &self.cfg.lidar,
                );
                let merged = merge_clouds(&carved, &sim_points);

                let mut new_labels = labels.clone();
                for (k, promote) in render.dont_care.iter().enumerate() {
                    if *promote {
                        new_labels[k].dont_care = true;
                    }
                }
                new_labels.push(GroundTruth {
                    box3: instance.box3,
                    box2,
                    category: self.cfg.category.clone(),
                    dont_care: false,
                });
                let mut new_ids = label_ids.clone();
                new_ids.push(GtId::Inserted(inserted));

                let mutated = Frame {
                    id: current.id.clone(),
                    cloud: merged,
                    image: render.image,
                    calib: current.calib.clone(),
                    labels: new_labels.clone(),
                };
                let eval = match self.detect_and_evaluate(&mutated, &new_labels, &new_ids) {
                    Ok(e) => e,
                    Err(e) => {
                        report.status = SeedStatus::SutFailure(e.to_string());
                        return Ok(SeedOutcome { report, generated: None });
                    }
                };
                let score = fitness(&eval, &self.cfg.fitness);
                let accept = match self.cfg.guidance {
                    Guidance::Guided => score.total > fitness_gate,
                    Guidance::Random => true,
                };
                if !accept {
                    record(TrialOutcome::RejectedByFitness, Some(score.total));
                    continue;
                }
                record(TrialOutcome::Accepted, Some(score.total));
                let verdict = check_mr(&prev_eval, &eval)
                    .map_err(|e| CampaignError::Internal(format!("MR precondition: {e}")))?;
                if verdict.violated {
                    report.mr_violations += 1;
                }
                report.insertions.push(InsertionRecord {
                    insertion_index: i,
                    trial,
                    object_name: object.name.clone(),
                    category: object.category.clone(),
                    pose: candidate.pose,
                    box3: instance.box3,
                    box2,
                    rng_stream: [root, seed_hash, i as u64, trial as u64],
                    fitness_total: score.total,
                    mr_violated: verdict.violated,
                    new_faults: verdict.new_faults.clone(),
                });
                report.fitness_trace.push(score.total);
                current = mutated;
                labels = new_labels;
                label_ids = new_ids;
                prev_eval = eval;
                fitness_gate = score.total;
                inserted += 1;
                continue 'insertions;
            }
        }

        if inserted == 0 {
            return Ok(SeedOutcome { report, generated: None });
        }
        report.status = SeedStatus::Generated;
        // Fault counts on the final frame in both modes; the other mode is
        // re-matched from the same cached detections.
        let (final_3d, final_2d) = match self.cfg.fitness_mode {
            MatchMode::Mode3d => {
                let e2 = FrameEval::evaluate(
                    prev_eval.gts.clone(),
                    prev_eval.gt_ids.clone(),
                    prev_eval.dets.clone(),
                    self.cfg.tau,
                    MatchMode::Mode2d,
                );
                (FaultCounts::tally(&prev_eval.faults), FaultCounts::tally(&e2.faults))
            }
            MatchMode::Mode2d => {
                let e3 = FrameEval::evaluate(
                    prev_eval.gts.clone(),
                    prev_eval.gt_ids.clone(),
                    prev_eval.dets.clone(),
                    self.cfg.tau,
                    MatchMode::Mode3d,
                );
                (FaultCounts::tally(&e3.faults), FaultCounts::tally(&prev_eval.faults))
            }
        };
        report.final_faults_3d = final_3d;
        report.final_faults_2d = final_2d;
        // Faults on the final frame that the seed frame did not show.
        let seed_keys: std::collections::HashSet<_> =
            seed_eval.faults.iter().map(|f| f.key.clone()).collect();
        for f in &prev_eval.faults {
            if !seed_keys.contains(&f.key) {
                report.new_faults.bump(f.kind);
            }
        }
        let insertions = report.insertions.clone();
        Ok(SeedOutcome {
            report,
            generated: Some(GeneratedFrame {
                frame: current,
                insertions,
                seed_eval,
                final_eval: prev_eval,
            }),
        })
    }
}

/// Write the generated frames in KITTI layout plus the manifest.
pub fn persist_corpus(
    generated: &[(&Frame, &[InsertionRecord])],
    out_dir: &Path,
    rng_seed: u64,
) -> Result<Manifest, CampaignError> {
    let mut manifest = Manifest { rng_seed, frames: Vec::new() };
    for (frame, insertions) in generated {
        let rel = format!("generated/{}", frame.id);
        let dir = out_dir.join(&rel);
        std::fs::create_dir_all(&dir)?;
        frame.save(&dir)?;
        manifest.frames.push(ManifestFrame {
            seed_id: frame.id.clone(),
            path: rel,
            insertions: insertions.to_vec(),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CampaignError::Internal(e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Run the full campaign over every seed under `cfg.seeds_dir`.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, CampaignError> {
    let cfg = cfg.clone().normalized();
    cfg.validate()?;
    let objects = load_object_database(&cfg.objects_dir)?;
    let sut = make_sut(&cfg);
    let ids = Frame::list_ids(&cfg.seeds_dir).map_err(|_| CampaignError::NoSeeds(cfg.seeds_dir.clone()))?;
    if ids.is_empty() {
        return Err(CampaignError::NoSeeds(cfg.seeds_dir.clone()));
    }
    let rays = generate_rays(&cfg.lidar);
    let runner = SeedRunner { cfg: &cfg, objects: &objects, sut: sut.as_ref(), rays: &rays };

    let mut seeds = Vec::new();
    let mut generated: Vec<GeneratedFrame> = Vec::new();
    for id in &ids {
        let outcome = runner.run(id)?;
        seeds.push(outcome.report);
        if let Some(g) = outcome.generated {
            generated.push(g);
        }
    }

    // Corpus metrics over the generated subset (paired before/after).
    let ap_pair = |mode: MatchMode| {
        let before: Vec<Vec<GroundTruth>> = generated.iter().map(|g| g.seed_eval.gts.clone()).collect();
        let before_dets: Vec<Vec<Detection>> = generated.iter().map(|g| g.seed_eval.dets.clone()).collect();
        let after: Vec<Vec<GroundTruth>> = generated.iter().map(|g| g.final_eval.gts.clone()).collect();
        let after_dets: Vec<Vec<Detection>> = generated.iter().map(|g| g.final_eval.dets.clone()).collect();
        (
            average_precision(&before, &before_dets, cfg.tau, mode).ok(),
            average_precision(&after, &after_dets, cfg.tau, mode).ok(),
        )
    };
    let (ap_before, ap_after) = ap_pair(cfg.fitness_mode);
    let mc_items: Vec<(&Box3, &crate::geom::Box2, &crate::geom::Calibration)> = generated
        .iter()
        .flat_map(|g| {
            g.insertions
                .iter()
                .map(move |ins| (&ins.box3, &ins.box2, &g.frame.calib))
        })
        .collect();
    let mc = modality_consistency(&mc_items).ok();

    let frames: Vec<(&Frame, &[InsertionRecord])> = generated
        .iter()
        .map(|g| (&g.frame, g.insertions.as_slice()))
        .collect();
    persist_corpus(&frames, &cfg.output_dir, cfg.rng_seed)?;

    let mut report = CampaignReport {
        guidance: cfg.guidance,
        rng_seed: cfg.rng_seed,
        n_insertions: cfg.n_insertions,
        try_num: cfg.try_num,
        tau: cfg.tau,
        sut_name: sut.name().to_string(),
        seeds,
        totals: CampaignTotals {
            ap_before,
            ap_after,
            modality_consistency: mc,
            ..Default::default()
        },
    };
    report.totals = report.recompute_totals();
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CampaignError::Internal(e.to_string()))?;
    std::fs::write(cfg.output_dir.join("report.json"), json)?;
    Ok(report)
}
