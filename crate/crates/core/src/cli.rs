//! Thin command-line front end over the library. Subcommands:
//! `generate`, `evaluate`, `render`, `mc`, `selfcheck`.
//!
//! Exit codes: 0 ok, 2 config error, 3 SUT failure, 4 no seeds usable.

use crate::campaign::{load_config, run_campaign, CampaignError};
use crate::camera::{background_depth, render_insertions};
use crate::geom::{Box2, GroundTruth};
use crate::kitti::{read_labels, write_image_png, write_point_cloud, Frame, Raster};
use crate::lidar::{carve_occluded_background, generate_rays, simulate_object_points};
use crate::metrics::{
    average_precision, classify_faults, match_detections, modality_consistency, Detection,
    FaultRecord, GtId, MatchMode,
};
use crate::mesh::ObjectInstance;
use crate::pose::{sample_pose, SceneContext};
use crate::rng::{fnv1a, substream};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SUT: i32 = 3;
pub const EXIT_NO_SEEDS: i32 = 4;

#[derive(Parser)]
#[command(
    name = "fusefuzz",
    about = "Physically-aware object insertion and fitness-guided metamorphic testing for camera+LiDAR perception"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an insertion campaign: corpus + report under the output dir.
    Generate(GenerateArgs),
    /// Score a detection directory against a ground-truth directory.
    Evaluate(EvaluateArgs),
    /// Debug-render one insertion: composited PNG, depth PNG, carved cloud.
    Render(RenderArgs),
    /// Modality-consistency score of a generated corpus manifest.
    Mc(McArgs),
    /// Run the builtin-SUT acceptance scenarios end to end.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the acceptance strategy.
    #[arg(long, value_parser = ["guided", "random"])]
    guidance: Option<String>,
    /// Override the campaign RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. --set lidar.num_beams=32.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of ground-truth label files (<id>.txt).
    #[arg(long)]
    gt: PathBuf,
    /// Directory of detection label files (<id>.txt, 16 fields).
    #[arg(long)]
    det: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value = "3d", value_parser = parse_mode)]
    mode: MatchMode,
    #[arg(long, default_value = "Car")]
    category: String,
    /// Ignore ground truths shorter than this many pixels.
    #[arg(long)]
    min_height: Option<f64>,
    /// Ignore ground truths with a higher occlusion level.
    #[arg(long)]
    max_occlusion: Option<i32>,
    /// Ignore ground truths with higher truncation.
    #[arg(long)]
    max_truncation: Option<f64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Seed frame id.
    #[arg(long)]
    frame: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: <output_dir>/render/<frame>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Working directory for the generated scenario (default: temp dir).
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<MatchMode, String> {
    match s {
        "2d" => Ok(MatchMode::Mode2d),
        "3d" => Ok(MatchMode::Mode3d),
        other => Err(format!("mode must be 2d or 3d, got {other}")),
    }
}

pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Render(args) => cmd_render(args),
        Command::Mc(args) => cmd_mc(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Kitti(#[from] crate::kitti::KittiError),
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Campaign(CampaignError::Config(_)) => EXIT_CONFIG,
            CliError::Campaign(CampaignError::NoSeeds(_)) => EXIT_NO_SEEDS,
            CliError::Campaign(_) => EXIT_CONFIG,
            _ => EXIT_CONFIG,
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<i32, CliError> {
    let mut overrides = args.overrides.clone();
    if let Some(g) = &args.guidance {
        overrides.push(format!("guidance=\"{g}\""));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("rng_seed={s}"));
    }
    let cfg = load_config(&args.config, &overrides).map_err(CampaignError::Config)?;
    let report = run_campaign(&cfg)?;
    let t = &report.totals;
    println!(
        "seeds: {} total, {} generated, {} unusable, {} SUT failures",
        t.seeds_total, t.seeds_generated, t.seeds_unusable, t.sut_failures
    );
    println!(
        "insertions: {}   MR violations: {}   new faults: OM {} / FD {} / LE {}",
        t.inserted_objects,
        t.mr_violations,
        t.new_faults.object_missing,
        t.new_faults.false_detection,
        t.new_faults.localization_error
    );
    if let (Some(b), Some(a)) = (t.ap_before, t.ap_after) {
        println!("AP before {:.4} -> after {:.4}", b, a);
    }
    if let Some(mc) = t.modality_consistency {
        println!("modality consistency: {mc:.3}");
    }
    println!("outputs under {}", cfg.output_dir.display());
    if t.seeds_total > 0 && t.sut_failures == t.seeds_total {
        return Ok(EXIT_SUT);
    }
    if t.seeds_total > 0 && t.seeds_unusable == t.seeds_total {
        return Ok(EXIT_NO_SEEDS);
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EvalFrameReport {
    id: String,
    ap_frame: Option<f64>,
    faults: Vec<FaultRecord>,
}

#[derive(Serialize)]
struct EvalReport {
    tau: f64,
    mode: MatchMode,
    category: String,
    ap: Option<f64>,
    counts: crate::campaign::FaultCounts,
    frames: Vec<EvalFrameReport>,
}

fn label_ids_in(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32, CliError> {
    let ids = label_ids_in(&args.gt)?;
    if ids.is_empty() {
        eprintln!("no ground-truth label files under {}", args.gt.display());
        return Ok(EXIT_NO_SEEDS);
    }
    let mut gts_per_frame: Vec<Vec<GroundTruth>> = Vec::new();
    let mut dets_per_frame: Vec<Vec<Detection>> = Vec::new();
    let mut frames: Vec<EvalFrameReport> = Vec::new();
    for id in &ids {
        let gt_text = std::fs::read_to_string(args.gt.join(format!("{id}.txt")))?;
        let gt_records = read_labels(&gt_text)?;
        let mut gts: Vec<GroundTruth> = Vec::new();
        for r in &gt_records {
            if r.category != args.category && !r.is_dont_care() {
                continue;
            }
            // Camera-frame BEV geometry; the placeholder keeps DontCare
            // regions 2D-only.
            let box3 = r.box3_camera_bev().unwrap_or(crate::geom::Box3 {
                center: crate::geom::Point3::new(-1e6, -1e6, -1e6),
                length: 0.1,
                width: 0.1,
                height: 0.1,
                yaw: 0.0,
            });
            let mut dont_care = r.is_dont_care();
            if let Some(mh) = args.min_height {
                dont_care |= r.box2.height() < mh;
            }
            if let Some(mo) = args.max_occlusion {
                dont_care |= r.occlusion > mo;
            }
            if let Some(mt) = args.max_truncation {
                dont_care |= r.truncation > mt;
            }
            gts.push(GroundTruth { box3, box2: r.box2, category: r.category.clone(), dont_care });
        }
        let det_path = args.det.join(format!("{id}.txt"));
        let dets: Vec<Detection> = if det_path.is_file() {
            read_labels(&std::fs::read_to_string(&det_path)?)?
                .iter()
                .filter(|r| r.category == args.category)
                .map(Detection::from_label_camera_bev)
                .collect()
        } else {
            Vec::new()
        };
        gts_per_frame.push(gts);
        dets_per_frame.push(dets);
    }
    let ap = average_precision(&gts_per_frame, &dets_per_frame, args.tau, args.mode).ok();
    let mut counts = crate::campaign::FaultCounts::default();
    for (k, id) in ids.iter().enumerate() {
        let gts = &gts_per_frame[k];
        let dets = &dets_per_frame[k];
        let ids_for_frame: Vec<GtId> = (0..gts.len()).map(GtId::Seed).collect();
        let m = match_detections(gts, dets, args.tau, args.mode);
        let faults = classify_faults(&m, gts, &ids_for_frame, dets, args.mode);
        for f in &faults {
            counts.bump(f.kind);
        }
        let ap_frame = average_precision(
            std::slice::from_ref(gts),
            std::slice::from_ref(dets),
            args.tau,
            args.mode,
        )
        .ok();
        frames.push(EvalFrameReport { id: id.clone(), ap_frame, faults });
    }
    let report = EvalReport { tau: args.tau, mode: args.mode, category: args.category, ap, counts, frames };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(EXIT_OK)
}

fn cmd_render(args: RenderArgs) -> Result<i32, CliError> {
    let cfg = load_config(&args.config, &args.overrides).map_err(CampaignError::Config)?;
    let frame = Frame::load(&cfg.seeds_dir, &args.frame)?;
    let scene = SceneContext::build(&frame.cloud, &cfg.pose)
        .map_err(|e| CliError::Other(format!("seed unusable: {e}")))?;
    let objects = crate::campaign::load_object_database(&cfg.objects_dir)?;
    let seed_hash = fnv1a(args.frame.as_bytes());
    let object = {
        let mut rng = substream(cfg.rng_seed, seed_hash, 1, 0);
        objects[rng.random_range(0..objects.len())].clone()
    };
    let mut rng = substream(cfg.rng_seed, seed_hash, 1, 1);
    let candidate = sample_pose(&scene.surface, &object.mesh.canonical_box(), &mut rng, &cfg.pose)
        .map_err(|e| CliError::Other(format!("no pose: {e}")))?;
    let instance = ObjectInstance::new(object, candidate.pose);
    let rays = generate_rays(&cfg.lidar);
    let sim = simulate_object_points(&rays, std::slice::from_ref(&instance), &cfg.lidar, &mut rng);
    let carved = carve_occluded_background(&frame.cloud, std::slice::from_ref(&instance), &cfg.lidar);
    let merged = crate::lidar::merge_clouds(&carved, &sim);
    let render = render_insertions(&frame, std::slice::from_ref(&instance), &cfg.camera);

    let out_dir = args
        .out_dir
        .unwrap_or_else(|| cfg.output_dir.join("render").join(&args.frame));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("composited.png"), write_image_png(&render.image)?)?;
    // Normalized background depth for inspection.
    let depth = background_depth(&frame, &cfg.camera);
    let (w, h) = frame.calib.image_size;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = depth.get(x, y) {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    let mut depth_img = Raster::new(w, h);
    if hi > lo {
        for y in 0..h {
            for x in 0..w {
                if let Some(d) = depth.get(x, y) {
                    let v = (255.0 * (1.0 - (d - lo) / (hi - lo))) as u8;
                    depth_img.set(x, y, [v, v, v]);
                }
            }
        }
    }
    std::fs::write(out_dir.join("depth.png"), write_image_png(&depth_img)?)?;
    let mut mask = Raster::new(w, h);
    for &(x, y) in &render.masks[0] {
        mask.set(x, y, [255, 255, 255]);
    }
    std::fs::write(out_dir.join("mask_0.png"), write_image_png(&mask)?)?;
    std::fs::write(out_dir.join("carved.bin"), write_point_cloud(&merged))?;
    println!(
        "rendered insertion of {} at ({:.1}, {:.1}) into {}",
        instance.object.name,
        candidate.pose.x,
        candidate.pose.y,
        out_dir.display()
    );
    Ok(EXIT_OK)
}

fn cmd_mc(args: McArgs) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(&args.manifest)?;
    let manifest: crate::campaign::Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Other(format!("bad manifest: {e}")))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let mut calibs = Vec::new();
    for mf in &manifest.frames {
        let frame = Frame::load(&base.join(&mf.path), &mf.seed_id)?;
        calibs.push(frame.calib);
    }
    let items: Vec<(&crate::geom::Box3, &Box2, &crate::geom::Calibration)> = manifest
        .frames
        .iter()
        .zip(calibs.iter())
        .flat_map(|(mf, calib)| mf.insertions.iter().map(move |ins| (&ins.box3, &ins.box2, calib)))
        .collect();
    match modality_consistency(&items) {
        Ok(mc) => {
            println!("modality consistency over {} insertions: {mc:.4}", items.len());
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("cannot compute: {e}");
            Ok(EXIT_NO_SEEDS)
        }
    }
}

fn cmd_selfcheck(args: SelfcheckArgs) -> Result<i32, CliError> {
    let temp;
    let work = match &args.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };
    let report = crate::selfcheck::run(&work).map_err(|e| CliError::Other(e.to_string()))?;
    let mut all_ok = true;
    for check in &report.checks {
        println!("{} {}", if check.passed { "PASS" } else { "FAIL" }, check.name);
        all_ok &= check.passed;
    }
    Ok(if all_ok { EXIT_OK } else { 1 })
}
