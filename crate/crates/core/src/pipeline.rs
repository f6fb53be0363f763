//! File-to-file stages shared by the command line: every stage reads the
//! previous stage's dumps and writes its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ba::{adjust, BaOptions, BaReport};
use crate::error::Error;
use crate::evaluation::{report, Report, Truth};
use crate::grouping::{group_all, load_groups, save_groups, Grouping, GroupingOptions};
use crate::merging::{load_labeled_scene, merge_scene, plan_merge, save_labeled_scene, track_positions};
use crate::registration::{load_registrations, register_all, save_registrations, RansacParams, Registrations};
use crate::scene::{
    load_ground_truth, load_scene, save_ground_truth, save_scene, Label, LabeledScene, MultiTakeScene, TakeId,
};
use crate::segmentation::{
    knn_propagate, label_points, lift_to_tracks, load_segmentation, merge_global, save_segmentation, LiftedPair,
    Segmentation, DEFAULT_KNN,
};
use crate::simulator::{generate, SimConfig, SimOutput};
use crate::text;
use crate::tracks::{build_graph, check_covers, connected_components, load_tracks, save_tracks, TrackSet};

pub const REGISTRATIONS: &str = "registrations.txt";
pub const GROUPS: &str = "groups.txt";
pub const TRACKS: &str = "tracks.txt";
pub const SEGMENTATION: &str = "segmentation.txt";
pub const DEGENERATE: &str = "degenerate.txt";
pub const BA_REPORT: &str = "ba_report.txt";
pub const REPORT: &str = "report.json";
pub const GROUND_TRUTH: &str = "ground_truth.txt";

/// Smaller group below this size marks a take's grouping as degenerate.
pub const DEGENERATE_MIN_POINTS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("{source}")]
    Usage { stage: &'static str, source: Error },
    #[error("{source}")]
    Data { stage: &'static str, source: Error },
    #[error("{source}")]
    Failed { stage: &'static str, source: Error },
    #[error("degenerate grouping, see {}", report.display())]
    Degenerate { stage: &'static str, report: PathBuf },
}

impl StageError {
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Usage { stage, .. } | Self::Data { stage, .. } | Self::Failed { stage, .. } => stage,
            Self::Degenerate { stage, .. } => stage,
        }
    }

    /// 1 usage, 2 data, 3 stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage { .. } => 1,
            Self::Data { .. } => 2,
            Self::Failed { .. } | Self::Degenerate { .. } => 3,
        }
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

fn classify(stage: &'static str) -> impl Fn(Error) -> StageError {
    move |source| match source {
        Error::Config(_) => StageError::Usage { stage, source },
        Error::Geometry(_) | Error::TooFewCorrespondences { .. } | Error::UnderConstrained(_) => {
            StageError::Failed { stage, source }
        }
        _ => StageError::Data { stage, source },
    }
}

fn data(stage: &'static str) -> impl Fn(Error) -> StageError {
    move |source| StageError::Data { stage, source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub ransac: RansacParams,
    pub grouping: GroupingOptions,
    pub knn: usize,
    pub swap: bool,
    pub ba: BaOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            grouping: GroupingOptions::default(),
            knn: DEFAULT_KNN,
            swap: false,
            ba: BaOptions::default(),
        }
    }
}

pub fn read_scene(stage: &'static str, dir: &Path) -> StageResult<MultiTakeScene> {
    let scene = load_scene(dir).map_err(data(stage))?;
    scene.validate().map_err(data(stage))?;
    Ok(scene)
}

pub fn register(scene_dir: &Path, out: &Path, params: &RansacParams) -> StageResult<Registrations> {
    const STAGE: &str = "register";
    params.validate().map_err(classify(STAGE))?;
    let scene = read_scene(STAGE, scene_dir)?;
    let regs = register_all(&scene, params).map_err(classify(STAGE))?;
    save_registrations(&regs, &out.join(REGISTRATIONS)).map_err(data(STAGE))?;
    Ok(regs)
}

/// Why no take produced a usable pair of groups.
pub fn degenerate_report(scene: &MultiTakeScene, g: &Grouping) -> Option<String> {
    let usable = g.pairs.values().filter(|p| !p.is_degenerate(DEGENERATE_MIN_POINTS)).count();
    if usable > 0 {
        return None;
    }
    let mut out = String::from("degenerate grouping: no take split into two rigid groups\n");
    for t in scene.take_ids() {
        match g.pairs.get(&t) {
            Some(p) => {
                let _ = writeln!(out, "take {t}: groups of {} and {} points", p.groups[0].len(), p.groups[1].len());
            }
            None => {
                let _ = writeln!(out, "take {t}: no image registered twice");
            }
        }
    }
    let _ = writeln!(out, "the foreground may not have moved between takes");
    Some(out)
}

/// Groups every take and builds tracks. Both dumps are written even when the
/// grouping is degenerate; the degenerate case also writes a report and fails.
pub fn group(
    scene_dir: &Path,
    regs_path: &Path,
    out: &Path,
    opts: &GroupingOptions,
) -> StageResult<(Grouping, TrackSet)> {
    const STAGE: &str = "group";
    let scene = read_scene(STAGE, scene_dir)?;
    let regs = load_registrations(regs_path, &scene).map_err(data(STAGE))?;
    let g = group_all(&scene, &regs, opts).map_err(classify(STAGE))?;
    save_groups(&g, &out.join(GROUPS)).map_err(data(STAGE))?;
    let tracks = connected_components(&build_graph(&scene, &regs));
    save_tracks(&tracks, &out.join(TRACKS)).map_err(data(STAGE))?;
    if let Some(text) = degenerate_report(&scene, &g) {
        let report = out.join(DEGENERATE);
        text::write(&report, &text).map_err(data(STAGE))?;
        return Err(StageError::Degenerate { stage: STAGE, report });
    }
    Ok((g, tracks))
}

fn load_inputs(
    stage: &'static str,
    scene_dir: &Path,
    tracks: &Path,
    regs: Option<&Path>,
) -> StageResult<(MultiTakeScene, TrackSet, Option<Registrations>)> {
    let scene = read_scene(stage, scene_dir)?;
    let tracks = load_tracks(tracks).map_err(data(stage))?;
    check_covers(&tracks, &scene).map_err(data(stage))?;
    let regs = regs.map(|p| load_registrations(p, &scene)).transpose().map_err(data(stage))?;
    Ok((scene, tracks, regs))
}

/// Global groups, labels, and one propagation pass over merged positions.
pub fn segment(
    scene_dir: &Path,
    groups: &Path,
    tracks: &Path,
    regs: Option<&Path>,
    out: &Path,
    knn: usize,
    swap: bool,
) -> StageResult<Segmentation> {
    const STAGE: &str = "segment";
    if knn == 0 {
        return Err(StageError::Usage { stage: STAGE, source: Error::Config("knn must be at least 1".into()) });
    }
    let (scene, tracks, regs) = load_inputs(STAGE, scene_dir, tracks, regs)?;
    let g = load_groups(groups).map_err(data(STAGE))?;
    let mut lifted: BTreeMap<TakeId, LiftedPair> = BTreeMap::new();
    for (t, pair) in &g.pairs {
        if pair.is_degenerate(DEGENERATE_MIN_POINTS) {
            log::warn!("take {t}: degenerate groups left out of segmentation");
            continue;
        }
        lifted.insert(*t, lift_to_tracks(pair, &tracks));
    }
    let groups = merge_global(&lifted).ok_or_else(|| StageError::Failed {
        stage: STAGE,
        source: Error::UnderConstrained("no take with two usable groups".into()),
    })?;
    for t in &groups.unmerged {
        log::warn!("take {t} could not be merged into the global groups");
    }
    let mut labels = label_points(&groups, &tracks, swap);
    let plan = plan_merge(&scene, &tracks, &labels, groups.reference, regs.as_ref()).map_err(classify(STAGE))?;
    let positions = track_positions(&scene, &tracks, &labels, &plan);
    if let Some(n) = knn_propagate(&mut labels, &positions, knn) {
        log::info!("propagation labeled {n} tracks");
    }
    let seg = Segmentation { groups, labels };
    save_segmentation(&seg, &out.join(SEGMENTATION)).map_err(data(STAGE))?;
    Ok(seg)
}

pub fn merge(
    scene_dir: &Path,
    segmentation: &Path,
    tracks: &Path,
    regs: Option<&Path>,
    out: &Path,
) -> StageResult<LabeledScene> {
    const STAGE: &str = "merge";
    let (scene, tracks, regs) = load_inputs(STAGE, scene_dir, tracks, regs)?;
    let seg = load_segmentation(segmentation).map_err(data(STAGE))?;
    let plan =
        plan_merge(&scene, &tracks, &seg.labels, seg.groups.reference, regs.as_ref()).map_err(classify(STAGE))?;
    for (t, why) in &plan.excluded {
        log::warn!("take {t} left out of the merge: {why}");
    }
    let merged = merge_scene(&scene, &tracks, &seg.labels, &plan).map_err(classify(STAGE))?;
    save_labeled_scene(&merged, out).map_err(data(STAGE))?;
    Ok(merged)
}

pub fn bundle_adjust(merged_root: &Path, out: &Path, options: &BaOptions) -> StageResult<(LabeledScene, BaReport)> {
    const STAGE: &str = "ba";
    let mut ls = load_labeled_scene(merged_root).map_err(data(STAGE))?;
    let rep = adjust(&mut ls, options).map_err(classify(STAGE))?;
    save_labeled_scene(&ls, out).map_err(data(STAGE))?;
    text::write(&out.join(BA_REPORT), &rep.to_text()).map_err(data(STAGE))?;
    Ok((ls, rep))
}

/// Report for a result directory. Ground truth, when given, is scored through
/// the result's track dump; `scene` adds the merged position error.
pub fn evaluate(
    result: &Path,
    ground_truth: Option<&Path>,
    scene_dir: Option<&Path>,
    out: &Path,
) -> StageResult<Report> {
    const STAGE: &str = "evaluate";
    let ls = load_labeled_scene(result).map_err(data(STAGE))?;
    let rep = match ground_truth {
        Some(path) => {
            let gt = load_ground_truth(path).map_err(data(STAGE))?;
            let tracks = load_tracks(&result.join(TRACKS)).map_err(data(STAGE))?;
            let scene = scene_dir.map(|d| read_scene(STAGE, d)).transpose()?;
            report(&ls, Some(&Truth { gt: &gt, tracks: &tracks, scene: scene.as_ref() }))
        }
        None => report(&ls, None),
    };
    text::write(out, &rep.to_json()).map_err(data(STAGE))?;
    Ok(rep)
}

/// All stages in order into `out`; the merge before adjustment goes to
/// `out/initial`. Ends with a ground-truth free report.
pub fn run(scene_dir: &Path, out: &Path, cfg: &PipelineConfig) -> StageResult<Report> {
    if cfg.knn == 0 {
        return Err(StageError::Usage { stage: "pipeline", source: Error::Config("knn must be at least 1".into()) });
    }
    register(scene_dir, out, &cfg.ransac)?;
    let regs = out.join(REGISTRATIONS);
    group(scene_dir, &regs, out, &cfg.grouping)?;
    let tracks = out.join(TRACKS);
    segment(scene_dir, &out.join(GROUPS), &tracks, Some(&regs), out, cfg.knn, cfg.swap)?;
    let initial = out.join("initial");
    merge(scene_dir, &out.join(SEGMENTATION), &tracks, Some(&regs), &initial)?;
    bundle_adjust(&initial, out, &cfg.ba)?;
    evaluate(out, None, None, &out.join(REPORT))
}

/// ASCII PLY of the merged points; foreground green, background red,
/// unknown gray.
pub fn format_ply(ls: &LabeledScene) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", ls.points.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(out, "property double {axis}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(out, "property uchar {c}");
    }
    out.push_str("end_header\n");
    for p in ls.points.values() {
        let (r, g, b) = match p.label {
            Label::Foreground => (0, 255, 0),
            Label::Background => (255, 0, 0),
            Label::Unknown => (128, 128, 128),
        };
        let x = p.position;
        let _ = writeln!(out, "{} {} {} {r} {g} {b}", x.x, x.y, x.z);
    }
    out
}

pub fn export_ply(result: &Path, out: &Path) -> StageResult<()> {
    const STAGE: &str = "export-ply";
    let ls = load_labeled_scene(result).map_err(data(STAGE))?;
    text::write(out, &format_ply(&ls)).map_err(data(STAGE))
}

/// Writes a simulated scene and its ground truth into `out`. A given seed
/// replaces the configuration's.
pub fn simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> StageResult<SimOutput> {
    const STAGE: &str = "simulate";
    let mut cfg = match config {
        Some(path) => SimConfig::from_json(&text::read(path).map_err(data(STAGE))?).map_err(classify(STAGE))?,
        None => SimConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let sim = generate(&cfg).map_err(classify(STAGE))?;
    for w in &sim.warnings {
        log::warn!("{w}");
    }
    save_scene(&sim.scene, out).map_err(data(STAGE))?;
    save_ground_truth(&sim.ground_truth, &out.join(GROUND_TRUTH)).map_err(data(STAGE))?;
    Ok(sim)
}
