use std::path::{Path, PathBuf};

use cascade_mvs::eval::{
    cloud_metrics, default_dist_cap, depth_error_stats, range_table, CloudMetrics, DepthErrorStats,
    RangeAccumulator, RangeDiagnostics, RangeRow,
};
use cascade_mvs::features::{FeatureExtractor, FeatureWeights};
use cascade_mvs::fusion::{fuse, read_ply, write_ply, PlyFormat, PointCloud};
use cascade_mvs::io::{read_pfm, write_pfm};
use cascade_mvs::pipeline::{
    fixed_range_baseline, infer, CascadeOutput, RangeStrategy, ViewSet, STAGES,
};
use cascade_mvs::rem::{DepthRangeMap, RemPair};
use cascade_mvs::synth::{
    generate_dataset, list_scene_dirs, read_scene, write_scene, Scene, MANIFEST,
};
use cascade_mvs::trainer::{
    grad_check, train, write_log, GradCheckReport, GradCheckTarget, TrainOutput,
};
use cascade_mvs::{DepthMap, Error, Grid, Mask};
use serde::Serialize;

use crate::{CliError, Result, RunConfig};

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        return Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        )
        .into());
    }
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        )
        .into());
    }
    Ok(())
}

/// Makes sure the directory that will hold `p` exists.
fn prepare_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e).into())
}

/// Scenes of a directory that is either one scene or a root of scenes.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    require_dir(dir)?;
    if dir.join(MANIFEST).is_file() {
        return Ok(vec![read_scene(dir)?]);
    }
    let dirs = list_scene_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    dirs.iter()
        .map(|d| read_scene(d).map_err(CliError::from))
        .collect()
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let scenes = generate_dataset(cfg.synth.count, cfg.seed, &cfg.synth.rig)?;
    let mut dirs = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let d = out.join(&s.name);
        write_scene(s, &d)?;
        dirs.push(d);
    }
    log::info!("wrote {} scenes to {}", dirs.len(), out.display());
    Ok(dirs)
}

/// Feature weights stored next to a checkpoint.
pub fn feature_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("feat")
}

pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("csv")
}

pub fn cmd_train(
    cfg: &RunConfig,
    scenes_dir: &Path,
    checkpoint: &Path,
    log_path: Option<&Path>,
) -> Result<TrainOutput> {
    let log_path = log_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_log_path(checkpoint));
    require_dir(scenes_dir)?;
    prepare_parent(checkpoint)?;
    prepare_parent(&log_path)?;
    let scenes = load_scenes(scenes_dir)?;
    let out = train(&scenes, &cfg.train_config(), &cfg.stage, None)?;
    out.rem.save(checkpoint)?;
    if let Some(f) = &out.features {
        f.write(&feature_path(checkpoint))?;
    }
    write_log(&out.log, &log_path)?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        log::info!(
            "{} steps, total loss {:.4} -> {:.4}",
            out.log.len(),
            first.total,
            last.total
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum RangeMethod {
    Learned(PathBuf),
    Baseline,
}

/// Views reordered so that `reference` comes first.
pub fn views_with_reference(scene: &Scene, reference: usize) -> ViewSet {
    let order: Vec<usize> = std::iter::once(reference)
        .chain((0..scene.images.len()).filter(|&v| v != reference))
        .collect();
    ViewSet {
        images: order.iter().map(|&v| scene.images[v].clone()).collect(),
        cameras: order.iter().map(|&v| scene.cameras[v].clone()).collect(),
        depth_range: scene.depth_range(),
    }
}

pub fn cmd_infer(
    cfg: &RunConfig,
    scene_dir: &Path,
    method: &RangeMethod,
    out: &Path,
    all_views: bool,
) -> Result<CascadeOutput> {
    require_dir(scene_dir)?;
    let (rem, extractor) = match method {
        RangeMethod::Learned(ckpt) => {
            require_file(ckpt)?;
            let feat = feature_path(ckpt);
            let extractor = if feat.is_file() {
                FeatureExtractor::Trainable(FeatureWeights::read(&feat)?)
            } else {
                FeatureExtractor::Fixed
            };
            (Some(RemPair::load(ckpt)?), extractor)
        }
        RangeMethod::Baseline => (None, FeatureExtractor::Fixed),
    };
    create_dir(out)?;
    let scene = read_scene(scene_dir)?;
    let run = |views: &ViewSet| -> Result<CascadeOutput> {
        Ok(match &rem {
            Some(r) => infer(views, &extractor, RangeStrategy::Learned(r), &cfg.stage)?,
            None => fixed_range_baseline(views, &extractor, cfg.baseline.shrink, &cfg.stage)?,
        })
    };
    let main = run(&views_with_reference(&scene, 0))?;
    main.write(out)?;
    if all_views {
        let depths = out.join("depths");
        create_dir(&depths)?;
        for v in 0..scene.images.len() {
            let depth = if v == 0 {
                main.final_depth().clone()
            } else {
                run(&views_with_reference(&scene, v))?.final_depth().clone()
            };
            write_pfm(&depths.join(format!("{v:03}.pfm")), &depth)?;
        }
    }
    Ok(main)
}

/// Reads `NNN.pfm` for every view of the scene.
pub fn read_view_depths(dir: &Path, views: usize) -> Result<Vec<DepthMap>> {
    (0..views)
        .map(|v| read_pfm(&dir.join(format!("{v:03}.pfm"))).map_err(CliError::from))
        .collect()
}

pub fn cmd_fuse(
    cfg: &RunConfig,
    scene_dir: &Path,
    depth_dir: &Path,
    out: &Path,
    format: PlyFormat,
) -> Result<PointCloud> {
    require_dir(scene_dir)?;
    require_dir(depth_dir)?;
    prepare_parent(out)?;
    let scene = read_scene(scene_dir)?;
    let depths = read_view_depths(depth_dir, scene.images.len())?;
    let cloud = fuse(&depths, &scene.cameras, &scene.images, &cfg.fusion)?;
    write_ply(&cloud, out, format)?;
    log::info!("fused {} points into {}", cloud.len(), out.display());
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageEval {
    pub range: RangeDiagnostics,
    pub depth: DepthErrorStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodEval {
    pub method: String,
    pub stages: Vec<StageEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<MethodEval>,
    pub cloud: Option<CloudMetrics>,
}

impl EvalReport {
    pub fn range_rows(&self) -> Vec<RangeRow> {
        self.methods
            .iter()
            .map(|m| RangeRow {
                method: m.method.clone(),
                stages: m.stages.iter().map(|s| s.range).collect(),
            })
            .collect()
    }

    pub fn table(&self) -> String {
        range_table(&self.range_rows())
    }
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    method: &'a str,
    stage: usize,
    mean_range: f64,
    coverage: f64,
    pixels: usize,
    mae: f64,
    rmse: f64,
    within_spacing: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    Error::Format {
        kind: "csv",
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
    .into()
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for m in &report.methods {
        for (k, s) in m.stages.iter().enumerate() {
            w.serialize(ReportRow {
                method: &m.method,
                stage: k + 1,
                mean_range: s.range.mean_length,
                coverage: s.range.coverage,
                pixels: s.range.pixels,
                mae: s.depth.mae,
                rmse: s.depth.rmse,
                within_spacing: s.depth.within_spacing,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    if let Some(c) = &report.cloud {
        let cp = path.with_extension("cloud.csv");
        let mut w = csv::Writer::from_path(&cp).map_err(|e| csv_error(&cp, e))?;
        w.serialize(c).map_err(|e| csv_error(&cp, e))?;
        w.flush().map_err(|e| Error::io(&cp, e))?;
    }
    Ok(())
}

/// Prediction directory of `scene` for a method whose outputs live in `root`.
fn prediction_dir(root: &Path, scene: &Scene, single: bool) -> PathBuf {
    if single {
        root.to_path_buf()
    } else {
        root.join(&scene.name)
    }
}

fn valid_mask(gt: &DepthMap, mask: &Mask) -> Mask {
    Grid::from_fn(gt.width(), gt.height(), |x, y| {
        *mask.get(x, y) && *gt.get(x, y) > 0.0
    })
}

/// One scene's depth maps for every stage and the intervals the later stages searched.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub depths: Vec<DepthMap>,
    /// Intervals of stages 2 and 3.
    pub ranges: Vec<DepthRangeMap>,
}

impl Prediction {
    /// Reads `stage{k}.pfm` and `range{k}.{min,max}.pfm` as written by `cmd_infer`.
    pub fn read(dir: &Path) -> Result<Self> {
        let depths = (1..=STAGES)
            .map(|k| read_pfm(&dir.join(format!("stage{k}.pfm"))).map_err(CliError::from))
            .collect::<Result<_>>()?;
        let ranges = (2..=STAGES)
            .map(|k| {
                let low = read_pfm(&dir.join(format!("range{k}.min.pfm")))?;
                let high = read_pfm(&dir.join(format!("range{k}.max.pfm")))?;
                DepthRangeMap::new(low, high).map_err(CliError::from)
            })
            .collect::<Result<_>>()?;
        Ok(Self { depths, ranges })
    }

    /// The maps of an in-memory cascade at the precision they are stored with,
    /// so that evaluating it matches evaluating its written files.
    pub fn from_output(out: &CascadeOutput) -> Result<Self> {
        let q = |m: &DepthMap| m.map(|v| *v as f32 as f64);
        let ranges = out
            .transitions
            .iter()
            .map(|t| DepthRangeMap::new(q(&t.next.low), q(&t.next.high)).map_err(CliError::from))
            .collect::<Result<_>>()?;
        Ok(Self {
            depths: out.stages.iter().map(|s| q(&s.depth)).collect(),
            ranges,
        })
    }
}

/// Range and depth statistics of one method over `scenes`, pixels pooled.
pub fn evaluate_predictions(
    cfg: &RunConfig,
    name: &str,
    scenes: &[Scene],
    preds: &[Prediction],
) -> Result<MethodEval> {
    if scenes.len() != preds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenes, {} predictions",
            scenes.len(),
            preds.len()
        ))
        .into());
    }
    let mut ranges = [RangeAccumulator::default(); STAGES];
    let mut pooled: [(Vec<f64>, Vec<f64>, Vec<bool>); STAGES] = Default::default();
    for (scene, pred) in scenes.iter().zip(preds) {
        if pred.depths.len() != STAGES || pred.ranges.len() != STAGES - 1 {
            return Err(Error::ShapeMismatch(format!(
                "prediction for {} is incomplete",
                scene.name
            ))
            .into());
        }
        let (lo, hi) = scene.depth_range();
        for k in 0..STAGES {
            let (gt, m) = scene.gt_at_level(STAGES - 1 - k)?;
            let mask = valid_mask(&gt, &m);
            let first;
            let interval = if k == 0 {
                first = DepthRangeMap::new(
                    Grid::filled(gt.width(), gt.height(), lo),
                    Grid::filled(gt.width(), gt.height(), hi),
                )?;
                &first
            } else {
                &pred.ranges[k - 1]
            };
            ranges[k].add(interval, &gt, &mask)?;
            let depth = &pred.depths[k];
            if !depth.same_shape(&gt) {
                return Err(Error::ShapeMismatch(format!(
                    "stage {} depth of {}",
                    k + 1,
                    scene.name
                ))
                .into());
            }
            pooled[k].0.extend_from_slice(depth.as_slice());
            pooled[k].1.extend_from_slice(gt.as_slice());
            pooled[k].2.extend_from_slice(mask.as_slice());
        }
    }
    let mut stages = Vec::with_capacity(STAGES);
    for (k, (pred, gt, mask)) in pooled.into_iter().enumerate() {
        let range = ranges[k].finish()?;
        let spacing = range.mean_length / (cfg.stage.planes[k].max(2) - 1) as f64;
        let n = pred.len();
        let depth = depth_error_stats(
            &Grid::from_vec(n, 1, pred)?,
            &Grid::from_vec(n, 1, gt)?,
            &Grid::from_vec(n, 1, mask)?,
            spacing,
        )?;
        stages.push(StageEval { range, depth });
    }
    Ok(MethodEval {
        method: name.to_string(),
        stages,
    })
}

fn evaluate_method(
    cfg: &RunConfig,
    name: &str,
    root: &Path,
    scenes: &[Scene],
    single: bool,
) -> Result<MethodEval> {
    let preds: Vec<Prediction> = scenes
        .iter()
        .map(|s| Prediction::read(&prediction_dir(root, s, single)))
        .collect::<Result<_>>()?;
    evaluate_predictions(cfg, name, scenes, &preds)
}

/// Evaluates each `(name, prediction dir)` against the ground truth scenes.
/// A prediction dir holds one scene's outputs when `gt` is a single scene,
/// otherwise one subdirectory per scene name.
pub fn cmd_eval(
    cfg: &RunConfig,
    gt: &Path,
    predictions: &[(String, PathBuf)],
    report: &Path,
    clouds: Option<(&Path, &Path)>,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(CliError::Config(
            "at least one prediction directory is required".into(),
        ));
    }
    require_dir(gt)?;
    for (_, p) in predictions {
        require_dir(p)?;
    }
    if let Some((a, b)) = clouds {
        require_file(a)?;
        require_file(b)?;
    }
    prepare_parent(report)?;
    let single = gt.join(MANIFEST).is_file();
    let scenes = load_scenes(gt)?;
    let methods: Vec<MethodEval> = predictions
        .iter()
        .map(|(name, dir)| evaluate_method(cfg, name, dir, &scenes, single))
        .collect::<Result<_>>()?;
    let cloud = match clouds {
        Some((pred, truth)) => {
            let cap = cfg.eval.dist_cap.unwrap_or_else(|| {
                default_dist_cap(
                    methods[0].stages[STAGES - 1].range.mean_length,
                    cfg.stage.planes[STAGES - 1],
                )
            });
            Some(cloud_metrics(
                &read_ply(pred)?.positions(),
                &read_ply(truth)?.positions(),
                cap,
            )?)
        }
        None => None,
    };
    let out = EvalReport { methods, cloud };
    write_report(&out, report)?;
    Ok(out)
}

/// Tolerance each gradient check must meet.
pub fn grad_tolerance(target: GradCheckTarget) -> f64 {
    match target {
        GradCheckTarget::LinearToy => 1e-10,
        _ => 1e-4,
    }
}

pub fn cmd_gradcheck(
    cfg: &RunConfig,
    eps: f64,
    targets: &[GradCheckTarget],
) -> Result<Vec<GradCheckReport>> {
    if !(eps > 0.0) {
        return Err(CliError::Config(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    targets
        .iter()
        .map(|&t| grad_check(t, cfg.seed, eps).map_err(CliError::from))
        .collect()
}
