//! Three-stage coarse-to-fine inference.
//!
//! Stage 1 sweeps the whole scene range at quarter resolution. Each later
//! stage doubles the resolution and sweeps a per-pixel interval derived from
//! the previous stage, either from the learned uncertainty or from a fixed
//! shrink factor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost_volume::{
    build_cost_volume, regularize_traced, soft_argmin, CostVolume, DepthHypotheses,
    ProbabilityVolume, RegularizeTrace, Smoothing, Temperature,
};
use crate::error::{Error, Result};
use crate::features::{extract_pyramid, FeatureExtractor, FeatureMap, FeaturePyramid};
use crate::geometry::{sample_depth_planes, CameraParams};
use crate::grid::{DepthMap, Grid, Mask};
use crate::io::{write_pfm, GrayImage};
use crate::rem::{
    dynamic_range, probability_tensor, rem_eval, DepthRangeMap, DynamicRange, RemPair,
    UncertaintyMap,
};

pub const STAGES: usize = 3;
/// Resolution divisor of each stage.
pub const DIVISORS: [usize; STAGES] = [4, 2, 1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSettings {
    pub spatial_radius: usize,
    pub depth_radius: usize,
    /// Softmax temperature as a fraction of the volume's mean cost.
    pub temperature_factor: f64,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self {
            spatial_radius: 1,
            depth_radius: 1,
            temperature_factor: 0.05,
        }
    }
}

impl StageSettings {
    pub fn smoothing(&self) -> Smoothing {
        Smoothing {
            spatial_radius: self.spatial_radius,
            depth_radius: self.depth_radius,
        }
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::RelativeToMean(self.temperature_factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub planes: [usize; STAGES],
    /// Interval scale for the transitions 1 to 2 and 2 to 3.
    pub lambdas: [f64; 2],
    pub stages: [StageSettings; STAGES],
    /// Keep probability volumes in the output.
    pub retain_volumes: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            planes: [48, 32, 8],
            lambdas: [1.5, 0.75],
            stages: [StageSettings::default(); STAGES],
            retain_volumes: false,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes.contains(&0) {
            return Err(Error::ZeroCount);
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::NonPositiveLambda(*l));
        }
        if let Some(s) = self.stages.iter().find(|s| !(s.temperature_factor > 0.0)) {
            return Err(Error::NonPositiveTemperature(s.temperature_factor));
        }
        Ok(())
    }
}

/// How the interval of each later stage is chosen.
#[derive(Debug, Clone, Copy)]
pub enum RangeStrategy<'a> {
    Learned(&'a RemPair),
    /// Interval length is `shrink[k]` times the previous stage's length.
    Fixed {
        shrink: [f64; 2],
    },
}

/// Reference view first.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub images: Vec<GrayImage>,
    pub cameras: Vec<CameraParams>,
    pub depth_range: (f64, f64),
}

impl ViewSet {
    pub fn validate(&self) -> Result<()> {
        if self.images.len() < 2 {
            return Err(Error::TooFewViews {
                needed: 2,
                got: self.images.len(),
            });
        }
        if self.images.len() != self.cameras.len() {
            return Err(Error::ShapeMismatch("one camera per image".into()));
        }
        let (w, h) = (self.images[0].width(), self.images[0].height());
        if w % 4 != 0 || h % 4 != 0 || w == 0 || h == 0 {
            return Err(Error::BadDimensions {
                width: w,
                height: h,
            });
        }
        if self
            .images
            .iter()
            .any(|i| (i.width(), i.height()) != (w, h))
        {
            return Err(Error::ShapeMismatch("views differ in size".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::EmptyRange { low: lo, high: hi });
        }
        Ok(())
    }

    pub fn scene_len(&self) -> f64 {
        self.depth_range.1 - self.depth_range.0
    }
}

/// Interval handed from one stage to the next.
#[derive(Debug, Clone)]
pub struct Transition {
    /// At the generating stage's resolution.
    pub range: DepthRangeMap,
    /// Upsampled to the next stage; the interval its planes are sampled in.
    pub next: DepthRangeMap,
    pub uncertainty: Option<UncertaintyMap>,
    /// Present for learned ranges.
    pub dynamic: Option<DynamicRange>,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub depth: DepthMap,
    pub valid: Mask,
    pub hypotheses: DepthHypotheses,
    pub probability: Option<ProbabilityVolume>,
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub stages: Vec<StageOutput>,
    pub transitions: Vec<Transition>,
}

impl CascadeOutput {
    pub fn final_depth(&self) -> &DepthMap {
        &self.stages[STAGES - 1].depth
    }

    /// Writes `stage{k}.pfm` and `range{k}.{min,max}.pfm` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, s) in self.stages.iter().enumerate() {
            write_pfm(&dir.join(format!("stage{}.pfm", k + 1)), &s.depth)?;
        }
        for (k, t) in self.transitions.iter().enumerate() {
            t.next
                .write_pfm_pair(&dir.join(format!("range{}", k + 2)))?;
            if let Some(u) = &t.uncertainty {
                write_pfm(&dir.join(format!("uncertainty{}.pfm", k + 1)), u.values())?;
            }
        }
        Ok(())
    }
}

/// Features of every view at every scale.
pub fn view_features(
    images: &[GrayImage],
    extractor: &FeatureExtractor,
) -> Result<Vec<FeaturePyramid>> {
    images
        .iter()
        .map(|i| extract_pyramid(i, extractor))
        .collect()
}

/// Cameras with intrinsics rescaled to stage `k`.
pub fn stage_cameras(cams: &[CameraParams], k: usize) -> Vec<CameraParams> {
    cams.iter()
        .map(|c| c.scaled(1.0 / DIVISORS[k] as f64))
        .collect()
}

/// Everything one plane sweep produces.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub cost: CostVolume,
    pub probability: ProbabilityVolume,
    pub trace: RegularizeTrace,
    pub depth: DepthMap,
}

/// Plane sweep over `feats` (reference first) at one stage.
pub fn sweep(
    feats: &[&FeatureMap],
    cams: &[CameraParams],
    hyps: &DepthHypotheses,
    settings: &StageSettings,
) -> Result<Sweep> {
    let src_cams: Vec<&CameraParams> = cams[1..].iter().collect();
    let cost = build_cost_volume(feats[0], &feats[1..], &cams[0], &src_cams, hyps)?;
    let (probability, trace) =
        regularize_traced(&cost, settings.smoothing(), settings.temperature())?;
    let depth = soft_argmin(&probability, hyps)?;
    Ok(Sweep {
        cost,
        probability,
        trace,
        depth,
    })
}

/// Uniform-length interval centered on each depth and shifted (not clipped)
/// into the scene range.
pub fn fixed_interval(
    depth: &DepthMap,
    len: f64,
    scene_range: (f64, f64),
) -> Result<DepthRangeMap> {
    let (lo, hi) = scene_range;
    let len = len.min(hi - lo);
    if !(len >= 0.0) {
        return Err(Error::InvalidParameter(format!("interval length {len}")));
    }
    let low = depth.map(|d| (d - 0.5 * len).clamp(lo, hi - len));
    let high = low.map(|l| l + len);
    DepthRangeMap::new(low, high)
}

/// Snap length used when clipping empties an interval: one plane spacing of
/// the generating stage over the scene range.
pub fn snap_len(cfg: &StageConfig, k: usize, scene_len: f64) -> f64 {
    scene_len / (cfg.planes[k].max(2) - 1) as f64
}

/// Full cascade.
pub fn infer(
    views: &ViewSet,
    extractor: &FeatureExtractor,
    strategy: RangeStrategy,
    cfg: &StageConfig,
) -> Result<CascadeOutput> {
    views.validate()?;
    cfg.validate()?;
    let pyramids = view_features(&views.images, extractor)?;
    let (w, h) = (views.images[0].width(), views.images[0].height());
    let scene_len = views.scene_len();

    let mut stages = Vec::with_capacity(STAGES);
    let mut transitions = Vec::with_capacity(STAGES - 1);
    let planes1 = sample_depth_planes(views.depth_range.0, views.depth_range.1, cfg.planes[0])?;
    let mut hyps = DepthHypotheses::uniform(w / DIVISORS[0], h / DIVISORS[0], &planes1);
    // per-pixel length of the interval swept by the current stage
    let mut swept_len = Grid::filled(hyps.width, hyps.height, scene_len);

    for k in 0..STAGES {
        let feats: Vec<&FeatureMap> = pyramids.iter().map(|p| &p.levels[k]).collect();
        let cams = stage_cameras(&views.cameras, k);
        let s = sweep(&feats, &cams, &hyps, &cfg.stages[k])?;
        let valid = s.probability.valid.clone();
        let mut next_hyps = None;

        if k + 1 < STAGES {
            let (range, uncertainty, dynamic) = match strategy {
                RangeStrategy::Learned(rem) => {
                    let x = probability_tensor(&[&s.probability])?;
                    let c = UncertaintyMap::from_tensor(&rem_eval(&x, rem.get(k))?)?.remove(0);
                    let dr = dynamic_range(
                        &s.depth,
                        &c,
                        cfg.lambdas[k],
                        &swept_len,
                        views.depth_range,
                        snap_len(cfg, k, scene_len),
                    )?;
                    (dr.ranges.clone(), Some(c), Some(dr))
                }
                RangeStrategy::Fixed { shrink } => {
                    let prev = swept_len.as_slice()[0];
                    (
                        fixed_interval(&s.depth, shrink[k] * prev, views.depth_range)?,
                        None,
                        None,
                    )
                }
            };
            let next = range.upsample2()?;
            next_hyps = Some(DepthHypotheses::from_intervals(
                &next.low,
                &next.high,
                cfg.planes[k + 1],
            )?);
            swept_len = next.lengths();
            transitions.push(Transition {
                range,
                next,
                uncertainty,
                dynamic,
            });
        }
        stages.push(StageOutput {
            depth: s.depth,
            valid,
            hypotheses: hyps,
            probability: cfg.retain_volumes.then_some(s.probability),
        });
        match next_hyps {
            Some(n) => hyps = n,
            None => break,
        }
    }
    Ok(CascadeOutput {
        stages,
        transitions,
    })
}

/// Cascade with uniform shrink factors instead of learned ranges.
pub fn fixed_range_baseline(
    views: &ViewSet,
    extractor: &FeatureExtractor,
    shrink: [f64; 2],
    cfg: &StageConfig,
) -> Result<CascadeOutput> {
    if let Some(s) = shrink.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "shrink factor {s} must be positive"
        )));
    }
    infer(views, extractor, RangeStrategy::Fixed { shrink }, cfg)
}
