//! Training of the range estimators, optionally with the feature extractor.
//!
//! The differentiable part of a training step is the cascade "head": given
//! the probability volumes of the three sweeps (treated as constants) and
//! the two uncertainty maps, it rebuilds every interval and hypothesis set
//! and evaluates the weighted stage and refined losses. Its backward pass
//! yields gradients for both uncertainty maps, which the range estimators
//! then backpropagate into their weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_volume::{
    cost_volume_backward, regularize_backward, soft_argmin, DepthHypotheses, ProbabilityVolume,
};
use crate::error::{Error, Result};
use crate::features::{
    extract_pyramid, extract_trainable, feature_backward, FeatureCache, FeatureExtractor,
    FeatureMap, FeaturePyramid, FeatureWeights,
};
use crate::geometry::{sample_depth_planes, CameraParams};
use crate::grid::{DepthMap, Grid, Mask};
use crate::loss::{
    clamp_refine, refined_depth, smooth_l1, smooth_l1_grad, soft_refined_backward, total_loss,
    ClampMode, LossWeights,
};
use crate::nn::Tensor4;
use crate::pipeline::{snap_len, stage_cameras, sweep, StageConfig, Sweep, STAGES};
use crate::rem::{
    dynamic_range, probability_tensor, rem_backward, rem_forward_train, DepthRangeMap,
    DynamicRange, RemPair, RemWeights, UncertaintyMap,
};
use crate::synth::Scene;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: usize, lr: f64) -> Self {
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
        }
    }
}

/// Bias-corrected adaptive-moment update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.b1.powi(t);
    let c2 = 1.0 - state.b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = state.b1 * *m + (1.0 - state.b1) * g;
        *v = state.b2 * *v + (1.0 - state.b2) * g * g;
        *p -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Supplied by the caller rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    pub lr: f64,
    /// `(epoch, multiplier)`: from that 1-based epoch on, the rate is multiplied.
    pub lr_schedule: Vec<(usize, f64)>,
    pub loss: LossWeights,
    /// Soft clamp width as a fraction of the clamped stage's plane spacing.
    pub tau_factor: f64,
    pub train_rem: bool,
    pub train_features: bool,
    pub feature_channels: usize,
    /// Gradient through the refined losses into the uncertainty.
    pub refined_path: bool,
    /// Gradient through hypothesis positions of later stages.
    pub hypothesis_path: bool,
    /// Stop after this many steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 2,
            seed: 0,
            lr: 1e-3,
            lr_schedule: vec![(10, 0.5), (12, 0.5), (14, 0.5)],
            loss: LossWeights::default(),
            tau_factor: 0.5,
            train_rem: true,
            train_features: false,
            feature_channels: crate::features::DEFAULT_TRAINABLE_CHANNELS,
            refined_path: true,
            hypothesis_path: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if let Some((e, m)) = self.lr_schedule.iter().find(|(_, m)| !(*m > 0.0)) {
            return bad(format!("schedule multiplier {m} at epoch {e}"));
        }
        if !(self.tau_factor > 0.0) {
            return bad(format!("soft clamp factor {}", self.tau_factor));
        }
        self.loss.validate()
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.lr, |lr, (_, m)| lr * m)
    }
}

/// Per-pixel soft clamp widths for a stage whose intervals have the given lengths.
fn tau_map(lengths: &DepthMap, planes: usize, factor: f64) -> DepthMap {
    let gaps = planes.max(2) - 1;
    lengths.map(|l| (factor * l / gaps as f64).max(1e-9))
}

/// Fractional position of each plane inside its interval.
fn plane_fractions(count: usize) -> Vec<f64> {
    if count == 1 {
        vec![0.5]
    } else {
        (0..count).map(|j| j as f64 / (count - 1) as f64).collect()
    }
}

/// Learned interval for the next stage: range at this stage's resolution,
/// its upsampled copy and the next stage's hypotheses.
pub fn learned_transition(
    depth: &DepthMap,
    c: &UncertaintyMap,
    k: usize,
    prev_len: &DepthMap,
    scene_range: (f64, f64),
    cfg: &StageConfig,
) -> Result<(DynamicRange, DepthRangeMap, DepthHypotheses)> {
    let scene_len = scene_range.1 - scene_range.0;
    let dr = dynamic_range(
        depth,
        c,
        cfg.lambdas[k],
        prev_len,
        scene_range,
        snap_len(cfg, k, scene_len),
    )?;
    let next = dr.ranges.upsample2()?;
    let hyps = DepthHypotheses::from_intervals(&next.low, &next.high, cfg.planes[k + 1])?;
    Ok((dr, next, hyps))
}

/// Frozen inputs of the head for one scene.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub scene_range: (f64, f64),
    pub depth1: DepthMap,
    pub hyps1: DepthHypotheses,
    pub prob: [ProbabilityVolume; 3],
    /// Ground truth at each stage's resolution.
    pub gt: [DepthMap; 3],
    pub gt_mask: [Mask; 3],
    /// Soft clamp widths to use instead of the ones derived from the intervals.
    pub tau: Option<[DepthMap; 2]>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadSettings<'a> {
    pub stage: &'a StageConfig,
    pub loss: LossWeights,
    pub tau_factor: f64,
    pub refined_path: bool,
    pub hypothesis_path: bool,
}

#[derive(Debug, Clone)]
pub struct HeadForward {
    pub stage_losses: [f64; 3],
    pub refined_losses: [f64; 2],
    pub total: f64,
    dr: [DynamicRange; 2],
    next: [DepthRangeMap; 2],
    hyps: [DepthHypotheses; 2],
    depth: [DepthMap; 2],
    prev_len: [DepthMap; 2],
    tau: [DepthMap; 2],
    masks: [Mask; 3],
    refined: [(crate::loss::RefinedDistribution, DepthMap, Mask); 2],
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub c: [DepthMap; 2],
    /// Total gradient with respect to each stage's regressed depth.
    pub depth: [DepthMap; 3],
    /// Refined-loss gradient with respect to the stage 1 and 2 probabilities.
    pub refined_prob: [Vec<f64>; 2],
}

fn stage_mask(gt_mask: &Mask, pv: &ProbabilityVolume) -> Mask {
    Grid::from_fn(gt_mask.width(), gt_mask.height(), |x, y| {
        *gt_mask.get(x, y) && *pv.valid.get(x, y)
    })
}

pub fn head_forward(
    s: &HeadSample,
    c: [&UncertaintyMap; 2],
    set: &HeadSettings,
) -> Result<HeadForward> {
    let cfg = set.stage;
    let scene_len = s.scene_range.1 - s.scene_range.0;
    let len1 = Grid::filled(s.depth1.width(), s.depth1.height(), scene_len);
    let (dr1, next1, hyps2) = learned_transition(&s.depth1, c[0], 0, &len1, s.scene_range, cfg)?;
    let depth2 = soft_argmin(&s.prob[1], &hyps2)?;
    let len2 = next1.lengths();
    let (dr2, next2, hyps3) = learned_transition(&depth2, c[1], 1, &len2, s.scene_range, cfg)?;
    let depth3 = soft_argmin(&s.prob[2], &hyps3)?;

    let masks = [0, 1, 2].map(|k| stage_mask(&s.gt_mask[k], &s.prob[k]));
    let depths = [&s.depth1, &depth2, &depth3];
    let mut stage_losses = [0.0; 3];
    for k in 0..3 {
        stage_losses[k] = smooth_l1(depths[k], &s.gt[k], &masks[k])?.value;
    }
    let tau = match &s.tau {
        Some(t) => t.clone(),
        None => [
            tau_map(&len1, cfg.planes[0], set.tau_factor),
            tau_map(&len2, cfg.planes[1], set.tau_factor),
        ],
    };
    let refine = |k: usize, hyps: &DepthHypotheses, dr: &DynamicRange| -> Result<_> {
        let rd = clamp_refine(
            hyps,
            &s.prob[k],
            &dr.ranges,
            ClampMode::SoftPerPixel(&tau[k]),
        )?;
        let (d, m) = refined_depth(&rd);
        let m = Grid::from_fn(m.width(), m.height(), |x, y| {
            *m.get(x, y) && *masks[k].get(x, y)
        });
        Ok((rd, d, m))
    };
    let refined = [refine(0, &s.hyps1, &dr1)?, refine(1, &hyps2, &dr2)?];
    let mut refined_losses = [0.0; 2];
    for k in 0..2 {
        refined_losses[k] = smooth_l1(&refined[k].1, &s.gt[k], &refined[k].2)?.value;
    }
    Ok(HeadForward {
        stage_losses,
        refined_losses,
        total: total_loss(stage_losses, refined_losses, &set.loss),
        dr: [dr1, dr2],
        next: [next1, next2],
        hyps: [hyps2, hyps3],
        depth: [depth2, depth3],
        prev_len: [len1, len2],
        tau,
        masks,
        refined,
    })
}

/// Gradient of a sampled-interval hypothesis set with respect to its bounds.
fn interval_backward(
    dhyps: &[f64],
    pixels: usize,
    planes: usize,
    dlow: &mut DepthMap,
    dhigh: &mut DepthMap,
) {
    let t = plane_fractions(planes);
    for i in 0..pixels {
        let (mut gl, mut gh) = (0.0, 0.0);
        for (j, tj) in t.iter().enumerate() {
            let g = dhyps[j * pixels + i];
            gl += (1.0 - tj) * g;
            gh += tj * g;
        }
        dlow.as_mut_slice()[i] += gl;
        dhigh.as_mut_slice()[i] += gh;
    }
}

/// Backward of the clipped interval `[L - h, L + h]` with `h = lambda C R`.
/// Returns `(dL, dC, dR)`.
fn clip_backward(
    depth: &DepthMap,
    c: &UncertaintyMap,
    prev_len: &DepthMap,
    lambda: f64,
    dr: &DynamicRange,
    scene_range: (f64, f64),
    dlow: &DepthMap,
    dhigh: &DepthMap,
) -> (DepthMap, DepthMap, DepthMap) {
    let (w, h) = (depth.width(), depth.height());
    let (mut dl, mut dc, mut drl) = (
        Grid::filled(w, h, 0.0),
        Grid::filled(w, h, 0.0),
        Grid::filled(w, h, 0.0),
    );
    for i in 0..depth.len() {
        if dr.snapped.as_slice()[i] {
            continue;
        }
        let l = depth.as_slice()[i];
        let half = dr.half_width.as_slice()[i];
        let (mut g_l, mut g_h) = (0.0, 0.0);
        if l - half > scene_range.0 {
            g_l += dlow.as_slice()[i];
            g_h -= dlow.as_slice()[i];
        }
        if l + half < scene_range.1 {
            g_l += dhigh.as_slice()[i];
            g_h += dhigh.as_slice()[i];
        }
        dl.as_mut_slice()[i] = g_l;
        dc.as_mut_slice()[i] = lambda * prev_len.as_slice()[i] * g_h;
        drl.as_mut_slice()[i] = lambda * c.values().as_slice()[i] * g_h;
    }
    (dl, dc, drl)
}

fn add_into(dst: &mut DepthMap, src: &DepthMap) {
    for (a, b) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *a += b;
    }
}

fn scaled(m: &DepthMap, s: f64) -> DepthMap {
    m.map(|v| v * s)
}

pub fn head_backward(
    s: &HeadSample,
    c: [&UncertaintyMap; 2],
    f: &HeadForward,
    set: &HeadSettings,
) -> Result<HeadGrads> {
    let cfg = set.stage;
    let w = &set.loss;
    let zeros = |m: &DepthMap| Grid::filled(m.width(), m.height(), 0.0);

    // stage 3 loss through the stage-3 hypotheses
    let g3 = scaled(
        &smooth_l1_grad(&f.depth[1], &s.gt[2], &f.masks[2])?,
        w.alpha[2],
    );
    let mut dnext2_low = zeros(&f.next[1].low);
    let mut dnext2_high = zeros(&f.next[1].high);
    if set.hypothesis_path {
        let n3 = f.hyps[1].pixel_count();
        let dh3: Vec<f64> = (0..n3 * cfg.planes[2])
            .map(|e| s.prob[2].prob[e] * g3.as_slice()[e % n3])
            .collect();
        interval_backward(&dh3, n3, cfg.planes[2], &mut dnext2_low, &mut dnext2_high);
    }
    let mut dlow2 = Grid::upsample2_bilinear_adjoint(&dnext2_low);
    let mut dhigh2 = Grid::upsample2_bilinear_adjoint(&dnext2_high);

    // refined loss of stage 2
    let mut refined_prob2 = vec![0.0; s.prob[1].prob.len()];
    let mut dhyps2 = vec![0.0; s.prob[1].prob.len()];
    {
        let (rd, d, m) = &f.refined[1];
        let gr = scaled(&smooth_l1_grad(d, &s.gt[1], m)?, w.beta[1]);
        let rg = soft_refined_backward(
            &f.hyps[0],
            &s.prob[1],
            &f.dr[1].ranges,
            ClampMode::SoftPerPixel(&f.tau[1]),
            rd,
            &gr,
        )?;
        if set.refined_path {
            add_into(&mut dlow2, &rg.low);
            add_into(&mut dhigh2, &rg.high);
        }
        if set.hypothesis_path {
            dhyps2 = rg.hyps;
        }
        refined_prob2 = rg
            .prob
            .iter()
            .zip(&refined_prob2)
            .map(|(a, b)| a + b)
            .collect();
    }

    let (dl2_range, dc2, dlen2) = clip_backward(
        &f.depth[0],
        c[1],
        &f.prev_len[1],
        cfg.lambdas[1],
        &f.dr[1],
        s.scene_range,
        &dlow2,
        &dhigh2,
    );
    let mut g2 = scaled(
        &smooth_l1_grad(&f.depth[0], &s.gt[1], &f.masks[1])?,
        w.alpha[1],
    );
    add_into(&mut g2, &dl2_range);

    // stage-2 hypotheses carry gradient from the stage-2 depth, the refined
    // stage-2 loss, and the length that scales the second interval
    let mut dnext1_low = zeros(&f.next[0].low);
    let mut dnext1_high = zeros(&f.next[0].high);
    if set.hypothesis_path {
        let n2 = f.hyps[0].pixel_count();
        for (e, dh) in dhyps2.iter_mut().enumerate() {
            *dh += s.prob[1].prob[e] * g2.as_slice()[e % n2];
        }
        interval_backward(
            &dhyps2,
            n2,
            cfg.planes[1],
            &mut dnext1_low,
            &mut dnext1_high,
        );
        for i in 0..n2 {
            let g = dlen2.as_slice()[i];
            dnext1_high.as_mut_slice()[i] += g;
            dnext1_low.as_mut_slice()[i] -= g;
        }
    }
    let mut dlow1 = Grid::upsample2_bilinear_adjoint(&dnext1_low);
    let mut dhigh1 = Grid::upsample2_bilinear_adjoint(&dnext1_high);

    let mut refined_prob1 = vec![0.0; s.prob[0].prob.len()];
    {
        let (rd, d, m) = &f.refined[0];
        let gr = scaled(&smooth_l1_grad(d, &s.gt[0], m)?, w.beta[0]);
        let rg = soft_refined_backward(
            &s.hyps1,
            &s.prob[0],
            &f.dr[0].ranges,
            ClampMode::SoftPerPixel(&f.tau[0]),
            rd,
            &gr,
        )?;
        if set.refined_path {
            add_into(&mut dlow1, &rg.low);
            add_into(&mut dhigh1, &rg.high);
        }
        refined_prob1 = rg
            .prob
            .iter()
            .zip(&refined_prob1)
            .map(|(a, b)| a + b)
            .collect();
    }
    let (dl1_range, dc1, _) = clip_backward(
        &s.depth1,
        c[0],
        &f.prev_len[0],
        cfg.lambdas[0],
        &f.dr[0],
        s.scene_range,
        &dlow1,
        &dhigh1,
    );
    let mut g1 = scaled(
        &smooth_l1_grad(&s.depth1, &s.gt[0], &f.masks[0])?,
        w.alpha[0],
    );
    add_into(&mut g1, &dl1_range);

    Ok(HeadGrads {
        c: [dc1, dc2],
        depth: [g1, g2, g3],
        refined_prob: [refined_prob1, refined_prob2],
    })
}

/// Per-step loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub refined1: f64,
    pub refined2: f64,
    pub total: f64,
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::format("csv", path, e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format("csv", path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scene data that does not change during training.
struct Prepared {
    images: Vec<crate::io::GrayImage>,
    cams: [Vec<CameraParams>; 3],
    range: (f64, f64),
    gt: [DepthMap; 3],
    gt_mask: [Mask; 3],
    /// Fixed-feature pyramids and the stage-1 sweep, reused every step.
    fixed: Option<(Vec<FeaturePyramid>, Sweep)>,
}

fn prepare(scene: &Scene, cfg: &StageConfig, fixed_features: bool) -> Result<Prepared> {
    if scene.images.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: scene.images.len(),
        });
    }
    let cams = [0, 1, 2].map(|k| stage_cameras(&scene.cameras, k));
    let mut gt: Vec<DepthMap> = Vec::new();
    let mut gt_mask: Vec<Mask> = Vec::new();
    for k in 0..STAGES {
        let (d, m) = scene.gt_at_level(STAGES - 1 - k)?;
        gt.push(d);
        gt_mask.push(m);
    }
    let range = scene.depth_range();
    let fixed = if fixed_features {
        let pyr: Vec<FeaturePyramid> = scene
            .images
            .iter()
            .map(|i| extract_pyramid(i, &FeatureExtractor::Fixed))
            .collect::<Result<_>>()?;
        let s1 = stage1_sweep(&pyr, &cams[0], range, cfg)?;
        Some((pyr, s1))
    } else {
        None
    };
    Ok(Prepared {
        images: scene.images.clone(),
        cams,
        range,
        gt: gt.try_into().expect("three stages"),
        gt_mask: gt_mask.try_into().expect("three stages"),
        fixed,
    })
}

fn stage1_hyps(
    w: usize,
    h: usize,
    range: (f64, f64),
    cfg: &StageConfig,
) -> Result<DepthHypotheses> {
    Ok(DepthHypotheses::uniform(
        w,
        h,
        &sample_depth_planes(range.0, range.1, cfg.planes[0])?,
    ))
}

fn stage1_sweep(
    pyr: &[FeaturePyramid],
    cams: &[CameraParams],
    range: (f64, f64),
    cfg: &StageConfig,
) -> Result<Sweep> {
    let feats: Vec<&FeatureMap> = pyr.iter().map(|p| &p.levels[0]).collect();
    let hyps = stage1_hyps(feats[0].width, feats[0].height, range, cfg)?;
    sweep(&feats, cams, &hyps, &cfg.stages[0])
}

/// Result of one forward/backward pass over a batch.
pub struct StepResult {
    pub losses: LogRow,
    /// Gradients for stage-1 REM, stage-2 REM and (if trained) feature weights.
    pub grads: (Vec<f64>, Vec<f64>, Option<Vec<f64>>),
}

/// Forward and backward pass over a batch. Updates batch-norm running
/// statistics of `rem` as a side effect.
fn batch_step(
    batch: &[&Prepared],
    rem: &mut RemPair,
    features: Option<&FeatureWeights>,
    stage: &StageConfig,
    tcfg: &TrainConfig,
) -> Result<StepResult> {
    let b = batch.len();
    let set = HeadSettings {
        stage,
        loss: tcfg.loss,
        tau_factor: tcfg.tau_factor,
        refined_path: tcfg.refined_path,
        hypothesis_path: tcfg.hypothesis_path,
    };
    // features and stage-1 sweeps
    let mut trainable: Vec<Vec<(FeaturePyramid, FeatureCache)>> = Vec::new();
    let mut sweeps1: Vec<Sweep> = Vec::with_capacity(b);
    let mut pyramids: Vec<Vec<FeaturePyramid>> = Vec::with_capacity(b);
    for p in batch {
        match (features, &p.fixed) {
            (Some(fw), _) => {
                let per_view: Vec<(FeaturePyramid, FeatureCache)> = p
                    .images
                    .iter()
                    .map(|i| extract_trainable(i, fw))
                    .collect::<Result<_>>()?;
                let pyr: Vec<FeaturePyramid> = per_view.iter().map(|(p, _)| p.clone()).collect();
                sweeps1.push(stage1_sweep(&pyr, &p.cams[0], p.range, stage)?);
                pyramids.push(pyr);
                trainable.push(per_view);
            }
            (None, Some((pyr, s1))) => {
                sweeps1.push(s1.clone());
                pyramids.push(pyr.clone());
            }
            (None, None) => unreachable!("fixed features are prepared"),
        }
    }

    let x1 = probability_tensor(&sweeps1.iter().map(|s| &s.probability).collect::<Vec<_>>())?;
    let (c1t, cache1) = rem_forward_train(&x1, &mut rem.stage1)?;
    let c1 = UncertaintyMap::from_tensor(&c1t)?;

    let mut hyps2s = Vec::with_capacity(b);
    let mut lens2 = Vec::with_capacity(b);
    let mut sweeps2 = Vec::with_capacity(b);
    for (i, p) in batch.iter().enumerate() {
        let len1 = Grid::filled(
            sweeps1[i].depth.width(),
            sweeps1[i].depth.height(),
            p.range.1 - p.range.0,
        );
        let (_, next1, hyps2) =
            learned_transition(&sweeps1[i].depth, &c1[i], 0, &len1, p.range, stage)?;
        lens2.push(next1.lengths());
        let feats: Vec<&FeatureMap> = pyramids[i].iter().map(|q| &q.levels[1]).collect();
        sweeps2.push(sweep(&feats, &p.cams[1], &hyps2, &stage.stages[1])?);
        hyps2s.push(hyps2);
    }
    let x2 = probability_tensor(&sweeps2.iter().map(|s| &s.probability).collect::<Vec<_>>())?;
    let (c2t, cache2) = rem_forward_train(&x2, &mut rem.stage2)?;
    let c2 = UncertaintyMap::from_tensor(&c2t)?;

    let mut hyps3s = Vec::with_capacity(b);
    let mut sweeps3 = Vec::with_capacity(b);
    for (i, p) in batch.iter().enumerate() {
        let (_, _, hyps3) =
            learned_transition(&sweeps2[i].depth, &c2[i], 1, &lens2[i], p.range, stage)?;
        let feats: Vec<&FeatureMap> = pyramids[i].iter().map(|q| &q.levels[2]).collect();
        sweeps3.push(sweep(&feats, &p.cams[2], &hyps3, &stage.stages[2])?);
        hyps3s.push(hyps3);
    }

    let mut dc1 = Tensor4::zeros(b, 1, c1t.h, c1t.w);
    let mut dc2 = Tensor4::zeros(b, 1, c2t.h, c2t.w);
    let mut sums = [0.0; 6];
    let mut feature_grads = features.map(|fw| vec![0.0; fw.param_count()]);
    let scale = 1.0 / b as f64;
    for (i, p) in batch.iter().enumerate() {
        let sample = HeadSample {
            scene_range: p.range,
            depth1: sweeps1[i].depth.clone(),
            hyps1: stage1_hyps(
                sweeps1[i].depth.width(),
                sweeps1[i].depth.height(),
                p.range,
                stage,
            )?,
            prob: [
                sweeps1[i].probability.clone(),
                sweeps2[i].probability.clone(),
                sweeps3[i].probability.clone(),
            ],
            gt: p.gt.clone(),
            gt_mask: p.gt_mask.clone(),
            tau: None,
        };
        let cs = [&c1[i], &c2[i]];
        let fwd = head_forward(&sample, cs, &set)?;
        let g = head_backward(&sample, cs, &fwd, &set)?;
        for (k, v) in fwd
            .stage_losses
            .iter()
            .chain(&fwd.refined_losses)
            .enumerate()
        {
            sums[k] += v * scale;
        }
        sums[5] += fwd.total * scale;
        dc1.image_mut(i)
            .iter_mut()
            .zip(g.c[0].as_slice())
            .for_each(|(a, v)| *a = v * scale);
        dc2.image_mut(i)
            .iter_mut()
            .zip(g.c[1].as_slice())
            .for_each(|(a, v)| *a = v * scale);

        if let (Some(fw), Some(acc)) = (features, feature_grads.as_mut()) {
            let sweeps = [&sweeps1[i], &sweeps2[i], &sweeps3[i]];
            let hyps = [&sample.hyps1, &hyps2s[i], &hyps3s[i]];
            let views = p.images.len();
            let mut level_grads: Vec<[FeatureMap; 3]> = (0..views)
                .map(|v| {
                    std::array::from_fn(|k| {
                        let f = &pyramids[i][v].levels[k];
                        FeatureMap::zeros(f.width, f.height, f.channels)
                    })
                })
                .collect();
            for k in 0..STAGES {
                let sw = sweeps[k];
                let n = sw.depth.len();
                let mut dprob: Vec<f64> = (0..sw.probability.prob.len())
                    .map(|e| hyps[k].depths[e] * g.depth[k].as_slice()[e % n] * scale)
                    .collect();
                if k < 2 {
                    for (d, r) in dprob.iter_mut().zip(&g.refined_prob[k]) {
                        *d += r * scale;
                    }
                }
                let dcost = regularize_backward(
                    &sw.cost,
                    &sw.probability,
                    &sw.trace,
                    stage.stages[k].smoothing(),
                    &dprob,
                )?;
                let feats: Vec<&FeatureMap> = pyramids[i].iter().map(|q| &q.levels[k]).collect();
                let src_cams: Vec<&CameraParams> = p.cams[k][1..].iter().collect();
                let (dref, dsrc) = cost_volume_backward(
                    feats[0],
                    &feats[1..],
                    &p.cams[k][0],
                    &src_cams,
                    hyps[k],
                    &dcost,
                )?;
                for (v, d) in std::iter::once(dref).chain(dsrc).enumerate() {
                    level_grads[v][k] = d;
                }
            }
            for (v, lg) in level_grads.iter().enumerate() {
                let gv = feature_backward(fw, &trainable[i][v].1, lg)?;
                acc.iter_mut().zip(gv).for_each(|(a, g)| *a += g);
            }
        }
    }
    let (g1, _) = rem_backward(&rem.stage1, &cache1, &dc1)?;
    let (g2, _) = rem_backward(&rem.stage2, &cache2, &dc2)?;
    Ok(StepResult {
        losses: LogRow {
            step: 0,
            epoch: 0,
            lr: 0.0,
            loss1: sums[0],
            loss2: sums[1],
            loss3: sums[2],
            refined1: sums[3],
            refined2: sums[4],
            total: sums[5],
        },
        grads: (g1, g2, feature_grads),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub rem: RemPair,
    pub features: Option<FeatureWeights>,
    pub log: Vec<LogRow>,
}

/// Trains on `dataset` from seeded initial weights (or `init`).
pub fn train(
    dataset: &[Scene],
    cfg: &TrainConfig,
    stage: &StageConfig,
    init: Option<RemPair>,
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    stage.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rem = match init {
        Some(r) => r,
        None => RemPair::init(stage.planes[0], stage.planes[1], &mut rng),
    };
    let mut features = cfg
        .train_features
        .then(|| FeatureWeights::init(cfg.feature_channels, &mut rng));
    let prepared: Vec<Prepared> = dataset
        .par_iter()
        .map(|s| prepare(s, stage, !cfg.train_features))
        .collect::<Result<_>>()?;

    let n1 = rem.stage1.param_count();
    let n2 = rem.stage2.param_count();
    let nf = features.as_ref().map_or(0, FeatureWeights::param_count);
    let mut params: Vec<f64> = rem.stage1.params();
    params.extend(rem.stage2.params());
    if let Some(f) = &features {
        params.extend(f.params());
    }
    let mut opt = OptimState::new(params.len(), cfg.lr);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let res = batch_step(&batch, &mut rem, features.as_ref(), stage, cfg)?;
            let mut grads = vec![0.0; params.len()];
            if cfg.train_rem {
                grads[..n1].copy_from_slice(&res.grads.0);
                grads[n1..n1 + n2].copy_from_slice(&res.grads.1);
            }
            if let Some(gf) = &res.grads.2 {
                grads[n1 + n2..].copy_from_slice(gf);
            }
            adam_step(&mut params, &grads, &mut opt)?;
            rem.stage1.set_params(&params[..n1])?;
            rem.stage2.set_params(&params[n1..n1 + n2])?;
            if let Some(f) = features.as_mut() {
                f.set_params(&params[n1 + n2..n1 + n2 + nf])?;
            }
            step += 1;
            let mut row = res.losses;
            row.step = step;
            row.epoch = epoch;
            row.lr = opt.lr;
            log::debug!("step {step} epoch {epoch} total {:.6}", row.total);
            log.push(row);
        }
    }
    Ok(TrainOutput { rem, features, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckTarget {
    /// A single linear layer; exact up to rounding.
    LinearToy,
    /// Every range-estimator parameter, normalization included.
    Rem,
    /// Trainable feature extractor parameters.
    Features,
    /// Stage-1 loss with respect to feature parameters through the sweep.
    EndToEndStageLoss,
    /// Soft-clamped refined loss with respect to the uncertainty.
    RefinedLossWrtUncertainty,
    /// Full head loss with respect to both uncertainty maps.
    HypothesisPath,
}

impl GradCheckTarget {
    pub const ALL: [GradCheckTarget; 6] = [
        GradCheckTarget::LinearToy,
        GradCheckTarget::Rem,
        GradCheckTarget::Features,
        GradCheckTarget::EndToEndStageLoss,
        GradCheckTarget::RefinedLossWrtUncertainty,
        GradCheckTarget::HypothesisPath,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradCheckTarget::LinearToy => "linear_toy",
            GradCheckTarget::Rem => "rem",
            GradCheckTarget::Features => "features",
            GradCheckTarget::EndToEndStageLoss => "end_to_end_stage_loss",
            GradCheckTarget::RefinedLossWrtUncertainty => "refined_loss_wrt_uncertainty",
            GradCheckTarget::HypothesisPath => "hypothesis_path",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub target: GradCheckTarget,
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at `x` along every coordinate, compared with
/// `analytic`. Entries far below the gradient's largest magnitude are judged
/// against a floor of 1e-3 of that magnitude.
fn compare(
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(f64, usize)> {
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (1e-3 * scale).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for k in 0..x.len() {
        p[k] = x[k] + eps;
        let up = f(&p)?;
        p[k] = x[k] - eps;
        let down = f(&p)?;
        p[k] = x[k];
        worst = worst.max(relative_error(
            analytic[k],
            (up - down) / (2.0 * eps),
            floor,
        ));
    }
    Ok((worst, x.len()))
}

/// Small synthetic sample for the head checks: 16x16 views, at most 8 planes.
fn tiny_setup(seed: u64) -> Result<(Scene, StageConfig)> {
    use crate::synth::{generate_scene, Geometry, RigConfig, SceneSpec};
    let rig = RigConfig {
        width: 16,
        height: 16,
        focal: 20.0,
        ..RigConfig::default()
    };
    let n = nalgebra::Vector3::new(0.15, -0.1, 1.0).normalize();
    let spec = SceneSpec::new(
        Geometry::Slanted {
            normal: n.into(),
            offset: 640.0 * n.z,
        },
        seed,
        &rig,
    );
    let cfg = StageConfig {
        planes: [8, 8, 4],
        ..StageConfig::default()
    };
    Ok((generate_scene(&spec, "gradcheck")?, cfg))
}

fn random_uncertainty(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<UncertaintyMap> {
    UncertaintyMap::new(Grid::from_fn(w, h, |_, _| rng.random_range(0.05..0.25)))
}

fn head_check(seed: u64, eps: f64, refined_only: bool) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene, stage) = tiny_setup(seed)?;
    let p = prepare(&scene, &stage, true)?;
    let (pyr, s1) = p.fixed.as_ref().expect("fixed features");
    let (w1, h1) = (s1.depth.width(), s1.depth.height());
    let c1 = random_uncertainty(w1, h1, &mut rng)?;
    let c2 = random_uncertainty(2 * w1, 2 * h1, &mut rng)?;
    let len1 = Grid::filled(w1, h1, p.range.1 - p.range.0);
    let (_, next1, hyps2) = learned_transition(&s1.depth, &c1, 0, &len1, p.range, &stage)?;
    let f2: Vec<&FeatureMap> = pyr.iter().map(|q| &q.levels[1]).collect();
    let s2 = sweep(&f2, &p.cams[1], &hyps2, &stage.stages[1])?;
    let len2 = next1.lengths();
    let (_, _, hyps3) = learned_transition(&s2.depth, &c2, 1, &len2, p.range, &stage)?;
    let f3: Vec<&FeatureMap> = pyr.iter().map(|q| &q.levels[2]).collect();
    let s3 = sweep(&f3, &p.cams[2], &hyps3, &stage.stages[2])?;
    let sample = HeadSample {
        scene_range: p.range,
        depth1: s1.depth.clone(),
        hyps1: stage1_hyps(w1, h1, p.range, &stage)?,
        prob: [s1.probability.clone(), s2.probability, s3.probability],
        gt: p.gt.clone(),
        gt_mask: p.gt_mask.clone(),
        tau: None,
    };
    let loss = if refined_only {
        LossWeights {
            alpha: [0.0; 3],
            beta: [1.0, 0.0],
        }
    } else {
        LossWeights {
            alpha: [0.5, 1.0, 2.0],
            beta: [3.0, 1.0],
        }
    };
    let set = HeadSettings {
        stage: &stage,
        loss,
        tau_factor: 0.5,
        refined_path: true,
        hypothesis_path: true,
    };
    let fwd = head_forward(&sample, [&c1, &c2], &set)?;
    // the widths are constants of the backward pass
    let sample = HeadSample {
        tau: Some(fwd.tau.clone()),
        ..sample
    };
    let g = head_backward(&sample, [&c1, &c2], &fwd, &set)?;
    let n1 = c1.values().len();
    let mut x: Vec<f64> = c1.values().as_slice().to_vec();
    let mut analytic: Vec<f64> = g.c[0].as_slice().to_vec();
    if !refined_only {
        x.extend(c2.values().as_slice());
        analytic.extend(g.c[1].as_slice());
    }
    compare(&x, &analytic, eps, |v| {
        let a = UncertaintyMap::new(Grid::from_vec(w1, h1, v[..n1].to_vec())?)?;
        let b = if refined_only {
            c2.clone()
        } else {
            UncertaintyMap::new(Grid::from_vec(2 * w1, 2 * h1, v[n1..].to_vec())?)?
        };
        Ok(head_forward(&sample, [&a, &b], &set)?.total)
    })
}

fn features_check(seed: u64, eps: f64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene, _) = tiny_setup(seed)?;
    let fw = FeatureWeights::init(4, &mut rng);
    let (pyr, cache) = extract_trainable(&scene.images[0], &fw)?;
    let coeffs: [FeatureMap; 3] = std::array::from_fn(|k| {
        let f = &pyr.levels[k];
        let mut c = FeatureMap::zeros(f.width, f.height, f.channels);
        c.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        c
    });
    let analytic = feature_backward(&fw, &cache, &coeffs)?;
    compare(&fw.params(), &analytic, eps, |p| {
        let mut w = fw.clone();
        w.set_params(p)?;
        let (pyr, _) = extract_trainable(&scene.images[0], &w)?;
        Ok(pyr
            .levels
            .iter()
            .zip(&coeffs)
            .map(|(f, c)| f.data.iter().zip(&c.data).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    })
}

fn end_to_end_check(seed: u64, eps: f64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene, stage) = tiny_setup(seed)?;
    let p = prepare(&scene, &stage, false)?;
    let fw = FeatureWeights::init(4, &mut rng);
    let loss_of = |w: &FeatureWeights| -> Result<(f64, Vec<f64>)> {
        let per_view: Vec<(FeaturePyramid, FeatureCache)> = p
            .images
            .iter()
            .map(|i| extract_trainable(i, w))
            .collect::<Result<_>>()?;
        let pyr: Vec<FeaturePyramid> = per_view.iter().map(|(q, _)| q.clone()).collect();
        let s1 = stage1_sweep(&pyr, &p.cams[0], p.range, &stage)?;
        let mask = stage_mask(&p.gt_mask[0], &s1.probability);
        let loss = smooth_l1(&s1.depth, &p.gt[0], &mask)?.value;
        let gd = smooth_l1_grad(&s1.depth, &p.gt[0], &mask)?;
        let hyps = stage1_hyps(s1.depth.width(), s1.depth.height(), p.range, &stage)?;
        let n = s1.depth.len();
        let dprob: Vec<f64> = (0..hyps.depths.len())
            .map(|e| hyps.depths[e] * gd.as_slice()[e % n])
            .collect();
        let dcost = regularize_backward(
            &s1.cost,
            &s1.probability,
            &s1.trace,
            stage.stages[0].smoothing(),
            &dprob,
        )?;
        let feats: Vec<&FeatureMap> = pyr.iter().map(|q| &q.levels[0]).collect();
        let src: Vec<&CameraParams> = p.cams[0][1..].iter().collect();
        let (dref, dsrc) =
            cost_volume_backward(feats[0], &feats[1..], &p.cams[0][0], &src, &hyps, &dcost)?;
        let mut grads = vec![0.0; w.param_count()];
        for ((q, cache), d) in per_view.iter().zip(std::iter::once(dref).chain(dsrc)) {
            let lg = [
                d,
                FeatureMap::zeros(q.levels[1].width, q.levels[1].height, q.levels[1].channels),
                FeatureMap::zeros(q.levels[2].width, q.levels[2].height, q.levels[2].channels),
            ];
            let g = feature_backward(w, cache, &lg)?;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((loss, grads))
    };
    let (_, analytic) = loss_of(&fw)?;
    compare(&fw.params(), &analytic, eps, |v| {
        let mut w = fw.clone();
        w.set_params(v)?;
        Ok(loss_of(&w)?.0)
    })
}

fn rem_check(seed: u64, eps: f64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = 8;
    let mut w = RemWeights::init(d_in, &mut rng);
    for bn in &mut w.norms {
        bn.gamma
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.5..1.5));
        bn.beta
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let data: Vec<f64> = (0..2 * d_in * 16)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let x = Tensor4::from_vec(2, d_in, 4, 4, data)?;
    let coeffs: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, cache) = rem_forward_train(&x, &mut w.clone())?;
    let (analytic, _) = rem_backward(&w, &cache, &Tensor4::from_vec(2, 1, 4, 4, coeffs.clone())?)?;
    compare(&w.params(), &analytic, eps, |p| {
        let mut wp = w.clone();
        wp.set_params(p)?;
        let (y, _) = rem_forward_train(&x, &mut wp)?;
        Ok(y.data.iter().zip(&coeffs).map(|(a, b)| a * b).sum())
    })
}

fn linear_check(seed: u64, eps: f64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (5, 7);
    let x: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let objective = |w: &[f64]| -> f64 {
        (0..rows)
            .map(|r| c[r] * (0..cols).map(|k| w[r * cols + k] * x[k]).sum::<f64>())
            .sum()
    };
    let analytic: Vec<f64> = (0..rows * cols)
        .map(|i| c[i / cols] * x[i % cols])
        .collect();
    compare(&w, &analytic, eps, |p| Ok(objective(p)))
}

/// Largest relative error between analytic and central-difference gradients.
pub fn grad_check(target: GradCheckTarget, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let (max_rel_error, checked) = match target {
        GradCheckTarget::LinearToy => linear_check(seed, eps)?,
        GradCheckTarget::Rem => rem_check(seed, eps)?,
        GradCheckTarget::Features => features_check(seed, eps)?,
        GradCheckTarget::EndToEndStageLoss => end_to_end_check(seed, eps)?,
        GradCheckTarget::RefinedLossWrtUncertainty => head_check(seed, eps, true)?,
        GradCheckTarget::HypothesisPath => head_check(seed, eps, false)?,
    };
    Ok(GradCheckReport {
        target,
        max_rel_error,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, RigConfig};

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3, -1.2];
        let mut s = OptimState::new(2, 1e-3);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![1.0, 1.0];
        let mut s = OptimState::new(2, 1e-3);
        adam_step(&mut p, &[0.3, 0.3], &mut s).unwrap();
        // closed form: m_hat = g, v_hat = g^2
        let oracle = 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((p[0] - oracle).abs() < 1e-15);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-6 * 1e-3);
        assert_eq!(p[0], p[1]);
        assert!(matches!(
            adam_step(&mut p, &[0.1], &mut s),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn schedule_multipliers_compound() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(10), 5e-4);
        assert_eq!(cfg.lr_at(12), 2.5e-4);
        assert_eq!(cfg.lr_at(16), 1.25e-4);
    }

    #[test]
    fn small_gradient_checks_pass() {
        for target in [
            GradCheckTarget::LinearToy,
            GradCheckTarget::Features,
            GradCheckTarget::RefinedLossWrtUncertainty,
            GradCheckTarget::HypothesisPath,
        ] {
            let r = grad_check(target, 3, 1e-4).unwrap();
            let tol = if target == GradCheckTarget::LinearToy {
                1e-10
            } else {
                1e-4
            };
            assert!(
                r.max_rel_error <= tol,
                "{}: {}",
                target.name(),
                r.max_rel_error
            );
        }
    }

    #[test]
    fn end_to_end_stage_loss_gradient() {
        let r = grad_check(GradCheckTarget::EndToEndStageLoss, 5, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    }

    fn toy_rig() -> RigConfig {
        RigConfig {
            width: 32,
            height: 32,
            focal: 40.0,
            ..RigConfig::default()
        }
    }

    fn toy_cfg() -> (TrainConfig, StageConfig) {
        let stage = StageConfig {
            planes: [16, 8, 4],
            ..StageConfig::default()
        };
        let t = TrainConfig {
            epochs: 2,
            max_steps: Some(3),
            ..TrainConfig::default()
        };
        (t, stage)
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = generate_dataset(2, 4, &toy_rig()).unwrap();
        let (mut t, stage) = toy_cfg();
        t.lr = 0.0;
        let init = RemPair::init(16, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let out = train(&data, &t, &stage, Some(init.clone())).unwrap();
        assert_eq!(out.rem.stage1.params(), init.stage1.params());
        assert_eq!(out.rem.stage2.params(), init.stage2.params());
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_dataset(3, 4, &toy_rig()).unwrap();
        let (t, stage) = toy_cfg();
        let a = train(&data, &t, &stage, None).unwrap();
        let b = train(&data, &t, &stage, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.rem, b.rem);
        assert!(a.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn feature_training_runs() {
        let data = generate_dataset(2, 8, &toy_rig()).unwrap();
        let (mut t, stage) = toy_cfg();
        t.train_features = true;
        t.max_steps = Some(2);
        let out = train(&data, &t, &stage, None).unwrap();
        assert!(out.features.is_some());
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (t, stage) = toy_cfg();
        assert!(matches!(
            train(&[], &t, &stage, None),
            Err(Error::EmptyDataset)
        ));
    }
}
