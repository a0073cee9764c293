//! Stage losses and the refined loss that supervises a stage's distribution
//! after clamping it to the next stage's estimated interval.

use crate::cost_volume::{DepthHypotheses, ProbabilityVolume};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Mask};
use crate::nn::sigmoid;
use crate::rem::DepthRangeMap;
use serde::{Deserialize, Serialize};

/// Surviving probability mass below which a pixel is dropped.
pub const MIN_SURVIVING_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: [f64; 3],
    pub beta: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [0.5, 1.0, 2.0],
            beta: [3.0, 0.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self
            .alpha
            .iter()
            .chain(&self.beta)
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidParameter(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClampMode<'a> {
    /// Indicator window; used for inference and reporting.
    Hard,
    /// Sigmoid window with a single width in scene units.
    Soft(f64),
    /// Sigmoid window with a per-pixel width.
    SoftPerPixel(&'a DepthMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDistribution {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    /// Plane-major like the hypotheses; clamped-away planes hold 0 in hard mode.
    pub depths: Vec<f64>,
    pub prob: Vec<f64>,
    pub valid: Mask,
}

fn check_shapes(
    hyps: &DepthHypotheses,
    pv: &ProbabilityVolume,
    range: &DepthRangeMap,
) -> Result<()> {
    if (hyps.width, hyps.height, hyps.planes) != (pv.width, pv.height, pv.planes)
        || (range.width(), range.height()) != (pv.width, pv.height)
    {
        return Err(Error::ShapeMismatch("clamp inputs".into()));
    }
    Ok(())
}

#[inline]
fn soft_window(l: f64, lo: f64, hi: f64, tau: f64) -> (f64, f64, f64) {
    let a = sigmoid((l - lo) / tau);
    let b = sigmoid((hi - l) / tau);
    (a * b, a, b)
}

fn tau_at(mode: &ClampMode, i: usize) -> f64 {
    match mode {
        ClampMode::Hard => 0.0,
        ClampMode::Soft(t) => *t,
        ClampMode::SoftPerPixel(m) => m.as_slice()[i],
    }
}

/// Restricts each pixel's distribution to its interval and renormalizes.
pub fn clamp_refine(
    hyps: &DepthHypotheses,
    pv: &ProbabilityVolume,
    range: &DepthRangeMap,
    mode: ClampMode,
) -> Result<RefinedDistribution> {
    check_shapes(hyps, pv, range)?;
    if let ClampMode::SoftPerPixel(m) = mode {
        if (m.width(), m.height()) != (pv.width, pv.height) {
            return Err(Error::ShapeMismatch("soft clamp width map".into()));
        }
    }
    let (w, h, d) = (pv.width, pv.height, pv.planes);
    let n = w * h;
    let mut depths = hyps.depths.clone();
    let mut prob = vec![0.0; n * d];
    let mut valid = pv.valid.clone();
    for i in 0..n {
        let (lo, hi) = (range.low.as_slice()[i], range.high.as_slice()[i]);
        let tau = tau_at(&mode, i);
        let mut mass = 0.0;
        for j in 0..d {
            let e = j * n + i;
            let l = hyps.depths[e];
            let kept = match mode {
                ClampMode::Hard => {
                    if lo <= l && l <= hi {
                        pv.prob[e]
                    } else {
                        depths[e] = 0.0;
                        0.0
                    }
                }
                _ => pv.prob[e] * soft_window(l, lo, hi, tau).0,
            };
            prob[e] = kept;
            mass += kept;
        }
        let ok = valid.as_slice()[i] && mass >= MIN_SURVIVING_MASS;
        valid.as_mut_slice()[i] = ok;
        for j in 0..d {
            let e = j * n + i;
            prob[e] = if ok { prob[e] / mass } else { 0.0 };
        }
    }
    Ok(RefinedDistribution {
        width: w,
        height: h,
        planes: d,
        depths,
        prob,
        valid,
    })
}

/// Expected clamped depth; invalid pixels hold 0 and are cleared in the mask.
pub fn refined_depth(rd: &RefinedDistribution) -> (DepthMap, Mask) {
    let n = rd.width * rd.height;
    let depth = Grid::from_fn(rd.width, rd.height, |x, y| {
        let i = y * rd.width + x;
        if !*rd.valid.get(x, y) {
            return 0.0;
        }
        (0..rd.planes)
            .map(|j| rd.depths[j * n + i] * rd.prob[j * n + i])
            .sum()
    });
    (depth, rd.valid.clone())
}

/// Gradients of a soft-clamped refined depth map.
#[derive(Debug, Clone)]
pub struct RefinedGrads {
    pub low: DepthMap,
    pub high: DepthMap,
    /// With respect to the unclamped probabilities, plane-major.
    pub prob: Vec<f64>,
    /// With respect to the hypothesis depths, plane-major.
    pub hyps: Vec<f64>,
}

/// Backward pass of soft-mode [`clamp_refine`] followed by [`refined_depth`].
/// The window widths are treated as constants.
pub fn soft_refined_backward(
    hyps: &DepthHypotheses,
    pv: &ProbabilityVolume,
    range: &DepthRangeMap,
    mode: ClampMode,
    rd: &RefinedDistribution,
    ddepth: &DepthMap,
) -> Result<RefinedGrads> {
    check_shapes(hyps, pv, range)?;
    if matches!(mode, ClampMode::Hard) {
        return Err(Error::InvalidParameter(
            "hard clamp has no useful gradient".into(),
        ));
    }
    let (w, h, d) = (pv.width, pv.height, pv.planes);
    let n = w * h;
    let mut dlow = Grid::filled(w, h, 0.0);
    let mut dhigh = Grid::filled(w, h, 0.0);
    let mut dprob = vec![0.0; n * d];
    let mut dhyps = vec![0.0; n * d];
    for i in 0..n {
        let g = ddepth.as_slice()[i];
        if g == 0.0 || !rd.valid.as_slice()[i] {
            continue;
        }
        let (lo, hi) = (range.low.as_slice()[i], range.high.as_slice()[i]);
        let tau = tau_at(&mode, i);
        let (mut mass, mut first) = (0.0, 0.0);
        for j in 0..d {
            let e = j * n + i;
            let wgt = soft_window(hyps.depths[e], lo, hi, tau).0;
            mass += wgt * pv.prob[e];
            first += wgt * pv.prob[e] * hyps.depths[e];
        }
        let r = first / mass;
        let (mut gl, mut gh) = (0.0, 0.0);
        for j in 0..d {
            let e = j * n + i;
            let l = hyps.depths[e];
            let (wgt, a, b) = soft_window(l, lo, hi, tau);
            // d r / d w_j
            let dw = g * pv.prob[e] * (l - r) / mass;
            gl += dw * (-a * (1.0 - a) * b / tau);
            gh += dw * (a * b * (1.0 - b) / tau);
            dprob[e] = g * wgt * (l - r) / mass;
            let dw_dl = a * b * ((1.0 - a) - (1.0 - b)) / tau;
            dhyps[e] = g * pv.prob[e] * (wgt + (l - r) * dw_dl) / mass;
        }
        dlow.as_mut_slice()[i] = gl;
        dhigh.as_mut_slice()[i] = gh;
    }
    Ok(RefinedGrads {
        low: dlow,
        high: dhigh,
        prob: dprob,
        hyps: dhyps,
    })
}

#[inline]
fn rho(r: f64) -> f64 {
    if r.abs() < 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

#[inline]
fn rho_prime(r: f64) -> f64 {
    if r.abs() < 1.0 {
        r
    } else {
        r.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// No pixel passed the mask; `value` is 0.
    pub empty: bool,
}

fn masked_pixels<'a>(
    pred: &'a DepthMap,
    gt: &'a DepthMap,
    mask: &'a Mask,
) -> impl Iterator<Item = (usize, f64)> + 'a {
    (0..pred.len()).filter_map(move |i| {
        let g = gt.as_slice()[i];
        (mask.as_slice()[i] && g > 0.0).then(|| (i, pred.as_slice()[i] - g))
    })
}

fn check_loss_shapes(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<()> {
    crate::grid::check_same_shape(pred, gt, "prediction and ground truth")?;
    if !pred.same_shape(mask) {
        return Err(Error::ShapeMismatch("loss mask".into()));
    }
    Ok(())
}

/// Mean smooth-L1 residual over masked pixels with positive ground truth.
pub fn smooth_l1(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<LossValue> {
    check_loss_shapes(pred, gt, mask)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (_, r) in masked_pixels(pred, gt, mask) {
        sum += rho(r);
        count += 1;
    }
    if count == 0 {
        log::warn!("smooth L1 over an empty mask");
        return Ok(LossValue {
            value: 0.0,
            empty: true,
        });
    }
    Ok(LossValue {
        value: sum / count as f64,
        empty: false,
    })
}

/// Gradient of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<DepthMap> {
    check_loss_shapes(pred, gt, mask)?;
    let mut g = Grid::filled(pred.width(), pred.height(), 0.0);
    let picked: Vec<(usize, f64)> = masked_pixels(pred, gt, mask).collect();
    let scale = 1.0 / picked.len().max(1) as f64;
    for (i, r) in picked {
        g.as_mut_slice()[i] = rho_prime(r) * scale;
    }
    Ok(g)
}

pub fn total_loss(stage: [f64; 3], refined: [f64; 2], w: &LossWeights) -> f64 {
    stage.iter().zip(&w.alpha).map(|(l, a)| a * l).sum::<f64>()
        + refined.iter().zip(&w.beta).map(|(l, b)| b * l).sum::<f64>()
}
