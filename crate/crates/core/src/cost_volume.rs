//! Plane-sweep cost volumes, their regularization into per-pixel depth
//! distributions, and soft-argmin depth regression.
//!
//! Volumes are stored plane-major: entry `(j, x, y)` lives at
//! `(j * height + y) * width + x`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{CameraParams, Homography3x3, PlaneSweepWarp};
use crate::grid::{DepthMap, Grid, Mask};
use crate::io::{read_float_dump, write_float_dump};

/// Per-pixel ordered depth planes.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    pub depths: Vec<f64>,
}

impl DepthHypotheses {
    /// The same plane set at every pixel.
    pub fn uniform(width: usize, height: usize, planes: &[f64]) -> Self {
        let n = width * height;
        let mut depths = Vec::with_capacity(n * planes.len());
        for &d in planes {
            depths.extend(std::iter::repeat_n(d, n));
        }
        Self {
            width,
            height,
            planes: planes.len(),
            depths,
        }
    }

    /// `count` evenly spaced planes inside each pixel's `[low, high]`.
    /// A collapsed interval repeats its single depth.
    pub fn from_intervals(low: &DepthMap, high: &DepthMap, count: usize) -> Result<Self> {
        crate::grid::check_same_shape(low, high, "interval bounds")?;
        if count == 0 {
            return Err(Error::ZeroCount);
        }
        let (w, h) = (low.width(), low.height());
        let n = w * h;
        let mut depths = vec![0.0; n * count];
        for i in 0..n {
            let (lo, hi) = (low.as_slice()[i], high.as_slice()[i]);
            if hi < lo {
                return Err(Error::EmptyRange { low: lo, high: hi });
            }
            for j in 0..count {
                depths[j * n + i] = if count == 1 {
                    0.5 * (lo + hi)
                } else if j + 1 == count {
                    hi
                } else {
                    lo + (hi - lo) * (j as f64 / (count - 1) as f64)
                };
            }
        }
        Ok(Self {
            width: w,
            height: h,
            planes: count,
            depths,
        })
    }

    #[inline]
    pub fn at(&self, j: usize, x: usize, y: usize) -> f64 {
        self.depths[(j * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Depths of pixel index `i` (row-major) in plane order.
    pub fn pixel(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.pixel_count();
        (0..self.planes).map(move |j| self.depths[j * n + i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    pub cost: Vec<f64>,
    /// Fraction of source views whose sample was fully in bounds.
    pub mask: Vec<f64>,
}

impl CostVolume {
    pub fn new(
        width: usize,
        height: usize,
        planes: usize,
        cost: Vec<f64>,
        mask: Vec<f64>,
    ) -> Result<Self> {
        let n = width * height * planes;
        if cost.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch("cost volume buffers".into()));
        }
        Ok(Self {
            width,
            height,
            planes,
            cost,
            mask,
        })
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        write_float_dump(
            path,
            b"VOL1",
            dims(self.width, self.height, self.planes),
            &self.cost,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    pub prob: Vec<f64>,
    /// Pixels with at least one in-bounds source sample.
    pub valid: Mask,
}

impl ProbabilityVolume {
    #[inline]
    pub fn at(&self, j: usize, x: usize, y: usize) -> f64 {
        self.prob[(j * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.width * self.height;
        (0..self.planes).map(move |j| self.prob[j * n + i])
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        write_float_dump(
            path,
            b"VOL1",
            dims(self.width, self.height, self.planes),
            &self.prob,
        )
    }

    /// Reads a "VOL1" dump as a distribution; all pixels are marked valid.
    pub fn read_dump(path: &Path) -> Result<Self> {
        let ([w, h, d], data) = read_float_dump(path, b"VOL1")?;
        Ok(Self {
            width: w as usize,
            height: h as usize,
            planes: d as usize,
            prob: data.into_iter().map(f64::from).collect(),
            valid: Grid::filled(w as usize, h as usize, true),
        })
    }
}

fn dims(w: usize, h: usize, d: usize) -> [u32; 3] {
    [w as u32, h as u32, d as u32]
}

/// Bilinear taps at continuous position `(u, v)` (pixel centers at +0.5).
/// Taps with zero weight are dropped; `None` if any weighted tap is outside.
#[inline]
pub(crate) fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> Option<[(usize, f64); 4]> {
    let fx = u - 0.5;
    let fy = v - 0.5;
    if !(fx.is_finite() && fy.is_finite()) {
        return None;
    }
    let x0 = fx.floor();
    let y0 = fy.floor();
    let ax = fx - x0;
    let ay = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (wi, hi) = (w as i64, h as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < wi && y < hi;
    let mut taps = [(0usize, 0.0f64); 4];
    let corners = [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x0 + 1, y0, ax * (1.0 - ay)),
        (x0, y0 + 1, (1.0 - ax) * ay),
        (x0 + 1, y0 + 1, ax * ay),
    ];
    for (slot, &(x, y, wgt)) in taps.iter_mut().zip(&corners) {
        if wgt == 0.0 {
            continue;
        }
        if !inside(x, y) {
            return None;
        }
        *slot = ((y * wi + x) as usize, wgt);
    }
    Some(taps)
}

/// Output of [`warp_feature`]: warped channels plus an in-bounds mask.
#[derive(Debug, Clone)]
pub struct WarpedFeature {
    pub features: FeatureMap,
    pub mask: Mask,
}

/// Samples `src` at `H * x` for every pixel `x` of an equally sized grid.
pub fn warp_feature(src: &FeatureMap, h: &Homography3x3) -> WarpedFeature {
    let (w, ht) = (src.width, src.height);
    let n = w * ht;
    let mut out = FeatureMap::zeros(w, ht, src.channels);
    let mut mask = Grid::filled(w, ht, false);
    for y in 0..ht {
        for x in 0..w {
            let Some((u, v)) = h.apply(x as f64 + 0.5, y as f64 + 0.5) else {
                continue;
            };
            let Some(taps) = bilinear_taps(u, v, w, ht) else {
                continue;
            };
            let i = y * w + x;
            *mask.get_mut(x, y) = true;
            for c in 0..src.channels {
                let plane = src.channel(c);
                out.data[c * n + i] = taps.iter().map(|&(t, wgt)| wgt * plane[t]).sum();
            }
        }
    }
    WarpedFeature {
        features: out,
        mask,
    }
}

fn check_inputs(
    ref_feat: &FeatureMap,
    src_feats: &[&FeatureMap],
    src_cams: &[&CameraParams],
    hyps: &DepthHypotheses,
) -> Result<()> {
    if src_feats.is_empty() {
        return Err(Error::NoSourceViews);
    }
    if src_feats.len() != src_cams.len() {
        return Err(Error::ShapeMismatch(
            "one camera per source feature map".into(),
        ));
    }
    if src_feats.iter().any(|f| !f.same_shape(ref_feat)) {
        return Err(Error::ShapeMismatch(
            "source features differ from reference".into(),
        ));
    }
    if (hyps.width, hyps.height) != (ref_feat.width, ref_feat.height) {
        return Err(Error::ShapeMismatch(format!(
            "hypotheses {}x{} vs features {}x{}",
            hyps.width, hyps.height, ref_feat.width, ref_feat.height
        )));
    }
    Ok(())
}

/// Variance-aggregated matching cost for every (pixel, plane).
///
/// The reference feature is one of the aggregated views; source views whose
/// bilinear sample leaves the image are skipped.
pub fn build_cost_volume(
    ref_feat: &FeatureMap,
    src_feats: &[&FeatureMap],
    ref_cam: &CameraParams,
    src_cams: &[&CameraParams],
    hyps: &DepthHypotheses,
) -> Result<CostVolume> {
    check_inputs(ref_feat, src_feats, src_cams, hyps)?;
    let (w, h, d) = (hyps.width, hyps.height, hyps.planes);
    let n = w * h;
    let channels = ref_feat.channels;
    let warps: Vec<PlaneSweepWarp> = src_cams
        .iter()
        .map(|c| PlaneSweepWarp::new(ref_cam, c))
        .collect();
    let nsrc = src_feats.len();

    let mut cost = vec![0.0; n * d];
    let mut mask = vec![0.0; n * d];
    cost.par_chunks_mut(w)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (cost_row, mask_row))| {
            let (j, y) = (row / h, row % h);
            // values[v * channels + c], reference view first
            let mut values = vec![0.0; (nsrc + 1) * channels];
            for x in 0..w {
                let i = y * w + x;
                let depth = hyps.depths[j * n + i];
                for c in 0..channels {
                    values[c] = ref_feat.data[c * n + i];
                }
                let mut views = 1usize;
                for (warp, src) in warps.iter().zip(src_feats) {
                    let Some((u, v)) = warp.map(x as f64 + 0.5, y as f64 + 0.5, depth) else {
                        continue;
                    };
                    let Some(taps) = bilinear_taps(u, v, w, h) else {
                        continue;
                    };
                    for c in 0..channels {
                        let plane = src.channel(c);
                        values[views * channels + c] =
                            taps.iter().map(|&(t, wgt)| wgt * plane[t]).sum();
                    }
                    views += 1;
                }
                if views == 1 {
                    continue;
                }
                let nv = views as f64;
                let var: f64 = (0..channels)
                    .map(|c| {
                        let mean = (0..views).map(|v| values[v * channels + c]).sum::<f64>() / nv;
                        (0..views)
                            .map(|v| (values[v * channels + c] - mean).powi(2))
                            .sum::<f64>()
                            / nv
                    })
                    .sum();
                cost_row[x] = var / channels as f64;
                mask_row[x] = (views - 1) as f64 / nsrc as f64;
            }
        });
    CostVolume::new(w, h, d, cost, mask)
}

/// Gradients of a scalar objective with respect to the reference and source
/// features, given its gradient with respect to every cost entry.
pub fn cost_volume_backward(
    ref_feat: &FeatureMap,
    src_feats: &[&FeatureMap],
    ref_cam: &CameraParams,
    src_cams: &[&CameraParams],
    hyps: &DepthHypotheses,
    dcost: &[f64],
) -> Result<(FeatureMap, Vec<FeatureMap>)> {
    check_inputs(ref_feat, src_feats, src_cams, hyps)?;
    let (w, h, d) = (hyps.width, hyps.height, hyps.planes);
    let n = w * h;
    if dcost.len() != n * d {
        return Err(Error::ShapeMismatch("cost gradient".into()));
    }
    let channels = ref_feat.channels;
    let warps: Vec<PlaneSweepWarp> = src_cams
        .iter()
        .map(|c| PlaneSweepWarp::new(ref_cam, c))
        .collect();
    let mut dref = FeatureMap::zeros(w, h, channels);
    let mut dsrc: Vec<FeatureMap> = src_feats
        .iter()
        .map(|_| FeatureMap::zeros(w, h, channels))
        .collect();
    let mut samples: Vec<(usize, [(usize, f64); 4])> = Vec::with_capacity(src_feats.len());
    let mut values = vec![0.0; (src_feats.len() + 1) * channels];

    for j in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let g = dcost[j * n + i];
                if g == 0.0 {
                    continue;
                }
                let depth = hyps.depths[j * n + i];
                samples.clear();
                for (k, (warp, _)) in warps.iter().zip(src_feats).enumerate() {
                    if let Some((u, v)) = warp.map(x as f64 + 0.5, y as f64 + 0.5, depth) {
                        if let Some(taps) = bilinear_taps(u, v, w, h) {
                            samples.push((k, taps));
                        }
                    }
                }
                if samples.is_empty() {
                    continue;
                }
                let nv = samples.len() + 1;
                for c in 0..channels {
                    values[c] = ref_feat.data[c * n + i];
                    for (s, (k, taps)) in samples.iter().enumerate() {
                        let plane = src_feats[*k].channel(c);
                        values[(s + 1) * channels + c] =
                            taps.iter().map(|&(t, wgt)| wgt * plane[t]).sum();
                    }
                }
                // d var / d V_v = 2 (V_v - mean) / N, averaged over channels
                let scale = 2.0 * g / (nv as f64 * channels as f64);
                for c in 0..channels {
                    let mean = (0..nv).map(|v| values[v * channels + c]).sum::<f64>() / nv as f64;
                    dref.data[c * n + i] += scale * (values[c] - mean);
                    for (s, (k, taps)) in samples.iter().enumerate() {
                        let gv = scale * (values[(s + 1) * channels + c] - mean);
                        let plane = &mut dsrc[*k].data[c * n..(c + 1) * n];
                        for &(t, wgt) in taps {
                            plane[t] += wgt * gv;
                        }
                    }
                }
            }
        }
    }
    Ok((dref, dsrc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing {
    pub spatial_radius: usize,
    pub depth_radius: usize,
}

impl Smoothing {
    pub const OFF: Smoothing = Smoothing {
        spatial_radius: 0,
        depth_radius: 0,
    };
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            spatial_radius: 1,
            depth_radius: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    Fixed(f64),
    /// `factor` times the mean cost of the in-bounds entries of the volume.
    RelativeToMean(f64),
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::RelativeToMean(0.05)
    }
}

/// Intermediates of [`regularize`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct RegularizeTrace {
    smoothed: Vec<f64>,
    mask_sum: Vec<f64>,
    temperature: f64,
    /// d temperature / d mean cost
    temperature_slope: f64,
    n_valid_entries: usize,
}

impl RegularizeTrace {
    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Neighbor indices of one axis under replicate padding.
#[inline]
fn window(i: usize, r: usize, n: usize) -> impl Iterator<Item = usize> {
    let i = i as i64;
    (i - r as i64..=i + r as i64).map(move |k| k.clamp(0, n as i64 - 1) as usize)
}

/// Mask-weighted box smoothing followed by a tempered softmax over planes.
pub fn regularize(
    cv: &CostVolume,
    smoothing: Smoothing,
    temperature: Temperature,
) -> Result<ProbabilityVolume> {
    regularize_traced(cv, smoothing, temperature).map(|(pv, _)| pv)
}

pub fn regularize_traced(
    cv: &CostVolume,
    smoothing: Smoothing,
    temperature: Temperature,
) -> Result<(ProbabilityVolume, RegularizeTrace)> {
    let (w, h, d) = (cv.width, cv.height, cv.planes);
    let n = w * h;
    let (mut total, mut n_valid) = (0.0, 0usize);
    for (c, m) in cv.cost.iter().zip(&cv.mask) {
        if *m > 0.0 {
            total += c;
            n_valid += 1;
        }
    }
    let mean_cost = if n_valid > 0 {
        total / n_valid as f64
    } else {
        0.0
    };
    let (t, temperature_slope) = match temperature {
        Temperature::Fixed(t) if t > 0.0 && t.is_finite() => (t, 0.0),
        Temperature::RelativeToMean(f) if f > 0.0 && f.is_finite() => {
            if mean_cost > 0.0 {
                (f * mean_cost, f)
            } else {
                // every in-bounds cost is zero: any temperature gives a uniform result
                (1.0, 0.0)
            }
        }
        Temperature::Fixed(t) | Temperature::RelativeToMean(t) => {
            return Err(Error::NonPositiveTemperature(t))
        }
    };

    let (rs, rd) = (smoothing.spatial_radius, smoothing.depth_radius);
    let mut smoothed = vec![0.0; n * d];
    let mut mask_sum = vec![0.0; n * d];
    smoothed
        .par_chunks_mut(w)
        .zip(mask_sum.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (s_row, m_row))| {
            let (j, y) = (row / h, row % h);
            for x in 0..w {
                let (mut acc, mut msum) = (0.0, 0.0);
                for jj in window(j, rd, d) {
                    for yy in window(y, rs, h) {
                        for xx in window(x, rs, w) {
                            let e = (jj * h + yy) * w + xx;
                            let m = cv.mask[e];
                            acc += m * cv.cost[e];
                            msum += m;
                        }
                    }
                }
                m_row[x] = msum;
                s_row[x] = if msum > 0.0 { acc / msum } else { mean_cost };
            }
        });

    let mut prob = vec![0.0; n * d];
    let mut valid = Grid::filled(w, h, false);
    let mut logits = vec![0.0; d];
    for i in 0..n {
        let any = (0..d).any(|j| cv.mask[j * n + i] > 0.0);
        *valid.get_mut(i % w, i / w) = any;
        if !any {
            for j in 0..d {
                prob[j * n + i] = 1.0 / d as f64;
            }
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for j in 0..d {
            logits[j] = -smoothed[j * n + i] / t;
            max = max.max(logits[j]);
        }
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for j in 0..d {
            prob[j * n + i] = logits[j] / z;
        }
    }
    Ok((
        ProbabilityVolume {
            width: w,
            height: h,
            planes: d,
            prob,
            valid,
        },
        RegularizeTrace {
            smoothed,
            mask_sum,
            temperature: t,
            temperature_slope,
            n_valid_entries: n_valid,
        },
    ))
}

/// Gradient with respect to the raw costs given the gradient with respect to
/// the probabilities. Includes the dependence of a relative temperature on the
/// mean cost.
pub fn regularize_backward(
    cv: &CostVolume,
    pv: &ProbabilityVolume,
    trace: &RegularizeTrace,
    smoothing: Smoothing,
    dprob: &[f64],
) -> Result<Vec<f64>> {
    let (w, h, d) = (cv.width, cv.height, cv.planes);
    let n = w * h;
    if dprob.len() != n * d || pv.prob.len() != n * d {
        return Err(Error::StaleCache);
    }
    let t = trace.temperature;
    let mut dsmoothed = vec![0.0; n * d];
    let mut dt = 0.0;
    for i in 0..n {
        if !*pv.valid.get(i % w, i / w) {
            continue;
        }
        let dot: f64 = (0..d).map(|j| pv.prob[j * n + i] * dprob[j * n + i]).sum();
        for j in 0..d {
            let e = j * n + i;
            let dz = pv.prob[e] * (dprob[e] - dot);
            dsmoothed[e] = -dz / t;
            dt += dz * trace.smoothed[e] / (t * t);
        }
    }

    let mut dcost = vec![0.0; n * d];
    let mut dmean = trace.temperature_slope * dt;
    let (rs, rd) = (smoothing.spatial_radius, smoothing.depth_radius);
    for j in 0..d {
        for y in 0..h {
            for x in 0..w {
                let e = (j * h + y) * w + x;
                let g = dsmoothed[e];
                if g == 0.0 {
                    continue;
                }
                let msum = trace.mask_sum[e];
                if msum > 0.0 {
                    for jj in window(j, rd, d) {
                        for yy in window(y, rs, h) {
                            for xx in window(x, rs, w) {
                                let k = (jj * h + yy) * w + xx;
                                dcost[k] += g * cv.mask[k] / msum;
                            }
                        }
                    }
                } else {
                    dmean += g;
                }
            }
        }
    }
    if trace.n_valid_entries > 0 && dmean != 0.0 {
        let share = dmean / trace.n_valid_entries as f64;
        for (g, m) in dcost.iter_mut().zip(&cv.mask) {
            if *m > 0.0 {
                *g += share;
            }
        }
    }
    Ok(dcost)
}

/// Expected depth under each pixel's distribution.
pub fn soft_argmin(pv: &ProbabilityVolume, hyps: &DepthHypotheses) -> Result<DepthMap> {
    if (pv.width, pv.height, pv.planes) != (hyps.width, hyps.height, hyps.planes) {
        return Err(Error::ShapeMismatch(format!(
            "probability {}x{}x{} vs hypotheses {}x{}x{}",
            pv.width, pv.height, pv.planes, hyps.width, hyps.height, hyps.planes
        )));
    }
    let n = pv.width * pv.height;
    let data = (0..n)
        .map(|i| {
            let (mut acc, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
            for j in 0..pv.planes {
                let l = hyps.depths[j * n + i];
                acc += l * pv.prob[j * n + i];
                lo = lo.min(l);
                hi = hi.max(l);
            }
            // guards the bound against rounding in the weighted sum
            acc.clamp(lo, hi)
        })
        .collect();
    Grid::from_vec(pv.width, pv.height, data)
}

/// Gradients of soft argmin: `(d/dP, d/dL)` given `d/dDepth`.
pub fn soft_argmin_backward(
    pv: &ProbabilityVolume,
    hyps: &DepthHypotheses,
    ddepth: &DepthMap,
) -> (Vec<f64>, Vec<f64>) {
    let n = pv.width * pv.height;
    let mut dprob = vec![0.0; n * pv.planes];
    let mut dhyp = vec![0.0; n * pv.planes];
    for i in 0..n {
        let g = ddepth.as_slice()[i];
        for j in 0..pv.planes {
            let e = j * n + i;
            dprob[e] = g * hyps.depths[e];
            dhyp[e] = g * pv.prob[e];
        }
    }
    (dprob, dhyp)
}
