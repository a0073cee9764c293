//! Point-cloud metrics, depth error statistics and depth-range diagnostics.

use std::fmt::Write as _;

use kiddo::{KdTree, SquaredEuclidean};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Mask};
use crate::rem::{dynamic_range, DepthRangeMap, UncertaintyMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
}

/// Distance from each query to its nearest neighbour in `targets`, capped.
pub fn nearest_distances(queries: &[Vector3<f64>], targets: &[Vector3<f64>], cap: f64) -> Vec<f64> {
    let mut tree: KdTree<f64, 3> = KdTree::with_capacity(targets.len().max(1));
    for (i, t) in targets.iter().enumerate() {
        tree.add(&[t.x, t.y, t.z], i as u64);
    }
    queries
        .iter()
        .map(|q| {
            tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z])
                .distance
                .sqrt()
                .min(cap)
        })
        .collect()
}

/// Accuracy (prediction to ground truth), completeness (the reverse) and
/// their mean, each a mean of capped nearest-neighbour distances.
pub fn cloud_metrics(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    dist_cap: f64,
) -> Result<CloudMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(dist_cap > 0.0) {
        return Err(Error::InvalidParameter(format!("distance cap {dist_cap}")));
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let accuracy = mean(nearest_distances(pred, gt, dist_cap));
    let completeness = mean(nearest_distances(gt, pred, dist_cap));
    Ok(CloudMetrics {
        accuracy,
        completeness,
        overall: 0.5 * (accuracy + completeness),
    })
}

/// Default distance cap: 20 stage-3 plane spacings.
pub fn default_dist_cap(stage3_mean_length: f64, stage3_planes: usize) -> f64 {
    20.0 * stage3_mean_length / (stage3_planes.max(2) - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeDiagnostics {
    pub mean_length: f64,
    pub coverage: f64,
    pub pixels: usize,
}

/// Pools interval statistics over several maps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RangeAccumulator {
    length_sum: f64,
    covered: usize,
    pixels: usize,
}

impl RangeAccumulator {
    pub fn add(&mut self, ranges: &DepthRangeMap, gt: &DepthMap, mask: &Mask) -> Result<()> {
        if !ranges.low.same_shape(gt) || !gt.same_shape(mask) {
            return Err(Error::ShapeMismatch(
                "range map, ground truth and mask sizes differ".into(),
            ));
        }
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if !*mask.get(x, y) {
                    continue;
                }
                self.pixels += 1;
                self.length_sum += ranges.high.get(x, y) - ranges.low.get(x, y);
                if ranges.contains(x, y, *gt.get(x, y)) {
                    self.covered += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<RangeDiagnostics> {
        if self.pixels == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(RangeDiagnostics {
            mean_length: self.length_sum / self.pixels as f64,
            coverage: self.covered as f64 / self.pixels as f64,
            pixels: self.pixels,
        })
    }
}

pub fn range_diagnostics(
    ranges: &DepthRangeMap,
    gt: &DepthMap,
    mask: &Mask,
) -> Result<RangeDiagnostics> {
    let mut acc = RangeAccumulator::default();
    acc.add(ranges, gt, mask)?;
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthErrorStats {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction of pixels whose error is at most one plane spacing.
    pub within_spacing: f64,
    pub pixels: usize,
}

pub fn depth_error_stats(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &Mask,
    spacing: f64,
) -> Result<DepthErrorStats> {
    if !pred.same_shape(gt) || !gt.same_shape(mask) {
        return Err(Error::ShapeMismatch(
            "prediction, ground truth and mask sizes differ".into(),
        ));
    }
    let (mut abs, mut sq, mut within, mut n) = (0.0, 0.0, 0usize, 0usize);
    for ((p, g), m) in pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
    {
        if !m {
            continue;
        }
        let e = (p - g).abs();
        abs += e;
        sq += e * e;
        within += usize::from(e <= spacing);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(DepthErrorStats {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        within_spacing: within as f64 / n as f64,
        pixels: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    /// Mean of `2 lambda C R` before clipping to the scene range.
    pub unclipped_length: f64,
    pub diagnostics: RangeDiagnostics,
}

/// Interval statistics of one transition as the scale factor varies, with
/// depth, uncertainty and previous lengths held fixed.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    depth: &DepthMap,
    c: &UncertaintyMap,
    prev_len: &DepthMap,
    scene_range: (f64, f64),
    snap_len: f64,
    lambdas: &[f64],
    gt: &DepthMap,
    mask: &Mask,
) -> Result<Vec<LambdaPoint>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let dr = dynamic_range(depth, c, lambda, prev_len, scene_range, snap_len)?;
            let (mut sum, mut n) = (0.0, 0usize);
            for (h, m) in dr.half_width.as_slice().iter().zip(mask.as_slice()) {
                if *m {
                    sum += 2.0 * h;
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::EmptyMask);
            }
            Ok(LambdaPoint {
                lambda,
                unclipped_length: sum / n as f64,
                diagnostics: range_diagnostics(&dr.ranges, gt, mask)?,
            })
        })
        .collect()
}

/// Bisects a shrink factor in `[lo, hi]` for the smallest value whose
/// coverage reaches `target`. Returns the factor and its diagnostics.
pub fn matched_baseline(
    target: f64,
    lo: f64,
    hi: f64,
    iterations: usize,
    mut evaluate: impl FnMut(f64) -> Result<RangeDiagnostics>,
) -> Result<(f64, RangeDiagnostics)> {
    if !(0.0 < lo && lo < hi) {
        return Err(Error::InvalidParameter(format!(
            "bisection bracket [{lo}, {hi}]"
        )));
    }
    let top = evaluate(hi)?;
    if top.coverage < target {
        return Ok((hi, top));
    }
    let (mut a, mut b, mut best) = (lo, hi, top);
    for _ in 0..iterations {
        let m = 0.5 * (a + b);
        let d = evaluate(m)?;
        if d.coverage >= target {
            b = m;
            best = d;
        } else {
            a = m;
        }
    }
    Ok((b, best))
}

/// One method's interval statistics at each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub method: String,
    pub stages: Vec<RangeDiagnostics>,
}

/// Fixed-width table: one row per method, a length and ratio column per stage.
pub fn range_table(rows: &[RangeRow]) -> String {
    let stages = rows.iter().map(|r| r.stages.len()).max().unwrap_or(0);
    let width = rows
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let ordinal = |k: usize| match k {
        1 => "1st".to_string(),
        2 => "2nd".to_string(),
        3 => "3rd".to_string(),
        k => format!("{k}th"),
    };
    let mut out = format!("{:<width$}", "Method");
    for k in 1..=stages {
        let o = ordinal(k);
        let _ = write!(
            out,
            " | {:>10} | {:>10}",
            format!("{o} Range"),
            format!("{o} Ratio")
        );
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}", r.method);
        for d in &r.stages {
            let _ = write!(out, " | {:>10.2} | {:>10.4}", d.mean_length, d.coverage);
        }
        out.push('\n');
    }
    out
}
