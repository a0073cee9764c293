//! Range estimation module: a small convolutional head that maps a
//! probability volume to a per-pixel uncertainty, and the interval
//! constructor that turns that uncertainty into next-stage depth ranges.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::cost_volume::ProbabilityVolume;
use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid};
use crate::io::write_pfm;
use crate::nn::{relu, relu_backward, sigmoid, BatchNorm, BatchNormCache, Conv3x3, Tensor4};

/// Output channels of the five convolutions.
pub const LAYER_WIDTHS: [usize; 5] = [16, 32, 32, 16, 1];
const CHECKPOINT_VERSION: u32 = 1;

/// Initial output of the sigmoid head.
pub const INITIAL_UNCERTAINTY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct RemWeights {
    pub convs: [Conv3x3; 5],
    pub norms: [BatchNorm; 4],
}

impl RemWeights {
    /// All-zero kernels and biases with identity normalization.
    pub fn zeros(d_in: usize) -> Self {
        let cin = |l: usize| if l == 0 { d_in } else { LAYER_WIDTHS[l - 1] };
        Self {
            convs: std::array::from_fn(|l| Conv3x3::zeros(cin(l), LAYER_WIDTHS[l])),
            norms: std::array::from_fn(|l| BatchNorm::identity(LAYER_WIDTHS[l])),
        }
    }

    pub fn init(d_in: usize, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(d_in);
        for conv in &mut w.convs {
            *conv = Conv3x3::he_init(conv.cin, conv.cout, rng);
        }
        let p = INITIAL_UNCERTAINTY;
        w.convs[4].bias[0] = (p / (1.0 - p)).ln();
        w
    }

    pub fn d_in(&self) -> usize {
        self.convs[0].cin
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv3x3::param_count).sum::<usize>()
            + self.norms.iter().map(|b| 2 * b.channels()).sum::<usize>()
    }

    /// Trainable parameters in layer order: kernel, bias, then the layer's
    /// normalization scale and shift.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (l, conv) in self.convs.iter().enumerate() {
            out.extend(&conv.weight);
            out.extend(&conv.bias);
            if let Some(bn) = self.norms.get(l) {
                out.extend(&bn.gamma);
                out.extend(&bn.beta);
            }
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "range estimator expects {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let mut it = p.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            dst.iter_mut()
                .for_each(|v| *v = it.next().expect("length checked"))
        };
        for l in 0..5 {
            fill(&mut self.convs[l].weight);
            fill(&mut self.convs[l].bias);
            if l < 4 {
                fill(&mut self.norms[l].gamma);
                fill(&mut self.norms[l].beta);
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
            && self.norms.iter().all(|b| {
                b.running_mean.iter().all(|v| v.is_finite())
                    && b.running_var.iter().all(|v| v.is_finite() && *v > 0.0)
            })
    }

    /// Checkpoint block: magic, version, input planes, then all kernels and
    /// biases followed by every normalization layer's scale, shift, running
    /// mean and running variance, as little-endian f32.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(b"REMW")?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.d_in() as u32).to_le_bytes())?;
        let mut put = |vals: &[f64]| -> std::io::Result<()> {
            for v in vals {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            Ok(())
        };
        for conv in &self.convs {
            put(&conv.weight)?;
            put(&conv.bias)?;
        }
        for bn in &self.norms {
            put(&bn.gamma)?;
            put(&bn.beta)?;
            put(&bn.running_mean)?;
            put(&bn.running_var)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let mut word = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> std::result::Result<[u8; 4], String> {
            r.read_exact(&mut word).map_err(|e| e.to_string())?;
            Ok(word)
        };
        if &next(r)? != b"REMW" {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(next(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let d_in = u32::from_le_bytes(next(r)?) as usize;
        if d_in == 0 {
            return Err("zero input planes".into());
        }
        let mut w = Self::zeros(d_in);
        let mut get = |dst: &mut [f64]| -> std::result::Result<(), String> {
            for v in dst {
                *v = f32::from_le_bytes(next(r)?) as f64;
            }
            Ok(())
        };
        for conv in &mut w.convs {
            get(&mut conv.weight)?;
            get(&mut conv.bias)?;
        }
        for bn in &mut w.norms {
            get(&mut bn.gamma)?;
            get(&mut bn.beta)?;
            get(&mut bn.running_mean)?;
            get(&mut bn.running_var)?;
        }
        if !w.is_finite() {
            return Err("non-finite or non-positive statistics".into());
        }
        Ok(w)
    }
}

/// One weight set per stage transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RemPair {
    pub stage1: RemWeights,
    pub stage2: RemWeights,
}

impl RemPair {
    pub fn init(d1: usize, d2: usize, rng: &mut impl Rng) -> Self {
        Self {
            stage1: RemWeights::init(d1, rng),
            stage2: RemWeights::init(d2, rng),
        }
    }

    pub fn get(&self, transition: usize) -> &RemWeights {
        if transition == 0 {
            &self.stage1
        } else {
            &self.stage2
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.stage1
            .write_to(&mut w)
            .and_then(|_| self.stage2.write_to(&mut w))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let stage1 =
            RemWeights::read_from(&mut r).map_err(|m| Error::format("checkpoint", path, m))?;
        let stage2 =
            RemWeights::read_from(&mut r).map_err(|m| Error::format("checkpoint", path, m))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format("checkpoint", path, "trailing bytes"));
        }
        Ok(Self { stage1, stage2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations kept by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct RemCache {
    /// Input of each convolution.
    inputs: Vec<Tensor4>,
    /// Normalized pre-rectifier activations of layers 0..4.
    pre_relu: Vec<Tensor4>,
    norms: Vec<BatchNormCache>,
    output: Tensor4,
}

impl RemCache {
    pub fn output(&self) -> &Tensor4 {
        &self.output
    }
}

/// Stacks probability volumes into an `N x D x H x W` tensor.
pub fn probability_tensor(volumes: &[&ProbabilityVolume]) -> Result<Tensor4> {
    let first = volumes.first().ok_or(Error::EmptyDataset)?;
    let (w, h, d) = (first.width, first.height, first.planes);
    if volumes
        .iter()
        .any(|v| (v.width, v.height, v.planes) != (w, h, d))
    {
        return Err(Error::ShapeMismatch(
            "batched probability volumes differ".into(),
        ));
    }
    let mut data = Vec::with_capacity(volumes.len() * w * h * d);
    for v in volumes {
        data.extend(&v.prob);
    }
    Tensor4::from_vec(volumes.len(), d, h, w, data)
}

/// Forward pass. Train mode normalizes with batch statistics and updates the
/// running estimates; eval mode uses the running estimates.
pub fn rem_forward(
    x: &Tensor4,
    w: &mut RemWeights,
    mode: Mode,
) -> Result<(Tensor4, Option<RemCache>)> {
    match mode {
        Mode::Eval => rem_eval(x, w).map(|y| (y, None)),
        Mode::Train => rem_forward_train(x, w).map(|(y, c)| (y, Some(c))),
    }
}

pub fn rem_eval(x: &Tensor4, w: &RemWeights) -> Result<Tensor4> {
    let mut a = x.clone();
    for l in 0..4 {
        a = relu(&w.norms[l].forward_eval(&w.convs[l].forward(&a)?)?);
    }
    let mut y = w.convs[4].forward(&a)?;
    y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(y)
}

pub fn rem_forward_train(x: &Tensor4, w: &mut RemWeights) -> Result<(Tensor4, RemCache)> {
    let mut inputs = Vec::with_capacity(5);
    let mut pre_relu = Vec::with_capacity(4);
    let mut norms = Vec::with_capacity(4);
    let mut a = x.clone();
    for l in 0..4 {
        let z = w.convs[l].forward(&a)?;
        let (n, cache) = w.norms[l].forward_train(&z)?;
        inputs.push(a);
        a = relu(&n);
        pre_relu.push(n);
        norms.push(cache);
    }
    let mut y = w.convs[4].forward(&a)?;
    inputs.push(a);
    y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok((
        y.clone(),
        RemCache {
            inputs,
            pre_relu,
            norms,
            output: y,
        },
    ))
}

/// Parameter gradients (ordered as [`RemWeights::params`]) and the input
/// gradient, given the gradient with respect to the sigmoid output.
pub fn rem_backward(
    w: &RemWeights,
    cache: &RemCache,
    grad_out: &Tensor4,
) -> Result<(Vec<f64>, Tensor4)> {
    if !grad_out.same_shape(&cache.output)
        || cache.inputs.len() != 5
        || cache.inputs[0].c != w.d_in()
    {
        return Err(Error::StaleCache);
    }
    // per layer: (dw, db, dgamma, dbeta)
    let mut grads: Vec<[Vec<f64>; 4]> = (0..5)
        .map(|l| {
            let bn = if l < 4 { LAYER_WIDTHS[l] } else { 0 };
            [
                vec![0.0; w.convs[l].weight.len()],
                vec![0.0; w.convs[l].bias.len()],
                vec![0.0; bn],
                vec![0.0; bn],
            ]
        })
        .collect();
    let mut g = grad_out.clone();
    for (gv, y) in g.data.iter_mut().zip(&cache.output.data) {
        *gv *= y * (1.0 - y);
    }
    {
        let [dw, db, _, _] = &mut grads[4];
        g = w.convs[4].backward(&cache.inputs[4], &g, dw, db)?;
    }
    for l in (0..4).rev() {
        let [dw, db, dgamma, dbeta] = &mut grads[l];
        let gn = relu_backward(&cache.pre_relu[l], &g);
        let gz = w.norms[l].backward(&gn, &cache.norms[l], dgamma, dbeta)?;
        g = w.convs[l].backward(&cache.inputs[l], &gz, dw, db)?;
    }
    let mut flat = Vec::with_capacity(w.param_count());
    for [dw, db, dgamma, dbeta] in grads {
        flat.extend(dw);
        flat.extend(db);
        flat.extend(dgamma);
        flat.extend(dbeta);
    }
    Ok((flat, g))
}

/// Per-pixel uncertainty, strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap(DepthMap);

impl UncertaintyMap {
    /// Values are nudged off the endpoints where the sigmoid saturates in
    /// floating point.
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if values
            .as_slice()
            .iter()
            .any(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidParameter("uncertainty outside [0, 1]".into()));
        }
        Ok(Self(
            values.map(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)),
        ))
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(Grid::filled(width, height, value))
    }

    /// Splits an `N x 1 x H x W` network output into per-sample maps.
    pub fn from_tensor(t: &Tensor4) -> Result<Vec<Self>> {
        if t.c != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: t.c,
            });
        }
        (0..t.n)
            .map(|n| Self::new(Grid::from_vec(t.w, t.h, t.image(n).to_vec())?))
            .collect()
    }

    pub fn values(&self) -> &DepthMap {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }
}

/// Per-pixel closed depth interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRangeMap {
    pub low: DepthMap,
    pub high: DepthMap,
}

impl DepthRangeMap {
    pub fn new(low: DepthMap, high: DepthMap) -> Result<Self> {
        crate::grid::check_same_shape(&low, &high, "range bounds")?;
        if let Some((l, h)) = low
            .as_slice()
            .iter()
            .zip(high.as_slice())
            .find(|(l, h)| !(l <= h))
        {
            return Err(Error::EmptyRange { low: *l, high: *h });
        }
        Ok(Self { low, high })
    }

    pub fn width(&self) -> usize {
        self.low.width()
    }

    pub fn height(&self) -> usize {
        self.low.height()
    }

    pub fn lengths(&self) -> DepthMap {
        Grid::from_fn(self.width(), self.height(), |x, y| {
            self.high.get(x, y) - self.low.get(x, y)
        })
    }

    pub fn contains(&self, x: usize, y: usize, depth: f64) -> bool {
        *self.low.get(x, y) <= depth && depth <= *self.high.get(x, y)
    }

    pub fn upsample2(&self) -> Result<Self> {
        Self::new(
            self.low.upsample2_bilinear(),
            self.high.upsample2_bilinear(),
        )
    }

    /// Writes `<prefix>.min.pfm` and `<prefix>.max.pfm`.
    pub fn write_pfm_pair(&self, prefix: &Path) -> Result<()> {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            std::path::PathBuf::from(s)
        };
        write_pfm(&with(".min.pfm"), &self.low)?;
        write_pfm(&with(".max.pfm"), &self.high)
    }
}

/// A range map together with the half-widths it was built from.
#[derive(Debug, Clone)]
pub struct DynamicRange {
    pub ranges: DepthRangeMap,
    /// `lambda * C * R_prev` before clipping.
    pub half_width: DepthMap,
    /// Pixels whose interval collapsed under clipping and was re-centered.
    pub snapped: Grid<bool>,
}

/// Interval `[L - h, L + h]` with `h = lambda * C * R_prev`, clipped to the
/// scene range. An interval emptied by clipping becomes one of length
/// `snap_len` around the nearest in-range depth.
pub fn dynamic_range(
    depth: &DepthMap,
    unc: &UncertaintyMap,
    lambda: f64,
    prev_range_len: &DepthMap,
    scene_range: (f64, f64),
    snap_len: f64,
) -> Result<DynamicRange> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let (slo, shi) = scene_range;
    if !(slo < shi) {
        return Err(Error::EmptyRange {
            low: slo,
            high: shi,
        });
    }
    crate::grid::check_same_shape(depth, unc.values(), "depth and uncertainty")?;
    crate::grid::check_same_shape(depth, prev_range_len, "depth and previous range")?;
    if let Some(r) = prev_range_len.as_slice().iter().find(|r| !(**r > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "previous range length {r} must be positive"
        )));
    }
    let snap = snap_len.clamp(0.0, shi - slo);
    let n = depth.len();
    let (mut low, mut high) = (vec![0.0; n], vec![0.0; n]);
    let mut half = vec![0.0; n];
    let mut snapped = vec![false; n];
    for i in 0..n {
        let l = depth.as_slice()[i];
        let h = lambda * unc.values().as_slice()[i] * prev_range_len.as_slice()[i];
        half[i] = h;
        let (lo, hi) = ((l - h).max(slo), (l + h).min(shi));
        if lo <= hi {
            low[i] = lo;
            high[i] = hi;
        } else {
            let c = l.clamp(slo + 0.5 * snap, shi - 0.5 * snap);
            low[i] = c - 0.5 * snap;
            high[i] = c + 0.5 * snap;
            snapped[i] = true;
        }
    }
    let (w, h) = (depth.width(), depth.height());
    Ok(DynamicRange {
        ranges: DepthRangeMap::new(Grid::from_vec(w, h, low)?, Grid::from_vec(w, h, high)?)?,
        half_width: Grid::from_vec(w, h, half)?,
        snapped: Grid::from_vec(w, h, snapped)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
        let data = (0..n * c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    fn randomize(w: &mut RemWeights, rng: &mut ChaCha8Rng) {
        let p: Vec<f64> = w
            .params()
            .iter()
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        w.set_params(&p).unwrap();
        for bn in &mut w.norms {
            bn.running_mean
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.2..0.2));
            bn.running_var
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..2.0));
        }
    }

    /// Direct nested-loop convolution with replicate padding.
    fn naive_conv(x: &Tensor4, conv: &Conv3x3) -> Tensor4 {
        let mut y = Tensor4::zeros(x.n, conv.cout, x.h, x.w);
        let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        for n in 0..x.n {
            for co in 0..conv.cout {
                for yy in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = conv.bias[co];
                        for ci in 0..conv.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = clampi(yy as i64 + ky as i64 - 1, x.h);
                                    let sx = clampi(xx as i64 + kx as i64 - 1, x.w);
                                    acc += conv.weight[((co * conv.cin + ci) * 3 + ky) * 3 + kx]
                                        * x.data[x.idx(n, ci, sy, sx)];
                                }
                            }
                        }
                        let i = y.idx(n, co, yy, xx);
                        y.data[i] = acc;
                    }
                }
            }
        }
        y
    }

    fn naive_forward_eval(x: &Tensor4, w: &RemWeights) -> Tensor4 {
        let mut a = x.clone();
        for l in 0..5 {
            a = naive_conv(&a, &w.convs[l]);
            if l < 4 {
                let bn = &w.norms[l];
                let hw = a.plane();
                for n in 0..a.n {
                    for c in 0..a.c {
                        let off = a.idx(n, c, 0, 0);
                        for v in &mut a.data[off..off + hw] {
                            let z = bn.gamma[c] * (*v - bn.running_mean[c])
                                / (bn.running_var[c] + 1e-5).sqrt()
                                + bn.beta[c];
                            *v = z.max(0.0);
                        }
                    }
                }
            } else {
                a.data
                    .iter_mut()
                    .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
            }
        }
        a
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = RemWeights::zeros(6);
        let x = random_tensor(1, 6, 5, 7, &mut rng);
        let y = rem_eval(&x, &w).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn initial_output_is_near_configured_uncertainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = RemWeights::init(8, &mut rng);
        assert!((sigmoid(w.convs[4].bias[0]) - INITIAL_UNCERTAINTY).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = RemWeights::zeros(6);
        let x = random_tensor(1, 5, 4, 4, &mut rng);
        assert!(matches!(
            rem_eval(&x, &w),
            Err(Error::ChannelMismatch {
                expected: 6,
                actual: 5
            })
        ));
    }

    #[test]
    fn forward_matches_direct_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d_in = 12;
        let mut w = RemWeights::zeros(d_in);
        randomize(&mut w, &mut rng);
        let x = random_tensor(1, d_in, 8, 8, &mut rng);
        let fast = rem_eval(&x, &w).unwrap();
        let slow = naive_forward_eval(&x, &w);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-10);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = RemWeights::init(4, &mut rng);
        let x = random_tensor(2, 4, 5, 5, &mut rng);
        let (y, cache) = rem_forward_train(&x, &mut w).unwrap();
        let (gp, gx) = rem_backward(&w, &cache, &Tensor4::zeros(y.n, y.c, y.h, y.w)).unwrap();
        assert!(gp.iter().all(|&g| g == 0.0));
        assert!(gx.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = RemWeights::init(4, &mut rng);
        let x = random_tensor(1, 4, 5, 5, &mut rng);
        let (_, cache) = rem_forward_train(&x, &mut w).unwrap();
        assert!(matches!(
            rem_backward(&w, &cache, &Tensor4::zeros(1, 1, 4, 5)),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn linearized_input_gradient_matches_transposed_convolution() {
        // With rectifiers and normalization removed the network is a chain
        // of linear convolutions; its input gradient is the adjoint chain.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = RemWeights::zeros(3);
        randomize(&mut w, &mut rng);
        let x = random_tensor(1, 3, 6, 6, &mut rng);
        let mut dy = Tensor4::zeros(1, 1, 6, 6);
        dy.data[2 * 6 + 3] = 1.0;
        let mut g = dy.clone();
        for l in (0..5).rev() {
            let mut dw = vec![0.0; w.convs[l].weight.len()];
            let mut db = vec![0.0; w.convs[l].bias.len()];
            let a = Tensor4::zeros(1, w.convs[l].cin, 6, 6);
            g = w.convs[l].backward(&a, &g, &mut dw, &mut db).unwrap();
        }
        // oracle: <dy, A x> = <A^T dy, x> for every basis input
        let linear = |x: &Tensor4| {
            let mut a = x.clone();
            for conv in &w.convs {
                let mut c = conv.clone();
                c.bias.iter_mut().for_each(|b| *b = 0.0);
                a = naive_conv(&a, &c);
            }
            a
        };
        for i in 0..x.data.len() {
            let mut e = Tensor4::zeros(1, 3, 6, 6);
            e.data[i] = 1.0;
            let oracle = linear(&e).data[2 * 6 + 3];
            assert!((g.data[i] - oracle).abs() < 1e-10);
        }
    }

    fn finite_difference_error(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = 5;
        let mut w = RemWeights::init(d_in, &mut rng);
        for bn in &mut w.norms {
            bn.gamma
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..1.5));
            bn.beta
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let x = random_tensor(2, d_in, 4, 4, &mut rng);
        let coeffs: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |w: &RemWeights| {
            let mut w = w.clone();
            let (y, _) = rem_forward_train(&x, &mut w).unwrap();
            y.data.iter().zip(&coeffs).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut wt = w.clone();
        let (_, cache) = rem_forward_train(&x, &mut wt).unwrap();
        let dy = Tensor4::from_vec(2, 1, 4, 4, coeffs.clone()).unwrap();
        let (analytic, _) = rem_backward(&w, &cache, &dy).unwrap();
        let base = w.params();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for (k, a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[k] += eps;
            let mut wp = w.clone();
            wp.set_params(&p).unwrap();
            p[k] -= 2.0 * eps;
            let mut wm = w.clone();
            wm.set_params(&p).unwrap();
            let num = (objective(&wp) - objective(&wm)) / (2.0 * eps);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let err = finite_difference_error(7);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pair = RemPair::init(6, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        pair.save(&path).unwrap();
        let back = RemPair::load(&path).unwrap();
        for (a, b) in pair.stage1.params().iter().zip(back.stage1.params()) {
            assert_eq!(*a as f32 as f64, b);
        }
        assert_eq!(back.stage2.d_in(), 4);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"REMW");
        let per = |w: &RemWeights| {
            12 + 4 * (w.param_count() + w.norms.iter().map(|b| 2 * b.channels()).sum::<usize>())
        };
        assert_eq!(bytes.len(), per(&pair.stage1) + per(&pair.stage2));
    }

    fn flat(w: usize, h: usize, v: f64) -> DepthMap {
        Grid::filled(w, h, v)
    }

    #[test]
    fn dynamic_range_example() {
        let unc = UncertaintyMap::filled(1, 1, 0.5).unwrap();
        let r = dynamic_range(
            &flat(1, 1, 500.0),
            &unc,
            1.5,
            &flat(1, 1, 508.8),
            (425.0, 933.8),
            1.0,
        )
        .unwrap();
        assert!((r.half_width.get(0, 0) - 381.6).abs() < 1e-9);
        assert_eq!(*r.ranges.low.get(0, 0), 425.0);
        assert!((r.ranges.high.get(0, 0) - 881.6).abs() < 1e-9);
    }

    #[test]
    fn dynamic_range_rejects_bad_lambda() {
        let unc = UncertaintyMap::filled(1, 1, 0.5).unwrap();
        let res = dynamic_range(
            &flat(1, 1, 500.0),
            &unc,
            0.0,
            &flat(1, 1, 1.0),
            (0.0, 1000.0),
            1.0,
        );
        assert!(matches!(res, Err(Error::NonPositiveLambda(_))));
    }

    #[test]
    fn tiny_uncertainty_collapses_interval() {
        let unc = UncertaintyMap::filled(1, 1, 1e-12).unwrap();
        let r = dynamic_range(
            &flat(1, 1, 600.0),
            &unc,
            1.5,
            &flat(1, 1, 508.8),
            (425.0, 933.8),
            1.0,
        )
        .unwrap();
        assert!(r.ranges.high.get(0, 0) - r.ranges.low.get(0, 0) < 1e-8);
        assert!(r.ranges.contains(0, 0, 600.0));
    }

    #[test]
    fn out_of_range_depth_snaps_inside() {
        let unc = UncertaintyMap::filled(1, 1, 0.01).unwrap();
        let r = dynamic_range(
            &flat(1, 1, 2000.0),
            &unc,
            1.0,
            &flat(1, 1, 10.0),
            (425.0, 933.8),
            4.0,
        )
        .unwrap();
        assert!(*r.snapped.get(0, 0));
        assert_eq!(*r.ranges.high.get(0, 0), 933.8);
        assert!((r.ranges.low.get(0, 0) - 929.8).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn interval_contains_center_and_doubles_linearly(
            l in 425.0f64..933.8, c in 0.001f64..0.999, lambda in 0.1f64..3.0, r in 1.0f64..600.0,
        ) {
            let unc = UncertaintyMap::filled(1, 1, c).unwrap();
            let one = dynamic_range(&flat(1, 1, l), &unc, lambda, &flat(1, 1, r), (425.0, 933.8), 1.0).unwrap();
            let two = dynamic_range(&flat(1, 1, l), &unc, 2.0 * lambda, &flat(1, 1, r), (425.0, 933.8), 1.0).unwrap();
            prop_assert!(one.ranges.contains(0, 0, l));
            prop_assert_eq!(*two.half_width.get(0, 0), 2.0 * *one.half_width.get(0, 0));
            prop_assert!(two.ranges.low.get(0, 0) <= one.ranges.low.get(0, 0));
            prop_assert!(two.ranges.high.get(0, 0) >= one.ranges.high.get(0, 0));
            prop_assert!(*one.ranges.low.get(0, 0) >= 425.0 && *one.ranges.high.get(0, 0) <= 933.8);
        }

        #[test]
        fn outputs_stay_in_open_unit_interval(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = RemWeights::zeros(3);
            randomize(&mut w, &mut rng);
            for conv in &mut w.convs {
                conv.weight.iter_mut().for_each(|v| *v *= 20.0);
            }
            let x = random_tensor(1, 3, 4, 4, &mut rng);
            let y = rem_eval(&x, &w).unwrap();
            let maps = UncertaintyMap::from_tensor(&y).unwrap();
            prop_assert!(maps[0].values().as_slice().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
