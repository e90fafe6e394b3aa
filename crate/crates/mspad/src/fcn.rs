//! Fully-convolutional score-map network.
//!
//! A C-channel cube goes through five convolutional blocks (channel count
//! doubling each block, batch normalization after blocks 2 and 4) into a
//! 1x1 convolution with sigmoid activation, yielding one attack-probability
//! score per map cell. Global average pooling of the map is the sample
//! score. With the default kernels/strides every map cell sees a 54x54
//! input patch, and a 160x80 cube yields a 20x10 map.
//!
//! Layers are implemented directly (im2col + GEMM for the convolutions)
//! with hand-written backward passes, generic over `f32`/`f64`: `f64` makes
//! finite-difference gradient verification meaningful, `f32` is what
//! training uses.

use std::collections::BTreeSet;
use std::fmt;
use std::iter::Sum;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::DataCube;

/// Float type the network is instantiated over.
pub trait Scalar:
    ndarray::LinalgScalar + num_traits::Float + Send + Sync + Sum + fmt::Debug + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input has {found} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("input {width}x{height} too small for the layer stack")]
    InputTooSmall { width: usize, height: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Architecture description. `block_channels` is implied: the first block
/// has `base_maps` output maps and every following block doubles them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Map count of the first block (`h`).
    pub base_maps: usize,
    pub block_kernels: Vec<usize>,
    pub block_strides: Vec<usize>,
    /// 1-based block indices followed by a batch-normalization layer.
    pub batchnorm_after: BTreeSet<usize>,
}

impl ModelConfig {
    /// The standard architecture for a given cube channel count.
    pub fn with_channels(input_channels: usize) -> Self {
        ModelConfig {
            input_channels,
            base_maps: 16,
            block_kernels: vec![4, 4, 4, 3, 3],
            block_strides: vec![2, 2, 2, 1, 1],
            batchnorm_after: [2, 4].into(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_channels == 0 {
            return Err(ModelError::InvalidConfig("input_channels must be >= 1".into()));
        }
        if self.base_maps == 0 {
            return Err(ModelError::InvalidConfig("base_maps must be >= 1".into()));
        }
        if self.block_kernels.is_empty() || self.block_kernels.len() != self.block_strides.len() {
            return Err(ModelError::InvalidConfig(
                "block_kernels and block_strides must be nonempty and equal length".into(),
            ));
        }
        if self.block_kernels.iter().any(|&k| k == 0)
            || self.block_strides.iter().any(|&s| s == 0)
        {
            return Err(ModelError::InvalidConfig("kernels and strides must be positive".into()));
        }
        if self.batchnorm_after.iter().any(|&b| b == 0 || b > self.block_kernels.len()) {
            return Err(ModelError::InvalidConfig(
                "batchnorm_after indices must name existing blocks".into(),
            ));
        }
        Ok(())
    }

    /// Output maps of each block: base_maps doubled at every transition.
    pub fn block_channels(&self) -> Vec<usize> {
        (0..self.block_kernels.len())
            .map(|i| self.base_maps << i)
            .collect()
    }

    fn pad_of(kernel: usize) -> usize {
        (kernel - 1) / 2
    }
}

/// Side length of the input patch one score-map cell depends on.
pub fn receptive_field(cfg: &ModelConfig) -> usize {
    let mut r = 1usize;
    let mut jump = 1usize;
    for (&k, &s) in cfg.block_kernels.iter().zip(&cfg.block_strides) {
        r += (k - 1) * jump;
        jump *= s;
    }
    // 1x1 head adds nothing.
    r
}

fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|d| d / stride + 1)
}

/// Score-map size (height, width) for an input of the given size.
pub fn score_map_size(
    cfg: &ModelConfig,
    input_height: usize,
    input_width: usize,
) -> Result<(usize, usize), ModelError> {
    let (mut h, mut w) = (input_height, input_width);
    for (&k, &s) in cfg.block_kernels.iter().zip(&cfg.block_strides) {
        let p = ModelConfig::pad_of(k);
        match (conv_out(h, k, s, p), conv_out(w, k, s, p)) {
            (Some(nh), Some(nw)) if nh > 0 && nw > 0 => {
                h = nh;
                w = nw;
            }
            _ => {
                return Err(ModelError::InputTooSmall {
                    width: input_width,
                    height: input_height,
                })
            }
        }
    }
    Ok((h, w))
}

/// Input pixel window (x0, y0, x1, y1; inclusive, clipped to the input) that
/// score-map cell `(ix, iy)` depends on.
pub fn receptive_window(
    cfg: &ModelConfig,
    ix: usize,
    iy: usize,
    input_height: usize,
    input_width: usize,
) -> (usize, usize, usize, usize) {
    let (mut x0, mut x1) = (ix as isize, ix as isize);
    let (mut y0, mut y1) = (iy as isize, iy as isize);
    for (&k, &s) in cfg.block_kernels.iter().zip(&cfg.block_strides).rev() {
        let p = ModelConfig::pad_of(k) as isize;
        let (k, s) = (k as isize, s as isize);
        x0 = x0 * s - p;
        x1 = x1 * s - p + k - 1;
        y0 = y0 * s - p;
        y1 = y1 * s - p + k - 1;
    }
    (
        x0.max(0) as usize,
        y0.max(0) as usize,
        (x1.max(0) as usize).min(input_width - 1),
        (y1.max(0) as usize).min(input_height - 1),
    )
}

/// The per-patch attack-probability map plus its pooled scalar score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    values: Array2<f64>,
    gap_score: f64,
}

impl ScoreMap {
    pub fn new(values: Array2<f64>) -> Self {
        let gap_score = values.mean().unwrap_or(0.0);
        ScoreMap { values, gap_score }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Mean of the map entries: the sample's attack probability.
    pub fn gap_score(&self) -> f64 {
        self.gap_score
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

struct Conv2d<T> {
    weight: Array4<T>, // (out, in, k, k)
    bias: Array1<T>,
    stride: usize,
    pad: usize,
}

struct BatchNorm<T> {
    gamma: Array1<T>,
    beta: Array1<T>,
    running_mean: Array1<T>,
    running_var: Array1<T>,
    eps: T,
    momentum: T,
}

enum Layer<T> {
    Conv(Conv2d<T>),
    Relu,
    BatchNorm(BatchNorm<T>),
}

/// Per-layer gradients, aligned with the model's parameter order.
pub struct Gradients<T> {
    slots: Vec<Vec<Array1<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Flat parameter-gradient slices in model parameter order.
    pub fn flat(&self) -> Vec<&[T]> {
        self.slots
            .iter()
            .flat_map(|layer| layer.iter().map(|a| a.as_slice().expect("contiguous")))
            .collect()
    }

    /// Sums another gradient set into this one, element-wise.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.zip_mut_with(b, |x, &y| *x = *x + y);
            }
        }
    }

    /// Scales every gradient by `factor`.
    pub fn scale(&mut self, factor: T) {
        for layer in self.slots.iter_mut() {
            for a in layer.iter_mut() {
                a.mapv_inplace(|x| x * factor);
            }
        }
    }
}

fn im2col<T: Scalar>(
    input: &ArrayView3<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<T> {
    let (c_in, in_h, in_w) = input.dim();
    let mut cols = Array2::<T>::zeros((c_in * kernel * kernel, out_h * out_w));
    for c in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let mut row_view = cols.row_mut(row);
                let row_slice = row_view.as_slice_mut().expect("contiguous");
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut row_slice[oy * out_w..(oy + 1) * out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < in_w as isize {
                            *d = input[(c, iy, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    d_cols: &Array2<T>,
    c_in: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<T> {
    let mut d_input = Array3::<T>::zeros((c_in, in_h, in_w));
    for c in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let row_view = d_cols.row(row);
                let src = row_view.as_slice().expect("contiguous");
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < in_w as isize {
                            d_input[(c, iy, ix as usize)] =
                                d_input[(c, iy, ix as usize)] + src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
    d_input
}

impl<T: Scalar> Conv2d<T> {
    fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn weight_matrix(&self) -> Array2<T> {
        let (o, i, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape((o, i * kh * kw))
            .expect("contiguous weight")
            .to_owned()
    }

    fn forward_sample(&self, input: &ArrayView3<T>, out_h: usize, out_w: usize) -> Array3<T> {
        let cols = im2col(input, self.kernel(), self.stride, self.pad, out_h, out_w);
        let mut out_mat = self.weight_matrix().dot(&cols);
        for (c, mut row) in out_mat.axis_iter_mut(Axis(0)).enumerate() {
            let b = self.bias[c];
            row.mapv_inplace(|v| v + b);
        }
        out_mat
            .into_shape((self.out_channels(), out_h, out_w))
            .expect("conv output reshape")
    }

    /// Returns (d_input, d_weight_flat, d_bias) for one sample.
    fn backward_sample(
        &self,
        input: &ArrayView3<T>,
        d_out: &ArrayView3<T>,
    ) -> (Array3<T>, Array2<T>, Array1<T>) {
        let (c_in, in_h, in_w) = input.dim();
        let (c_out, out_h, out_w) = d_out.dim();
        let cols = im2col(input, self.kernel(), self.stride, self.pad, out_h, out_w);
        let d_out_mat = d_out
            .to_owned()
            .into_shape((c_out, out_h * out_w))
            .expect("contiguous grad");
        let d_weight = d_out_mat.dot(&cols.t());
        let d_bias = d_out_mat.sum_axis(Axis(1));
        let d_cols = self.weight_matrix().t().dot(&d_out_mat);
        let d_input = col2im(
            &d_cols,
            c_in,
            in_h,
            in_w,
            self.kernel(),
            self.stride,
            self.pad,
            out_h,
            out_w,
        );
        (d_input, d_weight, d_bias)
    }
}

struct BnCache<T> {
    normalized: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        let m = T::of((n * h * w) as f64);
        let mut out = Array4::<T>::zeros((n, c, h, w));
        let mut normalized = Array4::<T>::zeros((n, c, h, w));
        let mut inv_std = Array1::<T>::zeros(c);
        for ch in 0..c {
            let slice = x.slice(s![.., ch, .., ..]);
            let mean = slice.iter().copied().sum::<T>() / m;
            let var = slice
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / m;
            let istd = T::one() / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            let mut norm_slice = normalized.slice_mut(s![.., ch, .., ..]);
            let mut out_slice = out.slice_mut(s![.., ch, .., ..]);
            ndarray::Zip::from(&mut norm_slice)
                .and(&mut out_slice)
                .and(&slice)
                .for_each(|nv, ov, &v| {
                    let xhat = (v - mean) * istd;
                    *nv = xhat;
                    *ov = g * xhat + b;
                });
            // Running statistics use the unbiased variance.
            let m_f = m.as_f64();
            let unbiased = if m_f > 1.0 {
                var * T::of(m_f / (m_f - 1.0))
            } else {
                var
            };
            let keep = T::one() - self.momentum;
            self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = keep * self.running_var[ch] + self.momentum * unbiased;
        }
        (out, BnCache { normalized, inv_std })
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mut out = x.clone();
        let c = x.dim().1;
        for ch in 0..c {
            let istd = T::one() / (self.running_var[ch] + self.eps).sqrt();
            let mean = self.running_mean[ch];
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            out.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|v| g * (v - mean) * istd + b);
        }
        out
    }

    /// Training-mode backward. Returns (d_input, d_gamma, d_beta).
    fn backward(
        &self,
        cache: &BnCache<T>,
        d_out: &Array4<T>,
    ) -> (Array4<T>, Array1<T>, Array1<T>) {
        let (n, c, h, w) = d_out.dim();
        let m = T::of((n * h * w) as f64);
        let mut d_input = Array4::<T>::zeros((n, c, h, w));
        let mut d_gamma = Array1::<T>::zeros(c);
        let mut d_beta = Array1::<T>::zeros(c);
        for ch in 0..c {
            let dy = d_out.slice(s![.., ch, .., ..]);
            let xhat = cache.normalized.slice(s![.., ch, .., ..]);
            let sum_dy = dy.iter().copied().sum::<T>();
            let sum_dy_xhat = dy
                .iter()
                .zip(xhat.iter())
                .map(|(&a, &b)| a * b)
                .sum::<T>();
            d_gamma[ch] = sum_dy_xhat;
            d_beta[ch] = sum_dy;
            let scale = self.gamma[ch] * cache.inv_std[ch];
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            let mut di = d_input.slice_mut(s![.., ch, .., ..]);
            ndarray::Zip::from(&mut di)
                .and(&dy)
                .and(&xhat)
                .for_each(|d, &dyv, &xh| {
                    *d = scale * (dyv - mean_dy - xh * mean_dy_xhat);
                });
        }
        (d_input, d_gamma, d_beta)
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Activations entering each layer, kept for the backward pass.
pub struct TrainCaches<T> {
    layer_inputs: Vec<Array4<T>>,
    bn_caches: Vec<Option<BnCache<T>>>,
    head_input: Array4<T>,
    /// Sigmoid outputs (N, Hm, Wm).
    probs: Array3<T>,
}

/// The score-map network.
pub struct FcnModel<T> {
    cfg: ModelConfig,
    layers: Vec<Layer<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> FcnModel<T> {
    /// Builds the model with He-uniform fan-in weight initialization,
    /// deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        use rand::{Rng, SeedableRng};
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut init_conv = |c_in: usize, c_out: usize, k: usize, stride: usize| {
            let fan_in = (c_in * k * k) as f64;
            let limit = (6.0 / fan_in).sqrt();
            let weight =
                Array4::from_shape_fn((c_out, c_in, k, k), |_| T::of(rng.gen_range(-limit..limit)));
            Conv2d {
                weight,
                bias: Array1::zeros(c_out),
                stride,
                pad: ModelConfig::pad_of(k),
            }
        };

        let channels = cfg.block_channels();
        let mut layers = Vec::new();
        let mut c_in = cfg.input_channels;
        for (i, (&k, &s)) in cfg.block_kernels.iter().zip(&cfg.block_strides).enumerate() {
            let c_out = channels[i];
            layers.push(Layer::Conv(init_conv(c_in, c_out, k, s)));
            layers.push(Layer::Relu);
            if cfg.batchnorm_after.contains(&(i + 1)) {
                layers.push(Layer::BatchNorm(BatchNorm {
                    gamma: Array1::from_elem(c_out, T::one()),
                    beta: Array1::zeros(c_out),
                    running_mean: Array1::zeros(c_out),
                    running_var: Array1::from_elem(c_out, T::one()),
                    eps: T::of(1e-5),
                    momentum: T::of(0.1),
                }));
            }
            c_in = c_out;
        }
        let head = init_conv(c_in, 1, 1, 1);
        Ok(FcnModel { cfg, layers, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<(usize, usize), ModelError> {
        if channels != self.cfg.input_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.cfg.input_channels,
                found: channels,
            });
        }
        score_map_size(&self.cfg, h, w)
    }

    fn conv_all<F>(input: &Array4<T>, f: F, c_out: usize, out_h: usize, out_w: usize) -> Array4<T>
    where
        F: Fn(ArrayView3<T>) -> Array3<T> + Sync,
        T: Scalar,
    {
        let n = input.dim().0;
        let samples: Vec<Array3<T>> = (0..n)
            .into_par_iter()
            .map(|i| f(input.index_axis(Axis(0), i)))
            .collect();
        let mut out = Array4::<T>::zeros((n, c_out, out_h, out_w));
        for (i, sample) in samples.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&sample);
        }
        out
    }

    fn run_head(&self, x: &Array4<T>) -> Array3<T> {
        let (n, _, h, w) = x.dim();
        let logits = Self::conv_all(x, |sample| self.head.forward_sample(&sample, h, w), 1, h, w);
        let mut probs = Array3::<T>::zeros((n, h, w));
        ndarray::Zip::from(&mut probs)
            .and(&logits.index_axis(Axis(1), 0).to_owned())
            .for_each(|p, &z| *p = sigmoid(z));
        probs
    }

    /// Batched inference with frozen batch-norm statistics. Returns the
    /// sigmoid score maps, shape (N, Hm, Wm).
    pub fn infer_batch(&self, input: &Array4<T>) -> Result<Array3<T>, ModelError> {
        let (_, c, h, w) = input.dim();
        self.check_input(c, h, w)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(conv) => {
                    let (_, _, h, w) = x.dim();
                    let out_h = conv_out(h, conv.kernel(), conv.stride, conv.pad).unwrap();
                    let out_w = conv_out(w, conv.kernel(), conv.stride, conv.pad).unwrap();
                    Self::conv_all(
                        &x,
                        |sample| conv.forward_sample(&sample, out_h, out_w),
                        conv.out_channels(),
                        out_h,
                        out_w,
                    )
                }
                Layer::Relu => {
                    let mut y = x;
                    y.mapv_inplace(|v| v.max(T::zero()));
                    y
                }
                Layer::BatchNorm(bn) => bn.forward_eval(&x),
            };
        }
        Ok(self.run_head(&x))
    }

    /// Score map for one cube (inference mode).
    pub fn forward(&self, cube: &DataCube) -> Result<ScoreMap, ModelError> {
        let data = cube.data();
        let (c, h, w) = data.dim();
        let mut input = Array4::<T>::zeros((1, c, h, w));
        ndarray::Zip::from(&mut input.index_axis_mut(Axis(0), 0))
            .and(data)
            .for_each(|d, &v| *d = T::of(v as f64));
        let probs = self.infer_batch(&input)?;
        let map = probs.index_axis(Axis(0), 0).mapv(|v| v.as_f64());
        Ok(ScoreMap::new(map))
    }

    /// The pooled attack probability for one cube.
    pub fn score(&self, cube: &DataCube) -> Result<f64, ModelError> {
        Ok(self.forward(cube)?.gap_score())
    }

    /// Training-mode forward: batch statistics for batch norm (running
    /// statistics updated), activations cached for [`Self::backward`].
    pub fn train_forward(&mut self, input: &Array4<T>) -> Result<TrainCaches<T>, ModelError> {
        let (_, c, h, w) = input.dim();
        self.check_input(c, h, w)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut bn_caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            layer_inputs.push(x.clone());
            let mut bn_cache = None;
            x = match layer {
                Layer::Conv(conv) => {
                    let (_, _, h, w) = x.dim();
                    let out_h = conv_out(h, conv.kernel(), conv.stride, conv.pad).unwrap();
                    let out_w = conv_out(w, conv.kernel(), conv.stride, conv.pad).unwrap();
                    Self::conv_all(
                        &x,
                        |sample| conv.forward_sample(&sample, out_h, out_w),
                        conv.out_channels(),
                        out_h,
                        out_w,
                    )
                }
                Layer::Relu => {
                    let mut y = x;
                    y.mapv_inplace(|v| v.max(T::zero()));
                    y
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = bn.forward_train(&x);
                    bn_cache = Some(cache);
                    y
                }
            };
            bn_caches.push(bn_cache);
        }
        let head_input = x;
        let probs = self.run_head(&head_input);
        Ok(TrainCaches {
            layer_inputs,
            bn_caches,
            head_input,
            probs,
        })
    }

    /// Score maps from the last [`Self::train_forward`] call.
    pub fn cached_probs<'a>(&self, caches: &'a TrainCaches<T>) -> &'a Array3<T> {
        &caches.probs
    }

    /// Backward pass from `d_probs` = dL/d(map probability), same shape as
    /// the cached maps. Gradients are summed over the batch.
    pub fn backward(&self, caches: &TrainCaches<T>, d_probs: &Array3<T>) -> Gradients<T> {
        let (n, hm, wm) = d_probs.dim();
        // Through the sigmoid: dL/dz = dL/dp * p * (1 - p).
        let mut d_logits = Array4::<T>::zeros((n, 1, hm, wm));
        {
            let mut dl = d_logits.index_axis_mut(Axis(1), 0);
            ndarray::Zip::from(&mut dl)
                .and(d_probs)
                .and(&caches.probs)
                .for_each(|d, &g, &p| *d = g * p * (T::one() - p));
        }

        let mut slots: Vec<Vec<Array1<T>>> = Vec::new();

        // Head conv.
        let (d_x, head_dw, head_db) = self.conv_backward_batch(&self.head, &caches.head_input, &d_logits);
        let head_slot = vec![head_dw, head_db];
        let mut d_x = d_x;

        let mut layer_slots: Vec<Vec<Array1<T>>> = vec![Vec::new(); self.layers.len()];
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Conv(conv) => {
                    let input = &caches.layer_inputs[idx];
                    let (dx, dw, db) = self.conv_backward_batch(conv, input, &d_x);
                    layer_slots[idx] = vec![dw, db];
                    d_x = dx;
                }
                Layer::Relu => {
                    let input = &caches.layer_inputs[idx];
                    ndarray::Zip::from(&mut d_x).and(input).for_each(|d, &v| {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    });
                }
                Layer::BatchNorm(bn) => {
                    let cache = caches.bn_caches[idx].as_ref().expect("bn cache");
                    let (dx, dg, db) = bn.backward(cache, &d_x);
                    layer_slots[idx] = vec![dg, db];
                    d_x = dx;
                }
            }
        }
        slots.extend(layer_slots);
        slots.push(head_slot);
        Gradients { slots }
    }

    fn conv_backward_batch(
        &self,
        conv: &Conv2d<T>,
        input: &Array4<T>,
        d_out: &Array4<T>,
    ) -> (Array4<T>, Array1<T>, Array1<T>) {
        let n = input.dim().0;
        let per_sample: Vec<(Array3<T>, Array2<T>, Array1<T>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                conv.backward_sample(
                    &input.index_axis(Axis(0), i),
                    &d_out.index_axis(Axis(0), i),
                )
            })
            .collect();
        let (_, c_in, in_h, in_w) = input.dim();
        let mut d_input = Array4::<T>::zeros((n, c_in, in_h, in_w));
        let mut d_weight = Array2::<T>::zeros(per_sample[0].1.dim());
        let mut d_bias = Array1::<T>::zeros(per_sample[0].2.dim());
        // Sum in sample order so results do not depend on thread timing.
        for (i, (di, dw, db)) in per_sample.into_iter().enumerate() {
            d_input.index_axis_mut(Axis(0), i).assign(&di);
            d_weight.zip_mut_with(&dw, |a, &b| *a = *a + b);
            d_bias.zip_mut_with(&db, |a, &b| *a = *a + b);
        }
        let dw_flat = Array1::from_vec(d_weight.into_raw_vec());
        (d_input, dw_flat, d_bias)
    }

    fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.as_slice().expect("contiguous"));
                    out.push(c.bias.as_slice().expect("contiguous"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("contiguous"));
                    out.push(bn.beta.as_slice().expect("contiguous"));
                }
                Layer::Relu => {}
            }
        }
        out.push(self.head.weight.as_slice().expect("contiguous"));
        out.push(self.head.bias.as_slice().expect("contiguous"));
        out
    }

    /// Flat views of every trainable parameter, in a fixed order matching
    /// [`Gradients::flat`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.as_slice_mut().expect("contiguous"));
                    out.push(c.bias.as_slice_mut().expect("contiguous"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("contiguous"));
                    out.push(bn.beta.as_slice_mut().expect("contiguous"));
                }
                Layer::Relu => {}
            }
        }
        out.push(self.head.weight.as_slice_mut().expect("contiguous"));
        out.push(self.head.bias.as_slice_mut().expect("contiguous"));
        out
    }

    /// Gradients aligned with [`Self::param_slices_mut`], but only for the
    /// layers that produced them; used to pair with [`Gradients::flat`].
    pub fn zero_gradients(&self) -> Gradients<T> {
        let mut slots = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => slots.push(vec![
                    Array1::zeros(c.weight.len()),
                    Array1::zeros(c.bias.len()),
                ]),
                Layer::BatchNorm(bn) => slots.push(vec![
                    Array1::zeros(bn.gamma.len()),
                    Array1::zeros(bn.beta.len()),
                ]),
                Layer::Relu => slots.push(Vec::new()),
            }
        }
        slots.push(vec![
            Array1::zeros(self.head.weight.len()),
            Array1::zeros(self.head.bias.len()),
        ]);
        Gradients { slots }
    }

    /// Named tensors (parameters and batch-norm buffers) for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((
                        format!("layer{idx:02}.weight"),
                        c.weight.shape().to_vec(),
                        c.weight.iter().copied().collect(),
                    ));
                    out.push((
                        format!("layer{idx:02}.bias"),
                        vec![c.bias.len()],
                        c.bias.to_vec(),
                    ));
                }
                Layer::BatchNorm(bn) => {
                    for (name, arr) in [
                        ("gamma", &bn.gamma),
                        ("beta", &bn.beta),
                        ("running_mean", &bn.running_mean),
                        ("running_var", &bn.running_var),
                    ] {
                        out.push((
                            format!("layer{idx:02}.{name}"),
                            vec![arr.len()],
                            arr.to_vec(),
                        ));
                    }
                }
                Layer::Relu => {}
            }
        }
        out.push((
            "head.weight".into(),
            self.head.weight.shape().to_vec(),
            self.head.weight.iter().copied().collect(),
        ));
        out.push((
            "head.bias".into(),
            vec![self.head.bias.len()],
            self.head.bias.to_vec(),
        ));
        out
    }

    /// Loads tensors produced by [`Self::named_tensors`]; shape and name
    /// sets must match exactly.
    pub fn load_named_tensors(
        &mut self,
        tensors: &[(String, Vec<usize>, Vec<T>)],
    ) -> Result<(), ModelError> {
        use std::collections::BTreeMap;
        let mut by_name: BTreeMap<&str, (&[usize], &[T])> = tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice())))
            .collect();
        let expected = self.named_tensors();
        for (name, shape, _) in &expected {
            let (got_shape, data) = by_name.remove(name.as_str()).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing tensor `{name}`"))
            })?;
            if got_shape != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}`: shape {got_shape:?} does not match model {shape:?}"
                )));
            }
            self.assign_named(name, data);
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        Ok(())
    }

    fn assign_named(&mut self, name: &str, data: &[T]) {
        let (prefix, field) = name.split_once('.').expect("name has a dot");
        if prefix == "head" {
            match field {
                "weight" => self
                    .head
                    .weight
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(data),
                "bias" => self.head.bias.as_slice_mut().unwrap().copy_from_slice(data),
                _ => unreachable!("unknown head field"),
            }
            return;
        }
        let idx: usize = prefix.trim_start_matches("layer").parse().expect("layer index");
        match (&mut self.layers[idx], field) {
            (Layer::Conv(c), "weight") => {
                c.weight.as_slice_mut().unwrap().copy_from_slice(data)
            }
            (Layer::Conv(c), "bias") => c.bias.as_slice_mut().unwrap().copy_from_slice(data),
            (Layer::BatchNorm(bn), "gamma") => {
                bn.gamma.as_slice_mut().unwrap().copy_from_slice(data)
            }
            (Layer::BatchNorm(bn), "beta") => {
                bn.beta.as_slice_mut().unwrap().copy_from_slice(data)
            }
            (Layer::BatchNorm(bn), "running_mean") => {
                bn.running_mean.as_slice_mut().unwrap().copy_from_slice(data)
            }
            (Layer::BatchNorm(bn), "running_var") => {
                bn.running_var.as_slice_mut().unwrap().copy_from_slice(data)
            }
            _ => unreachable!("unknown layer field"),
        }
    }

    /// A deep copy of the trainable state (used for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        self.named_tensors()
    }

    /// Sets the head bias, clearing the head weights; handy for forcing a
    /// constant score map in tests.
    pub fn force_constant_head(&mut self, bias: T) {
        self.head.weight.fill(T::zero());
        self.head.bias.fill(bias);
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSPADCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes the model as a bundle of named f32 tensor containers plus a JSON
/// sidecar (`<path>.json`) holding the [`ModelConfig`].
pub fn save_checkpoint(path: &std::path::Path, model: &FcnModel<f32>) -> Result<(), ModelError> {
    use crate::tensorio::{TensorBlob, TensorData};
    let ck = |e: String| ModelError::Checkpoint(e);

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        let blob = TensorBlob::new(shape, TensorData::F32(data)).map_err(|e| ck(e.to_string()))?;
        let bytes = blob.encode();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    std::fs::write(path, out).map_err(|e| ck(format!("write {}: {e}", path.display())))?;

    let sidecar = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.json", ext.to_string_lossy()),
        None => "json".into(),
    });
    let cfg_json = serde_json::to_string_pretty(model.config()).map_err(|e| ck(e.to_string()))?;
    std::fs::write(&sidecar, cfg_json)
        .map_err(|e| ck(format!("write {}: {e}", sidecar.display())))
}

/// Loads a checkpoint written by [`save_checkpoint`], rejecting config or
/// shape mismatches.
pub fn load_checkpoint(path: &std::path::Path) -> Result<FcnModel<f32>, ModelError> {
    use crate::tensorio::{TensorBlob, TensorData};
    let ck = |e: String| ModelError::Checkpoint(e);

    let sidecar = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.json", ext.to_string_lossy()),
        None => "json".into(),
    });
    let cfg_json = std::fs::read_to_string(&sidecar)
        .map_err(|e| ck(format!("read {}: {e}", sidecar.display())))?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_json).map_err(|e| ck(e.to_string()))?;

    let bytes =
        std::fs::read(path).map_err(|e| ck(format!("read {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ck("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut off = 16usize;
    for _ in 0..count {
        if off + 4 > bytes.len() {
            return Err(ck("truncated checkpoint".into()));
        }
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if off + name_len + 8 > bytes.len() {
            return Err(ck("truncated checkpoint".into()));
        }
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|e| ck(e.to_string()))?;
        off += name_len;
        let blob_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if off + blob_len > bytes.len() {
            return Err(ck("truncated checkpoint".into()));
        }
        let blob = TensorBlob::decode(&bytes[off..off + blob_len]).map_err(|e| ck(e.to_string()))?;
        off += blob_len;
        let shape = blob.shape().to_vec();
        let data = match blob.into_data() {
            TensorData::F32(v) => v,
            other => {
                return Err(ck(format!(
                    "tensor `{name}` has dtype {:?}, expected F32",
                    other.dtype()
                )))
            }
        };
        tensors.push((name, shape, data));
    }
    if off != bytes.len() {
        return Err(ck("trailing bytes in checkpoint".into()));
    }

    let mut model = FcnModel::<f32>::new(cfg, 0)?;
    model.load_named_tensors(&tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(c: usize, h: usize, w: usize, seed: u64) -> DataCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataCube::new(Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>())).unwrap()
    }

    #[test]
    fn default_receptive_field_is_54() {
        let cfg = ModelConfig::with_channels(7);
        assert_eq!(receptive_field(&cfg), 54);
    }

    #[test]
    fn receptive_field_recurrence_cases() {
        let mut cfg = ModelConfig::with_channels(1);
        cfg.block_kernels = vec![3];
        cfg.block_strides = vec![1];
        cfg.batchnorm_after = BTreeSet::new();
        assert_eq!(receptive_field(&cfg), 3);

        cfg.block_kernels = vec![3, 3];
        cfg.block_strides = vec![2, 1];
        assert_eq!(receptive_field(&cfg), 7);
    }

    #[test]
    fn score_map_is_20x10_for_160x80() {
        let cfg = ModelConfig::with_channels(7);
        assert_eq!(score_map_size(&cfg, 80, 160).unwrap(), (10, 20));
        assert_eq!(score_map_size(&cfg, 256, 320).unwrap(), (32, 40));
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let cfg = ModelConfig::with_channels(3);
        let a = FcnModel::<f32>::new(cfg.clone(), 42).unwrap();
        let b = FcnModel::<f32>::new(cfg, 42).unwrap();
        assert_eq!(a.named_tensors(), b.named_tensors());
    }

    #[test]
    fn param_count_difference_is_first_layer_only() {
        let a = FcnModel::<f32>::new(ModelConfig::with_channels(7), 0).unwrap();
        let b = FcnModel::<f32>::new(ModelConfig::with_channels(24), 0).unwrap();
        assert_eq!(b.param_count() - a.param_count(), (24 - 7) * 16 * 4 * 4);
    }

    #[test]
    fn zero_channels_is_rejected() {
        assert!(FcnModel::<f32>::new(ModelConfig::with_channels(0), 0).is_err());
    }

    #[test]
    fn forced_head_yields_constant_map() {
        let mut model = FcnModel::<f64>::new(ModelConfig::with_channels(2), 1).unwrap();
        model.force_constant_head(0.0);
        let map = model.forward(&random_cube(2, 80, 160, 5)).unwrap();
        assert_eq!((map.height(), map.width()), (10, 20));
        for &v in map.values().iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!((map.gap_score() - 0.5).abs() < 1e-12);

        model.force_constant_head(0.7);
        let map = model.forward(&random_cube(2, 80, 160, 6)).unwrap();
        let expected = 1.0 / (1.0 + (-0.7f64).exp());
        for &v in map.values().iter() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_score_is_map_mean() {
        let model = FcnModel::<f64>::new(ModelConfig::with_channels(3), 9).unwrap();
        let map = model.forward(&random_cube(3, 80, 160, 10)).unwrap();
        let mean: f64 = map.values().iter().sum::<f64>() / map.values().len() as f64;
        assert!((map.gap_score() - mean).abs() < 1e-12);
        assert!(map.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let model = FcnModel::<f64>::new(ModelConfig::with_channels(3), 9).unwrap();
        let err = model.forward(&random_cube(4, 80, 160, 0)).unwrap_err();
        assert!(matches!(err, ModelError::ChannelMismatch { expected: 3, found: 4 }));
    }

    #[test]
    fn perturbation_outside_receptive_window_leaves_cell_unchanged() {
        let cfg = ModelConfig::with_channels(2);
        for seed in 0..3u64 {
            let model = FcnModel::<f64>::new(cfg.clone(), seed).unwrap();
            let cube = random_cube(2, 80, 160, 100 + seed);
            let base = model.forward(&cube).unwrap();
            let (ix, iy) = (7, 4);
            let (x0, y0, x1, y1) = receptive_window(&cfg, ix, iy, 80, 160);
            assert_eq!((x1 - x0 + 1, y1 - y0 + 1), (54, 54));

            let mut data = cube.data().clone();
            // Perturb a pixel just outside the window.
            let px = x1 + 1;
            let py = y0;
            data[(0, py, px)] = (data[(0, py, px)] + 0.5).min(1.0);
            let perturbed = DataCube::new(data).unwrap();
            let new = model.forward(&perturbed).unwrap();
            let delta = (new.values()[(iy, ix)] - base.values()[(iy, ix)]).abs();
            assert!(delta < 1e-6, "cell changed by {delta}");
            // And the same perturbation does change some cell.
            let moved = new
                .values()
                .iter()
                .zip(base.values().iter())
                .any(|(a, b)| (a - b).abs() > 1e-9);
            assert!(moved);
        }
    }

    #[test]
    fn gradient_support_matches_receptive_windows() {
        // Perturb single pixels and check that exactly the map cells whose
        // analytic windows contain the pixel can change.
        let cfg = ModelConfig {
            input_channels: 1,
            base_maps: 1,
            ..ModelConfig::with_channels(1)
        };
        let model = FcnModel::<f64>::new(cfg.clone(), 3).unwrap();
        let cube = random_cube(1, 32, 48, 17);
        let base = model.forward(&cube).unwrap();
        let (hm, wm) = (base.height(), base.width());
        for &(px, py) in &[(0usize, 0usize), (20, 15), (47, 31)] {
            let mut data = cube.data().clone();
            data[(0, py, px)] = 1.0 - data[(0, py, px)];
            let new = model.forward(&DataCube::new(data).unwrap()).unwrap();
            for iy in 0..hm {
                for ix in 0..wm {
                    let (x0, y0, x1, y1) = receptive_window(&cfg, ix, iy, 32, 48);
                    let inside = px >= x0 && px <= x1 && py >= y0 && py <= y1;
                    let delta = (new.values()[(iy, ix)] - base.values()[(iy, ix)]).abs();
                    if !inside {
                        assert!(delta < 1e-9, "outside cell ({ix},{iy}) moved by {delta}");
                    }
                }
            }
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        use crate::loss::{total_loss, total_loss_map_grad};

        let cfg = ModelConfig {
            input_channels: 1,
            base_maps: 1,
            ..ModelConfig::with_channels(1)
        };
        let mut model = FcnModel::<f64>::new(cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let batch = Array4::from_shape_fn((2, 1, 16, 16), |_| rng.gen::<f64>());
        let labels = [1u8, 0u8];
        let lambda = 10.0;

        let batch_loss = |model: &mut FcnModel<f64>| -> f64 {
            let caches = model.train_forward(&batch).unwrap();
            let mut sum = 0.0;
            for (i, &t) in labels.iter().enumerate() {
                let map = ScoreMap::new(caches.probs.index_axis(Axis(0), i).to_owned());
                sum += total_loss(&map, t, lambda).unwrap().total;
            }
            sum / labels.len() as f64
        };

        // Analytic gradients of the batch-mean loss.
        let caches = model.train_forward(&batch).unwrap();
        let (n, hm, wm) = caches.probs.dim();
        let mut d_probs = Array3::<f64>::zeros((n, hm, wm));
        for (i, &t) in labels.iter().enumerate() {
            let map = ScoreMap::new(caches.probs.index_axis(Axis(0), i).to_owned());
            let grad = total_loss_map_grad(&map, t, lambda).unwrap();
            d_probs
                .index_axis_mut(Axis(0), i)
                .assign(&(&grad / labels.len() as f64));
        }
        let grads = model.backward(&caches, &d_probs);
        let flat_grads: Vec<Vec<f64>> = grads.flat().iter().map(|s| s.to_vec()).collect();

        let step = 1e-4;
        let n_slices = flat_grads.len();
        let mut checked = 0usize;
        for slice_idx in 0..n_slices {
            for elem_idx in 0..flat_grads[slice_idx].len() {
                let orig = model.param_slices_mut()[slice_idx][elem_idx];
                model.param_slices_mut()[slice_idx][elem_idx] = orig + step;
                let plus = batch_loss(&mut model);
                model.param_slices_mut()[slice_idx][elem_idx] = orig - step;
                let minus = batch_loss(&mut model);
                model.param_slices_mut()[slice_idx][elem_idx] = orig;
                let fd = (plus - minus) / (2.0 * step);
                let analytic = flat_grads[slice_idx][elem_idx];
                let denom = analytic.abs().max(fd.abs());
                if denom > 1e-7 {
                    let rel = (analytic - fd).abs() / denom;
                    assert!(
                        rel <= 1e-3,
                        "slice {slice_idx} elem {elem_idx}: analytic {analytic} vs fd {fd} (rel {rel})"
                    );
                } else {
                    assert!((analytic - fd).abs() < 1e-7);
                }
                checked += 1;
            }
        }
        assert_eq!(checked, model.param_count());
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::with_channels(3);
        let mut model = FcnModel::<f32>::new(cfg, 13).unwrap();
        // Dirty the batch-norm buffers so they are exercised too.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let input = Array4::from_shape_fn((4, 3, 80, 160), |_| rng.gen::<f32>());
        let _ = model.train_forward(&input).unwrap();

        save_checkpoint(&path, &model).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        for seed in 0..100u64 {
            let cube = random_cube(3, 80, 160, 1000 + seed);
            let a = model.score(&cube).unwrap();
            let b = restored.score(&cube).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = FcnModel::<f32>::new(ModelConfig::with_channels(3), 13).unwrap();
        save_checkpoint(&path, &model).unwrap();
        // Corrupt the sidecar: claim a different channel count.
        let sidecar = dir.path().join("model.ckpt.json");
        let mut cfg: ModelConfig =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        cfg.input_channels = 5;
        std::fs::write(&sidecar, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn eval_and_train_modes_differ_only_in_batchnorm() {
        // With batch norm removed, train_forward and infer_batch agree.
        let mut cfg = ModelConfig::with_channels(2);
        cfg.batchnorm_after = BTreeSet::new();
        let mut model = FcnModel::<f64>::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = Array4::from_shape_fn((2, 2, 80, 160), |_| rng.gen::<f64>());
        let caches = model.train_forward(&input).unwrap();
        let eval = model.infer_batch(&input).unwrap();
        for (a, b) in caches.probs.iter().zip(eval.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
