//! Minimal double-precision layers with explicit backward passes.
//!
//! Just enough machinery for a small convolutional encoder and MLP heads:
//! 3x3 convolutions, fully connected layers, batch normalization over the
//! batch axis, and ReLU. Every layer keeps the cache its backward pass needs in
//! a separate value, so forward calls are `&self` and can run in parallel.
//!
//! Parameters are exposed as flat `f64` slices in a fixed order through
//! [`Parameters`]; gradients and optimizer state reuse the model type itself
//! (see [`Parameters::zeros_like`]).

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub const BN_EPS: f64 = 1e-5;

/// Named view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait Parameters: Clone {
    /// Every parameter tensor, in a stable order.
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    /// Mutable slices, same order as [`tensors`](Self::tensors).
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += other`, elementwise over all parameters.
    fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

// --- convolution ---------------------------------------------------------------

/// 3x3 convolution with zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// `(out_ch, in_ch * 9)`, rows in `(in_ch, ky, kx)` order.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_hw: (usize, usize),
}

const K: usize = 3;
const PAD: usize = 1;

impl Conv2d {
    /// He-normal weights (fan-in), zero bias.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * K * K) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        Self {
            in_ch,
            out_ch,
            stride,
            weight: Array2::from_shape_simple_fn((out_ch, in_ch * K * K), || normal.sample(rng)),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn output_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (
            (h + 2 * PAD - K) / self.stride + 1,
            (w + 2 * PAD - K) / self.stride + 1,
        )
    }

    fn im2col(&self, x: ArrayView3<'_, f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.output_hw((h, w));
        let mut cols = Array2::zeros((c * K * K, ho * wo));
        for ci in 0..c {
            for ky in 0..K {
                for kx in 0..K {
                    let row = (ci * K + ky) * K + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("row-major");
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = x.slice(s![ci, iy as usize, ..]);
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: ArrayView2<'_, f64>, (h, w): (usize, usize)) -> Array3<f64> {
        let (ho, wo) = self.output_hw((h, w));
        let mut x = Array3::zeros((self.in_ch, h, w));
        for ci in 0..self.in_ch {
            for ky in 0..K {
                for kx in 0..K {
                    let row = cols.row((ci * K + ky) * K + kx);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && (ix as usize) < w {
                                x[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> (Array3<f64>, ConvCache) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.output_hw((h, w));
        let cols = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let y = y.into_shape_with_order((self.out_ch, ho, wo)).expect("shape");
        (y, ConvCache { cols, in_hw: (h, w) })
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_input_grad`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: ArrayView3<'_, f64>,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (c, ho, wo) = dy.dim();
        let dy = dy
            .to_shape((c, ho * wo))
            .expect("contiguous gradient");
        grad.weight += &dy.dot(&cache.cols.t());
        grad.bias += &dy.sum_axis(Axis(1));
        need_input_grad.then(|| {
            let dcols = self.weight.t().dot(&dy);
            self.col2im(dcols.view(), cache.in_hw)
        })
    }
}

// --- fully connected -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` for weights and bias.
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_simple_fn((out, inp), || u.sample(rng)),
            bias: Array1::from_shape_simple_fn(out, || u.sample(rng)),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

// --- batch normalization ---------------------------------------------------------

/// Batch normalization over axis 0 using batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: ArrayView2<'_, f64>, grad: &mut BatchNorm) -> Array2<f64> {
        let n = dy.nrows() as f64;
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let inner = dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
        inner * &(&cache.inv_std / n)
    }
}

// --- MLP ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    bn: Vec<Option<BatchNormCache>>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`. Every linear layer is followed by batch
    /// norm; ReLU follows each hidden layer, and the output layer also gets a
    /// final batch norm when `norm_output`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], norm_output: bool, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let n = dims.len() - 1;
        for i in 0..n {
            layers.push(Layer::Linear(Linear::new(dims[i], dims[i + 1], rng)));
            let last = i + 1 == n;
            if !last || norm_output {
                layers.push(Layer::BatchNorm(BatchNorm::new(dims[i + 1])));
            }
            if !last {
                layers.push(Layer::Relu);
            }
        }
        Self { layers }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut bn = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let next = match layer {
                Layer::Linear(l) => {
                    bn.push(None);
                    l.forward(cur.view())
                }
                Layer::BatchNorm(b) => {
                    let (y, c) = b.forward(cur.view());
                    bn.push(Some(c));
                    y
                }
                Layer::Relu => {
                    bn.push(None);
                    cur.mapv(|v| v.max(0.0))
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        (cur, MlpCache { inputs, bn })
    }

    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<'_, f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            d = match (layer, &mut grad.layers[i]) {
                (Layer::Linear(l), Layer::Linear(g)) => l.backward(x.view(), d.view(), g),
                (Layer::BatchNorm(b), Layer::BatchNorm(g)) => {
                    b.backward(cache.bn[i].as_ref().expect("bn cache"), d.view(), g)
                }
                (Layer::Relu, Layer::Relu) => {
                    ndarray::Zip::from(&mut d).and(x).for_each(|g, &xv| {
                        if xv <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    d
                }
                _ => unreachable!("gradient structure mirrors the model"),
            };
        }
        d
    }

    pub fn out_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear(l) => Some(l.weight.nrows()),
                _ => None,
            })
            .unwrap_or(0)
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    out.push(TensorRef {
                        name: format!("{i}.weight"),
                        shape: l.weight.shape().to_vec(),
                        data: slice_of(&l.weight),
                    });
                    out.push(TensorRef {
                        name: format!("{i}.bias"),
                        shape: l.bias.shape().to_vec(),
                        data: slice_of(&l.bias),
                    });
                }
                Layer::BatchNorm(b) => {
                    out.push(TensorRef {
                        name: format!("{i}.gamma"),
                        shape: b.gamma.shape().to_vec(),
                        data: slice_of(&b.gamma),
                    });
                    out.push(TensorRef {
                        name: format!("{i}.beta"),
                        shape: b.beta.shape().to_vec(),
                        data: slice_of(&b.beta),
                    });
                }
                Layer::Relu => {}
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push(slice_of_mut(&mut l.weight));
                    out.push(slice_of_mut(&mut l.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push(slice_of_mut(&mut b.gamma));
                    out.push(slice_of_mut(&mut b.beta));
                }
                Layer::Relu => {}
            }
        }
        out
    }
}

// --- convolutional encoder ---------------------------------------------------------------

/// Stack of stride-2 3x3 convolutions with ReLU, followed by global average
/// pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    convs: Vec<ConvCache>,
    /// post-ReLU activation of every conv layer
    acts: Vec<Array3<f64>>,
}

impl ConvEncoder {
    /// `channels = [in, c1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(channels: &[usize], rng: &mut R) -> Self {
        let convs = channels
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 2, rng))
            .collect();
        Self { convs }
    }

    pub fn in_channels(&self) -> usize {
        self.convs.first().map_or(0, |c| c.in_ch)
    }

    pub fn out_dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_ch)
    }

    fn run(&self, x: ArrayView3<'_, f64>, keep: bool) -> (Array1<f64>, Option<EncoderCache>) {
        let mut caches = Vec::new();
        let mut acts: Vec<Array3<f64>> = Vec::new();
        let mut cur: Option<Array3<f64>> = None;
        for conv in &self.convs {
            let input = cur.as_ref().map_or(x, |a| a.view());
            let (mut y, cache) = conv.forward(input);
            y.mapv_inplace(|v| v.max(0.0));
            if keep {
                caches.push(cache);
                if let Some(prev) = cur.take() {
                    acts.push(prev);
                }
            }
            cur = Some(y);
        }
        let last = cur.expect("at least one conv layer");
        let (c, h, w) = last.dim();
        let pooled = last
            .to_shape((c, h * w))
            .expect("contiguous")
            .sum_axis(Axis(1))
            / (h * w) as f64;
        let cache = keep.then(|| {
            acts.push(last);
            EncoderCache {
                convs: caches,
                acts,
            }
        });
        (pooled, cache)
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array1<f64> {
        self.run(x, false).0
    }

    pub fn forward_train(&self, x: ArrayView3<'_, f64>) -> (Array1<f64>, EncoderCache) {
        let (h, cache) = self.run(x, true);
        (h, cache.expect("cache requested"))
    }

    /// Accumulate parameter gradients for `dh = dL/dh` into `grad`.
    pub fn backward(&self, cache: &EncoderCache, dh: &Array1<f64>, grad: &mut ConvEncoder) {
        let last = cache.acts.last().expect("activations");
        let (c, h, w) = last.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut d = Array3::from_shape_fn((c, h, w), |(ci, _, _)| dh[ci] * scale);
        for i in (0..self.convs.len()).rev() {
            ndarray::Zip::from(&mut d).and(&cache.acts[i]).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let dx = self.convs[i].backward(&cache.convs[i], d.view(), &mut grad.convs[i], i > 0);
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl Parameters for ConvEncoder {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(TensorRef {
                name: format!("conv{i}.weight"),
                shape: vec![c.out_ch, c.in_ch, K, K],
                data: slice_of(&c.weight),
            });
            out.push(TensorRef {
                name: format!("conv{i}.bias"),
                shape: vec![c.out_ch],
                data: slice_of(&c.bias),
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(slice_of_mut(&mut c.weight));
            out.push(slice_of_mut(&mut c.bias));
        }
        out
    }
}
