//! Layer kinds with per-sample forward and backward passes.
//!
//! Convolutions are valid (no padding) with stride 1 and are lowered to a
//! matrix product over an im2col buffer.

use rand::Rng;

use super::gemm::{add_row_dots, gemm_strided, Mat};
use super::NnError;

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Image { c, h, w } => vec![c, h, w],
            Shape::Flat(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize },
    MaxPool { size: usize },
    Relu,
    Flatten,
    Dense { neurons: usize },
    Softmax,
    LinearOutput,
}

impl LayerSpec {
    pub fn output_shape(&self, input: Shape) -> Result<Shape, NnError> {
        let err = |msg: String| Err(NnError::Config(msg));
        match (*self, input) {
            (LayerSpec::Conv2d { filters, kernel }, Shape::Image { h, w, .. }) => {
                if filters == 0 || kernel == 0 || h < kernel || w < kernel {
                    return err(format!("conv {kernel}x{kernel} does not fit {h}x{w} input"));
                }
                Ok(Shape::Image { c: filters, h: h - kernel + 1, w: w - kernel + 1 })
            }
            (LayerSpec::MaxPool { size }, Shape::Image { c, h, w }) => {
                if size == 0 || h < size || w < size {
                    return err(format!("max pool {size}x{size} does not fit {h}x{w} input"));
                }
                Ok(Shape::Image { c, h: h / size, w: w / size })
            }
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Flatten, s) => Ok(Shape::Flat(s.len())),
            (LayerSpec::Dense { neurons }, Shape::Flat(_)) if neurons > 0 => Ok(Shape::Flat(neurons)),
            (LayerSpec::Softmax | LayerSpec::LinearOutput, Shape::Flat(n)) => Ok(Shape::Flat(n)),
            (spec, s) => err(format!("{spec:?} cannot follow a layer producing {s:?}")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
            LayerSpec::LinearOutput => "linear_output",
        }
    }
}

/// A layer bound to its input shape, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    /// Conv: `[filters, in_c * k * k]`. Dense: `[neurons, inputs]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Reusable buffers for the conv lowering.
#[derive(Debug, Default)]
pub struct Scratch {
    col: Vec<f32>,
    padded: Vec<f32>,
    flipped: Vec<f32>,
}

impl Layer {
    pub fn new(spec: LayerSpec, input: Shape) -> Result<Self, NnError> {
        let output = spec.output_shape(input)?;
        let (nw, nb) = match (spec, input) {
            (LayerSpec::Conv2d { filters, kernel }, Shape::Image { c, .. }) => (filters * c * kernel * kernel, filters),
            (LayerSpec::Dense { neurons }, Shape::Flat(n)) => (neurons * n, neurons),
            _ => (0, 0),
        };
        Ok(Self { spec, input, output, weights: vec![0.0; nw], bias: vec![0.0; nb] })
    }

    pub fn fan_in(&self) -> usize {
        match (self.spec, self.input) {
            (LayerSpec::Conv2d { kernel, .. }, Shape::Image { c, .. }) => c * kernel * kernel,
            (LayerSpec::Dense { .. }, Shape::Flat(n)) => n,
            _ => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        !self.weights.is_empty()
    }

    /// He-style uniform initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// with zero biases.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        if !self.has_params() {
            return;
        }
        let limit = (6.0 / self.fan_in() as f32).sqrt();
        for w in &mut self.weights {
            *w = rng.gen_range(-limit..limit);
        }
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// `aux` receives max-pool argmax indices.
    pub fn forward(&self, x: &[f32], y: &mut Vec<f32>, aux: &mut Vec<u32>, scratch: &mut Scratch) {
        debug_assert_eq!(x.len(), self.input.len());
        y.clear();
        y.resize(self.output.len(), 0.0);
        match (self.spec, self.input, self.output) {
            (LayerSpec::Conv2d { kernel, .. }, Shape::Image { c, h, w }, Shape::Image { c: f, h: oh, w: ow }) => {
                let ckk = c * kernel * kernel;
                let hw = oh * ow;
                let strip = strip_rows(ckk, ow);
                for oy0 in (0..oh).step_by(strip) {
                    let oy1 = (oy0 + strip).min(oh);
                    let nc = (oy1 - oy0) * ow;
                    im2col(x, c, h, w, kernel, oy0, oy1, &mut scratch.col);
                    let a = Mat::rows(&self.weights, ckk);
                    let b = Mat::rows(&scratch.col, nc);
                    gemm_strided(f, ckk, nc, a, b, &mut y[oy0 * ow..], hw, 0.0);
                }
                for (row, b) in y.chunks_exact_mut(hw).zip(&self.bias) {
                    row.iter_mut().for_each(|v| *v += b);
                }
            }
            (LayerSpec::MaxPool { size }, Shape::Image { c, h, w }, Shape::Image { h: oh, w: ow, .. }) => {
                aux.clear();
                aux.resize(self.output.len(), 0);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut arg = 0usize;
                            for dy in 0..size {
                                let base = ch * h * w + (oy * size + dy) * w + ox * size;
                                for dx in 0..size {
                                    let v = x[base + dx];
                                    if v > best {
                                        best = v;
                                        arg = base + dx;
                                    }
                                }
                            }
                            let o = ch * oh * ow + oy * ow + ox;
                            y[o] = best;
                            aux[o] = arg as u32;
                        }
                    }
                }
            }
            (LayerSpec::Relu, _, _) => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = v.max(0.0);
                }
            }
            (LayerSpec::Flatten | LayerSpec::LinearOutput, _, _) => y.copy_from_slice(x),
            (LayerSpec::Dense { .. }, Shape::Flat(n), _) => {
                for ((o, row), b) in y.iter_mut().zip(self.weights.chunks_exact(n)).zip(&self.bias) {
                    *o = dot(row, x) + b;
                }
            }
            (LayerSpec::Softmax, _, _) => softmax(x, y),
            _ => unreachable!("layer shapes validated at construction"),
        }
    }

    /// Accumulates parameter gradients into `dw`/`db` and, when `dx` is
    /// given, writes the input gradient. `x`/`y`/`aux` are the cached
    /// forward values.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f32],
        y: &[f32],
        aux: &[u32],
        dy: &[f32],
        dx: Option<&mut Vec<f32>>,
        dw: &mut [f32],
        db: &mut [f32],
        scratch: &mut Scratch,
    ) {
        let mut dx = dx;
        if let Some(d) = dx.as_deref_mut() {
            d.clear();
            d.resize(self.input.len(), 0.0);
        }
        match (self.spec, self.input, self.output) {
            (LayerSpec::Conv2d { kernel, .. }, Shape::Image { c, h, w }, Shape::Image { c: f, h: oh, w: ow }) => {
                let ckk = c * kernel * kernel;
                let hw = oh * ow;
                for (g, row) in db.iter_mut().zip(dy.chunks_exact(hw)) {
                    *g += row.iter().sum::<f32>();
                }
                let strip = strip_rows(ckk, ow);
                for oy0 in (0..oh).step_by(strip) {
                    let oy1 = (oy0 + strip).min(oh);
                    let nc = (oy1 - oy0) * ow;
                    im2col(x, c, h, w, kernel, oy0, oy1, &mut scratch.col);
                    add_row_dots(&dy[oy0 * ow..], hw, f, &scratch.col, nc, ckk, nc, dw, ckk);
                }
                if let Some(d) = dx {
                    // full convolution of the padded output gradient with the flipped kernels
                    let (ph, pw) = (h + kernel - 1, w + kernel - 1);
                    pad(dy, f, oh, ow, kernel - 1, &mut scratch.padded);
                    flip_kernels(&self.weights, f, c, kernel, &mut scratch.flipped);
                    let fkk = f * kernel * kernel;
                    let strip = strip_rows(fkk, w);
                    for y0 in (0..h).step_by(strip) {
                        let y1 = (y0 + strip).min(h);
                        let nc = (y1 - y0) * w;
                        im2col(&scratch.padded, f, ph, pw, kernel, y0, y1, &mut scratch.col);
                        let out = &mut d[y0 * w..];
                        gemm_strided(c, fkk, nc, Mat::rows(&scratch.flipped, fkk), Mat::rows(&scratch.col, nc), out, h * w, 0.0);
                    }
                }
            }
            (LayerSpec::MaxPool { .. }, _, _) => {
                if let Some(d) = dx {
                    for (&g, &idx) in dy.iter().zip(aux) {
                        d[idx as usize] += g;
                    }
                }
            }
            (LayerSpec::Relu, _, _) => {
                if let Some(d) = dx {
                    for ((o, &g), &v) in d.iter_mut().zip(dy).zip(x) {
                        *o = if v > 0.0 { g } else { 0.0 };
                    }
                }
            }
            (LayerSpec::Flatten | LayerSpec::LinearOutput, _, _) => {
                if let Some(d) = dx {
                    d.copy_from_slice(dy);
                }
            }
            (LayerSpec::Dense { .. }, Shape::Flat(n), _) => {
                for ((row, &g), b) in dw.chunks_exact_mut(n).zip(dy).zip(db.iter_mut()) {
                    *b += g;
                    if g != 0.0 {
                        axpy(g, x, row);
                    }
                }
                if let Some(d) = dx {
                    for (row, &g) in self.weights.chunks_exact(n).zip(dy) {
                        if g != 0.0 {
                            axpy(g, row, d);
                        }
                    }
                }
            }
            (LayerSpec::Softmax, _, _) => {
                if let Some(d) = dx {
                    let s: f32 = dy.iter().zip(y).map(|(g, p)| g * p).sum();
                    for ((o, &g), &p) in d.iter_mut().zip(dy).zip(y) {
                        *o = p * (g - s);
                    }
                }
            }
            _ => unreachable!("layer shapes validated at construction"),
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Independent lanes let the compiler vectorize the reduction.
    let mut acc = [0.0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..16 {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub(crate) fn softmax(x: &[f32], y: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &v) in y.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    y.iter_mut().for_each(|v| *v /= sum);
}

/// Floats per im2col strip; small enough to stay cache resident.
const STRIP_FLOATS: usize = 1 << 16;

fn strip_rows(ckk: usize, ow: usize) -> usize {
    (STRIP_FLOATS / (ckk * ow).max(1)).max(1)
}

/// Lays out the `k x k` patches of output rows `oy0..oy1` as columns:
/// row `(ci, ky, kx)`, column `(oy - oy0, ox)`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, oy0: usize, oy1: usize, col: &mut Vec<f32>) {
    let ow = w - k + 1;
    let n = (oy1 - oy0) * ow;
    col.clear();
    col.resize(c * k * k * n, 0.0);
    let mut r = 0;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[r * n..(r + 1) * n];
                for (i, oy) in (oy0..oy1).enumerate() {
                    let src = ci * h * w + (oy + ky) * w + kx;
                    dst[i * ow..(i + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
                r += 1;
            }
        }
    }
}

/// Zero-pads each of the `c` planes by `p` on every side.
fn pad(x: &[f32], c: usize, h: usize, w: usize, p: usize, out: &mut Vec<f32>) {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    out.clear();
    out.resize(c * ph * pw, 0.0);
    for ci in 0..c {
        for y in 0..h {
            let dst = ci * ph * pw + (y + p) * pw + p;
            out[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
}

/// Rearranges `f x (c, ky, kx)` weights into `c x (f, k-1-ky, k-1-kx)`.
fn flip_kernels(weights: &[f32], f: usize, c: usize, k: usize, out: &mut Vec<f32>) {
    let kk = k * k;
    out.clear();
    out.resize(weights.len(), 0.0);
    for fi in 0..f {
        for ci in 0..c {
            for t in 0..kk {
                out[(ci * f + fi) * kk + (kk - 1 - t)] = weights[(fi * c + ci) * kk + t];
            }
        }
    }
}
