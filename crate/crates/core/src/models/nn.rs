//! Layers with hand-written backward passes over `[C, H, W]` maps.
//!
//! A [`Network`] is a list of stages, each a list of [`Layer`]s. The output
//! of every stage is kept so callers can tap intermediate features and inject
//! gradients at those taps during the backward pass. Parameters live in a
//! flat, named [`Params`] store shared by the optimizer and checkpoints.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Result};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub blocks: Vec<ParamBlock>,
}

impl Params {
    /// Adds a block initialized from `U(-bound, bound)`, drawn from a stream
    /// keyed by `(seed, name)` so unrelated blocks never shift each other's
    /// initial values.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(block_seed(seed, name));
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| if bound > 0.0 { round_f32(rng.gen_range(-bound..bound)) } else { 0.0 })
            .collect();
        self.push(name, shape, values)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name, shape, vec![round_f32(value); n])
    }

    fn push(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        self.blocks.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.blocks[id].values
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    /// Keeps every value exactly representable as `f32`, so checkpoints
    /// written as `float32` reload bit-identically.
    pub fn round_to_f32(&mut self) {
        for b in &mut self.blocks {
            for v in &mut b.values {
                *v = round_f32(*v);
            }
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.blocks {
            h.update(b.name.as_bytes());
            for v in &b.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            blocks: self.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn block_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Gradient buffers laid out like [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub blocks: Vec<Vec<f64>>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            for v in b {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }

    fn slot(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.blocks[id]
    }
}

/// Forward-pass mode; dropout draws masks from the RNG in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(params: &mut Params, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, seed: u64) -> Self {
        Self::with_scale(params, name, cin, cout, kernel, stride, pad, seed, 1.0)
    }

    /// `scale` multiplies the default `1/sqrt(fan_in)` init bound.
    #[allow(clippy::too_many_arguments)]
    pub fn with_scale(params: &mut Params, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, seed: u64, scale: f64) -> Self {
        let bound = scale / ((cin * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: params.add_uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound, seed),
            bias: params.add_uniform(&format!("{name}.bias"), &[cout], bound, seed),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn weight_matrix<'p>(&self, params: &'p Params) -> ArrayView2<'p, f64> {
        ArrayView2::from_shape((self.cout, self.cin * self.kernel * self.kernel), params.get(self.weight))
            .expect("weight block shape")
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        if k == 1 && s == 1 && p == 0 {
            return x.to_shape((c, h * w)).expect("contiguous").into_owned();
        }
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let mut row = cols.row_mut((ci * k + ki) * k + kj);
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = shape;
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        if k == 1 && s == 1 && p == 0 {
            return dcols.to_shape((c, h, w)).expect("contiguous").into_owned();
        }
        let mut dx = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = dcols.row((ci * k + ki) * k + kj);
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dx[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, params: &Params, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        let cols = self.im2col(x);
        let bias = params.get(self.bias);
        let mut y = Array2::from_shape_fn((self.cout, ho * wo), |(o, _)| bias[o]);
        general_mat_mul(1.0, &self.weight_matrix(params), &cols, 1.0, &mut y);
        (y.into_shape_with_order((self.cout, ho, wo)).expect("conv output"), cols)
    }

    fn backward(&self, params: &Params, cols: &Array2<f64>, in_shape: (usize, usize, usize), dy: &Array3<f64>, grads: Option<&mut Grads>) -> Array3<f64> {
        let (_, ho, wo) = dy.dim();
        let dy2 = dy.to_shape((self.cout, ho * wo)).expect("contiguous");
        if let Some(g) = grads {
            let gw = g.slot(self.weight);
            let mut gw = ndarray::ArrayViewMut2::from_shape((self.cout, cols.nrows()), gw).expect("weight grad");
            general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut gw);
            let gb = g.slot(self.bias);
            for (o, row) in dy2.outer_iter().enumerate() {
                gb[o] += row.sum();
            }
        }
        let dcols = self.weight_matrix(params).t().dot(&dy2);
        self.col2im(&dcols, in_shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, din: usize, dout: usize, seed: u64) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Linear {
            weight: params.add_uniform(&format!("{name}.weight"), &[dout, din], bound, seed),
            bias: params.add_uniform(&format!("{name}.bias"), &[dout], bound, seed),
            din,
            dout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: params.add_const(&format!("{name}.gamma"), &[channels], 1.0),
            beta: params.add_const(&format!("{name}.beta"), &[channels], 0.0),
            channels,
        }
    }
}

/// Single-head non-local attention: `out = x + γ · V softmax(QᵀK)ᵀ` with
/// 1×1 projections and softmax over all spatial positions per query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: ParamId,
}

impl SelfAttention {
    pub fn new(params: &mut Params, name: &str, channels: usize, seed: u64) -> Self {
        let inner = (channels / 8).max(1);
        SelfAttention {
            query: Conv2d::new(params, &format!("{name}.query"), channels, inner, 1, 1, 0, seed),
            key: Conv2d::new(params, &format!("{name}.key"), channels, inner, 1, 1, 0, seed),
            value: Conv2d::new(params, &format!("{name}.value"), channels, channels, 1, 1, 0, seed),
            gamma: params.add_const(&format!("{name}.gamma"), &[1], 0.0),
        }
    }

    /// Attention weights `[N, N]`; row `i` is the distribution of query `i`.
    pub fn weights(&self, params: &Params, x: &Array3<f64>) -> Array2<f64> {
        self.project(params, x).3
    }

    #[allow(clippy::type_complexity)]
    fn project(&self, params: &Params, x: &Array3<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let (c, h, w) = x.dim();
        let n = h * w;
        let q = flat(self.query.forward(params, x).0, n);
        let k = flat(self.key.forward(params, x).0, n);
        let v = flat(self.value.forward(params, x).0, n);
        debug_assert_eq!(v.nrows(), c);
        let mut a = q.t().dot(&k);
        for mut row in a.outer_iter_mut() {
            softmax_inplace(row.as_slice_mut().expect("row-major"));
        }
        (q, k, v, a)
    }
}

fn flat(x: Array3<f64>, n: usize) -> Array2<f64> {
    let c = x.len_of(Axis(0));
    x.into_shape_with_order((c, n)).expect("contiguous")
}

/// Numerically stable in-place softmax.
pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Elu,
    MaxPool2,
    Dropout(f64),
    InstanceNorm(InstanceNorm),
    Upsample2,
    Attention(SelfAttention),
    /// Flattens the input and returns `[dout, 1, 1]`.
    Linear(Linear),
}

#[derive(Debug, Clone)]
pub enum Cache {
    Conv { cols: Array2<f64>, in_shape: (usize, usize, usize) },
    Elu { out: Array3<f64> },
    MaxPool { argmax: Vec<usize>, in_shape: (usize, usize, usize) },
    Dropout { mask: Option<Array3<f64>> },
    Norm { xhat: Array3<f64>, inv_std: Array1<f64> },
    Upsample { in_shape: (usize, usize, usize) },
    Attention { x: Array3<f64>, q: Array2<f64>, k: Array2<f64>, v: Array2<f64>, a: Array2<f64>, o: Array2<f64> },
    Linear { x: Array1<f64>, in_shape: (usize, usize, usize) },
}

pub const ELU_ALPHA: f64 = 1.0;

impl Layer {
    pub fn forward(&self, params: &Params, x: &Array3<f64>, mode: &mut Mode) -> (Array3<f64>, Cache) {
        match self {
            Layer::Conv(conv) => {
                let (y, cols) = conv.forward(params, x);
                (y, Cache::Conv { cols, in_shape: x.dim() })
            }
            Layer::Elu => {
                let y = x.mapv(|v| if v > 0.0 { v } else { ELU_ALPHA * v.exp_m1() });
                (y.clone(), Cache::Elu { out: y })
            }
            Layer::MaxPool2 => {
                let (c, h, w) = x.dim();
                let (ho, wo) = (h / 2, w / 2);
                let mut y = Array3::zeros((c, ho, wo));
                let mut argmax = Vec::with_capacity(c * ho * wo);
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                                    let v = x[[ci, iy, ix]];
                                    if v > best.0 {
                                        best = (v, (ci * h + iy) * w + ix);
                                    }
                                }
                            }
                            y[[ci, oy, ox]] = best.0;
                            argmax.push(best.1);
                        }
                    }
                }
                (y, Cache::MaxPool { argmax, in_shape: x.dim() })
            }
            Layer::Dropout(rate) => match mode {
                Mode::Train(rng) if *rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask = x.mapv(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    (x * &mask, Cache::Dropout { mask: Some(mask) })
                }
                _ => (x.clone(), Cache::Dropout { mask: None }),
            },
            Layer::InstanceNorm(norm) => {
                let (gamma, beta) = (params.get(norm.gamma), params.get(norm.beta));
                let mut xhat = x.clone();
                let mut inv_std = Array1::zeros(norm.channels);
                let mut y = x.clone();
                for (ci, (mut xh, mut yc)) in xhat.outer_iter_mut().zip(y.outer_iter_mut()).enumerate() {
                    let n = xh.len() as f64;
                    let mean = xh.sum() / n;
                    let var = xh.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let is = 1.0 / (var + NORM_EPS).sqrt();
                    inv_std[ci] = is;
                    xh.mapv_inplace(|v| (v - mean) * is);
                    Zip::from(&mut yc).and(&xh).for_each(|yv, &h| *yv = gamma[ci] * h + beta[ci]);
                }
                (y, Cache::Norm { xhat, inv_std })
            }
            Layer::Upsample2 => {
                let (c, h, w) = x.dim();
                let y = Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]]);
                (y, Cache::Upsample { in_shape: x.dim() })
            }
            Layer::Attention(att) => {
                let (c, h, w) = x.dim();
                let (q, k, v, a) = att.project(params, x);
                let o = v.dot(&a.t());
                let gamma = params.get(att.gamma)[0];
                let y = x + &(o.to_shape((c, h, w)).expect("contiguous").mapv(|v| gamma * v));
                (y, Cache::Attention { x: x.clone(), q, k, v, a, o })
            }
            Layer::Linear(lin) => {
                let xf = Array1::from_iter(x.iter().cloned());
                let w = ArrayView2::from_shape((lin.dout, lin.din), params.get(lin.weight)).expect("linear weight");
                let b = params.get(lin.bias);
                let y = w.dot(&xf) + &ndarray::ArrayView1::from(b);
                (
                    y.into_shape_with_order((lin.dout, 1, 1)).expect("linear output"),
                    Cache::Linear { x: xf, in_shape: x.dim() },
                )
            }
        }
    }

    pub fn backward(&self, params: &Params, cache: &Cache, dy: &Array3<f64>, grads: Option<&mut Grads>) -> Array3<f64> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => conv.backward(params, cols, *in_shape, dy, grads),
            (Layer::Elu, Cache::Elu { out }) => {
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d *= o + ELU_ALPHA;
                    }
                });
                dx
            }
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = Array3::zeros(*in_shape);
                let flat = dx.as_slice_mut().expect("contiguous");
                for (&i, &g) in argmax.iter().zip(dy.iter()) {
                    flat[i] += g;
                }
                dx
            }
            (Layer::Dropout(_), Cache::Dropout { mask }) => match mask {
                Some(m) => dy * m,
                None => dy.clone(),
            },
            (Layer::InstanceNorm(norm), Cache::Norm { xhat, inv_std }) => {
                let gamma = params.get(norm.gamma);
                let mut dx = Array3::zeros(dy.dim());
                let mut dgamma = vec![0.0; norm.channels];
                let mut dbeta = vec![0.0; norm.channels];
                for ci in 0..norm.channels {
                    let (dyc, xh) = (dy.index_axis(Axis(0), ci), xhat.index_axis(Axis(0), ci));
                    let n = dyc.len() as f64;
                    let sum_dy = dyc.sum();
                    let sum_dy_xh = Zip::from(&dyc).and(&xh).fold(0.0, |acc, &d, &h| acc + d * h);
                    dgamma[ci] = sum_dy_xh;
                    dbeta[ci] = sum_dy;
                    let k = gamma[ci] * inv_std[ci] / n;
                    Zip::from(dx.index_axis_mut(Axis(0), ci)).and(&dyc).and(&xh).for_each(|d, &g, &h| {
                        *d = k * (n * g - sum_dy - h * sum_dy_xh);
                    });
                }
                if let Some(g) = grads {
                    for (a, b) in g.slot(norm.gamma).iter_mut().zip(&dgamma) {
                        *a += b;
                    }
                    for (a, b) in g.slot(norm.beta).iter_mut().zip(&dbeta) {
                        *a += b;
                    }
                }
                dx
            }
            (Layer::Upsample2, Cache::Upsample { in_shape }) => {
                let mut dx = Array3::zeros(*in_shape);
                for ((ci, i, j), &g) in dy.indexed_iter() {
                    dx[[ci, i / 2, j / 2]] += g;
                }
                dx
            }
            (Layer::Attention(att), Cache::Attention { x, q, k, v, a, o }) => {
                let (c, h, w) = x.dim();
                let n = h * w;
                let gamma = params.get(att.gamma)[0];
                let dout = dy.to_shape((c, n)).expect("contiguous");
                let d_o = dout.mapv(|g| g * gamma);
                let dv = d_o.dot(a);
                let mut da = d_o.t().dot(v);
                // Row-wise softmax backward.
                for (mut drow, arow) in da.outer_iter_mut().zip(a.outer_iter()) {
                    let dot: f64 = drow.iter().zip(arow.iter()).map(|(d, p)| d * p).sum();
                    Zip::from(&mut drow).and(&arow).for_each(|d, &p| *d = p * (*d - dot));
                }
                let ds = da;
                let dq = k.dot(&ds.t());
                let dk = q.dot(&ds);
                let mut grads = grads;
                if let Some(g) = grads.as_deref_mut() {
                    g.slot(att.gamma)[0] += Zip::from(&dout).and(o).fold(0.0, |acc, &d, &ov| acc + d * ov);
                }
                let cols = x.to_shape((c, n)).expect("contiguous").into_owned();
                let mut dx = dy.clone();
                for (conv, d) in [(att.query, dq), (att.key, dk), (att.value, dv)] {
                    let rows = d.nrows();
                    let d3 = d.into_shape_with_order((rows, h, w)).expect("contiguous");
                    dx += &conv.backward(params, &cols, (c, h, w), &d3, grads.as_deref_mut());
                }
                dx
            }
            (Layer::Linear(lin), Cache::Linear { x, in_shape }) => {
                let g = ndarray::ArrayView1::from(dy.as_slice().expect("contiguous"));
                let w = ArrayView2::from_shape((lin.dout, lin.din), params.get(lin.weight)).expect("linear weight");
                if let Some(grads) = grads {
                    let gw = grads.slot(lin.weight);
                    for (o, &go) in g.iter().enumerate() {
                        for (gwv, &xv) in gw[o * lin.din..(o + 1) * lin.din].iter_mut().zip(x.iter()) {
                            *gwv += go * xv;
                        }
                    }
                    for (gb, &go) in grads.slot(lin.bias).iter_mut().zip(g.iter()) {
                        *gb += go;
                    }
                }
                w.t().dot(&g).into_shape_with_order(*in_shape).expect("linear input shape")
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub layers: Vec<Layer>,
}

/// Per-stage caches plus stage outputs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Vec<Cache>>,
    pub outputs: Vec<Array3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: Params,
    pub stages: Vec<Stage>,
}

impl Network {
    /// Output of every stage.
    pub fn forward(&self, x: &Array3<f64>, mode: &mut Mode) -> Vec<Array3<f64>> {
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            for layer in &stage.layers {
                cur = layer.forward(&self.params, &cur, mode).0;
            }
            outputs.push(cur.clone());
        }
        outputs
    }

    pub fn forward_tape(&self, x: &Array3<f64>, mode: &mut Mode) -> Tape {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            let mut sc = Vec::with_capacity(stage.layers.len());
            for layer in &stage.layers {
                let (y, c) = layer.forward(&self.params, &cur, mode);
                sc.push(c);
                cur = y;
            }
            caches.push(sc);
            outputs.push(cur.clone());
        }
        Tape { caches, outputs }
    }

    /// Backpropagates gradients injected at stage outputs down to the input.
    /// `stage_grads[s]` is added to the gradient flowing out of stage `s`.
    /// Parameter gradients are accumulated only when `grads` is given.
    pub fn backward(&self, tape: &Tape, stage_grads: &[Option<Array3<f64>>], mut grads: Option<&mut Grads>) -> Result<Array3<f64>> {
        if stage_grads.len() != self.stages.len() {
            return Err(shape_err!("{} stage gradients for {} stages", stage_grads.len(), self.stages.len()));
        }
        let mut cur: Option<Array3<f64>> = None;
        for s in (0..self.stages.len()).rev() {
            if let Some(extra) = &stage_grads[s] {
                if extra.dim() != tape.outputs[s].dim() {
                    return Err(shape_err!("gradient {:?} at stage {s} with output {:?}", extra.dim(), tape.outputs[s].dim()));
                }
                cur = Some(match cur {
                    Some(c) => c + extra,
                    None => extra.clone(),
                });
            }
            let Some(mut g) = cur.take() else { continue };
            for (layer, cache) in self.stages[s].layers.iter().zip(&tape.caches[s]).rev() {
                g = layer.backward(&self.params, cache, &g, grads.as_deref_mut());
            }
            cur = Some(g);
        }
        cur.ok_or_else(|| shape_err!("no gradient reached the input"))
    }
}
