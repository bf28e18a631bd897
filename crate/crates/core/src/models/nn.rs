//! Feed-forward networks built from dense, 3×3 convolution, 2×2 max-pool,
//! ReLU and dropout layers, with exact backpropagation.
//!
//! Activations are `batch × features`; image features are laid out
//! channel-major (`c·H·W + y·W + x`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{gemm, Matrix, RngStream};

const KERNEL: usize = 3;
/// Upper bound on rows per evaluation chunk.
const EVAL_CHUNK: usize = 256;
/// Target number of activation values held per chunk (keeps it in cache).
const CHUNK_VALUES: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `w` is `inputs × outputs`.
    Dense { w: Matrix, b: Vec<f64> },
    /// 3×3, stride 1, valid padding. `w` is `(in_ch·9) × out_ch`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        in_h: usize,
        in_w: usize,
        w: Matrix,
        b: Vec<f64>,
    },
    Relu,
    /// 2×2, stride 2, floor.
    MaxPool { ch: usize, in_h: usize, in_w: usize },
    /// Inverted dropout; identity at evaluation.
    Dropout { rate: f64 },
}

impl Layer {
    fn output_size(&self, input: usize) -> usize {
        match self {
            Layer::Dense { w, .. } => w.cols(),
            Layer::Conv { out_ch, in_h, in_w, .. } => out_ch * (in_h - 2) * (in_w - 2),
            Layer::MaxPool { ch, in_h, in_w } => ch * (in_h / 2) * (in_w / 2),
            Layer::Relu | Layer::Dropout { .. } => input,
        }
    }

    fn is_parametric(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    n_inputs: usize,
}

/// Gradients for one parametric layer.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
}

enum Cache {
    Dense { input: Matrix },
    Conv { input: Matrix },
    Relu { output: Matrix },
    MaxPool { argmax: Vec<usize>, in_size: usize },
    Dropout { mask: Option<Vec<f64>> },
}

pub struct Trace {
    caches: Vec<Cache>,
    pub logits: Matrix,
}

/// He-scaled Gaussian initialisation helpers.
fn he_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut RngStream) -> Matrix {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

/// Blueprint of a network, before weights exist.
#[derive(Clone, Debug)]
pub enum Spec {
    Dense(usize),
    Conv(usize),
    Relu,
    MaxPool,
    Dropout(f64),
}

impl Network {
    /// Builds and He-initialises a network. `image` gives (h, w) of a single
    /// channel input and is required for convolutions.
    pub fn build(n_inputs: usize, image: Option<(usize, usize)>, spec: &[Spec], rng: &mut RngStream) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len());
        let mut size = n_inputs;
        let mut shape = image.map(|(h, w)| (1usize, h, w));
        for s in spec {
            let layer = match *s {
                Spec::Dense(out) => {
                    shape = None;
                    Layer::Dense {
                        w: he_matrix(size, out, size, rng),
                        b: vec![0.0; out],
                    }
                }
                Spec::Conv(out_ch) => {
                    let (in_ch, in_h, in_w) =
                        shape.ok_or_else(|| Error::Config("convolution needs an image-shaped input".into()))?;
                    if in_h < KERNEL || in_w < KERNEL {
                        return Err(Error::Config(format!("{in_h}x{in_w} input is smaller than the kernel")));
                    }
                    shape = Some((out_ch, in_h - 2, in_w - 2));
                    let fan_in = in_ch * KERNEL * KERNEL;
                    Layer::Conv {
                        in_ch,
                        out_ch,
                        in_h,
                        in_w,
                        w: he_matrix(fan_in, out_ch, fan_in, rng),
                        b: vec![0.0; out_ch],
                    }
                }
                Spec::MaxPool => {
                    let (ch, in_h, in_w) =
                        shape.ok_or_else(|| Error::Config("max-pool needs an image-shaped input".into()))?;
                    if in_h < 2 || in_w < 2 {
                        return Err(Error::Config(format!("{in_h}x{in_w} map is too small to pool")));
                    }
                    shape = Some((ch, in_h / 2, in_w / 2));
                    Layer::MaxPool { ch, in_h, in_w }
                }
                Spec::Relu => Layer::Relu,
                Spec::Dropout(rate) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    Layer::Dropout { rate }
                }
            };
            size = layer.output_size(size);
            layers.push(layer);
        }
        Ok(Self { layers, n_inputs })
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.layers
            .iter()
            .fold(self.n_inputs, |size, l| l.output_size(size))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Weight matrices of the parametric layers, in order.
    pub fn parameter_matrices(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { w, .. } | Layer::Conv { w, .. } => Some(w),
                _ => None,
            })
            .collect()
    }

    pub fn n_parametric(&self) -> usize {
        self.layers.iter().filter(|l| l.is_parametric()).count()
    }

    /// Sizes of each parametric layer's (post-nonlinearity) output.
    pub fn activation_sizes(&self) -> Vec<usize> {
        let mut size = self.n_inputs;
        let mut out = Vec::new();
        for l in &self.layers {
            size = l.output_size(size);
            if l.is_parametric() {
                out.push(size);
            }
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.n_inputs {
            return Err(Error::Shape(format!(
                "network expects {} features, got {}",
                self.n_inputs,
                x.cols()
            )));
        }
        Ok(())
    }

    /// Logits with dropout disabled.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.rows() * self.n_outputs());
        let widest = self.layers.iter().fold((self.n_inputs, self.n_inputs), |(size, top), l| {
            let next = l.output_size(size);
            (next, top.max(next))
        });
        let chunk = (CHUNK_VALUES / widest.1).clamp(4, EVAL_CHUNK);
        for start in (0..x.rows()).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(x.rows())).collect();
            let mut a = x.select_rows(&idx);
            for layer in &self.layers {
                a = forward_layer(layer, a, false, None).0;
            }
            out.extend_from_slice(a.as_slice());
        }
        Ok(Matrix::from_vec_unchecked(x.rows(), self.n_outputs(), out))
    }

    /// Output of parametric layer `k` after its ReLU (softmax for the last
    /// layer), dropout disabled. Shape: samples × neurons.
    pub fn activations(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        self.check_input(x)?;
        let n_param = self.n_parametric();
        if k >= n_param {
            return Err(Error::Config(format!("layer index {k} out of range (network has {n_param})")));
        }
        let mut a = x.clone();
        let mut seen = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            a = forward_layer(layer, a, false, None).0;
            if layer.is_parametric() {
                if seen == k {
                    if k + 1 == n_param {
                        softmax_rows(&mut a);
                    } else if matches!(self.layers.get(i + 1), Some(Layer::Relu)) {
                        a = forward_layer(&Layer::Relu, a, false, None).0;
                    }
                    return Ok(a);
                }
                seen += 1;
            }
        }
        unreachable!("layer index validated above")
    }

    /// Forward pass that keeps what backpropagation needs. Dropout masks are
    /// drawn from `dropout` when given, otherwise dropout is disabled.
    pub fn forward_trace(&self, x: &Matrix, mut dropout: Option<&mut RngStream>) -> Result<Trace> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let (out, cache) = forward_layer(layer, a, true, dropout.as_deref_mut());
            caches.push(cache.expect("tracing forward keeps caches"));
            a = out;
        }
        Ok(Trace { caches, logits: a })
    }

    /// Backpropagates `d_logits` (batch × outputs). Returns per-parametric-layer
    /// gradients (when `want_params`) and the gradient with respect to the input.
    pub fn backward(&self, trace: Trace, d_logits: Matrix, want_params: bool) -> (Vec<ParamGrad>, Matrix) {
        let mut grads = Vec::new();
        let mut g = d_logits;
        for (layer, cache) in self.layers.iter().zip(trace.caches).rev() {
            let (g_in, pg) = backward_layer(layer, cache, g, want_params);
            if let Some(pg) = pg {
                grads.push(pg);
            }
            g = g_in;
        }
        grads.reverse();
        (grads, g)
    }

    /// Applies `update(w, b, grad)` to every parametric layer in order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut Matrix, &mut Vec<f64>)) {
        let mut k = 0;
        for layer in &mut self.layers {
            if let Layer::Dense { w, b } | Layer::Conv { w, b, .. } = layer {
                f(k, w, b);
                k += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parameter_matrices().iter().all(|m| m.is_finite())
    }
}

pub(crate) fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for r in 0..m.rows() {
        m.row_mut(r).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
    }
}

/// Writes the `(in_ch·9) × (oh·ow)` patch matrix of one image: row
/// `c·9 + ky·3 + kx` holds the input plane `c` shifted by `(ky, kx)`.
fn patches_into(img: &[f64], in_ch: usize, in_h: usize, in_w: usize, out: &mut [f64]) {
    let (oh, ow) = (in_h - 2, in_w - 2);
    let plane = oh * ow;
    for c in 0..in_ch {
        let ip = &img[c * in_h * in_w..(c + 1) * in_h * in_w];
        for t in 0..KERNEL * KERNEL {
            let (ky, kx) = (t / KERNEL, t % KERNEL);
            let row = &mut out[(c * 9 + t) * plane..(c * 9 + t + 1) * plane];
            for y in 0..oh {
                row[y * ow..(y + 1) * ow].copy_from_slice(&ip[(y + ky) * in_w + kx..][..ow]);
            }
        }
    }
}

/// 3×3 valid convolution, channel-major planes in and out.
fn conv_forward(x: &Matrix, in_ch: usize, out_ch: usize, in_h: usize, in_w: usize, w: &Matrix, b: &[f64]) -> Matrix {
    let plane = (in_h - 2) * (in_w - 2);
    let k = in_ch * 9;
    let batch = x.rows();
    let mut out = vec![0.0; batch * out_ch * plane];
    let mut patches = vec![0.0; k * plane];
    for bi in 0..batch {
        patches_into(x.row(bi), in_ch, in_h, in_w, &mut patches);
        let dst = &mut out[bi * out_ch * plane..(bi + 1) * out_ch * plane];
        for (o, bo) in b.iter().enumerate() {
            dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *bo);
        }
        // dst (out_ch × plane) += wᵀ · patches
        gemm(
            (out_ch, k, plane),
            (w.as_slice(), 1, out_ch as isize),
            (&patches, plane as isize, 1),
            dst,
            1.0,
        );
    }
    Matrix::from_vec_unchecked(batch, out_ch * plane, out)
}

/// Gradients of [`conv_forward`]: with respect to the input, and (when
/// `want_params`) to the weights and biases.
fn conv_backward(
    input: &Matrix,
    g: &Matrix,
    (in_ch, out_ch, in_h, in_w): (usize, usize, usize, usize),
    w: &Matrix,
    want_params: bool,
) -> (Vec<f64>, Option<ParamGrad>) {
    let (oh, ow) = (in_h - 2, in_w - 2);
    let plane = oh * ow;
    let k = in_ch * 9;
    let batch = g.rows();
    let size = in_ch * in_h * in_w;
    let mut g_in = vec![0.0; batch * size];
    let mut d_patches = vec![0.0; k * plane];
    let mut patches = vec![0.0; k * plane];
    let mut gw = vec![0.0; k * out_ch];
    let mut gb = vec![0.0; out_ch];
    for bi in 0..batch {
        let gr = g.row(bi);
        // d_patches (k × plane) = w · g_b
        gemm((k, out_ch, plane), (w.as_slice(), out_ch as isize, 1), (gr, plane as isize, 1), &mut d_patches, 0.0);
        let dst = &mut g_in[bi * size..(bi + 1) * size];
        for c in 0..in_ch {
            let ip = &mut dst[c * in_h * in_w..(c + 1) * in_h * in_w];
            for t in 0..KERNEL * KERNEL {
                let (ky, kx) = (t / KERNEL, t % KERNEL);
                let row = &d_patches[(c * 9 + t) * plane..(c * 9 + t + 1) * plane];
                for y in 0..oh {
                    let target = &mut ip[(y + ky) * in_w + kx..][..ow];
                    target.iter_mut().zip(&row[y * ow..(y + 1) * ow]).for_each(|(a, v)| *a += v);
                }
            }
        }
        if want_params {
            patches_into(input.row(bi), in_ch, in_h, in_w, &mut patches);
            // gw (k × out_ch) += patches · g_bᵀ
            gemm((k, plane, out_ch), (&patches, plane as isize, 1), (gr, 1, plane as isize), &mut gw, 1.0);
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gr[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    let pg = want_params.then(|| ParamGrad {
        w: Matrix::from_vec_unchecked(k, out_ch, gw),
        b: gb,
    });
    (g_in, pg)
}

fn forward_layer(layer: &Layer, x: Matrix, trace: bool, dropout: Option<&mut RngStream>) -> (Matrix, Option<Cache>) {
    match layer {
        Layer::Dense { w, b } => {
            let mut out = x.matmul(w).expect("dense shapes validated at build");
            add_bias(&mut out, b);
            (out, trace.then_some(Cache::Dense { input: x }))
        }
        Layer::Conv {
            in_ch,
            out_ch,
            in_h,
            in_w,
            w,
            b,
        } => {
            let out = conv_forward(&x, *in_ch, *out_ch, *in_h, *in_w, w, b);
            (out, trace.then_some(Cache::Conv { input: x }))
        }
        Layer::Relu => {
            let mut out = x;
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            let cache = trace.then(|| Cache::Relu { output: out.clone() });
            (out, cache)
        }
        Layer::MaxPool { ch, in_h, in_w } => {
            let (oh, ow) = (in_h / 2, in_w / 2);
            let batch = x.rows();
            let out_size = ch * oh * ow;
            let mut out = vec![0.0; batch * out_size];
            let mut argmax = if trace { vec![0usize; batch * out_size] } else { Vec::new() };
            for bi in 0..batch {
                let xr = x.row(bi);
                for c in 0..*ch {
                    let ip = &xr[c * in_h * in_w..(c + 1) * in_h * in_w];
                    for y in 0..oh {
                        let (r0, r1) = (&ip[2 * y * in_w..][..2 * ow], &ip[(2 * y + 1) * in_w..][..2 * ow]);
                        let o = bi * out_size + c * oh * ow + y * ow;
                        for xx in 0..ow {
                            let cands = [r0[2 * xx], r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]];
                            let mut best = 0;
                            for q in 1..4 {
                                if cands[q] > cands[best] {
                                    best = q;
                                }
                            }
                            out[o + xx] = cands[best];
                            if trace {
                                argmax[o + xx] = c * in_h * in_w + (2 * y + best / 2) * in_w + 2 * xx + best % 2;
                            }
                        }
                    }
                }
            }
            (
                Matrix::from_vec_unchecked(batch, out_size, out),
                trace.then_some(Cache::MaxPool {
                    argmax,
                    in_size: x.cols(),
                }),
            )
        }
        Layer::Dropout { rate } => match dropout {
            Some(rng) if *rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..x.as_slice().len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut out = x;
                out.as_mut_slice().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                (out, trace.then_some(Cache::Dropout { mask: Some(mask) }))
            }
            _ => (x, trace.then_some(Cache::Dropout { mask: None })),
        },
    }
}

fn backward_layer(layer: &Layer, cache: Cache, g: Matrix, want_params: bool) -> (Matrix, Option<ParamGrad>) {
    match (layer, cache) {
        (Layer::Dense { w, .. }, Cache::Dense { input }) => {
            let g_in = g.matmul_t(w).expect("dense backward shapes");
            let pg = want_params.then(|| ParamGrad {
                w: input.t_matmul(&g).expect("dense weight grad shapes"),
                b: column_sums(&g),
            });
            (g_in, pg.or(Some(ParamGrad::empty())))
        }
        (
            Layer::Conv {
                in_ch,
                out_ch,
                in_h,
                in_w,
                w,
                ..
            },
            Cache::Conv { input },
        ) => {
            let batch = input.rows();
            let (g_in, pg) = conv_backward(&input, &g, (*in_ch, *out_ch, *in_h, *in_w), w, want_params);
            (
                Matrix::from_vec_unchecked(batch, in_ch * in_h * in_w, g_in),
                pg.or(Some(ParamGrad::empty())),
            )
        }
        (Layer::Relu, Cache::Relu { output }) => {
            let mut g = g;
            g.as_mut_slice()
                .iter_mut()
                .zip(output.as_slice())
                .for_each(|(gv, o)| {
                    if *o <= 0.0 {
                        *gv = 0.0
                    }
                });
            (g, None)
        }
        (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_size }) => {
            let batch = g.rows();
            let out_size = g.cols();
            let mut g_in = vec![0.0; batch * in_size];
            for bi in 0..batch {
                for (o, gv) in g.row(bi).iter().enumerate() {
                    g_in[bi * in_size + argmax[bi * out_size + o]] += gv;
                }
            }
            (Matrix::from_vec_unchecked(batch, in_size, g_in), None)
        }
        (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
            let mut g = g;
            if let Some(mask) = mask {
                g.as_mut_slice().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            }
            (g, None)
        }
        _ => unreachable!("cache kind always matches its layer"),
    }
}

impl ParamGrad {
    fn empty() -> Self {
        ParamGrad {
            w: Matrix::zeros(0, 0),
            b: Vec::new(),
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in m.row_iter() {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    out
}
