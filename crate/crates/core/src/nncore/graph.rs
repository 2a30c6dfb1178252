use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{NnError, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    #[default]
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub padding_mode: PaddingMode,
}

impl ConvOptions {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            padding_mode: PaddingMode::Zero,
        }
    }

    pub fn replicate(mut self) -> Self {
        self.padding_mode = PaddingMode::Replicate;
        self
    }
}

/// Normalization statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the current batch statistics (differentiable through them).
    Batch,
    /// Normalize with fixed running `(mean, var)`.
    Frozen(&'a [f64], &'a [f64]),
}

/// Per-channel batch mean and (biased) variance seen by a normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: ConvOptions,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output `(oy, ox)` under kernel tap `(i, j)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.opts.stride + i) as isize - self.opts.padding as isize;
        let ix = (ox * self.opts.stride + j) as isize - self.opts.padding as isize;
        match self.opts.padding_mode {
            PaddingMode::Zero => {
                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                    None
                } else {
                    Some((iy as usize, ix as usize))
                }
            }
            PaddingMode::Replicate => Some((
                iy.clamp(0, self.h as isize - 1) as usize,
                ix.clamp(0, self.w as isize - 1) as usize,
            )),
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let ohw = self.col_cols();
        for ch in 0..self.c {
            let plane = &image[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ch * self.kh + i) * self.kw + j) * ohw;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row + oy * self.ow + ox] = match self.source(oy, ox, i, j) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let ohw = self.col_cols();
        for ch in 0..self.c {
            let base = ch * self.h * self.w;
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ch * self.kh + i) * self.kw + j) * ohw;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(oy, ox, i, j) {
                                image[base + y * self.w + x] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    GradScale(Var, f64),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Mse {
        pred: Var,
        target: Var,
        weights: Option<Vec<f64>>,
        denom: f64,
    },
    BalancedCe {
        logits: Var,
        labels: Vec<u8>,
        class_weights: [f64; 2],
        probs: Vec<f64>,
    },
    Kl {
        mu: Var,
        logvar: Var,
        batch: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::GradScale(..) => "grad_scale",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::Concat { .. } => "concat",
            Op::Linear { .. } => "linear",
            Op::Norm { .. } => "batch_norm",
            Op::Mse { .. } => "mse_loss",
            Op::BalancedCe { .. } => "balanced_cross_entropy",
            Op::Kl { .. } => "kl_diag_gaussian",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// A single-threaded differentiation tape. Build forward with the op
/// methods, call [`Graph::backward`] once on a scalar, then read leaf
/// gradients with [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var, NnError> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.is_trainable(), Op::Leaf)
            .expect("tensors are finite by construction")
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::Shape(format!(
                "constant of shape {shape:?} with {} values",
                data.len()
            )));
        }
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape values are finite")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NnError> {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, rg, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NnError> {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, NnError> {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NnError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NnError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NnError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `s`.
    pub fn grad_scale(&mut self, a: Var, s: f64) -> Result<Var, NnError> {
        self.unary(a, |x| x, Op::GradScale(a, s))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(NnError::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, rg, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NnError> {
        let n = self.value(a).len() as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(vec![], vec![s], rg, Op::Mean(a))
    }

    fn nchw(&self, v: Var, what: &str) -> Result<[usize; 4], NnError> {
        match self.shape(v) {
            [n, c, h, w] => Ok([*n, *c, *h, *w]),
            s => Err(NnError::Shape(format!("{what} expects NCHW input, got {s:?}"))),
        }
    }

    /// Cross-correlation `input[N,C,H,W] ⋆ weight[K,C,kh,kw] + bias[K]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var, NnError> {
        let [n, c, h, w] = self.nchw(input, "conv2d")?;
        let [k, wc, kh, kw] = match self.shape(weight) {
            [a, b, c2, d] => [*a, *b, *c2, *d],
            s => return Err(NnError::Shape(format!("conv2d weight must be rank 4, got {s:?}"))),
        };
        if wc != c {
            return Err(NnError::Shape(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NnError::Shape(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(NnError::Shape(format!(
                    "conv2d bias must be [{k}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        if opts.stride == 0 {
            return Err(NnError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let span_h = h + 2 * opts.padding;
        let span_w = w + 2 * opts.padding;
        // Output size is floor((H + 2p - kh) / stride) + 1; the trailing rows of a
        // strided window that do not fit are dropped.
        if span_h < kh || span_w < kw {
            return Err(NnError::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"
            )));
        }
        let oh = (span_h - kh) / opts.stride + 1;
        let ow = (span_w - kw) / opts.stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            oh,
            ow,
            opts,
        };
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let (rows, ohw) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ohw];
        let mut out = vec![0.0; n * k * ohw];
        {
            let x = self.value(input);
            let wv = self.value(weight);
            for b in 0..n {
                let col = &mut cols[b * rows * ohw..(b + 1) * rows * ohw];
                geom.im2col(&x[b * c * h * w..(b + 1) * c * h * w], col);
                gemm(
                    k,
                    rows,
                    ohw,
                    wv,
                    false,
                    col,
                    false,
                    &mut out[b * k * ohw..(b + 1) * k * ohw],
                    0.0,
                );
            }
            if let Some(bv) = bias {
                let bv = self.value(bv);
                for b in 0..n {
                    for (ki, bias_k) in bv.iter().enumerate() {
                        let o = &mut out[(b * k + ki) * ohw..(b * k + ki + 1) * ohw];
                        o.iter_mut().for_each(|v| *v += bias_k);
                    }
                }
            }
        }
        if !rg {
            cols = Vec::new();
        }
        self.push(
            vec![n, k, oh, ow],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var, NnError> {
        let [n, c, h, w] = self.nchw(input, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        self.push(vec![n, c, oh, ow], out, rg, Op::MaxPool2 { input, argmax })
    }

    /// Nearest-neighbor ×2 upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var, NnError> {
        let [n, c, h, w] = self.nchw(input, "upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.value(input);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    out[p * oh * ow + y * ow + xo] = x[p * h * w + (y / 2) * w + xo / 2];
                }
            }
        }
        let rg = self.rg(input);
        self.push(vec![n, c, oh, ow], out, rg, Op::Upsample2 { input })
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let [n, ca, h, w] = self.nchw(a, "concat")?;
        let [nb, cb, hb, wb] = self.nchw(b, "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::Shape(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a)[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&self.value(b)[i * pb..(i + 1) * pb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![n, ca + cb, h, w], out, rg, Op::Concat { a, b })
    }

    /// `input[N, in] · weight[out, in]ᵀ + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, NnError> {
        let (n, fin) = match self.shape(input) {
            [n, f] => (*n, *f),
            s => return Err(NnError::Shape(format!("linear expects [N, in], got {s:?}"))),
        };
        let fout = match self.shape(weight) {
            [o, i] if *i == fin => *o,
            s => {
                return Err(NnError::Shape(format!(
                    "linear weight {s:?} incompatible with input width {fin}"
                )))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(NnError::Shape(format!("linear bias must be [{fout}]")));
            }
        }
        let mut out = vec![0.0; n * fout];
        gemm(
            n,
            fin,
            fout,
            self.value(input),
            false,
            self.value(weight),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(vec![n, fout], out, rg, Op::Linear { input, weight, bias })
    }

    /// Per-channel normalization over `(N, H, W)` followed by `gamma·x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, BatchStats), NnError> {
        let [n, c, h, w] = self.nchw(input, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NnError::Shape(format!("batch_norm affine params must be [{c}]")));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let x = self.value(input);
        let (mean, var) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|t| (t - mu) * (t - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m;
                }
                (mean, var)
            }
            NormMode::Frozen(rm, rv) => {
                if rm.len() != c || rv.len() != c {
                    return Err(NnError::Shape(format!("running stats must have {c} channels")));
                }
                (rm.to_vec(), rv.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            vec![n, c, h, w],
            out,
            rg,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: matches!(mode, NormMode::Batch),
            },
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(
            vec![],
            vec![s / n],
            rg,
            Op::Mse {
                pred,
                target,
                weights: None,
                denom: n,
            },
        )
    }

    /// `Σ wᵢ (pᵢ - tᵢ)² / Σ wᵢ` with fixed nonnegative weights.
    pub fn weighted_mse_loss(&mut self, pred: Var, target: Var, weights: Vec<f64>) -> Result<Var, NnError> {
        self.same_shape(pred, target, "weighted_mse_loss")?;
        if weights.len() != self.value(pred).len() || weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(NnError::InvalidArgument(
                "weights must be nonnegative and match pred".into(),
            ));
        }
        let denom: f64 = weights.iter().sum();
        if denom <= 0.0 {
            return Err(NnError::InvalidArgument("weights sum to zero".into()));
        }
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(
            vec![],
            vec![s / denom],
            rg,
            Op::Mse {
                pred,
                target,
                weights: Some(weights),
                denom,
            },
        )
    }

    /// Mean over pixels of `-w_label · log softmax(logits)[label]`.
    /// `logits` is `[N, 2, H, W]`, `labels` is `N·H·W` values in {0, 1}.
    pub fn balanced_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[f64],
        w_fg: f64,
        w_bg: f64,
    ) -> Result<Var, NnError> {
        let [n, c, h, w] = self.nchw(logits, "balanced_cross_entropy")?;
        if c != 2 {
            return Err(NnError::Shape(format!(
                "balanced_cross_entropy needs 2 classes, got {c}"
            )));
        }
        if labels.len() != n * h * w {
            return Err(NnError::Shape(format!(
                "labels have {} entries, expected {}",
                labels.len(),
                n * h * w
            )));
        }
        if !(w_fg > 0.0 && w_bg > 0.0 && w_fg.is_finite() && w_bg.is_finite()) {
            return Err(NnError::InvalidArgument("class weights must be positive".into()));
        }
        let labels: Vec<u8> = labels
            .iter()
            .map(|l| match *l {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                v => Err(NnError::InvalidLabel(v)),
            })
            .collect::<Result<_, _>>()?;
        let hw = h * w;
        let x = self.value(logits);
        let weights = [w_bg, w_fg];
        let mut probs = vec![0.0; n * hw];
        let mut total = 0.0;
        for b in 0..n {
            for i in 0..hw {
                let l0 = x[(b * 2) * hw + i];
                let l1 = x[(b * 2 + 1) * hw + i];
                let mx = l0.max(l1);
                let lse = mx + ((l0 - mx).exp() + (l1 - mx).exp()).ln();
                let p1 = (l1 - lse).exp();
                probs[b * hw + i] = p1;
                let y = labels[b * hw + i];
                let logp = if y == 1 { l1 - lse } else { l0 - lse };
                total -= weights[y as usize] * logp;
            }
        }
        let rg = self.rg(logits);
        self.push(
            vec![],
            vec![total / (n * hw) as f64],
            rg,
            Op::BalancedCe {
                logits,
                labels,
                class_weights: weights,
                probs,
            },
        )
    }

    /// Closed-form `KL(N(mu, exp(logvar)) ‖ N(0, 1))` summed over latent
    /// dims and averaged over the leading batch dimension.
    pub fn kl_diag_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var, NnError> {
        self.same_shape(mu, logvar, "kl_diag_gaussian")?;
        let batch = match self.shape(mu) {
            [] => 1,
            s => s[0].max(1),
        };
        let s: f64 = self
            .value(mu)
            .iter()
            .zip(self.value(logvar))
            .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum();
        let rg = self.rg(mu) || self.rg(logvar);
        self.push(vec![], vec![s / batch as f64], rg, Op::Kl { mu, logvar, batch })
    }

    /// Reverse pass from a scalar. Leaf gradients are then available via
    /// [`Graph::grad`]; a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, node, &g);
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient accumulator for `v`, if `v` needs one.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(nodes, grads, v) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((x, y), o) in s.iter_mut().zip(g).zip(val(*b)) {
                    *x += y * o;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((x, y), o) in s.iter_mut().zip(g).zip(val(*a)) {
                    *x += y * o;
                }
            }
        }
        Op::Scale(a, k) | Op::GradScale(a, k) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Exp(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((x, y), o) in s.iter_mut().zip(g).zip(&node.value) {
                    *x += y * o;
                }
            }
        }
        Op::Relu(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((x, y), o) in s.iter_mut().zip(g).zip(&node.value) {
                    if *o > 0.0 {
                        *x += y;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((x, y), o) in s.iter_mut().zip(g).zip(&node.value) {
                    *x += y * o * (1.0 - o);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len() as f64;
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let (rows, ohw, k, n) = (geom.col_rows(), geom.col_cols(), geom.k, geom.n);
            if let Some(b) = bias {
                if let Some(s) = slot(nodes, grads, *b) {
                    for bi in 0..n {
                        for (ki, sk) in s.iter_mut().enumerate() {
                            *sk += g[(bi * k + ki) * ohw..(bi * k + ki + 1) * ohw].iter().sum::<f64>();
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *weight) {
                for bi in 0..n {
                    let go = &g[bi * k * ohw..(bi + 1) * k * ohw];
                    let col = &cols[bi * rows * ohw..(bi + 1) * rows * ohw];
                    gemm(k, ohw, rows, go, false, col, true, s, 1.0);
                }
            }
            if nodes[input.0].requires_grad {
                let wv = val(*weight).to_vec();
                let chw = geom.c * geom.h * geom.w;
                let mut dcols = vec![0.0; rows * ohw];
                let s = slot(nodes, grads, *input).expect("input requires grad");
                for bi in 0..n {
                    let go = &g[bi * k * ohw..(bi + 1) * k * ohw];
                    gemm(rows, k, ohw, &wv, true, go, false, &mut dcols, 0.0);
                    geom.col2im(&dcols, &mut s[bi * chw..(bi + 1) * chw]);
                }
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(s) = slot(nodes, grads, *input) {
                for (gi, src) in g.iter().zip(argmax) {
                    s[*src] += gi;
                }
            }
        }
        Op::Upsample2 { input } => {
            let [_, _, oh, ow] = [node.shape[0], node.shape[1], node.shape[2], node.shape[3]];
            let (h, w) = (oh / 2, ow / 2);
            if let Some(s) = slot(nodes, grads, *input) {
                let planes = node.shape[0] * node.shape[1];
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            s[p * h * w + (y / 2) * w + x / 2] += g[p * oh * ow + y * ow + x];
                        }
                    }
                }
            }
        }
        Op::Concat { a, b } => {
            let n = node.shape[0];
            let pa = nodes[a.0].value.len() / n;
            let pb = nodes[b.0].value.len() / n;
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..n {
                    let src = &g[i * (pa + pb)..i * (pa + pb) + pa];
                    s[i * pa..(i + 1) * pa].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for i in 0..n {
                    let src = &g[i * (pa + pb) + pa..(i + 1) * (pa + pb)];
                    s[i * pb..(i + 1) * pb].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let (n, fout) = (node.shape[0], node.shape[1]);
            let fin = nodes[input.0].shape[1];
            if let Some(b) = bias {
                if let Some(s) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(fout) {
                        s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *weight) {
                gemm(fout, n, fin, g, true, val(*input), false, s, 1.0);
            }
            if let Some(s) = slot(nodes, grads, *input) {
                gemm(n, fout, fin, g, false, val(*weight), false, s, 1.0);
            }
        }
        Op::Norm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
        } => {
            let [n, c, h, w] = [node.shape[0], node.shape[1], node.shape[2], node.shape[3]];
            let hw = h * w;
            let m = (n * hw) as f64;
            let gv = val(*gamma).to_vec();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *input) {
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            let dxhat = g[i] * gv[ch];
                            s[i] += if *batch {
                                // dxhat sums: Σ dxhat = γ Σ dy, Σ dxhat·x̂ = γ Σ dy·x̂
                                inv_std[ch] / m * (m * dxhat - gv[ch] * dbeta[ch] - xhat[i] * gv[ch] * dgamma[ch])
                            } else {
                                dxhat * inv_std[ch]
                            };
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *gamma) {
                s.iter_mut().zip(&dgamma).for_each(|(x, y)| *x += y);
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                s.iter_mut().zip(&dbeta).for_each(|(x, y)| *x += y);
            }
        }
        Op::Mse {
            pred,
            target,
            weights,
            denom,
        } => {
            let scale = 2.0 * g[0] / denom;
            let p = val(*pred);
            let t = val(*target);
            let wt = |i: usize| weights.as_ref().map_or(1.0, |w| w[i]);
            if let Some(s) = slot(nodes, grads, *pred) {
                for (i, x) in s.iter_mut().enumerate() {
                    *x += scale * wt(i) * (p[i] - t[i]);
                }
            }
            if let Some(s) = slot(nodes, grads, *target) {
                for (i, x) in s.iter_mut().enumerate() {
                    *x -= scale * wt(i) * (p[i] - t[i]);
                }
            }
        }
        Op::BalancedCe {
            logits,
            labels,
            class_weights,
            probs,
        } => {
            let [n, _, h, w] = [
                nodes[logits.0].shape[0],
                nodes[logits.0].shape[1],
                nodes[logits.0].shape[2],
                nodes[logits.0].shape[3],
            ];
            let hw = h * w;
            let scale = g[0] / (n * hw) as f64;
            if let Some(s) = slot(nodes, grads, *logits) {
                for b in 0..n {
                    for i in 0..hw {
                        let y = labels[b * hw + i];
                        let wy = class_weights[y as usize] * scale;
                        let p1 = probs[b * hw + i];
                        let p0 = 1.0 - p1;
                        s[(b * 2) * hw + i] += wy * (p0 - if y == 0 { 1.0 } else { 0.0 });
                        s[(b * 2 + 1) * hw + i] += wy * (p1 - if y == 1 { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Op::Kl { mu, logvar, batch } => {
            let scale = g[0] / *batch as f64;
            if let Some(s) = slot(nodes, grads, *mu) {
                for (x, m) in s.iter_mut().zip(val(*mu)) {
                    *x += scale * m;
                }
            }
            if let Some(s) = slot(nodes, grads, *logvar) {
                for (x, lv) in s.iter_mut().zip(val(*logvar)) {
                    *x += scale * 0.5 * (lv.exp() - 1.0);
                }
            }
        }
    }
}
