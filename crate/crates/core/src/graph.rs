//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape itself is a valid
//! topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use crate::entropy::laplace;
use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::{channel_sums, conv_backward_input, conv_backward_weight, conv_forward, masked_kernel};
use crate::tensor::{ConvLayer, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        mask: Option<Arc<[f32]>>,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Crop {
        x: Var,
    },
    CondScale {
        x: Var,
        scale: Var,
        bias: Var,
        rows: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale {
        x: Var,
        k: f32,
    },
    ScaleBatch {
        x: Var,
        k: Vec<f32>,
    },
    AddScalar {
        x: Var,
        k: f32,
    },
    Sum {
        x: Var,
    },
    SumPerBatch {
        x: Var,
    },
    MeanSpatial {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Pow {
        x: Var,
        p: f32,
    },
    LaplaceBits {
        x: Var,
        mu: Var,
        log_scale: Var,
    },
    Blur {
        x: Var,
        taps: Arc<[f32]>,
    },
    AvgPool2 {
        x: Var,
    },
}

/// Largest node that carries a double-precision shadow.
const EXACT_MAX: usize = 256;

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    /// Double-precision shadow of small reduced values (see [`EXACT_MAX`]).
    exact: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A convolution layer whose kernel and bias live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundConv {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub transpose: bool,
    pub mask: Option<Arc<[f32]>>,
}

impl ConvLayer {
    /// Places this layer's parameters on the tape.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConv {
        BoundConv {
            kernel: g.leaf(self.kernel.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            stride: self.stride,
            transpose: self.transpose,
            mask: self.mask.as_ref().map(|m| Arc::from(m.as_slice())),
        }
    }
}

impl BoundConv {
    pub fn params(&self) -> [Var; 2] {
        [self.kernel, self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Var; 2] {
        [&mut self.kernel, &mut self.bias]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn softplus(s: f32) -> f32 {
    if s > 20.0 {
        s
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f32) -> f32 {
    1.0 / (1.0 + (-s).exp())
}

/// Maps an element index of `shape` onto a `(1, C, 1, 1)` or same-shape operand.
#[inline]
fn bcast_index(i: usize, shape: Shape, operand: Shape) -> usize {
    if operand == shape {
        i
    } else {
        (i / (shape[2] * shape[3])) % shape[1]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Values of `v` in double precision: the shadow when there is one,
    /// otherwise the stored values if the node is small.
    fn exact_or_small(&self, v: Var) -> Option<Vec<f64>> {
        let n = &self.nodes[v.0];
        match &n.exact {
            Some(e) => Some(e.clone()),
            None if n.value.len() <= EXACT_MAX => Some(n.value.data().iter().map(|&x| x as f64).collect()),
            None => None,
        }
    }

    /// Double-precision shadow of a new node. Reductions start one; the
    /// elementwise ops that follow them in a loss carry it along, so scalar
    /// losses keep their precision for finite-difference checks.
    fn shadow(&self, op: &Op) -> Option<Vec<f64>> {
        let ex = |v: &Var| self.nodes[v.0].exact.clone();
        let sum64 = |v: &Var| -> Vec<f64> {
            match &self.nodes[v.0].exact {
                Some(e) => e.clone(),
                None => self.nodes[v.0].value.data().iter().map(|&x| x as f64).collect(),
            }
        };
        let binary = |a: &Var, b: &Var, f: fn(f64, f64) -> f64| -> Option<Vec<f64>> {
            if self.nodes[a.0].exact.is_none() && self.nodes[b.0].exact.is_none() {
                return None;
            }
            if self.shape(*a) != self.shape(*b) {
                return None;
            }
            let (x, y) = (self.exact_or_small(*a)?, self.exact_or_small(*b)?);
            Some(x.iter().zip(&y).map(|(&p, &q)| f(p, q)).collect())
        };
        match op {
            Op::Sum { x } => Some(vec![sum64(x).iter().sum()]),
            Op::SumPerBatch { x } => {
                let s = self.shape(*x);
                let per = (s[1] * s[2] * s[3]).max(1);
                (s[0] <= EXACT_MAX).then(|| sum64(x).chunks(per).map(|c| c.iter().sum()).collect())
            }
            Op::MeanSpatial { x } => {
                let s = self.shape(*x);
                let n = (s[2] * s[3]).max(1);
                (s[0] * s[1] <= EXACT_MAX).then(|| sum64(x).chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect())
            }
            Op::Scale { x, k } => ex(x).map(|e| e.iter().map(|v| v * *k as f64).collect()),
            Op::AddScalar { x, k } => ex(x).map(|e| e.iter().map(|v| v + *k as f64).collect()),
            Op::ScaleBatch { x, k } => ex(x).map(|e| {
                let per = (e.len() / k.len()).max(1);
                e.iter().enumerate().map(|(i, v)| v * k[i / per] as f64).collect()
            }),
            Op::Clamp { x, lo, hi } => ex(x).map(|e| e.iter().map(|v| v.clamp(*lo as f64, *hi as f64)).collect()),
            Op::Pow { x, p } => ex(x).map(|e| e.iter().map(|v| v.powf(*p as f64)).collect()),
            Op::Add(a, b) => binary(a, b, |p, q| p + q),
            Op::Sub(a, b) => binary(a, b, |p, q| p - q),
            Op::Mul(a, b) => binary(a, b, |p, q| p * q),
            Op::Div(a, b) => binary(a, b, |p, q| p / q),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let exact = self.shadow(&op);
        self.nodes.push(Node {
            value,
            exact,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    /// Scalar value with double-precision accumulation where available.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        match &self.nodes[v.0].exact {
            Some(e) => e[0],
            None => self.nodes[v.0].value.data()[0] as f64,
        }
    }

    /// The node's value with its gradient attached (after [`Graph::backward`]).
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
        t
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn unary(&mut self, x: Var, data: Vec<f32>, op: Op) -> Var {
        let shape = self.shape(x);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("unary op preserves shape"), op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (i, dim) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
            if sa[i] != sb[i] {
                return Err(shape_err(op, dim, sa[i], sb[i]));
            }
        }
        Ok(())
    }

    pub fn conv(&mut self, x: Var, layer: &BoundConv) -> Result<Var> {
        if layer.transpose {
            self.conv_transpose(x, layer.kernel, Some(layer.bias), layer.stride)
        } else {
            self.conv2d(x, layer.kernel, Some(layer.bias), layer.stride, layer.mask.clone())
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, mask: Option<Arc<[f32]>>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs[1] != ws[1] {
            return Err(shape_err("conv2d", "input channels", ws[1], xs[1]));
        }
        let kernel = match &mask {
            Some(m) => masked_kernel(self.value(w).data(), ws, m),
            None => self.value(w).data().to_vec(),
        };
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (data, shape) = conv_forward(self.value(x).data(), xs, &kernel, ws, bias.as_deref(), stride);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, data)?, Op::Conv { x, w, b, stride, mask }, rg))
    }

    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs[1] != ws[0] {
            return Err(shape_err("transpose_conv2d", "input channels", ws[0], xs[1]));
        }
        let out_shape = [xs[0], ws[1], xs[2] * stride, xs[3] * stride];
        let mut data = conv_backward_input(self.value(x).data(), out_shape, self.value(w).data(), ws, stride);
        if let Some(b) = b {
            let n = out_shape[2] * out_shape[3];
            let bias = self.value(b).data();
            for (i, chunk) in data.chunks_mut(n).enumerate() {
                let c = i % out_shape[1];
                chunk.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(out_shape, data)?, Op::ConvT { x, w, b, stride }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let data = self.value(x).data().iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect();
        self.unary(x, data, Op::LeakyRelu { x, slope })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = crate::tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { x, start }, rg))
    }

    /// Keeps the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [b, c, xh, xw] = self.shape(x);
        if h > xh {
            return Err(shape_err("crop", "height", xh, h));
        }
        if w > xw {
            return Err(shape_err("crop", "width", xw, w));
        }
        if h == xh && w == xw {
            return Ok(x);
        }
        let src = self.value(x);
        let t = Tensor::from_fn([b, c, h, w], |[bi, ci, y, xx]| src.at(bi, ci, y, xx));
        let rg = self.rg(x);
        Ok(self.push(t, Op::Crop { x }, rg))
    }

    /// Per-channel `softplus(scale) · x + bias`, with the `(scale, bias)` row
    /// chosen per batch item. `scale`/`bias` have shape `(1, 1, rows, C)`.
    pub fn cond_scale(&mut self, x: Var, scale: Var, bias: Var, rows: &[usize]) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        let ss = self.shape(scale);
        if ss[3] != c {
            return Err(shape_err("conditional_scale", "channels", ss[3], c));
        }
        if rows.len() != b {
            return Err(shape_err("conditional_scale", "rate indices", b, rows.len()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= ss[2]) {
            return Err(Error::Config(format!("rate index {r} out of range ({} entries)", ss[2])));
        }
        let n = h * w;
        let (xv, sv, bv) = (self.value(x).data(), self.value(scale).data(), self.value(bias).data());
        let mut data = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let k = softplus(sv[rows[bi] * c + ci]);
                let off = bv[rows[bi] * c + ci];
                let base = (bi * c + ci) * n;
                for i in base..base + n {
                    data[i] = k * xv[i] + off;
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(bias);
        Ok(self.push(
            Tensor::new([b, c, h, w], data)?,
            Op::CondScale {
                x,
                scale,
                bias,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(self.shape(a), data)?, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * k).collect();
        self.unary(x, data, Op::Scale { x, k })
    }

    /// Multiplies batch item `b` by `k[b]`.
    pub fn scale_batch(&mut self, x: Var, k: &[f32]) -> Result<Var> {
        let s = self.shape(x);
        if k.len() != s[0] {
            return Err(shape_err("scale_batch", "batch", s[0], k.len()));
        }
        let per = s[1] * s[2] * s[3];
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * k[i / per]).collect();
        Ok(self.unary(x, data, Op::ScaleBatch { x, k: k.to_vec() }))
    }

    pub fn add_scalar(&mut self, x: Var, k: f32) -> Var {
        let data = self.value(x).data().iter().map(|&v| v + k).collect();
        self.unary(x, data, Op::AddScalar { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Tensor::full([1, 1, 1, 1], total as f32), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    pub fn sum_per_batch(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let per = s[1] * s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(per.max(1))
            .take(s[0])
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        let rg = self.rg(x);
        self.push(
            Tensor::new([s[0], 1, 1, 1], data).expect("per-batch sums"),
            Op::SumPerBatch { x },
            rg,
        )
    }

    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let [b, c, h, w] = self.shape(x);
        let n = (h * w).max(1);
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .take(b * c)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new([b, c, 1, 1], data).expect("spatial means"), Op::MeanSpatial { x }, rg)
    }

    /// Clamps to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.clamp(lo, hi)).collect();
        self.unary(x, data, Op::Clamp { x, lo, hi })
    }

    /// `x^p` for positive `x`.
    pub fn pow(&mut self, x: Var, p: f32) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.powf(p)).collect();
        self.unary(x, data, Op::Pow { x, p })
    }

    /// Per-element code length in bits of integer bins `[x - ½, x + ½]` under
    /// a Laplacian with location `mu` and scale `exp(log_scale)`. `mu` and
    /// `log_scale` are either shaped like `x` or `(1, C, 1, 1)`.
    pub fn laplace_bits(&mut self, x: Var, mu: Var, log_scale: Var) -> Result<Var> {
        let s = self.shape(x);
        for (name, v) in [("mu", mu), ("log_scale", log_scale)] {
            let vs = self.shape(v);
            if vs != s && !(vs[0] == 1 && vs[1] == s[1] && vs[2] == 1 && vs[3] == 1) {
                return Err(shape_err("laplace_bits", name, s[1], vs[1]));
            }
        }
        let (ms, ls) = (self.shape(mu), self.shape(log_scale));
        let (xv, mv, lv) = (self.value(x).data(), self.value(mu).data(), self.value(log_scale).data());
        let data = (0..xv.len())
            .map(|i| laplace::interval_bits(xv[i] as f64, mv[bcast_index(i, s, ms)] as f64, lv[bcast_index(i, s, ls)] as f64) as f32)
            .collect();
        let rg = self.rg(x) || self.rg(mu) || self.rg(log_scale);
        Ok(self.push(Tensor::new(s, data)?, Op::LaplaceBits { x, mu, log_scale }, rg))
    }

    /// Depthwise separable blur with `valid` borders.
    pub fn blur(&mut self, x: Var, taps: Arc<[f32]>) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        let k = taps.len();
        if h < k || w < k {
            return Err(shape_err("blur", "spatial extent", k, h.min(w)));
        }
        let out = blur_forward(self.value(x).data(), [b, c, h, w], &taps);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([b, c, h - k + 1, w - k + 1], out)?, Op::Blur { x, taps }, rg))
    }

    /// 2×2 average pooling (odd trailing rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [b, c, h, w] = self.shape(x);
        let (ho, wo) = (h / 2, w / 2);
        let v = self.value(x);
        let t = Tensor::from_fn([b, c, ho, wo], |[bi, ci, y, xx]| {
            0.25 * (v.at(bi, ci, 2 * y, 2 * xx)
                + v.at(bi, ci, 2 * y, 2 * xx + 1)
                + v.at(bi, ci, 2 * y + 1, 2 * xx)
                + v.at(bi, ci, 2 * y + 1, 2 * xx + 1))
        });
        let rg = self.rg(x);
        self.push(t, Op::AvgPool2 { x }, rg)
    }

    /// Populates gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, mask } => {
                let (xs, ws) = (shp(*x), shp(*w));
                if rg(*x) {
                    let kernel = match mask {
                        Some(m) => masked_kernel(val(*w), ws, m),
                        None => val(*w).to_vec(),
                    };
                    out.push((*x, conv_backward_input(g, xs, &kernel, ws, *stride)));
                }
                if rg(*w) {
                    let mut dw = conv_backward_weight(val(*x), xs, g, ws, *stride);
                    if let Some(m) = mask {
                        dw = masked_kernel(&dw, ws, m);
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        out.push((*b, channel_sums(g, out_shape)));
                    }
                }
            }
            Op::ConvT { x, w, b, stride } => {
                let ws = shp(*w);
                if rg(*x) {
                    out.push((*x, conv_forward(g, out_shape, val(*w), ws, None, *stride).0));
                }
                if rg(*w) {
                    out.push((*w, conv_backward_weight(g, out_shape, val(*x), ws, *stride)));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        out.push((*b, channel_sums(g, out_shape)));
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                    .collect();
                out.push((*x, d));
            }
            Op::Concat { a, b } => {
                let [bn, _, h, w] = out_shape;
                let n = h * w;
                let (ca, cb) = (shp(*a)[1], shp(*b)[1]);
                let mut ga = Vec::with_capacity(bn * ca * n);
                let mut gb = Vec::with_capacity(bn * cb * n);
                for bi in 0..bn {
                    let base = bi * (ca + cb) * n;
                    ga.extend_from_slice(&g[base..base + ca * n]);
                    gb.extend_from_slice(&g[base + ca * n..base + (ca + cb) * n]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Slice { x, start } => {
                let xs = shp(*x);
                let n = xs[2] * xs[3];
                let len = out_shape[1];
                let mut d = vec![0.0; xs.iter().product()];
                for bi in 0..xs[0] {
                    let dst = (bi * xs[1] + start) * n;
                    d[dst..dst + len * n].copy_from_slice(&g[bi * len * n..(bi + 1) * len * n]);
                }
                out.push((*x, d));
            }
            Op::Crop { x } => {
                let xs = shp(*x);
                let [b, c, h, w] = out_shape;
                let mut d = vec![0.0; xs.iter().product()];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            let src = ((bi * c + ci) * h + y) * w;
                            let dst = ((bi * c + ci) * xs[2] + y) * xs[3];
                            d[dst..dst + w].copy_from_slice(&g[src..src + w]);
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::CondScale { x, scale, bias, rows } => {
                let [b, c, h, w] = out_shape;
                let n = h * w;
                let (xv, sv) = (val(*x), val(*scale));
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0f32; sv.len()];
                let mut db = vec![0.0f32; sv.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let p = rows[bi] * c + ci;
                        let k = softplus(sv[p]);
                        let base = (bi * c + ci) * n;
                        let (mut gs, mut gb) = (0.0f64, 0.0f64);
                        for j in base..base + n {
                            dx[j] = g[j] * k;
                            gs += (g[j] * xv[j]) as f64;
                            gb += g[j] as f64;
                        }
                        ds[p] += (gs * sigmoid(sv[p]) as f64) as f32;
                        db[p] += gb as f32;
                    }
                }
                out.push((*x, dx));
                out.push((*scale, ds));
                out.push((*bias, db));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.iter().zip(val(*b)).map(|(gv, bv)| gv * bv).collect()));
                out.push((*b, g.iter().zip(val(*a)).map(|(gv, av)| gv * av).collect()));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                out.push((*a, g.iter().zip(bv).map(|(gv, d)| gv / d).collect()));
                out.push((*b, (0..g.len()).map(|j| -g[j] * av[j] / (bv[j] * bv[j])).collect()));
            }
            Op::Scale { x, k } => out.push((*x, g.iter().map(|v| v * k).collect())),
            Op::ScaleBatch { x, k } => {
                let per = out_shape[1] * out_shape[2] * out_shape[3];
                out.push((*x, g.iter().enumerate().map(|(j, v)| v * k[j / per]).collect()));
            }
            Op::AddScalar { x, .. } => out.push((*x, g.to_vec())),
            Op::Sum { x } => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::SumPerBatch { x } => {
                let xs = shp(*x);
                let per = xs[1] * xs[2] * xs[3];
                out.push((*x, (0..val(*x).len()).map(|j| g[j / per]).collect()));
            }
            Op::MeanSpatial { x } => {
                let xs = shp(*x);
                let n = xs[2] * xs[3];
                out.push((*x, (0..val(*x).len()).map(|j| g[j / n] / n as f32).collect()));
            }
            Op::Clamp { x, lo, hi } => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Pow { x, p } => {
                let d = val(*x).iter().zip(g).map(|(&v, &gv)| gv * p * v.powf(p - 1.0)).collect();
                out.push((*x, d));
            }
            Op::LaplaceBits { x, mu, log_scale } => {
                let (ms, ls) = (shp(*mu), shp(*log_scale));
                let (xv, mv, lv) = (val(*x), val(*mu), val(*log_scale));
                let mut dx = vec![0.0f32; xv.len()];
                let mut dm = vec![0.0f64; mv.len()];
                let mut dl = vec![0.0f64; lv.len()];
                for j in 0..xv.len() {
                    let (mi, li) = (bcast_index(j, out_shape, ms), bcast_index(j, out_shape, ls));
                    let d = laplace::interval_bits_grad(xv[j] as f64, mv[mi] as f64, lv[li] as f64);
                    let gj = g[j] as f64;
                    dx[j] = (gj * d.dx) as f32;
                    dm[mi] += gj * d.dmu;
                    dl[li] += gj * d.dlog_scale;
                }
                out.push((*x, dx));
                out.push((*mu, dm.into_iter().map(|v| v as f32).collect()));
                out.push((*log_scale, dl.into_iter().map(|v| v as f32).collect()));
            }
            Op::Blur { x, taps } => {
                out.push((*x, blur_backward(g, shp(*x), taps)));
            }
            Op::AvgPool2 { x } => {
                let xs = shp(*x);
                let [b, c, ho, wo] = out_shape;
                let mut d = vec![0.0; xs.iter().product()];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = 0.25 * g[((bi * c + ci) * ho + y) * wo + xx];
                                for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    d[((bi * c + ci) * xs[2] + 2 * y + dy) * xs[3] + 2 * xx + dxx] += gv;
                                }
                            }
                        }
                    }
                }
                out.push((*x, d));
            }
        }
        out
    }
}

fn blur_forward(x: &[f32], s: Shape, taps: &[f32]) -> Vec<f32> {
    let [b, c, h, w] = s;
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; b * c * ho * wo];
    let mut tmp = vec![0.0f32; h * wo];
    for p in 0..b * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..wo {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    acc += tv * src[y * w + xx + t];
                }
                tmp[y * wo + xx] = acc;
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    acc += tv * tmp[(y + t) * wo + xx];
                }
                dst[y * wo + xx] = acc;
            }
        }
    }
    out
}

fn blur_backward(g: &[f32], s: Shape, taps: &[f32]) -> Vec<f32> {
    let [b, c, h, w] = s;
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut dx = vec![0.0; b * c * h * w];
    let mut tmp = vec![0.0f32; h * wo];
    for p in 0..b * c {
        tmp.fill(0.0);
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let gv = gp[y * wo + xx];
                for (t, &tv) in taps.iter().enumerate() {
                    tmp[(y + t) * wo + xx] += tv * gv;
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..wo {
                let gv = tmp[y * wo + xx];
                for (t, &tv) in taps.iter().enumerate() {
                    dst[y * w + xx + t] += tv * gv;
                }
            }
        }
    }
    dx
}
