//! Dense NCHW tensors, convolution layers and the integer latent plane.

pub mod kernels;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// `(batch, channel, height, width)`.
pub type Shape = [usize; 4];

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let n = shape.iter().product();
        if data.len() != n {
            return Err(shape_err("Tensor::new", "element count", n, data.len()));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([bi, ci, y, x]));
                    }
                }
            }
        }
        Self { shape, data, grad: None }
    }

    /// Gaussian initialisation, deterministic in `seed`.
    pub fn randn(shape: Shape, std: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| normal.sample(&mut rng)).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + y) * ws + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, y, x)]
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length must match data");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Reshapes without touching data.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", "element count", self.data.len(), n));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Copies batch item `b` into its own 1-batch tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[b * per..(b + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Stacks same-shaped 1-batch tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Config("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut b = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(shape_err("stack", "item shape", c * h * w, t.shape[1] * t.shape[2] * t.shape[3]));
            }
            b += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([b, c, h, w], data)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.shape;
        if start + len > c {
            return Err(shape_err("slice_channels", "channel range end", c, start + len));
        }
        let n = h * w;
        let mut data = Vec::with_capacity(b * len * n);
        for bi in 0..b {
            let base = (bi * c + start) * n;
            data.extend_from_slice(&self.data[base..base + len * n]);
        }
        Tensor::new([b, len, h, w], data)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Little-endian bytes of the data, used for determinism checks and digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Type-A causal mask (row-major `kh × kw`): ones strictly before the centre
/// in raster order, zeros at the centre and after it.
pub fn causal_mask(kh: usize, kw: usize) -> Vec<f32> {
    let (cy, cx) = (kh / 2, kw / 2);
    (0..kh * kw)
        .map(|i| {
            let (r, c) = (i / kw, i % kw);
            if r < cy || (r == cy && c < cx) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// A 2-D convolution layer.
///
/// Kernels are stored `(out_ch, in_ch, kh, kw)` for ordinary convolutions and
/// `(in_ch, out_ch, kh, kw)` for transposed ones, so a transposed layer is the
/// exact adjoint of an ordinary layer holding the same kernel tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    /// Shape `(1, out_ch, 1, 1)`.
    pub bias: Tensor,
    pub stride: usize,
    pub transpose: bool,
    pub mask: Option<Vec<f32>>,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, transpose: bool, mask: Option<Vec<f32>>) -> Result<Self> {
        let layer = Self {
            kernel,
            bias,
            stride,
            transpose,
            mask,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// He-style initialisation with zero bias.
    pub fn init(in_ch: usize, out_ch: usize, k: usize, stride: usize, transpose: bool, seed: u64) -> Self {
        let fan_in = (in_ch * k * k) as f32;
        let std = (2.0 / fan_in).sqrt() * 0.5;
        let shape = if transpose { [in_ch, out_ch, k, k] } else { [out_ch, in_ch, k, k] };
        Self {
            kernel: Tensor::randn(shape, std, seed),
            bias: Tensor::zeros([1, out_ch, 1, 1]),
            stride,
            transpose,
            mask: None,
        }
    }

    pub fn init_masked(in_ch: usize, out_ch: usize, k: usize, seed: u64) -> Self {
        let mut layer = Self::init(in_ch, out_ch, k, 1, false, seed);
        layer.mask = Some(causal_mask(k, k));
        layer
    }

    pub fn in_channels(&self) -> usize {
        let s = self.kernel.shape();
        if self.transpose {
            s[0]
        } else {
            s[1]
        }
    }

    pub fn out_channels(&self) -> usize {
        let s = self.kernel.shape();
        if self.transpose {
            s[1]
        } else {
            s[0]
        }
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = self.kernel.shape();
        (s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel_size();
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.stride == 1 && !self.transpose && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::Config(format!("stride-1 kernel must have odd extents, got {kh}x{kw}")));
        }
        if self.bias.len() != self.out_channels() {
            return Err(shape_err("ConvLayer", "bias length", self.out_channels(), self.bias.len()));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != kh * kw {
                return Err(Error::Config(format!("mask has {} entries, kernel is {kh}x{kw}", mask.len())));
            }
            if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::Config("mask must be binary".into()));
            }
        }
        Ok(())
    }

    /// The kernel with the mask applied (or the raw kernel when unmasked).
    pub fn effective_kernel(&self) -> std::borrow::Cow<'_, [f32]> {
        match &self.mask {
            Some(mask) => kernels::masked_kernel(self.kernel.data(), self.kernel.shape(), mask).into(),
            None => self.kernel.data().into(),
        }
    }
}

fn check_input(op: &'static str, input: &Tensor, layer: &ConvLayer) -> Result<()> {
    layer.validate()?;
    if input.channels() != layer.in_channels() {
        return Err(shape_err(op, "input channels", layer.in_channels(), input.channels()));
    }
    Ok(())
}

/// Strided cross-correlation with zero "same" padding plus bias.
pub fn conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    if layer.transpose {
        return Err(Error::Config("conv2d called with a transposed layer".into()));
    }
    check_input("conv2d", input, layer)?;
    let (data, shape) = kernels::conv_forward(
        input.data(),
        input.shape(),
        &layer.effective_kernel(),
        layer.kernel.shape(),
        Some(layer.bias.data()),
        layer.stride,
    );
    Tensor::new(shape, data)
}

/// Upsampling convolution; the adjoint of [`conv2d`] with the same kernel.
pub fn transpose_conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    if !layer.transpose {
        return Err(Error::Config("transpose_conv2d called with an ordinary layer".into()));
    }
    check_input("transpose_conv2d", input, layer)?;
    let [b, _, h, w] = input.shape();
    let s = layer.stride;
    let out_shape = [b, layer.out_channels(), h * s, w * s];
    let mut data = kernels::conv_backward_input(input.data(), out_shape, layer.kernel.data(), layer.kernel.shape(), s);
    let n = h * s * w * s;
    for bi in 0..b {
        for c in 0..out_shape[1] {
            let bias = layer.bias.data()[c];
            data[(bi * out_shape[1] + c) * n..(bi * out_shape[1] + c + 1) * n]
                .iter_mut()
                .for_each(|v| *v += bias);
        }
    }
    Tensor::new(out_shape, data)
}

/// Causal convolution: [`conv2d`] with the type-A mask applied to the kernel.
pub fn masked_conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    if layer.mask.is_none() {
        return Err(Error::Config("masked_conv2d requires a mask".into()));
    }
    if layer.stride != 1 {
        return Err(Error::Config("masked_conv2d requires stride 1".into()));
    }
    conv2d(input, layer)
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    let data = input.data().iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect();
    Tensor {
        shape: input.shape(),
        data,
        grad: None,
    }
}

/// Concatenates along channels; `a` fills the leading channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ab, ac, ah, aw] = a.shape();
    let [bb, bc, bh, bw] = b.shape();
    if bc == 0 {
        return Ok(a.clone());
    }
    if ac == 0 {
        return Ok(b.clone());
    }
    if ab != bb {
        return Err(shape_err("concat_channels", "batch", ab, bb));
    }
    if ah != bh {
        return Err(shape_err("concat_channels", "height", ah, bh));
    }
    if aw != bw {
        return Err(shape_err("concat_channels", "width", aw, bw));
    }
    let n = ah * aw;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for bi in 0..ab {
        data.extend_from_slice(&a.data()[bi * ac * n..(bi + 1) * ac * n]);
        data.extend_from_slice(&b.data()[bi * bc * n..(bi + 1) * bc * n]);
    }
    Tensor::new([ab, ac + bc, ah, aw], data)
}

/// Uniform noise on `[-0.5, 0.5)`; the training surrogate for rounding.
pub fn add_uniform_noise(input: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = input.data().iter().map(|&x| x + (rng.gen::<f32>() - 0.5)).collect();
    Tensor {
        shape: input.shape(),
        data,
        grad: None,
    }
}

/// Draws a noise tensor of the given shape on `[-0.5, 0.5)`.
pub fn uniform_noise(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape,
        data: (0..n).map(|_| rng.gen::<f32>() - 0.5).collect(),
        grad: None,
    }
}

/// Integer-valued quantized latent `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatentPlane {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<i32>,
}

impl LatentPlane {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err(
                "LatentPlane::new",
                "element count",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> i32 {
        self.data[self.index(c, y, x)]
    }

    /// As a 1-batch float tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: [1, self.channels, self.height, self.width],
            data: self.data.iter().map(|&v| v as f32).collect(),
            grad: None,
        }
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<LatentPlane> {
        if start + len > self.channels {
            return Err(shape_err(
                "LatentPlane::slice_channels",
                "channel range end",
                self.channels,
                start + len,
            ));
        }
        let n = self.height * self.width;
        LatentPlane::new(len, self.height, self.width, self.data[start * n..(start + len) * n].to_vec())
    }
}

/// Rounds half away from zero. Input must be a single-batch tensor of finite values.
pub fn quantize_round(input: &Tensor) -> Result<LatentPlane> {
    let [b, c, h, w] = input.shape();
    if b != 1 {
        return Err(shape_err("quantize_round", "batch", 1, b));
    }
    let mut data = Vec::with_capacity(input.len());
    for (index, &v) in input.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "quantize_round",
                index,
            });
        }
        data.push(v.round() as i32);
    }
    LatentPlane::new(c, h, w, data)
}

/// Elementwise rounding of a tensor of any batch size, kept in float.
pub fn round_tensor(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape(),
        data: input.data().iter().map(|v| v.round()).collect(),
        grad: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(kernel: Tensor, stride: usize, transpose: bool) -> ConvLayer {
        let co = if transpose { kernel.shape()[1] } else { kernel.shape()[0] };
        ConvLayer::new(kernel, Tensor::zeros([1, co, 1, 1]), stride, transpose, None).unwrap()
    }

    /// Scalar nested-loop cross-correlation, independent of the im2col path.
    fn reference_conv(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
        let [b, ci, h, w] = x.shape();
        let [co, _, kh, kw] = k.shape();
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        Tensor::from_fn([b, co, ho, wo], |[bi, o, oy, ox]| {
            let mut acc = 0.0f64;
            for c in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as i64 - ph as i64;
                        let ix = (ox * stride + kx) as i64 - pw as i64;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.at(bi, c, iy as usize, ix as usize) as f64 * k.at(o, c, ky, kx) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn ones_kernel_center_is_nine() {
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &layer(Tensor::full([1, 1, 3, 3], 1.0), 1, false)).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::randn([2, 1, 5, 6], 1.0, 3);
        let k = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| if y == 1 && x == 1 { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &layer(k.clone(), 1, false)).unwrap().data(), x.data());
        assert_eq!(transpose_conv2d(&x, &layer(k, 1, true)).unwrap().data(), x.data());
    }

    #[test]
    fn strided_matches_reference() {
        let x = Tensor::randn([1, 1, 4, 4], 1.0, 11);
        let k = Tensor::randn([1, 1, 3, 3], 1.0, 12);
        let out = conv2d(&x, &layer(k.clone(), 2, false)).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        let reference = reference_conv(&x, &k, 2);
        for (a, b) in out.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let x = Tensor::randn([2, 3, 7, 5], 1.0, 13);
        let k = Tensor::randn([4, 3, 5, 5], 0.3, 14);
        let out = conv2d(&x, &layer(k.clone(), 2, false)).unwrap();
        let reference = reference_conv(&x, &k, 2);
        assert_eq!(out.shape(), reference.shape());
        for (a, b) in out.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn transpose_spreads_nearest_neighbour() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = transpose_conv2d(&x, &layer(Tensor::full([1, 1, 2, 2], 1.0), 2, true)).unwrap();
        assert_eq!(out.shape(), [1, 1, 4, 4]);
        let expect = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn adjoint_identity() {
        for (seed, stride, k) in [(1u64, 1usize, 3usize), (2, 2, 5), (3, 2, 2), (4, 2, 3)] {
            let kernel = Tensor::randn([3, 2, k, k], 0.5, seed);
            let a = Tensor::randn([2, 2, 6, 6], 1.0, seed + 100);
            let b = Tensor::randn([2, 3, 6 / stride, 6 / stride], 1.0, seed + 200);
            let conv = ConvLayer::new(kernel.clone(), Tensor::zeros([1, 3, 1, 1]), stride, false, None).unwrap();
            let tconv = ConvLayer::new(kernel, Tensor::zeros([1, 2, 1, 1]), stride, true, None).unwrap();
            let lhs = conv2d(&a, &conv).unwrap().dot(&b);
            let rhs = a.dot(&transpose_conv2d(&b, &tconv).unwrap());
            assert!((lhs - rhs).abs() <= 1e-4 * a.norm() * b.norm(), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn transpose_zero_input_is_bias() {
        let mut l = layer(Tensor::randn([2, 3, 5, 5], 1.0, 5), 2, true);
        l.bias = Tensor::new([1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let out = transpose_conv2d(&Tensor::zeros([1, 2, 3, 3]), &l).unwrap();
        assert_eq!(out.shape(), [1, 3, 6, 6]);
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    assert_eq!(out.at(0, c, y, x), l.bias.data()[c]);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let err = conv2d(&Tensor::zeros([1, 2, 4, 4]), &layer(Tensor::zeros([1, 3, 3, 3]), 1, false)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn mask_layout() {
        let m = causal_mask(5, 5);
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 12);
        let brute = (0..5)
            .flat_map(|r| (0..5).map(move |c| (r, c)))
            .filter(|&(r, c)| r < 2 || (r == 2 && c < 2))
            .count();
        assert_eq!(brute, 12);
        assert_eq!(causal_mask(3, 3), vec![1., 1., 1., 1., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn masked_first_position_is_bias() {
        let mut l = ConvLayer::init_masked(1, 2, 3, 9);
        l.kernel = Tensor::full([2, 1, 3, 3], 1.0);
        l.bias = Tensor::new([1, 2, 1, 1], vec![0.25, -0.75]).unwrap();
        let x = Tensor::randn([1, 1, 4, 4], 3.0, 10);
        let out = masked_conv2d(&x, &l).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), 0.25);
        assert_eq!(out.at(0, 1, 0, 0), -0.75);
    }

    #[test]
    fn masked_causality_exhaustive() {
        let l = ConvLayer::init_masked(1, 3, 5, 21);
        let base = Tensor::randn([1, 1, 8, 8], 1.0, 22);
        let out0 = masked_conv2d(&base, &l).unwrap();
        for j in 0..64 {
            let mut x = base.clone();
            x.data_mut()[j] += 10.0;
            let out = masked_conv2d(&x, &l).unwrap();
            for c in 0..3 {
                for i in 0..=j {
                    assert_eq!(out.at(0, c, i / 8, i % 8), out0.at(0, c, i / 8, i % 8), "pos {i} perturbed {j}");
                }
            }
        }
    }

    #[test]
    fn masked_requires_valid_mask() {
        let mut l = ConvLayer::init(1, 1, 3, 1, false, 1);
        assert!(masked_conv2d(&Tensor::zeros([1, 1, 3, 3]), &l).is_err());
        l.mask = Some(vec![0.5; 9]);
        assert!(matches!(masked_conv2d(&Tensor::zeros([1, 1, 3, 3]), &l), Err(Error::Config(_))));
    }

    #[test]
    fn leaky_relu_cases() {
        let x = Tensor::new([1, 1, 1, 4], vec![-1.0, 0.0, 2.0, -3.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0, -0.6]);
        let xs: Vec<f32> = (-50..50).map(|i| i as f32 * 0.1).collect();
        let ys = leaky_relu(&Tensor::new([1, 1, 1, 100], xs).unwrap(), 0.2);
        assert!(ys.data().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::randn([2, 2, 3, 3], 1.0, 1);
        let b = Tensor::randn([2, 3, 3, 3], 1.0, 2);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.channels(), 5);
        assert_eq!(c.slice_channels(0, 2).unwrap().data(), a.data());
        assert_eq!(c.slice_channels(2, 3).unwrap().data(), b.data());
        assert_eq!(concat_channels(&a, &Tensor::zeros([2, 0, 3, 3])).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros([2, 1, 4, 3])).is_err());
    }

    #[test]
    fn rounding_rule() {
        let x = Tensor::new([1, 1, 1, 6], vec![0.49, 0.5, -0.5, 3.0, -2.5, 1.4999]).unwrap();
        let q = quantize_round(&x).unwrap();
        assert_eq!(q.data(), &[0, 1, -1, 3, -3, 1]);
        let bad = Tensor::new([1, 1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(quantize_round(&bad), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let x = Tensor::randn([1, 2, 8, 8], 1.0, 4);
        let a = add_uniform_noise(&x, 99);
        assert_eq!(a, add_uniform_noise(&x, 99));
        assert_ne!(a, add_uniform_noise(&x, 100));
        for (o, i) in a.data().iter().zip(x.data()) {
            assert!((o - i).abs() <= 0.5);
        }
    }

    #[test]
    fn noise_mean_is_centered() {
        let x = Tensor::zeros([1, 1, 1000, 1000]);
        let y = add_uniform_noise(&x, 7);
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.002, "{mean}");
        assert!(y.data().iter().all(|v| v.abs() < 0.5 || *v == -0.5));
    }

    proptest::proptest! {
        #[test]
        fn rounding_is_idempotent(v in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let n = v.len();
            let q = quantize_round(&Tensor::new([1, 1, 1, n], v).unwrap()).unwrap();
            proptest::prop_assert_eq!(quantize_round(&q.to_tensor()).unwrap(), q);
        }
    }
}
