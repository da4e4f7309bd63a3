//! The spatiotemporal entropy model for inter frames.
//!
//! An inter frame codes the integer residual `ŷ_t − ŷ_{t−1}` (or `ŷ_t` itself
//! with `use_residual` off) under per-symbol Laplacians whose parameters fuse
//! three feature maps with 1×1 convolutions:
//!
//! * the joint hyper prior (`phe`/`phd`) over `ŷ_t` and `ŷ_{t−1}`,
//! * the temporal prior (`tpm`) over `ŷ_{t−1}`,
//! * the spatial prior (`spm`), a type-A masked convolution over the coded plane.
//!
//! Coding runs position by position in raster order with every channel of a
//! position coded before the next position, so the decoder always has the
//! spatial context it needs. Encoder and decoder share that serial code path
//! and therefore compute bit-identical parameters.

use std::sync::Arc;

use crate::codec::{
    conv_stack, decode_hyper, encode_hyper, hyper_decoder_layers, hyper_dims, hyper_encoder_layers, quantize_var, scaled_width, Quantizer,
};
use crate::entropy::laplace::{clamp_log_scale, interval_bits};
use crate::entropy::{self, discretize_laplacian, DiscretePmf, PmfProvider, ScanOrder, DEFAULT_SUPPORT_MAX, DEFAULT_SUPPORT_MIN};
use crate::error::{shape_err, Error, Result};
use crate::graph::{BoundConv, Graph, Var};
use crate::tensor::{causal_mask, quantize_round, ConvLayer, LatentPlane, Tensor, DEFAULT_LEAKY_SLOPE};
use crate::video::{FrameChunk, FrameType};
use crate::weights::NamedTensors;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StemFlags {
    pub use_spm: bool,
    pub use_tpm: bool,
    pub use_residual: bool,
}

impl Default for StemFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl StemFlags {
    pub const FULL: Self = Self {
        use_spm: true,
        use_tpm: true,
        use_residual: true,
    };

    pub fn to_bits(self) -> u8 {
        self.use_spm as u8 | (self.use_tpm as u8) << 1 | (self.use_residual as u8) << 2
    }

    pub fn from_bits(b: u8) -> Option<Self> {
        (b & !0b111 == 0).then_some(Self {
            use_spm: b & 1 != 0,
            use_tpm: b & 2 != 0,
            use_residual: b & 4 != 0,
        })
    }

    /// The eight flag combinations, full model first.
    pub fn all() -> impl Iterator<Item = Self> {
        (0..8u8).rev().map(|b| Self::from_bits(b).expect("three bits"))
    }
}

impl std::fmt::Display for StemFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        write!(
            f,
            "spm={} tpm={} residual={}",
            on(self.use_spm),
            on(self.use_tpm),
            on(self.use_residual)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StemWeights {
    pub latent_channels: usize,
    pub leaky_slope: f32,
    /// 3×3 s1, 5×5 s2, 5×5 s2 over `concat(ŷ_t, ŷ_{t−1})`.
    pub phe: Vec<ConvLayer>,
    /// Two 5×5 s2 transposed convs, then a 3×3 conv.
    pub phd: Vec<ConvLayer>,
    /// Three 5×5 s1 convs.
    pub tpm: Vec<ConvLayer>,
    /// One masked 5×5 conv.
    pub spm: ConvLayer,
    /// Three 1×1 convs ending in `2C` channels (μ then log-scale).
    pub epm: Vec<ConvLayer>,
    pub z_mu: Tensor,
    pub z_log_scale: Tensor,
}

impl StemWeights {
    /// Widths follow the full-size (320-channel) table multiplied by `C / 320`.
    pub fn init(latent_channels: usize, seed: u64) -> Result<Self> {
        let c = latent_channels;
        if c == 0 {
            return Err(Error::Config("latent channels must be positive".into()));
        }
        let w = |p| scaled_width(p, c);
        let (cz, feat) = (w(256), w(640));
        let mut epm_last = ConvLayer::init(w(1280), 2 * c, 1, 1, false, seed + 42);
        // Start from a narrow prior so early training sees informative rates.
        epm_last.kernel.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        Ok(Self {
            latent_channels: c,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            phe: hyper_encoder_layers(2 * c, cz, seed),
            phd: hyper_decoder_layers(cz, feat, seed + 10),
            tpm: vec![
                ConvLayer::init(c, w(426), 5, 1, false, seed + 20),
                ConvLayer::init(w(426), w(533), 5, 1, false, seed + 21),
                ConvLayer::init(w(533), feat, 5, 1, false, seed + 22),
            ],
            spm: ConvLayer::init_masked(c, feat, 5, seed + 30),
            epm: vec![
                ConvLayer::init(3 * feat, w(1600), 1, 1, false, seed + 40),
                ConvLayer::init(w(1600), w(1280), 1, 1, false, seed + 41),
                epm_last,
            ],
            z_mu: Tensor::zeros([1, cz, 1, 1]),
            z_log_scale: Tensor::zeros([1, cz, 1, 1]),
        })
    }

    pub fn hyper_channels(&self) -> usize {
        self.z_mu.channels()
    }

    pub fn feature_channels(&self) -> usize {
        self.spm.out_channels()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .phe
            .iter_mut()
            .chain(&mut self.phd)
            .chain(&mut self.tpm)
            .chain(std::iter::once(&mut self.spm))
            .chain(&mut self.epm)
        {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.z_mu);
        out.push(&mut self.z_log_scale);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> StemVars {
        let all = |g: &mut Graph, ls: &[ConvLayer]| ls.iter().map(|l| l.bind(g, trainable)).collect::<Vec<_>>();
        StemVars {
            phe: all(g, &self.phe),
            phd: all(g, &self.phd),
            tpm: all(g, &self.tpm),
            spm: self.spm.bind(g, trainable),
            epm: all(g, &self.epm),
            z_mu: g.leaf(self.z_mu.clone(), trainable),
            z_log_scale: g.leaf(self.z_log_scale.clone(), trainable),
            slope: self.leaky_slope,
            c: self.latent_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.latent_channels;
        let chain = |op: &'static str, ls: &[ConvLayer], mut ch: usize| -> Result<usize> {
            for l in ls {
                if l.in_channels() != ch {
                    return Err(shape_err(op, "input channels", l.in_channels(), ch));
                }
                ch = l.out_channels();
            }
            Ok(ch)
        };
        let cz = chain("phe", &self.phe, 2 * c)?;
        for t in [&self.z_mu, &self.z_log_scale] {
            if t.shape() != [1, cz, 1, 1] {
                return Err(shape_err("z prior", "channels", cz, t.channels()));
            }
        }
        let feat = chain("phd", &self.phd, cz)?;
        if self.phe.len() != 3 || self.phd.len() != 3 || self.tpm.len() != 3 || self.epm.len() != 3 {
            return Err(Error::Config("phe, phd, tpm and epm each need three layers".into()));
        }
        let t = chain("tpm", &self.tpm, c)?;
        let s = chain("spm", std::slice::from_ref(&self.spm), c)?;
        if t != feat || s != feat {
            return Err(shape_err(
                "entropy parameters",
                "feature channels",
                feat,
                if t != feat { t } else { s },
            ));
        }
        if self.spm.mask.is_none() || self.spm.stride != 1 {
            return Err(Error::Config("spm must be a masked stride-1 convolution".into()));
        }
        let out = chain("epm", &self.epm, 3 * feat)?;
        if out != 2 * c {
            return Err(shape_err("epm", "output channels", 2 * c, out));
        }
        if self.epm.iter().any(|l| l.kernel_size() != (1, 1)) {
            return Err(Error::Config("epm layers must be 1×1".into()));
        }
        Ok(())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut n = NamedTensors::new();
        n.push(
            "stem.config",
            Tensor::new([1, 1, 1, 2], vec![self.latent_channels as f32, self.leaky_slope]).expect("2 values"),
        );
        for (prefix, ls) in [("phe", &self.phe), ("phd", &self.phd), ("tpm", &self.tpm), ("epm", &self.epm)] {
            for (i, l) in ls.iter().enumerate() {
                n.push_conv(&format!("{prefix}.{i}"), l);
            }
        }
        n.push_conv("spm", &self.spm);
        n.push("stem_z_prior.mu", self.z_mu.clone());
        n.push("stem_z_prior.log_scale", self.z_log_scale.clone());
        n
    }

    pub fn from_named(n: &NamedTensors) -> Result<Self> {
        let cfg = n.get("stem.config")?.data();
        if cfg.len() != 2 {
            return Err(Error::Format("stem.config must hold 2 values".into()));
        }
        let layers = |prefix: &str, spec: [(usize, bool); 3]| -> Result<Vec<ConvLayer>> {
            spec.iter()
                .enumerate()
                .map(|(i, &(s, t))| n.conv(&format!("{prefix}.{i}"), s, t, None))
                .collect()
        };
        let spm_kernel = n.get("spm.kernel")?;
        let mask = causal_mask(spm_kernel.height(), spm_kernel.width());
        let w = Self {
            latent_channels: cfg[0] as usize,
            leaky_slope: cfg[1],
            phe: layers("phe", [(1, false), (2, false), (2, false)])?,
            phd: layers("phd", [(2, true), (2, true), (1, false)])?,
            tpm: layers("tpm", [(1, false); 3])?,
            spm: n.conv("spm", 1, false, Some(mask))?,
            epm: layers("epm", [(1, false); 3])?,
            z_mu: n.get("stem_z_prior.mu")?.clone(),
            z_log_scale: n.get("stem_z_prior.log_scale")?.clone(),
        };
        w.validate()?;
        Ok(w)
    }
}

/// [`StemWeights`] placed on a graph.
#[derive(Clone, Debug)]
pub struct StemVars {
    pub phe: Vec<BoundConv>,
    pub phd: Vec<BoundConv>,
    pub tpm: Vec<BoundConv>,
    pub spm: BoundConv,
    pub epm: Vec<BoundConv>,
    pub z_mu: Var,
    pub z_log_scale: Var,
    pub slope: f32,
    c: usize,
}

impl StemVars {
    /// Same order as [`StemWeights::params_mut`].
    pub fn params(&self) -> Vec<Var> {
        self.clone().params_mut().into_iter().map(|v| *v).collect()
    }

    /// Slots of [`StemVars::params`], for substituting a variable.
    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        let mut out = Vec::new();
        for l in self
            .phe
            .iter_mut()
            .chain(&mut self.phd)
            .chain(&mut self.tpm)
            .chain(std::iter::once(&mut self.spm))
            .chain(&mut self.epm)
        {
            out.extend(l.params_mut());
        }
        out.push(&mut self.z_mu);
        out.push(&mut self.z_log_scale);
        out
    }
}

pub fn residual_latent(y_t: &LatentPlane, y_prev: &LatentPlane) -> Result<LatentPlane> {
    check_same("residual_latent", y_t, y_prev)?;
    let data = y_t.data().iter().zip(y_prev.data()).map(|(&a, &b)| a.wrapping_sub(b)).collect();
    LatentPlane::new(y_t.channels(), y_t.height(), y_t.width(), data)
}

pub fn reconstruct_latent(res: &LatentPlane, y_prev: &LatentPlane) -> Result<LatentPlane> {
    check_same("reconstruct_latent", res, y_prev)?;
    let data = res.data().iter().zip(y_prev.data()).map(|(&a, &b)| a.wrapping_add(b)).collect();
    LatentPlane::new(res.channels(), res.height(), res.width(), data)
}

fn check_same(op: &'static str, a: &LatentPlane, b: &LatentPlane) -> Result<()> {
    let (da, db) = (a.dims(), b.dims());
    for (dim, x, y) in [("channels", da.0, db.0), ("height", da.1, db.1), ("width", da.2, db.2)] {
        if x != y {
            return Err(shape_err(op, dim, x, y));
        }
    }
    Ok(())
}

/// Graph outputs of the entropy model for a batch of latent pairs.
#[derive(Clone, Copy, Debug)]
pub struct StemOutputs {
    /// Per-symbol bits of the coded plane, `(B, C, h, w)`.
    pub y_bits: Var,
    /// Per-symbol bits of the hyper latent.
    pub z_bits: Var,
    pub mu: Var,
    pub log_scale: Var,
}

/// Builds the full entropy model on a graph. `y_t` and `y_prev` hold integer
/// latents `(B, C, h, w)`; the spatial prior sees the true coded plane.
pub fn stem_graph(g: &mut Graph, y_t: Var, y_prev: Var, flags: StemFlags, v: &StemVars, q: &mut Quantizer<'_>) -> Result<StemOutputs> {
    let [b, c, h, w] = g.shape(y_t);
    if c != v.c {
        return Err(shape_err("stem", "latent channels", v.c, c));
    }
    let coded = if flags.use_residual { g.sub(y_t, y_prev)? } else { y_t };
    let pair = g.concat(y_t, y_prev)?;
    let z = conv_stack(g, pair, &v.phe, v.slope)?;
    let z = quantize_var(g, z, q)?;
    let hd = conv_stack(g, z, &v.phd, v.slope)?;
    let hd = g.crop(hd, h, w)?;
    let feat = g.shape(hd)[1];
    let zeros = || Tensor::zeros([b, feat, h, w]);
    let tpm = if flags.use_tpm {
        conv_stack(g, y_prev, &v.tpm, v.slope)?
    } else {
        g.constant(zeros())
    };
    let spm = if flags.use_spm {
        g.conv(coded, &v.spm)?
    } else {
        g.constant(zeros())
    };
    let fused = g.concat(hd, spm)?;
    let fused = g.concat(fused, tpm)?;
    let params = conv_stack(g, fused, &v.epm, v.slope)?;
    let mu = g.slice_channels(params, 0, c)?;
    let log_scale = g.slice_channels(params, c, c)?;
    let y_bits = g.laplace_bits(coded, mu, log_scale)?;
    let z_bits = g.laplace_bits(z, v.z_mu, v.z_log_scale)?;
    Ok(StemOutputs {
        y_bits,
        z_bits,
        mu,
        log_scale,
    })
}

fn plane_const(g: &mut Graph, p: &LatentPlane) -> Var {
    g.constant(p.to_tensor())
}

/// Quantized hyper latent of a latent pair and its code length under the
/// factorized prior.
pub fn hyper_encode(y_t: &LatentPlane, y_prev: &LatentPlane, w: &StemWeights) -> Result<(LatentPlane, f64)> {
    check_same("hyper_encode", y_t, y_prev)?;
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let (a, b) = (plane_const(&mut g, y_t), plane_const(&mut g, y_prev));
    let pair = g.concat(a, b)?;
    let z = conv_stack(&mut g, pair, &v.phe, v.slope)?;
    let z_hat = quantize_round(g.value(z))?;
    let bits = crate::codec::factorized_bits(&z_hat, &w.z_mu, &w.z_log_scale);
    Ok((z_hat, bits))
}

/// Hyper-decoder features cropped to `h × w`.
pub fn hyper_decode(z_hat: &LatentPlane, h: usize, wd: usize, w: &StemWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let z = plane_const(&mut g, z_hat);
    let f = conv_stack(&mut g, z, &v.phd, v.slope)?;
    let f = g.crop(f, h, wd)?;
    Ok(g.value(f).clone())
}

pub fn temporal_prior(y_prev: &LatentPlane, w: &StemWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let y = plane_const(&mut g, y_prev);
    let f = conv_stack(&mut g, y, &v.tpm, v.slope)?;
    Ok(g.value(f).clone())
}

/// Masked convolution over the whole coded plane.
pub fn spatial_prior(res_context: &LatentPlane, w: &StemWeights) -> Result<Tensor> {
    crate::tensor::masked_conv2d(&res_context.to_tensor(), &w.spm)
}

/// Fuses the three feature maps into `(μ, log-scale)`; the log-scale is
/// clamped to `[-6, 6]`. Disabled branches are replaced by zeros.
pub fn entropy_params(phd_out: &Tensor, spm_out: &Tensor, tpm_out: &Tensor, flags: StemFlags, w: &StemWeights) -> Result<(Tensor, Tensor)> {
    let s = phd_out.shape();
    for (name, t) in [("spm", spm_out), ("tpm", tpm_out)] {
        for (i, dim) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
            if t.shape()[i] != s[i] {
                return Err(Error::Shape {
                    op: if name == "spm" {
                        "entropy_params (spm)"
                    } else {
                        "entropy_params (tpm)"
                    },
                    dim,
                    expected: s[i],
                    got: t.shape()[i],
                });
            }
        }
    }
    let zero = Tensor::zeros(s);
    let spm = if flags.use_spm { spm_out } else { &zero };
    let tpm = if flags.use_tpm { tpm_out } else { &zero };
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let (a, b, c) = (g.constant(phd_out.clone()), g.constant(spm.clone()), g.constant(tpm.clone()));
    let f = g.concat(a, b)?;
    let f = g.concat(f, c)?;
    let p = conv_stack(&mut g, f, &v.epm, v.slope)?;
    let ch = w.latent_channels;
    let mu = g.value(p).slice_channels(0, ch)?;
    let mut ls = g.value(p).slice_channels(ch, ch)?;
    ls.data_mut().iter_mut().for_each(|v| *v = clamp_log_scale(*v as f64) as f32);
    Ok((mu, ls))
}

/// Rate of a latent pair under the model.
#[derive(Clone, Debug)]
pub struct PFrameRate {
    pub y_bits: f64,
    pub z_bits: f64,
    /// Per-symbol bits of the coded plane, `(1, C, h, w)`.
    pub per_symbol: Tensor,
}

/// Evaluation-mode rate: rounded hyper latent, and every symbol priced under
/// the quantized table the range coder uses for it, escapes included. The
/// continuous Laplacian length is unbounded in the tails while the table
/// floors each probability at 2^-16, so only the table price tracks the
/// stream length when the model is confidently wrong.
pub fn p_frame_rate(y_t: &LatentPlane, y_prev: &LatentPlane, flags: StemFlags, w: &StemWeights) -> Result<PFrameRate> {
    check_same("p_frame_rate", y_t, y_prev)?;
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let (a, b) = (plane_const(&mut g, y_t), plane_const(&mut g, y_prev));
    let out = stem_graph(&mut g, a, b, flags, &v, &mut Quantizer::Round)?;
    let coded = if flags.use_residual {
        residual_latent(y_t, y_prev)?
    } else {
        y_t.clone()
    };
    let mut grid = entropy::LaplaceGrid {
        mu: g.value(out.mu),
        log_scale: g.value(out.log_scale),
        order: ScanOrder::PositionMajor,
    };
    let (c, h, wd) = coded.dims();
    let mut per_symbol = Tensor::zeros([1, c, h, wd]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..wd {
                let bits = entropy::symbol_bits(&grid.pmf(ci, y, x)?, coded.at(ci, y, x));
                per_symbol.data_mut()[(ci * h + y) * wd + x] = bits as f32;
            }
        }
    }
    let (z_hat, _) = hyper_encode(y_t, y_prev, w)?;
    let z_bits = entropy::plane_cross_entropy(&z_hat, &mut entropy::ChannelPmfs::laplace(w.z_mu.data(), w.z_log_scale.data())?)?;
    Ok(PFrameRate {
        y_bits: per_symbol.data().iter().map(|&v| v as f64).sum(),
        z_bits,
        per_symbol,
    })
}

/// Per-position parameter evaluation shared by encoder and decoder.
///
/// Holds the context-free features (hyper decoder and temporal prior) and
/// the symbols coded so far, and computes the spatial prior and fusion for
/// one position at a time.
pub struct SerialParams<'a> {
    w: &'a StemWeights,
    flags: StemFlags,
    phd: Tensor,
    tpm: Option<Tensor>,
    /// Masked SPM kernel laid out `(out, tap, in)` over the causal taps.
    spm_taps: Vec<(isize, isize)>,
    spm_kernel: Vec<f32>,
    context: LatentPlane,
    current: (usize, usize),
    mu: Vec<f64>,
    log_scale: Vec<f64>,
    scratch: [Vec<f32>; 2],
}

impl<'a> SerialParams<'a> {
    pub fn new(w: &'a StemWeights, flags: StemFlags, phd: Tensor, tpm: Option<Tensor>, dims: (usize, usize, usize)) -> Self {
        let (kh, kw) = w.spm.kernel_size();
        let mask = w.spm.mask.clone().unwrap_or_else(|| causal_mask(kh, kw));
        let (ph, pw) = ((kh as isize - 1) / 2, (kw as isize - 1) / 2);
        let taps: Vec<(usize, isize, isize)> = (0..kh * kw)
            .filter(|&i| mask[i] != 0.0)
            .map(|i| (i, (i / kw) as isize - ph, (i % kw) as isize - pw))
            .collect();
        let (co, ci) = (w.spm.out_channels(), w.spm.in_channels());
        let mut spm_kernel = Vec::with_capacity(co * taps.len() * ci);
        let k = w.spm.kernel.data();
        for o in 0..co {
            for &(t, _, _) in &taps {
                for c in 0..ci {
                    spm_kernel.push(k[(o * ci + c) * kh * kw + t]);
                }
            }
        }
        let c = w.latent_channels;
        Self {
            w,
            flags,
            phd,
            tpm,
            spm_taps: taps.iter().map(|&(_, dy, dx)| (dy, dx)).collect(),
            spm_kernel,
            context: LatentPlane::zeros(dims.0, dims.1, dims.2),
            current: (usize::MAX, usize::MAX),
            mu: vec![0.0; c],
            log_scale: vec![0.0; c],
            scratch: [Vec::new(), Vec::new()],
        }
    }

    /// Computes `(μ, log-scale)` for every channel at `(y, x)` from symbols
    /// at raster-earlier positions.
    fn evaluate(&mut self, y: usize, x: usize) {
        let w = self.w;
        let feat = w.feature_channels();
        let mut fused = vec![0.0f32; 3 * feat];
        for (o, f) in fused[..feat].iter_mut().enumerate() {
            *f = self.phd.at(0, o, y, x);
        }
        if self.flags.use_spm {
            let (h, wd) = (self.context.height(), self.context.width());
            let ci = w.spm.in_channels();
            let ntaps = self.spm_taps.len();
            let mut ctx = vec![0.0f32; ntaps * ci];
            for (t, &(dy, dx)) in self.spm_taps.iter().enumerate() {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                    continue;
                }
                for c in 0..ci {
                    ctx[t * ci + c] = self.context.at(c, yy as usize, xx as usize) as f32;
                }
            }
            let bias = w.spm.bias.data();
            for o in 0..feat {
                let row = &self.spm_kernel[o * ntaps * ci..(o + 1) * ntaps * ci];
                let mut acc = bias[o];
                for (kv, cv) in row.iter().zip(&ctx) {
                    acc += kv * cv;
                }
                fused[feat + o] = acc;
            }
        }
        if let Some(tpm) = self.tpm.as_ref().filter(|_| self.flags.use_tpm) {
            for o in 0..feat {
                fused[2 * feat + o] = tpm.at(0, o, y, x);
            }
        }
        let [a, b] = &mut self.scratch;
        *a = fused;
        for (i, layer) in w.epm.iter().enumerate() {
            let (co, ci) = (layer.out_channels(), layer.in_channels());
            let k = layer.kernel.data();
            b.clear();
            for o in 0..co {
                let mut acc = layer.bias.data()[o];
                for (kv, xv) in k[o * ci..(o + 1) * ci].iter().zip(a.iter()) {
                    acc += kv * xv;
                }
                if i + 1 < w.epm.len() && acc < 0.0 {
                    acc *= w.leaky_slope;
                }
                b.push(acc);
            }
            std::mem::swap(a, b);
        }
        let c = w.latent_channels;
        for ch in 0..c {
            self.mu[ch] = a[ch] as f64;
            self.log_scale[ch] = clamp_log_scale(a[c + ch] as f64);
        }
        self.current = (y, x);
    }

    /// Parameters at `(c, y, x)`; positions must be visited in raster order.
    pub fn params(&mut self, c: usize, y: usize, x: usize) -> (f64, f64) {
        if self.current != (y, x) {
            self.evaluate(y, x);
        }
        (self.mu[c], self.log_scale[c])
    }

    pub fn observe(&mut self, c: usize, y: usize, x: usize, symbol: i32) {
        let i = self.context.index(c, y, x);
        self.context.data_mut()[i] = symbol;
    }
}

impl PmfProvider for SerialParams<'_> {
    fn order(&self) -> ScanOrder {
        ScanOrder::PositionMajor
    }

    fn pmf(&mut self, c: usize, y: usize, x: usize) -> Result<DiscretePmf> {
        let (mu, ls) = self.params(c, y, x);
        discretize_laplacian(mu, ls, DEFAULT_SUPPORT_MIN, DEFAULT_SUPPORT_MAX)
    }

    fn observe(&mut self, c: usize, y: usize, x: usize, symbol: i32) {
        SerialParams::observe(self, c, y, x, symbol)
    }
}

fn serial_provider<'a>(z_hat: &LatentPlane, y_prev: &LatentPlane, flags: StemFlags, w: &'a StemWeights) -> Result<SerialParams<'a>> {
    let (_, h, wd) = y_prev.dims();
    let phd = hyper_decode(z_hat, h, wd, w)?;
    let tpm = if flags.use_tpm { Some(temporal_prior(y_prev, w)?) } else { None };
    Ok(SerialParams::new(w, flags, phd, tpm, y_prev.dims()))
}

pub fn encode_pframe(y_t: &LatentPlane, y_prev: &LatentPlane, flags: StemFlags, w: &StemWeights) -> Result<FrameChunk> {
    check_same("encode_pframe", y_t, y_prev)?;
    if y_t.channels() != w.latent_channels {
        return Err(shape_err("encode_pframe", "latent channels", w.latent_channels, y_t.channels()));
    }
    let (z_hat, _) = hyper_encode(y_t, y_prev, w)?;
    let z_stream = encode_hyper(&z_hat, &w.z_mu, &w.z_log_scale)?;
    let coded = if flags.use_residual {
        residual_latent(y_t, y_prev)?
    } else {
        y_t.clone()
    };
    let mut provider = serial_provider(&z_hat, y_prev, flags, w)?;
    let y_stream = entropy::encode_plane(&coded, &mut provider)?.bytes;
    Ok(FrameChunk {
        frame_type: FrameType::Predicted,
        z_stream,
        y_stream,
    })
}

pub fn decode_pframe(chunk: &FrameChunk, y_prev: &LatentPlane, flags: StemFlags, w: &StemWeights) -> Result<LatentPlane> {
    if chunk.frame_type != FrameType::Predicted {
        return Err(Error::Corrupt("expected a predicted chunk".into()));
    }
    if y_prev.channels() != w.latent_channels {
        return Err(shape_err("decode_pframe", "latent channels", w.latent_channels, y_prev.channels()));
    }
    let (c, h, wd) = y_prev.dims();
    let (zh, zw) = hyper_dims(h, wd);
    let z_hat = decode_hyper(&chunk.z_stream, &w.z_mu, &w.z_log_scale, (w.hyper_channels(), zh, zw))?;
    let mut provider = serial_provider(&z_hat, y_prev, flags, w)?;
    let coded = entropy::decode_plane(&chunk.y_stream, &mut provider, (c, h, wd))?;
    if flags.use_residual {
        reconstruct_latent(&coded, y_prev)
    } else {
        Ok(coded)
    }
}

/// Shared masked kernel for callers that build their own graphs.
pub fn spm_mask(w: &StemWeights) -> Arc<[f32]> {
    let (kh, kw) = w.spm.kernel_size();
    w.spm.mask.clone().unwrap_or_else(|| causal_mask(kh, kw)).into()
}

/// Continuous bits of a plane under given parameters; used by tests and the
/// heat map.
pub fn plane_bits(plane: &LatentPlane, mu: &Tensor, log_scale: &Tensor) -> f64 {
    let mut bits = 0.0;
    let (c, h, w) = plane.dims();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                bits += interval_bits(
                    plane.at(ci, y, x) as f64,
                    mu.at(0, ci, y, x) as f64,
                    log_scale.at(0, ci, y, x) as f64,
                );
            }
        }
    }
    bits
}
