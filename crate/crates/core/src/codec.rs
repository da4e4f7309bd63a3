//! The λ-conditioned frame auto-encoder and its hyper-prior I-frame entropy
//! model.
//!
//! Every forward pass is built on a [`Graph`], so training and inference run
//! the exact same arithmetic.

use rand::RngCore;

use crate::entropy::{self, ChannelPmfs, LaplaceGrid, ScanOrder};
use crate::error::{shape_err, Error, Result};
use crate::graph::{BoundConv, Graph, Var};
use crate::tensor::{quantize_round, round_tensor, uniform_noise, ConvLayer, LatentPlane, Tensor, DEFAULT_LEAKY_SLOPE};
use crate::video::{FrameChunk, FrameType};
use crate::weights::NamedTensors;

/// Softplus preimage of 1: a conditional scale initialised here is the identity.
pub const IDENTITY_SCALE: f32 = 0.541_324_85;

/// Width of a layer whose full-size width is `full`, for a latent of `c`
/// channels (the full-size latent has 320 channels).
pub fn scaled_width(full: usize, c: usize) -> usize {
    ((full * c) as f64 / 320.0).round().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub hidden_channels: usize,
    /// Number of stride-2 stages; the downsampling factor is `2^stages`.
    pub stages: usize,
    pub hyper_channels: usize,
    pub lambdas: Vec<f32>,
    pub leaky_slope: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(32, 32, 2, vec![64.0, 256.0, 1024.0])
    }
}

impl ModelConfig {
    pub fn new(latent_channels: usize, hidden_channels: usize, stages: usize, lambdas: Vec<f32>) -> Self {
        Self {
            latent_channels,
            hidden_channels,
            stages,
            hyper_channels: scaled_width(256, latent_channels),
            lambdas,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hidden_channels == 0 || self.hyper_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.stages == 0 || self.stages > 6 {
            return Err(Error::Config(format!("{} downsampling stages; expected 1..=6", self.stages)));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l.is_finite() && l >= 0.0)) {
            return Err(Error::Config("λ set must be non-empty and non-negative".into()));
        }
        if self.lambdas.len() > 255 {
            return Err(Error::Config("at most 255 rate points".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateIndex {
    pub index: usize,
    pub lambda: f32,
}

impl RateIndex {
    pub fn new(index: usize, lambdas: &[f32]) -> Result<Self> {
        lambdas
            .get(index)
            .map(|&lambda| Self { index, lambda })
            .ok_or_else(|| Error::Config(format!("rate index {index} outside λ set of {}", lambdas.len())))
    }
}

/// Per-λ channel-wise `(scale, bias)` rows for one conditioned layer, both
/// shaped `(1, 1, L, C)`. The applied scale is `softplus(scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondTable {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl CondTable {
    pub fn identity(rates: usize, channels: usize) -> Self {
        Self {
            scale: Tensor::full([1, 1, rates, channels], IDENTITY_SCALE),
            bias: Tensor::zeros([1, 1, rates, channels]),
        }
    }
}

/// Identifies a conditioned layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondLayer {
    Analysis(usize),
    Synthesis(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderWeights {
    pub config: ModelConfig,
    /// Stride-2 convolutions, each followed by leaky ReLU and conditional scale.
    pub analysis: Vec<ConvLayer>,
    pub analysis_cond: Vec<CondTable>,
    /// Stride-2 transposed convolutions; all but the last are followed by
    /// leaky ReLU and conditional scale.
    pub synthesis: Vec<ConvLayer>,
    pub synthesis_cond: Vec<CondTable>,
    pub hyper_enc: Vec<ConvLayer>,
    pub hyper_dec: Vec<ConvLayer>,
    /// Factorized hyper-latent prior, `(1, Cz, 1, 1)` each.
    pub z_mu: Tensor,
    pub z_log_scale: Tensor,
}

/// Hyper-prior encoder: 3×3 s1, 5×5 s2, 5×5 s2.
pub(crate) fn hyper_encoder_layers(input: usize, cz: usize, seed: u64) -> Vec<ConvLayer> {
    vec![
        ConvLayer::init(input, cz, 3, 1, false, seed),
        ConvLayer::init(cz, cz, 5, 2, false, seed + 1),
        ConvLayer::init(cz, cz, 5, 2, false, seed + 2),
    ]
}

/// Hyper-prior decoder: two 5×5 s2 transposed convs, then 3×3 s1 to `out`.
pub(crate) fn hyper_decoder_layers(cz: usize, out: usize, seed: u64) -> Vec<ConvLayer> {
    vec![
        ConvLayer::init(cz, cz, 5, 2, true, seed),
        ConvLayer::init(cz, cz, 5, 2, true, seed + 1),
        ConvLayer::init(cz, out, 3, 1, false, seed + 2),
    ]
}

impl AutoencoderWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, n, l, s) = (config.latent_channels, config.hidden_channels, config.lambdas.len(), config.stages);
        let widths: Vec<usize> = (0..=s)
            .map(|i| {
                if i == 0 {
                    3
                } else if i == s {
                    c
                } else {
                    n
                }
            })
            .collect();
        let analysis = (0..s)
            .map(|i| ConvLayer::init(widths[i], widths[i + 1], 5, 2, false, seed + i as u64))
            .collect();
        let analysis_cond = (0..s).map(|i| CondTable::identity(l, widths[i + 1])).collect();
        let synthesis = (0..s)
            .map(|i| ConvLayer::init(widths[s - i], widths[s - i - 1], 5, 2, true, seed + 10 + i as u64))
            .collect();
        let synthesis_cond = (0..s - 1).map(|i| CondTable::identity(l, widths[s - i - 1])).collect();
        let cz = config.hyper_channels;
        Ok(Self {
            analysis,
            analysis_cond,
            synthesis,
            synthesis_cond,
            hyper_enc: hyper_encoder_layers(c, cz, seed + 20),
            hyper_dec: hyper_decoder_layers(cz, 2 * c, seed + 30),
            z_mu: Tensor::zeros([1, cz, 1, 1]),
            z_log_scale: Tensor::zeros([1, cz, 1, 1]),
            config,
        })
    }

    pub fn rate(&self, index: usize) -> Result<RateIndex> {
        RateIndex::new(index, &self.config.lambdas)
    }

    pub fn cond_table(&self, layer: CondLayer) -> Result<&CondTable> {
        match layer {
            CondLayer::Analysis(i) => self.analysis_cond.get(i),
            CondLayer::Synthesis(i) => self.synthesis_cond.get(i),
        }
        .ok_or_else(|| Error::Config(format!("no conditional scale table for {layer:?}")))
    }

    /// Trainable tensors, in the order [`AeVars::params`] lists their vars.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.analysis.iter_mut().chain(&mut self.synthesis) {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        for t in self.analysis_cond.iter_mut().chain(&mut self.synthesis_cond) {
            out.push(&mut t.scale);
            out.push(&mut t.bias);
        }
        for l in self.hyper_enc.iter_mut().chain(&mut self.hyper_dec) {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.z_mu);
        out.push(&mut self.z_log_scale);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AeVars {
        let bind_all = |g: &mut Graph, ls: &[ConvLayer]| ls.iter().map(|l| l.bind(g, trainable)).collect::<Vec<_>>();
        let bind_cond = |g: &mut Graph, ts: &[CondTable]| {
            ts.iter()
                .map(|t| (g.leaf(t.scale.clone(), trainable), g.leaf(t.bias.clone(), trainable)))
                .collect::<Vec<_>>()
        };
        AeVars {
            analysis: bind_all(g, &self.analysis),
            synthesis: bind_all(g, &self.synthesis),
            analysis_cond: bind_cond(g, &self.analysis_cond),
            synthesis_cond: bind_cond(g, &self.synthesis_cond),
            hyper_enc: bind_all(g, &self.hyper_enc),
            hyper_dec: bind_all(g, &self.hyper_dec),
            z_mu: g.leaf(self.z_mu.clone(), trainable),
            z_log_scale: g.leaf(self.z_log_scale.clone(), trainable),
            slope: self.config.leaky_slope,
        }
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut n = NamedTensors::new();
        let c = &self.config;
        n.push(
            "config.shape",
            Tensor::new(
                [1, 1, 1, 4],
                vec![
                    c.latent_channels as f32,
                    c.hidden_channels as f32,
                    c.stages as f32,
                    c.hyper_channels as f32,
                ],
            )
            .expect("4 values"),
        );
        n.push(
            "config.lambdas",
            Tensor::new([1, 1, 1, c.lambdas.len()], c.lambdas.clone()).expect("λ row"),
        );
        n.push("config.leaky_slope", Tensor::full([1, 1, 1, 1], c.leaky_slope));
        for (i, l) in self.analysis.iter().enumerate() {
            n.push_conv(&format!("analysis.{i}"), l);
        }
        for (i, t) in self.analysis_cond.iter().enumerate() {
            n.push(format!("analysis_cond.{i}.scale"), t.scale.clone());
            n.push(format!("analysis_cond.{i}.bias"), t.bias.clone());
        }
        for (i, l) in self.synthesis.iter().enumerate() {
            n.push_conv(&format!("synthesis.{i}"), l);
        }
        for (i, t) in self.synthesis_cond.iter().enumerate() {
            n.push(format!("synthesis_cond.{i}.scale"), t.scale.clone());
            n.push(format!("synthesis_cond.{i}.bias"), t.bias.clone());
        }
        for (i, l) in self.hyper_enc.iter().enumerate() {
            n.push_conv(&format!("hyper_enc.{i}"), l);
        }
        for (i, l) in self.hyper_dec.iter().enumerate() {
            n.push_conv(&format!("hyper_dec.{i}"), l);
        }
        n.push("z_prior.mu", self.z_mu.clone());
        n.push("z_prior.log_scale", self.z_log_scale.clone());
        n
    }

    pub fn from_named(n: &NamedTensors) -> Result<Self> {
        let shape = n.get("config.shape")?.data();
        if shape.len() != 4 {
            return Err(Error::Format("config.shape must hold 4 values".into()));
        }
        let [c, hidden, stages, cz] = [shape[0], shape[1], shape[2], shape[3]].map(|v| v as usize);
        let mut config = ModelConfig::new(c, hidden, stages, n.get("config.lambdas")?.data().to_vec());
        config.hyper_channels = cz;
        config.leaky_slope = n.get("config.leaky_slope")?.data().first().copied().unwrap_or(DEFAULT_LEAKY_SLOPE);
        config.validate()?;
        let cond = |prefix: &str, i: usize| -> Result<CondTable> {
            Ok(CondTable {
                scale: n.get(&format!("{prefix}.{i}.scale"))?.clone(),
                bias: n.get(&format!("{prefix}.{i}.bias"))?.clone(),
            })
        };
        let w = Self {
            analysis: (0..stages)
                .map(|i| n.conv(&format!("analysis.{i}"), 2, false, None))
                .collect::<Result<_>>()?,
            analysis_cond: (0..stages).map(|i| cond("analysis_cond", i)).collect::<Result<_>>()?,
            synthesis: (0..stages)
                .map(|i| n.conv(&format!("synthesis.{i}"), 2, true, None))
                .collect::<Result<_>>()?,
            synthesis_cond: (0..stages - 1).map(|i| cond("synthesis_cond", i)).collect::<Result<_>>()?,
            hyper_enc: [(0, 1), (1, 2), (2, 2)]
                .iter()
                .map(|&(i, s)| n.conv(&format!("hyper_enc.{i}"), s, false, None))
                .collect::<Result<_>>()?,
            hyper_dec: [(0, 2, true), (1, 2, true), (2, 1, false)]
                .iter()
                .map(|&(i, s, t)| n.conv(&format!("hyper_dec.{i}"), s, t, None))
                .collect::<Result<_>>()?,
            z_mu: n.get("z_prior.mu")?.clone(),
            z_log_scale: n.get("z_prior.log_scale")?.clone(),
            config,
        };
        w.validate()?;
        Ok(w)
    }

    /// Checks that layer widths chain and match the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let l = c.lambdas.len();
        let mut ch = 3;
        for (layer, table) in self.analysis.iter().zip(&self.analysis_cond) {
            check_in(layer, ch, "analysis")?;
            ch = layer.out_channels();
            check_table(table, l, ch)?;
        }
        if ch != c.latent_channels {
            return Err(shape_err("analysis", "latent channels", c.latent_channels, ch));
        }
        for (i, layer) in self.synthesis.iter().enumerate() {
            check_in(layer, ch, "synthesis")?;
            ch = layer.out_channels();
            if let Some(t) = self.synthesis_cond.get(i) {
                check_table(t, l, ch)?;
            }
        }
        if ch != 3 {
            return Err(shape_err("synthesis", "output channels", 3, ch));
        }
        ch = c.latent_channels;
        for layer in &self.hyper_enc {
            check_in(layer, ch, "hyper encoder")?;
            ch = layer.out_channels();
        }
        for t in [&self.z_mu, &self.z_log_scale] {
            if t.shape() != [1, ch, 1, 1] {
                return Err(shape_err("z prior", "channels", ch, t.channels()));
            }
        }
        for layer in &self.hyper_dec {
            check_in(layer, ch, "hyper decoder")?;
            ch = layer.out_channels();
        }
        if ch != 2 * c.latent_channels {
            return Err(shape_err("hyper decoder", "output channels", 2 * c.latent_channels, ch));
        }
        Ok(())
    }
}

fn check_in(layer: &ConvLayer, ch: usize, op: &'static str) -> Result<()> {
    if layer.in_channels() != ch {
        return Err(shape_err(op, "input channels", layer.in_channels(), ch));
    }
    Ok(())
}

fn check_table(t: &CondTable, rates: usize, ch: usize) -> Result<()> {
    for v in [&t.scale, &t.bias] {
        if v.shape() != [1, 1, rates, ch] {
            return Err(shape_err("conditional scale table", "entries", rates * ch, v.len()));
        }
    }
    Ok(())
}

/// [`AutoencoderWeights`] placed on a graph.
#[derive(Clone, Debug)]
pub struct AeVars {
    pub analysis: Vec<BoundConv>,
    pub analysis_cond: Vec<(Var, Var)>,
    pub synthesis: Vec<BoundConv>,
    pub synthesis_cond: Vec<(Var, Var)>,
    pub hyper_enc: Vec<BoundConv>,
    pub hyper_dec: Vec<BoundConv>,
    pub z_mu: Var,
    pub z_log_scale: Var,
    pub slope: f32,
}

impl AeVars {
    /// Same order as [`AutoencoderWeights::params_mut`].
    pub fn params(&self) -> Vec<Var> {
        self.clone().params_mut().into_iter().map(|v| *v).collect()
    }

    /// Slots of [`AeVars::params`], for substituting a variable.
    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        let mut out = Vec::new();
        for l in self.analysis.iter_mut().chain(&mut self.synthesis) {
            out.extend(l.params_mut());
        }
        for (s, b) in self.analysis_cond.iter_mut().chain(&mut self.synthesis_cond) {
            out.push(s);
            out.push(b);
        }
        for l in self.hyper_enc.iter_mut().chain(&mut self.hyper_dec) {
            out.extend(l.params_mut());
        }
        out.push(&mut self.z_mu);
        out.push(&mut self.z_log_scale);
        out
    }
}

/// Runs a conv stack with leaky ReLU between layers (none after the last).
pub(crate) fn conv_stack(g: &mut Graph, mut x: Var, layers: &[BoundConv], slope: f32) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        x = g.conv(x, l)?;
        if i + 1 < layers.len() {
            x = g.leaky_relu(x, slope);
        }
    }
    Ok(x)
}

/// Analysis transform on a `(B, 3, H, W)` batch; `rows[b]` is the rate index
/// of item `b`.
pub fn analysis_graph(g: &mut Graph, x: Var, rows: &[usize], v: &AeVars) -> Result<Var> {
    let mut h = x;
    for (l, &(s, b)) in v.analysis.iter().zip(&v.analysis_cond) {
        h = g.conv(h, l)?;
        h = g.leaky_relu(h, v.slope);
        h = g.cond_scale(h, s, b, rows)?;
    }
    Ok(h)
}

/// Synthesis transform, unclamped.
pub fn synthesis_graph(g: &mut Graph, y: Var, rows: &[usize], v: &AeVars) -> Result<Var> {
    let mut h = y;
    for (i, l) in v.synthesis.iter().enumerate() {
        h = g.conv(h, l)?;
        if let Some(&(s, b)) = v.synthesis_cond.get(i) {
            h = g.leaky_relu(h, v.slope);
            h = g.cond_scale(h, s, b, rows)?;
        }
    }
    Ok(h)
}

/// Output of the hyper-prior path on a graph.
#[derive(Clone, Copy, Debug)]
pub struct HyperVars {
    /// Quantized (or noise-perturbed, in training) hyper latent.
    pub z: Var,
    pub mu: Var,
    pub log_scale: Var,
}

/// How latents are discretized on a graph.
pub enum Quantizer<'a> {
    /// Rounding; the rounded values enter the graph as constants.
    Round,
    /// Additive uniform noise, the training surrogate.
    Noise(&'a mut dyn RngCore),
}

pub(crate) fn quantize_var(g: &mut Graph, x: Var, q: &mut Quantizer<'_>) -> Result<Var> {
    match q {
        Quantizer::Round => {
            let r = round_tensor(g.value(x));
            Ok(g.constant(r))
        }
        Quantizer::Noise(rng) => {
            let u = uniform_noise(g.shape(x), rng);
            let u = g.constant(u);
            g.add(x, u)
        }
    }
}

/// Hyper-encoder, quantizer and hyper-decoder on the latent `y`. The decoded
/// parameters are cropped to the latent extents.
pub fn hyper_graph(g: &mut Graph, y: Var, enc: &[BoundConv], dec: &[BoundConv], slope: f32, q: &mut Quantizer<'_>) -> Result<HyperVars> {
    let [_, _, h, w] = g.shape(y);
    let c = g.shape(y)[1];
    let z = conv_stack(g, y, enc, slope)?;
    let z = quantize_var(g, z, q)?;
    let p = conv_stack(g, z, dec, slope)?;
    let p = g.crop(p, h, w)?;
    let pc = g.shape(p)[1];
    if pc != 2 * c {
        return Err(shape_err("hyper decoder", "output channels", 2 * c, pc));
    }
    let mu = g.slice_channels(p, 0, c)?;
    let log_scale = g.slice_channels(p, c, c)?;
    Ok(HyperVars { z, mu, log_scale })
}

fn single_rate_rows(batch: usize, rate: RateIndex) -> Vec<usize> {
    vec![rate.index; batch]
}

/// Channel-wise `softplus(scale[c]) · features[c] + bias[c]` using the row
/// of `layer`'s table selected by `rate`.
pub fn conditional_scale(features: &Tensor, rate: RateIndex, layer: CondLayer, w: &AutoencoderWeights) -> Result<Tensor> {
    let table = w.cond_table(layer)?;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let s = g.constant(table.scale.clone());
    let b = g.constant(table.bias.clone());
    let y = g.cond_scale(x, s, b, &single_rate_rows(features.batch(), rate))?;
    Ok(g.value(y).clone())
}

fn check_frame(frame: &Tensor, f: usize) -> Result<()> {
    if frame.channels() != 3 {
        return Err(shape_err("analyze", "channels", 3, frame.channels()));
    }
    for (dim, e) in [("height", frame.height()), ("width", frame.width())] {
        if e % f != 0 || e == 0 {
            return Err(Error::Config(format!(
                "frame {dim} {e} is not a positive multiple of the downsampling factor {f}; pad the frame first"
            )));
        }
    }
    Ok(())
}

/// Latent tensor `(B, C, H/f, W/f)` of a `(B, 3, H, W)` frame batch.
pub fn analyze(frame: &Tensor, rate: RateIndex, w: &AutoencoderWeights) -> Result<Tensor> {
    check_frame(frame, w.config.downsample_factor())?;
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let x = g.constant(frame.clone());
    let y = analysis_graph(&mut g, x, &single_rate_rows(frame.batch(), rate), &v)?;
    Ok(g.value(y).clone())
}

/// Reconstructs a `(1, 3, H, W)` frame in `[0, 1]` from an integer latent.
pub fn synthesize(latent: &LatentPlane, rate: RateIndex, w: &AutoencoderWeights) -> Result<Tensor> {
    if latent.channels() != w.config.latent_channels {
        return Err(shape_err(
            "synthesize",
            "latent channels",
            w.config.latent_channels,
            latent.channels(),
        ));
    }
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let y = g.constant(latent.to_tensor());
    let x = synthesis_graph(&mut g, y, &[rate.index], &v)?;
    let x = g.clamp(x, 0.0, 1.0);
    Ok(g.value(x).clone())
}

/// Hyper-prior parameters for an I-frame latent.
#[derive(Clone, Debug)]
pub struct IEntropyParams {
    pub mu: Tensor,
    pub log_scale: Tensor,
    pub z_hat: LatentPlane,
    /// Continuous-model code length of `z_hat` under the factorized prior.
    pub z_bits: f64,
}

/// Hyper-prior entropy parameters for `latent_hat`. The hyper prior has no
/// rate input: one model serves every λ.
pub fn i_entropy_params(latent_hat: &LatentPlane, w: &AutoencoderWeights) -> Result<IEntropyParams> {
    if latent_hat.channels() != w.config.latent_channels {
        return Err(shape_err(
            "i_entropy_params",
            "latent channels",
            w.config.latent_channels,
            latent_hat.channels(),
        ));
    }
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let y = g.constant(latent_hat.to_tensor());
    let hv = hyper_graph(&mut g, y, &v.hyper_enc, &v.hyper_dec, v.slope, &mut Quantizer::Round)?;
    let z_hat = quantize_round(g.value(hv.z))?;
    let z_bits = factorized_bits(&z_hat, &w.z_mu, &w.z_log_scale);
    Ok(IEntropyParams {
        mu: g.value(hv.mu).clone(),
        log_scale: g.value(hv.log_scale).clone(),
        z_hat,
        z_bits,
    })
}

/// Continuous-model bits of a hyper latent under per-channel Laplacians.
pub fn factorized_bits(z: &LatentPlane, mu: &Tensor, log_scale: &Tensor) -> f64 {
    let (c, h, wd) = z.dims();
    let mut bits = 0.0;
    for ci in 0..c {
        let (m, s) = (mu.data()[ci] as f64, log_scale.data()[ci] as f64);
        for y in 0..h {
            for x in 0..wd {
                bits += entropy::laplace::interval_bits(z.at(ci, y, x) as f64, m, s);
            }
        }
    }
    bits
}

pub(crate) fn encode_hyper(z_hat: &LatentPlane, mu: &Tensor, log_scale: &Tensor) -> Result<Vec<u8>> {
    let mut prior = ChannelPmfs::laplace(mu.data(), log_scale.data())?;
    Ok(entropy::encode_plane(z_hat, &mut prior)?.bytes)
}

pub(crate) fn decode_hyper(bytes: &[u8], mu: &Tensor, log_scale: &Tensor, dims: (usize, usize, usize)) -> Result<LatentPlane> {
    let mut prior = ChannelPmfs::laplace(mu.data(), log_scale.data())?;
    entropy::decode_plane(bytes, &mut prior, dims)
}

/// Hyper-latent extents for a latent of `h × w`: two stride-2 stages.
pub fn hyper_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2))
}

/// Integer latent of one frame at `rate`.
pub fn encode_latent(frame: &Tensor, rate: RateIndex, w: &AutoencoderWeights) -> Result<LatentPlane> {
    if frame.batch() != 1 {
        return Err(shape_err("compress_iframe", "batch", 1, frame.batch()));
    }
    quantize_round(&analyze(frame, rate, w)?)
}

/// Codes a latent as an intra frame.
pub fn code_iframe_latent(latent_hat: &LatentPlane, w: &AutoencoderWeights) -> Result<FrameChunk> {
    let p = i_entropy_params(latent_hat, w)?;
    let z_stream = encode_hyper(&p.z_hat, &w.z_mu, &w.z_log_scale)?;
    let mut grid = LaplaceGrid {
        mu: &p.mu,
        log_scale: &p.log_scale,
        order: ScanOrder::ChannelMajor,
    };
    let y_stream = entropy::encode_plane(latent_hat, &mut grid)?.bytes;
    Ok(FrameChunk {
        frame_type: FrameType::Intra,
        z_stream,
        y_stream,
    })
}

pub fn compress_iframe(frame: &Tensor, rate: RateIndex, w: &AutoencoderWeights) -> Result<(FrameChunk, LatentPlane)> {
    let latent_hat = encode_latent(frame, rate, w)?;
    let chunk = code_iframe_latent(&latent_hat, w)?;
    Ok((chunk, latent_hat))
}

/// Recovers the latent of an intra chunk for a `frame_h × frame_w` frame.
pub fn decode_iframe_latent(chunk: &FrameChunk, w: &AutoencoderWeights, frame_h: usize, frame_w: usize) -> Result<LatentPlane> {
    if chunk.frame_type != FrameType::Intra {
        return Err(Error::Corrupt("expected an intra chunk".into()));
    }
    let f = w.config.downsample_factor();
    let (h, wd) = (frame_h.div_ceil(f), frame_w.div_ceil(f));
    let (zh, zw) = hyper_dims(h, wd);
    let z_hat = decode_hyper(&chunk.z_stream, &w.z_mu, &w.z_log_scale, (w.config.hyper_channels, zh, zw))?;
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let z = g.constant(z_hat.to_tensor());
    let p = conv_stack(&mut g, z, &v.hyper_dec, v.slope)?;
    let p = g.crop(p, h, wd)?;
    let c = w.config.latent_channels;
    let mu = g.value(p).slice_channels(0, c)?;
    let log_scale = g.value(p).slice_channels(c, c)?;
    let mut grid = LaplaceGrid {
        mu: &mu,
        log_scale: &log_scale,
        order: ScanOrder::ChannelMajor,
    };
    entropy::decode_plane(&chunk.y_stream, &mut grid, (c, h, wd))
}

pub fn decompress_iframe(
    chunk: &FrameChunk,
    rate: RateIndex,
    w: &AutoencoderWeights,
    frame_h: usize,
    frame_w: usize,
) -> Result<(Tensor, LatentPlane)> {
    let latent_hat = decode_iframe_latent(chunk, w, frame_h, frame_w)?;
    let frame = synthesize(&latent_hat, rate, w)?;
    Ok((frame, latent_hat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AutoencoderWeights {
        AutoencoderWeights::init(ModelConfig::new(8, 8, 2, vec![1.0, 10.0]), 3).unwrap()
    }

    fn frame(seed: u64, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::randn([1, 3, h, w], 0.25, seed);
        t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.5).clamp(0.0, 1.0));
        t
    }

    #[test]
    fn identity_scale_constant_is_softplus_preimage_of_one() {
        let sp = (IDENTITY_SCALE as f64).exp().ln_1p();
        assert!((sp - 1.0).abs() < 1e-7);
    }

    #[test]
    fn scaled_widths_follow_the_channel_ratio() {
        assert_eq!(scaled_width(256, 32), 26);
        assert_eq!(scaled_width(426, 32), 43);
        assert_eq!(scaled_width(533, 32), 53);
        assert_eq!(scaled_width(640, 32), 64);
        assert_eq!(scaled_width(1600, 32), 160);
        assert_eq!(scaled_width(640, 320), 640);
    }

    #[test]
    fn conditional_scale_identity_and_selection() {
        let mut w = small();
        let x = Tensor::randn([1, 8, 4, 4], 1.0, 9);
        let r0 = w.rate(0).unwrap();
        let y = conditional_scale(&x, r0, CondLayer::Analysis(0), &w).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        w.analysis_cond[0].scale.data_mut()[8..].iter_mut().for_each(|v| *v = 2.0);
        let y1 = conditional_scale(&x, w.rate(1).unwrap(), CondLayer::Analysis(0), &w).unwrap();
        assert_ne!(y1.data(), y.data());
        assert!(conditional_scale(&x, r0, CondLayer::Synthesis(5), &w).is_err());
    }

    #[test]
    fn shapes_follow_the_downsampling_factor() {
        let w = AutoencoderWeights::init(ModelConfig::default(), 1).unwrap();
        let x = frame(1, 64, 64);
        let y = analyze(&x, w.rate(0).unwrap(), &w).unwrap();
        assert_eq!(y.shape(), [1, 32, 16, 16]);
        let yh = quantize_round(&y).unwrap();
        let xr = synthesize(&yh, w.rate(0).unwrap(), &w).unwrap();
        assert_eq!(xr.shape(), [1, 3, 64, 64]);
        assert!(xr.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let p = i_entropy_params(&yh, &w).unwrap();
        assert_eq!(p.mu.shape(), [1, 32, 16, 16]);
        assert_eq!(p.z_hat.dims(), (26, 4, 4));
        assert_eq!(w.hyper_dec.last().unwrap().out_channels(), 64);
    }

    #[test]
    fn indivisible_frames_ask_for_padding() {
        let w = small();
        let err = analyze(&frame(1, 10, 12), w.rate(0).unwrap(), &w).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn zero_frame_with_zero_biases_gives_zero_latent() {
        let w = small();
        let y = analyze(&Tensor::zeros([1, 3, 8, 8]), w.rate(1).unwrap(), &w).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_bias_mu_and_constant_scale() {
        let mut w = small();
        for l in w.hyper_dec.iter_mut().chain(&mut w.hyper_enc) {
            l.kernel.data_mut().fill(0.0);
        }
        let last = w.hyper_dec.last_mut().unwrap();
        for (i, b) in last.bias.data_mut().iter_mut().enumerate() {
            *b = i as f32 * 0.1;
        }
        let yh = quantize_round(&Tensor::randn([1, 8, 4, 4], 3.0, 2)).unwrap();
        let p = i_entropy_params(&yh, &w).unwrap();
        for c in 0..8 {
            for i in 0..16 {
                assert_eq!(p.mu.data()[c * 16 + i], c as f32 * 0.1);
                assert_eq!(p.log_scale.data()[c * 16 + i], (c + 8) as f32 * 0.1);
            }
        }
    }

    #[test]
    fn iframe_roundtrip_is_lossless_and_deterministic() {
        let w = small();
        for (i, (h, wd)) in [(8, 8), (16, 12), (4, 20)].into_iter().enumerate() {
            let x = frame(i as u64, h, wd);
            let rate = w.rate(i % 2).unwrap();
            let (chunk, y) = compress_iframe(&x, rate, &w).unwrap();
            let (chunk2, _) = compress_iframe(&x, rate, &w).unwrap();
            assert_eq!(chunk, chunk2);
            let (xr, y2) = decompress_iframe(&chunk, rate, &w, h, wd).unwrap();
            assert_eq!(y, y2);
            assert_eq!(xr.to_le_bytes(), synthesize(&y, rate, &w).unwrap().to_le_bytes());
        }
    }

    #[test]
    fn weights_roundtrip_through_named_tensors() {
        let w = small();
        let n = w.to_named();
        let back = AutoencoderWeights::from_named(&crate::weights::NamedTensors::from_bytes(&n.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn params_and_vars_align() {
        let mut w = small();
        let mut g = Graph::new();
        let v = w.bind(&mut g, true);
        let vars = v.params();
        let params = w.params_mut();
        assert_eq!(vars.len(), params.len());
        for (var, t) in vars.iter().zip(params) {
            assert_eq!(g.shape(*var), t.shape());
        }
    }
}
