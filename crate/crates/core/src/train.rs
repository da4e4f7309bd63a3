//! Two-stage training: the λ-conditioned auto-encoder on single frames, then
//! the entropy model on latent pairs from the frozen auto-encoder.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{analysis_graph, hyper_graph, quantize_var, synthesis_graph, AeVars, AutoencoderWeights, Quantizer};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{gaussian_taps, MS_SSIM_WEIGHTS, SSIM_SIGMA, SSIM_WINDOW};
use crate::stem::{stem_graph, StemFlags, StemVars, StemWeights};
use crate::tensor::{round_tensor, Tensor};
use crate::video::RgbFrame;
use crate::weights::NamedTensors;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Mse,
    /// `1 − MS-SSIM` over this many scales.
    MsSsim {
        scales: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_set: Vec<f32>,
    pub batch_size: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub lr_values: Vec<f32>,
    pub lr_boundaries: Vec<usize>,
    pub total_iters: usize,
    pub distortion: Distortion,
    pub seed: u64,
    /// Largest frame distance between reference and current in a pair.
    pub pair_span: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 4, 64×64 patches.
    pub fn desk(lambda_set: Vec<f32>, total_iters: usize) -> Self {
        let mut lr_boundaries: Vec<usize> = Vec::new();
        for f in [0.64, 0.84, 0.92, 0.96, 1.0] {
            let b = ((total_iters as f64 * f) as usize).max(lr_boundaries.last().map_or(1, |p| p + 1));
            lr_boundaries.push(b);
        }
        Self {
            lambda_set,
            batch_size: 4,
            patch_h: 64,
            patch_w: 64,
            lr_values: vec![1e-4, 5e-5, 1e-5, 5e-6, 1e-6],
            // Full-length schedule boundaries relative to its 2.5M-step total.
            lr_boundaries,
            total_iters,
            distortion: Distortion::Mse,
            seed: 0,
            pair_span: 6,
        }
    }

    pub fn validate(&self, downsample_factor: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda_set.is_empty() || self.lambda_set.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return bad("λ set must be non-empty and non-negative".into());
        }
        if self.batch_size == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return bad("batch and patch sizes must be positive".into());
        }
        if !self.patch_h.is_multiple_of(downsample_factor) || !self.patch_w.is_multiple_of(downsample_factor) {
            return bad(format!(
                "patch {}×{} is not divisible by the downsampling factor {downsample_factor}",
                self.patch_h, self.patch_w
            ));
        }
        let (nv, nb) = (self.lr_values.len(), self.lr_boundaries.len());
        if nv == 0 || (nb != nv && nb + 1 != nv) {
            return bad(format!(
                "{nv} learning rates need {nv} or {} boundaries, got {nb}",
                nv.saturating_sub(1)
            ));
        }
        if self.lr_boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return bad("learning-rate boundaries must increase".into());
        }
        if let Distortion::MsSsim { scales } = self.distortion {
            let min = (1 << scales.saturating_sub(1)) * SSIM_WINDOW;
            if scales == 0 || scales > 5 || self.patch_h.min(self.patch_w) < min {
                return bad(format!("{scales}-scale MS-SSIM needs patches of at least {min}"));
            }
        }
        if self.pair_span == 0 {
            return bad("pair span must be positive".into());
        }
        Ok(())
    }
}

/// `lr_values[i]` with `i` the number of boundaries at or below `iteration`,
/// capped at the last value.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f32 {
    let i = cfg.lr_boundaries.iter().filter(|&&b| b <= iteration).count();
    cfg.lr_values[i.min(cfg.lr_values.len() - 1)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Tensor updates skipped because of non-finite gradients.
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(params: &[&mut Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped: 0,
        }
    }
}

/// Bias-corrected Adam. A tensor whose gradient is missing is left alone; one
/// with a non-finite gradient is skipped and counted. Returns the number
/// skipped in this step.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<&[f32]>], state: &mut OptimizerState, lr: f32) -> Result<usize> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - (b1 as f64).powi(t);
    let c2 = 1.0 - (b2 as f64).powi(t);
    let mut skipped = 0;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.len() != p.len() || state.m[i].len() != p.len() {
            return Err(Error::Config(format!(
                "parameter {i}: gradient or moment length differs from the tensor"
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            skipped += 1;
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mh = *mi as f64 / c1;
            let vh = *vi as f64 / c2;
            *w -= (lr as f64 * mh / (vh.sqrt() + state.eps as f64)) as f32;
        }
    }
    state.skipped += skipped as u64;
    Ok(skipped)
}

/// `(B, 1, 1, 1)` MS-SSIM of two `(B, 3, H, W)` batches in `[0, 1]`, channel
/// averaged, with the leading weights renormalized to `scales`.
pub fn ms_ssim_graph(g: &mut Graph, a: Var, b: Var, scales: usize) -> Result<Var> {
    let taps: Arc<[f32]> = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(|v| v as f32).collect();
    let (c1, c2) = (1e-4f32, 9e-4f32);
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut a, mut b) = (a, b);
    let mut product: Option<Var> = None;
    for s in 0..scales {
        let ma = g.blur(a, taps.clone())?;
        let mb = g.blur(b, taps.clone())?;
        let aa = g.mul(a, a)?;
        let bb = g.mul(b, b)?;
        let ab = g.mul(a, b)?;
        let saa = g.blur(aa, taps.clone())?;
        let sbb = g.blur(bb, taps.clone())?;
        let sab = g.blur(ab, taps.clone())?;
        let ma2 = g.mul(ma, ma)?;
        let mb2 = g.mul(mb, mb)?;
        let mab = g.mul(ma, mb)?;
        let va = g.sub(saa, ma2)?;
        let vb = g.sub(sbb, mb2)?;
        let cov = g.sub(sab, mab)?;
        let num = g.scale(cov, 2.0);
        let num = g.add_scalar(num, c2);
        let den = g.add(va, vb)?;
        let den = g.add_scalar(den, c2);
        let mut map = g.div(num, den)?;
        if s + 1 == scales {
            let ln = g.scale(mab, 2.0);
            let ln = g.add_scalar(ln, c1);
            let ld = g.add(ma2, mb2)?;
            let ld = g.add_scalar(ld, c1);
            let l = g.div(ln, ld)?;
            map = g.mul(l, map)?;
        }
        let m = g.mean_spatial(map);
        let m = g.clamp(m, 1e-6, 1.0);
        let term = g.pow(m, (MS_SSIM_WEIGHTS[s] / wsum) as f32);
        product = Some(match product {
            Some(p) => g.mul(p, term)?,
            None => term,
        });
        if s + 1 < scales {
            a = g.avg_pool2(a);
            b = g.avg_pool2(b);
        }
    }
    let per = g.sum_per_batch(product.expect("at least one scale"));
    Ok(g.scale(per, 1.0 / 3.0))
}

/// Graph outputs of the intra training loss.
#[derive(Clone, Copy, Debug)]
pub struct ImageLoss {
    /// Mean over the batch of `R_b + λ_b·D_b`.
    pub loss: Var,
    /// Mean bits per pixel.
    pub rate: Var,
    pub distortion: Var,
}

/// Rate (latent plus hyper latent, bits per pixel) plus λ-weighted
/// distortion on a `(B, 3, H, W)` batch, with the noise surrogate for
/// quantization. `rows[b]` selects the λ of item `b`.
pub fn image_loss_graph(
    g: &mut Graph,
    x: Var,
    rows: &[usize],
    lambdas: &[f32],
    v: &AeVars,
    distortion: Distortion,
    noise: &mut dyn RngCore,
) -> Result<ImageLoss> {
    let [b, _, h, w] = g.shape(x);
    let y = analysis_graph(g, x, rows, v)?;
    let mut q = Quantizer::Noise(noise);
    let y = quantize_var(g, y, &mut q)?;
    let hv = hyper_graph(g, y, &v.hyper_enc, &v.hyper_dec, v.slope, &mut q)?;
    let y_bits = g.laplace_bits(y, hv.mu, hv.log_scale)?;
    let z_bits = g.laplace_bits(hv.z, v.z_mu, v.z_log_scale)?;
    let yb = g.sum_per_batch(y_bits);
    let zb = g.sum_per_batch(z_bits);
    let bits = g.add(yb, zb)?;
    let rate = g.scale(bits, 1.0 / (h * w) as f32);
    let x_hat = synthesis_graph(g, y, rows, v)?;
    let d = match distortion {
        Distortion::Mse => {
            let diff = g.sub(x_hat, x)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum_per_batch(sq);
            g.scale(s, 1.0 / (3 * h * w) as f32)
        }
        Distortion::MsSsim { scales } => {
            let m = ms_ssim_graph(g, x_hat, x, scales)?;
            let neg = g.scale(m, -1.0);
            g.add_scalar(neg, 1.0)
        }
    };
    let lam: Vec<f32> = rows.iter().map(|&r| lambdas[r]).collect();
    let weighted = g.scale_batch(d, &lam)?;
    let total = g.add(rate, weighted)?;
    let inv = 1.0 / b as f32;
    let loss = g.sum(total);
    let loss = g.scale(loss, inv);
    let r = g.sum(rate);
    let r = g.scale(r, inv);
    let dm = g.sum(d);
    let dm = g.scale(dm, inv);
    Ok(ImageLoss {
        loss,
        rate: r,
        distortion: dm,
    })
}

/// Training-mode intra loss of a batch: `(loss, R, D)`.
pub fn loss_i(frames: &Tensor, rows: &[usize], w: &AutoencoderWeights, distortion: Distortion, seed: u64) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let x = g.constant(frames.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = image_loss_graph(&mut g, x, rows, &w.config.lambdas, &v, distortion, &mut rng)?;
    Ok((g.scalar_f64(l.loss), g.scalar_f64(l.rate), g.scalar_f64(l.distortion)))
}

/// Bits per latent symbol of a batch of latent pairs: coded plane plus hyper
/// latent, over the latent symbol count.
pub fn stem_loss_graph(g: &mut Graph, y_t: Var, y_prev: Var, flags: StemFlags, v: &StemVars, q: &mut Quantizer<'_>) -> Result<Var> {
    let n = g.value(y_t).len();
    let out = stem_graph(g, y_t, y_prev, flags, v, q)?;
    let y = g.sum(out.y_bits);
    let z = g.sum(out.z_bits);
    let total = g.add(y, z)?;
    Ok(g.scale(total, 1.0 / n as f32))
}

/// Inter loss of integer latent batches `(B, C, h, w)`; `noise_seed` of
/// `None` rounds the hyper latent instead of perturbing it.
pub fn loss_p(y_t: &Tensor, y_prev: &Tensor, flags: StemFlags, w: &StemWeights, noise_seed: Option<u64>) -> Result<f64> {
    let mut g = Graph::new();
    let v = w.bind(&mut g, false);
    let (a, b) = (g.constant(y_t.clone()), g.constant(y_prev.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed.unwrap_or(0));
    let mut q = match noise_seed {
        Some(_) => Quantizer::Noise(&mut rng),
        None => Quantizer::Round,
    };
    let l = stem_loss_graph(&mut g, a, b, flags, &v, &mut q)?;
    Ok(g.scalar_f64(l))
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: usize,
    pub lr: f32,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
}

pub const TRAIN_LOG_HEADER: &str = "iteration,lr,loss,R,D";

/// Where training progress goes.
#[derive(Default)]
pub struct TrainSink<'a> {
    /// CSV log, one row per iteration.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl TrainSink<'_> {
    fn start(&mut self) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{TRAIN_LOG_HEADER}")?;
        }
        Ok(())
    }

    fn step(&mut self, s: &StepLog, weights: impl FnOnce() -> NamedTensors, last: bool) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{},{:e},{:.6},{:.6},{:.6}", s.iteration, s.lr, s.loss, s.rate, s.distortion)?;
        }
        if let Some(path) = &self.checkpoint {
            let due = self.checkpoint_every > 0 && (s.iteration + 1).is_multiple_of(self.checkpoint_every);
            if due || last {
                weights().save(path)?;
            }
        }
        Ok(())
    }
}

fn random_patches(rng: &mut ChaCha8Rng, frames: &[&RgbFrame], ph: usize, pw: usize) -> Result<Vec<Tensor>> {
    let (w, h) = (frames[0].width(), frames[0].height());
    let (x0, y0) = (rng.gen_range(0..=w - pw), rng.gen_range(0..=h - ph));
    frames.iter().map(|f| Ok(f.window(x0, y0, pw, ph)?.to_tensor())).collect()
}

fn check_frames<'a>(frames: impl IntoIterator<Item = &'a RgbFrame>, cfg: &TrainConfig) -> Result<usize> {
    let mut n = 0;
    for f in frames {
        if f.width() < cfg.patch_w || f.height() < cfg.patch_h {
            return Err(Error::Config(format!(
                "training frame {}×{} is smaller than the {}×{} patch",
                f.width(),
                f.height(),
                cfg.patch_w,
                cfg.patch_h
            )));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(n)
}

/// Trains the auto-encoder from `init` on random patches of `frames`, each
/// sample at a random λ index.
pub fn train_image_model(
    frames: &[RgbFrame],
    init: AutoencoderWeights,
    cfg: &TrainConfig,
    sink: &mut TrainSink<'_>,
) -> Result<AutoencoderWeights> {
    cfg.validate(init.config.downsample_factor())?;
    if cfg.lambda_set != init.config.lambdas {
        return Err(Error::Config("the training λ set must equal the model's λ table".into()));
    }
    check_frames(frames, cfg)?;
    let mut w = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&w.params_mut());
    sink.start()?;
    for it in 0..cfg.total_iters {
        let rows: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..cfg.lambda_set.len())).collect();
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let f = &frames[rng.gen_range(0..frames.len())];
            items.extend(random_patches(&mut rng, &[f], cfg.patch_h, cfg.patch_w)?);
        }
        let batch = Tensor::stack(&items)?;
        let mut g = Graph::new();
        let v = w.bind(&mut g, true);
        let x = g.constant(batch);
        let l = image_loss_graph(&mut g, x, &rows, &cfg.lambda_set, &v, cfg.distortion, &mut rng)?;
        g.backward(l.loss)?;
        let lr = lr_at(it, cfg);
        let vars = v.params();
        let grads: Vec<Option<&[f32]>> = vars.iter().map(|&p| g.grad(p)).collect();
        adam_step(&mut w.params_mut(), &grads, &mut state, lr)?;
        let log = StepLog {
            iteration: it,
            lr,
            loss: g.scalar_f64(l.loss),
            rate: g.scalar_f64(l.rate),
            distortion: g.scalar_f64(l.distortion),
        };
        sink.step(&log, || w.to_named(), it + 1 == cfg.total_iters)?;
    }
    Ok(w)
}

/// Trains the entropy model from `init` on latent pairs of the frozen
/// auto-encoder. Each pair takes a reference frame and a current frame up to
/// `pair_span` frames later from one clip; each batch uses one random λ.
pub fn train_stem(
    clips: &[Vec<RgbFrame>],
    frozen: &AutoencoderWeights,
    init: StemWeights,
    cfg: &TrainConfig,
    flags: StemFlags,
    sink: &mut TrainSink<'_>,
) -> Result<StemWeights> {
    cfg.validate(frozen.config.downsample_factor())?;
    if init.latent_channels != frozen.config.latent_channels {
        return Err(Error::Config("entropy model and auto-encoder latent channels differ".into()));
    }
    check_frames(clips.iter().flatten(), cfg)?;
    let usable: Vec<&Vec<RgbFrame>> = clips.iter().filter(|c| c.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut w = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&w.params_mut());
    sink.start()?;
    for it in 0..cfg.total_iters {
        let rate = rng.gen_range(0..frozen.config.lambdas.len());
        let mut pairs = Vec::with_capacity(2 * cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let clip = usable[rng.gen_range(0..usable.len())];
            let span = cfg.pair_span.min(clip.len() - 1);
            let start = rng.gen_range(0..clip.len() - span);
            let cur = start + rng.gen_range(1..=span);
            pairs.extend(random_patches(&mut rng, &[&clip[start], &clip[cur]], cfg.patch_h, cfg.patch_w)?);
        }
        let latents = frozen_latents(&pairs, rate, frozen)?;
        let (prev, cur) = split_pairs(&latents)?;
        let mut g = Graph::new();
        let v = w.bind(&mut g, true);
        let (a, b) = (g.constant(cur), g.constant(prev));
        let loss = stem_loss_graph(&mut g, a, b, flags, &v, &mut Quantizer::Noise(&mut rng))?;
        g.backward(loss)?;
        let lr = lr_at(it, cfg);
        let vars = v.params();
        let grads: Vec<Option<&[f32]>> = vars.iter().map(|&p| g.grad(p)).collect();
        adam_step(&mut w.params_mut(), &grads, &mut state, lr)?;
        let l = g.scalar_f64(loss);
        let log = StepLog {
            iteration: it,
            lr,
            loss: l,
            rate: l,
            distortion: 0.0,
        };
        sink.step(&log, || w.to_named(), it + 1 == cfg.total_iters)?;
    }
    Ok(w)
}

/// Rounded latents of a batch of patches at one rate, analysed without
/// recording gradients.
fn frozen_latents(patches: &[Tensor], rate: usize, ae: &AutoencoderWeights) -> Result<Tensor> {
    let batch = Tensor::stack(patches)?;
    let mut g = Graph::new();
    let v = ae.bind(&mut g, false);
    let x = g.constant(batch);
    let y = analysis_graph(&mut g, x, &vec![rate; patches.len()], &v)?;
    Ok(round_tensor(g.value(y)))
}

/// Splits interleaved `(ref, cur, ref, cur, …)` items into two batches.
fn split_pairs(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = t.batch();
    let prev: Vec<Tensor> = (0..n).step_by(2).map(|b| t.batch_item(b)).collect();
    let cur: Vec<Tensor> = (1..n).step_by(2).map(|b| t.batch_item(b)).collect();
    Ok((Tensor::stack(&prev)?, Tensor::stack(&cur)?))
}

/// Moving average of a loss curve over `window` points.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut s: f64 = values[..window].iter().sum();
    out.push(s / window as f64);
    for i in window..values.len() {
        s += values[i] - values[i - window];
        out.push(s / window as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ModelConfig;
    use crate::video::{synth_sequence, SequenceKind};

    fn sched(values: Vec<f32>, boundaries: Vec<usize>) -> TrainConfig {
        TrainConfig {
            lr_values: values,
            lr_boundaries: boundaries,
            ..TrainConfig::desk(vec![1.0], 10)
        }
    }

    #[test]
    fn learning_rate_boundaries() {
        let c = sched(vec![1e-4, 5e-5], vec![100]);
        assert_eq!(lr_at(99, &c), 1e-4);
        assert_eq!(lr_at(100, &c), 5e-5);
        assert_eq!(lr_at(10_000, &c), 5e-5);
        let p = sched(
            vec![1e-4, 5e-5, 1e-5, 5e-6, 1e-6],
            vec![1_600_000, 2_100_000, 2_300_000, 2_400_000, 2_500_000],
        );
        let got: Vec<f32> = [0, 1_600_000, 2_100_000, 2_300_000, 2_400_000, 2_600_000]
            .iter()
            .map(|&i| lr_at(i, &p))
            .collect();
        assert_eq!(got, [1e-4, 5e-5, 1e-5, 5e-6, 1e-6, 1e-6]);
        p.validate(4).unwrap();
        assert!(sched(vec![1e-4], vec![5, 6, 7]).validate(4).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::new([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = [0.5f32, -3.0, 0.0];
        let mut s = OptimizerState::new(&[&mut p]);
        adam_step(&mut [&mut p], &[Some(&g)], &mut s, 0.01).unwrap();
        let d: Vec<f32> = p.data().iter().map(|v| v - 1.0).collect();
        assert!((d[0] + 0.01).abs() < 1e-6 && (d[1] - 0.01).abs() < 1e-6);
        assert_eq!(d[2], 0.0);
        let bad = [f32::NAN, 1.0, 1.0];
        let before = p.clone();
        assert_eq!(adam_step(&mut [&mut p], &[Some(&bad)], &mut s, 0.01).unwrap(), 1);
        assert_eq!(p, before);
        assert_eq!(s.skipped, 1);
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    fn tiny_ae() -> AutoencoderWeights {
        AutoencoderWeights::init(ModelConfig::new(4, 6, 2, vec![0.0, 100.0]), 5).unwrap()
    }

    #[test]
    fn zero_lambda_loss_is_rate_and_identity_distortion_is_zero() {
        let w = tiny_ae();
        let x = synth_sequence(SequenceKind::Zoom, 1, 16, 16, 1).unwrap()[0].to_tensor();
        let (l, r, d) = loss_i(&x, &[0], &w, Distortion::Mse, 3).unwrap();
        assert!((l - r).abs() < 1e-9 && d > 0.0);
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.constant(x);
        let m = ms_ssim_graph(&mut g, a, b, 1).unwrap();
        assert!((g.scalar(m) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn graph_ms_ssim_matches_the_metric() {
        let s = synth_sequence(SequenceKind::Translate { step: 3 }, 2, 48, 48, 9).unwrap();
        let want = crate::metrics::ms_ssim(&s[0], &s[1], 3).unwrap();
        let mut g = Graph::new();
        let a = g.constant(s[0].to_tensor());
        let b = g.constant(s[1].to_tensor());
        let m = ms_ssim_graph(&mut g, a, b, 3).unwrap();
        assert!((g.scalar(m) as f64 - want).abs() < 1e-3, "{} vs {want}", g.scalar(m));
    }

    #[test]
    fn image_training_is_deterministic_and_logs_every_step() {
        let frames = synth_sequence(SequenceKind::Zoom, 2, 20, 20, 2).unwrap();
        let mut cfg = TrainConfig::desk(vec![0.0, 100.0], 3);
        cfg.patch_h = 16;
        cfg.patch_w = 16;
        cfg.batch_size = 2;
        let mut log = Vec::new();
        let a = train_image_model(
            &frames,
            tiny_ae(),
            &cfg,
            &mut TrainSink {
                log: Some(&mut log),
                ..Default::default()
            },
        )
        .unwrap();
        let b = train_image_model(&frames, tiny_ae(), &cfg, &mut TrainSink::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, tiny_ae());
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("iteration,lr,loss,R,D\n0,"));
        assert!(matches!(
            train_image_model(&[], tiny_ae(), &cfg, &mut TrainSink::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn stem_training_leaves_the_auto_encoder_untouched() {
        let ae = tiny_ae();
        let before = ae.to_named().to_bytes();
        let clip = synth_sequence(SequenceKind::Translate { step: 1 }, 4, 16, 16, 2).unwrap();
        let mut cfg = TrainConfig::desk(vec![0.0, 100.0], 2);
        cfg.patch_h = 16;
        cfg.patch_w = 16;
        cfg.batch_size = 2;
        let init = StemWeights::init(4, 1).unwrap();
        let out = train_stem(&[clip], &ae, init.clone(), &cfg, StemFlags::FULL, &mut TrainSink::default()).unwrap();
        assert_ne!(out, init);
        assert_eq!(ae.to_named().to_bytes(), before);
    }

    #[test]
    fn inter_loss_ignores_the_synthesis_transform() {
        let mut ae = tiny_ae();
        let stem = StemWeights::init(4, 3).unwrap();
        let clip = synth_sequence(SequenceKind::Translate { step: 1 }, 2, 16, 16, 4).unwrap();
        let patches: Vec<Tensor> = clip.iter().map(RgbFrame::to_tensor).collect();
        let before = {
            let l = frozen_latents(&patches, 1, &ae).unwrap();
            let (p, c) = split_pairs(&l).unwrap();
            loss_p(&c, &p, StemFlags::FULL, &stem, Some(1)).unwrap()
        };
        for l in &mut ae.synthesis {
            l.kernel.data_mut().iter_mut().for_each(|v| *v *= -3.0);
        }
        let l = frozen_latents(&patches, 1, &ae).unwrap();
        let (p, c) = split_pairs(&l).unwrap();
        assert_eq!(loss_p(&c, &p, StemFlags::FULL, &stem, Some(1)).unwrap(), before);
        assert!(before >= 0.0);
    }
}
