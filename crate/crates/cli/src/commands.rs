use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use mfvc_core::codec::{AutoencoderWeights, ModelConfig};
use mfvc_core::metrics::{bpp, entropy_heatmap, ms_ssim_auto, psnr, write_eval_csv, FrameEval};
use mfvc_core::stem::{p_frame_rate, StemFlags, StemWeights};
use mfvc_core::train::{Distortion, TrainConfig, TrainSink};
use mfvc_core::video::{
    compress_video, frame_latents, read_raw_frames, write_raw_frames, GopConfig, RgbFrame, VideoBitstream, VideoDecoder,
};
use mfvc_core::weights::NamedTensors;

use crate::config::CliConfig;

pub enum Failure {
    /// Bad or missing options; exit status 2.
    Usage(String),
    /// Anything that went wrong while doing the work; exit status 1.
    Io(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Io(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn need<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T, Failure> {
    v.as_ref()
        .ok_or_else(|| Failure::Usage(format!("missing required option --{}", key.replace('_', "-"))))
}

fn flags(cfg: &CliConfig) -> StemFlags {
    StemFlags {
        use_spm: cfg.use_spm,
        use_tpm: cfg.use_tpm,
        use_residual: cfg.use_residual,
    }
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn read_frames(cfg: &CliConfig) -> Result<Vec<RgbFrame>, Failure> {
    let input = need(&cfg.input, "input")?;
    let (w, h) = (*need(&cfg.width, "width")?, *need(&cfg.height, "height")?);
    let frames = read_raw_frames(open(input)?, w, h, cfg.frames).with_context(|| format!("reading {}", input.display()))?;
    Ok(frames)
}

fn load_named(path: &Path) -> anyhow::Result<NamedTensors> {
    NamedTensors::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn load_ae(cfg: &CliConfig) -> Result<AutoencoderWeights, Failure> {
    let p = need(&cfg.weights, "weights")?;
    Ok(AutoencoderWeights::from_named(&load_named(p)?).with_context(|| format!("in {}", p.display()))?)
}

fn load_stem(path: &Path) -> Result<StemWeights, Failure> {
    Ok(StemWeights::from_named(&load_named(path)?).with_context(|| format!("in {}", path.display()))?)
}

fn train_config(cfg: &CliConfig, lambdas: Vec<f32>) -> Result<TrainConfig, Failure> {
    let mut t = TrainConfig::desk(lambdas, cfg.iters);
    t.batch_size = cfg.batch_size;
    t.patch_h = cfg.patch_h;
    t.patch_w = cfg.patch_w;
    t.lr_values = cfg.lr_values.clone();
    match &cfg.lr_boundaries {
        Some(b) => t.lr_boundaries = b.clone(),
        None if t.lr_values.len() != t.lr_boundaries.len() => {
            return Err(Failure::Usage("--lr-boundaries is required with a custom --lr-values list".into()))
        }
        None => {}
    }
    t.distortion = match cfg.distortion.as_str() {
        "mse" => Distortion::Mse,
        "ms-ssim" => Distortion::MsSsim { scales: 3 },
        d => return Err(Failure::Usage(format!("--distortion must be mse or ms-ssim, got `{d}`"))),
    };
    t.seed = cfg.seed;
    t.pair_span = cfg.pair_span;
    Ok(t)
}

fn sink<'a>(cfg: &CliConfig, log: &'a mut Option<BufWriter<File>>, out: &Path) -> TrainSink<'a> {
    TrainSink {
        log: log.as_mut().map(|w| w as &mut dyn Write),
        checkpoint: Some(out.to_path_buf()),
        checkpoint_every: cfg.checkpoint_every,
    }
}

fn open_log(cfg: &CliConfig) -> anyhow::Result<Option<BufWriter<File>>> {
    cfg.log.as_deref().map(create).transpose()
}

pub fn train_image(cfg: &CliConfig) -> Outcome {
    let out = need(&cfg.output, "output")?;
    let frames = read_frames(cfg)?;
    let model = ModelConfig::new(cfg.latent_channels, cfg.hidden_channels, cfg.stages, cfg.lambdas.clone());
    model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let tcfg = train_config(cfg, cfg.lambdas.clone())?;
    tcfg.validate(model.downsample_factor())
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let init = AutoencoderWeights::init(model, cfg.seed)?;
    let mut log = open_log(cfg)?;
    let w = mfvc_core::train::train_image_model(&frames, init, &tcfg, &mut sink(cfg, &mut log, out))?;
    w.to_named().save(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    eprintln!(
        "trained {} iterations on {} frames; weights in {}",
        tcfg.total_iters,
        frames.len(),
        out.display()
    );
    Ok(())
}

pub fn train_stem(cfg: &CliConfig) -> Outcome {
    let out = need(&cfg.output, "output")?;
    let ae = load_ae(cfg)?;
    let frames = read_frames(cfg)?;
    if cfg.clip_len < 2 {
        return Err(Failure::Usage("--clip-len must be at least 2".into()));
    }
    let clips: Vec<Vec<RgbFrame>> = frames
        .chunks(cfg.clip_len)
        .filter(|c| c.len() >= 2)
        .map(<[RgbFrame]>::to_vec)
        .collect();
    let tcfg = train_config(cfg, ae.config.lambdas.clone())?;
    tcfg.validate(ae.config.downsample_factor())
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let init = StemWeights::init(ae.config.latent_channels, cfg.seed)?;
    let mut log = open_log(cfg)?;
    let w = mfvc_core::train::train_stem(&clips, &ae, init, &tcfg, flags(cfg), &mut sink(cfg, &mut log, out))?;
    w.to_named().save(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    eprintln!(
        "trained {} iterations on {} clips ({}); weights in {}",
        tcfg.total_iters,
        clips.len(),
        flags(cfg),
        out.display()
    );
    Ok(())
}

fn gop(cfg: &CliConfig) -> GopConfig {
    GopConfig {
        gop_size: cfg.gop_size,
        rate_index: cfg.rate_index,
        flags: flags(cfg),
    }
}

fn check_gop(cfg: &CliConfig, ae: &AutoencoderWeights) -> Outcome {
    gop(cfg).validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if cfg.rate_index >= ae.config.lambdas.len() {
        return Err(Failure::Usage(format!(
            "--rate-index {} outside the model's {} rates",
            cfg.rate_index,
            ae.config.lambdas.len()
        )));
    }
    Ok(())
}

pub fn compress(cfg: &CliConfig) -> Outcome {
    let out = need(&cfg.output, "output")?;
    let ae = load_ae(cfg)?;
    let stem = load_stem(need(&cfg.stem_weights, "stem_weights")?)?;
    check_gop(cfg, &ae)?;
    let frames = read_frames(cfg)?;
    let stream = compress_video(&frames, &ae, &stem, &gop(cfg))?;
    let bytes = stream.to_bytes();
    std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    let f = &frames[0];
    eprintln!(
        "{} frames, {} bytes, {:.4} bpp",
        frames.len(),
        bytes.len(),
        bpp(stream.total_bits(), f.width(), f.height(), frames.len())
    );
    Ok(())
}

fn read_stream(cfg: &CliConfig) -> Result<Vec<u8>, Failure> {
    let p = need(&cfg.input, "input")?;
    Ok(std::fs::read(p).with_context(|| format!("cannot read {}", p.display()))?)
}

pub fn decompress(cfg: &CliConfig) -> Outcome {
    let out = need(&cfg.output, "output")?;
    let ae = load_ae(cfg)?;
    let stem = load_stem(need(&cfg.stem_weights, "stem_weights")?)?;
    let bytes = read_stream(cfg)?;
    let decoder = VideoDecoder::new(&bytes, &ae, &stem)?;
    let mut w = create(out)?;
    let mut n = 0;
    // Frames are written as they decode, so a damaged chunk still leaves
    // every earlier frame on disk.
    for d in decoder {
        write_raw_frames(&mut w, &[d?.frame])?;
        n += 1;
    }
    w.flush()?;
    eprintln!("decoded {n} frames into {}", out.display());
    Ok(())
}

pub fn eval(cfg: &CliConfig) -> Outcome {
    let ae = load_ae(cfg)?;
    let stem = load_stem(need(&cfg.stem_weights, "stem_weights")?)?;
    let bytes = read_stream(cfg)?;
    let stream = VideoBitstream::parse(&bytes)?;
    let h = &stream.header;
    let (w, ht, n) = (h.width as usize, h.height as usize, h.frame_count as usize);
    let rp = need(&cfg.reference, "reference")?;
    let reference = read_raw_frames(open(rp)?, w, ht, Some(n)).with_context(|| format!("reading {}", rp.display()))?;
    let mut rows = Vec::with_capacity(n);
    for (i, (d, chunk)) in VideoDecoder::new(&bytes, &ae, &stem)?.zip(&stream.chunks).enumerate() {
        let d = d?;
        rows.push(FrameEval {
            frame_index: i,
            frame_type: d.frame_type,
            bits: chunk.bits(),
            bpp: bpp(chunk.bits(), w, ht, 1),
            psnr: psnr(&reference[i], &d.frame)?,
            ms_ssim: ms_ssim_auto(&reference[i], &d.frame)?,
        });
    }
    match &cfg.output {
        Some(p) => {
            let mut f = create(p)?;
            write_eval_csv(&mut f, &rows)?;
            f.flush()?;
        }
        None => write_eval_csv(std::io::stdout().lock(), &rows)?,
    }
    let mean = |f: fn(&FrameEval) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    eprintln!(
        "{n} frames: {:.4} bpp including header, mean PSNR {:.3} dB, mean MS-SSIM {:.5}",
        bpp(stream.total_bits(), w, ht, n),
        mean(|r| r.psnr),
        mean(|r| r.ms_ssim)
    );
    Ok(())
}

/// The ablation variants, in table order.
pub const VARIANTS: [(&str, &str, StemFlags); 4] = [
    (
        "full",
        "full.bin",
        StemFlags {
            use_spm: true,
            use_tpm: true,
            use_residual: true,
        },
    ),
    (
        "w/o SPM",
        "no_spm.bin",
        StemFlags {
            use_spm: false,
            use_tpm: true,
            use_residual: true,
        },
    ),
    (
        "w/o SPM & TPM",
        "no_spm_tpm.bin",
        StemFlags {
            use_spm: false,
            use_tpm: false,
            use_residual: true,
        },
    ),
    (
        "w/o residual",
        "no_residual.bin",
        StemFlags {
            use_spm: true,
            use_tpm: true,
            use_residual: false,
        },
    ),
];

/// Entropy-model weights per variant: a directory holds one file per
/// variant, a single file serves all of them.
fn variant_weights(path: &Path) -> Result<Vec<(PathBuf, StemWeights)>, Failure> {
    VARIANTS
        .iter()
        .map(|(_, file, _)| {
            let p = if path.is_dir() { path.join(file) } else { path.to_path_buf() };
            let w = load_stem(&p)?;
            Ok((p, w))
        })
        .collect()
}

pub fn ablate(cfg: &CliConfig) -> Outcome {
    let ae = load_ae(cfg)?;
    check_gop(cfg, &ae)?;
    let models = variant_weights(need(&cfg.stem_weights, "stem_weights")?)?;
    let frames = read_frames(cfg)?;
    let rate = ae.rate(cfg.rate_index)?;
    let latents = frame_latents(&frames, &ae, rate)?;
    let intra = GopConfig { gop_size: 1, ..gop(cfg) };
    let intra_bits: u64 = mfvc_core::video::code_latents(&latents, &ae, &models[0].1, &intra)?
        .iter()
        .map(|c| c.bits())
        .sum();
    let (w, h) = (frames[0].width(), frames[0].height());
    let mut out = std::io::stdout().lock();
    writeln!(out, "variant,bits,bpp,savings_vs_intra_percent")?;
    writeln!(out, "all intra,{intra_bits},{:.5},0.00", bpp(intra_bits, w, h, frames.len()))?;
    for ((name, _, flags), (_, stem)) in VARIANTS.iter().zip(&models) {
        let g = GopConfig { flags: *flags, ..gop(cfg) };
        let bits: u64 = mfvc_core::video::code_latents(&latents, &ae, stem, &g)?
            .iter()
            .map(|c| c.bits())
            .sum();
        let savings = 100.0 * (1.0 - bits as f64 / intra_bits as f64);
        writeln!(out, "{name},{bits},{:.5},{savings:.2}", bpp(bits, w, h, frames.len()))?;
    }
    Ok(())
}

pub fn heatmap(cfg: &CliConfig) -> Outcome {
    let out = need(&cfg.output, "output")?;
    let ae = load_ae(cfg)?;
    let stem = load_stem(need(&cfg.stem_weights, "stem_weights")?)?;
    check_gop(cfg, &ae)?;
    let frames = read_frames(cfg)?;
    let t = cfg.frame_index;
    if t == 0 || t >= frames.len() {
        return Err(Failure::Usage(format!("--frame-index must be in 1..{}", frames.len())));
    }
    let rate = ae.rate(cfg.rate_index)?;
    let latents = frame_latents(&frames[t - 1..=t], &ae, rate)?;
    let r = p_frame_rate(&latents[1], &latents[0], flags(cfg), &stem)?;
    let map = entropy_heatmap(&r.per_symbol, ae.config.downsample_factor());
    let stem_path = out.with_extension("");
    let csv = stem_path.with_extension("csv");
    let pgm = stem_path.with_extension("pgm");
    let mut f = create(&csv)?;
    map.write_csv(&mut f)?;
    f.flush()?;
    let mut f = create(&pgm)?;
    map.write_pgm(&mut f)?;
    f.flush()?;
    eprintln!(
        "frame {t}: {:.1} latent bits, {:.1} hyper bits; map {}×{} in {} and {}",
        r.y_bits,
        r.z_bits,
        map.width,
        map.height,
        csv.display(),
        pgm.display()
    );
    Ok(())
}
