//! `key = value` configuration files. Keys match the long command-line flags
//! with `_` for `-`; flags given on the command line win over the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub stem_weights: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub frames: Option<usize>,
    pub gop_size: usize,
    pub rate_index: usize,
    pub use_spm: bool,
    pub use_tpm: bool,
    pub use_residual: bool,
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub stages: usize,
    pub lambdas: Vec<f32>,
    pub iters: usize,
    pub batch_size: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub lr_values: Vec<f32>,
    pub lr_boundaries: Option<Vec<usize>>,
    pub distortion: String,
    pub pair_span: usize,
    pub clip_len: usize,
    pub checkpoint_every: usize,
    pub frame_index: usize,
    pub seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            reference: None,
            weights: None,
            stem_weights: None,
            log: None,
            width: None,
            height: None,
            frames: None,
            gop_size: 10,
            rate_index: 0,
            use_spm: true,
            use_tpm: true,
            use_residual: true,
            latent_channels: 32,
            hidden_channels: 32,
            stages: 2,
            lambdas: vec![64.0, 256.0, 1024.0],
            iters: 20_000,
            batch_size: 4,
            patch_h: 64,
            patch_w: 64,
            lr_values: vec![1e-4, 5e-5, 1e-5, 5e-6, 1e-6],
            lr_boundaries: None,
            distortion: "mse".into(),
            pair_span: 6,
            clip_len: 7,
            checkpoint_every: 1000,
            frame_index: 1,
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "input",
    "output",
    "reference",
    "weights",
    "stem_weights",
    "log",
    "width",
    "height",
    "frames",
    "gop_size",
    "rate_index",
    "use_spm",
    "use_tpm",
    "use_residual",
    "latent_channels",
    "hidden_channels",
    "stages",
    "lambdas",
    "iters",
    "batch_size",
    "patch_h",
    "patch_w",
    "lr_values",
    "lr_boundaries",
    "distortion",
    "pair_span",
    "clip_len",
    "checkpoint_every",
    "frame_index",
    "seed",
];

fn list<T: std::str::FromStr>(v: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    v.split(',').map(|s| Ok(s.trim().parse::<T>()?)).collect()
}

fn boolean(v: &str) -> anyhow::Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => bail!("expected true or false, got `{v}`"),
    }
}

impl CliConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> anyhow::Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "input" => self.input = path(),
            "output" => self.output = path(),
            "reference" => self.reference = path(),
            "weights" => self.weights = path(),
            "stem_weights" => self.stem_weights = path(),
            "log" => self.log = path(),
            "width" => self.width = Some(v.parse()?),
            "height" => self.height = Some(v.parse()?),
            "frames" => self.frames = Some(v.parse()?),
            "gop_size" => self.gop_size = v.parse()?,
            "rate_index" => self.rate_index = v.parse()?,
            "use_spm" => self.use_spm = boolean(v)?,
            "use_tpm" => self.use_tpm = boolean(v)?,
            "use_residual" => self.use_residual = boolean(v)?,
            "latent_channels" => self.latent_channels = v.parse()?,
            "hidden_channels" => self.hidden_channels = v.parse()?,
            "stages" => self.stages = v.parse()?,
            "lambdas" => self.lambdas = list(v)?,
            "iters" => self.iters = v.parse()?,
            "batch_size" => self.batch_size = v.parse()?,
            "patch_h" => self.patch_h = v.parse()?,
            "patch_w" => self.patch_w = v.parse()?,
            "lr_values" => self.lr_values = list(v)?,
            "lr_boundaries" => self.lr_boundaries = Some(list(v)?),
            "distortion" => self.distortion = v.to_string(),
            "pair_span" => self.pair_span = v.parse()?,
            "clip_len" => self.clip_len = v.parse()?,
            "checkpoint_every" => self.checkpoint_every = v.parse()?,
            "frame_index" => self.frame_index = v.parse()?,
            "seed" => self.seed = v.parse()?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {line_no}: expected `key = value`, got `{line}`");
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                bail!("line {line_no}: unknown key `{key}`");
            }
            if !seen.insert(key.to_string()) {
                bail!("line {line_no}: duplicate key `{key}`");
            }
            cfg.set(key, value)
                .with_context(|| format!("line {line_no}: bad value for `{key}`"))?;
        }
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> anyhow::Result<CliConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    CliConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(CliConfig::parse("").unwrap(), CliConfig::default());
        assert_eq!(CliConfig::parse("# only a comment\n\n").unwrap(), CliConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let c = CliConfig::parse("gop_size = 12\nuse_tpm = off # inline\nlambdas = 1, 2.5\n").unwrap();
        assert_eq!(c.gop_size, 12);
        assert!(!c.use_tpm);
        assert_eq!(c.lambdas, [1.0, 2.5]);
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = format!("{:#}", CliConfig::parse("seed = 1\nbogus = 3\n").unwrap_err());
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = format!("{:#}", CliConfig::parse("seed = 1\nseed = 2\n").unwrap_err());
        assert!(e.contains("duplicate") && e.contains("seed"), "{e}");
        let e = format!("{:#}", CliConfig::parse("\n\ngop_size = x\n").unwrap_err());
        assert!(e.contains("line 3") && e.contains("gop_size"), "{e}");
        assert!(CliConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        for k in KEYS {
            let v = match *k {
                "use_spm" | "use_tpm" | "use_residual" => "false",
                "lambdas" | "lr_values" | "lr_boundaries" => "1,2",
                "distortion" => "mse",
                _ => "3",
            };
            CliConfig::default().set(k, v).unwrap();
        }
    }
}
