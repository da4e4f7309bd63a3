use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfvc_core::codec::{AutoencoderWeights, ModelConfig};
use mfvc_core::stem::StemWeights;
use mfvc_core::video::{read_raw_frames, synth_sequence, write_raw_frames, SequenceKind};

struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let s = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let ae = AutoencoderWeights::init(ModelConfig::new(4, 6, 2, vec![2.0, 8.0]), 1).unwrap();
        ae.to_named().save(&s.path("ae.bin")).unwrap();
        StemWeights::init(4, 2).unwrap().to_named().save(&s.path("stem.bin")).unwrap();
        StemWeights::init(4, 3).unwrap().to_named().save(&s.path("other.bin")).unwrap();
        let frames = synth_sequence(SequenceKind::Translate { step: 0 }, 6, 18, 22, 5).unwrap();
        write_raw_frames(std::fs::File::create(s.path("static.rgb")).unwrap(), &frames).unwrap();
        let moving = synth_sequence(SequenceKind::Translate { step: 1 }, 6, 16, 16, 6).unwrap();
        write_raw_frames(std::fs::File::create(s.path("moving.rgb")).unwrap(), &moving).unwrap();
        s
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mfvc"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

const MODELS: [&str; 4] = ["--weights", "ae.bin", "--stem-weights", "stem.bin"];

fn compress_static(s: &Setup) {
    let mut args = vec![
        "compress",
        "--input",
        "static.rgb",
        "--width",
        "22",
        "--height",
        "18",
        "--gop-size",
        "4",
        "--output",
        "out.mfvc",
    ];
    args.extend(MODELS);
    ok(s.run(&args));
}

#[test]
fn compress_decompress_eval_keeps_quality_constant() {
    let s = Setup::new();
    compress_static(&s);
    let mut args = vec!["decompress", "--input", "out.mfvc", "--output", "dec.rgb"];
    args.extend(MODELS);
    ok(s.run(&args));
    let dec = read_raw_frames(std::fs::File::open(s.path("dec.rgb")).unwrap(), 22, 18, None).unwrap();
    assert_eq!(dec.len(), 6);
    assert!(dec.iter().all(|f| *f == dec[0]));

    let mut args = vec!["eval", "--input", "out.mfvc", "--reference", "static.rgb", "--output", "eval.csv"];
    args.extend(MODELS);
    ok(s.run(&args));
    let csv = std::fs::read_to_string(s.path("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame_index,frame_type,bits,bpp,psnr,ms_ssim"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let types: String = rows.iter().map(|r| r[1]).collect();
    assert_eq!(types, "IPPPIP");
    assert!(rows.iter().all(|r| r[4] == rows[0][4] && r[5] == rows[0][5]));
}

#[test]
fn wrong_weights_fail_with_digest_message() {
    let s = Setup::new();
    compress_static(&s);
    let o = s.run(&[
        "decompress",
        "--input",
        "out.mfvc",
        "--output",
        "dec.rgb",
        "--weights",
        "ae.bin",
        "--stem-weights",
        "other.bin",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("digest"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let s = Setup::new();
    assert_eq!(s.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(s.run(&["compress", "--no-such-flag", "1"]).status.code(), Some(2));
    let o = s.run(&["compress", "--input", "static.rgb"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--output"), "{}", stderr(&o));
    assert_eq!(s.run(&["compress", "--gop-size", "many"]).status.code(), Some(2));
}

#[test]
fn io_errors_exit_with_one_and_name_the_path() {
    let s = Setup::new();
    let mut args = vec![
        "compress",
        "--input",
        "missing.rgb",
        "--width",
        "22",
        "--height",
        "18",
        "--output",
        "x.mfvc",
    ];
    args.extend(MODELS);
    let o = s.run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.rgb"));
}

#[test]
fn config_file_supplies_options_and_flags_override_it() {
    let s = Setup::new();
    std::fs::write(
        s.path("run.cfg"),
        "# shared settings\ninput = static.rgb\nwidth = 22\nheight = 18\nweights = ae.bin\nstem_weights = stem.bin\ngop_size = 12\noutput = a.mfvc\n",
    )
    .unwrap();
    ok(s.run(&["compress", "--config", "run.cfg"]));
    ok(s.run(&["compress", "--config", "run.cfg", "--gop-size", "1", "--output", "b.mfvc"]));
    let a = std::fs::read(s.path("a.mfvc")).unwrap();
    let b = std::fs::read(s.path("b.mfvc")).unwrap();
    assert_eq!((a[17], b[17]), (12, 1));
    std::fs::write(s.path("bad.cfg"), "gop_size = 3\ncolour = red\n").unwrap();
    let o = s.run(&["compress", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2") && stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn training_commands_write_loadable_weights() {
    let s = Setup::new();
    let common = [
        "--input",
        "moving.rgb",
        "--width",
        "16",
        "--height",
        "16",
        "--iters",
        "2",
        "--batch-size",
        "2",
        "--patch-h",
        "16",
        "--patch-w",
        "16",
    ];
    let mut args = vec![
        "train-image",
        "--latent-channels",
        "4",
        "--hidden-channels",
        "4",
        "--lambdas",
        "1,4",
        "--output",
        "t_ae.bin",
        "--log",
        "t.csv",
    ];
    args.extend(common);
    ok(s.run(&args));
    assert_eq!(std::fs::read_to_string(s.path("t.csv")).unwrap().lines().count(), 3);
    let mut args = vec![
        "train-stem",
        "--weights",
        "t_ae.bin",
        "--output",
        "t_stem.bin",
        "--clip-len",
        "3",
        "--use-tpm",
        "false",
    ];
    args.extend(common);
    ok(s.run(&args));
    assert!(StemWeights::from_named(&mfvc_core::weights::NamedTensors::load(&s.path("t_stem.bin")).unwrap()).is_ok());
}

#[test]
fn ablate_and_heatmap_report() {
    let s = Setup::new();
    let mut args = vec![
        "ablate",
        "--input",
        "moving.rgb",
        "--width",
        "16",
        "--height",
        "16",
        "--gop-size",
        "6",
    ];
    args.extend(MODELS);
    let out = String::from_utf8(ok(s.run(&args)).stdout).unwrap();
    let names: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["all intra", "full", "w/o SPM", "w/o SPM & TPM", "w/o residual"]);

    let mut args = vec![
        "heatmap",
        "--input",
        "moving.rgb",
        "--width",
        "16",
        "--height",
        "16",
        "--frame-index",
        "2",
        "--output",
        "map",
    ];
    args.extend(MODELS);
    ok(s.run(&args));
    let pgm = std::fs::read(s.path("map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(std::fs::read_to_string(s.path("map.csv")).unwrap().lines().count(), 16);
    assert!(Path::new(&s.path("map.csv")).exists());
}
