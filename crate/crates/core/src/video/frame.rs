//! 8-bit RGB frames, raw frame-sequential IO and synthetic test sequences.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Interleaved row-major RGB, one byte per sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_err("RgbFrame::new", "byte count", width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `(1, 3, H, W)` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([1, 3, self.height, self.width], |[_, c, y, x]| {
            self.data[(y * self.width + x) * 3 + c] as f32 / 255.0
        })
    }

    /// Rounds a `(1, 3, H, W)` tensor in `[0, 1]` to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [b, c, h, w] = t.shape();
        if b != 1 || c != 3 {
            return Err(shape_err(
                "RgbFrame::from_tensor",
                if b != 1 { "batch" } else { "channels" },
                if b != 1 { 1 } else { 3 },
                if b != 1 { b } else { c },
            ));
        }
        Ok(Self::from_fn(w, h, |x, y| {
            std::array::from_fn(|ch| (t.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8)
        }))
    }

    /// Extends to multiples of `factor` by replicating the last row and column.
    pub fn pad_edge(&self, factor: usize) -> Self {
        let (w, h) = (self.width.next_multiple_of(factor), self.height.next_multiple_of(factor));
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        Self::from_fn(w, h, |x, y| self.pixel(x.min(self.width - 1), y.min(self.height - 1)))
    }

    /// Top-left `width × height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::Config(format!(
                "cannot crop {}×{} to {width}×{height}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| self.pixel(x, y)))
    }

    /// Window of `width × height` at `(x0, y0)`.
    pub fn window(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Config(format!(
                "window {width}×{height} at ({x0}, {y0}) exceeds {}×{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| self.pixel(x0 + x, y0 + y)))
    }
}

/// Reads `frames` raw frames (all of them when `None`) of `width × height`.
pub fn read_raw_frames(mut r: impl Read, width: usize, height: usize, frames: Option<usize>) -> Result<Vec<RgbFrame>> {
    if width == 0 || height == 0 {
        return Err(Error::Config("frame dimensions must be positive".into()));
    }
    let size = width * height * 3;
    let mut buf = Vec::new();
    match frames {
        Some(n) => {
            buf.resize(n * size, 0);
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Format(format!("input holds fewer than {n} frames of {width}×{height}")),
                _ => Error::Io(e),
            })?;
        }
        None => {
            r.read_to_end(&mut buf)?;
            if buf.is_empty() || buf.len() % size != 0 {
                return Err(Error::Format(format!(
                    "input length {} is not a positive multiple of the {size}-byte frame size",
                    buf.len()
                )));
            }
        }
    }
    buf.chunks_exact(size).map(|c| RgbFrame::new(width, height, c.to_vec())).collect()
}

pub fn write_raw_frames(mut w: impl Write, frames: &[RgbFrame]) -> Result<()> {
    for f in frames {
        w.write_all(f.data())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceKind {
    /// Content moving `step` pixels right and `step / 2` down per frame.
    Translate { step: usize },
    /// Content magnified about the centre by 3% per frame.
    Zoom,
    /// Fixed content plus fresh Gaussian noise each frame.
    NoiseStatic,
}

/// A smooth-plus-edges colour texture defined on the whole plane.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: Vec<[f64; 5]>,
    shapes: Vec<([f64; 4], [f64; 3])>,
    base: [f64; 3],
}

impl Texture {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..9)
            .map(|i| {
                let period = rng.gen_range(6.0..40.0);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                [
                    k * angle.cos(),
                    k * angle.sin(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(15.0..35.0),
                    (i % 3) as f64,
                ]
            })
            .collect();
        let shapes = (0..24)
            .map(|_| {
                let (cx, cy) = (rng.gen_range(-64.0..192.0), rng.gen_range(-64.0..192.0));
                let r = rng.gen_range(4.0..18.0);
                let square = rng.gen_bool(0.5) as u8 as f64;
                ([cx, cy, r, square], std::array::from_fn(|_| rng.gen_range(-60.0..60.0)))
            })
            .collect();
        let base = std::array::from_fn(|_| rng.gen_range(90.0..160.0));
        Self { waves, shapes, base }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut v = self.base;
        for w in &self.waves {
            let s = w[3] * (w[0] * x + w[1] * y + w[2]).sin();
            v[w[4] as usize] += s;
            v[(w[4] as usize + 1) % 3] += 0.5 * s;
        }
        // Shapes tile with period 256 so content never runs out.
        let (px, py) = (x.rem_euclid(256.0), y.rem_euclid(256.0));
        for ([cx, cy, r, square], col) in &self.shapes {
            let (dx, dy) = (
                (px - cx).abs().min(256.0 - (px - cx).abs()),
                (py - cy).abs().min(256.0 - (py - cy).abs()),
            );
            let inside = if *square == 1.0 {
                dx.max(dy) < *r
            } else {
                dx * dx + dy * dy < r * r
            };
            if inside {
                for c in 0..3 {
                    v[c] += col[c];
                }
            }
        }
        v
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Deterministic synthetic sequence of `n_frames` frames of `w × h`.
pub fn synth_sequence(kind: SequenceKind, n_frames: usize, h: usize, w: usize, seed: u64) -> Result<Vec<RgbFrame>> {
    if h == 0 || w == 0 {
        return Err(Error::Config("frame dimensions must be positive".into()));
    }
    let tex = Texture::random(seed);
    let frames = match kind {
        SequenceKind::Translate { step } => (0..n_frames)
            .map(|t| {
                let (ox, oy) = ((t * step) as f64, (t * step / 2) as f64);
                RgbFrame::from_fn(w, h, |x, y| tex.sample(x as f64 - ox, y as f64 - oy).map(to_u8))
            })
            .collect(),
        SequenceKind::Zoom => {
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            (0..n_frames)
                .map(|t| {
                    let s = 1.03f64.powi(t as i32);
                    RgbFrame::from_fn(w, h, |x, y| {
                        tex.sample(cx + (x as f64 - cx) / s, cy + (y as f64 - cy) / s).map(to_u8)
                    })
                })
                .collect()
        }
        SequenceKind::NoiseStatic => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let noise = Normal::new(0.0, 4.0).expect("valid sigma");
            (0..n_frames)
                .map(|_| {
                    RgbFrame::from_fn(w, h, |x, y| {
                        tex.sample(x as f64, y as f64).map(|v| to_u8(v + noise.sample(&mut rng)))
                    })
                })
                .collect()
        }
    };
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_exact() {
        let f = synth_sequence(SequenceKind::Zoom, 1, 9, 13, 1).unwrap().remove(0);
        assert_eq!(RgbFrame::from_tensor(&f.to_tensor()).unwrap(), f);
    }

    #[test]
    fn padding_replicates_edges_and_crops_back() {
        let f = synth_sequence(SequenceKind::Zoom, 1, 5, 6, 2).unwrap().remove(0);
        let p = f.pad_edge(4);
        assert_eq!((p.width(), p.height()), (8, 8));
        assert_eq!(p.pixel(7, 7), f.pixel(5, 4));
        assert_eq!(p.pixel(6, 2), f.pixel(5, 2));
        assert_eq!(p.crop(6, 5).unwrap(), f);
        assert_eq!(f.pad_edge(1), f);
    }

    #[test]
    fn translate_with_zero_step_is_static() {
        let s = synth_sequence(SequenceKind::Translate { step: 0 }, 4, 16, 16, 3).unwrap();
        assert!(s.iter().all(|f| *f == s[0]));
    }

    #[test]
    fn translate_shifts_exactly() {
        let s = synth_sequence(SequenceKind::Translate { step: 2 }, 3, 20, 24, 4).unwrap();
        for t in 0..2 {
            for y in 0..19 {
                for x in 0..22 {
                    assert_eq!(s[t + 1].pixel(x + 2, y + 1), s[t].pixel(x, y));
                }
            }
        }
        assert_ne!(s[0], s[1]);
    }

    #[test]
    fn sequences_are_seeded() {
        for kind in [SequenceKind::Translate { step: 1 }, SequenceKind::Zoom, SequenceKind::NoiseStatic] {
            assert_eq!(synth_sequence(kind, 3, 8, 8, 5).unwrap(), synth_sequence(kind, 3, 8, 8, 5).unwrap());
            assert_ne!(synth_sequence(kind, 3, 8, 8, 5).unwrap(), synth_sequence(kind, 3, 8, 8, 6).unwrap());
        }
        let n = synth_sequence(SequenceKind::NoiseStatic, 2, 8, 8, 5).unwrap();
        assert_ne!(n[0], n[1]);
    }

    #[test]
    fn raw_io_roundtrip() {
        let s = synth_sequence(SequenceKind::Translate { step: 1 }, 3, 4, 5, 7).unwrap();
        let mut buf = Vec::new();
        write_raw_frames(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 3 * 4 * 5 * 3);
        assert_eq!(read_raw_frames(&buf[..], 5, 4, None).unwrap(), s);
        assert_eq!(read_raw_frames(&buf[..], 5, 4, Some(2)).unwrap(), s[..2]);
        assert!(read_raw_frames(&buf[..], 5, 4, Some(4)).is_err());
        assert!(read_raw_frames(&buf[..buf.len() - 1], 5, 4, None).is_err());
    }
}
