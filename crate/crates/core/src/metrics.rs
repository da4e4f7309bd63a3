//! PSNR, MS-SSIM, bits per pixel, BD-rate and entropy heat maps.

use std::io::Write;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::video::{FrameType, RgbFrame};

pub const PSNR_CAP: f64 = 99.0;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_dims(op: &'static str, a: &RgbFrame, b: &RgbFrame) -> Result<()> {
    if a.width() != b.width() {
        return Err(shape_err(op, "width", a.width(), b.width()));
    }
    if a.height() != b.height() {
        return Err(shape_err(op, "height", a.height(), b.height()));
    }
    Ok(())
}

pub fn mse(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    same_dims("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len().max(1) as f64)
}

/// Peak 255, all three channels pooled.
pub fn psnr(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn blur(&self, taps: &[f64]) -> Plane {
        let k = taps.len();
        let (wo, ho) = (self.w - k + 1, self.h - k + 1);
        let mut rows = vec![0.0; wo * self.h];
        for y in 0..self.h {
            for x in 0..wo {
                rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; wo * ho];
        for y in 0..ho {
            for x in 0..wo {
                v[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
            }
        }
        Plane { w: wo, h: ho, v }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn pool2(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.v[yy * self.w + xx];
                v.push(0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)));
            }
        }
        Plane { w, h, v }
    }
}

/// Mean luminance-times-structure and mean contrast-structure terms of SSIM.
fn ssim_terms(a: &Plane, b: &Plane, taps: &[f64]) -> (f64, f64) {
    let (c1, c2) = ((0.01 * 255.0f64).powi(2), (0.03 * 255.0f64).powi(2));
    let (ma, mb) = (a.blur(taps), b.blur(taps));
    let saa = a.map2(a, |x, y| x * y).blur(taps);
    let sbb = b.map2(b, |x, y| x * y).blur(taps);
    let sab = a.map2(b, |x, y| x * y).blur(taps);
    let n = ma.v.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (mx, my) = (ma.v[i], mb.v[i]);
        let vx = saa.v[i] - mx * mx;
        let vy = sbb.v[i] - my * my;
        let cxy = sab.v[i] - mx * my;
        let c = (2.0 * cxy + c2) / (vx + vy + c2);
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n as f64, cs / n as f64)
}

fn channel_plane(f: &RgbFrame, c: usize) -> Plane {
    Plane {
        w: f.width(),
        h: f.height(),
        v: f.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect(),
    }
}

/// Smallest frame side accepted by [`ms_ssim`] at `scales`.
pub fn ms_ssim_min_side(scales: usize) -> usize {
    (1 << (scales.max(1) - 1)) * SSIM_WINDOW
}

/// Multiscale SSIM averaged over the RGB channels. With fewer than five
/// scales the leading weights are renormalized to sum to one.
pub fn ms_ssim(a: &RgbFrame, b: &RgbFrame, scales: usize) -> Result<f64> {
    same_dims("ms_ssim", a, b)?;
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::Config(format!("MS-SSIM supports 1 to 5 scales, got {scales}")));
    }
    let min = ms_ssim_min_side(scales);
    if a.width().min(a.height()) < min {
        return Err(Error::Config(format!(
            "MS-SSIM with {scales} scales needs frames of at least {min}×{min}, got {}×{}",
            a.width(),
            a.height()
        )));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / wsum).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..3 {
        let (mut pa, mut pb) = (channel_plane(a, c), channel_plane(b, c));
        let mut value = 1.0;
        for (s, w) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&pa, &pb, &taps);
            let term = if s + 1 == scales { ssim } else { cs };
            value *= term.max(0.0).powf(*w);
            if s + 1 < scales {
                pa = pa.pool2();
                pb = pb.pool2();
            }
        }
        total += value;
    }
    Ok((total / 3.0).clamp(0.0, 1.0))
}

/// Single-scale SSIM averaged over channels.
pub fn ssim(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    ms_ssim(a, b, 1)
}

/// Header bits are part of `stream_bits` by convention.
pub fn bpp(stream_bits: u64, width: usize, height: usize, frames: usize) -> f64 {
    stream_bits as f64 / (width * height * frames) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing with at least two knots.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::Config("interpolation needs at least two matching knots".into()));
        }
        if x.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::Config("interpolation knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|p| p[1] - p[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d.fill(delta[0]);
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let (w1, w2) = (2.0 * h[i] + h[i - 1], h[i] + 2.0 * h[i - 1]);
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    fn segment(&self, t: f64) -> usize {
        let i = self.x.partition_point(|&v| v <= t);
        i.clamp(1, self.x.len() - 1) - 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (h00, h10) = (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s);
        let (h01, h11) = (-2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }

    /// Exact integral over `[a, b]` inside the knot range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let prim = |t: f64| {
            // Antiderivative of the active segment evaluated from its left knot.
            let i = self.segment(t);
            let h = self.x[i + 1] - self.x[i];
            let s = (t - self.x[i]) / h;
            let (s2, s3, s4) = (s * s, s.powi(3), s.powi(4));
            let i00 = s4 / 2.0 - s3 + s;
            let i10 = s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0;
            let i01 = -s4 / 2.0 + s3;
            let i11 = s4 / 4.0 - s3 / 3.0;
            (
                i,
                h * (i00 * self.y[i] + i10 * h * self.d[i] + i01 * self.y[i + 1] + i11 * h * self.d[i + 1]),
            )
        };
        let full = |i: usize| {
            let h = self.x[i + 1] - self.x[i];
            h * (self.y[i] + self.y[i + 1]) / 2.0 + h * h * (self.d[i] - self.d[i + 1]) / 12.0
        };
        let (ia, pa) = prim(a);
        let (ib, pb) = prim(b);
        if ia == ib {
            return pb - pa;
        }
        let mut total = full(ia) - pa + pb;
        for i in ia + 1..ib {
            total += full(i);
        }
        total
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

fn log_rate_curve(points: &[RdPoint], which: &str) -> Result<Pchip> {
    if points.len() < 4 {
        return Err(Error::Config(format!(
            "{which} curve needs at least 4 points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| !(p.bpp > 0.0) || !p.quality.is_finite()) {
        return Err(Error::Config(format!("{which} curve has an invalid point {p:?}")));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.quality.total_cmp(&b.quality));
    Pchip::new(
        sorted.iter().map(|p| p.quality).collect(),
        sorted.iter().map(|p| p.bpp.ln()).collect(),
    )
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent; negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let a = log_rate_curve(anchor, "anchor")?;
    let t = log_rate_curve(test, "test")?;
    let lo = a.x[0].max(t.x[0]);
    let hi = a.x[a.x.len() - 1].min(t.x[t.x.len() - 1]);
    if !(hi > lo) {
        return Err(Error::Config(format!("quality ranges do not overlap ({lo:.4} ≥ {hi:.4})")));
    }
    let diff = (t.integrate(lo, hi) - a.integrate(lo, hi)) / (hi - lo);
    Ok((diff.exp() - 1.0) * 100.0)
}

/// Per-pixel bits: channel sums of `per_symbol` (`(1, C, h, w)`) spread
/// uniformly over each `factor × factor` footprint. Row-major `(h·f, w·f)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<f64>,
}

pub fn entropy_heatmap(per_symbol: &Tensor, factor: usize) -> Heatmap {
    let [_, c, h, w] = per_symbol.shape();
    let (hh, ww) = (h * factor, w * factor);
    let area = (factor * factor) as f64;
    let mut bits = vec![0.0; hh * ww];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..c).map(|ci| per_symbol.at(0, ci, y, x) as f64).sum::<f64>() / area;
            for dy in 0..factor {
                for dx in 0..factor {
                    bits[(y * factor + dy) * ww + x * factor + dx] = s;
                }
            }
        }
    }
    Heatmap {
        width: ww,
        height: hh,
        bits,
    }
}

impl Heatmap {
    pub fn total(&self) -> f64 {
        self.bits.iter().sum()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        for row in self.bits.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Binary 8-bit grayscale PGM scaled so the maximum maps to 255.
    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        let max = self.bits.iter().cloned().fold(0.0, f64::max);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let px: Vec<u8> = self
            .bits
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        w.write_all(&px)?;
        Ok(())
    }
}

/// One row of the per-frame evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    pub frame_index: usize,
    pub frame_type: FrameType,
    pub bits: u64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

pub const EVAL_CSV_HEADER: &str = "frame_index,frame_type,bits,bpp,psnr,ms_ssim";

pub fn write_eval_csv(mut w: impl Write, rows: &[FrameEval]) -> Result<()> {
    writeln!(w, "{EVAL_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.4},{:.6}",
            r.frame_index,
            r.frame_type.letter(),
            r.bits,
            r.bpp,
            r.psnr,
            r.ms_ssim
        )?;
    }
    Ok(())
}

/// MS-SSIM at the largest scale count the frame size allows, at most five.
pub fn ms_ssim_auto(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    let side = a.width().min(a.height());
    let scales = (1..=5)
        .rev()
        .find(|&s| ms_ssim_min_side(s) <= side)
        .ok_or_else(|| Error::Config(format!("MS-SSIM needs frames of at least {SSIM_WINDOW}×{SSIM_WINDOW}")))?;
    ms_ssim(a, b, scales)
}
