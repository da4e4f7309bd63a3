//! Discretized Laplacian likelihoods.
//!
//! The probability of the unit bin around `x` is `F(x + ½) − F(x − ½)` with
//! `F` the Laplacian CDF. Tails are evaluated in log space so far-off bins
//! keep finite, accurate code lengths.

use std::f64::consts::LN_2;

pub const LOG_SCALE_MIN: f64 = -6.0;
pub const LOG_SCALE_MAX: f64 = 6.0;

pub fn clamp_log_scale(s: f64) -> f64 {
    s.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)
}

/// Laplacian CDF with location `mu` and scale `b`.
pub fn cdf(x: f64, mu: f64, b: f64) -> f64 {
    let d = x - mu;
    if d < 0.0 {
        0.5 * (d / b).exp()
    } else {
        1.0 - 0.5 * (-d / b).exp()
    }
}

/// Natural log of the probability mass of `[x − ½, x + ½]`.
pub fn log_interval_prob(x: f64, mu: f64, log_scale: f64) -> f64 {
    let s = clamp_log_scale(log_scale);
    let inv_b = (-s).exp();
    let lo = x - 0.5 - mu;
    let hi = x + 0.5 - mu;
    // ln(1 − e^{−1/b}), the width factor shared by both tails.
    let width = (-(-inv_b).exp_m1()).ln();
    if lo >= 0.0 {
        0.5f64.ln() - lo * inv_b + width
    } else if hi <= 0.0 {
        0.5f64.ln() + hi * inv_b + width
    } else {
        let p = 1.0 - 0.5 * (lo * inv_b).exp() - 0.5 * (-hi * inv_b).exp();
        p.ln()
    }
}

pub fn interval_prob(x: f64, mu: f64, log_scale: f64) -> f64 {
    log_interval_prob(x, mu, log_scale).exp()
}

/// Code length in bits of the bin around `x`.
pub fn interval_bits(x: f64, mu: f64, log_scale: f64) -> f64 {
    -log_interval_prob(x, mu, log_scale) / LN_2
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitsGrad {
    pub dx: f64,
    pub dmu: f64,
    pub dlog_scale: f64,
}

/// Partial derivatives of [`interval_bits`]. The log-scale derivative is
/// zero where the clamp is active.
pub fn interval_bits_grad(x: f64, mu: f64, log_scale: f64) -> BitsGrad {
    let clamped = !(LOG_SCALE_MIN..=LOG_SCALE_MAX).contains(&log_scale);
    let s = clamp_log_scale(log_scale);
    let inv_b = (-s).exp();
    let lo = x - 0.5 - mu;
    let hi = x + 0.5 - mu;
    let width_ds = -inv_b / inv_b.exp_m1();
    // Derivatives of ln p.
    let (dx, dmu, ds) = if lo >= 0.0 {
        (-inv_b, inv_b, lo * inv_b + width_ds)
    } else if hi <= 0.0 {
        (inv_b, -inv_b, -hi * inv_b + width_ds)
    } else {
        let a = 0.5 * (lo * inv_b).exp();
        let b = 0.5 * (-hi * inv_b).exp();
        let p = 1.0 - a - b;
        ((b - a) * inv_b / p, (a - b) * inv_b / p, (a * lo - b * hi) * inv_b / p)
    };
    BitsGrad {
        dx: -dx / LN_2,
        dmu: -dmu / LN_2,
        dlog_scale: if clamped { 0.0 } else { -ds / LN_2 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cdf_prob(x: f64, mu: f64, s: f64) -> f64 {
        let b = s.exp();
        cdf(x + 0.5, mu, b) - cdf(x - 0.5, mu, b)
    }

    #[test]
    fn closed_form_values() {
        let p0 = interval_prob(0.0, 0.0, 0.0);
        assert!((p0 - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((p0 - 0.39347).abs() < 1e-4);
        let p1 = interval_prob(1.0, 0.0, 0.0);
        let expect = 0.5 * (-0.5f64).exp() - 0.5 * (-1.5f64).exp();
        assert!((p1 - expect).abs() < 1e-12);
        assert!((p1 - 0.19170).abs() < 1e-4);
    }

    #[test]
    fn log_space_agrees_with_cdf_difference() {
        for &(x, mu, s) in &[
            (0.0, 0.3, -1.0),
            (3.0, -0.7, 0.5),
            (-4.0, 1.2, 1.3),
            (0.2, 0.1, 4.0),
            (10.0, 0.0, -2.0),
        ] {
            let a = interval_prob(x, mu, s);
            let b = cdf_prob(x, mu, s);
            assert!((a - b).abs() <= 1e-12 + 1e-9 * b, "{x} {mu} {s}: {a} vs {b}");
        }
    }

    #[test]
    fn symmetric_around_zero_mean() {
        for k in 0..20 {
            let (a, b) = (interval_prob(k as f64, 0.0, 0.7), interval_prob(-(k as f64), 0.0, 0.7));
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-6;
        for &(x, mu, s) in &[
            (0.0, 0.2, -0.5),
            (2.0, 0.1, 0.3),
            (-3.0, 0.4, 1.0),
            (0.4, 0.0, 2.0),
            (5.0, -1.0, -1.0),
        ] {
            let g = interval_bits_grad(x, mu, s);
            let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
            let dx = fd(&|e| interval_bits(x + e, mu, s));
            let dm = fd(&|e| interval_bits(x, mu + e, s));
            let ds = fd(&|e| interval_bits(x, mu, s + e));
            for (a, n) in [(g.dx, dx), (g.dmu, dm), (g.dlog_scale, ds)] {
                assert!((a - n).abs() <= 1e-5 * (1.0 + n.abs()), "{x} {mu} {s}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn far_tail_stays_finite() {
        let bits = interval_bits(200.0, 0.0, -6.0);
        assert!(bits.is_finite() && bits > 1000.0);
    }
}
