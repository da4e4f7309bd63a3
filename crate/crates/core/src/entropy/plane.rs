//! Coding whole latent planes under a per-symbol PMF sequence.

use super::laplace;
use super::pmf::{discretize_laplacian, DiscretePmf, DEFAULT_SUPPORT_MAX, DEFAULT_SUPPORT_MIN, FREQ_BITS};
use super::range_coder::{RangeDecoder, RangeEncoder};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{LatentPlane, Tensor};

/// Longest accepted Exp-Golomb prefix; magnitudes up to 2^33.
const MAX_GOLOMB_PREFIX: u32 = 32;

/// Symbol visiting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    /// Channel, then row, then column.
    ChannelMajor,
    /// Row, then column, then channel: every channel at a position is coded
    /// before the next position.
    PositionMajor,
}

impl ScanOrder {
    pub fn positions(self, channels: usize, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(channels * height * width);
        match self {
            ScanOrder::ChannelMajor => {
                for c in 0..channels {
                    for y in 0..height {
                        for x in 0..width {
                            out.push((c, y, x));
                        }
                    }
                }
            }
            ScanOrder::PositionMajor => {
                for y in 0..height {
                    for x in 0..width {
                        for c in 0..channels {
                            out.push((c, y, x));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Supplies the PMF for each symbol. Adaptive providers learn already-coded
/// symbols through [`PmfProvider::observe`]; encoder and decoder call it in
/// the same order.
pub trait PmfProvider {
    fn order(&self) -> ScanOrder {
        ScanOrder::ChannelMajor
    }

    fn pmf(&mut self, c: usize, y: usize, x: usize) -> Result<DiscretePmf>;

    fn observe(&mut self, _c: usize, _y: usize, _x: usize, _symbol: i32) {}
}

/// The same PMF for every symbol.
pub struct FixedPmf(pub DiscretePmf);

impl PmfProvider for FixedPmf {
    fn pmf(&mut self, _c: usize, _y: usize, _x: usize) -> Result<DiscretePmf> {
        Ok(self.0.clone())
    }
}

/// One PMF per channel (the factorized hyper-latent prior).
pub struct ChannelPmfs(pub Vec<DiscretePmf>);

impl ChannelPmfs {
    pub fn laplace(mu: &[f32], log_scale: &[f32]) -> Result<Self> {
        mu.iter()
            .zip(log_scale)
            .map(|(&m, &s)| discretize_laplacian(m as f64, s as f64, DEFAULT_SUPPORT_MIN, DEFAULT_SUPPORT_MAX))
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl PmfProvider for ChannelPmfs {
    fn pmf(&mut self, c: usize, _y: usize, _x: usize) -> Result<DiscretePmf> {
        self.0
            .get(c)
            .cloned()
            .ok_or_else(|| shape_err("ChannelPmfs", "channel", self.0.len(), c + 1))
    }
}

/// Per-position Laplacian parameters held in `(1, C, H, W)` tensors.
pub struct LaplaceGrid<'a> {
    pub mu: &'a Tensor,
    pub log_scale: &'a Tensor,
    pub order: ScanOrder,
}

impl PmfProvider for LaplaceGrid<'_> {
    fn order(&self) -> ScanOrder {
        self.order
    }

    fn pmf(&mut self, c: usize, y: usize, x: usize) -> Result<DiscretePmf> {
        discretize_laplacian(
            self.mu.at(0, c, y, x) as f64,
            self.log_scale.at(0, c, y, x) as f64,
            DEFAULT_SUPPORT_MIN,
            DEFAULT_SUPPORT_MAX,
        )
    }
}

/// Range-coder output for one plane. No internal framing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedStream {
    pub bytes: Vec<u8>,
    pub symbol_count: usize,
    pub bypass_bit_count: u64,
}

impl CodedStream {
    pub fn bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }
}

/// Escape payload for a symbol outside `[lo, hi]`: sign plus the
/// Exp-Golomb-coded distance past the violated bound.
fn escape_magnitude(pmf: &DiscretePmf, symbol: i32) -> (u32, u64) {
    if symbol > pmf.support_max() {
        (0, (symbol as i64 - pmf.support_max() as i64 - 1) as u64)
    } else {
        (1, (pmf.support_min() as i64 - 1 - symbol as i64) as u64)
    }
}

fn golomb_bits(excess: u64) -> u64 {
    let m = excess + 1;
    let prefix = 63 - m.leading_zeros() as u64;
    2 * prefix + 1
}

fn write_bits(enc: &mut RangeEncoder, value: u64, nbits: u32) {
    let mut remaining = nbits;
    while remaining > 0 {
        let chunk = remaining.min(16);
        remaining -= chunk;
        enc.encode_bits(((value >> remaining) & ((1 << chunk) - 1)) as u32, chunk);
    }
}

fn read_bits(dec: &mut RangeDecoder, nbits: u32) -> Result<u64> {
    let mut value = 0u64;
    let mut remaining = nbits;
    while remaining > 0 {
        let chunk = remaining.min(16);
        remaining -= chunk;
        value = (value << chunk) | dec.decode_bits(chunk)? as u64;
    }
    Ok(value)
}

/// Codes one symbol; returns the number of bypass bits spent.
pub fn encode_symbol(enc: &mut RangeEncoder, pmf: &DiscretePmf, symbol: i32) -> Result<u64> {
    match pmf.slot_of(symbol) {
        Some(slot) => {
            let (cum, freq) = pmf.range(slot);
            enc.encode(cum, freq, FREQ_BITS);
            Ok(0)
        }
        None => {
            if pmf.overflow_freq() == 0 {
                return Err(Error::Config(format!(
                    "symbol {symbol} outside [{}, {}] and the PMF has no escape",
                    pmf.support_min(),
                    pmf.support_max()
                )));
            }
            let (cum, freq) = pmf.range(pmf.escape_slot());
            enc.encode(cum, freq, FREQ_BITS);
            let (sign, excess) = escape_magnitude(pmf, symbol);
            enc.encode_bits(sign, 1);
            let m = excess + 1;
            let prefix = 63 - m.leading_zeros();
            for _ in 0..prefix {
                enc.encode_bits(0, 1);
            }
            enc.encode_bits(1, 1);
            write_bits(enc, m, prefix);
            Ok(1 + golomb_bits(excess))
        }
    }
}

pub fn decode_symbol(dec: &mut RangeDecoder, pmf: &DiscretePmf) -> Result<i32> {
    let target = dec.target(FREQ_BITS)?;
    let slot = pmf.find(target);
    let (cum, freq) = pmf.range(slot);
    if freq == 0 {
        return Err(Error::Corrupt("decoded a zero-frequency slot".into()));
    }
    dec.consume(cum, freq, FREQ_BITS)?;
    if slot != pmf.escape_slot() {
        return Ok(pmf.symbol_of(slot));
    }
    let sign = dec.decode_bits(1)?;
    let mut prefix = 0;
    while dec.decode_bits(1)? == 0 {
        prefix += 1;
        if prefix > MAX_GOLOMB_PREFIX {
            return Err(Error::Corrupt("escape magnitude prefix too long".into()));
        }
    }
    let m = (1u64 << prefix) | read_bits(dec, prefix)?;
    let excess = (m - 1) as i64;
    let value = if sign == 0 {
        pmf.support_max() as i64 + 1 + excess
    } else {
        pmf.support_min() as i64 - 1 - excess
    };
    i32::try_from(value).map_err(|_| Error::Corrupt(format!("escaped symbol {value} out of range")))
}

/// Code length of one symbol under `pmf`, counting escape bypass bits.
pub fn symbol_bits(pmf: &DiscretePmf, symbol: i32) -> f64 {
    match pmf.slot_of(symbol) {
        Some(slot) => pmf.slot_bits(slot),
        None => {
            let (_, excess) = escape_magnitude(pmf, symbol);
            pmf.slot_bits(pmf.escape_slot()) + 1.0 + golomb_bits(excess) as f64
        }
    }
}

pub fn encode_plane(plane: &LatentPlane, provider: &mut dyn PmfProvider) -> Result<CodedStream> {
    let (c, h, w) = plane.dims();
    let mut enc = RangeEncoder::new();
    let mut bypass = 0;
    for (ci, y, x) in provider.order().positions(c, h, w) {
        let pmf = provider.pmf(ci, y, x)?;
        let symbol = plane.at(ci, y, x);
        bypass += encode_symbol(&mut enc, &pmf, symbol)?;
        provider.observe(ci, y, x, symbol);
    }
    Ok(CodedStream {
        bytes: enc.finish(),
        symbol_count: plane.len(),
        bypass_bit_count: bypass,
    })
}

pub fn decode_plane(bytes: &[u8], provider: &mut dyn PmfProvider, dims: (usize, usize, usize)) -> Result<LatentPlane> {
    let (c, h, w) = dims;
    let mut plane = LatentPlane::zeros(c, h, w);
    let mut dec = RangeDecoder::new(bytes)?;
    for (ci, y, x) in provider.order().positions(c, h, w) {
        let pmf = provider.pmf(ci, y, x)?;
        let symbol = decode_symbol(&mut dec, &pmf)?;
        let idx = plane.index(ci, y, x);
        plane.data_mut()[idx] = symbol;
        provider.observe(ci, y, x, symbol);
    }
    Ok(plane)
}

/// Ideal code length of `plane` under the provider's quantized PMFs.
pub fn plane_cross_entropy(plane: &LatentPlane, provider: &mut dyn PmfProvider) -> Result<f64> {
    let (c, h, w) = plane.dims();
    let mut bits = 0.0;
    for (ci, y, x) in provider.order().positions(c, h, w) {
        let pmf = provider.pmf(ci, y, x)?;
        let symbol = plane.at(ci, y, x);
        bits += symbol_bits(&pmf, symbol);
        provider.observe(ci, y, x, symbol);
    }
    Ok(bits)
}

/// Continuous-model code length (no frequency quantization) of a plane under
/// per-position Laplacian parameters.
pub fn laplace_plane_bits(plane: &LatentPlane, mu: &Tensor, log_scale: &Tensor) -> f64 {
    let (c, h, w) = plane.dims();
    let mut bits = 0.0;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                bits += laplace::interval_bits(
                    plane.at(ci, y, x) as f64,
                    mu.at(0, ci, y, x) as f64,
                    log_scale.at(0, ci, y, x) as f64,
                );
            }
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::pmf::FREQ_TOTAL;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut impl Rng, c: usize, h: usize, w: usize, spread: i32) -> LatentPlane {
        let data = (0..c * h * w).map(|_| rng.gen_range(-spread..=spread)).collect();
        LatentPlane::new(c, h, w, data).unwrap()
    }

    #[test]
    fn empty_plane() {
        let plane = LatentPlane::zeros(0, 4, 4);
        let mut p = FixedPmf(DiscretePmf::uniform(-127, 128).unwrap());
        let s = encode_plane(&plane, &mut p).unwrap();
        assert_eq!(decode_plane(&s.bytes, &mut p, (0, 4, 4)).unwrap(), plane);
    }

    #[test]
    fn escape_roundtrip() {
        let mut data = vec![0, 5, -64, 64, 10000, -10000, 65, -65, i32::MAX, i32::MIN];
        data.resize(16, 1);
        let plane = LatentPlane::new(1, 4, 4, data).unwrap();
        let pmf = discretize_laplacian(0.0, 1.0, -64, 64).unwrap();
        let s = encode_plane(&plane, &mut FixedPmf(pmf.clone())).unwrap();
        assert!(s.bypass_bit_count > 0);
        let back = decode_plane(&s.bytes, &mut FixedPmf(pmf), (1, 4, 4)).unwrap();
        assert_eq!(back, plane);
    }

    #[test]
    fn no_escape_rejects_outlier() {
        let plane = LatentPlane::new(1, 1, 1, vec![500]).unwrap();
        assert!(encode_plane(&plane, &mut FixedPmf(DiscretePmf::uniform(-127, 128).unwrap())).is_err());
    }

    #[test]
    fn random_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..1000 {
            let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            let plane = random_plane(&mut rng, c, h, w, if trial % 10 == 0 { 400 } else { 20 });
            let mu = Tensor::randn([1, c, h, w], 5.0, trial);
            let ls = Tensor::randn([1, c, h, w], 2.0, trial + 7);
            let order = if trial % 2 == 0 {
                ScanOrder::ChannelMajor
            } else {
                ScanOrder::PositionMajor
            };
            let s = encode_plane(
                &plane,
                &mut LaplaceGrid {
                    mu: &mu,
                    log_scale: &ls,
                    order,
                },
            )
            .unwrap();
            let back = decode_plane(
                &s.bytes,
                &mut LaplaceGrid {
                    mu: &mu,
                    log_scale: &ls,
                    order,
                },
                (c, h, w),
            )
            .unwrap();
            assert_eq!(back, plane, "trial {trial}");
        }
    }

    #[test]
    fn all_zero_plane_at_minimum_scale_is_tiny() {
        let plane = LatentPlane::zeros(4, 32, 32);
        let pmf = discretize_laplacian(0.0, -6.0, -127, 128).unwrap();
        let s = encode_plane(&plane, &mut FixedPmf(pmf)).unwrap();
        assert!(s.bytes.len() <= plane.len() / 8 + 8, "{}", s.bytes.len());
    }

    #[test]
    fn uniform_costs_eight_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plane = random_plane(&mut rng, 1, 64, 64, 127);
        let mut p = FixedPmf(DiscretePmf::uniform(-127, 128).unwrap());
        let ce = plane_cross_entropy(&plane, &mut p).unwrap();
        assert_eq!(ce, 8.0 * plane.len() as f64);
        let s = encode_plane(&plane, &mut p).unwrap();
        let bits = s.bits() as f64;
        assert!((bits - ce).abs() <= 0.01 * ce + 64.0, "{bits} vs {ce}");
    }

    #[test]
    fn half_probability_symbol() {
        let pmf = DiscretePmf::from_frequencies(0, vec![FREQ_TOTAL / 2, FREQ_TOTAL / 2 - 1], 1).unwrap();
        let plane = LatentPlane::new(1, 1, 1, vec![0]).unwrap();
        let s = encode_plane(&plane, &mut FixedPmf(pmf)).unwrap();
        assert!(s.bits() <= 1 + 32);
    }

    #[test]
    fn floor_symbol_costs_sixteen_bits() {
        let mut freq = vec![1u32; 3];
        freq[1] = FREQ_TOTAL - 3;
        let pmf = DiscretePmf::from_frequencies(-1, freq, 1).unwrap();
        assert_eq!(symbol_bits(&pmf, 1), 16.0);
    }

    #[test]
    fn truncated_stream_is_corrupt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plane = random_plane(&mut rng, 2, 16, 16, 30);
        let mut p = FixedPmf(discretize_laplacian(0.0, 2.0, -127, 128).unwrap());
        let s = encode_plane(&plane, &mut p).unwrap();
        let err = decode_plane(&s.bytes[..s.bytes.len() / 2], &mut p, (2, 16, 16)).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
    }

    #[test]
    fn malformed_escape_is_corrupt() {
        let pmf = discretize_laplacian(0.0, 0.0, -8, 8).unwrap();
        let mut enc = RangeEncoder::new();
        let (cum, freq) = pmf.range(pmf.escape_slot());
        enc.encode(cum, freq, FREQ_BITS);
        enc.encode_bits(0, 1);
        for _ in 0..40 {
            enc.encode_bits(0, 1);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        assert!(matches!(decode_symbol(&mut dec, &pmf), Err(Error::Corrupt(_))));
    }

    #[test]
    fn coded_length_tracks_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20u64 {
            let (c, h, w) = (4, 32, 32);
            let mu = Tensor::randn([1, c, h, w], 3.0, trial);
            let ls = Tensor::randn([1, c, h, w], 1.5, trial + 100);
            let plane = sample_plane(&mut rng, &mu, &ls);
            let mut grid = LaplaceGrid {
                mu: &mu,
                log_scale: &ls,
                order: ScanOrder::ChannelMajor,
            };
            let ce = plane_cross_entropy(&plane, &mut grid).unwrap();
            let s = encode_plane(&plane, &mut grid).unwrap();
            let bits = s.bits() as f64;
            assert!((bits - ce).abs() <= 0.02 * ce + 64.0, "{bits} vs {ce}");
        }
    }

    fn sample_plane(rng: &mut impl Rng, mu: &Tensor, ls: &Tensor) -> LatentPlane {
        let [_, c, h, w] = mu.shape();
        let data = (0..c * h * w)
            .map(|i| {
                let b = (ls.data()[i] as f64).clamp(-6.0, 6.0).exp();
                let u: f64 = rng.gen::<f64>() - 0.5;
                let v = mu.data()[i] as f64 - b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
                v.round() as i32
            })
            .collect();
        LatentPlane::new(c, h, w, data).unwrap()
    }

    #[test]
    fn widening_scale_never_shrinks_zero_plane() {
        let plane = LatentPlane::zeros(2, 32, 32);
        let mut last = 0;
        for k in 0..=24 {
            let s = -6.0 + k as f64 * 0.5;
            let pmf = discretize_laplacian(0.0, s, -127, 128).unwrap();
            let len = encode_plane(&plane, &mut FixedPmf(pmf)).unwrap().bytes.len();
            assert!(len >= last, "log_scale {s}: {len} < {last}");
            last = len;
        }
    }

    proptest::proptest! {
        #[test]
        fn any_plane_roundtrips(
            (c, h, w, data) in (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
                (proptest::strategy::Just(c), proptest::strategy::Just(h), proptest::strategy::Just(w),
                 proptest::collection::vec(-5000i32..5000, c * h * w))
            }),
            seed in 0u64..1000,
            position_major in proptest::bool::ANY,
        ) {
            let plane = LatentPlane::new(c, h, w, data).unwrap();
            let mu = Tensor::randn([1, c, h, w], 20.0, seed);
            let ls = Tensor::randn([1, c, h, w], 3.0, seed + 1);
            let order = if position_major { ScanOrder::PositionMajor } else { ScanOrder::ChannelMajor };
            let s = encode_plane(&plane, &mut LaplaceGrid { mu: &mu, log_scale: &ls, order }).unwrap();
            let back = decode_plane(&s.bytes, &mut LaplaceGrid { mu: &mu, log_scale: &ls, order }, (c, h, w)).unwrap();
            proptest::prop_assert_eq!(back, plane);
        }
    }
}
