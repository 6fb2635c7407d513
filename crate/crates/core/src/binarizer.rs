//! Thresholding DBE activations into packed binary codes, activation
//! statistics, and the change-of-variables density check for `tanh(relu(t))`.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::binio::Reader;
use crate::error::{dim_err, format_err, Error, Result};
use crate::tensor::Tensor;

/// Binarization threshold; `z >= THRESHOLD` maps to 1.
pub const THRESHOLD: f32 = 0.5;
const CODES_MAGIC: &[u8; 4] = b"DBE1";
const CODES_VERSION: u16 = 1;

/// `N x L` bit matrix, each row packed least-significant-bit first into
/// `ceil(L / 64)` words. Bits past `L` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCodeSet {
    count: usize,
    code_length: usize,
    words: Vec<u64>,
}

#[inline]
pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl BinaryCodeSet {
    /// Packs a row-major `count x code_length` bit matrix.
    pub fn from_bits(bits: &[bool], count: usize, code_length: usize) -> Result<Self> {
        if bits.len() != count * code_length {
            return dim_err(format!(
                "{} bits cannot form {count} codes of length {code_length}",
                bits.len()
            ));
        }
        Self::from_fn(count, code_length, |i, j| bits[i * code_length + j])
    }

    pub fn from_fn(
        count: usize,
        code_length: usize,
        mut bit: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        if code_length == 0 {
            return Err(Error::Usage("code length must be positive".into()));
        }
        let wpr = words_for(code_length);
        let mut words = vec![0u64; count * wpr];
        for (i, row) in words.chunks_exact_mut(wpr).enumerate() {
            for j in 0..code_length {
                if bit(i, j) {
                    row[j / 64] |= 1 << (j % 64);
                }
            }
        }
        Ok(Self {
            count,
            code_length,
            words,
        })
    }

    /// Wraps already packed words, rejecting set padding bits.
    pub fn from_words(count: usize, code_length: usize, words: Vec<u64>) -> Result<Self> {
        let wpr = words_for(code_length);
        if code_length == 0 || words.len() != count * wpr {
            return dim_err(format!(
                "{} words cannot hold {count} codes of length {code_length}",
                words.len()
            ));
        }
        let pad = padding_mask(code_length);
        if let Some(r) = words.chunks_exact(wpr).position(|row| row[wpr - 1] & pad != 0) {
            return Err(Error::Data(format!("code row {r} has bits set beyond length {code_length}")));
        }
        Ok(Self {
            count,
            code_length,
            words,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.code_length)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let w = self.words_per_row();
        &self.words[i * w..(i + 1) * w]
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        assert!(j < self.code_length, "bit {j} out of range");
        self.row(i)[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn unpack(&self) -> Vec<bool> {
        (0..self.count)
            .flat_map(|i| (0..self.code_length).map(move |j| (i, j)))
            .map(|(i, j)| self.bit(i, j))
            .collect()
    }

    /// Codes as a `{0, 1}` valued `N x L` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.unpack().into_iter().map(|b| f32::from(u8::from(b))).collect();
        Tensor::new([self.count, self.code_length], data).expect("shape matches")
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let words = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self {
            count: rows.len(),
            code_length: self.code_length,
            words,
        }
    }
}

fn padding_mask(code_length: usize) -> u64 {
    match code_length % 64 {
        0 => 0,
        r => !0u64 << r,
    }
}

/// Thresholds an `N x L` activation matrix at 0.5 (inclusive).
pub fn threshold_codes(z: &Tensor<f32>) -> Result<BinaryCodeSet> {
    if z.shape().len() != 2 {
        return dim_err(format!("activations must be N x L, got {:?}", z.shape()));
    }
    let l = z.shape()[1];
    BinaryCodeSet::from_fn(z.rows(), l, |i, j| z.data()[i * l + j] >= THRESHOLD)
}

/// `sum ||threshold(z) - z||^2` over all entries.
pub fn quantization_error(z: &Tensor<f32>) -> f64 {
    z.data()
        .iter()
        .map(|&v| {
            let b = if v >= THRESHOLD { 1.0 } else { 0.0 };
            (b - f64::from(v)).powi(2)
        })
        .sum()
}

pub fn write_codes<W: Write>(codes: &BinaryCodeSet, mut w: W) -> Result<()> {
    let mut out = Vec::with_capacity(18 + codes.words.len() * 8);
    out.extend_from_slice(CODES_MAGIC);
    out.extend_from_slice(&CODES_VERSION.to_le_bytes());
    out.extend_from_slice(&(codes.code_length as u32).to_le_bytes());
    out.extend_from_slice(&(codes.count as u64).to_le_bytes());
    for word in &codes.words {
        out.extend_from_slice(&word.to_le_bytes());
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_codes<R: Read>(mut r: R) -> Result<BinaryCodeSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_codes(&buf)
}

pub fn parse_codes(buf: &[u8]) -> Result<BinaryCodeSet> {
    let mut rd = Reader::new(buf);
    rd.expect_magic(CODES_MAGIC)?;
    let at = rd.offset();
    let version = rd.u16_le()?;
    if version != CODES_VERSION {
        return format_err(at, format!("unsupported code file version {version}"));
    }
    let at = rd.offset();
    let code_length = rd.u32_le()? as usize;
    if code_length == 0 {
        return format_err(at, "code length 0");
    }
    let count = rd.u64_le()? as usize;
    let n_words = count
        .checked_mul(words_for(code_length))
        .filter(|&n| n <= rd.remaining() / 8)
        .ok_or_else(|| Error::Format {
            offset: rd.offset(),
            msg: format!("truncated: header claims {count} codes of {code_length} bits"),
        })?;
    let data_at = rd.offset();
    let bytes = rd.bytes(n_words * 8)?;
    rd.expect_end()?;
    let words = bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    BinaryCodeSet::from_words(count, code_length, words).map_err(|e| Error::Format {
        offset: data_at,
        msg: e.to_string(),
    })
}

pub const HISTOGRAM_BINS: usize = 100;
const LOW: f32 = 0.01;
const HIGH: f32 = 0.99;

/// Saturation summary of DBE activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub count: u64,
    pub low: u64,
    pub high: u64,
    /// Uniform bins over `[0, 1]`; the value 1 falls into the last bin.
    pub histogram: Vec<u64>,
}

impl ActivationStats {
    pub fn frac_low(&self) -> f64 {
        self.low as f64 / self.count.max(1) as f64
    }

    pub fn frac_high(&self) -> f64 {
        self.high as f64 / self.count.max(1) as f64
    }

    pub fn frac_mid(&self) -> f64 {
        (self.count - self.low - self.high) as f64 / self.count.max(1) as f64
    }

    /// `bin_start,bin_end,count` rows after a header.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_start,bin_end,count\n");
        for (k, c) in self.histogram.iter().enumerate() {
            let w = 1.0 / HISTOGRAM_BINS as f64;
            writeln!(s, "{:.2},{:.2},{c}", k as f64 * w, (k + 1) as f64 * w).expect("string write");
        }
        s
    }
}

/// Counts activations below 0.01, above 0.99, and between (both strict).
pub fn activation_stats(z: &[f32]) -> Result<ActivationStats> {
    let mut stats = ActivationStats {
        count: z.len() as u64,
        low: 0,
        high: 0,
        histogram: vec![0; HISTOGRAM_BINS],
    };
    for &v in z {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("activation {v} outside [0, 1]")));
        }
        stats.low += u64::from(v < LOW);
        stats.high += u64::from(v > HIGH);
        let bin = ((v * HISTOGRAM_BINS as f32) as usize).min(HISTOGRAM_BINS - 1);
        stats.histogram[bin] += 1;
    }
    Ok(stats)
}

pub const DENSITY_MIN_SAMPLES: usize = 100_000;
/// The density grid covers `(DENSITY_MARGIN, 1 - DENSITY_MARGIN)`.
pub const DENSITY_MARGIN: f64 = 0.05;

/// Empirical and analytic densities of `z = tanh(max(0, t))` on a grid of
/// positive `z` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCheck {
    pub bin_edges: Vec<f64>,
    pub centers: Vec<f64>,
    pub empirical: Vec<f64>,
    pub analytic: Vec<f64>,
    /// Mean absolute difference between the two curves.
    pub l1: f64,
}

/// Density of `z` given the density of `t` on the positive branch:
/// `p_T(atanh z) / (1 - z^2)`.
pub fn analytic_density(z: f64, p_t: impl Fn(f64) -> f64) -> f64 {
    p_t(z.atanh()) / (1.0 - z * z)
}

/// Compares the histogram density of `tanh(max(0, t))` against the
/// change-of-variables density built from a histogram estimate of `p_T` on
/// the matching `t` bins.
pub fn density_transform_check(samples: &[f64], bins: usize) -> Result<DensityCheck> {
    if samples.len() < DENSITY_MIN_SAMPLES {
        return Err(Error::Usage(format!(
            "density check needs at least {DENSITY_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Usage("density check needs at least one bin".into()));
    }
    let (lo, hi) = (DENSITY_MARGIN, 1.0 - DENSITY_MARGIN);
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let t_edges: Vec<f64> = bin_edges.iter().map(|z| z.atanh()).collect();

    let mut z_counts = vec![0u64; bins];
    let mut t_counts = vec![0u64; bins];
    let locate = |edges: &[f64], v: f64| -> Option<usize> {
        if v < edges[0] || v >= edges[bins] {
            return None;
        }
        Some((edges.partition_point(|&e| e <= v) - 1).min(bins - 1))
    };
    for &t in samples {
        if let Some(k) = locate(&bin_edges, t.max(0.0).tanh()) {
            z_counts[k] += 1;
        }
        if let Some(k) = locate(&t_edges, t) {
            t_counts[k] += 1;
        }
    }
    let n = samples.len() as f64;
    let centers: Vec<f64> = bin_edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
    let empirical: Vec<f64> = z_counts.iter().map(|&c| c as f64 / (n * width)).collect();
    let analytic: Vec<f64> = (0..bins)
        .map(|k| {
            let p_t = t_counts[k] as f64 / (n * (t_edges[k + 1] - t_edges[k]));
            analytic_density(centers[k], |_| p_t)
        })
        .collect();
    let l1 = empirical
        .iter()
        .zip(&analytic)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / bins as f64;
    Ok(DensityCheck {
        bin_edges,
        centers,
        empirical,
        analytic,
        l1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_boundary_is_inclusive() {
        let z = Tensor::new([1, 3], vec![0.5, 0.4999, 0.0]).unwrap();
        let c = threshold_codes(&z).unwrap();
        assert_eq!(c.unpack(), vec![true, false, false]);
        assert_eq!(threshold_codes(&c.to_tensor()).unwrap(), c);
    }

    #[test]
    fn packing_is_lsb_first() {
        let c = BinaryCodeSet::from_fn(2, 70, |i, j| (i == 0 && j == 0) || (i == 1 && j == 65)).unwrap();
        assert_eq!(c.row(0), &[1, 0]);
        assert_eq!(c.row(1), &[0, 2]);
        assert!(BinaryCodeSet::from_words(1, 70, vec![0, 1 << 6]).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = activation_stats(&[0.0; 10]).unwrap();
        assert_eq!(s.frac_low(), 1.0);
        let s = activation_stats(&[0.005, 0.5, 0.995]).unwrap();
        for f in [s.frac_low(), s.frac_mid(), s.frac_high()] {
            assert!((f - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(s.histogram.iter().sum::<u64>(), 3);
        assert_eq!((s.histogram[0], s.histogram[50], s.histogram[99]), (1, 1, 1));
        assert!(matches!(activation_stats(&[1.2]), Err(Error::Data(_))));
        assert_eq!(s.histogram_csv().lines().count(), 101);
    }

    #[test]
    fn density_requires_samples() {
        assert!(matches!(density_transform_check(&[0.0; 10], 10), Err(Error::Usage(_))));
    }

    #[test]
    fn density_all_negative_is_empty() {
        let d = density_transform_check(&vec![-1.0; DENSITY_MIN_SAMPLES], 20).unwrap();
        assert!(d.empirical.iter().all(|&v| v == 0.0));
        assert!(d.analytic.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_factor_at_099() {
        let f = analytic_density(0.99, |_| 1.0);
        assert!((f - 1.0 / (1.0 - 0.99f64 * 0.99)).abs() < 1e-9);
        assert!((f - 50.2513).abs() < 1e-3);
    }

    #[test]
    fn density_matches_on_uniform_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<f64> = (0..200_000).map(|_| rng.random_range(-1.0..3.0)).collect();
        let d = density_transform_check(&t, 30).unwrap();
        assert!(d.l1 < 0.05, "{}", d.l1);
    }
}
