//! Bark-scale band mapping for the postfilter features.
//!
//! `B(k, b)` is the fraction of DFT bin `k`'s frequency extent
//! `[(2k - 1) f_s / 2K, (2k + 1) f_s / 2K]` that falls inside band `b`,
//! measured in units of the bin width `f_s / K`. Bands are contiguous, so every
//! bin fully inside `[0, f_s / 2]` has weights summing to one; the DC and
//! Nyquist bins stick out by half a bin and sum to 0.5.
//!
//! Band edges are uniform on the Traunmüller Bark scale
//! `z(f) = 26.81 f / (1960 + f) - 0.53` between `z(0)` and `z(f_s / 2)`.
//! The scale is left unclamped below 0 so that band widths never shrink.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_f64_matrix, write_f64_matrix};
use crate::scalar::Scalar;

pub const DEFAULT_NUM_BANDS: usize = 86;
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

pub fn hz_to_bark(f: f64) -> f64 {
    26.81 * f / (1960.0 + f) - 0.53
}

pub fn bark_to_hz(z: f64) -> f64 {
    1960.0 * (z + 0.53) / (26.28 - z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarkMap<T> {
    dft_size: usize,
    sample_rate: f64,
    edges: Vec<f64>,
    /// Row-major `num_bins x num_bands`.
    matrix: Vec<T>,
    /// Per bin, the half-open range of bands with non-zero weight.
    support: Vec<(usize, usize)>,
}

impl<T: Scalar> BarkMap<T> {
    /// Map for arbitrary contiguous band edges (Hz, strictly increasing).
    pub fn from_edges(dft_size: usize, sample_rate: f64, edges: Vec<f64>) -> Result<Self> {
        if dft_size < 2 || dft_size % 2 != 0 {
            return Err(Error::Config(format!("DFT size {dft_size} must be even")));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if edges.len() < 2 {
            return Err(Error::Config("need at least one band".into()));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("band edges must be finite and strictly increasing".into()));
        }
        let num_bins = dft_size / 2 + 1;
        let num_bands = edges.len() - 1;
        if num_bands > num_bins {
            return Err(Error::Config(format!(
                "{num_bands} bands exceed the {num_bins} available bins"
            )));
        }
        let width = sample_rate / dft_size as f64;
        let mut matrix = vec![T::zero(); num_bins * num_bands];
        let mut support = Vec::with_capacity(num_bins);
        for k in 0..num_bins {
            let lo = (2.0 * k as f64 - 1.0) * sample_rate / (2.0 * dft_size as f64);
            let hi = (2.0 * k as f64 + 1.0) * sample_rate / (2.0 * dft_size as f64);
            let (mut first, mut last) = (usize::MAX, 0);
            for b in 0..num_bands {
                let overlap = (edges[b + 1].min(hi) - edges[b].max(lo)).max(0.0);
                if overlap > 0.0 {
                    matrix[k * num_bands + b] = T::of(overlap / width);
                    first = first.min(b);
                    last = b + 1;
                }
            }
            support.push(if first == usize::MAX { (0, 0) } else { (first, last) });
        }
        Ok(Self {
            dft_size,
            sample_rate,
            edges,
            matrix,
            support,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    pub fn num_bands(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn dft_size(&self) -> usize {
        self.dft_size
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn band_edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn weight(&self, bin: usize, band: usize) -> T {
        self.matrix[bin * self.num_bands() + band]
    }

    pub fn row(&self, bin: usize) -> &[T] {
        let nb = self.num_bands();
        &self.matrix[bin * nb..(bin + 1) * nb]
    }

    /// True if the bin's whole frequency extent lies within the band range.
    pub fn is_fully_covered(&self, bin: usize) -> bool {
        let lo = (2.0 * bin as f64 - 1.0) * self.sample_rate / (2.0 * self.dft_size as f64);
        let hi = (2.0 * bin as f64 + 1.0) * self.sample_rate / (2.0 * self.dft_size as f64);
        lo >= self.edges[0] && hi <= *self.edges.last().unwrap()
    }

    /// `Z(b) = sum_k B(k, b) P(k)`.
    pub fn pool_energy_into(&self, power: &[T], out: &mut [T]) -> Result<()> {
        if power.len() != self.num_bins() {
            return Err(Error::shape("power spectrum", self.num_bins(), power.len()));
        }
        if out.len() != self.num_bands() {
            return Err(Error::shape("band output", self.num_bands(), out.len()));
        }
        if power.iter().any(|&p| !(p >= T::zero())) {
            return Err(Error::InvalidInput(
                "power spectrum must be non-negative and finite".into(),
            ));
        }
        out.iter_mut().for_each(|v| *v = T::zero());
        let nb = self.num_bands();
        for (k, &p) in power.iter().enumerate() {
            let (s, e) = self.support[k];
            for b in s..e {
                out[b] = out[b] + self.matrix[k * nb + b] * p;
            }
        }
        Ok(())
    }

    pub fn pool_energy(&self, power: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.num_bands()];
        self.pool_energy_into(power, &mut out)?;
        Ok(out)
    }

    /// `M(k) = sum_b B(k, b) m(b)`: the transpose mapping back to bins.
    pub fn unmap_mask_into(&self, band_mask: &[T], out: &mut [T]) -> Result<()> {
        if band_mask.len() != self.num_bands() {
            return Err(Error::shape("band mask", self.num_bands(), band_mask.len()));
        }
        if out.len() != self.num_bins() {
            return Err(Error::shape("bin mask", self.num_bins(), out.len()));
        }
        let nb = self.num_bands();
        for (k, o) in out.iter_mut().enumerate() {
            let (s, e) = self.support[k];
            let mut acc = T::zero();
            for b in s..e {
                acc = acc + self.matrix[k * nb + b] * band_mask[b];
            }
            *o = acc;
        }
        Ok(())
    }

    pub fn unmap_mask(&self, band_mask: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.num_bins()];
        self.unmap_mask_into(band_mask, &mut out)?;
        Ok(out)
    }

    /// Single-row f64 matrix file holding `[K, B, f_s]`, the `B + 1` band
    /// edges in Hz, then the `(K/2 + 1) x B` weights row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut values = vec![
            self.dft_size as f64,
            self.num_bands() as f64,
            self.sample_rate,
        ];
        values.extend(self.edges.iter());
        values.extend(self.matrix.iter().map(|v| v.as_f64()));
        write_f64_matrix(path, 1, values.len(), &values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (_, _, values) = read_f64_matrix(path)?;
        if values.len() < 3 {
            return Err(Error::Format("bark map header truncated".into()));
        }
        let k = values[0] as usize;
        let bands = values[1] as usize;
        let fs = values[2];
        let edges_end = 3 + bands + 1;
        if values.len() != edges_end + (k / 2 + 1) * bands {
            return Err(Error::Format("bark map payload does not match header".into()));
        }
        let map = Self::from_edges(k, fs, values[3..edges_end].to_vec())?;
        let stored = &values[edges_end..];
        if map
            .matrix
            .iter()
            .zip(stored)
            .any(|(a, b)| (a.as_f64() - b).abs() > 1e-12)
        {
            return Err(Error::Format("bark map weights disagree with edges".into()));
        }
        Ok(map)
    }
}

/// Bark-uniform band edges from 0 Hz to `f_s / 2`.
pub fn bark_edges(num_bands: usize, sample_rate: f64) -> Vec<f64> {
    let top = sample_rate / 2.0;
    let (z0, z1) = (hz_to_bark(0.0), hz_to_bark(top));
    let mut edges: Vec<f64> = (0..=num_bands)
        .map(|i| bark_to_hz(z0 + (z1 - z0) * i as f64 / num_bands as f64))
        .collect();
    edges[0] = 0.0;
    edges[num_bands] = top;
    edges
}

pub fn build_bark_map<T: Scalar>(
    dft_size: usize,
    num_bands: usize,
    sample_rate: f64,
) -> Result<BarkMap<T>> {
    if num_bands == 0 {
        return Err(Error::Config("need at least one band".into()));
    }
    if num_bands > dft_size / 2 + 1 {
        return Err(Error::Config(format!(
            "{num_bands} bands exceed the {} available bins",
            dft_size / 2 + 1
        )));
    }
    BarkMap::from_edges(dft_size, sample_rate, bark_edges(num_bands, sample_rate))
}

pub fn log_compress<T: Scalar>(features: &[T], floor: T) -> Vec<T> {
    features.iter().map(|&v| v.max(floor).log10()).collect()
}

pub fn log_compress_in_place<T: Scalar>(features: &mut [T], floor: T) {
    features.iter_mut().for_each(|v| *v = v.max(floor).log10());
}
