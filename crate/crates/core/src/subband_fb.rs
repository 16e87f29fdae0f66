//! Oversampled DFT filterbank for the echo-canceller path.
//!
//! Weighted overlap-add structure: every `D` input samples the last `L`
//! samples are weighted by the prototype, folded modulo `K` and transformed by
//! a `K`-point real DFT, giving `K/2 + 1` complex subband samples. Synthesis
//! inverts the DFT, periodically extends to `L` samples, applies the same
//! prototype and overlap-adds with hop `D`.
//!
//! The prototype is a Kaiser-windowed sinc lowpass whose polyphase components
//! are then orthogonalized so the round trip reconstructs exactly (to rounding)
//! with a group delay of `L - D` samples. Selectivity comes from the lowpass;
//! see [`measure_tone_leakage_db`].

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};
use crate::io::{read_f64_array, write_f64_array};
use crate::scalar::{all_finite, Scalar};

/// Lowpass cutoff as a fraction of the subband spacing `f_s / K`.
pub const DEFAULT_CUTOFF_RATIO: f64 = 0.75;
/// Kaiser window shape parameter of the default design.
pub const DEFAULT_KAISER_BETA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterbankConfig {
    pub prototype_len: usize,
    pub num_subbands: usize,
    pub decimation: usize,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        Self {
            prototype_len: 1024,
            num_subbands: 512,
            decimation: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeFilter<T> {
    taps: Vec<T>,
    num_subbands: usize,
    decimation: usize,
    /// Energy of one polyphase component (identical for all of them).
    polyphase_energy: T,
}

impl<T: Scalar> PrototypeFilter<T> {
    /// Wraps externally supplied taps, checking the reconstruction structure.
    pub fn from_taps(taps: Vec<T>, num_subbands: usize, decimation: usize) -> Result<Self> {
        check_dimensions(taps.len(), num_subbands, decimation)?;
        if !all_finite(&taps) {
            return Err(Error::NonFinite("prototype taps"));
        }
        let energy: f64 = (0..decimation)
            .map(|r| {
                taps[r..]
                    .iter()
                    .step_by(decimation)
                    .map(|v| v.as_f64().powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / decimation as f64;
        if energy <= 0.0 {
            return Err(Error::InvalidInput("prototype has zero energy".into()));
        }
        Ok(Self {
            taps,
            num_subbands,
            decimation,
            polyphase_energy: T::of(energy),
        })
    }

    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn num_subbands(&self) -> usize {
        self.num_subbands
    }

    /// One-sided subband count `K/2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.num_subbands / 2 + 1
    }

    pub fn decimation(&self) -> usize {
        self.decimation
    }

    /// Analysis plus synthesis delay in samples.
    pub fn group_delay(&self) -> usize {
        self.taps.len() - self.decimation
    }

    pub fn dc_gain(&self) -> T {
        self.taps.iter().copied().sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let values: Vec<f64> = self.taps.iter().map(|v| v.as_f64()).collect();
        write_f64_array(path, &values)
    }

    pub fn load(path: impl AsRef<Path>, num_subbands: usize, decimation: usize) -> Result<Self> {
        let values = read_f64_array(path)?;
        Self::from_taps(
            values.into_iter().map(T::of).collect(),
            num_subbands,
            decimation,
        )
    }
}

fn check_dimensions(len: usize, k: usize, d: usize) -> Result<()> {
    if d == 0 || d >= k {
        return Err(Error::Config(format!(
            "decimation {d} must be below the subband count {k} (oversampling required)"
        )));
    }
    if len < k {
        return Err(Error::Config(format!(
            "prototype length {len} is shorter than the DFT size {k}"
        )));
    }
    if len > 2 * k || len % d != 0 || k % d != 0 || k % 2 != 0 {
        return Err(Error::Config(format!(
            "unsupported filterbank geometry L={len}, K={k}, D={d}: need K even, D | K, D | L, L <= 2K"
        )));
    }
    Ok(())
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let y = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= y / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

pub fn design_prototype<T: Scalar>(
    len: usize,
    num_subbands: usize,
    decimation: usize,
) -> Result<PrototypeFilter<T>> {
    design_prototype_with(
        len,
        num_subbands,
        decimation,
        DEFAULT_CUTOFF_RATIO,
        DEFAULT_KAISER_BETA,
    )
}

pub fn design_prototype_with<T: Scalar>(
    len: usize,
    num_subbands: usize,
    decimation: usize,
    cutoff_ratio: f64,
    beta: f64,
) -> Result<PrototypeFilter<T>> {
    check_dimensions(len, num_subbands, decimation)?;
    let fc = cutoff_ratio / num_subbands as f64;
    let center = (len - 1) as f64 / 2.0;
    let window = kaiser_window(len, beta);
    let mut taps: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - center;
            let x = 2.0 * fc * t;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            2.0 * fc * sinc * window[n]
        })
        .collect();

    orthogonalize_polyphase(&mut taps, num_subbands, decimation);

    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= dc);
    PrototypeFilter::from_taps(taps.into_iter().map(T::of).collect(), num_subbands, decimation)
}

/// Enforce the exact-reconstruction conditions on each polyphase component:
/// samples `K` apart are orthogonal and all components have equal energy.
fn orthogonalize_polyphase(taps: &mut [f64], k: usize, d: usize) {
    let p = taps.len() / d;
    let q = k / d;
    let overlap = p.saturating_sub(q);
    let mut norms = Vec::with_capacity(d);
    for r in 0..d {
        let mut v: Vec<f64> = (0..p).map(|j| taps[r + j * d]).collect();
        if overlap > 0 {
            let (a, b): (Vec<f64>, Vec<f64>) = (v[..overlap].to_vec(), v[q..].to_vec());
            let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            if ab != 0.0 {
                let aa: f64 = a.iter().map(|x| x * x).sum();
                let bb: f64 = b.iter().map(|x| x * x).sum();
                let s = aa + bb;
                // Smaller root of ab*t^2 - (aa + bb)*t + ab = 0.
                let t = 2.0 * ab / (s + (s * s - 4.0 * ab * ab).max(0.0).sqrt());
                for j in 0..overlap {
                    v[j] = a[j] - t * b[j];
                    v[q + j] = b[j] - t * a[j];
                }
            }
        }
        norms.push(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        for (j, val) in v.into_iter().enumerate() {
            taps[r + j * d] = val;
        }
    }
    let target = (norms.iter().map(|n| n * n).sum::<f64>() / d as f64).sqrt();
    for (r, n) in norms.into_iter().enumerate() {
        if n > 0.0 {
            for j in 0..p {
                taps[r + j * d] *= target / n;
            }
        }
    }
}

/// Subband-domain signal: one `K/2 + 1` vector per `D` input samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSignal<T> {
    pub frames: Vec<Vec<Complex<T>>>,
}

impl<T: Scalar> SubbandSignal<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_bins(&self) -> Option<usize> {
        self.frames.first().map(Vec::len)
    }
}

/// Streaming analysis bank.
#[derive(Clone)]
pub struct FilterbankAnalyzer<T: Scalar> {
    proto: Arc<PrototypeFilter<T>>,
    history: Vec<T>,
    folded: Vec<T>,
    fft: Arc<dyn RealToComplex<T>>,
}

impl<T: Scalar> FilterbankAnalyzer<T> {
    pub fn new(proto: Arc<PrototypeFilter<T>>) -> Self {
        let fft = RealFftPlanner::<T>::new().plan_fft_forward(proto.num_subbands);
        Self {
            history: vec![T::zero(); proto.len()],
            folded: vec![T::zero(); proto.num_subbands],
            proto,
            fft,
        }
    }

    pub fn prototype(&self) -> &Arc<PrototypeFilter<T>> {
        &self.proto
    }

    /// Consume `D` samples, writing `K/2 + 1` subband samples into `out`.
    pub fn push_into(&mut self, block: &[T], out: &mut [Complex<T>]) -> Result<()> {
        let d = self.proto.decimation;
        if block.len() != d {
            return Err(Error::shape("filterbank input block", d, block.len()));
        }
        if out.len() != self.proto.num_bins() {
            return Err(Error::shape("subband vector", self.proto.num_bins(), out.len()));
        }
        if !all_finite(block) {
            return Err(Error::NonFinite("filterbank input"));
        }
        self.history.copy_within(d.., 0);
        let l = self.history.len();
        self.history[l - d..].copy_from_slice(block);

        let k = self.proto.num_subbands;
        self.folded.iter_mut().for_each(|v| *v = T::zero());
        for (n, (&x, &w)) in self.history.iter().zip(&self.proto.taps).enumerate() {
            let slot = &mut self.folded[n % k];
            *slot = *slot + x * w;
        }
        self.fft
            .process(&mut self.folded, out)
            .expect("buffer lengths come from the plan");
        Ok(())
    }

    pub fn push(&mut self, block: &[T]) -> Result<Vec<Complex<T>>> {
        let mut out = vec![Complex::new(T::zero(), T::zero()); self.proto.num_bins()];
        self.push_into(block, &mut out)?;
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Streaming synthesis bank.
#[derive(Clone)]
pub struct FilterbankSynthesizer<T: Scalar> {
    proto: Arc<PrototypeFilter<T>>,
    accum: Vec<T>,
    spectrum: Vec<Complex<T>>,
    time: Vec<T>,
    ifft: Arc<dyn ComplexToReal<T>>,
    scale: T,
}

impl<T: Scalar> FilterbankSynthesizer<T> {
    pub fn new(proto: Arc<PrototypeFilter<T>>) -> Self {
        let ifft = RealFftPlanner::<T>::new().plan_fft_inverse(proto.num_subbands);
        let scale = T::one() / (T::of(proto.num_subbands as f64) * proto.polyphase_energy);
        Self {
            accum: vec![T::zero(); proto.len()],
            spectrum: vec![Complex::new(T::zero(), T::zero()); proto.num_bins()],
            time: vec![T::zero(); proto.num_subbands],
            proto,
            ifft,
            scale,
        }
    }

    /// Consume one subband vector, writing `D` output samples into `out`.
    pub fn push_into(&mut self, sub: &[Complex<T>], out: &mut [T]) -> Result<()> {
        let nb = self.proto.num_bins();
        if sub.len() != nb {
            return Err(Error::shape("subband vector", nb, sub.len()));
        }
        let d = self.proto.decimation;
        if out.len() != d {
            return Err(Error::shape("filterbank output block", d, out.len()));
        }
        self.spectrum.copy_from_slice(sub);
        self.spectrum[0].im = T::zero();
        self.spectrum[nb - 1].im = T::zero();
        self.ifft
            .process(&mut self.spectrum, &mut self.time)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let k = self.proto.num_subbands;
        for (n, (a, &w)) in self.accum.iter_mut().zip(&self.proto.taps).enumerate() {
            *a = *a + self.time[n % k] * w * self.scale;
        }
        out.copy_from_slice(&self.accum[..d]);
        self.accum.copy_within(d.., 0);
        let l = self.accum.len();
        self.accum[l - d..].iter_mut().for_each(|v| *v = T::zero());
        Ok(())
    }

    pub fn push(&mut self, sub: &[Complex<T>]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.proto.decimation];
        self.push_into(sub, &mut out)?;
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.accum.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Batch analysis; the signal is zero-padded to a multiple of `D`.
pub fn fb_analyze<T: Scalar>(
    signal: &[T],
    proto: &Arc<PrototypeFilter<T>>,
) -> Result<SubbandSignal<T>> {
    let d = proto.decimation;
    let mut ana = FilterbankAnalyzer::new(proto.clone());
    let mut frames = Vec::with_capacity(signal.len().div_ceil(d));
    let mut block = vec![T::zero(); d];
    for chunk in signal.chunks(d) {
        block[..chunk.len()].copy_from_slice(chunk);
        block[chunk.len()..].iter_mut().for_each(|v| *v = T::zero());
        frames.push(ana.push(&block)?);
    }
    Ok(SubbandSignal { frames })
}

/// Batch synthesis; output sample `t` reconstructs input sample
/// `t - group_delay()`.
pub fn fb_synthesize<T: Scalar>(
    sub: &SubbandSignal<T>,
    proto: &Arc<PrototypeFilter<T>>,
) -> Result<Vec<T>> {
    let mut syn = FilterbankSynthesizer::new(proto.clone());
    let mut out = Vec::with_capacity(sub.len() * proto.decimation);
    for frame in &sub.frames {
        out.extend(syn.push(frame)?);
    }
    Ok(out)
}

/// Round-trip error of the bank on seeded white noise, in dB relative to the
/// input energy (edges excluded).
pub fn measure_round_trip_db<T: Scalar>(
    proto: &Arc<PrototypeFilter<T>>,
    num_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<T> = (0..num_samples)
        .map(|_| T::of(rng.random_range(-1.0..1.0)))
        .collect();
    let y = fb_synthesize(&fb_analyze(&x, proto)?, proto)?;
    let delay = proto.group_delay();
    let edge = proto.len();
    let (mut err, mut sig) = (0.0, 0.0);
    for t in edge..num_samples.saturating_sub(edge) {
        let e = y[t + delay].as_f64() - x[t].as_f64();
        err += e * e;
        sig += x[t].as_f64().powi(2);
    }
    if sig == 0.0 {
        return Err(Error::InvalidInput("too few samples for a round-trip measurement".into()));
    }
    Ok(10.0 * (err / sig).log10())
}

/// For a full-scale tone at `freq_hz`, energy in subbands whose centre lies
/// more than `in_band_radius` subband spacings from the tone, relative to the
/// energy in the remaining subbands, in dB.
pub fn measure_tone_leakage_db<T: Scalar>(
    proto: &Arc<PrototypeFilter<T>>,
    sample_rate: f64,
    freq_hz: f64,
    in_band_radius: f64,
) -> Result<f64> {
    let n = 16 * proto.len() + 32 * proto.decimation;
    let tone: Vec<T> = (0..n)
        .map(|t| T::of((2.0 * std::f64::consts::PI * freq_hz * t as f64 / sample_rate).cos()))
        .collect();
    let sub = fb_analyze(&tone, proto)?;
    let settle = proto.len() / proto.decimation + 1;
    let spacing = sample_rate / proto.num_subbands as f64;
    let position = freq_hz / spacing;
    let (mut inside, mut outside) = (0.0, 0.0);
    for frame in &sub.frames[settle..] {
        for (k, c) in frame.iter().enumerate() {
            let p = c.norm_sqr().as_f64();
            if (k as f64 - position).abs() <= in_band_radius {
                inside += p;
            } else {
                outside += p;
            }
        }
    }
    Ok(10.0 * (outside / inside).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_proto() -> Arc<PrototypeFilter<f64>> {
        Arc::new(design_prototype(1024, 512, 128).unwrap())
    }

    #[test]
    fn rejects_critical_sampling_and_short_prototypes() {
        assert!(design_prototype::<f64>(512, 512, 512).is_err());
        assert!(design_prototype::<f64>(256, 512, 128).is_err());
        assert!(design_prototype::<f64>(1000, 512, 128).is_err());
    }

    #[test]
    fn dc_gain_is_normalized() {
        let p = default_proto();
        assert!((p.dc_gain() - 1.0).abs() < 1e-10);
        assert_eq!(p.group_delay(), 896);
        assert_eq!(p.num_subbands() / p.decimation(), 4);
    }

    #[test]
    fn polyphase_conditions_hold() {
        let p = default_proto();
        let taps = p.taps();
        let energies: Vec<f64> = (0..128)
            .map(|r| taps[r..].iter().step_by(128).map(|v| v * v).sum())
            .collect();
        for r in 0..128 {
            assert!((energies[r] / energies[0] - 1.0).abs() < 1e-12);
            let cross: f64 = (0..4).map(|j| taps[r + j * 128] * taps[r + (j + 4) * 128]).sum();
            assert!(cross.abs() < 1e-15 * energies[0].max(1e-300) + 1e-18);
        }
    }

    #[test]
    fn white_noise_round_trip_below_minus_40_db() {
        let p = default_proto();
        let db = measure_round_trip_db(&p, 16000, 1).unwrap();
        assert!(db <= -40.0, "round trip {db} dB");
    }

    #[test]
    fn centered_tone_stays_in_its_subband() {
        let p = default_proto();
        for m in [8usize, 40, 100, 200] {
            let f = m as f64 * 16000.0 / 512.0;
            let n = 8192;
            let tone: Vec<f64> = (0..n)
                .map(|t| (2.0 * std::f64::consts::PI * f * t as f64 / 16000.0).cos())
                .collect();
            let sub = fb_analyze(&tone, &p).unwrap();
            let mut power = vec![0.0; 257];
            for frame in &sub.frames[10..] {
                for (k, c) in frame.iter().enumerate() {
                    power[k] += c.norm_sqr();
                }
            }
            for (k, &v) in power.iter().enumerate() {
                if (k as i64 - m as i64).abs() > 1 {
                    assert!(10.0 * (v / power[m]).log10() <= -40.0, "m={m} k={k}");
                }
            }
        }
    }

    #[test]
    fn zero_input_zero_subbands() {
        let p = default_proto();
        let sub = fb_analyze(&vec![0.0; 4096], &p).unwrap();
        assert!(sub.frames.iter().flatten().all(|c| c.norm_sqr() == 0.0));
        assert!(fb_synthesize(&sub, &p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response_is_modulated_prototype() {
        let p = default_proto();
        let (l, k, d) = (1024usize, 512usize, 128usize);
        let t0 = 300usize;
        let mut x = vec![0.0; 4096];
        x[t0] = 1.0;
        let sub = fb_analyze(&x, &p).unwrap();
        for (m, frame) in sub.frames.iter().enumerate() {
            // Frame m covers input samples [m*D + D - L, m*D + D).
            let start = (m * d + d) as i64 - l as i64;
            let n = t0 as i64 - start;
            for (bin, c) in frame.iter().enumerate() {
                let expected = if (0..l as i64).contains(&n) {
                    let w = p.taps()[n as usize];
                    let phase = -2.0 * std::f64::consts::PI * (bin * n as usize) as f64 / k as f64;
                    Complex::new(w * phase.cos(), w * phase.sin())
                } else {
                    Complex::new(0.0, 0.0)
                };
                assert!((c - expected).norm() < 1e-12, "m={m} bin={bin}");
            }
        }
    }

    #[test]
    fn delay_by_decimation_shifts_one_subband_sample() {
        let p = default_proto();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut shifted = vec![0.0; 128];
        shifted.extend_from_slice(&x);
        let a = fb_analyze(&x, &p).unwrap();
        let b = fb_analyze(&shifted, &p).unwrap();
        for m in 0..a.len() {
            for (u, v) in a.frames[m].iter().zip(&b.frames[m + 1]) {
                assert!((u - v).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn synthesis_is_linear() {
        let p = default_proto();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sub = fb_analyze(&x, &p).unwrap();
        let scaled = SubbandSignal {
            frames: sub
                .frames
                .iter()
                .map(|f| f.iter().map(|c| c * 2.5).collect())
                .collect(),
        };
        let y = fb_synthesize(&sub, &p).unwrap();
        let ys = fb_synthesize(&scaled, &p).unwrap();
        for (a, b) in y.iter().zip(&ys) {
            assert!((2.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn subband_count_mismatch_is_rejected() {
        let p = default_proto();
        let mut syn = FilterbankSynthesizer::new(p);
        assert!(syn.push(&vec![Complex::new(0.0, 0.0); 100]).is_err());
    }

    #[test]
    fn taps_file_round_trip() {
        let p = default_proto();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proto.f64");
        p.save(&path).unwrap();
        let q = PrototypeFilter::<f64>::load(&path, 512, 128).unwrap();
        assert_eq!(p.taps(), q.taps());
    }
}
