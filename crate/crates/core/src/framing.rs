//! Square-root Hann STFT used by the postfilter path.
//!
//! Analysis windows each frame with the square root of a periodic Hann window
//! and takes a `K`-point real DFT (`K = frame_len`). Synthesis applies the same
//! window after the inverse DFT and overlap-adds; the output is divided by the
//! steady-state overlap sum of the squared window, which is computed from the
//! window itself rather than assumed.
//!
//! Two flavours exist:
//! * batch [`Stft::analyze`] / [`Stft::synthesize`]: frame `l` covers samples
//!   `[l * hop, l * hop + frame_len)` of the given signal;
//! * streaming [`StftAnalyzer`] / [`StftSynthesizer`]: one frame per `hop`
//!   pushed samples, zero history at the start, `frame_len - hop` samples of
//!   latency through the round trip.

use std::sync::Arc;

use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len: 512,
            hop: 128,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(Error::Config(format!(
                "frame_len {} is not a power of two",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.frame_len % self.hop != 0 {
            return Err(Error::Config(format!(
                "hop {} does not divide frame_len {}",
                self.hop, self.frame_len
            )));
        }
        Ok(())
    }

    /// DFT size `K`; equal to the frame length.
    pub fn dft_size(&self) -> usize {
        self.frame_len
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frame_rate(&self) -> f64 {
        f64::from(self.sample_rate) / self.hop as f64
    }

    /// Delay of the streaming analysis/synthesis round trip, in samples.
    pub fn streaming_latency(&self) -> usize {
        self.frame_len - self.hop
    }
}

/// One-sided spectrum of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame<T> {
    pub index: usize,
    pub bins: Vec<Complex<T>>,
}

impl<T: Scalar> SpectralFrame<T> {
    pub fn zeros(index: usize, num_bins: usize) -> Self {
        Self {
            index,
            bins: vec![Complex::new(T::zero(), T::zero()); num_bins],
        }
    }

    pub fn power(&self) -> Vec<T> {
        self.bins.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// Square root of a periodic (DFT-even) Hann window.
pub fn sqrt_hann<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| {
            let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
            T::of((0.5 - 0.5 * phase.cos()).sqrt())
        })
        .collect()
}

/// Shared transform state: window, FFT plans and overlap normalization.
#[derive(Clone)]
pub struct Stft<T: Scalar> {
    cfg: StftConfig,
    window: Vec<T>,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
    /// 1 / (K * overlap sum of w^2); folds the unnormalized inverse FFT in.
    synth_scale: T,
}

impl<T: Scalar> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl<T: Scalar> Stft<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let window = sqrt_hann::<T>(cfg.frame_len);
        let mut planner = RealFftPlanner::<T>::new();
        let forward = planner.plan_fft_forward(cfg.frame_len);
        let inverse = planner.plan_fft_inverse(cfg.frame_len);

        let overlap = overlap_sum(&window, cfg.hop);
        let mean = overlap.iter().map(|v| v.as_f64()).sum::<f64>() / overlap.len() as f64;
        Ok(Self {
            cfg,
            window,
            forward,
            inverse,
            synth_scale: T::of(1.0 / (mean * cfg.frame_len as f64)),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Windowed real DFT of exactly `frame_len` samples.
    pub fn transform_frame(&self, samples: &[T], index: usize) -> SpectralFrame<T> {
        debug_assert_eq!(samples.len(), self.cfg.frame_len);
        let mut buf: Vec<T> = samples
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| x * w)
            .collect();
        let mut bins = self.forward.make_output_vec();
        self.forward
            .process(&mut buf, &mut bins)
            .expect("buffer lengths come from the plan");
        SpectralFrame { index, bins }
    }

    /// Inverse DFT, synthesis window and overlap normalization of one frame.
    pub fn inverse_frame(&self, frame: &SpectralFrame<T>) -> Result<Vec<T>> {
        let nb = self.cfg.num_bins();
        if frame.bins.len() != nb {
            return Err(Error::shape("spectral frame", nb, frame.bins.len()));
        }
        let mut spec = frame.bins.clone();
        // A real signal has real DC and Nyquist bins.
        spec[0].im = T::zero();
        spec[nb - 1].im = T::zero();
        let mut out = self.inverse.make_output_vec();
        self.inverse
            .process(&mut spec, &mut out)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for (o, &w) in out.iter_mut().zip(&self.window) {
            *o = *o * w * self.synth_scale;
        }
        Ok(out)
    }

    pub fn analyze(&self, signal: &[T]) -> Result<Vec<SpectralFrame<T>>> {
        if signal.is_empty() {
            return Ok(Vec::new());
        }
        if !all_finite(signal) {
            return Err(Error::NonFinite("stft input"));
        }
        let n = self.cfg.frame_len;
        if signal.len() < n {
            return Err(Error::InvalidInput(format!(
                "signal of {} samples is shorter than one frame ({n})",
                signal.len()
            )));
        }
        let count = (signal.len() - n) / self.cfg.hop + 1;
        Ok((0..count)
            .map(|l| {
                let start = l * self.cfg.hop;
                self.transform_frame(&signal[start..start + n], l)
            })
            .collect())
    }

    /// Overlap-add resynthesis; output has `(F - 1) * hop + frame_len` samples.
    pub fn synthesize(&self, frames: &[SpectralFrame<T>]) -> Result<Vec<T>> {
        let Some(first) = frames.first() else {
            return Ok(Vec::new());
        };
        for (i, f) in frames.iter().enumerate() {
            if f.index != first.index + i {
                return Err(Error::FrameGap {
                    expected: first.index + i,
                    actual: f.index,
                });
            }
        }
        let (n, hop) = (self.cfg.frame_len, self.cfg.hop);
        let mut out = vec![T::zero(); (frames.len() - 1) * hop + n];
        for (l, f) in frames.iter().enumerate() {
            let seg = self.inverse_frame(f)?;
            for (o, s) in out[l * hop..l * hop + n].iter_mut().zip(seg) {
                *o = *o + s;
            }
        }
        Ok(out)
    }
}

/// Steady-state sum of `w^2` over all frames overlapping one sample, one value
/// per position within a hop.
pub fn overlap_sum<T: Scalar>(window: &[T], hop: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); hop];
    for (n, &w) in window.iter().enumerate() {
        acc[n % hop] = acc[n % hop] + w * w;
    }
    acc
}

pub fn analyze<T: Scalar>(signal: &[T], cfg: StftConfig) -> Result<Vec<SpectralFrame<T>>> {
    Stft::new(cfg)?.analyze(signal)
}

pub fn synthesize<T: Scalar>(frames: &[SpectralFrame<T>], cfg: StftConfig) -> Result<Vec<T>> {
    Stft::new(cfg)?.synthesize(frames)
}

/// Streaming analysis: each `hop` samples pushed produce one frame.
#[derive(Debug, Clone)]
pub struct StftAnalyzer<T: Scalar> {
    stft: Stft<T>,
    history: Vec<T>,
    next_index: usize,
}

impl<T: Scalar> StftAnalyzer<T> {
    pub fn new(stft: Stft<T>) -> Self {
        let n = stft.cfg.frame_len;
        Self {
            stft,
            history: vec![T::zero(); n],
            next_index: 0,
        }
    }

    /// Consume exactly one hop of samples and return the newest frame.
    pub fn push(&mut self, hop_block: &[T]) -> Result<SpectralFrame<T>> {
        let hop = self.stft.cfg.hop;
        if hop_block.len() != hop {
            return Err(Error::shape("stft hop block", hop, hop_block.len()));
        }
        if !all_finite(hop_block) {
            return Err(Error::NonFinite("stft input"));
        }
        self.history.copy_within(hop.., 0);
        let n = self.history.len();
        self.history[n - hop..].copy_from_slice(hop_block);
        let frame = self.stft.transform_frame(&self.history, self.next_index);
        self.next_index += 1;
        Ok(frame)
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|v| *v = T::zero());
        self.next_index = 0;
    }
}

/// Streaming overlap-add: each frame pushed releases `hop` finished samples.
#[derive(Debug, Clone)]
pub struct StftSynthesizer<T: Scalar> {
    stft: Stft<T>,
    accum: Vec<T>,
    next_index: Option<usize>,
}

impl<T: Scalar> StftSynthesizer<T> {
    pub fn new(stft: Stft<T>) -> Self {
        let n = stft.cfg.frame_len;
        Self {
            stft,
            accum: vec![T::zero(); n],
            next_index: None,
        }
    }

    pub fn push(&mut self, frame: &SpectralFrame<T>) -> Result<Vec<T>> {
        if let Some(expected) = self.next_index {
            if frame.index != expected {
                return Err(Error::FrameGap {
                    expected,
                    actual: frame.index,
                });
            }
        }
        let seg = self.stft.inverse_frame(frame)?;
        for (a, s) in self.accum.iter_mut().zip(seg) {
            *a = *a + s;
        }
        let hop = self.stft.cfg.hop;
        let out = self.accum[..hop].to_vec();
        self.accum.copy_within(hop.., 0);
        let n = self.accum.len();
        self.accum[n - hop..].iter_mut().for_each(|v| *v = T::zero());
        self.next_index = Some(frame.index + 1);
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.accum.iter_mut().for_each(|v| *v = T::zero());
        self.next_index = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let bad_hop = StftConfig {
            hop: 100,
            ..Default::default()
        };
        assert!(bad_hop.validate().is_err());
        let bad_len = StftConfig {
            frame_len: 500,
            hop: 100,
            ..Default::default()
        };
        assert!(bad_len.validate().is_err());
        let bad_rate = StftConfig {
            sample_rate: 0,
            ..Default::default()
        };
        assert!(bad_rate.validate().is_err());
    }

    #[test]
    fn tone_at_bin_center_stays_local() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..512)
            .map(|n| (2.0 * std::f64::consts::PI * 500.0 * n as f64 / 16000.0).cos())
            .collect();
        let frames = analyze(&x, cfg).unwrap();
        assert_eq!(frames.len(), 1);
        let mag: Vec<f64> = frames[0].bins.iter().map(|c| c.norm()).collect();
        let peak = mag[16];
        assert!(mag.iter().all(|&m| m <= peak));
        // The sine window leaks as 1/(4d^2 - 1) at integer bin offsets d.
        for d in [3usize, 4] {
            let expected = 1.0 / (4.0 * (d * d) as f64 - 1.0);
            assert!(((mag[16 + d] / peak) / expected - 1.0).abs() < 0.03, "offset {d}");
        }
        for (k, &m) in mag.iter().enumerate() {
            if (k as i64 - 16).abs() > 2 {
                assert!(20.0 * (m / peak).log10() <= -30.0, "bin {k}");
            }
        }
    }

    #[test]
    fn silence_gives_zero_frames() {
        let frames = analyze(&vec![0.0f64; 16000], StftConfig::default()).unwrap();
        assert!(frames
            .iter()
            .all(|f| f.bins.iter().all(|c| c.norm_sqr() == 0.0)));
    }

    #[test]
    fn parseval_on_random_frame() {
        let cfg = StftConfig::default();
        let stft = Stft::<f64>::new(cfg).unwrap();
        let x = noise(512, 3);
        let f = stft.transform_frame(&x, 0);
        let time: f64 = x
            .iter()
            .zip(stft.window())
            .map(|(a, w)| (a * w).powi(2))
            .sum();
        let p = f.power();
        let k = 512;
        let freq = (p[0] + 2.0 * p[1..k / 2].iter().sum::<f64>() + p[k / 2]) / k as f64;
        assert!((time - freq).abs() / time < 1e-10);
        assert_eq!(f.bins[0].im, 0.0);
        assert_eq!(f.bins[k / 2].im, 0.0);
    }

    #[test]
    fn white_noise_round_trip_interior() {
        let cfg = StftConfig::default();
        let x = noise(16000, 7);
        let y = synthesize(&analyze(&x, cfg).unwrap(), cfg).unwrap();
        let n = cfg.frame_len;
        let interior = n..y.len() - n;
        let err: f64 = interior.clone().map(|i| (y[i] - x[i]).powi(2)).sum();
        let sig: f64 = interior.map(|i| x[i].powi(2)).sum();
        assert!((err / sig).sqrt() <= 1e-6);
    }

    #[test]
    fn constant_input_round_trip() {
        let cfg = StftConfig::default();
        let x = vec![1.0f64; 8000];
        let y = synthesize(&analyze(&x, cfg).unwrap(), cfg).unwrap();
        for &v in &y[512..y.len() - 512] {
            assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_zero_frame_synthesizes_zeros() {
        let cfg = StftConfig::default();
        let y = synthesize(&[SpectralFrame::<f64>::zeros(0, 257)], cfg).unwrap();
        assert_eq!(y, vec![0.0; 512]);
    }

    #[test]
    fn gap_in_indices_is_rejected() {
        let cfg = StftConfig::default();
        let frames = vec![
            SpectralFrame::<f64>::zeros(0, 257),
            SpectralFrame::<f64>::zeros(2, 257),
        ];
        assert!(matches!(
            synthesize(&frames, cfg),
            Err(Error::FrameGap { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn rejects_non_finite_and_short() {
        let cfg = StftConfig::default();
        let mut x = vec![0.0f64; 1024];
        x[10] = f64::NAN;
        assert!(matches!(analyze(&x, cfg), Err(Error::NonFinite(_))));
        assert!(analyze(&vec![0.0f64; 100], cfg).is_err());
        assert!(analyze::<f64>(&[], cfg).unwrap().is_empty());
    }

    #[test]
    fn window_product_overlap_is_constant() {
        let w = sqrt_hann::<f64>(512);
        let acc = overlap_sum(&w, 128);
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        for v in acc {
            assert!((v / mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_round_trip_has_fixed_latency() {
        let cfg = StftConfig::default();
        let stft = Stft::<f64>::new(cfg).unwrap();
        let mut ana = StftAnalyzer::new(stft.clone());
        let mut syn = StftSynthesizer::new(stft);
        let x = noise(8192, 11);
        let mut y = Vec::new();
        for block in x.chunks(cfg.hop) {
            let f = ana.push(block).unwrap();
            y.extend(syn.push(&f).unwrap());
        }
        let lat = cfg.streaming_latency();
        for t in 1024..x.len() - lat {
            assert!((y[t + lat] - x[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn f32_round_trip() {
        let cfg = StftConfig::default();
        let x: Vec<f32> = noise(4096, 5).into_iter().map(|v| v as f32).collect();
        let y = synthesize(&analyze(&x, cfg).unwrap(), cfg).unwrap();
        for t in 512..x.len() - 512 {
            assert!((y[t] - x[t]).abs() < 1e-5);
        }
    }
}
