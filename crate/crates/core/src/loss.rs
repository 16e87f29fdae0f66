//! Compressed complex MSE between spectrogram sequences, with the
//! STFT-consistency projection used before scoring an enhanced signal.
//!
//! `J = Σ w_k [(1-α) | |S̃|^c - |S|^c |² + α | |S̃|^c e^{jφ̃} - |S|^c e^{jφ} |²]`
//! summed over frames and one-sided bins, where `w_k` doubles every bin
//! except DC and Nyquist (the conjugate-symmetric half that was dropped).

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::framing::{SpectralFrame, Stft};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub compression: f64,
    pub magnitude_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            compression: 0.3,
            magnitude_floor: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression exponent {} outside (0, 1]",
                self.compression
            )));
        }
        if !(self.magnitude_floor >= 0.0) {
            return Err(Error::Config("magnitude floor must be non-negative".into()));
        }
        Ok(())
    }
}

/// The two sums of the loss before weighting with `α`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CcmseTerms {
    pub magnitude: f64,
    pub complex: f64,
    pub frames: usize,
}

impl CcmseTerms {
    pub fn combine(&self, alpha: f64) -> f64 {
        (1.0 - alpha) * self.magnitude + alpha * self.complex
    }
}

fn bin_weight(k: usize, len: usize) -> f64 {
    if k == 0 || k + 1 == len {
        1.0
    } else {
        2.0
    }
}

fn compress<T: Scalar>(c: Complex<T>, exponent: f64, floor: f64) -> (f64, Complex<f64>) {
    let (re, im) = (c.re.as_f64(), c.im.as_f64());
    let mag = re.hypot(im).max(floor).powf(exponent);
    let phase = im.atan2(re);
    (mag, Complex::from_polar(mag, phase))
}

pub fn ccmse_terms<T: Scalar>(
    s_tilde: &[SpectralFrame<T>],
    s: &[SpectralFrame<T>],
    compression: f64,
    magnitude_floor: f64,
) -> Result<CcmseTerms> {
    if s_tilde.len() != s.len() {
        return Err(Error::shape("frame count", s.len(), s_tilde.len()));
    }
    let mut terms = CcmseTerms {
        frames: s.len(),
        ..Default::default()
    };
    for (a, b) in s_tilde.iter().zip(s) {
        if a.bins.len() != b.bins.len() {
            return Err(Error::shape("frame bins", b.bins.len(), a.bins.len()));
        }
        let n = a.bins.len();
        for (k, (&x, &y)) in a.bins.iter().zip(&b.bins).enumerate() {
            let (ma, ca) = compress(x, compression, magnitude_floor);
            let (mb, cb) = compress(y, compression, magnitude_floor);
            let w = bin_weight(k, n);
            terms.magnitude += w * (ma - mb).powi(2);
            terms.complex += w * (ca - cb).norm_sqr();
        }
    }
    Ok(terms)
}

/// Summed loss over all frames and bins.
pub fn ccmse<T: Scalar>(
    s_tilde: &[SpectralFrame<T>],
    s: &[SpectralFrame<T>],
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    Ok(ccmse_terms(s_tilde, s, cfg.compression, cfg.magnitude_floor)?.combine(cfg.alpha))
}

/// Loss divided by the number of frames (0 for an empty sequence).
pub fn ccmse_per_frame<T: Scalar>(
    s_tilde: &[SpectralFrame<T>],
    s: &[SpectralFrame<T>],
    cfg: &LossConfig,
) -> Result<f64> {
    let j = ccmse(s_tilde, s, cfg)?;
    Ok(if s.is_empty() { 0.0 } else { j / s.len() as f64 })
}

/// Re-analysis of a synthesized signal: the consistent spectrogram `S̃`.
pub fn consistency_project<T: Scalar>(
    s_hat: &[T],
    stft: &Stft<T>,
) -> Result<Vec<SpectralFrame<T>>> {
    stft.analyze(s_hat)
}

/// Synthesize then re-analyze a (possibly inconsistent) frame sequence.
pub fn project_frames<T: Scalar>(
    frames: &[SpectralFrame<T>],
    stft: &Stft<T>,
) -> Result<Vec<SpectralFrame<T>>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let signal = stft.synthesize(frames)?;
    consistency_project(&signal, stft)
}
