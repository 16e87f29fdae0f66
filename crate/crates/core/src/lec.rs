//! Subband NLMS linear echo canceller.
//!
//! Each one-sided subband runs a bank of complex NLMS filters of different
//! lengths in parallel. Every member adapts on its own a-priori error; the
//! member with the smallest smoothed error power in a subband supplies that
//! subband's output. Short members react quickly to echo-path changes, long
//! members model longer tails.
//!
//! Step size per member and subband:
//! `mu = mu0 * clamp(P_dhat / P_e, min_step_ratio, 1)`, where `P_dhat` and
//! `P_e` are recursively smoothed powers of the echo estimate and the error.
//! The update is normalized by the farend energy in the tap window plus a
//! regularization `delta0 * N * max(Pbar_x(k), P_floor)`, where `Pbar_x(k)` is
//! the long-term mean farend power of the subband (time constant
//! `LONG_TERM_FACTOR` times the PSD one) and `P_floor` lies `farend_floor_db`
//! below the highest subband-averaged long-term farend power seen so far. The
//! long-term term slows adaptation while the farend is weak relative to its
//! usual level, when the error is dominated by noise and unmodelled echo; the
//! floor keeps the gain bounded when the farend falls silent. Both are
//! relative, so scaling `x` and `y` together scales the error exactly.
//!
//! Divergence guard: a member whose smoothed error power exceeds
//! `DIVERGENCE_RATIO` times the smoothed mic power (plus the floor) is making
//! the signal worse than doing nothing, typically after its coefficients
//! drifted while the farend was weak. Its coefficients are scaled by
//! `min(1/2, sqrt(bound / P_e))` instead of updated on every such frame.
//! If even the selected member's error power exceeds the mic power, the
//! subband passes the microphone signal through with a zero echo estimate.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::subband_fb::{FilterbankAnalyzer, FilterbankSynthesizer, PrototypeFilter};

/// Keeps ratios and divisions finite on silent input.
const POWER_FLOOR: f64 = 1e-30;

/// Time-constant multiplier of the long-term farend PSD used for the
/// regularization.
const LONG_TERM_FACTOR: f64 = 20.0;

/// Error-to-mic power ratio above which a member is considered diverged.
const DIVERGENCE_RATIO: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LecConfig {
    /// Filter lengths (in subband taps) of the parallel bank.
    pub filter_lengths: Vec<usize>,
    /// Base step size `mu0`.
    pub step_size: f64,
    /// Regularization factor `delta0`.
    pub regularization: f64,
    /// Multiplicative factor on the smoothing time constant.
    pub psd_smoothing: f64,
    /// Nominal per-frame recursive smoothing coefficient.
    pub base_smoothing: f64,
    /// Lower clamp of the variable step ratio.
    pub min_step_ratio: f64,
    /// Regularization floor in dB relative to the loudest long-term farend
    /// level seen so far.
    pub farend_floor_db: f64,
}

impl Default for LecConfig {
    fn default() -> Self {
        Self {
            filter_lengths: vec![4, 8, 16, 32],
            step_size: 0.5,
            regularization: 1e-3,
            psd_smoothing: 1.0,
            base_smoothing: 0.9,
            min_step_ratio: 0.1,
            farend_floor_db: -90.0,
        }
    }
}

impl LecConfig {
    /// A single filter of the given length instead of the bank.
    pub fn single(length: usize) -> Self {
        Self {
            filter_lengths: vec![length],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_lengths.is_empty() || self.filter_lengths.contains(&0) {
            return Err(Error::Config("filter lengths must be non-empty and >= 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config(format!(
                "step size {} outside [0, 1]",
                self.step_size
            )));
        }
        if !(self.regularization > 0.0) {
            return Err(Error::Config("regularization must be positive".into()));
        }
        if !(self.psd_smoothing > 0.0) {
            return Err(Error::Config("psd smoothing factor must be positive".into()));
        }
        if !(self.base_smoothing > 0.0 && self.base_smoothing < 1.0) {
            return Err(Error::Config("base smoothing must lie in (0, 1)".into()));
        }
        let a = self.smoothing();
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!(
                "psd smoothing factor {} gives coefficient {a} outside (0, 1)",
                self.psd_smoothing
            )));
        }
        if !(self.min_step_ratio > 0.0 && self.min_step_ratio <= 1.0) {
            return Err(Error::Config("min step ratio must lie in (0, 1]".into()));
        }
        if !(self.farend_floor_db.is_finite() && self.farend_floor_db <= 0.0) {
            return Err(Error::Config("farend floor must be finite and <= 0 dB".into()));
        }
        Ok(())
    }

    /// Recursive smoothing coefficient: the nominal time constant scaled by
    /// `psd_smoothing`.
    pub fn smoothing(&self) -> f64 {
        1.0 - (1.0 - self.base_smoothing) / self.psd_smoothing
    }
}

/// Adaptive state of the whole bank.
#[derive(Debug, Clone)]
pub struct LecState<T> {
    step_size: T,
    regularization: T,
    min_step_ratio: T,
    smoothing: T,
    floor_ratio: T,
    /// Highest subband-averaged long-term farend power so far.
    farend_peak: T,
    num_bins: usize,
    lengths: Vec<usize>,
    max_len: usize,
    /// Farend history per subband, newest first (`num_bins * max_len`).
    history: Vec<Complex<T>>,
    /// Per member: `num_bins * len` coefficients.
    coeffs: Vec<Vec<Complex<T>>>,
    err_power: Vec<Vec<T>>,
    est_power: Vec<Vec<T>>,
    farend_psd: Vec<T>,
    farend_long: Vec<T>,
    long_smoothing: T,
    /// Accumulated weight of `farend_long`, for start-up bias correction.
    long_weight: T,
    mic_power: Vec<T>,
    selected: Vec<usize>,
    member_err: Vec<Complex<T>>,
    member_est: Vec<Complex<T>>,
}

impl<T: Scalar> LecState<T> {
    pub fn new(cfg: &LecConfig, num_bins: usize) -> Result<Self> {
        cfg.validate()?;
        if num_bins == 0 {
            return Err(Error::Config("echo canceller needs at least one subband".into()));
        }
        let max_len = *cfg.filter_lengths.iter().max().unwrap();
        let members = cfg.filter_lengths.len();
        let zero = Complex::new(T::zero(), T::zero());
        Ok(Self {
            step_size: T::of(cfg.step_size),
            regularization: T::of(cfg.regularization),
            min_step_ratio: T::of(cfg.min_step_ratio),
            smoothing: T::of(cfg.smoothing()),
            floor_ratio: T::of(10f64.powf(cfg.farend_floor_db / 10.0)),
            farend_peak: T::zero(),
            num_bins,
            lengths: cfg.filter_lengths.clone(),
            max_len,
            history: vec![zero; num_bins * max_len],
            coeffs: cfg
                .filter_lengths
                .iter()
                .map(|&n| vec![zero; num_bins * n])
                .collect(),
            err_power: vec![vec![T::zero(); num_bins]; members],
            est_power: vec![vec![T::zero(); num_bins]; members],
            farend_psd: vec![T::zero(); num_bins],
            farend_long: vec![T::zero(); num_bins],
            long_smoothing: T::of(1.0 - (1.0 - cfg.smoothing()) / LONG_TERM_FACTOR),
            long_weight: T::zero(),
            mic_power: vec![T::zero(); num_bins],
            selected: vec![0; num_bins],
            member_err: vec![zero; members],
            member_est: vec![zero; members],
        })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn filter_lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Index of the bank member currently feeding each subband.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Smoothed error power of `member` in every subband.
    pub fn error_power(&self, member: usize) -> &[T] {
        &self.err_power[member]
    }

    pub fn farend_psd(&self) -> &[T] {
        &self.farend_psd
    }

    /// Coefficients of `member` in subband `bin`, oldest tap last.
    pub fn coefficients(&self, member: usize, bin: usize) -> &[Complex<T>] {
        let n = self.lengths[member];
        &self.coeffs[member][bin * n..(bin + 1) * n]
    }

    /// One frame of adaptation. Writes the error `y - d_hat` and the echo
    /// estimate of the selected member per subband (or `y` and zero when it
    /// does worse than passthrough).
    pub fn step(
        &mut self,
        x_sub: &[Complex<T>],
        y_sub: &[Complex<T>],
        e_out: &mut [Complex<T>],
        dhat_out: &mut [Complex<T>],
    ) -> Result<()> {
        let nb = self.num_bins;
        for (what, len) in [
            ("farend subbands", x_sub.len()),
            ("mic subbands", y_sub.len()),
            ("error output", e_out.len()),
            ("echo estimate output", dhat_out.len()),
        ] {
            if len != nb {
                return Err(Error::shape(what, nb, len));
            }
        }
        let finite = |v: &[Complex<T>]| v.iter().all(|c| c.re.is_finite() && c.im.is_finite());
        if !finite(x_sub) || !finite(y_sub) {
            return Err(Error::NonFinite("echo canceller input"));
        }

        let a = self.smoothing;
        let one_minus_a = T::one() - a;
        let m = self.max_len;
        for k in 0..nb {
            let hist = &mut self.history[k * m..(k + 1) * m];
            hist.copy_within(..m - 1, 1);
            hist[0] = x_sub[k];
            self.farend_psd[k] = a * self.farend_psd[k] + one_minus_a * x_sub[k].norm_sqr();
            let b = self.long_smoothing;
            self.farend_long[k] = b * self.farend_long[k] + (T::one() - b) * x_sub[k].norm_sqr();
        }
        let b = self.long_smoothing;
        self.long_weight = b * self.long_weight + (T::one() - b);
        let long_scale = T::one() / self.long_weight;
        let long_mean =
            self.farend_long.iter().copied().sum::<T>() * long_scale / T::of(nb as f64);
        self.farend_peak = self.farend_peak.max(long_mean);
        let reg_floor = self.floor_ratio * self.farend_peak;
        let floor = T::of(POWER_FLOOR);

        let diverged = T::of(DIVERGENCE_RATIO);
        let half = T::of(0.5);
        for k in 0..nb {
            let py = a * self.mic_power[k] + one_minus_a * y_sub[k].norm_sqr();
            self.mic_power[k] = py;
            let hist = &self.history[k * m..(k + 1) * m];
            for (i, &n) in self.lengths.iter().enumerate() {
                let xs = &hist[..n];
                let h = &mut self.coeffs[i][k * n..(k + 1) * n];
                let mut est = Complex::new(T::zero(), T::zero());
                let mut energy = T::zero();
                for (hj, xj) in h.iter().zip(xs) {
                    est = est + hj * xj;
                    energy = energy + xj.norm_sqr();
                }
                let err = y_sub[k] - est;

                let pe = a * self.err_power[i][k] + one_minus_a * err.norm_sqr();
                let pd = a * self.est_power[i][k] + one_minus_a * est.norm_sqr();
                self.err_power[i][k] = pe;
                self.est_power[i][k] = pd;

                let ratio = (pd / (pe + floor)).max(self.min_step_ratio).min(T::one());
                let mu = self.step_size * ratio;
                let reg_psd = (self.farend_long[k] * long_scale).max(reg_floor);
                let norm = energy + self.regularization * T::of(n as f64) * reg_psd + floor;
                let gain = err * (mu / norm);
                let bound = py + reg_floor;
                if pe > diverged * bound {
                    // Shrink at least by half, more the further it overshoots.
                    let shrink = (bound / pe).sqrt().min(half);
                    h.iter_mut().for_each(|c| *c = *c * shrink);
                } else {
                    for (hj, xj) in h.iter_mut().zip(xs) {
                        *hj = *hj + gain * xj.conj();
                    }
                }
                self.member_err[i] = err;
                self.member_est[i] = est;
            }
            let mut best = 0;
            for i in 1..self.lengths.len() {
                if self.err_power[i][k] < self.err_power[best][k] {
                    best = i;
                }
            }
            self.selected[k] = best;
            if self.err_power[best][k] > py {
                // No member removes anything: pass the microphone through.
                e_out[k] = y_sub[k];
                dhat_out[k] = Complex::new(T::zero(), T::zero());
            } else {
                e_out[k] = self.member_err[best];
                dhat_out[k] = self.member_est[best];
            }
        }
        Ok(())
    }

    /// Zero the coefficients and history and drop the power estimates.
    pub fn reset(&mut self) {
        let zero = Complex::new(T::zero(), T::zero());
        self.history.iter_mut().for_each(|c| *c = zero);
        for c in &mut self.coeffs {
            c.iter_mut().for_each(|v| *v = zero);
        }
        for p in self.err_power.iter_mut().chain(self.est_power.iter_mut()) {
            p.iter_mut().for_each(|v| *v = T::zero());
        }
        self.farend_psd.iter_mut().for_each(|v| *v = T::zero());
        self.mic_power.iter_mut().for_each(|v| *v = T::zero());
        self.farend_long.iter_mut().for_each(|v| *v = T::zero());
        self.farend_peak = T::zero();
        self.long_weight = T::zero();
        self.selected.iter_mut().for_each(|v| *v = 0);
    }

    /// Text dump of all coefficients: one line per member and subband,
    /// `member length bin re0 im0 re1 im1 ...`. Not a stable format.
    pub fn export_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::new();
        for (i, &n) in self.lengths.iter().enumerate() {
            for k in 0..self.num_bins {
                write!(text, "{i} {n} {k}").unwrap();
                for c in self.coefficients(i, k) {
                    write!(text, " {:e} {:e}", c.re.as_f64(), c.im.as_f64()).unwrap();
                }
                text.push('\n');
            }
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Time-domain echo canceller: filterbank analysis of both inputs, the
/// subband bank, and synthesis of the error and echo estimate.
#[derive(Clone)]
pub struct SubbandEchoCanceller<T: Scalar> {
    farend: FilterbankAnalyzer<T>,
    mic: FilterbankAnalyzer<T>,
    state: LecState<T>,
    error_syn: FilterbankSynthesizer<T>,
    estimate_syn: FilterbankSynthesizer<T>,
    x_sub: Vec<Complex<T>>,
    y_sub: Vec<Complex<T>>,
    e_sub: Vec<Complex<T>>,
    d_sub: Vec<Complex<T>>,
}

impl<T: Scalar> SubbandEchoCanceller<T> {
    pub fn new(proto: Arc<PrototypeFilter<T>>, cfg: &LecConfig) -> Result<Self> {
        let nb = proto.num_bins();
        let zero = Complex::new(T::zero(), T::zero());
        Ok(Self {
            state: LecState::new(cfg, nb)?,
            farend: FilterbankAnalyzer::new(proto.clone()),
            mic: FilterbankAnalyzer::new(proto.clone()),
            error_syn: FilterbankSynthesizer::new(proto.clone()),
            estimate_syn: FilterbankSynthesizer::new(proto),
            x_sub: vec![zero; nb],
            y_sub: vec![zero; nb],
            e_sub: vec![zero; nb],
            d_sub: vec![zero; nb],
        })
    }

    pub fn block_len(&self) -> usize {
        self.farend.prototype().decimation()
    }

    /// Delay of `error` and `estimate` relative to the inputs.
    pub fn latency(&self) -> usize {
        self.farend.prototype().group_delay()
    }

    pub fn state(&self) -> &LecState<T> {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    /// Process one block of `D` samples.
    pub fn process_block(
        &mut self,
        x: &[T],
        y: &[T],
        error: &mut [T],
        estimate: &mut [T],
    ) -> Result<()> {
        self.farend.push_into(x, &mut self.x_sub)?;
        self.mic.push_into(y, &mut self.y_sub)?;
        self.state
            .step(&self.x_sub, &self.y_sub, &mut self.e_sub, &mut self.d_sub)?;
        self.error_syn.push_into(&self.e_sub, error)?;
        self.estimate_syn.push_into(&self.d_sub, estimate)?;
        Ok(())
    }

    /// Whole-signal convenience: returns `(error, estimate)`, each delayed by
    /// [`Self::latency`] and truncated to whole blocks.
    pub fn run(&mut self, x: &[T], y: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if x.len() != y.len() {
            return Err(Error::shape("mic signal", x.len(), y.len()));
        }
        let d = self.block_len();
        let blocks = x.len() / d;
        let mut e = vec![T::zero(); blocks * d];
        let mut dh = vec![T::zero(); blocks * d];
        for b in 0..blocks {
            let r = b * d..(b + 1) * d;
            self.process_block(&x[r.clone()], &y[r.clone()], &mut e[r.clone()], &mut dh[r])?;
        }
        Ok((e, dh))
    }
}
