//! Synthetic microphone/farend scenarios with ground truth.
//!
//! A scenario follows `y = s + n + d` with `d = h * f_NL(x)`: the farend `x`
//! goes through a loudspeaker nonlinearity, an optional clock drift, and a
//! (possibly cross-faded) room impulse response; nearend speech, noise and
//! echo then pass a random device bandpass and are mixed at target SNR/SER.
//!
//! Everything is drawn from a ChaCha8 stream seeded by the spec, so a spec
//! always yields the same scenario. Built-in synthetic speech, noise and
//! impulse responses keep the generator usable without external data;
//! explicit signals can be supplied instead.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use realfft::RealFftPlanner;

use crate::error::{Error, Result};
use crate::io::{read_wav, write_wav};
use crate::metrics::Condition;
use crate::scalar::Scalar;

/// Nearend speech is normalized to this active-region power (dBFS).
pub const SPEECH_LEVEL_DB: f64 = -25.0;
/// Frames quieter than this (dB below the loudest frame) are inactive.
pub const ACTIVITY_GATE_DB: f64 = -40.0;
pub const ACTIVITY_FRAME: usize = 320;
pub const MAX_CLOCK_DRIFT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nonlinearity {
    None,
    /// `x' = erfc(η x) / η`.
    Erfc { eta: f64 },
    /// Negative samples scaled by `10^(η/20)`.
    NegativeHalf { eta_db: f64 },
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlinearity::None => f.write_str("none"),
            Nonlinearity::Erfc { eta } => write!(f, "erfc:{eta}"),
            Nonlinearity::NegativeHalf { eta_db } => write!(f, "negative-half:{eta_db}"),
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let value = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| Error::InvalidInput(format!("bad nonlinearity parameter '{a}'")))
            })
        };
        let nl = match kind {
            "none" => Nonlinearity::None,
            "erfc" => Nonlinearity::Erfc { eta: value(1.0)? },
            "negative-half" => Nonlinearity::NegativeHalf {
                eta_db: value(-6.0)?,
            },
            _ => return Err(Error::InvalidInput(format!("unknown nonlinearity '{kind}'"))),
        };
        nl.validate()?;
        Ok(nl)
    }
}

impl Nonlinearity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Nonlinearity::Erfc { eta } if !(eta > 0.0 && eta.is_finite()) => {
                Err(Error::InvalidInput(format!("erfc eta {eta} must be positive")))
            }
            Nonlinearity::NegativeHalf { eta_db } if !eta_db.is_finite() => {
                Err(Error::InvalidInput("negative-half gain must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn apply_nonlinearity<T: Scalar>(x: &[T], nl: Nonlinearity) -> Result<Vec<T>> {
    nl.validate()?;
    Ok(match nl {
        Nonlinearity::None => x.to_vec(),
        Nonlinearity::Erfc { eta } => x
            .iter()
            .map(|&v| T::of(libm::erfc(eta * v.as_f64()) / eta))
            .collect(),
        Nonlinearity::NegativeHalf { eta_db } => {
            let g = T::of(10f64.powf(eta_db / 20.0));
            x.iter()
                .map(|&v| if v < T::zero() { v * g } else { v })
                .collect()
        }
    })
}

/// Full linear convolution via a real FFT.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if h.len().min(x.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |v: &[f64]| {
        let mut buf = vec![0.0; n];
        buf[..v.len()].copy_from_slice(v);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("fft sizes match");
        out
    };
    let (sx, sh) = (spectrum(x), spectrum(h));
    let mut prod: Vec<_> = sx.iter().zip(&sh).map(|(a, b)| a * b).collect();
    // The inverse needs purely real DC and Nyquist bins.
    prod[0].im = 0.0;
    prod[n / 2].im = 0.0;
    let mut out = inv.make_output_vec();
    inv.process(&mut prod, &mut out).expect("fft sizes match");
    out.truncate(out_len);
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Linear crossfade from `rir_a` to `rir_b` over `[start, start + length)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossfade {
    pub rir_b: Vec<f64>,
    pub start: usize,
    pub length: usize,
}

impl Crossfade {
    /// Weight of the second path at sample `n`.
    pub fn weight(&self, n: usize) -> f64 {
        if n < self.start {
            0.0
        } else if self.length == 0 || n >= self.start + self.length {
            1.0
        } else {
            (n - self.start) as f64 / self.length as f64
        }
    }
}

/// Echo `d = h * x'` truncated to `x'`'s length. With a crossfade the output
/// blends the two static convolutions sample by sample.
pub fn make_echo(x_prime: &[f64], rir_a: &[f64], crossfade: Option<&Crossfade>) -> Result<Vec<f64>> {
    if rir_a.is_empty() || crossfade.is_some_and(|c| c.rir_b.is_empty()) {
        return Err(Error::InvalidInput("impulse response is empty".into()));
    }
    if rir_a.iter().any(|v| !v.is_finite())
        || crossfade.is_some_and(|c| c.rir_b.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("impulse response"));
    }
    let n = x_prime.len();
    let mut da = convolve(x_prime, rir_a);
    da.truncate(n);
    if let Some(cf) = crossfade {
        let db = convolve(x_prime, &cf.rir_b);
        for (i, v) in da.iter_mut().enumerate() {
            let w = cf.weight(i);
            *v = (1.0 - w) * *v + w * db[i];
        }
    }
    Ok(da)
}

/// Index range of the direct path: everything up to 2 ms after the peak.
pub fn direct_path_end(rir: &[f64], sample_rate: f64) -> usize {
    let peak = rir
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i);
    (peak + (0.002 * sample_rate).round() as usize + 1).min(rir.len())
}

pub fn scale_direct_path(rir: &[f64], gain: f64, sample_rate: f64) -> Vec<f64> {
    let end = direct_path_end(rir, sample_rate);
    rir.iter()
        .enumerate()
        .map(|(i, &v)| if i < end { v * gain } else { v })
        .collect()
}

/// Mean power over active frames (frame power within the gate of the
/// loudest frame). Zero for a silent signal.
pub fn active_power(x: &[f64]) -> f64 {
    let powers: Vec<(f64, usize)> = x
        .chunks(ACTIVITY_FRAME)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64, c.len()))
        .collect();
    let loudest = powers.iter().map(|p| p.0).fold(0.0, f64::max);
    if loudest == 0.0 {
        return 0.0;
    }
    let gate = loudest * 10f64.powf(ACTIVITY_GATE_DB / 10.0);
    let (sum, count) = powers
        .iter()
        .filter(|p| p.0 >= gate)
        .fold((0.0, 0usize), |(s, c), p| (s + p.0 * p.1 as f64, c + p.1));
    sum / count as f64
}

/// Gain making `component`'s active power `ratio_db` below `reference_power`.
pub fn gain_for_ratio(reference_power: f64, component: &[f64], ratio_db: f64) -> Result<f64> {
    if !ratio_db.is_finite() {
        return Err(Error::InvalidInput("target ratio must be finite".into()));
    }
    if !(reference_power > 0.0) {
        return Err(Error::InvalidInput("reference signal is silent".into()));
    }
    let p = active_power(component);
    if !(p > 0.0) {
        return Err(Error::InvalidInput(
            "component is silent; target ratio cannot be met".into(),
        ));
    }
    Ok((reference_power / (p * 10f64.powf(ratio_db / 10.0))).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixGains {
    pub noise: f64,
    pub echo: f64,
}

/// `y = s + g_n n + g_d d` with active-region SNR and SER hitting the targets.
pub fn mix(s: &[f64], n: &[f64], d: &[f64], snr_db: f64, ser_db: f64) -> Result<(Vec<f64>, MixGains)> {
    if n.len() != s.len() || d.len() != s.len() {
        return Err(Error::InvalidInput("mix components differ in length".into()));
    }
    let ps = active_power(s);
    let gains = MixGains {
        noise: gain_for_ratio(ps, n, snr_db)?,
        echo: gain_for_ratio(ps, d, ser_db)?,
    };
    let y = (0..s.len())
        .map(|i| s[i] + gains.noise * n[i] + gains.echo * d[i])
        .collect();
    Ok((y, gains))
}

/// Resample by `1 + drift` (a device clock running fast by `drift`) with a
/// Kaiser-windowed sinc. Output length `round(len / (1 + drift))`.
pub fn apply_clock_drift(x: &[f64], drift: f64) -> Result<Vec<f64>> {
    if !(drift.abs() <= MAX_CLOCK_DRIFT) {
        return Err(Error::InvalidInput(format!(
            "clock drift {drift} exceeds ±{MAX_CLOCK_DRIFT}"
        )));
    }
    if drift == 0.0 {
        return Ok(x.to_vec());
    }
    const HALF: i64 = 32;
    let ratio = 1.0 + drift;
    let cutoff = (1.0 / ratio).min(1.0) * 0.97;
    let beta = 8.0;
    let i0b = crate::subband_fb::bessel_i0(beta);
    let out_len = (x.len() as f64 / ratio).round() as usize;
    Ok((0..out_len)
        .map(|m| {
            let t = m as f64 * ratio;
            let c = t.floor() as i64;
            let mut acc = 0.0;
            for i in (c - HALF + 1)..=(c + HALF) {
                if i < 0 || i as usize >= x.len() {
                    continue;
                }
                let u = t - i as f64;
                let r = u / HALF as f64;
                if r.abs() >= 1.0 {
                    continue;
                }
                let w = crate::subband_fb::bessel_i0(beta * (1.0 - r * r).sqrt()) / i0b;
                let arg = std::f64::consts::PI * cutoff * u;
                let sinc = if arg == 0.0 { 1.0 } else { arg.sin() / arg };
                acc += x[i as usize] * cutoff * sinc * w;
            }
            acc
        })
        .collect())
}

/// Direct-form-I biquad.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn butterworth(cutoff: f64, fs: f64, highpass: bool) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cutoff / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / std::f64::consts::SQRT_2;
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self {
            b: b.map(|v| v / a0),
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                (x2, x1, y2, y1) = (x1, v, y1, y);
                y
            })
            .collect()
    }
}

/// Butterworth high-pass at `low` then low-pass at `high` (skipped when
/// `high` is within 10% of Nyquist).
pub fn bandpass(x: &[f64], low: f64, high: f64, sample_rate: f64) -> Result<Vec<f64>> {
    let nyq = sample_rate / 2.0;
    if !(low > 0.0 && low < high && high <= nyq) {
        return Err(Error::InvalidInput(format!(
            "bandpass edges {low}..{high} Hz invalid for {sample_rate} Hz"
        )));
    }
    let mut y = Biquad::butterworth(low, sample_rate, true).run(x);
    if high < 0.9 * nyq {
        y = Biquad::butterworth(high, sample_rate, false).run(&y);
    }
    Ok(y)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Speech-like test signal: syllables of voiced harmonic complexes with a
/// drifting pitch and formant envelope, occasional fricative noise, pauses.
pub fn synthetic_speech(len: usize, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let f0_base: f64 = rng.random_range(90.0..220.0);
    let mut pos = (rng.random_range(0.0..0.3) * sample_rate) as usize;
    while pos < len {
        let syl = (rng.random_range(0.12..0.4) * sample_rate) as usize;
        let end = (pos + syl).min(len);
        let formants = [
            rng.random_range(300.0..900.0),
            rng.random_range(900.0..2500.0),
            rng.random_range(2500.0..3500.0),
        ];
        let f0_start = f0_base * rng.random_range(0.85..1.15);
        let f0_end = f0_base * rng.random_range(0.85..1.15);
        let fricative = rng.random_bool(0.25);
        let gain = rng.random_range(0.5..1.0);
        let n_seg = end - pos;
        let mut phase = 0.0f64;
        let max_h = (0.45 * sample_rate / f0_base.min(f0_start).min(f0_end)) as usize;
        let amps: Vec<f64> = (1..=max_h)
            .map(|h| {
                let f = f0_base * h as f64;
                formants
                    .iter()
                    .zip([1.0, 0.6, 0.3])
                    .map(|(&fc, a)| a * (-((f - fc) / 150.0).powi(2)).exp())
                    .sum::<f64>()
                    + 0.02 / h as f64
            })
            .collect();
        let mut noise_state = 0.0;
        for i in 0..n_seg {
            let frac = i as f64 / n_seg as f64;
            let env = (std::f64::consts::PI * frac).sin().powi(2) * gain;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            phase += 2.0 * std::f64::consts::PI * f0 / sample_rate;
            if phase > 2.0 * std::f64::consts::PI {
                phase -= 2.0 * std::f64::consts::PI;
            }
            let mut v = 0.0;
            for (h, &a) in amps.iter().enumerate() {
                if f0 * (h + 1) as f64 >= 0.45 * sample_rate {
                    break;
                }
                v += a * ((h + 1) as f64 * phase).sin();
            }
            if fricative {
                let w = gaussian(rng);
                // First difference: a crude high-pass for hiss.
                v = 0.3 * v + 0.5 * (w - noise_state);
                noise_state = w;
            }
            out[pos + i] = env * v;
        }
        pos = end + (rng.random_range(0.05..0.35) * sample_rate) as usize;
        if rng.random_bool(0.1) {
            pos += (rng.random_range(0.3..1.0) * sample_rate) as usize;
        }
    }
    out
}

/// Coloured Gaussian noise with slow level fluctuation.
pub fn synthetic_noise(len: usize, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pole = rng.random_range(0.0..0.95);
    let mod_rate = rng.random_range(0.1..1.0);
    let mod_depth = rng.random_range(0.0..0.5);
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut state = 0.0;
    (0..len)
        .map(|i| {
            state = pole * state + gaussian(rng);
            let t = i as f64 / sample_rate;
            state * (1.0 + mod_depth * (std::f64::consts::TAU * mod_rate * t + phase0).sin())
        })
        .collect()
}

/// Exponentially decaying noise tail behind a direct-path impulse.
pub fn synthetic_rir(sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let delay = rng.random_range(16..160usize);
    let t60 = rng.random_range(0.1..0.4);
    let len = ((0.25 * sample_rate) as usize).min(4096);
    let direct = rng.random_range(0.3..1.0);
    let tail_level = rng.random_range(0.05..0.3);
    let decay = (-6.9078 / (t60 * sample_rate)).exp();
    let mut h = vec![0.0; len];
    h[delay] = direct;
    let mut g = tail_level;
    for v in h.iter_mut().skip(delay + 1) {
        *v = g * gaussian(rng);
        g *= decay;
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub condition: Condition,
    pub sample_rate: u32,
    pub duration_s: f64,
    /// `None` leaves the noise out.
    pub snr_db: Option<f64>,
    pub ser_db: f64,
    pub nonlinearity: Nonlinearity,
    /// Direct-path gain of the second impulse response; `None` disables the
    /// crossfade.
    pub crossfade_gain: Option<f64>,
    pub crossfade_start_s: f64,
    pub crossfade_len_s: f64,
    pub clock_drift: f64,
    pub bandpass: Option<(f64, f64)>,
    pub silence_s: f64,
    pub seed: u64,
    /// Explicit signals replace the built-in synthetic ones.
    pub nearend: Option<Vec<f64>>,
    pub farend: Option<Vec<f64>>,
    pub noise: Option<Vec<f64>>,
    pub rir_a: Option<Vec<f64>>,
    pub rir_b: Option<Vec<f64>>,
}

impl ScenarioSpec {
    /// A plain spec: no nonlinearity, crossfade, drift, bandpass or silence.
    pub fn plain(condition: Condition, duration_s: f64, seed: u64) -> Self {
        Self {
            condition,
            sample_rate: 16_000,
            duration_s,
            snr_db: Some(30.0),
            ser_db: 0.0,
            nonlinearity: Nonlinearity::None,
            crossfade_gain: None,
            crossfade_start_s: duration_s / 2.0,
            crossfade_len_s: 1.0,
            clock_drift: 0.0,
            bandpass: None,
            silence_s: 0.0,
            seed,
            nearend: None,
            farend: None,
            noise: None,
            rir_a: None,
            rir_b: None,
        }
    }

    /// Draws all augmentation parameters from their training distributions.
    pub fn sample(condition: Condition, duration_s: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_a410);
        let nonlinearity = if rng.random_bool(0.2) {
            Nonlinearity::None
        } else if rng.random_bool(0.5) {
            Nonlinearity::Erfc { eta: 1.0 }
        } else {
            Nonlinearity::NegativeHalf {
                eta_db: rng.random_range(-12.0..=0.0),
            }
        };
        let crossfade = rng.random_bool(0.5);
        let z = gaussian(&mut rng);
        Self {
            snr_db: Some(rng.random_range(0.0..=30.0)),
            ser_db: rng.random_range(-30.0..=10.0),
            nonlinearity,
            crossfade_gain: crossfade.then(|| (1.0 + z).abs()),
            crossfade_start_s: duration_s * rng.random_range(0.25..0.75),
            clock_drift: rng.random_range(-MAX_CLOCK_DRIFT..=MAX_CLOCK_DRIFT),
            bandpass: Some((rng.random_range(50.0..=200.0), rng.random_range(5000.0..=8000.0))),
            silence_s: rng.random_range(0.0..=10.0),
            ..Self::plain(condition, duration_s, seed)
        }
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidInput("duration must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if self.snr_db.is_some_and(|v| !v.is_finite()) || !self.ser_db.is_finite() {
            return Err(Error::InvalidInput("SNR/SER must be finite".into()));
        }
        if self.clock_drift.abs() > MAX_CLOCK_DRIFT {
            return Err(Error::InvalidInput("clock drift out of range".into()));
        }
        if !(self.silence_s >= 0.0) {
            return Err(Error::InvalidInput("silence length must be non-negative".into()));
        }
        if self.crossfade_gain.is_some_and(|g| !g.is_finite())
            || !(self.crossfade_len_s >= 0.0 && self.crossfade_start_s >= 0.0)
        {
            return Err(Error::InvalidInput("bad crossfade parameters".into()));
        }
        self.nonlinearity.validate()
    }
}

/// Every sampled parameter and applied gain of a generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMeta {
    pub condition: Condition,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub ser_db: f64,
    pub nonlinearity: Nonlinearity,
    pub crossfade_gain: Option<f64>,
    pub crossfade_start: usize,
    pub crossfade_len: usize,
    pub clock_drift: f64,
    pub bandpass: Option<(f64, f64)>,
    pub silence_start: usize,
    pub silence_len: usize,
    pub noise_gain: f64,
    pub echo_gain: f64,
}

impl ScenarioMeta {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s += &format!("{k} = {v}\n");
        kv("condition", self.condition.to_string());
        kv("sample_rate", self.sample_rate.to_string());
        kv("num_samples", self.num_samples.to_string());
        kv("seed", self.seed.to_string());
        kv("snr_db", opt(self.snr_db));
        kv("ser_db", self.ser_db.to_string());
        kv("nonlinearity", self.nonlinearity.to_string());
        kv("crossfade_gain", opt(self.crossfade_gain));
        kv("crossfade_start", self.crossfade_start.to_string());
        kv("crossfade_len", self.crossfade_len.to_string());
        kv("clock_drift", self.clock_drift.to_string());
        kv(
            "bandpass",
            self.bandpass
                .map_or("none".to_string(), |(a, b)| format!("{a} {b}")),
        );
        kv("silence_start", self.silence_start.to_string());
        kv("silence_len", self.silence_len.to_string());
        kv("noise_gain", self.noise_gain.to_string());
        kv("echo_gain", self.echo_gain.to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::Format(format!("bad metadata line '{l}'")))
            })
            .collect::<Result<_>>()?;
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("metadata lacks '{k}'")))
        };
        fn parse<V: FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad metadata value {k} = {v}")))
        }
        let opt = |k: &str| -> Result<Option<f64>> {
            match get(k)? {
                "none" => Ok(None),
                v => parse(k, v).map(Some),
            }
        };
        let bandpass = match get("bandpass")? {
            "none" => None,
            v => {
                let (a, b) = v
                    .split_once(' ')
                    .ok_or_else(|| Error::Format("bad bandpass value".into()))?;
                Some((parse("bandpass", a)?, parse("bandpass", b.trim())?))
            }
        };
        Ok(Self {
            condition: get("condition")?.parse().map_err(|_| Error::Format("bad condition".into()))?,
            sample_rate: parse("sample_rate", get("sample_rate")?)?,
            num_samples: parse("num_samples", get("num_samples")?)?,
            seed: parse("seed", get("seed")?)?,
            snr_db: opt("snr_db")?,
            ser_db: parse("ser_db", get("ser_db")?)?,
            nonlinearity: get("nonlinearity")?
                .parse()
                .map_err(|_| Error::Format("bad nonlinearity".into()))?,
            crossfade_gain: opt("crossfade_gain")?,
            crossfade_start: parse("crossfade_start", get("crossfade_start")?)?,
            crossfade_len: parse("crossfade_len", get("crossfade_len")?)?,
            clock_drift: parse("clock_drift", get("clock_drift")?)?,
            bandpass,
            silence_start: parse("silence_start", get("silence_start")?)?,
            silence_len: parse("silence_len", get("silence_len")?)?,
            noise_gain: parse("noise_gain", get("noise_gain")?)?,
            echo_gain: parse("echo_gain", get("echo_gain")?)?,
        })
    }
}

/// Generated signals; `y = s + n + d` holds sample-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    /// Nearend speech.
    pub s: Vec<T>,
    /// Background noise (after gain).
    pub n: Vec<T>,
    /// Farend reference as seen by the canceller.
    pub x: Vec<T>,
    /// Loudspeaker signal after nonlinearity and clock drift.
    pub x_prime: Vec<T>,
    /// Echo at the microphone (after gain).
    pub d: Vec<T>,
    /// Microphone signal.
    pub y: Vec<T>,
    pub meta: ScenarioMeta,
}

const BUNDLE_FILES: [&str; 6] = ["s", "n", "x", "x_prime", "d", "y"];
pub const BUNDLE_META: &str = "meta.txt";

impl<T: Scalar> Scenario<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.meta.sample_rate
    }

    fn signals(&self) -> [&Vec<T>; 6] {
        [&self.s, &self.n, &self.x, &self.x_prime, &self.d, &self.y]
    }

    /// Writes `s.wav n.wav x.wav x_prime.wav d.wav y.wav meta.txt` into `dir`.
    pub fn write_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, sig) in BUNDLE_FILES.iter().zip(self.signals()) {
            write_wav(dir.join(format!("{name}.wav")), sig, self.meta.sample_rate)?;
        }
        fs::write(dir.join(BUNDLE_META), self.meta.to_text())?;
        Ok(())
    }

    /// Reads a bundle back. WAV files are 32-bit float, so signals come back
    /// rounded to f32 and `y = s + n + d` holds only to that precision.
    pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = ScenarioMeta::from_text(&fs::read_to_string(dir.join(BUNDLE_META))?)?;
        let mut sigs = Vec::with_capacity(6);
        for name in BUNDLE_FILES {
            let (v, sr) = read_wav::<T>(dir.join(format!("{name}.wav")))?;
            if sr != meta.sample_rate || v.len() != meta.num_samples {
                return Err(Error::Format(format!("{name}.wav does not match metadata")));
            }
            sigs.push(v);
        }
        let mut it = sigs.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            s: next(),
            n: next(),
            x: next(),
            x_prime: next(),
            d: next(),
            y: next(),
            meta,
        })
    }
}

fn fit(mut v: Vec<f64>, len: usize) -> Vec<f64> {
    v.resize(len, 0.0);
    v
}

pub fn generate<T: Scalar>(spec: &ScenarioSpec) -> Result<Scenario<T>> {
    spec.validate()?;
    let fs = f64::from(spec.sample_rate);
    let len = spec.num_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let reference_power = 10f64.powf(SPEECH_LEVEL_DB / 10.0);
    let has_near = spec.condition != Condition::FarendOnly;
    let has_far = spec.condition != Condition::NearendOnly;

    // Draw every source up front so the stream does not depend on condition.
    let speech_raw = match &spec.nearend {
        Some(v) => fit(v.clone(), len),
        None => synthetic_speech(len, fs, &mut rng),
    };
    let drift_margin = (len as f64 * MAX_CLOCK_DRIFT).ceil() as usize + 64;
    let far_raw = match &spec.farend {
        Some(v) => fit(v.clone(), len + drift_margin),
        None => synthetic_speech(len + drift_margin, fs, &mut rng),
    };
    let noise_raw = match &spec.noise {
        Some(v) => fit(v.clone(), len),
        None => synthetic_noise(len, fs, &mut rng),
    };
    let rir_a = match &spec.rir_a {
        Some(v) => v.clone(),
        None => synthetic_rir(fs, &mut rng),
    };
    let rir_b_base = match &spec.rir_b {
        Some(v) => v.clone(),
        None => synthetic_rir(fs, &mut rng),
    };
    let silence_len = ((spec.silence_s.min(spec.duration_s / 2.0)) * fs).round() as usize;
    let silence_start = if silence_len > 0 && silence_len < len {
        rng.random_range(0..=len - silence_len)
    } else {
        0
    };

    // Nearend speech at the reference level, with a silent stretch.
    let mut s = if has_near {
        let p = active_power(&speech_raw);
        if !(p > 0.0) {
            return Err(Error::InvalidInput("nearend source is silent".into()));
        }
        let g = (reference_power / p).sqrt();
        speech_raw.iter().map(|v| v * g).collect()
    } else {
        vec![0.0; len]
    };
    if has_near {
        for v in s.iter_mut().skip(silence_start).take(silence_len) {
            *v = 0.0;
        }
    }

    // Farend path: reference, loudspeaker nonlinearity, drift, room.
    let far_p = active_power(&far_raw);
    let far = if has_far && far_p > 0.0 {
        let g = (reference_power / far_p).sqrt();
        far_raw.iter().map(|v| v * g).collect()
    } else {
        vec![0.0; far_raw.len()]
    };
    let x: Vec<f64> = far[..len].to_vec();
    let x_nl = if has_far {
        apply_nonlinearity(&far, spec.nonlinearity)?
    } else {
        far.clone()
    };
    let mut x_prime = apply_clock_drift(&x_nl, spec.clock_drift)?;
    x_prime.resize(len, 0.0);
    let crossfade = spec.crossfade_gain.map(|g| Crossfade {
        rir_b: scale_direct_path(&rir_b_base, g, fs),
        start: (spec.crossfade_start_s * fs).round() as usize,
        length: (spec.crossfade_len_s * fs).round() as usize,
    });
    let mut d = if has_far {
        make_echo(&x_prime, &rir_a, crossfade.as_ref())?
    } else {
        vec![0.0; len]
    };
    let mut n = noise_raw;

    if let Some((lo, hi)) = spec.bandpass {
        if has_near {
            s = bandpass(&s, lo, hi, fs)?;
        }
        n = bandpass(&n, lo, hi, fs)?;
        if has_far {
            d = bandpass(&d, lo, hi, fs)?;
        }
    }

    // Gains relative to the nearend level; a virtual one at the reference
    // level when there is no nearend or the pause swallowed all of it.
    let near_p = if has_near { active_power(&s) } else { 0.0 };
    let ref_p = if near_p > 0.0 { near_p } else { reference_power };
    let noise_gain = match spec.snr_db {
        Some(snr) => gain_for_ratio(ref_p, &n, snr)?,
        None => 0.0,
    };
    let echo_gain = if has_far {
        gain_for_ratio(ref_p, &d, spec.ser_db)?
    } else {
        0.0
    };

    let conv = |v: &[f64], g: f64| v.iter().map(|&a| T::of(a * g)).collect::<Vec<T>>();
    let s_t = conv(&s, 1.0);
    let n_t = conv(&n, noise_gain);
    let d_t = conv(&d, echo_gain);
    let y_t = (0..len).map(|i| s_t[i] + n_t[i] + d_t[i]).collect();
    let meta = ScenarioMeta {
        condition: spec.condition,
        sample_rate: spec.sample_rate,
        num_samples: len,
        seed: spec.seed,
        snr_db: spec.snr_db,
        ser_db: spec.ser_db,
        nonlinearity: spec.nonlinearity,
        crossfade_gain: spec.crossfade_gain,
        crossfade_start: crossfade.as_ref().map_or(0, |c| c.start),
        crossfade_len: crossfade.as_ref().map_or(0, |c| c.length),
        clock_drift: spec.clock_drift,
        bandpass: spec.bandpass,
        silence_start,
        silence_len: if has_near { silence_len } else { 0 },
        noise_gain,
        echo_gain,
    };
    Ok(Scenario {
        s: s_t,
        n: n_t,
        x: conv(&x, 1.0),
        x_prime: conv(&x_prime, 1.0),
        d: d_t,
        y: y_t,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn db(p: f64) -> f64 {
        10.0 * p.log10()
    }

    #[test]
    fn nonlinearity_examples() {
        let e = apply_nonlinearity(&[0.0f64], Nonlinearity::Erfc { eta: 1.0 }).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
        let h = apply_nonlinearity(&[-1.0f64, 1.0], Nonlinearity::NegativeHalf { eta_db: -6.02 }).unwrap();
        assert!((h[0] + 0.5).abs() < 1e-3 && h[1] == 1.0);
        let x = [0.3f64, -0.7];
        assert_eq!(apply_nonlinearity(&x, Nonlinearity::None).unwrap(), x);
        assert!("cubic".parse::<Nonlinearity>().is_err());
        assert!("erfc:0".parse::<Nonlinearity>().is_err());
        assert_eq!(
            "negative-half:-3".parse::<Nonlinearity>().unwrap(),
            Nonlinearity::NegativeHalf { eta_db: -3.0 }
        );
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..300).map(|_| gaussian(&mut rng)).collect();
        let h: Vec<f64> = (0..70).map(|_| gaussian(&mut rng)).collect();
        let fast = convolve(&x, &h);
        for n in [0, 1, 69, 150, 368] {
            let direct: f64 = (0..70).filter(|&j| j <= n && n - j < 300).map(|j| h[j] * x[n - j]).sum();
            assert!((fast[n] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn echo_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..1000).map(|_| gaussian(&mut rng)).collect();
        assert_eq!(make_echo(&x, &[1.0], None).unwrap(), x);
        let mut rir = vec![0.0; 101];
        rir[100] = 0.7;
        let d = make_echo(&x, &rir, None).unwrap();
        assert!(d[..100].iter().all(|&v| v.abs() < 1e-12));
        for n in 100..1000 {
            assert!((d[n] - 0.7 * x[n - 100]).abs() < 1e-12);
        }
        assert!(make_echo(&x, &[], None).is_err());
    }

    #[test]
    fn crossfade_midpoint_is_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..4000).map(|_| gaussian(&mut rng)).collect();
        let a = synthetic_rir(16000.0, &mut rng);
        let b = synthetic_rir(16000.0, &mut rng);
        let cf = Crossfade { rir_b: b.clone(), start: 1000, length: 2000 };
        let d = make_echo(&x, &a, Some(&cf)).unwrap();
        let (da, db_) = (convolve(&x, &a), convolve(&x, &b));
        let mid = 2000;
        assert!((d[mid] - 0.5 * (da[mid] + db_[mid])).abs() < 1e-9);
        assert!((d[500] - da[500]).abs() < 1e-9);
        assert!((d[3500] - db_[3500]).abs() < 1e-9);
    }

    #[test]
    fn direct_path_scaling() {
        let mut h = vec![0.0; 200];
        h[50] = 1.0;
        h[150] = 0.2;
        let s = scale_direct_path(&h, 0.5, 16000.0);
        assert_eq!(s[50], 0.5);
        assert_eq!(s[150], 0.2);
    }

    #[test]
    fn mix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = synthetic_speech(32000, 16000.0, &mut rng);
        let n = synthetic_noise(32000, 16000.0, &mut rng);
        let d = synthetic_noise(32000, 16000.0, &mut rng);
        let (y, g) = mix(&s, &n, &d, 0.0, -30.0).unwrap();
        let scaled = |v: &[f64], k: f64| v.iter().map(|a| a * k).collect::<Vec<_>>();
        let ps = active_power(&s);
        assert!((active_power(&scaled(&n, g.noise)) / ps - 1.0).abs() < 1e-9);
        assert!((active_power(&scaled(&d, g.echo)) / ps - 1000.0).abs() < 1e-6);
        assert_eq!(y.len(), s.len());
        assert!(mix(&s, &n, &vec![0.0; 32000], 0.0, 5.0).is_err());
        assert!(mix(&vec![0.0; 32000], &n, &d, 0.0, 5.0).is_err());
    }

    #[test]
    fn clock_drift_length_and_identity() {
        let x: Vec<f64> = (0..160_000).map(|i| (i as f64 * 0.01).sin()).collect();
        let y = apply_clock_drift(&x, 0.01).unwrap();
        assert!((y.len() as i64 - 158_416).abs() <= 1);
        assert_eq!(apply_clock_drift(&x, 0.0).unwrap(), x);
        assert!(apply_clock_drift(&x, 0.02).is_err());
    }

    #[test]
    fn clock_drift_shifts_tone() {
        let fs = 16000.0;
        let x: Vec<f64> = (0..32768 + 400)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / fs).sin())
            .collect();
        let y = apply_clock_drift(&x, 0.01).unwrap();
        let n = 32768;
        let seg: Vec<f64> = y[..n]
            .iter()
            .enumerate()
            .map(|(i, v)| v * (0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()))
            .collect();
        let mut planner = RealFftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf = seg;
        let mut spec = fft.make_output_vec();
        fft.process(&mut buf, &mut spec).unwrap();
        let mags: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
        let k = (1..mags.len() - 1).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        // Parabolic interpolation around the peak bin.
        let (a, b, c) = (mags[k - 1].ln(), mags[k].ln(), mags[k + 1].ln());
        let delta = 0.5 * (a - c) / (a - 2.0 * b + c);
        let f = (k as f64 + delta) * fs / n as f64;
        assert!((f - 1010.0).abs() < 1.0, "peak at {f}");
    }

    #[test]
    fn bandpass_attenuates_out_of_band() {
        let fs = 16000.0;
        let tone = |f: f64| (0..16000).map(|i| (std::f64::consts::TAU * f * i as f64 / fs).sin()).collect::<Vec<_>>();
        let rms = |v: &[f64]| (v[4000..].iter().map(|a| a * a).sum::<f64>() / 12000.0).sqrt();
        assert!(rms(&bandpass(&tone(1000.0), 100.0, 6000.0, fs).unwrap()) > 0.69);
        assert!(rms(&bandpass(&tone(20.0), 100.0, 6000.0, fs).unwrap()) < 0.05);
        assert!(rms(&bandpass(&tone(7800.0), 100.0, 6000.0, fs).unwrap()) < 0.2);
        assert!(bandpass(&tone(1.0), 200.0, 100.0, fs).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ScenarioSpec::sample(Condition::DoubleTalk, 2.0, 77);
        let a = generate::<f64>(&spec).unwrap();
        let b = generate::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        let other = ScenarioSpec::sample(Condition::DoubleTalk, 2.0, 78);
        assert_ne!(spec.ser_db, other.ser_db);
    }

    #[test]
    fn plain_mixture_is_exact() {
        let mut spec = ScenarioSpec::plain(Condition::DoubleTalk, 2.0, 5);
        spec.ser_db = 10.0;
        spec.snr_db = Some(30.0);
        let sc = generate::<f64>(&spec).unwrap();
        for i in 0..sc.len() {
            assert_eq!(sc.y[i], sc.s[i] + sc.n[i] + sc.d[i]);
        }
    }

    #[test]
    fn farend_only_has_echo_only() {
        let mut spec = ScenarioSpec::plain(Condition::FarendOnly, 2.0, 6);
        spec.snr_db = None;
        let sc = generate::<f64>(&spec).unwrap();
        assert!(sc.s.iter().chain(&sc.n).all(|&v| v == 0.0));
        assert_eq!(sc.y, sc.d);
        assert!(active_power(&sc.d) > 0.0);
    }

    #[test]
    fn nearend_only_has_no_echo() {
        let sc = generate::<f64>(&ScenarioSpec::plain(Condition::NearendOnly, 1.0, 7)).unwrap();
        assert!(sc.d.iter().chain(&sc.x).all(|&v| v == 0.0));
    }

    #[test]
    fn achieved_ratios_match_targets() {
        let spec = ScenarioSpec::sample(Condition::DoubleTalk, 3.0, 12);
        let sc = generate::<f64>(&spec).unwrap();
        let ps = active_power(&sc.s);
        assert!((db(ps / active_power(&sc.n)) - spec.snr_db.unwrap()).abs() < 0.01);
        assert!((db(ps / active_power(&sc.d)) - spec.ser_db).abs() < 0.01);
        assert!(sc.meta.silence_len as f64 <= 1.5 * 16000.0);
    }

    #[test]
    fn bundle_round_trip() {
        let sc = generate::<f64>(&ScenarioSpec::sample(Condition::DoubleTalk, 1.0, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        sc.write_bundle(dir.path()).unwrap();
        let back = Scenario::<f64>::read_bundle(dir.path()).unwrap();
        assert_eq!(back.meta, sc.meta);
        for (a, b) in back.y.iter().zip(&sc.y) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn mixture_identity_holds_for_sampled_specs(seed in 0u64..10_000, cond in 0usize..3) {
            let condition = [Condition::DoubleTalk, Condition::FarendOnly, Condition::NearendOnly][cond];
            let sc = generate::<f64>(&ScenarioSpec::sample(condition, 1.0, seed)).unwrap();
            for i in 0..sc.len() {
                prop_assert_eq!(sc.y[i], sc.s[i] + sc.n[i] + sc.d[i]);
            }
            prop_assert!(sc.y.iter().all(|v| v.is_finite()));
        }
    }
}
