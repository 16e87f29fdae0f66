//! ERLE, SNR and realtime-factor measurements plus the report type.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn energy<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

/// `10 log10(|y|² / |ŝ|²)` over the whole clip.
///
/// Returns `+inf` when `s_hat` is silent; a silent `y` is an error.
pub fn erle<T: Scalar>(y: &[T], s_hat: &[T]) -> Result<f64> {
    if y.len() != s_hat.len() {
        return Err(Error::shape("enhanced signal", y.len(), s_hat.len()));
    }
    let (ey, es) = (energy(y), energy(s_hat));
    if !ey.is_finite() || !es.is_finite() {
        return Err(Error::NonFinite("erle input"));
    }
    if ey == 0.0 {
        return Err(Error::InvalidInput("microphone signal has zero energy".into()));
    }
    if es == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (ey / es).log10())
}

/// ERLE with `s_hat` lagging `y` by `latency` samples.
pub fn erle_aligned<T: Scalar>(y: &[T], s_hat: &[T], latency: usize) -> Result<f64> {
    let n = y.len().min(s_hat.len().saturating_sub(latency));
    if n == 0 {
        return Err(Error::InvalidInput("nothing left after latency compensation".into()));
    }
    erle(&y[..n], &s_hat[latency..latency + n])
}

/// ERLE per non-overlapping segment of `segment` samples (trailing partial
/// segment dropped). Segments with silent `y` yield NaN.
pub fn segmental_erle<T: Scalar>(y: &[T], s_hat: &[T], segment: usize) -> Result<Vec<f64>> {
    if y.len() != s_hat.len() {
        return Err(Error::shape("enhanced signal", y.len(), s_hat.len()));
    }
    if segment == 0 {
        return Err(Error::InvalidInput("segment length must be positive".into()));
    }
    Ok(y.chunks_exact(segment)
        .zip(s_hat.chunks_exact(segment))
        .map(|(a, b)| erle(a, b).unwrap_or(f64::NAN))
        .collect())
}

/// `10 log10(|signal|² / |noise|²)`.
pub fn snr_db<T: Scalar>(signal: &[T], noise: &[T]) -> Result<f64> {
    let (es, en) = (energy(signal), energy(noise));
    if es == 0.0 {
        return Err(Error::InvalidInput("signal has zero energy".into()));
    }
    Ok(if en == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (es / en).log10()
    })
}

pub fn realtime_factor(elapsed: Duration, audio_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) {
        return Err(Error::InvalidInput("audio duration must be positive".into()));
    }
    Ok(elapsed.as_secs_f64() / audio_seconds)
}

/// Runs `f` once and returns its result with the realtime factor.
pub fn measure_rtf<R>(audio_seconds: f64, f: impl FnOnce() -> R) -> Result<(R, f64)> {
    if !(audio_seconds > 0.0) {
        return Err(Error::InvalidInput("audio duration must be positive".into()));
    }
    let start = Instant::now();
    let out = f();
    let rtf = realtime_factor(start.elapsed(), audio_seconds)?;
    Ok((out, rtf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Condition {
    #[serde(rename = "DT")]
    DoubleTalk,
    #[serde(rename = "STFE")]
    FarendOnly,
    #[serde(rename = "STNE")]
    NearendOnly,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::DoubleTalk => "DT",
            Condition::FarendOnly => "STFE",
            Condition::NearendOnly => "STNE",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DT" => Ok(Condition::DoubleTalk),
            "STFE" => Ok(Condition::FarendOnly),
            "STNE" => Ok(Condition::NearendOnly),
            _ => Err(Error::InvalidInput(format!("unknown condition '{s}'"))),
        }
    }
}

// JSON has no infinity; write it as the string "inf".
fn db_value<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

/// Result of one processed clip. Absent values were not measurable (e.g. no
/// ground truth).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub condition: Option<Condition>,
    pub duration_s: f64,
    pub latency_samples: usize,
    #[serde(serialize_with = "db_value")]
    pub erle_db: Option<f64>,
    #[serde(serialize_with = "db_value")]
    pub lec_erle_db: Option<f64>,
    #[serde(serialize_with = "db_value")]
    pub snr_in_db: Option<f64>,
    #[serde(serialize_with = "db_value")]
    pub snr_out_db: Option<f64>,
    pub rtf: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `key value` lines; missing values are printed as `-`.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        out += &format!(
            "condition {}\n",
            self.condition.map_or("-", Condition::label)
        );
        out += &format!("duration_s {:.3}\n", self.duration_s);
        out += &format!("latency_samples {}\n", self.latency_samples);
        out += &format!("erle_db {}\n", f(self.erle_db));
        out += &format!("lec_erle_db {}\n", f(self.lec_erle_db));
        out += &format!("snr_in_db {}\n", f(self.snr_in_db));
        out += &format!("snr_out_db {}\n", f(self.snr_out_db));
        out += &format!("rtf {}\n", self.rtf.map_or("-".to_string(), |x| format!("{x:.5}")));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn erle_examples() {
        let y = [0.5f64, -1.0, 0.25, 2.0];
        assert_eq!(erle(&y, &y).unwrap(), 0.0);
        let s: Vec<f64> = y.iter().map(|v| 0.1 * v).collect();
        assert!((erle(&y, &s).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(erle(&y, &[0.0; 4]).unwrap(), f64::INFINITY);
        assert!(erle(&[0.0; 4], &y).is_err());
        assert!(erle(&y, &y[..3]).is_err());
    }

    #[test]
    fn aligned_and_segmental() {
        let y = [1.0f64, 2.0, 3.0, 4.0];
        let s = [9.0f64, 0.5, 1.0, 1.5, 2.0];
        assert!((erle_aligned(&y, &s, 1).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
        let seg = segmental_erle(&y, &[0.1, 0.2, 3.0, 4.0], 2).unwrap();
        assert!((seg[0] - 20.0).abs() < 1e-12 && seg[1].abs() < 1e-12);
    }

    #[test]
    fn rtf_arithmetic() {
        assert!((realtime_factor(Duration::from_millis(500), 10.0).unwrap() - 0.05).abs() < 1e-12);
        assert!(realtime_factor(Duration::from_millis(5), 0.0).is_err());
        assert!(measure_rtf(0.0, || ()).is_err());
        let (v, r) = measure_rtf(1.0, || 7).unwrap();
        assert_eq!(v, 7);
        assert!(r >= 0.0);
    }

    #[test]
    fn report_formats() {
        let r = MetricReport {
            condition: Some(Condition::FarendOnly),
            duration_s: 10.0,
            latency_samples: 1280,
            erle_db: Some(f64::INFINITY),
            lec_erle_db: Some(31.5),
            rtf: Some(0.01),
            ..Default::default()
        };
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["condition"], "STFE");
        assert_eq!(json["erle_db"], "inf");
        assert_eq!(json["lec_erle_db"], 31.5);
        assert!(json["snr_in_db"].is_null());
        let text = r.to_text();
        assert!(text.contains("erle_db inf") && text.contains("snr_out_db -"));
        assert_eq!("stne".parse::<Condition>().unwrap(), Condition::NearendOnly);
    }

    proptest! {
        #[test]
        fn scalar_attenuation(y in prop::collection::vec(-1.0f64..1.0, 1..64), a in 1e-3f64..1e3) {
            prop_assume!(y.iter().any(|v| v.abs() > 1e-6));
            let s: Vec<f64> = y.iter().map(|v| a * v).collect();
            prop_assert!((erle(&y, &s).unwrap() + 20.0 * a.log10()).abs() < 1e-9);
        }

        #[test]
        fn joint_scale_invariance(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..64), c in 1e-3f64..1e3) {
            let (y, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(y.iter().any(|v| v.abs() > 1e-6) && s.iter().any(|v| v.abs() > 1e-6));
            let ys: Vec<f64> = y.iter().map(|v| c * v).collect();
            let ss: Vec<f64> = s.iter().map(|v| c * v).collect();
            prop_assert!((erle(&y, &s).unwrap() - erle(&ys, &ss).unwrap()).abs() < 1e-9);
        }
    }
}
