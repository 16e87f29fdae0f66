//! Pipeline configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments and blank lines are ignored
//! sample_rate = 16000
//! frame_len = 512
//! hop = 128
//! prototype_len = 1024
//! num_subbands = 512
//! decimation = 128
//! filter_lengths = 4,8,16,32
//! step_size = 0.5
//! regularization = 0.001
//! psd_smoothing = 1.0
//! base_smoothing = 0.9
//! min_step_ratio = 0.1
//! farend_floor_db = -90
//! num_bands = 86
//! log_floor = 1e-12
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use crate::bark::{DEFAULT_LOG_FLOOR, DEFAULT_NUM_BANDS};
use crate::error::{Error, Result};
use crate::framing::StftConfig;
use crate::lec::LecConfig;
use crate::subband_fb::FilterbankConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub filterbank: FilterbankConfig,
    pub lec: LecConfig,
    pub num_bands: usize,
    pub log_floor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            filterbank: FilterbankConfig::default(),
            lec: LecConfig::default(),
            num_bands: DEFAULT_NUM_BANDS,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.lec.validate()?;
        let fb = &self.filterbank;
        if fb.decimation != self.stft.hop {
            return Err(Error::Config(format!(
                "filterbank decimation {} must equal the STFT hop {}",
                fb.decimation, self.stft.hop
            )));
        }
        if fb.num_subbands != self.stft.dft_size() {
            return Err(Error::Config(format!(
                "filterbank size {} must equal the DFT size {}",
                fb.num_subbands,
                self.stft.dft_size()
            )));
        }
        if self.num_bands == 0 || self.num_bands > self.stft.num_bins() {
            return Err(Error::Config(format!(
                "num_bands {} outside 1..={}",
                self.num_bands,
                self.stft.num_bins()
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Filterbank group delay plus the STFT overlap.
    pub fn latency(&self) -> usize {
        self.filterbank.prototype_len - self.filterbank.decimation + self.stft.streaming_latency()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }

    pub fn to_text(&self) -> String {
        let lens: Vec<String> = self.lec.filter_lengths.iter().map(|l| l.to_string()).collect();
        format!(
            "sample_rate = {}\nframe_len = {}\nhop = {}\nprototype_len = {}\nnum_subbands = {}\n\
             decimation = {}\nfilter_lengths = {}\nstep_size = {}\nregularization = {}\n\
             psd_smoothing = {}\nbase_smoothing = {}\nmin_step_ratio = {}\nfarend_floor_db = {}\nnum_bands = {}\n\
             log_floor = {:e}\n",
            self.stft.sample_rate,
            self.stft.frame_len,
            self.stft.hop,
            self.filterbank.prototype_len,
            self.filterbank.num_subbands,
            self.filterbank.decimation,
            lens.join(","),
            self.lec.step_size,
            self.lec.regularization,
            self.lec.psd_smoothing,
            self.lec.base_smoothing,
            self.lec.min_step_ratio,
            self.lec.farend_floor_db,
            self.num_bands,
            self.log_floor,
        )
    }
}

fn value<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: '{v}'")))
}

impl FromStr for PipelineConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "sample_rate" => cfg.stft.sample_rate = value(k, v)?,
                "frame_len" => cfg.stft.frame_len = value(k, v)?,
                "hop" => cfg.stft.hop = value(k, v)?,
                "prototype_len" => cfg.filterbank.prototype_len = value(k, v)?,
                "num_subbands" => cfg.filterbank.num_subbands = value(k, v)?,
                "decimation" => cfg.filterbank.decimation = value(k, v)?,
                "filter_lengths" => {
                    cfg.lec.filter_lengths = v
                        .split(',')
                        .map(|p| value(k, p.trim()))
                        .collect::<Result<_>>()?
                }
                "step_size" => cfg.lec.step_size = value(k, v)?,
                "regularization" => cfg.lec.regularization = value(k, v)?,
                "psd_smoothing" => cfg.lec.psd_smoothing = value(k, v)?,
                "base_smoothing" => cfg.lec.base_smoothing = value(k, v)?,
                "min_step_ratio" => cfg.lec.min_step_ratio = value(k, v)?,
                "farend_floor_db" => cfg.lec.farend_floor_db = value(k, v)?,
                "num_bands" => cfg.num_bands = value(k, v)?,
                "log_floor" => cfg.log_floor = value(k, v)?,
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{k}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
