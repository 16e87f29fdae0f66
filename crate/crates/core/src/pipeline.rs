//! Streaming hybrid echo control: subband LEC, then the mask postfilter.
//!
//! Per block of `hop` samples:
//!
//! 1. filterbank analysis of farend and mic, LEC step, synthesis of the
//!    error `e` (delayed by the filterbank group delay);
//! 2. farend and mic delayed by the same amount so all three line up;
//! 3. STFT of `e`, `y`, `x`; log-Bark features; band mask from the mask
//!    source; un-map to bins;
//! 4. `Ŝ = M E`, overlap-add synthesis.
//!
//! Output lags the input by [`Pipeline::latency`] samples. Input may be fed
//! in chunks of any size; the output does not depend on the chunking.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::bark::{build_bark_map, BarkMap};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::framing::{SpectralFrame, Stft, StftAnalyzer, StftSynthesizer};
use crate::lec::SubbandEchoCanceller;
use crate::metrics::{erle, measure_rtf, MetricReport};
use crate::postfilter::{apply_mask_in_place, features_into, ModelWeights, Postfilter, PostfilterState};
use crate::scalar::Scalar;
use crate::subband_fb::{design_prototype, PrototypeFilter};

/// Where the per-frame mask comes from.
#[derive(Clone)]
pub enum MaskSource<T: Scalar> {
    /// The neural postfilter.
    Network(Arc<Postfilter<T>>),
    /// `M = 1`: the output is the (re-synthesized) LEC error.
    Unity,
    /// The same value in every bin.
    Constant(T),
    /// Ideal ratio mask against a ground-truth target fed alongside the
    /// input (see [`Pipeline::push_with_target`]).
    Ideal,
}

impl<T: Scalar> MaskSource<T> {
    pub fn network(weights: &ModelWeights) -> Self {
        MaskSource::Network(Arc::new(Postfilter::new(weights)))
    }

    pub fn label(&self) -> &'static str {
        match self {
            MaskSource::Network(_) => "network",
            MaskSource::Unity => "oracle-unity",
            MaskSource::Constant(_) => "constant",
            MaskSource::Ideal => "oracle-irm",
        }
    }
}

/// Ideal ratio band mask of one frame:
/// `m(b) = Z_S(b) / (Z_E(b) + floor)`, clamped to `[0, 1]`.
pub fn oracle_irm_frame<T: Scalar>(
    s: &SpectralFrame<T>,
    e: &SpectralFrame<T>,
    map: &BarkMap<T>,
    floor: T,
) -> Result<Vec<T>> {
    let zs = map.pool_energy(&s.power())?;
    let ze = map.pool_energy(&e.power())?;
    Ok(zs
        .iter()
        .zip(&ze)
        .map(|(&a, &b)| (a / (b + floor)).max(T::zero()).min(T::one()))
        .collect())
}

pub fn oracle_irm<T: Scalar>(
    s: &[SpectralFrame<T>],
    e: &[SpectralFrame<T>],
    map: &BarkMap<T>,
    floor: T,
) -> Result<Vec<Vec<T>>> {
    if s.len() != e.len() {
        return Err(Error::shape("target frames", e.len(), s.len()));
    }
    s.iter()
        .zip(e)
        .map(|(a, b)| oracle_irm_frame(a, b, map, floor))
        .collect()
}

#[derive(Debug, Clone)]
struct DelayLine<T> {
    buf: VecDeque<T>,
}

impl<T: Scalar> DelayLine<T> {
    fn new(delay: usize) -> Self {
        Self {
            buf: std::iter::repeat_n(T::zero(), delay).collect(),
        }
    }

    fn process(&mut self, input: &[T], out: &mut [T]) {
        self.buf.extend(input.iter().copied());
        for o in out.iter_mut() {
            *o = self.buf.pop_front().expect("delay line primed");
        }
    }
}

/// Quantities of one processed frame, for callers that want to look inside.
pub struct FrameView<'a, T> {
    pub index: usize,
    /// Features of E, Y, X (each `num_bands` log10 powers).
    pub features: [&'a [T]; 3],
    pub band_mask: Option<&'a [T]>,
    pub bin_mask: &'a [T],
    pub error: &'a SpectralFrame<T>,
}

pub struct Pipeline<T: Scalar> {
    cfg: PipelineConfig,
    proto: Arc<PrototypeFilter<T>>,
    lec: SubbandEchoCanceller<T>,
    bark: Arc<BarkMap<T>>,
    mask: MaskSource<T>,
    pf_state: Option<PostfilterState<T>>,
    x_delay: DelayLine<T>,
    y_delay: DelayLine<T>,
    s_delay: DelayLine<T>,
    ana_e: StftAnalyzer<T>,
    ana_y: StftAnalyzer<T>,
    ana_x: StftAnalyzer<T>,
    ana_s: StftAnalyzer<T>,
    synth: StftSynthesizer<T>,
    // Pending input not yet forming a whole block.
    fifo_x: Vec<T>,
    fifo_y: Vec<T>,
    fifo_s: Vec<T>,
    // Per-block scratch.
    e_blk: Vec<T>,
    dhat_blk: Vec<T>,
    xd: Vec<T>,
    yd: Vec<T>,
    sd: Vec<T>,
    feats: Vec<T>,
    band_mask: Vec<T>,
    bin_mask: Vec<T>,
    frames: usize,
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(cfg: PipelineConfig, mask: MaskSource<T>) -> Result<Self> {
        cfg.validate()?;
        let fb = &cfg.filterbank;
        let proto: Arc<PrototypeFilter<T>> =
            Arc::new(design_prototype(fb.prototype_len, fb.num_subbands, fb.decimation)?);
        Self::with_prototype(cfg, proto, mask)
    }

    /// Uses an existing prototype (e.g. loaded from a file) for the LEC.
    pub fn with_prototype(
        cfg: PipelineConfig,
        proto: Arc<PrototypeFilter<T>>,
        mask: MaskSource<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if proto.len() != cfg.filterbank.prototype_len
            || proto.num_subbands() != cfg.filterbank.num_subbands
            || proto.decimation() != cfg.filterbank.decimation
        {
            return Err(Error::Config("prototype does not match the filterbank config".into()));
        }
        let bark = Arc::new(build_bark_map(
            cfg.stft.dft_size(),
            cfg.num_bands,
            f64::from(cfg.stft.sample_rate),
        )?);
        let pf_state = match &mask {
            MaskSource::Network(pf) => {
                let arch = pf.arch();
                if arch.num_bands() != cfg.num_bands {
                    return Err(Error::Config(format!(
                        "weights expect {} bands, pipeline uses {}",
                        arch.num_bands(),
                        cfg.num_bands
                    )));
                }
                if let Some(m) = arch.mapping {
                    if m.bins != cfg.stft.num_bins() {
                        return Err(Error::Config(format!(
                            "weights were built for {} bins, pipeline has {}",
                            m.bins,
                            cfg.stft.num_bins()
                        )));
                    }
                }
                Some(pf.new_state())
            }
            _ => None,
        };
        let lec = SubbandEchoCanceller::new(proto.clone(), &cfg.lec)?;
        let delay = lec.latency();
        let stft = Stft::new(cfg.stft)?;
        let hop = cfg.stft.hop;
        let (bins, bands) = (cfg.stft.num_bins(), cfg.num_bands);
        let zeros = |n: usize| vec![T::zero(); n];
        Ok(Self {
            proto,
            lec,
            bark,
            mask,
            pf_state,
            x_delay: DelayLine::new(delay),
            y_delay: DelayLine::new(delay),
            s_delay: DelayLine::new(delay),
            ana_e: StftAnalyzer::new(stft.clone()),
            ana_y: StftAnalyzer::new(stft.clone()),
            ana_x: StftAnalyzer::new(stft.clone()),
            ana_s: StftAnalyzer::new(stft.clone()),
            synth: StftSynthesizer::new(stft),
            fifo_x: Vec::new(),
            fifo_y: Vec::new(),
            fifo_s: Vec::new(),
            e_blk: zeros(hop),
            dhat_blk: zeros(hop),
            xd: zeros(hop),
            yd: zeros(hop),
            sd: zeros(hop),
            feats: zeros(3 * bands),
            band_mask: zeros(bands),
            bin_mask: zeros(bins),
            frames: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn bark_map(&self) -> &BarkMap<T> {
        &self.bark
    }

    pub fn mask_source(&self) -> &MaskSource<T> {
        &self.mask
    }

    pub fn block_len(&self) -> usize {
        self.cfg.stft.hop
    }

    /// Samples between an input sample and its processed output.
    pub fn latency(&self) -> usize {
        self.lec.latency() + self.cfg.stft.streaming_latency()
    }

    /// Delay of the LEC error relative to the input.
    pub fn lec_latency(&self) -> usize {
        self.lec.latency()
    }

    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    /// Feed any number of samples; whole output blocks are appended to `out`.
    pub fn push(&mut self, x: &[T], y: &[T], out: &mut Vec<T>) -> Result<()> {
        if matches!(self.mask, MaskSource::Ideal) {
            return Err(Error::InvalidInput(
                "the ideal mask needs a target signal (push_with_target)".into(),
            ));
        }
        self.push_inner(x, y, None, out, |_| {})
    }

    /// Like [`Self::push`], also feeding the ground-truth target for the ideal
    /// mask.
    pub fn push_with_target(&mut self, x: &[T], y: &[T], target: &[T], out: &mut Vec<T>) -> Result<()> {
        if target.len() != x.len() {
            return Err(Error::shape("target chunk", x.len(), target.len()));
        }
        self.push_inner(x, y, Some(target), out, |_| {})
    }

    /// Full-control variant: `target` is required for the ideal mask and
    /// ignored otherwise; `observe` sees every frame.
    pub fn push_observed(
        &mut self,
        x: &[T],
        y: &[T],
        target: Option<&[T]>,
        out: &mut Vec<T>,
        observe: impl FnMut(FrameView<'_, T>),
    ) -> Result<()> {
        if matches!(self.mask, MaskSource::Ideal) && target.is_none() {
            return Err(Error::InvalidInput("the ideal mask needs a target signal".into()));
        }
        if target.is_some_and(|t| t.len() != x.len()) {
            return Err(Error::shape("target chunk", x.len(), target.map_or(0, <[T]>::len)));
        }
        self.push_inner(x, y, target, out, observe)
    }

    fn push_inner(
        &mut self,
        x: &[T],
        y: &[T],
        target: Option<&[T]>,
        out: &mut Vec<T>,
        mut observe: impl FnMut(FrameView<'_, T>),
    ) -> Result<()> {
        if x.len() != y.len() {
            return Err(Error::shape("mic chunk", x.len(), y.len()));
        }
        if x.iter().chain(y).chain(target.unwrap_or(&[])).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pipeline input"));
        }
        self.fifo_x.extend_from_slice(x);
        self.fifo_y.extend_from_slice(y);
        match target {
            Some(t) => self.fifo_s.extend_from_slice(t),
            None => self.fifo_s.extend(std::iter::repeat_n(T::zero(), x.len())),
        }
        let hop = self.block_len();
        let blocks = self.fifo_x.len() / hop;
        for b in 0..blocks {
            let r = b * hop..(b + 1) * hop;
            let xb = std::mem::take(&mut self.fifo_x);
            let yb = std::mem::take(&mut self.fifo_y);
            let sb = std::mem::take(&mut self.fifo_s);
            let res = self.process_block(&xb[r.clone()], &yb[r.clone()], &sb[r], out, &mut observe);
            self.fifo_x = xb;
            self.fifo_y = yb;
            self.fifo_s = sb;
            res?;
        }
        let used = blocks * hop;
        self.fifo_x.drain(..used);
        self.fifo_y.drain(..used);
        self.fifo_s.drain(..used);
        Ok(())
    }

    fn process_block(
        &mut self,
        x: &[T],
        y: &[T],
        s: &[T],
        out: &mut Vec<T>,
        observe: &mut impl FnMut(FrameView<'_, T>),
    ) -> Result<()> {
        self.lec.process_block(x, y, &mut self.e_blk, &mut self.dhat_blk)?;
        self.x_delay.process(x, &mut self.xd);
        self.y_delay.process(y, &mut self.yd);
        self.s_delay.process(s, &mut self.sd);

        let mut e_frame = self.ana_e.push(&self.e_blk)?;
        let y_frame = self.ana_y.push(&self.yd)?;
        let x_frame = self.ana_x.push(&self.xd)?;
        let nb = self.cfg.num_bands;
        let floor = T::of(self.cfg.log_floor);
        for (i, frame) in [&e_frame, &y_frame, &x_frame].into_iter().enumerate() {
            features_into(&self.bark, &frame.power(), floor, &mut self.feats[i * nb..(i + 1) * nb])?;
        }

        let mut used_band_mask = true;
        match &self.mask {
            MaskSource::Network(pf) => {
                let st = self.pf_state.as_mut().expect("network state");
                let (fe, rest) = self.feats.split_at(nb);
                let (fy, fx) = rest.split_at(nb);
                pf.infer_mask(st, fe, fy, fx, &mut self.band_mask)?;
                self.bark.unmap_mask_into(&self.band_mask, &mut self.bin_mask)?;
            }
            MaskSource::Ideal => {
                let s_frame = self.ana_s.push(&self.sd)?;
                let m = oracle_irm_frame(&s_frame, &e_frame, &self.bark, floor)?;
                self.band_mask.copy_from_slice(&m);
                self.bark.unmap_mask_into(&self.band_mask, &mut self.bin_mask)?;
            }
            MaskSource::Unity => {
                self.bin_mask.iter_mut().for_each(|v| *v = T::one());
                used_band_mask = false;
            }
            MaskSource::Constant(c) => {
                let c = *c;
                self.bin_mask.iter_mut().for_each(|v| *v = c);
                used_band_mask = false;
            }
        }
        observe(FrameView {
            index: e_frame.index,
            features: [&self.feats[..nb], &self.feats[nb..2 * nb], &self.feats[2 * nb..]],
            band_mask: used_band_mask.then_some(&self.band_mask[..]),
            bin_mask: &self.bin_mask,
            error: &e_frame,
        });
        apply_mask_in_place(&mut e_frame.bins, &self.bin_mask)?;
        out.extend(self.synth.push(&e_frame)?);
        self.frames += 1;
        Ok(())
    }

    /// Clears all adaptive and buffered state.
    pub fn reset(&mut self) {
        let cfg = self.cfg.clone();
        let proto = self.proto.clone();
        let mask = self.mask.clone();
        *self = Self::with_prototype(cfg, proto, mask).expect("config already validated");
    }
}

/// Processes whole signals and returns `ŝ` aligned with the input (the
/// pipeline latency is compensated by zero padding).
pub fn process_stream<T: Scalar>(
    pipeline: &mut Pipeline<T>,
    x: &[T],
    y: &[T],
    target: Option<&[T]>,
) -> Result<Vec<T>> {
    if x.len() != y.len() {
        return Err(Error::shape("mic signal", x.len(), y.len()));
    }
    let lat = pipeline.latency();
    let hop = pipeline.block_len();
    let total = (x.len() + lat).div_ceil(hop) * hop;
    let pad = |v: &[T]| {
        let mut p = v.to_vec();
        p.resize(total, T::zero());
        p
    };
    let (xp, yp) = (pad(x), pad(y));
    let tp = target.map(pad);
    let mut out = Vec::with_capacity(total);
    pipeline.push_observed(&xp, &yp, tp.as_deref(), &mut out, |_| {})?;
    Ok(out[lat..lat + x.len()].to_vec())
}

/// One clip through a fresh pipeline, with a metrics report. `y` doubles as
/// the ERLE reference; the LEC-only ERLE uses the canceller's own output.
pub fn run_clip<T: Scalar>(
    cfg: &PipelineConfig,
    mask: MaskSource<T>,
    x: &[T],
    y: &[T],
    target: Option<&[T]>,
) -> Result<(Vec<T>, MetricReport)> {
    let mut p = Pipeline::new(cfg.clone(), mask)?;
    let fs = f64::from(cfg.stft.sample_rate);
    let duration = x.len() as f64 / fs;
    let (s_hat, rtf) = measure_rtf(duration, || process_stream(&mut p, x, y, target))?;
    let s_hat = s_hat?;
    let mut unity = Pipeline::new(cfg.clone(), MaskSource::Unity)?;
    let lec_out = process_stream(&mut unity, x, y, None)?;
    let report = MetricReport {
        condition: None,
        duration_s: duration,
        latency_samples: p.latency(),
        erle_db: erle(y, &s_hat).ok(),
        lec_erle_db: erle(y, &lec_out).ok(),
        snr_in_db: None,
        snr_out_db: None,
        rtf: Some(rtf),
    };
    Ok((s_hat, report))
}

/// Log-Bark features `[E | Y | X]` per frame, with the ideal band mask as
/// the training target when `target` is given.
pub fn extract_features<T: Scalar>(
    cfg: &PipelineConfig,
    x: &[T],
    y: &[T],
    target: Option<&[T]>,
) -> Result<(Vec<Vec<T>>, Option<Vec<Vec<T>>>)> {
    let mask = if target.is_some() { MaskSource::Ideal } else { MaskSource::Unity };
    let mut p = Pipeline::new(cfg.clone(), mask)?;
    let lat = p.latency();
    let hop = p.block_len();
    let total = (x.len() + lat).div_ceil(hop) * hop;
    let pad = |v: &[T]| {
        let mut p = v.to_vec();
        p.resize(total, T::zero());
        p
    };
    let (mut feats, mut masks) = (Vec::new(), Vec::new());
    let mut out = Vec::new();
    let tp = target.map(pad);
    p.push_observed(&pad(x), &pad(y), tp.as_deref(), &mut out, |f| {
        feats.push(f.features.concat());
        if let Some(m) = f.band_mask {
            masks.push(m.to_vec());
        }
    })?;
    Ok((feats, target.map(|_| masks)))
}
