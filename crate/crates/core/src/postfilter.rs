//! FC + GRU mask estimator: architecture manifest, weights file, inference
//! engine, feature assembly and the footprint audit.
//!
//! GRU convention (frozen, recorded in every weights file as
//! `gru rzn-dual-bias`): gate blocks are stacked in the order reset, update,
//! candidate; both the input and recurrent paths carry a bias.
//!
//! ```text
//! r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! FC kernels are stored `[out][in]` row-major.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bark::BarkMap;
use crate::error::{Error, Result};
use crate::framing::SpectralFrame;
use crate::io::Cursor;
use crate::scalar::{dot, Scalar};

pub const WEIGHTS_MAGIC: &str = "AECPF-WEIGHTS";
pub const WEIGHTS_VERSION: u32 = 1;
pub const GRU_CONVENTION: &str = "rzn-dual-bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Fc,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            _ => return Err(Error::Format(format!("unknown activation '{s}'"))),
        })
    }

    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    /// For GRU layers this is the candidate activation and must be `Tanh`.
    pub activation: Activation,
}

impl LayerSpec {
    pub fn fc(width: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Fc,
            width,
            activation,
        }
    }

    pub fn gru(width: usize) -> Self {
        Self {
            kind: LayerKind::Gru,
            width,
            activation: Activation::Tanh,
        }
    }
}

/// Spectral mapping the network is wrapped in: `bins` DFT bins pooled into
/// `bands` bands (three pooled inputs, one un-mapped output).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingSpec {
    pub bins: usize,
    pub bands: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub mapping: Option<MappingSpec>,
}

impl ModelArch {
    /// The shipped stack for `bands` Bark bands and a `bins`-bin spectrum.
    pub fn default_for(bins: usize, bands: usize) -> Self {
        Self {
            input_dim: 3 * bands,
            layers: vec![
                LayerSpec::fc(400, Activation::Relu),
                LayerSpec::gru(312),
                LayerSpec::gru(312),
                LayerSpec::fc(400, Activation::Relu),
                LayerSpec::fc(400, Activation::Relu),
                LayerSpec::fc(bands, Activation::Sigmoid),
            ],
            mapping: Some(MappingSpec { bins, bands }),
        }
    }

    pub fn empty() -> Self {
        Self {
            input_dim: 0,
            layers: Vec::new(),
            mapping: None,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.width)
    }

    /// Number of bands the network reads per signal.
    pub fn num_bands(&self) -> usize {
        self.input_dim / 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        if self.input_dim == 0 || self.input_dim % 3 != 0 {
            return Err(Error::Config(format!(
                "input dimension {} is not three feature blocks",
                self.input_dim
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.width == 0 {
                return Err(Error::Config(format!("layer {i} has zero width")));
            }
            if l.kind == LayerKind::Gru && l.activation != Activation::Tanh {
                return Err(Error::Config(format!(
                    "layer {i}: GRU candidate activation must be tanh"
                )));
            }
        }
        if self.output_dim() != self.num_bands() {
            return Err(Error::Config(format!(
                "output width {} does not match {} bands",
                self.output_dim(),
                self.num_bands()
            )));
        }
        let last = self.layers.last().unwrap();
        if last.kind != LayerKind::Fc || last.activation != Activation::Sigmoid {
            return Err(Error::Config("output layer must be a sigmoid FC".into()));
        }
        if let Some(m) = self.mapping {
            if m.bands != self.num_bands() {
                return Err(Error::Config(format!(
                    "mapping has {} bands, network expects {}",
                    m.bands,
                    self.num_bands()
                )));
            }
        }
        Ok(())
    }

    /// (input width, layer) pairs.
    fn chain(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        let mut inp = self.input_dim;
        self.layers.iter().map(move |l| {
            let i = inp;
            inp = l.width;
            (i, l)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub params: u64,
    pub macs_per_frame: u64,
    pub macs_per_s: f64,
}

impl fmt::Display for Footprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "params {} ({:.3} M), MACs/frame {}, MACs/s {:.2} M",
            self.params,
            self.params as f64 / 1e6,
            self.macs_per_frame,
            self.macs_per_s / 1e6
        )
    }
}

/// Exact parameter and multiply-accumulate count of an architecture.
///
/// FC: `in*out + out` params, `in*out` MACs. GRU (dual bias):
/// `3*(in*h + h*h + 2h)` params, `3*(in*h + h*h)` MACs. The Bark pooling of
/// the three input spectra and the mask un-mapping are counted as dense
/// `bins x bands` products when the arch carries a mapping.
pub fn audit_footprint(arch: &ModelArch, frame_rate: f64) -> Footprint {
    let mut params = 0u64;
    let mut macs = 0u64;
    for (inp, l) in arch.chain() {
        let (i, o) = (inp as u64, l.width as u64);
        match l.kind {
            LayerKind::Fc => {
                params += i * o + o;
                macs += i * o;
            }
            LayerKind::Gru => {
                params += 3 * (i * o + o * o + 2 * o);
                macs += 3 * (i * o + o * o);
            }
        }
    }
    if let Some(m) = arch.mapping {
        macs += 4 * (m.bins * m.bands) as u64;
    }
    Footprint {
        params,
        macs_per_frame: macs,
        macs_per_s: macs as f64 * frame_rate,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Fc {
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    Gru {
        weight_ih: Vec<f32>,
        weight_hh: Vec<f32>,
        bias_ih: Vec<f32>,
        bias_hh: Vec<f32>,
    },
}

impl LayerWeights {
    fn tensors(&self) -> Vec<(&'static str, &[f32])> {
        match self {
            LayerWeights::Fc { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerWeights::Gru {
                weight_ih,
                weight_hh,
                bias_ih,
                bias_hh,
            } => vec![
                ("weight_ih", weight_ih),
                ("weight_hh", weight_hh),
                ("bias_ih", bias_ih),
                ("bias_hh", bias_hh),
            ],
        }
    }
}

fn tensor_shapes(inp: usize, l: &LayerSpec) -> Vec<(&'static str, Vec<usize>)> {
    let h = l.width;
    match l.kind {
        LayerKind::Fc => vec![("weight", vec![h, inp]), ("bias", vec![h])],
        LayerKind::Gru => vec![
            ("weight_ih", vec![3 * h, inp]),
            ("weight_hh", vec![3 * h, h]),
            ("bias_ih", vec![3 * h]),
            ("bias_hh", vec![3 * h]),
        ],
    }
}

/// Network parameters, stored as f32 (the file precision).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    arch: ModelArch,
    layers: Vec<LayerWeights>,
}

impl ModelWeights {
    pub fn new(arch: ModelArch, layers: Vec<LayerWeights>) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.layers.len() {
            return Err(Error::shape("layer count", arch.layers.len(), layers.len()));
        }
        for ((inp, spec), w) in arch.chain().zip(&layers) {
            let shapes = tensor_shapes(inp, spec);
            let tensors = w.tensors();
            if shapes.len() != tensors.len() {
                return Err(Error::Config("layer kind does not match manifest".into()));
            }
            for ((name, shape), (_, data)) in shapes.iter().zip(&tensors) {
                let n: usize = shape.iter().product();
                if data.len() != n {
                    return Err(Error::shape(*name, n, data.len()));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("model weights"));
                }
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn zeros(arch: ModelArch) -> Result<Self> {
        Self::filled(arch, |_| 0.0)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization, deterministic in `seed`.
    pub fn random(arch: ModelArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::filled(arch, move |fan_in| {
            let a = 1.0 / (fan_in.max(1) as f32).sqrt();
            rng.random_range(-a..=a)
        })
    }

    fn filled(arch: ModelArch, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .chain()
            .map(|(inp, spec)| {
                let mut gen = |n: usize, fan: usize| (0..n).map(|_| f(fan)).collect::<Vec<_>>();
                let h = spec.width;
                match spec.kind {
                    LayerKind::Fc => LayerWeights::Fc {
                        weight: gen(h * inp, inp),
                        bias: gen(h, inp),
                    },
                    LayerKind::Gru => LayerWeights::Gru {
                        weight_ih: gen(3 * h * inp, h),
                        weight_hh: gen(3 * h * h, h),
                        bias_ih: gen(3 * h, h),
                        bias_hh: gen(3 * h, h),
                    },
                }
            })
            .collect();
        Self::new(arch, layers)
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let a = &self.arch;
        let _ = writeln!(out, "{WEIGHTS_MAGIC}");
        let _ = writeln!(out, "version {WEIGHTS_VERSION}");
        let _ = writeln!(out, "gru {GRU_CONVENTION}");
        let _ = writeln!(out, "input_dim {}", a.input_dim);
        match a.mapping {
            Some(m) => {
                let _ = writeln!(out, "mapping {} {}", m.bins, m.bands);
            }
            None => {
                let _ = writeln!(out, "mapping none");
            }
        }
        let _ = writeln!(out, "layers {}", a.layers.len());
        for l in &a.layers {
            let kind = match l.kind {
                LayerKind::Fc => "fc",
                LayerKind::Gru => "gru",
            };
            let _ = writeln!(out, "layer {kind} {} {}", l.width, l.activation.name());
        }
        for (i, ((inp, spec), _)) in a.chain().zip(&self.layers).enumerate() {
            for (name, shape) in tensor_shapes(inp, spec) {
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                let _ = writeln!(out, "tensor layer{i}.{name} {}", dims.join(" "));
            }
        }
        let _ = writeln!(out, "end");
        for w in &self.layers {
            for (_, data) in w.tensors() {
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.line()? != WEIGHTS_MAGIC {
            return Err(Error::Format("not a postfilter weights file".into()));
        }
        let version: u32 = field(cur.line()?, "version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let conv = keyed(cur.line()?, "gru")?;
        if conv != [GRU_CONVENTION] {
            return Err(Error::Format(format!("unsupported GRU convention {conv:?}")));
        }
        let input_dim: usize = field(cur.line()?, "input_dim")?;
        let mapping = match keyed(cur.line()?, "mapping")?.as_slice() {
            ["none"] => None,
            [bins, bands] => Some(MappingSpec {
                bins: num(bins)?,
                bands: num(bands)?,
            }),
            _ => return Err(Error::Format("bad mapping line".into())),
        };
        let n: usize = field(cur.line()?, "layers")?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let parts = keyed(cur.line()?, "layer")?;
            let [kind, width, act] = parts.as_slice() else {
                return Err(Error::Format("bad layer line".into()));
            };
            let kind = match *kind {
                "fc" => LayerKind::Fc,
                "gru" => LayerKind::Gru,
                k => return Err(Error::Format(format!("unknown layer kind '{k}'"))),
            };
            layers.push(LayerSpec {
                kind,
                width: num(width)?,
                activation: Activation::parse(act)?,
            });
        }
        let arch = ModelArch {
            input_dim,
            layers,
            mapping,
        };
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut expected = Vec::new();
        for (i, (inp, spec)) in arch.chain().enumerate() {
            for (name, shape) in tensor_shapes(inp, spec) {
                expected.push((format!("layer{i}.{name}"), shape));
            }
        }
        for (name, shape) in &expected {
            let parts = keyed(cur.line()?, "tensor")?;
            let (got, dims) = parts
                .split_first()
                .ok_or_else(|| Error::Format("bad tensor line".into()))?;
            let dims = dims.iter().map(|d| num(d)).collect::<Result<Vec<usize>>>()?;
            if got != name || &dims != shape {
                return Err(Error::Format(format!(
                    "tensor {got} {dims:?} does not match manifest {name} {shape:?}"
                )));
            }
        }
        if cur.line()? != "end" {
            return Err(Error::Format("missing header terminator".into()));
        }
        let mut weights = Vec::with_capacity(arch.layers.len());
        for (inp, spec) in arch.chain() {
            let mut data = tensor_shapes(inp, spec)
                .into_iter()
                .map(|(_, s)| cur.f32s(s.iter().product()))
                .collect::<Result<Vec<_>>>()?
                .into_iter();
            let mut next = || data.next().unwrap();
            weights.push(match spec.kind {
                LayerKind::Fc => LayerWeights::Fc {
                    weight: next(),
                    bias: next(),
                },
                LayerKind::Gru => LayerWeights::Gru {
                    weight_ih: next(),
                    weight_hh: next(),
                    bias_ih: next(),
                    bias_hh: next(),
                },
            });
        }
        cur.finish()?;
        Self::new(arch, weights).map_err(|e| match e {
            Error::NonFinite(_) => e,
            other => Error::Format(other.to_string()),
        })
    }
}

fn num(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("expected an integer, found '{s}'")))
}

fn keyed<'a>(line: &'a str, key: &str) -> Result<Vec<&'a str>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(Error::Format(format!("expected '{key}' line, found '{line}'")));
    }
    Ok(it.collect())
}

fn field<V: std::str::FromStr>(line: &str, key: &str) -> Result<V> {
    match keyed(line, key)?.as_slice() {
        [v] => v
            .parse()
            .map_err(|_| Error::Format(format!("bad value in '{line}'"))),
        _ => Err(Error::Format(format!("bad '{key}' line"))),
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

enum Layer<T> {
    Fc {
        inp: usize,
        out: usize,
        weight: Vec<T>,
        bias: Vec<T>,
        act: Activation,
    },
    Gru {
        inp: usize,
        hidden: usize,
        weight_ih: Vec<T>,
        weight_hh: Vec<T>,
        bias_ih: Vec<T>,
        bias_hh: Vec<T>,
    },
}

/// Immutable inference engine; share one across streams.
pub struct Postfilter<T> {
    arch: ModelArch,
    layers: Vec<Layer<T>>,
    max_width: usize,
}

/// Per-stream recurrent state plus scratch space.
#[derive(Debug, Clone)]
pub struct PostfilterState<T> {
    hidden: Vec<Vec<T>>,
    buf_a: Vec<T>,
    buf_b: Vec<T>,
    gi: Vec<T>,
    gh: Vec<T>,
}

impl<T: Scalar> PostfilterState<T> {
    pub fn hidden(&self) -> &[Vec<T>] {
        &self.hidden
    }

    pub fn reset(&mut self) {
        self.hidden
            .iter_mut()
            .for_each(|h| h.iter_mut().for_each(|v| *v = T::zero()));
    }
}

impl<T: Scalar> Postfilter<T> {
    pub fn new(weights: &ModelWeights) -> Self {
        let cv = |v: &[f32]| v.iter().map(|&x| T::of(f64::from(x))).collect::<Vec<T>>();
        let arch = weights.arch.clone();
        let layers = arch
            .chain()
            .zip(&weights.layers)
            .map(|((inp, spec), w)| match w {
                LayerWeights::Fc { weight, bias } => Layer::Fc {
                    inp,
                    out: spec.width,
                    weight: cv(weight),
                    bias: cv(bias),
                    act: spec.activation,
                },
                LayerWeights::Gru {
                    weight_ih,
                    weight_hh,
                    bias_ih,
                    bias_hh,
                } => Layer::Gru {
                    inp,
                    hidden: spec.width,
                    weight_ih: cv(weight_ih),
                    weight_hh: cv(weight_hh),
                    bias_ih: cv(bias_ih),
                    bias_hh: cv(bias_hh),
                },
            })
            .collect();
        let max_width = arch
            .layers
            .iter()
            .map(|l| l.width)
            .chain(std::iter::once(arch.input_dim))
            .max()
            .unwrap_or(0);
        Self {
            arch,
            layers,
            max_width,
        }
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn num_bands(&self) -> usize {
        self.arch.num_bands()
    }

    pub fn new_state(&self) -> PostfilterState<T> {
        let hidden = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Gru { hidden, .. } => Some(vec![T::zero(); *hidden]),
                Layer::Fc { .. } => None,
            })
            .collect();
        let max_gate = 3 * self.max_width;
        PostfilterState {
            hidden,
            buf_a: vec![T::zero(); self.max_width],
            buf_b: vec![T::zero(); self.max_width],
            gi: vec![T::zero(); max_gate],
            gh: vec![T::zero(); max_gate],
        }
    }

    /// One frame: features of E, Y, X (each `B` log powers) → band mask.
    pub fn infer_mask(
        &self,
        state: &mut PostfilterState<T>,
        feat_e: &[T],
        feat_y: &[T],
        feat_x: &[T],
        mask: &mut [T],
    ) -> Result<()> {
        let b = self.num_bands();
        for (what, v) in [("E features", feat_e), ("Y features", feat_y), ("X features", feat_x)] {
            if v.len() != b {
                return Err(Error::shape(what, b, v.len()));
            }
        }
        if mask.len() != b {
            return Err(Error::shape("band mask", b, mask.len()));
        }
        if state.hidden.len() != self.layers.iter().filter(|l| matches!(l, Layer::Gru { .. })).count()
            || state.buf_a.len() != self.max_width
        {
            return Err(Error::InvalidInput("state belongs to a different model".into()));
        }
        let mut input = std::mem::take(&mut state.buf_a);
        let mut output = std::mem::take(&mut state.buf_b);
        input[..b].copy_from_slice(feat_e);
        input[b..2 * b].copy_from_slice(feat_y);
        input[2 * b..3 * b].copy_from_slice(feat_x);
        let mut gru_idx = 0;
        for layer in &self.layers {
            match layer {
                Layer::Fc {
                    inp,
                    out,
                    weight,
                    bias,
                    act,
                } => {
                    let x = &input[..*inp];
                    for (o, (row, &bi)) in output[..*out]
                        .iter_mut()
                        .zip(weight.chunks_exact(*inp).zip(bias))
                    {
                        *o = act.apply(dot(row, x) + bi);
                    }
                }
                Layer::Gru {
                    inp,
                    hidden,
                    weight_ih,
                    weight_hh,
                    bias_ih,
                    bias_hh,
                } => {
                    let (n, h_len) = (*inp, *hidden);
                    let h = &mut state.hidden[gru_idx];
                    gru_idx += 1;
                    let x = &input[..n];
                    for (g, (row, &bi)) in state.gi[..3 * h_len]
                        .iter_mut()
                        .zip(weight_ih.chunks_exact(n).zip(bias_ih))
                    {
                        *g = dot(row, x) + bi;
                    }
                    for (g, (row, &bi)) in state.gh[..3 * h_len]
                        .iter_mut()
                        .zip(weight_hh.chunks_exact(h_len).zip(bias_hh))
                    {
                        *g = dot(row, h) + bi;
                    }
                    let (gi, gh) = (&state.gi, &state.gh);
                    for j in 0..h_len {
                        let r = sigmoid(gi[j] + gh[j]);
                        let z = sigmoid(gi[h_len + j] + gh[h_len + j]);
                        let cand = (gi[2 * h_len + j] + r * gh[2 * h_len + j]).tanh();
                        h[j] = (T::one() - z) * cand + z * h[j];
                    }
                    output[..h_len].copy_from_slice(h);
                }
            }
            std::mem::swap(&mut input, &mut output);
        }
        for (m, &v) in mask.iter_mut().zip(&input[..b]) {
            *m = v.max(T::zero()).min(T::one());
        }
        state.buf_a = input;
        state.buf_b = output;
        if mask.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("postfilter output"));
        }
        Ok(())
    }
}

/// Log-compressed Bark features of one power spectrum.
pub fn features_into<T: Scalar>(
    map: &BarkMap<T>,
    power: &[T],
    floor: T,
    out: &mut [T],
) -> Result<()> {
    map.pool_energy_into(power, out)?;
    crate::bark::log_compress_in_place(out, floor);
    Ok(())
}

/// `Ŝ(k) = M(k) E(k)`.
pub fn apply_mask<T: Scalar>(e: &SpectralFrame<T>, bin_mask: &[T]) -> Result<SpectralFrame<T>> {
    let mut out = e.clone();
    apply_mask_in_place(&mut out.bins, bin_mask)?;
    Ok(out)
}

pub fn apply_mask_in_place<T: Scalar>(bins: &mut [Complex<T>], bin_mask: &[T]) -> Result<()> {
    if bins.len() != bin_mask.len() {
        return Err(Error::shape("bin mask", bins.len(), bin_mask.len()));
    }
    for (c, &m) in bins.iter_mut().zip(bin_mask) {
        *c = *c * m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_arch() -> ModelArch {
        ModelArch {
            input_dim: 6,
            layers: vec![
                LayerSpec::fc(5, Activation::Relu),
                LayerSpec::gru(4),
                LayerSpec::fc(2, Activation::Sigmoid),
            ],
            mapping: Some(MappingSpec { bins: 5, bands: 2 }),
        }
    }

    #[test]
    fn single_fc_footprint() {
        let arch = ModelArch {
            input_dim: 258,
            layers: vec![LayerSpec::fc(400, Activation::Relu)],
            mapping: None,
        };
        let fp = audit_footprint(&arch, 125.0);
        assert_eq!(fp.params, 103_600);
        assert_eq!(fp.macs_per_frame, 103_200);
    }

    #[test]
    fn empty_footprint() {
        let fp = audit_footprint(&ModelArch::empty(), 125.0);
        assert_eq!((fp.params, fp.macs_per_s), (0, 0.0));
    }

    #[test]
    fn default_arch_counts() {
        let fp = audit_footprint(&ModelArch::default_for(257, 86), 125.0);
        assert_eq!(fp.params, 1_677_926);
        assert_eq!(fp.macs_per_frame, 1_672_896 + 4 * 257 * 86);
    }

    #[test]
    fn arch_validation() {
        assert!(ModelArch::default_for(257, 86).validate().is_ok());
        let mut a = tiny_arch();
        a.layers[2].width = 3;
        assert!(a.validate().is_err());
        let mut a = tiny_arch();
        a.layers[1].activation = Activation::Relu;
        assert!(a.validate().is_err());
        assert!(ModelArch::empty().validate().is_err());
    }

    #[test]
    fn zero_weights_give_half_mask() {
        let w = ModelWeights::zeros(tiny_arch()).unwrap();
        let pf = Postfilter::<f64>::new(&w);
        let mut st = pf.new_state();
        let mut m = [0.0; 2];
        for _ in 0..3 {
            pf.infer_mask(&mut st, &[3.0, -1.0], &[0.5, 9.0], &[-4.0, 2.0], &mut m)
                .unwrap();
            assert_eq!(m, [0.5, 0.5]);
            assert!(st.hidden().iter().flatten().all(|&h| h == 0.0));
        }
    }

    #[test]
    fn inference_is_deterministic_and_shape_checked() {
        let w = ModelWeights::random(tiny_arch(), 3).unwrap();
        let pf = Postfilter::<f32>::new(&w);
        let (mut s1, mut s2) = (pf.new_state(), pf.new_state());
        let (mut m1, mut m2) = ([0.0f32; 2], [0.0f32; 2]);
        pf.infer_mask(&mut s1, &[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &mut m1).unwrap();
        pf.infer_mask(&mut s2, &[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &mut m2).unwrap();
        assert_eq!(m1, m2);
        assert!(pf.infer_mask(&mut s1, &[1.0], &[3.0, 4.0], &[5.0, 6.0], &mut m1).is_err());
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let w = ModelWeights::random(ModelArch::default_for(257, 86), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        w.save(&p).unwrap();
        assert_eq!(ModelWeights::load(&p).unwrap(), w);
    }

    #[test]
    fn corrupt_weights_rejected() {
        let w = ModelWeights::random(tiny_arch(), 1).unwrap();
        let bytes = w.to_bytes();
        assert!(matches!(
            ModelWeights::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(Error::Format(_))));
        let text = String::from_utf8_lossy(&bytes).replace("version 1", "version 7");
        assert!(ModelWeights::from_bytes(text.as_bytes()).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelWeights::from_bytes(&extra).is_err());
    }

    #[test]
    fn manifest_shape_mismatch_rejected() {
        let bytes = ModelWeights::random(tiny_arch(), 1).unwrap().to_bytes();
        let hdr_end = bytes.windows(4).position(|w| w == b"end\n").unwrap();
        let header = String::from_utf8(bytes[..hdr_end].to_vec()).unwrap();
        let tampered = header.replace("tensor layer0.weight 5 6", "tensor layer0.weight 6 5");
        let mut b2 = tampered.into_bytes();
        b2.extend_from_slice(&bytes[hdr_end..]);
        assert!(ModelWeights::from_bytes(&b2).is_err());
    }

    #[test]
    fn non_finite_weights_rejected() {
        let w = ModelWeights::zeros(tiny_arch()).unwrap();
        let mut layers = w.layers().to_vec();
        if let LayerWeights::Fc { bias, .. } = &mut layers[0] {
            bias[0] = f32::NAN;
        }
        assert!(matches!(
            ModelWeights::new(tiny_arch(), layers),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn apply_mask_examples() {
        let e = SpectralFrame {
            index: 0,
            bins: vec![Complex::<f64>::new(1.0, 2.0), Complex::new(-3.0, 0.5)],
        };
        assert_eq!(apply_mask(&e, &[1.0, 1.0]).unwrap(), e);
        let z = apply_mask(&e, &[0.0, 0.0]).unwrap();
        assert!(z.bins.iter().all(|c| c.norm() == 0.0));
        let h = apply_mask(&e, &[0.5, 0.5]).unwrap();
        for (a, b) in h.bins.iter().zip(&e.bins) {
            assert!((a.norm() - 0.5 * b.norm()).abs() < 1e-15);
            assert!((a.arg() - b.arg()).abs() < 1e-15);
        }
        assert!(apply_mask(&e, &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn mask_and_hidden_ranges(seed in 0u64..500, feats in prop::collection::vec(-12.0f64..6.0, 6)) {
            let w = ModelWeights::random(tiny_arch(), seed).unwrap();
            let pf = Postfilter::<f64>::new(&w);
            let mut st = pf.new_state();
            let mut m = [0.0; 2];
            for _ in 0..4 {
                pf.infer_mask(&mut st, &feats[..2], &feats[2..4], &feats[4..], &mut m).unwrap();
                prop_assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
                prop_assert!(st.hidden().iter().flatten().all(|&h| h > -1.0 && h < 1.0));
            }
        }

        #[test]
        fn stateless_layers_commute_with_frame_order(seed in 0u64..200,
            frames in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 3)) {
            let arch = ModelArch {
                input_dim: 6,
                layers: vec![LayerSpec::fc(7, Activation::Relu), LayerSpec::fc(2, Activation::Sigmoid)],
                mapping: None,
            };
            let pf = Postfilter::<f64>::new(&ModelWeights::random(arch, seed).unwrap());
            let run = |f: &Vec<f64>| {
                let mut st = pf.new_state();
                let mut m = [0.0; 2];
                pf.infer_mask(&mut st, &f[..2], &f[2..4], &f[4..], &mut m).unwrap();
                m
            };
            let fwd: Vec<_> = frames.iter().map(run).collect();
            let rev: Vec<_> = frames.iter().rev().map(run).collect();
            for (a, b) in fwd.iter().zip(rev.iter().rev()) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
