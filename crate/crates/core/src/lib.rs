//! Hybrid acoustic echo control: a subband NLMS echo canceller followed by a
//! Bark-scale recurrent mask postfilter, with scenario generation, loss and
//! metrics for validating it.
//!
//! The signal-processing types are generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below name the common instantiations.

pub mod bark;
pub mod config;
pub mod error;
pub mod framing;
pub mod io;
pub mod lec;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod postfilter;
pub mod scalar;
pub mod scenario;
pub mod subband_fb;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use framing::{SpectralFrame, Stft, StftConfig};
pub use lec::LecConfig;
pub use metrics::{Condition, MetricReport};
pub use pipeline::{process_stream, MaskSource, Pipeline};
pub use postfilter::{ModelArch, ModelWeights, Postfilter};
pub use scalar::Scalar;
pub use scenario::{Scenario, ScenarioSpec};
pub use subband_fb::FilterbankConfig;

pub type StftF32 = framing::Stft<f32>;
pub type StftF64 = framing::Stft<f64>;
pub type PrototypeFilterF32 = subband_fb::PrototypeFilter<f32>;
pub type PrototypeFilterF64 = subband_fb::PrototypeFilter<f64>;
pub type EchoCancellerF32 = lec::SubbandEchoCanceller<f32>;
pub type EchoCancellerF64 = lec::SubbandEchoCanceller<f64>;
pub type BarkMapF32 = bark::BarkMap<f32>;
pub type BarkMapF64 = bark::BarkMap<f64>;
pub type PostfilterF32 = postfilter::Postfilter<f32>;
pub type PostfilterF64 = postfilter::Postfilter<f64>;
pub type PipelineF32 = pipeline::Pipeline<f32>;
pub type PipelineF64 = pipeline::Pipeline<f64>;
pub type ScenarioF32 = scenario::Scenario<f32>;
pub type ScenarioF64 = scenario::Scenario<f64>;
