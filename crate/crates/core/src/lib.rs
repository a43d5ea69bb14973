#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod kv;
pub mod net;
pub mod sample;
pub mod schedule;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use checkpoint::{fingerprint, CheckpointMeta, Vocoder};
pub use corpus::CorpusConfig;
pub use dsp::{MelConfig, MelExtractor, MelSpectrogram, MetricConfig, Scores, Waveform};
pub use error::{Error, ErrorCategory, Result};
pub use net::{DenoiserModel, ModelConfig};
pub use sample::{synthesize, NoisePredictor, SigmaRule, SynthRequest};
pub use schedule::{parse_schedule_spec, NoiseSchedule};
pub use sweep::{run_sweep, Scored, SweepSpec, ValidationSet};
pub use train::{ConditioningMode, TrainConfig, TrainState};
