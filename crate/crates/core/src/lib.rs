//! Ending-guided story interpolation.
//!
//! Given a beginning sentence, an ending sentence and a target length, the
//! engine grows a story by repeatedly picking a gap, sampling bridging
//! candidates from a small decoder-only transformer prompted with the gap's
//! right then left neighbour, and keeping the candidate a coherence
//! classifier likes best.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. File formats, checkpoints and the command-line driver live in
//! the companion `interpol` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod interpolator;
pub mod nn;
pub mod ranker;
pub mod training;

pub use corpus::{CorpusSplit, Story, StorySegment, Vocab};
pub use error::{CoreError, Result};
pub use eval::{AblationReport, ProxyReport, RankerMetrics, ScheduleReport};
pub use generator::{GenerationContext, GeneratorModel, SamplerConfig, TrainingExample};
pub use interpolator::{GenerationTrace, InterpolationRequest, InterpolationState, Schedule, StepTrace};
pub use nn::{ModelConfig, ModelKind, Transformer};
pub use ranker::{LabeledSegment, NegativeType, RankerModel};
pub use training::{LossTrace, TrainHyper};

/// Seedable generator used for every random choice in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a plain integer seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
