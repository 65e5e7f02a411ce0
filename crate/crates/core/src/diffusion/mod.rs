//! Toy conditional DDPM: schedule, concept-conditioned MLP noise predictor,
//! training with null-token dropout, and ancestral sampling.

mod denoiser;
pub(crate) mod fit;
mod sample;
mod schedule;
mod train;

pub use denoiser::{time_embedding, ConditionalDenoiser, DenoiserSpec};
pub use fit::{RowSet, TrainableMask};
pub use sample::sample;
pub(crate) use schedule::noise_with;
pub use schedule::{NoiseSchedule, ScheduleSpec};
pub use train::{train, TrainConfig, TrainOutcome};
