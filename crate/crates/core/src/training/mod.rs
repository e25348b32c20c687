//! Metric-learning training: balanced sampling, multi-similarity loss,
//! AdamW and a warmup/step-decay schedule.

pub mod loss;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use loss::{multi_similarity_loss, MsLossParams};
pub use optim::{AdamW, AdamWConfig};
pub use sampler::{epoch_batches, sample_batch, Batch, BatchSpec};
pub use schedule::LrSchedule;
pub use trainer::{embed_samples, evaluate_split, train, train_model, EpochMetrics, TrainConfig, TrainOutcome, TrainOutputs};
