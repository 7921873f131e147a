//! Episodic pre-training of the visual token generator.

mod episode;
mod optim;
mod train;

pub use episode::{
    episode_loss, sample_episode, Episode, EpisodeClass, EpisodeLoss, EpisodeSpec, TrainingPool,
};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use train::{log_to_csv, train, LogRow, TrainConfig, TrainOutcome};
