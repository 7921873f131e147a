use std::path::PathBuf;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::{episode_loss, sample_from, EpisodeSpec, TrainingPool};
use super::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::classifiers::DEFAULT_TAU_T;
use crate::dataio::{write_archive, TensorArchive};
use crate::encoders::{GeneratorParams, LanguageEncoder, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Episodes per epoch; `None` means enough episodes to visit every
    /// eligible class once in expectation, `ceil(classes / class_batch)`.
    pub episodes_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub tau_t: f64,
    pub seed: u64,
    pub episode: EpisodeSpec,
    /// Write a checkpoint every this many steps (requires `checkpoint_path`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    /// Where to write the state dump when the loss stops being finite.
    pub dump_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            episodes_per_epoch: None,
            base_lr: 2e-4,
            tau_t: DEFAULT_TAU_T,
            seed: 0,
            episode: EpisodeSpec::default(),
            checkpoint_every: None,
            checkpoint_path: None,
            dump_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.tau_t > 0.0) {
            return Err(Error::Validation(format!(
                "tau_t must be positive, got {}",
                self.tau_t
            )));
        }
        if self.episodes_per_epoch == Some(0) {
            return Err(Error::Validation("episodes per epoch must be >= 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Validation("checkpoint interval must be >= 1".into()));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_path.is_none() {
            return Err(Error::Validation(
                "checkpoint interval given without a checkpoint path".into(),
            ));
        }
        self.episode.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub m_min: usize,
    pub m_max: usize,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss,m_min,m_max";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{},{},{}",
            self.step, self.epoch, self.lr, self.loss, self.m_min, self.m_max
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LogRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GeneratorParams<f32>,
    pub log: Vec<LogRow>,
}

fn write_checkpoint(
    path: &std::path::Path,
    params: &GeneratorParams<f32>,
    step: Option<usize>,
) -> Result<()> {
    let mut a = TensorArchive::new();
    params.write_to(&mut a)?;
    if let Some(step) = step {
        a.insert("train.step", Tensor::scalar(step as f32))?;
    }
    write_archive(path, &a)
}

fn dump_on_divergence(
    e: Error,
    config: &TrainConfig,
    params: &GeneratorParams<f32>,
    step: usize,
) -> Error {
    let Some(path) = &config.dump_path else {
        return e;
    };
    match write_checkpoint(path, params, Some(step)) {
        Ok(()) => Error::NonFinite(format!(
            "{e}; state before the step dumped to {}",
            path.display()
        )),
        Err(w) => Error::NonFinite(format!("{e}; dump to {} failed: {w}", path.display())),
    }
}

/// Trains `init` on episodes drawn from `pool`; the encoder is only read.
///
/// Deterministic for a fixed `config.seed`: one rng drives episode sampling
/// and dropout in a fixed order.
pub fn train(
    pool: &TrainingPool<f32>,
    lang: &LanguageEncoder<f32>,
    init: GeneratorParams<f32>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if init.width() != lang.width() {
        return Err(Error::dim(
            "train",
            format!(
                "generator width {} vs encoder width {}",
                init.width(),
                lang.width()
            ),
        ));
    }
    let eligible = pool.eligible(&config.episode)?;
    let per_epoch = config
        .episodes_per_epoch
        .unwrap_or_else(|| eligible.len().div_ceil(config.episode.class_batch));
    let total = config.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init;
    let mut state = {
        let refs: Vec<&Tensor<f32>> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
        AdamState::new(AdamConfig::default(), &refs)
    };
    let mut log = Vec::with_capacity(total);
    info!(
        "training on {} classes: {} epochs x {per_epoch} episodes, class_batch {}, k {}",
        eligible.len(),
        config.epochs,
        config.episode.class_batch,
        config.episode.k
    );

    for step in 0..total {
        let epoch = step / per_epoch;
        let lr = cosine_lr(config.base_lr, step, total);
        let episode = sample_from(pool, &eligible, &config.episode, &mut rng)?;

        let mut g = Graph::new();
        let gv = params.bind(&mut g, true)?;
        let lv = lang.bind(&mut g)?;
        let result = episode_loss(
            &mut g,
            &gv,
            &lv,
            &episode,
            config.tau_t,
            Mode::Train(&mut rng),
        )
        .and_then(|l| {
            let value = g.value(l.loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("episode loss at step {step}")));
            }
            g.backward(l.loss)?;
            Ok(value)
        });
        let step_result = result.and_then(|loss| {
            let grads: Vec<Tensor<f32>> = gv
                .vars()
                .into_iter()
                .map(|v| g.grad(v).expect("generator leaves are trainable"))
                .collect();
            if grads.iter().all(|t| t.is_finite()) {
                Ok((loss, grads))
            } else {
                Err(Error::NonFinite(format!(
                    "generator gradient at step {step}"
                )))
            }
        });
        let (loss, grads) = match step_result {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => {
                return Err(dump_on_divergence(e, config, &params, step))
            }
            Err(e) => return Err(e),
        };
        let mut tensors = params.tensors_mut();
        adam_step(&mut tensors, &grads, &mut state, lr)?;

        let (m_min, m_max) = episode.m_range();
        debug!("step {step} lr {lr:.3e} loss {loss:.5}");
        log.push(LogRow {
            step,
            epoch,
            lr,
            loss,
            m_min,
            m_max,
        });
        if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
            if (step + 1) % every == 0 || step + 1 == total {
                write_checkpoint(path, &params, Some(step + 1))?;
            }
        }
    }
    Ok(TrainOutcome { params, log })
}
