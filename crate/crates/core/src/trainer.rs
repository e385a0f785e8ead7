//! Mini-batch Adam training of the transition table, lambda and projection.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingConfig;
use crate::emission::{EmissionMatrix, Scorer};
use crate::error::{Error, Result};
use crate::model::{Model, PreparedEpisode};
use crate::optim::{adam_step, AdamConfig, AdamState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Initial lambda; drawn from U[0, 1] with the run seed when absent.
    pub lambda_init: Option<f64>,
    pub early_stop_patience_epochs: usize,
    pub max_epochs: usize,
    pub rng_seed: u64,
    pub use_dependency_transfer: bool,
    pub use_pairwise: bool,
    pub learnable_lambda: bool,
    /// Learn a start vector over `O`/`B`/`I` in addition to the table.
    pub use_start: bool,
    pub scorer: Scorer,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-5,
            lambda_init: None,
            early_stop_patience_epochs: 2,
            max_epochs: 20,
            rng_seed: 0,
            use_dependency_transfer: true,
            use_pairwise: true,
            learnable_lambda: true,
            use_start: false,
            scorer: Scorer::Nmn,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 || self.early_stop_patience_epochs == 0 {
            return Err(Error::Config(
                "max_epochs and early_stop_patience_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn init_lambda(&self) -> f64 {
        self.lambda_init.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            rng.set_stream(u64::MAX);
            rng.random_range(0.0..1.0)
        })
    }

    /// Fresh model for this configuration.
    pub fn init_model(&self, embedding: &EmbeddingConfig) -> Model {
        Model::new(
            self.scorer,
            self.use_dependency_transfer,
            self.use_start,
            self.init_lambda(),
            self.learnable_lambda,
            embedding.projection.then_some(embedding.dim),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

/// Optimizer state needed to continue an interrupted run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub last: Model,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub best_dev_loss: Option<f64>,
    pub stale_epochs: usize,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Parameters with the lowest dev loss so far.
    pub model: Model,
    pub train_config: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub history: Vec<EpochLoss>,
    #[serde(default)]
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, self)?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} is not supported (expected {})",
                ckpt.format_version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

pub fn write_loss_csv<W: Write>(mut out: W, history: &[EpochLoss]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,dev_loss")?;
    for h in history {
        writeln!(out, "{},{},{}", h.epoch, h.train_loss, h.dev_loss)?;
    }
    Ok(())
}

/// Training episodes whose gold tags all have support evidence; the others
/// would carry the absent-tag sentinel in the gold path.
pub fn usable_episodes(episodes: &[PreparedEpisode]) -> Vec<&PreparedEpisode> {
    episodes.iter().filter(|e| e.gold_supported()).collect()
}

/// Emissions do not depend on the trained parameters unless a projection is
/// learned, so they are computed once.
fn cached_emissions(model: &Model, episodes: &[&PreparedEpisode]) -> Option<Vec<EmissionMatrix>> {
    model
        .projection
        .is_none()
        .then(|| episodes.par_iter().map(|e| model.emissions(e)).collect())
}

fn mean_loss(model: &Model, episodes: &[&PreparedEpisode], cache: Option<&[EmissionMatrix]>) -> f64 {
    if episodes.is_empty() {
        return f64::NAN;
    }
    let losses: Vec<f64> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| model.loss(e, cache.map(|c| &c[i])))
        .collect();
    losses.iter().sum::<f64>() / episodes.len() as f64
}

/// Trains from scratch, or continues `resume` when given. `on_epoch` sees the
/// checkpoint after every epoch (for saving); the final checkpoint is returned.
pub fn train(
    train_set: &[PreparedEpisode],
    dev_set: &[PreparedEpisode],
    config: &TrainConfig,
    embedding: &EmbeddingConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    let train_domains: BTreeSet<&str> = train_set.iter().map(|e| e.episode.domain.as_str()).collect();
    if let Some(shared) = dev_set
        .iter()
        .find(|e| train_domains.contains(e.episode.domain.as_str()))
    {
        return Err(Error::Config(format!(
            "domain `{}` appears in both train and dev episodes",
            shared.episode.domain
        )));
    }

    let train_eps = usable_episodes(train_set);
    let skipped = train_set.len() - train_eps.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} training episodes whose query uses tags absent from the support set");
    }
    if train_eps.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let dev_eps = usable_episodes(dev_set);
    if dev_eps.len() < dev_set.len() {
        log::warn!(
            "dev loss ignores {} episodes whose query uses tags absent from the support set",
            dev_set.len() - dev_eps.len()
        );
    }

    let (mut ckpt, mut state) = match resume {
        Some(mut c) => {
            let state = c
                .resume
                .take()
                .ok_or_else(|| Error::Config("checkpoint has no resume state".into()))?;
            c.train_config.max_epochs = config.max_epochs;
            (c, state)
        }
        None => {
            let model = config.init_model(embedding);
            let adam = AdamState::new(model.num_params());
            let ckpt = Checkpoint {
                format_version: CHECKPOINT_VERSION,
                model: model.clone(),
                train_config: config.clone(),
                embedding: embedding.clone(),
                history: Vec::new(),
                resume: None,
            };
            let state = ResumeState {
                last: model,
                adam,
                epochs_done: 0,
                best_dev_loss: None,
                stale_epochs: 0,
                stopped: false,
            };
            (ckpt, state)
        }
    };

    let mut model = state.last.clone();
    let train_cache = cached_emissions(&model, &train_eps);
    let dev_cache = cached_emissions(&model, &dev_eps);

    while !state.stopped && state.epochs_done < config.max_epochs {
        let epoch = state.epochs_done + 1;
        let mut order: Vec<usize> = (0..train_eps.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut params = model.params();
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| model.loss_and_gradient(train_eps[i], train_cache.as_ref().map(|c| &c[i])))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    value: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut params, &grad, &mut state.adam, config.learning_rate, &config.adam);
            model.set_params(&params);
        }
        let train_loss = epoch_loss / train_eps.len() as f64;
        let dev_loss = if dev_eps.is_empty() {
            mean_loss(&model, &train_eps, train_cache.as_deref())
        } else {
            mean_loss(&model, &dev_eps, dev_cache.as_deref())
        };
        if !dev_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, value: dev_loss });
        }
        log::info!("epoch {epoch}: train loss {train_loss:.6}, dev loss {dev_loss:.6}");
        ckpt.history.push(EpochLoss {
            epoch,
            train_loss,
            dev_loss,
        });

        if state.best_dev_loss.is_none_or(|best| dev_loss < best) {
            state.best_dev_loss = Some(dev_loss);
            state.stale_epochs = 0;
            ckpt.model = model.clone();
        } else {
            state.stale_epochs += 1;
        }
        state.epochs_done = epoch;
        state.stopped = state.stale_epochs >= config.early_stop_patience_epochs;
        state.last = model.clone();
        ckpt.resume = Some(state.clone());
        on_epoch(&ckpt)?;
    }
    Ok(ckpt)
}
