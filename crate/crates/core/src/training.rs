//! SGD with classical momentum over both encoders, checkpointing and resume.
//!
//! An epoch shuffles the training images with an RNG derived from
//! `(seed, epoch)` and cuts them into `⌊n/B⌋` batches. Because nothing else
//! carries random state across epochs, resuming from a checkpoint written at
//! the end of epoch `k` replays epochs `k+1..` exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::encoders::{InitScheme, Model, ModelConfig, ParseMode};
use crate::error::{Error, Result};
use crate::eval::{pointing_accuracy, recall_over_folds, Direction};
use crate::losses::{score_matrix, Batch, LossKind, Mining, TripletConfig};
use crate::tenfile;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::NPair,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn triplet(margin: f64) -> LossKind {
        LossKind::Triplet(TripletConfig {
            margin,
            mining: Mining::Hardest,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchSize(self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let LossKind::Triplet(t) = self.loss {
            if !(t.margin >= 0.0) {
                return Err(Error::Config(format!("margin {} must be nonnegative", t.margin)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// One buffer per parameter, in [`Model::named_tensors`] order.
    pub velocity: Vec<Tensor>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::init(config, seed, InitScheme::FanInUniform)?;
        let velocity = model.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(TrainState {
            model,
            velocity,
            epoch: 0,
            seed,
        })
    }
}

/// `v ← μ·v + g`, then `p ← p − lr·v`, for every parameter.
pub fn sgd_momentum_step(state: &mut TrainState, grads: &[Tensor], lr: f64, momentum: f64) -> Result<()> {
    let mut params = state.model.tensors_mut();
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::StateCorruption(format!(
            "{} parameters, {} velocity buffers, {} gradients",
            params.len(),
            state.velocity.len(),
            grads.len()
        )));
    }
    for (k, ((p, v), g)) in params.iter_mut().zip(state.velocity.iter_mut()).zip(grads).enumerate() {
        if p.shape() != v.shape() || p.shape() != g.shape() {
            return Err(Error::StateCorruption(format!(
                "parameter {k}: shape {:?}, velocity {:?}, gradient {:?}",
                p.shape(),
                v.shape(),
                g.shape()
            )));
        }
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients(model: &Model, batch: &Batch, loss: &LossKind) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = model.bind(&tape, true);
    let scores = score_matrix(batch, &vars)?;
    let l = loss.apply(&scores)?;
    let value = l.item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(l)?;
    Ok((value, vars.params().into_iter().map(|p| grads.wrt(p)).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_pointing: Option<f64>,
    pub val_recall_at_1: Option<f64>,
}

impl EpochMetrics {
    /// Tab-separated: epoch, mean loss, then the optional validation columns.
    pub fn log_line(&self) -> String {
        let mut s = format!("{}\t{:.6}", self.epoch, self.mean_loss);
        if let Some(p) = self.val_pointing {
            let _ = write!(s, "\t{p:.4}");
        }
        if let Some(r) = self.val_recall_at_1 {
            let _ = write!(s, "\t{r:.4}");
        }
        s
    }
}

pub fn metrics_log(metrics: &[EpochMetrics]) -> String {
    metrics.iter().map(|m| m.log_line() + "\n").collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Optional hooks around the optimization loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Evaluated after every epoch for the validation columns of the log.
    pub validation: Option<&'a Corpus>,
    /// Checkpoint target for `checkpoint_every`.
    pub checkpoint: Option<&'a Path>,
    /// Called with each epoch's metrics as soon as they are known.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

/// Train from freshly initialized parameters.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let model_cfg = ModelConfig::desk(corpus.vocab.len());
    let mut state = TrainState::new(&model_cfg, cfg.seed)?;
    let metrics = resume(&mut state, cfg, corpus, TrainHooks::default())?;
    Ok((state, metrics))
}

/// Continue `state` until `cfg.epochs` epochs are complete.
pub fn resume(
    state: &mut TrainState,
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut hooks: TrainHooks<'_>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::CorpusSize {
            available: corpus.len(),
            needed: cfg.batch_size,
        });
    }
    if state.seed != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, run asks for {}",
            state.seed, cfg.seed
        )));
    }
    let mut metrics = Vec::new();
    let batches = corpus.len() / cfg.batch_size;
    for epoch in state.epoch..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch = Batch::from_records(corpus, chunk, &mut rng)?;
            let loss = match cfg.loss {
                LossKind::Triplet(TripletConfig {
                    margin,
                    mining: Mining::Random(s),
                }) => LossKind::Triplet(TripletConfig {
                    margin,
                    mining: Mining::Random(s ^ ((epoch * batches + b) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                }),
                other => other,
            };
            let (value, grads) = batch_gradients(&state.model, &batch, &loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss: value,
                });
            }
            total += value;
            sgd_momentum_step(state, &grads, cfg.learning_rate, cfg.momentum)?;
        }
        state.epoch = epoch + 1;
        let (val_pointing, val_recall_at_1) = match hooks.validation {
            Some(val) => {
                let p = pointing_accuracy(&state.model, val, ParseMode::WordMode)?.accuracy();
                let fold = val.len().min(100);
                let r = recall_over_folds(&state.model, val, fold, 1, &[1], Direction::CaptionToImage)?;
                (Some(p), Some(r.recalls[0]))
            }
            None => (None, None),
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            mean_loss: total / batches as f64,
            val_pointing,
            val_recall_at_1,
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&m);
        }
        if let (Some(path), true) = (hooks.checkpoint, cfg.checkpoint_every > 0) {
            if state.epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(state, path)?;
            }
        }
        metrics.push(m);
    }
    Ok(metrics)
}

fn seed_words(seed: u64) -> Tensor {
    Tensor::vector(vec![(seed >> 32) as f64, (seed & 0xFFFF_FFFF) as f64])
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let named = state.model.named_tensors();
    if named.len() != state.velocity.len() {
        return Err(Error::StateCorruption("velocity count differs from parameter count".into()));
    }
    let config = state.model.config().to_tensor();
    let epoch = Tensor::scalar(state.epoch as f64);
    let seed = seed_words(state.seed);
    let param_names: Vec<String> = named.iter().map(|(n, _)| format!("param.{n}")).collect();
    let vel_names: Vec<String> = named.iter().map(|(n, _)| format!("velocity.{n}")).collect();
    let mut records: Vec<(&str, &Tensor)> = vec![("config.model", &config), ("meta.epoch", &epoch), ("meta.seed", &seed)];
    for (name, (_, t)) in param_names.iter().zip(&named) {
        records.push((name, t));
    }
    for (name, v) in vel_names.iter().zip(&state.velocity) {
        records.push((name, v));
    }
    tenfile::encode(&records)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let records = tenfile::decode(bytes, path)?;
    let corrupt = |reason: String| Error::Corruption {
        path: path.to_path_buf(),
        reason,
    };
    let config = ModelConfig::from_tensor(tenfile::find(&records, "config.model", path)?)?;
    let epoch = tenfile::find(&records, "meta.epoch", path)?;
    let seed = tenfile::find(&records, "meta.seed", path)?;
    if !epoch.is_scalar() || seed.numel() != 2 {
        return Err(corrupt("malformed metadata".into()));
    }
    let seed = ((seed.data()[0] as u64) << 32) | seed.data()[1] as u64;
    let mut model = Model::init(&config, 0, InitScheme::Zeros)?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut velocity = Vec::with_capacity(names.len());
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let p = tenfile::find(&records, &format!("param.{name}"), path)?;
        let v = tenfile::find(&records, &format!("velocity.{name}"), path)?;
        if p.shape() != slot.shape() || v.shape() != slot.shape() {
            return Err(corrupt(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                p.shape(),
                slot.shape()
            )));
        }
        *slot = p.clone();
        velocity.push(v.clone());
    }
    Ok(TrainState {
        model,
        velocity,
        epoch: epoch.item() as usize,
        seed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
