//! Joint objective, AdamW, warm-up + cosine schedule and the training loop.

mod losses;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{aux_loss, head_loss, total_loss, traj_loss, u_loss, LossParts, LossWeights, Target};
pub use optim::{lr_at, AdamW};

use crate::autodiff::{load_checkpoint, save_checkpoint, CheckpointManifest, Graph, ParamStore, Tensor, Var};
use crate::episodes::{BehaviorLabel, EnvLabel, WindowSample};
use crate::error::{Error, Result};
use crate::geometry::rot6d_to_matrix;
use crate::model::{Forecaster, ModelInput};
use losses::sample_loss;

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "train_config.json";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// Seeds the per-epoch batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr_max: 5e-5,
            warmup_epochs: 2,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::BadConfig("epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::BadConfig("warmup_epochs exceeds epochs".into()));
        }
        let reals = [self.lr_max, self.weight_decay, self.clip_norm];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadConfig("lr_max, weight_decay and clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// One prepared training instance.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: ModelInput,
    pub target: Target,
}

impl Example {
    pub fn from_window<M: Forecaster + ?Sized>(model: &M, s: &WindowSample) -> Result<Self> {
        let input = model.prepare(s)?;
        let steps = s.future_len();
        let traj = Tensor::matrix(steps, 3, s.future_motion.iter().flat_map(|d| d.to_array()).collect())?;
        let mut head = Vec::with_capacity(steps * 9);
        for h in &s.future_head {
            head.extend_from_slice(&rot6d_to_matrix(h)?.to_flat());
        }
        let env = s.aux_env.to_multi_hot(&EnvLabel::ALL);
        let behavior = s.aux_behavior.to_multi_hot(&BehaviorLabel::ALL);
        Ok(Example {
            input,
            target: Target {
                traj,
                head: Tensor::matrix(steps, 9, head)?,
                u: s.u_target,
                env: Tensor::matrix(1, env.len(), env)?,
                behavior: Tensor::matrix(1, behavior.len(), behavior)?,
            },
        })
    }
}

pub fn prepare_examples<M: Forecaster + ?Sized>(model: &M, samples: &[WindowSample]) -> Result<Vec<Example>> {
    samples.iter().map(|s| Example::from_window(model, s)).collect()
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_traj")]
    pub l_traj: f64,
    #[serde(rename = "L_head")]
    pub l_head: f64,
    #[serde(rename = "L_U")]
    pub l_u: f64,
    #[serde(rename = "L_aux")]
    pub l_aux: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    /// 1-based epoch with the lowest validation total (0 if none ran).
    pub best_epoch: usize,
    pub best_val: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    best_val: f64,
    best_epoch: usize,
    model: serde_json::Value,
    train: TrainConfig,
}

/// Records the forward pass and weighted training objective of one example on
/// `g`, which must be bound to `model.params()`. Returns the scalar total.
pub fn example_loss<M: Forecaster + ?Sized>(g: &mut Graph<'_>, model: &M, ex: &Example, w: &LossWeights) -> Result<Var> {
    let out = model.forward_graph(g, &ex.input)?;
    Ok(sample_loss(g, &out, &ex.target, w)?.total)
}

/// Mean loss components and weighted total over `examples`.
pub fn evaluate_loss<M: Forecaster + ?Sized>(model: &M, examples: &[Example], w: &LossWeights) -> Result<(LossParts, f64)> {
    if examples.is_empty() {
        return Err(Error::TooFew { needed: 1, got: 0 });
    }
    let mut parts = LossParts::default();
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::with_params(model.params());
        let out = model.forward_graph(&mut g, &ex.input)?;
        let l = sample_loss(&mut g, &out, &ex.target, w)?;
        parts.add(&l.parts(&g));
        total += g.value(l.total).data()[0];
    }
    let k = 1.0 / examples.len() as f64;
    Ok((parts.scaled(k), total * k))
}

/// Trains `model` in place. With `out`, writes the CSV log, the configuration,
/// a checkpoint at the best validation total and a resumable last-epoch
/// checkpoint. On return the model holds the best-validation weights.
pub fn train<M: Forecaster + ?Sized>(
    model: &mut M,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    Run::start(model, cfg, out)?.run(model, train_set, val_set)
}

/// Continues a run from the last-epoch checkpoint under `out`, keeping the
/// step count, optimizer moments, log and best-so-far checkpoint.
pub fn resume<M: Forecaster + ?Sized>(
    model: &mut M,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    out: &Path,
) -> Result<TrainReport> {
    Run::resume(model, cfg, out)?.run(model, train_set, val_set)
}

struct Run {
    cfg: TrainConfig,
    out: Option<PathBuf>,
    opt: AdamW,
    history: Vec<EpochLog>,
    first_epoch: usize,
    best_val: f64,
    best_epoch: usize,
    best: Option<ParamStore>,
}

impl Run {
    fn start<M: Forecaster + ?Sized>(model: &M, cfg: &TrainConfig, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(CONFIG_FILE);
            let json = serde_json::json!({ "train": cfg, "model": model.config_json() });
            fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Run {
            cfg: cfg.clone(),
            out: out.map(Path::to_path_buf),
            opt: AdamW::new(model.params(), cfg.weight_decay),
            history: Vec::new(),
            first_epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            best: None,
        })
    }

    fn resume<M: Forecaster + ?Sized>(model: &mut M, cfg: &TrainConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let last = out.join(LAST_DIR);
        let manifest = load_checkpoint(&last, model.params_mut())?;
        let state: TrainerState = serde_json::from_value(manifest.extra.clone())?;
        let mut opt = AdamW::new(model.params(), cfg.weight_decay);
        opt.load(&last.join(OPTIMIZER_FILE), model.params())?;
        if opt.step != manifest.step {
            return Err(Error::BadConfig(format!(
                "optimizer step {} does not match checkpoint step {}",
                opt.step, manifest.step
            )));
        }
        let log_path = out.join(LOG_FILE);
        let mut reader = csv::Reader::from_path(&log_path)?;
        let history = reader.deserialize().collect::<Result<Vec<EpochLog>, _>>()?;
        if history.len() != manifest.epoch {
            return Err(Error::LengthMismatch {
                expected: manifest.epoch,
                got: history.len(),
            });
        }
        let best = if state.best_epoch > 0 {
            let mut store = model.params().clone();
            load_checkpoint(&out.join(BEST_DIR), &mut store)?;
            Some(store)
        } else {
            None
        };
        Ok(Run {
            cfg: cfg.clone(),
            out: Some(out.to_path_buf()),
            opt,
            history,
            first_epoch: manifest.epoch,
            best_val: state.best_val,
            best_epoch: state.best_epoch,
            best,
        })
    }

    fn run<M: Forecaster + ?Sized>(mut self, model: &mut M, train_set: &[Example], val_set: &[Example]) -> Result<TrainReport> {
        if train_set.is_empty() {
            return Err(Error::TooFew { needed: 1, got: 0 });
        }
        let cfg = self.cfg.clone();
        let per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
        let total_steps = per_epoch * cfg.epochs as u64;
        let warmup_steps = per_epoch * cfg.warmup_epochs as u64;
        let mut order: Vec<usize> = (0..train_set.len()).collect();

        for epoch in self.first_epoch..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);

            let mut parts = LossParts::default();
            let mut total = 0.0;
            let mut lr = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let store = model.params_mut();
                store.zero_grad();
                let mut grads = None::<crate::autodiff::Gradients>;
                for &i in batch {
                    let ex = &train_set[i];
                    let mut g = Graph::with_params(model.params());
                    let out = model.forward_graph(&mut g, &ex.input)?;
                    let l = sample_loss(&mut g, &out, &ex.target, &cfg.weights)?;
                    let value = g.value(l.total).data()[0];
                    if !value.is_finite() {
                        return Err(Error::NonFinite { op: "training loss" });
                    }
                    total += value;
                    parts.add(&l.parts(&g));
                    let gr = g.backward(l.total)?;
                    match &mut grads {
                        Some(acc) => acc.add(&gr),
                        None => grads = Some(gr),
                    }
                }
                let store = model.params_mut();
                store.accumulate(grads.as_ref().expect("non-empty batch"))?;
                store.scale_grads(1.0 / batch.len() as f64);
                if !store.grad_norm().is_finite() {
                    return Err(Error::NonFinite { op: "gradient" });
                }
                if cfg.clip_norm > 0.0 {
                    store.clip_grad_norm(cfg.clip_norm);
                }
                lr = lr_at(self.opt.step, total_steps, warmup_steps, cfg.lr_max);
                self.opt.step(store, lr)?;
            }

            let k = 1.0 / train_set.len() as f64;
            let parts = parts.scaled(k);
            let train_total = total * k;
            let val_total = if val_set.is_empty() {
                train_total
            } else {
                evaluate_loss(model, val_set, &cfg.weights)?.1
            };
            if !val_total.is_finite() {
                return Err(Error::NonFinite { op: "validation loss" });
            }
            let row = EpochLog {
                epoch: epoch + 1,
                lr,
                l_traj: parts.traj,
                l_head: parts.head,
                l_u: parts.u,
                l_aux: parts.aux,
                l_total: train_total,
                val_total,
            };
            log::info!(
                "epoch {} lr {:.3e} train {:.5} val {:.5}",
                row.epoch,
                row.lr,
                row.l_total,
                row.val_total
            );
            self.history.push(row);
            let improved = val_total < self.best_val;
            if improved {
                self.best_val = val_total;
                self.best_epoch = epoch + 1;
                self.best = Some(model.params().clone());
            }
            self.persist(model, epoch + 1, improved)?;
        }

        if let Some(best) = &self.best {
            model.params_mut().copy_values_from(best)?;
        }
        Ok(TrainReport {
            history: self.history,
            best_epoch: self.best_epoch,
            best_val: self.best_val,
            steps: self.opt.step,
        })
    }

    fn persist<M: Forecaster + ?Sized>(&self, model: &M, epochs_done: usize, improved: bool) -> Result<()> {
        let Some(out) = &self.out else {
            return Ok(());
        };
        let state = TrainerState {
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            model: model.config_json(),
            train: self.cfg.clone(),
        };
        let extra = serde_json::to_value(&state)?;
        if improved {
            save_checkpoint(&out.join(BEST_DIR), model.params(), self.cfg.seed, self.opt.step, epochs_done, extra.clone())?;
        }
        let last = out.join(LAST_DIR);
        save_checkpoint(&last, model.params(), self.cfg.seed, self.opt.step, epochs_done, extra)?;
        self.opt.save(&last.join(OPTIMIZER_FILE))?;
        let mut w = csv::Writer::from_path(out.join(LOG_FILE))?;
        for row in &self.history {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(out.join(LOG_FILE), e))?;
        Ok(())
    }
}

/// Reads the model description stored with a training checkpoint.
pub fn checkpoint_model_config(dir: &Path) -> Result<serde_json::Value> {
    let manifest = CheckpointManifest::read(dir)?;
    manifest
        .extra
        .get("model")
        .cloned()
        .ok_or_else(|| Error::BadConfig(format!("checkpoint {} has no model description", dir.display())))
}
