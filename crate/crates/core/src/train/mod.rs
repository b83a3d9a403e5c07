//! Mini-batch training with Adam, a plateau learning-rate rule, evaluation
//! and checkpoints.

mod checkpoint;
mod eval;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use eval::{effective_k, evaluate, predict_windows, score_windows, EvalOptions, Proposals};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Batch, DecodeSteps, ForwardOptions, Sgnet};
use crate::optim::{AdamState, Plateau};
use crate::rng;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4e4f_4953;
const VAL_STREAM: u64 = 0x5641_4c49;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub seed: u64,
    /// Decode only at the last encoder step instead of at every step.
    pub decode_last_only: bool,
    /// Proposals per window during training; `None` uses the model's count.
    pub k: Option<usize>,
    /// Windows per gradient shard. Shards are reduced in a fixed order, so
    /// results do not depend on the number of worker threads.
    pub shard_size: usize,
    /// Where to write the offending batch when the loss becomes non-finite.
    pub dump_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            lr: 5e-4,
            plateau_factor: 0.2,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            min_lr: 1e-6,
            seed: 0,
            decode_last_only: false,
            k: None,
            shard_size: 32,
            dump_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.shard_size == 0 {
            return Err(Error::Config("train.shard_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("train.plateau_factor must lie in (0, 1]".into()));
        }
        if self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config("train.min_lr must lie in [0, train.lr]".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("train.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn plateau(&self) -> Plateau {
        Plateau::new(self.plateau_factor, self.plateau_patience, self.plateau_threshold, self.min_lr)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (format!("train.{}", k), v);
        vec![
            p("batch_size", self.batch_size.to_string()),
            p("epochs", self.epochs.to_string()),
            p("lr", self.lr.to_string()),
            p("plateau_factor", self.plateau_factor.to_string()),
            p("plateau_patience", self.plateau_patience.to_string()),
            p("plateau_threshold", self.plateau_threshold.to_string()),
            p("min_lr", self.min_lr.to_string()),
            p("seed", self.seed.to_string()),
            p("decode_last_only", self.decode_last_only.to_string()),
            p("k", self.k.map_or("model".into(), |k| k.to_string())),
            p("shard_size", self.shard_size.to_string()),
        ]
    }

    /// Apply one `train.*` key (without the prefix). Returns false for
    /// unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("train.{}: expected {}, got '{}'", key, what, v)))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value, "an integer")?,
            "epochs" => self.epochs = parse(key, value, "an integer")?,
            "lr" => self.lr = parse(key, value, "a number")?,
            "plateau_factor" => self.plateau_factor = parse(key, value, "a number")?,
            "plateau_patience" => self.plateau_patience = parse(key, value, "an integer")?,
            "plateau_threshold" => self.plateau_threshold = parse(key, value, "a number")?,
            "min_lr" => self.min_lr = parse(key, value, "a number")?,
            "seed" => self.seed = parse(key, value, "an integer")?,
            "decode_last_only" => self.decode_last_only = parse(key, value, "true or false")?,
            "k" => {
                self.k = match value.trim() {
                    "model" => None,
                    v => Some(parse(key, v, "an integer or 'model'")?),
                }
            }
            "shard_size" => self.shard_size = parse(key, value, "an integer")?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr,seconds";

    pub fn csv_row(&self, fixed_clock: bool) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_loss.map_or(String::new(), |v| v.to_string()),
            self.lr,
            if fixed_clock { 0.0 } else { self.seconds }
        )
    }
}

/// Objective terms of one optimizer step, before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub bom: f64,
    pub goal: f64,
    pub kld: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Snapshot at the best monitored loss of this session, if it improved.
    pub best: Option<Checkpoint>,
}

struct ShardResult {
    grads: Vec<Tensor<f32>>,
    terms: [f64; 4],
    has_kld: bool,
}

/// Pairwise sum in index order: `((a0+a1)+(a2+a3))+…`.
fn tree_reduce<T>(mut items: Vec<T>, add: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => add(a, b),
                None => a,
            });
        }
        items = next;
    }
    items.pop()
}

fn add_shards(mut a: ShardResult, b: ShardResult) -> ShardResult {
    for (x, y) in a.grads.iter_mut().zip(&b.grads) {
        crate::graph::kernels::add_into(x.data_mut(), y.data());
    }
    for (x, y) in a.terms.iter_mut().zip(b.terms) {
        *x += y;
    }
    a.has_kld &= b.has_kld;
    a
}

fn describe_batch(windows: &[&Window]) -> String {
    let mut s = String::new();
    for w in windows {
        let _ = writeln!(s, "window {} scene {} agent {} start_frame {}", w.id, w.scene, w.agent, w.start_frame);
        for r in &w.obs {
            let _ = writeln!(s, "  obs {:?}", r);
        }
        for r in &w.positions {
            let _ = writeln!(s, "  pos {:?}", r);
        }
    }
    s
}

pub struct Trainer {
    model: Sgnet<f32>,
    cfg: TrainConfig,
    opt: AdamState<f32>,
    plateau: Plateau,
    epoch: usize,
    best_val: f64,
}

impl Trainer {
    pub fn new(model: Sgnet<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamState::new(model.params(), cfg.lr);
        Ok(Self {
            plateau: cfg.plateau(),
            model,
            cfg,
            opt,
            epoch: 0,
            best_val: f64::INFINITY,
        })
    }

    /// Continues from a checkpoint holding optimizer state. The run seed
    /// comes from the checkpoint so the continuation replays the same
    /// streams.
    pub fn resume(ckpt: &Checkpoint, mut cfg: TrainConfig) -> Result<Self> {
        let opt = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        cfg.seed = ckpt.seed;
        cfg.validate()?;
        Ok(Self {
            model: ckpt.to_model()?,
            cfg,
            opt,
            plateau: ckpt.plateau.clone(),
            epoch: ckpt.epoch,
            best_val: ckpt.best_val,
        })
    }

    pub fn model(&self) -> &Sgnet<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            optimizer: Some(self.opt.clone()),
            plateau: self.plateau.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
            ..Checkpoint::of_model(&self.model, self.cfg.seed)
        }
    }

    fn forward_options(&self, seed: u64) -> ForwardOptions {
        ForwardOptions {
            decode: if self.cfg.decode_last_only {
                DecodeSteps::Last
            } else {
                DecodeSteps::All
            },
            k: self.cfg.k,
            ..ForwardOptions::train(seed)
        }
    }

    fn shard(&self, windows: &[&Window], seed: u64, denom: usize, grads: bool) -> Result<ShardResult> {
        let batch = Batch::<f32>::from_windows(windows, true)?;
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g);
        let out = self.model.forward(&mut g, &p, &batch, &self.forward_options(seed))?;
        let obj = out.objective(&mut g, denom)?;
        let item = |g: &Graph<f32>, v| -> Result<f64> { Ok(g.value(v).item()? as f64) };
        let terms = [
            item(&g, obj.total)?,
            item(&g, obj.bom)?,
            item(&g, obj.goal)?,
            obj.kld.map(|k| item(&g, k)).transpose()?.unwrap_or(0.0),
        ];
        let grads = if grads {
            g.backward(obj.total)?;
            p.vars()
                .iter()
                .zip(self.model.params().tensors())
                .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        } else {
            Vec::new()
        };
        Ok(ShardResult {
            grads,
            terms,
            has_kld: obj.kld.is_some(),
        })
    }

    fn run_shards(&self, windows: &[&Window], seed: u64, grads: bool) -> Result<ShardResult> {
        let results: Vec<Result<ShardResult>> = windows
            .par_chunks(self.cfg.shard_size)
            .map(|c| self.shard(c, seed, windows.len(), grads))
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        tree_reduce(results, add_shards).ok_or_else(|| Error::Contract("empty batch".into()))
    }

    fn non_finite(&self, what: &str, windows: &[&Window]) -> Error {
        let ids: Vec<u64> = windows.iter().map(|w| w.id).collect();
        let mut msg = format!("{} at step {} (window ids {:?})", what, self.opt.step + 1, ids);
        if let Some(path) = &self.cfg.dump_path {
            match std::fs::write(path, describe_batch(windows)) {
                Ok(()) => msg.push_str(&format!("; batch dumped to {}", path.display())),
                Err(e) => msg.push_str(&format!("; writing the batch dump failed: {}", e)),
            }
        }
        Error::NonFinite(msg)
    }

    /// Noise seed of optimizer step `step` (1-based).
    fn step_seed(&self, step: u64) -> u64 {
        rng::derive_seed(self.cfg.seed, &[NOISE_STREAM, step])
    }

    /// Objective of a batch under the noise of optimizer step `step`
    /// (1-based), without updating anything.
    pub fn batch_loss(&self, windows: &[&Window], step: u64) -> Result<f64> {
        Ok(self.run_shards(windows, self.step_seed(step), false)?.terms[0])
    }

    /// One Adam update on a batch.
    pub fn train_step(&mut self, windows: &[&Window]) -> Result<StepRecord> {
        let step = self.opt.step + 1;
        let r = match self.run_shards(windows, self.step_seed(step), true) {
            Err(Error::NonFinite(what)) => return Err(self.non_finite(&what, windows)),
            other => other?,
        };
        if !r.terms[0].is_finite() {
            return Err(self.non_finite("training loss", windows));
        }
        if r.grads.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite("gradient", windows));
        }
        self.opt.update(self.model.params_mut(), &r.grads)?;
        Ok(StepRecord {
            step,
            loss: r.terms[0],
            bom: r.terms[1],
            goal: r.terms[2],
            kld: r.has_kld.then_some(r.terms[3]),
        })
    }

    /// Mean objective over `windows` with a fixed noise seed.
    pub fn validation_loss(&self, windows: &[Window]) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::Validation("empty validation set".into()));
        }
        let seed = rng::derive_seed(self.cfg.seed, &[VAL_STREAM]);
        let mut total = 0.0;
        for chunk in windows.chunks(self.cfg.batch_size) {
            let refs: Vec<&Window> = chunk.iter().collect();
            total += self.run_shards(&refs, seed, false)?.terms[0] * chunk.len() as f64;
        }
        Ok(total / windows.len() as f64)
    }

    /// Trains until `cfg.epochs` epochs are complete. The monitored loss is
    /// the validation loss, or the training loss when `val` is empty.
    /// `on_epoch` runs after every epoch with the updated trainer.
    pub fn fit(
        &mut self,
        train: &[Window],
        val: &[Window],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Validation("empty training set".into()));
        }
        let mut outcome = TrainOutcome {
            epochs: Vec::new(),
            steps: Vec::new(),
            best: None,
        };
        while self.epoch < self.cfg.epochs {
            let started = Instant::now();
            let lr = self.opt.lr;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::stream(self.cfg.seed, &[SHUFFLE_STREAM, self.epoch as u64]));
            let mut weighted = 0.0;
            for idx in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
                let rec = self.train_step(&batch)?;
                weighted += rec.loss * batch.len() as f64;
                outcome.steps.push(rec);
            }
            let train_loss = weighted / train.len() as f64;
            let val_loss = if val.is_empty() {
                None
            } else {
                Some(self.validation_loss(val)?)
            };
            let monitored = val_loss.unwrap_or(train_loss);
            self.epoch += 1;
            if monitored < self.best_val {
                self.best_val = monitored;
                outcome.best = Some(self.checkpoint());
            }
            self.opt.lr = self.plateau.step(monitored, lr);
            let rec = EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_loss,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {} train {:.6} val {} lr {:e}",
                rec.epoch,
                rec.train_loss,
                rec.val_loss.map_or("-".into(), |v| format!("{:.6}", v)),
                rec.lr
            );
            on_epoch(&rec, self)?;
            outcome.epochs.push(rec);
        }
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests;
