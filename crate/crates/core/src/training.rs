//! β-VAE objective, learning-rate and β schedules, and the training loop.
//!
//! The differentiable loss works on logits (log-softmax and BCE-with-logits)
//! so it never takes the log of a rounded probability. The probability-form
//! functions [`structure_nll`], [`content_nll`] and [`kl_divergence`] are
//! kept for evaluation and clamp probabilities to `[1e-7, 1 - 1e-7]`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ChordGraph, DUR_VOCAB, PITCH_PAD, PITCH_VOCAB};
use crate::model::{Batch, ChordVae, Ctx, Forward, ModelError};
use crate::tensor::{Adam, Checkpoint, CheckpointError, Tape, TensorError, Var};
use crate::Scalar;

const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{what}: expected {expected} values, found {found}")]
    ShapeMismatch { what: &'static str, expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("training state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lr0: f64,
    /// Updates after which the learning rate starts to decay.
    pub decay_start: u64,
    /// Per-update multiplicative decay once decay has started.
    pub decay_factor: f64,
    pub beta_max: f64,
    /// β stays 0 before this many updates.
    pub beta_warmup: u64,
    pub beta_increment: f64,
    /// β grows by `beta_increment` every this many updates after warmup.
    pub beta_every: u64,
    /// Replaces the schedule with a constant β when set.
    pub beta_fixed: Option<f64>,
    pub batch_size: usize,
    pub max_updates: u64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Leave PAD slots out of the content loss.
    pub mask_pad: bool,
    /// Write a checkpoint every this many updates (0 disables).
    pub checkpoint_every: u64,
    /// Compute validation loss every this many updates (0 disables).
    pub validate_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr0: 1e-4,
            decay_start: 8000,
            decay_factor: 1.0 - 5e-6,
            beta_max: 0.01,
            beta_warmup: 40000,
            beta_increment: 0.001,
            beta_every: 40000,
            beta_fixed: None,
            batch_size: 256,
            max_updates: 100_000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mask_pad: false,
            checkpoint_every: 0,
            validate_every: 0,
        }
    }
}

impl TrainingConfig {
    /// Defaults for 2-bar or 16-bar sequences.
    pub fn for_bars(n_bars: usize) -> Self {
        if n_bars >= 16 {
            TrainingConfig { lr0: 5e-5, batch_size: 32, ..Default::default() }
        } else {
            TrainingConfig::default()
        }
    }

    /// β for a given update count: 0 during warmup, then one increment per
    /// period (the first one at the end of warmup), capped at `beta_max`.
    pub fn beta(&self, step: u64) -> f64 {
        if let Some(b) = self.beta_fixed {
            return b;
        }
        if step < self.beta_warmup {
            return 0.0;
        }
        let k = 1 + (step - self.beta_warmup) / self.beta_every.max(1);
        (self.beta_increment * k as f64).min(self.beta_max)
    }

    /// `lr0` up to `decay_start`, then `lr0 * decay_factor^(step - decay_start)`.
    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.decay_start {
            return self.lr0;
        }
        self.lr0 * self.decay_factor.powf((step - self.decay_start) as f64)
    }
}

/// Per-batch loss terms, each averaged over the items of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub structure_nll: T,
    pub pitch_nll: T,
    pub duration_nll: T,
    pub kl: T,
    pub beta: T,
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROB_FLOOR)).min(T::lit(1.0 - PROB_FLOOR))
}

/// `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_divergence<T: Scalar>(mu: &[T], logvar: &[T]) -> Result<T> {
    if mu.len() != logvar.len() {
        return Err(TrainError::ShapeMismatch { what: "logvar", expected: mu.len(), found: logvar.len() });
    }
    Ok(mu.iter().zip(logvar).map(|(&m, &lv)| m * m + lv.exp() - T::one() - lv).sum::<T>() * T::lit(0.5))
}

/// Negative Bernoulli log-likelihood of a binary target under `probs`.
pub fn structure_nll<T: Scalar>(target: &[bool], probs: &[T]) -> Result<T> {
    if target.len() != probs.len() {
        return Err(TrainError::ShapeMismatch { what: "structure probabilities", expected: target.len(), found: probs.len() });
    }
    Ok(-target
        .iter()
        .zip(probs)
        .map(|(&s, &p)| {
            let p = clamp_prob(p);
            if s { p.ln() } else { (T::one() - p).ln() }
        })
        .sum::<T>())
}

/// Cross-entropy of per-slot pitch and duration targets (token ids) under
/// row-major distributions of widths 131 and 99. Returns `(pitch, duration)`.
pub fn content_nll<T: Scalar>(pitch: &[usize], duration: &[usize], p_probs: &[T], d_probs: &[T]) -> Result<(T, T)> {
    if duration.len() != pitch.len() {
        return Err(TrainError::ShapeMismatch { what: "duration targets", expected: pitch.len(), found: duration.len() });
    }
    if p_probs.len() != pitch.len() * PITCH_VOCAB {
        return Err(TrainError::ShapeMismatch { what: "pitch probabilities", expected: pitch.len() * PITCH_VOCAB, found: p_probs.len() });
    }
    if d_probs.len() != duration.len() * DUR_VOCAB {
        return Err(TrainError::ShapeMismatch { what: "duration probabilities", expected: duration.len() * DUR_VOCAB, found: d_probs.len() });
    }
    let ce = |targets: &[usize], probs: &[T], width: usize| -> T {
        -targets.iter().enumerate().map(|(r, &t)| clamp_prob(probs[r * width + t]).ln()).sum::<T>()
    };
    Ok((ce(pitch, p_probs, PITCH_VOCAB), ce(duration, d_probs, DUR_VOCAB)))
}

/// Differentiable objective for one forward pass. Returns the scalar to
/// minimize together with its breakdown.
pub fn loss_from_forward<'t, T: Scalar>(
    out: &Forward<'t, T>,
    batch: &Batch,
    beta: T,
    mask_pad: bool,
) -> Result<(Var<'t, T>, LossBreakdown<T>)> {
    let inv_b = T::one() / T::from_usize_lossy(batch.n_items().max(1));
    let target: Vec<T> = batch.structure_cells().iter().map(|&c| T::lit(c)).collect();
    let structure = out.structure_logits.bce_with_logits(&target)?.sum().scale(inv_b);
    let rows: Vec<usize> = if mask_pad {
        (0..batch.pitch_tokens().len()).filter(|&r| batch.pitch_tokens()[r] != PITCH_PAD as usize).collect()
    } else {
        (0..batch.pitch_tokens().len()).collect()
    };
    let pick = |logits: Var<'t, T>, tokens: &[usize]| -> Result<Var<'t, T>> {
        let targets: Vec<usize> = rows.iter().map(|&r| tokens[r]).collect();
        let logp = logits.log_softmax()?;
        let logp = if mask_pad { logp.gather_rows(&rows)? } else { logp };
        Ok(logp.pick_per_row(&targets)?.sum().scale(-inv_b))
    };
    let pitch = pick(out.pitch_logits, batch.pitch_tokens())?;
    let duration = pick(out.duration_logits, batch.duration_tokens())?;
    let (mu, lv) = (out.mu, out.logvar);
    let kl = mu.mul(mu)?.add(lv.exp())?.sub(lv)?.add_scalar(-T::one()).sum().scale(T::lit(0.5) * inv_b);
    let total = structure.add(pitch)?.add(duration)?.add(kl.scale(beta))?;
    let breakdown = LossBreakdown {
        total: total.scalar_value(),
        structure_nll: structure.scalar_value(),
        pitch_nll: pitch.scalar_value(),
        duration_nll: duration.scalar_value(),
        kl: kl.scalar_value(),
        beta,
    };
    Ok((total, breakdown))
}

/// Seeded 70/10/20 split into train, validation and test sets.
pub fn split_dataset<I: Clone>(items: &[I], seed: u64) -> (Vec<I>, Vec<I>, Vec<I>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = items.len() * 7 / 10;
    let n_valid = items.len() / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    (
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_valid]),
        pick(&order[n_train + n_valid..]),
    )
}

/// One logged update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub lr: f64,
    pub beta: f64,
    pub total: f64,
    pub structure_nll: f64,
    pub pitch_nll: f64,
    pub duration_nll: f64,
    pub kl: f64,
}

pub const HISTORY_HEADER: &str = "step,lr,beta,total,structure_nll,pitch_nll,duration_nll,kl";

impl HistoryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.lr, self.beta, self.total, self.structure_nll, self.pitch_nll, self.duration_nll, self.kl
        )
    }
}

pub fn write_history_csv(rows: &[HistoryRow], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Where `fit` writes its artifacts; every field is optional.
#[derive(Debug, Clone, Default)]
pub struct FitOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub history_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub updates: u64,
    pub final_train: Option<LossBreakdown<f64>>,
    /// `(step, validation loss)` pairs.
    pub validation: Vec<(u64, LossBreakdown<f64>)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Reconstruction quality of a model on a set of graphs, with `z = mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub structure_f1: f64,
    /// Teacher-forced accuracy over non-PAD slots.
    pub pitch_accuracy: f64,
    pub duration_accuracy: f64,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Structure F1 of the decoded structure and teacher-forced token accuracy
/// of the content decoder, both in eval mode.
pub fn reconstruction<T: Scalar>(model: &ChordVae<T>, graphs: &[ChordGraph], threshold: T) -> Result<Reconstruction> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let (mut hits_p, mut hits_d, mut slots) = (0usize, 0usize, 0usize);
    for g in graphs {
        let code = model.encode(g, None)?;
        let probs = model.decode_structure(&code.z_s)?;
        for (&p, &real) in probs.iter().zip(g.structure().cells()) {
            match (p >= threshold, real) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let content = model.decode_content(&code.z_c, &g.structure())?;
        for (v, chord) in g.content.iter().enumerate() {
            for (s, tok) in chord.0.iter().enumerate() {
                if tok.pitch == PITCH_PAD {
                    continue;
                }
                slots += 1;
                hits_p += usize::from(argmax(content.pitch_row(v, s)) == tok.pitch as usize);
                hits_d += usize::from(argmax(content.duration_row(v, s)) == tok.duration as usize);
            }
        }
    }
    let f1 = if tp + fp + fneg == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
    let acc = |h: usize| if slots == 0 { 1.0 } else { h as f64 / slots as f64 };
    Ok(Reconstruction { structure_f1: f1, pitch_accuracy: acc(hits_p), duration_accuracy: acc(hits_d) })
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    config: TrainingConfig,
    step: u64,
    adam_t: u64,
    history: Vec<HistoryRow>,
}

/// A model, its optimizer state and the update counter.
pub struct Trainer<T> {
    pub model: ChordVae<T>,
    pub config: TrainingConfig,
    adam: Adam<T>,
    step: u64,
    history: Vec<HistoryRow>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ChordVae<T>, config: TrainingConfig) -> Self {
        let adam = Adam::with_hyper(model.params(), config.adam_beta1, config.adam_beta2, config.adam_eps);
        Trainer { model, config, adam, step: 0, history: Vec::new() }
    }

    /// Updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    fn noise(&self, rows: usize) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(self.step);
        (0..rows * self.model.d())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z)
            })
            .collect()
    }

    /// Indices of the items in the batch for the current update. Each epoch
    /// is a fresh seeded permutation, so the batch is a function of the
    /// step alone.
    fn batch_indices(&self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size.clamp(1, n);
        let per_epoch = n.div_ceil(b) as u64;
        let epoch = self.step / per_epoch;
        let within = (self.step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order[within * b..((within + 1) * b).min(n)].to_vec()
    }

    /// One gradient update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown<T>> {
        let beta = self.config.beta(self.step);
        let lr = self.config.lr(self.step);
        let eps = self.noise(batch.n_items());
        let tape = Tape::new();
        let (breakdown, grads, stats) = {
            let ctx = Ctx::new(&tape, self.model.params(), true);
            let out = self.model.forward(&ctx, batch, Some(&eps))?;
            let (total, breakdown) = loss_from_forward(&out, batch, T::lit(beta), self.config.mask_pad)?;
            (breakdown, total.backward()?, ctx.batch_stats())
        };
        let params = self.model.params_mut();
        params.zero_grad();
        grads.accumulate_into(params);
        self.adam.step(params, T::lit(lr));
        self.model.update_running_stats(stats);
        self.history.push(HistoryRow {
            step: self.step,
            lr,
            beta,
            total: breakdown.total.as_f64(),
            structure_nll: breakdown.structure_nll.as_f64(),
            pitch_nll: breakdown.pitch_nll.as_f64(),
            duration_nll: breakdown.duration_nll.as_f64(),
            kl: breakdown.kl.as_f64(),
        });
        self.step += 1;
        Ok(breakdown)
    }

    /// Eval-mode loss (`z = mu`) over `graphs` as one batch.
    pub fn evaluate(&self, graphs: &[ChordGraph]) -> Result<LossBreakdown<T>> {
        if graphs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let refs: Vec<&ChordGraph> = graphs.iter().collect();
        let batch = Batch::from_graphs(&refs, self.model.config())?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.model.params(), false);
        let out = self.model.forward(&ctx, &batch, None)?;
        let beta = self.config.beta(self.step);
        Ok(loss_from_forward(&out, &batch, T::lit(beta), self.config.mask_pad)?.1)
    }

    /// Trains until `config.max_updates` updates have been applied in
    /// total (so a resumed trainer continues where it stopped).
    pub fn fit(&mut self, train: &[ChordGraph], valid: &[ChordGraph], outputs: &FitOutputs) -> Result<FitReport> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            fs::create_dir_all(dir)?;
        }
        let mut report = FitReport { updates: 0, final_train: None, validation: Vec::new(), checkpoints: Vec::new() };
        while self.step < self.config.max_updates {
            let idx = self.batch_indices(train.len());
            let refs: Vec<&ChordGraph> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_graphs(&refs, self.model.config())?;
            let b = self.train_step(&batch)?;
            report.updates += 1;
            report.final_train = Some(to_f64(&b));
            if self.step.is_multiple_of(100) {
                log::info!("update {}: loss {:.4} (structure {:.4}, pitch {:.4}, duration {:.4}, kl {:.4})",
                    self.step, b.total.as_f64(), b.structure_nll.as_f64(), b.pitch_nll.as_f64(), b.duration_nll.as_f64(), b.kl.as_f64());
            }
            if self.config.validate_every > 0 && self.step.is_multiple_of(self.config.validate_every) && !valid.is_empty() {
                let v = self.evaluate(valid)?;
                log::info!("update {}: validation loss {:.4}", self.step, v.total.as_f64());
                report.validation.push((self.step, to_f64(&v)));
            }
            if let Some(dir) = &outputs.checkpoint_dir {
                if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                    let path = dir.join(format!("step_{:08}.ckpt", self.step));
                    self.save(&path)?;
                    report.checkpoints.push(path);
                }
            }
        }
        if !valid.is_empty() && self.config.validate_every > 0 {
            report.validation.push((self.step, to_f64(&self.evaluate(valid)?)));
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            let path = dir.join("final.ckpt");
            self.save(&path)?;
            report.checkpoints.push(path);
        }
        if let Some(csv) = &outputs.history_csv {
            write_history_csv(&self.history, csv)?;
        }
        Ok(report)
    }

    /// Model checkpoint plus optimizer moments and training state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint();
        let state = TrainerState { config: self.config.clone(), step: self.step, adam_t: self.adam.t, history: self.history.clone() };
        c.meta["training"] = serde_json::to_value(&state).expect("state serializes");
        for (id, p) in self.model.params().iter() {
            c.push(format!("adam.m/{}", p.name), &p.shape, &self.adam.m[id.0]);
            c.push(format!("adam.v/{}", p.name), &p.shape, &self.adam.v[id.0]);
        }
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let model = ChordVae::from_checkpoint(c)?;
        let state: TrainerState = serde_json::from_value(c.meta["training"].clone())
            .map_err(|e| TrainError::State(format!("checkpoint has no usable training state: {e}")))?;
        let mut t = Trainer::new(model, state.config);
        t.step = state.step;
        t.history = state.history;
        t.adam.t = state.adam_t;
        let names: Vec<(usize, String)> = t.model.params().iter().map(|(id, p)| (id.0, p.name.clone())).collect();
        for (i, name) in names {
            t.adam.m[i] = c.get(&format!("adam.m/{name}"))?.data.iter().map(|&v| T::lit(v)).collect();
            t.adam.v[i] = c.get(&format!("adam.v/{name}"))?.data.iter().map(|&v| T::lit(v)).collect();
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn to_f64<T: Scalar>(b: &LossBreakdown<T>) -> LossBreakdown<f64> {
    LossBreakdown {
        total: b.total.as_f64(),
        structure_nll: b.structure_nll.as_f64(),
        pitch_nll: b.pitch_nll.as_f64(),
        duration_nll: b.duration_nll.as_f64(),
        kl: b.kl.as_f64(),
        beta: b.beta.as_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_schedule_constants() {
        let c = TrainingConfig::default();
        assert_eq!(c.beta(0), 0.0);
        assert_eq!(c.beta(39_999), 0.0);
        assert_eq!(c.beta(40_000), 0.001);
        assert_eq!(c.beta(79_999), 0.001);
        assert_eq!(c.beta(80_000), 0.002);
        assert_eq!(c.beta(400_000), 0.01);
        assert_eq!(c.beta(4_000_000), 0.01);
    }

    #[test]
    fn lr_schedule_constants() {
        let c = TrainingConfig::default();
        assert_eq!(c.lr(0), 1e-4);
        assert_eq!(c.lr(8000), 1e-4);
        assert_eq!(c.lr(8001), 1e-4 * (1.0 - 5e-6));
        assert_eq!(TrainingConfig::for_bars(16).lr(0), 5e-5);
    }

    #[test]
    fn closed_form_losses() {
        assert_eq!(kl_divergence(&[0.0f64], &[0.0]).unwrap(), 0.0);
        assert_eq!(kl_divergence(&[1.0f64], &[0.0]).unwrap(), 0.5);
        assert!((structure_nll(&[true], &[0.5f64]).unwrap() - 0.693147).abs() < 1e-6);
        assert!(structure_nll(&[true, false], &[1.0f64, 0.0]).unwrap() < 1e-6);
        let uniform = vec![1.0 / 131.0; 131];
        let dur = vec![1.0 / 99.0; 99];
        let (p, _) = content_nll(&[5], &[3], &uniform, &dur).unwrap();
        assert!((p - 131f64.ln()).abs() < 1e-12);
        assert!(content_nll(&[5], &[3, 4], &uniform, &dur).is_err());
    }

    #[test]
    fn split_ratios() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split_dataset(&items, 3);
        assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 3).0, a);
    }
}
