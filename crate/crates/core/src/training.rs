//! Optimizers, truncated-BPTT training loops, and evaluation metrics.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{is_weight_matrix, Mode, Model, ModelError, State};
use crate::data::{classification_batch, lm_batches, DataError, LabeledDoc, Vocab};
use crate::modelio::{self, Checkpoint, ModelIoError};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] ModelIoError),
    #[error("non-finite gradient in {param} at step {step}")]
    NonFiniteGradient { param: &'static str, step: u64 },
    #[error("non-finite {what} in {param} after step {step}")]
    NonFiniteState {
        what: &'static str,
        param: &'static str,
        step: u64,
    },
    #[error(
        "training diverged at step {step} (loss {loss}); try enabling weight decay \
         (train.weight_decay) or the tanh range constraint on the output layer (model.fc_tanh)"
    )]
    Diverged { step: u64, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip for SGD; 0 disables.
    pub clip_norm: f64,
    /// SGD staircase decay factor applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub unroll: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    pub seed: u64,
    /// L2 penalty on weight matrices; 0 disables.
    pub weight_decay: f64,
    /// Evaluate every this many steps; 0 evaluates at epoch ends only.
    pub eval_every: u64,
    /// Classification documents are padded or cut to this length.
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            lr_decay: 1.0,
            decay_every: 1,
            batch_size: 20,
            unroll: 20,
            epochs: 1,
            max_steps: 0,
            seed: 1,
            weight_decay: 0.0,
            eval_every: 0,
            seq_len: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be positive");
        }
        if self.unroll == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return bad("unroll, batch_size and seq_len must be at least 1");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Adam moments (or nothing for SGD), aligned with the model's named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros = |p: &&Matrix| Matrix::zeros(p.rows(), p.cols());
        Self {
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update over aligned parameter/gradient lists.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut OptimizerState, hyper: &AdamHyper) {
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

/// Plain SGD with optional global-norm clipping.
pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], lr: f64, clip_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * scale * gi;
        }
    }
}

/// `exp(sum_xent / tokens)`.
pub fn perplexity(sum_xent: f64, tokens: usize) -> f64 {
    (sum_xent / tokens as f64).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, step: u64, split: &str, metric: &str, value: f64) {
        debug_assert!(self.records.last().is_none_or(|r| r.step <= step));
        self.records.push(MetricRecord {
            step,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,split,metric,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.split, r.metric, r.value);
        }
        s
    }

    /// Most recent value of `split`/`metric`.
    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }
}

/// Training and validation data for one task.
#[derive(Clone, Debug)]
pub enum Dataset {
    Lm {
        train: Vec<usize>,
        valid: Vec<usize>,
    },
    Classify {
        train: Vec<LabeledDoc>,
        valid: Vec<LabeledDoc>,
    },
}

/// Evaluation result: summed cross entropy, scored count, and correct predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub xent_sum: f64,
    pub count: usize,
    pub correct: usize,
}

impl EvalStats {
    pub fn mean_loss(&self) -> f64 {
        self.xent_sum / self.count.max(1) as f64
    }

    pub fn perplexity(&self) -> f64 {
        perplexity(self.xent_sum, self.count.max(1))
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Eval-mode pass over a corpus with hidden state carried across batches.
pub fn evaluate_lm(model: &Model, ids: &[usize], batch: usize, unroll: usize) -> Result<EvalStats, TrainError> {
    // Short validation corpora fall back to fewer streams.
    let batch = batch.min(ids.len() / (unroll + 1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state: Option<State> = None;
    let mut stats = EvalStats {
        xent_sum: 0.0,
        count: 0,
        correct: 0,
    };
    for b in lm_batches(ids, batch, unroll)? {
        let fwd = model.forward(&b, state.as_ref(), Mode::Eval, &mut rng)?;
        stats.xent_sum += fwd.xent_sum;
        stats.count += fwd.scored;
        state = Some(fwd.state);
    }
    Ok(stats)
}

pub fn evaluate_classifier(
    model: &Model,
    docs: &[LabeledDoc],
    batch: usize,
    seq_len: usize,
) -> Result<EvalStats, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stats = EvalStats {
        xent_sum: 0.0,
        count: 0,
        correct: 0,
    };
    for chunk in docs.chunks(batch.max(1)) {
        let refs: Vec<&LabeledDoc> = chunk.iter().collect();
        let b = classification_batch(&refs, seq_len);
        let fwd = model.forward(&b, None, Mode::Eval, &mut rng)?;
        stats.xent_sum += fwd.xent_sum;
        stats.count += fwd.scored;
        stats.correct += fwd.correct;
    }
    Ok(stats)
}

/// Full training state; everything needed to resume bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub epoch: usize,
    /// Next batch index within the current epoch.
    pub batch_in_epoch: usize,
    pub carry: Option<State>,
    pub optimizer: OptimizerState,
    /// Dropout RNG position (ChaCha8 word position).
    pub rng_word_pos: u128,
    pub log: MetricsLog,
    /// Per-step training losses.
    pub losses: Vec<f64>,
    /// Best validation score so far (lower loss is better).
    pub best_valid_loss: Option<f64>,
    /// Losses accumulated since the last evaluation.
    pub pending: Vec<f64>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub state: TrainerState,
    rng: ChaCha8Rng,
    /// Directory receiving `best.ckpt` on validation improvements.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stored alongside the model in every checkpoint.
    pub vocab: Option<Vocab>,
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params: Vec<&Matrix> = model.params.named().into_iter().map(|(_, m)| m).collect();
        let optimizer = OptimizerState::new(&params);
        let rng = dropout_rng(config.seed);
        Ok(Self {
            model,
            state: TrainerState {
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                carry: None,
                optimizer,
                rng_word_pos: rng.get_word_pos(),
                log: MetricsLog::default(),
                losses: Vec::new(),
                best_valid_loss: None,
                pending: Vec::new(),
            },
            config,
            rng,
            checkpoint_dir: None,
            vocab: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.train.validate()?;
        let mut rng = dropout_rng(ckpt.train.seed);
        rng.set_word_pos(ckpt.state.rng_word_pos);
        Ok(Self {
            model: ckpt.model,
            config: ckpt.train,
            state: ckpt.state,
            rng,
            checkpoint_dir: None,
            vocab: ckpt.vocab,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng_word_pos = self.rng.get_word_pos();
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            state,
            vocab: self.vocab.clone(),
        }
    }

    fn lr(&self) -> f64 {
        match self.config.optimizer {
            OptimizerKind::Adam => self.config.lr,
            OptimizerKind::Sgd => {
                let k = (self.state.epoch / self.config.decay_every) as i32;
                self.config.lr * self.config.lr_decay.powi(k)
            }
        }
    }

    /// Apply one optimizer update from `grads` (aligned with named params).
    pub fn apply_gradients(&mut self, mut grads: Vec<Matrix>) -> Result<(), TrainError> {
        let step = self.state.step;
        let names: Vec<&'static str> = self.model.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, g) in names.iter().zip(&grads) {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { param: name, step });
            }
        }
        let wd = self.config.weight_decay;
        if wd > 0.0 {
            for ((name, g), (_, p)) in names.iter().zip(grads.iter_mut()).zip(self.model.params.named()) {
                if is_weight_matrix(name) {
                    for (gi, pi) in g.data_mut().iter_mut().zip(p.data()) {
                        *gi += wd * pi;
                    }
                }
            }
        }
        let lr = self.lr();
        let mut params: Vec<&mut Matrix> = self.model.params.named_mut().into_iter().map(|(_, m)| m).collect();
        match self.config.optimizer {
            OptimizerKind::Adam => adam_step(
                &mut params,
                &grads,
                &mut self.state.optimizer,
                &AdamHyper {
                    lr,
                    beta1: self.config.beta1,
                    beta2: self.config.beta2,
                    eps: self.config.eps,
                },
            ),
            OptimizerKind::Sgd => {
                self.state.optimizer.t += 1;
                sgd_step(&mut params, &grads, lr, self.config.clip_norm);
            }
        }
        self.model.project_embedding();
        self.check_finite()
    }

    fn check_finite(&self) -> Result<(), TrainError> {
        let step = self.state.step;
        for (k, (name, p)) in self.model.params.named().into_iter().enumerate() {
            if !p.is_finite() {
                return Err(TrainError::NonFiniteState {
                    what: "parameter",
                    param: name,
                    step,
                });
            }
            if self.config.optimizer == OptimizerKind::Adam
                && !(self.state.optimizer.m[k].is_finite() && self.state.optimizer.v[k].is_finite())
            {
                return Err(TrainError::NonFiniteState {
                    what: "optimizer moment",
                    param: name,
                    step,
                });
            }
        }
        Ok(())
    }

    fn finish_step(&mut self, loss: f64) -> Result<(), TrainError> {
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step: self.state.step,
                loss,
            });
        }
        self.state.step += 1;
        self.state.losses.push(loss);
        self.state.pending.push(loss);
        Ok(())
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps == 0 || self.state.step < self.config.max_steps
    }

    /// Train until `epochs` are exhausted or `max_steps` is reached.
    pub fn run(&mut self, data: &Dataset) -> Result<(), TrainError> {
        while self.state.epoch < self.config.epochs && self.budget_left() {
            let finished = match data {
                Dataset::Lm { train, .. } => self.lm_epoch(train, data)?,
                Dataset::Classify { train, .. } => self.classify_epoch(train, data)?,
            };
            if !finished {
                break;
            }
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
            self.state.carry = None;
            if self.config.eval_every == 0 {
                self.evaluate(data)?;
            }
        }
        Ok(())
    }

    /// Returns `false` when the step budget ran out mid-epoch.
    fn lm_epoch(&mut self, ids: &[usize], data: &Dataset) -> Result<bool, TrainError> {
        let batches: Vec<_> = lm_batches(ids, self.config.batch_size, self.config.unroll)?
            .skip(self.state.batch_in_epoch)
            .collect();
        for b in batches {
            if !self.budget_left() {
                return Ok(false);
            }
            let fwd = self
                .model
                .forward(&b, self.state.carry.as_ref(), Mode::Train, &mut self.rng)?;
            let loss = fwd.loss_value();
            let grads = fwd.gradients().map_err(ModelError::from)?;
            self.state.carry = Some(fwd.state);
            self.finish_step(loss)?;
            self.apply_gradients(grads)?;
            self.state.batch_in_epoch += 1;
            self.maybe_evaluate(data)?;
        }
        Ok(true)
    }

    fn classify_epoch(&mut self, docs: &[LabeledDoc], data: &Dataset) -> Result<bool, TrainError> {
        let order = epoch_order(self.config.seed, self.state.epoch, docs.len());
        let bs = self.config.batch_size;
        let nbatches = docs.len().div_ceil(bs);
        for k in self.state.batch_in_epoch..nbatches {
            if !self.budget_left() {
                return Ok(false);
            }
            let refs: Vec<&LabeledDoc> = order[k * bs..((k + 1) * bs).min(docs.len())]
                .iter()
                .map(|&i| &docs[i])
                .collect();
            let b = classification_batch(&refs, self.config.seq_len);
            let fwd = self.model.forward(&b, None, Mode::Train, &mut self.rng)?;
            let loss = fwd.loss_value();
            let grads = fwd.gradients().map_err(ModelError::from)?;
            self.finish_step(loss)?;
            self.apply_gradients(grads)?;
            self.state.batch_in_epoch += 1;
            self.maybe_evaluate(data)?;
        }
        Ok(true)
    }

    fn maybe_evaluate(&mut self, data: &Dataset) -> Result<(), TrainError> {
        let every = self.config.eval_every;
        if every > 0 && self.state.step.is_multiple_of(every) {
            self.evaluate(data)?;
        }
        Ok(())
    }

    /// Log train loss and validation metrics; write `best.ckpt` on improvement.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<(), TrainError> {
        let step = self.state.step;
        if !self.state.pending.is_empty() {
            let mean = self.state.pending.iter().sum::<f64>() / self.state.pending.len() as f64;
            self.state.log.push(step, "train", "loss", mean);
            self.state.pending.clear();
        }
        let stats = match data {
            Dataset::Lm { valid, .. } => {
                let s = evaluate_lm(&self.model, valid, self.config.batch_size, self.config.unroll)?;
                self.state.log.push(step, "valid", "loss", s.mean_loss());
                self.state.log.push(step, "valid", "ppw", s.perplexity());
                s
            }
            Dataset::Classify { valid, .. } => {
                let s = evaluate_classifier(&self.model, valid, self.config.batch_size, self.config.seq_len)?;
                self.state.log.push(step, "valid", "loss", s.mean_loss());
                self.state.log.push(step, "valid", "accuracy", s.accuracy());
                s
            }
        };
        let loss = stats.mean_loss();
        if self.state.best_valid_loss.is_none_or(|b| loss < b) {
            self.state.best_valid_loss = Some(loss);
            if let Some(dir) = &self.checkpoint_dir {
                modelio::save_checkpoint(&self.checkpoint(), &dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Matrix::row_vector(vec![1.0, -2.0]);
        let mut st = OptimizerState::new(&[&p]);
        st.m[0] = Matrix::row_vector(vec![0.5, 0.5]);
        let h = AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let before = p.clone();
        adam_step(&mut [&mut p], &[Matrix::zeros(1, 2)], &mut st, &h);
        // moments decay, and the nonzero first moment still moves params
        assert_eq!(st.m[0].data(), &[0.45, 0.45]);
        let mut q = before.clone();
        let mut st2 = OptimizerState::new(&[&q]);
        adam_step(&mut [&mut q], &[Matrix::zeros(1, 2)], &mut st2, &h);
        assert_eq!(q, before);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = Matrix::row_vector(vec![0.0, 0.0]);
        let mut st = OptimizerState::new(&[&p]);
        let h = AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut [&mut p], &[Matrix::row_vector(vec![0.3, -7.0])], &mut st, &h);
        assert!((p.data()[0] + 1e-3).abs() < 1e-10);
        assert!((p.data()[1] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn sgd_clips_global_norm() {
        let mut p = Matrix::row_vector(vec![0.0, 0.0]);
        sgd_step(&mut [&mut p], &[Matrix::row_vector(vec![3.0, 4.0])], 1.0, 1.0);
        assert!((p.data()[0] + 0.6).abs() < 1e-15);
        assert!((p.data()[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn perplexity_identities() {
        assert!((perplexity(10.0 * 10f64.ln(), 10) - 10.0).abs() < 1e-12);
        assert_eq!(perplexity(0.0, 5), 1.0);
    }

    #[test]
    fn csv_format() {
        let mut log = MetricsLog::default();
        log.push(3, "valid", "ppw", 1.5);
        assert_eq!(log.to_csv(), "step,split,metric,value\n3,valid,ppw,1.5\n");
        assert_eq!(log.last("valid", "ppw"), Some(1.5));
    }

    #[test]
    fn config_rejects_zero_unroll() {
        let c = TrainConfig {
            unroll: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
    }
}
