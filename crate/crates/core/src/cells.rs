//! Quantized GRU and LSTM layers with embedding input and a dense output head.
//!
//! Quantized GRU (no biases, sigmoid candidate):
//!
//! ```text
//! z  = σ(W_z · [h, x])
//! r  = σ(W_r · [h, x])
//! h~ = σ(W · [Q(r * h), x])
//! h' = Q((1 - z) * h + z * h~)
//! ```
//!
//! Quantized LSTM (cell state stays full precision, output squash is σ):
//!
//! ```text
//! f = σ(W_f · [h, x] + b_f)      i = σ(W_i · [h, x] + b_i)
//! c~ = tanh(W_C · [h, x] + b_C)  o = σ(W_o · [h, x] + b_o)
//! C' = f * C + i * c~
//! h' = Q(o * σ(C'))
//! ```
//!
//! Weights enter every matmul through a straight-through weight quantizer;
//! embeddings and hidden states are activation-quantized on `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, SteKind, Tape, Var};
use crate::data::{SequenceBatch, Targets, PAD_ID};
use crate::quantizers::{ActivationRange, QuantConfig, QuantError};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("activation input {value} outside [0, 1]")]
    Domain { value: f64 },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenId { id: usize, vocab: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}

impl From<QuantError> for ModelError {
    fn from(e: QuantError) -> Self {
        ModelError::Autograd(AutogradError::Quant(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    Lstm,
    /// GRU with quantization disabled regardless of the quant config.
    GruFp,
    LstmFp,
}

impl CellKind {
    pub fn is_lstm(self) -> bool {
        matches!(self, CellKind::Lstm | CellKind::LstmFp)
    }

    pub fn is_full_precision(self) -> bool {
        matches!(self, CellKind::GruFp | CellKind::LstmFp)
    }

    pub fn code(self) -> u8 {
        match self {
            CellKind::Gru => 0,
            CellKind::Lstm => 1,
            CellKind::GruFp => 2,
            CellKind::LstmFp => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [CellKind::Gru, CellKind::Lstm, CellKind::GruFp, CellKind::LstmFp]
            .into_iter()
            .find(|k| k.code() == c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub hidden: usize,
    pub embed: usize,
    /// Vocabulary size; 0 means "take it from the data".
    pub vocab: usize,
    /// 0 for a language model, otherwise the number of classes.
    pub num_classes: usize,
    pub dropout_embed: f64,
    pub dropout_out: f64,
    /// Pass output-layer weights through tanh before quantizing them.
    pub fc_tanh: bool,
    pub init_scale: f64,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Gru,
            hidden: 300,
            embed: 300,
            vocab: 0,
            num_classes: 0,
            dropout_embed: 0.0,
            dropout_out: 0.0,
            fc_tanh: false,
            init_scale: 0.08,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn is_classifier(&self) -> bool {
        self.num_classes > 0
    }

    pub fn output_dim(&self) -> usize {
        if self.is_classifier() {
            self.num_classes
        } else {
            self.vocab
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden == 0 || self.embed == 0 {
            return bad("hidden and embed must be positive");
        }
        if self.vocab == 0 {
            return bad("vocab must be positive");
        }
        if self.is_classifier() && self.num_classes < 2 {
            return bad("num_classes must be 0 (language model) or >= 2");
        }
        for p in [self.dropout_embed, self.dropout_out] {
            if !(0.0..=1.0).contains(&p) {
                return bad("dropout probabilities must lie in [0, 1]");
            }
        }
        if self.init_scale.is_nan() || self.init_scale <= 0.0 {
            return bad("init_scale must be positive");
        }
        Ok(())
    }
}

/// Quantization actually applied for `cell`: `*_fp` kinds force full precision.
pub fn effective_quant(cell: CellKind, quant: &QuantConfig) -> Result<QuantConfig, ModelError> {
    quant.validate()?;
    let q = if cell.is_full_precision() {
        QuantConfig {
            weight_bits: crate::quantizers::FULL_PRECISION_BITS,
            activation_bits: crate::quantizers::FULL_PRECISION_BITS,
            ..quant.clone()
        }
    } else {
        quant.clone()
    };
    if q.activations_quantized() && q.activation_range != ActivationRange::Unit01 {
        return Err(ModelError::Config(
            "recurrent cells need the unit01 activation range (dropout requires zero in the codebook)".into(),
        ));
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Matrix,
    pub b_i: Matrix,
    pub b_c: Matrix,
    pub b_o: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Gru(GruParams),
    Lstm(LstmParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `[vocab × embed]`, entries in `[0, 1]`.
    pub embedding: Matrix,
    pub cell: CellParams,
    /// `[out × hidden]`.
    pub out_w: Matrix,
    /// `[1 × out]`.
    pub out_b: Matrix,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (h, e, s) = (cfg.hidden, cfg.embed, cfg.init_scale);
        let mut embedding = Matrix::uniform(cfg.vocab, e, 0.0, 1.0, rng);
        if cfg.is_classifier() {
            embedding.row_mut(PAD_ID).fill(0.0);
        }
        let w = |rng: &mut R| Matrix::uniform(h, h + e, -s, s, rng);
        let cell = if cfg.cell.is_lstm() {
            CellParams::Lstm(LstmParams {
                w_f: w(rng),
                w_i: w(rng),
                w_c: w(rng),
                w_o: w(rng),
                b_f: Matrix::filled(1, h, cfg.forget_bias),
                b_i: Matrix::zeros(1, h),
                b_c: Matrix::zeros(1, h),
                b_o: Matrix::zeros(1, h),
            })
        } else {
            CellParams::Gru(GruParams {
                w_z: w(rng),
                w_r: w(rng),
                w_h: w(rng),
            })
        };
        let out = cfg.output_dim();
        Self {
            embedding,
            cell,
            out_w: Matrix::uniform(out, h, -s, s, rng),
            out_b: Matrix::zeros(1, out),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![("embedding", &self.embedding)];
        match &self.cell {
            CellParams::Gru(g) => v.extend([("cell.w_z", &g.w_z), ("cell.w_r", &g.w_r), ("cell.w_h", &g.w_h)]),
            CellParams::Lstm(l) => v.extend([
                ("cell.w_f", &l.w_f),
                ("cell.w_i", &l.w_i),
                ("cell.w_c", &l.w_c),
                ("cell.w_o", &l.w_o),
                ("cell.b_f", &l.b_f),
                ("cell.b_i", &l.b_i),
                ("cell.b_c", &l.b_c),
                ("cell.b_o", &l.b_o),
            ]),
        }
        v.extend([("out.w", &self.out_w), ("out.b", &self.out_b)]);
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = vec![("embedding", &mut self.embedding)];
        match &mut self.cell {
            CellParams::Gru(g) => v.extend([
                ("cell.w_z", &mut g.w_z),
                ("cell.w_r", &mut g.w_r),
                ("cell.w_h", &mut g.w_h),
            ]),
            CellParams::Lstm(l) => v.extend([
                ("cell.w_f", &mut l.w_f),
                ("cell.w_i", &mut l.w_i),
                ("cell.w_c", &mut l.w_c),
                ("cell.w_o", &mut l.w_o),
                ("cell.b_f", &mut l.b_f),
                ("cell.b_i", &mut l.b_i),
                ("cell.b_c", &mut l.b_c),
                ("cell.b_o", &mut l.b_o),
            ]),
        }
        v.extend([("out.w", &mut self.out_w), ("out.b", &mut self.out_b)]);
        v
    }

    /// Weight matrices that go through the weight quantizer.
    pub fn weight_matrices(&self) -> Vec<(&'static str, &Matrix)> {
        self.named().into_iter().filter(|(n, _)| is_weight_matrix(n)).collect()
    }
}

pub fn is_weight_matrix(name: &str) -> bool {
    name.starts_with("cell.w_") || name == "out.w"
}

/// Activation quantizer on `[0, 1]`; `None` bits disables it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActQuant(pub Option<u8>);

impl ActQuant {
    pub fn from_config(q: &QuantConfig) -> Self {
        ActQuant(q.activations_quantized().then_some(q.activation_bits))
    }

    pub fn apply(self, tape: &mut Tape, v: Var) -> Result<Var, AutogradError> {
        match self.0 {
            Some(bits) => tape.ste_quantize(
                v,
                SteKind::Activation {
                    bits,
                    range: ActivationRange::Unit01,
                },
            ),
            None => Ok(v),
        }
    }
}

fn quantize_weight(tape: &mut Tape, w: Var, quant: &QuantConfig) -> Result<Var, AutogradError> {
    if quant.weights_quantized() {
        tape.ste_quantize(w, SteKind::Weights(quant.clone()))
    } else {
        Ok(w)
    }
}

/// Quantized GRU weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_f: Var,
    pub w_i: Var,
    pub w_c: Var,
    pub w_o: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_c: Var,
    pub b_o: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum CellVars {
    Gru(GruVars),
    Lstm(LstmVars),
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    /// Leaves aligned with [`ModelParams::named`].
    pub leaves: Vec<Var>,
    pub embedding: Var,
    pub cell: CellVars,
    /// Output weights after the (optional tanh and) weight quantizer.
    pub out_w: Var,
    pub out_b: Var,
}

fn check_unit(tape: &Tape, v: Var) -> Result<(), ModelError> {
    match tape.value(v).data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(&value) => Err(ModelError::Domain { value }),
        None => Ok(()),
    }
}

/// One quantized GRU step. `h_prev` and `x` must already lie in `[0, 1]`.
pub fn gru_step(tape: &mut Tape, w: &GruVars, h_prev: Var, x: Var, act: ActQuant) -> Result<Var, ModelError> {
    check_unit(tape, h_prev)?;
    check_unit(tape, x)?;
    Ok(gru_step_unchecked(tape, w, h_prev, x, act)?)
}

fn gru_step_unchecked(tape: &mut Tape, w: &GruVars, h_prev: Var, x: Var, act: ActQuant) -> Result<Var, AutogradError> {
    let hx = tape.concat(h_prev, x);
    let z_pre = tape.matmul_t(hx, w.w_z);
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.matmul_t(hx, w.w_r);
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev);
    let rh_q = act.apply(tape, rh)?;
    let rhx = tape.concat(rh_q, x);
    let cand_pre = tape.matmul_t(rhx, w.w_h);
    let cand = tape.sigmoid(cand_pre);
    let keep = tape.one_minus(z);
    let carried = tape.mul(keep, h_prev);
    let update = tape.mul(z, cand);
    let h = tape.add(carried, update);
    act.apply(tape, h)
}

/// One quantized LSTM step; returns `(h, C)`. `C` is never quantized.
pub fn lstm_step(
    tape: &mut Tape,
    w: &LstmVars,
    h_prev: Var,
    c_prev: Var,
    x: Var,
    act: ActQuant,
) -> Result<(Var, Var), ModelError> {
    check_unit(tape, h_prev)?;
    check_unit(tape, x)?;
    Ok(lstm_step_unchecked(tape, w, h_prev, c_prev, x, act)?)
}

fn lstm_step_unchecked(
    tape: &mut Tape,
    w: &LstmVars,
    h_prev: Var,
    c_prev: Var,
    x: Var,
    act: ActQuant,
) -> Result<(Var, Var), AutogradError> {
    let hx = tape.concat(h_prev, x);
    let gate = |tape: &mut Tape, wm: Var, b: Var| {
        let pre = tape.matmul_t(hx, wm);
        tape.add_row(pre, b)
    };
    let f_pre = gate(tape, w.w_f, w.b_f);
    let i_pre = gate(tape, w.w_i, w.b_i);
    let c_pre = gate(tape, w.w_c, w.b_c);
    let o_pre = gate(tape, w.w_o, w.b_o);
    let f = tape.sigmoid(f_pre);
    let i = tape.sigmoid(i_pre);
    let cand = tape.tanh(c_pre);
    let o = tape.sigmoid(o_pre);
    let kept = tape.mul(f, c_prev);
    let written = tape.mul(i, cand);
    let c = tape.add(kept, written);
    let squashed = tape.sigmoid(c);
    let h = tape.mul(o, squashed);
    let h = act.apply(tape, h)?;
    Ok((h, c))
}

/// Quantized embedding rows for `ids`.
pub fn embed_lookup(tape: &mut Tape, table: Var, ids: &[usize], act: ActQuant) -> Result<Var, ModelError> {
    let vocab = tape.value(table).rows();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::TokenId { id, vocab });
    }
    let rows = tape.gather(table, ids)?;
    Ok(act.apply(tape, rows)?)
}

/// `logits = dropout(h) · Wᵀ + b`. Dropout is skipped when `rng` is `None`.
pub fn output_projection<R: Rng + ?Sized>(
    tape: &mut Tape,
    h: Var,
    w: Var,
    b: Var,
    dropout: f64,
    rng: Option<&mut R>,
) -> Var {
    let h = match rng {
        Some(rng) => tape.dropout(h, dropout, rng),
        None => h,
    };
    let y = tape.matmul_t(h, w);
    tape.add_row(y, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recurrent state carried between truncated-BPTT windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub h: Matrix,
    pub c: Option<Matrix>,
}

/// Result of unrolling a batch on a fresh tape.
pub struct Forward {
    pub tape: Tape,
    pub bound: BoundModel,
    pub loss: Var,
    /// One `[batch × out]` node per step for language models, only the
    /// final step for classifiers.
    pub logits: Vec<Var>,
    pub state: State,
    /// Summed cross entropy in nats over all scored tokens / sequences.
    pub xent_sum: f64,
    pub scored: usize,
    /// Correct argmax predictions (classification only).
    pub correct: usize,
}

impl Forward {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    pub fn logits_values(&self) -> Vec<Matrix> {
        self.logits.iter().map(|&v| self.tape.value(v).clone()).collect()
    }

    /// Gradients for every parameter, aligned with [`ModelParams::named`].
    pub fn gradients(&self) -> Result<Vec<Matrix>, AutogradError> {
        let g = self.tape.backward(self.loss)?;
        Ok(self.bound.leaves.iter().map(|&v| g.leaf(&self.tape, v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    /// Effective quantization (full precision for `*_fp` cells).
    pub quant: QuantConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, quant: &QuantConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let quant = effective_quant(config.cell, quant)?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, quant, params })
    }

    pub fn act_quant(&self) -> ActQuant {
        ActQuant::from_config(&self.quant)
    }

    pub fn zero_state(&self, batch: usize) -> State {
        State {
            h: Matrix::zeros(batch, self.config.hidden),
            c: self
                .config
                .cell
                .is_lstm()
                .then(|| Matrix::zeros(batch, self.config.hidden)),
        }
    }

    /// Record all parameters as leaves and their quantized forms.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel, AutogradError> {
        let leaves: Vec<Var> = self
            .params
            .named()
            .into_iter()
            .map(|(_, m)| tape.leaf(m.clone()))
            .collect();
        let q = &self.quant;
        let embedding = leaves[0];
        let (cell, next) = match &self.params.cell {
            CellParams::Gru(_) => (
                CellVars::Gru(GruVars {
                    w_z: quantize_weight(tape, leaves[1], q)?,
                    w_r: quantize_weight(tape, leaves[2], q)?,
                    w_h: quantize_weight(tape, leaves[3], q)?,
                }),
                4,
            ),
            CellParams::Lstm(_) => (
                CellVars::Lstm(LstmVars {
                    w_f: quantize_weight(tape, leaves[1], q)?,
                    w_i: quantize_weight(tape, leaves[2], q)?,
                    w_c: quantize_weight(tape, leaves[3], q)?,
                    w_o: quantize_weight(tape, leaves[4], q)?,
                    b_f: leaves[5],
                    b_i: leaves[6],
                    b_c: leaves[7],
                    b_o: leaves[8],
                }),
                9,
            ),
        };
        let out_raw = if self.config.fc_tanh {
            tape.tanh(leaves[next])
        } else {
            leaves[next]
        };
        let out_w = quantize_weight(tape, out_raw, q)?;
        Ok(BoundModel {
            embedding,
            cell,
            out_w,
            out_b: leaves[next + 1],
            leaves,
        })
    }

    /// Unroll `batch` from `init` (zeros when `None`).
    ///
    /// Language models score every step; classifiers score the final step
    /// only. `rng` drives dropout in [`Mode::Train`] and is untouched in
    /// [`Mode::Eval`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &SequenceBatch,
        init: Option<&State>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        let vocab = self.config.vocab;
        if let Some(id) = batch.max_id().filter(|&id| id >= vocab) {
            return Err(ModelError::TokenId { id, vocab });
        }
        let train = mode == Mode::Train;
        let act = self.act_quant();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let zero;
        let init = match init {
            Some(s) => s,
            None => {
                zero = self.zero_state(batch.batch);
                &zero
            }
        };
        let mut h = tape.constant(init.h.clone());
        let mut c = init.c.as_ref().map(|c| tape.constant(c.clone()));

        let classifier = self.config.is_classifier();
        let mut logits = Vec::new();
        let mut step_losses: Vec<(Var, usize)> = Vec::new();
        let mut xent_sum = 0.0;
        let mut scored = 0;
        let mut correct = 0;

        for t in 0..batch.time {
            let ids = batch.column(t);
            let x = embed_lookup(&mut tape, bound.embedding, &ids, act)?;
            let x = if train {
                tape.dropout(x, self.config.dropout_embed, rng)
            } else {
                x
            };
            match &bound.cell {
                CellVars::Gru(w) => h = gru_step_unchecked(&mut tape, w, h, x, act)?,
                CellVars::Lstm(w) => {
                    let c_prev = c.expect("lstm state");
                    let (hn, cn) = lstm_step_unchecked(&mut tape, w, h, c_prev, x, act)?;
                    h = hn;
                    c = Some(cn);
                }
            }
            if classifier && t + 1 < batch.time {
                continue;
            }
            let y = output_projection(
                &mut tape,
                h,
                bound.out_w,
                bound.out_b,
                self.config.dropout_out,
                train.then_some(&mut *rng),
            );
            logits.push(y);
            if !classifier {
                let targets = batch.target_column(t).expect("token targets for language model");
                let mask = batch.mask_column(t);
                let n = mask.as_ref().map_or(batch.batch, |m| m.iter().filter(|&&b| b).count());
                let l = tape.softmax_xent(y, &targets, mask.as_deref());
                xent_sum += tape.value(l).data()[0] * n as f64;
                scored += n;
                step_losses.push((l, n));
            }
        }

        let loss = if classifier {
            let Targets::Labels(labels) = &batch.targets else {
                return Err(ModelError::Config("classifier needs label targets".into()));
            };
            if let Some(&label) = labels.iter().find(|&&l| l >= self.config.num_classes) {
                return Err(ModelError::Label {
                    label,
                    classes: self.config.num_classes,
                });
            }
            let y = *logits.last().expect("at least one step");
            let l = tape.softmax_xent(y, labels, None);
            xent_sum = tape.value(l).data()[0] * labels.len() as f64;
            scored = labels.len();
            let lv = tape.value(y);
            correct = (0..lv.rows()).filter(|&r| argmax(lv.row(r)) == labels[r]).count();
            l
        } else {
            let total = scored.max(1) as f64;
            let mut acc: Option<Var> = None;
            for (l, n) in step_losses {
                let w = tape.scale(l, n as f64 / total);
                acc = Some(match acc {
                    Some(a) => tape.add(a, w),
                    None => w,
                });
            }
            match acc {
                Some(a) => a,
                None => tape.constant(Matrix::zeros(1, 1)),
            }
        };

        let state = State {
            h: tape.value(h).clone(),
            c: c.map(|c| tape.value(c).clone()),
        };
        Ok(Forward {
            tape,
            bound,
            loss,
            logits,
            state,
            xent_sum,
            scored,
            correct,
        })
    }

    /// Keep embeddings in `[0, 1]` (and the pad row at zero for classifiers).
    pub fn project_embedding(&mut self) {
        for v in self.params.embedding.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        if self.config.is_classifier() {
            self.params.embedding.row_mut(PAD_ID).fill(0.0);
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::quantize_unit_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gru_zero(tape: &mut Tape, hidden: usize, input: usize) -> GruVars {
        let mut z = || tape.leaf(Matrix::zeros(hidden, hidden + input));
        GruVars {
            w_z: z(),
            w_r: z(),
            w_h: z(),
        }
    }

    #[test]
    fn gru_zero_weights_closed_form() {
        let mut t = Tape::new();
        let w = gru_zero(&mut t, 3, 2);
        let h_prev_vals = [0.0, 1.0 / 3.0, 1.0];
        let h = t.constant(Matrix::row_vector(h_prev_vals.to_vec()));
        let x = t.constant(Matrix::row_vector(vec![0.5, 1.0]));
        let out = gru_step(&mut t, &w, h, x, ActQuant(Some(2))).unwrap();
        let expected: Vec<f64> = h_prev_vals
            .iter()
            .map(|&hp| quantize_unit_scalar(0.5 * hp + 0.25, 2))
            .collect();
        assert_eq!(t.value(out).data(), expected.as_slice());
    }

    #[test]
    fn gru_rejects_out_of_range_input() {
        let mut t = Tape::new();
        let w = gru_zero(&mut t, 1, 1);
        let h = t.constant(Matrix::row_vector(vec![0.0]));
        let x = t.constant(Matrix::row_vector(vec![1.5]));
        assert!(matches!(
            gru_step(&mut t, &w, h, x, ActQuant(Some(2))),
            Err(ModelError::Domain { .. })
        ));
    }

    #[test]
    fn lstm_zero_weights_closed_form() {
        let mut t = Tape::new();
        let mut z = |r, c| t.leaf(Matrix::zeros(r, c));
        let w = LstmVars {
            w_f: z(2, 3),
            w_i: z(2, 3),
            w_c: z(2, 3),
            w_o: z(2, 3),
            b_f: z(1, 2),
            b_i: z(1, 2),
            b_c: z(1, 2),
            b_o: z(1, 2),
        };
        let h = t.constant(Matrix::row_vector(vec![1.0, 0.0]));
        let c_prev = [2.0, -4.0];
        let c = t.constant(Matrix::row_vector(c_prev.to_vec()));
        let x = t.constant(Matrix::row_vector(vec![1.0]));
        let (h2, c2) = lstm_step(&mut t, &w, h, c, x, ActQuant(Some(2))).unwrap();
        let expected_c: Vec<f64> = c_prev.iter().map(|v| 0.5 * v).collect();
        assert_eq!(t.value(c2).data(), expected_c.as_slice());
        let expected_h: Vec<f64> = expected_c
            .iter()
            .map(|&cv| quantize_unit_scalar(0.5 * crate::autograd::sigmoid(cv), 2))
            .collect();
        assert_eq!(t.value(h2).data(), expected_h.as_slice());
    }

    #[test]
    fn embedding_examples() {
        let mut t = Tape::new();
        let mut e = Matrix::zeros(3, 4);
        e.row_mut(1).fill(0.6);
        let table = t.leaf(e);
        let rows = embed_lookup(&mut t, table, &[0, 1], ActQuant(Some(2))).unwrap();
        assert_eq!(&t.value(rows).data()[..4], &[0.0; 4]);
        assert!(t.value(rows).data()[4..].iter().all(|&v| (v - 2.0 / 3.0).abs() < 1e-15));
        assert!(matches!(
            embed_lookup(&mut t, table, &[3], ActQuant(Some(2))),
            Err(ModelError::TokenId { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn projection_identity_and_full_dropout() {
        let mut t = Tape::new();
        let h = t.constant(Matrix::row_vector(vec![0.2, 0.7, 1.0]));
        let w = t.leaf(Matrix::identity(3));
        let b = t.leaf(Matrix::zeros(1, 3));
        let y = output_projection::<ChaCha8Rng>(&mut t, h, w, b, 0.0, None);
        assert_eq!(t.value(y).data(), &[0.2, 0.7, 1.0]);

        let bias = t.leaf(Matrix::row_vector(vec![0.5, -1.0, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = output_projection(&mut t, h, w, bias, 1.0, Some(&mut rng));
        assert_eq!(t.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn cell_kind_codes_round_trip() {
        for k in [CellKind::Gru, CellKind::Lstm, CellKind::GruFp, CellKind::LstmFp] {
            assert_eq!(CellKind::from_code(k.code()), Some(k));
        }
        assert_eq!(CellKind::from_code(9), None);
    }

    #[test]
    fn symmetric_activation_rejected_for_cells() {
        let q = QuantConfig {
            activation_range: ActivationRange::Symmetric,
            ..QuantConfig::default()
        };
        assert!(matches!(effective_quant(CellKind::Gru, &q), Err(ModelError::Config(_))));
        assert!(effective_quant(CellKind::GruFp, &q).is_ok());
    }
}
