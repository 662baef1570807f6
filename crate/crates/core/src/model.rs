//! The hybrid classifier.
//!
//! ```text
//!            ┌─ LSTM(u1, sequence) ─ LSTM(u2, final state) ─┐
//! ids ─ E ───┤                                              ├─ concat ─ dense+ReLU ─ dropout ─ batch-norm ─ proj ─ softmax
//!            └─ conv1d(F, k) + ReLU ─ global max over time ─┘
//! ```
//!
//! Both branches read the embedding output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, BatchMoments, LstmWeights, Mode, EMBEDDING_INIT, FORGET_BIAS};
use crate::optim::OptimizerKind;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{EncodedText, Encoder, LabelSpace, Sentiment};

/// Architecture and optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub kernel_size: usize,
    pub filters: usize,
    pub lstm1_units: usize,
    pub lstm2_units: usize,
    pub dense_units: usize,
    pub classes: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    /// Enforce the published setting (`embedding_dim` 100 or 300, kernel 7).
    pub replication: bool,
    /// Start the output projection at zero (uniform initial predictions).
    pub zero_init_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            kernel_size: 7,
            filters: 100,
            lstm1_units: 64,
            lstm2_units: 64,
            dense_units: 64,
            classes: 3,
            dropout: 0.5,
            optimizer: OptimizerKind::Rmsprop,
            learning_rate: 0.001,
            seed: 0,
            replication: false,
            zero_init_output: false,
        }
    }
}

impl ModelConfig {
    /// Lists every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("embedding_dim", self.embedding_dim),
            ("kernel_size", self.kernel_size),
            ("filters", self.filters),
            ("lstm1_units", self.lstm1_units),
            ("lstm2_units", self.lstm2_units),
            ("dense_units", self.dense_units),
        ] {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if !matches!(self.classes, 3 | 4) {
            v.push(format!("classes must be 3 or 4, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            v.push(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.replication {
            if !matches!(self.embedding_dim, 100 | 300) {
                v.push(format!(
                    "embedding_dim must be 100 or 300 for replication runs, got {}",
                    self.embedding_dim
                ));
            }
            if self.kernel_size != 7 {
                v.push(format!("kernel_size must be 7 for replication runs, got {}", self.kernel_size));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Trainable scalar count for a vocabulary of `vocab` tokens.
    pub fn parameter_count(&self, vocab: usize) -> usize {
        let (d, k, f) = (self.embedding_dim, self.kernel_size, self.filters);
        let (u1, u2, h, c) = (self.lstm1_units, self.lstm2_units, self.dense_units, self.classes);
        let lstm = |d_in: usize, u: usize| 4 * (u * (d_in + u) + u);
        vocab * d + (f * k * d + f) + lstm(d, u1) + lstm(u1, u2) + ((u2 + f) * h + h) + 2 * h + (h * c + c)
    }
}

/// Store handles for every model tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub embedding: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub lstm1: [ParamId; 3],
    pub lstm2: [ParamId; 3],
    pub dense_w: ParamId,
    pub dense_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Tensor names and shapes in store (and serialization) order.
pub fn parameter_layout(config: &ModelConfig, vocab: usize) -> Vec<(&'static str, Vec<usize>, bool)> {
    let (d, k, f) = (config.embedding_dim, config.kernel_size, config.filters);
    let (u1, u2, h, c) = (config.lstm1_units, config.lstm2_units, config.dense_units, config.classes);
    vec![
        ("embedding", vec![vocab, d], true),
        ("conv.w", vec![f, k, d], true),
        ("conv.b", vec![f], true),
        ("lstm1.w_ih", vec![d, 4 * u1], true),
        ("lstm1.w_hh", vec![u1, 4 * u1], true),
        ("lstm1.b", vec![4 * u1], true),
        ("lstm2.w_ih", vec![u1, 4 * u2], true),
        ("lstm2.w_hh", vec![u2, 4 * u2], true),
        ("lstm2.b", vec![4 * u2], true),
        ("dense.w", vec![u2 + f, h], true),
        ("dense.b", vec![h], true),
        ("bn.gamma", vec![h], true),
        ("bn.beta", vec![h], true),
        ("bn.running_mean", vec![h], false),
        ("bn.running_var", vec![h], false),
        ("out.w", vec![h, c], true),
        ("out.b", vec![c], true),
    ]
}

impl ModelParams {
    pub fn resolve<S: Scalar>(store: &ParamStore<S>) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("missing model tensor {name:?}")))
        };
        Ok(ModelParams {
            embedding: id("embedding")?,
            conv_w: id("conv.w")?,
            conv_b: id("conv.b")?,
            lstm1: [id("lstm1.w_ih")?, id("lstm1.w_hh")?, id("lstm1.b")?],
            lstm2: [id("lstm2.w_ih")?, id("lstm2.w_hh")?, id("lstm2.b")?],
            dense_w: id("dense.w")?,
            dense_b: id("dense.b")?,
            bn_gamma: id("bn.gamma")?,
            bn_beta: id("bn.beta")?,
            bn_mean: id("bn.running_mean")?,
            bn_var: id("bn.running_var")?,
            out_w: id("out.w")?,
            out_b: id("out.b")?,
        })
    }
}

/// Freshly initialized parameters; a pure function of `(config, vocab, rng state)`.
pub fn init_params<S: Scalar, R: Rng + ?Sized>(config: &ModelConfig, vocab: usize, rng: &mut R) -> Result<ParamStore<S>> {
    config.validate()?;
    if vocab < 2 {
        return Err(Error::config(format!("vocabulary size must be at least 2, got {vocab}")));
    }
    let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
    let mut store = ParamStore::new();
    for (name, shape, trainable) in parameter_layout(config, vocab) {
        let t: Tensor<S> = match name {
            "embedding" => layers::uniform(&shape, EMBEDDING_INIT, rng),
            "conv.w" => layers::uniform(&shape, fan_in(shape[1] * shape[2]), rng),
            "lstm1.w_ih" | "lstm1.w_hh" | "lstm2.w_ih" | "lstm2.w_hh" | "dense.w" => {
                layers::uniform(&shape, fan_in(shape[0]), rng)
            }
            "out.w" if config.zero_init_output => Tensor::zeros(&shape),
            "out.w" => layers::uniform(&shape, fan_in(shape[0]), rng),
            "lstm1.b" | "lstm2.b" => {
                let u = shape[0] / 4;
                let mut b = Tensor::zeros(&shape);
                b.data_mut()[u..2 * u].fill(S::of(FORGET_BIAS));
                b
            }
            "bn.gamma" | "bn.running_var" => Tensor::full(&shape, S::one()),
            _ => Tensor::zeros(&shape),
        };
        store.insert(name, t, trainable)?;
    }
    Ok(store)
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars<S> {
    pub logits: Var,
    pub probs: Var,
    /// Batch-norm statistics of this batch (train mode only).
    pub bn_moments: Option<BatchMoments<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: Sentiment,
    pub class_index: usize,
    pub probabilities: Vec<f64>,
}

/// Trained (or freshly initialized) classifier with its text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SentimentModel<S> {
    pub config: ModelConfig,
    pub classes: LabelSpace,
    pub encoder: Encoder,
    pub params: ParamStore<S>,
    ids: ModelParams,
}

impl<S: Scalar> SentimentModel<S> {
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, encoder: Encoder, rng: &mut R) -> Result<Self> {
        let mut violations = config.violations();
        if encoder.kernel != config.kernel_size {
            violations.push(format!(
                "encoder kernel {} differs from kernel_size {}",
                encoder.kernel, config.kernel_size
            ));
        }
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let params = init_params(&config, encoder.vocab.len(), rng)?;
        Self::from_parts(config, encoder, params)
    }

    /// Assembles a model from persisted parts, checking every tensor shape.
    pub fn from_parts(config: ModelConfig, encoder: Encoder, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config, encoder.vocab.len());
        if layout.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, trainable), entry) in layout.iter().zip(params.entries()) {
            if entry.name != *name || entry.tensor.shape() != shape.as_slice() || entry.trainable != *trainable {
                return Err(Error::Incompatible(format!(
                    "tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                    entry.name,
                    entry.tensor.shape()
                )));
            }
        }
        let ids = ModelParams::resolve(&params)?;
        let classes = LabelSpace::for_count(config.classes)?;
        Ok(SentimentModel {
            config,
            classes,
            encoder,
            params,
            ids,
        })
    }

    pub fn param_ids(&self) -> &ModelParams {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab.len()
    }

    fn check_batch(&self, batch: &[EncodedText]) -> Result<usize> {
        let first = batch.first().ok_or(Error::EmptySequence("forward"))?;
        let len = first.ids.len();
        let vocab = self.vocab_size();
        for ex in batch {
            if ex.ids.len() != len {
                return Err(Error::Dimension {
                    op: "forward",
                    lhs: vec![len],
                    rhs: vec![ex.ids.len()],
                });
            }
            if ex.true_length == 0 || ex.true_length > len {
                return Err(Error::contract(format!(
                    "true length {} outside 1..={len}",
                    ex.true_length
                )));
            }
            if let Some(&bad) = ex.ids.iter().find(|&&id| id >= vocab) {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: bad,
                    bound: vocab,
                });
            }
        }
        if len < self.config.kernel_size {
            return Err(Error::contract(format!(
                "sequence length {len} is shorter than kernel {}",
                self.config.kernel_size
            )));
        }
        Ok(len)
    }

    /// Records the forward pass of `batch` on `tape`, which must have been
    /// created over `self.params`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, S>,
        batch: &[EncodedText],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardVars<S>> {
        let len = self.check_batch(batch)?;
        let b = batch.len();
        let d = self.config.embedding_dim;
        let p = &self.ids;

        let flat: Vec<usize> = batch.iter().flat_map(|e| e.ids.iter().copied()).collect();
        let table = tape.param(p.embedding);
        let emb = layers::embedding_lookup(tape, table, &flat)?;
        let emb = tape.reshape(emb, &[b, len, d])?;

        // recurrent branch; steps past the longest true length would not change any state
        let lengths: Vec<usize> = batch.iter().map(|e| e.true_length).collect();
        let steps = *lengths.iter().max().expect("non-empty batch");
        let xs = (0..steps).map(|t| tape.time_step(emb, t)).collect::<Result<Vec<_>>>()?;
        let lstm = |tape: &mut Tape<'_, S>, ids: &[ParamId; 3]| LstmWeights {
            w_ih: tape.param(ids[0]),
            w_hh: tape.param(ids[1]),
            bias: tape.param(ids[2]),
        };
        let w1 = lstm(tape, &p.lstm1);
        let w2 = lstm(tape, &p.lstm2);
        let h1 = layers::lstm_steps(tape, &xs, Some(&lengths), &w1)?;
        let h2 = layers::lstm_steps(tape, &h1, Some(&lengths), &w2)?;
        let recurrent = *h2.last().expect("at least one step");

        // convolutional branch
        let (cw, cb) = (tape.param(p.conv_w), tape.param(p.conv_b));
        let conv = layers::conv1d(tape, emb, cw, cb)?;
        let conv = tape.relu(conv);
        let pooled = tape.reduce_max_over_time(conv)?;

        // head
        let joined = tape.concat(recurrent, pooled)?;
        let (dw, db) = (tape.param(p.dense_w), tape.param(p.dense_b));
        let hidden = layers::dense(tape, joined, dw, db)?;
        let hidden = tape.relu(hidden);
        let hidden = layers::dropout(tape, hidden, self.config.dropout, mode, rng)?;
        let (gamma, beta) = (tape.param(p.bn_gamma), tape.param(p.bn_beta));
        let running = (self.params.get(p.bn_mean).data(), self.params.get(p.bn_var).data());
        let (normed, bn_moments) = layers::batch_norm(tape, hidden, gamma, beta, mode, running)?;
        let (ow, ob) = (tape.param(p.out_w), tape.param(p.out_b));
        let logits = layers::dense(tape, normed, ow, ob)?;
        let probs = tape.softmax(logits);
        Ok(ForwardVars {
            logits,
            probs,
            bn_moments,
        })
    }

    /// Eval-mode class probabilities `[B×C]`.
    pub fn predict_batch(&self, batch: &[EncodedText]) -> Result<Tensor<S>> {
        let mut tape = Tape::with_params(&self.params);
        // eval mode never draws from the rng
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut tape, batch, Mode::Eval, &mut unused)?;
        Ok(tape.value(out.probs).clone())
    }

    pub fn predict(&self, text: &str) -> Result<Prediction> {
        let encoded = self.encoder.encode_text(text, 0)?;
        let probs = self.predict_batch(std::slice::from_ref(&encoded))?;
        let row: Vec<f64> = probs.data().iter().map(|v| v.as_f64()).collect();
        let class_index = argmax(&row);
        Ok(Prediction {
            label: self.classes.label(class_index),
            class_index,
            probabilities: row,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, moments: &BatchMoments<S>) {
        let (mean_id, var_id) = (self.ids.bn_mean, self.ids.bn_var);
        let mut mean = self.params.get(mean_id).clone();
        let var = self.params.get_mut(var_id);
        layers::update_running_stats(mean.data_mut(), var.data_mut(), moments);
        *self.params.get_mut(mean_id) = mean;
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
