//! Mini-batch training, evaluation and the hyperparameter grid.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::EvalReport;
use crate::model::{argmax, ModelConfig, SentimentModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::text::{stratified_split, DatasetSplit, EncodedText, Encoder, Sentiment};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 256;

/// Which split drives epoch selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Dev,
    /// Select on the test split, as in the published grid search. Leaks test data.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPolicy {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a selection-score improvement before stopping.
    pub patience: usize,
    /// Fraction of train carved off as dev when no dev split exists.
    pub dev_fraction: f64,
    pub selection: Selection,
    /// Stop as soon as train accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        TrainPolicy {
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            dev_fraction: 0.1,
            selection: Selection::Dev,
            target_train_accuracy: None,
            clip_norm: None,
        }
    }
}

impl TrainPolicy {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_epochs == 0 {
            v.push("max_epochs must be positive".into());
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            v.push(format!("dev_fraction must be in (0, 1), got {}", self.dev_fraction));
        }
        if let Some(t) = self.target_train_accuracy {
            if !(0.0..=1.0).contains(&t) {
                v.push(format!("target_train_accuracy must be in [0, 1], got {t}"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                v.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_macro_f1: f64,
    pub selection_accuracy: f64,
    pub selection_macro_f1: f64,
}

/// Everything a run produced except wall time, which is kept out so that
/// identical runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub policy: TrainPolicy,
    pub selection: Selection,
    /// Present when the selection split is also the reported test split.
    pub watermark: Option<String>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stop_reason: String,
    pub test: Option<EvalReport>,
}

pub struct TrainOutcome {
    pub report: TrainRunReport,
    pub wall_seconds: f64,
}

pub const PAPER_PROTOCOL_WATERMARK: &str =
    "epochs and hyperparameters were selected on the test split; test scores are optimistically biased";

/// Stratified carve of `fraction` of `data` into a dev split, using the
/// split stream of `seed`.
pub fn carve_dev(data: &DatasetSplit, fraction: f64, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    let mut classes: Vec<Sentiment> = data.examples.iter().map(|e| e.label).collect();
    classes.sort();
    classes.dedup();
    // a different stream offset than the train/test split so the two never correlate
    let mut rng = stream_rng(seed.wrapping_add(1), Stream::Split);
    let (train, dev) = stratified_split(data, &classes, fraction, &mut rng)?;
    Ok((
        DatasetSplit::new(format!("{}-fit", data.name), train.examples),
        DatasetSplit::new(format!("{}-dev", data.name), dev.examples),
    ))
}

/// Batches of `size` indices; a trailing batch of one joins its predecessor.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Eval-mode class-index predictions.
pub fn predict_indices<S: Scalar>(model: &SentimentModel<S>, data: &[EncodedText]) -> Result<Vec<usize>> {
    let c = model.classes.len();
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let probs = model.predict_batch(chunk)?;
        for row in probs.data().chunks(c) {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            out.push(argmax(&row));
        }
    }
    Ok(out)
}

pub fn evaluate<S: Scalar>(model: &SentimentModel<S>, data: &[EncodedText]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptySequence("evaluation split"));
    }
    let predicted = predict_indices(model, data)?;
    let truth: Vec<usize> = data.iter().map(|e| e.label).collect();
    let names = model.classes.classes().iter().map(|c| c.to_string()).collect();
    EvalReport::from_predictions(names, &truth, &predicted)
}

/// One optimizer update on `batch`; returns the mean batch loss.
fn train_step<S: Scalar, R: rand::Rng>(
    model: &mut SentimentModel<S>,
    optimizer: &mut Optimizer<S>,
    batch: &[EncodedText],
    rng: &mut R,
    where_: (usize, usize),
) -> Result<f64> {
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let (loss, grads, moments) = {
        let mut tape = Tape::with_params(&model.params);
        let fwd = model.forward(&mut tape, batch, Mode::Train, rng)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            let culprit = tape.first_non_finite().map_or("softmax_cross_entropy", |(_, op)| op);
            return Err(Error::Numerical(format!(
                "loss became {value} at epoch {} batch {}; first non-finite value produced by `{culprit}`",
                where_.0, where_.1
            )));
        }
        (value, tape.backward(loss)?.into_param_grads(), fwd.bn_moments)
    };
    optimizer.step(&mut model.params, &grads)?;
    if let Some(m) = moments {
        model.update_running_stats(&m);
    }
    if let Some(e) = model.params.entries().iter().find(|e| !e.tensor.all_finite()) {
        return Err(Error::Numerical(format!(
            "parameter `{}` became non-finite after the {} update at epoch {} batch {}",
            e.name,
            optimizer.kind(),
            where_.0,
            where_.1
        )));
    }
    Ok(loss)
}

/// Trains `model` in place and keeps the parameters of the epoch with the
/// best selection macro-F1 (ties keep the earlier epoch).
pub fn train<S: Scalar>(
    model: &mut SentimentModel<S>,
    train_set: &[EncodedText],
    selection_set: &[EncodedText],
    policy: &TrainPolicy,
) -> Result<TrainOutcome> {
    let started = std::time::Instant::now();
    let violations = policy.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    if train_set.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 examples for batch statistics, got {}",
            train_set.len()
        )));
    }
    if selection_set.is_empty() {
        return Err(Error::EmptySequence("selection split"));
    }
    let seed = model.config.seed;
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(seed, Stream::Dropout);
    let mut optimizer =
        Optimizer::new(model.config.optimizer, model.config.learning_rate, &model.params).with_clip_norm(policy.clip_norm);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<S>)> = None;
    let mut stale = 0;
    let mut stop_reason = format!("reached max_epochs = {}", policy.max_epochs);
    let mut batch = Vec::with_capacity(policy.batch_size + 1);

    for epoch in 1..=policy.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in batches(&order, policy.batch_size).into_iter().enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_set[i].clone()));
            let loss = train_step(model, &mut optimizer, &batch, &mut dropout_rng, (epoch, b + 1))?;
            loss_sum += loss * idx.len() as f64;
        }
        let train_eval = evaluate(model, train_set)?;
        let sel_eval = evaluate(model, selection_set)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: train_eval.accuracy,
            train_macro_f1: train_eval.macro_f1,
            selection_accuracy: sel_eval.accuracy,
            selection_macro_f1: sel_eval.macro_f1,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} selection macro-F1 {:.4}",
            loss_sum / train_set.len() as f64,
            train_eval.accuracy,
            sel_eval.macro_f1
        );

        if best.as_ref().is_none_or(|(f1, _, _)| sel_eval.macro_f1 > *f1) {
            best = Some((sel_eval.macro_f1, epoch, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if policy.target_train_accuracy.is_some_and(|t| train_eval.accuracy >= t) {
            stop_reason = format!("train accuracy reached {:.4}", train_eval.accuracy);
            // the target overrides selection: keep what was just reached
            best = Some((sel_eval.macro_f1, epoch, model.params.clone()));
            break;
        }
        if stale >= policy.patience {
            stop_reason = format!("no selection improvement for {} epochs", policy.patience);
            break;
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    let watermark = (policy.selection == Selection::Test).then(|| PAPER_PROTOCOL_WATERMARK.to_owned());
    let report = TrainRunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        config: model.config.clone(),
        policy: policy.clone(),
        selection: policy.selection,
        watermark,
        epochs,
        best_epoch,
        stop_reason,
        test: None,
    };
    Ok(TrainOutcome {
        report,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
}

impl GridCell {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            dropout: self.dropout,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            ..base.clone()
        }
    }

    /// Filesystem-friendly identifier, e.g. `d0.5-rmsprop-lr0.001`.
    pub fn slug(&self) -> String {
        format!("d{}-{}-lr{}", self.dropout, self.optimizer, self.learning_rate)
    }
}

pub const GRID_DROPOUT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const GRID_LEARNING_RATE: [f64; 4] = [0.001, 0.002, 0.003, 0.004];

/// The 60-cell dropout × optimizer × learning-rate grid.
pub fn paper_grid() -> Vec<GridCell> {
    let mut cells = Vec::with_capacity(60);
    for dropout in GRID_DROPOUT {
        for optimizer in OptimizerKind::ALL {
            for learning_rate in GRID_LEARNING_RATE {
                cells.push(GridCell {
                    dropout,
                    optimizer,
                    learning_rate,
                });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellStatus {
    Completed(CellSummary),
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub index: usize,
    pub cell: GridCell,
    #[serde(flatten)]
    pub status: CellStatus,
}

/// Builds and trains one cell from `base`, then scores it on the selection split.
pub fn train_cell<S: Scalar>(
    base: &ModelConfig,
    cell: &GridCell,
    encoder: &Encoder,
    train_set: &[EncodedText],
    selection_set: &[EncodedText],
    policy: &TrainPolicy,
) -> Result<(SentimentModel<S>, TrainOutcome, EvalReport)> {
    let config = cell.apply(base);
    let mut model = SentimentModel::build(config, encoder.clone(), &mut stream_rng(base.seed, Stream::Init))?;
    let outcome = train(&mut model, train_set, selection_set, policy)?;
    let eval = evaluate(&model, selection_set)?;
    Ok((model, outcome, eval))
}

/// Runs `run` for every cell in parallel and ranks the results by macro-F1
/// (descending, grid order on ties). Failed cells rank last.
pub fn grid_search<F>(cells: &[GridCell], run: F) -> Vec<LeaderboardRow>
where
    F: Fn(usize, &GridCell) -> Result<CellSummary> + Sync,
{
    let results: Vec<CellStatus> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| match run(i, cell) {
            Ok(summary) => CellStatus::Completed(summary),
            Err(e) => {
                log::warn!("grid cell {} failed: {e}", cell.slug());
                CellStatus::Failed { error: e.to_string() }
            }
        })
        .collect();
    rank(cells, results)
}

pub fn rank(cells: &[GridCell], results: Vec<CellStatus>) -> Vec<LeaderboardRow> {
    let mut rows: Vec<LeaderboardRow> = cells
        .iter()
        .zip(results)
        .enumerate()
        .map(|(index, (&cell, status))| LeaderboardRow {
            rank: 0,
            index,
            cell,
            status,
        })
        .collect();
    let score = |r: &LeaderboardRow| match &r.status {
        CellStatus::Completed(s) => s.macro_f1,
        CellStatus::Failed { .. } => f64::NEG_INFINITY,
    };
    rows.sort_by(|a, b| score(b).total_cmp(&score(a)).then(a.index.cmp(&b.index)));
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    rows
}
