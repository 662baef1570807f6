use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use polysent::metrics::EvalReport;
use polysent::model::SentimentModel;
use polysent::persist;
use polysent::rng::{stream_rng, Stream};
use polysent::text::{
    load_canonical, load_delimited, mix_datasets, read_canonical_str, stratified_split, write_canonical_string, ClassCounts, ColumnSpec, DatasetSplit, EncodedText, Encoder, LabelSpace, Sentiment,
    SkippedRow, Source,
};
use polysent::train::{
    carve_dev, evaluate, grid_search, paper_grid, train, train_cell, CellStatus, CellSummary, LeaderboardRow,
    Selection, TrainRunReport,
};
use polysent::{Error, Result, SentimentModel32};
use serde::Serialize;

use crate::config::{InputFormat, RunConfig};

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const MODEL_DIR: &str = "model";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write(path, text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Canonical split that must parse completely.
fn load_split(path: &Path, name: &str) -> Result<DatasetSplit> {
    let outcome = load_canonical(path)?;
    if let Some(first) = outcome.skipped.first() {
        return Err(Error::Data(format!(
            "{}: {} malformed rows (first at line {}: {})",
            path.display(),
            outcome.skipped.len(),
            first.line,
            first.reason
        )));
    }
    Ok(outcome.into_split(name))
}

/// Drops labels the label space cannot represent (`irrelevant` in 3-class runs).
fn restrict(split: DatasetSplit, space: &LabelSpace) -> DatasetSplit {
    let before = split.len();
    let kept: Vec<_> = split.examples.into_iter().filter(|e| space.index_of(e.label).is_some()).collect();
    if kept.len() < before {
        info!("{}: dropped {} examples outside the label space", split.name, before - kept.len());
    }
    DatasetSplit::new(split.name, kept)
}

#[derive(Serialize)]
struct CountRow {
    positive: usize,
    neutral: usize,
    negative: usize,
    irrelevant: usize,
    total: usize,
}

impl From<ClassCounts> for CountRow {
    fn from(c: ClassCounts) -> Self {
        CountRow {
            positive: c.positive,
            neutral: c.neutral,
            negative: c.negative,
            irrelevant: c.irrelevant,
            total: c.total(),
        }
    }
}

#[derive(Serialize)]
struct IngestSummary {
    #[serde(flatten)]
    counts: CountRow,
    skipped: usize,
}

pub fn ingest(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.ingest.files.is_empty() {
        return Err(Error::config("nothing to ingest: no [[ingest.files]] entries or --input flags"));
    }
    let mut summary = BTreeMap::new();
    let mut sidecar = String::from("file\tline\treason\n");
    for file in &cfg.ingest.files {
        let outcome = match file.format {
            InputFormat::Canonical => load_canonical(&file.path)?,
            InputFormat::Twitter | InputFormat::Germeval => {
                let source = if file.format == InputFormat::Twitter {
                    Source::Twitter
                } else {
                    Source::Germeval
                };
                let spec = file.columns.clone().unwrap_or_else(|| ColumnSpec::for_source(source));
                load_delimited(&file.path, source, &spec)?
            }
        };
        for SkippedRow { line, reason } in &outcome.skipped {
            sidecar.push_str(&format!("{}\t{line}\t{reason}\n", file.name));
        }
        let counts = ClassCounts::of(outcome.records.iter().map(|r| &r.label));
        info!("{}: {} records, {} skipped", file.name, counts.total(), outcome.skipped.len());
        write(&out.join(format!("{}.tsv", file.name)), write_canonical_string(&outcome.records))?;
        summary.insert(
            file.name.clone(),
            IngestSummary {
                counts: counts.into(),
                skipped: outcome.skipped.len(),
            },
        );
    }
    write(&out.join("skipped.tsv"), sidecar)?;
    write_json(&out.join("counts.json"), &summary)
}

pub fn split(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.split.input.is_none() && cfg.split.mix.is_empty() {
        return Err(Error::config("nothing to split: set split.input or add [[split.mix]] entries"));
    }
    let mut summary = BTreeMap::new();
    if let Some(input) = &cfg.split.input {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_owned();
        let data = load_split(input, &stem)?;
        let mut classes: Vec<Sentiment> = data.examples.iter().map(|e| e.label).collect();
        classes.sort();
        classes.dedup();
        let mut rng = stream_rng(cfg.seed, Stream::Split);
        let (train, test) = stratified_split(&data, &classes, cfg.split.test_fraction, &mut rng)?;
        for (part, split) in [("train", &train), ("test", &test)] {
            let name = format!("{stem}-{part}");
            write(&out.join(format!("{name}.tsv")), write_canonical_string(&split.examples))?;
            summary.insert(name, CountRow::from(split.counts()));
        }
    }
    for mix in &cfg.split.mix {
        let tw = load_split(&mix.twitter, "twitter")?;
        let ge = load_split(&mix.germeval, "germeval")?;
        let mixed = mix_datasets(&tw, &ge);
        write(&out.join(format!("{}.tsv", mix.name)), write_canonical_string(&mixed.examples))?;
        summary.insert(mix.name.clone(), CountRow::from(mixed.counts()));
    }
    write_json(&out.join("split-counts.json"), &summary)
}

/// Encoded train / selection / test sets plus the fitted encoder.
struct Prepared {
    encoder: Encoder,
    train: Vec<EncodedText>,
    selection: Vec<EncodedText>,
    test: Option<Vec<EncodedText>>,
}

fn prepare(cfg: &RunConfig, paper_protocol: bool) -> Result<Prepared> {
    let violations = cfg.training_violations(paper_protocol);
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let space = LabelSpace::for_count(cfg.model.classes)?;
    let train_path = cfg.data.train.as_ref().expect("validated");
    let full_train = restrict(load_split(train_path, "train")?, &space);
    let test = cfg
        .data
        .test
        .as_ref()
        .map(|p| load_split(p, "test").map(|s| restrict(s, &space)))
        .transpose()?;
    let (train_split, dev) = match (&cfg.data.dev, paper_protocol) {
        (_, true) => (full_train, None),
        (Some(p), false) => (full_train, Some(restrict(load_split(p, "dev")?, &space))),
        (None, false) => {
            let (t, d) = carve_dev(&full_train, cfg.policy.dev_fraction, cfg.seed)?;
            info!("carved {} dev examples from {} training examples", d.len(), full_train.len());
            (t, Some(d))
        }
    };
    let encoder = Encoder::fit(
        &train_split.examples,
        cfg.model.kernel_size,
        cfg.encoder.fold_case,
        cfg.encoder.max_len,
    )?;
    let train = encoder.encode_all(&train_split.examples, &space)?;
    let test = test.map(|t| encoder.encode_all(&t.examples, &space)).transpose()?;
    let selection = match dev {
        Some(d) => encoder.encode_all(&d.examples, &space)?,
        None => test.clone().expect("validated"),
    };
    Ok(Prepared {
        encoder,
        train,
        selection,
        test,
    })
}

fn effective(cfg: &RunConfig, paper_protocol: bool) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.model.seed = cfg.seed;
    if paper_protocol {
        cfg.policy.selection = Selection::Test;
    }
    cfg
}

pub fn train_cmd(cfg: &RunConfig, out: &Path, paper_protocol: bool) -> Result<TrainRunReport> {
    let cfg = effective(cfg, paper_protocol);
    let data = prepare(&cfg, paper_protocol)?;
    let mut model: SentimentModel32 =
        SentimentModel::build(cfg.model.clone(), data.encoder, &mut stream_rng(cfg.seed, Stream::Init))?;
    info!(
        "training {} parameters on {} examples",
        cfg.model.parameter_count(model.vocab_size()),
        data.train.len()
    );
    let outcome = train(&mut model, &data.train, &data.selection, &cfg.policy)?;
    let mut report = outcome.report;
    if let Some(test) = &data.test {
        report.test = Some(evaluate(&model, test)?);
    }
    persist::save(&model, &out.join(MODEL_DIR))?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_json(
        &out.join(TIMING_FILE),
        &serde_json::json!({ "wall_seconds": outcome.wall_seconds }),
    )?;
    Ok(report)
}

pub struct GridOutcome {
    pub leaderboard: Vec<LeaderboardRow>,
    pub trained: usize,
    pub reused: usize,
}

pub fn grid_search_cmd(cfg: &RunConfig, out: &Path, paper_protocol: bool) -> Result<GridOutcome> {
    let cfg = effective(cfg, paper_protocol);
    let data = prepare(&cfg, paper_protocol)?;
    let cells = paper_grid();
    let cell_dir = |slug: &str| out.join("cells").join(slug);
    let trained = std::sync::atomic::AtomicUsize::new(0);
    let leaderboard = grid_search(&cells, |_, cell| {
        let dir = cell_dir(&cell.slug());
        let summary_path = dir.join("summary.json");
        if summary_path.is_file() {
            return read_json::<CellStatus>(&summary_path).and_then(|s| match s {
                CellStatus::Completed(summary) => Ok(summary),
                CellStatus::Failed { error } => Err(Error::Data(error)),
            });
        }
        trained.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let result = train_cell::<f32>(&cfg.model, cell, &data.encoder, &data.train, &data.selection, &cfg.policy)
            .and_then(|(model, outcome, eval)| {
                persist::save(&model, &dir.join(MODEL_DIR))?;
                write_json(&dir.join(REPORT_FILE), &outcome.report)?;
                Ok(CellSummary {
                    macro_f1: eval.macro_f1,
                    accuracy: eval.accuracy,
                    best_epoch: outcome.report.best_epoch,
                    epochs_run: outcome.report.epochs.len(),
                })
            });
        // the summary is written last and marks the cell complete
        let status = match &result {
            Ok(s) => CellStatus::Completed(s.clone()),
            Err(e) => CellStatus::Failed { error: e.to_string() },
        };
        write_json(&summary_path, &status)?;
        result
    });
    let trained = trained.into_inner();

    write_json(&out.join("leaderboard.json"), &leaderboard)?;
    let mut csv = String::from("rank,dropout,optimizer,learning_rate,status,macro_f1,accuracy,best_epoch\n");
    for row in &leaderboard {
        let c = &row.cell;
        match &row.status {
            CellStatus::Completed(s) => csv.push_str(&format!(
                "{},{},{},{},completed,{},{},{}\n",
                row.rank, c.dropout, c.optimizer, c.learning_rate, s.macro_f1, s.accuracy, s.best_epoch
            )),
            CellStatus::Failed { .. } => csv.push_str(&format!(
                "{},{},{},{},failed,,,\n",
                row.rank, c.dropout, c.optimizer, c.learning_rate
            )),
        }
    }
    write(&out.join("leaderboard.csv"), csv)?;

    if let Some(best) = leaderboard.iter().find(|r| matches!(r.status, CellStatus::Completed(_))) {
        let src = cell_dir(&best.cell.slug()).join(MODEL_DIR);
        let model: SentimentModel32 = persist::load(&src)?;
        persist::save(&model, &out.join("best").join(MODEL_DIR))?;
        let report = cell_dir(&best.cell.slug()).join(REPORT_FILE);
        let bytes = fs::read(&report).map_err(|e| Error::io(&report, e))?;
        write(&out.join("best").join(REPORT_FILE), bytes)?;
    } else {
        warn!("every grid cell failed; no best model written");
    }
    Ok(GridOutcome {
        reused: cells.len() - trained,
        trained,
        leaderboard,
    })
}

pub fn evaluate_cmd(model_dir: &Path, split_path: &Path, out: &Path) -> Result<EvalReport> {
    let model: SentimentModel32 = persist::load(model_dir)?;
    let split = restrict(load_split(split_path, "eval")?, &model.classes);
    let encoded = model.encoder.encode_all(&split.examples, &model.classes)?;
    let report = evaluate(&model, &encoded)?;
    write_json(&out.join("eval.json"), &report)?;
    write(&out.join("confusion.csv"), report.confusion_csv())?;
    let title = format!("{} ({} examples)", split_path.file_name().and_then(|s| s.to_str()).unwrap_or("split"), report.total());
    write(&out.join("confusion.svg"), report.confusion_svg(&title))?;
    Ok(report)
}

pub fn predict_cmd(model_dir: &Path, texts: &[String], out: Option<&Path>) -> Result<()> {
    let model: SentimentModel32 = persist::load(model_dir)?;
    let mut lines = String::new();
    for chunk in texts.chunks(256) {
        let batch = chunk
            .iter()
            .map(|t| model.encoder.encode_text(t, 0))
            .collect::<Result<Vec<_>>>()?;
        let probs = model.predict_batch(&batch)?;
        for row in probs.data().chunks(model.classes.len()) {
            let row64: Vec<f64> = row.iter().map(|&p| p as f64).collect();
            lines.push_str(model.classes.label(polysent::model::argmax(&row64)).as_str());
            for p in row {
                lines.push_str(&format!("\t{p}"));
            }
            lines.push('\n');
        }
    }
    match out {
        Some(path) => write(path, lines),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(lines.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// Texts from a file, one per line (canonical files contribute their text column).
pub fn read_texts(path: &Path) -> Result<Vec<String>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let content = content.strip_prefix('\u{feff}').unwrap_or(&content);
    let canonical = read_canonical_str(content);
    if canonical.skipped.is_empty() && !canonical.records.is_empty() {
        return Ok(canonical.records.into_iter().map(|r| r.text).collect());
    }
    Ok(content.lines().map(str::to_owned).collect())
}

pub fn default_out(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"))
}
