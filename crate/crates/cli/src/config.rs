//! Run configuration file (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use polysent::model::ModelConfig;
use polysent::text::ColumnSpec;
use polysent::train::TrainPolicy;
use polysent::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Twitter,
    Germeval,
    Canonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestFile {
    /// Output stem: `<name>.tsv` in the output directory.
    pub name: String,
    pub path: PathBuf,
    pub format: InputFormat,
    /// Overrides the format's default column layout.
    pub columns: Option<ColumnSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    pub files: Vec<IngestFile>,
}

/// Concatenation of a Twitter split (minus `irrelevant`) and a GermEval split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub name: String,
    pub twitter: PathBuf,
    pub germeval: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Canonical file to split into `<stem>-train.tsv` / `<stem>-test.tsv`.
    pub input: Option<PathBuf>,
    pub test_fraction: f64,
    pub mix: Vec<MixEntry>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            input: None,
            test_fraction: 0.2,
            mix: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    /// When absent, a stratified share of train is carved off.
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub fold_case: bool,
    /// Fixed pad length; chosen from the training lengths when absent.
    pub max_len: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            fold_case: true,
            max_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub ingest: IngestSection,
    pub split: SplitSection,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub model: ModelConfig,
    pub policy: TrainPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            out: None,
            ingest: IngestSection::default(),
            split: SplitSection::default(),
            data: DataSection::default(),
            encoder: EncoderSection::default(),
            model: ModelConfig::default(),
            policy: TrainPolicy::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(vec![format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )]));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.out);
        for f in &mut self.ingest.files {
            fix(&mut f.path);
        }
        fix_opt(&mut self.split.input);
        for m in &mut self.split.mix {
            fix(&mut m.twitter);
            fix(&mut m.germeval);
        }
        fix_opt(&mut self.data.train);
        fix_opt(&mut self.data.dev);
        fix_opt(&mut self.data.test);
    }

    /// Every problem that would stop a train run, collected at once.
    pub fn training_violations(&self, need_test: bool) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.policy.violations());
        let mut need = |name: &str, p: &Option<PathBuf>, required: bool| match p {
            Some(p) if !p.is_file() => v.push(format!("data.{name}: {} does not exist", p.display())),
            None if required => v.push(format!("data.{name} is required")),
            _ => {}
        };
        need("train", &self.data.train, true);
        need("dev", &self.data.dev, false);
        need("test", &self.data.test, need_test);
        if let Some(l) = self.encoder.max_len {
            if l < self.model.kernel_size {
                v.push(format!(
                    "encoder.max_len {l} is shorter than model.kernel_size {}",
                    self.model.kernel_size
                ));
            }
        }
        v
    }
}
