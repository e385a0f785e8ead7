//! TOML run configuration.

use std::path::{Path, PathBuf};

use fewshot_crf::embedding::{EmbeddingConfig, EmbeddingMode, EmbeddingSource};
use fewshot_crf::eval::F1Mode;
use fewshot_crf::model::Decoder;
use fewshot_crf::sampler::SamplerConfig;
use fewshot_crf::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_CORPUS_DIR: &str = "FEWSHOT_CORPUS_DIR";
pub const ENV_OUTPUT_DIR: &str = "FEWSHOT_OUTPUT_DIR";
pub const ENV_CHECKPOINT: &str = "FEWSHOT_CHECKPOINT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of `*.conll` files, one domain per file.
    pub corpus_dir: Option<PathBuf>,
    /// Where `sample` writes and `train`/`eval` read episode files.
    /// Defaults to `<output_dir>/episodes`.
    pub episodes_dir: Option<PathBuf>,
    /// GloVe-style text vectors; unknown tokens fall back to hashed vectors.
    pub lexicon: Option<PathBuf>,
    /// Embedding dump directory for the `external_dump` source.
    pub dump: Option<PathBuf>,
    /// Defaults to `<output_dir>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

/// Leave-one-out domain split and episode counts per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub target: String,
    pub dev: String,
    pub support_sets: usize,
    pub queries: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            target: String::new(),
            dev: String::new(),
            support_sets: 100,
            queries: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decoder when no `--decoder` flag is given; the model's default otherwise.
    pub decoder: Option<Decoder>,
    pub mode: F1Mode,
    pub bigrams: bool,
    /// Also write `token gold predicted` lines for the conlleval script.
    pub conlleval_dump: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decoder: None,
            mode: F1Mode::Formula,
            bigrams: false,
            conlleval_dump: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the sampler and trainer seeds when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub split: SplitConfig,
    pub sampler: SamplerConfig,
    pub embedding: EmbeddingConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_env(|k| std::env::var_os(k).map(PathBuf::from));
        if let Some(seed) = cfg.seed {
            cfg.sampler.rng_seed = seed;
            cfg.train.rng_seed = seed;
        }
        if !cfg.train.use_pairwise {
            cfg.embedding.mode = EmbeddingMode::Independent;
        }
        Ok(cfg)
    }

    fn apply_env(&mut self, var: impl Fn(&str) -> Option<PathBuf>) {
        if let Some(p) = var(ENV_CORPUS_DIR) {
            self.paths.corpus_dir = Some(p);
        }
        if let Some(p) = var(ENV_OUTPUT_DIR) {
            self.paths.output_dir = p;
        }
        if let Some(p) = var(ENV_CHECKPOINT) {
            self.paths.checkpoint = Some(p);
        }
    }

    pub fn episodes_dir(&self) -> PathBuf {
        self.paths
            .episodes_dir
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("episodes"))
    }

    pub fn episode_file(&self, split: &str) -> PathBuf {
        self.episodes_dir().join(format!("{split}.jsonl"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("checkpoint.json"))
    }

    /// Checks the settings a command relies on; `inputs` are paths that must exist.
    pub fn validate(&self, inputs: &[&Path]) -> Result<(), CliError> {
        self.sampler.validate()?;
        self.embedding.validate()?;
        self.train.validate()?;
        if self.embedding.source == EmbeddingSource::ExternalDump && self.paths.dump.is_none() {
            return Err(CliError::Usage(
                "embedding source `external_dump` needs paths.dump".into(),
            ));
        }
        for p in inputs {
            if !p.exists() {
                return Err(CliError::Usage(format!("{}: no such file or directory", p.display())));
            }
        }
        std::fs::create_dir_all(&self.paths.output_dir)
            .map_err(|e| CliError::Usage(format!("{}: {e}", self.paths.output_dir.display())))
    }
}
