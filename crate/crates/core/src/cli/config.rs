use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::eval::{Condition, SweepConfig};
use crate::grammar::{Construction, CorpusSpec, TemplateVariant};
use crate::model::{LmTrainConfig, ModelConfig};
use crate::stats::TokenEncoding;

use super::CliError;

/// Model shape; the vocabulary size comes from the lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(1);
        Self {
            n_layers: t.n_layers,
            d_model: t.d_model,
            n_heads: t.n_heads,
            max_seq_len: t.max_seq_len,
            seed: t.seed,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }
}

/// Which train/eval pairings the `sweep` stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSet {
    /// All sixteen train × eval variant pairings.
    #[default]
    All,
    /// Directions trained on wh-questions, evaluated on wh-questions.
    WhOnly,
    /// Train and eval construction agree.
    Within,
}

impl ConditionSet {
    pub fn conditions(&self) -> Vec<Condition> {
        Condition::all()
            .into_iter()
            .filter(|c| match self {
                Self::All => true,
                Self::WhOnly => {
                    c.train.construction == Construction::Wh && c.eval.construction == Construction::Wh
                }
                Self::Within => c.train.construction == c.eval.construction,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Conditions swept at every checkpoint.
    #[serde(default)]
    pub conditions: ConditionSet,
    /// Conditions swept at the final checkpoint; defaults to `conditions`.
    #[serde(default)]
    pub final_conditions: Option<ConditionSet>,
    /// Checkpoint indices to sweep; all when absent.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            conditions: ConditionSet::All,
            final_conditions: None,
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HparamSection {
    pub batch_sizes: Vec<usize>,
    pub steps: Vec<usize>,
    #[serde(default = "default_hparam_variant")]
    pub variant: TemplateVariant,
    /// Seeds for the grid; the run seeds when absent.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Checkpoint index; the final checkpoint when absent.
    #[serde(default)]
    pub checkpoint: Option<usize>,
}

fn default_hparam_variant() -> TemplateVariant {
    TemplateVariant::WH_ANIMATE
}

impl Default for HparamSection {
    fn default() -> Self {
        Self {
            batch_sizes: vec![8, 16, 25, 32],
            steps: vec![40, 60, 80, 100, 120],
            variant: default_hparam_variant(),
            seeds: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default)]
    pub tokens: TokenEncoding,
}

/// Full parameter surface of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths resolve against the config file's directory.
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Lexicon TOML; the built-in lexicon when absent.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Worker threads; rayon's default when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Token counts at which checkpoints are taken.
    pub schedule: Vec<u64>,
    #[serde(default)]
    pub model: ModelSection,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub lm: LmTrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub hparam: HparamSection,
    #[serde(default)]
    pub stats: StatsSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; relative paths inside are resolved
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(l) = cfg.lexicon.as_mut() {
            if l.is_relative() {
                *l = base.join(&*l);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Contract("seeds must be non-empty".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(CliError::Contract("seeds must be distinct".into()));
        }
        if self.schedule.is_empty() || self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Contract(
                "schedule must be non-empty and strictly increasing".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(CliError::Contract("workers must be positive".into()));
        }
        self.corpus.validate()?;
        self.sweep.validate()?;
        if let Some(ix) = &self.experiment.checkpoints {
            if ix.is_empty() {
                return Err(CliError::Contract("experiment.checkpoints is empty".into()));
            }
            if let Some(i) = ix.iter().find(|&&i| i >= self.schedule.len()) {
                return Err(CliError::Contract(format!(
                    "experiment.checkpoints index {i} exceeds the {} scheduled checkpoints",
                    self.schedule.len()
                )));
            }
        }
        let h = &self.hparam;
        if h.batch_sizes.is_empty() || h.steps.is_empty() {
            return Err(CliError::Contract("hparam grid must be non-empty".into()));
        }
        if h.batch_sizes.contains(&0) || h.steps.contains(&0) {
            return Err(CliError::Contract("hparam batch sizes and steps must be positive".into()));
        }
        if h.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(CliError::Contract("hparam.seeds is empty".into()));
        }
        if let Some(i) = h.checkpoint {
            if i >= self.schedule.len() {
                return Err(CliError::Contract(format!("hparam.checkpoint {i} is not scheduled")));
            }
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON form, ignoring `out_dir` and `workers`;
    /// stable across field order in the TOML source.
    pub fn hash(&self) -> u64 {
        let canon = Self {
            out_dir: PathBuf::new(),
            workers: None,
            ..self.clone()
        };
        let mut h = FnvHasher::default();
        h.write(serde_json::to_string(&canon).expect("config serializes").as_bytes());
        h.finish()
    }

    pub fn hparam_seeds(&self) -> &[u64] {
        self.hparam.seeds.as_deref().unwrap_or(&self.seeds)
    }

    pub fn hparam_checkpoint(&self) -> usize {
        self.hparam.checkpoint.unwrap_or(self.schedule.len() - 1)
    }

    pub fn sweep_checkpoints(&self) -> Vec<usize> {
        self.experiment
            .checkpoints
            .clone()
            .unwrap_or_else(|| (0..self.schedule.len()).collect())
    }

    /// Conditions to sweep at checkpoint `index`.
    pub fn conditions_at(&self, index: usize) -> Vec<Condition> {
        let last = self.schedule.len() - 1;
        match self.experiment.final_conditions {
            Some(set) if index == last => set.conditions(),
            _ => self.experiment.conditions.conditions(),
        }
    }
}

/// A commented starting-point config at toy scale.
pub const EXAMPLE_CONFIG: &str = r#"out_dir = "run"
seeds = [1, 2, 3, 4, 5, 6]
schedule = [2000, 6000, 20000, 50000, 120000, 300000]
# workers = 4

[model]
n_layers = 4
d_model = 64
n_heads = 4
max_seq_len = 16
seed = 0

[corpus]
total_tokens = 300000
seed = 1
topic_adverb_prob = 0.5

[corpus.mix]
declarative = 0.8
wh = 0.196
topic = 0.004

[lm]
learning_rate = 0.003
batch_size = 16

[sweep]
train_pairs = 300
heldout_pairs = 100

[sweep.das]
batch_size = 25
steps = 80
learning_rate = 0.005
seed = 0

[experiment]
conditions = "all"

[hparam]
batch_sizes = [8, 16, 25, 32]
steps = [40, 60, 80, 100, 120]
variant = "wh_animate"

[stats]
tokens = "categorical"
"#;
