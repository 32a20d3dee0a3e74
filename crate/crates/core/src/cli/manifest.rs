use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fsutil::atomic_write;

use super::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    TrainLm,
    GenPairs,
    Sweep,
    HparamSweep,
    Stats,
    Plot,
}

impl Stage {
    pub const ALL: [Self; 7] = [
        Self::GenCorpus,
        Self::TrainLm,
        Self::GenPairs,
        Self::Sweep,
        Self::HparamSweep,
        Self::Stats,
        Self::Plot,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::GenCorpus => "gen-corpus",
            Self::TrainLm => "train-lm",
            Self::GenPairs => "gen-pairs",
            Self::Sweep => "sweep",
            Self::HparamSweep => "hparam-sweep",
            Self::Stats => "stats",
            Self::Plot => "plot",
        }
    }

    pub fn prerequisites(&self) -> &'static [Stage] {
        match self {
            Self::GenCorpus => &[],
            Self::TrainLm | Self::GenPairs => &[Self::GenCorpus],
            Self::Sweep => &[Self::TrainLm, Self::GenPairs],
            Self::HparamSweep => &[Self::TrainLm, Self::GenPairs],
            Self::Stats => &[Self::Sweep],
            Self::Plot => &[Self::Stats],
        }
    }

    /// Stages whose outputs derive from this one, directly or not.
    pub fn dependents(&self) -> Vec<Stage> {
        Self::ALL
            .into_iter()
            .filter(|s| s != self && s.depends_on(*self))
            .collect()
    }

    fn depends_on(&self, other: Stage) -> bool {
        self.prerequisites()
            .iter()
            .any(|&p| p == other || p.depends_on(other))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hex config hash the stage ran under.
    pub config_hash: String,
    pub wall_seconds: f64,
    /// Seconds since the Unix epoch at completion.
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// Stages begun but not finished, with the config hash they began under.
    #[serde(default)]
    pub started: BTreeMap<Stage, String>,
}

pub fn hash_hex(h: u64) -> String {
    format!("{h:016x}")
}

impl RunManifest {
    pub fn new(config_hash: u64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hash_hex(config_hash),
            stages: BTreeMap::new(),
            started: BTreeMap::new(),
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    /// The manifest in `out_dir`, or a fresh one when none exists yet.
    pub fn load_or_new(out_dir: &Path, config_hash: u64) -> Result<Self, CliError> {
        let path = Self::path(out_dir);
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let mut m: Self = serde_json::from_str(&text)
                    .map_err(|e| CliError::Contract(format!("corrupt manifest {}: {e}", path.display())))?;
                m.config_hash = hash_hex(config_hash);
                Ok(m)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(config_hash)),
            Err(e) => Err(CliError::Io(format!("reading {}: {e}", path.display()))),
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        let path = Self::path(out_dir);
        atomic_write(&path, text.as_bytes()).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
    }

    /// Whether `stage` completed under the current config.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.stages
            .get(&stage)
            .is_some_and(|r| r.config_hash == self.config_hash)
    }

    /// Fails with the command to run when a prerequisite is missing or stale.
    pub fn require(&self, stage: Stage) -> Result<(), CliError> {
        for &p in stage.prerequisites() {
            match self.stages.get(&p) {
                None => {
                    return Err(CliError::Contract(format!(
                        "`{stage}` needs the output of `{p}`; run `gapscope {p}` first"
                    )))
                }
                Some(r) if r.config_hash != self.config_hash => {
                    return Err(CliError::Contract(format!(
                        "`{p}` ran under a different config; run `gapscope {p} --force` first"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Drops `stage` and everything downstream of it.
    pub fn invalidate(&mut self, stage: Stage) {
        self.stages.remove(&stage);
        for d in stage.dependents() {
            self.stages.remove(&d);
        }
    }

    pub fn complete(&mut self, stage: Stage, wall_seconds: f64) {
        let completed_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.stages.insert(
            stage,
            StageRecord {
                config_hash: self.config_hash.clone(),
                wall_seconds,
                completed_at,
            },
        );
    }
}
