//! Run configuration: one JSON document, overridable from flags.

use std::path::{Path, PathBuf};

use esabre::sampler::SamplerConfig;
use esabre::selection::{CriterionKind, CvConfig};
use esabre::subposterior::PartitionUnit;
use esabre::{Hyperparameters, Mode};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShardConfig {
    pub k: usize,
    pub unit: PartitionUnit,
    /// Run shards under corrected nominal hyperparameters.
    pub correct: bool,
    pub correction_samples: usize,
    pub max_rounds: usize,
}

impl Default for ShardConfig {
    fn default() -> Self {
        Self { k: 10, unit: PartitionUnit::Pairs, correct: true, correction_samples: 20_000, max_rounds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub criteria: Vec<CriterionKind>,
    pub cv: CvConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { criteria: vec![CriterionKind::Biwaic], cv: CvConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    /// Directory with `observations.csv`, `design.csv` and optionally
    /// `truth.json`.
    pub data: Option<PathBuf>,
    pub hyper: Option<Hyperparameters>,
    pub sampler: SamplerConfig,
    /// Random-effect factors to keep, by name; all when absent.
    pub re_factors: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub selection: SelectionConfig,
    pub shards: ShardConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads a config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.data = c.data.map(|p| resolve(base, &p));
        c.output = c.output.map(|p| resolve(base, &p));
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::Usage(format!("invalid config: {e}")))
    }

    /// Seed and mode pushed into the sampler config; errors if anything
    /// required is missing.
    pub fn finish(mut self) -> Result<Self, Failure> {
        let seed = self.seed.ok_or_else(|| Failure::Usage("a seed is required (config `seed` or --seed)".into()))?;
        self.sampler.seed = seed;
        if let Some(m) = self.mode {
            self.sampler.mode = m;
        }
        self.mode = Some(self.sampler.mode);
        self.selection.cv.seed = seed;
        self.sampler.validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.sampler.seed
    }

    pub fn data_dir(&self) -> Result<&Path, Failure> {
        self.data.as_deref().ok_or_else(|| Failure::Usage("no data directory (config `data` or --data)".into()))
    }

    pub fn output_dir(&self) -> Result<&Path, Failure> {
        self.output.as_deref().ok_or_else(|| Failure::Usage("no output directory (config `output` or --out)".into()))
    }

    /// The config as written next to the outputs. The output path is left
    /// out so that runs into different directories compare equal.
    pub fn echo(&self) -> String {
        let c = Self { output: None, ..self.clone() };
        serde_json::to_string_pretty(&c).expect("config serialises") + "\n"
    }
}
