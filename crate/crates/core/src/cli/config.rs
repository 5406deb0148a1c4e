use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::{SamplerPlan, UncondMode};
use crate::training::TrainingConfig;

/// Overrides the configured report directory.
pub const REPORT_DIR_ENV: &str = "ARCHITTS_REPORT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub test_dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data/train.bin".into(),
            test_dataset: "data/test.bin".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub train_utterances: usize,
    pub test_utterances: usize,
    /// Inclusive token-count range per utterance.
    pub length_range: [usize; 2],
    pub seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            train_utterances: 2000,
            test_utterances: 200,
            length_range: [4, 12],
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub nfe: usize,
    pub cfg_strength: f64,
    pub timeshift: f64,
    pub sharing_ratio: f64,
    pub seed: u64,
    pub uncond: UncondMode,
    /// Share of each test utterance's tokens used as the prompt.
    pub prompt_fraction: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            nfe: 32,
            cfg_strength: 4.0,
            timeshift: 3.0,
            sharing_ratio: 0.0,
            seed: 0,
            uncond: UncondMode::AllNull,
            prompt_fraction: 0.3,
        }
    }
}

impl SamplerSettings {
    pub fn plan(&self) -> Result<SamplerPlan> {
        let plan = SamplerPlan {
            nfe: self.nfe,
            recompute: self.nfe,
            cfg_strength: self.cfg_strength,
            timeshift: self.timeshift,
            seed: self.seed,
            uncond: self.uncond,
        }
        .with_sharing_ratio(self.sharing_ratio)?;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub ratios: Vec<f64>,
    pub nfe: Vec<usize>,
    /// Evaluate only the first this many test utterances.
    pub utterances: Option<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.5, 0.75],
            nfe: vec![16, 32],
            utterances: None,
        }
    }
}

/// Everything a command needs, loaded from TOML with every section optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub codec: CodecConfig,
    pub corpus: CorpusSettings,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            codec: CodecConfig::default(),
            corpus: CorpusSettings::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            sampler: SamplerSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl RunConfig {
    /// Built-in defaults, then the file if given, then the report-dir environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Ok(dir) = std::env::var(REPORT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.paths.reports = dir.into();
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.model.latent_dim != self.codec.latent_dim
            || self.model.speaker_dim != self.codec.speaker_dim
            || self.model.vocab_size != self.codec.vocab_size
        {
            return Err(Error::Config(format!(
                "model (latent {}, speaker {}, vocab {}) does not match codec (latent {}, speaker {}, vocab {})",
                self.model.latent_dim,
                self.model.speaker_dim,
                self.model.vocab_size,
                self.codec.latent_dim,
                self.codec.speaker_dim,
                self.codec.vocab_size
            )));
        }
        let [lo, hi] = self.corpus.length_range;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!("corpus length_range [{lo}, {hi}] needs 2 <= min <= max")));
        }
        if !(0.0 < self.sampler.prompt_fraction && self.sampler.prompt_fraction < 1.0) {
            return Err(Error::Config("sampler.prompt_fraction must lie in (0, 1)".into()));
        }
        self.sampler.plan()?;
        for &r in &self.bench.ratios {
            SamplerPlan::recompute_for_ratio(1, r)?;
        }
        if self.bench.nfe.contains(&0) {
            return Err(Error::Config("bench.nfe entries must be positive".into()));
        }
        Ok(())
    }
}
