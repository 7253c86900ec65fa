use std::path::{Path, PathBuf};

use instassemble::diffusion::{SampleConfig, TrainConfig};
use instassemble::{Error, ModelConfig, Phase, Result};
use serde::{Deserialize, Serialize};

/// Everything a command needs, after defaults and flag overrides are resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives scene generation, model initialization, training batches and sampling noise.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub data: DataSection,
    pub paths: PathSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub phase: Phase,
    pub steps: u64,
    pub batch_size: usize,
    /// `None` picks the phase default.
    pub lr: Option<f64>,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub layout_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `sparse` or `dense`.
    pub preset: String,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub annotation: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            data: DataSection::default(),
            paths: PathSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { phase: Phase::Base, steps: t.steps, batch_size: t.batch_size, lr: t.lr, checkpoint_every: t.checkpoint_every }
    }
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self { steps: s.steps, layout_ratio: s.layout_ratio }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { preset: "sparse".into(), count: 256 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sample_config().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if let Some(lr) = self.train.lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("train.lr must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig { steps: self.sample.steps, layout_ratio: self.sample.layout_ratio, seed: self.seed }
    }
}

/// Returns the path or a configuration error naming the missing setting.
pub fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path.as_deref().ok_or_else(|| Error::Config(format!("missing {what}")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}
