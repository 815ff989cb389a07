//! Run configuration stored as sectioned `key = value` text (TOML subset).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::border::GlcfConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::phantom::PhantomConfig;
use crate::tensor::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cases: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            cases: 20,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random axis flips on training cases.
    pub flip: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamW::default();
        OptimConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            epochs: 30,
            batch_size: 1,
            flip: true,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Locations only; excluded from the config hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub glcf: GlcfConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_tau() -> f32 {
    0.5
}

impl RunConfig {
    /// Desk-scale defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            tau: default_tau(),
            data: DataConfig::default(),
            phantom: PhantomConfig::default(),
            backbone: BackboneConfig::default(),
            glcf: GlcfConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        self.phantom.validate()?;
        if self.phantom.grid.iter().any(|g| g % 8 != 0) {
            return Err(Error::Config(format!("phantom grid {:?} must be divisible by 8", self.phantom.grid)));
        }
        self.backbone.validate()?;
        self.glcf.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || o.batch_size == 0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optim: lr > 0, batch_size >= 1, betas in [0, 1) required".into()));
        }
        let s: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|&r| r < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data: split {:?} must be non-negative and sum to 1", self.data.split)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the serialized config with every path blanked and the
    /// epoch count zeroed, so a run can be extended without `--force`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c.optim.epochs = 0;
        let digest = Sha256::digest(c.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_fixed_point() {
        let mut c = RunConfig::with_seed(11);
        c.paths.dataset = "data".into();
        c.backbone.kernel = 5;
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::parse("tau = 0.5\n").is_err());
        let c = RunConfig::parse("seed = 3\n").unwrap();
        assert_eq!(c, RunConfig::with_seed(3));
    }

    #[test]
    fn hash_ignores_paths_and_epochs() {
        let a = RunConfig::with_seed(1);
        let mut b = a.clone();
        b.paths.run_dir = "elsewhere".into();
        b.optim.epochs += 10;
        assert_eq!(a.hash(), b.hash());
        b.optim.lr = 2e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("seed = 1\n[optim]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("seed = 1\ntau = 1.5\n").is_err());
        assert!(RunConfig::parse("seed = 1\n[phantom]\ngrid = [30, 32, 32]\n").is_err());
    }
}
