use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{OdcLabels, Reduction};

/// Which objective is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Multi-task model without adaptation.
    Ds,
    /// Plus the pixel-level domain classifier.
    DsPdc,
    /// Plus the (class, domain) object classifier.
    Full,
    /// Full, with an object classifier that only predicts the domain.
    #[serde(rename = "full-2class-odc")]
    Full2ClassOdc,
    /// A lone segmentation net trained on coarse box maps.
    SingleSeg,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Ds, Mode::DsPdc, Mode::Full, Mode::Full2ClassOdc, Mode::SingleSeg];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ds => "ds",
            Mode::DsPdc => "ds-pdc",
            Mode::Full => "full",
            Mode::Full2ClassOdc => "full-2class-odc",
            Mode::SingleSeg => "single-seg",
        }
    }

    pub fn uses_pdc(self) -> bool {
        matches!(self, Mode::DsPdc | Mode::Full | Mode::Full2ClassOdc)
    }

    pub fn odc_labels(self) -> Option<OdcLabels> {
        match self {
            Mode::Full => Some(OdcLabels::ClassAndDomain),
            Mode::Full2ClassOdc => Some(OdcLabels::DomainOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Training recipe of the lone segmentation net.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingleSegVariant {
    /// Multi-label loss on target coarse maps only.
    BoxesOnly,
    /// Source pixel labels plus target coarse maps.
    #[default]
    SourcePixelsTargetBoxes,
    /// As above, with pixel-level adversarial adaptation.
    Adapted,
}

impl SingleSegVariant {
    pub fn index(self) -> u8 {
        match self {
            SingleSegVariant::BoxesOnly => 1,
            SingleSegVariant::SourcePixelsTargetBoxes => 2,
            SingleSegVariant::Adapted => 3,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(SingleSegVariant::BoxesOnly),
            2 => Some(SingleSegVariant::SourcePixelsTargetBoxes),
            3 => Some(SingleSegVariant::Adapted),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsOptimizer {
    #[default]
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierOptimizer {
    #[default]
    Adam,
}

/// Flat training configuration, read from and written to TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub single_seg_variant: SingleSegVariant,
    /// Trunk learning rate.
    pub lr_base: f64,
    /// Learning rate of every non-trunk DS layer.
    pub lr_heads: f64,
    pub lr_pdc: f64,
    pub lr_odc: f64,
    pub momentum: f64,
    pub optimizer_ds: DsOptimizer,
    pub optimizer_classifiers: ClassifierOptimizer,
    pub lambda_pdc: f64,
    pub lambda_odc: f64,
    pub steps: u64,
    /// Scenes per domain per step.
    pub batch: usize,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Cap on target-val scenes used by periodic evaluation (0 = all).
    pub eval_scenes: usize,
    /// Classifier updates per DS update.
    pub classifier_steps: u32,
    /// Initial steps without adversarial terms in the DS update.
    pub warmup_steps: u64,
    pub reduction: Reduction,
    /// Checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Full,
            single_seg_variant: SingleSegVariant::default(),
            lr_base: 1e-4,
            lr_heads: 1e-2,
            lr_pdc: 1e-4,
            lr_odc: 1e-4,
            momentum: 0.9,
            optimizer_ds: DsOptimizer::Sgd,
            optimizer_classifiers: ClassifierOptimizer::Adam,
            lambda_pdc: 1.0,
            lambda_odc: 1.0,
            steps: 2000,
            batch: 2,
            seed: 0,
            eval_every: 500,
            eval_scenes: 0,
            classifier_steps: 1,
            warmup_steps: 0,
            reduction: Reduction::Mean,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule used by the desk-scale comparison ladder.
    pub fn ladder() -> Self {
        TrainConfig {
            lr_base: 3e-3,
            lr_heads: 1e-2,
            lr_pdc: 1e-3,
            lr_odc: 1e-3,
            lambda_pdc: 0.1,
            lambda_odc: 0.1,
            steps: 3000,
            batch: 4,
            eval_every: 1000,
            eval_scenes: 100,
            ..Default::default()
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_base", self.lr_base),
            ("lr_heads", self.lr_heads),
            ("lr_pdc", self.lr_pdc),
            ("lr_odc", self.lr_odc),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.lambda_pdc >= 0.0 && self.lambda_odc >= 0.0) {
            return Err(Error::Config("adversarial weights must be >= 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.classifier_steps == 0 {
            return Err(Error::Config("classifier_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
