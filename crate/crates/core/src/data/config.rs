use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cim::CrossbarSpec;
use crate::error::{Error, Result};
use crate::nn::{Architecture, QuantConfig};
use crate::optim::AdamConfig;
use crate::quant::SteSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

/// Everything a command needs to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: String,
    pub dataset: DatasetKind,
    /// Always 1.
    pub weight_bits: u32,
    /// 1..=8, or 32 for a full-precision baseline.
    pub act_bits: u32,
    pub binarize_first_last: bool,
    pub ema_momentum: f64,
    pub ste: SteSchedule,
    pub optimizer: AdamConfig,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_lr: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crossbar: CrossbarSpec,
    /// `None` uses the shipped tables.
    pub cost_tables: Option<PathBuf>,
    /// `None` falls back to `BWMA_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    pub cifar_mean: [f64; 3],
    pub cifar_std: [f64; 3],
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "mnist-tiny".into(),
            dataset: DatasetKind::Mnist,
            weight_bits: 1,
            act_bits: 4,
            binarize_first_last: false,
            ema_momentum: 0.9,
            ste: SteSchedule::default(),
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            cosine_lr: true,
            seed: 0,
            epochs: 10,
            batch_size: 64,
            crossbar: CrossbarSpec::default(),
            cost_tables: None,
            data_dir: None,
            cifar_mean: [0.4914, 0.4822, 0.4465],
            cifar_std: [0.2470, 0.2435, 0.2616],
            train_limit: None,
            test_limit: None,
            eval_batch_size: 500,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let arch = Architecture::builtin(&self.arch)?;
        if self.weight_bits != 1 {
            return Err(Error::Config(format!("weight_bits is fixed at 1, got {}", self.weight_bits)));
        }
        if !((1..=8).contains(&self.act_bits) || self.act_bits == QuantConfig::FLOAT_SENTINEL) {
            return Err(Error::Config(format!(
                "act_bits must be in 1..=8 or {} for full precision, got {}",
                QuantConfig::FLOAT_SENTINEL,
                self.act_bits
            )));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!("ema_momentum must be in (0, 1), got {}", self.ema_momentum)));
        }
        self.ste.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optimizer.validate()?;
        self.crossbar.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let want = match self.dataset {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        };
        if arch.input != want {
            return Err(Error::Config(format!(
                "architecture {} expects input {:?}, dataset {:?} provides {want:?}",
                self.arch, arch.input, self.dataset
            )));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::builtin(&self.arch)
    }

    pub fn quant_config(&self) -> QuantConfig {
        let mut q = QuantConfig::bwma(self.act_bits);
        q.ema_momentum = self.ema_momentum;
        if q.binarize_weights {
            q.binarize_first_last = self.binarize_first_last;
        }
        q
    }
}
