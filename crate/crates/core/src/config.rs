//! Experiment configuration in TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggkit::LambdaSearchConfig;
use crate::data::ToyDatasetSpec;
use crate::fedsim::FederationConfig;
use crate::ifs::{Augmentation, CodesPerImage};
use crate::nn::ModelSpec;
use crate::ssl::PretrainConfig;
use crate::{Error, Result};

pub const ENV_OUTPUT_DIR: &str = "FEDPT_OUTPUT_DIR";
pub const ENV_THREADS: &str = "FEDPT_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Toy(ToyDatasetSpec),
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10 {
        path: PathBuf,
    },
    /// A pair archive; the run pre-trains an encoder and stops there.
    FpsArchive {
        path: PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Toy(ToyDatasetSpec::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelChoice {
    /// Two 3×3 conv blocks and two dense layers.
    #[default]
    SmallCnn,
    Mlp {
        hidden: Vec<usize>,
    },
}

impl ModelChoice {
    pub fn build(&self, side: usize, classes: usize) -> Result<ModelSpec> {
        match self {
            ModelChoice::SmallCnn => ModelSpec::small_cnn(3, side, classes),
            ModelChoice::Mlp { hidden } => {
                let mut layers = vec![crate::nn::Layer::Dense {
                    out: *hidden.first().unwrap_or(&classes),
                }];
                let mut rest: Vec<usize> = hidden.iter().skip(1).copied().collect();
                if !hidden.is_empty() {
                    rest.push(classes);
                }
                for out in rest {
                    layers.push(crate::nn::Layer::Relu);
                    layers.push(crate::nn::Layer::Dense { out });
                }
                ModelSpec::new(vec![3, side, side], layers)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpsPretrainConfig {
    /// Size of the IFS code pool.
    pub codes: usize,
    pub pairs: u64,
    pub n_iters: usize,
    pub codes_per_image: CodesPerImage,
    pub augment: Augmentation,
    /// Archive generation threads; 0 uses the global pool size.
    pub workers: usize,
    pub training: PretrainConfig,
}

impl Default for FpsPretrainConfig {
    fn default() -> Self {
        FpsPretrainConfig {
            codes: 1000,
            pairs: 1000,
            n_iters: 1000,
            codes_per_image: CodesPerImage::Fixed { count: 2 },
            augment: Augmentation::standard(),
            workers: 0,
            training: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum PretrainSource {
    #[default]
    None,
    Fps(FpsPretrainConfig),
    /// A FEDW checkpoint whose entries overlay the initial model by name.
    Checkpoint {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Per-client accuracies of every round.
    pub decomposition: bool,
    pub lambda_star: bool,
    pub surface: bool,
    pub segment: bool,
    pub surface_samples: usize,
    pub segment_steps: usize,
    pub lambda: LambdaSearchConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            decomposition: false,
            lambda_star: false,
            surface: false,
            segment: false,
            surface_samples: 300,
            segment_steps: 11,
            lambda: LambdaSearchConfig::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn any(&self) -> bool {
        self.decomposition || self.lambda_star || self.surface || self.segment
    }
}

/// A full run: data, optional pre-training, federation and analyses.
///
/// `seed` drives data generation, initialisation, pre-training and the
/// federation; `analysis_seed` drives only the post-hoc analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub analysis_seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelChoice,
    pub pretrain: PretrainSource,
    pub federation: FederationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            analysis_seed: 1,
            output_dir: PathBuf::from("fedpt-out"),
            dataset: DatasetSource::default(),
            model: ModelChoice::default(),
            pretrain: PretrainSource::default(),
            federation: FederationConfig {
                clients: 8,
                alpha: 0.3,
                rounds: 20,
                ..FederationConfig::default()
            },
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates, including that referenced paths exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML form.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        match &self.dataset {
            DatasetSource::Toy(spec) => spec.validate()?,
            DatasetSource::Cifar10 { path } => must_exist(path, "CIFAR-10 directory")?,
            DatasetSource::FpsArchive { path } => must_exist(path, "pair archive")?,
        }
        match &self.pretrain {
            PretrainSource::None => {}
            PretrainSource::Fps(f) => {
                if f.codes == 0 || f.n_iters == 0 {
                    return Err(Error::Config("FPS pre-training needs codes and iterations".into()));
                }
            }
            PretrainSource::Checkpoint { path } => must_exist(path, "checkpoint")?,
        }
        if self.analysis.segment && self.analysis.segment_steps < 2 {
            return Err(Error::Config("segment_steps must be ≥ 2".into()));
        }
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 || self.analysis_seed > i64::MAX as u64 {
            return Err(Error::Config("seeds must fit in a signed 64-bit integer".into()));
        }
        Ok(())
    }

    /// Applies `FEDPT_OUTPUT_DIR` if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(ENV_OUTPUT_DIR) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    /// Image side length implied by the dataset source, if known upfront.
    pub fn image_side(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::Toy(spec) => Some(spec.side),
            DatasetSource::Cifar10 { .. } => Some(32),
            DatasetSource::FpsArchive { .. } => None,
        }
    }
}

/// `FEDPT_THREADS` as a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(ENV_THREADS) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{ENV_THREADS} must be a positive integer, got {v:?}"
            ))),
        },
        _ => Ok(None),
    }
}
