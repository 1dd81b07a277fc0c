use std::path::{Path, PathBuf};

use gflowmask_core::data::{NoiseSpec, PreprocessConfig, SyntheticConfig};
use gflowmask_core::gflowout::{GFlowOutConfig, TrainHyper};
use gflowmask_core::metrics::EntropyKind;
use gflowmask_core::nn::BackboneConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_epochs() -> usize {
    30
}

fn default_dataset_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Stochastic forward passes per sample.
    pub passes: usize,
    pub ece_bins: usize,
    pub entropy: EntropyKind,
    /// Noise applied to every preprocessed image, e.g. `"gaussian:0.1"`.
    #[serde(with = "noise_text")]
    pub noise: Option<NoiseSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            passes: 5,
            ece_bins: 10,
            entropy: EntropyKind::Predictive,
            noise: None,
        }
    }
}

mod noise_text {
    use gflowmask_core::data::NoiseSpec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<NoiseSpec>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => s.serialize_str(&n.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NoiseSpec>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| t.parse().map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Everything a subcommand needs. Unknown keys are rejected; `seed` is
/// mandatory. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub gflowout: GFlowOutConfig,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// Generator settings for `gen-data`; its seed is replaced by `seed`.
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Root holding `train/`, `test/` and `ood/` datasets.
    #[serde(default = "default_dataset_dir")]
    pub dataset_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.backbone.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.gflowout.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.preprocess.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.synthetic.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.backbone.in_channels != 3 {
            return bad(format!("images are RGB but backbone.in_channels = {}", self.backbone.in_channels));
        }
        if self.preprocess.crop != self.backbone.input_size {
            return bad(format!(
                "preprocess.crop {} differs from backbone.input_size {}",
                self.preprocess.crop, self.backbone.input_size
            ));
        }
        if self.synthetic.image_size < self.preprocess.crop {
            return bad(format!(
                "synthetic.image_size {} is smaller than the crop {}",
                self.synthetic.image_size, self.preprocess.crop
            ));
        }
        if self.synthetic.n_classes != self.backbone.n_classes {
            return bad(format!(
                "synthetic.n_classes {} differs from backbone.n_classes {}",
                self.synthetic.n_classes, self.backbone.n_classes
            ));
        }
        if self.epochs == 0 || self.train.batch_size == 0 || self.eval.passes == 0 || self.eval.ece_bins == 0 {
            return bad("epochs, train.batch_size, eval.passes and eval.ece_bins must be positive".into());
        }
        if !(self.train.lambda_tb >= 0.0 && self.train.lambda_tb.is_finite()) {
            return bad(format!("train.lambda_tb {} must be finite and non-negative", self.train.lambda_tb));
        }
        for (name, o) in [("classifier", &self.train.classifier), ("policy", &self.train.policy)] {
            if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
                return bad(format!("train.{name}: invalid Adam settings {o:?}"));
            }
        }
        Ok(())
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.dataset_dir.join(split)
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.output_dir.join("model.gfmk")
    }
}
