//! Experiment configuration: one TOML file with `dataset`, `model`,
//! `train`, `fcos`, `baseline` and `output` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::data::{GenConfig, Modulation};
use crate::error::{FcosError, Result};
use crate::fusion::{FusionConfig, FusionOrder, InputMode, Metric, Scheme};
use crate::lacd::{FeatureReduction, LacdConfig, ProbeConfig};
use crate::model::{ArchName, ArchSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Load this dataset container instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest: Option<PathBuf>,
    pub classes: Vec<Modulation>,
    pub snr_db: Vec<f64>,
    pub per_cell: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let g = GenConfig::default();
        DatasetSection {
            ingest: None,
            classes: g.classes,
            snr_db: g.snr_db,
            per_cell: g.per_cell,
            length: g.length,
            seed: g.seed,
        }
    }
}

impl DatasetSection {
    pub fn gen(&self) -> GenConfig {
        GenConfig {
            classes: self.classes.clone(),
            snr_db: self.snr_db.clone(),
            per_cell: self.per_cell,
            length: self.length,
            seed: self.seed,
            ..GenConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks_per_stage: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<bool>,
    /// Initialization seed; defaults to `train.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: ArchName::PlainCnn1d,
            widths: None,
            kernel: None,
            blocks_per_stage: None,
            batchnorm: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcosSection {
    pub keep_ratio: f64,
    pub metric: Metric,
    pub scheme: Scheme,
    pub order: FusionOrder,
    pub input_mode: InputMode,
    /// Run layer collapse diagnosis; when off, the stage-1 model goes
    /// through the warm and final fine-tunes without removal.
    pub lacd: bool,
    pub beta: f64,
    pub warm_epochs: usize,
    pub probe_epochs: usize,
    pub probe_reduction: FeatureReduction,
    pub final_epochs: usize,
}

impl Default for FcosSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        let l = LacdConfig::default();
        FcosSection {
            keep_ratio: f.keep_ratio,
            metric: f.metric,
            scheme: f.scheme,
            order: f.order,
            input_mode: f.input_mode,
            lacd: true,
            beta: l.beta,
            warm_epochs: l.warm_epochs,
            probe_epochs: l.probe.epochs,
            probe_reduction: l.probe.reduction,
            final_epochs: l.final_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: std::env::var_os("FCOS_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("fcos-out")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub fcos: FcosSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| FcosError::Config(e.message().to_string() + &span_hint(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FcosError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            FcosError::Config(m) => FcosError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Field-level checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.ingest.is_none() {
            self.dataset.gen().validate()?;
        }
        self.train.validate()?;
        self.fusion().validate().map_err(|e| match e {
            FcosError::Config(m) => FcosError::Config(format!("fcos.keep_ratio: {m}")),
            other => other,
        })?;
        if !(self.fcos.beta > 0.0 && self.fcos.beta.is_finite()) {
            return Err(FcosError::Config(format!(
                "fcos.beta must be positive, got {}",
                self.fcos.beta
            )));
        }
        if let Some(w) = &self.model.widths {
            if w.is_empty() || w.contains(&0) {
                return Err(FcosError::Config("model.widths must be nonempty and positive".into()));
            }
        }
        if self.model.kernel == Some(0) {
            return Err(FcosError::Config("model.kernel must be positive".into()));
        }
        if let Some(b) = &self.baseline {
            b.validate()?;
        }
        Ok(())
    }

    /// Architecture with every default filled in, for `classes` outputs and
    /// inputs of `length` samples.
    pub fn arch(&self, classes: usize, length: usize) -> ArchSpec {
        let seed = self.model.seed.unwrap_or(self.train.seed);
        let mut a = ArchSpec::default_for(self.model.arch, classes, seed);
        a.input_length = length;
        if let Some(w) = &self.model.widths {
            a.widths = w.clone();
        }
        if let Some(k) = self.model.kernel {
            a.kernel = k;
        }
        if let Some(b) = self.model.blocks_per_stage {
            a.blocks_per_stage = b;
        }
        if let Some(b) = self.model.batchnorm {
            a.batchnorm = b;
        }
        a
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            keep_ratio: self.fcos.keep_ratio,
            metric: self.fcos.metric,
            scheme: self.fcos.scheme,
            order: self.fcos.order,
            input_mode: self.fcos.input_mode,
        }
    }

    pub fn lacd(&self) -> LacdConfig {
        LacdConfig {
            beta: self.fcos.beta,
            warm_epochs: self.fcos.warm_epochs,
            final_epochs: self.fcos.final_epochs,
            probe: ProbeConfig {
                lr: self.train.lr,
                batch: self.train.batch,
                epochs: self.fcos.probe_epochs,
                reduction: self.fcos.probe_reduction,
            },
        }
    }

    /// The resolved snapshot: every default expanded, model knobs included.
    pub fn resolved(&self, classes: usize, length: usize) -> ExperimentConfig {
        let mut r = self.clone();
        let a = self.arch(classes, length);
        r.model = ModelSection {
            arch: a.name,
            widths: Some(a.widths),
            kernel: Some(a.kernel),
            blocks_per_stage: Some(a.blocks_per_stage),
            batchnorm: Some(a.batchnorm),
            seed: Some(a.seed),
        };
        r
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}
