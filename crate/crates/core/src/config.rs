//! Run configuration, read from TOML. Every stage checks the configuration
//! digest recorded by the stages before it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::corpus::synth::SynthesisSpec;
use crate::error::{ensure, Error, Result};
use crate::ladder::LadderConfig;
use crate::nn_util::config_digest;
use crate::preprocess::AugmentConfig;
use crate::proxy_classifier::{ClassifierConfig, HeadMode, TrainConfigStage1};
use crate::segmenter::{PlanId, SegmenterConfig, TrainConfigStage3};
use crate::splitter::SplitSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// External manifest; when absent the corpus is synthesized.
    pub manifest: Option<PathBuf>,
    pub synth: SynthesisSpec,
    pub seed: u64,
    /// Directory of photographs; when absent a procedural pool is generated.
    pub photo_pool: Option<PathBuf>,
    pub pool_size: usize,
    pub pool_image_size: u32,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { manifest: None, synth: SynthesisSpec::default(), seed: 7, photo_pool: None, pool_size: 64, pool_image_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SplitSection {
    pub seed: u64,
    pub spec: SplitSpec,
}

/// Model identifiers and the few settings that differ between the miniature
/// and the full-size variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `mini-vit` or `dinov2-vitb14`.
    pub backbone: String,
    pub backbone_weights: Option<PathBuf>,
    pub freeze_backbone: bool,
    pub head: HeadMode,
    pub classifier_input_size: u32,
    /// `mini-mit` or `mit-b0`.
    pub segmenter: String,
    pub segmenter_weights: Option<PathBuf>,
    pub segmenter_input_size: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: "mini-vit".into(),
            backbone_weights: None,
            freeze_backbone: false,
            head: HeadMode::Centroid,
            classifier_input_size: 112,
            segmenter: "mini-mit".into(),
            segmenter_weights: None,
            segmenter_input_size: 64,
        }
    }
}

impl ModelSection {
    /// Full-size models at their native input sizes.
    pub fn full_size(backbone_weights: Option<PathBuf>, segmenter_weights: Option<PathBuf>) -> Self {
        Self {
            backbone: "dinov2-vitb14".into(),
            backbone_weights,
            freeze_backbone: false,
            head: HeadMode::Centroid,
            classifier_input_size: crate::preprocess::CLASSIFIER_INPUT,
            segmenter: "mit-b0".into(),
            segmenter_weights,
            segmenter_input_size: crate::preprocess::SEGMENTER_INPUT,
        }
    }

    pub fn classifier(&self) -> Result<ClassifierConfig> {
        let backbone = BackboneConfig { freeze: self.freeze_backbone, ..BackboneConfig::from_id(&self.backbone, self.backbone_weights.clone())? };
        Ok(ClassifierConfig { backbone, mode: self.head, input_size: self.classifier_input_size, ..ClassifierConfig::default() })
    }

    pub fn segmenter(&self) -> Result<SegmenterConfig> {
        let base = SegmenterConfig::from_id(&self.segmenter, self.segmenter_weights.clone())?;
        Ok(SegmenterConfig { input_size: self.segmenter_input_size, ..base })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderSection {
    pub seeds: Vec<u64>,
    pub dataset_seed: u64,
    pub plans: Vec<PlanId>,
}

impl Default for LadderSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1], dataset_seed: 0, plans: PlanId::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Parent of the run directory.
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub models: ModelSection,
    pub stage1: TrainConfigStage1,
    pub stage3: TrainConfigStage3,
    pub ladder: LadderSection,
}

impl Default for RunConfig {
    /// The miniature setup that runs on a CPU in minutes per stage.
    fn default() -> Self {
        Self {
            name: "default".into(),
            output_dir: PathBuf::from("runs"),
            corpus: CorpusSection::default(),
            split: SplitSection::default(),
            models: ModelSection::default(),
            stage1: miniature_stage1(),
            stage3: miniature_stage3(),
            ladder: LadderSection::default(),
        }
    }
}

/// Stage-1 settings for the miniature backbone trained from scratch.
pub fn miniature_stage1() -> TrainConfigStage1 {
    // Pixel noise hides the flat fills that separate NP frames at this size;
    // aggressive crops make the patch tokens carry local evidence.
    let augment = AugmentConfig { gaussian_noise_sigma: 0.0, crop_scale_min: 0.25, ..AugmentConfig::default() };
    TrainConfigStage1 { batch_size: 16, learning_rate: 5e-4, max_epochs: 30, patience: 8, augment, ..TrainConfigStage1::default() }
}

/// Stage-3 settings for the miniature segmenter trained from scratch.
pub fn miniature_stage3() -> TrainConfigStage3 {
    TrainConfigStage3 {
        learning_rate: 2e-4,
        max_epochs: 25,
        patience: 8,
        heterogeneous_repeat: 4,
        augment: AugmentConfig::default(),
        ..TrainConfigStage3::default()
    }
}

impl RunConfig {
    /// Full-size models with the published optimizer settings.
    pub fn full_size(backbone_weights: Option<PathBuf>, segmenter_weights: Option<PathBuf>) -> Self {
        Self {
            name: "full".into(),
            models: ModelSection::full_size(backbone_weights, segmenter_weights),
            stage1: TrainConfigStage1::default(),
            stage3: TrainConfigStage3::default(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("configuration: {e}")))
    }

    /// Schema checks that need no file system access beyond weight files.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.name.is_empty() && self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
            "run name {:?} must be non-empty and use only letters, digits, '-' and '_'",
            self.name
        );
        if self.corpus.manifest.is_none() {
            self.corpus.synth.validate()?;
            ensure!(self.corpus.pool_size > 0 && self.corpus.pool_image_size >= 8, "photo pool settings are invalid");
        }
        self.split.spec.validate()?;
        self.ladder_config()?.validate()
    }

    pub fn ladder_config(&self) -> Result<LadderConfig> {
        Ok(LadderConfig {
            classifier: self.models.classifier()?,
            stage1: self.stage1.clone(),
            segmenter: self.models.segmenter()?,
            stage3: self.stage3.clone(),
            seeds: self.ladder.seeds.clone(),
            dataset_seed: self.ladder.dataset_seed,
            plans: self.ladder.plans.clone(),
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn digest(&self) -> Result<String> {
        config_digest(self)
    }
}
