use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ssat_core::attack::{AttackSpec, AttackTrainConfig, MaskSource, PretrainConfig};
use ssat_core::eval::Palette;
use ssat_core::nets::ModelConfig;
use ssat_core::scenes::{SceneConfig, PERSON, RIDER};

use crate::CliError;

/// Evaluation and rendering options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Perturbation bound used at evaluation; defaults to the training xi.
    #[serde(default)]
    pub xi: Option<f32>,
    /// Test-split positions to render as five-panel samples.
    #[serde(default)]
    pub sample_indices: Vec<usize>,
    /// Gain applied to the perturbation panel.
    #[serde(default = "default_gain")]
    pub perturbation_gain: f32,
    #[serde(default)]
    pub palette: Palette,
}

fn default_gain() -> f32 {
    10.0
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            xi: None,
            sample_indices: vec![0],
            perturbation_gain: default_gain(),
            palette: Palette::default(),
        }
    }
}

/// Everything a full recipe needs. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene_config: SceneConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub target_model: ModelConfig,
    pub generator_model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub attack_spec: AttackSpec,
    pub train_config: AttackTrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
    /// When set, replaces every seed in the nested configs.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// The desk benchmark: 64x64 style A scenes, 1000/200 split, seed 42,
    /// vanishing persons and riders with lambda0 = 1e-2, xi = 10, lr = 1e-4.
    pub fn desk_benchmark() -> Self {
        let classes = ssat_core::scenes::SCENE_CLASSES;
        Self {
            scene_config: SceneConfig::default(),
            n_train: 1000,
            n_test: 200,
            target_model: ModelConfig::target(classes, 0),
            generator_model: ModelConfig::generator(classes, 0),
            pretrain: PretrainConfig {
                epochs: 4,
                ..PretrainConfig::default()
            },
            attack_spec: AttackSpec::vanish([PERSON, RIDER]),
            train_config: AttackTrainConfig {
                epochs: 12,
                ..AttackTrainConfig::default()
            },
            eval: EvalOptions::default(),
            output_dir: PathBuf::from("out"),
            seed: Some(42),
        }
        .resolved()
    }

    /// Phantom used by the desk benchmark's embed attack: a pedestrian-sized
    /// box standing in the bottom-left corner of the road. The generator
    /// only localizes reliably near the image border at 64x64.
    pub fn desk_embed_mask() -> MaskSource {
        MaskSource::Rect {
            x0: 0.0,
            y0: 0.74,
            x1: 0.1,
            y1: 1.0,
        }
    }

    /// Applies the top-level seed to every nested config.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.scene_config.seed = seed;
            self.target_model.seed = seed;
            self.generator_model.seed = seed.wrapping_add(1);
            self.pretrain.seed = seed;
            self.train_config.seed = seed;
        }
        self
    }

    pub fn eval_xi(&self) -> f32 {
        self.eval.xi.unwrap_or(self.train_config.xi)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene_config.validate().map_err(CliError::from_core)?;
        self.target_model.validate().map_err(CliError::from_core)?;
        self.generator_model.validate().map_err(CliError::from_core)?;
        self.train_config.validate().map_err(CliError::from_core)?;
        self.attack_spec
            .validate(self.target_model.num_classes)
            .map_err(CliError::from_core)?;
        let c = self.scene_config.num_classes;
        if self.target_model.num_classes != c || self.generator_model.num_classes != c {
            return Err(CliError::Config(format!(
                "class counts disagree: scenes {c}, target {}, generator {}",
                self.target_model.num_classes, self.generator_model.num_classes
            )));
        }
        Ok(())
    }
}

/// Optional training recipe inside a grid: one generator is trained per
/// (width, xi) pair against the first target on the first dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTrain {
    pub generator_model: ModelConfig,
    pub train_config: AttackTrainConfig,
    #[serde(default = "default_widths")]
    pub widths: Vec<f32>,
}

fn default_widths() -> Vec<f32> {
    vec![1.0]
}

/// Experiment grid: checkpoint paths, dataset directories, xi values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub generators: Vec<PathBuf>,
    pub targets: Vec<PathBuf>,
    pub datasets: Vec<PathBuf>,
    pub xis: Vec<f32>,
    pub attack_spec: AttackSpec,
    pub seed: u64,
    #[serde(default)]
    pub train: Option<GridTrain>,
    #[serde(default)]
    pub experiment_id: Option<String>,
}

/// Reads and strictly parses a JSON file. Parse failures are config
/// errors that carry the line and column.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
