//! Run configuration: TOML file with flag overrides, precedence
//! flags > file > defaults. Unknown keys are rejected. Every artifact
//! records the sha-256 hash of the resolved configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use handmotion_core::blender::{BlenderConfig, BlendWeights};
use handmotion_core::denoisers::DenoiserConfig;
use handmotion_core::diffusion::ScheduleKind;
use handmotion_core::metrics::EmbedderConfig;

pub const DATA_ROOT_ENV: &str = "HANDMOTION_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let root = std::env::var(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("data"));
        Paths {
            dataset: root.join("dataset"),
            checkpoints: root.join("checkpoints"),
            reports: root.join("reports"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            steps: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cond_dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-2,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub iterations: usize,
    pub guidance: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            iterations: 3,
            guidance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub replicates: usize,
    pub pool_size: usize,
    pub diversity_pairs: usize,
    pub mmodality_conditions: usize,
    pub mmodality_repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            replicates: 20,
            pool_size: 32,
            diversity_pairs: 100,
            mmodality_conditions: 4,
            mmodality_repeats: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub clips: usize,
    pub fps: f64,
    pub seconds: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            clips: 64,
            fps: 20.0,
            seconds: 5.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub no_hand_projection: bool,
    pub finger_loss: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlenderPairSource {
    Sampled,
    GroundTruth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub blender: BlenderConfig,
    pub embedder: EmbedderConfig,
    pub weights: BlendWeights,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub data: DataSection,
    pub ablation: AblationSection,
    pub blender_pairs: BlenderPairSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            blender: BlenderConfig::default(),
            embedder: EmbedderConfig::default(),
            weights: BlendWeights::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            data: DataSection::default(),
            ablation: AblationSection::default(),
            blender_pairs: BlenderPairSource::Sampled,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
                toml::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", p.display()))
            }
        }
    }

    /// sha-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialize");
        let digest = Sha256::digest(&json);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}
