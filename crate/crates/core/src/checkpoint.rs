//! Self-describing model checkpoints.
//!
//! Layout: 4-byte magic `HMCK`, little-endian u32 format version,
//! little-endian u32 header length, a JSON header (model kind, config,
//! optional noise-schedule recipe, named channel statistics, parameter
//! names and shapes), then all parameter values as little-endian f64 in
//! header order. Loading refuses mismatched format versions and model
//! kinds.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::blender::{BlenderConfig, BlenderModel};
use crate::denoisers::{DenoiserConfig, DenoiserKind, DenoiserModel};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::metrics::{EmbedderConfig, FeatureEmbedders};
use crate::motion_repr::ChannelStats;
use crate::nn::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BodyDenoiser,
    TextDenoiser,
    Blender,
    Embedders,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::BodyDenoiser => "body_denoiser",
            ModelKind::TextDenoiser => "text_denoiser",
            ModelKind::Blender => "blender",
            ModelKind::Embedders => "embedders",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "body_denoiser" => Ok(ModelKind::BodyDenoiser),
            "text_denoiser" => Ok(ModelKind::TextDenoiser),
            "blender" => Ok(ModelKind::Blender),
            "embedders" => Ok(ModelKind::Embedders),
            other => Err(format!("unknown model kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecipe {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl ScheduleRecipe {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: serde_json::Value,
    schedule: Option<ScheduleRecipe>,
    stats: BTreeMap<String, ChannelStats>,
    params: Vec<ParamInfo>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub schedule: Option<ScheduleRecipe>,
    pub stats: BTreeMap<String, ChannelStats>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn for_denoiser(
        model: &DenoiserModel,
        schedule: ScheduleRecipe,
        stats: BTreeMap<String, ChannelStats>,
    ) -> Checkpoint {
        let kind = match model.kind {
            DenoiserKind::BodyConditioned => ModelKind::BodyDenoiser,
            DenoiserKind::TextConditioned => ModelKind::TextDenoiser,
        };
        Checkpoint {
            kind,
            config: serde_json::to_value(&model.config).expect("config serialize"),
            schedule: Some(schedule),
            stats,
            params: model.params.clone(),
        }
    }

    pub fn for_blender(
        model: &BlenderModel,
        stats: BTreeMap<String, ChannelStats>,
    ) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Blender,
            config: serde_json::to_value(&model.config).expect("config serialize"),
            schedule: None,
            stats,
            params: model.params.clone(),
        }
    }

    pub fn for_embedders(
        model: &FeatureEmbedders,
        stats: BTreeMap<String, ChannelStats>,
    ) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Embedders,
            config: serde_json::to_value(&model.config).expect("config serialize"),
            schedule: None,
            stats,
            params: model.params.clone(),
        }
    }

    fn config_as<T: serde::de::DeserializeOwned>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::ParseError {
            path: path.display().to_string(),
            line: 0,
            msg: format!("bad model config: {e}"),
        })
    }

    pub fn into_denoiser(self, path: &Path) -> Result<DenoiserModel> {
        let kind = match self.kind {
            ModelKind::BodyDenoiser => DenoiserKind::BodyConditioned,
            ModelKind::TextDenoiser => DenoiserKind::TextConditioned,
            other => {
                return Err(Error::WrongModelKind {
                    found: other.to_string(),
                    expected: "body_denoiser or text_denoiser".to_string(),
                })
            }
        };
        let config: DenoiserConfig = self.config_as(path)?;
        Ok(DenoiserModel::from_params(config, kind, self.params))
    }

    pub fn into_blender(self, path: &Path) -> Result<BlenderModel> {
        let config: BlenderConfig = self.config_as(path)?;
        Ok(BlenderModel::from_params(config, self.params))
    }

    pub fn into_embedders(self, path: &Path) -> Result<FeatureEmbedders> {
        let config: EmbedderConfig = self.config_as(path)?;
        Ok(FeatureEmbedders::from_params(config, self.params))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        kind: ckpt.kind,
        config: ckpt.config.clone(),
        schedule: ckpt.schedule,
        stats: ckpt.stats.clone(),
        params: ckpt
            .params
            .names
            .iter()
            .zip(&ckpt.params.values)
            .map(|(name, v)| ParamInfo {
                name: name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialize");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in &ckpt.params.values {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::ParseError {
        path: path.display().to_string(),
        line: 0,
        msg: msg.into(),
    }
}

pub fn load_checkpoint(path: &Path, expected: ModelKind) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(corrupt(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.kind != expected {
        return Err(Error::WrongModelKind {
            found: header.kind.to_string(),
            expected: expected.to_string(),
        });
    }
    let scalar_count: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    let payload = &bytes[payload_start..];
    if payload.len() != scalar_count * 8 {
        return Err(corrupt(
            path,
            format!(
                "payload holds {} bytes, header declares {}",
                payload.len(),
                scalar_count * 8
            ),
        ));
    }
    let mut params = ParamSet::new();
    let mut offset = 0usize;
    for info in &header.params {
        let n = info.rows * info.cols;
        let vals: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n * 8;
        let arr = Array2::from_shape_vec((info.rows, info.cols), vals)
            .map_err(|e| corrupt(path, e.to_string()))?;
        params.names.push(info.name.clone());
        params.values.push(arr);
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        schedule: header.schedule,
        stats: header.stats,
        params,
    })
}
