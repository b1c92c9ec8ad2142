//! Model checkpoints in the safetensors format.
//!
//! Parameters are stored as `f32` tensors under their dotted names; the
//! optimizer moments, when present, under `optim.m.<name>` and
//! `optim.v.<name>`. A single metadata entry holds a JSON document with the
//! schema version, model config and training state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::{Adam, CurriculumState, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
const META_KEY: &str = "seqseg";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub curriculum: CurriculumState,
    pub adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    model: ModelConfig,
    #[serde(default)]
    train_state: Option<TrainState>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
}

/// Adam first and second moments, in parameter order.
pub type Moments = (Vec<Tensor<f32>>, Vec<Tensor<f32>>);

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_state: Option<TrainState>,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<Moments>,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn ck_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    train: Option<(&TrainState, &Adam)>,
    train_config: Option<&TrainConfig>,
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape().to_vec(), to_bytes(t)))
        .collect();
    if let Some((_, adam)) = train {
        for (id, (name, _)) in model.params.iter().enumerate() {
            for (prefix, moments) in [("optim.m", &adam.m), ("optim.v", &adam.v)] {
                let t = &moments[id];
                entries.push((format!("{prefix}.{name}"), t.shape().to_vec(), to_bytes(t)));
            }
        }
    }
    let meta = Meta {
        schema_version: SCHEMA_VERSION,
        model: model.config.clone(),
        train_state: train.map(|(s, _)| *s),
        train_config: train_config.cloned(),
    };
    let meta_json = serde_json::to_string(&meta).map_err(|e| ck_err(path, e))?;
    let views = entries
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| ck_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = Some(HashMap::from([(META_KEY.to_string(), meta_json)]));
    let buf = safetensors::tensor::serialize(views, &info).map_err(|e| ck_err(path, e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(st: &SafeTensors, path: &Path, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let view = st.tensor(name).map_err(|e| ck_err(path, format!("{name}: {e}")))?;
    if view.dtype() != Dtype::F32 || view.shape() != shape {
        return Err(ck_err(
            path,
            format!("{name}: expected f32 {shape:?}, found {:?} {:?}", view.dtype(), view.shape()),
        ));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ck_err(path, e))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ck_err(path, "missing metadata"))?;
    let meta: Meta = serde_json::from_str(meta_json).map_err(|e| ck_err(path, e))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(ck_err(
            path,
            format!("schema version {} is not {SCHEMA_VERSION}", meta.schema_version),
        ));
    }
    let st = SafeTensors::deserialize(&buf).map_err(|e| ck_err(path, e))?;
    // the expected names and shapes come from a freshly built model
    let template = Model::<f32>::new(meta.model.clone(), 0)?;
    let mut params = ParamSet::new();
    for (name, t) in template.params.iter() {
        params.add(name, read_tensor(&st, path, name, t.shape())?);
    }
    let has_optim = st.names().iter().any(|n| n.starts_with("optim."));
    let optimizer = if has_optim {
        let read_all = |prefix: &str| {
            template
                .params
                .iter()
                .map(|(name, t)| read_tensor(&st, path, &format!("{prefix}.{name}"), t.shape()))
                .collect::<Result<Vec<_>>>()
        };
        Some((read_all("optim.m")?, read_all("optim.v")?))
    } else {
        None
    };
    Ok(Checkpoint {
        model: Model::from_params(meta.model, params)?,
        train_state: meta.train_state,
        train_config: meta.train_config,
        optimizer,
    })
}
