//! Versioned JSON checkpoints: architecture, provenance metadata, and every
//! named parameter array. Loading rebuilds the model and fails loudly on
//! missing, extra, or misshapen parameters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::deepjscc::{JsccArch, JsccModel, JsccTrainConfig, NONLINEARITY, NORMALIZATION, WEIGHT_INIT};
use crate::diffusion::{
    make_linear_schedule, DdpmTrainConfig, DiffusionModel, NoiseSchedule, UNetArch,
};
use crate::linops::{make_operator, OperatorKind};
use nullcast_nn::Params;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Implementation choices that the architecture struct alone does not pin
/// down, recorded so a checkpoint is reproducible from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub nonlinearity: String,
    pub normalization: String,
    pub weight_init: String,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: String,
    pub factor: usize,
    pub in_shape: (usize, usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsccCheckpoint {
    pub version: u32,
    pub kind: String,
    pub arch: JsccArch,
    pub operator: OperatorSpec,
    pub train_snr_range: (f64, f64),
    pub p_avg: f64,
    pub meta: CheckpointMeta,
    pub train_config: Option<JsccTrainConfig>,
    pub params: BTreeMap<String, ParamBlob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DdpmCheckpoint {
    pub version: u32,
    pub kind: String,
    pub arch: UNetArch,
    pub image_shape: (usize, usize, usize),
    pub schedule: ScheduleSpec,
    pub meta: CheckpointMeta,
    pub train_config: Option<DdpmTrainConfig>,
    pub params: BTreeMap<String, ParamBlob>,
}

fn collect_params(net: &mut dyn Params) -> BTreeMap<String, ParamBlob> {
    let mut out = BTreeMap::new();
    net.visit_params(&mut |name, v, _| {
        out.insert(
            name.to_string(),
            ParamBlob {
                shape: v.shape().to_vec(),
                data: v.iter().cloned().collect(),
            },
        );
    });
    out
}

fn restore_params(
    net: &mut dyn Params,
    params: &BTreeMap<String, ParamBlob>,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut seen = Vec::new();
    let mut problems = Vec::new();
    net.visit_params(&mut |name, mut v, _| {
        seen.push(name.to_string());
        match params.get(name) {
            None => problems.push(format!("missing parameter {name}")),
            Some(blob) => {
                if blob.shape != v.shape() {
                    problems.push(format!(
                        "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                        blob.shape,
                        v.shape()
                    ));
                } else {
                    for (dst, src) in v.iter_mut().zip(&blob.data) {
                        *dst = *src;
                    }
                }
            }
        }
    });
    for name in params.keys() {
        if !seen.contains(name) {
            problems.push(format!("unknown parameter {name}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::BadCheckpoint {
            path: path.to_path_buf(),
            message: problems.join("; "),
        })
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    let text = serde_json::to_string(value).map_err(|e| HarnessError::BadCheckpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::BadCheckpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_jscc(
    model: &JsccModel,
    init_seed: u64,
    train_config: Option<&JsccTrainConfig>,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut scratch = model.clone();
    let op = model.operator();
    let ckpt = JsccCheckpoint {
        version: CHECKPOINT_VERSION,
        kind: "jscc".into(),
        arch: model.arch().clone(),
        operator: OperatorSpec {
            kind: op.kind().to_string(),
            factor: op.factor(),
            in_shape: op.in_shape(),
        },
        train_snr_range: model.train_snr_range(),
        p_avg: model.p_avg(),
        meta: CheckpointMeta {
            nonlinearity: NONLINEARITY.into(),
            normalization: NORMALIZATION.into(),
            weight_init: WEIGHT_INIT.into(),
            init_seed,
        },
        train_config: train_config.cloned(),
        params: collect_params(&mut scratch),
    };
    write_json(&ckpt, path)
}

pub fn load_jscc(path: &Path) -> Result<JsccModel, HarnessError> {
    let ckpt: JsccCheckpoint = read_json(path)?;
    if ckpt.kind != "jscc" {
        return Err(HarnessError::BadCheckpoint {
            path: path.to_path_buf(),
            message: format!("expected kind jscc, found {}", ckpt.kind),
        });
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(HarnessError::BadCheckpoint {
            path: path.to_path_buf(),
            message: format!("unsupported version {}", ckpt.version),
        });
    }
    let kind = OperatorKind::parse(&ckpt.operator.kind).ok_or_else(|| {
        HarnessError::BadCheckpoint {
            path: path.to_path_buf(),
            message: format!("unknown operator kind {}", ckpt.operator.kind),
        }
    })?;
    let op = make_operator(kind, ckpt.operator.in_shape, ckpt.operator.factor)?;
    let mut model = JsccModel::new(
        ckpt.arch,
        op,
        ckpt.train_snr_range,
        ckpt.p_avg,
        ckpt.meta.init_seed,
    )?;
    restore_params(&mut model, &ckpt.params, path)?;
    Ok(model)
}

pub fn save_ddpm(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    beta_range: (f64, f64),
    init_seed: u64,
    train_config: Option<&DdpmTrainConfig>,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut net = model.net.clone();
    let ckpt = DdpmCheckpoint {
        version: CHECKPOINT_VERSION,
        kind: "ddpm".into(),
        arch: model.arch().clone(),
        image_shape: model.image_shape,
        schedule: ScheduleSpec {
            t: schedule.t_max(),
            beta_start: beta_range.0,
            beta_end: beta_range.1,
            sampling_steps: schedule.sampling_steps().len(),
        },
        meta: CheckpointMeta {
            nonlinearity: "silu".into(),
            normalization: "group_norm".into(),
            weight_init: "he_normal, zero output head".into(),
            init_seed,
        },
        train_config: train_config.cloned(),
        params: collect_params(&mut net),
    };
    write_json(&ckpt, path)
}

pub fn load_ddpm(path: &Path) -> Result<(DiffusionModel, NoiseSchedule), HarnessError> {
    let ckpt: DdpmCheckpoint = read_json(path)?;
    if ckpt.kind != "ddpm" {
        return Err(HarnessError::BadCheckpoint {
            path: path.to_path_buf(),
            message: format!("expected kind ddpm, found {}", ckpt.kind),
        });
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(HarnessError::BadCheckpoint {
            path: path.to_path_buf(),
            message: format!("unsupported version {}", ckpt.version),
        });
    }
    let mut model = DiffusionModel::new(ckpt.arch, ckpt.image_shape, ckpt.meta.init_seed)?;
    restore_params(&mut model.net, &ckpt.params, path)?;
    let schedule = make_linear_schedule(ckpt.schedule.t, ckpt.schedule.beta_start, ckpt.schedule.beta_end)?
        .with_sampling_steps(ckpt.schedule.sampling_steps)?;
    Ok((model, schedule))
}
