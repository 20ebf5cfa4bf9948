//! Versioned model container: magic "EMQM", format version, JSON header,
//! then little-endian f64 parameter blocks in declared order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineLoss, DirectQuantileModel};
use crate::data::NormStats;
use crate::error::{EmqError, Result};
use crate::model::emq::{EmqModel, EmqVariant, EnsembleStepConfig};
use crate::nn::{Activation, Mlp};
use crate::quant::QuantileGrid;

pub const MODEL_MAGIC: &[u8; 4] = b"EMQM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    softplus_mask: Vec<bool>,
    seed: u64,
}

impl NetSpec {
    fn of(mlp: &Mlp) -> NetSpec {
        NetSpec {
            layer_sizes: mlp.layer_sizes().to_vec(),
            activation: mlp.hidden_activation(),
            softplus_mask: mlp.softplus_mask().to_vec(),
            seed: mlp.seed(),
        }
    }

    fn build(&self, params: &[f64]) -> Result<Mlp> {
        let mut mlp = Mlp::init(
            &self.layer_sizes,
            self.activation,
            self.softplus_mask.clone(),
            self.seed,
        )?;
        mlp.set_flat_params(params)
            .map_err(|_| EmqError::CorruptModel("parameter block size mismatch".into()))?;
        Ok(mlp)
    }

    fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
enum ModelHeader {
    #[serde(rename = "EMQM")]
    Emq {
        grid: Vec<f64>,
        variant: EmqVariant,
        step_config: EnsembleStepConfig,
        t_ada: usize,
        norm: NormStats,
        f0: NetSpec,
        weak_learners: Vec<NetSpec>,
    },
    #[serde(rename = "DQM1")]
    Direct {
        grid: Vec<f64>,
        loss_tag: BaselineLoss,
        norm: NormStats,
        net: NetSpec,
    },
}

/// Either model kind, as stored in one container format.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Emq(EmqModel),
    Direct(DirectQuantileModel),
}

impl LoadedModel {
    pub fn grid(&self) -> &QuantileGrid {
        match self {
            LoadedModel::Emq(m) => &m.grid,
            LoadedModel::Direct(m) => &m.grid,
        }
    }

    pub fn norm(&self) -> &NormStats {
        match self {
            LoadedModel::Emq(m) => &m.norm,
            LoadedModel::Direct(m) => &m.norm,
        }
    }
}

fn write_container(path: &Path, header: &ModelHeader, params: &[f64]) -> Result<()> {
    let header_json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + params.len() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for &v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(ModelHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
        return Err(EmqError::CorruptModel("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(EmqError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(EmqError::CorruptModel("truncated header".into()));
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| EmqError::CorruptModel(format!("header parse failure: {e}")))?;
    let body = &bytes[16 + header_len..];
    if body.len() % 8 != 0 {
        return Err(EmqError::CorruptModel("ragged parameter block".into()));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, params))
}

pub fn save_emq_model(model: &EmqModel, path: &Path) -> Result<()> {
    let header = ModelHeader::Emq {
        grid: model.grid.levels().to_vec(),
        variant: model.variant,
        step_config: model.step_config.clone(),
        t_ada: model.t_ada(),
        norm: model.norm.clone(),
        f0: NetSpec::of(&model.f0),
        weak_learners: model.weak_learners.iter().map(NetSpec::of).collect(),
    };
    let mut params = model.f0.flat_params();
    for w in &model.weak_learners {
        params.extend(w.flat_params());
    }
    write_container(path, &header, &params)
}

pub fn save_direct_model(model: &DirectQuantileModel, path: &Path) -> Result<()> {
    let header = ModelHeader::Direct {
        grid: model.grid.levels().to_vec(),
        loss_tag: model.loss_tag,
        norm: model.norm.clone(),
        net: NetSpec::of(&model.mlp),
    };
    write_container(path, &header, &model.mlp.flat_params())
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (header, params) = read_container(path)?;
    match header {
        ModelHeader::Emq {
            grid,
            variant,
            step_config,
            t_ada,
            norm,
            f0,
            weak_learners,
        } => {
            if weak_learners.len() != t_ada {
                return Err(EmqError::CorruptModel(
                    "t_ada does not match stored weak learner count".into(),
                ));
            }
            let expected: usize =
                f0.param_count() + weak_learners.iter().map(NetSpec::param_count).sum::<usize>();
            if params.len() != expected {
                return Err(EmqError::CorruptModel(format!(
                    "expected {expected} parameters, found {}",
                    params.len()
                )));
            }
            let mut off = 0;
            let f0_n = f0.param_count();
            let f0 = f0.build(&params[off..off + f0_n])?;
            off += f0_n;
            let mut weak = Vec::with_capacity(weak_learners.len());
            for spec in &weak_learners {
                let n = spec.param_count();
                weak.push(spec.build(&params[off..off + n])?);
                off += n;
            }
            Ok(LoadedModel::Emq(EmqModel {
                grid: QuantileGrid::new(grid)?,
                f0,
                weak_learners: weak,
                step_config,
                variant,
                norm,
            }))
        }
        ModelHeader::Direct {
            grid,
            loss_tag,
            norm,
            net,
        } => {
            if params.len() != net.param_count() {
                return Err(EmqError::CorruptModel(format!(
                    "expected {} parameters, found {}",
                    net.param_count(),
                    params.len()
                )));
            }
            Ok(LoadedModel::Direct(DirectQuantileModel {
                mlp: net.build(&params)?,
                grid: QuantileGrid::new(grid)?,
                loss_tag,
                norm,
            }))
        }
    }
}
