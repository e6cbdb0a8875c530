//! ZOMD model files: magic, version, a length-prefixed JSON header describing
//! the architecture, then the flat f32 parameter vector in `get_params` order.

use super::conv::{ConvArch, ConvNetModel};
use super::mlp::MlpModel;
use super::{ClassStats, LossMode, Network};
use crate::binio;
use crate::descriptors::BlockLayout;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const ZOMD_MAGIC: &[u8; 4] = b"ZOMD";
pub const ZOMD_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind")]
pub enum ArchSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
    },
    Conv(ConvArch),
}

/// Everything needed to rebuild a model and interpret its inputs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelHeader {
    pub arch: ArchSpec,
    pub loss_mode: LossMode,
    pub class_stats: ClassStats,
    /// layout of the feature rows this model consumes, when applicable
    pub block_layout: Option<BlockLayout>,
}

#[derive(Debug, Clone)]
pub enum NetModel {
    Mlp(MlpModel),
    Conv(ConvNetModel),
}

impl NetModel {
    pub fn num_classes(&self) -> usize {
        match self {
            NetModel::Mlp(m) => m.num_classes,
            NetModel::Conv(m) => m.arch.num_classes,
        }
    }

    fn params_f32(&self) -> Vec<f32> {
        let p = match self {
            NetModel::Mlp(m) => m.get_params(),
            NetModel::Conv(m) => m.get_params(),
        };
        p.into_iter().map(|v| v as f32).collect()
    }

    /// Header architecture describing this model.
    pub fn arch_spec(&self) -> ArchSpec {
        match self {
            NetModel::Mlp(m) => ArchSpec::Mlp {
                input_dim: m.input_dim(),
                hidden: m.hidden_sizes(),
                num_classes: m.num_classes,
            },
            NetModel::Conv(m) => ArchSpec::Conv(m.arch.clone()),
        }
    }
}

pub fn write_model<W: Write>(
    w: &mut W,
    model: &NetModel,
    header: &ModelHeader,
) -> Result<()> {
    let json = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
    let io = |e: std::io::Error| Error::Format(format!("model write: {e}"));
    binio::write_magic(w, ZOMD_MAGIC).map_err(io)?;
    binio::write_u32(w, ZOMD_VERSION).map_err(io)?;
    binio::write_u32(w, json.len() as u32).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let params = model.params_f32();
    binio::write_u32(w, params.len() as u32).map_err(io)?;
    binio::write_f32_slice(w, &params).map_err(io)
}

pub fn read_model<R: Read>(r: &mut R) -> Result<(NetModel, ModelHeader)> {
    binio::read_magic(r, ZOMD_MAGIC)?;
    let version = binio::read_u32(r)?;
    if version != ZOMD_VERSION {
        return Err(Error::Format(format!("unsupported ZOMD version {version}")));
    }
    let hlen = binio::read_u32(r)? as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)
        .map_err(|e| Error::Format(format!("model header: {e}")))?;
    let header: ModelHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("model header JSON: {e}")))?;
    let n_params = binio::read_u32(r)? as usize;
    let params32 = binio::read_f32_vec(r, n_params)?;
    if params32.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite parameter in model file".into()));
    }
    let params: Vec<f64> = params32.iter().map(|&v| v as f64).collect();
    let model = match &header.arch {
        ArchSpec::Mlp {
            input_dim,
            hidden,
            num_classes,
        } => {
            let mut m = MlpModel::new(*input_dim, hidden, *num_classes, 0);
            if m.num_params() != n_params {
                return Err(Error::Format(format!(
                    "MLP header expects {} params, file has {n_params}",
                    m.num_params()
                )));
            }
            m.set_params(&params);
            NetModel::Mlp(m)
        }
        ArchSpec::Conv(arch) => {
            let mut m = ConvNetModel::new(arch.clone(), 0)?;
            if m.num_params() != n_params {
                return Err(Error::Format(format!(
                    "convnet header expects {} params, file has {n_params}",
                    m.num_params()
                )));
            }
            m.set_params(&params);
            NetModel::Conv(m)
        }
    };
    Ok((model, header))
}

pub fn save_model(model: &NetModel, header: &ModelHeader, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(&mut BufWriter::new(file), model, header)
}

pub fn load_model(path: &Path) -> Result<(NetModel, ModelHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut BufReader::new(file))
}
