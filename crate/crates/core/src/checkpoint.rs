//! Model checkpoints.
//!
//! Layout: the magic `SSSDS4CK`, a `u32` version, a length-prefixed JSON
//! record with the configuration, then every parameter tensor as
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims and little-endian
//! `f64` values. Loading reproduces the parameters bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::data::Scaler;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SssdModel};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSSDS4CK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    /// Standardization fitted on the training split, in original channel order.
    pub scaler: Option<Scaler>,
    /// Channel group width when the data was split along channels.
    pub channel_split_width: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &SssdModel, diffusion: DiffusionConfig, scaler: Option<Scaler>, width: Option<usize>) -> Self {
        let store = model.store();
        Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                diffusion,
                scaler,
                channel_split_width: width,
            },
            params: store.names().iter().cloned().zip(store.tensors().iter().cloned()).collect(),
        }
    }

    /// Rebuilds the network and loads the stored parameters.
    pub fn to_model(&self) -> Result<SssdModel> {
        // initial values are overwritten below
        let mut model = SssdModel::new(self.meta.model.clone(), &mut SeededRng::new(0))?;
        model.store_mut().load(self.params.clone())?;
        Ok(model)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        binio::write_magic(w, MAGIC, VERSION)?;
        binio::write_bytes(w, &serde_json::to_vec(&self.meta)?)?;
        binio::write_u32(w, self.params.len() as u32)?;
        for (name, t) in &self.params {
            binio::write_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            binio::write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        binio::read_magic(r, MAGIC, VERSION)?;
        let meta: CheckpointMeta = serde_json::from_slice(&binio::read_bytes(r, 1 << 20)?)?;
        let count = binio::read_u32(r)? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = binio::read_u32(r)? as usize;
            if n > 4096 {
                return Err(Error::Format(format!("parameter name of {n} bytes")));
            }
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            params.push((name, binio::read_tensor(r)?));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
