//! Checkpoint container: an 8-byte magic, a JSON header, then raw
//! little-endian f64 payloads. A `.meta` sidecar carries the human-readable
//! summary (architecture, K, D, seed).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, Classifier, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PATCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: Params,
    pub buffers: Vec<Vec<f64>>,
    pub velocity: Option<Params>,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    epoch: usize,
    seed: u64,
    param_lens: Vec<usize>,
    buffer_lens: Vec<usize>,
    has_velocity: bool,
}

impl Checkpoint {
    pub fn from_model(model: &Classifier, velocity: Option<&Params>, epoch: usize, seed: u64) -> Self {
        Self {
            arch: model.architecture().clone(),
            params: model.params().clone(),
            buffers: model.buffers().to_vec(),
            velocity: velocity.cloned(),
            epoch,
            seed,
        }
    }

    pub fn into_model(self) -> Result<Classifier> {
        let mut model = Classifier::new(self.arch, self.seed)?;
        model.set_state(self.params, self.buffers)?;
        Ok(model)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        arch: ckpt.arch.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        param_lens: ckpt.params.arrays().iter().map(Vec::len).collect(),
        buffer_lens: ckpt.buffers.iter().map(Vec::len).collect(),
        has_velocity: ckpt.velocity.is_some(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let arrays = ckpt
        .params
        .arrays()
        .iter()
        .chain(&ckpt.buffers)
        .chain(ckpt.velocity.iter().flat_map(|v| v.arrays()));
    for arr in arrays {
        for v in arr {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;

    let meta = format!(
        "architecture={}\nnum_classes={}\nfeature_dim={}\nseed={}\nepoch={}\n",
        ckpt.arch.preset.name(),
        ckpt.arch.num_classes,
        ckpt.arch.feature_dim(),
        ckpt.seed,
        ckpt.epoch
    );
    fs::write(sidecar(path), meta)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut f = std::io::BufReader::new(fs::File::open(path).map_err(|e| bad(&e.to_string()))?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(&e.to_string()))?;

    let mut read_arrays = |lens: &[usize]| -> Result<Vec<Vec<f64>>> {
        lens.iter()
            .map(|&n| {
                let mut buf = vec![0u8; n * 8];
                f.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
                Ok(buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            })
            .collect()
    };
    let params = Params::from_arrays(read_arrays(&header.param_lens)?);
    let buffers = read_arrays(&header.buffer_lens)?;
    let velocity = if header.has_velocity {
        Some(Params::from_arrays(read_arrays(&header.param_lens)?))
    } else {
        None
    };
    Ok(Checkpoint {
        arch: header.arch,
        params,
        buffers,
        velocity,
        epoch: header.epoch,
        seed: header.seed,
    })
}
