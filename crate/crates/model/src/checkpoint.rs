//! Binary checkpoints: a JSON header followed by little-endian tensors.
//!
//! Layout: magic `TKCK`, `u32` format version, `u8` dtype tag (8 = f64),
//! `u64` header length, header JSON, then every tensor of every stored group
//! in header order.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::error::{ModelError, Result};
use crate::net::{Layout, NetConfig, Params};

const MAGIC: &[u8; 4] = b"TKCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 8;

/// Position in a training run, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_loss: Option<f64>,
    /// Training configuration the run was started with, as JSON.
    pub train_config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Params,
    pub v: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub params: Params,
    pub ema: Params,
    pub adam: Option<AdamMoments>,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    schedule: ScheduleConfig,
    state: TrainState,
    groups: Vec<String>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    fn groups(&self) -> Vec<(&'static str, &Params)> {
        let mut g = vec![("params", &self.params), ("ema", &self.ema)];
        if let Some(a) = &self.adam {
            g.push(("adam.m", &a.m));
            g.push(("adam.v", &a.v));
        }
        g
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_same(&self.ema)?;
        let header = Header {
            net: self.net.clone(),
            schedule: self.schedule.clone(),
            state: self.state.clone(),
            groups: self.groups().iter().map(|(n, _)| n.to_string()).collect(),
            tensors: self
                .params
                .layout
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.shape.clone()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::config(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 32 + 8 * self.params.len() * self.groups().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.groups() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |m: String| ModelError::Checkpoint { path: path.to_path_buf(), message: m };
        if bytes.len() < 17 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        if bytes[8] != DTYPE_F64 {
            return Err(bad(format!("unsupported dtype tag {}", bytes[8])));
        }
        let hlen = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let body = bytes.get(17..17 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        header.net.validate()?;
        let layout = Arc::new(Layout::new(&header.net));
        let expected: Vec<(String, Vec<usize>)> =
            layout.entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        if expected != header.tensors {
            return Err(bad("tensor table does not match the network configuration".into()));
        }
        let known = ["params", "ema", "adam.m", "adam.v"];
        let groups = &header.groups;
        let valid_groups = groups.len() >= 2
            && groups.len() <= 4
            && groups.iter().zip(known.iter()).all(|(g, k)| g == k)
            && groups.len() != 3;
        if !valid_groups {
            return Err(bad(format!("unexpected tensor groups {groups:?}")));
        }
        let payload = &bytes[17 + hlen..];
        let per_group = layout.total * 8;
        if payload.len() != per_group * groups.len() {
            return Err(bad(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                per_group * groups.len()
            )));
        }
        let read_group = |k: usize| -> Params {
            let chunk = &payload[k * per_group..(k + 1) * per_group];
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Params { layout: layout.clone(), data }
        };
        let params = read_group(0);
        let ema = read_group(1);
        let adam = (groups.len() == 4).then(|| AdamMoments { m: read_group(2), v: read_group(3) });
        if !params.all_finite() || !ema.all_finite() {
            return Err(bad("non-finite weights".into()));
        }
        Ok(Checkpoint {
            net: header.net,
            schedule: header.schedule,
            params,
            ema,
            adam,
            state: header.state,
        })
    }

    /// Writes through a temporary file and renames, so a crash never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| ModelError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| ModelError::io(&tmp, e))?;
        f.sync_all().map_err(|e| ModelError::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
