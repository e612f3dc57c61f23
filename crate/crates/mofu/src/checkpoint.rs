//! Binary tensor container and the checkpoint built on it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MOFU"  u32 version  u64 meta_len  meta (JSON)  u64 n_tensors
//! per tensor: u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
//! ```

use std::path::Path;

use mofu_core::dit::Denoiser;
use mofu_core::harness::TrainState;
use mofu_core::optim::Moments;
use mofu_core::params::ParamStore;
use mofu_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"MOFU";
pub const FORMAT_VERSION: u32 = 1;

/// JSON metadata plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Vec<u8>,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(what: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("corrupt container: {what}"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> CliResult<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| corrupt(format!("{what} overflows")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> CliResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let meta_len = r.len("meta length")?;
        let meta = r.take(meta_len, "meta")?.to_vec();
        let n = r.len("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..n {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            if ndim.saturating_mul(8) > r.remaining() {
                return Err(corrupt(format!("tensor {name} rank {ndim}")));
            }
            let dims = (0..ndim).map(|_| r.len("dim")).collect::<CliResult<Vec<usize>>>()?;
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.filter(|c| c.saturating_mul(8) <= r.remaining());
            let count = count.ok_or_else(|| corrupt(format!("tensor {name} shape {dims:?} exceeds the file")))?;
            let data = r
                .take(count * 8, "data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(corrupt)?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    step: u64,
    base_lr: f64,
    seed: u64,
    config: RunConfig,
}

const CHECKPOINT_KIND: &str = "checkpoint";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            step: self.state.step,
            base_lr: self.state.base_lr,
            seed: self.state.seed,
            config: self.config.clone(),
        };
        let params = self.state.model.params();
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        for (prefix, store) in [(MOMENT_M, &self.state.moments.m), (MOMENT_V, &self.state.moments.v)] {
            tensors.extend(store.iter().map(|(_, n, t)| (format!("{prefix}{n}"), t.clone())));
        }
        let meta = serde_json::to_vec(&meta).expect("checkpoint meta serializes");
        Container { meta, tensors }.encode()
    }

    pub fn decode(bytes: &[u8]) -> CliResult<Self> {
        let c = Container::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&c.meta).map_err(|e| corrupt(format!("meta: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(corrupt(format!("holds a {:?}, not a checkpoint", meta.kind)));
        }
        let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        for (name, t) in c.tensors {
            if let Some(n) = name.strip_prefix(MOMENT_M) {
                m.push(n, t);
            } else if let Some(n) = name.strip_prefix(MOMENT_V) {
                v.push(n, t);
            } else {
                params.push(name, t);
            }
        }
        let same_layout = |s: &ParamStore| {
            s.len() == params.len()
                && s.iter().zip(params.iter()).all(|((_, a, x), (_, b, y))| a == b && x.shape() == y.shape())
        };
        if !same_layout(&m) || !same_layout(&v) {
            return Err(corrupt("optimizer moments do not match the parameters"));
        }
        let model = Denoiser::from_params(meta.config.model.clone(), params).map_err(corrupt)?;
        let state = TrainState {
            model,
            moments: Moments { m, v },
            step: meta.step,
            base_lr: meta.base_lr,
            seed: meta.seed,
        };
        Ok(Self { config: meta.config, state })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
