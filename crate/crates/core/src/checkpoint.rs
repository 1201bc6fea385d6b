//! Checkpoint files.
//!
//! ```text
//! "RTRLCKPT" | version u32 | config digest [32] | stage u8 | iteration u64
//! | adam step u64 | classes u64 | block count u32
//! | blocks: name length u16, name (UTF-8), tensor in the tensor file format
//! ```
//!
//! Blocks are named `param/…`, `buffer/…`, `adam_m/…` and `adam_v/…`, each
//! group in lexicographic order, so equal states encode to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::ModelConfig;
use crate::data::tensor_file;
use crate::error::{Error, Result};
use crate::model::TwoStreamModel;
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::training::{AdamState, StageState};

pub const MAGIC: &[u8; 8] = b"RTRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub digest: [u8; 32],
    pub stage: u8,
    pub iteration: u64,
    pub num_classes: u64,
    pub store: ParamStore<F>,
    pub adam: AdamState<F>,
}

const GROUPS: [&str; 4] = ["param", "buffer", "adam_m", "adam_v"];

impl<F: Real> Checkpoint<F> {
    pub fn new(digest: [u8; 32], store: &ParamStore<F>, num_classes: usize, state: &StageState<F>) -> Self {
        Checkpoint {
            digest,
            stage: state.stage,
            iteration: state.iteration as u64,
            num_classes: num_classes as u64,
            store: store.clone(),
            adam: state.adam.clone(),
        }
    }

    pub fn stage_state(&self) -> StageState<F> {
        StageState {
            stage: self.stage,
            iteration: self.iteration as usize,
            adam: self.adam.clone(),
        }
    }

    fn group(&self, k: usize) -> &BTreeMap<String, Tensor<F>> {
        match k {
            0 => &self.store.params,
            1 => &self.store.buffers,
            2 => &self.adam.m,
            _ => &self.adam.v,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.push(self.stage);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
        let count: usize = (0..GROUPS.len()).map(|k| self.group(k).len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (k, prefix) in GROUPS.iter().enumerate() {
            for (name, t) in self.group(k) {
                let full = format!("{prefix}/{name}");
                out.extend_from_slice(&(full.len() as u16).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                tensor_file::encode(t, &mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let digest: [u8; 32] = r.array()?;
        let stage = r.take(1)?[0];
        let iteration = u64::from_le_bytes(r.array()?);
        let step = u64::from_le_bytes(r.array()?);
        let num_classes = u64::from_le_bytes(r.array()?);
        let count = u32::from_le_bytes(r.array()?);
        let mut ck = Checkpoint {
            digest,
            stage,
            iteration,
            num_classes,
            store: ParamStore::new(),
            adam: AdamState {
                step,
                ..AdamState::new()
            },
        };
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: "block name is not UTF-8".into(),
                })?
                .to_string();
            let (t, used) = tensor_file::decode::<F>(&bytes[r.pos..], r.pos)?;
            r.pos += used;
            let (group, key) = name.split_once('/').ok_or_else(|| Error::Format {
                offset: at,
                msg: format!("block name `{name}` has no group"),
            })?;
            let map = match group {
                "param" => &mut ck.store.params,
                "buffer" => &mut ck.store.buffers,
                "adam_m" => &mut ck.adam.m,
                "adam_v" => &mut ck.adam.v,
                _ => {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("unknown block group `{group}`"),
                    })
                }
            };
            map.insert(key.to_string(), t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: "trailing bytes after the last block".into(),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The stored network, after checking that its blocks match what `config`
    /// builds.
    pub fn model(&self, config: &ModelConfig) -> Result<TwoStreamModel<F>> {
        let fresh = TwoStreamModel::<F>::new(config.clone(), self.num_classes as usize, 0)?;
        for (have, want, kind) in [
            (&self.store.params, &fresh.store.params, "parameter"),
            (&self.store.buffers, &fresh.store.buffers, "buffer"),
        ] {
            if let Some(name) = want.keys().find(|k| !have.contains_key(*k)) {
                return Err(Error::Contract(format!("checkpoint lacks {kind} `{name}`")));
            }
            if let Some(name) = have.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::Contract(format!("checkpoint has unexpected {kind} `{name}`")));
            }
            for (name, t) in have {
                if t.shape() != want[name].shape() {
                    return Err(Error::dim(
                        "checkpoint",
                        format!("`{name}` is {:?}, the model expects {:?}", t.shape(), want[name].shape()),
                    ));
                }
            }
        }
        Ok(TwoStreamModel {
            config: config.clone(),
            num_classes: self.num_classes as usize,
            store: self.store.clone(),
        })
    }

    /// Fails unless the checkpoint was written for a model with this digest.
    pub fn check_digest(&self, digest: &[u8; 32]) -> Result<()> {
        if &self.digest != digest {
            return Err(Error::Contract(
                "checkpoint was written for a different model configuration".into(),
            ));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(Error::Format {
            offset: self.bytes.len(),
            msg: format!("truncated checkpoint: needed {n} bytes at {}", self.pos),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
