//! Checkpoint serialization: a versioned JSON manifest next to a raw
//! little-endian float64 array file with a length-prefixed layer-id index.
//! Reloading reproduces bit-identical forward outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::NetworkSpec;
use crate::network::Network;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const ARRAY_MAGIC: &[u8; 4] = b"VBCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_id: String,
    pub spec: NetworkSpec,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        model_id: &str,
        epoch: usize,
        seed: u64,
        metrics: BTreeMap<String, f64>,
    ) -> Self {
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                model_id: model_id.to_string(),
                spec: net.spec.clone(),
                epoch,
                seed,
                metrics,
            },
            arrays: net.tensors(),
        }
    }

    /// Rebuild the runtime network, overwriting every tensor from the
    /// stored arrays. Errors on any missing, extra or misshapen array.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::init(self.manifest.spec.clone(), 0)?;
        let stored: BTreeMap<&str, &Tensor> = self
            .arrays
            .iter()
            .map(|(name, t)| (name.as_str(), t))
            .collect();
        if stored.len() != self.arrays.len() {
            return Err(Error::Format("duplicate array name in checkpoint".into()));
        }
        let mut missing = Vec::new();
        let mut used = 0usize;
        let mut failure: Option<Error> = None;
        net.for_each_tensor_mut(&mut |name, t| {
            match stored.get(name) {
                Some(src) => {
                    used += 1;
                    if src.shape() != t.shape() {
                        failure.get_or_insert(Error::Shape {
                            op: "checkpoint_load",
                            lhs: src.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    } else {
                        *t = (*src).clone();
                    }
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint is missing arrays: {missing:?}"
            )));
        }
        if used != self.arrays.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} arrays, network consumed {used}",
                self.arrays.len()
            )));
        }
        Ok(net)
    }

    pub fn manifest_path(stem: &Path) -> PathBuf {
        stem.with_extension("json")
    }

    pub fn arrays_path(stem: &Path) -> PathBuf {
        stem.with_extension("bin")
    }

    /// Write `{stem}.json` and `{stem}.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(Self::manifest_path(stem), manifest + "\n")?;

        let mut bin = Vec::new();
        bin.extend_from_slice(ARRAY_MAGIC);
        bin.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bin.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, tensor) in &self.arrays {
            let name_bytes = name.as_bytes();
            bin.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            bin.extend_from_slice(name_bytes);
            bin.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                bin.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(Self::arrays_path(stem), bin)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Checkpoint> {
        let manifest_text = std::fs::read_to_string(Self::manifest_path(stem))?;
        let manifest: CheckpointManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {}",
                manifest.format_version
            )));
        }
        let bin = std::fs::read(Self::arrays_path(stem))?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bin.len() {
                return Err(Error::Truncated {
                    expected: *cur + n,
                    actual: bin.len(),
                });
            }
            let s = &bin[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 4)? != ARRAY_MAGIC {
            return Err(Error::Format("bad checkpoint array magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint array version {version}"
            )));
        }
        let count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|e| Error::Format(format!("array name: {e}")))?;
            let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut cur, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::from_parts(shape, data)));
        }
        Ok(Checkpoint { manifest, arrays })
    }
}
