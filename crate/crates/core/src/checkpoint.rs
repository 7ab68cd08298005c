//! Checkpoint directory: `manifest.json` + `weights.bin`.
//!
//! The manifest carries the format version, the full graph, one entry per
//! tensor (name, shape, dtype, byte offset, byte length, CRC-32) and free-form
//! metadata. `weights.bin` is every tensor as little-endian `f32`, concatenated
//! in manifest order with no padding. Tensor order is node order, and within a
//! node weight, bias or gamma, beta, running_mean, running_var.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{GraphSpec, NodeParams, Params, TensorRole};
use crate::error::{Error, Result};
use crate::io::{read_file, write_files_atomic};
use crate::layers::{BatchNormParams, Conv2dParams};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub graph: GraphSpec,
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: GraphSpec,
    pub params: Params<f32>,
    pub metadata: serde_json::Value,
}

fn tensor_name(graph: &GraphSpec, id: usize, role: TensorRole) -> String {
    format!("{}.{}", graph.node(id).name, role.suffix())
}

impl Checkpoint {
    pub fn new(graph: GraphSpec, params: Params<f32>, metadata: serde_json::Value) -> Result<Self> {
        graph.infer_shapes()?;
        params.validate(&graph)?;
        Ok(Self {
            graph,
            params,
            metadata,
        })
    }

    /// Serialized `(manifest.json, weights.bin)`.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (id, role, t) in self.params.tensors() {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: tensor_name(&self.graph, id, role),
                shape: t.shape().to_vec(),
                dtype: DType::F32,
                offset: offset as u64,
                nbytes: (blob.len() - offset) as u64,
                crc32: crc32fast::hash(&blob[offset..]),
            });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            graph: self.graph.clone(),
            tensors,
            metadata: self.metadata.clone(),
        };
        let mut m = serde_json::to_vec_pretty(&manifest)?;
        m.push(b'\n');
        Ok((m, blob))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (m, w) = self.to_bytes()?;
        write_files_atomic(dir, &[(MANIFEST_FILE, &m), (WEIGHTS_FILE, &w)])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let wpath = dir.join(WEIGHTS_FILE);
        let mbytes = read_file(&mpath)?;
        let head: serde_json::Value = serde_json::from_slice(&mbytes)
            .map_err(|e| Error::format(&mpath, format!("not JSON: {e}")))?;
        match head.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
            other => {
                return Err(Error::format(
                    &mpath,
                    format!("format version {other:?} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"),
                ))
            }
        }
        let manifest: CheckpointManifest = serde_json::from_value(head)
            .map_err(|e| Error::format(&mpath, format!("invalid manifest: {e}")))?;
        let blob = read_file(&wpath)?;
        Self::from_parts(manifest, &blob, &mpath, &wpath)
    }

    fn from_parts(
        manifest: CheckpointManifest,
        blob: &[u8],
        mpath: &Path,
        wpath: &Path,
    ) -> Result<Self> {
        let graph = manifest.graph;
        graph
            .infer_shapes()
            .map_err(|e| Error::format(mpath, format!("graph: {e}")))?;
        // expected layout, from the graph alone
        let template = Params::<f32>::init(&graph, 0)?;
        let expected = template.tensors();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::format(
                mpath,
                format!(
                    "{} tensors listed, graph needs {}",
                    manifest.tensors.len(),
                    expected.len()
                ),
            ));
        }
        let mut pos = 0u64;
        let mut values: Vec<Tensor<f32>> = Vec::with_capacity(expected.len());
        for ((id, role, t), e) in expected.iter().zip(&manifest.tensors) {
            let name = tensor_name(&graph, *id, *role);
            let bad = |d: String| Error::format(mpath, format!("tensor {}: {d}", e.name));
            if e.name != name {
                return Err(bad(format!("expected {name}")));
            }
            if e.shape != t.shape() {
                return Err(bad(format!(
                    "shape {:?}, graph needs {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            if e.dtype != DType::F32 {
                return Err(bad("only f32 tensors are stored".into()));
            }
            if e.offset != pos || e.nbytes != 4 * t.numel() as u64 {
                return Err(bad(format!(
                    "span {}+{} inconsistent with layout",
                    e.offset, e.nbytes
                )));
            }
            let span = blob
                .get(e.offset as usize..(e.offset + e.nbytes) as usize)
                .ok_or_else(|| Error::format(wpath, format!("truncated in tensor {}", e.name)))?;
            if crc32fast::hash(span) != e.crc32 {
                return Err(Error::format(
                    wpath,
                    format!("checksum mismatch in tensor {}", e.name),
                ));
            }
            let data = span
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            values.push(Tensor::new(t.shape().to_vec(), data)?);
            pos += e.nbytes;
        }
        if pos != blob.len() as u64 {
            return Err(Error::format(
                wpath,
                format!("{} bytes, manifest accounts for {pos}", blob.len()),
            ));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("count checked");
        let nodes = template
            .nodes
            .iter()
            .map(|slot| match slot {
                Some(NodeParams::Conv(c)) => Some(NodeParams::Conv(Conv2dParams {
                    weight: next(),
                    bias: next(),
                    stride: c.stride,
                    pad: c.pad,
                })),
                Some(NodeParams::BatchNorm(b)) => Some(NodeParams::BatchNorm(BatchNormParams {
                    gamma: next(),
                    beta: next(),
                    running_mean: next(),
                    running_var: next(),
                    eps: b.eps,
                    momentum: b.momentum,
                })),
                None => None,
            })
            .collect();
        let params = Params { nodes };
        params
            .validate(&graph)
            .map_err(|e| Error::format(mpath, format!("parameters: {e}")))?;
        Ok(Self {
            graph,
            params,
            metadata: manifest.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_mfssd, ArchConfig};
    use std::fs;

    fn ckpt() -> Checkpoint {
        let g = build_mfssd(&ArchConfig::default()).unwrap();
        let p = Params::init(&g, 4).unwrap();
        Checkpoint::new(g, p, serde_json::json!({"stage": "init", "lr": 0.1})).unwrap()
    }

    #[test]
    fn load_save_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        let c = ckpt();
        c.save(&path).unwrap();
        let m1 = fs::read(path.join(MANIFEST_FILE)).unwrap();
        let w1 = fs::read(path.join(WEIGHTS_FILE)).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        let (m2, w2) = back.to_bytes().unwrap();
        assert_eq!(m1, m2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        ckpt().save(&path).unwrap();
        let mut w = fs::read(path.join(WEIGHTS_FILE)).unwrap();
        w[100] ^= 1;
        fs::write(path.join(WEIGHTS_FILE), &w).unwrap();
        let e = Checkpoint::load(&path).unwrap_err();
        assert!(e.to_string().contains("checksum"), "{e}");
        fs::write(path.join(WEIGHTS_FILE), &w[..w.len() - 4]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        ckpt().save(&path).unwrap();
        let m = fs::read_to_string(path.join(MANIFEST_FILE)).unwrap();
        fs::write(
            path.join(MANIFEST_FILE),
            m.replacen("\"format_version\": 1", "\"format_version\": 9", 1),
        )
        .unwrap();
        let e = Checkpoint::load(&path).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("version"));
    }
}
