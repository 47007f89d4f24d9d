//! Parameter files: a text manifest followed by raw little-endian blocks.
//!
//! ```text
//! SLLEN-WEIGHTS 1 <f32|f64> <block count>
//! meta <single-line JSON>
//! <name> <dim0> <dim1> ...        one line per block, in storage order
//!                                 (empty line ends the manifest)
//! <block 0 bytes><block 1 bytes>...
//! ```
//!
//! Exported network and segmenter weights use `f32`; training checkpoints use
//! `f64` so a resumed run continues bit-for-bit.

use std::path::Path;

use ndarray::IxDyn;
use serde_json::Value;
use sllen_tensor::{ParamSet, Tensor};

use crate::imagecore::write_atomic;
use crate::{Error, Result};

const MAGIC: &str = "SLLEN-WEIGHTS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub dtype: Dtype,
    pub meta: Value,
    pub blocks: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn from_params(params: &ParamSet, dtype: Dtype, meta: Value) -> Self {
        Self {
            dtype,
            meta,
            blocks: params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut head = format!(
            "{MAGIC} 1 {} {}\nmeta {}\n",
            self.dtype.name(),
            self.blocks.len(),
            serde_json::to_string(&self.meta).map_err(|e| Error::WeightLoad(e.to_string()))?
        );
        for (name, t) in &self.blocks {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::WeightLoad(format!("invalid block name {name:?}")));
            }
            head.push_str(name);
            for d in t.shape() {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push('\n');
        let mut out = head.into_bytes();
        for (_, t) in &self.blocks {
            for &v in t.iter() {
                match self.dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::WeightLoad(m.to_string());
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("manifest terminator not found"))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
        let mut lines = head.lines();
        let first: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty file"))?
            .split_whitespace()
            .collect();
        if first.len() != 4 || first[0] != MAGIC || first[1] != "1" {
            return Err(bad("not a weight file (bad magic or version)"));
        }
        let dtype = match first[2] {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(bad(&format!("unknown dtype {other}"))),
        };
        let count: usize = first[3].parse().map_err(|_| bad("bad block count"))?;
        let meta_line = lines.next().ok_or_else(|| bad("missing meta line"))?;
        let meta = meta_line
            .strip_prefix("meta ")
            .ok_or_else(|| bad("missing meta line"))?;
        let meta: Value = serde_json::from_str(meta).map_err(|e| bad(&e.to_string()))?;
        let mut manifest = Vec::with_capacity(count);
        for line in lines {
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("empty manifest line"))?;
            let dims = parts
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(&format!("bad shape for block {name}")))?;
            manifest.push((name.to_string(), dims));
        }
        if manifest.len() != count {
            return Err(bad(&format!(
                "manifest lists {} blocks, header says {count}",
                manifest.len()
            )));
        }
        let mut body = &bytes[end + 2..];
        let mut blocks = Vec::with_capacity(count);
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let len = n * dtype.width();
            if body.len() < len {
                return Err(bad(&format!("truncated data for block {name}")));
            }
            let (chunk, rest) = body.split_at(len);
            body = rest;
            let vals: Vec<f64> = match dtype {
                Dtype::F32 => chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            blocks.push((name, Tensor::from_shape_vec(IxDyn(&dims), vals).unwrap()));
        }
        if !body.is_empty() {
            return Err(bad("trailing bytes after last block"));
        }
        Ok(Self {
            dtype,
            meta,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Copies the leading blocks into `params`. Names and shapes must match
    /// the parameter set exactly and in order. Returns the unconsumed blocks.
    pub fn load_into<'a>(
        &'a self,
        params: &mut ParamSet,
    ) -> Result<&'a [(String, Tensor)]> {
        if self.blocks.len() < params.len() {
            return Err(Error::WeightLoad(format!(
                "file has {} blocks, model needs {}",
                self.blocks.len(),
                params.len()
            )));
        }
        for (p, (name, t)) in params.iter_mut().zip(&self.blocks) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::WeightLoad(format!(
                    "manifest mismatch: model expects {} {:?}, file has {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(&self.blocks[params.len()..])
    }
}
