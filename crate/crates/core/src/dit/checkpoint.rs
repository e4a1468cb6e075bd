//! Binary checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   b"MFTRYON\0"
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! tensors      for each entry of header.tensors, in order:
//!              rows * cols little-endian f32 values, row-major
//! ```
//!
//! Model tensors come first, in parameter-layout order. When optimizer
//! moments are saved they follow as `adam.m.<name>` for every parameter and
//! then `adam.v.<name>` for every parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::panels::PanelLayout;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MFTRYON\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub layout: PanelLayout,
    pub seed: u64,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub tensors: Vec<TensorInfo>,
}

/// Adam first and second moments, in parameter-layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub params: Parameters<f32>,
    pub moments: Option<OptimizerMoments>,
}

impl Checkpoint {
    pub fn new(params: Parameters<f32>, seed: u64) -> Self {
        Self { seed, step: 0, params, moments: None }
    }

    fn header(&self) -> CheckpointHeader {
        let mut tensors: Vec<TensorInfo> = self
            .params
            .entries()
            .iter()
            .map(|e| TensorInfo { name: e.name.clone(), rows: e.rows, cols: e.cols })
            .collect();
        if self.moments.is_some() {
            for prefix in ["adam.m.", "adam.v."] {
                for e in self.params.entries() {
                    tensors.push(TensorInfo { name: format!("{prefix}{}", e.name), rows: e.rows, cols: e.cols });
                }
            }
        }
        let config = *self.params.config();
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            config,
            layout: config.layout,
            seed: self.seed,
            step: self.step,
            tensors,
        }
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header()).expect("header serialises");
    let mut buf = Vec::with_capacity(16 + header.len() + ckpt.params.len() * 12);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let mut put = |vals: &[f32]| {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(ckpt.params.as_slice());
    if let Some(m) = &ckpt.moments {
        put(&m.m);
        put(&m.v);
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: String| Error::Checkpoint { path: path.to_path_buf(), message };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + hlen;
    if bytes.len() < body_start {
        return Err(corrupt("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..body_start]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    if header.layout != header.config.layout {
        return Err(corrupt("layout disagrees with model config".into()));
    }
    let mut params = Parameters::<f32>::zeros(header.config).map_err(|e| corrupt(e.to_string()))?;
    let n = params.len();
    let with_moments = header.tensors.len() == 3 * params.entries().len();
    let expected = Checkpoint { seed: header.seed, step: header.step, params: params.clone(), moments: None };
    let mut want = expected.header();
    if with_moments {
        want = Checkpoint { moments: Some(OptimizerMoments { m: Vec::new(), v: Vec::new() }), ..expected }.header();
    }
    if want.tensors != header.tensors {
        return Err(corrupt("tensor list does not match the model config".into()));
    }
    let total = if with_moments { 3 * n } else { n };
    let body = &bytes[body_start..];
    if body.len() != total * 4 {
        return Err(corrupt(format!("expected {} bytes of tensor data, found {}", total * 4, body.len())));
    }
    let values: Vec<f32> =
        body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(corrupt("non-finite tensor values".into()));
    }
    params.as_mut_slice().copy_from_slice(&values[..n]);
    let moments = with_moments.then(|| OptimizerMoments { m: values[n..2 * n].to_vec(), v: values[2 * n..].to_vec() });
    Ok(Checkpoint { seed: header.seed, step: header.step, params, moments })
}
