//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SHLDCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! tensor in layer order as raw little-endian `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Classifier, Predictor};
use crate::nd::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SHLDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub tensor_shapes: Vec<Vec<usize>>,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
}

pub fn encode<T: Scalar>(model: &Classifier<T>, seed: u64, epoch: usize, val_loss: f64) -> Result<Vec<u8>> {
    let params = model.parameters();
    let header = CheckpointHeader {
        architecture: model.architecture(),
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        tensor_shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        seed,
        epoch,
        val_loss,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Classifier<T>, CheckpointHeader)> {
    let fmt = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fmt(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(header_len))
        .ok_or_else(|| fmt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| fmt(&format!("bad header: {e}")))?;
    let mut rest = &bytes[20 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensor_shapes.len());
    for shape in &header.tensor_shapes {
        let n: usize = shape.iter().product();
        if rest.len() < 8 * n {
            return Err(fmt("truncated parameter block"));
        }
        let (block, tail) = rest.split_at(8 * n);
        rest = tail;
        let data = block
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    if !rest.is_empty() {
        return Err(fmt("trailing bytes after parameter blocks"));
    }
    let model = Classifier::new(header.architecture, header.input_shape, header.num_classes, header.seed)?
        .with_parameters(tensors)?;
    Ok((model, header))
}

pub fn save<T: Scalar>(path: &Path, model: &Classifier<T>, seed: u64, epoch: usize, val_loss: f64) -> Result<()> {
    std::fs::write(path, encode(model, seed, epoch, val_loss)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Classifier<T>, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
