//! Encoder checkpoints in the safetensors layout: a little-endian `u64`
//! header length, a JSON header naming every tensor (dtype `F32`, shape,
//! byte offsets) with the encoder configuration stored as a JSON string
//! under `__metadata__.encoder_config`, then the raw tensor bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::config::EncoderConfig;
use super::network::Encoder;
use crate::data::io::write_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONFIG_KEY: &str = "encoder_config";

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode_checkpoint(encoder: &Encoder) -> Result<Vec<u8>> {
    let bytes: Vec<Vec<u8>> = encoder
        .params()
        .iter()
        .map(|t| t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect())
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for ((name, t), b) in encoder.names().iter().zip(encoder.params()).zip(&bytes) {
        let view =
            TensorView::new(Dtype::F32, t.shape().to_vec(), b).map_err(|e| ckpt_err(Path::new(name), e.to_string()))?;
        views.push((name.clone(), view));
    }
    // A single metadata entry keeps the header byte-stable.
    let meta = HashMap::from([(CONFIG_KEY.to_string(), serde_json::to_string(encoder.config())?)]);
    safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(Path::new("<memory>"), e.to_string()))
}

pub fn decode_checkpoint(buffer: &[u8], path: &Path) -> Result<Encoder> {
    let (_, header) = SafeTensors::read_metadata(buffer).map_err(|e| ckpt_err(path, e.to_string()))?;
    let config_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| ckpt_err(path, format!("missing {CONFIG_KEY} metadata")))?;
    let config: EncoderConfig =
        serde_json::from_str(config_json).map_err(|e| ckpt_err(path, format!("bad encoder config: {e}")))?;
    let st = SafeTensors::deserialize(buffer).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut named = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ckpt_err(
                path,
                format!("{name}: expected F32, found {:?}", view.dtype()),
            ));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        named.push((name, Tensor::new(view.shape().to_vec(), data)));
    }
    Encoder::from_named(config, named).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn save_checkpoint(encoder: &Encoder, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(encoder)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    let buffer = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buffer, path)
}

/// Rounds every parameter to `f32`, the precision checkpoints store.
pub fn round_to_stored(encoder: &mut Encoder) {
    for t in encoder.params_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
