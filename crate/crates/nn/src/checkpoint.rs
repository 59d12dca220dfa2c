//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `SBALCKPT`, a little-endian `u64` header length,
//! a JSON header (configs, config digest, tensor names and lengths, payload
//! SHA-256), then every tensor as little-endian `f32`.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;
use crate::loss_predictor::{LossPredictor, LossPredictorConfig};
use crate::unet::{SegModelConfig, UNet};

const MAGIC: &[u8; 8] = b"SBALCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: SegModelConfig,
    config_digest: String,
    loss_predictor: Option<LossPredictorConfig>,
    loss_predictor_trained: bool,
    tensors: Vec<(String, usize)>,
    predictor_tensors: Vec<(String, usize)>,
    payload_sha256: String,
}

/// Conventional checkpoint name for one training run of an experiment.
pub fn checkpoint_file_name(cycle: usize, seed: u64) -> String {
    format!("model_cycle{cycle:03}_seed{seed}.ckpt")
}

pub fn save_checkpoint(
    path: &Path,
    model: &UNet<f32>,
    predictor: Option<&LossPredictor<f32>>,
) -> Result<(), ModelError> {
    let state = model.state();
    let pstate = predictor.map(|p| p.state()).unwrap_or_default();
    let mut payload = Vec::new();
    for (_, values) in state.iter().chain(&pstate) {
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        model: model.config().clone(),
        config_digest: model.config().digest(),
        loss_predictor: predictor.map(|p| p.config().clone()),
        loss_predictor_trained: predictor.is_some_and(|p| p.is_trained()),
        tensors: state.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        predictor_tensors: pstate.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

fn read_tensors(
    layout: &[(String, usize)],
    payload: &[u8],
    offset: &mut usize,
) -> Result<Vec<(String, Vec<f32>)>, ModelError> {
    let mut out = Vec::with_capacity(layout.len());
    for (name, len) in layout {
        let end = *offset + len * 4;
        let chunk = payload
            .get(*offset..end)
            .ok_or_else(|| ModelError::Checkpoint(format!("payload truncated at {name}")))?;
        let values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push((name.clone(), values));
        *offset = end;
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<(UNet<f32>, Option<LossPredictor<f32>>), ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ModelError::Checkpoint("header truncated".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let payload = &bytes[header_end..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(ModelError::Checkpoint("payload checksum mismatch".into()));
    }
    if header.model.digest() != header.config_digest {
        return Err(ModelError::Checkpoint("config digest mismatch".into()));
    }
    let mut rng = StdRng::seed_from_u64(0);
    let mut model = UNet::new(header.model.clone(), &mut rng)?;
    let mut offset = 0;
    model.load_state(&read_tensors(&header.tensors, payload, &mut offset)?)?;
    let predictor = match header.loss_predictor {
        Some(cfg) => {
            let mut p = LossPredictor::new(cfg, &header.model.tap_channels(), &mut rng)?;
            p.load_state(&read_tensors(&header.predictor_tensors, payload, &mut offset)?)?;
            if header.loss_predictor_trained {
                p.mark_trained();
            }
            Some(p)
        }
        None => None,
    };
    if offset != payload.len() {
        return Err(ModelError::Checkpoint("trailing payload bytes".into()));
    }
    Ok((model, predictor))
}
