use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationKind, ImageEncoder, LoraConfig, RewardModel, SimilarityFn, TextEncoder};
use crate::container;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RWBCKPT\0";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    widths: Vec<usize>,
    activation: ActivationKind,
    similarity: SimilarityFn,
    image_lora: Option<LoraConfig>,
    text_lora: Option<LoraConfig>,
    goal_ids: Vec<u32>,
    table_dim: usize,
    params: Vec<ParamEntry>,
}

fn lora_of(layer: &super::Linear) -> Option<LoraConfig> {
    layer.lora.as_ref().map(|l| LoraConfig {
        rank: l.rank,
        alpha: l.alpha,
    })
}

pub fn checkpoint_bytes(model: &RewardModel) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        widths: model.image.widths(),
        activation: model.image.activation,
        similarity: model.similarity,
        image_lora: model.image.layers.first().and_then(lora_of),
        text_lora: lora_of(&model.text.projection),
        goal_ids: model.text.goal_ids.clone(),
        table_dim: model.text.table.value.shape()[1],
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let payload: Vec<f64> = params
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect();
    container::encode(MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<RewardModel> {
    let (h, payload): (Header, Vec<f64>) = container::decode(MAGIC, CHECKPOINT_VERSION, bytes)?;
    if h.widths.len() < 2 {
        return Err(Error::Format(
            "checkpoint has fewer than two layer widths".into(),
        ));
    }
    let obs_dim = h.widths[0];
    let embed_dim = *h.widths.last().unwrap();
    let hidden = &h.widths[1..h.widths.len() - 1];
    let mut image = ImageEncoder::new(obs_dim, hidden, embed_dim, h.activation, 0);
    if let Some(cfg) = h.image_lora {
        image.add_lora(cfg, 0)?;
    }
    let table = Tensor::zeros(&[h.goal_ids.len(), h.table_dim]);
    let mut text = TextEncoder::new(h.goal_ids.clone(), table, embed_dim, false, 0)?;
    if let Some(cfg) = h.text_lora {
        text.add_lora(cfg, 0)?;
    }
    let mut model = RewardModel {
        image,
        text,
        similarity: h.similarity,
    };
    let mut offset = 0;
    {
        let params = model.params_mut();
        if params.len() != h.params.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} params, architecture has {}",
                h.params.len(),
                params.len()
            )));
        }
        for (p, entry) in params.into_iter().zip(&h.params) {
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "param {} {:?} does not match checkpoint entry {} {:?}",
                    p.name,
                    p.value.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let n = p.value.numel();
            let chunk = payload
                .get(offset..offset + n)
                .ok_or_else(|| Error::Format("checkpoint payload too short".into()))?;
            p.value.data_mut().copy_from_slice(chunk);
            p.trainable = entry.trainable;
            offset += n;
        }
    }
    if offset != payload.len() {
        return Err(Error::Format(
            "checkpoint payload has trailing values".into(),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &RewardModel, path: &Path) -> Result<()> {
    container::write_file(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<RewardModel> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
