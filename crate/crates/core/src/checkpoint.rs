//! Model checkpoints on top of the binary container.
//!
//! Metadata keys: `kind` = "model", `tool_version`, `storage` ("f32" or
//! "f64"), `config` (the [`ModelConfig`] object) and `identity_map` (per
//! layer, the original expert id of each retained slot). Tensor names use
//! original expert ids, e.g. `layers.2.experts.5.w_up`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Expert, ModelConfig, MoEModel, MoeLayer, Norm, Params, Router};
use crate::persistence::{sha256_hex, Container, Tensor, TensorData};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    #[default]
    F32,
    F64,
}

fn put(c: &mut Container, name: String, dims: Vec<u64>, data: &[f64], storage: Storage) {
    let data = match storage {
        Storage::F32 => TensorData::F32(data.iter().map(|&x| x as f32).collect()),
        Storage::F64 => TensorData::F64(data.to_vec()),
    };
    c.push(Tensor::new(name, dims, data));
}

fn put_matrix(c: &mut Container, name: String, m: &Matrix, storage: Storage) {
    put(c, name, vec![m.rows as u64, m.cols as u64], &m.data, storage);
}

pub fn model_to_container(model: &MoEModel, storage: Storage) -> Container {
    let mut meta = Map::new();
    meta.insert("kind".into(), json!("model"));
    meta.insert("tool_version".into(), json!(TOOL_VERSION));
    meta.insert("storage".into(), serde_json::to_value(storage).expect("enum"));
    meta.insert("config".into(), serde_json::to_value(&model.config).expect("config"));
    meta.insert("identity_map".into(), json!(model.identity_map()));
    let mut c = Container::new(meta);
    let p = &model.params;
    put_matrix(&mut c, "token_embedding".into(), &p.token_embedding, storage);
    put_matrix(&mut c, "pos_embedding".into(), &p.pos_embedding, storage);
    for (l, layer) in p.layers.iter().enumerate() {
        let d = layer.attn_norm.gain.len() as u64;
        put(&mut c, format!("layers.{l}.attn_norm.gain"), vec![d], &layer.attn_norm.gain, storage);
        put(&mut c, format!("layers.{l}.attn_norm.bias"), vec![d], &layer.attn_norm.bias, storage);
        put_matrix(&mut c, format!("layers.{l}.w_q"), &layer.w_q, storage);
        put_matrix(&mut c, format!("layers.{l}.w_k"), &layer.w_k, storage);
        put_matrix(&mut c, format!("layers.{l}.w_v"), &layer.w_v, storage);
        put_matrix(&mut c, format!("layers.{l}.w_o"), &layer.w_o, storage);
        put(&mut c, format!("layers.{l}.moe_norm.gain"), vec![d], &layer.moe_norm.gain, storage);
        put(&mut c, format!("layers.{l}.moe_norm.bias"), vec![d], &layer.moe_norm.bias, storage);
        put_matrix(&mut c, format!("layers.{l}.router.w_gate"), &layer.router.w_gate, storage);
        for (expert, &id) in layer.experts.iter().zip(&layer.router.expert_ids) {
            put_matrix(&mut c, format!("layers.{l}.experts.{id}.w_up"), &expert.w_up, storage);
            put_matrix(&mut c, format!("layers.{l}.experts.{id}.w_down"), &expert.w_down, storage);
        }
    }
    let d = p.final_norm.gain.len() as u64;
    put(&mut c, "final_norm.gain".into(), vec![d], &p.final_norm.gain, storage);
    put(&mut c, "final_norm.bias".into(), vec![d], &p.final_norm.bias, storage);
    c
}

fn matrix(c: &Container, name: &str) -> Result<Matrix> {
    let t = c.get(name)?;
    if t.dims.len() != 2 {
        return Err(Error::Malformed(format!("`{name}` has rank {}, expected 2", t.dims.len())));
    }
    Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.data.to_f64()?)
}

fn vector(c: &Container, name: &str) -> Result<Vec<f64>> {
    c.get(name)?.data.to_f64()
}

/// Rebuild and validate a model; nothing is returned unless every tensor
/// checks out.
pub fn model_from_container(c: &Container) -> Result<MoEModel> {
    if c.meta("kind")?.as_str() != Some("model") {
        return Err(Error::Malformed("container does not hold a model".into()));
    }
    let config: ModelConfig = serde_json::from_value(c.meta("config")?.clone())?;
    config.validate()?;
    let identity: Vec<Vec<usize>> = serde_json::from_value(c.meta("identity_map")?.clone())?;
    if identity.len() != config.n_layers {
        return Err(Error::Malformed(format!("identity map has {} layers, config {}", identity.len(), config.n_layers)));
    }
    let mut layers = Vec::with_capacity(config.n_layers);
    for (l, ids) in identity.iter().enumerate() {
        let experts = ids
            .iter()
            .map(|id| {
                Ok(Expert {
                    w_up: matrix(c, &format!("layers.{l}.experts.{id}.w_up"))?,
                    w_down: matrix(c, &format!("layers.{l}.experts.{id}.w_down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(MoeLayer {
            attn_norm: Norm { gain: vector(c, &format!("layers.{l}.attn_norm.gain"))?, bias: vector(c, &format!("layers.{l}.attn_norm.bias"))? },
            w_q: matrix(c, &format!("layers.{l}.w_q"))?,
            w_k: matrix(c, &format!("layers.{l}.w_k"))?,
            w_v: matrix(c, &format!("layers.{l}.w_v"))?,
            w_o: matrix(c, &format!("layers.{l}.w_o"))?,
            moe_norm: Norm { gain: vector(c, &format!("layers.{l}.moe_norm.gain"))?, bias: vector(c, &format!("layers.{l}.moe_norm.bias"))? },
            router: Router { w_gate: matrix(c, &format!("layers.{l}.router.w_gate"))?, expert_ids: ids.clone() },
            experts,
        });
    }
    let d = config.d_model;
    let params = Params {
        token_embedding: matrix(c, "token_embedding")?,
        pos_embedding: matrix(c, "pos_embedding")?,
        layers,
        final_norm: Norm { gain: vector(c, "final_norm.gain")?, bias: vector(c, "final_norm.bias")? },
    };
    for n in std::iter::once(&params.final_norm).chain(params.layers.iter().flat_map(|l| [&l.attn_norm, &l.moe_norm])) {
        if n.gain.len() != d || n.bias.len() != d {
            return Err(Error::Dimension("norm parameters do not match d_model".into()));
        }
    }
    let model = MoEModel { config, params };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &MoEModel, path: &Path, storage: Storage) -> Result<String> {
    model_to_container(model, storage).save(path)
}

pub fn load_model(path: &Path) -> Result<MoEModel> {
    model_from_container(&Container::load(path)?)
}

/// Load a model together with the precision it was stored in.
pub fn load_model_with_storage(path: &Path) -> Result<(MoEModel, Storage)> {
    let c = Container::load(path)?;
    let storage = serde_json::from_value(c.meta("storage")?.clone())?;
    Ok((model_from_container(&c)?, storage))
}

/// Content digest of the full-precision encoding.
pub fn model_digest(model: &MoEModel) -> String {
    sha256_hex(&model_to_container(model, Storage::F64).encode().expect("model containers are well formed"))
}

/// Round every parameter through the storage precision, so an in-memory
/// model matches what a reload of its checkpoint would produce.
pub fn quantize_to_storage(model: &mut MoEModel, storage: Storage) {
    if storage == Storage::F32 {
        for (_, t) in model.params.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

pub fn metadata_value(model: &MoEModel) -> Value {
    json!({ "config": model.config, "identity_map": model.identity_map() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MoEModel {
        MoEModel::init(ModelConfig { vocab_size: 20, d_model: 8, n_layers: 2, n_experts: 4, d_hidden: 6, seq_len: 10, seed: 5, ..Default::default() }).unwrap()
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let m = small();
        let back = model_from_container(&Container::decode(&model_to_container(&m, Storage::F64).encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn f32_save_load_save_is_byte_identical() {
        let m = small();
        let a = model_to_container(&m, Storage::F32).encode().unwrap();
        let back = model_from_container(&Container::decode(&a).unwrap()).unwrap();
        let b = model_to_container(&back, Storage::F32).encode().unwrap();
        assert_eq!(a, b);
        let mut q = m.clone();
        quantize_to_storage(&mut q, Storage::F32);
        assert_eq!(q, back);
    }

    #[test]
    fn same_seed_same_checkpoint_bytes() {
        let a = model_to_container(&small(), Storage::F32).encode().unwrap();
        let b = model_to_container(&small(), Storage::F32).encode().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pruned_identity_map_survives() {
        let mut m = small();
        crate::pruning::drop_expert(&mut m, 1, 2).unwrap();
        crate::pruning::drop_expert(&mut m, 0, 0).unwrap();
        let back = model_from_container(&Container::decode(&model_to_container(&m, Storage::F64).encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back.identity_map(), vec![vec![1, 2, 3], vec![0, 1, 3]]);
        assert_eq!(back, m);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = small();
        let mut c = model_to_container(&m, Storage::F64);
        let t = c.tensors.iter_mut().find(|t| t.name == "layers.0.w_q").unwrap();
        t.dims = vec![4, 16];
        let bytes = c.encode().unwrap();
        assert!(model_from_container(&Container::decode(&bytes).unwrap()).is_err());
    }
}
