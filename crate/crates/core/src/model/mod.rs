//! Toy decoder-only mixture-of-experts transformer.
//!
//! Each block is pre-norm: `h = x + attn(norm(x))`, `x' = h + moe(norm(h))`.
//! The output projection is tied to the token embedding.
//!
//! Trainable parameter count, with `V` vocab, `S` seq_len, `d` d_model, `L`
//! layers, `n` experts and `H` d_hidden:
//!
//! ```text
//! V·d + S·d + L·(4·d + 4·d² + d·n + 2·n·d·H) + 2·d
//! ```
//!
//! The default config (256, 256, 64, 4, 8, 128) has 625,792 parameters.

mod backward;
mod forward;

pub use backward::{backward, backward_pass, GradReduction, GradientBundle};
pub use forward::{gate, loss, token_nll, ExpertCache, ForwardPass, GatingOutput, LayerCache, SeqRouting};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_hidden: usize,
    pub seq_len: usize,
    pub renormalize_topk: bool,
    pub grad_reduction: GradReduction,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_experts: 8,
            top_k: 2,
            d_hidden: 128,
            seq_len: 256,
            renormalize_topk: false,
            grad_reduction: GradReduction::Sum,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be at least 1"));
        }
        if self.d_hidden == 0 {
            return Err(Error::config("d_hidden", "must be at least 1"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be at least 1"));
        }
        if self.n_experts == 0 {
            return Err(Error::config("n_experts", "must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config("top_k", format!("must be in 1..={}", self.n_experts)));
        }
        Ok(())
    }

    /// Closed-form count of trainable scalars for an unpruned model.
    pub fn parameter_count(&self) -> usize {
        let (v, s, d, n, h) = (self.vocab_size, self.seq_len, self.d_model, self.n_experts, self.d_hidden);
        v * d + s * d + self.n_layers * (4 * d + 4 * d * d + d * n + 2 * n * d * h) + 2 * d
    }
}

/// Layer norm gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Norm {
    fn identity(d: usize) -> Self {
        Norm { gain: vec![1.0; d], bias: vec![0.0; d] }
    }

    fn zeros(d: usize) -> Self {
        Norm { gain: vec![0.0; d], bias: vec![0.0; d] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `d_model × d_hidden`
    pub w_up: Matrix,
    /// `d_hidden × d_model`
    pub w_down: Matrix,
}

impl Expert {
    /// Row-major `w_up` followed by row-major `w_down`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w_up.data.len() + self.w_down.data.len());
        v.extend_from_slice(&self.w_up.data);
        v.extend_from_slice(&self.w_down.data);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// `d_model × n_active`; column `j` scores retained expert `expert_ids[j]`.
    pub w_gate: Matrix,
    /// Original expert index for each retained slot, strictly ascending.
    pub expert_ids: Vec<usize>,
}

impl Router {
    pub fn n_active(&self) -> usize {
        self.expert_ids.len()
    }

    pub fn slot_of(&self, original_id: usize) -> Option<usize> {
        self.expert_ids.iter().position(|&e| e == original_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub attn_norm: Norm,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub moe_norm: Norm,
    pub router: Router,
    pub experts: Vec<Expert>,
}

/// Parameter group, used to restrict which tensors an optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Norm,
    Attention,
    Router,
    Expert,
}

/// All trainable tensors. Also reused as the shape of a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `vocab_size × d_model`, tied to the output projection.
    pub token_embedding: Matrix,
    /// `seq_len × d_model`
    pub pos_embedding: Matrix,
    pub layers: Vec<MoeLayer>,
    pub final_norm: Norm,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        let d = self.final_norm.gain.len();
        Params {
            token_embedding: z(&self.token_embedding),
            pos_embedding: z(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| MoeLayer {
                    attn_norm: Norm::zeros(d),
                    w_q: z(&l.w_q),
                    w_k: z(&l.w_k),
                    w_v: z(&l.w_v),
                    w_o: z(&l.w_o),
                    moe_norm: Norm::zeros(d),
                    router: Router { w_gate: z(&l.router.w_gate), expert_ids: l.router.expert_ids.clone() },
                    experts: l.experts.iter().map(|e| Expert { w_up: z(&e.w_up), w_down: z(&e.w_down) }).collect(),
                })
                .collect(),
            final_norm: Norm::zeros(d),
        }
    }

    /// Every tensor in canonical order.
    pub fn tensors(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out: Vec<(ParamKind, &[f64])> = vec![
            (ParamKind::Embedding, &self.token_embedding.data),
            (ParamKind::Embedding, &self.pos_embedding.data),
        ];
        for l in &self.layers {
            out.push((ParamKind::Norm, &l.attn_norm.gain));
            out.push((ParamKind::Norm, &l.attn_norm.bias));
            out.push((ParamKind::Attention, &l.w_q.data));
            out.push((ParamKind::Attention, &l.w_k.data));
            out.push((ParamKind::Attention, &l.w_v.data));
            out.push((ParamKind::Attention, &l.w_o.data));
            out.push((ParamKind::Norm, &l.moe_norm.gain));
            out.push((ParamKind::Norm, &l.moe_norm.bias));
            out.push((ParamKind::Router, &l.router.w_gate.data));
            for e in &l.experts {
                out.push((ParamKind::Expert, &e.w_up.data));
                out.push((ParamKind::Expert, &e.w_down.data));
            }
        }
        out.push((ParamKind::Norm, &self.final_norm.gain));
        out.push((ParamKind::Norm, &self.final_norm.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = vec![
            (ParamKind::Embedding, &mut self.token_embedding.data),
            (ParamKind::Embedding, &mut self.pos_embedding.data),
        ];
        for l in &mut self.layers {
            out.push((ParamKind::Norm, &mut l.attn_norm.gain));
            out.push((ParamKind::Norm, &mut l.attn_norm.bias));
            out.push((ParamKind::Attention, &mut l.w_q.data));
            out.push((ParamKind::Attention, &mut l.w_k.data));
            out.push((ParamKind::Attention, &mut l.w_v.data));
            out.push((ParamKind::Attention, &mut l.w_o.data));
            out.push((ParamKind::Norm, &mut l.moe_norm.gain));
            out.push((ParamKind::Norm, &mut l.moe_norm.bias));
            out.push((ParamKind::Router, &mut l.router.w_gate.data));
            for e in &mut l.experts {
                out.push((ParamKind::Expert, &mut e.w_up.data));
                out.push((ParamKind::Expert, &mut e.w_down.data));
            }
        }
        out.push((ParamKind::Norm, &mut self.final_norm.gain));
        out.push((ParamKind::Norm, &mut self.final_norm.bias));
        out
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub params: Params,
}

impl MoEModel {
    /// Deterministic initialisation: every matrix is drawn from
    /// `N(0, 1/fan_in)` with a single ChaCha stream seeded by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix { rows, cols, data }
        };
        let token_embedding = draw(config.vocab_size, d, d);
        let pos_embedding = draw(config.seq_len, d, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let w_q = draw(d, d, d);
            let w_k = draw(d, d, d);
            let w_v = draw(d, d, d);
            let w_o = draw(d, d, d);
            let w_gate = draw(d, config.n_experts, d);
            let experts = (0..config.n_experts)
                .map(|_| Expert { w_up: draw(d, config.d_hidden, d), w_down: draw(config.d_hidden, d, config.d_hidden) })
                .collect();
            layers.push(MoeLayer {
                attn_norm: Norm::identity(d),
                w_q,
                w_k,
                w_v,
                w_o,
                moe_norm: Norm::identity(d),
                router: Router { w_gate, expert_ids: (0..config.n_experts).collect() },
                experts,
            });
        }
        Ok(MoEModel { config, params: Params { token_embedding, pos_embedding, layers, final_norm: Norm::identity(d) } })
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.params.layers
    }

    pub fn n_layers(&self) -> usize {
        self.params.layers.len()
    }

    /// Retained slot → original expert index, per layer.
    pub fn identity_map(&self) -> Vec<Vec<usize>> {
        self.params.layers.iter().map(|l| l.router.expert_ids.clone()).collect()
    }

    pub fn n_active(&self, layer: usize) -> usize {
        self.params.layers[layer].router.n_active()
    }

    /// Check structural invariants, e.g. after loading from disk.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let shape = |m: &Matrix, r: usize, cl: usize, what: &str| -> Result<()> {
            if m.rows != r || m.cols != cl || m.data.len() != r * cl {
                return Err(Error::Dimension(format!("{what}: {}x{}, expected {r}x{cl}", m.rows, m.cols)));
            }
            Ok(())
        };
        let p = &self.params;
        shape(&p.token_embedding, c.vocab_size, d, "token_embedding")?;
        shape(&p.pos_embedding, c.seq_len, d, "pos_embedding")?;
        if p.layers.len() != c.n_layers {
            return Err(Error::Dimension(format!("{} layers, expected {}", p.layers.len(), c.n_layers)));
        }
        for (i, l) in p.layers.iter().enumerate() {
            let n = l.router.n_active();
            if n < c.top_k {
                return Err(Error::Pruning(format!("layer {i} retains {n} experts, fewer than top_k {}", c.top_k)));
            }
            if l.experts.len() != n {
                return Err(Error::Dimension(format!("layer {i}: {} experts for {n} router columns", l.experts.len())));
            }
            if !l.router.expert_ids.windows(2).all(|w| w[0] < w[1])
                || l.router.expert_ids.iter().any(|&e| e >= c.n_experts)
            {
                return Err(Error::Malformed(format!("layer {i}: expert identity map not ascending within range")));
            }
            shape(&l.router.w_gate, d, n, "w_gate")?;
            for m in [&l.w_q, &l.w_k, &l.w_v, &l.w_o] {
                shape(m, d, d, "attention")?;
            }
            for e in &l.experts {
                shape(&e.w_up, d, c.d_hidden, "w_up")?;
                shape(&e.w_down, c.d_hidden, d, "w_down")?;
            }
        }
        for (_, t) in p.tensors() {
            crate::linalg::check_finite(t)?;
        }
        Ok(())
    }
}
