//! Calibration pass: routing counts, token coverage, activation moments and
//! samples, and summed gradients for every retained expert.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map};

use crate::corpus::CalibrationSet;
use crate::error::{Error, Result};
use crate::linalg::{count_outside, DimAccumulator, Matrix};
use crate::model::{backward_pass, Expert, MoEModel};
use crate::persistence::{Container, Tensor, TensorData};

pub const RESERVOIR_CAP: usize = 1024;
pub const OUTLIER_C: f64 = 3.0;

/// Square matrix of counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    pub n: usize,
    pub data: Vec<u64>,
}

impl CountMatrix {
    pub fn zeros(n: usize) -> Self {
        CountMatrix { n, data: vec![0; n * n] }
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> u64 {
        self.data[p * self.n + q]
    }

    #[inline]
    pub fn add(&mut self, p: usize, q: usize, v: u64) {
        self.data[p * self.n + q] += v;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|p| (0..p).all(|q| self.get(p, q) == self.get(q, p)))
    }

    /// Row sum without the diagonal.
    pub fn off_diagonal_sum(&self, p: usize) -> u64 {
        (0..self.n).filter(|&q| q != p).map(|q| self.get(p, q)).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    pub collect_gradients: bool,
    pub reservoir_cap: usize,
    /// Seeds the activation reservoirs only; routing and outputs never see it.
    pub reservoir_seed: u64,
    pub outlier_c: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { collect_gradients: true, reservoir_cap: RESERVOIR_CAP, reservoir_seed: 0x5eed, outlier_c: OUTLIER_C }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStats {
    pub original_id: usize,
    /// Bitset over the vocabulary of input ids routed here.
    pub token_ids: Vec<u64>,
    /// Moments of the expert output over all routed tokens.
    pub activations: DimAccumulator,
    pub reservoir: Vec<Vec<f64>>,
    pub reservoir_seen: u64,
    /// Per dimension, routed tokens falling outside `μ_j ± cσ_j`.
    pub outliers_per_dim: Vec<u64>,
    /// Output entries falling outside their own token's `μ ± cσ`.
    pub outliers_per_token: u64,
    pub grad_sum: Option<Expert>,
}

impl ExpertStats {
    fn new(original_id: usize, vocab: usize, d: usize) -> Self {
        ExpertStats {
            original_id,
            token_ids: vec![0; vocab.div_ceil(64)],
            activations: DimAccumulator::new(d),
            reservoir: Vec::new(),
            reservoir_seen: 0,
            outliers_per_dim: vec![0; d],
            outliers_per_token: 0,
            grad_sum: None,
        }
    }

    pub fn has_token(&self, id: usize) -> bool {
        self.token_ids[id / 64] >> (id % 64) & 1 == 1
    }

    pub fn unique_tokens(&self) -> u64 {
        self.token_ids.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn token_id_list(&self) -> Vec<usize> {
        (0..self.token_ids.len() * 64).filter(|&i| self.has_token(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub expert_ids: Vec<usize>,
    pub usage: Vec<u64>,
    pub collaboration: CountMatrix,
    pub experts: Vec<ExpertStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub layers: Vec<LayerStats>,
    pub token_total: u64,
    pub top_k: usize,
    pub vocab_size: usize,
    pub has_gradients: bool,
    pub calset_digest: String,
    pub model_digest: String,
}

impl CalibrationStats {
    pub fn layer(&self, l: usize) -> Result<&LayerStats> {
        self.layers.get(l).ok_or_else(|| Error::Dimension(format!("no statistics for layer {l}")))
    }
}

struct SeqResult {
    pass: crate::model::ForwardPass,
    grads: Option<crate::model::GradientBundle>,
}

pub fn run_calibration(model: &MoEModel, calset: &CalibrationSet, opts: &CalibrationOptions) -> Result<CalibrationStats> {
    model.validate()?;
    if calset.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let cfg = &model.config;
    let (d, vocab, k) = (cfg.d_model, cfg.vocab_size, cfg.top_k);
    let mut layers: Vec<LayerStats> = model
        .layers()
        .iter()
        .map(|l| {
            let ids = l.router.expert_ids.clone();
            let n = ids.len();
            LayerStats {
                experts: ids.iter().map(|&id| ExpertStats::new(id, vocab, d)).collect(),
                expert_ids: ids,
                usage: vec![0; n],
                collaboration: CountMatrix::zeros(n),
            }
        })
        .collect();
    let mut rngs: Vec<Vec<ChaCha8Rng>> = layers
        .iter()
        .enumerate()
        .map(|(l, ls)| {
            ls.expert_ids
                .iter()
                .map(|&id| ChaCha8Rng::seed_from_u64(opts.reservoir_seed ^ ((l as u64) << 32) ^ ((id as u64) << 16)))
                .collect()
        })
        .collect();
    // Expert outputs for the exact per-dimension outlier pass.
    let mut dumps: Vec<Vec<Vec<f64>>> = layers.iter().map(|ls| vec![Vec::new(); ls.experts.len()]).collect();

    let chunk = rayon::current_num_threads().max(1);
    let indices: Vec<usize> = (0..calset.len()).collect();
    for block in indices.chunks(chunk) {
        let results: Vec<Result<SeqResult>> = block
            .par_iter()
            .map(|&i| {
                let inputs = calset.inputs(i);
                let pass = model.forward(inputs).map_err(|e| Error::Sequence { index: i, source: Box::new(e) })?;
                let grads = if opts.collect_gradients {
                    Some(backward_pass(model, &pass, calset.targets(i), 1.0).map_err(|e| Error::Sequence { index: i, source: Box::new(e) })?)
                } else {
                    None
                };
                Ok(SeqResult { pass, grads })
            })
            .collect();
        for r in results {
            let r = r?;
            for (l, (lc, ls)) in r.pass.layers.iter().zip(layers.iter_mut()).enumerate() {
                let t = r.pass.tokens.len();
                for pos in 0..t {
                    let slots = lc.routing.token_slots(pos);
                    for &p in slots {
                        ls.usage[p] += 1;
                        for &q in slots {
                            ls.collaboration.add(p, q, 1);
                        }
                        let tok = r.pass.tokens[pos] as usize;
                        ls.experts[p].token_ids[tok / 64] |= 1 << (tok % 64);
                    }
                }
                for (slot, ec) in lc.experts.iter().enumerate() {
                    let es = &mut ls.experts[slot];
                    let rng = &mut rngs[l][slot];
                    for row in 0..ec.output.rows {
                        let y = ec.output.row(row);
                        es.activations.push(y)?;
                        dumps[l][slot].extend_from_slice(y);
                        let (mu, sd) = row_moments(y);
                        es.outliers_per_token += count_outside(y, mu, sd, opts.outlier_c) as u64;
                        es.reservoir_seen += 1;
                        if es.reservoir.len() < opts.reservoir_cap {
                            es.reservoir.push(y.to_vec());
                        } else if opts.reservoir_cap > 0 {
                            let j = rng.random_range(0..es.reservoir_seen);
                            if (j as usize) < opts.reservoir_cap {
                                es.reservoir[j as usize] = y.to_vec();
                            }
                        }
                    }
                }
                if let Some(g) = &r.grads {
                    let gl = &g.params.layers[l];
                    for (es, ge) in ls.experts.iter_mut().zip(&gl.experts) {
                        match &mut es.grad_sum {
                            Some(acc) => {
                                acc.w_up.add_assign(&ge.w_up);
                                acc.w_down.add_assign(&ge.w_down);
                            }
                            None => es.grad_sum = Some(ge.clone()),
                        }
                    }
                }
            }
        }
    }

    for (ls, dl) in layers.iter_mut().zip(&dumps) {
        for (es, dump) in ls.experts.iter_mut().zip(dl) {
            let mean = es.activations.mean().to_vec();
            let std = es.activations.std();
            let mut col = Vec::with_capacity(es.activations.count as usize);
            for j in 0..d {
                col.clear();
                col.extend(dump.iter().skip(j).step_by(d));
                es.outliers_per_dim[j] = count_outside(&col, mean[j], std[j], opts.outlier_c) as u64;
            }
        }
    }

    Ok(CalibrationStats {
        layers,
        token_total: calset.token_count() as u64,
        top_k: k,
        vocab_size: vocab,
        has_gradients: opts.collect_gradients,
        calset_digest: calset.digest.clone(),
        model_digest: crate::checkpoint::model_digest(model),
    })
}

fn row_moments(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mu = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

pub fn collaboration_pair_stats(stats: &CalibrationStats, layer: usize) -> Result<CountMatrix> {
    Ok(stats.layer(layer)?.collaboration.clone())
}

/// `|X_p ∩ X_q|` over unique routed input ids.
pub fn token_similarity_matrix(stats: &CalibrationStats, layer: usize) -> Result<CountMatrix> {
    let ls = stats.layer(layer)?;
    let n = ls.experts.len();
    let mut m = CountMatrix::zeros(n);
    for p in 0..n {
        for q in 0..n {
            let a = &ls.experts[p].token_ids;
            let b = &ls.experts[q].token_ids;
            m.data[p * n + q] = a.iter().zip(b).map(|(x, y)| (x & y).count_ones() as u64).sum();
        }
    }
    Ok(m)
}

fn f64_tensor(name: String, dims: Vec<u64>, v: Vec<f64>) -> Tensor {
    Tensor::new(name, dims, TensorData::F64(v))
}

pub fn stats_to_container(stats: &CalibrationStats) -> Container {
    let mut meta = Map::new();
    meta.insert("kind".into(), json!("calibration_stats"));
    meta.insert("tool_version".into(), json!(crate::checkpoint::TOOL_VERSION));
    meta.insert("token_total".into(), json!(stats.token_total));
    meta.insert("top_k".into(), json!(stats.top_k));
    meta.insert("vocab_size".into(), json!(stats.vocab_size));
    meta.insert("has_gradients".into(), json!(stats.has_gradients));
    meta.insert("calset_digest".into(), json!(stats.calset_digest));
    meta.insert("model_digest".into(), json!(stats.model_digest));
    meta.insert("identity_map".into(), json!(stats.layers.iter().map(|l| l.expert_ids.clone()).collect::<Vec<_>>()));
    let mut c = Container::new(meta);
    for (l, ls) in stats.layers.iter().enumerate() {
        let n = ls.expert_ids.len() as u64;
        c.push(Tensor::new(format!("layers.{l}.usage"), vec![n], TensorData::U64(ls.usage.clone())));
        c.push(Tensor::new(format!("layers.{l}.collaboration"), vec![n, n], TensorData::U64(ls.collaboration.data.clone())));
        for es in &ls.experts {
            let p = format!("layers.{l}.experts.{}", es.original_id);
            let d = es.activations.dim() as u64;
            c.push(Tensor::new(format!("{p}.token_ids"), vec![es.token_ids.len() as u64], TensorData::U64(es.token_ids.clone())));
            c.push(Tensor::new(format!("{p}.act_count"), vec![1], TensorData::U64(vec![es.activations.count])));
            c.push(f64_tensor(format!("{p}.act_mean"), vec![d], es.activations.mean.clone()));
            c.push(f64_tensor(format!("{p}.act_m2"), vec![d], es.activations.m2.clone()));
            c.push(f64_tensor(format!("{p}.act_sum_sq"), vec![d], es.activations.sum_sq.clone()));
            c.push(f64_tensor(format!("{p}.reservoir"), vec![es.reservoir.len() as u64, d], es.reservoir.concat()));
            c.push(Tensor::new(format!("{p}.reservoir_seen"), vec![1], TensorData::U64(vec![es.reservoir_seen])));
            c.push(Tensor::new(format!("{p}.outliers_per_dim"), vec![d], TensorData::U64(es.outliers_per_dim.clone())));
            c.push(Tensor::new(format!("{p}.outliers_per_token"), vec![1], TensorData::U64(vec![es.outliers_per_token])));
            if let Some(g) = &es.grad_sum {
                for (name, m) in [("grad.w_up", &g.w_up), ("grad.w_down", &g.w_down)] {
                    c.push(f64_tensor(format!("{p}.{name}"), vec![m.rows as u64, m.cols as u64], m.data.clone()));
                }
            }
        }
    }
    c
}

fn u64s(c: &Container, name: &str) -> Result<Vec<u64>> {
    match &c.get(name)?.data {
        TensorData::U64(v) => Ok(v.clone()),
        _ => Err(Error::Malformed(format!("`{name}` should be u64"))),
    }
}

fn u64_scalar(c: &Container, name: &str) -> Result<u64> {
    u64s(c, name)?.first().copied().ok_or_else(|| Error::Malformed(format!("`{name}` is empty")))
}

fn f64s(c: &Container, name: &str) -> Result<Vec<f64>> {
    match &c.get(name)?.data {
        TensorData::F64(v) => Ok(v.clone()),
        _ => Err(Error::Malformed(format!("`{name}` should be f64"))),
    }
}

fn f64_matrix(c: &Container, name: &str) -> Result<Matrix> {
    let t = c.get(name)?;
    if t.dims.len() != 2 {
        return Err(Error::Malformed(format!("`{name}` should be rank 2")));
    }
    Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, f64s(c, name)?)
}

pub fn stats_from_container(c: &Container) -> Result<CalibrationStats> {
    if c.meta("kind")?.as_str() != Some("calibration_stats") {
        return Err(Error::Malformed("container does not hold calibration statistics".into()));
    }
    let get_u = |k: &str| -> Result<u64> { c.meta(k)?.as_u64().ok_or_else(|| Error::Malformed(format!("metadata `{k}`"))) };
    let get_s = |k: &str| -> Result<String> { Ok(c.meta(k)?.as_str().ok_or_else(|| Error::Malformed(format!("metadata `{k}`")))?.to_string()) };
    let identity: Vec<Vec<usize>> = serde_json::from_value(c.meta("identity_map")?.clone())?;
    let has_gradients = c.meta("has_gradients")?.as_bool().ok_or_else(|| Error::Malformed("metadata `has_gradients`".into()))?;
    let mut layers = Vec::new();
    for (l, ids) in identity.into_iter().enumerate() {
        let n = ids.len();
        let usage = u64s(c, &format!("layers.{l}.usage"))?;
        let collab = u64s(c, &format!("layers.{l}.collaboration"))?;
        if usage.len() != n || collab.len() != n * n {
            return Err(Error::Dimension(format!("layer {l} statistics do not match {n} experts")));
        }
        let mut experts = Vec::with_capacity(n);
        for &id in &ids {
            let p = format!("layers.{l}.experts.{id}");
            let mean = f64s(c, &format!("{p}.act_mean"))?;
            let d = mean.len();
            let res = c.get(&format!("{p}.reservoir"))?;
            let rows = res.dims.first().copied().unwrap_or(0) as usize;
            let flat = f64s(c, &format!("{p}.reservoir"))?;
            let reservoir = if d == 0 { vec![Vec::new(); rows] } else { flat.chunks(d).map(<[f64]>::to_vec).collect() };
            let grad_sum = if has_gradients {
                Some(Expert { w_up: f64_matrix(c, &format!("{p}.grad.w_up"))?, w_down: f64_matrix(c, &format!("{p}.grad.w_down"))? })
            } else {
                None
            };
            experts.push(ExpertStats {
                original_id: id,
                token_ids: u64s(c, &format!("{p}.token_ids"))?,
                activations: DimAccumulator {
                    count: u64_scalar(c, &format!("{p}.act_count"))?,
                    mean,
                    m2: f64s(c, &format!("{p}.act_m2"))?,
                    sum_sq: f64s(c, &format!("{p}.act_sum_sq"))?,
                },
                reservoir,
                reservoir_seen: u64_scalar(c, &format!("{p}.reservoir_seen"))?,
                outliers_per_dim: u64s(c, &format!("{p}.outliers_per_dim"))?,
                outliers_per_token: u64_scalar(c, &format!("{p}.outliers_per_token"))?,
                grad_sum,
            });
        }
        layers.push(LayerStats { expert_ids: ids, usage, collaboration: CountMatrix { n, data: collab }, experts });
    }
    Ok(CalibrationStats {
        layers,
        token_total: get_u("token_total")?,
        top_k: get_u("top_k")? as usize,
        vocab_size: get_u("vocab_size")? as usize,
        has_gradients,
        calset_digest: get_s("calset_digest")?,
        model_digest: get_s("model_digest")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_calibration_set, synthetic_text, Corpus};
    use crate::model::ModelConfig;
    use std::collections::BTreeSet;

    fn tiny(top_k: usize, seed: u64) -> MoEModel {
        MoEModel::init(ModelConfig { vocab_size: 256, d_model: 8, n_layers: 2, n_experts: 4, top_k, d_hidden: 6, seq_len: 8, seed, ..Default::default() }).unwrap()
    }

    fn calset(n: usize, seed: u64) -> CalibrationSet {
        let corpus = Corpus::from_bytes(synthetic_text(8192, 1));
        build_calibration_set(&corpus, n, 8, seed).unwrap()
    }

    /// Recount from raw forward passes.
    fn recount(model: &MoEModel, cs: &CalibrationSet, l: usize) -> (Vec<u64>, CountMatrix, Vec<BTreeSet<u32>>) {
        let n = model.n_active(l);
        let mut usage = vec![0; n];
        let mut collab = CountMatrix::zeros(n);
        let mut sets = vec![BTreeSet::new(); n];
        for i in 0..cs.len() {
            let pass = model.forward(cs.inputs(i)).unwrap();
            let r = &pass.layers[l].routing;
            for pos in 0..pass.tokens.len() {
                let s = r.token_slots(pos);
                for &p in s {
                    usage[p] += 1;
                    sets[p].insert(pass.tokens[pos]);
                    for &q in s {
                        collab.data[p * n + q] += 1;
                    }
                }
            }
        }
        (usage, collab, sets)
    }

    #[test]
    fn usage_is_conserved_and_matches_recount() {
        let m = tiny(2, 3);
        let cs = calset(3, 11);
        let st = run_calibration(&m, &cs, &CalibrationOptions::default()).unwrap();
        assert_eq!(st.token_total, 24);
        for l in 0..2 {
            let ls = &st.layers[l];
            assert_eq!(ls.usage.iter().sum::<u64>(), 24 * 2);
            let (usage, collab, sets) = recount(&m, &cs, l);
            assert_eq!(ls.usage, usage);
            assert_eq!(ls.collaboration, collab);
            assert!(ls.collaboration.is_symmetric());
            let ts = token_similarity_matrix(&st, l).unwrap();
            for p in 0..4 {
                assert_eq!(ls.collaboration.get(p, p), ls.usage[p]);
                assert!(ls.collaboration.off_diagonal_sum(p) <= ls.usage[p]);
                for q in 0..4 {
                    assert_eq!(ts.get(p, q), sets[p].intersection(&sets[q]).count() as u64);
                    assert!(ls.collaboration.get(p, q) <= ls.usage[p].min(ls.usage[q]));
                }
                assert_eq!(ls.experts[p].token_id_list(), sets[p].iter().map(|&t| t as usize).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn all_experts_active_when_k_equals_n() {
        let st = run_calibration(&tiny(4, 1), &calset(2, 5), &CalibrationOptions::default()).unwrap();
        for ls in &st.layers {
            assert!(ls.usage.iter().all(|&u| u == 16));
        }
    }

    #[test]
    fn single_expert_selection_has_no_collaboration() {
        let st = run_calibration(&tiny(1, 1), &calset(2, 5), &CalibrationOptions::default()).unwrap();
        let c = collaboration_pair_stats(&st, 1).unwrap();
        assert!((0..4).all(|p| c.off_diagonal_sum(p) == 0));
    }

    #[test]
    fn calibration_is_deterministic_and_round_trips() {
        let m = tiny(2, 9);
        let cs = calset(4, 2);
        let opts = CalibrationOptions { reservoir_cap: 5, ..Default::default() };
        let a = run_calibration(&m, &cs, &opts).unwrap();
        let b = run_calibration(&m, &cs, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().flat_map(|l| &l.experts).all(|e| e.reservoir.len() <= 5));
        let bytes = stats_to_container(&a).encode().unwrap();
        let back = stats_from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn reservoir_seed_does_not_touch_routing() {
        let m = tiny(2, 9);
        let cs = calset(4, 2);
        let a = run_calibration(&m, &cs, &CalibrationOptions { reservoir_cap: 3, reservoir_seed: 1, ..Default::default() }).unwrap();
        let b = run_calibration(&m, &cs, &CalibrationOptions { reservoir_cap: 3, reservoir_seed: 2, ..Default::default() }).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.usage, lb.usage);
            for (ea, eb) in la.experts.iter().zip(&lb.experts) {
                assert_eq!(ea.activations, eb.activations);
                assert_eq!(ea.grad_sum, eb.grad_sum);
            }
        }
    }

    #[test]
    fn grad_sum_is_sum_of_sequence_gradients() {
        let m = tiny(2, 4);
        let cs = calset(3, 8);
        let st = run_calibration(&m, &cs, &CalibrationOptions::default()).unwrap();
        let mut total: Option<crate::model::GradientBundle> = None;
        for i in 0..cs.len() {
            let (_, g) = crate::model::backward(&m, cs.inputs(i), cs.targets(i)).unwrap();
            match &mut total {
                Some(t) => t.add_assign(&g),
                None => total = Some(g),
            }
        }
        let total = total.unwrap();
        for l in 0..2 {
            for (slot, es) in st.layers[l].experts.iter().enumerate() {
                assert_eq!(es.grad_sum.as_ref().unwrap(), total.expert(l, slot));
                if st.layers[l].usage[slot] == 0 {
                    assert!(es.grad_sum.as_ref().unwrap().flatten().iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}
