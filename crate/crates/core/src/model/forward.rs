use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{MoEModel, Norm, Router};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Routing decision for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingOutput {
    /// Retained slots, in selection order (largest probability first).
    pub slots: Vec<usize>,
    /// Original expert identities of `slots`.
    pub experts: Vec<usize>,
    /// Weights applied to each selected expert's output.
    pub affinities: Vec<f64>,
    /// Softmax over all active experts.
    pub probs: Vec<f64>,
}

/// Softmax over the router logits, then the `k` largest probabilities.
/// Ties go to the lower slot, which is also the lower original index.
pub fn gate(router: &Router, x: &[f64], k: usize, renormalize: bool) -> Result<GatingOutput> {
    let n = router.n_active();
    if k == 0 || k > n {
        return Err(Error::Selection(format!("top-{k} requested from {n} active experts")));
    }
    if x.len() != router.w_gate.rows {
        return Err(Error::Dimension(format!("router input of {} dims, expected {}", x.len(), router.w_gate.rows)));
    }
    let mut logits = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        for (l, &w) in logits.iter_mut().zip(router.w_gate.row(i)) {
            *l += xi * w;
        }
    }
    let probs = softmax(&logits);
    let slots = top_k(&probs, k);
    let mut affinities: Vec<f64> = slots.iter().map(|&s| probs[s]).collect();
    if renormalize {
        let total: f64 = affinities.iter().sum();
        for a in &mut affinities {
            *a /= total;
        }
    }
    Ok(GatingOutput { experts: slots.iter().map(|&s| router.expert_ids[s]).collect(), slots, affinities, probs })
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Indices of the `k` largest values, largest first, lowest index on ties.
pub(crate) fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if v <= values[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("k <= len");
        taken[b] = true;
        out.push(b);
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, norm: &Norm) -> (Matrix, NormCache) {
    let d = x.cols;
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut out = Matrix::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xh[j] * norm.gain[j] + norm.bias[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tokens one expert processed in a forward pass, with its intermediates.
#[derive(Debug, Clone)]
pub struct ExpertCache {
    /// Sequence positions routed to this expert, ascending.
    pub positions: Vec<usize>,
    /// Affinity for each routed position.
    pub affinities: Vec<f64>,
    /// Expert input rows (normalized hidden state).
    pub input: Matrix,
    /// `input · w_up`
    pub pre: Matrix,
    /// `silu(pre)`
    pub hidden: Matrix,
    /// Expert output `hidden · w_down`, before affinity weighting.
    pub output: Matrix,
}

/// Per-sequence routing for one layer.
#[derive(Debug, Clone)]
pub struct SeqRouting {
    /// `T × n_active` softmax probabilities.
    pub probs: Matrix,
    /// `T × top_k` selected slots, row-major.
    pub selected: Vec<usize>,
    /// `T × top_k` affinities aligned with `selected`.
    pub affinities: Vec<f64>,
    pub top_k: usize,
}

impl SeqRouting {
    pub fn token_slots(&self, pos: usize) -> &[usize] {
        &self.selected[pos * self.top_k..(pos + 1) * self.top_k]
    }

    pub fn token_affinities(&self, pos: usize) -> &[f64] {
        &self.affinities[pos * self.top_k..(pos + 1) * self.top_k]
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub(crate) attn_norm: NormCache,
    pub(crate) a1: Matrix,
    pub(crate) q: Matrix,
    pub(crate) k: Matrix,
    pub(crate) v: Matrix,
    /// `T × T` causal attention probabilities.
    pub(crate) attn: Matrix,
    pub(crate) ctx: Matrix,
    pub(crate) moe_norm: NormCache,
    /// Normalized input to the router and experts.
    pub moe_input: Matrix,
    pub routing: SeqRouting,
    pub experts: Vec<ExpertCache>,
    /// Mixture output `Σ affinity · expert output`, `T × d`.
    pub mixture: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache>,
    pub(crate) final_norm: NormCache,
    pub(crate) final_out: Matrix,
    /// `T × vocab_size`
    pub logits: Matrix,
}

impl MoEModel {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.seq_len });
        }
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some((position, &token)) =
            tokens.iter().enumerate().find(|(_, &t)| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange { position, token, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardPass> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let d = cfg.d_model;
        let p = &self.params;

        let mut x = Matrix::zeros(t, d);
        for (i, &tok) in tokens.iter().enumerate() {
            let e = p.token_embedding.row(tok as usize);
            let pe = p.pos_embedding.row(i);
            for (o, (a, b)) in x.row_mut(i).iter_mut().zip(e.iter().zip(pe)) {
                *o = a + b;
            }
        }

        let scale = 1.0 / (d as f64).sqrt();
        let mut caches = Vec::with_capacity(p.layers.len());
        for layer in &p.layers {
            let (a1, attn_norm) = layer_norm(&x, &layer.attn_norm);
            let q = a1.matmul(&layer.w_q);
            let k = a1.matmul(&layer.w_k);
            let v = a1.matmul(&layer.w_v);
            let mut attn = q.matmul_t(&k);
            for i in 0..t {
                let row = attn.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for r in row[..=i].iter_mut() {
                    *r *= scale;
                    max = max.max(*r);
                }
                row[i + 1..].fill(0.0);
                let mut total = 0.0;
                for r in row[..=i].iter_mut() {
                    *r = (*r - max).exp();
                    total += *r;
                }
                for r in row[..=i].iter_mut() {
                    *r /= total;
                }
            }
            let ctx = attn.matmul(&v);
            let attn_out = ctx.matmul(&layer.w_o);
            // h = x + attn_out, kept in `x`.
            x.add_assign(&attn_out);

            let (a2, moe_norm) = layer_norm(&x, &layer.moe_norm);
            let n = layer.router.n_active();
            let logits = a2.matmul(&layer.router.w_gate);
            let mut probs = Matrix::zeros(t, n);
            let mut selected = Vec::with_capacity(t * cfg.top_k);
            let mut affinities = Vec::with_capacity(t * cfg.top_k);
            let mut per_expert: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n];
            for i in 0..t {
                let pr = softmax(logits.row(i));
                let slots = top_k(&pr, cfg.top_k);
                let mut aff: Vec<f64> = slots.iter().map(|&s| pr[s]).collect();
                if cfg.renormalize_topk {
                    let total: f64 = aff.iter().sum();
                    for a in &mut aff {
                        *a /= total;
                    }
                }
                for (&s, &a) in slots.iter().zip(&aff) {
                    per_expert[s].0.push(i);
                    per_expert[s].1.push(a);
                }
                probs.row_mut(i).copy_from_slice(&pr);
                selected.extend_from_slice(&slots);
                affinities.extend_from_slice(&aff);
            }

            let mut mixture = Matrix::zeros(t, d);
            let mut experts = Vec::with_capacity(n);
            for (slot, (positions, affs)) in per_expert.into_iter().enumerate() {
                let expert = &layer.experts[slot];
                let mut input = Matrix::zeros(positions.len(), d);
                for (r, &pos) in positions.iter().enumerate() {
                    input.row_mut(r).copy_from_slice(a2.row(pos));
                }
                let pre = input.matmul(&expert.w_up);
                let mut hidden = pre.clone();
                for h in &mut hidden.data {
                    *h *= sigmoid(*h);
                }
                let output = hidden.matmul(&expert.w_down);
                experts.push(ExpertCache { positions, affinities: affs, input, pre, hidden, output });
            }
            // Mix in token order, then in selection order.
            let routing = SeqRouting { probs, selected, affinities, top_k: cfg.top_k };
            let mut cursor = vec![0usize; n];
            for i in 0..t {
                let out_row = mixture.row_mut(i);
                for (&s, &a) in routing.token_slots(i).iter().zip(routing.token_affinities(i)) {
                    let r = cursor[s];
                    cursor[s] += 1;
                    let eo = experts[s].output.row(r);
                    for (o, &e) in out_row.iter_mut().zip(eo) {
                        *o += a * e;
                    }
                }
            }
            x.add_assign(&mixture);
            caches.push(LayerCache {
                attn_norm,
                a1,
                q,
                k,
                v,
                attn,
                ctx,
                moe_norm,
                moe_input: a2,
                routing,
                experts,
                mixture,
            });
        }

        let (final_out, final_norm) = layer_norm(&x, &p.final_norm);
        let logits = final_out.matmul_t(&p.token_embedding);
        Ok(ForwardPass { tokens: tokens.to_vec(), layers: caches, final_norm, final_out, logits })
    }
}

/// Per-position negative log-likelihood with a max-shifted log-softmax.
pub fn token_nll(logits: &Matrix, targets: &[u32]) -> Result<Vec<f64>> {
    if logits.rows != targets.len() {
        return Err(Error::Dimension(format!("{} logit rows for {} targets", logits.rows, targets.len())));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            let y = y as usize;
            if y >= row.len() {
                return Err(Error::TokenOutOfRange { position: i, token: y as u32, vocab: row.len() });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
            Ok(lse - row[y])
        })
        .collect()
}

/// Mean token cross-entropy.
pub fn loss(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("loss targets"));
    }
    let nll = token_nll(logits, targets)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, MoEModel};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(n_experts: usize, top_k: usize) -> MoEModel {
        MoEModel::init(ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_experts,
            top_k,
            d_hidden: 6,
            seq_len: 12,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn router_from_logit_bias(logits: &[f64]) -> Router {
        // One-dimensional input x = 1 makes the logits equal the weights.
        Router { w_gate: Matrix::from_vec(1, logits.len(), logits.to_vec()).unwrap(), expert_ids: (0..logits.len()).collect() }
    }

    #[test]
    fn symmetric_tie_picks_lowest_indices() {
        let g = gate(&router_from_logit_bias(&[0.0; 4]), &[1.0], 2, false).unwrap();
        assert_eq!(g.experts, vec![0, 1]);
        assert_eq!(g.affinities, vec![0.25, 0.25]);
    }

    #[test]
    fn dominant_logit_affinity() {
        let g = gate(&router_from_logit_bias(&[10.0, 0.0, 0.0, 0.0]), &[1.0], 1, false).unwrap();
        assert_eq!(g.experts, vec![0]);
        let expected = 1.0 / (1.0 + 3.0 * (-10.0f64).exp());
        assert!((g.affinities[0] - expected).abs() < 1e-15);
        assert!((g.affinities[0] - 0.999864).abs() < 1e-6);
    }

    #[test]
    fn gate_rejects_oversized_k() {
        assert!(gate(&router_from_logit_bias(&[0.0; 2]), &[1.0], 3, false).is_err());
    }

    #[test]
    fn renormalized_affinities_sum_to_one() {
        let g = gate(&router_from_logit_bias(&[1.0, 2.0, 0.5, -1.0]), &[1.0], 2, true).unwrap();
        assert!((g.affinities.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gate_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
            let c = rng.random_range(-50.0..50.0);
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let a = gate(&router_from_logit_bias(&logits), &[1.0], 2, false).unwrap();
            let b = gate(&router_from_logit_bias(&shifted), &[1.0], 2, false).unwrap();
            assert_eq!(a.experts, b.experts);
            for (x, y) in a.affinities.iter().zip(&b.affinities) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_expert_mixture_is_expert_output() {
        let model = tiny(1, 1);
        let pass = model.forward(&[1, 2, 3, 4]).unwrap();
        for layer in &pass.layers {
            assert!(layer.experts[0].affinities.iter().all(|&a| a == 1.0));
            assert_eq!(layer.mixture.data, layer.experts[0].output.data);
        }
    }

    #[test]
    fn forward_is_stateless_and_bit_identical() {
        let model = tiny(4, 2);
        let a = model.forward(&[5, 6, 7, 5, 6, 7]).unwrap();
        let b = model.forward(&[5, 6, 7, 5, 6, 7]).unwrap();
        assert_eq!(a.logits, b.logits);
        // Causal attention: the first positions see identical prefixes.
        let c = model.forward(&[5, 6, 7, 1]).unwrap();
        for i in 0..3 {
            assert_eq!(a.logits.row(i), c.logits.row(i));
        }
    }

    #[test]
    fn mixture_replays_from_caches() {
        let model = tiny(4, 2);
        let tokens: Vec<u32> = (0..12).map(|i| (i * 5 % 16) as u32).collect();
        let pass = model.forward(&tokens).unwrap();
        for layer in &pass.layers {
            let mut replay = Matrix::zeros(tokens.len(), 8);
            for cache in &layer.experts {
                for (r, (&pos, &a)) in cache.positions.iter().zip(&cache.affinities).enumerate() {
                    for j in 0..8 {
                        let v = replay.get(pos, j) + a * cache.output.get(r, j);
                        replay.set(pos, j, v);
                    }
                }
            }
            for (x, y) in replay.data.iter().zip(&layer.mixture.data) {
                assert!((x - y).abs() < 1e-10);
            }
            for i in 0..tokens.len() {
                assert!((layer.routing.probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_experts_selected_is_order_independent() {
        let model = tiny(4, 4);
        let pass = model.forward(&[1, 2, 3]).unwrap();
        // With k = n every slot is selected; the mixture equals the full
        // probability-weighted sum regardless of selection order.
        for layer in &pass.layers {
            for i in 0..3 {
                let mut direct = vec![0.0; 8];
                for (s, cache) in layer.experts.iter().enumerate() {
                    let r = cache.positions.iter().position(|&p| p == i).unwrap();
                    for j in 0..8 {
                        direct[j] += layer.routing.probs.get(i, s) * cache.output.get(r, j);
                    }
                }
                for j in 0..8 {
                    assert!((direct[j] - layer.mixture.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_token_reports_position() {
        let model = tiny(4, 2);
        match model.forward(&[1, 2, 99]) {
            Err(Error::TokenOutOfRange { position, .. }) => assert_eq!(position, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(model.forward(&[0; 13]).is_err());
    }

    #[test]
    fn loss_examples() {
        let uniform = Matrix::zeros(3, 256);
        assert!((loss(&uniform, &[1, 2, 3]).unwrap() - 256f64.ln()).abs() < 1e-12);
        let mut sharp = Matrix::zeros(1, 4);
        sharp.set(0, 2, 1e3);
        assert!(loss(&sharp, &[2]).unwrap() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Matrix::from_vec(5, 7, (0..35).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let targets = [0u32, 6, 3, 3, 1];
        let mut naive = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            naive -= (logits.get(i, y as usize).exp() / z).ln();
        }
        assert!((loss(&logits, &targets).unwrap() - naive / 5.0).abs() < 1e-9);
    }
}
