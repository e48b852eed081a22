use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::forward::{sigmoid, ForwardPass, NormCache};
use super::{Expert, MoEModel, Norm, Params};

/// How per-token gradients combine within one `backward` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradReduction {
    /// Gradient of the summed token NLL.
    #[default]
    Sum,
    /// Gradient of the mean token NLL.
    Mean,
}

/// Gradients for every trainable tensor, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: Params,
}

impl GradientBundle {
    pub fn zeros_like(model: &MoEModel) -> Self {
        GradientBundle { params: model.params.zeros_like() }
    }

    pub fn expert(&self, layer: usize, slot: usize) -> &Expert {
        &self.params.layers[layer].experts[slot]
    }

    pub fn gate(&self, layer: usize) -> &Matrix {
        &self.params.layers[layer].router.w_gate
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        self.params.add_assign(&other.params);
    }
}

/// Forward then backward on one sequence.
pub fn backward(model: &MoEModel, tokens: &[u32], targets: &[u32]) -> Result<(f64, GradientBundle)> {
    let pass = model.forward(tokens)?;
    let scale = match model.config.grad_reduction {
        GradReduction::Sum => 1.0,
        GradReduction::Mean => 1.0 / targets.len() as f64,
    };
    let nll = super::token_nll(&pass.logits, targets)?;
    let grads = backward_pass(model, &pass, targets, scale)?;
    Ok((nll.iter().sum::<f64>() * scale, grads))
}

fn norm_backward(dy: &Matrix, cache: &NormCache, norm: &Norm, grad: &mut Norm) -> Matrix {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            grad.gain[j] += g[j] * xh[j];
            grad.bias[j] += g[j];
            dxhat[j] = g[j] * norm.gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// Reverse-mode gradients of `scale · Σ_i NLL_i` through a cached forward pass.
pub fn backward_pass(model: &MoEModel, pass: &ForwardPass, targets: &[u32], scale: f64) -> Result<GradientBundle> {
    let t = pass.tokens.len();
    if targets.len() != t {
        return Err(Error::Dimension(format!("{} targets for {t} tokens", targets.len())));
    }
    let cfg = &model.config;
    let d = cfg.d_model;
    let p = &model.params;
    let mut g = GradientBundle::zeros_like(model);

    // Output head: dlogits = scale · (softmax − onehot).
    let v = cfg.vocab_size;
    let mut dlogits = Matrix::zeros(t, v);
    for (i, &y) in targets.iter().enumerate() {
        if y as usize >= v {
            return Err(Error::TokenOutOfRange { position: i, token: y, vocab: v });
        }
        let row = pass.logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let out = dlogits.row_mut(i);
        for j in 0..v {
            out[j] = scale * (row[j] - max).exp() / total;
        }
        out[y as usize] -= scale;
    }
    g.params.token_embedding.add_t_matmul(&dlogits, &pass.final_out);
    let dfinal = dlogits.matmul(&p.token_embedding);
    let mut dx = norm_backward(&dfinal, &pass.final_norm, &p.final_norm, &mut g.params.final_norm);

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for (l, (layer, cache)) in p.layers.iter().zip(&pass.layers).enumerate().rev() {
        let grad_layer = &mut g.params.layers[l];
        let n = layer.router.n_active();
        let k = cfg.top_k;

        // Experts and affinities. dx is the gradient w.r.t. the layer output,
        // which flows unchanged into the residual branch h.
        let mut da2 = Matrix::zeros(t, d);
        let mut d_aff = vec![0.0; t * k];
        let mut cursor = vec![0usize; n];
        let mut rows_for_selected = vec![0usize; t * k];
        for i in 0..t {
            for (m, &s) in cache.routing.token_slots(i).iter().enumerate() {
                rows_for_selected[i * k + m] = cursor[s];
                cursor[s] += 1;
            }
        }
        for slot in 0..n {
            let ec = &cache.experts[slot];
            if ec.positions.is_empty() {
                continue;
            }
            let expert = &layer.experts[slot];
            let mut dout = Matrix::zeros(ec.positions.len(), d);
            for (r, (&pos, &a)) in ec.positions.iter().zip(&ec.affinities).enumerate() {
                let dy = dx.row(pos);
                for (o, &v) in dout.row_mut(r).iter_mut().zip(dy) {
                    *o = a * v;
                }
            }
            let mut dhidden = dout.matmul_t(&expert.w_down);
            grad_layer.experts[slot].w_down.add_t_matmul(&ec.hidden, &dout);
            for (dh, &u) in dhidden.data.iter_mut().zip(&ec.pre.data) {
                let sg = sigmoid(u);
                *dh *= sg * (1.0 + u * (1.0 - sg));
            }
            grad_layer.experts[slot].w_up.add_t_matmul(&ec.input, &dhidden);
            let dinput = dhidden.matmul_t(&expert.w_up);
            for (r, &pos) in ec.positions.iter().enumerate() {
                for (o, &v) in da2.row_mut(pos).iter_mut().zip(dinput.row(r)) {
                    *o += v;
                }
            }
        }
        for i in 0..t {
            for (m, &s) in cache.routing.token_slots(i).iter().enumerate() {
                let r = rows_for_selected[i * k + m];
                d_aff[i * k + m] = crate::linalg::dot(dx.row(i), cache.experts[s].output.row(r));
            }
        }

        // Affinity → router probabilities → router logits.
        let mut dlogit = Matrix::zeros(t, n);
        for i in 0..t {
            let probs = cache.routing.probs.row(i);
            let slots = cache.routing.token_slots(i);
            let daff = &d_aff[i * k..(i + 1) * k];
            let mut dprob = vec![0.0; n];
            if cfg.renormalize_topk {
                let total: f64 = slots.iter().map(|&s| probs[s]).sum();
                let affs = cache.routing.token_affinities(i);
                let weighted: f64 = daff.iter().zip(affs).map(|(a, b)| a * b).sum();
                for (m, &s) in slots.iter().enumerate() {
                    dprob[s] = (daff[m] - weighted) / total;
                }
            } else {
                for (m, &s) in slots.iter().enumerate() {
                    dprob[s] = daff[m];
                }
            }
            let inner: f64 = dprob.iter().zip(probs).map(|(a, b)| a * b).sum();
            let out = dlogit.row_mut(i);
            for j in 0..n {
                out[j] = probs[j] * (dprob[j] - inner);
            }
        }
        grad_layer.router.w_gate.add_t_matmul(&cache.moe_input, &dlogit);
        da2.add_assign(&dlogit.matmul_t(&layer.router.w_gate));

        let mut dh = dx;
        dh.add_assign(&norm_backward(&da2, &cache.moe_norm, &layer.moe_norm, &mut grad_layer.moe_norm));

        // Attention.
        grad_layer.w_o.add_t_matmul(&cache.ctx, &dh);
        let dctx = dh.matmul_t(&layer.w_o);
        let dattn = dctx.matmul_t(&cache.v);
        let mut dv = Matrix::zeros(t, d);
        dv.add_t_matmul(&cache.attn, &dctx);
        let mut dscores = Matrix::zeros(t, t);
        for i in 0..t {
            let a = &cache.attn.row(i)[..=i];
            let da = &dattn.row(i)[..=i];
            let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
            let out = dscores.row_mut(i);
            for j in 0..=i {
                out[j] = a[j] * (da[j] - inner) * inv_sqrt_d;
            }
        }
        let dq = dscores.matmul(&cache.k);
        let mut dk = Matrix::zeros(t, d);
        dk.add_t_matmul(&dscores, &cache.q);
        grad_layer.w_q.add_t_matmul(&cache.a1, &dq);
        grad_layer.w_k.add_t_matmul(&cache.a1, &dk);
        grad_layer.w_v.add_t_matmul(&cache.a1, &dv);
        let mut da1 = dq.matmul_t(&layer.w_q);
        da1.add_assign(&dk.matmul_t(&layer.w_k));
        da1.add_assign(&dv.matmul_t(&layer.w_v));
        dh.add_assign(&norm_backward(&da1, &cache.attn_norm, &layer.attn_norm, &mut grad_layer.attn_norm));
        dx = dh;
    }

    for (i, &tok) in pass.tokens.iter().enumerate() {
        let row = dx.row(i);
        for (o, &v) in g.params.token_embedding.row_mut(tok as usize).iter_mut().zip(row) {
            *o += v;
        }
        for (o, &v) in g.params.pos_embedding.row_mut(i).iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, MoEModel};
    use super::*;

    fn tiny(renormalize: bool) -> MoEModel {
        MoEModel::init(ModelConfig {
            vocab_size: 12,
            d_model: 6,
            n_layers: 2,
            n_experts: 4,
            top_k: 2,
            d_hidden: 5,
            seq_len: 8,
            renormalize_topk: renormalize,
            seed: 17,
            ..Default::default()
        })
        .unwrap()
    }

    fn summed_loss(model: &MoEModel, tokens: &[u32], targets: &[u32]) -> f64 {
        let pass = model.forward(tokens).unwrap();
        crate::model::token_nll(&pass.logits, targets).unwrap().iter().sum()
    }

    fn check_all_tensors(renormalize: bool) {
        let model = tiny(renormalize);
        let tokens = [1u32, 4, 7, 2, 9, 11, 3];
        let targets = [4u32, 7, 2, 9, 11, 3, 0];
        let (_, grads) = backward(&model, &tokens, &targets).unwrap();
        let h = 1e-5;
        let n_tensors = model.params.tensors().len();
        let mut worst: f64 = 0.0;
        for ti in 0..n_tensors {
            let len = model.params.tensors()[ti].1.len();
            for idx in [0, len / 2, len - 1] {
                let mut plus = model.clone();
                plus.params.tensors_mut()[ti].1[idx] += h;
                let mut minus = model.clone();
                minus.params.tensors_mut()[ti].1[idx] -= h;
                let fd = (summed_loss(&plus, &tokens, &targets) - summed_loss(&minus, &tokens, &targets)) / (2.0 * h);
                let an = grads.params.tensors()[ti].1[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel <= 1e-4, "tensor {ti} index {idx}: fd {fd} vs analytic {an}");
            }
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_all_tensors(false);
    }

    #[test]
    fn gradients_match_with_renormalized_gate() {
        check_all_tensors(true);
    }

    #[test]
    fn unrouted_expert_gets_zero_gradient() {
        let mut model = tiny(false);
        // Unit norm bias makes every router input sum to d_model, so a
        // uniformly negative column can never win a top-k slot.
        for layer in &mut model.params.layers {
            layer.moe_norm.bias = vec![1.0; 6];
            for r in 0..layer.router.w_gate.rows {
                layer.router.w_gate.set(r, 3, -50.0);
            }
        }
        let tokens = [1u32, 4, 7, 2];
        let (_, grads) = backward(&model, &tokens, &[4, 7, 2, 9]).unwrap();
        let pass = model.forward(&tokens).unwrap();
        for (l, cache) in pass.layers.iter().enumerate() {
            assert!(cache.experts[3].positions.is_empty());
            let e = grads.expert(l, 3);
            assert!(e.w_up.data.iter().chain(&e.w_down.data).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn duplicated_batch_doubles_sum_gradient() {
        let model = tiny(false);
        let tokens = [3u32, 1, 4, 1, 5];
        let targets = [1u32, 4, 1, 5, 9];
        let (_, g) = backward(&model, &tokens, &targets).unwrap();
        let mut twice = GradientBundle::zeros_like(&model);
        twice.add_assign(&g);
        twice.add_assign(&g);
        for ((_, a), (_, b)) in twice.params.tensors().iter().zip(g.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, 2.0 * y);
            }
        }

        let mut mean_model = model.clone();
        mean_model.config.grad_reduction = GradReduction::Mean;
        let (_, gm) = backward(&mean_model, &tokens, &targets).unwrap();
        let (_, gs) = backward(&model, &tokens, &targets).unwrap();
        let a = gm.params.tensors()[2].1[0];
        let b = gs.params.tensors()[2].1[0] / 5.0;
        assert!((a - b).abs() < 1e-12);
    }
}
