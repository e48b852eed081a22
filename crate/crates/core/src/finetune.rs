//! Budgeted next-token finetuning with AdamW and cosine decay, plus the
//! pretraining loop that shares it.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CalibrationSet, Corpus, WindowStream};
use crate::error::{Error, Result};
use crate::model::{backward_pass, token_nll, GradientBundle, MoEModel, ParamKind, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    #[default]
    AllParameters,
    RouterOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSpec {
    /// Tokens for round 1.
    pub base_budget: u64,
    pub doubling: bool,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub scope: Scope,
    pub seed: u64,
    pub allow_reuse: bool,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec { base_budget: 50_000, doubling: true, max_lr: 1e-3, weight_decay: 0.01, batch_size: 8, scope: Scope::AllParameters, seed: 0, allow_reuse: false }
    }
}

impl FinetuneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::config("max_lr", "must be positive and finite"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Token budget of a 1-based round.
    pub fn round_budget(&self, round: usize) -> u64 {
        if self.doubling {
            self.base_budget.saturating_mul(1u64 << (round.max(1) - 1).min(63))
        } else {
            self.base_budget
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64, scope: Scope) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for ((((kind, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
            if scope == Scope::RouterOnly && kind != ParamKind::Router {
                continue;
            }
            let decay = if kind == ParamKind::Norm { 0.0 } else { wd };
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + eps) + decay * p[i]);
            }
        }
    }
}

/// Cosine decay from `max_lr` to zero over `total` steps, after an optional
/// linear warmup.
pub fn learning_rate(max_lr: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return max_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = (step - warmup) as f64 / span as f64;
    max_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub tokens: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    pub expert_ids: Vec<usize>,
    pub loads: Vec<u64>,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub round: usize,
    pub budget: u64,
    pub steps: usize,
    pub tokens_consumed: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub initial_perplexity: f64,
    pub final_perplexity: f64,
    pub load_cv_before: Vec<f64>,
    pub load_cv_after: Vec<f64>,
    pub corpus_reused: bool,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

impl FinetuneReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,tokens,loss,lr\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{:?},{:?}\n", p.step, p.tokens, p.loss, p.lr));
        }
        s
    }
}

/// Coefficient of variation (population std over mean); 0 for an empty or
/// all-zero load vector.
pub fn coefficient_of_variation(loads: &[u64]) -> f64 {
    if loads.is_empty() {
        return 0.0;
    }
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<u64>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = loads.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Perplexity on the calibration set and the per-layer expert loads.
pub fn calibration_summary(model: &MoEModel, calset: &CalibrationSet) -> Result<(f64, Vec<LayerLoad>)> {
    let mut loads: Vec<Vec<u64>> = model.layers().iter().map(|l| vec![0; l.router.n_active()]).collect();
    let passes: Vec<Result<(f64, Vec<Vec<u64>>)>> = (0..calset.len())
        .into_par_iter()
        .map(|i| {
            let pass = model.forward(calset.inputs(i))?;
            let nll: f64 = token_nll(&pass.logits, calset.targets(i))?.iter().sum();
            let counts = pass.layers.iter().map(|lc| lc.experts.iter().map(|e| e.positions.len() as u64).collect()).collect();
            Ok((nll, counts))
        })
        .collect();
    let mut total = 0.0;
    for r in passes {
        let (nll, counts) = r?;
        total += nll;
        for (acc, c) in loads.iter_mut().zip(counts) {
            acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
    }
    let ppl = (total / calset.token_count() as f64).exp();
    let layer_loads = loads
        .into_iter()
        .enumerate()
        .map(|(l, loads)| LayerLoad { layer: l, expert_ids: model.layers()[l].router.expert_ids.clone(), cv: coefficient_of_variation(&loads), loads })
        .collect();
    Ok((ppl, layer_loads))
}

pub fn load_distribution(model: &MoEModel, calset: &CalibrationSet) -> Result<Vec<LayerLoad>> {
    Ok(calibration_summary(model, calset)?.1)
}

/// One optimizer step's worth of data and gradients.
fn batch_gradient(model: &MoEModel, windows: &[Vec<u32>], step: usize) -> Result<(f64, GradientBundle)> {
    let tokens: usize = windows.iter().map(|w| w.len() - 1).sum();
    let scale = 1.0 / tokens as f64;
    let parts: Vec<Result<(f64, GradientBundle)>> = windows
        .par_iter()
        .map(|w| {
            let x = &w[..w.len() - 1];
            let y = &w[1..];
            let pass = model.forward(x)?;
            let nll: f64 = token_nll(&pass.logits, y)?.iter().sum();
            Ok((nll, backward_pass(model, &pass, y, scale)?))
        })
        .collect();
    let mut loss = 0.0;
    let mut acc: Option<GradientBundle> = None;
    for p in parts {
        let (nll, g) = p?;
        loss += nll;
        match &mut acc {
            Some(a) => a.add_assign(&g),
            None => acc = Some(g),
        }
    }
    let loss = loss / tokens as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    Ok((loss, acc.expect("non-empty batch")))
}

#[derive(Debug, Clone)]
pub struct TrainLoop {
    pub steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub scope: Scope,
}

/// Run `steps` AdamW steps with a fresh optimizer. Returns the loss curve.
pub fn train_steps(model: &mut MoEModel, stream: &mut WindowStream<'_>, cfg: &TrainLoop) -> Result<Vec<CurvePoint>> {
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let seq_len = model.config.seq_len as u64;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let windows = (0..cfg.batch_size).map(|_| stream.next_window()).collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_gradient(model, &windows, step)?;
        let lr = learning_rate(cfg.max_lr, step, cfg.steps, cfg.warmup);
        opt.update(&mut model.params, &grads.params, lr, cfg.scope);
        curve.push(CurvePoint { step, tokens: (step as u64 + 1) * cfg.batch_size as u64 * seq_len, loss, lr });
    }
    Ok(curve)
}

pub fn steps_for_budget(budget: u64, batch_size: usize, seq_len: usize) -> usize {
    budget.div_ceil((batch_size * seq_len) as u64) as usize
}

/// One budgeted finetuning round (1-based). Training windows avoid the
/// calibration windows and the evaluation tail.
pub fn finetune_round(model: &MoEModel, corpus: &Corpus, calset: &CalibrationSet, spec: &FinetuneSpec, round: usize) -> Result<(MoEModel, FinetuneReport)> {
    spec.validate()?;
    let seq_len = model.config.seq_len;
    if calset.seq_len != seq_len {
        return Err(Error::config("seq_len", format!("calibration windows are {} tokens, model expects {seq_len}", calset.seq_len)));
    }
    let budget = spec.round_budget(round);
    let steps = steps_for_budget(budget, spec.batch_size, seq_len);
    let (ppl0, loads0) = calibration_summary(model, calset)?;
    let mut out = model.clone();
    let mut curve = Vec::new();
    let mut reused = false;
    if steps > 0 {
        let excluded: BTreeSet<usize> = calset.slot_indices();
        let mut stream = WindowStream::new(corpus, seq_len, &excluded, spec.seed.wrapping_add(round as u64), spec.allow_reuse)?;
        let need = steps * spec.batch_size;
        if need > stream.capacity() && !spec.allow_reuse {
            return Err(Error::CorpusTooSmall { required: Corpus::required_len(need + excluded.len(), seq_len) * 10 / 9, available: corpus.len() });
        }
        let cfg = TrainLoop { steps, batch_size: spec.batch_size, max_lr: spec.max_lr, warmup: 0, weight_decay: spec.weight_decay, scope: spec.scope };
        curve = train_steps(&mut out, &mut stream, &cfg).map_err(|e| Error::RoundDiverged { round, source: Box::new(e) })?;
        reused = stream.reused();
    }
    let (ppl1, loads1) = if steps > 0 { calibration_summary(&out, calset)? } else { (ppl0, loads0.clone()) };
    let report = FinetuneReport {
        round,
        budget,
        steps,
        tokens_consumed: (steps * spec.batch_size * seq_len) as u64,
        initial_loss: curve.first().map(|c| c.loss),
        final_loss: curve.last().map(|c| c.loss),
        initial_perplexity: ppl0,
        final_perplexity: ppl1,
        load_cv_before: loads0.iter().map(|l| l.cv).collect(),
        load_cv_after: loads1.iter().map(|l| l.cv).collect(),
        corpus_reused: reused,
        curve,
    };
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: u64,
    pub perplexity: f64,
}

/// Independent single-round finetunes from the same start, one per budget.
pub fn budget_sufficiency_sweep(
    model: &MoEModel,
    corpus: &Corpus,
    calset: &CalibrationSet,
    spec: &FinetuneSpec,
    budgets: &[u64],
    evaluate: impl Fn(&MoEModel) -> Result<f64>,
) -> Result<Vec<SweepPoint>> {
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("budgets", "must be ascending"));
    }
    budgets
        .iter()
        .map(|&b| {
            let s = FinetuneSpec { base_budget: b, doubling: false, ..spec.clone() };
            let (m, _) = finetune_round(model, corpus, calset, &s, 1)?;
            Ok(SweepPoint { budget: b, perplexity: evaluate(&m)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub tokens: u64,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec { tokens: 2_000_000, batch_size: 8, max_lr: 3e-3, warmup_steps: 50, weight_decay: 0.01, seed: 0 }
    }
}

/// Pretrain from the current weights on the training range, reusing windows
/// across epochs as needed.
pub fn pretrain(model: &mut MoEModel, corpus: &Corpus, spec: &TrainSpec) -> Result<Vec<CurvePoint>> {
    if spec.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if !(spec.max_lr > 0.0) {
        return Err(Error::config("max_lr", "must be positive"));
    }
    let seq_len = model.config.seq_len;
    let steps = steps_for_budget(spec.tokens, spec.batch_size, seq_len);
    let mut stream = WindowStream::new(corpus, seq_len, &BTreeSet::new(), spec.seed, true)?;
    let cfg = TrainLoop { steps, batch_size: spec.batch_size, max_lr: spec.max_lr, warmup: spec.warmup_steps.min(steps), weight_decay: spec.weight_decay, scope: Scope::AllParameters };
    train_steps(model, &mut stream, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_calibration_set, synthetic_text};
    use crate::model::ModelConfig;

    fn setup() -> (MoEModel, Corpus, CalibrationSet) {
        let m = MoEModel::init(ModelConfig { d_model: 8, n_layers: 2, n_experts: 4, d_hidden: 8, seq_len: 16, seed: 2, ..Default::default() }).unwrap();
        let corpus = Corpus::from_bytes(synthetic_text(40_000, 3));
        let cs = build_calibration_set(&corpus, 4, 16, 1).unwrap();
        (m, corpus, cs)
    }

    #[test]
    fn budget_schedule_doubles() {
        let s = FinetuneSpec::default();
        assert_eq!(s.round_budget(1), 50_000);
        assert_eq!(s.round_budget(3), 200_000);
        assert_eq!(FinetuneSpec { doubling: false, ..s }.round_budget(3), 50_000);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(learning_rate(1.0, 0, 10, 0), 1.0);
        assert!((learning_rate(1.0, 5, 10, 0) - 0.5).abs() < 1e-15);
        assert!(learning_rate(1.0, 9, 10, 0) > 0.0);
        assert!((learning_rate(2.0, 1, 10, 4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_leaves_model_unchanged() {
        let (m, corpus, cs) = setup();
        let spec = FinetuneSpec { base_budget: 0, ..Default::default() };
        let (out, rep) = finetune_round(&m, &corpus, &cs, &spec, 1).unwrap();
        assert_eq!(out, m);
        assert_eq!(rep.steps, 0);
        assert_eq!(rep.initial_perplexity, rep.final_perplexity);
        assert_eq!(rep.load_cv_before, rep.load_cv_after);
    }

    #[test]
    fn finetune_is_deterministic_and_keeps_topology() {
        let (m, corpus, cs) = setup();
        let spec = FinetuneSpec { base_budget: 300, batch_size: 2, ..Default::default() };
        let (a, ra) = finetune_round(&m, &corpus, &cs, &spec, 2).unwrap();
        let (b, _) = finetune_round(&m, &corpus, &cs, &spec, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.identity_map(), m.identity_map());
        assert_eq!(ra.budget, 600);
        assert_eq!(ra.steps, 19);
        assert_eq!(ra.tokens_consumed, 19 * 2 * 16);
        assert!(ra.tokens_consumed <= ra.budget + 2 * 16);
        assert!(ra.final_loss.unwrap().is_finite());
        assert_ne!(a, m);
    }

    #[test]
    fn router_only_scope_touches_only_router() {
        let (m, corpus, cs) = setup();
        let spec = FinetuneSpec { base_budget: 64, batch_size: 2, scope: Scope::RouterOnly, ..Default::default() };
        let (a, _) = finetune_round(&m, &corpus, &cs, &spec, 1).unwrap();
        for ((k, x), (_, y)) in a.params.tensors().into_iter().zip(m.params.tensors()) {
            if k == ParamKind::Router {
                assert_ne!(x, y);
            } else {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn fresh_optimizer_each_round() {
        let (m, corpus, cs) = setup();
        let spec = FinetuneSpec { base_budget: 32, batch_size: 2, doubling: false, ..Default::default() };
        let (r1, _) = finetune_round(&m, &corpus, &cs, &spec, 1).unwrap();
        let (r2, _) = finetune_round(&r1, &corpus, &cs, &spec, 2).unwrap();
        // a manual step from r1 with a brand-new optimizer reproduces round 2
        let mut manual = r1.clone();
        let excluded = cs.slot_indices();
        let mut stream = WindowStream::new(&corpus, 16, &excluded, spec.seed + 2, false).unwrap();
        let cfg = TrainLoop { steps: 1, batch_size: 2, max_lr: spec.max_lr, warmup: 0, weight_decay: spec.weight_decay, scope: spec.scope };
        train_steps(&mut manual, &mut stream, &cfg).unwrap();
        assert_eq!(manual, r2);
    }

    #[test]
    fn insufficient_corpus_without_reuse_is_rejected() {
        let (m, corpus, cs) = setup();
        let spec = FinetuneSpec { base_budget: 10_000_000, ..Default::default() };
        assert!(matches!(finetune_round(&m, &corpus, &cs, &spec, 1), Err(Error::CorpusTooSmall { .. })));
    }

    #[test]
    fn load_cv_examples() {
        assert_eq!(coefficient_of_variation(&[5, 5, 5]), 0.0);
        assert_eq!(coefficient_of_variation(&[7]), 0.0);
        assert!((coefficient_of_variation(&[1, 3]) - 0.5).abs() < 1e-15);
        let (m, _, cs) = setup();
        let mk = MoEModel::init(ModelConfig { top_k: 4, ..m.config.clone() }).unwrap();
        assert!(load_distribution(&mk, &cs).unwrap().iter().all(|l| l.cv == 0.0));
    }

    #[test]
    fn pretraining_reduces_loss() {
        let (mut m, corpus, _) = setup();
        let curve = pretrain(&mut m, &corpus, &TrainSpec { tokens: 16 * 4 * 60, batch_size: 4, max_lr: 1e-2, warmup_steps: 5, ..Default::default() }).unwrap();
        let head: f64 = curve[..5].iter().map(|c| c.loss).sum::<f64>() / 5.0;
        let tail: f64 = curve[curve.len() - 5..].iter().map(|c| c.loss).sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
