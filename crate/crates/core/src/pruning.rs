//! Expert removal and the one-shot, iterative and lottery drivers.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::{run_calibration, CalibrationOptions};
use crate::checkpoint::model_digest;
use crate::corpus::{CalibrationSet, Corpus};
use crate::criteria::{score_table, select_layer_drops, CriterionId, ScoreOptions};
use crate::error::{Error, Result};
use crate::finetune::{finetune_round, FinetuneReport, FinetuneSpec};
use crate::model::MoEModel;
use crate::persistence::sha256_hex;

/// Remove one expert and its router column.
pub fn drop_expert(model: &mut MoEModel, layer: usize, original_id: usize) -> Result<()> {
    let k = model.config.top_k;
    let l = model
        .params
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::Pruning(format!("layer {layer} does not exist")))?;
    let slot = l.router.slot_of(original_id).ok_or_else(|| Error::Pruning(format!("expert {original_id} is not retained in layer {layer}")))?;
    if l.router.n_active() <= k {
        return Err(Error::Pruning(format!("layer {layer} would keep fewer than top_k = {k} experts")));
    }
    l.router.w_gate.remove_column(slot);
    l.router.expert_ids.remove(slot);
    l.experts.remove(slot);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    OneShot,
    Iterative,
    Lottery,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oneshot" | "one-shot" => Ok(Strategy::OneShot),
            "iterative" => Ok(Strategy::Iterative),
            "lottery" => Ok(Strategy::Lottery),
            _ => Err(Error::config("strategy", format!("`{s}` is not one of oneshot, iterative, lottery"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord(pub usize, pub usize, pub usize);

impl DropRecord {
    pub fn round(&self) -> usize {
        self.0
    }
    pub fn layer(&self) -> usize {
        self.1
    }
    pub fn expert(&self) -> usize {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSeeds {
    pub calibration: u64,
    pub reservoir: u64,
    pub random: Option<u64>,
    pub finetune: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub strategy: Strategy,
    /// `None` for random dropping.
    pub criterion: Option<CriterionId>,
    pub sparsity: f64,
    pub rounds: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub drops_per_layer_per_round: usize,
    pub drops: Vec<DropRecord>,
    pub seeds: PlanSeeds,
    pub calset_digest: Option<String>,
    /// Same calibration sequences are reused every round.
    pub calibration_reused_across_rounds: bool,
    pub root_digest: String,
    pub finetune: Option<FinetuneSpec>,
}

impl PruningPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize")
    }

    /// Compact JSON without the strategy and finetune fields, used to compare
    /// drop decisions across strategies.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("plans serialize");
        if let Value::Object(m) = &mut v {
            m.remove("strategy");
            m.remove("finetune");
            if let Some(Value::Object(s)) = m.get_mut("seeds") {
                s.remove("finetune");
            }
        }
        serde_json::to_string(&v).expect("plans serialize")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn dropped(&self, layer: usize) -> BTreeSet<usize> {
        self.drops.iter().filter(|d| d.layer() == layer).map(|d| d.expert()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubnetworkLineage {
    /// Model digests: the root followed by one per round.
    pub checkpoints: Vec<String>,
    /// Score-table digests per round; empty entries for random dropping.
    pub score_tables: Vec<String>,
    pub finetune_reports: Vec<FinetuneReport>,
}

/// Per-layer drop count, which must be integral.
pub fn drops_per_layer(n: usize, sparsity: f64, rounds: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config("sparsity", format!("{sparsity} is not in [0, 1)")));
    }
    if rounds == 0 {
        return Err(Error::config("rounds", "must be at least 1"));
    }
    let total = sparsity * n as f64;
    let per_round = total / rounds as f64;
    let r = per_round.round();
    if (per_round - r).abs() > 1e-9 {
        return Err(Error::config("sparsity", format!("{sparsity} of {n} experts over {rounds} rounds is {per_round} per round, not an integer")));
    }
    Ok(r as usize)
}

/// How experts are chosen each round.
#[derive(Debug, Clone, Copy)]
pub enum Selector {
    Criterion(CriterionId),
    Random(u64),
}

/// Everything a strategy needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct PruneContext<'a> {
    pub calset: Option<&'a CalibrationSet>,
    pub calibration: CalibrationOptions,
    pub scoring: ScoreOptions,
    pub corpus: Option<&'a Corpus>,
    pub finetune: Option<&'a FinetuneSpec>,
}

impl<'a> PruneContext<'a> {
    pub fn new(calset: Option<&'a CalibrationSet>) -> Self {
        PruneContext { calset, calibration: CalibrationOptions::default(), scoring: ScoreOptions::default(), corpus: None, finetune: None }
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: MoEModel,
    pub plan: PruningPlan,
    pub lineage: SubnetworkLineage,
}

fn random_slots(seed: u64, round: usize, layer: usize, n: usize, m: usize) -> Vec<usize> {
    let mix = seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (layer as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut s = sample(&mut rng, n, m).into_vec();
    s.sort_unstable();
    s
}

pub fn run_strategy(model: &MoEModel, strategy: Strategy, selector: Selector, sparsity: f64, rounds: usize, ctx: &PruneContext<'_>) -> Result<PruneOutcome> {
    model.validate()?;
    let rounds = if strategy == Strategy::OneShot { 1 } else { rounds };
    let n = model.config.n_experts;
    if model.layers().iter().any(|l| l.router.n_active() != n) {
        return Err(Error::Pruning("strategies start from an unpruned model".into()));
    }
    let per_round = drops_per_layer(n, sparsity, rounds)?;
    if n - per_round * rounds < model.config.top_k {
        return Err(Error::Pruning(format!("sparsity {sparsity} leaves fewer than top_k = {} experts", model.config.top_k)));
    }
    let ft = if strategy == Strategy::Lottery {
        let spec = ctx.finetune.ok_or_else(|| Error::config("finetune", "lottery needs a finetune spec"))?;
        let corpus = ctx.corpus.ok_or_else(|| Error::config("finetune", "lottery needs the training corpus"))?;
        let calset = ctx.calset.ok_or_else(|| Error::config("calibration", "lottery needs a calibration set"))?;
        Some((spec, corpus, calset))
    } else {
        None
    };
    let mut current = model.clone();
    let root = model_digest(model);
    let mut lineage = SubnetworkLineage { checkpoints: vec![root.clone()], ..Default::default() };
    let mut drops = Vec::new();
    for round in 1..=rounds {
        if per_round > 0 {
            let mut round_drops: Vec<(usize, usize)> = Vec::new();
            match selector {
                Selector::Criterion(id) => {
                    let stats = if id.criterion.needs_stats() {
                        let calset = ctx.calset.ok_or(Error::MissingStats { criterion: id.criterion.name(), missing: "a calibration set" })?;
                        let opts = CalibrationOptions { collect_gradients: id.criterion.needs_gradients(), ..ctx.calibration };
                        Some(run_calibration(&current, calset, &opts)?)
                    } else {
                        None
                    };
                    lineage.score_tables.push(sha256_hex(score_table(&current, stats.as_ref(), id, &ctx.scoring)?.to_csv().as_bytes()));
                    for l in 0..current.n_layers() {
                        let (_, slots) = select_layer_drops(&current, stats.as_ref(), id, l, per_round, &ctx.scoring)?;
                        let ids = &current.layers()[l].router.expert_ids;
                        round_drops.extend(slots.iter().map(|&s| (l, ids[s])));
                    }
                }
                Selector::Random(seed) => {
                    lineage.score_tables.push(String::new());
                    for l in 0..current.n_layers() {
                        let ids = &current.layers()[l].router.expert_ids;
                        round_drops.extend(random_slots(seed, round, l, ids.len(), per_round).into_iter().map(|s| (l, ids[s])));
                    }
                }
            }
            for &(l, id) in &round_drops {
                drop_expert(&mut current, l, id)?;
                drops.push(DropRecord(round, l, id));
            }
        }
        if let Some((spec, corpus, calset)) = ft {
            let (m, report) = finetune_round(&current, corpus, calset, spec, round)?;
            current = m;
            lineage.finetune_reports.push(report);
        }
        lineage.checkpoints.push(model_digest(&current));
    }
    let (criterion, random) = match selector {
        Selector::Criterion(id) => (Some(id), None),
        Selector::Random(s) => (None, Some(s)),
    };
    let plan = PruningPlan {
        strategy,
        criterion,
        sparsity,
        rounds,
        n_layers: model.n_layers(),
        n_experts: n,
        drops_per_layer_per_round: per_round,
        drops,
        seeds: PlanSeeds {
            calibration: ctx.calset.map_or(0, |c| c.seed),
            reservoir: ctx.calibration.reservoir_seed,
            random,
            finetune: ft.map(|(s, _, _)| s.seed),
        },
        calset_digest: ctx.calset.map(|c| c.digest.clone()),
        calibration_reused_across_rounds: true,
        root_digest: root,
        finetune: ft.map(|(s, _, _)| s.clone()),
    };
    Ok(PruneOutcome { model: current, plan, lineage })
}

pub fn one_shot(model: &MoEModel, criterion: CriterionId, sparsity: f64, ctx: &PruneContext<'_>) -> Result<PruneOutcome> {
    run_strategy(model, Strategy::OneShot, Selector::Criterion(criterion), sparsity, 1, ctx)
}

pub fn iterative(model: &MoEModel, criterion: CriterionId, sparsity: f64, rounds: usize, ctx: &PruneContext<'_>) -> Result<PruneOutcome> {
    run_strategy(model, Strategy::Iterative, Selector::Criterion(criterion), sparsity, rounds, ctx)
}

pub fn lottery(model: &MoEModel, criterion: CriterionId, sparsity: f64, rounds: usize, ctx: &PruneContext<'_>) -> Result<PruneOutcome> {
    run_strategy(model, Strategy::Lottery, Selector::Criterion(criterion), sparsity, rounds, ctx)
}

pub fn random_baseline(model: &MoEModel, sparsity: f64, strategy: Strategy, rounds: usize, seed: u64, ctx: &PruneContext<'_>) -> Result<PruneOutcome> {
    run_strategy(model, strategy, Selector::Random(seed), sparsity, rounds, ctx)
}

/// Replay a plan's drops on its root model.
pub fn apply_plan(model: &MoEModel, plan: &PruningPlan) -> Result<MoEModel> {
    if model_digest(model) != plan.root_digest {
        return Err(Error::Pruning("model is not the plan's root".into()));
    }
    let mut m = model.clone();
    for d in &plan.drops {
        drop_expert(&mut m, d.layer(), d.expert())?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agreement {
    BothDrop,
    Disagree,
    BothRetain,
}

impl Agreement {
    pub fn as_str(self) -> &'static str {
        match self {
            Agreement::BothDrop => "both-drop",
            Agreement::Disagree => "disagree",
            Agreement::BothRetain => "both-retain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// `(layer, original expert, class)` in layer-then-expert order.
    pub cells: Vec<(usize, usize, Agreement)>,
    /// Both-drop cells over the drops of the first plan; 1 when neither drops.
    pub agreement: f64,
}

impl Divergence {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,expert_original_id,class\n");
        for (l, e, c) in &self.cells {
            s.push_str(&format!("{l},{e},{}\n", c.as_str()));
        }
        s
    }
}

pub fn plan_divergence(a: &PruningPlan, b: &PruningPlan) -> Result<Divergence> {
    if a.root_digest != b.root_digest {
        return Err(Error::Pruning("plans start from different root models".into()));
    }
    if (a.sparsity - b.sparsity).abs() > 1e-12 || a.n_layers != b.n_layers || a.n_experts != b.n_experts {
        return Err(Error::Pruning("plans differ in sparsity or shape".into()));
    }
    let mut cells = Vec::with_capacity(a.n_layers * a.n_experts);
    let (mut both, mut a_total) = (0usize, 0usize);
    for l in 0..a.n_layers {
        let (da, db) = (a.dropped(l), b.dropped(l));
        a_total += da.len();
        for e in 0..a.n_experts {
            let class = match (da.contains(&e), db.contains(&e)) {
                (true, true) => {
                    both += 1;
                    Agreement::BothDrop
                }
                (false, false) => Agreement::BothRetain,
                _ => Agreement::Disagree,
            };
            cells.push((l, e, class));
        }
    }
    let agreement = if a_total == 0 { 1.0 } else { both as f64 / a_total as f64 };
    Ok(Divergence { cells, agreement })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_calibration_set, synthetic_text};
    use crate::criteria::{Criterion, Direction};
    use crate::model::ModelConfig;

    fn tiny() -> MoEModel {
        MoEModel::init(ModelConfig { d_model: 8, n_layers: 2, n_experts: 8, d_hidden: 6, seq_len: 8, seed: 3, ..Default::default() }).unwrap()
    }

    fn calset() -> CalibrationSet {
        build_calibration_set(&Corpus::from_bytes(synthetic_text(20_000, 2)), 4, 8, 6).unwrap()
    }

    #[test]
    fn drop_removes_router_column_and_keeps_the_rest() {
        let m = tiny();
        let mut d = m.clone();
        drop_expert(&mut d, 0, 3).unwrap();
        assert_eq!(d.layers()[0].router.w_gate.cols, 7);
        assert_eq!(d.layers()[0].router.expert_ids, vec![0, 1, 2, 4, 5, 6, 7]);
        assert_eq!(d.layers()[1], m.layers()[1]);
        assert_eq!(d.params.token_embedding, m.params.token_embedding);
        for s in 0..7 {
            let orig = d.layers()[0].router.expert_ids[s];
            assert_eq!(d.layers()[0].experts[s], m.layers()[0].experts[orig]);
            assert_eq!(d.layers()[0].router.w_gate.column(s), m.layers()[0].router.w_gate.column(orig));
        }
        assert!(drop_expert(&mut d, 0, 3).is_err());
    }

    #[test]
    fn drops_commute() {
        let m = tiny();
        let (mut a, mut b) = (m.clone(), m.clone());
        drop_expert(&mut a, 1, 2).unwrap();
        drop_expert(&mut a, 1, 6).unwrap();
        drop_expert(&mut b, 1, 6).unwrap();
        drop_expert(&mut b, 1, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cannot_drop_below_top_k() {
        let mut m = MoEModel::init(ModelConfig { d_model: 8, n_layers: 1, n_experts: 3, d_hidden: 4, seq_len: 8, ..Default::default() }).unwrap();
        drop_expert(&mut m, 0, 0).unwrap();
        assert!(matches!(drop_expert(&mut m, 0, 1), Err(Error::Pruning(_))));
    }

    #[test]
    fn survivor_logits_are_preserved() {
        let m = tiny();
        let mut d = m.clone();
        drop_expert(&mut d, 0, 5).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let full = m.layers()[0].router.w_gate.transpose();
        let part = d.layers()[0].router.w_gate.transpose();
        for (s, &orig) in d.layers()[0].router.expert_ids.iter().enumerate() {
            assert_eq!(crate::linalg::dot(part.row(s), &x), crate::linalg::dot(full.row(orig), &x));
        }
    }

    #[test]
    fn drop_counts_must_be_integral() {
        assert_eq!(drops_per_layer(8, 0.125, 1).unwrap(), 1);
        assert_eq!(drops_per_layer(8, 0.5, 4).unwrap(), 1);
        assert_eq!(drops_per_layer(8, 0.0, 1).unwrap(), 0);
        assert!(drops_per_layer(8, 0.1, 1).is_err());
        assert!(drops_per_layer(8, 0.5, 3).is_err());
    }

    #[test]
    fn zero_sparsity_is_identity() {
        let m = tiny();
        let cs = calset();
        let out = one_shot(&m, CriterionId::with_default(Criterion::EAN), 0.0, &PruneContext::new(Some(&cs))).unwrap();
        assert_eq!(out.model, m);
        assert!(out.plan.drops.is_empty());
    }

    #[test]
    fn one_shot_drops_uniformly() {
        let m = tiny();
        let cs = calset();
        let out = one_shot(&m, CriterionId::new(Criterion::EWN, Direction::Min), 0.25, &PruneContext::new(Some(&cs))).unwrap();
        assert!(out.model.layers().iter().all(|l| l.router.n_active() == 6));
        assert_eq!(out.plan.drops.len(), 4);
        assert_eq!(apply_plan(&m, &out.plan).unwrap(), out.model);
        out.model.forward(cs.inputs(0)).unwrap();
    }

    #[test]
    fn random_plans_are_reproducible_and_uniform() {
        let m = tiny();
        let ctx = PruneContext::new(None);
        let a = random_baseline(&m, 0.5, Strategy::Iterative, 2, 9, &ctx).unwrap();
        let b = random_baseline(&m, 0.5, Strategy::Iterative, 2, 9, &ctx).unwrap();
        assert_eq!(a.plan.digest(), b.plan.digest());
        for l in 0..2 {
            assert_eq!(a.plan.dropped(l).len(), 4);
        }
    }

    #[test]
    fn divergence_examples() {
        let m = tiny();
        let ctx = PruneContext::new(None);
        let a = random_baseline(&m, 0.5, Strategy::OneShot, 1, 1, &ctx).unwrap().plan;
        let d = plan_divergence(&a, &a).unwrap();
        assert_eq!(d.agreement, 1.0);
        let mut b = a.clone();
        let kept: Vec<BTreeSet<usize>> = (0..2).map(|l| (0..8).filter(|e| !a.dropped(l).contains(e)).collect()).collect();
        b.drops = (0..2).flat_map(|l| kept[l].iter().map(move |&e| DropRecord(1, l, e))).collect();
        let d = plan_divergence(&a, &b).unwrap();
        assert_eq!(d.agreement, 0.0);
        assert!(d.cells.iter().all(|c| c.2 == Agreement::Disagree));
        let mut c = a.clone();
        c.root_digest = "x".into();
        assert!(plan_divergence(&a, &c).is_err());
    }
}
