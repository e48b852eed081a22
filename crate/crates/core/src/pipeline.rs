//! Run configuration and the end-to-end train, calibrate, prune, evaluate
//! pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::calibration::{run_calibration, stats_to_container, CalibrationOptions, RESERVOIR_CAP};
use crate::checkpoint::{model_digest, model_to_container, quantize_to_storage, Storage, TOOL_VERSION};
use crate::corpus::{build_calibration_set, synthetic_text, Corpus, DataRegistry};
use crate::criteria::{score_table, Criterion, CriterionId, Direction, OutlierOrientation, ScoreOptions};
use crate::error::{Error, Result};
use crate::eval::{evaluate, single_expert_ablation, summary_json, EvalSplit, Manifest, ReportSet};
use crate::finetune::{load_distribution, pretrain, FinetuneSpec, LayerLoad, TrainSpec};
use crate::model::{ModelConfig, MoEModel};
use crate::pruning::{one_shot, plan_divergence, run_strategy, PruneContext, Selector, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Raw byte corpus. When absent a synthetic corpus is generated.
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { path: None, synthetic_bytes: 2 << 20, synthetic_seed: 7 }
    }
}

impl CorpusConfig {
    pub fn load(&self, base: &Path) -> Result<Corpus> {
        match &self.path {
            Some(p) => Corpus::load(&base.join(p)),
            None => Ok(Corpus::from_bytes(synthetic_text(self.synthetic_bytes, self.synthetic_seed))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub sequences: usize,
    pub seed: u64,
    pub reservoir_cap: usize,
    pub reservoir_seed: u64,
    pub outlier_orientation: OutlierOrientation,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { sequences: 64, seed: 0, reservoir_cap: RESERVOIR_CAP, reservoir_seed: CalibrationOptions::default().reservoir_seed, outlier_orientation: OutlierOrientation::PerDimension }
    }
}

impl CalibrationConfig {
    pub fn options(&self, collect_gradients: bool) -> CalibrationOptions {
        CalibrationOptions { collect_gradients, reservoir_cap: self.reservoir_cap, reservoir_seed: self.reservoir_seed, ..CalibrationOptions::default() }
    }

    pub fn scoring(&self) -> ScoreOptions {
        ScoreOptions { outlier_orientation: self.outlier_orientation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub strategy: Strategy,
    /// One of the sixteen criterion names, or "random".
    pub criterion: String,
    pub direction: Option<Direction>,
    pub sparsity: f64,
    pub rounds: usize,
    pub random_seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { strategy: Strategy::OneShot, criterion: "EAN".into(), direction: None, sparsity: 0.5, rounds: 4, random_seed: 0 }
    }
}

impl PruneConfig {
    pub fn selector(&self) -> Result<Selector> {
        if self.criterion.eq_ignore_ascii_case("random") {
            return Ok(Selector::Random(self.random_seed));
        }
        let c: Criterion = self.criterion.parse()?;
        Ok(Selector::Criterion(CriterionId::new(c, self.direction.unwrap_or(c.default_direction()))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_windows: Option<usize>,
    pub ablation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_windows: Some(64), ablation: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub storage: Storage,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub calibration: CalibrationConfig,
    pub prune: PruneConfig,
    pub finetune: FinetuneSpec,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.finetune.validate()?;
        self.prune.selector()?;
        if self.calibration.sequences == 0 {
            return Err(Error::config("calibration.sequences", "must be at least 1"));
        }
        crate::pruning::drops_per_layer(self.model.n_experts, self.prune.sparsity, if self.prune.strategy == Strategy::OneShot { 1 } else { self.prune.rounds })?;
        Ok(())
    }
}

fn loads_csv(tag: &str, loads: &[LayerLoad], out: &mut String) {
    for l in loads {
        for (id, v) in l.expert_ids.iter().zip(&l.loads) {
            out.push_str(&format!("{tag},{},{id},{v},{:?}\n", l.layer, l.cv));
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub base: MoEModel,
    pub pruned: MoEModel,
    pub base_perplexity: f64,
    pub pruned_perplexity: f64,
}

/// Train, calibrate, prune and evaluate, writing every artifact to `out`.
/// Relative corpus paths resolve against `base_dir`.
pub fn run_pipeline(config: &RunConfig, base_dir: &Path, out: &Path) -> Result<PipelineOutput> {
    config.validate()?;
    let corpus = config.corpus.load(base_dir)?;
    let seq_len = config.model.seq_len;
    let mut reports = ReportSet::new();
    reports.add("config.resolved.toml", config.to_toml());

    let mut model = MoEModel::init(config.model.clone())?;
    let curve = pretrain(&mut model, &corpus, &config.train)?;
    quantize_to_storage(&mut model, config.storage);
    let mut registry = DataRegistry::default();
    registry.register(corpus.digest(), "training", corpus.train_range());
    let mut curve_csv = String::from("step,tokens,loss,lr\n");
    for p in &curve {
        curve_csv.push_str(&format!("{},{},{:?},{:?}\n", p.step, p.tokens, p.loss, p.lr));
    }
    reports.add("train_curve.csv", curve_csv);
    reports.add("base.moel", model_to_container(&model, config.storage).encode()?);

    let calset = build_calibration_set(&corpus, config.calibration.sequences, seq_len, config.calibration.seed)?;
    for r in calset.byte_ranges() {
        registry.register(corpus.digest(), "calibration", r);
    }
    let selector = config.prune.selector()?;
    let stats = run_calibration(&model, &calset, &config.calibration.options(true))?;
    reports.add("base_stats.moel", stats_to_container(&stats).encode()?);
    let scoring = config.calibration.scoring();
    if let Selector::Criterion(id) = selector {
        let table = score_table(&model, Some(&stats), id, &scoring)?;
        reports.add("scores.csv", table.to_csv());
        reports.add("scores.json", table.to_json() + "\n");
    }

    let mut ctx = PruneContext::new(Some(&calset));
    ctx.calibration = config.calibration.options(false);
    ctx.scoring = scoring;
    ctx.corpus = Some(&corpus);
    ctx.finetune = Some(&config.finetune);
    let outcome = run_strategy(&model, config.prune.strategy, selector, config.prune.sparsity, config.prune.rounds, &ctx)?;
    let mut pruned = outcome.model.clone();
    quantize_to_storage(&mut pruned, config.storage);
    reports.add("pruned.moel", model_to_container(&pruned, config.storage).encode()?);
    reports.add("plan.json", outcome.plan.to_json() + "\n");
    reports.add_json("lineage.json", &outcome.lineage);
    for r in &outcome.lineage.finetune_reports {
        reports.add(format!("finetune_round{}_curve.csv", r.round), r.curve_csv());
    }
    if config.prune.strategy != Strategy::OneShot {
        if let Selector::Criterion(id) = selector {
            let reference = one_shot(&model, id, config.prune.sparsity, &ctx)?;
            let div = plan_divergence(&reference.plan, &outcome.plan)?;
            reports.add("divergence_oneshot.csv", div.to_csv());
        }
    }

    let split = EvalSplit::from_corpus(&corpus, seq_len, config.eval.max_windows)?;
    let base_eval = evaluate(&model, &split, Some(&registry))?;
    let pruned_eval = evaluate(&pruned, &split, Some(&registry))?;
    reports.add_json("eval.json", &json!({ "base": base_eval, "pruned": pruned_eval }));

    let mut loads = String::from("model,layer,expert_original_id,load,cv\n");
    loads_csv("base", &load_distribution(&model, &calset)?, &mut loads);
    loads_csv("pruned", &load_distribution(&pruned, &calset)?, &mut loads);
    reports.add("loads.csv", loads);

    if config.eval.ablation {
        reports.add("ablation.csv", single_expert_ablation(&model, &split)?.to_csv());
    }

    let criterion = match selector {
        Selector::Criterion(id) => json!(id),
        Selector::Random(seed) => json!({ "name": "random", "seed": seed }),
    };
    reports.add_json(
        "summary.json",
        &summary_json(
            TOOL_VERSION,
            json!({
                "strategy": config.prune.strategy,
                "criterion": criterion,
                "sparsity": config.prune.sparsity,
                "base_model": model_digest(&model),
                "pruned_model": model_digest(&pruned),
                "plan": outcome.plan.digest(),
                "base_perplexity": base_eval.perplexity,
                "pruned_perplexity": pruned_eval.perplexity,
            }),
        ),
    );
    let manifest = reports.write(out)?;
    Ok(PipelineOutput { manifest, base: model, pruned, base_perplexity: base_eval.perplexity, pruned_perplexity: pruned_eval.perplexity })
}
