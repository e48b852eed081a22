use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use moelab::calibration::{run_calibration, stats_from_container, stats_to_container};
use moelab::checkpoint::{load_model_with_storage, model_digest, model_to_container, quantize_to_storage, Storage, TOOL_VERSION};
use moelab::corpus::{build_calibration_set, synthetic_text, Corpus};
use moelab::criteria::{score_table, Criterion, CriterionId, Direction};
use moelab::eval::{evaluate, single_expert_ablation, EvalSplit, ReportSet};
use moelab::finetune::{finetune_round, pretrain, FinetuneSpec, Scope};
use moelab::persistence::{write_atomic, Container};
use moelab::pipeline::{run_pipeline, CalibrationConfig, RunConfig};
use moelab::pruning::{plan_divergence, run_strategy, PruneContext, PruningPlan, Selector, Strategy};
use moelab::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "moelab", version, about = "Expert pruning for small mixture-of-experts language models")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "MOELAB_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CalibrationArgs {
    /// Calibration sequences drawn from the corpus.
    #[arg(long, default_value_t = 64)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    calibration_seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a base checkpoint from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect calibration statistics for a checkpoint.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cal: CalibrationArgs,
        /// Skip gradient accumulation.
        #[arg(long)]
        no_gradients: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every retained expert under one criterion.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, value_parser = PossibleValuesParser::new(Criterion::names()).map(|s| s.parse::<Criterion>().unwrap()), ignore_case = true)]
        criterion: Criterion,
        #[arg(long, value_parser = ["min", "max"])]
        direction: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a pruning strategy.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_parser = ["oneshot", "iterative", "lottery"])]
        strategy: String,
        #[arg(long, value_parser = PossibleValuesParser::new(criterion_or_random()), ignore_case = true)]
        criterion: String,
        #[arg(long, value_parser = ["min", "max"])]
        direction: Option<String>,
        #[arg(long)]
        sparsity: f64,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cal: CalibrationArgs,
        /// Run config supplying the finetune section for lottery.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Budgeted finetuning of a checkpoint.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        budget: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long)]
        router_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cal: CalibrationArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity on the held-out tail.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_windows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity with each single expert removed.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_windows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Agreement between two plans.
    Compare {
        #[arg(long)]
        plan_a: PathBuf,
        #[arg(long)]
        plan_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, calibrate, prune and evaluate.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deterministic synthetic text corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 2 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn criterion_or_random() -> Vec<&'static str> {
    let mut v = Criterion::names();
    v.push("random");
    v
}

fn parse_direction(d: &Option<String>) -> Result<Option<Direction>, Error> {
    d.as_deref().map(str::parse).transpose()
}

fn run_record(command: &str, args: Value) -> Value {
    json!({ "tool_version": TOOL_VERSION, "command": command, "args": args })
}

fn load_corpus(p: &Path) -> Result<Corpus, Error> {
    Corpus::load(p)
}

fn save_model_file(reports: &mut ReportSet, name: &str, model: &moelab::model::MoEModel, storage: Storage) -> Result<(), Error> {
    reports.add(name, model_to_container(model, storage).encode()?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut reports = ReportSet::new();
    let out: PathBuf;
    match cli.command {
        Command::Train { config, out: o } => {
            out = o;
            let cfg = RunConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let corpus = cfg.corpus.load(base)?;
            let mut model = moelab::model::MoEModel::init(cfg.model.clone())?;
            let curve = pretrain(&mut model, &corpus, &cfg.train)?;
            quantize_to_storage(&mut model, cfg.storage);
            let mut csv = String::from("step,tokens,loss,lr\n");
            for p in &curve {
                csv.push_str(&format!("{},{},{:?},{:?}\n", p.step, p.tokens, p.loss, p.lr));
            }
            log::info!("trained {} steps, final loss {:.4}", curve.len(), curve.last().map_or(f64::NAN, |c| c.loss));
            reports.add("train_curve.csv", csv);
            reports.add("config.resolved.toml", cfg.to_toml());
            save_model_file(&mut reports, "model.moel", &model, cfg.storage)?;
            reports.add_json("run.json", &run_record("train", json!({ "config": config })));
        }
        Command::Calibrate { model, corpus, cal, no_gradients, out: o } => {
            out = o;
            let (m, _) = load_model_with_storage(&model)?;
            let c = load_corpus(&corpus)?;
            let cs = build_calibration_set(&c, cal.sequences, m.config.seq_len, cal.calibration_seed)?;
            let cc = CalibrationConfig { sequences: cal.sequences, seed: cal.calibration_seed, ..Default::default() };
            let stats = run_calibration(&m, &cs, &cc.options(!no_gradients))?;
            reports.add("stats.moel", stats_to_container(&stats).encode()?);
            reports.add_json(
                "run.json",
                &run_record("calibrate", json!({ "model": model, "corpus": corpus, "sequences": cal.sequences, "calibration_seed": cal.calibration_seed, "gradients": !no_gradients, "calset_digest": cs.digest })),
            );
        }
        Command::Score { model, stats, criterion, direction, out: o } => {
            out = o;
            let (m, _) = load_model_with_storage(&model)?;
            let st = stats.as_ref().map(|p| Container::load(p).and_then(|c| stats_from_container(&c))).transpose()?;
            let id = CriterionId::new(criterion, parse_direction(&direction)?.unwrap_or(criterion.default_direction()));
            let table = score_table(&m, st.as_ref(), id, &Default::default())?;
            println!("criterion {} direction {}", id.criterion, id.direction);
            reports.add("scores.csv", table.to_csv());
            reports.add("scores.json", table.to_json() + "\n");
            reports.add_json("run.json", &run_record("score", json!({ "model": model, "stats": stats, "criterion": id })));
        }
        Command::Prune { model, corpus, strategy, criterion, direction, sparsity, rounds, seed, cal, config, out: o } => {
            out = o;
            let (m, storage) = load_model_with_storage(&model)?;
            let strategy: Strategy = strategy.parse()?;
            let selector = if criterion.eq_ignore_ascii_case("random") {
                Selector::Random(seed)
            } else {
                let c: Criterion = criterion.parse()?;
                Selector::Criterion(CriterionId::new(c, parse_direction(&direction)?.unwrap_or(c.default_direction())))
            };
            let finetune = match &config {
                Some(p) => RunConfig::load(p)?.finetune,
                None => FinetuneSpec::default(),
            };
            let c = corpus.as_ref().map(|p| load_corpus(p)).transpose()?;
            let cs = c.as_ref().map(|c| build_calibration_set(c, cal.sequences, m.config.seq_len, cal.calibration_seed)).transpose()?;
            let mut ctx = PruneContext::new(cs.as_ref());
            ctx.corpus = c.as_ref();
            ctx.finetune = Some(&finetune);
            let outcome = run_strategy(&m, strategy, selector, sparsity, rounds, &ctx)?;
            let mut pruned = outcome.model;
            quantize_to_storage(&mut pruned, storage);
            if let Selector::Criterion(id) = selector {
                println!("criterion {} direction {}", id.criterion, id.direction);
            }
            save_model_file(&mut reports, "model.moel", &pruned, storage)?;
            reports.add("plan.json", outcome.plan.to_json() + "\n");
            reports.add_json("lineage.json", &outcome.lineage);
            reports.add_json(
                "run.json",
                &run_record(
                    "prune",
                    json!({ "model": model, "corpus": corpus, "strategy": strategy, "criterion": outcome.plan.criterion, "random_seed": outcome.plan.seeds.random,
                            "sparsity": sparsity, "rounds": rounds, "sequences": cal.sequences, "calibration_seed": cal.calibration_seed, "finetune": finetune,
                            "input_digest": model_digest(&m), "output_digest": model_digest(&pruned) }),
                ),
            );
        }
        Command::Finetune { model, corpus, budget, lr, batch_size, router_only, seed, cal, out: o } => {
            out = o;
            let (m, storage) = load_model_with_storage(&model)?;
            let c = load_corpus(&corpus)?;
            let cs = build_calibration_set(&c, cal.sequences, m.config.seq_len, cal.calibration_seed)?;
            let spec = FinetuneSpec {
                base_budget: budget,
                doubling: false,
                max_lr: lr,
                batch_size,
                scope: if router_only { Scope::RouterOnly } else { Scope::AllParameters },
                seed,
                ..Default::default()
            };
            let (mut tuned, report) = finetune_round(&m, &c, &cs, &spec, 1)?;
            quantize_to_storage(&mut tuned, storage);
            save_model_file(&mut reports, "model.moel", &tuned, storage)?;
            reports.add("loss_curve.csv", report.curve_csv());
            reports.add_json("finetune_report.json", &report);
            reports.add_json("run.json", &run_record("finetune", json!({ "model": model, "corpus": corpus, "spec": spec, "sequences": cal.sequences, "calibration_seed": cal.calibration_seed })));
        }
        Command::Eval { model, corpus, max_windows, out: o } => {
            out = o;
            let (m, _) = load_model_with_storage(&model)?;
            let split = EvalSplit::from_corpus(&load_corpus(&corpus)?, m.config.seq_len, max_windows)?;
            let r = evaluate(&m, &split, None)?;
            println!("perplexity {:.6}", r.perplexity);
            reports.add_json("eval.json", &r);
            reports.add_json("run.json", &run_record("eval", json!({ "model": model, "corpus": corpus, "max_windows": max_windows })));
        }
        Command::Ablate { model, corpus, max_windows, out: o } => {
            out = o;
            let (m, _) = load_model_with_storage(&model)?;
            let split = EvalSplit::from_corpus(&load_corpus(&corpus)?, m.config.seq_len, max_windows)?;
            let grid = single_expert_ablation(&m, &split)?;
            reports.add("ablation.csv", grid.to_csv());
            reports.add_json("run.json", &run_record("ablate", json!({ "model": model, "corpus": corpus, "max_windows": max_windows })));
        }
        Command::Compare { plan_a, plan_b, out: o } => {
            out = o;
            let read = |p: &Path| -> Result<PruningPlan, Error> {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            };
            let d = plan_divergence(&read(&plan_a)?, &read(&plan_b)?)?;
            println!("agreement {:.6}", d.agreement);
            reports.add("divergence.csv", d.to_csv());
            reports.add_json("divergence.json", &json!({ "agreement": d.agreement }));
            reports.add_json("run.json", &run_record("compare", json!({ "plan_a": plan_a, "plan_b": plan_b })));
        }
        Command::Pipeline { config, out: o } => {
            let cfg = RunConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let result = run_pipeline(&cfg, base, &o)?;
            println!("base perplexity {:.6}, pruned perplexity {:.6}", result.base_perplexity, result.pruned_perplexity);
            return Ok(());
        }
        Command::SynthCorpus { bytes, seed, out } => {
            write_atomic(&out, &synthetic_text(bytes, seed))?;
            return Ok(());
        }
    }
    let manifest = reports.write(&out)?;
    log::info!("wrote {} files to {}", manifest.files.len() + 1, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Validation | ErrorClass::Io => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}
