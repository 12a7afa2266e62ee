//! Command-line front end: pretrain, continual, diagnose and report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterStack};
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diagnostics::{diagnose, probe_instance, ConflictReport};
use crate::error::{LabError, LabResult};
use crate::harness::{
    compute_acc, compute_fgt, continual_tune, reverse_direction_run, AccuracyMatrix, RetentionRecord,
    Strategy, TuneConfig,
};
use crate::tasks::{generate_task, inverted_generation, task_sequence, Lexicon, TaskData};
use crate::tensor::TensorError;
use crate::train::{pretrain_backbone, Corpus};

#[derive(Debug, Parser)]
#[command(name = "mode-lab", version, about = "Modality-decoupled adapter lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the backbone and write its checkpoint and training log.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run sequential adapter tuning for every configured seed.
    Continual {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        /// Tune on a generation task and track understanding instead.
        #[arg(long)]
        reverse: bool,
        /// Comma-separated task families replacing the configured sequence.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Gradient-conflict report for probe stacks or a saved adapter stack.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        /// Backbone checkpoint; defaults to the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Aggregate `summary.csv` files into a mean ± sd table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A floor or structural check was missed; artifacts are still written.
    CheckFailed,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(result: &LabResult<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::CheckFailed) => EXIT_CHECK,
        Err(LabError::Diverged { .. }) | Err(LabError::Tensor(TensorError::NonFinite { .. })) => EXIT_NUMERIC,
        Err(_) => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = run(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

pub fn run(cli: &Cli) -> LabResult<Outcome> {
    match &cli.command {
        Command::Pretrain { config } => cmd_pretrain(&RunConfig::load(config)?),
        Command::Continual {
            config,
            strategy,
            reverse,
            tasks,
        } => {
            let mut cfg = RunConfig::load(config)?;
            if let Some(s) = strategy {
                cfg.strategy = parse_strategy(s)?;
            }
            cmd_continual(&cfg, *reverse, tasks)
        }
        Command::Diagnose {
            config,
            checkpoint,
            adapters,
            strategy,
        } => {
            let mut cfg = RunConfig::load(config)?;
            if let Some(s) = strategy {
                cfg.strategy = parse_strategy(s)?;
            }
            if let Some(c) = checkpoint {
                cfg.backbone_checkpoint = Some(c.clone());
            }
            cmd_diagnose(&cfg, adapters.as_deref())
        }
        Command::Report { inputs, out } => cmd_report(inputs, out.as_deref()),
    }
}

fn parse_strategy(s: &str) -> LabResult<Strategy> {
    s.parse().map_err(|e: LabError| LabError::Config(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| LabError::Invalid(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn csv_writer(path: &Path) -> LabResult<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Invalid(format!("csv: {e}"))
}

fn load_backbone(path: &Path) -> LabResult<Backbone> {
    Backbone::from_checkpoint(&Checkpoint::load(path).map_err(|e| match e {
        LabError::Io(io) => LabError::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })?)
}

#[derive(Debug, Serialize)]
struct PretrainArtifact<'a> {
    config: &'a RunConfig,
    losses: &'a [f64],
    final_loss: f64,
    generation_exact_match: f64,
    describe_exact_match: f64,
    generation_floor: f64,
    floor_met: bool,
}

pub fn cmd_pretrain(cfg: &RunConfig) -> LabResult<Outcome> {
    let lex = Lexicon::new(cfg.backbone.vocab())?;
    let corpus = Corpus::build(&lex, &cfg.pretrain)?;
    let (bb, log) = pretrain_backbone(cfg.backbone.clone(), &cfg.pretrain, &corpus)?;
    let out = cfg.out_dir();
    bb.to_checkpoint()?.save(&cfg.backbone_path())?;
    let floor_met = log.generation_exact_match >= cfg.pretrain.generation_floor;
    write_json(
        &out.join("pretrain_log.json"),
        &PretrainArtifact {
            config: cfg,
            losses: &log.losses,
            final_loss: log.final_loss,
            generation_exact_match: log.generation_exact_match,
            describe_exact_match: log.describe_exact_match,
            generation_floor: cfg.pretrain.generation_floor,
            floor_met,
        },
    )?;
    println!(
        "pretrain: final loss {:.4}, generation exact-match {:.4} (floor {:.2})",
        log.final_loss, log.generation_exact_match, cfg.pretrain.generation_floor
    );
    Ok(if floor_met {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    })
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub seed: u64,
    pub acc: f64,
    pub fgt: f64,
    pub zero_shot_generation_exact_match: f64,
    pub final_generation_exact_match: f64,
    pub final_visual_ce: f64,
    pub zero_shot_understanding_exact_match: f64,
    pub final_understanding_exact_match: f64,
    pub trainable_ratio: f64,
}

fn write_matrix(path: &Path, m: &AccuracyMatrix) -> LabResult<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["task".to_string(), "zero_shot".to_string()];
    header.extend((0..m.tasks()).map(|t| format!("after_task_{t}")));
    w.write_record(&header).map_err(csv_err)?;
    for (tau, row) in m.entries.iter().enumerate() {
        let mut rec = vec![tau.to_string(), m.zero_shot[tau].to_string()];
        rec.extend(row.iter().map(|e| e.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_retention(path: &Path, records: &[RetentionRecord]) -> LabResult<()> {
    let mut w = csv_writer(path)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> LabResult<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    strategy: Strategy,
    reverse: bool,
    seeds: &'a [u64],
    tasks: BTreeMap<u64, Vec<crate::tasks::TaskSpec>>,
    optimizer: &'a crate::optim::OptimizerConfig,
    config: &'a RunConfig,
    params: Option<crate::adapters::ParamReport>,
    metrics: &'a [SummaryRow],
}

fn tune_config(cfg: &RunConfig, seed: u64) -> TuneConfig {
    TuneConfig {
        seed,
        adapter: AdapterConfig {
            seed,
            ..cfg.tune.adapter.clone()
        },
        ..cfg.tune.clone()
    }
}

pub fn cmd_continual(cfg: &RunConfig, reverse: bool, families: &[String]) -> LabResult<Outcome> {
    let bb = load_backbone(&cfg.backbone_path())?;
    let lex = Lexicon::new(bb.vocab())?;
    let corpus = Corpus::build(&lex, &cfg.pretrain)?;
    let name = if reverse {
        format!("{}-reverse", cfg.strategy.name())
    } else {
        cfg.strategy.name().to_string()
    };
    let out = cfg.out_dir().join(&name);
    let mut rows = Vec::new();
    let mut task_log = BTreeMap::new();
    let mut params = None;
    for &seed in &cfg.seeds {
        let tcfg = tune_config(cfg, seed);
        let dir = out.join(format!("seed{seed}"));
        if reverse {
            let train = inverted_generation(&lex, &corpus.split.train)?;
            let eval = inverted_generation(&lex, &corpus.split.eval)?;
            let o = reverse_direction_run(&bb, cfg.strategy, &train, &eval, &tcfg, &corpus)?;
            write_retention(&dir.join("retention.csv"), &[o.before.clone(), o.after.clone()])?;
            if let Some(s) = &o.stack {
                s.to_checkpoint(&bb.config)?.save(&dir.join("adapters.ckpt"))?;
            }
            params = Some(crate::adapters::trainable_param_report(bb.numel(), o.stack.as_ref()));
            rows.push(SummaryRow {
                strategy: name.clone(),
                seed,
                acc: o.tuned_task_exact_match,
                fgt: o.understanding_drop(),
                zero_shot_generation_exact_match: o.before.generation_exact_match,
                final_generation_exact_match: o.after.generation_exact_match,
                final_visual_ce: o.after.visual_ce,
                zero_shot_understanding_exact_match: o.before.understanding_exact_match,
                final_understanding_exact_match: o.after.understanding_exact_match,
                trainable_ratio: params.as_ref().map(|p| p.ratio).unwrap_or(0.0),
            });
        } else {
            let specs = if families.is_empty() {
                cfg.task_sequence(seed)
            } else {
                task_sequence(families, seed)
            };
            let tasks: Vec<TaskData> = specs
                .iter()
                .map(|s| generate_task(&lex, s))
                .collect::<LabResult<_>>()
                .map_err(|e| LabError::Config(e.to_string()))?;
            task_log.insert(seed, specs);
            let o = continual_tune(&bb, cfg.strategy, &tasks, &tcfg, &corpus)?;
            write_matrix(&dir.join("accuracy_matrix.csv"), &o.matrix)?;
            write_retention(&dir.join("retention.csv"), &o.retention)?;
            for (t, s) in o.stages.iter().enumerate() {
                s.to_checkpoint(&bb.config)?.save(&dir.join(format!("adapters_stage{t}.ckpt")))?;
            }
            let first = o.retention.first().expect("stage 0 record");
            let last = o.retention.last().expect("final record");
            rows.push(SummaryRow {
                strategy: name.clone(),
                seed,
                acc: compute_acc(&o.matrix)?,
                fgt: compute_fgt(&o.matrix)?.value,
                zero_shot_generation_exact_match: first.generation_exact_match,
                final_generation_exact_match: last.generation_exact_match,
                final_visual_ce: last.visual_ce,
                zero_shot_understanding_exact_match: first.understanding_exact_match,
                final_understanding_exact_match: last.understanding_exact_match,
                trainable_ratio: o.params.ratio,
            });
            params = Some(o.params);
        }
        let r = rows.last().expect("row just pushed");
        println!(
            "{name} seed {seed}: acc {:.4} fgt {:.4} generation {:.4} -> {:.4} understanding {:.4} -> {:.4}",
            r.acc,
            r.fgt,
            r.zero_shot_generation_exact_match,
            r.final_generation_exact_match,
            r.zero_shot_understanding_exact_match,
            r.final_understanding_exact_match
        );
    }
    write_summary(&out.join("summary.csv"), &rows)?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            strategy: cfg.strategy,
            reverse,
            seeds: &cfg.seeds,
            tasks: task_log,
            optimizer: &cfg.tune.optimizer,
            config: cfg,
            params,
            metrics: &rows,
        },
    )?;
    Ok(Outcome::Success)
}

fn write_diagnostics(dir: &Path, report: &ConflictReport) -> LabResult<()> {
    write_json(&dir.join("conflict_report.json"), report)?;
    let mut w = csv_writer(&dir.join("histogram.csv"))?;
    w.write_record(["bin_left", "bin_right", "count"]).map_err(csv_err)?;
    let h = &report.histogram;
    for (e, c) in h.edges.iter().zip(&h.counts) {
        w.write_record(&[e.to_string(), (e + h.bin_width).to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("drift.csv"))?;
    for r in &report.drift.rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Structural checks a report must pass: exact orthogonality under MoDE and
/// every bound inequality.
pub fn structural_ok(report: &ConflictReport) -> bool {
    let orth = report.metadata.adapter_kind != crate::adapters::AdapterKind::Mode || report.orthogonal;
    orth && report.bounds_hold
}

pub fn cmd_diagnose(cfg: &RunConfig, adapters: Option<&Path>) -> LabResult<Outcome> {
    let bb = load_backbone(&cfg.backbone_path())?;
    let lex = Lexicon::new(bb.vocab())?;
    let corpus = Corpus::build(&lex, &cfg.pretrain)?;
    let out = cfg.out_dir().join(format!("diagnose-{}", cfg.strategy.name()));
    let mut all_ok = true;
    let mut reports = Vec::new();
    if let Some(path) = adapters {
        let (stack, bcfg) = AdapterStack::from_checkpoint(&Checkpoint::load(path)?)?;
        if bcfg != bb.config {
            return Err(LabError::Checkpoint("adapter stack was built for a different backbone".into()));
        }
        let probe = probe_instance(&bb, &corpus, &stack.config, cfg.diagnose.seed, &cfg.diagnose)?;
        reports.push((cfg.diagnose.seed, diagnose(&bb, &stack, &probe.text, &probe.visual, &cfg.diagnose)?));
    } else {
        let kind = cfg
            .strategy
            .adapter_kind()
            .ok_or_else(|| LabError::Config("diagnose needs a strategy with adapters".into()))?;
        let adapter = AdapterConfig {
            kind,
            ..cfg.tune.adapter.clone()
        };
        for &seed in &cfg.seeds {
            let probe = probe_instance(&bb, &corpus, &adapter, seed, &cfg.diagnose)?;
            reports.push((seed, diagnose(&bb, &probe.stack, &probe.text, &probe.visual, &cfg.diagnose)?));
        }
    }
    for (seed, r) in &reports {
        write_diagnostics(&out.join(format!("seed{seed}")), r)?;
        let ok = structural_ok(r);
        all_ok &= ok;
        println!(
            "diagnose seed {seed}: <g_t,g_v> {:.3e} cos {:.4} slope {} lambda_max {:.4e} structural {}",
            r.inner_product,
            r.cosine,
            r.drift.fit.as_ref().map(|f| format!("{:.4}", f.slope)).unwrap_or_else(|| "n/a".into()),
            r.lambda_max.value,
            if ok { "ok" } else { "FAILED" }
        );
    }
    Ok(if all_ok {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(rows: &[SummaryRow]) -> Vec<AggregateRow> {
    let mut by: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        by.entry(&r.strategy).or_default().push(r);
    }
    let metrics: [(&str, fn(&SummaryRow) -> f64); 8] = [
        ("acc", |r| r.acc),
        ("fgt", |r| r.fgt),
        ("zero_shot_generation_exact_match", |r| r.zero_shot_generation_exact_match),
        ("final_generation_exact_match", |r| r.final_generation_exact_match),
        ("final_visual_ce", |r| r.final_visual_ce),
        ("zero_shot_understanding_exact_match", |r| r.zero_shot_understanding_exact_match),
        ("final_understanding_exact_match", |r| r.final_understanding_exact_match),
        ("trainable_ratio", |r| r.trainable_ratio),
    ];
    let mut out = Vec::new();
    for (strategy, group) in by {
        for (metric, f) in metrics {
            let xs: Vec<f64> = group.iter().map(|r| f(r)).collect();
            let (mean, sd) = mean_sd(&xs);
            out.push(AggregateRow {
                strategy: strategy.to_string(),
                metric: metric.to_string(),
                mean,
                sd,
                n: xs.len(),
            });
        }
    }
    out
}

pub fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> LabResult<Outcome> {
    let mut rows = Vec::new();
    for p in inputs {
        let mut r = csv::Reader::from_path(p).map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?;
        for row in r.deserialize() {
            rows.push(row.map_err(|e: csv::Error| LabError::Config(format!("{}: {e}", p.display())))?);
        }
    }
    if rows.is_empty() {
        return Err(LabError::Config("no summary rows found".into()));
    }
    let table = aggregate(&rows);
    for a in &table {
        println!("{:<22} {:<38} {:.4} ± {:.4} (n={})", a.strategy, a.metric, a.mean, a.sd, a.n);
    }
    if let Some(path) = out {
        let mut w = csv_writer(path)?;
        for a in &table {
            w.serialize(a).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(Outcome::Success)
}
