use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use mode_lab::adapters::{AdapterConfig, AdapterKind, AdapterStack};
use mode_lab::backbone::Backbone;
use mode_lab::checkpoint::Checkpoint;
use mode_lab::cli::{main_with_args, mean_sd, SummaryRow, EXIT_CHECK, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

const TINY: &str = r#"
version = 1
strategy = "mode"
seeds = [0]

[[tasks]]
id = 0
family = "count-token-5"
seed = 21
train_size = 24
eval_size = 8

[[tasks]]
id = 1
family = "pattern-membership"
seed = 22
train_size = 24
eval_size = 8

[backbone]
layers = 1
model_dim = 16
mlp_dim = 32
heads = 2
max_len = 40

[pretrain]
steps = 12
batch_size = 4
heldout_size = 16
reference_size = 16

[tune.optimizer]
batch_size = 8

[diagnose]
batch_size = 4
eta_points = 4
power_iters = 3
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mode-lab"))
}

/// Writes a config whose outputs land in `dir`, with `extra` lines prepended
/// (top-level keys) and an optional shared backbone.
fn write_config(dir: &Path, extra: &str, backbone: Option<&Path>) -> PathBuf {
    let mut head = format!("output_dir = {:?}\n", dir.join("out").display().to_string());
    if let Some(b) = backbone {
        head.push_str(&format!("backbone_checkpoint = {:?}\n", b.display().to_string()));
    }
    head.push_str(extra);
    let path = dir.join("run.toml");
    fs::write(&path, format!("{head}\n{TINY}")).unwrap();
    path
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["mode-lab"];
    full.extend_from_slice(args);
    main_with_args(full)
}

/// One short pretraining run shared by the tests that only need a backbone.
fn shared_backbone() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let cfg = write_config(&dir, "", None);
        let code = run(&["pretrain", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, EXIT_CHECK, "a dozen steps cannot reach the floor");
        dir.join("out/backbone.ckpt")
    })
}

fn read_summary(path: &Path) -> Vec<SummaryRow> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = bin().args(["pretrain", "--config", missing.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "learning_rate = 3\n").unwrap();
    assert_eq!(run(&["pretrain", "--config", bad.to_str().unwrap()]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn diverging_pretraining_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", None);
    let text = fs::read_to_string(&cfg).unwrap().replace("steps = 12", "steps = 12\nlr = 1e200");
    fs::write(&cfg, text).unwrap();
    assert_eq!(run(&["pretrain", "--config", cfg.to_str().unwrap()]), EXIT_NUMERIC);
}

#[test]
fn pretrain_checkpoint_round_trips_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", None);
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["pretrain", "--config", c]), EXIT_CHECK);
    let ckpt = dir.path().join("out/backbone.ckpt");
    let bytes = fs::read(&ckpt).unwrap();
    let bb = Backbone::from_checkpoint(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    assert_eq!(bb.to_checkpoint().unwrap().encode().unwrap(), bytes);
    let log_a = fs::read(dir.path().join("out/pretrain_log.json")).unwrap();

    assert_eq!(run(&["pretrain", "--config", c]), EXIT_CHECK);
    assert_eq!(fs::read(&ckpt).unwrap(), bytes);
    assert_eq!(fs::read(dir.path().join("out/pretrain_log.json")).unwrap(), log_a);

    // a zero floor is always met
    let text = fs::read_to_string(&cfg).unwrap().replace("steps = 12", "steps = 12\ngeneration_floor = 0.0");
    fs::write(&cfg, text).unwrap();
    assert_eq!(run(&["pretrain", "--config", c]), EXIT_OK);
}

#[test]
fn strategy_none_replicates_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", Some(shared_backbone()));
    assert_eq!(run(&["continual", "--config", cfg.to_str().unwrap(), "--strategy", "none"]), EXIT_OK);
    let mut r = csv::Reader::from_path(dir.path().join("out/none/seed0/accuracy_matrix.csv")).unwrap();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let tau: usize = rec[0].parse().unwrap();
        let zero = &rec[1];
        for t in tau..2 {
            assert_eq!(&rec[2 + t], zero);
        }
        rows += 1;
    }
    assert_eq!(rows, 2);
    let s = read_summary(&dir.path().join("out/none/summary.csv"));
    assert_eq!(s[0].fgt, 0.0);
    assert_eq!(s[0].trainable_ratio, 0.0);
}

#[test]
fn single_task_has_zero_forgetting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", Some(shared_backbone()));
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["continual", "--config", c, "--strategy", "seq-lora", "--tasks", "dominant-token"]), EXIT_OK);
    let s = read_summary(&dir.path().join("out/seq-lora/summary.csv"));
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].fgt, 0.0);
    assert!(dir.path().join("out/seq-lora/seed0/adapters_stage0.ckpt").exists());
}

#[test]
fn manifest_ratio_matches_enumeration_and_mode_first_order_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", Some(shared_backbone()));
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["continual", "--config", c]), EXIT_OK);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/mode/manifest.json")).unwrap()).unwrap();
    let bb = Backbone::from_checkpoint(&Checkpoint::load(shared_backbone()).unwrap()).unwrap();
    let stack = AdapterStack::new(
        &bb.config,
        AdapterConfig {
            kind: AdapterKind::Mode,
            ..AdapterConfig::default()
        },
    )
    .unwrap();
    let adapter_count: usize = stack.params.tensors().iter().map(|t| t.numel()).sum();
    let backbone_count: usize = bb.params.tensors().iter().map(|t| t.numel()).sum();
    let expected = adapter_count as f64 / (adapter_count + backbone_count) as f64;
    // serde_json's default float parser may land one ulp off
    assert!((manifest["params"]["ratio"].as_f64().unwrap() - expected).abs() < 1e-15);
    assert_eq!(manifest["params"]["trainable"].as_u64().unwrap() as usize, adapter_count);

    let adapters = dir.path().join("out/mode/seed0/adapters_stage1.ckpt");
    let code = run(&["diagnose", "--config", c, "--adapters", adapters.to_str().unwrap()]);
    assert!(code == EXIT_OK || code == EXIT_CHECK);
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("out/diagnose-mode/seed0/conflict_report.json")).unwrap(),
    )
    .unwrap();
    let rows = report["drift"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r["first_order"].as_f64().unwrap(), 0.0);
    }
    assert_eq!(report["inner_product"].as_f64().unwrap(), 0.0);
    assert!(report["orthogonal"].as_bool().unwrap());
}

#[test]
fn diagnose_rejects_adapterless_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", Some(shared_backbone()));
    assert_eq!(run(&["diagnose", "--config", cfg.to_str().unwrap(), "--strategy", "none"]), EXIT_USAGE);
}

#[test]
fn report_aggregates_mean_and_sample_sd() {
    let dir = tempfile::tempdir().unwrap();
    let row = |seed, acc| SummaryRow {
        strategy: "mode".into(),
        seed,
        acc,
        fgt: 0.1,
        zero_shot_generation_exact_match: 0.9,
        final_generation_exact_match: 0.8,
        final_visual_ce: 1.0,
        zero_shot_understanding_exact_match: 0.5,
        final_understanding_exact_match: 0.4,
        trainable_ratio: 0.01,
    };
    let mut inputs = Vec::new();
    for (i, rows) in [vec![row(0, 0.2), row(1, 0.4)], vec![row(2, 0.9)]].into_iter().enumerate() {
        let p = dir.path().join(format!("summary{i}.csv"));
        let mut w = csv::Writer::from_path(&p).unwrap();
        for r in rows {
            w.serialize(r).unwrap();
        }
        w.flush().unwrap();
        inputs.push(p);
    }
    let out = dir.path().join("table.csv");
    let code = run(&[
        "report",
        inputs[0].to_str().unwrap(),
        inputs[1].to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let mut r = csv::Reader::from_path(&out).unwrap();
    let acc = r
        .records()
        .map(|x| x.unwrap())
        .find(|x| &x[1] == "acc")
        .expect("acc row");
    let mean: f64 = acc[2].parse().unwrap();
    let sd: f64 = acc[3].parse().unwrap();
    // independent: mean 0.5, deviations -0.3, -0.1, 0.4 → var 0.26 / 2
    assert!((mean - 0.5).abs() < 1e-12);
    assert!((sd - 0.13f64.sqrt()).abs() < 1e-12);
    assert_eq!(&acc[4], "3");
    assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
}
