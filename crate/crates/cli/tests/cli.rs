use std::path::Path;
use std::process::Command;

use fedens_cli::config::{Channel, DataSource, ExperimentConfig, Holdout, Preset};
use fedens_cli::experiment::{checkpoint_path, evaluate_checkpoint, prepare, run_centralized, run_federated, SeedPlan};
use fedens_cli::report::compare;
use fedens_core::model::ModelSpec;

/// A trailer-shaped experiment small enough to train in seconds.
fn tiny(preset: Preset, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(preset);
    cfg.out = out.to_path_buf();
    cfg.model = ModelSpec::GridDetector {
        image_size: 16,
        grid: 2,
        classes: preset.classes(),
        hidden: 12,
    };
    cfg.data = DataSource::Synthetic {
        preset,
        images: 60,
        test_images: 12,
        holdout: Holdout::Split,
        blur_probability: None,
        brightness: None,
    };
    cfg.train.local_epochs = 2;
    cfg.stop.rounds = 2;
    cfg.centralized_epochs = 4;
    cfg.seeds = vec![5];
    cfg.seed = 5;
    cfg
}

fn fedens() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedens"))
}

#[test]
fn single_client_federation_matches_centralized() {
    let dir = tempfile::tempdir().unwrap();
    for channel in [Channel::Sim, Channel::Tcp] {
        let mut cfg = tiny(Preset::Trailer, dir.path());
        cfg.clients = 1;
        cfg.channel = channel;
        let plan = SeedPlan::new(cfg.seed);
        let data = prepare(&cfg, &plan).unwrap();
        let central = run_centralized(&cfg, &data, &plan, None).unwrap();
        let fed = run_federated(&cfg, &data, &plan, None, None).unwrap();
        assert_eq!(central.params, fed.params, "{channel:?}");
        assert_eq!(central.history, fed.history);
        assert_eq!(central.seen_map.to_bits(), fed.seen_map.to_bits());
    }
}

#[test]
fn eval_reproduces_logged_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Preset::Cabin, dir.path());
    let plan = SeedPlan::new(cfg.seed);
    let data = prepare(&cfg, &plan).unwrap();
    let arm_dir = dir.path().join("federated");
    let result = run_federated(&cfg, &data, &plan, None, Some(&arm_dir)).unwrap();
    let last = checkpoint_path(&arm_dir, cfg.stop.rounds);
    let seen = evaluate_checkpoint(&cfg, &data, &last, false).unwrap();
    assert_eq!(seen.map.to_bits(), result.seen_map.to_bits());
    assert_eq!(seen.map.to_bits(), result.history.last().unwrap().1.to_bits());
    let unseen = evaluate_checkpoint(&cfg, &data, &last, true).unwrap();
    assert_eq!(Some(unseen.map), result.unseen_map);

    let logged: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(arm_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(logged["seen_map"].as_f64().unwrap(), result.seen_map);
}

#[test]
fn compare_reports_both_arms_on_identical_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Preset::Trailer, dir.path());
    cfg.seeds = vec![5, 6];
    let cmp = compare(&cfg, "hash", Some(dir.path())).unwrap();
    assert_eq!(cmp.seeds.len(), 2);
    for s in &cmp.seeds {
        assert_eq!(s.centralized.eval_ids_digest, s.federated.eval_ids_digest);
        assert_eq!(s.federated.history.len(), 2);
        assert_eq!(s.centralized.history.len(), 2);
    }
    for row in ["| Centralized |", "| Client1 |", "| Client2 |", "| Client3 |"] {
        assert!(cmp.distribution.contains(row), "{row}");
    }
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("| Client3 |"));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(dir.path().join("seed_6/centralized/checkpoints/round_002.ckpt").exists());
}

#[test]
fn presets_run_their_round_budgets() {
    for (preset, rounds) in [(Preset::Cabin, 5), (Preset::Trailer, 4)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(preset, dir.path());
        cfg.stop.rounds = ExperimentConfig::preset(preset).stop.rounds;
        cfg.train.local_epochs = 1;
        let plan = SeedPlan::new(cfg.seed);
        let data = prepare(&cfg, &plan).unwrap();
        let fed = run_federated(&cfg, &data, &plan, None, Some(dir.path())).unwrap();
        assert_eq!(fed.history.len(), rounds);
        assert!(checkpoint_path(dir.path(), rounds).exists());
    }
}

#[test]
fn binary_runs_partition_and_records_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, tiny(Preset::Trailer, &dir.path().join("run")).to_toml()).unwrap();
    let out = fedens().arg("--config").arg(&cfg_path).arg("partition").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("| Dataset | Training images | white_trailer |"));
    let run = dir.path().join("run");
    for f in ["config.toml", "config.sha256", "seeds.json", "partition/shards.json", "partition/split.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let recorded = ExperimentConfig::load(&run.join("config.toml")).unwrap().0;
    assert_eq!(recorded, ExperimentConfig::load(&cfg_path).unwrap().0);
}

#[test]
fn binary_gen_writes_yolo_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, tiny(Preset::Cabin, &dir.path().join("run")).to_toml()).unwrap();
    let out = fedens().arg("--config").arg(&cfg_path).arg("gen").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("run/data");
    let labels = std::fs::read_dir(data.join("train/labels")).unwrap().count();
    assert_eq!(labels, 60);
    assert!(data.join("unseen_test/images").is_dir());
}

#[test]
fn invalid_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    let text = tiny(Preset::Cabin, dir.path()).to_toml().replace("local_epochs = 2", "local_epochs = 0");
    std::fs::write(&cfg_path, text).unwrap();
    let out = fedens().arg("--config").arg(&cfg_path).arg("train-fed").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.local_epochs"));

    let out = fedens().arg("--config").arg(dir.path().join("missing.toml")).arg("train-fed").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_corrupt_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, tiny(Preset::Cabin, &dir.path().join("run")).to_toml()).unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"FENKnot really a checkpoint").unwrap();
    let out = fedens().arg("--config").arg(&cfg_path).arg("eval").arg("--checkpoint").arg(&ckpt).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
