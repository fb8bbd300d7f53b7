//! Side-by-side comparison of the two arms.

use std::fmt::Write as _;
use std::path::Path;

use fedens_core::partition::distribution_table;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiment::{prepare, run_centralized, run_federated, write_file, write_json, Arm, ArmResult, SeedPlan};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub centralized: ArmResult,
    pub federated: ArmResult,
}

impl SeedComparison {
    /// Federated minus centralized mAP on the unseen-combination test.
    pub fn unseen_delta(&self) -> Option<f64> {
        Some(self.federated.unseen_map? - self.centralized.unseen_map?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<SeedComparison>,
    /// Training-set distribution for the first seed, as a Markdown table.
    pub distribution: String,
    pub shard_sizes: Vec<usize>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl Comparison {
    pub fn arm_results(&self, arm: Arm) -> impl Iterator<Item = &ArmResult> {
        self.seeds.iter().map(move |s| match arm {
            Arm::Centralized => &s.centralized,
            Arm::Federated => &s.federated,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}: centralized vs federated\n\nconfig sha256 `{}`\n\n", self.name, self.config_hash);
        s.push_str("| Seed | Arm | Seen mAP@0.5 | Unseen mAP@0.5 |\n|---|---|---|---|\n");
        for c in &self.seeds {
            for r in [&c.centralized, &c.federated] {
                writeln!(s, "| {} | {} | {:.4} | {} |", c.seed, r.arm.dir_name(), r.seen_map, fmt_opt(r.unseen_map)).unwrap();
            }
        }
        for arm in [Arm::Centralized, Arm::Federated] {
            let seen = mean(self.arm_results(arm).map(|r| r.seen_map));
            let unseen: Vec<f64> = self.arm_results(arm).filter_map(|r| r.unseen_map).collect();
            let unseen = (!unseen.is_empty()).then(|| mean(unseen.into_iter()));
            writeln!(s, "| mean | {} | {seen:.4} | {} |", arm.dir_name(), fmt_opt(unseen)).unwrap();
        }
        let deltas: Vec<String> = self.seeds.iter().map(|c| fmt_opt(c.unseen_delta())).collect();
        writeln!(s, "\nUnseen mAP, federated minus centralized, per seed: {}", deltas.join(", ")).unwrap();
        s.push_str("\nBoth arms were evaluated on identical validation and test ids.\n\n");
        s.push_str("## Training data distribution\n\n");
        s.push_str(&self.distribution);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,arm,seen_map,unseen_map,rounds\n");
        for c in &self.seeds {
            for r in [&c.centralized, &c.federated] {
                let unseen = r.unseen_map.map(|v| format!("{v:.6}")).unwrap_or_default();
                writeln!(s, "{},{},{:.6},{unseen},{}", c.seed, r.arm.dir_name(), r.seen_map, r.history.len()).unwrap();
            }
        }
        s
    }
}

/// Train both arms for every seed on identical data and write
/// `report.md`, `report.csv` and `comparison.json` under `out`.
pub fn compare(cfg: &ExperimentConfig, config_hash: &str, out: Option<&Path>) -> Result<Comparison, CliError> {
    let mut seeds = Vec::new();
    let mut distribution = String::new();
    let mut shard_sizes = Vec::new();
    for seed in cfg.seed_list() {
        let plan = SeedPlan::new(seed);
        let data = prepare(cfg, &plan)?;
        if seeds.is_empty() {
            distribution = distribution_table(&data.manifest, &data.train_ids, &data.shards).map_err(fedens_core::Error::from)?;
            shard_sizes = data.shards.iter().map(|s| s.record_ids.len()).collect();
        }
        let seed_dir = out.map(|o| o.join(format!("seed_{seed}")));
        let arm_dir = |arm: Arm| seed_dir.as_ref().map(|d| d.join(arm.dir_name()));
        let centralized = run_centralized(cfg, &data, &plan, arm_dir(Arm::Centralized).as_deref())?;
        let federated = run_federated(cfg, &data, &plan, None, arm_dir(Arm::Federated).as_deref())?;
        if centralized.eval_ids_digest != federated.eval_ids_digest {
            return Err(CliError::Data(format!("seed {seed}: arms saw different validation/test ids")));
        }
        seeds.push(SeedComparison {
            seed,
            centralized,
            federated,
        });
    }
    let cmp = Comparison {
        name: cfg.name.clone(),
        config_hash: config_hash.to_string(),
        seeds,
        distribution,
        shard_sizes,
    };
    if let Some(out) = out {
        write_file(&out.join("report.md"), cmp.to_markdown().as_bytes())?;
        write_file(&out.join("report.csv"), cmp.to_csv().as_bytes())?;
        write_json(&out.join("comparison.json"), &cmp)?;
    }
    Ok(cmp)
}
