//! Data preparation and the two training arms.

use std::collections::HashMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedens_core::aggregator::{save_checkpoint, Federation, RoundState, RoundStatus, StopReason};
use fedens_core::metrics::{evaluate_detector, round_metric, EvalReport};
use fedens_core::model::{init_params, Sample};
use fedens_core::partition::{shard_training_set, split_dataset, ClientShard, DatasetManifest, SplitSpec};
use fedens_core::rng::Prng;
use fedens_core::synthdata::{cabin_preset, generate_dataset, trailer_preset, Image};
use fedens_core::trainer::train_epochs;
use fedens_core::transport::{run_tcp_loopback, ServerOptions};
use fedens_core::ParamSet;
use serde::{Deserialize, Serialize};

use crate::config::{Channel, DataSource, ExperimentConfig, Holdout, Preset};
use crate::CliError;

/// Independent seeds for each random stage, derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub data: u64,
    pub split: u64,
    pub shard: u64,
    pub init: u64,
    pub train: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        let derive = |k: u64| Prng::derive(master, &[k]).next_u64();
        Self {
            master,
            data: master,
            split: derive(1),
            shard: derive(2),
            init: derive(3),
            train: derive(4),
        }
    }
}

/// Everything both arms train and evaluate on.
pub struct PreparedData {
    /// All training-pool records; `train_ids` is the training subset.
    pub manifest: DatasetManifest,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub unseen_ids: Vec<String>,
    pub shards: Vec<ClientShard>,
    pub train: Vec<Sample>,
    pub shard_samples: Vec<Vec<Sample>>,
    pub test: Vec<Sample>,
    /// Unseen-combination test set; empty for directory datasets.
    pub unseen: Vec<Sample>,
}

impl PreparedData {
    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }
}

fn pick(index: &HashMap<String, Sample>, ids: &[String]) -> Vec<Sample> {
    ids.iter().map(|id| index[id].clone()).collect()
}

pub fn prepare(cfg: &ExperimentConfig, seeds: &SeedPlan) -> Result<PreparedData, CliError> {
    let side = cfg.image_side();
    let (manifest, index, split, test, test_ids, unseen, unseen_ids) = match &cfg.data {
        DataSource::Synthetic {
            preset,
            images,
            test_images,
            holdout,
            blur_probability,
            brightness,
        } => {
            let (mut spec, combos) = match preset {
                Preset::Cabin => cabin_preset(side, seeds.data),
                Preset::Trailer => trailer_preset(side, seeds.data),
            };
            if let Some(p) = blur_probability {
                spec.blur_probability = *p;
            }
            if let Some(b) = brightness {
                spec.brightness = *b;
            }
            let ds = generate_dataset(&spec, &combos, *images, *test_images)?;
            let manifest = ds.train.manifest();
            let index: HashMap<String, Sample> = ds.train.records.iter().map(|r| r.id.clone()).zip(ds.train.samples()).collect();
            let ids = |set: &fedens_core::synthdata::GeneratedSet| set.records.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
            match holdout {
                Holdout::Split => {
                    let split = split_dataset(&manifest, &SplitSpec::standard(seeds.split)).map_err(fedens_core::Error::from)?;
                    let test = pick(&index, &split.test);
                    let test_ids = split.test.clone();
                    (manifest, index, (split.train, split.val), test, test_ids, ds.unseen_test.samples(), ids(&ds.unseen_test))
                }
                Holdout::Separate => {
                    let train_ids = manifest.ids();
                    (
                        manifest,
                        index,
                        (train_ids, Vec::new()),
                        ds.seen_test.samples(),
                        ids(&ds.seen_test),
                        ds.unseen_test.samples(),
                        ids(&ds.unseen_test),
                    )
                }
            }
        }
        DataSource::Yolo {
            images,
            labels,
            class_names,
        } => {
            let manifest =
                fedens_core::partition::ingest_yolo_dir(images, labels, class_names).map_err(fedens_core::Error::from)?;
            let mut index = HashMap::with_capacity(manifest.records.len());
            for r in &manifest.records {
                let img = Image::read(Path::new(&r.image_path))?;
                if img.size != side {
                    return Err(CliError::Data(format!(
                        "{}: {}x{} image does not match model.image_size",
                        r.image_path, img.size, img.size
                    )));
                }
                index.insert(r.id.clone(), Sample::detection(img.to_input(), r.boxes.clone()));
            }
            let split = split_dataset(&manifest, &SplitSpec::standard(seeds.split)).map_err(fedens_core::Error::from)?;
            let test = pick(&index, &split.test);
            let test_ids = split.test.clone();
            (manifest, index, (split.train, split.val), test, test_ids, Vec::new(), Vec::new())
        }
    };
    let (train_ids, val_ids) = split;
    let shards = shard_training_set(&train_ids, cfg.clients, seeds.shard).map_err(fedens_core::Error::from)?;
    let shard_samples = shards.iter().map(|s| pick(&index, &s.record_ids)).collect();
    Ok(PreparedData {
        train: pick(&index, &train_ids),
        manifest,
        train_ids,
        val_ids,
        test_ids,
        unseen_ids,
        shards,
        shard_samples,
        test,
        unseen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Centralized,
    Federated,
}

impl Arm {
    pub fn dir_name(self) -> &'static str {
        match self {
            Arm::Centralized => "centralized",
            Arm::Federated => "federated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    /// `(round, seen-test metric)` after every round; for the centralized
    /// arm a round is a block of `train.local_epochs` epochs.
    pub history: Vec<(usize, f64)>,
    pub seen_map: f64,
    pub unseen_map: Option<f64>,
    /// Digest of the validation and test ids the arm was evaluated against.
    pub eval_ids_digest: String,
    #[serde(skip)]
    pub params: ParamSet,
}

pub fn checkpoint_path(arm_dir: &Path, round: usize) -> PathBuf {
    arm_dir.join("checkpoints").join(format!("round_{round:03}.ckpt"))
}

fn ids_digest(data: &PreparedData) -> String {
    let mut text = String::new();
    for id in data.val_ids.iter().chain(["|".to_string()].iter()).chain(&data.test_ids) {
        text.push_str(id);
        text.push('\n');
    }
    crate::config::sha256_hex(text.as_bytes())
}

fn finish(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    arm: Arm,
    seed: u64,
    params: ParamSet,
    history: Vec<(usize, f64)>,
    arm_dir: Option<&Path>,
) -> Result<ArmResult, CliError> {
    let seen = evaluate_detector(&cfg.model, &params, &data.test, &cfg.eval).map_err(fedens_core::Error::from)?;
    let unseen = if data.unseen.is_empty() {
        None
    } else {
        Some(evaluate_detector(&cfg.model, &params, &data.unseen, &cfg.eval).map_err(fedens_core::Error::from)?)
    };
    let result = ArmResult {
        arm,
        seed,
        history,
        seen_map: seen.map,
        unseen_map: unseen.as_ref().map(|r| r.map),
        eval_ids_digest: ids_digest(data),
        params,
    };
    if let Some(dir) = arm_dir {
        write_json(&dir.join("metrics.json"), &result)?;
        let names = data.class_names();
        let mut md = format!("# {} ({}), seed {seed}\n\n## Seen test\n\n", cfg.name, arm.dir_name());
        md.push_str(&seen.to_markdown(names));
        if let Some(u) = &unseen {
            md.push_str("\n## Unseen-combination test\n\n");
            md.push_str(&u.to_markdown(names));
        }
        write_file(&dir.join("report.md"), md.as_bytes())?;
    }
    Ok(result)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable").as_bytes())
}

fn eval_fn<'a>(cfg: &'a ExperimentConfig, data: &'a PreparedData) -> impl Fn(&ParamSet) -> f64 + Sync + 'a {
    move |p: &ParamSet| round_metric(&cfg.model, p, &data.test, &cfg.eval).unwrap_or(0.0)
}

/// Centralized baseline over the whole training subset, checkpointed every
/// `train.local_epochs` epochs.
pub fn run_centralized(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seeds: &SeedPlan,
    arm_dir: Option<&Path>,
) -> Result<ArmResult, CliError> {
    let train = cfg.train_config(seeds.train);
    let eval = eval_fn(cfg, data);
    let mut state = RoundState::new(1, init_params(&cfg.model, seeds.init).map_err(fedens_core::Error::from)?);
    let mut epoch = 0;
    while epoch < cfg.centralized_epochs {
        let block = train.local_epochs.min(cfg.centralized_epochs - epoch);
        let (params, _) = train_epochs(&cfg.model, &state.global_params, 0, &data.train, block, epoch, &train)
            .map_err(fedens_core::Error::from)?;
        epoch += block;
        state.global_params = params;
        state.complete_round(eval(&state.global_params));
        if epoch == cfg.centralized_epochs {
            state.status = RoundStatus::Stopped(StopReason::Budget);
        }
        if let Some(dir) = arm_dir {
            save_checkpoint(&state, &checkpoint_path(dir, state.round_index))?;
        }
    }
    let history = state.metric_history.clone();
    finish(cfg, data, Arm::Centralized, seeds.master, state.global_params, history, arm_dir)
}

/// Federated arm over the configured channel, checkpointed every round.
/// `resume` continues from a checkpointed state instead of fresh weights.
pub fn run_federated(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seeds: &SeedPlan,
    resume: Option<RoundState>,
    arm_dir: Option<&Path>,
) -> Result<ArmResult, CliError> {
    let train = cfg.train_config(seeds.train);
    let eval = eval_fn(cfg, data);
    let start = match resume {
        Some(state) => {
            if state.expected_clients != cfg.clients {
                return Err(CliError::Data(format!(
                    "checkpoint has {} clients but {} are configured",
                    state.expected_clients, cfg.clients
                )));
            }
            state
        }
        None => RoundState::new(cfg.clients, init_params(&cfg.model, seeds.init).map_err(fedens_core::Error::from)?),
    };
    let mut checkpoint = |s: &RoundState| -> Result<(), fedens_core::Error> {
        if let Some(dir) = arm_dir {
            save_checkpoint(s, &checkpoint_path(dir, s.round_index))?;
        }
        Ok(())
    };
    let state = match cfg.channel {
        Channel::Sim => {
            let fed = Federation {
                spec: &cfg.model,
                shards: &data.shard_samples,
                train,
                stop: cfg.stop_criterion(),
                weighting: cfg.weighting,
            };
            fed.run(start, &eval, |s| checkpoint(s).map(|_| ControlFlow::Continue(())))?
        }
        Channel::Tcp => {
            let mut state = start;
            let opts = ServerOptions {
                stop: cfg.stop_criterion(),
                weighting: cfg.weighting,
                eval_fn: &eval,
                timeout: Duration::from_secs(cfg.timeout_secs),
            };
            run_tcp_loopback(&mut state, &cfg.model, &data.shard_samples, &train, &opts, &mut checkpoint)?;
            state
        }
    };
    let history = state.metric_history.clone();
    finish(cfg, data, Arm::Federated, seeds.master, state.global_params, history, arm_dir)
}

/// Evaluate a saved checkpoint on the seen test set (or the unseen one).
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    path: &Path,
    unseen: bool,
) -> Result<EvalReport, CliError> {
    let state = fedens_core::aggregator::load_checkpoint(path)?;
    let set = if unseen { &data.unseen } else { &data.test };
    if set.is_empty() {
        return Err(CliError::Data("this dataset has no unseen-combination test set".into()));
    }
    Ok(evaluate_detector(&cfg.model, &state.global_params, set, &cfg.eval).map_err(fedens_core::Error::from)?)
}
