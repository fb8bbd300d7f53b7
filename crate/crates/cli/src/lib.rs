//! Reproducible federated-vs-centralized experiments on top of
//! `fedens-core`.

pub mod config;
pub mod experiment;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Duration;

use fedens_core::aggregator::{load_checkpoint, save_checkpoint, RoundState};
use fedens_core::error::{AggregateError, Error as CoreError, TrainError, TransportError};
use fedens_core::model::init_params;
use fedens_core::partition::{distribution_table, shards_to_json};
use fedens_core::synthdata::{cabin_preset, generate_dataset, trailer_preset, SynthError};
use fedens_core::transport::{run_client, serve_rounds, ServerOptions, TcpClientLink, TcpServerLink};
use serde::Serialize;
use thiserror::Error;

use config::{ConfigError, DataSource, ExperimentConfig, Preset};
use experiment::{checkpoint_path, prepare, run_centralized, run_federated, write_file, write_json, Arm, ArmResult, SeedPlan};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 divergence, 4 protocol, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Synth(SynthError::InvalidSpec(_) | SynthError::Combo(_)) => 2,
            CliError::Core(e) => core_exit_code(e),
            _ => 1,
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    let train = |t: &TrainError| if matches!(t, TrainError::Divergence { .. }) { 3 } else { 1 };
    match e {
        CoreError::Train(t) => train(t),
        CoreError::Aggregate(AggregateError::ClientFailed { source, .. }) => train(source),
        CoreError::Transport(TransportError::Protocol(_) | TransportError::Timeout(_) | TransportError::Disconnected) => 4,
        _ => 1,
    }
}

/// A loaded config plus the run metadata every command records.
pub struct Run {
    pub config: ExperimentConfig,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub channel: Option<config::Channel>,
    pub clients: Option<usize>,
}

impl Run {
    /// Load `--config` (or a named preset), apply flag overrides, validate.
    pub fn load(config: Option<&Path>, preset: Option<Preset>, overrides: &Overrides) -> Result<Self, CliError> {
        let (mut cfg, hash) = match (config, preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => {
                let cfg = ExperimentConfig::preset(p);
                let hash = config::sha256_hex(cfg.to_toml().as_bytes());
                (cfg, hash)
            }
            (None, None) => {
                return Err(ConfigError::Invalid {
                    path: "--config".into(),
                    message: "pass --config <path> or --preset <name>".into(),
                }
                .into())
            }
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(channel) = overrides.channel {
            cfg.channel = channel;
        }
        if let Some(clients) = overrides.clients {
            cfg.clients = clients;
        }
        cfg.validate()?;
        Ok(Self {
            config: cfg,
            config_hash: hash,
        })
    }

    /// Write the resolved config, its hash and the seed plan into `dir`.
    pub fn record(&self, dir: &Path, seeds: &[u64]) -> Result<(), CliError> {
        write_file(&dir.join("config.toml"), self.config.to_toml().as_bytes())?;
        write_file(&dir.join("config.sha256"), format!("{}\n", self.config_hash).as_bytes())?;
        let plans: Vec<SeedPlan> = seeds.iter().map(|&s| SeedPlan::new(s)).collect();
        write_json(&dir.join("seeds.json"), &plans)
    }

    fn out(&self) -> &Path {
        &self.config.out
    }
}

/// `gen`: write the synthetic sets in YOLO layout.
pub fn cmd_gen(run: &Run) -> Result<String, CliError> {
    let cfg = &run.config;
    let DataSource::Synthetic {
        preset,
        images,
        test_images,
        blur_probability,
        brightness,
        ..
    } = &cfg.data
    else {
        return Err(ConfigError::Invalid {
            path: "data.source".into(),
            message: "gen needs a synthetic data source".into(),
        }
        .into());
    };
    let plan = SeedPlan::new(cfg.seed);
    let (mut spec, combos) = match preset {
        Preset::Cabin => cabin_preset(cfg.image_side(), plan.data),
        Preset::Trailer => trailer_preset(cfg.image_side(), plan.data),
    };
    if let Some(p) = blur_probability {
        spec.blur_probability = *p;
    }
    if let Some(b) = brightness {
        spec.brightness = *b;
    }
    let ds = generate_dataset(&spec, &combos, *images, *test_images)?;
    let root = run.out().join("data");
    let mut summary = String::new();
    for (name, set) in [("train", &ds.train), ("seen_test", &ds.seen_test), ("unseen_test", &ds.unseen_test)] {
        let dir = root.join(name);
        set.write_yolo_dir(&dir)?;
        write_file(&dir.join("manifest.json"), set.manifest().to_json().expect("manifest").as_bytes())?;
        summary.push_str(&format!("{name}: {} images, per class {:?}\n", set.len(), set.class_histogram()));
    }
    write_json(&root.join("scene.json"), &(spec, combos))?;
    run.record(run.out(), &[cfg.seed])?;
    Ok(summary)
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    train: &'a [String],
    val: &'a [String],
    test: &'a [String],
    unseen_test: &'a [String],
}

/// `partition`: split, shard, and print the distribution table.
pub fn cmd_partition(run: &Run) -> Result<String, CliError> {
    let cfg = &run.config;
    let data = prepare(cfg, &SeedPlan::new(cfg.seed))?;
    let dir = run.out().join("partition");
    write_json(
        &dir.join("split.json"),
        &SplitRecord {
            train: &data.train_ids,
            val: &data.val_ids,
            test: &data.test_ids,
            unseen_test: &data.unseen_ids,
        },
    )?;
    write_file(&dir.join("shards.json"), shards_to_json(&data.shards).expect("shards").as_bytes())?;
    let table = distribution_table(&data.manifest, &data.train_ids, &data.shards).map_err(CoreError::from)?;
    write_file(&dir.join("distribution.md"), table.as_bytes())?;
    run.record(run.out(), &[cfg.seed])?;
    Ok(table)
}

/// `train-central` / `train-fed` for the configured seed; federated runs
/// may continue from a checkpoint.
pub fn cmd_train(run: &Run, arm: Arm, resume: Option<&Path>) -> Result<ArmResult, CliError> {
    let cfg = &run.config;
    let plan = SeedPlan::new(cfg.seed);
    let data = prepare(cfg, &plan)?;
    let dir = run.out().join(arm.dir_name());
    run.record(&dir, &[cfg.seed])?;
    match arm {
        Arm::Centralized if resume.is_some() => Err(CliError::Data("--resume applies to train-fed only".into())),
        Arm::Centralized => run_centralized(cfg, &data, &plan, Some(&dir)),
        Arm::Federated => {
            let state = resume.map(load_checkpoint).transpose()?;
            run_federated(cfg, &data, &plan, state, Some(&dir))
        }
    }
}

/// `eval`: re-evaluate a saved checkpoint.
pub fn cmd_eval(run: &Run, checkpoint: &Path, unseen: bool) -> Result<fedens_core::metrics::EvalReport, CliError> {
    let cfg = &run.config;
    let data = prepare(cfg, &SeedPlan::new(cfg.seed))?;
    experiment::evaluate_checkpoint(cfg, &data, checkpoint, unseen)
}

pub fn cmd_compare(run: &Run) -> Result<report::Comparison, CliError> {
    run.record(run.out(), &run.config.seed_list())?;
    report::compare(&run.config, &run.config_hash, Some(run.out()))
}

/// `serve`: federated server for clients started with `join`.
pub fn cmd_serve(run: &Run, bind: &str) -> Result<RoundState, CliError> {
    let cfg = &run.config;
    let plan = SeedPlan::new(cfg.seed);
    let data = prepare(cfg, &plan)?;
    let dir = run.out().join(Arm::Federated.dir_name());
    run.record(&dir, &[cfg.seed])?;
    let timeout = Duration::from_secs(cfg.timeout_secs);
    let mut link = TcpServerLink::bind(bind, cfg.clients, timeout)?;
    eprintln!("listening on {}", link.local_addr()?);
    let eval = |p: &fedens_core::ParamSet| {
        fedens_core::metrics::round_metric(&cfg.model, p, &data.test, &cfg.eval).unwrap_or(0.0)
    };
    let opts = ServerOptions {
        stop: cfg.stop_criterion(),
        weighting: cfg.weighting,
        eval_fn: &eval,
        timeout,
    };
    let mut state = RoundState::new(cfg.clients, init_params(&cfg.model, plan.init).map_err(CoreError::from)?);
    let mut transcript = Vec::new();
    serve_rounds(&mut link, &mut state, &opts, &mut transcript, &mut |s| {
        eprintln!("round {} metric {:.4}", s.round_index, s.last_metric().unwrap_or(f64::NAN));
        save_checkpoint(s, &checkpoint_path(&dir, s.round_index))
    })?;
    write_json(&dir.join("transcript.json"), &transcript)?;
    Ok(state)
}

/// `join`: one federated client.
pub fn cmd_join(run: &Run, connect: &str, client: usize) -> Result<fedens_core::transport::ClientSummary, CliError> {
    let cfg = &run.config;
    if client >= cfg.clients {
        return Err(ConfigError::Invalid {
            path: "--client".into(),
            message: format!("client {client} but only {} clients configured", cfg.clients),
        }
        .into());
    }
    let plan = SeedPlan::new(cfg.seed);
    let data = prepare(cfg, &plan)?;
    let mut link = TcpClientLink::connect(connect, Duration::from_secs(cfg.timeout_secs))?;
    Ok(run_client(&mut link, client, &cfg.model, &data.shard_samples[client], &cfg.train_config(plan.train))?)
}
