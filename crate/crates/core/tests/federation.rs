mod common;

use std::ops::ControlFlow;
use std::time::Duration;

use common::{cut, models, random_samples};
use fedens_core::aggregator::{
    collect_updates, load_checkpoint, run_round, save_checkpoint, Federation, RoundState, RoundStatus, StopCriterion, StopReason,
    Weighting,
};
use fedens_core::error::{Error, TransportError};
use fedens_core::metrics::{accuracy, round_metric, EvalConfig};
use fedens_core::model::{init_params, ModelSpec, Sample};
use fedens_core::rng::Prng;
use fedens_core::trainer::{train_centralized, ClientUpdate, TrainConfig};
use fedens_core::transport::{
    in_process, run_client, run_in_process, run_tcp_loopback, serve_rounds, ClientLink, Direction, Message,
    ServerOptions,
};
use fedens_core::ParamSet;

fn no_eval(_: &ParamSet) -> f64 {
    0.0
}

#[test]
fn one_full_batch_round_equals_one_gradient_step() {
    for spec in models() {
        for instance in 0..20u64 {
            let mut rng = Prng::derive(7, &[instance]);
            let clients = 2 + rng.index(3);
            let sizes: Vec<usize> = (0..clients).map(|_| 1 + rng.index(12)).collect();
            let total: usize = sizes.iter().sum();
            let data = random_samples(&spec, total, &mut rng);
            let shards = cut(&data, &sizes);
            let start = init_params(&spec, instance).unwrap();
            let cfg = TrainConfig {
                local_epochs: 1,
                batch_size: total,
                learning_rate: rng.uniform(0.01, 0.3),
                seed: instance,
            };
            let state = run_round(RoundState::new(clients, start.clone()), &spec, &shards, &cfg, Weighting::SampleCount, &no_eval).unwrap();
            let central = train_centralized(&spec, &start, &data, 1, &cfg).unwrap();
            // Client parameters are stored as f32, so the error is relative
            // to the largest value entering the average.
            let clients: Vec<Vec<f32>> = collect_updates(&RoundState::new(clients, start.clone()), &spec, &shards, &cfg)
                .unwrap()
                .iter()
                .map(|u| u.params.values().collect())
                .collect();
            for (i, (a, b)) in state.global_params.values().zip(central.values()).enumerate() {
                let scale = clients.iter().map(|c| c[i].abs()).fold(a.abs().max(b.abs()), f32::max) as f64;
                let rel = (a - b).abs() as f64 / scale.max(f64::MIN_POSITIVE);
                assert!(rel < 1e-6, "{} instance {instance}: {a} vs {b}", spec.kind_name());
            }
        }
    }
}

#[test]
fn single_client_federation_is_centralized_training() {
    for spec in models() {
        let mut rng = Prng::new(11);
        let data = random_samples(&spec, 23, &mut rng);
        let start = init_params(&spec, 5).unwrap();
        let cfg = TrainConfig {
            local_epochs: 3,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 9,
        };
        let shards = vec![data.clone()];
        let fed = Federation {
            spec: &spec,
            shards: &shards,
            train: cfg,
            stop: StopCriterion::rounds(4),
            weighting: Weighting::SampleCount,
        };
        let state = fed.run(RoundState::new(1, start.clone()), &no_eval, |_| Ok(ControlFlow::Continue(()))).unwrap();
        let central = train_centralized(&spec, &start, &data, 12, &cfg).unwrap();
        assert!(state.global_params.bitwise_eq(&central), "{}", spec.kind_name());
        assert_eq!(state.status, RoundStatus::Stopped(StopReason::Budget));
    }
}

fn detector_setup() -> (ModelSpec, Vec<Vec<Sample>>, Vec<Sample>, TrainConfig) {
    let spec = ModelSpec::GridDetector {
        image_size: 4,
        grid: 2,
        classes: 2,
        hidden: 8,
    };
    let mut rng = Prng::new(21);
    let data = random_samples(&spec, 30, &mut rng);
    let test = random_samples(&spec, 8, &mut rng);
    let cfg = TrainConfig {
        local_epochs: 2,
        batch_size: 3,
        learning_rate: 0.05,
        seed: 4,
    };
    (spec, cut(&data, &[10, 10, 10]), test, cfg)
}

#[test]
fn resume_from_any_round_is_bitwise_identical() {
    let (spec, shards, test, cfg) = detector_setup();
    let eval = |p: &ParamSet| round_metric(&spec, p, &test, &EvalConfig::default()).unwrap();
    let fed = Federation {
        spec: &spec,
        shards: &shards,
        train: cfg,
        stop: StopCriterion::rounds(4),
        weighting: Weighting::SampleCount,
    };
    let start = RoundState::new(3, init_params(&spec, 1).unwrap());
    let full = fed.run(start.clone(), &eval, |_| Ok(ControlFlow::Continue(()))).unwrap();

    let dir = tempfile::tempdir().unwrap();
    for stop_after in 1..4 {
        let path = dir.path().join(format!("round{stop_after}.ckpt"));
        let partial = fed
            .run(start.clone(), &eval, |s| {
                save_checkpoint(s, &path)?;
                Ok(if s.round_index == stop_after {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                })
            })
            .unwrap();
        assert_eq!(partial.round_index, stop_after);
        let restored = load_checkpoint(&path).unwrap();
        assert_eq!(restored, partial);
        let resumed = fed.run(restored, &eval, |_| Ok(ControlFlow::Continue(()))).unwrap();
        assert!(resumed.global_params.bitwise_eq(&full.global_params), "resume after round {stop_after}");
        assert_eq!(resumed.metric_history, full.metric_history);
        assert_eq!(resumed.status, full.status);
    }
}

#[test]
fn tcp_and_in_process_sessions_agree_with_direct_rounds() {
    let (spec, shards, test, cfg) = detector_setup();
    let eval = |p: &ParamSet| round_metric(&spec, p, &test, &EvalConfig::default()).unwrap();
    let stop = StopCriterion::rounds(2);
    let start = RoundState::new(3, init_params(&spec, 2).unwrap());
    let timeout = Duration::from_secs(30);

    let opts = ServerOptions {
        stop,
        weighting: Weighting::SampleCount,
        eval_fn: &eval,
        timeout,
    };
    let mut local = start.clone();
    let mut local_rounds = Vec::new();
    let (local_log, local_clients) = run_in_process(&mut local, &spec, &shards, &cfg, &opts, &mut |s| {
        local_rounds.push(s.clone());
        Ok(())
    })
    .unwrap();
    let mut tcp = start.clone();
    let (tcp_log, tcp_clients) = run_tcp_loopback(&mut tcp, &spec, &shards, &cfg, &opts, &mut |_| Ok(())).unwrap();
    let fed = Federation {
        spec: &spec,
        shards: &shards,
        train: cfg,
        stop,
        weighting: Weighting::SampleCount,
    };
    let direct = fed.run(start, &eval, |_| Ok(ControlFlow::Continue(()))).unwrap();

    assert!(local.global_params.bitwise_eq(&tcp.global_params));
    assert!(local.global_params.bitwise_eq(&direct.global_params));
    assert_eq!(local.metric_history, direct.metric_history);
    assert_eq!(local_rounds.len(), 2);
    assert_eq!(local_rounds[1], local);
    assert_eq!(local_log, tcp_log);
    assert_eq!(local_clients, tcp_clients);
    assert!(local_clients.iter().all(|c| c.rounds == 2 && c.stop_reason == "budget"));

    // 3 hellos, 2 rounds of (3 params + 3 updates + 3 reports), 3 stops.
    assert_eq!(local_log.len(), 3 + 2 * 9 + 3);
    let to_clients = local_log.iter().filter(|e| e.direction == Direction::ToClient).count();
    assert_eq!(to_clients, 2 * 6 + 3);
}

struct Stale<L>(L, u32);

impl<L: ClientLink> ClientLink for Stale<L> {
    fn send(&mut self, msg: &fedens_core::transport::WireMessage) -> Result<(), TransportError> {
        let mut msg = msg.clone();
        if msg.kind == fedens_core::transport::MessageKind::ClientUpdate {
            msg.round_index += self.1;
        }
        self.0.send(&msg)
    }

    fn recv(&mut self) -> Result<fedens_core::transport::WireMessage, TransportError> {
        self.0.recv()
    }
}

#[test]
fn stale_round_update_is_refused_before_aggregation() {
    let (spec, shards, _, cfg) = detector_setup();
    let start = init_params(&spec, 3).unwrap();
    let mut state = RoundState::new(3, start.clone());
    let (mut server, clients) = in_process(3, Duration::from_secs(30));
    let result = std::thread::scope(|scope| {
        for (id, (link, shard)) in clients.into_iter().zip(&shards).enumerate() {
            let (spec, cfg) = (&spec, &cfg);
            scope.spawn(move || {
                let mut link = Stale(link, u32::from(id == 1) * 7);
                let _ = run_client(&mut link, id, spec, shard, cfg);
            });
        }
        let mut transcript = Vec::new();
        let opts = ServerOptions {
            stop: StopCriterion::rounds(2),
            weighting: Weighting::SampleCount,
            eval_fn: &no_eval,
            timeout: Duration::from_secs(30),
        };
        let r = serve_rounds(&mut server, &mut state, &opts, &mut transcript, &mut |_| Ok(()));
        drop(server);
        r
    });
    assert!(matches!(result, Err(Error::Transport(TransportError::Protocol(_)))), "{result:?}");
    assert_eq!(state.round_index, 0);
    assert!(state.global_params.bitwise_eq(&start));
    assert!(state.metric_history.is_empty());
}

#[test]
fn client_update_round_trips_through_messages() {
    let (spec, _, _, _) = detector_setup();
    let update = ClientUpdate {
        client_id: 2,
        params: init_params(&spec, 8).unwrap(),
        sample_count: 10,
        final_train_loss: 1.5,
    };
    let msg = Message::ClientUpdate(update.clone());
    assert_eq!(Message::from_wire(&msg.to_wire(3)).unwrap(), msg);
}

#[test]
fn toy_logistic_federation_learns() {
    let spec = ModelSpec::LogisticClassifier { input_dim: 2, classes: 2 };
    let mut rng = Prng::new(31);
    let blob = |n: usize, rng: &mut Prng| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let centre = if label == 0 { -1.0 } else { 1.0 };
                let x = vec![(centre + rng.uniform(-0.6, 0.6)) as f32, (centre + rng.uniform(-0.6, 0.6)) as f32];
                Sample::classification(x, label)
            })
            .collect()
    };
    let train = blob(90, &mut rng);
    let test = blob(60, &mut rng);
    let shards = cut(&train, &[30, 30, 30]);
    let cfg = TrainConfig {
        local_epochs: 5,
        batch_size: 8,
        learning_rate: 0.1,
        seed: 2,
    };
    let eval = |p: &ParamSet| accuracy(&spec, p, &test).unwrap();
    let fed = Federation {
        spec: &spec,
        shards: &shards,
        train: cfg,
        stop: StopCriterion {
            target_metric: Some(0.95),
            max_rounds: 60,
        },
        weighting: Weighting::SampleCount,
    };
    let state = fed.run(RoundState::new(3, init_params(&spec, 0).unwrap()), &eval, |_| Ok(ControlFlow::Continue(()))).unwrap();
    assert_eq!(state.status, RoundStatus::Stopped(StopReason::TargetReached));
    assert!(state.round_index * cfg.local_epochs <= 300);
    assert!(state.last_metric().unwrap() >= 0.95);
}
