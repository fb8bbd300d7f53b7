//! The round protocol.
//!
//! ```text
//! client -> server  Hello(client_id)                      once
//! server -> client  GlobalParams(r)                       every round
//! client -> server  ClientUpdate(r)                       every round
//! server -> client  EvalReport(r)                         every round
//! server -> client  Stop                                  after the last round
//! ```
//!
//! The server rejects an update whose round index is not the current
//! round, or that comes from the wrong endpoint, before anything is
//! aggregated.

use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::link::{in_process, ClientLink, ServerLink, TcpClientLink, TcpServerLink};
use super::wire::{Message, MessageKind, RoundReport, WireMessage};
use crate::aggregator::{RoundState, StopCriterion, StopDecision, StopReason, Weighting};
use crate::error::{Error, TransportError};
use crate::model::{ModelSpec, Sample};
use crate::params::ParamSet;
use crate::trainer::{train_local, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ToClient,
    FromClient,
}

/// One message as seen by the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub client: usize,
    pub kind: MessageKind,
    pub round: u32,
}

fn log(transcript: &mut Vec<TranscriptEntry>, direction: Direction, client: usize, msg: &WireMessage) {
    transcript.push(TranscriptEntry {
        direction,
        client,
        kind: msg.kind,
        round: msg.round_index,
    });
}

fn broadcast(
    link: &mut dyn ServerLink,
    msg: &WireMessage,
    transcript: &mut Vec<TranscriptEntry>,
) -> Result<(), TransportError> {
    for c in 0..link.clients() {
        link.send(c, msg)?;
        log(transcript, Direction::ToClient, c, msg);
    }
    Ok(())
}

fn reason_text(reason: StopReason) -> &'static str {
    match reason {
        StopReason::TargetReached => "target_reached",
        StopReason::Budget => "budget",
    }
}

/// Server-side settings shared by every session runner.
#[derive(Clone, Copy)]
pub struct ServerOptions<'a> {
    pub stop: StopCriterion,
    pub weighting: Weighting,
    /// Metric of the aggregated model on the fixed test set.
    pub eval_fn: &'a (dyn Fn(&ParamSet) -> f64 + Sync),
    pub timeout: Duration,
}

/// Drive rounds over `link` until the stop rule fires. `on_round` sees the
/// state after each aggregation and stop decision. On error the state
/// keeps its last aggregated global model.
pub fn serve_rounds(
    link: &mut dyn ServerLink,
    state: &mut RoundState,
    opts: &ServerOptions<'_>,
    transcript: &mut Vec<TranscriptEntry>,
    on_round: &mut dyn FnMut(&RoundState) -> Result<(), Error>,
) -> Result<(), Error> {
    if link.clients() != state.expected_clients {
        return Err(TransportError::Protocol(format!(
            "{} endpoints for {} expected clients",
            link.clients(),
            state.expected_clients
        ))
        .into());
    }
    for (c, hello) in link.accept_hellos()?.iter().enumerate() {
        log(transcript, Direction::FromClient, c, hello);
    }

    while !state.is_stopped() {
        let round = state.round_index;
        let global = Message::GlobalParams(state.global_params.clone()).to_wire(round);
        broadcast(link, &global, transcript)?;

        for c in 0..link.clients() {
            let msg = link.recv(c)?;
            log(transcript, Direction::FromClient, c, &msg);
            if msg.kind != MessageKind::ClientUpdate {
                return Err(TransportError::Protocol(format!("client {c} sent {:?} during round {round}", msg.kind)).into());
            }
            if msg.round_index as usize != round {
                return Err(TransportError::Protocol(format!(
                    "client {c} answered round {} during round {round}",
                    msg.round_index
                ))
                .into());
            }
            let Message::ClientUpdate(update) = Message::from_wire(&msg)? else {
                unreachable!("kind checked above");
            };
            if update.client_id != c {
                return Err(TransportError::Protocol(format!("endpoint {c} sent an update for client {}", update.client_id)).into());
            }
            state.receive(update)?;
        }

        state.aggregate(opts.weighting)?;
        let metric = (opts.eval_fn)(&state.global_params);
        state.complete_round(metric);
        broadcast(link, &Message::EvalReport(RoundReport { round, metric }).to_wire(round), transcript)?;

        let decision = state.should_stop(&opts.stop)?;
        state.apply(decision);
        on_round(state)?;
        if let StopDecision::Stop(reason) = decision {
            let msg = Message::Stop {
                reason: reason_text(reason).into(),
            }
            .to_wire(state.round_index);
            broadcast(link, &msg, transcript)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSummary {
    pub client_id: usize,
    pub rounds: usize,
    pub reports: Vec<RoundReport>,
    pub stop_reason: String,
}

/// Client loop: train on every broadcast, answer with the update, return
/// on `Stop`.
pub fn run_client(
    link: &mut dyn ClientLink,
    client_id: usize,
    spec: &ModelSpec,
    shard: &[Sample],
    cfg: &TrainConfig,
) -> Result<ClientSummary, Error> {
    link.send(&Message::Hello { client_id }.to_wire(0))?;
    let mut summary = ClientSummary {
        client_id,
        rounds: 0,
        reports: Vec::new(),
        stop_reason: String::new(),
    };
    loop {
        let wire = link.recv()?;
        let round = wire.round_index as usize;
        match Message::from_wire(&wire)? {
            Message::GlobalParams(start) => {
                let update = train_local(spec, &start, client_id, shard, cfg, round * cfg.local_epochs)?;
                link.send(&Message::ClientUpdate(update).to_wire(round))?;
                summary.rounds += 1;
            }
            Message::EvalReport(report) => summary.reports.push(report),
            Message::Stop { reason } => {
                summary.stop_reason = reason;
                return Ok(summary);
            }
            other => {
                return Err(TransportError::Protocol(format!("client {client_id} got unexpected {:?}", other.kind())).into())
            }
        }
    }
}

type SessionResult = Result<(Vec<TranscriptEntry>, Vec<ClientSummary>), Error>;

fn join_clients(
    handles: Vec<std::thread::ScopedJoinHandle<'_, Result<ClientSummary, Error>>>,
) -> Result<Vec<ClientSummary>, Error> {
    handles
        .into_iter()
        .map(|h| h.join().expect("client thread panicked"))
        .collect()
}

/// Run a whole session with client threads over in-process channels.
pub fn run_in_process(
    state: &mut RoundState,
    spec: &ModelSpec,
    shards: &[Vec<Sample>],
    cfg: &TrainConfig,
    opts: &ServerOptions<'_>,
    on_round: &mut dyn FnMut(&RoundState) -> Result<(), Error>,
) -> SessionResult {
    let (mut server, clients) = in_process(shards.len(), opts.timeout);
    std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .into_iter()
            .zip(shards)
            .enumerate()
            .map(|(id, (mut link, shard))| scope.spawn(move || run_client(&mut link, id, spec, shard, cfg)))
            .collect();
        let mut transcript = Vec::new();
        let served = serve_rounds(&mut server, state, opts, &mut transcript, on_round);
        // Dropping the server unblocks clients if the session failed.
        drop(server);
        let clients = join_clients(handles);
        served?;
        Ok((transcript, clients?))
    })
}

/// Same session with every client on its own TCP connection to a server
/// bound on the loopback interface.
pub fn run_tcp_loopback(
    state: &mut RoundState,
    spec: &ModelSpec,
    shards: &[Vec<Sample>],
    cfg: &TrainConfig,
    opts: &ServerOptions<'_>,
    on_round: &mut dyn FnMut(&RoundState) -> Result<(), Error>,
) -> SessionResult {
    let mut server = TcpServerLink::bind("127.0.0.1:0", shards.len(), opts.timeout)?;
    let addr: SocketAddr = server.local_addr()?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(id, shard)| {
                scope.spawn(move || {
                    let mut link = TcpClientLink::connect(addr, opts.timeout)?;
                    run_client(&mut link, id, spec, shard, cfg)
                })
            })
            .collect();
        let mut transcript = Vec::new();
        let served = serve_rounds(&mut server, state, opts, &mut transcript, on_round);
        drop(server);
        let clients = join_clients(handles);
        served?;
        Ok((transcript, clients?))
    })
}
