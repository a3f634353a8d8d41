//! Session runners for the three regimes.

use std::sync::mpsc;
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use super::client::ClientState;
use super::server::{aggregator, ActorOutcome, FinalState, ServerActor};
use super::{batch_tensors, dice_loss, epoch_batches, ClientRoundStats, ClientShard, CommTotals, EngineError, EvalTally, Regime, Result, RoundConfig, RoundStats, RunHistory};
use crate::data::{argmax_masks, MetricReport, Sample};
use crate::model::{instantiate, split_graph, ModelGraph, SplitPlan, SubModel};
use crate::scalar::Scalar;
use crate::tensor::ops::NormMode;
use crate::tensor::optim::{AdamConfig, AdamState};
use crate::transport::{inproc_pair, protocol, Body, Channel, Control, Listener, NamedTensors, Tag, DEFAULT_HIGH_WATER_MARK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Inproc,
    /// Loopback TCP with one thread per client.
    Tcp,
}

/// A finished run and its final whole-network weights.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub history: RunHistory,
    pub state: NamedTensors<T>,
}

/// Everything a SplitFed run needs.
#[derive(Debug, Clone)]
pub struct SplitFedSetup {
    pub graph: ModelGraph,
    pub plan: SplitPlan,
    pub config: RoundConfig,
    pub shards: Vec<ClientShard>,
    pub test: Vec<Sample>,
}

fn join<R>(h: JoinHandle<Result<R>>, who: String) -> Result<R> {
    h.join().map_err(|_| EngineError::Panic(who))?
}

/// The server process: one actor thread per client plus the aggregator.
pub struct ServerHub<T: Scalar> {
    actors: Vec<JoinHandle<Result<ActorOutcome>>>,
    agg: JoinHandle<Result<FinalState<T>>>,
}

impl<T: Scalar> ServerHub<T> {
    /// Reads each channel's hello to learn its client id (ids must be
    /// `0..n`), then starts the actors.
    pub fn start(graph: &ModelGraph, plan: SplitPlan, cfg: &RoundConfig, chans: Vec<Channel<T>>) -> Result<Self> {
        cfg.validate()?;
        let n = chans.len();
        let mut slots: Vec<Option<(u64, Channel<T>)>> = (0..n).map(|_| None).collect();
        for mut ch in chans {
            let msg = ch.expect(Tag::Control)?;
            let Body::Control(Control::Hello { samples }) = msg.body else {
                return Err(protocol("session must open with a hello").into());
            };
            let id = msg.client as usize;
            if id >= n || slots[id].is_some() {
                return Err(protocol(format!("client id {id} is duplicate or outside 0..{n}")).into());
            }
            slots[id] = Some((samples, ch));
        }
        let server_part = split_graph(graph, plan)?[1].clone();
        let (agg_tx, agg_rx) = mpsc::channel();
        let mut replies = Vec::with_capacity(n);
        let mut actors = Vec::with_capacity(n);
        for (id, slot) in slots.into_iter().enumerate() {
            let (samples, ch) = slot.expect("every id present");
            let (tx, rx) = mpsc::channel();
            replies.push(tx);
            let (part, agg_tx, cfg) = (server_part.clone(), agg_tx.clone(), cfg.clone());
            actors.push(
                thread::Builder::new()
                    .name(format!("server-{id}"))
                    .spawn(move || ServerActor::new(id, samples, part, ch, agg_tx, rx, &cfg).run())
                    .map_err(|e| EngineError::Config(format!("spawning server actor: {e}")))?,
            );
        }
        let (rounds, agg_server) = (cfg.global_rounds, cfg.aggregate_server);
        let agg = thread::Builder::new()
            .name("aggregator".into())
            .spawn(move || aggregator(agg_rx, replies, rounds, agg_server))
            .map_err(|e| EngineError::Config(format!("spawning aggregator: {e}")))?;
        Ok(Self { actors, agg })
    }

    fn finish(self) -> Result<(Vec<ActorOutcome>, FinalState<T>)> {
        let outcomes: Vec<Result<ActorOutcome>> =
            self.actors.into_iter().enumerate().map(|(i, h)| join(h, format!("server actor {i}"))).collect();
        let agg = join(self.agg, "aggregator".into());
        // Prefer an actor's own failure over the aggregator's echo of it.
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((outcomes, agg?))
    }

    /// Waits for all sessions and evaluates the final global model on `test`.
    pub fn into_history(self, graph: &ModelGraph, plan: SplitPlan, cfg: &RoundConfig, test: &[Sample]) -> Result<RunHistory> {
        Ok(self.into_trained(graph, plan, cfg, test)?.history)
    }

    /// Like [`ServerHub::into_history`], also returning the final weights
    /// (with the first client's server copy when copies are not averaged).
    pub fn into_trained(self, graph: &ModelGraph, plan: SplitPlan, cfg: &RoundConfig, test: &[Sample]) -> Result<Trained<T>> {
        let (outcomes, fin) = self.finish()?;
        let mut rounds: Vec<RoundStats> = (0..cfg.global_rounds).map(|round| RoundStats { round, clients: Vec::new() }).collect();
        let mut comm = CommTotals::default();
        for o in &outcomes {
            for s in &o.stats {
                rounds[s.round].clients.push(s.clone());
            }
            comm.bytes_up += o.counters.recv_tensor_bytes;
            comm.bytes_down += o.counters.sent_tensor_bytes;
            comm.frame_bytes_up += o.counters.recv_frame_bytes;
            comm.frame_bytes_down += o.counters.sent_frame_bytes;
            comm.messages += o.counters.recv_messages + o.counters.sent_messages;
        }
        let reports = fin
            .server_states
            .iter()
            .map(|server| {
                let mut state = fin.client_state.clone();
                state.extend(server.iter().cloned());
                let model = load_whole::<T>(graph, cfg.seed, &state)?;
                evaluate(&model, test, cfg.batch_size, graph.meta.num_classes)
            })
            .collect::<Result<Vec<_>>>()?;
        let test = MetricReport::average(&reports).expect("at least one report");
        let test = MetricReport { samples: reports[0].samples, ..test };
        let mut state = fin.client_state;
        state.extend(fin.server_states.into_iter().next().expect("at least one server state"));
        let history = RunHistory { regime: Regime::Splitfed, network: graph.meta.network, plan: Some(plan), client: None, seed: cfg.seed, rounds, test, comm };
        Ok(Trained { history, state })
    }
}

fn load_whole<T: Scalar>(graph: &ModelGraph, seed: u64, state: &NamedTensors<T>) -> Result<SubModel<T>> {
    let model = instantiate::<T>(graph, seed);
    model.load_state(state)?;
    Ok(model)
}

/// Inference over `samples` in evaluation mode.
pub(crate) fn evaluate<T: Scalar>(model: &SubModel<T>, samples: &[Sample], batch_size: usize, num_classes: usize) -> Result<MetricReport> {
    tally(model, samples, batch_size, num_classes)?.report().ok_or_else(|| EngineError::Config("empty evaluation set".into()))
}

fn tally<T: Scalar>(model: &SubModel<T>, samples: &[Sample], batch_size: usize, num_classes: usize) -> Result<EvalTally> {
    let mut t = EvalTally::default();
    for batch in samples.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors::<T>(batch)?;
        let pass = model.forward(Some(&x), &[], NormMode::Eval)?;
        t.add(pass.logits().expect("whole networks emit logits"), &y, num_classes)?;
    }
    Ok(t)
}

/// Client role: runs every round against the server on `ch`.
pub fn run_client<T: Scalar>(mut ch: Channel<T>, graph: &ModelGraph, plan: SplitPlan, cfg: &RoundConfig, shard: ClientShard) -> Result<()> {
    cfg.validate()?;
    let mut client = ClientState::<T>::new(graph, plan, shard, cfg)?;
    client.hello(&mut ch)?;
    for round in 0..cfg.global_rounds as u16 {
        let loss = client.train_round(&mut ch, round)?;
        client.upload(&mut ch, round)?;
        client.finish_round(&mut ch, round, loss)?;
    }
    Ok(())
}

/// Server role over TCP: accepts `n_clients` connections, serves all rounds
/// and evaluates the final global model on `test`.
pub fn serve<T: Scalar>(
    listener: &Listener,
    graph: &ModelGraph,
    plan: SplitPlan,
    cfg: &RoundConfig,
    n_clients: usize,
    test: &[Sample],
) -> Result<Trained<T>> {
    if test.is_empty() {
        return Err(EngineError::Config("the test set is empty".into()));
    }
    let chans = (0..n_clients).map(|_| listener.accept::<T>()).collect::<Result<Vec<_>, _>>()?;
    ServerHub::start(graph, plan, cfg, chans)?.into_trained(graph, plan, cfg, test)
}

fn check_setup(s: &SplitFedSetup) -> Result<()> {
    s.config.validate()?;
    if s.shards.is_empty() {
        return Err(EngineError::Config("at least one client is required".into()));
    }
    if s.test.is_empty() {
        return Err(EngineError::Config("the test set is empty".into()));
    }
    for (i, sh) in s.shards.iter().enumerate() {
        if sh.id != i {
            return Err(EngineError::Config(format!("shard {i} carries id {}; ids must be 0..n in order", sh.id)));
        }
    }
    split_graph(&s.graph, s.plan)?;
    Ok(())
}

/// SplitFed training. In-process runs drive the clients one after another
/// in id order; TCP runs use a loopback socket and one thread per client.
pub fn run_splitfed<T: Scalar>(setup: &SplitFedSetup, transport: TransportKind) -> Result<RunHistory> {
    Ok(train_splitfed::<T>(setup, transport)?.history)
}

pub fn train_splitfed<T: Scalar>(setup: &SplitFedSetup, transport: TransportKind) -> Result<Trained<T>> {
    check_setup(setup)?;
    let SplitFedSetup { graph, plan, config: cfg, shards, test } = setup;
    match transport {
        TransportKind::Inproc => {
            let mut clients = Vec::with_capacity(shards.len());
            let mut server_ends = Vec::with_capacity(shards.len());
            for shard in shards {
                let (mut c, s) = inproc_pair::<T>(DEFAULT_HIGH_WATER_MARK);
                let state = ClientState::<T>::new(graph, *plan, shard.clone(), cfg)?;
                state.hello(&mut c)?;
                clients.push((state, c));
                server_ends.push(s);
            }
            let hub = ServerHub::start(graph, *plan, cfg, server_ends)?;
            for round in 0..cfg.global_rounds as u16 {
                let mut losses = Vec::with_capacity(clients.len());
                for (state, ch) in &mut clients {
                    losses.push(state.train_round(ch, round)?);
                    state.upload(ch, round)?;
                }
                for ((state, ch), loss) in clients.iter_mut().zip(losses) {
                    state.finish_round(ch, round, loss)?;
                }
            }
            drop(clients);
            hub.into_trained(graph, *plan, cfg, test)
        }
        TransportKind::Tcp => {
            let listener = crate::transport::tcp_listen("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let handles: Vec<JoinHandle<Result<()>>> = shards
                .iter()
                .map(|shard| {
                    let (graph, plan, cfg, shard) = (graph.clone(), *plan, cfg.clone(), shard.clone());
                    thread::spawn(move || {
                        let ch = crate::transport::tcp_connect::<T>(addr)?;
                        run_client(ch, &graph, plan, &cfg, shard)
                    })
                })
                .collect();
            let trained = serve::<T>(&listener, graph, *plan, cfg, shards.len(), test);
            let clients: Vec<Result<()>> = handles.into_iter().enumerate().map(|(i, h)| join(h, format!("client {i}"))).collect();
            let trained = trained?;
            clients.into_iter().collect::<Result<Vec<_>>>()?;
            Ok(trained)
        }
    }
}

/// Monolithic training in blocks of `local_epochs` epochs, validating after
/// each block.
fn train_monolithic<T: Scalar>(
    graph: &ModelGraph,
    cfg: &RoundConfig,
    stream_id: usize,
    train: &[Sample],
    val: &[Sample],
) -> Result<(SubModel<T>, Vec<ClientRoundStats>)> {
    let model = instantiate::<T>(graph, cfg.seed);
    let mut opt = AdamState::new(&model.parameters(), AdamConfig::with_lr(cfg.lr));
    let mut stats = Vec::with_capacity(cfg.global_rounds);
    for round in 0..cfg.global_rounds {
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for epoch in 0..cfg.local_epochs {
            for batch in epoch_batches(train, cfg, stream_id, round, epoch) {
                let (x, y) = batch_tensors::<T>(&batch)?;
                let pass = model.forward(Some(&x), &[], NormMode::Train)?;
                let loss = dice_loss(pass.logits().expect("whole networks emit logits"), &y)?;
                loss.backward()?;
                loss_sum += loss.item().to_f64().unwrap();
                batches += 1;
                opt.step(&model.parameters());
            }
        }
        let t = tally(&model, val, cfg.batch_size, graph.meta.num_classes)?;
        stats.push(ClientRoundStats {
            round,
            client: stream_id,
            train_loss: if batches == 0 { f64::NAN } else { loss_sum / batches as f64 },
            val_loss: t.loss(),
            val_iou: t.report().map(|r| r.mean_iou),
            bytes_up: 0,
            bytes_down: 0,
        });
    }
    Ok((model, stats))
}

fn monolithic_history<T: Scalar>(
    graph: &ModelGraph,
    cfg: &RoundConfig,
    regime: Regime,
    client: Option<usize>,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
) -> Result<Trained<T>> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(EngineError::Config("the test set is empty".into()));
    }
    let (model, stats) = train_monolithic::<T>(graph, cfg, client.unwrap_or(0), train, val)?;
    let report = evaluate(&model, test, cfg.batch_size, graph.meta.num_classes)?;
    let history = RunHistory {
        regime,
        network: graph.meta.network,
        plan: None,
        client,
        seed: cfg.seed,
        rounds: stats.into_iter().map(|s| RoundStats { round: s.round, clients: vec![s] }).collect(),
        test: report,
        comm: CommTotals::default(),
    };
    Ok(Trained { history, state: model.state_dict() })
}

/// The centralized baseline: one model on all clients' pooled data with the
/// same number of epochs as a SplitFed client.
pub fn run_centralized<T: Scalar>(graph: &ModelGraph, cfg: &RoundConfig, shards: &[ClientShard], test: &[Sample]) -> Result<RunHistory> {
    Ok(train_centralized::<T>(graph, cfg, shards, test)?.history)
}

pub fn train_centralized<T: Scalar>(graph: &ModelGraph, cfg: &RoundConfig, shards: &[ClientShard], test: &[Sample]) -> Result<Trained<T>> {
    let train: Vec<Sample> = shards.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let val: Vec<Sample> = shards.iter().flat_map(|s| s.val.iter().cloned()).collect();
    monolithic_history::<T>(graph, cfg, Regime::Centralized, None, &train, &val, test)
}

/// The local baseline: one model per client trained on its own shard only.
pub fn run_local_baselines<T: Scalar>(graph: &ModelGraph, cfg: &RoundConfig, shards: &[ClientShard], test: &[Sample]) -> Result<Vec<RunHistory>> {
    Ok(train_local_baselines::<T>(graph, cfg, shards, test)?.into_iter().map(|t| t.history).collect())
}

pub fn train_local_baselines<T: Scalar>(graph: &ModelGraph, cfg: &RoundConfig, shards: &[ClientShard], test: &[Sample]) -> Result<Vec<Trained<T>>> {
    shards
        .iter()
        .map(|s| monolithic_history::<T>(graph, cfg, Regime::Local, Some(s.id), &s.train, &s.val, test))
        .collect()
}

/// Argmax masks of `samples` under a whole-network state.
pub fn predict_masks<T: Scalar>(graph: &ModelGraph, state: &NamedTensors<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let model = load_whole::<T>(graph, 0, state)?;
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensors::<T>(batch)?;
        let pass = model.forward(Some(&x), &[], NormMode::Eval)?;
        let masks = argmax_masks(&pass.logits().expect("whole networks emit logits").detach());
        let hw = masks.len() / batch.len();
        out.extend(masks.chunks(hw).map(<[u8]>::to_vec));
    }
    Ok(out)
}
