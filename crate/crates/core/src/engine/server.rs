//! Server side: one actor per client holding that client's server copy, and
//! the aggregation barrier shared by all of them.

use std::sync::mpsc::{Receiver, Sender};

use super::client::check_cut_tensors;
use super::{fedavg, ClientRoundStats, EngineError, Result, RoundConfig};
use crate::model::{CutValue, ForwardPass, GraphPart, SubModel};
use crate::scalar::Scalar;
use crate::tensor::ops::NormMode;
use crate::tensor::optim::{AdamConfig, AdamState};
use crate::transport::{protocol, Body, Channel, CommCounters, Control, Message, NamedTensors, Tag};

pub(crate) enum AggMsg<T> {
    Upload { client: usize, round: usize, samples: u64, client_state: NamedTensors<T>, server_state: NamedTensors<T> },
    Abort { client: usize, reason: String },
}

pub(crate) struct Globals<T> {
    pub client_state: NamedTensors<T>,
    /// The aggregated server copy, or `None` when server copies stay local.
    pub server_state: Option<NamedTensors<T>>,
}

/// Weights after the last round.
pub(crate) struct FinalState<T> {
    pub client_state: NamedTensors<T>,
    /// One entry when aggregated, otherwise one per client in id order.
    pub server_states: Vec<NamedTensors<T>>,
}

/// Collects every client's upload for a round, averages in client-id order
/// and answers each server actor.
pub(crate) fn aggregator<T: Scalar>(
    rx: Receiver<AggMsg<T>>,
    replies: Vec<Sender<Globals<T>>>,
    rounds: usize,
    aggregate_server: bool,
) -> Result<FinalState<T>> {
    let n = replies.len();
    let mut last = None;
    for round in 0..rounds {
        let mut uploads: Vec<Option<(u64, NamedTensors<T>, NamedTensors<T>)>> = (0..n).map(|_| None).collect();
        for _ in 0..n {
            match rx.recv().map_err(|_| EngineError::Aggregation("all server actors stopped".into()))? {
                AggMsg::Upload { client, round: r, samples, client_state, server_state } => {
                    if r != round || client >= n || uploads[client].is_some() {
                        return Err(EngineError::Aggregation(format!("unexpected upload from client {client} for round {r}")));
                    }
                    uploads[client] = Some((samples, client_state, server_state));
                }
                AggMsg::Abort { client, reason } => {
                    return Err(EngineError::Aggregation(format!("client {client} aborted: {reason}")));
                }
            }
        }
        let uploads: Vec<_> = uploads.into_iter().map(|u| u.expect("all clients uploaded")).collect();
        let client_in: Vec<_> = uploads.iter().map(|(s, c, _)| (c.clone(), *s)).collect();
        let client_state = fedavg(&client_in)?;
        let server_state = if aggregate_server {
            let server_in: Vec<_> = uploads.iter().map(|(s, _, sv)| (sv.clone(), *s)).collect();
            Some(fedavg(&server_in)?)
        } else {
            None
        };
        for tx in &replies {
            // A vanished actor surfaces through its own error path.
            let _ = tx.send(Globals { client_state: client_state.clone(), server_state: server_state.clone() });
        }
        let server_states = match &server_state {
            Some(s) => vec![s.clone()],
            None => uploads.into_iter().map(|(_, _, s)| s).collect(),
        };
        last = Some(FinalState { client_state, server_states });
    }
    last.ok_or_else(|| EngineError::Aggregation("no rounds were run".into()))
}

/// What a server actor returns once its client's session ends.
pub(crate) struct ActorOutcome {
    pub stats: Vec<ClientRoundStats>,
    pub counters: CommCounters,
}

pub(crate) struct ServerActor<T: Scalar> {
    pub client: usize,
    pub samples: u64,
    pub model: SubModel<T>,
    opt: AdamState<T>,
    chan: Channel<T>,
    agg: Sender<AggMsg<T>>,
    globals: Receiver<Globals<T>>,
    cfg: RoundConfig,
}

impl<T: Scalar> ServerActor<T> {
    pub fn new(
        client: usize,
        samples: u64,
        part: GraphPart,
        chan: Channel<T>,
        agg: Sender<AggMsg<T>>,
        globals: Receiver<Globals<T>>,
        cfg: &RoundConfig,
    ) -> Self {
        let model = SubModel::build(part, cfg.seed);
        let opt = AdamState::new(&model.parameters(), AdamConfig::with_lr(cfg.lr));
        Self { client, samples, model, opt, chan, agg, globals, cfg: cfg.clone() }
    }

    pub fn run(mut self) -> Result<ActorOutcome> {
        match self.session() {
            Ok(stats) => Ok(ActorOutcome { stats, counters: self.chan.counters() }),
            Err(e) => {
                let _ = self.agg.send(AggMsg::Abort { client: self.client, reason: e.to_string() });
                let _ = self.chan.send(&Message::control(0, self.client as u16, Control::Error(e.to_string())));
                Err(e)
            }
        }
    }

    fn session(&mut self) -> Result<Vec<ClientRoundStats>> {
        let mut stats = Vec::with_capacity(self.cfg.global_rounds);
        let mut mode = NormMode::Train;
        let mut pending: Option<(u32, ForwardPass<T>)> = None;
        let mut mark = self.chan.counters();
        let cid = self.client as u16;
        let mut round = 0usize;
        while round < self.cfg.global_rounds {
            let msg = self.chan.recv()?;
            if msg.client != cid || msg.round as usize != round {
                return Err(protocol(format!(
                    "message from client {} for round {}, expected client {cid} round {round}",
                    msg.client, msg.round
                ))
                .into());
            }
            let r = msg.round;
            match (msg.tag, msg.body) {
                (Tag::Activation, Body::Tensors(ts)) => {
                    if let Some((b, _)) = &pending {
                        return Err(protocol(format!("batch {b} still awaits its output gradient")).into());
                    }
                    let n = check_cut_tensors(self.model.cut_inputs(), &ts, None)?;
                    let inputs: Vec<CutValue<T>> = ts.into_iter().map(CutValue::Tensor).collect();
                    let pass = self.model.forward(None, &inputs, mode)?;
                    let out: Vec<_> = pass.output_values().into_iter().map(|v| v.tensor().cloned().expect("server outputs are tensors")).collect();
                    check_cut_tensors(self.model.cut_outputs(), &out, Some(n))?;
                    self.chan.send(&Message::tensors(Tag::ServerOutput, r, cid, msg.batch, out))?;
                    if mode == NormMode::Train {
                        pending = Some((msg.batch, pass));
                    }
                }
                (Tag::OutputGrad, Body::Tensors(ts)) => {
                    let (b, pass) = pending.take().ok_or_else(|| protocol(format!("output gradient for unknown batch {}", msg.batch)))?;
                    if b != msg.batch {
                        return Err(protocol(format!("output gradient for batch {}, pending batch is {b}", msg.batch)).into());
                    }
                    check_cut_tensors(self.model.cut_outputs(), &ts, Some(pass.batch()))?;
                    let grads: Vec<_> = ts.into_iter().map(|t| Some(t.data)).collect();
                    pass.backward(&grads)?;
                    let out = pass
                        .input_grads()
                        .into_iter()
                        .zip(self.model.cut_inputs())
                        .map(|(g, sig)| {
                            let shape: Vec<usize> = std::iter::once(pass.batch()).chain(sig.shape.iter().copied()).collect();
                            crate::tensor::TensorData { data: g.expect("server cut inputs are tensors"), shape }
                        })
                        .collect();
                    self.opt.step(&self.model.parameters());
                    self.chan.send(&Message::tensors(Tag::ActivationGrad, r, cid, b, out))?;
                }
                (Tag::WeightsUpload, Body::Weights { sample_count, entries }) => {
                    if let Some((b, _)) = pending.take() {
                        return Err(protocol(format!("upload while batch {b} awaits its gradient")).into());
                    }
                    self.samples = sample_count;
                    self.agg
                        .send(AggMsg::Upload {
                            client: self.client,
                            round,
                            samples: sample_count,
                            client_state: entries,
                            server_state: self.model.state_dict(),
                        })
                        .map_err(|_| EngineError::Aggregation("aggregator stopped".into()))?;
                    let g = self.globals.recv().map_err(|_| EngineError::Aggregation("aggregator stopped".into()))?;
                    if let Some(s) = &g.server_state {
                        self.model.load_state(s)?;
                    }
                    self.chan.send(&Message::global(r, cid, g.client_state))?;
                }
                (Tag::Control, Body::Control(c)) => match c {
                    Control::SetMode { train } => mode = if train { NormMode::Train } else { NormMode::Eval },
                    Control::Stats { train_loss, val_loss, val_iou } => {
                        let now = self.chan.counters();
                        let opt = |v: f64| (!v.is_nan()).then_some(v);
                        stats.push(ClientRoundStats {
                            round,
                            client: self.client,
                            train_loss,
                            val_loss: opt(val_loss),
                            val_iou: opt(val_iou),
                            bytes_up: now.recv_tensor_bytes - mark.recv_tensor_bytes,
                            bytes_down: now.sent_tensor_bytes - mark.sent_tensor_bytes,
                        });
                        mark = now;
                        round += 1;
                    }
                    Control::Error(e) => return Err(protocol(format!("client {cid} reported: {e}")).into()),
                    Control::Shutdown => return Err(protocol(format!("client {cid} left before round {round} finished")).into()),
                    Control::Hello { .. } | Control::EndRound | Control::Ack => {}
                },
                (tag, _) => return Err(protocol(format!("unexpected {tag:?} message at the server")).into()),
            }
        }
        Ok(stats)
    }
}
