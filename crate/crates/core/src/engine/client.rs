//! Client side of the relay: the front-end and back-end partitions, which
//! alone ever see images and labels.

use std::collections::HashSet;

use super::{batch_tensors, dice_loss, epoch_batches, EvalTally, Result, RoundConfig, ClientShard};
use crate::model::{route, split_graph, CutTensor, CutValue, ModelGraph, SplitPlan, SubModel};
use crate::scalar::Scalar;
use crate::tensor::ops::NormMode;
use crate::tensor::optim::{AdamConfig, AdamState};
use crate::tensor::TensorData;
use crate::transport::{protocol, Body, Channel, Control, Message, Tag, TransportError};

/// Checks received tensors against cut signatures for a batch of `n`.
pub(crate) fn check_cut_tensors<T: Scalar>(sigs: &[CutTensor], ts: &[TensorData<T>], n: Option<usize>) -> Result<usize, TransportError> {
    if sigs.len() != ts.len() {
        return Err(protocol(format!("expected {} cut tensors, got {}", sigs.len(), ts.len())));
    }
    let mut batch = n;
    for (sig, t) in sigs.iter().zip(ts) {
        let b = *t.shape.first().ok_or_else(|| protocol("cut tensor without a batch axis"))?;
        let want: Vec<usize> = std::iter::once(batch.unwrap_or(b)).chain(sig.shape.iter().copied()).collect();
        if t.shape != want {
            return Err(protocol(format!("cut {:?} -> {:?}: shape {:?} does not match signature {:?}", sig.key, sig.to, t.shape, want)));
        }
        batch = Some(b);
    }
    Ok(batch.unwrap_or(0))
}

fn expect_batch<T: Scalar>(msg: &Message<T>, round: u16, batch: u32) -> Result<(), TransportError> {
    if msg.round != round || msg.batch != batch {
        return Err(protocol(format!("reply for round {} batch {}, expected round {round} batch {batch}", msg.round, msg.batch)));
    }
    Ok(())
}

/// One client's FE and BE replicas, optimizer state and data.
pub struct ClientState<T: Scalar> {
    pub id: usize,
    pub fe: SubModel<T>,
    pub be: SubModel<T>,
    fe_opt: AdamState<T>,
    be_opt: AdamState<T>,
    pub shard: ClientShard,
    pub sample_count: u64,
    /// Signatures of the server partition's inputs and outputs.
    server_in: Vec<CutTensor>,
    server_out: Vec<CutTensor>,
    fe_names: HashSet<String>,
    num_classes: usize,
    cfg: RoundConfig,
    next_batch: u32,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(graph: &ModelGraph, plan: SplitPlan, shard: ClientShard, cfg: &RoundConfig) -> Result<Self> {
        let [fe, server, be] = split_graph(graph, plan)?;
        for s in shard.train.iter().chain(&shard.val) {
            s.check_classes(graph.meta.num_classes)?;
        }
        let fe = SubModel::build(fe, cfg.seed);
        let be = SubModel::build(be, cfg.seed);
        let adam = AdamConfig::with_lr(cfg.lr);
        Ok(Self {
            id: shard.id,
            fe_opt: AdamState::new(&fe.parameters(), adam),
            be_opt: AdamState::new(&be.parameters(), adam),
            fe_names: fe.state_dict().into_iter().map(|(n, _)| n).collect(),
            fe,
            be,
            sample_count: shard.train.len() as u64,
            shard,
            server_in: server.cut_inputs,
            server_out: server.cut_outputs,
            num_classes: graph.meta.num_classes,
            cfg: cfg.clone(),
            next_batch: 0,
        })
    }

    fn cid(&self) -> u16 {
        self.id as u16
    }

    pub fn hello(&self, ch: &mut Channel<T>) -> Result<()> {
        ch.send(&Message::control(0, self.cid(), Control::Hello { samples: self.sample_count }))?;
        Ok(())
    }

    /// FE forward, server round trip and BE forward for one batch. Returns
    /// the FE tape and outputs, the BE tape and the server outputs' values.
    fn relay_forward(
        &mut self,
        ch: &mut Channel<T>,
        round: u16,
        x: &TensorData<T>,
        mode: NormMode,
    ) -> Result<(crate::model::ForwardPass<T>, Vec<CutValue<T>>, crate::model::ForwardPass<T>)> {
        let batch = self.next_batch;
        self.next_batch += 1;
        let fe_pass = self.fe.forward(Some(x), &[], mode)?;
        let fe_out = fe_pass.output_values();
        let up: Vec<TensorData<T>> = route(&self.server_in, &[(self.fe.cut_outputs(), &fe_out)])?
            .into_iter()
            .map(|v| v.tensor().cloned().ok_or_else(|| protocol("pooling indices cannot leave the client")))
            .collect::<Result<_, _>>()?;
        ch.send(&Message::tensors(Tag::Activation, round, self.cid(), batch, up))?;
        let reply = ch.expect(Tag::ServerOutput)?;
        expect_batch(&reply, round, batch)?;
        let down = reply.into_tensors()?;
        check_cut_tensors(&self.server_out, &down, Some(x.shape[0]))?;
        let server_vals: Vec<CutValue<T>> = down.into_iter().map(CutValue::Tensor).collect();
        let be_in = route(self.be.cut_inputs(), &[(self.fe.cut_outputs(), &fe_out), (&self.server_out, &server_vals)])?;
        let be_pass = self.be.forward(None, &be_in, mode)?;
        Ok((fe_pass, fe_out, be_pass))
    }

    /// Runs the configured local epochs against the server copy; returns the
    /// mean training loss over all batches.
    pub fn train_round(&mut self, ch: &mut Channel<T>, round: u16) -> Result<f64> {
        self.next_batch = 0;
        ch.send(&Message::control(round, self.cid(), Control::SetMode { train: true }))?;
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for epoch in 0..self.cfg.local_epochs {
            for batch in epoch_batches(&self.shard.train, &self.cfg, self.id, round as usize, epoch) {
                let (x, y) = batch_tensors::<T>(&batch)?;
                let batch_id = self.next_batch;
                let (fe_pass, _, be_pass) = self.relay_forward(ch, round, &x, NormMode::Train)?;
                let loss = dice_loss(be_pass.logits().expect("back-end emits logits"), &y)?;
                loss.backward()?;
                loss_sum += loss.item().to_f64().unwrap();
                batches += 1;

                let be_grads = be_pass.input_grads();
                let out_grads: Vec<TensorData<T>> = route(&self.server_out, &[(self.be.cut_inputs(), &be_grads)])?
                    .into_iter()
                    .zip(&self.server_out)
                    .map(|(g, sig)| {
                        let shape: Vec<usize> = std::iter::once(x.shape[0]).chain(sig.shape.iter().copied()).collect();
                        let data = g.unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
                        TensorData { shape, data }
                    })
                    .collect();
                ch.send(&Message::tensors(Tag::OutputGrad, round, self.cid(), batch_id, out_grads))?;
                let reply = ch.expect(Tag::ActivationGrad)?;
                expect_batch(&reply, round, batch_id)?;
                let act_grads = reply.into_tensors()?;
                check_cut_tensors(&self.server_in, &act_grads, Some(x.shape[0]))?;
                let act_grads: Vec<Option<Vec<T>>> = act_grads.into_iter().map(|t| Some(t.data)).collect();
                let fe_grads = route(self.fe.cut_outputs(), &[(&self.server_in, &act_grads), (self.be.cut_inputs(), &be_grads)])?;
                fe_pass.backward(&fe_grads)?;
                self.fe_opt.step(&self.fe.parameters());
                self.be_opt.step(&self.be.parameters());
            }
        }
        Ok(if batches == 0 { f64::NAN } else { loss_sum / batches as f64 })
    }

    /// Sends FE and BE state (parameters and buffers) for aggregation.
    pub fn upload(&self, ch: &mut Channel<T>, round: u16) -> Result<()> {
        let mut entries = self.fe.state_dict();
        entries.extend(self.be.state_dict());
        ch.send(&Message::weights(round, self.cid(), self.sample_count, entries))?;
        Ok(())
    }

    /// Installs the aggregated weights, validates on them and reports the
    /// round's summary to the server. Returns `(val_loss, val_iou)`.
    pub fn finish_round(&mut self, ch: &mut Channel<T>, round: u16, train_loss: f64) -> Result<(Option<f64>, Option<f64>)> {
        let msg = ch.expect(Tag::GlobalWeights)?;
        if msg.round != round {
            return Err(protocol(format!("global weights for round {}, expected {round}", msg.round)).into());
        }
        let Body::Global(entries) = msg.body else {
            return Err(protocol("global weights without entries").into());
        };
        let (fe, be): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(n, _)| self.fe_names.contains(n));
        self.fe.load_state(&fe)?;
        self.be.load_state(&be)?;

        ch.send(&Message::control(round, self.cid(), Control::SetMode { train: false }))?;
        let mut tally = EvalTally::default();
        let val = std::mem::take(&mut self.shard.val);
        let result = (|| {
            for batch in val.chunks(self.cfg.batch_size) {
                let (x, y) = batch_tensors::<T>(batch)?;
                let (_, _, be_pass) = self.relay_forward(ch, round, &x, NormMode::Eval)?;
                tally.add(be_pass.logits().expect("back-end emits logits"), &y, self.num_classes)?;
            }
            Ok::<_, super::EngineError>(())
        })();
        self.shard.val = val;
        result?;
        let (val_loss, val_iou) = (tally.loss(), tally.report().map(|r| r.mean_iou));
        let stats = Control::Stats { train_loss, val_loss: val_loss.unwrap_or(f64::NAN), val_iou: val_iou.unwrap_or(f64::NAN) };
        ch.send(&Message::control(round, self.cid(), stats))?;
        Ok((val_loss, val_iou))
    }
}
