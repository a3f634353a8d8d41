use splitfed::analysis::predict_splitfed_traffic;
use splitfed::data::{generate_synthetic_dataset, partition_dataset, PartitionSpec};
use splitfed::engine::{run_centralized, run_splitfed, ClientShard, ClientState, RoundConfig, ServerHub, SplitFedSetup, TransportKind};
use splitfed::model::{build, ModelGraph, NetConfig, Network};
use splitfed::transport::{inproc_pair, DEFAULT_HIGH_WATER_MARK};

fn graph() -> ModelGraph {
    build(Network::Unet, &NetConfig { num_classes: 3, base_width: 4, depth: 2, input_hw: (16, 16), ..NetConfig::default() }).unwrap()
}

fn setup(counts: &[usize], rounds: usize, epochs: usize) -> SplitFedSetup {
    let samples = generate_synthetic_dataset(counts.iter().sum::<usize>() + 6, 16, 3, 11).unwrap();
    let spec = PartitionSpec { client_counts: counts.to_vec(), test_count: 6, seed: 3 };
    let (shards, test) = partition_dataset(&samples, &spec).unwrap();
    let config = RoundConfig { global_rounds: rounds, local_epochs: epochs, batch_size: 4, lr: 5e-3, seed: 7, ..Default::default() };
    let g = graph();
    SplitFedSetup {
        plan: g.default_plan,
        graph: g,
        shards: shards.iter().enumerate().map(|(i, s)| ClientShard::split(i, s, config.seed)).collect(),
        config,
        test,
    }
}

#[test]
fn tcp_and_inproc_histories_match() {
    let s = setup(&[9, 13], 2, 1);
    let a = run_splitfed::<f32>(&s, TransportKind::Inproc).unwrap();
    let b = run_splitfed::<f32>(&s, TransportKind::Tcp).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json_lines(), b.to_json_lines());
}

#[test]
fn reruns_are_byte_identical() {
    let s = setup(&[9, 13], 2, 1);
    let a = run_splitfed::<f32>(&s, TransportKind::Inproc).unwrap().to_json_lines();
    let b = run_splitfed::<f32>(&s, TransportKind::Inproc).unwrap().to_json_lines();
    assert_eq!(a, b);
}

#[test]
fn measured_bytes_equal_static_prediction() {
    let s = setup(&[9, 13, 5], 2, 2);
    let h = run_splitfed::<f32>(&s, TransportKind::Inproc).unwrap();
    let sizes: Vec<(usize, usize)> = s.shards.iter().map(|c| (c.train.len(), c.val.len())).collect();
    let pred = predict_splitfed_traffic(&s.graph, s.plan, 2, 2, &sizes, 4).unwrap();
    assert_eq!(h.rounds.len(), 2);
    let (mut up, mut down) = (0, 0);
    for (r, round) in h.rounds.iter().enumerate() {
        for c in &round.clients {
            assert_eq!((c.bytes_up, c.bytes_down), (pred[r][c.client].bytes_up, pred[r][c.client].bytes_down), "round {r} client {}", c.client);
            up += c.bytes_up;
            down += c.bytes_down;
        }
    }
    assert_eq!((h.comm.bytes_up, h.comm.bytes_down), (up, down));
}

#[test]
fn training_loss_falls() {
    let s = setup(&[16, 16], 4, 2);
    let h = run_splitfed::<f32>(&s, TransportKind::Inproc).unwrap();
    let mean = |r: usize| h.rounds[r].clients.iter().map(|c| c.train_loss).sum::<f64>() / 2.0;
    assert!(mean(3) < mean(0), "loss {} -> {}", mean(0), mean(3));
    assert!(h.test.mean_iou.is_finite());
}

#[test]
fn single_client_matches_centralized_training() {
    let s = setup(&[14], 2, 2);
    let split = run_splitfed::<f32>(&s, TransportKind::Inproc).unwrap();
    let central = run_centralized::<f32>(&s.graph, &s.config, &s.shards, &s.test).unwrap();
    for (a, b) in split.rounds.iter().zip(&central.rounds) {
        let (a, b) = (&a.clients[0], &b.clients[0]);
        assert!((a.train_loss - b.train_loss).abs() < 1e-4, "{} vs {}", a.train_loss, b.train_loss);
        assert!((a.val_iou.unwrap() - b.val_iou.unwrap()).abs() < 1e-3);
    }
    assert!((split.test.mean_iou - central.test.mean_iou).abs() < 1e-3);
}

#[test]
fn clients_hold_identical_weights_after_a_round() {
    let s = setup(&[9, 13], 1, 1);
    let mut clients = Vec::new();
    let mut ends = Vec::new();
    for shard in &s.shards {
        let (mut c, srv) = inproc_pair::<f32>(DEFAULT_HIGH_WATER_MARK);
        let st = ClientState::<f32>::new(&s.graph, s.plan, shard.clone(), &s.config).unwrap();
        st.hello(&mut c).unwrap();
        clients.push((st, c));
        ends.push(srv);
    }
    let hub = ServerHub::start(&s.graph, s.plan, &s.config, ends).unwrap();
    let mut losses = Vec::new();
    for (st, ch) in &mut clients {
        losses.push(st.train_round(ch, 0).unwrap());
        st.upload(ch, 0).unwrap();
    }
    // Local training diverges the replicas before averaging.
    assert_ne!(clients[0].0.fe.state_dict(), clients[1].0.fe.state_dict());
    for ((st, ch), l) in clients.iter_mut().zip(losses) {
        st.finish_round(ch, 0, l).unwrap();
    }
    assert_eq!(clients[0].0.fe.state_dict(), clients[1].0.fe.state_dict());
    assert_eq!(clients[0].0.be.state_dict(), clients[1].0.be.state_dict());
    drop(clients);
    let h = hub.into_history(&s.graph, s.plan, &s.config, &s.test).unwrap();
    assert_eq!(h.rounds[0].clients.len(), 2);
}
