use std::collections::HashMap;
use std::sync::Arc;

use hiertcn::data::{
    build_timelines, generate_synthetic, timelines_to_records, EmbeddingTable, Interaction, ItemMatrix, RecordKind,
    SyntheticConfig, IDLE_THRESHOLD_SECS,
};
use hiertcn::model::{rank_candidates, Architecture, Checkpoint, Model, ModelConfig};
use hiertcn::serving::{Recommender, ServingModel};
use hiertcn::Error;
use ndarray::Array2;
use proptest::prelude::*;

fn checkpoint(arch: Architecture, d: usize, seed: u64) -> Checkpoint<f32> {
    let mut cfg = ModelConfig::preset(arch, d);
    cfg.channels = 8;
    cfg.high_hidden = 6;
    cfg.high_layers = 2;
    cfg.head_hidden = 8;
    let model = Model::<f32>::new(&cfg, seed).unwrap();
    Checkpoint::new(model.clone(), model.new_buffers())
}

fn toy_items(n: u64, d: usize) -> Arc<ItemMatrix<f32>> {
    let rows = Array2::from_shape_fn((n as usize, d), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 5.0 - 1.0);
    Arc::new(ItemMatrix::from_table(&EmbeddingTable::from_rows((1..=n).collect(), &rows).unwrap()))
}

fn engine(items: Arc<ItemMatrix<f32>>, seed: u64) -> Recommender {
    let ck = checkpoint(Architecture::HierTcn, items.dim(), seed);
    Recommender::new(ServingModel::new(ck, items).unwrap(), IDLE_THRESHOLD_SECS).unwrap()
}

/// Streams `log` through the engine and checks every pre-event ranking
/// against offline full-history predictions on the same log.
fn replay_matches_offline(rec: &Recommender, log: &[Interaction], candidates: &[u64]) -> usize {
    let model = rec.model();
    let timelines = build_timelines(log, IDLE_THRESHOLD_SECS).unwrap();
    let mut offline: HashMap<u64, Vec<ndarray::Array1<f32>>> = HashMap::new();
    for t in &timelines {
        let sessions: Vec<Array2<f32>> = t
            .sessions
            .iter()
            .map(|s| model.items.lookup(&s.iter().map(|e| e.item_id).collect::<Vec<_>>()).unwrap())
            .collect();
        let preds = model.model.forward_user(&sessions, Some(&model.buffers)).unwrap();
        offline.insert(t.user_id, preds.iter().flat_map(|p| p.rows().into_iter().map(|r| r.to_owned())).collect());
    }
    let mut order: Vec<&Interaction> = log.iter().filter(|r| r.kind == RecordKind::Interaction).collect();
    order.sort_by_key(|r| (r.timestamp, r.user_id));
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for r in &order {
        rec.close_idle_sessions(r.timestamp).unwrap();
        let at = seen.entry(r.user_id).or_default();
        let online = rec.recommend(r.user_id, candidates, candidates.len()).unwrap();
        let expect = rank_candidates(offline[&r.user_id][*at].view(), candidates, |id| model.items.get(id), candidates.len()).unwrap();
        assert_eq!(online.items.len(), expect.len());
        for (a, b) in online.items.iter().zip(&expect) {
            assert_eq!(a.item_id, b.item_id, "user {} event {}", r.user_id, *at);
            assert!((a.score - b.score).abs() <= 1e-6, "{} vs {}", a.score, b.score);
        }
        assert_eq!(online.cold_start, *at == 0);
        rec.on_interaction(r.user_id, r.item_id, r.timestamp).unwrap();
        *at += 1;
    }
    order.len()
}

fn interaction(user_id: u64, item_id: u64, timestamp: i64) -> Interaction {
    Interaction { user_id, item_id, timestamp, kind: RecordKind::Interaction, impression_group: None }
}

#[test]
fn replay_of_synthetic_log_matches_offline_rankings() {
    let d = generate_synthetic(&SyntheticConfig { users: 40, items: 60, embedding_dim: 8, seed: 3, ..Default::default() }).unwrap();
    let items = Arc::new(ItemMatrix::from_table(&d.table));
    let rec = engine(items, 1);
    let log = timelines_to_records(&d.timelines);
    let candidates: Vec<u64> = d.table.ids()[..25].to_vec();
    assert!(replay_matches_offline(&rec, &log, &candidates) > 100);
}

#[test]
fn replay_respects_the_exact_threshold() {
    let rec = engine(toy_items(12, 4), 2);
    let mut log = Vec::new();
    let mut t = 10_000;
    for (i, gap) in [0, 1800, 1801, 5, 1800, 1800, 1801, 1801, 30].into_iter().enumerate() {
        t += gap;
        log.push(interaction(9, 1 + i as u64 % 12, t));
        log.push(interaction(4, 12 - i as u64 % 12, t + 1));
    }
    replay_matches_offline(&rec, &log, &(1..=12).collect::<Vec<_>>());
    let e = rec.cache().entry(9).unwrap();
    assert_eq!(e.state.sessions, 3);
    assert_eq!(e.open_session, vec![8, 9]);
}

#[test]
fn sessions_open_close_and_count() {
    let rec = engine(toy_items(5, 4), 3);
    let a = rec.on_interaction(1, 2, 100).unwrap();
    assert!(a.new_user && !a.closed_session);
    assert_eq!(rec.cache().entry(1).unwrap().state, rec.model().model.start_state().unwrap());
    let b = rec.on_interaction(1, 3, 110).unwrap();
    assert!(!b.new_user && !b.closed_session);
    assert_eq!(b.open_session_len, 2);
    let c = rec.on_interaction(1, 4, 110 + 3600).unwrap();
    assert!(c.closed_session);
    assert_eq!((c.sessions, c.open_session_len), (1, 1));

    let model = rec.model();
    let expect = model
        .model
        .high_update(&model.model.start_state().unwrap(), model.items.lookup(&[2, 3]).unwrap().view())
        .unwrap();
    assert_eq!(rec.cache().entry(1).unwrap().state, expect);
}

#[test]
fn close_idle_is_idempotent() {
    let rec = engine(toy_items(5, 4), 4);
    assert_eq!(rec.close_idle_sessions(0).unwrap(), 0);
    rec.on_interaction(1, 1, 0).unwrap();
    rec.on_interaction(2, 2, 1000).unwrap();
    assert_eq!(rec.close_idle_sessions(1800).unwrap(), 0);
    assert_eq!(rec.close_idle_sessions(1801).unwrap(), 1);
    assert_eq!(rec.close_idle_sessions(1801).unwrap(), 0);
    assert_eq!(rec.close_idle_sessions(5000).unwrap(), 1);
    assert_eq!(rec.close_idle_sessions(9000).unwrap(), 0);
    assert_eq!(rec.cache().entry(1).unwrap().state.sessions, 1);
    // the next interaction opens a fresh session without another close
    let ack = rec.on_interaction(1, 3, 9000).unwrap();
    assert!(!ack.closed_session);
    assert_eq!(ack.sessions, 1);
}

#[test]
fn bad_requests_are_rejected() {
    let rec = engine(toy_items(5, 4), 5);
    assert!(matches!(rec.on_interaction(1, 99, 0), Err(Error::MissingItem(99))));
    assert!(rec.cache().is_empty());
    rec.on_interaction(1, 1, 50).unwrap();
    assert!(matches!(rec.on_interaction(1, 2, 49), Err(Error::Data(_))));
    rec.on_interaction(1, 2, 50).unwrap();
    assert!(matches!(rec.recommend(1, &[1, 99], 2), Err(Error::MissingItem(99))));
    let flat = checkpoint(Architecture::Tcn, 4, 0);
    assert!(matches!(ServingModel::new(flat, toy_items(5, 4)), Err(Error::Config(_))));
    let wide = checkpoint(Architecture::HierTcn, 6, 0);
    assert!(matches!(ServingModel::new(wide, toy_items(5, 4)), Err(Error::Config(_))));
}

#[test]
fn cold_user_gets_start_state_ranking() {
    let items = toy_items(6, 4);
    let rec = engine(items.clone(), 6);
    let one = rec.recommend(42, &[3], 1).unwrap();
    assert!(one.cold_start);
    assert_eq!(one.items[0].item_id, 3);
    assert_eq!(one.state_version, 0);
    let model = rec.model();
    let u = model.model.low_forward(Array2::zeros((0, 4)).view(), &model.model.start_state().unwrap(), Some(&model.buffers)).unwrap();
    let all: Vec<u64> = (1..=6).collect();
    let expect = rank_candidates(u.view(), &all, |id| items.get(id), 4).unwrap();
    assert_eq!(rec.recommend(42, &all, 4).unwrap().items, expect);
    assert!(rec.cache().is_empty());
}

#[test]
fn recommend_is_read_only_under_concurrency() {
    let rec = Arc::new(engine(toy_items(8, 4), 7));
    for (i, t) in [(1, 0), (2, 5), (3, 3000), (4, 3010)] {
        rec.on_interaction(77, i, t).unwrap();
    }
    let before = rec.cache().entry(77).unwrap();
    let all: Vec<u64> = (1..=8).collect();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let rec = rec.clone();
            let all = all.clone();
            std::thread::spawn(move || rec.recommend(77, &all, 5).unwrap())
        })
        .collect();
    let answers: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(answers.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(answers[0].state_version, before.version);
    assert_eq!(rec.cache().entry(77).unwrap(), before);
    assert!(answers[0].items.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn concurrent_users_match_serial_processing() {
    let items = toy_items(10, 4);
    let serial = engine(items.clone(), 8);
    let shared = Arc::new(engine(items, 8));
    let events = |u: u64| (0..30).map(move |i| (u, 1 + (u * 3 + i) % 10, i as i64 * 700));
    for u in 0..6 {
        for (u, item, t) in events(u) {
            serial.on_interaction(u, item, t).unwrap();
        }
    }
    let threads: Vec<_> = (0..6)
        .map(|u| {
            let s = shared.clone();
            std::thread::spawn(move || {
                for (u, item, t) in events(u) {
                    s.on_interaction(u, item, t).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    for u in 0..6 {
        assert_eq!(serial.cache().entry(u), shared.cache().entry(u));
    }
}

#[test]
fn snapshot_round_trips_and_rejects_corruption() {
    let items = toy_items(8, 4);
    let rec = engine(items.clone(), 9);
    for (u, i, t) in [(1, 1, 0), (1, 2, 4000), (2, 3, 10), (3, 4, 20), (3, 5, 30)] {
        rec.on_interaction(u, i, t).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("users.snap");
    rec.save_snapshot(&path).unwrap();

    let restored = engine(items.clone(), 9);
    assert_eq!(restored.load_snapshot(&path).unwrap(), 3);
    for u in 1..=3 {
        assert_eq!(restored.cache().entry(u), rec.cache().entry(u));
        assert_eq!(restored.recommend(u, &[1, 2, 3, 4], 4).unwrap(), rec.recommend(u, &[1, 2, 3, 4], 4).unwrap());
    }
    assert_eq!(restored.snapshot_bytes(), rec.snapshot_bytes());

    let bytes = rec.snapshot_bytes();
    assert!(matches!(restored.load_snapshot_bytes(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(matches!(restored.load_snapshot_bytes(&bad), Err(Error::Format(_))));
    let other = Recommender::new(
        ServingModel::new(
            {
                let mut ck = checkpoint(Architecture::HierTcn, 4, 0);
                let mut cfg = ck.model.config.clone();
                cfg.high_hidden = 3;
                ck.model = Model::new(&cfg, 0).unwrap();
                ck.buffers = ck.model.new_buffers();
                ck
            },
            items,
        )
        .unwrap(),
        IDLE_THRESHOLD_SECS,
    )
    .unwrap();
    assert!(matches!(other.load_snapshot_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn model_swap_keeps_compatible_states() {
    let items = toy_items(6, 4);
    let rec = engine(items.clone(), 10);
    rec.on_interaction(1, 1, 0).unwrap();
    let v0 = rec.recommend(1, &[1, 2], 2).unwrap().model_version;
    rec.swap_model(ServingModel::new(checkpoint(Architecture::HierTcn, 4, 11), items.clone()).unwrap()).unwrap();
    let v1 = rec.recommend(1, &[1, 2], 2).unwrap().model_version;
    assert_ne!(v0, v1);
    let mut ck = checkpoint(Architecture::HierTcn, 4, 0);
    let mut cfg = ck.model.config.clone();
    cfg.high_layers = 3;
    ck.model = Model::new(&cfg, 0).unwrap();
    ck.buffers = ck.model.new_buffers();
    assert!(matches!(rec.swap_model(ServingModel::new(ck, items).unwrap()), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn session_counter_advances_once_per_close(gaps in prop::collection::vec(0i64..4000, 1..40)) {
        let rec = engine(toy_items(6, 4), 12);
        let mut t = 0;
        let mut prev = 0;
        let mut expected = 0;
        for (i, g) in gaps.iter().enumerate() {
            t += g;
            let ack = rec.on_interaction(5, 1 + i as u64 % 6, t).unwrap();
            if i > 0 && *g > IDLE_THRESHOLD_SECS {
                expected += 1;
            }
            prop_assert_eq!(ack.sessions, expected);
            prop_assert!(ack.sessions == prev || ack.sessions == prev + 1);
            prev = ack.sessions;
        }
    }
}
