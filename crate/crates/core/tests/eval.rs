use hiertcn::data::{generate_synthetic, EmbeddingTable, Event, ItemMatrix, SyntheticConfig, UserTimeline};
use hiertcn::eval::{
    evaluate, maxitem_score, mv_predict, EvalUser, PoolStrategy, RecentPool, ReferenceScorer, RuleScorer, Scorer,
};
use hiertcn::Exec;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn synthetic_users(users: usize) -> (Vec<EvalUser>, ItemMatrix<f64>) {
    let data = generate_synthetic(&SyntheticConfig { users, items: 300, seed: 5, ..Default::default() }).unwrap();
    let items = ItemMatrix::from_table(&data.table);
    (data.timelines.into_iter().map(EvalUser::cold).collect(), items)
}

#[test]
fn mean_vector_examples() {
    let mut p = RecentPool::<f64>::new(20);
    assert!(mv_predict(&p).is_none());
    p.push(array![1.0, 0.0].view());
    assert_eq!(mv_predict(&p).unwrap(), array![1.0, 0.0]);
    p.push(array![0.0, 1.0].view());
    assert_eq!(mv_predict(&p).unwrap(), array![0.5, 0.5]);
}

#[test]
fn maxitem_examples() {
    let mut p = RecentPool::<f64>::new(5);
    let x = array![0.6, 0.8];
    p.push(x.view());
    p.push(array![-1.0, 0.0].view());
    assert!(maxitem_score(x.view(), &p).unwrap() >= 1.0 - 1e-12);
    let mut q = RecentPool::<f64>::new(5);
    q.push(array![1.0, 0.0].view());
    assert_eq!(maxitem_score(array![0.0, 3.0].view(), &q).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn pools_match_recomputation(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..40), k in 1usize..8, c in prop::collection::vec(-3.0f64..3.0, 3)) {
        let mut p = RecentPool::new(k);
        for r in &rows { p.push(Array1::from_vec(r.clone()).view()); }
        let tail = &rows[rows.len().saturating_sub(k)..];
        let mean: Vec<f64> = (0..3).map(|j| tail.iter().map(|r| r[j]).sum::<f64>() / tail.len() as f64).collect();
        let got = mv_predict(&p).unwrap();
        for j in 0..3 { prop_assert!((got[j] - mean[j]).abs() < 1e-12); }
        let best = tail.iter().map(|r| r.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((maxitem_score(Array1::from_vec(c.clone()).view(), &p).unwrap() - best).abs() < 1e-12);
    }
}

#[test]
fn oracle_constant_and_random_scorers() {
    let (users, items) = synthetic_users(300);
    let run = |s: &dyn Scorer<f64>, pool| evaluate(s, &users, &items, pool, "cold", Exec::Parallel).unwrap();
    let oracle = run(&ReferenceScorer::Oracle, PoolStrategy::Impressions);
    assert_eq!(oracle.overall.recall_at_1, 1.0);
    assert_eq!(oracle.overall.mrr, 1.0);
    let constant = run(&ReferenceScorer::Constant, PoolStrategy::Impressions);
    assert_eq!(constant.overall.mrp, 1.0);
    let random = run(&ReferenceScorer::Random { seed: 3 }, PoolStrategy::UniformSample { size: 10, seed: 1 });
    assert!(random.overall.count >= 2000);
    assert!((random.overall.recall_at_1 - 0.1).abs() < 0.02, "{}", random.overall.recall_at_1);
}

#[test]
fn reports_are_deterministic_and_consistent() {
    let (users, items) = synthetic_users(200);
    let mv = RuleScorer::MeanVector { k: 20 };
    let a = evaluate(&mv, &users, &items, PoolStrategy::Impressions, "cold", Exec::Parallel).unwrap();
    let b = evaluate(&mv, &users, &items, PoolStrategy::Impressions, "cold", Exec::Sequential).unwrap();
    assert_eq!(a, b);
    let m = a.overall;
    assert!(m.recall_at_1 <= m.recall_at_5 && m.recall_at_5 <= m.recall_at_10);
    assert!(m.mrr >= m.recall_at_1);
    let events: usize = users.iter().map(|u| u.timeline.num_events()).sum();
    assert_eq!(m.count as usize + a.skipped as usize, events);
    assert_eq!(a.fallbacks, users.len() as u64);
    let hist: u64 = a.by_history_length.iter().map(|s| s.metrics.count).sum();
    assert_eq!(hist, m.count);
    assert_eq!(hiertcn::eval::MetricsReport::from_json(&a.to_json()).unwrap(), a);
    assert!(a.to_csv().unwrap().starts_with("segment,from,count"));
    assert!(a.to_text().contains("overall"));
    let maxitem = evaluate(&RuleScorer::MaxItem { k: 20 }, &users, &items, PoolStrategy::FullCatalog, "cold", Exec::Parallel).unwrap();
    assert_eq!(maxitem.skipped, 0);
}

#[test]
fn missing_impressions_are_skipped_and_history_is_not_scored() {
    let table = EmbeddingTable::from_rows(vec![1, 2, 3], &Array2::eye(3).mapv(|v: f64| v as f32)).unwrap();
    let items = ItemMatrix::<f64>::from_table(&table);
    let ev = |item, t, imp: Vec<u64>| Event { item_id: item, timestamp: t, impressions: imp };
    let tl = UserTimeline { user_id: 1, sessions: vec![vec![ev(1, 0, vec![1, 2]), ev(2, 10, vec![])], vec![ev(3, 9000, vec![3, 1])]] };
    let users = vec![EvalUser { timeline: tl, first_scored: 1 }];
    let r = evaluate(&ReferenceScorer::Oracle, &users, &items, PoolStrategy::Impressions, "warm", Exec::Sequential).unwrap();
    assert_eq!(r.overall.count, 1);
    assert_eq!(r.skipped, 1);
    assert_eq!(r.by_session_gap_hours[0].from, 2);
    assert_eq!(r.mode, "warm");
}
