//! Frozen metric values for a small log, recomputed outside this crate.

use icd::data::Vocabulary;
use icd::eval::{build_queries, evaluate_run, popularity_scores, split_dataset, CoviewCounts, SplitSpec};
use icd::io::parse_interactions;

const LOG: &str = include_str!("fixtures/eval_log.tsv");

/// (split, K, run, recall, ndcg, queries)
const EXPECTED: &[(&str, usize, &str, f64, f64, usize)] = &[
    ("leave_last_out", 3, "popularity", 0.125, 0.0625, 8),
    ("leave_last_out", 3, "coview", 0.125, 0.0625, 8),
    ("leave_last_out", 3, "antipop", 0.375, 0.2827324383928644, 8),
    ("leave_last_out", 5, "popularity", 0.5, 0.21304777156780955, 8),
    ("leave_last_out", 5, "coview", 0.5, 0.2075698027129531, 8),
    ("leave_last_out", 5, "antipop", 0.75, 0.43875817881553036, 8),
    ("cutoff_25", 3, "popularity", 0.2, 0.1, 10),
    ("cutoff_25", 3, "coview", 0.0, 0.0, 10),
    ("cutoff_25", 3, "antipop", 0.3, 0.29197207891481874, 10),
    ("cutoff_25", 5, "popularity", 0.4, 0.18175293653079347, 10),
    ("cutoff_25", 5, "coview", 0.4, 0.1678882481454721, 10),
    ("cutoff_25", 5, "antipop", 0.7, 0.46861458889069596, 10),
];

#[test]
fn metrics_match_frozen_values() {
    let events = parse_interactions(LOG.as_bytes()).unwrap();
    assert_eq!(events.len(), 28);
    let items = Vocabulary::from_ids(events.iter().map(|e| e.item.as_str()).fold(Vec::new(), |mut v, i| {
        if !v.contains(&i) {
            v.push(i);
        }
        v
    }))
    .unwrap();
    for &(label, k, run, recall, ndcg, queries) in EXPECTED {
        let spec = match label {
            "leave_last_out" => SplitSpec::LeaveLastOut,
            _ => SplitSpec::CutoffTime(25.0),
        };
        let split = split_dataset(&events, &spec).unwrap();
        let qs = build_queries(&split, &items).unwrap();
        let pop = popularity_scores(&split.train, &items);
        let coview = CoviewCounts::new(&split.train, &items).unwrap();
        let m = evaluate_run(run, &qs, k, |q| {
            Ok(match run {
                "popularity" => pop.clone(),
                "coview" => coview.scores(q.previous, &pop),
                _ => pop.iter().map(|p| -p).collect(),
            })
        })
        .unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        assert_eq!(m.queries, queries, "{label} K={k} {run}");
        assert!(close(m.recall, recall) && close(m.ndcg, ndcg), "{label} K={k} {run}: {m:?}");
    }
}
