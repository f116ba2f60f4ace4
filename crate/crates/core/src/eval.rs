//! Top-K evaluation: split protocols, ranking, recall and NDCG, popularity
//! and coview baselines, and the comparison report.
//!
//! A "user" is the first comma-separated component of the context id, so
//! for tensor contexts `u3,q7` the user is `u3`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{RawInteraction, Vocabulary};
use crate::error::{IcdError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Each user's last event goes to test. Users with a single event keep
    /// it in train.
    LeaveLastOut,
    /// Events with timestamp `≤ t` train, the rest test.
    CutoffTime(f64),
    /// `round(fraction·users)` users, chosen by `seed`, are held out
    /// entirely.
    ColdStartUsers { fraction: f64, seed: u64 },
}

impl SplitSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SplitSpec::LeaveLastOut => "leave_last_out",
            SplitSpec::CutoffTime(_) => "cutoff_time",
            SplitSpec::ColdStartUsers { .. } => "cold_start_users",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<RawInteraction>,
    pub test: Vec<RawInteraction>,
}

pub fn user_of(context: &str) -> &str {
    context.split(',').next().unwrap_or(context)
}

/// Event times: timestamps if every event has one, file positions if none
/// has. A partial timestamp column is an error.
fn event_times(events: &[RawInteraction]) -> Result<(Vec<f64>, bool)> {
    let with = events.iter().filter(|e| e.timestamp.is_some()).count();
    if with == events.len() && with > 0 {
        Ok((events.iter().map(|e| e.timestamp.unwrap()).collect(), true))
    } else if with == 0 {
        Ok(((0..events.len()).map(|i| i as f64).collect(), false))
    } else {
        Err(IcdError::Split(format!(
            "{with} of {} events carry timestamps; need all or none",
            events.len()
        )))
    }
}

fn users_in_order(events: &[RawInteraction]) -> Vec<&str> {
    let mut seen = HashSet::new();
    events
        .iter()
        .map(|e| user_of(&e.context))
        .filter(|u| seen.insert(*u))
        .collect()
}

pub fn split_dataset(events: &[RawInteraction], spec: &SplitSpec) -> Result<Split> {
    let (times, stamped) = event_times(events)?;
    let mut split = Split::default();
    match *spec {
        SplitSpec::LeaveLastOut => {
            let mut last: HashMap<&str, usize> = HashMap::new();
            let mut count: HashMap<&str, usize> = HashMap::new();
            for (i, e) in events.iter().enumerate() {
                let u = user_of(&e.context);
                *count.entry(u).or_default() += 1;
                let slot = last.entry(u).or_insert(i);
                if (times[i], i) > (times[*slot], *slot) {
                    *slot = i;
                }
            }
            for (i, e) in events.iter().enumerate() {
                let u = user_of(&e.context);
                if last[u] == i && count[u] > 1 {
                    split.test.push(e.clone());
                } else {
                    split.train.push(e.clone());
                }
            }
        }
        SplitSpec::CutoffTime(t) => {
            if !stamped {
                return Err(IcdError::Split("cutoff_time needs a timestamp column".into()));
            }
            for (e, &ts) in events.iter().zip(&times) {
                if ts <= t {
                    split.train.push(e.clone());
                } else {
                    split.test.push(e.clone());
                }
            }
        }
        SplitSpec::ColdStartUsers { fraction, seed } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(IcdError::Split(format!("held-out fraction must lie in (0, 1), got {fraction}")));
            }
            let mut users = users_in_order(events);
            let n = (fraction * users.len() as f64).round() as usize;
            users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let held: HashSet<&str> = users.into_iter().take(n).collect();
            for e in events {
                if held.contains(user_of(&e.context)) {
                    split.test.push(e.clone());
                } else {
                    split.train.push(e.clone());
                }
            }
        }
    }
    Ok(split)
}

/// Top-K items ordered by score descending, then item index ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub items: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<usize> {
        self.items.iter().map(|&(i, _)| i).collect()
    }
}

pub fn rank_items(scores: &[f64], k: usize, exclusions: &HashSet<usize>) -> Result<RankedList> {
    if k == 0 {
        return Err(IcdError::InvalidConfig("K must be >= 1".into()));
    }
    let mut cand: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| !exclusions.contains(i))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    Ok(RankedList { items: cand })
}

pub fn recall_at_k(ranked: &RankedList, relevant: &HashSet<usize>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(IcdError::EmptyRelevant);
    }
    let hits = ranked.items.iter().filter(|(i, _)| relevant.contains(i)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary gain, discount `1/log₂(rank+1)` with ranks from 1, normalized by
/// the ideal DCG of `min(|relevant|, K)` hits.
pub fn ndcg_at_k(ranked: &RankedList, relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(IcdError::EmptyRelevant);
    }
    let disc = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let dcg: f64 = ranked
        .items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, (i, _))| relevant.contains(i))
        .map(|(r, _)| disc(r + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(disc).sum();
    Ok(dcg / ideal)
}

/// Interaction counts per item over the training events.
pub fn popularity_scores(train: &[RawInteraction], items: &Vocabulary) -> Vec<f64> {
    let mut counts = vec![0.0; items.len()];
    for e in train {
        if let Some(i) = items.get(&e.item) {
            counts[i] += 1.0;
        }
    }
    counts
}

/// Per-user training sequences in time order.
fn sequences(train: &[RawInteraction]) -> Result<HashMap<&str, Vec<&str>>> {
    let (times, _) = event_times(train)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
    let mut seqs: HashMap<&str, Vec<&str>> = HashMap::new();
    for i in order {
        seqs.entry(user_of(&train[i].context)).or_default().push(&train[i].item);
    }
    Ok(seqs)
}

/// Counts of "item b directly follows item a" in users' training sequences.
#[derive(Clone, Debug, Default)]
pub struct CoviewCounts {
    next: HashMap<usize, HashMap<usize, f64>>,
}

impl CoviewCounts {
    pub fn new(train: &[RawInteraction], items: &Vocabulary) -> Result<Self> {
        let mut next: HashMap<usize, HashMap<usize, f64>> = HashMap::new();
        for seq in sequences(train)?.values() {
            for w in seq.windows(2) {
                if let (Some(a), Some(b)) = (items.get(w[0]), items.get(w[1])) {
                    *next.entry(a).or_default().entry(b).or_default() += 1.0;
                }
            }
        }
        Ok(CoviewCounts { next })
    }

    /// Coview counts after `prev`, ties and unseen items ordered by
    /// popularity; pure popularity when `prev` has no successors.
    pub fn scores(&self, prev: Option<usize>, popularity: &[f64]) -> Vec<f64> {
        let total: f64 = popularity.iter().sum::<f64>() + 1.0;
        let base: Vec<f64> = popularity.iter().map(|p| p / total).collect();
        match prev.and_then(|p| self.next.get(&p)) {
            None => popularity.to_vec(),
            Some(row) => {
                let mut s = base;
                for (&b, &c) in row {
                    s[b] += c;
                }
                s
            }
        }
    }
}

/// One test query: the model context it is asked for, its held-out items
/// and the items it already consumed in training.
#[derive(Clone, Debug)]
pub struct Query {
    pub context: String,
    pub relevant: HashSet<usize>,
    pub exclusions: HashSet<usize>,
    /// Last item the user consumed in training, for coview.
    pub previous: Option<usize>,
}

/// Groups test events per context. Items unknown to `items` are dropped;
/// queries left with no relevant item are skipped.
pub fn build_queries(split: &Split, items: &Vocabulary) -> Result<Vec<Query>> {
    let mut train_items: HashMap<&str, HashSet<usize>> = HashMap::new();
    for e in &split.train {
        if let Some(i) = items.get(&e.item) {
            train_items.entry(&e.context).or_default().insert(i);
        }
    }
    let seqs = sequences(&split.train)?;
    let mut order: Vec<&str> = Vec::new();
    let mut relevant: HashMap<&str, HashSet<usize>> = HashMap::new();
    for e in &split.test {
        if let Some(i) = items.get(&e.item) {
            let set = relevant.entry(&e.context).or_insert_with(|| {
                order.push(&e.context);
                HashSet::new()
            });
            set.insert(i);
        }
    }
    let mut out = Vec::new();
    for ctx in order {
        let exclusions = train_items.remove(ctx).unwrap_or_default();
        let rel: HashSet<usize> = relevant[ctx].difference(&exclusions).copied().collect();
        if rel.is_empty() {
            continue;
        }
        let previous = seqs
            .get(user_of(ctx))
            .and_then(|s| s.last())
            .and_then(|id| items.get(id));
        out.push(Query {
            context: ctx.to_string(),
            relevant: rel,
            exclusions,
            previous,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub name: String,
    pub recall: f64,
    pub ndcg: f64,
    pub queries: usize,
}

/// Mean recall@K and NDCG@K over `queries`, scoring each with `score`.
pub fn evaluate_run<F>(name: &str, queries: &[Query], k: usize, mut score: F) -> Result<RunMetrics>
where
    F: FnMut(&Query) -> Result<Vec<f64>>,
{
    if queries.is_empty() {
        return Err(IcdError::EmptyTestSet);
    }
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for q in queries {
        let ranked = rank_items(&score(q)?, k, &q.exclusions)?;
        recall += recall_at_k(&ranked, &q.relevant)?;
        ndcg += ndcg_at_k(&ranked, &q.relevant, k)?;
    }
    let n = queries.len() as f64;
    Ok(RunMetrics {
        name: name.to_string(),
        recall: recall / n,
        ndcg: ndcg / n,
        queries: queries.len(),
    })
}

/// Runs compared against the popularity baseline on the same split.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub k: usize,
    pub split: String,
    pub popularity: RunMetrics,
    pub runs: Vec<RunMetrics>,
}

fn ratio(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        if x == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        x / base
    }
}

impl MetricReport {
    /// Popularity first, then the other runs in insertion order.
    pub fn all_runs(&self) -> impl Iterator<Item = &RunMetrics> {
        std::iter::once(&self.popularity).chain(&self.runs)
    }

    pub fn recall_ratio(&self, run: &RunMetrics) -> f64 {
        ratio(run.recall, self.popularity.recall)
    }

    pub fn ndcg_ratio(&self, run: &RunMetrics) -> f64 {
        ratio(run.ndcg, self.popularity.ndcg)
    }

    /// `key=value` lines: raw metrics, ratio to popularity and the percent
    /// change `100·(ratio − 1)`.
    pub fn to_key_value(&self) -> String {
        let mut s = format!("k={}\nsplit={}\nqueries={}\n", self.k, self.split, self.popularity.queries);
        for r in self.all_runs() {
            let (rr, nr) = (self.recall_ratio(r), self.ndcg_ratio(r));
            let n = &r.name;
            writeln!(s, "{n}.recall={}", r.recall).unwrap();
            writeln!(s, "{n}.ndcg={}", r.ndcg).unwrap();
            writeln!(s, "{n}.recall_ratio_vs_popularity={rr}").unwrap();
            writeln!(s, "{n}.ndcg_ratio_vs_popularity={nr}").unwrap();
            writeln!(s, "{n}.recall_pct_change_vs_popularity={}", 100.0 * (rr - 1.0)).unwrap();
            writeln!(s, "{n}.ndcg_pct_change_vs_popularity={}", 100.0 * (nr - 1.0)).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,model,value,ratio_vs_popularity\n");
        for r in self.all_runs() {
            writeln!(s, "recall@{},{},{},{}", self.k, r.name, r.recall, self.recall_ratio(r)).unwrap();
            writeln!(s, "ndcg@{},{},{},{}", self.k, r.name, r.ndcg, self.ndcg_ratio(r)).unwrap();
        }
        s
    }
}
