//! Ranking metrics and continual-learning aggregates.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AuditedStream, Reader};
use crate::model::{standardize, top_n_indices, EnsembleOutput, Output};

/// `|top-K ∩ relevant| / |relevant|`, or `None` for an empty relevant set.
pub fn recall_at_k(list: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = list.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with `1 / log2(p + 2)` discounts.
pub fn ndcg_at_k(list: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| 1.0 / (p as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(|p| 1.0 / (p as f64 + 2.0).log2()).sum();
    Some(dcg / ideal)
}

/// `2 LA RA / (LA + RA)`, zero when either side is zero.
pub fn h_mean(la: f64, ra: f64) -> f64 {
    if la > 0.0 && ra > 0.0 {
        2.0 * la * ra / (la + ra)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
    pub users: usize,
}

/// Anything that can score every item for a user.
pub trait Scorer: Sync {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    fn user_scores(&self, user: usize) -> Vec<f64>;
}

impl Scorer for Output<'_> {
    fn num_users(&self) -> usize {
        Output::num_users(self)
    }

    fn num_items(&self) -> usize {
        Output::num_items(self)
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        Output::user_scores(self, user)
    }
}

impl Scorer for EnsembleOutput<'_> {
    fn num_users(&self) -> usize {
        self.members[0].num_users()
    }

    fn num_items(&self) -> usize {
        self.members[0].num_items()
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        if self.members.len() == 1 {
            let mut s = self.members[0].user_scores(user);
            standardize(&mut s);
            return s;
        }
        self.fused_user_scores(user)
    }
}

/// Per-user training items known up to some block.
#[derive(Debug, Clone, Default)]
pub struct KnownItems {
    per_user: Vec<HashSet<usize>>,
}

impl KnownItems {
    pub fn add(&mut self, user: usize, item: usize) {
        if self.per_user.len() <= user {
            self.per_user.resize_with(user + 1, HashSet::new);
        }
        self.per_user[user].insert(item);
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.per_user.get(user).is_some_and(|s| s.contains(&item))
    }

    pub fn items(&self, user: usize) -> Option<&HashSet<usize>> {
        self.per_user.get(user)
    }

    /// Training items of blocks `0..=through`, read as the evaluator.
    pub fn from_stream(stream: &AuditedStream, through: usize, reader: Reader) -> Self {
        let mut known = Self::default();
        for b in 0..=through {
            for e in stream.train(reader, b) {
                known.add(e.user, e.item);
            }
        }
        known
    }
}

/// Metric values of one block's test edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScore {
    pub block: usize,
    pub users: usize,
    /// Indexed like the `ks` of the owning [`ContinualEval`].
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// LA/RA view of a model evaluated on every block up to the current one.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinualEval {
    pub current: usize,
    pub ks: Vec<usize>,
    pub per_block: Vec<BlockScore>,
}

impl ContinualEval {
    fn k_index(&self, k: usize) -> usize {
        self.ks.iter().position(|&x| x == k).expect("K was not evaluated")
    }

    fn value(&self, s: &BlockScore, metric: Metric, k: usize) -> f64 {
        let idx = self.k_index(k);
        match metric {
            Metric::Recall => s.recall[idx],
            Metric::Ndcg => s.ndcg[idx],
        }
    }

    /// Metric on the current block's test edges.
    pub fn la(&self, metric: Metric, k: usize) -> f64 {
        self.per_block
            .iter()
            .find(|s| s.block == self.current)
            .map_or(0.0, |s| self.value(s, metric, k))
    }

    /// Uniform mean over earlier blocks with at least one scorable user;
    /// absent for the first block.
    pub fn ra(&self, metric: Metric, k: usize) -> Option<f64> {
        let past: Vec<f64> = self
            .per_block
            .iter()
            .filter(|s| s.block < self.current && s.users > 0)
            .map(|s| self.value(s, metric, k))
            .collect();
        if past.is_empty() {
            None
        } else {
            Some(past.iter().sum::<f64>() / past.len() as f64)
        }
    }

    /// Harmonic mean of LA and RA; LA alone when RA is absent.
    pub fn h_mean(&self, metric: Metric, k: usize) -> f64 {
        let la = self.la(metric, k);
        match self.ra(metric, k) {
            Some(ra) => h_mean(la, ra),
            None => la,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UserCase {
    pub user: usize,
    pub relevant: HashSet<usize>,
}

/// Mean Recall and NDCG over users, per K. Users the scorer cannot score and
/// users without scorable relevant items are skipped.
pub fn evaluate_cases(scorer: &impl Scorer, cases: &[UserCase], known: &KnownItems, ks: &[usize]) -> (usize, Vec<f64>, Vec<f64>) {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let ni = scorer.num_items();
    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = cases
        .par_iter()
        .map(|case| {
            if case.user >= scorer.num_users() {
                return None;
            }
            let relevant: HashSet<usize> = case.relevant.iter().copied().filter(|&i| i < ni).collect();
            if relevant.is_empty() {
                return None;
            }
            let scores = scorer.user_scores(case.user);
            let list = top_n_indices(&scores, kmax, |i| known.contains(case.user, i));
            let r = ks.iter().map(|&k| recall_at_k(&list, &relevant, k).unwrap_or(0.0)).collect();
            let n = ks.iter().map(|&k| ndcg_at_k(&list, &relevant, k).unwrap_or(0.0)).collect();
            Some((r, n))
        })
        .collect();
    let mut users = 0;
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    for (r, n) in per_user.into_iter().flatten() {
        users += 1;
        for j in 0..ks.len() {
            recall[j] += r[j];
            ndcg[j] += n[j];
        }
    }
    if users > 0 {
        recall.iter_mut().chain(ndcg.iter_mut()).for_each(|x| *x /= users as f64);
    }
    (users, recall, ndcg)
}

fn test_cases(stream: &AuditedStream, block: usize, keep: impl Fn(usize) -> bool) -> Vec<UserCase> {
    let mut by_user: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
    for e in stream.test(Reader::Evaluator, block) {
        if keep(e.user) {
            by_user.entry(e.user).or_default().insert(e.item);
        }
    }
    by_user
        .into_iter()
        .map(|(user, relevant)| UserCase { user, relevant })
        .collect()
}

/// Evaluates a model trained through block `current` on the test edges of
/// every block `0..=current`. Known training items through `current` are
/// excluded from the ranking.
pub fn compute_la_ra(scorer: &impl Scorer, stream: &AuditedStream, current: usize, ks: &[usize]) -> ContinualEval {
    let known = KnownItems::from_stream(stream, current, Reader::Evaluator);
    let per_block = (0..=current)
        .map(|b| {
            let cases = test_cases(stream, b, |_| true);
            let (users, recall, ndcg) = evaluate_cases(scorer, &cases, &known, ks);
            BlockScore {
                block: b,
                users,
                recall,
                ndcg,
            }
        })
        .collect();
    ContinualEval {
        current,
        ks: ks.to_vec(),
        per_block,
    }
}

/// Users active in `active_block`, absent from every block strictly between,
/// and holding test edges in `return_block`.
pub fn dormant_cohort(stream: &AuditedStream, active_block: usize, return_block: usize) -> Vec<usize> {
    if return_block < active_block + 2 || return_block >= stream.num_blocks() {
        return Vec::new();
    }
    let touched = |b: usize| -> HashSet<usize> {
        stream
            .train(Reader::Evaluator, b)
            .iter()
            .chain(stream.test(Reader::Evaluator, b))
            .map(|e| e.user)
            .collect()
    };
    let active = touched(active_block);
    let middle: HashSet<usize> = (active_block + 1..return_block).flat_map(touched).collect();
    let mut back: Vec<usize> = stream
        .test(Reader::Evaluator, return_block)
        .iter()
        .map(|e| e.user)
        .filter(|u| active.contains(u) && !middle.contains(u))
        .collect();
    back.sort_unstable();
    back.dedup();
    back
}

/// Metric over the dormant cohort, for a model state taken after block
/// `return_block - 1`, on the test edges of `return_block`.
pub fn dormant_user_eval(
    scorer: &impl Scorer,
    stream: &AuditedStream,
    active_block: usize,
    return_block: usize,
    metric: Metric,
    k: usize,
) -> Option<MetricResult> {
    let cohort: HashSet<usize> = dormant_cohort(stream, active_block, return_block).into_iter().collect();
    if cohort.is_empty() {
        return None;
    }
    let known = KnownItems::from_stream(stream, return_block - 1, Reader::Evaluator);
    let cases = test_cases(stream, return_block, |u| cohort.contains(&u));
    slice_result(scorer, &cases, &known, metric, k)
}

/// Metric over users first seen in `block`, on that block's test edges.
pub fn new_user_eval(scorer: &impl Scorer, stream: &AuditedStream, block: usize, metric: Metric, k: usize) -> Option<MetricResult> {
    let registry = stream.registry();
    let known = KnownItems::from_stream(stream, block, Reader::Evaluator);
    let cases = test_cases(stream, block, |u| registry.user_first_block(u) == Some(block));
    slice_result(scorer, &cases, &known, metric, k)
}

fn slice_result(scorer: &impl Scorer, cases: &[UserCase], known: &KnownItems, metric: Metric, k: usize) -> Option<MetricResult> {
    if cases.is_empty() {
        return None;
    }
    let (users, recall, ndcg) = evaluate_cases(scorer, cases, known, &[k]);
    if users == 0 {
        return None;
    }
    Some(MetricResult {
        metric,
        k,
        value: match metric {
            Metric::Recall => recall[0],
            Metric::Ndcg => ndcg[0],
        },
        users,
    })
}
