//! Stability and plasticity proxies, rank disparity, and disparity-weighted
//! sampling of replay and transfer items.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};
use crate::losses::ScoreTarget;
use crate::model::{top_n_indices, EmbeddingModel, ParameterSnapshot, RankingList, Table, TeacherEnsemble};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Student,
    Stability,
    Plasticity,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Student => "student",
            Source::Stability => "stability",
            Source::Plasticity => "plasticity",
        }
    }
}

/// Slow and fast EMA memories of the distilled students.
#[derive(Debug, Clone)]
pub struct ProxyPair {
    pub stability: EmbeddingModel,
    pub plasticity: EmbeddingModel,
    pub w_sp: f64,
    pub w_pp: f64,
    last_update_block: usize,
}

fn ema_table(old: &mut Table, new: &Table, w: f64) {
    let shared = old.rows().min(new.rows());
    for r in 0..shared {
        for (o, n) in old.row_mut(r).iter_mut().zip(new.row(r)) {
            *o = (1.0 - w) * *o + w * n;
        }
    }
    old.grow_with(new.rows(), || 0.0);
    for r in shared..new.rows() {
        old.row_mut(r).copy_from_slice(new.row(r));
    }
}

/// `(1 - w) * prev + w * next` on shared rows; rows only present in `next`
/// are copied.
pub fn ema_snapshot(prev: &ParameterSnapshot, next: &ParameterSnapshot, w: f64) -> ParameterSnapshot {
    let mut out = prev.clone();
    ema_table(&mut out.users, &next.users, w);
    ema_table(&mut out.items, &next.items, w);
    out
}

impl ProxyPair {
    /// Both proxies start as exact copies of the first distilled student.
    pub fn new(first: &ParameterSnapshot, w_sp: f64, w_pp: f64, block: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&w_sp) || !(0.0..=1.0).contains(&w_pp) || w_sp >= w_pp {
            return Err(CcdError::InvalidArgument(format!(
                "proxy weights need 0 <= w_sp < w_pp <= 1, got w_sp={w_sp}, w_pp={w_pp}"
            )));
        }
        let model = first.restore(first.variant)?;
        Ok(Self {
            stability: model.clone(),
            plasticity: model,
            w_sp,
            w_pp,
            last_update_block: block,
        })
    }

    pub fn last_update_block(&self) -> usize {
        self.last_update_block
    }

    /// Applies one EMA step with the distilled student of block `block`.
    pub fn update(&mut self, distilled: &ParameterSnapshot, block: usize) -> Result<()> {
        if block <= self.last_update_block {
            return Err(CcdError::DoubleProxyUpdate(block));
        }
        if distilled.variant != self.stability.variant() || distilled.dim() != self.stability.dim() {
            return Err(CcdError::ShapeMismatch("distilled student does not match the proxies".into()));
        }
        for (proxy, w) in [(&mut self.stability, self.w_sp), (&mut self.plasticity, self.w_pp)] {
            ema_table(&mut proxy.users, &distilled.users, w);
            ema_table(&mut proxy.items, &distilled.items, w);
        }
        self.last_update_block = block;
        Ok(())
    }

    pub fn get(&self, source: Source) -> Option<&EmbeddingModel> {
        match source {
            Source::Stability => Some(&self.stability),
            Source::Plasticity => Some(&self.plasticity),
            Source::Student => None,
        }
    }
}

/// `exp(epsilon * (rank_a - rank_b))`; large when B ranks the item far above A.
pub fn disparity(rank_a: usize, rank_b: usize, epsilon: f64) -> f64 {
    (epsilon * (rank_a as f64 - rank_b as f64)).exp()
}

/// Rank disparity of `item` between two lists of the same user. The item must
/// sit in B's list; when it is missing from A's list it takes rank `n`.
pub fn rank_disparity(list_a: &RankingList, list_b: &RankingList, item: usize, n: usize, epsilon: f64) -> Result<f64> {
    if list_a.user != list_b.user {
        return Err(CcdError::InvalidArgument("lists belong to different users".into()));
    }
    let rank_b = list_b.rank_of(item).ok_or_else(|| {
        CcdError::InvalidArgument(format!("item {item} is not in the top-N of {}", list_b.source))
    })?;
    let rank_a = list_a.rank_of(item).unwrap_or(n);
    Ok(disparity(rank_a, rank_b, epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparitySample {
    pub user: usize,
    pub item: usize,
    /// Raw score of the model that ranks the item higher (the list owner).
    pub target_score: f64,
    pub disparity_weight: f64,
    pub source: Source,
}

impl DisparitySample {
    pub fn target(&self) -> ScoreTarget {
        ScoreTarget {
            user: self.user,
            item: self.item,
            target: self.target_score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub n_samples: usize,
    /// Length of the top-N lists.
    pub top_n: usize,
    pub epsilon: f64,
}

/// Sequential weighted draws without replacement; returns chosen indices in
/// draw order.
pub fn weighted_sample_without_replacement(weights: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(k.min(w.len()));
    for _ in 0..k.min(w.len()) {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut x = rng.random::<f64>() * total;
        let mut choice = w.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            if x < wi {
                choice = i;
                break;
            }
            x -= wi;
        }
        // guard against rounding landing on an exhausted slot
        while w[choice] <= 0.0 {
            choice -= 1;
        }
        picked.push(choice);
        w[choice] = 0.0;
    }
    picked
}

/// Samples from B's list with probability proportional to the disparity of A
/// with respect to B. `target_scores[p]` is B's score for `list_b.items[p]`.
pub fn sample_by_disparity(
    list_a: &RankingList,
    list_b: &RankingList,
    target_scores: &[f64],
    source: Source,
    params: &SamplingParams,
    rng: &mut Rng,
) -> Vec<DisparitySample> {
    if params.n_samples == 0 || list_b.is_empty() {
        return Vec::new();
    }
    let rank_a: HashMap<usize, usize> = list_a.items.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let weights: Vec<f64> = list_b
        .items
        .iter()
        .enumerate()
        .map(|(rank_b, item)| disparity(rank_a.get(item).copied().unwrap_or(params.top_n), rank_b, params.epsilon))
        .collect();
    weighted_sample_without_replacement(&weights, params.n_samples, rng)
        .into_iter()
        .map(|p| DisparitySample {
            user: list_b.user,
            item: list_b.items[p],
            target_score: target_scores[p],
            disparity_weight: weights[p],
            source,
        })
        .collect()
}

/// Replay items for one user: drawn from the proxy's top-N by disparity of
/// the current student against the proxy.
pub fn sample_replay_set(
    current: &EmbeddingModel,
    proxy: &EmbeddingModel,
    source: Source,
    user: usize,
    excluded: impl Fn(usize) -> bool,
    params: &SamplingParams,
    rng: &mut Rng,
) -> Vec<DisparitySample> {
    if params.n_samples == 0 {
        return Vec::new();
    }
    let cur_scores = current.output().user_scores(user);
    let proxy_scores = proxy.output().user_scores(user);
    replay_from_scores(user, &cur_scores, &proxy_scores, source, excluded, params, rng)
}

/// [`sample_replay_set`] on precomputed score vectors of one user.
pub fn replay_from_scores(
    user: usize,
    current_scores: &[f64],
    proxy_scores: &[f64],
    source: Source,
    excluded: impl Fn(usize) -> bool,
    params: &SamplingParams,
    rng: &mut Rng,
) -> Vec<DisparitySample> {
    if params.n_samples == 0 {
        return Vec::new();
    }
    let list_a = RankingList {
        user,
        items: top_n_indices(current_scores, params.top_n, &excluded),
        source: "student".into(),
    };
    let list_b = RankingList {
        user,
        items: top_n_indices(proxy_scores, params.top_n, &excluded),
        source: source.as_str().into(),
    };
    let targets: Vec<f64> = list_b.items.iter().map(|&i| proxy_scores[i]).collect();
    sample_by_disparity(&list_a, &list_b, &targets, source, params, rng)
}

/// Transfer items for one user from each student-side model, weighted by the
/// disparity of the fused teacher ranking against that model.
pub fn sample_transfer_sets(
    teacher: &TeacherEnsemble,
    student_side: &[(Source, &EmbeddingModel)],
    user: usize,
    excluded: impl Fn(usize) -> bool,
    params: &SamplingParams,
    rng: &mut Rng,
) -> Vec<DisparitySample> {
    let fused = teacher.outputs().fused_user_scores(user);
    let scores: Vec<(Source, Vec<f64>)> = student_side
        .iter()
        .map(|&(source, model)| (source, model.output().user_scores(user)))
        .collect();
    transfer_from_scores(user, &fused, &scores, excluded, params, rng)
}

/// [`sample_transfer_sets`] on precomputed score vectors of one user.
pub fn transfer_from_scores(
    user: usize,
    teacher_scores: &[f64],
    student_side: &[(Source, Vec<f64>)],
    excluded: impl Fn(usize) -> bool,
    params: &SamplingParams,
    rng: &mut Rng,
) -> Vec<DisparitySample> {
    let teacher_list = RankingList {
        user,
        items: top_n_indices(teacher_scores, params.top_n, &excluded),
        source: "teacher".into(),
    };
    let mut out = Vec::new();
    for (source, scores) in student_side {
        let list = RankingList {
            user,
            items: top_n_indices(scores, params.top_n, &excluded),
            source: source.as_str().into(),
        };
        let targets: Vec<f64> = list.items.iter().map(|&i| scores[i]).collect();
        out.extend(sample_by_disparity(&teacher_list, &list, &targets, *source, params, rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::rng;

    fn snap(users: &[f64], items: &[f64]) -> ParameterSnapshot {
        let rows = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
        ParameterSnapshot {
            variant: Variant::Mf,
            users: Table::from_rows(1, &rows(users)),
            items: Table::from_rows(1, &rows(items)),
        }
    }

    #[test]
    fn ema_matches_direct_formula() {
        let mut p = ProxyPair::new(&snap(&[1.0], &[1.0]), 0.1, 0.9, 1).unwrap();
        p.update(&snap(&[2.0], &[2.0]), 2).unwrap();
        assert!((p.stability.users.row(0)[0] - 1.1).abs() < 1e-15);
        assert!((p.plasticity.users.row(0)[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn extreme_weights() {
        let first = snap(&[1.0, -3.0], &[0.5]);
        let next = snap(&[0.25, 7.0], &[-0.125]);
        let mut p = ProxyPair::new(&first, 0.0, 1.0, 1).unwrap();
        p.update(&next, 2).unwrap();
        assert_eq!(p.plasticity.snapshot(), next);
        assert_eq!(p.stability.snapshot(), first);
    }

    #[test]
    fn new_rows_are_copied() {
        let mut p = ProxyPair::new(&snap(&[1.0], &[1.0]), 0.1, 0.9, 1).unwrap();
        p.update(&snap(&[2.0, 5.0], &[2.0, -4.0, 3.0]), 2).unwrap();
        assert_eq!(p.stability.users.row(1)[0], 5.0);
        assert_eq!(p.stability.items.row(2)[0], 3.0);
        assert_eq!(p.plasticity.items.row(1)[0], -4.0);
    }

    #[test]
    fn second_update_in_block_is_rejected() {
        let mut p = ProxyPair::new(&snap(&[1.0], &[1.0]), 0.1, 0.9, 1).unwrap();
        p.update(&snap(&[2.0], &[2.0]), 2).unwrap();
        let before = (p.stability.snapshot(), p.plasticity.snapshot());
        assert!(matches!(
            p.update(&snap(&[9.0], &[9.0]), 2),
            Err(CcdError::DoubleProxyUpdate(2))
        ));
        assert_eq!((p.stability.snapshot(), p.plasticity.snapshot()), before);
        assert!(ProxyPair::new(&snap(&[1.0], &[1.0]), 0.9, 0.1, 1).is_err());
    }

    #[test]
    fn disparity_values() {
        assert!((disparity(5, 2, 1.0) - 20.085536923187668).abs() < 1e-12);
        assert_eq!(disparity(3, 3, 0.7), 1.0);
        assert!((disparity(0, 4, 0.5) - (-2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rank_disparity_uses_rank_n_for_missing_items() {
        let a = RankingList { user: 0, items: vec![4, 5], source: "a".into() };
        let b = RankingList { user: 0, items: vec![7, 4], source: "b".into() };
        assert!((rank_disparity(&a, &b, 7, 10, 0.1).unwrap() - 1f64.exp()).abs() < 1e-12);
        assert!((rank_disparity(&a, &b, 4, 10, 0.1).unwrap() - (-0.1f64).exp()).abs() < 1e-12);
        assert!(rank_disparity(&a, &b, 5, 10, 0.1).is_err());
    }

    #[test]
    fn zero_samples_is_empty() {
        let mut r = rng::stream(0, "t", &[]);
        let m = EmbeddingModel::new(Variant::Mf, 2, 3, 5, &mut r);
        let params = SamplingParams { n_samples: 0, top_n: 3, epsilon: 0.1 };
        assert!(sample_replay_set(&m, &m, Source::Stability, 0, |_| false, &params, &mut r).is_empty());
    }

    #[test]
    fn oversized_request_returns_everything() {
        let mut r = rng::stream(0, "t", &[]);
        let picked = weighted_sample_without_replacement(&[1.0, 2.0, 3.0], 10, &mut r);
        let mut sorted = picked.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn identical_models_give_unit_weights() {
        let mut r = rng::stream(5, "t", &[]);
        let m = EmbeddingModel::new(Variant::Mf, 3, 2, 12, &mut r);
        let teacher = TeacherEnsemble::new(vec![m.clone()]).unwrap();
        let params = SamplingParams { n_samples: 4, top_n: 5, epsilon: 0.3 };
        let s = sample_transfer_sets(&teacher, &[(Source::Student, &m)], 1, |_| false, &params, &mut r);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|x| (x.disparity_weight - 1.0).abs() < 1e-12));
    }
}
