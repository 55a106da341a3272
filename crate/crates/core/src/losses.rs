//! Training objectives with analytic gradients, plus the SGD update.
//!
//! Every loss is computed against a model's final embeddings and then pushed
//! back through [`EmbeddingModel::backward`], so the same code serves MF and
//! graph-propagation scorers.

use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};
use crate::model::{dot, moments, EmbeddingModel, Gradients, Output, ParameterSnapshot, Side, TeacherEnsemble};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub value: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub lambda_re: f64,
    pub lambda_cl: f64,
    /// Initial weight of the student-to-teacher term before annealing.
    pub lambda_st: f64,
    /// Annealing time constant, in epochs.
    pub tau: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_re: 0.5,
            lambda_cl: 1.0,
            lambda_st: 0.5,
            tau: 5.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("objective.lambda_re", self.lambda_re),
            ("objective.lambda_cl", self.lambda_cl),
            ("objective.lambda_st", self.lambda_st),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CcdError::config(name, "must be a finite value >= 0"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CcdError::config("objective.tau", "must be > 0"));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

fn with_backward(model: &EmbeddingModel, value: f64, out_grad: Gradients) -> LossBatch {
    LossBatch {
        value,
        grads: model.backward(out_grad),
    }
}

/// Summed `-log sigmoid(r_ui - r_uj)` over the triples.
pub fn bpr_loss(model: &EmbeddingModel, triples: &[Triple]) -> LossBatch {
    let out = model.output();
    let (value, g) = bpr_on_output(&out, triples);
    with_backward(model, value, g)
}

pub(crate) fn bpr_on_output(out: &Output<'_>, triples: &[Triple]) -> (f64, Gradients) {
    let mut g = Gradients::zeros(out.num_users(), out.num_items(), out.users.dim());
    let mut value = 0.0;
    for t in triples {
        let u = out.users.row(t.user);
        let vi = out.items.row(t.pos);
        let vj = out.items.row(t.neg);
        let x = dot(u, vi) - dot(u, vj);
        value += softplus(-x);
        // d/dx of -log sigmoid(x) is -(1 - sigmoid(x)) = -sigmoid(-x)
        let c = -sigmoid(-x);
        let diff: Vec<f64> = vi.iter().zip(vj).map(|(a, b)| a - b).collect();
        g.users.add_scaled(t.user, c, &diff);
        g.items.add_scaled(t.pos, c, u);
        g.items.add_scaled(t.neg, -c, u);
    }
    (value, g)
}

/// Teacher permutation for one user: candidate items best first. The first
/// `n` entries are the ranked list, the remainder forms the denominator tail.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTarget {
    pub user: usize,
    pub ranking: Vec<usize>,
}

/// Negative Plackett-Luce log-likelihood of the teacher's top-`n` ordering
/// under the student's scores.
pub fn listwise_kd_loss(student: &EmbeddingModel, targets: &[KdTarget], n: usize) -> Result<LossBatch> {
    if student.num_items() == 0 {
        return Err(CcdError::InvalidArgument("empty catalog".into()));
    }
    let out = student.output();
    let mut g = student.zero_gradients();
    let mut value = 0.0;
    for t in targets {
        if t.ranking.is_empty() {
            continue;
        }
        let n = n.min(t.ranking.len());
        let urow = out.users.row(t.user);
        let s: Vec<f64> = t.ranking.iter().map(|&i| dot(urow, out.items.row(i))).collect();
        let len = s.len();
        // Suffix log-sum-exp; only positions 0..n are needed as denominators.
        let mut suffix = vec![0.0; len];
        let mut acc = f64::NEG_INFINITY;
        for p in (0..len).rev() {
            acc = log_add_exp(acc, s[p]);
            suffix[p] = acc;
        }
        let lse = &suffix[..n];
        value += lse.iter().zip(&s[..n]).map(|(l, x)| l - x).sum::<f64>();

        let last = lse[n - 1];
        let tail_coef: f64 = lse.iter().map(|l| (last - l).exp()).sum();
        let mut coef = vec![0.0; len];
        for p in 0..len {
            coef[p] = if p < n {
                lse[..=p].iter().map(|l| (s[p] - l).exp()).sum::<f64>() - 1.0
            } else {
                (s[p] - last).exp() * tail_coef
            };
        }
        let mut du = vec![0.0; urow.len()];
        for (p, &item) in t.ranking.iter().enumerate() {
            let c = coef[p];
            if c == 0.0 {
                continue;
            }
            g.items.add_scaled(item, c, urow);
            for (d, x) in du.iter_mut().zip(out.items.row(item)) {
                *d += c * x;
            }
        }
        g.users.add_scaled(t.user, 1.0, &du);
    }
    Ok(with_backward(student, value, g))
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// A regression target for one (user, item) score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTarget {
    pub user: usize,
    pub item: usize,
    pub target: f64,
}

/// Binary cross-entropy between `sigmoid(score)` and `sigmoid(target)`.
#[inline]
pub fn bce(score: f64, target: f64) -> f64 {
    let p = sigmoid(target);
    // -[p log s(x) + (1-p) log(1 - s(x))] = p softplus(-x) + (1-p) softplus(x)
    p * softplus(-score) + (1.0 - p) * softplus(score)
}

/// Summed BCE of the student against proxy predictions; targets are constants.
pub fn replay_loss(student: &EmbeddingModel, targets: &[ScoreTarget]) -> LossBatch {
    let out = student.output();
    let mut g = student.zero_gradients();
    let mut value = 0.0;
    for t in targets {
        let urow = out.users.row(t.user);
        let vrow = out.items.row(t.item);
        let x = dot(urow, vrow);
        value += bce(x, t.target);
        let c = sigmoid(x) - sigmoid(t.target);
        g.users.add_scaled(t.user, c, vrow);
        g.items.add_scaled(t.item, c, urow);
    }
    with_backward(student, value, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleLoss {
    pub value: f64,
    /// One gradient set per ensemble member.
    pub members: Vec<Gradients>,
}

/// BCE between the fused (standardized-mean) teacher score and student-side
/// targets. Each member receives the exact gradient of its own standardized
/// contribution, including the dependence of the per-user mean and deviation
/// on every item score.
pub fn student_to_teacher_loss(teacher: &TeacherEnsemble, targets: &[ScoreTarget]) -> EnsembleLoss {
    let outs = teacher.outputs();
    let m = teacher.members.len() as f64;
    let mut grads: Vec<Gradients> = teacher.members.iter().map(EmbeddingModel::zero_gradients).collect();
    let mut value = 0.0;

    let mut users: Vec<usize> = targets.iter().map(|t| t.user).collect();
    users.sort_unstable();
    users.dedup();
    for user in users {
        let mine: Vec<&ScoreTarget> = targets.iter().filter(|t| t.user == user).collect();
        let per_member: Vec<(Vec<f64>, f64, f64)> = outs
            .members
            .iter()
            .map(|o| {
                let s = o.user_scores(user);
                let (mu, sd) = moments(&s);
                (s, mu, sd)
            })
            .collect();
        let fused = |item: usize| -> f64 {
            per_member
                .iter()
                .map(|(s, mu, sd)| if *sd > 0.0 { (s[item] - mu) / sd } else { 0.0 })
                .sum::<f64>()
                / m
        };
        // dL/dfused per target item
        let mut upstream: Vec<(usize, f64)> = Vec::with_capacity(mine.len());
        for t in &mine {
            let f = fused(t.item);
            value += bce(f, t.target);
            upstream.push((t.item, sigmoid(f) - sigmoid(t.target)));
        }
        for (k, (s, mu, sd)) in per_member.iter().enumerate() {
            if *sd == 0.0 {
                continue;
            }
            let n = s.len() as f64;
            let total: f64 = upstream.iter().map(|(_, a)| a / m).sum();
            let weighted: f64 = upstream.iter().map(|(i, a)| a / m * (s[*i] - mu)).sum();
            let mut coef: Vec<f64> = s
                .iter()
                .map(|sj| -total / (n * sd) - (sj - mu) * weighted / (n * sd * sd * sd))
                .collect();
            for (i, a) in &upstream {
                coef[*i] += a / m / sd;
            }
            let out = &outs.members[k];
            let urow = out.users.row(user);
            let mut du = vec![0.0; urow.len()];
            for (j, &c) in coef.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let v = out.items.row(j);
                for (d, x) in du.iter_mut().zip(v) {
                    *d += c * x;
                }
                grads[k].items.add_scaled(j, c, urow);
            }
            grads[k].users.add_scaled(user, 1.0, &du);
        }
    }
    let members = teacher
        .members
        .iter()
        .zip(grads)
        .map(|(model, g)| model.backward(g))
        .collect();
    EnsembleLoss { value, members }
}

/// `0.5 * sum ||row - anchor_row||^2` over rows that existed in the anchor.
pub fn cl_anchor_loss(model: &EmbeddingModel, anchor: &ParameterSnapshot) -> Result<LossBatch> {
    if anchor.dim() != model.dim() {
        return Err(CcdError::ShapeMismatch(format!(
            "anchor width {} vs model width {}",
            anchor.dim(),
            model.dim()
        )));
    }
    if anchor.users.rows() > model.num_users() || anchor.items.rows() > model.num_items() {
        return Err(CcdError::ShapeMismatch("anchor has more rows than the model".into()));
    }
    let mut g = model.zero_gradients();
    let mut value = 0.0;
    for side in [Side::User, Side::Item] {
        let a = match side {
            Side::User => &anchor.users,
            Side::Item => &anchor.items,
        };
        let t = model.table(side);
        let gt = match side {
            Side::User => &mut g.users,
            Side::Item => &mut g.items,
        };
        for r in 0..a.rows() {
            let diff: Vec<f64> = t.row(r).iter().zip(a.row(r)).map(|(x, y)| x - y).collect();
            value += 0.5 * dot(&diff, &diff);
            gt.add_scaled(r, 1.0, &diff);
        }
    }
    Ok(LossBatch { value, grads: g })
}

/// `lambda_st * exp(-epoch / tau)`
pub fn anneal_lambda_st(epoch: usize, weights: &ObjectiveWeights) -> f64 {
    weights.lambda_st * (-(epoch as f64) / weights.tau).exp()
}

/// Updates each touched row by `-lr * (grad + weight_decay * row)`. Nothing is
/// applied when any gradient entry is non-finite.
pub fn sgd_step(model: &mut EmbeddingModel, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    for ((side, row), g) in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            log::error!("non-finite gradient on {side:?} row {row}: {g:?}");
            return Err(CcdError::NonFiniteGradient { side, row });
        }
    }
    for ((side, row), g) in grads.iter() {
        let r = model.table_mut(side).row_mut(row);
        for (w, d) in r.iter_mut().zip(g) {
            *w -= lr * (d + weight_decay * *w);
        }
    }
    Ok(())
}
