//! Analytic gradients of every objective against central finite differences.

mod common;

use ccd_core::losses::{
    bpr_loss, cl_anchor_loss, listwise_kd_loss, replay_loss, student_to_teacher_loss, KdTarget, ScoreTarget, Triple,
};
use ccd_core::model::{EmbeddingModel, Gradients, TeacherEnsemble};
use common::{central_difference, entries, random_model, rng, TestRng};
use rand::seq::SliceRandom;
use rand::Rng as _;

const TRIALS: u64 = 100;
const TOL: f64 = 1e-5;
const H: f64 = 1e-5;

fn analytic(g: &Gradients, side: ccd_core::model::Side, row: usize, col: usize) -> f64 {
    g.side(side).row(row).map_or(0.0, |r| r[col])
}

/// Largest |analytic - numeric| over every parameter entry.
fn max_error(model: &mut EmbeddingModel, grads: &Gradients, f: &dyn Fn(&EmbeddingModel) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (side, row, col) in entries(model) {
        let num = central_difference(model, side, row, col, H, f);
        let ana = analytic(grads, side, row, col);
        worst = worst.max((num - ana).abs());
    }
    worst
}

struct Instance {
    r: TestRng,
    nu: usize,
    ni: usize,
    dim: usize,
    graph: bool,
}

fn instance(tag: u64, trial: u64) -> Instance {
    let mut r = rng(tag * 1_000 + trial);
    let nu = r.random_range(1..=4);
    let ni = r.random_range(2..=6);
    let dim = r.random_range(1..=4);
    // every third trial runs through graph propagation
    let graph = trial % 3 == 2;
    Instance { r, nu, ni, dim, graph }
}

#[test]
fn bpr_gradient_matches_finite_differences() {
    for trial in 0..TRIALS {
        let mut c = instance(1, trial);
        let mut model = random_model(c.nu, c.ni, c.dim, c.graph, &mut c.r);
        let triples: Vec<Triple> = (0..c.r.random_range(1..=6))
            .map(|_| {
                let pos = c.r.random_range(0..c.ni);
                let neg = (pos + c.r.random_range(1..c.ni)) % c.ni;
                Triple {
                    user: c.r.random_range(0..c.nu),
                    pos,
                    neg,
                }
            })
            .collect();
        let grads = bpr_loss(&model, &triples).grads;
        let err = max_error(&mut model, &grads, &|m| bpr_loss(m, &triples).value);
        assert!(err < TOL, "trial {trial}: error {err}");
    }
}

#[test]
fn listwise_kd_gradient_matches_finite_differences() {
    for trial in 0..TRIALS {
        let mut c = instance(2, trial);
        let mut model = random_model(c.nu, c.ni, c.dim, c.graph, &mut c.r);
        let targets: Vec<KdTarget> = (0..c.nu)
            .map(|user| {
                let mut ranking: Vec<usize> = (0..c.ni).collect();
                ranking.shuffle(&mut c.r);
                ranking.truncate(c.r.random_range(1..=c.ni));
                KdTarget { user, ranking }
            })
            .collect();
        let n = c.r.random_range(1..=c.ni);
        let grads = listwise_kd_loss(&model, &targets, n).unwrap().grads;
        let err = max_error(&mut model, &grads, &|m| listwise_kd_loss(m, &targets, n).unwrap().value);
        assert!(err < TOL, "trial {trial}: error {err}");
    }
}

fn score_targets(c: &mut Instance) -> Vec<ScoreTarget> {
    (0..c.r.random_range(1..=8))
        .map(|_| ScoreTarget {
            user: c.r.random_range(0..c.nu),
            item: c.r.random_range(0..c.ni),
            target: c.r.random_range(-3.0..3.0),
        })
        .collect()
}

#[test]
fn replay_gradient_matches_finite_differences() {
    for trial in 0..TRIALS {
        let mut c = instance(3, trial);
        let mut model = random_model(c.nu, c.ni, c.dim, c.graph, &mut c.r);
        let targets = score_targets(&mut c);
        let grads = replay_loss(&model, &targets).grads;
        let err = max_error(&mut model, &grads, &|m| replay_loss(m, &targets).value);
        assert!(err < TOL, "trial {trial}: error {err}");
    }
}

#[test]
fn student_to_teacher_gradient_matches_finite_differences() {
    for trial in 0..TRIALS {
        let mut c = instance(4, trial);
        let members: Vec<EmbeddingModel> = (0..c.r.random_range(1..=3))
            .map(|_| random_model(c.nu, c.ni, c.dim, false, &mut c.r))
            .collect();
        let mut teacher = TeacherEnsemble::new(members).unwrap();
        let targets = score_targets(&mut c);
        let loss = student_to_teacher_loss(&teacher, &targets);
        for j in 0..teacher.members.len() {
            let grads = loss.members[j].clone();
            let mut model = teacher.members[j].clone();
            let f = |m: &EmbeddingModel| {
                let mut t = teacher.clone();
                t.members[j] = m.clone();
                student_to_teacher_loss(&t, &targets).value
            };
            let err = max_error(&mut model, &grads, &f);
            assert!(err < TOL, "trial {trial} member {j}: error {err}");
            teacher.members[j] = model;
        }
    }
}

#[test]
fn cl_anchor_gradient_matches_finite_differences() {
    for trial in 0..TRIALS {
        let mut c = instance(5, trial);
        let mut model = random_model(c.nu, c.ni, c.dim, c.graph, &mut c.r);
        // the anchor may predate entities that arrived later
        let anchor = random_model(c.r.random_range(1..=c.nu), c.r.random_range(1..=c.ni), c.dim, false, &mut c.r)
            .snapshot();
        let anchor = ccd_core::model::ParameterSnapshot {
            variant: model.variant(),
            ..anchor
        };
        let grads = cl_anchor_loss(&model, &anchor).unwrap().grads;
        let err = max_error(&mut model, &grads, &|m| cl_anchor_loss(m, &anchor).unwrap().value);
        assert!(err < TOL, "trial {trial}: error {err}");
    }
}
