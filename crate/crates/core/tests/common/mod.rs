#![allow(dead_code)]

use std::sync::Arc;

use ccd_core::data::{BlockGraph, Edge};
use ccd_core::model::{EmbeddingModel, Side, Table, Variant};
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_table(rows: usize, dim: usize, scale: f64, r: &mut TestRng) -> Table {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| r.random_range(-scale..scale)).collect())
        .collect();
    Table::from_rows(dim, &data)
}

pub fn random_edges(nu: usize, ni: usize, count: usize, r: &mut TestRng) -> Vec<Edge> {
    (0..count)
        .map(|t| Edge {
            user: r.random_range(0..nu),
            item: r.random_range(0..ni),
            timestamp: t as u64,
        })
        .collect()
}

/// A random MF or graph-propagation model; graph models get a random graph.
pub fn random_model(nu: usize, ni: usize, dim: usize, graph: bool, r: &mut TestRng) -> EmbeddingModel {
    let variant = if graph { Variant::GraphProp { layers: r.random_range(1..=2) } } else { Variant::Mf };
    let mut m = EmbeddingModel::from_tables(variant, random_table(nu, dim, 1.0, r), random_table(ni, dim, 1.0, r));
    if graph {
        let edges = random_edges(nu, ni, nu * 2, r);
        m.set_graph(Arc::new(BlockGraph::from_edges(nu, ni, &edges)));
    }
    m
}

/// Central difference of `f` with respect to one parameter entry.
pub fn central_difference(
    model: &mut EmbeddingModel,
    side: Side,
    row: usize,
    col: usize,
    h: f64,
    f: &dyn Fn(&EmbeddingModel) -> f64,
) -> f64 {
    let orig = model.table(side).row(row)[col];
    model.table_mut(side).row_mut(row)[col] = orig + h;
    let plus = f(model);
    model.table_mut(side).row_mut(row)[col] = orig - h;
    let minus = f(model);
    model.table_mut(side).row_mut(row)[col] = orig;
    (plus - minus) / (2.0 * h)
}

pub fn entries(model: &EmbeddingModel) -> Vec<(Side, usize, usize)> {
    let mut v = Vec::new();
    for side in [Side::User, Side::Item] {
        let t = model.table(side);
        for r in 0..t.rows() {
            for c in 0..t.dim() {
                v.push((side, r, c));
            }
        }
    }
    v
}
