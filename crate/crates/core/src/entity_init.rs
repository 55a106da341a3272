//! Embedding initialization for entities that appear for the first time.
//!
//! A new user starts at the mean of its 1-hop items plus the prominent users
//! it reaches in two hops; items are symmetric. User and item rows share one
//! space in MF, so a single mean over the mixed set is well defined.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{BlockGraph, Hops, Node};
use crate::error::{CcdError, Result};
use crate::model::{init_value, EmbeddingModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InitStrategy {
    #[default]
    #[serde(rename = "ccd_2hop")]
    TwoHop,
    #[serde(rename = "onehop")]
    OneHop,
    #[serde(rename = "random")]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    None,
    /// No prominent 2-hop neighbor qualified; only direct partners are used.
    OneHopOnly,
    /// Nothing to aggregate; the row is drawn from the init distribution.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitPlan {
    pub entity: Node,
    pub neighbor_set: BTreeSet<Node>,
    pub fallback: Fallback,
}

fn one_hop(graph: &BlockGraph, entity: Node, usable: &impl Fn(Node) -> bool) -> BTreeSet<Node> {
    let wrap = match entity {
        Node::User(_) => Node::Item,
        Node::Item(_) => Node::User,
    };
    graph
        .neighbors(entity, Hops::One)
        .into_iter()
        .map(wrap)
        .filter(|n| usable(*n))
        .collect()
}

fn finish(entity: Node, neighbor_set: BTreeSet<Node>, extended: bool) -> InitPlan {
    let fallback = if neighbor_set.is_empty() {
        Fallback::Random
    } else if extended {
        Fallback::None
    } else {
        Fallback::OneHopOnly
    };
    InitPlan {
        entity,
        neighbor_set,
        fallback,
    }
}

/// Plans over `N1 ∪ (N2 ∩ P)` for each new entity. `usable` reports whether
/// a neighbor already has an embedding; other new entities do not.
pub fn plan_initialization(
    graph: &BlockGraph,
    new_entities: &[Node],
    prominent: (&BTreeSet<usize>, &BTreeSet<usize>),
    usable: impl Fn(Node) -> bool,
) -> Vec<InitPlan> {
    let (prominent_users, prominent_items) = prominent;
    new_entities
        .iter()
        .map(|&entity| {
            let mut set = one_hop(graph, entity, &usable);
            let two_hop: Vec<Node> = match entity {
                Node::User(_) => graph
                    .neighbors(entity, Hops::Two)
                    .into_iter()
                    .filter(|u| prominent_users.contains(u))
                    .map(Node::User)
                    .collect(),
                Node::Item(_) => graph
                    .neighbors(entity, Hops::Two)
                    .into_iter()
                    .filter(|i| prominent_items.contains(i))
                    .map(Node::Item)
                    .collect(),
            };
            let before = set.len();
            set.extend(two_hop.into_iter().filter(|n| usable(*n)));
            let extended = set.len() > before;
            finish(entity, set, extended)
        })
        .collect()
}

/// Direct-partner baseline: mean of 1-hop neighbors only.
pub fn onehop_baseline(graph: &BlockGraph, new_entities: &[Node], usable: impl Fn(Node) -> bool) -> Vec<InitPlan> {
    new_entities
        .iter()
        .map(|&entity| finish(entity, one_hop(graph, entity, &usable), false))
        .collect()
}

/// Every entity falls back to a random row.
pub fn random_plans(new_entities: &[Node]) -> Vec<InitPlan> {
    new_entities
        .iter()
        .map(|&entity| finish(entity, BTreeSet::new(), false))
        .collect()
}

/// Writes the planned rows into `model`. Random rows are seeded per entity,
/// so re-applying the same plans gives identical tables.
pub fn apply_initialization(model: &mut EmbeddingModel, plans: &[InitPlan], seed: u64) -> Result<()> {
    let dim = model.dim();
    let row_of = |model: &EmbeddingModel, n: Node| -> Result<Vec<f64>> {
        let (table, idx, what) = match n {
            Node::User(u) => (&model.users, u, "user"),
            Node::Item(i) => (&model.items, i, "item"),
        };
        if idx >= table.rows() {
            return Err(CcdError::OutOfRange {
                what,
                index: idx,
                size: table.rows(),
            });
        }
        Ok(table.row(idx).to_vec())
    };
    for plan in plans {
        // target row must exist
        row_of(model, plan.entity)?;
        let row = if plan.neighbor_set.is_empty() {
            let coord = match plan.entity {
                Node::User(u) => [0, u as u64],
                Node::Item(i) => [1, i as u64],
            };
            let mut r = rng::stream(seed, "entity-init", &coord);
            (0..dim).map(|_| init_value(dim, &mut r)).collect()
        } else {
            let mut acc = vec![0.0; dim];
            for &n in &plan.neighbor_set {
                for (a, x) in acc.iter_mut().zip(row_of(model, n)?) {
                    *a += x;
                }
            }
            let k = plan.neighbor_set.len() as f64;
            acc.iter_mut().for_each(|a| *a /= k);
            acc
        };
        let dst = match plan.entity {
            Node::User(u) => model.users.row_mut(u),
            Node::Item(i) => model.items.row_mut(i),
        };
        dst.copy_from_slice(&row);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Edge;
    use crate::model::{Table, Variant};

    fn e(user: usize, item: usize) -> Edge {
        Edge { user, item, timestamp: 0 }
    }

    #[test]
    fn new_user_gets_items_and_prominent_two_hop_users() {
        // u0 is new; u0-i1, u5-i1 and u5 is prominent.
        let g = BlockGraph::from_edges(6, 2, &[e(0, 1), e(5, 1), e(3, 0)]);
        let pu = BTreeSet::from([5]);
        let pi = BTreeSet::new();
        let plans = plan_initialization(&g, &[Node::User(0)], (&pu, &pi), |n| n != Node::User(0));
        assert_eq!(plans[0].neighbor_set, BTreeSet::from([Node::Item(1), Node::User(5)]));
        assert_eq!(plans[0].fallback, Fallback::None);
    }

    #[test]
    fn isolated_user_falls_back_to_random() {
        let g = BlockGraph::from_edges(3, 2, &[e(0, 1)]);
        let empty = BTreeSet::new();
        let plans = plan_initialization(&g, &[Node::User(2)], (&empty, &empty), |_| true);
        assert_eq!(plans[0].fallback, Fallback::Random);
        assert!(plans[0].neighbor_set.is_empty());
        assert_eq!(onehop_baseline(&g, &[Node::User(2)], |_| true)[0].fallback, Fallback::Random);
    }

    #[test]
    fn new_neighbors_are_skipped() {
        // new user u0 only touches new item i0
        let g = BlockGraph::from_edges(1, 1, &[e(0, 0)]);
        let empty = BTreeSet::new();
        let news = [Node::User(0), Node::Item(0)];
        let plans = plan_initialization(&g, &news, (&empty, &empty), |n| !news.contains(&n));
        assert!(plans.iter().all(|p| p.fallback == Fallback::Random));
    }

    #[test]
    fn onehop_only_when_no_prominent_partner() {
        let g = BlockGraph::from_edges(2, 1, &[e(0, 0), e(1, 0)]);
        let empty = BTreeSet::new();
        let plans = plan_initialization(&g, &[Node::User(0)], (&empty, &empty), |n| n != Node::User(0));
        assert_eq!(plans[0].fallback, Fallback::OneHopOnly);
    }

    fn model(users: &[Vec<f64>], items: &[Vec<f64>]) -> EmbeddingModel {
        EmbeddingModel::from_tables(Variant::Mf, Table::from_rows(2, users), Table::from_rows(2, items))
    }

    #[test]
    fn mean_pooling() {
        let mut m = model(&[vec![0.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]]);
        let plan = InitPlan {
            entity: Node::User(0),
            neighbor_set: BTreeSet::from([Node::Item(0), Node::User(1)]),
            fallback: Fallback::None,
        };
        apply_initialization(&mut m, &[plan], 0).unwrap();
        assert_eq!(m.users.row(0), &[0.5, 0.5]);

        let single = InitPlan {
            entity: Node::Item(0),
            neighbor_set: BTreeSet::from([Node::User(1)]),
            fallback: Fallback::OneHopOnly,
        };
        apply_initialization(&mut m, &[single], 0).unwrap();
        assert_eq!(m.items.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn missing_row_is_an_error() {
        let mut m = model(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]]);
        let plan = InitPlan {
            entity: Node::User(0),
            neighbor_set: BTreeSet::from([Node::Item(4)]),
            fallback: Fallback::None,
        };
        assert!(apply_initialization(&mut m, &[plan], 0).is_err());
    }

    #[test]
    fn random_rows_are_reproducible() {
        let mut a = model(&[vec![0.0, 0.0]], &[vec![0.0, 0.0]]);
        let mut b = a.clone();
        let plans = random_plans(&[Node::User(0), Node::Item(0)]);
        apply_initialization(&mut a, &plans, 7).unwrap();
        apply_initialization(&mut b, &plans, 7).unwrap();
        apply_initialization(&mut b, &plans, 7).unwrap();
        assert_eq!(a.users, b.users);
        assert!(a.users.row(0).iter().all(|x| x.abs() <= 0.25));
    }
}
