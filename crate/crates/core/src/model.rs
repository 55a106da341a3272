//! Embedding scorers, the teacher ensemble, top-N ranking, and parameter
//! snapshots.

use std::borrow::Cow;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::BlockGraph;
use crate::error::{CcdError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    User,
    Item,
}

/// Row-major matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    dim: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "row width");
            data.extend_from_slice(r);
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn grow_with(&mut self, rows: usize, mut fill: impl FnMut() -> f64) {
        while self.rows() < rows {
            for _ in 0..self.dim {
                self.data.push(fill());
            }
        }
    }
}

/// Inner product with four interleaved partial sums, which lets the
/// compiler vectorize the reduction.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mf,
    /// Mean-aggregation propagation over the block graph, final embedding is
    /// the average of layers `0..=layers`.
    GraphProp { layers: usize },
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Mf => write!(f, "mf"),
            Variant::GraphProp { layers } => write!(f, "graph_prop(L={layers})"),
        }
    }
}

/// Uniform initialization in `[-0.5/d, 0.5/d]`.
pub fn init_value(dim: usize, rng: &mut Rng) -> f64 {
    let half = 0.5 / dim as f64;
    rng.random_range(-half..=half)
}

/// Initial values of one row, from a stream keyed by `(key, side, row)`.
pub fn seeded_row(dim: usize, seed: u64, key: &[u64], side: Side, row: usize) -> Vec<f64> {
    let mut coords = key.to_vec();
    coords.push(side as u64);
    coords.push(row as u64);
    let mut r = crate::rng::stream(seed, "row-init", &coords);
    (0..dim).map(|_| init_value(dim, &mut r)).collect()
}

/// Dense user and item tables behind a uniform scorer.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    variant: Variant,
    pub users: Table,
    pub items: Table,
    graph: Option<Arc<BlockGraph>>,
}

impl EmbeddingModel {
    pub fn new(variant: Variant, dim: usize, num_users: usize, num_items: usize, rng: &mut Rng) -> Self {
        let mut users = Table::zeros(0, dim);
        let mut items = Table::zeros(0, dim);
        users.grow_with(num_users, || init_value(dim, rng));
        items.grow_with(num_items, || init_value(dim, rng));
        Self::from_tables(variant, users, items)
    }

    pub fn from_tables(variant: Variant, users: Table, items: Table) -> Self {
        assert_eq!(users.dim(), items.dim(), "user and item widths differ");
        Self {
            variant,
            users,
            items,
            graph: None,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn num_parameters(&self) -> usize {
        self.users.as_slice().len() + self.items.as_slice().len()
    }

    pub fn table(&self, side: Side) -> &Table {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn table_mut(&mut self, side: Side) -> &mut Table {
        match side {
            Side::User => &mut self.users,
            Side::Item => &mut self.items,
        }
    }

    /// Graph used by the propagation variant; ignored by MF.
    pub fn set_graph(&mut self, graph: Arc<BlockGraph>) {
        self.graph = Some(graph);
    }

    pub fn graph(&self) -> Option<&Arc<BlockGraph>> {
        self.graph.as_ref()
    }

    /// Appends randomly initialized rows up to the requested counts.
    pub fn grow(&mut self, num_users: usize, num_items: usize, rng: &mut Rng) {
        let dim = self.dim();
        self.users.grow_with(num_users, || init_value(dim, rng));
        self.items.grow_with(num_items, || init_value(dim, rng));
    }

    /// Like [`EmbeddingModel::new`], but every row is drawn from its own
    /// stream keyed by `(key, side, row)`. A row's initial value then does not
    /// depend on how many other rows exist.
    pub fn seeded(variant: Variant, dim: usize, num_users: usize, num_items: usize, seed: u64, key: &[u64]) -> Self {
        let mut m = Self::from_tables(variant, Table::zeros(0, dim), Table::zeros(0, dim));
        m.grow_seeded(num_users, num_items, seed, key);
        m
    }

    /// Appends rows drawn as in [`EmbeddingModel::seeded`].
    pub fn grow_seeded(&mut self, num_users: usize, num_items: usize, seed: u64, key: &[u64]) {
        let dim = self.dim();
        for (side, target) in [(Side::User, num_users), (Side::Item, num_items)] {
            let table = self.table_mut(side);
            let start = table.rows();
            let mut fresh = Vec::with_capacity(target.saturating_sub(start) * dim);
            for row in start..target {
                fresh.extend(seeded_row(dim, seed, key, side, row));
            }
            let mut values = fresh.into_iter();
            table.grow_with(target, || values.next().expect("row values"));
        }
    }

    /// Appends zero rows up to the requested counts.
    pub fn grow_zeroed(&mut self, num_users: usize, num_items: usize) {
        self.users.grow_with(num_users, || 0.0);
        self.items.grow_with(num_items, || 0.0);
    }

    /// Final user and item embeddings whose dot products are the scores.
    pub fn output(&self) -> Output<'_> {
        match (self.variant, &self.graph) {
            (Variant::Mf, _) | (Variant::GraphProp { layers: 0 }, _) => Output {
                users: Cow::Borrowed(&self.users),
                items: Cow::Borrowed(&self.items),
            },
            (Variant::GraphProp { layers }, graph) => {
                let empty = BlockGraph::default();
                let graph = graph.as_deref().unwrap_or(&empty);
                let (users, items) = propagate(graph, &self.users, &self.items, layers, false);
                Output {
                    users: Cow::Owned(users),
                    items: Cow::Owned(items),
                }
            }
        }
    }

    /// Maps gradients on the final embeddings back to the parameter tables.
    pub fn backward(&self, out_grad: Gradients) -> Gradients {
        match (self.variant, &self.graph) {
            (Variant::Mf, _) | (Variant::GraphProp { layers: 0 }, _) => out_grad,
            (Variant::GraphProp { layers }, graph) => {
                let empty = BlockGraph::default();
                let graph = graph.as_deref().unwrap_or(&empty);
                let (gu, gi) = propagate(
                    graph,
                    &out_grad.users.to_table(),
                    &out_grad.items.to_table(),
                    layers,
                    true,
                );
                Gradients {
                    users: GradTable::from_dense(gu),
                    items: GradTable::from_dense(gi),
                }
            }
        }
    }

    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        check_index("user", user, self.num_users())?;
        check_index("item", item, self.num_items())?;
        Ok(self.output().score(user, item))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros(self.num_users(), self.num_items(), self.dim())
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            variant: self.variant,
            users: self.users.clone(),
            items: self.items.clone(),
        }
    }
}

fn check_index(what: &'static str, index: usize, size: usize) -> Result<()> {
    if index >= size {
        return Err(CcdError::OutOfRange { what, index, size });
    }
    Ok(())
}

/// Forward mean-aggregation propagation, or its transpose when `transpose` is
/// set (used to push output gradients back to layer-0 parameters).
fn propagate(graph: &BlockGraph, users: &Table, items: &Table, layers: usize, transpose: bool) -> (Table, Table) {
    let dim = users.dim();
    let nu = users.rows();
    let ni = items.rows();
    let user_nbrs = |u: usize| -> Vec<usize> { graph.user_items(u).iter().copied().filter(|&i| i < ni).collect() };
    let item_nbrs = |i: usize| -> Vec<usize> { graph.item_users(i).iter().copied().filter(|&u| u < nu).collect() };
    let u_adj: Vec<Vec<usize>> = (0..nu).map(user_nbrs).collect();
    let i_adj: Vec<Vec<usize>> = (0..ni).map(item_nbrs).collect();

    let mut acc_u = users.clone();
    let mut acc_i = items.clone();
    let mut cur_u = users.clone();
    let mut cur_i = items.clone();
    for _ in 0..layers {
        let mut next_u = Table::zeros(nu, dim);
        let mut next_i = Table::zeros(ni, dim);
        if !transpose {
            for u in 0..nu {
                let n = u_adj[u].len();
                if n == 0 {
                    continue;
                }
                let row = next_u.row_mut(u);
                for &i in &u_adj[u] {
                    for (r, x) in row.iter_mut().zip(cur_i.row(i)) {
                        *r += x / n as f64;
                    }
                }
            }
            for i in 0..ni {
                let n = i_adj[i].len();
                if n == 0 {
                    continue;
                }
                let row = next_i.row_mut(i);
                for &u in &i_adj[i] {
                    for (r, x) in row.iter_mut().zip(cur_u.row(u)) {
                        *r += x / n as f64;
                    }
                }
            }
        } else {
            // (A^T g)_item[i] = sum over users u adjacent to i of g_user[u] / deg(u)
            for u in 0..nu {
                let n = u_adj[u].len();
                for &i in &u_adj[u] {
                    let src = cur_u.row(u).to_vec();
                    for (r, x) in next_i.row_mut(i).iter_mut().zip(&src) {
                        *r += x / n as f64;
                    }
                }
            }
            for i in 0..ni {
                let n = i_adj[i].len();
                for &u in &i_adj[i] {
                    let src = cur_i.row(i).to_vec();
                    for (r, x) in next_u.row_mut(u).iter_mut().zip(&src) {
                        *r += x / n as f64;
                    }
                }
            }
        }
        for (a, x) in acc_u.as_mut_slice().iter_mut().zip(next_u.as_slice()) {
            *a += x;
        }
        for (a, x) in acc_i.as_mut_slice().iter_mut().zip(next_i.as_slice()) {
            *a += x;
        }
        cur_u = next_u;
        cur_i = next_i;
    }
    let scale = 1.0 / (layers + 1) as f64;
    acc_u.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    acc_i.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    (acc_u, acc_i)
}

/// Materialized final embeddings of a model.
#[derive(Debug, Clone)]
pub struct Output<'a> {
    pub users: Cow<'a, Table>,
    pub items: Cow<'a, Table>,
}

impl Output<'_> {
    #[inline]
    pub fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.users.row(user), self.items.row(item))
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    /// Scores of `user` against every item.
    pub fn user_scores(&self, user: usize) -> Vec<f64> {
        let u = self.users.row(user);
        (0..self.items.rows()).map(|i| dot(u, self.items.row(i))).collect()
    }

    pub fn into_owned(self) -> Output<'static> {
        Output {
            users: Cow::Owned(self.users.into_owned()),
            items: Cow::Owned(self.items.into_owned()),
        }
    }
}

/// Gradient rows for one table; only touched rows are reported.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    dim: usize,
    data: Vec<f64>,
    touched: Vec<bool>,
}

impl GradTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; rows * dim],
            touched: vec![false; rows],
        }
    }

    fn from_dense(t: Table) -> Self {
        let rows = t.rows();
        let dim = t.dim();
        let touched = (0..rows).map(|r| t.row(r).iter().any(|&x| x != 0.0)).collect();
        Self {
            dim,
            data: t.data,
            touched,
        }
    }

    fn to_table(&self) -> Table {
        Table {
            dim: self.dim,
            data: self.data.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        self.touched.len()
    }

    /// `row += coef * v`
    #[inline]
    pub fn add_scaled(&mut self, row: usize, coef: f64, v: &[f64]) {
        self.touched[row] = true;
        let dst = &mut self.data[row * self.dim..(row + 1) * self.dim];
        for (d, x) in dst.iter_mut().zip(v) {
            *d += coef * x;
        }
    }

    pub fn row(&self, row: usize) -> Option<&[f64]> {
        self.touched[row].then(|| &self.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.touched
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(move |(r, _)| (r, &self.data[r * self.dim..(r + 1) * self.dim]))
    }

    pub fn merge(&mut self, other: &GradTable) {
        for (r, g) in other.iter() {
            self.add_scaled(r, 1.0, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }
}

/// Gradient contributions keyed by (table, row).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: GradTable,
    pub items: GradTable,
}

impl Gradients {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            users: GradTable::zeros(num_users, dim),
            items: GradTable::zeros(num_items, dim),
        }
    }

    pub fn side(&self, side: Side) -> &GradTable {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ((Side, usize), &[f64])> + '_ {
        self.users
            .iter()
            .map(|(r, g)| ((Side::User, r), g))
            .chain(self.items.iter().map(|(r, g)| ((Side::Item, r), g)))
    }

    pub fn is_empty(&self) -> bool {
        self.iter().next().is_none()
    }

    pub fn merge(&mut self, other: &Gradients) {
        self.users.merge(&other.users);
        self.items.merge(&other.items);
    }

    pub fn scale(&mut self, c: f64) {
        self.users.scale(c);
        self.items.scale(c);
    }
}

/// Ordered recommendation list for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingList {
    pub user: usize,
    pub items: Vec<usize>,
    pub source: String,
}

impl RankingList {
    /// 0-based position of `item`, or `None` when it is outside the list.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.items.iter().position(|&i| i == item)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Indices of the `n` highest scores, ties broken by ascending index.
pub fn top_n_indices(scores: &[f64], n: usize, excluded: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n == 0 {
        return Vec::new();
    }
    if cand.len() > n {
        cand.select_nth_unstable_by(n - 1, order);
        cand.truncate(n);
    }
    cand.sort_by(order);
    cand
}

/// Full candidate ordering (every non-excluded item), best first.
pub fn full_ranking(scores: &[f64], excluded: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    cand.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    cand
}

pub fn top_n(
    model: &EmbeddingModel,
    user: usize,
    n: usize,
    excluded: impl Fn(usize) -> bool,
    source: &str,
) -> Result<RankingList> {
    check_index("user", user, model.num_users())?;
    let scores = model.output().user_scores(user);
    Ok(RankingList {
        user,
        items: top_n_indices(&scores, n, excluded),
        source: source.to_owned(),
    })
}

/// A set of embedding models fused by per-user z-standardized score mean.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    pub members: Vec<EmbeddingModel>,
}

impl TeacherEnsemble {
    pub fn new(members: Vec<EmbeddingModel>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(CcdError::InvalidArgument("ensemble needs at least one member".into()));
        };
        let (nu, ni) = (first.num_users(), first.num_items());
        if members.iter().any(|m| m.num_users() != nu || m.num_items() != ni) {
            return Err(CcdError::ShapeMismatch("ensemble members disagree on entity counts".into()));
        }
        Ok(Self { members })
    }

    pub fn num_users(&self) -> usize {
        self.members[0].num_users()
    }

    pub fn num_items(&self) -> usize {
        self.members[0].num_items()
    }

    pub fn num_parameters(&self) -> usize {
        self.members.iter().map(EmbeddingModel::num_parameters).sum()
    }

    pub fn outputs(&self) -> EnsembleOutput<'_> {
        EnsembleOutput {
            members: self.members.iter().map(EmbeddingModel::output).collect(),
        }
    }

    pub fn grow(&mut self, num_users: usize, num_items: usize, rng: &mut Rng) {
        for m in &mut self.members {
            m.grow(num_users, num_items, rng);
        }
    }

    pub fn ensemble_score(&self, user: usize, item: usize) -> Result<f64> {
        check_index("user", user, self.num_users())?;
        check_index("item", item, self.num_items())?;
        Ok(self.outputs().fused_user_scores(user)[item])
    }
}

/// Per-user mean and standard deviation of a score vector.
pub fn moments(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// In-place z-standardization; a constant vector becomes all zeros.
pub fn standardize(scores: &mut [f64]) {
    let (mean, sd) = moments(scores);
    if sd > 0.0 {
        scores.iter_mut().for_each(|s| *s = (*s - mean) / sd);
    } else {
        scores.iter_mut().for_each(|s| *s = 0.0);
    }
}

pub struct EnsembleOutput<'a> {
    pub members: Vec<Output<'a>>,
}

impl EnsembleOutput<'_> {
    pub fn fused_user_scores(&self, user: usize) -> Vec<f64> {
        let ni = self.members[0].num_items();
        let mut fused = vec![0.0; ni];
        for m in &self.members {
            let mut s = m.user_scores(user);
            standardize(&mut s);
            for (f, x) in fused.iter_mut().zip(s) {
                *f += x;
            }
        }
        let k = self.members.len() as f64;
        fused.iter_mut().for_each(|f| *f /= k);
        fused
    }
}

/// Flat copy of a model's tables plus its variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSnapshot {
    pub variant: Variant,
    pub users: Table,
    pub items: Table,
}

const SNAPSHOT_MAGIC: &str = "ccd-snapshot";
const SNAPSHOT_VERSION: u32 = 1;

impl ParameterSnapshot {
    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn restore(&self, expected: Variant) -> Result<EmbeddingModel> {
        if expected != self.variant {
            return Err(CcdError::VariantMismatch {
                expected: expected.to_string(),
                found: self.variant.to_string(),
            });
        }
        Ok(EmbeddingModel::from_tables(self.variant, self.users.clone(), self.items.clone()))
    }

    /// Text dump: a header line with variant, width and row counts, then one
    /// row per line. Values use Rust's shortest round-trip formatting.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let layers = match self.variant {
            Variant::Mf => 0,
            Variant::GraphProp { layers } => layers,
        };
        let kind = match self.variant {
            Variant::Mf => "mf",
            Variant::GraphProp { .. } => "graph_prop",
        };
        writeln!(
            w,
            "{SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION} variant={kind} layers={layers} dim={} users={} items={}",
            self.dim(),
            self.users.rows(),
            self.items.rows()
        )?;
        for t in [&self.users, &self.items] {
            for r in 0..t.rows() {
                let line: Vec<String> = t.row(r).iter().map(|x| format!("{x:?}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let bad = |m: &str| CcdError::SnapshotFormat(m.to_owned());
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty input"))?.map_err(|e| bad(&e.to_string()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(SNAPSHOT_MAGIC) {
            return Err(bad("missing magic"));
        }
        if parts.next() != Some(&format!("v{SNAPSHOT_VERSION}")) {
            return Err(bad("unsupported version"));
        }
        let mut field = |name: &str| -> Result<String> {
            let p = parts.next().ok_or_else(|| bad("truncated header"))?;
            p.strip_prefix(&format!("{name}="))
                .map(str::to_owned)
                .ok_or_else(|| bad(&format!("expected {name}=")))
        };
        let kind = field("variant")?;
        let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad number in header"));
        let layers = num(field("layers")?)?;
        let dim = num(field("dim")?)?;
        let nu = num(field("users")?)?;
        let ni = num(field("items")?)?;
        let variant = match kind.as_str() {
            "mf" => Variant::Mf,
            "graph_prop" => Variant::GraphProp { layers },
            _ => return Err(bad("unknown variant")),
        };
        let mut read_table = |rows: usize| -> Result<Table> {
            let mut t = Table::zeros(rows, dim);
            for r in 0..rows {
                let line = lines.next().ok_or_else(|| bad("truncated body"))?.map_err(|e| bad(&e.to_string()))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
                    .collect::<Result<_>>()?;
                if vals.len() != dim {
                    return Err(bad("row width mismatch"));
                }
                t.row_mut(r).copy_from_slice(&vals);
            }
            Ok(t)
        };
        let users = read_table(nu)?;
        let items = read_table(ni)?;
        Ok(Self { variant, users, items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Edge;
    use crate::rng;

    fn mf(users: &[Vec<f64>], items: &[Vec<f64>]) -> EmbeddingModel {
        let dim = users[0].len();
        EmbeddingModel::from_tables(Variant::Mf, Table::from_rows(dim, users), Table::from_rows(dim, items))
    }

    #[test]
    fn mf_scores_are_dot_products() {
        let m = mf(&[vec![1.0, 0.0], vec![1.0, 1.0]], &[vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(m.score(0, 0).unwrap(), 0.0);
        assert_eq!(m.score(1, 1).unwrap(), 2.0);
        assert!(matches!(m.score(2, 0), Err(CcdError::OutOfRange { .. })));
        assert!(m.score(0, 5).is_err());
    }

    #[test]
    fn graph_prop_one_layer_matches_hand_propagation() {
        // u0 - i0 - u1; L=1.
        let eu0 = [1.0, 2.0];
        let eu1 = [-1.0, 0.5];
        let ei0 = [0.5, -0.5];
        let mut m = mf(&[eu0.to_vec(), eu1.to_vec()], &[ei0.to_vec()]);
        m.variant = Variant::GraphProp { layers: 1 };
        let edges = [Edge { user: 0, item: 0, timestamp: 0 }, Edge { user: 1, item: 0, timestamp: 0 }];
        m.set_graph(Arc::new(BlockGraph::from_edges(2, 1, &edges)));
        let fu0: Vec<f64> = (0..2).map(|d| (eu0[d] + ei0[d]) / 2.0).collect();
        let fi0: Vec<f64> = (0..2).map(|d| (ei0[d] + (eu0[d] + eu1[d]) / 2.0) / 2.0).collect();
        let expected = dot(&fu0, &fi0);
        assert!((m.score(0, 0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn graph_prop_without_layers_is_mf() {
        let mut r = rng::stream(1, "t", &[]);
        let base = EmbeddingModel::new(Variant::Mf, 3, 4, 5, &mut r);
        let mut gp = base.clone();
        gp.variant = Variant::GraphProp { layers: 0 };
        gp.set_graph(Arc::new(BlockGraph::from_edges(4, 5, &[Edge { user: 0, item: 1, timestamp: 0 }])));
        for u in 0..4 {
            for i in 0..5 {
                assert_eq!(base.score(u, i).unwrap(), gp.score(u, i).unwrap());
            }
        }
    }

    #[test]
    fn top_n_sorts_and_breaks_ties() {
        assert_eq!(top_n_indices(&[0.1, 0.9, 0.5], 2, |_| false), vec![1, 2]);
        assert_eq!(top_n_indices(&[0.3, 0.3, 0.3], 2, |_| false), vec![0, 1]);
        assert_eq!(top_n_indices(&[0.3, 0.9, 0.3], 5, |i| i == 1), vec![0, 2]);
        assert!(top_n_indices(&[1.0], 0, |_| false).is_empty());
    }

    #[test]
    fn rank_of_positions() {
        let l = RankingList {
            user: 0,
            items: vec![3, 1],
            source: "t".into(),
        };
        assert_eq!(l.rank_of(1), Some(1));
        assert_eq!(l.rank_of(7), None);
    }

    #[test]
    fn init_range_follows_width() {
        let mut r = rng::stream(2, "t", &[]);
        let m = EmbeddingModel::new(Variant::Mf, 8, 50, 50, &mut r);
        assert!(m.users.as_slice().iter().chain(m.items.as_slice()).all(|x| x.abs() <= 0.5 / 8.0));
    }

    #[test]
    fn single_member_ensemble_is_standardized_member() {
        let m = mf(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![3.0, 0.0], vec![2.0, 0.0]]);
        let e = TeacherEnsemble::new(vec![m]).unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        assert!((e.ensemble_score(0, 0).unwrap() + 1.0 / sd).abs() < 1e-12);
        assert!((e.ensemble_score(0, 2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constant_member_contributes_nothing() {
        let flat = mf(&[vec![0.0]], &[vec![1.0], vec![2.0]]);
        let live = mf(&[vec![1.0]], &[vec![1.0], vec![2.0]]);
        let e = TeacherEnsemble::new(vec![flat, live]).unwrap();
        assert!((e.ensemble_score(0, 1).unwrap() - 0.5).abs() < 1e-12);
        assert!(TeacherEnsemble::new(vec![]).is_err());
    }

    #[test]
    fn snapshot_restore_is_identity_and_checks_variant() {
        let mut r = rng::stream(3, "t", &[]);
        let m = EmbeddingModel::new(Variant::Mf, 4, 10, 12, &mut r);
        let s = m.snapshot();
        let back = s.restore(Variant::Mf).unwrap();
        for _ in 0..100 {
            let u = r.random_range(0..10);
            let i = r.random_range(0..12);
            assert_eq!(m.score(u, i).unwrap(), back.score(u, i).unwrap());
        }
        assert!(matches!(
            s.restore(Variant::GraphProp { layers: 2 }),
            Err(CcdError::VariantMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_text_round_trip_is_bit_exact() {
        let mut r = rng::stream(4, "t", &[]);
        let mut m = EmbeddingModel::new(Variant::GraphProp { layers: 2 }, 3, 5, 7, &mut r);
        m.users.row_mut(0)[0] = 1.0 / 3.0;
        let s = m.snapshot();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParameterSnapshot::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(ParameterSnapshot::read_from(&mut "nope".as_bytes()).is_err());
        let truncated = String::from_utf8(buf).unwrap().lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(ParameterSnapshot::read_from(&mut truncated.as_bytes()).is_err());
    }
}
