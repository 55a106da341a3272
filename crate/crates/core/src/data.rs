//! Interaction ingestion, id assignment, block partitioning, and the per-block
//! bipartite graph.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
}

impl InteractionRecord {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: u64) -> Self {
        Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
        }
    }
}

/// Column layout of a delimited interaction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFormat {
    pub delimiter: char,
    pub user_column: usize,
    pub item_column: usize,
    pub time_column: usize,
}

impl Default for InputFormat {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            user_column: 0,
            item_column: 1,
            time_column: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedInteractions {
    pub records: Vec<InteractionRecord>,
    /// Non-empty lines that failed to parse.
    pub malformed: usize,
}

pub fn load_interactions(path: &Path, format: &InputFormat) -> Result<LoadedInteractions> {
    let text = fs::read_to_string(path).map_err(|source| CcdError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let loaded = parse_interactions(&text, format);
    if loaded.malformed > 0 {
        log::warn!(
            "{}: skipped {} malformed line(s)",
            path.display(),
            loaded.malformed
        );
    }
    if loaded.records.is_empty() {
        return Err(CcdError::NoRecords(path.to_path_buf()));
    }
    Ok(loaded)
}

pub fn parse_interactions(text: &str, format: &InputFormat) -> LoadedInteractions {
    let mut records = Vec::new();
    let mut malformed = 0;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(format.delimiter).map(str::trim).collect();
        let field = |c: usize| cols.get(c).copied().filter(|s| !s.is_empty());
        match (
            field(format.user_column),
            field(format.item_column),
            field(format.time_column).and_then(|t| t.parse::<u64>().ok()),
        ) {
            (Some(u), Some(i), Some(t)) => records.push(InteractionRecord::new(u, i, t)),
            _ => malformed += 1,
        }
    }
    LoadedInteractions { records, malformed }
}

/// Dense, stable integer ids for users and items. Ids are issued in stream
/// order, so every entity first seen in block `k` has an id at or above the
/// cumulative count of blocks `< k`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityRegistry {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_map: HashMap<String, usize>,
    item_map: HashMap<String, usize>,
    user_first_block: Vec<usize>,
    item_first_block: Vec<usize>,
}

impl EntityRegistry {
    fn intern(
        map: &mut HashMap<String, usize>,
        ids: &mut Vec<String>,
        first: &mut Vec<usize>,
        key: &str,
        block: usize,
    ) -> usize {
        if let Some(&idx) = map.get(key) {
            return idx;
        }
        let idx = ids.len();
        map.insert(key.to_owned(), idx);
        ids.push(key.to_owned());
        first.push(block);
        idx
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_map.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_map.get(id).copied()
    }

    pub fn user_id(&self, index: usize) -> Option<&str> {
        self.user_ids.get(index).map(String::as_str)
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        self.item_ids.get(index).map(String::as_str)
    }

    pub fn user_first_block(&self, index: usize) -> Option<usize> {
        self.user_first_block.get(index).copied()
    }

    pub fn item_first_block(&self, index: usize) -> Option<usize> {
        self.item_first_block.get(index).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub user: usize,
    pub item: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    pub index: usize,
    /// Training edges sorted by timestamp.
    pub train: Vec<Edge>,
    pub test: Vec<Edge>,
    pub new_users: Vec<usize>,
    pub new_items: Vec<usize>,
    pub time_range: (u64, u64),
    /// Cumulative user count through this block (ids `< users_end` exist).
    pub users_end: usize,
    pub items_end: usize,
    /// Records collapsed because the same (user, item) pair repeated inside the block.
    pub duplicates: usize,
}

impl DataBlock {
    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.test.len()
    }

    /// Splits the training edges into `parts` contiguous, near-equal-count
    /// spans in timestamp order.
    pub fn train_sub_blocks(&self, parts: usize) -> Vec<&[Edge]> {
        split_even(&self.train, parts)
    }
}

pub(crate) fn split_even<T>(items: &[T], parts: usize) -> Vec<&[T]> {
    let parts = parts.max(1);
    let n = items.len();
    (0..parts)
        .map(|p| &items[p * n / parts..(p + 1) * n / parts])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// Contiguous spans holding near-equal interaction counts.
    #[default]
    Count,
    /// Equal-width timestamp intervals.
    Time,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub num_blocks: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub mode: BlockMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub registry: EntityRegistry,
    pub blocks: Vec<DataBlock>,
}

pub fn partition_blocks(records: &[InteractionRecord], cfg: &PartitionConfig) -> Result<Partition> {
    if cfg.num_blocks < 2 {
        return Err(CcdError::InvalidArgument(format!(
            "num_blocks must be >= 2, got {}",
            cfg.num_blocks
        )));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(CcdError::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {}",
            cfg.test_fraction
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].timestamp);

    let spans: Vec<&[usize]> = match cfg.mode {
        BlockMode::Count => split_even(&order, cfg.num_blocks),
        BlockMode::Time => {
            let (lo, hi) = match (order.first(), order.last()) {
                (Some(&a), Some(&b)) => (records[a].timestamp, records[b].timestamp),
                _ => return Err(CcdError::EmptyBlock(0)),
            };
            let width = (hi - lo) as f64 / cfg.num_blocks as f64;
            let bucket = |t: u64| {
                if width == 0.0 {
                    0
                } else {
                    (((t - lo) as f64 / width) as usize).min(cfg.num_blocks - 1)
                }
            };
            let mut spans = Vec::with_capacity(cfg.num_blocks);
            let mut start = 0;
            for b in 0..cfg.num_blocks {
                let mut end = start;
                while end < order.len() && bucket(records[order[end]].timestamp) == b {
                    end += 1;
                }
                spans.push(&order[start..end]);
                start = end;
            }
            spans
        }
    };

    let mut registry = EntityRegistry::default();
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    let mut has_train = Vec::<bool>::new();
    for (k, span) in spans.into_iter().enumerate() {
        if span.is_empty() {
            return Err(CcdError::EmptyBlock(k));
        }
        let users_before = registry.num_users();
        let items_before = registry.num_items();
        let mut seen = HashMap::new();
        let mut by_user: Vec<(usize, Vec<Edge>)> = Vec::new();
        let mut user_slot = HashMap::new();
        let mut duplicates = 0;
        for &r in span {
            let rec = &records[r];
            let user = EntityRegistry::intern(
                &mut registry.user_map,
                &mut registry.user_ids,
                &mut registry.user_first_block,
                &rec.user_id,
                k,
            );
            let item = EntityRegistry::intern(
                &mut registry.item_map,
                &mut registry.item_ids,
                &mut registry.item_first_block,
                &rec.item_id,
                k,
            );
            if seen.insert((user, item), ()).is_some() {
                duplicates += 1;
                continue;
            }
            let slot = *user_slot.entry(user).or_insert_with(|| {
                by_user.push((user, Vec::new()));
                by_user.len() - 1
            });
            by_user[slot].1.push(Edge {
                user,
                item,
                timestamp: rec.timestamp,
            });
        }
        has_train.resize(registry.num_users(), false);

        let mut train = Vec::new();
        let mut test = Vec::new();
        for (user, mut edges) in by_user {
            let n_test = (cfg.test_fraction * edges.len() as f64).floor() as usize;
            let mut rng = rng::stream(cfg.seed, "split", &[k as u64, user as u64]);
            edges.shuffle(&mut rng);
            let held = edges.split_off(edges.len() - n_test);
            if !edges.is_empty() {
                has_train[user] = true;
            }
            train.extend(edges);
            if has_train[user] {
                test.extend(held);
            }
        }
        train.sort();
        train.sort_by_key(|e| e.timestamp);
        test.sort_by_key(|e| (e.user, e.item));

        let first = records[span[0]].timestamp;
        let last = records[span[span.len() - 1]].timestamp;
        blocks.push(DataBlock {
            index: k,
            train,
            test,
            new_users: (users_before..registry.num_users()).collect(),
            new_items: (items_before..registry.num_items()).collect(),
            time_range: (first, last),
            users_end: registry.num_users(),
            items_end: registry.num_items(),
            duplicates,
        });
    }
    Ok(Partition { registry, blocks })
}

impl Partition {
    /// Structured text report of block sizes, arrivals, and time ranges.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "block\ttrain\ttest\tnew_users\tnew_items\tusers_total\titems_total\tt_start\tt_end"
        );
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                b.index,
                b.train.len(),
                b.test.len(),
                b.new_users.len(),
                b.new_items.len(),
                b.users_end,
                b.items_end,
                b.time_range.0,
                b.time_range.1
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    User(usize),
    Item(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hops {
    One,
    Two,
}

/// User-item bipartite adjacency for one set of edges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockGraph {
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
}

impl BlockGraph {
    pub fn from_edges<'a>(
        num_users: usize,
        num_items: usize,
        edges: impl IntoIterator<Item = &'a Edge>,
    ) -> Self {
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for e in edges {
            user_adj[e.user].push(e.item);
            item_adj[e.item].push(e.user);
        }
        for adj in user_adj.iter_mut().chain(item_adj.iter_mut()) {
            adj.sort_unstable();
            adj.dedup();
        }
        Self { user_adj, item_adj }
    }

    pub fn num_users(&self) -> usize {
        self.user_adj.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_adj.len()
    }

    pub fn user_items(&self, user: usize) -> &[usize] {
        self.user_adj.get(user).map_or(&[], Vec::as_slice)
    }

    pub fn item_users(&self, item: usize) -> &[usize] {
        self.item_adj.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_items(user).len()
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_users(item).len()
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    /// One hop returns the opposite-side partners; two hops returns same-side
    /// entities reachable through one partner, never the query itself.
    pub fn neighbors(&self, node: Node, hops: Hops) -> BTreeSet<usize> {
        let (own, first) = match node {
            Node::User(u) => (u, self.user_items(u)),
            Node::Item(i) => (i, self.item_users(i)),
        };
        match hops {
            Hops::One => first.iter().copied().collect(),
            Hops::Two => first
                .iter()
                .flat_map(|&p| match node {
                    Node::User(_) => self.item_users(p),
                    Node::Item(_) => self.user_items(p),
                })
                .copied()
                .filter(|&x| x != own)
                .collect(),
        }
    }

    /// The most frequently interacting users and items: `ceil(top_fraction *
    /// active)` per side, ordered by degree descending then index ascending.
    pub fn prominent_entities(&self, top_fraction: f64) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
        if !(top_fraction > 0.0 && top_fraction <= 1.0) {
            return Err(CcdError::InvalidArgument(format!(
                "top_fraction must lie in (0, 1], got {top_fraction}"
            )));
        }
        if self.num_edges() == 0 {
            return Err(CcdError::EmptyBlock(0));
        }
        let pick = |adj: &[Vec<usize>]| -> BTreeSet<usize> {
            let mut active: Vec<(usize, usize)> = adj
                .iter()
                .enumerate()
                .filter(|(_, a)| !a.is_empty())
                .map(|(i, a)| (a.len(), i))
                .collect();
            active.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let take = (top_fraction * active.len() as f64).ceil() as usize;
            active.into_iter().take(take).map(|(_, i)| i).collect()
        };
        Ok((pick(&self.user_adj), pick(&self.item_adj)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reader {
    Teacher,
    Student,
    Evaluator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessEvent {
    pub reader: Reader,
    pub split: Split,
    pub block: usize,
    /// Block the engine was processing when the read happened.
    pub clock: usize,
}

/// Block store that records every read, so a run can prove that training code
/// never touched test edges or future blocks.
#[derive(Debug)]
pub struct AuditedStream {
    partition: Partition,
    clock: Mutex<usize>,
    log: Mutex<Vec<AccessEvent>>,
}

impl AuditedStream {
    pub fn new(partition: Partition) -> Self {
        Self {
            partition,
            clock: Mutex::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn registry(&self) -> &EntityRegistry {
        &self.partition.registry
    }

    pub fn num_blocks(&self) -> usize {
        self.partition.blocks.len()
    }

    /// Block metadata (entity counts, arrivals) without edge access.
    pub fn block_meta(&self, k: usize) -> BlockMeta {
        let b = &self.partition.blocks[k];
        BlockMeta {
            index: k,
            users_end: b.users_end,
            items_end: b.items_end,
            new_users: b.new_users.len(),
            new_items: b.new_items.len(),
        }
    }

    pub fn set_clock(&self, block: usize) {
        *self.clock.lock().unwrap() = block;
    }

    fn record(&self, reader: Reader, split: Split, block: usize) {
        let clock = *self.clock.lock().unwrap();
        self.log.lock().unwrap().push(AccessEvent {
            reader,
            split,
            block,
            clock,
        });
    }

    pub fn train(&self, reader: Reader, block: usize) -> &[Edge] {
        self.record(reader, Split::Train, block);
        &self.partition.blocks[block].train
    }

    pub fn test(&self, reader: Reader, block: usize) -> &[Edge] {
        self.record(reader, Split::Test, block);
        &self.partition.blocks[block].test
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.log.lock().unwrap().clone()
    }

    /// Reads that break the protocol: a trainer reading test edges, or anyone
    /// reading a block later than the one being processed.
    pub fn violations(&self) -> Vec<AccessEvent> {
        self.events()
            .into_iter()
            .filter(|e| {
                let trainer = e.reader != Reader::Evaluator;
                (trainer && e.split == Split::Test) || e.block > e.clock
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMeta {
    pub index: usize,
    pub users_end: usize,
    pub items_end: usize,
    pub new_users: usize,
    pub new_items: usize,
}
