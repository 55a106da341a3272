//! Per-block orchestration: distillation, proxy refresh, student cycles with
//! replay, and the teacher update with student-side transfer. Also hosts the
//! fine-tune and full-batch baseline runners.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::config::{AblationFlags, DataSource, KdInit, Method, RunConfig};
use crate::data::{
    load_interactions, partition_blocks, AuditedStream, BlockGraph, Edge, InteractionRecord, Node, PartitionConfig, Reader,
};
use crate::entity_init::{apply_initialization, onehop_baseline, plan_initialization, random_plans, InitStrategy};
use crate::error::{CcdError, Result};
use crate::eval::{compute_la_ra, dormant_user_eval, new_user_eval, ContinualEval, KnownItems, Metric, Scorer};
use crate::losses::{
    anneal_lambda_st, bpr_loss, cl_anchor_loss, listwise_kd_loss, replay_loss, sgd_step, student_to_teacher_loss,
    KdTarget, ScoreTarget, Triple,
};
use crate::model::{full_ranking, EmbeddingModel, Gradients, Output, ParameterSnapshot, TeacherEnsemble};
use crate::proxies::{replay_from_scores, transfer_from_scores, ProxyPair, SamplingParams, Source};
use crate::report::{BlockReport, LossRecord, ModelReport, RunOutput, StageTiming};
use crate::rng::{self, Rng};
use crate::synthetic::generate_synthetic_stream;

const NEGATIVE_TRIES: usize = 64;

/// Reads or generates the interactions and partitions them into blocks.
pub fn prepare_stream(cfg: &RunConfig) -> Result<AuditedStream> {
    let records = load_records(cfg)?;
    let partition = partition_blocks(
        &records,
        &PartitionConfig {
            num_blocks: cfg.data.num_blocks,
            test_fraction: cfg.data.test_fraction,
            seed: cfg.seed,
            mode: cfg.data.block_mode,
        },
    )?;
    Ok(AuditedStream::new(partition))
}

pub fn load_records(cfg: &RunConfig) -> Result<Vec<InteractionRecord>> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_stream(&cfg.synthetic, cfg.seed),
        DataSource::File => {
            let path = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| CcdError::config("data.path", "required when source = \"file\""))?;
            let loaded = load_interactions(path, &cfg.data.input_format())?;
            if loaded.malformed > 0 {
                log::warn!("skipped {} malformed lines in {}", loaded.malformed, path.display());
            }
            Ok(loaded.records)
        }
    }
}

fn graph_of<'a>(num_users: usize, num_items: usize, edges: impl IntoIterator<Item = &'a Edge>) -> Arc<BlockGraph> {
    Arc::new(BlockGraph::from_edges(num_users, num_items, edges))
}

fn sample_triples(edges: &[Edge], positives: &KnownItems, num_items: usize, rng: &mut Rng) -> Vec<Triple> {
    edges
        .iter()
        .map(|e| {
            let mut neg = rng.random_range(0..num_items);
            for _ in 0..NEGATIVE_TRIES {
                if !positives.contains(e.user, neg) {
                    break;
                }
                neg = rng.random_range(0..num_items);
            }
            Triple {
                user: e.user,
                pos: e.item,
                neg,
            }
        })
        .collect()
}

/// Users of `edges` in a seeded random order, chunked into batches.
fn user_batches(edges: &[Edge], batch_users: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut users: Vec<usize> = edges.iter().map(|e| e.user).collect::<BTreeSet<_>>().into_iter().collect();
    users.shuffle(rng);
    users.chunks(batch_users).map(<[usize]>::to_vec).collect()
}

fn by_user<T: Copy>(rows: &[T], user: impl Fn(&T) -> usize) -> BTreeMap<usize, Vec<T>> {
    let mut map: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for r in rows {
        map.entry(user(r)).or_default().push(*r);
    }
    map
}

fn gather<T: Copy>(map: &BTreeMap<usize, Vec<T>>, users: &[usize]) -> Vec<T> {
    users
        .iter()
        .filter_map(|u| map.get(u))
        .flat_map(|v| v.iter().copied())
        .collect()
}

fn seen_mask(known: &KnownItems, user: usize, num_items: usize) -> Vec<bool> {
    let mut mask = vec![false; num_items];
    if let Some(items) = known.items(user) {
        items.iter().filter(|&&i| i < num_items).for_each(|&i| mask[i] = true);
    }
    mask
}

fn known_before(stream: &AuditedStream, reader: Reader, block: usize) -> KnownItems {
    let mut known = KnownItems::default();
    for b in 0..block {
        for e in stream.train(reader, b) {
            known.add(e.user, e.item);
        }
    }
    known
}

/// Shared machinery of every runner.
struct Trainer<'a> {
    cfg: &'a RunConfig,
    stream: &'a AuditedStream,
    losses: Vec<LossRecord>,
    timings: Vec<StageTiming>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, stream: &'a AuditedStream) -> Self {
        Self {
            cfg,
            stream,
            losses: Vec::new(),
            timings: Vec::new(),
        }
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn trace(&mut self, block: usize, stage: &'static str, sub_block: usize, epoch: usize, component: &'static str, value: f64) {
        self.losses.push(LossRecord {
            block,
            stage,
            sub_block,
            epoch,
            component,
            value,
        });
    }

    fn timed<T>(&mut self, block: usize, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timings.push(StageTiming {
            block,
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn counts(&self, block: usize) -> (usize, usize) {
        let meta = self.stream.block_meta(block);
        (meta.users_end, meta.items_end)
    }

    fn fresh_teacher(&self, block: usize) -> Result<TeacherEnsemble> {
        let m = &self.cfg.model;
        let (nu, ni) = self.counts(block);
        let members = (0..m.ensemble_size)
            .map(|j| EmbeddingModel::seeded(m.teacher(), m.teacher_dim, nu, ni, self.seed(), &[1, j as u64]))
            .collect();
        TeacherEnsemble::new(members)
    }

    fn fresh_student(&self, num_users: usize, num_items: usize) -> EmbeddingModel {
        let m = &self.cfg.model;
        EmbeddingModel::seeded(m.student(), m.student_dim, num_users, num_items, self.seed(), &[2])
    }

    /// BPR epochs on `edges` for every member, used for pretraining and the
    /// baselines. `order_tag` names the batch-order stream.
    fn teacher_bpr(
        &mut self,
        teacher: &mut TeacherEnsemble,
        edges: &[Edge],
        epochs: usize,
        block: usize,
        stage: &'static str,
        order_tag: &'static str,
    ) -> Result<()> {
        let positives = {
            let mut k = KnownItems::default();
            edges.iter().for_each(|e| k.add(e.user, e.item));
            k
        };
        let (lr, wd, batch) = (self.cfg.cycle.lr, self.cfg.cycle.weight_decay, self.cfg.cycle.batch_users);
        let ni = teacher.num_items();
        for epoch in 0..epochs {
            let batches = user_batches(edges, batch, &mut rng::stream(self.seed(), order_tag, &[block as u64, epoch as u64]));
            let values: Vec<f64> = teacher
                .members
                .par_iter_mut()
                .enumerate()
                .map(|(j, member)| -> Result<f64> {
                    let mut r = rng::stream(self.seed(), "teacher-neg", &[block as u64, j as u64, epoch as u64]);
                    let triples = by_user(&sample_triples(edges, &positives, ni, &mut r), |t| t.user);
                    let mut total = 0.0;
                    for users in &batches {
                        let step = bpr_loss(member, &gather(&triples, users));
                        total += step.value;
                        sgd_step(member, &step.grads, lr, wd)?;
                    }
                    Ok(total)
                })
                .collect::<Result<_>>()?;
            self.trace(block, stage, 0, epoch, "bpr", values.iter().sum());
        }
        Ok(())
    }

    /// Trains the block-0 teacher from scratch.
    fn pretrain(&mut self) -> Result<TeacherEnsemble> {
        self.stream.set_clock(0);
        let mut teacher = self.fresh_teacher(0)?;
        let edges = self.stream.train(Reader::Teacher, 0).to_vec();
        let (nu, ni) = self.counts(0);
        let graph = graph_of(nu, ni, &edges);
        teacher.members.iter_mut().for_each(|m| m.set_graph(graph.clone()));
        let epochs = self.cfg.cycle.pretrain_epochs;
        self.timed(0, "pretrain", |t| t.teacher_bpr(&mut teacher, &edges, epochs, 0, "pretrain", "pretrain-order"))?;
        Ok(teacher)
    }

    /// Listwise distillation of a student from `teacher` for block `block`.
    /// `known` holds the training items the teacher has seen.
    /// A fresh student trained with BPR alone on `edges`.
    fn scratch_student(
        &mut self,
        edges: &[Edge],
        block: usize,
        epochs: usize,
        graph: Option<Arc<BlockGraph>>,
    ) -> Result<EmbeddingModel> {
        let (nu, ni) = self.counts(block);
        let mut student = self.fresh_student(nu, ni);
        if let Some(g) = graph {
            student.set_graph(g);
        }
        let mut positives = KnownItems::default();
        edges.iter().for_each(|e| positives.add(e.user, e.item));
        let c = &self.cfg.cycle;
        for epoch in 0..epochs {
            let coords = [block as u64, epoch as u64];
            let triples = by_user(
                &sample_triples(edges, &positives, ni, &mut rng::stream(self.seed(), "full-neg", &coords)),
                |t| t.user,
            );
            let batches = user_batches(edges, c.batch_users, &mut rng::stream(self.seed(), "full-order", &coords));
            let mut total = 0.0;
            for users in &batches {
                let step = bpr_loss(&student, &gather(&triples, users));
                total += step.value;
                sgd_step(&mut student, &step.grads, c.lr, c.weight_decay)?;
            }
            self.trace(block, "student", 0, epoch, "bpr", total);
        }
        Ok(student)
    }

    fn distill(
        &mut self,
        teacher: &TeacherEnsemble,
        known: &KnownItems,
        block: usize,
        warm: Option<&ParameterSnapshot>,
        graph: Option<Arc<BlockGraph>>,
    ) -> Result<EmbeddingModel> {
        let (nu, ni) = (teacher.num_users(), teacher.num_items());
        let mut student = match warm {
            Some(prev) if self.cfg.cycle.kd_init == KdInit::Warm => {
                let mut s = prev.restore(self.cfg.model.student())?;
                s.grow_seeded(nu, ni, self.seed(), &[2]);
                s
            }
            _ => self.fresh_student(nu, ni),
        };
        if let Some(g) = graph {
            student.set_graph(g);
        }
        let c = &self.cfg.cycle;
        let (n, tail, lr, wd, batch) = (c.kd_list_len, c.kd_tail_samples, c.lr, c.weight_decay, c.batch_users);
        let outputs = teacher.outputs();
        let rankings: Vec<Vec<usize>> = (0..nu)
            .into_par_iter()
            .map(|u| full_ranking(&outputs.fused_user_scores(u), |i| known.contains(u, i)))
            .collect();
        let users: Vec<usize> = (0..nu).filter(|&u| !rankings[u].is_empty()).collect();
        for epoch in 0..c.kd_epochs {
            let mut order = users.clone();
            order.shuffle(&mut rng::stream(self.seed(), "kd-order", &[block as u64, epoch as u64]));
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let targets: Vec<KdTarget> = chunk
                    .iter()
                    .map(|&u| {
                        let full = &rankings[u];
                        let ranking = if tail == 0 || full.len() <= n + tail {
                            full.clone()
                        } else {
                            let mut r = rng::stream(self.seed(), "kd-tail", &[block as u64, epoch as u64, u as u64]);
                            let mut rest = full[n..].to_vec();
                            let (picked, _) = rest.partial_shuffle(&mut r, tail);
                            full[..n].iter().copied().chain(picked.iter().copied()).collect()
                        };
                        KdTarget { user: u, ranking }
                    })
                    .collect();
                let step = listwise_kd_loss(&student, &targets, n)?;
                total += step.value;
                sgd_step(&mut student, &step.grads, lr, wd)?;
            }
            self.trace(block, "kd", 0, epoch, "kd", total);
        }
        Ok(student)
    }

    /// Initializes rows of entities first seen in `sub_edges` and marks them
    /// ready. `strategy` selects how neighbors are pooled.
    fn init_new_entities(
        &self,
        student: &mut EmbeddingModel,
        ready: &mut (Vec<bool>, Vec<bool>),
        graph: &BlockGraph,
        sub_edges: &[Edge],
        strategy: InitStrategy,
    ) -> Result<usize> {
        let mut fresh: Vec<Node> = Vec::new();
        let mut mark_u = BTreeSet::new();
        let mut mark_i = BTreeSet::new();
        for e in sub_edges {
            if !ready.0[e.user] {
                mark_u.insert(e.user);
            }
            if !ready.1[e.item] {
                mark_i.insert(e.item);
            }
        }
        fresh.extend(mark_u.iter().map(|&u| Node::User(u)));
        fresh.extend(mark_i.iter().map(|&i| Node::Item(i)));
        if fresh.is_empty() {
            return Ok(0);
        }
        let usable = |n: Node| match n {
            Node::User(u) => ready.0[u],
            Node::Item(i) => ready.1[i],
        };
        let plans = match strategy {
            InitStrategy::Random => random_plans(&fresh),
            InitStrategy::OneHop => onehop_baseline(graph, &fresh, usable),
            InitStrategy::TwoHop => {
                let (pu, pi) = graph.prominent_entities(self.cfg.init.prominent_fraction)?;
                plan_initialization(graph, &fresh, (&pu, &pi), usable)
            }
        };
        apply_initialization(student, &plans, rng::derive_seed(self.seed(), "entity-init", &[]))?;
        mark_u.iter().for_each(|&u| ready.0[u] = true);
        mark_i.iter().for_each(|&i| ready.1[i] = true);
        Ok(fresh.len())
    }

    fn finish_uninitialized(&self, student: &mut EmbeddingModel, ready: &(Vec<bool>, Vec<bool>)) -> Result<()> {
        let rest: Vec<Node> = ready
            .0
            .iter()
            .enumerate()
            .filter(|(_, r)| !**r)
            .map(|(u, _)| Node::User(u))
            .chain(ready.1.iter().enumerate().filter(|(_, r)| !**r).map(|(i, _)| Node::Item(i)))
            .collect();
        apply_initialization(student, &random_plans(&rest), rng::derive_seed(self.seed(), "entity-init", &[]))
    }
}

/// Where the engine stands inside the per-block protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    TeacherUpdated,
    Distilled,
    ProxiesUpdated,
    StudentUpdated,
}

#[derive(Debug, Clone)]
pub struct EngineState {
    pub teacher: TeacherEnsemble,
    pub student: Option<EmbeddingModel>,
    pub proxies: Option<ProxyPair>,
    /// One snapshot per ensemble member, taken when the previous block ended.
    pub previous_teacher_anchor: Vec<ParameterSnapshot>,
    pub distilled: Option<ParameterSnapshot>,
    pub block: usize,
    pub phase: Phase,
}

/// Continual collaborative distillation over an audited stream.
pub struct Engine<'a> {
    trainer: Trainer<'a>,
    state: EngineState,
    /// Training items observed so far, by anyone.
    seen: KnownItems,
    /// Graph of the previous block, used by the distilled student and proxies.
    prev_graph: Option<Arc<BlockGraph>>,
    sub_evals: Vec<(usize, EmbeddingModel)>,
}

impl<'a> Engine<'a> {
    /// Pretrains the teacher on block 0.
    pub fn new(cfg: &'a RunConfig, stream: &'a AuditedStream) -> Result<Self> {
        let mut trainer = Trainer::new(cfg, stream);
        let teacher = trainer.pretrain()?;
        let seen = known_before(stream, Reader::Teacher, 1);
        let anchor = teacher.members.iter().map(EmbeddingModel::snapshot).collect();
        Ok(Self {
            trainer,
            state: EngineState {
                teacher,
                student: None,
                proxies: None,
                previous_teacher_anchor: anchor,
                distilled: None,
                block: 0,
                phase: Phase::TeacherUpdated,
            },
            seen,
            prev_graph: None,
            sub_evals: Vec::new(),
        })
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    fn cfg(&self) -> &'a RunConfig {
        self.trainer.cfg
    }

    fn flags(&self) -> AblationFlags {
        self.trainer.cfg.ablation
    }

    fn require(&self, block: usize, phase: Phase, op: &str) -> Result<()> {
        if self.state.block == block && self.state.phase == phase {
            Ok(())
        } else {
            Err(CcdError::StageOrder(format!(
                "{op} for block {block} needs {phase:?} at block {block}, engine is at {:?} of block {}",
                self.state.phase, self.state.block
            )))
        }
    }

    /// Stage 1: distills a new student from the teacher trained through
    /// block `k - 1` and returns its snapshot.
    pub fn stage1_distill(&mut self, k: usize) -> Result<ParameterSnapshot> {
        if k == 0 || self.state.block + 1 != k || self.state.phase != Phase::TeacherUpdated {
            return Err(CcdError::StageOrder(format!(
                "distillation for block {k} needs a teacher finished with block {}, engine is at {:?} of block {}",
                k.saturating_sub(1),
                self.state.phase,
                self.state.block
            )));
        }
        if k >= self.trainer.stream.num_blocks() {
            return Err(CcdError::OutOfRange {
                what: "block",
                index: k,
                size: self.trainer.stream.num_blocks(),
            });
        }
        self.trainer.stream.set_clock(k);
        let (nu, ni) = self.trainer.counts(k - 1);
        let prev_edges = self.trainer.stream.train(Reader::Student, k - 1);
        let graph = graph_of(nu, ni, prev_edges);
        self.prev_graph = Some(graph.clone());
        let (teacher, seen, warm) = (&self.state.teacher, &self.seen, self.state.distilled.as_ref());
        let student = self
            .trainer
            .timed(k, "distill", |t| t.distill(teacher, seen, k, warm, Some(graph)))?;
        let snap = student.snapshot();
        self.state.student = Some(student);
        self.state.distilled = Some(snap.clone());
        self.state.block = k;
        self.state.phase = Phase::Distilled;
        Ok(snap)
    }

    /// Folds the stage-1 snapshot into both proxies.
    pub fn update_proxies(&mut self, k: usize) -> Result<()> {
        self.require(k, Phase::Distilled, "proxy update")?;
        let snap = self.state.distilled.as_ref().expect("distilled snapshot present");
        let p = &self.cfg().proxy;
        match &mut self.state.proxies {
            Some(pair) => pair.update(snap, k)?,
            None => self.state.proxies = Some(ProxyPair::new(snap, p.w_sp, p.w_pp, k)?),
        }
        if let (Some(pair), Some(g)) = (&mut self.state.proxies, &self.prev_graph) {
            pair.stability.set_graph(g.clone());
            pair.plasticity.set_graph(g.clone());
        }
        self.state.phase = Phase::ProxiesUpdated;
        Ok(())
    }

    fn replay_sources(&self) -> Vec<Source> {
        let f = self.flags();
        let mut v = Vec::new();
        if f.disable_replay || self.cfg().objective.lambda_re == 0.0 {
            return v;
        }
        if !f.disable_sp {
            v.push(Source::Stability);
        }
        if !f.disable_pp {
            v.push(Source::Plasticity);
        }
        v
    }

    /// Stage 2: `m` student cycles over timestamp-ordered sub-blocks of block `k`.
    pub fn stage2_student_update(&mut self, k: usize) -> Result<()> {
        self.require(k, Phase::ProxiesUpdated, "student update")?;
        let cfg = self.cfg();
        let stream = self.trainer.stream;
        let (nu, ni) = self.trainer.counts(k);
        let mut student = self.state.student.take().expect("distilled student present");
        let (old_u, old_i) = (student.num_users(), student.num_items());
        student.grow_zeroed(nu, ni);
        let mut ready = ((0..nu).map(|u| u < old_u).collect(), (0..ni).map(|i| i < old_i).collect());
        let strategy = if self.flags().disable_entity_init {
            InitStrategy::Random
        } else {
            cfg.init.strategy
        };
        let sources = self.replay_sources();
        let proxies = self.state.proxies.as_ref().expect("proxies present");
        let proxy_out: Vec<(Source, Output<'static>)> = sources
            .iter()
            .map(|&s| (s, proxies.get(s).expect("proxy model").output().into_owned()))
            .collect();
        let params = SamplingParams {
            n_samples: cfg.proxy.replay_size,
            top_n: cfg.proxy.top_n,
            epsilon: cfg.proxy.epsilon,
        };
        let c = &cfg.cycle;
        let lambda_re = cfg.objective.lambda_re;
        let seed = cfg.seed;
        let train = stream.train(Reader::Student, k);
        let subs = crate::data::split_even(train, c.sub_cycles_per_block);
        let mut block_pos = KnownItems::default();
        let mut observed: Vec<Edge> = Vec::with_capacity(train.len());
        let start = Instant::now();
        for (s, sub) in subs.iter().enumerate() {
            observed.extend_from_slice(sub);
            let graph = graph_of(nu, ni, &observed);
            let inited = self
                .trainer
                .init_new_entities(&mut student, &mut ready, &graph, sub, strategy)?;
            log::debug!("block {k} sub-block {s}: {} edges, {inited} new entities", sub.len());
            student.set_graph(graph);
            for e in sub.iter() {
                block_pos.add(e.user, e.item);
                self.seen.add(e.user, e.item);
            }
            let sub_users: Vec<usize> = sub.iter().map(|e| e.user).collect::<BTreeSet<_>>().into_iter().collect();
            let mut replay: BTreeMap<usize, Vec<ScoreTarget>> = BTreeMap::new();
            for epoch in 0..c.student_epochs {
                let coords = [k as u64, s as u64, epoch as u64];
                let mut neg_rng = rng::stream(seed, "student-neg", &coords);
                let triples = by_user(&sample_triples(sub, &block_pos, ni, &mut neg_rng), |t| t.user);
                let batches = user_batches(sub, c.batch_users, &mut rng::stream(seed, "student-order", &coords));
                if !proxy_out.is_empty() && (epoch == 0 || c.resample_each_epoch) {
                    let out = student.output();
                    let seen = &self.seen;
                    let sampled: Vec<(usize, Vec<ScoreTarget>)> = sub_users
                        .par_iter()
                        .map(|&u| {
                            let cur = out.user_scores(u);
                            let mask = seen_mask(seen, u, ni);
                            let mut targets = Vec::new();
                            for (src, pout) in &proxy_out {
                                if u >= pout.num_users() {
                                    continue;
                                }
                                let mut r = rng::stream(seed, "replay", &[k as u64, s as u64, epoch as u64, u as u64, *src as u64]);
                                let picked = replay_from_scores(
                                    u,
                                    &cur,
                                    &pout.user_scores(u),
                                    *src,
                                    |i| mask[i],
                                    &params,
                                    &mut r,
                                );
                                targets.extend(picked.iter().map(|d| d.target()));
                            }
                            (u, targets)
                        })
                        .collect();
                    replay = sampled.into_iter().collect();
                }
                let (mut bpr_total, mut re_total) = (0.0, 0.0);
                for users in &batches {
                    let mut step = bpr_loss(&student, &gather(&triples, users));
                    bpr_total += step.value;
                    if !proxy_out.is_empty() {
                        let targets: Vec<ScoreTarget> = gather(&replay, users);
                        if !targets.is_empty() {
                            let mut re = replay_loss(&student, &targets);
                            re_total += re.value;
                            re.grads.scale(lambda_re);
                            step.grads.merge(&re.grads);
                        }
                    }
                    sgd_step(&mut student, &step.grads, c.lr, c.weight_decay)?;
                }
                self.trainer.trace(k, "student", s, epoch, "bpr", bpr_total);
                if !proxy_out.is_empty() {
                    self.trainer.trace(k, "student", s, epoch, "replay", re_total);
                }
            }
            if cfg.eval.per_sub_block && s + 1 < subs.len() {
                let mut view = student.clone();
                self.trainer.finish_uninitialized(&mut view, &ready)?;
                self.sub_evals.push((s, view));
            }
        }
        self.trainer.finish_uninitialized(&mut student, &ready)?;
        self.trainer.timings.push(StageTiming {
            block: k,
            stage: "student",
            seconds: start.elapsed().as_secs_f64(),
        });
        self.state.student = Some(student);
        self.state.phase = Phase::StudentUpdated;
        Ok(())
    }

    fn lambda_st(&self, epoch: usize) -> f64 {
        let f = self.flags();
        let w = &self.cfg().objective;
        if f.disable_s_to_t {
            0.0
        } else if f.disable_annealing {
            w.lambda_st
        } else {
            anneal_lambda_st(epoch, w)
        }
    }

    /// Stage 3: teacher update on block `k` with the anchor and student-side
    /// transfer, then refreshes the anchor.
    pub fn stage3_teacher_update(&mut self, k: usize) -> Result<()> {
        self.require(k, Phase::StudentUpdated, "teacher update")?;
        let cfg = self.cfg();
        let stream = self.trainer.stream;
        let f = self.flags();
        let start = Instant::now();
        let (nu, ni) = self.trainer.counts(k);
        let seed = cfg.seed;
        let lambdas: Vec<f64> = (0..cfg.cycle.teacher_epochs).map(|e| self.lambda_st(e)).collect();
        let teacher = &mut self.state.teacher;
        for (j, m) in teacher.members.iter_mut().enumerate() {
            m.grow_seeded(nu, ni, seed, &[1, j as u64]);
        }
        let edges = stream.train(Reader::Teacher, k);
        let graph = graph_of(nu, ni, edges);
        teacher.members.iter_mut().for_each(|m| m.set_graph(graph.clone()));
        let mut positives = KnownItems::default();
        edges.iter().for_each(|e| positives.add(e.user, e.item));

        let c = &cfg.cycle;
        let use_cl = !f.disable_cl && cfg.objective.lambda_cl > 0.0;
        let student = self.state.student.as_ref().expect("student present");
        let proxies = self.state.proxies.as_ref().expect("proxies present");
        let mut side: Vec<(Source, &EmbeddingModel)> = vec![(Source::Student, student)];
        if !f.disable_proxies_in_s_to_t {
            if !f.disable_sp {
                side.push((Source::Stability, &proxies.stability));
            }
            if !f.disable_pp {
                side.push((Source::Plasticity, &proxies.plasticity));
            }
        }
        let side_out: Vec<(Source, Output<'_>)> = side.iter().map(|(s, m)| (*s, m.output())).collect();
        let params = SamplingParams {
            n_samples: cfg.proxy.transfer_size,
            top_n: cfg.proxy.top_n,
            epsilon: cfg.proxy.epsilon,
        };
        let users: Vec<usize> = edges.iter().map(|e| e.user).collect::<BTreeSet<_>>().into_iter().collect();
        let mut transfer: BTreeMap<usize, Vec<ScoreTarget>> = BTreeMap::new();
        let anchors = &self.state.previous_teacher_anchor;
        for (epoch, &lambda_st) in lambdas.iter().enumerate() {
            if lambda_st > 0.0 && (epoch == 0 || c.resample_each_epoch) {
                let outs = teacher.outputs();
                let seen = &self.seen;
                let sampled: Vec<(usize, Vec<ScoreTarget>)> = users
                    .par_iter()
                    .map(|&u| {
                        let fused = outs.fused_user_scores(u);
                        let scores: Vec<(Source, Vec<f64>)> = side_out
                            .iter()
                            .filter(|(_, o)| u < o.num_users())
                            .map(|(s, o)| (*s, o.user_scores(u)))
                            .collect();
                        let mask = seen_mask(seen, u, ni);
                        let mut r = rng::stream(seed, "transfer", &[k as u64, epoch as u64, u as u64]);
                        let picked = transfer_from_scores(u, &fused, &scores, |i| mask[i], &params, &mut r);
                        (u, picked.iter().map(|d| d.target()).collect())
                    })
                    .collect();
                transfer = sampled.into_iter().collect();
            }
            let batches = user_batches(edges, c.batch_users, &mut rng::stream(seed, "teacher-order", &[k as u64, epoch as u64]));
            let member_triples: Vec<BTreeMap<usize, Vec<Triple>>> = (0..teacher.members.len())
                .map(|j| {
                    let mut r = rng::stream(seed, "teacher-neg", &[k as u64, j as u64, epoch as u64]);
                    by_user(&sample_triples(edges, &positives, ni, &mut r), |t| t.user)
                })
                .collect();
            // The anchor term is spread over the epoch's batches so that one
            // epoch applies it once in total.
            let cl_scale = cfg.objective.lambda_cl / batches.len().max(1) as f64;
            let (mut bpr_total, mut cl_total, mut st_total) = (0.0, 0.0, 0.0);
            for users_b in &batches {
                let st = if lambda_st > 0.0 {
                    let targets = gather(&transfer, users_b);
                    (!targets.is_empty()).then(|| student_to_teacher_loss(teacher, &targets))
                } else {
                    None
                };
                if let Some(st) = &st {
                    st_total += st.value;
                }
                let results: Vec<(f64, f64)> = teacher
                    .members
                    .par_iter_mut()
                    .enumerate()
                    .map(|(j, member)| -> Result<(f64, f64)> {
                        let mut step = bpr_loss(member, &gather(&member_triples[j], users_b));
                        let mut cl_value = 0.0;
                        if use_cl {
                            let mut cl = cl_anchor_loss(member, &anchors[j])?;
                            cl_value = cl.value;
                            cl.grads.scale(cl_scale);
                            step.grads.merge(&cl.grads);
                        }
                        if let Some(st) = &st {
                            let mut g: Gradients = st.members[j].clone();
                            g.scale(lambda_st);
                            step.grads.merge(&g);
                        }
                        sgd_step(member, &step.grads, c.lr, c.weight_decay)?;
                        Ok((step.value, cl_value))
                    })
                    .collect::<Result<_>>()?;
                for (b, cl) in results {
                    bpr_total += b;
                    cl_total += cl * cl_scale;
                }
            }
            self.trainer.trace(k, "teacher", 0, epoch, "bpr", bpr_total);
            if use_cl {
                self.trainer.trace(k, "teacher", 0, epoch, "cl", cl_total);
            }
            if lambda_st > 0.0 {
                self.trainer.trace(k, "teacher", 0, epoch, "s_to_t", st_total);
            }
        }
        self.state.previous_teacher_anchor = self.state.teacher.members.iter().map(EmbeddingModel::snapshot).collect();
        self.trainer.timings.push(StageTiming {
            block: k,
            stage: "teacher",
            seconds: start.elapsed().as_secs_f64(),
        });
        self.state.phase = Phase::TeacherUpdated;
        Ok(())
    }

    /// Runs all stages of block `k` in protocol order.
    pub fn process_block(&mut self, k: usize) -> Result<()> {
        self.stage1_distill(k)?;
        self.update_proxies(k)?;
        self.stage2_student_update(k)?;
        self.stage3_teacher_update(k)
    }
}

/// Models produced for one block, handed to the reporter.
struct BlockModels<'m> {
    teacher: &'m TeacherEnsemble,
    student: Option<&'m EmbeddingModel>,
    distilled: Option<&'m EmbeddingModel>,
    sub_views: Vec<(usize, EmbeddingModel)>,
}

/// Builds block reports and keeps the dormant-cohort snapshot.
struct Reporter<'a> {
    cfg: &'a RunConfig,
    stream: &'a AuditedStream,
    reports: Vec<BlockReport>,
    stash: Option<(TeacherEnsemble, Option<EmbeddingModel>)>,
}

impl<'a> Reporter<'a> {
    fn new(cfg: &'a RunConfig, stream: &'a AuditedStream) -> Self {
        Self {
            cfg,
            stream,
            reports: Vec::new(),
            stash: None,
        }
    }

    fn metrics(&self) -> Vec<(Metric, usize)> {
        [Metric::Recall, Metric::Ndcg]
            .into_iter()
            .flat_map(|m| self.cfg.eval.ks.iter().map(move |&k| (m, k)))
            .collect()
    }

    fn model_report(&self, name: String, params: usize, scorer: &impl Scorer, current: usize, slices: bool) -> ModelReport {
        let eval: ContinualEval = compute_la_ra(scorer, self.stream, current, &self.cfg.eval.ks);
        let mut out = Vec::new();
        if slices && current > 0 {
            for (metric, k) in self.metrics() {
                if let Some(r) = new_user_eval(scorer, self.stream, current, metric, k) {
                    out.push(("new_users".to_owned(), r));
                }
            }
        }
        ModelReport {
            name,
            parameters: params,
            eval,
            slices: out,
        }
    }

    fn dormant_slices(&self, scorer: &impl Scorer, last: usize) -> Vec<(String, crate::eval::MetricResult)> {
        let active = self.cfg.eval.dormant_active_block;
        self.metrics()
            .into_iter()
            .filter_map(|(metric, k)| dormant_user_eval(scorer, self.stream, active, last, metric, k))
            .map(|r| ("dormant".to_owned(), r))
            .collect()
    }

    fn wants_dormant(&self) -> bool {
        let active = self.cfg.eval.dormant_active_block;
        active > 0 && self.stream.num_blocks() >= active + 3
    }

    fn finish_block(&mut self, k: usize, models: BlockModels<'_>) {
        let last = self.stream.num_blocks() - 1;
        let mut list = Vec::new();
        if let Some(d) = models.distilled {
            list.push(self.model_report("distilled".into(), d.num_parameters(), &d.output(), k - 1, false));
        }
        for (s, view) in &models.sub_views {
            list.push(self.model_report(format!("student@s{s}"), view.num_parameters(), &view.output(), k, false));
        }
        if let Some(s) = models.student {
            let mut r = self.model_report("student".into(), s.num_parameters(), &s.output(), k, true);
            if k == last && self.wants_dormant() {
                if let Some((_, Some(prev))) = &self.stash {
                    r.slices.extend(self.dormant_slices(&prev.output(), last));
                }
            }
            list.push(r);
        }
        let t = models.teacher;
        let mut r = self.model_report("teacher".into(), t.num_parameters(), &t.outputs(), k, true);
        if k == last && self.wants_dormant() {
            if let Some((prev, _)) = &self.stash {
                r.slices.extend(self.dormant_slices(&prev.outputs(), last));
            }
        }
        list.push(r);
        if k + 1 == last && self.wants_dormant() {
            self.stash = Some((t.clone(), models.student.cloned()));
        }
        self.reports.push(BlockReport { block: k, models: list });
    }
}

fn run_ccd(cfg: &RunConfig, stream: &AuditedStream) -> Result<RunOutput> {
    let mut engine = Engine::new(cfg, stream)?;
    let mut reporter = Reporter::new(cfg, stream);
    reporter.finish_block(
        0,
        BlockModels {
            teacher: &engine.state.teacher,
            student: None,
            distilled: None,
            sub_views: Vec::new(),
        },
    );
    for k in 1..stream.num_blocks() {
        engine.stage1_distill(k)?;
        let mut distilled = engine
            .state
            .distilled
            .as_ref()
            .expect("distilled")
            .restore(cfg.model.student())?;
        if let Some(g) = &engine.prev_graph {
            distilled.set_graph(g.clone());
        }
        engine.update_proxies(k)?;
        engine.stage2_student_update(k)?;
        engine.stage3_teacher_update(k)?;
        let views = std::mem::take(&mut engine.sub_evals);
        reporter.finish_block(
            k,
            BlockModels {
                teacher: &engine.state.teacher,
                student: engine.state.student.as_ref(),
                distilled: Some(&distilled),
                sub_views: views,
            },
        );
        log::info!("ccd: block {k} done");
    }
    Ok(RunOutput {
        method: Method::Ccd,
        reports: reporter.reports,
        losses: engine.trainer.losses,
        timings: engine.trainer.timings,
    })
}

/// Fine-tune baseline: the same distillation, then plain BPR on the new block
/// for both the student (over the same sub-blocks, random rows for new
/// entities) and the teacher.
fn run_finetune(cfg: &RunConfig, stream: &AuditedStream) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg, stream);
    let mut teacher = trainer.pretrain()?;
    let mut reporter = Reporter::new(cfg, stream);
    reporter.finish_block(
        0,
        BlockModels {
            teacher: &teacher,
            student: None,
            distilled: None,
            sub_views: Vec::new(),
        },
    );
    let mut seen = known_before(stream, Reader::Teacher, 1);
    let mut prev: Option<ParameterSnapshot> = None;
    let c = &cfg.cycle;
    for k in 1..stream.num_blocks() {
        stream.set_clock(k);
        let (pu, pi) = trainer.counts(k - 1);
        let prev_graph = graph_of(pu, pi, stream.train(Reader::Student, k - 1));
        let distilled = trainer.timed(k, "distill", |t| t.distill(&teacher, &seen, k, prev.as_ref(), Some(prev_graph)))?;
        prev = Some(distilled.snapshot());

        let start = Instant::now();
        let (nu, ni) = trainer.counts(k);
        let mut student = distilled.clone();
        let (old_u, old_i) = (student.num_users(), student.num_items());
        student.grow_zeroed(nu, ni);
        let mut ready = ((0..nu).map(|u| u < old_u).collect(), (0..ni).map(|i| i < old_i).collect());
        let train = stream.train(Reader::Student, k);
        let subs = crate::data::split_even(train, c.sub_cycles_per_block);
        let mut block_pos = KnownItems::default();
        let mut observed: Vec<Edge> = Vec::new();
        let mut views = Vec::new();
        for (s, sub) in subs.iter().enumerate() {
            observed.extend_from_slice(sub);
            let graph = graph_of(nu, ni, &observed);
            trainer.init_new_entities(&mut student, &mut ready, &graph, sub, InitStrategy::Random)?;
            student.set_graph(graph);
            for e in sub.iter() {
                block_pos.add(e.user, e.item);
                seen.add(e.user, e.item);
            }
            for epoch in 0..c.student_epochs {
                let coords = [k as u64, s as u64, epoch as u64];
                let triples = by_user(
                    &sample_triples(sub, &block_pos, ni, &mut rng::stream(cfg.seed, "student-neg", &coords)),
                    |t| t.user,
                );
                let batches = user_batches(sub, c.batch_users, &mut rng::stream(cfg.seed, "student-order", &coords));
                let mut total = 0.0;
                for users in &batches {
                    let step = bpr_loss(&student, &gather(&triples, users));
                    total += step.value;
                    sgd_step(&mut student, &step.grads, c.lr, c.weight_decay)?;
                }
                trainer.trace(k, "student", s, epoch, "bpr", total);
            }
            if cfg.eval.per_sub_block && s + 1 < subs.len() {
                let mut view = student.clone();
                trainer.finish_uninitialized(&mut view, &ready)?;
                views.push((s, view));
            }
        }
        trainer.finish_uninitialized(&mut student, &ready)?;
        trainer.timings.push(StageTiming {
            block: k,
            stage: "student",
            seconds: start.elapsed().as_secs_f64(),
        });

        for (j, m) in teacher.members.iter_mut().enumerate() {
            m.grow_seeded(nu, ni, cfg.seed, &[1, j as u64]);
        }
        let edges = stream.train(Reader::Teacher, k).to_vec();
        let graph = graph_of(nu, ni, &edges);
        teacher.members.iter_mut().for_each(|m| m.set_graph(graph.clone()));
        trainer.timed(k, "teacher", |t| t.teacher_bpr(&mut teacher, &edges, c.teacher_epochs, k, "teacher", "teacher-order"))?;

        reporter.finish_block(
            k,
            BlockModels {
                teacher: &teacher,
                student: Some(&student),
                distilled: Some(&distilled),
                sub_views: views,
            },
        );
        log::info!("fine_tune: block {k} done");
    }
    Ok(RunOutput {
        method: Method::FineTune,
        reports: reporter.reports,
        losses: trainer.losses,
        timings: trainer.timings,
    })
}

/// Full-batch baseline: teacher and student retrained from scratch on the
/// union of all training edges observed so far.
fn run_fullbatch(cfg: &RunConfig, stream: &AuditedStream) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg, stream);
    let teacher0 = trainer.pretrain()?;
    let mut reporter = Reporter::new(cfg, stream);
    reporter.finish_block(
        0,
        BlockModels {
            teacher: &teacher0,
            student: None,
            distilled: None,
            sub_views: Vec::new(),
        },
    );
    let c = &cfg.cycle;
    for k in 1..stream.num_blocks() {
        stream.set_clock(k);
        let (nu, ni) = trainer.counts(k);
        let union: Vec<Edge> = (0..=k).flat_map(|b| stream.train(Reader::Teacher, b).iter().copied()).collect();
        let graph = graph_of(nu, ni, &union);
        let mut teacher = trainer.fresh_teacher(k)?;
        teacher.members.iter_mut().for_each(|m| m.set_graph(graph.clone()));
        trainer.timed(k, "teacher", |t| t.teacher_bpr(&mut teacher, &union, c.teacher_epochs, k, "teacher", "full-order"))?;

        let student_edges: Vec<Edge> = (0..=k).flat_map(|b| stream.train(Reader::Student, b).iter().copied()).collect();
        let epochs = c.student_epochs * c.sub_cycles_per_block;
        let student = trainer.timed(k, "student", |t| t.scratch_student(&student_edges, k, epochs, Some(graph.clone())))?;
        reporter.finish_block(
            k,
            BlockModels {
                teacher: &teacher,
                student: Some(&student),
                distilled: None,
                sub_views: Vec::new(),
            },
        );
        log::info!("full_batch: block {k} done");
    }
    Ok(RunOutput {
        method: Method::FullBatch,
        reports: reporter.reports,
        losses: trainer.losses,
        timings: trainer.timings,
    })
}

/// A student of the configured size trained from scratch with BPR on the
/// training edges of blocks `0..=through`, for comparison with distillation.
pub fn scratch_student(cfg: &RunConfig, stream: &AuditedStream, through: usize, epochs: usize) -> Result<EmbeddingModel> {
    let mut trainer = Trainer::new(cfg, stream);
    let (nu, ni) = trainer.counts(through);
    let edges: Vec<Edge> = (0..=through).flat_map(|b| stream.train(Reader::Student, b).iter().copied()).collect();
    let graph = graph_of(nu, ni, &edges);
    trainer.scratch_student(&edges, through, epochs, Some(graph))
}

/// Runs one method over the whole stream.
pub fn run_stream(cfg: &RunConfig, stream: &AuditedStream, method: Method) -> Result<RunOutput> {
    cfg.validate()?;
    match method {
        Method::Ccd => run_ccd(cfg, stream),
        Method::FineTune => run_finetune(cfg, stream),
        Method::FullBatch => run_fullbatch(cfg, stream),
    }
}
