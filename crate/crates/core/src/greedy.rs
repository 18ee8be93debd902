//! Bulk assignment: the operator-level greedy scheduler.
//!
//! The schedule is a sequence of single-batch assignments. Each batch first gives
//! one core to the head operator of every candidate segment, then hands out the
//! remaining cores one at a time to whichever of the candidate operators or the
//! batch's dominant operator saves the most time, stopping early when another
//! operator would not beat running it data-parallel in a later batch.
//!
//! Detached chain heads go through [`execute_dch_rule`] before they get a core.
//! A chain whose head is rejected is discarded only when another live chain still
//! owns that head; otherwise it waits for a later batch. That keeps every
//! operator scheduled exactly once.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{DetachedChainMap, Segmentation};
use crate::dag::{OpId, Operator, ParaCapability, PlanDag};
use crate::rational::{int, Rational};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("core count must be at least 1")]
    NoCores,
    #[error("operator {0} would be scheduled twice")]
    DuplicateAssignment(OpId),
    #[error("operator {0} was never scheduled")]
    Unscheduled(OpId),
    #[error("no operator could be scheduled in batch {0}")]
    Stalled(usize),
    #[error("operator {0} is not a detached chain head")]
    NotDetachedHead(OpId),
    #[error("detached chain head {0} has no cap_on input for the pipeline check")]
    MissingCapOn(OpId),
    #[error("dominant operator {0} is serialized and cannot take more cores")]
    SerializedDominant(OpId),
}

/// One batch `X = (L, M)`: operators and the cores each one runs on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingleBatchAssignment {
    p: usize,
    ops: Vec<OpId>,
    cores: Vec<Vec<usize>>,
}

impl SingleBatchAssignment {
    pub fn new(p: usize) -> Self {
        SingleBatchAssignment {
            p,
            ops: Vec::new(),
            cores: Vec::new(),
        }
    }

    /// Builds a batch from explicit per-operator core lists; no validation.
    pub fn from_parts(p: usize, ops: Vec<OpId>, cores: Vec<Vec<usize>>) -> Self {
        assert_eq!(ops.len(), cores.len(), "one core list per operator");
        SingleBatchAssignment { p, ops, cores }
    }

    /// The operator list `L`.
    pub fn ops(&self) -> &[OpId] {
        &self.ops
    }

    pub fn cores(&self) -> &[Vec<usize>] {
        &self.cores
    }

    pub fn core_count(&self) -> usize {
        self.p
    }

    /// `N[i] = Σ_k M[k, i]`.
    pub fn cores_per_op(&self) -> Vec<usize> {
        self.cores.iter().map(Vec::len).collect()
    }

    pub fn used_cores(&self) -> usize {
        self.cores.iter().map(Vec::len).sum()
    }

    pub fn position(&self, op: OpId) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }

    /// The `p × l` matrix `M`; out-of-range core indices are ignored.
    pub fn matrix(&self) -> Vec<Vec<bool>> {
        let mut m = vec![vec![false; self.ops.len()]; self.p];
        for (i, cores) in self.cores.iter().enumerate() {
            for &k in cores {
                if k < self.p {
                    m[k][i] = true;
                }
            }
        }
        m
    }

    fn push(&mut self, op: OpId, core: usize) {
        self.ops.push(op);
        self.cores.push(vec![core]);
    }
}

/// Amortized unit times of a batch and its dominant operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DominantState {
    unit_times: Vec<Rational>,
    cores: Vec<usize>,
    amt: Vec<Rational>,
    dom_index: usize,
    dom_time: Rational,
}

impl DominantState {
    /// `unit_times[i]` and `cores[i]` describe `L[i]`. Ties for the maximum go to the lowest index.
    pub fn new(unit_times: Vec<Rational>, cores: Vec<usize>) -> Self {
        assert_eq!(unit_times.len(), cores.len());
        assert!(!unit_times.is_empty(), "dominant of an empty batch");
        let amt: Vec<Rational> = unit_times
            .iter()
            .zip(&cores)
            .map(|(&t, &n)| t / int(n as i64))
            .collect();
        let (dom_index, dom_time) = argmax(&amt);
        DominantState {
            unit_times,
            cores,
            amt,
            dom_index,
            dom_time,
        }
    }

    pub fn of_batch(dag: &PlanDag, batch: &SingleBatchAssignment) -> Self {
        let unit_times = batch.ops.iter().map(|&id| dag.op(id).unit_time).collect();
        DominantState::new(unit_times, batch.cores_per_op())
    }

    pub fn amt(&self) -> &[Rational] {
        &self.amt
    }

    pub fn dom_index(&self) -> usize {
        self.dom_index
    }

    /// `d^dom`, the largest amortized unit time.
    pub fn dom_time(&self) -> Rational {
        self.dom_time
    }

    /// The dominant time after granting one more core to the dominant operator.
    pub fn dom_time_with_extra_core(&self) -> Rational {
        let i = self.dom_index;
        let mut amt = self.amt.clone();
        amt[i] = self.unit_times[i] / int(self.cores[i] as i64 + 1);
        argmax(&amt).1
    }
}

fn argmax(values: &[Rational]) -> (usize, Rational) {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// `DP(op) = d^u · US / p`: cost of running `op` data-parallel in a later batch.
fn deferred_parallel_time(op: &Operator, p: usize) -> Rational {
    op.unit_time * int(op.units as i64) / int(p as i64)
}

/// Time saved by giving the next core to the unassigned operator `op`:
/// `(US·d^dom + DP(op)) − US·max(d^dom, d^u)`. May be negative.
pub fn saved_time_unassigned(op: &Operator, dom_time: Rational, p: usize) -> Rational {
    let units = int(op.units as i64);
    let next_dom = dom_time.max(op.unit_time);
    units * dom_time + deferred_parallel_time(op, p) - units * next_dom
}

/// Time saved by giving the next core to the dominant operator:
/// `US[dom] · (d^dom − d^dom')`, where `d^dom'` is the dominant time after the grant.
pub fn saved_time_dominant(state: &DominantState, dominant: &Operator) -> Result<Rational, ScheduleError> {
    if dominant.para == ParaCapability::S {
        return Err(ScheduleError::SerializedDominant(dominant.id));
    }
    Ok(int(dominant.units as i64) * (state.dom_time - state.dom_time_with_extra_core()))
}

/// Whether the batch should stop instead of giving `op` a core, with
/// `cores_left` cores still unassigned out of `p`.
pub fn early_stop(op: &Operator, dom_time: Rational, p: usize, cores_left: usize) -> bool {
    assert!(cores_left >= 1, "early stop needs at least one remaining core");
    let units = int(op.units as i64);
    let all_remaining = op.unit_time * units / int(cores_left as i64);
    units * dom_time + deferred_parallel_time(op, p) - all_remaining < int(0)
}

/// Outcome of the detached-chain execution/discard rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DchDecision {
    /// All predecessors were assigned in earlier batches.
    Admissible,
    /// One predecessor is in the current batch and the head streams from it.
    PipelineAdmissible,
    /// Neither case holds.
    Discard,
}

/// Applies the execution/discard rule to detached chain head `head`.
pub fn execute_dch_rule(
    dag: &PlanDag,
    head: OpId,
    dcm: &DetachedChainMap,
    assigned: &BTreeSet<OpId>,
    batch: &[OpId],
) -> Result<DchDecision, ScheduleError> {
    let parents = dcm.parents(head).ok_or(ScheduleError::NotDetachedHead(head))?;
    let unassigned: Vec<OpId> = parents.iter().copied().filter(|p| !assigned.contains(p)).collect();
    match unassigned[..] {
        [] => Ok(DchDecision::Admissible),
        [parent] if batch.contains(&parent) => {
            let op = dag.op(head);
            let cap_on = op.cap_on.ok_or(ScheduleError::MissingCapOn(head))?;
            if cap_on == parent && op.pipe.streams_input() {
                Ok(DchDecision::PipelineAdmissible)
            } else {
                Ok(DchDecision::Discard)
            }
        }
        _ => Ok(DchDecision::Discard),
    }
}

/// A chain that still has work: its remaining segments, the front one being the
/// candidate segment (possibly already partly drained).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingChain {
    pub index: usize,
    pub segments: VecDeque<VecDeque<OpId>>,
}

impl PendingChain {
    pub fn new(index: usize, segments: impl IntoIterator<Item = Vec<OpId>>) -> Self {
        PendingChain {
            index,
            segments: segments.into_iter().map(VecDeque::from).collect(),
        }
    }

    /// First unassigned operator of the candidate segment.
    pub fn head(&self) -> Option<OpId> {
        self.segments.front().and_then(|s| s.front().copied())
    }

    /// Drops drained segments and operators another chain already ran.
    fn skip_assigned(&mut self, assigned: &BTreeSet<OpId>) {
        loop {
            match self.segments.front_mut() {
                Some(seg) if seg.is_empty() => {
                    self.segments.pop_front();
                }
                Some(seg) if assigned.contains(&seg[0]) => {
                    seg.pop_front();
                }
                _ => break,
            }
        }
    }

    fn contains(&self, op: OpId) -> bool {
        self.segments.iter().any(|s| s.contains(&op))
    }

    fn poll(&mut self) -> OpId {
        self.segments
            .front_mut()
            .and_then(VecDeque::pop_front)
            .expect("poll on an empty candidate segment")
    }
}

/// Result of one single-batch assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOutcome {
    pub assignment: SingleBatchAssignment,
    /// Chains still live after the batch, in their original order. Discarded
    /// chains are removed; drained candidate segments are left in place.
    pub pending: Vec<PendingChain>,
    /// Chain indices discarded during this batch.
    pub discarded: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Admission {
    Admit,
    Discard,
    Defer,
}

struct BatchBuilder<'a> {
    dag: &'a PlanDag,
    dcm: &'a DetachedChainMap,
    assigned: &'a BTreeSet<OpId>,
    p: usize,
    chains: Vec<PendingChain>,
    discarded: Vec<bool>,
    deferred: Vec<bool>,
    batch: SingleBatchAssignment,
    next_core: usize,
}

impl BatchBuilder<'_> {
    fn active(&self, k: usize) -> bool {
        !self.discarded[k] && !self.deferred[k] && self.chains[k].head().is_some()
    }

    /// Whether some other live chain still has `op` among its remaining work.
    fn owned_elsewhere(&self, op: OpId, k: usize) -> bool {
        self.chains
            .iter()
            .enumerate()
            .any(|(j, c)| j != k && !self.discarded[j] && c.contains(op))
    }

    fn admission(&self, k: usize) -> Result<Admission, ScheduleError> {
        let head = self.chains[k].head().expect("admission of a drained chain");
        let in_batch = self.batch.ops();
        if self.assigned.contains(&head) || in_batch.contains(&head) {
            // Another chain sharing this detached suffix runs it in this batch;
            // this one picks up after it next time.
            return Ok(Admission::Defer);
        }
        // A same-batch parent only helps if it releases output progressively;
        // otherwise the child would hold a core idle until the parent ends.
        let streams_from = |parent: OpId| self.dag.op(parent).pipe.streams_output();
        if self.dcm.contains(head) {
            return Ok(match execute_dch_rule(self.dag, head, self.dcm, self.assigned, in_batch)? {
                DchDecision::Admissible => Admission::Admit,
                DchDecision::PipelineAdmissible => {
                    let parent = self.dag.parents(head).iter().find(|p| !self.assigned.contains(p));
                    if parent.is_some_and(|&p| streams_from(p)) {
                        Admission::Admit
                    } else {
                        Admission::Defer
                    }
                }
                DchDecision::Discard if self.owned_elsewhere(head, k) => Admission::Discard,
                DchDecision::Discard => Admission::Defer,
            });
        }
        let op = self.dag.op(head);
        let parents = self.dag.parents(head);
        let unassigned: Vec<OpId> = parents
            .iter()
            .copied()
            .filter(|p| !self.assigned.contains(p))
            .collect();
        Ok(match unassigned[..] {
            [] => Admission::Admit,
            [parent]
                if in_batch.contains(&parent)
                    && streams_from(parent)
                    && op.pipe.streams_input()
                    && (parents.len() == 1 || op.cap_on == Some(parent)) =>
            {
                Admission::Admit
            }
            _ => Admission::Defer,
        })
    }

    /// Settles chain `k`: returns true if its head may take a core now.
    fn settle(&mut self, k: usize) -> Result<bool, ScheduleError> {
        match self.admission(k)? {
            Admission::Admit => Ok(true),
            Admission::Discard => {
                self.discarded[k] = true;
                Ok(false)
            }
            Admission::Defer => {
                self.deferred[k] = true;
                Ok(false)
            }
        }
    }

    fn grant_new(&mut self, k: usize) {
        let op = self.chains[k].poll();
        self.batch.push(op, self.next_core);
        self.next_core += 1;
    }

    fn grant_dominant(&mut self, dom_index: usize) {
        self.batch.cores[dom_index].push(self.next_core);
        self.next_core += 1;
    }

    fn initialize(&mut self) -> Result<(), ScheduleError> {
        let mut order: Vec<usize> = (0..self.chains.len()).filter(|&k| self.active(k)).collect();
        if order.len() > self.p {
            let work = |k: usize| self.dag.op(self.chains[k].head().unwrap()).duration();
            order.sort_by(|&a, &b| {
                work(b)
                    .cmp(&work(a))
                    .then(self.chains[a].index.cmp(&self.chains[b].index))
            });
        }
        for k in order {
            if self.next_core == self.p {
                break;
            }
            if self.settle(k)? {
                self.grant_new(k);
            }
        }
        Ok(())
    }

    fn assign_remaining_cores(&mut self) -> Result<(), ScheduleError> {
        while self.next_core < self.p && !self.batch.ops.is_empty() {
            let state = DominantState::of_batch(self.dag, &self.batch);
            let dom_op = self.dag.op(self.batch.ops[state.dom_index()]);
            let dom_saved = if dom_op.is_data_parallel() {
                Some(saved_time_dominant(&state, dom_op)?)
            } else {
                None
            };

            let mut candidates: Vec<(Rational, usize)> = (0..self.chains.len())
                .filter(|&k| self.active(k))
                .map(|k| {
                    let op = self.dag.op(self.chains[k].head().unwrap());
                    (saved_time_unassigned(op, state.dom_time(), self.p), k)
                })
                .collect();
            candidates.sort_by(|a, b| match b.0.cmp(&a.0) {
                Ordering::Equal => self.chains[a.1].index.cmp(&self.chains[b.1].index),
                o => o,
            });

            let mut runner = None;
            for (saved, k) in candidates {
                if self.settle(k)? {
                    runner = Some((saved, k));
                    break;
                }
            }

            match runner {
                Some((saved, _)) if dom_saved.is_some_and(|d| d > saved) => {
                    self.grant_dominant(state.dom_index())
                }
                Some((_, k)) => {
                    let op = self.dag.op(self.chains[k].head().unwrap());
                    if early_stop(op, state.dom_time(), self.p, self.p - self.next_core) {
                        break;
                    }
                    self.grant_new(k);
                }
                // Nothing else can start; an extra core on the dominant never lengthens
                // the batch, and spreading ties lets the next dominant shrink too.
                None if dom_saved.is_some() && self.batch.cores[state.dom_index()].len() < dom_op.units as usize => {
                    self.grant_dominant(state.dom_index())
                }
                None => break,
            }
        }
        Ok(())
    }

    fn finish(self) -> BatchOutcome {
        let mut pending = Vec::new();
        let mut discarded = Vec::new();
        for (chain, gone) in self.chains.into_iter().zip(self.discarded) {
            if gone {
                discarded.push(chain.index);
            } else {
                pending.push(chain);
            }
        }
        BatchOutcome {
            assignment: self.batch,
            pending,
            discarded,
        }
    }
}

/// Builds one batch from the live chains `pending`.
///
/// `assigned` holds every operator placed in earlier batches.
pub fn single_batch_assignment(
    dag: &PlanDag,
    dcm: &DetachedChainMap,
    pending: &[PendingChain],
    assigned: &BTreeSet<OpId>,
    p: usize,
) -> Result<BatchOutcome, ScheduleError> {
    if p == 0 {
        return Err(ScheduleError::NoCores);
    }
    let mut builder = BatchBuilder {
        dag,
        dcm,
        assigned,
        p,
        chains: pending.to_vec(),
        discarded: vec![false; pending.len()],
        deferred: vec![false; pending.len()],
        batch: SingleBatchAssignment::new(p),
        next_core: 0,
    };
    builder.initialize()?;
    builder.assign_remaining_cores()?;
    Ok(builder.finish())
}

/// The full operator-level schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BulkSchedule {
    p: usize,
    batches: Vec<SingleBatchAssignment>,
    discarded: Vec<Vec<usize>>,
}

impl BulkSchedule {
    /// Assembles a schedule from parts, e.g. for hand-built test cases.
    pub fn from_parts(p: usize, batches: Vec<SingleBatchAssignment>, discarded: Vec<Vec<usize>>) -> Self {
        BulkSchedule { p, batches, discarded }
    }

    pub fn core_count(&self) -> usize {
        self.p
    }

    pub fn batches(&self) -> &[SingleBatchAssignment] {
        &self.batches
    }

    /// Chain indices discarded in each batch.
    pub fn discarded(&self) -> &[Vec<usize>] {
        &self.discarded
    }

    /// Batch index of every scheduled operator (first occurrence).
    pub fn batch_of(&self) -> BTreeMap<OpId, usize> {
        let mut out = BTreeMap::new();
        for (k, b) in self.batches.iter().enumerate() {
            for &op in b.ops() {
                out.entry(op).or_insert(k);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serialization cannot fail")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchRepr {
    ops: Vec<OpId>,
    cores: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BulkRepr {
    p: usize,
    batches: Vec<BatchRepr>,
    discarded: Vec<Vec<usize>>,
}

impl Serialize for BulkSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        BulkRepr {
            p: self.p,
            batches: self
                .batches
                .iter()
                .map(|b| BatchRepr {
                    ops: b.ops.clone(),
                    cores: b.cores.clone(),
                })
                .collect(),
            discarded: self.discarded.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BulkSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = BulkRepr::deserialize(d)?;
        let mut batches = Vec::with_capacity(repr.batches.len());
        for b in repr.batches {
            if b.ops.len() != b.cores.len() {
                return Err(serde::de::Error::custom("batch ops and cores differ in length"));
            }
            batches.push(SingleBatchAssignment::from_parts(repr.p, b.ops, b.cores));
        }
        Ok(BulkSchedule {
            p: repr.p,
            batches,
            discarded: repr.discarded,
        })
    }
}

/// Runs single-batch assignments until every chain is drained or discarded.
pub fn bulk_assignment(dag: &PlanDag, seg: &Segmentation, p: usize) -> Result<BulkSchedule, ScheduleError> {
    if p == 0 {
        return Err(ScheduleError::NoCores);
    }
    let mut pending: Vec<PendingChain> = seg
        .chains
        .iter()
        .zip(&seg.segments)
        .map(|(chain, segs)| PendingChain::new(chain.index, segs.iter().map(|s| s.ops.clone())))
        .filter(|c| c.head().is_some())
        .collect();
    let mut assigned = BTreeSet::new();
    let mut batches = Vec::new();
    let mut discarded = Vec::new();

    while !pending.is_empty() {
        let outcome = single_batch_assignment(dag, &seg.dcm, &pending, &assigned, p)?;
        if outcome.assignment.ops().is_empty() {
            return Err(ScheduleError::Stalled(batches.len()));
        }
        for &op in outcome.assignment.ops() {
            if !assigned.insert(op) {
                return Err(ScheduleError::DuplicateAssignment(op));
            }
        }
        // Operators of a shared detached suffix may already have run through
        // another chain; skip them so the chain resumes at its first pending op.
        pending = outcome
            .pending
            .into_iter()
            .filter_map(|mut chain| {
                chain.skip_assigned(&assigned);
                chain.head().is_some().then_some(chain)
            })
            .collect();
        batches.push(outcome.assignment);
        discarded.push(outcome.discarded);
    }

    if let Some(missing) = dag.ids().find(|id| !assigned.contains(id)) {
        return Err(ScheduleError::Unscheduled(missing));
    }
    Ok(BulkSchedule { p, batches, discarded })
}

/// Partition plus bulk assignment.
pub fn schedule(dag: &PlanDag, p: usize) -> Result<(Segmentation, BulkSchedule), ScheduleError> {
    let seg = crate::chain::partition(dag);
    let bulk = bulk_assignment(dag, &seg, p)?;
    Ok((seg, bulk))
}

/// A broken schedule invariant, with the batch and operator involved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BulkViolation {
    CoreCountMismatch { batch: usize, p: usize },
    UnknownOperator { batch: usize, op: OpId },
    RepeatedInBatch { batch: usize, op: OpId },
    Duplicate { op: OpId, first: usize, again: usize },
    Missing { op: OpId },
    NoCores { batch: usize, op: OpId },
    CoreOutOfRange { batch: usize, op: OpId, core: usize },
    CoreShared { batch: usize, core: usize },
    SerializedMultiCore { batch: usize, op: OpId, cores: usize },
    Dependency { batch: usize, op: OpId, pred: OpId },
}

impl fmt::Display for BulkViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use BulkViolation::*;
        match self {
            CoreCountMismatch { batch, p } => write!(f, "batch {batch}: declared for {p} cores"),
            UnknownOperator { batch, op } => write!(f, "batch {batch}: unknown operator {op}"),
            RepeatedInBatch { batch, op } => write!(f, "batch {batch}: operator {op} listed twice"),
            Duplicate { op, first, again } => {
                write!(f, "indivisibility: operator {op} in batches {first} and {again}")
            }
            Missing { op } => write!(f, "indivisibility: operator {op} never scheduled"),
            NoCores { batch, op } => write!(f, "batch {batch}: operator {op} has no core"),
            CoreOutOfRange { batch, op, core } => {
                write!(f, "batch {batch}: operator {op} on nonexistent core {core}")
            }
            CoreShared { batch, core } => write!(f, "batch {batch}: core {core} runs several operators"),
            SerializedMultiCore { batch, op, cores } => {
                write!(f, "batch {batch}: serialized operator {op} on {cores} cores")
            }
            Dependency { batch, op, pred } => {
                write!(f, "dependency: operator {op} in batch {batch} before predecessor {pred} is assigned")
            }
        }
    }
}

/// Checks operator indivisibility, operator dependency and per-batch core rules.
///
/// A predecessor may share the batch of its successor only when it appears
/// earlier in the batch, every other predecessor is in an earlier batch, and the
/// successor streams its input from it (pipe `P` or `I`, and it is the
/// successor's only input or its `cap_on` input).
pub fn validate_bulk(dag: &PlanDag, sched: &BulkSchedule) -> Vec<BulkViolation> {
    let mut out = Vec::new();
    let p = sched.p;
    let mut first_batch: BTreeMap<OpId, usize> = BTreeMap::new();

    for (k, batch) in sched.batches.iter().enumerate() {
        if batch.p != p {
            out.push(BulkViolation::CoreCountMismatch { batch: k, p: batch.p });
        }
        let mut seen_ops = BTreeSet::new();
        let mut seen_cores = BTreeSet::new();
        for (&op, cores) in batch.ops.iter().zip(&batch.cores) {
            if !seen_ops.insert(op) {
                out.push(BulkViolation::RepeatedInBatch { batch: k, op });
                continue;
            }
            let Some(operator) = dag.get(op) else {
                out.push(BulkViolation::UnknownOperator { batch: k, op });
                continue;
            };
            match first_batch.get(&op) {
                Some(&first) => out.push(BulkViolation::Duplicate { op, first, again: k }),
                None => {
                    first_batch.insert(op, k);
                }
            }
            if cores.is_empty() {
                out.push(BulkViolation::NoCores { batch: k, op });
            }
            for &core in cores {
                if core >= p {
                    out.push(BulkViolation::CoreOutOfRange { batch: k, op, core });
                } else if !seen_cores.insert(core) {
                    out.push(BulkViolation::CoreShared { batch: k, core });
                }
            }
            if operator.para == ParaCapability::S && cores.len() > 1 {
                out.push(BulkViolation::SerializedMultiCore {
                    batch: k,
                    op,
                    cores: cores.len(),
                });
            }
        }
    }

    for op in dag.ids() {
        if !first_batch.contains_key(&op) {
            out.push(BulkViolation::Missing { op });
        }
    }

    for (k, batch) in sched.batches.iter().enumerate() {
        for (pos, &op) in batch.ops.iter().enumerate() {
            if !dag.contains(op) || first_batch.get(&op) != Some(&k) {
                continue;
            }
            let operator = dag.op(op);
            let parents = dag.parents(op);
            let same_batch: Vec<OpId> = parents
                .iter()
                .copied()
                .filter(|p| first_batch.get(p) == Some(&k))
                .collect();
            for &pred in parents {
                let ok = match first_batch.get(&pred) {
                    Some(&b) if b < k => true,
                    Some(&b) if b == k => {
                        same_batch.len() == 1
                            && batch.position(pred).is_some_and(|pp| pp < pos)
                            && operator.pipe.streams_input()
                            && (parents.len() == 1 || operator.cap_on == Some(pred))
                    }
                    _ => false,
                };
                if !ok {
                    out.push(BulkViolation::Dependency { batch: k, op, pred });
                }
            }
        }
    }
    out
}
