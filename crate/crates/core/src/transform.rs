//! Plan rewrites: Partition/Merge insertion for data parallelism, buffering
//! chain cuts, and the pipeline-versus-data-parallel core split.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{DagError, OpId, Operator, ParaCapability, PipeCapability, PlanDag, SyntheticKind};
use crate::rational::{int, rat, Rational};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("operator {0} has no tag")]
    MissingTag(OpId),
    #[error("tag given for unknown operator {0}")]
    UnknownOperator(OpId),
    #[error("operator {0} is PR with several inputs but no cap_on")]
    MissingCapOn(OpId),
    #[error("operator {op}: cap_on {cap_on} is not one of its inputs")]
    CapOnNotInput { op: OpId, cap_on: OpId },
    #[error("operator {0}: cap_on is only allowed on multi-input operators")]
    UnexpectedCapOn(OpId),
    #[error(transparent)]
    Dag(#[from] DagError),
}

/// Data-parallel capability of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParallelTag {
    /// Runs in parallel over partitions of its cap_on input.
    PR,
    /// Single-threaded.
    ST,
    /// External; parallelizes internally and is left alone.
    EX,
}

/// `PR` for data-parallel operators, `ST` otherwise.
pub fn default_parallel_tags(dag: &PlanDag) -> BTreeMap<OpId, ParallelTag> {
    dag.operators()
        .map(|op| {
            let tag = match op.para {
                ParaCapability::DP => ParallelTag::PR,
                ParaCapability::S => ParallelTag::ST,
            };
            (op.id, tag)
        })
        .collect()
}

fn check_tag_keys<T>(dag: &PlanDag, tags: &BTreeMap<OpId, T>) -> Result<(), TransformError> {
    if let Some(&id) = tags.keys().find(|&&id| !dag.contains(id)) {
        return Err(TransformError::UnknownOperator(id));
    }
    if let Some(id) = dag.ids().find(|id| !tags.contains_key(id)) {
        return Err(TransformError::MissingTag(id));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InsertedNode {
    /// Id in the transformed plan.
    pub id: OpId,
    pub kind: SyntheticKind,
    /// Original operator whose output the node partitions or merges.
    pub source: OpId,
}

#[derive(Debug, Clone)]
pub struct TransformedDag {
    pub dag: PlanDag,
    /// Original id → id in the transformed plan.
    pub id_map: BTreeMap<OpId, OpId>,
    pub inserted: Vec<InsertedNode>,
}

/// Inserts Partition and Merge nodes so every PR operator reads a partitioned
/// cap_on input and everything else reads whole collections.
///
/// One Partition and one Merge node at most are created per source and shared
/// by its consumers. EX consumers are treated like ST. Inserted nodes have zero
/// duration. Ids are renumbered so that they stay topological.
pub fn insert_partition_merge(
    dag: &PlanDag,
    tags: &BTreeMap<OpId, ParallelTag>,
) -> Result<TransformedDag, TransformError> {
    check_tag_keys(dag, tags)?;
    let is_pr = |id: OpId| tags[&id] == ParallelTag::PR;

    // Ordering keys: original ops (id, 0, 0), inserted ones (source, 1, kind).
    type Key = (OpId, u8, u8);
    let node_key = |kind: SyntheticKind| match kind {
        SyntheticKind::Partition => 0,
        SyntheticKind::Merge => 1,
    };
    let mut nodes: BTreeMap<Key, Option<SyntheticKind>> = dag.ids().map(|id| ((id, 0, 0), None)).collect();
    let mut edges: Vec<(Key, Key)> = Vec::new();
    // Consumer cap_on inputs that were rerouted: (consumer, original input) → new input key.
    let mut rerouted: BTreeMap<(OpId, OpId), Key> = BTreeMap::new();

    for op in dag.operators() {
        let v = op.id;
        let parents = dag.parents(v);
        let cap_on = if is_pr(v) && parents.len() > 1 {
            Some(op.cap_on.ok_or(TransformError::MissingCapOn(v))?)
        } else {
            parents.first().copied().filter(|_| parents.len() == 1)
        };
        for &u in parents {
            let insert = if is_pr(v) {
                match (Some(u) == cap_on, is_pr(u)) {
                    (true, false) => Some(SyntheticKind::Partition),
                    (false, true) => Some(SyntheticKind::Merge),
                    _ => None,
                }
            } else if is_pr(u) {
                Some(SyntheticKind::Merge)
            } else {
                None
            };
            match insert {
                None => edges.push(((u, 0, 0), (v, 0, 0))),
                Some(kind) => {
                    let key = (u, 1, node_key(kind));
                    if nodes.insert(key, Some(kind)).is_none() {
                        edges.push(((u, 0, 0), key));
                    }
                    edges.push((key, (v, 0, 0)));
                    rerouted.insert((v, u), key);
                }
            }
        }
    }

    // Kahn's algorithm, always releasing the smallest key.
    let mut indeg: BTreeMap<Key, usize> = nodes.keys().map(|&k| (k, 0)).collect();
    let mut out: BTreeMap<Key, Vec<Key>> = BTreeMap::new();
    for &(a, b) in &edges {
        *indeg.get_mut(&b).unwrap() += 1;
        out.entry(a).or_default().push(b);
    }
    let mut ready: BinaryHeap<Reverse<Key>> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| Reverse(k)).collect();
    let mut new_id: BTreeMap<Key, OpId> = BTreeMap::new();
    while let Some(Reverse(k)) = ready.pop() {
        new_id.insert(k, new_id.len());
        for &c in out.get(&k).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(&c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    debug_assert_eq!(new_id.len(), nodes.len());

    let mut ops = Vec::with_capacity(nodes.len());
    let mut inserted = Vec::new();
    for (&key, &kind) in &nodes {
        let id = new_id[&key];
        match kind {
            None => {
                let mut op = dag.op(key.0).clone();
                op.id = id;
                op.cap_on = op.cap_on.map(|c| rerouted.get(&(key.0, c)).map_or(new_id[&(c, 0, 0)], |k| new_id[k]));
                ops.push(op);
            }
            Some(kind) => {
                let mut op = Operator::new(id, PipeCapability::P, ParaCapability::S, int(0), 1);
                op.synthetic = Some(kind);
                ops.push(op);
                inserted.push(InsertedNode {
                    id,
                    kind,
                    source: key.0,
                });
            }
        }
    }
    inserted.sort_by_key(|n| n.id);
    let new_edges = edges.iter().map(|(a, b)| (new_id[a], new_id[b]));
    let out_dag = PlanDag::new(ops, new_edges)?;
    Ok(TransformedDag {
        dag: out_dag,
        id_map: dag.ids().map(|id| (id, new_id[&(id, 0, 0)])).collect(),
        inserted,
    })
}

/// Buffering capability: whether input and output can be consumed as streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferCapability {
    /// Stream input, whole output.
    SI,
    /// Whole input, stream output.
    SO,
    /// Whole input and output.
    B,
    /// Stream input and output.
    SS,
}

impl BufferCapability {
    pub fn streams_input(self) -> bool {
        matches!(self, BufferCapability::SI | BufferCapability::SS)
    }

    pub fn streams_output(self) -> bool {
        matches!(self, BufferCapability::SO | BufferCapability::SS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferTag {
    pub cap: BufferCapability,
    #[serde(default)]
    pub cap_on: Option<OpId>,
}

/// Tags read off each operator's pipe class and cap_on.
pub fn default_buffer_tags(dag: &PlanDag) -> BTreeMap<OpId, BufferTag> {
    dag.operators()
        .map(|op| {
            let cap = match op.pipe {
                PipeCapability::I => BufferCapability::SI,
                PipeCapability::O => BufferCapability::SO,
                PipeCapability::B => BufferCapability::B,
                PipeCapability::P => BufferCapability::SS,
            };
            (op.id, BufferTag { cap, cap_on: op.cap_on })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CutRule {
    /// The source cannot emit a stream or the target cannot take one.
    Stream,
    /// The edge does not feed the target's cap_on input.
    CapOn,
    /// The source has several outgoing edges.
    FanOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cut {
    pub from: OpId,
    pub to: OpId,
    /// First rule that applies.
    pub rule: CutRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BufferPlan {
    pub cuts: Vec<Cut>,
    /// Paths of uncut edges, ordered by head id; every operator is on exactly one.
    pub chains: Vec<Vec<OpId>>,
}

/// Cuts the plan into buffering chains.
///
/// A multi-input operator without cap_on has every input cut.
pub fn buffering_cuts(dag: &PlanDag, tags: &BTreeMap<OpId, BufferTag>) -> Result<BufferPlan, TransformError> {
    check_tag_keys(dag, tags)?;
    for (&id, tag) in tags {
        if let Some(c) = tag.cap_on {
            if dag.parents(id).len() < 2 {
                return Err(TransformError::UnexpectedCapOn(id));
            }
            if !dag.has_edge(c, id) {
                return Err(TransformError::CapOnNotInput { op: id, cap_on: c });
            }
        }
    }

    let mut cuts = Vec::new();
    let mut next: BTreeMap<OpId, OpId> = BTreeMap::new();
    let mut has_prev = vec![false; dag.ids().max().map_or(0, |m| m + 1)];
    for (a, b) in dag.edges() {
        let (ta, tb) = (tags[&a], tags[&b]);
        let rule = if !ta.cap.streams_output() || !tb.cap.streams_input() {
            Some(CutRule::Stream)
        } else if dag.parents(b).len() > 1 && tb.cap_on != Some(a) {
            Some(CutRule::CapOn)
        } else if dag.children(a).len() > 1 {
            Some(CutRule::FanOut)
        } else {
            None
        };
        match rule {
            Some(rule) => cuts.push(Cut { from: a, to: b, rule }),
            None => {
                next.insert(a, b);
                has_prev[b] = true;
            }
        }
    }

    let chains = dag
        .ids()
        .filter(|&id| !has_prev[id])
        .map(|head| {
            let mut chain = vec![head];
            while let Some(&n) = next.get(chain.last().unwrap()) {
                chain.push(n);
            }
            chain
        })
        .collect();
    Ok(BufferPlan { cuts, chains })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("stage times must be positive")]
    NonPositiveTime,
    #[error("at least two cores are needed to split a pipeline")]
    TooFewCores,
    #[error("at least one batch is needed")]
    NoBatches,
    #[error("aggregation cost must be non-negative")]
    NegativeAggregation,
    #[error("n1 must lie in [1, n-1]")]
    SplitOutOfRange,
}

/// Data-parallel time against the rate-matched pipeline split of a two-stage chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineAnalysis {
    /// Cores given to the first stage.
    pub n1: usize,
    /// Both stages data-parallel on all cores, one after the other.
    pub t_dp: Rational,
    /// Stages pipelined on `n1` and `n - n1` cores.
    pub t_pipe: Rational,
}

fn check_analysis(t1: Rational, t2: Rational, n: usize, m: u64, agg: Rational) -> Result<(), AnalysisError> {
    if t1 <= int(0) || t2 <= int(0) {
        return Err(AnalysisError::NonPositiveTime);
    }
    if n < 2 {
        return Err(AnalysisError::TooFewCores);
    }
    if m < 1 {
        return Err(AnalysisError::NoBatches);
    }
    if agg < int(0) {
        return Err(AnalysisError::NegativeAggregation);
    }
    Ok(())
}

/// `(t1 + t2)·m/n + agg·n`.
pub fn data_parallel_time(t1: Rational, t2: Rational, n: usize, m: u64, agg: Rational) -> Result<Rational, AnalysisError> {
    check_analysis(t1, t2, n, m, agg)?;
    let (n, m) = (int(n as i64), int(m as i64));
    Ok((t1 + t2) * m / n + agg * n)
}

/// `max(t1·m/n1, t2·m/(n − n1)) + agg·n1` for a given split.
pub fn pipeline_time(
    t1: Rational,
    t2: Rational,
    n: usize,
    m: u64,
    agg: Rational,
    n1: usize,
) -> Result<Rational, AnalysisError> {
    check_analysis(t1, t2, n, m, agg)?;
    if n1 < 1 || n1 >= n {
        return Err(AnalysisError::SplitOutOfRange);
    }
    let m = int(m as i64);
    let first = t1 * m / int(n1 as i64);
    let second = t2 * m / int((n - n1) as i64);
    Ok(first.max(second) + agg * int(n1 as i64))
}

/// Splits `n` cores in proportion to the stage times (nearest integer, halves
/// rounded up, clamped to `[1, n−1]`) and compares both strategies.
pub fn pipeline_vs_dp(t1: Rational, t2: Rational, n: usize, m: u64, agg: Rational) -> Result<PipelineAnalysis, AnalysisError> {
    let t_dp = data_parallel_time(t1, t2, n, m, agg)?;
    let ideal = t1 * int(n as i64) / (t1 + t2);
    let rounded = (ideal + rat(1, 2)).floor().to_integer();
    let n1 = rounded.clamp(1, n as i64 - 1) as usize;
    let t_pipe = pipeline_time(t1, t2, n, m, agg, n1)?;
    Ok(PipelineAnalysis { n1, t_dp, t_pipe })
}
