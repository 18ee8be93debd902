//! Chain and segment partitioning of a plan DAG.
//!
//! Chains are built by walking operators in id order and following unique
//! children. A multi-parent operator reached this way is a detached chain head:
//! the suffix starting at it is duplicated into every chain that reaches it, and
//! the scheduler later makes sure it runs once. Each chain is then cut into
//! segments, either a single operator or a maximal pipeline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dag::{OpId, PipeCapability, PlanDag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub index: usize,
    pub ops: Vec<OpId>,
}

/// Detached chain head → its predecessor operators.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetachedChainMap(BTreeMap<OpId, BTreeSet<OpId>>);

impl DetachedChainMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, head: OpId) -> bool {
        self.0.contains_key(&head)
    }

    pub fn parents(&self, head: OpId) -> Option<&BTreeSet<OpId>> {
        self.0.get(&head)
    }

    pub fn heads(&self) -> impl Iterator<Item = OpId> + '_ {
        self.0.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, head: OpId, parent: OpId) {
        self.0.entry(head).or_default().insert(parent);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    SingleOperator,
    Scheduleable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub ops: Vec<OpId>,
}

impl Segment {
    fn from_ops(ops: Vec<OpId>) -> Self {
        let kind = if ops.len() == 1 {
            SegmentKind::SingleOperator
        } else {
            SegmentKind::Scheduleable
        };
        Segment { kind, ops }
    }
}

/// Chains, the detached-chain map and per-chain segment lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegmentationRepr", into = "SegmentationRepr")]
pub struct Segmentation {
    pub chains: Vec<Chain>,
    pub dcm: DetachedChainMap,
    pub segments: Vec<Vec<Segment>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentationRepr {
    chains: Vec<Vec<OpId>>,
    dcm: DetachedChainMap,
    segments: Vec<Vec<Vec<OpId>>>,
}

impl From<Segmentation> for SegmentationRepr {
    fn from(s: Segmentation) -> Self {
        SegmentationRepr {
            chains: s.chains.into_iter().map(|c| c.ops).collect(),
            dcm: s.dcm,
            segments: s
                .segments
                .into_iter()
                .map(|list| list.into_iter().map(|seg| seg.ops).collect())
                .collect(),
        }
    }
}

impl TryFrom<SegmentationRepr> for Segmentation {
    type Error = String;

    fn try_from(r: SegmentationRepr) -> Result<Self, Self::Error> {
        if r.chains.len() != r.segments.len() {
            return Err("chains and segments lists differ in length".into());
        }
        for (k, (chain, segs)) in r.chains.iter().zip(&r.segments).enumerate() {
            if segs.iter().any(Vec::is_empty) || segs.concat() != *chain {
                return Err(format!("segments of chain {k} do not concatenate to the chain"));
            }
        }
        Ok(Segmentation {
            chains: r
                .chains
                .into_iter()
                .enumerate()
                .map(|(index, ops)| Chain { index, ops })
                .collect(),
            dcm: r.dcm,
            segments: r
                .segments
                .into_iter()
                .map(|list| list.into_iter().map(Segment::from_ops).collect())
                .collect(),
        })
    }
}

/// Splits the plan into chains and records detached chain heads.
///
/// Every multi-parent operator that appears past the start of a chain ends up as
/// a key of the returned map, mapped to its complete parent set.
pub fn partition_chains(dag: &PlanDag) -> (Vec<Chain>, DetachedChainMap) {
    let mut placed = BTreeSet::new();
    let mut chains = Vec::new();
    let mut dcm = DetachedChainMap::new();
    for start in dag.ids() {
        if placed.contains(&start) {
            continue;
        }
        let mut ops = vec![start];
        placed.insert(start);
        let mut detached = false;
        let mut cur = start;
        while let [child] = *dag.children(cur) {
            if dag.parents(child).len() > 1 && !detached {
                detached = true;
                dcm.insert(child, cur);
            }
            cur = child;
            ops.push(cur);
            placed.insert(cur);
        }
        chains.push(Chain {
            index: chains.len(),
            ops,
        });
    }

    // Complete each head's entry to its full parent set; a head reached after
    // another head within one chain is picked up here as well.
    for chain in &chains {
        for &op in &chain.ops[1..] {
            if dag.parents(op).len() > 1 {
                for &parent in dag.parents(op) {
                    dcm.insert(op, parent);
                }
            }
        }
    }
    (chains, dcm)
}

/// Cuts one chain into segments.
pub fn segment_chain(chain: &[OpId], dag: &PlanDag) -> Vec<Segment> {
    use PipeCapability::*;
    let pipe = |k: usize| dag.op(chain[k]).pipe;
    let mut segments = Vec::new();
    let mut start = 0;
    while start < chain.len() {
        let mut end = start + 1;
        if !matches!(pipe(start), B | I) {
            while end < chain.len() && pipe(end) == P {
                end += 1;
            }
            if end < chain.len() && pipe(end) == I {
                end += 1;
            }
        }
        segments.push(Segment::from_ops(chain[start..end].to_vec()));
        start = end;
    }
    segments
}

/// Segments every chain and bundles the result.
pub fn partition_segments(chains: Vec<Chain>, dcm: DetachedChainMap, dag: &PlanDag) -> Segmentation {
    let segments = chains.iter().map(|c| segment_chain(&c.ops, dag)).collect();
    Segmentation {
        chains,
        dcm,
        segments,
    }
}

/// Chains plus segments in one call.
pub fn partition(dag: &PlanDag) -> Segmentation {
    let (chains, dcm) = partition_chains(dag);
    partition_segments(chains, dcm, dag)
}

impl Segmentation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("segmentation serialization cannot fail")
    }
}

/// Pipe pattern of a segment as a string such as `"OPPI"`.
pub fn pipe_pattern(segment: &Segment, dag: &PlanDag) -> String {
    segment.ops.iter().map(|&id| dag.op(id).pipe.as_char()).collect()
}
