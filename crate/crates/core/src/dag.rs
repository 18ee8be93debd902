//! Operator and plan-DAG data model, JSON loading, and the DAG to task-set expansion.
//!
//! A [`PlanDag`] is validated on construction: it is acyclic, every edge endpoint
//! exists, and operator ids are already topologically ordered (every edge goes from
//! a smaller id to a larger one). Nothing downstream re-checks these properties.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rational::{int, serde_ratio, Rational};

/// Operator identifier. Ids double as a topological order.
pub type OpId = usize;

/// Pipeline capability of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PipeCapability {
    /// Input can be consumed batch by batch; output released at the end.
    I,
    /// Input consumed whole; output released batch by batch.
    O,
    /// Blocking on both sides.
    B,
    /// Pipelines on both sides.
    P,
}

impl PipeCapability {
    /// Whether the operator can consume a stream on its pipeline input.
    pub fn streams_input(self) -> bool {
        matches!(self, PipeCapability::P | PipeCapability::I)
    }

    /// Whether the operator can release its output as a stream.
    pub fn streams_output(self) -> bool {
        matches!(self, PipeCapability::P | PipeCapability::O)
    }

    pub fn as_char(self) -> char {
        match self {
            PipeCapability::I => 'I',
            PipeCapability::O => 'O',
            PipeCapability::B => 'B',
            PipeCapability::P => 'P',
        }
    }
}

/// Data-parallelism capability of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParaCapability {
    /// Data parallel-able.
    DP,
    /// Serialized.
    S,
}

/// Marker for zero-cost nodes inserted by plan transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Partition,
    Merge,
}

/// A physical operator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Operator {
    pub id: OpId,
    pub pipe: PipeCapability,
    pub para: ParaCapability,
    /// Time to process or release one execution unit.
    #[serde(with = "serde_ratio")]
    pub unit_time: Rational,
    /// Number of execution units.
    pub units: u32,
    pub input_units: u32,
    pub output_units: u32,
    /// The input on which the pipeline/parallel capability holds, for multi-input operators.
    #[serde(default)]
    pub cap_on: Option<OpId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticKind>,
}

impl Operator {
    /// A regular operator with `input_units`/`output_units` derived from the pipe class.
    pub fn new(
        id: OpId,
        pipe: PipeCapability,
        para: ParaCapability,
        unit_time: Rational,
        units: u32,
    ) -> Self {
        let input_units = if matches!(pipe, PipeCapability::O | PipeCapability::B) {
            1
        } else {
            units
        };
        let output_units = if matches!(pipe, PipeCapability::I | PipeCapability::B) {
            1
        } else {
            units
        };
        Operator {
            id,
            pipe,
            para,
            unit_time,
            units,
            input_units,
            output_units,
            cap_on: None,
            synthetic: None,
        }
    }

    pub fn with_cap_on(mut self, cap_on: OpId) -> Self {
        self.cap_on = Some(cap_on);
        self
    }

    /// Total duration `units × unit_time`.
    pub fn duration(&self) -> Rational {
        self.unit_time * int(self.units as i64)
    }

    pub fn is_data_parallel(&self) -> bool {
        self.para == ParaCapability::DP
    }

    fn check(&self) -> Result<(), DagError> {
        let bad = |reason: &'static str| DagError::InvalidOperator { id: self.id, reason };
        if self.synthetic.is_some() {
            if self.unit_time < int(0) {
                return Err(bad("unit_time must be non-negative"));
            }
        } else if self.unit_time <= int(0) {
            return Err(bad("unit_time must be positive"));
        }
        if self.units < 1 {
            return Err(bad("units must be at least 1"));
        }
        if self.input_units < 1 || self.output_units < 1 {
            return Err(bad("input_units and output_units must be at least 1"));
        }
        use PipeCapability::*;
        if matches!(self.pipe, O | B) && self.input_units != 1 {
            return Err(bad("pipe O or B requires input_units = 1"));
        }
        if matches!(self.pipe, I | B) && self.output_units != 1 {
            return Err(bad("pipe I or B requires output_units = 1"));
        }
        if matches!(self.pipe, O | B) && self.para != ParaCapability::S {
            return Err(bad("pipe O or B requires para S"));
        }
        if self.pipe == B && self.units != 1 {
            return Err(bad("pipe B requires units = 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DagError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate operator id {0}")]
    DuplicateOperator(OpId),
    #[error("unknown operator id {id} in edge ({src}, {dst})")]
    UnknownOperator { id: OpId, src: OpId, dst: OpId },
    #[error("self-loop on operator {0}")]
    SelfLoop(OpId),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(OpId, OpId),
    #[error("cycle detected")]
    Cycle,
    #[error("operator ids are not topological: edge ({src}, {dst}) goes backwards")]
    NonTopological { src: OpId, dst: OpId },
    #[error("invalid operator {id}: {reason}")]
    InvalidOperator { id: OpId, reason: &'static str },
    #[error("operator {id} has cap_on {cap_on}, which is not one of its inputs")]
    CapOnNotInput { id: OpId, cap_on: OpId },
}

/// The physical plan: operators plus dependency edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDag", into = "RawDag")]
pub struct PlanDag {
    operators: BTreeMap<OpId, Operator>,
    edges: BTreeSet<(OpId, OpId)>,
    parents: BTreeMap<OpId, Vec<OpId>>,
    children: BTreeMap<OpId, Vec<OpId>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDag {
    operators: Vec<Operator>,
    edges: Vec<(OpId, OpId)>,
}

impl TryFrom<RawDag> for PlanDag {
    type Error = DagError;

    fn try_from(raw: RawDag) -> Result<Self, Self::Error> {
        PlanDag::new(raw.operators, raw.edges)
    }
}

impl From<PlanDag> for RawDag {
    fn from(dag: PlanDag) -> Self {
        RawDag {
            operators: dag.operators.into_values().collect(),
            edges: dag.edges.into_iter().collect(),
        }
    }
}

impl PlanDag {
    /// Builds and validates a plan.
    pub fn new(
        operators: impl IntoIterator<Item = Operator>,
        edges: impl IntoIterator<Item = (OpId, OpId)>,
    ) -> Result<Self, DagError> {
        let mut ops = BTreeMap::new();
        for op in operators {
            op.check()?;
            let id = op.id;
            if ops.insert(id, op).is_some() {
                return Err(DagError::DuplicateOperator(id));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (src, dst) in edges {
            for id in [src, dst] {
                if !ops.contains_key(&id) {
                    return Err(DagError::UnknownOperator { id, src, dst });
                }
            }
            if src == dst {
                return Err(DagError::SelfLoop(src));
            }
            if !edge_set.insert((src, dst)) {
                return Err(DagError::DuplicateEdge(src, dst));
            }
        }
        let mut parents: BTreeMap<OpId, Vec<OpId>> = ops.keys().map(|&k| (k, vec![])).collect();
        let mut children: BTreeMap<OpId, Vec<OpId>> = ops.keys().map(|&k| (k, vec![])).collect();
        for &(src, dst) in &edge_set {
            children.get_mut(&src).unwrap().push(dst);
            parents.get_mut(&dst).unwrap().push(src);
        }
        for list in parents.values_mut().chain(children.values_mut()) {
            list.sort_unstable();
        }

        let dag = PlanDag {
            operators: ops,
            edges: edge_set,
            parents,
            children,
        };
        if dag.has_cycle() {
            return Err(DagError::Cycle);
        }
        if let Some(&(src, dst)) = dag.edges.iter().find(|(s, d)| s > d) {
            return Err(DagError::NonTopological { src, dst });
        }
        for op in dag.operators.values() {
            if let Some(c) = op.cap_on {
                if !dag.parents[&op.id].contains(&c) {
                    return Err(DagError::CapOnNotInput { id: op.id, cap_on: c });
                }
            }
        }
        Ok(dag)
    }

    /// Parses and validates a JSON plan document.
    pub fn from_json(bytes: &[u8]) -> Result<Self, DagError> {
        let raw: RawDag = serde_json::from_slice(bytes)?;
        PlanDag::new(raw.operators, raw.edges)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    fn has_cycle(&self) -> bool {
        let mut indeg: BTreeMap<OpId, usize> =
            self.parents.iter().map(|(&k, v)| (k, v.len())).collect();
        let mut ready: Vec<OpId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
        let mut seen = 0;
        while let Some(id) = ready.pop() {
            seen += 1;
            for c in &self.children[&id] {
                let d = indeg.get_mut(c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(*c);
                }
            }
        }
        seen != self.operators.len()
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// Operators in ascending id order.
    pub fn operators(&self) -> impl Iterator<Item = &Operator> {
        self.operators.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = OpId> + '_ {
        self.operators.keys().copied()
    }

    pub fn get(&self, id: OpId) -> Option<&Operator> {
        self.operators.get(&id)
    }

    /// Operator by id. Panics on an unknown id.
    pub fn op(&self, id: OpId) -> &Operator {
        &self.operators[&id]
    }

    pub fn contains(&self, id: OpId) -> bool {
        self.operators.contains_key(&id)
    }

    pub fn edges(&self) -> impl Iterator<Item = (OpId, OpId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, src: OpId, dst: OpId) -> bool {
        self.edges.contains(&(src, dst))
    }

    /// Sorted parent ids.
    pub fn parents(&self, id: OpId) -> &[OpId] {
        &self.parents[&id]
    }

    /// Sorted child ids.
    pub fn children(&self, id: OpId) -> &[OpId] {
        &self.children[&id]
    }

    /// One core, one task at a time: `Σ units × unit_time`.
    pub fn serial_makespan(&self) -> Rational {
        self.operators.values().map(Operator::duration).sum()
    }

    /// Total number of unit tasks.
    pub fn task_count(&self) -> usize {
        self.operators.values().map(|o| o.units as usize).sum()
    }

    /// Whether `to` is reachable from `from` along edges (a node reaches itself).
    pub fn reaches(&self, from: OpId, to: OpId) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if n > to || !seen.insert(n) {
                continue;
            }
            stack.extend(self.children(n).iter().copied());
        }
        false
    }
}

/// Parses a JSON plan document.
pub fn load_dag(bytes: &[u8]) -> Result<PlanDag, DagError> {
    PlanDag::from_json(bytes)
}

/// The one-core serial makespan of a plan.
pub fn serial_makespan(dag: &PlanDag) -> Rational {
    dag.serial_makespan()
}

/// A task: the `unit`-th (1-based) execution unit of operator `op`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub op: OpId,
    pub unit: u32,
}

impl TaskId {
    pub fn new(op: OpId, unit: u32) -> Self {
        TaskId { op, unit }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.op, self.unit)
    }
}

/// Unit-level expansion of a plan.
///
/// Rows follow ascending operator id; columns are unit indices `1..=N` with
/// `N = max(units)`. A task `(i, j)` exists iff `j ≤ units(op_i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSet {
    op_ids: Vec<OpId>,
    max_units: u32,
    exec_time: Vec<Vec<Rational>>,
    task_exists: Vec<Vec<bool>>,
    deps: BTreeSet<(TaskId, TaskId)>,
    preds: BTreeMap<TaskId, Vec<TaskId>>,
}

impl TaskSet {
    pub fn n_ops(&self) -> usize {
        self.op_ids.len()
    }

    /// `N`, the largest unit count.
    pub fn max_units(&self) -> u32 {
        self.max_units
    }

    /// Operator id of row `i`.
    pub fn row_op(&self, row: usize) -> OpId {
        self.op_ids[row]
    }

    /// The `DT` matrix, `|OP| × N`.
    pub fn exec_time(&self) -> &[Vec<Rational>] {
        &self.exec_time
    }

    pub fn task_exists_matrix(&self) -> &[Vec<bool>] {
        &self.task_exists
    }

    fn row(&self, op: OpId) -> Option<usize> {
        self.op_ids.binary_search(&op).ok()
    }

    pub fn exists(&self, t: TaskId) -> bool {
        match self.row(t.op) {
            Some(r) => t.unit >= 1 && t.unit <= self.max_units && self.task_exists[r][t.unit as usize - 1],
            None => false,
        }
    }

    /// Duration of a task; zero for non-existent tasks.
    pub fn duration(&self, t: TaskId) -> Rational {
        if !self.exists(t) {
            return int(0);
        }
        self.exec_time[self.row(t.op).unwrap()][t.unit as usize - 1]
    }

    /// All existing tasks in `(op, unit)` order.
    pub fn tasks(&self) -> Vec<TaskId> {
        let mut out = Vec::new();
        for (r, &op) in self.op_ids.iter().enumerate() {
            for (j, &e) in self.task_exists[r].iter().enumerate() {
                if e {
                    out.push(TaskId::new(op, j as u32 + 1));
                }
            }
        }
        out
    }

    pub fn task_count(&self) -> usize {
        self.task_exists.iter().flatten().filter(|&&e| e).count()
    }

    /// `td[(from), (to)] = 1`: `to` depends on `from`.
    pub fn depends(&self, from: TaskId, to: TaskId) -> bool {
        self.deps.contains(&(from, to))
    }

    /// Every `(from, to)` dependency pair.
    pub fn dependencies(&self) -> impl Iterator<Item = (TaskId, TaskId)> + '_ {
        self.deps.iter().copied()
    }

    /// Tasks that `t` depends on.
    pub fn predecessors(&self, t: TaskId) -> &[TaskId] {
        self.preds.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Expands a plan into its unit-task set.
pub fn expand_tasks(dag: &PlanDag) -> TaskSet {
    let op_ids: Vec<OpId> = dag.ids().collect();
    let max_units = dag.operators().map(|o| o.units).max().unwrap_or(0);
    let mut exec_time = Vec::with_capacity(op_ids.len());
    let mut task_exists = Vec::with_capacity(op_ids.len());
    for op in dag.operators() {
        let row_exists: Vec<bool> = (1..=max_units).map(|j| j <= op.units).collect();
        let row_time = row_exists
            .iter()
            .map(|&e| if e { op.unit_time } else { int(0) })
            .collect();
        task_exists.push(row_exists);
        exec_time.push(row_time);
    }

    let mut deps = BTreeSet::new();
    for (src, dst) in dag.edges() {
        let shared = dag.op(src).units.min(dag.op(dst).units);
        for j in 1..=shared {
            deps.insert((TaskId::new(src, j), TaskId::new(dst, j)));
        }
    }
    for op in dag.operators().filter(|o| o.para == ParaCapability::S) {
        for j in 1..=op.units {
            for k in j + 1..=op.units {
                deps.insert((TaskId::new(op.id, j), TaskId::new(op.id, k)));
            }
        }
    }
    let mut preds: BTreeMap<TaskId, Vec<TaskId>> = BTreeMap::new();
    for &(from, to) in &deps {
        preds.entry(to).or_default().push(from);
    }

    TaskSet {
        op_ids,
        max_units,
        exec_time,
        task_exists,
        deps,
        preds,
    }
}
