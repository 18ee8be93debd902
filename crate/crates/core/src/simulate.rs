//! Concrete timing for bulk schedules and task-level feasibility checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{expand_tasks, OpId, PlanDag, TaskId};
use crate::greedy::{validate_bulk, BulkSchedule, BulkViolation};
use crate::rational::{int, serde_ratio, Rational};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("schedule is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidSchedule(Vec<BulkViolation>),
}

/// One unit task placed on a core.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledTask {
    pub op: OpId,
    pub unit: u32,
    pub core: usize,
    #[serde(with = "serde_ratio")]
    pub start: Rational,
    #[serde(with = "serde_ratio")]
    pub end: Rational,
}

impl ScheduledTask {
    pub fn task(&self) -> TaskId {
        TaskId::new(self.op, self.unit)
    }
}

/// Start/end times and core assignment for every unit task, sorted by `(op, unit)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSchedule {
    pub cores: usize,
    pub tasks: Vec<ScheduledTask>,
}

impl TaskSchedule {
    pub fn new(cores: usize, mut tasks: Vec<ScheduledTask>) -> Self {
        tasks.sort_by_key(|t| (t.op, t.unit, t.core));
        TaskSchedule { cores, tasks }
    }

    pub fn makespan(&self) -> Rational {
        makespan(self)
    }

    /// Lookup by task id.
    pub fn by_task(&self) -> BTreeMap<TaskId, &ScheduledTask> {
        self.tasks.iter().map(|t| (t.task(), t)).collect()
    }

    /// The assignment tensor `A[i][j][k]`, rows in ascending operator id.
    pub fn assignment(&self, dag: &PlanDag) -> Vec<Vec<Vec<bool>>> {
        let n = dag.operators().map(|o| o.units).max().unwrap_or(0) as usize;
        let rows: BTreeMap<OpId, usize> = dag.ids().enumerate().map(|(r, id)| (id, r)).collect();
        let mut a = vec![vec![vec![false; self.cores]; n]; rows.len()];
        for t in &self.tasks {
            if let Some(&r) = rows.get(&t.op) {
                if t.unit >= 1 && (t.unit as usize) <= n && t.core < self.cores {
                    a[r][t.unit as usize - 1][t.core] = true;
                }
            }
        }
        a
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task schedule serialization cannot fail")
    }
}

/// Largest end time; zero for an empty schedule.
pub fn makespan(ts: &TaskSchedule) -> Rational {
    ts.tasks.iter().map(|t| t.end).max().unwrap_or(int(0))
}

/// Turns a bulk schedule into unit-level timings.
///
/// Batches run back to back. Within a batch, an operator's units are dealt
/// round-robin over its cores and each core runs its units in order; a unit
/// starts as soon as its core is free and every unit it depends on has ended.
/// The next batch starts when the slowest core of this one finishes.
pub fn realize(dag: &PlanDag, sched: &BulkSchedule) -> Result<(TaskSchedule, Rational), SimulateError> {
    let report = validate_bulk(dag, sched);
    if !report.is_empty() {
        return Err(SimulateError::InvalidSchedule(report));
    }
    let taskset = expand_tasks(dag);
    let mut ends: BTreeMap<TaskId, Rational> = BTreeMap::new();
    let mut tasks = Vec::with_capacity(taskset.task_count());
    let mut batch_start = int(0);

    for batch in sched.batches() {
        // (unit, position in L) is a topological order of the batch's dependencies.
        let mut placed: Vec<(u32, usize, OpId, usize)> = Vec::new();
        for (pos, (&op, cores)) in batch.ops().iter().zip(batch.cores()).enumerate() {
            for unit in 1..=dag.op(op).units {
                let core = cores[(unit as usize - 1) % cores.len()];
                placed.push((unit, pos, op, core));
            }
        }
        placed.sort_unstable();

        let mut core_free: BTreeMap<usize, Rational> = BTreeMap::new();
        let mut batch_end = batch_start;
        for (unit, _, op, core) in placed {
            let id = TaskId::new(op, unit);
            let ready = taskset
                .predecessors(id)
                .iter()
                .map(|p| ends[p])
                .fold(batch_start, Rational::max);
            let start = ready.max(*core_free.get(&core).unwrap_or(&batch_start));
            let end = start + taskset.duration(id);
            core_free.insert(core, end);
            ends.insert(id, end);
            batch_end = batch_end.max(end);
            tasks.push(ScheduledTask {
                op,
                unit,
                core,
                start,
                end,
            });
        }
        batch_start = batch_end;
    }
    Ok((TaskSchedule::new(sched.core_count(), tasks), batch_start))
}

/// A broken task-level constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskViolation {
    UnknownTask(TaskId),
    MissingTask(TaskId),
    /// Constraint ③: assigned to more than one processor (or listed twice).
    MultipleAssignment(TaskId),
    CoreOutOfRange { task: TaskId, core: usize },
    /// Constraint ②.
    Duration { task: TaskId, expected: Rational, actual: Rational },
    /// Constraint ①.
    Dependency { task: TaskId, pred: TaskId },
    /// Constraint ④.
    Overlap { core: usize, a: TaskId, b: TaskId },
}

impl fmt::Display for TaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use TaskViolation::*;
        match self {
            UnknownTask(t) => write!(f, "task {t} does not exist"),
            MissingTask(t) => write!(f, "indivisibility: task {t} is not assigned"),
            MultipleAssignment(t) => write!(f, "indivisibility: task {t} assigned more than once"),
            CoreOutOfRange { task, core } => write!(f, "task {task} on nonexistent core {core}"),
            Duration { task, expected, actual } => {
                write!(f, "non-preemption: task {task} lasts {actual}, expected {expected}")
            }
            Dependency { task, pred } => write!(f, "dependency: task {task} starts before {pred} ends"),
            Overlap { core, a, b } => write!(f, "exclusive access: tasks {a} and {b} overlap on core {core}"),
        }
    }
}

/// Checks constraints ①–④ of the task-level formulation.
pub fn validate_tasks(dag: &PlanDag, ts: &TaskSchedule) -> Vec<TaskViolation> {
    let taskset = expand_tasks(dag);
    let mut out = Vec::new();
    let mut by_task: BTreeMap<TaskId, &ScheduledTask> = BTreeMap::new();
    let mut repeated = BTreeSet::new();

    for t in &ts.tasks {
        let id = t.task();
        if !taskset.exists(id) {
            out.push(TaskViolation::UnknownTask(id));
            continue;
        }
        if by_task.insert(id, t).is_some() && repeated.insert(id) {
            out.push(TaskViolation::MultipleAssignment(id));
        }
        if t.core >= ts.cores {
            out.push(TaskViolation::CoreOutOfRange { task: id, core: t.core });
        }
        let expected = taskset.duration(id);
        if t.end - t.start != expected {
            out.push(TaskViolation::Duration {
                task: id,
                expected,
                actual: t.end - t.start,
            });
        }
    }
    for id in taskset.tasks() {
        if !by_task.contains_key(&id) {
            out.push(TaskViolation::MissingTask(id));
        }
    }
    for (from, to) in taskset.dependencies() {
        if let (Some(a), Some(b)) = (by_task.get(&from), by_task.get(&to)) {
            if b.start < a.start + taskset.duration(from) {
                out.push(TaskViolation::Dependency { task: to, pred: from });
            }
        }
    }

    let mut per_core: BTreeMap<usize, Vec<&ScheduledTask>> = BTreeMap::new();
    for t in &ts.tasks {
        if taskset.exists(t.task()) {
            per_core.entry(t.core).or_default().push(t);
        }
    }
    for (core, list) in per_core {
        for (i, a) in list.iter().enumerate() {
            for b in &list[i + 1..] {
                if (a.start - b.end) * (a.end - b.start) < int(0) {
                    out.push(TaskViolation::Overlap {
                        core,
                        a: a.task(),
                        b: b.task(),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{Operator, ParaCapability, PipeCapability};
    use crate::greedy::SingleBatchAssignment;

    fn dag(units: &[u32], edges: &[(OpId, OpId)]) -> PlanDag {
        let ops = units
            .iter()
            .enumerate()
            .map(|(id, &u)| Operator::new(id, PipeCapability::P, ParaCapability::DP, int(1), u));
        PlanDag::new(ops, edges.iter().copied()).unwrap()
    }

    fn bulk(p: usize, batches: Vec<(Vec<OpId>, Vec<Vec<usize>>)>) -> BulkSchedule {
        let n = batches.len();
        let batches = batches
            .into_iter()
            .map(|(ops, cores)| SingleBatchAssignment::from_parts(p, ops, cores))
            .collect();
        BulkSchedule::from_parts(p, batches, vec![vec![]; n])
    }

    #[test]
    fn batch_duration_is_busiest_core() {
        let d = dag(&[2, 3], &[]);
        let (ts, span) = realize(&d, &bulk(2, vec![(vec![0, 1], vec![vec![0], vec![1]])])).unwrap();
        assert_eq!(span, int(3));
        assert!(validate_tasks(&d, &ts).is_empty());
    }

    #[test]
    fn round_robin_split() {
        let d = dag(&[4], &[]);
        let (ts, span) = realize(&d, &bulk(2, vec![(vec![0], vec![vec![0, 1]])])).unwrap();
        assert_eq!(span, int(2));
        let on_core1: Vec<u32> = ts.tasks.iter().filter(|t| t.core == 1).map(|t| t.unit).collect();
        assert_eq!(on_core1, vec![2, 4]);
    }

    #[test]
    fn sequential_batches_add_up() {
        let d = dag(&[3, 2], &[(0, 1)]);
        let (ts, span) = realize(&d, &bulk(1, vec![(vec![0], vec![vec![0]]), (vec![1], vec![vec![0]])])).unwrap();
        assert_eq!(span, int(5));
        assert_eq!(makespan(&ts), int(5));
        assert!(validate_tasks(&d, &ts).is_empty());
    }

    #[test]
    fn pipelined_units_wait_for_their_inputs() {
        let d = dag(&[3, 3], &[(0, 1)]);
        let (ts, span) = realize(&d, &bulk(2, vec![(vec![0, 1], vec![vec![0], vec![1]])])).unwrap();
        assert_eq!(span, int(4));
        assert!(validate_tasks(&d, &ts).is_empty());
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let d = dag(&[1, 1], &[(0, 1)]);
        let err = realize(&d, &bulk(1, vec![(vec![1], vec![vec![0]]), (vec![0], vec![vec![0]])])).unwrap_err();
        assert!(err.to_string().contains("dependency"));
    }

    #[test]
    fn makespan_examples() {
        let t = |op, start: i64, end: i64| ScheduledTask {
            op,
            unit: 1,
            core: 0,
            start: int(start),
            end: int(end),
        };
        assert_eq!(makespan(&TaskSchedule::new(1, vec![t(0, 0, 3)])), int(3));
        assert_eq!(makespan(&TaskSchedule::new(1, vec![])), int(0));
        assert_eq!(makespan(&TaskSchedule::new(2, vec![t(0, 0, 2), t(1, 0, 5)])), int(5));
    }

    #[test]
    fn detects_overlap_and_dependency() {
        let d = dag(&[1, 1], &[]);
        let ts = TaskSchedule::new(
            1,
            vec![
                ScheduledTask { op: 0, unit: 1, core: 0, start: int(0), end: int(1) },
                ScheduledTask { op: 1, unit: 1, core: 0, start: int(0), end: int(1) },
            ],
        );
        let report = validate_tasks(&d, &ts);
        assert_eq!(
            report,
            vec![TaskViolation::Overlap { core: 0, a: TaskId::new(0, 1), b: TaskId::new(1, 1) }]
        );

        let d = dag(&[1, 1], &[(0, 1)]);
        let ts = TaskSchedule::new(
            2,
            vec![
                ScheduledTask { op: 0, unit: 1, core: 0, start: int(0), end: int(1) },
                ScheduledTask { op: 1, unit: 1, core: 1, start: int(0), end: int(1) },
            ],
        );
        let report = validate_tasks(&d, &ts);
        assert_eq!(
            report,
            vec![TaskViolation::Dependency { task: TaskId::new(1, 1), pred: TaskId::new(0, 1) }]
        );
    }

    #[test]
    fn detects_bad_duration_missing_and_duplicate() {
        let d = dag(&[2], &[]);
        let t = |unit, core, start: i64, end: i64| ScheduledTask { op: 0, unit, core, start: int(start), end: int(end) };
        let ts = TaskSchedule::new(2, vec![t(1, 0, 0, 2), t(1, 1, 0, 1), t(3, 0, 5, 6)]);
        let report = validate_tasks(&d, &ts);
        assert!(report.contains(&TaskViolation::UnknownTask(TaskId::new(0, 3))));
        assert!(report.contains(&TaskViolation::MultipleAssignment(TaskId::new(0, 1))));
        assert!(report.contains(&TaskViolation::MissingTask(TaskId::new(0, 2))));
        assert!(report.iter().any(|v| matches!(v, TaskViolation::Duration { .. })));
    }

    #[test]
    fn assignment_tensor() {
        let d = dag(&[2], &[]);
        let (ts, _) = realize(&d, &bulk(2, vec![(vec![0], vec![vec![0, 1]])])).unwrap();
        assert_eq!(ts.assignment(&d), vec![vec![vec![true, false], vec![false, true]]]);
    }

    #[test]
    fn json_shape() {
        let d = dag(&[1], &[]);
        let (ts, _) = realize(&d, &bulk(1, vec![(vec![0], vec![vec![0]])])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&ts.to_json()).unwrap();
        assert_eq!(v["tasks"][0]["end"], serde_json::json!({"num": 1, "den": 1}));
        let back: TaskSchedule = serde_json::from_str(&ts.to_json()).unwrap();
        assert_eq!(back, ts);
    }
}
