//! Exact task-level scheduler for tiny instances, and the greedy audit built on it.
//!
//! The search inserts one task at a time at its earliest start on a chosen core.
//! Tasks are inserted in non-decreasing start order (ties by task id), which
//! still reaches every semi-active schedule, and cores with equal free times are
//! treated as one choice. Nodes are pruned against the incumbent with a bound
//! built from remaining critical paths and remaining work per core.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::dag::{expand_tasks, PlanDag, TaskId};
use crate::greedy::{schedule, ScheduleError};
use crate::rational::{int, Rational, RationalJson};
use crate::simulate::{makespan, realize, validate_tasks, ScheduledTask, SimulateError, TaskSchedule};

/// Largest instance the oracle accepts, in unit tasks.
pub const MAX_TASKS: usize = 10;

/// Node budget used by [`audit_greedy`].
pub const DEFAULT_BUDGET: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance has {tasks} tasks; the oracle handles at most {limit}")]
    TooManyTasks { tasks: usize, limit: usize },
    #[error("core count must be at least 1")]
    NoCores,
    #[error("node budget must be positive")]
    ZeroBudget,
    #[error("node budget of {budget} exhausted; best so far is not proven optimal")]
    BudgetExceeded {
        budget: u64,
        incumbent: Option<Box<(Rational, TaskSchedule)>>,
    },
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub makespan: Rational,
    pub schedule: TaskSchedule,
    /// Search nodes expanded.
    pub expansions: u64,
}

struct Search {
    tasks: Vec<TaskId>,
    dur: Vec<Rational>,
    preds: Vec<Vec<usize>>,
    /// Longest path from a task to any sink, including the task itself.
    tail: Vec<Rational>,
    cores: usize,
    budget: u64,
    expansions: u64,
    exhausted: bool,

    start: Vec<Rational>,
    end: Vec<Rational>,
    core_of: Vec<usize>,
    done: Vec<bool>,
    core_free: Vec<Rational>,
    remaining_work: Rational,

    best: Option<(Rational, Vec<Rational>, Vec<usize>)>,
}

impl Search {
    fn lower_bound(&self, last_start: Rational) -> Rational {
        let mut lb = self.end.iter().zip(&self.done).filter(|(_, &d)| d).map(|(e, _)| *e).fold(int(0), Rational::max);
        let min_free = self.core_free.iter().copied().min().unwrap().max(last_start);
        for t in (0..self.tasks.len()).filter(|&t| !self.done[t]) {
            let ready = self.preds[t]
                .iter()
                .filter(|&&p| self.done[p])
                .map(|&p| self.end[p])
                .fold(min_free, Rational::max);
            lb = lb.max(ready + self.tail[t]);
        }
        let occupied: Rational = self.core_free.iter().map(|f| (*f).max(last_start)).sum();
        lb.max((occupied + self.remaining_work) / int(self.cores as i64))
    }

    fn dfs(&mut self, depth: usize, last: Option<(usize, Rational)>) {
        if self.exhausted {
            return;
        }
        if depth == self.tasks.len() {
            let span = self.end.iter().copied().fold(int(0), Rational::max);
            if self.best.as_ref().is_none_or(|b| span < b.0) {
                self.best = Some((span, self.start.clone(), self.core_of.clone()));
            }
            return;
        }
        self.expansions += 1;
        if self.expansions > self.budget {
            self.exhausted = true;
            return;
        }
        let last_start = last.map_or(int(0), |l| l.1);
        if let Some(best) = &self.best {
            if self.lower_bound(last_start) >= best.0 {
                return;
            }
        }

        for t in 0..self.tasks.len() {
            if self.done[t] || self.preds[t].iter().any(|&p| !self.done[p]) {
                continue;
            }
            let ready = self.preds[t].iter().map(|&p| self.end[p]).fold(int(0), Rational::max);
            let mut tried: Vec<Rational> = Vec::new();
            for core in 0..self.cores {
                let free = self.core_free[core];
                if tried.contains(&free) {
                    continue;
                }
                tried.push(free);
                let start = ready.max(free);
                if let Some((prev, prev_start)) = last {
                    if start < prev_start {
                        continue;
                    }
                    let both_timed = self.dur[prev] > int(0) && self.dur[t] > int(0);
                    if start == prev_start && both_timed && t < prev {
                        continue;
                    }
                }
                let end = start + self.dur[t];
                self.done[t] = true;
                self.start[t] = start;
                self.end[t] = end;
                self.core_of[t] = core;
                self.core_free[core] = end;
                self.remaining_work -= self.dur[t];

                self.dfs(depth + 1, Some((t, start)));

                self.remaining_work += self.dur[t];
                self.core_free[core] = free;
                self.done[t] = false;
                if self.exhausted {
                    return;
                }
            }
        }
    }

    fn to_schedule(&self, starts: &[Rational], cores: &[usize], p: usize) -> TaskSchedule {
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| ScheduledTask {
                op: t.op,
                unit: t.unit,
                core: cores[i],
                start: starts[i],
                end: starts[i] + self.dur[i],
            })
            .collect();
        TaskSchedule::new(p, tasks)
    }
}

/// Minimum makespan over all feasible task-level schedules on `p` cores.
pub fn optimal_makespan(dag: &PlanDag, p: usize, budget: u64) -> Result<OracleSolution, OracleError> {
    if p == 0 {
        return Err(OracleError::NoCores);
    }
    if budget == 0 {
        return Err(OracleError::ZeroBudget);
    }
    let taskset = expand_tasks(dag);
    let tasks = taskset.tasks();
    if tasks.len() > MAX_TASKS {
        return Err(OracleError::TooManyTasks {
            tasks: tasks.len(),
            limit: MAX_TASKS,
        });
    }
    let index: BTreeMap<TaskId, usize> = tasks.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let dur: Vec<Rational> = tasks.iter().map(|&t| taskset.duration(t)).collect();
    let preds: Vec<Vec<usize>> = tasks
        .iter()
        .map(|&t| taskset.predecessors(t).iter().map(|p| index[p]).collect())
        .collect();
    let mut succs = vec![Vec::new(); tasks.len()];
    for (t, ps) in preds.iter().enumerate() {
        for &p in ps {
            succs[p].push(t);
        }
    }
    // Task ids are a topological order of the dependencies.
    let mut tail = dur.clone();
    for t in (0..tasks.len()).rev() {
        let longest = succs[t].iter().map(|&s| tail[s]).fold(int(0), Rational::max);
        tail[t] = dur[t] + longest;
    }

    let n = tasks.len();
    let cores = p.min(n.max(1));
    let mut search = Search {
        tasks,
        remaining_work: dur.iter().sum(),
        dur,
        preds,
        tail,
        cores,
        budget,
        expansions: 0,
        exhausted: false,
        start: vec![int(0); n],
        end: vec![int(0); n],
        core_of: vec![0; n],
        done: vec![false; n],
        core_free: vec![int(0); cores],
        best: None,
    };
    search.dfs(0, None);

    let best = search.best.clone();
    if search.exhausted {
        return Err(OracleError::BudgetExceeded {
            budget,
            incumbent: best.map(|(span, st, c)| Box::new((span, search.to_schedule(&st, &c, p)))),
        });
    }
    let (span, starts, core_of) = best.expect("search without budget exhaustion always finds a schedule");
    Ok(OracleSolution {
        makespan: span,
        schedule: search.to_schedule(&starts, &core_of, p),
        expansions: search.expansions,
    })
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("{which} schedule violates task constraints: {details}")]
    Infeasible { which: &'static str, details: String },
}

/// Greedy makespan against the proven optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Audit {
    pub greedy: RationalJson,
    pub optimal: RationalJson,
    /// `greedy / optimal`, or 1 when both are zero.
    pub ratio: RationalJson,
}

impl Audit {
    pub fn ratio(&self) -> Rational {
        self.ratio.0
    }
}

/// Schedules `dag` greedily and with the oracle, checking both task schedules.
pub fn audit_greedy(dag: &PlanDag, p: usize) -> Result<Audit, AuditError> {
    audit_greedy_with_budget(dag, p, DEFAULT_BUDGET)
}

pub fn audit_greedy_with_budget(dag: &PlanDag, p: usize, budget: u64) -> Result<Audit, AuditError> {
    let exact = optimal_makespan(dag, p, budget)?;
    let (_, bulk) = schedule(dag, p)?;
    let (greedy_ts, greedy) = realize(dag, &bulk)?;
    for (which, ts) in [("greedy", &greedy_ts), ("optimal", &exact.schedule)] {
        let report = validate_tasks(dag, ts);
        if !report.is_empty() {
            let details = report.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Err(AuditError::Infeasible { which, details });
        }
    }
    debug_assert_eq!(makespan(&exact.schedule), exact.makespan);
    let ratio = if exact.makespan == int(0) {
        int(1)
    } else {
        greedy / exact.makespan
    };
    Ok(Audit {
        greedy: greedy.into(),
        optimal: exact.makespan.into(),
        ratio: ratio.into(),
    })
}
