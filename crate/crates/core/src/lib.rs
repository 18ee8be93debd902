//! Scheduling of operator DAGs on a multi-core machine.
//!
//! A plan is split into chains and segments ([`chain`]), assigned to cores batch
//! by batch ([`greedy`]) and timed at unit-task granularity ([`simulate`]).
//! [`oracle`] gives exact optima for tiny instances, [`transform`] rewrites plans
//! for data parallelism and buffering, and [`cost`] fits per-operator cost models.

pub mod chain;
pub mod cost;
pub mod dag;
pub mod generate;
pub mod greedy;
pub mod oracle;
pub mod rational;
pub mod simulate;
pub mod transform;

pub use chain::{partition, Segmentation};
pub use dag::{load_dag, Operator, ParaCapability, PipeCapability, PlanDag};
pub use greedy::{bulk_assignment, schedule, BulkSchedule};
pub use rational::Rational;
pub use simulate::{makespan, realize, TaskSchedule};
