use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use opsched::cost::{self, OperatorCostModel, PlannedOp};
use opsched::dag::OpId;
use opsched::generate::{random_dag, GenConfig};
use opsched::greedy::{schedule, BulkSchedule};
use opsched::oracle::{audit_greedy_with_budget, DEFAULT_BUDGET};
use opsched::rational::{to_f64, Rational, RationalJson};
use opsched::simulate::realize;
use opsched::transform::{self, BufferTag, ParallelTag};
use opsched::PlanDag;

#[derive(Parser)]
#[command(name = "opsched", version, about = "Schedule operator DAGs on a multi-core machine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition, schedule and time a plan
    Schedule {
        dag: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        cores: u32,
        #[command(flatten)]
        out: Out,
    },
    /// Time an existing bulk schedule
    Simulate {
        dag: PathBuf,
        /// Bulk schedule JSON, or the output of `schedule`
        #[arg(long)]
        schedule: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Compare the greedy makespan with the exact optimum (at most 10 tasks)
    Oracle {
        dag: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        cores: u32,
        /// Search node budget
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
        #[command(flatten)]
        out: Out,
    },
    /// Generate a random plan
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        ops: u64,
        /// Probability of each forward edge
        #[arg(long, default_value_t = 0.25, value_parser = probability)]
        p_edge: f64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
        max_units: u32,
        #[command(flatten)]
        out: Out,
    },
    /// Plan rewrites and analyses
    #[command(subcommand)]
    Transform(TransformCmd),
    /// Cost model fitting and prediction
    #[command(subcommand)]
    Cost(CostCmd),
}

#[derive(Subcommand)]
enum TransformCmd {
    /// Insert Partition and Merge nodes
    Dp {
        dag: PathBuf,
        /// JSON map of operator id to PR, ST or EX; defaults to PR for DP operators
        #[arg(long)]
        tags: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Cut the plan into buffering chains
    Buffer {
        dag: PathBuf,
        /// JSON map of operator id to {"cap", "cap_on"}; defaults from pipe classes
        #[arg(long)]
        tags: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Pipeline split against plain data parallelism for a two-stage chain
    Analysis {
        /// Per-batch time of the first stage, e.g. `3` or `3/2`
        #[arg(long)]
        t1: Rational,
        #[arg(long)]
        t2: Rational,
        #[arg(long)]
        cores: usize,
        #[arg(long)]
        batches: u64,
        /// Per-core aggregation cost
        #[arg(long, default_value = "0")]
        agg: Rational,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Subcommand)]
enum CostCmd {
    /// Fit models from a calibration CSV (`operator,f1,...,fn,time_s`)
    Fit {
        csv: PathBuf,
        /// Only fit this operator
        #[arg(long)]
        operator: Option<String>,
        #[command(flatten)]
        out: Out,
    },
    /// Predict one operator's cost
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Operator to use when the model file holds several
        #[arg(long)]
        operator: Option<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        features: Vec<f64>,
    },
    /// Pick the cheapest candidate sub-plan
    Select {
        #[arg(long)]
        models: PathBuf,
        /// JSON list of sub-plans, each a list of {"operator", "features"}
        #[arg(long)]
        candidates: PathBuf,
    },
}

#[derive(Args)]
struct Out {
    /// Write JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err("must lie in [0, 1]".into())
    }
}

enum Failure {
    Domain(String),
    Io(String),
}

type Res<T> = Result<T, Failure>;

fn domain(e: impl std::fmt::Display) -> Failure {
    Failure::Domain(e.to_string())
}

fn read(path: &Path) -> Res<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))
}

fn load_dag(path: &Path) -> Res<PlanDag> {
    PlanDag::from_json(&read(path)?).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(out: &Out, value: &T) -> Res<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON output cannot fail");
    text.push('\n');
    match &out.out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Io(format!("stdout: {e}"))),
    }
}

fn rational(r: Rational) -> RationalJson {
    RationalJson(r)
}

fn load_models(path: &Path) -> Res<Vec<OperatorCostModel>> {
    let value: Value = read_json(path)?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|m| vec![m])
    };
    parsed.map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Schedule { dag, cores, out } => {
            let dag = load_dag(&dag)?;
            let (seg, bulk) = schedule(&dag, cores as usize).map_err(domain)?;
            let (tasks, makespan) = realize(&dag, &bulk).map_err(domain)?;
            emit(
                &out,
                &json!({
                    "segmentation": seg,
                    "schedule": bulk,
                    "tasks": tasks,
                    "makespan": rational(makespan),
                }),
            )
        }
        Command::Simulate { dag, schedule, out } => {
            let dag = load_dag(&dag)?;
            let mut value: Value = read_json(&schedule)?;
            if let Some(inner) = value.get_mut("schedule") {
                value = inner.take();
            }
            let bulk: BulkSchedule = serde_json::from_value(value).map_err(domain)?;
            let (tasks, makespan) = realize(&dag, &bulk).map_err(domain)?;
            emit(&out, &json!({ "tasks": tasks, "makespan": rational(makespan) }))
        }
        Command::Oracle { dag, cores, budget, out } => {
            let dag = load_dag(&dag)?;
            let audit = audit_greedy_with_budget(&dag, cores as usize, budget).map_err(domain)?;
            emit(
                &out,
                &json!({
                    "greedy": audit.greedy,
                    "optimal": audit.optimal,
                    "ratio": audit.ratio,
                    "ratio_f64": to_f64(&audit.ratio()),
                }),
            )
        }
        Command::Gen {
            seed,
            ops,
            p_edge,
            max_units,
            out,
        } => {
            let cfg = GenConfig {
                n_ops: ops as usize,
                p_edge,
                max_units,
            };
            emit(&out, &random_dag(seed, &cfg))
        }
        Command::Transform(cmd) => run_transform(cmd),
        Command::Cost(cmd) => run_cost(cmd),
    }
}

fn run_transform(cmd: TransformCmd) -> Res<()> {
    match cmd {
        TransformCmd::Dp { dag, tags, out } => {
            let dag = load_dag(&dag)?;
            let tags: BTreeMap<OpId, ParallelTag> = match tags {
                Some(path) => read_json(&path)?,
                None => transform::default_parallel_tags(&dag),
            };
            let t = transform::insert_partition_merge(&dag, &tags).map_err(domain)?;
            emit(&out, &t.dag)
        }
        TransformCmd::Buffer { dag, tags, out } => {
            let dag = load_dag(&dag)?;
            let tags: BTreeMap<OpId, BufferTag> = match tags {
                Some(path) => read_json(&path)?,
                None => transform::default_buffer_tags(&dag),
            };
            emit(&out, &transform::buffering_cuts(&dag, &tags).map_err(domain)?)
        }
        TransformCmd::Analysis {
            t1,
            t2,
            cores,
            batches,
            agg,
            out,
        } => {
            let a = transform::pipeline_vs_dp(t1, t2, cores, batches, agg).map_err(domain)?;
            emit(
                &out,
                &json!({ "n1": a.n1, "t_dp": rational(a.t_dp), "t_pipe": rational(a.t_pipe) }),
            )
        }
    }
}

fn run_cost(cmd: CostCmd) -> Res<()> {
    match cmd {
        CostCmd::Fit { csv, operator, out } => {
            let mut samples = cost::read_calibration_csv(read(&csv)?.as_slice()).map_err(domain)?;
            if let Some(name) = &operator {
                samples.retain(|s| &s.operator == name);
                if samples.is_empty() {
                    return Err(Failure::Domain(format!("no samples for operator {name:?}")));
                }
            }
            let models = cost::fit_all(&samples).map_err(domain)?;
            for m in models.values().filter(|m| m.regularized) {
                eprintln!("warning: {}: ill-conditioned design, ridge fallback used", m.operator);
            }
            let models: Vec<_> = models.into_values().collect();
            match models.as_slice() {
                [single] => emit(&out, single),
                _ => emit(&out, &models),
            }
        }
        CostCmd::Predict {
            model,
            operator,
            features,
        } => {
            let models = load_models(&model)?;
            let m = match (&operator, models.as_slice()) {
                (None, [single]) => single,
                (None, _) => return Err(Failure::Domain("model file holds several models; pass --operator".into())),
                (Some(name), all) => all
                    .iter()
                    .find(|m| &m.operator == name)
                    .ok_or_else(|| Failure::Domain(format!("no model for operator {name:?}")))?,
            };
            let prediction = m.predict(&features).map_err(domain)?;
            if prediction < 0.0 {
                eprintln!("warning: negative predicted cost");
            }
            emit(
                &Out { out: None },
                &json!({ "operator": m.operator, "prediction": prediction, "negative": prediction < 0.0 }),
            )
        }
        CostCmd::Select { models, candidates } => {
            let models: BTreeMap<String, OperatorCostModel> =
                load_models(&models)?.into_iter().map(|m| (m.operator.clone(), m)).collect();
            let candidates: Vec<Vec<PlannedOp>> = read_json(&candidates)?;
            let index = cost::select_plan(&models, &candidates).map_err(domain)?;
            let costs = candidates
                .iter()
                .map(|c| cost::subplan_cost(&models, c))
                .collect::<Result<Vec<_>, _>>()
                .map_err(domain)?;
            emit(&Out { out: None }, &json!({ "index": index, "costs": costs }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
