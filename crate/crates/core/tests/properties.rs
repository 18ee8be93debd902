use std::collections::{BTreeMap, BTreeSet};

use opsched::chain::{partition, pipe_pattern, SegmentKind};
use opsched::cost::{expand_features, fit, select_plan, subplan_cost, weight_count, CalibrationSample, OperatorCostModel, PlannedOp};
use opsched::dag::{expand_tasks, OpId, Operator, ParaCapability, PipeCapability, PlanDag};
use opsched::generate::{random_dag, GenConfig};
use opsched::greedy::{
    early_stop, saved_time_dominant, schedule, validate_bulk, BulkSchedule, DominantState, SingleBatchAssignment,
};
use opsched::oracle::optimal_makespan;
use opsched::rational::{int, rat, Rational};
use opsched::simulate::{realize, validate_tasks};
use opsched::transform::{
    buffering_cuts, data_parallel_time, default_buffer_tags, insert_partition_merge, pipeline_time, pipeline_vs_dp,
    BufferCapability, BufferTag, ParallelTag,
};
use proptest::prelude::*;

fn dag_strategy(max_ops: usize) -> impl Strategy<Value = PlanDag> {
    (any::<u64>(), 1..=max_ops, 0.0..0.7f64, 1u32..=4).prop_map(|(seed, n_ops, p_edge, max_units)| {
        random_dag(seed, &GenConfig { n_ops, p_edge, max_units })
    })
}

fn positive_rational() -> impl Strategy<Value = Rational> {
    (1i64..=64, 1i64..=8).prop_map(|(n, d)| rat(n, d))
}

/// Longest chain of dependent unit tasks.
fn critical_path(dag: &PlanDag) -> Rational {
    let ts = expand_tasks(dag);
    let mut finish: BTreeMap<_, Rational> = BTreeMap::new();
    for t in ts.tasks() {
        let ready = ts.predecessors(t).iter().map(|p| finish[p]).max().unwrap_or(int(0));
        finish.insert(t, ready + ts.duration(t));
    }
    finish.values().copied().max().unwrap_or(int(0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dag_json_round_trip(dag in dag_strategy(16)) {
        let back = PlanDag::from_json(dag.to_json().as_bytes()).unwrap();
        prop_assert_eq!(&back, &dag);
    }

    #[test]
    fn task_expansion_is_stable_and_conserves_units(dag in dag_strategy(16)) {
        let a = expand_tasks(&dag);
        let b = expand_tasks(&dag);
        prop_assert_eq!(a.tasks(), b.tasks());
        prop_assert_eq!(a.dependencies().collect::<Vec<_>>(), b.dependencies().collect::<Vec<_>>());
        let units: u32 = dag.operators().map(|o| o.units).sum();
        prop_assert_eq!(a.task_count(), units as usize);
        for (from, to) in a.dependencies() {
            prop_assert!(a.exists(from) && a.exists(to));
        }
    }

    #[test]
    fn chains_cover_segments_concatenate(dag in dag_strategy(16)) {
        let seg = partition(&dag);
        let covered: BTreeSet<OpId> = seg.chains.iter().flat_map(|c| c.ops.iter().copied()).collect();
        prop_assert_eq!(covered, dag.ids().collect::<BTreeSet<_>>());
        for (chain, segs) in seg.chains.iter().zip(&seg.segments) {
            let joined: Vec<OpId> = segs.iter().flat_map(|s| s.ops.iter().copied()).collect();
            prop_assert_eq!(&joined, &chain.ops);
            for s in segs {
                if s.kind == SegmentKind::Scheduleable {
                    let pat: Vec<char> = pipe_pattern(s, &dag).chars().collect();
                    prop_assert!(pat.len() >= 2);
                    prop_assert!(matches!(pat[0], 'P' | 'O'));
                    prop_assert!(matches!(pat[pat.len() - 1], 'P' | 'I'));
                    prop_assert!(pat[1..pat.len() - 1].iter().all(|&c| c == 'P'));
                } else {
                    prop_assert_eq!(s.ops.len(), 1);
                }
            }
        }
        // Only detached suffixes are shared between chains.
        let mut seen: BTreeMap<OpId, usize> = BTreeMap::new();
        for chain in &seg.chains {
            let cut = chain.ops.iter().position(|&op| seg.dcm.contains(op)).unwrap_or(chain.ops.len());
            for &op in &chain.ops[..cut] {
                *seen.entry(op).or_default() += 1;
            }
        }
        for (op, count) in seen {
            prop_assert_eq!(count, 1, "op {} outside detached suffixes appears {} times", op, count);
        }
    }

    #[test]
    fn dcm_keys_are_single_children_with_many_parents(dag in dag_strategy(16)) {
        let seg = partition(&dag);
        let expected: BTreeSet<OpId> = dag
            .ids()
            .filter(|&v| dag.parents(v).len() > 1 && dag.parents(v).iter().any(|&u| dag.children(u) == [v]))
            .collect();
        prop_assert_eq!(seg.dcm.heads().collect::<BTreeSet<_>>(), expected);
        for head in seg.dcm.heads() {
            let parents: BTreeSet<OpId> = dag.parents(head).iter().copied().collect();
            prop_assert_eq!(seg.dcm.parents(head).unwrap(), &parents);
        }
    }

    #[test]
    fn greedy_is_deterministic_valid_and_below_serial(dag in dag_strategy(16), p in 1usize..=8) {
        let (seg, bulk) = schedule(&dag, p).unwrap();
        let (seg2, bulk2) = schedule(&dag, p).unwrap();
        prop_assert_eq!(seg.to_json(), seg2.to_json());
        prop_assert_eq!(bulk.to_json(), bulk2.to_json());
        prop_assert!(validate_bulk(&dag, &bulk).is_empty());

        let mut count: BTreeMap<OpId, usize> = BTreeMap::new();
        for b in bulk.batches() {
            for &op in b.ops() {
                *count.entry(op).or_default() += 1;
            }
        }
        prop_assert_eq!(count.len(), dag.len());
        prop_assert!(count.values().all(|&c| c == 1));

        let (ts, span) = realize(&dag, &bulk).unwrap();
        prop_assert!(validate_tasks(&dag, &ts).is_empty());
        prop_assert!(span <= dag.serial_makespan());
        prop_assert!(span >= critical_path(&dag));
    }

    #[test]
    fn saved_time_dominant_is_non_negative(
        times in prop::collection::vec(positive_rational(), 1..8),
        cores in prop::collection::vec(1usize..=4, 8),
        units in 1u32..=16,
    ) {
        let state = DominantState::new(times.clone(), cores[..times.len()].to_vec());
        let dom = Operator::new(state.dom_index(), PipeCapability::P, ParaCapability::DP, times[state.dom_index()], units);
        prop_assert!(saved_time_dominant(&state, &dom).unwrap() >= int(0));
    }

    #[test]
    fn dominant_time_never_rises_when_only_dominant_grows(
        times in prop::collection::vec(positive_rational(), 1..6),
        grants in 1usize..10,
    ) {
        let mut cores = vec![1; times.len()];
        let mut last = DominantState::new(times.clone(), cores.clone()).dom_time();
        for _ in 0..grants {
            let s = DominantState::new(times.clone(), cores.clone());
            cores[s.dom_index()] += 1;
            let next = DominantState::new(times.clone(), cores.clone()).dom_time();
            prop_assert!(next <= last);
            prop_assert_eq!(next, s.dom_time_with_extra_core());
            last = next;
        }
    }

    #[test]
    fn early_stop_is_monotone_in_remaining_cores(
        t in positive_rational(),
        units in 1u32..=16,
        dom in (0i64..=64, 1i64..=8).prop_map(|(n, d)| rat(n, d)),
        p in 1usize..=16,
    ) {
        let op = Operator::new(0, PipeCapability::P, ParaCapability::DP, t, units);
        // Fewer remaining cores only make stopping more likely.
        for left in 1..=p {
            if early_stop(&op, dom, p, left) {
                for fewer in 1..left {
                    prop_assert!(early_stop(&op, dom, p, fewer));
                }
            } else {
                for more in left..=p {
                    prop_assert!(!early_stop(&op, dom, p, more));
                }
            }
        }
    }

    #[test]
    fn single_dp_batch_shrinks_with_more_cores(t in positive_rational(), units in 1u32..=12, p in 1usize..=8) {
        let dag = PlanDag::new(vec![Operator::new(0, PipeCapability::P, ParaCapability::DP, t, units)], vec![]).unwrap();
        let mut last = None;
        for n in 1..=p {
            let batch = SingleBatchAssignment::from_parts(p, vec![0], vec![(0..n).collect()]);
            let (_, span) = realize(&dag, &BulkSchedule::from_parts(p, vec![batch], vec![vec![]])).unwrap();
            if let Some(prev) = last {
                prop_assert!(span <= prev);
            }
            last = Some(span);
        }
    }

    #[test]
    fn transforms_preserve_reachability(dag in dag_strategy(12), picks in prop::collection::vec(0u8..3, 12)) {
        let tags: BTreeMap<OpId, ParallelTag> = dag
            .ids()
            .map(|id| (id, [ParallelTag::PR, ParallelTag::ST, ParallelTag::EX][picks[id] as usize]))
            .collect();
        // Multi-input PR ops need cap_on; the generator always sets one.
        let t = insert_partition_merge(&dag, &tags).unwrap();
        prop_assert_eq!(t.dag.len(), dag.len() + t.inserted.len());
        for a in dag.ids() {
            for b in dag.ids() {
                prop_assert_eq!(dag.reaches(a, b), t.dag.reaches(t.id_map[&a], t.id_map[&b]));
            }
        }
        for n in &t.inserted {
            prop_assert_eq!(t.dag.op(n.id).duration(), int(0));
            prop_assert_eq!(t.dag.parents(n.id), &[t.id_map[&n.source]]);
        }
        prop_assert_eq!(t.dag.serial_makespan(), dag.serial_makespan());
    }

    #[test]
    fn buffering_chains_are_disjoint_covering_paths(dag in dag_strategy(16), caps in prop::collection::vec(0u8..4, 16)) {
        let mut tags = default_buffer_tags(&dag);
        for (id, tag) in tags.iter_mut() {
            tag.cap = [BufferCapability::SI, BufferCapability::SO, BufferCapability::B, BufferCapability::SS][caps[*id] as usize];
        }
        for plan in [buffering_cuts(&dag, &default_buffer_tags(&dag)).unwrap(), buffering_cuts(&dag, &tags).unwrap()] {
            let all: Vec<OpId> = plan.chains.iter().flatten().copied().collect();
            let set: BTreeSet<OpId> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), set.len());
            prop_assert_eq!(set, dag.ids().collect::<BTreeSet<_>>());
            for chain in &plan.chains {
                for w in chain.windows(2) {
                    prop_assert!(dag.has_edge(w[0], w[1]));
                    prop_assert!(!plan.cuts.iter().any(|c| (c.from, c.to) == (w[0], w[1])));
                }
            }
            let kept = dag.edge_count() - plan.cuts.len();
            prop_assert_eq!(kept, dag.len() - plan.chains.len());
        }
    }

    #[test]
    fn data_parallel_never_loses_without_aggregation(
        t1 in positive_rational(),
        t2 in positive_rational(),
        n in 2usize..=32,
        m in 1u64..=100,
    ) {
        let dp = data_parallel_time(t1, t2, n, m, int(0)).unwrap();
        for n1 in 1..n {
            prop_assert!(dp <= pipeline_time(t1, t2, n, m, int(0), n1).unwrap());
        }
        let a = pipeline_vs_dp(t1, t2, n, m, int(0)).unwrap();
        prop_assert!(a.n1 >= 1 && a.n1 < n);
        prop_assert!(a.t_dp <= a.t_pipe);
    }

    #[test]
    fn fit_reproduces_noiseless_polynomials(
        n in 1usize..=3,
        weights in prop::collection::vec(-5.0..5.0f64, 10),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let k = weight_count(n);
        let planted = &weights[..k];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<CalibrationSample> = (0..40)
            .map(|_| {
                let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
                let time = expand_features(&f).iter().zip(planted).map(|(x, w)| x * w).sum();
                CalibrationSample { operator: "op".into(), features: f, time }
            })
            .collect();
        let model = fit(&samples).unwrap();
        for s in &samples {
            prop_assert!((model.predict(&s.features).unwrap() - s.time).abs() <= 1e-6);
        }
    }

    #[test]
    fn predict_is_linear_in_weights(
        a in prop::collection::vec(-10i32..10, 6),
        b in prop::collection::vec(-10i32..10, 6),
        f in prop::collection::vec(-4i32..4, 2),
        s in -3i32..3,
    ) {
        // Small integers keep every product exact in f64.
        let v = |w: &[i32]| w.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let f = v(&f);
        let ma = OperatorCostModel::new("x".into(), 2, v(&a)).unwrap();
        let mb = OperatorCostModel::new("x".into(), 2, v(&b)).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + s * y) as f64).collect();
        let mc = OperatorCostModel::new("x".into(), 2, combo).unwrap();
        let lhs = mc.predict(&f).unwrap();
        let rhs = ma.predict(&f).unwrap() + s as f64 * mb.predict(&f).unwrap();
        prop_assert_eq!(lhs, rhs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn oracle_is_feasible_bounded_and_below_greedy(dag in dag_strategy(5), p in 1usize..=3) {
        prop_assume!(dag.task_count() <= 8);
        let sol = optimal_makespan(&dag, p, 5_000_000).unwrap();
        prop_assert!(validate_tasks(&dag, &sol.schedule).is_empty());
        prop_assert_eq!(sol.schedule.makespan(), sol.makespan);
        let work: Rational = dag.operators().map(|o| o.duration()).sum();
        prop_assert!(sol.makespan >= critical_path(&dag));
        prop_assert!(sol.makespan >= work / int(p as i64));
        let (_, bulk) = schedule(&dag, p).unwrap();
        let (_, greedy) = realize(&dag, &bulk).unwrap();
        prop_assert!(greedy >= sol.makespan);
    }
}

fn constant_model(name: &str, w0: f64) -> OperatorCostModel {
    OperatorCostModel::new(name.into(), 0, vec![w0]).unwrap()
}

fn models(entries: &[(&str, f64)]) -> BTreeMap<String, OperatorCostModel> {
    entries.iter().map(|&(n, w)| (n.to_string(), constant_model(n, w))).collect()
}

fn plan(names: &[&str]) -> Vec<PlannedOp> {
    names.iter().map(|n| PlannedOp { operator: n.to_string(), features: vec![] }).collect()
}

#[test]
fn intercept_shift_moves_costs_by_op_count() {
    let base = models(&[("a", 3.0), ("b", 1.0)]);
    let shifted = models(&[("a", 3.0 + 2.5), ("b", 1.0 + 2.5)]);
    for c in [plan(&["a"]), plan(&["a", "b"]), plan(&["b", "b", "b"])] {
        let diff = subplan_cost(&shifted, &c).unwrap() - subplan_cost(&base, &c).unwrap();
        assert_eq!(diff, 2.5 * c.len() as f64);
    }
}

#[test]
fn intercept_shift_keeps_argmin_only_for_equal_op_counts() {
    let base = models(&[("a", 3.0), ("b", 1.0)]);
    let shifted = models(&[("a", 3.0 + 5.0), ("b", 1.0 + 5.0)]);

    // Equal counts: the argmin survives the shift.
    let equal = [plan(&["a", "a"]), plan(&["b", "a"]), plan(&["a", "b"])];
    assert_eq!(select_plan(&base, &equal).unwrap(), 1);
    assert_eq!(select_plan(&shifted, &equal).unwrap(), 1);

    // Unequal counts: three cheap ops beat one expensive op until the shift.
    let unequal = [plan(&["a"]), plan(&["b", "b"])];
    assert_eq!(select_plan(&base, &unequal).unwrap(), 1);
    assert_eq!(select_plan(&shifted, &unequal).unwrap(), 0);
}

#[test]
fn buffer_tags_default_from_pipes() {
    let ops = vec![
        Operator::new(0, PipeCapability::O, ParaCapability::S, int(1), 2),
        Operator::new(1, PipeCapability::P, ParaCapability::DP, int(1), 2),
        Operator::new(2, PipeCapability::I, ParaCapability::DP, int(1), 2),
        Operator::new(3, PipeCapability::B, ParaCapability::S, int(1), 1),
    ];
    let dag = PlanDag::new(ops, [(0, 1), (1, 2), (2, 3)]).unwrap();
    let tags = default_buffer_tags(&dag);
    let caps: Vec<BufferCapability> = tags.values().map(|t: &BufferTag| t.cap).collect();
    assert_eq!(caps, vec![BufferCapability::SO, BufferCapability::SS, BufferCapability::SI, BufferCapability::B]);
    let plan = buffering_cuts(&dag, &tags).unwrap();
    assert_eq!(plan.chains, vec![vec![0, 1, 2], vec![3]]);
}
