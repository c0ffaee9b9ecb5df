use nalgebra::DVector;
use proptest::prelude::*;

use partobs::community::{round_to_partition, RoundingOptions};
use partobs::dynamics::{equilibrium, iterate_equilibrium, IterationOptions};
use partobs::game::{contraction_factor, generate_instance, ConcavePayoff};
use partobs::metrics::{
    evaluate_partition, exhaustive_search, free_riding, FreeRidingVariant, SearchOptions,
};
use partobs::partition::{enumerate_partitions, split_enumeration};
use partobs::{h_matrix, GameInstance, GeneratorParams, MetricSpec, Partition, PayoffSpec};

fn instance_strategy(max_n: usize) -> impl Strategy<Value = GameInstance> {
    (
        1..=max_n,
        any::<u64>(),
        0.05f64..0.49,
        0.0f64..1.0,
        0.1f64..1.0,
    )
        .prop_map(|(n, seed, gamma, t, density)| {
            let threshold = gamma / (1.0 - gamma);
            let rho = threshold + (1.0 - threshold) * (0.01 + 0.99 * t);
            generate_instance(&GeneratorParams {
                n,
                seed,
                gamma,
                rho,
                density,
            })
            .unwrap()
        })
}

fn partition_strategy(n: usize) -> impl Strategy<Value = Partition> {
    proptest::collection::vec(0..n, n).prop_map(|labels| Partition::from_labels(&labels).unwrap())
}

fn instance_and_partition(max_n: usize) -> impl Strategy<Value = (GameInstance, Partition)> {
    instance_strategy(max_n).prop_flat_map(|inst| {
        let n = inst.n();
        (Just(inst), partition_strategy(n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generated_instances_are_contractions((inst, p) in instance_and_partition(10)) {
        prop_assert!(inst.gamma() < 0.49 + 1e-12);
        prop_assert!(inst.check_interiority().holds);
        let m = inst.interaction() * h_matrix(&p).matrix();
        let norm = (0..m.nrows()).map(|i| m.row(i).abs().sum()).fold(0.0, f64::max);
        prop_assert!(norm <= inst.gamma() + 1e-12);
        prop_assert!((contraction_factor(inst.w()).unwrap() - inst.gamma()).abs() <= 1e-15);
    }

    #[test]
    fn equilibrium_is_unique_across_starts(
        (inst, p) in instance_and_partition(8),
        starts in proptest::collection::vec(0.0f64..2000.0, 8 * 3),
    ) {
        let n = inst.n();
        let h = h_matrix(&p);
        let reference = equilibrium(&inst, &h).unwrap().x_star;
        for k in 0..3 {
            let x0 = DVector::from_fn(n, |i, _| starts[k * 8 + i]);
            let r = iterate_equilibrium(&inst, &h, &x0, &IterationOptions::default()).unwrap();
            prop_assert!((&r.x_star - &reference).amax() <= 2e-10);
        }
    }

    #[test]
    fn iteration_count_respects_the_contraction_bound((inst, p) in instance_and_partition(8)) {
        let h = h_matrix(&p);
        let tol = 1e-10;
        let r = iterate_equilibrium(
            &inst,
            &h,
            &DVector::zeros(inst.n()),
            &IterationOptions { tol, ..IterationOptions::default() },
        )
        .unwrap();
        let g = inst.gamma();
        let first = r.step_norms[0];
        if first > 0.0 && g > 0.0 {
            let bound = ((tol * (1.0 - g) / first).ln() / g.ln()).ceil().max(0.0) as usize + 1;
            prop_assert!(r.iterations <= bound, "{} > {bound}", r.iterations);
        }
    }

    #[test]
    fn full_transparency_meets_own_targets(inst in instance_strategy(10)) {
        let n = inst.n();
        let x = equilibrium(&inst, &h_matrix(&Partition::singletons(n))).unwrap().x_star;
        let wx = inst.w() * &x;
        prop_assert!((&wx - inst.b()).amax() <= 1e-9 * inst.b().amax());
    }

    #[test]
    fn free_riding_is_scale_invariant((inst, p) in instance_and_partition(8)) {
        let scaled = GameInstance::new(
            inst.w().clone(),
            inst.b() * 2.0,
            PayoffSpec::sqrt_uniform(inst.n(), 200.0),
        )
        .unwrap();
        let h = h_matrix(&p);
        let x = equilibrium(&inst, &h).unwrap().x_star;
        let x2 = equilibrium(&scaled, &h).unwrap().x_star;
        prop_assert!((&x2 - &x * 2.0).amax() <= 1e-9 * x.amax().max(1.0));
        let a = free_riding(&inst, &x, FreeRidingVariant::Partial, None).unwrap();
        let b = free_riding(&scaled, &x2, FreeRidingVariant::Partial, None).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-9);
    }

    #[test]
    fn evaluation_ignores_block_order((inst, p) in instance_and_partition(8), seed in any::<u64>()) {
        let mut blocks = p.blocks();
        let k = blocks.len();
        blocks.rotate_left((seed as usize) % k.max(1));
        for b in blocks.iter_mut() {
            b.reverse();
        }
        let q = Partition::from_blocks(inst.n(), &blocks).unwrap();
        prop_assert_eq!(&p, &q);
        for metric in [MetricSpec::Welfare, MetricSpec::TotalFreeRiding] {
            let a = evaluate_partition(&inst, &p, &metric).unwrap().value;
            let b = evaluate_partition(&inst, &q, &metric).unwrap().value;
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rounding_recovers_exact_observation_matrices(p in (1usize..=12).prop_flat_map(partition_strategy)) {
        let h = h_matrix(&p);
        let r = round_to_partition(h.matrix(), &RoundingOptions::default()).unwrap();
        prop_assert_eq!(&r.partition, &p);
        let l = p.min_block_size();
        let r = round_to_partition(
            h.matrix(),
            &RoundingOptions { min_block: l, ..RoundingOptions::default() },
        )
        .unwrap();
        prop_assert_eq!(r.partition, p);
    }

    #[test]
    fn partition_text_round_trips(p in (1usize..=12).prop_flat_map(partition_strategy)) {
        let q: Partition = p.to_string().parse().unwrap();
        prop_assert_eq!(&p, &q);
        let json = serde_json::to_string(&p.to_json_value()).unwrap();
        let back: partobs::partition::PartitionJson = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(Partition::try_from(back).unwrap(), p);
    }

    #[test]
    fn instance_json_round_trips(inst in instance_strategy(12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        inst.save(&path).unwrap();
        let back = GameInstance::load(&path).unwrap();
        prop_assert_eq!(back.w(), inst.w());
        prop_assert_eq!(back.b(), inst.b());
        prop_assert_eq!(back.c(), inst.c());
        prop_assert_eq!(back.to_json().unwrap(), inst.to_json().unwrap());
    }

    #[test]
    fn sqrt_payoff_is_concave(scale in 1.0f64..500.0, x in 1e-3f64..2000.0, h in 1e-3f64..10.0) {
        let s = PayoffSpec::sqrt_uniform(1, scale);
        let lo = (x - h).max(0.0);
        let mid = lo + h;
        let second = s.value(0, lo) - 2.0 * s.value(0, mid) + s.value(0, mid + h);
        prop_assert!(second < 0.0);
        let y = s.derivative(0, x);
        prop_assert!((s.derivative_inverse(0, y) - x).abs() <= 1e-9 * x.max(1.0));
    }
}

#[test]
fn enumeration_respects_minimum_block_size() {
    for n in 1..=9 {
        for l in 1..=n {
            let all: Vec<Vec<usize>> = enumerate_partitions(n, l)
                .unwrap()
                .map(|p| p.assignment().to_vec())
                .collect();
            let mut sorted = all.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(
                sorted, all,
                "lexicographic and duplicate free for n={n} L={l}"
            );
            let brute = enumerate_partitions(n, 1)
                .unwrap()
                .filter(|p| p.min_block_size() >= l)
                .count();
            assert_eq!(all.len(), brute, "n={n} L={l}");
            let split: usize = split_enumeration(n, l, 3)
                .unwrap()
                .into_iter()
                .map(|e| e.count())
                .sum();
            assert_eq!(split, brute);
        }
    }
}

#[test]
fn larger_minimum_block_never_improves_the_optimum() {
    let inst = partobs::ten_agent_instance();
    let metric = MetricSpec::TotalFreeRiding;
    let value = |l| {
        exhaustive_search(
            &inst,
            &metric,
            &SearchOptions {
                min_block_size: l,
                ..SearchOptions::default()
            },
        )
        .unwrap()
        .value
    };
    let v1 = value(1);
    let v3 = value(3);
    assert!(v3 >= v1, "{v3} < {v1}");
}

#[test]
fn parallel_search_equals_serial_search() {
    let inst = generate_instance(&GeneratorParams {
        n: 9,
        seed: 21,
        gamma: 0.4,
        rho: 0.9,
        density: 0.6,
    })
    .unwrap();
    for metric in [
        MetricSpec::Welfare,
        MetricSpec::TotalFreeRiding,
        MetricSpec::subset(vec![0, 4], 9).unwrap(),
    ] {
        let run = |jobs| {
            exhaustive_search(
                &inst,
                &metric,
                &SearchOptions {
                    jobs,
                    top_k: 8,
                    ..SearchOptions::default()
                },
            )
            .unwrap()
        };
        let a = run(1);
        let b = run(6);
        assert_eq!(a.best_partition, b.best_partition);
        assert_eq!(a.value, b.value);
        assert_eq!(a.partitions_evaluated, b.partitions_evaluated);
        let ranks = |r: &partobs::metrics::SearchReport| {
            r.top_k
                .iter()
                .map(|t| (t.partition.clone(), t.value))
                .collect::<Vec<_>>()
        };
        assert_eq!(ranks(&a), ranks(&b));
    }
}

#[test]
fn relaxation_trace_is_monotone() {
    use partobs::relax::{solve_relaxation, FeasibleSetSpec, SolverParams};
    for (seed, metric) in [
        (1u64, MetricSpec::Welfare),
        (2, MetricSpec::TotalFreeRiding),
    ] {
        let inst = generate_instance(&GeneratorParams {
            n: 7,
            seed,
            gamma: 0.45,
            rho: 0.9,
            density: 0.7,
        })
        .unwrap();
        for l in [1, 2] {
            let spec = FeasibleSetSpec::new(7, l).unwrap();
            let r = solve_relaxation(&inst, &metric, &spec, &SolverParams::default()).unwrap();
            assert!(r.converged);
            assert!(r.residuals.within(1e-7));
            for w in r.objective_trace.windows(2) {
                if metric.maximize() {
                    assert!(w[1] >= w[0], "{metric}: {} then {}", w[0], w[1]);
                } else {
                    assert!(w[1] <= w[0], "{metric}: {} then {}", w[0], w[1]);
                }
            }
        }
    }
}

#[test]
fn welfare_at_full_transparency_uses_marginal_costs() {
    let inst = partobs::ten_agent_instance();
    let x = equilibrium(&inst, &h_matrix(&Partition::singletons(10)))
        .unwrap()
        .x_star;
    let total = partobs::metrics::welfare(&inst, &x).unwrap();
    let wx = inst.w() * &x;
    let direct: f64 = (0..10)
        .map(|i| 200.0 * wx[i].sqrt() - 100.0 / inst.b()[i].sqrt() * x[i])
        .sum();
    assert!((total - direct).abs() <= 1e-9 * direct.abs());
}
