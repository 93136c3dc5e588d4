use nalgebra::DMatrix;
use netcollapse::asymptotics::{covariance_series, trace_bounds, trace_ratio_series, unrolled_sum, LimitProportions};
use netcollapse::dynamics::{EdgeOverride, SampleSchedule, SharingMode};
use netcollapse::graph::{Canonical, CollapseLabel, InteractionGraph, NodeId};
use netcollapse::simulator::ls_slope;
use proptest::prelude::*;

fn arb_graph(max_nodes: usize) -> impl Strategy<Value = InteractionGraph> {
    (1..=max_nodes)
        .prop_flat_map(|k| (Just(k), prop::collection::vec(any::<bool>(), k), prop::collection::vec(0.0f64..1.0, k * k)))
        .prop_map(|(k, flags, coins)| {
            let nature: Vec<NodeId> = (0..k).filter(|&i| flags[i] && i % 2 == 0).map(NodeId).collect();
            let mut edges = Vec::new();
            for s in 0..k {
                for t in 0..k {
                    if coins[s * k + t] < 0.35 && !nature.contains(&NodeId(t)) {
                        edges.push((NodeId(s), NodeId(t)));
                    }
                }
            }
            InteractionGraph::new(k, edges, nature).unwrap()
        })
}

/// Random graph, per-round edge counts, sharing mode and a random SPD `V*`.
fn arb_setup() -> impl Strategy<Value = (InteractionGraph, SampleSchedule, DMatrix<f64>, usize)> {
    (
        arb_graph(6),
        prop::collection::vec(1usize..50, 36 * 4),
        any::<bool>(),
        prop::collection::vec(-1.0f64..1.0, 4),
        1usize..5,
        1usize..30,
    )
        .prop_map(|(g, counts, broadcast, a, rounds, n0)| {
            let mut sched = SampleSchedule::constant(n0);
            for t in 1..=rounds {
                for (e, &(src, dst)) in g.edges().iter().enumerate() {
                    sched.edge_overrides.push(EdgeOverride { src, dst, n: counts[(t - 1) * 36 + e], rounds: Some((t, t)) });
                }
            }
            if broadcast {
                sched = sched.with_sharing(SharingMode::BroadcastPerSource);
            }
            let a = DMatrix::from_row_slice(2, 2, &a);
            let v = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
            (g, sched, v, rounds)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn recursion_equals_unrolled_sum((g, sched, v, rounds) in arb_setup()) {
        let props = LimitProportions::from_schedule(&g, &sched, rounds).unwrap();
        let series = covariance_series(&g, &props, &v, rounds).unwrap();
        let unrolled = unrolled_sum(&g, &props, &v, rounds).unwrap();
        let last = &series[rounds].sigma;
        let rel = (last - &unrolled).norm() / unrolled.norm().max(1e-300);
        prop_assert!(rel <= 1e-10, "relative difference {}", rel);
    }

    #[test]
    fn covariances_stay_symmetric_psd((g, sched, v, rounds) in arb_setup()) {
        let props = LimitProportions::from_schedule(&g, &sched, rounds).unwrap();
        for s in covariance_series(&g, &props, &v, rounds).unwrap() {
            prop_assert!(s.is_symmetric());
            prop_assert!(s.is_psd(), "min eigenvalue {}", s.min_eigenvalue());
        }
    }

    #[test]
    fn bounds_sandwich_the_trace((g, sched, v, rounds) in arb_setup()) {
        let props = LimitProportions::from_schedule(&g, &sched.clone().with_sharing(SharingMode::IndependentPerEdge), rounds).unwrap();
        let series = covariance_series(&g, &props, &v, rounds).unwrap();
        for mu in g.learners() {
            let (lo, hi) = trace_bounds(&g, &props, &v, rounds, mu).unwrap();
            let tr = series[rounds].block_trace(mu);
            let slack = 1e-12 * hi.abs().max(1.0);
            prop_assert!(lo <= tr + slack, "{}: lower {} > {}", mu, lo, tr);
            prop_assert!(tr <= hi + slack, "{}: {} > upper {}", mu, tr, hi);
        }
    }
}

/// Over `[T/2, T]` at T = 200, a positive slope in the limiting trace ratio
/// appears exactly on the nodes predicted to collapse.
#[test]
fn structural_prediction_agrees_with_limit_series() {
    let horizon = 200;
    let v = DMatrix::identity(3, 3);
    let graphs =
        Canonical::NAMES.iter().map(|name| (name.to_string(), netcollapse::graph::build_canonical(name, &[]).or_else(|_| netcollapse::graph::build_canonical(name, &[6])).unwrap()));
    for (name, g) in graphs {
        let sched = SampleSchedule::constant(100);
        let props = LimitProportions::from_schedule(&g, &sched, horizon).unwrap();
        let series = trace_ratio_series(&g, &props, &v, horizon).unwrap();
        let pred = g.predict_collapse();
        for mu in g.learners() {
            let pts: Vec<(f64, f64)> =
                series.curve(mu).into_iter().filter(|&(t, _)| t >= horizon / 2).map(|(t, r)| (t as f64, r)).collect();
            let slope = ls_slope(&pts);
            let collapses = pred[&mu] == CollapseLabel::Collapses;
            assert_eq!(slope > 0.01, collapses, "{name} {mu}: slope {slope}");
        }
    }
}
