mod common;

use common::{build, build_reordered, random_graph};
use partquad::graph::{counted_cost, dependency_matrix, evaluate_naive, PointSet};
use proptest::prelude::*;

proptest! {
    #[test]
    fn dependency_matrix_is_stable(g in random_graph(4, 12), prio in prop::collection::vec(any::<u32>(), 12)) {
        let a = build(&g);
        let b = build_reordered(&g, &prio);
        let da = dependency_matrix(&a);
        prop_assert_eq!(&da, &dependency_matrix(&a));
        let db = dependency_matrix(&b);
        for (i, node) in a.nodes().iter().enumerate() {
            let j = b.node_index(&node.id).unwrap();
            prop_assert_eq!(da.row(i), db.row(j), "{}", node.id);
        }
    }

    #[test]
    fn naive_work_is_points_times_total_cost(
        g in random_graph(4, 10),
        n in 0usize..20,
        seed in any::<u64>(),
    ) {
        let graph = build(&g);
        let mut state = seed;
        let data: Vec<f64> = (0..n * g.dim)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
            })
            .collect();
        let ev = evaluate_naive(&graph, &PointSet::new(g.dim, data)).unwrap();
        prop_assert_eq!(ev.outputs.len(), n);
        prop_assert_eq!(counted_cost(&ev.counters, &graph), n as u64 * graph.total_unit_cost());
    }
}
