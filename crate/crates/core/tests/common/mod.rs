#![allow(dead_code)]

use partquad::graph::{Arg, ComputeGraph, GraphBuilder, OpKind};
use proptest::prelude::*;

/// (kind selector, first arg selector, second arg selector, unit cost)
pub type OpSpec = (u8, u16, u16, u64);

#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub dim: usize,
    pub ops: Vec<OpSpec>,
}

pub fn random_graph(max_dim: usize, max_ops: usize) -> impl Strategy<Value = RandomGraph> {
    (
        1..=max_dim,
        prop::collection::vec((0u8..9, any::<u16>(), any::<u16>(), 1u64..=5), 1..=max_ops),
    )
        .prop_map(|(dim, ops)| RandomGraph { dim, ops })
}

fn kind(sel: u8) -> (OpKind, usize) {
    match sel {
        0 => (OpKind::Add, 2),
        1 => (OpKind::Sub, 2),
        2 => (OpKind::Mul, 2),
        3 => (OpKind::Sin, 1),
        4 => (OpKind::Cos, 1),
        5 => (OpKind::Neg, 1),
        6 => (OpKind::Scale(0.5), 1),
        7 => (OpKind::Offset(1.0), 1),
        _ => (OpKind::Const(1.5), 0),
    }
}

/// Arguments of op `i` as indices into `inputs ++ ops`.
pub fn op_args(g: &RandomGraph, i: usize) -> Vec<usize> {
    let (k, a, b, _) = g.ops[i];
    let avail = g.dim + i;
    let (_, arity) = kind(k);
    [a, b][..arity]
        .iter()
        .map(|&s| s as usize % avail)
        .collect()
}

fn build_in_order(g: &RandomGraph, order: &[usize], cost_scale: u64) -> ComputeGraph {
    let names: Vec<String> = (0..g.dim).map(|j| format!("u{j}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut b = GraphBuilder::new(&refs);
    let mut handle: Vec<Option<Arg>> = vec![None; g.ops.len()];
    for &i in order {
        let args: Vec<Arg> = op_args(g, i)
            .into_iter()
            .map(|a| {
                if a < g.dim {
                    b.input(a)
                } else {
                    handle[a - g.dim].expect("topological")
                }
            })
            .collect();
        let (kind, _) = kind(g.ops[i].0);
        handle[i] = Some(b.op_with_cost(&format!("n{i}"), kind, &args, g.ops[i].3 * cost_scale));
    }
    // fold every unused op into the output so nothing is dead
    let mut used = vec![false; g.dim + g.ops.len()];
    for i in 0..g.ops.len() {
        for a in op_args(g, i) {
            used[a] = true;
        }
    }
    let sinks: Vec<Arg> = (0..g.ops.len())
        .filter(|&i| !used[g.dim + i])
        .map(|i| handle[i].expect("built"))
        .chain((0..g.dim).filter(|&j| !used[j]).map(|j| b.input(j)))
        .collect();
    let mut out = sinks[0];
    for (j, &s) in sinks.iter().enumerate().skip(1) {
        out = b.op_with_cost(&format!("sink{j}"), OpKind::Add, &[out, s], cost_scale);
    }
    b.finish(out).expect("valid graph")
}

pub fn build(g: &RandomGraph) -> ComputeGraph {
    build_in_order(g, &(0..g.ops.len()).collect::<Vec<_>>(), 1)
}

pub fn build_scaled(g: &RandomGraph, cost_scale: u64) -> ComputeGraph {
    build_in_order(g, &(0..g.ops.len()).collect::<Vec<_>>(), cost_scale)
}

/// Same graph with ops emitted in another topological order picked by `priority`.
pub fn build_reordered(g: &RandomGraph, priority: &[u32]) -> ComputeGraph {
    let n = g.ops.len();
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n)
            .filter(|&i| !done[i])
            .filter(|&i| op_args(g, i).iter().all(|&a| a < g.dim || done[a - g.dim]))
            .max_by_key(|&i| (priority.get(i).copied().unwrap_or(0), i))
            .expect("a ready op exists");
        done[next] = true;
        order.push(next);
    }
    build_in_order(g, &order, 1)
}
