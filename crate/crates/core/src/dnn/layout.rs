//! Assignment of memory layouts to execution units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ImplChoice;
use crate::dfp::{ExecUnit, UnitKind};
use crate::error::{Error, Result};
use crate::model_ir::{infer_shapes, CopyAttrs, LayerNode, LayoutKind, ModelGraph, Op, TensorMeta};

/// Layout states per planning node and byte-weighted edges
/// `(producer, consumer, bytes)` between them. Node indices are topological.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanProblem {
    pub options: Vec<Vec<LayoutKind>>,
    pub edges: Vec<(usize, usize, u64)>,
}

impl PlanProblem {
    pub fn cost(&self, assign: &[LayoutKind]) -> u64 {
        self.edges
            .iter()
            .filter(|(a, b, _)| assign[*a] != assign[*b])
            .map(|e| e.2)
            .sum()
    }
}

/// Exact minimum over every assignment; exponential, for checking.
pub fn brute_force_cost(p: &PlanProblem) -> u64 {
    let n = p.options.len();
    let mut idx = vec![0usize; n];
    let mut best = u64::MAX;
    loop {
        let assign: Vec<LayoutKind> = (0..n).map(|i| p.options[i][idx[i]]).collect();
        best = best.min(p.cost(&assign));
        let mut i = 0;
        loop {
            if i == n {
                return if n == 0 { 0 } else { best };
            }
            idx[i] += 1;
            if idx[i] < p.options[i].len() {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// Minimum-cost assignment for a path: `edge_bytes[i]` joins node `i` and
/// `i + 1`. Earlier options win ties.
pub fn plan_chain(options: &[Vec<LayoutKind>], edge_bytes: &[u64]) -> (Vec<LayoutKind>, u64) {
    if options.is_empty() {
        return (Vec::new(), 0);
    }
    assert_eq!(edge_bytes.len() + 1, options.len(), "a path has one edge fewer than nodes");
    // best[i][k]: cheapest prefix ending with node i in options[i][k].
    let mut best: Vec<Vec<u64>> = vec![vec![0; options[0].len()]];
    let mut from: Vec<Vec<usize>> = vec![vec![0; options[0].len()]];
    for i in 1..options.len() {
        let mut row = Vec::with_capacity(options[i].len());
        let mut back = Vec::with_capacity(options[i].len());
        for &l in &options[i] {
            let (k, c) = options[i - 1]
                .iter()
                .enumerate()
                .map(|(k, &pl)| (k, best[i - 1][k] + if pl == l { 0 } else { edge_bytes[i - 1] }))
                .min_by_key(|&(_, c)| c)
                .expect("options are non-empty");
            row.push(c);
            back.push(k);
        }
        best.push(row);
        from.push(back);
    }
    let last = options.len() - 1;
    let (mut k, &cost) = best[last]
        .iter()
        .enumerate()
        .min_by_key(|&(_, c)| *c)
        .expect("options are non-empty");
    let mut assign = vec![options[last][k]; options.len()];
    for i in (0..=last).rev() {
        assign[i] = options[i][k];
        k = from[i][k];
    }
    (assign, cost)
}

/// Solves the problem: exactly when every node has at most one distinct
/// producer and one distinct consumer, greedily otherwise. Returns the
/// assignment, its cost and whether it is exact.
pub fn solve_plan(p: &PlanProblem) -> (Vec<LayoutKind>, u64, bool) {
    let n = p.options.len();
    let mut merged: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for &(a, b, w) in &p.edges {
        if a != b {
            *merged.entry((a, b)).or_default() += w;
        }
    }
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in merged.keys() {
        pred[b].push(a);
        succ[a].push(b);
    }
    let is_chain = pred.iter().all(|v| v.len() <= 1) && succ.iter().all(|v| v.len() <= 1);
    let assign = if is_chain {
        let mut assign = vec![LayoutKind::ChannelsFirst; n];
        for start in (0..n).filter(|&i| pred[i].is_empty()) {
            let mut path = vec![start];
            while let Some(&next) = succ[*path.last().unwrap()].first() {
                path.push(next);
            }
            let opts: Vec<Vec<LayoutKind>> = path.iter().map(|&i| p.options[i].clone()).collect();
            let bytes: Vec<u64> = path.windows(2).map(|w| merged[&(w[0], w[1])]).collect();
            let (a, _) = plan_chain(&opts, &bytes);
            for (&i, l) in path.iter().zip(a) {
                assign[i] = l;
            }
        }
        assign
    } else {
        greedy(p, &merged, &pred)
    };
    let cost = p.cost(&assign);
    (assign, cost, is_chain)
}

/// Byte-weighted vote of decided producers and single-option consumers;
/// ties go to a producer's layout, then to the first option.
fn greedy(p: &PlanProblem, merged: &BTreeMap<(usize, usize), u64>, pred: &[Vec<usize>]) -> Vec<LayoutKind> {
    let n = p.options.len();
    let mut assign: Vec<LayoutKind> = Vec::with_capacity(n);
    for v in 0..n {
        let opts = &p.options[v];
        if opts.len() == 1 {
            assign.push(opts[0]);
            continue;
        }
        let producer_layouts: Vec<LayoutKind> = pred[v].iter().map(|&u| assign[u]).collect();
        let score = |l: LayoutKind| -> u64 {
            let mut s = 0;
            for &u in &pred[v] {
                if assign[u] == l {
                    s += merged[&(u, v)];
                }
            }
            for (&(a, b), &w) in merged.range((v, 0)..(v + 1, 0)) {
                debug_assert_eq!(a, v);
                if p.options[b] == [l] {
                    s += w;
                }
            }
            s
        };
        let top = opts.iter().map(|&l| score(l)).max().expect("options are non-empty");
        let tied: Vec<LayoutKind> = opts.iter().copied().filter(|&l| score(l) == top).collect();
        let pick = tied
            .iter()
            .copied()
            .find(|l| producer_layouts.contains(l))
            .unwrap_or(tied[0]);
        assign.push(pick);
    }
    assign
}

/// A layout change inserted on one edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reorder {
    pub tensor: String,
    /// Index of the consuming unit.
    pub consumer: usize,
    pub from: LayoutKind,
    pub to: LayoutKind,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlan {
    /// Graph inputs first, then units.
    pub problem: PlanProblem,
    pub input_layouts: Vec<LayoutKind>,
    pub unit_layouts: Vec<LayoutKind>,
    pub reorders: Vec<Reorder>,
    pub cost: u64,
    /// Whether the assignment is provably minimal.
    pub exact: bool,
}

const FREE: [LayoutKind; 2] = [LayoutKind::ChannelsFirst, LayoutKind::ChannelsLast];

/// Whether the tensor has distinct channels-first and channels-last forms.
fn sensitive(m: &TensorMeta) -> bool {
    m.with_layout(LayoutKind::ChannelsFirst) != m.with_layout(LayoutKind::ChannelsLast)
}

fn producer_index(g: &ModelGraph, units: &[ExecUnit], tensor: &str) -> Option<usize> {
    if let Some(i) = g.inputs.iter().position(|i| i.name == tensor) {
        return Some(i);
    }
    units
        .iter()
        .position(|u| u.nodes().iter().any(|n| n == tensor))
        .map(|u| g.inputs.len() + u)
}

/// Planning problem for a partitioned graph: graph inputs keep their
/// declared layout, heavy units take their forward choice's layout and fused
/// groups may take either channel layout. Edges weigh the bytes of the
/// tensor crossing them, or nothing when the tensor has a single form.
pub fn layout_problem(
    g: &ModelGraph,
    units: &[ExecUnit],
    choices: &BTreeMap<String, ImplChoice>,
) -> Result<PlanProblem> {
    let batch = g.batch.unwrap_or(1);
    let mut options: Vec<Vec<LayoutKind>> = g
        .inputs
        .iter()
        .map(|i| vec![i.meta(batch).layout_kind().unwrap_or(LayoutKind::ChannelsFirst)])
        .collect();
    for u in units {
        options.push(match &u.kind {
            UnitKind::DnnNode(id) => {
                let c = choices
                    .get(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no implementation chosen for `{id}`")))?;
                vec![c.forward.layout]
            }
            UnitKind::DfpGroup(_) => FREE.to_vec(),
        });
    }
    let mut edges = Vec::new();
    for (j, u) in units.iter().enumerate() {
        for t in &u.inputs {
            let p = producer_index(g, units, t)
                .ok_or_else(|| Error::MalformedModel(format!("`{t}` has no producer")))?;
            let meta = g
                .meta_of(t)
                .ok_or_else(|| Error::MalformedModel(format!("`{t}` has no shape")))?;
            let bytes = if sensitive(&meta) { meta.bytes() as u64 } else { 0 };
            edges.push((p, g.inputs.len() + j, bytes));
        }
    }
    Ok(PlanProblem { options, edges })
}

/// Chooses unit layouts minimizing byte-weighted reorders (exact on chains).
pub fn plan_layouts(
    g: &ModelGraph,
    units: &[ExecUnit],
    choices: &BTreeMap<String, ImplChoice>,
) -> Result<LayoutPlan> {
    let problem = layout_problem(g, units, choices)?;
    let (assign, cost, exact) = solve_plan(&problem);
    let ni = g.inputs.len();
    let mut reorders = Vec::new();
    for (j, u) in units.iter().enumerate() {
        for t in &u.inputs {
            let p = producer_index(g, units, t).expect("checked while building the problem");
            let (from, to) = (assign[p], assign[ni + j]);
            let meta = g.meta_of(t).expect("checked while building the problem");
            if from != to && sensitive(&meta) {
                reorders.push(Reorder {
                    tensor: t.clone(),
                    consumer: j,
                    from,
                    to,
                    bytes: meta.bytes() as u64,
                });
            }
        }
    }
    Ok(LayoutPlan {
        input_layouts: assign[..ni].to_vec(),
        unit_layouts: assign[ni..].to_vec(),
        problem,
        reorders,
        cost,
        exact,
    })
}

/// Inserts one layout-changing Copy per reorder in front of its consumer
/// unit and re-infers shapes.
pub fn apply_layout_plan(g: &ModelGraph, units: &[ExecUnit], plan: &LayoutPlan) -> Result<ModelGraph> {
    let mut out = g.clone();
    for r in &plan.reorders {
        let base = format!("{}_to_{}", r.tensor, r.to);
        let mut id = base.clone();
        let mut k = 1;
        while out.source(&id).is_some() {
            id = format!("{base}_{k}");
            k += 1;
        }
        out.nodes.push(LayerNode::new(
            id.clone(),
            Op::Copy(CopyAttrs { layout: r.to }),
            &[&r.tensor],
            &[],
        ));
        for member in units[r.consumer].nodes() {
            let n = out.node_mut(&member).expect("unit member");
            for i in &mut n.inputs {
                if *i == r.tensor {
                    *i = id.clone();
                }
            }
        }
    }
    out.validate_and_sort()?;
    infer_shapes(&out, g.batch.unwrap_or(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfp::partition_graph;
    use crate::dnn::{Impl, WeightOrientation};
    use crate::model_ir::infer_shapes;
    use crate::zoo::GraphBuilder;
    use proptest::prelude::*;

    const ALL: [LayoutKind; 3] = [
        LayoutKind::ChannelsFirst,
        LayoutKind::ChannelsLast,
        LayoutKind::Blocked(8),
    ];

    fn choice(layout: LayoutKind) -> ImplChoice {
        ImplChoice::same(Impl {
            provider: "direct".into(),
            algorithm: "direct".into(),
            layout,
            orientation: WeightOrientation::OutIn,
        })
    }

    /// conv A → conv B → conv C with no light layers between them.
    fn three_convs() -> ModelGraph {
        let mut b = GraphBuilder::new(0);
        let x = b.input_image("x", 2, 6, 6);
        let a = b.conv(&x, 2, 4, 3, 1, 1, 1);
        let bb = b.conv(&a, 4, 4, 3, 1, 1, 1);
        let c = b.conv(&bb, 4, 2, 3, 1, 1, 1);
        b.output(&c);
        infer_shapes(&b.build().unwrap(), 1).unwrap()
    }

    #[test]
    fn one_reorder_before_the_first_disagreeing_unit() {
        let g = three_convs();
        let units = partition_graph(&g);
        let ids: Vec<String> = g.nodes.iter().map(|n| n.id.clone()).collect();
        let mut choices = BTreeMap::new();
        choices.insert(ids[0].clone(), choice(LayoutKind::ChannelsFirst));
        choices.insert(ids[1].clone(), choice(LayoutKind::ChannelsLast));
        choices.insert(ids[2].clone(), choice(LayoutKind::ChannelsLast));
        let plan = plan_layouts(&g, &units, &choices).unwrap();
        assert!(plan.exact);
        assert_eq!(plan.reorders.len(), 1);
        assert_eq!(plan.reorders[0].tensor, ids[0]);
        assert_eq!(plan.reorders[0].consumer, 1);
        assert_eq!(plan.cost, brute_force_cost(&plan.problem));
        let applied = apply_layout_plan(&g, &units, &plan).unwrap();
        assert_eq!(applied.nodes.len(), 4);
        assert_eq!(
            applied.node(&ids[2]).unwrap().meta().layout_kind(),
            Some(LayoutKind::ChannelsLast)
        );

        for l in [LayoutKind::ChannelsFirst, LayoutKind::ChannelsLast] {
            let same: BTreeMap<_, _> = ids.iter().map(|i| (i.clone(), choice(l))).collect();
            let plan = plan_layouts(&g, &units, &same).unwrap();
            // the input is declared channels-first
            let expect = usize::from(l == LayoutKind::ChannelsLast);
            assert_eq!(plan.reorders.len(), expect);
        }
    }

    #[test]
    fn fused_groups_absorb_the_cheaper_side() {
        let mut b = GraphBuilder::new(0);
        let x = b.input_image("x", 2, 6, 6);
        let a = b.conv(&x, 2, 4, 3, 1, 1, 1);
        let r = b.relu(&a);
        let p = b.max_pool(&r, 2, 2, 0);
        let c = b.conv(&p, 4, 4, 3, 1, 1, 1);
        b.output(&c);
        let g = infer_shapes(&b.build().unwrap(), 1).unwrap();
        let units = partition_graph(&g);
        let mut choices = BTreeMap::new();
        choices.insert(a.clone(), choice(LayoutKind::ChannelsFirst));
        choices.insert(c.clone(), choice(LayoutKind::ChannelsLast));
        let plan = plan_layouts(&g, &units, &choices).unwrap();
        // the pooled tensor is 4x smaller than the conv output
        assert_eq!(plan.reorders.len(), 1);
        assert_eq!(plan.reorders[0].tensor, p);
        assert_eq!(plan.cost, brute_force_cost(&plan.problem));
    }

    #[test]
    fn dag_plans_are_never_better_than_optimal() {
        let p = PlanProblem {
            options: vec![
                vec![LayoutKind::ChannelsFirst],
                FREE.to_vec(),
                vec![LayoutKind::ChannelsLast],
                FREE.to_vec(),
            ],
            edges: vec![(0, 1, 10), (1, 2, 5), (1, 3, 3), (2, 3, 7)],
        };
        let (assign, cost, exact) = solve_plan(&p);
        assert!(!exact);
        assert_eq!(cost, p.cost(&assign));
        assert!(cost >= brute_force_cost(&p));
    }

    fn chain() -> impl Strategy<Value = (Vec<Vec<LayoutKind>>, Vec<u64>)> {
        (1usize..=8).prop_flat_map(|edges| {
            let opts = proptest::collection::vec(
                proptest::sample::subsequence(ALL.to_vec(), 1..=3),
                edges + 1,
            );
            let bytes = proptest::collection::vec(0u64..1000, edges);
            (opts, bytes)
        })
    }

    proptest! {
        #[test]
        fn chain_dp_is_exact((options, bytes) in chain()) {
            let (assign, cost) = plan_chain(&options, &bytes);
            let edges = (0..bytes.len()).map(|i| (i, i + 1, bytes[i])).collect();
            let p = PlanProblem { options: options.clone(), edges };
            prop_assert_eq!(cost, p.cost(&assign));
            prop_assert_eq!(cost, brute_force_cost(&p));
            for (a, o) in assign.iter().zip(&options) {
                prop_assert!(o.contains(a));
            }
        }
    }
}
