use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use super::{BlockId, Diagram, GraphError, SignalEdge, SlotRef};

/// A strongly connected set of direct-feedthrough blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopCluster {
    /// Ascending block ids.
    pub members: Vec<BlockId>,
    /// Edges between members.
    pub edges: Vec<SignalEdge>,
    /// `(sink, source)` pairs: member inputs driven from outside the cluster.
    pub external_inputs: Vec<(SlotRef, SlotRef)>,
}

impl LoopCluster {
    pub fn contains(&self, id: BlockId) -> bool {
        self.members.binary_search(&id).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleItem {
    Block(BlockId),
    /// Index into `ExecutionSchedule::clusters`.
    Loop(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionSchedule {
    pub items: Vec<ScheduleItem>,
    pub clusters: Vec<LoopCluster>,
}

impl ExecutionSchedule {
    /// Position of the item that executes `id`.
    pub fn position(&self, id: BlockId) -> Option<usize> {
        self.items.iter().position(|it| match *it {
            ScheduleItem::Block(b) => b == id,
            ScheduleItem::Loop(k) => self.clusters[k].contains(id),
        })
    }

    /// Flattened block order; cluster members appear in ascending id.
    pub fn block_order(&self) -> Vec<BlockId> {
        let mut v = Vec::new();
        for it in &self.items {
            match *it {
                ScheduleItem::Block(b) => v.push(b),
                ScheduleItem::Loop(k) => v.extend(&self.clusters[k].members),
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    /// When false, any algebraic loop is an error instead of a cluster.
    pub solve_loops: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self { solve_loops: true }
    }
}

fn is_direct(d: &Diagram, id: BlockId) -> bool {
    d.traits(id).is_some_and(|t| t.direct_feedthrough)
}

/// Strongly connected components (size > 1, or a self-loop) of the graph
/// restricted to direct-feedthrough blocks.
pub fn detect_algebraic_loops(d: &Diagram) -> Vec<LoopCluster> {
    let nodes: Vec<BlockId> = d.block_ids().filter(|&b| is_direct(d, b)).collect();
    let index: HashMap<BlockId, usize> = nodes.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    for e in d.edges() {
        if let (Some(&u), Some(&v)) = (index.get(&e.source.block), index.get(&e.sink.block)) {
            adj[u].insert(v);
        }
    }
    let adj: Vec<Vec<usize>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();

    let mut clusters = Vec::new();
    for comp in tarjan(&adj) {
        let cyclic = comp.len() > 1 || adj[comp[0]].contains(&comp[0]);
        if !cyclic {
            continue;
        }
        let mut members: Vec<BlockId> = comp.iter().map(|&i| nodes[i]).collect();
        members.sort();
        let inside = |b: BlockId| members.binary_search(&b).is_ok();
        let edges = d
            .edges()
            .iter()
            .filter(|e| inside(e.source.block) && inside(e.sink.block))
            .copied()
            .collect();
        let mut external_inputs: Vec<(SlotRef, SlotRef)> = d
            .edges()
            .iter()
            .filter(|e| inside(e.sink.block) && !inside(e.source.block))
            .map(|e| (e.sink, e.source))
            .collect();
        external_inputs.sort();
        clusters.push(LoopCluster {
            members,
            edges,
            external_inputs,
        });
    }
    clusters.sort_by_key(|c| c.members[0]);
    clusters
}

/// Tarjan's algorithm, iterative. Components come out in reverse
/// topological order of the condensation.
pub(crate) fn tarjan(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNVISITED: usize = usize::MAX;
    let n = adj.len();
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut counter = 0;

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&(v, next)) = call.last() {
            if let Some(&w) = adj[v].get(next) {
                if let Some(top) = call.last_mut() {
                    top.1 += 1;
                }
                if index[w] == UNVISITED {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comps.push(comp);
            }
        }
    }
    comps
}

/// Orders blocks so that every direct-feedthrough block runs after all of
/// its drivers. Loop clusters are scheduled as single items; ties between
/// unconstrained items go to the smallest block id.
pub fn resolve_execution_order(
    d: &Diagram,
    opts: ScheduleOptions,
) -> Result<ExecutionSchedule, GraphError> {
    let clusters = detect_algebraic_loops(d);
    if !opts.solve_loops {
        if let Some(c) = clusters.first() {
            return Err(GraphError::UnresolvableCycle(c.members.clone()));
        }
    }

    let mut item_of: HashMap<BlockId, usize> = HashMap::new();
    let mut items: Vec<ScheduleItem> = Vec::new();
    let mut keys: Vec<BlockId> = Vec::new();
    for (k, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            item_of.insert(m, items.len());
        }
        items.push(ScheduleItem::Loop(k));
        keys.push(c.members[0]);
    }
    for id in d.block_ids() {
        if let std::collections::hash_map::Entry::Vacant(e) = item_of.entry(id) {
            e.insert(items.len());
            items.push(ScheduleItem::Block(id));
            keys.push(id);
        }
    }

    let n = items.len();
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut indeg = vec![0usize; n];
    for e in d.edges() {
        if !is_direct(d, e.sink.block) {
            continue;
        }
        let (Some(&u), Some(&v)) = (item_of.get(&e.source.block), item_of.get(&e.sink.block))
        else {
            continue;
        };
        if u != v && succ[u].insert(v) {
            indeg[v] += 1;
        }
    }

    let mut ready: BinaryHeap<Reverse<(BlockId, usize)>> = (0..n)
        .filter(|&i| indeg[i] == 0)
        .map(|i| Reverse((keys[i], i)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, i))) = ready.pop() {
        order.push(items[i]);
        for &j in &succ[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.push(Reverse((keys[j], j)));
            }
        }
    }
    if order.len() != n {
        // Unreachable when the cluster detection is correct; kept as a guard.
        let stuck: Vec<BlockId> = (0..n).filter(|&i| indeg[i] > 0).map(|i| keys[i]).collect();
        return Err(GraphError::UnresolvableCycle(stuck));
    }
    Ok(ExecutionSchedule {
        items: order,
        clusters,
    })
}
