//! Algebraic loop solving: residual extraction by symbolic expansion,
//! symbolic Jacobians and Newton–Raphson iteration.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::expr::{differentiate, simplify, Expr, ExprError, Symbol, SymbolTable};
use crate::graph::{signal_symbol, BlockId, Diagram, LoopCluster, SlotRef, SymCtx};
use crate::linalg::{solve_in_place, LinalgError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoopError {
    #[error("block {block} in an algebraic loop has no symbolic description")]
    SymbolicallyUnsolvableLoop { block: BlockId },
    #[error("singular Jacobian")]
    SingularJacobian,
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual_norm:e})")]
    LoopDivergence {
        residual_norm: f64,
        iterations: usize,
    },
    #[error(transparent)]
    Eval(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialGuess {
    Zeros,
    /// Previous cycle's solution, zeros on the first cycle.
    WarmStart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Bound on the residual ∞-norm.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub initial_guess: InitialGuess,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
            initial_guess: InitialGuess::WarmStart,
        }
    }
}

/// `f(x) = 0` together with its symbolic Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSystem {
    pub unknowns: Vec<Symbol>,
    pub residuals: Vec<Expr>,
    /// Row-major: `jacobian[i][j] = ∂f_i/∂x_j`.
    pub jacobian: Vec<Vec<Expr>>,
    pub config: NewtonConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopSolution<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    pub residual_norm: T,
}

impl ResidualSystem {
    /// Builds the Jacobian by symbolic differentiation. Panics when the
    /// number of residuals differs from the number of unknowns.
    pub fn new(unknowns: Vec<Symbol>, residuals: Vec<Expr>, config: NewtonConfig) -> Self {
        assert_eq!(unknowns.len(), residuals.len(), "square residual system");
        let jacobian = residuals
            .iter()
            .map(|f| unknowns.iter().map(|x| differentiate(f, x)).collect())
            .collect();
        Self {
            unknowns,
            residuals,
            jacobian,
            config,
        }
    }

    pub fn dim(&self) -> usize {
        self.unknowns.len()
    }

    fn lookup<'a, T: Scalar>(
        &'a self,
        x: &'a [T],
        bindings: &'a SymbolTable<T>,
    ) -> impl Fn(&Symbol) -> Option<T> + 'a {
        move |s| match self.unknowns.iter().position(|u| u == s) {
            Some(i) => Some(x[i]),
            None => bindings.get(s),
        }
    }

    pub fn residual<T: Scalar>(
        &self,
        x: &[T],
        bindings: &SymbolTable<T>,
    ) -> Result<Vec<T>, LoopError> {
        let look = self.lookup(x, bindings);
        self.residuals
            .iter()
            .map(|f| f.evaluate_with(&look).map_err(LoopError::from))
            .collect()
    }

    /// Jacobian evaluated at `x`, row-major.
    pub fn jacobian_at<T: Scalar>(
        &self,
        x: &[T],
        bindings: &SymbolTable<T>,
    ) -> Result<Vec<T>, LoopError> {
        let look = self.lookup(x, bindings);
        let mut out = Vec::with_capacity(self.dim() * self.dim());
        for row in &self.jacobian {
            for e in row {
                out.push(e.evaluate_with(&look)?);
            }
        }
        Ok(out)
    }

    /// Pretty-printed residuals and Jacobian.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, (x, f)) in self.unknowns.iter().zip(&self.residuals).enumerate() {
            let _ = writeln!(s, "x{i} = {x}");
            let _ = writeln!(s, "f{i} = {f}");
        }
        for (i, row) in self.jacobian.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                let _ = writeln!(s, "J{i}{j} = {e}");
            }
        }
        s
    }
}

pub(crate) fn norm_inf<T: Scalar>(v: &[T]) -> T {
    if v.iter().any(|x| !x.is_finite()) {
        return T::infinity();
    }
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

fn step_from<T: Scalar>(
    rs: &ResidualSystem,
    x: &[T],
    f: &[T],
    bindings: &SymbolTable<T>,
) -> Result<Vec<T>, LoopError> {
    let n = rs.dim();
    let mut a = rs.jacobian_at(x, bindings)?;
    let mut dx: Vec<T> = f.iter().map(|&v| -v).collect();
    solve_in_place(&mut a, &mut dx, n).map_err(|e| match e {
        LinalgError::Singular { .. } | LinalgError::DimensionMismatch(_) => {
            LoopError::SingularJacobian
        }
    })?;
    Ok(x.iter().zip(&dx).map(|(&a, &d)| a + d).collect())
}

/// One Newton update `x + Δx` with `J(x) Δx = −f(x)`.
pub fn newton_step<T: Scalar>(
    rs: &ResidualSystem,
    x: &[T],
    bindings: &SymbolTable<T>,
) -> Result<Vec<T>, LoopError> {
    let f = rs.residual(x, bindings)?;
    step_from(rs, x, &f, bindings)
}

/// Newton iteration from `x0` until the residual ∞-norm drops to the
/// configured tolerance. `iterations` counts Newton updates taken.
pub fn solve_loop<T: Scalar>(
    rs: &ResidualSystem,
    bindings: &SymbolTable<T>,
    x0: &[T],
) -> Result<LoopSolution<T>, LoopError> {
    let tol = T::lit(rs.config.tolerance);
    let mut x = x0.to_vec();
    let mut norm = T::infinity();
    for k in 0..=rs.config.max_iterations {
        let f = rs.residual(&x, bindings)?;
        norm = norm_inf(&f);
        if norm <= tol {
            return Ok(LoopSolution {
                x,
                iterations: k,
                residual_norm: norm,
            });
        }
        if !norm.is_finite() || k == rs.config.max_iterations {
            break;
        }
        x = step_from(rs, &x, &f, bindings)?;
    }
    Err(LoopError::LoopDivergence {
        residual_norm: norm.to_f64_lossy(),
        iterations: rs.config.max_iterations,
    })
}

/// A loop cluster turned into a residual system, with the bookkeeping that
/// maps symbols back to diagram slots.
#[derive(Debug, Clone)]
pub struct LoopSystem {
    pub members: Vec<BlockId>,
    /// Blocks whose outputs were chosen as unknowns (the tear set).
    pub torn: Vec<BlockId>,
    /// Output slot of each unknown, parallel to `system.unknowns`.
    pub unknown_slots: Vec<SlotRef>,
    /// Outside output slots feeding the loop, with their symbols.
    pub externals: Vec<(Symbol, SlotRef)>,
    /// Parameter symbols: `(symbol, block, index)`.
    pub params: Vec<(Symbol, BlockId, usize)>,
    /// State symbols: `(symbol, block, index)`.
    pub states: Vec<(Symbol, BlockId, usize)>,
    /// Non-torn members in dependency order.
    pub order: Vec<BlockId>,
    pub system: ResidualSystem,
}

impl LoopSystem {
    /// Expands the loop starting from each unknown: torn block outputs become
    /// unknowns, every other member is substituted symbolically.
    pub fn extract(
        cluster: &LoopCluster,
        d: &Diagram,
        config: NewtonConfig,
    ) -> Result<Self, LoopError> {
        for &b in &cluster.members {
            if !d.traits(b).is_some_and(|t| t.symbolic) {
                return Err(LoopError::SymbolicallyUnsolvableLoop { block: b });
            }
        }
        let torn = tear(cluster);
        let inside = |b: BlockId| cluster.contains(b);

        let mut unknown_slots = Vec::new();
        for &b in &torn {
            let consumed: BTreeSet<SlotRef> = cluster
                .edges
                .iter()
                .filter(|e| e.source.block == b)
                .map(|e| e.source)
                .collect();
            unknown_slots.extend(consumed);
        }
        let unknowns: Vec<Symbol> = unknown_slots
            .iter()
            .map(|s| signal_symbol(s.block, s.index))
            .collect();

        let mut exprs: HashMap<SlotRef, Expr> = unknown_slots
            .iter()
            .zip(&unknowns)
            .map(|(s, u)| (*s, Expr::var(u.clone())))
            .collect();
        let mut externals: Vec<(Symbol, SlotRef)> = Vec::new();

        let order = dependency_order(cluster, &torn);
        let inputs_of =
            |b: BlockId, exprs: &HashMap<SlotRef, Expr>, externals: &mut Vec<(Symbol, SlotRef)>| {
                let arity = d.traits(b).map_or(0, |t| t.inputs.len());
                (0..arity)
                    .map(|k| {
                        let src = d.driver(b.i(k)).expect("validated diagram");
                        if inside(src.block) {
                            exprs.get(&src).cloned().expect("dependency order")
                        } else {
                            let sym = signal_symbol(src.block, src.index);
                            if !externals.iter().any(|(_, s)| *s == src) {
                                externals.push((sym.clone(), src));
                            }
                            Expr::var(sym)
                        }
                    })
                    .collect::<Vec<_>>()
            };
        let symbolic = |b: BlockId, inputs: &[Expr]| {
            d.block(b)
                .and_then(|blk| blk.symbolic_output(inputs, &SymCtx::new(b)))
                .ok_or(LoopError::SymbolicallyUnsolvableLoop { block: b })
        };

        for &b in &order {
            let ins = inputs_of(b, &exprs, &mut externals);
            for (k, e) in symbolic(b, &ins)?.into_iter().enumerate() {
                exprs.insert(b.o(k), e);
            }
        }
        let mut residuals = Vec::with_capacity(unknowns.len());
        let mut torn_outputs: HashMap<BlockId, Vec<Expr>> = HashMap::new();
        for &b in &torn {
            let ins = inputs_of(b, &exprs, &mut externals);
            torn_outputs.insert(b, symbolic(b, &ins)?);
        }
        for (slot, x) in unknown_slots.iter().zip(&unknowns) {
            let out = torn_outputs[&slot.block][slot.index].clone();
            residuals.push(simplify(&(out - Expr::var(x.clone()))));
        }
        externals.sort_by_key(|(_, s)| *s);

        let mut params = Vec::new();
        let mut states = Vec::new();
        for &b in &cluster.members {
            let blk = d.block(b).expect("member");
            let ctx = SymCtx::new(b);
            for k in 0..blk.param_values().len() {
                params.push((ctx.param_symbol(k), b, k));
            }
            for k in 0..blk.state().len() {
                states.push((ctx.state_symbol(k), b, k));
            }
        }

        Ok(Self {
            members: cluster.members.clone(),
            torn,
            unknown_slots,
            externals,
            params,
            states,
            order,
            system: ResidualSystem::new(unknowns, residuals, config),
        })
    }

    /// Binds parameters and committed state of the member blocks.
    pub fn bind_blocks(&self, d: &Diagram, table: &mut SymbolTable<f64>) {
        let mut cache: HashMap<BlockId, (Vec<f64>, Vec<f64>)> = HashMap::new();
        for &b in &self.members {
            let blk = d.block(b).expect("member");
            cache.insert(b, (blk.param_values(), blk.state()));
        }
        for (sym, b, k) in &self.params {
            table.bind(sym.clone(), cache[b].0[*k]);
        }
        for (sym, b, k) in &self.states {
            table.bind(sym.clone(), cache[b].1[*k]);
        }
    }
}

/// Greedy feedback vertex set: repeatedly remove the block with the largest
/// in-degree × out-degree (smallest id on ties) until the rest is acyclic.
fn tear(cluster: &LoopCluster) -> Vec<BlockId> {
    let mut torn: BTreeSet<BlockId> = BTreeSet::new();
    loop {
        let remaining: Vec<BlockId> = cluster
            .members
            .iter()
            .copied()
            .filter(|b| !torn.contains(b))
            .collect();
        let adj = adjacency(cluster, &remaining);
        let cyclic: Vec<usize> = crate::graph::tarjan_components(&adj)
            .into_iter()
            .filter(|c| c.len() > 1 || adj[c[0]].contains(&c[0]))
            .flatten()
            .collect();
        if cyclic.is_empty() {
            return torn.into_iter().collect();
        }
        let mut indeg = vec![0usize; remaining.len()];
        for succ in &adj {
            for &j in succ {
                indeg[j] += 1;
            }
        }
        let pick = cyclic
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let sa = indeg[a] * adj[a].len();
                let sb = indeg[b] * adj[b].len();
                sa.cmp(&sb).then(remaining[b].cmp(&remaining[a]))
            })
            .expect("nonempty");
        torn.insert(remaining[pick]);
    }
}

/// Block-level adjacency among `nodes` (deduplicated successor lists).
fn adjacency(cluster: &LoopCluster, nodes: &[BlockId]) -> Vec<Vec<usize>> {
    let pos = |b: BlockId| nodes.iter().position(|&n| n == b);
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    for e in &cluster.edges {
        if let (Some(u), Some(v)) = (pos(e.source.block), pos(e.sink.block)) {
            adj[u].insert(v);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Kahn order of the non-torn members, smallest id first on ties.
fn dependency_order(cluster: &LoopCluster, torn: &[BlockId]) -> Vec<BlockId> {
    let nodes: Vec<BlockId> = cluster
        .members
        .iter()
        .copied()
        .filter(|b| !torn.contains(b))
        .collect();
    let adj = adjacency(cluster, &nodes);
    let mut indeg = vec![0usize; nodes.len()];
    for succ in &adj {
        for &j in succ {
            indeg[j] += 1;
        }
    }
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(nodes[i]);
        for &j in &adj[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    order
}
