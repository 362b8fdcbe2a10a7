//! Code generation: lowering of a scheduled diagram to a flat register
//! program, an interpreter for that program, a C89 printer and symbolic
//! linearization of state-space dynamics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::expr::{differentiate, simplify, Expr, ExprError, ExprNode, Symbol, SymbolTable};
use crate::graph::{
    resolve_execution_order, signal_symbol, BlockId, Diagram, ExecutionSchedule, GraphError,
    Lowering, ScheduleItem, ScheduleOptions, SlotRef, SymCtx, ValueType,
};
use crate::linalg::{solve_in_place, Matrix};
use crate::loopsolve::{norm_inf, InitialGuess, LoopError, LoopSystem, NewtonConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodegenError {
    #[error("block {name} ({block}) of kind {kind} cannot be lowered")]
    UnsupportedBlock {
        block: BlockId,
        name: String,
        kind: &'static str,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("algebraic loop {blocks:?}: {source}")]
    Loop {
        blocks: Vec<BlockId>,
        source: LoopError,
    },
    #[error("unbound symbol `{0}` during lowering")]
    Unbound(Symbol),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("expected {expected} inputs, got {got}")]
    Inputs { expected: usize, got: usize },
    #[error("state has {got} entries, program needs {expected}")]
    State { expected: usize, got: usize },
    #[error(transparent)]
    Eval(#[from] ExprError),
    #[error("algebraic loop {index}: {source}")]
    Loop { index: usize, source: LoopError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(usize),
    /// Index into the constant pool.
    Const(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Const(usize),
    Input(usize),
    State(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sink {
    State(usize),
    Output(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    Load {
        dst: usize,
        src: Source,
    },
    Store {
        dst: Sink,
        src: Operand,
    },
    Add {
        dst: usize,
        a: Operand,
        b: Operand,
    },
    Mul {
        dst: usize,
        a: Operand,
        b: Operand,
    },
    Neg {
        dst: usize,
        a: Operand,
    },
    /// Fails on a zero denominator.
    Div {
        dst: usize,
        a: Operand,
        b: Operand,
    },
    /// Integer power; fails on a zero base with negative exponent.
    Powi {
        dst: usize,
        a: Operand,
        n: i32,
    },
    /// `lo` and `hi` index the constant pool.
    Clamp {
        dst: usize,
        a: Operand,
        lo: usize,
        hi: usize,
    },
    Newton(NewtonLoop),
}

impl Instr {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Load { .. } => "load",
            Instr::Store { .. } => "store",
            Instr::Add { .. } => "add",
            Instr::Mul { .. } => "mul",
            Instr::Neg { .. } => "neg",
            Instr::Div { .. } => "div",
            Instr::Powi { .. } => "powi",
            Instr::Clamp { .. } => "clamp",
            Instr::Newton(_) => "newton",
        }
    }
}

/// Bounded Newton iteration over registers `unknowns`.
///
/// Each pass runs `residual_code`, stops when the ∞-norm of `residuals` is
/// within `tolerance`, otherwise runs `jacobian_code`, solves
/// `J dx = -f` and adds `dx` to the unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonLoop {
    pub index: usize,
    pub unknowns: Vec<usize>,
    pub residual_code: Vec<Instr>,
    pub residuals: Vec<Operand>,
    pub jacobian_code: Vec<Instr>,
    /// Row-major, `n * n` entries.
    pub jacobian: Vec<Operand>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl NewtonLoop {
    pub fn dim(&self) -> usize {
        self.unknowns.len()
    }
}

/// One diagram cycle as straight-line register code.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatProgram {
    pub constants: Vec<f64>,
    /// Initial value of each persistent state slot.
    pub state_init: Vec<f64>,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
    pub registers: usize,
    pub code: Vec<Instr>,
    /// Where each block output lives after a cycle.
    pub signals: BTreeMap<SlotRef, Operand>,
    pub config: NewtonConfig,
}

impl FlatProgram {
    /// Number of top-level instructions with the given mnemonic.
    pub fn count(&self, mnemonic: &str) -> usize {
        self.code
            .iter()
            .filter(|i| i.mnemonic() == mnemonic)
            .count()
    }

    pub fn newton_loops(&self) -> impl Iterator<Item = &NewtonLoop> {
        self.code.iter().filter_map(|i| match i {
            Instr::Newton(l) => Some(l),
            _ => None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.input_labels.len()
    }

    pub fn outputs(&self) -> usize {
        self.output_labels.len()
    }

    fn operand(&self, o: Operand) -> String {
        match o {
            Operand::Reg(r) => format!("r{r}"),
            Operand::Const(k) => format!("{:?}", self.constants[k]),
        }
    }

    fn list(&self, f: &mut fmt::Formatter<'_>, code: &[Instr], indent: usize) -> fmt::Result {
        let pad = " ".repeat(indent);
        for ins in code {
            match ins {
                Instr::Load { dst, src } => {
                    let s = match *src {
                        Source::Const(k) => format!("{:?}", self.constants[k]),
                        Source::Input(k) => format!("in[{k}]"),
                        Source::State(k) => format!("state[{k}]"),
                    };
                    writeln!(f, "{pad}r{dst} = load {s}")?
                }
                Instr::Store { dst, src } => {
                    let d = match *dst {
                        Sink::State(k) => format!("state[{k}]"),
                        Sink::Output(k) => format!("out[{k}]"),
                    };
                    writeln!(f, "{pad}store {d} = {}", self.operand(*src))?
                }
                Instr::Add { dst, a, b } => writeln!(
                    f,
                    "{pad}r{dst} = add {} {}",
                    self.operand(*a),
                    self.operand(*b)
                )?,
                Instr::Mul { dst, a, b } => writeln!(
                    f,
                    "{pad}r{dst} = mul {} {}",
                    self.operand(*a),
                    self.operand(*b)
                )?,
                Instr::Div { dst, a, b } => writeln!(
                    f,
                    "{pad}r{dst} = div {} {}",
                    self.operand(*a),
                    self.operand(*b)
                )?,
                Instr::Neg { dst, a } => writeln!(f, "{pad}r{dst} = neg {}", self.operand(*a))?,
                Instr::Powi { dst, a, n } => {
                    writeln!(f, "{pad}r{dst} = powi {} {n}", self.operand(*a))?
                }
                Instr::Clamp { dst, a, lo, hi } => writeln!(
                    f,
                    "{pad}r{dst} = clamp {} {:?} {:?}",
                    self.operand(*a),
                    self.constants[*lo],
                    self.constants[*hi]
                )?,
                Instr::Newton(l) => {
                    let xs: Vec<String> = l.unknowns.iter().map(|r| format!("r{r}")).collect();
                    writeln!(
                        f,
                        "{pad}newton #{} [{}] tol {:?} max {} {{",
                        l.index,
                        xs.join(" "),
                        l.tolerance,
                        l.max_iterations
                    )?;
                    self.list(f, &l.residual_code, indent + 2)?;
                    let fs: Vec<String> = l.residuals.iter().map(|o| self.operand(*o)).collect();
                    writeln!(f, "{pad}  residual [{}]", fs.join(" "))?;
                    self.list(f, &l.jacobian_code, indent + 2)?;
                    let js: Vec<String> = l.jacobian.iter().map(|o| self.operand(*o)).collect();
                    writeln!(f, "{pad}  solve{} [{}]", l.dim(), js.join(" "))?;
                    writeln!(f, "{pad}}}")?
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for FlatProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.list(f, &self.code, 0)
    }
}

struct Builder {
    constants: Vec<f64>,
    pool: HashMap<u64, usize>,
    registers: usize,
}

impl Builder {
    fn constant(&mut self, x: f64) -> usize {
        let constants = &mut self.constants;
        *self.pool.entry(x.to_bits()).or_insert_with(|| {
            constants.push(x);
            constants.len() - 1
        })
    }

    fn reg(&mut self) -> usize {
        self.registers += 1;
        self.registers - 1
    }

    /// Compiles `e` into `code`, folding n-ary sums and products from the
    /// left like `Expr::evaluate_with`.
    fn expr(
        &mut self,
        code: &mut Vec<Instr>,
        e: &Expr,
        env: &HashMap<Symbol, Operand>,
    ) -> Result<Operand, CodegenError> {
        Ok(match e.node() {
            ExprNode::Constant(c) => Operand::Const(self.constant(*c)),
            ExprNode::Variable(s) => *env.get(s).ok_or_else(|| CodegenError::Unbound(s.clone()))?,
            ExprNode::Add(ops) | ExprNode::Mul(ops) => {
                let add = matches!(e.node(), ExprNode::Add(_));
                let mut acc = self.expr(code, &ops[0], env)?;
                for t in &ops[1..] {
                    let b = self.expr(code, t, env)?;
                    let dst = self.reg();
                    code.push(if add {
                        Instr::Add { dst, a: acc, b }
                    } else {
                        Instr::Mul { dst, a: acc, b }
                    });
                    acc = Operand::Reg(dst);
                }
                acc
            }
            ExprNode::Neg(a) => {
                let a = self.expr(code, a, env)?;
                let dst = self.reg();
                code.push(Instr::Neg { dst, a });
                Operand::Reg(dst)
            }
            ExprNode::Div(n, d) => {
                let a = self.expr(code, n, env)?;
                let b = self.expr(code, d, env)?;
                let dst = self.reg();
                code.push(Instr::Div { dst, a, b });
                Operand::Reg(dst)
            }
            ExprNode::Pow(b, n) => {
                let a = self.expr(code, b, env)?;
                let dst = self.reg();
                code.push(Instr::Powi { dst, a, n: *n });
                Operand::Reg(dst)
            }
        })
    }

    /// Signals must live in registers, so bare constants get a load.
    fn materialize(&mut self, code: &mut Vec<Instr>, o: Operand) -> Operand {
        match o {
            Operand::Const(k) => {
                let dst = self.reg();
                code.push(Instr::Load {
                    dst,
                    src: Source::Const(k),
                });
                Operand::Reg(dst)
            }
            r => r,
        }
    }
}

fn unsupported(d: &Diagram, b: BlockId) -> CodegenError {
    CodegenError::UnsupportedBlock {
        block: b,
        name: d.name(b).unwrap_or_default().to_string(),
        kind: d.block(b).map_or("?", |k| k.kind()),
    }
}

/// Lowers `d` with its default schedule and Newton configuration.
pub fn lower_diagram(d: &Diagram) -> Result<FlatProgram, CodegenError> {
    let report = d.validate();
    if !report.is_empty() {
        return Err(GraphError::Invalid(report).into());
    }
    let s = resolve_execution_order(d, ScheduleOptions::default())?;
    lower(d, &s, NewtonConfig::default())
}

/// Lowers one cycle of `d` executed in the order of `s`.
///
/// State slots start from the blocks' committed state at lowering time.
/// Each loop cluster becomes a [`NewtonLoop`] whose warm start lives in
/// extra state slots when `config` asks for it.
pub fn lower(
    d: &Diagram,
    s: &ExecutionSchedule,
    config: NewtonConfig,
) -> Result<FlatProgram, CodegenError> {
    let mut bld = Builder {
        constants: Vec::new(),
        pool: HashMap::new(),
        registers: 0,
    };
    let mut code = Vec::new();
    let mut env: HashMap<Symbol, Operand> = HashMap::new();
    let mut state_init = Vec::new();
    let mut state_labels = Vec::new();
    let mut state_slots: HashMap<(BlockId, usize), usize> = HashMap::new();
    let mut input_labels = Vec::new();
    let mut input_index: HashMap<BlockId, usize> = HashMap::new();

    for b in d.block_ids() {
        let blk = d.block(b).expect("listed block");
        let t = d.traits(b).expect("listed block");
        let scalar_ports = t
            .inputs
            .iter()
            .chain(&t.outputs)
            .all(|ty| *ty == ValueType::Scalar);
        if blk.lowering() == Lowering::Unsupported || !scalar_ports {
            return Err(unsupported(d, b));
        }
        if blk.lowering() == Lowering::Input {
            input_index.insert(b, input_labels.len());
            input_labels.push(d.name(b).unwrap_or_default().to_string());
        }
        let ctx = SymCtx::new(b);
        for (k, p) in blk.param_values().into_iter().enumerate() {
            env.insert(ctx.param_symbol(k), Operand::Const(bld.constant(p)));
        }
        for (k, x) in blk.state().into_iter().enumerate() {
            let slot = state_init.len();
            state_slots.insert((b, k), slot);
            state_init.push(x);
            state_labels.push(format!("{}.s{k}", d.name(b).unwrap_or_default()));
            let dst = bld.reg();
            code.push(Instr::Load {
                dst,
                src: Source::State(slot),
            });
            env.insert(ctx.state_symbol(k), Operand::Reg(dst));
        }
    }

    let mut signals: BTreeMap<SlotRef, Operand> = BTreeMap::new();
    let input_exprs = |b: BlockId| -> Vec<Expr> {
        let n = d.traits(b).map_or(0, |t| t.inputs.len());
        (0..n)
            .map(|k| {
                let src = d.driver(b.i(k)).expect("validated diagram");
                Expr::var(signal_symbol(src.block, src.index))
            })
            .collect()
    };

    // Lowers the outputs of `b`, skipping slots already assigned.
    let block_outputs = |b: BlockId,
                         bld: &mut Builder,
                         code: &mut Vec<Instr>,
                         env: &mut HashMap<Symbol, Operand>,
                         signals: &mut BTreeMap<SlotRef, Operand>|
     -> Result<(), CodegenError> {
        let blk = d.block(b).expect("listed block");
        let arity = d.traits(b).map_or(0, |t| t.outputs.len());
        if (0..arity).all(|k| signals.contains_key(&b.o(k))) {
            return Ok(());
        }
        let ins = input_exprs(b);
        let outs: Vec<Operand> = match blk.lowering() {
            Lowering::Symbolic => {
                let exprs = blk
                    .symbolic_output(&ins, &SymCtx::new(b))
                    .ok_or_else(|| unsupported(d, b))?;
                let mut v = Vec::with_capacity(exprs.len());
                for e in &exprs {
                    v.push(bld.expr(code, e, env)?);
                }
                v
            }
            Lowering::Clamp { lo, hi } => {
                let a = bld.expr(code, &ins[0], env)?;
                let (lo, hi) = (bld.constant(lo), bld.constant(hi));
                let dst = bld.reg();
                code.push(Instr::Clamp { dst, a, lo, hi });
                vec![Operand::Reg(dst)]
            }
            Lowering::Input => {
                let dst = bld.reg();
                code.push(Instr::Load {
                    dst,
                    src: Source::Input(input_index[&b]),
                });
                vec![Operand::Reg(dst)]
            }
            Lowering::Unsupported => return Err(unsupported(d, b)),
        };
        for (k, o) in outs.into_iter().enumerate() {
            if signals.contains_key(&b.o(k)) {
                continue;
            }
            let o = bld.materialize(code, o);
            signals.insert(b.o(k), o);
            env.insert(signal_symbol(b, k), o);
        }
        Ok(())
    };

    for item in &s.items {
        match *item {
            ScheduleItem::Block(b) => {
                block_outputs(b, &mut bld, &mut code, &mut env, &mut signals)?
            }
            ScheduleItem::Loop(k) => {
                let cluster = &s.clusters[k];
                let loop_err = |source| CodegenError::Loop {
                    blocks: cluster.members.clone(),
                    source,
                };
                let ls = LoopSystem::extract(cluster, d, config).map_err(loop_err)?;
                let rs = &ls.system;
                let n = rs.dim();
                let warm_base = state_init.len();
                let mut unknowns = Vec::with_capacity(n);
                for (i, x) in rs.unknowns.iter().enumerate() {
                    let dst = bld.reg();
                    let src = match config.initial_guess {
                        InitialGuess::WarmStart => {
                            state_init.push(0.0);
                            state_labels.push(format!("loop{k}.x{i}"));
                            Source::State(warm_base + i)
                        }
                        InitialGuess::Zeros => Source::Const(bld.constant(0.0)),
                    };
                    code.push(Instr::Load { dst, src });
                    env.insert(x.clone(), Operand::Reg(dst));
                    unknowns.push(dst);
                }
                let mut residual_code = Vec::new();
                let mut residuals = Vec::with_capacity(n);
                for f in &rs.residuals {
                    residuals.push(bld.expr(&mut residual_code, f, &env)?);
                }
                let mut jacobian_code = Vec::new();
                let mut jacobian = Vec::with_capacity(n * n);
                for e in rs.jacobian.iter().flatten() {
                    jacobian.push(bld.expr(&mut jacobian_code, e, &env)?);
                }
                code.push(Instr::Newton(NewtonLoop {
                    index: k,
                    unknowns: unknowns.clone(),
                    residual_code,
                    residuals,
                    jacobian_code,
                    jacobian,
                    tolerance: config.tolerance,
                    max_iterations: config.max_iterations,
                }));
                for (slot, &r) in ls.unknown_slots.iter().zip(&unknowns) {
                    signals.insert(*slot, Operand::Reg(r));
                }
                for &b in ls.order.iter().chain(&ls.torn) {
                    block_outputs(b, &mut bld, &mut code, &mut env, &mut signals)?;
                }
                if config.initial_guess == InitialGuess::WarmStart {
                    for (i, &r) in unknowns.iter().enumerate() {
                        code.push(Instr::Store {
                            dst: Sink::State(warm_base + i),
                            src: Operand::Reg(r),
                        });
                    }
                }
            }
        }
    }

    for b in d.block_ids() {
        let blk = d.block(b).expect("listed block");
        let size = blk.state().len();
        if size == 0 {
            continue;
        }
        let next = blk
            .symbolic_update(&input_exprs(b), &SymCtx::new(b))
            .filter(|v| v.len() == size)
            .ok_or_else(|| unsupported(d, b))?;
        for (k, e) in next.iter().enumerate() {
            let src = bld.expr(&mut code, e, &env)?;
            code.push(Instr::Store {
                dst: Sink::State(state_slots[&(b, k)]),
                src,
            });
        }
    }

    let mut output_labels = Vec::new();
    for slot in d.unconnected_outputs() {
        let src = *signals
            .get(&slot)
            .ok_or_else(|| unsupported(d, slot.block))?;
        code.push(Instr::Store {
            dst: Sink::Output(output_labels.len()),
            src,
        });
        output_labels.push(d.slot_label(slot));
    }

    Ok(FlatProgram {
        constants: bld.constants,
        state_init,
        state_labels,
        input_labels,
        output_labels,
        registers: bld.registers,
        code,
        signals,
        config,
    })
}

struct Machine<'a> {
    constants: &'a [f64],
    regs: &'a mut [f64],
    state: &'a mut [f64],
    inputs: &'a [f64],
    outputs: &'a mut [f64],
    iterations: &'a mut Vec<usize>,
}

impl Machine<'_> {
    fn get(&self, o: Operand) -> f64 {
        match o {
            Operand::Reg(r) => self.regs[r],
            Operand::Const(k) => self.constants[k],
        }
    }

    fn run(&mut self, code: &[Instr]) -> Result<(), RunError> {
        for ins in code {
            match ins {
                Instr::Load { dst, src } => {
                    self.regs[*dst] = match *src {
                        Source::Const(k) => self.constants[k],
                        Source::Input(k) => self.inputs[k],
                        Source::State(k) => self.state[k],
                    }
                }
                Instr::Store { dst, src } => {
                    let v = self.get(*src);
                    match *dst {
                        Sink::State(k) => self.state[k] = v,
                        Sink::Output(k) => self.outputs[k] = v,
                    }
                }
                Instr::Add { dst, a, b } => self.regs[*dst] = self.get(*a) + self.get(*b),
                Instr::Mul { dst, a, b } => self.regs[*dst] = self.get(*a) * self.get(*b),
                Instr::Neg { dst, a } => self.regs[*dst] = -self.get(*a),
                Instr::Div { dst, a, b } => {
                    let den = self.get(*b);
                    if den == 0.0 {
                        return Err(
                            ExprError::EvalSingularity(format!("r{dst} = {a:?} / {b:?}")).into(),
                        );
                    }
                    self.regs[*dst] = self.get(*a) / den;
                }
                Instr::Powi { dst, a, n } => {
                    let base = self.get(*a);
                    if *n < 0 && base == 0.0 {
                        return Err(
                            ExprError::EvalSingularity(format!("r{dst} = {a:?} ^ {n}")).into()
                        );
                    }
                    self.regs[*dst] = base.powi(*n);
                }
                Instr::Clamp { dst, a, lo, hi } => {
                    self.regs[*dst] = self.get(*a).clamp(self.constants[*lo], self.constants[*hi])
                }
                Instr::Newton(l) => {
                    let it = self.newton(l).map_err(|source| RunError::Loop {
                        index: l.index,
                        source,
                    })?;
                    if self.iterations.len() <= l.index {
                        self.iterations.resize(l.index + 1, 0);
                    }
                    self.iterations[l.index] = it;
                }
            }
        }
        Ok(())
    }

    fn sub(&mut self, code: &[Instr]) -> Result<(), LoopError> {
        self.run(code).map_err(|e| match e {
            RunError::Eval(e) => LoopError::Eval(e),
            RunError::Loop { source, .. } => source,
            other => LoopError::Eval(ExprError::EvalSingularity(other.to_string())),
        })
    }

    fn newton(&mut self, l: &NewtonLoop) -> Result<usize, LoopError> {
        let n = l.dim();
        let mut norm = f64::INFINITY;
        for k in 0..=l.max_iterations {
            self.sub(&l.residual_code)?;
            let f: Vec<f64> = l.residuals.iter().map(|&o| self.get(o)).collect();
            norm = norm_inf(&f);
            if norm <= l.tolerance {
                return Ok(k);
            }
            if !norm.is_finite() || k == l.max_iterations {
                break;
            }
            self.sub(&l.jacobian_code)?;
            let mut a: Vec<f64> = l.jacobian.iter().map(|&o| self.get(o)).collect();
            let mut dx: Vec<f64> = f.iter().map(|v| -v).collect();
            solve_in_place(&mut a, &mut dx, n).map_err(|_| LoopError::SingularJacobian)?;
            for (&r, d) in l.unknowns.iter().zip(&dx) {
                self.regs[r] += d;
            }
        }
        Err(LoopError::LoopDivergence {
            residual_norm: norm,
            iterations: l.max_iterations,
        })
    }
}

/// Runs one cycle of `p`: reads and advances `state`, returns the outputs.
pub fn interpret(p: &FlatProgram, state: &mut [f64], inputs: &[f64]) -> Result<Vec<f64>, RunError> {
    let mut regs = vec![0.0; p.registers];
    let mut outputs = vec![0.0; p.outputs()];
    execute(p, &mut regs, state, inputs, &mut outputs, &mut Vec::new())?;
    Ok(outputs)
}

fn execute(
    p: &FlatProgram,
    regs: &mut [f64],
    state: &mut [f64],
    inputs: &[f64],
    outputs: &mut [f64],
    iterations: &mut Vec<usize>,
) -> Result<(), RunError> {
    if inputs.len() != p.inputs() {
        return Err(RunError::Inputs {
            expected: p.inputs(),
            got: inputs.len(),
        });
    }
    if state.len() != p.state_init.len() {
        return Err(RunError::State {
            expected: p.state_init.len(),
            got: state.len(),
        });
    }
    Machine {
        constants: &p.constants,
        regs,
        state,
        inputs,
        outputs,
        iterations,
    }
    .run(&p.code)
}

/// Stateful runner over a [`FlatProgram`] that keeps registers around so
/// individual signals can be read after each cycle.
#[derive(Debug, Clone)]
pub struct Interpreter {
    program: FlatProgram,
    regs: Vec<f64>,
    state: Vec<f64>,
    outputs: Vec<f64>,
    iterations: Vec<usize>,
}

impl Interpreter {
    pub fn new(program: FlatProgram) -> Self {
        Self {
            regs: vec![0.0; program.registers],
            state: program.state_init.clone(),
            outputs: vec![0.0; program.outputs()],
            iterations: Vec::new(),
            program,
        }
    }

    pub fn program(&self) -> &FlatProgram {
        &self.program
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Newton iterations used by loop `k` in the most recent cycle.
    pub fn last_iterations(&self, k: usize) -> usize {
        self.iterations.get(k).copied().unwrap_or(0)
    }

    /// Value of a block output after the most recent cycle.
    pub fn signal(&self, slot: SlotRef) -> Option<f64> {
        self.program.signals.get(&slot).map(|o| match *o {
            Operand::Reg(r) => self.regs[r],
            Operand::Const(k) => self.program.constants[k],
        })
    }

    pub fn reset(&mut self) {
        self.state.copy_from_slice(&self.program.state_init);
        self.regs.iter_mut().for_each(|r| *r = 0.0);
        self.outputs.iter_mut().for_each(|r| *r = 0.0);
    }

    pub fn step(&mut self, inputs: &[f64]) -> Result<&[f64], RunError> {
        execute(
            &self.program,
            &mut self.regs,
            &mut self.state,
            inputs,
            &mut self.outputs,
            &mut self.iterations,
        )?;
        Ok(&self.outputs)
    }
}

/// Status codes returned by the emitted step function.
pub const STATUS_OK: i32 = 0;
pub const STATUS_DIVERGED: i32 = 1;
pub const STATUS_SINGULAR: i32 = 2;
pub const STATUS_DOMAIN: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CSource {
    pub name: String,
    pub header: String,
    pub source: String,
}

fn c_ident(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with(|c: char| c.is_ascii_digit()) {
        s.insert(0, '_');
    }
    s
}

/// Round-trip literal for a double.
pub fn c_literal(x: f64) -> String {
    if x.is_nan() {
        "(HUGE_VAL - HUGE_VAL)".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "HUGE_VAL".into()
        } else {
            "(-HUGE_VAL)".into()
        }
    } else if x.is_sign_negative() {
        format!("({x:?})")
    } else {
        format!("{x:?}")
    }
}

const POWI_HELPER: &str = "\
static double bf_powi(double a, int n)
{
    int neg = n < 0;
    double r = 1.0;
    for (;;) {
        if (n & 1) r *= a;
        n /= 2;
        if (n == 0) break;
        a *= a;
    }
    return neg ? 1.0 / r : r;
}
";

const NORM_HELPER: &str = "\
static double bf_norm(const double *f, int n)
{
    double m = 0.0, v;
    int i;
    for (i = 0; i < n; ++i) {
        if (f[i] - f[i] != 0.0) return HUGE_VAL;
    }
    for (i = 0; i < n; ++i) {
        v = fabs(f[i]);
        if (v > m) m = v;
    }
    return m;
}
";

fn uses(code: &[Instr], pred: &dyn Fn(&Instr) -> bool) -> bool {
    code.iter().any(|i| {
        pred(i)
            || match i {
                Instr::Newton(l) => uses(&l.residual_code, pred) || uses(&l.jacobian_code, pred),
                _ => false,
            }
    })
}

struct Emitter<'a> {
    p: &'a FlatProgram,
    out: String,
}

impl Emitter<'_> {
    fn op(&self, o: Operand) -> String {
        match o {
            Operand::Reg(r) => format!("r{r}"),
            Operand::Const(k) => c_literal(self.p.constants[k]),
        }
    }

    fn line(&mut self, depth: usize, text: &str) {
        for _ in 0..depth {
            self.out.push_str("    ");
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn code(&mut self, code: &[Instr], depth: usize) {
        for ins in code {
            match ins {
                Instr::Load { dst, src } => {
                    let s = match *src {
                        Source::Const(k) => c_literal(self.p.constants[k]),
                        Source::Input(k) => format!("in[{k}]"),
                        Source::State(k) => format!("st->s[{k}]"),
                    };
                    self.line(depth, &format!("r{dst} = {s};"));
                }
                Instr::Store { dst, src } => {
                    let d = match *dst {
                        Sink::State(k) => format!("st->s[{k}]"),
                        Sink::Output(k) => format!("out[{k}]"),
                    };
                    let s = self.op(*src);
                    self.line(depth, &format!("{d} = {s};"));
                }
                Instr::Add { dst, a, b } => {
                    let t = format!("r{dst} = {} + {};", self.op(*a), self.op(*b));
                    self.line(depth, &t)
                }
                Instr::Mul { dst, a, b } => {
                    let t = format!("r{dst} = {} * {};", self.op(*a), self.op(*b));
                    self.line(depth, &t)
                }
                Instr::Neg { dst, a } => {
                    let t = format!("r{dst} = -{};", self.op(*a));
                    self.line(depth, &t)
                }
                Instr::Div { dst, a, b } => {
                    let (a, b) = (self.op(*a), self.op(*b));
                    self.line(depth, &format!("if ({b} == 0.0) return {STATUS_DOMAIN};"));
                    self.line(depth, &format!("r{dst} = {a} / {b};"));
                }
                Instr::Powi { dst, a, n } => {
                    let a = self.op(*a);
                    if *n < 0 {
                        self.line(depth, &format!("if ({a} == 0.0) return {STATUS_DOMAIN};"));
                    }
                    self.line(depth, &format!("r{dst} = bf_powi({a}, {n});"));
                }
                Instr::Clamp { dst, a, lo, hi } => {
                    let a = self.op(*a);
                    let (lo, hi) = (
                        c_literal(self.p.constants[*lo]),
                        c_literal(self.p.constants[*hi]),
                    );
                    self.line(
                        depth,
                        &format!("r{dst} = {a} < {lo} ? {lo} : ({a} > {hi} ? {hi} : {a});"),
                    );
                }
                Instr::Newton(l) => self.newton(l, depth),
            }
        }
    }

    fn newton(&mut self, l: &NewtonLoop, depth: usize) {
        let n = l.dim();
        self.line(
            depth,
            &format!("/* algebraic loop {}: {n} unknowns */", l.index),
        );
        self.line(depth, "{");
        let d = depth + 1;
        self.line(
            d,
            &format!("double f[{n}], a[{}], sc[{n}], nrm, fac, acc, t, v;", n * n),
        );
        self.line(d, "int it, p, i, j, k;");
        self.line(
            d,
            &format!("for (it = 0; it <= {}; ++it) {{", l.max_iterations),
        );
        let b = d + 1;
        self.code(&l.residual_code, b);
        for (i, r) in l.residuals.iter().enumerate() {
            let s = self.op(*r);
            self.line(b, &format!("f[{i}] = {s};"));
        }
        self.line(b, &format!("nrm = bf_norm(f, {n});"));
        self.line(b, &format!("if (nrm <= {}) break;", c_literal(l.tolerance)));
        self.line(
            b,
            &format!(
                "if (nrm == HUGE_VAL || it == {}) return {STATUS_DIVERGED};",
                l.max_iterations
            ),
        );
        self.code(&l.jacobian_code, b);
        for (i, r) in l.jacobian.iter().enumerate() {
            let s = self.op(*r);
            self.line(b, &format!("a[{i}] = {s};"));
        }
        for i in 0..n {
            self.line(b, &format!("f[{i}] = -f[{i}];"));
        }
        if n <= 4 {
            self.solve_unrolled(n, b);
        } else {
            self.solve_looped(n, b);
        }
        for (i, r) in l.unknowns.iter().enumerate() {
            self.line(b, &format!("r{r} = r{r} + f[{i}];"));
        }
        self.line(d, "}");
        self.line(depth, "}");
    }

    fn solve_unrolled(&mut self, n: usize, b: usize) {
        let tol = c_literal(crate::linalg::PIVOT_RELATIVE_TOLERANCE);
        for i in 0..n {
            self.line(b, &format!("sc[{i}] = 0.0;"));
            for j in 0..n {
                self.line(
                    b,
                    &format!("v = fabs(a[{}]); if (v > sc[{i}]) sc[{i}] = v;", i * n + j),
                );
            }
        }
        for k in 0..n {
            self.line(b, &format!("p = {k};"));
            for i in k + 1..n {
                self.line(
                    b,
                    &format!(
                        "if (fabs(a[{}]) > fabs(a[p * {n} + {k}])) p = {i};",
                        i * n + k
                    ),
                );
            }
            if k + 1 < n {
                self.line(b, &format!("if (p != {k}) {{"));
                for j in 0..n {
                    self.line(
                        b + 1,
                        &format!(
                            "t = a[{}]; a[{}] = a[p * {n} + {j}]; a[p * {n} + {j}] = t;",
                            k * n + j,
                            k * n + j
                        ),
                    );
                }
                self.line(b + 1, &format!("t = f[{k}]; f[{k}] = f[p]; f[p] = t;"));
                self.line(b + 1, &format!("t = sc[{k}]; sc[{k}] = sc[p]; sc[p] = t;"));
                self.line(b, "}");
            }
            let kk = k * n + k;
            self.line(
                b,
                &format!("if (!(fabs(a[{kk}]) > {tol} * sc[{k}])) return {STATUS_SINGULAR};"),
            );
            for i in k + 1..n {
                self.line(b, &format!("fac = a[{}] / a[{kk}];", i * n + k));
                for j in k..n {
                    let (ij, kj) = (i * n + j, k * n + j);
                    self.line(b, &format!("a[{ij}] = a[{ij}] - fac * a[{kj}];"));
                }
                self.line(b, &format!("f[{i}] = f[{i}] - fac * f[{k}];"));
            }
        }
        for i in (0..n).rev() {
            self.line(b, &format!("acc = f[{i}];"));
            for j in i + 1..n {
                self.line(b, &format!("acc = acc - a[{}] * f[{j}];", i * n + j));
            }
            self.line(b, &format!("f[{i}] = acc / a[{}];", i * n + i));
        }
    }

    fn solve_looped(&mut self, n: usize, b: usize) {
        let tol = c_literal(crate::linalg::PIVOT_RELATIVE_TOLERANCE);
        let text = format!(
            "\
for (i = 0; i < {n}; ++i) {{
    sc[i] = 0.0;
    for (j = 0; j < {n}; ++j) {{
        v = fabs(a[i * {n} + j]);
        if (v > sc[i]) sc[i] = v;
    }}
}}
for (k = 0; k < {n}; ++k) {{
    p = k;
    for (i = k + 1; i < {n}; ++i) {{
        if (fabs(a[i * {n} + k]) > fabs(a[p * {n} + k])) p = i;
    }}
    if (p != k) {{
        for (j = 0; j < {n}; ++j) {{
            t = a[k * {n} + j]; a[k * {n} + j] = a[p * {n} + j]; a[p * {n} + j] = t;
        }}
        t = f[k]; f[k] = f[p]; f[p] = t;
        t = sc[k]; sc[k] = sc[p]; sc[p] = t;
    }}
    if (!(fabs(a[k * {n} + k]) > {tol} * sc[k])) return {STATUS_SINGULAR};
    for (i = k + 1; i < {n}; ++i) {{
        fac = a[i * {n} + k] / a[k * {n} + k];
        for (j = k; j < {n}; ++j) {{
            a[i * {n} + j] = a[i * {n} + j] - fac * a[k * {n} + j];
        }}
        f[i] = f[i] - fac * f[k];
    }}
}}
for (i = {n} - 1; i >= 0; --i) {{
    acc = f[i];
    for (j = i + 1; j < {n}; ++j) {{
        acc = acc - a[i * {n} + j] * f[j];
    }}
    f[i] = acc / a[i * {n} + i];
}}"
        );
        for l in text.lines() {
            self.line(b, l);
        }
    }
}

/// Prints `p` as a C89 translation unit: a state record, an init function
/// and a step function returning one of the `STATUS_*` codes.
pub fn emit_c(p: &FlatProgram, name: &str) -> CSource {
    let id = c_ident(name);
    let upper = id.to_ascii_uppercase();
    let nstate = p.state_init.len().max(1);

    let mut h = String::new();
    let _ = writeln!(h, "#ifndef {upper}_H");
    let _ = writeln!(h, "#define {upper}_H\n");
    let _ = writeln!(h, "#define {upper}_INPUTS {}", p.inputs());
    let _ = writeln!(h, "#define {upper}_OUTPUTS {}", p.outputs());
    let _ = writeln!(h, "#define {upper}_STATES {}\n", p.state_init.len());
    let _ = writeln!(
        h,
        "typedef struct {{\n    double s[{nstate}];\n}} {id}_state;\n"
    );
    let _ = writeln!(h, "void {id}_init({id}_state *st);");
    let _ = writeln!(
        h,
        "int {id}_step({id}_state *st, const double *in, double *out);\n"
    );
    let _ = writeln!(h, "#endif");

    let mut e = Emitter {
        p,
        out: String::new(),
    };
    let _ = writeln!(e.out, "#include <math.h>\n#include \"{id}.h\"\n");
    for (k, l) in p.input_labels.iter().enumerate() {
        let _ = writeln!(e.out, "/* in[{k}]: {l} */");
    }
    for (k, l) in p.output_labels.iter().enumerate() {
        let _ = writeln!(e.out, "/* out[{k}]: {l} */");
    }
    for (k, l) in p.state_labels.iter().enumerate() {
        let _ = writeln!(e.out, "/* s[{k}]: {l} */");
    }
    e.out.push('\n');
    if uses(&p.code, &|i| matches!(i, Instr::Powi { .. })) {
        e.out.push_str(POWI_HELPER);
        e.out.push('\n');
    }
    if p.newton_loops().next().is_some() {
        e.out.push_str(NORM_HELPER);
        e.out.push('\n');
    }
    let _ = writeln!(e.out, "void {id}_init({id}_state *st)\n{{");
    if p.state_init.is_empty() {
        e.line(1, "st->s[0] = 0.0;");
    }
    for (k, x) in p.state_init.iter().enumerate() {
        e.line(1, &format!("st->s[{k}] = {};", c_literal(*x)));
    }
    e.out.push_str("}\n\n");
    let _ = writeln!(
        e.out,
        "int {id}_step({id}_state *st, const double *in, double *out)\n{{"
    );
    let regs: Vec<String> = (0..p.registers).map(|r| format!("r{r}")).collect();
    for chunk in regs.chunks(8) {
        e.line(1, &format!("double {};", chunk.join(", ")));
    }
    e.line(1, "(void)st;");
    e.line(1, "(void)in;");
    e.line(1, "(void)out;");
    e.code(&p.code, 1);
    e.line(1, &format!("return {STATUS_OK};"));
    e.out.push_str("}\n");

    CSource {
        name: id,
        header: h,
        source: e.out,
    }
}

/// Jacobians of `x' = f(x, u)` around a runtime point.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationResult {
    /// `a[i][j] = ∂f_i/∂x_j`.
    pub a: Vec<Vec<Expr>>,
    /// `b[i][j] = ∂f_i/∂u_j`.
    pub b: Vec<Vec<Expr>>,
    pub x: Vec<Symbol>,
    pub u: Vec<Symbol>,
    /// Free symbols of `f` that are neither states nor inputs.
    pub params: Vec<Symbol>,
}

impl LinearizationResult {
    /// Evaluates `(A, B)` at `(x, u)` with `params` bound from `table`.
    pub fn evaluate(
        &self,
        x: &[f64],
        u: &[f64],
        table: &SymbolTable<f64>,
    ) -> Result<(Matrix<f64>, Matrix<f64>), ExprError> {
        let mut t = table.clone();
        for (s, v) in self.x.iter().zip(x).chain(self.u.iter().zip(u)) {
            t.bind(s.clone(), *v);
        }
        let grid = |g: &[Vec<Expr>], cols: usize| -> Result<Matrix<f64>, ExprError> {
            let mut data = Vec::with_capacity(g.len() * cols);
            for row in g {
                for e in row {
                    data.push(e.evaluate(&t)?);
                }
            }
            Ok(Matrix::from_vec(g.len(), cols, data))
        };
        Ok((grid(&self.a, self.x.len())?, grid(&self.b, self.u.len())?))
    }
}

pub fn linearize(f: &[Expr], x: &[Symbol], u: &[Symbol]) -> LinearizationResult {
    let grid = |vars: &[Symbol]| -> Vec<Vec<Expr>> {
        f.iter()
            .map(|fi| {
                vars.iter()
                    .map(|v| simplify(&differentiate(fi, v)))
                    .collect()
            })
            .collect()
    };
    let mut params: Vec<Symbol> = f
        .iter()
        .flat_map(|e| e.free_symbols())
        .filter(|s| !x.contains(s) && !u.contains(s))
        .collect();
    params.sort();
    params.dedup();
    LinearizationResult {
        a: grid(x),
        b: grid(u),
        x: x.to_vec(),
        u: u.to_vec(),
        params,
    }
}

fn c_expr(e: &Expr, var: &dyn Fn(&Symbol) -> String) -> String {
    match e.node() {
        ExprNode::Constant(c) => c_literal(*c),
        ExprNode::Variable(s) => var(s),
        ExprNode::Add(ops) | ExprNode::Mul(ops) => {
            let sep = if matches!(e.node(), ExprNode::Add(_)) {
                " + "
            } else {
                " * "
            };
            let parts: Vec<String> = ops.iter().map(|o| c_expr(o, var)).collect();
            format!("({})", parts.join(sep))
        }
        ExprNode::Neg(a) => format!("(-{})", c_expr(a, var)),
        ExprNode::Div(a, b) => format!("({} / {})", c_expr(a, var), c_expr(b, var)),
        ExprNode::Pow(a, n) => format!("bf_powi({}, {n})", c_expr(a, var)),
    }
}

/// Linearizes `f` and prints a C function
/// `void name(const double *x, const double *u, const double *p, double *A, double *B)`
/// filling row-major `A` and `B`; `p` follows `LinearizationResult::params`.
pub fn emit_linearization(
    f: &[Expr],
    x: &[Symbol],
    u: &[Symbol],
    name: &str,
) -> (LinearizationResult, String) {
    let lin = linearize(f, x, u);
    let id = c_ident(name);
    let var = |s: &Symbol| -> String {
        if let Some(i) = lin.x.iter().position(|v| v == s) {
            format!("x[{i}]")
        } else if let Some(i) = lin.u.iter().position(|v| v == s) {
            format!("u[{i}]")
        } else {
            let i = lin
                .params
                .iter()
                .position(|v| v == s)
                .expect("collected parameter");
            format!("p[{i}]")
        }
    };
    let mut src = String::from("#include <math.h>\n\n");
    if lin.a.iter().chain(&lin.b).flatten().any(has_pow) {
        src.push_str(POWI_HELPER);
        src.push('\n');
    }
    let _ = writeln!(src, "/* x: {} */", join(&lin.x));
    let _ = writeln!(src, "/* u: {} */", join(&lin.u));
    let _ = writeln!(src, "/* p: {} */", join(&lin.params));
    let _ = writeln!(
        src,
        "void {id}(const double *x, const double *u, const double *p, double *A, double *B)\n{{"
    );
    src.push_str("    (void)x;\n    (void)u;\n    (void)p;\n");
    for (name, g, cols) in [("A", &lin.a, lin.x.len()), ("B", &lin.b, lin.u.len())] {
        for (i, row) in g.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                let _ = writeln!(src, "    {name}[{}] = {};", i * cols + j, c_expr(e, &var));
            }
        }
    }
    src.push_str("}\n");
    (lin, src)
}

fn has_pow(e: &Expr) -> bool {
    match e.node() {
        ExprNode::Constant(_) | ExprNode::Variable(_) => false,
        ExprNode::Add(ops) | ExprNode::Mul(ops) => ops.iter().any(has_pow),
        ExprNode::Neg(a) => has_pow(a),
        ExprNode::Div(a, b) => has_pow(a) || has_pow(b),
        ExprNode::Pow(..) => true,
    }
}

fn join(v: &[Symbol]) -> String {
    v.iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
