use thiserror::Error;

use crate::expr::SymbolTable;
use crate::loopsolve::{solve_loop, InitialGuess, LoopError, LoopSystem, NewtonConfig};

use super::{
    resolve_execution_order, Block, BlockError, BlockId, Diagram, ExecutionSchedule, GraphError,
    ScheduleItem, ScheduleOptions, SlotRef, Value,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("block {name} ({block}): {source}")]
    Block {
        block: BlockId,
        name: String,
        source: BlockError,
    },
    #[error("algebraic loop {blocks:?}: {source}")]
    Loop {
        blocks: Vec<BlockId>,
        source: LoopError,
    },
}

/// Runs a validated diagram cycle by cycle.
///
/// Each cycle evaluates outputs in schedule order (loop clusters are solved
/// by Newton iteration), then commits every block's state from the inputs
/// observed in that cycle.
#[derive(Clone)]
pub struct Executor {
    diagram: Diagram,
    schedule: ExecutionSchedule,
    loops: Vec<LoopSystem>,
    warm: Vec<Vec<f64>>,
    iterations: Vec<usize>,
    values: Vec<Vec<Value>>,
    drivers: Vec<Vec<(usize, usize)>>,
    config: NewtonConfig,
    cycle: u64,
}

impl Executor {
    pub fn new(diagram: Diagram) -> Result<Self, GraphError> {
        Self::with_config(diagram, NewtonConfig::default())
    }

    pub fn with_config(diagram: Diagram, config: NewtonConfig) -> Result<Self, GraphError> {
        let report = diagram.validate();
        if !report.is_empty() {
            return Err(GraphError::Invalid(report));
        }
        let schedule = resolve_execution_order(&diagram, ScheduleOptions::default())?;
        let loops = schedule
            .clusters
            .iter()
            .map(|c| {
                LoopSystem::extract(c, &diagram, config).map_err(|source| GraphError::Loop {
                    blocks: c.members.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let drivers = diagram
            .entries()
            .iter()
            .map(|e| {
                (0..e.traits.inputs.len())
                    .map(|k| {
                        let src = diagram.driver(e.id.i(k)).expect("validated");
                        (diagram.index_of(src.block).expect("validated"), src.index)
                    })
                    .collect()
            })
            .collect();
        let values = diagram
            .entries()
            .iter()
            .map(|e| e.traits.outputs.iter().map(|&t| Value::zero(t)).collect())
            .collect();
        let warm = loops.iter().map(|l| vec![0.0; l.system.dim()]).collect();
        let iterations = vec![0; loops.len()];
        Ok(Self {
            diagram,
            schedule,
            loops,
            warm,
            iterations,
            values,
            drivers,
            config,
            cycle: 0,
        })
    }

    pub fn diagram(&self) -> &Diagram {
        &self.diagram
    }

    pub fn schedule(&self) -> &ExecutionSchedule {
        &self.schedule
    }

    pub fn loops(&self) -> &[LoopSystem] {
        &self.loops
    }

    pub fn config(&self) -> NewtonConfig {
        self.config
    }

    /// Completed cycles since construction or the last reset.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Newton iterations used by loop `k` in the most recent cycle.
    pub fn last_iterations(&self, k: usize) -> usize {
        self.iterations[k]
    }

    pub fn value(&self, slot: SlotRef) -> Option<&Value> {
        let i = self.diagram.index_of(slot.block)?;
        self.values[i].get(slot.index)
    }

    pub fn scalar(&self, slot: SlotRef) -> Option<f64> {
        self.value(slot)?.as_scalar()
    }

    pub fn block<T: Block>(&self, id: BlockId) -> Option<&T> {
        self.diagram.downcast(id)
    }

    pub fn set_input(&mut self, id: BlockId, value: Value) -> Result<(), ExecError> {
        let i = self.diagram.index_of(id).ok_or_else(|| ExecError::Block {
            block: id,
            name: String::new(),
            source: BlockError::Eval("no such block".into()),
        })?;
        let e = &mut self.diagram.entries_mut()[i];
        e.block
            .set_external(value)
            .map_err(|source| ExecError::Block {
                block: id,
                name: e.name.clone(),
                source,
            })
    }

    /// Reseeds every stochastic block; each block gets a stream derived from
    /// `seed` and its id.
    pub fn seed(&mut self, seed: u64) {
        for e in self.diagram.entries_mut() {
            e.block
                .seed(seed ^ (e.id.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
    }

    pub fn reset(&mut self) {
        for e in self.diagram.entries_mut() {
            e.block.reset();
        }
        for (vals, e) in self.values.iter_mut().zip(self.diagram.entries()) {
            for (v, &t) in vals.iter_mut().zip(&e.traits.outputs) {
                *v = Value::zero(t);
            }
        }
        for w in &mut self.warm {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        self.cycle = 0;
    }

    pub fn run(&mut self, cycles: usize) -> Result<(), ExecError> {
        for _ in 0..cycles {
            self.step()?;
        }
        Ok(())
    }

    /// Executes one cycle.
    pub fn step(&mut self) -> Result<(), ExecError> {
        for item in 0..self.schedule.items.len() {
            match self.schedule.items[item] {
                ScheduleItem::Block(id) => {
                    let i = self.diagram.index_of(id).expect("scheduled block");
                    self.eval(i)?;
                }
                ScheduleItem::Loop(k) => self.solve(k)?,
            }
        }
        for i in 0..self.values.len() {
            let inputs = self.gather(i);
            let refs: Vec<&Value> = inputs.iter().collect();
            let e = &mut self.diagram.entries_mut()[i];
            e.block.update(&refs).map_err(|source| ExecError::Block {
                block: e.id,
                name: e.name.clone(),
                source,
            })?;
        }
        self.cycle += 1;
        Ok(())
    }

    fn gather(&self, i: usize) -> Vec<Value> {
        self.drivers[i]
            .iter()
            .map(|&(b, s)| self.values[b][s].clone())
            .collect()
    }

    fn eval(&mut self, i: usize) -> Result<(), ExecError> {
        let inputs = self.gather(i);
        let refs: Vec<&Value> = inputs.iter().collect();
        let e = &self.diagram.entries()[i];
        e.block
            .output(&refs, &mut self.values[i])
            .map_err(|source| ExecError::Block {
                block: e.id,
                name: e.name.clone(),
                source,
            })
    }

    fn solve(&mut self, k: usize) -> Result<(), ExecError> {
        let ls = &self.loops[k];
        let loop_err = |source| ExecError::Loop {
            blocks: ls.members.clone(),
            source,
        };
        let mut table = SymbolTable::new();
        for (sym, slot) in &ls.externals {
            let v = self
                .value(*slot)
                .and_then(Value::as_scalar)
                .ok_or_else(|| {
                    loop_err(LoopError::Eval(crate::expr::ExprError::UnboundSymbol(
                        sym.clone(),
                    )))
                })?;
            table.bind(sym.clone(), v);
        }
        ls.bind_blocks(&self.diagram, &mut table);
        let x0 = match self.config.initial_guess {
            InitialGuess::Zeros => vec![0.0; ls.system.dim()],
            InitialGuess::WarmStart => self.warm[k].clone(),
        };
        let sol = solve_loop(&ls.system, &table, &x0).map_err(loop_err)?;

        let unknown_slots = ls.unknown_slots.clone();
        let order = ls.order.clone();
        let torn = ls.torn.clone();
        for (slot, &x) in unknown_slots.iter().zip(&sol.x) {
            let i = self.diagram.index_of(slot.block).expect("member");
            self.values[i][slot.index] = Value::Scalar(x);
        }
        for b in order {
            let i = self.diagram.index_of(b).expect("member");
            self.eval(i)?;
        }
        for b in torn {
            // Outputs of torn blocks that are not unknowns still need values.
            let i = self.diagram.index_of(b).expect("member");
            let keep = self.values[i].clone();
            self.eval(i)?;
            for slot in unknown_slots.iter().filter(|s| s.block == b) {
                self.values[i][slot.index] = keep[slot.index].clone();
            }
        }
        self.warm[k] = sol.x;
        self.iterations[k] = sol.iterations;
        Ok(())
    }
}
