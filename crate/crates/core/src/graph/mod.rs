//! Diagram data model: blocks, typed ports, connections, validation,
//! execution order, algebraic loop detection and cycle execution.

mod block;
mod dump;
mod exec;
mod schedule;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

pub use block::{
    check_inputs, signal_symbol, Block, BlockError, BlockTraits, Lowering, SymCtx, Value, ValueType,
};
pub use exec::{ExecError, Executor};
pub(crate) use schedule::tarjan as tarjan_components;
pub use schedule::{
    detect_algebraic_loops, resolve_execution_order, ExecutionSchedule, LoopCluster, ScheduleItem,
    ScheduleOptions,
};

/// Implements the `Any`/clone plumbing of [`Block`] for a `Clone` type.
#[macro_export]
macro_rules! block_plumbing {
    () => {
        fn box_clone(&self) -> Box<dyn $crate::graph::Block> {
            Box::new(self.clone())
        }

        fn as_any(&self) -> &dyn std::any::Any {
            self
        }

        fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
            self
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub u32);

impl BlockId {
    pub fn o(self, slot: usize) -> SlotRef {
        SlotRef::new(self, PortKind::Output, slot)
    }

    pub fn i(self, slot: usize) -> SlotRef {
        SlotRef::new(self, PortKind::Input, slot)
    }

    pub fn p(self, slot: usize) -> SlotRef {
        SlotRef::new(self, PortKind::Parameter, slot)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PortKind {
    Input,
    Output,
    Parameter,
}

impl PortKind {
    fn prefix(self) -> &'static str {
        match self {
            PortKind::Input => "in",
            PortKind::Output => "out",
            PortKind::Parameter => "param",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotRef {
    pub block: BlockId,
    pub kind: PortKind,
    pub index: usize,
}

impl SlotRef {
    pub fn new(block: BlockId, kind: PortKind, index: usize) -> Self {
        Self { block, kind, index }
    }
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}{}", self.block, self.kind.prefix(), self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignalEdge {
    pub source: SlotRef,
    pub sink: SlotRef,
    pub value_type: ValueType,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("illegal port pairing {from} -> {to}")]
    IllegalPortPairing { from: SlotRef, to: SlotRef },
    #[error("{sink} already driven by {existing}")]
    MultipleDrivers { sink: SlotRef, existing: SlotRef },
    #[error("type mismatch {from} ({from_type}) -> {to} ({to_type})")]
    TypeMismatch {
        from: SlotRef,
        to: SlotRef,
        from_type: ValueType,
        to_type: ValueType,
    },
    #[error("no such slot {0}")]
    NoSuchSlot(SlotRef),
    #[error("no such block {0}")]
    NoSuchBlock(BlockId),
    #[error("duplicate block name {0:?}")]
    DuplicateName(String),
    #[error("unresolvable direct-feedthrough cycle through {0:?}")]
    UnresolvableCycle(Vec<BlockId>),
    #[error("diagram is not executable:\n{0}")]
    Invalid(ValidationReport),
    #[error("loop through {blocks:?} cannot be solved: {source}")]
    Loop {
        blocks: Vec<BlockId>,
        source: crate::loopsolve::LoopError,
    },
}

pub(crate) struct BlockEntry {
    pub id: BlockId,
    pub name: String,
    pub block: Box<dyn Block>,
    pub traits: BlockTraits,
}

impl Clone for BlockEntry {
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            name: self.name.clone(),
            block: self.block.box_clone(),
            traits: self.traits.clone(),
        }
    }
}

/// A block diagram. Ids are assigned sequentially from 1.
#[derive(Clone, Default)]
pub struct Diagram {
    blocks: Vec<BlockEntry>,
    edges: Vec<SignalEdge>,
}

impl Diagram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a block named `b<id>`.
    pub fn add(&mut self, block: impl Block) -> BlockId {
        self.add_boxed(Box::new(block))
    }

    pub fn add_boxed(&mut self, block: Box<dyn Block>) -> BlockId {
        let id = self.next_id();
        let name = format!("b{}", id.0);
        self.push(id, name, block);
        id
    }

    pub fn add_named(&mut self, name: &str, block: impl Block) -> Result<BlockId, GraphError> {
        self.add_named_boxed(name, Box::new(block))
    }

    pub fn add_named_boxed(
        &mut self,
        name: &str,
        block: Box<dyn Block>,
    ) -> Result<BlockId, GraphError> {
        if self.find(name).is_some() {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let id = self.next_id();
        self.push(id, name.to_string(), block);
        Ok(id)
    }

    fn next_id(&self) -> BlockId {
        BlockId(self.blocks.last().map_or(1, |b| b.id.0 + 1))
    }

    fn push(&mut self, id: BlockId, name: String, block: Box<dyn Block>) {
        let traits = block.traits();
        self.blocks.push(BlockEntry {
            id,
            name,
            block,
            traits,
        });
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks.iter().map(|b| b.id)
    }

    pub fn edges(&self) -> &[SignalEdge] {
        &self.edges
    }

    pub(crate) fn entries(&self) -> &[BlockEntry] {
        &self.blocks
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [BlockEntry] {
        &mut self.blocks
    }

    pub(crate) fn index_of(&self, id: BlockId) -> Option<usize> {
        self.blocks.binary_search_by_key(&id, |b| b.id).ok()
    }

    fn entry(&self, id: BlockId) -> Option<&BlockEntry> {
        self.index_of(id).map(|i| &self.blocks[i])
    }

    pub fn block(&self, id: BlockId) -> Option<&dyn Block> {
        self.entry(id).map(|e| e.block.as_ref())
    }

    /// Mutable access to a block. Traits are re-read afterwards, so a
    /// parameter change that alters port types is picked up.
    pub fn with_block_mut<R>(
        &mut self,
        id: BlockId,
        f: impl FnOnce(&mut dyn Block) -> R,
    ) -> Option<R> {
        let i = self.index_of(id)?;
        let entry = &mut self.blocks[i];
        let r = f(entry.block.as_mut());
        entry.traits = entry.block.traits();
        Some(r)
    }

    pub fn downcast<T: Block>(&self, id: BlockId) -> Option<&T> {
        self.block(id)?.as_any().downcast_ref()
    }

    pub fn traits(&self, id: BlockId) -> Option<&BlockTraits> {
        self.entry(id).map(|e| &e.traits)
    }

    pub fn name(&self, id: BlockId) -> Option<&str> {
        self.entry(id).map(|e| e.name.as_str())
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().find(|b| b.name == name).map(|b| b.id)
    }

    /// Human-readable slot label, `name.outK`.
    pub fn slot_label(&self, s: SlotRef) -> String {
        match self.name(s.block) {
            Some(n) => format!("{n}.{}{}", s.kind.prefix(), s.index),
            None => s.to_string(),
        }
    }

    fn slot_type(&self, s: SlotRef) -> Result<ValueType, GraphError> {
        let t = self.traits(s.block).ok_or(GraphError::NoSuchSlot(s))?;
        let ports = match s.kind {
            PortKind::Input => &t.inputs,
            PortKind::Output => &t.outputs,
            PortKind::Parameter => {
                let n = self.block(s.block).map_or(0, |b| b.param_values().len());
                return if s.index < n {
                    Ok(ValueType::Scalar)
                } else {
                    Err(GraphError::NoSuchSlot(s))
                };
            }
        };
        ports.get(s.index).copied().ok_or(GraphError::NoSuchSlot(s))
    }

    /// Connects an output slot to an input slot.
    pub fn connect(&mut self, source: SlotRef, sink: SlotRef) -> Result<(), GraphError> {
        let source_type = self.slot_type(source)?;
        let sink_type = self.slot_type(sink)?;
        if source.kind != PortKind::Output || sink.kind != PortKind::Input {
            return Err(GraphError::IllegalPortPairing {
                from: source,
                to: sink,
            });
        }
        if let Some(e) = self.driver_edge(sink) {
            return Err(GraphError::MultipleDrivers {
                sink,
                existing: e.source,
            });
        }
        if source_type != sink_type {
            return Err(GraphError::TypeMismatch {
                from: source,
                to: sink,
                from_type: source_type,
                to_type: sink_type,
            });
        }
        self.edges.push(SignalEdge {
            source,
            sink,
            value_type: source_type,
        });
        Ok(())
    }

    fn driver_edge(&self, sink: SlotRef) -> Option<&SignalEdge> {
        self.edges.iter().find(|e| e.sink == sink)
    }

    pub fn driver(&self, sink: SlotRef) -> Option<SlotRef> {
        self.driver_edge(sink).map(|e| e.source)
    }

    /// Output slots with no consumer, in block and slot order.
    pub fn unconnected_outputs(&self) -> Vec<SlotRef> {
        let used: HashSet<SlotRef> = self.edges.iter().map(|e| e.source).collect();
        let mut v = Vec::new();
        for b in &self.blocks {
            for k in 0..b.traits.outputs.len() {
                let s = b.id.o(k);
                if !used.contains(&s) {
                    v.push(s);
                }
            }
        }
        v
    }

    /// Lists every consistency violation; an empty report means the diagram
    /// can be executed.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for e in &self.edges {
            for s in [e.source, e.sink] {
                if self.slot_type(s).is_err() {
                    violations.push(Violation::DanglingSlot(s));
                }
            }
            if let (Ok(a), Ok(b)) = (self.slot_type(e.source), self.slot_type(e.sink)) {
                if a != b {
                    violations.push(Violation::TypeMismatch {
                        source: e.source,
                        sink: e.sink,
                        source_type: a,
                        sink_type: b,
                    });
                }
            }
        }
        let mut drivers: BTreeMap<SlotRef, usize> = BTreeMap::new();
        for e in &self.edges {
            *drivers.entry(e.sink).or_default() += 1;
        }
        for (&sink, &n) in &drivers {
            if n > 1 {
                violations.push(Violation::MultipleDrivers(sink));
            }
        }
        for b in &self.blocks {
            for k in 0..b.traits.inputs.len() {
                let s = b.id.i(k);
                if !drivers.contains_key(&s) {
                    violations.push(Violation::UnboundInput(s));
                }
            }
        }
        let labels = violations.iter().map(|v| v.describe(self)).collect();
        ValidationReport { violations, labels }
    }
}

impl fmt::Debug for Diagram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump_structure())
    }
}

/// Structural equality: same ids, names, kinds, parameters and edges.
impl PartialEq for Diagram {
    fn eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.id == b.id
                    && a.name == b.name
                    && a.block.kind() == b.block.kind()
                    && a.block.params() == b.block.params()
                    && a.traits == b.traits
            })
            && self.edges == other.edges
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnboundInput(SlotRef),
    DanglingSlot(SlotRef),
    MultipleDrivers(SlotRef),
    TypeMismatch {
        source: SlotRef,
        sink: SlotRef,
        source_type: ValueType,
        sink_type: ValueType,
    },
}

impl Violation {
    fn describe(&self, d: &Diagram) -> String {
        match self {
            Violation::UnboundInput(s) => format!("unbound input {}", d.slot_label(*s)),
            Violation::DanglingSlot(s) => format!("dangling slot {}", d.slot_label(*s)),
            Violation::MultipleDrivers(s) => format!("multiple drivers on {}", d.slot_label(*s)),
            Violation::TypeMismatch {
                source,
                sink,
                source_type,
                sink_type,
            } => format!(
                "type mismatch {} ({source_type}) -> {} ({sink_type})",
                d.slot_label(*source),
                d.slot_label(*sink)
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    labels: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> &[String] {
        &self.labels
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.labels {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}
