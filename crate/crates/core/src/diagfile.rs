//! Line-oriented diagram files.
//!
//! ```text
//! # comment
//! block c Constant value=5
//! block g Gain gain=0.5
//! connect c.out0 g.in0
//! param g gain=0.25
//! ```
//!
//! Blocks must be declared before they are connected or parameterized.

use std::fmt;

use thiserror::Error;

use crate::graph::{BlockError, Diagram, GraphError, PortKind, SlotRef};
use crate::stdblocks::{BlockRegistry, Params};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown block kind {0:?}")]
    UnknownKind(String),
    #[error("unknown block {0:?}")]
    UnknownBlock(String),
    #[error(transparent)]
    Param(#[from] BlockError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A parse failure at a 1-based line number.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.kind)
    }
}

pub fn parse(text: &str) -> Result<Diagram, ParseError> {
    parse_with(text, &BlockRegistry::standard())
}

pub fn parse_with(text: &str, registry: &BlockRegistry) -> Result<Diagram, ParseError> {
    let mut d = Diagram::new();
    for (n, raw) in text.lines().enumerate() {
        let at = |kind: ParseErrorKind| ParseError { line: n + 1, kind };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words[0] {
            "block" => {
                let [_, name, kind, rest @ ..] = words.as_slice() else {
                    return Err(at(ParseErrorKind::Syntax(
                        "expected `block <name> <Kind> key=value...`".into(),
                    )));
                };
                if name.contains('.') {
                    return Err(at(ParseErrorKind::Syntax(format!(
                        "block name {name:?} contains '.'"
                    ))));
                }
                let params = Params::parse(rest.iter().copied()).map_err(|e| at(e.into()))?;
                let block = registry
                    .create(kind, params)
                    .ok_or_else(|| at(ParseErrorKind::UnknownKind(kind.to_string())))?
                    .map_err(|e| at(e.into()))?;
                d.add_named_boxed(name, block).map_err(|e| at(e.into()))?;
            }
            "connect" => {
                let [_, src, dst] = words.as_slice() else {
                    return Err(at(ParseErrorKind::Syntax(
                        "expected `connect <block>.<slot> <block>.<slot>`".into(),
                    )));
                };
                let src = slot(&d, src).map_err(at)?;
                let dst = slot(&d, dst).map_err(at)?;
                d.connect(src, dst).map_err(|e| at(e.into()))?;
            }
            "param" => {
                let [_, name, rest @ ..] = words.as_slice() else {
                    return Err(at(ParseErrorKind::Syntax(
                        "expected `param <name> key=value...`".into(),
                    )));
                };
                let id = d
                    .find(name)
                    .ok_or_else(|| at(ParseErrorKind::UnknownBlock(name.to_string())))?;
                let params = Params::parse(rest.iter().copied()).map_err(|e| at(e.into()))?;
                for (k, v) in params.into_items() {
                    d.with_block_mut(id, |b| b.set_param(&k, &v))
                        .expect("block exists")
                        .map_err(|e| at(e.into()))?;
                }
            }
            other => {
                return Err(at(ParseErrorKind::Syntax(format!(
                    "unknown directive {other:?}"
                ))))
            }
        }
    }
    Ok(d)
}

fn slot(d: &Diagram, text: &str) -> Result<SlotRef, ParseErrorKind> {
    let (name, port) = text
        .rsplit_once('.')
        .ok_or_else(|| ParseErrorKind::Syntax(format!("expected <block>.<slot>, got {text:?}")))?;
    let id = d
        .find(name)
        .ok_or_else(|| ParseErrorKind::UnknownBlock(name.to_string()))?;
    let (kind, index) = [
        ("out", PortKind::Output),
        ("in", PortKind::Input),
        ("param", PortKind::Parameter),
    ]
    .iter()
    .find_map(|(prefix, kind)| port.strip_prefix(prefix).map(|i| (*kind, i)))
    .ok_or_else(|| ParseErrorKind::Syntax(format!("bad slot {port:?}")))?;
    let index = index
        .parse()
        .map_err(|_| ParseErrorKind::Syntax(format!("bad slot index in {port:?}")))?;
    Ok(SlotRef::new(id, kind, index))
}

/// Inverse of [`parse`] for diagrams built from registered kinds.
pub fn dump(d: &Diagram) -> String {
    d.dump_structure()
}
