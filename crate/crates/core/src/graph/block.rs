use std::any::Any;
use std::fmt;

use thiserror::Error;

use crate::expr::{Expr, Symbol};
use crate::imaging::ImageBuffer;
use crate::linalg::Matrix;

use super::BlockId;

/// Semantic type tag carried by every port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueType {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
    Image(usize, usize),
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueType::Scalar => write!(f, "scalar"),
            ValueType::Vector(n) => write!(f, "vector({n})"),
            ValueType::Matrix(r, c) => write!(f, "matrix({r},{c})"),
            ValueType::Image(r, c) => write!(f, "image({r},{c})"),
        }
    }
}

impl std::str::FromStr for ValueType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad type {s:?}");
        if s == "scalar" {
            return Ok(ValueType::Scalar);
        }
        let (head, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let dims: Vec<usize> = args
            .split(',')
            .map(|a| a.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match (head, dims.as_slice()) {
            ("vector", [n]) => Ok(ValueType::Vector(*n)),
            ("matrix", [r, c]) => Ok(ValueType::Matrix(*r, *c)),
            ("image", [r, c]) => Ok(ValueType::Image(*r, *c)),
            _ => Err(bad()),
        }
    }
}

/// A signal value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Matrix<f64>),
    Image(ImageBuffer<f64>),
}

impl Value {
    pub fn zero(ty: ValueType) -> Self {
        match ty {
            ValueType::Scalar => Value::Scalar(0.0),
            ValueType::Vector(n) => Value::Vector(vec![0.0; n]),
            ValueType::Matrix(r, c) => Value::Matrix(Matrix::zeros(r, c)),
            ValueType::Image(r, c) => Value::Image(ImageBuffer::zeros(r.max(1), c.max(1))),
        }
    }

    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Scalar(_) => ValueType::Scalar,
            Value::Vector(v) => ValueType::Vector(v.len()),
            Value::Matrix(m) => ValueType::Matrix(m.rows(), m.cols()),
            Value::Image(i) => ValueType::Image(i.rows(), i.cols()),
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageBuffer<f64>> {
        match self {
            Value::Image(i) => Some(i),
            _ => None,
        }
    }

    /// Flattened numeric content, row-major for matrices and images.
    pub fn components(&self) -> Vec<f64> {
        match self {
            Value::Scalar(x) => vec![*x],
            Value::Vector(v) => v.clone(),
            Value::Matrix(m) => m.as_slice().to_vec(),
            Value::Image(i) => i.as_slice().to_vec(),
        }
    }

    /// Rebuilds a value of type `ty` from flattened components.
    pub fn from_components(ty: ValueType, c: &[f64]) -> Option<Self> {
        match ty {
            ValueType::Scalar if c.len() == 1 => Some(Value::Scalar(c[0])),
            ValueType::Vector(n) if c.len() == n => Some(Value::Vector(c.to_vec())),
            ValueType::Matrix(r, k) if c.len() == r * k => {
                Some(Value::Matrix(Matrix::from_vec(r, k, c.to_vec())))
            }
            ValueType::Image(r, k) if c.len() == r * k => {
                ImageBuffer::new(r, k, c.to_vec()).ok().map(Value::Image)
            }
            _ => None,
        }
    }

    /// Elementwise map; shape is preserved.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Value {
        match self {
            Value::Scalar(x) => Value::Scalar(f(*x)),
            Value::Vector(v) => Value::Vector(v.iter().map(|&x| f(x)).collect()),
            Value::Matrix(m) => Value::Matrix(m.map(f)),
            Value::Image(i) => Value::Image(i.map(f)),
        }
    }

    /// Elementwise combination of two values of the same type.
    pub fn zip(&self, other: &Value, f: impl Fn(f64, f64) -> f64) -> Option<Value> {
        if self.value_type() != other.value_type() {
            return None;
        }
        let a = self.components();
        let b = other.components();
        let c: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect();
        Value::from_components(self.value_type(), &c)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Scalar(x)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BlockError {
    #[error("input {slot} has type {found}, expected {expected}")]
    InputType {
        slot: usize,
        expected: ValueType,
        found: ValueType,
    },
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("{0}")]
    Eval(String),
}

/// Symbol factory for one block: parameters, state entries and signals get
/// stable diagram-scoped names.
#[derive(Debug, Clone, Copy)]
pub struct SymCtx {
    pub block: BlockId,
}

impl SymCtx {
    pub fn new(block: BlockId) -> Self {
        Self { block }
    }

    pub fn param_symbol(&self, k: usize) -> Symbol {
        Symbol::new(format!("b{}.p{k}", self.block.0))
    }

    pub fn state_symbol(&self, k: usize) -> Symbol {
        Symbol::new(format!("b{}.s{k}", self.block.0))
    }

    pub fn p(&self, k: usize) -> Expr {
        Expr::var(self.param_symbol(k))
    }

    pub fn s(&self, k: usize) -> Expr {
        Expr::var(self.state_symbol(k))
    }
}

/// Symbol naming output `slot` of `block`.
pub fn signal_symbol(block: BlockId, slot: usize) -> Symbol {
    Symbol::new(format!("b{}.o{slot}", block.0))
}

/// How a block kind is translated by the code generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lowering {
    /// Use the block's symbolic output and state-update expressions.
    Symbolic,
    /// Clamp the single scalar input into `[lo, hi]`.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Read the value from the program's external input vector.
    Input,
    Unsupported,
}

/// Compile-time description of a block kind.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTraits {
    pub inputs: Vec<ValueType>,
    pub outputs: Vec<ValueType>,
    pub direct_feedthrough: bool,
    pub symbolic: bool,
    pub state_size: usize,
}

/// A functional block. Execution is two-phase: `output` computes this
/// cycle's outputs from committed state and current inputs without side
/// effects; `update` commits the new state once every block has produced
/// its outputs.
pub trait Block: Send + 'static {
    fn kind(&self) -> &'static str;

    fn traits(&self) -> BlockTraits;

    /// Parameters in `key=value` form, as written in diagram files.
    fn params(&self) -> Vec<(String, String)> {
        Vec::new()
    }

    /// Overrides one parameter from its textual form.
    fn set_param(&mut self, key: &str, _value: &str) -> Result<(), BlockError> {
        Err(BlockError::BadParam(format!(
            "{} has no parameter {key:?}",
            self.kind()
        )))
    }

    /// Numeric values of the parameters referenced by `SymCtx::p`.
    fn param_values(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Committed scalar state, indexed like `SymCtx::s`.
    fn state(&self) -> Vec<f64> {
        Vec::new()
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError>;

    fn update(&mut self, _inputs: &[&Value]) -> Result<(), BlockError> {
        Ok(())
    }

    fn reset(&mut self) {}

    /// Reseeds any random source. Blocks without one ignore this.
    fn seed(&mut self, _seed: u64) {}

    /// Injects an externally supplied value (input ports of the diagram).
    fn set_external(&mut self, _value: Value) -> Result<(), BlockError> {
        Err(BlockError::Eval(format!(
            "{} does not accept external values",
            self.kind()
        )))
    }

    /// Output expressions in terms of the input expressions, parameter
    /// symbols and state symbols. `None` when the kind is not symbolic.
    fn symbolic_output(&self, _inputs: &[Expr], _ctx: &SymCtx) -> Option<Vec<Expr>> {
        None
    }

    /// Next-state expressions, same conventions as `symbolic_output`.
    fn symbolic_update(&self, _inputs: &[Expr], _ctx: &SymCtx) -> Option<Vec<Expr>> {
        if self.traits().state_size == 0 {
            Some(Vec::new())
        } else {
            None
        }
    }

    fn lowering(&self) -> Lowering {
        if self.traits().symbolic {
            Lowering::Symbolic
        } else {
            Lowering::Unsupported
        }
    }

    fn box_clone(&self) -> Box<dyn Block>;

    fn as_any(&self) -> &dyn Any;

    fn as_any_mut(&mut self) -> &mut dyn Any;
}

impl Clone for Box<dyn Block> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Checks that `inputs` match the declared types.
pub fn check_inputs(expected: &[ValueType], inputs: &[&Value]) -> Result<(), BlockError> {
    for (slot, (ty, v)) in expected.iter().zip(inputs).enumerate() {
        let found = v.value_type();
        if found != *ty {
            return Err(BlockError::InputType {
                slot,
                expected: *ty,
                found,
            });
        }
    }
    Ok(())
}
