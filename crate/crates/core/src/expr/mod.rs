//! Minimal symbolic algebra over named scalar variables.
//!
//! Expressions are immutable trees behind `Arc`, so cloning is cheap and
//! values can be shared across threads. The node set is closed: constants,
//! variables, n-ary sums and products, negation, division and integer
//! powers. Everything in it is differentiable.

mod diff;
mod simplify;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops;
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

pub use diff::differentiate;
pub use simplify::simplify;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("unbound symbol `{0}`")]
    UnboundSymbol(Symbol),
    #[error("division by zero while evaluating `{0}`")]
    EvalSingularity(String),
    #[error("division by the literal constant 0")]
    ZeroDenominator,
}

/// Interned variable name.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Symbol(Arc<str>);

impl Symbol {
    pub fn new(name: impl AsRef<str>) -> Self {
        Symbol(Arc::from(name.as_ref()))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Symbol {
    fn from(s: &str) -> Self {
        Symbol::new(s)
    }
}

impl From<String> for Symbol {
    fn from(s: String) -> Self {
        Symbol::new(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Constant(f64),
    Variable(Symbol),
    /// At least two operands.
    Add(Vec<Expr>),
    /// At least two operands.
    Mul(Vec<Expr>),
    Neg(Expr),
    /// The denominator is never the literal constant 0.
    Div(Expr, Expr),
    Pow(Expr, i32),
}

#[derive(Clone, PartialEq)]
pub struct Expr(Arc<ExprNode>);

impl Expr {
    fn from_node(node: ExprNode) -> Self {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &ExprNode {
        &self.0
    }

    pub fn constant(value: f64) -> Self {
        Self::from_node(ExprNode::Constant(value))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn var(name: impl Into<Symbol>) -> Self {
        Self::from_node(ExprNode::Variable(name.into()))
    }

    /// Sum of `terms`; an empty list is `0` and a singleton is returned as-is.
    pub fn sum(mut terms: Vec<Expr>) -> Self {
        match terms.len() {
            0 => Self::zero(),
            1 => terms.pop().unwrap(),
            _ => Self::from_node(ExprNode::Add(terms)),
        }
    }

    /// Product of `factors`; an empty list is `1` and a singleton is returned as-is.
    pub fn product(mut factors: Vec<Expr>) -> Self {
        match factors.len() {
            0 => Self::one(),
            1 => factors.pop().unwrap(),
            _ => Self::from_node(ExprNode::Mul(factors)),
        }
    }

    pub fn negate(e: Expr) -> Self {
        Self::from_node(ExprNode::Neg(e))
    }

    pub fn div(num: Expr, den: Expr) -> Result<Self, ExprError> {
        if den.as_constant() == Some(0.0) {
            return Err(ExprError::ZeroDenominator);
        }
        Ok(Self::from_node(ExprNode::Div(num, den)))
    }

    pub fn pow(base: Expr, exponent: i32) -> Self {
        Self::from_node(ExprNode::Pow(base, exponent))
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.node() {
            ExprNode::Constant(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_variable(&self) -> Option<&Symbol> {
        match self.node() {
            ExprNode::Variable(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_constant(&self, value: f64) -> bool {
        self.as_constant() == Some(value)
    }

    pub fn free_symbols(&self) -> BTreeSet<Symbol> {
        let mut out = BTreeSet::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut BTreeSet<Symbol>) {
        match self.node() {
            ExprNode::Constant(_) => {}
            ExprNode::Variable(s) => {
                out.insert(s.clone());
            }
            ExprNode::Add(ops) | ExprNode::Mul(ops) => {
                ops.iter().for_each(|e| e.collect_symbols(out))
            }
            ExprNode::Neg(a) | ExprNode::Pow(a, _) => a.collect_symbols(out),
            ExprNode::Div(a, b) => {
                a.collect_symbols(out);
                b.collect_symbols(out);
            }
        }
    }

    pub fn contains(&self, v: &Symbol) -> bool {
        match self.node() {
            ExprNode::Constant(_) => false,
            ExprNode::Variable(s) => s == v,
            ExprNode::Add(ops) | ExprNode::Mul(ops) => ops.iter().any(|e| e.contains(v)),
            ExprNode::Neg(a) | ExprNode::Pow(a, _) => a.contains(v),
            ExprNode::Div(a, b) => a.contains(v) || b.contains(v),
        }
    }

    /// Replaces every occurrence of `v` by `replacement`. Nothing else is
    /// rewritten; untouched subtrees are shared with `self`.
    pub fn substitute(&self, v: &Symbol, replacement: &Expr) -> Expr {
        self.substitute_with(&|s| (s == v).then(|| replacement.clone()))
    }

    pub fn substitute_all(&self, map: &HashMap<Symbol, Expr>) -> Expr {
        self.substitute_with(&|s| map.get(s).cloned())
    }

    fn substitute_with(&self, lookup: &dyn Fn(&Symbol) -> Option<Expr>) -> Expr {
        if !self.has_variables() {
            return self.clone();
        }
        match self.node() {
            ExprNode::Constant(_) => self.clone(),
            ExprNode::Variable(s) => lookup(s).unwrap_or_else(|| self.clone()),
            ExprNode::Add(ops) => Self::from_node(ExprNode::Add(
                ops.iter().map(|e| e.substitute_with(lookup)).collect(),
            )),
            ExprNode::Mul(ops) => Self::from_node(ExprNode::Mul(
                ops.iter().map(|e| e.substitute_with(lookup)).collect(),
            )),
            ExprNode::Neg(a) => Self::negate(a.substitute_with(lookup)),
            // A substituted denominator may become a literal zero; keep the
            // node anyway so evaluation reports the singularity.
            ExprNode::Div(a, b) => Self::from_node(ExprNode::Div(
                a.substitute_with(lookup),
                b.substitute_with(lookup),
            )),
            ExprNode::Pow(a, n) => Self::pow(a.substitute_with(lookup), *n),
        }
    }

    fn has_variables(&self) -> bool {
        match self.node() {
            ExprNode::Constant(_) => false,
            ExprNode::Variable(_) => true,
            ExprNode::Add(ops) | ExprNode::Mul(ops) => ops.iter().any(Expr::has_variables),
            ExprNode::Neg(a) | ExprNode::Pow(a, _) => a.has_variables(),
            ExprNode::Div(a, b) => a.has_variables() || b.has_variables(),
        }
    }

    /// Numeric evaluation. Every variable must be bound in `table`.
    pub fn evaluate<T: Scalar>(&self, table: &SymbolTable<T>) -> Result<T, ExprError> {
        self.evaluate_with(&|s| table.get(s))
    }

    /// Evaluation against an arbitrary symbol lookup.
    pub fn evaluate_with<T: Scalar>(
        &self,
        lookup: &dyn Fn(&Symbol) -> Option<T>,
    ) -> Result<T, ExprError> {
        Ok(match self.node() {
            ExprNode::Constant(c) => T::lit(*c),
            ExprNode::Variable(s) => {
                lookup(s).ok_or_else(|| ExprError::UnboundSymbol(s.clone()))?
            }
            ExprNode::Add(ops) => {
                let mut acc = ops[0].evaluate_with(lookup)?;
                for e in &ops[1..] {
                    acc += e.evaluate_with(lookup)?;
                }
                acc
            }
            ExprNode::Mul(ops) => {
                let mut acc = ops[0].evaluate_with(lookup)?;
                for e in &ops[1..] {
                    acc *= e.evaluate_with(lookup)?;
                }
                acc
            }
            ExprNode::Neg(a) => -a.evaluate_with(lookup)?,
            ExprNode::Div(a, b) => {
                let num = a.evaluate_with(lookup)?;
                let den = b.evaluate_with(lookup)?;
                if den == T::zero() {
                    return Err(ExprError::EvalSingularity(self.to_string()));
                }
                num / den
            }
            ExprNode::Pow(a, n) => {
                let base = a.evaluate_with(lookup)?;
                if *n < 0 && base == T::zero() {
                    return Err(ExprError::EvalSingularity(self.to_string()));
                }
                base.powi(*n)
            }
        })
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        1 + match self.node() {
            ExprNode::Constant(_) | ExprNode::Variable(_) => 0,
            ExprNode::Add(ops) | ExprNode::Mul(ops) => ops.iter().map(Expr::size).sum(),
            ExprNode::Neg(a) | ExprNode::Pow(a, _) => a.size(),
            ExprNode::Div(a, b) => a.size() + b.size(),
        }
    }
}

/// Formats a constant so that it parses back to the same `f64`.
pub fn format_constant(c: f64) -> String {
    let a = c.abs();
    if c == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{c}")
    } else {
        format!("{c:e}")
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

/// Infix text with explicit parentheses around every compound node,
/// e.g. `(C + (G * S))`.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            ExprNode::Constant(c) if *c < 0.0 => write!(f, "({})", format_constant(*c)),
            ExprNode::Constant(c) => f.write_str(&format_constant(*c)),
            ExprNode::Variable(s) => write!(f, "{s}"),
            ExprNode::Add(ops) => {
                write!(f, "({}", ops[0])?;
                for e in &ops[1..] {
                    match e.node() {
                        ExprNode::Neg(inner) => write!(f, " - {inner}")?,
                        ExprNode::Constant(c) if *c < 0.0 => {
                            write!(f, " - {}", format_constant(-*c))?
                        }
                        _ => write!(f, " + {e}")?,
                    }
                }
                f.write_str(")")
            }
            ExprNode::Mul(ops) => {
                write!(f, "({}", ops[0])?;
                for e in &ops[1..] {
                    write!(f, " * {e}")?;
                }
                f.write_str(")")
            }
            ExprNode::Neg(a) => write!(f, "(-{a})"),
            ExprNode::Div(a, b) => write!(f, "({a} / {b})"),
            ExprNode::Pow(a, n) => write!(f, "({a} ^ {n})"),
        }
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Self {
        Expr::constant(c)
    }
}

impl ops::Add for Expr {
    type Output = Expr;

    fn add(self, rhs: Expr) -> Expr {
        Expr::sum(vec![self, rhs])
    }
}

impl ops::Sub for Expr {
    type Output = Expr;

    fn sub(self, rhs: Expr) -> Expr {
        Expr::sum(vec![self, Expr::negate(rhs)])
    }
}

impl ops::Mul for Expr {
    type Output = Expr;

    fn mul(self, rhs: Expr) -> Expr {
        Expr::product(vec![self, rhs])
    }
}

impl ops::Neg for Expr {
    type Output = Expr;

    fn neg(self) -> Expr {
        Expr::negate(self)
    }
}

/// Where a symbol's value comes from in a diagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub block: u32,
    pub slot: usize,
}

/// Numeric bindings for symbols, plus optional provenance used to map loop
/// unknowns back to signal slots.
#[derive(Debug, Clone, Default)]
pub struct SymbolTable<T> {
    bindings: HashMap<Symbol, T>,
    provenance: HashMap<Symbol, Provenance>,
}

impl<T: Scalar> SymbolTable<T> {
    pub fn new() -> Self {
        Self {
            bindings: HashMap::new(),
            provenance: HashMap::new(),
        }
    }

    pub fn bind(&mut self, s: impl Into<Symbol>, value: T) -> &mut Self {
        self.bindings.insert(s.into(), value);
        self
    }

    pub fn with(mut self, s: impl Into<Symbol>, value: T) -> Self {
        self.bind(s, value);
        self
    }

    pub fn get(&self, s: &Symbol) -> Option<T> {
        self.bindings.get(s).copied()
    }

    pub fn is_bound(&self, s: &Symbol) -> bool {
        self.bindings.contains_key(s)
    }

    pub fn set_provenance(&mut self, s: impl Into<Symbol>, p: Provenance) {
        self.provenance.insert(s.into(), p);
    }

    pub fn provenance(&self, s: &Symbol) -> Option<Provenance> {
        self.provenance.get(s).copied()
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(n: &str) -> Expr {
        Expr::var(n)
    }

    #[test]
    fn display_matches_infix_format() {
        let e = v("C") + v("G") * v("S");
        assert_eq!(e.to_string(), "(C + (G * S))");
        let r = v("C") + v("G") * v("S") - v("S");
        assert_eq!(r.to_string(), "((C + (G * S)) - S)");
        assert_eq!(simplify(&r).to_string(), "(C + (G * S) - S)");
        assert_eq!(Expr::constant(-2.0).to_string(), "(-2)");
        assert_eq!(Expr::pow(v("x"), 3).to_string(), "(x ^ 3)");
    }

    #[test]
    fn evaluate_fixed_point_residual() {
        // S = C / (1 - G) makes the residual vanish.
        let r = v("C") + v("G") * v("S") - v("S");
        let t = SymbolTable::new()
            .with("C", 1.0)
            .with("G", 0.5)
            .with("S", 2.0);
        assert_eq!(r.evaluate(&t).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_errors() {
        let t = SymbolTable::new().with("x", 0.0);
        assert_eq!((Expr::constant(6.0) * v("x")).evaluate(&t).unwrap(), 0.0);

        let q = Expr::div(v("x"), v("y")).unwrap();
        let t = SymbolTable::new().with("x", 1.0).with("y", 0.0);
        assert!(matches!(q.evaluate(&t), Err(ExprError::EvalSingularity(_))));

        let t = SymbolTable::<f64>::new().with("x", 1.0);
        assert_eq!(
            q.evaluate(&t),
            Err(ExprError::UnboundSymbol(Symbol::new("y")))
        );
    }

    #[test]
    fn literal_zero_denominator_rejected() {
        assert_eq!(
            Expr::div(v("x"), Expr::zero()),
            Err(ExprError::ZeroDenominator)
        );
    }

    #[test]
    fn substitute_direct_and_absent() {
        let e = v("S") - v("G") * v("S");
        let s = e.substitute(&Symbol::new("S"), &v("C"));
        assert_eq!(s, v("C") - v("G") * v("C"));
        let x = v("x");
        assert_eq!(x.substitute(&Symbol::new("y"), &Expr::constant(5.0)), x);
    }

    #[test]
    fn loop_expansion_from_unknown() {
        // Traverse the loop from S: S is driven by the sum of C and the gain
        // output, and the gain output is G * S.
        let sum_out = v("C") + v("g_out");
        let expanded = sum_out.substitute(&Symbol::new("g_out"), &(v("G") * v("S")));
        assert_eq!(expanded.to_string(), "(C + (G * S))");
    }

    #[test]
    fn evaluates_in_f32() {
        let e = v("x") * Expr::constant(0.5);
        let t = SymbolTable::<f32>::new().with("x", 3.0);
        assert_eq!(e.evaluate(&t).unwrap(), 1.5f32);
    }
}
