use crate::block_plumbing;
use crate::expr::Expr;
use crate::graph::{
    check_inputs, Block, BlockError, BlockTraits, Lowering, SymCtx, Value, ValueType,
};
use crate::linalg::Matrix;

use super::params::{fmt_matrix, fmt_num, fmt_value, parse_num, parse_value};

fn scalar_in(inputs: &[&Value], k: usize) -> Result<f64, BlockError> {
    inputs[k].as_scalar().ok_or(BlockError::InputType {
        slot: k,
        expected: ValueType::Scalar,
        found: inputs[k].value_type(),
    })
}

/// Emits a fixed value every cycle.
#[derive(Debug, Clone)]
pub struct Constant {
    value: Value,
}

impl Constant {
    pub fn new(value: impl Into<Value>) -> Self {
        Self {
            value: value.into(),
        }
    }

    pub fn value(&self) -> &Value {
        &self.value
    }
}

impl Block for Constant {
    fn kind(&self) -> &'static str {
        "Constant"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![],
            outputs: vec![self.value.value_type()],
            direct_feedthrough: false,
            symbolic: matches!(self.value, Value::Scalar(_)),
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![("value".into(), fmt_value(&self.value))]
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "value" => self.value = parse_value(key, value)?,
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Constant has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn param_values(&self) -> Vec<f64> {
        self.value.as_scalar().into_iter().collect()
    }

    fn output(&self, _inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = self.value.clone();
        Ok(())
    }

    fn symbolic_output(&self, _inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        self.value.as_scalar().map(|_| vec![ctx.p(0)])
    }

    block_plumbing!();
}

#[derive(Debug, Clone, PartialEq)]
pub enum GainValue {
    /// Applied elementwise to a value of the given type.
    Scalar(f64, ValueType),
    /// Matrix times a vector input.
    Matrix(Matrix<f64>),
}

/// `y = K·u`.
#[derive(Debug, Clone)]
pub struct Gain {
    gain: GainValue,
}

impl Gain {
    pub fn new(k: f64) -> Self {
        Self {
            gain: GainValue::Scalar(k, ValueType::Scalar),
        }
    }

    /// Scalar gain on a non-scalar signal.
    pub fn elementwise(k: f64, ty: ValueType) -> Self {
        Self {
            gain: GainValue::Scalar(k, ty),
        }
    }

    pub fn matrix(k: Matrix<f64>) -> Self {
        Self {
            gain: GainValue::Matrix(k),
        }
    }

    pub fn gain(&self) -> &GainValue {
        &self.gain
    }
}

impl Block for Gain {
    fn kind(&self) -> &'static str {
        "Gain"
    }

    fn traits(&self) -> BlockTraits {
        let (i, o) = match &self.gain {
            GainValue::Scalar(_, t) => (*t, *t),
            GainValue::Matrix(m) => (ValueType::Vector(m.cols()), ValueType::Vector(m.rows())),
        };
        BlockTraits {
            inputs: vec![i],
            outputs: vec![o],
            direct_feedthrough: true,
            symbolic: matches!(self.gain, GainValue::Scalar(_, ValueType::Scalar)),
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        match &self.gain {
            GainValue::Scalar(k, ValueType::Scalar) => vec![("gain".into(), fmt_num(*k))],
            GainValue::Scalar(k, t) => {
                vec![("gain".into(), fmt_num(*k)), ("type".into(), t.to_string())]
            }
            GainValue::Matrix(m) => vec![("gain".into(), fmt_matrix(m))],
        }
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "gain" => {
                let ty = match &self.gain {
                    GainValue::Scalar(_, t) => *t,
                    GainValue::Matrix(_) => ValueType::Scalar,
                };
                self.gain = match parse_value(key, value)? {
                    Value::Scalar(k) => GainValue::Scalar(k, ty),
                    Value::Matrix(m) => GainValue::Matrix(m),
                    Value::Vector(v) => GainValue::Matrix(Matrix::from_vec(1, v.len(), v)),
                    Value::Image(_) => return Err(BlockError::BadParam(value.into())),
                };
            }
            "type" => match &mut self.gain {
                GainValue::Scalar(_, t) => *t = value.parse().map_err(BlockError::BadParam)?,
                GainValue::Matrix(_) => {
                    return Err(BlockError::BadParam("type with matrix gain".into()))
                }
            },
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Gain has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn param_values(&self) -> Vec<f64> {
        match &self.gain {
            GainValue::Scalar(k, _) => vec![*k],
            GainValue::Matrix(m) => m.as_slice().to_vec(),
        }
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        check_inputs(&self.traits().inputs, inputs)?;
        outputs[0] = match (&self.gain, inputs[0]) {
            (GainValue::Scalar(k, _), u) => u.map(|x| k * x),
            (GainValue::Matrix(m), Value::Vector(u)) => Value::Vector(m.mul_vec(u)),
            _ => unreachable!("checked input type"),
        };
        Ok(())
    }

    fn symbolic_output(&self, inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        match self.gain {
            GainValue::Scalar(_, ValueType::Scalar) => {
                Some(vec![Expr::product(vec![ctx.p(0), inputs[0].clone()])])
            }
            _ => None,
        }
    }

    block_plumbing!();
}

/// `y = Σ sign_i · u_i`, evaluated left to right.
#[derive(Debug, Clone)]
pub struct Sum {
    signs: Vec<bool>,
    ty: ValueType,
}

impl Sum {
    /// `signs` holds `+` or `-` per input, e.g. `"+-"`.
    pub fn new(signs: &str) -> Result<Self, BlockError> {
        Self::typed(signs, ValueType::Scalar)
    }

    pub fn typed(signs: &str, ty: ValueType) -> Result<Self, BlockError> {
        let signs = parse_signs(signs)?;
        Ok(Self { signs, ty })
    }

    /// All-positive sum of `n` inputs.
    pub fn plus(n: usize) -> Self {
        Self {
            signs: vec![true; n],
            ty: ValueType::Scalar,
        }
    }

    fn signs_text(&self) -> String {
        self.signs
            .iter()
            .map(|&p| if p { '+' } else { '-' })
            .collect()
    }
}

fn parse_signs(s: &str) -> Result<Vec<bool>, BlockError> {
    if s.is_empty() {
        return Err(BlockError::BadParam("Sum needs at least one input".into()));
    }
    s.chars()
        .map(|c| match c {
            '+' => Ok(true),
            '-' => Ok(false),
            _ => Err(BlockError::BadParam(format!("signs={s}"))),
        })
        .collect()
}

impl Block for Sum {
    fn kind(&self) -> &'static str {
        "Sum"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![self.ty; self.signs.len()],
            outputs: vec![self.ty],
            direct_feedthrough: true,
            symbolic: self.ty == ValueType::Scalar,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        let mut p = vec![("signs".into(), self.signs_text())];
        if self.ty != ValueType::Scalar {
            p.push(("type".into(), self.ty.to_string()));
        }
        p
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "signs" => self.signs = parse_signs(value)?,
            "type" => self.ty = value.parse().map_err(BlockError::BadParam)?,
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Sum has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        check_inputs(&self.traits().inputs, inputs)?;
        let term = |k: usize| {
            if self.signs[k] {
                inputs[k].clone()
            } else {
                inputs[k].map(|x| -x)
            }
        };
        let mut acc = term(0);
        for k in 1..self.signs.len() {
            acc = acc.zip(&term(k), |a, b| a + b).expect("same type");
        }
        outputs[0] = acc;
        Ok(())
    }

    fn symbolic_output(&self, inputs: &[Expr], _ctx: &SymCtx) -> Option<Vec<Expr>> {
        if self.ty != ValueType::Scalar {
            return None;
        }
        let terms = self
            .signs
            .iter()
            .zip(inputs)
            .map(|(&p, u)| {
                if p {
                    u.clone()
                } else {
                    Expr::negate(u.clone())
                }
            })
            .collect();
        Some(vec![Expr::sum(terms)])
    }

    block_plumbing!();
}

/// `y = Π u_i` over scalar inputs.
#[derive(Debug, Clone)]
pub struct Product {
    n: usize,
}

impl Product {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "product needs an input");
        Self { n }
    }
}

impl Block for Product {
    fn kind(&self) -> &'static str {
        "Product"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![ValueType::Scalar; self.n],
            outputs: vec![ValueType::Scalar],
            direct_feedthrough: true,
            symbolic: true,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![("inputs".into(), self.n.to_string())]
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        let mut acc = scalar_in(inputs, 0)?;
        for k in 1..self.n {
            acc *= scalar_in(inputs, k)?;
        }
        outputs[0] = Value::Scalar(acc);
        Ok(())
    }

    fn symbolic_output(&self, inputs: &[Expr], _ctx: &SymCtx) -> Option<Vec<Expr>> {
        Some(vec![Expr::product(inputs.to_vec())])
    }

    block_plumbing!();
}

/// `clamp(u, lo, hi)`. Not differentiable, hence not symbolic.
#[derive(Debug, Clone)]
pub struct Saturation {
    lo: f64,
    hi: f64,
}

impl Saturation {
    /// Panics unless `lo <= hi`.
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "saturation bounds {lo} > {hi}");
        Self { lo, hi }
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn apply(&self, u: f64) -> f64 {
        u.clamp(self.lo, self.hi)
    }
}

impl Block for Saturation {
    fn kind(&self) -> &'static str {
        "Saturation"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![ValueType::Scalar],
            outputs: vec![ValueType::Scalar],
            direct_feedthrough: true,
            symbolic: false,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![
            ("lo".into(), fmt_num(self.lo)),
            ("hi".into(), fmt_num(self.hi)),
        ]
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        let v = parse_num(key, value)?;
        let (lo, hi) = match key {
            "lo" => (v, self.hi),
            "hi" => (self.lo, v),
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Saturation has no parameter {key:?}"
                )))
            }
        };
        if !(lo <= hi) {
            return Err(BlockError::BadParam(format!("lo={lo} > hi={hi}")));
        }
        self.lo = lo;
        self.hi = hi;
        Ok(())
    }

    fn param_values(&self) -> Vec<f64> {
        vec![self.lo, self.hi]
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = Value::Scalar(self.apply(scalar_in(inputs, 0)?));
        Ok(())
    }

    fn lowering(&self) -> Lowering {
        Lowering::Clamp {
            lo: self.lo,
            hi: self.hi,
        }
    }

    block_plumbing!();
}

/// External input of a diagram, written with `Executor::set_input`.
#[derive(Debug, Clone)]
pub struct Inport {
    ty: ValueType,
    value: Value,
}

impl Inport {
    pub fn new(ty: ValueType) -> Self {
        Self {
            ty,
            value: Value::zero(ty),
        }
    }

    pub fn scalar() -> Self {
        Self::new(ValueType::Scalar)
    }
}

impl Block for Inport {
    fn kind(&self) -> &'static str {
        "Inport"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![],
            outputs: vec![self.ty],
            direct_feedthrough: false,
            symbolic: false,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        if self.ty == ValueType::Scalar {
            vec![]
        } else {
            vec![("type".into(), self.ty.to_string())]
        }
    }

    fn output(&self, _inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = self.value.clone();
        Ok(())
    }

    fn reset(&mut self) {
        self.value = Value::zero(self.ty);
    }

    fn set_external(&mut self, value: Value) -> Result<(), BlockError> {
        if value.value_type() != self.ty {
            return Err(BlockError::InputType {
                slot: 0,
                expected: self.ty,
                found: value.value_type(),
            });
        }
        self.value = value;
        Ok(())
    }

    fn lowering(&self) -> Lowering {
        if self.ty == ValueType::Scalar {
            Lowering::Input
        } else {
            Lowering::Unsupported
        }
    }

    block_plumbing!();
}
