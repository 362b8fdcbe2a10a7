use std::fmt;
use std::sync::Arc;

use crate::block_plumbing;
use crate::expr::Expr;
use crate::graph::{
    check_inputs, Block, BlockError, BlockTraits, Lowering, SymCtx, Value, ValueType,
};
use crate::imaging::{self, conv2d, Kernel2D};
use crate::linalg::Matrix;

use super::params::{fmt_matrix, fmt_num, parse_matrix, parse_num};

type Func = dyn Fn(&[&Value]) -> Result<Value, BlockError> + Send + Sync;

/// Wraps a user closure. Never symbolic and never lowerable.
#[derive(Clone)]
pub struct FunctionBlock {
    label: String,
    inputs: Vec<ValueType>,
    output: ValueType,
    f: Arc<Func>,
}

impl FunctionBlock {
    pub fn new(
        label: &str,
        inputs: Vec<ValueType>,
        output: ValueType,
        f: impl Fn(&[&Value]) -> Result<Value, BlockError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.to_string(),
            inputs,
            output,
            f: Arc::new(f),
        }
    }

    /// Scalar-to-scalar convenience constructor.
    pub fn scalar(label: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(
            label,
            vec![ValueType::Scalar],
            ValueType::Scalar,
            move |u| {
                u[0].as_scalar()
                    .map(|x| Value::Scalar(f(x)))
                    .ok_or_else(|| BlockError::Eval("expected scalar".into()))
            },
        )
    }

    /// `max |x|` over an image of the given shape.
    pub fn sharpness(rows: usize, cols: usize) -> Self {
        Self::new(
            "sharpness",
            vec![ValueType::Image(rows, cols)],
            ValueType::Scalar,
            |u| {
                u[0].as_image()
                    .map(|img| Value::Scalar(imaging::sharpness(img)))
                    .ok_or_else(|| BlockError::Eval("expected image".into()))
            },
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for FunctionBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionBlock")
            .field("label", &self.label)
            .field("inputs", &self.inputs)
            .field("output", &self.output)
            .finish_non_exhaustive()
    }
}

impl Block for FunctionBlock {
    fn kind(&self) -> &'static str {
        "Function"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: self.inputs.clone(),
            outputs: vec![self.output],
            direct_feedthrough: true,
            symbolic: false,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        let mut p = vec![("fn".into(), self.label.clone())];
        if let Some(ValueType::Image(r, c)) = self.inputs.first() {
            p.push(("type".into(), ValueType::Image(*r, *c).to_string()));
        }
        p
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        check_inputs(&self.inputs, inputs)?;
        let y = (self.f)(inputs)?;
        if y.value_type() != self.output {
            return Err(BlockError::Eval(format!(
                "function {} returned {}, declared {}",
                self.label,
                y.value_type(),
                self.output
            )));
        }
        outputs[0] = y;
        Ok(())
    }

    fn lowering(&self) -> Lowering {
        Lowering::Unsupported
    }

    block_plumbing!();
}

/// Which kernel a [`Conv2DBlock`] applies.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvKernel {
    /// The 7×7 noise-robust Laplacian.
    Laplacian,
    /// The five-point Laplacian.
    Reference,
    Custom(Kernel2D<f64>),
}

impl ConvKernel {
    pub fn kernel(&self) -> Kernel2D<f64> {
        match self {
            ConvKernel::Laplacian => imaging::noise_robust_laplacian_kernel(),
            ConvKernel::Reference => imaging::reference_laplacian_kernel(),
            ConvKernel::Custom(k) => k.clone(),
        }
    }

    fn text(&self) -> String {
        match self {
            ConvKernel::Laplacian => "laplacian".into(),
            ConvKernel::Reference => "reference".into(),
            ConvKernel::Custom(k) => {
                let rows: Vec<Vec<f64>> = (0..k.height())
                    .map(|i| (0..k.width()).map(|j| k.get(i, j)).collect())
                    .collect();
                fmt_matrix(&Matrix::from_rows(&rows))
            }
        }
    }

    fn parse(s: &str) -> Result<Self, BlockError> {
        match s {
            "laplacian" => Ok(ConvKernel::Laplacian),
            "reference" => Ok(ConvKernel::Reference),
            _ => {
                let m = parse_matrix("kernel", s)?;
                let rows: Vec<&[f64]> = (0..m.rows()).map(|i| m.row(i)).collect();
                Kernel2D::from_rows(&rows)
                    .map(ConvKernel::Custom)
                    .map_err(|e| BlockError::BadParam(e.to_string()))
            }
        }
    }
}

/// 2-D convolution of an image input with replicate borders.
#[derive(Debug, Clone)]
pub struct Conv2DBlock {
    kernel: ConvKernel,
    taps: Kernel2D<f64>,
    rows: usize,
    cols: usize,
}

impl Conv2DBlock {
    pub fn new(kernel: ConvKernel, rows: usize, cols: usize) -> Self {
        Self {
            taps: kernel.kernel(),
            kernel,
            rows,
            cols,
        }
    }

    pub fn laplacian(rows: usize, cols: usize) -> Self {
        Self::new(ConvKernel::Laplacian, rows, cols)
    }
}

impl Block for Conv2DBlock {
    fn kind(&self) -> &'static str {
        "Conv2D"
    }

    fn traits(&self) -> BlockTraits {
        let ty = ValueType::Image(self.rows, self.cols);
        BlockTraits {
            inputs: vec![ty],
            outputs: vec![ty],
            direct_feedthrough: true,
            symbolic: false,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![
            ("kernel".into(), self.kernel.text()),
            (
                "type".into(),
                ValueType::Image(self.rows, self.cols).to_string(),
            ),
        ]
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "kernel" => {
                self.kernel = ConvKernel::parse(value)?;
                self.taps = self.kernel.kernel();
            }
            "type" => match value.parse().map_err(BlockError::BadParam)? {
                ValueType::Image(r, c) => {
                    self.rows = r;
                    self.cols = c;
                }
                other => {
                    return Err(BlockError::BadParam(format!(
                        "Conv2D needs an image type, got {other}"
                    )))
                }
            },
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Conv2D has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        check_inputs(&self.traits().inputs, inputs)?;
        let img = inputs[0].as_image().expect("checked image input");
        let y = conv2d(img, &self.taps).map_err(|e| BlockError::Eval(e.to_string()))?;
        outputs[0] = Value::Image(y);
        Ok(())
    }

    fn lowering(&self) -> Lowering {
        Lowering::Unsupported
    }

    block_plumbing!();
}

/// Discrete SISO state-space system `x' = A x + B u`, `y = C x + D u`.
///
/// Direct feedthrough exactly when `D != 0`. Parameters are numbered
/// row-major through A, then B, C and D.
#[derive(Debug, Clone)]
pub struct DiscreteStateSpace {
    a: Matrix<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    initial: Vec<f64>,
    x: Vec<f64>,
}

impl DiscreteStateSpace {
    pub fn new(a: Matrix<f64>, b: Vec<f64>, c: Vec<f64>, d: f64) -> Result<Self, BlockError> {
        let n = a.rows();
        if !a.is_square() || b.len() != n || c.len() != n || n == 0 {
            return Err(BlockError::BadParam(format!(
                "inconsistent state-space shapes A {}x{}, B {}, C {}",
                a.rows(),
                a.cols(),
                b.len(),
                c.len()
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            initial: vec![0.0; n],
            x: vec![0.0; n],
        })
    }

    pub fn with_initial(mut self, x0: Vec<f64>) -> Self {
        assert_eq!(x0.len(), self.order(), "initial state length");
        self.x = x0.clone();
        self.initial = x0;
        self
    }

    pub fn order(&self) -> usize {
        self.b.len()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    fn direct(&self) -> bool {
        self.d != 0.0
    }

    fn output_of(&self, u: f64) -> f64 {
        let mut y = self.c[0] * self.x[0];
        for j in 1..self.order() {
            y += self.c[j] * self.x[j];
        }
        if self.direct() {
            y += self.d * u;
        }
        y
    }

    fn next_state(&self, u: f64) -> Vec<f64> {
        let n = self.order();
        (0..n)
            .map(|i| {
                let mut acc = self.a[(i, 0)] * self.x[0];
                for j in 1..n {
                    acc += self.a[(i, j)] * self.x[j];
                }
                acc + self.b[i] * u
            })
            .collect()
    }
}

impl Block for DiscreteStateSpace {
    fn kind(&self) -> &'static str {
        "StateSpace"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![ValueType::Scalar],
            outputs: vec![ValueType::Scalar],
            direct_feedthrough: self.direct(),
            symbolic: true,
            state_size: self.order(),
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        let n = self.order();
        let mut p = vec![
            ("A".into(), fmt_matrix(&self.a)),
            (
                "B".into(),
                fmt_matrix(&Matrix::from_vec(n, 1, self.b.clone())),
            ),
            (
                "C".into(),
                fmt_matrix(&Matrix::from_vec(1, n, self.c.clone())),
            ),
            ("D".into(), fmt_num(self.d)),
        ];
        if self.initial.iter().any(|&v| v != 0.0) {
            p.push((
                "x0".into(),
                fmt_matrix(&Matrix::from_vec(n, 1, self.initial.clone())),
            ));
        }
        p
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        let mut next = self.clone();
        match key {
            "A" => next.a = parse_matrix(key, value)?,
            "B" => next.b = parse_matrix(key, value)?.into_vec(),
            "C" => next.c = parse_matrix(key, value)?.into_vec(),
            "D" => next.d = parse_num(key, value)?,
            "x0" => next.initial = parse_matrix(key, value)?.into_vec(),
            _ => {
                return Err(BlockError::BadParam(format!(
                    "StateSpace has no parameter {key:?}"
                )))
            }
        }
        let n = next.a.rows();
        if next.initial.len() != n {
            if key == "x0" {
                return Err(BlockError::BadParam(format!("x0 needs {n} entries")));
            }
            next.initial = vec![0.0; n];
        }
        let initial = next.initial.clone();
        *self = Self::new(next.a, next.b, next.c, next.d)?.with_initial(initial);
        Ok(())
    }

    fn param_values(&self) -> Vec<f64> {
        let mut v = self.a.as_slice().to_vec();
        v.extend(&self.b);
        v.extend(&self.c);
        v.push(self.d);
        v
    }

    fn state(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        check_inputs(&[ValueType::Scalar], inputs)?;
        let u = inputs[0].as_scalar().expect("checked");
        outputs[0] = Value::Scalar(self.output_of(u));
        Ok(())
    }

    fn update(&mut self, inputs: &[&Value]) -> Result<(), BlockError> {
        check_inputs(&[ValueType::Scalar], inputs)?;
        self.x = self.next_state(inputs[0].as_scalar().expect("checked"));
        Ok(())
    }

    fn reset(&mut self) {
        self.x = self.initial.clone();
    }

    fn symbolic_output(&self, inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        let n = self.order();
        let c0 = n * n + n;
        let mut terms: Vec<Expr> = (0..n)
            .map(|j| Expr::product(vec![ctx.p(c0 + j), ctx.s(j)]))
            .collect();
        if self.direct() {
            terms.push(Expr::product(vec![ctx.p(c0 + n), inputs[0].clone()]));
        }
        Some(vec![Expr::sum(terms)])
    }

    fn symbolic_update(&self, inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        let n = self.order();
        Some(
            (0..n)
                .map(|i| {
                    let mut terms: Vec<Expr> = (0..n)
                        .map(|j| Expr::product(vec![ctx.p(i * n + j), ctx.s(j)]))
                        .collect();
                    terms.push(Expr::product(vec![ctx.p(n * n + i), inputs[0].clone()]));
                    Expr::sum(terms)
                })
                .collect(),
        )
    }

    block_plumbing!();
}

/// Integral path of an anti-windup PID using conditional integration.
///
/// Inputs: candidate integral `I + T·e`, committed integral `I`, the
/// proportional-plus-derivative part, and the error `e`. Outputs the
/// candidate unless accepting it would push the controller output past a
/// limit while the error keeps driving it outward; then the committed
/// integral is held.
#[derive(Debug, Clone)]
pub struct ConditionalIntegrator {
    ki: f64,
    lo: f64,
    hi: f64,
    enabled: bool,
}

impl ConditionalIntegrator {
    pub fn new(ki: f64, lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "limits must satisfy lo < hi");
        Self {
            ki,
            lo,
            hi,
            enabled: true,
        }
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    /// Whether the candidate integral would be rejected.
    pub fn frozen(&self, i_cand: f64, pd: f64, e: f64) -> bool {
        let v = pd + self.ki * i_cand;
        self.enabled && ((v > self.hi && e > 0.0) || (v < self.lo && e < 0.0))
    }
}

impl Block for ConditionalIntegrator {
    fn kind(&self) -> &'static str {
        "ConditionalIntegrator"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![ValueType::Scalar; 4],
            outputs: vec![ValueType::Scalar],
            direct_feedthrough: true,
            symbolic: false,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![
            ("ki".into(), fmt_num(self.ki)),
            ("lo".into(), fmt_num(self.lo)),
            ("hi".into(), fmt_num(self.hi)),
            ("enabled".into(), self.enabled.to_string()),
        ]
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "ki" => self.ki = parse_num(key, value)?,
            "lo" => self.lo = parse_num(key, value)?,
            "hi" => self.hi = parse_num(key, value)?,
            "enabled" => {
                self.enabled = value
                    .parse()
                    .map_err(|_| BlockError::BadParam(format!("enabled={value}")))?
            }
            _ => {
                return Err(BlockError::BadParam(format!(
                    "ConditionalIntegrator has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        check_inputs(&self.traits().inputs, inputs)?;
        let v: Vec<f64> = inputs
            .iter()
            .map(|x| x.as_scalar().expect("checked"))
            .collect();
        let (i_cand, i_prev, pd, e) = (v[0], v[1], v[2], v[3]);
        outputs[0] = Value::Scalar(if self.frozen(i_cand, pd, e) {
            i_prev
        } else {
            i_cand
        });
        Ok(())
    }

    fn lowering(&self) -> Lowering {
        Lowering::Unsupported
    }

    block_plumbing!();
}
