use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block_plumbing;
use crate::expr::Expr;
use crate::graph::{
    check_inputs, Block, BlockError, BlockTraits, Lowering, SymCtx, Value, ValueType,
};

use super::params::{fmt_num, fmt_value, parse_num, parse_value};

fn scalar_in(inputs: &[&Value], k: usize) -> Result<f64, BlockError> {
    inputs[k].as_scalar().ok_or(BlockError::InputType {
        slot: k,
        expected: ValueType::Scalar,
        found: inputs[k].value_type(),
    })
}

fn positive(key: &str, v: f64) -> Result<f64, BlockError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(BlockError::BadParam(format!(
            "{key} must be positive, got {v}"
        )))
    }
}

/// One-cycle delay: outputs the value received in the previous cycle.
#[derive(Debug, Clone)]
pub struct UnitDelay {
    initial: Value,
    state: Value,
}

impl UnitDelay {
    pub fn new() -> Self {
        Self::with_initial(0.0)
    }

    pub fn with_initial(initial: impl Into<Value>) -> Self {
        let initial = initial.into();
        Self {
            state: initial.clone(),
            initial,
        }
    }

    pub fn typed(ty: ValueType) -> Self {
        Self::with_initial(Value::zero(ty))
    }
}

impl Default for UnitDelay {
    fn default() -> Self {
        Self::new()
    }
}

impl Block for UnitDelay {
    fn kind(&self) -> &'static str {
        "UnitDelay"
    }

    fn traits(&self) -> BlockTraits {
        let ty = self.initial.value_type();
        BlockTraits {
            inputs: vec![ty],
            outputs: vec![ty],
            direct_feedthrough: false,
            symbolic: ty == ValueType::Scalar,
            state_size: if ty == ValueType::Scalar { 1 } else { 0 },
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        match &self.initial {
            Value::Scalar(x) if *x == 0.0 => vec![],
            Value::Scalar(_) | Value::Vector(_) | Value::Matrix(_) => {
                vec![("initial".into(), fmt_value(&self.initial))]
            }
            Value::Image(_) => vec![("type".into(), self.initial.value_type().to_string())],
        }
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "initial" => self.initial = parse_value(key, value)?,
            "type" => self.initial = Value::zero(value.parse().map_err(BlockError::BadParam)?),
            _ => {
                return Err(BlockError::BadParam(format!(
                    "UnitDelay has no parameter {key:?}"
                )))
            }
        }
        self.state = self.initial.clone();
        Ok(())
    }

    fn state(&self) -> Vec<f64> {
        self.state.as_scalar().into_iter().collect()
    }

    fn output(&self, _inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = self.state.clone();
        Ok(())
    }

    fn update(&mut self, inputs: &[&Value]) -> Result<(), BlockError> {
        check_inputs(&[self.initial.value_type()], inputs)?;
        self.state = inputs[0].clone();
        Ok(())
    }

    fn reset(&mut self) {
        self.state = self.initial.clone();
    }

    fn symbolic_output(&self, _inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        self.traits().symbolic.then(|| vec![ctx.s(0)])
    }

    fn symbolic_update(&self, inputs: &[Expr], _ctx: &SymCtx) -> Option<Vec<Expr>> {
        self.traits().symbolic.then(|| vec![inputs[0].clone()])
    }

    block_plumbing!();
}

/// Forward-Euler accumulator: outputs the state, then adds `T·u`.
#[derive(Debug, Clone)]
pub struct Integrator {
    t: f64,
    initial: f64,
    state: f64,
}

impl Integrator {
    pub fn new(t: f64) -> Self {
        assert!(t > 0.0, "sample time must be positive");
        Self {
            t,
            initial: 0.0,
            state: 0.0,
        }
    }

    pub fn with_initial(mut self, x0: f64) -> Self {
        self.initial = x0;
        self.state = x0;
        self
    }

    pub fn value(&self) -> f64 {
        self.state
    }
}

impl Block for Integrator {
    fn kind(&self) -> &'static str {
        "Integrator"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![ValueType::Scalar],
            outputs: vec![ValueType::Scalar],
            direct_feedthrough: false,
            symbolic: true,
            state_size: 1,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        let mut p = vec![("T".into(), fmt_num(self.t))];
        if self.initial != 0.0 {
            p.push(("initial".into(), fmt_num(self.initial)));
        }
        p
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        let v = parse_num(key, value)?;
        match key {
            "T" => self.t = positive(key, v)?,
            "initial" => {
                self.initial = v;
                self.state = v;
            }
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Integrator has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn param_values(&self) -> Vec<f64> {
        vec![self.t]
    }

    fn state(&self) -> Vec<f64> {
        vec![self.state]
    }

    fn output(&self, _inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = Value::Scalar(self.state);
        Ok(())
    }

    fn update(&mut self, inputs: &[&Value]) -> Result<(), BlockError> {
        self.state += self.t * scalar_in(inputs, 0)?;
        Ok(())
    }

    fn reset(&mut self) {
        self.state = self.initial;
    }

    fn symbolic_output(&self, _inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        Some(vec![ctx.s(0)])
    }

    fn symbolic_update(&self, inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        Some(vec![Expr::sum(vec![
            ctx.s(0),
            Expr::product(vec![ctx.p(0), inputs[0].clone()]),
        ])])
    }

    block_plumbing!();
}

/// Outputs the scalar received `n` cycles ago; zero during warm-up.
///
/// State index 0 is the oldest sample.
#[derive(Debug, Clone)]
pub struct DelayLine {
    buf: Vec<f64>,
    head: usize,
}

impl DelayLine {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "delay length must be at least 1");
        Self {
            buf: vec![0.0; n],
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The sample that will be output this cycle.
    pub fn oldest(&self) -> f64 {
        self.buf[self.head]
    }

    pub fn push(&mut self, x: f64) {
        self.buf[self.head] = x;
        self.head = (self.head + 1) % self.buf.len();
    }
}

impl Block for DelayLine {
    fn kind(&self) -> &'static str {
        "DelayLine"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![ValueType::Scalar],
            outputs: vec![ValueType::Scalar],
            direct_feedthrough: false,
            symbolic: true,
            state_size: self.buf.len(),
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![("n".into(), self.buf.len().to_string())]
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "n" => match value.parse::<usize>() {
                Ok(n) if n >= 1 => *self = Self::new(n),
                _ => return Err(BlockError::BadParam(format!("n={value}"))),
            },
            _ => {
                return Err(BlockError::BadParam(format!(
                    "DelayLine has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn state(&self) -> Vec<f64> {
        let n = self.buf.len();
        (0..n).map(|k| self.buf[(self.head + k) % n]).collect()
    }

    fn output(&self, _inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = Value::Scalar(self.oldest());
        Ok(())
    }

    fn update(&mut self, inputs: &[&Value]) -> Result<(), BlockError> {
        self.push(scalar_in(inputs, 0)?);
        Ok(())
    }

    fn reset(&mut self) {
        self.buf.iter_mut().for_each(|x| *x = 0.0);
        self.head = 0;
    }

    fn symbolic_output(&self, _inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        Some(vec![ctx.s(0)])
    }

    fn symbolic_update(&self, inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        let n = self.buf.len();
        let mut next: Vec<Expr> = (1..n).map(|k| ctx.s(k)).collect();
        next.push(inputs[0].clone());
        Some(next)
    }

    block_plumbing!();
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Self {
        Self { kp, ki, kd }
    }
}

/// Integrate-then-act PID state, shared by the block and hand-written loops.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

impl PidState {
    /// Output for error `e` given the committed state. The integral is
    /// advanced before use and the derivative is unfiltered.
    pub fn output(&self, g: PidGains, t: f64, e: f64) -> f64 {
        g.kp * e + g.ki * (self.integral + t * e) + (g.kd * (e - self.prev_error)) / t
    }

    pub fn commit(&mut self, t: f64, e: f64) {
        self.integral += t * e;
        self.prev_error = e;
    }

    /// `output` followed by `commit`.
    pub fn step(&mut self, g: PidGains, t: f64, e: f64) -> f64 {
        let u = self.output(g, t, e);
        self.commit(t, e);
        u
    }
}

/// PID controller on a scalar error.
#[derive(Debug, Clone)]
pub struct Pid {
    gains: PidGains,
    t: f64,
    state: PidState,
}

impl Pid {
    pub fn new(gains: PidGains, t: f64) -> Self {
        assert!(t > 0.0, "sample time must be positive");
        Self {
            gains,
            t,
            state: PidState::default(),
        }
    }

    pub fn gains(&self) -> PidGains {
        self.gains
    }

    pub fn sample_time(&self) -> f64 {
        self.t
    }

    pub fn pid_state(&self) -> PidState {
        self.state
    }
}

impl Block for Pid {
    fn kind(&self) -> &'static str {
        "Pid"
    }

    fn traits(&self) -> BlockTraits {
        BlockTraits {
            inputs: vec![ValueType::Scalar],
            outputs: vec![ValueType::Scalar],
            direct_feedthrough: true,
            symbolic: true,
            state_size: 2,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![
            ("kp".into(), fmt_num(self.gains.kp)),
            ("ki".into(), fmt_num(self.gains.ki)),
            ("kd".into(), fmt_num(self.gains.kd)),
            ("T".into(), fmt_num(self.t)),
        ]
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        let v = parse_num(key, value)?;
        match key {
            "kp" => self.gains.kp = v,
            "ki" => self.gains.ki = v,
            "kd" => self.gains.kd = v,
            "T" => self.t = positive(key, v)?,
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Pid has no parameter {key:?}"
                )))
            }
        }
        Ok(())
    }

    fn param_values(&self) -> Vec<f64> {
        vec![self.gains.kp, self.gains.ki, self.gains.kd, self.t]
    }

    fn state(&self) -> Vec<f64> {
        vec![self.state.integral, self.state.prev_error]
    }

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = Value::Scalar(self.state.output(self.gains, self.t, scalar_in(inputs, 0)?));
        Ok(())
    }

    fn update(&mut self, inputs: &[&Value]) -> Result<(), BlockError> {
        self.state.commit(self.t, scalar_in(inputs, 0)?);
        Ok(())
    }

    fn reset(&mut self) {
        self.state = PidState::default();
    }

    fn symbolic_output(&self, inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        let e = inputs[0].clone();
        let p = Expr::product(vec![ctx.p(0), e.clone()]);
        let i = Expr::product(vec![
            ctx.p(1),
            Expr::sum(vec![ctx.s(0), Expr::product(vec![ctx.p(3), e.clone()])]),
        ]);
        let d = Expr::div(
            Expr::product(vec![ctx.p(2), Expr::sum(vec![e, Expr::negate(ctx.s(1))])]),
            ctx.p(3),
        )
        .ok()?;
        Some(vec![Expr::sum(vec![p, i, d])])
    }

    fn symbolic_update(&self, inputs: &[Expr], ctx: &SymCtx) -> Option<Vec<Expr>> {
        let e = inputs[0].clone();
        Some(vec![
            Expr::sum(vec![ctx.s(0), Expr::product(vec![ctx.p(3), e.clone()])]),
            e,
        ])
    }

    block_plumbing!();
}

/// Uniform noise in `[-amplitude, amplitude]`, one fresh sample per cycle.
#[derive(Debug, Clone)]
pub struct Noise {
    amplitude: f64,
    ty: ValueType,
    seed: u64,
    rng: ChaCha8Rng,
    current: Value,
}

impl Noise {
    pub fn new(amplitude: f64) -> Self {
        Self::typed(amplitude, ValueType::Scalar)
    }

    pub fn typed(amplitude: f64, ty: ValueType) -> Self {
        let mut n = Self {
            amplitude,
            ty,
            seed: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            current: Value::zero(ty),
        };
        n.reset();
        n
    }

    fn draw(&mut self) -> Value {
        let a = self.amplitude;
        let n = Value::zero(self.ty).components().len();
        let c: Vec<f64> = if a == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| self.rng.gen_range(-a..=a)).collect()
        };
        Value::from_components(self.ty, &c).expect("component count matches type")
    }
}

impl Block for Noise {
    fn kind(&self) -> &'static str {
        "Noise"
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
        let mut p = vec![("amplitude".into(), fmt_num(self.amplitude))];
        if self.ty != ValueType::Scalar {
            p.push(("type".into(), self.ty.to_string()));
        }
        p
    }

    fn set_param(&mut self, key: &str, value: &str) -> Result<(), BlockError> {
        match key {
            "amplitude" => {
                let a = parse_num(key, value)?;
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(BlockError::BadParam(format!("amplitude={value}")));
                }
                self.amplitude = a;
            }
            "type" => self.ty = value.parse().map_err(BlockError::BadParam)?,
            _ => {
                return Err(BlockError::BadParam(format!(
                    "Noise has no parameter {key:?}"
                )))
            }
        }
        self.reset();
        Ok(())
    }

    fn output(&self, _inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = self.current.clone();
        Ok(())
    }

    fn update(&mut self, _inputs: &[&Value]) -> Result<(), BlockError> {
        self.current = self.draw();
        Ok(())
    }

    fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.current = self.draw();
    }

    fn seed(&mut self, seed: u64) {
        self.seed = seed;
        self.reset();
    }

    fn lowering(&self) -> Lowering {
        Lowering::Unsupported
    }

    block_plumbing!();
}
