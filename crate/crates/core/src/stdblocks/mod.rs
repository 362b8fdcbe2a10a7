//! Standard block library and the kind registry used by diagram files.

mod basic;
mod joint;
mod params;
mod special;
mod stateful;

use std::collections::BTreeMap;

pub use basic::{Constant, Gain, GainValue, Inport, Product, Saturation, Sum};
pub use joint::{peak_overshoot, JointRow, JointScenario, JOINT_CSV_HEADER};
pub use params::{
    fmt_matrix, fmt_num, fmt_value, fmt_vector, parse_grid, parse_matrix, parse_num, parse_value,
    Params,
};
pub use special::{
    ConditionalIntegrator, Conv2DBlock, ConvKernel, DiscreteStateSpace, FunctionBlock,
};
pub use stateful::{DelayLine, Integrator, Noise, Pid, PidGains, PidState, UnitDelay};

use crate::graph::{Block, BlockError, BlockId, Diagram, GraphError, SlotRef, ValueType};

type Constructor = fn(&mut Params) -> Result<Box<dyn Block>, BlockError>;

/// Maps kind names to constructors taking `key=value` parameters.
#[derive(Clone)]
pub struct BlockRegistry {
    kinds: BTreeMap<&'static str, Constructor>,
}

fn configured(mut block: Box<dyn Block>, p: &mut Params) -> Result<Box<dyn Block>, BlockError> {
    for (k, v) in p.drain() {
        block.set_param(&k, &v)?;
    }
    Ok(block)
}

impl BlockRegistry {
    pub fn empty() -> Self {
        Self {
            kinds: BTreeMap::new(),
        }
    }

    /// Every kind in this module.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register("Constant", |p| configured(Box::new(Constant::new(0.0)), p));
        r.register("Gain", |p| configured(Box::new(Gain::new(1.0)), p));
        r.register("Sum", |p| configured(Box::new(Sum::plus(2)), p));
        r.register("Product", |p| {
            let n = p.count("inputs", 2)?;
            if n == 0 {
                return Err(BlockError::BadParam("inputs=0".into()));
            }
            Ok(Box::new(Product::new(n)))
        });
        r.register("Saturation", |p| {
            configured(
                Box::new(Saturation::new(f64::NEG_INFINITY, f64::INFINITY)),
                p,
            )
        });
        r.register("Inport", |p| {
            Ok(Box::new(Inport::new(p.value_type(ValueType::Scalar)?)))
        });
        r.register("UnitDelay", |p| configured(Box::new(UnitDelay::new()), p));
        r.register("Integrator", |p| {
            configured(Box::new(Integrator::new(1.0)), p)
        });
        r.register("DelayLine", |p| configured(Box::new(DelayLine::new(1)), p));
        r.register("Pid", |p| {
            configured(Box::new(Pid::new(PidGains::new(0.0, 0.0, 0.0), 1.0)), p)
        });
        r.register("Noise", |p| configured(Box::new(Noise::new(0.0)), p));
        r.register("Conv2D", |p| {
            let ty = p.value_type(ValueType::Image(1, 1))?;
            let ValueType::Image(rows, cols) = ty else {
                return Err(BlockError::BadParam(format!(
                    "Conv2D needs an image type, got {ty}"
                )));
            };
            configured(Box::new(Conv2DBlock::laplacian(rows, cols)), p)
        });
        r.register("Function", |p| {
            let name = p
                .take("fn")
                .ok_or_else(|| BlockError::BadParam("missing fn".into()))?;
            let ty = p.value_type(ValueType::Scalar)?;
            named_function(&name, ty).map(|f| Box::new(f) as Box<dyn Block>)
        });
        r.register("StateSpace", |p| {
            let a = parse_matrix(
                "A",
                &p.take("A")
                    .ok_or_else(|| BlockError::BadParam("missing A".into()))?,
            )?;
            let b = parse_matrix(
                "B",
                &p.take("B")
                    .ok_or_else(|| BlockError::BadParam("missing B".into()))?,
            )?;
            let c = parse_matrix(
                "C",
                &p.take("C")
                    .ok_or_else(|| BlockError::BadParam("missing C".into()))?,
            )?;
            let d = p.num("D", 0.0)?;
            let mut ss = DiscreteStateSpace::new(a, b.into_vec(), c.into_vec(), d)?;
            if let Some(x0) = p.take("x0") {
                let x0 = parse_matrix("x0", &x0)?.into_vec();
                if x0.len() != ss.order() {
                    return Err(BlockError::BadParam(format!(
                        "x0 needs {} entries",
                        ss.order()
                    )));
                }
                ss = ss.with_initial(x0);
            }
            Ok(Box::new(ss))
        });
        r.register("ConditionalIntegrator", |p| {
            configured(
                Box::new(ConditionalIntegrator::new(
                    1.0,
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                )),
                p,
            )
        });
        r
    }

    pub fn register(&mut self, kind: &'static str, ctor: Constructor) {
        self.kinds.insert(kind, ctor);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.kinds.keys().copied()
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.kinds.contains_key(kind)
    }

    /// `None` for an unknown kind.
    pub fn create(
        &self,
        kind: &str,
        mut params: Params,
    ) -> Option<Result<Box<dyn Block>, BlockError>> {
        let ctor = self.kinds.get(kind)?;
        Some(ctor(&mut params).and_then(|b| params.finish(kind).map(|_| b)))
    }
}

impl Default for BlockRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

/// Function blocks that can be named in diagram files.
pub fn named_function(name: &str, ty: ValueType) -> Result<FunctionBlock, BlockError> {
    match (name, ty) {
        ("sharpness", ValueType::Image(r, c)) => Ok(FunctionBlock::sharpness(r, c)),
        ("abs", ValueType::Scalar) => Ok(FunctionBlock::scalar("abs", f64::abs)),
        ("square", ValueType::Scalar) => Ok(FunctionBlock::scalar("square", |x| x * x)),
        ("tanh", ValueType::Scalar) => Ok(FunctionBlock::scalar("tanh", f64::tanh)),
        _ => Err(BlockError::BadParam(format!(
            "unknown function {name:?} on {ty}"
        ))),
    }
}

/// Integral-windup protection used by [`build_anti_windup_pid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AntiWindup {
    /// Plain PID in front of the saturation.
    None,
    /// Hold the integral while the output is saturated and the error
    /// pushes further out.
    #[default]
    Clamping,
}

/// Handles into a PID sub-diagram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidFragment {
    /// Error input.
    pub input: SlotRef,
    /// Saturated actuator command.
    pub output: SlotRef,
    /// The block holding the committed integral.
    pub integral: BlockId,
}

/// Adds an anti-windup PID built from gains, sums, delays and a saturation.
/// Block names are prefixed with `prefix`.
pub fn build_anti_windup_pid(
    d: &mut Diagram,
    prefix: &str,
    gains: PidGains,
    t: f64,
    u_min: f64,
    u_max: f64,
    strategy: AntiWindup,
) -> Result<PidFragment, GraphError> {
    assert!(
        u_min < u_max,
        "saturation limits must satisfy u_min < u_max"
    );
    assert!(t > 0.0, "sample time must be positive");
    let name = |s: &str| format!("{prefix}_{s}");
    let e = d.add_named(&name("e"), Gain::new(1.0))?;
    let p = d.add_named(&name("p"), Gain::new(gains.kp))?;
    let e_prev = d.add_named(&name("eprev"), UnitDelay::new())?;
    let de = d.add_named(&name("de"), Sum::new("+-").expect("valid signs"))?;
    let dg = d.add_named(&name("d"), Gain::new(gains.kd / t))?;
    let pd = d.add_named(&name("pd"), Sum::plus(2))?;
    let te = d.add_named(&name("te"), Gain::new(t))?;
    let i_prev = d.add_named(&name("iprev"), UnitDelay::new())?;
    let i_cand = d.add_named(&name("icand"), Sum::plus(2))?;
    let mut ci = ConditionalIntegrator::new(gains.ki, u_min, u_max);
    if strategy == AntiWindup::None {
        ci = ci.disabled();
    }
    let i_sel = d.add_named(&name("isel"), ci)?;
    let ig = d.add_named(&name("i"), Gain::new(gains.ki))?;
    let u = d.add_named(&name("u"), Sum::plus(2))?;
    let sat = d.add_named(&name("sat"), Saturation::new(u_min, u_max))?;

    d.connect(e.o(0), p.i(0))?;
    d.connect(e.o(0), e_prev.i(0))?;
    d.connect(e.o(0), de.i(0))?;
    d.connect(e_prev.o(0), de.i(1))?;
    d.connect(de.o(0), dg.i(0))?;
    d.connect(p.o(0), pd.i(0))?;
    d.connect(dg.o(0), pd.i(1))?;
    d.connect(e.o(0), te.i(0))?;
    d.connect(i_prev.o(0), i_cand.i(0))?;
    d.connect(te.o(0), i_cand.i(1))?;
    d.connect(i_cand.o(0), i_sel.i(0))?;
    d.connect(i_prev.o(0), i_sel.i(1))?;
    d.connect(pd.o(0), i_sel.i(2))?;
    d.connect(e.o(0), i_sel.i(3))?;
    d.connect(i_sel.o(0), i_prev.i(0))?;
    d.connect(i_sel.o(0), ig.i(0))?;
    d.connect(pd.o(0), u.i(0))?;
    d.connect(ig.o(0), u.i(1))?;
    d.connect(u.o(0), sat.i(0))?;
    Ok(PidFragment {
        input: e.i(0),
        output: sat.o(0),
        integral: i_prev,
    })
}

/// A single [`Pid`] block followed by a saturation.
pub fn build_saturated_pid(
    d: &mut Diagram,
    prefix: &str,
    gains: PidGains,
    t: f64,
    u_min: f64,
    u_max: f64,
) -> Result<PidFragment, GraphError> {
    let pid = d.add_named(&format!("{prefix}_pid"), Pid::new(gains, t))?;
    let sat = d.add_named(&format!("{prefix}_sat"), Saturation::new(u_min, u_max))?;
    d.connect(pid.o(0), sat.i(0))?;
    Ok(PidFragment {
        input: pid.i(0),
        output: sat.o(0),
        integral: pid,
    })
}
