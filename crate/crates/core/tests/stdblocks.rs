use blockflow::expr::{Expr, SymbolTable};
use blockflow::graph::{Block, BlockId, Diagram, Executor, SymCtx, Value, ValueType};
use blockflow::imaging::ImageBuffer;
use blockflow::linalg::Matrix;
use blockflow::stdblocks::*;
use proptest::prelude::*;

fn outputs_of(b: &dyn Block, inputs: &[Value]) -> Vec<Value> {
    let refs: Vec<&Value> = inputs.iter().collect();
    let mut out: Vec<Value> = b.traits().outputs.iter().map(|&t| Value::zero(t)).collect();
    b.output(&refs, &mut out).unwrap();
    out
}

/// One instance of every kind that takes inputs, with inputs chosen so a
/// perturbation of input 0 stays in the block's sensitive region.
fn specimens() -> Vec<Box<dyn Block>> {
    let a = Matrix::from_rows(&[&[0.5, 0.1], &[0.0, 0.8]]);
    vec![
        Box::new(Gain::new(1.5)),
        Box::new(Sum::new("+-").unwrap()),
        Box::new(Product::new(2)),
        Box::new(Saturation::new(-10.0, 10.0)),
        Box::new(UnitDelay::new()),
        Box::new(Integrator::new(0.1)),
        Box::new(DelayLine::new(3)),
        Box::new(Pid::new(PidGains::new(1.0, 0.5, 0.1), 0.1)),
        Box::new(Pid::new(PidGains::new(0.0, 1.0, 0.0), 0.1)),
        Box::new(DiscreteStateSpace::new(a.clone(), vec![1.0, 0.5], vec![1.0, 1.0], 0.0).unwrap()),
        Box::new(DiscreteStateSpace::new(a, vec![1.0, 0.5], vec![1.0, 1.0], 2.0).unwrap()),
        Box::new(ConditionalIntegrator::new(1.0, -100.0, 100.0)),
        Box::new(FunctionBlock::scalar("tanh", f64::tanh)),
    ]
}

fn history_inputs(b: &dyn Block, xs: &[f64]) -> Vec<Value> {
    let n = b.traits().inputs.len();
    (0..n).map(|k| Value::Scalar(xs[k % xs.len()])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feedthrough_flag_matches_behavior(
        history in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 0..5),
        now in prop::collection::vec(0.1f64..2.0, 4),
        bump in 0.1f64..1.0,
    ) {
        for mut b in specimens() {
            for xs in &history {
                let inputs = history_inputs(b.as_ref(), xs);
                let refs: Vec<&Value> = inputs.iter().collect();
                b.update(&refs).unwrap();
            }
            let base = history_inputs(b.as_ref(), &now);
            let mut bumped = base.clone();
            bumped[0] = Value::Scalar(now[0] + bump);
            let changed = outputs_of(b.as_ref(), &base) != outputs_of(b.as_ref(), &bumped);
            prop_assert_eq!(changed, b.traits().direct_feedthrough, "{}", b.kind());
        }
    }

    #[test]
    fn symbolic_output_and_update_match_numeric(
        history in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 0..5),
        now in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let ctx = SymCtx::new(BlockId(3));
        for mut b in specimens() {
            if !b.traits().symbolic {
                continue;
            }
            for xs in &history {
                let inputs = history_inputs(b.as_ref(), xs);
                let refs: Vec<&Value> = inputs.iter().collect();
                b.update(&refs).unwrap();
            }
            let inputs = history_inputs(b.as_ref(), &now);
            let mut table = SymbolTable::<f64>::new();
            let vars: Vec<Expr> = (0..inputs.len())
                .map(|k| {
                    table.bind(format!("u{k}"), inputs[k].as_scalar().unwrap());
                    Expr::var(format!("u{k}"))
                })
                .collect();
            for (k, p) in b.param_values().into_iter().enumerate() {
                table.bind(ctx.param_symbol(k), p);
            }
            for (k, s) in b.state().into_iter().enumerate() {
                table.bind(ctx.state_symbol(k), s);
            }
            let sym = b.symbolic_output(&vars, &ctx).unwrap();
            for (e, v) in sym.iter().zip(outputs_of(b.as_ref(), &inputs)) {
                let x = e.evaluate(&table).unwrap();
                prop_assert!((x - v.as_scalar().unwrap()).abs() <= 1e-12, "{} output", b.kind());
            }
            let next = b.symbolic_update(&vars, &ctx).unwrap();
            let refs: Vec<&Value> = inputs.iter().collect();
            b.update(&refs).unwrap();
            for (e, s) in next.iter().zip(b.state()) {
                prop_assert!((e.evaluate(&table).unwrap() - s).abs() <= 1e-12, "{} update", b.kind());
            }
        }
    }
}

#[test]
fn function_and_conv_blocks_are_never_symbolic() {
    let f = FunctionBlock::scalar("square", |x| x * x);
    assert!(!f.traits().symbolic);
    assert!(f
        .symbolic_output(&[Expr::var("u")], &SymCtx::new(BlockId(0)))
        .is_none());
    let c = Conv2DBlock::laplacian(8, 8);
    assert!(!c.traits().symbolic);
    assert!(c.traits().direct_feedthrough);
    let img = Value::Image(ImageBuffer::from_fn(8, 8, |r, c| ((r + c) % 2) as f64));
    let out = outputs_of(&c, &[img]);
    assert_eq!(out[0].as_image().unwrap().shape(), (8, 8));
}

fn pid_loop(
    gains: PidGains,
    t: f64,
    lo: f64,
    hi: f64,
    strategy: Option<AntiWindup>,
) -> (Executor, BlockId, PidFragment) {
    let mut d = Diagram::new();
    let u = d.add_named("u", Inport::scalar()).unwrap();
    let frag = match strategy {
        Some(s) => build_anti_windup_pid(&mut d, "c", gains, t, lo, hi, s).unwrap(),
        None => build_saturated_pid(&mut d, "c", gains, t, lo, hi).unwrap(),
    };
    d.connect(u.o(0), frag.input).unwrap();
    (Executor::new(d).unwrap(), u, frag)
}

#[test]
fn clamped_integral_stays_below_the_headroom() {
    for (kp, e) in [(0.5, 1.0), (1.0, 10.0), (0.2, 3.0)] {
        let (ki, t, hi) = (1.0, 0.1, 1.0);
        let (mut ex, u, frag) = pid_loop(
            PidGains::new(kp, ki, 0.0),
            t,
            -hi,
            hi,
            Some(AntiWindup::Clamping),
        );
        let bound = ((hi - kp * e) / ki).max(0.0);
        for _ in 0..200 {
            ex.set_input(u, Value::Scalar(e)).unwrap();
            ex.step().unwrap();
            let integral = ex.block::<UnitDelay>(frag.integral).unwrap().state()[0];
            assert!(
                integral <= bound + 1e-12,
                "kp {kp} e {e}: {integral} > {bound}"
            );
            assert!(integral >= 0.0);
        }
    }
}

#[test]
fn inactive_saturation_reproduces_plain_pid() {
    use rand::{Rng, SeedableRng};
    let gains = PidGains::new(1.3, 0.7, 0.05);
    let t = 0.02;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for strategy in [AntiWindup::Clamping, AntiWindup::None] {
        let (mut ex, u, frag) = pid_loop(gains, t, -1e6, 1e6, Some(strategy));
        let mut st = PidState::default();
        for _ in 0..100 {
            let e = rng.gen_range(-1.0..1.0);
            ex.set_input(u, Value::Scalar(e)).unwrap();
            ex.step().unwrap();
            let want = st.step(gains, t, e);
            assert!((ex.scalar(frag.output).unwrap() - want).abs() <= 1e-12);
        }
    }
}

/// Double integrator pushed by a disturbance that exceeds the actuator
/// range, then released. Returns the worst undershoot after release.
fn undershoot_after_release(
    gains: PidGains,
    w: f64,
    on: usize,
    strategy: Option<AntiWindup>,
) -> f64 {
    let t = 0.01;
    let (mut ex, u, frag) = pid_loop(gains, t, -1.0, 1.0, strategy);
    let (mut x, mut v) = (0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for k in 0..3000 {
        ex.set_input(u, Value::Scalar(-x)).unwrap();
        ex.step().unwrap();
        let force = ex.scalar(frag.output).unwrap() + if k < on { w } else { 0.0 };
        v += t * force;
        x += t * v;
        if k >= on {
            worst = worst.min(x);
        }
    }
    -worst
}

#[test]
fn anti_windup_overshoots_less_after_release() {
    for (kp, ki, kd, w, on) in [
        (4.0, 2.0, 3.0, 1.5, 100),
        (4.0, 2.0, 3.0, 1.5, 200),
        (9.0, 3.0, 6.0, 2.0, 100),
    ] {
        let g = PidGains::new(kp, ki, kd);
        let plain = undershoot_after_release(g, w, on, None);
        let clamped = undershoot_after_release(g, w, on, Some(AntiWindup::Clamping));
        assert!(clamped < plain, "{clamped} vs {plain}");
    }
}

#[test]
fn registry_round_trips_parameters() {
    let reg = BlockRegistry::standard();
    for kind in reg.kinds().collect::<Vec<_>>() {
        let made = reg.create(kind, Params::new(Vec::new())).unwrap();
        let Ok(b) = made else { continue };
        let again = reg.create(kind, Params::new(b.params())).unwrap().unwrap();
        assert_eq!(again.params(), b.params(), "{kind}");
        assert_eq!(again.traits(), b.traits(), "{kind}");
    }
}

#[test]
fn scalar_only_types_reported() {
    let g = Gain::elementwise(2.0, ValueType::Vector(3));
    let out = outputs_of(&g, &[Value::Vector(vec![1.0, 2.0, 3.0])]);
    assert_eq!(out[0], Value::Vector(vec![2.0, 4.0, 6.0]));
}
