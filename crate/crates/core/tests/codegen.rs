mod common;

use std::path::PathBuf;

use blockflow::codegen::{
    emit_c, emit_linearization, interpret, linearize, lower, lower_diagram, CodegenError,
    Interpreter, RunError,
};
use blockflow::expr::{Expr, Symbol, SymbolTable};
use blockflow::graph::{
    detect_algebraic_loops, resolve_execution_order, BlockId, Diagram, Executor, ScheduleOptions,
};
use blockflow::loopsolve::{LoopError, NewtonConfig};
use blockflow::stdblocks::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::codegen::*;
use common::lowerable_diagram;

fn gain_sum() -> (Diagram, BlockId) {
    let mut d = Diagram::new();
    let c = d.add_named("c", Constant::new(5.0)).unwrap();
    let c2 = d.add_named("c2", Constant::new(2.0)).unwrap();
    let g = d.add_named("g", Gain::new(0.5)).unwrap();
    let s = d.add_named("s", Sum::plus(2)).unwrap();
    d.connect(c.o(0), g.i(0)).unwrap();
    d.connect(g.o(0), s.i(0)).unwrap();
    d.connect(c2.o(0), s.i(1)).unwrap();
    (d, s)
}

fn feedback(c: f64, g: f64) -> (Diagram, BlockId) {
    let mut d = Diagram::new();
    let k = d.add_named("c", Constant::new(c)).unwrap();
    let s = d.add_named("s", Sum::plus(2)).unwrap();
    let gain = d.add_named("g", Gain::new(g)).unwrap();
    d.connect(k.o(0), s.i(0)).unwrap();
    d.connect(s.o(0), gain.i(0)).unwrap();
    d.connect(gain.o(0), s.i(1)).unwrap();
    (d, s)
}

/// Six sums that all feed each other through gains: the tear set has five
/// members, which exercises the looped elimination in emitted code.
fn dense_loop() -> Diagram {
    let mut d = Diagram::new();
    let m = 6;
    let sums: Vec<BlockId> = (0..m).map(|_| d.add(Sum::plus(m))).collect();
    for (i, &s) in sums.iter().enumerate() {
        let c = d.add(Constant::new(1.0 + i as f64));
        d.connect(c.o(0), s.i(0)).unwrap();
        let mut port = 1;
        for (j, &src) in sums.iter().enumerate() {
            if i != j {
                let g = d.add(Gain::new(0.05 * (1 + (i + 2 * j) % 3) as f64));
                d.connect(src.o(0), g.i(0)).unwrap();
                d.connect(g.o(0), s.i(port)).unwrap();
                port += 1;
            }
        }
    }
    d
}

#[test]
fn gain_sum_lowers_to_five_instructions() {
    let (d, s) = gain_sum();
    let p = lower_diagram(&d).unwrap();
    assert_eq!(p.count("load"), 2, "{p}");
    assert_eq!(p.count("mul"), 1, "{p}");
    assert_eq!(p.count("add"), 1, "{p}");
    assert_eq!(p.count("store"), 1, "{p}");
    assert_eq!(p.code.len(), 5, "{p}");
    assert_eq!(interpret(&p, &mut [], &[]).unwrap(), vec![4.5]);
    let mut it = Interpreter::new(p);
    it.step(&[]).unwrap();
    assert_eq!(it.signal(s.o(0)), Some(4.5));
}

#[test]
fn feedback_lowers_to_a_bounded_newton_loop() {
    let (d, s) = feedback(1.0, 0.5);
    let p = lower_diagram(&d).unwrap();
    let loops: Vec<_> = p.newton_loops().collect();
    assert_eq!(loops.len(), 1);
    assert_eq!(loops[0].dim(), 1);
    assert_eq!(loops[0].max_iterations, 50);
    assert_eq!(loops[0].tolerance, 1e-10);
    let mut it = Interpreter::new(p);
    it.step(&[]).unwrap();
    assert!((it.signal(s.o(0)).unwrap() - 2.0).abs() <= 1e-12);
    assert_eq!(it.last_iterations(0), 1);
}

#[test]
fn feedback_closed_form_and_singular_gain() {
    for (c, g) in [(1.0, 0.5), (5.0, 0.5), (2.0, -1.0)] {
        let (d, s) = feedback(c, g);
        let mut it = Interpreter::new(lower_diagram(&d).unwrap());
        it.step(&[]).unwrap();
        assert!((it.signal(s.o(0)).unwrap() - c / (1.0 - g)).abs() <= 1e-10);
    }
    let (d, _) = feedback(1.0, 1.0);
    let err = Interpreter::new(lower_diagram(&d).unwrap())
        .step(&[])
        .unwrap_err();
    assert_eq!(
        err,
        RunError::Loop {
            index: 0,
            source: LoopError::SingularJacobian
        }
    );
}

#[test]
fn function_blocks_are_not_lowerable() {
    let mut d = Diagram::new();
    let c = d.add(Constant::new(1.0));
    let f = d
        .add_named("f", FunctionBlock::scalar("tanh", f64::tanh))
        .unwrap();
    d.connect(c.o(0), f.i(0)).unwrap();
    match lower_diagram(&d) {
        Err(CodegenError::UnsupportedBlock { block, name, kind }) => {
            assert_eq!(block, f);
            assert_eq!(name, "f");
            assert_eq!(kind, "Function");
        }
        other => panic!("{other:?}"),
    }
}

fn has_loop(d: &Diagram) -> bool {
    !detect_algebraic_loops(d).is_empty()
}

#[test]
fn interpreter_matches_engine_on_random_diagrams() {
    let (mut free, mut looped) = (0, 0);
    let mut seed = 0;
    let mut worst: f64 = 0.0;
    while free < 50 || looped < 10 {
        seed += 1;
        assert!(seed < 5000, "generator too rarely produces the wanted mix");
        let d = lowerable_diagram(seed, 12);
        let bearing = has_loop(&d);
        if (bearing && looped >= 10) || (!bearing && free >= 50) {
            continue;
        }
        if Executor::new(d.clone()).is_err() {
            // Saturation inside an algebraic loop.
            continue;
        }
        let peak = differential(d, 500).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        worst = worst.max(peak);
        if bearing {
            looped += 1;
        } else {
            free += 1;
        }
    }
    eprintln!("{seed} seeds drawn, largest signal {worst:e}");
    assert!(worst < 1e4, "traces should stay bounded, saw {worst:e}");
}

#[test]
fn dense_loop_matches_engine() {
    let d = dense_loop();
    let p = lower_diagram(&d).unwrap();
    assert_eq!(p.newton_loops().next().unwrap().dim(), 5);
    differential(d, 50).unwrap();
}

#[test]
fn reset_replays_the_same_trace() {
    let d = (1..)
        .map(|s| lowerable_diagram(s, 10))
        .find(|d| {
            d.block_ids().any(|b| d.traits(b).unwrap().state_size > 0) && inports(d).is_empty()
        })
        .unwrap();
    let mut it = Interpreter::new(lower_diagram(&d).unwrap());
    let run = |it: &mut Interpreter| -> Vec<u64> {
        (0..30)
            .flat_map(|_| it.step(&[]).unwrap().to_vec())
            .map(f64::to_bits)
            .collect()
    };
    let first = run(&mut it);
    it.reset();
    assert_eq!(run(&mut it), first);
}

#[test]
fn emission_is_deterministic_and_heap_free() {
    let mut diagrams = vec![gain_sum().0, feedback(1.0, 0.5).0, dense_loop()];
    diagrams.extend(
        (1..40)
            .map(|s| lowerable_diagram(s, 12))
            .filter(|d| Executor::new(d.clone()).is_ok()),
    );
    let banned = [
        "malloc", "calloc", "realloc", "free", "alloca", "sbrk", "mmap", "new", "delete",
    ];
    for d in &diagrams {
        let a = emit_c(&lower_diagram(d).unwrap(), "model");
        let b = emit_c(&lower_diagram(d).unwrap(), "model");
        assert_eq!(a, b);
        let text = format!("{}{}", a.header, a.source);
        for word in text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
            assert!(!banned.contains(&word), "{word} in\n{text}");
        }
    }
}

#[test]
fn newton_literals_follow_the_config() {
    let (d, _) = feedback(1.0, 0.5);
    let src = emit_c(&lower_diagram(&d).unwrap(), "fb").source;
    assert!(src.contains("it <= 50"), "{src}");
    assert!(src.contains("it == 50"), "{src}");
    assert!(src.contains("nrm <= 1e-10"), "{src}");

    let cfg = NewtonConfig {
        tolerance: 2.5e-8,
        max_iterations: 17,
        ..NewtonConfig::default()
    };
    let s = resolve_execution_order(&d, ScheduleOptions::default()).unwrap();
    let src = emit_c(&lower(&d, &s, cfg).unwrap(), "fb").source;
    assert!(src.contains("it <= 17"), "{src}");
    assert!(src.contains("nrm <= 2.5e-8"), "{src}");
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
}

#[test]
fn gain_sum_matches_golden_files() {
    let (d, _) = gain_sum();
    let c = emit_c(&lower_diagram(&d).unwrap(), "gain_sum");
    let dir = golden_dir();
    if std::env::var_os("BLOCKFLOW_BLESS").is_some() {
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("gain_sum.h"), &c.header).unwrap();
        std::fs::write(dir.join("gain_sum.c"), &c.source).unwrap();
    }
    assert_eq!(
        std::fs::read_to_string(dir.join("gain_sum.h")).unwrap(),
        c.header
    );
    assert_eq!(
        std::fs::read_to_string(dir.join("gain_sum.c")).unwrap(),
        c.source
    );
}

// Linearization

fn sym(s: &str) -> Symbol {
    Symbol::new(s)
}

fn v(s: &str) -> Expr {
    Expr::var(s)
}

#[test]
fn affine_dynamics_linearize_exactly() {
    let a = [[0.9, 0.1], [-0.2, 0.7]];
    let b = [[0.0, 1.0], [0.5, -1.5]];
    let f: Vec<Expr> = (0..2)
        .map(|i| {
            Expr::sum(vec![
                Expr::product(vec![Expr::constant(a[i][0]), v("x0")]),
                Expr::product(vec![Expr::constant(a[i][1]), v("x1")]),
                Expr::product(vec![Expr::constant(b[i][0]), v("u0")]),
                Expr::product(vec![Expr::constant(b[i][1]), v("u1")]),
            ])
        })
        .collect();
    let lin = linearize(&f, &[sym("x0"), sym("x1")], &[sym("u0"), sym("u1")]);
    assert!(lin.params.is_empty());
    let (am, bm) = lin
        .evaluate(&[3.0, -7.0], &[1.0, 2.0], &SymbolTable::new())
        .unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert_eq!(am[(i, j)], a[i][j]);
            assert_eq!(bm[(i, j)], b[i][j]);
        }
    }
}

fn pendulum_like() -> Vec<Expr> {
    // x0' = x1, x1' = -x0^2 + u
    vec![
        v("x1"),
        Expr::sum(vec![Expr::negate(Expr::pow(v("x0"), 2)), v("u")]),
    ]
}

#[test]
fn quadratic_example_has_the_hand_jacobian() {
    let lin = linearize(&pendulum_like(), &[sym("x0"), sym("x1")], &[sym("u")]);
    assert_eq!(
        (lin.a.len(), lin.a[0].len(), lin.b.len(), lin.b[0].len()),
        (2, 2, 2, 1)
    );
    for x0 in [-1.5, 0.0, 0.3, 2.0] {
        let (a, b) = lin
            .evaluate(&[x0, 0.4], &[0.1], &SymbolTable::new())
            .unwrap();
        assert_eq!(
            (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]),
            (0.0, 1.0, -2.0 * x0, 0.0)
        );
        assert_eq!((b[(0, 0)], b[(1, 0)]), (0.0, 1.0));
    }
}

fn nonlinear_dynamics() -> Vec<Expr> {
    vec![
        Expr::sum(vec![
            Expr::product(vec![v("k"), v("x0"), v("x1")]),
            Expr::div(
                v("u0"),
                Expr::sum(vec![Expr::constant(2.0), Expr::pow(v("x1"), 2)]),
            )
            .unwrap(),
        ]),
        Expr::sum(vec![
            Expr::pow(v("x0"), 3),
            Expr::negate(Expr::product(vec![v("u0"), v("u1"), v("x1")])),
        ]),
        Expr::product(vec![Expr::constant(0.5), v("x2"), Expr::pow(v("u1"), 2)]),
    ]
}

#[test]
fn linearization_matches_finite_differences() {
    let xs = [sym("x0"), sym("x1"), sym("x2")];
    let us = [sym("u0"), sym("u1")];
    let f = nonlinear_dynamics();
    let lin = linearize(&f, &xs, &us);
    assert_eq!(lin.params, vec![sym("k")]);
    let mut table = SymbolTable::new();
    table.bind("k", 0.8);
    let eval = |x: &[f64], u: &[f64]| -> Vec<f64> {
        let mut t = table.clone();
        for (s, val) in xs.iter().zip(x).chain(us.iter().zip(u)) {
            t.bind(s.clone(), *val);
        }
        f.iter().map(|e| e.evaluate(&t).unwrap()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    for _ in 0..5 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let (a, b) = lin.evaluate(&x, &u, &table).unwrap();
        for j in 0..3 {
            let (mut lo, mut hi) = (x.clone(), x.clone());
            lo[j] -= h;
            hi[j] += h;
            let (fl, fh) = (eval(&lo, &u), eval(&hi, &u));
            for i in 0..3 {
                let fd = (fh[i] - fl[i]) / (2.0 * h);
                assert!(
                    (fd - a[(i, j)]).abs() <= 1e-6 * a[(i, j)].abs().max(1.0),
                    "A[{i}][{j}]"
                );
            }
        }
        for j in 0..2 {
            let (mut lo, mut hi) = (u.clone(), u.clone());
            lo[j] -= h;
            hi[j] += h;
            let (fl, fh) = (eval(&x, &lo), eval(&x, &hi));
            for i in 0..3 {
                let fd = (fh[i] - fl[i]) / (2.0 * h);
                assert!(
                    (fd - b[(i, j)]).abs() <= 1e-6 * b[(i, j)].abs().max(1.0),
                    "B[{i}][{j}]"
                );
            }
        }
    }
}

#[test]
fn linearization_source_declares_the_entry_point() {
    let (_, src) = emit_linearization(
        &pendulum_like(),
        &[sym("x0"), sym("x1")],
        &[sym("u")],
        "pend_lin",
    );
    assert!(src.contains(
        "void pend_lin(const double *x, const double *u, const double *p, double *A, double *B)"
    ));
    assert!(src.contains("A[2] = "), "{src}");
    assert!(src.contains("B[1] = 1.0;"), "{src}");
}

#[test]
fn emitted_c_matches_interpreter_when_a_compiler_exists() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let cycles = 100;
    let mut diagrams = vec![
        gain_sum().0,
        feedback(1.0, 0.5).0,
        feedback(2.0, -1.0).0,
        dense_loop(),
    ];
    diagrams.extend(
        (1..200)
            .map(|s| lowerable_diagram(s, 12))
            .filter(|d| Executor::new(d.clone()).is_ok() && !d.unconnected_outputs().is_empty())
            .take(20),
    );
    for (n, d) in diagrams.iter().enumerate() {
        let p = lower_diagram(d).unwrap();
        let c = emit_c(&p, "model");
        let dir = scratch(&n.to_string());
        let text = compile_and_run(
            &cc,
            &dir,
            &[
                ("model.h", &c.header),
                ("model.c", &c.source),
                ("main.c", &harness("model", &p, cycles)),
            ],
        );
        let mut it = Interpreter::new(p);
        for (cycle, line) in text.lines().enumerate() {
            let inputs: Vec<f64> = (0..it.program().inputs())
                .map(|k| input_at(cycle, k))
                .collect();
            let want = it.step(&inputs).unwrap().to_vec();
            let mut fields = line.split_whitespace();
            assert_eq!(fields.next(), Some("0"), "diagram {n}, cycle {cycle}");
            let got: Vec<f64> = fields.map(|f| f.parse().unwrap()).collect();
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!(
                    close(*g, *w),
                    "diagram {n}, cycle {cycle}: C {g} vs interpreter {w}"
                );
            }
        }
        assert_eq!(text.lines().count(), cycles);
        let _ = std::fs::remove_dir_all(&dir);
    }
}

#[test]
fn emitted_linearization_compiles_and_agrees() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let xs = [sym("x0"), sym("x1"), sym("x2")];
    let us = [sym("u0"), sym("u1")];
    let (lin, src) = emit_linearization(&nonlinear_dynamics(), &xs, &us, "lin");
    let (x, u, k) = ([0.3, -1.2, 0.7], [1.1, -0.4], 0.8);
    let main = format!(
        "#include <stdio.h>\nvoid lin(const double *x, const double *u, const double *p, double *A, double *B);\n\
         int main(void)\n{{\n    double x[3] = {{{:?}, {:?}, {:?}}}, u[2] = {{{:?}, {:?}}}, p[1] = {{{k:?}}};\n\
         \x20   double A[9], B[6];\n    int i;\n    lin(x, u, p, A, B);\n\
         \x20   for (i = 0; i < 9; ++i) printf(\"%.17g\\n\", A[i]);\n\
         \x20   for (i = 0; i < 6; ++i) printf(\"%.17g\\n\", B[i]);\n    return 0;\n}}\n",
        x[0], x[1], x[2], u[0], u[1]
    );
    let dir = scratch("lin");
    let text = compile_and_run(&cc, &dir, &[("lin.c", &src), ("main.c", &main)]);
    let mut table = SymbolTable::new();
    table.bind("k", k);
    let (a, b) = lin.evaluate(&x, &u, &table).unwrap();
    let want: Vec<f64> = a.as_slice().iter().chain(b.as_slice()).copied().collect();
    let got: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert!(close(*g, *w), "{g} vs {w}");
    }
    let _ = std::fs::remove_dir_all(&dir);
}
