use std::collections::HashSet;
use std::path::PathBuf;
use std::process::Command;

use blockflow::codegen::{lower_diagram, FlatProgram, Instr, Interpreter, Sink};
use blockflow::graph::{BlockId, Diagram, Executor, SlotRef, Value};

pub fn inports(d: &Diagram) -> Vec<BlockId> {
    d.block_ids()
        .filter(|&b| d.block(b).unwrap().kind() == "Inport")
        .collect()
}

pub fn input_at(cycle: usize, k: usize) -> f64 {
    (0.07 * cycle as f64 + k as f64).sin()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Runs engine and interpreter side by side, comparing every block output.
/// Returns the largest magnitude seen.
pub fn differential(d: Diagram, cycles: usize) -> Result<f64, String> {
    let p = lower_diagram(&d).map_err(|e| e.to_string())?;
    check_single_assignment(&p)?;
    let ports = inports(&d);
    let slots: Vec<SlotRef> = d
        .block_ids()
        .flat_map(|b| (0..d.traits(b).unwrap().outputs.len()).map(move |k| b.o(k)))
        .collect();
    let mut ex = Executor::new(d).map_err(|e| e.to_string())?;
    let mut it = Interpreter::new(p);
    let mut peak: f64 = 0.0;
    for cycle in 0..cycles {
        let inputs: Vec<f64> = (0..ports.len()).map(|k| input_at(cycle, k)).collect();
        for (&b, &v) in ports.iter().zip(&inputs) {
            ex.set_input(b, Value::Scalar(v)).unwrap();
        }
        ex.step().map_err(|e| e.to_string())?;
        it.step(&inputs).map_err(|e| e.to_string())?;
        for &s in &slots {
            let (a, b) = (ex.scalar(s).unwrap(), it.signal(s).unwrap());
            peak = peak.max(a.abs());
            if !close(a, b) {
                return Err(format!(
                    "cycle {cycle}, slot {s:?}: engine {a} vs interpreter {b}"
                ));
            }
        }
    }
    Ok(peak)
}

/// Temporaries are assigned once per cycle (Newton unknowns aside) and each
/// state slot is stored at most once.
pub fn check_single_assignment(p: &FlatProgram) -> Result<(), String> {
    fn walk(
        code: &[Instr],
        regs: &mut HashSet<usize>,
        states: &mut HashSet<usize>,
    ) -> Result<(), String> {
        for ins in code {
            let dst = match ins {
                Instr::Load { dst, .. }
                | Instr::Add { dst, .. }
                | Instr::Mul { dst, .. }
                | Instr::Neg { dst, .. }
                | Instr::Div { dst, .. }
                | Instr::Powi { dst, .. }
                | Instr::Clamp { dst, .. } => Some(*dst),
                Instr::Store {
                    dst: Sink::State(k),
                    ..
                } => {
                    if !states.insert(*k) {
                        return Err(format!("state {k} stored twice"));
                    }
                    None
                }
                Instr::Store { .. } => None,
                Instr::Newton(l) => {
                    walk(&l.residual_code, regs, states)?;
                    walk(&l.jacobian_code, regs, states)?;
                    None
                }
            };
            if let Some(r) = dst {
                if !regs.insert(r) {
                    return Err(format!("r{r} assigned twice"));
                }
            }
        }
        Ok(())
    }
    walk(&p.code, &mut HashSet::new(), &mut HashSet::new())
}

pub fn compiler() -> Option<String> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
        {
            return Some(cc.to_string());
        }
    }
    None
}

pub fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("blockflow-cc-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn compile_and_run(cc: &str, dir: &PathBuf, files: &[(&str, &str)]) -> String {
    for (name, text) in files {
        std::fs::write(dir.join(name), text).unwrap();
    }
    let exe = dir.join("harness");
    let status = Command::new(cc)
        .current_dir(dir)
        .args([
            "-std=c89",
            "-pedantic",
            "-Wall",
            "-Werror",
            "-Wno-unused-variable",
            "-Wno-unused-but-set-variable",
        ])
        .args(["-O1", "-ffp-contract=off", "-o"])
        .arg(&exe)
        .args(
            files
                .iter()
                .filter(|(n, _)| n.ends_with(".c"))
                .map(|(n, _)| *n),
        )
        .arg("-lm")
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

/// `main` stepping the model over a literal input table and printing each
/// cycle's status and outputs.
pub fn harness(name: &str, p: &FlatProgram, cycles: usize) -> String {
    let upper = name.to_ascii_uppercase();
    let ins = p.inputs().max(1);
    let mut table = String::new();
    for c in 0..cycles {
        let row: Vec<String> = (0..ins)
            .map(|k| {
                if k < p.inputs() {
                    format!("{:?}", input_at(c, k))
                } else {
                    "0.0".into()
                }
            })
            .collect();
        table.push_str(&format!("    {{{}}},\n", row.join(", ")));
    }
    format!(
        "#include <stdio.h>\n#include \"{name}.h\"\n\n\
         static const double inputs[{cycles}][{ins}] = {{\n{table}}};\n\n\
         int main(void)\n{{\n    {name}_state st;\n    double out[{upper}_OUTPUTS + 1];\n    int c, k, rc;\n\
         \x20   {name}_init(&st);\n    for (c = 0; c < {cycles}; ++c) {{\n        rc = {name}_step(&st, inputs[c], out);\n\
         \x20       printf(\"%d\", rc);\n        for (k = 0; k < {upper}_OUTPUTS; ++k) printf(\" %.17g\", out[k]);\n\
         \x20       printf(\"\\n\");\n    }}\n    return 0;\n}}\n"
    )
}
