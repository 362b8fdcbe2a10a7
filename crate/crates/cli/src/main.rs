use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use blockflow::autofocus::{self, AutofocusConfig, FocusPlant};
use blockflow::codegen::{emit_c, lower_diagram, CodegenError};
use blockflow::control::{
    c2d_tustin, c2d_zoh, dlqr, ss2tf, tf2ss, SampleTime, StateSpace, TransferFunction,
};
use blockflow::diagfile;
use blockflow::graph::{
    resolve_execution_order, Diagram, Executor, ScheduleItem, ScheduleOptions, SlotRef,
};
use blockflow::linalg::Matrix;
use blockflow::loopsolve::{LoopSystem, NewtonConfig};
use blockflow::net::{serve_echo, HmacKey, PayloadCodec};
use blockflow::stdblocks::{
    fmt_matrix, fmt_num, fmt_vector, parse_grid, parse_matrix, AntiWindup, JointScenario,
    JOINT_CSV_HEADER,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "blockflow", version, about = "Block-diagram control engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a diagram file.
    Validate { file: PathBuf },
    /// Print the execution order and the algebraic loop clusters.
    Order {
        file: PathBuf,
        /// Also print each loop's residuals and Jacobian.
        #[arg(long)]
        residuals: bool,
    },
    /// Execute cycles and write every scalar block output as CSV.
    Run {
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        cycles: usize,
        /// Output path, `-` for standard output.
        #[arg(long, default_value = "-")]
        csv: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit C source for one cycle of the diagram.
    Codegen {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base name of the generated files and symbols (default: file stem).
        #[arg(long)]
        name: Option<String>,
        /// Print the lowered program to standard output.
        #[arg(long)]
        listing: bool,
    },
    /// Control synthesis routines. Matrices are written `[1,2;3,4]`.
    #[command(subcommand)]
    Synth(Synth),
    /// Closed-loop demonstrations that write CSV traces
    #[command(subcommand)]
    Demo(Demo),
    /// Answer signed frames over UDP with signed echoes.
    NetEcho {
        #[arg(long)]
        listen: String,
        /// HMAC key, hex encoded.
        #[arg(long)]
        key: String,
        /// Stop after this many replies.
        #[arg(long)]
        limit: Option<u64>,
    },
}

#[derive(Subcommand)]
enum Synth {
    /// Discrete LQR gain and Riccati solution.
    Dlqr {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        q: String,
        #[arg(long)]
        r: String,
    },
    /// Discretize a continuous state-space model.
    C2d {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        c: String,
        #[arg(long)]
        d: String,
        #[arg(long)]
        t: f64,
        #[arg(long, value_enum, default_value_t = Method::Zoh)]
        method: Method,
    },
    /// State space to transfer function (single input, single output).
    Ss2tf {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        c: String,
        #[arg(long)]
        d: String,
    },
    /// Transfer function to controllable canonical state space.
    Tf2ss {
        /// Numerator, descending powers: `[1,2]`.
        #[arg(long)]
        num: String,
        #[arg(long)]
        den: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Zoh,
    Tustin,
}

#[derive(Subcommand)]
enum Demo {
    /// Closed-loop autofocus on a synthetic scene.
    Autofocus {
        #[arg(long, default_value_t = 1000)]
        cycles: usize,
        #[arg(long, default_value = "-")]
        csv: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.45)]
        focus: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Saturated PID on a double-integrator joint, step then disturbance.
    Pid {
        #[arg(long, default_value_t = 3000)]
        cycles: usize,
        #[arg(long, default_value = "-")]
        csv: String,
        #[arg(long, value_enum, default_value_t = Variant::Clamping)]
        variant: Variant,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    /// Single PID block followed by a saturation.
    Plain,
    /// Composite PID without windup protection.
    Composite,
    /// Composite PID holding the integral while saturated.
    Clamping,
}

enum Failure {
    /// Bad input: unreadable or malformed files, invalid diagrams or arguments.
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Validate { file } => validate(&file),
        Command::Order { file, residuals } => order(&file, residuals),
        Command::Run {
            file,
            cycles,
            csv,
            seed,
        } => run(&file, cycles, &csv, seed),
        Command::Codegen {
            file,
            out,
            name,
            listing,
        } => codegen(&file, &out, name, listing),
        Command::Synth(s) => synth(s),
        Command::Demo(Demo::Autofocus {
            cycles,
            csv,
            seed,
            focus,
            noise,
        }) => demo_autofocus(cycles, &csv, seed, focus, noise),
        Command::Demo(Demo::Pid {
            cycles,
            csv,
            variant,
        }) => demo_pid(cycles, &csv, variant),
        Command::NetEcho { listen, key, limit } => net_echo(&listen, &key, limit),
    }
}

fn load(path: &Path) -> Result<Diagram, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)?;
    diagfile::parse(&text).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))
}

fn load_valid(path: &Path) -> Result<Diagram, Failure> {
    let d = load(path)?;
    let report = d.validate();
    if !report.is_empty() {
        return Err(invalid(anyhow!(
            "{}: {}",
            path.display(),
            report.messages().join("; ")
        )));
    }
    Ok(d)
}

fn validate(path: &Path) -> Outcome {
    let d = load_valid(path)?;
    println!(
        "{}: ok ({} blocks, {} connections)",
        path.display(),
        d.len(),
        d.edges().len()
    );
    Ok(())
}

fn ids(members: &[blockflow::graph::BlockId]) -> String {
    let v: Vec<String> = members.iter().map(|b| b.0.to_string()).collect();
    format!("{{{}}}", v.join(","))
}

fn order(path: &Path, residuals: bool) -> Outcome {
    let d = load_valid(path)?;
    let s = resolve_execution_order(&d, ScheduleOptions::default()).map_err(invalid)?;
    let label = |b: blockflow::graph::BlockId| {
        format!(
            "{} {} {}",
            b.0,
            d.name(b).unwrap_or_default(),
            d.block(b).map_or("?", |k| k.kind())
        )
    };
    println!("schedule:");
    for item in &s.items {
        match *item {
            ScheduleItem::Block(b) => println!("  {}", label(b)),
            ScheduleItem::Loop(k) => println!("  loop {k} {}", ids(&s.clusters[k].members)),
        }
    }
    println!("loops: {}", s.clusters.len());
    for (k, c) in s.clusters.iter().enumerate() {
        let names: Vec<&str> = c
            .members
            .iter()
            .map(|&b| d.name(b).unwrap_or_default())
            .collect();
        println!("  loop {k}: {} ({})", ids(&c.members), names.join(", "));
        if residuals {
            let ls = LoopSystem::extract(c, &d, NewtonConfig::default()).map_err(invalid)?;
            for line in ls.system.dump().lines() {
                println!("    {line}");
            }
        }
    }
    Ok(())
}

fn sink(path: &str) -> Result<Box<dyn Write>, Failure> {
    if path == "-" {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        let f = fs::File::create(path)
            .with_context(|| format!("creating {path}"))
            .map_err(runtime)?;
        Ok(Box::new(BufWriter::new(f)))
    }
}

fn scalar_slots(d: &Diagram) -> Vec<SlotRef> {
    d.block_ids()
        .flat_map(|b| {
            let t = d.traits(b).expect("listed block");
            t.outputs
                .iter()
                .enumerate()
                .filter(|(_, ty)| **ty == blockflow::graph::ValueType::Scalar)
                .map(move |(k, _)| b.o(k))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn run(path: &Path, cycles: usize, csv: &str, seed: u64) -> Outcome {
    let d = load_valid(path)?;
    let slots = scalar_slots(&d);
    let header: Vec<String> = std::iter::once("cycle".to_string())
        .chain(slots.iter().map(|&s| d.slot_label(s)))
        .collect();
    let mut ex = Executor::new(d).map_err(invalid)?;
    ex.seed(seed);
    let mut out = sink(csv)?;
    let io_err = |e: io::Error| runtime(e);
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for k in 0..cycles {
        ex.step().map_err(|e| runtime(anyhow!("cycle {k}: {e}")))?;
        let mut row = vec![k.to_string()];
        row.extend(
            slots
                .iter()
                .map(|&s| fmt_num(ex.scalar(s).expect("scalar slot"))),
        );
        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn codegen(path: &Path, out: &Path, name: Option<String>, listing: bool) -> Outcome {
    let d = load_valid(path)?;
    let p = lower_diagram(&d).map_err(|e| match e {
        CodegenError::UnsupportedBlock { .. }
        | CodegenError::Graph(_)
        | CodegenError::Loop { .. } => invalid(e),
        other => runtime(other),
    })?;
    if listing {
        print!("{p}");
    }
    let name = name.unwrap_or_else(|| {
        path.file_stem()
            .map_or("model".into(), |s| s.to_string_lossy().into_owned())
    });
    let c = emit_c(&p, &name);
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    for (ext, text) in [("h", &c.header), ("c", &c.source)] {
        let file = out.join(format!("{}.{ext}", c.name));
        fs::write(&file, text)
            .with_context(|| format!("writing {}", file.display()))
            .map_err(runtime)?;
        println!("wrote {}", file.display());
    }
    Ok(())
}

fn matrix(key: &str, s: &str) -> Result<Matrix<f64>, Failure> {
    parse_matrix(key, s).map_err(|e| invalid(anyhow!("--{key}: {e}")))
}

fn vector(key: &str, s: &str) -> Result<Vec<f64>, Failure> {
    let rows = parse_grid(key, s).map_err(|e| invalid(anyhow!("--{key}: {e}")))?;
    match rows.as_slice() {
        [row] => Ok(row.clone()),
        _ => Err(invalid(anyhow!("--{key}: expected a single row, got {s}"))),
    }
}

fn print_system(sys: &StateSpace<f64>) {
    println!("A = {}", fmt_matrix(&sys.a));
    println!("B = {}", fmt_matrix(&sys.b));
    println!("C = {}", fmt_matrix(&sys.c));
    println!("D = {}", fmt_matrix(&sys.d));
    println!("sample time: {}", sys.sample_time);
}

fn synth(s: Synth) -> Outcome {
    match s {
        Synth::Dlqr { a, b, q, r } => {
            let (a, b, q, r) = (
                matrix("a", &a)?,
                matrix("b", &b)?,
                matrix("q", &q)?,
                matrix("r", &r)?,
            );
            let sol = dlqr(&a, &b, &q, &r).map_err(runtime)?;
            println!("K = {}", fmt_matrix(&sol.k));
            println!("P = {}", fmt_matrix(&sol.p));
            println!("iterations: {}", sol.iterations);
        }
        Synth::C2d {
            a,
            b,
            c,
            d,
            t,
            method,
        } => {
            let sys = StateSpace::continuous(
                matrix("a", &a)?,
                matrix("b", &b)?,
                matrix("c", &c)?,
                matrix("d", &d)?,
            )
            .map_err(invalid)?;
            let disc = match method {
                Method::Zoh => c2d_zoh(&sys, t),
                Method::Tustin => c2d_tustin(&sys, t),
            }
            .map_err(runtime)?;
            print_system(&disc);
        }
        Synth::Ss2tf { a, b, c, d } => {
            let sys = StateSpace::new(
                matrix("a", &a)?,
                matrix("b", &b)?,
                matrix("c", &c)?,
                matrix("d", &d)?,
                SampleTime::Continuous,
            )
            .map_err(invalid)?;
            let tf = ss2tf(&sys).map_err(runtime)?;
            println!("num = {}", fmt_vector(&tf.num));
            println!("den = {}", fmt_vector(&tf.den));
        }
        Synth::Tf2ss { num, den } => {
            let tf = TransferFunction::continuous(vector("num", &num)?, vector("den", &den)?)
                .map_err(invalid)?;
            print_system(&tf2ss(&tf).map_err(runtime)?);
        }
    }
    Ok(())
}

fn demo_autofocus(cycles: usize, csv: &str, seed: u64, focus: f64, noise: f64) -> Outcome {
    let cfg = AutofocusConfig::default();
    let mut plant = FocusPlant::new(focus, seed).with_noise(noise);
    let rows = autofocus::simulate(&cfg, &mut plant, cycles).map_err(runtime)?;
    let mut out = sink(csv)?;
    autofocus::write_csv(&rows, &mut out).map_err(runtime)?;
    out.flush().map_err(runtime)
}

fn demo_pid(cycles: usize, csv: &str, variant: Variant) -> Outcome {
    let scenario = JointScenario {
        cycles,
        ..JointScenario::default()
    };
    let strategy = match variant {
        Variant::Plain => None,
        Variant::Composite => Some(AntiWindup::None),
        Variant::Clamping => Some(AntiWindup::Clamping),
    };
    let rows = scenario.run(strategy).map_err(runtime)?;
    let mut out = sink(csv)?;
    let w = |e: io::Error| runtime(e);
    writeln!(out, "{JOINT_CSV_HEADER}").map_err(w)?;
    for r in &rows {
        let fields = [r.setpoint, r.disturbance, r.position, r.velocity, r.torque].map(fmt_num);
        writeln!(out, "{},{}", r.cycle, fields.join(",")).map_err(w)?;
    }
    out.flush().map_err(w)
}

fn net_echo(listen: &str, key: &str, limit: Option<u64>) -> Outcome {
    let key = hex::decode(key).map_err(|e| invalid(anyhow!("--key: {e}")))?;
    let socket = UdpSocket::bind(listen)
        .with_context(|| format!("binding {listen}"))
        .map_err(runtime)?;
    socket
        .set_read_timeout(Some(Duration::from_millis(200)))
        .map_err(runtime)?;
    eprintln!("listening on {}", socket.local_addr().map_err(runtime)?);
    let stats = serve_echo(
        &socket,
        &PayloadCodec::standard(),
        &HmacKey::new(key),
        limit,
    )
    .map_err(runtime)?;
    println!("echoed {}", stats.echoed);
    for (class, n) in stats.drops.iter() {
        println!("dropped {class}: {n}");
    }
    Ok(())
}
