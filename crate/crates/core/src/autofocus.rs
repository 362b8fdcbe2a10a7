//! Sharpness-driven autofocus controller with a simulated lens plant.
//!
//! Each cycle the controller measures sharpness (max |noise-robust
//! Laplacian|), compares it with the value from `window` cycles ago, feeds
//! that change to a PID whose output moves the focus setpoint, and clamps
//! the setpoint to `[lo, hi]`. A persistent drop in sharpness reverses the
//! search direction.

use std::collections::VecDeque;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block_plumbing;
use crate::graph::{
    check_inputs, Block, BlockError, BlockId, BlockTraits, Diagram, GraphError, Lowering, Value,
    ValueType,
};
use crate::imaging::{gaussian_blur, noise_robust_laplacian, sharpness, ImageBuffer, ImagingError};
use crate::stdblocks::{
    fmt_num, Conv2DBlock, DelayLine, FunctionBlock, Pid, PidGains, PidState, Saturation, Sum,
    UnitDelay,
};

/// Controller tuning. Every gain and threshold of the loop lives here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutofocusConfig {
    /// Cycles between the two compared sharpness samples.
    pub window: usize,
    pub gains: PidGains,
    /// Sample time (one image per cycle at 27 Hz).
    pub t: f64,
    /// A sharpness change below `-reversal_threshold * s` counts as a drop.
    pub reversal_threshold: f64,
    /// Consecutive drops needed before reversing.
    pub persist: usize,
    /// Initial bound on the setpoint step per cycle.
    pub initial_step: f64,
    /// Factor applied to the step bound on each reversal.
    pub step_decay: f64,
    pub min_step: f64,
    pub lo: f64,
    pub hi: f64,
    pub initial_setpoint: f64,
}

impl Default for AutofocusConfig {
    fn default() -> Self {
        Self {
            window: 100,
            gains: PidGains::new(0.1, 0.0, 0.0),
            t: 1.0 / 27.0,
            reversal_threshold: 0.02,
            persist: 6,
            initial_step: 0.006,
            step_decay: 0.3,
            min_step: 1e-5,
            lo: 0.0,
            hi: 0.6,
            initial_setpoint: 0.0,
        }
    }
}

/// Ring buffer answering "what was written `capacity` pushes ago", with
/// zeros during warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessBuffer {
    buf: Vec<f64>,
    head: usize,
}

impl SharpnessBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be at least 1");
        Self {
            buf: vec![0.0; capacity],
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }

    pub fn ago(&self) -> f64 {
        self.buf[self.head]
    }

    pub fn push(&mut self, x: f64) {
        self.buf[self.head] = x;
        self.head = (self.head + 1) % self.buf.len();
    }
}

/// Outcome of one direction decision, applied by [`Reversal::commit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    /// Unclamped next setpoint.
    pub candidate: f64,
    pub flipped: bool,
    neg_run: usize,
    since_move: usize,
}

/// Search-direction memory.
///
/// Works only from the previous committed setpoint so the same code can
/// run inside a diagram block fed by a unit delay.
#[derive(Debug, Clone, PartialEq)]
pub struct Reversal {
    direction: f64,
    neg_run: usize,
    since_flip: usize,
    step_cap: f64,
    since_move: usize,
    last_setpoint: f64,
    /// The `window - 1` setpoints before the previous one, oldest first.
    history: VecDeque<f64>,
}

impl Reversal {
    pub fn new(cfg: &AutofocusConfig) -> Self {
        assert!(cfg.window >= 1, "window must be at least 1");
        Self {
            direction: 1.0,
            neg_run: 0,
            since_flip: cfg.window,
            step_cap: cfg.initial_step,
            since_move: cfg.window,
            last_setpoint: cfg.initial_setpoint,
            history: std::iter::repeat_n(cfg.initial_setpoint, cfg.window - 1).collect(),
        }
    }

    pub fn direction(&self) -> f64 {
        self.direction
    }

    pub fn step_cap(&self) -> f64 {
        self.step_cap
    }

    /// Next setpoint from PID output `u`, sharpness change `e`, sharpness
    /// `s` and previous setpoint `sp_prev`. Does not modify state.
    pub fn decide(&self, cfg: &AutofocusConfig, u: f64, e: f64, s: f64, sp_prev: f64) -> Decision {
        let since_move = if sp_prev != self.last_setpoint {
            0
        } else {
            self.since_move.saturating_add(1)
        };
        let neg_run = if e < -cfg.reversal_threshold * s {
            self.neg_run + 1
        } else {
            0
        };
        let flipped =
            neg_run >= cfg.persist && self.since_flip >= cfg.window && since_move < cfg.window;
        let candidate = if flipped {
            // Jump back to the midpoint of the last window, where the peak was passed.
            let then = self.history.front().copied().unwrap_or(sp_prev);
            0.5 * (sp_prev + then)
        } else {
            sp_prev + self.direction * u.abs().min(self.step_cap)
        };
        Decision {
            candidate,
            flipped,
            neg_run,
            since_move,
        }
    }

    pub fn commit(&mut self, cfg: &AutofocusConfig, d: &Decision, sp_prev: f64) {
        if d.flipped {
            self.direction = -self.direction;
            self.step_cap = (self.step_cap * cfg.step_decay).max(cfg.min_step);
            self.neg_run = 0;
            self.since_flip = 1;
        } else {
            self.neg_run = d.neg_run;
            self.since_flip = self.since_flip.saturating_add(1);
        }
        self.since_move = d.since_move;
        self.last_setpoint = sp_prev;
        if cfg.window > 1 {
            self.history.pop_front();
            self.history.push_back(sp_prev);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutofocusState {
    pub buffer: SharpnessBuffer,
    pub pid: PidState,
    pub reversal: Reversal,
    pub setpoint: f64,
}

impl AutofocusState {
    pub fn new(cfg: &AutofocusConfig) -> Self {
        Self {
            buffer: SharpnessBuffer::new(cfg.window),
            pid: PidState::default(),
            reversal: Reversal::new(cfg),
            setpoint: cfg.initial_setpoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub sharpness: f64,
    pub error: f64,
    pub setpoint: f64,
    pub reversed: bool,
}

/// One controller cycle on a captured image.
pub fn autofocus_step(
    img: &ImageBuffer<f64>,
    st: &mut AutofocusState,
    cfg: &AutofocusConfig,
) -> Result<StepOutput, ImagingError> {
    let s = sharpness(&noise_robust_laplacian(img)?);
    let e = s - st.buffer.ago();
    st.buffer.push(s);
    let u = st.pid.step(cfg.gains, cfg.t, e);
    let d = st.reversal.decide(cfg, u, e, s, st.setpoint);
    st.reversal.commit(cfg, &d, st.setpoint);
    st.setpoint = d.candidate.clamp(cfg.lo, cfg.hi);
    Ok(StepOutput {
        sharpness: s,
        error: e,
        setpoint: st.setpoint,
        reversed: d.flipped,
    })
}

/// 32×32 scene of three unit-intensity rectangles on black.
pub fn default_scene() -> ImageBuffer<f64> {
    let rects = [(8..20, 6..14), (18..26, 18..28), (5..9, 20..24)];
    ImageBuffer::from_fn(32, 32, |r, c| {
        if rects
            .iter()
            .any(|(rr, cc)| rr.contains(&r) && cc.contains(&c))
        {
            1.0
        } else {
            0.0
        }
    })
}

/// Lens with a first-order motor; blur grows linearly with defocus.
#[derive(Debug, Clone)]
pub struct FocusPlant {
    scene: ImageBuffer<f64>,
    pub true_focus: f64,
    motor: f64,
    initial_motor: f64,
    /// Motor time constant.
    pub tau: f64,
    /// Sample time.
    pub t: f64,
    pub sigma0: f64,
    pub slope: f64,
    /// Uniform noise half-width added to every pixel.
    pub noise: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl FocusPlant {
    /// Default plant: scene contrast 1, sigma0 0.6, slope 8, motor lag
    /// `T/τ = 0.35`, 5% noise.
    pub fn new(true_focus: f64, seed: u64) -> Self {
        let t = 1.0 / 27.0;
        Self {
            scene: default_scene(),
            true_focus,
            motor: 0.0,
            initial_motor: 0.0,
            tau: t / 0.35,
            t,
            sigma0: 0.6,
            slope: 8.0,
            noise: 0.05,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_motor(mut self, m: f64) -> Self {
        self.motor = m;
        self.initial_motor = m;
        self
    }

    pub fn with_noise(mut self, a: f64) -> Self {
        self.noise = a;
        self
    }

    pub fn scene(&self) -> &ImageBuffer<f64> {
        &self.scene
    }

    pub fn motor(&self) -> f64 {
        self.motor
    }

    pub fn set_motor(&mut self, m: f64) {
        self.motor = m;
    }

    pub fn sigma(&self) -> f64 {
        self.sigma0 + self.slope * (self.motor - self.true_focus).abs()
    }

    /// Blurred scene plus noise. Consumes one noise draw per pixel.
    pub fn render(&mut self) -> ImageBuffer<f64> {
        let mut img = gaussian_blur(&self.scene, self.sigma());
        if self.noise > 0.0 {
            for x in img.as_mut_slice() {
                *x += self.noise * self.rng.gen_range(-1.0..1.0);
            }
        }
        img
    }

    /// First-order lag toward `setpoint`; a time constant at or below the
    /// sample time reaches it in one step.
    pub fn motor_step(&mut self, setpoint: f64) {
        let alpha = (self.t / self.tau).min(1.0);
        self.motor = self.motor + alpha * (setpoint - self.motor);
    }

    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Restores the initial motor position and noise stream.
    pub fn reset(&mut self) {
        self.motor = self.initial_motor;
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub cycle: usize,
    pub sharpness: f64,
    pub error: f64,
    pub setpoint: f64,
    /// Motor position after this cycle's move.
    pub motor: f64,
    pub true_focus: f64,
}

/// Closed-loop run of the hand-coded controller.
pub fn simulate(
    cfg: &AutofocusConfig,
    plant: &mut FocusPlant,
    cycles: usize,
) -> Result<Vec<TraceRow>, ImagingError> {
    let mut st = AutofocusState::new(cfg);
    let mut rows = Vec::with_capacity(cycles);
    let mut img = plant.render();
    for cycle in 0..cycles {
        let out = autofocus_step(&img, &mut st, cfg)?;
        plant.motor_step(out.setpoint);
        img = plant.render();
        rows.push(TraceRow {
            cycle,
            sharpness: out.sharpness,
            error: out.error,
            setpoint: out.setpoint,
            motor: plant.motor(),
            true_focus: plant.true_focus,
        });
    }
    Ok(rows)
}

/// First cycle from which the motor stays within `tol` of the true focus
/// for `hold` consecutive cycles.
pub fn settle_cycle(rows: &[TraceRow], tol: f64, hold: usize) -> Option<usize> {
    let ok: Vec<bool> = rows
        .iter()
        .map(|r| (r.motor - r.true_focus).abs() <= tol)
        .collect();
    let mut run = 0;
    for (i, &good) in ok.iter().enumerate() {
        run = if good { run + 1 } else { 0 };
        if run == hold {
            return Some(i + 1 - hold);
        }
    }
    None
}

pub const CSV_HEADER: &str = "cycle,sharpness,error,setpoint,motor,true_focus";

pub fn write_csv(rows: &[TraceRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.cycle,
            fmt_num(r.sharpness),
            fmt_num(r.error),
            fmt_num(r.setpoint),
            fmt_num(r.motor),
            fmt_num(r.true_focus)
        )?;
    }
    Ok(())
}

/// The plant as a diagram block: outputs the current image; on update the
/// motor moves toward the input setpoint and the next image is rendered.
#[derive(Debug, Clone)]
pub struct FocusPlantBlock {
    plant: FocusPlant,
    image: ImageBuffer<f64>,
}

impl FocusPlantBlock {
    pub fn new(mut plant: FocusPlant) -> Self {
        let image = plant.render();
        Self { plant, image }
    }

    pub fn plant(&self) -> &FocusPlant {
        &self.plant
    }
}

impl Block for FocusPlantBlock {
    fn kind(&self) -> &'static str {
        "FocusPlant"
    }

    fn traits(&self) -> BlockTraits {
        let (r, c) = self.image.shape();
        BlockTraits {
            inputs: vec![ValueType::Scalar],
            outputs: vec![ValueType::Image(r, c)],
            direct_feedthrough: false,
            symbolic: false,
            state_size: 0,
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        vec![
            ("focus".into(), fmt_num(self.plant.true_focus)),
            ("noise".into(), fmt_num(self.plant.noise)),
        ]
    }

    fn output(&self, _inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        outputs[0] = Value::Image(self.image.clone());
        Ok(())
    }

    fn update(&mut self, inputs: &[&Value]) -> Result<(), BlockError> {
        check_inputs(&[ValueType::Scalar], inputs)?;
        self.plant
            .motor_step(inputs[0].as_scalar().expect("checked"));
        self.image = self.plant.render();
        Ok(())
    }

    fn reset(&mut self) {
        self.plant.reset();
        self.image = self.plant.render();
    }

    fn seed(&mut self, seed: u64) {
        self.plant.reseed(seed);
        self.plant.reset();
        self.image = self.plant.render();
    }

    fn lowering(&self) -> Lowering {
        Lowering::Unsupported
    }

    block_plumbing!();
}

/// Direction logic as a block. Inputs: PID output, sharpness change,
/// sharpness, previous setpoint. Output: unclamped next setpoint.
#[derive(Debug, Clone)]
pub struct FocusDirectorBlock {
    cfg: AutofocusConfig,
    state: Reversal,
}

impl FocusDirectorBlock {
    pub fn new(cfg: AutofocusConfig) -> Self {
        Self {
            state: Reversal::new(&cfg),
            cfg,
        }
    }

    pub fn reversal(&self) -> &Reversal {
        &self.state
    }

    fn args(inputs: &[&Value]) -> Result<[f64; 4], BlockError> {
        check_inputs(&[ValueType::Scalar; 4], inputs)?;
        let v = |k: usize| inputs[k].as_scalar().expect("checked");
        Ok([v(0), v(1), v(2), v(3)])
    }
}

impl Block for FocusDirectorBlock {
    fn kind(&self) -> &'static str {
        "FocusDirector"
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

    fn output(&self, inputs: &[&Value], outputs: &mut [Value]) -> Result<(), BlockError> {
        let [u, e, s, sp] = Self::args(inputs)?;
        outputs[0] = Value::Scalar(self.state.decide(&self.cfg, u, e, s, sp).candidate);
        Ok(())
    }

    fn update(&mut self, inputs: &[&Value]) -> Result<(), BlockError> {
        let [u, e, s, sp] = Self::args(inputs)?;
        let d = self.state.decide(&self.cfg, u, e, s, sp);
        self.state.commit(&self.cfg, &d, sp);
        Ok(())
    }

    fn reset(&mut self) {
        self.state = Reversal::new(&self.cfg);
    }

    fn lowering(&self) -> Lowering {
        Lowering::Unsupported
    }

    block_plumbing!();
}

/// Block ids of interest in the autofocus diagram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutofocusDiagram {
    pub plant: BlockId,
    pub sharpness: BlockId,
    pub error: BlockId,
    pub setpoint: BlockId,
}

/// The controller and plant as a diagram: plant → Conv2D → sharpness →
/// delay line and difference → PID → direction logic → saturation → plant.
pub fn build_diagram(
    cfg: &AutofocusConfig,
    plant: FocusPlant,
) -> Result<(Diagram, AutofocusDiagram), GraphError> {
    let (rows, cols) = plant.scene().shape();
    let mut d = Diagram::new();
    let p = d.add_named("plant", FocusPlantBlock::new(plant))?;
    let conv = d.add_named("laplacian", Conv2DBlock::laplacian(rows, cols))?;
    let sharp = d.add_named("sharpness", FunctionBlock::sharpness(rows, cols))?;
    let memory = d.add_named("memory", DelayLine::new(cfg.window))?;
    let err = d.add_named("error", Sum::new("+-").expect("valid signs"))?;
    let pid = d.add_named("pid", Pid::new(cfg.gains, cfg.t))?;
    let dir = d.add_named("director", FocusDirectorBlock::new(*cfg))?;
    let sat = d.add_named("setpoint", Saturation::new(cfg.lo, cfg.hi))?;
    let prev = d.add_named("previous", UnitDelay::with_initial(cfg.initial_setpoint))?;

    d.connect(p.o(0), conv.i(0))?;
    d.connect(conv.o(0), sharp.i(0))?;
    d.connect(sharp.o(0), memory.i(0))?;
    d.connect(sharp.o(0), err.i(0))?;
    d.connect(memory.o(0), err.i(1))?;
    d.connect(err.o(0), pid.i(0))?;
    d.connect(pid.o(0), dir.i(0))?;
    d.connect(err.o(0), dir.i(1))?;
    d.connect(sharp.o(0), dir.i(2))?;
    d.connect(prev.o(0), dir.i(3))?;
    d.connect(dir.o(0), sat.i(0))?;
    d.connect(sat.o(0), p.i(0))?;
    d.connect(sat.o(0), prev.i(0))?;
    Ok((
        d,
        AutofocusDiagram {
            plant: p,
            sharpness: sharp,
            error: err,
            setpoint: sat,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_warm_up_reads_zero() {
        let mut b = SharpnessBuffer::new(3);
        let mut seen = vec![];
        for x in 1..=5 {
            seen.push(b.ago());
            b.push(x as f64);
        }
        assert_eq!(seen, vec![0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn motor_examples() {
        let mut p = FocusPlant::new(0.45, 0).with_motor(0.3);
        p.motor_step(0.3);
        assert_eq!(p.motor(), 0.3);
        p.tau = p.t / 2.0;
        p.motor_step(0.5);
        assert_eq!(p.motor(), 0.5);
    }
}
