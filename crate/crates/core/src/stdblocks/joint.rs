use std::ops::Range;

use crate::graph::{BlockId, Diagram, ExecError, Executor, GraphError, Value};

use super::{
    build_anti_windup_pid, build_saturated_pid, AntiWindup, Inport, PidFragment, PidGains,
};

/// A double-integrator joint driven by a saturated PID: the position
/// setpoint steps at `step_at` and a constant disturbance torque acts
/// during `disturbed`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointScenario {
    pub gains: PidGains,
    pub t: f64,
    /// Symmetric torque limit.
    pub limit: f64,
    pub setpoint: f64,
    pub step_at: usize,
    pub disturbance: f64,
    pub disturbed: Range<usize>,
    pub cycles: usize,
}

impl Default for JointScenario {
    fn default() -> Self {
        Self {
            gains: PidGains::new(9.0, 3.0, 6.0),
            t: 0.01,
            limit: 1.0,
            setpoint: 1.0,
            step_at: 50,
            disturbance: -1.5,
            disturbed: 1500..1700,
            cycles: 3000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointRow {
    pub cycle: usize,
    pub setpoint: f64,
    pub disturbance: f64,
    pub position: f64,
    pub velocity: f64,
    pub torque: f64,
}

pub const JOINT_CSV_HEADER: &str = "cycle,setpoint,disturbance,position,velocity,torque";

impl JointScenario {
    pub fn setpoint_at(&self, k: usize) -> f64 {
        if k >= self.step_at {
            self.setpoint
        } else {
            0.0
        }
    }

    pub fn disturbance_at(&self, k: usize) -> f64 {
        if self.disturbed.contains(&k) {
            self.disturbance
        } else {
            0.0
        }
    }

    /// Controller diagram: one input port feeding the chosen PID variant.
    /// `None` is the single-block PID followed by a saturation.
    pub fn controller(
        &self,
        strategy: Option<AntiWindup>,
    ) -> Result<(Diagram, PidFragment, BlockId), GraphError> {
        let mut d = Diagram::new();
        let e = d.add_named("error", Inport::scalar())?;
        let frag = match strategy {
            Some(s) => build_anti_windup_pid(
                &mut d,
                "pid",
                self.gains,
                self.t,
                -self.limit,
                self.limit,
                s,
            )?,
            None => {
                build_saturated_pid(&mut d, "pid", self.gains, self.t, -self.limit, self.limit)?
            }
        };
        d.connect(e.o(0), frag.input)?;
        Ok((d, frag, e))
    }

    /// Simulates the closed loop with semi-implicit Euler for the joint.
    pub fn run(&self, strategy: Option<AntiWindup>) -> Result<Vec<JointRow>, ExecError> {
        let (d, frag, e) = self
            .controller(strategy)
            .expect("fixed controller topology");
        let mut ex = Executor::new(d).expect("fixed controller topology");
        let (mut x, mut v) = (0.0f64, 0.0f64);
        let mut rows = Vec::with_capacity(self.cycles);
        for k in 0..self.cycles {
            let sp = self.setpoint_at(k);
            ex.set_input(e, Value::Scalar(sp - x))?;
            ex.step()?;
            let torque = ex.scalar(frag.output).expect("scalar output");
            let w = self.disturbance_at(k);
            rows.push(JointRow {
                cycle: k,
                setpoint: sp,
                disturbance: w,
                position: x,
                velocity: v,
                torque,
            });
            v += self.t * (torque + w);
            x += self.t * v;
        }
        Ok(rows)
    }
}

/// Largest excursion of the position beyond the setpoint after the step.
pub fn peak_overshoot(rows: &[JointRow], step_at: usize) -> f64 {
    rows.iter()
        .filter(|r| r.cycle >= step_at)
        .map(|r| (r.position - r.setpoint) * r.setpoint.signum())
        .fold(0.0, f64::max)
}
