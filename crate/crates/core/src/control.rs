//! Joint-space PID control with gravity compensation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rbd::{JointState, RobotModel};

/// Diagonal PID gains and the component-wise bound on the integral state (rad·s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
    pub integral_clip: Vec<f64>,
}

impl PidGains {
    pub fn uniform(n: usize, kp: f64, ki: f64, kd: f64, clip: f64) -> Self {
        PidGains {
            kp: vec![kp; n],
            ki: vec![ki; n],
            kd: vec![kd; n],
            integral_clip: vec![clip; n],
        }
    }

    /// Gains tuned for the built-in seven-joint model at a 100 Hz control rate.
    pub fn default_for(n: usize) -> Self {
        Self::uniform(n, 600.0, 60.0, 25.0, 2.0)
    }

    pub fn dof(&self) -> usize {
        self.kp.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kp.len();
        check_dim("ki", n, self.ki.len())?;
        check_dim("kd", n, self.kd.len())?;
        check_dim("integral_clip", n, self.integral_clip.len())?;
        let gains_ok = self
            .kp
            .iter()
            .chain(&self.ki)
            .chain(&self.kd)
            .all(|g| g.is_finite() && *g >= 0.0);
        if !gains_ok {
            return Err(Error::Config("PID gains must be finite and non-negative".into()));
        }
        if !self.integral_clip.iter().all(|c| c.is_finite() && *c > 0.0) {
            return Err(Error::Config("integral clip bounds must be positive".into()));
        }
        Ok(())
    }
}

/// One controller update. Returns the motor torque and the updated integral state.
///
/// The integral accumulates `(q* − q)·dt` and is then clipped to `±c` per joint.
pub fn pid_step(
    gains: &PidGains,
    model: &RobotModel,
    state: &JointState,
    q_ref: &DVector<f64>,
    qd_ref: &DVector<f64>,
    integral: &DVector<f64>,
    dt_env: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = model.dof();
    check_dim("pid gains", n, gains.dof())?;
    check_dim("q_ref", n, q_ref.len())?;
    check_dim("qd_ref", n, qd_ref.len())?;
    check_dim("integral", n, integral.len())?;
    let finite = q_ref
        .iter()
        .chain(qd_ref.iter())
        .chain(integral.iter())
        .all(|v| v.is_finite());
    if !finite || !state.is_finite() || !dt_env.is_finite() {
        return Err(Error::Numeric("non-finite controller input".into()));
    }
    let err = q_ref - &state.q;
    let derr = qd_ref - &state.qd;
    let mut next = DVector::zeros(n);
    let mut tau = model.gravity_torque(&state.q)?;
    for j in 0..n {
        let c = gains.integral_clip[j];
        next[j] = (integral[j] + err[j] * dt_env).clamp(-c, c);
        tau[j] += gains.kp[j] * err[j] + gains.ki[j] * next[j] + gains.kd[j] * derr[j];
    }
    Ok((tau, next))
}

/// Anything that maps the current state and reference to a motor torque.
pub trait Controller {
    fn reset(&mut self, n: usize);

    fn command(
        &mut self,
        model: &RobotModel,
        state: &JointState,
        q_ref: &DVector<f64>,
        qd_ref: &DVector<f64>,
        dt_env: f64,
    ) -> Result<DVector<f64>>;
}

/// Stateful wrapper that owns the integral term.
#[derive(Debug, Clone)]
pub struct PidController {
    pub gains: PidGains,
    integral: DVector<f64>,
}

impl PidController {
    pub fn new(gains: PidGains) -> Self {
        let n = gains.dof();
        PidController {
            gains,
            integral: DVector::zeros(n),
        }
    }

    pub fn integral(&self) -> &DVector<f64> {
        &self.integral
    }
}

impl Controller for PidController {
    fn reset(&mut self, n: usize) {
        self.integral = DVector::zeros(n);
    }

    fn command(
        &mut self,
        model: &RobotModel,
        state: &JointState,
        q_ref: &DVector<f64>,
        qd_ref: &DVector<f64>,
        dt_env: f64,
    ) -> Result<DVector<f64>> {
        let (tau, next) = pid_step(&self.gains, model, state, q_ref, qd_ref, &self.integral, dt_env)?;
        self.integral = next;
        Ok(tau)
    }
}
