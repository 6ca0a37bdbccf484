//! Closed-loop simulation: viscous damping, semi-implicit Euler integration and rollouts
//! under a zero-order-held controller.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::error::{check_dim, Error, Result};
use crate::rbd::{JointState, RobotModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Controller sampling period (s).
    pub dt_env: f64,
    /// Integration sub-steps per controller step.
    pub substeps: usize,
    /// Rollout horizon (s).
    pub horizon: f64,
    /// Abort when any joint speed exceeds this bound (rad/s).
    pub max_velocity: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_env: 0.002,
            substeps: 2,
            horizon: 10.0,
            max_velocity: 100.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_env.is_finite() && self.dt_env > 0.0) {
            return Err(Error::Config(format!("dt_env must be positive, got {}", self.dt_env)));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.max_velocity > 0.0) {
            return Err(Error::Config("max_velocity must be positive".into()));
        }
        Ok(())
    }

    pub fn dt_sim(&self) -> f64 {
        self.dt_env / self.substeps as f64
    }

    /// Number of controller steps N; the grid has N + 1 points.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt_env).round() as usize
    }

    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| k as f64 * self.dt_env).collect()
    }
}

/// Desired joint positions and velocities sampled on the controller grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub q: Vec<DVector<f64>>,
    pub qd: Vec<DVector<f64>>,
}

impl Reference {
    pub fn constant(q: DVector<f64>, len: usize) -> Self {
        let n = q.len();
        Reference {
            q: vec![q; len],
            qd: vec![DVector::zeros(n); len],
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Recorded trajectory: `N + 1` states and `N` motor torques.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub t: Vec<f64>,
    pub q: Vec<DVector<f64>>,
    pub qd: Vec<DVector<f64>>,
    pub tau_m: Vec<DVector<f64>>,
    /// Absent for externally recorded data.
    pub reference: Option<Reference>,
}

impl Rollout {
    pub fn dof(&self) -> usize {
        self.q.first().map_or(0, |q| q.len())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Data("rollout needs at least two samples".into()));
        }
        check_dim("rollout positions", n, self.q.len())?;
        check_dim("rollout velocities", n, self.qd.len())?;
        check_dim("rollout torques", n - 1, self.tau_m.len())?;
        if let Some(r) = &self.reference {
            check_dim("rollout reference", n, r.len())?;
        }
        if !self.t.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::Data("rollout timestamps are not strictly increasing".into()));
        }
        Ok(())
    }

    /// Largest absolute tracking error over joints and samples.
    pub fn max_tracking_error(&self) -> Option<f64> {
        let r = self.reference.as_ref()?;
        Some(
            self.q
                .iter()
                .zip(&r.q)
                .map(|(q, qr)| (q - qr).amax())
                .fold(0.0, f64::max),
        )
    }

    pub fn to_csv(&self) -> String {
        let n = self.dof();
        let mut out = String::new();
        let mut header = vec!["t".to_string()];
        for prefix in ["q", "qd", "taum", "qstar", "qdstar"] {
            header.extend((1..=n).map(|j| format!("{prefix}{j}")));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        let blank = vec![String::new(); n];
        for k in 0..self.len() {
            let mut row = vec![format!("{}", self.t[k])];
            row.extend(self.q[k].iter().map(|v| format!("{v}")));
            row.extend(self.qd[k].iter().map(|v| format!("{v}")));
            match self.tau_m.get(k) {
                Some(tau) => row.extend(tau.iter().map(|v| format!("{v}"))),
                None => row.extend(blank.iter().cloned()),
            }
            match &self.reference {
                Some(r) => {
                    row.extend(r.q[k].iter().map(|v| format!("{v}")));
                    row.extend(r.qd[k].iter().map(|v| format!("{v}")));
                }
                None => row.extend(blank.iter().chain(&blank).cloned()),
            }
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Data("empty rollout file".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.first() != Some(&"t") || !(header.len() - 1).is_multiple_of(5) {
            return Err(Error::Data("unexpected rollout header".into()));
        }
        let n = (header.len() - 1) / 5;
        let parse = |s: &str| -> Result<Option<f64>> {
            let s = s.trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::Data(format!("bad number {s:?}: {e}")))
        };
        let mut r = Rollout {
            t: Vec::new(),
            q: Vec::new(),
            qd: Vec::new(),
            tau_m: Vec::new(),
            reference: None,
        };
        let mut qs = Vec::new();
        let mut qds = Vec::new();
        let mut have_ref = true;
        for line in lines {
            let cells: Vec<Option<f64>> = line.split(',').map(parse).collect::<Result<_>>()?;
            check_dim("rollout csv columns", header.len(), cells.len())?;
            let block = |b: usize| -> Option<DVector<f64>> {
                let vals: Option<Vec<f64>> = cells[1 + b * n..1 + (b + 1) * n].iter().copied().collect();
                vals.map(DVector::from_vec)
            };
            r.t.push(cells[0].ok_or_else(|| Error::Data("missing timestamp".into()))?);
            r.q.push(block(0).ok_or_else(|| Error::Data("missing joint position".into()))?);
            r.qd.push(block(1).ok_or_else(|| Error::Data("missing joint velocity".into()))?);
            if let Some(tau) = block(2) {
                r.tau_m.push(tau);
            }
            match (block(3), block(4)) {
                (Some(a), Some(b)) => {
                    qs.push(a);
                    qds.push(b);
                }
                _ => have_ref = false,
            }
        }
        if have_ref && !qs.is_empty() {
            r.reference = Some(Reference { q: qs, qd: qds });
        }
        r.validate()?;
        Ok(r)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// `τ_d = D q̇`.
pub fn damping_torque(model: &RobotModel, qd: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("qd", model.dof(), qd.len())?;
    Ok(model.damping().component_mul(qd))
}

/// One semi-implicit Euler step: velocity first, then position with the new velocity.
pub fn step(model: &RobotModel, state: &JointState, tau_m: &DVector<f64>, dt_sim: f64) -> Result<JointState> {
    if !(dt_sim > 0.0 && dt_sim.is_finite()) {
        return Err(Error::Numeric(format!("invalid time step {dt_sim}")));
    }
    if !state.is_finite() || tau_m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite state or torque".into()));
    }
    let tau_eff = tau_m - damping_torque(model, &state.qd)?;
    let qdd = model.forward_dynamics(&state.q, &state.qd, &tau_eff)?;
    let qd = &state.qd + qdd * dt_sim;
    let q = &state.q + &qd * dt_sim;
    Ok(JointState { q, qd })
}

/// Closed-loop rollout. The controller is sampled once per environment step and its
/// torque is held over the integration sub-steps.
pub fn rollout(
    model: &RobotModel,
    controller: &mut dyn Controller,
    reference: &Reference,
    cfg: &SimConfig,
) -> Result<Rollout> {
    cfg.validate()?;
    let steps = cfg.steps();
    check_dim("reference length", steps + 1, reference.len())?;
    let n = model.dof();
    controller.reset(n);
    let dt_sim = cfg.dt_sim();
    let mut state = JointState::new(reference.q[0].clone(), reference.qd[0].clone())?;
    let mut out = Rollout {
        t: cfg.time_grid(),
        q: Vec::with_capacity(steps + 1),
        qd: Vec::with_capacity(steps + 1),
        tau_m: Vec::with_capacity(steps),
        reference: Some(reference.clone()),
    };
    out.q.push(state.q.clone());
    out.qd.push(state.qd.clone());
    for k in 0..steps {
        let tau = controller.command(model, &state, &reference.q[k], &reference.qd[k], cfg.dt_env)?;
        if tau.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("controller returned non-finite torque at step {k}")));
        }
        for _ in 0..cfg.substeps {
            state = step(model, &state, &tau, dt_sim)?;
        }
        let peak = state.qd.amax();
        if !(peak <= cfg.max_velocity) {
            return Err(Error::Numeric(format!(
                "simulation diverged at t = {:.3} s: joint speed {peak:.3e} rad/s exceeds {} rad/s",
                out.t[k + 1],
                cfg.max_velocity
            )));
        }
        out.tau_m.push(tau);
        out.q.push(state.q.clone());
        out.qd.push(state.qd.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::control::{PidController, PidGains};

    #[test]
    fn damping_matches_nominal_coefficients() {
        let model = RobotModel::franka7_synthetic();
        let tau = damping_torque(&model, &DVector::from_element(7, 1.0)).unwrap();
        let expected = [6.75, 6.00, 5.25, 4.50, 3.75, 3.00, 2.25];
        assert_eq!(tau.as_slice(), &expected);
        let mut qd = DVector::zeros(7);
        qd[0] = -1.0;
        let tau = damping_torque(&model, &qd).unwrap();
        assert_eq!(tau[0], -6.75);
        assert!(tau.rows(1, 6).iter().all(|v| *v == 0.0));
        assert_eq!(damping_torque(&model, &DVector::zeros(7)).unwrap(), DVector::zeros(7));
    }

    #[test]
    fn equilibrium_without_gravity_is_fixed_point() {
        let model = RobotModel::franka7_synthetic().with_gravity(Vector3::zeros());
        let s = JointState::at_rest(DVector::from_element(7, 0.4));
        let next = step(&model, &s, &DVector::zeros(7), 1e-3).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn exact_compensation_holds_state() {
        let model = RobotModel::franka7_synthetic();
        let s = JointState::at_rest(DVector::from_vec(vec![0.3, -0.7, 0.1, -1.9, 0.4, 1.1, 0.2]));
        let tau = model.gravity_torque(&s.q).unwrap();
        let next = step(&model, &s, &tau, 1e-3).unwrap();
        assert!((&next.q - &s.q).amax() < 1e-15);
        assert!(next.qd.amax() < 1e-12);
    }

    #[test]
    fn step_rejects_non_finite() {
        let model = RobotModel::franka7_synthetic();
        let s = JointState::at_rest(DVector::zeros(7));
        let mut tau = DVector::zeros(7);
        tau[2] = f64::INFINITY;
        assert!(matches!(step(&model, &s, &tau, 1e-3), Err(Error::Numeric(_))));
    }

    #[test]
    fn rollout_bookkeeping() {
        let model = RobotModel::franka7_synthetic();
        let cfg = SimConfig {
            dt_env: 0.01,
            substeps: 10,
            horizon: 10.0,
            ..SimConfig::default()
        };
        let q0 = DVector::from_vec(vec![0.0, -0.5, 0.0, -2.0, 0.0, 1.5, 0.7]);
        let reference = Reference::constant(q0.clone(), cfg.steps() + 1);
        let mut pid = PidController::new(PidGains::default_for(7));
        let r = rollout(&model, &mut pid, &reference, &cfg).unwrap();
        assert_eq!(r.tau_m.len(), 1000);
        assert_eq!(r.q.len(), 1001);
        assert_eq!(r.t.len(), 1001);
        r.validate().unwrap();
        for q in &r.q {
            assert!((q - &q0).amax() < 1e-9);
        }
    }

    #[test]
    fn reference_length_checked() {
        let model = RobotModel::franka7_synthetic();
        let cfg = SimConfig::default();
        let reference = Reference::constant(DVector::zeros(7), 10);
        let mut pid = PidController::new(PidGains::default_for(7));
        assert!(matches!(
            rollout(&model, &mut pid, &reference, &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn blow_up_guard_aborts() {
        let model = RobotModel::franka7_synthetic();
        let cfg = SimConfig {
            horizon: 1.0,
            ..SimConfig::default()
        };
        let mut reference = Reference::constant(DVector::from_element(7, 0.8), cfg.steps() + 1);
        reference.q[0] = DVector::from_element(7, 0.5);
        let mut pid = PidController::new(PidGains::uniform(7, 1e6, 0.0, 1e5, 1.0));
        let err = rollout(&model, &mut pid, &reference, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let model = RobotModel::franka7_synthetic();
        let cfg = SimConfig {
            horizon: 0.2,
            ..SimConfig::default()
        };
        let mut q_ref = Vec::new();
        let mut qd_ref = Vec::new();
        for t in cfg.time_grid() {
            q_ref.push(DVector::from_fn(7, |j, _| 0.1 * (t + j as f64).sin()));
            qd_ref.push(DVector::from_fn(7, |j, _| 0.1 * (t + j as f64).cos()));
        }
        let reference = Reference { q: q_ref, qd: qd_ref };
        let mut pid = PidController::new(PidGains::default_for(7));
        let r = rollout(&model, &mut pid, &reference, &cfg).unwrap();
        let text = r.to_csv();
        assert!(text.starts_with("t,q1,q2,q3,q4,q5,q6,q7,qd1,"));
        let last = text.lines().last().unwrap();
        assert!(last.contains(",,,,,,,"), "torque cells empty on final row");
        assert_eq!(Rollout::from_csv(&text).unwrap(), r);
    }
}
