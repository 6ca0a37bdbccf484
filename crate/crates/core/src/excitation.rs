//! Random multi-sine reference trajectories scaled into the joint limits.

use std::f64::consts::TAU;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rbd::RobotModel;
use crate::sim::Reference;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiSineSpec {
    pub modes: usize,
    pub amplitude: [f64; 2],
    /// Hz.
    pub frequency: [f64; 2],
    /// Margin subtracted from each position limit (rad).
    pub margin: f64,
    /// Guard added to the maxima in the scale factors.
    pub eps: f64,
    pub seed: u64,
}

impl Default for MultiSineSpec {
    fn default() -> Self {
        MultiSineSpec {
            modes: 5,
            amplitude: [0.1, 1.0],
            frequency: [0.05, 0.5],
            margin: 0.1,
            eps: 1e-9,
            seed: 0,
        }
    }
}

impl MultiSineSpec {
    pub fn validate(&self) -> Result<()> {
        let [a_lo, a_hi] = self.amplitude;
        let [f_lo, f_hi] = self.frequency;
        if self.modes == 0 {
            return Err(Error::Config("multi-sine needs at least one mode".into()));
        }
        if !(a_lo > 0.0 && a_lo <= a_hi) {
            return Err(Error::Config(format!("bad amplitude range [{a_lo}, {a_hi}]")));
        }
        if !(f_lo > 0.0 && f_lo <= f_hi) {
            return Err(Error::Config(format!("bad frequency range [{f_lo}, {f_hi}]")));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(Error::Config("eps must be a small positive number".into()));
        }
        Ok(())
    }
}

/// One sinusoidal component `a sin(2π f t + φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Per-joint sums of sinusoids.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSine {
    pub joints: Vec<Vec<Mode>>,
}

/// Raw signals indexed `[joint][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignals {
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl MultiSine {
    pub fn sample(spec: &MultiSineSpec, n_joints: usize, rng: &mut impl Rng) -> Self {
        let joints = (0..n_joints)
            .map(|_| {
                (0..spec.modes)
                    .map(|_| Mode {
                        amplitude: uniform(rng, spec.amplitude),
                        frequency: uniform(rng, spec.frequency),
                        phase: rng.random_range(0.0..TAU),
                    })
                    .collect()
            })
            .collect();
        MultiSine { joints }
    }

    /// Positions and their analytic time derivatives on the grid.
    pub fn evaluate(&self, tgrid: &[f64]) -> RawSignals {
        let mut q = Vec::with_capacity(self.joints.len());
        let mut qd = Vec::with_capacity(self.joints.len());
        for modes in &self.joints {
            let (pos, vel): (Vec<f64>, Vec<f64>) = tgrid
                .iter()
                .map(|&t| {
                    modes.iter().fold((0.0, 0.0), |(p, v), m| {
                        let w = TAU * m.frequency;
                        let arg = w * t + m.phase;
                        (p + m.amplitude * arg.sin(), v + m.amplitude * w * arg.cos())
                    })
                })
                .unzip();
            q.push(pos);
            qd.push(vel);
        }
        RawSignals { q, qd }
    }
}

/// Draws modes with the spec's own seed and evaluates them on `tgrid`.
pub fn multisine(spec: &MultiSineSpec, n_joints: usize, tgrid: &[f64]) -> RawSignals {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    MultiSine::sample(spec, n_joints, &mut rng).evaluate(tgrid)
}

/// Uniform sample inside `[q_min + ρ, q_max − ρ]`, independently per joint.
pub fn sample_initial_config(
    q_min: &DVector<f64>,
    q_max: &DVector<f64>,
    margin: f64,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    check_dim("joint limits", q_min.len(), q_max.len())?;
    let mut q0 = DVector::zeros(q_min.len());
    for j in 0..q_min.len() {
        let lo = q_min[j] + margin;
        let hi = q_max[j] - margin;
        if !(lo < hi) {
            return Err(Error::Config(format!(
                "joint {}: margin {margin} leaves an empty sampling interval",
                j + 1
            )));
        }
        q0[j] = rng.random_range(lo..hi);
    }
    Ok(q0)
}

/// Per-joint scale factors applied to both position and velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
}

/// Scales each joint's raw pair by one factor `s_j = min(α_pos, α_vel)`.
///
/// Fails when the initial configuration leaves no room inside the shrunken limits.
pub fn scale_to_limits(
    q0: &DVector<f64>,
    raw: &RawSignals,
    q_min: &DVector<f64>,
    q_max: &DVector<f64>,
    qd_max: &DVector<f64>,
    margin: f64,
    eps: f64,
) -> Result<Scaled> {
    let n = q0.len();
    check_dim("raw positions", n, raw.q.len())?;
    check_dim("raw velocities", n, raw.qd.len())?;
    let mut out = Scaled {
        q: Vec::with_capacity(n),
        qd: Vec::with_capacity(n),
        scale: Vec::with_capacity(n),
    };
    for j in 0..n {
        let room = (q_max[j] - q0[j]).min(q0[j] - q_min[j]) - margin;
        if !(room > 0.0) {
            return Err(Error::Data(format!(
                "joint {}: initial configuration {} is within the margin of a limit",
                j + 1,
                q0[j]
            )));
        }
        let peak = |xs: &[f64]| xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let alpha_pos = room / (peak(&raw.q[j]) + eps);
        let alpha_vel = qd_max[j] / (peak(&raw.qd[j]) + eps);
        let s = alpha_pos.min(alpha_vel);
        out.q.push(raw.q[j].iter().map(|x| q0[j] + s * x).collect());
        out.qd.push(raw.qd[j].iter().map(|x| s * x).collect());
        out.scale.push(s);
    }
    Ok(out)
}

const MAX_RESAMPLES: usize = 1000;

/// Samples an initial configuration and a multi-sine, scales it into the model's limits
/// and returns the reference on `tgrid`. Configurations too close to a limit are resampled.
pub fn generate_reference(
    model: &RobotModel,
    spec: &MultiSineSpec,
    tgrid: &[f64],
    rng: &mut impl Rng,
) -> Result<Reference> {
    spec.validate()?;
    if tgrid.is_empty() {
        return Err(Error::Config("empty time grid".into()));
    }
    let (q_min, q_max, qd_max) = (model.q_min(), model.q_max(), model.qd_max());
    let n = model.dof();
    for _ in 0..MAX_RESAMPLES {
        let q0 = sample_initial_config(&q_min, &q_max, spec.margin, rng)?;
        let raw = MultiSine::sample(spec, n, rng).evaluate(tgrid);
        match scale_to_limits(&q0, &raw, &q_min, &q_max, &qd_max, spec.margin, spec.eps) {
            Ok(scaled) => {
                let at = |sig: &Vec<Vec<f64>>, k: usize| DVector::from_fn(n, |j, _| sig[j][k]);
                return Ok(Reference {
                    q: (0..tgrid.len()).map(|k| at(&scaled.q, k)).collect(),
                    qd: (0..tgrid.len()).map(|k| at(&scaled.qd, k)).collect(),
                });
            }
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Data(format!(
        "no feasible initial configuration after {MAX_RESAMPLES} draws"
    )))
}
