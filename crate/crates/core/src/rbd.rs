//! Rigid-body dynamics of a fixed-base serial chain of revolute joints.
//!
//! Each joint frame is placed relative to its parent by a fixed origin transform followed
//! by a rotation of `q` about the joint axis. Link inertial data is expressed in the joint
//! frame. Inverse dynamics runs the recursive Newton-Euler algorithm; the joint-space
//! inertia matrix is assembled independently from link Jacobians so that the two routes
//! can be cross-checked.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const AXIS_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub axis: Vector3<f64>,
    pub origin_xyz: Vector3<f64>,
    pub origin_rpy: Vector3<f64>,
    origin_rot: Matrix3<f64>,
    pub mass: f64,
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass, in the joint frame.
    pub inertia: Matrix3<f64>,
    pub damping: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub qd_max: f64,
}

/// On-disk description of one joint, matching the robot model JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub origin_xyz: [f64; 3],
    pub origin_rpy: [f64; 3],
    pub mass: f64,
    pub com: [f64; 3],
    /// Upper triangle `[ixx, ixy, ixz, iyy, iyz, izz]`.
    pub inertia: [f64; 6],
    pub damping: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub qd_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotModelSpec {
    pub name: String,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    pub joints: Vec<JointSpec>,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

impl Joint {
    fn from_spec(idx: usize, s: &JointSpec) -> Result<Self> {
        let bad = |reason: String| Error::InvalidJoint { joint: idx, reason };
        let all = s
            .axis
            .iter()
            .chain(&s.origin_xyz)
            .chain(&s.origin_rpy)
            .chain(&s.com)
            .chain(&s.inertia)
            .chain([&s.mass, &s.damping, &s.q_min, &s.q_max, &s.qd_max]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        let axis = Vector3::from(s.axis);
        if (axis.norm() - 1.0).abs() > AXIS_NORM_TOL {
            return Err(bad(format!("axis norm {} is not 1", axis.norm())));
        }
        if s.mass <= 0.0 {
            return Err(bad(format!("mass {} must be positive", s.mass)));
        }
        let [ixx, ixy, ixz, iyy, iyz, izz] = s.inertia;
        let inertia = Matrix3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz);
        let min_eig = inertia.symmetric_eigenvalues().min();
        if min_eig < -1e-12 * inertia.norm().max(1.0) {
            return Err(bad(format!("inertia is not positive semidefinite (eigenvalue {min_eig})")));
        }
        if s.damping <= 0.0 {
            return Err(bad(format!("damping {} must be positive", s.damping)));
        }
        if s.q_min >= s.q_max {
            return Err(bad(format!("q_min {} must be below q_max {}", s.q_min, s.q_max)));
        }
        if s.qd_max <= 0.0 {
            return Err(bad(format!("qd_max {} must be positive", s.qd_max)));
        }
        let rpy = Vector3::from(s.origin_rpy);
        Ok(Joint {
            axis,
            origin_xyz: Vector3::from(s.origin_xyz),
            origin_rpy: rpy,
            origin_rot: *Rotation3::from_euler_angles(rpy.x, rpy.y, rpy.z).matrix(),
            mass: s.mass,
            com: Vector3::from(s.com),
            inertia,
            damping: s.damping,
            q_min: s.q_min,
            q_max: s.q_max,
            qd_max: s.qd_max,
        })
    }

    fn to_spec(&self) -> JointSpec {
        let i = &self.inertia;
        JointSpec {
            axis: self.axis.into(),
            origin_xyz: self.origin_xyz.into(),
            origin_rpy: self.origin_rpy.into(),
            mass: self.mass,
            com: self.com.into(),
            inertia: [i[(0, 0)], i[(0, 1)], i[(0, 2)], i[(1, 1)], i[(1, 2)], i[(2, 2)]],
            damping: self.damping,
            q_min: self.q_min,
            q_max: self.q_max,
            qd_max: self.qd_max,
        }
    }

    /// Rotation from this joint's frame to its parent frame at angle `q`.
    fn rotation(&self, q: f64) -> Matrix3<f64> {
        let r = Rotation3::from_axis_angle(&Unit::new_unchecked(self.axis), q);
        self.origin_rot * r.matrix()
    }
}

/// Immutable kinematic and inertial description of a serial revolute chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub gravity: Vector3<f64>,
    pub joints: Vec<Joint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, qd: DVector<f64>) -> Result<Self> {
        check_dim("joint state velocity", q.len(), qd.len())?;
        Ok(JointState { q, qd })
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        JointState {
            q,
            qd: DVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// World-frame pose of every joint frame.
struct Kinematics {
    rot: Vec<Matrix3<f64>>,
    pos: Vec<Vector3<f64>>,
}

impl RobotModel {
    pub fn from_spec(spec: &RobotModelSpec) -> Result<Self> {
        if spec.joints.is_empty() {
            return Err(Error::InvalidModel("model has no joints".into()));
        }
        let gravity = Vector3::from(spec.gravity);
        if gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidModel("gravity is not finite".into()));
        }
        let joints = spec
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| Joint::from_spec(i, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(RobotModel {
            name: spec.name.clone(),
            gravity,
            joints,
        })
    }

    pub fn to_spec(&self) -> RobotModelSpec {
        RobotModelSpec {
            name: self.name.clone(),
            gravity: self.gravity.into(),
            joints: self.joints.iter().map(Joint::to_spec).collect(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: RobotModelSpec = serde_json::from_str(text)
            .map_err(|e| Error::InvalidModel(format!("cannot parse model JSON: {e}")))?;
        Self::from_spec(&spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read robot model {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("model spec serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn with_gravity(&self, gravity: Vector3<f64>) -> Self {
        RobotModel {
            gravity,
            ..self.clone()
        }
    }

    pub fn damping(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.damping))
    }

    pub fn q_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.q_min))
    }

    pub fn q_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.q_max))
    }

    pub fn qd_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.qd_max))
    }

    fn check(&self, what: &'static str, v: &DVector<f64>) -> Result<()> {
        check_dim(what, self.dof(), v.len())
    }

    fn kinematics(&self, q: &DVector<f64>) -> Kinematics {
        let n = self.dof();
        let mut rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut r = Matrix3::identity();
        let mut p = Vector3::zeros();
        for (j, qi) in self.joints.iter().zip(q.iter()) {
            p += r * j.origin_xyz;
            r *= j.rotation(*qi);
            rot.push(r);
            pos.push(p);
        }
        Kinematics { rot, pos }
    }

    /// Recursive Newton-Euler pass. `gravity` selects whether the base is accelerated
    /// against gravity.
    fn rnea(&self, q: &DVector<f64>, qd: &DVector<f64>, qdd: &DVector<f64>, gravity: bool) -> DVector<f64> {
        let n = self.dof();
        let mut rots = Vec::with_capacity(n);
        let mut forces = Vec::with_capacity(n);
        let mut moments = Vec::with_capacity(n);

        let mut w = Vector3::zeros();
        let mut wd = Vector3::zeros();
        let mut vd = if gravity { -self.gravity } else { Vector3::zeros() };

        for (i, j) in self.joints.iter().enumerate() {
            let r = j.rotation(q[i]);
            let rt = r.transpose();
            let p = j.origin_xyz;
            let w_in = rt * w;
            let vd_i = rt * (vd + wd.cross(&p) + w.cross(&w.cross(&p)));
            let w_i = w_in + j.axis * qd[i];
            let wd_i = rt * wd + j.axis * qdd[i] + w_in.cross(&(j.axis * qd[i]));

            let vdc = vd_i + wd_i.cross(&j.com) + w_i.cross(&w_i.cross(&j.com));
            forces.push(j.mass * vdc);
            moments.push(j.inertia * wd_i + w_i.cross(&(j.inertia * w_i)));
            rots.push(r);

            w = w_i;
            wd = wd_i;
            vd = vd_i;
        }

        let mut tau = DVector::zeros(n);
        let mut f_next = Vector3::zeros();
        let mut n_next = Vector3::zeros();
        for i in (0..n).rev() {
            let j = &self.joints[i];
            // child wrench expressed in this frame
            let (f_child, n_child) = if i + 1 < n {
                let r = rots[i + 1];
                let fc = r * f_next;
                (fc, r * n_next + self.joints[i + 1].origin_xyz.cross(&fc))
            } else {
                (Vector3::zeros(), Vector3::zeros())
            };
            let f = forces[i] + f_child;
            let m = moments[i] + n_child + j.com.cross(&forces[i]);
            tau[i] = m.dot(&j.axis);
            f_next = f;
            n_next = m;
        }
        tau
    }

    /// `M(q) q̈ + C(q, q̇) q̇ + τ_g(q)`.
    pub fn inverse_dynamics(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check("q", q)?;
        self.check("qd", qd)?;
        self.check("qdd", qdd)?;
        Ok(self.rnea(q, qd, qdd, true))
    }

    pub fn gravity_torque(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        self.check("q", q)?;
        let zero = DVector::zeros(self.dof());
        Ok(self.rnea(q, &zero, &zero, true))
    }

    /// Coriolis and centrifugal torque `C(q, q̇) q̇`.
    pub fn coriolis_torque(&self, q: &DVector<f64>, qd: &DVector<f64>) -> Result<DVector<f64>> {
        self.check("q", q)?;
        self.check("qd", qd)?;
        let zero = DVector::zeros(self.dof());
        Ok(self.rnea(q, qd, &zero, true) - self.rnea(q, &zero, &zero, true))
    }

    /// Joint-space inertia matrix assembled from link Jacobians.
    pub fn inertia_matrix(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check("q", q)?;
        let n = self.dof();
        let kin = self.kinematics(q);
        let axes: Vec<Vector3<f64>> = (0..n).map(|i| kin.rot[i] * self.joints[i].axis).collect();
        let mut m = DMatrix::zeros(n, n);
        let mut jv = vec![Vector3::zeros(); n];
        for (i, link) in self.joints.iter().enumerate() {
            let c = kin.pos[i] + kin.rot[i] * link.com;
            for k in 0..=i {
                jv[k] = axes[k].cross(&(c - kin.pos[k]));
            }
            let inertia_world = kin.rot[i] * link.inertia * kin.rot[i].transpose();
            for a in 0..=i {
                let ia = inertia_world * axes[a];
                for b in 0..=a {
                    let v = link.mass * jv[a].dot(&jv[b]) + axes[b].dot(&ia);
                    m[(a, b)] += v;
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                m[(b, a)] = m[(a, b)];
            }
        }
        Ok(m)
    }

    /// Joint accelerations from `M q̈ = τ_eff − C q̇ − τ_g`.
    pub fn forward_dynamics(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        tau_eff: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check("q", q)?;
        self.check("qd", qd)?;
        self.check("tau_eff", tau_eff)?;
        let zero = DVector::zeros(self.dof());
        let bias = self.rnea(q, qd, &zero, true);
        let m = self.inertia_matrix(q)?;
        let chol = Cholesky::new(m).ok_or_else(|| {
            Error::Numeric("inertia matrix is not positive definite; model is ill-conditioned".into())
        })?;
        Ok(chol.solve(&(tau_eff - bias)))
    }

    pub fn kinetic_energy(&self, q: &DVector<f64>, qd: &DVector<f64>) -> Result<f64> {
        let m = self.inertia_matrix(q)?;
        self.check("qd", qd)?;
        Ok(0.5 * qd.dot(&(&m * qd)))
    }

    /// Stable content hash of the model parameters.
    pub fn content_hash(&self) -> String {
        crate::provenance::hash_bytes(self.to_json_string().as_bytes())
    }

    /// Seven-joint serial arm loosely patterned after a collaborative manipulator.
    ///
    /// Inertial parameters are invented. Distal link inertias are inflated to stand in
    /// for reflected rotor inertia, which keeps the discrete-time joint controller well
    /// damped at a 100 Hz control rate.
    pub fn franka7_synthetic() -> Self {
        use std::f64::consts::FRAC_PI_2 as H;
        #[rustfmt::skip]
        let links: [([f64; 3], [f64; 3], f64, [f64; 3], [f64; 6], f64); 7] = [
            ([0.0, 0.0, 0.333], [0.0, 0.0, 0.0], 3.9, [0.0, -0.03, -0.15], [0.60, 0.0, 0.0, 0.60, 0.0, 0.60], 6.75),
            ([0.0, 0.0, 0.0], [-H, 0.0, 0.0], 3.6, [0.0, -0.12, 0.03], [0.50, 0.0, 0.0, 0.50, 0.0, 0.50], 6.00),
            ([0.0, -0.316, 0.0], [H, 0.0, 0.0], 3.0, [0.04, 0.02, -0.07], [0.40, 0.0, 0.0, 0.40, 0.0, 0.40], 5.25),
            ([0.1, 0.0, 0.0], [H, 0.0, 0.0], 2.6, [-0.05, 0.10, 0.03], [0.35, 0.0, 0.0, 0.35, 0.0, 0.35], 4.50),
            ([-0.1, 0.33, 0.0], [-H, 0.0, 0.0], 1.9, [0.0, 0.04, -0.11], [0.30, 0.0, 0.0, 0.30, 0.0, 0.30], 3.75),
            ([0.0, 0.0, 0.0], [H, 0.0, 0.0], 1.4, [0.06, -0.01, 0.01], [0.30, 0.0, 0.0, 0.30, 0.0, 0.30], 3.00),
            ([0.1, 0.0, 0.0], [H, 0.0, 0.0], 0.7, [0.0, 0.0, 0.08], [0.30, 0.0, 0.0, 0.30, 0.0, 0.30], 2.25),
        ];
        let joints = links
            .iter()
            .map(|(xyz, rpy, mass, com, inertia, damping)| JointSpec {
                axis: [0.0, 0.0, 1.0],
                origin_xyz: *xyz,
                origin_rpy: *rpy,
                mass: *mass,
                com: *com,
                inertia: *inertia,
                damping: *damping,
                q_min: -2.8,
                q_max: 2.8,
                qd_max: 2.5,
            })
            .collect();
        let spec = RobotModelSpec {
            name: "franka7-synthetic".into(),
            gravity: default_gravity(),
            joints,
        };
        RobotModel::from_spec(&spec).expect("built-in model is valid")
    }
}
