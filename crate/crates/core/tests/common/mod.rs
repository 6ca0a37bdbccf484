#![allow(dead_code)]

use hybrid_dynamics::rbd::{JointSpec, RobotModel, RobotModelSpec};
use nalgebra::{DMatrix, DVector};

pub const G: f64 = 9.81;

fn joint(origin_x: f64, mass: f64, com_x: f64, izz: f64) -> JointSpec {
    JointSpec {
        axis: [0.0, 0.0, 1.0],
        origin_xyz: [origin_x, 0.0, 0.0],
        origin_rpy: [0.0; 3],
        mass,
        com: [com_x, 0.0, 0.0],
        inertia: [0.03, 0.0, 0.0, 0.04, 0.0, izz],
        damping: 0.5,
        q_min: -3.0,
        q_max: 3.0,
        qd_max: 5.0,
    }
}

/// Single link swinging in the vertical x-y plane, gravity along −y.
pub struct Pendulum {
    pub m: f64,
    pub l: f64,
    pub izz: f64,
}

impl Pendulum {
    pub fn model(&self) -> RobotModel {
        RobotModel::from_spec(&RobotModelSpec {
            name: "pendulum".into(),
            gravity: [0.0, -G, 0.0],
            joints: vec![joint(0.0, self.m, self.l, self.izz)],
        })
        .unwrap()
    }

    pub fn inertia(&self) -> f64 {
        self.m * self.l * self.l + self.izz
    }

    pub fn gravity(&self, q: f64) -> f64 {
        self.m * G * self.l * q.cos()
    }

    pub fn inverse(&self, q: f64, qdd: f64) -> f64 {
        self.inertia() * qdd + self.gravity(q)
    }

    pub fn forward(&self, q: f64, tau: f64) -> f64 {
        (tau - self.gravity(q)) / self.inertia()
    }
}

/// Textbook planar two-link arm; angles measured from the +x axis, gravity along −y.
pub struct TwoLink {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub i1: f64,
    pub i2: f64,
}

impl Default for TwoLink {
    fn default() -> Self {
        TwoLink {
            m1: 2.3,
            m2: 1.4,
            l1: 0.45,
            lc1: 0.2,
            lc2: 0.17,
            i1: 0.06,
            i2: 0.025,
        }
    }
}

impl TwoLink {
    pub fn model(&self) -> RobotModel {
        RobotModel::from_spec(&RobotModelSpec {
            name: "two-link".into(),
            gravity: [0.0, -G, 0.0],
            joints: vec![joint(0.0, self.m1, self.lc1, self.i1), joint(self.l1, self.m2, self.lc2, self.i2)],
        })
        .unwrap()
    }

    pub fn inertia(&self, q: &[f64]) -> DMatrix<f64> {
        let c2 = q[1].cos();
        let m22 = self.m2 * self.lc2 * self.lc2 + self.i2;
        let m12 = m22 + self.m2 * self.l1 * self.lc2 * c2;
        let m11 = self.m1 * self.lc1 * self.lc1 + self.i1 + m22 + self.m2 * (self.l1 * self.l1 + 2.0 * self.l1 * self.lc2 * c2);
        DMatrix::from_row_slice(2, 2, &[m11, m12, m12, m22])
    }

    pub fn coriolis(&self, q: &[f64], qd: &[f64]) -> DVector<f64> {
        let h = self.m2 * self.l1 * self.lc2 * q[1].sin();
        DVector::from_vec(vec![-h * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]), h * qd[0] * qd[0]])
    }

    pub fn gravity(&self, q: &[f64]) -> DVector<f64> {
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        let t2 = self.m2 * self.lc2 * G * c12;
        DVector::from_vec(vec![(self.m1 * self.lc1 + self.m2 * self.l1) * G * c1 + t2, t2])
    }

    pub fn inverse(&self, q: &[f64], qd: &[f64], qdd: &[f64]) -> DVector<f64> {
        self.inertia(q) * DVector::from_column_slice(qdd) + self.coriolis(q, qd) + self.gravity(q)
    }

    pub fn forward(&self, q: &[f64], qd: &[f64], tau: &[f64]) -> DVector<f64> {
        let rhs = DVector::from_column_slice(tau) - self.coriolis(q, qd) - self.gravity(q);
        self.inertia(q).lu().solve(&rhs).unwrap()
    }
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}
