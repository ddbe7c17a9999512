//! Serial-arm forward kinematics, the velocity-integrating state transition
//! and the feasibility check used by the controller.
//!
//! Joints are revolute and described by Denavit–Hartenberg rows, in either
//! the standard (`Rz(θ) Tz(d) Tx(a) Rx(α)`) or the modified
//! (`Rx(α) Tx(a) Rz(θ) Tz(d)`) convention.

use nalgebra::{DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

pub const ARM_SCHEMA_VERSION: u32 = 1;

const PLANAR2: &str = include_str!("../arms/planar2.json");
const UR5E: &str = include_str!("../arms/ur5e.json");
const PANDA: &str = include_str!("../arms/panda.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid arm description: {0}")]
    InvalidArm(String),
    #[error("unknown built-in arm {0:?}")]
    UnknownArm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DhConvention {
    Standard,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    pub lower: f64,
    pub upper: f64,
    pub max_velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffsetSpec {
    #[serde(default)]
    pub translation: [f64; 3],
    /// Roll, pitch, yaw in radians.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OffsetSpec {
    fn isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.translation;
        let [r, p, yaw] = self.rpy;
        Isometry3::from_parts(
            Translation3::new(x, y, z),
            UnitQuaternion::from_euler_angles(r, p, yaw),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArmFile {
    schema_version: u32,
    name: String,
    convention: DhConvention,
    joints: Vec<JointSpec>,
    #[serde(default)]
    base: OffsetSpec,
    #[serde(default)]
    ee_offset: OffsetSpec,
    #[serde(default)]
    floor_z: Option<f64>,
    #[serde(default)]
    home: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    pub name: String,
    pub convention: DhConvention,
    pub joints: Vec<JointSpec>,
    base: Isometry3<f64>,
    ee_offset: Isometry3<f64>,
    /// The end effector must stay at or above this height.
    pub floor_z: Option<f64>,
    pub home: DVector<f64>,
}

impl ArmModel {
    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let f: ArmFile =
            serde_json::from_str(text).map_err(|e| KinematicsError::InvalidArm(e.to_string()))?;
        if f.schema_version != ARM_SCHEMA_VERSION {
            return Err(KinematicsError::InvalidArm(format!(
                "unsupported schema_version {}",
                f.schema_version
            )));
        }
        if f.joints.is_empty() {
            return Err(KinematicsError::InvalidArm("arm has no joints".into()));
        }
        for (i, j) in f.joints.iter().enumerate() {
            if !(j.lower < j.upper) {
                return Err(KinematicsError::InvalidArm(format!("joint {i}: lower >= upper")));
            }
            if !(j.max_velocity > 0.0) {
                return Err(KinematicsError::InvalidArm(format!("joint {i}: max_velocity <= 0")));
            }
        }
        let n = f.joints.len();
        let home = match f.home {
            Some(h) if h.len() != n => {
                return Err(KinematicsError::DimensionMismatch {
                    expected: n,
                    actual: h.len(),
                })
            }
            Some(h) => DVector::from_vec(h),
            None => DVector::zeros(n),
        };
        Ok(Self {
            name: f.name,
            convention: f.convention,
            joints: f.joints,
            base: f.base.isometry(),
            ee_offset: f.ee_offset.isometry(),
            floor_z: f.floor_z,
            home,
        })
    }

    /// `planar2`, `ur5e` or `panda`.
    pub fn builtin(name: &str) -> Result<Self, KinematicsError> {
        match name {
            "planar2" => Self::from_json(PLANAR2),
            "ur5e" => Self::from_json(UR5E),
            "panda" => Self::from_json(PANDA),
            other => Err(KinematicsError::UnknownArm(other.to_string())),
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn velocity_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.max_velocity))
    }

    fn check_len(&self, len: usize) -> Result<(), KinematicsError> {
        if len == self.dof() {
            Ok(())
        } else {
            Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                actual: len,
            })
        }
    }

    fn link(&self, j: &JointSpec, theta: f64) -> Isometry3<f64> {
        let rz = Isometry3::rotation(Vector3::z() * (theta + j.theta_offset));
        let tz = Isometry3::translation(0.0, 0.0, j.d);
        let tx = Isometry3::translation(j.a, 0.0, 0.0);
        let rx = Isometry3::rotation(Vector3::x() * j.alpha);
        match self.convention {
            DhConvention::Standard => rz * tz * tx * rx,
            DhConvention::Modified => rx * tx * rz * tz,
        }
    }

    /// World pose of the end effector.
    pub fn forward_kinematics(&self, theta: &[f64]) -> Result<Pose, KinematicsError> {
        self.check_len(theta.len())?;
        Ok(self.fk_unchecked(theta))
    }

    pub(crate) fn fk_unchecked(&self, theta: &[f64]) -> Pose {
        let mut t = self.base;
        for (j, &q) in self.joints.iter().zip(theta) {
            t *= self.link(j, q);
        }
        t *= self.ee_offset;
        Pose::new(t.translation.vector, t.rotation)
    }

    /// Integrates one velocity command. Velocities are clamped to their
    /// limits first, then positions to theirs; `limit_hit` reports either.
    pub fn step(&self, x: &JointState, v: &[f64], dt: f64) -> Result<StepResult, KinematicsError> {
        self.check_len(x.theta.len())?;
        self.check_len(v.len())?;
        let mut out = x.clone();
        let mut limit_hit = false;
        for (i, j) in self.joints.iter().enumerate() {
            let vi = v[i].clamp(-j.max_velocity, j.max_velocity);
            limit_hit |= vi != v[i];
            let q = x.theta[i] + vi * dt;
            let qc = q.clamp(j.lower, j.upper);
            limit_hit |= qc != q;
            out.theta[i] = qc;
            out.theta_dot[i] = vi;
        }
        Ok(StepResult {
            state: out,
            limit_hit,
        })
    }

    /// Closed limits on position and velocity, plus the floor plane.
    pub fn feasible(&self, x: &JointState, v: &[f64]) -> Result<Feasibility, KinematicsError> {
        self.check_len(x.theta.len())?;
        self.check_len(v.len())?;
        let mut violations = Vec::new();
        for (i, j) in self.joints.iter().enumerate() {
            let q = x.theta[i];
            if !(q >= j.lower && q <= j.upper) {
                violations.push(Violation::JointPosition {
                    joint: i,
                    value: q,
                    lower: j.lower,
                    upper: j.upper,
                });
            }
            if !(v[i].abs() <= j.max_velocity) {
                violations.push(Violation::JointVelocity {
                    joint: i,
                    value: v[i],
                    limit: j.max_velocity,
                });
            }
        }
        if let Some(floor) = self.floor_z {
            let z = self.fk_unchecked(x.theta.as_slice()).position.z;
            if z < floor {
                violations.push(Violation::BelowFloor { z, floor });
            }
        }
        Ok(Feasibility { violations })
    }

    pub fn home_state(&self) -> JointState {
        JointState::at_rest(self.home.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub theta: DVector<f64>,
    pub theta_dot: DVector<f64>,
}

impl JointState {
    pub fn at_rest(theta: DVector<f64>) -> Self {
        let n = theta.len();
        Self {
            theta,
            theta_dot: DVector::zeros(n),
        }
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        Self::at_rest(DVector::from_column_slice(theta))
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.theta_dot.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: JointState,
    pub limit_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    JointPosition {
        joint: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    JointVelocity {
        joint: usize,
        value: f64,
        limit: f64,
    },
    BelowFloor {
        z: f64,
        floor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Feasibility {
    pub violations: Vec<Violation>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// End-effector position only; cheaper call sites read better with it.
pub fn ee_position(arm: &ArmModel, theta: &[f64]) -> Result<Vec3, KinematicsError> {
    Ok(arm.forward_kinematics(theta)?.position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};

    fn planar() -> ArmModel {
        ArmModel::builtin("planar2").unwrap()
    }

    #[test]
    fn planar_examples() {
        let arm = planar();
        let p = arm.forward_kinematics(&[0.0, 0.0]).unwrap().position;
        assert_relative_eq!(p, Vec3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        let p = arm.forward_kinematics(&[FRAC_PI_2, 0.0]).unwrap().position;
        assert_relative_eq!(p, Vec3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
        let p = arm.forward_kinematics(&[FRAC_PI_4, FRAC_PI_4]).unwrap().position;
        assert_relative_eq!(p.x, FRAC_PI_4.cos() + FRAC_PI_2.cos(), epsilon = 1e-12);
        assert_relative_eq!(p.y, FRAC_PI_4.sin() + FRAC_PI_2.sin(), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        assert_eq!(
            planar().forward_kinematics(&[0.0]),
            Err(KinematicsError::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        );
    }

    #[test]
    fn step_examples() {
        let arm = planar();
        let x = JointState::from_slice(&[0.3, -0.2]);
        let r = arm.step(&x, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(r.state.theta, x.theta);
        assert!(!r.limit_hit);

        let r = arm.step(&JointState::from_slice(&[0.0, 0.0]), &[1.0, 0.0], 0.1).unwrap();
        assert_eq!(r.state.theta[0], 0.1);

        let r = arm.step(&JointState::from_slice(&[0.0, 0.0]), &[3.0, 0.0], 0.1).unwrap();
        assert_eq!(r.state.theta_dot[0], 2.0);
        assert_relative_eq!(r.state.theta[0], 0.2, epsilon = 1e-15);
        assert!(r.limit_hit);
    }

    #[test]
    fn step_clamps_position() {
        let arm = planar();
        let r = arm.step(&JointState::from_slice(&[TAU - 0.01, 0.0]), &[1.0, 0.0], 0.1).unwrap();
        assert_eq!(r.state.theta[0], TAU);
        assert!(r.limit_hit);
    }

    #[test]
    fn feasibility_examples() {
        let arm = planar();
        assert!(arm.feasible(&arm.home_state(), &[0.0, 0.0]).unwrap().is_feasible());
        let f = arm
            .feasible(&JointState::from_slice(&[0.0, TAU + 1e-9]), &[0.0, 0.0])
            .unwrap();
        assert!(matches!(f.violations[..], [Violation::JointPosition { joint: 1, .. }]));
        assert!(arm.feasible(&arm.home_state(), &[2.0, -2.0]).unwrap().is_feasible());
        assert!(!arm.feasible(&arm.home_state(), &[2.0 + 1e-12, 0.0]).unwrap().is_feasible());
    }

    #[test]
    fn floor_violation() {
        let arm = ArmModel::builtin("ur5e").unwrap();
        let home = arm.home_state();
        assert!(arm.feasible(&home, &[0.0; 6]).unwrap().is_feasible());
        // Shoulder folded down drives the tool through the desk.
        let mut theta = home.theta.clone();
        theta[1] = 0.8;
        let f = arm.feasible(&JointState::at_rest(theta), &[0.0; 6]).unwrap();
        assert!(f.violations.iter().any(|v| matches!(v, Violation::BelowFloor { .. })));
    }

    #[test]
    fn ur5e_zero_pose() {
        // All-zero UR5e: tool along -y of the base after the wrist offsets.
        let arm = ArmModel::builtin("ur5e").unwrap();
        let p = arm.forward_kinematics(&[0.0; 6]).unwrap().position;
        assert_relative_eq!(p.x, -0.425 - 0.3922, epsilon = 1e-12);
        assert_relative_eq!(p.y, -(0.1333 + 0.0996 + 0.15), epsilon = 1e-12);
        assert_relative_eq!(p.z, 0.1625 - 0.0997, epsilon = 1e-12);
    }

    #[test]
    fn panda_home_is_in_front_of_base() {
        let arm = ArmModel::builtin("panda").unwrap();
        assert!(arm.feasible(&arm.home_state(), &[0.0; 7]).unwrap().is_feasible());
        let p = arm.forward_kinematics(arm.home.as_slice()).unwrap().position;
        // Published home flange: about 0.307 m forward and 0.59 m up.
        assert!((p.x - 0.307).abs() < 0.01, "x = {}", p.x);
        assert!(p.y.abs() < 1e-3);
        assert!((p.z - 0.59).abs() < 0.01, "z = {}", p.z);
    }

    #[test]
    fn bad_arm_files() {
        assert!(matches!(ArmModel::builtin("scara"), Err(KinematicsError::UnknownArm(_))));
        let bad = PLANAR2.replace("\"lower\": -6.283185307179586", "\"lower\": 7.0");
        assert!(matches!(ArmModel::from_json(&bad), Err(KinematicsError::InvalidArm(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn planar_fk_matches_closed_form(t1 in -PI..PI, t2 in -PI..PI) {
            let p = planar().forward_kinematics(&[t1, t2]).unwrap().position;
            prop_assert!((p.x - (t1.cos() + (t1 + t2).cos())).abs() <= 1e-12);
            prop_assert!((p.y - (t1.sin() + (t1 + t2).sin())).abs() <= 1e-12);
            prop_assert_eq!(p.z, 0.0);
        }
    }

    proptest! {
        #[test]
        fn half_steps_compose(
            q in prop::collection::vec(-1.0..1.0f64, 2),
            v in prop::collection::vec(-2.0..2.0f64, 2),
            dt in 0.001..0.2f64,
        ) {
            let arm = planar();
            let x = JointState::from_slice(&q);
            let one = arm.step(&x, &v, dt).unwrap().state;
            let half = arm.step(&x, &v, dt / 2.0).unwrap().state;
            let two = arm.step(&half, &v, dt / 2.0).unwrap().state;
            for i in 0..2 {
                prop_assert!((one.theta[i] - two.theta[i]).abs() <= 1e-12);
            }
            prop_assert_eq!(one.theta_dot, two.theta_dot);
        }
    }
}
