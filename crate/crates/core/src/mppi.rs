//! Model predictive path integral control over joint velocities.
//!
//! Each call to [`solve_step`] samples `K` perturbations of the mean control
//! sequence, rolls them through the kinematic model, weights them by
//! `exp(-(C_k - min C) / β)` and returns the first input of the weighted
//! blend. Sample 0 is always the unperturbed mean. Every sample draws from
//! its own RNG stream keyed by `(seed, iteration, k)` and the blend sums in
//! sample order, so results do not depend on the rayon thread count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{orientation_distance, Constraint3D, Pose, Vec3};
use crate::kinematics::{ArmModel, JointState, KinematicsError};
use crate::reasoner::CostWeights;

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MppiError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("weights sum to {0}, expected 1")]
    WeightSumMismatch(f64),
    #[error("control sequence is {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Sampling covariance: a shared diagonal variance or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariance {
    Diagonal(f64),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub samples: usize,
    pub horizon: usize,
    pub dt: f64,
    /// Covariance of the velocity perturbation, (rad/s)².
    pub sigma: Covariance,
    pub beta: f64,
    pub seed: u64,
    /// Added per rollout step whose state is infeasible.
    pub infeasible_penalty: f64,
    /// Clearance below which the collision hinge activates, meters.
    pub d_safe: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            horizon: 16,
            dt: 1.0 / 15.0,
            sigma: Covariance::Diagonal(0.04),
            beta: 0.5,
            seed: 0,
            infeasible_penalty: 1e3,
            d_safe: 0.03,
        }
    }
}

impl MppiConfig {
    /// Validates the config for an `n`-joint arm and returns the Cholesky
    /// factor of the covariance.
    pub fn sampling_factor(&self, n: usize) -> Result<DMatrix<f64>, MppiError> {
        let bad = |m: String| Err(MppiError::InvalidConfig(m));
        if self.samples < 2 {
            return bad("samples must be >= 2".into());
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if !(self.beta > 0.0) || !(self.dt > 0.0) {
            return bad("beta and dt must be positive".into());
        }
        let cov = match &self.sigma {
            Covariance::Diagonal(v) => DMatrix::from_diagonal_element(n, n, *v),
            Covariance::Full(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return bad(format!("sigma must be {n}x{n}"));
                }
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
        };
        if (&cov - cov.transpose()).abs().max() > 1e-12 {
            return bad("sigma must be symmetric".into());
        }
        match cov.cholesky() {
            Some(c) => Ok(c.l()),
            None => bad("sigma must be positive definite".into()),
        }
    }
}

/// `T × n` joint velocities; row `t` is the input at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub inputs: DMatrix<f64>,
}

impl ControlSequence {
    pub fn zeros(horizon: usize, n: usize) -> Self {
        Self {
            inputs: DMatrix::zeros(horizon, n),
        }
    }

    pub fn constant(horizon: usize, v: &[f64]) -> Self {
        Self {
            inputs: DMatrix::from_fn(horizon, v.len(), |_, j| v[j]),
        }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dof(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn input(&self, t: usize) -> Vec<f64> {
        self.inputs.row(t).iter().copied().collect()
    }

    /// Drops the first input and appends a zero input.
    pub fn shifted(&self) -> Self {
        let (h, n) = self.inputs.shape();
        Self {
            inputs: DMatrix::from_fn(h, n, |t, j| if t + 1 < h { self.inputs[(t + 1, j)] } else { 0.0 }),
        }
    }
}

/// Signed distance to the nearest obstacle, positive outside.
pub trait CollisionField: Send + Sync {
    fn sdf(&self, p: &Vec3) -> f64;
}

#[derive(Clone)]
pub struct CostSpec {
    pub target: Vec3,
    pub orientation: Option<UnitQuaternion<f64>>,
    pub weights: CostWeights,
    pub collision: Option<Arc<dyn CollisionField>>,
}

impl std::fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostSpec")
            .field("target", &self.target)
            .field("orientation", &self.orientation)
            .field("weights", &self.weights)
            .field("collision", &self.collision.is_some())
            .finish()
    }
}

impl CostSpec {
    /// The orientation weight is forced to zero for orientation-free targets.
    pub fn new(
        target: &Constraint3D,
        mut weights: CostWeights,
        collision: Option<Arc<dyn CollisionField>>,
    ) -> Result<Self, MppiError> {
        for w in [weights.position, weights.orientation, weights.collision] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(MppiError::InvalidConfig(format!("weight {w} must be >= 0")));
            }
        }
        let orientation = target.orientation_quaternion();
        if orientation.is_none() {
            weights.orientation = 0.0;
        }
        Ok(Self {
            target: target.position(),
            orientation,
            weights,
            collision,
        })
    }

    /// Step cost `λ_p·d_p + λ_r·d_r + λ_c·D_c` at one pose.
    pub fn step_cost(&self, pose: &Pose, d_safe: f64) -> f64 {
        let w = &self.weights;
        let mut j = w.position * (pose.position - self.target).norm();
        if let Some(q) = &self.orientation {
            if w.orientation > 0.0 {
                j += w.orientation * orientation_distance_unit(&pose.orientation, q);
            }
        }
        if let Some(field) = &self.collision {
            if w.collision > 0.0 {
                j += w.collision * collision_hinge(field.as_ref(), &pose.position, d_safe);
            }
        }
        j
    }
}

fn orientation_distance_unit(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    orientation_distance(a.quaternion(), b.quaternion()).expect("unit quaternions")
}

/// `max(0, d_safe - sdf(p))`.
pub fn collision_hinge(field: &dyn CollisionField, p: &Vec3, d_safe: f64) -> f64 {
    (d_safe - field.sdf(p)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `T + 1` states, starting with `x0`.
    pub states: Vec<JointState>,
    pub poses: Vec<Pose>,
    pub cost: f64,
}

/// Mixes `(seed, iteration, k)` into one RNG seed (SplitMix64 finalizer).
fn stream_seed(seed: u64, iteration: u64, k: u64) -> u64 {
    let mut z = seed
        ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ k.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_one(
    cfg: &MppiConfig,
    factor: &DMatrix<f64>,
    mean: &ControlSequence,
    iteration: u64,
    k: usize,
) -> ControlSequence {
    if k == 0 {
        return mean.clone();
    }
    let (h, n) = mean.inputs.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, iteration, k as u64));
    let mut out = mean.clone();
    let mut z = DVector::zeros(n);
    for t in 0..h {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let eps = factor * &z;
        for j in 0..n {
            out.inputs[(t, j)] += eps[j];
        }
    }
    out
}

fn check_mean(cfg: &MppiConfig, n: usize, mean: &ControlSequence) -> Result<(), MppiError> {
    if mean.inputs.shape() != (cfg.horizon, n) {
        return Err(MppiError::ShapeMismatch {
            expected: (cfg.horizon, n),
            actual: mean.inputs.shape(),
        });
    }
    Ok(())
}

/// `K` sequences `μ + ε` with `ε ~ N(0, Σ)` per step; index 0 is `μ` itself.
pub fn sample_controls(
    cfg: &MppiConfig,
    mean: &ControlSequence,
    iteration: u64,
) -> Result<Vec<ControlSequence>, MppiError> {
    let n = mean.dof();
    let factor = cfg.sampling_factor(n)?;
    check_mean(cfg, n, mean)?;
    Ok((0..cfg.samples)
        .into_par_iter()
        .map(|k| sample_one(cfg, &factor, mean, iteration, k))
        .collect())
}

fn rollout_inner(
    arm: &ArmModel,
    x0: &JointState,
    seq: &ControlSequence,
    spec: &CostSpec,
    cfg: &MppiConfig,
    mut record: Option<&mut Rollout>,
) -> f64 {
    let mut x = x0.clone();
    let mut cost = 0.0;
    for t in 0..seq.horizon() {
        let v = seq.input(t);
        let next = arm.step(&x, &v, cfg.dt).expect("dimensions checked").state;
        let pose = arm.fk_unchecked(next.theta.as_slice());
        cost += spec.step_cost(&pose, cfg.d_safe);
        if let Some(floor) = arm.floor_z {
            // Positions and velocities are clamped by `step`, so the floor
            // is the only constraint a stepped state can violate.
            if pose.position.z < floor {
                cost += cfg.infeasible_penalty;
            }
        }
        if let Some(r) = record.as_deref_mut() {
            r.states.push(next.clone());
            r.poses.push(pose);
        }
        x = next;
    }
    cost
}

/// Integrates `seq` from `x0` and sums the step cost over the `T`
/// post-step states.
pub fn rollout_cost(
    arm: &ArmModel,
    x0: &JointState,
    seq: &ControlSequence,
    spec: &CostSpec,
    cfg: &MppiConfig,
) -> Result<Rollout, MppiError> {
    if x0.theta.len() != arm.dof() || seq.dof() != arm.dof() {
        return Err(KinematicsError::DimensionMismatch {
            expected: arm.dof(),
            actual: seq.dof(),
        }
        .into());
    }
    let mut r = Rollout {
        states: vec![x0.clone()],
        poses: vec![arm.fk_unchecked(x0.theta.as_slice())],
        cost: 0.0,
    };
    r.cost = rollout_inner(arm, x0, seq, spec, cfg, Some(&mut r));
    Ok(r)
}

/// `ω_k ∝ exp(-(C_k - ρ) / β)` with `ρ = min_k C_k`, normalised to sum 1.
pub fn compute_weights(costs: &[f64], beta: f64) -> Vec<f64> {
    let rho = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|c| (-(c - rho) / beta).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// `Σ_k ω_k V_k`, summed in sample order.
pub fn blend(sequences: &[ControlSequence], weights: &[f64]) -> Result<ControlSequence, MppiError> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE || sequences.len() != weights.len() {
        return Err(MppiError::WeightSumMismatch(sum));
    }
    let (h, n) = sequences[0].inputs.shape();
    let mut out = DMatrix::zeros(h, n);
    for (s, &w) in sequences.iter().zip(weights) {
        if s.inputs.shape() != (h, n) {
            return Err(MppiError::ShapeMismatch {
                expected: (h, n),
                actual: s.inputs.shape(),
            });
        }
        out += &s.inputs * w;
    }
    Ok(ControlSequence { inputs: out })
}

/// Effective sample size `1 / Σ ω²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iteration: u64,
    pub min_cost: f64,
    pub mean_cost: f64,
    /// Cost of the unperturbed mean (sample 0).
    pub mean_sequence_cost: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub command: DVector<f64>,
    pub next_mean: ControlSequence,
    pub blended: ControlSequence,
    pub diagnostics: Diagnostics,
}

pub fn solve_step(
    arm: &ArmModel,
    x0: &JointState,
    spec: &CostSpec,
    cfg: &MppiConfig,
    mean: &ControlSequence,
    iteration: u64,
) -> Result<SolveOutput, MppiError> {
    let n = arm.dof();
    let factor = cfg.sampling_factor(n)?;
    check_mean(cfg, n, mean)?;
    if x0.theta.len() != n {
        return Err(KinematicsError::DimensionMismatch {
            expected: n,
            actual: x0.theta.len(),
        }
        .into());
    }
    let samples: Vec<(ControlSequence, f64)> = (0..cfg.samples)
        .into_par_iter()
        .map(|k| {
            let seq = sample_one(cfg, &factor, mean, iteration, k);
            let c = rollout_inner(arm, x0, &seq, spec, cfg, None);
            (seq, c)
        })
        .collect();
    let costs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let weights = compute_weights(&costs, cfg.beta);
    let seqs: Vec<ControlSequence> = samples.into_iter().map(|s| s.0).collect();
    let blended = blend(&seqs, &weights)?;
    let command = DVector::from_iterator(n, blended.inputs.row(0).iter().copied());
    Ok(SolveOutput {
        command,
        next_mean: blended.shifted(),
        diagnostics: Diagnostics {
            iteration,
            min_cost: costs.iter().copied().fold(f64::INFINITY, f64::min),
            mean_cost: costs.iter().sum::<f64>() / costs.len() as f64,
            mean_sequence_cost: costs[0],
            ess: effective_sample_size(&weights),
        },
        blended,
    })
}

/// Repeated solve-and-step on the kinematic model; returns the states.
pub fn run_closed_loop(
    arm: &ArmModel,
    x0: &JointState,
    spec: &CostSpec,
    cfg: &MppiConfig,
    ticks: usize,
) -> Result<Vec<JointState>, MppiError> {
    let mut x = x0.clone();
    let mut mean = ControlSequence::zeros(cfg.horizon, arm.dof());
    let mut states = vec![x.clone()];
    for it in 0..ticks {
        let out = solve_step(arm, &x, spec, cfg, &mean, it as u64)?;
        x = arm.step(&x, out.command.as_slice(), cfg.dt)?.state;
        mean = out.next_mean;
        states.push(x.clone());
    }
    Ok(states)
}
