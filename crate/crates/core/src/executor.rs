//! Multi-stage execution loop.
//!
//! Each subtask is grounded into 3D constraints, approached under MPPI
//! control, then monitored: the precondition is checked on every tick and a
//! sustained violation backtracks one subtask, while a satisfied
//! postcondition (plus any gripper actuation) advances the plan. Tracker
//! updates move the active constraints between ticks.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    deproject, orientation_distance, position_distance, Constraint3D, DepthLookup, GeometryError,
    Pose, Vec2, Vec3,
};
use crate::kinematics::{ArmModel, JointState, KinematicsError};
use crate::mask::{ground_parts, FilterConfig, MaskError};
use crate::mppi::{solve_step, CollisionField, ControlSequence, CostSpec, MppiConfig, MppiError};
use crate::reasoner::{
    Conditions, ConstraintMode, ExecutionSpec, GripperAction, PostThreshold, Reasoner,
    ReasonerError, Subtask, TaskPlan,
};
use crate::refine::{refine, RefineConfig, RefineFailure, RefineInput, RefineReport, Strategy};
use crate::mask::GroundingReport;
use crate::sim::{Scene, SceneError, TrackerBinding, TrackerUpdate};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("unknown tracker label {0:?}")]
    UnknownLabel(String),
    #[error("invalid depth for tracker label {0:?}; constraint kept")]
    InvalidDepth(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid executor config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mppi(#[from] MppiError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Why grounding a subtask failed, with the stage that failed.
#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("render: {0}")]
    Render(#[from] SceneError),
    #[error("mask pipeline: {0}")]
    Mask(#[from] MaskError),
    #[error("reasoner: {0}")]
    Reasoner(#[from] ReasonerError),
    #[error("{0}")]
    Refine(#[from] RefineFailure),
    #[error("part centroid has no valid depth")]
    NoDepth,
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub tick_hz: f64,
    pub tick_limit: u64,
    /// Consecutive failing ticks that trigger a backtrack.
    pub precondition_hysteresis: u32,
    /// Backtracks allowed per subtask.
    pub backtrack_budget: u32,
    /// Ticks allowed to bring the end effector within the precondition
    /// region before the approach counts as a precondition failure.
    pub approach_timeout: u64,
    pub gripper_delay_s: f64,
    pub mppi: MppiConfig,
    pub filter: FilterConfig,
    pub refine: RefineConfig,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            tick_hz: 15.0,
            tick_limit: 3000,
            precondition_hysteresis: 3,
            backtrack_budget: 3,
            approach_timeout: 90,
            gripper_delay_s: 0.5,
            mppi: MppiConfig::default(),
            filter: FilterConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        let bad = |m: &str| Err(ExecError::InvalidConfig(m.into()));
        if !(self.tick_hz > 0.0) {
            return bad("tick_hz must be positive");
        }
        if self.precondition_hysteresis == 0 {
            return bad("precondition_hysteresis must be >= 1");
        }
        if !(self.gripper_delay_s >= 0.0) {
            return bad("gripper_delay_s must be >= 0");
        }
        if (self.mppi.dt - 1.0 / self.tick_hz).abs() > 1e-12 {
            return bad("mppi.dt must equal 1 / tick_hz");
        }
        self.filter
            .validate()
            .map_err(|e| ExecError::InvalidConfig(e.to_string()))?;
        self.refine
            .validate()
            .map_err(|e| ExecError::InvalidConfig(e.to_string()))
    }

    fn gripper_ticks(&self) -> u64 {
        (self.gripper_delay_s * self.tick_hz - 1e-9).ceil().max(0.0) as u64
    }
}

pub const TASK_SCHEMA_VERSION: u32 = 1;

/// Task file: an instruction plus, for scripted runs, the reasoner fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub schema_version: u32,
    pub instruction: String,
    /// Relative paths resolve against the task file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoner_fixture: Option<PathBuf>,
}

impl TaskSpec {
    pub fn load(path: &Path) -> Result<Self, ExecError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExecError::InvalidTask(format!("{}: {e}", path.display())))?;
        let mut t: TaskSpec = serde_json::from_str(&text)
            .map_err(|e| ExecError::InvalidTask(format!("{}: {e}", path.display())))?;
        if t.schema_version != TASK_SCHEMA_VERSION {
            return Err(ExecError::InvalidTask(format!(
                "unsupported schema_version {}",
                t.schema_version
            )));
        }
        if let Some(f) = &t.reasoner_fixture {
            if f.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                t.reasoner_fixture = Some(dir.join(f));
            }
        }
        Ok(t)
    }
}

/// `D_p ≤ ε_pre`.
pub fn check_precondition(pose: &Pose, target: &Constraint3D, pre_threshold: f64) -> bool {
    position_distance(pose, target) <= pre_threshold
}

/// `D_p + D_r ≤ ε_post`, with `D_r = 0` for orientation-free targets.
pub fn check_postcondition(pose: &Pose, target: &Constraint3D, post: &PostThreshold) -> bool {
    let (dp, dr) = distances(pose, target);
    dp + dr <= post.effective(target.orientation.is_some())
}

fn distances(pose: &Pose, target: &Constraint3D) -> (f64, f64) {
    let dp = position_distance(pose, target);
    let dr = target
        .orientation_quaternion()
        .map(|q| {
            orientation_distance(pose.orientation.quaternion(), q.quaternion())
                .expect("unit quaternions")
        })
        .unwrap_or(0.0);
    (dp, dr)
}

/// An active constraint with its tracking state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedConstraint {
    pub label: String,
    pub constraint: Constraint3D,
    /// Constraint position minus the tracked surface point.
    pub anchor: [f64; 3],
    pub last_timestamp: Option<f64>,
    /// Set when the latest update could not be deprojected.
    pub stale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// Older than the last applied update for the label.
    Ignored,
}

/// Re-deprojects a constraint from a tracked pixel and the current depth.
pub fn apply_tracker_update(
    active: &mut [TrackedConstraint],
    update: &TrackerUpdate,
    depth: &dyn DepthLookup,
    camera: &crate::geometry::CameraModel,
) -> Result<UpdateOutcome, ExecError> {
    let c = active
        .iter_mut()
        .find(|c| c.label == update.label)
        .ok_or_else(|| ExecError::UnknownLabel(update.label.clone()))?;
    if c.last_timestamp.is_some_and(|t| update.timestamp <= t) {
        return Ok(UpdateOutcome::Ignored);
    }
    c.last_timestamp = Some(update.timestamp);
    let px = Vec2::new(update.pixel[0], update.pixel[1]);
    let surface = depth
        .depth_at(px)
        .and_then(|d| deproject(px, d, camera).ok());
    match surface {
        Some(s) => {
            c.constraint.position = (s + Vec3::from(c.anchor)).into();
            c.stale = false;
            Ok(UpdateOutcome::Applied)
        }
        None => {
            c.stale = true;
            Err(ExecError::InvalidDepth(update.label.clone()))
        }
    }
}

/// Single target for the active constraints: mean position, first orientation.
pub fn combined_target(active: &[TrackedConstraint], offset: [f64; 3]) -> Constraint3D {
    let n = active.len().max(1) as f64;
    let sum: Vec3 = active.iter().map(|c| c.constraint.position()).sum();
    let mut t = Constraint3D::at(sum / n + Vec3::from(offset), "target");
    if let Some(q) = active.iter().find_map(|c| c.constraint.orientation_quaternion()) {
        t = t.with_orientation(&q);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Grounding,
    Approaching,
    Executing,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Grounded {
        label: u32,
        mode: ConstraintMode,
        constraints: usize,
    },
    PreconditionMet,
    PostconditionMet,
    Grip {
        action: GripperAction,
    },
    Advance,
    Backtrack {
        to: u32,
        count: u32,
        reason: String,
    },
    Done,
    Failed {
        reason: String,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Grounded { .. } => "grounded",
            EventKind::PreconditionMet => "precondition_met",
            EventKind::PostconditionMet => "postcondition_met",
            EventKind::Grip { .. } => "grip",
            EventKind::Advance => "advance",
            EventKind::Backtrack { .. } => "backtrack",
            EventKind::Done => "done",
            EventKind::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    /// Subtask id the event belongs to.
    pub subtask: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub subtask: u32,
    pub phase: Phase,
    pub d_p: Option<f64>,
    pub d_r: Option<f64>,
    pub command: Vec<f64>,
    pub ee: [f64; 3],
    pub stale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    BudgetExhausted,
    TickLimit,
    GroundingFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub tick: u64,
    pub subtask: u32,
    pub report: GroundingReport,
    pub label: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefineReport>,
    pub constraints: Vec<TrackedConstraint>,
    pub conditions: Conditions,
    pub execution: ExecutionSpec,
    /// Scene object bound to each tracked constraint.
    pub bound_objects: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub ticks: u64,
    pub groundings: u32,
    pub advances: u32,
    pub backtracks: u32,
    /// Backtracks charged to each subtask, by plan position.
    pub backtracks_per_subtask: Vec<u32>,
    pub tracker_updates: u64,
    pub stale_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub schema_version: u32,
    pub scene: String,
    pub seed: u64,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub counters: Counters,
    pub events: Vec<Event>,
    pub groundings: Vec<GroundingRecord>,
    #[serde(skip)]
    pub ticks: Vec<TickRecord>,
}

impl ExecutionReport {
    /// `(kind, subtask)` pairs, the form kept in golden files.
    pub fn event_trail(&self) -> Vec<(String, u32)> {
        self.events
            .iter()
            .map(|e| (e.kind.name().to_string(), e.subtask))
            .collect()
    }
}

/// Observation-to-constraint step for one subtask.
pub struct Grounded {
    pub record: GroundingRecord,
    pub bindings: Vec<TrackerBinding>,
}

pub fn ground_subtask(
    scene: &Scene,
    reasoner: &Reasoner,
    subtask: &Subtask,
    cfg: &ExecutorConfig,
    time: f64,
    tick: u64,
) -> Result<Grounded, GroundingError> {
    let rendering = scene.render(time)?;
    let obs = &rendering.observation;
    let parts = ground_parts(&obs.masks, &cfg.filter)?;
    let label = reasoner.select_part_label(&parts.report.prompt, &subtask.target_label_query)?;
    let entry = parts
        .report
        .centroids
        .iter()
        .find(|c| c.label == label)
        .ok_or(ReasonerError::LabelNotInPayload(label))?;
    let mask = &parts.clustered.masks()[entry.mask_index];
    let centroid = entry.point();

    let (constraints, refinement) = match subtask.constraint_mode {
        ConstraintMode::M1 => {
            let d = obs.depth.depth_at(centroid).ok_or(GroundingError::NoDepth)?;
            let p = deproject(centroid, d, &obs.camera)?;
            (vec![Constraint3D::at(p, format!("part{label}"))], None)
        }
        mode => {
            let strategy = if mode == ConstraintMode::M2 {
                Strategy::Geometric
            } else {
                Strategy::Positional
            };
            let input = RefineInput {
                mask,
                part_label: label,
                centroid,
                depth: &obs.depth,
                camera: &obs.camera,
                instruction: &subtask.instruction,
            };
            let report = refine(strategy, &input, &cfg.refine, reasoner)?;
            (report.constraints.clone(), Some(report))
        }
    };
    let with_orientation = constraints.iter().any(|c| c.orientation.is_some());
    let conditions = reasoner.build_conditions(subtask, with_orientation)?;
    let execution = reasoner.execution_spec(subtask)?;

    let probe = scene.depth_probe(time);
    let mut tracked = Vec::new();
    let mut bindings = Vec::new();
    let mut bound_objects = Vec::new();
    for (i, c) in constraints.into_iter().enumerate() {
        let key = format!("s{}/c{i}", subtask.id);
        let p = c.position();
        // Track the visible surface point on the ray through the constraint.
        let surface = obs.camera.project(&p).ok().and_then(|px| {
            let s = deproject(px, probe.depth_at(px)?, &obs.camera).ok()?;
            Some((px, s))
        });
        let mut anchor = [0.0; 3];
        let mut object = None;
        if let Some((px, s)) = surface {
            if let Some(obj) = scene.object_at(px, time) {
                anchor = (p - s).into();
                bindings.push(scene.bind(&key, obj, &s, time));
                object = Some(scene.spec.objects[obj].id.clone());
            }
        }
        bound_objects.push(object);
        tracked.push(TrackedConstraint {
            label: key,
            constraint: c,
            anchor,
            last_timestamp: None,
            stale: false,
        });
    }
    Ok(Grounded {
        record: GroundingRecord {
            tick,
            subtask: subtask.id,
            report: parts.report,
            label,
            refinement,
            constraints: tracked,
            conditions,
            execution,
            bound_objects,
        },
        bindings,
    })
}

struct Active {
    constraints: Vec<TrackedConstraint>,
    bindings: Vec<TrackerBinding>,
    conditions: Conditions,
    execution: ExecutionSpec,
}

pub struct Executor<'a> {
    pub scene: &'a Scene,
    pub arm: &'a ArmModel,
    pub reasoner: &'a Reasoner,
    pub cfg: ExecutorConfig,
}

impl Executor<'_> {
    pub fn run(&self, plan: &TaskPlan) -> Result<ExecutionReport, ExecError> {
        self.cfg.validate()?;
        if plan.subtasks.is_empty() {
            return Err(ExecError::InvalidConfig("plan has no subtasks".into()));
        }
        let cfg = &self.cfg;
        let dt = 1.0 / cfg.tick_hz;
        let collision: Option<Arc<dyn CollisionField>> = if self.scene.spec.obstacles.is_empty() {
            None
        } else {
            Some(Arc::new(self.scene.obstacle_field()))
        };
        let n = self.arm.dof();
        let mut x: JointState = self.arm.home_state();
        let mut mean = ControlSequence::zeros(cfg.mppi.horizon, n);

        let mut index = 0usize;
        let mut phase = Phase::Grounding;
        let mut active: Option<Active> = None;
        let mut failing = 0u32;
        let mut approach_ticks = 0u64;
        let mut grip_left: Option<u64> = None;
        let mut last_tracker_time = -1.0;
        let mut queue: VecDeque<TrackerUpdate> = VecDeque::new();

        let mut events = Vec::new();
        let mut groundings = Vec::new();
        let mut ticks = Vec::new();
        let mut counters = Counters {
            ticks: 0,
            groundings: 0,
            advances: 0,
            backtracks: 0,
            backtracks_per_subtask: vec![0; plan.subtasks.len()],
            tracker_updates: 0,
            stale_updates: 0,
        };
        let mut outcome = Outcome::TickLimit;
        let mut failure = None;

        let mut tick = 0u64;
        while tick < cfg.tick_limit {
            let time = tick as f64 * dt;
            let subtask = &plan.subtasks[index];
            let id = subtask.id;
            let mut push = |kind: EventKind| events.push(Event { tick, subtask: id, kind });

            // Drain tracker frames up to now into the active constraints.
            if let Some(a) = active.as_mut() {
                queue.extend(self.scene.tracker_updates(&a.bindings, last_tracker_time, time));
                while let Some(u) = queue.pop_front() {
                    counters.tracker_updates += 1;
                    let probe = self.scene.depth_probe(u.timestamp);
                    match apply_tracker_update(&mut a.constraints, &u, &probe, &self.scene.camera) {
                        Ok(_) => {}
                        Err(ExecError::InvalidDepth(_)) => counters.stale_updates += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            last_tracker_time = time;

            let pose = self.arm.forward_kinematics(x.theta.as_slice())?;
            let mut record = TickRecord {
                tick,
                time,
                subtask: id,
                phase,
                d_p: None,
                d_r: None,
                command: vec![0.0; n],
                ee: pose.position.into(),
                stale: false,
            };

            match phase {
                Phase::Grounding => {
                    counters.groundings += 1;
                    match ground_subtask(self.scene, self.reasoner, subtask, cfg, time, tick) {
                        Ok(g) => {
                            push(EventKind::Grounded {
                                label: g.record.label,
                                mode: subtask.constraint_mode,
                                constraints: g.record.constraints.len(),
                            });
                            active = Some(Active {
                                constraints: g.record.constraints.clone(),
                                bindings: g.bindings,
                                conditions: g.record.conditions,
                                execution: g.record.execution,
                            });
                            groundings.push(g.record);
                            // Frames before grounding describe the old observation.
                            last_tracker_time = time;
                            phase = Phase::Approaching;
                            approach_ticks = 0;
                            failing = 0;
                            grip_left = None;
                        }
                        Err(e) => {
                            let reason = format!("subtask {id}: {e}");
                            push(EventKind::Failed { reason: reason.clone() });
                            failure = Some(reason);
                            outcome = Outcome::GroundingFailed;
                            ticks.push(record);
                            break;
                        }
                    }
                }
                Phase::Approaching | Phase::Executing => {
                    let a = active.as_ref().expect("grounded before motion");
                    let target = combined_target(&a.constraints, a.execution.target_offset);
                    let (dp, dr) = distances(&pose, &target);
                    record.d_p = Some(dp);
                    record.d_r = Some(dr);
                    record.stale = a.constraints.iter().any(|c| c.stale);
                    let pre = check_precondition(&pose, &target, a.conditions.pre_threshold);

                    let mut backtrack_reason = None;
                    let mut advance = false;
                    if phase == Phase::Approaching {
                        if pre {
                            push(EventKind::PreconditionMet);
                            phase = Phase::Executing;
                        } else {
                            approach_ticks += 1;
                            if approach_ticks >= cfg.approach_timeout {
                                backtrack_reason = Some("approach timed out".to_string());
                            }
                        }
                    }
                    if phase == Phase::Executing && backtrack_reason.is_none() {
                        failing = if pre { 0 } else { failing + 1 };
                        if failing >= cfg.precondition_hysteresis {
                            backtrack_reason = Some("precondition violated".to_string());
                        } else if let Some(left) = grip_left {
                            if left <= 1 {
                                advance = true;
                            } else {
                                grip_left = Some(left - 1);
                            }
                        } else if check_postcondition(&pose, &target, &a.conditions.post_threshold) {
                            push(EventKind::PostconditionMet);
                            let action = a.execution.gripper_action;
                            if action != GripperAction::None {
                                push(EventKind::Grip { action });
                                let delay = cfg.gripper_ticks();
                                if delay == 0 {
                                    advance = true;
                                } else {
                                    grip_left = Some(delay);
                                }
                            } else {
                                advance = true;
                            }
                        }
                    }

                    if let Some(reason) = backtrack_reason {
                        let count = &mut counters.backtracks_per_subtask[index];
                        *count += 1;
                        counters.backtracks += 1;
                        let count = *count;
                        if count > cfg.backtrack_budget {
                            let reason = format!(
                                "subtask {id}: backtrack budget of {} exhausted ({reason})",
                                cfg.backtrack_budget
                            );
                            push(EventKind::Failed { reason: reason.clone() });
                            failure = Some(reason);
                            outcome = Outcome::BudgetExhausted;
                            record.phase = Phase::Failed;
                            ticks.push(record);
                            break;
                        }
                        index = index.saturating_sub(1);
                        push(EventKind::Backtrack {
                            to: plan.subtasks[index].id,
                            count,
                            reason,
                        });
                        phase = Phase::Grounding;
                        active = None;
                        mean = ControlSequence::zeros(cfg.mppi.horizon, n);
                        x.theta_dot.fill(0.0);
                    } else if advance {
                        counters.advances += 1;
                        push(EventKind::Advance);
                        index += 1;
                        active = None;
                        grip_left = None;
                        if index == plan.subtasks.len() {
                            push(EventKind::Done);
                            outcome = Outcome::Completed;
                            record.phase = Phase::Done;
                            ticks.push(record);
                            break;
                        }
                        phase = Phase::Grounding;
                        mean = ControlSequence::zeros(cfg.mppi.horizon, n);
                        x.theta_dot.fill(0.0);
                    } else {
                        let spec = CostSpec::new(&target, a.conditions.cost_weights, collision.clone())?;
                        let out = solve_step(self.arm, &x, &spec, &cfg.mppi, &mean, tick)?;
                        x = self.arm.step(&x, out.command.as_slice(), dt)?.state;
                        mean = out.next_mean;
                        record.command = out.command.iter().copied().collect();
                    }
                }
                Phase::Done | Phase::Failed => unreachable!("loop exits on terminal phases"),
            }
            ticks.push(record);
            tick += 1;
        }
        counters.ticks = ticks.len() as u64;
        if outcome == Outcome::TickLimit {
            let id = plan.subtasks[index].id;
            let reason = format!("tick limit {} reached", cfg.tick_limit);
            events.push(Event {
                tick: cfg.tick_limit,
                subtask: id,
                kind: EventKind::Failed { reason: reason.clone() },
            });
            failure = Some(reason);
        }
        Ok(ExecutionReport {
            schema_version: REPORT_SCHEMA_VERSION,
            scene: self.scene.spec.name.clone(),
            seed: cfg.mppi.seed,
            outcome,
            failure,
            counters,
            events,
            groundings,
            ticks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, DepthImage, RigidTransform};
    use nalgebra::UnitQuaternion;

    fn pose_at(p: Vec3) -> Pose {
        Pose::from_position(p)
    }

    #[test]
    fn precondition_examples() {
        let c = Constraint3D::at(Vec3::new(0.3, 0.0, 0.2), "c");
        assert!(check_precondition(&pose_at(c.position()), &c, 1e-9));
        assert!(!check_precondition(&pose_at(Vec3::new(0.5, 0.0, 0.2)), &c, 0.1));
        // Boundary is inclusive.
        let c0 = Constraint3D::at(Vec3::zeros(), "c");
        assert!(check_precondition(&pose_at(Vec3::new(0.125, 0.0, 0.0)), &c0, 0.125));
    }

    #[test]
    fn postcondition_examples() {
        let q = UnitQuaternion::identity();
        let c = Constraint3D::at(Vec3::new(0.3, 0.0, 0.2), "c").with_orientation(&q);
        let post = PostThreshold { position: 0.005, orientation: 0.005 };
        assert!(check_postcondition(&Pose::new(c.position(), q), &c, &post));
        let flipped = UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI);
        assert!(!check_postcondition(&Pose::new(c.position(), flipped), &c, &post));
        // D_p = 0.005 and D_r = 0.004 against 0.01.
        let tilted = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), 0.004);
        let p = Pose::new(c.position() + Vec3::new(0.005, 0.0, 0.0), tilted);
        let (dp, dr) = distances(&p, &c);
        assert!((dp - 0.005).abs() < 1e-12 && (dr - 0.004).abs() < 1e-9);
        assert!(check_postcondition(&p, &c, &post));
        // Orientation-free targets ignore the orientation allowance.
        let free = Constraint3D::at(c.position(), "c");
        let off = pose_at(c.position() + Vec3::new(0.007, 0.0, 0.0));
        assert!(!check_postcondition(&off, &free, &post));
    }

    fn flat(depth: f32) -> (DepthImage, CameraModel) {
        (
            DepthImage::filled(64, 48, depth),
            CameraModel::new(50.0, 50.0, 32.0, 24.0, RigidTransform::identity()).unwrap(),
        )
    }

    fn tracked(label: &str, p: Vec3) -> TrackedConstraint {
        TrackedConstraint {
            label: label.into(),
            constraint: Constraint3D::at(p, label),
            anchor: [0.0; 3],
            last_timestamp: None,
            stale: false,
        }
    }

    #[test]
    fn tracker_update_rules() {
        let (depth, cam) = flat(1.0);
        let p = deproject(Vec2::new(32.0, 24.0), 1.0, &cam).unwrap();
        let mut active = vec![tracked("a", p)];
        let u = |px: [f64; 2], ts: f64| TrackerUpdate { label: "a".into(), pixel: px, timestamp: ts };

        // Zero motion leaves the constraint unchanged.
        apply_tracker_update(&mut active, &u([32.0, 24.0], 0.0), &depth, &cam).unwrap();
        assert_eq!(active[0].constraint.position(), p);

        apply_tracker_update(&mut active, &u([37.0, 24.0], 0.1), &depth, &cam).unwrap();
        assert!((active[0].constraint.position() - Vec3::new(0.1, 0.0, 1.0)).norm() < 1e-12);

        // Older frames are ignored.
        let r = apply_tracker_update(&mut active, &u([32.0, 24.0], 0.05), &depth, &cam).unwrap();
        assert_eq!(r, UpdateOutcome::Ignored);
        assert!((active[0].constraint.position().x - 0.1).abs() < 1e-12);

        let bad = TrackerUpdate { label: "zz".into(), pixel: [1.0, 1.0], timestamp: 1.0 };
        assert!(matches!(
            apply_tracker_update(&mut active, &bad, &depth, &cam),
            Err(ExecError::UnknownLabel(_))
        ));

        let (hole, _) = flat(0.0);
        let before = active[0].constraint.clone();
        assert!(matches!(
            apply_tracker_update(&mut active, &u([40.0, 24.0], 0.2), &hole, &cam),
            Err(ExecError::InvalidDepth(_))
        ));
        assert!(active[0].stale);
        assert_eq!(active[0].constraint, before);
    }

    #[test]
    fn anchor_offsets_are_kept() {
        let (depth, cam) = flat(1.0);
        let mut c = tracked("a", Vec3::new(0.0, 0.0, 0.8));
        c.anchor = [0.0, 0.0, -0.2];
        let mut active = vec![c];
        let u = TrackerUpdate { label: "a".into(), pixel: [42.0, 24.0], timestamp: 0.0 };
        apply_tracker_update(&mut active, &u, &depth, &cam).unwrap();
        assert!((active[0].constraint.position() - Vec3::new(0.2, 0.0, 0.8)).norm() < 1e-12);
    }

    #[test]
    fn combined_target_is_mean_plus_offset() {
        let active = vec![
            tracked("a", Vec3::new(0.0, 0.0, 0.0)),
            tracked("b", Vec3::new(0.2, 0.4, 0.0)),
        ];
        let t = combined_target(&active, [0.0, 0.0, 0.15]);
        assert!((t.position() - Vec3::new(0.1, 0.2, 0.15)).norm() < 1e-15);
        assert!(t.orientation.is_none());
    }

    #[test]
    fn gripper_delay_in_ticks() {
        let cfg = ExecutorConfig::default();
        assert_eq!(cfg.gripper_ticks(), 8);
        let exact = ExecutorConfig { gripper_delay_s: 0.4, ..Default::default() };
        assert_eq!(exact.gripper_ticks(), 6);
    }

    #[test]
    fn config_validation() {
        assert!(ExecutorConfig::default().validate().is_ok());
        let mut c = ExecutorConfig { tick_hz: 10.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.mppi.dt = 0.1;
        assert!(c.validate().is_ok());
        c.precondition_hysteresis = 0;
        assert!(c.validate().is_err());
    }
}
