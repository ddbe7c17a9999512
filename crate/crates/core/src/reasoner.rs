//! Boundary to the multimodal model.
//!
//! Every model interaction is a [`ReasonerQuery`] tagged with one of seven
//! roles. Backends return raw reply text; [`Reasoner`] parses and validates
//! it against the role's schema, retries a failed query exactly once and
//! appends both attempts to an optional JSONL audit log.
//!
//! [`ScriptedBackend`] answers from a fixture file and is a pure function of
//! `(query, fixture)`. [`HttpBackend`] speaks a generic chat-completion
//! protocol and expects the reply to hold a single fenced JSON object.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mask::PromptPayload;
use crate::refine::{CellContext, CellSelector};

pub const FIXTURE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonerError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("reply violates the {role} schema: {reason}")]
    SchemaViolation { role: Role, reason: String },
    #[error("label {0} is not in the prompt payload")]
    LabelNotInPayload(u32),
    #[error("label {0} is not a labelled grid cell")]
    LabelNotInGrid(u32),
    #[error("reply is empty")]
    EmptyReply,
    #[error("no fixture entry for role {role} and key {key:?}")]
    NoFixture { role: Role, key: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend configuration: {0}")]
    Configuration(String),
    #[error("audit log: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TaskPlanner,
    ConstraintExtraction,
    ConstraintRefinement,
    SubtaskExecution,
    PreconditionsBuilding,
    CostFunctionBuilding,
    PostconditionsBuilding,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::TaskPlanner,
        Role::ConstraintExtraction,
        Role::ConstraintRefinement,
        Role::SubtaskExecution,
        Role::PreconditionsBuilding,
        Role::CostFunctionBuilding,
        Role::PostconditionsBuilding,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::TaskPlanner => "task_planner",
            Role::ConstraintExtraction => "constraint_extraction",
            Role::ConstraintRefinement => "constraint_refinement",
            Role::SubtaskExecution => "subtask_execution",
            Role::PreconditionsBuilding => "preconditions_building",
            Role::CostFunctionBuilding => "cost_function_building",
            Role::PostconditionsBuilding => "postconditions_building",
        }
    }

    /// Reply schema shown to live models.
    fn reply_schema(&self) -> &'static str {
        match self {
            Role::TaskPlanner => {
                r#"{"subtasks": [{"id": 1, "instruction": str, "constraint_mode": "M1"|"M2"|"M3", "target_label_query": str, "gripper_action": "none"|"open"|"close", "target_offset": [x, y, z]}]}"#
            }
            Role::ConstraintExtraction => r#"{"label": int}"#,
            Role::ConstraintRefinement => r#"{"labels": [int, ...]}"#,
            Role::SubtaskExecution => {
                r#"{"gripper_action": "none"|"open"|"close", "target_offset": [x, y, z]}"#
            }
            Role::PreconditionsBuilding => r#"{"pre_threshold": meters}"#,
            Role::CostFunctionBuilding => {
                r#"{"cost_weights": {"position": w, "orientation": w, "collision": w}}"#
            }
            Role::PostconditionsBuilding => {
                r#"{"post_threshold": {"position": meters, "orientation": radians}}"#
            }
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerQuery {
    pub role: Role,
    pub key: String,
    pub context: Value,
}

impl ReasonerQuery {
    pub fn new(role: Role, key: impl Into<String>, context: Value) -> Self {
        Self {
            role,
            key: key.into(),
            context,
        }
    }

    /// SHA-256 of the canonical JSON (object keys sorted) of the query.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&canonicalize(&serde_json::to_value(self).unwrap()))
            .expect("query serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<_, _> = map.iter().map(|(k, v)| (k.clone(), canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, query: &ReasonerQuery) -> Result<String, ReasonerError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

/// Deterministic reply computed from the query context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Payload mark with the largest area.
    MaxArea,
    /// Payload mark with the smallest area.
    MinArea,
    /// Payload mark whose centroid is closest to `[x, y]`.
    NearestTo([f64; 2]),
    /// `count` grid cells furthest along `direction`, no two of them
    /// 8-adjacent. Ties go to the cell nearer the grid's centre line, then
    /// the lower label.
    ExtremeCells { direction: Direction, count: usize },
    /// The cell holding the part centroid.
    CentroidCell,
    /// Object made of the named context fields.
    Echo(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub schema_version: u32,
    pub entries: Vec<FixtureEntry>,
}

/// Answers queries from a fixture. Lookup order: exact digest, then
/// role + key, then a role-wide entry without key.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    fixture: Fixture,
}

impl ScriptedBackend {
    pub fn new(fixture: Fixture) -> Result<Self, ReasonerError> {
        if fixture.schema_version != FIXTURE_SCHEMA_VERSION {
            return Err(ReasonerError::Configuration(format!(
                "fixture schema_version {} is not supported",
                fixture.schema_version
            )));
        }
        for e in &fixture.entries {
            if e.reply.is_some() == e.rule.is_some() {
                return Err(ReasonerError::Configuration(format!(
                    "fixture entry for {} needs exactly one of reply or rule",
                    e.role
                )));
            }
        }
        Ok(Self { fixture })
    }

    pub fn from_json(text: &str) -> Result<Self, ReasonerError> {
        let fixture = serde_json::from_str(text)
            .map_err(|e| ReasonerError::Configuration(format!("fixture: {e}")))?;
        Self::new(fixture)
    }

    pub fn from_file(path: &Path) -> Result<Self, ReasonerError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ReasonerError::Configuration(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn lookup(&self, q: &ReasonerQuery) -> Option<&FixtureEntry> {
        let digest = q.digest();
        let entries = &self.fixture.entries;
        entries
            .iter()
            .find(|e| e.digest.as_deref() == Some(digest.as_str()))
            .or_else(|| {
                entries
                    .iter()
                    .find(|e| e.role == q.role && e.digest.is_none() && e.key.as_deref() == Some(q.key.as_str()))
            })
            .or_else(|| {
                entries
                    .iter()
                    .find(|e| e.role == q.role && e.digest.is_none() && e.key.is_none())
            })
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, q: &ReasonerQuery) -> Result<String, ReasonerError> {
        let entry = self.lookup(q).ok_or_else(|| ReasonerError::NoFixture {
            role: q.role,
            key: q.key.clone(),
        })?;
        let reply = match (&entry.reply, &entry.rule) {
            (Some(v), _) => v.clone(),
            (None, Some(rule)) => apply_rule(rule, q)?,
            (None, None) => unreachable!("validated in new"),
        };
        Ok(serde_json::to_string(&reply).expect("reply serializes"))
    }
}

fn context_as<T: for<'de> Deserialize<'de>>(q: &ReasonerQuery) -> Result<T, ReasonerError> {
    serde_json::from_value(q.context.clone()).map_err(|e| {
        ReasonerError::Configuration(format!("rule does not fit {} context: {e}", q.role))
    })
}

fn apply_rule(rule: &Rule, q: &ReasonerQuery) -> Result<Value, ReasonerError> {
    match rule {
        Rule::MaxArea | Rule::MinArea | Rule::NearestTo(_) => {
            let ctx: PartContext = context_as(q)?;
            let marks = &ctx.payload.marks;
            let pick = match rule {
                // Strict comparisons keep the lowest label on ties.
                Rule::MaxArea => marks.iter().reduce(|a, b| if b.area > a.area { b } else { a }),
                Rule::MinArea => marks.iter().reduce(|a, b| if b.area < a.area { b } else { a }),
                Rule::NearestTo([x, y]) => {
                    let d = |m: &crate::mask::PromptMark| (m.x - x).powi(2) + (m.y - y).powi(2);
                    marks.iter().reduce(|a, b| if d(b) < d(a) { b } else { a })
                }
                _ => unreachable!(),
            };
            Ok(match pick {
                Some(m) => json!({ "label": m.label }),
                None => json!({}),
            })
        }
        Rule::ExtremeCells { direction, count } => {
            let ctx: CellContext = context_as(q)?;
            Ok(json!({ "labels": extreme_cells(&ctx, *direction, *count) }))
        }
        Rule::CentroidCell => {
            let ctx: CellContext = context_as(q)?;
            Ok(json!({ "labels": ctx.centroid_cell.into_iter().collect::<Vec<_>>() }))
        }
        Rule::Echo(fields) => {
            let mut out = serde_json::Map::new();
            for f in fields {
                if let Some(v) = q.context.get(f) {
                    out.insert(f.clone(), v.clone());
                }
            }
            Ok(Value::Object(out))
        }
    }
}

fn extreme_cells(ctx: &CellContext, dir: Direction, count: usize) -> Vec<u32> {
    let (rows, cols) = ctx.grid;
    let (mid_r, mid_c) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let key = |c: &crate::refine::CellSummary| -> (i64, f64) {
        let (r, k) = (c.row as i64, c.col as i64);
        match dir {
            Direction::Right => (-k, (c.row as f64 - mid_r).abs()),
            Direction::Left => (k, (c.row as f64 - mid_r).abs()),
            Direction::Down => (-r, (c.col as f64 - mid_c).abs()),
            Direction::Up => (r, (c.col as f64 - mid_c).abs()),
        }
    };
    let mut cells: Vec<_> = ctx.cells.iter().collect();
    cells.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(a.label.cmp(&b.label))
    });
    let mut picked: Vec<&crate::refine::CellSummary> = Vec::new();
    for c in cells {
        if picked.len() == count {
            break;
        }
        let adjacent = picked.iter().any(|p| {
            (p.row as i64 - c.row as i64).abs() <= 1 && (p.col as i64 - c.col as i64).abs() <= 1
        });
        if !adjacent {
            picked.push(c);
        }
    }
    picked.iter().map(|c| c.label).collect()
}

/// Settings for [`HttpBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_s: f64,
}

impl HttpConfig {
    /// Reads `DESKMANIP_LLM_ENDPOINT`, `DESKMANIP_LLM_MODEL`,
    /// `DESKMANIP_LLM_TOKEN_ENV` (default `DESKMANIP_LLM_TOKEN`) and
    /// `DESKMANIP_LLM_TIMEOUT_S` (default 60).
    pub fn from_env() -> Result<Self, ReasonerError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let endpoint = var("DESKMANIP_LLM_ENDPOINT")
            .ok_or_else(|| ReasonerError::Configuration("DESKMANIP_LLM_ENDPOINT is not set".into()))?;
        let model = var("DESKMANIP_LLM_MODEL")
            .ok_or_else(|| ReasonerError::Configuration("DESKMANIP_LLM_MODEL is not set".into()))?;
        let timeout_s = match var("DESKMANIP_LLM_TIMEOUT_S") {
            Some(t) => t
                .parse()
                .map_err(|_| ReasonerError::Configuration(format!("bad timeout {t:?}")))?,
            None => 60.0,
        };
        Ok(Self {
            endpoint,
            model,
            token_env: var("DESKMANIP_LLM_TOKEN_ENV").unwrap_or_else(|| "DESKMANIP_LLM_TOKEN".into()),
            timeout_s,
        })
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    token: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, ReasonerError> {
        let token = std::env::var(&cfg.token_env).map_err(|_| {
            ReasonerError::Configuration(format!("token variable {} is not set", cfg.token_env))
        })?;
        if !(cfg.timeout_s > 0.0) {
            return Err(ReasonerError::Configuration("timeout must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .build()
            .into();
        Ok(Self { cfg, token, agent })
    }

    fn request_body(&self, q: &ReasonerQuery) -> Value {
        let system = format!(
            "You are the {} module of a tabletop manipulation planner. \
             Answer with exactly one fenced JSON code block matching: {}",
            q.role,
            q.role.reply_schema()
        );
        let user = json!({ "key": q.key, "context": q.context }).to_string();
        json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [
                { "role": "system", "content": system },
                { "role": "user", "content": user },
            ],
        })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, q: &ReasonerQuery) -> Result<String, ReasonerError> {
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(self.request_body(q))
            .map_err(|e| ReasonerError::BackendUnavailable(e.to_string()))?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ReasonerError::BackendUnavailable(e.to_string()))?;
        let content = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ReasonerError::SchemaViolation {
                role: q.role,
                reason: "response has no choices[0].message.content".into(),
            })?;
        extract_fenced_json(content).map_err(|reason| ReasonerError::SchemaViolation {
            role: q.role,
            reason,
        })
    }
}

/// Body of the single fenced code block in `text`.
pub fn extract_fenced_json(text: &str) -> Result<String, String> {
    let parts: Vec<&str> = text.split("```").collect();
    // Fences alternate: outside, inside, outside, ...
    if parts.len() != 3 {
        return Err(format!(
            "expected exactly one fenced block, found {} fence markers",
            parts.len() - 1
        ));
    }
    let inner = parts[1];
    let inner = inner.strip_prefix("json").unwrap_or(inner).trim();
    match serde_json::from_str::<Value>(inner) {
        Ok(Value::Object(_)) => Ok(inner.to_string()),
        Ok(_) => Err("fenced block is not a JSON object".into()),
        Err(e) => Err(format!("fenced block is not JSON: {e}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintMode {
    /// Part-level constraint from the grounded mask.
    M1,
    /// Region-level constraint from the semantic grid.
    M2,
    /// Region-level constraint from boundary heights.
    M3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperAction {
    #[default]
    None,
    Open,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostThreshold {
    pub position: f64,
    pub orientation: f64,
}

impl PostThreshold {
    /// Composite threshold compared with `d_p + d_r`; the orientation part
    /// only applies when the constraint constrains orientation.
    pub fn effective(&self, with_orientation: bool) -> f64 {
        if with_orientation {
            self.position + self.orientation
        } else {
            self.position
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub position: f64,
    pub orientation: f64,
    pub collision: f64,
}

/// Defaults used when a reply omits thresholds or weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionProfile {
    pub pre_threshold: f64,
    pub post_threshold: PostThreshold,
    pub cost_weights: CostWeights,
}

impl Default for ConditionProfile {
    fn default() -> Self {
        Self {
            pre_threshold: 0.10,
            post_threshold: PostThreshold {
                position: 0.01,
                orientation: 0.05,
            },
            cost_weights: CostWeights {
                position: 1.0,
                orientation: 0.5,
                collision: 0.3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: u32,
    pub instruction: String,
    pub constraint_mode: ConstraintMode,
    pub target_label_query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_threshold: Option<PostThreshold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_weights: Option<CostWeights>,
    #[serde(default)]
    pub gripper_action: GripperAction,
    /// World-frame offset added to the constraint position, meters.
    #[serde(default)]
    pub target_offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub instruction: String,
    pub subtasks: Vec<Subtask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    pub pre_threshold: f64,
    pub cost_weights: CostWeights,
    pub post_threshold: PostThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSpec {
    pub gripper_action: GripperAction,
    pub target_offset: [f64; 3],
}

/// Context of a part-label query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartContext {
    pub query: String,
    pub payload: PromptPayload,
}

fn violation(role: Role, reason: impl Into<String>) -> ReasonerError {
    ReasonerError::SchemaViolation {
        role,
        reason: reason.into(),
    }
}

fn parse_reply<T: for<'de> Deserialize<'de>>(role: Role, text: &str) -> Result<T, ReasonerError> {
    if text.trim().is_empty() {
        return Err(ReasonerError::EmptyReply);
    }
    serde_json::from_str(text).map_err(|e| violation(role, e.to_string()))
}

fn check_positive(role: Role, what: &str, v: f64) -> Result<(), ReasonerError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(violation(role, format!("{what} must be positive, got {v}")))
    }
}

fn check_weights(role: Role, w: &CostWeights) -> Result<(), ReasonerError> {
    for (name, v) in [
        ("position", w.position),
        ("orientation", w.orientation),
        ("collision", w.collision),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(violation(role, format!("weight {name} must be >= 0, got {v}")));
        }
    }
    Ok(())
}

fn validate_subtask(role: Role, s: &Subtask) -> Result<(), ReasonerError> {
    if s.instruction.trim().is_empty() {
        return Err(violation(role, format!("subtask {} has no instruction", s.id)));
    }
    if let Some(t) = s.pre_threshold {
        check_positive(role, "pre_threshold", t)?;
    }
    if let Some(p) = s.post_threshold {
        check_positive(role, "post_threshold.position", p.position)?;
        check_positive(role, "post_threshold.orientation", p.orientation)?;
    }
    if let Some(w) = &s.cost_weights {
        check_weights(role, w)?;
    }
    if s.target_offset.iter().any(|v| !v.is_finite()) {
        return Err(violation(role, "target_offset must be finite"));
    }
    Ok(())
}

/// A backend wrapped with schema validation, retry and auditing.
pub struct Reasoner {
    backend: Box<dyn Backend>,
    audit: Option<Mutex<File>>,
    pub profile: ConditionProfile,
}

impl Reasoner {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self {
            backend,
            audit: None,
            profile: ConditionProfile::default(),
        }
    }

    pub fn with_profile(mut self, profile: ConditionProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn with_audit_log(mut self, path: &Path) -> Result<Self, ReasonerError> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ReasonerError::Audit(format!("{}: {e}", path.display())))?;
        self.audit = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    fn log(&self, q: &ReasonerQuery, attempt: u32, reply: Option<&str>, error: Option<&ReasonerError>) {
        let Some(audit) = &self.audit else { return };
        let mut line = json!({
            "role": q.role,
            "key": q.key,
            "digest": q.digest(),
            "backend": self.backend.name(),
            "attempt": attempt,
            "context": q.context,
        });
        if let Some(reply) = reply {
            line["reply"] = Value::String(reply.to_string());
        }
        if let Some(e) = error {
            line["error"] = Value::String(e.to_string());
        }
        if let Ok(mut f) = audit.lock() {
            // Audit failures must not change the control flow.
            let _ = writeln!(f, "{line}");
        }
    }

    /// Sends `q`, validates with `accept`, retries once on any failure.
    fn ask<T>(
        &self,
        q: &ReasonerQuery,
        accept: impl Fn(&str) -> Result<T, ReasonerError>,
    ) -> Result<T, ReasonerError> {
        let mut last = None;
        for attempt in 1..=2 {
            let result = match self.backend.complete(q) {
                Ok(text) => {
                    let v = accept(&text);
                    self.log(q, attempt, Some(&text), v.as_ref().err());
                    v
                }
                Err(e) => {
                    self.log(q, attempt, None, Some(&e));
                    Err(e)
                }
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("two attempts"))
    }

    pub fn plan(&self, instruction: &str, scene_summary: &Value) -> Result<TaskPlan, ReasonerError> {
        if instruction.trim().is_empty() {
            return Err(ReasonerError::EmptyInstruction);
        }
        let role = Role::TaskPlanner;
        let q = ReasonerQuery::new(
            role,
            instruction,
            json!({ "instruction": instruction, "scene": scene_summary }),
        );
        self.ask(&q, |text| {
            #[derive(Deserialize)]
            struct Reply {
                subtasks: Vec<Subtask>,
            }
            let reply: Reply = parse_reply(role, text)?;
            if reply.subtasks.is_empty() {
                return Err(violation(role, "plan has no subtasks"));
            }
            for (i, s) in reply.subtasks.iter().enumerate() {
                if s.id as usize != i + 1 {
                    return Err(violation(role, format!("subtask ids must be 1..n, found {} at {}", s.id, i)));
                }
                validate_subtask(role, s)?;
            }
            Ok(TaskPlan {
                instruction: instruction.to_string(),
                subtasks: reply.subtasks,
            })
        })
    }

    pub fn select_part_label(&self, payload: &PromptPayload, query: &str) -> Result<u32, ReasonerError> {
        let role = Role::ConstraintExtraction;
        if payload.marks.is_empty() {
            return Err(violation(role, "prompt payload has no labels"));
        }
        let ctx = PartContext {
            query: query.to_string(),
            payload: payload.clone(),
        };
        let q = ReasonerQuery::new(role, query, serde_json::to_value(&ctx).expect("serializes"));
        self.ask(&q, |text| {
            #[derive(Deserialize)]
            struct Reply {
                label: u32,
            }
            let r: Reply = parse_reply(role, text)?;
            if payload.contains(r.label) {
                Ok(r.label)
            } else {
                Err(ReasonerError::LabelNotInPayload(r.label))
            }
        })
    }

    pub fn select_cells(&self, ctx: &CellContext) -> Result<Vec<u32>, ReasonerError> {
        let role = Role::ConstraintRefinement;
        if ctx.cells.is_empty() {
            return Err(violation(role, "grid has no labelled cells"));
        }
        let q = ReasonerQuery::new(role, &ctx.instruction, serde_json::to_value(ctx).expect("serializes"));
        self.ask(&q, |text| {
            #[derive(Deserialize)]
            struct Reply {
                labels: Vec<u32>,
            }
            let r: Reply = parse_reply(role, text)?;
            if r.labels.is_empty() {
                return Err(ReasonerError::EmptyReply);
            }
            let mut out: Vec<u32> = Vec::with_capacity(r.labels.len());
            for l in r.labels {
                if !ctx.cells.iter().any(|c| c.label == l) {
                    return Err(ReasonerError::LabelNotInGrid(l));
                }
                if !out.contains(&l) {
                    out.push(l);
                }
            }
            Ok(out)
        })
    }

    pub fn execution_spec(&self, subtask: &Subtask) -> Result<ExecutionSpec, ReasonerError> {
        let role = Role::SubtaskExecution;
        let q = ReasonerQuery::new(role, &subtask.instruction, serde_json::to_value(subtask).expect("serializes"));
        self.ask(&q, |text| {
            #[derive(Deserialize)]
            struct Reply {
                #[serde(default)]
                gripper_action: GripperAction,
                #[serde(default)]
                target_offset: [f64; 3],
            }
            let r: Reply = parse_reply(role, text)?;
            if r.target_offset.iter().any(|v| !v.is_finite()) {
                return Err(violation(role, "target_offset must be finite"));
            }
            Ok(ExecutionSpec {
                gripper_action: r.gripper_action,
                target_offset: r.target_offset,
            })
        })
    }

    /// Pre-, cost and post-condition parameters for one subtask. Missing
    /// fields fall back to the profile. `with_orientation = false` zeroes
    /// the orientation weight.
    pub fn build_conditions(
        &self,
        subtask: &Subtask,
        with_orientation: bool,
    ) -> Result<Conditions, ReasonerError> {
        let ctx = serde_json::to_value(subtask).expect("serializes");
        let key = subtask.instruction.as_str();

        let role = Role::PreconditionsBuilding;
        let pre = self.ask(&ReasonerQuery::new(role, key, ctx.clone()), |text| {
            #[derive(Deserialize)]
            struct Reply {
                pre_threshold: Option<f64>,
            }
            let r: Reply = parse_reply(role, text)?;
            let t = r.pre_threshold.unwrap_or(self.profile.pre_threshold);
            check_positive(role, "pre_threshold", t)?;
            Ok(t)
        })?;

        let role = Role::CostFunctionBuilding;
        let mut weights = self.ask(&ReasonerQuery::new(role, key, ctx.clone()), |text| {
            #[derive(Deserialize)]
            struct Reply {
                cost_weights: Option<CostWeights>,
            }
            let r: Reply = parse_reply(role, text)?;
            let w = r.cost_weights.unwrap_or(self.profile.cost_weights);
            check_weights(role, &w)?;
            Ok(w)
        })?;
        if !with_orientation {
            weights.orientation = 0.0;
        }

        let role = Role::PostconditionsBuilding;
        let post = self.ask(&ReasonerQuery::new(role, key, ctx), |text| {
            #[derive(Deserialize)]
            struct Reply {
                post_threshold: Option<PostThreshold>,
            }
            let r: Reply = parse_reply(role, text)?;
            let p = r.post_threshold.unwrap_or(self.profile.post_threshold);
            check_positive(role, "post_threshold.position", p.position)?;
            check_positive(role, "post_threshold.orientation", p.orientation)?;
            Ok(p)
        })?;

        Ok(Conditions {
            pre_threshold: pre,
            cost_weights: weights,
            post_threshold: post,
        })
    }
}

impl CellSelector for Reasoner {
    fn select_refined_cells(&self, ctx: &CellContext) -> Result<Vec<u32>, ReasonerError> {
        self.select_cells(ctx)
    }
}

/// Scripted reasoner from a fixture path, with an optional audit log.
pub fn scripted_reasoner(fixture: &Path, audit: Option<&PathBuf>) -> Result<Reasoner, ReasonerError> {
    let r = Reasoner::new(Box::new(ScriptedBackend::from_file(fixture)?));
    match audit {
        Some(p) => r.with_audit_log(p),
        None => Ok(r),
    }
}
