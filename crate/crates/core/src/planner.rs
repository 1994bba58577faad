//! The progressive planning loop: perceive, update the scene memory, pick a
//! coarse or fine mode by distance to the target, act, and update task memory.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::envelope::{update_envelope_zoned, voxelize_components, EnvelopeError, EnvelopeRecord, GaussianEnvelope};
use crate::geometry::{backproject_pixel, centroid_to_space, Observation};
use crate::harness::{LocationPair, MetricInputs};
use crate::partition::{classify_zone, register_pixel, Zone, ZoneConfig};
use crate::scene_graph::{normalized_distance, EdgePolicy, GraphDump, InteractionState, RelationAssertion, SceneGraph, SceneGraphError};
use crate::sim::{render, ActionOutcome, GroundTruthFrame, SimError, SimScene};
use crate::task_memory::{ActionKind, MemoryDump, MotionRecord, Outcome, Status, SubtaskNode, TaskMemory, TaskMemoryError};
use crate::vlm::prompt::{build_coarse_prompt, build_fine_prompt, encode_frame, plan_prompt, relationship_prompt, response_instructions, segmentation_prompt};
use crate::vlm::response::SegmentedObject;
use crate::vlm::{request, ActionCommand, Mode, Oracle, PromptConfig, QueryContext, ResponseKind, VlmBackend, VlmError, VlmQuery, VlmResponse};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("planner config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] VlmError),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Graph(#[from] SceneGraphError),
    #[error(transparent)]
    Memory(#[from] TaskMemoryError),
    #[error("run already finished")]
    Finished,
}

/// Where the zone partition is centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneFocus {
    /// Follow the end effector every frame.
    #[default]
    Effector,
    /// Keep the configured origin.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerOptions {
    pub max_iterations: u32,
    /// Coarse/fine switching distance; defaults to the near-zone radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub retry_cap: u32,
    /// When false, the first failed fine attempt fails the subtask.
    pub fine_retries: bool,
    pub replan_on_failure: bool,
    pub max_replans: u32,
    pub edge_policy: EdgePolicy,
    /// Pairs closer than this normalized distance are sent for relation queries.
    pub relation_radius: f64,
    pub zone_focus: ZoneFocus,
    pub attach_images: bool,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            max_iterations: 50,
            tau: None,
            retry_cap: crate::task_memory::DEFAULT_RETRY_CAP,
            fine_retries: true,
            replan_on_failure: false,
            max_replans: 1,
            edge_policy: EdgePolicy::Validated,
            relation_radius: 8.0,
            zone_focus: ZoneFocus::Effector,
            attach_images: false,
        }
    }
}

impl PlannerOptions {
    pub fn tau(&self, zone: &ZoneConfig) -> f64 {
        self.tau.unwrap_or(zone.r1)
    }

    pub fn effective_retry_cap(&self) -> u32 {
        if self.fine_retries {
            self.retry_cap.max(1)
        } else {
            1
        }
    }
}

/// Coarse iff the target is farther than `tau` from the effector.
pub fn mode_select(target: &Vector3<f64>, effector: &Vector3<f64>, tau: f64) -> Mode {
    if (target - effector).norm() > tau {
        Mode::Coarse
    } else {
        Mode::Fine
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Observe,
    Segment,
    Register,
    UpdateScene,
    Prompt,
    Act,
    UpdateMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: Stage,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub frame: u64,
    pub mode: Mode,
    pub subtask_id: String,
    /// Fine attempt number (1-based) for fine iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionCommand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ActionOutcome>,
    pub subtask_success: bool,
    /// Position the mode decision was made against, if the target was known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<[f64; 3]>,
    pub effector: [f64; 3],
    pub tau: f64,
    pub edge_count: usize,
    pub incorrect_edges: usize,
    pub registered_pixels: usize,
    pub wall_time_s: f64,
    pub stages: Vec<StageEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    SubtaskFailed,
    IterationBudget,
    PlanInvalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub scenario: String,
    pub backend: String,
    pub seed: u64,
    pub config: RunConfig,
    pub termination: Termination,
    pub completed: bool,
    pub iterations: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan_errors: Vec<String>,
    pub traces: Vec<IterationTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryDump>,
    pub graph: GraphDump,
    pub envelopes: Vec<EnvelopeRecord>,
    pub metric_inputs: MetricInputs,
    /// Wrong edges summed over iterations.
    pub incorrect_edges: usize,
    pub wall_time_s: f64,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn elapsed_us(t: Instant) -> u64 {
    t.elapsed().as_micros() as u64
}

struct Perception {
    stages: Vec<StageEvent>,
    registered_pixels: usize,
}

pub struct Planner<'a> {
    cfg: RunConfig,
    backend: &'a dyn VlmBackend,
    scene: SimScene,
    graph: SceneGraph,
    memory: Option<TaskMemory>,
    frame: u64,
    iteration: u32,
    traces: Vec<IterationTrace>,
    plan_attempts: u32,
    plan_successes: u32,
    plan_errors: Vec<String>,
    replans: u32,
    incorrect_edges: usize,
    last_obs: Option<Observation>,
}

impl<'a> Planner<'a> {
    pub fn new(scene: SimScene, backend: &'a dyn VlmBackend, cfg: RunConfig) -> Result<Self, PlannerError> {
        cfg.validate().map_err(PlannerError::Config)?;
        Ok(Planner {
            cfg,
            backend,
            scene,
            graph: SceneGraph::new(),
            memory: None,
            frame: 0,
            iteration: 0,
            traces: Vec::new(),
            plan_attempts: 0,
            plan_successes: 0,
            plan_errors: Vec::new(),
            replans: 0,
            incorrect_edges: 0,
            last_obs: None,
        })
    }

    pub fn scene(&self) -> &SimScene {
        &self.scene
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    pub fn memory(&self) -> Option<&TaskMemory> {
        self.memory.as_ref()
    }

    pub fn traces(&self) -> &[IterationTrace] {
        &self.traces
    }

    pub fn tau(&self) -> f64 {
        self.cfg.planner.tau(&self.cfg.zone)
    }

    fn zone_cfg(&self) -> ZoneConfig {
        match self.cfg.planner.zone_focus {
            ZoneFocus::Effector => self.cfg.zone.with_origin(self.scene.effector()),
            ZoneFocus::Fixed => self.cfg.zone.clone(),
        }
    }

    /// Observation through scene update for the current frame.
    fn perceive(&mut self) -> Result<Perception, PlannerError> {
        let mut stages = Vec::new();
        let t = Instant::now();
        let (mut obs, gt) = render(&self.scene);
        obs.timestamp = self.frame;
        stages.push(StageEvent { stage: Stage::Observe, micros: elapsed_us(t) });

        let t = Instant::now();
        let objects = self.segment(&obs, &gt)?;
        stages.push(StageEvent { stage: Stage::Segment, micros: elapsed_us(t) });

        let t = Instant::now();
        let zone_cfg = self.zone_cfg();
        let mut registered_pixels = 0;
        let mut observed = Vec::new();
        for obj in &objects {
            let reg = register_object(obj, &obs, &zone_cfg);
            registered_pixels += reg.pixels;
            if !reg.raw.is_empty() {
                observed.push((obj, reg));
            }
        }
        stages.push(StageEvent { stage: Stage::Register, micros: elapsed_us(t) });

        let t = Instant::now();
        self.update_scene(&observed, &obs, &zone_cfg, &gt)?;
        stages.push(StageEvent { stage: Stage::UpdateScene, micros: elapsed_us(t) });
        self.last_obs = Some(obs);
        Ok(Perception { stages, registered_pixels })
    }

    fn segment(&self, obs: &Observation, gt: &GroundTruthFrame) -> Result<Vec<SegmentedObject>, PlannerError> {
        let text = format!("{}\n{}", segmentation_prompt(self.frame), response_instructions(ResponseKind::Segmentation));
        let mut query = VlmQuery::new(ResponseKind::Segmentation, text, QueryContext::Segmentation { frame: self.frame });
        if self.cfg.planner.attach_images {
            query.images.push(encode_frame(obs));
        }
        match request(self.backend, &query, &Oracle { scene: &self.scene, frame: Some(gt) }) {
            Ok(VlmResponse::Segmentation { objects }) => Ok(objects),
            Ok(_) | Err(VlmError::Malformed(_)) => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn update_scene(&mut self, observed: &[(&SegmentedObject, Registered)], obs: &Observation, zone_cfg: &ZoneConfig, gt: &GroundTruthFrame) -> Result<(), PlannerError> {
        let env_cfg = self.cfg.envelope.clone();
        let mut seen = Vec::new();
        for (obj, reg) in observed {
            let Ok(hint) = centroid_to_space(&reg.pixels_with_depth, &obs.depth, &obs.intrinsics, &obs.cam_to_base) else {
                continue;
            };
            let prior = self.graph.envelope(&obj.id).cloned().unwrap_or_else(|| GaussianEnvelope::unit(hint, 0));
            let zone = classify_zone(&prior.mu, zone_cfg);
            let update = update_envelope_zoned(&prior, &reg.snapped, zone, &hint, &env_cfg)?;
            self.graph.upsert_vertex(&obj.id, &obj.category, update.envelope)?;
            if !obj.attributes.is_empty() {
                self.graph.set_features(&obj.id, obj.attributes.clone())?;
            }
            if zone == Zone::Near {
                self.graph.set_components(&obj.id, voxelize_components(&reg.labeled, env_cfg.voxel_size))?;
            }
            seen.push(obj.id.clone());
        }
        self.graph.age_unseen(seen.iter().map(String::as_str));

        let pairs = self.relation_pairs();
        if !pairs.is_empty() {
            let snapshot = self.graph.snapshot(self.frame);
            let text = format!("{}\n{}", relationship_prompt(&pairs, &snapshot), response_instructions(ResponseKind::Relationships));
            let query = VlmQuery::new(ResponseKind::Relationships, text, QueryContext::Relationships { frame: self.frame, pairs });
            match request(self.backend, &query, &Oracle { scene: &self.scene, frame: Some(gt) }) {
                Ok(VlmResponse::Relationships { relations }) => {
                    let relations: Vec<RelationAssertion> = relations
                        .into_iter()
                        .filter(|r| r.src != r.dst && self.graph.vertex(&r.src).is_some() && self.graph.vertex(&r.dst).is_some())
                        .filter(|r| r.relation.parse::<crate::scene_graph::Relation>().is_ok())
                        .collect();
                    self.graph.update_edges(&relations, self.cfg.planner.edge_policy)?;
                }
                Ok(_) | Err(VlmError::Malformed(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Vertex pairs within the relation radius, plus every pair of task-named objects.
    fn relation_pairs(&self) -> Vec<(String, String)> {
        let mut named = self.scene.task.named_objects();
        for i in &self.scene.task.insertions {
            if let Some(s) = self.scene.socket(&i.socket) {
                named.insert(s.host.clone());
            }
        }
        let ids: Vec<&str> = self.graph.vertices().map(|v| v.id.as_str()).collect();
        let mut out = Vec::new();
        for (k, a) in ids.iter().enumerate() {
            for b in &ids[k + 1..] {
                let (ea, eb) = (self.graph.envelope(a).expect("indexed"), self.graph.envelope(b).expect("indexed"));
                if normalized_distance(ea, eb) <= self.cfg.planner.relation_radius || (named.contains(*a) && named.contains(*b)) {
                    out.push((a.to_string(), b.to_string()));
                }
            }
        }
        out
    }

    /// Graph edges whose relation band disagrees with the simulator's truth.
    fn count_incorrect_edges(&self) -> usize {
        self.graph
            .edges()
            .filter(|e| self.scene.relation_truth(&e.src, &e.dst).is_none_or(|truth| truth.band() != e.rel_type.band()))
            .count()
    }

    fn request_plan(&mut self) -> Result<Option<Vec<SubtaskNode>>, PlannerError> {
        self.plan_attempts += 1;
        let snapshot = self.graph.snapshot(self.frame);
        let text = format!("{}\n{}", plan_prompt(&self.scene.task.description, &snapshot), response_instructions(ResponseKind::Plan));
        let query = VlmQuery::new(ResponseKind::Plan, text, QueryContext::Plan);
        let plan = match request(self.backend, &query, &Oracle { scene: &self.scene, frame: None }) {
            Ok(VlmResponse::Plan { subtasks }) => subtasks,
            Ok(_) => unreachable!("parser enforces the kind"),
            Err(VlmError::Malformed(m)) => {
                self.plan_errors.push(m);
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        if let Err(e) = crate::task_memory::topological_order(&plan) {
            self.plan_errors.push(e.to_string());
            return Ok(None);
        }
        if plan.is_empty() {
            self.plan_errors.push(TaskMemoryError::EmptyPlan.to_string());
            return Ok(None);
        }
        if let Some(n) = plan.iter().find(|n| self.scene.primitive(&n.target_object).is_none()) {
            self.plan_errors.push(format!("subtask {:?} targets unknown object {:?}", n.id, n.target_object));
            return Ok(None);
        }
        self.plan_successes += 1;
        Ok(Some(plan))
    }

    /// Perceives the first frame and requests the task plan.
    pub fn initialize(&mut self) -> Result<(), PlannerError> {
        if self.memory.is_some() {
            return Ok(());
        }
        self.perceive()?;
        self.incorrect_edges += self.count_incorrect_edges();
        self.frame += 1;
        match self.request_plan()? {
            Some(plan) => {
                let mut memory = TaskMemory::init_from_plan(plan, self.cfg.planner.effective_retry_cap())?;
                memory.activate_next();
                self.memory = Some(memory);
                Ok(())
            }
            None => Err(PlannerError::InvalidPlan(self.plan_errors.last().cloned().unwrap_or_default())),
        }
    }

    pub fn is_finished(&self) -> bool {
        match &self.memory {
            Some(m) => m.is_complete() || m.has_failed() || self.iteration >= self.cfg.planner.max_iterations,
            None => self.iteration >= self.cfg.planner.max_iterations,
        }
    }

    /// Position the mode decision is made against. Goal-directed subtasks use
    /// the declared goal, since the held part travels with the effector.
    fn mode_target(&self, subtask: &SubtaskNode) -> Option<Vector3<f64>> {
        let goal = subtask.goal.as_deref();
        match subtask.action_kind {
            ActionKind::Align | ActionKind::Insert => goal.and_then(|g| self.scene.socket(g)).map(|s| s.mouth()),
            ActionKind::Place => goal.and_then(|g| self.scene.region(g)).map(|r| Vector3::from(r.center)),
            _ => self.graph.envelope(&subtask.target_object).map(|e| e.mu),
        }
    }

    /// One planner iteration.
    pub fn step(&mut self) -> Result<IterationTrace, PlannerError> {
        if self.memory.is_none() {
            self.initialize()?;
        }
        if self.is_finished() {
            return Err(PlannerError::Finished);
        }
        let started = Instant::now();
        self.iteration += 1;
        let subtask = self.memory.as_mut().expect("initialized").activate_next().cloned().ok_or(PlannerError::Finished)?;

        let mut perception = self.perceive()?;
        let edge_count = self.graph.edge_count();
        let incorrect_edges = self.count_incorrect_edges();
        self.incorrect_edges += incorrect_edges;

        let t = Instant::now();
        let effector = self.scene.effector();
        let tau = self.tau();
        let target = self.mode_target(&subtask);
        let mode = target.map_or(Mode::Coarse, |t| mode_select(&t, &effector, tau));
        let memory = self.memory.as_ref().expect("initialized");
        let attempts = memory.status(&subtask.id).map_or(0, |s| s.attempts);
        let snapshot = self.graph.snapshot(self.frame);
        let prompt_cfg = PromptConfig {
            camera_mount: self.scene.camera_mount,
            voxel_size: self.cfg.envelope.voxel_size,
            attach_images: self.cfg.planner.attach_images,
        };
        let obs = self.last_obs.as_ref().expect("perceived");
        let bundle = match mode {
            Mode::Coarse => build_coarse_prompt(memory, &snapshot, &prompt_cfg)?,
            Mode::Fine => build_fine_prompt(memory, &snapshot, obs, &prompt_cfg)?,
        };
        let text = format!("{}\n{}", bundle.render(), response_instructions(ResponseKind::Action));
        let mut query = VlmQuery::new(
            ResponseKind::Action,
            text,
            QueryContext::Action { frame: self.frame, mode, subtask: subtask.clone(), attempt: attempts },
        );
        query.images = bundle.images.clone();
        perception.stages.push(StageEvent { stage: Stage::Prompt, micros: elapsed_us(t) });

        let t = Instant::now();
        let held_before = self.scene.attached_id().map(str::to_string);
        let (action, response_error, outcome) = match request(self.backend, &query, &Oracle { scene: &self.scene, frame: None }) {
            Ok(VlmResponse::Action { command, .. }) => {
                let outcome = self.scene.apply_action(&command);
                (Some(command), None, Some(outcome))
            }
            Ok(other) => (None, Some(format!("unexpected {} response", other.kind())), None),
            Err(VlmError::Malformed(m)) => (None, Some(m), None),
            Err(e) => return Err(e.into()),
        };
        self.track_held(held_before.as_deref(), &effector, &subtask)?;
        perception.stages.push(StageEvent { stage: Stage::Act, micros: elapsed_us(t) });

        let t = Instant::now();
        let success = self.scene.check_subtask_success(&subtask)?;
        let category = self.graph.vertex(&subtask.target_object).map_or("unknown", |v| v.category.as_str()).to_string();
        let mut parameters: BTreeMap<String, String> = action.as_ref().map(ActionCommand::summary).unwrap_or_default();
        parameters.insert("mode".into(), format!("{mode:?}").to_lowercase());
        if let Some(e) = &response_error {
            parameters.insert("error".into(), e.clone());
        }
        let record = MotionRecord {
            subtask_id: subtask.id.clone(),
            action_kind: subtask.action_kind,
            target_category: category,
            parameters,
            outcome: if success { Outcome::Success } else { Outcome::Failure },
            timestamp: self.frame,
        };
        let memory = self.memory.as_mut().expect("initialized");
        let attempt = match mode {
            Mode::Fine => {
                memory.update(record)?;
                Some(attempts + 1)
            }
            Mode::Coarse => {
                memory.record_motion(record)?;
                None
            }
        };
        if memory.status(&subtask.id).map(|s| s.status) == Some(Status::Failed) {
            self.try_replan()?;
        }
        perception.stages.push(StageEvent { stage: Stage::UpdateMemory, micros: elapsed_us(t) });

        let trace = IterationTrace {
            iteration: self.iteration,
            frame: self.frame,
            mode,
            subtask_id: subtask.id.clone(),
            attempt,
            prompt_hash: bundle.hash(),
            action,
            response_error,
            outcome,
            subtask_success: mode == Mode::Fine && success,
            target: target.as_ref().map(arr),
            effector: arr(&effector),
            tau,
            edge_count,
            incorrect_edges,
            registered_pixels: perception.registered_pixels,
            wall_time_s: started.elapsed().as_secs_f64(),
            stages: perception.stages,
        };
        self.frame += 1;
        self.traces.push(trace.clone());
        Ok(trace)
    }

    /// Carries a held part's envelope along with the effector and records
    /// interaction states.
    fn track_held(&mut self, held_before: Option<&str>, effector_before: &Vector3<f64>, subtask: &SubtaskNode) -> Result<(), PlannerError> {
        let held_after = self.scene.attached_id().map(str::to_string);
        if let (Some(before), Some(after)) = (held_before, held_after.as_deref()) {
            if before == after {
                if let Some(env) = self.graph.envelope(after).cloned() {
                    let shift = self.scene.effector() - effector_before;
                    let moved = GaussianEnvelope { mu: env.mu + shift, ..env };
                    self.graph.set_envelope(after, moved)?;
                }
            }
        }
        if let Some(id) = held_after.as_deref() {
            if self.graph.vertex(id).is_some() {
                let state = match subtask.action_kind {
                    ActionKind::Align | ActionKind::Insert | ActionKind::Place => InteractionState::InManipulation,
                    _ => InteractionState::Grasped,
                };
                self.graph.set_state(id, state)?;
            }
        }
        if let Some(id) = held_before.filter(|b| Some(*b) != held_after.as_deref()) {
            if self.graph.vertex(id).is_some() {
                self.graph.set_state(id, InteractionState::Placed)?;
            }
        }
        Ok(())
    }

    fn try_replan(&mut self) -> Result<(), PlannerError> {
        if !self.cfg.planner.replan_on_failure || self.replans >= self.cfg.planner.max_replans {
            return Ok(());
        }
        self.replans += 1;
        if let Some(plan) = self.request_plan()? {
            self.memory.as_mut().expect("initialized").replan(plan)?;
        }
        Ok(())
    }

    fn metric_inputs(&self) -> MetricInputs {
        let mut pairs = Vec::new();
        for p in self.scene.primitives.iter().filter(|p| p.task_relevant) {
            let (lo, hi) = p.aabb();
            let predicted = self.graph.vertex(&p.id).map(|v| (v.category.clone(), self.graph.envelope(&v.id).expect("indexed").mu));
            pairs.push(LocationPair {
                object_id: p.id.clone(),
                category: p.category.clone(),
                aabb_min: arr(&lo),
                aabb_max: arr(&hi),
                predicted_category: predicted.as_ref().map(|(c, _)| c.clone()),
                predicted_center: predicted.as_ref().map(|(_, m)| arr(m)),
            });
        }
        let fine: Vec<&IterationTrace> = self.traces.iter().filter(|t| t.mode == Mode::Fine).collect();
        let completed = self.memory.as_ref().is_some_and(TaskMemory::is_complete);
        MetricInputs {
            semantic_location_pairs: pairs,
            plan_attempts: self.plan_attempts as u64,
            plan_successes: self.plan_successes as u64,
            subtask_attempts: fine.len() as u64,
            subtask_successes: fine.iter().filter(|t| t.subtask_success).count() as u64,
            task_attempts: 1,
            task_successes: completed as u64,
        }
    }

    pub fn finish(self, scenario: &str, seed: u64, wall_time_s: f64) -> RunReport {
        let termination = match &self.memory {
            None => Termination::PlanInvalid,
            Some(m) if m.is_complete() => Termination::Completed,
            Some(m) if m.has_failed() => Termination::SubtaskFailed,
            Some(_) => Termination::IterationBudget,
        };
        let snapshot = self.graph.snapshot(self.frame);
        RunReport {
            version: REPORT_VERSION,
            scenario: scenario.to_string(),
            backend: self.backend.name().to_string(),
            seed,
            metric_inputs: self.metric_inputs(),
            config: self.cfg,
            termination,
            completed: termination == Termination::Completed,
            iterations: self.iteration,
            plan_errors: self.plan_errors,
            traces: self.traces,
            memory: self.memory.as_ref().map(TaskMemory::dump),
            graph: snapshot.dump(),
            envelopes: snapshot.envelope_records(),
            incorrect_edges: self.incorrect_edges,
            wall_time_s,
        }
    }
}

/// Runs the loop until completion, a failed subtask, or the iteration budget.
/// An invalid plan ends the run with a report rather than an error.
pub fn run(scene: SimScene, backend: &dyn VlmBackend, cfg: RunConfig, seed: u64) -> Result<RunReport, PlannerError> {
    let started = Instant::now();
    let name = scene.name.clone();
    let mut planner = Planner::new(scene, backend, cfg)?;
    match planner.initialize() {
        Ok(()) => {}
        Err(PlannerError::InvalidPlan(_)) => return Ok(planner.finish(&name, seed, started.elapsed().as_secs_f64())),
        Err(e) => return Err(e),
    }
    while !planner.is_finished() {
        planner.step()?;
    }
    Ok(planner.finish(&name, seed, started.elapsed().as_secs_f64()))
}

struct Registered {
    pixels: usize,
    pixels_with_depth: Vec<(u32, u32)>,
    /// Occupied element centers, one per distinct element.
    snapped: Vec<Vector3<f64>>,
    raw: Vec<Vector3<f64>>,
    labeled: Vec<(Vector3<f64>, u32)>,
}

/// Registers an object's pixels: ray traversal to the occupied element and
/// the raw backprojected point for voxelization.
fn register_object(obj: &SegmentedObject, obs: &Observation, zone_cfg: &ZoneConfig) -> Registered {
    let (w, h) = (obs.intrinsics.width, obs.intrinsics.height);
    let mut keys = BTreeSet::new();
    let mut out = Registered { pixels: 0, pixels_with_depth: Vec::new(), snapped: Vec::new(), raw: Vec::new(), labeled: Vec::new() };
    for (k, &[u, v]) in obj.pixels.iter().enumerate() {
        if u >= w || v >= h {
            continue;
        }
        out.pixels += 1;
        let reg = register_pixel(u, v, obs, zone_cfg, zone_cfg.max_range);
        let Some(cell) = reg.occupied else {
            continue;
        };
        let d = obs.depth_at(u, v).expect("occupied implies depth");
        let p = backproject_pixel(u as f64, v as f64, d, &obs.intrinsics, &obs.cam_to_base).expect("valid pixel and depth");
        if keys.insert(cell.key) {
            out.snapped.push(cell.center);
        }
        out.pixels_with_depth.push((u, v));
        out.raw.push(p);
        out.labeled.push((p, obj.sub_labels.get(k).copied().unwrap_or(0)));
    }
    out
}
