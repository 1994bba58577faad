//! Deterministic backend that answers from simulator ground truth. Each
//! answer is a pure function of the query, the world state and the seed;
//! configurable noise and fault hooks degrade it on purpose.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::response::{ActionCommand, SegmentedObject, VlmResponse};
use super::{Mode, Oracle, QueryContext, ResponseKind, VlmBackend, VlmError, VlmQuery};
use crate::scene_graph::{Relation, RelationAssertion};
use crate::sim::SimScene;
use crate::task_memory::{ActionKind, SubtaskNode};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationNoise {
    /// Per-object chance of a dilation or erosion.
    pub morph_probability: f64,
    /// Largest morphology radius in pixels.
    pub max_radius: u32,
    /// Per-object chance of swapping pixel sets with another object.
    pub label_swap_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    /// Fine attempts per subtask that fail on purpose.
    pub fail_first_attempts: u32,
    /// Kinds the above applies to; empty means all.
    pub kinds: Vec<ActionKind>,
    /// Independent chance that any fine attempt fails.
    pub failure_probability: f64,
    /// Chance that an action response is not valid JSON for the schema.
    pub malformed_probability: f64,
    /// Return a plan whose dependencies form a cycle.
    pub cyclic_plan: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedConfig {
    pub seed: u64,
    pub segmentation: SegmentationNoise,
    /// Per-pair chance of asserting a wrong relation.
    pub relation_noise: f64,
    pub faults: FaultConfig,
    /// Effector hover above the object top when approaching.
    pub approach_clearance: f64,
    /// Height of the tip above the bore mouth when aligning.
    pub align_hover: f64,
    /// Height above the effector goal where coarse navigation hands over.
    pub staging_height: f64,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        ScriptedConfig {
            seed: 0,
            segmentation: SegmentationNoise::default(),
            relation_noise: 0.0,
            faults: FaultConfig::default(),
            approach_clearance: 0.005,
            align_hover: 0.010,
            staging_height: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    pub cfg: ScriptedConfig,
}

impl ScriptedBackend {
    pub fn new(cfg: ScriptedConfig) -> Self {
        ScriptedBackend { cfg }
    }

    fn rng(&self, query: &VlmQuery) -> ChaCha8Rng {
        let d = query.digest();
        let mut seed = [0u8; 32];
        for (i, b) in d.iter().enumerate() {
            seed[i] = b ^ self.cfg.seed.to_le_bytes()[i % 8];
        }
        ChaCha8Rng::from_seed(seed)
    }
}

impl VlmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, query: &VlmQuery, oracle: &Oracle<'_>) -> Result<String, VlmError> {
        let mut rng = self.rng(query);
        let resp = match (&query.context, query.kind) {
            (QueryContext::Segmentation { .. }, ResponseKind::Segmentation) => self.segment(oracle, &mut rng)?,
            (QueryContext::Relationships { pairs, .. }, ResponseKind::Relationships) => self.relate(oracle.scene, pairs, &mut rng),
            (QueryContext::Plan, ResponseKind::Plan) => VlmResponse::Plan { subtasks: self.plan(oracle.scene) },
            (QueryContext::Action { mode, subtask, attempt, .. }, ResponseKind::Action) => {
                if *mode == Mode::Fine && rng.random_bool(self.cfg.faults.malformed_probability.clamp(0.0, 1.0)) {
                    return Ok(r#"{"kind":"action","command":{"verb":"hover"}}"#.to_string());
                }
                let command = match mode {
                    Mode::Coarse => coarse_command(oracle.scene, subtask, &self.cfg),
                    Mode::Fine => {
                        let forced = *attempt < self.cfg.faults.fail_first_attempts
                            && (self.cfg.faults.kinds.is_empty() || self.cfg.faults.kinds.contains(&subtask.action_kind));
                        let random = rng.random_bool(self.cfg.faults.failure_probability.clamp(0.0, 1.0));
                        if forced || random {
                            faulty_command(oracle.scene, subtask, &self.cfg)
                        } else {
                            fine_command(oracle.scene, subtask, &self.cfg)
                        }
                    }
                };
                VlmResponse::Action { command, rationale: None }
            }
            _ => return Err(VlmError::Config(format!("query context does not match kind {}", query.kind))),
        };
        Ok(resp.to_json())
    }
}

impl ScriptedBackend {
    fn segment(&self, oracle: &Oracle<'_>, rng: &mut ChaCha8Rng) -> Result<VlmResponse, VlmError> {
        let gt = oracle.frame.ok_or_else(|| VlmError::Config("segmentation needs a ground-truth frame".into()))?;
        let scene = oracle.scene;
        let (w, h) = (gt.instance.width, gt.instance.height);
        let noise = &self.cfg.segmentation;

        let mut objects: Vec<(usize, Vec<(u32, u32)>)> = scene
            .primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| p.task_relevant)
            .map(|(i, _)| (i, gt.pixels_of(i)))
            .filter(|(_, px)| !px.is_empty())
            .collect();

        for (_, pixels) in objects.iter_mut() {
            if noise.max_radius > 0 && rng.random_bool(noise.morph_probability.clamp(0.0, 1.0)) {
                let r = rng.random_range(1..=noise.max_radius) as i64;
                let dilate = rng.random_bool(0.5);
                *pixels = morph(pixels, r, dilate, w, h);
            }
        }
        let n = objects.len();
        for i in 0..n {
            if n > 1 && rng.random_bool(noise.label_swap_probability.clamp(0.0, 1.0)) {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                let (a, b) = (objects[i].1.clone(), objects[j].1.clone());
                objects[i].1 = b;
                objects[j].1 = a;
            }
        }

        let objects = objects
            .into_iter()
            .filter(|(_, px)| !px.is_empty())
            .map(|(i, pixels)| {
                let p = &scene.primitives[i];
                let own = i as u32 + 1;
                let sub_labels = pixels
                    .iter()
                    .map(|&(u, v)| if *gt.instance.get(u, v) == own { *gt.sub_label.get(u, v) } else { p.body_label })
                    .collect();
                SegmentedObject {
                    id: p.id.clone(),
                    category: p.category.clone(),
                    pixels: pixels.iter().map(|&(u, v)| [u, v]).collect(),
                    sub_labels,
                    attributes: [("graspable".to_string(), p.graspable.to_string())].into_iter().collect(),
                }
            })
            .collect();
        Ok(VlmResponse::Segmentation { objects })
    }

    fn relate(&self, scene: &SimScene, pairs: &[(String, String)], rng: &mut ChaCha8Rng) -> VlmResponse {
        let base = [Relation::Containing, Relation::Contact, Relation::Nearby, Relation::Separate];
        let mut relations = Vec::new();
        for (a, b) in pairs {
            let Some(truth) = scene.relation_truth(a, b) else {
                continue;
            };
            let rel = if rng.random_bool(self.cfg.relation_noise.clamp(0.0, 1.0)) {
                let wrong: Vec<Relation> = base.iter().copied().filter(|r| *r != truth.band()).collect();
                *wrong.choose(rng).expect("three alternatives")
            } else {
                truth
            };
            relations.push(RelationAssertion { src: a.clone(), dst: b.clone(), relation: rel.to_string(), constraints: Default::default() });
        }
        VlmResponse::Relationships { relations }
    }

    fn plan(&self, scene: &SimScene) -> Vec<SubtaskNode> {
        let mut plan = scene.task.plan.clone().unwrap_or_else(|| derive_plan(scene));
        if self.cfg.faults.cyclic_plan && plan.len() > 1 {
            let last = plan.last().expect("non-empty").id.clone();
            plan[0].depends_on.push(last);
        }
        plan
    }
}

/// Pixel-set dilation or erosion with a square structuring element.
fn morph(pixels: &[(u32, u32)], r: i64, dilate: bool, w: u32, h: u32) -> Vec<(u32, u32)> {
    let set: BTreeSet<(u32, u32)> = pixels.iter().copied().collect();
    let neighbours = |u: u32, v: u32| {
        (-r..=r).flat_map(move |dv| (-r..=r).map(move |du| (u as i64 + du, v as i64 + dv)))
    };
    let out: BTreeSet<(u32, u32)> = if dilate {
        set.iter()
            .flat_map(|&(u, v)| neighbours(u, v))
            .filter(|&(x, y)| x >= 0 && y >= 0 && x < w as i64 && y < h as i64)
            .map(|(x, y)| (x as u32, y as u32))
            .collect()
    } else {
        set.iter()
            .copied()
            .filter(|&(u, v)| {
                neighbours(u, v).all(|(x, y)| x >= 0 && y >= 0 && set.contains(&(x as u32, y as u32)))
            })
            .collect()
    };
    // Row-major order, matching the renderer's scan order.
    let mut v: Vec<(u32, u32)> = out.into_iter().collect();
    v.sort_by_key(|&(u, vv)| (vv, u));
    v
}

/// Default subtask chain for the declared insertions and placements.
pub fn derive_plan(scene: &SimScene) -> Vec<SubtaskNode> {
    let mut jobs: Vec<(String, ActionKind, String)> = Vec::new();
    for i in &scene.task.insertions {
        jobs.push((i.object.clone(), ActionKind::Insert, i.socket.clone()));
    }
    for p in &scene.task.placements {
        jobs.push((p.object.clone(), ActionKind::Place, p.region.clone()));
    }
    let mut plan: Vec<SubtaskNode> = Vec::new();
    let count = jobs.len();
    for (k, (object, kind, goal)) in jobs.into_iter().enumerate() {
        let mut steps = vec![
            (ActionKind::Approach, None, format!("Approach {object}")),
            (ActionKind::Grasp, None, format!("Grasp {object}")),
        ];
        match kind {
            ActionKind::Insert => {
                steps.push((ActionKind::Align, Some(goal.clone()), format!("Align {object} over {goal}")));
                steps.push((ActionKind::Insert, Some(goal.clone()), format!("Insert {object} into {goal}")));
            }
            _ => steps.push((ActionKind::Place, Some(goal.clone()), format!("Place {object} in {goal}"))),
        }
        if k + 1 < count {
            steps.push((ActionKind::Release, None, format!("Release {object}")));
        }
        for (action_kind, goal, description) in steps {
            let id = format!("{}_{}", action_kind, object);
            let depends_on = plan.last().map(|n| vec![n.id.clone()]).unwrap_or_default();
            plan.push(SubtaskNode { id, description, action_kind, target_object: object.clone(), depends_on, goal });
        }
    }
    plan
}

fn top_center(scene: &SimScene, id: &str) -> Option<Vector3<f64>> {
    let p = scene.primitive(id)?;
    let c = p.center();
    Some(Vector3::new(c.x, c.y, p.support(&Vector3::z())))
}

/// Where a perfect controller would put the effector to finish the subtask.
pub fn effector_goal(scene: &SimScene, subtask: &SubtaskNode, cfg: &ScriptedConfig) -> Option<Vector3<f64>> {
    let e = scene.effector();
    let part = scene.primitive(&subtask.target_object)?;
    match subtask.action_kind {
        ActionKind::Approach => Some(top_center(scene, &part.id)? + Vector3::z() * cfg.approach_clearance),
        ActionKind::Grasp | ActionKind::Release => Some(e),
        ActionKind::Align => {
            let s = scene.socket(subtask.goal.as_deref()?)?;
            let a = s.axis();
            let reach = part.support(&a) - part.center().dot(&a);
            let want = s.mouth() - a * (cfg.align_hover + reach);
            Some(e + (want - part.center()))
        }
        ActionKind::Insert => {
            let s = scene.socket(subtask.goal.as_deref()?)?;
            Some(e + (s.seat_for(part) - part.center()))
        }
        ActionKind::Place => {
            let r = scene.region(subtask.goal.as_deref()?)?;
            Some(e + (Vector3::from(r.center) - part.center()))
        }
    }
}

/// Global navigation: climb to the safe height, cross over, then descend to
/// the staging point above the goal.
pub fn coarse_command(scene: &SimScene, subtask: &SubtaskNode, cfg: &ScriptedConfig) -> ActionCommand {
    let e = scene.effector();
    let Some(goal) = effector_goal(scene, subtask, cfg) else {
        return ActionCommand::retreat(0.0);
    };
    let lateral = (goal - e).xy().norm();
    let safe = scene.safe_height.max(goal.z);
    if lateral > 0.01 && e.z < safe - 1e-6 {
        ActionCommand::retreat(safe - e.z)
    } else if lateral > 0.01 {
        ActionCommand::move_to([goal.x, goal.y, safe])
    } else {
        let z = (goal.z + cfg.staging_height).min(e.z.max(goal.z));
        ActionCommand::move_to([goal.x, goal.y, z])
    }
}

pub fn fine_command(scene: &SimScene, subtask: &SubtaskNode, cfg: &ScriptedConfig) -> ActionCommand {
    let target = subtask.target_object.as_str();
    match subtask.action_kind {
        ActionKind::Grasp => ActionCommand::grasp(target),
        ActionKind::Release => ActionCommand::release(Some(target)),
        ActionKind::Insert => {
            let (Some(goal), Some(s)) = (effector_goal(scene, subtask, cfg), subtask.goal.as_deref().and_then(|g| scene.socket(g))) else {
                return ActionCommand::release(Some(target));
            };
            let a = s.axis();
            let depth = (goal - scene.effector()).dot(&a).max(0.0);
            ActionCommand::insert_along(target, [a.x, a.y, a.z], depth)
        }
        _ => match effector_goal(scene, subtask, cfg) {
            Some(g) => ActionCommand::move_to([g.x, g.y, g.z]),
            None => ActionCommand::retreat(0.0),
        },
    }
}

/// A plausible but wrong command for fault injection. Each leaves the world
/// recoverable so the next attempt can still succeed.
pub fn faulty_command(scene: &SimScene, subtask: &SubtaskNode, cfg: &ScriptedConfig) -> ActionCommand {
    let target = subtask.target_object.as_str();
    let e = scene.effector();
    match subtask.action_kind {
        ActionKind::Approach => match effector_goal(scene, subtask, cfg) {
            Some(g) => ActionCommand::move_to([g.x, g.y, g.z + 0.03]),
            None => ActionCommand::retreat(0.0),
        },
        ActionKind::Grasp => ActionCommand::retreat(0.0),
        ActionKind::Release => ActionCommand::move_to([e.x, e.y, e.z]),
        ActionKind::Align => {
            let tol = subtask.goal.as_deref().and_then(|g| scene.socket(g)).map_or(0.001, |s| s.tolerance);
            match effector_goal(scene, subtask, cfg) {
                Some(g) => ActionCommand::move_to([g.x + (3.0 * tol).max(0.003), g.y, g.z]),
                None => ActionCommand::retreat(0.0),
            }
        }
        ActionKind::Insert => {
            let s = subtask.goal.as_deref().and_then(|g| scene.socket(g));
            let (Some(s), Some(goal)) = (s, effector_goal(scene, subtask, cfg)) else {
                return ActionCommand::retreat(0.0);
            };
            let a = s.axis();
            let depth = ((goal - e).dot(&a) - 0.003).max(0.0);
            ActionCommand::insert_along(target, [a.x, a.y, a.z], depth)
        }
        ActionKind::Place => {
            let r = subtask.goal.as_deref().and_then(|g| scene.region(g));
            match (effector_goal(scene, subtask, cfg), r) {
                (Some(g), Some(r)) => ActionCommand::move_to([g.x, g.y, g.z + r.half_extents[2] + 0.02]),
                _ => ActionCommand::retreat(0.0),
            }
        }
    }
}
