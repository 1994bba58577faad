//! Quasi-static action execution and subtask success predicates.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::scene::{Attachment, SimScene};
use super::SimError;
use crate::geometry::RigidTransform;
use crate::task_memory::{ActionKind, SubtaskNode};
use crate::vlm::response::{ActionCommand, Verb};

/// Path discretization for collision checks.
pub const MOTION_STEP: f64 = 0.001;
/// Grasp reach from the effector point to the object surface.
pub const GRASP_RANGE: f64 = 0.010;
/// Penetration below this depth counts as touching, not colliding.
pub const PENETRATION_EPS: f64 = 1e-7;
/// Approach succeeds when the effector is this close to the target surface.
pub const APPROACH_RANGE: f64 = 0.010;
/// Highest accepted hover of an aligned part's tip above the bore mouth.
pub const ALIGN_HOVER: f64 = 0.020;
const BISECTION_ROUNDS: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<[f64; 3]>,
    pub effector: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_center: Option<[f64; 3]>,
    pub message: String,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl SimScene {
    fn outcome(&self, success: bool, contact: Option<Vector3<f64>>, message: impl Into<String>) -> ActionOutcome {
        ActionOutcome {
            success,
            contact: contact.map(|c| arr(&c)),
            effector: arr(&self.effector()),
            attached: self.attached_id().map(str::to_string),
            attached_center: self.attached.as_ref().map(|a| arr(&self.primitives[a.index].center())),
            message: message.into(),
        }
    }

    /// First contact point with the effector displaced by `offset` from `start`.
    fn contact_at(&self, start: &Vector3<f64>, offset: &Vector3<f64>) -> Option<Vector3<f64>> {
        let e = start + offset;
        let held = self.attached.as_ref().map(|a| a.index);
        for i in 0..self.primitives.len() {
            if Some(i) != held && self.collision_sdf(i, &e) < -PENETRATION_EPS {
                return Some(e);
            }
        }
        let a = self.attached.as_ref()?;
        let pose = RigidTransform::from_translation(e.x, e.y, e.z).compose(&a.relative);
        let part = &self.primitives[a.index];
        let (lo, hi) = {
            let (lo, hi) = part.aabb();
            let shift = e - self.effector();
            (lo + shift, hi + shift)
        };
        let candidates: Vec<usize> = (0..self.primitives.len())
            .filter(|&i| i != a.index)
            .filter(|&i| {
                let (olo, ohi) = self.primitives[i].aabb();
                (0..3).all(|k| olo[k] <= hi[k] + PENETRATION_EPS && ohi[k] >= lo[k] - PENETRATION_EPS)
            })
            .collect();
        if candidates.is_empty() {
            return None;
        }
        for s in part.local_samples() {
            let w = pose.transform_point(s);
            for &i in &candidates {
                if self.collision_sdf(i, &w) < -PENETRATION_EPS {
                    return Some(w);
                }
            }
        }
        None
    }

    fn set_effector(&mut self, p: Vector3<f64>) {
        self.effector_pose.translation = p;
        if let Some(a) = &self.attached {
            self.primitives[a.index].pose = self.effector_pose.compose(&a.relative);
        }
    }

    /// Moves the effector (and any held part) along a straight line, stopping
    /// just short of the first contact. Returns the contact point, if any.
    fn sweep(&mut self, goal: Vector3<f64>) -> Option<Vector3<f64>> {
        let start = self.effector();
        let delta = goal - start;
        let n = ((delta.norm() / MOTION_STEP).ceil() as usize).max(1);
        for k in 1..=n {
            let f = k as f64 / n as f64;
            if let Some(mut contact) = self.contact_at(&start, &(delta * f)) {
                let (mut lo, mut hi) = ((k - 1) as f64 / n as f64, f);
                for _ in 0..BISECTION_ROUNDS {
                    let mid = 0.5 * (lo + hi);
                    match self.contact_at(&start, &(delta * mid)) {
                        Some(c) => {
                            hi = mid;
                            contact = c;
                        }
                        None => lo = mid,
                    }
                }
                self.set_effector(start + delta * lo);
                return Some(contact);
            }
        }
        self.set_effector(goal);
        None
    }

    /// Executes one command. Failures are reported in the outcome, never as errors.
    pub fn apply_action(&mut self, cmd: &ActionCommand) -> ActionOutcome {
        if let Err(e) = cmd.validate() {
            return self.outcome(false, None, e.to_string());
        }
        match cmd.verb {
            Verb::MoveTo => {
                let goal = Vector3::from(cmd.target_point().expect("validated"));
                match self.sweep(goal) {
                    Some(c) => self.outcome(false, Some(c), "collision en route"),
                    None => self.outcome(true, None, "reached"),
                }
            }
            Verb::Retreat => {
                let goal = self.effector() + Vector3::z() * cmd.number("distance").expect("validated");
                match self.sweep(goal) {
                    Some(c) => self.outcome(false, Some(c), "collision while retreating"),
                    None => self.outcome(true, None, "retreated"),
                }
            }
            Verb::Grasp => {
                if self.attached.is_some() {
                    return self.outcome(false, None, "gripper already holding a part");
                }
                let e = self.effector();
                let nearest = self
                    .primitives
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.graspable)
                    .map(|(i, p)| (i, p.sdf(&e).max(0.0)))
                    .filter(|(_, d)| *d <= GRASP_RANGE)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                match nearest {
                    Some((index, _)) => {
                        let relative = self.effector_pose.inverse().compose(&self.primitives[index].pose);
                        self.attached = Some(Attachment { index, relative });
                        self.outcome(true, None, "grasped")
                    }
                    None => self.outcome(false, None, "nothing graspable in range"),
                }
            }
            Verb::Release => match self.attached.take() {
                Some(_) => self.outcome(true, None, "released"),
                None => self.outcome(false, None, "gripper empty"),
            },
            Verb::InsertAlong => {
                let target = cmd.target_object().expect("validated");
                if self.attached_id() != Some(target) {
                    return self.outcome(false, None, format!("{target} is not held"));
                }
                let axis = Vector3::from(cmd.vector("axis").expect("validated")).normalize();
                let depth = cmd.number("depth").expect("validated");
                let goal = self.effector() + axis * depth;
                match self.sweep(goal) {
                    Some(c) => self.outcome(false, Some(c), "contact before full depth"),
                    None => self.outcome(true, None, "inserted to depth"),
                }
            }
        }
    }

    /// Whether the world state satisfies the subtask's goal predicate.
    pub fn check_subtask_success(&self, subtask: &SubtaskNode) -> Result<bool, SimError> {
        let target = self.primitive(&subtask.target_object).ok_or_else(|| SimError::UnknownObject(subtask.target_object.clone()))?;
        let goal = || subtask.goal.as_deref().ok_or_else(|| SimError::MissingGoal(subtask.id.clone()));
        let socket = |id: &str| self.socket(id).ok_or_else(|| SimError::MissingGoal(format!("{}: unknown socket {id:?}", subtask.id)));
        Ok(match subtask.action_kind {
            ActionKind::Approach => target.sdf(&self.effector()).max(0.0) <= APPROACH_RANGE,
            ActionKind::Grasp => self.attached_id() == Some(target.id.as_str()),
            ActionKind::Release => self.attached_id() != Some(target.id.as_str()),
            ActionKind::Align => {
                let s = socket(goal()?)?;
                let a = s.axis();
                let rel = target.center() - s.mouth();
                let lateral = (rel - a * rel.dot(&a)).norm();
                let tip = target.support(&a) - s.mouth().dot(&a);
                lateral <= s.tolerance && (-ALIGN_HOVER..=0.0).contains(&tip)
            }
            ActionKind::Insert => {
                let s = socket(goal()?)?;
                (target.center() - s.seat_for(target)).norm() <= s.tolerance
            }
            ActionKind::Place => {
                let id = goal()?;
                let r = self.region(id).ok_or_else(|| SimError::MissingGoal(format!("{}: unknown region {id:?}", subtask.id)))?;
                r.contains(&target.center())
            }
        })
    }
}
