//! Task memory: subtask topology path (TTP), subtask status (SS) and motion
//! sequence history (MSH).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RETRY_CAP: u32 = 5;
pub const SIMILAR_LIMIT: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskMemoryError {
    #[error("plan is empty")]
    EmptyPlan,
    #[error("duplicate subtask id {0:?}")]
    DuplicateId(String),
    #[error("subtask {subtask:?} depends on unknown {dependency:?}")]
    UnknownDependency { subtask: String, dependency: String },
    #[error("dependency cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("no subtask with id {0:?}")]
    MissingSubtask(String),
    #[error("subtask {0:?} is not active")]
    NotActive(String),
    #[error("timestamp {got} precedes last record {last}")]
    TimestampRegression { got: u64, last: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Approach,
    Grasp,
    Align,
    Insert,
    Place,
    Release,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Approach => "approach",
            ActionKind::Grasp => "grasp",
            ActionKind::Align => "align",
            ActionKind::Insert => "insert",
            ActionKind::Place => "place",
            ActionKind::Release => "release",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskNode {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub action_kind: ActionKind,
    pub target_object: String,
    #[serde(default)]
    pub depends_on: Vec<String>,
    /// Socket or region id the subtask is judged against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Active,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskStatus {
    pub subtask_id: String,
    pub status: Status,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub subtask_id: String,
    pub action_kind: ActionKind,
    pub target_category: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
    pub outcome: Outcome,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDump {
    pub ttp: Vec<SubtaskNode>,
    pub ss: Vec<SubtaskStatus>,
    pub msh: Vec<MotionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMemory {
    ttp: Vec<SubtaskNode>,
    ss: Vec<SubtaskStatus>,
    msh: Vec<MotionRecord>,
    index: BTreeMap<String, usize>,
    retry_cap: u32,
}

/// Checks ids, dependency references and acyclicity; returns a topological order.
pub fn topological_order(plan: &[SubtaskNode]) -> Result<Vec<usize>, TaskMemoryError> {
    let mut index = BTreeMap::new();
    for (i, n) in plan.iter().enumerate() {
        if index.insert(n.id.as_str(), i).is_some() {
            return Err(TaskMemoryError::DuplicateId(n.id.clone()));
        }
    }
    let mut indegree = vec![0usize; plan.len()];
    let mut dependents = vec![Vec::new(); plan.len()];
    for (i, n) in plan.iter().enumerate() {
        for d in &n.depends_on {
            let &j = index
                .get(d.as_str())
                .ok_or_else(|| TaskMemoryError::UnknownDependency { subtask: n.id.clone(), dependency: d.clone() })?;
            indegree[i] += 1;
            dependents[j].push(i);
        }
    }
    let mut queue: VecDeque<usize> = (0..plan.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(plan.len());
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &k in &dependents[i] {
            indegree[k] -= 1;
            if indegree[k] == 0 {
                queue.push_back(k);
            }
        }
    }
    if order.len() < plan.len() {
        let stuck = (0..plan.len()).filter(|&i| indegree[i] > 0).map(|i| plan[i].id.clone()).collect();
        return Err(TaskMemoryError::Cycle(stuck));
    }
    Ok(order)
}

impl TaskMemory {
    pub fn init_from_plan(plan: Vec<SubtaskNode>, retry_cap: u32) -> Result<Self, TaskMemoryError> {
        if plan.is_empty() {
            return Err(TaskMemoryError::EmptyPlan);
        }
        topological_order(&plan)?;
        let index = plan.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let ss = plan.iter().map(|n| SubtaskStatus { subtask_id: n.id.clone(), status: Status::Pending, attempts: 0 }).collect();
        Ok(TaskMemory { ttp: plan, ss, msh: Vec::new(), index, retry_cap: retry_cap.max(1) })
    }

    pub fn retry_cap(&self) -> u32 {
        self.retry_cap
    }

    pub fn plan(&self) -> &[SubtaskNode] {
        &self.ttp
    }

    pub fn statuses(&self) -> &[SubtaskStatus] {
        &self.ss
    }

    pub fn history(&self) -> &[MotionRecord] {
        &self.msh
    }

    pub fn node(&self, id: &str) -> Option<&SubtaskNode> {
        self.index.get(id).map(|&i| &self.ttp[i])
    }

    pub fn status(&self, id: &str) -> Option<&SubtaskStatus> {
        self.index.get(id).map(|&i| &self.ss[i])
    }

    pub fn active(&self) -> Option<&SubtaskNode> {
        self.ss.iter().position(|s| s.status == Status::Active).map(|i| &self.ttp[i])
    }

    fn deps_done(&self, i: usize) -> bool {
        self.ttp[i].depends_on.iter().all(|d| self.ss[self.index[d]].status == Status::Succeeded)
    }

    /// Pending subtasks whose dependencies have all succeeded, in plan order.
    pub fn ready_set(&self) -> Vec<&str> {
        (0..self.ttp.len())
            .filter(|&i| self.ss[i].status == Status::Pending && self.deps_done(i))
            .map(|i| self.ttp[i].id.as_str())
            .collect()
    }

    /// Activates the first ready subtask unless one is already active.
    pub fn activate_next(&mut self) -> Option<&SubtaskNode> {
        if self.active().is_none() && !self.has_failed() {
            let next = (0..self.ttp.len()).find(|&i| self.ss[i].status == Status::Pending && self.deps_done(i))?;
            self.ss[next].status = Status::Active;
        }
        self.active()
    }

    pub fn is_complete(&self) -> bool {
        self.ss.iter().all(|s| s.status == Status::Succeeded)
    }

    pub fn has_failed(&self) -> bool {
        self.ss.iter().any(|s| s.status == Status::Failed)
    }

    fn push_record(&mut self, record: MotionRecord) -> Result<(), TaskMemoryError> {
        if let Some(last) = self.msh.last() {
            if record.timestamp < last.timestamp {
                return Err(TaskMemoryError::TimestampRegression { got: record.timestamp, last: last.timestamp });
            }
        }
        self.msh.push(record);
        Ok(())
    }

    /// Appends a motion that does not count as an attempt (coarse navigation).
    pub fn record_motion(&mut self, record: MotionRecord) -> Result<(), TaskMemoryError> {
        if !self.index.contains_key(&record.subtask_id) {
            return Err(TaskMemoryError::MissingSubtask(record.subtask_id));
        }
        self.push_record(record)
    }

    /// Records one attempt on the active subtask and advances the status map.
    pub fn update(&mut self, result: MotionRecord) -> Result<Status, TaskMemoryError> {
        let &i = self.index.get(&result.subtask_id).ok_or_else(|| TaskMemoryError::MissingSubtask(result.subtask_id.clone()))?;
        if self.ss[i].status != Status::Active {
            return Err(TaskMemoryError::NotActive(result.subtask_id));
        }
        let outcome = result.outcome;
        self.push_record(result)?;
        let s = &mut self.ss[i];
        s.attempts += 1;
        match outcome {
            Outcome::Success => s.status = Status::Succeeded,
            Outcome::Failure if s.attempts >= self.retry_cap => s.status = Status::Failed,
            Outcome::Failure => {}
        }
        let status = self.ss[i].status;
        if status == Status::Succeeded {
            self.activate_next();
        }
        Ok(status)
    }

    /// Replaces the plan, keeping history and the progress of subtasks whose
    /// ids already succeeded. Everything else restarts as Pending.
    pub fn replan(&mut self, plan: Vec<SubtaskNode>) -> Result<(), TaskMemoryError> {
        let mut next = TaskMemory::init_from_plan(plan, self.retry_cap)?;
        for s in &mut next.ss {
            if let Some(old) = self.status(&s.subtask_id).filter(|o| o.status == Status::Succeeded) {
                *s = old.clone();
            }
        }
        next.msh = std::mem::take(&mut self.msh);
        *self = next;
        self.activate_next();
        Ok(())
    }

    /// Records matching `(action_kind, target_category)`, newest first.
    pub fn query_similar(&self, action_kind: ActionKind, target_category: &str) -> Vec<&MotionRecord> {
        self.msh
            .iter()
            .rev()
            .filter(|r| r.action_kind == action_kind && r.target_category == target_category)
            .take(SIMILAR_LIMIT)
            .collect()
    }

    pub fn subtask_counts(&self) -> (u32, u32) {
        let attempts = self.ss.iter().map(|s| s.attempts).sum();
        let successes = self.ss.iter().filter(|s| s.status == Status::Succeeded).count() as u32;
        (successes, attempts)
    }

    pub fn dump(&self) -> MemoryDump {
        MemoryDump { ttp: self.ttp.clone(), ss: self.ss.clone(), msh: self.msh.clone() }
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.index.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, deps: &[&str]) -> SubtaskNode {
        SubtaskNode {
            id: id.into(),
            description: String::new(),
            action_kind: ActionKind::Grasp,
            target_object: "peg".into(),
            depends_on: deps.iter().map(|d| d.to_string()).collect(),
            goal: None,
        }
    }

    fn rec(id: &str, outcome: Outcome, t: u64) -> MotionRecord {
        MotionRecord {
            subtask_id: id.into(),
            action_kind: ActionKind::Grasp,
            target_category: "peg".into(),
            parameters: BTreeMap::new(),
            outcome,
            timestamp: t,
        }
    }

    #[test]
    fn linear_chain_starts_pending() {
        let m = TaskMemory::init_from_plan(vec![node("a", &[]), node("b", &["a"]), node("c", &["b"])], 5).unwrap();
        assert!(m.statuses().iter().all(|s| s.status == Status::Pending));
        assert!(m.history().is_empty());
    }

    #[test]
    fn invalid_plans() {
        let cyc = TaskMemory::init_from_plan(vec![node("a", &["b"]), node("b", &["a"])], 5);
        assert!(matches!(cyc, Err(TaskMemoryError::Cycle(_))));
        assert!(matches!(TaskMemory::init_from_plan(vec![], 5), Err(TaskMemoryError::EmptyPlan)));
        let dup = TaskMemory::init_from_plan(vec![node("a", &[]), node("a", &[])], 5);
        assert!(matches!(dup, Err(TaskMemoryError::DuplicateId(_))));
        let dangling = TaskMemory::init_from_plan(vec![node("a", &["z"])], 5);
        assert!(matches!(dangling, Err(TaskMemoryError::UnknownDependency { .. })));
    }

    #[test]
    fn diamond_ready_set() {
        let plan = vec![node("a", &[]), node("b", &["a"]), node("c", &["a"]), node("d", &["b", "c"])];
        let mut m = TaskMemory::init_from_plan(plan, 5).unwrap();
        assert_eq!(m.activate_next().unwrap().id, "a");
        m.update(rec("a", Outcome::Success, 0)).unwrap();
        assert_eq!(m.active().unwrap().id, "b");
        let mut ready = m.ready_set();
        ready.push("b");
        ready.sort();
        assert_eq!(ready, vec!["b", "c"]);
    }

    #[test]
    fn retry_until_cap() {
        let mut m = TaskMemory::init_from_plan(vec![node("a", &[]), node("b", &["a"])], 5).unwrap();
        m.activate_next();
        for t in 0..4 {
            assert_eq!(m.update(rec("a", Outcome::Failure, t)).unwrap(), Status::Active);
        }
        assert_eq!(m.status("a").unwrap().attempts, 4);
        assert_eq!(m.update(rec("a", Outcome::Failure, 4)).unwrap(), Status::Failed);
        assert!(m.has_failed());
        assert!(m.active().is_none());
        assert_eq!(m.update(rec("zz", Outcome::Failure, 5)), Err(TaskMemoryError::MissingSubtask("zz".into())));
    }

    #[test]
    fn similar_records_newest_first_capped() {
        let mut m = TaskMemory::init_from_plan(vec![node("a", &[])], 20).unwrap();
        m.activate_next();
        assert!(m.query_similar(ActionKind::Grasp, "peg").is_empty());
        for t in 0..8 {
            m.update(rec("a", Outcome::Failure, t)).unwrap();
        }
        let mut other = rec("a", Outcome::Failure, 9);
        other.target_category = "bolt".into();
        m.record_motion(other).unwrap();
        let got: Vec<u64> = m.query_similar(ActionKind::Grasp, "peg").iter().map(|r| r.timestamp).collect();
        assert_eq!(got, vec![7, 6, 5, 4, 3]);
        assert!(m.record_motion(rec("a", Outcome::Success, 1)).is_err());
    }

    #[test]
    fn replan_keeps_succeeded_progress() {
        let mut m = TaskMemory::init_from_plan(vec![node("a", &[]), node("b", &["a"])], 1).unwrap();
        m.activate_next();
        m.update(rec("a", Outcome::Success, 0)).unwrap();
        m.update(rec("b", Outcome::Failure, 1)).unwrap();
        assert!(m.has_failed());
        m.replan(vec![node("a", &[]), node("b2", &["a"])]).unwrap();
        assert_eq!(m.status("a").unwrap().status, Status::Succeeded);
        assert_eq!(m.active().unwrap().id, "b2");
        assert_eq!(m.history().len(), 2);
        assert!(m.replan(vec![node("x", &["x"])]).is_err());
    }
}
