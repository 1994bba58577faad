//! Metrics, seeded batch execution and report aggregation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::planner::{run, PlannerError, RunReport, Termination};
use crate::sim::SimScene;
use crate::vlm::http::{HttpBackend, HttpConfig};
use crate::vlm::scripted::ScriptedBackend;
use crate::vlm::VlmBackend;

pub const BATCH_VERSION: u32 = 1;
/// Inflation of the ground-truth box when judging a predicted location.
pub const SLPC_MARGIN: f64 = 0.010;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("{what}: {successes} successes exceed {attempts} attempts")]
    Accounting { what: String, successes: u64, attempts: u64 },
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// A ground-truth object and what the scene memory believes about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationPair {
    pub object_id: String,
    pub category: String,
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_center: Option<[f64; 3]>,
}

impl LocationPair {
    /// Category matches and the predicted center lies in the inflated box.
    pub fn is_correct(&self) -> bool {
        let (Some(cat), Some(c)) = (&self.predicted_category, &self.predicted_center) else {
            return false;
        };
        cat == &self.category && (0..3).all(|a| c[a] >= self.aabb_min[a] - SLPC_MARGIN && c[a] <= self.aabb_max[a] + SLPC_MARGIN)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricInputs {
    pub semantic_location_pairs: Vec<LocationPair>,
    pub plan_attempts: u64,
    pub plan_successes: u64,
    pub subtask_attempts: u64,
    pub subtask_successes: u64,
    pub task_attempts: u64,
    pub task_successes: u64,
}

/// Percentages; `None` when the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slpc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpsr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tsr: Option<f64>,
}

pub fn compute_slpc(pairs: &[LocationPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let correct = pairs.iter().filter(|p| p.is_correct()).count();
    Some(correct as f64 / pairs.len() as f64 * 100.0)
}

pub fn compute_rate(successes: u64, attempts: u64) -> Result<Option<f64>, HarnessError> {
    if successes > attempts {
        return Err(HarnessError::Accounting { what: "rate".into(), successes, attempts });
    }
    Ok((attempts > 0).then(|| successes as f64 / attempts as f64 * 100.0))
}

/// Summable counters behind the four metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub location_correct: u64,
    pub location_total: u64,
    pub plan_attempts: u64,
    pub plan_successes: u64,
    pub subtask_attempts: u64,
    pub subtask_successes: u64,
    pub task_attempts: u64,
    pub task_successes: u64,
}

impl Counters {
    pub fn from_inputs(m: &MetricInputs) -> Self {
        Counters {
            location_correct: m.semantic_location_pairs.iter().filter(|p| p.is_correct()).count() as u64,
            location_total: m.semantic_location_pairs.len() as u64,
            plan_attempts: m.plan_attempts,
            plan_successes: m.plan_successes,
            subtask_attempts: m.subtask_attempts,
            subtask_successes: m.subtask_successes,
            task_attempts: m.task_attempts,
            task_successes: m.task_successes,
        }
    }

    pub fn add(&mut self, o: &Counters) {
        self.location_correct += o.location_correct;
        self.location_total += o.location_total;
        self.plan_attempts += o.plan_attempts;
        self.plan_successes += o.plan_successes;
        self.subtask_attempts += o.subtask_attempts;
        self.subtask_successes += o.subtask_successes;
        self.task_attempts += o.task_attempts;
        self.task_successes += o.task_successes;
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        let pairs = [
            ("location", self.location_correct, self.location_total),
            ("plan", self.plan_successes, self.plan_attempts),
            ("subtask", self.subtask_successes, self.subtask_attempts),
            ("task", self.task_successes, self.task_attempts),
        ];
        for (what, successes, attempts) in pairs {
            if successes > attempts {
                return Err(HarnessError::Accounting { what: what.into(), successes, attempts });
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<MetricsReport, HarnessError> {
        self.check()?;
        Ok(MetricsReport {
            slpc: compute_rate(self.location_correct, self.location_total)?,
            tpsr: compute_rate(self.plan_successes, self.plan_attempts)?,
            msr: compute_rate(self.subtask_successes, self.subtask_attempts)?,
            tsr: compute_rate(self.task_successes, self.task_attempts)?,
        })
    }
}

pub fn score(inputs: &MetricInputs) -> Result<MetricsReport, HarnessError> {
    Counters::from_inputs(inputs).metrics()
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Scripted,
    Http(HttpConfig),
}

impl BackendSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BackendSpec::Scripted => "scripted",
            BackendSpec::Http(_) => "http",
        }
    }

    pub fn build(&self, cfg: &RunConfig, seed: u64) -> Box<dyn VlmBackend> {
        match self {
            BackendSpec::Scripted => {
                let mut scripted = cfg.scripted.clone();
                scripted.seed = seed;
                Box::new(ScriptedBackend::new(scripted))
            }
            BackendSpec::Http(http) => Box::new(HttpBackend::new(http.clone())),
        }
    }
}

/// One run with the scripted noise seed set to `seed`.
pub fn run_scenario(scene: SimScene, cfg: &RunConfig, backend: &BackendSpec, seed: u64) -> Result<RunReport, PlannerError> {
    let mut cfg = cfg.clone();
    cfg.scripted.seed = seed;
    let b = backend.build(&cfg, seed);
    run(scene, b.as_ref(), cfg, seed)
}

/// SplitMix64 finalizer over `master + counter`.
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    let mut z = master.wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sorted `*.json` files in a directory.
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub rep: u32,
    pub seed: u64,
    pub termination: Termination,
    pub iterations: u32,
    pub incorrect_edges: usize,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rep: Option<u32>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub version: u32,
    pub backend: String,
    pub master_seed: u64,
    pub reps: u32,
    pub config: RunConfig,
    pub scenarios: Vec<String>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<BatchFailure>,
    pub totals: Counters,
    pub metrics: MetricsReport,
}

impl BatchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("batch report serializes")
    }
}

/// Runs every scenario `reps` times in parallel. Seeds come from the master
/// seed and the job's position, so any single run can be reproduced alone.
pub fn run_batch(paths: &[PathBuf], cfg: &RunConfig, backend: &BackendSpec, reps: u32, master_seed: u64) -> Result<(BatchReport, Vec<RunReport>), HarnessError> {
    let mut failures = Vec::new();
    let mut scenes = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        match SimScene::load(path) {
            Ok(scene) => scenes.push((i, path, scene)),
            Err(e) => failures.push(BatchFailure { path: path.display().to_string(), rep: None, error: e.to_string() }),
        }
    }
    let jobs: Vec<(usize, &PathBuf, &SimScene, u32)> =
        scenes.iter().flat_map(|(i, path, scene)| (0..reps).map(move |r| (*i, *path, scene, r))).collect();
    let results: Vec<(String, u32, u64, Result<RunReport, PlannerError>)> = jobs
        .par_iter()
        .map(|&(i, path, scene, rep)| {
            let seed = derive_seed(master_seed, i as u64 * reps as u64 + rep as u64);
            (path.display().to_string(), rep, seed, run_scenario(scene.clone(), cfg, backend, seed))
        })
        .collect();

    let mut totals = Counters::default();
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for (path, rep, seed, result) in results {
        match result {
            Ok(report) => {
                let counters = Counters::from_inputs(&report.metric_inputs);
                counters.check()?;
                totals.add(&counters);
                runs.push(RunSummary {
                    scenario: report.scenario.clone(),
                    rep,
                    seed,
                    termination: report.termination,
                    iterations: report.iterations,
                    incorrect_edges: report.incorrect_edges,
                    counters,
                });
                reports.push(report);
            }
            Err(e) => failures.push(BatchFailure { path, rep: Some(rep), error: e.to_string() }),
        }
    }
    let report = BatchReport {
        version: BATCH_VERSION,
        backend: backend.name().to_string(),
        master_seed,
        reps,
        config: cfg.clone(),
        scenarios: scenes.iter().map(|(_, _, s)| s.name.clone()).collect(),
        runs,
        failures,
        totals,
        metrics: totals.metrics()?,
    };
    Ok((report, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(cat: &str, pred: Option<(&str, [f64; 3])>) -> LocationPair {
        LocationPair {
            object_id: "o".into(),
            category: cat.into(),
            aabb_min: [0.0; 3],
            aabb_max: [0.1; 3],
            predicted_category: pred.map(|(c, _)| c.to_string()),
            predicted_center: pred.map(|(_, p)| p),
        }
    }

    #[test]
    fn rate_examples() {
        assert_eq!(compute_rate(0, 10).unwrap(), Some(0.0));
        assert_eq!(compute_rate(7, 8).unwrap(), Some(87.5));
        assert_eq!(compute_rate(0, 0).unwrap(), None);
        assert!(compute_rate(3, 2).is_err());
    }

    #[test]
    fn slpc_examples() {
        let good = pair("peg", Some(("peg", [0.05; 3])));
        let wrong_cat = pair("peg", Some(("bolt", [0.05; 3])));
        assert_eq!(compute_slpc(&[good.clone(), good.clone(), good.clone(), wrong_cat]), Some(75.0));
        assert_eq!(compute_slpc(&[good.clone()]), Some(100.0));
        assert_eq!(compute_slpc(&[]), None);
        assert!(pair("peg", Some(("peg", [0.1099, 0.0, 0.0]))).is_correct());
        assert!(!pair("peg", Some(("peg", [0.1101, 0.0, 0.0]))).is_correct());
        assert!(!pair("peg", None).is_correct());
    }

    #[test]
    fn undefined_metrics_are_absent() {
        let m = Counters::default().metrics().unwrap();
        assert_eq!(m, MetricsReport::default());
        assert_eq!(serde_json::to_string(&m).unwrap(), "{}");
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..100).map(|k| derive_seed(7, k)).collect();
        let set: std::collections::BTreeSet<_> = a.iter().collect();
        assert_eq!(set.len(), 100);
        assert_eq!(derive_seed(7, 3), a[3]);
        assert_ne!(derive_seed(8, 3), a[3]);
    }
}
