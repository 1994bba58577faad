//! Run-config file: one section per subsystem, every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envelope::EnvelopeUpdateConfig;
use crate::partition::ZoneConfig;
use crate::planner::PlannerOptions;
use crate::vlm::scripted::ScriptedConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub zone: ZoneConfig,
    pub envelope: EnvelopeUpdateConfig,
    pub planner: PlannerOptions,
    pub scripted: ScriptedConfig,
}

fn probability(name: &str, p: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(format!("{name} must lie in [0, 1], got {p}"))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| format!("run config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.zone.validate().map_err(|e| e.to_string())?;
        self.envelope.validate().map_err(|e| e.to_string())?;
        let p = &self.planner;
        if p.max_iterations < 1 {
            return Err("planner.max_iterations must be at least 1".into());
        }
        let tau = p.tau(&self.zone);
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(format!("planner.tau must be positive, got {tau}"));
        }
        if p.retry_cap < 1 {
            return Err("planner.retry_cap must be at least 1".into());
        }
        if !(p.relation_radius > 0.0) {
            return Err("planner.relation_radius must be positive".into());
        }
        let s = &self.scripted;
        probability("scripted.segmentation.morph_probability", s.segmentation.morph_probability)?;
        probability("scripted.segmentation.label_swap_probability", s.segmentation.label_swap_probability)?;
        probability("scripted.relation_noise", s.relation_noise)?;
        probability("scripted.faults.failure_probability", s.faults.failure_probability)?;
        probability("scripted.faults.malformed_probability", s.faults.malformed_probability)?;
        Ok(())
    }
}
