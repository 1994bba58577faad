//! Wire schema for backend responses. Every document carries a top-level
//! `kind`; parsing is strict and rejects unknown fields, verbs and parameters.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::VlmError;
use crate::scene_graph::RelationAssertion;
use crate::task_memory::SubtaskNode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Segmentation,
    Relationships,
    Plan,
    Action,
}

impl fmt::Display for ResponseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResponseKind::Segmentation => "segmentation",
            ResponseKind::Relationships => "relationships",
            ResponseKind::Plan => "plan",
            ResponseKind::Action => "action",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentedObject {
    pub id: String,
    pub category: String,
    /// `(u, v)` pixel coordinates.
    pub pixels: Vec<[u32; 2]>,
    /// Sub-component label per pixel; empty when the backend does not label parts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    MoveTo,
    Grasp,
    Release,
    InsertAlong,
    Retreat,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::MoveTo => "move_to",
            Verb::Grasp => "grasp",
            Verb::Release => "release",
            Verb::InsertAlong => "insert_along",
            Verb::Retreat => "retreat",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionTarget {
    Object(String),
    Point([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Vector([f64; 3]),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionCommand {
    pub verb: Verb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ActionTarget>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, ParamValue>,
}

const COMMON_PARAMS: [&str; 2] = ["speed", "force_cap"];

impl ActionCommand {
    pub fn move_to(p: [f64; 3]) -> Self {
        ActionCommand { verb: Verb::MoveTo, target: Some(ActionTarget::Point(p)), parameters: BTreeMap::new() }
    }

    pub fn grasp(object: &str) -> Self {
        ActionCommand { verb: Verb::Grasp, target: Some(ActionTarget::Object(object.to_string())), parameters: BTreeMap::new() }
    }

    pub fn release(object: Option<&str>) -> Self {
        ActionCommand { verb: Verb::Release, target: object.map(|o| ActionTarget::Object(o.to_string())), parameters: BTreeMap::new() }
    }

    pub fn insert_along(object: &str, axis: [f64; 3], depth: f64) -> Self {
        let parameters = BTreeMap::from([("axis".to_string(), ParamValue::Vector(axis)), ("depth".to_string(), ParamValue::Number(depth))]);
        ActionCommand { verb: Verb::InsertAlong, target: Some(ActionTarget::Object(object.to_string())), parameters }
    }

    pub fn retreat(distance: f64) -> Self {
        let parameters = BTreeMap::from([("distance".to_string(), ParamValue::Number(distance))]);
        ActionCommand { verb: Verb::Retreat, target: None, parameters }
    }

    pub fn number(&self, key: &str) -> Option<f64> {
        match self.parameters.get(key)? {
            ParamValue::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn vector(&self, key: &str) -> Option<[f64; 3]> {
        match self.parameters.get(key)? {
            ParamValue::Vector(v) => Some(*v),
            _ => None,
        }
    }

    pub fn target_object(&self) -> Option<&str> {
        match &self.target {
            Some(ActionTarget::Object(id)) => Some(id),
            _ => None,
        }
    }

    pub fn target_point(&self) -> Option<[f64; 3]> {
        match &self.target {
            Some(ActionTarget::Point(p)) => Some(*p),
            _ => None,
        }
    }

    /// Checks verb-specific targets and parameters.
    pub fn validate(&self) -> Result<(), VlmError> {
        let bad = |m: String| Err(VlmError::Malformed(format!("{}: {m}", self.verb)));
        let (target_ok, required, optional): (bool, &[&str], &[&str]) = match self.verb {
            Verb::MoveTo => (self.target_point().is_some(), &[], &[]),
            Verb::Grasp => (self.target_object().is_some(), &[], &[]),
            Verb::Release => (self.target_point().is_none(), &[], &[]),
            Verb::InsertAlong => (self.target_object().is_some(), &["axis", "depth"], &[]),
            Verb::Retreat => (self.target.is_none(), &["distance"], &[]),
        };
        if !target_ok {
            return bad("target missing or of the wrong type".into());
        }
        for key in self.parameters.keys() {
            if !(required.contains(&key.as_str()) || optional.contains(&key.as_str()) || COMMON_PARAMS.contains(&key.as_str())) {
                return bad(format!("unexpected parameter {key:?}"));
            }
        }
        for key in required {
            if !self.parameters.contains_key(*key) {
                return bad(format!("missing parameter {key:?}"));
            }
        }
        for (key, value) in &self.parameters {
            let ok = match (key.as_str(), value) {
                ("axis", ParamValue::Vector(v)) => v.iter().all(|x| x.is_finite()) && v.iter().map(|x| x * x).sum::<f64>() > 1e-12,
                ("depth" | "distance" | "speed" | "force_cap", ParamValue::Number(x)) => x.is_finite() && *x >= 0.0,
                _ => false,
            };
            if !ok {
                return bad(format!("invalid value for {key:?}"));
            }
        }
        if let Some(p) = self.target_point() {
            if !p.iter().all(|x| x.is_finite()) {
                return bad("non-finite target point".into());
            }
        }
        Ok(())
    }

    /// Flattened parameters for motion history records.
    pub fn summary(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("verb".to_string(), self.verb.to_string());
        match &self.target {
            Some(ActionTarget::Object(id)) => {
                out.insert("target".to_string(), id.clone());
            }
            Some(ActionTarget::Point(p)) => {
                out.insert("target".to_string(), format!("[{:.3}, {:.3}, {:.3}]", p[0], p[1], p[2]));
            }
            None => {}
        }
        for (k, v) in &self.parameters {
            let text = match v {
                ParamValue::Number(x) => format!("{x:.4}"),
                ParamValue::Vector(a) => format!("[{:.3}, {:.3}, {:.3}]", a[0], a[1], a[2]),
                ParamValue::Text(s) => s.clone(),
            };
            out.insert(k.clone(), text);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VlmResponse {
    Segmentation {
        objects: Vec<SegmentedObject>,
    },
    Relationships {
        relations: Vec<RelationAssertion>,
    },
    Plan {
        subtasks: Vec<SubtaskNode>,
    },
    Action {
        command: ActionCommand,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rationale: Option<String>,
    },
}

impl VlmResponse {
    pub fn kind(&self) -> ResponseKind {
        match self {
            VlmResponse::Segmentation { .. } => ResponseKind::Segmentation,
            VlmResponse::Relationships { .. } => ResponseKind::Relationships,
            VlmResponse::Plan { .. } => ResponseKind::Plan,
            VlmResponse::Action { .. } => ResponseKind::Action,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

/// Removes a surrounding Markdown code fence, if any.
pub fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Parses and validates a response of the expected kind.
pub fn parse_response(raw: &str, expected: ResponseKind) -> Result<VlmResponse, VlmError> {
    let resp: VlmResponse = serde_json::from_str(strip_fences(raw)).map_err(|e| VlmError::Malformed(e.to_string()))?;
    if resp.kind() != expected {
        return Err(VlmError::Malformed(format!("expected {expected} response, got {}", resp.kind())));
    }
    match &resp {
        VlmResponse::Segmentation { objects } => {
            for o in objects {
                if o.id.is_empty() || o.category.is_empty() {
                    return Err(VlmError::Malformed("segmented object needs id and category".into()));
                }
                if !o.sub_labels.is_empty() && o.sub_labels.len() != o.pixels.len() {
                    return Err(VlmError::Malformed(format!("object {:?}: sub_labels length differs from pixels", o.id)));
                }
            }
        }
        VlmResponse::Relationships { relations } => {
            for r in relations {
                r.relation.parse::<crate::scene_graph::Relation>().map_err(|e| VlmError::Malformed(e.to_string()))?;
            }
        }
        VlmResponse::Plan { subtasks } => {
            if subtasks.is_empty() {
                return Err(VlmError::Malformed("plan has no subtasks".into()));
            }
        }
        VlmResponse::Action { command, .. } => command.validate()?,
    }
    Ok(resp)
}
