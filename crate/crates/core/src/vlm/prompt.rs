//! Mode-specific prompt synthesis. Coarse prompts carry global structure;
//! fine prompts carry local geometry and live sensor feedback.

use std::fmt::Write as _;

use base64::Engine;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::response::ResponseKind;
use super::VlmError;
use crate::geometry::{Observation, RigidTransform};
use crate::scene_graph::SceneSnapshot;
use crate::sim::frames::encode_rgb_png;
use crate::task_memory::{Status, TaskMemory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SectionTag {
    #[serde(rename = "TTP_motion")]
    TtpMotion,
    #[serde(rename = "E_motion")]
    EMotion,
    #[serde(rename = "SS_motion")]
    SsMotion,
    #[serde(rename = "S_global")]
    SGlobal,
    #[serde(rename = "S_local")]
    SLocal,
    #[serde(rename = "D_t")]
    Dt,
    #[serde(rename = "MSH_similar")]
    MshSimilar,
}

impl SectionTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SectionTag::TtpMotion => "TTP_motion",
            SectionTag::EMotion => "E_motion",
            SectionTag::SsMotion => "SS_motion",
            SectionTag::SGlobal => "S_global",
            SectionTag::SLocal => "S_local",
            SectionTag::Dt => "D_t",
            SectionTag::MshSimilar => "MSH_similar",
        }
    }
}

pub const COARSE_SECTIONS: [SectionTag; 5] =
    [SectionTag::TtpMotion, SectionTag::EMotion, SectionTag::SsMotion, SectionTag::SGlobal, SectionTag::MshSimilar];
pub const FINE_SECTIONS: [SectionTag; 5] =
    [SectionTag::TtpMotion, SectionTag::SLocal, SectionTag::Dt, SectionTag::SsMotion, SectionTag::MshSimilar];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    /// Effector-to-camera mount, used to recover the effector pose from a frame.
    pub camera_mount: RigidTransform,
    pub voxel_size: f64,
    /// Attach the RGB frame as a base64 PNG.
    pub attach_images: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { camera_mount: RigidTransform::identity(), voxel_size: 0.001, attach_images: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub mode: Mode,
    pub sections: Vec<(SectionTag, String)>,
    pub images: Vec<String>,
}

impl PromptBundle {
    pub fn tags(&self) -> Vec<SectionTag> {
        self.sections.iter().map(|(t, _)| *t).collect()
    }

    pub fn section(&self, tag: SectionTag) -> Option<&str> {
        self.sections.iter().find(|(t, _)| *t == tag).map(|(_, s)| s.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            Mode::Coarse => "coarse",
            Mode::Fine => "fine",
        };
        writeln!(out, "mode: {mode}").unwrap();
        for (tag, body) in &self.sections {
            writeln!(out, "\n## {}\n{}", tag.as_str(), body.trim_end()).unwrap();
        }
        out
    }

    /// Hex SHA-256 of the rendered text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

fn mm(x: f64) -> String {
    format!("{:.1}", x * 1000.0)
}

fn point_m(p: &Vector3<f64>) -> String {
    format!("({:.3}, {:.3}, {:.3})", p.x, p.y, p.z)
}

/// Relative offset as per-axis millimeters, skipping zero axes.
pub fn render_offset(offset: &Vector3<f64>) -> String {
    let parts: Vec<String> = ["x", "y", "z"]
        .iter()
        .enumerate()
        .filter(|(a, _)| offset[*a].abs() >= 5e-5)
        .map(|(a, name)| format!("{} mm along {name}", mm(offset[a])))
        .collect();
    if parts.is_empty() {
        "0.0 mm".to_string()
    } else {
        parts.join(", ")
    }
}

fn ttp_section(memory: &TaskMemory) -> String {
    let mut out = String::new();
    for (i, n) in memory.plan().iter().enumerate() {
        let marker = if memory.status(&n.id).map(|s| s.status) == Some(Status::Active) { ">" } else { " " };
        let goal = n.goal.as_deref().map(|g| format!(" -> {g}")).unwrap_or_default();
        let deps = if n.depends_on.is_empty() { "-".to_string() } else { n.depends_on.join(", ") };
        writeln!(out, "{marker} {}. {} {} {}{goal} (after: {deps})", i + 1, n.id, n.action_kind, n.target_object).unwrap();
    }
    out
}

fn ss_section(memory: &TaskMemory) -> String {
    let mut out = String::new();
    for s in memory.statuses() {
        let status = serde_json::to_value(s.status).unwrap();
        writeln!(out, "{}: {} (attempts {})", s.subtask_id, status.as_str().unwrap_or_default(), s.attempts).unwrap();
    }
    out
}

fn msh_section(memory: &TaskMemory, category: &str) -> String {
    let active = memory.active().expect("caller checked");
    let similar = memory.query_similar(active.action_kind, category);
    if similar.is_empty() {
        return "none".to_string();
    }
    let mut out = String::new();
    for r in similar {
        let outcome = serde_json::to_value(r.outcome).unwrap();
        let params: Vec<String> = r.parameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(out, "t={} {} {}: {} [{}]", r.timestamp, r.action_kind, r.target_category, outcome.as_str().unwrap_or_default(), params.join(", "))
            .unwrap();
    }
    out
}

fn target_category<'a>(snapshot: &'a SceneSnapshot, id: &'a str) -> &'a str {
    snapshot.vertex(id).map(|v| v.category.as_str()).unwrap_or("unknown")
}

pub fn build_coarse_prompt(memory: &TaskMemory, snapshot: &SceneSnapshot, _cfg: &PromptConfig) -> Result<PromptBundle, VlmError> {
    let active = memory.active().ok_or(VlmError::NoActiveSubtask)?;
    let target = active.target_object.as_str();

    let mut edges = String::new();
    for e in snapshot.edges_touching(target) {
        writeln!(edges, "{} --{}--> {}", e.src, e.rel_type, e.dst).unwrap();
    }
    if edges.is_empty() {
        edges.push_str("none");
    }

    let mut global = String::new();
    for v in &snapshot.vertices {
        if let Some(env) = snapshot.envelopes.get(&v.spatial_index) {
            let ax = env.semi_axes();
            writeln!(
                global,
                "{} ({}): mu={} m, semi-axes=({}, {}, {}) mm",
                v.id,
                v.category,
                point_m(&env.mu),
                mm(ax[2]),
                mm(ax[1]),
                mm(ax[0])
            )
            .unwrap();
        }
    }
    if global.is_empty() {
        global.push_str("none");
    }

    let sections = vec![
        (SectionTag::TtpMotion, ttp_section(memory)),
        (SectionTag::EMotion, edges),
        (SectionTag::SsMotion, ss_section(memory)),
        (SectionTag::SGlobal, global),
        (SectionTag::MshSimilar, msh_section(memory, target_category(snapshot, target))),
    ];
    Ok(PromptBundle { mode: Mode::Coarse, sections, images: Vec::new() })
}

pub fn build_fine_prompt(memory: &TaskMemory, snapshot: &SceneSnapshot, obs: &Observation, cfg: &PromptConfig) -> Result<PromptBundle, VlmError> {
    let active = memory.active().ok_or(VlmError::NoActiveSubtask)?;
    let target = active.target_object.as_str();

    let mut local = String::new();
    for c in snapshot.components_of(target) {
        let ext = c.extent(cfg.voxel_size);
        writeln!(local, "component {}: {} voxels, extent {} x {} x {} mm", c.component_id, c.len(), mm(ext.x), mm(ext.y), mm(ext.z)).unwrap();
    }
    if local.is_empty() {
        local.push_str("none");
    }

    let effector = obs.cam_to_base.compose(&cfg.camera_mount.inverse()).translation;
    let mut feedback = format!("frame: {}\neffector: {} m\n", obs.timestamp, point_m(&effector));
    match snapshot.envelope_of(target) {
        Some(env) => {
            let offset = env.mu - effector;
            writeln!(feedback, "target {target}: {}", render_offset(&offset)).unwrap();
            writeln!(feedback, "distance: {} mm", mm(offset.norm())).unwrap();
        }
        None => writeln!(feedback, "target {target}: not observed").unwrap(),
    }

    let sections = vec![
        (SectionTag::TtpMotion, ttp_section(memory)),
        (SectionTag::SLocal, local),
        (SectionTag::Dt, feedback),
        (SectionTag::SsMotion, ss_section(memory)),
        (SectionTag::MshSimilar, msh_section(memory, target_category(snapshot, target))),
    ];
    let images = if cfg.attach_images { vec![encode_frame(obs)] } else { Vec::new() };
    Ok(PromptBundle { mode: Mode::Fine, sections, images })
}

pub fn encode_frame(obs: &Observation) -> String {
    let png = encode_rgb_png(obs).expect("in-memory PNG encoding");
    base64::engine::general_purpose::STANDARD.encode(png)
}

pub fn segmentation_prompt(frame: u64) -> String {
    format!("Segment every task-relevant object in frame {frame}. Report object ids, categories and pixel sets.")
}

pub fn relationship_prompt(pairs: &[(String, String)], snapshot: &SceneSnapshot) -> String {
    let mut out = String::from("For each object pair, state one relation: containing, contact, nearby, separate, supporting or adjacent.\n");
    for (a, b) in pairs {
        writeln!(out, "- {a} ({}) / {b} ({})", target_category(snapshot, a), target_category(snapshot, b)).unwrap();
    }
    out
}

pub fn plan_prompt(task: &str, snapshot: &SceneSnapshot) -> String {
    let mut out = format!("Task: {task}\nObjects:\n");
    for v in &snapshot.vertices {
        writeln!(out, "- {} ({})", v.id, v.category).unwrap();
    }
    out.push_str("Decompose the task into subtasks with dependencies.");
    out
}

/// Output-format instructions appended for live backends.
pub fn response_instructions(kind: ResponseKind) -> &'static str {
    match kind {
        ResponseKind::Segmentation => {
            r#"Reply with JSON only: {"kind":"segmentation","objects":[{"id":str,"category":str,"pixels":[[u,v],...],"sub_labels":[int,...]?}]}"#
        }
        ResponseKind::Relationships => {
            r#"Reply with JSON only: {"kind":"relationships","relations":[{"src":str,"dst":str,"relation":"containing|contact|nearby|separate|supporting|adjacent"}]}"#
        }
        ResponseKind::Plan => {
            r#"Reply with JSON only: {"kind":"plan","subtasks":[{"id":str,"description":str,"action_kind":"approach|grasp|align|insert|place|release","target_object":str,"depends_on":[str],"goal":str?}]}"#
        }
        ResponseKind::Action => {
            r#"Reply with JSON only: {"kind":"action","command":{"verb":"move_to|grasp|release|insert_along|retreat","target":{"object":str}|{"point":[x,y,z]},"parameters":{"axis":[x,y,z],"depth":m,"distance":m}}}. move_to needs a point target; grasp and insert_along need an object target; insert_along needs axis and depth; retreat needs distance and no target."#
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_rendering() {
        assert_eq!(render_offset(&Vector3::new(0.0, 0.0, 0.01)), "10.0 mm along z");
        assert_eq!(render_offset(&Vector3::new(0.003, 0.0, -0.004)), "3.0 mm along x, -4.0 mm along z");
        assert_eq!(render_offset(&Vector3::zeros()), "0.0 mm");
    }
}
