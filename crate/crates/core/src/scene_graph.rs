//! Dual-layer scene memory: a topology graph of objects and validated
//! relations, linked to a spatial network of Gaussian envelopes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{ComponentVoxels, EnvelopeRecord, GaussianEnvelope};

/// Floor applied to λ_max when normalizing center distances.
pub const DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneGraphError {
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("no vertex with id {0:?}")]
    MissingVertex(String),
    #[error("self relation on {0:?}")]
    SelfLoop(String),
    #[error("category must be non-empty (vertex {0:?})")]
    EmptyCategory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Containing,
    Contact,
    Nearby,
    Separate,
    Supporting,
    Adjacent,
}

impl Relation {
    pub const ALL: [Relation; 6] =
        [Relation::Containing, Relation::Contact, Relation::Nearby, Relation::Separate, Relation::Supporting, Relation::Adjacent];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Containing => "containing",
            Relation::Contact => "contact",
            Relation::Nearby => "nearby",
            Relation::Separate => "separate",
            Relation::Supporting => "supporting",
            Relation::Adjacent => "adjacent",
        }
    }

    /// Distance band this relation is validated against.
    pub fn band(self) -> Relation {
        match self {
            Relation::Supporting | Relation::Adjacent => Relation::Contact,
            r => r,
        }
    }

    /// Band containing normalized distance `d`.
    pub fn band_of(d: f64) -> Relation {
        if d <= 2.0 {
            Relation::Containing
        } else if d <= 3.0 {
            Relation::Contact
        } else if d <= 6.0 {
            Relation::Nearby
        } else {
            Relation::Separate
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = SceneGraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| SceneGraphError::UnknownRelation(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionState {
    #[default]
    Untouched,
    Grasped,
    Placed,
    InManipulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: String,
    pub category: String,
    pub state: InteractionState,
    pub spatial_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub rel_type: Relation,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constraints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub vertex_id: String,
    pub attributes: BTreeMap<String, String>,
}

/// A relation claimed by the perception backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationAssertion {
    pub src: String,
    pub dst: String,
    pub relation: String,
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    /// Keep an assertion only if the envelope geometry agrees.
    #[default]
    Validated,
    /// Keep every assertion (ablation).
    AcceptAll,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EdgeDelta {
    pub added: Vec<Edge>,
    pub removed: Vec<Edge>,
    pub kept: Vec<Edge>,
    pub rejected: Vec<RelationAssertion>,
}

/// `‖μᵢ−μⱼ‖ / √λ_max(Σᵢ+Σⱼ)`.
pub fn normalized_distance(si: &GaussianEnvelope, sj: &GaussianEnvelope) -> f64 {
    let lmax = SymmetricEigen::new(si.sigma + sj.sigma).eigenvalues.max().max(DISTANCE_FLOOR);
    (si.mu - sj.mu).norm() / lmax.sqrt()
}

pub fn validate_distance(d: f64, rel: Relation) -> bool {
    Relation::band_of(d) == rel.band()
}

pub fn validate_geometry(si: &GaussianEnvelope, sj: &GaussianEnvelope, sr: &str) -> Result<bool, SceneGraphError> {
    let rel: Relation = sr.parse()?;
    Ok(validate_distance(normalized_distance(si, sj), rel))
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SceneGraph {
    vertices: BTreeMap<String, Vertex>,
    envelopes: BTreeMap<u64, GaussianEnvelope>,
    components: BTreeMap<String, Vec<ComponentVoxels>>,
    edges: BTreeMap<(String, String), Edge>,
    features: BTreeMap<String, FeatureRecord>,
    next_index: u64,
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a vertex or refreshes its category and envelope. The envelope's
    /// own index is ignored; the graph assigns a stable one.
    pub fn upsert_vertex(&mut self, id: &str, category: &str, envelope: GaussianEnvelope) -> Result<&Vertex, SceneGraphError> {
        if category.is_empty() {
            return Err(SceneGraphError::EmptyCategory(id.to_string()));
        }
        let index = match self.vertices.get_mut(id) {
            Some(v) => {
                v.category = category.to_string();
                v.spatial_index
            }
            None => {
                let index = self.next_index;
                self.next_index += 1;
                self.vertices.insert(
                    id.to_string(),
                    Vertex { id: id.to_string(), category: category.to_string(), state: InteractionState::Untouched, spatial_index: index },
                );
                index
            }
        };
        self.envelopes.insert(index, envelope.with_index(index));
        Ok(&self.vertices[id])
    }

    pub fn remove_vertex(&mut self, id: &str) -> Option<Vertex> {
        let v = self.vertices.remove(id)?;
        self.envelopes.remove(&v.spatial_index);
        self.components.remove(id);
        self.features.remove(id);
        self.edges.retain(|(a, b), _| a != id && b != id);
        Some(v)
    }

    pub fn vertex(&self, id: &str) -> Option<&Vertex> {
        self.vertices.get(id)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Vertex> {
        self.vertices.values()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn envelope(&self, id: &str) -> Option<&GaussianEnvelope> {
        self.envelopes.get(&self.vertices.get(id)?.spatial_index)
    }

    pub fn set_envelope(&mut self, id: &str, envelope: GaussianEnvelope) -> Result<(), SceneGraphError> {
        let index = self.vertices.get(id).ok_or_else(|| SceneGraphError::MissingVertex(id.to_string()))?.spatial_index;
        self.envelopes.insert(index, envelope.with_index(index));
        Ok(())
    }

    pub fn set_state(&mut self, id: &str, state: InteractionState) -> Result<(), SceneGraphError> {
        let v = self.vertices.get_mut(id).ok_or_else(|| SceneGraphError::MissingVertex(id.to_string()))?;
        v.state = state;
        Ok(())
    }

    pub fn set_components(&mut self, id: &str, components: Vec<ComponentVoxels>) -> Result<(), SceneGraphError> {
        if !self.vertices.contains_key(id) {
            return Err(SceneGraphError::MissingVertex(id.to_string()));
        }
        self.components.insert(id.to_string(), components);
        Ok(())
    }

    pub fn set_features(&mut self, id: &str, attributes: BTreeMap<String, String>) -> Result<(), SceneGraphError> {
        if !self.vertices.contains_key(id) {
            return Err(SceneGraphError::MissingVertex(id.to_string()));
        }
        self.features.insert(id.to_string(), FeatureRecord { vertex_id: id.to_string(), attributes });
        Ok(())
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_between(&self, a: &str, b: &str) -> Option<&Edge> {
        self.edges.get(&pair_key(a, b))
    }

    /// Replaces the edge set with the assertions that pass `policy`.
    /// The first passing assertion for an unordered pair wins. Fails without
    /// mutating anything if an assertion names an unknown vertex, relates a
    /// vertex to itself, or uses an unknown relation.
    pub fn update_edges(&mut self, assertions: &[RelationAssertion], policy: EdgePolicy) -> Result<EdgeDelta, SceneGraphError> {
        let mut parsed = Vec::with_capacity(assertions.len());
        for a in assertions {
            for id in [&a.src, &a.dst] {
                if !self.vertices.contains_key(id) {
                    return Err(SceneGraphError::MissingVertex(id.clone()));
                }
            }
            if a.src == a.dst {
                return Err(SceneGraphError::SelfLoop(a.src.clone()));
            }
            parsed.push(a.relation.parse::<Relation>()?);
        }

        let mut delta = EdgeDelta::default();
        let mut next: BTreeMap<(String, String), Edge> = BTreeMap::new();
        for (a, rel) in assertions.iter().zip(parsed) {
            let key = pair_key(&a.src, &a.dst);
            if next.contains_key(&key) {
                continue;
            }
            let ok = match policy {
                EdgePolicy::AcceptAll => true,
                EdgePolicy::Validated => {
                    let (si, sj) = (self.envelope(&a.src).expect("indexed"), self.envelope(&a.dst).expect("indexed"));
                    validate_distance(normalized_distance(si, sj), rel)
                }
            };
            if ok {
                next.insert(key, Edge { src: a.src.clone(), dst: a.dst.clone(), rel_type: rel, constraints: a.constraints.clone() });
            } else {
                delta.rejected.push(a.clone());
            }
        }
        for (key, old) in &self.edges {
            match next.get(key) {
                Some(new) if new.rel_type == old.rel_type => delta.kept.push(new.clone()),
                _ => delta.removed.push(old.clone()),
            }
        }
        for (key, new) in &next {
            if self.edges.get(key).is_none_or(|old| old.rel_type != new.rel_type) {
                delta.added.push(new.clone());
            }
        }
        self.edges = next;
        Ok(delta)
    }

    /// Increments staleness for every envelope not listed in `seen`.
    pub fn age_unseen<'a>(&mut self, seen: impl IntoIterator<Item = &'a str>) {
        let seen: std::collections::BTreeSet<&str> = seen.into_iter().collect();
        for v in self.vertices.values() {
            if !seen.contains(v.id.as_str()) {
                if let Some(e) = self.envelopes.get_mut(&v.spatial_index) {
                    e.stale_frames += 1;
                }
            }
        }
    }

    pub fn snapshot(&self, timestamp: u64) -> SceneSnapshot {
        SceneSnapshot {
            vertices: self.vertices.values().cloned().collect(),
            edges: self.edges.values().cloned().collect(),
            features: self.features.values().cloned().collect(),
            envelopes: self.envelopes.clone(),
            components: self.components.clone(),
            timestamp,
        }
    }
}

/// Immutable copy of the scene memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSnapshot {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    pub features: Vec<FeatureRecord>,
    pub envelopes: BTreeMap<u64, GaussianEnvelope>,
    pub components: BTreeMap<String, Vec<ComponentVoxels>>,
    pub timestamp: u64,
}

impl SceneSnapshot {
    pub fn vertex(&self, id: &str) -> Option<&Vertex> {
        self.vertices.iter().find(|v| v.id == id)
    }

    pub fn envelope_of(&self, id: &str) -> Option<&GaussianEnvelope> {
        self.envelopes.get(&self.vertex(id)?.spatial_index)
    }

    pub fn edges_touching<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.src == id || e.dst == id)
    }

    pub fn components_of(&self, id: &str) -> &[ComponentVoxels] {
        self.components.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every vertex index resolves and every edge endpoint exists.
    pub fn is_consistent(&self) -> bool {
        self.vertices.iter().all(|v| self.envelopes.contains_key(&v.spatial_index))
            && self.edges.iter().all(|e| self.vertex(&e.src).is_some() && self.vertex(&e.dst).is_some())
            && self.features.iter().all(|f| self.vertex(&f.vertex_id).is_some())
    }

    pub fn dump(&self) -> GraphDump {
        GraphDump {
            vertices: self.vertices.clone(),
            edges: self.edges.iter().map(|e| EdgeDump { src: e.src.clone(), dst: e.dst.clone(), rel_type: e.rel_type }).collect(),
            features: self.features.clone(),
        }
    }

    pub fn envelope_records(&self) -> Vec<EnvelopeRecord> {
        self.envelopes.values().map(GaussianEnvelope::record).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDump {
    pub src: String,
    pub dst: String,
    pub rel_type: Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<EdgeDump>,
    pub features: Vec<FeatureRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn env_at(x: f64, s: f64) -> GaussianEnvelope {
        GaussianEnvelope::new(Vector3::new(x, 0.0, 0.0), Matrix3::identity() * s, 0)
    }

    fn assert_rel(src: &str, dst: &str, rel: &str) -> RelationAssertion {
        RelationAssertion { src: src.into(), dst: dst.into(), relation: rel.into(), constraints: BTreeMap::new() }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(normalized_distance(&env_at(0.0, 1.0), &env_at(0.0, 1.0)), 0.0);
        assert!((normalized_distance(&env_at(0.0, 1.0), &env_at(2.0, 1.0)) - 2f64.sqrt()).abs() < 1e-12);
        let wide = GaussianEnvelope::new(Vector3::zeros(), Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), 0);
        assert!((normalized_distance(&wide, &env_at(5.0, 1.0)) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn band_examples() {
        assert!(validate_distance(1.5, Relation::Containing));
        assert!(!validate_distance(2.5, Relation::Containing));
        assert!(validate_distance(2.5, Relation::Contact));
        assert!(validate_distance(2.5, Relation::Supporting));
        assert!(validate_distance(7.0, Relation::Separate));
        assert!(matches!(validate_geometry(&env_at(0.0, 1.0), &env_at(1.0, 1.0), "inside"), Err(SceneGraphError::UnknownRelation(_))));
    }

    #[test]
    fn upsert_keeps_index() {
        let mut g = SceneGraph::new();
        let v = g.upsert_vertex("bolt_1", "bolt", env_at(0.0, 1.0)).unwrap().clone();
        assert_eq!(v.state, InteractionState::Untouched);
        g.upsert_vertex("bolt_1", "bolt", env_at(1.0, 2.0)).unwrap();
        assert_eq!(g.vertex_count(), 1);
        assert_eq!(g.vertex("bolt_1").unwrap().spatial_index, v.spatial_index);
        assert_eq!(g.envelope("bolt_1").unwrap().mu.x, 1.0);
        assert!(g.upsert_vertex("x", "", env_at(0.0, 1.0)).is_err());
    }

    #[test]
    fn edges_follow_validation() {
        let mut g = SceneGraph::new();
        g.upsert_vertex("a", "box", env_at(0.0, 0.5)).unwrap();
        // Σa+Σb = I → d equals center distance.
        g.upsert_vertex("b", "box", env_at(2.5, 0.5)).unwrap();
        let d = g.update_edges(&[assert_rel("a", "b", "contact")], EdgePolicy::Validated).unwrap();
        assert_eq!(d.added.len(), 1);
        assert_eq!(g.edge_count(), 1);

        g.upsert_vertex("b", "box", env_at(5.0, 0.5)).unwrap();
        let d = g.update_edges(&[assert_rel("a", "b", "containing")], EdgePolicy::Validated).unwrap();
        assert_eq!(d.removed.len(), 1);
        assert_eq!(d.rejected.len(), 1);
        assert_eq!(g.edge_count(), 0);

        g.update_edges(&[assert_rel("a", "b", "nearby")], EdgePolicy::Validated).unwrap();
        let d = g.update_edges(&[], EdgePolicy::Validated).unwrap();
        assert_eq!((d.kept.len(), d.removed.len(), g.edge_count()), (0, 1, 0));
    }

    #[test]
    fn update_edges_is_atomic_on_error() {
        let mut g = SceneGraph::new();
        g.upsert_vertex("a", "box", env_at(0.0, 0.5)).unwrap();
        g.upsert_vertex("b", "box", env_at(2.5, 0.5)).unwrap();
        g.update_edges(&[assert_rel("a", "b", "contact")], EdgePolicy::Validated).unwrap();
        let err = g.update_edges(&[assert_rel("a", "b", "contact"), assert_rel("a", "zz", "contact")], EdgePolicy::Validated);
        assert_eq!(err, Err(SceneGraphError::MissingVertex("zz".into())));
        assert!(g.update_edges(&[assert_rel("a", "a", "contact")], EdgePolicy::Validated).is_err());
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn snapshot_is_detached() {
        let mut g = SceneGraph::new();
        assert!(g.snapshot(0).vertices.is_empty());
        g.upsert_vertex("a", "box", env_at(0.0, 1.0)).unwrap();
        let s = g.snapshot(1);
        assert_eq!(s, g.snapshot(1));
        g.upsert_vertex("b", "box", env_at(1.0, 1.0)).unwrap();
        assert_eq!(s.vertices.len(), 1);
        assert!(s.is_consistent());
    }

    #[test]
    fn remove_vertex_drops_edges() {
        let mut g = SceneGraph::new();
        g.upsert_vertex("a", "box", env_at(0.0, 0.5)).unwrap();
        g.upsert_vertex("b", "box", env_at(2.5, 0.5)).unwrap();
        g.update_edges(&[assert_rel("a", "b", "contact")], EdgePolicy::Validated).unwrap();
        g.remove_vertex("b");
        assert_eq!(g.edge_count(), 0);
        assert!(g.snapshot(0).is_consistent());
    }
}
