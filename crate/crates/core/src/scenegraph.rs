//! Road graph loading and the per-scene road-agent graph.
//!
//! Node indexing inside a [`SceneGraph`] puts agents first (`0..A`) and road
//! nodes after them (`A..A + n_road`).

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scenedata::{SceneSample, AGENT_FEATURES};

/// Agent-road attachment radius in meters.
pub const ATTACH_RADIUS: f64 = 5.0;
/// x_rel, y_rel, one-hot node kind.
pub const ROAD_FEATURES: usize = 2 + NodeKind::COUNT;
/// One-hot edge type, dx, dy.
pub const EDGE_FEATURES: usize = 3 + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Ring,
    Approach,
    Exit,
    Other,
}

impl NodeKind {
    pub const COUNT: usize = 4;

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeType {
    RoadRoad,
    AgentAgent,
    RoadAgent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapNode {
    id: i64,
    x: f64,
    y: f64,
    kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapEdge {
    src: i64,
    dst: i64,
    #[serde(default = "lane")]
    kind: String,
}

fn lane() -> String {
    "lane".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    #[serde(default)]
    nodes: Vec<MapNode>,
    #[serde(default)]
    edges: Vec<MapEdge>,
}

/// Static road structure in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    pub node_ids: Vec<i64>,
    pub node_pos: Vec<[f64; 2]>,
    pub node_kind: Vec<NodeKind>,
    pub edges: Vec<(usize, usize)>,
}

impl RoadGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_pos.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if n == 0 {
            return Err(Error::Validation("road graph has no nodes".into()));
        }
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                return Err(Error::Validation(format!(
                    "edge ({s}, {d}) references a node outside 0..{n}"
                )));
            }
            if s == d {
                return Err(Error::Validation(format!("self-loop on road node {s}")));
            }
        }
        Ok(())
    }

    /// `[n_road, ROAD_FEATURES]` relative to `origin`.
    pub fn node_features(&self, origin: [f64; 2]) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_nodes(), ROAD_FEATURES]);
        for (i, (p, k)) in self.node_pos.iter().zip(&self.node_kind).enumerate() {
            t.set(&[i, 0], p[0] - origin[0]);
            t.set(&[i, 1], p[1] - origin[1]);
            t.set(&[i, 2 + k.index()], 1.0);
        }
        t
    }

    pub fn parse(text: &str, path: &Path) -> Result<RoadGraph> {
        let file: MapFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        let mut nodes = file.nodes;
        nodes.sort_by_key(|n| n.id);
        let index: BTreeMap<i64, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        if index.len() != nodes.len() {
            return Err(Error::Validation("duplicate road node id".into()));
        }
        let mut edges = Vec::with_capacity(file.edges.len());
        for e in &file.edges {
            let (Some(&s), Some(&d)) = (index.get(&e.src), index.get(&e.dst)) else {
                return Err(Error::Validation(format!(
                    "dangling edge {} -> {} ({} nodes)",
                    e.src,
                    e.dst,
                    nodes.len()
                )));
            };
            edges.push((s, d));
        }
        let g = RoadGraph {
            node_ids: nodes.iter().map(|n| n.id).collect(),
            node_pos: nodes.iter().map(|n| [n.x, n.y]).collect(),
            node_kind: nodes.iter().map(|n| n.kind).collect(),
            edges,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn to_toml(&self) -> String {
        let file = MapFile {
            nodes: (0..self.n_nodes())
                .map(|i| MapNode {
                    id: self.node_ids[i],
                    x: self.node_pos[i][0],
                    y: self.node_pos[i][1],
                    kind: self.node_kind[i],
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(s, d)| MapEdge {
                    src: self.node_ids[s],
                    dst: self.node_ids[d],
                    kind: lane(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("map serializes")
    }
}

/// Loads a TOML map with `[[nodes]]` (id, x, y, kind) and `[[edges]]`
/// (src, dst, kind) tables.
pub fn build_road_graph(map_file: &Path) -> Result<RoadGraph> {
    let text = std::fs::read_to_string(map_file).map_err(|e| Error::io(map_file, e))?;
    RoadGraph::parse(&text, map_file)
}

pub fn write_road_graph(g: &RoadGraph, path: &Path) -> Result<()> {
    std::fs::write(path, g.to_toml()).map_err(|e| Error::io(path, e))
}

/// Closed ring with a node at every arc length `k·spacing < 2πr`, plus radial
/// approach and exit polylines at each arm angle.
pub fn ring_road_graph(radius: f64, spacing: f64, arms: usize, arm_len: f64) -> RoadGraph {
    let circumference = TAU * radius;
    let n_ring = ((circumference / spacing).ceil() as usize).max(3);
    let mut pos = Vec::new();
    let mut kind = Vec::new();
    let mut edges = Vec::new();
    for i in 0..n_ring {
        let th = i as f64 * spacing / radius;
        pos.push([radius * th.cos(), radius * th.sin()]);
        kind.push(NodeKind::Ring);
        edges.push((i, (i + 1) % n_ring));
    }
    let n_arm = (arm_len / spacing).floor() as usize;
    for k in 0..arms {
        let th = TAU * k as f64 / arms.max(1) as f64;
        let ring_node = ((th * radius / spacing).round() as usize) % n_ring;
        // approach: outermost first, last one feeds the ring
        let first = pos.len();
        for j in (1..=n_arm).rev() {
            let r = radius + j as f64 * spacing;
            pos.push([r * th.cos(), r * th.sin()]);
            kind.push(NodeKind::Approach);
        }
        for j in first..pos.len() {
            let next = if j + 1 < pos.len() { j + 1 } else { ring_node };
            edges.push((j, next));
        }
        // exit lane, slightly offset in angle
        let the = th + 0.5 * spacing / radius;
        let first = pos.len();
        for j in 1..=n_arm {
            let r = radius + j as f64 * spacing;
            pos.push([r * the.cos(), r * the.sin()]);
            kind.push(NodeKind::Exit);
        }
        edges.push((ring_node, first));
        for j in first..pos.len() - 1 {
            edges.push((j, j + 1));
        }
    }
    RoadGraph {
        node_ids: (0..pos.len() as i64).collect(),
        node_pos: pos,
        node_kind: kind,
        edges,
    }
}

/// Road graph plus the scene's agents, ready for the spatial encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub n_agents: usize,
    pub n_road: usize,
    /// `[A, AGENT_FEATURES]` at the current frame.
    pub agent_feat: Tensor,
    /// `[n_road, ROAD_FEATURES]`.
    pub road_feat: Tensor,
    /// Positions of all nodes in the scene frame (agents first).
    pub node_pos: Vec<[f64; 2]>,
    /// Directed `(src, dst)` over combined node indices.
    pub edges: Vec<(usize, usize)>,
    pub edge_type: Vec<EdgeType>,
    /// `[n_edges, EDGE_FEATURES]`.
    pub edge_feat: Tensor,
}

impl SceneGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_agents + self.n_road
    }

    pub fn agent_agent_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges_of(EdgeType::AgentAgent)
    }

    /// `(agent, road node)` pairs; road indices are local to the road graph.
    pub fn agent_road_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges_of(EdgeType::RoadAgent)
            .map(move |(s, d)| (d, s - self.n_agents))
    }

    fn edges_of(&self, t: EdgeType) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .zip(&self.edge_type)
            .filter(move |(_, et)| **et == t)
            .map(|(e, _)| *e)
    }
}

/// Connects every agent pair in both directions and every road node within
/// [`ATTACH_RADIUS`] of an agent's position to that agent (road → agent).
pub fn attach_agents(road: &RoadGraph, sample: &SceneSample) -> SceneGraph {
    attach_agents_with_radius(road, sample, ATTACH_RADIUS)
}

pub fn attach_agents_with_radius(road: &RoadGraph, sample: &SceneSample, radius: f64) -> SceneGraph {
    let a = sample.n_agents();
    let t = sample.t_h() - 1;
    let mut agent_feat = Tensor::zeros(&[a, AGENT_FEATURES]);
    for i in 0..a {
        for k in 0..AGENT_FEATURES {
            agent_feat.set(&[i, k], sample.history.get(&[i, t, k]));
        }
    }
    let mut node_pos: Vec<[f64; 2]> = (0..a).map(|i| sample.current_pos(i)).collect();
    node_pos.extend(
        road.node_pos
            .iter()
            .map(|p| [p[0] - sample.origin[0], p[1] - sample.origin[1]]),
    );

    let mut edges = Vec::new();
    let mut edge_type = Vec::new();
    for &(s, d) in &road.edges {
        edges.push((a + s, a + d));
        edge_type.push(EdgeType::RoadRoad);
    }
    for i in 0..a {
        for j in 0..a {
            if i != j {
                edges.push((i, j));
                edge_type.push(EdgeType::AgentAgent);
            }
        }
    }
    for i in 0..a {
        for v in 0..road.n_nodes() {
            let (pa, pv) = (node_pos[i], node_pos[a + v]);
            if (pa[0] - pv[0]).hypot(pa[1] - pv[1]) <= radius {
                edges.push((a + v, i));
                edge_type.push(EdgeType::RoadAgent);
            }
        }
    }
    let mut edge_feat = Tensor::zeros(&[edges.len(), EDGE_FEATURES]);
    for (e, (&(s, d), et)) in edges.iter().zip(&edge_type).enumerate() {
        let slot = match et {
            EdgeType::RoadRoad => 0,
            EdgeType::AgentAgent => 1,
            EdgeType::RoadAgent => 2,
        };
        edge_feat.set(&[e, slot], 1.0);
        edge_feat.set(&[e, 3], node_pos[d][0] - node_pos[s][0]);
        edge_feat.set(&[e, 4], node_pos[d][1] - node_pos[s][1]);
    }
    SceneGraph {
        n_agents: a,
        n_road: road.n_nodes(),
        agent_feat,
        road_feat: road.node_features(sample.origin),
        node_pos,
        edges,
        edge_type,
        edge_feat,
    }
}
