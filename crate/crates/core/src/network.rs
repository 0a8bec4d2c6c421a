//! Static road-network model: roads, lanes, heterogeneous intersections,
//! traffic movements and signal phase tables.
//!
//! A network is loaded from a single JSON document with four sections
//! (`nodes`, `roads`, `lanes`, `intersections`). Identifiers follow the
//! `road#<k>_<lane>` convention; the reverse direction of a bidirectional
//! link carries a leading `-` (`-road#3_2`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default length of generated lanes, in meters.
pub const DEFAULT_LANE_LENGTH: f64 = 300.0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("failed to parse network document: {0}")]
    Parse(String),
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> NetworkError {
    NetworkError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Cross,
    Tee,
    Wye,
    Roundabout,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cross, Shape::Tee, Shape::Wye, Shape::Roundabout];

    /// Number of approach arms a node of this shape has.
    pub fn arms(self) -> usize {
        match self {
            Shape::Cross | Shape::Roundabout => 4,
            Shape::Tee | Shape::Wye => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cross => "cross",
            Shape::Tee => "tee",
            Shape::Wye => "wye",
            Shape::Roundabout => "roundabout",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    Through,
    Left,
    Right,
    UTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Intersection,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub id: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    pub road: String,
    pub index: u32,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrafficMovement {
    pub from: String,
    pub to: String,
    pub turn: Turn,
}

/// A phase lists the movements it grants, as `[from, to]` lane pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalPhase {
    pub index: usize,
    pub movements: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: String,
    pub shape: Shape,
    pub upstream_lanes: Vec<String>,
    pub downstream_lanes: Vec<String>,
    pub movements: Vec<TrafficMovement>,
    pub phases: Vec<SignalPhase>,
}

impl Intersection {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    /// Canonical layout signature: shape, sorted per-approach incoming lane
    /// counts and phase count. Intersections with equal signatures share an
    /// experience buffer.
    pub fn type_id(&self, net: &RoadNetwork) -> String {
        let mut counts: Vec<usize> = self
            .approaches(net)
            .iter()
            .map(|(_, lanes)| lanes.len())
            .collect();
        counts.sort_unstable();
        let counts: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        format!("{}|{}|J{}", self.shape, counts.join(","), self.phases.len())
    }

    /// Incoming roads in order of first appearance among the upstream lanes,
    /// each with its lanes sorted by lane index.
    pub fn approaches(&self, net: &RoadNetwork) -> Vec<(String, Vec<String>)> {
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for lane_id in &self.upstream_lanes {
            let road = net
                .lane(lane_id)
                .map(|l| l.road.clone())
                .unwrap_or_default();
            match out.iter_mut().find(|(r, _)| *r == road) {
                Some((_, lanes)) => lanes.push(lane_id.clone()),
                None => out.push((road, vec![lane_id.clone()])),
            }
        }
        for (_, lanes) in &mut out {
            lanes.sort_by_key(|l| net.lane(l).map(|l| l.index).unwrap_or(0));
        }
        out
    }

    /// Upstream lanes of a phase, in order of first appearance.
    pub fn phase_lanes(&self, phase_index: usize) -> Vec<&str> {
        let mut lanes: Vec<&str> = Vec::new();
        if let Some(phase) = self.phases.get(phase_index.wrapping_sub(1)) {
            for (from, _) in &phase.movements {
                if !lanes.contains(&from.as_str()) {
                    lanes.push(from);
                }
            }
        }
        lanes
    }

    pub fn phase_allows(&self, phase_index: usize, from: &str, to: &str) -> bool {
        self.phases
            .get(phase_index.wrapping_sub(1))
            .is_some_and(|p| p.movements.iter().any(|(f, t)| f == from && t == to))
    }
}

/// Free-standing function form of [`Intersection::type_id`].
pub fn intersection_type_id(net: &RoadNetwork, intersection: &Intersection) -> String {
    intersection.type_id(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkDocument {
    nodes: Vec<Node>,
    roads: Vec<Road>,
    lanes: Vec<Lane>,
    intersections: Vec<Intersection>,
}

/// Validated, immutable road network.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    roads: Vec<Road>,
    lanes: Vec<Lane>,
    intersections: Vec<Intersection>,
    lane_index: HashMap<String, usize>,
    road_index: HashMap<String, usize>,
    intersection_index: HashMap<String, usize>,
}

impl RoadNetwork {
    pub fn from_parts(
        nodes: Vec<Node>,
        roads: Vec<Road>,
        lanes: Vec<Lane>,
        intersections: Vec<Intersection>,
    ) -> Result<Self, NetworkError> {
        let lane_index = lanes
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), i))
            .collect();
        let road_index = roads
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let intersection_index = intersections
            .iter()
            .enumerate()
            .map(|(i, x)| (x.id.clone(), i))
            .collect();
        let net = RoadNetwork {
            nodes,
            roads,
            lanes,
            intersections,
            lane_index,
            road_index,
            intersection_index,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let doc: NetworkDocument =
            serde_json::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))?;
        Self::from_parts(doc.nodes, doc.roads, doc.lanes, doc.intersections)
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let doc = NetworkDocument {
            nodes: self.nodes.clone(),
            roads: self.roads.clone(),
            lanes: self.lanes.clone(),
            intersections: self.intersections.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("network serializes")
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn roads(&self) -> &[Road] {
        &self.roads
    }
    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }
    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.lane_index.get(id).map(|&i| &self.lanes[i])
    }
    pub fn lane_idx(&self, id: &str) -> Option<usize> {
        self.lane_index.get(id).copied()
    }
    pub fn road(&self, id: &str) -> Option<&Road> {
        self.road_index.get(id).map(|&i| &self.roads[i])
    }
    pub fn intersection(&self, id: &str) -> Option<&Intersection> {
        self.intersection_index
            .get(id)
            .map(|&i| &self.intersections[i])
    }
    pub fn intersection_idx(&self, id: &str) -> Option<usize> {
        self.intersection_index.get(id).copied()
    }

    pub fn boundary_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Boundary)
    }

    /// Intersection whose stop line terminates `lane`, if any.
    pub fn head_intersection(&self, lane: &str) -> Option<usize> {
        let road = self.road(&self.lane(lane)?.road)?;
        self.intersection_idx(&road.to)
    }

    /// Distinct type signatures in the network (defines N).
    pub fn type_ids(&self) -> BTreeSet<String> {
        self.intersections.iter().map(|x| x.type_id(self)).collect()
    }

    fn validate(&self) -> Result<(), NetworkError> {
        if self.intersections.is_empty() {
            return Err(invalid("network has no intersections"));
        }
        let mut node_kinds: HashMap<&str, NodeKind> = HashMap::new();
        for n in &self.nodes {
            if node_kinds.insert(&n.id, n.kind).is_some() {
                return Err(invalid(format!("duplicate node id {}", n.id)));
            }
        }
        if self.road_index.len() != self.roads.len() {
            return Err(invalid("duplicate road id"));
        }
        if self.lane_index.len() != self.lanes.len() {
            return Err(invalid("duplicate lane id"));
        }
        if self.intersection_index.len() != self.intersections.len() {
            return Err(invalid("duplicate intersection id"));
        }
        for r in &self.roads {
            for end in [&r.from, &r.to] {
                if !node_kinds.contains_key(end.as_str()) {
                    return Err(invalid(format!(
                        "road {} references unknown node {end}",
                        r.id
                    )));
                }
            }
            if r.from == r.to {
                return Err(invalid(format!("road {} is a self-loop", r.id)));
            }
        }
        for l in &self.lanes {
            if self.road(&l.road).is_none() {
                return Err(invalid(format!(
                    "lane {} references unknown road {}",
                    l.id, l.road
                )));
            }
            if !(l.length.is_finite() && l.length > 0.0) {
                return Err(invalid(format!("lane {} has non-positive length", l.id)));
            }
            if l.index < 1 {
                return Err(invalid(format!("lane {} has index < 1", l.id)));
            }
        }
        for x in &self.intersections {
            if node_kinds.get(x.id.as_str()) != Some(&NodeKind::Intersection) {
                return Err(invalid(format!(
                    "intersection {} has no matching intersection node",
                    x.id
                )));
            }
            self.validate_intersection(x)?;
        }
        for n in &self.nodes {
            if n.kind == NodeKind::Intersection && self.intersection(&n.id).is_none() {
                return Err(invalid(format!(
                    "intersection node {} has no definition",
                    n.id
                )));
            }
        }
        Ok(())
    }

    fn validate_intersection(&self, x: &Intersection) -> Result<(), NetworkError> {
        let id = &x.id;
        let up: BTreeSet<&str> = x.upstream_lanes.iter().map(String::as_str).collect();
        let down: BTreeSet<&str> = x.downstream_lanes.iter().map(String::as_str).collect();
        if up.len() != x.upstream_lanes.len() || down.len() != x.downstream_lanes.len() {
            return Err(invalid(format!("intersection {id} lists a lane twice")));
        }
        if let Some(l) = up.intersection(&down).next() {
            return Err(invalid(format!(
                "intersection {id}: lane {l} is both upstream and downstream"
            )));
        }
        for l in &up {
            let lane = self
                .lane(l)
                .ok_or_else(|| invalid(format!("intersection {id}: unknown upstream lane {l}")))?;
            if self.road(&lane.road).map(|r| r.to.as_str()) != Some(id) {
                return Err(invalid(format!(
                    "intersection {id}: upstream lane {l} does not end here"
                )));
            }
        }
        for l in &down {
            let lane = self.lane(l).ok_or_else(|| {
                invalid(format!("intersection {id}: unknown downstream lane {l}"))
            })?;
            if self.road(&lane.road).map(|r| r.from.as_str()) != Some(id) {
                return Err(invalid(format!(
                    "intersection {id}: downstream lane {l} does not start here"
                )));
            }
        }
        let mut declared: BTreeSet<(&str, &str)> = BTreeSet::new();
        for m in &x.movements {
            if !up.contains(m.from.as_str()) {
                return Err(invalid(format!(
                    "intersection {id}: movement source {} is not an upstream lane",
                    m.from
                )));
            }
            if !down.contains(m.to.as_str()) {
                return Err(invalid(format!(
                    "intersection {id}: movement target {} is not a downstream lane",
                    m.to
                )));
            }
            if !declared.insert((&m.from, &m.to)) {
                return Err(invalid(format!(
                    "intersection {id}: duplicate movement {} -> {}",
                    m.from, m.to
                )));
            }
        }
        if x.phases.len() < 2 {
            return Err(invalid(format!(
                "intersection {id} has fewer than 2 phases"
            )));
        }
        let mut covered: BTreeSet<(&str, &str)> = BTreeSet::new();
        for (k, phase) in x.phases.iter().enumerate() {
            if phase.index != k + 1 {
                return Err(invalid(format!(
                    "intersection {id}: phase indices must be contiguous from 1 (found {} at position {})",
                    phase.index,
                    k + 1
                )));
            }
            if phase.movements.is_empty() {
                return Err(invalid(format!(
                    "intersection {id}: phase {} is empty",
                    phase.index
                )));
            }
            for (from, to) in &phase.movements {
                if !declared.contains(&(from.as_str(), to.as_str())) {
                    return Err(invalid(format!(
                        "intersection {id}: phase {} references undeclared movement {from} -> {to}",
                        phase.index
                    )));
                }
                covered.insert((from, to));
            }
        }
        if let Some((f, t)) = declared.difference(&covered).next() {
            return Err(invalid(format!(
                "intersection {id}: movement {f} -> {t} is not served by any phase"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Builder and built-in templates
// ---------------------------------------------------------------------------

/// Phase groups for a shape: each group lists `(arm, lane_class)` pairs,
/// where lane class `Inner` is lane 1 and `Outer` is every other lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LaneClass {
    Inner,
    Outer,
    All,
}

fn turn_target(shape: Shape, arm: usize, turn: Turn) -> Option<usize> {
    let n = shape.arms();
    let target = match turn {
        Turn::UTurn => arm,
        Turn::Left => (arm + 1) % n,
        Turn::Through => (arm + 2) % n,
        Turn::Right => (arm + n - 1) % n,
    };
    match shape {
        // Tee: arm 3 of the underlying cross is missing.
        Shape::Tee => {
            let cross_target = match turn {
                Turn::UTurn => arm,
                Turn::Left => (arm + 1) % 4,
                Turn::Through => (arm + 2) % 4,
                Turn::Right => (arm + 3) % 4,
            };
            (cross_target != 3).then_some(cross_target)
        }
        Shape::Wye => (turn != Turn::Through).then_some(target),
        Shape::Cross | Shape::Roundabout => Some(target),
    }
}

/// Turns carried by a lane, in listing order. Lane 1 carries left and
/// U-turns; the outermost lane carries through and right; middle lanes
/// carry through only. A single lane carries everything.
fn lane_turns(lane_index: u32, lanes: u32) -> Vec<Turn> {
    if lanes == 1 {
        vec![Turn::Through, Turn::Right, Turn::Left, Turn::UTurn]
    } else if lane_index == 1 {
        vec![Turn::Left, Turn::UTurn]
    } else if lane_index == lanes {
        vec![Turn::Through, Turn::Right]
    } else {
        vec![Turn::Through]
    }
}

fn phase_groups(shape: Shape, lanes: u32) -> Vec<Vec<(usize, LaneClass)>> {
    use LaneClass::*;
    match (shape, lanes) {
        (Shape::Cross, 1) => vec![vec![(0, All), (2, All)], vec![(1, All), (3, All)]],
        (Shape::Cross, _) => vec![
            vec![(0, Outer), (2, Outer)],
            vec![(0, Inner), (2, Inner)],
            vec![(1, Outer), (3, Outer)],
            vec![(1, Inner), (3, Inner)],
        ],
        (Shape::Tee, 1) => vec![vec![(0, All), (2, All)], vec![(1, All)]],
        (Shape::Tee, _) => vec![
            vec![(0, Outer), (2, Outer)],
            vec![(0, Inner), (2, Inner)],
            vec![(1, All)],
        ],
        (Shape::Wye, _) => vec![vec![(0, All)], vec![(1, All)], vec![(2, All)]],
        (Shape::Roundabout, _) => vec![vec![(0, All), (2, All)], vec![(1, All), (3, All)]],
    }
}

/// Incrementally assembles a network from intersections with numbered arms.
/// Arms are linked pairwise; every arm left unlinked receives a boundary stub.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    lanes_per_approach: u32,
    lane_length: f64,
    nodes: Vec<(String, Shape)>,
    links: Vec<((usize, usize), (usize, usize))>,
}

impl NetworkBuilder {
    pub fn new(lanes_per_approach: u32) -> Self {
        NetworkBuilder {
            lanes_per_approach: lanes_per_approach.max(1),
            lane_length: DEFAULT_LANE_LENGTH,
            nodes: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn lane_length(mut self, meters: f64) -> Self {
        self.lane_length = meters;
        self
    }

    pub fn add_intersection(&mut self, id: impl Into<String>, shape: Shape) -> usize {
        self.nodes.push((id.into(), shape));
        self.nodes.len() - 1
    }

    /// Connects arm `arm_a` of node `a` with arm `arm_b` of node `b`.
    pub fn link(&mut self, a: usize, arm_a: usize, b: usize, arm_b: usize) {
        self.links.push(((a, arm_a), (b, arm_b)));
    }

    pub fn build(&self) -> Result<RoadNetwork, NetworkError> {
        let lanes_n = self.lanes_per_approach;
        let mut arm_peer: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for &(a, b) in &self.links {
            for (x, y) in [(a, b), (b, a)] {
                if x.0 >= self.nodes.len() || x.1 >= self.nodes[x.0].1.arms() {
                    return Err(invalid(format!("link references missing arm {x:?}")));
                }
                if arm_peer.insert(x, y).is_some() {
                    return Err(invalid(format!("arm {x:?} linked twice")));
                }
            }
        }

        let mut nodes: Vec<Node> = self
            .nodes
            .iter()
            .map(|(id, _)| Node {
                id: id.clone(),
                kind: NodeKind::Intersection,
            })
            .collect();
        let mut roads = Vec::new();
        let mut lanes = Vec::new();
        // (node, arm) -> (incoming road id, outgoing road id)
        let mut arm_roads: BTreeMap<(usize, usize), (String, String)> = BTreeMap::new();
        let mut next_road = 1usize;
        let mut boundary = 1usize;
        let add_road =
            |roads: &mut Vec<Road>, lanes: &mut Vec<Lane>, id: String, from: &str, to: &str| {
                for k in 1..=lanes_n {
                    lanes.push(Lane {
                        id: format!("{id}_{k}"),
                        road: id.clone(),
                        index: k,
                        length: self.lane_length,
                    });
                }
                roads.push(Road {
                    id,
                    from: from.to_string(),
                    to: to.to_string(),
                });
            };

        for (n, (node_id, shape)) in self.nodes.iter().enumerate() {
            for arm in 0..shape.arms() {
                if arm_roads.contains_key(&(n, arm)) {
                    continue;
                }
                let k = next_road;
                next_road += 1;
                let fwd = format!("road#{k}");
                let rev = format!("-road#{k}");
                match arm_peer.get(&(n, arm)) {
                    Some(&(m, arm_m)) => {
                        let peer_id = self.nodes[m].0.clone();
                        // road#k runs from the peer into this node.
                        add_road(&mut roads, &mut lanes, fwd.clone(), &peer_id, node_id);
                        add_road(&mut roads, &mut lanes, rev.clone(), node_id, &peer_id);
                        arm_roads.insert((n, arm), (fwd.clone(), rev.clone()));
                        arm_roads.insert((m, arm_m), (rev, fwd));
                    }
                    None => {
                        let b = format!("b{boundary}");
                        boundary += 1;
                        nodes.push(Node {
                            id: b.clone(),
                            kind: NodeKind::Boundary,
                        });
                        add_road(&mut roads, &mut lanes, fwd.clone(), &b, node_id);
                        add_road(&mut roads, &mut lanes, rev.clone(), node_id, &b);
                        arm_roads.insert((n, arm), (fwd, rev));
                    }
                }
            }
        }

        let mut intersections = Vec::new();
        for (n, (node_id, shape)) in self.nodes.iter().enumerate() {
            let arms = shape.arms();
            let incoming: Vec<&String> = (0..arms).map(|a| &arm_roads[&(n, a)].0).collect();
            let outgoing: Vec<&String> = (0..arms).map(|a| &arm_roads[&(n, a)].1).collect();
            let mut upstream = Vec::new();
            let mut downstream = Vec::new();
            for a in 0..arms {
                for k in 1..=lanes_n {
                    upstream.push(format!("{}_{k}", incoming[a]));
                }
            }
            for a in 0..arms {
                for k in 1..=lanes_n {
                    downstream.push(format!("{}_{k}", outgoing[a]));
                }
            }
            let mut movements = Vec::new();
            // (arm, lane) -> movement pairs for phase construction
            let mut lane_moves: BTreeMap<(usize, u32), Vec<(String, String)>> = BTreeMap::new();
            for a in 0..arms {
                for k in 1..=lanes_n {
                    let from = format!("{}_{k}", incoming[a]);
                    let mut turns: Vec<(Turn, usize)> = lane_turns(k, lanes_n)
                        .into_iter()
                        .filter_map(|turn| turn_target(*shape, a, turn).map(|t| (turn, t)))
                        .collect();
                    if turns.is_empty() {
                        // e.g. a wye middle lane: no through exit exists
                        turns = [Turn::Left, Turn::Right]
                            .into_iter()
                            .filter_map(|turn| turn_target(*shape, a, turn).map(|t| (turn, t)))
                            .take(1)
                            .collect();
                    }
                    for (turn, t) in turns {
                        {
                            let to = format!("{}_{k}", outgoing[t]);
                            lane_moves
                                .entry((a, k))
                                .or_default()
                                .push((from.clone(), to.clone()));
                            movements.push(TrafficMovement {
                                from: from.clone(),
                                to,
                                turn,
                            });
                        }
                    }
                }
            }
            let mut phases = Vec::new();
            for group in phase_groups(*shape, lanes_n) {
                let mut pm = Vec::new();
                for (arm, class) in group {
                    for k in 1..=lanes_n {
                        let take = match class {
                            LaneClass::All => true,
                            LaneClass::Inner => k == 1,
                            LaneClass::Outer => k > 1,
                        };
                        if take {
                            if let Some(ms) = lane_moves.get(&(arm, k)) {
                                pm.extend(ms.iter().cloned());
                            }
                        }
                    }
                }
                if !pm.is_empty() {
                    phases.push(SignalPhase {
                        index: phases.len() + 1,
                        movements: pm,
                    });
                }
            }
            intersections.push(Intersection {
                id: node_id.clone(),
                shape: *shape,
                upstream_lanes: upstream,
                downstream_lanes: downstream,
                movements,
                phases,
            });
        }
        RoadNetwork::from_parts(nodes, roads, lanes, intersections)
    }
}

/// One parameterized intersection layout from the built-in catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntersectionTemplate {
    pub shape: Shape,
    pub lanes_per_approach: u32,
}

impl IntersectionTemplate {
    pub fn new(shape: Shape, lanes_per_approach: u32) -> Self {
        IntersectionTemplate {
            shape,
            lanes_per_approach,
        }
    }

    /// Single-intersection network with one boundary node per arm.
    pub fn network(&self) -> Result<RoadNetwork, NetworkError> {
        let mut b = NetworkBuilder::new(self.lanes_per_approach);
        b.add_intersection("i1", self.shape);
        b.build()
    }

    pub fn intersection(&self) -> Result<Intersection, NetworkError> {
        Ok(self.network()?.intersections()[0].clone())
    }
}

/// One template per shape, two incoming lanes per approach.
pub fn builtin_templates() -> Vec<IntersectionTemplate> {
    Shape::ALL
        .iter()
        .map(|&s| IntersectionTemplate::new(s, 2))
        .collect()
}

/// 17-intersection heterogeneous network: a 4x4 grid (10 crosses, 4 tees,
/// 2 wyes) plus one roundabout hanging off the east side.
pub fn jinan_like() -> RoadNetwork {
    // Arm directions per shape. Cross/roundabout arms are W, N, E, S.
    const W: u8 = 0;
    const N: u8 = 1;
    const E: u8 = 2;
    const S: u8 = 3;
    let mut b = NetworkBuilder::new(2);
    let mut grid = [[0usize; 4]; 4];
    let mut dirs: Vec<Vec<u8>> = Vec::new();
    for (r, row) in grid.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            let (shape, d): (Shape, Vec<u8>) = match (r, c) {
                (0, 1) | (0, 2) => (Shape::Tee, vec![W, S, E]),
                (3, 1) | (3, 2) => (Shape::Tee, vec![E, N, W]),
                (1, 0) | (2, 0) => (Shape::Wye, vec![N, E, S]),
                _ => (Shape::Cross, vec![W, N, E, S]),
            };
            *slot = b.add_intersection(format!("i{}_{}", r + 1, c + 1), shape);
            dirs.push(d);
        }
    }
    let arm_of = |dirs: &Vec<Vec<u8>>, node: usize, d: u8| dirs[node].iter().position(|&x| x == d);
    for r in 0..4 {
        for c in 0..4 {
            let a = grid[r][c];
            if c + 1 < 4 {
                let bn = grid[r][c + 1];
                if let (Some(x), Some(y)) = (arm_of(&dirs, a, E), arm_of(&dirs, bn, W)) {
                    b.link(a, x, bn, y);
                }
            }
            if r + 1 < 4 {
                let bn = grid[r + 1][c];
                if let (Some(x), Some(y)) = (arm_of(&dirs, a, S), arm_of(&dirs, bn, N)) {
                    b.link(a, x, bn, y);
                }
            }
        }
    }
    let ra = b.add_intersection("r1", Shape::Roundabout);
    let east = grid[1][3];
    b.link(east, 2, ra, 0);
    b.build().expect("built-in network is valid")
}

/// Resolves `builtin:<name>` network references.
pub fn builtin_network(name: &str) -> Option<RoadNetwork> {
    let shape = |s| IntersectionTemplate::new(s, 2).network().ok();
    match name {
        "cross" => shape(Shape::Cross),
        "tee" => shape(Shape::Tee),
        "wye" => shape(Shape::Wye),
        "roundabout" => shape(Shape::Roundabout),
        "jinan" | "jinan17" => Some(jinan_like()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_two_lanes_matches_reference_layout() {
        let x = IntersectionTemplate::new(Shape::Cross, 2)
            .intersection()
            .unwrap();
        assert_eq!(x.movements.len(), 16);
        assert_eq!(x.phases.len(), 4);
        let p1: Vec<String> = x.phases[0]
            .movements
            .iter()
            .map(|(f, t)| format!("{f} -> {t}"))
            .collect();
        assert_eq!(
            p1,
            [
                "road#1_2 -> -road#3_2",
                "road#1_2 -> -road#4_2",
                "road#3_2 -> -road#1_2",
                "road#3_2 -> -road#2_2"
            ]
        );
        let p4: Vec<String> = x.phases[3]
            .movements
            .iter()
            .map(|(f, t)| format!("{f} -> {t}"))
            .collect();
        assert_eq!(
            p4,
            [
                "road#2_1 -> -road#3_1",
                "road#2_1 -> -road#2_1",
                "road#4_1 -> -road#1_1",
                "road#4_1 -> -road#4_1"
            ]
        );
    }

    #[test]
    fn every_template_validates() {
        for lanes in 1..=3 {
            for s in Shape::ALL {
                let net = IntersectionTemplate::new(s, lanes).network().unwrap();
                let x = &net.intersections()[0];
                assert!(x.phases.len() >= 2, "{s} {lanes}");
                assert_eq!(x.approaches(&net).len(), s.arms());
            }
        }
    }

    #[test]
    fn tee_has_three_approaches() {
        let net = IntersectionTemplate::new(Shape::Tee, 2).network().unwrap();
        let x = &net.intersections()[0];
        assert_eq!(x.approaches(&net).len(), 3);
        assert_eq!(x.phases.len(), 3);
    }

    #[test]
    fn undeclared_phase_movement_is_rejected() {
        let net = IntersectionTemplate::new(Shape::Cross, 2)
            .network()
            .unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        v["intersections"][0]["phases"][0]["movements"][0] =
            serde_json::json!(["road#1_2", "-road#1_1"]);
        let err = RoadNetwork::from_json(&v.to_string()).unwrap_err();
        assert!(
            matches!(err, NetworkError::Validation(ref m) if m.contains("undeclared")),
            "{err}"
        );
    }

    #[test]
    fn uncovered_movement_is_rejected() {
        let net = IntersectionTemplate::new(Shape::Cross, 2)
            .network()
            .unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        let moves = v["intersections"][0]["phases"][3]["movements"]
            .as_array_mut()
            .unwrap();
        moves.pop();
        let err = RoadNetwork::from_json(&v.to_string()).unwrap_err();
        assert!(
            matches!(err, NetworkError::Validation(ref m) if m.contains("not served")),
            "{err}"
        );
    }

    #[test]
    fn empty_phase_and_single_phase_are_rejected() {
        let net = IntersectionTemplate::new(Shape::Cross, 2)
            .network()
            .unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        v["intersections"][0]["phases"][1]["movements"] = serde_json::json!([]);
        assert!(RoadNetwork::from_json(&v.to_string()).is_err());

        let net = IntersectionTemplate::new(Shape::Roundabout, 1)
            .network()
            .unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        let phases = v["intersections"][0]["phases"].as_array_mut().unwrap();
        let second = phases.pop().unwrap();
        let extra = second["movements"].as_array().unwrap().clone();
        phases[0]["movements"].as_array_mut().unwrap().extend(extra);
        let err = RoadNetwork::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("fewer than 2"));
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(
            RoadNetwork::from_json("{nodes: ["),
            Err(NetworkError::Parse(_))
        ));
    }

    #[test]
    fn dangling_lane_reference_is_rejected() {
        let net = IntersectionTemplate::new(Shape::Wye, 2).network().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        v["lanes"][0]["road"] = serde_json::json!("road#99");
        assert!(matches!(
            RoadNetwork::from_json(&v.to_string()),
            Err(NetworkError::Validation(_))
        ));
    }

    #[test]
    fn jinan_like_has_seventeen_intersections_and_four_types() {
        let net = jinan_like();
        assert_eq!(net.intersections().len(), 17);
        let mut shapes: BTreeMap<Shape, usize> = BTreeMap::new();
        for x in net.intersections() {
            *shapes.entry(x.shape).or_default() += 1;
        }
        assert_eq!(shapes[&Shape::Cross], 10);
        assert_eq!(shapes[&Shape::Tee], 4);
        assert_eq!(shapes[&Shape::Wye], 2);
        assert_eq!(shapes[&Shape::Roundabout], 1);
        assert_eq!(net.type_ids().len(), 4);
    }

    #[test]
    fn signatures_follow_layout() {
        let a = IntersectionTemplate::new(Shape::Cross, 2)
            .network()
            .unwrap();
        let b = IntersectionTemplate::new(Shape::Cross, 2)
            .network()
            .unwrap();
        let c = IntersectionTemplate::new(Shape::Tee, 2).network().unwrap();
        let sig = |n: &RoadNetwork| n.intersections()[0].type_id(n);
        assert_eq!(sig(&a), sig(&b));
        assert_eq!(sig(&a), "cross|2,2,2,2|J4");
        assert_ne!(sig(&a), sig(&c));
    }
}
