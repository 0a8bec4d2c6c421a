//! Type-agnostic, lane-centric intersection observations and the prompt
//! texts rendered from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::network::{RoadNetwork, Shape};
use crate::rerag::GuidanceItem;
use crate::sim::{EmergencyVehicleState, Simulator};

const REGULAR_TEMPLATE: &str = include_str!("../assets/regular_prompt.txt");
const EMERGENCY_TEMPLATE: &str = include_str!("../assets/emergency_prompt.txt");
pub(crate) const QUERY_TEMPLATE: &str = include_str!("../assets/query_prompt.txt");

/// Placeholder substitution for `{{name}}` slots. Every slot in the
/// template must be bound.
pub fn render_template(template: &str, bindings: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 512);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").expect("unterminated template slot");
        let key = &after[..end];
        let value = bindings
            .iter()
            .find(|(k, _)| *k == key)
            .unwrap_or_else(|| panic!("unbound template slot {key}"))
            .1;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneCounts {
    pub queued: usize,
    pub far: usize,
    pub mid: usize,
    pub near: usize,
}

impl LaneCounts {
    fn add(&mut self, o: &LaneCounts) {
        self.queued += o.queued;
        self.far += o.far;
        self.mid += o.mid;
        self.near += o.near;
    }

    pub fn approaching(&self) -> usize {
        self.far + self.mid + self.near
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneObservation {
    pub lane: String,
    #[serde(flatten)]
    pub counts: LaneCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseObservation {
    pub index: usize,
    pub movements: Vec<(String, String)>,
    pub lanes: Vec<LaneObservation>,
}

impl PhaseObservation {
    pub fn total(&self) -> LaneCounts {
        let mut t = LaneCounts::default();
        for l in &self.lanes {
            t.add(&l.counts);
        }
        t
    }

    pub fn serves_lane(&self, lane: &str) -> bool {
        self.movements.iter().any(|(f, _)| f == lane)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approach {
    pub road: String,
    pub incoming_lanes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficObservation {
    pub intersection: String,
    pub shape: Shape,
    pub approaches: Vec<Approach>,
    pub movement_count: usize,
    pub phases: Vec<PhaseObservation>,
}

impl TrafficObservation {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn lane_counts(&self, lane: &str) -> Option<LaneCounts> {
        self.phases
            .iter()
            .flat_map(|p| &p.lanes)
            .find(|l| l.lane == lane)
            .map(|l| l.counts)
    }

    pub fn is_upstream_lane(&self, lane: &str) -> bool {
        self.phases.iter().any(|p| p.serves_lane(lane))
    }

    /// Textual four-part representation shared by all prompt kinds.
    pub fn representation(&self) -> String {
        let mut s = String::new();
        let roads: Vec<&str> = self.approaches.iter().map(|a| a.road.as_str()).collect();
        let counts: Vec<String> = self
            .approaches
            .iter()
            .map(|a| a.incoming_lanes.to_string())
            .collect();
        let _ = writeln!(
            s,
            "Intersection Topology: This is a {}. There are {} bidirectional roads connected to this intersection (ID: {}), with {} incoming lanes respectively. A total of {} traffic movements are managed by {} signal phases in this intersection.",
            shape_phrase(self.shape),
            self.approaches.len(),
            roads.join(", "),
            counts.join(", "),
            self.movement_count,
            self.phases.len()
        );
        s.push_str(
            "Action Space (traffic movements allowed by each phase, upstream lane → downstream lane):\n",
        );
        for p in &self.phases {
            let moves: Vec<String> = p
                .movements
                .iter()
                .map(|(f, t)| format!("{f} → {t}"))
                .collect();
            let _ = writeln!(s, "Phase {}: {}", p.index, moves.join("; "));
        }
        s.push_str("Queuing and Approaching Vehicles: The number of queuing vehicles (QV) is counted on upstream lanes controlled by each signal phase. Each lane is divided into three equal-length segments from the lane start to the stop line, representing the far, middle, and near sections to the stop line. The count of approaching vehicles (AV) in each segment is recorded accordingly as far/mid/near.\n");
        for p in &self.phases {
            let _ = writeln!(s, "Phase {}:", p.index);
            for l in &p.lanes {
                let _ = writeln!(s, "  {}: {}", l.lane, counts_text(&l.counts));
            }
            let _ = writeln!(s, "  Total: {}", counts_text(&p.total()));
        }
        // drop the trailing newline; templates place the block on its own line
        s.pop();
        s
    }
}

fn counts_text(c: &LaneCounts) -> String {
    format!("QV={}; AV={}/{}/{}", c.queued, c.far, c.mid, c.near)
}

fn shape_phrase(shape: Shape) -> &'static str {
    match shape {
        Shape::Cross => "four-way cross intersection",
        Shape::Tee => "three-way T-shaped intersection",
        Shape::Wye => "three-way Y-shaped intersection",
        Shape::Roundabout => "signalized four-arm roundabout",
    }
}

/// Counts for one lane from `(distance_to_stop_line, speed)` pairs. Stopped
/// vehicles (`speed < v_stop`) are queued; vehicles faster than `v_stop` are
/// approaching and bucketed by thirds of the lane, `near` being the third
/// closest to the stop line.
pub fn lane_counts(
    vehicles: impl IntoIterator<Item = (f64, f64)>,
    lane_length: f64,
    v_stop: f64,
) -> LaneCounts {
    let mut c = LaneCounts::default();
    for (d, v) in vehicles {
        if v < v_stop {
            c.queued += 1;
        } else if v > v_stop {
            if d < lane_length / 3.0 {
                c.near += 1;
            } else if d < 2.0 * lane_length / 3.0 {
                c.mid += 1;
            } else {
                c.far += 1;
            }
        }
    }
    c
}

/// Observation skeleton with all counts zero.
pub fn empty_observation(net: &RoadNetwork, intersection: usize) -> TrafficObservation {
    build_observation(net, intersection, |_| LaneCounts::default())
}

fn build_observation(
    net: &RoadNetwork,
    intersection: usize,
    mut counts: impl FnMut(&str) -> LaneCounts,
) -> TrafficObservation {
    let x = &net.intersections()[intersection];
    let approaches = x
        .approaches(net)
        .into_iter()
        .map(|(road, lanes)| Approach {
            road,
            incoming_lanes: lanes.len(),
        })
        .collect();
    let phases = x
        .phases
        .iter()
        .map(|p| PhaseObservation {
            index: p.index,
            movements: p.movements.clone(),
            lanes: x
                .phase_lanes(p.index)
                .into_iter()
                .map(|l| LaneObservation {
                    lane: l.to_string(),
                    counts: counts(l),
                })
                .collect(),
        })
        .collect();
    TrafficObservation {
        intersection: x.id.clone(),
        shape: x.shape,
        approaches,
        movement_count: x.movements.len(),
        phases,
    }
}

/// Observation of intersection `intersection` in the current simulator state.
pub fn observe(sim: &Simulator, intersection: usize) -> TrafficObservation {
    let net = sim.network();
    let v_stop = sim.config().v_stop;
    build_observation(net, intersection, |lane_id| {
        let Some(idx) = net.lane_idx(lane_id) else {
            return LaneCounts::default();
        };
        let len = net.lanes()[idx].length;
        lane_counts(
            sim.lane_vehicles(idx).map(|v| (v.distance, v.speed)),
            len,
            v_stop,
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Regular,
    Emergency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    pub kind: PromptKind,
}

pub fn render_regular_prompt(obs: &TrafficObservation) -> PromptBundle {
    let rep = obs.representation();
    PromptBundle {
        text: render_template(REGULAR_TEMPLATE, &[("representation", &rep)]),
        kind: PromptKind::Regular,
    }
}

/// Road-level rendering of a lane route, e.g. `road#1 → -road#3`.
pub fn route_roads(route: &[String]) -> String {
    let mut roads: Vec<&str> = Vec::new();
    for lane in route {
        let road = lane.rsplit_once('_').map_or(lane.as_str(), |(r, _)| r);
        if roads.last() != Some(&road) {
            roads.push(road);
        }
    }
    roads.join(" → ")
}

pub(crate) fn ev_bindings(ev: &EmergencyVehicleState) -> [(&'static str, String); 5] {
    [
        ("ev_id", ev.vehicle_id.clone()),
        ("ev_route", route_roads(&ev.planned_route)),
        ("ev_lane", ev.current_lane.clone()),
        ("ev_distance", format!("{:.1}", ev.distance_to_stop_line)),
        ("ev_speed", format!("{:.1}", ev.speed)),
    ]
}

pub fn render_guidance(guidance: &[GuidanceItem]) -> String {
    if guidance.is_empty() {
        return "No guidance retrieved for the current situation.".to_string();
    }
    let numbered = guidance.len() > 1;
    let blocks: Vec<String> = guidance
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let head = if numbered {
                format!("Guidance {}:\n", k + 1)
            } else {
                String::new()
            };
            format!(
                "{head}Current Possible Situation: {}\nRecommended Action: {}\nIntended Effect: {}",
                g.situation, g.recommended_action, g.intended_effect
            )
        })
        .collect();
    blocks.join("\n")
}

/// Emergency prompt; `guidance` is rendered in the given (retrieval) order.
pub fn render_emergency_prompt(
    obs: &TrafficObservation,
    ev: &EmergencyVehicleState,
    guidance: &[GuidanceItem],
) -> PromptBundle {
    let rep = obs.representation();
    let g = render_guidance(guidance);
    let evb = ev_bindings(ev);
    let mut bindings: Vec<(&str, &str)> = vec![("representation", &rep), ("guidance", &g)];
    bindings.extend(evb.iter().map(|(k, v)| (*k, v.as_str())));
    PromptBundle {
        text: render_template(EMERGENCY_TEMPLATE, &bindings),
        kind: PromptKind::Emergency,
    }
}

/// Emergency-vehicle fields recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEvView {
    pub vehicle_id: String,
    pub lane: String,
    pub distance: f64,
    pub speed: f64,
}

fn shape_from_phrase(text: &str) -> Shape {
    Shape::ALL
        .into_iter()
        .find(|s| text.contains(shape_phrase(*s)))
        .unwrap_or(Shape::Cross)
}

fn parse_counts(text: &str) -> Option<LaneCounts> {
    // "QV=4; AV=0/3/0"
    let (qv, av) = text.trim().split_once("; AV=")?;
    let queued = qv.strip_prefix("QV=")?.parse().ok()?;
    let mut it = av.split('/').map(|x| x.trim().parse::<usize>());
    let (far, mid, near) = (it.next()?.ok()?, it.next()?.ok()?, it.next()?.ok()?);
    Some(LaneCounts {
        queued,
        far,
        mid,
        near,
    })
}

/// Inverse of [`TrafficObservation::representation`], applied to any text
/// that embeds a rendered representation (a full prompt, for instance).
pub fn parse_representation(text: &str) -> Option<TrafficObservation> {
    let mut lines = text.lines().peekable();
    let topo = lines.find(|l| l.starts_with("Intersection Topology:"))?;
    let shape = shape_from_phrase(topo);
    let roads_part = topo.split_once("(ID: ")?.1.split_once(')')?.0;
    let roads: Vec<&str> = roads_part.split(", ").collect();
    let counts_part = topo
        .split_once("), with ")?
        .1
        .split_once(" incoming lanes")?
        .0;
    let counts: Vec<usize> = counts_part
        .split(", ")
        .map(|c| c.trim().parse().ok())
        .collect::<Option<_>>()?;
    if roads.len() != counts.len() {
        return None;
    }
    let movement_count = topo
        .split_once("A total of ")?
        .1
        .split_once(' ')?
        .0
        .parse()
        .ok()?;
    let approaches = roads
        .iter()
        .zip(&counts)
        .map(|(r, &c)| Approach {
            road: r.to_string(),
            incoming_lanes: c,
        })
        .collect();

    lines.find(|l| l.starts_with("Action Space"))?;
    let mut phases: Vec<PhaseObservation> = Vec::new();
    while let Some(l) = lines.next_if(|l| l.starts_with("Phase ")) {
        let (head, body) = l.split_once(": ")?;
        let index: usize = head.strip_prefix("Phase ")?.parse().ok()?;
        let movements = body
            .split("; ")
            .map(|m| {
                m.split_once(" → ")
                    .map(|(f, t)| (f.to_string(), t.to_string()))
            })
            .collect::<Option<Vec<_>>>()?;
        phases.push(PhaseObservation {
            index,
            movements,
            lanes: Vec::new(),
        });
    }
    lines.find(|l| l.starts_with("Queuing and Approaching Vehicles"))?;
    let mut current: Option<usize> = None;
    while let Some(l) = lines.next_if(|l| l.starts_with("Phase ") || l.starts_with("  ")) {
        if let Some(idx) = l.strip_prefix("Phase ").and_then(|r| r.strip_suffix(':')) {
            current = Some(idx.parse().ok()?);
            continue;
        }
        let (lane, counts) = l.trim().split_once(": ")?;
        if lane == "Total" {
            continue;
        }
        let phase = phases.iter_mut().find(|p| Some(p.index) == current)?;
        phase.lanes.push(LaneObservation {
            lane: lane.to_string(),
            counts: parse_counts(counts)?,
        });
    }
    if phases.is_empty() {
        return None;
    }
    Some(TrafficObservation {
        intersection: String::new(),
        shape,
        approaches,
        movement_count,
        phases,
    })
}

/// Emergency-vehicle lines of a rendered emergency or query prompt.
pub fn parse_prompt_ev(text: &str) -> Option<PromptEvView> {
    let field = |name: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(name))
            .map(str::trim)
    };
    let vehicle_id = field("Emergency Vehicle ID:")?.to_string();
    let (lane, dist) = field("Current Position:")?.split_once(", ")?;
    let distance = dist.strip_suffix("m to stop line")?.parse().ok()?;
    let speed = field("Speed:")?.strip_suffix("m/s")?.parse().ok()?;
    Some(PromptEvView {
        vehicle_id,
        lane: lane.to_string(),
        distance,
        speed,
    })
}
