//! Deterministic mesoscopic traffic simulator.
//!
//! Each lane is a FIFO queue server: vehicles travel at free-flow speed until
//! they join the back of the queue at the stop line, and the queue discharges
//! one vehicle per saturation headway while the head vehicle's movement is
//! granted by the active phase. Fractional service carries over between
//! steps while the lane stays green.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NodeKind, RoadNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("network needs at least two connected boundary nodes to route vehicles")]
    NoRoute,
    #[error("invalid phase {phase} for intersection {intersection} ({phases} phases)")]
    InvalidPhase {
        intersection: String,
        phase: usize,
        phases: usize,
    },
    #[error("expected {expected} phase assignments, got {got}")]
    PhaseCount { expected: usize, got: usize },
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("invalid vehicle placement: {0}")]
    Placement(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Horizon T in steps.
    pub steps: u32,
    /// Seconds per step.
    pub step_length: f64,
    /// Steps between agent decisions.
    pub decision_interval: u32,
    /// Number of emergency vehicles M.
    pub emergency_count: u32,
    /// Vehicles per minute entering the network.
    pub arrival_rate: f64,
    pub seed: u64,
    /// Speed (m/s) below which a vehicle counts as queued.
    pub v_stop: f64,
    /// Seconds per discharged vehicle per lane.
    pub saturation_headway: f64,
    pub free_flow_speed: f64,
    /// Road space per stored vehicle, in meters.
    pub vehicle_spacing: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            steps: 1800,
            step_length: 1.0,
            decision_interval: 5,
            emergency_count: 6,
            arrival_rate: 57.14,
            seed: 0,
            v_stop: 0.1,
            saturation_headway: 2.0,
            free_flow_speed: 13.9,
            vehicle_spacing: 7.5,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be > 0");
        }
        if !(self.step_length > 0.0) {
            return bad("step_length must be > 0");
        }
        if self.decision_interval == 0 {
            return bad("decision_interval must be >= 1");
        }
        if !(self.saturation_headway > 0.0) {
            return bad("saturation_headway must be > 0");
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return bad("arrival_rate must be finite and >= 0");
        }
        if !(self.free_flow_speed > 0.0) || !(self.vehicle_spacing > 0.0) || !(self.v_stop >= 0.0) {
            return bad("speeds and spacing must be positive");
        }
        Ok(())
    }
}

/// Per-step random stream: identical for a given `(seed, stream)` no matter
/// what happened earlier in the run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const EMERGENCY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleClass {
    Regular,
    Emergency,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Vehicle {
    pub id: usize,
    pub class: VehicleClass,
    /// Lane indices into the network's lane table.
    pub route: Vec<usize>,
    /// Position of the current lane within `route`.
    pub route_pos: usize,
    pub spawn_step: u32,
    /// Meters to the stop line of the current lane.
    pub distance: f64,
    pub speed: f64,
    pub waiting: f64,
    pub finish_step: Option<u32>,
    /// Waiting to enter the first lane of the route.
    pub in_backlog: bool,
    /// Ordinal among emergency vehicles (1-based), zero for regular traffic.
    pub emergency_ordinal: usize,
}

impl Vehicle {
    pub fn lane(&self) -> usize {
        self.route[self.route_pos]
    }

    pub fn next_lane(&self) -> Option<usize> {
        self.route.get(self.route_pos + 1).copied()
    }

    pub fn name(&self) -> String {
        match self.class {
            VehicleClass::Emergency => format!("Ambulance_{}", self.emergency_ordinal),
            VehicleClass::Regular => format!("veh_{}", self.id),
        }
    }
}

/// Snapshot of one active emergency vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergencyVehicleState {
    pub vehicle_id: String,
    /// Full planned route as lane ids.
    pub planned_route: Vec<String>,
    /// Index of `current_lane` within `planned_route`.
    pub route_position: usize,
    pub current_lane: String,
    pub distance_to_stop_line: f64,
    pub speed: f64,
}

impl EmergencyVehicleState {
    /// Lanes from the current one to the end of the route.
    pub fn remaining_route(&self) -> &[String] {
        &self.planned_route[self.route_position.min(self.planned_route.len())..]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntersectionOutcome {
    pub queue_length: usize,
    /// Emergency-vehicle waiting seconds attributed here.
    pub emergency_wait: f64,
    pub discharged: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Step index after the update.
    pub step: u32,
    pub intersections: Vec<IntersectionOutcome>,
    pub spawned_total: usize,
    pub active: usize,
    pub completed: usize,
}

impl StepOutcome {
    /// Folds a later outcome into this one: waits and discharges add up,
    /// queues and totals take the later value.
    pub fn absorb(&mut self, later: &StepOutcome) {
        if self.intersections.len() != later.intersections.len() {
            self.intersections = vec![IntersectionOutcome::default(); later.intersections.len()];
        }
        for (a, b) in self.intersections.iter_mut().zip(&later.intersections) {
            a.queue_length = b.queue_length;
            a.emergency_wait += b.emergency_wait;
            a.discharged += b.discharged;
        }
        self.step = later.step;
        self.spawned_total = later.spawned_total;
        self.active = later.active;
        self.completed = later.completed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Average travel time (s), unfinished vehicles censored at the horizon.
    pub att: f64,
    pub awt: f64,
    pub aql: f64,
    pub atte: Option<f64>,
    pub awte: Option<f64>,
    pub emergency_travel_times: Vec<f64>,
    pub spawned: usize,
    pub completed: usize,
}

/// Minimal per-vehicle record used by [`compute_metrics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripRecord {
    pub class: VehicleClass,
    pub spawn_step: u32,
    pub finish_step: Option<u32>,
    pub waiting: f64,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Aggregates trip records and queue samples into a report. `horizon` is the
/// censoring step for unfinished trips. Empty populations average to zero,
/// except the emergency aggregates, which are absent.
pub fn compute_metrics(
    trips: &[TripRecord],
    queue_samples: &[usize],
    horizon: u32,
    step_length: f64,
) -> MetricsReport {
    let travel = |t: &TripRecord| {
        let end = t.finish_step.unwrap_or(horizon).min(horizon);
        f64::from(end.saturating_sub(t.spawn_step)) * step_length
    };
    let tt: Vec<f64> = trips.iter().map(travel).collect();
    let wt: Vec<f64> = trips.iter().map(|t| t.waiting).collect();
    let ev: Vec<&TripRecord> = trips
        .iter()
        .filter(|t| t.class == VehicleClass::Emergency)
        .collect();
    let ev_tt: Vec<f64> = ev.iter().map(|t| travel(t)).collect();
    let ev_wt: Vec<f64> = ev.iter().map(|t| t.waiting).collect();
    let qs: Vec<f64> = queue_samples.iter().map(|&q| q as f64).collect();
    MetricsReport {
        att: mean(&tt).unwrap_or(0.0),
        awt: mean(&wt).unwrap_or(0.0),
        aql: mean(&qs).unwrap_or(0.0),
        atte: mean(&ev_tt),
        awte: mean(&ev_wt),
        emergency_travel_times: ev_tt,
        spawned: trips.len(),
        completed: trips.iter().filter(|t| t.finish_step.is_some()).count(),
    }
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    lane: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.lane.cmp(&self.lane))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One shortest lane path per ordered pair of distinct, connected boundary
/// nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTable {
    routes: Vec<Vec<usize>>,
}

impl RouteTable {
    pub fn new(net: &RoadNetwork) -> Result<Self, SimError> {
        let n_lanes = net.lanes().len();
        // successor lanes through intersection movements
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n_lanes];
        for x in net.intersections() {
            for m in &x.movements {
                let (Some(a), Some(b)) = (net.lane_idx(&m.from), net.lane_idx(&m.to)) else {
                    continue;
                };
                succ[a].push(b);
            }
        }
        let boundary: Vec<&str> = net
            .nodes()
            .iter()
            .filter(|n| n.kind == NodeKind::Boundary)
            .map(|n| n.id.as_str())
            .collect();
        let lanes_from = |node: &str| -> Vec<usize> {
            net.roads()
                .iter()
                .filter(|r| r.from == node)
                .flat_map(|r| {
                    net.lanes()
                        .iter()
                        .enumerate()
                        .filter(move |(_, l)| l.road == r.id)
                })
                .map(|(i, _)| i)
                .collect()
        };
        let lanes_into = |node: &str| -> Vec<usize> {
            net.roads()
                .iter()
                .filter(|r| r.to == node)
                .flat_map(|r| {
                    net.lanes()
                        .iter()
                        .enumerate()
                        .filter(move |(_, l)| l.road == r.id)
                })
                .map(|(i, _)| i)
                .collect()
        };

        let mut routes = Vec::new();
        for origin in &boundary {
            let starts = lanes_from(origin);
            if starts.is_empty() {
                continue;
            }
            let mut dist = vec![f64::INFINITY; n_lanes];
            let mut prev = vec![usize::MAX; n_lanes];
            let mut heap = BinaryHeap::new();
            for &s in &starts {
                dist[s] = net.lanes()[s].length;
                heap.push(HeapEntry {
                    cost: dist[s],
                    lane: s,
                });
            }
            while let Some(HeapEntry { cost, lane }) = heap.pop() {
                if cost > dist[lane] {
                    continue;
                }
                for &nx in &succ[lane] {
                    let c = cost + net.lanes()[nx].length;
                    if c < dist[nx] {
                        dist[nx] = c;
                        prev[nx] = lane;
                        heap.push(HeapEntry { cost: c, lane: nx });
                    }
                }
            }
            for dest in &boundary {
                if dest == origin {
                    continue;
                }
                let best = lanes_into(dest)
                    .into_iter()
                    .filter(|&l| dist[l].is_finite())
                    .min_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
                if let Some(mut l) = best {
                    let mut path = vec![l];
                    while prev[l] != usize::MAX {
                        l = prev[l];
                        path.push(l);
                    }
                    path.reverse();
                    routes.push(path);
                }
            }
        }
        if routes.is_empty() {
            return Err(SimError::NoRoute);
        }
        Ok(RouteTable { routes })
    }

    pub fn routes(&self) -> &[Vec<usize>] {
        &self.routes
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> &[usize] {
        &self.routes[rng.random_range(0..self.routes.len())]
    }
}

/// Regular vehicles entering at `step`: a Poisson count with mean
/// `arrival_rate * step_length / 60`, each on a uniformly drawn route.
/// Ids are left at zero; the simulator assigns them.
pub fn spawn_arrivals(config: &SimulationConfig, routes: &RouteTable, step: u32) -> Vec<Vehicle> {
    let mut rng = stream_rng(config.seed, u64::from(step) + 1);
    let lambda = config.arrival_rate * config.step_length / 60.0;
    let count = if lambda > 0.0 {
        Poisson::new(lambda)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0)
    } else {
        0
    };
    (0..count)
        .map(|_| {
            new_vehicle(
                VehicleClass::Regular,
                routes.sample(&mut rng).to_vec(),
                step,
            )
        })
        .collect()
}

/// `(spawn_step, route)` for each emergency vehicle, spawn steps uniform on
/// `[0, T/2]`, sorted by spawn step.
pub fn schedule_emergencies(
    config: &SimulationConfig,
    routes: &RouteTable,
) -> Vec<(u32, Vec<usize>)> {
    let mut rng = stream_rng(config.seed, EMERGENCY_STREAM);
    let mut events: Vec<(u32, Vec<usize>)> = (0..config.emergency_count)
        .map(|_| {
            let s = rng.random_range(0..=config.steps / 2);
            (s, routes.sample(&mut rng).to_vec())
        })
        .collect();
    events.sort_by_key(|e| e.0);
    events
}

fn new_vehicle(class: VehicleClass, route: Vec<usize>, step: u32) -> Vehicle {
    Vehicle {
        id: 0,
        class,
        route,
        route_pos: 0,
        spawn_step: step,
        distance: 0.0,
        speed: 0.0,
        waiting: 0.0,
        finish_step: None,
        in_backlog: true,
        emergency_ordinal: 0,
    }
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct LaneState {
    /// Stopped vehicles, head at the front.
    queue: VecDeque<usize>,
    /// Moving vehicles ordered nearest-first.
    moving: VecDeque<usize>,
    /// Vehicles waiting to enter this lane from outside the network.
    backlog: VecDeque<usize>,
    credit: f64,
    capacity: usize,
    /// Intersection at the downstream end, if any.
    head: Option<usize>,
}

impl LaneState {
    fn occupancy(&self) -> usize {
        self.queue.len() + self.moving.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LaneEvent {
    Enter { lane: usize, vehicle: usize },
    Leave { lane: usize, vehicle: usize },
}

#[derive(Debug, Clone)]
pub struct Simulator {
    net: Arc<RoadNetwork>,
    config: SimulationConfig,
    routes: RouteTable,
    step: u32,
    vehicles: Vec<Vehicle>,
    lanes: Vec<LaneState>,
    emergencies: VecDeque<(u32, Vec<usize>)>,
    emergency_spawned: usize,
    completed: usize,
    queue_samples: Vec<usize>,
    lane_log: Option<Vec<LaneEvent>>,
}

impl Simulator {
    pub fn new(net: Arc<RoadNetwork>, config: SimulationConfig) -> Result<Self, SimError> {
        config.validate()?;
        let routes = RouteTable::new(&net)?;
        let lanes = net
            .lanes()
            .iter()
            .map(|l| LaneState {
                capacity: ((l.length / config.vehicle_spacing).floor() as usize).max(1),
                head: net.head_intersection(&l.id),
                ..LaneState::default()
            })
            .collect();
        let emergencies = schedule_emergencies(&config, &routes).into();
        Ok(Simulator {
            net,
            config,
            routes,
            step: 0,
            vehicles: Vec::new(),
            lanes,
            emergencies,
            emergency_spawned: 0,
            completed: 0,
            queue_samples: Vec::new(),
            lane_log: None,
        })
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }
    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }
    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }
    pub fn current_step(&self) -> u32 {
        self.step
    }
    pub fn is_finished(&self) -> bool {
        self.step >= self.config.steps
    }
    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }
    pub fn spawned_total(&self) -> usize {
        self.vehicles.len()
    }
    pub fn completed_total(&self) -> usize {
        self.completed
    }
    pub fn active_total(&self) -> usize {
        self.vehicles
            .iter()
            .filter(|v| v.finish_step.is_none())
            .count()
    }

    /// Starts recording lane enter/leave events (for ordering checks).
    pub fn enable_lane_log(&mut self) {
        self.lane_log.get_or_insert_with(Vec::new);
    }

    pub fn lane_log(&self) -> &[LaneEvent] {
        self.lane_log.as_deref().unwrap_or(&[])
    }

    /// Vehicles physically on a lane (queued and moving), nearest first.
    pub fn lane_vehicles(&self, lane: usize) -> impl Iterator<Item = &Vehicle> {
        let st = &self.lanes[lane];
        st.queue
            .iter()
            .chain(st.moving.iter())
            .map(move |&v| &self.vehicles[v])
    }

    /// Stopped vehicles on the upstream lanes of intersection `x`.
    pub fn queue_length(&self, x: usize) -> usize {
        self.net.intersections()[x]
            .upstream_lanes
            .iter()
            .filter_map(|l| self.net.lane_idx(l))
            .map(|l| {
                self.lane_vehicles(l)
                    .filter(|v| v.speed < self.config.v_stop)
                    .count()
            })
            .sum()
    }

    pub fn emergency_state(&self, v: &Vehicle) -> EmergencyVehicleState {
        let lanes = self.net.lanes();
        EmergencyVehicleState {
            vehicle_id: v.name(),
            planned_route: v.route.iter().map(|&l| lanes[l].id.clone()).collect(),
            route_position: v.route_pos,
            current_lane: lanes[v.lane()].id.clone(),
            distance_to_stop_line: v.distance,
            speed: v.speed,
        }
    }

    /// Active emergency vehicles in spawn order.
    pub fn active_emergencies(&self) -> Vec<EmergencyVehicleState> {
        self.vehicles
            .iter()
            .filter(|v| v.class == VehicleClass::Emergency && v.finish_step.is_none())
            .map(|v| self.emergency_state(v))
            .collect()
    }

    /// Puts a vehicle directly onto lane `route[route_pos]` at the given
    /// distance and speed. Stopped vehicles join the queue, moving ones the
    /// approach stream. Returns the vehicle id.
    pub fn place_vehicle(
        &mut self,
        class: VehicleClass,
        route: Vec<usize>,
        route_pos: usize,
        distance: f64,
        speed: f64,
    ) -> Result<usize, SimError> {
        let lane = *route
            .get(route_pos)
            .ok_or_else(|| SimError::Placement("route position out of range".into()))?;
        let length = self
            .net
            .lanes()
            .get(lane)
            .ok_or_else(|| SimError::Placement(format!("unknown lane index {lane}")))?
            .length;
        if !(0.0..=length).contains(&distance) {
            return Err(SimError::Placement(format!(
                "distance {distance} outside [0, {length}]"
            )));
        }
        let mut v = new_vehicle(class, route, self.step);
        v.route_pos = route_pos;
        v.in_backlog = false;
        v.distance = distance;
        v.speed = speed;
        let id = self.register(v);
        let st = &mut self.lanes[lane];
        if speed < self.config.v_stop {
            st.queue.push_back(id);
        } else {
            let pos = st
                .moving
                .iter()
                .position(|&o| self.vehicles[o].distance > distance)
                .unwrap_or(st.moving.len());
            st.moving.insert(pos, id);
        }
        self.log(LaneEvent::Enter { lane, vehicle: id });
        Ok(id)
    }

    fn register(&mut self, mut v: Vehicle) -> usize {
        v.id = self.vehicles.len();
        if v.class == VehicleClass::Emergency {
            self.emergency_spawned += 1;
            v.emergency_ordinal = self.emergency_spawned;
        }
        self.vehicles.push(v);
        self.vehicles.len() - 1
    }

    fn log(&mut self, e: LaneEvent) {
        if let Some(log) = &mut self.lane_log {
            log.push(e);
        }
    }

    fn check_phases(&self, phases: &[usize]) -> Result<(), SimError> {
        let xs = self.net.intersections();
        if phases.len() != xs.len() {
            return Err(SimError::PhaseCount {
                expected: xs.len(),
                got: phases.len(),
            });
        }
        for (x, &p) in xs.iter().zip(phases) {
            if p < 1 || p > x.num_phases() {
                return Err(SimError::InvalidPhase {
                    intersection: x.id.clone(),
                    phase: p,
                    phases: x.num_phases(),
                });
            }
        }
        Ok(())
    }

    /// Advances one step with `phases[i]` active at intersection `i`.
    pub fn step(&mut self, phases: &[usize]) -> Result<StepOutcome, SimError> {
        self.check_phases(phases)?;
        let n_x = self.net.intersections().len();
        let dt = self.config.step_length;
        if self.step.is_multiple_of(self.config.decision_interval) {
            for x in 0..n_x {
                let q = self.queue_length(x);
                self.queue_samples.push(q);
            }
        }
        let mut outcome = StepOutcome {
            intersections: vec![IntersectionOutcome::default(); n_x],
            ..StepOutcome::default()
        };

        // arrivals
        let mut arrivals = spawn_arrivals(&self.config, &self.routes, self.step);
        while self.emergencies.front().is_some_and(|e| e.0 == self.step) {
            let (s, route) = self.emergencies.pop_front().expect("checked");
            arrivals.push(new_vehicle(VehicleClass::Emergency, route, s));
        }
        for v in arrivals {
            let first = v.route[0];
            let id = self.register(v);
            self.lanes[first].backlog.push_back(id);
        }

        // entry from outside
        let lane_len: Vec<f64> = self.net.lanes().iter().map(|l| l.length).collect();
        for lane in 0..self.lanes.len() {
            while let Some(&id) = self.lanes[lane].backlog.front() {
                if self.lanes[lane].occupancy() >= self.lanes[lane].capacity {
                    break;
                }
                self.lanes[lane].backlog.pop_front();
                let v = &mut self.vehicles[id];
                v.in_backlog = false;
                v.distance = lane_len[lane];
                v.speed = self.config.free_flow_speed;
                self.lanes[lane].moving.push_back(id);
                self.log(LaneEvent::Enter { lane, vehicle: id });
            }
        }

        // discharge at stop lines
        let gain = dt / self.config.saturation_headway;
        for (xi, x) in self.net.clone().intersections().iter().enumerate() {
            let phase = phases[xi];
            for lane_id in &x.upstream_lanes {
                let Some(lane) = self.net.lane_idx(lane_id) else {
                    continue;
                };
                let head_move = |sim: &Self| {
                    sim.lanes[lane].queue.front().map(|&h| {
                        let to = sim.vehicles[h].next_lane();
                        let allowed = to.is_some_and(|t| {
                            x.phase_allows(phase, lane_id, &sim.net.lanes()[t].id)
                        });
                        (h, to, allowed)
                    })
                };
                let green = match head_move(self) {
                    Some((_, _, allowed)) => allowed,
                    None => x.phases[phase - 1]
                        .movements
                        .iter()
                        .any(|(f, _)| f == lane_id),
                };
                if !green {
                    self.lanes[lane].credit = 0.0;
                    continue;
                }
                self.lanes[lane].credit += gain;
                while self.lanes[lane].credit >= 1.0 {
                    let Some((h, Some(to), true)) = head_move(self) else {
                        break;
                    };
                    if self.lanes[to].occupancy() >= self.lanes[to].capacity {
                        break;
                    }
                    self.lanes[lane].queue.pop_front();
                    self.lanes[lane].credit -= 1.0;
                    self.log(LaneEvent::Leave { lane, vehicle: h });
                    let v = &mut self.vehicles[h];
                    v.route_pos += 1;
                    v.distance = lane_len[to];
                    v.speed = self.config.free_flow_speed;
                    self.lanes[to].moving.push_back(h);
                    self.log(LaneEvent::Enter {
                        lane: to,
                        vehicle: h,
                    });
                    outcome.intersections[xi].discharged += 1;
                }
                self.lanes[lane].credit = self.lanes[lane].credit.min(1.0);
            }
        }

        // movement along lanes
        let travel = self.config.free_flow_speed * dt;
        let spacing = self.config.vehicle_spacing;
        for lane in 0..self.lanes.len() {
            let st = &mut self.lanes[lane];
            for (k, &q) in st.queue.iter().enumerate() {
                self.vehicles[q].distance = k as f64 * spacing;
            }
            let moving = std::mem::take(&mut st.moving);
            for id in moving {
                let v = &mut self.vehicles[id];
                let d = v.distance - travel;
                match st.head {
                    Some(_) => {
                        let tail = st.queue.len() as f64 * spacing;
                        if d <= tail {
                            v.distance = tail.min(lane_len[lane]);
                            v.speed = 0.0;
                            st.queue.push_back(id);
                        } else {
                            v.distance = d;
                            st.moving.push_back(id);
                        }
                    }
                    None => {
                        if d <= 0.0 {
                            v.distance = 0.0;
                            v.finish_step = Some(self.step + 1);
                            self.completed += 1;
                            if let Some(log) = &mut self.lane_log {
                                log.push(LaneEvent::Leave { lane, vehicle: id });
                            }
                        } else {
                            v.distance = d;
                            st.moving.push_back(id);
                        }
                    }
                }
            }
        }

        // waiting accrual
        for v in self.vehicles.iter_mut().filter(|v| v.finish_step.is_none()) {
            if v.speed < self.config.v_stop {
                v.waiting += dt;
                if v.class == VehicleClass::Emergency {
                    if let Some(x) = self.lanes[v.lane()].head {
                        outcome.intersections[x].emergency_wait += dt;
                    }
                }
            }
        }

        self.step += 1;
        for x in 0..n_x {
            outcome.intersections[x].queue_length = self.queue_length(x);
        }
        outcome.step = self.step;
        outcome.spawned_total = self.vehicles.len();
        outcome.completed = self.completed;
        outcome.active = self.vehicles.len() - self.completed;
        Ok(outcome)
    }

    /// Runs `steps` steps with fixed phases and returns the folded outcome.
    pub fn advance(&mut self, phases: &[usize], steps: u32) -> Result<StepOutcome, SimError> {
        let mut acc = StepOutcome::default();
        for _ in 0..steps {
            if self.is_finished() {
                break;
            }
            let o = self.step(phases)?;
            acc.absorb(&o);
        }
        Ok(acc)
    }

    pub fn queue_samples(&self) -> &[usize] {
        &self.queue_samples
    }

    /// Metrics with unfinished trips censored at the current step.
    pub fn metrics(&self) -> MetricsReport {
        let trips: Vec<TripRecord> = self
            .vehicles
            .iter()
            .map(|v| TripRecord {
                class: v.class,
                spawn_step: v.spawn_step,
                finish_step: v.finish_step,
                waiting: v.waiting,
            })
            .collect();
        compute_metrics(
            &trips,
            &self.queue_samples,
            self.step,
            self.config.step_length,
        )
    }
}
