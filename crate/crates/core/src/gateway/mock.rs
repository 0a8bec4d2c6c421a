use std::fmt::Write as _;

use super::{ChatBackend, ChatRequest, EmbeddingBackend, GatewayError};
use crate::agent::fallback_policy;
use crate::observation::{parse_prompt_ev, parse_representation, PromptEvView, TrafficObservation};
use crate::rerag::{hashed_bag_of_words, EmbeddingVector, HistoricalCase};
use crate::sim::EmergencyVehicleState;

const EMERGENCY_ROLE: &str = "You are a traffic signal control agent with emergency response.";
const REGULAR_ROLE: &str = "You are a traffic signal control agent.";
const REVIEWER_ROLE: &str = "You are a reviewer of emergency traffic signal control cases.";
const QUERY_ROLE: &str = "You are a query generator";

/// Deterministic rule-based stand-in for a hosted model. It reads the
/// prompt text (the same text a real model would receive) and answers in the
/// requested format:
///
/// * emergency decisions serve the emergency vehicle's lane when it is on an
///   incoming lane, otherwise the phase with most queued plus near vehicles;
/// * regular decisions pick the phase with most queued plus near vehicles;
/// * reviewer prompts get one guidance item per recognized case pattern;
/// * query prompts get a fixed-template summary.
///
/// Anything else gets a refusal, which downstream parsers reject.
#[derive(Debug, Clone)]
pub struct MockBackend {
    dim: usize,
}

impl MockBackend {
    pub fn new(dim: usize) -> Self {
        MockBackend { dim }
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new(crate::rerag::MOCK_EMBEDDING_DIM)
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let text = request.prompt_text();
        let reply = if text.contains(EMERGENCY_ROLE) {
            emergency_decision(&text)
        } else if text.contains(REGULAR_ROLE) {
            regular_decision(&text)
        } else if text.contains(REVIEWER_ROLE) {
            review(&text)
        } else if text.contains(QUERY_ROLE) {
            query(&text)
        } else {
            None
        };
        Ok(reply.unwrap_or_else(|| "I'm sorry, I can't help with that request.".to_string()))
    }

    fn model(&self) -> &str {
        "mock-tsc"
    }
}

impl EmbeddingBackend for MockBackend {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        Ok(texts
            .iter()
            .map(|t| hashed_bag_of_words(t, self.dim))
            .collect())
    }
}

fn ev_state(view: &PromptEvView) -> EmergencyVehicleState {
    EmergencyVehicleState {
        vehicle_id: view.vehicle_id.clone(),
        planned_route: vec![view.lane.clone()],
        route_position: 0,
        current_lane: view.lane.clone(),
        distance_to_stop_line: view.distance,
        speed: view.speed,
    }
}

fn pressure_phase(obs: &TrafficObservation) -> (usize, usize) {
    let p = fallback_policy(obs, None);
    let t = obs.phases[p - 1].total();
    (p, t.queued + t.near)
}

fn emergency_decision(text: &str) -> Option<String> {
    let obs = parse_representation(text)?;
    let view = parse_prompt_ev(text)?;
    let ev = ev_state(&view);
    let phase = fallback_policy(&obs, Some(&ev));
    let t = obs.phases[phase - 1].total();
    let mut analysis = String::new();
    let mut evaluation = String::new();
    match obs.lane_counts(&view.lane) {
        Some(c) => {
            let _ = write!(
                analysis,
                "The emergency vehicle {} is on {}, {:.1} m from the stop line, moving at {:.1} m/s. This lane has {} queuing vehicles and approaching vehicles distributed as {}/{}/{} (far/mid/near). Phase {} controls this lane.",
                view.vehicle_id, view.lane, view.distance, view.speed, c.queued, c.far, c.mid, c.near, phase
            );
            if view.speed > 0.0 {
                let _ = write!(
                    evaluation,
                    "At current speed, {} will reach the stop line in {:.1} s. ",
                    view.vehicle_id,
                    view.distance / view.speed
                );
            } else {
                let _ = write!(evaluation, "{} is stopped in the queue. ", view.vehicle_id);
            }
            let _ = write!(
                evaluation,
                "Only Phase {phase} serves its lane, so selecting it minimizes the emergency vehicle's waiting time. Phase {phase} has total QV={}.",
                t.queued
            );
        }
        None => {
            let _ = write!(
                analysis,
                "The emergency vehicle {} is on {}, {:.1} m from its next stop line, and will reach this intersection later on its planned route.",
                view.vehicle_id, view.lane, view.distance
            );
            let _ = write!(
                evaluation,
                "Clearing the longest queues now keeps the intersection free when the emergency vehicle arrives. Phase {phase} has the largest queued and near-stop-line count ({}).",
                t.queued + t.near
            );
        }
    }
    Some(format!(
        "<response>\n  <traffic analysis>{analysis}</traffic analysis>\n  <evaluation and explanation>{evaluation}</evaluation and explanation>\n  <signal>{phase}</signal>\n</response>"
    ))
}

fn regular_decision(text: &str) -> Option<String> {
    let obs = parse_representation(text)?;
    let (phase, load) = pressure_phase(&obs);
    Some(format!(
        "<response>\n  <evaluation and explanation>Phase {phase} has the largest number of queuing and near-stop-line vehicles ({load}), so serving it reduces congestion the most.</evaluation and explanation>\n  <signal>{phase}</signal>\n</response>"
    ))
}

struct Pattern {
    situation: &'static str,
    action: &'static str,
    effect: &'static str,
}

const PATTERNS: [Pattern; 4] = [
    Pattern {
        situation: "An emergency vehicle is approaching the intersection, but its lane is still occupied by queuing vehicles.",
        action: "Promptly select the signal phase for the lane with the emergency vehicle.",
        effect: "Clear the queuing vehicles in the lane with the emergency vehicle for its rapid passage.",
    },
    Pattern {
        situation: "An emergency vehicle is approaching the intersection on a lane with no queuing vehicles ahead of it.",
        action: "Keep the signal phase serving the lane with the emergency vehicle active until it has crossed the stop line.",
        effect: "Let the emergency vehicle pass the intersection without stopping.",
    },
    Pattern {
        situation: "An emergency vehicle is waiting at the intersection while a phase that does not serve its lane is active.",
        action: "Switch to the signal phase that serves the lane with the emergency vehicle instead of serving other queues.",
        effect: "Stop the emergency vehicle from accumulating waiting time behind a red signal.",
    },
    Pattern {
        situation: "An emergency vehicle will pass through this intersection later on its planned route and is not yet on an incoming lane.",
        action: "Serve the phases with the longest queues near the stop line before the emergency vehicle arrives.",
        effect: "Keep the approach of the emergency vehicle free of queues when it reaches the intersection.",
    },
];

fn classify(case: &HistoricalCase) -> usize {
    let lane = &case.ev_t.current_lane;
    match case.obs_t.lane_counts(lane) {
        None => 3,
        Some(c) => {
            let served = case
                .obs_t
                .phases
                .get(case.action.wrapping_sub(1))
                .is_some_and(|p| p.serves_lane(lane));
            match (served, c.queued > 0) {
                (false, _) => 2,
                (true, true) => 0,
                (true, false) => 1,
            }
        }
    }
}

fn review(text: &str) -> Option<String> {
    let body = text.split_once("<cases>")?.1.split_once("</cases>")?.0;
    let cases: Vec<HistoricalCase> = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .ok()?;
    let mut seen = [false; PATTERNS.len()];
    for c in &cases {
        seen[classify(c)] = true;
    }
    let items: Vec<serde_json::Value> = PATTERNS
        .iter()
        .zip(seen)
        .filter(|(_, s)| *s)
        .map(|(p, _)| {
            serde_json::json!({
                "situation": p.situation,
                "recommended_action": p.action,
                "intended_effect": p.effect,
            })
        })
        .collect();
    (!items.is_empty()).then(|| serde_json::to_string_pretty(&items).expect("json"))
}

fn distance_band(d: f64) -> &'static str {
    if d < 100.0 {
        "near"
    } else if d < 200.0 {
        "middle"
    } else {
        "far"
    }
}

fn query(text: &str) -> Option<String> {
    let obs = parse_representation(text)?;
    let view = parse_prompt_ev(text)?;
    let (phase, _) = pressure_phase(&obs);
    let dominant = obs.phases[phase - 1].total().queued;
    let lane_part = match obs.lane_counts(&view.lane) {
        Some(c) if c.queued > 0 => format!(
            "emergency vehicle approaching the intersection on {} at {} distance ({:.1} m to stop line, {:.1} m/s); its lane is occupied by {} queuing vehicles",
            view.lane,
            distance_band(view.distance),
            view.distance,
            view.speed,
            c.queued
        ),
        Some(_) => format!(
            "emergency vehicle approaching the intersection on {} at {} distance ({:.1} m to stop line, {:.1} m/s); no queuing vehicles ahead of it on its lane",
            view.lane,
            distance_band(view.distance),
            view.distance,
            view.speed
        ),
        None => format!(
            "emergency vehicle will pass through this intersection later on its planned route; not yet on an incoming lane (currently on {})",
            view.lane
        ),
    };
    Some(format!(
        "{lane_part}; dominant queue at phase {phase} (QV={dominant})"
    ))
}
