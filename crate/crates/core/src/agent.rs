//! Per-intersection decision agents: emergency-aware mode gating, one chat
//! round-trip per decision, tagged-response parsing, and a deterministic
//! fallback whenever the reply cannot be used.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatBackend, ChatRequest};
use crate::network::RoadNetwork;
use crate::observation::{
    render_emergency_prompt, render_regular_prompt, PromptBundle, TrafficObservation,
};
use crate::rerag::GuidanceItem;
use crate::sim::EmergencyVehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReasoningMode {
    Deep,
    Lightweight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub phase: usize,
    pub explanation: String,
    pub analysis: Option<String>,
    pub prediction: Option<String>,
    pub mode: ReasoningMode,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error("missing or unterminated <{0}> tag")]
    MissingTag(&'static str),
    #[error("phase {phase} outside 1..={max}")]
    PhaseOutOfRange { phase: i64, max: usize },
    #[error("phase {0:?} is not an integer")]
    NonIntegerPhase(String),
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("deep reasoning requires an emergency vehicle state")]
    MissingEmergency,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub analysis: Option<String>,
    pub explanation: Option<String>,
    pub phase: usize,
}

fn tag_content<'a>(text: &'a str, tag: &'static str) -> Result<Option<&'a str>, ResponseError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let Some(start) = text.find(&open) else {
        return Ok(None);
    };
    let body = &text[start + open.len()..];
    let end = body.find(&close).ok_or(ResponseError::MissingTag(tag))?;
    Ok(Some(body[..end].trim()))
}

/// Extracts the analysis, explanation and phase from a tagged reply. Only
/// `<signal>` is mandatory; the phase must be an integer in `1..=num_phases`.
pub fn parse_response(text: &str, num_phases: usize) -> Result<ParsedResponse, ResponseError> {
    let analysis = tag_content(text, "traffic analysis")?.map(str::to_string);
    let explanation = tag_content(text, "evaluation and explanation")?.map(str::to_string);
    let raw = tag_content(text, "signal")?.ok_or(ResponseError::MissingTag("signal"))?;
    let phase: i64 = raw
        .parse()
        .map_err(|_| ResponseError::NonIntegerPhase(raw.to_string()))?;
    if phase < 1 || phase as u64 > num_phases as u64 {
        return Err(ResponseError::PhaseOutOfRange {
            phase,
            max: num_phases,
        });
    }
    Ok(ParsedResponse {
        analysis,
        explanation,
        phase: phase as usize,
    })
}

/// Rule-based phase choice. With an emergency vehicle on one of the
/// intersection's incoming lanes, the lowest-index phase serving that lane;
/// otherwise the phase with the most queued plus near-segment vehicles, ties
/// to the lowest index.
pub fn fallback_policy(obs: &TrafficObservation, ev: Option<&EmergencyVehicleState>) -> usize {
    if let Some(ev) = ev {
        if let Some(p) = obs.phases.iter().find(|p| p.serves_lane(&ev.current_lane)) {
            return p.index;
        }
    }
    let mut best = (1, 0usize);
    for p in &obs.phases {
        let t = p.total();
        let load = t.queued + t.near;
        if load > best.1 {
            best = (p.index, load);
        }
    }
    best.0
}

/// Deep reasoning iff some emergency vehicle's remaining route (current lane
/// included) reaches a stop line of intersection `intersection`.
pub fn select_mode(
    net: &RoadNetwork,
    intersection: usize,
    emergencies: &[EmergencyVehicleState],
) -> ReasoningMode {
    if relevant_emergency(net, intersection, emergencies).is_some() {
        ReasoningMode::Deep
    } else {
        ReasoningMode::Lightweight
    }
}

/// The emergency vehicle an intersection should reason about: one already on
/// an incoming lane (nearest first), else the one that reaches it in the
/// fewest lanes. Earlier entries win ties.
pub fn relevant_emergency<'a>(
    net: &RoadNetwork,
    intersection: usize,
    emergencies: &'a [EmergencyVehicleState],
) -> Option<&'a EmergencyVehicleState> {
    let mut best: Option<(usize, f64, &EmergencyVehicleState)> = None;
    for ev in emergencies {
        let hops = ev
            .remaining_route()
            .iter()
            .position(|l| net.head_intersection(l) == Some(intersection));
        if let Some(h) = hops {
            let key = (
                h,
                if h == 0 {
                    ev.distance_to_stop_line
                } else {
                    0.0
                },
            );
            if best.is_none_or(|(bh, bd, _)| key.0 < bh || (key.0 == bh && key.1 < bd)) {
                best = Some((key.0, key.1, ev));
            }
        }
    }
    best.map(|b| b.2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionOutcome {
    pub decision: AgentDecision,
    pub prompt: PromptBundle,
    /// Raw backend reply, absent when the call failed.
    pub response: Option<String>,
}

impl DecisionOutcome {
    /// Prompt and reply usable as a training trajectory.
    pub fn trajectory(&self) -> Option<(&str, &str)> {
        if self.decision.fallback_used {
            return None;
        }
        self.response
            .as_deref()
            .map(|r| (self.prompt.text.as_str(), r))
    }
}

/// Renders the mode-appropriate prompt, asks the backend once, and parses
/// the reply. Any failure (transport, malformed markup, out-of-range phase,
/// missing deep-reasoning sections) falls back to [`fallback_policy`].
pub fn decide(
    obs: &TrafficObservation,
    mode: ReasoningMode,
    ev: Option<&EmergencyVehicleState>,
    guidance: &[GuidanceItem],
    backend: &dyn ChatBackend,
) -> Result<DecisionOutcome, AgentError> {
    let prompt = match mode {
        ReasoningMode::Deep => {
            render_emergency_prompt(obs, ev.ok_or(AgentError::MissingEmergency)?, guidance)
        }
        ReasoningMode::Lightweight => render_regular_prompt(obs),
    };
    let request = ChatRequest::user(backend.model(), prompt.text.clone());
    let response = backend.chat(&request);
    let parsed = match &response {
        Ok(text) => parse_response(text, obs.num_phases()).map_err(|e| e.to_string()),
        Err(e) => Err(e.to_string()),
    };
    let parsed = parsed.and_then(|p| {
        if mode == ReasoningMode::Deep && (p.analysis.is_none() || p.explanation.is_none()) {
            Err("deep reasoning reply lacks analysis or evaluation".to_string())
        } else {
            Ok(p)
        }
    });
    let decision = match parsed {
        Ok(p) => AgentDecision {
            phase: p.phase,
            explanation: p.explanation.clone().unwrap_or_default(),
            analysis: p.analysis,
            prediction: if mode == ReasoningMode::Deep {
                p.explanation
            } else {
                None
            },
            mode,
            fallback_used: false,
        },
        Err(reason) => {
            let phase = fallback_policy(obs, ev);
            let note = format!("fallback policy selected phase {phase}: {reason}");
            let deep = mode == ReasoningMode::Deep;
            AgentDecision {
                phase,
                explanation: note.clone(),
                analysis: deep.then(|| note.clone()),
                prediction: deep.then(|| note.clone()),
                mode,
                fallback_used: true,
            }
        }
    };
    Ok(DecisionOutcome {
        decision,
        prompt,
        response: response.ok(),
    })
}
