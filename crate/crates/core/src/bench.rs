//! Scenario runner and benchmark harness: the closed control loop, imitation
//! collection, guidance building, refinement data generation and policy
//! comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{decide, relevant_emergency, select_mode, AgentError, ReasoningMode};
use crate::gateway::{text_hash, BackendConfig, BackendKind, Gateway, GatewayError};
use crate::network::{builtin_network, NetworkError, RoadNetwork};
use crate::observation::{observe, TrafficObservation};
use crate::rerag::{
    read_jsonl, retrieve_for, review_cases, GuidanceItem, GuidanceRepository, HistoricalCase,
    RagError,
};
use crate::sim::{
    stream_rng, EmergencyVehicleState, MetricsReport, SimError, SimulationConfig, Simulator,
};
use crate::training::{
    compute_reward, export_dataset, filter_trajectory, sample_refinement_batch,
    sampling_probabilities, write_jsonl, BufferSet, DatasetKind, FilterParams, FineTuneRecord,
    ReasoningTrajectory, RewardParams, TrainingError,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error("invalid run configuration: {0}")]
    Validation(String),
    #[error("runs are not comparable: {0}")]
    ScenarioMismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rag(#[from] RagError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("backend failure: {0}")]
    Backend(String),
}

impl BenchError {
    /// Process exit code: 3 for backend failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Gateway(_)
            | BenchError::Backend(_)
            | BenchError::Rag(RagError::Backend(_)) => 3,
            _ => 2,
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
        move |source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Language-model agents answered by the built-in rule-based backend.
    MockHeuristic,
    /// Language-model agents answered by a remote OpenAI-compatible server.
    Remote,
    /// Round-robin phase cycling at every decision point.
    FixedTime,
    /// Seeded uniform phase choice.
    Random,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::MockHeuristic => "mock-heuristic",
            Policy::Remote => "remote",
            Policy::FixedTime => "fixed-time",
            Policy::Random => "random",
        }
    }

    pub fn uses_agents(self) -> bool {
        matches!(self, Policy::MockHeuristic | Policy::Remote)
    }
}

fn default_k() -> usize {
    1
}

/// Scenario file contents. `network` is either `builtin:<name>` or a path
/// relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub network: String,
    #[serde(default)]
    pub sim: SimulationConfig,
    #[serde(default)]
    pub reward: RewardParams,
    #[serde(default = "default_k")]
    pub retrieval_k: usize,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: Arc<RoadNetwork>,
    pub sim: SimulationConfig,
    pub reward: RewardParams,
    pub retrieval_k: usize,
}

impl Scenario {
    pub fn new(network: RoadNetwork, sim: SimulationConfig) -> Self {
        Scenario {
            network: Arc::new(network),
            sim,
            reward: RewardParams::default(),
            retrieval_k: 1,
        }
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(BenchError::io(path))?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| BenchError::Json {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_file(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_file(file: ScenarioFile, base: &Path) -> Result<Self, BenchError> {
        let network = match file.network.strip_prefix("builtin:") {
            Some(name) => builtin_network(name).ok_or_else(|| {
                BenchError::Validation(format!("unknown built-in network {name:?}"))
            })?,
            None => RoadNetwork::load(&base.join(&file.network))?,
        };
        file.sim.validate()?;
        file.reward.validate()?;
        if file.retrieval_k == 0 {
            return Err(BenchError::Validation("retrieval_k must be >= 1".into()));
        }
        Ok(Scenario {
            network: Arc::new(network),
            sim: file.sim,
            reward: file.reward,
            retrieval_k: file.retrieval_k,
        })
    }
}

/// Everything one run needs besides the scenario itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: PathBuf,
    pub policy: Policy,
    #[serde(default)]
    pub backend: BackendConfig,
    pub out: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub decision_interval: Option<u32>,
    /// Guidance repository directory used for deep reasoning.
    #[serde(default)]
    pub guidance: Option<PathBuf>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.policy == Policy::Remote && self.backend.kind != BackendKind::Remote {
            return Err(BenchError::Validation(
                "remote policy requires a remote backend".into(),
            ));
        }
        if self.decision_interval == Some(0) {
            return Err(BenchError::Validation(
                "decision interval must be >= 1".into(),
            ));
        }
        self.backend.validate()?;
        Ok(())
    }
}

/// One decision of one intersection, with the reward observed over the
/// following decision interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: u32,
    pub intersection: String,
    pub type_id: String,
    pub mode: ReasoningMode,
    pub phase: usize,
    pub fallback_used: bool,
    /// A parseable prompt/response pair was captured.
    pub trajectory: bool,
    pub ql_t: usize,
    pub ql_next: usize,
    pub wte: f64,
    pub reward: f64,
    pub prompt_hash: Option<String>,
    pub response_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturedTrajectory {
    /// Index into [`RunResult::decisions`].
    pub decision: usize,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: MetricsReport,
    pub decisions: Vec<DecisionRecord>,
    pub trajectories: Vec<CapturedTrajectory>,
    pub buffers: BufferSet,
    pub cases: Vec<HistoricalCase>,
    /// Deep decisions whose guidance retrieval failed.
    pub retrieval_failures: usize,
    /// Agent calls that got no reply from the backend.
    pub backend_failures: usize,
}

struct Choice {
    phase: usize,
    mode: ReasoningMode,
    fallback_used: bool,
    prompt: Option<String>,
    response: Option<String>,
    case_start: Option<(TrafficObservation, EmergencyVehicleState)>,
    retrieval_failed: bool,
    backend_failed: bool,
}

struct Context<'a> {
    sim: &'a Simulator,
    evs: &'a [EmergencyVehicleState],
    gateway: Option<&'a Gateway>,
    repo: Option<&'a GuidanceRepository>,
    k: usize,
}

impl Context<'_> {
    fn agent_choice(&self, i: usize) -> Result<Choice, BenchError> {
        let net = self.sim.network();
        let gateway = self.gateway.ok_or_else(|| {
            BenchError::Validation("agent policies need a language-model backend".into())
        })?;
        let obs = observe(self.sim, i);
        let mode = select_mode(net, i, self.evs);
        let ev = relevant_emergency(net, i, self.evs);
        let mut retrieval_failed = false;
        let guidance: Vec<GuidanceItem> = match (mode, ev, self.repo) {
            (ReasoningMode::Deep, Some(ev), Some(repo)) => {
                match retrieve_for(&obs, ev, repo, self.k, gateway, gateway) {
                    Ok(hits) => hits.into_iter().map(|h| h.0).collect(),
                    Err(e) => {
                        warn!(
                            "guidance retrieval failed at {}: {e}",
                            net.intersections()[i].id
                        );
                        retrieval_failed = true;
                        Vec::new()
                    }
                }
            }
            _ => Vec::new(),
        };
        let out = decide(&obs, mode, ev, &guidance, gateway)?;
        Ok(Choice {
            phase: out.decision.phase,
            mode,
            fallback_used: out.decision.fallback_used,
            backend_failed: out.response.is_none(),
            prompt: Some(out.prompt.text),
            response: out.response,
            case_start: trajectory_case_start(mode, ev, obs),
            retrieval_failed,
        })
    }

    fn rule_choice(&self, i: usize, phase: usize) -> Choice {
        let net = self.sim.network();
        let mode = select_mode(net, i, self.evs);
        let ev = relevant_emergency(net, i, self.evs);
        let case_start = match (mode, ev) {
            (ReasoningMode::Deep, Some(ev)) => Some((observe(self.sim, i), ev.clone())),
            _ => None,
        };
        Choice {
            phase,
            mode,
            fallback_used: false,
            prompt: None,
            response: None,
            case_start,
            retrieval_failed: false,
            backend_failed: false,
        }
    }
}

fn trajectory_case_start(
    mode: ReasoningMode,
    ev: Option<&EmergencyVehicleState>,
    obs: TrafficObservation,
) -> Option<(TrafficObservation, EmergencyVehicleState)> {
    match (mode, ev) {
        (ReasoningMode::Deep, Some(ev)) => Some((obs, ev.clone())),
        _ => None,
    }
}

struct Pending {
    record: DecisionRecord,
    prompt: Option<String>,
    response: Option<String>,
    case_start: Option<(TrafficObservation, EmergencyVehicleState)>,
    wte: f64,
}

/// Runs the closed loop: at each decision point every intersection observes,
/// gates its reasoning mode, retrieves guidance when deep, and decides; the
/// chosen phases are held for the decision interval, after which each
/// decision is rewarded and its trajectory appended to the buffer of its
/// intersection type.
pub fn simulate(
    scenario: &Scenario,
    policy: Policy,
    seed: u64,
    decision_interval: Option<u32>,
    gateway: Option<&Gateway>,
    repo: Option<&GuidanceRepository>,
) -> Result<RunResult, BenchError> {
    let mut config = scenario.sim.clone();
    config.seed = seed;
    if let Some(di) = decision_interval {
        config.decision_interval = di;
    }
    let di = config.decision_interval;
    let mut sim = Simulator::new(scenario.network.clone(), config)?;
    let net = scenario.network.clone();
    let n = net.intersections().len();
    let type_ids: Vec<String> = net
        .intersections()
        .iter()
        .map(|x| x.type_id(&net))
        .collect();
    let mut phases = vec![1usize; n];
    let mut cycle = vec![0usize; n];
    let mut random = stream_rng(seed, u64::MAX - 1);

    let mut result = RunResult {
        metrics: sim.metrics(),
        decisions: Vec::new(),
        trajectories: Vec::new(),
        buffers: BufferSet::new(),
        cases: Vec::new(),
        retrieval_failures: 0,
        backend_failures: 0,
    };
    let mut pending: Vec<Pending> = Vec::new();

    while !sim.is_finished() {
        let step = sim.current_step();
        if step % di == 0 {
            let evs = sim.active_emergencies();
            let ctx = Context {
                sim: &sim,
                evs: &evs,
                gateway,
                repo,
                k: scenario.retrieval_k,
            };
            let choices: Vec<Choice> = match policy {
                Policy::MockHeuristic | Policy::Remote => (0..n)
                    .into_par_iter()
                    .map(|i| ctx.agent_choice(i))
                    .collect::<Result<_, _>>()?,
                Policy::FixedTime => (0..n)
                    .map(|i| {
                        let j = net.intersections()[i].num_phases();
                        let c = ctx.rule_choice(i, cycle[i] % j + 1);
                        cycle[i] += 1;
                        c
                    })
                    .collect(),
                Policy::Random => (0..n)
                    .map(|i| {
                        let j = net.intersections()[i].num_phases();
                        ctx.rule_choice(i, random.random_range(1..=j))
                    })
                    .collect(),
            };
            for (i, c) in choices.into_iter().enumerate() {
                phases[i] = c.phase;
                result.retrieval_failures += usize::from(c.retrieval_failed);
                result.backend_failures += usize::from(c.backend_failed);
                let trajectory = policy.uses_agents() && !c.fallback_used && c.response.is_some();
                pending.push(Pending {
                    record: DecisionRecord {
                        step,
                        intersection: net.intersections()[i].id.clone(),
                        type_id: type_ids[i].clone(),
                        mode: c.mode,
                        phase: c.phase,
                        fallback_used: c.fallback_used,
                        trajectory,
                        ql_t: sim.queue_length(i),
                        ql_next: 0,
                        wte: 0.0,
                        reward: 0.0,
                        prompt_hash: c.prompt.as_deref().map(text_hash),
                        response_hash: c.response.as_deref().map(text_hash),
                    },
                    prompt: c.prompt,
                    response: c.response,
                    case_start: c.case_start,
                    wte: 0.0,
                });
            }
        }
        let outcome = sim.step(&phases)?;
        for (k, p) in pending.iter_mut().enumerate() {
            p.wte += outcome.intersections[k].emergency_wait;
        }
        if sim.current_step() % di == 0 || sim.is_finished() {
            settle(&mut sim, &mut pending, &mut result, &scenario.reward)?;
        }
    }
    result.metrics = sim.metrics();
    info!(
        "{} run finished: {} decisions, ATT {:.1}, AWTE {:?}",
        policy.name(),
        result.decisions.len(),
        result.metrics.att,
        result.metrics.awte
    );
    Ok(result)
}

fn settle(
    sim: &mut Simulator,
    pending: &mut Vec<Pending>,
    result: &mut RunResult,
    reward: &RewardParams,
) -> Result<(), BenchError> {
    for (i, mut p) in pending.drain(..).enumerate() {
        let ql_next = sim.queue_length(i);
        p.record.ql_next = ql_next;
        p.record.wte = p.wte;
        p.record.reward = compute_reward(p.record.ql_t as f64, ql_next as f64, p.wte, reward)?;
        if let Some((obs_t, ev_t)) = p.case_start {
            if let Some(v) = sim.vehicles().iter().find(|v| v.name() == ev_t.vehicle_id) {
                result.cases.push(HistoricalCase {
                    obs_t,
                    action: p.record.phase,
                    obs_next: observe(sim, i),
                    ev_next: sim.emergency_state(v),
                    ev_t,
                });
            }
        }
        let index = result.decisions.len();
        if p.record.trajectory {
            let (prompt, response) = (p.prompt.unwrap_or_default(), p.response.unwrap_or_default());
            result.buffers.push(ReasoningTrajectory {
                prompt: prompt.clone(),
                response: response.clone(),
                reward: p.record.reward,
                type_id: p.record.type_id.clone(),
                step: p.record.step as usize,
                intersection: p.record.intersection.clone(),
            })?;
            result.trajectories.push(CapturedTrajectory {
                decision: index,
                prompt,
                response,
            });
        }
        result.decisions.push(p.record);
    }
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.json";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const BUFFERS_FILE: &str = "buffers.jsonl";
pub const CASES_FILE: &str = "cases.jsonl";
pub const IMITATION_FILE: &str = "imitation.jsonl";
pub const REFINEMENT_FILE: &str = "refinement.jsonl";
pub const COMPARISON_FILE: &str = "comparison.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| BenchError::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(BenchError::io(path))
}

/// Loads the manifest's scenario, backend and guidance, runs it, and writes
/// `metrics.json`, `decisions.jsonl`, `buffers.jsonl` and `cases.jsonl` under
/// the output directory.
pub fn run(manifest: &RunManifest) -> Result<RunResult, BenchError> {
    manifest.validate()?;
    let scenario = Scenario::load(&manifest.scenario)?;
    let gateway = if manifest.policy.uses_agents() {
        Some(Gateway::from_config(&manifest.backend)?)
    } else {
        None
    };
    let repo = manifest
        .guidance
        .as_deref()
        .map(GuidanceRepository::load)
        .transpose()?;
    let result = simulate(
        &scenario,
        manifest.policy,
        manifest.seed,
        manifest.decision_interval,
        gateway.as_ref(),
        repo.as_ref(),
    )?;
    if manifest.policy == Policy::Remote
        && !result.decisions.is_empty()
        && result.backend_failures == result.decisions.len()
    {
        return Err(BenchError::Backend(
            "every language-model call failed".into(),
        ));
    }
    write_artifacts(&manifest.out, &result)?;
    Ok(result)
}

pub fn write_artifacts(out: &Path, result: &RunResult) -> Result<(), BenchError> {
    fs::create_dir_all(out).map_err(BenchError::io(out))?;
    write_json(&out.join(METRICS_FILE), &result.metrics)?;
    write_jsonl(&out.join(DECISIONS_FILE), &result.decisions)?;
    result.buffers.write_jsonl(&out.join(BUFFERS_FILE))?;
    write_jsonl(&out.join(CASES_FILE), &result.cases)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectReport {
    pub trajectories: usize,
    pub kept: usize,
    /// Rejected because the forward reward sum fell below the threshold.
    pub below_threshold: usize,
    /// Rejected because the run ended before the forward window completed.
    pub incomplete_window: usize,
}

/// Applies the reward filter to each captured trajectory, using the rewards
/// of the same intersection's next `t_re` decisions (its own included).
pub fn filter_captured(
    result: &RunResult,
    filter: &FilterParams,
) -> Result<(Vec<FineTuneRecord>, CollectReport), BenchError> {
    let mut report = CollectReport {
        trajectories: result.trajectories.len(),
        kept: 0,
        below_threshold: 0,
        incomplete_window: 0,
    };
    let mut kept = Vec::new();
    for t in &result.trajectories {
        let own = &result.decisions[t.decision];
        let window: Vec<f64> = result.decisions[t.decision..]
            .iter()
            .filter(|d| d.intersection == own.intersection)
            .take(filter.t_re)
            .map(|d| d.reward)
            .collect();
        let keep = if window.len() < filter.t_re {
            if !filter.disabled() {
                report.incomplete_window += 1;
            }
            filter.disabled()
        } else if filter_trajectory(&window, filter)? {
            true
        } else {
            report.below_threshold += 1;
            false
        };
        if keep {
            kept.push(FineTuneRecord {
                prompt: t.prompt.clone(),
                response: t.response.clone(),
                weight: 1.0,
            });
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

/// Runs the manifest and writes the filtered imitation dataset. An empty
/// result still produces an (empty) file.
pub fn collect_imitation(
    manifest: &RunManifest,
    filter: &FilterParams,
) -> Result<CollectReport, BenchError> {
    if !manifest.policy.uses_agents() {
        return Err(BenchError::Validation(
            "imitation collection needs a language-model policy".into(),
        ));
    }
    let result = run(manifest)?;
    let (records, report) = filter_captured(&result, filter)?;
    let path = manifest.out.join(IMITATION_FILE);
    if records.is_empty() {
        warn!(
            "no trajectory passed the filter ({} below threshold, {} incomplete)",
            report.below_threshold, report.incomplete_window
        );
        fs::write(&path, "").map_err(BenchError::io(&path))?;
    } else {
        export_dataset(&records, &path, DatasetKind::Imitation)?;
    }
    write_json(&manifest.out.join("collect.json"), &report)?;
    Ok(report)
}

/// Evenly spaced subset of at most `max` cases, first and order preserved.
pub fn thin_cases(cases: Vec<HistoricalCase>, max: usize) -> Vec<HistoricalCase> {
    if max == 0 || cases.len() <= max {
        return cases;
    }
    let n = cases.len();
    (0..max).map(|k| cases[k * n / max].clone()).collect()
}

/// Reviews the logged cases, embeds the resulting guidance, and saves the
/// repository under `out`.
pub fn build_guidance(
    case_log: &Path,
    gateway: &Gateway,
    out: &Path,
    max_cases: usize,
) -> Result<GuidanceRepository, BenchError> {
    let cases: Vec<HistoricalCase> = read_jsonl(case_log)?;
    if cases.is_empty() {
        return Err(RagError::EmptyCases.into());
    }
    let cases = thin_cases(cases, max_cases);
    let items = review_cases(&cases, gateway)?;
    let repo = GuidanceRepository::build(items, gateway)?;
    repo.save(out)?;
    Ok(repo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementParams {
    pub max_epoch: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Clamp negative rewards to zero weight.
    pub clamp_negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementEpoch {
    pub epoch: usize,
    pub type_ids: Vec<String>,
    pub mean_rewards: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub records: usize,
}

/// Prioritized refinement datasets, one per epoch, written as
/// `refinement.jsonl` (all epochs, in order) and `refinement-<e>.jsonl`.
pub fn export_refinement(
    buffers: &BufferSet,
    params: &RefinementParams,
    out: &Path,
) -> Result<Vec<RefinementEpoch>, BenchError> {
    if params.max_epoch == 0 || params.batch_size == 0 {
        return Err(BenchError::Validation(
            "max_epoch and batch_size must be >= 1".into(),
        ));
    }
    let bufs: Vec<_> = buffers
        .buffers()
        .into_iter()
        .filter(|b| !b.is_empty())
        .collect();
    if bufs.is_empty() {
        return Err(BenchError::Validation("no experience to refine on".into()));
    }
    fs::create_dir_all(out).map_err(BenchError::io(out))?;
    let means: Vec<f64> = bufs.iter().map(|b| b.mean_reward()).collect();
    let probs = sampling_probabilities(&means, params.epsilon)?;
    let mut all = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 1..=params.max_epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(epoch as u64);
        let batch = sample_refinement_batch(&bufs, &probs, params.batch_size, &mut rng)?;
        let records: Vec<FineTuneRecord> = batch
            .iter()
            .map(|t| FineTuneRecord::from_trajectory(t, params.clamp_negative))
            .collect();
        export_dataset(
            &records,
            &out.join(format!("refinement-{epoch}.jsonl")),
            DatasetKind::Refinement,
        )?;
        epochs.push(RefinementEpoch {
            epoch,
            type_ids: bufs.iter().map(|b| b.type_id().to_string()).collect(),
            mean_rewards: means.clone(),
            probabilities: probs.clone(),
            records: records.len(),
        });
        all.extend(records);
    }
    export_dataset(&all, &out.join(REFINEMENT_FILE), DatasetKind::Refinement)?;
    Ok(epochs)
}

/// Rebuilds buffers from a `buffers.jsonl` snapshot.
pub fn load_buffers(path: &Path) -> Result<BufferSet, BenchError> {
    let rows: Vec<ReasoningTrajectory> = read_jsonl(path)?;
    let mut set = BufferSet::new();
    for r in rows {
        set.push(r)?;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub att: Option<f64>,
    pub awt: Option<f64>,
    pub aql: Option<f64>,
    pub atte: Option<f64>,
    pub awte: Option<f64>,
}

/// `(x - base) / base`, absent when either side is missing or the base is 0.
pub fn relative_delta(x: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (x, base) {
        (Some(x), Some(b)) if b != 0.0 => Some((x - b) / b),
        _ => None,
    }
}

impl MetricDeltas {
    pub fn between(m: &MetricsReport, base: &MetricsReport) -> Self {
        MetricDeltas {
            att: relative_delta(Some(m.att), Some(base.att)),
            awt: relative_delta(Some(m.awt), Some(base.awt)),
            aql: relative_delta(Some(m.aql), Some(base.aql)),
            atte: relative_delta(m.atte, base.atte),
            awte: relative_delta(m.awte, base.awte),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub metrics: MetricsReport,
    pub deltas: MetricDeltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: Policy,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, policy: Policy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    /// CSV with aggregate metrics and one column per emergency vehicle.
    pub fn to_csv(&self) -> String {
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let width = self
            .rows
            .iter()
            .map(|r| r.metrics.emergency_travel_times.len())
            .max()
            .unwrap_or(0);
        let mut s = String::from("policy,ATT,AWT,AQL,ATTE,AWTE");
        for k in 1..=width {
            let _ = write!(s, ",ev_tt_{k}");
        }
        s.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                r.policy.name(),
                m.att,
                m.awt,
                m.aql,
                fmt(m.atte),
                fmt(m.awte)
            );
            for k in 0..width {
                let _ = write!(s, ",{}", fmt(m.emergency_travel_times.get(k).copied()));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every manifest (in parallel) and reports metrics relative to the
/// `baseline` policy. All manifests must share scenario, seed and decision
/// interval.
pub fn compare(
    manifests: &[RunManifest],
    baseline: Policy,
    out: Option<&Path>,
) -> Result<ComparisonReport, BenchError> {
    if manifests.len() < 2 {
        return Err(BenchError::Validation(
            "comparison needs at least two runs".into(),
        ));
    }
    let first = &manifests[0];
    for m in &manifests[1..] {
        if m.scenario != first.scenario {
            return Err(BenchError::ScenarioMismatch(format!(
                "scenario {} vs {}",
                m.scenario.display(),
                first.scenario.display()
            )));
        }
        if m.seed != first.seed {
            return Err(BenchError::ScenarioMismatch(format!(
                "seed {} vs {}",
                m.seed, first.seed
            )));
        }
        if m.decision_interval != first.decision_interval {
            return Err(BenchError::ScenarioMismatch(
                "decision intervals differ".into(),
            ));
        }
    }
    let mut policies: Vec<Policy> = manifests.iter().map(|m| m.policy).collect();
    policies.sort();
    if policies.windows(2).any(|w| w[0] == w[1]) {
        return Err(BenchError::Validation(
            "each policy may appear only once".into(),
        ));
    }
    let base_index = manifests
        .iter()
        .position(|m| m.policy == baseline)
        .ok_or_else(|| {
            BenchError::Validation(format!("baseline {} not among runs", baseline.name()))
        })?;
    let metrics: Vec<MetricsReport> = manifests
        .par_iter()
        .map(|m| run(m).map(|r| r.metrics))
        .collect::<Result<_, _>>()?;
    let base = &metrics[base_index];
    let report = ComparisonReport {
        baseline,
        seed: first.seed,
        rows: manifests
            .iter()
            .zip(&metrics)
            .map(|(m, r)| ComparisonRow {
                policy: m.policy,
                metrics: r.clone(),
                deltas: MetricDeltas::between(r, base),
            })
            .collect(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(BenchError::io(dir))?;
        let csv = dir.join(COMPARISON_FILE);
        fs::write(&csv, report.to_csv()).map_err(BenchError::io(&csv))?;
        write_json(&dir.join("comparison.json"), &report)?;
    }
    Ok(report)
}
