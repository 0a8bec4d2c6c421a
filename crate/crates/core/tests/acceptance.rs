//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regtsc::agent::{decide, ReasoningMode};
use regtsc::bench::{build_guidance, run, Policy, RunManifest, CASES_FILE, METRICS_FILE};
use regtsc::gateway::{BackendConfig, ChatBackend, ChatRequest, Gateway, GatewayError};
use regtsc::network::{jinan_like, RoadNetwork};
use regtsc::observation::{empty_observation, render_emergency_prompt};
use regtsc::rerag::{
    cosine_similarity, retrieve, EmbeddingVector, GuidanceItem, GuidanceRepository,
};
use regtsc::sim::{stream_rng, LaneEvent, SimulationConfig, Simulator};
use regtsc::training::{
    compute_reward, filter_trajectory, sample_refinement_batch, sampling_probabilities, toy_nll,
    toy_weighted_nll, ExperienceBuffer, FilterParams, ReasoningTrajectory, RewardParams, ToyModel,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn item(id: String) -> GuidanceItem {
    GuidanceItem {
        situation: format!("situation {id}"),
        recommended_action: "act".into(),
        intended_effect: "effect".into(),
        id,
    }
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    EmbeddingVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Repository of `d` random vectors; some entries repeat an earlier vector to
/// force score ties. Ids are shuffled relative to insertion order.
fn random_repo(rng: &mut ChaCha8Rng, d: usize, dim: usize) -> GuidanceRepository {
    let mut vectors: Vec<EmbeddingVector> = Vec::with_capacity(d);
    for k in 0..d {
        if k > 0 && rng.random_bool(0.2) {
            let j = rng.random_range(0..k);
            vectors.push(vectors[j].clone());
        } else {
            vectors.push(random_vector(rng, dim));
        }
    }
    let mut ids: Vec<usize> = (0..d).collect();
    for k in (1..d).rev() {
        ids.swap(k, rng.random_range(0..=k));
    }
    let items = ids.into_iter().map(|i| item(format!("g{i:03}"))).collect();
    GuidanceRepository::new(items, vectors).unwrap()
}

fn brute_force(q: &EmbeddingVector, repo: &GuidanceRepository, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = repo
        .items()
        .iter()
        .zip(repo.vectors())
        .map(|(it, v)| (it.id.clone(), cosine_similarity(q, v).unwrap()))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checks = 0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=64);
        let repo = random_repo(&mut rng, d, 32);
        let q = random_vector(&mut rng, 32);
        let mut ks = vec![1, 3, d];
        ks.dedup();
        for k in ks {
            let got: Vec<(String, f64)> = retrieve(&q, &repo, k)
                .unwrap()
                .into_iter()
                .map(|(it, s)| (it.id, s))
                .collect();
            let want = brute_force(&q, &repo, k);
            ensure!(got == want, "mismatch at D={d} K={k}");
            checks += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{checks} queries, 0 mismatches, {elapsed:.2?}"))
}

fn criterion_2() -> Outcome {
    let a = EmbeddingVector(vec![1.0, 2.0, 2.0]);
    let b = EmbeddingVector(vec![2.0, 0.0, 1.0]);
    let c = cosine_similarity(&a, &b).unwrap();
    let hand = 4.0 / (3.0 * 5f64.sqrt());
    ensure!((c - hand).abs() < 1e-12, "cosine {c} vs {hand}");
    ensure!((c - 0.596284).abs() < 1e-6, "cosine {c}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let d = rng.random_range(1..=64);
        let repo = random_repo(&mut rng, d, 32);
        let q = random_vector(&mut rng, 32);
        let ids = |q: &EmbeddingVector| -> Vec<String> {
            retrieve(q, &repo, d)
                .unwrap()
                .into_iter()
                .map(|(it, _)| it.id)
                .collect()
        };
        ensure!(
            ids(&q) == ids(&q.scaled(7.0)),
            "ranking changed under q -> 7q (D={d})"
        );
    }
    Ok(format!(
        "cos = {c:.12}, ranking invariant under q -> 7q on 500 repositories"
    ))
}

fn criterion_3() -> Outcome {
    let p = RewardParams::default();
    let oracle = |ql: f64, qn: f64, wte: f64| {
        let denom = if qn < 1.0 { 1.0 } else { qn };
        p.lambda1 * (ql - qn) / denom + p.lambda2 * (p.tau - wte) / (wte + p.gamma)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut clamped = 0;
    for n in 0..10_000 {
        let (ql, qn) = if n % 2 == 0 {
            (
                rng.random_range(0..60) as f64,
                rng.random_range(0..60) as f64,
            )
        } else {
            (rng.random_range(0.0..60.0), rng.random_range(0.0..3.0))
        };
        let wte = if rng.random_bool(0.3) {
            0.0
        } else {
            rng.random_range(0.0..600.0)
        };
        if qn < 1.0 {
            clamped += 1;
        }
        let r = compute_reward(ql, qn, wte, &p).map_err(|e| e.to_string())?;
        let o = oracle(ql, qn, wte);
        ensure!((r - o).abs() < 1e-12, "({ql}, {qn}, {wte}): {r} vs {o}");
    }
    let examples = [
        ((10.0, 5.0, 0.0), 10.0),
        ((4.0, 4.0, 5.0), 0.0),
        ((3.0, 0.0, 0.0), 20.0),
    ];
    for ((a, b, c), want) in examples {
        let r = compute_reward(a, b, c, &p).map_err(|e| e.to_string())?;
        ensure!(r == want, "({a}, {b}, {c}) gave {r}, expected {want}");
    }
    Ok(format!(
        "10000 triples ({clamped} on the clamp path), examples 10/0/20 exact"
    ))
}

fn traj(type_id: &str) -> ReasoningTrajectory {
    ReasoningTrajectory {
        prompt: String::new(),
        response: String::new(),
        reward: 0.0,
        type_id: type_id.into(),
        step: 0,
        intersection: String::new(),
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.random_range(1..10);
        let means: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let eps = rng.random_range(0.01..1.0);
        let p = sampling_probabilities(&means, eps).map_err(|e| e.to_string())?;
        let sum: f64 = p.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
        for i in 0..n {
            for j in 0..n {
                if means[i] < means[j] {
                    ensure!(p[i] > p[j], "monotonicity violated: {means:?} -> {p:?}");
                }
            }
        }
    }
    let expected = [0.0542, 0.8670, 0.0788];
    let p = sampling_probabilities(&[1.0, -0.5, 0.5], 0.1).map_err(|e| e.to_string())?;
    for (a, b) in p.iter().zip(expected) {
        ensure!((a - b).abs() <= 5e-4, "worked example {p:?}");
    }
    let buffers: Vec<ExperienceBuffer> = ["a", "b", "c"]
        .iter()
        .map(|t| {
            let mut b = ExperienceBuffer::new(*t);
            b.push(traj(t)).unwrap();
            b
        })
        .collect();
    let refs: Vec<&ExperienceBuffer> = buffers.iter().collect();
    let draws = 100_000;
    let batch = sample_refinement_batch(&refs, &p, draws, &mut rng).map_err(|e| e.to_string())?;
    let mut freq = [0.0; 3];
    for t in &batch {
        freq[(t.type_id.as_bytes()[0] - b'a') as usize] += 1.0 / draws as f64;
    }
    for (f, e) in freq.iter().zip(expected) {
        ensure!((f - e).abs() <= 0.01, "frequencies {freq:?}");
    }
    Ok(format!(
        "1000 vectors normalized and monotone, example [{:.4}, {:.4}, {:.4}], 100k draws [{:.4}, {:.4}, {:.4}]",
        p[0], p[1], p[2], freq[0], freq[1], freq[2]
    ))
}

fn criterion_5() -> Outcome {
    let (loss, _) =
        toy_weighted_nll(&ToyModel::uniform(2), &[(vec![1], 2.0)]).map_err(|e| e.to_string())?;
    ensure!((loss - 2.0 * 2f64.ln()).abs() < 1e-9, "closed form {loss}");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let vocab = rng.random_range(2..6);
        let logits = (0..(vocab + 1) * vocab)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let model = ToyModel::from_logits(vocab, logits).map_err(|e| e.to_string())?;
        let batch: Vec<(Vec<usize>, f64)> = (0..rng.random_range(1..6))
            .map(|_| {
                let len = rng.random_range(1..8);
                (
                    (0..len).map(|_| rng.random_range(0..vocab)).collect(),
                    rng.random_range(-1.0..3.0),
                )
            })
            .collect();
        let (_, grad) = toy_weighted_nll(&model, &batch).unwrap();
        let h = 1e-5;
        for k in 0..grad.len() {
            let mut plus = model.clone();
            plus.logits_mut()[k] += h;
            let mut minus = model.clone();
            minus.logits_mut()[k] -= h;
            let fd = (toy_weighted_nll(&plus, &batch).unwrap().0
                - toy_weighted_nll(&minus, &batch).unwrap().0)
                / (2.0 * h);
            let scale = grad[k].abs().max(fd.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (grad[k] - fd).abs() / scale;
            worst = worst.max(rel);
            ensure!(rel < 1e-4, "logit {k}: analytic {} vs fd {fd}", grad[k]);
        }
        let seqs: Vec<Vec<usize>> = batch.iter().map(|(s, _)| s.clone()).collect();
        let unit: Vec<(Vec<usize>, f64)> = seqs.iter().map(|s| (s.clone(), 1.0)).collect();
        let weighted = toy_weighted_nll(&model, &unit).unwrap().0;
        let plain = toy_nll(&model, &seqs).unwrap();
        ensure!(
            (weighted - plain).abs() <= 4.0 * f64::EPSILON * plain.abs(),
            "{weighted} vs {plain}"
        );
    }
    Ok(format!(
        "2 ln 2 = {loss:.12}, worst gradient relative error {worst:.2e} over 100 models"
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut windows, mut boundary, mut kept) = (0, 0, 0);
    for _ in 0..10_000 {
        let len = rng.random_range(1..30);
        let t_re = rng.random_range(1..=len);
        // Quarter-valued rewards keep every partial sum exact, so sums land
        // on the threshold itself regularly.
        let stream: Vec<f64> = (0..len)
            .map(|_| rng.random_range(-8..=8) as f64 * 0.25)
            .collect();
        let eta = rng.random_range(-8..=8) as f64 * 0.25;
        let params = FilterParams::new(t_re, eta).map_err(|e| e.to_string())?;
        for start in 0..=len - t_re {
            let window = &stream[start..start + t_re];
            let mut sum = 0.0;
            for r in window {
                sum += r;
            }
            let want = sum >= eta;
            let got = filter_trajectory(window, &params).map_err(|e| e.to_string())?;
            ensure!(got == want, "window {window:?} eta {eta}: got {got}");
            windows += 1;
            kept += got as usize;
            if sum == eta {
                boundary += 1;
                ensure!(got, "sum exactly eta must be kept");
            }
        }
    }
    ensure!(boundary > 0, "no boundary cases generated");
    Ok(format!(
        "{windows} windows ({kept} kept, {boundary} exactly at eta)"
    ))
}

fn write_scenario(dir: &Path, network: &str, steps: u32, m: u32, rate: f64) -> std::path::PathBuf {
    let path = dir.join(format!("{}.scenario.json", network.replace(':', "_")));
    let doc = serde_json::json!({
        "network": network,
        "sim": {"steps": steps, "emergency_count": m, "arrival_rate": rate},
    });
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

fn manifest(scenario: &Path, policy: Policy, out: std::path::PathBuf, seed: u64) -> RunManifest {
    RunManifest {
        scenario: scenario.to_path_buf(),
        policy,
        backend: BackendConfig::mock(),
        out,
        seed,
        decision_interval: None,
        guidance: None,
    }
}

fn criterion_7() -> Outcome {
    let net = Arc::new(jinan_like());
    let mut steps_checked = 0;
    for seed in 0..50u64 {
        let config = SimulationConfig {
            steps: 300,
            seed,
            emergency_count: 2,
            ..Default::default()
        };
        let mut sim = Simulator::new(net.clone(), config).map_err(|e| e.to_string())?;
        sim.enable_lane_log();
        while !sim.is_finished() {
            let mut rng = stream_rng(seed ^ 0xacce, u64::from(sim.current_step()));
            let phases: Vec<usize> = net
                .intersections()
                .iter()
                .map(|x| rng.random_range(1..=x.num_phases()))
                .collect();
            let out = sim.step(&phases).map_err(|e| e.to_string())?;
            ensure!(
                sim.spawned_total() == sim.active_total() + sim.completed_total()
                    && out.spawned_total == out.active + out.completed,
                "seed {seed} step {}: conservation violated",
                out.step
            );
            steps_checked += 1;
        }
        let mut entered: std::collections::HashMap<usize, std::collections::VecDeque<usize>> =
            Default::default();
        for e in sim.lane_log() {
            match *e {
                LaneEvent::Enter { lane, vehicle } => {
                    entered.entry(lane).or_default().push_back(vehicle)
                }
                LaneEvent::Leave { lane, vehicle } => {
                    let head = entered.get_mut(&lane).and_then(|q| q.pop_front());
                    ensure!(
                        head == Some(vehicle),
                        "seed {seed}: lane {lane} released {vehicle} out of order"
                    );
                }
            }
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = write_scenario(dir.path(), "builtin:jinan", 900, 6, 57.14);
    for policy in [Policy::FixedTime, Policy::MockHeuristic] {
        let a = dir.path().join(format!("{}-a", policy.name()));
        let b = dir.path().join(format!("{}-b", policy.name()));
        run(&manifest(&scenario, policy, a.clone(), 11)).map_err(|e| e.to_string())?;
        run(&manifest(&scenario, policy, b.clone(), 11)).map_err(|e| e.to_string())?;
        let (x, y) = (
            std::fs::read(a.join(METRICS_FILE)).unwrap(),
            std::fs::read(b.join(METRICS_FILE)).unwrap(),
        );
        ensure!(
            x == y,
            "{} metrics.json differs between identical runs",
            policy.name()
        );
    }
    Ok(format!(
        "50 seeds, {steps_checked} steps conserved, FIFO held, metrics.json byte-identical"
    ))
}

fn criterion_8() -> Outcome {
    let p = render_emergency_prompt(
        &common::reference_observation(),
        &common::reference_ev(),
        &[common::reference_guidance()],
    );
    let golden = std::fs::read_to_string(common::fixture("emergency_prompt.txt"))
        .map_err(|e| e.to_string())?;
    ensure!(p.text == golden, "rendered prompt differs from golden file");
    for lit in ["276.8", "17.4", "<signal>", "</signal>"] {
        ensure!(p.text.contains(lit), "missing literal {lit}");
    }
    Ok(format!("{} bytes identical to golden", golden.len()))
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = write_scenario(dir.path(), "builtin:jinan", 1800, 6, 57.14);
    let seed = 1;
    let fixed = run(&manifest(
        &scenario,
        Policy::FixedTime,
        dir.path().join("fixed"),
        seed,
    ))
    .map_err(|e| e.to_string())?;
    let bootstrap_out = dir.path().join("bootstrap");
    run(&manifest(
        &scenario,
        Policy::MockHeuristic,
        bootstrap_out.clone(),
        seed,
    ))
    .map_err(|e| e.to_string())?;
    let gateway = Gateway::from_config(&BackendConfig::mock()).map_err(|e| e.to_string())?;
    let repo_dir = dir.path().join("guidance");
    let repo = build_guidance(&bootstrap_out.join(CASES_FILE), &gateway, &repo_dir, 50)
        .map_err(|e| e.to_string())?;
    let mut m = manifest(
        &scenario,
        Policy::MockHeuristic,
        dir.path().join("rerag"),
        seed,
    );
    m.guidance = Some(repo_dir);
    let agent = run(&m).map_err(|e| e.to_string())?;
    let deep = agent
        .decisions
        .iter()
        .filter(|d| d.mode == ReasoningMode::Deep)
        .count();
    ensure!(deep > 0, "no emergency-mode decisions were made");
    ensure!(
        agent.retrieval_failures == 0,
        "{} retrieval failures",
        agent.retrieval_failures
    );
    let (fa, aa) = (
        fixed.metrics.awte.unwrap_or(f64::NAN),
        agent.metrics.awte.unwrap_or(f64::NAN),
    );
    let (ft, at) = (fixed.metrics.att, agent.metrics.att);
    let elapsed = start.elapsed();
    let summary = format!(
        "AWTE {aa:.2} vs {fa:.2} (ratio {:.3}), ATT {at:.2} vs {ft:.2} (ratio {:.3}), {} guidance items, {deep} deep decisions, {elapsed:.1?}",
        aa / fa,
        at / ft,
        repo.len()
    );
    ensure!(aa <= 0.5 * fa, "AWTE bound violated: {summary}");
    ensure!(at <= 1.05 * ft, "ATT bound violated: {summary}");
    ensure!(elapsed < Duration::from_secs(300), "too slow: {summary}");
    Ok(summary)
}

struct FixedReply(String);

impl ChatBackend for FixedReply {
    fn chat(&self, _: &ChatRequest) -> Result<String, GatewayError> {
        Ok(self.0.clone())
    }
    fn model(&self) -> &str {
        "fixed"
    }
}

const TAGS: [&str; 3] = ["traffic analysis", "evaluation and explanation", "signal"];

fn mutate(rng: &mut ChaCha8Rng, base: &str) -> String {
    let mut s = base.to_string();
    for _ in 0..rng.random_range(1..4) {
        let chars: Vec<char> = s.chars().collect();
        let at = rng.random_range(0..=chars.len());
        s = match rng.random_range(0..9) {
            0 => chars[..at].iter().collect(),
            1 => {
                let end = rng.random_range(at..=chars.len());
                chars[..at].iter().chain(&chars[end..]).collect()
            }
            2 => {
                let junk: String = (0..rng.random_range(1..12))
                    .map(|_| char::from_u32(rng.random_range(32..0x2fff)).unwrap_or('?'))
                    .collect();
                chars[..at].iter().collect::<String>()
                    + &junk
                    + &chars[at..].iter().collect::<String>()
            }
            3 => {
                let phase = [
                    "0",
                    "-1",
                    "99",
                    "3.5",
                    "",
                    " 2 ",
                    "two",
                    "18446744073709551616",
                    "+1",
                ][rng.random_range(0..9)];
                format!("<signal>{phase}</signal>")
            }
            4 => s.replacen("</signal>", "", 1),
            5 => s.replacen("<signal>", "<Signal>", 1),
            6 => format!("{s}<signal>{}</signal>", rng.random_range(-3..12)),
            7 => {
                let tag = TAGS[rng.random_range(0..3)];
                s.replacen(&format!("</{tag}>"), "", 1)
            }
            _ => s.chars().rev().collect(),
        };
    }
    s
}

fn criterion_10() -> Outcome {
    let net: RoadNetwork = jinan_like();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base = "<traffic analysis>queues build on the north approach</traffic analysis>\n\
                <evaluation and explanation>phase 2 clears the longest queue</evaluation and explanation>\n\
                <signal>2</signal>";
    let mut fallbacks = 0;
    for n in 0..1000 {
        let reply = mutate(&mut rng, base);
        let (obs, ev) = if n % 2 == 0 {
            (common::reference_observation(), Some(common::reference_ev()))
        } else {
            let i = rng.random_range(0..net.intersections().len());
            (empty_observation(&net, i), None)
        };
        let j = obs.num_phases();
        let mode = if ev.is_some() {
            ReasoningMode::Deep
        } else {
            ReasoningMode::Lightweight
        };
        let out = decide(&obs, mode, ev.as_ref(), &[], &FixedReply(reply.clone()))
            .map_err(|e| format!("decide failed on {reply:?}: {e}"))?;
        let phase = out.decision.phase;
        ensure!(
            (1..=j).contains(&phase),
            "phase {phase} outside 1..={j} for {reply:?}"
        );
        fallbacks += out.decision.fallback_used as usize;
    }
    Ok(format!(
        "1000 mutated replies, all phases valid ({fallbacks} via fallback)"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("retrieval exactness", criterion_1),
        ("cosine similarity", criterion_2),
        ("reward oracle", criterion_3),
        ("sampler", criterion_4),
        ("loss verifier", criterion_5),
        ("reward filter", criterion_6),
        ("simulator conservation and determinism", criterion_7),
        ("prompt fidelity", criterion_8),
        ("end-to-end emergency behavior", criterion_9),
        ("parse robustness", criterion_10),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", n + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
