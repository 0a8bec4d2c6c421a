//! Training-data side of the controller: per-decision rewards, the imitation
//! filter, per-intersection-type experience buffers with prioritized
//! sampling, weighted dataset export, and a tabular toy model that checks the
//! weighted likelihood loss and its gradient.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("negative or non-finite input: {0}")]
    NegativeInput(String),
    #[error("reward window has {got} entries, expected {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("experience buffer {0:?} is empty but has non-zero sampling probability")]
    EmptyBuffer(String),
    #[error("invalid sampling probabilities: {0}")]
    InvalidProbabilities(String),
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            lambda1: 5.0,
            lambda2: 1.0,
            tau: 5.0,
            gamma: 1.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let all = [self.lambda1, self.lambda2, self.tau, self.gamma];
        if all.iter().any(|x| !x.is_finite()) || self.gamma <= 0.0 {
            return Err(TrainingError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Reward for one decision: relative queue reduction plus an emergency
/// waiting-time term. `wte` is 0 when no emergency vehicle was attributed to
/// the intersection. The queue denominator is clamped at 1.
pub fn compute_reward(
    ql_t: f64,
    ql_next: f64,
    wte: f64,
    params: &RewardParams,
) -> Result<f64, TrainingError> {
    params.validate()?;
    for (name, v) in [("QL_t", ql_t), ("QL_next", ql_next), ("WTE", wte)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(TrainingError::NegativeInput(format!("{name} = {v}")));
        }
    }
    Ok(params.lambda1 * (ql_t - ql_next) / ql_next.max(1.0)
        + params.lambda2 * (params.tau - wte) / (wte + params.gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub t_re: usize,
    /// `f64::NEG_INFINITY` disables filtering.
    pub eta: f64,
}

impl FilterParams {
    pub fn new(t_re: usize, eta: f64) -> Result<Self, TrainingError> {
        if t_re == 0 || eta.is_nan() {
            return Err(TrainingError::InvalidParams(format!(
                "t_re={t_re}, eta={eta}"
            )));
        }
        Ok(FilterParams { t_re, eta })
    }

    pub fn disabled(&self) -> bool {
        self.eta == f64::NEG_INFINITY
    }
}

/// Keep iff the forward reward window sums to at least `eta`.
pub fn filter_trajectory(window: &[f64], params: &FilterParams) -> Result<bool, TrainingError> {
    if window.len() != params.t_re {
        return Err(TrainingError::WindowLength {
            expected: params.t_re,
            got: window.len(),
        });
    }
    Ok(window.iter().sum::<f64>() >= params.eta)
}

/// Inverse-shifted-mean sampling distribution over intersection types:
/// lower mean reward gets higher probability.
pub fn sampling_probabilities(means: &[f64], epsilon: f64) -> Result<Vec<f64>, TrainingError> {
    if means.is_empty() {
        return Err(TrainingError::InvalidParams("no experience buffers".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) || means.iter().any(|m| !m.is_finite()) {
        return Err(TrainingError::InvalidParams(format!(
            "epsilon={epsilon}, means={means:?}"
        )));
    }
    let shift = means.iter().copied().fold(f64::INFINITY, f64::min).abs();
    let inv: Vec<f64> = means.iter().map(|m| 1.0 / (m + shift + epsilon)).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|x| x / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrajectory {
    pub prompt: String,
    pub response: String,
    pub reward: f64,
    pub type_id: String,
    pub step: usize,
    pub intersection: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceBuffer {
    type_id: String,
    trajectories: Vec<ReasoningTrajectory>,
    reward_sum: f64,
}

impl ExperienceBuffer {
    pub fn new(type_id: impl Into<String>) -> Self {
        ExperienceBuffer {
            type_id: type_id.into(),
            trajectories: Vec::new(),
            reward_sum: 0.0,
        }
    }

    pub fn type_id(&self) -> &str {
        &self.type_id
    }

    pub fn trajectories(&self) -> &[ReasoningTrajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Arithmetic mean of stored rewards; 0 when empty.
    pub fn mean_reward(&self) -> f64 {
        if self.trajectories.is_empty() {
            0.0
        } else {
            self.reward_sum / self.trajectories.len() as f64
        }
    }

    pub fn push(&mut self, t: ReasoningTrajectory) -> Result<(), TrainingError> {
        if t.type_id != self.type_id {
            return Err(TrainingError::InvalidParams(format!(
                "trajectory of type {:?} pushed into buffer {:?}",
                t.type_id, self.type_id
            )));
        }
        if !t.reward.is_finite() {
            return Err(TrainingError::NegativeInput(format!("reward {}", t.reward)));
        }
        self.reward_sum += t.reward;
        self.trajectories.push(t);
        Ok(())
    }
}

/// Experience buffers keyed by intersection type id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferSet {
    buffers: BTreeMap<String, ExperienceBuffer>,
}

impl BufferSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: ReasoningTrajectory) -> Result<(), TrainingError> {
        self.buffers
            .entry(t.type_id.clone())
            .or_insert_with(|| ExperienceBuffer::new(t.type_id.clone()))
            .push(t)
    }

    /// Buffers in type-id order.
    pub fn buffers(&self) -> Vec<&ExperienceBuffer> {
        self.buffers.values().collect()
    }

    pub fn get(&self, type_id: &str) -> Option<&ExperienceBuffer> {
        self.buffers.get(type_id)
    }

    pub fn total(&self) -> usize {
        self.buffers.values().map(ExperienceBuffer::len).sum()
    }

    pub fn means(&self) -> Vec<f64> {
        self.buffers
            .values()
            .map(ExperienceBuffer::mean_reward)
            .collect()
    }

    /// One JSON line per trajectory, grouped by type id.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainingError> {
        let rows = self.buffers.values().flat_map(|b| b.trajectories.iter());
        write_jsonl(path, rows)
    }
}

/// Draws each trajectory's buffer i.i.d. from `probs`, then uniformly within
/// that buffer.
pub fn sample_refinement_batch<R: Rng + ?Sized>(
    buffers: &[&ExperienceBuffer],
    probs: &[f64],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<ReasoningTrajectory>, TrainingError> {
    if buffers.len() != probs.len() || buffers.is_empty() {
        return Err(TrainingError::InvalidProbabilities(format!(
            "{} buffers, {} probabilities",
            buffers.len(),
            probs.len()
        )));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(TrainingError::InvalidProbabilities(format!("{probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TrainingError::InvalidProbabilities(format!("sum {sum}")));
    }
    if let Some((b, _)) = buffers
        .iter()
        .zip(probs)
        .find(|(b, p)| **p > 0.0 && b.is_empty())
    {
        return Err(TrainingError::EmptyBuffer(b.type_id.clone()));
    }
    let pick = WeightedIndex::new(probs)
        .map_err(|e| TrainingError::InvalidProbabilities(e.to_string()))?;
    Ok((0..batch_size)
        .map(|_| {
            let b = buffers[pick.sample(rng)];
            b.trajectories[rng.random_range(0..b.len())].clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub prompt: String,
    pub response: String,
    pub weight: f64,
}

impl FineTuneRecord {
    /// Refinement record weighted by reward, optionally clamped at zero.
    pub fn from_trajectory(t: &ReasoningTrajectory, clamp_negative: bool) -> Self {
        let weight = if clamp_negative {
            t.reward.max(0.0)
        } else {
            t.reward
        };
        FineTuneRecord {
            prompt: t.prompt.clone(),
            response: t.response.clone(),
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Imitation,
    Refinement,
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<(), TrainingError> {
    let io = |source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `{prompt, response, weight}` JSON lines. Imitation datasets carry
/// weight 1.0 regardless of the stored weight.
pub fn export_dataset(
    records: &[FineTuneRecord],
    path: &Path,
    kind: DatasetKind,
) -> Result<(), TrainingError> {
    if records.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let rows: Vec<FineTuneRecord> = records
        .iter()
        .map(|r| FineTuneRecord {
            weight: if kind == DatasetKind::Imitation {
                1.0
            } else {
                r.weight
            },
            ..r.clone()
        })
        .collect();
    if let Some(r) = rows.iter().find(|r| !r.weight.is_finite()) {
        return Err(TrainingError::InvalidParams(format!(
            "non-finite weight {}",
            r.weight
        )));
    }
    write_jsonl(path, &rows)
}

pub fn read_dataset(path: &Path) -> Result<Vec<FineTuneRecord>, TrainingError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TrainingError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: {e}", i + 1),
                ),
            })
        })
        .collect()
}

/// Bigram next-token model with one logit row per context token plus a
/// start-of-sequence row (the last row). Zero logits give a uniform model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: usize,
    logits: Vec<f64>,
}

impl ToyModel {
    pub fn uniform(vocab: usize) -> Self {
        ToyModel {
            vocab,
            logits: vec![0.0; (vocab + 1) * vocab],
        }
    }

    pub fn from_logits(vocab: usize, logits: Vec<f64>) -> Result<Self, TrainingError> {
        if vocab == 0 || logits.len() != (vocab + 1) * vocab {
            return Err(TrainingError::InvalidParams(format!(
                "{} logits for vocabulary {vocab}",
                logits.len()
            )));
        }
        Ok(ToyModel { vocab, logits })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, ctx: usize) -> &[f64] {
        &self.logits[ctx * self.vocab..(ctx + 1) * self.vocab]
    }

    /// Log-probabilities of the next token after `ctx` (`vocab` = start).
    pub fn log_probs(&self, ctx: usize) -> Vec<f64> {
        let row = self.row(ctx);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        row.iter().map(|z| z - lse).collect()
    }

    fn check(&self, seq: &[usize]) -> Result<(), TrainingError> {
        match seq.iter().find(|&&t| t >= self.vocab) {
            Some(&token) => Err(TrainingError::Vocabulary {
                token,
                vocab: self.vocab,
            }),
            None => Ok(()),
        }
    }

    fn contexts<'a>(&self, seq: &'a [usize]) -> impl Iterator<Item = (usize, usize)> + 'a {
        let start = self.vocab;
        seq.iter()
            .enumerate()
            .map(move |(i, &y)| (if i == 0 { start } else { seq[i - 1] }, y))
    }
}

/// Weighted negative log-likelihood over a batch and its gradient with
/// respect to every logit.
pub fn toy_weighted_nll(
    model: &ToyModel,
    batch: &[(Vec<usize>, f64)],
) -> Result<(f64, Vec<f64>), TrainingError> {
    let v = model.vocab;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.logits.len()];
    for (seq, w) in batch {
        model.check(seq)?;
        let mut seq_ll = 0.0;
        for (ctx, y) in model.contexts(seq) {
            let lp = model.log_probs(ctx);
            seq_ll += lp[y];
            if *w != 0.0 {
                let g = &mut grad[ctx * v..(ctx + 1) * v];
                for (k, gk) in g.iter_mut().enumerate() {
                    let target = if k == y { 1.0 } else { 0.0 };
                    *gk += w * (lp[k].exp() - target);
                }
            }
        }
        loss -= w * seq_ll;
    }
    Ok((loss, grad))
}

/// Plain negative log-likelihood.
pub fn toy_nll(model: &ToyModel, sequences: &[Vec<usize>]) -> Result<f64, TrainingError> {
    let mut loss = 0.0;
    for seq in sequences {
        model.check(seq)?;
        let mut seq_ll = 0.0;
        for (ctx, y) in model.contexts(seq) {
            seq_ll += model.log_probs(ctx)[y];
        }
        loss -= seq_ll;
    }
    Ok(loss)
}
