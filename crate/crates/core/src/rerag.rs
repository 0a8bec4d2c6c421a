//! Reviewer-based emergency retrieval: historical emergency cases are
//! distilled into guidance items by a reviewer model, embedded, and
//! retrieved by cosine similarity against a query generated from the live
//! intersection state.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatBackend, ChatRequest, EmbeddingBackend, GatewayError};
use crate::observation::{ev_bindings, render_template, TrafficObservation, QUERY_TEMPLATE};
use crate::sim::EmergencyVehicleState;

const REVIEWER_TEMPLATE: &str = include_str!("../assets/reviewer_prompt.txt");

/// Dimension of the hashed bag-of-words embedding.
pub const MOCK_EMBEDDING_DIM: usize = 256;

pub const GUIDANCE_FILE: &str = "guidance.jsonl";
pub const VECTORS_FILE: &str = "guidance.vectors.json";

#[derive(Debug, Error)]
pub enum RagError {
    #[error("no historical cases supplied")]
    EmptyCases,
    #[error("case {index}: action {action} outside 1..={phases}")]
    InvalidCase {
        index: usize,
        action: usize,
        phases: usize,
    },
    #[error("backend failure: {0}")]
    Backend(#[from] GatewayError),
    #[error("could not parse reviewer reply: {0}")]
    Parse(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("guidance repository is empty")]
    EmptyRepository,
    #[error("top-k must be at least 1")]
    InvalidK,
    #[error("repository is inconsistent: {0}")]
    Inconsistent(String),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RagError + '_ {
    move |source| RagError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One past emergency decision: state, expert action, and resulting state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalCase {
    pub obs_t: TrafficObservation,
    pub ev_t: EmergencyVehicleState,
    pub action: usize,
    pub obs_next: TrafficObservation,
    pub ev_next: EmergencyVehicleState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceItem {
    pub id: String,
    pub situation: String,
    pub recommended_action: String,
    pub intended_effect: String,
}

impl GuidanceItem {
    /// Text that gets embedded for retrieval.
    pub fn text(&self) -> String {
        format!(
            "{} {} {}",
            self.situation, self.recommended_action, self.intended_effect
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|x| x * c).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '#' || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hashed bag-of-words embedding, L2-normalized. Text without word
/// characters hashes as a single token.
pub fn hashed_bag_of_words(text: &str, dim: usize) -> EmbeddingVector {
    let dim = dim.max(1);
    let mut v = vec![0.0; dim];
    let mut toks = tokens(text);
    if toks.is_empty() {
        toks.push(text.to_string());
    }
    for t in &toks {
        v[(fnv1a(t.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    EmbeddingVector(v)
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RagError> {
    if a.dim() != b.dim() {
        return Err(RagError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RagError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceRepository {
    items: Vec<GuidanceItem>,
    vectors: Vec<EmbeddingVector>,
}

#[derive(Serialize, Deserialize)]
struct VectorFile {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

impl GuidanceRepository {
    pub fn new(items: Vec<GuidanceItem>, vectors: Vec<EmbeddingVector>) -> Result<Self, RagError> {
        if items.len() != vectors.len() {
            return Err(RagError::Inconsistent(format!(
                "{} items but {} vectors",
                items.len(),
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            if let Some(v) = vectors.iter().find(|v| v.dim() != first.dim()) {
                return Err(RagError::DimensionMismatch(first.dim(), v.dim()));
            }
        }
        if vectors.iter().flat_map(|v| &v.0).any(|x| !x.is_finite()) {
            return Err(RagError::Inconsistent("non-finite vector component".into()));
        }
        Ok(GuidanceRepository { items, vectors })
    }

    /// Embeds every item with `backend` and assembles the repository.
    pub fn build(
        items: Vec<GuidanceItem>,
        backend: &dyn EmbeddingBackend,
    ) -> Result<Self, RagError> {
        let texts: Vec<String> = items.iter().map(GuidanceItem::text).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            backend.embed_texts(&texts)?
        };
        Self::new(items, vectors)
    }

    pub fn items(&self) -> &[GuidanceItem] {
        &self.items
    }
    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }
    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Writes `guidance.jsonl` and `guidance.vectors.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RagError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let items_path = dir.join(GUIDANCE_FILE);
        let mut f = fs::File::create(&items_path).map_err(io_err(&items_path))?;
        for item in &self.items {
            let line = serde_json::to_string(item).expect("item serializes");
            writeln!(f, "{line}").map_err(io_err(&items_path))?;
        }
        let vec_path = dir.join(VECTORS_FILE);
        let vf = VectorFile {
            ids: self.items.iter().map(|i| i.id.clone()).collect(),
            vectors: self.vectors.clone(),
        };
        fs::write(
            &vec_path,
            serde_json::to_string(&vf).expect("vectors serialize"),
        )
        .map_err(io_err(&vec_path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RagError> {
        let items_path = dir.join(GUIDANCE_FILE);
        let items: Vec<GuidanceItem> = read_jsonl(&items_path)?;
        let vec_path = dir.join(VECTORS_FILE);
        let text = fs::read_to_string(&vec_path).map_err(io_err(&vec_path))?;
        let vf: VectorFile = serde_json::from_str(&text).map_err(|e| RagError::Format {
            path: vec_path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let ids: Vec<&String> = items.iter().map(|i| &i.id).collect();
        if vf.ids.iter().collect::<Vec<_>>() != ids {
            return Err(RagError::Inconsistent(
                "vector ids do not match items".into(),
            ));
        }
        Self::new(items, vf.vectors)
    }
}

/// Reads one JSON value per non-empty line, reporting the 1-based line
/// number of the first malformed line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RagError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| RagError::Format {
            path: path.display().to_string(),
            line: k + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Top-`k` items by descending cosine similarity, ties by ascending item id.
pub fn retrieve(
    query: &EmbeddingVector,
    repo: &GuidanceRepository,
    k: usize,
) -> Result<Vec<(GuidanceItem, f64)>, RagError> {
    if repo.is_empty() {
        return Err(RagError::EmptyRepository);
    }
    if k == 0 {
        return Err(RagError::InvalidK);
    }
    let mut scored = repo
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| cosine_similarity(query, v).map(|s| (i, s)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| repo.items[a.0].id.cmp(&repo.items[b.0].id))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (repo.items[i].clone(), s))
        .collect())
}

pub fn embed(text: &str, backend: &dyn EmbeddingBackend) -> Result<EmbeddingVector, RagError> {
    if text.trim().is_empty() {
        return Err(RagError::EmptyText);
    }
    let mut v = backend.embed_texts(&[text.to_string()])?;
    v.pop()
        .ok_or_else(|| RagError::Parse("embedding backend returned no vector".into()))
}

pub fn reviewer_prompt(cases: &[HistoricalCase]) -> String {
    let lines: Vec<String> = cases
        .iter()
        .map(|c| serde_json::to_string(c).expect("case serializes"))
        .collect();
    render_template(REVIEWER_TEMPLATE, &[("cases", &lines.join("\n"))])
}

/// Parses a reviewer reply: a JSON array of objects carrying string fields
/// `situation`, `recommended_action`, `intended_effect`. Ids are assigned
/// in reply order as `g1`, `g2`, ...
pub fn parse_reviewer_reply(reply: &str) -> Result<Vec<GuidanceItem>, RagError> {
    let (Some(start), Some(end)) = (reply.find('['), reply.rfind(']')) else {
        return Err(RagError::Parse("reply contains no JSON array".into()));
    };
    if end < start {
        return Err(RagError::Parse("reply contains no JSON array".into()));
    }
    let value: serde_json::Value = serde_json::from_str(&reply[start..=end])
        .map_err(|e| RagError::Parse(format!("invalid JSON: {e}")))?;
    let arr = value
        .as_array()
        .ok_or_else(|| RagError::Parse("reply is not a JSON array".into()))?;
    if arr.is_empty() {
        return Err(RagError::Parse(
            "reviewer returned no guidance items".into(),
        ));
    }
    arr.iter()
        .enumerate()
        .map(|(k, obj)| {
            let field = |name: &str| -> Result<String, RagError> {
                match obj.get(name).and_then(|v| v.as_str()).map(str::trim) {
                    Some(s) if !s.is_empty() => Ok(s.to_string()),
                    _ => Err(RagError::Parse(format!(
                        "guidance item {} is missing field `{name}`",
                        k + 1
                    ))),
                }
            };
            Ok(GuidanceItem {
                id: format!("g{}", k + 1),
                situation: field("situation")?,
                recommended_action: field("recommended_action")?,
                intended_effect: field("intended_effect")?,
            })
        })
        .collect()
}

/// Distills historical cases into guidance items with one reviewer call.
pub fn review_cases(
    cases: &[HistoricalCase],
    backend: &dyn ChatBackend,
) -> Result<Vec<GuidanceItem>, RagError> {
    if cases.is_empty() {
        return Err(RagError::EmptyCases);
    }
    for (index, c) in cases.iter().enumerate() {
        if c.action < 1 || c.action > c.obs_t.num_phases() {
            return Err(RagError::InvalidCase {
                index,
                action: c.action,
                phases: c.obs_t.num_phases(),
            });
        }
    }
    let req = ChatRequest::user(backend.model(), reviewer_prompt(cases));
    let reply = backend.chat(&req)?;
    parse_reviewer_reply(&reply)
}

pub fn query_prompt(obs: &TrafficObservation, ev: &EmergencyVehicleState) -> String {
    let rep = obs.representation();
    let evb = ev_bindings(ev);
    let mut bindings: Vec<(&str, &str)> = vec![("representation", &rep)];
    bindings.extend(evb.iter().map(|(k, v)| (*k, v.as_str())));
    render_template(QUERY_TEMPLATE, &bindings)
}

/// One-line retrieval query for an emergency situation.
pub fn generate_query(
    obs: &TrafficObservation,
    ev: &EmergencyVehicleState,
    backend: &dyn ChatBackend,
) -> Result<String, RagError> {
    let req = ChatRequest::user(backend.model(), query_prompt(obs, ev));
    let reply = backend.chat(&req)?;
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    if line.is_empty() {
        return Err(RagError::Parse(
            "query generator returned empty text".into(),
        ));
    }
    Ok(line.to_string())
}

/// Query, embed and retrieve in one call.
pub fn retrieve_for(
    obs: &TrafficObservation,
    ev: &EmergencyVehicleState,
    repo: &GuidanceRepository,
    k: usize,
    chat: &dyn ChatBackend,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<(GuidanceItem, f64)>, RagError> {
    let q = generate_query(obs, ev, chat)?;
    let v = embed(&q, embedder)?;
    retrieve(&v, repo, k)
}

/// Paths of the two repository files inside `dir`.
pub fn repository_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(GUIDANCE_FILE), dir.join(VECTORS_FILE))
}
