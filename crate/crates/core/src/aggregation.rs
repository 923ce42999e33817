//! Private aggregation of ensemble responses.
//!
//! SGA embeds every response, clusters the union privately with DPM and maps
//! the heaviest cluster centers to their nearest *public* responses. KSA
//! privately selects frequent keywords and asks the model to rebuild an
//! answer from them.
//!
//! Private text never crosses the clustering boundary: candidate lists only
//! hold [`PublicRecord`]s, and a `PublicRecord` can only be obtained from a
//! record constructed with [`ResponseRecord::public`].

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::Mechanism;
use crate::backend::{BackendError, CallSettings, CompletionBackend, Embedder, RetryPolicy};
use crate::data::Example;
use crate::dpm::{dpm_cluster, ClusterResult, DpmConfig, DpmError, PointSet};
use crate::ledger::MechanismEvent;
use crate::mechanisms::{exponential_mechanism, MechanismError, ScoredChoice};
use crate::prompts::{build_prompt, PromptError, PromptMode, Task};
use crate::rng::DpRng;
use crate::text::keyword_stems;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no public responses to choose representatives from")]
    NoPublicResponses,
    #[error("no private responses to aggregate")]
    NoPrivateResponses,
    #[error("record {index} in the public list is private-derived")]
    PrivateInPublicList { index: usize },
    #[error("private-derived record cannot be used after the privacy boundary")]
    PrivateRecord,
    #[error("embedding norm {norm} is not 1")]
    NotUnitNorm { norm: f64 },
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("{0}")]
    InvalidInput(String),
    #[error("backend call failed after {attempts} attempt(s): {source}")]
    Backend {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Dpm(#[from] DpmError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub type Result<T> = std::result::Result<T, AggregationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PrivateDerived,
    PublicDerived,
}

/// One ensemble response and where its prompt came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    text: String,
    provenance: Provenance,
    #[serde(skip)]
    embedding: Option<Vec<f64>>,
    source_batch: usize,
}

impl ResponseRecord {
    /// Response to a prompt built from private demonstrations.
    pub fn private(text: impl Into<String>, source_batch: usize) -> Self {
        Self {
            text: text.into(),
            provenance: Provenance::PrivateDerived,
            embedding: None,
            source_batch,
        }
    }

    /// Response to a prompt built only from public data.
    pub fn public(text: impl Into<String>, source_batch: usize) -> Self {
        Self {
            text: text.into(),
            provenance: Provenance::PublicDerived,
            embedding: None,
            source_batch,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_public(&self) -> bool {
        self.provenance == Provenance::PublicDerived
    }

    pub fn source_batch(&self) -> usize {
        self.source_batch
    }

    pub fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }

    /// Attaches an embedding; it must have unit norm (within 1e-6).
    pub fn set_embedding(&mut self, v: Vec<f64>) -> Result<()> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(AggregationError::NotUnitNorm { norm });
        }
        self.embedding = Some(v);
        Ok(())
    }

    pub fn with_embedding(mut self, v: Vec<f64>) -> Result<Self> {
        self.set_embedding(v)?;
        Ok(self)
    }
}

/// A record known to be public-derived.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PublicRecord(ResponseRecord);

impl TryFrom<ResponseRecord> for PublicRecord {
    type Error = AggregationError;

    fn try_from(r: ResponseRecord) -> Result<Self> {
        if r.is_public() {
            Ok(Self(r))
        } else {
            Err(AggregationError::PrivateRecord)
        }
    }
}

impl PublicRecord {
    pub fn text(&self) -> &str {
        &self.0.text
    }

    pub fn record(&self) -> &ResponseRecord {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub record: PublicRecord,
    /// Noisy size of the cluster this candidate represents.
    pub weight: f64,
    /// Rank of that cluster in the clustering output.
    pub cluster: usize,
}

/// Public representatives ranked by cluster weight, heaviest first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateList {
    entries: Vec<Candidate>,
    k: usize,
}

impl CandidateList {
    pub fn new(entries: Vec<Candidate>, k: usize) -> Result<Self> {
        if entries.is_empty() || entries.len() > k {
            return Err(AggregationError::InvalidInput(format!(
                "candidate list needs 1..={k} entries, got {}",
                entries.len()
            )));
        }
        Ok(Self { entries, k })
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn texts(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|c| c.record.text().to_string())
            .collect()
    }

    pub fn top(&self) -> &PublicRecord {
        &self.entries[0].record
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Budgets for one SGA query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgaBudget {
    pub eps_exp: f64,
    pub eps_gm: f64,
    pub eps_cnt: f64,
}

impl SgaBudget {
    /// Preset split of a total budget. `1`, `3` and `8` use tuned values;
    /// other totals scale the `1` row; infinity disables noise.
    pub fn preset(total: f64) -> Self {
        let (eps_exp, eps_gm, eps_cnt) = match total {
            t if t.is_infinite() => (f64::INFINITY, f64::INFINITY, f64::INFINITY),
            1.0 => (0.12, 0.5, 0.38),
            3.0 => (0.12, 2.49, 0.39),
            8.0 => (0.12, 7.51, 0.37),
            t => (0.12 * t, 0.5 * t, 0.38 * t),
        };
        Self {
            eps_exp,
            eps_gm,
            eps_cnt,
        }
    }

    /// DPM config for this budget; summarization clusters deeper.
    pub fn dpm_config(&self, task: Task, delta: f64) -> DpmConfig {
        DpmConfig {
            tau_r: match task {
                Task::Qa => 4,
                Task::Summarization => 7,
            },
            eps_cnt: self.eps_cnt,
            eps_exp: self.eps_exp,
            eps_avg: self.eps_gm,
            delta,
            ..DpmConfig::default()
        }
    }
}

/// Keyword-selection budget for a total budget.
pub fn ksa_preset(total: f64) -> f64 {
    match total {
        t if t.is_infinite() => f64::INFINITY,
        1.0 => 0.23,
        3.0 => 0.63,
        8.0 => 1.32,
        t => 0.23 * t,
    }
}

/// Default number of selected keywords per task.
pub fn ksa_default_k(task: Task) -> usize {
    match task {
        Task::Qa => 40,
        Task::Summarization => 10,
    }
}

/// Fills in missing embeddings using up to `width` concurrent calls.
pub fn embed_records(
    records: &mut [ResponseRecord],
    embedder: &dyn Embedder,
    retry: &RetryPolicy,
    width: usize,
) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(width.max(1))
        .build()
        .map_err(|e| AggregationError::InvalidInput(format!("cannot start embedding pool: {e}")))?;
    pool.install(|| {
        records
            .par_iter_mut()
            .filter(|r| r.embedding.is_none())
            .try_for_each(|r| {
                let (v, attempts) = retry.run(|| embedder.embed(&r.text));
                let v = v.map_err(|source| AggregationError::Backend { attempts, source })?;
                r.set_embedding(v)
            })
    })
}

fn embedding_of(r: &ResponseRecord, embedder: Option<&dyn Embedder>) -> Result<Vec<f64>> {
    match (&r.embedding, embedder) {
        (Some(v), _) => Ok(v.clone()),
        (None, Some(e)) => {
            let v = e
                .embed(&r.text)
                .map_err(|source| AggregationError::Backend {
                    attempts: 1,
                    source,
                })?;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(AggregationError::NotUnitNorm { norm });
            }
            Ok(v)
        }
        (None, None) => Err(AggregationError::InvalidInput(
            "record has no embedding and no embedder was given".into(),
        )),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row nearest `target`; ties go to the lowest index.
pub fn nearest(target: &[f64], rows: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        let d = sq_dist(target, r);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// SGA output: the candidates plus the clustering (whose log holds the
/// privacy cost).
#[derive(Debug, Clone)]
pub struct SgaOutcome {
    pub candidates: CandidateList,
    pub clusters: ClusterResult,
}

/// Clusters all response embeddings privately and returns the public
/// representatives of the `k` heaviest clusters.
pub fn sga_aggregate(
    private_responses: &[ResponseRecord],
    public_responses: &[ResponseRecord],
    config: &DpmConfig,
    k: usize,
    embedder: Option<&dyn Embedder>,
    rng: &mut DpRng,
) -> Result<SgaOutcome> {
    if k == 0 {
        return Err(AggregationError::InvalidInput("k must be >= 1".into()));
    }
    if public_responses.is_empty() {
        return Err(AggregationError::NoPublicResponses);
    }
    if private_responses.is_empty() {
        return Err(AggregationError::NoPrivateResponses);
    }
    if let Some(index) = public_responses.iter().position(|r| !r.is_public()) {
        return Err(AggregationError::PrivateInPublicList { index });
    }

    let mut points = Vec::with_capacity(private_responses.len() + public_responses.len());
    for r in private_responses.iter().chain(public_responses) {
        points.push(embedding_of(r, embedder)?);
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(AggregationError::DimensionMismatch(dim, bad.len()));
    }
    let public_points = points[private_responses.len()..].to_vec();

    let set = PointSet::with_radius(points, 1.0)?;
    let clusters = dpm_cluster(&set, config, rng)?;

    let mut chosen: Vec<usize> = Vec::new();
    let mut entries = Vec::new();
    for (rank, (center, &weight)) in clusters
        .centers
        .iter()
        .zip(&clusters.weights)
        .take(k)
        .enumerate()
    {
        let j = nearest(center, &public_points).expect("public list is nonempty");
        if chosen.contains(&j) {
            continue;
        }
        chosen.push(j);
        entries.push(Candidate {
            record: PublicRecord::try_from(public_responses[j].clone())?,
            weight,
            cluster: rank,
        });
    }
    let candidates = CandidateList::new(entries, k)?;
    Ok(SgaOutcome {
        candidates,
        clusters,
    })
}

/// Completed prompt with its text and the number of backend attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub prompt: String,
    pub answer: String,
    pub attempts: u32,
}

fn complete(
    llm: &dyn CompletionBackend,
    settings: &CallSettings,
    prompt: String,
) -> Result<FinalAnswer> {
    let (res, attempts) = settings.complete(llm, &prompt);
    let answer = res.map_err(|source| AggregationError::Backend { attempts, source })?;
    Ok(FinalAnswer {
        prompt,
        answer: answer.trim().to_string(),
        attempts,
    })
}

/// Asks the model to pick among the candidates, given one public example.
pub fn select_final(
    candidates: &CandidateList,
    query: &str,
    public_example: &Example,
    task: Task,
    llm: &dyn CompletionBackend,
    settings: &CallSettings,
) -> Result<FinalAnswer> {
    let texts = candidates.texts();
    let prompt = build_prompt(
        std::slice::from_ref(public_example),
        query,
        task,
        PromptMode::Selection(&texts),
    )?;
    complete(llm, settings, prompt)
}

/// Distinct keyword stems of one response.
pub fn ksa_extract(response: &str) -> BTreeSet<String> {
    keyword_stems(response).into_iter().collect()
}

/// Number of responses containing each keyword.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordHistogram {
    counts: BTreeMap<String, u64>,
    responses: usize,
}

impl KeywordHistogram {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut h = Self::default();
        for t in texts {
            h.add(t);
        }
        h
    }

    /// Adds one response; each keyword counts at most once per response.
    pub fn add(&mut self, text: &str) {
        for kw in ksa_extract(text) {
            *self.counts.entry(kw).or_insert(0) += 1;
        }
        self.responses += 1;
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSelection {
    /// Selected keywords in the order they were drawn.
    pub keywords: Vec<String>,
    /// Fewer distinct keywords than requested were available.
    pub short: bool,
    pub mechanism_log: Vec<MechanismEvent>,
}

/// Draws `k` keywords one at a time without replacement, each with the
/// exponential mechanism at `eps_exp / k` (score = response count,
/// sensitivity 1).
pub fn ksa_select(
    hist: &KeywordHistogram,
    eps_exp: f64,
    k: usize,
    rng: &mut DpRng,
) -> Result<KeywordSelection> {
    if k == 0 {
        return Err(AggregationError::InvalidInput("k must be >= 1".into()));
    }
    if !(eps_exp > 0.0) {
        return Err(AggregationError::InvalidInput(format!(
            "eps_exp must be > 0, got {eps_exp}"
        )));
    }
    let per_draw = eps_exp / k as f64;
    let mut pool: Vec<(&String, u64)> = hist.counts.iter().map(|(w, &c)| (w, c)).collect();
    let mut keywords = Vec::new();
    while keywords.len() < k && !pool.is_empty() {
        let choice = ScoredChoice::new(pool.iter().map(|&(_, c)| c as f64).collect(), 1.0)?;
        let i = exponential_mechanism(&choice, per_draw, rng)?;
        keywords.push(pool.remove(i).0.clone());
    }
    let mut mechanism_log = Vec::new();
    if !keywords.is_empty() {
        mechanism_log.push(
            MechanismEvent::new(
                "ksa",
                "keyword_select",
                Mechanism::Exponential { epsilon: per_draw },
            )
            .repeated(keywords.len() as u32),
        );
    }
    Ok(KeywordSelection {
        short: keywords.len() < k,
        keywords,
        mechanism_log,
    })
}

/// Builds the keyword histogram over `responses` and selects `k` keywords.
pub fn ksa_aggregate(
    responses: &[ResponseRecord],
    eps_exp: f64,
    k: usize,
    rng: &mut DpRng,
) -> Result<KeywordSelection> {
    let hist = KeywordHistogram::from_texts(responses.iter().map(ResponseRecord::text));
    ksa_select(&hist, eps_exp, k, rng)
}

/// Asks the model to answer from the selected keywords, given one public example.
pub fn ksa_reconstruct(
    keywords: &[String],
    query: &str,
    public_example: &Example,
    task: Task,
    llm: &dyn CompletionBackend,
    settings: &CallSettings,
) -> Result<FinalAnswer> {
    let prompt = build_prompt(
        std::slice::from_ref(public_example),
        query,
        task,
        PromptMode::KsaReconstruction(keywords),
    )?;
    complete(llm, settings, prompt)
}
