//! End-to-end private in-context learning for one query, plus coreset
//! selection and public-pool augmentation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{AccountingError, AlphaGrid, PrivacyReport};
use crate::aggregation::{
    embed_records, ksa_aggregate, ksa_default_k, ksa_preset, ksa_reconstruct, nearest,
    select_final, sga_aggregate, AggregationError, Provenance, ResponseRecord, SgaBudget,
};
use crate::backend::{BackendError, CallSettings, CompletionBackend, Embedder};
use crate::data::Example;
use crate::dpm::{dpm_cluster, DpmConfig, DpmError, PointSet};
use crate::ledger::{replay, MechanismEvent};
use crate::prompts::{build_prompt, parse_generated, PromptError, PromptMode, Task};
use crate::rng::DpRng;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{pool} pool has {available} examples but {required} are needed")]
    InsufficientPool {
        pool: &'static str,
        required: usize,
        available: usize,
    },
    #[error("{dropped} of {members} {pool} ensemble members failed (last error: {last})")]
    TooManyDrops {
        pool: &'static str,
        dropped: usize,
        members: usize,
        last: String,
    },
    #[error("budget exhausted: spending would reach epsilon {would_spend:.4} of {limit}")]
    BudgetExhausted { would_spend: f64, limit: f64 },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Dpm(#[from] DpmError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

impl PipelineError {
    /// True if the failure came from the model backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            PipelineError::Backend(_)
                | PipelineError::TooManyDrops { .. }
                | PipelineError::Aggregation(AggregationError::Backend { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    #[serde(alias = "sga_topk", alias = "SgaTopK")]
    SgaTopk,
    #[serde(alias = "sga_top1", alias = "SgaTop1")]
    SgaTop1,
    #[serde(alias = "Ksa")]
    Ksa,
    #[serde(alias = "ksa_no_public", alias = "KsaNoPublic")]
    KsaNoPublic,
}

impl Aggregation {
    pub fn is_sga(self) -> bool {
        matches!(self, Aggregation::SgaTopk | Aggregation::SgaTop1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 2.56e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub shots_n: usize,
    pub members_m: usize,
    /// Fraction of each pool eligible for demonstrations.
    pub subsample_fraction: f64,
    pub seed: u64,
    pub task: Task,
    pub aggregation: Aggregation,
    /// Candidates (SGA) or keywords (KSA); defaults per mode when unset.
    pub k: Option<usize>,
    pub budget: Budget,
    /// Overrides the preset SGA budget split.
    pub sga: Option<SgaBudget>,
    /// Overrides the preset keyword-selection budget.
    pub ksa_epsilon: Option<f64>,
    /// Overrides the task's default clustering depth.
    pub tau_r: Option<u32>,
    pub parallel_width: usize,
    /// Fraction of ensemble members allowed to fail.
    pub max_drop_fraction: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            shots_n: 4,
            members_m: 10,
            subsample_fraction: 1.0,
            seed: 0,
            task: Task::Qa,
            aggregation: Aggregation::SgaTopk,
            k: None,
            budget: Budget::default(),
            sga: None,
            ksa_epsilon: None,
            tau_r: None,
            parallel_width: 4,
            max_drop_fraction: 0.2,
        }
    }
}

impl EnsembleConfig {
    pub fn effective_k(&self) -> usize {
        self.k.unwrap_or(match self.aggregation {
            Aggregation::SgaTopk | Aggregation::SgaTop1 => 3,
            Aggregation::Ksa | Aggregation::KsaNoPublic => ksa_default_k(self.task),
        })
    }

    pub fn dpm_config(&self) -> DpmConfig {
        let budget = self
            .sga
            .unwrap_or_else(|| SgaBudget::preset(self.budget.epsilon));
        let mut cfg = budget.dpm_config(self.task, self.budget.delta);
        if let Some(t) = self.tau_r {
            cfg.tau_r = t;
        }
        cfg
    }

    pub fn ksa_budget(&self) -> f64 {
        self.ksa_epsilon
            .unwrap_or_else(|| ksa_preset(self.budget.epsilon))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.shots_n == 0 || self.members_m == 0 {
            return bad("shots_n and members_m must be >= 1".into());
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad(format!(
                "subsample_fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            ));
        }
        if self.k == Some(0) {
            return bad("k must be >= 1".into());
        }
        if !(self.budget.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.budget.epsilon));
        }
        if !(self.budget.delta > 0.0 && self.budget.delta < 0.5) {
            return bad(format!(
                "delta must lie in (0, 0.5), got {}",
                self.budget.delta
            ));
        }
        if self.parallel_width == 0 {
            return bad("parallel_width must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.max_drop_fraction) {
            return bad("max_drop_fraction must lie in [0, 1)".into());
        }
        if self.aggregation.is_sga() {
            self.dpm_config().validate()?;
        }
        Ok(())
    }

    /// Examples a pool needs for one query.
    pub fn required_pool(&self) -> usize {
        let need = self.shots_n * self.members_m;
        (need as f64 / self.subsample_fraction).ceil() as usize
    }
}

/// Draws `n * m` distinct examples uniformly and splits them into `m`
/// consecutive batches of `n`.
pub fn subsample_partition(
    pool: &[Example],
    n: usize,
    m: usize,
    rng: &mut DpRng,
) -> Result<Vec<Vec<Example>>> {
    let need = n * m;
    if need > pool.len() {
        return Err(PipelineError::InsufficientPool {
            pool: "demonstration",
            required: need,
            available: pool.len(),
        });
    }
    let picked = rand::seq::index::sample(rng, pool.len(), need);
    let chosen: Vec<Example> = picked.iter().map(|i| pool[i].clone()).collect();
    Ok(chosen
        .chunks(n.max(1))
        .take(m)
        .map(<[Example]>::to_vec)
        .collect())
}

/// Restricts a pool to a uniform `fraction` of itself (at least `min` items).
fn restrict(pool: &[Example], fraction: f64, min: usize, rng: &mut DpRng) -> Vec<Example> {
    if fraction >= 1.0 {
        return pool.to_vec();
    }
    let keep =
        ((pool.len() as f64 * fraction).round() as usize).clamp(min.min(pool.len()), pool.len());
    let mut idx = rand::seq::index::sample(rng, pool.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// Ensemble member that failed after its retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedMember {
    pub provenance: Provenance,
    pub batch: usize,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub records: Vec<ResponseRecord>,
    pub prompts: Vec<String>,
    pub drops: Vec<DroppedMember>,
}

/// Answers `query` once per batch, at most `width` calls at a time. Output
/// follows batch order. Members that still fail after retries are dropped.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    batches: &[Vec<Example>],
    query: &str,
    task: Task,
    provenance: Provenance,
    llm: &dyn CompletionBackend,
    settings: &CallSettings,
    width: usize,
    max_drop_fraction: f64,
) -> Result<EnsembleOutput> {
    let prompts = batches
        .iter()
        .map(|b| build_prompt(b, query, task, PromptMode::Demonstration))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(width.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        prompts
            .par_iter()
            .map(|p| settings.complete(llm, p))
            .collect()
    });

    let mut records = Vec::new();
    let mut drops = Vec::new();
    for (batch, (res, attempts)) in results.into_iter().enumerate() {
        match res {
            Ok(text) => records.push(match provenance {
                Provenance::PrivateDerived => ResponseRecord::private(text.trim(), batch),
                Provenance::PublicDerived => ResponseRecord::public(text.trim(), batch),
            }),
            Err(e) => {
                log::warn!("ensemble member {batch} dropped after {attempts} attempt(s): {e}");
                drops.push(DroppedMember {
                    provenance,
                    batch,
                    attempts,
                    error: e.to_string(),
                });
            }
        }
    }
    if drops.len() as f64 > max_drop_fraction * batches.len() as f64
        || records.is_empty() && !batches.is_empty()
    {
        return Err(PipelineError::TooManyDrops {
            pool: match provenance {
                Provenance::PrivateDerived => "private",
                Provenance::PublicDerived => "public",
            },
            dropped: drops.len(),
            members: batches.len(),
            last: drops.last().map_or_else(String::new, |d| d.error.clone()),
        });
    }
    Ok(EnsembleOutput {
        records,
        prompts,
        drops,
    })
}

/// A prompt that may be shown outside the trust boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSnapshot {
    pub stage: String,
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub text: String,
    pub provenance: Provenance,
    pub weight: f64,
    pub cluster: usize,
}

/// Wall-clock timings in milliseconds; kept out of the serialized report.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub ensemble_ms: f64,
    pub aggregation_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub query_id: String,
    pub aggregation: Aggregation,
    pub answer: String,
    pub candidates: Vec<CandidateView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    pub mechanism_log: Vec<MechanismEvent>,
    pub accounted_budget: PrivacyReport,
    pub configured_budget: Budget,
    pub dropped_members: Vec<DroppedMember>,
    pub prompt_snapshots: Vec<PromptSnapshot>,
    #[serde(skip)]
    pub timing: Timing,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs the full private pipeline for one query.
#[allow(clippy::too_many_arguments)]
pub fn answer_query(
    query: &Example,
    private_pool: &[Example],
    public_pool: &[Example],
    config: &EnsembleConfig,
    llm: &dyn CompletionBackend,
    embedder: &dyn Embedder,
    settings: &CallSettings,
    rng: &mut DpRng,
) -> Result<RunReport> {
    config.validate()?;
    let (n, m) = (config.shots_n, config.members_m);
    let need_public = config.aggregation != Aggregation::KsaNoPublic;

    let required = config.required_pool();
    if private_pool.len() < required {
        return Err(PipelineError::InsufficientPool {
            pool: "private",
            required,
            available: private_pool.len(),
        });
    }
    let public_required = if need_public { required } else { 1 };
    if public_pool.len() < public_required {
        return Err(PipelineError::InsufficientPool {
            pool: "public",
            required: public_required,
            available: public_pool.len(),
        });
    }

    let mut sample_rng = rng.labeled("subsample");
    let private_eligible = restrict(
        private_pool,
        config.subsample_fraction,
        n * m,
        &mut sample_rng,
    );
    let private_batches = subsample_partition(&private_eligible, n, m, &mut sample_rng)?;
    answer_with_batches(
        query,
        &private_batches,
        public_pool,
        config,
        llm,
        embedder,
        settings,
        rng,
    )
}

/// Like [`answer_query`], but with the private demonstration batches given.
#[allow(clippy::too_many_arguments)]
pub fn answer_with_batches(
    query: &Example,
    private_batches: &[Vec<Example>],
    public_pool: &[Example],
    config: &EnsembleConfig,
    llm: &dyn CompletionBackend,
    embedder: &dyn Embedder,
    settings: &CallSettings,
    rng: &mut DpRng,
) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let (n, m) = (config.shots_n, config.members_m);
    let need_public = config.aggregation != Aggregation::KsaNoPublic;
    if public_pool.is_empty() {
        return Err(PipelineError::InsufficientPool {
            pool: "public",
            required: 1,
            available: 0,
        });
    }
    let one_shot = public_pool[rng.labeled("one_shot").below(public_pool.len())].clone();

    let private_out = run_ensemble(
        private_batches,
        &query.input,
        config.task,
        Provenance::PrivateDerived,
        llm,
        settings,
        config.parallel_width,
        config.max_drop_fraction,
    )?;
    let mut dropped = private_out.drops;
    let mut snapshots = Vec::new();

    let mut public_records = Vec::new();
    if need_public {
        let mut public_rng = rng.labeled("public_subsample");
        let public_eligible = restrict(
            public_pool,
            config.subsample_fraction,
            n * m,
            &mut public_rng,
        );
        let public_batches = subsample_partition(&public_eligible, n, m, &mut public_rng)?;
        let public_out = run_ensemble(
            &public_batches,
            &query.input,
            config.task,
            Provenance::PublicDerived,
            llm,
            settings,
            config.parallel_width,
            config.max_drop_fraction,
        )?;
        for (i, p) in public_out.prompts.into_iter().enumerate() {
            snapshots.push(PromptSnapshot {
                stage: "public_ensemble".into(),
                index: i,
                text: p,
            });
        }
        public_records = public_out.records;
        dropped.extend(public_out.drops);
    }
    let ensemble_ms = ms(start);
    let agg_start = Instant::now();

    let k = config.effective_k();
    let mut private_records = private_out.records;
    let (answer, candidates, keywords, log) = match config.aggregation {
        Aggregation::SgaTopk | Aggregation::SgaTop1 => {
            embed_records(
                &mut private_records,
                embedder,
                &settings.retry,
                config.parallel_width,
            )?;
            embed_records(
                &mut public_records,
                embedder,
                &settings.retry,
                config.parallel_width,
            )?;
            let sga = sga_aggregate(
                &private_records,
                &public_records,
                &config.dpm_config(),
                k,
                None,
                &mut rng.labeled("dpm"),
            )?;
            let answer = if config.aggregation == Aggregation::SgaTopk {
                let fin = select_final(
                    &sga.candidates,
                    &query.input,
                    &one_shot,
                    config.task,
                    llm,
                    settings,
                )?;
                snapshots.push(PromptSnapshot {
                    stage: "selection".into(),
                    index: 0,
                    text: fin.prompt,
                });
                fin.answer
            } else {
                sga.candidates.top().text().to_string()
            };
            let views = sga
                .candidates
                .entries()
                .iter()
                .map(|c| CandidateView {
                    text: c.record.text().to_string(),
                    provenance: c.record.record().provenance(),
                    weight: c.weight,
                    cluster: c.cluster,
                })
                .collect();
            (answer, views, None, sga.clusters.mechanism_log)
        }
        Aggregation::Ksa | Aggregation::KsaNoPublic => {
            let mut all = private_records;
            all.extend(public_records);
            let sel = ksa_aggregate(&all, config.ksa_budget(), k, &mut rng.labeled("ksa"))?;
            let fin = ksa_reconstruct(
                &sel.keywords,
                &query.input,
                &one_shot,
                config.task,
                llm,
                settings,
            )?;
            snapshots.push(PromptSnapshot {
                stage: "ksa_reconstruction".into(),
                index: 0,
                text: fin.prompt,
            });
            (
                fin.answer,
                Vec::new(),
                Some(sel.keywords),
                sel.mechanism_log,
            )
        }
    };
    let accounted = replay(&log, config.budget.delta, &DpmConfig::default().grid)?;

    Ok(RunReport {
        query_id: query.id.clone(),
        aggregation: config.aggregation,
        answer,
        candidates,
        keywords,
        mechanism_log: log,
        accounted_budget: accounted,
        configured_budget: config.budget,
        dropped_members: dropped,
        prompt_snapshots: snapshots,
        timing: Timing {
            ensemble_ms,
            aggregation_ms: ms(agg_start),
            total_ms: ms(start),
        },
    })
}

/// Sequential composition of per-query logs against an optional total limit.
#[derive(Debug, Clone)]
pub struct BudgetTracker {
    limit: Option<f64>,
    delta: f64,
    grid: AlphaGrid,
    events: Vec<MechanismEvent>,
    queries: usize,
}

impl BudgetTracker {
    pub fn new(limit: Option<f64>, delta: f64) -> Self {
        Self {
            limit,
            delta,
            grid: AlphaGrid::default(),
            events: Vec::new(),
            queries: 0,
        }
    }

    /// Total after also spending `next`.
    pub fn preview(&self, next: &[MechanismEvent]) -> Result<PrivacyReport> {
        let mut all = self.events.clone();
        all.extend_from_slice(next);
        Ok(replay(&all, self.delta, &self.grid)?)
    }

    /// Checks that spending `next` stays within the limit.
    pub fn check(&self, next: &[MechanismEvent]) -> Result<PrivacyReport> {
        let report = self.preview(next)?;
        match self.limit {
            Some(limit) if report.epsilon > limit => Err(PipelineError::BudgetExhausted {
                would_spend: report.epsilon,
                limit,
            }),
            _ => Ok(report),
        }
    }

    pub fn record(&mut self, events: &[MechanismEvent]) {
        self.events.extend_from_slice(events);
        self.queries += 1;
    }

    pub fn total(&self) -> Result<PrivacyReport> {
        self.preview(&[])
    }

    pub fn queries(&self) -> usize {
        self.queries
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(
    points: &[Vec<f64>],
    members: impl Iterator<Item = usize>,
    dim: usize,
) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for i in members {
        for (s, x) in sum.iter_mut().zip(&points[i]) {
            *s += x;
        }
        count += 1;
    }
    (count > 0).then(|| sum.into_iter().map(|s| s / count as f64).collect())
}

/// Non-private k-means (k-means++ seeding, at most `iterations` Lloyd steps)
/// returning, per cluster, the member nearest its centroid. Indices ascend.
pub fn coreset_sample(
    points: &[Vec<f64>],
    target_m: usize,
    iterations: usize,
    rng: &mut DpRng,
) -> Result<Vec<usize>> {
    if target_m == 0 || target_m > points.len() {
        return Err(PipelineError::Config(format!(
            "coreset size {target_m} must lie in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(PipelineError::Config(
            "coreset points have differing dimensions".into(),
        ));
    }

    let mut chosen = vec![rng.below(points.len())];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < target_m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| nearest(p, centroids).expect("centroids nonempty"))
            .collect()
    };
    let mut labels = assign(&centroids);
    for _ in 0..iterations {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(target_m);
        let mut empty = Vec::new();
        for (c, old) in centroids.iter().enumerate().take(target_m) {
            match mean_of(points, (0..points.len()).filter(|&i| labels[i] == c), dim) {
                Some(mean) => next.push(mean),
                None => {
                    next.push(old.clone());
                    empty.push(c);
                }
            }
        }
        // Re-seed empty clusters at the point worst served by its centroid.
        for c in empty {
            let far = (0..points.len())
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &next[labels[a]]);
                    let db = sq_dist(&points[b], &next[labels[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("points nonempty");
            next[c] = points[far].clone();
            labels[far] = c;
        }
        centroids = next;
        let relabeled = assign(&centroids);
        if relabeled == labels {
            break;
        }
        labels = relabeled;
    }

    let mut picks: Vec<usize> = Vec::new();
    for (c, centroid) in centroids.iter().enumerate() {
        let best = (0..points.len())
            .filter(|&i| labels[i] == c)
            .min_by(|&a, &b| {
                sq_dist(&points[a], centroid)
                    .total_cmp(&sq_dist(&points[b], centroid))
                    .then(a.cmp(&b))
            });
        if let Some(i) = best {
            picks.push(i);
        }
    }
    picks.sort_unstable();
    picks.dedup();
    Ok(picks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Original pool followed by the generated examples.
    pub pool: Vec<Example>,
    /// Indices into the original pool used as generation seeds.
    pub seeds: Vec<usize>,
    pub generated: usize,
    pub failures: usize,
    pub mechanism_log: Vec<MechanismEvent>,
}

/// Ranks public examples by distance to the nearest privatized centroid of
/// the private embeddings, seeds generation from the closest quarter, and
/// appends `n_generate` generated examples to the pool.
#[allow(clippy::too_many_arguments)]
pub fn augment_public(
    private_embeddings: &[Vec<f64>],
    public_pool: &[Example],
    dpm: &DpmConfig,
    n_generate: usize,
    task: Task,
    llm: &dyn CompletionBackend,
    embedder: &dyn Embedder,
    settings: &CallSettings,
    rng: &mut DpRng,
) -> Result<Augmentation> {
    if public_pool.is_empty() {
        return Err(PipelineError::Config("public pool is empty".into()));
    }
    let set = PointSet::with_radius(private_embeddings.to_vec(), 1.0)?;
    let clusters = dpm_cluster(&set, dpm, rng)?;

    let mut dist = Vec::with_capacity(public_pool.len());
    for e in public_pool {
        let (v, _) = settings.retry.run(|| embedder.embed(&e.input));
        let v = v?;
        let d = clusters
            .centers
            .iter()
            .map(|c| sq_dist(&v, c))
            .fold(f64::INFINITY, f64::min);
        dist.push(d);
    }
    let mut order: Vec<usize> = (0..public_pool.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let seeds: Vec<usize> = order[..public_pool.len().div_ceil(4)].to_vec();

    let mut pool = public_pool.to_vec();
    let mut failures = 0;
    for i in 0..n_generate {
        let seed = &public_pool[seeds[i % seeds.len()]];
        let prompt = build_prompt(
            std::slice::from_ref(seed),
            "",
            task,
            PromptMode::Generation { variant: i + 1 },
        )?;
        let (res, attempts) = settings.complete(llm, &prompt);
        match res.ok().and_then(|t| parse_generated(&t, task)) {
            Some((input, output)) => pool.push(Example::new(
                format!("{}-gen{}", seed.id, i + 1),
                input,
                output,
            )),
            None => {
                failures += 1;
                log::warn!(
                    "generation {} from seed {} failed after {attempts} attempt(s)",
                    i + 1,
                    seed.id
                );
            }
        }
    }
    Ok(Augmentation {
        generated: pool.len() - public_pool.len(),
        pool,
        seeds,
        failures,
        mechanism_log: clusters.mechanism_log,
    })
}
