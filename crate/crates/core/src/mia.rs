//! Repeat-attack membership inference.
//!
//! Each target is truncated to its first few tokens, the prefix is sent as
//! a query through the defended system (with the target planted among the
//! demonstrations when it is a member), and the completion is scored by
//! cosine similarity to the full target. AUROC over member and non-member
//! scores measures attack success.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{Provenance, SgaBudget};
use crate::backend::{BackendError, CallSettings, CompletionBackend, Embedder};
use crate::data::Example;
use crate::pipeline::{
    answer_with_batches, run_ensemble, subsample_partition, Aggregation, Budget, EnsembleConfig,
    PipelineError,
};
use crate::rng::DpRng;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("score lists must be nonempty")]
    EmptyScores,
    #[error("only {scored} of {targets} targets were scored (need 80%)")]
    InsufficientScored { scored: usize, targets: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolRatio {
    /// One non-member per member.
    #[default]
    Balanced,
    /// Four non-members per member.
    Unbalanced,
}

/// How the system under attack answers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    /// Plain few-shot prompting; the answer of the first ensemble member.
    NoAggregation,
    /// Top-k SGA with unlimited budget.
    NonPrivateAggregation,
    /// Top-k SGA with the preset split of `epsilon`.
    Private { epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub truncate_tokens: usize,
    pub members: Vec<Example>,
    pub nonmembers: Vec<Example>,
    pub ratio: PoolRatio,
    pub shots_n: usize,
    pub members_m: usize,
    pub seed: u64,
    pub defense: Defense,
    pub delta: f64,
    pub parallel_width: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            truncate_tokens: 8,
            members: Vec::new(),
            nonmembers: Vec::new(),
            ratio: PoolRatio::Balanced,
            shots_n: 2,
            members_m: 10,
            seed: 0,
            defense: Defense::NoAggregation,
            delta: 2.56e-4,
            parallel_width: 4,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AttackError::Config(m));
        if self.members.is_empty() || self.nonmembers.is_empty() {
            return bad("member and non-member pools must be nonempty".into());
        }
        let want = match self.ratio {
            PoolRatio::Balanced => self.members.len(),
            PoolRatio::Unbalanced => 4 * self.members.len(),
        };
        if self.nonmembers.len() != want {
            return bad(format!(
                "{:?} needs {want} non-members for {} members, got {}",
                self.ratio,
                self.members.len(),
                self.nonmembers.len()
            ));
        }
        let ids: HashSet<&str> = self.members.iter().map(|e| e.id.as_str()).collect();
        if let Some(e) = self.nonmembers.iter().find(|e| ids.contains(e.id.as_str())) {
            return bad(format!("example {:?} is in both pools", e.id));
        }
        if self.truncate_tokens == 0 || self.shots_n == 0 || self.members_m == 0 {
            return bad("truncate_tokens, shots_n and members_m must be >= 1".into());
        }
        if self.shots_n * self.members_m > self.members.len() {
            return bad(format!(
                "{} members cannot fill {} batches of {}",
                self.members.len(),
                self.members_m,
                self.shots_n
            ));
        }
        if let Defense::Private { epsilon } = self.defense {
            if !(epsilon > 0.0) {
                return bad(format!("epsilon must be > 0, got {epsilon}"));
            }
        }
        Ok(())
    }

    fn ensemble_config(&self) -> EnsembleConfig {
        let epsilon = match self.defense {
            Defense::Private { epsilon } => epsilon,
            _ => f64::INFINITY,
        };
        EnsembleConfig {
            shots_n: self.shots_n,
            members_m: self.members_m,
            seed: self.seed,
            aggregation: Aggregation::SgaTopk,
            budget: Budget {
                epsilon,
                delta: self.delta,
            },
            parallel_width: 1,
            ..EnsembleConfig::default()
        }
    }
}

/// The private pool (the attack's members) and the machinery to answer queries.
pub struct DefendedSystem<'a> {
    pub private_pool: &'a [Example],
    pub public_pool: &'a [Example],
    pub config: EnsembleConfig,
    pub defense: Defense,
    pub llm: &'a dyn CompletionBackend,
    pub embedder: &'a dyn Embedder,
    pub settings: CallSettings,
}

impl DefendedSystem<'_> {
    /// Answers `query`. When `planted` is given it is placed in the first
    /// demonstration batch and the rest are drawn from the other examples.
    pub fn answer(
        &self,
        query: &str,
        planted: Option<&Example>,
        rng: &mut DpRng,
    ) -> Result<String> {
        let (n, m) = (self.config.shots_n, self.config.members_m);
        let rest: Vec<Example> = self
            .private_pool
            .iter()
            .filter(|e| planted.is_none_or(|p| p.id != e.id))
            .cloned()
            .collect();
        let mut sample_rng = rng.labeled("subsample");
        let batches = match planted {
            Some(p) => {
                let drawn = subsample_partition(&rest, n * m - 1, 1, &mut sample_rng)?;
                let mut demos = vec![p.clone()];
                demos.extend(drawn.into_iter().flatten());
                demos.chunks(n).map(<[Example]>::to_vec).collect()
            }
            None => subsample_partition(&rest, n, m, &mut sample_rng)?,
        };
        let query = Example::new("attack", query, "");
        match self.defense {
            Defense::NoAggregation => {
                let out = run_ensemble(
                    &batches[..1],
                    &query.input,
                    self.config.task,
                    Provenance::PrivateDerived,
                    self.llm,
                    &self.settings,
                    1,
                    0.0,
                )?;
                Ok(out.records[0].text().to_string())
            }
            Defense::NonPrivateAggregation | Defense::Private { .. } => {
                let report = answer_with_batches(
                    &query,
                    &batches,
                    self.public_pool,
                    &self.config,
                    self.llm,
                    self.embedder,
                    &self.settings,
                    rng,
                )?;
                Ok(report.answer)
            }
        }
    }
}

/// First `n` whitespace tokens of `text`, or `None` if it is not longer.
pub fn truncate(text: &str, n: usize) -> Option<String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    (tokens.len() > n).then(|| tokens[..n].join(" "))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub target_id: String,
    pub is_member: bool,
    pub prefix: String,
    pub completion: String,
    pub score: f64,
}

/// Scores one target; `None` if it is too short to truncate.
pub fn repeat_attack_score(
    target: &Example,
    is_member: bool,
    system: &DefendedSystem<'_>,
    truncate_tokens: usize,
    rng: &mut DpRng,
) -> Result<Option<Transcript>> {
    let Some(prefix) = truncate(&target.input, truncate_tokens) else {
        log::info!(
            "skipping target {}: not longer than {truncate_tokens} tokens",
            target.id
        );
        return Ok(None);
    };
    let completion = system.answer(&prefix, is_member.then_some(target), rng)?;
    let a = system.embedder.embed(&completion)?;
    let b = system.embedder.embed(&target.input)?;
    Ok(Some(Transcript {
        target_id: target.id.clone(),
        is_member,
        prefix,
        completion,
        score: cosine(&a, &b),
    }))
}

/// Probability that a random member outscores a random non-member, with
/// ties counted half. Computed from midranks.
pub fn auroc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(AttackError::EmptyScores);
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);
    Ok((rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub auroc: f64,
    pub skipped: Vec<String>,
    pub transcripts: Vec<Transcript>,
}

/// Runs the repeat attack on every target, `parallel_width` at a time.
pub fn run_attack(
    config: &AttackConfig,
    public_pool: &[Example],
    llm: &dyn CompletionBackend,
    embedder: &dyn Embedder,
    settings: &CallSettings,
) -> Result<AttackResult> {
    config.validate()?;
    let system = DefendedSystem {
        private_pool: &config.members,
        public_pool,
        config: config.ensemble_config(),
        defense: config.defense,
        llm,
        embedder,
        settings: settings.clone(),
    };
    let targets: Vec<(&Example, bool)> = config
        .members
        .iter()
        .map(|e| (e, true))
        .chain(config.nonmembers.iter().map(|e| (e, false)))
        .collect();
    let root = DpRng::new(config.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallel_width.max(1))
        .build()
        .map_err(|e| AttackError::Config(format!("cannot start worker pool: {e}")))?;
    let scored: Vec<Result<Option<Transcript>>> = pool.install(|| {
        targets
            .par_iter()
            .enumerate()
            .map(|(i, (t, member))| {
                let mut rng = root.substream(i as u64);
                repeat_attack_score(t, *member, &system, config.truncate_tokens, &mut rng)
            })
            .collect()
    });

    let mut transcripts = Vec::new();
    let mut skipped = Vec::new();
    for (res, (t, _)) in scored.into_iter().zip(&targets) {
        match res {
            Ok(Some(tr)) => transcripts.push(tr),
            Ok(None) => skipped.push(t.id.clone()),
            Err(e) => {
                log::warn!("target {} not scored: {e}", t.id);
                skipped.push(t.id.clone());
            }
        }
    }
    if (transcripts.len() as f64) < 0.8 * targets.len() as f64 {
        return Err(AttackError::InsufficientScored {
            scored: transcripts.len(),
            targets: targets.len(),
        });
    }
    let member_scores: Vec<f64> = transcripts
        .iter()
        .filter(|t| t.is_member)
        .map(|t| t.score)
        .collect();
    let nonmember_scores: Vec<f64> = transcripts
        .iter()
        .filter(|t| !t.is_member)
        .map(|t| t.score)
        .collect();
    let auroc = auroc(&member_scores, &nonmember_scores)?;
    Ok(AttackResult {
        member_scores,
        nonmember_scores,
        auroc,
        skipped,
        transcripts,
    })
}

/// Budget split used by a defense, if it is private.
pub fn defense_budget(defense: Defense) -> Option<SgaBudget> {
    match defense {
        Defense::Private { epsilon } => Some(SgaBudget::preset(epsilon)),
        _ => None,
    }
}
