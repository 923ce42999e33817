//! Private clustering by recursive axis-aligned splitting.
//!
//! The data set is split top-down: each node privately picks an axis-aligned
//! threshold from a fixed lattice of `floor((b - a) / beta)` offsets per
//! dimension with the exponential mechanism, children receive Laplace-noised
//! sizes, and recursion stops at the depth limit or when a noisy child size
//! falls below `tau_e`. Leaf centers are clipped sums with Gaussian noise,
//! divided by the leaf's noisy size.
//!
//! Candidate `i` addresses dimension `i / numSplits` and offset
//! `i % numSplits`; its threshold is `a + (offset + 0.5) * beta`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{calibrate_gaussian_sigma, AccountingError, AlphaGrid, Mechanism};
use crate::ledger::MechanismEvent;
use crate::mechanisms::{
    exponential_mechanism, gaussian, laplace_count_noise, MechanismError, ScoredChoice,
};
use crate::rng::DpRng;

#[derive(Debug, Error)]
pub enum DpmError {
    #[error("invalid clustering config: {0}")]
    InvalidConfig(String),
    #[error("cannot cluster an empty point set")]
    EmptyInput,
    #[error("point {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("point {index} coordinate {coordinate} = {value} lies outside [{lo}, {hi}]")]
    OutOfBounds {
        index: usize,
        coordinate: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

pub type Result<T> = std::result::Result<T, DpmError>;

/// Points in `[lo, hi]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Vec<f64>>,
    dim: usize,
    lo: f64,
    hi: f64,
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DpmError::InvalidConfig(format!(
                "bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let dim = points.first().map_or(1, Vec::len);
        if dim == 0 {
            return Err(DpmError::InvalidConfig(
                "points need at least one dimension".into(),
            ));
        }
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(DpmError::DimensionMismatch {
                    index,
                    expected: dim,
                    got: p.len(),
                });
            }
            if let Some((coordinate, &value)) = p
                .iter()
                .enumerate()
                .find(|(_, v)| !(**v >= lo && **v <= hi))
            {
                return Err(DpmError::OutOfBounds {
                    index,
                    coordinate,
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(Self {
            points,
            dim,
            lo,
            hi,
        })
    }

    /// Bounds `[-radius, radius]` in every coordinate.
    pub fn with_radius(points: Vec<Vec<f64>>, radius: f64) -> Result<Self> {
        Self::new(points, -radius, radius)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpmConfig {
    /// Maximum split depth.
    pub tau_r: u32,
    /// A split is undone when either child's noisy size is below this.
    pub tau_e: f64,
    pub t: f64,
    pub q: f64,
    pub alpha_score: f64,
    pub eps_cnt: f64,
    pub eps_exp: f64,
    pub eps_avg: f64,
    /// Kept for config compatibility; the interval size is public and costs nothing.
    pub eps_int: f64,
    pub delta: f64,
    pub beta: f64,
    pub clip_norm: f64,
    pub grid: AlphaGrid,
}

impl Default for DpmConfig {
    fn default() -> Self {
        Self {
            tau_r: 4,
            tau_e: 0.0,
            t: 1.0,
            q: 1.0,
            alpha_score: 1.0,
            eps_cnt: 0.38,
            eps_exp: 0.12,
            eps_avg: 0.5,
            eps_int: 0.0,
            delta: 2.56e-4,
            beta: 0.1,
            clip_norm: 1.0,
            grid: AlphaGrid::default(),
        }
    }
}

fn budget_ok(name: &str, v: f64) -> Result<()> {
    if v.is_nan() || v < 0.0 {
        return Err(DpmError::InvalidConfig(format!(
            "{name} must be >= 0, got {v}"
        )));
    }
    Ok(())
}

impl DpmConfig {
    /// Same config with every budget set to `eps`.
    pub fn with_uniform_budget(mut self, eps: f64) -> Self {
        self.eps_cnt = eps;
        self.eps_exp = eps;
        self.eps_avg = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_cnt", self.eps_cnt),
            ("eps_exp", self.eps_exp),
            ("eps_avg", self.eps_avg),
            ("eps_int", self.eps_int),
            ("t", self.t),
            ("alpha_score", self.alpha_score),
        ] {
            budget_ok(name, v)?;
        }
        if !(self.q > 0.0) || !self.t.is_finite() || !self.alpha_score.is_finite() {
            return Err(DpmError::InvalidConfig(
                "q must be > 0 and t, alpha_score finite".into(),
            ));
        }
        if !(self.t / self.q + self.alpha_score > 0.0) {
            return Err(DpmError::InvalidConfig(
                "t/q + alpha_score must be positive".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(DpmError::InvalidConfig(format!(
                "delta must lie in (0, 0.5), got {}",
                self.delta
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(DpmError::InvalidConfig(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(DpmError::InvalidConfig(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if self.tau_e.is_nan() {
            return Err(DpmError::InvalidConfig("tau_e is NaN".into()));
        }
        self.grid.validate()?;
        Ok(())
    }
}

/// Per-level budgets and sensitivity offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub eps_cnt_levels: Vec<f64>,
    pub eps_exp_levels: Vec<f64>,
    pub lambda_levels: Vec<f64>,
}

fn geometric_levels(total: f64, levels: usize) -> Vec<f64> {
    let weights: Vec<f64> = (0..levels).map(|i| 2f64.powf(i as f64 / 2.0)).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| total * w / sum).collect()
}

/// Splits `eps_cnt` over levels `0..=tau_r` and `eps_exp` over `0..tau_r`
/// proportionally to `sqrt(2^i)`; `lambda_i = -ln(2 delta) / eps_cnt_i`.
pub fn budget_schedule(config: &DpmConfig) -> Result<BudgetSchedule> {
    budget_ok("eps_cnt", config.eps_cnt)?;
    budget_ok("eps_exp", config.eps_exp)?;
    if !(config.delta > 0.0 && config.delta < 0.5) {
        return Err(DpmError::InvalidConfig(format!(
            "delta must lie in (0, 0.5), got {}",
            config.delta
        )));
    }
    let levels = config.tau_r as usize;
    let eps_cnt_levels = geometric_levels(config.eps_cnt, levels + 1);
    let eps_exp_levels = geometric_levels(config.eps_exp, levels);
    let offset = -(2.0 * config.delta).ln();
    let lambda_levels = eps_cnt_levels.iter().map(|e| offset / e).collect();
    Ok(BudgetSchedule {
        eps_cnt_levels,
        eps_exp_levels,
        lambda_levels,
    })
}

/// Utility of a split candidate. Scores are divided by `n_tilde - lambda`
/// before selection, and so is the sensitivity.
pub trait SplitScore: Send + Sync {
    /// `band`: points in the beta-wide band centered at the threshold;
    /// `left`/`right`: sizes of the two sides. Higher is better.
    fn score(&self, band: usize, left: usize, right: usize, config: &DpmConfig) -> f64;
    /// Maximum change of `score` when one point is added or removed.
    fn sensitivity(&self, config: &DpmConfig) -> f64;
}

/// Prefers thresholds through empty regions that leave balanced sides:
/// `-(t/q * band + alpha_score * |left - right|)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SparseBandScore;

impl SplitScore for SparseBandScore {
    fn score(&self, band: usize, left: usize, right: usize, config: &DpmConfig) -> f64 {
        let imbalance = left.abs_diff(right) as f64;
        -(config.t / config.q * band as f64 + config.alpha_score * imbalance)
    }

    fn sensitivity(&self, config: &DpmConfig) -> f64 {
        config.t / config.q + config.alpha_score
    }
}

/// Number of threshold offsets per dimension.
pub fn num_splits(lo: f64, hi: f64, beta: f64) -> Result<usize> {
    // Tolerate ratios like 2 / 0.1 landing just under an integer.
    let ratio = (hi - lo) / beta;
    let n = (ratio * (1.0 + 1e-12)).floor();
    if !(n >= 1.0) {
        return Err(DpmError::InvalidConfig(format!(
            "interval size {beta} leaves no split in [{lo}, {hi}]"
        )));
    }
    Ok(n as usize)
}

/// Chosen axis-aligned threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub candidate: usize,
    pub dim: usize,
    pub offset: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitOutcome {
    /// The sensitivity denominator `n_tilde - lambda` is not positive.
    Halt,
    Split {
        decision: SplitDecision,
        /// Indices with coordinate `<= threshold`.
        left: Vec<usize>,
        right: Vec<usize>,
    },
}

struct Lattice {
    lo: f64,
    beta: f64,
    splits: usize,
}

impl Lattice {
    fn decode(&self, candidate: usize) -> SplitDecision {
        let dim = candidate / self.splits;
        let offset = candidate % self.splits;
        SplitDecision {
            candidate,
            dim,
            offset,
            threshold: self.lo + (offset as f64 + 0.5) * self.beta,
        }
    }

    fn bin(&self, x: f64) -> usize {
        (((x - self.lo) / self.beta).floor().max(0.0) as usize).min(self.splits - 1)
    }
}

/// Raw scores of every candidate for the points `members` of `set`.
fn candidate_scores(
    set: &PointSet,
    members: &[usize],
    lattice: &Lattice,
    config: &DpmConfig,
    score: &dyn SplitScore,
) -> Vec<f64> {
    let n = members.len();
    let mut out = Vec::with_capacity(set.dim * lattice.splits);
    let mut column = Vec::with_capacity(n);
    let mut bins = vec![0usize; lattice.splits];
    for d in 0..set.dim {
        column.clear();
        column.extend(members.iter().map(|&i| set.points[i][d]));
        column.sort_by(f64::total_cmp);
        bins.iter_mut().for_each(|b| *b = 0);
        for &x in &column {
            bins[lattice.bin(x)] += 1;
        }
        for (offset, &band) in bins.iter().enumerate().take(lattice.splits) {
            let threshold = lattice.decode(d * lattice.splits + offset).threshold;
            let left = column.partition_point(|&x| x <= threshold);
            out.push(score.score(band, left, n - left, config));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn split_members(
    set: &PointSet,
    members: &[usize],
    n_tilde: f64,
    level: usize,
    schedule: &BudgetSchedule,
    lattice: &Lattice,
    config: &DpmConfig,
    score: &dyn SplitScore,
    rng: &mut DpRng,
) -> Result<SplitOutcome> {
    let denom = n_tilde - schedule.lambda_levels[level];
    if !(denom > 0.0) {
        return Ok(SplitOutcome::Halt);
    }
    let raw = candidate_scores(set, members, lattice, config, score);
    let scaled: Vec<f64> = raw.into_iter().map(|s| s / denom).collect();
    let choice = ScoredChoice::new(scaled, score.sensitivity(config) / denom)?;
    let candidate = exponential_mechanism(&choice, schedule.eps_exp_levels[level], rng)?;
    let decision = lattice.decode(candidate);
    let (left, right) = members
        .iter()
        .partition(|&&i| set.points[i][decision.dim] <= decision.threshold);
    Ok(SplitOutcome::Split {
        decision,
        left,
        right,
    })
}

/// One private split of the whole point set at depth `level`.
pub fn split(
    set: &PointSet,
    n_tilde: f64,
    level: usize,
    schedule: &BudgetSchedule,
    config: &DpmConfig,
    rng: &mut DpRng,
) -> Result<SplitOutcome> {
    if level >= schedule.eps_exp_levels.len() {
        return Err(DpmError::InvalidConfig(format!(
            "split level {level} is at or beyond the depth limit {}",
            schedule.eps_exp_levels.len()
        )));
    }
    let lattice = Lattice {
        lo: set.lo,
        beta: config.beta,
        splits: num_splits(set.lo, set.hi, config.beta)?,
    };
    let members: Vec<usize> = (0..set.len()).collect();
    split_members(
        set,
        &members,
        n_tilde,
        level,
        schedule,
        &lattice,
        config,
        &SparseBandScore,
        rng,
    )
}

struct Leaf {
    members: Vec<usize>,
    n_tilde: f64,
}

struct Builder<'a> {
    set: &'a PointSet,
    schedule: &'a BudgetSchedule,
    lattice: Lattice,
    config: &'a DpmConfig,
    score: &'a dyn SplitScore,
    leaves: Vec<Leaf>,
    /// Nodes that ran a split at each level.
    splits_at_level: Vec<u32>,
}

impl Builder<'_> {
    fn build(
        &mut self,
        members: Vec<usize>,
        n_tilde: f64,
        level: usize,
        rng: &mut DpRng,
    ) -> Result<()> {
        if level >= self.config.tau_r as usize {
            self.leaves.push(Leaf { members, n_tilde });
            return Ok(());
        }
        let outcome = split_members(
            self.set,
            &members,
            n_tilde,
            level,
            self.schedule,
            &self.lattice,
            self.config,
            self.score,
            rng,
        )?;
        let SplitOutcome::Split { left, right, .. } = outcome else {
            self.leaves.push(Leaf { members, n_tilde });
            return Ok(());
        };
        self.splits_at_level[level] += 1;
        let eps_child = self.schedule.eps_cnt_levels[level + 1];
        let n_left = left.len() as f64 + laplace_count_noise(eps_child, rng)?;
        let n_right = right.len() as f64 + laplace_count_noise(eps_child, rng)?;
        if n_left < self.config.tau_e || n_right < self.config.tau_e {
            self.leaves.push(Leaf { members, n_tilde });
            return Ok(());
        }
        self.build(left, n_left, level + 1, rng)?;
        self.build(right, n_right, level + 1, rng)
    }
}

/// Private center of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedCenter {
    pub center: Vec<f64>,
    /// The noisy size was not positive, so the sum was divided by 1.
    pub low_confidence: bool,
}

fn clipped(p: &[f64], clip_norm: f64) -> impl Iterator<Item = f64> + '_ {
    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    p.iter().map(move |x| x * scale)
}

fn average_with_sigma<'p>(
    points: impl Iterator<Item = &'p [f64]>,
    dim: usize,
    n_tilde: f64,
    sigma: f64,
    clip_norm: f64,
    rng: &mut DpRng,
) -> Result<AveragedCenter> {
    let mut sum = vec![0.0; dim];
    for p in points {
        for (s, x) in sum.iter_mut().zip(clipped(p, clip_norm)) {
            *s += x;
        }
    }
    if sigma > 0.0 {
        for s in sum.iter_mut() {
            *s += gaussian(sigma, rng)?;
        }
    }
    let divisor = n_tilde.max(1.0);
    Ok(AveragedCenter {
        center: sum.into_iter().map(|s| s / divisor).collect(),
        low_confidence: !(n_tilde > 0.0),
    })
}

/// Clipped, Gaussian-noised average of `points` divided by `max(n_tilde, 1)`.
/// The noise is calibrated to `(eps_avg, config.delta)` at sensitivity `clip_norm`.
pub fn dp_average(
    points: &[Vec<f64>],
    n_tilde: f64,
    eps_avg: f64,
    config: &DpmConfig,
    rng: &mut DpRng,
) -> Result<AveragedCenter> {
    let dim = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| DpmError::InvalidConfig("dp_average needs the point dimension".into()))?;
    if !(eps_avg > 0.0) {
        return Err(DpmError::InvalidConfig(format!(
            "eps_avg must be > 0, got {eps_avg}"
        )));
    }
    let sigma = calibrate_gaussian_sigma(eps_avg, config.delta, config.clip_norm, &config.grid)?;
    average_with_sigma(
        points.iter().map(Vec::as_slice),
        dim,
        n_tilde,
        sigma,
        config.clip_norm,
        rng,
    )
}

/// Privatized clusters, heaviest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub low_confidence: Vec<bool>,
    /// Leaf index of every input point. Not private; never serialized.
    #[serde(skip)]
    pub assignments: Vec<usize>,
    pub mechanism_log: Vec<MechanismEvent>,
    /// Noise multiplier used for the centers.
    pub sigma: f64,
}

impl ClusterResult {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Input indices of each leaf, in result order.
    pub fn leaves(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.len()];
        for (i, &leaf) in self.assignments.iter().enumerate() {
            out[leaf].push(i);
        }
        out
    }
}

/// Runs the full clustering with the default split score.
pub fn dpm_cluster(
    points: &PointSet,
    config: &DpmConfig,
    rng: &mut DpRng,
) -> Result<ClusterResult> {
    dpm_cluster_with(points, config, &SparseBandScore, rng)
}

/// Runs the full clustering with a custom split score.
pub fn dpm_cluster_with(
    points: &PointSet,
    config: &DpmConfig,
    score: &dyn SplitScore,
    rng: &mut DpRng,
) -> Result<ClusterResult> {
    config.validate()?;
    if points.is_empty() {
        return Err(DpmError::EmptyInput);
    }
    if config.eps_cnt == 0.0 || config.eps_avg == 0.0 || (config.tau_r > 0 && config.eps_exp == 0.0)
    {
        return Err(DpmError::InvalidConfig(
            "eps_cnt, eps_avg and (with tau_r > 0) eps_exp must be positive".into(),
        ));
    }
    let schedule = budget_schedule(config)?;
    let lattice = Lattice {
        lo: points.lo,
        beta: config.beta,
        splits: num_splits(points.lo, points.hi, config.beta)?,
    };

    let n_tilde = points.len() as f64 + laplace_count_noise(schedule.eps_cnt_levels[0], rng)?;
    let mut builder = Builder {
        set: points,
        schedule: &schedule,
        lattice,
        config,
        score,
        leaves: Vec::new(),
        splits_at_level: vec![0; config.tau_r as usize],
    };
    builder.build((0..points.len()).collect(), n_tilde, 0, rng)?;
    let Builder {
        leaves,
        splits_at_level,
        ..
    } = builder;

    let sigma =
        calibrate_gaussian_sigma(config.eps_avg, config.delta, config.clip_norm, &config.grid)?;
    let mut clusters = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let avg = average_with_sigma(
            leaf.members.iter().map(|&i| points.points[i].as_slice()),
            points.dim,
            leaf.n_tilde,
            sigma,
            config.clip_norm,
            rng,
        )?;
        clusters.push(avg);
    }

    let mut log = vec![MechanismEvent::new(
        "dpm",
        "dataset_size",
        Mechanism::Laplace {
            epsilon: schedule.eps_cnt_levels[0],
        },
    )
    .at_level(0)];
    for (level, &nodes) in splits_at_level.iter().enumerate() {
        if nodes == 0 {
            continue;
        }
        log.push(
            MechanismEvent::new(
                "dpm",
                "split",
                Mechanism::Exponential {
                    epsilon: schedule.eps_exp_levels[level],
                },
            )
            .at_level(level as u32)
            .parallel(nodes),
        );
        log.push(
            MechanismEvent::new(
                "dpm",
                "child_counts",
                Mechanism::Laplace {
                    epsilon: schedule.eps_cnt_levels[level + 1],
                },
            )
            .at_level(level as u32 + 1)
            .parallel(2 * nodes),
        );
    }
    log.push(
        MechanismEvent::new(
            "dpm",
            "centers",
            Mechanism::Gaussian {
                sigma,
                sensitivity: config.clip_norm,
            },
        )
        .parallel(leaves.len() as u32),
    );

    let mut order: Vec<usize> = (0..leaves.len()).collect();
    order.sort_by(|&a, &b| leaves[b].n_tilde.total_cmp(&leaves[a].n_tilde));
    let mut rank = vec![0; leaves.len()];
    for (r, &leaf) in order.iter().enumerate() {
        rank[leaf] = r;
    }
    let mut assignments = vec![0; points.len()];
    for (leaf_idx, leaf) in leaves.iter().enumerate() {
        for &i in &leaf.members {
            assignments[i] = rank[leaf_idx];
        }
    }

    Ok(ClusterResult {
        centers: order.iter().map(|&i| clusters[i].center.clone()).collect(),
        weights: order.iter().map(|&i| leaves[i].n_tilde).collect(),
        low_confidence: order.iter().map(|&i| clusters[i].low_confidence).collect(),
        assignments,
        mechanism_log: log,
        sigma,
    })
}
