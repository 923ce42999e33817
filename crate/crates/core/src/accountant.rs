//! Privacy-loss calculus over Rényi orders.
//!
//! Mechanisms are described by closed-form RDP curves ([`RdpCurve`]) that are
//! evaluated lazily on an order grid. Pure-DP mechanisms can be amplified by
//! without-replacement subsampling before conversion, curves compose by
//! pointwise addition, and the composed curve is converted back to
//! `(epsilon, delta)` by minimizing the conversion bound over the grid.
//!
//! Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used by [`calibrate`].
pub const CALIBRATION_TOLERANCE: f64 = 1e-6;

/// Above this argument `ln cosh` switches to its asymptotic log-space form.
const LOG_SPACE_THRESHOLD: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("epsilon must be finite and nonnegative, got {0}")]
    InvalidEpsilon(f64),
    #[error("delta must lie in {expected}, got {got}")]
    InvalidDelta { got: f64, expected: &'static str },
    #[error("Renyi order must be > 1, got {0}")]
    InvalidOrder(f64),
    #[error("invalid subsample: need 1 <= m <= n, got m={m}, n={n}")]
    InvalidSubsample { m: u64, n: u64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("cannot compose an empty list of curves")]
    EmptyComposition,
    #[error("repetition count must be at least 1")]
    ZeroRepetitions,
    #[error("subsampling amplification is only defined for pure-DP entries")]
    SubsampledGaussian,
    #[error("invalid order grid: {0}")]
    InvalidGrid(String),
    #[error("calibration target not bracketed: {0}")]
    NonBracketing(String),
}

pub type Result<T> = std::result::Result<T, AccountingError>;

/// Pure `epsilon`-DP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PureDp {
    epsilon: f64,
}

impl PureDp {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(AccountingError::InvalidEpsilon(epsilon));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Approximate `(epsilon, delta)`-DP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxDp {
    pub epsilon: f64,
    pub delta: f64,
}

impl ApproxDp {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(AccountingError::InvalidEpsilon(epsilon));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(AccountingError::InvalidDelta {
                got: delta,
                expected: "[0, 1)",
            });
        }
        Ok(Self { epsilon, delta })
    }
}

/// Uniform sampling of `m` out of `n` records without replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub m: u64,
    pub n: u64,
}

impl SubsampleSpec {
    pub fn new(m: u64, n: u64) -> Result<Self> {
        let spec = Self { m, n };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.n {
            return Err(AccountingError::InvalidSubsample {
                m: self.m,
                n: self.n,
            });
        }
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        self.m as f64 / self.n as f64
    }
}

/// `ln(1 + (m/n)(e^eps - 1))`, the amplified budget of a pure-DP mechanism run
/// on a without-replacement subsample.
pub fn amplify_by_subsampling(eps: PureDp, spec: SubsampleSpec) -> Result<PureDp> {
    spec.validate()?;
    if spec.m == spec.n {
        return Ok(eps);
    }
    let amplified = (spec.rate() * eps.epsilon.exp_m1()).ln_1p();
    // Rounding must never push the amplified value above the input.
    PureDp::new(amplified.min(eps.epsilon))
}

/// Amplification for an approximate guarantee: epsilon as in
/// [`amplify_by_subsampling`], delta scaled by `m/n`.
pub fn amplify_approx(dp: ApproxDp, spec: SubsampleSpec) -> Result<ApproxDp> {
    let eps = amplify_by_subsampling(PureDp::new(dp.epsilon)?, spec)?;
    ApproxDp::new(eps.epsilon, dp.delta * spec.rate())
}

fn check_order(alpha: f64) -> Result<()> {
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(AccountingError::InvalidOrder(alpha));
    }
    Ok(())
}

/// `ln cosh(x)` without overflow or small-argument cancellation.
fn ln_cosh(x: f64) -> f64 {
    let x = x.abs();
    if x > LOG_SPACE_THRESHOLD {
        x - std::f64::consts::LN_2 + (-2.0 * x).exp().ln_1p()
    } else {
        let s = (0.5 * x).sinh();
        (2.0 * s * s).ln_1p()
    }
}

fn em_rdp(epsilon: f64, alpha: f64) -> f64 {
    if epsilon == 0.0 {
        return 0.0;
    }
    if epsilon.is_infinite() || alpha.is_infinite() {
        return f64::INFINITY;
    }
    let quadratic = 0.5 * alpha * epsilon * epsilon;
    // sinh(a e) - sinh((a-1) e) = 2 cosh((a - 1/2) e) sinh(e/2), and
    // sinh(e) = 2 sinh(e/2) cosh(e/2), so the ratio is a ratio of cosh terms.
    let bounded_range = (ln_cosh((alpha - 0.5) * epsilon) - ln_cosh(0.5 * epsilon)) / (alpha - 1.0);
    quadratic.min(bounded_range)
}

/// RDP of the exponential mechanism at order `alpha`.
pub fn em_dp_to_rdp(eps: PureDp, alpha: f64) -> Result<f64> {
    check_order(alpha)?;
    Ok(em_rdp(eps.epsilon, alpha))
}

fn laplace_rdp_unchecked(epsilon: f64, alpha: f64) -> f64 {
    if epsilon == 0.0 {
        return 0.0;
    }
    if epsilon.is_infinite() || alpha.is_infinite() {
        return f64::INFINITY;
    }
    let a = alpha / (2.0 * alpha - 1.0);
    let b = (alpha - 1.0) / (2.0 * alpha - 1.0);
    let up = (alpha - 1.0) * epsilon;
    let log_sum = if up > LOG_SPACE_THRESHOLD {
        let x = a.ln() + up;
        let y = b.ln() - alpha * epsilon;
        x + (y - x).exp().ln_1p()
    } else {
        (a * up.exp_m1() + b * (-alpha * epsilon).exp_m1()).ln_1p()
    };
    (log_sum / (alpha - 1.0)).max(0.0)
}

/// RDP of the Laplace mechanism whose scale is `sensitivity / epsilon`.
pub fn laplace_rdp(eps: PureDp, alpha: f64) -> Result<f64> {
    check_order(alpha)?;
    Ok(laplace_rdp_unchecked(eps.epsilon, alpha))
}

fn gaussian_rdp_unchecked(sigma: f64, sensitivity: f64, alpha: f64) -> f64 {
    if sigma.is_infinite() {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    alpha * sensitivity * sensitivity / (2.0 * sigma * sigma)
}

/// `alpha * sensitivity^2 / (2 sigma^2)`.
pub fn gaussian_rdp(sigma: f64, sensitivity: f64, alpha: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(AccountingError::NonPositive {
            name: "sigma",
            value: sigma,
        });
    }
    if !sensitivity.is_finite() || sensitivity <= 0.0 {
        return Err(AccountingError::NonPositive {
            name: "sensitivity",
            value: sensitivity,
        });
    }
    check_order(alpha)?;
    Ok(gaussian_rdp_unchecked(sigma, sensitivity, alpha))
}

/// Privacy loss as a function of the Rényi order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RdpCurve {
    /// No privacy loss.
    Zero,
    /// Exponential mechanism with pure budget `epsilon`.
    Exponential {
        epsilon: f64,
    },
    /// Laplace mechanism with scale `sensitivity / epsilon`.
    Laplace {
        epsilon: f64,
    },
    /// Gaussian mechanism with noise `sigma` on a query of L2 sensitivity `sensitivity`.
    Gaussian {
        sigma: f64,
        sensitivity: f64,
    },
    /// A guarantee known at a single order. Monotonicity of Rényi divergence
    /// extends it to every lower order; higher orders are unbounded.
    Point {
        alpha: f64,
        rho: f64,
    },
    Repeated {
        curve: Box<RdpCurve>,
        times: u32,
    },
    Composed {
        parts: Vec<RdpCurve>,
    },
}

impl RdpCurve {
    pub fn eval(&self, alpha: f64) -> f64 {
        match self {
            RdpCurve::Zero => 0.0,
            RdpCurve::Exponential { epsilon } => em_rdp(*epsilon, alpha),
            RdpCurve::Laplace { epsilon } => laplace_rdp_unchecked(*epsilon, alpha),
            RdpCurve::Gaussian { sigma, sensitivity } => {
                gaussian_rdp_unchecked(*sigma, *sensitivity, alpha)
            }
            RdpCurve::Point { alpha: at, rho } => {
                if alpha <= *at {
                    *rho
                } else {
                    f64::INFINITY
                }
            }
            RdpCurve::Repeated { curve, times } => f64::from(*times) * curve.eval(alpha),
            RdpCurve::Composed { parts } => parts.iter().map(|c| c.eval(alpha)).sum(),
        }
    }

    /// Orders at which the curve must be evaluated in addition to any grid.
    pub fn support_orders(&self) -> Vec<f64> {
        match self {
            RdpCurve::Point { alpha, .. } => vec![*alpha],
            RdpCurve::Repeated { curve, .. } => curve.support_orders(),
            RdpCurve::Composed { parts } => parts.iter().flat_map(|c| c.support_orders()).collect(),
            _ => Vec::new(),
        }
    }
}

/// Pointwise sum of the given curves.
pub fn compose_rdp(curves: &[RdpCurve]) -> Result<RdpCurve> {
    match curves {
        [] => Err(AccountingError::EmptyComposition),
        [single] => Ok(single.clone()),
        many => {
            let mut parts = Vec::with_capacity(many.len());
            for c in many {
                match c {
                    RdpCurve::Composed { parts: inner } => parts.extend(inner.iter().cloned()),
                    other => parts.push(other.clone()),
                }
            }
            Ok(RdpCurve::Composed { parts })
        }
    }
}

/// Log-spaced grid of Rényi orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            min: 1.01,
            max: 512.0,
            points: 128,
        }
    }
}

impl AlphaGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 1.0) || !self.max.is_finite() || self.max < self.min {
            return Err(AccountingError::InvalidGrid(format!(
                "need 1 < min <= max < inf, got [{}, {}]",
                self.min, self.max
            )));
        }
        if self.points == 0 {
            return Err(AccountingError::InvalidGrid("points must be >= 1".into()));
        }
        Ok(())
    }

    /// Grid orders, both endpoints included.
    pub fn orders(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let (lo, hi) = (self.min.ln(), self.max.ln());
        let step = (hi - lo) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                if i == self.points - 1 {
                    self.max
                } else {
                    (lo + step * i as f64).exp()
                }
            })
            .collect()
    }
}

/// `rho + ln((alpha-1)/alpha) - (ln delta + ln alpha)/(alpha-1)`.
pub fn conversion_bound(rho: f64, alpha: f64, delta: f64) -> f64 {
    rho + (-1.0 / alpha).ln_1p() - (delta.ln() + alpha.ln()) / (alpha - 1.0)
}

/// Result of converting an RDP curve to `(epsilon, delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon: f64,
    pub delta: f64,
    /// Order attaining the minimum; `None` when the curve is unbounded everywhere.
    pub alpha_star: Option<f64>,
    pub grid_spec: AlphaGrid,
}

impl PrivacyReport {
    pub fn as_approx_dp(&self) -> ApproxDp {
        ApproxDp {
            epsilon: self.epsilon,
            delta: self.delta,
        }
    }
}

fn check_open_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountingError::InvalidDelta {
            got: delta,
            expected: "(0, 1)",
        });
    }
    Ok(())
}

/// Minimizes the conversion bound over the grid plus the curve's own support orders.
pub fn rdp_to_approx_dp(curve: &RdpCurve, delta: f64, grid: &AlphaGrid) -> Result<PrivacyReport> {
    check_open_delta(delta)?;
    grid.validate()?;
    let mut orders = grid.orders();
    orders.extend(curve.support_orders().into_iter().filter(|a| *a > 1.0));
    orders.sort_by(f64::total_cmp);
    orders.dedup();

    let mut best = f64::INFINITY;
    let mut alpha_star = None;
    for alpha in orders {
        let rho = curve.eval(alpha);
        if !rho.is_finite() {
            continue;
        }
        let eps = conversion_bound(rho, alpha, delta);
        if eps < best {
            best = eps;
            alpha_star = Some(alpha);
        }
    }
    Ok(PrivacyReport {
        epsilon: best.max(0.0),
        delta,
        alpha_star,
        grid_spec: grid.clone(),
    })
}

/// A mechanism as it appears in a composition plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Mechanism {
    Exponential { epsilon: f64 },
    Laplace { epsilon: f64 },
    Gaussian { sigma: f64, sensitivity: f64 },
}

impl Mechanism {
    fn validate(&self) -> Result<()> {
        match *self {
            Mechanism::Exponential { epsilon } | Mechanism::Laplace { epsilon } => {
                if epsilon.is_nan() || epsilon < 0.0 {
                    return Err(AccountingError::InvalidEpsilon(epsilon));
                }
            }
            Mechanism::Gaussian { sigma, sensitivity } => {
                if sigma.is_nan() || sigma < 0.0 {
                    return Err(AccountingError::NonPositive {
                        name: "sigma",
                        value: sigma,
                    });
                }
                if !sensitivity.is_finite() || sensitivity <= 0.0 {
                    return Err(AccountingError::NonPositive {
                        name: "sensitivity",
                        value: sensitivity,
                    });
                }
            }
        }
        Ok(())
    }

    fn pure_epsilon(&self) -> Option<f64> {
        match *self {
            Mechanism::Exponential { epsilon } | Mechanism::Laplace { epsilon } => Some(epsilon),
            Mechanism::Gaussian { .. } => None,
        }
    }

    fn with_pure_epsilon(&self, epsilon: f64) -> Self {
        match self {
            Mechanism::Exponential { .. } => Mechanism::Exponential { epsilon },
            Mechanism::Laplace { .. } => Mechanism::Laplace { epsilon },
            g @ Mechanism::Gaussian { .. } => g.clone(),
        }
    }

    pub fn curve(&self) -> RdpCurve {
        match *self {
            Mechanism::Exponential { epsilon } => RdpCurve::Exponential { epsilon },
            Mechanism::Laplace { epsilon } => RdpCurve::Laplace { epsilon },
            Mechanism::Gaussian { sigma, sensitivity } => RdpCurve::Gaussian { sigma, sensitivity },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub mechanism: Mechanism,
    #[serde(default = "one")]
    pub count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<SubsampleSpec>,
}

fn one() -> u32 {
    1
}

impl PlanEntry {
    pub fn new(mechanism: Mechanism, count: u32) -> Self {
        Self {
            mechanism,
            count,
            subsample: None,
        }
    }

    pub fn subsampled(mut self, spec: SubsampleSpec) -> Self {
        self.subsample = Some(spec);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    #[serde(default)]
    pub entries: Vec<PlanEntry>,
    pub target_delta: f64,
    #[serde(default)]
    pub grid: AlphaGrid,
}

impl CompositionPlan {
    pub fn new(entries: Vec<PlanEntry>, target_delta: f64) -> Self {
        Self {
            entries,
            target_delta,
            grid: AlphaGrid::default(),
        }
    }
}

/// Per-entry view of a plan after amplification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryAccount {
    pub mechanism: Mechanism,
    pub count: u32,
    /// Pure budget after subsampling amplification, for pure-DP entries.
    pub effective_epsilon: Option<f64>,
}

fn effective_mechanism(entry: &PlanEntry) -> Result<Mechanism> {
    entry.mechanism.validate()?;
    if entry.count == 0 {
        return Err(AccountingError::ZeroRepetitions);
    }
    let Some(spec) = entry.subsample else {
        return Ok(entry.mechanism.clone());
    };
    let Some(eps) = entry.mechanism.pure_epsilon() else {
        return Err(AccountingError::SubsampledGaussian);
    };
    if eps.is_infinite() {
        spec.validate()?;
        return Ok(entry.mechanism.clone());
    }
    let amplified = amplify_by_subsampling(PureDp::new(eps)?, spec)?;
    Ok(entry.mechanism.with_pure_epsilon(amplified.epsilon()))
}

/// Amplified mechanisms of every entry, in plan order.
pub fn plan_breakdown(plan: &CompositionPlan) -> Result<Vec<EntryAccount>> {
    plan.entries
        .iter()
        .map(|e| {
            let m = effective_mechanism(e)?;
            Ok(EntryAccount {
                effective_epsilon: m.pure_epsilon(),
                mechanism: m,
                count: e.count,
            })
        })
        .collect()
}

/// Composed RDP curve of a plan (the zero curve for an empty plan).
pub fn plan_curve(plan: &CompositionPlan) -> Result<RdpCurve> {
    let curves = plan
        .entries
        .iter()
        .map(|e| {
            let curve = effective_mechanism(e)?.curve();
            Ok(if e.count == 1 {
                curve
            } else {
                RdpCurve::Repeated {
                    curve: Box::new(curve),
                    times: e.count,
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if curves.is_empty() {
        return Ok(RdpCurve::Zero);
    }
    compose_rdp(&curves)
}

/// Amplify, compose and convert a whole plan at its target delta.
pub fn account_plan(plan: &CompositionPlan) -> Result<PrivacyReport> {
    let curve = plan_curve(plan)?;
    rdp_to_approx_dp(&curve, plan.target_delta, &plan.grid)
}

/// How the accounted epsilon moves as the free parameter grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    /// Larger parameter, more privacy loss (e.g. a mechanism's base epsilon).
    Increasing,
    /// Larger parameter, less privacy loss (e.g. a noise multiplier).
    Decreasing,
}

/// Finds the least-private parameter value whose accounted epsilon stays at or
/// below `target.epsilon` at `target.delta`: the largest value for an
/// increasing family, the smallest for a decreasing one. Bisection runs in log
/// space to [`CALIBRATION_TOLERANCE`].
pub fn calibrate<F>(
    target: ApproxDp,
    template: F,
    monotonicity: Monotonicity,
    initial: f64,
) -> Result<f64>
where
    F: Fn(f64) -> Result<CompositionPlan>,
{
    check_open_delta(target.delta)?;
    if !(initial > 0.0) || !initial.is_finite() {
        return Err(AccountingError::NonPositive {
            name: "initial parameter",
            value: initial,
        });
    }
    let feasible = |p: f64| -> Result<bool> {
        let mut plan = template(p)?;
        plan.target_delta = target.delta;
        Ok(account_plan(&plan)?.epsilon <= target.epsilon)
    };

    const MAX_STEPS: usize = 1100;
    let (mut feasible_end, mut infeasible_end);
    // Step toward the infeasible side from a feasible point, or vice versa.
    let towards_loss = match monotonicity {
        Monotonicity::Increasing => 2.0,
        Monotonicity::Decreasing => 0.5,
    };
    if feasible(initial)? {
        feasible_end = initial;
        let mut p = initial;
        let mut found = None;
        for _ in 0..MAX_STEPS {
            p *= towards_loss;
            if p == 0.0 || !p.is_finite() {
                break;
            }
            if !feasible(p)? {
                found = Some(p);
                break;
            }
            feasible_end = p;
        }
        infeasible_end = found.ok_or_else(|| {
            AccountingError::NonBracketing(format!(
                "every tried parameter satisfies epsilon <= {}",
                target.epsilon
            ))
        })?;
    } else {
        infeasible_end = initial;
        let mut p = initial;
        let mut found = None;
        for _ in 0..MAX_STEPS {
            p /= towards_loss;
            if p == 0.0 || !p.is_finite() {
                break;
            }
            if feasible(p)? {
                found = Some(p);
                break;
            }
            infeasible_end = p;
        }
        feasible_end = found.ok_or_else(|| {
            AccountingError::NonBracketing(format!(
                "target epsilon {} is below the reachable minimum at delta {}",
                target.epsilon, target.delta
            ))
        })?;
    }

    while (feasible_end / infeasible_end - 1.0).abs() > CALIBRATION_TOLERANCE {
        let mid = (feasible_end * infeasible_end).sqrt();
        if feasible(mid)? {
            feasible_end = mid;
        } else {
            infeasible_end = mid;
        }
    }
    Ok(feasible_end)
}

/// Smallest Gaussian noise multiplier meeting `(epsilon, delta)` for a single
/// release of a query with the given L2 sensitivity. Returns 0 for an
/// unbounded budget.
pub fn calibrate_gaussian_sigma(
    epsilon: f64,
    delta: f64,
    sensitivity: f64,
    grid: &AlphaGrid,
) -> Result<f64> {
    if epsilon.is_infinite() && epsilon > 0.0 {
        return Ok(0.0);
    }
    if !(sensitivity > 0.0) || !sensitivity.is_finite() {
        return Err(AccountingError::NonPositive {
            name: "sensitivity",
            value: sensitivity,
        });
    }
    let target = ApproxDp::new(epsilon, delta)?;
    let grid = grid.clone();
    calibrate(
        target,
        |sigma| {
            let mut plan = CompositionPlan::new(
                vec![PlanEntry::new(
                    Mechanism::Gaussian { sigma, sensitivity },
                    1,
                )],
                delta,
            );
            plan.grid = grid.clone();
            Ok(plan)
        },
        Monotonicity::Decreasing,
        sensitivity,
    )
}
