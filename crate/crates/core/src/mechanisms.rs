//! Laplace, Gaussian and exponential-mechanism primitives.

use thiserror::Error;

use crate::rng::DpRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("exponential mechanism needs at least one candidate")]
    EmptyScores,
    #[error("score {index} is not finite: {value}")]
    NonFiniteScore { index: usize, value: f64 },
}

/// Scores of a finite candidate set together with their sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChoice {
    scores: Vec<f64>,
    sensitivity: f64,
}

impl ScoredChoice {
    pub fn new(scores: Vec<f64>, sensitivity: f64) -> Result<Self, MechanismError> {
        if scores.is_empty() {
            return Err(MechanismError::EmptyScores);
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
            return Err(MechanismError::NonFiniteScore { index, value });
        }
        if !(sensitivity > 0.0) || !sensitivity.is_finite() {
            return Err(MechanismError::NonPositive {
                name: "sensitivity",
                value: sensitivity,
            });
        }
        Ok(Self {
            scores,
            sensitivity,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Lowest index attaining the maximum score.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }

    /// Selection probabilities `softmax(eps * score / (2 sensitivity))`.
    pub fn probabilities(&self, eps: f64) -> Vec<f64> {
        if eps.is_infinite() {
            let mut p = vec![0.0; self.len()];
            p[self.argmax()] = 1.0;
            return p;
        }
        let scale = eps / (2.0 * self.sensitivity);
        let max = self.scores[self.argmax()];
        let w: Vec<f64> = self
            .scores
            .iter()
            .map(|s| (scale * (s - max)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

/// One draw from Laplace(0, scale).
pub fn laplace(scale: f64, rng: &mut DpRng) -> Result<f64, MechanismError> {
    if !(scale > 0.0) {
        return Err(MechanismError::NonPositive {
            name: "scale",
            value: scale,
        });
    }
    if scale.is_infinite() {
        return Ok(f64::INFINITY);
    }
    // Inverse CDF on u in (-1/2, 1/2).
    let u = rng.uniform_open() - 0.5;
    Ok(-scale * u.signum() * (-2.0 * u.abs()).ln_1p())
}

/// Laplace noise for a sensitivity-1 count at budget `eps`; zero when `eps` is infinite.
pub fn laplace_count_noise(eps: f64, rng: &mut DpRng) -> Result<f64, MechanismError> {
    if eps.is_infinite() && eps > 0.0 {
        return Ok(0.0);
    }
    if !(eps > 0.0) {
        return Err(MechanismError::NonPositive {
            name: "epsilon",
            value: eps,
        });
    }
    laplace(1.0 / eps, rng)
}

/// One draw from N(0, sigma^2).
pub fn gaussian(sigma: f64, rng: &mut DpRng) -> Result<f64, MechanismError> {
    if !(sigma > 0.0) {
        return Err(MechanismError::NonPositive {
            name: "sigma",
            value: sigma,
        });
    }
    Ok(sigma * rng.standard_normal())
}

/// Samples index `i` with probability proportional to `exp(eps * score_i / (2 sensitivity))`.
/// An infinite budget returns the argmax, ties to the lowest index.
pub fn exponential_mechanism(
    choice: &ScoredChoice,
    eps: f64,
    rng: &mut DpRng,
) -> Result<usize, MechanismError> {
    if !(eps > 0.0) {
        return Err(MechanismError::NonPositive {
            name: "epsilon",
            value: eps,
        });
    }
    if eps.is_infinite() {
        return Ok(choice.argmax());
    }
    let probs = choice.probabilities(eps);
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left u above the accumulated mass; fall back to the last
    // candidate with nonzero probability.
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}
