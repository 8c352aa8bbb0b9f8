//! Sliding-window Gaussian-process regression of scalar model-error channels.
//!
//! Each channel keeps the most recent `capacity` observations of the model
//! error and refits a squared-exponential GP on them. Predictions expose the
//! posterior mean and variance plus a `c_delta`-scaled confidence interval
//! that the constraint builder turns into robust margins.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default prior signal variance, (m/s²)².
pub const DEFAULT_SIGNAL_VARIANCE: f64 = 1.0;
/// Default length scale per input feature.
pub const DEFAULT_LENGTH_SCALE: f64 = 5.0;
/// Default observation noise variance, (m/s²)².
pub const DEFAULT_NOISE_VARIANCE: f64 = 1e-2;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("non-finite observation (input {input:?}, target {target})")]
    NonFinite { input: Vec<f64>, target: f64 },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("window capacity must be positive")]
    ZeroCapacity,
    #[error("noise variance must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("invalid kernel hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("Gram matrix not positive definite after jitter {jitter:e}")]
    Factorization { jitter: f64 },
    #[error("confidence scale must be non-negative, got {0}")]
    NegativeConfidence(f64),
}

/// One stored observation: feature vector and observed model error.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub input: Vec<f64>,
    pub target: f64,
}

/// FIFO window holding at most `capacity` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    capacity: usize,
    noise_variance: f64,
    dim: Option<usize>,
    entries: VecDeque<Observation>,
}

impl ObservationWindow {
    pub fn new(capacity: usize, noise_variance: f64) -> Result<Self, GpError> {
        if capacity == 0 {
            return Err(GpError::ZeroCapacity);
        }
        if !noise_variance.is_finite() || noise_variance < 0.0 {
            return Err(GpError::InvalidNoise(noise_variance));
        }
        Ok(Self {
            capacity,
            noise_variance,
            dim: None,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    /// Window with a fixed feature dimensionality, so that the prior-only
    /// model can already validate queries.
    pub fn with_dim(capacity: usize, noise_variance: f64, dim: usize) -> Result<Self, GpError> {
        let mut w = Self::new(capacity, noise_variance)?;
        w.dim = Some(dim);
        Ok(w)
    }

    /// Appends an observation, evicting the oldest one when full.
    pub fn push(&mut self, input: &[f64], target: f64) -> Result<(), GpError> {
        if !target.is_finite() || input.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite {
                input: input.to_vec(),
                target,
            });
        }
        match self.dim {
            Some(d) if d != input.len() => {
                return Err(GpError::DimensionMismatch {
                    expected: d,
                    got: input.len(),
                })
            }
            None => self.dim = Some(input.len()),
            _ => {}
        }
        self.entries.push_back(Observation {
            input: input.to_vec(),
            target,
        });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &Observation> {
        self.entries.iter()
    }

    pub fn targets(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.entries.iter().map(|o| o.target))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Squared-exponential kernel hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyper {
    signal_variance: f64,
    length_scales: Vec<f64>,
}

impl KernelHyper {
    pub fn new(signal_variance: f64, length_scales: Vec<f64>) -> Result<Self, GpError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(signal_variance) {
            return Err(GpError::InvalidHyper(format!(
                "signal variance {signal_variance}"
            )));
        }
        if length_scales.is_empty() || !length_scales.iter().all(|&l| ok(l)) {
            return Err(GpError::InvalidHyper(format!(
                "length scales {length_scales:?}"
            )));
        }
        Ok(Self {
            signal_variance,
            length_scales,
        })
    }

    /// σ_f² = 1, every length scale 5.
    pub fn default_for(dim: usize) -> Self {
        Self {
            signal_variance: DEFAULT_SIGNAL_VARIANCE,
            length_scales: vec![DEFAULT_LENGTH_SCALE; dim.max(1)],
        }
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn length_scales(&self) -> &[f64] {
        &self.length_scales
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// k(a, b) = σ_f² exp(-½ Σ ((a_j - b_j) / ℓ_j)²)
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }

    /// Gram matrix of the window inputs, without the noise term.
    pub fn gram(&self, window: &ObservationWindow) -> DMatrix<f64> {
        let inputs: Vec<&[f64]> = window.entries().map(|o| o.input.as_slice()).collect();
        let n = inputs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.kernel(inputs[i], inputs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

/// Posterior mean and variance at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMoment {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorMoment {
    pub const ZERO: PosteriorMoment = PosteriorMoment {
        mean: 0.0,
        variance: 0.0,
    };

    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }

    /// `[μ - c_δ σ, μ + c_δ σ]`
    pub fn confidence_interval(&self, c_delta: f64) -> Result<ConfidenceInterval, GpError> {
        if c_delta.is_nan() || c_delta < 0.0 {
            return Err(GpError::NegativeConfidence(c_delta));
        }
        let half = c_delta * self.std_dev();
        Ok(ConfidenceInterval {
            lower: self.mean - half,
            upper: self.mean + half,
            c_delta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub c_delta: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// A GP fitted to one window. Immutable once built.
#[derive(Debug, Clone)]
pub struct GpModel {
    window: ObservationWindow,
    hyper: KernelHyper,
    /// Lower Cholesky factor of K + (σ_n² + jitter) I.
    factor: DMatrix<f64>,
    weights: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    /// Factorizes `K + σ_n² I` for the window. Jitter is added to the
    /// diagonal only when the plain factorization fails.
    pub fn fit(window: &ObservationWindow, hyper: &KernelHyper) -> Result<Self, GpError> {
        if let Some(d) = window.dim() {
            if d != hyper.dim() {
                return Err(GpError::DimensionMismatch {
                    expected: hyper.dim(),
                    got: d,
                });
            }
        }
        let n = window.len();
        let mut gram = hyper.gram(window);
        for i in 0..n {
            gram[(i, i)] += window.noise_variance();
        }
        let (factor, jitter) = cholesky_with_jitter(&gram)?;
        let targets = window.targets();
        let weights = if n == 0 {
            DVector::zeros(0)
        } else {
            let y = factor.solve_lower_triangular(&targets).expect("nonzero diagonal");
            factor
                .tr_solve_lower_triangular(&y)
                .expect("nonzero diagonal")
        };
        Ok(Self {
            window: window.clone(),
            hyper: hyper.clone(),
            factor,
            weights,
            jitter,
        })
    }

    pub fn predict(&self, query: &[f64]) -> Result<PosteriorMoment, GpError> {
        if query.len() != self.hyper.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.hyper.dim(),
                got: query.len(),
            });
        }
        let prior = self.hyper.kernel(query, query);
        if self.window.is_empty() {
            return Ok(PosteriorMoment {
                mean: 0.0,
                variance: prior,
            });
        }
        let k_star = DVector::from_iterator(
            self.window.len(),
            self.window
                .entries()
                .map(|o| self.hyper.kernel(&o.input, query)),
        );
        let mean = k_star.dot(&self.weights);
        let v = self
            .factor
            .solve_lower_triangular(&k_star)
            .expect("nonzero diagonal");
        // round-off can push the difference slightly below zero
        let variance = (prior - v.dot(&v)).max(0.0);
        Ok(PosteriorMoment { mean, variance })
    }

    /// Log marginal likelihood of the window targets under this model.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.window.len();
        if n == 0 {
            return 0.0;
        }
        let y = self.window.targets();
        let log_det: f64 = (0..n).map(|i| self.factor[(i, i)].ln()).sum::<f64>() * 2.0;
        -0.5 * y.dot(&self.weights) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn window(&self) -> &ObservationWindow {
        &self.window
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Diagonal jitter used on top of σ_n² (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), GpError> {
    let n = matrix.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    if let Some(c) = matrix.clone().cholesky() {
        return Ok((c.unpack(), 0.0));
    }
    let mut jitter = JITTER_START;
    loop {
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c.unpack(), jitter));
        }
        if jitter >= JITTER_MAX {
            return Err(GpError::Factorization { jitter });
        }
        jitter *= 10.0;
    }
}

/// Log marginal likelihood of `window` under `hyper`.
pub fn log_marginal_likelihood(
    window: &ObservationWindow,
    hyper: &KernelHyper,
) -> Result<f64, GpError> {
    Ok(GpModel::fit(window, hyper)?.log_marginal_likelihood())
}

/// Box bounds for hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperBounds {
    pub signal_variance: (f64, f64),
    /// Applies to every feature without an entry in `per_feature`.
    pub length_scale: (f64, f64),
    /// Length-scale bounds by feature index.
    pub per_feature: Vec<(f64, f64)>,
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            signal_variance: (1e-4, 1e2),
            length_scale: (1e-2, 1e2),
            per_feature: Vec::new(),
        }
    }
}

impl HyperBounds {
    pub fn length_scale_for(&self, feature: usize) -> (f64, f64) {
        self.per_feature
            .get(feature)
            .copied()
            .unwrap_or(self.length_scale)
    }

    fn clamp_log(&self, idx: usize, v: f64) -> f64 {
        let (lo, hi) = if idx == 0 {
            self.signal_variance
        } else {
            self.length_scale_for(idx - 1)
        };
        v.clamp(lo.ln(), hi.ln())
    }
}

/// Outcome of a hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperFit {
    pub hyper: KernelHyper,
    pub log_likelihood: f64,
    pub converged: bool,
    pub evaluations: usize,
}

const MIN_WINDOW_FOR_OPTIMIZATION: usize = 3;
const SEARCH_MAX_EVALS: usize = 600;
const SEARCH_MIN_STEP: f64 = 1e-3;

/// Maximizes the log marginal likelihood over (σ_f², ℓ) with a bounded
/// pattern search in log space, starting from the defaults.
///
/// Windows with fewer than three entries return the defaults unchanged. The
/// search never returns anything worse than its starting point; if the
/// evaluation budget runs out, the best point so far comes back with
/// `converged = false`.
pub fn optimize_hyperparameters(
    window: &ObservationWindow,
    bounds: &HyperBounds,
) -> Result<HyperFit, GpError> {
    let dim = window.dim().unwrap_or(1);
    let default = KernelHyper::default_for(dim);
    if window.len() < MIN_WINDOW_FOR_OPTIMIZATION {
        let ll = log_marginal_likelihood(window, &default)?;
        return Ok(HyperFit {
            hyper: default,
            log_likelihood: ll,
            converged: true,
            evaluations: 1,
        });
    }

    let to_hyper = |theta: &[f64]| -> KernelHyper {
        KernelHyper {
            signal_variance: theta[0].exp(),
            length_scales: theta[1..].iter().map(|t| t.exp()).collect(),
        }
    };
    let evals = std::cell::Cell::new(0usize);
    let objective = |theta: &[f64]| -> f64 {
        evals.set(evals.get() + 1);
        log_marginal_likelihood(window, &to_hyper(theta)).unwrap_or(f64::NEG_INFINITY)
    };

    // start from the defaults, pulled inside the bounds if necessary
    let mut best: Vec<f64> = std::iter::once(default.signal_variance.ln())
        .chain(default.length_scales.iter().map(|l| l.ln()))
        .enumerate()
        .map(|(i, v)| bounds.clamp_log(i, v))
        .collect();
    let mut best_ll = objective(&best);

    let mut step = 1.0;
    let mut converged = false;
    'outer: while evals.get() < SEARCH_MAX_EVALS {
        let mut improved = false;
        for i in 0..best.len() {
            for dir in [1.0, -1.0] {
                let mut trial = best.clone();
                trial[i] = bounds.clamp_log(i, trial[i] + dir * step);
                if trial[i] == best[i] {
                    continue;
                }
                let ll = objective(&trial);
                if ll > best_ll {
                    best_ll = ll;
                    best = trial;
                    improved = true;
                    break;
                }
                if evals.get() >= SEARCH_MAX_EVALS {
                    break 'outer;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < SEARCH_MIN_STEP {
                converged = true;
                break;
            }
        }
    }

    Ok(HyperFit {
        hyper: to_hyper(&best),
        log_likelihood: best_ll,
        converged,
        evaluations: evals.get(),
    })
}
