//! Piecewise linear manipulation: pushes an anchor-positive pair apart along
//! its difference vector by a factor that shrinks as the pair gets harder.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stretch factor for a pair at distance `d`.
///
/// Linear from `alpha + gamma` at `d = 0` down to `alpha` at the threshold,
/// then exponential decay `alpha · e^{-(d - threshold)}` beyond it.
#[inline]
pub fn lambda<S: Scalar>(d: S, alpha: S, gamma: S, threshold: S) -> S {
    if d >= threshold {
        alpha / (d - threshold).exp()
    } else {
        alpha + gamma * (S::one() - d / threshold)
    }
}

/// `∂λ/∂d`, using the right-hand branch at the knee.
#[inline]
pub fn lambda_derivative<S: Scalar>(d: S, alpha: S, gamma: S, threshold: S) -> S {
    if d >= threshold {
        -alpha / (d - threshold).exp()
    } else {
        -gamma / threshold
    }
}

/// `a* = a + λ(a − p)`, `p* = p + λ(p − a)`.
///
/// The midpoint of the pair is preserved and its distance is multiplied by
/// `1 + 2λ`.
pub fn stretch_pair<S: Scalar>(a: &[S], p: &[S], lambda: S) -> Result<(Vec<S>, Vec<S>)> {
    if a.len() != p.len() {
        return Err(Error::dim("stretch_pair", format!("anchor width {} vs positive width {}", a.len(), p.len())));
    }
    let a_star = a.iter().zip(p).map(|(&x, &y)| x + lambda * (x - y)).collect();
    let p_star = a.iter().zip(p).map(|(&x, &y)| y + lambda * (y - x)).collect();
    Ok((a_star, p_star))
}

/// Outcome of closing an epoch in [`PlmState::update_threshold`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdUpdate<S> {
    Updated(S),
    /// No usable pairs were seen; the old threshold is kept.
    Unchanged,
}

/// Hyperparameters plus the adaptive distance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PlmState<S> {
    pub alpha: S,
    pub gamma: S,
    threshold: S,
    sum: S,
    count: usize,
}

impl<S: Scalar> PlmState<S> {
    pub fn new(alpha: S, gamma: S, threshold: S) -> Result<Self> {
        if !(alpha > S::zero()) || gamma < S::zero() || !(threshold > S::zero()) {
            return Err(Error::Config(format!(
                "PLM needs alpha > 0, gamma >= 0, threshold > 0 (got {alpha}, {gamma}, {threshold})"
            )));
        }
        Ok(Self { alpha, gamma, threshold, sum: S::zero(), count: 0 })
    }

    pub fn threshold(&self) -> S {
        self.threshold
    }

    pub fn lambda(&self, d: S) -> S {
        lambda(d, self.alpha, self.gamma, self.threshold)
    }

    /// Records anchor-positive distances seen during the current epoch.
    pub fn observe(&mut self, distances: &[S]) {
        for &d in distances {
            self.sum = self.sum + d;
        }
        self.count += distances.len();
    }

    pub fn observed_pairs(&self) -> usize {
        self.count
    }

    /// Sets the threshold to the mean distance observed this epoch and
    /// resets the accumulator.
    pub fn update_threshold(&mut self) -> ThresholdUpdate<S> {
        let result = if self.count == 0 {
            ThresholdUpdate::Unchanged
        } else {
            let mean = self.sum / S::count(self.count);
            if mean > S::zero() && mean.is_finite() {
                self.threshold = mean;
                ThresholdUpdate::Updated(mean)
            } else {
                ThresholdUpdate::Unchanged
            }
        };
        self.sum = S::zero();
        self.count = 0;
        result
    }
}
