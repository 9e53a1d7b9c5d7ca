//! Average accuracy and forgetting over a continual run.
//!
//! Update indices in this module count updates seen so far: `t = 1` is the
//! state after the first update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Correct counts per (after update `t`, test set `τ`), `τ ≤ t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    sizes: Vec<usize>,
    correct: Vec<Vec<Option<usize>>>,
}

impl AccuracyMatrix {
    pub fn new(test_set_sizes: Vec<usize>) -> Result<Self> {
        if test_set_sizes.contains(&0) {
            return Err(Error::Contract("test sets must be non-empty".into()));
        }
        let correct = (0..test_set_sizes.len()).map(|t| vec![None; t + 1]).collect();
        Ok(Self {
            sizes: test_set_sizes,
            correct,
        })
    }

    pub fn num_updates(&self) -> usize {
        self.sizes.len()
    }

    pub fn test_set_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Records `correct` hits on test set `tau` after update `t` (both 1-based).
    pub fn record(&mut self, t: usize, tau: usize, correct: usize) -> Result<()> {
        if tau == 0 || tau > t || t > self.num_updates() {
            return Err(Error::Contract(format!(
                "entry ({t}, {tau}) is outside the lower triangle of {} updates",
                self.num_updates()
            )));
        }
        if correct > self.sizes[tau - 1] {
            return Err(Error::Contract(format!(
                "{correct} correct out of {} test instances",
                self.sizes[tau - 1]
            )));
        }
        self.correct[t - 1][tau - 1] = Some(correct);
        Ok(())
    }

    pub fn correct(&self, t: usize, tau: usize) -> Option<usize> {
        self.correct.get(t.checked_sub(1)?)?.get(tau.checked_sub(1)?).copied().flatten()
    }

    pub fn get(&self, t: usize, tau: usize) -> Option<f64> {
        self.correct(t, tau).map(|c| c as f64 / self.sizes[tau - 1] as f64)
    }

    fn row(&self, t: usize) -> Result<Vec<usize>> {
        if t == 0 || t > self.num_updates() {
            return Err(Error::Contract(format!("no row {t} in {} updates", self.num_updates())));
        }
        (1..=t)
            .map(|tau| {
                self.correct(t, tau)
                    .ok_or_else(|| Error::Contract(format!("missing accuracy entry ({t}, {tau})")))
            })
            .collect()
    }
}

/// Fraction of correctly classified test instances pooled over test sets
/// `1..=t`.
pub fn average_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = m.row(t)?;
    let hits: usize = row.iter().sum();
    let total: usize = m.sizes[..t].iter().sum();
    Ok(hits as f64 / total as f64)
}

/// Unweighted mean of per-test-set accuracies after update `t`. Not the
/// default; kept for cross-checking against pooled accuracy.
pub fn average_accuracy_task_mean(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = m.row(t)?;
    let sum: f64 = row.iter().zip(&m.sizes).map(|(&c, &s)| c as f64 / s as f64).sum();
    Ok(sum / t as f64)
}

/// Mean drop from the best earlier accuracy to the accuracy after update
/// `t`, over test sets `1..t`.
pub fn forgetting(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Contract(format!("forgetting needs at least two updates, got {t}")));
    }
    let last = m.row(t)?;
    let mut total = 0.0;
    for tau in 1..t {
        let mut best = f64::NEG_INFINITY;
        for s in tau..t {
            let a = m.get(s, tau).ok_or_else(|| Error::Contract(format!("missing accuracy entry ({s}, {tau})")))?;
            best = best.max(a);
        }
        total += best - last[tau - 1] as f64 / m.sizes[tau - 1] as f64;
    }
    Ok(total / (t - 1) as f64)
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pooled standard deviation of two equally sized samples.
pub fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_std(a);
    let (_, sb) = mean_std(b);
    ((sa * sa + sb * sb) / 2.0).sqrt()
}
