use crate::error::{Error, Result};

fn check_pair(preds: &[usize], truth: &[usize]) -> Result<()> {
    if preds.len() != truth.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Usage("no samples to score".into()));
    }
    Ok(())
}

/// Percentage of samples predicted correctly.
pub fn average_accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(preds, truth)?;
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class recall over the classes present in `truth`,
/// in percent.
pub fn class_average_accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(preds, truth)?;
    let classes = truth.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (p, &t) in preds.iter().zip(truth) {
        totals[t] += 1;
        if *p == t {
            hits[t] += 1;
        }
    }
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &n)| n > 0)
        .map(|(&h, &n)| h as f64 / n as f64)
        .collect();
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// `2ab / (a + b)` of two positive percentages.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::Usage(format!("harmonic mean needs positive inputs, got {a} and {b}")));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Harmonic mean extended by continuity: zero when either input is zero.
pub fn harmonic_mean_or_zero(a: f64, b: f64) -> f64 {
    harmonic_mean(a, b).unwrap_or(0.0)
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Median of a non-empty sample.
pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Interquartile range.
pub fn iqr(xs: &[f64]) -> f64 {
    quantile(xs, 0.75) - quantile(xs, 0.25)
}
