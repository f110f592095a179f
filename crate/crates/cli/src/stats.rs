//! Cross-seed aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean: sample standard deviation (`n - 1`) over `sqrt(n)`; zero for one value.
pub fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `sqrt(se_a² + se_b²)`.
pub fn pooled_stderr(a: &[f64], b: &[f64]) -> f64 {
    (stderr(a).powi(2) + stderr(b).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl Aggregate {
    pub fn of(values: Vec<f64>) -> Self {
        Aggregate { mean: mean(&values), stderr: stderr(&values), n: values.len(), values }
    }
}

/// Final per-seed scalars of a run.
pub type SeedResult = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Aggregate>,
}

impl Summary {
    /// Aggregates every key present in all seed results.
    pub fn from_results(kind: &str, seeds: &[u64], results: &[SeedResult]) -> Self {
        let mut metrics = BTreeMap::new();
        if let Some(first) = results.first() {
            for key in first.keys() {
                let values: Option<Vec<f64>> = results.iter().map(|r| r.get(key).copied()).collect();
                if let Some(values) = values {
                    metrics.insert(key.clone(), Aggregate::of(values));
                }
            }
        }
        Summary { kind: kind.to_string(), seeds: seeds.to_vec(), metrics }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_stderr_is_half_the_gap() {
        let (a, b) = (0.3, 1.1);
        assert!((stderr(&[a, b]) - (a - b).abs() / 2.0).abs() < 1e-15);
        assert_eq!(stderr(&[4.0]), 0.0);
    }
}
