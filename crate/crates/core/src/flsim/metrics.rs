use std::io::Write;

use serde::Serialize;

/// First line of every metrics CSV.
pub const CSV_SCHEMA: &str = "# cpa-fed metrics v1";
pub const CSV_HEADER: &str = "round,snr_db,mse,bound,overload_rate,val_acc,test_acc";

/// Per-round measurements. `bound` is NaN for schemes it does not cover;
/// accuracies are NaN for regression tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub snr_db: f64,
    pub mse: f64,
    pub theorem1_bound: f64,
    pub overload_rate: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Full training objective after the round.
    pub objective: f64,
    pub bits: u64,
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.snr_db,
            self.mse,
            self.theorem1_bound,
            self.overload_rate,
            self.val_accuracy,
            self.test_accuracy
        )
    }
}

pub fn write_csv_header<W: Write>(mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_SCHEMA}")?;
    writeln!(out, "{CSV_HEADER}")
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[RoundMetrics]) -> std::io::Result<()> {
    write_csv_header(&mut out)?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn sample_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// `10·log10(var(w_fa) / var(w_fa - w_cpa))` with unbiased sample variances
/// over coordinates. Zero distortion variance gives `+∞`.
pub fn compute_snr(w_fa: &[f64], w_cpa: &[f64]) -> f64 {
    assert_eq!(w_fa.len(), w_cpa.len(), "dimension mismatch");
    assert!(w_fa.len() >= 2, "need two coordinates for a variance");
    let noise = sample_variance(w_fa.iter().zip(w_cpa).map(|(a, b)| a - b));
    if noise == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sample_variance(w_fa.iter().copied()) / noise).log10()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean of the last `n` values (fewer if the series is shorter).
pub fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// End-of-run summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scheme: String,
    pub users: usize,
    pub rounds: u32,
    pub seed: u64,
    pub final_val_accuracy: f64,
    pub final_test_accuracy: f64,
    pub snr_last10_db: f64,
    pub mean_mse: f64,
    pub mean_bound: f64,
    /// Mean MSE over rounds at or below the mean bound; false when no bound applies.
    pub bound_satisfied: bool,
    pub bits_per_round: u64,
    pub total_bits: u64,
    pub gamma: f64,
    pub mean_overload_rate: f64,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn snr_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noisy: Vec<f64> = w
            .iter()
            .map(|x| x + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        assert!((compute_snr(&w, &noisy) - 20.0).abs() < 0.1);
        assert_eq!(compute_snr(&w, &w), f64::INFINITY);
        let zero = vec![0.0; n];
        assert!(compute_snr(&w, &zero).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = RoundMetrics {
            round: 3,
            snr_db: f64::INFINITY,
            mse: 0.0,
            theorem1_bound: f64::NAN,
            overload_rate: 0.25,
            val_accuracy: 80.5,
            test_accuracy: 79.0,
            objective: f64::NAN,
            bits: 10,
        };
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{CSV_SCHEMA}\n{CSV_HEADER}\n3,inf,0,NaN,0.25,80.5,79\n")
        );
    }

    #[test]
    fn tail() {
        assert_eq!(tail_mean(&[1.0, 2.0, 3.0, 4.0], 2), 3.5);
        assert_eq!(tail_mean(&[1.0, 2.0], 10), 1.5);
    }
}
