//! Named replication experiments with pass/fail checks.
//!
//! Every suite runs a fixed, seeded experiment and compares what it measures
//! with a pinned threshold. Reports are plain text so they can be read in a
//! terminal or a CI log.

use std::fmt;
use std::time::{Duration, Instant};

use rand::RngCore;

use crate::aggregate::{decode_round, NegativesPolicy};
use crate::codec::{
    compress_to_bit, encode_update, keyed_codeword, randomized_response, rr_probability, Bit,
    Codeword, EncodeSeeds, PrivacyParams,
};
use crate::data::{gen_regression, gen_synthetic, Dataset, Model, ModelKind};
use crate::error::{Error, Result};
use crate::flsim::metrics::write_metrics_csv;
use crate::flsim::{run_experiment, AttackKind, FLConfig, Scheme, Summary};
use crate::lattice::{Dither, LatticeSpec};
use crate::stream::{derive_stream, Purpose, StreamKey};

pub const SUITES: [&str; 10] = [
    "theorem1-bound",
    "unbiasedness",
    "ldp-ratio",
    "k-anonymity",
    "table3-accuracy",
    "table5-nested",
    "table6-robustness",
    "fig5-snr-trends",
    "determinism",
    "numerics",
];

/// One thresholded comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: String,
    pub expected: String,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    /// Table rows with the raw measurements.
    pub details: Vec<String>,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            details: Vec::new(),
            checks: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    fn check(
        &mut self,
        name: impl Into<String>,
        measured: impl Into<String>,
        expected: impl Into<String>,
        pass: bool,
    ) {
        self.checks.push(Check {
            name: name.into(),
            measured: measured.into(),
            expected: expected.into(),
            pass,
        });
    }

    fn row(&mut self, line: impl Into<String>) {
        self.details.push(line.into());
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "== {} ({:.1} s) ==",
            self.suite,
            self.elapsed.as_secs_f64()
        )?;
        for line in &self.details {
            writeln!(f, "  {line}")?;
        }
        for c in &self.checks {
            let tag = if c.pass { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "  [{tag}] {}: measured {}, expected {}",
                c.name, c.measured, c.expected
            )?;
        }
        write!(f, "  => {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Desk-scale linear softmax setup: 1000 users with 5 samples each, 50
/// rounds, `ε = 0.5`, 10-class synthetic data with 20 features.
pub fn desk_config() -> FLConfig {
    FLConfig {
        users: 1000,
        rounds: 50,
        local_steps: 5,
        samples_per_user: 5,
        lr: 0.5,
        gamma_quantile: Some(0.95),
        epsilon: 0.5,
        features: 20,
        classes: 10,
        separation: 1.0,
        ..FLConfig::default()
    }
}

pub fn run_suite(name: &str, threads: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut report = match name {
        "theorem1-bound" => theorem1_bound(threads),
        "unbiasedness" => unbiasedness(),
        "ldp-ratio" => ldp_ratio(),
        "k-anonymity" => k_anonymity(),
        "table3-accuracy" => table3_accuracy(threads),
        "table5-nested" => table5_nested(threads),
        "table6-robustness" => table6_robustness(threads),
        "fig5-snr-trends" => fig5_snr_trends(threads),
        "determinism" => determinism(),
        "numerics" => numerics(),
        _ => Err(Error::UnknownSuite(name.to_string())),
    }?;
    report.elapsed = start.elapsed();
    Ok(report)
}

fn summary(cfg: &FLConfig, threads: usize) -> Result<Summary> {
    Ok(run_experiment(cfg, threads)?.summary)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

fn theorem1_bound(threads: usize) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("theorem1-bound");
    let users = [10usize, 100, 1000];
    r.row("eps     K      mse         bound       gamma");
    for eps in [0.5, 1.0] {
        let mut mses = Vec::new();
        for &k in &users {
            // 5 classes x 9 features + 5 biases = 50 weights
            let cfg = FLConfig {
                users: k,
                rounds: 20,
                epsilon: eps,
                features: 9,
                classes: 5,
                rate: 1,
                lattice_dim: 1,
                ..desk_config()
            };
            let s = summary(&cfg, threads)?;
            r.row(format!(
                "{eps:<7} {k:<6} {:<11.4e} {:<11.4e} {:.4}",
                s.mean_mse, s.mean_bound, s.gamma
            ));
            r.check(
                format!("mse <= bound at eps={eps} K={k}"),
                format!("{:.4e}", s.mean_mse),
                format!("<= {:.4e}", s.mean_bound),
                s.mean_mse <= s.mean_bound,
            );
            mses.push(s.mean_mse);
        }
        let ks: Vec<f64> = users.iter().map(|&k| k as f64).collect();
        let slope = log_log_slope(&ks, &mses);
        r.check(
            format!("log-log mse slope in K at eps={eps}"),
            format!("{slope:.3}"),
            "-1 +/- 0.3",
            (slope + 1.0).abs() <= 0.3,
        );
    }
    Ok(r)
}

/// Fixed lattice indices for `users` encoders: index `i` is held by a
/// share of users proportional to `i + 1`.
fn skewed_indices(users: usize, n: usize) -> Vec<usize> {
    let total: usize = (1..=n).sum();
    let mut out = Vec::with_capacity(users);
    for i in 0..n {
        let count = users * (i + 1) / total;
        out.extend(std::iter::repeat_n(i, count));
    }
    while out.len() < users {
        out.push(n - 1);
    }
    out
}

fn unbiasedness() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("unbiasedness");
    let users = 100_000;
    let eps = 0.5;
    for (dim, rate) in [(1usize, 3u32), (2, 2)] {
        let lat = LatticeSpec::cubic(dim, 1.0, rate)?;
        let n = lat.num_points();
        let indices = skewed_indices(users, n);
        let params = PrivacyParams::new(eps, &lat)?;
        let messages: Vec<_> = indices
            .iter()
            .enumerate()
            .map(|(u, &i)| {
                let seeds = EncodeSeeds {
                    master_seed: 17,
                    user_id: u as u32,
                    round: 0,
                };
                encode_update(lat.point(i), &lat, &params, &seeds, Dither::Off).message
            })
            .collect();
        let (hists, _) = decode_round(&messages, 17, (n, None), params.p, NegativesPolicy::Keep)?;
        let hist = &hists[0];

        let mut counts = vec![0usize; n];
        for &i in &indices {
            counts[i] += 1;
        }
        let k = users as f64;
        let scale = (n as f64 - 1.0) / n as f64;
        let second = 1.0 / (2.0 * params.p - 1.0).powi(2);
        let mut worst: f64 = 0.0;
        for (j, &count) in counts.iter().enumerate() {
            let truth = count as f64 / k;
            // per-user mean of b·cw_j/(2p-1) is 1 on the own index, -1/(n-1) elsewhere
            let own = count as f64;
            let other = k - own;
            let mean_sq = own + other / (n as f64 - 1.0).powi(2);
            let se = scale * ((second * k - mean_sq).max(0.0)).sqrt() / k;
            let z = (hist.values[j] - truth) / se;
            worst = worst.max(z.abs());
            r.row(format!(
                "L={dim} R={rate} index {j:>2}: estimate {:.5} truth {truth:.5} se {se:.5} z {z:+.2}",
                hist.values[j]
            ));
        }
        r.check(
            format!("max |z| over {n} entries, L={dim} R={rate}"),
            format!("{worst:.2}"),
            "<= 4",
            worst <= 4.0,
        );
    }
    Ok(r)
}

/// Empirical `P(output = +1 | x)` for the dithered 1-bit encoder with a
/// fixed codeword.
fn plus_rate(lat: &LatticeSpec, cw: &Codeword, p: f64, x: f64, trials: usize, stream: u32) -> f64 {
    let mut rng = derive_stream(23, stream, 0, 0, Purpose::MonteCarlo);
    let mut u = [0.0];
    let mut plus = 0usize;
    for _ in 0..trials {
        lat.fill_dither(&mut rng, &mut u);
        let q = lat.quantize_with_dither(&[x], &u);
        let bit = compress_to_bit(cw, q.index).expect("index in range");
        plus += (randomized_response(bit, p, &mut rng) == Bit::Plus) as usize;
    }
    plus as f64 / trials as f64
}

/// Ratio `a / b` of two independent proportions and its standard error
/// relative to the ratio.
fn ratio_with_se(a: f64, b: f64, trials: usize) -> (f64, f64) {
    let n = trials as f64;
    let rel = ((1.0 - a) / (a * n) + (1.0 - b) / (b * n)).sqrt();
    (a / b, rel)
}

fn ldp_ratio() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("ldp-ratio");
    let eps: f64 = 0.5;
    let trials = 1_000_000;
    let lat = LatticeSpec::cubic(1, 1.0, 1)?;
    let p = rr_probability(eps)?;
    let cw = keyed_codeword(&StreamKey::new(23, 0, 0, Purpose::Codebook), 0, 2);
    let gamma = lat.support();
    let inputs = [-gamma, -0.3 * gamma, 0.2 * gamma, 0.6 * gamma, 0.9 * gamma];
    let rates: Vec<f64> = inputs
        .iter()
        .enumerate()
        .map(|(s, &x)| plus_rate(&lat, &cw, p, x, trials, s as u32))
        .collect();
    for (x, q) in inputs.iter().zip(&rates) {
        r.row(format!("x = {x:+.2}: P(+1) = {q:.5}"));
    }

    let bound = eps.exp();
    let mut worst = (0.0, 0.0);
    for a in 0..inputs.len() {
        for b in 0..inputs.len() {
            if a == b {
                continue;
            }
            for (pa, pb) in [(rates[a], rates[b]), (1.0 - rates[a], 1.0 - rates[b])] {
                let (ratio, rel) = ratio_with_se(pa, pb, trials);
                if ratio / (1.0 + 5.0 * rel) > worst.0 / (1.0 + 5.0 * worst.1) {
                    worst = (ratio, rel);
                }
            }
        }
    }
    r.check(
        "max output-probability ratio over input pairs",
        format!("{:.5} (se {:.5})", worst.0, worst.0 * worst.1),
        format!(
            "<= e^0.5 * (1 + 5 se) = {:.5}",
            bound * (1.0 + 5.0 * worst.1)
        ),
        worst.0 <= bound * (1.0 + 5.0 * worst.1),
    );

    // 0.6γ and 0.9γ both land on the upper point for every dither draw, so
    // they convey the same bit.
    let same = lat
        .quantize_with_dither(&[0.6 * gamma], &[-lat.spacing() / 2.0])
        .index
        == lat
            .quantize_with_dither(&[0.9 * gamma], &[lat.spacing() / 2.0])
            .index;
    let (ratio, rel) = ratio_with_se(rates[3], rates[4], trials);
    let se = ratio * rel;
    r.check(
        "equal-bit inputs ratio",
        format!("{ratio:.5}"),
        format!("1 +/- {se:.5}"),
        same && (ratio - 1.0).abs() <= se,
    );
    Ok(r)
}

/// Every `±1` word of length `n` with `n/2` entries equal to `+1`.
fn balanced_words(n: usize) -> Vec<Vec<i8>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == n / 2 {
            out.push(
                (0..n)
                    .map(|i| if mask >> i & 1 == 1 { 1 } else { -1 })
                    .collect(),
            );
        }
    }
    out
}

fn k_anonymity() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("k-anonymity");
    for (dim, rate) in [(1usize, 1u32), (1, 3), (2, 2)] {
        let lat = LatticeSpec::cubic(dim, 1.0, rate)?;
        let n = lat.num_points();
        let expected = 1usize << (dim as u32 * rate - 1);

        // Every index is reachable from its own lattice point.
        let reachable = (0..n).all(|i| lat.quantize_nearest(lat.point(i)).index == i);
        // The codeword space: all balanced words, each with an exact preimage size.
        let words = balanced_words(n);
        let exhaustive = words.iter().all(|w| {
            let cw = Codeword::from_entries(w.clone()).expect("balanced");
            (0..n)
                .filter(|&i| matches!(compress_to_bit(&cw, i), Ok(Bit::Plus)))
                .count()
                == expected
        });
        // Codewords actually issued by the keyed generator lie in that space.
        let issued = (0..500u32).all(|u| {
            let cw = keyed_codeword(&StreamKey::new(5, u, 0, Purpose::Codebook), u as usize, n);
            cw.plus_indices().count() == expected
        });
        let k = PrivacyParams::new(1.0, &lat)?.k;
        r.row(format!(
            "L={dim} R={rate}: {} codewords checked, preimage size {expected}, k = {k}",
            words.len()
        ));
        r.check(
            format!("+1 preimage size at L={dim} R={rate}"),
            if reachable && exhaustive && issued {
                format!("{expected}")
            } else {
                "mismatch".into()
            },
            format!("{expected}"),
            reachable && exhaustive && issued && k == expected,
        );
    }
    let k = PrivacyParams::new(1.0, &LatticeSpec::cubic(1, 1.0, 3)?)?.k;
    r.check("k for the R=3 nested codebook", format!("{k}"), "4", k == 4);
    Ok(r)
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn table3_accuracy(threads: usize) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("table3-accuracy");
    let schemes = [Scheme::Vanilla, Scheme::Cpa, Scheme::SignSgdRr];
    let mut acc = vec![Vec::new(); schemes.len()];
    r.row("seed  vanilla  cpa     signsgd-rr   (final test accuracy, %)");
    for seed in SEEDS {
        let mut line = format!("{seed:<5}");
        for (s, scheme) in schemes.iter().enumerate() {
            let cfg = FLConfig {
                scheme: *scheme,
                seed,
                ..desk_config()
            };
            let a = summary(&cfg, threads)?.final_test_accuracy;
            line.push_str(&format!(" {a:<7.2}"));
            acc[s].push(a);
        }
        r.row(line);
    }
    let (v, c, g) = (mean(&acc[0]), mean(&acc[1]), mean(&acc[2]));
    r.row(format!("mean  {v:<7.2} {c:<7.2} {g:<7.2}"));
    r.check(
        "vanilla minus cpa, mean over seeds",
        format!("{:.2}", v - c),
        "<= 5",
        v - c <= 5.0,
    );
    r.check(
        "cpa minus signsgd-rr, mean over seeds",
        format!("{:.2}", c - g),
        "> 0",
        c > g,
    );
    Ok(r)
}

fn table5_nested(threads: usize) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("table5-nested");
    r.row("K     seed  cpa acc  nested acc  cpa snr  nested snr");
    for k in [10usize, 1000] {
        let mut wins_snr = 0;
        let mut wins_acc = 0;
        let mut gap = Vec::new();
        for seed in SEEDS {
            let base = FLConfig {
                users: k,
                seed,
                ..desk_config()
            };
            let one = summary(
                &FLConfig {
                    scheme: Scheme::Cpa,
                    rate: 1,
                    ..base.clone()
                },
                threads,
            )?;
            let nested = summary(
                &FLConfig {
                    scheme: Scheme::NestedCpa,
                    coarse_rate: 1,
                    nested_rate: 3,
                    ..base
                },
                threads,
            )?;
            r.row(format!(
                "{k:<5} {seed:<5} {:<8.2} {:<11.2} {:<8.2} {:.2}",
                one.final_test_accuracy,
                nested.final_test_accuracy,
                one.snr_last10_db,
                nested.snr_last10_db
            ));
            wins_snr += (nested.snr_last10_db > one.snr_last10_db) as usize;
            wins_acc += (nested.final_test_accuracy > one.final_test_accuracy) as usize;
            gap.push(nested.final_test_accuracy - one.final_test_accuracy);
        }
        if k == 10 {
            r.check(
                "K=10 seeds where nested has higher snr",
                format!("{wins_snr}/5"),
                ">= 4/5",
                wins_snr >= 4,
            );
            r.check(
                "K=10 seeds where nested has higher accuracy",
                format!("{wins_acc}/5"),
                ">= 4/5",
                wins_acc >= 4,
            );
        } else {
            let g = mean(&gap);
            r.check(
                "K=1000 |nested - cpa| accuracy, mean over seeds",
                format!("{:.2}", g.abs()),
                "<= 2",
                g.abs() <= 2.0,
            );
        }
    }
    Ok(r)
}

fn table6_robustness(threads: usize) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("table6-robustness");
    let seeds = [0u64, 1, 2];
    let accuracy = |attack: AttackKind, frac: f64| -> Result<f64> {
        let mut acc = Vec::new();
        for seed in seeds {
            let cfg = FLConfig {
                attack,
                attack_frac: frac,
                seed,
                ..desk_config()
            };
            acc.push(summary(&cfg, threads)?.final_test_accuracy);
        }
        Ok(mean(&acc))
    };
    let none = accuracy(AttackKind::None, 0.0)?;
    r.row(format!(
        "no attack: {none:.2}% (mean over {} seeds)",
        seeds.len()
    ));
    for frac in [0.2, 0.3] {
        for (attack, label) in [(AttackKind::Ones, "ones"), (AttackKind::Flip, "flip")] {
            let a = accuracy(attack, frac)?;
            r.row(format!("{label} {:.0}%: {a:.2}%", frac * 100.0));
            r.check(
                format!("accuracy loss, {label} at {:.0}%", frac * 100.0),
                format!("{:.2}", none - a),
                "<= 5",
                none - a <= 5.0,
            );
        }
    }
    Ok(r)
}

/// Checks that `series` (one row per setting, one column per seed) is
/// non-decreasing in mean and ordered for a majority of seeds.
fn trend_checks(r: &mut SuiteReport, axis: &str, labels: &[String], series: &[Vec<f64>]) {
    for i in 1..series.len() {
        let (lo, hi) = (&series[i - 1], &series[i]);
        let ordered = lo.iter().zip(hi).filter(|(a, b)| b >= a).count();
        let (ml, mh) = (mean(lo), mean(hi));
        r.check(
            format!("mean snr {axis} {} -> {}", labels[i - 1], labels[i]),
            format!("{ml:.2} -> {mh:.2} dB"),
            "non-decreasing",
            mh >= ml,
        );
        r.check(
            format!("seeds ordered {axis} {} -> {}", labels[i - 1], labels[i]),
            format!("{ordered}/{}", lo.len()),
            "majority",
            2 * ordered > lo.len(),
        );
    }
}

fn fig5_snr_trends(threads: usize) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("fig5-snr-trends");
    let snr = |users: usize, eps: f64| -> Result<Vec<f64>> {
        SEEDS
            .iter()
            .map(|&seed| {
                let cfg = FLConfig {
                    users,
                    epsilon: eps,
                    seed,
                    ..desk_config()
                };
                Ok(summary(&cfg, threads)?.snr_last10_db)
            })
            .collect()
    };
    let fmt = |xs: &[f64]| {
        xs.iter()
            .map(|v| format!("{v:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let eps = [0.5, 1.0, 2.0, 4.0];
    let mut by_eps = Vec::new();
    for e in eps {
        let s = snr(100, e)?;
        r.row(format!("K=100 eps={e}: last-10 snr per seed [{}]", fmt(&s)));
        by_eps.push(s);
    }
    let labels: Vec<String> = eps.iter().map(|e| format!("{e}")).collect();
    trend_checks(&mut r, "in eps at K=100,", &labels, &by_eps);

    let users = [10usize, 100, 1000];
    let mut by_k = Vec::new();
    for k in users {
        let s = snr(k, 1.0)?;
        r.row(format!("eps=1 K={k}: last-10 snr per seed [{}]", fmt(&s)));
        by_k.push(s);
    }
    let labels: Vec<String> = users.iter().map(|k| format!("{k}")).collect();
    trend_checks(&mut r, "in K at eps=1,", &labels, &by_k);
    Ok(r)
}

fn determinism() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("determinism");
    for scheme in [Scheme::Vanilla, Scheme::Cpa, Scheme::SignSgdRr] {
        let cfg = FLConfig {
            scheme,
            ..desk_config()
        };
        let mut csvs = Vec::new();
        for threads in [1, 8] {
            let out = run_experiment(&cfg, threads)?;
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &out.metrics).map_err(|e| Error::io("<memory>", e))?;
            csvs.push(buf);
        }
        let same = csvs[0] == csvs[1];
        r.row(format!(
            "{}: {} bytes of metrics CSV",
            scheme.name(),
            csvs[0].len()
        ));
        r.check(
            format!("{} metrics CSV, 1 vs 8 threads", scheme.name()),
            if same { "identical" } else { "different" },
            "identical",
            same,
        );
    }
    Ok(r)
}

/// Largest relative error between the analytic gradient and central
/// differences, `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_gradient_error(model: &Model, w: &[f64], ds: &Dataset, batch: &[usize]) -> f64 {
    let (_, grad) = model.loss_and_grad(w, ds, batch);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = w.to_vec();
    for j in 0..w.len() {
        probe[j] = w[j] + h;
        let up = model.loss_and_grad(&probe, ds, batch).0;
        probe[j] = w[j] - h;
        let down = model.loss_and_grad(&probe, ds, batch).0;
        probe[j] = w[j];
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[j].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[j] - numeric).abs() / denom);
    }
    worst
}

fn numerics() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("numerics");
    let samples = 1_000_000;
    for (dim, gamma, rate) in [(1usize, 1.0, 1u32), (1, 0.3, 4), (2, 0.5, 2), (3, 2.0, 3)] {
        let lat = LatticeSpec::cubic(dim, gamma, rate)?;
        let mut rng = derive_stream(31, dim as u32, rate, 0, Purpose::MonteCarlo);
        let mut u = vec![0.0; dim];
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for _ in 0..samples {
            lat.fill_dither(&mut rng, &mut u);
            for c in 0..dim {
                sum[c] += u[c];
                sum_sq[c] += u[c] * u[c];
            }
        }
        let n = samples as f64;
        let closed = lat.spacing().powi(2) / 12.0;
        let worst = (0..dim)
            .map(|c| {
                let var = (sum_sq[c] - sum[c] * sum[c] / n) / (n - 1.0);
                (var / closed - 1.0).abs()
            })
            .fold(0.0, f64::max);
        r.row(format!(
            "L={dim} gamma={gamma} R={rate}: delta^2/12 = {closed:.6e}"
        ));
        r.check(
            format!("dither variance, L={dim} R={rate}"),
            format!("{:.3}% off", 100.0 * worst),
            "within 1%",
            worst <= 0.01,
        );
    }

    let mut rng = derive_stream(37, 0, 0, 0, Purpose::MonteCarlo);
    let synthetic = gen_synthetic(40, 6, 4, 1.0, rng.next_u64());
    let regression = gen_regression(40, 6, rng.next_u64()).0;
    let batch: Vec<usize> = (0..8).collect();
    let models = [
        ("linear", Model::new(ModelKind::Linear, 6, 4)?, &synthetic),
        (
            "mlp",
            Model::new(ModelKind::Mlp { hidden: 8 }, 6, 4)?,
            &synthetic,
        ),
        (
            "least-squares",
            Model::new(ModelKind::LeastSquares { rho_c: 0.2 }, 6, 1)?,
            &regression,
        ),
    ];
    for (label, model, ds) in &models {
        let worst = (0..10)
            .map(|_| {
                let w: Vec<f64> = (0..model.dim())
                    .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
                    .collect();
                max_gradient_error(model, &w, ds, &batch)
            })
            .fold(0.0, f64::max);
        r.check(
            format!("{label} gradient vs central differences, 10 points"),
            format!("{worst:.2e}"),
            "< 1e-5 relative",
            worst < 1e-5,
        );
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite() {
        assert!(matches!(
            run_suite("table9", 1),
            Err(Error::UnknownSuite(_))
        ));
    }

    #[test]
    fn slope_of_power_law() {
        let x = [10.0, 100.0, 1000.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.8)).collect();
        assert!((log_log_slope(&x, &y) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn skewed_indices_cover_every_point() {
        let idx = skewed_indices(1000, 8);
        assert_eq!(idx.len(), 1000);
        assert!((0..8).all(|i| idx.contains(&i)));
    }

    #[test]
    fn balanced_word_count() {
        assert_eq!(balanced_words(4).len(), 6);
        assert_eq!(balanced_words(16).len(), 12_870);
    }

    #[test]
    fn fast_suites_pass() {
        {
            let name = "k-anonymity";
            let report = run_suite(name, 1).unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn report_layout() {
        let mut r = SuiteReport::new("demo");
        r.row("a row");
        r.check("thing", "1", "<= 2", true);
        r.check("other", "3", "<= 2", false);
        let text = r.to_string();
        assert!(text.contains("[PASS] thing: measured 1, expected <= 2"));
        assert!(text.contains("[FAIL] other"));
        assert!(text.ends_with("=> FAIL"));
        assert_eq!(r.failures().len(), 1);
    }
}
