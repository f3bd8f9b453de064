//! Server-side decoding: debiased histograms over lattice points and the
//! global-model updates built from their means.
//!
//! Codewords are exactly balanced, so for a user whose true index is `l*`
//! the product `cw[l*]·cw[m]` has expectation `-1/(n-1)` at every `m ≠ l*`.
//! The averaged estimates therefore have expectation `(n·c - 1)/(n - 1)`
//! where `c` is the true index frequency vector. [`HistogramAccumulator`]
//! inverts that affine map, so a finished histogram is an unbiased estimate
//! of `c` and sums to one.

use std::io::Write;

use rayon::prelude::*;

use crate::codec::{debias_scale, fill_codeword, Bit, BitMessage, Codeword, SchemeTag};
use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, NestedPair};
use crate::stream::Purpose;

/// How negative histogram entries are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativesPolicy {
    #[default]
    Keep,
    Clamp,
}

/// Debiased empirical frequency of each lattice point for one sub-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub values: Vec<f64>,
    pub round: u32,
    pub subvec: u32,
    pub policy: NegativesPolicy,
}

/// Global model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub weights: Vec<f64>,
    pub round: u32,
}

/// Running sum of `±cw` for one sub-vector. Holds only the current codeword
/// and bit per user; per-user updates are never reconstructed. The sums are
/// integers, so the result does not depend on the order users are added in.
#[derive(Debug, Clone)]
pub struct HistogramAccumulator {
    sums: Vec<i64>,
    users: usize,
}

impl HistogramAccumulator {
    pub fn new(size: usize) -> Self {
        HistogramAccumulator {
            sums: vec![0; size],
            users: 0,
        }
    }

    pub fn add(&mut self, bit: Bit, cw: &Codeword) {
        self.add_entries(bit, cw.entries());
    }

    pub fn add_entries(&mut self, bit: Bit, entries: &[i8]) {
        debug_assert_eq!(entries.len(), self.sums.len());
        let s: i64 = if bit == Bit::Plus { 1 } else { -1 };
        for (acc, &e) in self.sums.iter_mut().zip(entries) {
            *acc += s * e as i64;
        }
        self.users += 1;
    }

    pub fn users(&self) -> usize {
        self.users
    }

    /// `((n-1)/n)·(1/K)·Σ ±cw/(2p-1) + 1/n`.
    pub fn finish(&self, p: f64, round: u32, subvec: u32) -> Result<Histogram> {
        let scale = debias_scale(p)?;
        let n = self.sums.len() as f64;
        let k = self.users.max(1) as f64;
        let shrink = (n - 1.0) / n;
        let values = self
            .sums
            .iter()
            .map(|&s| shrink * s as f64 * scale / k + 1.0 / n)
            .collect();
        Ok(Histogram {
            values,
            round,
            subvec,
            policy: NegativesPolicy::Keep,
        })
    }
}

/// Which bit of a sub-vector a histogram is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// The only bit of a 1-bit message, or the coarse bit of a nested one.
    Primary,
    Nested,
}

fn bit_at(msg: &BitMessage, subvec: usize, stage: Stage) -> Option<Bit> {
    let idx = match (msg.scheme, stage) {
        (SchemeTag::OneBit, Stage::Primary) => subvec,
        (SchemeTag::Nested, Stage::Primary) => 2 * subvec,
        (SchemeTag::Nested, Stage::Nested) => 2 * subvec + 1,
        (SchemeTag::OneBit, Stage::Nested) => return None,
    };
    msg.bits.get(idx).copied()
}

/// Histogram over one sub-vector from `messages[r]` paired with
/// `codewords[r]`. Estimates are accumulated in ascending `user_id`.
pub fn build_histogram(
    messages: &[BitMessage],
    codewords: &[Codeword],
    p: f64,
    subvec: usize,
    stage: Stage,
) -> Result<Histogram> {
    if messages.len() != codewords.len() {
        return Err(Error::DimensionMismatch {
            expected: messages.len(),
            got: codewords.len(),
        });
    }
    let first = messages.first().ok_or(Error::DimensionMismatch {
        expected: 1,
        got: 0,
    })?;
    let mut order: Vec<usize> = (0..messages.len()).collect();
    order.sort_by_key(|&r| messages[r].user_id);
    let mut acc = HistogramAccumulator::new(codewords[0].len());
    for r in order {
        let (msg, cw) = (&messages[r], &codewords[r]);
        if msg.round != first.round {
            return Err(Error::MixedRounds(first.round, msg.round));
        }
        if let Some(origin) = cw.origin() {
            if origin.user_id != msg.user_id || origin.round != msg.round {
                return Err(Error::CodewordMismatch { user: msg.user_id });
            }
        }
        if cw.len() != acc.sums.len() {
            return Err(Error::DimensionMismatch {
                expected: acc.sums.len(),
                got: cw.len(),
            });
        }
        let bit = bit_at(msg, subvec, stage).ok_or(Error::DimensionMismatch {
            expected: subvec + 1,
            got: msg.num_subvecs(),
        })?;
        acc.add(bit, cw);
    }
    acc.finish(p, first.round, subvec as u32)
}

/// `Σ_l values_l · q^l`.
pub fn histogram_mean(h: &Histogram, lat: &LatticeSpec) -> Result<Vec<f64>> {
    if h.values.len() != lat.num_points() {
        return Err(Error::DimensionMismatch {
            expected: lat.num_points(),
            got: h.values.len(),
        });
    }
    let mut mean = vec![0.0; lat.dim()];
    for (v, q) in h.values.iter().zip(lat.points()) {
        for (m, c) in mean.iter_mut().zip(q) {
            *m += v * c;
        }
    }
    Ok(mean)
}

/// Clamp negative entries to zero without renormalizing.
pub fn threshold_histogram(h: &Histogram) -> Histogram {
    Histogram {
        values: h.values.iter().map(|v| v.max(0.0)).collect(),
        round: h.round,
        subvec: h.subvec,
        policy: NegativesPolicy::Clamp,
    }
}

fn add_subvec(weights: &mut [f64], subvec: usize, delta: &[f64]) {
    let dim = delta.len();
    for (a, d) in delta.iter().enumerate() {
        if let Some(w) = weights.get_mut(subvec * dim + a) {
            *w += d;
        }
    }
}

fn expect_subvecs(d: usize, dim: usize, got: usize) -> Result<()> {
    let m = d.div_ceil(dim);
    if got != m {
        return Err(Error::DimensionMismatch { expected: m, got });
    }
    Ok(())
}

/// Add each sub-vector's histogram mean to the previous model; padding past
/// `d` is dropped.
pub fn cpa_update(
    prev: &GlobalModel,
    hists: &[Histogram],
    lat: &LatticeSpec,
) -> Result<GlobalModel> {
    expect_subvecs(prev.weights.len(), lat.dim(), hists.len())?;
    let mut weights = prev.weights.clone();
    for (i, h) in hists.iter().enumerate() {
        add_subvec(&mut weights, i, &histogram_mean(h, lat)?);
    }
    Ok(GlobalModel {
        weights,
        round: prev.round + 1,
    })
}

/// Nested variant: coarse mean plus nested mean per sub-vector.
pub fn nested_cpa_update(
    prev: &GlobalModel,
    coarse: &[Histogram],
    nested: &[Histogram],
    pair: &NestedPair,
) -> Result<GlobalModel> {
    let dim = pair.fine().dim();
    expect_subvecs(prev.weights.len(), dim, coarse.len())?;
    expect_subvecs(prev.weights.len(), dim, nested.len())?;
    let mut weights = prev.weights.clone();
    for (i, (hc, hn)) in coarse.iter().zip(nested).enumerate() {
        let mc = histogram_mean(hc, pair.coarse())?;
        let mn = histogram_mean(hn, pair.nested())?;
        let sum: Vec<f64> = mc.iter().zip(&mn).map(|(a, b)| a + b).collect();
        add_subvec(&mut weights, i, &sum);
    }
    Ok(GlobalModel {
        weights,
        round: prev.round + 1,
    })
}

/// Decode every sub-vector of a round. Codewords are regenerated from the
/// shared seed. Sub-vectors are decoded in parallel.
pub fn decode_round(
    messages: &[BitMessage],
    master_seed: u64,
    sizes: (usize, Option<usize>),
    p: f64,
    policy: NegativesPolicy,
) -> Result<(Vec<Histogram>, Option<Vec<Histogram>>)> {
    let first = messages.first().ok_or(Error::DimensionMismatch {
        expected: 1,
        got: 0,
    })?;
    let round = first.round;
    let m = first.num_subvecs();
    for msg in messages {
        if msg.round != round {
            return Err(Error::MixedRounds(round, msg.round));
        }
        if msg.num_subvecs() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: msg.num_subvecs(),
            });
        }
    }
    let keys = |purpose: Purpose| -> Vec<_> {
        messages
            .iter()
            .map(|msg| crate::stream::StreamKey::new(master_seed, msg.user_id, round, purpose))
            .collect()
    };
    let decode_stage = |stage: Stage, purpose: Purpose, size: usize| -> Result<Vec<Histogram>> {
        let keys = keys(purpose);
        (0..m)
            .into_par_iter()
            .map(|i| {
                let mut acc = HistogramAccumulator::new(size);
                let mut cw = vec![0i8; size];
                for (msg, key) in messages.iter().zip(&keys) {
                    let bit = bit_at(msg, i, stage).expect("length checked");
                    fill_codeword(&mut key.stream(i as u64), &mut cw);
                    acc.add_entries(bit, &cw);
                }
                let h = acc.finish(p, round, i as u32)?;
                Ok(match policy {
                    NegativesPolicy::Keep => h,
                    NegativesPolicy::Clamp => threshold_histogram(&h),
                })
            })
            .collect()
    };
    let primary = decode_stage(Stage::Primary, Purpose::Codebook, sizes.0)?;
    let nested = match sizes.1 {
        Some(size) if first.scheme == SchemeTag::Nested => {
            Some(decode_stage(Stage::Nested, Purpose::NestedCodebook, size)?)
        }
        _ => None,
    };
    Ok((primary, nested))
}

/// Dump histograms as CSV rows `round,subvec,lattice_index,value`.
pub fn write_histograms_csv<W: Write>(mut out: W, hists: &[Histogram]) -> std::io::Result<()> {
    writeln!(out, "round,subvec,lattice_index,value")?;
    for h in hists {
        for (l, v) in h.values.iter().enumerate() {
            writeln!(out, "{},{},{},{}", h.round, h.subvec, l, v)?;
        }
    }
    Ok(())
}
