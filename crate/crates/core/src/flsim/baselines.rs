use rand::{Rng, RngCore};

use crate::codec::{debias_scale, randomized_response, Bit, BitMessage, SchemeTag};
use crate::data::{Dataset, Model};
use crate::error::{Error, Result};

/// Step-size rule for local SGD, indexed by global iteration `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Fixed(f64),
    Decay { tau: usize, rho_c: f64, phi: f64 },
}

impl LrSchedule {
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Fixed(eta) => eta,
            LrSchedule::Decay { tau, rho_c, phi } => tau as f64 / (rho_c * (t as f64 + phi)),
        }
    }
}

/// `η_t = τ / (ρ_c (t + φ))`.
pub fn step_size(t: usize, tau: usize, rho_c: f64, phi: f64) -> Result<f64> {
    if !(rho_c > 0.0) || !(phi >= tau as f64) || tau == 0 {
        return Err(Error::Config(format!(
            "step size needs rho_c > 0 and phi >= tau >= 1, got rho_c = {rho_c}, phi = {phi}, tau = {tau}"
        )));
    }
    Ok(LrSchedule::Decay { tau, rho_c, phi }.eta(t))
}

/// Run `tau` SGD steps from `w` on the shard, starting at global iteration
/// `t0`, and return `w_{t0+tau} - w`. Batches are drawn uniformly with
/// replacement from the shard.
#[allow(clippy::too_many_arguments)]
pub fn local_sgd_steps<R: RngCore + ?Sized>(
    model: &Model,
    w: &[f64],
    ds: &Dataset,
    shard: &[usize],
    tau: usize,
    t0: usize,
    lr: &LrSchedule,
    batch_size: usize,
    rng: &mut R,
) -> Vec<f64> {
    assert!(!shard.is_empty(), "empty shard");
    let mut local = w.to_vec();
    let mut batch = vec![0; batch_size];
    for s in 0..tau {
        for b in batch.iter_mut() {
            *b = shard[rng.random_range(0..shard.len())];
        }
        let (_, g) = model.loss_and_grad(&local, ds, &batch);
        let eta = lr.eta(t0 + s);
        for (x, gi) in local.iter_mut().zip(&g) {
            *x -= eta * gi;
        }
    }
    local.iter_mut().zip(w).for_each(|(x, w0)| *x -= w0);
    local
}

/// `w + (1/K) Σ h`, accumulated in slice order.
pub fn fedavg_aggregate(w: &[f64], updates: &[Vec<f64>]) -> Vec<f64> {
    assert!(!updates.is_empty(), "no updates");
    let mut sum = vec![0.0; w.len()];
    for h in updates {
        for (s, v) in sum.iter_mut().zip(h) {
            *s += v;
        }
    }
    let k = updates.len() as f64;
    w.iter().zip(&sum).map(|(a, s)| a + s / k).collect()
}

fn laplace_sample<R: RngCore + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Clip every coordinate to `[-gamma, gamma]` and add Laplace noise with
/// scale `2·gamma/epsilon`. Returns the privatized vector and the number of
/// clipped coordinates.
pub fn laplace_mechanism<R: RngCore + ?Sized>(
    h: &[f64],
    epsilon: f64,
    gamma: f64,
    rng: &mut R,
) -> (Vec<f64>, usize) {
    let scale = 2.0 * gamma / epsilon;
    let mut clipped = 0;
    let out = h
        .iter()
        .map(|&x| {
            clipped += (x.abs() > gamma) as usize;
            x.clamp(-gamma, gamma) + laplace_sample(scale, rng)
        })
        .collect();
    (out, clipped)
}

/// One bit per coordinate: the sign of `h` through randomized response.
pub fn signsgd_encode<R: RngCore + ?Sized>(
    h: &[f64],
    p: f64,
    user_id: u32,
    round: u32,
    rng: &mut R,
) -> BitMessage {
    BitMessage {
        user_id,
        round,
        scheme: SchemeTag::OneBit,
        bits: h
            .iter()
            .map(|&x| randomized_response(Bit::from_sign(x), p, rng))
            .collect(),
    }
}

/// `w + magnitude · (1/K) Σ b/(2p-1)` per coordinate, users in slice order.
pub fn signsgd_aggregate(
    w: &[f64],
    messages: &[BitMessage],
    p: f64,
    magnitude: f64,
) -> Result<Vec<f64>> {
    let scale = debias_scale(p)?;
    let mut sum = vec![0.0; w.len()];
    for msg in messages {
        if msg.bits.len() != w.len() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                got: msg.bits.len(),
            });
        }
        for (s, b) in sum.iter_mut().zip(&msg.bits) {
            *s += b.value();
        }
    }
    let k = messages.len().max(1) as f64;
    Ok(w.iter()
        .zip(&sum)
        .map(|(a, s)| a + magnitude * scale * s / k)
        .collect())
}
