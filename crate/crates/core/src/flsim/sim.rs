use rand::RngCore;
use rayon::prelude::*;

use crate::aggregate::{cpa_update, decode_round, nested_cpa_update, GlobalModel, NegativesPolicy};
use crate::codec::{
    encode_update, encode_update_nested, num_subvecs, rr_probability, BitMessage, EncodeSeeds,
    PrivacyParams,
};
use crate::data::{
    evaluate_accuracy, gen_regression, gen_synthetic, load_idx, partition_uniform, Dataset, Model,
    ModelKind, Replacement,
};
use crate::error::{Error, Result};
use crate::flsim::attack::{inject_attack, select_attackers};
use crate::flsim::baselines::{
    fedavg_aggregate, laplace_mechanism, local_sgd_steps, signsgd_aggregate, signsgd_encode,
    LrSchedule,
};
use crate::flsim::config::{
    AttackKind, DatasetKind, FLConfig, FeatureScaling, LrMode, ModelChoice, Scheme,
};
use crate::flsim::metrics::{compute_snr, squared_distance, tail_mean, RoundMetrics, Summary};
use crate::lattice::{split_nested, Dither, LatticeSchedule, LatticeSpec};
use crate::stream::{derive_stream, Purpose};

/// Data, model and user shards for one configuration.
#[derive(Debug, Clone)]
pub struct Environment {
    pub model: Model,
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
    pub shards: Vec<Vec<usize>>,
}

fn seed_for(master: u64, purpose: Purpose) -> u64 {
    derive_stream(master, 0, 0, 0, purpose).next_u64()
}

impl Environment {
    pub fn build(cfg: &FLConfig) -> Result<Self> {
        cfg.validate()?;
        let data_seed = seed_for(cfg.seed, Purpose::Dataset);
        let (mut train, mut val, mut test) = match cfg.dataset {
            DatasetKind::Synthetic => {
                let total = cfg.train_size + cfg.val_size + cfg.test_size;
                let all =
                    gen_synthetic(total, cfg.features, cfg.classes, cfg.separation, data_seed);
                let a = cfg.train_size;
                let b = a + cfg.val_size;
                (
                    all.slice(0, a),
                    (cfg.val_size > 0).then(|| all.slice(a, b)),
                    (cfg.test_size > 0).then(|| all.slice(b, total)),
                )
            }
            DatasetKind::Regression => (
                gen_regression(cfg.train_size, cfg.features, data_seed).0,
                None,
                None,
            ),
            DatasetKind::Idx => {
                let full = load_idx(
                    cfg.idx_images.as_ref().expect("validated"),
                    cfg.idx_labels.as_ref().expect("validated"),
                )?;
                let n = full.len();
                let v = cfg.val_size.min(n.saturating_sub(1));
                let test = match (&cfg.idx_test_images, &cfg.idx_test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    _ => None,
                };
                (
                    full.slice(0, n - v),
                    (v > 0).then(|| full.slice(n - v, n)),
                    test,
                )
            }
        };
        let stats = match cfg.scaling {
            FeatureScaling::None => None,
            FeatureScaling::Unit => Some(train.unit_range_stats()),
            FeatureScaling::Standard => Some(train.feature_stats()),
        };
        if let Some(stats) = stats {
            for ds in [Some(&mut train), val.as_mut(), test.as_mut()]
                .into_iter()
                .flatten()
            {
                ds.apply_scaling(&stats);
            }
        }
        let f = train.num_features;
        let model = match cfg.model {
            ModelChoice::Linear => Model::new(ModelKind::Linear, f, train.classes().unwrap_or(1))?,
            ModelChoice::Mlp => Model::new(
                ModelKind::Mlp { hidden: cfg.hidden },
                f,
                train.classes().unwrap_or(1),
            )?,
            ModelChoice::LeastSquares => {
                Model::new(ModelKind::LeastSquares { rho_c: cfg.rho_c }, f, 1)?
            }
        };
        if model.dim() < 2 {
            return Err(Error::Config("model needs at least two weights".into()));
        }
        let shards = partition_uniform(
            train.len(),
            cfg.users,
            cfg.samples_per_user,
            seed_for(cfg.seed, Purpose::Partition),
            Replacement::WhenExhausted,
        )?;
        Ok(Environment {
            model,
            train,
            val,
            test,
            shards,
        })
    }
}

/// Metrics for every round plus the summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
}

pub fn lr_schedule(cfg: &FLConfig) -> LrSchedule {
    match cfg.lr_mode {
        LrMode::Fixed => LrSchedule::Fixed(cfg.lr),
        LrMode::Decay => LrSchedule::Decay {
            tau: cfg.local_steps,
            rho_c: cfg.rho_c,
            phi: cfg.phi,
        },
    }
}

/// `γ` whose outermost level equals the `q`-quantile of `|h|`.
pub fn calibrate_gamma(updates: &[Vec<f64>], q: f64, rate: u32) -> f64 {
    let mut mags: Vec<f64> = updates.iter().flatten().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let at = ((q * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
    let level = mags[at].max(f64::MIN_POSITIVE);
    level / (1.0 - 0.5f64.powi(rate as i32))
}

/// `(M/K)·(Σ‖q‖²/(2p-1)² + cell variance)`.
pub fn theorem1_bound(lat: &LatticeSpec, d: usize, users: usize, p: f64) -> f64 {
    let m = num_subvecs(d, lat.dim()) as f64;
    m / users as f64 * (lat.sum_squared_norms() / (2.0 * p - 1.0).powi(2) + lat.cell_variance())
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct Aggregated {
    weights: Vec<f64>,
    overloads: usize,
    slots: usize,
    bits: u64,
    bound: f64,
}

struct Round<'a> {
    cfg: &'a FLConfig,
    attackers: &'a [u32],
    round: u32,
    lattice: &'a LatticeSpec,
}

impl Round<'_> {
    fn attack(&self, msg: BitMessage) -> BitMessage {
        if self.cfg.attack == AttackKind::None
            || self.attackers.binary_search(&msg.user_id).is_err()
        {
            return msg;
        }
        let mut rng = derive_stream(self.cfg.seed, msg.user_id, self.round, 0, Purpose::Attack);
        inject_attack(&msg, self.cfg.attack, &mut rng)
    }

    fn seeds(&self, user: usize) -> EncodeSeeds {
        EncodeSeeds {
            master_seed: self.cfg.seed,
            user_id: user as u32,
            round: self.round,
        }
    }

    fn policy(&self) -> NegativesPolicy {
        if self.cfg.clamp_negatives {
            NegativesPolicy::Clamp
        } else {
            NegativesPolicy::Keep
        }
    }

    fn dither(&self) -> Dither {
        if self.cfg.dither {
            Dither::Uniform
        } else {
            Dither::Off
        }
    }

    fn aggregate(&self, w: &[f64], updates: &[Vec<f64>], w_fa: &[f64]) -> Result<Aggregated> {
        let cfg = self.cfg;
        let (k, d) = (updates.len(), w.len());
        let float_bits = 64 * (k * d) as u64;
        match cfg.scheme {
            Scheme::Vanilla => Ok(Aggregated {
                weights: w_fa.to_vec(),
                overloads: 0,
                slots: 1,
                bits: float_bits,
                bound: f64::NAN,
            }),
            Scheme::Laplace => {
                let gamma = self.lattice.support();
                let noisy: Vec<(Vec<f64>, usize)> = updates
                    .par_iter()
                    .enumerate()
                    .map(|(u, h)| {
                        let mut rng =
                            derive_stream(cfg.seed, u as u32, self.round, 0, Purpose::Laplace);
                        laplace_mechanism(h, cfg.epsilon, gamma, &mut rng)
                    })
                    .collect();
                let clipped = noisy.iter().map(|x| x.1).sum();
                let hs: Vec<Vec<f64>> = noisy.into_iter().map(|x| x.0).collect();
                Ok(Aggregated {
                    weights: fedavg_aggregate(w, &hs),
                    overloads: clipped,
                    slots: k * d,
                    bits: float_bits,
                    bound: f64::NAN,
                })
            }
            Scheme::SignSgdRr => {
                let p = rr_probability(cfg.epsilon)?;
                let messages: Vec<BitMessage> = updates
                    .par_iter()
                    .enumerate()
                    .map(|(u, h)| {
                        let mut rng =
                            derive_stream(cfg.seed, u as u32, self.round, 0, Purpose::SignResponse);
                        self.attack(signsgd_encode(h, p, u as u32, self.round, &mut rng))
                    })
                    .collect();
                let bits = messages.iter().map(|m| m.bits.len() as u64).sum();
                Ok(Aggregated {
                    weights: signsgd_aggregate(w, &messages, p, self.lattice.spacing() / 2.0)?,
                    overloads: 0,
                    slots: 1,
                    bits,
                    bound: f64::NAN,
                })
            }
            Scheme::Cpa | Scheme::CpaNoRr => {
                let lat = self.lattice;
                let params = if cfg.scheme == Scheme::Cpa {
                    PrivacyParams::new(cfg.epsilon, lat)?
                } else {
                    PrivacyParams::without_rr(lat)
                };
                let encoded: Vec<(BitMessage, usize)> = updates
                    .par_iter()
                    .enumerate()
                    .map(|(u, h)| {
                        let e = encode_update(h, lat, &params, &self.seeds(u), self.dither());
                        (self.attack(e.message), e.overloads)
                    })
                    .collect();
                let overloads = encoded.iter().map(|e| e.1).sum();
                let messages: Vec<BitMessage> = encoded.into_iter().map(|e| e.0).collect();
                let bits = messages.iter().map(|m| m.bits.len() as u64).sum();
                let (hists, _) = decode_round(
                    &messages,
                    cfg.seed,
                    (lat.num_points(), None),
                    params.p,
                    self.policy(),
                )?;
                let prev = GlobalModel {
                    weights: w.to_vec(),
                    round: self.round,
                };
                Ok(Aggregated {
                    weights: cpa_update(&prev, &hists, lat)?.weights,
                    overloads,
                    slots: k * num_subvecs(d, lat.dim()),
                    bits,
                    bound: theorem1_bound(lat, d, k, params.p),
                })
            }
            Scheme::NestedCpa => {
                let pair = split_nested(self.lattice, cfg.coarse_rate, cfg.nested_rate)?;
                let params = PrivacyParams::new(cfg.epsilon, self.lattice)?;
                let encoded: Vec<(BitMessage, usize)> = updates
                    .par_iter()
                    .enumerate()
                    .map(|(u, h)| {
                        let e =
                            encode_update_nested(h, &pair, &params, &self.seeds(u), self.dither());
                        (self.attack(e.message), e.overloads)
                    })
                    .collect();
                let overloads = encoded.iter().map(|e| e.1).sum();
                let messages: Vec<BitMessage> = encoded.into_iter().map(|e| e.0).collect();
                let bits = messages.iter().map(|m| m.bits.len() as u64).sum();
                let sizes = (pair.coarse().num_points(), Some(pair.nested().num_points()));
                let (coarse, nested) =
                    decode_round(&messages, cfg.seed, sizes, params.p, self.policy())?;
                let prev = GlobalModel {
                    weights: w.to_vec(),
                    round: self.round,
                };
                let nested = nested.expect("nested histograms decoded");
                Ok(Aggregated {
                    weights: nested_cpa_update(&prev, &coarse, &nested, &pair)?.weights,
                    overloads,
                    slots: k * num_subvecs(d, self.lattice.dim()),
                    bits,
                    bound: f64::NAN,
                })
            }
        }
    }
}

/// Run a full experiment on `threads` worker threads. The result does not
/// depend on the thread count.
pub fn run_experiment(cfg: &FLConfig, threads: usize) -> Result<RunOutput> {
    run_experiment_with(cfg, threads, |_| Ok(()))
}

/// Like [`run_experiment`], calling `on_round` after every round.
pub fn run_experiment_with(
    cfg: &FLConfig,
    threads: usize,
    mut on_round: impl FnMut(&RoundMetrics) -> Result<()> + Send,
) -> Result<RunOutput> {
    let env = Environment::build(cfg)?;
    let pool = build_pool(threads)?;
    pool.install(|| run_in_pool(cfg, &env, &mut on_round))
}

fn run_in_pool(
    cfg: &FLConfig,
    env: &Environment,
    on_round: &mut (dyn FnMut(&RoundMetrics) -> Result<()> + Send),
) -> Result<RunOutput> {
    let model = &env.model;
    let lr = lr_schedule(cfg);
    let mut w = model.init(&mut derive_stream(cfg.seed, 0, 0, 0, Purpose::Init));
    let attackers = select_attackers(
        cfg.users,
        cfg.num_attackers(),
        &mut derive_stream(cfg.seed, 0, 0, 0, Purpose::AttackerSelection),
    );
    let fine_rate = cfg.fine_rate();
    let mut schedule: Option<LatticeSchedule> = None;
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let t0 = round as usize * cfg.local_steps;
        let updates: Vec<Vec<f64>> = env
            .shards
            .par_iter()
            .enumerate()
            .map(|(u, shard)| {
                let mut rng = derive_stream(cfg.seed, u as u32, round, 0, Purpose::LocalSgd);
                local_sgd_steps(
                    model,
                    &w,
                    &env.train,
                    shard,
                    cfg.local_steps,
                    t0,
                    &lr,
                    cfg.batch_size,
                    &mut rng,
                )
            })
            .collect();

        let sched = match &schedule {
            Some(s) => s,
            None => {
                let gamma = match cfg.gamma_quantile {
                    Some(q) => calibrate_gamma(&updates, q, fine_rate),
                    None => cfg.gamma,
                };
                let base = LatticeSpec::cubic(cfg.lattice_dim, gamma, fine_rate)?;
                schedule.insert(LatticeSchedule::new(base, 1.0, lr.eta(0))?)
            }
        };
        let lattice = if cfg.zeta_decay {
            sched.at(lr.eta(t0))?
        } else {
            sched.base().clone()
        };

        let w_fa = fedavg_aggregate(&w, &updates);
        let step = Round {
            cfg,
            attackers: &attackers,
            round,
            lattice: &lattice,
        };
        let agg = step.aggregate(&w, &updates, &w_fa)?;
        w = agg.weights;

        let accuracy = |ds: &Option<Dataset>| {
            ds.as_ref()
                .map_or(f64::NAN, |ds| evaluate_accuracy(model, &w, ds))
        };
        let objective = match model.kind {
            ModelKind::LeastSquares { .. } => model.objective(&w, &env.train),
            _ => f64::NAN,
        };
        let m = RoundMetrics {
            round,
            snr_db: compute_snr(&w_fa, &w),
            mse: squared_distance(&w, &w_fa),
            theorem1_bound: agg.bound,
            overload_rate: agg.overloads as f64 / agg.slots as f64,
            val_accuracy: accuracy(&env.val),
            test_accuracy: accuracy(&env.test),
            objective,
            bits: agg.bits,
        };
        on_round(&m)?;
        metrics.push(m);
    }

    let gamma = schedule.as_ref().map_or(cfg.gamma, |s| s.base().support());
    let summary = summarize(cfg, &metrics, gamma);
    Ok(RunOutput { metrics, summary })
}

pub fn summarize(cfg: &FLConfig, metrics: &[RoundMetrics], gamma: f64) -> Summary {
    let n = metrics.len().max(1) as f64;
    let last = metrics.last();
    let snrs: Vec<f64> = metrics.iter().map(|m| m.snr_db).collect();
    let mean_mse = metrics.iter().map(|m| m.mse).sum::<f64>() / n;
    let mean_bound = metrics.iter().map(|m| m.theorem1_bound).sum::<f64>() / n;
    Summary {
        scheme: cfg.scheme.name().to_string(),
        users: cfg.users,
        rounds: cfg.rounds,
        seed: cfg.seed,
        final_val_accuracy: last.map_or(f64::NAN, |m| m.val_accuracy),
        final_test_accuracy: last.map_or(f64::NAN, |m| m.test_accuracy),
        snr_last10_db: if snrs.is_empty() {
            f64::NAN
        } else {
            tail_mean(&snrs, 10)
        },
        mean_mse,
        mean_bound,
        bound_satisfied: mean_bound.is_finite() && mean_mse <= mean_bound,
        bits_per_round: last.map_or(0, |m| m.bits),
        total_bits: metrics.iter().map(|m| m.bits).sum(),
        gamma,
        mean_overload_rate: metrics.iter().map(|m| m.overload_rate).sum::<f64>() / n,
    }
}
