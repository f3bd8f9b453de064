use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregation scheme under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Vanilla,
    Laplace,
    #[serde(rename = "signsgd-rr")]
    SignSgdRr,
    #[default]
    Cpa,
    NestedCpa,
    CpaNoRr,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Vanilla,
        Scheme::Laplace,
        Scheme::SignSgdRr,
        Scheme::Cpa,
        Scheme::NestedCpa,
        Scheme::CpaNoRr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Vanilla => "vanilla",
            Scheme::Laplace => "laplace",
            Scheme::SignSgdRr => "signsgd-rr",
            Scheme::Cpa => "cpa",
            Scheme::NestedCpa => "nested-cpa",
            Scheme::CpaNoRr => "cpa-no-rr",
        }
    }

    pub fn parse(s: &str) -> Result<Scheme> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }

    pub fn uses_rr(self) -> bool {
        matches!(self, Scheme::Cpa | Scheme::NestedCpa | Scheme::SignSgdRr)
    }

    pub fn uses_epsilon(self) -> bool {
        self.uses_rr() || self == Scheme::Laplace
    }

    /// Schemes whose users send bit messages.
    pub fn sends_bits(self) -> bool {
        !matches!(self, Scheme::Vanilla | Scheme::Laplace)
    }
}

/// Byzantine behaviour applied to the attackers' bit messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    #[default]
    None,
    Ones,
    Flip,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<AttackKind> {
        match s {
            "none" => Ok(AttackKind::None),
            "ones" => Ok(AttackKind::Ones),
            "flip" => Ok(AttackKind::Flip),
            _ => Err(Error::Config(format!("unknown attack `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrMode {
    #[default]
    Fixed,
    /// `η_t = τ / (ρ_c (t + φ))`.
    Decay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
    Regression,
}

/// Feature preprocessing, fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScaling {
    None,
    /// Min-max onto `[0, 1]`.
    #[default]
    Unit,
    /// Zero mean, unit variance.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    #[default]
    Linear,
    Mlp,
    LeastSquares,
}

/// Full experiment description. Read from flat TOML keys; every key has a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FLConfig {
    pub users: usize,
    pub rounds: u32,
    pub local_steps: usize,
    pub batch_size: usize,
    pub samples_per_user: usize,

    pub lr_mode: LrMode,
    pub lr: f64,
    pub rho_c: f64,
    pub phi: f64,
    pub rho_s: Option<f64>,

    pub lattice_dim: usize,
    pub rate: u32,
    pub coarse_rate: u32,
    pub nested_rate: u32,
    pub gamma: f64,
    /// When set, `gamma` is replaced before round 0 so the outermost lattice
    /// level sits at this quantile of `|h|` over the first round's updates.
    pub gamma_quantile: Option<f64>,
    /// Scale the lattice by `η_t / η_0` each round.
    pub zeta_decay: bool,
    pub dither: bool,
    pub clamp_negatives: bool,

    pub scheme: Scheme,
    pub epsilon: f64,
    pub attack: AttackKind,
    pub attack_frac: f64,

    pub dataset: DatasetKind,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub scaling: FeatureScaling,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,

    pub model: ModelChoice,
    pub hidden: usize,

    pub seed: u64,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            users: 100,
            rounds: 50,
            local_steps: 5,
            batch_size: 1,
            samples_per_user: 5,
            lr_mode: LrMode::Fixed,
            lr: 0.05,
            rho_c: 0.1,
            phi: 10.0,
            rho_s: None,
            lattice_dim: 1,
            rate: 1,
            coarse_rate: 1,
            nested_rate: 3,
            gamma: 0.1,
            gamma_quantile: None,
            zeta_decay: false,
            dither: true,
            clamp_negatives: false,
            scheme: Scheme::Cpa,
            epsilon: 0.5,
            attack: AttackKind::None,
            attack_frac: 0.0,
            dataset: DatasetKind::Synthetic,
            features: 20,
            classes: 10,
            separation: 1.0,
            train_size: 6000,
            val_size: 1000,
            test_size: 2000,
            scaling: FeatureScaling::Unit,
            idx_images: None,
            idx_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            model: ModelChoice::Linear,
            hidden: 32,
            seed: 0,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl FLConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: FLConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fine lattice rate for the configured scheme.
    pub fn fine_rate(&self) -> u32 {
        match self.scheme {
            Scheme::NestedCpa => self.coarse_rate + self.nested_rate,
            _ => self.rate,
        }
    }

    pub fn num_attackers(&self) -> usize {
        (self.attack_frac * self.users as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(bad("users must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(bad("rounds must be at least 1"));
        }
        if self.batch_size == 0 || self.samples_per_user == 0 {
            return Err(bad("batch_size and samples_per_user must be at least 1"));
        }
        match self.lr_mode {
            LrMode::Fixed if !(self.lr > 0.0) => return Err(bad("lr must be positive")),
            LrMode::Decay => {
                if !(self.rho_c > 0.0) {
                    return Err(bad("rho_c must be positive"));
                }
                let floor = self.local_steps as f64
                    * self.rho_s.map_or(1.0, |s| (4.0 * s / self.rho_c).max(1.0));
                if !(self.phi >= floor) {
                    return Err(bad(format!("phi = {} must be at least {floor}", self.phi)));
                }
            }
            _ => {}
        }
        if self.lattice_dim == 0 || self.rate == 0 {
            return Err(bad("lattice_dim and rate must be at least 1"));
        }
        if self.scheme == Scheme::NestedCpa && (self.coarse_rate == 0 || self.nested_rate == 0) {
            return Err(bad("nested rates must be at least 1"));
        }
        if self.lattice_dim as u32 * self.fine_rate() > 24 {
            return Err(bad("lattice_dim * rate must not exceed 24"));
        }
        if !(self.gamma > 0.0) {
            return Err(bad("gamma must be positive"));
        }
        if let Some(q) = self.gamma_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(bad("gamma_quantile must be in (0, 1]"));
            }
        }
        if self.scheme.uses_epsilon() && !(self.epsilon > 0.0) {
            return Err(bad("epsilon must be positive for this scheme"));
        }
        if !(0.0..1.0).contains(&self.attack_frac) {
            return Err(bad("attack_frac must be in [0, 1)"));
        }
        if self.attack != AttackKind::None && !self.scheme.sends_bits() {
            return Err(bad(format!(
                "scheme {} has no bit messages to attack",
                self.scheme.name()
            )));
        }
        match (self.dataset, self.model) {
            (DatasetKind::Regression, ModelChoice::LeastSquares) => {
                if !(self.rho_c > 0.0) {
                    return Err(bad("least squares needs rho_c > 0"));
                }
            }
            (DatasetKind::Regression, _) | (_, ModelChoice::LeastSquares) => {
                return Err(bad("least-squares model goes with the regression dataset"))
            }
            _ => {}
        }
        if self.model == ModelChoice::Mlp && !(1..=crate::data::MAX_HIDDEN).contains(&self.hidden) {
            return Err(bad("hidden must be in 1..=64"));
        }
        match self.dataset {
            DatasetKind::Idx => {
                if self.idx_images.is_none() || self.idx_labels.is_none() {
                    return Err(bad("idx dataset needs idx_images and idx_labels"));
                }
            }
            _ => {
                if self.features == 0 || self.train_size == 0 {
                    return Err(bad("features and train_size must be at least 1"));
                }
                if self.dataset == DatasetKind::Synthetic && self.classes < 2 {
                    return Err(bad("classes must be at least 2"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        FLConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = FLConfig {
            scheme: Scheme::NestedCpa,
            attack: AttackKind::Flip,
            attack_frac: 0.2,
            gamma_quantile: Some(0.95),
            ..FLConfig::default()
        };
        let back = FLConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flat_keys() {
        let cfg = FLConfig::from_toml_str(
            "users = 10\nscheme = \"signsgd-rr\"\nepsilon = 2.0\nlr_mode = \"decay\"\nphi = 20.0\n",
        )
        .unwrap();
        assert_eq!(cfg.users, 10);
        assert_eq!(cfg.scheme, Scheme::SignSgdRr);
        assert_eq!(cfg.lr_mode, LrMode::Decay);
        assert!(FLConfig::from_toml_str("userz = 3")
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn invariants_enforced() {
        let base = FLConfig::default();
        let cases = [
            FLConfig {
                lr_mode: LrMode::Decay,
                phi: 2.0,
                local_steps: 5,
                ..base.clone()
            },
            FLConfig {
                lr_mode: LrMode::Decay,
                phi: 10.0,
                rho_s: Some(1.0),
                rho_c: 0.5,
                ..base.clone()
            },
            FLConfig {
                epsilon: 0.0,
                ..base.clone()
            },
            FLConfig {
                attack_frac: 1.0,
                ..base.clone()
            },
            FLConfig {
                scheme: Scheme::Vanilla,
                attack: AttackKind::Ones,
                attack_frac: 0.1,
                ..base.clone()
            },
            FLConfig {
                users: 0,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().unwrap_err().is_config(), "{c:?}");
        }
        FLConfig {
            scheme: Scheme::CpaNoRr,
            epsilon: 0.0,
            ..base
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn scheme_names() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::parse(s.name()).unwrap(), s);
        }
        assert!(Scheme::parse("fedsgd").is_err());
    }
}
