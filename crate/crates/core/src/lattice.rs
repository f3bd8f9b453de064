//! Lattice quantizers.
//!
//! The supported family is the cubic lattice `Δ·Z^L` restricted to the cube
//! `[-γ, γ]^L`. Each axis carries `2^R` reproduction levels placed at the
//! centres of the `2^R` equal cells of `[-γ, γ]`, so `R = log2(2γ/Δ)` holds
//! exactly and the extreme level is `±(γ - Δ/2)`. `L = 1` is the scalar
//! uniform quantizer; `L = 2` is the `Z²` vector path.
//!
//! Points are enumerated in lexicographic order of their coordinates and
//! indexed from zero.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::stream::{derive_stream, Purpose};

/// Monte Carlo sample count for second moments of multi-dimensional cells.
pub const SECOND_MOMENT_SAMPLES: usize = 1_000_000;

/// Whether the encoder adds dither before quantizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dither {
    #[default]
    Uniform,
    /// Deterministic nearest-point quantization; used by oracle tests.
    Off,
}

/// Normalized second moment, with its Monte Carlo standard error (zero for
/// closed forms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondMoment {
    pub value: f64,
    pub std_error: f64,
}

/// Result of quantizing one sub-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    pub index: usize,
    /// The input (after dither) fell outside the support and was clamped.
    pub overloaded: bool,
}

/// A support-restricted cubic lattice quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    dim: usize,
    rate: u32,
    spacing: f64,
    support: f64,
    levels: Vec<f64>,
    points: Vec<f64>,
    second_moment: SecondMoment,
}

/// Scalar lattice with support `gamma` and `rate` bits.
pub fn make_scalar_lattice(gamma: f64, rate: u32) -> Result<LatticeSpec> {
    LatticeSpec::cubic(1, gamma, rate)
}

impl LatticeSpec {
    /// Cubic lattice `Δ·Z^dim` with per-axis support `[-gamma, gamma]` and
    /// `rate` bits per dimension (`2^(dim·rate)` points in total).
    pub fn cubic(dim: usize, gamma: f64, rate: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidLattice("dimension must be positive".into()));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "support radius must be positive, got {gamma}"
            )));
        }
        if rate == 0 {
            return Err(Error::InvalidLattice("rate must be at least 1 bit".into()));
        }
        if dim as u64 * rate as u64 > 24 {
            return Err(Error::InvalidLattice(format!(
                "2^(L·R) = 2^{} points is too many to enumerate",
                dim as u64 * rate as u64
            )));
        }
        let per_axis = 1usize << rate;
        let spacing = 2.0 * gamma / per_axis as f64;
        let half = (per_axis / 2) as f64;
        let levels: Vec<f64> = (0..per_axis)
            .map(|m| spacing * (m as f64 + 0.5 - half))
            .collect();
        let mut lat = LatticeSpec {
            dim,
            rate,
            spacing,
            support: gamma,
            levels,
            points: Vec::new(),
            second_moment: SecondMoment {
                value: 1.0 / 12.0,
                std_error: 0.0,
            },
        };
        lat.points = lat.enumerate_points();
        if dim > 1 {
            let mut rng = derive_stream(0, 0, 0, dim as u64, Purpose::MonteCarlo);
            lat.second_moment = lat.second_moment_monte_carlo(SECOND_MOMENT_SAMPLES, &mut rng);
        }
        Ok(lat)
    }

    fn enumerate_points(&self) -> Vec<f64> {
        let n = self.num_points();
        let per_axis = self.levels.len();
        let mut points = Vec::with_capacity(n * self.dim);
        for index in 0..n {
            let mut rem = index;
            let mut coords = vec![0.0; self.dim];
            for axis in (0..self.dim).rev() {
                coords[axis] = self.levels[rem % per_axis];
                rem /= per_axis;
            }
            points.extend_from_slice(&coords);
        }
        points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bits per dimension.
    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn support(&self) -> f64 {
        self.support
    }

    /// Per-axis reproduction levels, ascending.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// `2^(L·R)`.
    pub fn num_points(&self) -> usize {
        1usize << (self.dim as u32 * self.rate)
    }

    /// Row-major `L×L` generator `Δ·I`.
    pub fn generator(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            g[i * self.dim + i] = self.spacing;
        }
        g
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// `Σ_l ‖q^l‖²`.
    pub fn sum_squared_norms(&self) -> f64 {
        self.points.iter().map(|c| c * c).sum()
    }

    /// Largest per-axis magnitude of any reproduction point, `γ - Δ/2`.
    /// Inputs inside this range are quantized without bias under dither.
    pub fn outer_level(&self) -> f64 {
        self.support - self.spacing / 2.0
    }

    /// Nearest in-support point. Cells are half-open `(c - Δ/2, c + Δ/2]`
    /// per axis, so a boundary point resolves to the smaller index; inputs
    /// beyond the support clamp to the nearest extreme point.
    pub fn quantize_nearest(&self, x: &[f64]) -> Quantized {
        debug_assert_eq!(x.len(), self.dim);
        let per_axis = self.levels.len();
        let last = per_axis as i64 - 1;
        let mut index = 0usize;
        let mut overloaded = false;
        for &v in x {
            if v.abs() > self.support {
                overloaded = true;
            }
            let t = (v + self.support) / self.spacing;
            let m = (t.ceil() as i64 - 1).clamp(0, last) as usize;
            index = index * per_axis + m;
        }
        Quantized { index, overloaded }
    }

    /// Quantize `x + dither` where the dither is supplied by the caller.
    pub fn quantize_with_dither(&self, x: &[f64], dither: &[f64]) -> Quantized {
        let shifted: Vec<f64> = x.iter().zip(dither).map(|(a, b)| a + b).collect();
        self.quantize_nearest(&shifted)
    }

    /// Uniform sample on the basic cell `(-Δ/2, Δ/2]^L`.
    pub fn dither_sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.fill_dither(rng, &mut out);
        out
    }

    pub fn fill_dither<R: RngCore + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for u in out.iter_mut() {
            let r: f64 = rng.random();
            *u = self.spacing * (0.5 - r);
        }
    }

    /// Quantize `x` after adding a fresh uniform dither (non-subtractive).
    pub fn dithered_quantize<R: RngCore + ?Sized>(&self, x: &[f64], rng: &mut R) -> Quantized {
        let u = self.dither_sample(rng);
        self.quantize_with_dither(x, &u)
    }

    /// `(1/L)∫_{P0}‖x‖²dx / vol(P0)^{1+2/L}`; scale invariant, `1/12` for
    /// every cubic lattice. Multi-dimensional values come from Monte Carlo.
    pub fn lattice_second_moment(&self) -> SecondMoment {
        self.second_moment
    }

    /// Monte Carlo estimate of the normalized second moment from uniform
    /// samples over the basic cell.
    pub fn second_moment_monte_carlo<R: RngCore + ?Sized>(
        &self,
        samples: usize,
        rng: &mut R,
    ) -> SecondMoment {
        let scale = self.spacing * self.spacing * self.dim as f64;
        let mut u = vec![0.0; self.dim];
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            self.fill_dither(rng, &mut u);
            let v = u.iter().map(|c| c * c).sum::<f64>() / scale;
            sum += v;
            sum_sq += v * v;
        }
        let n = samples as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
        SecondMoment {
            value: mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// Absolute per-sub-vector distortion variance `E‖u‖²` of the cell,
    /// `L·σ·vol^{2/L}`; equals `L·Δ²/12` for the cubic family.
    pub fn cell_variance(&self) -> f64 {
        self.dim as f64 * self.second_moment.value * self.spacing * self.spacing
    }

    /// Scale generator, support, spacing and points by `zeta`; indices are
    /// unchanged.
    pub fn scale(&self, zeta: f64) -> Result<Self> {
        if !(zeta.is_finite() && zeta > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "scale must be positive, got {zeta}"
            )));
        }
        Ok(LatticeSpec {
            dim: self.dim,
            rate: self.rate,
            spacing: self.spacing * zeta,
            support: self.support * zeta,
            levels: self.levels.iter().map(|v| v * zeta).collect(),
            points: self.points.iter().map(|v| v * zeta).collect(),
            second_moment: self.second_moment,
        })
    }
}

/// Free-function form of [`LatticeSpec::scale`].
pub fn scale_lattice(lat: &LatticeSpec, zeta: f64) -> Result<LatticeSpec> {
    lat.scale(zeta)
}

/// Coarse/nested decomposition of a fine lattice: every fine point is the
/// sum of exactly one coarse point and one nested point.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedPair {
    fine: LatticeSpec,
    coarse: LatticeSpec,
    nested: LatticeSpec,
}

/// Indices produced by [`NestedPair::nested_quantize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NestedQuantized {
    pub coarse: usize,
    pub nested: usize,
    pub overloaded: bool,
}

/// Split `fine` into a coarse lattice of rate `coarse_rate` on the same
/// support and a nested codebook of rate `nested_rate` filling the coarse
/// basic cell with the fine spacing.
pub fn split_nested(fine: &LatticeSpec, coarse_rate: u32, nested_rate: u32) -> Result<NestedPair> {
    let incompatible = Error::IncompatibleRates {
        coarse: coarse_rate,
        nested: nested_rate,
        fine: fine.rate,
    };
    if coarse_rate == 0 || nested_rate == 0 || coarse_rate + nested_rate != fine.rate {
        return Err(incompatible);
    }
    let coarse = LatticeSpec::cubic(fine.dim, fine.support, coarse_rate)?;
    let nested = LatticeSpec::cubic(fine.dim, coarse.spacing / 2.0, nested_rate)?;
    let ratio = coarse.spacing / fine.spacing;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio {
        return Err(incompatible);
    }
    let mut nested = nested;
    // Share the fine lattice's moment so Monte Carlo estimates agree.
    nested.second_moment = fine.second_moment;
    let mut coarse = coarse;
    coarse.second_moment = fine.second_moment;
    Ok(NestedPair {
        fine: fine.clone(),
        coarse,
        nested,
    })
}

impl NestedPair {
    pub fn fine(&self) -> &LatticeSpec {
        &self.fine
    }

    pub fn coarse(&self) -> &LatticeSpec {
        &self.coarse
    }

    pub fn nested(&self) -> &LatticeSpec {
        &self.nested
    }

    /// Fine index whose point equals `coarse[lc] + nested[ln]`.
    pub fn compose(&self, coarse_index: usize, nested_index: usize) -> usize {
        let dim = self.fine.dim;
        let c_axis = 1usize << self.coarse.rate;
        let n_axis = 1usize << self.nested.rate;
        let f_axis = 1usize << self.fine.rate;
        let mut c = coarse_index;
        let mut n = nested_index;
        let mut digits = vec![0usize; dim];
        for d in digits.iter_mut().rev() {
            *d = (c % c_axis) * n_axis + n % n_axis;
            c /= c_axis;
            n /= n_axis;
        }
        digits.iter().fold(0, |acc, d| acc * f_axis + d)
    }

    /// Inverse of [`NestedPair::compose`].
    pub fn decompose(&self, fine_index: usize) -> (usize, usize) {
        let c_axis = 1usize << self.coarse.rate;
        let n_axis = 1usize << self.nested.rate;
        let f_axis = 1usize << self.fine.rate;
        let mut rem = fine_index;
        let mut digits = vec![0usize; self.fine.dim];
        for d in digits.iter_mut().rev() {
            *d = rem % f_axis;
            rem /= f_axis;
        }
        let mut lc = 0;
        let mut ln = 0;
        for d in digits {
            lc = lc * c_axis + d / n_axis;
            ln = ln * n_axis + d % n_axis;
        }
        (lc, ln)
    }

    /// Two-stage quantization with a caller-supplied fine-cell dither:
    /// coarse index of `x + u`, then nested index of the residual.
    pub fn quantize_with_dither(&self, x: &[f64], dither: &[f64]) -> NestedQuantized {
        let shifted: Vec<f64> = x.iter().zip(dither).map(|(a, b)| a + b).collect();
        let c = self.coarse.quantize_nearest(&shifted);
        let residual: Vec<f64> = shifted
            .iter()
            .zip(self.coarse.point(c.index))
            .map(|(a, b)| a - b)
            .collect();
        let n = self.nested.quantize_nearest(&residual);
        NestedQuantized {
            coarse: c.index,
            nested: n.index,
            overloaded: c.overloaded,
        }
    }

    /// Dithered two-stage quantization; one dither draw on the fine cell is
    /// shared by both stages.
    pub fn nested_quantize<R: RngCore + ?Sized>(&self, x: &[f64], rng: &mut R) -> NestedQuantized {
        let u = self.fine.dither_sample(rng);
        self.quantize_with_dither(x, &u)
    }
}

/// Time-varying lattice `G_t = ζ_t·G` with `ζ_t = ζ_0·η_t/η_0`, which meets
/// `ζ_t² ≤ C·η_t²` with `C = (ζ_0/η_0)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSchedule {
    base: LatticeSpec,
    zeta0: f64,
    eta0: f64,
}

impl LatticeSchedule {
    pub fn new(base: LatticeSpec, zeta0: f64, eta0: f64) -> Result<Self> {
        if !(zeta0.is_finite() && zeta0 > 0.0 && eta0.is_finite() && eta0 > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "schedule needs positive ζ0 and η0, got {zeta0} and {eta0}"
            )));
        }
        Ok(LatticeSchedule { base, zeta0, eta0 })
    }

    pub fn base(&self) -> &LatticeSpec {
        &self.base
    }

    pub fn bound_constant(&self) -> f64 {
        (self.zeta0 / self.eta0).powi(2)
    }

    pub fn zeta(&self, eta_t: f64) -> f64 {
        self.zeta0 * eta_t / self.eta0
    }

    pub fn at(&self, eta_t: f64) -> Result<LatticeSpec> {
        self.base.scale(self.zeta(eta_t))
    }

    /// `ζ_t² ≤ C·η_t²` for every supplied step size.
    pub fn satisfies_bound(&self, etas: &[f64]) -> bool {
        let c = self.bound_constant();
        etas.iter()
            .all(|&eta| self.zeta(eta).powi(2) <= c * eta * eta * (1.0 + 1e-12))
    }
}
