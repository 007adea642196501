//! Fragmentation data: total breakage rates `K`, scaling-invariant
//! offspring distributions and the derived quantities that steer the
//! spectral analysis (fractional moments, offspring count, critical
//! exponent, support infimum).

use crate::{Error, Result};
use std::fmt;
use std::sync::Arc;

/// Number of tabulation points for density-type offspring distributions.
/// Decouples offspring resolution from the size grid.
const Z_TABLE_LEN: usize = 4096;

/// Upper bound for the critical-exponent search; beyond this the weight
/// `<x>^alpha` is numerically useless anyway.
const ALPHA_MAX: f64 = 200.0;

const MASS_COMPAT_TOL: f64 = 1e-10;

/// One atom of an atomic offspring distribution: mass `mass` at relative
/// daughter size `z` in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub z: f64,
    pub mass: f64,
}

/// Offspring distribution: the scaling-invariant law of relative daughter
/// sizes. Equal mitosis is the atomic `2 delta_{1/2}`; the smooth models
/// tabulate a density on a fixed z-grid.
///
/// Every constructor enforces the mass compatibility `int z p(dz) = 1`
/// (tables are rescaled so it holds exactly in the table's own
/// quadrature; atoms must satisfy it as given).
#[derive(Debug, Clone, PartialEq)]
pub enum OffspringDist {
    Atoms(Vec<Atom>),
    Density(DensityTable),
}

/// Density tabulated on the fixed uniform z-grid over `[0, 1]` with
/// trapezoid quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    values: Vec<f64>,
}

impl DensityTable {
    fn z(k: usize) -> f64 {
        k as f64 / (Z_TABLE_LEN - 1) as f64
    }

    fn quad_weight(k: usize) -> f64 {
        let h = 1.0 / (Z_TABLE_LEN - 1) as f64;
        if k == 0 || k == Z_TABLE_LEN - 1 {
            0.5 * h
        } else {
            h
        }
    }

    fn from_fn(f: impl Fn(f64) -> f64) -> Result<DensityTable> {
        let mut values: Vec<f64> = (0..Z_TABLE_LEN).map(|k| f(Self::z(k))).collect();
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Kernel("offspring density must be finite and nonnegative".into()));
        }
        let mass: f64 =
            (0..Z_TABLE_LEN).map(|k| Self::quad_weight(k) * Self::z(k) * values[k]).sum();
        if mass <= 0.0 {
            return Err(Error::Kernel("offspring density carries no mass".into()));
        }
        // Rescale so the discrete compatibility relation holds exactly.
        for v in &mut values {
            *v /= mass;
        }
        Ok(DensityTable { values })
    }

    /// Interpolated density value at `z` in `[0, 1]`.
    pub fn eval(&self, z: f64) -> f64 {
        if !(0.0..=1.0).contains(&z) {
            return 0.0;
        }
        let s = z * (Z_TABLE_LEN - 1) as f64;
        let k = (s.floor() as usize).min(Z_TABLE_LEN - 2);
        let t = s - k as f64;
        (1.0 - t) * self.values[k] + t * self.values[k + 1]
    }

    fn moment(&self, alpha: f64) -> f64 {
        (0..Z_TABLE_LEN)
            .map(|k| {
                let z = Self::z(k);
                let zp = if alpha == 0.0 { 1.0 } else { z.powf(alpha) };
                Self::quad_weight(k) * zp * self.values[k]
            })
            .sum()
    }
}

impl OffspringDist {
    /// Equal mitosis: two daughters of half the mother size.
    pub fn mitosis() -> OffspringDist {
        OffspringDist::Atoms(vec![Atom { z: 0.5, mass: 2.0 }])
    }

    /// Unequal binary split into fractions `sigma` and `1 - sigma`.
    pub fn binary(sigma: f64) -> Result<OffspringDist> {
        OffspringDist::atoms(vec![
            Atom { z: sigma, mass: 1.0 },
            Atom { z: 1.0 - sigma, mass: 1.0 },
        ])
    }

    /// Atomic distribution; rejects atoms outside `(0, 1]`, negative
    /// masses, or a total first moment away from 1.
    pub fn atoms(atoms: Vec<Atom>) -> Result<OffspringDist> {
        if atoms.is_empty() {
            return Err(Error::Kernel("offspring distribution needs at least one atom".into()));
        }
        for a in &atoms {
            if !(a.z > 0.0 && a.z <= 1.0) || a.mass < 0.0 || !a.mass.is_finite() {
                return Err(Error::Kernel(format!(
                    "offspring atom (z={}, mass={}) outside (0,1] x [0,inf)",
                    a.z, a.mass
                )));
            }
        }
        let m1: f64 = atoms.iter().map(|a| a.z * a.mass).sum();
        if (m1 - 1.0).abs() > MASS_COMPAT_TOL {
            return Err(Error::Kernel(format!(
                "offspring atoms violate mass compatibility: int z p(dz) = {m1}"
            )));
        }
        Ok(OffspringDist::Atoms(atoms))
    }

    /// Uniform density `p(z) = 2` on `(0, 1)`.
    pub fn uniform() -> OffspringDist {
        OffspringDist::Density(DensityTable::from_fn(|_| 2.0).expect("uniform density is valid"))
    }

    /// Power-law density `c_theta z^theta`, normalized by construction.
    pub fn power_law(theta: f64) -> Result<OffspringDist> {
        if theta <= -1.0 {
            return Err(Error::Kernel(format!("power-law exponent must exceed -1, got {theta}")));
        }
        Ok(OffspringDist::Density(DensityTable::from_fn(|z| {
            if theta == 0.0 {
                1.0
            } else {
                z.powf(theta)
            }
        })?))
    }

    /// Tabulate an arbitrary nonnegative density; it is rescaled to
    /// satisfy the mass compatibility exactly.
    pub fn density_from_fn(f: impl Fn(f64) -> f64) -> Result<OffspringDist> {
        Ok(OffspringDist::Density(DensityTable::from_fn(f)?))
    }

    /// Fractional moment `p_alpha = int z^alpha p(dz)`.
    pub fn moment(&self, alpha: f64) -> f64 {
        match self {
            OffspringDist::Atoms(atoms) => {
                atoms.iter().map(|a| a.mass * a.z.powf(alpha)).sum()
            }
            OffspringDist::Density(t) => t.moment(alpha),
        }
    }

    /// Offspring count `n_F = p_0` (2 for any binary split).
    pub fn count(&self) -> f64 {
        self.moment(0.0)
    }

    /// Total variation `int |p'(z)| dz` of a tabulated density, by finite
    /// differences. Undefined (error) for atomic distributions.
    pub fn density_variation(&self) -> Result<f64> {
        match self {
            OffspringDist::Atoms(_) => Err(Error::Kernel(
                "density variation is undefined for atomic offspring distributions".into(),
            )),
            OffspringDist::Density(t) => {
                Ok(t.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
            }
        }
    }

    /// Infimum of the support, in `[0, 1)` for any mass-compatible
    /// distribution other than the degenerate unit atom.
    pub fn support_infimum(&self) -> f64 {
        match self {
            OffspringDist::Atoms(atoms) => atoms
                .iter()
                .filter(|a| a.mass > 0.0)
                .map(|a| a.z)
                .fold(f64::INFINITY, f64::min),
            OffspringDist::Density(t) => {
                for k in 0..Z_TABLE_LEN {
                    if t.values[k] > 0.0 {
                        return DensityTable::z(k);
                    }
                }
                1.0
            }
        }
    }

    fn is_unit_atom(&self) -> bool {
        match self {
            OffspringDist::Atoms(atoms) => {
                atoms.iter().all(|a| a.mass == 0.0 || a.z == 1.0)
            }
            OffspringDist::Density(_) => false,
        }
    }
}

/// Critical exponent: the unique `alpha* >= 1` with
/// `p_{alpha*} = k0/k1`, found by bisection on the strictly decreasing
/// moment function.
pub fn critical_exponent(p: &OffspringDist, k0: f64, k1: f64) -> Result<f64> {
    if !(k0 > 0.0 && k0 <= k1) {
        return Err(Error::Kernel(format!("need 0 < k0 <= k1, got k0={k0}, k1={k1}")));
    }
    if p.is_unit_atom() {
        return Err(Error::Kernel(
            "critical exponent undefined: moments of the unit atom do not decrease".into(),
        ));
    }
    let target = k0 / k1;
    let g = |a: f64| p.moment(a) - target;
    let (mut lo, mut hi) = (0.0, ALPHA_MAX);
    if g(lo) < 0.0 {
        return Err(Error::Kernel("offspring count below k0/k1; no critical exponent".into()));
    }
    if g(hi) > 0.0 {
        return Err(Error::Kernel(format!(
            "no sign change of p_alpha - k0/k1 up to alpha = {ALPHA_MAX}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let residual = g(alpha).abs();
    if residual > MASS_COMPAT_TOL {
        return Err(Error::Kernel(format!(
            "critical exponent residual {residual:.3e} above tolerance"
        )));
    }
    Ok(alpha)
}

/// Sandwich bounds `K0 x^gamma 1_{x>=x1} <= K(x) <= K1 max(1, x^gamma)`
/// together with the positivity threshold `x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthEnvelope {
    pub gamma: f64,
    pub k0: f64,
    pub k1: f64,
    pub x0: f64,
    pub x1: f64,
}

/// Total fragmentation rate `K(x)`.
#[derive(Clone)]
pub enum TotalRate {
    /// `K(x) = k0` everywhere.
    Constant(f64),
    /// `K(x) = x^gamma`.
    Power { gamma: f64 },
    /// Vanishes below `x0`, ramps up to `k1 max(1, x^gamma)` at `x1`,
    /// and stays inside the sandwich bounds.
    BoundedPower { gamma: f64, k0: f64, k1: f64, x0: f64, x1: f64 },
    /// `K(x) = coeff * exp(-rate x)`; the integrable birth-rate shape
    /// used by the age-structured model.
    ExpDecay { coeff: f64, rate: f64 },
    /// Arbitrary rate function.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for TotalRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TotalRate::Constant(k) => write!(f, "Constant({k})"),
            TotalRate::Power { gamma } => write!(f, "Power({gamma})"),
            TotalRate::BoundedPower { gamma, k0, k1, x0, x1 } => {
                write!(f, "BoundedPower(gamma={gamma}, k0={k0}, k1={k1}, x0={x0}, x1={x1})")
            }
            TotalRate::ExpDecay { coeff, rate } => write!(f, "ExpDecay({coeff} e^(-{rate} x))"),
            TotalRate::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl TotalRate {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TotalRate::Constant(k) => *k,
            TotalRate::Power { gamma } => x.powf(*gamma),
            TotalRate::BoundedPower { gamma, k0: _, k1, x0, x1 } => {
                if x <= *x0 {
                    return 0.0;
                }
                let ramp = if x >= *x1 {
                    1.0
                } else {
                    (x - x0) / (x1 - x0)
                };
                ramp * k1 * x.powf(*gamma).max(1.0)
            }
            TotalRate::ExpDecay { coeff, rate } => coeff * (-rate * x).exp(),
            TotalRate::Custom(f) => f(x),
        }
    }

    /// Growth envelope when the rate has power-law structure; `None` for
    /// integrable or opaque rates.
    pub fn growth_envelope(&self) -> Option<GrowthEnvelope> {
        match self {
            TotalRate::Constant(k) => {
                Some(GrowthEnvelope { gamma: 0.0, k0: *k, k1: *k, x0: 0.0, x1: 0.0 })
            }
            TotalRate::Power { gamma } => {
                Some(GrowthEnvelope { gamma: *gamma, k0: 1.0, k1: 1.0, x0: 0.0, x1: 1.0 })
            }
            TotalRate::BoundedPower { gamma, k0, k1, x0, x1 } => Some(GrowthEnvelope {
                gamma: *gamma,
                k0: *k0,
                k1: *k1,
                x0: *x0,
                x1: *x1,
            }),
            _ => None,
        }
    }

    /// Check the sandwich bounds by sampling `samples` points on
    /// `(0, x_max]`.
    pub fn check_growth_bounds(&self, env: &GrowthEnvelope, x_max: f64, samples: usize) -> bool {
        for i in 1..=samples {
            let x = x_max * i as f64 / samples as f64;
            let k = self.eval(x);
            let upper = env.k1 * x.powf(env.gamma).max(1.0);
            if k > upper * (1.0 + 1e-12) {
                return false;
            }
            if x >= env.x1 && k < env.k0 * x.powf(env.gamma) * (1.0 - 1e-12) {
                return false;
            }
            if x <= env.x0 && k != 0.0 {
                return false;
            }
        }
        true
    }

    /// `int_0^xmax K`, analytic for the exponential shape, composite
    /// Simpson otherwise.
    pub fn integral(&self, x_max: f64) -> f64 {
        match self {
            TotalRate::Constant(k) => k * x_max,
            TotalRate::ExpDecay { coeff, rate } => coeff / rate * (1.0 - (-rate * x_max).exp()),
            _ => simpson(|x| self.eval(x), 0.0, x_max, 4096),
        }
    }

    /// `int_0^xmax K(x) e^{-s x} dx`; analytic for constant and
    /// exponential rates.
    pub fn laplace_integral(&self, s: f64, x_max: f64) -> f64 {
        match self {
            TotalRate::ExpDecay { coeff, rate } => {
                let r = rate + s;
                coeff / r * (1.0 - (-r * x_max).exp())
            }
            TotalRate::Constant(k) => {
                if s == 0.0 {
                    k * x_max
                } else {
                    k / s * (1.0 - (-s * x_max).exp())
                }
            }
            _ => simpson(|x| self.eval(x) * (-s * x).exp(), 0.0, x_max, 4096),
        }
    }
}

/// Composite Simpson rule with `n` (even) subintervals.
pub(crate) fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let c = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += c * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Which of the four model classes an operator realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mitosis,
    SmoothCellDivision,
    SelfSimilar,
    AgeStructured,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Mitosis => "mitosis",
            ModelKind::SmoothCellDivision => "smooth_cell_division",
            ModelKind::SelfSimilar => "self_similar",
            ModelKind::AgeStructured => "age_structured",
        };
        f.write_str(s)
    }
}

/// A complete model specification: total rate, offspring law, drift and
/// damping, tied together by the model kind.
#[derive(Debug, Clone)]
pub struct FragmentationModel {
    kind: ModelKind,
    rate: TotalRate,
    offspring: OffspringDist,
}

impl FragmentationModel {
    /// Equal mitosis: growth at unit speed, no damping, offspring
    /// `2 delta_{1/2}`. The rate must carry power-law growth bounds.
    pub fn mitosis(rate: TotalRate) -> Result<FragmentationModel> {
        let env = rate.growth_envelope().ok_or_else(|| {
            Error::Kernel("mitosis requires a rate with power-law growth bounds".into())
        })?;
        if !rate.check_growth_bounds(&env, 100.0, 1000) {
            return Err(Error::Kernel("rate violates its declared growth bounds".into()));
        }
        Ok(FragmentationModel { kind: ModelKind::Mitosis, rate, offspring: OffspringDist::mitosis() })
    }

    /// Cell division with a smooth (density) offspring distribution.
    pub fn smooth_cell_division(
        rate: TotalRate,
        offspring: OffspringDist,
    ) -> Result<FragmentationModel> {
        if matches!(offspring, OffspringDist::Atoms(_)) {
            return Err(Error::Kernel(
                "smooth cell division requires a density offspring distribution".into(),
            ));
        }
        let env = rate.growth_envelope().ok_or_else(|| {
            Error::Kernel("cell division requires a rate with power-law growth bounds".into())
        })?;
        if !rate.check_growth_bounds(&env, 100.0, 1000) {
            return Err(Error::Kernel("rate violates its declared growth bounds".into()));
        }
        Ok(FragmentationModel { kind: ModelKind::SmoothCellDivision, rate, offspring })
    }

    /// Self-similar fragmentation: `K(x) = x^gamma` with `gamma > 0`,
    /// drift `tau(x) = x`, and a smooth offspring distribution.
    pub fn self_similar(gamma: f64, offspring: OffspringDist) -> Result<FragmentationModel> {
        if !(gamma > 0.0) {
            return Err(Error::Kernel(format!("self-similar model needs gamma > 0, got {gamma}")));
        }
        if matches!(offspring, OffspringDist::Atoms(_)) {
            return Err(Error::Kernel(
                "self-similar model requires a density offspring distribution".into(),
            ));
        }
        Ok(FragmentationModel { kind: ModelKind::SelfSimilar, rate: TotalRate::Power { gamma }, offspring })
    }

    /// Age-structured renewal model: aging at unit speed, unit death
    /// rate, birth rate `K` with `||K||_{L^1} > 1`.
    pub fn age_structured(rate: TotalRate) -> Result<FragmentationModel> {
        let norm = rate.integral(1e3);
        if !(norm > 1.0) {
            return Err(Error::Kernel(format!(
                "age-structured model needs ||K||_L1 > 1, got {norm:.6}"
            )));
        }
        // The renewal kernel is the sigma -> 0 limit of a binary split:
        // the surviving parent sits at z = 1.
        Ok(FragmentationModel {
            kind: ModelKind::AgeStructured,
            rate,
            offspring: OffspringDist::Atoms(vec![Atom { z: 1.0, mass: 1.0 }]),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn rate(&self) -> &TotalRate {
        &self.rate
    }

    pub fn offspring(&self) -> &OffspringDist {
        &self.offspring
    }

    /// Drift speed: `x` for the self-similar model, 1 otherwise.
    pub fn tau(&self, x: f64) -> f64 {
        match self.kind {
            ModelKind::SelfSimilar => x,
            _ => 1.0,
        }
    }

    /// Damping rate: 1 for the age-structured model, 0 otherwise (the
    /// self-similar dilation term is handled inside the assembly).
    pub fn nu(&self) -> f64 {
        match self.kind {
            ModelKind::AgeStructured => 1.0,
            _ => 0.0,
        }
    }

    /// Sensible truncation length for this model class.
    pub fn default_domain_length(&self) -> f64 {
        match self.kind {
            ModelKind::SelfSimilar => 10.0,
            _ => 20.0,
        }
    }

    /// Critical abscissa `a*` below which the dissipative part of the
    /// splitting stops being controllable; `alpha` is the norm exponent.
    pub fn critical_abscissa(&self, alpha: f64) -> Result<f64> {
        match self.kind {
            ModelKind::AgeStructured => Ok(-1.0),
            ModelKind::SelfSimilar => Ok(alpha - 1.0),
            ModelKind::Mitosis | ModelKind::SmoothCellDivision => {
                let env = self.rate.growth_envelope().ok_or_else(|| {
                    Error::Kernel("critical abscissa needs power-law growth bounds".into())
                })?;
                let k0p = env.k0 - self.offspring.moment(alpha) * env.k1;
                if k0p <= 0.0 {
                    return Err(Error::Kernel(format!(
                        "norm exponent alpha={alpha} too small: k0 - p_alpha k1 = {k0p:.3e} <= 0"
                    )));
                }
                let smooth = matches!(self.kind, ModelKind::SmoothCellDivision);
                let k_at_zero = self.rate.eval(0.0);
                if !smooth || k_at_zero == 0.0 {
                    if env.gamma == 0.0 {
                        Ok(-k0p)
                    } else {
                        Ok(f64::NEG_INFINITY)
                    }
                } else {
                    // K(0) > 0 with smooth offspring: the uniform lower
                    // bound K_* enters.
                    let k_star = (0..10_000)
                        .map(|i| self.rate.eval(i as f64 * 0.01))
                        .fold(f64::INFINITY, f64::min);
                    if env.gamma == 0.0 {
                        Ok(-k0p.min(k_star))
                    } else {
                        Ok(-k_star)
                    }
                }
            }
        }
    }
}
