//! Semigroup time stepping, trajectory recording, decay-rate fits and the
//! relative-entropy functional with its dissipation.
//!
//! The default scheme is implicit Euler with a dense factorization reused
//! across steps: unconditionally stable, and positivity preserving because
//! the generators are Metzler matrices. Explicit Euler is kept for
//! cross-validation at small steps; its admissible step is the sharp
//! monotonicity bound `dt * max_j |Lambda_jj| <= 1` (at equality the pure
//! transport update is the exact one-node shift).

use crate::grid::{pairing, weighted_norm, Grid};
use crate::kernels::{FragmentationModel, ModelKind, OffspringDist};
use crate::operators::DiscreteOperator;
use crate::spectral::Eigentriple;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ExplicitEuler,
    ImplicitEuler,
}

/// Largest admissible explicit step for this operator.
pub fn explicit_dt_bound(op: &DiscreteOperator) -> f64 {
    let d = op.matrix().max_abs_diag();
    if d > 0.0 {
        1.0 / d
    } else {
        f64::INFINITY
    }
}

/// Reusable stepper; the implicit variant factorizes `I - dt Lambda` once.
pub struct Stepper<'a> {
    op: &'a DiscreteOperator,
    dt: f64,
    scheme: Scheme,
    lu: Option<nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl<'a> Stepper<'a> {
    pub fn new(op: &'a DiscreteOperator, dt: f64, scheme: Scheme) -> Result<Stepper<'a>> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Operator(format!("time step must be positive, got {dt}")));
        }
        let lu = match scheme {
            Scheme::ExplicitEuler => {
                let max = explicit_dt_bound(op);
                if dt > max * (1.0 + 1e-12) {
                    return Err(Error::CflViolation { dt, max });
                }
                None
            }
            Scheme::ImplicitEuler => {
                let n = op.n();
                let mut m = op.to_dense();
                m.neg_mut();
                m *= dt;
                for i in 0..n {
                    m[(i, i)] += 1.0;
                }
                let lu = nalgebra::linalg::LU::new(m);
                // a vanishing pivot means I - dt*Lambda is singular
                if (0..n).any(|i| lu.u()[(i, i)] == 0.0) {
                    return Err(Error::LinearSolve("I - dt*Lambda is singular".into()));
                }
                Some(lu)
            }
        };
        Ok(Stepper { op, dt, scheme, lu })
    }

    pub fn advance(&self, f: &[f64]) -> Result<Vec<f64>> {
        match self.scheme {
            Scheme::ExplicitEuler => {
                let lf = self.op.apply(f)?;
                Ok(f.iter().zip(&lf) .map(|(&v, &d)| v + self.dt * d).collect())
            }
            Scheme::ImplicitEuler => {
                let rhs = DVector::from_column_slice(f);
                let sol = self
                    .lu
                    .as_ref()
                    .unwrap()
                    .solve(&rhs)
                    .ok_or_else(|| Error::LinearSolve("implicit Euler solve failed".into()))?;
                Ok(sol.data.into())
            }
        }
    }
}

/// One time step (convenience wrapper; `evolve` reuses the factorization).
pub fn step(op: &DiscreteOperator, f: &[f64], dt: f64, scheme: Scheme) -> Result<Vec<f64>> {
    if f.len() != op.n() {
        return Err(Error::LengthMismatch { expected: op.n(), got: f.len() });
    }
    Stepper::new(op, dt, scheme)?.advance(f)
}

/// A named scalar functional recorded along a trajectory.
pub struct Recorder<'a> {
    pub name: String,
    pub eval: Box<dyn Fn(&[f64], f64) -> f64 + 'a>,
}

impl<'a> Recorder<'a> {
    pub fn new(name: impl Into<String>, eval: impl Fn(&[f64], f64) -> f64 + 'a) -> Recorder<'a> {
        Recorder { name: name.into(), eval: Box::new(eval) }
    }
}

/// Time-indexed states plus recorded scalar series.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub recorded: Vec<(String, Vec<f64>)>,
}

impl Trajectory {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.recorded.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// CSV with a `t` column followed by one column per recorded series.
    pub fn to_csv(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "t")?;
        for (name, _) in &self.recorded {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for (k, &t) in self.times.iter().enumerate() {
            write!(out, "{}", crate::report::fmt_g17(t))?;
            for (_, series) in &self.recorded {
                write!(out, ",{}", crate::report::fmt_g17(series[k]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// One row per time: `t, f_0, ..., f_{N-1}`.
    pub fn states_to_csv(&self, out: &mut impl Write) -> Result<()> {
        for (k, &t) in self.times.iter().enumerate() {
            write!(out, "{}", crate::report::fmt_g17(t))?;
            for v in &self.states[k] {
                write!(out, ",{}", crate::report::fmt_g17(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// March `f0` to time `t_final`, recording the requested functionals at
/// every step (including the initial state).
pub fn evolve(
    op: &DiscreteOperator,
    f0: &[f64],
    t_final: f64,
    dt: f64,
    scheme: Scheme,
    recorders: &[Recorder<'_>],
) -> Result<Trajectory> {
    if f0.len() != op.n() {
        return Err(Error::LengthMismatch { expected: op.n(), got: f0.len() });
    }
    if t_final < 0.0 {
        return Err(Error::Operator(format!("horizon must be nonnegative, got {t_final}")));
    }
    let n_steps = if t_final == 0.0 { 0 } else { (t_final / dt).round().max(1.0) as usize };
    let stepper = if n_steps > 0 { Some(Stepper::new(op, dt, scheme)?) } else { None };
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut recorded: Vec<(String, Vec<f64>)> =
        recorders.iter().map(|r| (r.name.clone(), Vec::with_capacity(n_steps + 1))).collect();
    let mut f = f0.to_vec();
    for k in 0..=n_steps {
        let t = k as f64 * dt;
        for (r, (_, series)) in recorders.iter().zip(recorded.iter_mut()) {
            series.push((r.eval)(&f, t));
        }
        times.push(t);
        states.push(f.clone());
        if k < n_steps {
            f = stepper.as_ref().unwrap().advance(&f)?;
        }
    }
    Ok(Trajectory { times, states, recorded })
}

/// Least-squares slope of `log(series)` over the time window.
pub fn decay_rate_fit(traj: &Trajectory, series: &str, window: (f64, f64)) -> Result<f64> {
    let values = traj
        .series(series)
        .ok_or_else(|| Error::Fit(format!("no recorded series named '{series}'")))?;
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (k, &t) in traj.times.iter().enumerate() {
        if t >= window.0 && t <= window.1 {
            if values[k] <= 0.0 {
                return Err(Error::Fit(format!(
                    "series '{series}' is not strictly positive in the window (value {} at t={t})",
                    values[k]
                )));
            }
            ts.push(t);
            ys.push(values[k].ln());
        }
    }
    if ts.len() < 4 {
        return Err(Error::Fit(format!(
            "only {} samples inside the window [{}, {}]",
            ts.len(),
            window.0,
            window.1
        )));
    }
    let n = ts.len() as f64;
    let tbar = ts.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&t, &y) in ts.iter().zip(&ys) {
        num += (t - tbar) * (y - ybar);
        den += (t - tbar) * (t - tbar);
    }
    if den == 0.0 {
        return Err(Error::Fit("degenerate fit window".into()));
    }
    Ok(num / den)
}

/// Convex weight for the relative entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexJ {
    /// `j(s) = (s - 1)^2`
    Quadratic,
    /// `j(s) = |s - 1|`
    Abs,
}

impl ConvexJ {
    fn eval(self, s: f64) -> f64 {
        match self {
            ConvexJ::Quadratic => (s - 1.0) * (s - 1.0),
            ConvexJ::Abs => (s - 1.0).abs(),
        }
    }
}

// Nodes where the profile is below this fraction of its peak are excluded
// from quotients u = f/f_inf; the entropy integrand vanishes there anyway.
const GRE_FLOOR: f64 = 1e-12;

fn gre_mask(f_inf: &[f64]) -> Vec<bool> {
    let peak = f_inf.iter().cloned().fold(0.0f64, f64::max);
    f_inf.iter().map(|&v| v > GRE_FLOOR * peak).collect()
}

/// Relative entropy `J(f) = sum w j(f/f_inf) f_inf phi`.
pub fn gre_functional(
    f: &[f64],
    trip: &Eigentriple,
    grid: &Grid,
    j: ConvexJ,
) -> Result<f64> {
    if f.len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: f.len() });
    }
    let mask = gre_mask(&trip.f_inf);
    let mut out = 0.0;
    for i in 0..grid.len() {
        if mask[i] {
            let u = f[i] / trip.f_inf[i];
            out += grid.weight(i) * trip.f_inf[i] * trip.phi[i] * j.eval(u);
        }
    }
    Ok(out)
}

/// Entropy dissipation: the kernel-weighted Bregman gap between mother and
/// daughter quotients,
/// `D_J(f) = sum_{x <= y} w_x w_y k(y, x) [j(u_y) - j(u_x) - j'(u_x)(u_y - u_x)] f_inf(y) phi(x)`.
///
/// Requires the smooth (quadratic) entropy weight.
pub fn gre_dissipation(
    f: &[f64],
    trip: &Eigentriple,
    model: &FragmentationModel,
    grid: &Grid,
    j: ConvexJ,
) -> Result<f64> {
    if f.len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: f.len() });
    }
    if j != ConvexJ::Quadratic {
        return Err(Error::Operator("entropy dissipation needs the smooth quadratic weight".into()));
    }
    let mask = gre_mask(&trip.f_inf);
    let n = grid.len();
    let x = grid.nodes();
    let w = grid.weights();
    let u: Vec<f64> = (0..n)
        .map(|i| if mask[i] { f[i] / trip.f_inf[i] } else { 0.0 })
        .collect();
    let mut total = 0.0;
    match model.offspring() {
        OffspringDist::Density(density) => {
            // mother y = x_m, daughters below it
            for m in 1..n {
                if !mask[m] {
                    continue;
                }
                let k_rate = model.rate().eval(x[m]);
                if k_rate == 0.0 {
                    continue;
                }
                let cm = w[m] * k_rate * trip.f_inf[m] / x[m];
                if cm == 0.0 {
                    continue;
                }
                let um = u[m];
                let mut inner = 0.0;
                for i in 0..=m {
                    if !mask[i] {
                        continue;
                    }
                    let d = u[i] - um;
                    inner += w[i] * density.eval(x[i] / x[m]) * trip.phi[i] * d * d;
                }
                total += cm * inner;
            }
        }
        OffspringDist::Atoms(atoms) => {
            for m in 1..n {
                if !mask[m] {
                    continue;
                }
                let k_rate = model.rate().eval(x[m]);
                if k_rate == 0.0 {
                    continue;
                }
                for atom in atoms {
                    let xd = atom.z * x[m];
                    // linear interpolation of the daughter-side fields
                    let s = xd / grid.dx();
                    let i0 = (s.floor() as usize).min(n - 2);
                    let t = s - i0 as f64;
                    if !mask[i0] || !mask[i0 + 1] {
                        continue;
                    }
                    let ud = (1.0 - t) * u[i0] + t * u[i0 + 1];
                    let phid = (1.0 - t) * trip.phi[i0] + t * trip.phi[i0 + 1];
                    let d = ud - u[m];
                    total += w[m] * k_rate * atom.mass * trip.f_inf[m] * phid * d * d;
                }
            }
        }
    }
    Ok(total)
}

/// Outcome of checking the entropy balance along a trajectory.
#[derive(Debug, Clone)]
pub struct GreIdentityReport {
    /// `max_t |J(f(t)) + int_0^t D_J - J(f(0))|`
    pub residual: f64,
    /// largest single-step increase of the entropy series
    pub max_step_increase: f64,
    pub j_initial: f64,
    pub j_series: Vec<f64>,
    pub d_series: Vec<f64>,
}

/// Evaluate the entropy balance `J(f(t)) + int_0^t D_J(f(s)) ds = J(f(0))`
/// along a stored trajectory of the growth-rescaled flow.
pub fn check_gre_identity(
    traj: &Trajectory,
    trip: &Eigentriple,
    model: &FragmentationModel,
    grid: &Grid,
    j: ConvexJ,
) -> Result<GreIdentityReport> {
    if traj.states.is_empty() {
        return Err(Error::Fit("empty trajectory".into()));
    }
    let mut j_series = Vec::with_capacity(traj.states.len());
    let mut d_series = Vec::with_capacity(traj.states.len());
    for state in &traj.states {
        j_series.push(gre_functional(state, trip, grid, j)?);
        d_series.push(gre_dissipation(state, trip, model, grid, j)?);
    }
    let j0 = j_series[0];
    let mut residual: f64 = 0.0;
    let mut acc = 0.0;
    let mut max_step_increase: f64 = 0.0;
    for k in 0..j_series.len() {
        if k > 0 {
            let h = traj.times[k] - traj.times[k - 1];
            acc += 0.5 * h * (d_series[k] + d_series[k - 1]);
            max_step_increase = max_step_increase.max(j_series[k] - j_series[k - 1]);
        }
        residual = residual.max((j_series[k] + acc - j0).abs());
    }
    Ok(GreIdentityReport { residual, max_step_increase, j_initial: j0, j_series, d_series })
}

/// Random smooth positive profile: a handful of bumps on a decaying
/// envelope. Mesh-independent, so refinement studies converge.
pub fn random_smooth_profile(grid: &Grid, rng: &mut impl rand::Rng) -> Vec<f64> {
    let l = grid.length();
    let mut bumps = Vec::new();
    for _ in 0..4 {
        let c: f64 = rng.gen_range(0.3..1.5);
        let m: f64 = rng.gen_range(0.05 * l..0.6 * l);
        let s: f64 = rng.gen_range(0.05 * l..0.15 * l);
        bumps.push((c, m, s));
    }
    grid.nodes()
        .iter()
        .map(|&x| {
            let mut v = 0.3;
            for &(c, m, s) in &bumps {
                let z = (x - m) / s;
                v += c * (-z * z).exp();
            }
            v * (-3.0 * x / l).exp()
        })
        .collect()
}

/// Shift a generator by `-lambda` (the growth-rescaled flow); evolving
/// under it avoids overflow at long horizons when `lambda > 0`.
pub fn rescaled_dense(op: &DiscreteOperator, lambda: f64) -> DMatrix<f64> {
    let mut m = op.to_dense();
    for i in 0..op.n() {
        m[(i, i)] -= lambda;
    }
    m
}

/// Duality growth factor check: `<phi, f(t)> e^{-lambda t}` should stay at
/// `<phi, f(0)>` up to scheme error.
pub fn duality_drift(
    traj: &Trajectory,
    trip: &Eigentriple,
    grid: &Grid,
    lambda: f64,
) -> Result<f64> {
    let p0 = pairing(&traj.states[0], &trip.phi, grid)?;
    let mut worst: f64 = 0.0;
    for (k, state) in traj.states.iter().enumerate() {
        let p = pairing(state, &trip.phi, grid)? * (-lambda * traj.times[k]).exp();
        worst = worst.max((p - p0).abs());
    }
    Ok(worst)
}

/// Norm of the distance to the projected profile, `||f - <phi,f0> f_inf||`
/// in the triple's norm; used for convergence-to-profile diagnostics.
pub fn profile_distance_recorder<'a>(
    trip: &'a Eigentriple,
    grid: &'a Grid,
    weight: f64,
    name: &str,
) -> Recorder<'a> {
    let f_inf = trip.f_inf.clone();
    let spec = trip.norm_spec.clone();
    Recorder::new(name.to_string(), move |f: &[f64], _t| {
        let diff: Vec<f64> = f.iter().zip(&f_inf).map(|(&a, &b)| a - weight * b).collect();
        weighted_norm(&diff, grid, &spec).unwrap_or(f64::NAN)
    })
}
