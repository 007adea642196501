//! Uniform node-based discretization of the truncated size axis `[0, L]`
//! with trapezoid quadrature, weighted norms and duality pairings.
//!
//! The grid is node-based (not cell-centered) so that the doubling map
//! `x -> 2x` sends node `i` to node `2i` exactly; the equal-mitosis gain
//! term relies on that. Weights are the trapezoid weights, so all norms
//! below are first-order accurate quadratures of their continuum
//! counterparts.

use crate::{Error, Result};

/// Truncated uniform grid on `[0, L]` with trapezoid quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    length: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    dx: f64,
}

impl Grid {
    /// Build a uniform node-based grid with `n >= 2` nodes on `[0, length]`.
    pub fn new(length: f64, n: usize) -> Result<Grid> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Grid(format!("length must be positive, got {length}")));
        }
        if n < 2 {
            return Err(Error::Grid(format!("need at least 2 nodes, got {n}")));
        }
        let dx = length / (n - 1) as f64;
        // Nodes are i*dx rather than a lerp so that x_{2i} == 2*x_i exactly
        // in floating point (doubling maps the f64 grid onto itself).
        let nodes: Vec<f64> = (0..n).map(|i| i as f64 * dx).collect();
        let mut weights = vec![dx; n];
        weights[0] = 0.5 * dx;
        weights[n - 1] = 0.5 * dx;
        Ok(Grid { length, nodes, weights, dx })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    fn check_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: f.len() });
        }
        Ok(())
    }

    /// Quadrature mass carried by the last `frac` of the axis, as a
    /// fraction of the total; reported as a truncation diagnostic.
    pub fn tail_mass_fraction(&self, f: &[f64], frac: f64) -> Result<f64> {
        self.check_len(f)?;
        let cut = self.length * (1.0 - frac);
        let mut tail = 0.0;
        let mut total = 0.0;
        for i in 0..self.len() {
            let m = self.weights[i] * f[i].abs();
            total += m;
            if self.nodes[i] >= cut {
                tail += m;
            }
        }
        Ok(if total > 0.0 { tail / total } else { 0.0 })
    }
}

/// Weight function selecting the norm in which profiles are measured.
///
/// `PolyBracket(a)` is `<x>^a = (1+x^2)^{a/2}`, `PolyHomog(a)` is `x^a`,
/// `HomogPair(a, b)` is `x^a + x^b` with `0 <= a < 1 < b`, and `Custom`
/// carries one weight value per node.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    PolyBracket(f64),
    PolyHomog(f64),
    HomogPair(f64, f64),
    Custom(Vec<f64>),
}

impl WeightSpec {
    /// Validate the exponent constraints.
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightSpec::PolyBracket(a) | WeightSpec::PolyHomog(a) => {
                if !a.is_finite() {
                    return Err(Error::Grid(format!("weight exponent must be finite, got {a}")));
                }
            }
            WeightSpec::HomogPair(a, b) => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::Grid("weight exponents must be finite".into()));
                }
                if !(0.0..1.0).contains(&a) || b <= 1.0 {
                    return Err(Error::Grid(format!(
                        "homogeneous pair needs 0 <= a < 1 < b, got a={a}, b={b}"
                    )));
                }
            }
            WeightSpec::Custom(_) => {}
        }
        Ok(())
    }

    /// Tabulate the weight on the grid nodes.
    pub fn tabulate(&self, grid: &Grid) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            WeightSpec::PolyBracket(a) => {
                Ok(grid.nodes().iter().map(|&x| bracket(x).powf(*a)).collect())
            }
            WeightSpec::PolyHomog(a) => Ok(grid.nodes().iter().map(|&x| pow0(x, *a)).collect()),
            WeightSpec::HomogPair(a, b) => {
                Ok(grid.nodes().iter().map(|&x| pow0(x, *a) + pow0(x, *b)).collect())
            }
            WeightSpec::Custom(v) => {
                if v.len() != grid.len() {
                    return Err(Error::LengthMismatch { expected: grid.len(), got: v.len() });
                }
                Ok(v.clone())
            }
        }
    }
}

/// `<x> = (1 + x^2)^(1/2)`.
pub fn bracket(x: f64) -> f64 {
    (1.0 + x * x).sqrt()
}

// x^a with the 0^0 = 1 convention so that a = 0 yields the plain L^1 norm.
fn pow0(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        1.0
    } else {
        x.powf(a)
    }
}

/// Weighted L^1 norm: `sum_i w_i |f_i| xi(x_i)`.
pub fn weighted_norm(f: &[f64], grid: &Grid, spec: &WeightSpec) -> Result<f64> {
    grid.check_len(f)?;
    let xi = spec.tabulate(grid)?;
    Ok(f.iter()
        .zip(grid.weights())
        .zip(&xi)
        .map(|((&v, &w), &s)| w * v.abs() * s)
        .sum())
}

/// Weak norm of the primitive: `sum_i w_i |G_i| <x_i>^(alpha-1)` where
/// `G` is the running quadrature `G_i = sum_{j<=i} w_j f_j`.
///
/// Intended for mean-zero `f`; accepted for any input.
pub fn weak_norm(f: &[f64], grid: &Grid, alpha: f64) -> Result<f64> {
    grid.check_len(f)?;
    let mut acc = 0.0;
    let mut out = 0.0;
    for i in 0..grid.len() {
        acc += grid.weight(i) * f[i];
        out += grid.weight(i) * acc.abs() * bracket(grid.node(i)).powf(alpha - 1.0);
    }
    Ok(out)
}

/// Signed moment `sum_i w_i f_i x_i^p` (no absolute value).
pub fn moment(f: &[f64], grid: &Grid, p: f64) -> Result<f64> {
    grid.check_len(f)?;
    Ok(f.iter()
        .zip(grid.weights())
        .zip(grid.nodes())
        .map(|((&v, &w), &x)| w * v * pow0(x, p))
        .sum())
}

/// Duality pairing `<phi, f> = sum_i w_i f_i phi_i`.
pub fn pairing(f: &[f64], phi: &[f64], grid: &Grid) -> Result<f64> {
    grid.check_len(f)?;
    grid.check_len(phi)?;
    Ok(f.iter()
        .zip(phi)
        .zip(grid.weights())
        .map(|((&a, &b), &w)| w * a * b)
        .sum())
}
