//! Closed-form machinery for the age-structured model: the characteristic
//! growth-rate root and the explicit dual profile, used as oracles for the
//! eigensolver.

use crate::grid::Grid;
use crate::kernels::TotalRate;
use crate::{Error, Result};

// Truncation of the characteristic integral for rates without an analytic
// tail; integrable birth rates are negligible beyond this age.
const X_CUT: f64 = 40.0;

fn characteristic_integral(rate: &TotalRate, lambda: f64) -> f64 {
    let s = 1.0 + lambda;
    match rate {
        TotalRate::ExpDecay { coeff, rate: r } => coeff / (r + s),
        TotalRate::Constant(k) => {
            if s <= 0.0 {
                f64::INFINITY
            } else {
                k / s
            }
        }
        _ => rate.laplace_integral(s, X_CUT),
    }
}

/// Root of `int_0^inf K(x) e^{-(1+lambda) x} dx = 1`.
///
/// Requires `||K||_{L^1} > 1`, which makes the left side exceed 1 at
/// `lambda = 0^... = -1^+` and decay to 0, so the root is unique by
/// monotonicity. Bisection to residual `1e-12`.
pub fn euler_lotka_root(rate: &TotalRate) -> Result<f64> {
    if matches!(rate, TotalRate::Custom(_)) {
        eprintln!(
            "renewal: custom birth rate, characteristic integral truncated at x = {X_CUT}"
        );
    }
    let norm = characteristic_integral(rate, -1.0 + 1e-12).min(rate.integral(1e3));
    if !(norm > 1.0) {
        return Err(Error::Kernel(format!(
            "characteristic root needs ||K||_L1 > 1, got {norm:.6}"
        )));
    }
    let phi = |l: f64| characteristic_integral(rate, l) - 1.0;
    let mut lo = -1.0 + 1e-10;
    let mut hi = 1.0;
    while phi(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Kernel("characteristic root out of range".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let res = phi(root).abs();
    if res > 1e-12 {
        return Err(Error::Kernel(format!("characteristic residual {res:.3e} above 1e-12")));
    }
    Ok(root)
}

/// Explicit dual profile
/// `psi(x) = e^{(1+lambda) x} int_x^inf K(y) e^{-(1+lambda) y} dy`,
/// tabulated on the grid. `psi(0) = 1` by the root condition.
///
/// Exponential and constant rates use the closed form (exact tails); other
/// rates are integrated numerically on `[x, X_CUT]`.
pub fn renewal_dual(rate: &TotalRate, lambda: f64, grid: &Grid) -> Vec<f64> {
    let s = 1.0 + lambda;
    match rate {
        TotalRate::ExpDecay { coeff, rate: r } => {
            grid.nodes().iter().map(|&x| coeff * (-r * x).exp() / (r + s)).collect()
        }
        TotalRate::Constant(k) => grid.nodes().iter().map(|_| k / s).collect(),
        _ => grid
            .nodes()
            .iter()
            .map(|&x| {
                if x >= X_CUT {
                    return 0.0;
                }
                let tail = crate::kernels::simpson(
                    |y| rate.eval(y) * (-s * (y - x)).exp(),
                    x,
                    X_CUT,
                    2048,
                );
                tail
            })
            .collect(),
    }
}

/// Sup norm of the discrete dual-equation defect
/// `psi' - psi + K psi(0) - lambda psi` over the interior nodes (forward
/// differences); first order in the grid spacing.
pub fn renewal_dual_residual(rate: &TotalRate, lambda: f64, grid: &Grid, psi: &[f64]) -> f64 {
    let dx = grid.dx();
    let mut worst: f64 = 0.0;
    for j in 0..grid.len() - 1 {
        let d = (psi[j + 1] - psi[j]) / dx - psi[j] + rate.eval(grid.node(j)) * psi[0]
            - lambda * psi[j];
        worst = worst.max(d.abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_roots() {
        // 2/(2+lambda) = 1 at lambda = 0
        let k2 = TotalRate::ExpDecay { coeff: 2.0, rate: 1.0 };
        assert!(euler_lotka_root(&k2).unwrap().abs() < 1e-11);
        // 3/(2+lambda) = 1 at lambda = 1
        let k3 = TotalRate::ExpDecay { coeff: 3.0, rate: 1.0 };
        assert!((euler_lotka_root(&k3).unwrap() - 1.0).abs() < 1e-11);
    }

    #[test]
    fn indicator_rate_root_matches_scalar_oracle() {
        // K = 2 on [0,1]: root of 2 (1 - e^{-(1+l)})/(1+l) = 1, located by
        // an independent scalar bisection first
        let phi = |l: f64| 2.0 * (1.0 - (-(1.0 + l)).exp()) / (1.0 + l) - 1.0;
        let (mut lo, mut hi) = (0.0, 2.0);
        for _ in 0..80 {
            let m = 0.5 * (lo + hi);
            if phi(m) >= 0.0 {
                lo = m;
            } else {
                hi = m;
            }
        }
        let expected = 0.5 * (lo + hi);

        let rate = TotalRate::Custom(std::sync::Arc::new(|x| if x <= 1.0 { 2.0 } else { 0.0 }));
        let root = euler_lotka_root(&rate).unwrap();
        assert!((root - expected).abs() < 1e-9, "root {root} vs oracle {expected}");
    }

    #[test]
    fn subcritical_rate_rejected() {
        let k = TotalRate::ExpDecay { coeff: 0.9, rate: 1.0 };
        assert!(euler_lotka_root(&k).is_err());
    }

    #[test]
    fn dual_profile_closed_forms() {
        let g = Grid::new(20.0, 401).unwrap();
        // 3 e^{-x} at lambda = 1: psi = e^{-x} exactly
        let k3 = TotalRate::ExpDecay { coeff: 3.0, rate: 1.0 };
        let psi = renewal_dual(&k3, 1.0, &g);
        for (i, &x) in g.nodes().iter().enumerate() {
            let exact = (-x).exp();
            assert!(
                (psi[i] - exact).abs() <= 1e-10 * exact,
                "x={x}: {} vs {exact}",
                psi[i]
            );
        }
        assert!((psi[0] - 1.0).abs() < 1e-12);
        // 2 e^{-x} at lambda = 0: same profile
        let k2 = TotalRate::ExpDecay { coeff: 2.0, rate: 1.0 };
        let psi2 = renewal_dual(&k2, 0.0, &g);
        for (i, &x) in g.nodes().iter().enumerate() {
            assert!((psi2[i] - (-x).exp()).abs() <= 1e-10 * (-x).exp());
        }
    }

    #[test]
    fn dual_profile_decays_and_satisfies_equation() {
        let g = Grid::new(20.0, 801).unwrap();
        let k3 = TotalRate::ExpDecay { coeff: 3.0, rate: 1.0 };
        let lam = euler_lotka_root(&k3).unwrap();
        let psi = renewal_dual(&k3, lam, &g);
        assert!(psi.iter().all(|&v| v > 0.0));
        assert!(psi[g.len() - 1] <= 1e-3, "tail value {}", psi[g.len() - 1]);
        let res = renewal_dual_residual(&k3, lam, &g, &psi);
        assert!(res <= 5.0 * g.dx(), "defect {res}");
    }

    #[test]
    fn root_monotone_in_rate_scaling() {
        let base = euler_lotka_root(&TotalRate::ExpDecay { coeff: 2.0, rate: 1.0 }).unwrap();
        let scaled = euler_lotka_root(&TotalRate::ExpDecay { coeff: 3.0, rate: 1.0 }).unwrap();
        assert!(scaled > base);
    }
}
