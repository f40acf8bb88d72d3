//! Radial solution of `Δf = (αρ + V) f`, `f(0) = 1`, and the boundedness
//! dichotomy that decides generalized conservation.

use std::fmt;
use std::io;

use thiserror::Error;

use crate::expr::DomainError;
use crate::manifold::{ratio_table, GeometryError, ManifoldSpec, Mix};
use crate::mesh;
use crate::radial_ode::{integrate_on_grid, Linear2};
use crate::table;

pub const R_MIN: f64 = 1e-6;
pub const SATURATION: f64 = 1e300;
pub const MIN_NODES: usize = 64;
/// Substep bound `h · μ` for the growing mode `μ`.
const GROWTH_STEP: f64 = 0.25;
/// Relative slack for the monotonicity checks.
const MONOTONE_SLACK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("grid too coarse: {quantity} decreases at r = {r}; refine and retry")]
    RefineNeeded { r: f64, quantity: &'static str },
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialSolution {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// `f'(r_j)`.
    pub slope: Vec<f64>,
    /// `s(r_j) f'(r_j)`; `+inf` where `s` overflows.
    pub flux: Vec<f64>,
    pub alpha: f64,
    pub blowup_radius: Option<f64>,
}

impl RadialSolution {
    pub fn last_value(&self) -> f64 {
        *self.values.last().expect("nonempty")
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        let rows = (0..self.grid.len()).map(|j| vec![self.grid[j], self.values[j], self.flux[j]]);
        table::write_table(out, &["r", "f", "flux"], rows)
    }
}

/// `f' = φ`, `φ' = (αρ + V) f − λ φ` on a geometric grid over `[R_MIN, r_max]`.
pub fn solve_radial_eigen(
    m: &ManifoldSpec,
    alpha: f64,
    r_max: f64,
    nodes: usize,
) -> Result<RadialSolution, EigenError> {
    solve_scaled(m, alpha, r_max, nodes, 1.0)
}

fn solve_scaled(
    m: &ManifoldSpec,
    alpha: f64,
    r_max: f64,
    nodes: usize,
    source_scale: f64,
) -> Result<RadialSolution, EigenError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(EigenError::BadArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !(r_max > R_MIN && r_max.is_finite()) {
        return Err(EigenError::BadArgument(format!(
            "radius must exceed {R_MIN}, got {r_max}"
        )));
    }
    if nodes < MIN_NODES {
        return Err(EigenError::BadArgument(format!(
            "need at least {MIN_NODES} nodes, got {nodes}"
        )));
    }
    let grid = mesh::geometric(R_MIN, r_max, nodes);
    let mix = Mix::eigen(alpha);
    let mut failure: Option<DomainError> = None;
    let coeffs = |r: f64| -> Option<Linear2> {
        let got = m.mean_curvature(r).and_then(|lam| m.weight(mix, r).map(|q| (lam, q)));
        match got {
            Ok((lam, q)) => Some(Linear2 {
                a: [[0.0, 1.0], [source_scale * q, -lam]],
                b: [0.0, 0.0],
            }),
            Err(e) => {
                failure.get_or_insert(e);
                None
            }
        }
    };
    let states = integrate_on_grid(coeffs, &grid, [1.0, 0.0], GROWTH_STEP);
    if let Some(e) = failure {
        return Err(e.into());
    }
    let mut values = Vec::with_capacity(nodes);
    let mut slope = Vec::with_capacity(nodes);
    let mut flux = Vec::with_capacity(nodes);
    let mut ln_flux_prev = f64::NEG_INFINITY;
    let mut blowup_radius = None;
    for (j, st) in states.into_iter().enumerate() {
        let r = grid[j];
        let state = match st {
            Some([f, p]) if blowup_radius.is_none() && f < SATURATION => Some((f, p)),
            _ => None,
        };
        let Some((f, p)) = state else {
            blowup_radius.get_or_insert(r);
            values.push(SATURATION);
            slope.push(slope.last().copied().unwrap_or(0.0));
            flux.push(flux.last().copied().unwrap_or(0.0));
            continue;
        };
        if let Some(&prev) = values.last() {
            if f < prev * (1.0 - MONOTONE_SLACK) {
                return Err(EigenError::RefineNeeded { r, quantity: "f" });
            }
        }
        if p < 0.0 && p < -MONOTONE_SLACK * f {
            return Err(EigenError::RefineNeeded { r, quantity: "flux" });
        }
        let p = p.max(0.0);
        let ln_flux = if p > 0.0 {
            m.ln_surface(r)? + p.ln()
        } else {
            f64::NEG_INFINITY
        };
        if ln_flux < ln_flux_prev - MONOTONE_SLACK * ln_flux_prev.abs().max(1.0) {
            return Err(EigenError::RefineNeeded { r, quantity: "flux" });
        }
        ln_flux_prev = ln_flux_prev.max(ln_flux);
        values.push(f.max(values.last().copied().unwrap_or(f)));
        slope.push(p);
        flux.push(ln_flux.exp());
    }
    Ok(RadialSolution {
        grid,
        values,
        slope,
        flux,
        alpha,
        blowup_radius,
    })
}

/// `1 + ∫_{r_0}^{r_j} v_{αρ+V}/s` on the solution grid; `f` dominates it.
pub fn lower_bound_profile(m: &ManifoldSpec, alpha: f64, grid: &[f64]) -> Result<Vec<f64>, EigenError> {
    let t = ratio_table(m, Mix::eigen(alpha), grid)?;
    Ok(t.partial.iter().map(|p| 1.0 + p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundednessPolicy {
    pub r_start: f64,
    pub r_max: f64,
    pub nodes: usize,
    pub growth_factor: f64,
    pub growth_doublings: usize,
    pub stagnation_tol: f64,
    pub stagnation_doublings: usize,
}

impl Default for BoundednessPolicy {
    fn default() -> Self {
        BoundednessPolicy {
            r_start: 1.0,
            r_max: 2f64.powi(30),
            nodes: 4096,
            growth_factor: 2.0,
            growth_doublings: 4,
            stagnation_tol: 1e-8,
            stagnation_doublings: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KhasminskiiVerdict {
    ConservativeGeneralized,
    NotConservative,
    Inconclusive,
}

impl fmt::Display for KhasminskiiVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KhasminskiiVerdict::ConservativeGeneralized => "conservative_generalized",
            KhasminskiiVerdict::NotConservative => "not_conservative",
            KhasminskiiVerdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KhasminskiiReport {
    pub verdict: KhasminskiiVerdict,
    /// `(R, f(R))` for every solve.
    pub samples: Vec<(f64, f64)>,
    pub blowup_radius: Option<f64>,
    pub note: String,
}

/// Solve on `R = r_start · 2^k` until `f` blows up, keeps doubling, or stalls.
pub fn khasminskii_verdict(
    m: &ManifoldSpec,
    alpha: f64,
    policy: &BoundednessPolicy,
) -> Result<KhasminskiiReport, EigenError> {
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut r = policy.r_start;
    while r <= policy.r_max * (1.0 + 1e-12) {
        let sol = solve_radial_eigen(m, alpha, r, policy.nodes)?;
        if let Some(b) = sol.blowup_radius {
            samples.push((r, sol.last_value()));
            return Ok(KhasminskiiReport {
                verdict: KhasminskiiVerdict::ConservativeGeneralized,
                samples,
                blowup_radius: Some(b),
                note: format!("f exceeded {SATURATION:e} at r = {b:e}"),
            });
        }
        samples.push((r, sol.last_value()));
        let f: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let n = f.len();
        let gw = policy.growth_doublings;
        if n > gw && (n - gw..n).all(|k| f[k] >= policy.growth_factor * f[k - 1]) {
            return Ok(KhasminskiiReport {
                verdict: KhasminskiiVerdict::ConservativeGeneralized,
                samples,
                blowup_radius: None,
                note: format!("f(2R)/f(R) ≥ {} over the last {gw} doublings", policy.growth_factor),
            });
        }
        let sw = policy.stagnation_doublings;
        if n > sw && (n - sw..n).all(|k| (f[k] - f[k - 1]).abs() < policy.stagnation_tol * f[k - 1]) {
            return Ok(KhasminskiiReport {
                verdict: KhasminskiiVerdict::NotConservative,
                samples,
                blowup_radius: None,
                note: format!(
                    "f stalled at {:.10} (relative increments < {:e} over {sw} doublings)",
                    f[n - 1],
                    policy.stagnation_tol
                ),
            });
        }
        r *= 2.0;
    }
    let note = match samples.len() {
        0 => "no radius in range".to_string(),
        n if n >= 2 => format!(
            "undecided at R = {:e}: last ratio f(2R)/f(R) = {:.6}",
            samples[n - 1].0,
            samples[n - 1].1 / samples[n - 2].1
        ),
        _ => format!("undecided at R = {:e}", samples[0].0),
    };
    Ok(KhasminskiiReport {
        verdict: KhasminskiiVerdict::Inconclusive,
        samples,
        blowup_radius: None,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: u32, sigma: &str, rho: &str, v: &str) -> ManifoldSpec {
        ManifoldSpec::parse(n, sigma, rho, v).unwrap()
    }

    /// `I_0` by its power series.
    fn bessel_i0(r: f64) -> f64 {
        let q = r * r / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..200 {
            term *= q / (k * k) as f64;
            sum += term;
            if term < 1e-18 * sum {
                break;
            }
        }
        sum
    }

    #[test]
    fn bessel_series_sanity() {
        assert!((bessel_i0(2.0) - 2.279_585_302_336_067).abs() < 1e-14);
    }

    #[test]
    fn plane_matches_bessel() {
        let sol = solve_radial_eigen(&spec(2, "r", "1", "0"), 1.0, 10.0, 4096).unwrap();
        for (j, &r) in sol.grid.iter().enumerate() {
            let exact = bessel_i0(r);
            assert!((sol.values[j] - exact).abs() < 1e-6 * exact, "r = {r}");
        }
    }

    #[test]
    fn three_space_matches_sinh() {
        let sol = solve_radial_eigen(&spec(3, "r", "1", "0"), 1.0, 10.0, 4096).unwrap();
        for (j, &r) in sol.grid.iter().enumerate() {
            let exact = if r < 1e-4 { 1.0 + r * r / 6.0 } else { r.sinh() / r };
            assert!((sol.values[j] - exact).abs() < 1e-6 * exact, "r = {r}");
        }
    }

    #[test]
    fn zero_source_freezes_f() {
        let sol = solve_scaled(&spec(2, "r*exp(r^3)", "1", "exp(8*r)"), 1.0, 5.0, 256, 0.0).unwrap();
        assert!(sol.values.iter().all(|&v| v == 1.0));
        assert!(sol.flux.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_convergence_on_bessel() {
        let m = spec(2, "r", "1", "0");
        let a = solve_radial_eigen(&m, 1.0, 10.0, 2048).unwrap().last_value();
        let b = solve_radial_eigen(&m, 1.0, 10.0, 4096).unwrap().last_value();
        assert!((a - b).abs() < 1e-4 * b);
    }

    #[test]
    fn monotone_and_above_lower_bound() {
        for (sigma, rho, v) in [
            ("r", "1", "0"),
            ("r*exp(r^3)", "1", "0"),
            ("sinh(r)", "1 + r^2", "r"),
            ("r*exp(r^3)", "1", "exp(8*r)"),
        ] {
            let m = spec(2, sigma, rho, v);
            for alpha in [0.5, 1.0, 2.0] {
                let sol = solve_radial_eigen(&m, alpha, 8.0, 4096).unwrap();
                assert!(sol.values.windows(2).all(|w| w[0] <= w[1]));
                assert!(sol.flux.windows(2).all(|w| w[0] <= w[1]));
                let lb = lower_bound_profile(&m, alpha, &sol.grid).unwrap();
                for j in 0..sol.grid.len() {
                    if sol.blowup_radius.is_none() {
                        assert!(
                            sol.values[j] >= lb[j] - 1e-4 * sol.values[j],
                            "{sigma} r = {}",
                            sol.grid[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn verdict_examples() {
        let p = BoundednessPolicy::default();
        let e2 = khasminskii_verdict(&spec(2, "r", "1", "0"), 1.0, &p).unwrap();
        assert_eq!(e2.verdict, KhasminskiiVerdict::ConservativeGeneralized);
        let inc = khasminskii_verdict(&spec(2, "r*exp(r^3)", "1", "0"), 1.0, &p).unwrap();
        assert_eq!(inc.verdict, KhasminskiiVerdict::NotConservative, "{}", inc.note);
        let fixed = khasminskii_verdict(&spec(2, "r*exp(r^3)", "1", "exp(8*r)"), 1.0, &p).unwrap();
        assert_eq!(fixed.verdict, KhasminskiiVerdict::ConservativeGeneralized);
    }

    #[test]
    fn csv_columns() {
        let sol = solve_radial_eigen(&spec(2, "r", "1", "0"), 1.0, 2.0, 64).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("r,f,flux\r\n"));
        assert_eq!(text.lines().count(), 65);
    }
}
