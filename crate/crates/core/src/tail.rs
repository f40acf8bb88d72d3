//! Numerical classification of improper integrals `∫_a^∞ F`, and the two
//! volume-growth tests built on it.

use std::fmt;
use std::io;

use thiserror::Error;

use crate::manifold::{ratio_table, GeometryCache, GeometryError, ManifoldSpec, Mix, R_LO};
use crate::mesh;
use crate::quadrature::{integrate, QuadratureError, Tolerance};
use crate::table;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailClass {
    Divergent,
    Convergent,
    Inconclusive,
}

impl fmt::Display for TailClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TailClass::Divergent => "divergent",
            TailClass::Convergent => "convergent",
            TailClass::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailVerdict {
    pub classification: TailClass,
    /// `(R_k, ∫_a^{R_k} F)` for `k = 1..=K`.
    pub partial_sums: Vec<(f64, f64)>,
    /// Fitted `p` in `F ~ r^p` from the last two increments.
    pub growth_exponent: f64,
    pub confidence_note: String,
}

impl TailVerdict {
    pub fn last_sum(&self) -> f64 {
        self.partial_sums.last().map_or(0.0, |p| p.1)
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        table::write_table(
            out,
            &["R", "partial_integral"],
            self.partial_sums.iter().map(|&(r, s)| vec![r, s]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailPolicy {
    /// Number of doubling horizons `K`.
    pub doublings: usize,
    pub rel_tol: f64,
    /// `I_{k+1} ≥ divergence_ratio · I_k` counts as non-decaying.
    pub divergence_ratio: f64,
    pub divergence_window: usize,
    pub convergence_window: usize,
}

impl Default for TailPolicy {
    fn default() -> Self {
        TailPolicy {
            doublings: 24,
            rel_tol: 1e-6,
            divergence_ratio: 0.95,
            divergence_window: 6,
            convergence_window: 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum TailError {
    #[error("integrand is negative ({value}) at r = {r}")]
    NegativeIntegrand { r: f64, value: f64 },
    #[error("integrand is NaN at r = {r}")]
    NotANumber { r: f64 },
    #[error("lower limit must be positive and finite, got {0}")]
    BadStart(f64),
    #[error("need at least {needed} doublings, got {got}")]
    TooFewDoublings { needed: usize, got: usize },
    #[error("quadrature did not converge on [{a}, {b}]")]
    Quadrature { a: f64, b: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl TailPolicy {
    fn check(&self) -> Result<(), TailError> {
        let needed = self.divergence_window.max(self.convergence_window) + 1;
        if self.doublings < needed {
            return Err(TailError::TooFewDoublings {
                needed,
                got: self.doublings,
            });
        }
        Ok(())
    }
}

/// Classify from the doubling increments `I_k = ∫_{a 2^k}^{a 2^{k+1}} F`.
///
/// Non-finite increments mean the partial sums overflowed.
pub fn classify_increments(a: f64, increments: &[f64], policy: &TailPolicy) -> TailVerdict {
    let mut partial_sums = Vec::with_capacity(increments.len());
    let mut s = 0.0;
    let mut saturated_at = None;
    for (k, &inc) in increments.iter().enumerate() {
        s += inc;
        let r = a * 2f64.powi(k as i32 + 1);
        if !s.is_finite() && saturated_at.is_none() {
            saturated_at = Some(r);
        }
        partial_sums.push((r, s));
    }
    let n = increments.len();
    let growth_exponent = if saturated_at.is_some() {
        f64::INFINITY
    } else if n >= 2 && increments[n - 1] > 0.0 && increments[n - 2] > 0.0 {
        (increments[n - 1] / increments[n - 2]).log2() - 1.0
    } else {
        f64::NAN
    };
    let (classification, confidence_note) = if let Some(r) = saturated_at {
        (TailClass::Divergent, format!("partial sums overflowed by R = {r:e}"))
    } else {
        let cw = policy.convergence_window;
        let dw = policy.divergence_window;
        let converged = n > cw
            && (n - cw..n)
                .all(|k| increments[k] <= policy.rel_tol * partial_sums[k].1 && increments[k] <= increments[k - 1]);
        let diverging = n > dw
            && (n - dw..n).all(|k| increments[k] >= policy.divergence_ratio * increments[k - 1] && increments[k] > 0.0);
        if converged {
            (
                TailClass::Convergent,
                format!(
                    "last {cw} increments below {:e} of the running sum; limit ≈ {:e}",
                    policy.rel_tol, s
                ),
            )
        } else if diverging {
            (
                TailClass::Divergent,
                format!(
                    "increment ratio ≥ {} over the last {dw} doublings; fitted exponent {growth_exponent:.3}",
                    policy.divergence_ratio
                ),
            )
        } else {
            let ratio = if n >= 2 {
                increments[n - 1] / increments[n - 2]
            } else {
                f64::NAN
            };
            (
                TailClass::Inconclusive,
                format!(
                    "no decision at R = {:e}: last increment ratio {ratio:.4}, sum {s:e}",
                    a * 2f64.powi(n as i32)
                ),
            )
        }
    };
    TailVerdict {
        classification,
        partial_sums,
        growth_exponent,
        confidence_note,
    }
}

/// Classify `∫_a^∞ F` by adaptive quadrature on doubling horizons.
pub fn classify_tail<F>(mut f: F, a: f64, policy: &TailPolicy) -> Result<TailVerdict, TailError>
where
    F: FnMut(f64) -> f64,
{
    if !(a > 0.0 && a.is_finite()) {
        return Err(TailError::BadStart(a));
    }
    policy.check()?;
    let tol = Tolerance { rel: 1e-10, abs: 0.0 };
    let mut checked = |r: f64| -> Result<f64, TailError> {
        let v = f(r);
        if v.is_nan() {
            Err(TailError::NotANumber { r })
        } else if v < 0.0 {
            Err(TailError::NegativeIntegrand { r, value: v })
        } else {
            Ok(v)
        }
    };
    let mut increments = Vec::with_capacity(policy.doublings);
    for k in 0..policy.doublings {
        let lo = a * 2f64.powi(k as i32);
        let hi = 2.0 * lo;
        let inc = match integrate(&mut checked, lo, hi, tol) {
            Ok(v) => v,
            Err(QuadratureError::Integrand(e)) => return Err(e),
            Err(QuadratureError::NoConvergence {
                worst_a,
                worst_b,
                estimate,
                ..
            }) => {
                if estimate.is_finite() {
                    return Err(TailError::Quadrature { a: worst_a, b: worst_b });
                }
                f64::INFINITY
            }
        };
        increments.push(inc);
        if !inc.is_finite() {
            break;
        }
    }
    Ok(classify_increments(a, &increments, policy))
}

/// Nodes per doubling and below the first horizon for tabulated tail tests.
const PER_DOUBLING: usize = 64;
const INNER_NODES: usize = 2048;

/// Doubling increments of `∫ v_w / s`, read off the tabulated ratio ODE.
pub fn ratio_increments(m: &ManifoldSpec, mix: Mix, a: f64, doublings: usize) -> Result<Vec<f64>, TailError> {
    if !(a > R_LO && a.is_finite()) {
        return Err(TailError::BadStart(a));
    }
    let (grid, marks) = mesh::doubling(R_LO, a, doublings, INNER_NODES, PER_DOUBLING);
    let table = ratio_table(m, mix, &grid)?;
    let mut out = Vec::with_capacity(doublings);
    for w in marks.windows(2) {
        let inc = table.partial[w[1]] - table.partial[w[0]];
        out.push(if inc.is_nan() { f64::INFINITY } else { inc.max(0.0) });
        if !inc.is_finite() {
            break;
        }
    }
    Ok(out)
}

/// Divergence of `∫_a^∞ v_{ρ+V}/s` is equivalent to generalized conservation.
pub fn generalized_volume_test(m: &ManifoldSpec, a: f64, policy: &TailPolicy) -> Result<TailVerdict, TailError> {
    policy.check()?;
    let inc = ratio_increments(m, Mix::RHO_PLUS_V, a, policy.doublings)?;
    Ok(classify_increments(a, &inc, policy))
}

/// Largest radius the Sturm test will tabulate to.
pub const STURM_RADIUS_CAP: f64 = 1e15;

/// Sufficient test: divergence of `∫_1^∞ R / max(ln ν_ρ(R), 1) dR` implies
/// conservation of the potential-free form.
pub fn sturm_test(m: &ManifoldSpec, policy: &TailPolicy) -> Result<TailVerdict, TailError> {
    policy.check()?;
    let target = 2f64.powi(policy.doublings as i32);
    // Find a radius whose intrinsic distance exceeds the last horizon.
    let mut r = 1.0;
    let mut d_prev = m.intrinsic_distance(r)?;
    let r_end = loop {
        if d_prev >= target * 1.001 {
            break r;
        }
        let next = 2.0 * r;
        if next > STURM_RADIUS_CAP {
            return Ok(silent(format!(
                "intrinsic distance reaches only {d_prev:e} by r = {r:e}, short of {target:e}"
            )));
        }
        let d = d_prev
            + integrate(
                |x: f64| m.rho.eval(x).map(f64::sqrt).map_err(GeometryError::from),
                r,
                next,
                Tolerance::default(),
            )
            .map_err(GeometryError::from)?;
        if d - d_prev <= 1e-12 * d {
            return Ok(silent(format!(
                "intrinsic distance is bounded (≈ {d:.6} at r = {next:e}); balls of radius {target:e} do not exist"
            )));
        }
        d_prev = d;
        r = next;
    };
    let doublings = r_end.log2().ceil().max(1.0) as usize;
    let (grid, _) = mesh::doubling(R_LO, 1.0, doublings, INNER_NODES, PER_DOUBLING);
    let cache = GeometryCache::on_grid(&m.without_potential(), grid)?;
    if cache.distance[0] > 1.0 {
        return Ok(silent(
            "intrinsic distance already exceeds 1 at the pole cut-off".into(),
        ));
    }
    let g = |big_r: f64| -> f64 {
        match cache.invert_distance(big_r) {
            Some(radius) => {
                let ln_nu = GeometryCache::ln_volume_at(&cache.rho, &cache.radii, radius);
                big_r / ln_nu.max(1.0)
            }
            None => f64::NAN,
        }
    };
    classify_tail(g, 1.0, policy)
}

fn silent(note: String) -> TailVerdict {
    TailVerdict {
        classification: TailClass::Inconclusive,
        partial_sums: Vec::new(),
        growth_exponent: f64::NAN,
        confidence_note: note,
    }
}

/// Reading of a Sturm verdict: only divergence carries information.
pub fn sturm_reading(v: &TailVerdict) -> &'static str {
    match v.classification {
        TailClass::Divergent => "conservative (sufficient condition)",
        _ => "test silent",
    }
}
