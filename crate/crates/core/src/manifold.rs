//! Model manifolds `dr² + σ(r)² dθ²` on `ℝⁿ` with radial density and potential.

use std::f64::consts::PI;

use thiserror::Error;

use crate::expr::{DomainError, LogValue, NonSmoothError, RadialExpr};
use crate::mesh;
use crate::quadrature::{integrate, integrate_log, QuadratureError, Tolerance};
use crate::radial_ode::{integrate_on_grid, Linear2};

/// Inner cut-off for every radial integral; the integrands vanish at the pole.
pub const R_LO: f64 = 1e-12;
/// σ at this radius must be below [`POLE_BOUND`].
pub const POLE_PROBE: f64 = 1e-6;
pub const POLE_BOUND: f64 = 1e-3;
pub const VALIDATION_SAMPLES: usize = 10_000;
pub const DEFAULT_VALIDATE_MAX: f64 = 1e4;
pub const DEFAULT_TABLE_NODES: usize = 4096;

/// Surface area of the unit sphere `S^{n-1}`, `2 π^{n/2} / Γ(n/2)`.
pub fn omega_n(n: u32) -> f64 {
    let h = f64::from(n) / 2.0;
    (std::f64::consts::LN_2 + h * PI.ln() - libm::lgamma(h)).exp()
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("dimension must be at least 2, got {0}")]
    Dimension(u32),
    #[error("scaling function is not differentiable: {0}")]
    NonSmoothSigma(#[from] NonSmoothError),
    #[error("validation horizon must be positive and finite, got {0}")]
    Horizon(f64),
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("scaling function must be positive, got sign {sign} at r = {r}")]
    NonPositiveSigma { r: f64, sign: i8 },
    #[error("quadrature did not converge; worst subinterval [{a}, {b}]")]
    NoConvergence { a: f64, b: f64 },
    #[error("radius must be positive and finite, got {0}")]
    BadRadius(f64),
}

impl From<QuadratureError<GeometryError>> for GeometryError {
    fn from(e: QuadratureError<GeometryError>) -> Self {
        match e {
            QuadratureError::Integrand(inner) => inner,
            QuadratureError::NoConvergence { worst_a, worst_b, .. } => {
                GeometryError::NoConvergence { a: worst_a, b: worst_b }
            }
        }
    }
}

/// Linear combination `rho · ρ + potential · V` used as a volume weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mix {
    pub rho: f64,
    pub potential: f64,
}

impl Mix {
    pub const RHO: Mix = Mix {
        rho: 1.0,
        potential: 0.0,
    };
    pub const RHO_PLUS_V: Mix = Mix {
        rho: 1.0,
        potential: 1.0,
    };
    pub const POTENTIAL_ONLY: Mix = Mix {
        rho: 0.0,
        potential: 1.0,
    };

    /// `αρ + V`, the source of the α-eigen equation.
    pub fn eigen(alpha: f64) -> Mix {
        Mix {
            rho: alpha,
            potential: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weight {
    Rho,
    RhoPlusV,
    PotentialOnly,
}

impl From<Weight> for Mix {
    fn from(w: Weight) -> Mix {
        match w {
            Weight::Rho => Mix::RHO,
            Weight::RhoPlusV => Mix::RHO_PLUS_V,
            Weight::PotentialOnly => Mix::POTENTIAL_ONLY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Volume {
    /// Saturates at `+inf`.
    pub value: f64,
    pub ln_value: f64,
    /// The value exceeded the `f64` range.
    pub overflow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Sigma,
    Rho,
    Potential,
    /// σ(0+) must vanish.
    PoleLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub r: f64,
    pub quantity: Quantity,
    /// Offending value; `NaN` when the expression could not be evaluated.
    pub value: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSpec {
    pub n: u32,
    pub sigma: RadialExpr,
    pub rho: RadialExpr,
    pub potential: RadialExpr,
    pub r_validate_max: f64,
    sigma_dlog: RadialExpr,
}

impl ManifoldSpec {
    pub fn new(n: u32, sigma: RadialExpr, rho: RadialExpr, potential: RadialExpr) -> Result<Self, SpecError> {
        if n < 2 {
            return Err(SpecError::Dimension(n));
        }
        let sigma_dlog = sigma.log_derivative()?;
        Ok(ManifoldSpec {
            n,
            sigma,
            rho,
            potential,
            r_validate_max: DEFAULT_VALIDATE_MAX,
            sigma_dlog,
        })
    }

    /// Convenience constructor from expression strings.
    pub fn parse(
        n: u32,
        sigma: &str,
        rho: &str,
        potential: &str,
    ) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        Ok(Self::new(n, sigma.parse()?, rho.parse()?, potential.parse()?)?)
    }

    pub fn with_validation_horizon(mut self, r: f64) -> Result<Self, SpecError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(SpecError::Horizon(r));
        }
        self.r_validate_max = r;
        Ok(self)
    }

    pub fn with_potential(&self, potential: RadialExpr) -> Self {
        ManifoldSpec {
            potential,
            ..self.clone()
        }
    }

    /// Same geometry with `V ≡ 0`.
    pub fn without_potential(&self) -> Self {
        self.with_potential(RadialExpr::constant(0.0))
    }

    /// Density `ρ + V` and no potential.
    pub fn time_changed(&self) -> Self {
        ManifoldSpec {
            rho: self.rho.clone().add(self.potential.clone()),
            potential: RadialExpr::constant(0.0),
            ..self.clone()
        }
    }

    pub fn omega(&self) -> f64 {
        omega_n(self.n)
    }

    pub fn ln_sigma(&self, r: f64) -> Result<f64, GeometryError> {
        let v = self.sigma.eval_log(r)?;
        if v.sign <= 0 {
            return Err(GeometryError::NonPositiveSigma { r, sign: v.sign });
        }
        Ok(v.ln_abs)
    }

    /// `σ'/σ`, evaluated symbolically so it stays finite when σ overflows.
    pub fn sigma_log_derivative(&self, r: f64) -> Result<f64, DomainError> {
        self.sigma_dlog.eval(r)
    }

    /// `s'/s = (n-1) σ'/σ`.
    pub fn mean_curvature(&self, r: f64) -> Result<f64, DomainError> {
        Ok(f64::from(self.n - 1) * self.sigma_dlog.eval(r)?)
    }

    pub fn ln_surface(&self, r: f64) -> Result<f64, GeometryError> {
        Ok(self.omega().ln() + f64::from(self.n - 1) * self.ln_sigma(r)?)
    }

    /// `s(r) = ω_n σ(r)^{n-1}`; `+inf` past the `f64` range.
    pub fn surface_area(&self, r: f64) -> Result<f64, GeometryError> {
        if !(r > 0.0) {
            return Err(GeometryError::BadRadius(r));
        }
        Ok(self.ln_surface(r)?.exp())
    }

    pub fn weight(&self, mix: Mix, r: f64) -> Result<f64, DomainError> {
        let mut w = 0.0;
        if mix.rho != 0.0 {
            w += mix.rho * self.rho.eval(r)?;
        }
        if mix.potential != 0.0 {
            w += mix.potential * self.potential.eval(r)?;
        }
        Ok(w)
    }

    /// `ln w(r)`, `-inf` where the weight vanishes.
    pub fn ln_weight(&self, mix: Mix, r: f64) -> Result<f64, DomainError> {
        let mut acc = LogValue::ZERO;
        if mix.rho != 0.0 {
            acc = acc.add(LogValue::from_f64(mix.rho).mul(self.rho.eval_log(r)?));
        }
        if mix.potential != 0.0 {
            acc = acc.add(LogValue::from_f64(mix.potential).mul(self.potential.eval_log(r)?));
        }
        Ok(if acc.sign > 0 { acc.ln_abs } else { f64::NEG_INFINITY })
    }

    /// `ω_n ∫₀^r w σ^{n-1}`, integrated in log space.
    pub fn volume(&self, weight: impl Into<Mix>, r: f64) -> Result<Volume, GeometryError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(GeometryError::BadRadius(r));
        }
        let ln_v = self.ln_volume_between(weight.into(), R_LO.min(r), r)?;
        let value = ln_v.exp();
        Ok(Volume {
            value,
            ln_value: ln_v,
            overflow: value == f64::INFINITY,
        })
    }

    pub(crate) fn ln_volume_between(&self, mix: Mix, a: f64, b: f64) -> Result<f64, GeometryError> {
        let ln_omega = self.omega().ln();
        let k = f64::from(self.n - 1);
        let g = |x: f64| -> Result<f64, GeometryError> {
            let lw = self.ln_weight(mix, x)?;
            if lw == f64::NEG_INFINITY {
                return Ok(lw);
            }
            Ok(ln_omega + lw + k * self.ln_sigma(x)?)
        };
        let res = integrate_log(g, a, b, Tolerance::default())?;
        let ln_tol = (Tolerance::default().rel.ln() + res.ln_value).max(Tolerance::default().abs.ln());
        if !res.resolved && res.ln_error > ln_tol {
            return Err(GeometryError::NoConvergence {
                a: res.worst_interval.0,
                b: res.worst_interval.1,
            });
        }
        Ok(res.ln_value)
    }

    /// Radial intrinsic distance `d_ρ(0, r) = ∫₀^r √ρ`.
    pub fn intrinsic_distance(&self, r: f64) -> Result<f64, GeometryError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(GeometryError::BadRadius(r));
        }
        let lo = R_LO.min(r);
        let head = lo * self.rho.eval(lo)?.sqrt();
        Ok(head + self.distance_between(lo, r)?)
    }

    pub(crate) fn distance_between(&self, a: f64, b: f64) -> Result<f64, GeometryError> {
        let f = |x: f64| -> Result<f64, GeometryError> { Ok(self.rho.eval(x)?.sqrt()) };
        Ok(integrate(f, a, b, Tolerance::default())?)
    }

    /// Sampled check of `σ > 0`, `ρ > 0`, `V ≥ 0` and `σ(0+) = 0`.
    /// At most one violation is reported per quantity (the first sample).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        match self.sigma.eval(POLE_PROBE) {
            Ok(v) if v.abs() < POLE_BOUND => {}
            Ok(v) => out.push(Violation {
                r: POLE_PROBE,
                quantity: Quantity::PoleLimit,
                value: v,
                message: format!("sigma({POLE_PROBE:e}) = {v} is not below {POLE_BOUND:e}"),
            }),
            Err(e) => out.push(Violation {
                r: POLE_PROBE,
                quantity: Quantity::PoleLimit,
                value: f64::NAN,
                message: e.to_string(),
            }),
        }
        let samples = mesh::geometric(self.r_validate_max * 1e-10, self.r_validate_max, VALIDATION_SAMPLES);
        let checks: [(Quantity, &RadialExpr, bool, &str); 3] = [
            (Quantity::Sigma, &self.sigma, true, "sigma must be positive"),
            (Quantity::Rho, &self.rho, true, "rho must be positive"),
            (
                Quantity::Potential,
                &self.potential,
                false,
                "potential must be nonnegative",
            ),
        ];
        for (quantity, expr, strict, what) in checks {
            for &r in &samples {
                let bad = match expr.eval_log(r) {
                    Ok(v) if v.sign > 0 || (!strict && v.sign == 0) => None,
                    Ok(v) => Some((v.to_f64(), format!("{what}; got {} at r = {r}", v.to_f64()))),
                    Err(e) => Some((f64::NAN, e.to_string())),
                };
                if let Some((value, message)) = bad {
                    out.push(Violation {
                        r,
                        quantity,
                        value,
                        message,
                    });
                    break;
                }
            }
        }
        out
    }
}

/// Tabulated `v_w / s` on a grid, obtained by integrating
/// `F' = w - (s'/s) F` together with its running integral.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    pub mix: Mix,
    /// `v_w(r_j) / s(r_j)`.
    pub ratio: Vec<f64>,
    /// `∫_{r_0}^{r_j} v_w / s`.
    pub partial: Vec<f64>,
    /// `ln v_w(r_j)`.
    pub ln_volume: Vec<f64>,
    /// `w(r_j)`.
    pub weight: Vec<f64>,
    /// First node whose values left the `f64` range.
    pub saturated_from: Option<usize>,
}

/// Step-size control for the ratio ODE; only matters where `A` has a
/// growing mode, which this system does not, so it is generous.
const RATIO_GROWTH_STEP: f64 = 0.25;

pub fn ratio_table(m: &ManifoldSpec, mix: Mix, radii: &[f64]) -> Result<RatioTable, GeometryError> {
    assert!(radii.len() >= 2 && radii[0] > 0.0);
    let mut failure: Option<DomainError> = None;
    let mut coeffs = |r: f64| -> Option<Linear2> {
        let lam = m.mean_curvature(r).and_then(|l| m.weight(mix, r).map(|w| (l, w)));
        match lam {
            Ok((lam, w)) => Some(Linear2 {
                a: [[-lam, 0.0], [1.0, 0.0]],
                b: [w, 0.0],
            }),
            Err(e) => {
                failure.get_or_insert(e);
                None
            }
        }
    };
    let r0 = radii[0];
    let start = coeffs(r0);
    let f0 = match start {
        Some(l) => l.b[0] * r0 / (1.0 - r0 * l.a[0][0]),
        None => return Err(failure.take().expect("failure recorded").into()),
    };
    let states = integrate_on_grid(&mut coeffs, radii, [f0, 0.0], RATIO_GROWTH_STEP);
    if let Some(e) = failure {
        return Err(e.into());
    }
    let mut ratio = Vec::with_capacity(radii.len());
    let mut partial = Vec::with_capacity(radii.len());
    let mut ln_volume = Vec::with_capacity(radii.len());
    let mut weight = Vec::with_capacity(radii.len());
    let mut saturated_from = None;
    for (j, (&r, st)) in radii.iter().zip(states).enumerate() {
        weight.push(m.weight(mix, r)?);
        match st {
            Some([f, p]) => {
                // The scheme can undershoot zero by rounding when w ≪ λF.
                let f = f.max(0.0);
                ratio.push(f);
                partial.push(p.max(partial.last().copied().unwrap_or(0.0)));
                ln_volume.push(if f > 0.0 {
                    f.ln() + m.ln_surface(r)?
                } else {
                    f64::NEG_INFINITY
                });
            }
            None => {
                saturated_from.get_or_insert(j);
                ratio.push(f64::INFINITY);
                partial.push(f64::INFINITY);
                ln_volume.push(f64::INFINITY);
            }
        }
    }
    Ok(RatioTable {
        mix,
        ratio,
        partial,
        ln_volume,
        weight,
        saturated_from,
    })
}

/// `ln v_w(r_j)` by direct log-space quadrature cell by cell; an
/// independent route to [`RatioTable::ln_volume`].
pub fn cumulative_ln_volume(m: &ManifoldSpec, mix: Mix, radii: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let mut out = Vec::with_capacity(radii.len());
    let mut acc = if radii[0] > R_LO {
        m.ln_volume_between(mix, R_LO, radii[0])?
    } else {
        f64::NEG_INFINITY
    };
    out.push(acc);
    for w in radii.windows(2) {
        let cell = m.ln_volume_between(mix, w[0], w[1])?;
        acc = ln_add(acc, cell);
        out.push(acc);
    }
    Ok(out)
}

fn ln_add(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    if y == f64::NEG_INFINITY {
        return x;
    }
    let hi = x.max(y);
    hi + ((x - hi).exp() + (y - hi).exp()).ln()
}

/// Immutable tabulation of the geometry on a reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryCache {
    pub omega_n: f64,
    pub radii: Vec<f64>,
    pub ln_surface: Vec<f64>,
    /// `∫₀^{r_j} √ρ`.
    pub distance: Vec<f64>,
    pub sqrt_rho: Vec<f64>,
    pub rho: RatioTable,
    pub total: RatioTable,
}

impl GeometryCache {
    /// Log-spaced tabulation on `[R_LO, r_max]`.
    pub fn new(m: &ManifoldSpec, r_max: f64, nodes: usize) -> Result<Self, GeometryError> {
        Self::on_grid(m, mesh::geometric(R_LO, r_max, nodes.max(2)))
    }

    pub fn on_grid(m: &ManifoldSpec, radii: Vec<f64>) -> Result<Self, GeometryError> {
        assert!(radii.windows(2).all(|w| w[0] < w[1]) && radii[0] > 0.0);
        let ln_surface = radii.iter().map(|&r| m.ln_surface(r)).collect::<Result<Vec<_>, _>>()?;
        let sqrt_rho = radii
            .iter()
            .map(|&r| m.rho.eval(r).map(f64::sqrt))
            .collect::<Result<Vec<_>, _>>()?;
        let mut distance = Vec::with_capacity(radii.len());
        let mut d = m.intrinsic_distance(radii[0])?;
        distance.push(d);
        for w in radii.windows(2) {
            if d.is_finite() {
                d += m.distance_between(w[0], w[1])?;
            }
            distance.push(d);
        }
        let rho = ratio_table(m, Mix::RHO, &radii)?;
        let total = ratio_table(m, Mix::RHO_PLUS_V, &radii)?;
        Ok(GeometryCache {
            omega_n: m.omega(),
            radii,
            ln_surface,
            distance,
            sqrt_rho,
            rho,
            total,
        })
    }

    pub fn r_max(&self) -> f64 {
        *self.radii.last().expect("nonempty grid")
    }

    /// Hermite interpolation of `d_ρ(0, r)` inside the table.
    pub fn distance_at(&self, r: f64) -> f64 {
        let j = mesh::locate(&self.radii, r);
        mesh::hermite(
            self.radii[j],
            self.radii[j + 1],
            self.distance[j],
            self.distance[j + 1],
            self.sqrt_rho[j],
            self.sqrt_rho[j + 1],
            r,
        )
    }

    /// Hermite interpolation of `ln v_w(r)`, slopes `(ln v)' = w / F`.
    pub fn ln_volume_at(table: &RatioTable, radii: &[f64], r: f64) -> f64 {
        let j = mesh::locate(radii, r);
        let (y0, y1) = (table.ln_volume[j], table.ln_volume[j + 1]);
        if !(y0.is_finite() && y1.is_finite()) {
            return if r <= radii[j] { y0 } else { y1 };
        }
        let d0 = table.weight[j] / table.ratio[j];
        let d1 = table.weight[j + 1] / table.ratio[j + 1];
        if !(d0.is_finite() && d1.is_finite()) {
            let t = (r - radii[j]) / (radii[j + 1] - radii[j]);
            return y0 + t * (y1 - y0);
        }
        mesh::hermite(radii[j], radii[j + 1], y0, y1, d0, d1, r)
    }

    /// Radius at which `d_ρ(0, ·)` equals `d`, or `None` outside the table.
    pub fn invert_distance(&self, d: f64) -> Option<f64> {
        let n = self.distance.len();
        if !(d >= self.distance[0] && d <= self.distance[n - 1]) {
            return None;
        }
        let j = mesh::locate(&self.distance, d);
        let (mut lo, mut hi) = (self.radii[j], self.radii[j + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.distance_at(mid) < d {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: u32, sigma: &str, rho: &str, v: &str) -> ManifoldSpec {
        ManifoldSpec::parse(n, sigma, rho, v).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn omega_matches_sphere_areas() {
        assert!(close(omega_n(2), 2.0 * PI, 1e-14));
        assert!(close(omega_n(3), 4.0 * PI, 1e-14));
        assert!(close(omega_n(4), 2.0 * PI * PI, 1e-14));
        assert!(close(omega_n(5), 8.0 * PI * PI / 3.0, 1e-14));
    }

    #[test]
    fn surface_area_examples() {
        assert!(close(
            spec(2, "r", "1", "0").surface_area(1.0).unwrap(),
            2.0 * PI,
            1e-12
        ));
        assert!(close(
            spec(3, "r", "1", "0").surface_area(2.0).unwrap(),
            16.0 * PI,
            1e-12
        ));
        assert!(spec(2, "r", "1", "0").surface_area(1e-300).unwrap() < 1e-290);
    }

    #[test]
    fn volume_examples() {
        let e2 = spec(2, "r", "1", "0");
        assert!(close(e2.volume(Weight::Rho, 2.0).unwrap().value, 4.0 * PI, 1e-9));
        assert_eq!(e2.volume(Weight::PotentialOnly, 5.0).unwrap().value, 0.0);
        let e3 = spec(3, "r", "1", "0");
        assert!(close(e3.volume(Weight::Rho, 1.0).unwrap().value, 4.0 * PI / 3.0, 1e-9));
    }

    #[test]
    fn volume_overflow_is_flagged() {
        let m = spec(2, "r*exp(r^3)", "1", "0");
        let v = m.volume(Weight::Rho, 12.0).unwrap();
        assert!(v.overflow);
        assert!(v.ln_value > 1700.0 && v.ln_value.is_finite());
    }

    #[test]
    fn distance_examples() {
        assert!(close(
            spec(2, "r", "1", "0").intrinsic_distance(7.0).unwrap(),
            7.0,
            1e-9
        ));
        assert!(close(
            spec(2, "r", "4", "0").intrinsic_distance(3.0).unwrap(),
            6.0,
            1e-9
        ));
        assert!(close(
            spec(2, "r", "r^2", "0").intrinsic_distance(2.0).unwrap(),
            2.0,
            1e-9
        ));
    }

    #[test]
    fn validate_examples() {
        assert!(spec(2, "r", "1", "0").validate().is_empty());
        let neg = spec(2, "r", "1", "-1").validate();
        assert_eq!(neg.len(), 1);
        assert_eq!(neg[0].quantity, Quantity::Potential);
        assert_eq!(neg[0].value, -1.0);
        let flat = spec(2, "1", "1", "0").validate();
        assert_eq!(flat.len(), 1);
        assert_eq!(flat[0].quantity, Quantity::PoleLimit);
    }

    #[test]
    fn volume_is_monotone_and_additive() {
        let m = spec(3, "sinh(r)", "1 + r^2", "exp(-r) + r");
        let radii = mesh::geometric(0.01, 20.0, 200);
        let mut last = [0.0f64; 3];
        for &r in &radii {
            let vr = m.volume(Weight::Rho, r).unwrap().value;
            let vv = m.volume(Weight::PotentialOnly, r).unwrap().value;
            let vt = m.volume(Weight::RhoPlusV, r).unwrap().value;
            for (k, v) in [vr, vv, vt].into_iter().enumerate() {
                assert!(v >= last[k]);
                last[k] = v;
            }
            assert!(close(vt, vr + vv, 1e-9), "{r}: {vt} vs {}", vr + vv);
        }
    }

    #[test]
    fn distance_dominates_constant_lower_bound() {
        let m = spec(2, "r", "2 + tanh(r)^2", "0");
        for &r in &mesh::geometric(0.1, 50.0, 40) {
            assert!(m.intrinsic_distance(r).unwrap() >= 2f64.sqrt() * r * (1.0 - 1e-9));
        }
    }

    #[test]
    fn ratio_table_matches_quadrature_route() {
        // Strongly superexponential scaling: both routes in log space.
        let m = spec(2, "r*exp(r^3)", "1", "exp(2*r)");
        let radii = mesh::geometric(1e-6, 30.0, 800);
        for mix in [Mix::RHO, Mix::RHO_PLUS_V] {
            let t = ratio_table(&m, mix, &radii).unwrap();
            let q = cumulative_ln_volume(&m, mix, &radii).unwrap();
            for j in (0..radii.len()).step_by(7) {
                assert!(
                    (t.ln_volume[j] - q[j]).abs() < 1e-6 * q[j].abs().max(1.0),
                    "r = {}: {} vs {}",
                    radii[j],
                    t.ln_volume[j],
                    q[j]
                );
            }
        }
    }

    #[test]
    fn ratio_table_euclidean_is_half_r() {
        let m = spec(2, "r", "1", "0");
        let radii = mesh::geometric(1e-12, 1e6, 4096);
        let t = ratio_table(&m, Mix::RHO, &radii).unwrap();
        for (j, &r) in radii.iter().enumerate() {
            assert!(close(t.ratio[j], r / 2.0, 1e-9), "{r}");
        }
        let last = radii.len() - 1;
        let exact = (radii[last].powi(2) - radii[0].powi(2)) / 4.0;
        assert!(close(t.partial[last], exact, 1e-9));
    }

    #[test]
    fn cache_tables_are_monotone() {
        let m = spec(2, "r*exp(r^3)", "exp(-r^2) + 1", "exp(8*r)");
        let c = GeometryCache::new(&m, 1e3, 1024).unwrap();
        for t in [&c.rho, &c.total] {
            assert!(t.partial.windows(2).all(|w| w[0] <= w[1]));
            assert!(t.ln_volume.windows(2).all(|w| w[0] <= w[1]));
        }
        assert!(c.distance.windows(2).all(|w| w[0] <= w[1]));
        assert!(c.total.saturated_from.is_some());
    }

    #[test]
    fn cache_interpolation_and_inversion() {
        let m = spec(3, "r", "1 + r^2", "0");
        let c = GeometryCache::new(&m, 100.0, 2048).unwrap();
        for &r in &[0.37, 2.2, 17.5, 88.0] {
            let d = m.intrinsic_distance(r).unwrap();
            assert!(close(c.distance_at(r), d, 1e-8));
            assert!(close(c.invert_distance(d).unwrap(), r, 1e-8));
            let lv = m.volume(Weight::Rho, r).unwrap().ln_value;
            assert!((GeometryCache::ln_volume_at(&c.rho, &c.radii, r) - lv).abs() < 1e-8);
        }
        assert!(c.invert_distance(1e9).is_none());
    }
}
