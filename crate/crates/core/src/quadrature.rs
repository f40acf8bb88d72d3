//! Adaptive 15-point Gauss–Kronrod quadrature.
//!
//! Two flavours share the same rule: [`integrate`] works on ordinary values,
//! [`integrate_log`] takes the *logarithm* of a nonnegative integrand and
//! returns the logarithm of the integral, rescaling every panel by its own
//! maximum so that integrands like `exp(r^3)` never overflow.

use thiserror::Error;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for XGK[1], XGK[3], XGK[5] and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

pub const MAX_INTERVALS: usize = 4000;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rel: 1e-9, abs: 1e-12 }
    }
}

#[derive(Debug, Error)]
pub enum QuadratureError<E> {
    #[error("integrand failed: {0}")]
    Integrand(E),
    #[error(
        "no convergence after {intervals} subintervals; worst subinterval [{worst_a}, {worst_b}] \
         (estimate {estimate}, error {error})"
    )]
    NoConvergence {
        intervals: usize,
        worst_a: f64,
        worst_b: f64,
        estimate: f64,
        error: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn rescale_error(err: f64, res_abs: f64, res_asc: f64) -> f64 {
    let mut e = err.abs();
    if res_asc != 0.0 && e != 0.0 {
        let scale = (200.0 * e / res_asc).powf(1.5);
        e = if scale < 1.0 { res_asc * scale } else { res_asc };
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        e = e.max(50.0 * f64::EPSILON * res_abs);
    }
    e
}

fn kronrod_panel<F, E>(f: &mut F, a: f64, b: f64) -> Result<Panel, E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut res_k = fc * WGK[7];
    let mut res_g = fc * WG[3];
    let mut res_abs = res_k.abs();
    let mut fv = [0.0; 14];
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx)?;
        let f2 = f(c + dx)?;
        fv[2 * j] = f1;
        fv[2 * j + 1] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((fv[2 * j] - mean).abs() + (fv[2 * j + 1] - mean).abs());
    }
    let value = res_k * h;
    let error = rescale_error((res_k - res_g) * h, res_abs * h.abs(), res_asc * h.abs());
    Ok(Panel { a, b, value, error })
}

/// Globally adaptive integration of `f` over `[a, b]`.
pub fn integrate<F, E>(mut f: F, a: f64, b: f64, tol: Tolerance) -> Result<f64, QuadratureError<E>>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    if a == b {
        return Ok(0.0);
    }
    let first = kronrod_panel(&mut f, a, b).map_err(QuadratureError::Integrand)?;
    let mut panels = vec![first];
    loop {
        let total: f64 = panels.iter().map(|p| p.value).sum();
        let err: f64 = panels.iter().map(|p| p.error).sum();
        if !total.is_finite() {
            return Ok(total);
        }
        if err <= tol.abs.max(tol.rel * total.abs()) {
            return Ok(total);
        }
        let (idx, worst) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, p)| (i, *p))
            .expect("nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        if panels.len() >= MAX_INTERVALS || mid <= worst.a || mid >= worst.b {
            return Err(QuadratureError::NoConvergence {
                intervals: panels.len(),
                worst_a: worst.a,
                worst_b: worst.b,
                estimate: total,
                error: err,
            });
        }
        let left = kronrod_panel(&mut f, worst.a, mid).map_err(QuadratureError::Integrand)?;
        let right = kronrod_panel(&mut f, mid, worst.b).map_err(QuadratureError::Integrand)?;
        panels[idx] = left;
        panels.push(right);
    }
}

/// Result of a log-space integration.
#[derive(Debug, Clone, Copy)]
pub struct LogIntegral {
    /// `ln ∫ exp(g)`; `-inf` for a vanishing integrand.
    pub ln_value: f64,
    /// `ln` of the estimated absolute error.
    pub ln_error: f64,
    /// `false` when some panel shrank to floating-point resolution before the
    /// tolerance was met (integrand sharper than representable in `x`).
    pub resolved: bool,
    /// Panel carrying the largest error estimate.
    pub worst_interval: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct LogPanel {
    a: f64,
    b: f64,
    ln_value: f64,
    ln_error: f64,
    frozen: bool,
}

fn log_add(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    if y == f64::NEG_INFINITY {
        return x;
    }
    let m = x.max(y);
    m + ((x - m).exp() + (y - m).exp()).ln()
}

fn log_panel<F, E>(g: &mut F, a: f64, b: f64) -> Result<LogPanel, E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut lv = [0.0; 15];
    lv[14] = g(c)?;
    for j in 0..7 {
        let dx = h * XGK[j];
        lv[2 * j] = g(c - dx)?;
        lv[2 * j + 1] = g(c + dx)?;
    }
    let m = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(LogPanel {
            a,
            b,
            ln_value: f64::NEG_INFINITY,
            ln_error: f64::NEG_INFINITY,
            frozen: false,
        });
    }
    if m == f64::INFINITY {
        return Ok(LogPanel {
            a,
            b,
            ln_value: f64::INFINITY,
            ln_error: f64::NEG_INFINITY,
            frozen: true,
        });
    }
    let v: Vec<f64> = lv.iter().map(|x| (x - m).exp()).collect();
    let mut res_k = WGK[7] * v[14];
    let mut res_g = WG[3] * v[14];
    for j in 0..7 {
        let pair = v[2 * j] + v[2 * j + 1];
        res_k += WGK[j] * pair;
        if j % 2 == 1 {
            res_g += WG[j / 2] * pair;
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[7] * (v[14] - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((v[2 * j] - mean).abs() + (v[2 * j + 1] - mean).abs());
    }
    let err = rescale_error((res_k - res_g) * h, res_k * h, res_asc * h);
    Ok(LogPanel {
        a,
        b,
        ln_value: m + (res_k * h).ln(),
        ln_error: m + err.ln(),
        frozen: false,
    })
}

/// Adaptive integration of `exp(g(x))` over `[a, b]`, entirely in log space.
///
/// Panels are never split below ~64 ulp of their position; if that happens
/// the result is still returned but flagged `resolved = false`.
pub fn integrate_log<F, E>(mut g: F, a: f64, b: f64, tol: Tolerance) -> Result<LogIntegral, E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    if a >= b {
        return Ok(LogIntegral {
            ln_value: f64::NEG_INFINITY,
            ln_error: f64::NEG_INFINITY,
            resolved: true,
            worst_interval: (a, b),
        });
    }
    let mut panels = vec![log_panel(&mut g, a, b)?];
    let ln_rel = tol.rel.ln();
    let ln_abs = tol.abs.ln();
    let mut resolved = true;
    loop {
        let total = panels.iter().fold(f64::NEG_INFINITY, |acc, p| log_add(acc, p.ln_value));
        let err = panels.iter().fold(f64::NEG_INFINITY, |acc, p| log_add(acc, p.ln_error));
        let worst_any = panels
            .iter()
            .max_by(|x, y| x.ln_error.total_cmp(&y.ln_error))
            .map(|p| (p.a, p.b))
            .unwrap_or((a, b));
        let done = |resolved| LogIntegral {
            ln_value: total,
            ln_error: err,
            resolved,
            worst_interval: worst_any,
        };
        if total == f64::NEG_INFINITY || total == f64::INFINITY || err <= (ln_rel + total).max(ln_abs) {
            return Ok(done(resolved));
        }
        let pick = panels
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.frozen)
            .max_by(|x, y| x.1.ln_error.total_cmp(&y.1.ln_error))
            .map(|(i, p)| (i, *p));
        let Some((idx, worst)) = pick else {
            return Ok(done(false));
        };
        if panels.len() >= MAX_INTERVALS {
            return Ok(done(false));
        }
        let width = worst.b - worst.a;
        let scale = worst.a.abs().max(worst.b.abs()).max(f64::MIN_POSITIVE);
        if width <= 64.0 * f64::EPSILON * scale {
            panels[idx].frozen = true;
            resolved = false;
            continue;
        }
        let mid = 0.5 * (worst.a + worst.b);
        let left = log_panel(&mut g, worst.a, mid)?;
        let right = log_panel(&mut g, mid, worst.b)?;
        panels[idx] = left;
        panels.push(right);
    }
}
