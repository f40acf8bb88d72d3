//! Three-method verdict, cross-checks and potential construction.

use std::fmt;
use std::thread;

use thiserror::Error;

use crate::eigen::{khasminskii_verdict, BoundednessPolicy, EigenError, KhasminskiiReport};
use crate::expr::RadialExpr;
use crate::manifold::{GeometryCache, GeometryError, ManifoldSpec, Violation};
use crate::semigroup::{exhaustion_sweep_runs, SemigroupError, SemigroupRun, SweepPoint, SweepSettings};
use crate::tail::{generalized_volume_test, sturm_reading, sturm_test, TailClass, TailError, TailPolicy, TailVerdict};

pub use crate::eigen::KhasminskiiVerdict as Verdict;

/// Plateau deficit below which the semigroup reads as conservative.
pub const CONSERVED_DEFICIT: f64 = 1e-6;
/// Plateau deficit above which heat is lost at infinity.
pub const LOSS_DEFICIT: f64 = 1e-3;
/// Allowed change of the deficit between the last two radii, relative.
pub const PLATEAU_VARIATION: f64 = 0.1;
/// Lower bound on the truncation tolerance `ε_R`.
pub const EPSILON_FLOOR: f64 = 1e-10;
/// Relative agreement required between the volume and time-change tests.
pub const TIMECHANGE_TOL: f64 = 1e-9;
/// Exponents tried by [`build_conservative_potential`].
pub const EXPONENT_LADDER: [u32; 3] = [4, 5, 6];
/// Nodes of the distance table used by the Sturm-convex construction.
const KAPPA_NODES: usize = 4096;

impl Verdict {
    /// Process exit status for this verdict.
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::ConservativeGeneralized => 0,
            Verdict::NotConservative => 1,
            Verdict::Inconclusive => 2,
        }
    }

    pub fn from_tail(class: TailClass) -> Verdict {
        match class {
            TailClass::Divergent => Verdict::ConservativeGeneralized,
            TailClass::Convergent => Verdict::NotConservative,
            TailClass::Inconclusive => Verdict::Inconclusive,
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid manifold: {}", summarize(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Tail(#[from] TailError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("outside the hypothesis of the construction: {0}")]
    OutsideHypothesis(String),
    #[error("no exponent in {ladder:?} made the volume test diverge; last verdict {last} ({note})")]
    EscalationExhausted {
        ladder: Vec<u32>,
        last: TailClass,
        note: String,
    },
    #[error("analysis thread panicked")]
    Panicked,
}

fn summarize(v: &[Violation]) -> String {
    v.iter().map(|x| x.message.as_str()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisParams {
    /// Lower limit of the volume integrals.
    pub a: f64,
    pub alpha: f64,
    pub t_probe: f64,
    pub radii: Vec<f64>,
    pub tail: TailPolicy,
    pub boundedness: BoundednessPolicy,
    pub sweep: SweepSettings,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            a: 1.0,
            alpha: 1.0,
            t_probe: 1.0,
            radii: vec![4.0, 6.0, 8.0, 10.0],
            tail: TailPolicy::default(),
            boundedness: BoundednessPolicy::default(),
            sweep: SweepSettings::default(),
        }
    }
}

/// What the exhaustion sweep says about `H_{t_probe}` at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub t_probe: f64,
    /// `H_{t_probe}(r_0)` on the largest ball.
    pub h_plateau: f64,
    /// `1 − H_{t_probe}(r_0)` on the largest ball.
    pub deficit: f64,
    pub epsilon_r: f64,
    pub sweep: Vec<SweepPoint>,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flag {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Flag {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Flag {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DichotomyClass {
    /// `1 − H ≤ ε_R` at every probe point.
    Conserved,
    /// `H < 1` at every probe point.
    Lossy,
    Mixed,
}

impl fmt::Display for DichotomyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DichotomyClass::Conserved => "conserved",
            DichotomyClass::Lossy => "lossy",
            DichotomyClass::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DichotomyOutcome {
    pub class: DichotomyClass,
    pub epsilon_r: f64,
    /// Probe points `(t, r)` that break the nearer class.
    pub offending: Vec<(f64, f64)>,
}

impl DichotomyOutcome {
    pub fn passed(&self) -> bool {
        self.class != DichotomyClass::Mixed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservationReport {
    pub spec_digest: String,
    pub volume_verdict: Option<TailVerdict>,
    pub khasminskii: Option<KhasminskiiReport>,
    pub semigroup_plateau: Option<Plateau>,
    pub timechange_verdict: Option<TailVerdict>,
    /// Sufficient test on the time-changed spec; informational.
    pub sturm: Option<TailVerdict>,
    pub dichotomy: Option<DichotomyOutcome>,
    pub consistency: Vec<Flag>,
    pub final_verdict: Verdict,
    pub disagreements: Vec<String>,
    pub errors: Vec<String>,
}

pub fn spec_digest(m: &ManifoldSpec) -> String {
    format!(
        "n = {}; sigma = {}; rho = {}; potential = {}",
        m.n, m.sigma, m.rho, m.potential
    )
}

/// Probe points of a run: recorded times `t ≥ 10 dt` and nodes `r ≤ R/2`.
fn probe_points(run: &SemigroupRun) -> (Vec<usize>, Vec<usize>) {
    let t_min = 10.0 * run.dt * (1.0 - 1e-9);
    let times = (0..run.times.len()).filter(|&k| run.times[k] >= t_min).collect();
    let half = 0.5 * run.grid.radius();
    let nodes = (0..run.grid.nodes.len())
        .filter(|&j| run.grid.nodes[j] <= half)
        .collect();
    (times, nodes)
}

/// Domain-truncation tolerance from two nested runs: the largest drop of
/// `1 − H` between `prev` and `last` at shared probe points of `last`.
pub fn truncation_tolerance(prev: &SemigroupRun, last: &SemigroupRun) -> f64 {
    let (times, nodes) = probe_points(last);
    let scale = last.grid.radius();
    let mut eps: f64 = 0.0;
    for &k in &times {
        let t = last.times[k];
        let Some(kp) = prev.times.iter().position(|&s| (s - t).abs() <= 1e-9 * t.max(1.0)) else {
            continue;
        };
        for &j in &nodes {
            let r = last.grid.nodes[j];
            let Some(jp) = prev.grid.nodes.iter().position(|&x| (x - r).abs() <= 1e-12 * scale) else {
                continue;
            };
            if jp + 1 >= prev.grid.nodes.len() {
                continue;
            }
            eps = eps.max(prev.deficit[kp][jp] - last.deficit[k][j]);
        }
    }
    eps.max(EPSILON_FLOOR)
}

/// Whether `H` on the probe points is uniformly `1` up to `ε_R` or
/// uniformly below `1`.
pub fn dichotomy_check(run: &SemigroupRun, epsilon_r: f64) -> DichotomyOutcome {
    let (times, nodes) = probe_points(run);
    let mut above = Vec::new();
    let mut flat = Vec::new();
    for &k in &times {
        for &j in &nodes {
            let d = run.deficit[k][j];
            let at = (run.times[k], run.grid.nodes[j]);
            if d > epsilon_r {
                above.push(at);
            }
            if !(d > 0.0) {
                flat.push(at);
            }
        }
    }
    let (class, offending) = if above.is_empty() {
        (DichotomyClass::Conserved, Vec::new())
    } else if flat.is_empty() {
        (DichotomyClass::Lossy, Vec::new())
    } else if flat.len() <= above.len() {
        (DichotomyClass::Mixed, flat)
    } else {
        (DichotomyClass::Mixed, above)
    };
    DichotomyOutcome {
        class,
        epsilon_r,
        offending,
    }
}

/// Plateau reading of a sweep, with the dichotomy check on its last run.
pub fn plateau_from_sweep(
    sweep: Vec<SweepPoint>,
    runs: &[SemigroupRun],
    t_probe: f64,
) -> (Plateau, Option<DichotomyOutcome>) {
    let last = *sweep.last().expect("sweep is nonempty");
    let epsilon_r = match runs {
        [.., prev, last] => truncation_tolerance(prev, last),
        _ => EPSILON_FLOOR,
    };
    let d = last.deficit_origin;
    let (verdict, note) = match sweep.len() {
        1 => (Verdict::Inconclusive, "a single radius gives no plateau".to_string()),
        n => {
            let prev = sweep[n - 2].deficit_origin;
            let change = (prev - d).abs();
            if d <= CONSERVED_DEFICIT {
                (
                    Verdict::ConservativeGeneralized,
                    format!("deficit {d:.3e} ≤ {CONSERVED_DEFICIT:e}"),
                )
            } else if d > LOSS_DEFICIT && change < PLATEAU_VARIATION * d {
                (
                    Verdict::NotConservative,
                    format!(
                        "deficit {d:.6} stable to {:.2}% between the last two radii",
                        100.0 * change / d
                    ),
                )
            } else {
                (
                    Verdict::Inconclusive,
                    format!("deficit {d:.3e} changed by {change:.3e} between the last two radii"),
                )
            }
        }
    };
    let dichotomy = runs.last().map(|r| dichotomy_check(r, epsilon_r));
    (
        Plateau {
            t_probe,
            h_plateau: last.h_origin,
            deficit: d,
            epsilon_r,
            sweep,
            verdict,
            note,
        },
        dichotomy,
    )
}

fn max_relative_gap(a: &TailVerdict, b: &TailVerdict) -> f64 {
    if a.partial_sums.len() != b.partial_sums.len() {
        return f64::INFINITY;
    }
    a.partial_sums
        .iter()
        .zip(&b.partial_sums)
        .map(|(&(_, x), &(_, y))| {
            if x == y {
                0.0
            } else if x.is_finite() && y.is_finite() {
                (x - y).abs() / x.abs().max(y.abs())
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn join<T>(h: thread::ScopedJoinHandle<'_, T>) -> Result<T, AnalysisError> {
    h.join().map_err(|_| AnalysisError::Panicked)
}

fn agreement(name: &'static str, left: (&str, Verdict), right: (&str, Verdict)) -> Flag {
    let passed = left.1 == right.1 && left.1 != Verdict::Inconclusive;
    Flag::new(
        name,
        passed,
        format!("{} = {}, {} = {}", left.0, left.1, right.0, right.1),
    )
}

/// Run every method on `m` and reduce to one verdict.
pub fn analyze(m: &ManifoldSpec, params: &AnalysisParams) -> Result<ConservationReport, AnalysisError> {
    let violations = m.validate();
    if !violations.is_empty() {
        return Err(AnalysisError::Invalid(violations));
    }
    let changed = m.time_changed();
    let bare = m.without_potential();
    let has_potential = m.potential.as_literal() != Some(0.0);
    let (volume, khas, sweep, timechange, sturm, unperturbed) = thread::scope(|s| {
        let volume = s.spawn(|| generalized_volume_test(m, params.a, &params.tail));
        let khas = s.spawn(|| khasminskii_verdict(m, params.alpha, &params.boundedness));
        let sweep = s.spawn(|| exhaustion_sweep_runs(m, &params.radii, params.t_probe, params.alpha, &params.sweep));
        let timechange = s.spawn(|| generalized_volume_test(&changed, params.a, &params.tail));
        let sturm = s.spawn(|| sturm_test(&changed, &params.tail));
        let unperturbed = has_potential.then(|| s.spawn(|| generalized_volume_test(&bare, params.a, &params.tail)));
        Ok::<_, AnalysisError>((
            join(volume)?,
            join(khas)?,
            join(sweep)?,
            join(timechange)?,
            join(sturm)?,
            unperturbed.map(join).transpose()?,
        ))
    })?;

    let mut errors = Vec::new();
    let mut keep = |label: &str, e: String| errors.push(format!("{label}: {e}"));
    let volume = volume.map_err(|e| keep("volume test", e.to_string())).ok();
    let khas = khas.map_err(|e| keep("khasminskii", e.to_string())).ok();
    let sweep = sweep.map_err(|e| keep("semigroup sweep", e.to_string())).ok();
    let timechange = timechange.map_err(|e| keep("time-change test", e.to_string())).ok();
    let sturm = sturm.map_err(|e| keep("sturm test", e.to_string())).ok();
    let unperturbed = unperturbed.and_then(|r| r.map_err(|e| keep("unperturbed volume test", e.to_string())).ok());

    let (semigroup_plateau, dichotomy) = match sweep {
        Some((points, runs)) => {
            let (p, d) = plateau_from_sweep(points, &runs, params.t_probe);
            (Some(p), d)
        }
        None => (None, None),
    };

    let v_volume = volume.as_ref().map(|v| Verdict::from_tail(v.classification));
    let v_khas = khas.as_ref().map(|k| k.verdict);
    let v_plateau = semigroup_plateau.as_ref().map(|p| p.verdict);
    let v_time = timechange.as_ref().map(|v| Verdict::from_tail(v.classification));

    let mut consistency = Vec::new();
    if let (Some(a), Some(b)) = (&volume, &timechange) {
        let gap = max_relative_gap(a, b);
        consistency.push(Flag::new(
            "volume_timechange",
            a.classification == b.classification && gap <= TIMECHANGE_TOL,
            format!(
                "volume = {}, timechange = {}, max relative gap {gap:.3e}",
                a.classification, b.classification
            ),
        ));
    }
    if let (Some(a), Some(b)) = (v_volume, v_khas) {
        consistency.push(agreement("volume_khasminskii", ("volume", a), ("khasminskii", b)));
    }
    if let (Some(a), Some(b)) = (v_volume, v_plateau) {
        consistency.push(agreement("volume_semigroup", ("volume", a), ("semigroup", b)));
    }
    if let Some(v) = v_volume {
        let flag = match (has_potential, &unperturbed) {
            (false, _) => Flag::new("perturbation", true, "V ≡ 0"),
            (true, Some(u)) if u.classification == TailClass::Divergent => Flag::new(
                "perturbation",
                v != Verdict::NotConservative,
                format!("V = 0 is conservative; with V the volume test gives {v}"),
            ),
            (true, Some(u)) => Flag::new(
                "perturbation",
                true,
                format!("V = 0 gives {}; nothing to check", u.classification),
            ),
            (true, None) => Flag::new("perturbation", false, "unperturbed volume test failed"),
        };
        consistency.push(flag);
    }
    if let (Some(s), Some(v)) = (&sturm, v_time) {
        let passed = s.classification != TailClass::Divergent || v != Verdict::NotConservative;
        consistency.push(Flag::new(
            "sturm",
            passed,
            format!("{}; time-change test gives {v}", sturm_reading(s)),
        ));
    }
    if let Some(d) = &dichotomy {
        let mut detail = format!("class {} with ε_R = {:.3e}", d.class, d.epsilon_r);
        if let Some(&(t, r)) = d.offending.first() {
            detail.push_str(&format!(
                "; {} offending points, first at t = {t}, r = {r}",
                d.offending.len()
            ));
        }
        consistency.push(Flag::new("dichotomy", d.passed(), detail));
    }

    let methods = [
        ("volume", v_volume),
        ("khasminskii", v_khas),
        ("semigroup", v_plateau),
        ("timechange", v_time),
    ];
    let mut disagreements = Vec::new();
    let first = methods.iter().find_map(|(_, v)| *v);
    for (name, v) in methods {
        match v {
            None => disagreements.push(format!("{name}: no verdict")),
            Some(Verdict::Inconclusive) => disagreements.push(format!("{name}: inconclusive")),
            Some(v) if Some(v) != first => disagreements.push(format!("{name}: {v}")),
            _ => {}
        }
    }
    for f in consistency.iter().filter(|f| !f.passed) {
        disagreements.push(format!("flag {} failed: {}", f.name, f.detail));
    }
    let final_verdict = match first {
        Some(v) if disagreements.is_empty() && errors.is_empty() => v,
        _ => Verdict::Inconclusive,
    };
    Ok(ConservationReport {
        spec_digest: spec_digest(m),
        volume_verdict: volume,
        khasminskii: khas,
        semigroup_plateau,
        timechange_verdict: timechange,
        sturm,
        dichotomy,
        consistency,
        final_verdict,
        disagreements,
        errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialStrategy {
    /// `V = f'(r)²` with `f = e^{r^p}` beyond `r = 1`.
    CorollaryRadial,
    /// `V = ρ f'(κ r)²` with `κ r ≥ d_ρ(0, r)` on the distance table.
    SturmConvex,
}

impl fmt::Display for PotentialStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PotentialStrategy::CorollaryRadial => "corollary_radial",
            PotentialStrategy::SturmConvex => "sturm_convex",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialConstruction {
    pub potential: RadialExpr,
    pub exponent: u32,
    /// Volume test with the returned potential.
    pub verdict: TailVerdict,
    /// `(p, classification)` for every exponent tried.
    pub attempts: Vec<(u32, TailClass)>,
}

/// `p² x^{2p−2} e^{2 x^p}` with `x = scale · r`, zero for `x ≤ 1`.
fn squared_slope(p: u32, scale: f64) -> RadialExpr {
    let x = if scale == 1.0 {
        "r".to_string()
    } else {
        format!("({scale:?}*r)")
    };
    let text = format!("{}*{x}^{}*exp(2*{x}^{p})", p * p, 2 * p - 2);
    let right = RadialExpr::parse(&text).expect("generated expression parses");
    RadialExpr::piecewise(1.0 / scale, RadialExpr::constant(0.0), right)
}

/// Smallest `κ` with `d_ρ(0, r) ≤ κ r` on the validation range; errors
/// when `d_ρ` is bounded.
fn distance_slope(m: &ManifoldSpec) -> Result<f64, AnalysisError> {
    let mut r = 1.0;
    let mut d = m.intrinsic_distance(r)?;
    while r < m.r_validate_max {
        let next = 2.0 * r;
        let step = m.distance_between(r, next)?;
        if step <= 1e-12 * d {
            return Err(AnalysisError::OutsideHypothesis(format!(
                "intrinsic distance is bounded (≈ {d:.6} at r = {next:e}), so its balls are not relatively compact"
            )));
        }
        d += step;
        r = next;
    }
    let cache = GeometryCache::new(m, m.r_validate_max, KAPPA_NODES)?;
    let kappa = cache
        .radii
        .iter()
        .zip(&cache.distance)
        .map(|(&r, &d)| d / r)
        .fold(0.0, f64::max);
    Ok(kappa * (1.0 + 1e-9))
}

/// A potential making `m` conservative in the generalized sense, checked
/// by the volume test.
pub fn build_conservative_potential(
    m: &ManifoldSpec,
    strategy: PotentialStrategy,
    policy: &TailPolicy,
) -> Result<PotentialConstruction, AnalysisError> {
    let bare = m.without_potential();
    let violations = bare.validate();
    if !violations.is_empty() {
        return Err(AnalysisError::Invalid(violations));
    }
    let kappa = match strategy {
        PotentialStrategy::CorollaryRadial => 1.0,
        PotentialStrategy::SturmConvex => distance_slope(&bare)?,
    };
    let mut attempts = Vec::new();
    let mut last = None;
    for p in EXPONENT_LADDER {
        let slope = squared_slope(p, kappa);
        let potential = match strategy {
            PotentialStrategy::CorollaryRadial => slope,
            PotentialStrategy::SturmConvex => m.rho.clone().mul(slope),
        };
        let verdict = generalized_volume_test(&bare.with_potential(potential.clone()), 1.0, policy)?;
        attempts.push((p, verdict.classification));
        if verdict.classification == TailClass::Divergent {
            return Ok(PotentialConstruction {
                potential,
                exponent: p,
                verdict,
                attempts,
            });
        }
        last = Some(verdict);
    }
    let last = last.expect("ladder is nonempty");
    Err(AnalysisError::EscalationExhausted {
        ladder: EXPONENT_LADDER.to_vec(),
        last: last.classification,
        note: last.confidence_note,
    })
}
