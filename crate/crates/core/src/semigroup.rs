//! Finite-volume heat semigroup with potential on Dirichlet balls `B_R`.
//!
//! The radial operator `ρ⁻¹ s⁻¹ (s u')' − (V/ρ) u` is discretized on cells
//! around nodes `0 = r_0 < … < r_M = R`, with `u(r_M) = 0`. All geometric
//! coefficients are assembled in log space, so superexponential `σ` is fine
//! as long as the coefficient *ratios* fit in `f64`.

use std::io;

use thiserror::Error;

use crate::expr::DomainError;
use crate::manifold::{GeometryError, ManifoldSpec, Mix, R_LO};
use crate::table;

pub const MIN_CELLS: usize = 64;
/// Growth ratio of the graded cells next to the pole.
pub const GRADING_RATIO: f64 = 1.05;
/// Width of the innermost cell relative to the bulk spacing.
const INNER_FRACTION: f64 = 1.0 / 16.0;
/// `H` may exceed 1 by at most this much.
pub const UPPER_SLACK: f64 = 1e-8;
/// `|H − (U + W)|` bound.
pub const DUHAMEL_TOL: f64 = 1e-10;
/// `V/ρ` is clipped here; such nodes absorb within one step for any
/// usable `dt`.
pub const V_HAT_CAP: f64 = 1e200;
/// Default cap on stored snapshots per run.
pub const DEFAULT_MAX_SNAPSHOTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SemigroupError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error("coefficient overflow in cell at r = {r}; use a smaller radius")]
    Overflow { r: f64 },
    #[error("singular tridiagonal system at row {row}")]
    Singular { row: usize },
    #[error("invariant violated: {what} at t = {t}, r = {r} (value {value})")]
    Invariant {
        what: &'static str,
        t: f64,
        r: f64,
        value: f64,
    },
    #[error("Crank-Nicolson step {dt} exceeds the stability guard {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("time horizon too short: alpha * t_end = {0} < 20")]
    ShortHorizon(f64),
    #[error("no snapshot data on this run")]
    NoSnapshots,
    #[error("exhaustion not monotone: {quantity} drops from {prev} to {next} between R = {r_prev} and R = {r_next}; refine the grid")]
    NotMonotone {
        quantity: &'static str,
        r_prev: f64,
        r_next: f64,
        prev: f64,
        next: f64,
    },
}

/// One exhaustion domain `B_R`. Vectors indexed by node have `M + 1`
/// entries; cell and face quantities have `M` (the Dirichlet node carries none).
#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    pub nodes: Vec<f64>,
    /// `r_{j+1/2}` for `j = 0..M`.
    pub faces: Vec<f64>,
    /// `ln w_j`, `w_j = ∫_{cell j} ρ s`.
    pub ln_weights: Vec<f64>,
    /// `ln c_{j+1/2}`, `c = s(r_{j+1/2}) / (r_{j+1} − r_j)`.
    pub ln_conductances: Vec<f64>,
    /// `c_{j+1/2} / w_j`.
    pub upper: Vec<f64>,
    /// `c_{j−1/2} / w_j`; zero at the pole.
    pub lower: Vec<f64>,
    /// `V(r_j) / ρ(r_j)`.
    pub v_hat: Vec<f64>,
}

impl RadialGrid {
    /// Index of the Dirichlet node.
    pub fn m(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn radius(&self) -> f64 {
        self.nodes[self.m()]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.ln_weights.iter().map(|x| x.exp()).collect()
    }

    pub fn conductances(&self) -> Vec<f64> {
        self.ln_conductances.iter().map(|x| x.exp()).collect()
    }

    /// `A f` with `f_M` treated as zero.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let m = self.m();
        let mut out = vec![0.0; m + 1];
        for j in 0..m {
            let right = if j + 1 < m { f[j + 1] } else { 0.0 };
            let left = if j > 0 { f[j - 1] } else { f[j] };
            out[j] = self.upper[j] * (right - f[j]) - self.lower[j] * (f[j] - left) - self.v_hat[j] * f[j];
        }
        out
    }

    /// Largest `dt` for which the explicit half of Crank–Nicolson keeps
    /// nonnegative coefficients.
    pub fn crank_nicolson_limit(&self) -> f64 {
        (0..self.m())
            .map(|j| 1.0 / (self.upper[j] + self.lower[j]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Graded cells from the pole up to the bulk spacing, then bulk cells.
/// With `bulk = None` the bulk cells have width exactly `spacing` and the
/// last one absorbs the remainder; otherwise the rest is split evenly.
fn node_positions(r_max: f64, spacing: f64, bulk: Option<usize>) -> Vec<f64> {
    let mut nodes = vec![0.0];
    let mut width = spacing * INNER_FRACTION;
    let mut r = 0.0;
    while width < spacing && r + width < r_max {
        r += width;
        nodes.push(r);
        width = (width * GRADING_RATIO).min(spacing);
    }
    let rest = r_max - r;
    let (cells, h) = match bulk {
        Some(c) => (c.max(1), rest / c.max(1) as f64),
        None => (((rest / spacing).round() as usize).max(1), spacing),
    };
    for k in 1..cells {
        nodes.push(r + k as f64 * h);
    }
    nodes.push(r_max);
    nodes
}

/// Graded cells cover `Σ_k min(q^k/16, 1) ≈ 18.75` bulk spacings.
fn graded_span() -> (usize, f64) {
    let mut width = INNER_FRACTION;
    let mut span = 0.0;
    let mut count = 0;
    while width < 1.0 {
        span += width;
        count += 1;
        width = (width * GRADING_RATIO).min(1.0);
    }
    (count, span)
}

/// Grid on `B_R` with exactly `cells` cells.
pub fn build_grid(m: &ManifoldSpec, r_max: f64, cells: usize) -> Result<RadialGrid, SemigroupError> {
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(SemigroupError::BadArgument(format!(
            "radius must be positive, got {r_max}"
        )));
    }
    if cells < MIN_CELLS {
        return Err(SemigroupError::BadArgument(format!(
            "need at least {MIN_CELLS} cells, got {cells}"
        )));
    }
    let (graded, span) = graded_span();
    let spacing = r_max / (span + (cells - graded) as f64);
    let nodes = node_positions(r_max, spacing, Some(cells - graded));
    debug_assert_eq!(nodes.len(), cells + 1);
    grid_from_nodes(m, nodes)
}

/// Grid on `B_R` with bulk spacing `spacing`; grids for different `R` but
/// the same spacing share their inner nodes.
pub fn build_grid_with_spacing(m: &ManifoldSpec, r_max: f64, spacing: f64) -> Result<RadialGrid, SemigroupError> {
    if !(spacing > 0.0 && spacing < r_max / MIN_CELLS as f64 * 2.0) {
        return Err(SemigroupError::BadArgument(format!(
            "spacing {spacing} too coarse for R = {r_max}"
        )));
    }
    let nodes = node_positions(r_max, spacing, None);
    if nodes.len() < MIN_CELLS + 1 {
        return Err(SemigroupError::BadArgument(format!(
            "spacing {spacing} gives fewer than {MIN_CELLS} cells"
        )));
    }
    grid_from_nodes(m, nodes)
}

fn ln_v_hat(m: &ManifoldSpec, r: f64) -> Result<f64, DomainError> {
    let v = m.potential.eval_log(r)?;
    if v.sign <= 0 {
        return Ok(0.0);
    }
    let rho = m.rho.eval_log(r)?;
    Ok((v.ln_abs - rho.ln_abs).min(V_HAT_CAP.ln()).exp())
}

pub fn grid_from_nodes(m: &ManifoldSpec, nodes: Vec<f64>) -> Result<RadialGrid, SemigroupError> {
    let mm = nodes.len() - 1;
    if !nodes.windows(2).all(|w| w[0] < w[1]) || nodes[0] != 0.0 {
        return Err(SemigroupError::BadArgument("nodes must start at 0 and increase".into()));
    }
    let faces: Vec<f64> = (0..mm).map(|j| 0.5 * (nodes[j] + nodes[j + 1])).collect();
    let mut ln_weights = Vec::with_capacity(mm);
    for j in 0..mm {
        let a = if j == 0 { R_LO } else { faces[j - 1] };
        ln_weights.push(m.ln_volume_between(Mix::RHO, a, faces[j])?);
    }
    let mut ln_conductances = Vec::with_capacity(mm);
    for j in 0..mm {
        ln_conductances.push(m.ln_surface(faces[j])? - (nodes[j + 1] - nodes[j]).ln());
    }
    let mut upper = Vec::with_capacity(mm);
    let mut lower = Vec::with_capacity(mm);
    for j in 0..mm {
        let up = (ln_conductances[j] - ln_weights[j]).exp();
        let lo = if j == 0 {
            0.0
        } else {
            (ln_conductances[j - 1] - ln_weights[j]).exp()
        };
        if !(up.is_finite() && lo.is_finite() && up > 0.0) {
            return Err(SemigroupError::Overflow { r: nodes[j] });
        }
        upper.push(up);
        lower.push(lo);
    }
    let mut v_hat = Vec::with_capacity(mm + 1);
    for &r in &nodes {
        let x = ln_v_hat(m, r.max(R_LO))?;
        if !x.is_finite() {
            return Err(SemigroupError::Overflow { r });
        }
        v_hat.push(x);
    }
    Ok(RadialGrid {
        nodes,
        faces,
        ln_weights,
        ln_conductances,
        upper,
        lower,
        v_hat,
    })
}

/// Prefactored `(I − θ dt A)` for repeated solves.
#[derive(Debug, Clone)]
struct Tridiagonal {
    sub: Vec<f64>,
    c_prime: Vec<f64>,
    inv_denom: Vec<f64>,
}

impl Tridiagonal {
    /// `(shift·I − scale·A)` restricted to the interior rows.
    fn new(grid: &RadialGrid, shift: f64, scale: f64) -> Result<Self, SemigroupError> {
        let m = grid.m();
        let mut sub = vec![0.0; m];
        let mut c_prime = vec![0.0; m];
        let mut inv_denom = vec![0.0; m];
        for j in 0..m {
            let diag = shift + scale * (grid.upper[j] + grid.lower[j] + grid.v_hat[j]);
            let sup = if j + 1 < m { -scale * grid.upper[j] } else { 0.0 };
            sub[j] = if j > 0 { -scale * grid.lower[j] } else { 0.0 };
            let denom = if j == 0 { diag } else { diag - sub[j] * c_prime[j - 1] };
            if !(denom.abs() > 0.0) || !denom.is_finite() {
                return Err(SemigroupError::Singular { row: j });
            }
            inv_denom[j] = 1.0 / denom;
            c_prime[j] = sup * inv_denom[j];
        }
        Ok(Tridiagonal {
            sub,
            c_prime,
            inv_denom,
        })
    }

    /// Solves into `x` (length `M + 1`, last entry set to 0).
    fn solve(&self, rhs: &[f64], x: &mut [f64]) {
        let m = self.c_prime.len();
        let mut prev = 0.0;
        for j in 0..m {
            let d = (rhs[j] - self.sub[j] * prev) * self.inv_denom[j];
            x[j] = d;
            prev = d;
        }
        for j in (0..m.saturating_sub(1)).rev() {
            x[j] -= self.c_prime[j] * x[j + 1];
        }
        x[m] = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stepper {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

/// One implicit Euler step `(I − dt A)⁻¹ (state + dt · source)`.
pub fn step_heat(grid: &RadialGrid, state: &[f64], dt: f64, source: &[f64]) -> Result<Vec<f64>, SemigroupError> {
    let m = grid.m();
    if state.len() != m + 1 || source.len() != m + 1 {
        return Err(SemigroupError::BadArgument(format!(
            "vectors must have {} entries",
            m + 1
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SemigroupError::BadArgument(format!("dt must be positive, got {dt}")));
    }
    let tri = Tridiagonal::new(grid, 1.0, dt)?;
    let rhs: Vec<f64> = (0..=m).map(|j| state[j] + dt * source[j]).collect();
    let mut out = vec![0.0; m + 1];
    tri.solve(&rhs, &mut out);
    Ok(out)
}

/// Time stepper for `u_t = A u + source` sharing one factorization.
struct Evolution<'g> {
    grid: &'g RadialGrid,
    kind: Stepper,
    dt: f64,
    tri: Tridiagonal,
    rhs: Vec<f64>,
}

impl<'g> Evolution<'g> {
    fn new(grid: &'g RadialGrid, dt: f64, kind: Stepper) -> Result<Self, SemigroupError> {
        let theta = match kind {
            Stepper::ImplicitEuler => 1.0,
            Stepper::CrankNicolson => {
                let limit = grid.crank_nicolson_limit();
                if dt > limit {
                    return Err(SemigroupError::StepTooLarge { dt, limit });
                }
                0.5
            }
        };
        Ok(Evolution {
            grid,
            kind,
            dt,
            tri: Tridiagonal::new(grid, 1.0, theta * dt)?,
            rhs: vec![0.0; grid.m() + 1],
        })
    }

    fn step(&mut self, state: &mut [f64], source: Option<&[f64]>) {
        let m = self.grid.m();
        match self.kind {
            Stepper::ImplicitEuler => self.rhs[..=m].copy_from_slice(state),
            Stepper::CrankNicolson => {
                let a = self.grid.apply(state);
                for j in 0..=m {
                    self.rhs[j] = state[j] + 0.5 * self.dt * a[j];
                }
            }
        }
        if let Some(s) = source {
            for j in 0..m {
                self.rhs[j] += self.dt * s[j];
            }
        }
        self.tri.solve(&self.rhs, state);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub stepper: Stepper,
    /// Store every `record_every`-th step; `None` picks a stride that keeps
    /// at most [`DEFAULT_MAX_SNAPSHOTS`] snapshots.
    pub record_every: Option<usize>,
    /// Laplace transforms accumulated at full time resolution.
    pub laplace_alphas: Vec<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            stepper: Stepper::ImplicitEuler,
            record_every: None,
            laplace_alphas: Vec::new(),
        }
    }
}

/// `∫₀^T α e^{−αt} H_t dt + e^{−αT} H_T`, accumulated with the exponential
/// weight integrated exactly against the piecewise-linear interpolant of `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceTransform {
    pub alpha: f64,
    pub values: Vec<f64>,
}

/// Weights `(w_a, w_b)` of `∫_a^b α e^{−αt} ℓ(t) dt` for the linear `ℓ`
/// through `(a, H_a)`, `(b, H_b)`.
fn exp_linear_weights(alpha: f64, a: f64, b: f64) -> (f64, f64) {
    let x = alpha * (b - a);
    let ea = (-alpha * a).exp();
    let total = -ea * (-x).exp_m1();
    let wb = ea * (-(-x).exp_m1() / x - (-x).exp());
    (total - wb, wb)
}

fn accumulate(acc: &mut [f64], alpha: f64, t0: f64, t1: f64, h0: &[f64], h1: &[f64]) {
    let (wa, wb) = exp_linear_weights(alpha, t0, t1);
    for j in 0..acc.len() {
        acc[j] += wa * h0[j] + wb * h1[j];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupRun {
    pub grid: RadialGrid,
    pub dt: f64,
    pub t_end: f64,
    /// Recorded times, starting with 0.
    pub times: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    /// `1 − H` advanced by its own recursion, accurate where `H ≈ 1`.
    pub deficit: Vec<Vec<f64>>,
    /// `1 − H_t(r_0)` at every recorded time.
    pub heat_loss_at_origin: Vec<f64>,
    pub laplace: Vec<LaplaceTransform>,
}

impl SemigroupRun {
    pub fn final_h(&self) -> &[f64] {
        self.h.last().expect("at least the initial snapshot")
    }

    pub fn final_deficit(&self) -> &[f64] {
        self.deficit.last().expect("at least the initial snapshot")
    }

    /// Long format `(t, r, U, W, H)`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        let rows = self.times.iter().enumerate().flat_map(|(k, &t)| {
            self.grid
                .nodes
                .iter()
                .enumerate()
                .map(move |(j, &r)| vec![t, r, self.u[k][j], self.w[k][j], self.h[k][j]])
        });
        table::write_table(out, &["t", "r", "U", "W", "H"], rows)
    }
}

/// `H`, `U`, `W` on `B_R` with `cells` cells up to `t_end`.
pub fn run_h(m: &ManifoldSpec, r_max: f64, cells: usize, t_end: f64, dt: f64) -> Result<SemigroupRun, SemigroupError> {
    let grid = build_grid(m, r_max, cells)?;
    run_h_on(grid, t_end, dt, &RunOptions::default())
}

pub fn run_h_on(grid: RadialGrid, t_end: f64, dt: f64, opts: &RunOptions) -> Result<SemigroupRun, SemigroupError> {
    if !(dt > 0.0 && t_end > 0.0 && dt.is_finite() && t_end.is_finite()) {
        return Err(SemigroupError::BadArgument(format!(
            "need t_end, dt > 0; got {t_end}, {dt}"
        )));
    }
    for &a in &opts.laplace_alphas {
        if !(a > 0.0 && a.is_finite()) {
            return Err(SemigroupError::BadArgument(format!("alpha must be positive, got {a}")));
        }
    }
    let steps = (t_end / dt).round().max(1.0) as usize;
    let stride = opts
        .record_every
        .unwrap_or_else(|| steps.div_ceil(DEFAULT_MAX_SNAPSHOTS))
        .max(1);
    let m = grid.m();
    let mut evo = Evolution::new(&grid, dt, opts.stepper)?;

    let mut u = vec![1.0; m + 1];
    u[m] = 0.0;
    let mut w = vec![0.0; m + 1];
    let mut h = u.clone();
    let mut d = vec![0.0; m + 1];
    d[m] = 1.0;
    // Deficit source: only the last interior row sees the boundary.
    let mut d_source = vec![0.0; m + 1];
    d_source[m - 1] = grid.upper[m - 1];
    let source = grid.v_hat.clone();

    let mut run = SemigroupRun {
        grid: grid.clone(),
        dt,
        t_end: steps as f64 * dt,
        times: vec![0.0],
        h: vec![h.clone()],
        u: vec![u.clone()],
        w: vec![w.clone()],
        deficit: vec![d.clone()],
        heat_loss_at_origin: vec![0.0],
        laplace: opts
            .laplace_alphas
            .iter()
            .map(|&alpha| LaplaceTransform {
                alpha,
                values: vec![0.0; m + 1],
            })
            .collect(),
    };
    let mut h_prev = h.clone();
    for n in 1..=steps {
        let t = n as f64 * dt;
        evo.step(&mut u, None);
        evo.step(&mut w, Some(&source));
        evo.step(&mut h, Some(&source));
        d[m] = 0.0;
        evo.step(&mut d, Some(&d_source));
        d[m] = 1.0;
        for j in 0..m {
            if (h[j] - (u[j] + w[j])).abs() > DUHAMEL_TOL {
                return Err(SemigroupError::Invariant {
                    what: "H != U + W",
                    t,
                    r: grid.nodes[j],
                    value: h[j] - (u[j] + w[j]),
                });
            }
            if h[j] > 1.0 + UPPER_SLACK || h[j] < -UPPER_SLACK {
                return Err(SemigroupError::Invariant {
                    what: "H outside [0, 1]",
                    t,
                    r: grid.nodes[j],
                    value: h[j],
                });
            }
        }
        for lt in run.laplace.iter_mut() {
            accumulate(&mut lt.values, lt.alpha, t - dt, t, &h_prev, &h);
        }
        if n % stride == 0 || n == steps {
            run.times.push(t);
            run.h.push(h.clone());
            run.u.push(u.clone());
            run.w.push(w.clone());
            run.deficit.push(d.clone());
            run.heat_loss_at_origin.push(d[0]);
        }
        h_prev.copy_from_slice(&h);
    }
    let t_final = run.t_end;
    for lt in run.laplace.iter_mut() {
        let tail = (-lt.alpha * t_final).exp();
        for j in 0..=m {
            lt.values[j] += tail * h[j];
        }
    }
    Ok(run)
}

/// `N_α` from `(α − A) N = α + V̂`, Dirichlet at `R`.
pub fn run_n(m: &ManifoldSpec, alpha: f64, r_max: f64, cells: usize) -> Result<Vec<f64>, SemigroupError> {
    let grid = build_grid(m, r_max, cells)?;
    run_n_on(&grid, alpha)
}

pub fn run_n_on(grid: &RadialGrid, alpha: f64) -> Result<Vec<f64>, SemigroupError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SemigroupError::BadArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let m = grid.m();
    let tri = Tridiagonal::new(grid, alpha, 1.0)?;
    let mut rhs: Vec<f64> = grid.v_hat.iter().map(|v| alpha + v).collect();
    rhs[m] = 0.0;
    let mut n = vec![0.0; m + 1];
    tri.solve(&rhs, &mut n);
    for j in 0..=m {
        if !(n[j] >= -UPPER_SLACK && n[j] <= 1.0 + UPPER_SLACK) {
            return Err(SemigroupError::Invariant {
                what: "N outside [0, 1]",
                t: f64::NAN,
                r: grid.nodes[j],
                value: n[j],
            });
        }
    }
    Ok(n)
}

/// `max_j |∫ α e^{−αt} H_t(r_j) dt + e^{−αT} H_T(r_j) − N_α(r_j)|` over
/// nodes `j < M`. Uses the full-resolution accumulator when the run carries
/// one for `alpha`, otherwise the recorded snapshots.
pub fn laplace_consistency(run: &SemigroupRun, n: &[f64], alpha: f64) -> Result<f64, SemigroupError> {
    let m = run.grid.m();
    if n.len() != m + 1 {
        return Err(SemigroupError::BadArgument(format!(
            "N has {} entries, grid has {}",
            n.len(),
            m + 1
        )));
    }
    if alpha * run.t_end < 20.0 {
        return Err(SemigroupError::ShortHorizon(alpha * run.t_end));
    }
    let transform = match run.laplace.iter().find(|l| l.alpha == alpha) {
        Some(l) => l.values.clone(),
        None => laplace_from_snapshots(run, alpha)?,
    };
    Ok((0..m).map(|j| (transform[j] - n[j]).abs()).fold(0.0, f64::max))
}

pub fn laplace_from_snapshots(run: &SemigroupRun, alpha: f64) -> Result<Vec<f64>, SemigroupError> {
    if run.times.len() < 2 {
        return Err(SemigroupError::NoSnapshots);
    }
    let mut acc = vec![0.0; run.grid.m() + 1];
    for k in 1..run.times.len() {
        accumulate(
            &mut acc,
            alpha,
            run.times[k - 1],
            run.times[k],
            &run.h[k - 1],
            &run.h[k],
        );
    }
    let last = run.times.len() - 1;
    let tail = (-alpha * run.times[last]).exp();
    for (a, h) in acc.iter_mut().zip(&run.h[last]) {
        *a += tail * h;
    }
    Ok(acc)
}

/// Smallest eigenvalue of `−A` by inverse iteration.
pub fn principal_eigenvalue(grid: &RadialGrid) -> Result<f64, SemigroupError> {
    let m = grid.m();
    let tri = Tridiagonal::new(grid, 0.0, 1.0)?;
    let w = grid.weights();
    let mut x = vec![1.0; m + 1];
    x[m] = 0.0;
    let mut y = vec![0.0; m + 1];
    let mut lambda = 0.0;
    for _ in 0..500 {
        tri.solve(&x, &mut y);
        // Rayleigh quotient in the w-weighted inner product.
        let num: f64 = (0..m).map(|j| w[j] * x[j] * y[j]).sum();
        let den: f64 = (0..m).map(|j| w[j] * y[j] * y[j]).sum();
        let next = num / den;
        let norm = den.sqrt();
        for j in 0..=m {
            x[j] = y[j] / norm;
        }
        if (next - lambda).abs() < 1e-14 * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    Ok(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub radius: f64,
    pub h_origin: f64,
    pub n_origin: f64,
    /// `1 − H_t(r_0)` from the deficit recursion.
    pub deficit_origin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSettings {
    /// Bulk cell width shared by every radius.
    pub spacing: f64,
    pub dt: f64,
    pub stepper: Stepper,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            spacing: 1.0 / 64.0,
            dt: 1e-3,
            stepper: Stepper::ImplicitEuler,
        }
    }
}

pub fn write_sweep_csv<W: io::Write>(points: &[SweepPoint], out: W) -> io::Result<()> {
    let rows = points.iter().map(|p| vec![p.radius, p.h_origin, p.n_origin]);
    table::write_table(out, &["R", "H_origin", "N_origin"], rows)
}

/// `H_t(r_0)` and `N_α(r_0)` over increasing radii.
pub fn exhaustion_sweep(
    m: &ManifoldSpec,
    radii: &[f64],
    t_probe: f64,
    alpha: f64,
    settings: &SweepSettings,
) -> Result<Vec<SweepPoint>, SemigroupError> {
    let (points, _) = exhaustion_sweep_runs(m, radii, t_probe, alpha, settings)?;
    Ok(points)
}

/// As [`exhaustion_sweep`], also returning the run for each radius.
pub fn exhaustion_sweep_runs(
    m: &ManifoldSpec,
    radii: &[f64],
    t_probe: f64,
    alpha: f64,
    settings: &SweepSettings,
) -> Result<(Vec<SweepPoint>, Vec<SemigroupRun>), SemigroupError> {
    if radii.is_empty() || !radii.windows(2).all(|w| w[0] < w[1]) {
        return Err(SemigroupError::BadArgument(
            "radii must be nonempty and increasing".into(),
        ));
    }
    let opts = RunOptions {
        stepper: settings.stepper,
        record_every: None,
        laplace_alphas: Vec::new(),
    };
    let mut points: Vec<SweepPoint> = Vec::with_capacity(radii.len());
    let mut runs = Vec::with_capacity(radii.len());
    for &r in radii {
        let grid = build_grid_with_spacing(m, r, settings.spacing)?;
        let n = run_n_on(&grid, alpha)?;
        let run = run_h_on(grid, t_probe, settings.dt, &opts)?;
        let p = SweepPoint {
            radius: r,
            h_origin: run.final_h()[0],
            n_origin: n[0],
            deficit_origin: run.final_deficit()[0],
        };
        if let Some(prev) = points.last() {
            for (quantity, a, b) in [("H", prev.h_origin, p.h_origin), ("N", prev.n_origin, p.n_origin)] {
                if b < a - UPPER_SLACK {
                    return Err(SemigroupError::NotMonotone {
                        quantity,
                        r_prev: prev.radius,
                        r_next: r,
                        prev: a,
                        next: b,
                    });
                }
            }
        }
        points.push(p);
        runs.push(run);
    }
    Ok((points, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const J01: f64 = 2.404_825_557_695_773;

    fn spec(n: u32, sigma: &str, rho: &str, v: &str) -> ManifoldSpec {
        ManifoldSpec::parse(n, sigma, rho, v).unwrap()
    }

    #[test]
    fn euclidean_weights_are_annuli() {
        let g = build_grid(&spec(2, "r", "1", "0"), 10.0, 512).unwrap();
        assert_eq!(g.m(), 512);
        let w = g.weights();
        for j in 0..g.m() {
            let outer = g.faces[j];
            let inner = if j == 0 { 0.0 } else { g.faces[j - 1] };
            let exact = PI * (outer * outer - inner * inner);
            assert!((w[j] - exact).abs() < 1e-6 * exact, "cell {j}");
        }
        let ratios: Vec<f64> = g.nodes.windows(3).map(|w| (w[2] - w[1]) / (w[1] - w[0])).collect();
        assert!(ratios.iter().all(|&q| q <= GRADING_RATIO + 1e-9), "{ratios:?}");
    }

    #[test]
    fn zero_potential_has_no_zeroth_order_term() {
        let g = build_grid(&spec(3, "sinh(r)", "1 + r^2", "0"), 5.0, 128).unwrap();
        assert!(g.v_hat.iter().all(|&v| v == 0.0));
        let ones = vec![1.0; g.m() + 1];
        let a1 = g.apply(&ones);
        for j in 0..g.m() - 1 {
            assert!(a1[j].abs() < 1e-9 * (g.upper[j] + g.lower[j]));
        }
    }

    #[test]
    fn huge_potential_is_clipped_and_absorbs() {
        let m = spec(2, "r", "1", "piecewise(1, 0, exp(2*r^4))");
        let g = build_grid(&m, 6.0, 256).unwrap();
        assert!(g.v_hat.iter().all(|&v| v <= V_HAT_CAP * (1.0 + 1e-12)));
        assert!((*g.v_hat.last().unwrap() / V_HAT_CAP - 1.0).abs() < 1e-12);
        let run = run_h_on(g, 0.5, 1e-3, &RunOptions::default()).unwrap();
        assert!(run.final_deficit()[0] < 1e-12);
    }

    #[test]
    fn row_sums_are_nonpositive() {
        let g = build_grid(&spec(2, "r*exp(r^3)", "1", "r^2"), 6.0, 256).unwrap();
        let ones = vec![1.0; g.m() + 1];
        assert!(g.apply(&ones).iter().all(|&x| x <= 1e-12));
    }

    #[test]
    fn principal_eigenvalue_converges_to_disk() {
        let exact = (J01 / 10.0).powi(2);
        let m = spec(2, "r", "1", "0");
        let e64 = principal_eigenvalue(&build_grid(&m, 10.0, 64).unwrap()).unwrap();
        let e128 = principal_eigenvalue(&build_grid(&m, 10.0, 128).unwrap()).unwrap();
        assert!((e128 - exact).abs() < (e64 - exact).abs());
        assert!((e128 - exact).abs() < 1e-2 * exact, "{e128} vs {exact}");
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let g = build_grid(&spec(2, "r", "1", "1"), 3.0, 64).unwrap();
        let z = vec![0.0; 65];
        assert!(step_heat(&g, &z, 0.1, &z).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn maximum_principle_near_boundary() {
        let g = build_grid(&spec(2, "r", "1", "0"), 10.0, 128).unwrap();
        let mut s = vec![1.0; 129];
        s[128] = 0.0;
        let out = step_heat(&g, &s, 1e-2, &vec![0.0; 129]).unwrap();
        assert!(out.iter().all(|&x| (0.0..=1.0 + 1e-15).contains(&x)));
        assert!(out[127] < 1.0);
    }

    #[test]
    fn long_time_decay_matches_dirichlet_eigenvalue() {
        let g = build_grid(&spec(2, "r", "1", "0"), 10.0, 128).unwrap();
        let lambda = principal_eigenvalue(&g).unwrap();
        let exact = (J01 / 10.0).powi(2);
        let dt = 1e-3;
        let mut evo = Evolution::new(&g, dt, Stepper::ImplicitEuler).unwrap();
        let mut x = vec![1.0; 129];
        x[128] = 0.0;
        for _ in 0..40_000 {
            evo.step(&mut x, None);
        }
        let before = x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        evo.step(&mut x, None);
        let after = x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let rate = -(after / before).ln() / dt;
        assert!((rate - exact).abs() < 0.02 * exact, "{rate} vs {exact}");
        assert!((rate - lambda).abs() < 1e-3 * lambda);
    }

    #[test]
    fn zero_potential_gives_w_zero() {
        let run = run_h(&spec(2, "r", "1", "0"), 5.0, 128, 0.5, 1e-2).unwrap();
        for k in 0..run.times.len() {
            assert!(run.w[k].iter().all(|&x| x == 0.0));
            assert_eq!(run.h[k], run.u[k]);
        }
    }

    #[test]
    fn plane_keeps_heat_at_origin() {
        let m = spec(2, "r", "1", "0");
        let run = run_h(&m, 10.0, 512, 0.1, 1e-3).unwrap();
        assert!(run.final_h()[0] >= 1.0 - 1e-6);
        // Doubled-resolution oracle.
        let fine = run_h(&m, 10.0, 1024, 0.1, 5e-4).unwrap();
        assert!((fine.final_h()[0] - run.final_h()[0]).abs() < 1e-6);
    }

    #[test]
    fn unit_potential_restored_by_w() {
        let run = run_h(&spec(2, "r", "1", "1"), 10.0, 512, 1.0, 1e-3).unwrap();
        assert!((run.final_h()[0] - 1.0).abs() < 1e-4);
        // Full-space values e^{-t} and 1 - e^{-t} up to first-order time error.
        assert!((run.u.last().unwrap()[0] - (-1f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn deficit_tracks_one_minus_h() {
        let run = run_h(&spec(2, "r*exp(r^3)", "1", "0"), 4.0, 256, 1.0, 1e-3).unwrap();
        for k in 0..run.times.len() {
            for j in 0..run.grid.m() {
                assert!((run.deficit[k][j] - (1.0 - run.h[k][j])).abs() < 1e-10);
            }
        }
        assert!(run.heat_loss_at_origin.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn heat_content_is_nonincreasing_in_time() {
        let run = run_h(&spec(3, "r", "1 + r^2", "r"), 6.0, 128, 2.0, 1e-2).unwrap();
        for j in 0..=run.grid.m() {
            assert!(run.h.windows(2).all(|w| w[1][j] <= w[0][j] + 1e-14));
        }
    }

    #[test]
    fn resolvent_examples() {
        let m = spec(2, "r", "1", "0");
        let n1 = run_n(&m, 1.0, 5.0, 256).unwrap();
        let n2 = run_n(&m, 1.0, 10.0, 512).unwrap();
        assert!(n1[0] > 0.0 && n1[0] < 1.0);
        assert!(n2[0] > n1[0]);
        let c = run_n(&spec(2, "r", "1", "3"), 1.0, 10.0, 256).unwrap();
        assert!(c.iter().all(|&x| x <= 1.0));
        assert!(c[0] < 1.0 && c[0] > 1.0 - 1e-6);
        let big = run_n(&spec(2, "r", "1", "0"), 1e6, 3.0, 128).unwrap();
        let small = run_n(&spec(2, "r", "1", "0"), 1e3, 3.0, 128).unwrap();
        assert!((1.0 - big[125]) < (1.0 - small[125]));
        assert!((1.0 - big[64]) < 1e-12);
    }

    #[test]
    fn synthetic_laplace_is_exact() {
        let g = build_grid(&spec(2, "r", "1", "0"), 2.0, 64).unwrap();
        let m = g.m();
        let ones = vec![1.0; m + 1];
        let times: Vec<f64> = (0..=2000).map(|k| k as f64 * 0.01).collect();
        let run = SemigroupRun {
            grid: g,
            dt: 0.01,
            t_end: 20.0,
            h: vec![ones.clone(); times.len()],
            u: vec![ones.clone(); times.len()],
            w: vec![vec![0.0; m + 1]; times.len()],
            deficit: vec![vec![0.0; m + 1]; times.len()],
            heat_loss_at_origin: vec![0.0; times.len()],
            times,
            laplace: Vec::new(),
        };
        for alpha in [1.0, 2.0] {
            assert!(laplace_consistency(&run, &ones, alpha).unwrap() < 1e-14);
        }
    }

    #[test]
    fn laplace_accumulator_agrees_with_snapshots() {
        let g = build_grid(&spec(2, "r", "1", "0.5"), 5.0, 128).unwrap();
        let opts = RunOptions {
            record_every: Some(1),
            laplace_alphas: vec![1.0],
            ..RunOptions::default()
        };
        let run = run_h_on(g, 20.0, 1e-2, &opts).unwrap();
        let from_snaps = laplace_from_snapshots(&run, 1.0).unwrap();
        for (a, b) in run.laplace[0].values.iter().zip(&from_snaps) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(matches!(
            laplace_consistency(&run, &from_snaps, 0.5),
            Err(SemigroupError::ShortHorizon(_))
        ));
    }

    #[test]
    fn crank_nicolson_guard() {
        let g = build_grid(&spec(2, "r", "1", "0"), 10.0, 512).unwrap();
        let limit = g.crank_nicolson_limit();
        let opts = RunOptions {
            stepper: Stepper::CrankNicolson,
            ..RunOptions::default()
        };
        assert!(matches!(
            run_h_on(g.clone(), 0.1, 2.0 * limit, &opts),
            Err(SemigroupError::StepTooLarge { .. })
        ));
        let run = run_h_on(g, 0.1, 0.5 * limit, &opts).unwrap();
        assert!(run.final_h()[0] > 1.0 - 1e-6);
    }

    #[test]
    fn sweep_examples() {
        let s = SweepSettings::default();
        let pts = exhaustion_sweep(&spec(2, "r", "1", "0"), &[2.0, 4.0, 8.0], 1.0, 1.0, &s).unwrap();
        assert!((1.0 - pts[2].h_origin) < 1e-5);
        let one = exhaustion_sweep(&spec(2, "r", "1", "0"), &[3.0], 1.0, 1.0, &s).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn nested_grids_share_nodes() {
        let m = spec(2, "r", "1", "0");
        let a = build_grid_with_spacing(&m, 4.0, 1.0 / 64.0).unwrap();
        let b = build_grid_with_spacing(&m, 6.0, 1.0 / 64.0).unwrap();
        for j in 0..a.m() {
            assert!((a.nodes[j] - b.nodes[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_long_format() {
        let run = run_h(&spec(2, "r", "1", "0"), 2.0, 64, 0.02, 1e-2).unwrap();
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,r,U,W,H\r\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 65);
    }
}
