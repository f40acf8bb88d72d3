//! Three-stage Radau IIA integrator for linear 2×2 systems `y' = A(r) y + b(r)`.
//!
//! Both radial problems in this crate (the eigen equation and the
//! volume/surface ratio) are linear and become very stiff where σ grows
//! superexponentially, so an L-stable implicit scheme is used. Each step is a
//! 6×6 linear solve.

/// Coefficients of `y' = A y + b` at one radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear2 {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Linear2 {
    fn is_finite(&self) -> bool {
        self.a.iter().flatten().chain(self.b.iter()).all(|x| x.is_finite())
    }

    /// Largest nonnegative real part among the eigenvalues of `A`.
    pub fn growth_rate(&self) -> f64 {
        let [[p, q], [r, s]] = self.a;
        let tr = p + s;
        let det = p * s - q * r;
        let disc = tr * tr - 4.0 * det;
        if disc < 0.0 {
            return (0.5 * tr).max(0.0);
        }
        let root = disc.sqrt();
        // Stable form of the larger root.
        let big = if tr >= 0.0 {
            0.5 * (tr + root)
        } else {
            2.0 * det / (tr - root)
        };
        big.max(0.0)
    }
}

const SQ6: f64 = 2.449_489_742_783_178;

fn tableau() -> ([f64; 3], [[f64; 3]; 3]) {
    let c = [(4.0 - SQ6) / 10.0, (4.0 + SQ6) / 10.0, 1.0];
    let a = [
        [
            (88.0 - 7.0 * SQ6) / 360.0,
            (296.0 - 169.0 * SQ6) / 1800.0,
            (-2.0 + 3.0 * SQ6) / 225.0,
        ],
        [
            (296.0 + 169.0 * SQ6) / 1800.0,
            (88.0 + 7.0 * SQ6) / 360.0,
            (-2.0 - 3.0 * SQ6) / 225.0,
        ],
        [(16.0 - SQ6) / 36.0, (16.0 + SQ6) / 36.0, 1.0 / 9.0],
    ];
    (c, a)
}

/// Gaussian elimination with row equilibration and partial pivoting.
/// Returns `None` for a numerically singular system.
pub(crate) fn solve_dense<const N: usize>(mut m: [[f64; N]; N], mut rhs: [f64; N]) -> Option<[f64; N]> {
    for i in 0..N {
        let scale = m[i].iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return None;
        }
        for x in m[i].iter_mut() {
            *x /= scale;
        }
        rhs[i] /= scale;
    }
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..N {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for k in col..N {
                    m[row][k] -= f * m[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        let mut acc = rhs[i];
        for k in i + 1..N {
            acc -= m[i][k] * x[k];
        }
        x[i] = acc / m[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Outcome of a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Ok([f64; 2]),
    /// Coefficients or state left the floating-point range.
    NonFinite,
}

/// One Radau IIA step of size `h` from `(r, y)`.
pub fn radau_step<F>(coeffs: &mut F, r: f64, h: f64, y: [f64; 2]) -> StepOutcome
where
    F: FnMut(f64) -> Option<Linear2>,
{
    let (c, a) = tableau();
    let mut stage = [Linear2 {
        a: [[0.0; 2]; 2],
        b: [0.0; 2],
    }; 3];
    for (k, st) in stage.iter_mut().enumerate() {
        // The last node is r + h exactly, which keeps grid nodes on the grid.
        let rk = if k == 2 { r + h } else { r + c[k] * h };
        match coeffs(rk) {
            Some(l) if l.is_finite() => *st = l,
            _ => return StepOutcome::NonFinite,
        }
    }
    let mut m = [[0.0; 6]; 6];
    let mut rhs = [0.0; 6];
    for i in 0..3 {
        for d in 0..2 {
            let row = 2 * i + d;
            rhs[row] = y[d];
            for j in 0..3 {
                rhs[row] += h * a[i][j] * stage[j].b[d];
                for e in 0..2 {
                    let col = 2 * j + e;
                    m[row][col] -= h * a[i][j] * stage[j].a[d][e];
                }
            }
            m[row][row] += 1.0;
        }
    }
    match solve_dense(m, rhs) {
        Some(z) => StepOutcome::Ok([z[4], z[5]]),
        None => StepOutcome::NonFinite,
    }
}

/// Integrate across the grid `nodes`, subdividing each cell so that
/// `h · growth_rate ≤ max_growth_step`. Returns the state at every node;
/// after the first non-finite step the remaining entries are `None`.
pub fn integrate_on_grid<F>(mut coeffs: F, nodes: &[f64], y0: [f64; 2], max_growth_step: f64) -> Vec<Option<[f64; 2]>>
where
    F: FnMut(f64) -> Option<Linear2>,
{
    let mut out = Vec::with_capacity(nodes.len());
    if nodes.is_empty() {
        return out;
    }
    out.push(Some(y0));
    let mut y = y0;
    let mut dead = false;
    for w in nodes.windows(2) {
        if dead {
            out.push(None);
            continue;
        }
        let (r0, r1) = (w[0], w[1]);
        let g0 = coeffs(r0).map(|l| l.growth_rate()).unwrap_or(f64::INFINITY);
        let g1 = coeffs(r1).map(|l| l.growth_rate()).unwrap_or(f64::INFINITY);
        let g = g0.max(g1);
        if !g.is_finite() {
            dead = true;
            out.push(None);
            continue;
        }
        let sub = ((r1 - r0) * g / max_growth_step).ceil().clamp(1.0, 1e6) as usize;
        let h = (r1 - r0) / sub as f64;
        let mut r = r0;
        for k in 0..sub {
            let step = if k + 1 == sub { r1 - r } else { h };
            match radau_step(&mut coeffs, r, step, y) {
                StepOutcome::Ok(next) if next.iter().all(|v| v.is_finite()) => y = next,
                _ => {
                    dead = true;
                    break;
                }
            }
            r += step;
        }
        out.push(if dead { None } else { Some(y) });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_solver_handles_badly_scaled_rows() {
        let m = [[1e20, 1.0, 0.0], [1.0, 1e-20, 2.0], [0.0, 3.0, 1.0]];
        let x_true = [1.0, -2.0, 0.5];
        let mut rhs = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                rhs[i] += m[i][j] * x_true[j];
            }
        }
        let x = solve_dense(m, rhs).unwrap();
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-10, "{x:?}");
        }
    }

    #[test]
    fn exponential_growth_is_fifth_order_accurate() {
        // y1' = y2, y2' = y1 with y(0) = (1, 0) gives cosh, sinh.
        let coeffs = |_r: f64| {
            Some(Linear2 {
                a: [[0.0, 1.0], [1.0, 0.0]],
                b: [0.0; 2],
            })
        };
        let err = |n: usize| {
            let nodes: Vec<f64> = (0..=n).map(|i| 5.0 * i as f64 / n as f64).collect();
            let ys = integrate_on_grid(coeffs, &nodes, [1.0, 0.0], f64::INFINITY);
            let y = ys.last().unwrap().unwrap();
            (y[0] - 5f64.cosh()).abs() / 5f64.cosh()
        };
        let (e1, e2) = (err(20), err(40));
        assert!(e2 < 1e-7, "{e2}");
        let order = (e1 / e2).log2();
        assert!(order > 4.5, "observed order {order}");
    }

    #[test]
    fn stiff_decay_is_damped_not_amplified() {
        // F' = w - λF with λ = 1e8: F tracks w/λ.
        let coeffs = |_r: f64| {
            Some(Linear2 {
                a: [[-1e8, 0.0], [1.0, 0.0]],
                b: [1.0, 0.0],
            })
        };
        let nodes = [0.0, 0.5, 1.0];
        let ys = integrate_on_grid(coeffs, &nodes, [0.0, 0.0], 0.25);
        let y = ys[2].unwrap();
        assert!((y[0] - 1e-8).abs() < 1e-14);
        assert!((y[1] - 1e-8).abs() < 1e-12);
    }

    #[test]
    fn overflow_stops_integration() {
        let coeffs = |_r: f64| {
            Some(Linear2 {
                a: [[0.0, 1.0], [1e4, 0.0]],
                b: [0.0; 2],
            })
        };
        let nodes: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let ys = integrate_on_grid(coeffs, &nodes, [1.0, 0.0], 0.25);
        assert!(ys[1].is_some());
        assert!(ys.last().unwrap().is_none());
    }
}
