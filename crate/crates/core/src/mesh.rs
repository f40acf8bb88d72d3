//! Radial sample grids.

/// `n` geometrically spaced points from `lo` to `hi` inclusive.
pub fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let step = (hi / lo).ln() / (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| lo * (step * i as f64).exp()).collect();
    out[0] = lo;
    out[n - 1] = hi;
    out
}

/// Grid that contains every horizon `anchor · 2^k`, `k = 0..=doublings`,
/// as an exact node. Geometric from `lo` to `anchor` with `inner` points,
/// then `per_doubling` geometric cells inside each doubling.
///
/// Returns the grid and the index of each horizon.
pub fn doubling(lo: f64, anchor: f64, doublings: usize, inner: usize, per_doubling: usize) -> (Vec<f64>, Vec<usize>) {
    assert!(per_doubling >= 1);
    let mut out = geometric(lo, anchor, inner.max(2));
    let mut marks = vec![out.len() - 1];
    let ratio = 2f64.powf(1.0 / per_doubling as f64);
    for k in 0..doublings {
        let base = anchor * 2f64.powi(k as i32);
        for j in 1..per_doubling {
            out.push(base * ratio.powi(j as i32));
        }
        out.push(base * 2.0);
        marks.push(out.len() - 1);
    }
    (out, marks)
}

/// Index `j` with `grid[j] <= x < grid[j + 1]`, clamped to a valid cell.
pub fn locate(grid: &[f64], x: f64) -> usize {
    let n = grid.len();
    debug_assert!(n >= 2);
    match grid.partition_point(|&g| g <= x) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    }
}

/// Cubic Hermite interpolation on `[x0, x1]` from values and slopes.
pub fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_grid_hits_horizons() {
        let (g, marks) = doubling(1e-12, 1.0, 5, 100, 16);
        for (k, &i) in marks.iter().enumerate() {
            assert_eq!(g[i], 2f64.powi(k as i32));
        }
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn hermite_is_exact_for_cubics() {
        let f = |x: f64| x * x * x - 2.0 * x + 1.0;
        let df = |x: f64| 3.0 * x * x - 2.0;
        let v = hermite(0.5, 2.0, f(0.5), f(2.0), df(0.5), df(2.0), 1.3);
        assert!((v - f(1.3)).abs() < 1e-13);
    }

    #[test]
    fn locate_clamps() {
        let g = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(locate(&g, -1.0), 0);
        assert_eq!(locate(&g, 1.5), 1);
        assert_eq!(locate(&g, 3.0), 2);
        assert_eq!(locate(&g, 9.0), 2);
    }
}
