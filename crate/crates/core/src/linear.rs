//! Restarted GMRES and plain fixed-point iteration for matrix-free
//! operators. Reductions run sequentially in index order so results do not
//! depend on the thread count.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct IterativeSettings {
    pub tolerance: f64,
    pub restart: usize,
    pub max_iterations: usize,
}

impl Default for IterativeSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-13,
            restart: 30,
            max_iterations: 400,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub history: Vec<f64>,
}

/// Solves `A x = b` starting from `x`. `apply(v, out)` writes `A v`.
pub fn gmres<F>(apply: F, b: &[f64], x: &mut [f64], settings: &IterativeSettings) -> Result<SolveStats>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm2(b);
    let mut stats = SolveStats::default();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(stats);
    }
    let m = settings.restart.max(1);
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    loop {
        apply(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm2(&r);
        let rel = beta / bnorm;
        stats.relative_residual = rel;
        stats.history.push(rel);
        if rel <= settings.tolerance {
            return Ok(stats);
        }
        if stats.iterations >= settings.max_iterations {
            return Err(Error::NoConvergence {
                iterations: stats.iterations,
                final_residual: rel,
                history: stats.history,
            });
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        while k < m && stats.iterations < settings.max_iterations {
            apply(&basis[k], &mut w);
            // modified Gram-Schmidt
            for (j, q) in basis.iter().enumerate() {
                let hj = dot(&w, q);
                h[j][k] = hj;
                for i in 0..n {
                    w[i] -= hj * q[i];
                }
            }
            let hn = norm2(&w);
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            if denom == 0.0 {
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            stats.iterations += 1;
            k += 1;
            let est = g[k].abs() / bnorm;
            if est <= 0.1 * settings.tolerance || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // back substitution
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += yj * basis[j][i];
            }
        }
    }
}

/// Iterates `x ← g(x)` until the relative update drops below tolerance.
pub fn fixed_point<G>(step: G, x: &mut Vec<f64>, settings: &IterativeSettings) -> Result<SolveStats>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut stats = SolveStats::default();
    loop {
        let next = step(x);
        let diff: f64 = next
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = norm2(&next).max(f64::MIN_POSITIVE);
        *x = next;
        stats.iterations += 1;
        let rel = diff / scale;
        stats.relative_residual = rel;
        stats.history.push(rel);
        if rel <= settings.tolerance || diff == 0.0 {
            return Ok(stats);
        }
        if stats.iterations >= settings.max_iterations {
            return Err(Error::NoConvergence {
                iterations: stats.iterations,
                final_residual: rel,
                history: stats.history,
            });
        }
    }
}
