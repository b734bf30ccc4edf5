//! Dense per-cell collision operators over the velocity nodes.

use nalgebra::{DMatrix, DVector};

use crate::scattering::Kernel;
use crate::velocity::VelocityGrid;

/// `L φ(v) = a(v) φ(v) − Σ_w w_w k(v,w) φ(w)`, its μ-adjoint and the gain
/// part `K`, for one cell.
#[derive(Debug, Clone)]
pub struct CollisionMatrices {
    pub l: DMatrix<f64>,
    pub l_adj: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub rate: Vec<f64>,
    /// Effective kernel table, row-major `k[v * nv + w]`.
    pub table: Vec<f64>,
    weights: Vec<f64>,
}

pub fn assemble(table: &[f64], scale: f64, velocities: &VelocityGrid) -> CollisionMatrices {
    let nv = velocities.len();
    let w = velocities.weights();
    let table: Vec<f64> = table.iter().map(|x| scale * x).collect();
    let k = DMatrix::from_fn(nv, nv, |v, u| w[u] * table[v * nv + u]);
    let rate: Vec<f64> = (0..nv).map(|v| k.row(v).sum()).collect();
    let mut l = -k.clone();
    for v in 0..nv {
        l[(v, v)] += rate[v];
    }
    // adjoint from the transposed kernel and its own column integrals
    let k_adj = DMatrix::from_fn(nv, nv, |v, u| w[u] * table[u * nv + v]);
    let mut l_adj = -k_adj.clone();
    for v in 0..nv {
        l_adj[(v, v)] += k_adj.row(v).sum();
    }
    CollisionMatrices {
        l,
        l_adj,
        k,
        rate,
        table,
        weights: w.to_vec(),
    }
}

pub fn assemble_cell(kernel: &Kernel, cell: usize, eps: f64, velocities: &VelocityGrid) -> CollisionMatrices {
    assemble(kernel.cell_base(cell), kernel.scale(cell, eps), velocities)
}

/// `½ Σ_v Σ_w w_v w_w k(v,w) (φ(v) − φ(w))²`.
pub fn double_sum(table: &[f64], weights: &[f64], phi: &[f64]) -> f64 {
    let nv = weights.len();
    let mut s = 0.0;
    for v in 0..nv {
        for u in 0..nv {
            let d = phi[v] - phi[u];
            s += weights[v] * weights[u] * table[v * nv + u] * d * d;
        }
    }
    0.5 * s
}

impl CollisionMatrices {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        (&self.l * DVector::from_column_slice(phi)).as_slice().to_vec()
    }

    pub fn apply_adj(&self, phi: &[f64]) -> Vec<f64> {
        (&self.l_adj * DVector::from_column_slice(phi)).as_slice().to_vec()
    }

    /// `(⟨φ, Lφ⟩_μ, ½ΣΣ w_v w_w k (φ(v)−φ(w))²)`.
    pub fn dirichlet_form(&self, phi: &[f64]) -> (f64, f64) {
        let lphi = self.apply(phi);
        let inner = self
            .weights
            .iter()
            .zip(phi)
            .zip(&lphi)
            .map(|((w, p), q)| w * p * q)
            .sum();
        (inner, double_sum(&self.table, &self.weights, phi))
    }

    /// Operator norm of `K` on `L²(μ)`.
    pub fn gain_norm(&self) -> f64 {
        let sq: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        let n = self.len();
        let sym = DMatrix::from_fn(n, n, |v, u| sq[v] * self.k[(v, u)] / sq[u]);
        sym.singular_values().max()
    }

    pub fn max_rate(&self) -> f64 {
        self.rate.iter().copied().fold(0.0, f64::max)
    }
}
