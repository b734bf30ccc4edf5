//! Discrete velocity measures.
//!
//! A [`VelocityGrid`] is a finite quadrature standing in for the probability
//! measure over velocities. All collision and transport operators act
//! pointwise on its nodes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Named quadrature families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuadratureSpec {
    /// Nodes `{+1, -1}` with weight one half each.
    #[serde(rename = "two_point_1d")]
    TwoPoint1d,
    /// `count` equispaced unit vectors in the plane, offset by half a step
    /// from the axes.
    UniformCircle { count: usize },
    /// `{±e1, ±e2}` with weight one quarter each.
    FourPointAxes,
    /// Tensor product over `dim` axes of the symmetric 1D set
    /// `{±s_i}` carrying weight `w_i / 2` each. `weights` must sum to one.
    TensorSymmetric {
        dim: usize,
        speeds: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Gauss-Legendre on `[-1, 1]` for the uniform measure (1D, `count` even).
    GaussLegendre { count: usize },
    /// Gauss-Legendre in the polar cosine times equispaced azimuth on the
    /// unit sphere (3D). Both counts even.
    SphereProduct { polar: usize, azimuth: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    dim: usize,
    /// Node components, node-major: `nodes[k * dim + i]`.
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibilityTolerances {
    pub weight_sum: f64,
    pub mean: f64,
    /// Smallest eigenvalue of S must exceed this.
    pub definiteness: f64,
    pub require_no_zero: bool,
}

impl Default for AdmissibilityTolerances {
    fn default() -> Self {
        Self {
            weight_sum: 1e-12,
            mean: 1e-12,
            definiteness: 1e-12,
            require_no_zero: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub name: &'static str,
    pub passed: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub entries: Vec<CheckEntry>,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl VelocityGrid {
    /// Wraps explicit nodes and weights. Only structural properties are
    /// enforced here (shape, positive weights, distinct nodes); moment
    /// hypotheses are left to [`VelocityGrid::check_admissibility`].
    pub fn from_nodes(dim: usize, nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidArgument(format!(
                "velocity dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} nodes but {} weights",
                nodes.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weights must be strictly positive, got {w}"
            )));
        }
        let mut flat = Vec::with_capacity(nodes.len() * dim);
        for node in &nodes {
            if node.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "node {node:?} does not have {dim} components"
                )));
            }
            flat.extend_from_slice(node);
        }
        for i in 0..nodes.len() {
            for j in 0..i {
                if nodes[i] == nodes[j] {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate velocity node {:?}",
                        nodes[i]
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            nodes: flat,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks(self.dim)
    }

    /// Weighted mean `⟨φ⟩` of a function sampled on the nodes.
    pub fn average(&self, phi: &[f64]) -> f64 {
        self.weights.iter().zip(phi).map(|(w, p)| w * p).sum()
    }

    /// Weighted inner product `⟨φ ψ⟩`.
    pub fn inner(&self, phi: &[f64], psi: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(phi.iter().zip(psi))
            .map(|(w, (p, q))| w * p * q)
            .sum()
    }

    pub fn norm(&self, phi: &[f64]) -> f64 {
        self.inner(phi, phi).sqrt()
    }

    /// Velocity component `i` sampled on every node.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.nodes().map(|v| v[i]).collect()
    }

    /// `⟨|v|²⟩`.
    pub fn mean_square_speed(&self) -> f64 {
        self.nodes()
            .zip(&self.weights)
            .map(|(v, w)| w * v.iter().map(|c| c * c).sum::<f64>())
            .sum()
    }

    pub fn moments(&self) -> Moments {
        let n = self.dim;
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for (v, &w) in self.nodes().zip(&self.weights) {
            for i in 0..n {
                mean[i] += w * v[i];
                for j in 0..n {
                    second[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        let beta = SymmetricEigen::new(second.clone()).eigenvalues.min();
        Moments { mean, second, beta }
    }

    pub fn check_admissibility(&self, tol: &AdmissibilityTolerances) -> AdmissibilityReport {
        let m = self.moments();
        let weight_residual = (self.weights.iter().sum::<f64>() - 1.0).abs();
        let mean_residual = m.mean.amax();
        let zero_count = self.nodes().filter(|v| v.iter().all(|c| *c == 0.0)).count();
        let mut entries = vec![
            CheckEntry {
                name: "weight_normalization",
                passed: weight_residual <= tol.weight_sum,
                residual: weight_residual,
            },
            CheckEntry {
                name: "mean_zero",
                passed: mean_residual <= tol.mean,
                residual: mean_residual,
            },
            CheckEntry {
                name: "second_moment_positive_definite",
                passed: m.beta > tol.definiteness,
                residual: m.beta,
            },
        ];
        if tol.require_no_zero {
            entries.push(CheckEntry {
                name: "no_zero_velocity",
                passed: zero_count == 0,
                residual: zero_count as f64,
            });
        }
        AdmissibilityReport { entries }
    }

    pub fn has_zero_node(&self) -> bool {
        self.nodes().any(|v| v.iter().all(|c| *c == 0.0))
    }
}

pub fn build_quadrature(spec: &QuadratureSpec) -> Result<VelocityGrid> {
    let grid = match spec {
        QuadratureSpec::TwoPoint1d => VelocityGrid::from_nodes(1, vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5])?,
        QuadratureSpec::FourPointAxes => VelocityGrid::from_nodes(
            2,
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
            vec![0.25; 4],
        )?,
        QuadratureSpec::UniformCircle { count } => uniform_circle(*count)?,
        QuadratureSpec::TensorSymmetric { dim, speeds, weights } => tensor_symmetric(*dim, speeds, weights)?,
        QuadratureSpec::GaussLegendre { count } => {
            if *count < 2 || count % 2 != 0 {
                return Err(Error::Admissibility(format!(
                    "gauss_legendre needs an even count >= 2, got {count}"
                )));
            }
            let (x, w) = gauss_legendre_half(count / 2);
            tensor_symmetric(1, &x, &w)?
        }
        QuadratureSpec::SphereProduct { polar, azimuth } => sphere_product(*polar, *azimuth)?,
    };
    let m = grid.moments();
    if !(m.beta > 1e-12) {
        return Err(Error::Admissibility(format!(
            "second moment matrix is singular (smallest eigenvalue {:e})",
            m.beta
        )));
    }
    Ok(grid)
}

fn uniform_circle(count: usize) -> Result<VelocityGrid> {
    if count < 3 {
        return Err(Error::Admissibility(format!(
            "uniform_circle needs at least 3 nodes, got {count}"
        )));
    }
    let mut nodes = Vec::with_capacity(count);
    if count.is_multiple_of(2) {
        let half = count / 2;
        let first: Vec<Vec<f64>> = (0..half)
            .map(|k| {
                let theta = 2.0 * PI * (k as f64 + 0.5) / count as f64;
                vec![theta.cos(), theta.sin()]
            })
            .collect();
        nodes.extend(first.iter().cloned());
        nodes.extend(first.iter().map(|v| vec![-v[0], -v[1]]));
    } else {
        for k in 0..count {
            let theta = 2.0 * PI * (k as f64 + 0.5) / count as f64;
            nodes.push(vec![theta.cos(), theta.sin()]);
        }
    }
    VelocityGrid::from_nodes(2, nodes, vec![1.0 / count as f64; count])
}

fn tensor_symmetric(dim: usize, speeds: &[f64], weights: &[f64]) -> Result<VelocityGrid> {
    if speeds.is_empty() || speeds.len() != weights.len() {
        return Err(Error::Admissibility(
            "tensor_symmetric needs matching, non-empty speeds and weights".into(),
        ));
    }
    if speeds.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Admissibility(
            "tensor_symmetric speeds must be strictly positive".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Admissibility(format!(
            "tensor_symmetric weights must sum to 1, got {total}"
        )));
    }
    // 1D symmetric set
    let mut axis: Vec<(f64, f64)> = Vec::with_capacity(2 * speeds.len());
    for (&s, &w) in speeds.iter().zip(weights) {
        axis.push((s, 0.5 * w));
        axis.push((-s, 0.5 * w));
    }
    let mut nodes = vec![Vec::new()];
    let mut node_weights = vec![1.0];
    for _ in 0..dim {
        let mut next_nodes = Vec::with_capacity(nodes.len() * axis.len());
        let mut next_weights = Vec::with_capacity(nodes.len() * axis.len());
        for (node, w) in nodes.iter().zip(&node_weights) {
            for &(s, ws) in &axis {
                let mut n = node.clone();
                n.push(s);
                next_nodes.push(n);
                next_weights.push(w * ws);
            }
        }
        nodes = next_nodes;
        node_weights = next_weights;
    }
    VelocityGrid::from_nodes(dim, nodes, node_weights)
}

fn sphere_product(polar: usize, azimuth: usize) -> Result<VelocityGrid> {
    if polar < 2 || !polar.is_multiple_of(2) || azimuth < 4 || !azimuth.is_multiple_of(2) {
        return Err(Error::Admissibility(format!(
            "sphere_product needs even polar >= 2 and even azimuth >= 4, got ({polar}, {azimuth})"
        )));
    }
    let (mu_pos, w_pos) = gauss_legendre_half(polar / 2);
    let mut nodes = Vec::with_capacity(polar * azimuth);
    let mut weights = Vec::with_capacity(polar * azimuth);
    let half_az = azimuth / 2;
    for (&mu, &wm) in mu_pos.iter().zip(&w_pos) {
        let s = (1.0 - mu * mu).sqrt();
        let upper: Vec<[f64; 3]> = (0..half_az)
            .map(|j| {
                let phi = 2.0 * PI * (j as f64 + 0.5) / azimuth as f64;
                [s * phi.cos(), s * phi.sin(), mu]
            })
            .collect();
        // Point reflection v -> -v keeps the mean exactly zero.
        for v in &upper {
            for sign in [1.0, -1.0] {
                for (a, b) in [(1.0, 1.0), (-1.0, -1.0)] {
                    // (x, y, z) and (-x, -y, z) pairs on each hemisphere
                    nodes.push(vec![a * v[0] * sign, b * v[1] * sign, sign * v[2]]);
                    weights.push(0.5 * wm / azimuth as f64);
                }
            }
        }
    }
    VelocityGrid::from_nodes(3, nodes, weights)
}

/// Positive Gauss-Legendre nodes on `[-1, 1]` (there are `half` of them)
/// with weights normalized so that the full symmetric rule sums to one
/// after the ± split. Returned weights sum to one.
pub fn gauss_legendre_half(half: usize) -> (Vec<f64>, Vec<f64>) {
    let n = 2 * half;
    let mut x = Vec::with_capacity(half);
    let mut w = Vec::with_capacity(half);
    for i in 0..half {
        // Chebyshev-like initial guess for the i-th largest root
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, t);
        dp = if d != 0.0 { d } else { dp };
        x.push(t);
        // Standard weight 2/((1-t²)P'²), halved for the probability measure,
        // then doubled because the ± pair is folded into one entry.
        w.push(2.0 / ((1.0 - t * t) * dp * dp));
    }
    let total: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= total;
    }
    (x, w)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
