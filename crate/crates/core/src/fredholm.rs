//! Per-cell constrained solves `L b = v`, `L* b* = v` and the diffusion
//! matrix `M_ij = ⟨b*_i v_j⟩`.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::collision::{assemble, CollisionMatrices};
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::scattering::{compute_metrics, Kernel};
use crate::velocity::VelocityGrid;

pub const SOLVE_TOLERANCE: f64 = 1e-10;
pub const IDENTITY_TOLERANCE: f64 = 1e-11;
pub const BOUND_SLACK: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CellFredholmSolution {
    /// `b[i][k]`: component `i` at velocity node `k`.
    pub b: Vec<Vec<f64>>,
    pub b_star: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub residuals_star: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub mean_b_star: Vec<f64>,
}

/// Numerical rank of `L` measured in `L²(μ)`.
pub fn weighted_rank(l: &DMatrix<f64>, weights: &[f64]) -> usize {
    let n = weights.len();
    let sq: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let sym = DMatrix::from_fn(n, n, |v, u| sq[v] * l[(v, u)] / sq[u]);
    let sv = sym.singular_values();
    let top = sv.max();
    sv.iter().filter(|s| **s > 1e-10 * top.max(f64::MIN_POSITIVE)).count()
}

/// Solves `op x = rhs` with `⟨x⟩_μ = 0` through the bordered system
/// `[[op, 1], [wᵀ, 0]]`.
fn bordered_solve(op: &DMatrix<f64>, weights: &[f64], rhs: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = weights.len();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(op);
    for v in 0..n {
        a[(v, n)] = 1.0;
        a[(n, v)] = weights[v];
    }
    let lu = a.lu();
    rhs.iter()
        .map(|r| {
            let mut b = DVector::zeros(n + 1);
            b.rows_mut(0, n).copy_from_slice(r);
            lu.solve(&b).map(|x| x.as_slice()[..n].to_vec())
        })
        .collect()
}

pub fn solve_cell(m: &CollisionMatrices, velocities: &VelocityGrid, cell: usize) -> Result<CellFredholmSolution> {
    let n = velocities.len();
    let w = velocities.weights();
    for (op, _) in [(&m.l, "L"), (&m.l_adj, "L*")] {
        let rank = weighted_rank(op, w);
        if rank != n - 1 {
            return Err(Error::FredholmRank {
                cell,
                rank,
                expected: n - 1,
            });
        }
    }
    let rhs: Vec<Vec<f64>> = (0..velocities.dim()).map(|i| velocities.component(i)).collect();
    let solve = |op: &DMatrix<f64>| {
        bordered_solve(op, w, &rhs).ok_or(Error::CellSolve {
            cell,
            residual: f64::INFINITY,
            tolerance: SOLVE_TOLERANCE,
        })
    };
    let b = solve(&m.l)?;
    let b_star = solve(&m.l_adj)?;
    let residual = |op: &DMatrix<f64>, x: &[f64], r: &[f64]| {
        let lx = op * DVector::from_column_slice(x);
        let diff: Vec<f64> = lx.iter().zip(r).map(|(a, b)| a - b).collect();
        velocities.norm(&diff)
    };
    let mut residuals = Vec::new();
    let mut residuals_star = Vec::new();
    for (i, r) in rhs.iter().enumerate() {
        let scale = velocities.norm(r);
        let res = residual(&m.l, &b[i], r);
        let res_star = residual(&m.l_adj, &b_star[i], r);
        for value in [res, res_star] {
            if !(value <= SOLVE_TOLERANCE * scale) {
                return Err(Error::CellSolve {
                    cell,
                    residual: value,
                    tolerance: SOLVE_TOLERANCE * scale,
                });
            }
        }
        residuals.push(res);
        residuals_star.push(res_star);
    }
    let mean_b = b.iter().map(|x| velocities.average(x)).collect();
    let mean_b_star = b_star.iter().map(|x| velocities.average(x)).collect();
    Ok(CellFredholmSolution {
        b,
        b_star,
        residuals,
        residuals_star,
        mean_b,
        mean_b_star,
    })
}

/// `(M, max_ij |⟨b*_i v_j⟩ − ⟨v_i b_j⟩|)`.
pub fn diffusion_matrix(sol: &CellFredholmSolution, velocities: &VelocityGrid) -> (DMatrix<f64>, f64) {
    let dim = velocities.dim();
    let comps: Vec<Vec<f64>> = (0..dim).map(|i| velocities.component(i)).collect();
    let m = DMatrix::from_fn(dim, dim, |i, j| velocities.inner(&sol.b_star[i], &comps[j]));
    let dual = DMatrix::from_fn(dim, dim, |i, j| velocities.inner(&comps[i], &sol.b[j]));
    (m.clone(), (m - dual).amax())
}

pub fn symmetric_part_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

#[derive(Debug, Clone)]
pub struct DiffusionField {
    dim: usize,
    solutions: Vec<CellFredholmSolution>,
    matrices: Vec<DMatrix<f64>>,
    /// Solution slot per cell, `None` on inclusions.
    slot: Vec<Option<usize>>,
    pub symmetric: bool,
    pub coercivity_observed: f64,
    pub max_eigenvalue: f64,
    pub max_asymmetry: f64,
    pub max_duality_residual: f64,
    pub c_k: f64,
    pub beta: f64,
}

impl DiffusionField {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self, cell: usize) -> Option<&DMatrix<f64>> {
        self.slot[cell].map(|s| &self.matrices[s])
    }

    pub fn solution(&self, cell: usize) -> Option<&CellFredholmSolution> {
        self.slot[cell].map(|s| &self.solutions[s])
    }

    pub fn num_cells(&self) -> usize {
        self.slot.len()
    }
}

/// Bound checks on one cell's solution against global constants.
fn check_bounds(
    sol: &CellFredholmSolution,
    m: &DMatrix<f64>,
    dual: f64,
    velocities: &VelocityGrid,
    c_k: f64,
    beta: f64,
    cell: usize,
) -> Result<()> {
    let dim = velocities.dim();
    let norms: Vec<f64> = (0..dim).map(|i| velocities.norm(&velocities.component(i))).collect();
    let scale = m.amax().max(1.0);
    for i in 0..dim {
        let mean = sol.mean_b[i].abs().max(sol.mean_b_star[i].abs());
        if mean > IDENTITY_TOLERANCE * velocities.norm(&sol.b[i]).max(1.0) {
            return Err(Error::BoundViolation(format!("cell {cell}: mean of b_{i} is {mean:e}")));
        }
        let nb = velocities.norm(&sol.b_star[i]);
        if nb > 2.0 * c_k * norms[i] + BOUND_SLACK {
            return Err(Error::BoundViolation(format!(
                "cell {cell}: |b*_{i}| = {nb:e} exceeds 2 C_K |v_{i}| = {:e}",
                2.0 * c_k * norms[i]
            )));
        }
        for j in 0..dim {
            let bound = 2.0 * c_k * norms[i] * norms[j];
            if m[(i, j)].abs() > bound + BOUND_SLACK {
                return Err(Error::BoundViolation(format!(
                    "cell {cell}: |M_{i}{j}| = {:e} exceeds {bound:e}",
                    m[(i, j)].abs()
                )));
            }
        }
    }
    if dual > IDENTITY_TOLERANCE * scale {
        return Err(Error::BoundViolation(format!("cell {cell}: duality residual {dual:e}")));
    }
    let lmin = symmetric_part_min_eigenvalue(m);
    let lower = if c_k.is_finite() { beta / (2.0 * c_k) } else { 0.0 };
    if lmin < lower - BOUND_SLACK {
        return Err(Error::BoundViolation(format!(
            "cell {cell}: smallest eigenvalue {lmin:e} of the symmetric part is below beta/(2 C_K) = {lower:e}"
        )));
    }
    Ok(())
}

pub fn assemble_field(kernel: &Kernel, geom: &Geometry, velocities: &VelocityGrid) -> Result<DiffusionField> {
    let metrics = compute_metrics(kernel, velocities, &[]);
    let c_k = metrics.c_k;
    let beta = velocities.moments().beta;
    let tables = kernel.diffusive_tables();
    let mut first_cell = vec![usize::MAX; kernel.num_tables()];
    for c in geom.diffusive_cells() {
        let id = kernel.table_id(c);
        if first_cell[id] == usize::MAX {
            first_cell[id] = c;
        }
    }
    let solved: Vec<Result<(CellFredholmSolution, DMatrix<f64>, f64)>> = tables
        .par_iter()
        .map(|&id| {
            let cell = first_cell[id];
            let m = assemble(kernel.table(id), 1.0, velocities);
            let sol = solve_cell(&m, velocities, cell).map_err(|e| locate(e, geom, cell))?;
            let (mat, dual) = diffusion_matrix(&sol, velocities);
            check_bounds(&sol, &mat, dual, velocities, c_k, beta, cell).map_err(|e| locate(e, geom, cell))?;
            Ok((sol, mat, dual))
        })
        .collect();
    let mut slot_of_table = vec![None; kernel.num_tables()];
    let mut solutions = Vec::new();
    let mut matrices = Vec::new();
    let mut max_dual: f64 = 0.0;
    for (&id, r) in tables.iter().zip(solved) {
        let (sol, mat, dual) = r?;
        slot_of_table[id] = Some(solutions.len());
        solutions.push(sol);
        matrices.push(mat);
        max_dual = max_dual.max(dual);
    }
    let slot = (0..geom.num_cells())
        .map(|c| {
            if geom.is_diffusive(c) {
                slot_of_table[kernel.table_id(c)]
            } else {
                None
            }
        })
        .collect();
    let max_asymmetry = matrices.iter().map(|m| (m - m.transpose()).amax()).fold(0.0, f64::max);
    let coercivity_observed = matrices
        .iter()
        .map(symmetric_part_min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    let max_eigenvalue = matrices
        .iter()
        .map(|m| SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.max())
        .fold(f64::NEG_INFINITY, f64::max);
    if !c_k.is_finite() {
        warn!("C_K is infinite; the diffusion matrix bounds are vacuous");
    }
    Ok(DiffusionField {
        dim: velocities.dim(),
        solutions,
        matrices,
        slot,
        symmetric: max_asymmetry <= 1e-10,
        coercivity_observed,
        max_eigenvalue,
        max_asymmetry,
        max_duality_residual: max_dual,
        c_k,
        beta,
    })
}

fn locate(e: Error, geom: &Geometry, cell: usize) -> Error {
    let x = geom.grid().center(cell);
    match e {
        Error::FredholmRank { .. } | Error::CellSolve { .. } => Error::LinearSolve(format!("{e} (cell center {x:?})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, Grid, RegionShape};
    use crate::scattering::{build_kernel, random_sdb_table, KernelConfig, KernelSpec, SigmaRegion};
    use crate::velocity::{build_quadrature, QuadratureSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: pseudo-inverse of the μ-symmetrized operator.
    fn pinv_solve(l: &DMatrix<f64>, weights: &[f64], rhs: &[f64]) -> Vec<f64> {
        let n = weights.len();
        let sq: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let sym = DMatrix::from_fn(n, n, |v, u| sq[v] * l[(v, u)] / sq[u]);
        let pinv = sym.pseudo_inverse(1e-10).unwrap();
        let y = pinv * DVector::from_fn(n, |v, _| sq[v] * rhs[v]);
        (0..n).map(|v| y[v] / sq[v]).collect()
    }

    fn random_grid(nv: usize, rng: &mut ChaCha8Rng) -> VelocityGrid {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..nv / 2 {
            let v = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let w: f64 = rng.random_range(0.5..1.5);
            nodes.push(v.iter().map(|x| -x).collect());
            nodes.push(v);
            weights.extend([w, w]);
        }
        let total: f64 = weights.iter().sum();
        VelocityGrid::from_nodes(2, nodes, weights.iter().map(|w| w / total).collect()).unwrap()
    }

    #[test]
    fn isotropic_b_is_v_over_sigma() {
        let grid = build_quadrature(&QuadratureSpec::TwoPoint1d).unwrap();
        let m = assemble(&[1.0; 4], 2.0, &grid);
        let sol = solve_cell(&m, &grid, 0).unwrap();
        assert!((sol.b[0][0] - 0.5).abs() < 1e-14 && (sol.b[0][1] + 0.5).abs() < 1e-14);
        let (mm, _) = diffusion_matrix(&sol, &grid);
        assert!((mm[(0, 0)] - 0.5).abs() < 1e-14);

        let grid = build_quadrature(&QuadratureSpec::UniformCircle { count: 8 }).unwrap();
        let m = assemble(&[1.0; 64], 1.0, &grid);
        let sol = solve_cell(&m, &grid, 0).unwrap();
        let (mm, _) = diffusion_matrix(&sol, &grid);
        assert!((mm - DMatrix::identity(2, 2) * 0.5).amax() < 1e-14);
        for (i, bi) in sol.b_star.iter().enumerate() {
            for (k, v) in grid.nodes().enumerate() {
                assert!((bi[k] - v[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn non_symmetric_kernel_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = random_grid(6, &mut rng);
        let m = assemble(&random_sdb_table(grid.weights(), &mut rng), 1.0, &grid);
        let sol = solve_cell(&m, &grid, 0).unwrap();
        let mut differs = false;
        for i in 0..2 {
            let vi = grid.component(i);
            let b = pinv_solve(&m.l, grid.weights(), &vi);
            let bs = pinv_solve(&m.l_adj, grid.weights(), &vi);
            // the pseudo-inverse returns the component orthogonal to constants in
            // the μ-weighted product, i.e. the mean-zero solution
            for k in 0..6 {
                assert!((b[k] - sol.b[i][k]).abs() < 1e-10);
                assert!((bs[k] - sol.b_star[i][k]).abs() < 1e-10);
                differs |= (sol.b[i][k] - sol.b_star[i][k]).abs() > 1e-6;
            }
        }
        assert!(differs);
    }

    #[test]
    fn zero_kernel_is_rank_deficient() {
        let grid = build_quadrature(&QuadratureSpec::FourPointAxes).unwrap();
        // two decoupled pairs {±e1}, {±e2}
        let mut t = vec![0.0; 16];
        for (v, u) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
            t[v * 4 + u] = 1.0;
        }
        let m = assemble(&t, 1.0, &grid);
        let err = solve_cell(&m, &grid, 5).unwrap_err();
        assert!(matches!(err, Error::FredholmRank { cell: 5, .. }));
        assert!(err.to_string().contains("Fredholm solvability violated"));
    }

    #[test]
    fn piecewise_field_and_scaling() {
        let geom = build_geometry(Grid::new(vec![0.0], vec![1.0], vec![10]).unwrap(), &[]).unwrap();
        let grid = build_quadrature(&QuadratureSpec::GaussLegendre { count: 4 }).unwrap();
        let s = grid.moments().second[(0, 0)];
        let cfg = KernelConfig {
            diffusive: KernelSpec::Isotropic {
                sigma: 1.0,
                regions: vec![SigmaRegion {
                    region: RegionShape::Box {
                        lo: vec![0.5],
                        hi: vec![1.0],
                    },
                    sigma: 10.0,
                }],
            },
            ..Default::default()
        };
        let k = build_kernel(&cfg, &geom, &grid, 1e-12).unwrap();
        let field = assemble_field(&k, &geom, &grid).unwrap();
        assert!(field.symmetric);
        assert!((field.matrix(0).unwrap()[(0, 0)] - s).abs() < 1e-13);
        assert!((field.matrix(9).unwrap()[(0, 0)] - s / 10.0).abs() < 1e-13);
    }

    #[test]
    fn all_a_sigma_three() {
        let geom = build_geometry(Grid::new(vec![0.0], vec![1.0], vec![5]).unwrap(), &[]).unwrap();
        let grid = build_quadrature(&QuadratureSpec::TwoPoint1d).unwrap();
        let cfg = KernelConfig {
            diffusive: KernelSpec::Isotropic {
                sigma: 3.0,
                regions: vec![],
            },
            ..Default::default()
        };
        let k = build_kernel(&cfg, &geom, &grid, 1e-12).unwrap();
        let field = assemble_field(&k, &geom, &grid).unwrap();
        for c in 0..5 {
            assert!((field.matrix(c).unwrap()[(0, 0)] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_scaling_maps_b_and_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let grid = random_grid(8, &mut rng);
        let t = random_sdb_table(grid.weights(), &mut rng);
        let c = 3.5;
        let s1 = solve_cell(&assemble(&t, 1.0, &grid), &grid, 0).unwrap();
        let s2 = solve_cell(&assemble(&t, c, &grid), &grid, 0).unwrap();
        let (m1, _) = diffusion_matrix(&s1, &grid);
        let (m2, _) = diffusion_matrix(&s2, &grid);
        assert!((m1 / c - m2).amax() < 1e-12);
        for i in 0..2 {
            for k in 0..8 {
                assert!((s1.b[i][k] / c - s2.b[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poincare_bound_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let grid = random_grid(8, &mut rng);
        let t = random_sdb_table(grid.weights(), &mut rng);
        let c_k = crate::scattering::c_k_of(&t, grid.weights());
        let m = assemble(&t, 1.0, &grid);
        for _ in 0..1000 {
            let mut phi: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = grid.average(&phi);
            phi.iter_mut().for_each(|p| *p -= mean);
            assert!(grid.norm(&phi) <= 2.0 * c_k * grid.norm(&m.apply(&phi)) + 1e-12);
        }
    }
}
