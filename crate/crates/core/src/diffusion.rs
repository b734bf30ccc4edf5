//! Limit diffusion problem: two-point flux finite volumes on the diffusive
//! region, one merged unknown per inclusion, zero Dirichlet data on the walls
//! and backward Euler in time.

use log::warn;
use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::fredholm::DiffusionField;
use crate::geometry::Geometry;
use crate::velocity::VelocityGrid;

/// Off-diagonal magnitude (relative to `sqrt(M_ii M_jj)`) above which the
/// two-point flux is flagged as inconsistent.
pub const ANISOTROPY_WARNING: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub t: f64,
    /// Unknowns: diffusive cells in index order, then one value per inclusion.
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    /// Unknown index per cell.
    unknown_of: Vec<usize>,
    num_diffusive: usize,
    num_inclusions: usize,
    /// `vol` for diffusive unknowns, `|B_l|` for inclusion unknowns.
    pub mass: Vec<f64>,
    /// Face couplings `(i, j, T)` between unknowns.
    pub couplings: Vec<(usize, usize, f64)>,
    /// Wall transmissibility per unknown (ghost value zero).
    pub wall: Vec<f64>,
    pub symmetric: bool,
    pub max_anisotropy: f64,
}

impl DiffusionState {
    pub fn inclusion_value(&self, op: &DiffusionOperator, l: usize) -> f64 {
        self.rho[op.num_diffusive + l]
    }
}

impl DiffusionOperator {
    pub fn num_unknowns(&self) -> usize {
        self.mass.len()
    }

    pub fn num_diffusive(&self) -> usize {
        self.num_diffusive
    }

    pub fn num_inclusions(&self) -> usize {
        self.num_inclusions
    }

    pub fn unknown_of(&self, cell: usize) -> usize {
        self.unknown_of[cell]
    }

    /// Value on every cell, constant on each inclusion by construction.
    pub fn cell_values(&self, state: &DiffusionState) -> Vec<f64> {
        self.unknown_of.iter().map(|&u| state.rho[u]).collect()
    }

    /// `S ρ` for the stiffness matrix, including wall terms.
    pub fn apply(&self, rho: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = rho.iter().zip(&self.wall).map(|(r, t)| r * t).collect();
        for &(i, j, t) in &self.couplings {
            let d = t * (rho[i] - rho[j]);
            out[i] += d;
            out[j] -= d;
        }
        out
    }

    /// Stiffness matrix `S` (interior couplings plus wall terms).
    pub fn stiffness(&self) -> CscMatrix<f64> {
        self.system(0.0)
    }

    /// `shift·Mass + S`.
    fn system(&self, shift: f64) -> CscMatrix<f64> {
        let n = self.num_unknowns();
        let mut coo = CooMatrix::new(n, n);
        for i in 0..n {
            coo.push(i, i, shift * self.mass[i] + self.wall[i]);
        }
        for &(i, j, t) in &self.couplings {
            coo.push(i, i, t);
            coo.push(j, j, t);
            coo.push(i, j, -t);
            coo.push(j, i, -t);
        }
        CscMatrix::from(&coo)
    }

    /// `ρᵀ S ρ`, the discrete `∫_A ∇ρ·M∇ρ` with the wall terms.
    pub fn dissipation(&self, rho: &[f64]) -> f64 {
        let mut s = 0.0;
        for (r, t) in rho.iter().zip(&self.wall) {
            s += t * r * r;
        }
        for &(i, j, t) in &self.couplings {
            let d = rho[i] - rho[j];
            s += t * d * d;
        }
        s
    }

    pub fn energy(&self, rho: &[f64]) -> f64 {
        0.5 * rho.iter().zip(&self.mass).map(|(r, m)| m * r * r).sum::<f64>()
    }

    pub fn total_mass(&self, rho: &[f64]) -> f64 {
        rho.iter().zip(&self.mass).map(|(r, m)| m * r).sum()
    }

    pub fn outflow(&self, rho: &[f64]) -> f64 {
        rho.iter().zip(&self.wall).map(|(r, t)| r * t).sum()
    }

    /// `Σ_{∂B_l faces} T (ρ_c − ρ_l)`.
    pub fn inclusion_flux(&self, rho: &[f64], l: usize) -> f64 {
        let u = self.num_diffusive + l;
        self.couplings
            .iter()
            .filter(|(_, j, _)| *j == u)
            .map(|&(i, j, t)| t * (rho[i] - rho[j]))
            .sum()
    }
}

/// `ρ = ⟨f⟩` on the diffusive cells and the volume average of `⟨f⟩` on each
/// inclusion.
pub fn project_initial(f: &[f64], geom: &Geometry, velocities: &VelocityGrid) -> DiffusionState {
    let nv = velocities.len();
    let mean: Vec<f64> = f.chunks(nv).map(|row| velocities.average(row)).collect();
    let mut rho: Vec<f64> = geom.diffusive_cells().map(|c| mean[c]).collect();
    let vol = geom.cell_volume();
    for l in 0..geom.num_inclusions() {
        let total: f64 = geom.inclusion_cells(l).iter().map(|&c| vol * mean[c]).sum();
        rho.push(total / geom.inclusion_volume(l));
    }
    DiffusionState { t: 0.0, rho }
}

pub fn assemble_operator(geom: &Geometry, field: &DiffusionField) -> Result<DiffusionOperator> {
    let grid = geom.grid();
    let dim = grid.dim();
    let n = geom.num_cells();
    let nd = geom.diffusive_cells().count();
    let m = geom.num_inclusions();
    let mut unknown_of = vec![usize::MAX; n];
    for (u, c) in geom.diffusive_cells().enumerate() {
        unknown_of[c] = u;
    }
    for l in 0..m {
        for &c in geom.inclusion_cells(l) {
            unknown_of[c] = nd + l;
        }
    }
    let mut normal = vec![Vec::new(); n];
    let mut max_anisotropy: f64 = 0.0;
    let mut symmetric = true;
    for c in geom.diffusive_cells() {
        let mat = field
            .matrix(c)
            .ok_or_else(|| Error::InvalidArgument(format!("diffusion field misses cell {c}")))?;
        for i in 0..dim {
            if !(mat[(i, i)] > 0.0) {
                return Err(Error::LinearSolve(format!(
                    "cell {c}: diagonal entry M_{i}{i} = {} is not positive",
                    mat[(i, i)]
                )));
            }
            for j in 0..dim {
                if i != j {
                    let r = mat[(i, j)].abs() / (mat[(i, i)] * mat[(j, j)]).sqrt();
                    max_anisotropy = max_anisotropy.max(r);
                    symmetric &= (mat[(i, j)] - mat[(j, i)]).abs() <= 1e-10;
                }
            }
        }
        normal[c] = (0..dim).map(|i| mat[(i, i)]).collect::<Vec<f64>>();
    }
    if max_anisotropy > ANISOTROPY_WARNING {
        warn!(
            "diffusion matrix has off-diagonal ratio {max_anisotropy:.3}; the two-point flux ignores off-diagonal terms"
        );
    }
    let mut mass = vec![geom.cell_volume(); nd];
    for l in 0..m {
        mass.push(geom.inclusion_volume(l));
    }
    let mut couplings = Vec::new();
    let mut wall = vec![0.0; nd + m];
    for c in geom.diffusive_cells() {
        let u = unknown_of[c];
        for d in 0..dim {
            let h = grid.spacing()[d];
            let area = grid.face_area(d);
            let mc = normal[c][d];
            for sign in [-1, 1] {
                match grid.neighbor(c, d, sign) {
                    None => wall[u] += area * 2.0 * mc / h,
                    Some(nb) if geom.is_diffusive(nb) => {
                        // each interior face once
                        if sign == 1 {
                            let mn = normal[nb][d];
                            let t = area * 2.0 * mc * mn / (h * (mc + mn));
                            couplings.push((u, unknown_of[nb], t));
                        }
                    }
                    Some(nb) => couplings.push((u, unknown_of[nb], area * 2.0 * mc / h)),
                }
            }
        }
    }
    Ok(DiffusionOperator {
        unknown_of,
        num_diffusive: nd,
        num_inclusions: m,
        mass,
        couplings,
        wall,
        symmetric,
        max_anisotropy,
    })
}

#[derive(Debug, Clone, Default)]
pub struct DiffusionStepDiagnostics {
    pub t: f64,
    pub dt: f64,
    pub energy: f64,
    pub dissipation: f64,
    /// `E(ρ⁺) − E(ρ) + Δt ρ⁺ᵀSρ⁺`, nonpositive.
    pub energy_defect: f64,
    pub mass: f64,
    pub outflow: f64,
    pub mass_residual: f64,
    pub inclusion_flux_residual: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusionRun {
    pub snapshots: Vec<DiffusionState>,
    pub steps: Vec<DiffusionStepDiagnostics>,
    pub initial_energy: f64,
    pub total_defect: f64,
    pub max_defect: f64,
    pub max_mass_residual: f64,
    pub max_inclusion_flux_residual: f64,
}

impl DiffusionRun {
    pub fn checks_passed(&self) -> bool {
        self.max_defect <= 1e-14 * self.initial_energy.max(1.0)
            && self.max_mass_residual <= 1e-12
            && self.max_inclusion_flux_residual <= 1e-12
    }
}

/// Backward Euler with step at most `dt`, landing exactly on each snapshot.
pub fn run(op: &DiffusionOperator, initial: &DiffusionState, dt: f64, snapshot_times: &[f64]) -> Result<DiffusionRun> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let mut times = snapshot_times.to_vec();
    times.sort_by(|a, b| a.total_cmp(b));
    let mut out = DiffusionRun {
        snapshots: Vec::new(),
        steps: Vec::new(),
        initial_energy: op.energy(&initial.rho),
        total_defect: 0.0,
        max_defect: f64::NEG_INFINITY,
        max_mass_residual: 0.0,
        max_inclusion_flux_residual: 0.0,
    };
    let mut state = initial.clone();
    let mut cache: Option<(f64, CscCholesky<f64>)> = None;
    for &target in &times {
        let interval = target - state.t;
        if interval < -1e-14 {
            return Err(Error::InvalidArgument(format!(
                "snapshot time {target} precedes the current time"
            )));
        }
        let steps = if interval <= 0.0 {
            0
        } else {
            (interval / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize
        };
        for i in 0..steps {
            let h = interval / steps as f64;
            if cache.as_ref().is_none_or(|(d, _)| *d != h) {
                let factor = CscCholesky::factor(&op.system(1.0 / h))
                    .map_err(|e| Error::LinearSolve(format!("Cholesky factorization failed: {e:?}")))?;
                cache = Some((h, factor));
            }
            let chol = &cache.as_ref().expect("factored above").1;
            let rhs = DVector::from_iterator(state.rho.len(), state.rho.iter().zip(&op.mass).map(|(r, m)| m * r / h));
            let next: Vec<f64> = chol.solve(&rhs).column(0).iter().copied().collect();
            let diag = diagnostics(op, &state.rho, &next, h, state.t + h);
            out.total_defect += diag.energy_defect;
            out.max_defect = out.max_defect.max(diag.energy_defect);
            out.max_mass_residual = out.max_mass_residual.max(diag.mass_residual);
            out.max_inclusion_flux_residual = out.max_inclusion_flux_residual.max(diag.inclusion_flux_residual);
            out.steps.push(diag);
            state.rho = next;
            state.t = if i + 1 == steps { target } else { state.t + h };
        }
        out.snapshots.push(state.clone());
    }
    if out.steps.is_empty() {
        out.max_defect = 0.0;
    }
    Ok(out)
}

fn diagnostics(op: &DiffusionOperator, old: &[f64], new: &[f64], dt: f64, t: f64) -> DiffusionStepDiagnostics {
    let e0 = op.energy(old);
    let energy = op.energy(new);
    let dissipation = op.dissipation(new);
    let m0 = op.total_mass(old);
    let mass = op.total_mass(new);
    let outflow = op.outflow(new);
    let scale = old
        .iter()
        .zip(&op.mass)
        .map(|(r, m)| m * r.abs())
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let mass_residual = (mass - m0 + dt * outflow).abs() / scale;
    let mut flux_res: f64 = 0.0;
    for l in 0..op.num_inclusions() {
        let u = op.num_diffusive() + l;
        let lhs = op.mass[u] * (new[u] - old[u]) / dt;
        let rhs = op.inclusion_flux(new, l);
        let s = lhs
            .abs()
            .max(rhs.abs())
            .max(op.mass[u] * old[u].abs() / dt)
            .max(f64::MIN_POSITIVE);
        flux_res = flux_res.max((lhs - rhs).abs() / s);
    }
    DiffusionStepDiagnostics {
        t,
        dt,
        energy,
        dissipation,
        energy_defect: energy - e0 + dt * dissipation,
        mass,
        outflow,
        mass_residual,
        inclusion_flux_residual: flux_res,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fredholm::assemble_field;
    use crate::geometry::{build_geometry, Grid, RegionShape};
    use crate::initial::InitialSpec;
    use crate::scattering::{build_kernel, KernelConfig};
    use crate::velocity::{build_quadrature, QuadratureSpec};
    use nalgebra::DMatrix;

    fn setup(n: usize, shapes: &[RegionShape]) -> (Geometry, VelocityGrid, DiffusionOperator) {
        let geom = build_geometry(Grid::new(vec![0.0], vec![1.0], vec![n]).unwrap(), shapes).unwrap();
        let grid = build_quadrature(&QuadratureSpec::TwoPoint1d).unwrap();
        let k = build_kernel(&KernelConfig::default(), &geom, &grid, 1e-12).unwrap();
        let field = assemble_field(&k, &geom, &grid).unwrap();
        let op = assemble_operator(&geom, &field).unwrap();
        (geom, grid, op)
    }

    fn dense(op: &DiffusionOperator) -> DMatrix<f64> {
        let s = op.stiffness();
        let n = op.num_unknowns();
        let mut d = DMatrix::zeros(n, n);
        for (i, j, v) in s.triplet_iter() {
            d[(i, j)] += v;
        }
        d
    }

    #[test]
    fn tridiagonal_without_inclusions() {
        let (_, _, op) = setup(5, &[]);
        let d = dense(&op);
        let h = 0.2;
        let vol = h;
        // M = 1; interior faces T = 1/h, walls T = 2/h
        for i in 0..5 {
            let expected = if i == 0 || i == 4 { 3.0 / h } else { 2.0 / h };
            assert!((d[(i, i)] - expected).abs() < 1e-12);
            assert!((op.mass[i] - vol).abs() < 1e-15);
        }
        assert!((d[(0, 1)] + 1.0 / h).abs() < 1e-12);
        assert!(d[(0, 2)] == 0.0);
        assert!((&d - d.transpose()).amax() == 0.0);
    }

    #[test]
    fn two_cell_inclusion_unknowns() {
        let (geom, _, op) = setup(
            10,
            &[RegionShape::Box {
                lo: vec![0.4],
                hi: vec![0.6],
            }],
        );
        assert_eq!(geom.inclusion_cells(0).len(), 2);
        assert_eq!(op.num_unknowns(), 9);
        let d = dense(&op);
        let ones = DVector::from_element(9, 1.0);
        let mut flux = &d * &ones;
        for i in 0..9 {
            flux[i] -= op.wall[i];
        }
        assert!(flux.amax() < 1e-12);
        assert!((&d - d.transpose()).amax() == 0.0);
    }

    #[test]
    fn project_initial_averages() {
        let (geom, grid, op) = setup(
            10,
            &[RegionShape::Box {
                lo: vec![0.3],
                hi: vec![0.6],
            }],
        );
        let spec = InitialSpec {
            terms: vec![crate::initial::SpatialTerm::Indicator {
                region: RegionShape::Box {
                    lo: vec![0.3],
                    hi: vec![0.4],
                },
                value: 1.0,
            }],
            ..Default::default()
        };
        let f = spec.sample(&geom, &grid).unwrap();
        let s = project_initial(&f, &geom, &grid);
        assert!((s.inclusion_value(&op, 0) - 1.0 / 3.0).abs() < 1e-15);
        let f = InitialSpec::constant(2.5).sample(&geom, &grid).unwrap();
        let s = project_initial(&f, &geom, &grid);
        assert!(s.rho.iter().all(|&r| (r - 2.5).abs() < 1e-15));
    }

    #[test]
    fn v_squared_initial_data() {
        let (geom, grid, _) = setup(4, &[]);
        let f: Vec<f64> = (0..4)
            .flat_map(|c| {
                grid.nodes()
                    .map(move |v| v[0] * v[0] * (c as f64 + 1.0))
                    .collect::<Vec<_>>()
            })
            .collect();
        let s = project_initial(&f, &geom, &grid);
        assert_eq!(s.rho, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn analytic_sine_decay() {
        let n = 100;
        let (geom, grid, op) = setup(n, &[]);
        let f = InitialSpec::sine().sample(&geom, &grid).unwrap();
        let s0 = project_initial(&f, &geom, &grid);
        let dt = 1e-4;
        let r = run(&op, &s0, dt, &[0.1]).unwrap();
        let h = 1.0 / n as f64;
        let decay = (-std::f64::consts::PI.powi(2) * 0.1).exp();
        let err = op
            .cell_values(&r.snapshots[0])
            .iter()
            .enumerate()
            .map(|(c, v)| (v - decay * (std::f64::consts::PI * geom.grid().center(c)[0]).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 5.0 * (h * h + dt), "{err}");
        assert!(r.checks_passed());
    }

    #[test]
    fn inclusion_drains_within_envelope() {
        let (geom, grid, op) = setup(
            40,
            &[RegionShape::Box {
                lo: vec![0.4],
                hi: vec![0.6],
            }],
        );
        let f = InitialSpec::constant(1.0).sample(&geom, &grid).unwrap();
        let s0 = project_initial(&f, &geom, &grid);
        let times: Vec<f64> = (1..=50).map(|i| i as f64 * 2e-3).collect();
        let r = run(&op, &s0, 2e-3, &times).unwrap();
        let mut prev = s0.inclusion_value(&op, 0);
        for s in &r.snapshots {
            let rl = s.inclusion_value(&op, 0);
            assert!(rl <= prev + 1e-15);
            let nbrs: Vec<f64> = op
                .couplings
                .iter()
                .filter(|(_, j, _)| *j == op.num_diffusive())
                .map(|&(i, _, _)| s.rho[i])
                .collect();
            // the inclusion row is a convex combination of its old value and
            // the new interface values
            let lo = nbrs.iter().copied().fold(prev, f64::min);
            let hi = nbrs.iter().copied().fold(prev, f64::max);
            assert!(rl >= lo - 1e-14 && rl <= hi + 1e-14);
            prev = rl;
        }
        assert!(
            r.checks_passed(),
            "{} {} {}",
            r.max_defect,
            r.max_mass_residual,
            r.max_inclusion_flux_residual
        );
        assert!(r.steps.iter().all(|d| d.energy_defect <= 0.0));
    }

    #[test]
    fn zero_data_stays_zero() {
        let (_, _, op) = setup(10, &[]);
        let s0 = DiffusionState {
            t: 0.0,
            rho: vec![0.0; 10],
        };
        let r = run(&op, &s0, 0.01, &[0.1]).unwrap();
        assert!(r.snapshots[0].rho.iter().all(|&x| x == 0.0));
    }
}
