//! ε-sweeps of the kinetic solver against the limit diffusion problem.

use log::info;
use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use rayon::prelude::*;

use crate::diffusion::{self, assemble_operator, project_initial, DiffusionOperator, DiffusionRun};
use crate::error::{Error, Result};
use crate::fredholm::{assemble_field, DiffusionField};
use crate::geometry::Geometry;
use crate::initial::{check_strong_data, InitialSpec};
use crate::kinetic::{KineticRun, KineticSettings, KineticSolver, KineticState};
use crate::scattering::{HypothesisReport, Kernel};
use crate::velocity::VelocityGrid;

pub const FLUX_IDENTITY_TOLERANCE: f64 = 1e-10;
pub const ENTROPY_PRODUCTION_TOLERANCE: f64 = 1e-6;

pub struct Problem {
    pub geom: Geometry,
    pub velocities: VelocityGrid,
    pub kernel: Kernel,
    pub initial: InitialSpec,
}

#[derive(Debug, Clone)]
pub struct StudySettings {
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub snapshots: Vec<f64>,
    pub kinetic: KineticSettings,
    /// Defaults to `min(h², T/100)`.
    pub diffusion_dt: Option<f64>,
    /// Cells closer than this to `∂Ω` are excluded from interior norms.
    pub interior_margin: f64,
    /// The smallest-ε weak error must be below this fraction of the largest-ε one.
    pub weak_ratio: f64,
    pub force: bool,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            epsilons: vec![0.4, 0.2, 0.1, 0.05],
            snapshots: vec![0.1],
            kinetic: KineticSettings::default(),
            diffusion_dt: None,
            interior_margin: 0.1,
            weak_ratio: 0.25,
            force: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotRecord {
    pub t: f64,
    /// `‖⟨f_ε⟩ − ρ‖_{L²(Ω)}`.
    pub weak_error: f64,
    pub weak_error_interior: f64,
    /// `Σ_A vol |(1/ε)⟨v f⟩ + M ∇_h ρ|²` against the diffusion solution.
    pub flux_residual: f64,
    /// Same with the kinetic density `⟨f_ε⟩` in place of `ρ`.
    pub current_residual: f64,
    pub flux_identity_residual: f64,
    /// `max_{B_l × V} |f − mean_{B_l×μ} f|` per inclusion.
    pub flatness: Vec<f64>,
    pub inclusion_mean: Vec<f64>,
    /// `max_k |mean_{B_l} f_k − mean_{B_l×μ} f| / mean_{B_l×μ} f`.
    pub velocity_split: Vec<f64>,
    pub inclusion_reference: Vec<f64>,
    pub strong: Option<StrongRecord>,
    /// `∫ ⟨f_ε⟩ w` for the torsion test function.
    pub pairing: f64,
}

#[derive(Debug, Clone)]
pub struct StrongRecord {
    /// `Σ_A vol Σ_k w_k ((f − ⟨f⟩)/ε + b*·∇_h ρ)²`.
    pub strong_error: f64,
    /// Smallest `(⟨⟨k q²⟩⟩ − 2 j·M⁻¹j) / ⟨⟨k q²⟩⟩` over interior cells.
    pub production_slack: f64,
    /// Volume average over interior cells of `|⟨⟨k q²⟩⟩ − 2∇_h ρ·M∇_h ρ|`.
    pub production_gap: f64,
    /// Smallest signed gap over interior cells.
    pub production_gap_min: f64,
}

#[derive(Debug, Clone)]
pub struct EpsilonRecord {
    pub eps: f64,
    pub snapshots: Vec<SnapshotRecord>,
    pub steps: usize,
    pub max_mass_residual: f64,
    pub max_entropy_defect: f64,
    pub positivity: bool,
    pub total_production: f64,
    pub initial_norm2: f64,
    pub max_norm2: f64,
    pub max_flux_identity_residual: f64,
    /// Largest ratio of a snapshot-to-snapshot pairing change to its bound.
    pub equicontinuity_ratio: f64,
    pub run: KineticRun,
}

impl EpsilonRecord {
    pub fn uniform_bounds_ok(&self) -> bool {
        let tol = 1e-10 * self.initial_norm2.max(f64::MIN_POSITIVE);
        self.max_norm2 <= self.initial_norm2 + tol && self.total_production <= self.initial_norm2 + tol
    }

    pub fn invariants_ok(&self) -> bool {
        self.run.checks_passed()
            && self.uniform_bounds_ok()
            && self.max_flux_identity_residual <= FLUX_IDENTITY_TOLERANCE
            && self.equicontinuity_ratio <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyVerdict {
    Pass,
    Fail,
    Skipped,
}

impl std::fmt::Display for StudyVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StudyVerdict::Pass => "PASS",
            StudyVerdict::Fail => "FAIL",
            StudyVerdict::Skipped => "SKIPPED",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub epsilons: Vec<f64>,
    pub snapshot_times: Vec<f64>,
    pub records: Vec<EpsilonRecord>,
    pub diffusion: DiffusionRun,
    pub symmetric_field: bool,
    pub strong_data: bool,
    pub forced: bool,
    pub applicable: bool,
    pub weak: StudyVerdict,
    pub inclusion: StudyVerdict,
    pub strong: StudyVerdict,
    pub notes: Vec<String>,
}

impl ConvergenceReport {
    pub fn invariants_ok(&self) -> bool {
        self.records.iter().all(|r| r.invariants_ok()) && self.diffusion.checks_passed()
    }

    /// Per snapshot, the weak error sequence over ε.
    pub fn weak_series(&self, snapshot: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.snapshots[snapshot].weak_error).collect()
    }

    pub fn flatness_series(&self, snapshot: usize, l: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.snapshots[snapshot].flatness[l]).collect()
    }

    pub fn strong_series(&self, snapshot: usize) -> Option<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.snapshots[snapshot].strong.as_ref().map(|s| s.strong_error))
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("eps: {:?}\n", self.epsilons));
        for (i, t) in self.snapshot_times.iter().enumerate() {
            s.push_str(&format!(
                "t = {t}\n  weak error:          {}\n",
                fmt_series(&self.weak_series(i))
            ));
            let interior: Vec<f64> = self
                .records
                .iter()
                .map(|r| r.snapshots[i].weak_error_interior)
                .collect();
            s.push_str(&format!("  weak error interior: {}\n", fmt_series(&interior)));
            let flux: Vec<f64> = self.records.iter().map(|r| r.snapshots[i].flux_residual).collect();
            s.push_str(&format!("  flux residual:       {}\n", fmt_series(&flux)));
            let ninc = self.records.first().map_or(0, |r| r.snapshots[i].flatness.len());
            for l in 0..ninc {
                s.push_str(&format!(
                    "  flatness B_{}:         {}\n",
                    l + 1,
                    fmt_series(&self.flatness_series(i, l))
                ));
            }
            if let Some(st) = self.strong_series(i) {
                s.push_str(&format!("  strong error:        {}\n", fmt_series(&st)));
            }
        }
        s.push_str(&format!(
            "weak: {}\ninclusion: {}\nstrong: {}\ninvariants: {}\n",
            self.weak,
            self.inclusion,
            self.strong,
            if self.invariants_ok() { "ok" } else { "VIOLATED" }
        ));
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }
}

fn fmt_series(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join("  ")
}

pub fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

/// Gradient of a cell field on the diffusive cells: central differences
/// between diffusive neighbours, one-sided next to inclusions and walls.
/// Inclusion cells contribute their own value, walls a zero ghost at
/// distance `h/2`. Returns `dim` components per cell (zero on inclusions).
pub fn discrete_gradient(geom: &Geometry, values: &[f64]) -> Vec<Vec<f64>> {
    let grid = geom.grid();
    let dim = grid.dim();
    (0..geom.num_cells())
        .map(|c| {
            if !geom.is_diffusive(c) {
                return vec![0.0; dim];
            }
            (0..dim)
                .map(|d| {
                    let h = grid.spacing()[d];
                    let side = |s: i32| match grid.neighbor(c, d, s) {
                        Some(nb) => (values[nb], h, geom.is_diffusive(nb)),
                        None => (0.0, 0.5 * h, false),
                    };
                    let (vp, dp, ap) = side(1);
                    let (vm, dm, am) = side(-1);
                    let vc = values[c];
                    match (ap, am) {
                        (true, true) => (vp - vm) / (dp + dm),
                        (true, false) => (vp - vc) / dp,
                        (false, true) => (vc - vm) / dm,
                        (false, false) => (vp - vm) / (dp + dm),
                    }
                })
                .collect()
        })
        .collect()
}

/// `min(h², T/100)`.
pub fn default_diffusion_dt(geom: &Geometry, horizon: f64) -> f64 {
    let h = geom.grid().min_spacing();
    (h * h).min(horizon / 100.0)
}

struct Reference<'a> {
    field: DiffusionField,
    op: DiffusionOperator,
    run: DiffusionRun,
    /// Cell values of the diffusion solution at each snapshot.
    values: Vec<Vec<f64>>,
    gradients: Vec<Vec<Vec<f64>>>,
    torsion: Vec<f64>,
    torsion_grad_norm: f64,
    f_in: Vec<f64>,
    problem: &'a Problem,
    interior: Vec<bool>,
}

fn reference<'a>(problem: &'a Problem, settings: &StudySettings) -> Result<Reference<'a>> {
    let geom = &problem.geom;
    let field = assemble_field(&problem.kernel, geom, &problem.velocities)?;
    let op = assemble_operator(geom, &field)?;
    let f_in = problem.initial.sample(geom, &problem.velocities)?;
    let rho0 = project_initial(&f_in, geom, &problem.velocities);
    let horizon = settings.snapshots.iter().copied().fold(0.0, f64::max);
    let dt = settings
        .diffusion_dt
        .unwrap_or_else(|| default_diffusion_dt(geom, horizon));
    let run = diffusion::run(&op, &rho0, dt, &settings.snapshots)?;
    let values: Vec<Vec<f64>> = run.snapshots.iter().map(|s| op.cell_values(s)).collect();
    let gradients = values.iter().map(|v| discrete_gradient(geom, v)).collect();
    // torsion function: S w = Mass·1, constant on each inclusion, zero trace
    let w = CscCholesky::factor(&op.stiffness())
        .map_err(|e| Error::LinearSolve(format!("stiffness factorization failed: {e:?}")))?
        .solve(&DMatrix::from_column_slice(op.mass.len(), 1, &op.mass));
    let torsion = op.cell_values(&diffusion::DiffusionState {
        t: 0.0,
        rho: w.as_slice().to_vec(),
    });
    let vol = geom.cell_volume();
    let torsion_grad_norm = discrete_gradient(geom, &torsion)
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
        * vol.sqrt();
    let interior = (0..geom.num_cells())
        .map(|c| geom.is_diffusive(c) && geom.grid().wall_distance(c) >= settings.interior_margin)
        .collect();
    Ok(Reference {
        field,
        op,
        run,
        values,
        gradients,
        torsion,
        torsion_grad_norm,
        f_in,
        problem,
        interior,
    })
}

fn snapshot_record(
    r: &Reference,
    solver: &KineticSolver,
    state: &KineticState,
    idx: usize,
    strong: bool,
) -> SnapshotRecord {
    let p = r.problem;
    let geom = &p.geom;
    let vel = &p.velocities;
    let nv = vel.len();
    let dim = vel.dim();
    let vol = geom.cell_volume();
    let eps = solver.eps();
    let f = &state.f;
    let density: Vec<f64> = f.chunks(nv).map(|row| vel.average(row)).collect();
    let rho = &r.values[idx];
    let grad = &r.gradients[idx];
    let kin_grad = discrete_gradient(geom, &density);
    let mut weak = 0.0;
    let mut weak_int = 0.0;
    for c in 0..geom.num_cells() {
        let d = density[c] - rho[c];
        weak += vol * d * d;
        if r.interior[c] {
            weak_int += vol * d * d;
        }
    }
    let mut flux_residual = 0.0;
    let mut current_residual = 0.0;
    let mut identity: f64 = 0.0;
    let mut strong_error = 0.0;
    let mut slack = f64::INFINITY;
    let mut gap_sum = 0.0;
    let mut gap_min = f64::INFINITY;
    let mut gap_vol = 0.0;
    for c in geom.diffusive_cells() {
        let m = r.field.matrix(c).expect("diffusive cell");
        let sol = r.field.solution(c).expect("diffusive cell");
        let j = solver.current(f, c);
        let mg = m * DVector::from_column_slice(&grad[c]);
        let mk = m * DVector::from_column_slice(&kin_grad[c]);
        let row = &f[c * nv..(c + 1) * nv];
        // (1/ε) L f through the cell's collision matrix
        let cm = crate::collision::assemble_cell(&p.kernel, c, eps, vel);
        let lf: Vec<f64> = cm.apply(row).iter().map(|x| x / eps).collect();
        let jscale = j.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
        for i in 0..dim {
            flux_residual += vol * (j[i] + mg[i]).powi(2);
            current_residual += vol * (j[i] + mk[i]).powi(2);
            let via_b = vel.inner(&sol.b_star[i], &lf);
            identity = identity.max((j[i] - via_b).abs() / jscale);
        }
        if strong {
            let mean = density[c];
            for k in 0..nv {
                let bg: f64 = (0..dim).map(|i| sol.b_star[i][k] * grad[c][i]).sum();
                strong_error += vol * vel.weight(k) * ((row[k] - mean) / eps + bg).powi(2);
            }
            if r.interior[c] {
                let prod = solver.cell_production(f, c);
                let minv = m.clone().try_inverse().expect("coercive matrix");
                let jv = DVector::from_column_slice(&j);
                let cs = 2.0 * jv.dot(&(&minv * &jv));
                if prod > 0.0 {
                    slack = slack.min((prod - cs) / prod);
                }
                let g = DVector::from_column_slice(&grad[c]);
                let gap = prod - 2.0 * g.dot(&(m * &g));
                gap_sum += vol * gap.abs();
                gap_min = gap_min.min(gap);
                gap_vol += vol;
            }
        }
    }
    let mut flatness = Vec::new();
    let mut inclusion_mean = Vec::new();
    let mut velocity_split = Vec::new();
    let mut inclusion_reference = Vec::new();
    for l in 0..geom.num_inclusions() {
        let cells = geom.inclusion_cells(l);
        let mean = cells.iter().map(|&c| density[c]).sum::<f64>() / cells.len() as f64;
        let flat = cells
            .iter()
            .flat_map(|&c| f[c * nv..(c + 1) * nv].iter())
            .fold(0.0_f64, |a, x| a.max((x - mean).abs()));
        flatness.push(flat);
        let split = (0..nv)
            .map(|k| cells.iter().map(|&c| f[c * nv + k]).sum::<f64>() / cells.len() as f64)
            .fold(0.0_f64, |a, fk| a.max((fk - mean).abs()));
        velocity_split.push(if mean > 0.0 { split / mean } else { 0.0 });
        inclusion_mean.push(mean);
        inclusion_reference.push(r.run.snapshots[idx].inclusion_value(&r.op, l));
    }
    let pairing = density.iter().zip(&r.torsion).map(|(a, b)| vol * a * b).sum();
    SnapshotRecord {
        t: state.t,
        weak_error: weak.sqrt(),
        weak_error_interior: weak_int.sqrt(),
        flux_residual,
        current_residual,
        flux_identity_residual: identity,
        flatness,
        inclusion_mean,
        velocity_split,
        inclusion_reference,
        strong: strong.then(|| StrongRecord {
            strong_error,
            production_slack: if slack.is_finite() { slack } else { 0.0 },
            production_gap: if gap_vol > 0.0 { gap_sum / gap_vol } else { 0.0 },
            production_gap_min: if gap_min.is_finite() { gap_min } else { 0.0 },
        }),
        pairing,
    }
}

fn epsilon_record(r: &Reference, settings: &StudySettings, eps: f64, strong: bool) -> Result<EpsilonRecord> {
    let p = r.problem;
    let solver = KineticSolver::new(&p.geom, &p.velocities, &p.kernel, eps, settings.kinetic.clone())?;
    let initial = KineticState {
        t: 0.0,
        eps,
        f: r.f_in.clone(),
    };
    let run = solver.run(&initial, &settings.snapshots)?;
    info!("ε = {eps}: {} kinetic steps", run.steps.len());
    let snapshots: Vec<SnapshotRecord> = run
        .snapshots
        .iter()
        .enumerate()
        .map(|(i, s)| snapshot_record(r, &solver, s, i, strong))
        .collect();
    let max_flux_identity_residual = snapshots.iter().map(|s| s.flux_identity_residual).fold(0.0, f64::max);
    let max_norm2 = run.steps.iter().map(|d| d.norm2).fold(run.initial_norm2, f64::max);

    let vol = p.geom.cell_volume();
    let nv = p.velocities.len();
    let pair0: f64 = r
        .f_in
        .chunks(nv)
        .map(|row| p.velocities.average(row))
        .zip(&r.torsion)
        .map(|(a, b)| vol * a * b)
        .sum();
    let bound_const = (2.0 * r.field.c_k).powf(1.5)
        * p.velocities.mean_square_speed().sqrt()
        * run.initial_norm2.sqrt()
        * r.torsion_grad_norm;
    let mut ratio: f64 = 0.0;
    let mut prev = (0.0, pair0);
    for s in &snapshots {
        let dt = s.t - prev.0;
        if dt > 0.0 && bound_const.is_finite() && bound_const > 0.0 {
            ratio = ratio.max((s.pairing - prev.1).abs() / (bound_const * dt.sqrt()));
        }
        prev = (s.t, s.pairing);
    }
    Ok(EpsilonRecord {
        eps,
        snapshots,
        steps: run.steps.len(),
        max_mass_residual: run.max_mass_residual,
        max_entropy_defect: run.max_entropy_defect,
        positivity: run.positivity_ok(),
        total_production: run.total_production,
        initial_norm2: run.initial_norm2,
        max_norm2,
        max_flux_identity_residual,
        equicontinuity_ratio: ratio,
        run,
    })
}

fn validate(settings: &StudySettings) -> Result<()> {
    if settings.epsilons.len() < 2 || !strictly_decreasing(&settings.epsilons) {
        return Err(Error::InvalidArgument(
            "ε must be strictly decreasing (at least two values)".into(),
        ));
    }
    if settings.epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("ε values must be positive".into()));
    }
    if settings.snapshots.is_empty() || settings.snapshots.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidArgument("snapshot times must be positive".into()));
    }
    Ok(())
}

/// Runs the sweep once and evaluates every study that applies: the weak
/// study always, the inclusion study when inclusions exist, the strong
/// study when the field is symmetric and the data qualify.
pub fn converge(
    problem: &Problem,
    settings: &StudySettings,
    hypotheses: &HypothesisReport,
) -> Result<ConvergenceReport> {
    validate(settings)?;
    let mut notes = Vec::new();
    if !hypotheses.applicable {
        let failing = hypotheses.failing().unwrap_or_default();
        if !settings.force {
            return Err(Error::Refused(format!(
                "diffusion limit theorem not applicable: {failing} fails (use --force to run anyway)"
            )));
        }
        notes.push(format!("forced run: {failing} fails"));
    }
    let r = reference(problem, settings)?;
    let nv = problem.velocities.len();
    let strong_data = check_strong_data(&r.f_in, &problem.geom, nv).is_ok();
    let symmetric = r.field.symmetric;
    let strong = strong_data && symmetric;
    if !symmetric {
        notes.push("M is not symmetric; strong convergence is not known in that case, strong study skipped".into());
    } else if !strong_data {
        notes.push("initial data depend on v or vary on an inclusion; strong study skipped".into());
    }
    let records: Vec<EpsilonRecord> = settings
        .epsilons
        .par_iter()
        .map(|&eps| epsilon_record(&r, settings, eps, strong))
        .collect::<Result<_>>()?;
    let nsnap = settings.snapshots.len();
    let mut report = ConvergenceReport {
        epsilons: settings.epsilons.clone(),
        snapshot_times: r.run.snapshots.iter().map(|s| s.t).collect(),
        records,
        diffusion: r.run.clone(),
        symmetric_field: symmetric,
        strong_data,
        forced: settings.force && !hypotheses.applicable,
        applicable: hypotheses.applicable,
        weak: StudyVerdict::Skipped,
        inclusion: StudyVerdict::Skipped,
        strong: StudyVerdict::Skipped,
        notes,
    };
    let weak_ok = (0..nsnap).all(|i| {
        let s = report.weak_series(i);
        strictly_decreasing(&s) && s[s.len() - 1] < settings.weak_ratio * s[0]
    });
    report.weak = if weak_ok {
        StudyVerdict::Pass
    } else {
        StudyVerdict::Fail
    };
    if problem.geom.num_inclusions() > 0 {
        let ok = (0..nsnap)
            .all(|i| (0..problem.geom.num_inclusions()).all(|l| strictly_decreasing(&report.flatness_series(i, l))));
        report.inclusion = if ok { StudyVerdict::Pass } else { StudyVerdict::Fail };
    }
    if strong {
        let ok = (0..nsnap).all(|i| report.strong_series(i).is_some_and(|s| strictly_decreasing(&s)));
        report.strong = if ok { StudyVerdict::Pass } else { StudyVerdict::Fail };
    }
    Ok(report)
}

pub fn weak_study(
    problem: &Problem,
    settings: &StudySettings,
    hypotheses: &HypothesisReport,
) -> Result<ConvergenceReport> {
    converge(problem, settings, hypotheses)
}

pub fn inclusion_study(
    problem: &Problem,
    settings: &StudySettings,
    hypotheses: &HypothesisReport,
) -> Result<ConvergenceReport> {
    if problem.geom.num_inclusions() == 0 {
        return Err(Error::InvalidArgument(
            "inclusion study needs at least one inclusion".into(),
        ));
    }
    converge(problem, settings, hypotheses)
}

pub fn strong_study(
    problem: &Problem,
    settings: &StudySettings,
    hypotheses: &HypothesisReport,
) -> Result<ConvergenceReport> {
    let field = assemble_field(&problem.kernel, &problem.geom, &problem.velocities)?;
    if !field.symmetric {
        return Err(Error::Refused(
            "M is not symmetric; strong convergence is not known in that case".into(),
        ));
    }
    let f_in = problem.initial.sample(&problem.geom, &problem.velocities)?;
    check_strong_data(&f_in, &problem.geom, problem.velocities.len())?;
    converge(problem, settings, hypotheses)
}
