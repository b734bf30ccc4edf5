//! Subcommand orchestration: builds the problem from a config, runs one
//! mode and writes its artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use crate::config::{Mode, RunConfig};
use crate::diffusion::{self, assemble_operator, project_initial};
use crate::error::{Error, Result};
use crate::fredholm::assemble_field;
use crate::geometry::orbit::ergodicity_check;
use crate::harness::{self, ConvergenceReport, Problem};
use crate::kinetic::{KineticSolver, KineticState};
use crate::output::{key_values, loglog_svg, num, write_csv, write_text, Meta, Series};
use crate::scattering::hypothesis_report;
use crate::velocity::AdmissibilityTolerances;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Leave wall-clock timings out of every artifact.
    pub deterministic: bool,
    pub force: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// Every invariant check of the run held.
    pub invariants_ok: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    meta: Meta,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.dir.join(name);
        write_csv(&path, header, rows, &self.meta)?;
        self.files.push(path);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        write_text(&path, text)?;
        self.files.push(path);
        Ok(())
    }
}

/// Caps the global worker pool at `KINDIFF_THREADS` when it is set.
pub fn init_thread_pool() -> Result<Option<usize>> {
    let Ok(v) = std::env::var("KINDIFF_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("KINDIFF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(Some(n))
}

pub fn run_subcommand(mode: Mode, cfg: &RunConfig, opts: &RunOptions) -> Result<Outcome> {
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(Error::Config(format!(
                "config mode `{}` does not match subcommand `{}`",
                m.name(),
                mode.name()
            )));
        }
    }
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let deterministic = opts.deterministic || cfg.output.deterministic;
    let mut meta = Meta::new(cfg.source.as_bytes(), mode.name());
    meta.push("deterministic", deterministic.to_string());
    meta.extend(cfg.tolerances());
    let mut ctx = Ctx {
        cfg,
        dir,
        meta,
        files: Vec::new(),
    };
    let start = Instant::now();
    let problem = cfg.problem()?;
    let (ok, mut summary) = match mode {
        Mode::Check => check(&mut ctx, &problem)?,
        Mode::Diffmat => diffmat(&mut ctx, &problem)?,
        Mode::Kinetic => kinetic(&mut ctx, &problem)?,
        Mode::Diffusion => diffusion_run(&mut ctx, &problem)?,
        Mode::Converge => converge(&mut ctx, &problem, opts.force)?,
    };
    if !deterministic {
        summary.push_str(&format!("elapsed_seconds = {:.3}\n", start.elapsed().as_secs_f64()));
    }
    info!(
        "{} finished, {} files in {}",
        mode.name(),
        ctx.files.len(),
        ctx.dir.display()
    );
    Ok(Outcome {
        invariants_ok: ok,
        summary,
        files: ctx.files,
    })
}

/// Convenience wrapper that parses the config first.
pub fn run_config_file(mode: Mode, path: &Path, opts: &RunOptions) -> Result<Outcome> {
    let cfg = crate::config::parse_config(path)?;
    run_subcommand(mode, &cfg, opts)
}

fn check(ctx: &mut Ctx, p: &Problem) -> Result<(bool, String)> {
    let vel = &p.velocities;
    let adm = vel.check_admissibility(&AdmissibilityTolerances::default());
    let hyp = hypothesis_report(&p.kernel, &p.geom, vel, &ctx.cfg.epsilon)?;
    let mut kv: Vec<(String, String)> = adm
        .entries
        .iter()
        .flat_map(|e| {
            [
                (format!("velocity.{}.passed", e.name), e.passed.to_string()),
                (format!("velocity.{}.residual", e.name), num(e.residual)),
            ]
        })
        .collect();
    kv.extend(hyp.to_key_values());
    ctx.text("hypotheses.txt", &key_values(&kv))?;

    let dim = vel.dim();
    let mut header: Vec<String> = vec!["v_index".into()];
    header.extend((0..dim).map(|i| format!("v_{i}")));
    header.push("weight".into());
    let rows: Vec<Vec<String>> = (0..vel.len())
        .map(|k| {
            let mut r = vec![k.to_string()];
            r.extend(vel.node(k).iter().map(|x| num(*x)));
            r.push(num(vel.weight(k)));
            r
        })
        .collect();
    ctx.csv(
        "velocity_grid.csv",
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        rows,
    )?;

    let grid = p.geom.grid();
    let mut header: Vec<String> = vec!["cell_id".into()];
    header.extend((0..p.geom.dim()).map(|i| format!("x_{i}")));
    header.push("label".into());
    let rows: Vec<Vec<String>> = (0..p.geom.num_cells())
        .map(|c| {
            let mut r = vec![c.to_string()];
            r.extend(grid.center(c).iter().map(|x| num(*x)));
            r.push(p.geom.label(c).to_string());
            r
        })
        .collect();
    ctx.csv(
        "labels.csv",
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        rows,
    )?;

    let mut rows = Vec::new();
    let mut notes = String::new();
    for l in 0..p.geom.num_inclusions() {
        match ergodicity_check(&p.geom, l, vel) {
            Ok(rep) => {
                for (f, (face, comp)) in p.geom.inclusion_faces(l).iter().zip(&rep.orbit_components).enumerate() {
                    rows.push(vec![
                        (l + 1).to_string(),
                        f.to_string(),
                        face.cell.to_string(),
                        face.neighbor.map_or(String::new(), |n| n.to_string()),
                        comp.to_string(),
                    ]);
                }
            }
            Err(e) => notes.push_str(&format!("orbit components for B_{} unavailable: {e}\n", l + 1)),
        }
    }
    ctx.csv(
        "orbit_components.csv",
        &["inclusion", "face_index", "cell", "outside_cell", "component"],
        rows,
    )?;
    let mut summary = String::new();
    summary.push_str(&hyp.to_text());
    summary.push_str(&notes);
    if !adm.passed() {
        summary.push_str("velocity grid fails admissibility\n");
    }
    Ok((true, summary))
}

fn diffmat(ctx: &mut Ctx, p: &Problem) -> Result<(bool, String)> {
    let field = assemble_field(&p.kernel, &p.geom, &p.velocities)?;
    let dim = field.dim();
    let mut rows = Vec::new();
    for c in p.geom.diffusive_cells() {
        let m = field.matrix(c).expect("diffusive cell");
        for i in 0..dim {
            for j in 0..dim {
                rows.push(vec![c.to_string(), i.to_string(), j.to_string(), num(m[(i, j)])]);
            }
        }
    }
    ctx.csv("diffusion_matrix.csv", &["cell_id", "i", "j", "m_ij"], rows)?;
    let mut rows = Vec::new();
    for c in p.geom.diffusive_cells() {
        let sol = field.solution(c).expect("diffusive cell");
        for i in 0..dim {
            for k in 0..p.velocities.len() {
                rows.push(vec![
                    c.to_string(),
                    i.to_string(),
                    k.to_string(),
                    num(sol.b[i][k]),
                    num(sol.b_star[i][k]),
                ]);
            }
        }
    }
    ctx.csv("correctors.csv", &["cell_id", "i", "v_index", "b", "b_star"], rows)?;
    let kv = vec![
        ("c_k".to_string(), num(field.c_k)),
        ("beta".to_string(), num(field.beta)),
        ("symmetric".to_string(), field.symmetric.to_string()),
        ("coercivity_bound".to_string(), num(field.beta / (2.0 * field.c_k))),
        ("coercivity_observed".to_string(), num(field.coercivity_observed)),
        ("entry_bound_factor".to_string(), num(2.0 * field.c_k)),
        ("max_eigenvalue".to_string(), num(field.max_eigenvalue)),
        ("max_asymmetry".to_string(), num(field.max_asymmetry)),
        ("max_duality_residual".to_string(), num(field.max_duality_residual)),
        ("bounds".to_string(), "ok".to_string()),
    ];
    let text = key_values(&kv);
    ctx.text("diffmat_summary.txt", &text)?;
    Ok((true, text))
}

fn kinetic(ctx: &mut Ctx, p: &Problem) -> Result<(bool, String)> {
    let nv = p.velocities.len();
    let dim = p.velocities.dim();
    let f_in = p.initial.sample(&p.geom, &p.velocities)?;
    let mut ok = true;
    let mut summary = String::new();
    for (e, &eps) in ctx.cfg.epsilon.iter().enumerate() {
        let solver = KineticSolver::new(&p.geom, &p.velocities, &p.kernel, eps, ctx.cfg.kinetic_settings())?;
        let initial = KineticState {
            t: 0.0,
            eps,
            f: f_in.clone(),
        };
        let run = solver.run(&initial, &ctx.cfg.time.snapshots)?;
        let states = std::iter::once(&initial).chain(run.snapshots.iter());
        let mut rows = Vec::new();
        let mut current = Vec::new();
        for s in states {
            for c in 0..p.geom.num_cells() {
                for k in 0..nv {
                    rows.push(vec![num(s.t), c.to_string(), k.to_string(), num(s.f[c * nv + k])]);
                }
                if p.geom.is_diffusive(c) {
                    let mut r = vec![num(s.t), c.to_string()];
                    r.extend(solver.current(&s.f, c).iter().map(|x| num(*x)));
                    current.push(r);
                }
            }
        }
        ctx.csv(
            &format!("kinetic_eps{e}_trajectory.csv"),
            &["t", "cell_id", "v_index", "f"],
            rows,
        )?;
        let mut header: Vec<String> = vec!["t".into(), "cell_id".into()];
        header.extend((0..dim).map(|i| format!("j_{i}")));
        ctx.csv(
            &format!("kinetic_eps{e}_current.csv"),
            &header.iter().map(String::as_str).collect::<Vec<_>>(),
            current,
        )?;
        let rows = run.steps.iter().map(|d| {
            vec![
                num(d.t),
                num(d.dt),
                num(d.mass),
                num(d.outflow),
                num(d.mass_residual),
                num(d.norm2),
                num(d.production),
                num(d.entropy_defect),
                num(d.min_f),
                d.iterations.to_string(),
                num(d.solver_residual),
                d.fallback.to_string(),
            ]
        });
        ctx.csv(
            &format!("kinetic_eps{e}_diagnostics.csv"),
            &[
                "t",
                "dt",
                "mass",
                "outflow",
                "mass_residual",
                "norm2",
                "production",
                "entropy_defect",
                "min_f",
                "iterations",
                "solver_residual",
                "fallback",
            ],
            rows,
        )?;
        if !run.checks_passed() {
            warn!("ε = {eps}: kinetic invariant check failed");
        }
        ok &= run.checks_passed();
        summary.push_str(&format!(
            "eps = {eps}: steps = {}, max_mass_residual = {}, max_entropy_defect = {}, min_f = {}, total_production = {}, checks = {}\n",
            run.steps.len(),
            num(run.max_mass_residual),
            num(run.max_entropy_defect),
            num(run.min_f),
            num(run.total_production),
            if run.checks_passed() { "ok" } else { "FAILED" }
        ));
    }
    ctx.text("kinetic_summary.txt", &summary)?;
    Ok((ok, summary))
}

fn diffusion_run(ctx: &mut Ctx, p: &Problem) -> Result<(bool, String)> {
    let field = assemble_field(&p.kernel, &p.geom, &p.velocities)?;
    let op = assemble_operator(&p.geom, &field)?;
    let f_in = p.initial.sample(&p.geom, &p.velocities)?;
    let rho0 = project_initial(&f_in, &p.geom, &p.velocities);
    let dt = ctx
        .cfg
        .time
        .diffusion_dt
        .unwrap_or_else(|| harness::default_diffusion_dt(&p.geom, ctx.cfg.horizon()));
    let run = diffusion::run(&op, &rho0, dt, &ctx.cfg.time.snapshots)?;
    let mut rows = Vec::new();
    for s in std::iter::once(&rho0).chain(run.snapshots.iter()) {
        for (c, v) in op.cell_values(s).iter().enumerate() {
            rows.push(vec![num(s.t), c.to_string(), num(*v)]);
        }
    }
    ctx.csv("diffusion_trajectory.csv", &["t", "cell_id", "rho"], rows)?;
    let rows = run.steps.iter().map(|d| {
        vec![
            num(d.t),
            num(d.dt),
            num(d.energy),
            num(d.dissipation),
            num(d.energy_defect),
            num(d.mass),
            num(d.outflow),
            num(d.mass_residual),
            num(d.inclusion_flux_residual),
        ]
    });
    ctx.csv(
        "diffusion_diagnostics.csv",
        &[
            "t",
            "dt",
            "energy",
            "dissipation",
            "energy_defect",
            "mass",
            "outflow",
            "mass_residual",
            "inclusion_flux_residual",
        ],
        rows,
    )?;
    let text = key_values(&[
        ("dt".into(), num(dt)),
        ("steps".into(), run.steps.len().to_string()),
        ("initial_energy".into(), num(run.initial_energy)),
        ("total_defect".into(), num(run.total_defect)),
        ("max_defect".into(), num(run.max_defect)),
        ("max_mass_residual".into(), num(run.max_mass_residual)),
        (
            "max_inclusion_flux_residual".into(),
            num(run.max_inclusion_flux_residual),
        ),
        (
            "checks".into(),
            if run.checks_passed() { "ok" } else { "FAILED" }.into(),
        ),
    ]);
    ctx.text("diffusion_summary.txt", &text)?;
    Ok((run.checks_passed(), text))
}

fn converge(ctx: &mut Ctx, p: &Problem, force: bool) -> Result<(bool, String)> {
    let hyp = hypothesis_report(&p.kernel, &p.geom, &p.velocities, &ctx.cfg.epsilon)?;
    let settings = ctx.cfg.study_settings(force);
    let report = harness::converge(p, &settings, &hyp)?;
    write_report(ctx, &report)?;
    let mut summary = hyp.to_text();
    summary.push_str(&report.summary());
    ctx.text("convergence_summary.txt", &summary)?;
    Ok((report.invariants_ok(), summary))
}

fn write_report(ctx: &mut Ctx, r: &ConvergenceReport) -> Result<()> {
    let mut rows = Vec::new();
    for rec in &r.records {
        for s in &rec.snapshots {
            let st = s.strong.as_ref();
            let opt = |v: Option<f64>| v.map_or(String::new(), num);
            rows.push(vec![
                num(rec.eps),
                num(s.t),
                num(s.weak_error),
                num(s.weak_error_interior),
                num(s.flux_residual),
                num(s.current_residual),
                num(s.flux_identity_residual),
                opt(st.map(|x| x.strong_error)),
                opt(st.map(|x| x.production_slack)),
                opt(st.map(|x| x.production_gap)),
                opt(st.map(|x| x.production_gap_min)),
                num(s.pairing),
                num(rec.total_production),
            ]);
        }
    }
    ctx.csv(
        "convergence.csv",
        &[
            "eps",
            "t",
            "weak_error",
            "weak_error_interior",
            "flux_residual",
            "current_residual",
            "flux_identity_residual",
            "strong_error",
            "production_slack",
            "production_gap",
            "production_gap_min",
            "pairing",
            "q_entropy",
        ],
        rows,
    )?;
    let rows = r.records.iter().map(|rec| {
        vec![
            num(rec.eps),
            rec.steps.to_string(),
            num(rec.max_mass_residual),
            num(rec.max_entropy_defect),
            rec.positivity.to_string(),
            num(rec.initial_norm2),
            num(rec.max_norm2),
            num(rec.total_production),
            num(rec.max_flux_identity_residual),
            num(rec.equicontinuity_ratio),
            rec.invariants_ok().to_string(),
        ]
    });
    ctx.csv(
        "invariants.csv",
        &[
            "eps",
            "steps",
            "max_mass_residual",
            "max_entropy_defect",
            "positivity",
            "initial_norm2",
            "max_norm2",
            "q_entropy",
            "max_flux_identity_residual",
            "equicontinuity_ratio",
            "ok",
        ],
        rows,
    )?;
    let ninc = r
        .records
        .first()
        .map_or(0, |x| x.snapshots.first().map_or(0, |s| s.flatness.len()));
    if ninc > 0 {
        let mut rows = Vec::new();
        for rec in &r.records {
            for s in &rec.snapshots {
                for l in 0..ninc {
                    rows.push(vec![
                        num(rec.eps),
                        num(s.t),
                        (l + 1).to_string(),
                        num(s.flatness[l]),
                        num(s.velocity_split[l]),
                        num(s.inclusion_mean[l]),
                        num(s.inclusion_reference[l]),
                    ]);
                }
            }
        }
        ctx.csv(
            "inclusions.csv",
            &[
                "eps",
                "t",
                "inclusion",
                "flatness",
                "velocity_split",
                "kinetic_mean",
                "diffusion_value",
            ],
            rows,
        )?;
    }

    let per_snapshot = |f: &dyn Fn(usize) -> Vec<f64>| -> Vec<Series> {
        r.snapshot_times
            .iter()
            .enumerate()
            .map(|(i, t)| Series {
                name: format!("t = {t}"),
                points: r.epsilons.iter().copied().zip(f(i)).collect(),
            })
            .collect()
    };
    let weak = per_snapshot(&|i| r.weak_series(i));
    ctx.text(
        "weak_error.svg",
        &loglog_svg("weak error", "eps", "||<f> - rho||", &weak),
    )?;
    let flux = per_snapshot(&|i| r.records.iter().map(|x| x.snapshots[i].flux_residual).collect());
    ctx.text(
        "flux_residual.svg",
        &loglog_svg("flux residual", "eps", "residual", &flux),
    )?;
    if ninc > 0 {
        let mut series = Vec::new();
        for l in 0..ninc {
            for (i, t) in r.snapshot_times.iter().enumerate() {
                series.push(Series {
                    name: format!("B_{} t = {t}", l + 1),
                    points: r.epsilons.iter().copied().zip(r.flatness_series(i, l)).collect(),
                });
            }
        }
        ctx.text(
            "flatness.svg",
            &loglog_svg("inclusion flatness", "eps", "flatness", &series),
        )?;
    }
    if r.records.iter().all(|x| x.snapshots.iter().all(|s| s.strong.is_some())) {
        let strong = per_snapshot(&|i| r.strong_series(i).unwrap_or_default());
        ctx.text(
            "strong_error.svg",
            &loglog_svg("strong error", "eps", "strong error", &strong),
        )?;
    }
    Ok(())
}
