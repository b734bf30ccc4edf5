//! TOML run configuration with a strict schema.
//!
//! ```toml
//! epsilon = [0.4, 0.2, 0.1, 0.05]
//!
//! [geometry]
//! lo = [0.0]
//! hi = [1.0]
//! cells = [200]
//! inclusions = [{ shape = "box", lo = [0.4], hi = [0.6] }]
//!
//! [velocity]
//! model = "gauss_legendre"
//! count = 8
//!
//! [kernel]
//! diffusive = { type = "isotropic", sigma = 1.0 }
//! inclusion = { base = { type = "isotropic", sigma = 1.0 }, scaling = { law = "linear" } }
//!
//! [initial]
//! terms = [{ kind = "sine", amplitude = 1.0 }]
//!
//! [time]
//! snapshots = [0.1]
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{build_geometry, Geometry, Grid, RegionShape};
use crate::harness::{strictly_decreasing, Problem, StudySettings};
use crate::initial::InitialSpec;
use crate::kinetic::KineticSettings;
use crate::linear::IterativeSettings;
use crate::scattering::{build_kernel, KernelConfig, KernelSpec};
use crate::velocity::{build_quadrature, QuadratureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Check,
    Diffmat,
    Kinetic,
    Diffusion,
    Converge,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Check => "check",
            Mode::Diffmat => "diffmat",
            Mode::Kinetic => "kinetic",
            Mode::Diffusion => "diffusion",
            Mode::Converge => "converge",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
    #[serde(default)]
    pub inclusions: Vec<RegionShape>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Defaults to the last snapshot.
    #[serde(default)]
    pub horizon: Option<f64>,
    pub snapshots: Vec<f64>,
    /// Kinetic step; defaults to `min(ε h, ε²/max a)/2`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub diffusion_dt: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub restart: usize,
    pub max_iterations: usize,
    pub max_source_iterations: usize,
    /// Relative tolerance on semi-detailed balance.
    pub sdb_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let it = IterativeSettings::default();
        Self {
            tolerance: it.tolerance,
            restart: it.restart,
            max_iterations: it.max_iterations,
            max_source_iterations: KineticSettings::default().max_source_iterations,
            sdb_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub interior_margin: f64,
    pub weak_ratio: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let s = StudySettings::default();
        Self {
            interior_margin: s.interior_margin,
            weak_ratio: s.weak_ratio,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub deterministic: bool,
    pub force: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Option<Mode>,
    pub epsilon: Vec<f64>,
    pub geometry: GeometryConfig,
    pub velocity: QuadratureSpec,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub initial: InitialSpec,
    pub time: TimeConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub source: String,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

/// Parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}:{msg}", path.display())),
        e => e,
    })
}

/// Parses config text; relative paths resolve against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, col) = e.span().map_or((0, 0), |s| line_column(text, s.start));
        Error::Config(format!("{line}:{col}: {}", e.message()))
    })?;
    cfg.base_dir = base_dir.to_path_buf();
    cfg.source = text.to_owned();
    cfg.resolve_paths();
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn resolve_paths(&mut self) {
        let fix = |cfg: &Self, spec: &mut KernelSpec| {
            if let KernelSpec::Tabulated { path } = spec {
                *path = cfg.resolve(path);
            }
        };
        let mut d = self.kernel.diffusive.clone();
        fix(self, &mut d);
        let mut b = self.kernel.inclusion.base.clone();
        fix(self, &mut b);
        self.kernel.diffusive = d;
        self.kernel.inclusion.base = b;
        if let Some(t) = &self.initial.table {
            self.initial.table = Some(self.resolve(t));
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epsilon.is_empty() {
            return err("epsilon: at least one value is required".into());
        }
        if let Some(e) = self.epsilon.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return err(format!("epsilon: values must be positive and finite, got {e}"));
        }
        if !strictly_decreasing(&self.epsilon) {
            return err(format!(
                "epsilon: ε must be strictly decreasing, got {:?}",
                self.epsilon
            ));
        }
        let t = &self.time;
        if t.snapshots.is_empty() {
            return err("time.snapshots: at least one time is required".into());
        }
        if t.snapshots.iter().any(|s| !(*s > 0.0)) || t.snapshots.windows(2).any(|w| w[1] <= w[0]) {
            return err(format!(
                "time.snapshots: times must be positive and strictly increasing, got {:?}",
                t.snapshots
            ));
        }
        let last = t.snapshots[t.snapshots.len() - 1];
        if let Some(h) = t.horizon {
            if last > h {
                return err(format!("time.snapshots: {last} lies beyond the horizon {h}"));
            }
        }
        for (key, v) in [("time.dt", t.dt), ("time.diffusion_dt", t.diffusion_dt)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return err(format!("{key}: must be positive, got {v}"));
                }
            }
        }
        let s = &self.solver;
        if !(s.tolerance > 0.0) || s.restart == 0 || s.max_iterations == 0 || !(s.sdb_tolerance >= 0.0) {
            return err("solver: tolerances must be positive and iteration counts nonzero".into());
        }
        if !(self.study.weak_ratio > 0.0) || !(self.study.interior_margin >= 0.0) {
            return err("study: weak_ratio must be positive and interior_margin nonnegative".into());
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.time
            .horizon
            .unwrap_or(self.time.snapshots[self.time.snapshots.len() - 1])
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.output.dir.as_ref().map(|d| self.resolve(d))
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let g = &self.geometry;
        build_geometry(Grid::new(g.lo.clone(), g.hi.clone(), g.cells.clone())?, &g.inclusions)
    }

    pub fn problem(&self) -> Result<Problem> {
        let geom = self.geometry()?;
        let velocities = build_quadrature(&self.velocity)?;
        if velocities.dim() != geom.dim() {
            return Err(Error::Config(format!(
                "velocity: model has dimension {} but the geometry has dimension {}",
                velocities.dim(),
                geom.dim()
            )));
        }
        let kernel = build_kernel(&self.kernel, &geom, &velocities, self.solver.sdb_tolerance)?;
        Ok(Problem {
            geom,
            velocities,
            kernel,
            initial: self.initial.clone(),
        })
    }

    pub fn kinetic_settings(&self) -> KineticSettings {
        KineticSettings {
            dt: self.time.dt,
            solver: IterativeSettings {
                tolerance: self.solver.tolerance,
                restart: self.solver.restart,
                max_iterations: self.solver.max_iterations,
            },
            max_source_iterations: self.solver.max_source_iterations,
            homogeneous: false,
        }
    }

    pub fn study_settings(&self, force: bool) -> StudySettings {
        StudySettings {
            epsilons: self.epsilon.clone(),
            snapshots: self.time.snapshots.clone(),
            kinetic: self.kinetic_settings(),
            diffusion_dt: self.time.diffusion_dt,
            interior_margin: self.study.interior_margin,
            weak_ratio: self.study.weak_ratio,
            force: force || self.output.force,
        }
    }

    /// Flat key-value list of the numeric tolerances, for metadata sidecars.
    pub fn tolerances(&self) -> Vec<(String, String)> {
        vec![
            ("solver.tolerance".into(), format!("{:e}", self.solver.tolerance)),
            ("solver.restart".into(), self.solver.restart.to_string()),
            ("solver.max_iterations".into(), self.solver.max_iterations.to_string()),
            (
                "solver.max_source_iterations".into(),
                self.solver.max_source_iterations.to_string(),
            ),
            (
                "solver.sdb_tolerance".into(),
                format!("{:e}", self.solver.sdb_tolerance),
            ),
            (
                "study.interior_margin".into(),
                format!("{}", self.study.interior_margin),
            ),
            ("study.weak_ratio".into(), format!("{}", self.study.weak_ratio)),
        ]
    }
}
