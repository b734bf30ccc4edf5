//! Initial data: closed-form spatial densities times a velocity profile, or
//! tabulated values.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, RegionShape};
use crate::velocity::VelocityGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialTerm {
    Constant {
        value: f64,
    },
    /// `amplitude · Π_d sin(m_d π (x_d − lo_d) / L_d)`, all modes 1 by default.
    Sine {
        amplitude: f64,
        #[serde(default)]
        modes: Option<Vec<u32>>,
    },
    Gaussian {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    Indicator {
        region: RegionShape,
        value: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityProfile {
    #[default]
    Isotropic,
    /// `1 + c·v`.
    Linear { coefficients: Vec<f64> },
    /// One factor per velocity node.
    Nodes { values: Vec<f64> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default)]
    pub terms: Vec<SpatialTerm>,
    #[serde(default)]
    pub velocity: VelocityProfile,
    /// Replace the density on each inclusion by its inclusion average.
    #[serde(default)]
    pub project_inclusions: bool,
    /// CSV rows `(cell_id, v_index, value)`; excludes `terms`.
    #[serde(default)]
    pub table: Option<PathBuf>,
}

impl InitialSpec {
    pub fn sine() -> Self {
        Self {
            terms: vec![SpatialTerm::Sine {
                amplitude: 1.0,
                modes: None,
            }],
            ..Default::default()
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            terms: vec![SpatialTerm::Constant { value }],
            ..Default::default()
        }
    }

    /// Spatial factor at every cell center.
    pub fn density(&self, geom: &Geometry) -> Result<Vec<f64>> {
        let grid = geom.grid();
        let dim = grid.dim();
        let mut rho = vec![0.0; geom.num_cells()];
        for (cell, r) in rho.iter_mut().enumerate() {
            let x = grid.center(cell);
            for term in &self.terms {
                *r += match term {
                    SpatialTerm::Constant { value } => *value,
                    SpatialTerm::Sine { amplitude, modes } => {
                        let mut p = *amplitude;
                        for d in 0..dim {
                            let m = modes.as_ref().map_or(1, |m| m.get(d).copied().unwrap_or(1));
                            let len = grid.hi()[d] - grid.lo()[d];
                            p *= (m as f64 * std::f64::consts::PI * (x[d] - grid.lo()[d]) / len).sin();
                        }
                        p
                    }
                    SpatialTerm::Gaussian {
                        amplitude,
                        center,
                        width,
                    } => {
                        if center.len() != dim {
                            return Err(Error::InitialData(format!(
                                "gaussian center {center:?} does not match dimension {dim}"
                            )));
                        }
                        let r2: f64 = (0..dim).map(|d| (x[d] - center[d]).powi(2)).sum();
                        amplitude * (-r2 / (width * width)).exp()
                    }
                    SpatialTerm::Indicator { region, value } => {
                        if region.contains(grid, cell)? {
                            *value
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
        if self.project_inclusions {
            for l in 0..geom.num_inclusions() {
                let cells = geom.inclusion_cells(l);
                let mean = cells.iter().map(|&c| rho[c]).sum::<f64>() / cells.len() as f64;
                for &c in cells {
                    rho[c] = mean;
                }
            }
        }
        Ok(rho)
    }

    fn profile(&self, velocities: &VelocityGrid) -> Result<Vec<f64>> {
        match &self.velocity {
            VelocityProfile::Isotropic => Ok(vec![1.0; velocities.len()]),
            VelocityProfile::Linear { coefficients } => {
                if coefficients.len() != velocities.dim() {
                    return Err(Error::InitialData(format!(
                        "{} linear coefficients for dimension {}",
                        coefficients.len(),
                        velocities.dim()
                    )));
                }
                Ok(velocities
                    .nodes()
                    .map(|v| 1.0 + v.iter().zip(coefficients).map(|(a, b)| a * b).sum::<f64>())
                    .collect())
            }
            VelocityProfile::Nodes { values } => {
                if values.len() != velocities.len() {
                    return Err(Error::InitialData(format!(
                        "{} profile values for {} velocity nodes",
                        values.len(),
                        velocities.len()
                    )));
                }
                Ok(values.clone())
            }
        }
    }

    /// `f^in` at cell centers, cell-major `f[cell * V + k]`.
    pub fn sample(&self, geom: &Geometry, velocities: &VelocityGrid) -> Result<Vec<f64>> {
        let nv = velocities.len();
        let f = if let Some(path) = &self.table {
            if !self.terms.is_empty() || self.velocity != VelocityProfile::Isotropic {
                return Err(Error::InitialData(
                    "a tabulated initial field cannot be combined with terms or a velocity profile".into(),
                ));
            }
            let mut f = vec![0.0; geom.num_cells() * nv];
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
            for record in reader.deserialize::<(usize, usize, f64)>() {
                let (cell, k, value) = record?;
                if cell >= geom.num_cells() || k >= nv {
                    return Err(Error::InitialData(format!(
                        "{}: index ({cell}, {k}) out of range",
                        path.display()
                    )));
                }
                f[cell * nv + k] = value;
            }
            if self.project_inclusions {
                project_field(&mut f, geom, nv);
            }
            f
        } else {
            let rho = self.density(geom)?;
            let g = self.profile(velocities)?;
            rho.iter().flat_map(|r| g.iter().map(move |gk| r * gk)).collect()
        };
        if let Some(pos) = f.iter().position(|x| !(*x >= 0.0)) {
            return Err(Error::InitialData(format!(
                "initial data is negative ({}) at cell {}, velocity {}",
                f[pos],
                pos / nv,
                pos % nv
            )));
        }
        Ok(f)
    }
}

fn project_field(f: &mut [f64], geom: &Geometry, nv: usize) {
    for l in 0..geom.num_inclusions() {
        let cells = geom.inclusion_cells(l);
        for k in 0..nv {
            let mean = cells.iter().map(|&c| f[c * nv + k]).sum::<f64>() / cells.len() as f64;
            for &c in cells {
                f[c * nv + k] = mean;
            }
        }
    }
}

/// Checks the strong-convergence preconditions on sampled data: no velocity
/// dependence and a constant value on each inclusion.
pub fn check_strong_data(f: &[f64], geom: &Geometry, nv: usize) -> Result<()> {
    let scale = f.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    for cell in 0..geom.num_cells() {
        let row = &f[cell * nv..(cell + 1) * nv];
        if row.iter().any(|x| (x - row[0]).abs() > tol) {
            return Err(Error::InitialData(format!(
                "strong mode needs velocity-independent initial data; cell {cell} varies in v"
            )));
        }
    }
    for l in 0..geom.num_inclusions() {
        let cells = geom.inclusion_cells(l);
        let first = f[cells[0] * nv];
        if cells.iter().any(|&c| (f[c * nv] - first).abs() > tol) {
            return Err(Error::InitialData(format!(
                "strong mode needs initial data constant on each inclusion; B_{} is not",
                l + 1
            )));
        }
    }
    Ok(())
}
