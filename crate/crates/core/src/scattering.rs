//! Scattering kernels, the rate `a`, the constant `C_K` and the hypothesis
//! checker.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ergodicity_check, Geometry, RegionShape};
use crate::velocity::VelocityGrid;

/// ε-dependence of the kernel on the inclusions: `k_ε = s(ε) k_base`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalingLaw {
    Zero,
    Linear,
    Quadratic,
    Log { gamma: f64 },
    Constant,
}

impl ScalingLaw {
    pub fn factor(&self, eps: f64) -> f64 {
        match *self {
            ScalingLaw::Zero => 0.0,
            ScalingLaw::Linear => eps,
            ScalingLaw::Quadratic => eps * eps,
            ScalingLaw::Log { gamma } => eps.ln().abs().powf(-gamma),
            ScalingLaw::Constant => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScalingLaw::Zero => "zero",
            ScalingLaw::Linear => "linear",
            ScalingLaw::Quadratic => "quadratic",
            ScalingLaw::Log { .. } => "log",
            ScalingLaw::Constant => "constant",
        }
    }

    /// Whether `s(ε) → 0`.
    fn vanishes(&self) -> bool {
        !matches!(self, ScalingLaw::Constant)
    }

    /// Whether `ε² / s(ε) → 0`.
    fn beats_eps_squared(&self) -> bool {
        match self {
            ScalingLaw::Zero | ScalingLaw::Quadratic => false,
            ScalingLaw::Linear | ScalingLaw::Log { .. } | ScalingLaw::Constant => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaRegion {
    pub region: RegionShape,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `k ≡ σ(x)`; later regions override earlier ones and the default.
    Isotropic {
        sigma: f64,
        #[serde(default)]
        regions: Vec<SigmaRegion>,
    },
    /// `k = max(c0 + c1 v·w, 0)`.
    AnisotropicDot { c0: f64, c1: f64 },
    /// The same `V×V` table `values[v][w]` in every cell.
    Matrix { values: Vec<Vec<f64>> },
    /// CSV rows `(cell_id, v_index, w_index, value)`; missing pairs are 0.
    Tabulated { path: PathBuf },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Isotropic {
            sigma: 1.0,
            regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionKernelSpec {
    #[serde(default)]
    pub base: KernelSpec,
    pub scaling: ScalingLaw,
}

impl Default for InclusionKernelSpec {
    fn default() -> Self {
        Self {
            base: KernelSpec::default(),
            scaling: ScalingLaw::Zero,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default)]
    pub diffusive: KernelSpec,
    #[serde(default)]
    pub inclusion: InclusionKernelSpec,
}

#[derive(Debug, Clone)]
pub struct Kernel {
    nv: usize,
    /// Distinct `V×V` tables, row-major `k[v * nv + w]`.
    tables: Vec<Vec<f64>>,
    cell_table: Vec<usize>,
    in_inclusion: Vec<bool>,
    scaling: ScalingLaw,
    sdb_residual: f64,
}

impl Kernel {
    /// Builds a kernel from one table per cell and validates it.
    pub fn from_cell_tables(
        per_cell: Vec<Vec<f64>>,
        in_inclusion: Vec<bool>,
        scaling: ScalingLaw,
        velocities: &VelocityGrid,
        sdb_tolerance: f64,
    ) -> Result<Self> {
        let nv = velocities.len();
        let mut tables: Vec<Vec<f64>> = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut first_cell = Vec::new();
        let mut cell_table = Vec::with_capacity(per_cell.len());
        for (cell, table) in per_cell.into_iter().enumerate() {
            if table.len() != nv * nv {
                return Err(Error::Kernel(format!(
                    "cell {cell}: table has {} entries, expected {}",
                    table.len(),
                    nv * nv
                )));
            }
            let key: Vec<u64> = table.iter().map(|x| x.to_bits()).collect();
            let id = *seen.entry(key).or_insert_with(|| {
                tables.push(table);
                first_cell.push(cell);
                tables.len() - 1
            });
            cell_table.push(id);
        }
        let mut sdb_residual: f64 = 0.0;
        for (id, table) in tables.iter().enumerate() {
            let cell = first_cell[id];
            if let Some(pos) = table.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Kernel(format!(
                    "cell {cell}: entry k(v={}, w={}) = {} is not a nonnegative number",
                    pos / nv,
                    pos % nv,
                    table[pos]
                )));
            }
            let (res, v) = sdb_residual_of(table, velocities.weights());
            let scale = row_sums(table, velocities.weights())
                .into_iter()
                .fold(1.0_f64, f64::max);
            if res > sdb_tolerance * scale {
                return Err(Error::Kernel(format!(
                    "semi-detailed balance fails at cell {cell}, v index {v}: row and column integrals differ by {res:e}"
                )));
            }
            sdb_residual = sdb_residual.max(res);
        }
        Ok(Self {
            nv,
            tables,
            cell_table,
            in_inclusion,
            scaling,
            sdb_residual,
        })
    }

    pub fn num_velocities(&self) -> usize {
        self.nv
    }

    pub fn num_cells(&self) -> usize {
        self.cell_table.len()
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn table_id(&self, cell: usize) -> usize {
        self.cell_table[cell]
    }

    /// Unscaled table; multiply by [`Kernel::scale`] for the effective kernel.
    pub fn table(&self, id: usize) -> &[f64] {
        &self.tables[id]
    }

    pub fn cell_base(&self, cell: usize) -> &[f64] {
        &self.tables[self.cell_table[cell]]
    }

    pub fn scale(&self, cell: usize, eps: f64) -> f64 {
        if self.in_inclusion[cell] {
            self.scaling.factor(eps)
        } else {
            1.0
        }
    }

    pub fn in_inclusion(&self, cell: usize) -> bool {
        self.in_inclusion[cell]
    }

    pub fn scaling(&self) -> ScalingLaw {
        self.scaling
    }

    pub fn entry(&self, cell: usize, v: usize, w: usize, eps: f64) -> f64 {
        self.scale(cell, eps) * self.cell_base(cell)[v * self.nv + w]
    }

    /// `a(x, v) = Σ_w w_w k(x, v, w)` at every node.
    pub fn rate(&self, cell: usize, eps: f64, velocities: &VelocityGrid) -> Vec<f64> {
        let s = self.scale(cell, eps);
        row_sums(self.cell_base(cell), velocities.weights())
            .into_iter()
            .map(|a| s * a)
            .collect()
    }

    pub fn sdb_residual(&self) -> f64 {
        self.sdb_residual
    }

    /// Distinct table ids used by diffusive cells, in first-use order.
    pub fn diffusive_tables(&self) -> Vec<usize> {
        self.tables_where(|c| !self.in_inclusion[c])
    }

    pub fn inclusion_tables(&self) -> Vec<usize> {
        self.tables_where(|c| self.in_inclusion[c])
    }

    fn tables_where(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        let mut used = vec![false; self.tables.len()];
        let mut out = Vec::new();
        for (cell, &id) in self.cell_table.iter().enumerate() {
            if pred(cell) && !used[id] {
                used[id] = true;
                out.push(id);
            }
        }
        out
    }
}

pub(crate) fn row_sums(table: &[f64], weights: &[f64]) -> Vec<f64> {
    let nv = weights.len();
    (0..nv)
        .map(|v| (0..nv).map(|w| weights[w] * table[v * nv + w]).sum())
        .collect()
}

fn col_sums(table: &[f64], weights: &[f64]) -> Vec<f64> {
    let nv = weights.len();
    (0..nv)
        .map(|v| (0..nv).map(|w| weights[w] * table[w * nv + v]).sum())
        .collect()
}

/// Largest `|Σ_w w_w k(v,w) − Σ_w w_w k(w,v)|` and the node attaining it.
pub fn sdb_residual_of(table: &[f64], weights: &[f64]) -> (f64, usize) {
    let rows = row_sums(table, weights);
    let cols = col_sums(table, weights);
    rows.iter()
        .zip(&cols)
        .map(|(r, c)| (r - c).abs())
        .enumerate()
        .fold(
            (0.0, 0),
            |(best, arg), (v, d)| if d > best { (d, v) } else { (best, arg) },
        )
}

pub fn build_kernel(
    config: &KernelConfig,
    geom: &Geometry,
    velocities: &VelocityGrid,
    sdb_tolerance: f64,
) -> Result<Kernel> {
    let n = geom.num_cells();
    let in_inclusion: Vec<bool> = (0..n).map(|c| !geom.is_diffusive(c)).collect();
    let diffusive = tables_for(&config.diffusive, geom, velocities, |c| geom.is_diffusive(c))?;
    let inclusion = if geom.num_inclusions() > 0 {
        tables_for(&config.inclusion.base, geom, velocities, |c| !geom.is_diffusive(c))?
    } else {
        vec![None; n]
    };
    let per_cell = diffusive
        .into_iter()
        .zip(inclusion)
        .map(|(a, b)| a.or(b).expect("every cell is assigned"))
        .collect();
    Kernel::from_cell_tables(
        per_cell,
        in_inclusion,
        config.inclusion.scaling,
        velocities,
        sdb_tolerance,
    )
}

fn tables_for(
    spec: &KernelSpec,
    geom: &Geometry,
    velocities: &VelocityGrid,
    select: impl Fn(usize) -> bool,
) -> Result<Vec<Option<Vec<f64>>>> {
    let nv = velocities.len();
    let grid = geom.grid();
    let n = geom.num_cells();
    let tabulated = match spec {
        KernelSpec::Tabulated { path } => Some(read_tabulated(path, n, nv)?),
        _ => None,
    };
    let mut out = vec![None; n];
    for (cell, slot) in out.iter_mut().enumerate() {
        if !select(cell) {
            continue;
        }
        let table = match spec {
            KernelSpec::Isotropic { sigma, regions } => {
                let mut s = *sigma;
                for r in regions.iter() {
                    if r.region.contains(grid, cell)? {
                        s = r.sigma;
                    }
                }
                vec![s; nv * nv]
            }
            KernelSpec::AnisotropicDot { c0, c1 } => {
                let mut t = vec![0.0; nv * nv];
                for v in 0..nv {
                    for w in 0..nv {
                        let dot: f64 = velocities
                            .node(v)
                            .iter()
                            .zip(velocities.node(w))
                            .map(|(a, b)| a * b)
                            .sum();
                        t[v * nv + w] = (c0 + c1 * dot).max(0.0);
                    }
                }
                t
            }
            KernelSpec::Matrix { values } => {
                if values.len() != nv || values.iter().any(|r| r.len() != nv) {
                    return Err(Error::Kernel(format!(
                        "matrix kernel must be {nv}×{nv} to match the velocity grid"
                    )));
                }
                values.iter().flatten().copied().collect()
            }
            KernelSpec::Tabulated { path } => {
                let tab = tabulated.as_ref().expect("read above");
                tab[cell]
                    .clone()
                    .ok_or_else(|| Error::Kernel(format!("{}: no entries for cell {cell}", path.display())))?
            }
        };
        *slot = Some(table);
    }
    Ok(out)
}

fn read_tabulated(path: &std::path::Path, n: usize, nv: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
    for (row, record) in reader.deserialize::<(usize, usize, usize, f64)>().enumerate() {
        let (cell, v, w, value) = record?;
        if cell >= n || v >= nv || w >= nv {
            return Err(Error::Kernel(format!(
                "{} row {}: index ({cell}, {v}, {w}) out of range",
                path.display(),
                row + 2
            )));
        }
        out[cell].get_or_insert_with(|| vec![0.0; nv * nv])[v * nv + w] = value;
    }
    Ok(out)
}

/// Random kernel satisfying semi-detailed balance: a positive symmetric part
/// plus weighted positive cycles, each of which balances row and column
/// integrals exactly.
pub fn random_sdb_table<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<f64> {
    let nv = weights.len();
    let mut t = vec![0.0; nv * nv];
    for v in 0..nv {
        for w in v..nv {
            let s = rng.random_range(0.2..2.0);
            t[v * nv + w] = s;
            t[w * nv + v] = s;
        }
    }
    let cycles = rng.random_range(1..=3);
    for _ in 0..cycles {
        let len = rng.random_range(2..=nv.max(2));
        let mut nodes: Vec<usize> = (0..nv).collect();
        for i in (1..nv).rev() {
            nodes.swap(i, rng.random_range(0..=i));
        }
        let c = rng.random_range(0.05..0.5) / nv as f64;
        for i in 0..len {
            let (p, q) = (nodes[i], nodes[(i + 1) % len]);
            t[p * nv + q] += c / (weights[p] * weights[q]);
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct KernelMetrics {
    pub c_k: f64,
    pub sdb_residual: f64,
    pub max_rate_diffusive: f64,
    pub epsilons: Vec<f64>,
    /// `sup_{B×V} a_ε` per ε (0 without inclusions).
    pub sup_a_on_b: Vec<f64>,
    /// `ε² sup_{B×V} Σ_w w_w / k_ε` per ε.
    pub h3_margin: Vec<f64>,
}

/// `sup_v Σ_w w_w (k(v,w) + 1/k(v,w) + 1/k(w,v))`, infinite at any zero entry.
pub fn c_k_of(table: &[f64], weights: &[f64]) -> f64 {
    let nv = weights.len();
    let mut sup: f64 = 0.0;
    for v in 0..nv {
        let mut s = 0.0;
        for w in 0..nv {
            let (kvw, kwv) = (table[v * nv + w], table[w * nv + v]);
            if kvw <= 0.0 || kwv <= 0.0 {
                return f64::INFINITY;
            }
            s += weights[w] * (kvw + 1.0 / kvw + 1.0 / kwv);
        }
        sup = sup.max(s);
    }
    sup
}

pub fn compute_metrics(kernel: &Kernel, velocities: &VelocityGrid, epsilons: &[f64]) -> KernelMetrics {
    let weights = velocities.weights();
    let a_tables = kernel.diffusive_tables();
    let per_table: Vec<(f64, f64)> = a_tables
        .par_iter()
        .map(|&id| {
            let t = kernel.table(id);
            let amax = row_sums(t, weights).into_iter().fold(0.0, f64::max);
            (c_k_of(t, weights), amax)
        })
        .collect();
    let c_k = per_table.iter().fold(0.0_f64, |m, p| m.max(p.0));
    let max_rate_diffusive = per_table.iter().fold(0.0_f64, |m, p| m.max(p.1));

    let b_tables = kernel.inclusion_tables();
    let mut base_a: f64 = 0.0;
    let mut base_inv: f64 = 0.0;
    for &id in &b_tables {
        let t = kernel.table(id);
        base_a = row_sums(t, weights).into_iter().fold(base_a, f64::max);
        let nv = weights.len();
        for v in 0..nv {
            let s: f64 = (0..nv)
                .map(|w| {
                    let k = t[v * nv + w];
                    if k > 0.0 {
                        weights[w] / k
                    } else {
                        f64::INFINITY
                    }
                })
                .sum();
            base_inv = base_inv.max(s);
        }
    }
    let law = kernel.scaling();
    let (sup_a_on_b, h3_margin) = epsilons
        .iter()
        .map(|&eps| {
            if b_tables.is_empty() {
                return (0.0, 0.0);
            }
            let s = law.factor(eps);
            let margin = if s > 0.0 {
                eps * eps * base_inv / s
            } else {
                f64::INFINITY
            };
            (s * base_a, margin)
        })
        .unzip();
    KernelMetrics {
        c_k,
        sdb_residual: kernel.sdb_residual(),
        max_rate_diffusive,
        epsilons: epsilons.to_vec(),
        sup_a_on_b,
        h3_margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    fn holds(self) -> bool {
        self != Verdict::Fail
    }

    fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::NotApplicable => "not_applicable",
        })
    }
}

#[derive(Debug, Clone)]
pub struct HypothesisEntry {
    pub name: &'static str,
    pub verdict: Verdict,
    pub evidence: String,
}

#[derive(Debug, Clone)]
pub struct HypothesisReport {
    pub entries: Vec<HypothesisEntry>,
    pub metrics: KernelMetrics,
    pub ergodic: Vec<bool>,
    pub applicable: bool,
}

impl HypothesisReport {
    pub fn verdict(&self, name: &str) -> Verdict {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.verdict)
            .unwrap_or(Verdict::NotApplicable)
    }

    /// Name of the first hypothesis responsible for a negative overall verdict.
    pub fn failing(&self) -> Option<String> {
        if self.applicable {
            return None;
        }
        for name in ["H1", "H2"] {
            if self.verdict(name) == Verdict::Fail {
                return Some(name.to_string());
            }
        }
        Some("H3/H4".to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{:<3} {:<15} {}\n", e.name, e.verdict.to_string(), e.evidence));
        }
        s.push_str(&format!(
            "overall: {}\n",
            if self.applicable {
                "diffusion limit theorem applicable"
            } else {
                "not applicable"
            }
        ));
        s
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        for e in &self.entries {
            kv.push((format!("{}.verdict", e.name), e.verdict.to_string()));
        }
        kv.push(("c_k".into(), format!("{:e}", self.metrics.c_k)));
        kv.push(("sdb_residual".into(), format!("{:e}", self.metrics.sdb_residual)));
        for (i, eps) in self.metrics.epsilons.iter().enumerate() {
            kv.push((
                format!("sup_a_on_b[{eps}]"),
                format!("{:e}", self.metrics.sup_a_on_b[i]),
            ));
            kv.push((format!("h3_margin[{eps}]"), format!("{:e}", self.metrics.h3_margin[i])));
        }
        for (l, e) in self.ergodic.iter().enumerate() {
            kv.push((format!("ergodic[{}]", l + 1), e.to_string()));
        }
        kv.push(("applicable".into(), self.applicable.to_string()));
        kv
    }
}

pub fn hypothesis_report(
    kernel: &Kernel,
    geom: &Geometry,
    velocities: &VelocityGrid,
    epsilons: &[f64],
) -> Result<HypothesisReport> {
    let metrics = compute_metrics(kernel, velocities, epsilons);
    let law = kernel.scaling();
    let has_b = geom.num_inclusions() > 0;
    let mut entries = Vec::new();

    let fmt_list = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ");

    let h1 = if !has_b {
        Verdict::NotApplicable
    } else {
        let base_zero = metrics.sup_a_on_b.iter().all(|&a| a == 0.0);
        Verdict::from_bool(law.vanishes() || base_zero)
    };
    entries.push(HypothesisEntry {
        name: "H1",
        verdict: h1,
        evidence: format!(
            "scaling law {}; sup a on B over eps = [{}]",
            law.name(),
            fmt_list(&metrics.sup_a_on_b)
        ),
    });

    entries.push(HypothesisEntry {
        name: "H2",
        verdict: Verdict::from_bool(metrics.c_k.is_finite()),
        evidence: format!("C_K = {:.6e}", metrics.c_k),
    });

    let h3 = if !has_b {
        Verdict::NotApplicable
    } else {
        let finite = metrics.h3_margin.iter().all(|m| m.is_finite());
        Verdict::from_bool(finite && law.beats_eps_squared())
    };
    entries.push(HypothesisEntry {
        name: "H3",
        verdict: h3,
        evidence: format!("eps^2 sup 1/k on B over eps = [{}]", fmt_list(&metrics.h3_margin)),
    });

    let mut ergodic = Vec::new();
    let h4 = if !has_b {
        Verdict::NotApplicable
    } else if velocities.has_zero_node() {
        entries.push(HypothesisEntry {
            name: "H4",
            verdict: Verdict::Fail,
            evidence: "velocity measure has an atom at zero".into(),
        });
        Verdict::Fail
    } else {
        let mut counts = Vec::new();
        for l in 0..geom.num_inclusions() {
            let r = ergodicity_check(geom, l, velocities)?;
            counts.push(r.num_components);
            ergodic.push(r.ergodic);
        }
        let v = Verdict::from_bool(ergodic.iter().all(|&e| e));
        entries.push(HypothesisEntry {
            name: "H4",
            verdict: v,
            evidence: format!("orbit components per inclusion = {counts:?}"),
        });
        v
    };
    if !has_b {
        entries.push(HypothesisEntry {
            name: "H4",
            verdict: h4,
            evidence: "no inclusions".into(),
        });
    }
    let applicable = h1.holds() && entries[1].verdict.holds() && (h3 == Verdict::Pass || h4.holds());
    Ok(HypothesisReport {
        entries,
        metrics,
        ergodic,
        applicable,
    })
}
