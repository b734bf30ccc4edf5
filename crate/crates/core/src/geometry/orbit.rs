//! Forward exit times from inclusions and the orbit graph used to test
//! ergodicity of free transport on the inclusion boundary.

use log::debug;
use rayon::prelude::*;

use super::Geometry;
use crate::error::{Error, Result};
use crate::velocity::VelocityGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct ExitHit {
    pub tau: f64,
    /// Index into `Geometry::inclusion_faces(l)`.
    pub face: usize,
    pub point: Vec<f64>,
    /// The ray passed within rounding of a cell corner.
    pub ambiguous: bool,
}

#[derive(Debug, Clone)]
pub struct ExitTimeTable {
    pub inclusion: usize,
    pub num_velocities: usize,
    /// `tau[face * num_velocities + k]`, `None` when there is no forward
    /// crossing or the node is tangent to the face.
    pub tau: Vec<Option<f64>>,
}

impl ExitTimeTable {
    pub fn get(&self, face: usize, k: usize) -> Option<f64> {
        self.tau[face * self.num_velocities + k]
    }
}

#[derive(Debug, Clone)]
pub struct ErgodicityReport {
    pub inclusion: usize,
    pub ergodic: bool,
    /// Component id per boundary face sample, numbered by first face.
    pub orbit_components: Vec<usize>,
    pub num_components: usize,
    pub ambiguous_crossings: usize,
    pub grazing_pairs: usize,
}

const TIE: f64 = 1e-12;

/// Smallest `t > 0` with `x + t v` on the boundary of inclusion `l`, for a
/// point `x` lying on inclusion face `face`. The ray is traversed cell by
/// cell through the rectilinear complex.
pub fn exit_time(geom: &Geometry, l: usize, face: usize, x: &[f64], v: &[f64]) -> Result<ExitHit> {
    let grid = geom.grid();
    let dim = grid.dim();
    let faces = geom.inclusion_faces(l);
    let f = faces
        .get(face)
        .ok_or_else(|| Error::ExitTime(format!("inclusion {} has no face {face}", l + 1)))?;
    let speed = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if speed == 0.0 {
        return Err(Error::ExitTime("zero velocity has no exit time".into()));
    }
    let vn = v[f.axis] * f.normal_sign;
    if vn.abs() <= 1e-14 * speed {
        return Err(Error::ExitTime(format!(
            "velocity {v:?} is tangent to face {face} of inclusion {}",
            l + 1
        )));
    }
    let label = l + 1;
    let inside = vn < 0.0;
    let mut cell = if inside {
        f.cell
    } else {
        f.neighbor.expect("inclusion faces have a neighbor")
    };
    let lo = grid.lo();
    let h = grid.spacing();
    let mut ambiguous = false;
    loop {
        let idx = grid.multi_index(cell);
        let mut best_t = f64::INFINITY;
        let mut best_axis = usize::MAX;
        let mut second_t = f64::INFINITY;
        for d in 0..dim {
            if v[d] == 0.0 {
                continue;
            }
            let bound = if v[d] > 0.0 {
                lo[d] + (idx[d] + 1) as f64 * h[d]
            } else {
                lo[d] + idx[d] as f64 * h[d]
            };
            let t = (bound - x[d]) / v[d];
            if t < best_t {
                second_t = best_t;
                best_t = t;
                best_axis = d;
            } else if t < second_t {
                second_t = t;
            }
        }
        if second_t.is_finite() && (second_t - best_t).abs() <= TIE * best_t.abs().max(1.0) {
            ambiguous = true;
        }
        let sign = if v[best_axis] > 0.0 { 1 } else { -1 };
        let next = match grid.neighbor(cell, best_axis, sign) {
            Some(nb) => nb,
            None => {
                return Err(Error::ExitTime(format!(
                    "no forward crossing: ray from face {face} of inclusion {} with velocity {v:?} leaves the domain",
                    l + 1
                )))
            }
        };
        let crossing = if inside {
            (geom.label(next) != label).then(|| geom.inclusion_face_index(l, cell, next))
        } else {
            (geom.label(next) == label).then(|| geom.inclusion_face_index(l, next, cell))
        };
        if let Some(hit_face) = crossing {
            let hit_face = hit_face.expect("crossing face is registered");
            let point = (0..dim).map(|d| x[d] + best_t * v[d]).collect();
            if ambiguous {
                debug!("ambiguous corner crossing from inclusion {} face {face}", l + 1);
            }
            return Ok(ExitHit {
                tau: best_t,
                face: hit_face,
                point,
                ambiguous,
            });
        }
        cell = next;
    }
}

pub fn exit_time_table(geom: &Geometry, l: usize, velocities: &VelocityGrid) -> ExitTimeTable {
    let faces = geom.inclusion_faces(l);
    let nv = velocities.len();
    let tau = (0..faces.len() * nv)
        .into_par_iter()
        .map(|i| {
            let (face, k) = (i / nv, i % nv);
            exit_time(geom, l, face, &faces[face].center, velocities.node(k))
                .ok()
                .map(|hit| hit.tau)
        })
        .collect();
    ExitTimeTable {
        inclusion: l,
        num_velocities: nv,
        tau,
    }
}

/// Builds the undirected graph on face-center samples of `∂B_l` with an
/// edge `x ↔ x + τ(x, v) v` for every velocity node and reports whether it
/// is connected.
pub fn ergodicity_check(geom: &Geometry, l: usize, velocities: &VelocityGrid) -> Result<ErgodicityReport> {
    if velocities.has_zero_node() {
        return Err(Error::Refused(
            "ergodicity check needs a velocity measure without an atom at zero".into(),
        ));
    }
    let beta = velocities.moments().beta;
    if !(beta > 1e-12) {
        return Err(Error::Refused(format!(
            "velocity grid is not admissible (second moment smallest eigenvalue {beta:e})"
        )));
    }
    let faces = geom.inclusion_faces(l);
    let nv = velocities.len();
    let hits: Vec<Option<ExitHit>> = (0..faces.len() * nv)
        .into_par_iter()
        .map(|i| {
            let (face, k) = (i / nv, i % nv);
            exit_time(geom, l, face, &faces[face].center, velocities.node(k)).ok()
        })
        .collect();

    let mut uf = UnionFind::new(faces.len());
    let mut ambiguous = 0;
    let mut grazing = 0;
    for (i, hit) in hits.iter().enumerate() {
        let (face, k) = (i / nv, i % nv);
        match hit {
            Some(hit) => {
                if hit.ambiguous {
                    ambiguous += 1;
                }
                uf.union(face, hit.face);
            }
            None => {
                let f = &faces[face];
                if velocities.node(k)[f.axis] == 0.0 {
                    grazing += 1;
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; faces.len()];
    let mut root_to_id = std::collections::HashMap::new();
    for (face, id) in ids.iter_mut().enumerate() {
        let root = uf.find(face);
        let next = root_to_id.len();
        *id = *root_to_id.entry(root).or_insert(next);
    }
    let num_components = root_to_id.len();
    Ok(ErgodicityReport {
        inclusion: l,
        ergodic: num_components == 1,
        orbit_components: ids,
        num_components,
        ambiguous_crossings: ambiguous,
        grazing_pairs: grazing,
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so that merges do not depend on edge order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, Grid, RegionShape};
    use crate::velocity::{build_quadrature, QuadratureSpec};

    fn square_inclusion() -> Geometry {
        let grid = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![20, 20]).unwrap();
        build_geometry(
            grid,
            &[RegionShape::Box {
                lo: vec![0.25, 0.25],
                hi: vec![0.75, 0.75],
            }],
        )
        .unwrap()
    }

    fn disk(n: usize, radius: f64) -> Geometry {
        let grid = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![n, n]).unwrap();
        build_geometry(
            grid,
            &[RegionShape::Ball {
                center: vec![0.0, 0.0],
                radius,
            }],
        )
        .unwrap()
    }

    /// Ray marching at a sub-cell step, used as an independent oracle.
    fn march(geom: &Geometry, l: usize, x: &[f64], v: &[f64], step: f64) -> f64 {
        let inside = |p: &[f64]| geom.grid().locate(p).map(|c| geom.label(c) == l + 1).unwrap_or(false);
        let mut t = step * 0.5;
        let start = inside(&[x[0] + t * v[0], x[1] + t * v[1]]);
        loop {
            t += step;
            let p = [x[0] + t * v[0], x[1] + t * v[1]];
            if inside(&p) != start {
                return t - 0.5 * step;
            }
        }
    }

    #[test]
    fn square_exit_time_matches_marching() {
        let g = square_inclusion();
        let faces = g.inclusion_faces(0);
        // face on the left side of the square containing (0.25, 0.525)
        let (fi, f) = faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.axis == 0 && f.normal_sign < 0.0 && (f.center[1] - 0.525).abs() < 1e-12)
            .unwrap();
        let x = vec![0.25, 0.5];
        assert!((f.center[0] - 0.25).abs() < 1e-12);
        let hit = exit_time(&g, 0, fi, &x, &[1.0, 0.0]).unwrap();
        let oracle = march(&g, 0, &x, &[1.0, 0.0], 1e-4);
        assert!((hit.tau - 0.5).abs() < 1e-12);
        assert!((oracle - 0.5).abs() < 1e-4);
        let oblique = [0.8, 0.6];
        let hit = exit_time(&g, 0, fi, &f.center, &oblique).unwrap();
        let oracle = march(&g, 0, &f.center, &oblique, 1e-5);
        assert!((hit.tau - oracle).abs() < 2e-5, "{} vs {}", hit.tau, oracle);
    }

    #[test]
    fn disk_chord_along_axis() {
        let g = disk(200, 0.5);
        let faces = g.inclusion_faces(0);
        // left-facing faces: x = (-a, b), v = e1 crosses to (a, b)
        for (fi, f) in faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.axis == 0 && f.normal_sign < 0.0)
        {
            let hit = exit_time(&g, 0, fi, &f.center, &[1.0, 0.0]).unwrap();
            let a = -f.center[0];
            assert!((hit.tau - 2.0 * a).abs() < 1e-9, "{} vs {}", hit.tau, 2.0 * a);
        }
    }

    #[test]
    fn outward_ray_from_convex_body_has_no_crossing() {
        let g = square_inclusion();
        let faces = g.inclusion_faces(0);
        let (fi, f) = faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.axis == 0 && f.normal_sign < 0.0)
            .unwrap();
        let err = exit_time(&g, 0, fi, &f.center, &[-1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("no forward crossing"));
        assert!(exit_time(&g, 0, fi, &f.center, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn exit_time_is_reversible() {
        let g = disk(60, 0.5);
        let grid = build_quadrature(&QuadratureSpec::UniformCircle { count: 12 }).unwrap();
        let faces = g.inclusion_faces(0);
        let h = g.grid().min_spacing();
        for (fi, f) in faces.iter().enumerate() {
            for v in grid.nodes() {
                if let Ok(hit) = exit_time(&g, 0, fi, &f.center, v) {
                    let back: Vec<f64> = v.iter().map(|c| -c).collect();
                    let rev = exit_time(&g, 0, hit.face, &hit.point, &back).unwrap();
                    assert!((rev.tau - hit.tau).abs() <= h, "{} vs {}", rev.tau, hit.tau);
                }
            }
        }
    }

    #[test]
    fn disk_with_circle_measure_is_ergodic() {
        let g = disk(64, 0.6);
        let grid = build_quadrature(&QuadratureSpec::UniformCircle { count: 16 }).unwrap();
        let report = ergodicity_check(&g, 0, &grid).unwrap();
        assert!(report.ergodic, "{} components", report.num_components);
    }

    #[test]
    fn disk_with_axes_measure_is_not_ergodic() {
        let g = disk(64, 0.6);
        let grid = build_quadrature(&QuadratureSpec::FourPointAxes).unwrap();
        let report = ergodicity_check(&g, 0, &grid).unwrap();
        assert!(!report.ergodic);
        // samples in one component share |x_1| (x-normal faces) or |x_2|
        let faces = g.inclusion_faces(0);
        for (a, fa) in faces.iter().enumerate() {
            for (b, fb) in faces.iter().enumerate() {
                if report.orbit_components[a] == report.orbit_components[b] && fa.axis == fb.axis {
                    let ax = fa.axis;
                    assert!((fa.center[ax].abs() - fb.center[ax].abs()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn square_with_axes_groups_by_reflection() {
        let g = square_inclusion();
        let grid = build_quadrature(&QuadratureSpec::FourPointAxes).unwrap();
        let report = ergodicity_check(&g, 0, &grid).unwrap();
        // each row pairs a left face with a right face; each column a bottom with a top
        assert_eq!(report.num_components, 20);
        let collinear =
            crate::velocity::VelocityGrid::from_nodes(2, vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.5, 0.5])
                .unwrap();
        assert!(matches!(ergodicity_check(&g, 0, &collinear), Err(Error::Refused(_))));
    }

    #[test]
    fn relabeling_velocities_does_not_change_components() {
        let g = disk(40, 0.6);
        let grid = build_quadrature(&QuadratureSpec::UniformCircle { count: 8 }).unwrap();
        let mut nodes: Vec<Vec<f64>> = grid.nodes().map(|v| v.to_vec()).collect();
        nodes.reverse();
        let permuted = VelocityGrid::from_nodes(2, nodes, vec![0.125; 8]).unwrap();
        let a = ergodicity_check(&g, 0, &grid).unwrap();
        let b = ergodicity_check(&g, 0, &permuted).unwrap();
        assert_eq!(a.orbit_components, b.orbit_components);
    }
}
