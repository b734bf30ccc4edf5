use kindiff::collision::{assemble, double_sum};
use kindiff::diffusion::{self, assemble_operator, DiffusionState};
use kindiff::fredholm::{assemble_field, solve_cell, symmetric_part_min_eigenvalue};
use kindiff::geometry::{build_geometry, ergodicity_check, exit_time, Geometry, Grid, RegionShape};
use kindiff::kinetic::{KineticSettings, KineticSolver, KineticState};
use kindiff::scattering::{
    build_kernel, c_k_of, random_sdb_table, sdb_residual_of, KernelConfig, KernelSpec, ScalingLaw,
};
use kindiff::velocity::{build_quadrature, QuadratureSpec, VelocityGrid};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_velocities(rng: &mut ChaCha8Rng, half: usize, dim: usize) -> VelocityGrid {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let raw: Vec<f64> = (0..half).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    for r in &raw {
        let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        nodes.push(u.clone());
        nodes.push(u.iter().map(|x| -x).collect());
        weights.push(0.5 * r / total);
        weights.push(0.5 * r / total);
    }
    VelocityGrid::from_nodes(dim, nodes, weights).unwrap()
}

fn strip_with_disk(nx: usize, ny: usize, radius: f64) -> Geometry {
    let grid = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![nx, ny]).unwrap();
    build_geometry(
        grid,
        &[RegionShape::Ball {
            center: vec![0.5, 0.5],
            radius,
        }],
    )
    .unwrap()
}

fn quadrature() -> impl Strategy<Value = QuadratureSpec> {
    prop_oneof![
        Just(QuadratureSpec::TwoPoint1d),
        Just(QuadratureSpec::FourPointAxes),
        (2usize..12).prop_map(|c| QuadratureSpec::UniformCircle { count: 2 * c }),
        (1usize..8).prop_map(|c| QuadratureSpec::GaussLegendre { count: 2 * c }),
        (1usize..4, 2usize..5).prop_map(|(p, a)| QuadratureSpec::SphereProduct {
            polar: 2 * p,
            azimuth: 2 * a
        }),
        (1usize..4, prop::collection::vec(0.1f64..2.0, 1..4)).prop_map(|(dim, speeds)| {
            let n = speeds.len() as f64;
            QuadratureSpec::TensorSymmetric {
                dim,
                weights: vec![1.0 / n; speeds.len()],
                speeds,
            }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn symmetric_quadratures_have_zero_mean(spec in quadrature()) {
        let g = build_quadrature(&spec).unwrap();
        let m = g.moments();
        prop_assert!(m.mean.amax() <= 1e-14, "{:?}: mean {}", spec, m.mean.amax());
        prop_assert!((g.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn moments_are_permutation_invariant(seed in any::<u64>(), half in 1usize..6, dim in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_velocities(&mut rng, half, dim);
        let mut order: Vec<usize> = (0..g.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let p = VelocityGrid::from_nodes(
            dim,
            order.iter().map(|&k| g.node(k).to_vec()).collect(),
            order.iter().map(|&k| g.weight(k)).collect(),
        ).unwrap();
        let (a, b) = (g.moments(), p.moments());
        prop_assert!((&a.second - &b.second).amax() <= 1e-15);
        prop_assert!((a.beta - b.beta).abs() <= 1e-14);
    }

    #[test]
    fn beta_positive_iff_nodes_span(seed in any::<u64>(), half in 1usize..5, dim in 1usize..4, flat in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_velocities(&mut rng, half, dim);
        if flat && dim > 1 {
            // project every node onto the first dim-1 axes
            let nodes = g.nodes().map(|v| { let mut v = v.to_vec(); v[dim - 1] = 0.0; v }).collect();
            g = VelocityGrid::from_nodes(dim, nodes, g.weights().to_vec()).unwrap();
        }
        let mut rows = DMatrix::zeros(g.len(), dim);
        for k in 0..g.len() {
            for i in 0..dim {
                rows[(k, i)] = g.node(k)[i];
            }
        }
        let rank = rows.svd(false, false).singular_values.iter().filter(|s| **s > 1e-9).count();
        prop_assert_eq!(g.moments().beta > 1e-12, rank == dim);
    }

    #[test]
    fn labels_partition_the_domain(nx in 4usize..20, ny in 4usize..20, radius in 0.05f64..0.35) {
        let geom = strip_with_disk(nx, ny, radius);
        let incl: f64 = (0..geom.num_inclusions()).map(|l| geom.inclusion_volume(l)).sum();
        let cells: usize = (0..geom.num_inclusions()).map(|l| geom.inclusion_cells(l).len()).sum::<usize>()
            + geom.diffusive_cells().count();
        prop_assert_eq!(cells, geom.num_cells());
        prop_assert!((incl + geom.diffusive_volume() - geom.total_volume()).abs() <= 1e-14);
    }

    #[test]
    fn exit_times_are_reversible(n in 8usize..24, radius in 0.15f64..0.35, count in 3usize..10) {
        let geom = strip_with_disk(n, n, radius);
        prop_assume!(geom.num_inclusions() == 1);
        let vel = build_quadrature(&QuadratureSpec::UniformCircle { count: 2 * count }).unwrap();
        let h = geom.grid().min_spacing();
        let faces = geom.inclusion_faces(0);
        for (i, face) in faces.iter().enumerate() {
            for v in vel.nodes() {
                let Ok(hit) = exit_time(&geom, 0, i, &face.center, v) else { continue };
                if hit.ambiguous {
                    continue;
                }
                let back: Vec<f64> = v.iter().map(|x| -x).collect();
                let rev = exit_time(&geom, 0, hit.face, &hit.point, &back);
                prop_assert!(rev.is_ok(), "{:?}", rev);
                let speed = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((rev.unwrap().tau - hit.tau).abs() * speed <= h);
            }
        }
    }

    #[test]
    fn ergodicity_ignores_velocity_order(n in 8usize..20, axes in any::<bool>(), seed in any::<u64>()) {
        let geom = strip_with_disk(n, n, 0.3);
        let spec = if axes { QuadratureSpec::FourPointAxes } else { QuadratureSpec::UniformCircle { count: 8 } };
        let vel = build_quadrature(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..vel.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let perm = VelocityGrid::from_nodes(
            2,
            order.iter().map(|&k| vel.node(k).to_vec()).collect(),
            order.iter().map(|&k| vel.weight(k)).collect(),
        ).unwrap();
        let a = ergodicity_check(&geom, 0, &vel).unwrap();
        let b = ergodicity_check(&geom, 0, &perm).unwrap();
        prop_assert_eq!(a.orbit_components, b.orbit_components);
        prop_assert_eq!(a.ergodic, b.ergodic);
    }

    #[test]
    fn kernel_rate_and_symmetric_residual(seed in any::<u64>(), half in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vel = random_velocities(&mut rng, half, 2);
        let w = vel.weights();
        let nv = vel.len();
        let table = random_sdb_table(w, &mut rng);
        let geom = build_geometry(Grid::new(vec![0.0], vec![1.0], vec![3]).unwrap(), &[]).unwrap();
        let values: Vec<Vec<f64>> = table.chunks(nv).map(|r| r.to_vec()).collect();
        let cfg = KernelConfig { diffusive: KernelSpec::Matrix { values }, ..Default::default() };
        let kernel = build_kernel(&cfg, &geom, &vel, 1e-12).unwrap();
        for c in 0..3 {
            let a = kernel.rate(c, 0.1, &vel);
            for v in 0..nv {
                let direct: f64 = (0..nv).map(|u| w[u] * table[v * nv + u]).sum();
                prop_assert!((a[v] - direct).abs() <= 1e-14 * direct.max(1.0));
            }
        }
        let sym: Vec<f64> = (0..nv * nv).map(|i| { let (v, u) = (i / nv, i % nv); table[v * nv + u] + table[u * nv + v] }).collect();
        prop_assert_eq!(sdb_residual_of(&sym, w).0, 0.0);
    }

    #[test]
    fn c_k_grows_at_most_by_added_mass(seed in any::<u64>(), half in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vel = random_velocities(&mut rng, half, 2);
        let w = vel.weights();
        let nv = vel.len();
        let base: Vec<f64> = (0..nv * nv).map(|_| rng.random_range(1.0..3.0)).collect();
        let bump: Vec<f64> = (0..nv * nv).map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..2.0) } else { 0.0 }).collect();
        let raised: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + b).collect();
        // the reciprocal integrals can only shrink
        let added = (0..nv).map(|v| (0..nv).map(|u| w[u] * bump[v * nv + u]).sum::<f64>()).fold(0.0, f64::max);
        prop_assert!(c_k_of(&raised, w) <= c_k_of(&base, w) + added + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn positive_kernel_has_constant_null_space(seed in any::<u64>(), half in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vel = random_velocities(&mut rng, half, 2);
        let nv = vel.len();
        let table = random_sdb_table(vel.weights(), &mut rng);
        let m = assemble(&table, 1.0, &vel);
        let ones = vec![1.0; nv];
        prop_assert!(m.apply(&ones).iter().all(|x| x.abs() <= 1e-13));
        prop_assert!(m.apply_adj(&ones).iter().all(|x| x.abs() <= 1e-13));
        let k1 = &m.k * nalgebra::DVector::from_element(nv, 1.0);
        prop_assert!(k1.iter().zip(&m.rate).all(|(a, b)| (a - b).abs() <= 1e-13 * b.max(1.0)));
        let rank = m.l.clone().svd(false, false).singular_values.iter().filter(|s| **s > 1e-10).count();
        prop_assert_eq!(rank, nv - 1);
    }

    #[test]
    fn fredholm_duality_poincare_and_scaling(seed in any::<u64>(), half in 2usize..8, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vel = random_velocities(&mut rng, half, 2);
        let nv = vel.len();
        let w = vel.weights().to_vec();
        let table = random_sdb_table(&w, &mut rng);
        let m = assemble(&table, 1.0, &vel);
        let sol = solve_cell(&m, &vel, 0).unwrap();
        let ck = c_k_of(&table, &w);
        for i in 0..2 {
            for j in 0..2 {
                let lhs = vel.inner(&sol.b_star[i], &vel.component(j));
                let rhs = vel.inner(&vel.component(i), &sol.b[j]);
                prop_assert!((lhs - rhs).abs() <= 1e-11 * lhs.abs().max(1.0));
            }
        }
        let mm = DMatrix::from_fn(2, 2, |i, j| vel.inner(&sol.b_star[i], &vel.component(j)));
        prop_assert!(symmetric_part_min_eigenvalue(&mm) >= vel.moments().beta / (2.0 * ck) - 1e-10);
        for _ in 0..50 {
            let mut phi: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = vel.average(&phi);
            phi.iter_mut().for_each(|x| *x -= mean);
            prop_assert!(vel.norm(&phi) <= 2.0 * ck * vel.norm(&m.apply(&phi)) + 1e-12);
        }
        let scaled = solve_cell(&assemble(&table, c, &vel), &vel, 0).unwrap();
        for i in 0..2 {
            for k in 0..nv {
                prop_assert!((scaled.b[i][k] * c - sol.b[i][k]).abs() <= 1e-10 * sol.b[i][k].abs().max(1.0));
            }
        }
        let (_, form) = m.dirichlet_form(&sol.b[0]);
        prop_assert!((form - double_sum(&m.table, &w, &sol.b[0])).abs() <= 1e-14 * form.max(1.0));
    }

    #[test]
    fn kinetic_step_is_dissipative_and_conservative(seed in any::<u64>(), n in 4usize..16, eps in 0.05f64..1.0, dt in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = build_geometry(Grid::new(vec![0.0], vec![1.0], vec![n]).unwrap(), &[]).unwrap();
        let vel = build_quadrature(&QuadratureSpec::GaussLegendre { count: 4 }).unwrap();
        let cfg = KernelConfig { diffusive: KernelSpec::Isotropic { sigma: rng.random_range(0.5..2.0), regions: vec![] }, ..Default::default() };
        let kernel = build_kernel(&cfg, &geom, &vel, 1e-12).unwrap();
        let solver = KineticSolver::new(&geom, &vel, &kernel, eps, KineticSettings::default()).unwrap();
        let f: Vec<f64> = (0..n * vel.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let state = KineticState { t: 0.0, eps, f };
        let norm0 = solver.norm2(&state.f);
        let (next, d) = solver.step(&state, dt).unwrap();
        prop_assert!(solver.norm2(&next.f) <= norm0 * (1.0 + 1e-12));
        prop_assert!(d.entropy_defect <= 1e-10);
        prop_assert!(d.mass_residual <= 1e-12);
        prop_assert!(next.f.iter().all(|x| *x >= -1e-12));
    }

    #[test]
    fn diffusion_step_energy_and_maximum_principle(seed in any::<u64>(), n in 6usize..16, dt in 1e-4f64..1e-1, radius in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = strip_with_disk(n, n, radius);
        let vel = build_quadrature(&QuadratureSpec::UniformCircle { count: 8 }).unwrap();
        let cfg = KernelConfig { diffusive: KernelSpec::Isotropic { sigma: rng.random_range(0.5..2.0), regions: vec![] }, ..Default::default() };
        let kernel = build_kernel(&cfg, &geom, &vel, 1e-12).unwrap();
        let field = assemble_field(&kernel, &geom, &vel).unwrap();
        let op = assemble_operator(&geom, &field).unwrap();
        let rho: Vec<f64> = (0..op.num_unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hi = rho.iter().fold(0.0f64, |a, x| a.max(*x));
        let lo = rho.iter().fold(0.0f64, |a, x| a.min(*x));
        let run = diffusion::run(&op, &DiffusionState { t: 0.0, rho }, dt, &[dt]).unwrap();
        let next = &run.snapshots[0].rho;
        prop_assert!(next.iter().all(|x| *x <= hi + 1e-12 && *x >= lo - 1e-12));
        prop_assert!(run.steps.iter().all(|s| s.energy_defect <= 1e-14));
        // reconstructed density is constant on each inclusion
        let values = op.cell_values(&run.snapshots[0]);
        for l in 0..geom.num_inclusions() {
            let cells = geom.inclusion_cells(l);
            prop_assert!(cells.iter().all(|&c| values[c] == values[cells[0]]));
        }
    }
}

#[test]
fn empty_inclusion_reproduces_plain_solver() {
    let grid = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![12, 10]).unwrap();
    let plain = build_geometry(grid.clone(), &[]).unwrap();
    // a ball containing no cell center
    let empty = build_geometry(
        grid,
        &[RegionShape::Ball {
            center: vec![0.5, 0.5],
            radius: 1e-3,
        }],
    )
    .unwrap();
    assert_eq!(empty.num_inclusions(), 0);
    let vel = build_quadrature(&QuadratureSpec::UniformCircle { count: 8 }).unwrap();
    let cfg = KernelConfig {
        inclusion: kindiff::scattering::InclusionKernelSpec {
            scaling: ScalingLaw::Zero,
            ..Default::default()
        },
        ..Default::default()
    };
    let runs: Vec<Vec<f64>> = [plain, empty]
        .iter()
        .map(|g| {
            let kernel = build_kernel(&cfg, g, &vel, 1e-12).unwrap();
            let op = assemble_operator(g, &assemble_field(&kernel, g, &vel).unwrap()).unwrap();
            let rho0 = (0..op.num_unknowns()).map(|i| (i as f64 * 0.37).sin()).collect();
            diffusion::run(&op, &DiffusionState { t: 0.0, rho: rho0 }, 1e-3, &[0.01])
                .unwrap()
                .snapshots[0]
                .rho
                .clone()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
