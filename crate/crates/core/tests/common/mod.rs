//! Oracle checks shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use lfk::ecg::{ecg_integral, GradientField, Provider, TimeGrid};
use lfk::eikonal::{pacing_protocols, solve_eikonal, transmembrane, ApTemplate, Protocol, Source, VelocityModel};
use lfk::fem::{assemble_stiffness, solve_extracellular_with, solve_leadfield_with, Conductivities, SolverSettings, TensorKind};
use lfk::geometry::{place_electrodes, sample_geometry, ElectrodeMode, ShapeSet};
use lfk::mesh::{build_mesh, Ball, Slab, TetMesh};
use lfk::metrics::{error_bound_constant, heart_l2_sq, trapezoid_sq};
use lfk::nn::{loss_mse_cos, sdf_mse_batch, Architecture, Encoding, Join, Mlp, COS_EPS};
use lfk::Vec3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn geometry_meshes(seed: u64, n: usize, h: f64) -> Vec<(ShapeSet, TetMesh)> {
    sample_geometry(seed, n)
        .unwrap()
        .into_iter()
        .map(|p| {
            let s = ShapeSet::new(p).unwrap();
            let m = build_mesh(&s, h).unwrap();
            (s, m)
        })
        .collect()
}

/// Largest relative gap between the reciprocity integral and the directly
/// solved potential at the electrode node.
pub fn reciprocity_max_rel(n_geometries: usize, n_electrodes: usize, n_snapshots: usize, tol: f64) -> f64 {
    let cond = Conductivities::default();
    let settings = SolverSettings { tol, max_iter: 50_000 };
    let template = ApTemplate::default();
    let mut worst: f64 = 0.0;
    for (gi, (shapes, mesh)) in geometry_meshes(11, n_geometries, 8.0).into_iter().enumerate() {
        let k = assemble_stiffness(&mesh, &cond, TensorKind::Bulk).unwrap();
        let set = place_electrodes(&shapes, ElectrodeMode::Standard9).unwrap();
        let picks: Vec<usize> = (0..n_electrodes).map(|i| (i * 2 + 1) % set.len()).collect();
        let nodes: Vec<usize> = picks.iter().map(|&j| mesh.nearest_boundary_node(&set.position(j)).unwrap()).collect();
        let grads = nodes.iter().map(|&n| solve_leadfield_with(&mesh, &k, n, &settings).unwrap().grad_heart).collect();
        let field = GradientField {
            provider: Provider::Fem,
            labels: picks.iter().map(|&j| set.labels[j].clone()).collect(),
            grads,
        };
        // random pacing sites and onsets; snapshots spread over depolarization
        let mut rng = ChaCha8Rng::seed_from_u64(100 + gi as u64);
        let sources: Vec<Source> = (0..rng.random_range(1..=4))
            .map(|_| Source {
                node: mesh.heart_nodes[rng.random_range(0..mesh.heart_nodes.len())],
                time: rng.random_range(0.0..20.0),
            })
            .collect();
        let act = solve_eikonal(&mesh, &VelocityModel::default(), &sources).unwrap();
        let t0 = act.min_time() + rng.random_range(2.0..10.0);
        let grid = TimeGrid { t0, dt: (act.max_time() - t0) / n_snapshots as f64, n: n_snapshots };
        let v = ecg_integral(&mesh, &cond, &field, &act, &template, &grid).unwrap();
        for (s, t) in grid.times().into_iter().enumerate() {
            let vm = transmembrane(&act, &template, t);
            let phi = solve_extracellular_with(&mesh, &k, &cond, &vm, &settings).unwrap();
            for (j, &n) in nodes.iter().enumerate() {
                let direct = phi[n];
                assert!(direct.abs() > 0.0);
                worst = worst.max((v[j][s] - direct).abs() / direct.abs());
            }
        }
    }
    worst
}

/// Heart-region L2 error of the lead-field gradient at each `h` against the
/// solve at `h / 2`, on a homogeneous sphere.
pub fn sphere_gradient_errors(hs: &[f64]) -> Vec<f64> {
    // equal bulk conductivity in the heart and the torso
    let cond = Conductivities { sigma_it: 0.3, sigma_if: 0.3, sigma_et: 0.3, sigma_ef: 0.3, sigma_0: 0.6 };
    let ball = Ball { center: Vec3::zeros(), radius: 48.0, heart_radius: 16.0, fiber: Vec3::x() };
    let electrode = Vec3::new(0.0, 0.0, 48.0);
    let settings = SolverSettings { tol: 1e-10, max_iter: 50_000 };
    // quadrature points: a regular lattice inside the heart ball
    let n = 12;
    let pts: Vec<Vec3> = (0..n * n * n)
        .map(|i| {
            let c = |k: usize| -16.0 + 32.0 * (k as f64 + 0.5) / n as f64 + 0.137;
            Vec3::new(c(i % n), c((i / n) % n), c(i / (n * n)))
        })
        .filter(|p| p.norm() < 15.0)
        .collect();
    let cell = (32.0 / n as f64).powi(3);
    let field = |h: f64| -> Vec<Vec3> {
        let mesh = build_mesh(&ball, h).unwrap();
        let k = assemble_stiffness(&mesh, &cond, TensorKind::Bulk).unwrap();
        let node = mesh.nearest_boundary_node(&electrode).unwrap();
        assert!((mesh.nodes[node] - electrode).norm() < 1e-9);
        let lf = solve_leadfield_with(&mesh, &k, node, &settings).unwrap();
        pts.iter().map(|p| mesh.element_gradient(mesh.locate_point(p).unwrap().0, &lf.z)).collect()
    };
    hs.iter()
        .map(|&h| {
            let (a, b) = (field(h), field(h / 2.0));
            (a.iter().zip(&b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() * cell).sqrt()
        })
        .collect()
}

fn nearest_node(mesh: &TetMesh, x: &Vec3) -> usize {
    (0..mesh.n_nodes())
        .filter(|&n| mesh.heart_index[n] != usize::MAX)
        .min_by(|&a, &b| (mesh.nodes[a] - x).norm().total_cmp(&(mesh.nodes[b] - x).norm()))
        .unwrap()
}

/// Largest relative activation-time error on a slab for constant fibers.
pub fn eikonal_slab_error(h: f64, vm: &VelocityModel, fiber: Vec3) -> f64 {
    let f = fiber.normalize();
    let slab = Slab { min: Vec3::new(-20.0, -20.0, -6.0), max: Vec3::new(20.0, 20.0, 6.0), fiber: f };
    let mesh = build_mesh(&slab, h).unwrap();
    let src = nearest_node(&mesh, &Vec3::zeros());
    let x0 = mesh.nodes[src];
    let act = solve_eikonal(&mesh, vm, &[lfk::eikonal::Source { node: src, time: 0.0 }]).unwrap();
    let mut worst: f64 = 0.0;
    for (hi, &n) in mesh.heart_nodes.iter().enumerate() {
        let d = mesh.nodes[n] - x0;
        if d.norm() == 0.0 {
            continue;
        }
        let along = d.dot(&f);
        let across2 = d.norm_squared() - along * along;
        let exact = (along * along / (vm.v_f * vm.v_f) + across2 / (vm.v_t * vm.v_t)).sqrt();
        worst = worst.max((act.tau[hi] - exact).abs() / exact);
    }
    worst
}

fn random_architecture(rng: &mut ChaCha8Rng, seed: u64) -> Architecture {
    let depth = rng.random_range(1..=4);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=7)).collect();
    let mid = rng.random_range(1..=depth);
    let code = rng.random_range(1..=4);
    let fourier_k = rng.random_range(1..=4);
    let sigma_ff = rng.random_range(0.2..1.5);
    if rng.random::<bool>() {
        Architecture {
            input_dims: vec![3, code, 3],
            hidden,
            output: 3,
            fourier_k,
            sigma_ff,
            plan: vec![
                Join { layer: 0, input: 0, encoding: Encoding::Fourier },
                Join { layer: mid, input: 1, encoding: Encoding::Raw },
                Join { layer: mid, input: 2, encoding: Encoding::Raw },
            ],
            seed,
        }
    } else {
        Architecture {
            input_dims: vec![code, 3],
            hidden,
            output: 4,
            fourier_k,
            sigma_ff,
            plan: vec![
                Join { layer: 0, input: 0, encoding: Encoding::Raw },
                Join { layer: 0, input: 1, encoding: Encoding::Fourier },
                Join { layer: mid, input: 1, encoding: Encoding::Raw },
            ],
            seed,
        }
    }
}

fn batch_loss(net: &Mlp, inputs: &[Array2<f64>], target: &Array2<f64>, cosine: bool) -> (f64, Array2<f64>) {
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let out = net.predict(&views).unwrap();
    if cosine {
        let n = out.nrows() as f64;
        let mut g = Array2::zeros(out.dim());
        let mut total = 0.0;
        for r in 0..out.nrows() {
            let (l, d) = loss_mse_cos(&out.row(r).to_vec(), &target.row(r).to_vec(), 0.7, COS_EPS);
            total += l;
            g.row_mut(r).iter_mut().zip(d).for_each(|(a, b)| *a = b / n);
        }
        (total / n, g)
    } else {
        sdf_mse_batch(out.view(), target.view())
    }
}

/// Largest relative mismatch between reverse-mode and central-difference
/// gradients (parameters and inputs) over `n` random networks and losses.
/// Entries are compared relative to `max(|g_i|, 1e-3 max|g|)`.
pub fn fd_max_relative_error(n: usize, seed: u64) -> (f64, [usize; 2], [usize; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut plans = [0usize; 2];
    let mut losses = [0usize; 2];
    for i in 0..n {
        let arch = random_architecture(&mut rng, seed + i as u64);
        plans[usize::from(arch.output == 4)] += 1;
        let mut net = Mlp::new(arch.clone()).unwrap();
        for b in net.params.iter_mut() {
            *b += rng.random_range(-0.1..0.1);
        }
        let batch = rng.random_range(1..=4);
        let inputs: Vec<Array2<f64>> = arch
            .input_dims
            .iter()
            .map(|&d| Array2::from_shape_fn((batch, d), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let target = Array2::from_shape_fn((batch, arch.output), |_| rng.random_range(-1.0..1.0));
        let cosine = rng.random::<bool>();
        losses[usize::from(cosine)] += 1;

        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let tape = net.forward(&views).unwrap();
        let (_, d_out) = batch_loss(&net, &inputs, &target, cosine);
        let (g_params, g_inputs) = net.backward(&tape, d_out.view()).unwrap();

        let step = 1e-6;
        let mut fd_params = vec![0.0; net.params.len()];
        for p in 0..net.params.len() {
            let keep = net.params[p];
            net.params[p] = keep + step;
            let up = batch_loss(&net, &inputs, &target, cosine).0;
            net.params[p] = keep - step;
            let down = batch_loss(&net, &inputs, &target, cosine).0;
            net.params[p] = keep;
            fd_params[p] = (up - down) / (2.0 * step);
        }
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = vec![(g_params, fd_params)];
        for s in 0..inputs.len() {
            let mut fd = vec![0.0; inputs[s].len()];
            for (q, slot) in fd.iter_mut().enumerate() {
                let mut moved = inputs.clone();
                let cell = moved[s].as_slice_mut().unwrap();
                cell[q] += step;
                let up = batch_loss(&net, &moved, &target, cosine).0;
                moved[s].as_slice_mut().unwrap()[q] -= 2.0 * step;
                let down = batch_loss(&net, &moved, &target, cosine).0;
                *slot = (up - down) / (2.0 * step);
            }
            pairs.push((g_inputs[s].iter().copied().collect(), fd));
        }
        for (g, fd) in pairs {
            let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                continue;
            }
            for (a, b) in g.iter().zip(&fd) {
                worst = worst.max((a - b).abs() / a.abs().max(1e-3 * scale));
            }
        }
    }
    (worst, plans, losses)
}

/// Count of bound violations `|V - V^|^2 > C |grad(Z - Z^)|^2` over random
/// perturbations of FEM-like gradients, for each protocol of each geometry.
pub fn error_bound_violations(n_perturbations: usize) -> (usize, usize, f64) {
    let cond = Conductivities::default();
    let template = ApTemplate::default();
    let grid = TimeGrid::default();
    let vm = VelocityModel::default();
    let settings = SolverSettings { tol: 1e-9, max_iter: 50_000 };
    let mut violations = 0;
    let mut checked = 0;
    let mut tightest: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (shapes, mesh) in geometry_meshes(23, 2, 8.0) {
        let k = assemble_stiffness(&mesh, &cond, TensorKind::Bulk).unwrap();
        let set = place_electrodes(&shapes, ElectrodeMode::Standard9).unwrap();
        let node = mesh.nearest_boundary_node(&set.position(5)).unwrap();
        let z = solve_leadfield_with(&mesh, &k, node, &settings).unwrap().grad_heart;
        for protocol in Protocol::ALL {
            let sources = pacing_protocols(&shapes, &mesh, protocol).unwrap();
            let act = solve_eikonal(&mesh, &vm, &sources).unwrap();
            let c = error_bound_constant(&mesh, &cond, &act, &template, &grid).unwrap();
            let trace = |g: Vec<Vec3>| {
                let f = GradientField { provider: Provider::Fem, labels: vec!["V3".into()], grads: vec![g] };
                ecg_integral(&mesh, &cond, &f, &act, &template, &grid).unwrap().remove(0)
            };
            let v = trace(z.clone());
            for p in 0..n_perturbations {
                let amp = 10f64.powf(rng.random_range(-3.0..0.5));
                let zhat: Vec<Vec3> = z
                    .iter()
                    .map(|g| {
                        let r = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                        // alternate between noise and a smooth relative bias
                        if p % 2 == 0 { g + r * amp * g.norm() } else { g * (1.0 + amp) + r * 0.01 * g.norm() }
                    })
                    .collect();
                let vhat = trace(zhat.clone());
                let diff: Vec<f64> = v.iter().zip(&vhat).map(|(a, b)| a - b).collect();
                let lhs = trapezoid_sq(&diff, grid.dt);
                let rhs = c * heart_l2_sq(&mesh, &z, &zhat);
                checked += 1;
                tightest = tightest.max(lhs / rhs);
                if lhs > rhs * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
        }
    }
    (violations, checked, tightest)
}
