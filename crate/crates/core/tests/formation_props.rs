use formest_core::estimator::{steady_state_oracle, EstimatorState};
use formest_core::formation::{
    control_input, error_dynamics, formation_error, run_formation, FormationError, FormationScenario, FormationState,
    RotationSource, Vec3,
};
use formest_core::graph::{algebraic_connectivity, has_rooted_out_branch, laplacian, DiGraph};
use formest_core::integrate::integrate;
use formest_core::localization::{
    localization_derivative, localization_error, run_localization, LocalizationError, LocalizationScenario,
};
use formest_core::metrics::fit_rigid_transform;
use formest_core::rotation::{gaussian_vector, random_rotation_with, Rotation, RotationError};
use formest_core::topology;
use formest_core::IntegratorConfig;
use nalgebra::{DMatrix, DVector, Matrix3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn m3(r: &Rotation) -> Matrix3<f64> {
    Matrix3::from_column_slice(r.matrix().as_slice())
}

fn point(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::from_iterator(gaussian_vector(3, rng).iter().map(|v| v * scale))
}

fn rooted_graph(rng: &mut ChaCha8Rng, max_n: usize) -> DiGraph {
    loop {
        // three agents at least, so a rigid fit is well posed
        let n = rng.random_range(3..=max_n);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random_bool(0.5) {
                    edges.push((i, j, rng.random_range(0.5..2.0)));
                }
            }
        }
        let g = DiGraph::new(n, edges).unwrap();
        if has_rooted_out_branch(&g) && connectivity(&g) > 0.3 {
            return g;
        }
    }
}

fn connectivity(g: &DiGraph) -> f64 {
    algebraic_connectivity(&laplacian(g).spectrum().unwrap()).unwrap()
}

struct World {
    g: DiGraph,
    c: Vec<Rotation>,
    gains: Vec<f64>,
    k_u: f64,
    shape: Vec<Vec3>,
    start: Vec<Vec3>,
    z0: EstimatorState,
}

fn world(seed: u64, max_n: usize) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = rooted_graph(&mut rng, max_n);
    let n = g.n_vertices();
    World {
        c: (0..n).map(|_| random_rotation_with(3, &mut rng)).collect(),
        gains: g.edges().iter().map(|_| rng.random_range(0.5..2.0)).collect(),
        k_u: rng.random_range(0.5..2.0),
        shape: (0..n).map(|_| point(&mut rng, 2.0)).collect(),
        start: (0..n).map(|_| point(&mut rng, 3.0)).collect(),
        z0: EstimatorState::random(3, n, &mut rng),
        g,
    }
}

impl World {
    fn formation(&self) -> FormationScenario {
        FormationScenario::new(
            self.g.clone(),
            self.c.clone(),
            self.start.clone(),
            self.shape.clone(),
            self.k_u,
            self.gains.clone(),
        )
        .unwrap()
    }

    fn localization(&self) -> LocalizationScenario {
        LocalizationScenario::new(
            self.g.clone(),
            self.c.clone(),
            self.shape.clone(),
            self.start.clone(),
            self.k_u,
            self.gains.clone(),
        )
        .unwrap()
    }

    /// Horizon long enough for the slower of the two consensus layers.
    fn horizon(&self) -> f64 {
        let rate = connectivity(&self.g);
        (35.0 / (rate * self.k_u.min(1.0))).ceil()
    }
}

fn converged_estimator(c: &[Rotation], c_star: &Rotation) -> EstimatorState {
    let slots: Vec<Vec<DVector<f64>>> = c
        .iter()
        .map(|ci| {
            let b = ci.compose(c_star).unwrap().into_matrix();
            vec![b.column(0).into_owned(), b.column(1).into_owned()]
        })
        .collect();
    EstimatorState::from_slots(3, &slots).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn formation_velocity_obeys_error_dynamics(seed in any::<u64>()) {
        let w = world(seed, 8);
        let s = w.formation();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let state = FormationState { positions: w.start.clone(), estimator: w.z0.clone() };
        // any rotation works for the identity, not just the eventual limit
        let c_star = random_rotation_with(3, &mut rng);
        let signals = formation_error(&state, &s, &c_star).unwrap();
        let rhs = error_dynamics(&s.control_laplacian(), s.k_u(), &signals);
        for (i, r) in rhs.iter().enumerate() {
            let velocity = m3(&w.c[i]).transpose() * control_input(&state, &s, i).unwrap();
            prop_assert!((velocity - r).amax() < 1e-10);
        }
    }

    #[test]
    fn localization_update_obeys_error_dynamics(seed in any::<u64>()) {
        let w = world(seed, 8);
        let s = w.localization();
        let frame = random_rotation_with(3, &mut ChaCha8Rng::seed_from_u64(seed ^ 2));
        let signals = localization_error(&w.start, &s, &w.z0, &frame).unwrap();
        let rhs = error_dynamics(&s.control_laplacian(), s.k_u(), &signals);
        let lhs = localization_derivative(&w.start, &s, &w.z0).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).amax() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn random_formations_converge_to_a_rigid_copy(seed in any::<u64>()) {
        let w = world(seed, 8);
        let s = w.formation();
        let cfg = IntegratorConfig::new(0.002, w.horizon()).with_record_every(1000);
        let run = run_formation(&s, &w.z0, &cfg, false).unwrap();
        prop_assert!(run.report.converged, "edge error {}", run.report.max_edge_error);
        let fit = fit_rigid_transform(&w.shape, &run.final_state().positions).unwrap();
        prop_assert!(fit.residual < 1e-4);
        let c_star = m3(run.report.common_rotation.as_ref().unwrap());
        prop_assert!((fit.rotation - c_star).norm() < 1e-5);
    }

    #[test]
    fn random_localizations_recover_distances(seed in any::<u64>()) {
        let w = world(seed, 8);
        let s = w.localization();
        let cfg = IntegratorConfig::new(0.002, w.horizon()).with_record_every(1000);
        let run = run_localization(&s, &w.z0, &cfg, false).unwrap();
        prop_assert!(run.report.converged, "distance error {}", run.report.max_distance_error);
        let fit = run.report.rigid_fit.unwrap();
        prop_assert!(fit.residual < 1e-4);
        let frame = m3(run.report.frame.as_ref().unwrap());
        prop_assert!((fit.rotation - frame).norm() < 1e-5);
    }
}

#[test]
fn frozen_estimator_gives_linear_consensus() {
    let w = world(11, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c_star = random_rotation_with(3, &mut rng);
    let s = w.formation();
    let z = converged_estimator(&w.c, &c_star);
    let t = 3.0;
    let run = run_formation(&s, &z, &IntegratorConfig::new(0.001, t), false).unwrap();

    let n = w.g.n_vertices();
    let a = -(s.control_laplacian().matrix().kronecker(&DMatrix::identity(3, 3))) * (s.k_u() * t);
    // e^{A} by scaling and squaring a truncated Taylor series
    let squarings = 10;
    let scaled = &a / 2f64.powi(squarings);
    let mut term = DMatrix::identity(3 * n, 3 * n);
    let mut flow = term.clone();
    for k in 1..25 {
        term = &term * &scaled / k as f64;
        flow += &term;
    }
    for _ in 0..squarings {
        flow = &flow * &flow;
    }
    let e0 = formation_error(&FormationState { positions: w.start.clone(), estimator: z }, &s, &c_star).unwrap();
    let e0 = DVector::from_iterator(3 * n, e0.error.iter().flat_map(|v| v.iter().copied()));
    let e_t = formation_error(&run.final_state(), &s, &c_star).unwrap();
    let e_t = DVector::from_iterator(3 * n, e_t.error.iter().flat_map(|v| v.iter().copied()));
    assert!((flow * e0 - e_t).amax() < 1e-8);
}

#[test]
fn localization_error_is_consensus_driven_by_disturbance() {
    // Integrate x' = -k_u (L ⊗ I) x + Ψ(z) next to the estimator and compare
    // with p̂ - C*ᵀ p from the full run.
    let w = world(21, 6);
    let s = w.localization();
    let n = w.g.n_vertices();
    let cfg = IntegratorConfig::new(0.001, 8.0).with_record_every(500);
    let run = run_localization(&s, &w.z0, &cfg, false).unwrap();
    let frame = run.report.frame.clone().unwrap();

    let rel = formest_core::RelativeOrientations::from_true(&w.g, &w.c).unwrap();
    let consensus = formest_core::estimator::OrientationConsensus::new(&w.g, &rel).unwrap();
    let big = s.control_laplacian().matrix().kronecker(&DMatrix::identity(3, 3)) * s.k_u();
    let x0 = localization_error(&w.start, &s, &w.z0, &frame).unwrap().error;
    let mut state: Vec<f64> = x0.iter().flat_map(|v| v.iter().copied()).collect();
    state.extend_from_slice(w.z0.as_slice());
    let traj = integrate(
        |_, y, out| -> Result<(), LocalizationError> {
            let (x, z) = y.split_at(3 * n);
            let (dx, dz) = out.split_at_mut(3 * n);
            consensus.derivative_into(z, dz);
            let z = EstimatorState::from_flat(3, n, z.to_vec())?;
            // the disturbance only depends on the estimator, not on the positions
            let psi = localization_error(&w.start, &s, &z, &frame)?.disturbance;
            let lx = &big * DVector::from_column_slice(x);
            for i in 0..n {
                for a in 0..3 {
                    dx[3 * i + a] = -lx[3 * i + a] + psi[i][a];
                }
            }
            Ok(())
        },
        state,
        &cfg,
    )
    .unwrap();

    for (k, y) in traj.states.iter().enumerate() {
        let full = run.state_at(k);
        let err = localization_error(&full.positions, &s, &full.estimator, &frame).unwrap().error;
        for i in 0..n {
            let x = Vec3::from_column_slice(&y[3 * i..3 * i + 3]);
            assert!((x - err[i]).amax() < 1e-9, "sample {k}, agent {i}");
        }
    }
}

#[test]
fn invalid_initialization_is_refused_unless_forced() {
    let g = topology::six_agent();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c: Vec<_> = (0..6).map(|_| random_rotation_with(3, &mut rng)).collect();
    let start: Vec<_> = (0..6).map(|_| point(&mut rng, 1.0)).collect();
    let s = FormationScenario::with_unit_gains(g.clone(), c.clone(), start, topology::six_agent_prism(), 1.0).unwrap();
    let z0 = EstimatorState::zeros(3, 6);
    assert!(steady_state_oracle(&g, &c, &z0).is_err());
    let cfg = IntegratorConfig::new(0.01, 1.0);
    assert!(matches!(run_formation(&s, &z0, &cfg, false), Err(FormationError::InvalidInitialization(_))));
    // zero slots cannot be orthonormalized, so the forced run stops at the first readout
    let forced = run_formation(&s, &z0, &cfg, true).unwrap_err();
    assert!(matches!(
        forced,
        FormationError::Integration(formest_core::integrate::IntegrationError::Derivative {
            source: RotationError::DegenerateInput { .. },
            ..
        })
    ));
}

#[test]
fn forced_run_reports_tail_rotation() {
    // slot 0 in the consensus-free subspace: rejected, yet readable for a while
    let g = topology::six_agent();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c: Vec<_> = (0..6).map(|_| random_rotation_with(3, &mut rng)).collect();
    let l = laplacian(&g).matrix().kronecker(&DMatrix::identity(3, 3));
    let q = &l * gaussian_vector(18, &mut rng);
    let slots: Vec<Vec<DVector<f64>>> =
        (0..6).map(|i| vec![c[i].matrix() * q.rows(3 * i, 3), gaussian_vector(3, &mut rng)]).collect();
    let z0 = EstimatorState::from_slots(3, &slots).unwrap();
    let start: Vec<_> = (0..6).map(|_| point(&mut rng, 1.0)).collect();
    let s = FormationScenario::with_unit_gains(g, c, start, topology::six_agent_prism(), 1.0).unwrap();
    let run = run_formation(&s, &z0, &IntegratorConfig::new(0.01, 2.0), true).unwrap();
    assert_eq!(run.report.rotation_source, RotationSource::Tail);
    assert!(!run.report.initialization_valid);
    assert!(!run.report.converged);
}
