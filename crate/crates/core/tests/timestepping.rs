use std::f64::consts::PI;
use std::sync::Arc;

use rheoflow_core::analysis::{flow_rate, lebesgue_norm, ErrorQuadrature, ForcingTerms, ManufacturedSolution, TimeMode};
use rheoflow_core::constitutive::{ConstitutiveLaw, ConstitutiveModel};
use rheoflow_core::forms::{
    BVariant, DirichletCondition, Discretization, DiscretizationOptions, ElementPair, FlowParams, FlowProblem,
};
use rheoflow_core::mesh::{markers, DiagonalPattern, TriMesh};
use rheoflow_core::solver::{newton_solve, NewtonOptions};
use rheoflow_core::timestepper::{l2_div_project, RunOptions, SpaceTimeFn, TimeGrid, TimeStepper};

fn disc(n: usize, pair: ElementPair, bcs: Vec<DirichletCondition>, nullspace: bool) -> Arc<Discretization> {
    let mesh = TriMesh::unit_square(n, DiagonalPattern::Right).unwrap();
    Arc::new(
        Discretization::new(
            &mesh,
            pair,
            DiscretizationOptions {
                dirichlet: bcs,
                pressure_nullspace: nullspace,
                ..Default::default()
            },
        )
        .unwrap(),
    )
}

fn couette_bcs() -> Vec<DirichletCondition> {
    let zero = Arc::new(|_: [f64; 2], _: f64| [0.0, 0.0]);
    vec![
        DirichletCondition::new(&[markers::LEFT, markers::RIGHT], &[1], zero.clone()),
        DirichletCondition::new(&[markers::TOP, markers::BOTTOM], &[0, 1], zero),
    ]
}

fn velocity_l2(d: &Discretization, x: &[f64]) -> f64 {
    lebesgue_norm(&d.velocity_field(x), 2.0, &ErrorQuadrature::new(8, None).unwrap())
}

#[test]
fn projection_fixes_divergence_free_interpolants() {
    let rot = |x: [f64; 2], _t: f64| [x[1] - 0.5, 0.5 - x[0]];
    let d = disc(
        3,
        ElementPair::ScottVogelius { k: 1 },
        vec![DirichletCondition::new(&markers::ALL, &[0, 1], Arc::new(rot))],
        true,
    );
    let x = l2_div_project(&d, |x| rot(x, 0.0)).unwrap();
    let interp = d.velocity_space().interpolate(|x| rot(x, 0.0)).unwrap();
    let err = d
        .velocity_coeffs(&x)
        .iter()
        .zip(interp.coeffs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn projection_is_stable_and_idempotent() {
    for pair in [ElementPair::TaylorHood, ElementPair::ScottVogelius { k: 1 }] {
        let d = disc(4, pair, vec![DirichletCondition::homogeneous(&markers::ALL)], true);
        let grad = |x: [f64; 2]| [2.0 * x[0], 2.0 * x[1]];
        let x = l2_div_project(&d, grad).unwrap();
        let exact_norm = (8.0f64 / 3.0).sqrt();
        assert!(velocity_l2(&d, &x) < exact_norm);

        let mode = |x: [f64; 2]| {
            let (s, c) = ((PI * x[0]).sin(), (PI * x[1]).sin());
            [s * s * (2.0 * PI * x[1]).sin(), -c * c * (2.0 * PI * x[0]).sin()]
        };
        let once = l2_div_project(&d, mode).unwrap();
        let u = d.velocity_field(&once);
        let twice = l2_div_project(&d, |p| u.evaluate_at(p).unwrap().values.try_into().unwrap()).unwrap();
        let diff = d
            .velocity_coeffs(&once)
            .iter()
            .zip(d.velocity_coeffs(&twice))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "{pair:?}: {diff}");
    }
}

#[test]
fn couette_projection_is_discretely_solenoidal_and_flux_is_sectional() {
    let d = disc(6, ElementPair::ScottVogelius { k: 1 }, couette_bcs(), false);
    let x = l2_div_project(&d, |x| [1.0 - x[1], 0.0]).unwrap();
    let law: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Newtonian { nu: 1.0 });
    let prob = FlowProblem::new(d.clone(), law, FlowParams::default());
    let r = prob.assemble_residual(&x).unwrap();
    let po = d.pressure_offset();
    let qmax = r[po..po + d.pressure_space().dim()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(qmax <= 1e-12, "{qmax}");
    let u = d.velocity_field(&x);
    let (q1, q2) = (flow_rate(&u, 0.25).unwrap(), flow_rate(&u, 0.75).unwrap());
    assert!((q1 - q2).abs() <= 1e-8, "{q1} {q2}");
    assert!(q1 > 0.3 && q1 < 0.5);
}

fn stepper(d: Arc<Discretization>, law: ConstitutiveModel, grid: TimeGrid, forcing: Option<SpaceTimeFn>) -> TimeStepper {
    TimeStepper {
        disc: d,
        law: Arc::new(law),
        params: FlowParams {
            convection: true,
            b_variant: BVariant::DivFree,
            penalty: 0.5,
            ..Default::default()
        },
        forcing,
        newton: NewtonOptions::default(),
        grid,
        energy_check: true,
        extrapolate: false,
    }
}

#[test]
fn zero_data_stays_zero() {
    let d = disc(3, ElementPair::ScottVogelius { k: 1 }, vec![DirichletCondition::homogeneous(&markers::ALL)], true);
    let st = stepper(d.clone(), ConstitutiveModel::Carreau { nu: 0.5, eps: 0.1, r: 1.5 }, TimeGrid::new(0.1, 0.3).unwrap(), None);
    let tr = st.run(d.initial_state(0.0), RunOptions::default(), |_, _| Ok(())).unwrap();
    assert_eq!(tr.states.len(), 4);
    assert!(tr.states.iter().all(|s| s.iter().all(|&v| v == 0.0)));
}

#[test]
fn decay_dissipates_energy_and_balances_the_ledger() {
    let mode = |x: [f64; 2]| {
        let (s, c) = ((PI * x[0]).sin(), (PI * x[1]).sin());
        [s * s * (2.0 * PI * x[1]).sin(), -c * c * (2.0 * PI * x[0]).sin()]
    };
    for (pair, variant) in [(ElementPair::TaylorHood, BVariant::Skew), (ElementPair::ScottVogelius { k: 1 }, BVariant::DivFree)] {
        let d = disc(4, pair, vec![DirichletCondition::homogeneous(&markers::ALL)], true);
        let mut st = stepper(d.clone(), ConstitutiveModel::Newtonian { nu: 0.05 }, TimeGrid::new(0.02, 0.2).unwrap(), None);
        st.params.b_variant = variant;
        let x0 = l2_div_project(&d, mode).unwrap();
        let mut last = 0.5 * velocity_l2(&d, &x0).powi(2);
        let tol = 10.0 * (st.newton.abs_tol + 1e-9);
        st.run(x0, RunOptions::default(), |diag, _| {
            assert!(diag.kinetic_energy < last, "{pair:?} step {}", diag.step);
            last = diag.kinetic_energy;
            let res = diag.energy_residual().unwrap();
            assert!(res.abs() <= tol, "{pair:?} step {}: {res}", diag.step);
            Ok(())
        })
        .unwrap();
    }
}

#[test]
fn forced_carreau_steps_balance_the_ledger() {
    let d = disc(3, ElementPair::ScottVogelius { k: 1 }, vec![DirichletCondition::homogeneous(&markers::ALL)], true);
    let f: SpaceTimeFn = Arc::new(|x, t| [t * (PI * x[1]).sin(), x[0] * x[0]]);
    let st = stepper(d.clone(), ConstitutiveModel::Carreau { nu: 0.5, eps: 1e-3, r: 1.4 }, TimeGrid::new(0.05, 0.25).unwrap(), Some(f));
    let tol = 10.0 * (st.newton.abs_tol + 1e-9);
    let tr = st
        .run(d.initial_state(0.0), RunOptions { thin: 2, steady_tol: None }, |diag, _| {
            assert!(diag.energy_residual().unwrap().abs() <= tol);
            Ok(())
        })
        .unwrap();
    assert_eq!(tr.stored, vec![0, 2, 4, 5]);
    assert_eq!(tr.diagnostics.len(), 5);
}

#[test]
fn steady_solution_does_not_drift() {
    let ms = ManufacturedSolution::new(1.01, 2.0 / 1.5 - 0.99, 1.5, 0.5, 1e-5, TimeMode::Steady).unwrap();
    let mesh = TriMesh::unit_square(3, DiagonalPattern::Right).unwrap();
    let d = Arc::new(
        Discretization::new(
            &mesh,
            ElementPair::ScottVogelius { k: 1 },
            DiscretizationOptions {
                dirichlet: vec![DirichletCondition::new(&markers::ALL, &[0, 1], Arc::new(move |x, t| ms.velocity(x, t)))],
                singular_point: Some([0.0, 0.0]),
                ..Default::default()
            },
        )
        .unwrap(),
    );
    let law = ConstitutiveModel::Carreau { nu: 0.5, eps: 1e-5, r: 1.5 };
    let forcing = ms.forcing_fn(0.0, ForcingTerms::default());
    let steady = FlowProblem::new(d.clone(), Arc::new(law), FlowParams::default()).with_forcing(forcing);
    let newtonian: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Newtonian { nu: 0.5 });
    let warm = FlowProblem { law: newtonian, ..steady.clone() };
    let x_warm = newton_solve(&warm, d.initial_state(0.0), &NewtonOptions::default()).unwrap().0;
    let x0 = newton_solve(&steady, x_warm, &NewtonOptions::default()).unwrap().0;
    let f: SpaceTimeFn = Arc::new(move |x, _| ms.forcing(x, 0.0, ForcingTerms::default()));
    let mut st = stepper(d.clone(), law, TimeGrid::new(0.01, 0.05).unwrap(), Some(f));
    st.params = FlowParams::default();
    st.energy_check = false;
    let u0 = d.velocity_coeffs(&x0).to_vec();
    st.run(x0, RunOptions::default(), |_, x| {
        let drift = d.velocity_coeffs(x).iter().zip(&u0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-8, "{drift}");
        Ok(())
    })
    .unwrap();
}
