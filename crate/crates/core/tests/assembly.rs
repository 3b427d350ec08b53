use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rheoflow_core::constitutive::{ConstitutiveLaw, ConstitutiveModel, Disk};
use rheoflow_core::forms::{
    BVariant, DirichletCondition, Discretization, DiscretizationOptions, ElementPair, FlowParams, FlowProblem,
};
use rheoflow_core::mesh::{markers::ALL, DiagonalPattern, TriMesh};
use rheoflow_core::solver::{newton_solve, NewtonOptions, Unreduced};
use rheoflow_core::sparse::norm2;

fn models() -> Vec<ConstitutiveModel> {
    vec![
        ConstitutiveModel::Newtonian { nu: 0.5 },
        ConstitutiveModel::Carreau { nu: 0.5, eps: 1e-2, r: 1.5 },
        ConstitutiveModel::BinghamPapanastasiou { bn: 2.0, m: 20.0 },
        ConstitutiveModel::ActivatedEulerNs {
            nu: 0.5,
            delta_s: 2.5,
            m: 20.0,
            region: Disk {
                center: [0.5, 0.5],
                radius_sq: 0.1,
            },
        },
    ]
}

fn discretization(n: usize, pair: ElementPair, g: Option<[f64; 2]>) -> Arc<Discretization> {
    let mesh = TriMesh::unit_square(n, DiagonalPattern::Right).unwrap();
    let bc = match g {
        Some(v) => DirichletCondition::new(&ALL, &[0, 1], Arc::new(move |x, _| [v[0] * x[1], v[1] * x[0]])),
        None => DirichletCondition::homogeneous(&ALL),
    };
    Arc::new(
        Discretization::new(
            &mesh,
            pair,
            DiscretizationOptions {
                dirichlet: vec![bc],
                ..Default::default()
            },
        )
        .unwrap(),
    )
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect()
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for pair in [ElementPair::ScottVogelius { k: 1 }, ElementPair::TaylorHood] {
        let disc = discretization(2, pair, Some([0.3, -0.2]));
        for model in models() {
            for variant in [BVariant::DivFree, BVariant::Skew] {
                let n = disc.num_unknowns();
                let params = FlowParams {
                    timestep: Some(0.1),
                    penalty: 0.7,
                    convection: true,
                    b_variant: variant,
                    time: 0.0,
                };
                let law: Arc<dyn ConstitutiveLaw> = Arc::new(model);
                let u_prev = random_vec(&mut rng, disc.velocity_space().dim(), 1.0);
                let prob = FlowProblem::new(disc.clone(), law, params)
                    .with_forcing(Arc::new(|x| [x[0].sin(), x[1] * x[0]]))
                    .with_previous(u_prev);
                let x = random_vec(&mut rng, n, 2.0);
                let jac = prob.assemble_jacobian(&x).unwrap();
                for _ in 0..3 {
                    let dir = random_vec(&mut rng, n, 1.0);
                    let jd = jac.mul_vec(&dir);
                    let mut best = f64::INFINITY;
                    for h in [1e-4, 1e-5, 1e-6, 1e-7] {
                        let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
                        let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
                        let rp = prob.assemble_residual(&xp).unwrap();
                        let rm = prob.assemble_residual(&xm).unwrap();
                        let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                        let err: Vec<f64> = fd.iter().zip(&jd).map(|(a, b)| a - b).collect();
                        best = best.min(norm2(&err) / norm2(&jd));
                    }
                    assert!(best <= 1e-6, "{pair:?} {model:?} {variant:?}: {best}");
                }
            }
        }
    }
}

#[test]
fn condensed_direction_equals_full_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for pair in [ElementPair::ScottVogelius { k: 1 }, ElementPair::TaylorHood] {
        let disc = discretization(3, pair, Some([1.0, 0.5]));
        for model in models() {
            let law: Arc<dyn ConstitutiveLaw> = Arc::new(model);
            let prob = FlowProblem::new(
                disc.clone(),
                law,
                FlowParams {
                    convection: true,
                    b_variant: BVariant::Skew,
                    ..Default::default()
                },
            );
            let x = random_vec(&mut rng, disc.num_unknowns(), 1.0);
            let r = prob.assemble_residual(&x).unwrap();
            let a = prob.newton_direction(&x, &r).unwrap();
            let b = rheoflow_core::solver::NonlinearSystem::newton_direction(&Unreduced(&prob), &x, &r).unwrap();
            let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
            assert!(norm2(&diff) <= 1e-8 * norm2(&b), "{pair:?} {model:?}");
        }
    }
}

#[test]
fn stokes_polynomial_solution_is_reproduced() {
    // u = (y, 0), p = 0, S = 2νD(u) solves steady Stokes with f = 0
    let disc = discretization(3, ElementPair::TaylorHood, Some([1.0, 0.0]));
    let nu = 0.5;
    let law: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Newtonian { nu });
    let prob = FlowProblem::new(disc.clone(), law, FlowParams::default());
    let s = disc.stress_space().interpolate(|_| [0.0, 0.0, nu]).unwrap();
    let u = disc.velocity_space().interpolate(|x| [x[1], 0.0]).unwrap();
    let p = disc.pressure_space().zero_field();
    let x = disc.pack(&s, &u, &p).unwrap();
    let r = prob.assemble_residual(&x).unwrap();
    assert!(r.iter().all(|v| v.abs() <= 1e-10));

    let (sol, hist) = newton_solve(&prob, disc.initial_state(0.0), &NewtonOptions::default()).unwrap();
    assert_eq!(hist.iterations(), 1);
    let err: f64 = sol.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn dirichlet_rows_leave_other_rows_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let with_bc = discretization(2, ElementPair::TaylorHood, None);
    let mesh = TriMesh::unit_square(2, DiagonalPattern::Right).unwrap();
    let without = Arc::new(Discretization::new(&mesh, ElementPair::TaylorHood, DiscretizationOptions::default()).unwrap());
    let law: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Carreau { nu: 0.5, eps: 0.1, r: 1.5 });
    let x = random_vec(&mut rng, with_bc.num_unknowns(), 1.0);
    let a = FlowProblem::new(with_bc.clone(), law.clone(), FlowParams::default());
    let b = FlowProblem::new(without, law, FlowParams::default());
    let ra = a.assemble_residual(&x).unwrap();
    let rb = b.assemble_residual(&x).unwrap();
    let ja = a.assemble_jacobian(&x).unwrap();
    let jb = b.assemble_jacobian(&x).unwrap();
    let constrained = with_bc.constrained_dofs();
    assert!(!constrained.is_empty());
    for i in 0..ra.len() {
        if constrained.contains(&i) {
            assert_eq!(ra[i], x[i]);
            assert_eq!(ja.row_values(i).iter().filter(|&&v| v != 0.0).count(), 1);
        } else {
            assert_eq!(ra[i].to_bits(), rb[i].to_bits());
            assert_eq!(ja.row_values(i), jb.row_values(i));
        }
    }
}

#[test]
fn skew_convection_vanishes_on_own_velocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let disc = discretization(3, ElementPair::TaylorHood, None);
    let zero: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Newtonian { nu: 0.5 });
    let conv = FlowProblem::new(
        disc.clone(),
        zero.clone(),
        FlowParams {
            convection: true,
            ..Default::default()
        },
    );
    let plain = FlowProblem::new(disc.clone(), zero, FlowParams::default());
    let mut x = random_vec(&mut rng, disc.num_unknowns(), 3.0);
    for d in disc.constrained_dofs() {
        x[d] = 0.0;
    }
    let rc = conv.assemble_residual(&x).unwrap();
    let rp = plain.assemble_residual(&x).unwrap();
    let uo = disc.velocity_offset();
    let u = disc.velocity_coeffs(&x);
    let b: f64 = (0..u.len()).map(|i| (rc[uo + i] - rp[uo + i]) * u[i]).sum();
    let scale = norm2(u).powi(3) / (u.len() as f64).sqrt();
    assert!(b.abs() <= 1e-12 * scale, "{b} vs {scale}");
}
