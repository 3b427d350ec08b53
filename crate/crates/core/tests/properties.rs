use proptest::prelude::*;
use rheoflow_core::analysis::{eoc, natural_f, ForcingTerms, ManufacturedSolution, TimeMode};
use rheoflow_core::constitutive::{ConstitutiveLaw, ConstitutiveModel, Disk, SymTensor2};
use rheoflow_core::mesh::{DiagonalPattern, TriMesh};
use rheoflow_core::quadrature::QuadratureRule;

fn tensor(scale: f64) -> impl Strategy<Value = SymTensor2> {
    (-scale..scale, -scale..scale, -scale..scale).prop_map(|(a, b, c)| SymTensor2::new(a, b, c))
}

fn model() -> impl Strategy<Value = ConstitutiveModel> {
    prop_oneof![
        (0.1..2.0f64).prop_map(|nu| ConstitutiveModel::Newtonian { nu }),
        (0.1..2.0f64, 1e-4..1.0f64, 1.2..3.0f64).prop_map(|(nu, eps, r)| ConstitutiveModel::Carreau { nu, eps, r }),
        (0.0..20.0f64, 1.0..300.0f64).prop_map(|(bn, m)| ConstitutiveModel::BinghamPapanastasiou { bn, m }),
        (0.1..2.0f64, 0.1..3.0f64, 1.0..300.0f64).prop_map(|(nu, delta_s, m)| ConstitutiveModel::ActivatedEulerNs {
            nu,
            delta_s,
            m,
            region: Disk::default(),
        }),
    ]
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| [x, y])
}

proptest! {
    #[test]
    fn eoc_recovers_power_laws(c in 1e-3..1e3f64, q in 0.1..4.0f64, levels in 2usize..7) {
        let hs: Vec<f64> = (0..levels).map(|i| 0.5f64.powi(i as i32)).collect();
        let errs: Vec<f64> = hs.iter().map(|h| c * h.powf(q)).collect();
        for r in eoc(&errs, &hs).unwrap() {
            prop_assert!((r.unwrap() - q).abs() < 1e-10);
        }
    }

    #[test]
    fn responses_are_monotone(m in model(), a in tensor(20.0), b in tensor(20.0), x in point()) {
        let (da, sa) = m.graph_point(a, x);
        let (db, sb) = m.graph_point(b, x);
        let scale = (sa - sb).norm() * (da - db).norm();
        prop_assert!((sa - sb).dot(da - db) >= -1e-12 * scale.max(1.0));
    }

    #[test]
    fn responses_are_frame_indifferent(m in model(), a in tensor(10.0), angle in 0.0..6.3f64, x in point()) {
        let lhs = m.response(a.rotate(angle), x);
        let rhs = m.response(a, x).rotate(angle);
        prop_assert!((lhs - rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
    }

    #[test]
    fn natural_f_is_monotone(a in tensor(5.0), b in tensor(5.0), r in 1.1..3.0f64, eps in 0.0..1.0f64) {
        let inner = (natural_f(a, r, eps) - natural_f(b, r, eps)).dot(a - b);
        prop_assert!(inner >= -1e-12);
    }

    #[test]
    fn unit_square_partitions_domain(n in 1usize..12, left in any::<bool>(), refine in any::<bool>()) {
        let pattern = if left { DiagonalPattern::Left } else { DiagonalPattern::Right };
        let mut mesh = TriMesh::unit_square(n, pattern).unwrap();
        if refine {
            mesh = mesh.barycentric_refine();
        }
        prop_assert!(mesh.validate().is_ok());
        prop_assert_eq!(mesh.num_cells(), 2 * n * n * if refine { 3 } else { 1 });
        prop_assert!((mesh.total_area() - 1.0).abs() < 1e-12);
        prop_assert!((0..mesh.num_cells()).all(|c| mesh.cell_area(c) > 0.0));
    }

    #[test]
    fn quadrature_is_exact_for_polynomials(
        degree in 1usize..15,
        coeffs in prop::collection::vec(-1.0..1.0f64, 120),
        vertex in prop::option::of(0usize..3),
    ) {
        let rule = match vertex {
            Some(v) => QuadratureRule::collapsed(degree, v).unwrap(),
            None => QuadratureRule::new(degree).unwrap(),
        };
        let fact = |n: i32| (1..=n).map(f64::from).product::<f64>();
        let mut terms = Vec::new();
        for i in 0..=degree as i32 {
            for j in 0..=(degree as i32 - i) {
                terms.push((i, j, coeffs[terms.len() % coeffs.len()]));
            }
        }
        let exact: f64 = terms.iter().map(|&(i, j, c)| c * fact(i) * fact(j) / fact(i + j + 2)).sum();
        let q = rule.integrate(|x| terms.iter().map(|&(i, j, c)| c * x[0].powi(i) * x[1].powi(j)).sum());
        prop_assert!((q - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
    }

    /// The forcing balances the momentum equation, checked by central differences.
    #[test]
    fn manufactured_forcing_balances_momentum(
        a in 1.2..2.5f64,
        b in 0.6..2.0f64,
        r in 1.3..2.5f64,
        eps in 0.0..0.1f64,
        penalty in prop_oneof![Just(0.0), 0.1..2.0f64],
        convection in any::<bool>(),
        unsteady in any::<bool>(),
        x in (0.2..0.9f64, 0.2..0.9f64),
        t in 0.1..1.0f64,
    ) {
        let mode = if unsteady { TimeMode::LinearInTime } else { TimeMode::Steady };
        let sol = ManufacturedSolution::new(a, b, r, 0.5, eps, mode).unwrap();
        let x = [x.0, x.1];
        let h = 1e-5;
        let shift = |d: usize, s: f64| if d == 0 { [x[0] + s, x[1]] } else { [x[0], x[1] + s] };
        let d = |f: &dyn Fn([f64; 2]) -> f64, k: usize| (f(shift(k, h)) - f(shift(k, -h))) / (2.0 * h);

        let u = sol.velocity(x, t);
        let mut expect = [0.0; 2];
        for i in 0..2 {
            let sx = |y| { let s = sol.stress(y, t).to_array(); if i == 0 { s[0] } else { s[2] } };
            let sy = |y| { let s = sol.stress(y, t).to_array(); if i == 0 { s[2] } else { s[1] } };
            let ui = |y| sol.velocity(y, t)[i];
            expect[i] = -(d(&sx, 0) + d(&sy, 1)) + d(&|y| sol.pressure(y, t), i);
            if unsteady {
                expect[i] += (sol.velocity(x, t + h)[i] - sol.velocity(x, t - h)[i]) / (2.0 * h);
            }
            if convection {
                expect[i] += u[0] * d(&ui, 0) + u[1] * d(&ui, 1);
            }
            if penalty != 0.0 {
                let rp = r / (r - 1.0);
                expect[i] += penalty * (u[0].hypot(u[1])).powf(2.0 * rp - 2.0) * u[i];
            }
        }
        let f = sol.forcing(x, t, ForcingTerms { convection, penalty });
        for i in 0..2 {
            prop_assert!((f[i] - expect[i]).abs() <= 1e-5 * (1.0 + expect[i].abs()), "f = {f:?}, fd = {expect:?}");
        }
    }

    #[test]
    fn manufactured_velocity_is_solenoidal(a in 1.1..3.0f64, x in (0.05..1.0f64, 0.05..1.0f64)) {
        let sol = ManufacturedSolution::new(a, 1.0, 2.0, 0.5, 0.0, TimeMode::Steady).unwrap();
        let g = sol.velocity_gradient([x.0, x.1], 0.0);
        prop_assert!((g[0][0] + g[1][1]).abs() < 1e-12);
    }
}
