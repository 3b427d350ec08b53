//! Self-tests behind `rheoflow check` and the graph-check experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rheoflow_core::constitutive::{
    check_coercive, check_monotone, random_tensor, ConstitutiveLaw, ConstitutiveModel, Disk, SymTensor2,
};
use rheoflow_core::quadrature::{QuadratureRule, MAX_DEGREE};
use rheoflow_core::Execution;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// One law of each kind, with the parameters used by the experiments.
pub fn reference_models() -> Vec<ConstitutiveModel> {
    vec![
        ConstitutiveModel::Newtonian { nu: 0.5 },
        ConstitutiveModel::Carreau { nu: 0.5, eps: 1e-5, r: 1.5 },
        ConstitutiveModel::BinghamPapanastasiou { bn: 5.0, m: 200.0 },
        ConstitutiveModel::ActivatedEulerNs {
            nu: 0.5,
            delta_s: 2.5,
            m: 200.0,
            region: Disk::default(),
        },
    ]
}

/// Monotonicity, coercivity, `(0,0)` on the graph and trace preservation.
pub fn graph_checks(model: &ConstitutiveModel, samples: usize, seed: u64, max_norm: f64) -> Vec<CheckResult> {
    let name = model.name();
    let mut out = Vec::new();

    let mono = check_monotone(model, samples, seed, max_norm, Execution::Parallel);
    out.push(CheckResult::new(
        format!("{name}: monotone"),
        mono.passed,
        format!("{} pairs, min (S1-S2):(D1-D2) = {:.3e}", mono.samples, mono.min_inner),
    ));

    let r = model.growth_exponent();
    let coer = check_coercive(model, r, samples, seed + 1, (1e-3, max_norm), Execution::Parallel);
    out.push(CheckResult::new(
        format!("{name}: coercive"),
        coer.passed,
        format!("c = {:.4e}, m = {:.4e} (r = {r})", coer.c, coer.m),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut origin: f64 = 0.0;
    let mut trace: f64 = 0.0;
    for _ in 0..samples.min(1000) {
        let x = model.sample_point(&mut rng);
        origin = origin.max(model.response(SymTensor2::ZERO, x).norm());
        let t = random_tensor(&mut rng, 1e-4, max_norm, true);
        let out = model.response(t, x);
        trace = trace.max(out.trace().abs() / out.norm().max(1.0));
    }
    out.push(CheckResult::new(
        format!("{name}: origin on graph"),
        origin <= 1e-12,
        format!("max |response(0)| = {origin:.3e}"),
    ));
    out.push(CheckResult::new(
        format!("{name}: trace-free preserved"),
        trace <= 1e-12,
        format!("max |tr| / |T| = {trace:.3e}"),
    ));
    out
}

/// Every rule integrates all monomials up to its degree on the reference triangle.
pub fn quadrature_checks() -> Vec<CheckResult> {
    let exact = |i: i32, j: i32| {
        // ∫ ξ^i η^j over the reference triangle = i! j! / (i + j + 2)!
        let f = |n: i32| (1..=n).map(f64::from).product::<f64>();
        f(i) * f(j) / f(i + j + 2)
    };
    let mut out = Vec::new();
    for degree in 1..=MAX_DEGREE {
        let mut rules = vec![("standard".to_string(), QuadratureRule::new(degree))];
        for v in 0..3 {
            rules.push((format!("collapsed at vertex {v}"), QuadratureRule::collapsed(degree, v)));
        }
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for (label, rule) in rules {
            match rule {
                Ok(rule) => {
                    for i in 0..=degree as i32 {
                        for j in 0..=(degree as i32 - i) {
                            let q = rule.integrate(|x| x[0].powi(i) * x[1].powi(j));
                            worst = worst.max((q - exact(i, j)).abs() / exact(i, j));
                        }
                    }
                }
                Err(e) => failure = Some(format!("{label}: {e}")),
            }
        }
        let passed = failure.is_none() && worst <= 1e-12;
        out.push(CheckResult::new(
            format!("quadrature degree {degree}"),
            passed,
            failure.unwrap_or_else(|| format!("max relative monomial error {worst:.2e}")),
        ));
    }
    out
}

/// Analytic tangents against central differences at random inputs.
pub fn tangent_checks(samples: usize, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for model in reference_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = model.sample_point(&mut rng);
            let t = random_tensor(&mut rng, 1e-2, 10.0, false);
            let tan = model.response_tangent(t, x);
            let dir = random_tensor(&mut rng, 1.0, 1.0, false);
            let mut best = f64::INFINITY;
            for h in [1e-4, 1e-5, 1e-6, 1e-7] {
                let step = dir.scale(h * t.norm());
                let fd = (model.response(t + step, x) - model.response(t - step, x)).scale(0.5 / (h * t.norm()));
                let an = tan.apply(dir);
                best = best.min((fd - an).norm() / an.norm().max(1e-12));
            }
            worst = worst.max(best);
        }
        out.push(CheckResult::new(
            format!("{}: tangent", model.name()),
            worst <= 1e-6,
            format!("max relative difference {worst:.2e} over {samples} samples"),
        ));
    }
    out
}
