//! Newton's method with backtracking, sparse direct solves, pressure
//! normalization and parameter continuation.

use std::sync::{Arc, Mutex};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::MatMut;

use crate::error::{Error, NewtonHistory, Result};
use crate::forms::{Discretization, FlowProblem};
use crate::sparse::{norm2, CsrMatrix, SparsityPattern};

/// Reuses the symbolic factorization while the sparsity pattern is unchanged.
#[derive(Default)]
pub struct LuCache {
    symbolic: Mutex<Option<(Arc<SparsityPattern>, SymbolicLu<usize>)>>,
}

/// Border `b` of a system `[K b; bᵀ 0]`, supported on `offset..offset + weights.len()`.
/// `pin` is an index inside the support whose diagonal entry of `K` is
/// stored in the pattern; it is shifted to make `K` invertible when the
/// border removes a one-dimensional kernel.
#[derive(Debug, Clone, Copy)]
pub struct Border<'a> {
    pub offset: usize,
    pub weights: &'a [f64],
    pub pin: usize,
}

impl Border<'_> {
    fn dot(&self, y: &[f64]) -> f64 {
        self.weights.iter().zip(&y[self.offset..]).map(|(w, v)| w * v).sum()
    }

    fn axpy(&self, alpha: f64, y: &mut [f64]) {
        for (w, v) in self.weights.iter().zip(&mut y[self.offset..]) {
            *v += alpha * w;
        }
    }
}

struct Factor {
    lu: Lu<usize, f64>,
    n: usize,
}

impl Factor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.lu
            .solve_transpose_in_place(MatMut::from_column_major_slice_mut(&mut x, self.n, 1));
        x
    }
}

fn check_square(a: &CsrMatrix, b: &[f64]) -> Result<()> {
    if a.ncols() != a.nrows() || b.len() != a.nrows() {
        return Err(Error::LinearSolve(format!(
            "shape mismatch: {}x{} matrix, rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    Ok(())
}

fn refine<A, S>(apply: A, solve: S, b: &[f64], scale: f64) -> Result<Vec<f64>>
where
    A: Fn(&[f64]) -> Vec<f64>,
    S: Fn(&[f64]) -> Vec<f64>,
{
    let mut x = solve(b);
    let bnorm = norm2(b);
    for _ in 0..4 {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve("singular matrix".into()));
        }
        let ax = apply(&x);
        let res: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        if norm2(&res) <= 1e-9 * (scale * norm2(&x) + bnorm) {
            return Ok(x);
        }
        for (xi, di) in x.iter_mut().zip(solve(&res)) {
            *xi += di;
        }
    }
    Err(Error::LinearSolve("residual check failed after refinement".into()))
}

impl LuCache {
    fn factor(&self, a: &CsrMatrix) -> Result<Factor> {
        let n = a.nrows();
        let pat = a.pattern();
        // CSR storage of A read as CSC is Aᵀ
        let sym = SymbolicSparseColMatRef::new_checked(n, n, pat.row_ptr(), None, pat.col_idx());
        let symbolic = {
            let mut guard = self.symbolic.lock().expect("lu cache poisoned");
            match guard.as_ref() {
                Some((p, s)) if Arc::ptr_eq(p, pat) => s.clone(),
                _ => {
                    let s = SymbolicLu::try_new(sym)
                        .map_err(|e| Error::LinearSolve(format!("symbolic factorization: {e:?}")))?;
                    *guard = Some((pat.clone(), s.clone()));
                    s
                }
            }
        };
        let lu = Lu::try_new_with_symbolic(symbolic, SparseColMatRef::new(sym, a.values()))
            .map_err(|e| Error::LinearSolve(format!("numeric factorization: {e:?}")))?;
        Ok(Factor { lu, n })
    }

    pub fn solve(&self, a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
        check_square(a, b)?;
        if b.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.factor(a)?;
        refine(|x| a.mul_vec(x), |r| f.solve(r), b, a.norm())
    }

    /// Solves `K y + b λ = f`, `bᵀ y = g` without storing the dense border.
    /// `K + s e_pin e_pinᵀ` is factored once; the border and the pin shift
    /// are resolved by a 2×2 system.
    pub fn solve_bordered(&self, k: &CsrMatrix, border: Border, f: &[f64], g: f64) -> Result<(Vec<f64>, f64)> {
        check_square(k, f)?;
        let n = f.len();
        if border.offset + border.weights.len() > n || border.pin < border.offset || border.pin >= border.offset + border.weights.len() {
            return Err(Error::LinearSolve("border outside the matrix".into()));
        }
        let pin_pos = k
            .pattern()
            .position(border.pin, border.pin)
            .ok_or_else(|| Error::LinearSolve("pinned diagonal missing from the pattern".into()))?;
        let s = (0..n)
            .map(|i| k.get(i, i))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE.sqrt());
        let mut shifted = k.clone();
        shifted.values_mut()[pin_pos] += s;
        let fac = self.factor(&shifted)?;
        let mut b = vec![0.0; n];
        border.axpy(1.0, &mut b);
        let mut e = vec![0.0; n];
        e[border.pin] = 1.0;
        let zb = fac.solve(&b);
        let v = fac.solve(&e);
        let (j, btzb, btv) = (border.pin, border.dot(&zb), border.dot(&v));
        let inverse = |rhs: &[f64]| -> Vec<f64> {
            let zf = fac.solve(&rhs[..n]);
            let g = rhs[n];
            // y = zf - λ zb + s α v with α = y_j
            let (a11, a12, r1) = (zb[j], 1.0 - s * v[j], zf[j]);
            let (a21, a22, r2) = (btzb, -s * btv, border.dot(&zf) - g);
            let det = a11 * a22 - a12 * a21;
            let lambda = (r1 * a22 - a12 * r2) / det;
            let alpha = (a11 * r2 - a21 * r1) / det;
            let mut y: Vec<f64> = zf.iter().zip(&zb).zip(&v).map(|((zf, zb), v)| zf - lambda * zb + s * alpha * v).collect();
            y.push(lambda);
            y
        };
        let apply = |x: &[f64]| -> Vec<f64> {
            let mut out = k.mul_vec(&x[..n]);
            border.axpy(x[n], &mut out);
            out.push(border.dot(&x[..n]));
            out
        };
        let mut rhs = f.to_vec();
        rhs.push(g);
        let scale = k.norm() + 2f64.sqrt() * norm2(border.weights);
        let mut x = refine(apply, inverse, &rhs, scale)?;
        let lambda = x.pop().expect("bordered solution has a multiplier");
        Ok((x, lambda))
    }
}

/// One-off sparse direct solve of `A x = b`.
pub fn linear_solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    LuCache::default().solve(a, b)
}

/// Residual and Newton-step oracle of a nonlinear system.
pub trait NonlinearSystem {
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Solves `J(x) δ = -r`.
    fn newton_direction(&self, x: &[f64], r: &[f64]) -> Result<Vec<f64>>;

    /// Normalization applied after every accepted update when the nullspace flag is set.
    fn normalize(&self, _x: &mut [f64]) {}
}

impl NonlinearSystem for FlowProblem {
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.assemble_residual(x)
    }

    fn newton_direction(&self, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        FlowProblem::newton_direction(self, x, r)
    }

    fn normalize(&self, x: &mut [f64]) {
        if self.disc.has_pressure_nullspace() {
            orthogonalize_pressure_nullspace(&self.disc, x);
        }
    }
}

/// Uses the assembled Jacobian and the plain sparse solve, without condensation.
pub struct Unreduced<'a>(pub &'a FlowProblem);

impl NonlinearSystem for Unreduced<'_> {
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.assemble_residual(x)
    }

    fn newton_direction(&self, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let j = self.0.assemble_jacobian(x)?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        linear_solve(&j, &rhs)
    }

    fn normalize(&self, x: &mut [f64]) {
        self.0.normalize(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub backtrack_factor: f64,
    pub max_halvings: usize,
    pub nullspace: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            abs_tol: 1e-10,
            rel_tol: 1e-9,
            max_iterations: 50,
            backtrack_factor: 0.5,
            max_halvings: 8,
            nullspace: true,
        }
    }
}

impl NewtonOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::invalid("Newton tolerances must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("Newton needs at least one iteration"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::invalid("backtracking factor must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Damped Newton iteration. A step is accepted only if it does not increase
/// the ℓ₂ residual norm.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    system: &S,
    x0: Vec<f64>,
    options: &NewtonOptions,
) -> Result<(Vec<f64>, NewtonHistory)> {
    options.validate()?;
    let mut x = x0;
    if options.nullspace {
        system.normalize(&mut x);
    }
    let mut r = system.residual(&x)?;
    let mut norm = norm2(&r);
    let mut history = NewtonHistory {
        residual_norms: vec![norm],
        step_lengths: Vec::new(),
    };
    let target = options.abs_tol.max(options.rel_tol * norm);
    if norm <= options.abs_tol {
        return Ok((x, history));
    }
    for _ in 0..options.max_iterations {
        let delta = system.newton_direction(&x, &r)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let mut trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
            if options.nullspace {
                system.normalize(&mut trial);
            }
            match system.residual(&trial) {
                Ok(rt) => {
                    let nt = norm2(&rt);
                    if nt.is_finite() && nt <= norm {
                        accepted = Some((trial, rt, nt));
                        break;
                    }
                }
                Err(Error::NonFiniteResidual { .. }) => {}
                Err(e) => return Err(e),
            }
            alpha *= options.backtrack_factor;
        }
        let Some((xn, rn, nn)) = accepted else {
            return Err(Error::NonConvergence {
                reason: "line search found no non-increasing step".into(),
                history,
            });
        };
        x = xn;
        r = rn;
        norm = nn;
        history.residual_norms.push(norm);
        history.step_lengths.push(alpha);
        if norm <= target {
            return Ok((x, history));
        }
    }
    Err(Error::NonConvergence {
        reason: format!("{} iterations exhausted", options.max_iterations),
        history,
    })
}

/// Shifts the pressure coefficients so that `∫ p_h = 0`. Lagrange bases
/// reproduce constants, so a uniform shift of the coefficients is exact.
pub fn orthogonalize_pressure_nullspace(disc: &Discretization, x: &mut [f64]) {
    let o = disc.pressure_offset();
    let w = disc.pressure_weights();
    let area: f64 = w.iter().sum();
    let p = &mut x[o..o + w.len()];
    let mean = p.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / area;
    for v in p.iter_mut() {
        *v -= mean;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationStage {
    pub name: String,
    pub value: f64,
}

impl ContinuationStage {
    pub fn new(name: &str, value: f64) -> Self {
        ContinuationStage {
            name: name.to_string(),
            value,
        }
    }
}

/// Solves the stages in order, each from the previous stage's solution.
pub fn continuation_solve<S, F>(
    schedule: &[ContinuationStage],
    mut build: F,
    x0: Vec<f64>,
    options: &NewtonOptions,
) -> Result<(Vec<f64>, Vec<NewtonHistory>)>
where
    S: NonlinearSystem,
    F: FnMut(&ContinuationStage) -> Result<S>,
{
    if schedule.is_empty() {
        return Err(Error::invalid("empty continuation schedule"));
    }
    let mut x = x0;
    let mut histories = Vec::with_capacity(schedule.len());
    for (i, stage) in schedule.iter().enumerate() {
        let system = build(stage)?;
        let (xn, h) = newton_solve(&system, x, options)
            .map_err(|e| e.context(format!("continuation stage {} ({} = {})", i + 1, stage.name, stage.value)))?;
        x = xn;
        histories.push(h);
    }
    Ok((x, histories))
}
