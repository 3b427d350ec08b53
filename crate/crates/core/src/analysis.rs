//! Manufactured solutions, error norms, convergence rates, the flow rate
//! through a section, the discrete energy balance and inf-sup estimates.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::constitutive::{carreau_stress, SymTensor2};
use crate::error::{Error, Result};
use crate::fespace::{DiscreteField, Family, FunctionSpace, ValueShape};
use crate::forms::{trilinear_b, BVariant, Discretization, ElementPair, SourceFn};
use crate::mesh::{markers::ALL, DiagonalPattern, Point, TriMesh};
use crate::quadrature::{gauss_legendre_unit, QuadratureRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    Steady,
    /// `u = t·u_s`, `p = t²·p_s`.
    LinearInTime,
}

/// Which terms of the momentum equation the forcing has to balance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForcingTerms {
    pub convection: bool,
    /// Penalty weight `1/l`.
    pub penalty: f64,
}

/// `u = |x|^{a-1}(x₂, -x₁)`, `p = |x|^b` with a Carreau stress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManufacturedSolution {
    pub a: f64,
    pub b: f64,
    pub r: f64,
    pub nu: f64,
    pub eps: f64,
    pub mode: TimeMode,
}

impl ManufacturedSolution {
    pub fn new(a: f64, b: f64, r: f64, nu: f64, eps: f64, mode: TimeMode) -> Result<Self> {
        if !(a > 1.0) {
            return Err(Error::invalid(format!("velocity exponent a = {a} must exceed 1")));
        }
        if !(b > 2.0 / r - 1.0) {
            return Err(Error::invalid(format!("pressure exponent b = {b} must exceed 2/r - 1")));
        }
        if !(r > 1.0 && nu > 0.0 && eps >= 0.0) {
            return Err(Error::invalid("Carreau parameters out of range"));
        }
        Ok(ManufacturedSolution { a, b, r, nu, eps, mode })
    }

    fn amplitudes(&self, t: f64) -> (f64, f64) {
        match self.mode {
            TimeMode::Steady => (1.0, 1.0),
            TimeMode::LinearInTime => (t, t * t),
        }
    }

    pub fn velocity(&self, x: Point, t: f64) -> [f64; 2] {
        let rho = x[0].hypot(x[1]);
        if rho == 0.0 {
            return [0.0, 0.0];
        }
        let c = self.amplitudes(t).0 * rho.powf(self.a - 1.0);
        [c * x[1], -c * x[0]]
    }

    /// `g[i][j] = ∂_j u_i`.
    pub fn velocity_gradient(&self, x: Point, t: f64) -> [[f64; 2]; 2] {
        let rho = x[0].hypot(x[1]);
        if rho == 0.0 {
            return [[0.0; 2]; 2];
        }
        let amp = self.amplitudes(t).0;
        let am1 = self.a - 1.0;
        let p1 = rho.powf(am1);
        let p3 = am1 * rho.powf(self.a - 3.0);
        let (x1, x2) = (x[0], x[1]);
        [
            [amp * p3 * x1 * x2, amp * (p3 * x2 * x2 + p1)],
            [-amp * (p3 * x1 * x1 + p1), -amp * p3 * x1 * x2],
        ]
    }

    pub fn strain(&self, x: Point, t: f64) -> SymTensor2 {
        SymTensor2::sym_grad(self.velocity_gradient(x, t))
    }

    pub fn stress(&self, x: Point, t: f64) -> SymTensor2 {
        carreau_stress(self.strain(x, t), self.nu, self.eps, self.r)
    }

    pub fn pressure(&self, x: Point, t: f64) -> f64 {
        let rho = x[0].hypot(x[1]);
        if rho == 0.0 {
            return 0.0;
        }
        self.amplitudes(t).1 * rho.powf(self.b)
    }

    /// Mean of the pressure over the unit square,
    /// `2∫₀^{π/4} sec^{b+2}θ dθ / (b+2)` times the time amplitude.
    pub fn pressure_mean(&self, t: f64) -> f64 {
        let (x, w) = gauss_legendre_unit(40);
        let quarter = std::f64::consts::FRAC_PI_4;
        let integral: f64 = x
            .iter()
            .zip(&w)
            .map(|(s, w)| w * quarter * (1.0 / (quarter * s).cos()).powf(self.b + 2.0))
            .sum();
        self.amplitudes(t).1 * 2.0 * integral / (self.b + 2.0)
    }

    /// `div S(D(u))` from the radial structure of the solution.
    pub fn stress_divergence(&self, x: Point, t: f64) -> [f64; 2] {
        let rho = x[0].hypot(x[1]);
        if rho == 0.0 {
            return [0.0, 0.0];
        }
        let c = self.amplitudes(t).0;
        let (a, nu, r) = (self.a, self.nu, self.r);
        let base = self.eps * self.eps + 0.5 * (a - 1.0).powi(2) * c * c * rho.powf(2.0 * a - 2.0);
        let mu = 2.0 * nu * base.powf(0.5 * (r - 2.0));
        let dmu = 2.0 * nu * 0.5 * (r - 2.0) * base.powf(0.5 * (r - 4.0))
            * (a - 1.0).powi(3)
            * c
            * c
            * rho.powf(2.0 * a - 3.0);
        let k = c * (mu * 0.5 * (a * a - 1.0) * rho.powf(a - 3.0) + dmu / rho * 0.5 * (a - 1.0) * rho.powf(a - 1.0));
        [k * x[1], -k * x[0]]
    }

    pub fn forcing(&self, x: Point, t: f64, terms: ForcingTerms) -> [f64; 2] {
        let rho = x[0].hypot(x[1]);
        if rho == 0.0 {
            return [0.0, 0.0];
        }
        let (cu, cp) = self.amplitudes(t);
        let div_s = self.stress_divergence(x, t);
        let gp = cp * self.b * rho.powf(self.b - 2.0);
        let mut f = [-div_s[0] + gp * x[0], -div_s[1] + gp * x[1]];
        if self.mode == TimeMode::LinearInTime {
            let us = rho.powf(self.a - 1.0);
            f[0] += us * x[1];
            f[1] -= us * x[0];
        }
        if terms.convection {
            let k = cu * cu * rho.powf(2.0 * self.a - 2.0);
            f[0] -= k * x[0];
            f[1] -= k * x[1];
        }
        if terms.penalty != 0.0 {
            let u = self.velocity(x, t);
            let rp = self.r / (self.r - 1.0);
            let m = (u[0] * u[0] + u[1] * u[1]).powf(rp - 1.0);
            f[0] += terms.penalty * m * u[0];
            f[1] += terms.penalty * m * u[1];
        }
        f
    }

    pub fn forcing_fn(self, t: f64, terms: ForcingTerms) -> SourceFn {
        Arc::new(move |x| self.forcing(x, t, terms))
    }
}

/// Cell-wise quadrature for error integrals, collapsed toward a singular point.
#[derive(Debug, Clone)]
pub struct ErrorQuadrature {
    regular: QuadratureRule,
    singular: Option<(Point, [QuadratureRule; 3])>,
}

impl ErrorQuadrature {
    pub fn new(degree: usize, singular: Option<(Point, usize)>) -> Result<Self> {
        let singular = match singular {
            Some((p, deg)) => Some((
                p,
                [
                    QuadratureRule::collapsed(deg, 0)?,
                    QuadratureRule::collapsed(deg, 1)?,
                    QuadratureRule::collapsed(deg, 2)?,
                ],
            )),
            None => None,
        };
        Ok(ErrorQuadrature {
            regular: QuadratureRule::new(degree)?,
            singular,
        })
    }

    /// Degree 8 away from the origin, collapsed degree 14 on cells touching it.
    pub fn origin_singular() -> Self {
        Self::new(8, Some(([0.0, 0.0], 14))).expect("supported degrees")
    }

    pub fn rule(&self, mesh: &TriMesh, c: usize) -> &QuadratureRule {
        if let Some((p, rules)) = &self.singular {
            for (v, &vid) in mesh.cells()[c].iter().enumerate() {
                let x = mesh.vertices()[vid];
                if (x[0] - p[0]).abs() < 1e-13 && (x[1] - p[1]).abs() < 1e-13 {
                    return &rules[v];
                }
            }
        }
        &self.regular
    }

    /// `∫ f(c, ξ, x)` over the mesh.
    pub fn integrate<F: FnMut(usize, Point, Point) -> f64>(&self, mesh: &TriMesh, mut f: F) -> f64 {
        let mut total = 0.0;
        for c in 0..mesh.num_cells() {
            let map = mesh.cell_map(c);
            let det = map.det.abs();
            let rule = self.rule(mesh, c);
            for (xi, w) in rule.points.iter().zip(&rule.weights) {
                total += w * det * f(c, *xi, map.apply(*xi));
            }
        }
        total
    }

    /// `(∫ |f|^s)^{1/s}` for a pointwise magnitude `f`.
    pub fn lp_norm<F: FnMut(usize, Point, Point) -> f64>(&self, mesh: &TriMesh, s: f64, mut f: F) -> f64 {
        self.integrate(mesh, |c, xi, x| f(c, xi, x).abs().powf(s)).powf(1.0 / s)
    }
}

fn eval(field: &DiscreteField, c: usize, xi: Point) -> crate::fespace::PointEvaluation {
    field.evaluate(c, xi).expect("quadrature point inside reference cell")
}

fn strain_of(ev: &crate::fespace::PointEvaluation) -> SymTensor2 {
    SymTensor2::sym_grad([ev.gradients[0], ev.gradients[1]])
}

/// `F(B) = (ε + |B|)^{(r-2)/2} B` for symmetric `B`.
pub fn natural_f(b: SymTensor2, r: f64, eps: f64) -> SymTensor2 {
    let n = b.norm();
    if n == 0.0 && eps == 0.0 {
        return SymTensor2::ZERO;
    }
    b.scale((eps + n).powf(0.5 * (r - 2.0)))
}

/// `‖F(D(u)) - F(D(u_h))‖_{L²}` against the exact strain `strain`.
pub fn natural_distance<E: Fn(Point) -> SymTensor2>(
    u_h: &DiscreteField,
    strain: E,
    r: f64,
    eps: f64,
    quad: &ErrorQuadrature,
) -> f64 {
    quad.lp_norm(u_h.space().mesh(), 2.0, |c, xi, x| {
        let dh = strain_of(&eval(u_h, c, xi));
        (natural_f(strain(x), r, eps) - natural_f(dh, r, eps)).norm()
    })
}

/// `∫_{t0}^{t1} ‖F(D(u(t))) - F(D(u_h))‖²_{L²} dt` for a velocity `u_h`
/// frozen on the interval, by 3-point Gauss in time.
pub fn natural_distance_sq_slab<E: Fn(Point, f64) -> SymTensor2>(
    u_h: &DiscreteField,
    strain: E,
    (t0, t1): (f64, f64),
    r: f64,
    eps: f64,
    quad: &ErrorQuadrature,
) -> f64 {
    let (ts, ws) = gauss_legendre_unit(3);
    quad.integrate(u_h.space().mesh(), |c, xi, x| {
        let fh = natural_f(strain_of(&eval(u_h, c, xi)), r, eps);
        ts.iter()
            .zip(&ws)
            .map(|(s, w)| w * (t1 - t0) * (natural_f(strain(x, t0 + s * (t1 - t0)), r, eps) - fh).norm_sq())
            .sum()
    })
}

/// `(‖e‖^s_{L^s} + ‖∇e‖^s_{L^s})^{1/s}` for `e = u - u_h`.
pub fn w1s_error<U, G>(u_h: &DiscreteField, u: U, grad: G, s: f64, quad: &ErrorQuadrature) -> f64
where
    U: Fn(Point) -> [f64; 2],
    G: Fn(Point) -> [[f64; 2]; 2],
{
    quad.integrate(u_h.space().mesh(), |c, xi, x| {
        let ev = eval(u_h, c, xi);
        let (ue, ge) = (u(x), grad(x));
        let e2 = (0..2).map(|i| (ue[i] - ev.values[i]).powi(2)).sum::<f64>();
        let g2 = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (ge[i][j] - ev.gradients[i][j]).powi(2))
            .sum::<f64>();
        e2.powf(0.5 * s) + g2.powf(0.5 * s)
    })
    .powf(1.0 / s)
}

/// `‖v - v_h‖_{L^s}` with the Euclidean (vectors) or Frobenius (tensors) pointwise norm.
pub fn lebesgue_error<F: Fn(Point) -> Vec<f64>>(field: &DiscreteField, exact: F, s: f64, quad: &ErrorQuadrature) -> f64 {
    let weights: &[f64] = match field.space().shape() {
        ValueShape::SymTensor => &crate::constitutive::WEIGHTS,
        _ => &[1.0, 1.0],
    };
    quad.lp_norm(field.space().mesh(), s, |c, xi, x| {
        let ev = eval(field, c, xi);
        let ex = exact(x);
        ev.values
            .iter()
            .zip(&ex)
            .zip(weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    })
}

pub fn lebesgue_norm(field: &DiscreteField, s: f64, quad: &ErrorQuadrature) -> f64 {
    let n = field.space().components();
    lebesgue_error(field, |_| vec![0.0; n], s, quad)
}

/// `‖div u_h‖_{L²}`.
pub fn divergence_norm(u_h: &DiscreteField, quad: &ErrorQuadrature) -> f64 {
    quad.lp_norm(u_h.space().mesh(), 2.0, |c, xi, _| {
        let ev = eval(u_h, c, xi);
        ev.gradients[0][0] + ev.gradients[1][1]
    })
}

/// Convergence rates `log(e_{i-1}/e_i) / log(h_{i-1}/h_i)`; `None` where an
/// error is exactly zero.
pub fn eoc(errors: &[f64], hs: &[f64]) -> Result<Vec<Option<f64>>> {
    if errors.len() != hs.len() || errors.len() < 2 {
        return Err(Error::invalid("eoc needs two or more errors with matching mesh sizes"));
    }
    if hs.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("mesh sizes must be strictly decreasing"));
    }
    Ok(errors
        .windows(2)
        .zip(hs.windows(2))
        .map(|(e, h)| {
            if e[0] == 0.0 || e[1] == 0.0 {
                None
            } else {
                Some((e[0] / e[1]).ln() / (h[0] / h[1]).ln())
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub h: f64,
    pub tau: Option<f64>,
    pub errors: Vec<f64>,
}

/// Errors per refinement level and the rates derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub norms: Vec<String>,
    pub rows: Vec<ErrorRow>,
    /// Footer values per norm; `None` prints as a dash.
    pub expected: Option<Vec<Option<f64>>>,
}

impl ErrorTable {
    pub fn new(norms: &[&str]) -> Self {
        ErrorTable {
            norms: norms.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            expected: None,
        }
    }

    pub fn push(&mut self, h: f64, tau: Option<f64>, errors: Vec<f64>) -> Result<()> {
        if errors.len() != self.norms.len() {
            return Err(Error::invalid("error row length does not match the norm list"));
        }
        self.rows.push(ErrorRow { h, tau, errors });
        Ok(())
    }

    pub fn has_time_column(&self) -> bool {
        self.rows.iter().any(|r| r.tau.is_some())
    }

    /// `rates()[row][norm]`, `None` on the first row and for exact errors.
    pub fn rates(&self) -> Vec<Vec<Option<f64>>> {
        let mut out = vec![vec![None; self.norms.len()]; self.rows.len()];
        for i in 1..self.rows.len() {
            for k in 0..self.norms.len() {
                let (e0, e1) = (self.rows[i - 1].errors[k], self.rows[i].errors[k]);
                let (h0, h1) = (self.rows[i - 1].h, self.rows[i].h);
                if e0 > 0.0 && e1 > 0.0 && h1 < h0 {
                    out[i][k] = Some((e0 / e1).ln() / (h0 / h1).ln());
                }
            }
        }
        out
    }

    pub fn column(&self, norm: &str) -> Option<usize> {
        self.norms.iter().position(|n| n == norm)
    }
}

/// `∫₀¹ u₁(x₁, y) dy`, integrated exactly between the crossings of the
/// section with mesh edges by 3-point Gauss rules (degree 5).
pub fn flow_rate(u_h: &DiscreteField, x1: f64) -> Result<f64> {
    if !(x1 > 0.0 && x1 < 1.0) {
        return Err(Error::invalid(format!("section x1 = {x1} must lie in (0, 1)")));
    }
    let mesh = u_h.space().mesh();
    let mut ys = vec![0.0, 1.0];
    for e in mesh.edges().edges {
        let (p, q) = (mesh.vertices()[e[0]], mesh.vertices()[e[1]]);
        let (dp, dq) = (p[0] - x1, q[0] - x1);
        if dp == 0.0 {
            ys.push(p[1]);
        }
        if dq == 0.0 {
            ys.push(q[1]);
        }
        if dp * dq < 0.0 {
            ys.push(p[1] + (q[1] - p[1]) * dp / (dp - dq));
        }
    }
    ys.sort_by(f64::total_cmp);
    ys.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let (gx, gw) = gauss_legendre_unit(3);
    let mut total = 0.0;
    for w in ys.windows(2) {
        let len = w[1] - w[0];
        for (s, wt) in gx.iter().zip(&gw) {
            let ev = u_h.evaluate_at([x1, w[0] + s * len])?;
            total += wt * len * ev.values[0];
        }
    }
    Ok(total)
}

/// Terms of the discrete energy balance of one implicit Euler step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyLedger {
    pub kinetic: f64,
    pub kinetic_prev: f64,
    pub increment: f64,
    pub dissipation: f64,
    pub penalty: f64,
    pub convection: f64,
    pub forcing_work: f64,
}

impl EnergyLedger {
    /// Vanishes for an exact step with homogeneous Dirichlet data.
    pub fn residual(&self) -> f64 {
        self.kinetic - self.kinetic_prev + self.increment + self.dissipation + self.penalty + self.convection
            - self.forcing_work
    }
}

/// Energy balance of a step, using the assembly quadrature so that the
/// balance is the momentum residual tested with the new velocity.
#[allow(clippy::too_many_arguments)]
pub fn energy_ledger(
    disc: &Discretization,
    x: &[f64],
    u_prev: &[f64],
    tau: f64,
    penalty: f64,
    r: f64,
    forcing: Option<&SourceFn>,
    convection: Option<BVariant>,
) -> Result<EnergyLedger> {
    let s = disc.stress_field(x);
    let u = disc.velocity_field(x);
    let up = DiscreteField::new(disc.velocity_space().clone(), u_prev.to_vec())?;
    let rp = r / (r - 1.0);
    let mut acc = [0.0; 6];
    for c in 0..disc.mesh().num_cells() {
        let (pts, wts, refs) = disc.cell_quadrature(c);
        for ((x, w), xi) in pts.iter().zip(&wts).zip(&refs) {
            let eu = u.evaluate(c, *xi)?;
            let ep = up.evaluate(c, *xi)?;
            let es = s.evaluate(c, *xi)?;
            let u2 = eu.values[0].powi(2) + eu.values[1].powi(2);
            let p2 = ep.values[0].powi(2) + ep.values[1].powi(2);
            let d2 = (eu.values[0] - ep.values[0]).powi(2) + (eu.values[1] - ep.values[1]).powi(2);
            let st = SymTensor2::from_array([es.values[0], es.values[1], es.values[2]]);
            let f = forcing.map_or([0.0, 0.0], |f| f(*x));
            acc[0] += w * 0.5 * u2;
            acc[1] += w * 0.5 * p2;
            acc[2] += w * 0.5 * d2;
            acc[3] += w * st.dot(strain_of(&eu));
            acc[4] += w * if u2 > 0.0 { u2.powf(rp) } else { 0.0 };
            acc[5] += w * (f[0] * eu.values[0] + f[1] * eu.values[1]);
        }
    }
    let conv = match convection {
        Some(v) => tau * trilinear_b(&u, &u, &u, v)?,
        None => 0.0,
    };
    Ok(EnergyLedger {
        kinetic: acc[0],
        kinetic_prev: acc[1],
        increment: acc[2],
        dissipation: tau * acc[3],
        penalty: tau * penalty * acc[4],
        convection: conv,
        forcing_work: tau * acc[5],
    })
}

pub const INFSUP_MAX_N: usize = 8;

struct ProbeSystem {
    /// Interior velocity unknowns → global velocity dof.
    free: Vec<usize>,
    /// H¹₀ Gram matrix on the free velocity unknowns.
    a: DMatrix<f64>,
    /// `-∫ q div v`, pressure × free velocity.
    b: DMatrix<f64>,
    m_p: DMatrix<f64>,
    /// `∫ σ:D(v)`, stress × free velocity, and the stress Gram matrix.
    c: DMatrix<f64>,
    m_s: DMatrix<f64>,
}

fn probe_system(n: usize, pair: ElementPair) -> Result<ProbeSystem> {
    if n == 0 || n > INFSUP_MAX_N {
        return Err(Error::invalid(format!(
            "inf-sup probe is limited to n ≤ {INFSUP_MAX_N} (dense eigen-solve), got {n}"
        )));
    }
    let base = TriMesh::unit_square(n, DiagonalPattern::Right)?;
    let mesh = Arc::new(if pair.needs_barycentric_mesh() { base.barycentric_refine() } else { base });
    let vel = FunctionSpace::new(mesh.clone(), Family::Continuous, pair.velocity_degree(), ValueShape::Vector)?;
    let pre = FunctionSpace::new(mesh.clone(), pair.pressure_family(), pair.pressure_degree(), ValueShape::Scalar)?;
    let sig = FunctionSpace::new(mesh.clone(), Family::Discontinuous, pair.stress_degree(), ValueShape::SymTensor)?;
    let mut fixed = vec![false; vel.dim()];
    for node in vel.boundary_nodes(&ALL) {
        fixed[vel.dof(node, 0)] = true;
        fixed[vel.dof(node, 1)] = true;
    }
    let free: Vec<usize> = (0..vel.dim()).filter(|&d| !fixed[d]).collect();
    let mut index = vec![usize::MAX; vel.dim()];
    for (k, &d) in free.iter().enumerate() {
        index[d] = k;
    }
    let nf = free.len();
    let rule = QuadratureRule::new(2 * pair.velocity_degree())?;
    let tv = vel.element().tabulate_rule(&rule);
    let tp = pre.element().tabulate_rule(&rule);
    let ts = sig.element().tabulate_rule(&rule);
    let mut a = DMatrix::zeros(nf, nf);
    let mut b = DMatrix::zeros(pre.dim(), nf);
    let mut m_p = DMatrix::zeros(pre.dim(), pre.dim());
    let mut c = DMatrix::zeros(sig.dim(), nf);
    let mut m_s = DMatrix::zeros(sig.dim(), sig.dim());
    let (mut vd, mut pd, mut sd) = (Vec::new(), Vec::new(), Vec::new());
    for cell in 0..mesh.num_cells() {
        let map = mesh.cell_map(cell);
        let det = map.det.abs();
        vel.cell_dofs(cell, &mut vd);
        pre.cell_dofs(cell, &mut pd);
        sig.cell_dofs(cell, &mut sd);
        for (q, wq) in rule.weights.iter().enumerate() {
            let w = wq * det;
            let g: Vec<[f64; 2]> = tv.ref_grads(q).iter().map(|g| map.push_gradient(*g)).collect();
            // velocity dof (node b, comp e): gradient row e is g[b]
            for (i, &di) in vd.iter().enumerate() {
                let (bi, ei) = (i / 2, i % 2);
                if index[di] != usize::MAX {
                    for (j, &dj) in vd.iter().enumerate() {
                        let (bj, ej) = (j / 2, j % 2);
                        if ei == ej && index[dj] != usize::MAX {
                            a[(index[di], index[dj])] += w * (g[bi][0] * g[bj][0] + g[bi][1] * g[bj][1]);
                        }
                    }
                    for (k, &pk) in pd.iter().enumerate() {
                        b[(pk, index[di])] -= w * tp.values(q)[k] * g[bi][ei];
                    }
                    let dv = if ei == 0 {
                        [g[bi][0], 0.0, 0.5 * g[bi][1]]
                    } else {
                        [0.0, g[bi][1], 0.5 * g[bi][0]]
                    };
                    for (k, &sk) in sd.iter().enumerate() {
                        let (a_node, comp) = (k / 3, k % 3);
                        c[(sk, index[di])] +=
                            w * ts.values(q)[a_node] * crate::constitutive::WEIGHTS[comp] * dv[comp];
                    }
                }
            }
            for (k, &pk) in pd.iter().enumerate() {
                for (l, &pl) in pd.iter().enumerate() {
                    m_p[(pk, pl)] += w * tp.values(q)[k] * tp.values(q)[l];
                }
            }
            for (k, &sk) in sd.iter().enumerate() {
                for (l, &sl) in sd.iter().enumerate() {
                    if k % 3 == l % 3 {
                        m_s[(sk, sl)] += w
                            * crate::constitutive::WEIGHTS[k % 3]
                            * ts.values(q)[k / 3]
                            * ts.values(q)[l / 3];
                    }
                }
            }
        }
    }
    Ok(ProbeSystem { free, a, b, m_p, c, m_s })
}

/// Smallest eigenvalue above `1e-10·max` of `K x = λ M x`, `M` SPD.
fn smallest_nonzero_generalized(k: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv_k = l
        .solve_lower_triangular(k)
        .ok_or_else(|| Error::LinearSolve("triangular solve failed".into()))?;
    let c = l
        .solve_lower_triangular(&linv_k.transpose())
        .ok_or_else(|| Error::LinearSolve("triangular solve failed".into()))?;
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    eig.iter()
        .cloned()
        .filter(|&v| v > 1e-10 * max)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::LinearSolve("operator has no nonzero spectrum".into()))
}

/// Discrete velocity–pressure inf-sup constant `β₂` on the uniform mesh
/// with `n` subdivisions: `inf_q sup_v ∫q div v / (|v|_{H¹} ‖q‖_{L²})`
/// over pressures orthogonal to the kernel of the divergence coupling.
pub fn infsup_probe(pair: ElementPair, n: usize) -> Result<f64> {
    let sys = probe_system(n, pair)?;
    let a_chol = sys
        .a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("velocity Gram matrix singular".into()))?;
    let ainv_bt = a_chol.solve(&sys.b.transpose());
    let schur = &sys.b * ainv_bt;
    Ok(smallest_nonzero_generalized(&schur, &sys.m_p)?.sqrt())
}

/// Stress–velocity constant `inf_v sup_σ ∫σ:D(v) / (‖σ‖_{L²} |v|_{H¹})` over
/// discretely divergence-free velocities.
pub fn stress_infsup_probe(pair: ElementPair, n: usize) -> Result<f64> {
    let sys = probe_system(n, pair)?;
    let svd = sys.b.clone().svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::LinearSolve("SVD failed".into()))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let nf = sys.free.len();
    // right singular vectors beyond the numerical rank span ker B
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let range: Vec<usize> = order[..rank].to_vec();
    // complete to an orthonormal basis of the kernel by projecting unit vectors
    let mut basis: Vec<nalgebra::DVector<f64>> = range.iter().map(|&i| vt.row(i).transpose()).collect();
    let mut kernel = Vec::new();
    for e in 0..nf {
        let mut v = nalgebra::DVector::zeros(nf);
        v[e] = 1.0;
        for _ in 0..2 {
            for bv in &basis {
                let d = bv.dot(&v);
                v -= d * bv;
            }
        }
        let nv = v.norm();
        if nv > 1e-8 {
            v /= nv;
            basis.push(v.clone());
            kernel.push(v);
        }
        if kernel.len() == nf - rank {
            break;
        }
    }
    if kernel.is_empty() {
        return Err(Error::LinearSolve("no discretely divergence-free velocities".into()));
    }
    let z = DMatrix::from_columns(&kernel);
    let ms_chol = sys
        .m_s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("stress Gram matrix singular".into()))?;
    let cz = &sys.c * &z;
    let k = cz.transpose() * ms_chol.solve(&cz);
    let az = z.transpose() * &sys.a * &z;
    Ok(smallest_nonzero_generalized(&k, &az)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn field_on(n: usize, shape: ValueShape, degree: usize) -> Arc<FunctionSpace> {
        let mesh = Arc::new(TriMesh::unit_square(n, DiagonalPattern::Right).unwrap());
        Arc::new(FunctionSpace::new(mesh, Family::Continuous, degree, shape).unwrap())
    }

    #[test]
    fn eoc_examples() {
        assert_relative_eq!(eoc(&[0.1, 0.05], &[0.5, 0.25]).unwrap()[0].unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(eoc(&[0.1, 0.025], &[0.5, 0.25]).unwrap()[0].unwrap(), 2.0, epsilon = 1e-14);
        assert_eq!(eoc(&[0.1, 0.0], &[0.5, 0.25]).unwrap()[0], None);
        assert!(eoc(&[0.1], &[0.5]).is_err());
        assert!(eoc(&[0.1, 0.2], &[0.25, 0.5]).is_err());
    }

    #[test]
    fn lebesgue_examples() {
        let q = ErrorQuadrature::new(6, None).unwrap();
        let v = field_on(2, ValueShape::Vector, 1).interpolate(|_| [3.0, 4.0]).unwrap();
        assert_relative_eq!(lebesgue_norm(&v, 2.0, &q), 5.0, max_relative = 1e-14);
        let s = field_on(3, ValueShape::Scalar, 1).interpolate(|x| [x[0]]).unwrap();
        assert_relative_eq!(lebesgue_norm(&s, 2.0, &q), 1.0 / 3f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn flow_rate_examples() {
        let space = field_on(4, ValueShape::Vector, 2);
        let u = space.interpolate(|x| [1.0 - x[1], 0.0]).unwrap();
        for x1 in [0.1, 0.25, 0.5, 0.77] {
            assert_relative_eq!(flow_rate(&u, x1).unwrap(), 0.5, max_relative = 1e-14);
        }
        assert_eq!(flow_rate(&space.zero_field(), 0.5).unwrap(), 0.0);
        assert!(flow_rate(&u, 1.0).is_err());
    }

    #[test]
    fn manufactured_constraints() {
        assert!(ManufacturedSolution::new(1.0, 0.5, 1.5, 0.5, 1e-5, TimeMode::Steady).is_err());
        assert!(ManufacturedSolution::new(1.01, 0.3, 1.5, 0.5, 1e-5, TimeMode::Steady).is_err());
        let m = ManufacturedSolution::new(1.01, 2.0 / 1.5 - 0.99, 1.5, 0.5, 1e-5, TimeMode::Steady).unwrap();
        let x = [0.3, 0.7];
        let g = m.velocity_gradient(x, 0.0);
        assert!((g[0][0] + g[1][1]).abs() < 1e-15);
        let rho = 0.58f64.sqrt();
        assert_relative_eq!(m.strain(x, 0.0).norm(), 0.01 * rho.powf(0.01) / 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn pressure_mean_matches_quadrature() {
        let m = ManufacturedSolution::new(1.01, 0.3433, 1.5, 0.5, 1e-5, TimeMode::Steady).unwrap();
        let q = ErrorQuadrature::new(10, Some(([0.0, 0.0], 20))).unwrap();
        let mesh = TriMesh::unit_square(16, DiagonalPattern::Right).unwrap();
        let num = q.integrate(&mesh, |_, _, x| m.pressure(x, 0.0));
        assert_relative_eq!(m.pressure_mean(0.0), num, max_relative = 1e-7);
    }

    #[test]
    fn natural_distance_reductions() {
        let space = field_on(3, ValueShape::Vector, 2);
        let q = ErrorQuadrature::new(6, None).unwrap();
        let u = space.interpolate(|x| [x[1] * x[1], x[0] * x[0]]).unwrap();
        let exact = |x: Point| SymTensor2::new(0.0, 0.0, x[0] + x[1]);
        assert!(natural_distance(&u, exact, 1.5, 1e-5, &q) < 1e-12);
        // r = 2 reduces to the L² strain error
        let v = space.interpolate(|x| [x[1], 0.0]).unwrap();
        let d2 = natural_distance(&v, exact, 2.0, 1e-5, &q);
        let direct = q.lp_norm(space.mesh(), 2.0, |_, _, x| (SymTensor2::new(0.0, 0.0, 0.5) - exact(x)).norm());
        assert_relative_eq!(d2, direct, max_relative = 1e-12);
    }

    #[test]
    fn infsup_refuses_large_meshes() {
        assert!(infsup_probe(ElementPair::TaylorHood, 9).is_err());
    }

    #[test]
    fn stress_probe_is_korn_constant_on_scott_vogelius() {
        let g = stress_infsup_probe(ElementPair::ScottVogelius { k: 1 }, 2).unwrap();
        assert_relative_eq!(g, 0.5f64.sqrt(), max_relative = 1e-8);
    }
}
