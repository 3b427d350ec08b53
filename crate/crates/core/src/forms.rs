//! Residual and Jacobian of the discrete three-field system.
//!
//! Unknowns are stacked as `[S | u | p | λ]`, where `λ` is present only when
//! the pressure is determined up to a constant. Its row enforces `∫ p_h = 0`
//! and its column adds `λ ∫ q` to the continuity rows.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::constitutive::{ConstitutiveLaw, SymTensor2, WEIGHTS};
use crate::error::{Error, Result};
use crate::fespace::{DiscreteField, Family, FunctionSpace, Tabulation, ValueShape};
use crate::mesh::{Point, TriMesh};
use crate::par::{map_indexed, Execution};
use crate::quadrature::QuadratureRule;
use crate::solver::{Border, LuCache};
use crate::sparse::{CsrMatrix, SparsityPattern};

/// Velocity/pressure pairing; the stress is discontinuous of the pressure degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementPair {
    /// Continuous `P_{k+1}` velocity, discontinuous `P_k` pressure on the
    /// barycentric refinement of the given mesh.
    ScottVogelius { k: usize },
    /// Continuous P2 velocity, continuous P1 pressure.
    TaylorHood,
    /// Continuous P1/P1; not inf-sup stable.
    EqualOrderP1,
}

impl ElementPair {
    pub fn velocity_degree(self) -> usize {
        match self {
            ElementPair::ScottVogelius { k } => k + 1,
            ElementPair::TaylorHood => 2,
            ElementPair::EqualOrderP1 => 1,
        }
    }

    pub fn pressure_degree(self) -> usize {
        match self {
            ElementPair::ScottVogelius { k } => k,
            _ => 1,
        }
    }

    pub fn pressure_family(self) -> Family {
        match self {
            ElementPair::ScottVogelius { .. } => Family::Discontinuous,
            _ => Family::Continuous,
        }
    }

    pub fn stress_degree(self) -> usize {
        self.pressure_degree()
    }

    pub fn needs_barycentric_mesh(self) -> bool {
        matches!(self, ElementPair::ScottVogelius { .. })
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementPair::ScottVogelius { .. } => "scott-vogelius",
            ElementPair::TaylorHood => "taylor-hood",
            ElementPair::EqualOrderP1 => "p1-p1",
        }
    }
}

/// Weak form of the convective term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BVariant {
    /// `-∫ ((u·∇)w)·v`, consistent when div u = 0 pointwise.
    DivFree,
    /// `½∫ ((u·∇)v)·w - ((u·∇)w)·v`, vanishing for v = w.
    Skew,
}

pub fn select_b_variant(pair: ElementPair, force_skew: bool) -> BVariant {
    match pair {
        ElementPair::ScottVogelius { .. } if !force_skew => BVariant::DivFree,
        _ => BVariant::Skew,
    }
}

pub type VectorFn = Arc<dyn Fn(Point, f64) -> [f64; 2] + Send + Sync>;
pub type SourceFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;

/// Strong velocity data `u_c = g_c(x, t)` on facets carrying one of `markers`.
#[derive(Clone)]
pub struct DirichletCondition {
    pub markers: Vec<u32>,
    pub components: Vec<usize>,
    pub value: VectorFn,
}

impl DirichletCondition {
    pub fn new(markers: &[u32], components: &[usize], value: VectorFn) -> Self {
        DirichletCondition {
            markers: markers.to_vec(),
            components: components.to_vec(),
            value,
        }
    }

    pub fn homogeneous(markers: &[u32]) -> Self {
        Self::new(markers, &[0, 1], Arc::new(|_, _| [0.0, 0.0]))
    }
}

impl std::fmt::Debug for DirichletCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DirichletCondition")
            .field("markers", &self.markers)
            .field("components", &self.components)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConstrainedDof {
    dof: usize,
    point: Point,
    comp: usize,
    condition: usize,
}

#[derive(Debug, Clone)]
pub struct DiscretizationOptions {
    pub dirichlet: Vec<DirichletCondition>,
    pub pressure_nullspace: bool,
    /// Defaults to `2·deg(u) + 3`.
    pub quadrature_degree: Option<usize>,
    /// Cells with a vertex here use a collapsed rule of `singular_degree`.
    pub singular_point: Option<Point>,
    pub singular_degree: usize,
    pub execution: Execution,
}

impl Default for DiscretizationOptions {
    fn default() -> Self {
        DiscretizationOptions {
            dirichlet: Vec::new(),
            pressure_nullspace: true,
            quadrature_degree: None,
            singular_point: None,
            singular_degree: 12,
            execution: Execution::Parallel,
        }
    }
}

struct RuleTabs {
    rule: QuadratureRule,
    stress: Tabulation,
    velocity: Tabulation,
    pressure: Tabulation,
}

impl RuleTabs {
    fn new(rule: QuadratureRule, s: &FunctionSpace, u: &FunctionSpace, p: &FunctionSpace) -> Self {
        RuleTabs {
            stress: s.element().tabulate_rule(&rule),
            velocity: u.element().tabulate_rule(&rule),
            pressure: p.element().tabulate_rule(&rule),
            rule,
        }
    }
}

/// Global CSR pattern plus, per cell, the value position of every local
/// coupling (`usize::MAX` where the block is structurally zero).
struct AssemblyMap {
    pattern: Arc<SparsityPattern>,
    positions: Vec<usize>,
    /// `(q, λ)` and `(λ, q)` positions per pressure dof.
    lambda: Vec<(usize, usize)>,
}

/// Pressure dof whose diagonal is kept in the reduced pattern.
const PRESSURE_PIN: usize = 0;

/// Function spaces, boundary data and assembly maps of one mesh level.
pub struct Discretization {
    mesh: Arc<TriMesh>,
    pair: ElementPair,
    stress: Arc<FunctionSpace>,
    velocity: Arc<FunctionSpace>,
    pressure: Arc<FunctionSpace>,
    dirichlet: Vec<DirichletCondition>,
    constrained: Vec<ConstrainedDof>,
    is_constrained: Vec<bool>,
    nullspace: bool,
    regular: RuleTabs,
    singular: Option<(Point, [RuleTabs; 3])>,
    pressure_weights: Vec<f64>,
    cell_dofs: Vec<usize>,
    execution: Execution,
    full_map: OnceLock<AssemblyMap>,
    reduced_map: OnceLock<AssemblyMap>,
    lu: LuCache,
}

impl std::fmt::Debug for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discretization")
            .field("pair", &self.pair)
            .field("cells", &self.mesh.num_cells())
            .field("unknowns", &self.num_unknowns())
            .finish_non_exhaustive()
    }
}

impl Discretization {
    /// For Scott–Vogelius the mesh is refined barycentrically here.
    pub fn new(base: &TriMesh, pair: ElementPair, options: DiscretizationOptions) -> Result<Self> {
        let mesh = Arc::new(if pair.needs_barycentric_mesh() {
            base.barycentric_refine()
        } else {
            base.clone()
        });
        let stress = Arc::new(FunctionSpace::new(
            mesh.clone(),
            Family::Discontinuous,
            pair.stress_degree(),
            ValueShape::SymTensor,
        )?);
        let velocity = Arc::new(FunctionSpace::new(
            mesh.clone(),
            Family::Continuous,
            pair.velocity_degree(),
            ValueShape::Vector,
        )?);
        let pressure = Arc::new(FunctionSpace::new(
            mesh.clone(),
            pair.pressure_family(),
            pair.pressure_degree(),
            ValueShape::Scalar,
        )?);
        let degree = options
            .quadrature_degree
            .unwrap_or(2 * pair.velocity_degree() + 3);
        let regular = RuleTabs::new(QuadratureRule::new(degree)?, &stress, &velocity, &pressure);
        let singular = match options.singular_point {
            Some(point) => {
                let deg = options.singular_degree.max(degree);
                let mk = |v| -> Result<RuleTabs> {
                    Ok(RuleTabs::new(QuadratureRule::collapsed(deg, v)?, &stress, &velocity, &pressure))
                };
                Some((point, [mk(0)?, mk(1)?, mk(2)?]))
            }
            None => None,
        };

        let u_off = stress.dim();
        let mut slot: Vec<Option<ConstrainedDof>> = vec![None; velocity.dim()];
        for (ci, cond) in options.dirichlet.iter().enumerate() {
            if let Some(&c) = cond.components.iter().find(|&&c| c > 1) {
                return Err(Error::invalid(format!("velocity component {c} out of range")));
            }
            for node in velocity.boundary_nodes(&cond.markers) {
                for &comp in &cond.components {
                    let d = velocity.dof(node, comp);
                    slot[d] = Some(ConstrainedDof {
                        dof: u_off + d,
                        point: velocity.node_points()[node],
                        comp,
                        condition: ci,
                    });
                }
            }
        }
        let constrained: Vec<_> = slot.into_iter().flatten().collect();
        let mut is_constrained = vec![false; u_off + velocity.dim() + pressure.dim() + 1];
        for c in &constrained {
            is_constrained[c.dof] = true;
        }

        let mut pressure_weights = vec![0.0; pressure.dim()];
        let ptab = &regular.pressure;
        for c in 0..mesh.num_cells() {
            let det = mesh.cell_map(c).det.abs();
            for (q, w) in regular.rule.weights.iter().enumerate() {
                for (a, &node) in pressure.cell_nodes(c).iter().enumerate() {
                    pressure_weights[node] += w * det * ptab.values(q)[a];
                }
            }
        }

        let p_off = u_off + velocity.dim();
        let nloc = stress.dofs_per_cell() + velocity.dofs_per_cell() + pressure.dofs_per_cell();
        let mut cell_dofs = Vec::with_capacity(nloc * mesh.num_cells());
        let mut buf = Vec::new();
        for c in 0..mesh.num_cells() {
            stress.cell_dofs(c, &mut buf);
            cell_dofs.extend(buf.iter().copied());
            velocity.cell_dofs(c, &mut buf);
            cell_dofs.extend(buf.iter().map(|d| d + u_off));
            pressure.cell_dofs(c, &mut buf);
            cell_dofs.extend(buf.iter().map(|d| d + p_off));
        }

        Ok(Discretization {
            mesh,
            pair,
            stress,
            velocity,
            pressure,
            dirichlet: options.dirichlet,
            constrained,
            is_constrained,
            nullspace: options.pressure_nullspace,
            regular,
            singular,
            pressure_weights,
            cell_dofs,
            execution: options.execution,
            full_map: OnceLock::new(),
            reduced_map: OnceLock::new(),
            lu: LuCache::default(),
        })
    }

    pub fn mesh(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn pair(&self) -> ElementPair {
        self.pair
    }

    pub fn stress_space(&self) -> &Arc<FunctionSpace> {
        &self.stress
    }

    pub fn velocity_space(&self) -> &Arc<FunctionSpace> {
        &self.velocity
    }

    pub fn pressure_space(&self) -> &Arc<FunctionSpace> {
        &self.pressure
    }

    pub fn execution(&self) -> Execution {
        self.execution
    }

    pub fn has_pressure_nullspace(&self) -> bool {
        self.nullspace
    }

    pub fn velocity_offset(&self) -> usize {
        self.stress.dim()
    }

    pub fn pressure_offset(&self) -> usize {
        self.stress.dim() + self.velocity.dim()
    }

    /// Index of the mean-pressure multiplier, if present.
    pub fn lambda_index(&self) -> Option<usize> {
        self.nullspace.then(|| self.pressure_offset() + self.pressure.dim())
    }

    pub fn num_unknowns(&self) -> usize {
        self.pressure_offset() + self.pressure.dim() + usize::from(self.nullspace)
    }

    /// `∫ χ_q` for every pressure basis function.
    pub fn pressure_weights(&self) -> &[f64] {
        &self.pressure_weights
    }

    /// Global indices of strongly constrained velocity unknowns.
    pub fn constrained_dofs(&self) -> Vec<usize> {
        self.constrained.iter().map(|c| c.dof).collect()
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.is_constrained.get(dof).copied().unwrap_or(false)
    }

    fn local_sizes(&self) -> (usize, usize, usize) {
        (
            self.stress.dofs_per_cell(),
            self.velocity.dofs_per_cell(),
            self.pressure.dofs_per_cell(),
        )
    }

    fn local_dofs(&self, c: usize) -> &[usize] {
        let (ns, nu, np) = self.local_sizes();
        let n = ns + nu + np;
        &self.cell_dofs[c * n..(c + 1) * n]
    }

    /// Quadrature for cell `c`: collapsed toward the singular point when the cell touches it.
    fn rule_for_cell(&self, c: usize) -> &RuleTabs {
        if let Some((point, rules)) = &self.singular {
            let cell = self.mesh.cells()[c];
            for (v, &vid) in cell.iter().enumerate() {
                let x = self.mesh.vertices()[vid];
                if (x[0] - point[0]).abs() < 1e-13 && (x[1] - point[1]).abs() < 1e-13 {
                    return &rules[v];
                }
            }
        }
        &self.regular
    }

    /// Quadrature points (physical) and weights of cell `c`, as used in assembly.
    pub fn cell_quadrature(&self, c: usize) -> (Vec<Point>, Vec<f64>, Vec<Point>) {
        let tabs = self.rule_for_cell(c);
        let map = self.mesh.cell_map(c);
        let det = map.det.abs();
        (
            tabs.rule.points.iter().map(|&p| map.apply(p)).collect(),
            tabs.rule.weights.iter().map(|w| w * det).collect(),
            tabs.rule.points.clone(),
        )
    }

    /// A state with Dirichlet values at time `t` and zeros elsewhere.
    pub fn initial_state(&self, t: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.num_unknowns()];
        self.apply_dirichlet_values(&mut x, t);
        x
    }

    pub fn apply_dirichlet_values(&self, x: &mut [f64], t: f64) {
        for c in &self.constrained {
            x[c.dof] = (self.dirichlet[c.condition].value)(c.point, t)[c.comp];
        }
    }

    pub fn stress_field(&self, x: &[f64]) -> DiscreteField {
        DiscreteField::new(self.stress.clone(), x[..self.velocity_offset()].to_vec())
            .expect("layout matches space")
    }

    pub fn velocity_field(&self, x: &[f64]) -> DiscreteField {
        DiscreteField::new(self.velocity.clone(), self.velocity_coeffs(x).to_vec())
            .expect("layout matches space")
    }

    pub fn pressure_field(&self, x: &[f64]) -> DiscreteField {
        let o = self.pressure_offset();
        DiscreteField::new(self.pressure.clone(), x[o..o + self.pressure.dim()].to_vec())
            .expect("layout matches space")
    }

    pub fn velocity_coeffs<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.velocity_offset()..self.pressure_offset()]
    }

    /// Stacks field coefficients into a state vector (multiplier zero).
    pub fn pack(&self, s: &DiscreteField, u: &DiscreteField, p: &DiscreteField) -> Result<Vec<f64>> {
        if !Arc::ptr_eq(s.space(), &self.stress)
            || !Arc::ptr_eq(u.space(), &self.velocity)
            || !Arc::ptr_eq(p.space(), &self.pressure)
        {
            return Err(Error::invalid("fields do not belong to this discretization"));
        }
        let mut x = Vec::with_capacity(self.num_unknowns());
        x.extend_from_slice(s.coeffs());
        x.extend_from_slice(u.coeffs());
        x.extend_from_slice(p.coeffs());
        if self.nullspace {
            x.push(0.0);
        }
        Ok(x)
    }


    /// Constrained L² projection onto discretely divergence-free velocities:
    /// `∫u·w - ∫p div w = ∫u₀·w`, `-∫q div u = 0`, Dirichlet values at `t`.
    /// Returns a state with zero stress; the pressure is the multiplier.
    pub fn l2_div_project<F>(&self, u0: F, t: f64) -> Result<Vec<f64>>
    where
        F: Fn(Point) -> [f64; 2],
    {
        let (ns, nu, np) = self.local_sizes();
        let shift = self.velocity_offset();
        let n = self.velocity.dim() + self.pressure.dim();
        let mut trip = Vec::new();
        let mut rhs = vec![0.0; n];
        for c in 0..self.mesh.num_cells() {
            let tabs = self.rule_for_cell(c);
            let map = self.mesh.cell_map(c);
            let det = map.det.abs();
            let dofs = self.local_dofs(c);
            let (ud, pd) = (&dofs[ns..ns + nu], &dofs[ns + nu..ns + nu + np]);
            let mut m = vec![0.0; nu * nu];
            let mut b = vec![0.0; np * nu];
            let mut f = vec![0.0; nu];
            for (q, (&xi, &wq)) in tabs.rule.points.iter().zip(&tabs.rule.weights).enumerate() {
                let w = wq * det;
                let g = u0(map.apply(xi));
                if !(g[0].is_finite() && g[1].is_finite()) {
                    return Err(Error::NonFinite {
                        location: map.apply(xi),
                        value: if g[0].is_finite() { g[1] } else { g[0] },
                    });
                }
                let psi = tabs.velocity.values(q);
                let chi = tabs.pressure.values(q);
                let grads: Vec<[f64; 2]> = tabs.velocity.ref_grads(q).iter().map(|&r| map.push_gradient(r)).collect();
                for i in 0..nu {
                    let (bi, ci) = (i / 2, i % 2);
                    f[i] += w * g[ci] * psi[bi];
                    for j in 0..nu {
                        if j % 2 == ci {
                            m[i * nu + j] += w * psi[bi] * psi[j / 2];
                        }
                    }
                    for k in 0..np {
                        b[k * nu + i] -= w * chi[k] * grads[bi][ci];
                    }
                }
            }
            for i in 0..nu {
                rhs[ud[i] - shift] += f[i];
                for j in 0..nu {
                    trip.push((ud[i] - shift, ud[j] - shift, m[i * nu + j]));
                }
                for k in 0..np {
                    trip.push((pd[k] - shift, ud[i] - shift, b[k * nu + i]));
                    trip.push((ud[i] - shift, pd[k] - shift, b[k * nu + i]));
                }
            }
        }
        let p_off = self.pressure_offset() - shift;
        if self.nullspace {
            trip.push((p_off + PRESSURE_PIN, p_off + PRESSURE_PIN, 0.0));
        }
        let mut a = CsrMatrix::from_triplets(n, n, &trip)?;
        for c in &self.constrained {
            a.set_identity_row(c.dof - shift);
            rhs[c.dof - shift] = (self.dirichlet[c.condition].value)(c.point, t)[c.comp];
        }
        let lu = LuCache::default();
        let mut x = vec![0.0; self.num_unknowns()];
        if self.nullspace {
            let border = Border {
                offset: p_off,
                weights: &self.pressure_weights,
                pin: p_off + PRESSURE_PIN,
            };
            let (y, lambda) = lu.solve_bordered(&a, border, &rhs, 0.0)?;
            x[shift..shift + n].copy_from_slice(&y);
            x[shift + n] = lambda;
        } else {
            x[shift..shift + n].copy_from_slice(&lu.solve(&a, &rhs)?);
        }
        Ok(x)
    }

    fn full_map(&self) -> &AssemblyMap {
        self.full_map.get_or_init(|| self.build_map(false))
    }

    fn reduced_map(&self) -> &AssemblyMap {
        self.reduced_map.get_or_init(|| self.build_map(true))
    }

    /// Couples every pair of local unknowns except p–p and S–p. The reduced
    /// map drops the stress unknowns and the multiplier, shifts indices by
    /// the stress dimension and keeps one pressure diagonal for pinning.
    fn build_map(&self, reduced: bool) -> AssemblyMap {
        let (ns, nu, np) = self.local_sizes();
        let nloc = ns + nu + np;
        let shift = if reduced { self.velocity_offset() } else { 0 };
        let border = reduced && self.lambda_index().is_some();
        let n = self.num_unknowns() - shift - usize::from(border);
        let first = if reduced { ns } else { 0 };
        let couples = |i: usize, j: usize| {
            let pi = i >= ns + nu;
            let pj = j >= ns + nu;
            let si = i < ns;
            let sj = j < ns;
            !(pi && pj) && !(si && pj) && !(pi && sj)
        };
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for c in 0..self.mesh.num_cells() {
            let dofs = self.local_dofs(c);
            for i in first..nloc {
                for j in first..nloc {
                    if couples(i, j) {
                        rows[dofs[i] - shift].push(dofs[j] - shift);
                    }
                }
            }
        }
        if border {
            let pin = self.pressure_offset() + PRESSURE_PIN - shift;
            rows[pin].push(pin);
        } else if let Some(l) = self.lambda_index() {
            let p_off = self.pressure_offset();
            for q in 0..self.pressure.dim() {
                rows[p_off + q - shift].push(l - shift);
                rows[l - shift].push(p_off + q - shift);
            }
        }
        let pattern = Arc::new(SparsityPattern::from_rows(n, rows).expect("valid pattern"));
        let mut positions = vec![usize::MAX; nloc * nloc * self.mesh.num_cells()];
        for c in 0..self.mesh.num_cells() {
            let dofs = self.local_dofs(c);
            let base = c * nloc * nloc;
            for i in first..nloc {
                for j in first..nloc {
                    if couples(i, j) {
                        positions[base + i * nloc + j] =
                            pattern.position(dofs[i] - shift, dofs[j] - shift).expect("in pattern");
                    }
                }
            }
        }
        let lambda = match self.lambda_index() {
            Some(l) if !border => {
                let p_off = self.pressure_offset();
                (0..self.pressure.dim())
                    .map(|q| {
                        let row = p_off + q - shift;
                        (
                            pattern.position(row, l - shift).expect("in pattern"),
                            pattern.position(l - shift, row).expect("in pattern"),
                        )
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        AssemblyMap {
            pattern,
            positions,
            lambda,
        }
    }
}

/// Data of one nonlinear solve at a fixed time level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    /// `None` for a steady problem.
    pub timestep: Option<f64>,
    /// Penalty weight `1/l`.
    pub penalty: f64,
    pub convection: bool,
    pub b_variant: BVariant,
    /// Time at which Dirichlet data is evaluated.
    pub time: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            timestep: None,
            penalty: 0.0,
            convection: false,
            b_variant: BVariant::Skew,
            time: 0.0,
        }
    }
}

/// Residual and Jacobian oracle for one time level.
#[derive(Clone)]
pub struct FlowProblem {
    pub disc: Arc<Discretization>,
    pub law: Arc<dyn ConstitutiveLaw>,
    pub params: FlowParams,
    pub forcing: Option<SourceFn>,
    /// Velocity coefficients at the previous time level.
    pub previous_velocity: Option<Vec<f64>>,
}

impl std::fmt::Debug for FlowProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowProblem")
            .field("disc", &self.disc)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

struct CellLocal {
    res: Vec<f64>,
    jac: Vec<f64>,
}

/// Per-cell static condensation data: `SS⁻¹ SU` and `SS⁻¹ r_S`.
struct Condensed {
    k_red: Vec<f64>,
    rhs_u: Vec<f64>,
    ss_inv_su: DMatrix<f64>,
    ss_inv_rs: DVector<f64>,
}

impl FlowProblem {
    pub fn new(disc: Arc<Discretization>, law: Arc<dyn ConstitutiveLaw>, params: FlowParams) -> Self {
        FlowProblem {
            disc,
            law,
            params,
            forcing: None,
            previous_velocity: None,
        }
    }

    pub fn with_forcing(mut self, f: SourceFn) -> Self {
        self.forcing = Some(f);
        self
    }

    pub fn with_previous(mut self, u_prev: Vec<f64>) -> Self {
        self.previous_velocity = Some(u_prev);
        self
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.disc.num_unknowns() {
            return Err(Error::invalid(format!(
                "state has {} entries, discretization expects {}",
                x.len(),
                self.disc.num_unknowns()
            )));
        }
        if let Some(t) = self.params.timestep {
            if !(t > 0.0) {
                return Err(Error::invalid("timestep must be positive"));
            }
            match &self.previous_velocity {
                Some(u) if u.len() == self.disc.velocity.dim() => {}
                _ => return Err(Error::invalid("unsteady problem needs the previous velocity")),
            }
        }
        Ok(())
    }

    fn penalty_exponent(&self) -> f64 {
        let r = self.law.growth_exponent();
        2.0 * r / (r - 1.0) - 2.0
    }

    fn cell_local(&self, c: usize, x: &[f64], want_jac: bool) -> CellLocal {
        let d = &*self.disc;
        let (ns, nu, np) = d.local_sizes();
        let nloc = ns + nu + np;
        let nsn = ns / 3;
        let nun = nu / 2;
        let dofs = d.local_dofs(c);
        let tabs = d.rule_for_cell(c);
        let map = d.mesh.cell_map(c);
        let det = map.det.abs();
        let u_off = d.velocity_offset();
        let mut res = vec![0.0; nloc];
        let mut jac = if want_jac { vec![0.0; nloc * nloc] } else { Vec::new() };

        let loc: Vec<f64> = dofs.iter().map(|&g| x[g]).collect();
        let prev: Option<Vec<f64>> = self
            .previous_velocity
            .as_ref()
            .map(|up| dofs[ns..ns + nu].iter().map(|&g| up[g - u_off]).collect());
        let inv_dt = self.params.timestep.map(|t| 1.0 / t);
        let pen = self.params.penalty;
        let pexp = self.penalty_exponent();
        let conv = self.params.convection;
        let skew = self.params.b_variant == BVariant::Skew;

        let mut gpsi = vec![[0.0; 2]; nun];
        let mut dv = vec![[SymTensor2::ZERO; 2]; nun];
        let mut gd = vec![[[0.0; 3]; 2]; nun];

        for (q, (&xi, &wq)) in tabs.rule.points.iter().zip(&tabs.rule.weights).enumerate() {
            let w = wq * det;
            let xq = map.apply(xi);
            let phi = tabs.stress.values(q);
            let psi = tabs.velocity.values(q);
            let chi = tabs.pressure.values(q);
            for (b, g) in tabs.velocity.ref_grads(q).iter().enumerate() {
                gpsi[b] = map.push_gradient(*g);
                dv[b] = [
                    SymTensor2::new(gpsi[b][0], 0.0, 0.5 * gpsi[b][1]),
                    SymTensor2::new(0.0, gpsi[b][1], 0.5 * gpsi[b][0]),
                ];
            }
            let mut s = [0.0; 3];
            for a in 0..nsn {
                for k in 0..3 {
                    s[k] += phi[a] * loc[a * 3 + k];
                }
            }
            let s = SymTensor2::from_array(s);
            let mut u = [0.0; 2];
            let mut gu = [[0.0; 2]; 2];
            let mut up = [0.0; 2];
            for b in 0..nun {
                for i in 0..2 {
                    let coef = loc[ns + b * 2 + i];
                    u[i] += psi[b] * coef;
                    gu[i][0] += coef * gpsi[b][0];
                    gu[i][1] += coef * gpsi[b][1];
                    if let Some(pv) = &prev {
                        up[i] += psi[b] * pv[b * 2 + i];
                    }
                }
            }
            let dmat = SymTensor2::sym_grad(gu);
            let divu = gu[0][0] + gu[1][1];
            let p: f64 = (0..np).map(|k| chi[k] * loc[ns + nu + k]).sum();
            let f = self.forcing.as_ref().map_or([0.0, 0.0], |f| f(xq));
            let g = self.law.residual(s, dmat, xq).to_array();
            let u2 = u[0] * u[0] + u[1] * u[1];
            let upow = if pen != 0.0 && u2 > 0.0 { u2.powf(0.5 * pexp) } else { 0.0 };

            for a in 0..nsn {
                for k in 0..3 {
                    res[a * 3 + k] += w * WEIGHTS[k] * g[k] * phi[a];
                }
            }
            for b in 0..nun {
                let ug = u[0] * gpsi[b][0] + u[1] * gpsi[b][1];
                for dd in 0..2 {
                    let sd = if dd == 0 { [s.xx, s.xy] } else { [s.xy, s.yy] };
                    let mut val = sd[0] * gpsi[b][0] + sd[1] * gpsi[b][1] - p * gpsi[b][dd] - f[dd] * psi[b];
                    if let Some(idt) = inv_dt {
                        val += idt * (u[dd] - up[dd]) * psi[b];
                    }
                    if pen != 0.0 {
                        val += pen * upow * u[dd] * psi[b];
                    }
                    if conv {
                        let uud = u[0] * gu[dd][0] + u[1] * gu[dd][1];
                        val += if skew { 0.5 * (uud * psi[b] - ug * u[dd]) } else { -ug * u[dd] };
                    }
                    res[ns + b * 2 + dd] += w * val;
                }
            }
            for k in 0..np {
                res[ns + nu + k] -= w * chi[k] * divu;
            }

            if !want_jac {
                continue;
            }
            let (dgds, dgdd) = self.law.tangents(s, dmat, xq);
            for b in 0..nun {
                for e in 0..2 {
                    gd[b][e] = dgdd.apply(dv[b][e]).to_array();
                }
            }
            // τ rows
            for a in 0..nsn {
                for k in 0..3 {
                    let row = a * 3 + k;
                    let wr = w * WEIGHTS[k] * phi[a];
                    let jr = &mut jac[row * nloc..(row + 1) * nloc];
                    for a2 in 0..nsn {
                        for k2 in 0..3 {
                            jr[a2 * 3 + k2] += wr * dgds.0[k][k2] * phi[a2];
                        }
                    }
                    for b in 0..nun {
                        for e in 0..2 {
                            jr[ns + b * 2 + e] += wr * gd[b][e][k];
                        }
                    }
                }
            }
            // v rows
            let pen_outer = if pen != 0.0 && u2 > 0.0 {
                pen * pexp * u2.powf(0.5 * pexp - 1.0)
            } else {
                0.0
            };
            for b in 0..nun {
                let ug = u[0] * gpsi[b][0] + u[1] * gpsi[b][1];
                for dd in 0..2 {
                    let row = ns + b * 2 + dd;
                    let jr = &mut jac[row * nloc..(row + 1) * nloc];
                    let dvt = dv[b][dd].to_array();
                    for a in 0..nsn {
                        for k in 0..3 {
                            jr[a * 3 + k] += w * phi[a] * WEIGHTS[k] * dvt[k];
                        }
                    }
                    for b2 in 0..nun {
                        let mass = psi[b2] * psi[b];
                        let ug2 = u[0] * gpsi[b2][0] + u[1] * gpsi[b2][1];
                        for e in 0..2 {
                            let de = if dd == e { 1.0 } else { 0.0 };
                            let mut val = 0.0;
                            if let Some(idt) = inv_dt {
                                val += idt * de * mass;
                            }
                            if pen != 0.0 {
                                val += (pen_outer * u[dd] * u[e] + pen * upow * de) * mass;
                            }
                            if conv {
                                val += if skew {
                                    0.5 * (psi[b2] * gu[dd][e] * psi[b] + de * ug2 * psi[b]
                                        - psi[b2] * gpsi[b][e] * u[dd]
                                        - ug * de * psi[b2])
                                } else {
                                    -(psi[b2] * gpsi[b][e] * u[dd] + ug * psi[b2] * de)
                                };
                            }
                            jr[ns + b2 * 2 + e] += w * val;
                        }
                    }
                    for k in 0..np {
                        jr[ns + nu + k] -= w * chi[k] * gpsi[b][dd];
                    }
                }
            }
            // q rows
            for k in 0..np {
                let row = ns + nu + k;
                let jr = &mut jac[row * nloc..(row + 1) * nloc];
                for b in 0..nun {
                    for e in 0..2 {
                        jr[ns + b * 2 + e] -= w * chi[k] * gpsi[b][e];
                    }
                }
            }
        }
        CellLocal { res, jac }
    }

    fn add_global_terms(&self, x: &[f64], r: &mut [f64]) {
        let d = &*self.disc;
        if let Some(l) = d.lambda_index() {
            let p_off = d.pressure_offset();
            let mut mean = 0.0;
            for (q, &cq) in d.pressure_weights.iter().enumerate() {
                r[p_off + q] += cq * x[l];
                mean += cq * x[p_off + q];
            }
            r[l] = mean;
        }
        for c in &d.constrained {
            r[c.dof] = x[c.dof] - (d.dirichlet[c.condition].value)(c.point, self.params.time)[c.comp];
        }
    }

    /// Residual vector with Dirichlet rows replaced by `u - g`.
    pub fn assemble_residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let d = &*self.disc;
        let locals = map_indexed(d.execution, d.mesh.num_cells(), |c| self.cell_local(c, x, false));
        let mut r = vec![0.0; d.num_unknowns()];
        for (c, loc) in locals.iter().enumerate() {
            for (&g, v) in d.local_dofs(c).iter().zip(&loc.res) {
                r[g] += v;
            }
        }
        self.add_global_terms(x, &mut r);
        if let Some(i) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteResidual { index: i });
        }
        Ok(r)
    }

    /// Exact derivative of [`FlowProblem::assemble_residual`].
    pub fn assemble_jacobian(&self, x: &[f64]) -> Result<CsrMatrix> {
        self.check(x)?;
        let d = &*self.disc;
        let map = d.full_map();
        let (ns, nu, np) = d.local_sizes();
        let nloc = ns + nu + np;
        let locals = map_indexed(d.execution, d.mesh.num_cells(), |c| self.cell_local(c, x, true));
        let mut m = CsrMatrix::zeros(map.pattern.clone());
        let vals = m.values_mut();
        for (c, loc) in locals.iter().enumerate() {
            let pos = &map.positions[c * nloc * nloc..(c + 1) * nloc * nloc];
            for (k, &p) in pos.iter().enumerate() {
                if p != usize::MAX {
                    vals[p] += loc.jac[k];
                }
            }
        }
        for (q, &(a, b)) in map.lambda.iter().enumerate() {
            vals[a] = d.pressure_weights[q];
            vals[b] = d.pressure_weights[q];
        }
        for c in &d.constrained {
            m.set_identity_row(c.dof);
        }
        Ok(m)
    }

    /// Solves `J δ = -r` after eliminating the cell-local stress unknowns.
    pub fn newton_direction(&self, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let d = &*self.disc;
        let map = d.reduced_map();
        let (ns, nu, np) = d.local_sizes();
        let nloc = ns + nu + np;
        let nr = nu + np;
        let shift = d.velocity_offset();
        let condensed = map_indexed(d.execution, d.mesh.num_cells(), |c| -> Result<Condensed> {
            let loc = self.cell_local(c, x, true);
            let j = |i: usize, k: usize| loc.jac[i * nloc + k];
            let ss = DMatrix::from_fn(ns, ns, |i, k| j(i, k));
            let su = DMatrix::from_fn(ns, nu, |i, k| j(i, ns + k));
            let us = DMatrix::from_fn(nu, ns, |i, k| j(ns + i, k));
            let dofs = d.local_dofs(c);
            let rs = DVector::from_fn(ns, |i, _| r[dofs[i]]);
            let lu = ss.lu();
            let ss_inv_su = lu
                .solve(&su)
                .ok_or_else(|| Error::LinearSolve(format!("singular stress block in cell {c}")))?;
            let ss_inv_rs = lu
                .solve(&rs)
                .ok_or_else(|| Error::LinearSolve(format!("singular stress block in cell {c}")))?;
            let corr = &us * &ss_inv_su;
            let rhs_u = (&us * &ss_inv_rs).as_slice().to_vec();
            let mut k_red = vec![0.0; nr * nr];
            for i in 0..nr {
                for k in 0..nr {
                    let mut v = j(ns + i, ns + k);
                    if i < nu && k < nu {
                        v -= corr[(i, k)];
                    }
                    k_red[i * nr + k] = v;
                }
            }
            Ok(Condensed {
                k_red,
                rhs_u,
                ss_inv_su,
                ss_inv_rs,
            })
        });
        let condensed: Vec<Condensed> = condensed.into_iter().collect::<Result<_>>()?;

        let n = map.pattern.nrows();
        let mut m = CsrMatrix::zeros(map.pattern.clone());
        let mut rhs: Vec<f64> = r[shift..shift + n].iter().map(|v| -v).collect();
        {
            let vals = m.values_mut();
            for (c, cd) in condensed.iter().enumerate() {
                let pos = &map.positions[c * nloc * nloc..(c + 1) * nloc * nloc];
                for i in 0..nr {
                    for k in 0..nr {
                        let p = pos[(ns + i) * nloc + ns + k];
                        if p != usize::MAX {
                            vals[p] += cd.k_red[i * nr + k];
                        }
                    }
                }
                let dofs = d.local_dofs(c);
                for i in 0..nu {
                    rhs[dofs[ns + i] - shift] += cd.rhs_u[i];
                }
            }
        }
        for c in &d.constrained {
            m.set_identity_row(c.dof - shift);
            rhs[c.dof - shift] = -r[c.dof];
        }
        let y = match d.lambda_index() {
            Some(l) => {
                let border = Border {
                    offset: d.pressure_offset() - shift,
                    weights: &d.pressure_weights,
                    pin: d.pressure_offset() - shift + PRESSURE_PIN,
                };
                let (mut y, lambda) = d.lu.solve_bordered(&m, border, &rhs, -r[l])?;
                y.push(lambda);
                y
            }
            None => d.lu.solve(&m, &rhs)?,
        };
        debug_assert_eq!(y.len(), d.num_unknowns() - shift);

        let mut delta = vec![0.0; d.num_unknowns()];
        delta[shift..].copy_from_slice(&y);
        for (c, cd) in condensed.iter().enumerate() {
            let dofs = d.local_dofs(c);
            let du = DVector::from_fn(nu, |i, _| y[dofs[ns + i] - shift]);
            let ds = -(&cd.ss_inv_rs) - &cd.ss_inv_su * du;
            for i in 0..ns {
                delta[dofs[i]] = ds[i];
            }
        }
        Ok(delta)
    }
}

/// The convective form for three velocity fields on one space.
pub fn trilinear_b(u: &DiscreteField, v: &DiscreteField, w: &DiscreteField, variant: BVariant) -> Result<f64> {
    let space = u.space();
    if !Arc::ptr_eq(space, v.space()) || !Arc::ptr_eq(space, w.space()) || space.shape() != ValueShape::Vector {
        return Err(Error::invalid("trilinear form needs three fields on one vector space"));
    }
    let mesh = space.mesh();
    let rule = QuadratureRule::new((3 * space.degree()).max(2) - 1)?;
    let tab = space.element().tabulate_rule(&rule);
    let n = space.nodes_per_cell();
    let mut total = 0.0;
    let mut dofs = Vec::new();
    for c in 0..mesh.num_cells() {
        let map = mesh.cell_map(c);
        let det = map.det.abs();
        space.cell_dofs(c, &mut dofs);
        for (q, wq) in rule.weights.iter().enumerate() {
            let mut vals = [[0.0; 2]; 3];
            let mut grads = [[[0.0; 2]; 2]; 3];
            for a in 0..n {
                let g = map.push_gradient(tab.ref_grads(q)[a]);
                for (f, field) in [u, v, w].iter().enumerate() {
                    for i in 0..2 {
                        let coef = field.coeffs()[dofs[a * 2 + i]];
                        vals[f][i] += tab.values(q)[a] * coef;
                        grads[f][i][0] += coef * g[0];
                        grads[f][i][1] += coef * g[1];
                    }
                }
            }
            // ((a·∇)b)·c
            let adv = |a: usize, b: usize, cc: usize| -> f64 {
                (0..2)
                    .map(|j| (vals[a][0] * grads[b][j][0] + vals[a][1] * grads[b][j][1]) * vals[cc][j])
                    .sum()
            };
            let val = match variant {
                BVariant::DivFree => -adv(0, 2, 1),
                BVariant::Skew => 0.5 * (adv(0, 1, 2) - adv(0, 2, 1)),
            };
            total += wq * det * val;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::ConstitutiveModel;
    use crate::mesh::{markers::ALL, DiagonalPattern};
    use approx::assert_relative_eq;

    fn disc(n: usize, pair: ElementPair, nullspace: bool) -> Arc<Discretization> {
        let mesh = TriMesh::unit_square(n, DiagonalPattern::Right).unwrap();
        Arc::new(
            Discretization::new(
                &mesh,
                pair,
                DiscretizationOptions {
                    dirichlet: vec![DirichletCondition::homogeneous(&ALL)],
                    pressure_nullspace: nullspace,
                    ..Default::default()
                },
            )
            .unwrap(),
        )
    }

    #[test]
    fn b_variant_selection() {
        assert_eq!(select_b_variant(ElementPair::ScottVogelius { k: 1 }, false), BVariant::DivFree);
        assert_eq!(select_b_variant(ElementPair::TaylorHood, false), BVariant::Skew);
        assert_eq!(select_b_variant(ElementPair::ScottVogelius { k: 1 }, true), BVariant::Skew);
    }

    #[test]
    fn zero_state_has_zero_residual() {
        let d = disc(2, ElementPair::TaylorHood, true);
        let law: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Carreau { nu: 0.5, eps: 1e-5, r: 1.5 });
        let prob = FlowProblem::new(
            d.clone(),
            law,
            FlowParams {
                convection: true,
                penalty: 1.0,
                ..Default::default()
            },
        );
        let r = prob.assemble_residual(&vec![0.0; d.num_unknowns()]).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_pressure_block_is_zero_and_pattern_symmetric() {
        let d = disc(2, ElementPair::ScottVogelius { k: 1 }, true);
        let law: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Newtonian { nu: 0.5 });
        let prob = FlowProblem::new(d.clone(), law, FlowParams::default());
        let x: Vec<f64> = (0..d.num_unknowns()).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = prob.assemble_jacobian(&x).unwrap();
        let p0 = d.pressure_offset();
        for i in p0..p0 + d.pressure_space().dim() {
            for j in p0..p0 + d.pressure_space().dim() {
                assert_eq!(m.get(i, j), 0.0);
            }
        }
        assert!(m.pattern().is_structurally_symmetric());
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert_eq!(prob.assemble_jacobian(&x2).unwrap(), m);
    }

    #[test]
    fn convection_integral_closed_form() {
        let mesh = Arc::new(TriMesh::unit_square(3, DiagonalPattern::Right).unwrap());
        let space = Arc::new(FunctionSpace::new(mesh, Family::Continuous, 2, ValueShape::Vector).unwrap());
        let u = space.interpolate(|_| [1.0, 0.0]).unwrap();
        let w = space.interpolate(|x| [x[0], 0.0]).unwrap();
        assert_relative_eq!(trilinear_b(&u, &u, &w, BVariant::DivFree).unwrap(), -1.0, max_relative = 1e-13);
        let rot = space.interpolate(|x| [x[1], -x[0]]).unwrap();
        assert!(trilinear_b(&rot, &rot, &rot, BVariant::DivFree).unwrap().abs() < 1e-13);
        let any = space.interpolate(|x| [x[0] * x[1] + 1.0, x[0] * x[0] - x[1]]).unwrap();
        assert!(trilinear_b(&any, &any, &any, BVariant::Skew).unwrap().abs() < 1e-13);
    }

    #[test]
    fn penalty_on_constant_field() {
        let mesh = TriMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]],
            [[0, 1], [1, 2], [2, 0]]
                .map(|vertices| crate::mesh::BoundaryFacet { vertices, marker: 1 })
                .to_vec(),
            0,
        )
        .unwrap();
        let d = Arc::new(
            Discretization::new(
                &mesh,
                ElementPair::TaylorHood,
                DiscretizationOptions {
                    pressure_nullspace: false,
                    ..Default::default()
                },
            )
            .unwrap(),
        );
        let law: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Carreau { nu: 0.5, eps: 1e-5, r: 1.5 });
        let params = FlowParams {
            penalty: 1.0,
            ..Default::default()
        };
        let with = FlowProblem::new(d.clone(), law.clone(), params);
        let without = FlowProblem::new(d.clone(), law, FlowParams::default());
        let cvec = [0.6, -0.8];
        let u = d.velocity_space().interpolate(|_| cvec).unwrap();
        let x = d.pack(&d.stress_space().zero_field(), &u, &d.pressure_space().zero_field()).unwrap();
        let diff: Vec<f64> = with
            .assemble_residual(&x)
            .unwrap()
            .iter()
            .zip(without.assemble_residual(&x).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        // r' = 3, |c| = 1: contribution c_d ∫ψ_b; P2 vertex functions integrate to 0, edge ones to 1/6 of the area
        let uo = d.velocity_offset();
        for node in 0..6 {
            let integral = if node < 3 { 0.0 } else { 0.5 / 3.0 };
            for comp in 0..2 {
                assert_relative_eq!(diff[uo + node * 2 + comp], cvec[comp] * integral, epsilon = 1e-14);
            }
        }
    }
}
