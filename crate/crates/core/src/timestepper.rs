//! Implicit Euler marching of the stress–velocity–pressure system.

use std::sync::Arc;

use crate::analysis::{energy_ledger, EnergyLedger};
use crate::constitutive::ConstitutiveLaw;
use crate::error::{Error, Result};
use crate::forms::{Discretization, FlowParams, FlowProblem, SourceFn};
use crate::mesh::Point;
use crate::quadrature::gauss_legendre_unit;
use crate::solver::{newton_solve, NewtonOptions};

/// Space–time source `f(x, t)`.
pub type SpaceTimeFn = Arc<dyn Fn(Point, f64) -> [f64; 2] + Send + Sync>;

/// Equidistant grid `t_j = j·τ`, `j = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub tau: f64,
    pub t_final: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(tau: f64, t_final: f64) -> Result<Self> {
        if !(tau > 0.0 && t_final > 0.0 && tau.is_finite() && t_final.is_finite()) {
            return Err(Error::invalid("timestep and final time must be positive"));
        }
        let ratio = t_final / tau;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
            return Err(Error::invalid(format!("T/τ = {ratio} is not a positive integer")));
        }
        Ok(TimeGrid {
            tau,
            t_final,
            steps: steps as usize,
        })
    }

    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.t_final
        } else {
            j as f64 * self.tau
        }
    }
}

/// `(1/τ)∫_{t_{j-1}}^{t_j} g(t) dt` by 3-point Gauss.
pub fn time_average<T, G>(g: G, grid: &TimeGrid, j: usize) -> Result<T>
where
    G: Fn(f64) -> T,
    T: Default + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
{
    if j == 0 || j > grid.steps {
        return Err(Error::invalid(format!("step {j} outside 1..={}", grid.steps)));
    }
    let (a, b) = (grid.time(j - 1), grid.time(j));
    let (x, w) = gauss_legendre_unit(3);
    let mut acc = T::default();
    for (s, wt) in x.iter().zip(&w) {
        acc += g(a + s * (b - a)) * *wt;
    }
    Ok(acc)
}

/// The time-averaged forcing `f_j` as a spatial source.
pub fn time_average_forcing(f: &SpaceTimeFn, grid: &TimeGrid, j: usize) -> Result<SourceFn> {
    if j == 0 || j > grid.steps {
        return Err(Error::invalid(format!("step {j} outside 1..={}", grid.steps)));
    }
    let (a, b) = (grid.time(j - 1), grid.time(j));
    let f = f.clone();
    let (x, w) = gauss_legendre_unit(3);
    Ok(Arc::new(move |p| {
        let mut acc = [0.0; 2];
        for (s, wt) in x.iter().zip(&w) {
            let v = f(p, a + s * (b - a));
            acc[0] += wt * v[0];
            acc[1] += wt * v[1];
        }
        acc
    }))
}

/// L² projection of `u₀` onto discretely divergence-free velocities.
pub fn l2_div_project<F: Fn(Point) -> [f64; 2]>(disc: &Discretization, u0: F) -> Result<Vec<f64>> {
    disc.l2_div_project(u0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    pub newton_iterations: usize,
    pub newton_residual: f64,
    /// `½‖u^j‖²`.
    pub kinetic_energy: f64,
    /// `‖u^j - u^{j-1}‖_{L²}`.
    pub increment: f64,
    pub energy: Option<EnergyLedger>,
}

impl StepDiagnostics {
    pub fn energy_residual(&self) -> Option<f64> {
        self.energy.map(|e| e.residual())
    }
}

/// Stored states and per-step diagnostics of a run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// Step indices of the stored states, increasing.
    pub stored: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Set when the run stopped at a detected steady state.
    pub steady_at: Option<usize>,
}

impl Trajectory {
    pub fn state(&self, j: usize) -> Option<&[f64]> {
        self.stored.binary_search(&j).ok().map(|k| self.states[k].as_slice())
    }

    pub fn last_step(&self) -> usize {
        self.diagnostics.last().map_or(0, |d| d.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolantKind {
    /// `v^j` on `(t_{j-1}, t_j]`.
    Constant,
    Linear,
}

pub fn interpolant_eval(traj: &Trajectory, t: f64, kind: InterpolantKind) -> Result<Vec<f64>> {
    let grid = &traj.grid;
    if !(t >= 0.0 && t <= grid.t_final) {
        return Err(Error::invalid(format!("t = {t} outside [0, {}]", grid.t_final)));
    }
    let missing = |j: usize| Error::invalid(format!("state {j} was not stored"));
    let s = t / grid.tau;
    let mut j = s.ceil() as usize;
    let node = (s - s.round()).abs() <= 1e-12 * s.max(1.0);
    if node {
        j = s.round() as usize;
        return traj.state(j.min(grid.steps)).map(<[f64]>::to_vec).ok_or_else(|| missing(j));
    }
    j = j.clamp(1, grid.steps);
    match kind {
        InterpolantKind::Constant => traj.state(j).map(<[f64]>::to_vec).ok_or_else(|| missing(j)),
        InterpolantKind::Linear => {
            let a = traj.state(j - 1).ok_or_else(|| missing(j - 1))?;
            let b = traj.state(j).ok_or_else(|| missing(j))?;
            let theta = (t - grid.time(j - 1)) / grid.tau;
            Ok(a.iter().zip(b).map(|(a, b)| (1.0 - theta) * a + theta * b).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Store every `thin`-th state (the initial and final states always).
    pub thin: usize,
    /// Stop once `‖u^j - u^{j-1}‖/τ ≤ tol·‖u^j‖`.
    pub steady_tol: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            thin: 1,
            steady_tol: None,
        }
    }
}

/// One implicit Euler run: fixed discretization, law and forcing.
#[derive(Clone)]
pub struct TimeStepper {
    pub disc: Arc<Discretization>,
    pub law: Arc<dyn ConstitutiveLaw>,
    /// The timestep and time fields are set per step.
    pub params: FlowParams,
    pub forcing: Option<SpaceTimeFn>,
    pub newton: NewtonOptions,
    pub grid: TimeGrid,
    /// Record the discrete energy balance (meaningful for homogeneous Dirichlet data).
    pub energy_check: bool,
    /// Start Newton from `2x^{j-1} - x^{j-2}` instead of `x^{j-1}`.
    pub extrapolate: bool,
}

fn l2_norm_sq(disc: &Discretization, u: &[f64]) -> Result<f64> {
    let field = crate::fespace::DiscreteField::new(disc.velocity_space().clone(), u.to_vec())?;
    let mut acc = 0.0;
    for c in 0..disc.mesh().num_cells() {
        let (_, w, xi) = disc.cell_quadrature(c);
        for (w, xi) in w.iter().zip(&xi) {
            let v = field.evaluate(c, *xi)?.values;
            acc += w * (v[0] * v[0] + v[1] * v[1]);
        }
    }
    Ok(acc)
}

impl TimeStepper {
    /// Solves for the state at `t_j` given the state at `t_{j-1}`.
    pub fn step(&self, prev: &[f64], j: usize) -> Result<(Vec<f64>, StepDiagnostics)> {
        self.step_from(prev, prev.to_vec(), j)
    }

    /// As [`TimeStepper::step`] with an explicit Newton initial guess.
    pub fn step_from(&self, prev: &[f64], guess: Vec<f64>, j: usize) -> Result<(Vec<f64>, StepDiagnostics)> {
        if prev.len() != self.disc.num_unknowns() || guess.len() != prev.len() {
            return Err(Error::invalid("previous state has the wrong length"));
        }
        let t = self.grid.time(j);
        let forcing = match &self.forcing {
            Some(f) => Some(time_average_forcing(f, &self.grid, j)?),
            None => {
                if j == 0 || j > self.grid.steps {
                    return Err(Error::invalid(format!("step {j} outside 1..={}", self.grid.steps)));
                }
                None
            }
        };
        let u_prev = self.disc.velocity_coeffs(prev).to_vec();
        let params = FlowParams {
            timestep: Some(self.grid.tau),
            time: t,
            ..self.params
        };
        let mut prob = FlowProblem::new(self.disc.clone(), self.law.clone(), params).with_previous(u_prev.clone());
        if let Some(f) = &forcing {
            prob = prob.with_forcing(f.clone());
        }
        let mut x0 = guess;
        self.disc.apply_dirichlet_values(&mut x0, t);
        let (x, hist) = newton_solve(&prob, x0, &self.newton)
            .map_err(|e| e.context(format!("time step {j} (t = {t})")))?;
        let u = self.disc.velocity_coeffs(&x);
        let diff: Vec<f64> = u.iter().zip(&u_prev).map(|(a, b)| a - b).collect();
        let energy = if self.energy_check {
            let conv = self.params.convection.then_some(self.params.b_variant);
            Some(energy_ledger(
                &self.disc,
                &x,
                &u_prev,
                self.grid.tau,
                self.params.penalty,
                self.law.growth_exponent(),
                forcing.as_ref(),
                conv,
            )?)
        } else {
            None
        };
        let diag = StepDiagnostics {
            step: j,
            time: t,
            newton_iterations: hist.iterations(),
            newton_residual: hist.final_residual(),
            kinetic_energy: 0.5 * l2_norm_sq(&self.disc, u)?,
            increment: l2_norm_sq(&self.disc, &diff)?.sqrt(),
            energy,
        };
        Ok((x, diag))
    }

    /// Marches from `x0` at `t = 0`. `monitor` sees every converged state.
    pub fn run<M>(&self, x0: Vec<f64>, options: RunOptions, mut monitor: M) -> Result<Trajectory>
    where
        M: FnMut(&StepDiagnostics, &[f64]) -> Result<()>,
    {
        if options.thin == 0 {
            return Err(Error::invalid("thinning interval must be at least 1"));
        }
        let mut traj = Trajectory {
            grid: self.grid,
            stored: vec![0],
            states: vec![x0.clone()],
            diagnostics: Vec::new(),
            steady_at: None,
        };
        let mut x = x0;
        let mut older: Option<Vec<f64>> = None;
        for j in 1..=self.grid.steps {
            let guess = match (&older, self.extrapolate) {
                (Some(o), true) => x.iter().zip(o).map(|(a, b)| 2.0 * a - b).collect(),
                _ => x.clone(),
            };
            let (xn, diag) = self.step_from(&x, guess, j)?;
            monitor(&diag, &xn)?;
            let steady = options.steady_tol.is_some_and(|tol| {
                diag.increment / self.grid.tau <= tol * (2.0 * diag.kinetic_energy).sqrt()
            });
            if j % options.thin == 0 || j == self.grid.steps || steady {
                traj.stored.push(j);
                traj.states.push(xn.clone());
            }
            traj.diagnostics.push(diag);
            older = Some(std::mem::replace(&mut x, xn));
            if steady {
                traj.steady_at = Some(j);
                break;
            }
        }
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_integrality() {
        assert_eq!(TimeGrid::new(0.1, 1.0).unwrap().steps, 10);
        assert_eq!(TimeGrid::new(1.25e-4, 0.1).unwrap().steps, 800);
        assert!(TimeGrid::new(0.3, 1.0).is_err());
        assert!(TimeGrid::new(0.0, 1.0).is_err());
        assert_eq!(TimeGrid::new(0.1, 0.3).unwrap().time(3), 0.3);
    }

    #[test]
    fn time_average_examples() {
        let g = TimeGrid::new(0.1, 1.0).unwrap();
        assert_relative_eq!(time_average(|_| 3.0, &g, 4).unwrap(), 3.0, max_relative = 1e-15);
        assert_relative_eq!(time_average(|t| t, &g, 1).unwrap(), 0.05, max_relative = 1e-14);
        assert_relative_eq!(time_average(|t| t * t, &g, 1).unwrap(), 1.0 / 300.0, max_relative = 1e-13);
        assert!(time_average(|t| t, &g, 0).is_err());
        assert!(time_average(|t| t, &g, 11).is_err());
        let f: SpaceTimeFn = Arc::new(|x, t| [x[0] * t, 1.0]);
        let fj = time_average_forcing(&f, &g, 1).unwrap();
        assert_relative_eq!(fj([2.0, 0.0])[0], 0.1, max_relative = 1e-14);
    }

    fn trajectory() -> Trajectory {
        let grid = TimeGrid::new(0.5, 2.0).unwrap();
        Trajectory {
            grid,
            stored: (0..=4).collect(),
            states: (0..=4).map(|j| vec![j as f64, 10.0 * j as f64]).collect(),
            diagnostics: Vec::new(),
            steady_at: None,
        }
    }

    #[test]
    fn interpolants() {
        let tr = trajectory();
        for kind in [InterpolantKind::Constant, InterpolantKind::Linear] {
            assert_eq!(interpolant_eval(&tr, 1.0, kind).unwrap(), vec![2.0, 20.0]);
            assert_eq!(interpolant_eval(&tr, 0.0, kind).unwrap(), vec![0.0, 0.0]);
            assert!(interpolant_eval(&tr, 2.5, kind).is_err());
            assert!(interpolant_eval(&tr, -0.1, kind).is_err());
        }
        assert_eq!(interpolant_eval(&tr, 0.75, InterpolantKind::Linear).unwrap(), vec![1.5, 15.0]);
        assert_eq!(interpolant_eval(&tr, 0.5 + 1e-12, InterpolantKind::Constant).unwrap(), vec![2.0, 20.0]);
        assert_eq!(interpolant_eval(&tr, 0.7, InterpolantKind::Constant).unwrap(), vec![2.0, 20.0]);
    }
}
