//! One driver per experiment. Each returns its findings in structured form
//! and writes its artifacts under the output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rheoflow_core::analysis::{
    flow_rate, infsup_probe, lebesgue_error, natural_distance, natural_distance_sq_slab, stress_infsup_probe,
    w1s_error, divergence_norm, ErrorQuadrature, ErrorTable, ForcingTerms, ManufacturedSolution, TimeMode,
};
use rheoflow_core::constitutive::{ConstitutiveLaw, ConstitutiveModel, SymTensor2};
use rheoflow_core::forms::{
    DirichletCondition, Discretization, DiscretizationOptions, ElementPair, FlowParams, FlowProblem,
};
use rheoflow_core::mesh::{markers, TriMesh};
use rheoflow_core::solver::{newton_solve, NewtonOptions};
use rheoflow_core::timestepper::{l2_div_project, SpaceTimeFn, StepDiagnostics, TimeGrid, TimeStepper};

use crate::checks::{graph_checks, reference_models, CheckResult};
use crate::config::{pair_of, Experiment, ModelKind, RunConfig};
use crate::output::{write_csv_table, write_error_csv, write_series_csv, write_vtk, RunReport};

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Solver(rheoflow_core::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::Solver(e) => write!(f, "solver failure: {e}"),
            RunError::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl RunError {
    /// 2 for configuration errors, 3 when the solver fails, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(e) => match e.root() {
                rheoflow_core::Error::InvalidArgument(_) => 2,
                _ => 3,
            },
            RunError::Io(_) => 1,
        }
    }
}

impl From<rheoflow_core::Error> for RunError {
    fn from(e: rheoflow_core::Error) -> Self {
        RunError::Solver(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

impl From<crate::config::ConfigError> for RunError {
    fn from(e: crate::config::ConfigError) -> Self {
        RunError::Config(e.0)
    }
}

type Result<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CouetteRun {
    pub bn: f64,
    pub q0: f64,
    pub times: Vec<f64>,
    pub flow_rates: Vec<f64>,
    pub cessation_time: Option<f64>,
    pub max_energy_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavityFindings {
    pub stages: Vec<(String, usize)>,
    /// `(|D|, |S|)` at sample points inside the activation disk.
    pub disk_samples: Vec<(f64, f64)>,
    pub max_stress: f64,
    /// Relative L² velocity difference between δ_s = 0 and the Newtonian law.
    pub newtonian_difference: Option<f64>,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfsupRow {
    pub pair: ElementPair,
    pub n: usize,
    pub velocity_pressure: f64,
    pub stress_velocity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Findings {
    /// Named tables and the largest `‖div u_h‖` over all solves.
    Convergence { tables: Vec<(String, ErrorTable)>, max_divergence: f64 },
    Cavity(CavityFindings),
    Couette(Vec<CouetteRun>),
    Infsup(Vec<InfsupRow>),
    Graph(Vec<CheckResult>),
}

#[derive(Debug)]
pub struct RunOutcome {
    pub findings: Findings,
    pub report: RunReport,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSettings {
    /// Overrides `output.dir`.
    pub out: Option<PathBuf>,
    pub dump_mesh: bool,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    report: RunReport,
    files: Vec<PathBuf>,
    dump_mesh: bool,
}

impl Ctx<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn vtk(&mut self, disc: &Discretization, x: &[f64], name: &str) -> Result<()> {
        if self.cfg.output.vtk.unwrap_or(false) {
            let p = self.path(name);
            write_vtk(disc, x, &p)?;
        }
        Ok(())
    }

    fn mesh(&mut self, n: usize) -> Result<TriMesh> {
        let mesh = TriMesh::unit_square(n, self.cfg.pattern())?;
        if self.dump_mesh {
            let p = self.path(&format!("mesh_n{n}.txt"));
            mesh.write_text(std::io::BufWriter::new(std::fs::File::create(&p)?))?;
        }
        Ok(mesh)
    }

    fn step_row(&mut self, label: &str, d: &StepDiagnostics, extra: &str) {
        self.report.diagnostics.push(vec![
            label.to_string(),
            d.step.to_string(),
            format!("{:.6e}", d.time),
            d.newton_iterations.to_string(),
            format!("{:.3e}", d.newton_residual),
            d.energy_residual().map_or("-".into(), |r| format!("{r:.3e}")),
            extra.to_string(),
        ]);
    }
}

/// Runs a resolved config.
pub fn run(cfg: &RunConfig, settings: &RunSettings) -> Result<RunOutcome> {
    let start = Instant::now();
    let dir = settings.out.clone().unwrap_or_else(|| cfg.output_dir());
    std::fs::create_dir_all(&dir)?;
    let echo = cfg.to_toml();
    let mut ctx = Ctx {
        cfg,
        dir,
        report: RunReport {
            config: echo.clone(),
            threads: rheoflow_core::par::thread_count(),
            ..Default::default()
        },
        files: Vec::new(),
        dump_mesh: settings.dump_mesh,
    };
    let p = ctx.path("config.toml");
    std::fs::write(p, echo)?;
    ctx.report.add("experiment", cfg.experiment.name());

    let findings = match cfg.experiment {
        Experiment::CarreauSteady => steady_study(&mut ctx)?,
        Experiment::PenaltyStudy => penalty_study(&mut ctx)?,
        Experiment::CarreauUnsteady => unsteady_study(&mut ctx)?,
        Experiment::CavityActivated => cavity(&mut ctx)?,
        Experiment::CouetteCessation => couette(&mut ctx)?,
        Experiment::InfsupProbe => infsup(&mut ctx)?,
        Experiment::GraphCheck => graph(&mut ctx)?,
    };

    ctx.report.wall_clock = start.elapsed().as_secs_f64();
    let p = ctx.path("report.txt");
    ctx.report.write(&p)?;
    Ok(RunOutcome {
        findings,
        report: ctx.report,
        files: ctx.files,
    })
}

fn carreau_params(cfg: &RunConfig) -> Result<(f64, f64, f64)> {
    match cfg.model()? {
        ConstitutiveModel::Carreau { nu, eps, r } => Ok((nu, eps, r)),
        other => Err(RunError::Config(format!("{} needs the carreau model, got {}", cfg.experiment.name(), other.name()))),
    }
}

fn manufactured(cfg: &RunConfig, mode: TimeMode) -> Result<ManufacturedSolution> {
    let (nu, eps, r) = carreau_params(cfg)?;
    let a = cfg.solution.a.ok_or_else(|| RunError::Config("solution.a is required".into()))?;
    let b = cfg.solution.b.ok_or_else(|| RunError::Config("solution.b is required".into()))?;
    Ok(ManufacturedSolution::new(a, b, r, nu, eps, mode)?)
}

fn manufactured_disc(ctx: &mut Ctx, n: usize, ms: ManufacturedSolution) -> Result<Arc<Discretization>> {
    let mesh = ctx.mesh(n)?;
    Ok(Arc::new(Discretization::new(
        &mesh,
        ctx.cfg.element_pair(),
        DiscretizationOptions {
            dirichlet: vec![DirichletCondition::new(&markers::ALL, &[0, 1], Arc::new(move |x, t| ms.velocity(x, t)))],
            quadrature_degree: ctx.cfg.discretization.quadrature_degree,
            singular_point: Some([0.0, 0.0]),
            ..Default::default()
        },
    )?))
}

fn pressure_rate(r: f64) -> f64 {
    let rp = r / (r - 1.0);
    (2.0 / rp).min(rp / 2.0)
}

fn steady_table(ctx: &mut Ctx, penalty: f64, label: &str) -> Result<(ErrorTable, f64)> {
    let cfg = ctx.cfg;
    let (nu, eps, r) = carreau_params(cfg)?;
    let rp = r / (r - 1.0);
    let ms = manufactured(cfg, TimeMode::Steady)?;
    let convection = cfg.discretization.convection.unwrap_or(false);
    let terms = ForcingTerms { convection, penalty };
    let newton = cfg.newton_options();
    let quad = ErrorQuadrature::origin_singular();
    let mut table = ErrorTable::new(&["F", "W1r", "p", "S"]);
    table.expected = Some(vec![Some(1.0), None, Some(pressure_rate(r)), None]);
    let mut max_div: f64 = 0.0;
    for &n in cfg.levels() {
        let t0 = Instant::now();
        let disc = manufactured_disc(ctx, n, ms)?;
        let params = FlowParams {
            penalty,
            convection,
            b_variant: cfg.b_variant(),
            ..Default::default()
        };
        let law: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Carreau { nu, eps, r });
        let prob = FlowProblem::new(disc.clone(), law, params).with_forcing(ms.forcing_fn(0.0, terms));
        let mut x0 = disc.initial_state(0.0);
        let mut warm_iters = 0;
        if cfg.newton.warm_start.unwrap_or(false) {
            let stokes: Arc<dyn ConstitutiveLaw> = Arc::new(ConstitutiveModel::Newtonian { nu });
            let warm = FlowProblem { law: stokes, ..prob.clone() };
            let (x, h) = newton_solve(&warm, x0, &newton)
                .map_err(|e| e.context(format!("{label} n = {n}: Newtonian warm start")))?;
            x0 = x;
            warm_iters = h.iterations();
        }
        let (x, hist) = newton_solve(&prob, x0, &newton).map_err(|e| e.context(format!("{label} n = {n}")))?;
        let (u, p, s) = (disc.velocity_field(&x), disc.pressure_field(&x), disc.stress_field(&x));
        let pm = ms.pressure_mean(0.0);
        let errors = vec![
            natural_distance(&u, |y| ms.strain(y, 0.0), r, eps, &quad),
            w1s_error(&u, |y| ms.velocity(y, 0.0), |y| ms.velocity_gradient(y, 0.0), r, &quad),
            lebesgue_error(&p, |y| vec![ms.pressure(y, 0.0) - pm], rp, &quad),
            lebesgue_error(&s, |y| ms.stress(y, 0.0).to_array().to_vec(), rp, &quad),
        ];
        let div = divergence_norm(&u, &quad);
        max_div = max_div.max(div);
        ctx.report.diagnostics.push(vec![
            label.to_string(),
            n.to_string(),
            disc.num_unknowns().to_string(),
            warm_iters.to_string(),
            hist.iterations().to_string(),
            format!("{:.3e}", hist.final_residual()),
            format!("{div:.3e}"),
            format!("{:.2}", t0.elapsed().as_secs_f64()),
        ]);
        if n == *cfg.levels().last().unwrap() {
            ctx.vtk(&disc, &x, &format!("{label}_n{n}.vtk"))?;
        }
        table.push(1.0 / n as f64, None, errors)?;
    }
    Ok((table, max_div))
}

const SOLVE_HEADER: [&str; 8] = ["run", "n", "unknowns", "warm_iters", "newton_iters", "residual", "div_u", "seconds"];

fn write_tables(ctx: &mut Ctx, label: &str, table: &ErrorTable) -> Result<()> {
    let p = ctx.path(&format!("{label}_eoc.csv"));
    write_csv_table(table, &p)?;
    let p = ctx.path(&format!("{label}_errors.csv"));
    write_error_csv(table, &p)?;
    Ok(())
}

fn steady_study(ctx: &mut Ctx) -> Result<Findings> {
    ctx.report.diagnostics_header = SOLVE_HEADER.map(String::from).to_vec();
    let penalty = ctx.cfg.discretization.penalty.unwrap_or(0.0);
    let (table, max_divergence) = steady_table(ctx, penalty, "steady")?;
    write_tables(ctx, "steady", &table)?;
    Ok(Findings::Convergence {
        tables: vec![("steady".into(), table)],
        max_divergence,
    })
}

fn penalty_study(ctx: &mut Ctx) -> Result<Findings> {
    ctx.report.diagnostics_header = SOLVE_HEADER.map(String::from).to_vec();
    let values = ctx.cfg.penalty.values.clone().unwrap_or_default();
    let mut tables = Vec::new();
    let mut max_divergence: f64 = 0.0;
    for pen in values {
        let label = format!("penalty_{pen}");
        let (mut table, div) = steady_table(ctx, pen, &label)?;
        // the penalty tables report the natural distance and the pressure only
        let keep = [0usize, 2];
        table.norms = keep.iter().map(|&k| table.norms[k].clone()).collect();
        for row in &mut table.rows {
            row.errors = keep.iter().map(|&k| row.errors[k]).collect();
        }
        table.expected = table.expected.map(|e| keep.iter().map(|&k| e[k]).collect());
        write_tables(ctx, &label, &table)?;
        max_divergence = max_divergence.max(div);
        tables.push((label, table));
    }
    Ok(Findings::Convergence { tables, max_divergence })
}

fn unsteady_study(ctx: &mut Ctx) -> Result<Findings> {
    let cfg = ctx.cfg;
    ctx.report.diagnostics_header =
        ["run", "step", "time", "newton_iters", "residual", "energy_residual", "u_error_L2"].map(String::from).to_vec();
    let (nu, eps, r) = carreau_params(cfg)?;
    let ms = manufactured(cfg, TimeMode::LinearInTime)?;
    let convection = cfg.discretization.convection.unwrap_or(true);
    let penalty = cfg.discretization.penalty.unwrap_or(0.0);
    let terms = ForcingTerms { convection, penalty };
    let t_final = cfg.time.t_final.unwrap_or(0.1);
    let taus = cfg.time.tau.clone().unwrap_or_default();
    let quad = ErrorQuadrature::origin_singular();
    let mut table = ErrorTable::new(&["F_L2Q", "u_Linf_L2"]);
    table.expected = Some(vec![Some(1.0), Some(1.0)]);
    let mut max_div: f64 = 0.0;
    for (&n, &tau) in cfg.levels().iter().zip(&taus) {
        let disc = manufactured_disc(ctx, n, ms)?;
        let f: SpaceTimeFn = Arc::new(move |x, t| ms.forcing(x, t, terms));
        let stepper = TimeStepper {
            disc: disc.clone(),
            law: Arc::new(ConstitutiveModel::Carreau { nu, eps, r }),
            params: FlowParams {
                convection,
                penalty,
                b_variant: cfg.b_variant(),
                ..Default::default()
            },
            forcing: Some(f),
            newton: cfg.newton_options(),
            grid: TimeGrid::new(tau, t_final)?,
            energy_check: false,
            extrapolate: cfg.time.extrapolate.unwrap_or(true),
        };
        let label = format!("n{n}");
        let mut f_sq = 0.0;
        let mut linf: f64 = 0.0;
        let mut rows = Vec::new();
        let thin = match cfg.time.thin.unwrap_or(0) {
            0 => usize::MAX,
            k => k,
        };
        let traj = stepper.run(
            disc.initial_state(0.0),
            rheoflow_core::timestepper::RunOptions { thin, steady_tol: None },
            |d, x| {
                let u = disc.velocity_field(x);
                f_sq += natural_distance_sq_slab(&u, |y, t| ms.strain(y, t), (d.time - tau, d.time), r, eps, &quad);
                let e = lebesgue_error(&u, |y| ms.velocity(y, d.time).to_vec(), 2.0, &quad);
                linf = linf.max(e);
                rows.push((d.clone(), e));
                Ok(())
            },
        )?;
        for (d, e) in rows {
            ctx.step_row(&label, &d, &format!("{e:.6e}"));
        }
        let last = traj.states.last().expect("final state is stored");
        max_div = max_div.max(divergence_norm(&disc.velocity_field(last), &quad));
        if n == *cfg.levels().last().unwrap() {
            ctx.vtk(&disc, last, &format!("unsteady_n{n}_final.vtk"))?;
        }
        table.push(1.0 / n as f64, Some(tau), vec![f_sq.sqrt(), linf])?;
    }
    write_tables(ctx, "unsteady", &table)?;
    Ok(Findings::Convergence {
        tables: vec![("unsteady".into(), table)],
        max_divergence: max_div,
    })
}

fn cavity_disc(ctx: &mut Ctx, n: usize) -> Result<Arc<Discretization>> {
    let mesh = ctx.mesh(n)?;
    let lid = Arc::new(|x: [f64; 2], _t: f64| {
        let s = x[0] * (1.0 - x[0]);
        [16.0 * s * s * x[1] * x[1], 0.0]
    });
    Ok(Arc::new(Discretization::new(
        &mesh,
        ctx.cfg.element_pair(),
        DiscretizationOptions {
            dirichlet: vec![
                DirichletCondition::homogeneous(&[markers::BOTTOM, markers::LEFT, markers::RIGHT]),
                DirichletCondition::new(&[markers::TOP], &[0, 1], lid),
            ],
            quadrature_degree: ctx.cfg.discretization.quadrature_degree,
            ..Default::default()
        },
    )?))
}

fn velocity_difference(disc: &Discretization, a: &[f64], b: &[f64]) -> Result<f64> {
    let quad = ErrorQuadrature::new(2 * disc.pair().velocity_degree() + 2, None)?;
    let diff: Vec<f64> = disc.velocity_coeffs(a).iter().zip(disc.velocity_coeffs(b)).map(|(p, q)| p - q).collect();
    let field = |c: Vec<f64>| rheoflow_core::fespace::DiscreteField::new(disc.velocity_space().clone(), c);
    let num = rheoflow_core::analysis::lebesgue_norm(&field(diff)?, 2.0, &quad);
    let den = rheoflow_core::analysis::lebesgue_norm(&field(disc.velocity_coeffs(b).to_vec())?, 2.0, &quad);
    Ok(num / den)
}

fn cavity(ctx: &mut Ctx) -> Result<Findings> {
    let cfg = ctx.cfg;
    ctx.report.diagnostics_header = ["stage", "newton_iters", "residual"].map(String::from).to_vec();
    let ConstitutiveModel::ActivatedEulerNs { nu, region, .. } = cfg.model()? else {
        return Err(RunError::Config("cavity-activated needs the activated model".into()));
    };
    let n = cfg.levels()[0];
    let disc = cavity_disc(ctx, n)?;
    let params = FlowParams {
        convection: cfg.discretization.convection.unwrap_or(true),
        b_variant: cfg.b_variant(),
        penalty: cfg.discretization.penalty.unwrap_or(0.0),
        ..Default::default()
    };
    let newton = cfg.newton_options();
    let problem = |law: ConstitutiveModel| FlowProblem::new(disc.clone(), Arc::new(law), params);
    let newtonian = ConstitutiveModel::Newtonian { nu };

    let (x_newt, h) = newton_solve(&problem(newtonian), disc.initial_state(0.0), &newton)
        .map_err(|e| e.context("Newtonian cavity"))?;
    let mut stages = vec![("newtonian".to_string(), h.iterations())];
    ctx.report.diagnostics.push(vec!["newtonian".into(), h.iterations().to_string(), format!("{:.3e}", h.final_residual())]);

    let m_values = cfg.continuation.m.clone().unwrap_or_default();
    let ds_values = cfg.continuation.delta_s.clone().unwrap_or_default();
    let m0 = m_values.first().copied().or(cfg.model.m).unwrap_or(200.0);
    let ds_last = ds_values.last().copied().or(cfg.model.delta_s).unwrap_or(2.5);
    let mut schedule: Vec<(f64, f64)> = ds_values.iter().map(|&d| (d, m0)).collect();
    schedule.extend(m_values.iter().skip(usize::from(!ds_values.is_empty())).map(|&m| (ds_last, m)));
    if schedule.is_empty() {
        schedule.push((ds_last, m0));
    }
    let activated = |delta_s, m| ConstitutiveModel::ActivatedEulerNs { nu, delta_s, m, region };

    let mut x = x_newt.clone();
    for (delta_s, m) in &schedule {
        let name = format!("delta_s={delta_s},M={m}");
        let (xn, h) = newton_solve(&problem(activated(*delta_s, *m)), x, &newton)
            .map_err(|e| e.context(format!("continuation stage {name}")))?;
        x = xn;
        ctx.report.diagnostics.push(vec![name.clone(), h.iterations().to_string(), format!("{:.3e}", h.final_residual())]);
        stages.push((name, h.iterations()));
    }

    let u = disc.velocity_field(&x);
    let s = disc.stress_field(&x);
    let mesh = disc.mesh();
    let mut disk_samples = Vec::new();
    let mut max_stress: f64 = 0.0;
    for c in 0..mesh.num_cells() {
        let (pts, _, xis) = disc.cell_quadrature(c);
        for (p, xi) in pts.iter().zip(&xis) {
            let sv = s.evaluate(c, *xi)?.values;
            let sn = SymTensor2::new(sv[0], sv[1], sv[2]).norm();
            max_stress = max_stress.max(sn);
            if region.contains(*p) {
                let g = u.evaluate(c, *xi)?.gradients;
                disk_samples.push((SymTensor2::sym_grad([g[0], g[1]]).norm(), sn));
            }
        }
    }
    let quad = ErrorQuadrature::new(2 * disc.pair().velocity_degree(), None)?;
    let divergence = divergence_norm(&u, &quad);

    let newtonian_difference = if cfg.cavity.compare_newtonian.unwrap_or(false) {
        let (x0, h) = newton_solve(&problem(activated(0.0, m0)), disc.initial_state(0.0), &newton)
            .map_err(|e| e.context("cavity with delta_s = 0"))?;
        ctx.report.diagnostics.push(vec!["delta_s=0".into(), h.iterations().to_string(), format!("{:.3e}", h.final_residual())]);
        let d = velocity_difference(&disc, &x0, &x_newt)?;
        ctx.report.add("delta_s0_vs_newtonian_rel_l2", format!("{d:.3e}"));
        ctx.vtk(&disc, &x_newt, "cavity_newtonian.vtk")?;
        Some(d)
    } else {
        None
    };
    ctx.vtk(&disc, &x, "cavity_activated.vtk")?;

    let px = cfg.cavity.profile_x.unwrap_or(0.65);
    let np = cfg.cavity.profile_points.unwrap_or(101);
    let (mut ys, mut abs_s, mut abs_d) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..np {
        let y = if np == 1 { 0.5 } else { i as f64 / (np - 1) as f64 };
        let ev_s = s.evaluate_at([px, y])?.values;
        let g = u.evaluate_at([px, y])?.gradients;
        ys.push(y);
        abs_s.push(SymTensor2::new(ev_s[0], ev_s[1], ev_s[2]).norm());
        abs_d.push(SymTensor2::sym_grad([g[0], g[1]]).norm());
    }
    let p = ctx.path("cavity_profile.csv");
    write_series_csv(&p, &[("y", &ys), ("abs_S", &abs_s), ("abs_D", &abs_d)])?;

    ctx.report.add("max_abs_S", format!("{max_stress:.6e}"));
    ctx.report.add("div_u_L2", format!("{divergence:.3e}"));
    ctx.report.add("disk_samples", disk_samples.len());
    Ok(Findings::Cavity(CavityFindings {
        stages,
        disk_samples,
        max_stress,
        newtonian_difference,
        divergence,
    }))
}

fn couette_disc(ctx: &mut Ctx, n: usize) -> Result<Arc<Discretization>> {
    let mesh = ctx.mesh(n)?;
    let zero = Arc::new(|_: [f64; 2], _: f64| [0.0, 0.0]);
    Ok(Arc::new(Discretization::new(
        &mesh,
        ctx.cfg.element_pair(),
        DiscretizationOptions {
            dirichlet: vec![
                DirichletCondition::new(&[markers::LEFT, markers::RIGHT], &[1], zero.clone()),
                DirichletCondition::new(&[markers::TOP, markers::BOTTOM], &[0, 1], zero),
            ],
            pressure_nullspace: false,
            quadrature_degree: ctx.cfg.discretization.quadrature_degree,
            ..Default::default()
        },
    )?))
}

fn couette(ctx: &mut Ctx) -> Result<Findings> {
    let cfg = ctx.cfg;
    ctx.report.diagnostics_header =
        ["run", "step", "time", "newton_iters", "residual", "energy_residual", "Q"].map(String::from).to_vec();
    if cfg.model.kind != Some(ModelKind::Bingham) {
        return Err(RunError::Config("couette-cessation needs the bingham model".into()));
    }
    let m = cfg.model.m.ok_or_else(|| RunError::Config("model.m is required".into()))?;
    let n = cfg.levels()[0];
    let disc = couette_disc(ctx, n)?;
    let tau = cfg.time.tau.as_ref().and_then(|t| t.first().copied()).unwrap_or(1e-3);
    let t_final = cfg.time.t_final.unwrap_or(2.0);
    let threshold = cfg.couette.threshold.unwrap_or(1e-4);
    let section = cfg.couette.section.unwrap_or(0.5);
    let couette_profile = |x: [f64; 2]| [1.0 - x[1], 0.0];
    let q0 = flow_rate(&disc.velocity_space().interpolate(couette_profile)?, section)?;
    let x0 = l2_div_project(&disc, couette_profile)?;
    ctx.report.add("Q0", format!("{q0:.15}"));
    ctx.report.add("Q_projected_initial", format!("{:.15}", flow_rate(&disc.velocity_field(&x0), section)?));

    // positive Bingham numbers first, so the Newtonian run can stop at their latest cessation time
    let mut order: Vec<f64> = cfg.couette.bn.clone().unwrap_or_default();
    order.sort_by(|a, b| b.total_cmp(a));
    let mut runs = Vec::new();
    let mut horizon: Option<f64> = None;
    for bn in order {
        let t_end = if bn == 0.0 { horizon.unwrap_or(t_final) } else { t_final };
        let grid = TimeGrid::new(tau, (t_end / tau).round() * tau)?;
        let stepper = TimeStepper {
            disc: disc.clone(),
            law: Arc::new(ConstitutiveModel::BinghamPapanastasiou { bn, m }),
            params: FlowParams {
                convection: cfg.discretization.convection.unwrap_or(true),
                b_variant: cfg.b_variant(),
                penalty: cfg.discretization.penalty.unwrap_or(0.0),
                ..Default::default()
            },
            forcing: None,
            newton: NewtonOptions {
                nullspace: false,
                ..cfg.newton_options()
            },
            grid,
            energy_check: true,
            extrapolate: cfg.time.extrapolate.unwrap_or(true),
        };
        let label = format!("Bn{bn}");
        let mut run = CouetteRun {
            bn,
            q0,
            times: vec![0.0],
            flow_rates: vec![q0],
            cessation_time: None,
            max_energy_residual: 0.0,
        };
        let (mut x, mut older): (Vec<f64>, Option<Vec<f64>>) = (x0.clone(), None);
        for j in 1..=grid.steps {
            let guess = match (&older, stepper.extrapolate) {
                (Some(o), true) => x.iter().zip(o).map(|(a, b)| 2.0 * a - b).collect(),
                _ => x.clone(),
            };
            let (xn, d) = stepper.step_from(&x, guess, j).map_err(|e| e.context(format!("Couette {label}")))?;
            let q = flow_rate(&disc.velocity_field(&xn), section)?;
            ctx.step_row(&label, &d, &format!("{q:.6e}"));
            run.times.push(d.time);
            run.flow_rates.push(q);
            run.max_energy_residual = run.max_energy_residual.max(d.energy_residual().unwrap_or(0.0).abs());
            older = Some(std::mem::replace(&mut x, xn));
            if q < threshold * q0 {
                run.cessation_time = Some(d.time);
                break;
            }
        }
        if bn > 0.0 {
            if let Some(t) = run.cessation_time {
                horizon = Some(horizon.map_or(t, |h: f64| h.max(t)));
            }
        }
        ctx.report.add(
            format!("cessation_time_{label}"),
            run.cessation_time.map_or("none".to_string(), |t| format!("{t:.6}")),
        );
        let p = ctx.path(&format!("couette_Q_{label}.csv"));
        write_series_csv(&p, &[("t", &run.times), ("Q", &run.flow_rates)])?;
        ctx.vtk(&disc, &x, &format!("couette_{label}_final.vtk"))?;
        runs.push(run);
    }
    runs.sort_by(|a, b| a.bn.total_cmp(&b.bn));
    Ok(Findings::Couette(runs))
}

fn infsup(ctx: &mut Ctx) -> Result<Findings> {
    let cfg = ctx.cfg;
    let mut rows = Vec::new();
    let (mut names, mut ns, mut beta, mut gamma) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &pair in cfg.infsup.pairs.as_deref().unwrap_or(&[]) {
        let pair = pair_of(pair, cfg.discretization.k.unwrap_or(1));
        for &n in cfg.levels() {
            let velocity_pressure = infsup_probe(pair, n)?;
            let stress_velocity = match pair {
                ElementPair::EqualOrderP1 => None,
                _ => Some(stress_infsup_probe(pair, n)?),
            };
            ctx.report.add(format!("beta_{}_n{n}", pair.name()), format!("{velocity_pressure:.6}"));
            names.push(pair.name());
            ns.push(n as f64);
            beta.push(velocity_pressure);
            gamma.push(stress_velocity.unwrap_or(f64::NAN));
            rows.push(InfsupRow {
                pair,
                n,
                velocity_pressure,
                stress_velocity,
            });
        }
    }
    let p = ctx.path("infsup.csv");
    let mut text = String::from("pair,n,beta_velocity_pressure,beta_stress_velocity\n");
    for (((name, n), b), g) in names.iter().zip(&ns).zip(&beta).zip(&gamma) {
        text.push_str(&format!("{name},{n},{b},{}\n", if g.is_nan() { String::new() } else { g.to_string() }));
    }
    std::fs::write(p, text)?;
    Ok(Findings::Infsup(rows))
}

fn graph(ctx: &mut Ctx) -> Result<Findings> {
    let cfg = ctx.cfg;
    let samples = cfg.graph.samples.unwrap_or(10_000);
    let seed = cfg.graph.seed.unwrap_or(7);
    let max_norm = cfg.graph.max_norm.unwrap_or(50.0);
    let models = match cfg.model.kind {
        Some(_) => vec![cfg.model()?],
        None => reference_models(),
    };
    let mut results = Vec::new();
    for model in models {
        results.extend(graph_checks(&model, samples, seed, max_norm));
    }
    ctx.report.diagnostics_header = vec!["check".into(), "result".into(), "detail".into()];
    for r in &results {
        ctx.report.diagnostics.push(vec![
            format!("\"{}\"", r.name),
            if r.passed { "pass" } else { "FAIL" }.into(),
            r.detail.clone(),
        ]);
    }
    Ok(Findings::Graph(results))
}

/// Convenience for tests and scripts: resolve and run an in-memory config.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let resolved = cfg.resolve()?;
    run(
        &resolved,
        &RunSettings {
            out: Some(out.to_path_buf()),
            dump_mesh: false,
        },
    )
}
