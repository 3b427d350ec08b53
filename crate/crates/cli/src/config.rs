//! Run configuration: TOML with one table per concern.
//!
//! Every field is optional in the file. [`RunConfig::resolve`] fills in the
//! per-experiment defaults and checks the result, and the resolved config is
//! what the run report echoes, so feeding the echo back reproduces the run.

use std::path::{Path, PathBuf};

use rheoflow_core::constitutive::{ConstitutiveModel, Disk};
use rheoflow_core::forms::{BVariant, ElementPair};
use rheoflow_core::mesh::DiagonalPattern;
use rheoflow_core::solver::NewtonOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    CarreauSteady,
    CarreauUnsteady,
    PenaltyStudy,
    CavityActivated,
    CouetteCessation,
    InfsupProbe,
    GraphCheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::CarreauSteady => "carreau-steady",
            Experiment::CarreauUnsteady => "carreau-unsteady",
            Experiment::PenaltyStudy => "penalty-study",
            Experiment::CavityActivated => "cavity-activated",
            Experiment::CouetteCessation => "couette-cessation",
            Experiment::InfsupProbe => "infsup-probe",
            Experiment::GraphCheck => "graph-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pair {
    ScottVogelius,
    TaylorHood,
    P1P1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Right,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convective {
    Auto,
    Skew,
    DivFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Newtonian,
    Carreau,
    Bingham,
    Activated,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    /// Subdivisions per side, one solve each.
    pub levels: Option<Vec<usize>>,
    pub pattern: Option<Pattern>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    pub pair: Option<Pair>,
    pub k: Option<usize>,
    pub convection: Option<bool>,
    pub b_variant: Option<Convective>,
    pub penalty: Option<f64>,
    pub quadrature_degree: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<ModelKind>,
    pub nu: Option<f64>,
    pub eps: Option<f64>,
    pub r: Option<f64>,
    pub bn: Option<f64>,
    pub m: Option<f64>,
    pub delta_s: Option<f64>,
    pub center: Option<[f64; 2]>,
    pub radius_sq: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionSection {
    pub a: Option<f64>,
    pub b: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub t_final: Option<f64>,
    /// One step size per mesh level.
    pub tau: Option<Vec<f64>>,
    /// Store every `thin`-th state; 0 keeps only the endpoints.
    pub thin: Option<usize>,
    pub steady_tol: Option<f64>,
    pub extrapolate: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSection {
    pub abs_tol: Option<f64>,
    pub rel_tol: Option<f64>,
    pub max_iterations: Option<usize>,
    pub max_halvings: Option<usize>,
    /// Solve the Newtonian problem first and start from its solution.
    pub warm_start: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSection {
    /// Values of δ_s, solved in order at the first M.
    pub delta_s: Option<Vec<f64>>,
    /// Values of the regularization parameter M, solved in order at the last δ_s.
    pub m: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySection {
    /// Also solve with δ_s = 0 and with the Newtonian law and compare.
    pub compare_newtonian: Option<bool>,
    /// Vertical line on which |S| and |D| are sampled.
    pub profile_x: Option<f64>,
    pub profile_points: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouetteSection {
    pub bn: Option<Vec<f64>>,
    /// Cessation is declared once Q(t) < threshold·Q(0).
    pub threshold: Option<f64>,
    pub section: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfsupSection {
    pub pairs: Option<Vec<Pair>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub max_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub vtk: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub mesh: MeshSection,
    #[serde(default)]
    pub discretization: DiscretizationSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub solution: SolutionSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub newton: NewtonSection,
    #[serde(default)]
    pub continuation: ContinuationSection,
    #[serde(default)]
    pub penalty: PenaltySection,
    #[serde(default)]
    pub cavity: CavitySection,
    #[serde(default)]
    pub couette: CouetteSection,
    #[serde(default)]
    pub infsup: InfsupSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// A config naming only the experiment; everything else defaults.
    pub fn for_experiment(experiment: Experiment) -> Self {
        RunConfig {
            experiment,
            mesh: Default::default(),
            discretization: Default::default(),
            model: Default::default(),
            solution: Default::default(),
            time: Default::default(),
            newton: Default::default(),
            continuation: Default::default(),
            penalty: Default::default(),
            cavity: Default::default(),
            couette: Default::default(),
            infsup: Default::default(),
            graph: Default::default(),
            output: Default::default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills every field the experiment uses with its default and validates.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut c = self.clone();
        let e = c.experiment;
        use Experiment::*;

        let default_levels: Vec<usize> = match e {
            CarreauSteady => vec![1, 2, 4, 8, 16, 32],
            // Taylor–Hood has a single interior velocity node at n = 1
            PenaltyStudy => vec![2, 4, 8, 16, 32],
            CarreauUnsteady => vec![1, 2, 4, 8, 16],
            CavityActivated | CouetteCessation => vec![16],
            InfsupProbe => vec![2, 4, 8],
            GraphCheck => vec![],
        };
        if e != GraphCheck {
            c.mesh.levels.get_or_insert(default_levels);
            c.mesh.pattern.get_or_insert(Pattern::Right);
        }

        if matches!(e, InfsupProbe) {
            c.infsup.pairs.get_or_insert(vec![Pair::TaylorHood, Pair::ScottVogelius, Pair::P1P1]);
        }

        if !matches!(e, InfsupProbe | GraphCheck) {
            let d = &mut c.discretization;
            let pair = *d.pair.get_or_insert(match e {
                PenaltyStudy | CouetteCessation => Pair::TaylorHood,
                _ => Pair::ScottVogelius,
            });
            if pair == Pair::ScottVogelius {
                d.k.get_or_insert(1);
            }
            d.convection
                .get_or_insert(matches!(e, CarreauUnsteady | CavityActivated | CouetteCessation));
            d.b_variant.get_or_insert(Convective::Auto);
            if e != PenaltyStudy {
                d.penalty.get_or_insert(0.0);
            }
        }
        if e == PenaltyStudy {
            c.penalty.values.get_or_insert(vec![1.0, 0.0]);
        }

        let m = &mut c.model;
        match e {
            CarreauSteady | CarreauUnsteady | PenaltyStudy => {
                m.kind.get_or_insert(ModelKind::Carreau);
                m.nu.get_or_insert(0.5);
                m.eps.get_or_insert(1e-5);
                m.r.get_or_insert(match e {
                    CarreauSteady => 1.5,
                    CarreauUnsteady => 1.7,
                    _ => 1.3,
                });
                let r = m.r.unwrap();
                c.solution.a.get_or_insert(1.01);
                c.solution.b.get_or_insert(2.0 / r - 0.99);
            }
            CavityActivated => {
                m.kind.get_or_insert(ModelKind::Activated);
                m.nu.get_or_insert(0.5);
                m.delta_s.get_or_insert(2.5);
                m.m.get_or_insert(200.0);
                let disk = Disk::default();
                m.center.get_or_insert(disk.center);
                m.radius_sq.get_or_insert(disk.radius_sq);
                c.continuation.m.get_or_insert(vec![10.0, 50.0, 200.0]);
                c.continuation.delta_s.get_or_insert(vec![0.5, 1.0, 2.5]);
                c.cavity.compare_newtonian.get_or_insert(true);
                c.cavity.profile_x.get_or_insert(0.65);
                c.cavity.profile_points.get_or_insert(101);
            }
            CouetteCessation => {
                m.kind.get_or_insert(ModelKind::Bingham);
                m.m.get_or_insert(200.0);
                c.couette.bn.get_or_insert(vec![0.0, 2.0, 5.0, 20.0]);
                c.couette.threshold.get_or_insert(1e-4);
                c.couette.section.get_or_insert(0.5);
                c.time.t_final.get_or_insert(2.0);
                c.time.tau.get_or_insert(vec![1e-3]);
            }
            GraphCheck => {
                c.graph.samples.get_or_insert(10_000);
                c.graph.seed.get_or_insert(7);
                c.graph.max_norm.get_or_insert(50.0);
            }
            InfsupProbe => {}
        }

        if e == CarreauUnsteady {
            let levels = c.mesh.levels.clone().unwrap_or_default();
            c.time.t_final.get_or_insert(0.1);
            c.time.tau.get_or_insert(levels.iter().map(|&n| 0.002 / n as f64).collect());
            c.time.extrapolate.get_or_insert(true);
        }
        if matches!(e, CarreauUnsteady | CouetteCessation) {
            c.time.thin.get_or_insert(0);
            c.time.extrapolate.get_or_insert(true);
        }

        if !matches!(e, InfsupProbe | GraphCheck) {
            let defaults = NewtonOptions::default();
            let n = &mut c.newton;
            n.abs_tol.get_or_insert(defaults.abs_tol);
            n.rel_tol.get_or_insert(defaults.rel_tol);
            n.max_iterations.get_or_insert(defaults.max_iterations);
            n.max_halvings.get_or_insert(defaults.max_halvings);
            n.warm_start.get_or_insert(matches!(e, CarreauSteady | PenaltyStudy));
        }

        c.output.dir.get_or_insert_with(|| PathBuf::from("out").join(e.name()));
        c.output.vtk.get_or_insert(!matches!(e, InfsupProbe | GraphCheck));

        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let e = self.experiment;
        if let Some(levels) = &self.mesh.levels {
            if levels.is_empty() || levels.contains(&0) {
                return bad("mesh.levels must be a non-empty list of positive integers");
            }
            if levels.windows(2).any(|w| w[1] <= w[0]) {
                return bad("mesh.levels must be strictly increasing");
            }
            if e == Experiment::InfsupProbe && levels.iter().any(|&n| n > rheoflow_core::analysis::INFSUP_MAX_N) {
                return bad(format!(
                    "infsup-probe levels are limited to n ≤ {}",
                    rheoflow_core::analysis::INFSUP_MAX_N
                ));
            }
            let mut pairs: Vec<Pair> = self.discretization.pair.into_iter().collect();
            if e == Experiment::InfsupProbe {
                pairs.extend(self.infsup.pairs.iter().flatten());
            }
            if levels.contains(&1) && pairs.iter().any(|p| *p != Pair::ScottVogelius) {
                return bad("taylor-hood and p1-p1 need mesh levels n ≥ 2");
            }
        }
        if let Some(k) = self.discretization.k {
            if k == 0 {
                return bad("discretization.k must be at least 1");
            }
        }
        if let Some(p) = self.discretization.penalty {
            if !(p >= 0.0) {
                return bad("discretization.penalty must be non-negative");
            }
        }
        if let Some(values) = &self.penalty.values {
            if values.is_empty() || values.iter().any(|p| !(*p >= 0.0)) {
                return bad("penalty.values must be non-negative");
            }
        }
        if self.model.kind.is_some() {
            self.model()?.validate().map_err(|err| ConfigError(err.to_string()))?;
        }
        if let (Some(a), Some(b), Some(r)) = (self.solution.a, self.solution.b, self.model.r) {
            if !(a > 1.0) {
                return bad("solution.a must exceed 1");
            }
            if !(b > 2.0 / r - 1.0) {
                return bad("solution.b must exceed 2/r - 1");
            }
        }
        if let Some(tau) = &self.time.tau {
            let t_final = self.time.t_final.unwrap_or(f64::NAN);
            if !(t_final > 0.0) {
                return bad("time.t_final must be positive");
            }
            let expected = match e {
                Experiment::CarreauUnsteady => self.mesh.levels.as_ref().map_or(0, Vec::len),
                _ => 1,
            };
            if tau.len() != expected {
                return bad(format!("time.tau needs {expected} value(s), got {}", tau.len()));
            }
            for &t in tau {
                rheoflow_core::timestepper::TimeGrid::new(t, t_final).map_err(|err| ConfigError(err.to_string()))?;
            }
        }
        if let Some(tol) = self.time.steady_tol {
            if !(tol > 0.0) {
                return bad("time.steady_tol must be positive");
            }
        }
        if self.newton.abs_tol.is_some() {
            self.newton_options().validate().map_err(|err| ConfigError(err.to_string()))?;
        }
        for (name, list) in [("continuation.m", &self.continuation.m), ("continuation.delta_s", &self.continuation.delta_s)] {
            if let Some(v) = list {
                if v.is_empty() || v.iter().any(|x| !(*x >= 0.0)) {
                    return bad(format!("{name} must be a non-empty list of non-negative values"));
                }
            }
        }
        if let Some(bn) = &self.couette.bn {
            if bn.is_empty() || bn.iter().any(|b| !(*b >= 0.0)) {
                return bad("couette.bn must be a non-empty list of non-negative values");
            }
        }
        if let Some(t) = self.couette.threshold {
            if !(t > 0.0 && t < 1.0) {
                return bad("couette.threshold must lie in (0, 1)");
            }
        }
        if let Some(s) = self.couette.section {
            if !(s > 0.0 && s < 1.0) {
                return bad("couette.section must lie in (0, 1)");
            }
        }
        if let Some(x) = self.cavity.profile_x {
            if !(x > 0.0 && x < 1.0) {
                return bad("cavity.profile_x must lie in (0, 1)");
            }
        }
        if self.cavity.profile_points == Some(0) || self.graph.samples == Some(0) {
            return bad("sample counts must be positive");
        }
        if let Some(m) = self.graph.max_norm {
            if !(m > 1e-4) {
                return bad("graph.max_norm must exceed 1e-4");
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> &[usize] {
        self.mesh.levels.as_deref().unwrap_or(&[])
    }

    pub fn pattern(&self) -> DiagonalPattern {
        match self.mesh.pattern {
            Some(Pattern::Left) => DiagonalPattern::Left,
            _ => DiagonalPattern::Right,
        }
    }

    pub fn element_pair(&self) -> ElementPair {
        pair_of(self.discretization.pair.unwrap_or(Pair::ScottVogelius), self.discretization.k.unwrap_or(1))
    }

    pub fn b_variant(&self) -> BVariant {
        match self.discretization.b_variant.unwrap_or(Convective::Auto) {
            Convective::Skew => BVariant::Skew,
            Convective::DivFree => BVariant::DivFree,
            Convective::Auto => rheoflow_core::forms::select_b_variant(self.element_pair(), false),
        }
    }

    /// The configured law; missing parameters are a config error.
    pub fn model(&self) -> Result<ConstitutiveModel, ConfigError> {
        let m = &self.model;
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| ConfigError(format!("model.{name} is required")));
        Ok(match m.kind {
            Some(ModelKind::Newtonian) => ConstitutiveModel::Newtonian { nu: need(m.nu, "nu")? },
            Some(ModelKind::Carreau) => ConstitutiveModel::Carreau {
                nu: need(m.nu, "nu")?,
                eps: need(m.eps, "eps")?,
                r: need(m.r, "r")?,
            },
            Some(ModelKind::Bingham) => ConstitutiveModel::BinghamPapanastasiou {
                bn: m.bn.or_else(|| self.couette.bn.as_ref().and_then(|v| v.first().copied())).unwrap_or(0.0),
                m: need(m.m, "m")?,
            },
            Some(ModelKind::Activated) => ConstitutiveModel::ActivatedEulerNs {
                nu: need(m.nu, "nu")?,
                delta_s: need(m.delta_s, "delta_s")?,
                m: need(m.m, "m")?,
                region: Disk {
                    center: m.center.unwrap_or(Disk::default().center),
                    radius_sq: need(m.radius_sq, "radius_sq")?,
                },
            },
            None => return bad("model.kind is required"),
        })
    }

    pub fn newton_options(&self) -> NewtonOptions {
        let d = NewtonOptions::default();
        NewtonOptions {
            abs_tol: self.newton.abs_tol.unwrap_or(d.abs_tol),
            rel_tol: self.newton.rel_tol.unwrap_or(d.rel_tol),
            max_iterations: self.newton.max_iterations.unwrap_or(d.max_iterations),
            max_halvings: self.newton.max_halvings.unwrap_or(d.max_halvings),
            ..d
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

pub fn pair_of(pair: Pair, k: usize) -> ElementPair {
    match pair {
        Pair::ScottVogelius => ElementPair::ScottVogelius { k },
        Pair::TaylorHood => ElementPair::TaylorHood,
        Pair::P1P1 => ElementPair::EqualOrderP1,
    }
}
