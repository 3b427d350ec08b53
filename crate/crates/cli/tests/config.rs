use std::path::Path;

use rheoflow_cli::config::{Experiment, Pair};
use rheoflow_cli::RunConfig;
use rheoflow_core::constitutive::ConstitutiveModel;
use rheoflow_core::forms::ElementPair;

const ALL: [Experiment; 7] = [
    Experiment::CarreauSteady,
    Experiment::CarreauUnsteady,
    Experiment::PenaltyStudy,
    Experiment::CavityActivated,
    Experiment::CouetteCessation,
    Experiment::InfsupProbe,
    Experiment::GraphCheck,
];

#[test]
fn resolved_echo_resolves_to_itself() {
    for e in ALL {
        let resolved = RunConfig::for_experiment(e).resolve().unwrap();
        let echo = RunConfig::parse(&resolved.to_toml()).unwrap();
        assert_eq!(echo, resolved, "{}", e.name());
        assert_eq!(echo.resolve().unwrap(), resolved, "{}", e.name());
    }
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|x| x == "toml") {
            RunConfig::load(&path).and_then(|c| c.resolve()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= ALL.len());
}

#[test]
fn defaults_follow_the_experiment() {
    let steady = RunConfig::for_experiment(Experiment::CarreauSteady).resolve().unwrap();
    assert_eq!(steady.levels(), [1, 2, 4, 8, 16, 32]);
    assert_eq!(steady.element_pair(), ElementPair::ScottVogelius { k: 1 });

    let pen = RunConfig::for_experiment(Experiment::PenaltyStudy).resolve().unwrap();
    assert_eq!(pen.discretization.pair, Some(Pair::TaylorHood));
    assert_eq!(pen.penalty.values.as_deref(), Some(&[1.0, 0.0][..]));
    assert!(matches!(pen.model().unwrap(), ConstitutiveModel::Carreau { r, .. } if r == 1.3));

    let unsteady = RunConfig::for_experiment(Experiment::CarreauUnsteady).resolve().unwrap();
    let taus = unsteady.time.tau.clone().unwrap();
    assert_eq!(taus.len(), unsteady.levels().len());
    assert!(taus.windows(2).all(|w| w[1] < w[0]));

    let cavity = RunConfig::for_experiment(Experiment::CavityActivated).resolve().unwrap();
    assert!(matches!(cavity.model().unwrap(), ConstitutiveModel::ActivatedEulerNs { .. }));
}

#[test]
fn user_values_survive_resolution() {
    let cfg = RunConfig::parse(
        "experiment = \"carreau-steady\"\n[mesh]\nlevels = [2, 4]\n[model]\nkind = \"carreau\"\nr = 1.8\n",
    )
    .unwrap()
    .resolve()
    .unwrap();
    assert_eq!(cfg.levels(), [2, 4]);
    assert_eq!(cfg.model.r, Some(1.8));
}

#[test]
fn invalid_configs_are_rejected() {
    let cases = [
        "experiment = \"nope\"",
        "experiment = \"carreau-steady\"\nunknown = 1",
        "experiment = \"carreau-steady\"\n[mesh]\nlevels = []",
        "experiment = \"carreau-steady\"\n[mesh]\nlevels = [4, 2]",
        "experiment = \"carreau-steady\"\n[model]\nkind = \"carreau\"\nr = 0.9",
        "experiment = \"carreau-steady\"\n[solution]\na = 0.5",
        "experiment = \"penalty-study\"\n[mesh]\nlevels = [1, 2]",
        "experiment = \"penalty-study\"\n[penalty]\nvalues = [-1.0]",
        "experiment = \"carreau-unsteady\"\n[time]\nt_final = -1.0",
        "experiment = \"couette-cessation\"\n[couette]\nthreshold = 2.0",
        "experiment = \"infsup-probe\"\n[mesh]\nlevels = [1, 2]",
    ];
    for text in cases {
        assert!(RunConfig::parse(text).and_then(|c| c.resolve()).is_err(), "accepted: {text}");
    }
}
