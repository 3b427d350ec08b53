use rheoflow_cli::output::{read_csv_table, write_csv_table, write_error_csv, write_vtk, RunReport};
use rheoflow_core::analysis::ErrorTable;
use rheoflow_core::forms::{Discretization, DiscretizationOptions, ElementPair};
use rheoflow_core::mesh::{DiagonalPattern, TriMesh};

fn table() -> ErrorTable {
    let mut t = ErrorTable::new(&["a", "b"]);
    for n in [1, 2, 4] {
        let h = 1.0 / n as f64;
        t.push(h, None, vec![3.0 * h, h * h]).unwrap();
    }
    t.expected = Some(vec![Some(1.0), None]);
    t
}

#[test]
fn csv_roundtrip_has_blank_first_rate_and_footer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_csv_table(&table(), &path).unwrap();
    let csv = read_csv_table(&path).unwrap();
    assert_eq!(csv.header, ["h_n", "a", "b"]);
    assert_eq!(csv.rows.len(), 4);
    assert_eq!(csv.rows[0].1, vec![Some(1.0), None, None]);
    for row in &csv.rows[1..3] {
        assert!((row.1[1].unwrap() - 1.0).abs() < 1e-12);
        assert!((row.1[2].unwrap() - 2.0).abs() < 1e-12);
    }
    let footer = &csv.rows[3];
    assert_eq!(footer.0.as_deref(), Some("Expected"));
    assert_eq!(footer.1[1..], [Some(1.0), None]);
}

#[test]
fn single_row_table_has_only_blank_rates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let mut t = ErrorTable::new(&["a"]);
    t.push(0.5, Some(0.01), vec![0.1]).unwrap();
    write_csv_table(&t, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "h_n,tau_m,a\n0.5,0.01,\n");
}

#[test]
fn empty_table_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(write_csv_table(&ErrorTable::new(&["a"]), &dir.path().join("t.csv")).is_err());
}

#[test]
fn error_csv_keeps_raw_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    write_error_csv(&table(), &path).unwrap();
    let csv = read_csv_table(&path).unwrap();
    assert_eq!(csv.rows[2].1, vec![Some(0.25), None, Some(0.75), Some(0.0625)]);
}

fn section<'a>(lines: &'a [&'a str], name: &str, n: usize) -> Vec<f64> {
    let at = lines.iter().position(|l| *l == format!("SCALARS {name} double 1")).unwrap();
    lines[at + 2..at + 2 + n].iter().map(|l| l.parse().unwrap()).collect()
}

#[test]
fn vtk_counts_and_stress_magnitude() {
    let mesh = TriMesh::unit_square(3, DiagonalPattern::Left).unwrap();
    let disc = Discretization::new(&mesh, ElementPair::TaylorHood, DiscretizationOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.vtk");

    let zero = vec![0.0; disc.num_unknowns()];
    write_vtk(&disc, &zero, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let nc = disc.mesh().num_cells();
    assert!(lines.contains(&format!("POINTS {} double", disc.mesh().num_vertices()).as_str()));
    assert!(lines.contains(&format!("CELLS {nc} {}", 4 * nc).as_str()));
    assert!(lines.contains(&format!("CELL_DATA {nc}").as_str()));
    assert!(section(&lines, "abs_S", nc).iter().all(|v| *v == 0.0));
    assert!(section(&lines, "p", disc.mesh().num_vertices()).iter().all(|v| *v == 0.0));

    let x: Vec<f64> = (0..disc.num_unknowns()).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
    write_vtk(&disc, &x, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let (xx, yy, xy, abs) = (
        section(&lines, "S_xx", nc),
        section(&lines, "S_yy", nc),
        section(&lines, "S_xy", nc),
        section(&lines, "abs_S", nc),
    );
    for c in 0..nc {
        let norm = (xx[c] * xx[c] + yy[c] * yy[c] + 2.0 * xy[c] * xy[c]).sqrt();
        assert!((norm - abs[c]).abs() <= 1e-5 * norm.max(1e-300), "cell {c}");
    }

    assert!(write_vtk(&disc, &x[1..], &path).is_err());
}

#[test]
fn report_lists_summary_diagnostics_and_config() {
    let mut r = RunReport {
        config: "experiment = \"graph-check\"\n".into(),
        diagnostics_header: vec!["step".into(), "res".into()],
        diagnostics: vec![vec!["1".into(), "1e-9".into()]],
        threads: 1,
        ..Default::default()
    };
    r.add("max", 3.5);
    let text = r.render();
    assert!(text.contains("max = 3.5\n"));
    assert!(text.contains("[diagnostics]\nstep res\n1 1e-9\n"));
    assert!(text.ends_with("[config]\nexperiment = \"graph-check\"\n"));
}
