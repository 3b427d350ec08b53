//! CSV tables, legacy VTK snapshots and plain-text run reports.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rheoflow_core::analysis::ErrorTable;
use rheoflow_core::constitutive::SymTensor2;
use rheoflow_core::forms::Discretization;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Rates per norm, blank on the first row, and an `Expected` footer when set.
pub fn write_csv_table(table: &ErrorTable, path: &Path) -> io::Result<()> {
    if table.rows.is_empty() {
        return Err(invalid("cannot write an empty error table"));
    }
    let mut out = String::new();
    let time = table.has_time_column();
    out.push_str("h_n");
    if time {
        out.push_str(",tau_m");
    }
    for n in &table.norms {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (row, rates) in table.rows.iter().zip(table.rates()) {
        write!(out, "{}", row.h).unwrap();
        if time {
            out.push(',');
            if let Some(t) = row.tau {
                write!(out, "{t}").unwrap();
            }
        }
        for r in rates {
            out.push(',');
            if let Some(r) = r {
                write!(out, "{r}").unwrap();
            }
        }
        out.push('\n');
    }
    if let Some(expected) = &table.expected {
        out.push_str("Expected");
        if time {
            out.push(',');
        }
        for e in expected {
            match e {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push_str(",-"),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Raw errors per level, one column per norm.
pub fn write_error_csv(table: &ErrorTable, path: &Path) -> io::Result<()> {
    let mut out = String::from("h_n,tau_m");
    for n in &table.norms {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for row in &table.rows {
        write!(out, "{},", row.h).unwrap();
        if let Some(t) = row.tau {
            write!(out, "{t}").unwrap();
        }
        for e in &row.errors {
            write!(out, ",{e}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// A parsed CSV: header plus rows, where blank cells and dashes are `None`
/// and the leading label of a footer row is kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<(Option<String>, Vec<Option<f64>>)>,
}

pub fn read_csv_table(path: &Path) -> io::Result<CsvTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| invalid("empty CSV"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(invalid(format!("row has {} cells, header has {}", cells.len(), header.len())));
        }
        let label = cells[0].parse::<f64>().is_err().then(|| cells[0].to_string());
        let values = cells
            .iter()
            .map(|c| match c.trim() {
                "" | "-" => Ok(None),
                s => s.parse::<f64>().map(Some).or_else(|_| if label.is_some() { Ok(None) } else { Err(()) }),
            })
            .collect::<Result<Vec<_>, ()>>()
            .map_err(|_| invalid(format!("unparsable row: {line}")))?;
        rows.push((label, values));
    }
    Ok(CsvTable { header, rows })
}

/// Writes named columns of equal length.
pub fn write_series_csv(path: &Path, columns: &[(&str, &[f64])]) -> io::Result<()> {
    let n = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != n) {
        return Err(invalid("series columns differ in length"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
    writeln!(w, "{}", names.join(","))?;
    for i in 0..n {
        let row: Vec<String> = columns.iter().map(|c| c.1[i].to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

const REFERENCE_VERTICES: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

/// Legacy ASCII unstructured grid on the computational mesh: velocity and
/// pressure at the vertices, stress components, |S| and |D| per cell
/// (evaluated at the centroid).
pub fn write_vtk(disc: &Discretization, x: &[f64], path: &Path) -> io::Result<()> {
    if x.len() != disc.num_unknowns() {
        return Err(invalid(format!("state has {} entries, expected {}", x.len(), disc.num_unknowns())));
    }
    let err = |e: rheoflow_core::Error| invalid(e.to_string());
    let mesh = disc.mesh();
    let (u, p, s) = (disc.velocity_field(x), disc.pressure_field(x), disc.stress_field(x));
    let nv = mesh.num_vertices();
    let nc = mesh.num_cells();

    let mut vel = vec![[0.0; 2]; nv];
    let mut pres = vec![0.0; nv];
    for c in 0..nc {
        for (a, &v) in mesh.cells()[c].iter().enumerate() {
            let xi = REFERENCE_VERTICES[a];
            let ue = u.evaluate(c, xi).map_err(err)?;
            vel[v] = [ue.values[0], ue.values[1]];
            pres[v] = p.evaluate(c, xi).map_err(err)?.values[0];
        }
    }
    let centroid = [1.0 / 3.0, 1.0 / 3.0];
    let mut stress = Vec::with_capacity(nc);
    let mut strain = Vec::with_capacity(nc);
    for c in 0..nc {
        let se = s.evaluate(c, centroid).map_err(err)?;
        stress.push(SymTensor2::new(se.values[0], se.values[1], se.values[2]));
        let g = u.evaluate(c, centroid).map_err(err)?.gradients;
        strain.push(SymTensor2::sym_grad([g[0], g[1]]));
    }

    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "rheoflow {}", disc.pair().name())?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {nv} double")?;
    for v in mesh.vertices() {
        writeln!(w, "{:e} {:e} 0", v[0], v[1])?;
    }
    writeln!(w, "CELLS {nc} {}", 4 * nc)?;
    for c in mesh.cells() {
        writeln!(w, "3 {} {} {}", c[0], c[1], c[2])?;
    }
    writeln!(w, "CELL_TYPES {nc}")?;
    for _ in 0..nc {
        writeln!(w, "5")?;
    }
    writeln!(w, "POINT_DATA {nv}")?;
    writeln!(w, "VECTORS u double")?;
    for v in &vel {
        writeln!(w, "{:e} {:e} 0", v[0], v[1])?;
    }
    scalars(&mut w, "p", &pres)?;
    writeln!(w, "CELL_DATA {nc}")?;
    let comp = |f: fn(&SymTensor2) -> f64, t: &[SymTensor2]| t.iter().map(f).collect::<Vec<_>>();
    scalars(&mut w, "S_xx", &comp(|t| t.to_array()[0], &stress))?;
    scalars(&mut w, "S_yy", &comp(|t| t.to_array()[1], &stress))?;
    scalars(&mut w, "S_xy", &comp(|t| t.to_array()[2], &stress))?;
    scalars(&mut w, "abs_S", &comp(|t| t.norm(), &stress))?;
    scalars(&mut w, "abs_D", &comp(|t| t.norm(), &strain))?;
    w.flush()
}

fn scalars<W: Write>(w: &mut W, name: &str, data: &[f64]) -> io::Result<()> {
    writeln!(w, "SCALARS {name} double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in data {
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}

/// Plain-text key-value report.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub config: String,
    /// Free-form `key = value` lines.
    pub summary: Vec<(String, String)>,
    /// Header and rows of the per-step (or per-solve) diagnostics.
    pub diagnostics_header: Vec<String>,
    pub diagnostics: Vec<Vec<String>>,
    pub wall_clock: f64,
    pub threads: usize,
}

impl RunReport {
    pub fn add(&mut self, key: impl Into<String>, value: impl ToString) {
        self.summary.push((key.into(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(out, "threads = {}", self.threads).unwrap();
        writeln!(out, "wall_clock_s = {:.3}", self.wall_clock).unwrap();
        for (k, v) in &self.summary {
            writeln!(out, "{k} = {v}").unwrap();
        }
        if !self.diagnostics_header.is_empty() {
            writeln!(out, "\n[diagnostics]\n{}", self.diagnostics_header.join(" ")).unwrap();
            for row in &self.diagnostics {
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
        writeln!(out, "\n[config]\n{}", self.config.trim_end()).unwrap();
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.render())
    }
}
