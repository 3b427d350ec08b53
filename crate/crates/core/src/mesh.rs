//! Conforming triangulations of the unit square.

use std::collections::HashMap;
use std::io::Write;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Boundary side markers of [`TriMesh::unit_square`].
pub mod markers {
    pub const BOTTOM: u32 = 1;
    pub const RIGHT: u32 = 2;
    pub const TOP: u32 = 3;
    pub const LEFT: u32 = 4;
    pub const ALL: [u32; 4] = [BOTTOM, RIGHT, TOP, LEFT];
}

/// Direction of the diagonal splitting each square of a structured mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiagonalPattern {
    /// Lower-left to upper-right.
    #[default]
    Right,
    /// Lower-right to upper-left.
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFacet {
    pub vertices: [usize; 2],
    pub marker: u32,
}

/// Affine map from the reference triangle (0,0),(1,0),(0,1) onto a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    /// Column-major: `matrix[r][c]`, columns are the edge vectors v1-v0 and v2-v0.
    pub matrix: [[f64; 2]; 2],
    pub offset: Point,
    pub det: f64,
}

impl AffineMap {
    pub fn from_vertices(v: [Point; 3]) -> Self {
        let matrix = [
            [v[1][0] - v[0][0], v[2][0] - v[0][0]],
            [v[1][1] - v[0][1], v[2][1] - v[0][1]],
        ];
        let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        AffineMap {
            matrix,
            offset: v[0],
            det,
        }
    }

    pub fn apply(&self, xi: Point) -> Point {
        let a = &self.matrix;
        [
            a[0][0] * xi[0] + a[0][1] * xi[1] + self.offset[0],
            a[1][0] * xi[0] + a[1][1] * xi[1] + self.offset[1],
        ]
    }

    /// Inverse of the linear part.
    pub fn inverse_matrix(&self) -> [[f64; 2]; 2] {
        let a = &self.matrix;
        let inv_det = 1.0 / self.det;
        [
            [a[1][1] * inv_det, -a[0][1] * inv_det],
            [-a[1][0] * inv_det, a[0][0] * inv_det],
        ]
    }

    pub fn inverse(&self) -> AffineMap {
        let m = self.inverse_matrix();
        let b = self.offset;
        AffineMap {
            matrix: m,
            offset: [
                -(m[0][0] * b[0] + m[0][1] * b[1]),
                -(m[1][0] * b[0] + m[1][1] * b[1]),
            ],
            det: 1.0 / self.det,
        }
    }

    pub fn to_reference(&self, x: Point) -> Point {
        let m = self.inverse_matrix();
        let d = [x[0] - self.offset[0], x[1] - self.offset[1]];
        [m[0][0] * d[0] + m[0][1] * d[1], m[1][0] * d[0] + m[1][1] * d[1]]
    }

    /// Maps a reference gradient to physical space: `J^{-T} g`.
    #[inline]
    pub fn push_gradient(&self, g: [f64; 2]) -> [f64; 2] {
        let m = self.inverse_matrix();
        [m[0][0] * g[0] + m[1][0] * g[1], m[0][1] * g[0] + m[1][1] * g[1]]
    }
}

/// Unique edges of a mesh. Edge vertex pairs are sorted and the list is
/// lexicographic; `cell_edges[c][i]` is the edge opposite local vertex `i`.
#[derive(Debug, Clone)]
pub struct MeshEdges {
    pub edges: Vec<[usize; 2]>,
    pub cell_edges: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshMetrics {
    pub h_max: f64,
    pub shape_ratio_max: f64,
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Point>,
    cells: Vec<[usize; 3]>,
    facets: Vec<BoundaryFacet>,
    level: usize,
}

impl TriMesh {
    /// Builds a mesh from raw parts, checking orientation and conformity.
    pub fn new(
        vertices: Vec<Point>,
        cells: Vec<[usize; 3]>,
        facets: Vec<BoundaryFacet>,
        level: usize,
    ) -> Result<Self> {
        let mesh = TriMesh {
            vertices,
            cells,
            facets,
            level,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// `n × n` squares, each split into two triangles: 2n² cells, h = √2/n.
    pub fn unit_square(n: usize, pattern: DiagonalPattern) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("unit_square needs at least one cell per side"));
        }
        let stride = n + 1;
        let id = |i: usize, j: usize| j * stride + i;
        let h = 1.0 / n as f64;
        let mut vertices = Vec::with_capacity(stride * stride);
        for j in 0..=n {
            for i in 0..=n {
                // exact endpoints so boundary tests can compare against 0 and 1
                let x = if i == n { 1.0 } else { i as f64 * h };
                let y = if j == n { 1.0 } else { j as f64 * h };
                vertices.push([x, y]);
            }
        }
        let mut cells = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
                match pattern {
                    DiagonalPattern::Right => {
                        cells.push([v00, v10, v11]);
                        cells.push([v00, v11, v01]);
                    }
                    DiagonalPattern::Left => {
                        cells.push([v00, v10, v01]);
                        cells.push([v10, v11, v01]);
                    }
                }
            }
        }
        let mut facets = Vec::with_capacity(4 * n);
        for i in 0..n {
            facets.push(BoundaryFacet {
                vertices: [id(i, 0), id(i + 1, 0)],
                marker: markers::BOTTOM,
            });
        }
        for j in 0..n {
            facets.push(BoundaryFacet {
                vertices: [id(n, j), id(n, j + 1)],
                marker: markers::RIGHT,
            });
        }
        for i in (0..n).rev() {
            facets.push(BoundaryFacet {
                vertices: [id(i + 1, n), id(i, n)],
                marker: markers::TOP,
            });
        }
        for j in (0..n).rev() {
            facets.push(BoundaryFacet {
                vertices: [id(0, j + 1), id(0, j)],
                marker: markers::LEFT,
            });
        }
        Ok(TriMesh {
            vertices,
            cells,
            facets,
            level: n,
        })
    }

    /// Splits every cell into three by inserting its barycenter.
    pub fn barycentric_refine(&self) -> TriMesh {
        let nv = self.vertices.len();
        let mut vertices = self.vertices.clone();
        let mut cells = Vec::with_capacity(3 * self.cells.len());
        for (c, cell) in self.cells.iter().enumerate() {
            let [a, b, d] = cell.map(|v| self.vertices[v]);
            vertices.push([(a[0] + b[0] + d[0]) / 3.0, (a[1] + b[1] + d[1]) / 3.0]);
            let center = nv + c;
            cells.push([cell[0], cell[1], center]);
            cells.push([cell[1], cell[2], center]);
            cells.push([cell[2], cell[0], center]);
        }
        TriMesh {
            vertices,
            cells,
            facets: self.facets.clone(),
            level: self.level,
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn facets(&self) -> &[BoundaryFacet] {
        &self.facets
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn cell_vertices(&self, c: usize) -> [Point; 3] {
        self.cells[c].map(|v| self.vertices[v])
    }

    pub fn cell_map(&self, c: usize) -> AffineMap {
        AffineMap::from_vertices(self.cell_vertices(c))
    }

    pub fn cell_area(&self, c: usize) -> f64 {
        0.5 * self.cell_map(c).det
    }

    pub fn cell_diameter(&self, c: usize) -> f64 {
        let v = self.cell_vertices(c);
        (0..3)
            .map(|i| dist(v[i], v[(i + 1) % 3]))
            .fold(0.0, f64::max)
    }

    /// Diameter of the inscribed circle, 4·area/perimeter.
    pub fn cell_inscribed_diameter(&self, c: usize) -> f64 {
        let v = self.cell_vertices(c);
        let perimeter: f64 = (0..3).map(|i| dist(v[i], v[(i + 1) % 3])).sum();
        4.0 * self.cell_area(c) / perimeter
    }

    pub fn metrics(&self) -> MeshMetrics {
        let mut m = MeshMetrics {
            h_max: 0.0,
            shape_ratio_max: 0.0,
        };
        for c in 0..self.cells.len() {
            let h = self.cell_diameter(c);
            m.h_max = m.h_max.max(h);
            m.shape_ratio_max = m.shape_ratio_max.max(h / self.cell_inscribed_diameter(c));
        }
        m
    }

    pub fn total_area(&self) -> f64 {
        (0..self.cells.len()).map(|c| self.cell_area(c)).sum()
    }

    pub fn edges(&self) -> MeshEdges {
        let mut all: Vec<([usize; 2], usize, usize)> = Vec::with_capacity(3 * self.cells.len());
        for (c, cell) in self.cells.iter().enumerate() {
            for i in 0..3 {
                let (a, b) = (cell[(i + 1) % 3], cell[(i + 2) % 3]);
                all.push(([a.min(b), a.max(b)], c, i));
            }
        }
        all.sort_unstable();
        let mut edges = Vec::with_capacity(all.len() / 2 + 1);
        let mut cell_edges = vec![[usize::MAX; 3]; self.cells.len()];
        for (pair, c, i) in all {
            if edges.last() != Some(&pair) {
                edges.push(pair);
            }
            cell_edges[c][i] = edges.len() - 1;
        }
        MeshEdges { edges, cell_edges }
    }

    /// Checks positive orientation and conformity (every interior edge in two
    /// cells, boundary edges exactly the facet list).
    pub fn validate(&self) -> Result<()> {
        for (c, cell) in self.cells.iter().enumerate() {
            if cell.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::invalid(format!("cell {c} references a missing vertex")));
            }
            let det = self.cell_map(c).det;
            if !(det > 0.0) {
                return Err(Error::invalid(format!("cell {c} has non-positive Jacobian {det}")));
            }
        }
        let mut counts: HashMap<[usize; 2], usize> = HashMap::new();
        for cell in &self.cells {
            for i in 0..3 {
                let (a, b) = (cell[i], cell[(i + 1) % 3]);
                *counts.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        let mut boundary: Vec<[usize; 2]> = counts
            .iter()
            .filter_map(|(e, &n)| (n == 1).then_some(*e))
            .collect();
        if let Some((e, n)) = counts.iter().find(|(_, &n)| n > 2) {
            return Err(Error::invalid(format!("edge {e:?} shared by {n} cells")));
        }
        let mut tagged: Vec<[usize; 2]> = self
            .facets
            .iter()
            .map(|f| [f.vertices[0].min(f.vertices[1]), f.vertices[0].max(f.vertices[1])])
            .collect();
        boundary.sort_unstable();
        tagged.sort_unstable();
        if boundary != tagged {
            return Err(Error::invalid("boundary edges do not match the tagged facets"));
        }
        Ok(())
    }

    /// Finds a cell containing `x` and the reference coordinates of `x` in it.
    pub fn locate(&self, x: Point) -> Option<(usize, Point)> {
        const TOL: f64 = 1e-12;
        (0..self.cells.len()).find_map(|c| {
            let xi = self.cell_map(c).to_reference(x);
            let inside = xi[0] >= -TOL && xi[1] >= -TOL && xi[0] + xi[1] <= 1.0 + TOL;
            inside.then_some((c, xi))
        })
    }

    /// Plain-text dump: counts followed by vertex, cell and facet lines.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "vertices {}", self.vertices.len())?;
        for v in &self.vertices {
            writeln!(w, "{:.17e} {:.17e}", v[0], v[1])?;
        }
        writeln!(w, "cells {}", self.cells.len())?;
        for c in &self.cells {
            writeln!(w, "{} {} {}", c[0], c[1], c[2])?;
        }
        writeln!(w, "facets {}", self.facets.len())?;
        for f in &self.facets {
            writeln!(w, "{} {} {}", f.vertices[0], f.vertices[1], f.marker)?;
        }
        Ok(())
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
