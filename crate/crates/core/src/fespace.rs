//! Continuous and discontinuous Lagrange spaces on triangles.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{Point, TriMesh};
use crate::quadrature::QuadratureRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Continuous,
    Discontinuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueShape {
    Scalar,
    Vector,
    /// Symmetric 2×2 tensor stored as (t11, t22, t12).
    SymTensor,
}

impl ValueShape {
    pub fn components(self) -> usize {
        match self {
            ValueShape::Scalar => 1,
            ValueShape::Vector => 2,
            ValueShape::SymTensor => 3,
        }
    }
}

/// Lagrange basis of degree `k` on the reference triangle, nodes on the
/// barycentric lattice α with |α| = k.
///
/// Local node order: the three vertices, then the interior nodes of each edge
/// (edge `i` is opposite vertex `i`, traversed from vertex i+1 to i+2), then
/// cell-interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeElement {
    degree: usize,
    lattice: Vec<[usize; 3]>,
}

/// Where a local node sits on the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeEntity {
    Vertex(usize),
    /// Local edge index and position counted from the edge's first vertex.
    Edge(usize, usize),
    Interior(usize),
}

impl LagrangeElement {
    pub fn new(degree: usize) -> Self {
        let k = degree;
        let mut lattice = Vec::new();
        if k == 0 {
            lattice.push([0, 0, 0]);
            return LagrangeElement { degree, lattice };
        }
        for i in 0..3 {
            let mut a = [0; 3];
            a[i] = k;
            lattice.push(a);
        }
        for i in 0..3 {
            let (p, q) = ((i + 1) % 3, (i + 2) % 3);
            for m in 1..k {
                let mut a = [0; 3];
                a[q] = m;
                a[p] = k - m;
                lattice.push(a);
            }
        }
        for a1 in 1..k {
            for a2 in 1..k {
                if a1 + a2 < k {
                    lattice.push([k - a1 - a2, a1, a2]);
                }
            }
        }
        LagrangeElement { degree, lattice }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_nodes(&self) -> usize {
        self.lattice.len()
    }

    pub fn node_entity(&self, a: usize) -> NodeEntity {
        let k = self.degree;
        if k == 0 {
            return NodeEntity::Interior(0);
        }
        let per_edge = k - 1;
        if a < 3 {
            NodeEntity::Vertex(a)
        } else if a < 3 + 3 * per_edge {
            let e = (a - 3) / per_edge;
            NodeEntity::Edge(e, (a - 3) % per_edge)
        } else {
            NodeEntity::Interior(a - 3 - 3 * per_edge)
        }
    }

    pub fn node_reference_point(&self, a: usize) -> Point {
        if self.degree == 0 {
            return [1.0 / 3.0, 1.0 / 3.0];
        }
        let k = self.degree as f64;
        let al = self.lattice[a];
        [al[1] as f64 / k, al[2] as f64 / k]
    }

    /// Basis values and reference gradients at `xi`.
    pub fn tabulate(&self, xi: Point, values: &mut [f64], grads: &mut [[f64; 2]]) {
        let k = self.degree;
        if k == 0 {
            values[0] = 1.0;
            grads[0] = [0.0, 0.0];
            return;
        }
        let lam = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
        let kf = k as f64;
        for (a, alpha) in self.lattice.iter().enumerate() {
            let mut f = [0.0; 3];
            let mut df = [0.0; 3];
            for i in 0..3 {
                (f[i], df[i]) = lattice_factor(alpha[i], kf, lam[i]);
            }
            values[a] = f[0] * f[1] * f[2];
            let dl = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
            grads[a] = [dl[1] - dl[0], dl[2] - dl[0]];
        }
    }

    pub fn tabulate_rule(&self, rule: &QuadratureRule) -> Tabulation {
        let n = self.num_nodes();
        let mut values = vec![0.0; rule.len() * n];
        let mut grads = vec![[0.0; 2]; rule.len() * n];
        for (q, p) in rule.points.iter().enumerate() {
            self.tabulate(*p, &mut values[q * n..(q + 1) * n], &mut grads[q * n..(q + 1) * n]);
        }
        Tabulation {
            num_basis: n,
            values,
            ref_grads: grads,
        }
    }
}

/// Π_{j<m} (k s - j)/(j + 1) and its derivative in s.
fn lattice_factor(m: usize, k: f64, s: f64) -> (f64, f64) {
    let mut value = 1.0;
    let mut deriv = 0.0;
    for j in 0..m {
        let jf = j as f64;
        let factor = (k * s - jf) / (jf + 1.0);
        let dfactor = k / (jf + 1.0);
        deriv = deriv * factor + value * dfactor;
        value *= factor;
    }
    (value, deriv)
}

/// Basis values and reference gradients at the points of a quadrature rule.
#[derive(Debug, Clone)]
pub struct Tabulation {
    pub num_basis: usize,
    values: Vec<f64>,
    ref_grads: Vec<[f64; 2]>,
}

impl Tabulation {
    #[inline]
    pub fn values(&self, q: usize) -> &[f64] {
        &self.values[q * self.num_basis..(q + 1) * self.num_basis]
    }

    #[inline]
    pub fn ref_grads(&self, q: usize) -> &[[f64; 2]] {
        &self.ref_grads[q * self.num_basis..(q + 1) * self.num_basis]
    }
}

#[derive(Debug, Clone)]
pub struct FunctionSpace {
    mesh: Arc<TriMesh>,
    family: Family,
    shape: ValueShape,
    element: LagrangeElement,
    cell_nodes: Vec<usize>,
    node_points: Vec<Point>,
    boundary_nodes: BTreeMap<u32, Vec<usize>>,
}

impl FunctionSpace {
    pub fn new(mesh: Arc<TriMesh>, family: Family, degree: usize, shape: ValueShape) -> Result<Self> {
        if family == Family::Continuous && degree == 0 {
            return Err(Error::invalid("continuous Lagrange spaces need degree >= 1"));
        }
        let element = LagrangeElement::new(degree);
        let nloc = element.num_nodes();
        let ncells = mesh.num_cells();
        let mut cell_nodes = vec![0usize; ncells * nloc];
        let mut boundary_nodes = BTreeMap::new();
        let num_nodes;
        match family {
            Family::Discontinuous => {
                for (i, n) in cell_nodes.iter_mut().enumerate() {
                    *n = i;
                }
                num_nodes = ncells * nloc;
            }
            Family::Continuous => {
                let nv = mesh.num_vertices();
                let edges = mesh.edges();
                let per_edge = degree - 1;
                let per_cell = nloc - 3 - 3 * per_edge;
                let edge_base = nv;
                let interior_base = nv + edges.edges.len() * per_edge;
                for c in 0..ncells {
                    let cell = mesh.cells()[c];
                    for a in 0..nloc {
                        cell_nodes[c * nloc + a] = match element.node_entity(a) {
                            NodeEntity::Vertex(i) => cell[i],
                            NodeEntity::Edge(e, m) => {
                                let (p, q) = (cell[(e + 1) % 3], cell[(e + 2) % 3]);
                                let m = if p < q { m } else { per_edge - 1 - m };
                                edge_base + edges.cell_edges[c][e] * per_edge + m
                            }
                            NodeEntity::Interior(i) => interior_base + c * per_cell + i,
                        };
                    }
                }
                num_nodes = interior_base + ncells * per_cell;

                for f in mesh.facets() {
                    let [a, b] = f.vertices;
                    let key = [a.min(b), a.max(b)];
                    let e = edges
                        .edges
                        .binary_search(&key)
                        .map_err(|_| Error::invalid("facet is not a mesh edge"))?;
                    let list: &mut Vec<usize> = boundary_nodes.entry(f.marker).or_default();
                    list.extend([a, b]);
                    list.extend((0..per_edge).map(|m| edge_base + e * per_edge + m));
                }
                for list in boundary_nodes.values_mut() {
                    list.sort_unstable();
                    list.dedup();
                }
            }
        }
        let mut node_points = vec![[0.0; 2]; num_nodes];
        for c in 0..ncells {
            let map = mesh.cell_map(c);
            for a in 0..nloc {
                node_points[cell_nodes[c * nloc + a]] = map.apply(element.node_reference_point(a));
            }
        }
        Ok(FunctionSpace {
            mesh,
            family,
            shape,
            element,
            cell_nodes,
            node_points,
            boundary_nodes,
        })
    }

    pub fn mesh(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn shape(&self) -> ValueShape {
        self.shape
    }

    pub fn degree(&self) -> usize {
        self.element.degree()
    }

    pub fn element(&self) -> &LagrangeElement {
        &self.element
    }

    pub fn components(&self) -> usize {
        self.shape.components()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_points.len()
    }

    pub fn dim(&self) -> usize {
        self.num_nodes() * self.components()
    }

    pub fn nodes_per_cell(&self) -> usize {
        self.element.num_nodes()
    }

    pub fn dofs_per_cell(&self) -> usize {
        self.nodes_per_cell() * self.components()
    }

    pub fn node_points(&self) -> &[Point] {
        &self.node_points
    }

    #[inline]
    pub fn cell_nodes(&self, c: usize) -> &[usize] {
        let n = self.nodes_per_cell();
        &self.cell_nodes[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn dof(&self, node: usize, comp: usize) -> usize {
        node * self.components() + comp
    }

    /// Global dofs of cell `c`, ordered node-major (node a, component i) → a·ncomp + i.
    pub fn cell_dofs(&self, c: usize, out: &mut Vec<usize>) {
        out.clear();
        let nc = self.components();
        for &node in self.cell_nodes(c) {
            out.extend((0..nc).map(|i| node * nc + i));
        }
    }

    /// Nodes on facets carrying any of `markers` (continuous spaces only).
    pub fn boundary_nodes(&self, markers: &[u32]) -> Vec<usize> {
        let mut out: Vec<usize> = markers
            .iter()
            .filter_map(|m| self.boundary_nodes.get(m))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Nodal interpolant of `f`; `N` must equal the number of components.
    pub fn interpolate<const N: usize, F>(self: &Arc<Self>, f: F) -> Result<DiscreteField>
    where
        F: Fn(Point) -> [f64; N],
    {
        if N != self.components() {
            return Err(Error::invalid(format!(
                "interpolating {N} components into a space with {}",
                self.components()
            )));
        }
        let mut coeffs = vec![0.0; self.dim()];
        for (node, &x) in self.node_points.iter().enumerate() {
            let v = f(x);
            for (i, vi) in v.iter().enumerate() {
                if !vi.is_finite() {
                    return Err(Error::NonFinite { location: x, value: *vi });
                }
                coeffs[node * N + i] = *vi;
            }
        }
        Ok(DiscreteField {
            space: Arc::clone(self),
            coeffs,
        })
    }

    pub fn zero_field(self: &Arc<Self>) -> DiscreteField {
        DiscreteField {
            space: Arc::clone(self),
            coeffs: vec![0.0; self.dim()],
        }
    }
}

/// Values and physical gradients of a field at one point, per component.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEvaluation {
    pub values: Vec<f64>,
    pub gradients: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct DiscreteField {
    space: Arc<FunctionSpace>,
    coeffs: Vec<f64>,
}

impl DiscreteField {
    pub fn new(space: Arc<FunctionSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.dim() {
            return Err(Error::invalid(format!(
                "coefficient length {} does not match space dimension {}",
                coeffs.len(),
                space.dim()
            )));
        }
        Ok(DiscreteField { space, coeffs })
    }

    pub fn space(&self) -> &Arc<FunctionSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Value and physical gradient in cell `cell` at reference point `xi`.
    pub fn evaluate(&self, cell: usize, xi: Point) -> Result<PointEvaluation> {
        const TOL: f64 = 1e-12;
        if !(xi[0] >= -TOL && xi[1] >= -TOL && xi[0] + xi[1] <= 1.0 + TOL) {
            return Err(Error::invalid(format!(
                "reference point ({}, {}) outside the reference triangle",
                xi[0], xi[1]
            )));
        }
        if cell >= self.space.mesh().num_cells() {
            return Err(Error::invalid(format!("cell {cell} out of range")));
        }
        let el = self.space.element();
        let n = el.num_nodes();
        let mut phi = vec![0.0; n];
        let mut dphi = vec![[0.0; 2]; n];
        el.tabulate(xi, &mut phi, &mut dphi);
        let map = self.space.mesh().cell_map(cell);
        let nc = self.space.components();
        let mut values = vec![0.0; nc];
        let mut gradients = vec![[0.0; 2]; nc];
        for (a, &node) in self.space.cell_nodes(cell).iter().enumerate() {
            let g = map.push_gradient(dphi[a]);
            for i in 0..nc {
                let c = self.coeffs[node * nc + i];
                values[i] += c * phi[a];
                gradients[i][0] += c * g[0];
                gradients[i][1] += c * g[1];
            }
        }
        Ok(PointEvaluation { values, gradients })
    }

    /// Evaluates at a physical point by locating the containing cell.
    pub fn evaluate_at(&self, x: Point) -> Result<PointEvaluation> {
        let (cell, xi) = self
            .space
            .mesh()
            .locate(x)
            .ok_or_else(|| Error::invalid(format!("point ({}, {}) outside the mesh", x[0], x[1])))?;
        self.evaluate(cell, xi)
    }
}
