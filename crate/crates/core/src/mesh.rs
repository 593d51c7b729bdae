//! Triangulations and P1 finite-element primitives.
//!
//! The discrete maximum principle rests on two facts about the P1 stiffness
//! matrix on a nonobtuse mesh: off-diagonal entries are nonpositive and rows
//! sum to zero. Both survive multiplying each element contribution by a
//! positive weight, which is how the `exp(chi * Phi)` diffusion coefficient
//! enters ([`StiffnessAssembler`]).

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Tolerance on the right-angle test of [`nonobtuse_check`].
pub const ANGLE_TOL: f64 = 1e-12;

pub type Point = [f64; 2];

/// One real value per mesh node, in node-index order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodalField(Vec<f64>);

impl NodalField {
    pub fn new(values: Vec<f64>) -> Self {
        NodalField(values)
    }

    pub fn constant(n: usize, value: f64) -> Self {
        NodalField(vec![value; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self::constant(n, 0.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for NodalField {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for NodalField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for NodalField {
    fn from(v: Vec<f64>) -> Self {
        NodalField(v)
    }
}

/// A conforming triangulation with precomputed element geometry.
#[derive(Debug, Clone)]
pub struct TriMesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
    /// Gradients of the three local basis functions of each element.
    gradients: Vec<[Point; 3]>,
    /// Sorted neighbor lists, excluding the node itself.
    neighbors: Vec<Vec<usize>>,
    lumped: Vec<f64>,
}

impl TriMesh {
    /// Validates and builds a mesh. Triangles must be counterclockwise with
    /// positive area and every edge may be shared by at most two triangles.
    pub fn from_parts(nodes: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if nodes.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::Mesh("non-finite node coordinate".into()));
        }
        let n = nodes.len();
        let mut areas = Vec::with_capacity(triangles.len());
        let mut gradients = Vec::with_capacity(triangles.len());
        let mut edge_use: HashMap<(usize, usize), u8> = HashMap::new();
        let mut neighbors = vec![Vec::new(); n];
        let mut lumped = vec![0.0; n];

        for (e, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) || tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]
            {
                return Err(Error::Mesh(format!("triangle {e} has invalid vertices {tri:?}")));
            }
            let [p0, p1, p2] = tri.map(|v| nodes[v]);
            let twice_area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
            if !(twice_area > 0.0) {
                return Err(Error::Mesh(format!(
                    "triangle {e} has nonpositive signed area {}",
                    0.5 * twice_area
                )));
            }
            let inv = 1.0 / twice_area;
            gradients.push([
                [(p1[1] - p2[1]) * inv, (p2[0] - p1[0]) * inv],
                [(p2[1] - p0[1]) * inv, (p0[0] - p2[0]) * inv],
                [(p0[1] - p1[1]) * inv, (p1[0] - p0[0]) * inv],
            ]);
            let area = 0.5 * twice_area;
            areas.push(area);
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let count = edge_use.entry((a.min(b), a.max(b))).or_insert(0);
                *count += 1;
                if *count > 2 {
                    return Err(Error::Mesh(format!("edge ({a}, {b}) shared by >2 triangles")));
                }
                neighbors[a].push(b);
                neighbors[b].push(a);
                lumped[a] += area / 3.0;
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        Ok(TriMesh {
            nodes,
            triangles,
            areas,
            gradients,
            neighbors,
            lumped,
        })
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn neighbors(&self, a: usize) -> &[usize] {
        &self.neighbors[a]
    }

    /// Number of distinct edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Lumped mass `m_a`, the integral of the basis function of node `a`.
    pub fn lumped_masses(&self) -> &[f64] {
        &self.lumped
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn element_gradients(&self, e: usize) -> &[Point; 3] {
        &self.gradients[e]
    }

    /// Gradient of the P1 interpolant of `f` on element `e`.
    pub fn element_gradient_of(&self, e: usize, f: &[f64]) -> Point {
        let g = &self.gradients[e];
        let tri = self.triangles[e];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += f[tri[k]] * g[k][0];
            out[1] += f[tri[k]] * g[k][1];
        }
        out
    }

    /// `|| grad I_h f ||_{L2}` from exact element gradients.
    pub fn gradient_l2_norm(&self, f: &[f64]) -> f64 {
        (0..self.triangle_count())
            .map(|e| {
                let g = self.element_gradient_of(e, f);
                self.areas[e] * (g[0] * g[0] + g[1] * g[1])
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Interior angles of element `e`, in vertex order.
    pub fn angles(&self, e: usize) -> [f64; 3] {
        let tri = self.triangles[e];
        let mut out = [0.0; 3];
        for k in 0..3 {
            let p = self.nodes[tri[k]];
            let a = self.nodes[tri[(k + 1) % 3]];
            let b = self.nodes[tri[(k + 2) % 3]];
            let (u, v) = ([a[0] - p[0], a[1] - p[1]], [b[0] - p[0], b[1] - p[1]]);
            let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
            out[k] = cos.clamp(-1.0, 1.0).acos();
        }
        out
    }
}

/// Axis-aligned rectangle `(xmin, xmax) x (ymin, ymax)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Rect {
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    pub fn square(half_width: f64) -> Self {
        Rect::new(-half_width, half_width, -half_width, half_width)
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.xmin, self.xmax, self.ymin, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmax > self.xmin
            && self.ymax > self.ymin;
        if ok {
            Ok(())
        } else {
            Err(Error::Mesh(format!("degenerate bounds {self:?}")))
        }
    }
}

/// Direction of the diagonal splitting each grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Diagonal {
    /// Lower-left to upper-right.
    #[default]
    Forward,
    /// Upper-left to lower-right; the mirror image of `Forward` under `x -> -x`.
    Backward,
}

/// Uniform grid of `nx * ny` cells, each split into two right triangles.
///
/// Node `(i, j)` has index `j * (nx + 1) + i` and coordinates
/// `(xmin + i * hx, ymin + j * hy)`.
#[derive(Debug, Clone)]
pub struct StructuredTriMesh {
    mesh: TriMesh,
    pub bounds: Rect,
    pub nx: usize,
    pub ny: usize,
    pub diagonal: Diagonal,
}

impl StructuredTriMesh {
    pub fn hx(&self) -> f64 {
        (self.bounds.xmax - self.bounds.xmin) / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        (self.bounds.ymax - self.bounds.ymin) / self.ny as f64
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Index of the node mirrored under `x -> xmin + xmax - x`.
    pub fn mirror_x(&self, a: usize) -> usize {
        let (i, j) = (a % (self.nx + 1), a / (self.nx + 1));
        self.node_index(self.nx - i, j)
    }

    pub fn as_tri_mesh(&self) -> &TriMesh {
        &self.mesh
    }
}

impl Deref for StructuredTriMesh {
    type Target = TriMesh;

    fn deref(&self) -> &TriMesh {
        &self.mesh
    }
}

/// Structured mesh with the default diagonal orientation.
pub fn build_mesh(bounds: Rect, nx: usize, ny: usize) -> Result<StructuredTriMesh> {
    build_mesh_with(bounds, nx, ny, Diagonal::Forward)
}

pub fn build_mesh_with(
    bounds: Rect,
    nx: usize,
    ny: usize,
    diagonal: Diagonal,
) -> Result<StructuredTriMesh> {
    bounds.validate()?;
    if nx == 0 || ny == 0 {
        return Err(Error::Mesh(format!("cell counts must be >= 1, got {nx} x {ny}")));
    }
    let hx = (bounds.xmax - bounds.xmin) / nx as f64;
    let hy = (bounds.ymax - bounds.ymin) / ny as f64;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        let y = if j == ny { bounds.ymax } else { bounds.ymin + j as f64 * hy };
        for i in 0..=nx {
            let x = if i == nx { bounds.xmax } else { bounds.xmin + i as f64 * hx };
            nodes.push([x, y]);
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (sw, se, ne, nw) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            match diagonal {
                Diagonal::Forward => {
                    triangles.push([sw, se, ne]);
                    triangles.push([sw, ne, nw]);
                }
                Diagonal::Backward => {
                    triangles.push([sw, se, nw]);
                    triangles.push([se, ne, nw]);
                }
            }
        }
    }
    Ok(StructuredTriMesh {
        mesh: TriMesh::from_parts(nodes, triangles)?,
        bounds,
        nx,
        ny,
        diagonal,
    })
}

/// Lumped mass vector: `m_a = sum over elements containing a of area / 3`.
pub fn lumped_mass(mesh: &TriMesh) -> NodalField {
    NodalField::new(mesh.lumped_masses().to_vec())
}

/// Discrete inner product `sum_a f(a) g(a) m_a`.
pub fn lumped_inner(mesh: &TriMesh, f: &[f64], g: &[f64]) -> Result<f64> {
    let n = mesh.node_count();
    for len in [f.len(), g.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    Ok(mesh
        .lumped_masses()
        .iter()
        .zip(f.iter().zip(g))
        .map(|(m, (a, b))| m * a * b)
        .sum())
}

/// Result of [`nonobtuse_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleReport {
    pub nonobtuse: bool,
    pub worst_angle: f64,
    pub worst_element: usize,
}

/// Checks that no interior angle exceeds a right angle (up to [`ANGLE_TOL`]).
pub fn nonobtuse_check(mesh: &TriMesh) -> AngleReport {
    let mut report = AngleReport {
        nonobtuse: true,
        worst_angle: 0.0,
        worst_element: 0,
    };
    for e in 0..mesh.triangle_count() {
        for angle in mesh.angles(e) {
            if angle > report.worst_angle {
                report.worst_angle = angle;
                report.worst_element = e;
            }
        }
    }
    report.nonobtuse = report.worst_angle <= FRAC_PI_2 + ANGLE_TOL;
    report
}

/// Nodal interpolant of `f`.
pub fn nodal_interpolate(f: impl Fn(f64, f64) -> f64, mesh: &TriMesh) -> Result<NodalField> {
    let values: Vec<f64> = mesh.nodes().iter().map(|p| f(p[0], p[1])).collect();
    if let Some(a) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite sample {} at node {a}",
            values[a]
        )));
    }
    Ok(NodalField::new(values))
}

/// Reusable assembly of the weighted stiffness matrix
/// `S[a][b] = sum_e w_e * area_e * grad phi_a . grad phi_b`
/// with one weight `w_e = exp(chi * mean of the nodal phi on e)` per element.
///
/// The sparsity pattern and the unweighted element matrices are computed once.
/// Off-diagonal entries are accumulated from the element matrices; each
/// diagonal entry is then set to minus its row's off-diagonal sum, which is
/// the same value in exact arithmetic and keeps row sums at round-off level.
#[derive(Debug, Clone)]
pub struct StiffnessAssembler {
    pattern: CsrMatrix,
    /// Per element, the storage slots of the pairs (0,1), (1,2), (2,0).
    edge_slots: Vec<[[usize; 2]; 3]>,
    /// Per element, the unweighted couplings of the same pairs.
    edge_values: Vec<[f64; 3]>,
    diag_slots: Vec<usize>,
    triangles: Vec<[usize; 3]>,
}

impl StiffnessAssembler {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        let n = mesh.node_count();
        let pattern_rows: Vec<Vec<usize>> = (0..n)
            .map(|a| {
                let mut row = mesh.neighbors(a).to_vec();
                row.push(a);
                row
            })
            .collect();
        let pattern = CsrMatrix::from_pattern(&pattern_rows)?;
        let mut edge_slots = Vec::with_capacity(mesh.triangle_count());
        let mut edge_values = Vec::with_capacity(mesh.triangle_count());
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let g = mesh.element_gradients(e);
            let area = mesh.areas()[e];
            let mut slots = [[0usize; 2]; 3];
            let mut vals = [0.0; 3];
            for k in 0..3 {
                let (i, j) = (k, (k + 1) % 3);
                let (a, b) = (tri[i], tri[j]);
                slots[k] = [pattern.slot(a, b).unwrap(), pattern.slot(b, a).unwrap()];
                vals[k] = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
            }
            edge_slots.push(slots);
            edge_values.push(vals);
        }
        let diag_slots = (0..n).map(|a| pattern.slot(a, a).unwrap()).collect();
        Ok(StiffnessAssembler {
            pattern,
            edge_slots,
            edge_values,
            diag_slots,
            triangles: mesh.triangles().to_vec(),
        })
    }

    /// Zero matrix with the stiffness sparsity pattern.
    pub fn pattern(&self) -> &CsrMatrix {
        &self.pattern
    }

    pub fn assemble(&self, phi: &[f64], chi: f64) -> Result<CsrMatrix> {
        let mut out = self.pattern.clone();
        self.assemble_into(phi, chi, &mut out)?;
        Ok(out)
    }

    /// Overwrites `out`, which must share this assembler's pattern.
    pub fn assemble_into(&self, phi: &[f64], chi: f64, out: &mut CsrMatrix) -> Result<()> {
        let n = self.diag_slots.len();
        if phi.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: phi.len(),
            });
        }
        if out.nnz() != self.pattern.nnz() || out.dim() != n {
            return Err(Error::Domain("output matrix does not match the stiffness pattern".into()));
        }
        let values = out.values_mut();
        values.iter_mut().for_each(|v| *v = 0.0);
        for (e, tri) in self.triangles.iter().enumerate() {
            let mean = (phi[tri[0]] + phi[tri[1]] + phi[tri[2]]) / 3.0;
            let w = (chi * mean).exp();
            for k in 0..3 {
                let v = w * self.edge_values[e][k];
                let [s_ab, s_ba] = self.edge_slots[e][k];
                values[s_ab] += v;
                values[s_ba] += v;
            }
        }
        let offsets = self.pattern.row_offsets();
        for a in 0..n {
            let d = self.diag_slots[a];
            let off: f64 = (offsets[a]..offsets[a + 1])
                .filter(|&k| k != d)
                .map(|k| values[k])
                .sum();
            values[d] = -off;
        }
        Ok(())
    }
}

/// One-shot weighted stiffness assembly, see [`StiffnessAssembler`].
pub fn weighted_stiffness(mesh: &TriMesh, phi: &[f64], chi: f64) -> Result<CsrMatrix> {
    StiffnessAssembler::new(mesh)?.assemble(phi, chi)
}
