//! First-order sensitivity of the diagram with respect to site positions.
//!
//! Every diagram vertex moves smoothly when the sites move (under the
//! non-degeneracy assumptions), and its velocity is a linear map of the
//! site displacements. This module computes those 2x2 Jacobian blocks and
//! assembles from them the gradients of cell areas and edge lengths as
//! sparse vectors over site coordinates.

use crate::error::{Error, Result};
use crate::geometry::{Cell, Diagram, EdgeKind, Point2, SiteSet, VertexProvenance};

/// Row-major 2x2 matrix mapping a site displacement to a vertex velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jacobian2x2 {
    pub m: [[f64; 2]; 2],
}

impl Jacobian2x2 {
    pub const ZERO: Jacobian2x2 = Jacobian2x2 { m: [[0.0; 2]; 2] };
    pub const IDENTITY: Jacobian2x2 = Jacobian2x2 { m: [[1.0, 0.0], [0.0, 1.0]] };

    /// Outer product `u v^T` scaled by `1/den`.
    fn outer_scaled(u: Point2, v: Point2, den: f64) -> Jacobian2x2 {
        Jacobian2x2 {
            m: [
                [u.x * v.x / den, u.x * v.y / den],
                [u.y * v.x / den, u.y * v.y / den],
            ],
        }
    }

    pub fn mul_vec(&self, v: Point2) -> Point2 {
        Point2::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y,
            self.m[1][0] * v.x + self.m[1][1] * v.y,
        )
    }

    /// `self^T v`; used to push a covector through the block.
    pub fn transpose_mul_vec(&self, v: Point2) -> Point2 {
        Point2::new(
            self.m[0][0] * v.x + self.m[1][0] * v.y,
            self.m[0][1] * v.x + self.m[1][1] * v.y,
        )
    }

    pub fn add(&self, other: &Jacobian2x2) -> Jacobian2x2 {
        let mut m = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                m[r][c] = self.m[r][c] + other.m[r][c];
            }
        }
        Jacobian2x2 { m }
    }
}

/// The velocity map of one vertex: one block per generating site
/// (three for interior vertices, two for boundary vertices, none for
/// corners). Blocks are sorted by site index.
#[derive(Clone, Debug)]
pub struct VertexJacobians {
    pub vertex: Point2,
    pub prov: VertexProvenance,
    pub blocks: Vec<(usize, Jacobian2x2)>,
}

impl VertexJacobians {
    /// Velocity of the vertex under the full perturbation `delta`
    /// (flat `[dx0, dy0, dx1, dy1, ...]`). Corners return zero.
    pub fn velocity(&self, delta: &[f64]) -> Point2 {
        let mut v = Point2::ZERO;
        for &(s, ref block) in &self.blocks {
            let d = Point2::new(delta[2 * s], delta[2 * s + 1]);
            v = v + block.mul_vec(d);
        }
        v
    }
}

/// Velocity of a vertex under a full site perturbation (corners are fixed).
pub fn vertex_velocity(jac: &VertexJacobians, delta: &[f64]) -> Point2 {
    jac.velocity(delta)
}

/// Jacobian blocks of an interior vertex `v` generated by sites `i, j, k`.
///
/// The block for site `s` is `(a_p - a_q)^perp (v - a_s)^T / Q` with
/// `{p, q}` the other two sites and `Q = det[(a_q - a_p); (a_s - a_p)]`,
/// which is symmetric in `p, q`.
pub fn interior_vertex_jacobians(
    sites: &SiteSet,
    v: Point2,
    i: usize,
    j: usize,
    k: usize,
) -> Result<VertexJacobians> {
    let l = sites.domain.side;
    let threshold = sites.eps_deg() * l * l;
    let mut blocks = Vec::with_capacity(3);
    for (s, p, q) in [(i, j, k), (j, k, i), (k, i, j)] {
        let (a_s, a_p, a_q) = (sites.site(s), sites.site(p), sites.site(q));
        let den = (a_q - a_p).cross(a_s - a_p);
        if den.abs() <= threshold {
            return Err(Error::DegenerateVertex(format!(
                "interior vertex ({i},{j},{k}) has near-collinear sites (det {den:.3e})"
            )));
        }
        blocks.push((s, Jacobian2x2::outer_scaled((a_p - a_q).perp(), v - a_s, den)));
    }
    blocks.sort_by_key(|&(s, _)| s);
    Ok(VertexJacobians { vertex: v, prov: VertexProvenance::Interior { i, j, k }, blocks })
}

/// Jacobian blocks of a boundary vertex `v` where the bisector of sites
/// `i, j` meets the given domain side.
///
/// The block for site `s` is
/// `-grad(phi)^perp (v - a_s)^T / det[(a_o - a_s); grad(phi)]` with `o` the
/// other site; both blocks map into the tangent line of the side.
pub fn boundary_vertex_jacobians(
    sites: &SiteSet,
    v: Point2,
    i: usize,
    j: usize,
    side: crate::geometry::Side,
) -> Result<VertexJacobians> {
    let normal = side.outward_normal();
    let threshold = sites.eps_deg() * sites.domain.side;
    let mut blocks = Vec::with_capacity(2);
    for (s, o) in [(i, j), (j, i)] {
        let (a_s, a_o) = (sites.site(s), sites.site(o));
        let den = (a_o - a_s).cross(normal);
        if den.abs() <= threshold {
            return Err(Error::DegenerateVertex(format!(
                "boundary vertex ({i},{j},{side}) nearly tangent to the side (det {den:.3e})"
            )));
        }
        blocks.push((s, Jacobian2x2::outer_scaled(-normal.perp(), v - a_s, den)));
    }
    blocks.sort_by_key(|&(s, _)| s);
    Ok(VertexJacobians {
        vertex: v,
        prov: VertexProvenance::Boundary { i: i.min(j), j: i.max(j), side },
        blocks,
    })
}

/// Jacobian blocks for any cell vertex, dispatching on its provenance.
pub fn cell_vertex_jacobians(
    sites: &SiteSet,
    vertex: &crate::geometry::CellVertex,
) -> Result<VertexJacobians> {
    match vertex.prov {
        VertexProvenance::Interior { i, j, k } => {
            interior_vertex_jacobians(sites, vertex.pos, i, j, k)
        }
        VertexProvenance::Boundary { i, j, side } => {
            boundary_vertex_jacobians(sites, vertex.pos, i, j, side)
        }
        VertexProvenance::Corner { .. } => Ok(VertexJacobians {
            vertex: vertex.pos,
            prov: vertex.prov,
            blocks: Vec::new(),
        }),
    }
}

/// A gradient over site coordinates that touches only a few sites.
/// Entries are kept sorted by site index; accumulation is additive.
#[derive(Clone, Debug, Default)]
pub struct SparseGradient {
    entries: Vec<(usize, Point2)>,
}

impl SparseGradient {
    pub fn new() -> Self {
        SparseGradient { entries: Vec::new() }
    }

    pub fn add(&mut self, site: usize, v: Point2) {
        match self.entries.binary_search_by_key(&site, |e| e.0) {
            Ok(pos) => {
                let cur = self.entries[pos].1;
                self.entries[pos].1 = cur + v;
            }
            Err(pos) => self.entries.insert(pos, (site, v)),
        }
    }

    pub fn entries(&self) -> &[(usize, Point2)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Directional derivative along the full perturbation `delta`.
    pub fn dot(&self, delta: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(s, v)| v.x * delta[2 * s] + v.y * delta[2 * s + 1])
            .sum()
    }

    /// Adds `scale` times this gradient into a dense gradient vector.
    pub fn scatter_into(&self, dense: &mut [f64], scale: f64) {
        for &(s, v) in &self.entries {
            dense[2 * s] += scale * v.x;
            dense[2 * s + 1] += scale * v.y;
        }
    }

    pub fn get(&self, site: usize) -> Point2 {
        match self.entries.binary_search_by_key(&site, |e| e.0) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => Point2::ZERO,
        }
    }
}

/// Gradient of the area of cell `i` with respect to all site coordinates.
///
/// Each interior edge `E` against neighbor `k` contributes
/// `|E| (p_E - a_i) / |a_i - a_k|` to the slot of `i` and
/// `-|E| (p_E - a_k) / |a_i - a_k|` to the slot of `k`, with `p_E` the
/// edge midpoint. Boundary edges contribute nothing.
pub fn area_gradient(diagram: &Diagram, sites: &SiteSet, i: usize) -> SparseGradient {
    let cell = &diagram.cells[i];
    let a_i = sites.site(i);
    let mut grad = SparseGradient::new();
    for (e, edge) in cell.edges.iter().enumerate() {
        if let EdgeKind::Interior { neighbor } = edge.kind {
            let (v, w) = cell.edge_endpoints(e);
            let len = v.dist(w);
            let p_e = (v + w) * 0.5;
            let a_k = sites.site(neighbor);
            let sep = a_i.dist(a_k);
            grad.add(i, (p_e - a_i) * (len / sep));
            grad.add(neighbor, (p_e - a_k) * (-len / sep));
        }
    }
    grad
}

/// Gradient of the length of one edge of a cell over the (up to four)
/// sites that move its endpoints: `d|E| = F(i, w_E) . tau - F(i, v_E) . tau`
/// with `tau` the unit edge direction in counterclockwise cell order.
pub fn edge_length_gradient(
    diagram: &Diagram,
    sites: &SiteSet,
    cell_idx: usize,
    edge_idx: usize,
) -> Result<SparseGradient> {
    let cell = &diagram.cells[cell_idx];
    let edge = &cell.edges[edge_idx];
    let (v, w) = cell.edge_endpoints(edge_idx);
    let len = v.dist(w);
    let tau = (w - v) * (1.0 / len);
    let jac_v = cell_vertex_jacobians(sites, &cell.vertices[edge.start])?;
    let jac_w = cell_vertex_jacobians(sites, &cell.vertices[edge.end])?;
    let mut grad = SparseGradient::new();
    for &(s, ref block) in &jac_w.blocks {
        grad.add(s, block.transpose_mul_vec(tau));
    }
    for &(s, ref block) in &jac_v.blocks {
        grad.add(s, -block.transpose_mul_vec(tau));
    }
    Ok(grad)
}

/// Jacobians of every vertex of a cell, computed once for reuse across the
/// cell's edges. Fails on the first degenerate vertex.
pub fn cell_jacobians(sites: &SiteSet, cell: &Cell) -> Result<Vec<VertexJacobians>> {
    cell.vertices.iter().map(|v| cell_vertex_jacobians(sites, v)).collect()
}
