//! Bounded Voronoi diagrams in a square domain.
//!
//! Cells are built one at a time by clipping the domain polygon against the
//! perpendicular bisectors of the owning site and its candidate neighbors.
//! Every vertex and edge of the result carries provenance: which sites and
//! which domain sides generated it. The sensitivity machinery depends on
//! this combinatorial data, not just on coordinates.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Relative factor for coincidence/degeneracy tolerances, scaled by the
/// domain side length.
pub const EPS_DEG_FACTOR: f64 = 1e-12;

/// A point (or vector) in the plane.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Counterclockwise rotation by pi/2: (x, y) -> (-y, x).
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    /// z-component of the cross product `self x other`.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn dist_sq(self, other: Point2) -> f64 {
        (self - other).norm_sq()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// One of the four sides of the square domain, in counterclockwise order.
///
/// Each side carries an affine level function that vanishes exactly on the
/// side and whose gradient is the outward unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Right, Side::Top, Side::Left];

    /// Outward unit normal of the side (the gradient of its level function).
    pub fn outward_normal(self) -> Point2 {
        match self {
            Side::Bottom => Point2::new(0.0, -1.0),
            Side::Right => Point2::new(1.0, 0.0),
            Side::Top => Point2::new(0.0, 1.0),
            Side::Left => Point2::new(-1.0, 0.0),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Bottom => 0,
            Side::Right => 1,
            Side::Top => 2,
            Side::Left => 3,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Side::Bottom => "bottom",
            Side::Right => "right",
            Side::Top => "top",
            Side::Left => "left",
        };
        write!(f, "{name}")
    }
}

/// The square domain `[0, side] x [0, side]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDomain {
    pub side: f64,
}

impl BoxDomain {
    pub fn new(side: f64) -> Self {
        BoxDomain { side }
    }

    /// `[0, sqrt(kappa0)]^2`, the domain used by all experiments.
    pub fn for_sites(kappa0: usize) -> Self {
        BoxDomain::new((kappa0 as f64).sqrt())
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    /// Level function of a side: negative inside the box, zero on the side.
    pub fn phi(&self, side: Side, p: Point2) -> f64 {
        match side {
            Side::Bottom => -p.y,
            Side::Right => p.x - self.side,
            Side::Top => p.y - self.side,
            Side::Left => -p.x,
        }
    }

    /// Corners in counterclockwise order starting at the origin.
    pub fn corners(&self) -> [Point2; 4] {
        let l = self.side;
        [
            Point2::new(0.0, 0.0),
            Point2::new(l, 0.0),
            Point2::new(l, l),
            Point2::new(0.0, l),
        ]
    }

    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        p.x >= -tol && p.y >= -tol && p.x <= self.side + tol && p.y <= self.side + tol
    }

    pub fn clamp(&self, p: Point2) -> Point2 {
        Point2::new(p.x.clamp(0.0, self.side), p.y.clamp(0.0, self.side))
    }
}

/// Generator positions plus the domain that clips their cells.
#[derive(Clone, Debug)]
pub struct SiteSet {
    /// Flat coordinates `[x0, y0, x1, y1, ...]`.
    pub coords: Vec<f64>,
    pub domain: BoxDomain,
}

impl SiteSet {
    pub fn new(coords: Vec<f64>, domain: BoxDomain) -> Self {
        assert!(coords.len() % 2 == 0, "coords must hold (x, y) pairs");
        SiteSet { coords, domain }
    }

    pub fn from_points(points: &[Point2], domain: BoxDomain) -> Self {
        let mut coords = Vec::with_capacity(points.len() * 2);
        for p in points {
            coords.push(p.x);
            coords.push(p.y);
        }
        SiteSet { coords, domain }
    }

    pub fn kappa0(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn site(&self, i: usize) -> Point2 {
        Point2::new(self.coords[2 * i], self.coords[2 * i + 1])
    }

    pub fn sites(&self) -> impl Iterator<Item = Point2> + '_ {
        (0..self.kappa0()).map(|i| self.site(i))
    }

    pub fn eps_deg(&self) -> f64 {
        EPS_DEG_FACTOR * self.domain.side
    }

    pub fn with_coords(&self, coords: Vec<f64>) -> SiteSet {
        SiteSet::new(coords, self.domain)
    }

    /// Checks the construction preconditions: finite coordinates, sites in
    /// the closed box, pairwise distances above the coincidence tolerance.
    pub fn validate(&self) -> Result<()> {
        let eps = self.eps_deg();
        for (i, p) in self.sites().enumerate() {
            if !p.is_finite() {
                return Err(Error::DegenerateInput(format!("site {i} is not finite")));
            }
            if !self.domain.contains(p, eps) {
                return Err(Error::DegenerateInput(format!(
                    "site {i} at {p} lies outside the domain [0, {}]^2",
                    self.domain.side
                )));
            }
        }
        // Coincidence scan through a grid so that large instances stay
        // cheap: coincident pairs always share a 3x3 bucket neighborhood.
        let grid = SiteGrid::build(self);
        let mut near = Vec::new();
        for i in 0..self.kappa0() {
            let p = self.site(i);
            grid.neighborhood_sites(p, &mut near);
            for &j in &near {
                if j > i && self.site(j).dist(p) <= eps {
                    return Err(Error::DegenerateInput(format!(
                        "sites {i} and {j} coincide within tolerance"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which sites (and/or domain sides) meet at a diagram vertex.
///
/// For `Interior`, the cells `i, j, k` appear counterclockwise around the
/// vertex. Inside a [`Cell`] the triple is rotated so the owning cell comes
/// first; [`VertexProvenance::canonical`] rotates it so the smallest index
/// comes first instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VertexProvenance {
    /// Circumcenter of sites `i, j, k`.
    Interior { i: usize, j: usize, k: usize },
    /// Bisector of sites `i`, `j` meeting the domain side (`i < j`).
    Boundary { i: usize, j: usize, side: Side },
    /// Corner of the domain between two sides (incoming, outgoing in
    /// counterclockwise cell order).
    Corner { incoming: Side, outgoing: Side },
}

impl VertexProvenance {
    /// Canonical form for cross-cell comparison: interior triples rotated so
    /// the smallest site index is first (rotation preserves the
    /// counterclockwise order).
    pub fn canonical(self) -> VertexProvenance {
        match self {
            VertexProvenance::Interior { i, j, k } => {
                let (i, j, k) = if i < j && i < k {
                    (i, j, k)
                } else if j < i && j < k {
                    (j, k, i)
                } else {
                    (k, i, j)
                };
                VertexProvenance::Interior { i, j, k }
            }
            other => other,
        }
    }
}

/// What an edge of a cell separates the cell from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    /// Shared wall with the cell of `neighbor`.
    Interior { neighbor: usize },
    /// Portion of a domain side.
    Boundary { side: Side },
}

/// A vertex of a cell polygon with its provenance.
#[derive(Clone, Copy, Debug)]
pub struct CellVertex {
    pub pos: Point2,
    pub prov: VertexProvenance,
}

/// A directed edge of a cell polygon; `end` is the counterclockwise
/// successor of `start` (indices into `Cell::vertices`).
#[derive(Clone, Copy, Debug)]
pub struct CellEdge {
    pub start: usize,
    pub end: usize,
    pub kind: EdgeKind,
}

/// One Voronoi cell: a convex, counterclockwise polygon.
#[derive(Clone, Debug)]
pub struct Cell {
    pub site: usize,
    pub vertices: Vec<CellVertex>,
    pub edges: Vec<CellEdge>,
}

impl Cell {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_endpoints(&self, e: usize) -> (Point2, Point2) {
        let edge = &self.edges[e];
        (self.vertices[edge.start].pos, self.vertices[edge.end].pos)
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let (v, w) = self.edge_endpoints(e);
        v.dist(w)
    }

    /// Signed (shoelace) area; positive for counterclockwise polygons.
    pub fn signed_area(&self) -> f64 {
        let mut sum = 0.0;
        let n = self.vertices.len();
        for t in 0..n {
            let p = self.vertices[t].pos;
            let q = self.vertices[(t + 1) % n].pos;
            sum += p.cross(q);
        }
        0.5 * sum
    }

    /// True if `p` lies inside or on the polygon within `tol` (the polygon
    /// is convex and counterclockwise).
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        let n = self.vertices.len();
        for t in 0..n {
            let a = self.vertices[t].pos;
            let b = self.vertices[(t + 1) % n].pos;
            if (b - a).cross(p - a) < -tol {
                return false;
            }
        }
        true
    }
}

/// The full clipped Voronoi diagram.
#[derive(Clone, Debug)]
pub struct Diagram {
    pub cells: Vec<Cell>,
    pub total_area: f64,
}

impl Diagram {
    pub fn kappa0(&self) -> usize {
        self.cells.len()
    }
}

/// Area, centroid and edge data of one cell.
#[derive(Clone, Debug)]
pub struct CellMeasures {
    pub area: f64,
    pub centroid: Point2,
    pub perimeter: f64,
    pub edge_lengths: Vec<f64>,
}

impl CellMeasures {
    /// Mean edge length `P_i / n_i`.
    pub fn mean_edge(&self) -> f64 {
        self.perimeter / self.edge_lengths.len() as f64
    }

    /// Smallest edge length divided by the mean edge length.
    pub fn min_edge_ratio(&self) -> f64 {
        let min = self.edge_lengths.iter().copied().fold(f64::INFINITY, f64::min);
        min / self.mean_edge()
    }
}

/// Shoelace area, polygon centroid and edge lengths of cell `i`.
pub fn cell_measures(diagram: &Diagram, i: usize) -> CellMeasures {
    let cell = &diagram.cells[i];
    let n = cell.vertices.len();
    let mut area2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for t in 0..n {
        let p = cell.vertices[t].pos;
        let q = cell.vertices[(t + 1) % n].pos;
        let w = p.cross(q);
        area2 += w;
        cx += (p.x + q.x) * w;
        cy += (p.y + q.y) * w;
    }
    let area = 0.5 * area2;
    let centroid = Point2::new(cx / (3.0 * area2), cy / (3.0 * area2));
    let edge_lengths: Vec<f64> = (0..cell.edges.len()).map(|e| cell.edge_length(e)).collect();
    let perimeter = edge_lengths.iter().sum();
    CellMeasures { area, centroid, perimeter, edge_lengths }
}

/// Index of the site nearest to `x`; ties break to the lowest index.
pub fn nearest_site(sites: &SiteSet, x: Point2) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, a) in sites.sites().enumerate() {
        let d = x.dist_sq(a);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Uniform background grid over the domain with ~kappa0 buckets.
struct SiteGrid {
    nx: usize,
    cell_size: f64,
    buckets: Vec<Vec<usize>>,
}

impl SiteGrid {
    fn build(sites: &SiteSet) -> SiteGrid {
        let n = sites.kappa0().max(1);
        let nx = (n as f64).sqrt().ceil() as usize;
        let nx = nx.max(1);
        let cell_size = sites.domain.side / nx as f64;
        let mut buckets = vec![Vec::new(); nx * nx];
        for (i, p) in sites.sites().enumerate() {
            let (bx, by) = Self::bucket_of(p, cell_size, nx);
            buckets[by * nx + bx].push(i);
        }
        SiteGrid { nx, cell_size, buckets }
    }

    fn bucket_of(p: Point2, cell_size: f64, nx: usize) -> (usize, usize) {
        let bx = ((p.x / cell_size) as usize).min(nx - 1);
        let by = ((p.y / cell_size) as usize).min(nx - 1);
        (bx, by)
    }

    /// Sites in the buckets at Chebyshev distance exactly `ring` from the
    /// bucket containing `p`.
    fn ring_sites(&self, p: Point2, ring: usize, out: &mut Vec<usize>) {
        out.clear();
        let (bx, by) = Self::bucket_of(p, self.cell_size, self.nx);
        let r = ring as isize;
        let (bx, by) = (bx as isize, by as isize);
        let n = self.nx as isize;
        let mut push = |x: isize, y: isize| {
            if (0..n).contains(&x) && (0..n).contains(&y) {
                out.extend_from_slice(&self.buckets[(y * n + x) as usize]);
            }
        };
        if r == 0 {
            push(bx, by);
            return;
        }
        for x in (bx - r)..=(bx + r) {
            push(x, by - r);
            push(x, by + r);
        }
        for y in (by - r + 1)..=(by + r - 1) {
            push(bx - r, y);
            push(bx + r, y);
        }
    }

    /// All sites in the 3x3 bucket neighborhood of `p`.
    fn neighborhood_sites(&self, p: Point2, out: &mut Vec<usize>) {
        out.clear();
        let (bx, by) = Self::bucket_of(p, self.cell_size, self.nx);
        let n = self.nx as isize;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (x, y) = (bx as isize + dx, by as isize + dy);
                if (0..n).contains(&x) && (0..n).contains(&y) {
                    out.extend_from_slice(&self.buckets[(y * n + x) as usize]);
                }
            }
        }
    }

    fn max_ring(&self) -> usize {
        self.nx
    }
}

/// Edge label while a cell polygon is being clipped.
#[derive(Clone, Copy, Debug, PartialEq)]
enum EdgeLabel {
    Boundary(Side),
    Interior(usize),
}

/// Working polygon: `labels[t]` is the edge from `verts[t]` to `verts[t+1]`.
/// Buffers are reused across clips; `r2` tracks the squared distance from
/// the site to the farthest vertex (the security radius).
struct ClipPoly {
    site: Point2,
    verts: Vec<Point2>,
    labels: Vec<EdgeLabel>,
    out_verts: Vec<Point2>,
    out_labels: Vec<EdgeLabel>,
    dist: Vec<f64>,
    r2: f64,
}

impl ClipPoly {
    fn new() -> ClipPoly {
        ClipPoly {
            site: Point2::ZERO,
            verts: Vec::with_capacity(16),
            labels: Vec::with_capacity(16),
            out_verts: Vec::with_capacity(16),
            out_labels: Vec::with_capacity(16),
            dist: Vec::with_capacity(16),
            r2: 0.0,
        }
    }

    fn reset_to_domain(&mut self, domain: &BoxDomain, site: Point2) {
        self.site = site;
        self.verts.clear();
        self.verts.extend_from_slice(&domain.corners());
        self.labels.clear();
        self.labels.extend_from_slice(&[
            EdgeLabel::Boundary(Side::Bottom),
            EdgeLabel::Boundary(Side::Right),
            EdgeLabel::Boundary(Side::Top),
            EdgeLabel::Boundary(Side::Left),
        ]);
        self.r2 = self.verts.iter().map(|&v| v.dist_sq(site)).fold(0.0, f64::max);
    }

    /// Keep the half-plane of points no farther from the site than from
    /// `other`; the cut edge is labeled `Interior(neighbor)`.
    fn clip_bisector(&mut self, other: Point2, neighbor: usize) {
        // Signed distance positive on the discarded side (closer to other).
        let normal = other - self.site;
        let mid = (self.site + other) * 0.5;
        let n = self.verts.len();
        self.dist.clear();
        let mut any_outside = false;
        for &v in &self.verts {
            let d = (v - mid).dot(normal);
            any_outside |= d > 0.0;
            self.dist.push(d);
        }
        if !any_outside {
            return;
        }
        self.out_verts.clear();
        self.out_labels.clear();
        let mut r2 = 0.0f64;
        for t in 0..n {
            let u = self.verts[t];
            let w = self.verts[(t + 1) % n];
            let (du, dw) = (self.dist[t], self.dist[(t + 1) % n]);
            if du <= 0.0 {
                self.out_verts.push(u);
                self.out_labels.push(self.labels[t]);
                r2 = r2.max(u.dist_sq(self.site));
                if dw > 0.0 {
                    // Leaving the kept side: the cut starts here.
                    let s = du / (du - dw);
                    let p = u + (w - u) * s;
                    self.out_verts.push(p);
                    self.out_labels.push(EdgeLabel::Interior(neighbor));
                    r2 = r2.max(p.dist_sq(self.site));
                }
            } else if dw <= 0.0 {
                // Re-entering: resume the original edge at the crossing.
                let s = du / (du - dw);
                let p = u + (w - u) * s;
                self.out_verts.push(p);
                self.out_labels.push(self.labels[t]);
                r2 = r2.max(p.dist_sq(self.site));
            }
        }
        std::mem::swap(&mut self.verts, &mut self.out_verts);
        std::mem::swap(&mut self.labels, &mut self.out_labels);
        self.r2 = r2;
    }

    /// Remove zero-length edges left behind by cuts through a vertex.
    fn merge_close_vertices(&mut self, eps: f64) {
        let mut t = 0;
        while self.verts.len() > 3 && t < self.verts.len() {
            let next = (t + 1) % self.verts.len();
            if self.verts[t].dist(self.verts[next]) <= eps {
                // Drop vertex t together with the degenerate edge it starts.
                self.verts.remove(t);
                self.labels.remove(t);
            } else {
                t += 1;
            }
        }
    }
}

/// Builds the cell of site `i` by half-plane clipping. Neighbor candidates
/// are drawn from `order` (pre-sorted by distance) with the security-radius
/// early exit: a site farther than twice the current max vertex distance
/// cannot cut the polygon.
/// Reusable per-thread state for cell construction.
struct CellBuilder {
    poly: ClipPoly,
    scratch: Vec<usize>,
    ordered: Vec<(f64, usize)>,
}

impl CellBuilder {
    fn new() -> CellBuilder {
        CellBuilder { poly: ClipPoly::new(), scratch: Vec::new(), ordered: Vec::new() }
    }
}

fn build_cell(builder: &mut CellBuilder, sites: &SiteSet, i: usize, grid: Option<&SiteGrid>) -> Cell {
    let a_i = sites.site(i);
    let eps = sites.eps_deg();
    let poly = &mut builder.poly;
    poly.reset_to_domain(&sites.domain, a_i);

    let scratch = &mut builder.scratch;
    let ordered = &mut builder.ordered;
    ordered.clear();
    match grid {
        None => {
            ordered.extend(
                (0..sites.kappa0())
                    .filter(|&j| j != i)
                    .map(|j| (sites.site(j).dist_sq(a_i), j)),
            );
            ordered.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d2, j) in ordered.iter() {
                if d2 > 4.0 * poly.r2 {
                    break;
                }
                poly.clip_bisector(sites.site(j), j);
            }
        }
        Some(grid) => {
            let mut ring = 0;
            loop {
                grid.ring_sites(a_i, ring, scratch);
                ordered.clear();
                ordered.extend(
                    scratch
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| (sites.site(j).dist_sq(a_i), j)),
                );
                ordered.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(d2, j) in ordered.iter() {
                    if d2 > 4.0 * poly.r2 {
                        break;
                    }
                    poly.clip_bisector(sites.site(j), j);
                }
                ring += 1;
                if ring > grid.max_ring() {
                    break;
                }
                // Sites in ring r are at least (r-1) bucket widths away.
                let ring_min = (ring as f64 - 1.0).max(0.0) * grid.cell_size;
                if ring_min * ring_min > 4.0 * poly.r2 {
                    break;
                }
            }
        }
    }

    poly.merge_close_vertices(eps);
    finish_cell(i, poly)
}

/// Converts a labeled polygon into a `Cell`, deriving vertex provenance
/// from the labels of the incoming and outgoing edges.
fn finish_cell(site: usize, poly: &ClipPoly) -> Cell {
    let n = poly.verts.len();
    let mut vertices = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    for t in 0..n {
        let incoming = poly.labels[(t + n - 1) % n];
        let outgoing = poly.labels[t];
        // Counterclockwise around the vertex the cells appear as
        // (owner, neighbor across the incoming edge, neighbor across the
        // outgoing edge).
        let prov = match (incoming, outgoing) {
            (EdgeLabel::Interior(p), EdgeLabel::Interior(q)) => {
                VertexProvenance::Interior { i: site, j: p, k: q }
            }
            (EdgeLabel::Interior(p), EdgeLabel::Boundary(s))
            | (EdgeLabel::Boundary(s), EdgeLabel::Interior(p)) => VertexProvenance::Boundary {
                i: site.min(p),
                j: site.max(p),
                side: s,
            },
            (EdgeLabel::Boundary(s1), EdgeLabel::Boundary(s2)) => {
                VertexProvenance::Corner { incoming: s1, outgoing: s2 }
            }
        };
        vertices.push(CellVertex { pos: poly.verts[t], prov });
        let kind = match poly.labels[t] {
            EdgeLabel::Interior(neighbor) => EdgeKind::Interior { neighbor },
            EdgeLabel::Boundary(side) => EdgeKind::Boundary { side },
        };
        edges.push(CellEdge { start: t, end: (t + 1) % n, kind });
    }
    Cell { site, vertices, edges }
}

fn build_cells(sites: &SiteSet, parallel: bool) -> Vec<Cell> {
    // All-pairs candidate scan below 65 sites, background grid above.
    let grid = if sites.kappa0() > 64 { Some(SiteGrid::build(sites)) } else { None };
    if parallel {
        use rayon::prelude::*;
        (0..sites.kappa0())
            .into_par_iter()
            .map_init(CellBuilder::new, |builder, i| build_cell(builder, sites, i, grid.as_ref()))
            .collect()
    } else {
        let mut builder = CellBuilder::new();
        (0..sites.kappa0()).map(|i| build_cell(&mut builder, sites, i, grid.as_ref())).collect()
    }
}

/// Builds the bounded Voronoi diagram of `sites` clipped to the box.
pub fn build_diagram(sites: &SiteSet) -> Result<Diagram> {
    build_diagram_with(sites, false)
}

/// As [`build_diagram`], with optional parallel per-cell clipping. Cell
/// order in the output is by site index regardless of schedule.
pub fn build_diagram_with(sites: &SiteSet, parallel: bool) -> Result<Diagram> {
    if sites.kappa0() == 0 {
        return Err(Error::DegenerateInput("empty site set".into()));
    }
    sites.validate()?;
    let cells = build_cells(sites, parallel);
    Ok(Diagram { cells, total_area: sites.domain.area() })
}

// ---------------------------------------------------------------------------
// Non-degeneracy checks
// ---------------------------------------------------------------------------

/// A single violation of the non-degeneracy assumptions.
#[derive(Clone, Debug)]
pub enum Degeneracy {
    /// Two sites closer than the tolerance.
    CoincidentSites { i: usize, j: usize, dist: f64 },
    /// Interior vertex whose generating sites are nearly collinear:
    /// `|(a_j - a_i)^perp . (a_k - a_i)| < tol`.
    CollinearVertex { prov: VertexProvenance, det: f64 },
    /// Boundary vertex whose bisector is nearly tangent to the side:
    /// `|(a_j - a_i)^perp . grad(phi)| < tol`.
    TangentBoundaryVertex { prov: VertexProvenance, det: f64 },
    /// Boundary vertex within the tolerance of a domain corner.
    NearCorner { prov: VertexProvenance, dist: f64 },
    /// A vertex position shared by four or more cells.
    SharedVertex { pos: Point2, cells: Vec<usize> },
}

impl fmt::Display for Degeneracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degeneracy::CoincidentSites { i, j, dist } => {
                write!(f, "sites {i} and {j} nearly coincide (dist {dist:.3e})")
            }
            Degeneracy::CollinearVertex { prov, det } => {
                write!(f, "near-collinear interior vertex {prov:?} (det {det:.3e})")
            }
            Degeneracy::TangentBoundaryVertex { prov, det } => {
                write!(f, "near-tangent boundary vertex {prov:?} (det {det:.3e})")
            }
            Degeneracy::NearCorner { prov, dist } => {
                write!(f, "boundary vertex {prov:?} within {dist:.3e} of a corner")
            }
            Degeneracy::SharedVertex { pos, cells } => {
                write!(f, "vertex at {pos} shared by cells {cells:?}")
            }
        }
    }
}

/// Report of all detected non-degeneracy violations (report-only; nothing
/// fails here).
#[derive(Clone, Debug, Default)]
pub struct DegeneracyReport {
    pub violations: Vec<Degeneracy>,
}

impl DegeneracyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scans a diagram for violations of the vertex non-degeneracy assumptions:
/// near-coincident sites, near-collinear interior vertex triples, bisectors
/// nearly tangent to a side, boundary vertices near corners, and vertex
/// positions shared by four or more cells.
pub fn check_nondegeneracy(diagram: &Diagram, sites: &SiteSet, tol: f64) -> DegeneracyReport {
    let mut report = DegeneracyReport::default();

    for i in 0..sites.kappa0() {
        for j in (i + 1)..sites.kappa0() {
            let d = sites.site(i).dist(sites.site(j));
            if d < tol {
                report.violations.push(Degeneracy::CoincidentSites { i, j, dist: d });
            }
        }
    }

    let corners = sites.domain.corners();
    let mut seen = std::collections::HashSet::new();
    for cell in &diagram.cells {
        for v in &cell.vertices {
            let prov = v.prov.canonical();
            if !seen.insert(prov) {
                continue;
            }
            match prov {
                VertexProvenance::Interior { i, j, k } => {
                    let (ai, aj, ak) = (sites.site(i), sites.site(j), sites.site(k));
                    let det = (aj - ai).perp().dot(ak - ai);
                    if det.abs() < tol {
                        report.violations.push(Degeneracy::CollinearVertex { prov, det });
                    }
                }
                VertexProvenance::Boundary { i, j, side } => {
                    let (ai, aj) = (sites.site(i), sites.site(j));
                    let det = (aj - ai).perp().dot(side.outward_normal());
                    if det.abs() < tol {
                        report.violations.push(Degeneracy::TangentBoundaryVertex { prov, det });
                    }
                    let corner_dist =
                        corners.iter().map(|&c| c.dist(v.pos)).fold(f64::INFINITY, f64::min);
                    if corner_dist < tol {
                        report
                            .violations
                            .push(Degeneracy::NearCorner { prov, dist: corner_dist });
                    }
                }
                VertexProvenance::Corner { .. } => {}
            }
        }
    }

    // Vertices shared by >= 4 cells: cluster vertex positions on a hash grid.
    let merge = tol.max(sites.eps_deg());
    let mut clusters: std::collections::HashMap<(i64, i64), Vec<(Point2, usize)>> =
        std::collections::HashMap::new();
    for cell in &diagram.cells {
        for v in &cell.vertices {
            let key = ((v.pos.x / merge).round() as i64, (v.pos.y / merge).round() as i64);
            clusters.entry(key).or_default().push((v.pos, cell.site));
        }
    }
    let mut flagged = std::collections::HashSet::new();
    for ((kx, ky), members) in &clusters {
        // Gather the 3x3 key neighborhood so clusters split across buckets
        // are still counted together.
        let mut cells_here: Vec<usize> = Vec::new();
        let anchor = members[0].0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = clusters.get(&(kx + dx, ky + dy)) {
                    for &(p, c) in list {
                        if p.dist(anchor) <= 2.0 * merge {
                            cells_here.push(c);
                        }
                    }
                }
            }
        }
        cells_here.sort_unstable();
        cells_here.dedup();
        if cells_here.len() >= 4 && flagged.insert(cells_here.clone()) {
            report.violations.push(Degeneracy::SharedVertex { pos: anchor, cells: cells_here });
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_core::{RngCore, SeedableRng};

    fn uniform_sites(kappa0: usize, seed: u64) -> SiteSet {
        let domain = BoxDomain::for_sites(kappa0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut coords = Vec::with_capacity(2 * kappa0);
        for _ in 0..2 * kappa0 {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            coords.push(u * domain.side);
        }
        SiteSet::new(coords, domain)
    }

    #[test]
    fn single_site_owns_the_whole_square() {
        let sites = SiteSet::new(vec![0.5, 0.5], BoxDomain::new(1.0));
        let diagram = build_diagram(&sites).unwrap();
        assert_eq!(diagram.cells.len(), 1);
        let cell = &diagram.cells[0];
        assert_eq!(cell.vertices.len(), 4);
        assert!(cell
            .vertices
            .iter()
            .all(|v| matches!(v.prov, VertexProvenance::Corner { .. })));
        assert!(cell.edges.iter().all(|e| matches!(e.kind, EdgeKind::Boundary { .. })));
        let m = cell_measures(&diagram, 0);
        assert_relative_eq!(m.area, 1.0, max_relative = 1e-14);
        assert_relative_eq!(m.perimeter, 4.0, max_relative = 1e-14);
        assert_relative_eq!(m.centroid.x, 0.5, max_relative = 1e-14);
        assert_relative_eq!(m.centroid.y, 0.5, max_relative = 1e-14);
    }

    #[test]
    fn two_sites_split_the_square_at_their_bisector() {
        let sites =
            SiteSet::new(vec![0.25, 0.5, 0.75, 0.5], BoxDomain::new(1.0));
        let diagram = build_diagram(&sites).unwrap();
        for i in 0..2 {
            let m = cell_measures(&diagram, i);
            assert_relative_eq!(m.area, 0.5, max_relative = 1e-12);
        }
        let cell0 = &diagram.cells[0];
        let interior: Vec<&CellEdge> = cell0
            .edges
            .iter()
            .filter(|e| matches!(e.kind, EdgeKind::Interior { .. }))
            .collect();
        assert_eq!(interior.len(), 1);
        let (v, w) = cell0.edge_endpoints(
            cell0
                .edges
                .iter()
                .position(|e| matches!(e.kind, EdgeKind::Interior { .. }))
                .unwrap(),
        );
        assert_relative_eq!(v.x, 0.5, max_relative = 1e-12);
        assert_relative_eq!(w.x, 0.5, max_relative = 1e-12);
        assert_relative_eq!(v.dist(w), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn nearest_site_tie_breaks_to_lowest_index() {
        let sites = SiteSet::new(vec![0.0, 0.0, 1.0, 1.0], BoxDomain::new(1.0));
        assert_eq!(nearest_site(&sites, Point2::new(0.1, 0.1)), 0);
        assert_eq!(nearest_site(&sites, Point2::new(0.5, 0.5)), 0);
    }

    #[test]
    fn nearest_site_matches_exhaustive_scan() {
        let sites = uniform_sites(100, 7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let v = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let x = Point2::new(u * sites.domain.side, v * sites.domain.side);
            let by_scan = (0..sites.kappa0())
                .min_by(|&a, &b| {
                    sites.site(a).dist_sq(x).partial_cmp(&sites.site(b).dist_sq(x)).unwrap()
                })
                .unwrap();
            assert_eq!(nearest_site(&sites, x), by_scan);
        }
    }

    #[test]
    fn point_location_agrees_with_nearest_site_oracle() {
        let sites = uniform_sites(50, 3);
        let diagram = build_diagram(&sites).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let tol = 1e-9 * sites.domain.side;
        for _ in 0..10_000 {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let v = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let x = Point2::new(u * sites.domain.side, v * sites.domain.side);
            let oracle = nearest_site(&sites, x);
            assert!(
                diagram.cells[oracle].contains(x, tol),
                "point {x} not inside the cell of its nearest site {oracle}"
            );
        }
    }

    #[test]
    fn partition_edges_and_convexity_invariants() {
        for &(kappa0, seed) in &[(10usize, 1u64), (40, 2), (120, 3), (300, 4)] {
            let sites = uniform_sites(kappa0, seed);
            let diagram = build_diagram(&sites).unwrap();
            let total: f64 = (0..kappa0).map(|i| cell_measures(&diagram, i).area).sum();
            assert_relative_eq!(total, sites.domain.area(), max_relative = 1e-9);

            let tol_bisector = 1e-9 * sites.domain.side;
            let mut interior_edges: std::collections::HashMap<(usize, usize), (Point2, Point2)> =
                std::collections::HashMap::new();
            for cell in &diagram.cells {
                // Convexity: consecutive edge cross products stay non-negative.
                let n = cell.vertices.len();
                for t in 0..n {
                    let a = cell.vertices[t].pos;
                    let b = cell.vertices[(t + 1) % n].pos;
                    let c = cell.vertices[(t + 2) % n].pos;
                    assert!((b - a).cross(c - b) >= -1e-12 * sites.domain.side);
                }
                assert!(cell.signed_area() > 0.0);
                for (e, edge) in cell.edges.iter().enumerate() {
                    if let EdgeKind::Interior { neighbor } = edge.kind {
                        let (v, w) = cell.edge_endpoints(e);
                        // Bisector property at both endpoints.
                        for p in [v, w] {
                            let di = p.dist(sites.site(cell.site));
                            let dk = p.dist(sites.site(neighbor));
                            assert!(
                                (di - dk).abs() <= tol_bisector,
                                "endpoint off the bisector by {}",
                                (di - dk).abs()
                            );
                        }
                        let key = (cell.site.min(neighbor), cell.site.max(neighbor));
                        if let Some((pv, pw)) = interior_edges.insert(key, (v, w)) {
                            // Reciprocity: same endpoints, reversed order.
                            assert!(pv.dist(w) <= tol_bisector && pw.dist(v) <= tol_bisector);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cell_measures_match_monte_carlo() {
        let sites = uniform_sites(12, 5);
        let diagram = build_diagram(&sites).unwrap();
        let cell = &diagram.cells[3];
        let m = cell_measures(&diagram, 3);
        let (lo_x, hi_x) = cell
            .vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.pos.x), hi.max(v.pos.x))
            });
        let (lo_y, hi_y) = cell
            .vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.pos.y), hi.max(v.pos.y))
            });
        let bbox_area = (hi_x - lo_x) * (hi_y - lo_y);
        let n = 200_000usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let v = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let p = Point2::new(lo_x + u * (hi_x - lo_x), lo_y + v * (hi_y - lo_y));
            if cell.contains(p, 0.0) {
                hits += 1;
                sx += p.x;
                sy += p.y;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let area_mc = bbox_area * p_hat;
        let sigma_area = bbox_area * (p_hat * (1.0 - p_hat) / n as f64).sqrt();
        assert!((m.area - area_mc).abs() <= 3.0 * sigma_area);
        let cx = sx / hits as f64;
        let cy = sy / hits as f64;
        // Per-coordinate spread of uniform samples in the cell is below the
        // bbox diagonal; 3 sigma with the conservative bound.
        let sigma_c = (hi_x - lo_x).max(hi_y - lo_y) / (hits as f64).sqrt();
        assert!((m.centroid.x - cx).abs() <= 3.0 * sigma_c);
        assert!((m.centroid.y - cy).abs() <= 3.0 * sigma_c);
    }

    #[test]
    fn right_triangle_measures_are_analytic() {
        // Hand-built cell: (0,0), (1,0), (0,1) counterclockwise.
        let verts = [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)];
        let cell = Cell {
            site: 0,
            vertices: verts
                .iter()
                .map(|&pos| CellVertex {
                    pos,
                    prov: VertexProvenance::Corner { incoming: Side::Left, outgoing: Side::Bottom },
                })
                .collect(),
            edges: (0..3)
                .map(|t| CellEdge {
                    start: t,
                    end: (t + 1) % 3,
                    kind: EdgeKind::Boundary { side: Side::Bottom },
                })
                .collect(),
        };
        let diagram = Diagram { cells: vec![cell], total_area: 0.5 };
        let m = cell_measures(&diagram, 0);
        assert_relative_eq!(m.area, 0.5, max_relative = 1e-15);
        assert_relative_eq!(m.centroid.x, 1.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(m.centroid.y, 1.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn coincident_sites_are_rejected() {
        let sites = SiteSet::new(vec![0.3, 0.3, 0.3, 0.3, 0.7, 0.7], BoxDomain::new(1.0));
        match build_diagram(&sites) {
            Err(Error::DegenerateInput(_)) => {}
            other => panic!("expected DegenerateInput, got {other:?}"),
        }
    }

    #[test]
    fn four_site_grid_flags_a_shared_vertex() {
        let sites = SiteSet::new(
            vec![0.5, 0.5, 1.5, 0.5, 0.5, 1.5, 1.5, 1.5],
            BoxDomain::new(2.0),
        );
        let diagram = build_diagram(&sites).unwrap();
        let report = check_nondegeneracy(&diagram, &sites, 1e-9);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Degeneracy::SharedVertex { cells, .. } if cells.len() == 4)));
    }

    #[test]
    fn generic_random_sites_produce_a_clean_report() {
        let sites = uniform_sites(30, 17);
        let diagram = build_diagram(&sites).unwrap();
        let report = check_nondegeneracy(&diagram, &sites, 1e-9);
        assert!(report.is_clean(), "unexpected violations: {:?}", report.violations);
    }

    #[test]
    fn coincidence_check_reports_close_pairs() {
        let sites = SiteSet::new(vec![0.3, 0.3, 0.3 + 1e-11, 0.3, 0.7, 0.7], BoxDomain::new(1.0));
        // Too far apart for build to fail (eps_deg = 1e-12), close enough
        // for a looser report tolerance.
        let diagram = build_diagram(&sites).unwrap();
        let report = check_nondegeneracy(&diagram, &sites, 1e-9);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Degeneracy::CoincidentSites { i: 0, j: 1, .. })));
    }
}
