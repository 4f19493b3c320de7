//! The CVT energy for unit density and its gradient, computed two ways.
//!
//! The energy of a cell is the exact polygon integral of the squared
//! distance to its site, evaluated by fanning the cell into triangles at
//! the site. The gradient comes either from the centroid formula
//! (cheap; the edge terms cancel over the partition) or from
//! differentiating the triangle-fan formula through the vertex velocities
//! (more expensive; used as an independent cross-check).

use crate::error::Result;
use crate::geometry::{cell_measures, Diagram, Point2, SiteSet};
use crate::sensitivity::cell_jacobians;

/// Total energy and the per-cell integrals it averages.
#[derive(Clone, Debug)]
pub struct EnergyBreakdown {
    /// `(1/kappa0) * sum(per_cell)`.
    pub total: f64,
    pub per_cell: Vec<f64>,
}

/// Signed Jacobian of the affine map from the unit simplex onto the
/// triangle `(a, v, w)`; its absolute value is twice the triangle area.
pub fn triangle_jacobian(v: Point2, w: Point2, a: Point2) -> f64 {
    (v - a).cross(w - a)
}

/// Quadratic factor of a triangle term:
/// `|v-a|^2 + (v-a).(w-a) + |w-a|^2`.
fn triangle_quad(v: Point2, w: Point2, a: Point2) -> f64 {
    let dv = v - a;
    let dw = w - a;
    dv.norm_sq() + dv.dot(dw) + dw.norm_sq()
}

fn cell_energy(diagram: &Diagram, sites: &SiteSet, i: usize) -> f64 {
    let cell = &diagram.cells[i];
    let a = sites.site(i);
    let n = cell.vertices.len();
    let mut sum = 0.0;
    for t in 0..n {
        let v = cell.vertices[t].pos;
        let w = cell.vertices[(t + 1) % n].pos;
        sum += triangle_jacobian(v, w, a).abs() / 12.0 * triangle_quad(v, w, a);
    }
    sum
}

/// Exact CVT energy for unit density:
/// `G = (1/kappa0) * sum_i integral over V_i of |x - a_i|^2`.
pub fn cvt_energy(diagram: &Diagram, sites: &SiteSet) -> EnergyBreakdown {
    cvt_energy_with(diagram, sites, false)
}

/// As [`cvt_energy`], optionally computing per-cell terms in parallel.
/// The reduction is in ascending cell order either way, so the sum is
/// identical bit for bit.
pub fn cvt_energy_with(diagram: &Diagram, sites: &SiteSet, parallel: bool) -> EnergyBreakdown {
    let kappa0 = diagram.kappa0();
    let per_cell: Vec<f64> = if parallel {
        use rayon::prelude::*;
        (0..kappa0).into_par_iter().map(|i| cell_energy(diagram, sites, i)).collect()
    } else {
        (0..kappa0).map(|i| cell_energy(diagram, sites, i)).collect()
    };
    let total = per_cell.iter().sum::<f64>() / kappa0 as f64;
    EnergyBreakdown { total, per_cell }
}

/// Gradient of the energy through the centroid formula: the component for
/// site `i` is `(2/kappa0) (a_i - c_i) |V_i|`.
pub fn cvt_gradient_integral(diagram: &Diagram, sites: &SiteSet) -> Vec<f64> {
    let kappa0 = diagram.kappa0();
    let mut grad = vec![0.0; 2 * kappa0];
    let scale = 2.0 / kappa0 as f64;
    for i in 0..kappa0 {
        let m = cell_measures(diagram, i);
        let a = sites.site(i);
        grad[2 * i] = scale * (a.x - m.centroid.x) * m.area;
        grad[2 * i + 1] = scale * (a.y - m.centroid.y) * m.area;
    }
    grad
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the energy by differentiating the triangle-fan formula:
/// per-edge terms propagated through the vertex velocity blocks.
/// Mathematically equal to [`cvt_gradient_integral`] for unit density.
pub fn cvt_gradient_explicit(diagram: &Diagram, sites: &SiteSet) -> Result<Vec<f64>> {
    cvt_gradient_explicit_with(diagram, sites, false)
}

pub fn cvt_gradient_explicit_with(
    diagram: &Diagram,
    sites: &SiteSet,
    parallel: bool,
) -> Result<Vec<f64>> {
    let kappa0 = diagram.kappa0();

    // Per-cell sparse contributions, then a fixed-order scatter.
    let cell_term = |i: usize| -> Result<Vec<(usize, Point2)>> {
        let cell = &diagram.cells[i];
        let a = sites.site(i);
        let jacobians = cell_jacobians(sites, cell)?;
        let mut local: Vec<(usize, Point2)> = Vec::new();
        let mut push = |site: usize, v: Point2| local.push((site, v));
        for edge in &cell.edges {
            let v = cell.vertices[edge.start].pos;
            let w = cell.vertices[edge.end].pos;
            let jac = triangle_jacobian(v, w, a);
            let kappa = sign(jac) * triangle_quad(v, w, a);
            let jac_abs = jac.abs();
            // Coefficient vectors multiplying the endpoint velocities and
            // the direct site displacement.
            let c_v = (a.perp() - w.perp()) * kappa + (v * 2.0 + w - a * 3.0) * jac_abs;
            let c_w = (v.perp() - a.perp()) * kappa + (v + w * 2.0 - a * 3.0) * jac_abs;
            let c_site = (v.perp() - w.perp()) * kappa + (v + w - a * 2.0) * (3.0 * jac_abs);
            for &(s, ref block) in &jacobians[edge.start].blocks {
                push(s, block.transpose_mul_vec(c_v));
            }
            for &(s, ref block) in &jacobians[edge.end].blocks {
                push(s, block.transpose_mul_vec(c_w));
            }
            push(i, -c_site);
        }
        Ok(local)
    };

    let locals: Result<Vec<Vec<(usize, Point2)>>> = if parallel {
        use rayon::prelude::*;
        (0..kappa0).into_par_iter().map(cell_term).collect()
    } else {
        (0..kappa0).map(cell_term).collect()
    };

    let mut grad = vec![0.0; 2 * kappa0];
    let scale = 1.0 / (12.0 * kappa0 as f64);
    for local in locals? {
        for (s, v) in local {
            grad[2 * s] += scale * v.x;
            grad[2 * s + 1] += scale * v.y;
        }
    }
    Ok(grad)
}

/// One fixed-point step: every site moves to the centroid of its cell,
/// clamped into the closed box.
pub fn lloyd_step(diagram: &Diagram, sites: &SiteSet) -> SiteSet {
    let mut coords = Vec::with_capacity(sites.coords.len());
    for i in 0..diagram.kappa0() {
        let c = sites.domain.clamp(cell_measures(diagram, i).centroid);
        coords.push(c.x);
        coords.push(c.y);
    }
    sites.with_coords(coords)
}
