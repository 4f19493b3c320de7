//! Geometric penalty terms and merit-function assembly.
//!
//! Three penalties are available: equal cell areas, no relatively small
//! edges, and areas prescribed by a density field evaluated at the sites.
//! Each comes with an analytic gradient assembled from the sensitivity
//! module. A merit function combines the CVT energy with one penalty.

use crate::energy::{
    cvt_energy_with, cvt_gradient_explicit_with, cvt_gradient_integral, EnergyBreakdown,
};
use crate::error::{Error, Result};
use crate::geometry::{build_diagram_with, cell_measures, Diagram, Point2, SiteSet};
use crate::sensitivity::{area_gradient, cell_jacobians};

/// A prescribed cell-area profile over the domain. The value at a site is
/// the desired ratio of its cell area to the average cell area.
#[derive(Clone, Copy, Debug)]
pub enum DensityField {
    /// Curved valley: large along a parabolic arc through the domain,
    /// small elsewhere. `center` is the domain center.
    CurvedValley { a: f64, b: f64, center: Point2 },
    /// Band following a sine wave across the domain; `half_width` is half
    /// the domain side.
    SineBand { half_width: f64 },
    /// Paraboloid growing with squared distance from the domain center;
    /// `radius` is the inscribed-circle radius.
    RadialBowl { center: Point2, radius: f64 },
}

impl DensityField {
    /// The three built-in profiles, sized for the domain `[0, side]^2`.
    /// `id` is the 1-based profile number used on the command line.
    pub fn by_id(id: u8, side: f64) -> Result<DensityField> {
        let center = Point2::new(side / 2.0, side / 2.0);
        match id {
            1 => Ok(DensityField::CurvedValley { a: 19.0 / 256.0, b: 0.25, center }),
            2 => Ok(DensityField::SineBand { half_width: side / 2.0 }),
            3 => Ok(DensityField::RadialBowl { center, radius: side / 2.0 }),
            other => Err(Error::Config(format!("unknown density profile {other} (use 1-3)"))),
        }
    }
}

/// Value and spatial gradient of a density field at `z`.
pub fn psi_eval(field: &DensityField, z: Point2) -> (f64, Point2) {
    match *field {
        DensityField::CurvedValley { a, b, center } => {
            // value = a ((zb2 - (zb1/4)^2)^2 + (zb1/4 - 1)^2) + b,
            // with zb = (2 z - center) / 5 componentwise.
            let zb1 = (2.0 * z.x - center.x) / 5.0;
            let zb2 = (2.0 * z.y - center.y) / 5.0;
            let t1 = zb2 - (zb1 / 4.0) * (zb1 / 4.0);
            let t2 = zb1 / 4.0 - 1.0;
            let value = a * (t1 * t1 + t2 * t2) + b;
            // d(zb)/dz = 2/5 on each axis.
            let dv_dzb1 = a * (2.0 * t1 * (-zb1 / 8.0) + 2.0 * t2 / 4.0);
            let dv_dzb2 = a * 2.0 * t1;
            (value, Point2::new(dv_dzb1 * 0.4, dv_dzb2 * 0.4))
        }
        DensityField::SineBand { half_width } => {
            let delta = half_width;
            // sin(2 pi z1 / (2 delta)) = sin(pi z1 / delta).
            let arg = std::f64::consts::PI * z.x / delta;
            let dev = z.y - 0.6 * delta * arg.sin() - delta;
            let scale = 2.9 / (delta * delta);
            let value = 0.1 + scale * dev * dev;
            let d_dev_dx = -0.6 * delta * arg.cos() * std::f64::consts::PI / delta;
            (value, Point2::new(scale * 2.0 * dev * d_dev_dx, scale * 2.0 * dev))
        }
        DensityField::RadialBowl { center, radius } => {
            let d = z - center;
            let r2 = radius * radius;
            (0.01 + 20.0 * d.norm_sq() / r2, d * (40.0 / r2))
        }
    }
}

/// Value, dense gradient and per-cell terms of one penalty.
#[derive(Clone, Debug)]
pub struct PenaltyEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// The per-cell quantity the penalty squares or sums
    /// (area deviation for the area penalties, the per-cell edge-violation
    /// sum for the small-edge penalty).
    pub per_cell: Vec<f64>,
}

/// Relative area deviation of cell `i`: `|V_i| / (|A|/kappa0) - 1`.
fn area_deviation(diagram: &Diagram, i: usize) -> f64 {
    let kappa0 = diagram.kappa0() as f64;
    cell_measures(diagram, i).area * kappa0 / diagram.total_area - 1.0
}

/// Equal-area penalty: mean of squared relative area deviations.
pub fn j1_eval(diagram: &Diagram, sites: &SiteSet) -> PenaltyEval {
    let kappa0 = diagram.kappa0();
    let per_cell: Vec<f64> = (0..kappa0).map(|i| area_deviation(diagram, i)).collect();
    let value = per_cell.iter().map(|d| d * d).sum::<f64>() / kappa0 as f64;
    let mut grad = vec![0.0; 2 * kappa0];
    let area_scale = kappa0 as f64 / diagram.total_area;
    for i in 0..kappa0 {
        // d/da of dev_i^2 / kappa0 summed over cells.
        let coeff = 2.0 * per_cell[i] * area_scale / kappa0 as f64;
        area_gradient(diagram, sites, i).scatter_into(&mut grad, coeff);
    }
    PenaltyEval { value, grad, per_cell }
}

fn min0(x: f64) -> f64 {
    x.min(0.0)
}

/// Per-cell small-edge violation terms (values only). Unlike [`j2_eval`]
/// this needs no vertex sensitivities, so it also works on diagrams whose
/// vertices are too degenerate to differentiate.
pub fn j2_terms(diagram: &Diagram, c2: f64) -> Result<Vec<f64>> {
    if !(0.0 < c2 && c2 < 1.0) {
        return Err(Error::Config(format!("c2 must lie in (0, 1), got {c2}")));
    }
    Ok(diagram
        .cells
        .iter()
        .map(|cell| {
            let lengths: Vec<f64> = (0..cell.edges.len()).map(|e| cell.edge_length(e)).collect();
            let n_i = lengths.len() as f64;
            let mean_edge = lengths.iter().sum::<f64>() / n_i;
            lengths.iter().map(|&l| min0(l / mean_edge - c2).powi(2)).sum::<f64>() / n_i
        })
        .collect())
}

/// Small-edge penalty: for each cell, the mean over its edges of the
/// squared shortfall of `|E| / mean_edge` below `c2`. Summed over cells
/// without normalization.
pub fn j2_eval(diagram: &Diagram, sites: &SiteSet, c2: f64) -> Result<PenaltyEval> {
    if !(0.0 < c2 && c2 < 1.0) {
        return Err(Error::Config(format!("c2 must lie in (0, 1), got {c2}")));
    }
    let kappa0 = diagram.kappa0();
    let mut per_cell = vec![0.0; kappa0];
    let mut grad = vec![0.0; 2 * kappa0];

    for (ci, cell) in diagram.cells.iter().enumerate() {
        let lengths: Vec<f64> = (0..cell.edges.len()).map(|e| cell.edge_length(e)).collect();
        let n_i = lengths.len() as f64;
        let perimeter: f64 = lengths.iter().sum();
        let mean_edge = perimeter / n_i;
        let shortfalls: Vec<f64> = lengths.iter().map(|&l| min0(l / mean_edge - c2)).collect();
        per_cell[ci] = shortfalls.iter().map(|s| s * s).sum::<f64>() / n_i;
        if shortfalls.iter().all(|&s| s == 0.0) {
            continue;
        }
        // Weighted mean shortfall drives the perimeter coupling: every edge
        // of a violating cell picks up a gradient term.
        let weighted: f64 =
            lengths.iter().zip(&shortfalls).map(|(&l, &s)| l / perimeter * s).sum();
        let jacobians = cell_jacobians(sites, cell)?;
        for (ei, edge) in cell.edges.iter().enumerate() {
            let mu = 2.0 / perimeter * (shortfalls[ei] - weighted);
            if mu == 0.0 {
                continue;
            }
            let (v, w) = cell.edge_endpoints(ei);
            let tau = (w - v) * (1.0 / lengths[ei]);
            for &(s, ref block) in &jacobians[edge.end].blocks {
                let g = block.transpose_mul_vec(tau);
                grad[2 * s] += mu * g.x;
                grad[2 * s + 1] += mu * g.y;
            }
            for &(s, ref block) in &jacobians[edge.start].blocks {
                let g = block.transpose_mul_vec(tau);
                grad[2 * s] -= mu * g.x;
                grad[2 * s + 1] -= mu * g.y;
            }
        }
    }
    let value = per_cell.iter().sum();
    Ok(PenaltyEval { value, grad, per_cell })
}

/// Density-prescribed-area penalty: mean of squared deviations of the
/// relative cell area from the field value at the site.
pub fn j3_eval(diagram: &Diagram, sites: &SiteSet, field: &DensityField) -> PenaltyEval {
    let kappa0 = diagram.kappa0();
    let area_scale = kappa0 as f64 / diagram.total_area;
    let per_cell: Vec<f64> = (0..kappa0)
        .map(|i| {
            let (psi, _) = psi_eval(field, sites.site(i));
            cell_measures(diagram, i).area * area_scale - psi
        })
        .collect();
    let value = per_cell.iter().map(|d| d * d).sum::<f64>() / kappa0 as f64;
    let mut grad = vec![0.0; 2 * kappa0];
    for i in 0..kappa0 {
        let coeff = 2.0 * per_cell[i] / kappa0 as f64;
        area_gradient(diagram, sites, i).scatter_into(&mut grad, coeff * area_scale);
        let (_, dpsi) = psi_eval(field, sites.site(i));
        grad[2 * i] -= coeff * dpsi.x;
        grad[2 * i + 1] -= coeff * dpsi.y;
    }
    PenaltyEval { value, grad, per_cell }
}

/// Which objective a run minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeritKind {
    /// CVT energy alone.
    EnergyOnly,
    /// `omega * G + J1`.
    EqualArea,
    /// `omega * G + J2`.
    MinEdge,
    /// `G + omega * J3` (the weight sits on the penalty here).
    Density,
}

/// Which formula computes the energy gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientVariant {
    /// Centroid-based formula (the default).
    #[default]
    Integral,
    /// Vertex-velocity formula; same values, more work.
    Explicit,
}

/// Full description of a merit function.
#[derive(Clone, Debug)]
pub struct MeritSpec {
    pub kind: MeritKind,
    pub omega: f64,
    /// Small-edge threshold, required for [`MeritKind::MinEdge`].
    pub c2: Option<f64>,
    /// Density field, required for [`MeritKind::Density`].
    pub field: Option<DensityField>,
    pub gradient_variant: GradientVariant,
}

impl MeritSpec {
    pub fn energy_only(gradient_variant: GradientVariant) -> MeritSpec {
        MeritSpec { kind: MeritKind::EnergyOnly, omega: 0.0, c2: None, field: None, gradient_variant }
    }

    pub fn equal_area(omega: f64) -> MeritSpec {
        MeritSpec {
            kind: MeritKind::EqualArea,
            omega,
            c2: None,
            field: None,
            gradient_variant: GradientVariant::Integral,
        }
    }

    pub fn min_edge(omega: f64, c2: f64) -> MeritSpec {
        MeritSpec {
            kind: MeritKind::MinEdge,
            omega,
            c2: Some(c2),
            field: None,
            gradient_variant: GradientVariant::Integral,
        }
    }

    pub fn density(omega: f64, field: DensityField) -> MeritSpec {
        MeritSpec {
            kind: MeritKind::Density,
            omega,
            c2: None,
            field: Some(field),
            gradient_variant: GradientVariant::Integral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega < 0.0 {
            return Err(Error::Config("omega must be non-negative".into()));
        }
        match self.kind {
            MeritKind::MinEdge => match self.c2 {
                Some(c2) if 0.0 < c2 && c2 < 1.0 => Ok(()),
                Some(c2) => Err(Error::Config(format!("c2 must lie in (0, 1), got {c2}"))),
                None => Err(Error::Config("the small-edge merit requires c2".into())),
            },
            MeritKind::Density => {
                if self.field.is_none() {
                    Err(Error::Config("the density merit requires a density field".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Merit value with its gradient and components.
#[derive(Clone, Debug)]
pub struct MeritValue {
    pub f: f64,
    pub grad: Vec<f64>,
    /// CVT energy at the point.
    pub energy: f64,
    /// Penalty value at the point (zero for [`MeritKind::EnergyOnly`]).
    pub penalty: f64,
}

/// Builds the diagram once and evaluates the merit function with its
/// gradient at `sites`.
pub fn merit_eval(spec: &MeritSpec, sites: &SiteSet) -> Result<MeritValue> {
    merit_eval_with(spec, sites, false)
}

pub fn merit_eval_with(spec: &MeritSpec, sites: &SiteSet, parallel: bool) -> Result<MeritValue> {
    spec.validate()?;
    let diagram = build_diagram_with(sites, parallel)?;
    let EnergyBreakdown { total: energy, .. } = cvt_energy_with(&diagram, sites, parallel);
    let energy_grad = match spec.gradient_variant {
        GradientVariant::Integral => cvt_gradient_integral(&diagram, sites),
        GradientVariant::Explicit => cvt_gradient_explicit_with(&diagram, sites, parallel)?,
    };

    let (f, grad, penalty) = match spec.kind {
        MeritKind::EnergyOnly => (energy, energy_grad, 0.0),
        MeritKind::EqualArea => {
            let p = j1_eval(&diagram, sites);
            let mut grad = p.grad;
            for (g, e) in grad.iter_mut().zip(&energy_grad) {
                *g += spec.omega * e;
            }
            (spec.omega * energy + p.value, grad, p.value)
        }
        MeritKind::MinEdge => {
            let p = j2_eval(&diagram, sites, spec.c2.unwrap())?;
            let mut grad = p.grad;
            for (g, e) in grad.iter_mut().zip(&energy_grad) {
                *g += spec.omega * e;
            }
            (spec.omega * energy + p.value, grad, p.value)
        }
        MeritKind::Density => {
            let field = spec.field.as_ref().unwrap();
            let p = j3_eval(&diagram, sites, field);
            let mut grad: Vec<f64> = p.grad.iter().map(|g| spec.omega * g).collect();
            for (g, e) in grad.iter_mut().zip(&energy_grad) {
                *g += e;
            }
            (energy + spec.omega * p.value, grad, p.value)
        }
    };
    Ok(MeritValue { f, grad, energy, penalty })
}
