//! Bounded Voronoi diagrams in a square domain and optimization of the
//! generator positions: CVT energy minimization combined with geometric
//! penalty terms (equal cell areas, no small edges, density-prescribed
//! areas), driven by exact analytic gradients and a box-constrained
//! limited-memory quasi-Newton solver.

pub mod energy;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod optimizer;
pub mod penalties;
pub mod render;
pub mod sensitivity;

pub use error::{Error, Result};
pub use geometry::{
    build_diagram, build_diagram_with, cell_measures, check_nondegeneracy, nearest_site,
    BoxDomain, Cell, CellEdge, CellMeasures, CellVertex, Degeneracy, DegeneracyReport, Diagram,
    EdgeKind, Point2, Side, SiteSet, VertexProvenance,
};
