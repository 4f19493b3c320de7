//! Python bindings: diagrams, energies, gradients, merit functions and the
//! box-constrained optimizer, all over flat `[x0, y0, x1, y1, ...]`
//! coordinate lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cvtopt::energy;
use cvtopt::experiment;
use cvtopt::geometry::{self, BoxDomain, Point2, SiteSet};
use cvtopt::optimizer::{self, Bounds, OptimizerConfig};
use cvtopt::penalties::{self, DensityField, GradientVariant, MeritKind, MeritSpec};

fn to_py_err(err: cvtopt::Error) -> PyErr {
    match err {
        cvtopt::Error::Config(_) | cvtopt::Error::Parse { .. } => {
            PyValueError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn site_set(coords: Vec<f64>, side: Option<f64>) -> PyResult<SiteSet> {
    if coords.len() % 2 != 0 || coords.is_empty() {
        return Err(PyValueError::new_err("coords must hold a non-empty list of (x, y) pairs"));
    }
    let kappa0 = coords.len() / 2;
    let domain = match side {
        Some(l) if l > 0.0 => BoxDomain::new(l),
        Some(_) => return Err(PyValueError::new_err("side must be positive")),
        None => BoxDomain::for_sites(kappa0),
    };
    Ok(SiteSet::new(coords, domain))
}

fn gradient_variant(name: &str) -> PyResult<GradientVariant> {
    match name {
        "integral" => Ok(GradientVariant::Integral),
        "explicit" => Ok(GradientVariant::Explicit),
        other => Err(PyValueError::new_err(format!(
            "unknown gradient variant '{other}' (use 'integral' or 'explicit')"
        ))),
    }
}

fn merit_spec(
    merit: &str,
    omega: f64,
    c2: Option<f64>,
    psi: Option<u8>,
    side: f64,
    grad: &str,
) -> PyResult<MeritSpec> {
    let gradient_variant = gradient_variant(grad)?;
    let kind = match merit {
        "g" => MeritKind::EnergyOnly,
        "f1" => MeritKind::EqualArea,
        "f2" => MeritKind::MinEdge,
        "f3" => MeritKind::Density,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown merit '{other}' (use 'g', 'f1', 'f2' or 'f3')"
            )))
        }
    };
    let field = match kind {
        MeritKind::Density => {
            let id = psi.ok_or_else(|| PyValueError::new_err("merit 'f3' requires psi"))?;
            Some(DensityField::by_id(id, side).map_err(to_py_err)?)
        }
        _ => None,
    };
    let spec = MeritSpec { kind, omega, c2, field, gradient_variant };
    spec.validate().map_err(to_py_err)?;
    Ok(spec)
}

/// A bounded Voronoi diagram over `[0, side]^2`, frozen at construction.
#[pyclass(name = "Diagram")]
struct PyDiagram {
    diagram: geometry::Diagram,
    sites: SiteSet,
}

#[pymethods]
impl PyDiagram {
    #[new]
    #[pyo3(signature = (coords, side=None))]
    fn new(coords: Vec<f64>, side: Option<f64>) -> PyResult<Self> {
        let sites = site_set(coords, side)?;
        let diagram = geometry::build_diagram(&sites).map_err(to_py_err)?;
        Ok(PyDiagram { diagram, sites })
    }

    #[getter]
    fn side(&self) -> f64 {
        self.sites.domain.side
    }

    fn cell_count(&self) -> usize {
        self.diagram.kappa0()
    }

    fn total_area(&self) -> f64 {
        self.diagram.total_area
    }

    /// Counterclockwise vertex list of one cell.
    fn cell_polygon(&self, i: usize) -> PyResult<Vec<(f64, f64)>> {
        self.check_index(i)?;
        Ok(self.diagram.cells[i].vertices.iter().map(|v| (v.pos.x, v.pos.y)).collect())
    }

    fn cell_area(&self, i: usize) -> PyResult<f64> {
        self.check_index(i)?;
        Ok(geometry::cell_measures(&self.diagram, i).area)
    }

    fn cell_centroid(&self, i: usize) -> PyResult<(f64, f64)> {
        self.check_index(i)?;
        let c = geometry::cell_measures(&self.diagram, i).centroid;
        Ok((c.x, c.y))
    }

    fn cell_perimeter(&self, i: usize) -> PyResult<f64> {
        self.check_index(i)?;
        Ok(geometry::cell_measures(&self.diagram, i).perimeter)
    }

    fn min_edge_ratio(&self, i: usize) -> PyResult<f64> {
        self.check_index(i)?;
        Ok(geometry::cell_measures(&self.diagram, i).min_edge_ratio())
    }

    fn areas(&self) -> Vec<f64> {
        (0..self.diagram.kappa0())
            .map(|i| geometry::cell_measures(&self.diagram, i).area)
            .collect()
    }

    /// Index of the site whose cell contains the query point.
    fn locate(&self, x: f64, y: f64) -> usize {
        geometry::nearest_site(&self.sites, Point2::new(x, y))
    }

    fn __len__(&self) -> usize {
        self.diagram.kappa0()
    }

    fn __repr__(&self) -> String {
        format!(
            "Diagram(kappa0={}, side={})",
            self.diagram.kappa0(),
            self.sites.domain.side
        )
    }
}

impl PyDiagram {
    fn check_index(&self, i: usize) -> PyResult<()> {
        if i < self.diagram.kappa0() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "cell index {i} out of range for {} cells",
                self.diagram.kappa0()
            )))
        }
    }
}

/// Merit value with components and gradient.
#[pyclass(name = "MeritValue")]
struct PyMeritValue {
    #[pyo3(get)]
    f: f64,
    #[pyo3(get)]
    grad: Vec<f64>,
    #[pyo3(get)]
    energy: f64,
    #[pyo3(get)]
    penalty: f64,
}

#[pymethods]
impl PyMeritValue {
    fn __repr__(&self) -> String {
        format!(
            "MeritValue(f={:.6e}, energy={:.6e}, penalty={:.6e})",
            self.f, self.energy, self.penalty
        )
    }
}

/// Result of an optimization run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    #[pyo3(get)]
    coords: Vec<f64>,
    #[pyo3(get)]
    f: f64,
    #[pyo3(get)]
    pg_norm: f64,
    #[pyo3(get)]
    energy: f64,
    #[pyo3(get)]
    penalty: f64,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    fevals: usize,
    #[pyo3(get)]
    wall_time_s: f64,
    #[pyo3(get)]
    termination: String,
}

#[pymethods]
impl PyRunResult {
    fn __repr__(&self) -> String {
        format!(
            "RunResult(f={:.6e}, pg_norm={:.2e}, iterations={}, termination='{}')",
            self.f, self.pg_norm, self.iterations, self.termination
        )
    }
}

/// Uniform random sites in `[0, sqrt(kappa0)]^2`, deterministic per seed.
#[pyfunction]
fn sample_sites(kappa0: usize, seed: u64) -> PyResult<Vec<f64>> {
    if kappa0 == 0 {
        return Err(PyValueError::new_err("kappa0 must be at least 1"));
    }
    Ok(experiment::sample_uniform_sites(kappa0, seed).coords)
}

/// Exact CVT energy of the diagram of `coords` for unit density.
#[pyfunction]
#[pyo3(signature = (coords, side=None))]
fn cvt_energy(coords: Vec<f64>, side: Option<f64>) -> PyResult<f64> {
    let sites = site_set(coords, side)?;
    let diagram = geometry::build_diagram(&sites).map_err(to_py_err)?;
    Ok(energy::cvt_energy(&diagram, &sites).total)
}

/// Gradient of the CVT energy; `grad` picks the formula.
#[pyfunction]
#[pyo3(signature = (coords, side=None, grad="integral"))]
fn cvt_gradient(coords: Vec<f64>, side: Option<f64>, grad: &str) -> PyResult<Vec<f64>> {
    let sites = site_set(coords, side)?;
    let diagram = geometry::build_diagram(&sites).map_err(to_py_err)?;
    match gradient_variant(grad)? {
        GradientVariant::Integral => Ok(energy::cvt_gradient_integral(&diagram, &sites)),
        GradientVariant::Explicit => {
            energy::cvt_gradient_explicit(&diagram, &sites).map_err(to_py_err)
        }
    }
}

/// One centroid (Lloyd) step applied to every site.
#[pyfunction]
#[pyo3(signature = (coords, side=None))]
fn lloyd_step(coords: Vec<f64>, side: Option<f64>) -> PyResult<Vec<f64>> {
    let sites = site_set(coords, side)?;
    let diagram = geometry::build_diagram(&sites).map_err(to_py_err)?;
    Ok(energy::lloyd_step(&diagram, &sites).coords)
}

/// Value, gradient and components of a merit function at `coords`.
#[pyfunction]
#[pyo3(signature = (coords, merit="g", omega=0.01, c2=None, psi=None, side=None, grad="integral"))]
fn merit_eval(
    coords: Vec<f64>,
    merit: &str,
    omega: f64,
    c2: Option<f64>,
    psi: Option<u8>,
    side: Option<f64>,
    grad: &str,
) -> PyResult<PyMeritValue> {
    let sites = site_set(coords, side)?;
    let spec = merit_spec(merit, omega, c2, psi, sites.domain.side, grad)?;
    let m = penalties::merit_eval(&spec, &sites).map_err(to_py_err)?;
    Ok(PyMeritValue { f: m.f, grad: m.grad, energy: m.energy, penalty: m.penalty })
}

/// Minimizes a merit function over the box from the given start.
#[pyfunction]
#[pyo3(signature = (coords, merit="g", omega=0.01, c2=None, psi=None, side=None,
                    grad="integral", eps=1e-8, max_iter=None))]
#[allow(clippy::too_many_arguments)]
fn optimize(
    coords: Vec<f64>,
    merit: &str,
    omega: f64,
    c2: Option<f64>,
    psi: Option<u8>,
    side: Option<f64>,
    grad: &str,
    eps: f64,
    max_iter: Option<usize>,
) -> PyResult<PyRunResult> {
    let sites = site_set(coords, side)?;
    let kappa0 = sites.kappa0();
    let spec = merit_spec(merit, omega, c2, psi, sites.domain.side, grad)?;
    let bounds = Bounds::square(kappa0, sites.domain.side);
    let mut config = OptimizerConfig::for_sites(kappa0);
    config.eps_opt = eps;
    if let Some(mi) = max_iter {
        config.max_iter = mi;
        config.max_feval = 10 * mi;
    }
    let (solution, report) =
        optimizer::minimize(&spec, &sites, &bounds, &config).map_err(to_py_err)?;
    Ok(PyRunResult {
        coords: solution.coords,
        f: report.f_star,
        pg_norm: report.pg_norm,
        energy: report.energy,
        penalty: report.penalty,
        iterations: report.iterations,
        fevals: report.fevals,
        wall_time_s: report.wall_time_s,
        termination: report.termination.to_string(),
    })
}

/// Central finite differences of a merit value (validation helper).
#[pyfunction]
#[pyo3(signature = (coords, merit="g", omega=0.01, c2=None, psi=None, side=None, h=1e-6))]
fn finite_difference_gradient(
    coords: Vec<f64>,
    merit: &str,
    omega: f64,
    c2: Option<f64>,
    psi: Option<u8>,
    side: Option<f64>,
    h: f64,
) -> PyResult<Vec<f64>> {
    let sites = site_set(coords, side)?;
    let spec = merit_spec(merit, omega, c2, psi, sites.domain.side, "integral")?;
    optimizer::finite_difference_gradient(&spec, &sites, h).map_err(to_py_err)
}

#[pymodule]
fn cvtopt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDiagram>()?;
    m.add_class::<PyMeritValue>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(sample_sites, m)?)?;
    m.add_function(wrap_pyfunction!(cvt_energy, m)?)?;
    m.add_function(wrap_pyfunction!(cvt_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(lloyd_step, m)?)?;
    m.add_function(wrap_pyfunction!(merit_eval, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(finite_difference_gradient, m)?)?;
    Ok(())
}
