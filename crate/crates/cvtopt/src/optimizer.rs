//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! The solver keeps a short history of (step, gradient-change) pairs in the
//! usual compact representation, walks the projected-gradient path to a
//! generalized Cauchy point, minimizes the quadratic model over the free
//! variables, and searches the resulting feasible direction for a
//! strong-Wolfe point (sufficient decrease plus a curvature bound, which
//! keeps the history pairs well conditioned). Trial points whose diagram
//! is degenerate are treated as failed line-search steps and the step is
//! shortened.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::SiteSet;
use crate::penalties::{merit_eval_with, MeritSpec};

/// Componentwise bounds on the flattened site coordinates.
#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Bounds { lower, upper }
    }

    /// All coordinates constrained to `[0, side]`.
    pub fn square(kappa0: usize, side: f64) -> Self {
        Bounds { lower: vec![0.0; 2 * kappa0], upper: vec![side; 2 * kappa0] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

/// Solver knobs. `for_sites` applies the default budget of `50 * kappa0`
/// iterations and ten times as many function evaluations.
#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    /// Number of stored history pairs.
    pub memory: usize,
    /// Projected-gradient infinity-norm tolerance.
    pub eps_opt: f64,
    pub max_iter: usize,
    pub max_feval: usize,
    /// Lack-of-progress threshold multiplier on the machine epsilon.
    pub progress_factor: f64,
    /// Evaluate per-cell work in parallel (sums keep a fixed order, but the
    /// diagram build schedule changes).
    pub parallel: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory: 5,
            eps_opt: 1e-8,
            max_iter: 1000,
            max_feval: 10_000,
            // Declare lack of progress only when an accepted step moves the
            // objective by about one ulp. The customary 1e7 multiplier fires
            // while the projected gradient is still far above eps_opt on
            // these problems and the gradient rule never gets to act.
            progress_factor: 1.0,
            parallel: false,
        }
    }
}

impl OptimizerConfig {
    pub fn for_sites(kappa0: usize) -> Self {
        let max_iter = 50 * kappa0.max(1);
        OptimizerConfig { max_iter, max_feval: 10 * max_iter, ..Default::default() }
    }
}

/// Why the solver stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Projected gradient below tolerance.
    Converged,
    /// Function decrease fell below the progress threshold, or no
    /// acceptable step existed along any direction.
    NoProgress,
    IterLimit,
    EvalLimit,
    /// A trial point stayed degenerate after the full step backoff.
    Degenerate,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::Converged => "converged",
            Termination::NoProgress => "no-progress",
            Termination::IterLimit => "iter-limit",
            Termination::EvalLimit => "eval-limit",
            Termination::Degenerate => "degenerate",
        };
        write!(f, "{s}")
    }
}

/// Outcome of one optimization run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub f_star: f64,
    /// Projected-gradient infinity norm at the returned point.
    pub pg_norm: f64,
    /// CVT energy at the returned point.
    pub energy: f64,
    /// Penalty value at the returned point.
    pub penalty: f64,
    pub iterations: usize,
    pub fevals: usize,
    pub wall_time_s: f64,
    pub termination: Termination,
}

/// Componentwise clamp of `x` into the bounds.
pub fn project_box(x: &[f64], bounds: &Bounds) -> Vec<f64> {
    x.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&v, (&l, &u))| v.clamp(l, u))
        .collect()
}

/// Infinity norm of the continuous projected gradient
/// `P(x - g) - x` at a feasible point.
pub fn projected_gradient_norm(x: &[f64], grad: &[f64], bounds: &Bounds) -> f64 {
    x.iter()
        .zip(grad)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((&xi, &gi), (&l, &u))| ((xi - gi).clamp(l, u) - xi).abs())
        .fold(0.0, f64::max)
}

/// A smooth function with gradient over a box. Evaluations may fail on
/// degenerate points; the solver shortens the step in response.
pub trait Objective {
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;

struct LbfgsState {
    s_pairs: VecDeque<DVector<f64>>,
    y_pairs: VecDeque<DVector<f64>>,
    theta: f64,
    /// `[Y, theta S]`, one column per stored vector.
    w_mat: DMatrix<f64>,
    /// Middle matrix of the compact representation, already inverted.
    m_mat: DMatrix<f64>,
    memory: usize,
}

impl LbfgsState {
    fn new(n: usize, memory: usize) -> Self {
        LbfgsState {
            s_pairs: VecDeque::new(),
            y_pairs: VecDeque::new(),
            theta: 1.0,
            w_mat: DMatrix::zeros(n, 0),
            m_mat: DMatrix::zeros(0, 0),
            memory,
        }
    }

    fn clear(&mut self, n: usize) {
        self.s_pairs.clear();
        self.y_pairs.clear();
        self.theta = 1.0;
        self.w_mat = DMatrix::zeros(n, 0);
        self.m_mat = DMatrix::zeros(0, 0);
    }

    fn has_history(&self) -> bool {
        !self.s_pairs.is_empty()
    }

    /// Accepts or rejects a new pair by the curvature condition and
    /// refreshes the compact matrices.
    fn update(&mut self, s: DVector<f64>, y: DVector<f64>) {
        let sy = s.dot(&y);
        let yy = y.dot(&y);
        if !(sy > f64::EPSILON * yy) {
            return;
        }
        self.s_pairs.push_back(s);
        self.y_pairs.push_back(y);
        if self.s_pairs.len() > self.memory {
            self.s_pairs.pop_front();
            self.y_pairs.pop_front();
        }
        self.theta = yy / sy;
        self.rebuild();
    }

    fn rebuild(&mut self) {
        let m = self.s_pairs.len();
        let n = self.s_pairs[0].len();
        let s_mat = DMatrix::from_fn(n, m, |i, j| self.s_pairs[j][i]);
        let y_mat = DMatrix::from_fn(n, m, |i, j| self.y_pairs[j][i]);
        let mut w = DMatrix::zeros(n, 2 * m);
        w.view_mut((0, 0), (n, m)).copy_from(&y_mat);
        w.view_mut((0, m), (n, m)).copy_from(&(s_mat.scale(self.theta)));

        let s_tr_y = s_mat.transpose() * &y_mat;
        let mut l_mat = s_tr_y.lower_triangle();
        l_mat.set_diagonal(&DVector::zeros(m));
        let d_vec = s_tr_y.diagonal();
        let mut m_inv = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            m_inv[(i, i)] = -d_vec[i];
        }
        m_inv.view_mut((m, 0), (m, m)).copy_from(&l_mat);
        m_inv.view_mut((0, m), (m, m)).copy_from(&l_mat.transpose());
        m_inv
            .view_mut((m, m), (m, m))
            .copy_from(&((s_mat.transpose() * &s_mat).scale(self.theta)));
        match m_inv.try_inverse() {
            Some(inv) => {
                self.w_mat = w;
                self.m_mat = inv;
            }
            None => self.clear(n),
        }
    }
}

/// Generalized Cauchy point along the projected-gradient path, with the
/// accumulated vector `c = W^T (x_cp - x)` needed by the subspace step.
fn cauchy_point(
    x: &DVector<f64>,
    g: &DVector<f64>,
    bounds: &Bounds,
    state: &LbfgsState,
) -> (DVector<f64>, DVector<f64>) {
    let n = x.len();
    let cols = state.w_mat.ncols();
    let mut t_break = vec![0.0f64; n];
    let mut d = DVector::zeros(n);
    for i in 0..n {
        t_break[i] = if g[i] < 0.0 {
            (x[i] - bounds.upper[i]) / g[i]
        } else if g[i] > 0.0 {
            (x[i] - bounds.lower[i]) / g[i]
        } else {
            f64::INFINITY
        };
        d[i] = if t_break[i] > 0.0 { -g[i] } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| t_break[i] > 0.0).collect();
    order.sort_by(|&a, &b| t_break[a].total_cmp(&t_break[b]));

    let mut x_cp = x.clone();
    let mut p = state.w_mat.transpose() * &d;
    let mut c = DVector::zeros(cols);
    let mut fp = -d.dot(&d);
    let mut fpp = -state.theta * fp - p.dot(&(&state.m_mat * &p));
    let mut dt_min = if fpp > 0.0 { -fp / fpp } else { f64::INFINITY };
    let mut t_old = 0.0;

    let mut idx = 0;
    while idx < order.len() {
        let b = order[idx];
        let t_b = t_break[b];
        let dt = t_b - t_old;
        if dt_min < dt {
            break;
        }
        // Walk to the breakpoint: variable b reaches its bound.
        x_cp[b] = if d[b] > 0.0 { bounds.upper[b] } else { bounds.lower[b] };
        let z_b = x_cp[b] - x[b];
        c += p.scale(dt);
        let g_b = g[b];
        let w_b = state.w_mat.row(b).transpose();
        fp += dt * fpp + g_b * g_b + state.theta * g_b * z_b - g_b * w_b.dot(&(&state.m_mat * &c));
        fpp -= state.theta * g_b * g_b
            + 2.0 * g_b * w_b.dot(&(&state.m_mat * &p))
            + g_b * g_b * w_b.dot(&(&state.m_mat * &w_b));
        p += w_b.scale(g_b);
        d[b] = 0.0;
        dt_min = if fpp > 0.0 { -fp / fpp } else { f64::INFINITY };
        t_old = t_b;
        idx += 1;
    }

    let dt_min = dt_min.max(0.0);
    let t_cp = if dt_min.is_finite() {
        t_old + dt_min
    } else if idx < order.len() {
        t_break[order[idx]]
    } else {
        t_old
    };
    for i in 0..n {
        if d[i] != 0.0 {
            x_cp[i] = (x[i] + t_cp * d[i]).clamp(bounds.lower[i], bounds.upper[i]);
        }
    }
    if dt_min.is_finite() {
        c += p.scale(dt_min);
    }
    (x_cp, c)
}

/// Quadratic-model minimization over the variables free at the Cauchy
/// point (direct primal method), clipped back into the box.
fn subspace_step(
    x: &DVector<f64>,
    g: &DVector<f64>,
    x_cp: &DVector<f64>,
    c: &DVector<f64>,
    bounds: &Bounds,
    state: &LbfgsState,
) -> DVector<f64> {
    let n = x.len();
    let eps_act = 0.0;
    let free: Vec<usize> = (0..n)
        .filter(|&i| x_cp[i] - bounds.lower[i] > eps_act && bounds.upper[i] - x_cp[i] > eps_act)
        .collect();
    if free.is_empty() {
        return x_cp.clone();
    }
    let t = free.len();
    // Reduced gradient of the quadratic model at the Cauchy point.
    let mut r = DVector::zeros(t);
    let wmc = if state.w_mat.ncols() > 0 {
        &state.w_mat * (&state.m_mat * c)
    } else {
        DVector::zeros(n)
    };
    for (row, &i) in free.iter().enumerate() {
        r[row] = g[i] + state.theta * (x_cp[i] - x[i]) - wmc[i];
    }

    let du = if state.w_mat.ncols() == 0 {
        -r.scale(1.0 / state.theta)
    } else {
        let cols = state.w_mat.ncols();
        let mut w_free = DMatrix::zeros(t, cols);
        for (row, &i) in free.iter().enumerate() {
            w_free.row_mut(row).copy_from(&state.w_mat.row(i));
        }
        let wf_r = w_free.transpose() * &r;
        let nu = &state.m_mat * &wf_r;
        let big_n = DMatrix::identity(cols, cols)
            - (&state.m_mat * (w_free.transpose() * &w_free)).scale(1.0 / state.theta);
        match big_n.lu().solve(&nu) {
            Some(nu_hat) => {
                -(r.scale(1.0 / state.theta)
                    + (w_free * nu_hat).scale(1.0 / (state.theta * state.theta)))
            }
            None => -r.scale(1.0 / state.theta),
        }
    };

    // Longest feasible fraction of the subspace step.
    let mut alpha: f64 = 1.0;
    for (row, &i) in free.iter().enumerate() {
        if du[row] > 0.0 {
            alpha = alpha.min((bounds.upper[i] - x_cp[i]) / du[row]);
        } else if du[row] < 0.0 {
            alpha = alpha.min((bounds.lower[i] - x_cp[i]) / du[row]);
        }
    }
    let alpha = alpha.clamp(0.0, 1.0);
    let mut x_bar = x_cp.clone();
    for (row, &i) in free.iter().enumerate() {
        x_bar[i] += alpha * du[row];
    }
    x_bar
}

enum LineSearchOutcome {
    Accepted { alpha: f64, x: DVector<f64>, f: f64, g: DVector<f64> },
    /// All backtracks evaluated but none satisfied the decrease condition.
    NoDecrease,
    /// Every trial down to the smallest step was degenerate.
    Degenerate,
}

/// One evaluated point on the search ray.
struct RayPoint {
    alpha: f64,
    f: f64,
    /// Directional derivative `g(x + alpha d)^T d`.
    deriv: f64,
    x: DVector<f64>,
    g: DVector<f64>,
}

enum RayEval {
    Point(RayPoint),
    /// The trial diagram was degenerate.
    Degenerate,
}

/// Minimizer of the cubic through two evaluated points, safeguarded to the
/// interior of the interval; falls back to the midpoint.
fn cubic_step(lo: &RayPoint, hi_alpha: f64, hi_f: f64, hi_deriv: Option<f64>) -> f64 {
    let (a0, f0, d0) = (lo.alpha, lo.f, lo.deriv);
    let (a1, f1) = (hi_alpha, hi_f);
    let width = a1 - a0;
    let mid = a0 + 0.5 * width;
    let candidate = match hi_deriv {
        Some(d1) => {
            // Cubic Hermite interpolation on both endpoint slopes.
            let d_sum = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1);
            let disc = d_sum * d_sum - d0 * d1;
            if disc < 0.0 {
                mid
            } else {
                let sq = disc.sqrt() * width.signum();
                a1 - (a1 - a0) * (d1 + sq - d_sum) / (d1 - d0 + 2.0 * sq)
            }
        }
        None => {
            // Quadratic through f0, d0, f1.
            let denom = f1 - f0 - d0 * width;
            if denom.abs() < f64::MIN_POSITIVE {
                mid
            } else {
                a0 - 0.5 * d0 * width * width / denom
            }
        }
    };
    if !candidate.is_finite() {
        return mid;
    }
    // Keep a safeguard margin inside the interval.
    let margin = 0.1 * width;
    let (lo_end, hi_end) = if width > 0.0 {
        (a0 + margin, a1 - margin)
    } else {
        (a1 - margin, a0 + margin)
    };
    candidate.clamp(lo_end.min(hi_end), lo_end.max(hi_end))
}

/// Strong-Wolfe line search (sufficient decrease plus a curvature bound on
/// the directional derivative) by bracketing and interpolation. Degenerate
/// trial points shrink the step like failed trials. Falls back to the best
/// sufficient-decrease point when the curvature condition cannot be met.
fn line_search(
    obj: &dyn Objective,
    x: &DVector<f64>,
    f0: f64,
    dir: &DVector<f64>,
    deriv0: f64,
    bounds: &Bounds,
    fevals: &mut usize,
    max_feval: usize,
) -> Result<LineSearchOutcome> {
    const WOLFE_C2: f64 = 0.9;
    let n = x.len();
    // Largest feasible step along the ray (>= 1 when dir = x_bar - x).
    let mut alpha_max = f64::INFINITY;
    for i in 0..n {
        if dir[i] > 0.0 {
            alpha_max = alpha_max.min((bounds.upper[i] - x[i]) / dir[i]);
        } else if dir[i] < 0.0 {
            alpha_max = alpha_max.min((bounds.lower[i] - x[i]) / dir[i]);
        }
    }
    let alpha_max = alpha_max.max(1.0);

    let mut evals_left = MAX_BACKTRACKS + 10;
    let mut eval_ray = |alpha: f64| -> Result<Option<RayEval>> {
        if *fevals >= max_feval || evals_left == 0 {
            return Ok(None);
        }
        evals_left -= 1;
        let x_t: Vec<f64> = (0..n)
            .map(|i| (x[i] + alpha * dir[i]).clamp(bounds.lower[i], bounds.upper[i]))
            .collect();
        *fevals += 1;
        match obj.eval(&x_t) {
            Ok((f_t, g_t)) => {
                let g_t = DVector::from_vec(g_t);
                let deriv = g_t.dot(dir);
                Ok(Some(RayEval::Point(RayPoint {
                    alpha,
                    f: f_t,
                    deriv,
                    x: DVector::from_vec(x_t),
                    g: g_t,
                })))
            }
            Err(Error::DegenerateInput(_)) | Err(Error::DegenerateVertex(_)) => {
                Ok(Some(RayEval::Degenerate))
            }
            Err(other) => Err(other),
        }
    };

    let armijo = |p: &RayPoint| p.f <= f0 + ARMIJO_C1 * p.alpha * deriv0;
    let wolfe = |p: &RayPoint| p.deriv.abs() <= WOLFE_C2 * deriv0.abs();
    let accept = |p: RayPoint| LineSearchOutcome::Accepted {
        alpha: p.alpha,
        x: p.x,
        f: p.f,
        g: p.g,
    };

    // Bracketing phase: expand until the minimum is trapped. Degenerate or
    // rising trials close the bracket; flat descending trials expand.
    let mut alpha = 1.0_f64.min(alpha_max);
    let mut prev: Option<RayPoint> = None;
    let mut any_valid = false;
    let mut halvings = 0usize;
    let bracket = loop {
        match eval_ray(alpha)? {
            None => {
                return Ok(if any_valid {
                    LineSearchOutcome::NoDecrease
                } else {
                    LineSearchOutcome::Degenerate
                })
            }
            Some(RayEval::Degenerate) => {
                // Shorten toward the valid region around alpha = 0.
                if let Some(p) = prev.take() {
                    break (p, alpha, f64::INFINITY, None);
                }
                halvings += 1;
                if halvings > MAX_BACKTRACKS {
                    return Ok(LineSearchOutcome::Degenerate);
                }
                alpha *= 0.5;
            }
            Some(RayEval::Point(p)) => {
                any_valid = true;
                let worse_than_prev = prev.as_ref().map_or(false, |q| p.f >= q.f);
                if !armijo(&p) || worse_than_prev {
                    // Minimum lies between the last good point and here.
                    let lo = prev.take().unwrap_or(RayPoint {
                        alpha: 0.0,
                        f: f0,
                        deriv: deriv0,
                        x: x.clone(),
                        g: DVector::zeros(0),
                    });
                    break (lo, p.alpha, p.f, Some(p));
                }
                if wolfe(&p) {
                    return Ok(accept(p));
                }
                if p.deriv >= 0.0 {
                    // Passed the minimum while still decreasing enough.
                    let hi = prev.take().unwrap_or(RayPoint {
                        alpha: 0.0,
                        f: f0,
                        deriv: deriv0,
                        x: x.clone(),
                        g: DVector::zeros(0),
                    });
                    break (p, hi.alpha, hi.f, Some(hi));
                }
                if alpha >= alpha_max {
                    // Feasibility-limited descent step.
                    return Ok(accept(p));
                }
                let next = (2.0 * alpha).min(alpha_max);
                prev = Some(p);
                alpha = next;
            }
        }
    };

    // Zoom phase: lo always satisfies the decrease condition (or is the
    // origin); hi brackets from the other side.
    let (mut lo, mut hi_alpha, mut hi_f, mut hi_point) = bracket;
    for _ in 0..MAX_BACKTRACKS {
        let width = (hi_alpha - lo.alpha).abs();
        if width <= 1e-14 * (1.0 + lo.alpha.abs()) {
            break;
        }
        let hi_deriv = hi_point.as_ref().map(|p: &RayPoint| p.deriv);
        let alpha_t = cubic_step(&lo, hi_alpha, hi_f, hi_deriv);
        match eval_ray(alpha_t)? {
            None => break,
            Some(RayEval::Degenerate) => {
                // Shrink toward lo, which is known to be valid.
                hi_alpha = alpha_t;
                hi_f = f64::INFINITY;
                hi_point = None;
            }
            Some(RayEval::Point(p)) => {
                any_valid = true;
                if !armijo(&p) || p.f >= lo.f {
                    hi_alpha = p.alpha;
                    hi_f = p.f;
                    hi_point = Some(p);
                } else {
                    if wolfe(&p) {
                        return Ok(accept(p));
                    }
                    if p.deriv * (hi_alpha - lo.alpha) >= 0.0 {
                        hi_alpha = lo.alpha;
                        hi_f = lo.f;
                        hi_point = None;
                    }
                    lo = p;
                }
            }
        }
    }

    // Curvature condition unmet: settle for the best decrease point.
    if lo.alpha > 0.0 && lo.f < f0 && armijo(&lo) {
        return Ok(accept(lo));
    }
    Ok(if any_valid { LineSearchOutcome::NoDecrease } else { LineSearchOutcome::Degenerate })
}

/// Statistics of a generic solve (the merit wrapper adds components).
#[derive(Clone, Debug)]
pub struct SolveStats {
    pub f_star: f64,
    pub pg_norm: f64,
    pub iterations: usize,
    pub fevals: usize,
    pub wall_time_s: f64,
    pub termination: Termination,
}

/// Minimizes a generic objective over a box from a feasible start.
/// Returns the last iterate; the objective is non-increasing across
/// accepted steps.
pub fn minimize_objective(
    obj: &dyn Objective,
    x0: &[f64],
    bounds: &Bounds,
    config: &OptimizerConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    assert_eq!(x0.len(), bounds.dim());
    let start = Instant::now();
    let n = x0.len();
    let mut fevals = 0usize;
    let mut iterations = 0usize;

    let mut x = DVector::from_vec(project_box(x0, bounds));
    fevals += 1;
    let (mut f, g0) = obj.eval(x.as_slice())?;
    let mut g = DVector::from_vec(g0);
    let mut state = LbfgsState::new(n, config.memory.max(1));

    let finish = |x: DVector<f64>,
                  f: f64,
                  g: &DVector<f64>,
                  iterations: usize,
                  fevals: usize,
                  termination: Termination| {
        let pg = projected_gradient_norm(x.as_slice(), g.as_slice(), bounds);
        (
            x.as_slice().to_vec(),
            SolveStats {
                f_star: f,
                pg_norm: pg,
                iterations,
                fevals,
                wall_time_s: start.elapsed().as_secs_f64(),
                termination,
            },
        )
    };

    loop {
        let pg = projected_gradient_norm(x.as_slice(), g.as_slice(), bounds);
        if pg <= config.eps_opt {
            return Ok(finish(x, f, &g, iterations, fevals, Termination::Converged));
        }
        if iterations >= config.max_iter {
            return Ok(finish(x, f, &g, iterations, fevals, Termination::IterLimit));
        }
        if fevals >= config.max_feval {
            return Ok(finish(x, f, &g, iterations, fevals, Termination::EvalLimit));
        }

        // Direction from the quadratic model; fall back to the pure
        // projected gradient when the model step is not a descent direction.
        let mut retried = false;
        let outcome = loop {
            let (x_cp, c) = cauchy_point(&x, &g, bounds, &state);
            let x_bar = subspace_step(&x, &g, &x_cp, &c, bounds, &state);
            let mut dir = &x_bar - &x;
            let mut dir_deriv = g.dot(&dir);
            if !(dir_deriv < 0.0) {
                if state.has_history() && !retried {
                    state.clear(n);
                    retried = true;
                    continue;
                }
                let fallback: Vec<f64> = (0..n)
                    .map(|i| {
                        (x[i] - g[i]).clamp(bounds.lower[i], bounds.upper[i]) - x[i]
                    })
                    .collect();
                dir = DVector::from_vec(fallback);
                dir_deriv = g.dot(&dir);
                if !(dir_deriv < 0.0) {
                    break LineSearchOutcome::NoDecrease;
                }
            }
            match line_search(obj, &x, f, &dir, dir_deriv, bounds, &mut fevals, config.max_feval)? {
                LineSearchOutcome::Accepted { alpha, x, f, g } => {
                    break LineSearchOutcome::Accepted { alpha, x, f, g }
                }
                LineSearchOutcome::NoDecrease if state.has_history() && !retried => {
                    // The model step made no progress; restart from the
                    // steepest-descent model.
                    state.clear(n);
                    retried = true;
                }
                other => break other,
            }
        };

        match outcome {
            LineSearchOutcome::Accepted { alpha: _, x: x_new, f: f_new, g: g_new } => {
                iterations += 1;
                let s = &x_new - &x;
                let y = &g_new - &g;
                let f_old = f;
                x = x_new;
                f = f_new;
                state.update(s, y);
                let pg_new = projected_gradient_norm(x.as_slice(), g_new.as_slice(), bounds);
                g = g_new;
                if pg_new <= config.eps_opt {
                    return Ok(finish(x, f, &g, iterations, fevals, Termination::Converged));
                }
                let progress_floor = config.progress_factor
                    * f64::EPSILON
                    * f_old.abs().max(f.abs()).max(1.0);
                if (f_old - f).abs() <= progress_floor {
                    return Ok(finish(x, f, &g, iterations, fevals, Termination::NoProgress));
                }
            }
            LineSearchOutcome::NoDecrease => {
                return Ok(finish(x, f, &g, iterations, fevals, Termination::NoProgress));
            }
            LineSearchOutcome::Degenerate => {
                return Ok(finish(x, f, &g, iterations, fevals, Termination::Degenerate));
            }
        }
    }
}

struct MeritObjective<'a> {
    spec: &'a MeritSpec,
    template: &'a SiteSet,
    parallel: bool,
}

impl Objective for MeritObjective<'_> {
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let sites = self.template.with_coords(x.to_vec());
        let m = merit_eval_with(self.spec, &sites, self.parallel)?;
        Ok((m.f, m.grad))
    }
}

/// Minimizes a merit function over the site coordinates.
///
/// Returns the final sites together with a report whose components
/// (energy, penalty, projected-gradient norm) are recomputed independently
/// at the returned point.
pub fn minimize(
    spec: &MeritSpec,
    a0: &SiteSet,
    bounds: &Bounds,
    config: &OptimizerConfig,
) -> Result<(SiteSet, RunReport)> {
    spec.validate()?;
    let obj = MeritObjective { spec, template: a0, parallel: config.parallel };
    let (x, stats) = minimize_objective(&obj, &a0.coords, bounds, config)?;
    let sites = a0.with_coords(x);
    let m = merit_eval_with(spec, &sites, config.parallel)?;
    let pg = projected_gradient_norm(&sites.coords, &m.grad, bounds);
    Ok((
        sites,
        RunReport {
            f_star: m.f,
            pg_norm: pg,
            energy: m.energy,
            penalty: m.penalty,
            iterations: stats.iterations,
            fevals: stats.fevals,
            wall_time_s: stats.wall_time_s,
            termination: stats.termination,
        },
    ))
}

/// Central finite differences of the merit value, one coordinate at a time.
pub fn finite_difference_gradient(spec: &MeritSpec, a: &SiteSet, h: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; a.coords.len()];
    for k in 0..a.coords.len() {
        let mut plus = a.coords.clone();
        let mut minus = a.coords.clone();
        plus[k] += h;
        minus[k] -= h;
        let fp = merit_eval_with(spec, &a.with_coords(plus), false)?.f;
        let fm = merit_eval_with(spec, &a.with_coords(minus), false)?.f;
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
