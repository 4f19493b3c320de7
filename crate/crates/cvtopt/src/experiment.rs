//! Experiment runner: seeded starts, the two-stage optimization protocol,
//! and the CSV/SVG output bundle.
//!
//! A run minimizing a penalized merit function always starts from the
//! plain energy minimizer: the energy-only stage runs first from the
//! seeded uniform start and the merit stage continues from its solution.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::geometry::{build_diagram_with, cell_measures, check_nondegeneracy, BoxDomain, SiteSet};
use crate::optimizer::{minimize, Bounds, OptimizerConfig, RunReport, Termination};
use crate::penalties::{j1_eval, j2_terms, DensityField, GradientVariant, MeritKind, MeritSpec};
use crate::render::{area_histogram, edge_ratio_curve, render_svg, ColorMode, RenderOptions};

/// Draws a uniform value in `[0, 1)` with 53 random bits.
fn unit_f64(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `kappa0` independent uniform sites in `[0, sqrt(kappa0)]^2`.
///
/// The stream is fully determined by the seed: a ChaCha8 generator seeded
/// with `seed` produces `x_0, y_0, x_1, y_1, ...` where each coordinate
/// takes the top 53 bits of the next 64-bit word, scaled to the domain.
pub fn sample_uniform_sites(kappa0: usize, seed: u64) -> SiteSet {
    let domain = BoxDomain::for_sites(kappa0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(2 * kappa0);
    for _ in 0..kappa0 {
        coords.push(unit_f64(&mut rng) * domain.side);
        coords.push(unit_f64(&mut rng) * domain.side);
    }
    SiteSet::new(coords, domain)
}

/// Writes sites as `i,x,y` rows with 17 significant digits, enough for an
/// exact round trip.
pub fn write_sites_csv(path: &Path, sites: &SiteSet) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "i,x,y")?;
    for (i, p) in sites.sites().enumerate() {
        writeln!(out, "{i},{:.16e},{:.16e}", p.x, p.y)?;
    }
    Ok(())
}

/// Reads a `i,x,y` file back into a site set over `[0, sqrt(n)]^2`.
pub fn read_sites_csv(path: &Path) -> Result<SiteSet> {
    let text = fs::read_to_string(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "i,x,y" => {}
        other => return Err(parse_err(format!("expected header 'i,x,y', got {other:?}"))),
    }
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("row {}: expected 3 fields", lineno + 2)));
        }
        let i: usize = fields[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("row {}: bad index: {e}", lineno + 2)))?;
        let x: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("row {}: bad x: {e}", lineno + 2)))?;
        let y: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("row {}: bad y: {e}", lineno + 2)))?;
        rows.push((i, x, y));
    }
    let n = rows.len();
    if n == 0 {
        return Err(parse_err("no sites".into()));
    }
    let mut coords = vec![f64::NAN; 2 * n];
    for (i, x, y) in rows {
        if i >= n || !coords[2 * i].is_nan() {
            return Err(parse_err(format!("site index {i} out of range or repeated")));
        }
        coords[2 * i] = x;
        coords[2 * i + 1] = y;
    }
    Ok(SiteSet::new(coords, BoxDomain::for_sites(n)))
}

/// Everything a single run needs.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kappa0: usize,
    pub merit: MeritKind,
    pub omega: f64,
    pub c2: Option<f64>,
    /// Density profile number (1-3) for the density merit.
    pub psi: Option<u8>,
    pub gradient_variant: GradientVariant,
    pub seed: u64,
    pub eps_opt: f64,
    pub max_iter: Option<usize>,
    pub out_dir: PathBuf,
    pub render_svg: bool,
    pub show_sites: bool,
    pub allow_degenerate: bool,
    pub parallel: bool,
    /// Start from these sites instead of a seeded uniform sample.
    pub sites_in: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(kappa0: usize, merit: MeritKind, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            kappa0,
            merit,
            omega: 0.01,
            c2: None,
            psi: None,
            gradient_variant: GradientVariant::Integral,
            seed: 1,
            eps_opt: 1e-8,
            max_iter: None,
            out_dir: out_dir.into(),
            render_svg: false,
            show_sites: false,
            allow_degenerate: false,
            parallel: false,
            sites_in: None,
        }
    }

    fn merit_spec(&self, side: f64) -> Result<MeritSpec> {
        let spec = match self.merit {
            MeritKind::EnergyOnly => MeritSpec::energy_only(self.gradient_variant),
            MeritKind::EqualArea => MeritSpec {
                kind: MeritKind::EqualArea,
                omega: self.omega,
                c2: None,
                field: None,
                gradient_variant: self.gradient_variant,
            },
            MeritKind::MinEdge => MeritSpec {
                kind: MeritKind::MinEdge,
                omega: self.omega,
                c2: Some(self.c2.ok_or_else(|| Error::Config("--c2 is required for f2".into()))?),
                field: None,
                gradient_variant: self.gradient_variant,
            },
            MeritKind::Density => {
                let id = self.psi.ok_or_else(|| Error::Config("--psi is required for f3".into()))?;
                MeritSpec {
                    kind: MeritKind::Density,
                    omega: self.omega,
                    c2: None,
                    field: Some(DensityField::by_id(id, side)?),
                    gradient_variant: self.gradient_variant,
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One optimization stage of a run.
#[derive(Clone, Debug)]
pub struct StageReport {
    /// `g`, `f1`, `f2` or `f3`.
    pub label: &'static str,
    pub report: RunReport,
}

/// Paths of the files a run wrote.
#[derive(Clone, Debug)]
pub struct OutputBundle {
    pub report_csv: PathBuf,
    pub cells_csv: PathBuf,
    pub sites_out_csv: PathBuf,
    pub hist_csv: PathBuf,
    pub curve_csv: PathBuf,
    pub diagram_svg: Option<PathBuf>,
    pub stages: Vec<StageReport>,
    /// Final site positions.
    pub solution: SiteSet,
}

impl OutputBundle {
    /// True when every stage ended in a certificate or an honest
    /// lack-of-progress stop.
    pub fn all_stages_ok(&self) -> bool {
        self.stages
            .iter()
            .all(|s| matches!(s.report.termination, Termination::Converged | Termination::NoProgress))
    }
}

fn merit_label(kind: MeritKind) -> &'static str {
    match kind {
        MeritKind::EnergyOnly => "g",
        MeritKind::EqualArea => "f1",
        MeritKind::MinEdge => "f2",
        MeritKind::Density => "f3",
    }
}

/// Runs one experiment end to end: seeded (or file) start, degeneracy
/// gate, energy-only stage, merit stage, output files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<OutputBundle> {
    if cfg.kappa0 == 0 && cfg.sites_in.is_none() {
        return Err(Error::Config("kappa0 must be at least 1".into()));
    }
    if !(cfg.eps_opt > 0.0) {
        return Err(Error::Config("eps must be positive".into()));
    }

    let start = match &cfg.sites_in {
        Some(path) => read_sites_csv(path)?,
        None => sample_uniform_sites(cfg.kappa0, cfg.seed),
    };
    let kappa0 = start.kappa0();
    let side = start.domain.side;
    let spec = cfg.merit_spec(side)?;

    // Entry gate: reject flagged starting configurations unless overridden.
    let diagram = build_diagram_with(&start, cfg.parallel)?;
    let report = check_nondegeneracy(&diagram, &start, 1e-9 * side);
    if !report.is_clean() && !cfg.allow_degenerate {
        return Err(Error::DegenerateInput(format!(
            "starting configuration violates the non-degeneracy assumptions \
             ({} finding(s), first: {}); pass --allow-degenerate to proceed",
            report.violations.len(),
            report.violations[0]
        )));
    }

    let bounds = Bounds::square(kappa0, side);
    let mut opt_config = OptimizerConfig::for_sites(kappa0);
    opt_config.eps_opt = cfg.eps_opt;
    opt_config.parallel = cfg.parallel;
    if let Some(mi) = cfg.max_iter {
        opt_config.max_iter = mi;
        opt_config.max_feval = 10 * mi;
    }

    let mut stages = Vec::new();
    let energy_spec = MeritSpec::energy_only(cfg.gradient_variant);
    let (solution, final_spec) = if cfg.merit == MeritKind::EnergyOnly {
        let (sol, report) = minimize(&energy_spec, &start, &bounds, &opt_config)?;
        stages.push(StageReport { label: "g", report });
        (sol, energy_spec)
    } else {
        let (warm, report) = minimize(&energy_spec, &start, &bounds, &opt_config)?;
        stages.push(StageReport { label: "g", report });
        let (sol, report) = minimize(&spec, &warm, &bounds, &opt_config)?;
        stages.push(StageReport { label: merit_label(cfg.merit), report });
        (sol, spec)
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let path = |name: &str| cfg.out_dir.join(name);

    let sites_out_csv = path("sites_out.csv");
    write_sites_csv(&sites_out_csv, &solution)?;

    let final_diagram = build_diagram_with(&solution, cfg.parallel)?;
    let avg_area = final_diagram.total_area / kappa0 as f64;
    let j1 = j1_eval(&final_diagram, &solution);
    // Values only: the solution diagram may contain vertices too
    // degenerate for the gradient machinery (extreme density runs do).
    let j2 = j2_terms(&final_diagram, cfg.c2.unwrap_or(0.5))?;

    let cells_csv = path("cells.csv");
    {
        let mut out = fs::File::create(&cells_csv)?;
        writeln!(out, "i,area,j1_i,n_edges,perimeter,min_edge_ratio,j2_i")?;
        for i in 0..kappa0 {
            let m = cell_measures(&final_diagram, i);
            writeln!(
                out,
                "{i},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e}",
                m.area,
                j1.per_cell[i],
                m.edge_lengths.len(),
                m.perimeter,
                m.min_edge_ratio(),
                j2[i],
            )?;
        }
    }

    let report_csv = path("report.csv");
    {
        let mut out = fs::File::create(&report_csv)?;
        writeln!(out, "merit,kappa0,omega,c2,psi,grad,seed,f,pg_norm,G,J,it,fcnt,time_s,termination")?;
        for stage in &stages {
            let r = &stage.report;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.16e},{:.3e},{:.16e},{:.16e},{},{},{:.3},{}",
                stage.label,
                kappa0,
                if stage.label == "g" { 0.0 } else { cfg.omega },
                cfg.c2.map(|v| v.to_string()).unwrap_or_default(),
                cfg.psi.map(|v| v.to_string()).unwrap_or_default(),
                match cfg.gradient_variant {
                    GradientVariant::Integral => "integral",
                    GradientVariant::Explicit => "explicit",
                },
                cfg.seed,
                r.f_star,
                r.pg_norm,
                r.energy,
                r.penalty,
                r.iterations,
                r.fevals,
                r.wall_time_s,
                r.termination,
            )?;
        }
    }

    let hist_csv = path("hist.csv");
    {
        let areas: Vec<f64> =
            (0..kappa0).map(|i| cell_measures(&final_diagram, i).area / avg_area).collect();
        let mut out = fs::File::create(&hist_csv)?;
        writeln!(out, "bin_lo,bin_hi,proportion")?;
        for bin in area_histogram(&areas, 100) {
            writeln!(out, "{:.16e},{:.16e},{:.16e}", bin.lo, bin.hi, bin.proportion)?;
        }
    }

    let curve_csv = path("curve.csv");
    {
        let grid: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        let mut out = fs::File::create(&curve_csv)?;
        writeln!(out, "c,proportion")?;
        for (c, p) in edge_ratio_curve(&final_diagram, &grid) {
            writeln!(out, "{c},{p}")?;
        }
    }

    let diagram_svg = if cfg.render_svg {
        let mode = match final_spec.kind {
            MeritKind::EqualArea => ColorMode::EqualArea,
            MeritKind::MinEdge => ColorMode::MinEdge,
            _ => ColorMode::Plain,
        };
        let opts = RenderOptions { show_sites: cfg.show_sites, ..RenderOptions::for_mode(mode) };
        let svg_path = path("diagram.svg");
        fs::write(&svg_path, render_svg(&final_diagram, Some(&solution), &opts))?;
        Some(svg_path)
    } else {
        None
    };

    Ok(OutputBundle {
        report_csv,
        cells_csv,
        sites_out_csv,
        hist_csv,
        curve_csv,
        diagram_svg,
        stages,
        solution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = sample_uniform_sites(25, 42);
        let b = sample_uniform_sites(25, 42);
        assert_eq!(a.coords, b.coords);
        let c = sample_uniform_sites(25, 43);
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn sample_mean_matches_the_uniform_law() {
        let kappa0 = 10_000;
        let sites = sample_uniform_sites(kappa0, 7);
        let l = sites.domain.side;
        let (mut mx, mut my) = (0.0, 0.0);
        for p in sites.sites() {
            mx += p.x;
            my += p.y;
        }
        mx /= kappa0 as f64;
        my /= kappa0 as f64;
        // Standard error of the mean of U[0, L].
        let se = l / (12.0f64).sqrt() / (kappa0 as f64).sqrt();
        assert!((mx - l / 2.0).abs() <= 3.0 * se, "mean x {mx} vs {l}/2");
        assert!((my - l / 2.0).abs() <= 3.0 * se, "mean y {my} vs {l}/2");
    }

    #[test]
    fn sites_csv_round_trips_exactly() {
        let sites = sample_uniform_sites(17, 3);
        let dir = std::env::temp_dir().join("cvtopt-roundtrip-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sites.csv");
        write_sites_csv(&path, &sites).unwrap();
        let back = read_sites_csv(&path).unwrap();
        assert_eq!(sites.coords.len(), back.coords.len());
        for (a, b) in sites.coords.iter().zip(&back.coords) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_sites_csv_is_rejected() {
        let dir = std::env::temp_dir().join("cvtopt-badcsv-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        fs::write(&path, "x,y\n0.1,0.2\n").unwrap();
        assert!(matches!(read_sites_csv(&path), Err(Error::Parse { .. })));
        fs::write(&path, "i,x,y\n0,0.1\n").unwrap();
        assert!(matches!(read_sites_csv(&path), Err(Error::Parse { .. })));
        fs::write(&path, "i,x,y\n0,0.1,0.2\n0,0.3,0.4\n").unwrap();
        assert!(matches!(read_sites_csv(&path), Err(Error::Parse { .. })));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn single_site_experiment_finds_the_center() {
        let dir = std::env::temp_dir().join("cvtopt-exp-k1");
        let cfg = ExperimentConfig::new(1, MeritKind::EnergyOnly, &dir);
        let bundle = run_experiment(&cfg).unwrap();
        assert!(bundle.all_stages_ok());
        assert_relative_eq!(bundle.solution.coords[0], 0.5, epsilon = 1e-7);
        assert_relative_eq!(bundle.solution.coords[1], 0.5, epsilon = 1e-7);
        let report = &bundle.stages[0].report;
        assert!((report.f_star - 1.0 / 6.0).abs() <= 1e-10);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn equal_area_experiment_writes_a_consistent_bundle() {
        let dir = std::env::temp_dir().join("cvtopt-exp-f1");
        let mut cfg = ExperimentConfig::new(10, MeritKind::EqualArea, &dir);
        cfg.omega = 0.001;
        cfg.seed = 2;
        cfg.render_svg = true;
        let bundle = run_experiment(&cfg).unwrap();
        assert!(bundle.all_stages_ok());
        assert_eq!(bundle.stages.len(), 2);
        assert_eq!(bundle.stages[0].label, "g");
        assert_eq!(bundle.stages[1].label, "f1");

        // All declared files exist and parse under their schemas.
        for p in [&bundle.report_csv, &bundle.cells_csv, &bundle.sites_out_csv, &bundle.hist_csv, &bundle.curve_csv]
        {
            assert!(p.exists(), "{p:?} missing");
        }
        assert!(bundle.diagram_svg.as_ref().unwrap().exists());

        // Report consistency: f = omega G + J per row.
        let report = fs::read_to_string(&bundle.report_csv).unwrap();
        let mut lines = report.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("merit,"));
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let (label, omega) = (f[0], f[2].parse::<f64>().unwrap());
            let fv = f[7].parse::<f64>().unwrap();
            let g = f[9].parse::<f64>().unwrap();
            let j = f[10].parse::<f64>().unwrap();
            let expect = match label {
                "g" => g,
                "f1" | "f2" => omega * g + j,
                "f3" => g + omega * j,
                other => panic!("unexpected merit label {other}"),
            };
            assert_relative_eq!(fv, expect, max_relative = 1e-12);
        }

        // Cells file has one row per cell and regenerates the SVG colors.
        let cells = fs::read_to_string(&bundle.cells_csv).unwrap();
        let rows: Vec<&str> = cells.lines().skip(1).collect();
        assert_eq!(rows.len(), 10);
        let svg = fs::read_to_string(bundle.diagram_svg.as_ref().unwrap()).unwrap();
        let fills: Vec<&str> = svg
            .match_indices("fill=\"")
            .map(|(idx, _)| {
                let rest = &svg[idx + 6..];
                &rest[..rest.find('"').unwrap()]
            })
            .take(10)
            .collect();
        let opts = RenderOptions::for_mode(ColorMode::EqualArea);
        for (row, fill) in rows.iter().zip(&fills) {
            let f: Vec<&str> = row.split(',').collect();
            let j1_i = f[2].parse::<f64>().unwrap();
            let ratio = f[5].parse::<f64>().unwrap();
            assert_eq!(crate::render::cell_fill(&opts, j1_i, ratio), *fill);
        }

        // Solution round trip.
        let back = read_sites_csv(&bundle.sites_out_csv).unwrap();
        for (a, b) in bundle.solution.coords.iter().zip(&back.coords) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn degenerate_start_is_rejected_unless_allowed() {
        let dir = std::env::temp_dir().join("cvtopt-exp-degenerate");
        fs::create_dir_all(&dir).unwrap();
        let sites_path = dir.join("grid.csv");
        // A perfect 2x2 grid has a four-cell vertex at the domain center.
        let grid = SiteSet::new(
            vec![0.5, 0.5, 1.5, 0.5, 0.5, 1.5, 1.5, 1.5],
            BoxDomain::new(2.0),
        );
        write_sites_csv(&sites_path, &grid).unwrap();
        let mut cfg = ExperimentConfig::new(4, MeritKind::EnergyOnly, &dir);
        cfg.sites_in = Some(sites_path.clone());
        match run_experiment(&cfg) {
            Err(Error::DegenerateInput(_)) => {}
            other => panic!("expected a degeneracy rejection, got {other:?}"),
        }
        cfg.allow_degenerate = true;
        let bundle = run_experiment(&cfg).unwrap();
        assert!(bundle.all_stages_ok());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_c2_is_a_config_error() {
        let cfg = ExperimentConfig::new(10, MeritKind::MinEdge, "/tmp/never-used");
        match run_experiment(&cfg) {
            Err(Error::Config(_)) => {}
            other => panic!("expected a config error, got {other:?}"),
        }
    }
}
