//! SVG diagrams and the summary statistics behind the figures.

use crate::geometry::{cell_measures, Diagram, SiteSet};

/// Cell fill rule of a rendered diagram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMode {
    /// Outlines only.
    Plain,
    /// Cells whose relative area deviation exceeds the threshold are
    /// filled green.
    EqualArea,
    /// Cells are shaded by their min-edge ratio, darkest for the most
    /// unbalanced, white above the white threshold.
    MinEdge,
}

/// Thresholds and decorations for [`render_svg`].
#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub mode: ColorMode,
    /// Relative area deviation above which a cell is colored in
    /// [`ColorMode::EqualArea`].
    pub equal_area_threshold: f64,
    /// Min-edge ratio at or above which a cell stays white in
    /// [`ColorMode::MinEdge`].
    pub min_edge_white_ratio: f64,
    /// Draw a dot at each site.
    pub show_sites: bool,
}

impl RenderOptions {
    pub fn plain() -> Self {
        RenderOptions {
            mode: ColorMode::Plain,
            equal_area_threshold: 1e-3,
            min_edge_white_ratio: 0.8,
            show_sites: false,
        }
    }

    pub fn for_mode(mode: ColorMode) -> Self {
        RenderOptions { mode, ..RenderOptions::plain() }
    }
}

const GREEN: &str = "#4daf4a";
/// Seven blues, darkest first; shade `b` covers min-edge ratios in
/// `[b*10%, (b+1)*10%)` with everything below 10% clamped to the darkest.
const BLUES: [&str; 7] =
    ["#08306b", "#08519c", "#2171b5", "#4292c6", "#6baed6", "#9ecae1", "#c6dbef"];

/// Fill color of one cell under the given mode.
pub fn cell_fill(
    opts: &RenderOptions,
    area_deviation: f64,
    min_edge_ratio: f64,
) -> &'static str {
    match opts.mode {
        ColorMode::Plain => "white",
        ColorMode::EqualArea => {
            if area_deviation.abs() > opts.equal_area_threshold {
                GREEN
            } else {
                "white"
            }
        }
        ColorMode::MinEdge => {
            if min_edge_ratio >= opts.min_edge_white_ratio {
                "white"
            } else {
                let band = ((min_edge_ratio * 10.0).floor() as isize).clamp(1, 7) as usize;
                BLUES[band - 1]
            }
        }
    }
}

/// Renders the diagram as an SVG document, one polygon per cell in site
/// order. The y axis is flipped so the document matches the mathematical
/// orientation of the domain.
pub fn render_svg(diagram: &Diagram, sites: Option<&SiteSet>, opts: &RenderOptions) -> String {
    let l = diagram.total_area.sqrt();
    let kappa0 = diagram.kappa0();
    let avg_area = diagram.total_area / kappa0 as f64;
    let stroke = 0.0015 * l;
    let mut out = String::with_capacity(256 + kappa0 * 128);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {l} {l}\" \
         width=\"720\" height=\"720\">\n"
    ));
    out.push_str(&format!(
        "<g stroke=\"black\" stroke-width=\"{stroke}\" stroke-linejoin=\"round\">\n"
    ));
    for i in 0..kappa0 {
        let m = cell_measures(diagram, i);
        let deviation = m.area / avg_area - 1.0;
        let fill = cell_fill(opts, deviation, m.min_edge_ratio());
        let points: Vec<String> = diagram.cells[i]
            .vertices
            .iter()
            .map(|v| format!("{},{}", v.pos.x, l - v.pos.y))
            .collect();
        out.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{}\"/>\n",
            points.join(" "),
            fill
        ));
    }
    out.push_str("</g>\n");
    if opts.show_sites {
        if let Some(sites) = sites {
            let r = 0.004 * l;
            for p in sites.sites() {
                out.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"{r}\" fill=\"#d62728\"/>\n",
                    p.x,
                    l - p.y
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One histogram bin: `[lo, hi)` except the last, which is closed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub proportion: f64,
}

/// Equal-width histogram spanning `[min, max]` of the values. A constant
/// sample collapses to a single bin with proportion one.
pub fn area_histogram(values: &[f64], bins: usize) -> Vec<HistBin> {
    assert!(!values.is_empty(), "histogram of an empty sample");
    assert!(bins >= 1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![HistBin { lo, hi, proportion: 1.0 }];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| HistBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            proportion: c as f64 / n,
        })
        .collect()
}

/// Proportion of cells whose minimum edge ratio is at least `c`, evaluated
/// on the given grid of thresholds. Non-increasing in `c`.
pub fn edge_ratio_curve(diagram: &Diagram, grid: &[f64]) -> Vec<(f64, f64)> {
    let kappa0 = diagram.kappa0();
    let ratios: Vec<f64> = (0..kappa0).map(|i| cell_measures(diagram, i).min_edge_ratio()).collect();
    grid.iter()
        .map(|&c| {
            let count = ratios.iter().filter(|&&r| r >= c).count();
            (c, count as f64 / kappa0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_diagram, BoxDomain, SiteSet};
    use approx::assert_relative_eq;
    use rand_core::{RngCore, SeedableRng};

    #[test]
    fn histogram_splits_the_examples_evenly() {
        let bins = area_histogram(&[0.0, 0.4, 0.6, 1.0], 2);
        assert_eq!(bins.len(), 2);
        assert_relative_eq!(bins[0].lo, 0.0);
        assert_relative_eq!(bins[0].hi, 0.5);
        assert_relative_eq!(bins[0].proportion, 0.5);
        assert_relative_eq!(bins[1].proportion, 0.5);
    }

    #[test]
    fn histogram_of_constant_values_is_a_single_full_bin() {
        let bins = area_histogram(&[0.7; 42], 100);
        assert_eq!(bins.len(), 1);
        assert_relative_eq!(bins[0].proportion, 1.0);
    }

    #[test]
    fn histogram_proportions_sum_to_one_and_match_binomial_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let values: Vec<f64> = (0..10_000)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
            .collect();
        let bins = area_histogram(&values, 100);
        let total: f64 = bins.iter().map(|b| b.proportion).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        // Each uniform bin holds ~1% with binomial standard error.
        let sigma = (0.01f64 * 0.99 / 10_000.0).sqrt();
        for b in &bins {
            assert!((b.proportion - 0.01).abs() <= 5.0 * sigma, "bin {b:?}");
        }
    }

    #[test]
    fn single_cell_curve_is_flat_at_one() {
        let sites = SiteSet::new(vec![0.5, 0.5], BoxDomain::new(1.0));
        let diagram = build_diagram(&sites).unwrap();
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        for (c, p) in edge_ratio_curve(&diagram, &grid) {
            assert!(c > 1.0 || p == 1.0);
        }
    }

    #[test]
    fn curve_is_non_increasing_and_matches_direct_recount() {
        let domain = BoxDomain::for_sites(30);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let coords: Vec<f64> = (0..60)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * domain.side)
            .collect();
        let sites = SiteSet::new(coords, domain);
        let diagram = build_diagram(&sites).unwrap();
        let grid: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        let curve = edge_ratio_curve(&diagram, &grid);
        assert_relative_eq!(curve[0].1, 1.0);
        let mut prev = f64::INFINITY;
        for &(c, p) in &curve {
            assert!(p <= prev);
            prev = p;
            // Direct recount.
            let count = (0..30)
                .filter(|&i| cell_measures(&diagram, i).min_edge_ratio() >= c)
                .count();
            assert_relative_eq!(p, count as f64 / 30.0);
        }
    }

    #[test]
    fn svg_has_one_polygon_per_cell() {
        let domain = BoxDomain::for_sites(12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let coords: Vec<f64> = (0..24)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * domain.side)
            .collect();
        let sites = SiteSet::new(coords, domain);
        let diagram = build_diagram(&sites).unwrap();
        let svg = render_svg(&diagram, Some(&sites), &RenderOptions {
            show_sites: true,
            ..RenderOptions::for_mode(ColorMode::MinEdge)
        });
        assert!(svg.starts_with("<svg "));
        assert!(svg.contains("viewBox"));
        assert_eq!(svg.matches("<polygon ").count(), 12);
        assert_eq!(svg.matches("<circle ").count(), 12);
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn single_square_cell_is_white_in_equal_area_mode() {
        let sites = SiteSet::new(vec![0.5, 0.5], BoxDomain::new(1.0));
        let diagram = build_diagram(&sites).unwrap();
        let svg = render_svg(&diagram, None, &RenderOptions::for_mode(ColorMode::EqualArea));
        assert_eq!(svg.matches("fill=\"white\"").count(), 1);
        assert!(!svg.contains(GREEN));
    }

    #[test]
    fn min_edge_shades_follow_the_band_table() {
        let opts = RenderOptions::for_mode(ColorMode::MinEdge);
        assert_eq!(cell_fill(&opts, 0.0, 0.85), "white");
        assert_eq!(cell_fill(&opts, 0.0, 0.80), "white");
        assert_eq!(cell_fill(&opts, 0.0, 0.79), BLUES[6]);
        assert_eq!(cell_fill(&opts, 0.0, 0.413), BLUES[3]);
        assert_eq!(cell_fill(&opts, 0.0, 0.15), BLUES[0]);
        // Below 10% stays the darkest shade.
        assert_eq!(cell_fill(&opts, 0.0, 0.05), BLUES[0]);
    }
}
