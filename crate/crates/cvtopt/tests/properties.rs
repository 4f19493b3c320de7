//! Property tests of the structural diagram invariants over arbitrary
//! site configurations.

use cvtopt::geometry::{
    build_diagram, cell_measures, nearest_site, BoxDomain, EdgeKind, Point2, SiteSet,
};
use cvtopt::render::area_histogram;
use proptest::prelude::*;

fn arb_sites(max_kappa0: usize) -> impl Strategy<Value = SiteSet> {
    (3..=max_kappa0).prop_flat_map(|kappa0| {
        let side = (kappa0 as f64).sqrt();
        prop::collection::vec(0.0..1.0f64, 2 * kappa0).prop_map(move |units| {
            let coords = units.iter().map(|u| u * side).collect();
            SiteSet::new(coords, BoxDomain::new(side))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diagram_invariants_hold(sites in arb_sites(32)) {
        let diagram = match build_diagram(&sites) {
            Ok(d) => d,
            // Coincident random sites are astronomically unlikely but legal
            // to reject.
            Err(_) => return Ok(()),
        };
        let kappa0 = sites.kappa0();
        let l = sites.domain.side;

        // Partition of the domain.
        let total: f64 = (0..kappa0).map(|i| cell_measures(&diagram, i).area).sum();
        prop_assert!((total - sites.domain.area()).abs() <= 1e-9 * sites.domain.area());

        let mut walls: std::collections::HashMap<(usize, usize), (Point2, Point2)> =
            std::collections::HashMap::new();
        for cell in &diagram.cells {
            // Positive, convex, counterclockwise polygons.
            prop_assert!(cell.signed_area() > 0.0);
            let n = cell.vertices.len();
            for t in 0..n {
                let a = cell.vertices[t].pos;
                let b = cell.vertices[(t + 1) % n].pos;
                let c = cell.vertices[(t + 2) % n].pos;
                prop_assert!((b - a).cross(c - b) >= -1e-12 * l);
            }
            for (e, edge) in cell.edges.iter().enumerate() {
                if let EdgeKind::Interior { neighbor } = edge.kind {
                    let (v, w) = cell.edge_endpoints(e);
                    // Both endpoints sit on the bisector.
                    for p in [v, w] {
                        let di = p.dist(sites.site(cell.site));
                        let dk = p.dist(sites.site(neighbor));
                        prop_assert!((di - dk).abs() <= 1e-9 * l);
                    }
                    // Shared walls appear exactly twice, reversed.
                    let key = (cell.site.min(neighbor), cell.site.max(neighbor));
                    if let Some((pv, pw)) = walls.insert(key, (v, w)) {
                        prop_assert!(pv.dist(w) <= 1e-9 * l && pw.dist(v) <= 1e-9 * l);
                    }
                }
            }
        }
    }

    #[test]
    fn interior_points_belong_to_their_nearest_site(
        sites in arb_sites(24),
        qx in 0.01..0.99f64,
        qy in 0.01..0.99f64,
    ) {
        let diagram = match build_diagram(&sites) {
            Ok(d) => d,
            Err(_) => return Ok(()),
        };
        let l = sites.domain.side;
        let q = Point2::new(qx * l, qy * l);
        let oracle = nearest_site(&sites, q);
        prop_assert!(diagram.cells[oracle].contains(q, 1e-9 * l));
    }

    #[test]
    fn histogram_is_a_probability_partition(
        values in prop::collection::vec(-1e3..1e3f64, 1..200),
        bins in 1..64usize,
    ) {
        let hist = area_histogram(&values, bins);
        let total: f64 = hist.iter().map(|b| b.proportion).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(hist.first().unwrap().lo == lo);
        prop_assert!((hist.last().unwrap().hi - hi).abs() <= 1e-12 * hi.abs().max(1.0));
    }
}
