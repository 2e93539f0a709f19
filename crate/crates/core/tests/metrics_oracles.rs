mod common;

use htp_core::geo::{GridSpec, LonLat};
use htp_core::metrics::{evaluate, radius_m, step_distances_m, trip_distance_m, EvalTrajectory, MetricsConfig, MetricsReport};
use htp_core::roadnet::RoadNetwork;

/// Straight-line haversine, independent of the library's.
fn hav(a: LonLat, b: LonLat) -> f64 {
    let r = 6_371_008.8;
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().asin()
}

/// Radius of gyration in an equirectangular plane at the centroid.
fn radius_oracle(pts: &[LonLat]) -> f64 {
    let n = pts.len() as f64;
    let (cx, cy) = (
        pts.iter().map(|p| p.lon).sum::<f64>() / n,
        pts.iter().map(|p| p.lat).sum::<f64>() / n,
    );
    let deg = std::f64::consts::PI * 6_371_008.8 / 180.0;
    let kx = deg * cy.to_radians().cos();
    let s: f64 = pts
        .iter()
        .map(|p| ((p.lon - cx) * kx).powi(2) + ((p.lat - cy) * deg).powi(2))
        .sum();
    (s / n).sqrt()
}

fn setup() -> (RoadNetwork, Vec<EvalTrajectory>, GridSpec) {
    let net = common::city(10, 10, 4);
    let data = common::simulate(&net, 120, 1.0, 4)
        .into_iter()
        .map(|(t, _)| EvalTrajectory {
            points: t.points,
            route: t.route,
        })
        .collect();
    let grid = GridSpec::covering(&net.bbox().padded_m(300.0), 100.0).unwrap();
    (net, data, grid)
}

fn eval(net: &RoadNetwork, grid: &GridSpec, a: &[EvalTrajectory], b: &[EvalTrajectory]) -> MetricsReport {
    evaluate(a, b, net, grid, &MetricsConfig::default()).unwrap()
}

fn close(a: &MetricsReport, b: &MetricsReport, tol: f64) -> bool {
    let va = [a.t_dist, a.s_dist, a.radius, a.g_den, a.g_pat, a.r_den, a.r_pat, a.pr_dist];
    let vb = [b.t_dist, b.s_dist, b.radius, b.g_den, b.g_pat, b.r_den, b.r_pat, b.pr_dist];
    va.iter().zip(&vb).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn real_vs_real_is_perfect() {
    let (net, data, grid) = setup();
    let r = eval(&net, &grid, &data, &data);
    for j in [r.t_dist, r.s_dist, r.radius, r.pr_dist] {
        assert!(j.abs() < 1e-12, "{r:?}");
    }
    for c in [r.g_den, r.r_den, r.g_pat, r.r_pat] {
        assert!((c - 1.0).abs() < 1e-12, "{r:?}");
    }
}

#[test]
fn scalars_match_straight_line_recomputation() {
    let (_, data, _) = setup();
    for t in &data {
        let trip: f64 = t.points.windows(2).map(|w| hav(w[0], w[1])).sum();
        assert!((trip_distance_m(&t.points) - trip).abs() < 1e-9 * trip.max(1.0));
        for (s, w) in step_distances_m(&t.points).iter().zip(t.points.windows(2)) {
            assert!((s - hav(w[0], w[1])).abs() < 1e-9);
        }
        let r = radius_oracle(&t.points);
        assert!((radius_m(&t.points) - r).abs() < 1e-9 * r.max(1.0), "{} vs {r}", radius_m(&t.points));
    }
}

#[test]
fn invariant_to_order_and_duplication() {
    let (net, data, grid) = setup();
    let (a, b) = data.split_at(60);
    let base = eval(&net, &grid, a, b);
    let mut rev = b.to_vec();
    rev.reverse();
    assert!(close(&base, &eval(&net, &grid, a, &rev), 1e-12));
    let doubled: Vec<EvalTrajectory> = b.iter().chain(b).cloned().collect();
    assert!(close(&base, &eval(&net, &grid, a, &doubled), 1e-8));
}

#[test]
fn point_metrics_are_translation_invariant() {
    let (net, data, _) = setup();
    let shift = |ts: &[EvalTrajectory]| -> Vec<EvalTrajectory> {
        ts.iter()
            .map(|t| EvalTrajectory {
                points: t.points.iter().map(|p| LonLat::new(p.lon + 0.01, p.lat)).collect(),
                route: t.route.clone(),
            })
            .collect()
    };
    let (a, b) = data.split_at(60);
    let cfg = MetricsConfig::default();
    let p = htp_core::metrics::point_level(a, b, &cfg).unwrap();
    let q = htp_core::metrics::point_level(&shift(a), &shift(b), &cfg).unwrap();
    assert!((p.t_dist - q.t_dist).abs() < 1e-9 && (p.s_dist - q.s_dist).abs() < 1e-9 && (p.radius - q.radius).abs() < 1e-9);
    let _ = net;
}

#[test]
fn truncation_raises_trip_divergence() {
    let (_, data, _) = setup();
    let cfg = MetricsConfig::default();
    let cut = |frac: f64| -> Vec<EvalTrajectory> {
        data.iter()
            .map(|t| {
                let k = ((t.points.len() as f64 * frac).ceil() as usize).max(2);
                EvalTrajectory {
                    points: t.points[..k].to_vec(),
                    route: t.route.clone(),
                }
            })
            .collect()
    };
    let j = |frac| htp_core::metrics::point_level(&data, &cut(frac), &cfg).unwrap().t_dist;
    let (full, mild, severe) = (j(1.0), j(0.75), j(0.25));
    assert_eq!(full, 0.0);
    assert!(mild > 0.0 && severe > mild, "{full} {mild} {severe}");
}
