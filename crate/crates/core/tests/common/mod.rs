#![allow(dead_code)]

use htp_core::geo::LonLat;
use htp_core::rng::substream;
use htp_core::roadnet::{build_synthetic_city, RoadNetwork, Route};
use htp_core::traj::{simulate_trajectory, CongestionZone, GpsTrajectory, SimParams, SpeedProfile};
use rand::Rng;

pub fn city(rows: usize, cols: usize, seed: u64) -> RoadNetwork {
    build_synthetic_city(rows, cols, 250.0, 0.2, seed).unwrap()
}

/// Trips between random segment pairs; only those with at least 8 points.
pub fn simulate(net: &RoadNetwork, count: usize, noise_m: f64, seed: u64) -> Vec<(GpsTrajectory, Route)> {
    let mut rng = substream(seed, "test-sim");
    let b = net.bbox();
    let zones = [CongestionZone {
        center: LonLat::new(0.5 * (b.min_lon + b.max_lon), 0.5 * (b.min_lat + b.max_lat)),
        radius_m: 500.0,
        speed_factor: 0.5,
    }];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let src = rng.random_range(0..net.num_segments());
        let dst = rng.random_range(0..net.num_segments());
        let route = net.shortest_path(src, dst).unwrap();
        let speed = SpeedProfile {
            base_mps: rng.random_range(9.0..13.0),
            segment_factors: route.segment_ids.iter().map(|_| rng.random_range(0.8..1.2)).collect(),
        };
        let params = SimParams {
            zones: &zones,
            gps_noise_m: noise_m,
            lane_offset_m: 5.0,
            interval_s: if rng.random_bool(0.5) { 10.0 } else { 15.0 },
        };
        if let Ok(mut t) = simulate_trajectory(&route, &speed, &params, 8.0 * 3600.0, &mut rng) {
            if t.len() >= 8 {
                t.id = out.len() as u64;
                out.push((t, route));
            }
        }
    }
    out
}
