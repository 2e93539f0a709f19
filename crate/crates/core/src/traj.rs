//! GPS trajectories: simulation over a route, dataset filtering,
//! normalization, and the relative-position labels used for reconstruction.
//!
//! A trajectory point is described relative to its route by two labels: the
//! increment of its arc-length fraction over the previous point
//! (`rel_percent`) and its displacement from the aligned foot on the route
//! (`offsets`, scaled by per-dataset standard deviations). Cumulative sums of
//! the increments give absolute positions along the route, so labels can be
//! turned back into points exactly.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{meters_per_degree, BBox, GeoError, LonLat, Polyline};
use crate::math;
use crate::rng::normal;
use crate::roadnet::Route;

/// Trajectories with fewer points are dropped.
pub const MIN_POINTS: usize = 20;
/// Trajectories with more points are dropped.
pub const MAX_POINTS: usize = 200;

/// Smallest admissible offset scale in degrees (about one centimeter).
const MIN_OFFSET_SCALE_DEG: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajError {
    #[error("route too short for a single sampling interval")]
    TooShort,
    #[error("invalid simulation parameter: {0}")]
    InvalidParams(&'static str),
    #[error("bounding box has zero extent")]
    ZeroExtent,
    #[error("labels have {labels} points but trajectory has {points}")]
    LengthMismatch { labels: usize, points: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Geometry(#[from] GeoError),
}

/// A sampled GPS trace with the route it was driven on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsTrajectory {
    pub id: u64,
    /// Ground-truth segment ids; empty when unknown.
    pub route: Vec<usize>,
    /// Seconds since midnight.
    pub start_time_s: f64,
    pub interval_s: f64,
    pub points: Vec<LonLat>,
}

impl GpsTrajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn travel_time_s(&self) -> f64 {
        self.points.len().saturating_sub(1) as f64 * self.interval_s
    }
}

/// Per-point reconstruction targets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeLabels {
    pub rel_percent: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

impl RelativeLabels {
    pub fn len(&self) -> usize {
        self.rel_percent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rel_percent.is_empty()
    }

    /// Absolute route fractions (prefix sums of the increments).
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.rel_percent
            .iter()
            .map(|r| {
                acc += r;
                acc
            })
            .collect()
    }
}

/// Dataset-wide normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub bbox: BBox,
    /// Standard deviations of raw (lon, lat) offsets in degrees.
    pub offset_scale: [f64; 2],
}

impl DatasetStats {
    /// Fits offset scales on raw offsets of `pairs` (trajectory, its route).
    pub fn fit<'a, I>(bbox: BBox, pairs: I) -> Result<Self, TrajError>
    where
        I: IntoIterator<Item = (&'a GpsTrajectory, &'a Route)>,
    {
        let mut n = 0usize;
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for (traj, route) in pairs {
            for (_, foot, p) in align(&traj.points, &route.merged)?.0 {
                let d = [p.lon - foot.lon, p.lat - foot.lat];
                for k in 0..2 {
                    sum[k] += d[k];
                    sum_sq[k] += d[k] * d[k];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(TrajError::EmptyDataset);
        }
        let nf = n as f64;
        let scale = |k: usize| {
            let mean = sum[k] / nf;
            math::sqrt((sum_sq[k] / nf - mean * mean).max(0.0)).max(MIN_OFFSET_SCALE_DEG)
        };
        Ok(Self {
            bbox,
            offset_scale: [scale(0), scale(1)],
        })
    }
}

/// A region where traffic moves at `speed_factor` times the free speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionZone {
    pub center: LonLat,
    pub radius_m: f64,
    pub speed_factor: f64,
}

/// Free-flow speed of one trip.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub base_mps: f64,
    /// Multiplier per route segment; empty means 1 everywhere.
    pub segment_factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams<'a> {
    pub zones: &'a [CongestionZone],
    /// Standard deviation of isotropic receiver noise, meters.
    pub gps_noise_m: f64,
    /// Lateral offset to the right of the travel direction, meters.
    pub lane_offset_m: f64,
    pub interval_s: f64,
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    start_m: f64,
    end_m: f64,
    speed: f64,
}

fn zone_factor(zones: &[CongestionZone], p: LonLat) -> f64 {
    zones
        .iter()
        .filter(|z| crate::geo::haversine_m(z.center, p) <= z.radius_m)
        .map(|z| z.speed_factor)
        .fold(1.0, f64::min)
}

/// Splits the route into constant-speed pieces at zone boundaries.
fn speed_pieces(route: &Route, speed: &SpeedProfile, zones: &[CongestionZone]) -> Vec<Piece> {
    let pl = &route.merged;
    let cum = pl.cum_len_m();
    let mut pieces = Vec::new();
    for e in 0..pl.num_edges() {
        let a = pl.points()[e];
        let b = pl.points()[e + 1];
        let len = cum[e + 1] - cum[e];
        if len <= 0.0 {
            continue;
        }
        let seg_factor = speed
            .segment_factors
            .get(route.segment_of_edge(e))
            .copied()
            .unwrap_or(1.0);
        let (kx, ky) = meters_per_degree(a.lat);
        let dx = (b.lon - a.lon) * kx;
        let dy = (b.lat - a.lat) * ky;
        let mut cuts: Vec<f64> = alloc::vec![0.0, 1.0];
        for z in zones {
            // |a + t d - c|^2 = r^2
            let cx = (a.lon - z.center.lon) * kx;
            let cy = (a.lat - z.center.lat) * ky;
            let qa = dx * dx + dy * dy;
            let qb = 2.0 * (cx * dx + cy * dy);
            let qc = cx * cx + cy * cy - z.radius_m * z.radius_m;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc > 0.0 {
                let s = math::sqrt(disc);
                for t in [(-qb - s) / (2.0 * qa), (-qb + s) / (2.0 * qa)] {
                    if t > 0.0 && t < 1.0 {
                        cuts.push(t);
                    }
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        for w in cuts.windows(2) {
            if w[1] <= w[0] {
                continue;
            }
            let mid = a.lerp(b, 0.5 * (w[0] + w[1]));
            pieces.push(Piece {
                start_m: cum[e] + w[0] * len,
                end_m: cum[e] + w[1] * len,
                speed: speed.base_mps * seg_factor * zone_factor(zones, mid),
            });
        }
    }
    pieces
}

/// Drives a particle along `route` and samples it every `interval_s`.
///
/// The first sample is taken a uniform fraction of an interval after
/// departure. Each sample is shifted `lane_offset_m` to the right of the
/// local travel direction and perturbed by isotropic Gaussian noise.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    route: &Route,
    speed: &SpeedProfile,
    params: &SimParams<'_>,
    start_time_s: f64,
    rng: &mut R,
) -> Result<GpsTrajectory, TrajError> {
    if !(params.interval_s > 0.0) {
        return Err(TrajError::InvalidParams("interval must be positive"));
    }
    if !(speed.base_mps > 0.0) || speed.segment_factors.iter().any(|f| !(*f > 0.0)) {
        return Err(TrajError::InvalidParams("speeds must be positive"));
    }
    if params.zones.iter().any(|z| !(z.speed_factor > 0.0)) {
        return Err(TrajError::InvalidParams("zone speed factors must be positive"));
    }
    let pieces = speed_pieces(route, speed, params.zones);
    let total_m = route.len_m();
    let phase: f64 = rng.random();
    let mut sample_t = phase * params.interval_s;
    let mut arc = Vec::new();
    let mut clock = 0.0;
    for piece in &pieces {
        let dur = (piece.end_m - piece.start_m) / piece.speed;
        while sample_t <= clock + dur {
            arc.push(piece.start_m + (sample_t - clock) * piece.speed);
            sample_t += params.interval_s;
        }
        clock += dur;
    }
    if arc.len() < 2 {
        return Err(TrajError::TooShort);
    }
    let pl = &route.merged;
    let mut points = Vec::with_capacity(arc.len());
    for s in arc {
        let (edge, u) = pl.locate((s / total_m).clamp(0.0, 1.0))?;
        let a = pl.points()[edge];
        let b = pl.points()[edge + 1];
        let on_road = a.lerp(b, u);
        let (kx, ky) = meters_per_degree(on_road.lat);
        let hx = (b.lon - a.lon) * kx;
        let hy = (b.lat - a.lat) * ky;
        let h = math::sqrt(hx * hx + hy * hy);
        let (rx, ry) = if h > 0.0 { (hy / h, -hx / h) } else { (0.0, 0.0) };
        let east = params.lane_offset_m * rx + params.gps_noise_m * normal(rng);
        let north = params.lane_offset_m * ry + params.gps_noise_m * normal(rng);
        points.push(on_road.offset_m(east, north));
    }
    Ok(GpsTrajectory {
        id: 0,
        route: route.segment_ids.clone(),
        start_time_s,
        interval_s: params.interval_s,
        points,
    })
}

/// Keeps trajectories with an admissible point count that lie inside `bbox`.
pub fn filter_dataset(trajs: Vec<GpsTrajectory>, bbox: &BBox) -> Vec<GpsTrajectory> {
    trajs
        .into_iter()
        .filter(|t| (MIN_POINTS..=MAX_POINTS).contains(&t.len()))
        .filter(|t| t.points.iter().all(|&p| bbox.contains(p)))
        .collect()
}

/// Forward-monotone alignment of points to a polyline.
///
/// Each point is projected onto the edges starting at the previous point's
/// edge. A foot that would fall behind the previous one is clamped to the
/// previous fraction. Returns `(fraction, foot, point)` triples and the
/// number of clamps.
pub fn align(points: &[LonLat], pl: &Polyline) -> Result<(Vec<(f64, LonLat, LonLat)>, usize), TrajError> {
    let mut out = Vec::with_capacity(points.len());
    let mut edge = 0;
    let mut prev = 0.0;
    let mut clamps = 0;
    for &p in points {
        let pr = pl.project_from(p, edge)?;
        if pr.abs_fraction < prev {
            clamps += 1;
            out.push((prev, pl.point_at_fraction(prev)?, p));
        } else {
            edge = pr.edge;
            prev = pr.abs_fraction;
            out.push((pr.abs_fraction, pr.foot, p));
        }
    }
    Ok((out, clamps))
}

/// Labels plus the number of backwards projections that were clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub labels: RelativeLabels,
    pub clamped: usize,
}

/// Relative-percent and normalized-offset labels of `traj` on `route`.
pub fn make_labels(traj: &GpsTrajectory, route: &Route, stats: &DatasetStats) -> Result<Labeled, TrajError> {
    let (aligned, clamped) = align(&traj.points, &route.merged)?;
    let mut labels = RelativeLabels {
        rel_percent: Vec::with_capacity(aligned.len()),
        offsets: Vec::with_capacity(aligned.len()),
    };
    let mut prev = 0.0;
    for (a, foot, p) in aligned {
        labels.rel_percent.push(a - prev);
        labels.offsets.push([
            (p.lon - foot.lon) / stats.offset_scale[0],
            (p.lat - foot.lat) / stats.offset_scale[1],
        ]);
        prev = a;
    }
    Ok(Labeled { labels, clamped })
}

/// Points rebuilt from labels plus the number of fractions clamped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructed {
    pub points: Vec<LonLat>,
    pub clamped: usize,
}

/// Inverse of [`make_labels`]: foot at the cumulative fraction plus the
/// de-normalized offset.
pub fn reconstruct_from_labels(
    route: &Route,
    labels: &RelativeLabels,
    stats: &DatasetStats,
) -> Result<Reconstructed, TrajError> {
    if labels.offsets.len() != labels.rel_percent.len() {
        return Err(TrajError::LengthMismatch {
            labels: labels.offsets.len(),
            points: labels.rel_percent.len(),
        });
    }
    let mut clamped = 0;
    let mut points = Vec::with_capacity(labels.len());
    for (a, off) in labels.cumulative().into_iter().zip(&labels.offsets) {
        let t = if (0.0..=1.0).contains(&a) {
            a
        } else {
            clamped += 1;
            a.clamp(0.0, 1.0)
        };
        let foot = route.merged.point_at_fraction(t)?;
        points.push(LonLat::new(
            foot.lon + off[0] * stats.offset_scale[0],
            foot.lat + off[1] * stats.offset_scale[1],
        ));
    }
    Ok(Reconstructed { points, clamped })
}

/// Min-max normalization of points to the unit square.
pub fn normalize_traj(points: &[LonLat], bbox: &BBox) -> Result<Vec<[f64; 2]>, TrajError> {
    if !(bbox.lon_extent() > 0.0 && bbox.lat_extent() > 0.0) {
        return Err(TrajError::ZeroExtent);
    }
    Ok(points.iter().map(|&p| bbox.normalize(p)).collect())
}

pub fn denormalize_traj(points: &[[f64; 2]], bbox: &BBox) -> Result<Vec<LonLat>, TrajError> {
    if !(bbox.lon_extent() > 0.0 && bbox.lat_extent() > 0.0) {
        return Err(TrajError::ZeroExtent);
    }
    Ok(points.iter().map(|&q| bbox.denormalize(q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_m;
    use crate::rng::substream;
    use crate::roadnet::{RoadNetwork, RoadSegment, CITY_ORIGIN};
    use alloc::vec;

    /// Straight northbound corridor of `k` segments, `len` meters each.
    fn corridor(k: usize, len: f64) -> (RoadNetwork, Route) {
        let pts: Vec<LonLat> = (0..=k).map(|i| CITY_ORIGIN.offset_m(0.0, len * i as f64)).collect();
        let segs = (0..k)
            .map(|i| RoadSegment::new(i, vec![pts[i], pts[i + 1]], None).unwrap())
            .collect();
        let adj: Vec<(usize, usize)> = (0..k - 1).map(|i| (i, i + 1)).collect();
        let net = RoadNetwork::new(segs, &adj).unwrap();
        let ids: Vec<usize> = (0..k).collect();
        let route = net.route(&ids).unwrap();
        (net, route)
    }

    fn stats_for(route: &Route, scale: [f64; 2]) -> DatasetStats {
        DatasetStats {
            bbox: BBox::from_points(route.merged.points()).unwrap(),
            offset_scale: scale,
        }
    }

    fn traj(points: Vec<LonLat>) -> GpsTrajectory {
        GpsTrajectory {
            id: 0,
            route: vec![],
            start_time_s: 0.0,
            interval_s: 1.0,
            points,
        }
    }

    #[test]
    fn constant_speed_gives_equal_steps() {
        let (_, route) = corridor(3, 1000.0);
        let params = SimParams {
            zones: &[],
            gps_noise_m: 0.0,
            lane_offset_m: 0.0,
            interval_s: 10.0,
        };
        let speed = SpeedProfile {
            base_mps: 12.5,
            segment_factors: vec![],
        };
        let t = simulate_trajectory(&route, &speed, &params, 0.0, &mut substream(3, "sim")).unwrap();
        for w in t.points.windows(2) {
            assert!((haversine_m(w[0], w[1]) - 125.0).abs() < 1e-6);
        }
        let expected = (3000.0 / 125.0) as usize;
        assert!(t.len() == expected || t.len() == expected + 1);
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let (_, route) = corridor(4, 500.0);
        let zones = [CongestionZone {
            center: CITY_ORIGIN.offset_m(0.0, 1000.0),
            radius_m: 300.0,
            speed_factor: 0.4,
        }];
        let params = SimParams {
            zones: &zones,
            gps_noise_m: 3.0,
            lane_offset_m: 4.0,
            interval_s: 5.0,
        };
        let speed = SpeedProfile {
            base_mps: 10.0,
            segment_factors: vec![],
        };
        let a = simulate_trajectory(&route, &speed, &params, 0.0, &mut substream(5, "sim")).unwrap();
        let b = simulate_trajectory(&route, &speed, &params, 0.0, &mut substream(5, "sim")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn halving_speed_doubles_density() {
        let (_, route) = corridor(6, 1000.0);
        let center = CITY_ORIGIN.offset_m(0.0, 3000.0);
        let zones = [CongestionZone {
            center,
            radius_m: 1000.0,
            speed_factor: 0.5,
        }];
        let params = SimParams {
            zones: &zones,
            gps_noise_m: 0.0,
            lane_offset_m: 0.0,
            interval_s: 2.0,
        };
        let speed = SpeedProfile {
            base_mps: 10.0,
            segment_factors: vec![],
        };
        let t = simulate_trajectory(&route, &speed, &params, 0.0, &mut substream(1, "sim")).unwrap();
        let inside = t.points.iter().filter(|&&p| haversine_m(p, center) < 1000.0).count() as f64 / 2.0;
        let outside = t.points.iter().filter(|&&p| haversine_m(p, center) >= 1000.0).count() as f64 / 4.0;
        let ratio = inside / outside;
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn too_short_route_is_rejected() {
        let (_, route) = corridor(1, 10.0);
        let params = SimParams {
            zones: &[],
            gps_noise_m: 0.0,
            lane_offset_m: 0.0,
            interval_s: 60.0,
        };
        let speed = SpeedProfile {
            base_mps: 10.0,
            segment_factors: vec![],
        };
        let err = simulate_trajectory(&route, &speed, &params, 0.0, &mut substream(1, "sim")).unwrap_err();
        assert_eq!(err, TrajError::TooShort);
    }

    #[test]
    fn length_filter_bounds() {
        let bbox = BBox {
            min_lon: 0.0,
            min_lat: 0.0,
            max_lon: 1.0,
            max_lat: 1.0,
        };
        let mk = |n: usize| traj(vec![LonLat::new(0.5, 0.5); n]);
        let kept = filter_dataset(vec![mk(19), mk(20), mk(58), mk(200), mk(201)], &bbox);
        let lens: Vec<usize> = kept.iter().map(|t| t.len()).collect();
        assert_eq!(lens, vec![20, 58, 200]);
        let mut outside = mk(30);
        outside.points[3] = LonLat::new(2.0, 0.5);
        assert!(filter_dataset(vec![outside], &bbox).is_empty());
    }

    #[test]
    fn on_curve_labels() {
        let (_, route) = corridor(1, 1000.0);
        let stats = stats_for(&route, [1e-5, 1e-5]);
        let pts: Vec<LonLat> = [0.1, 0.3, 0.6]
            .iter()
            .map(|&f| route.merged.point_at_fraction(f).unwrap())
            .collect();
        let l = make_labels(&traj(pts), &route, &stats).unwrap().labels;
        let want = [0.1, 0.2, 0.3];
        for (got, want) in l.rel_percent.iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(l.offsets.iter().all(|o| o[0].abs() < 1e-9 && o[1].abs() < 1e-9));
    }

    #[test]
    fn lateral_offset_of_one_scale_unit() {
        let (_, route) = corridor(1, 1000.0);
        let sigma = 2e-5;
        let stats = stats_for(&route, [sigma, 3e-5]);
        let on = route.merged.point_at_fraction(0.5).unwrap();
        let p = LonLat::new(on.lon + sigma, on.lat);
        let l = make_labels(&traj(vec![p]), &route, &stats).unwrap().labels;
        assert!((l.offsets[0][0] - 1.0).abs() < 1e-9);
        assert!(l.offsets[0][1].abs() < 1e-9);
    }

    #[test]
    fn roundtrip_and_zero_offsets() {
        let (_, route) = corridor(3, 400.0);
        let stats = stats_for(&route, [1e-5, 1e-5]);
        let pts: Vec<LonLat> = (0..25)
            .map(|i| route.merged.point_at_fraction(i as f64 / 24.0).unwrap())
            .collect();
        let l = make_labels(&traj(pts.clone()), &route, &stats).unwrap().labels;
        let back = reconstruct_from_labels(&route, &l, &stats).unwrap();
        for (a, b) in back.points.iter().zip(&pts) {
            assert!((a.lon - b.lon).abs() < 1e-9 && (a.lat - b.lat).abs() < 1e-9);
        }
        let zero = RelativeLabels {
            rel_percent: vec![0.2, 0.3, 0.5],
            offsets: vec![[0.0, 0.0]; 3],
        };
        for p in reconstruct_from_labels(&route, &zero, &stats).unwrap().points {
            assert!(route.merged.project(p).unwrap().dist_m < 1e-6);
        }
    }

    #[test]
    fn backwards_fix_is_clamped_and_counted() {
        let (_, route) = corridor(1, 1000.0);
        let stats = stats_for(&route, [1e-5, 1e-5]);
        let pts: Vec<LonLat> = [0.5, 0.45, 0.7]
            .iter()
            .map(|&f| route.merged.point_at_fraction(f).unwrap())
            .collect();
        let out = make_labels(&traj(pts.clone()), &route, &stats).unwrap();
        assert_eq!(out.clamped, 1);
        assert!(out.labels.rel_percent.iter().all(|&r| r >= 0.0));
        let back = reconstruct_from_labels(&route, &out.labels, &stats).unwrap();
        for (a, b) in back.points.iter().zip(&pts) {
            assert!((a.lon - b.lon).abs() < 1e-9 && (a.lat - b.lat).abs() < 1e-9);
        }
    }

    #[test]
    fn overshooting_fractions_are_clamped() {
        let (_, route) = corridor(1, 1000.0);
        let stats = stats_for(&route, [1e-5, 1e-5]);
        let labels = RelativeLabels {
            rel_percent: vec![0.6, 0.6],
            offsets: vec![[0.0, 0.0]; 2],
        };
        let back = reconstruct_from_labels(&route, &labels, &stats).unwrap();
        assert_eq!(back.clamped, 1);
        assert_eq!(back.points[1], route.merged.last());
    }

    #[test]
    fn normalization() {
        let bbox = BBox {
            min_lon: 104.0,
            min_lat: 30.6,
            max_lon: 104.1,
            max_lat: 30.7,
        };
        let pts = vec![bbox.south_west(), LonLat::new(104.1, 30.7), LonLat::new(104.0371, 30.6529)];
        let q = normalize_traj(&pts, &bbox).unwrap();
        assert_eq!(q[0], [0.0, 0.0]);
        assert_eq!(q[1], [1.0, 1.0]);
        let back = denormalize_traj(&q, &bbox).unwrap();
        for (a, b) in back.iter().zip(&pts) {
            assert!((a.lon - b.lon).abs() < 1e-12 && (a.lat - b.lat).abs() < 1e-12);
        }
        let flat = BBox { max_lat: 30.6, ..bbox };
        assert_eq!(normalize_traj(&pts, &flat).unwrap_err(), TrajError::ZeroExtent);
    }
}
