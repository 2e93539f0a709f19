//! Distribution-level comparison of a generated trajectory set against a
//! real one: point-level JSDs, grid-cell density and pattern, and road-level
//! density, pattern and point-to-road distance.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, meters_per_degree, GridSpec, LonLat};
use crate::math;
use crate::roadnet::{Route, RoadNetwork};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("invalid metrics configuration: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("bad input: {0}")]
    Data(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub bins: usize,
    pub top_k: usize,
    pub cell_m: f64,
    pub epsilon: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bins: 50,
            top_k: 100,
            cell_m: 100.0,
            epsilon: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
}

impl Histogram {
    /// `bins` equal-width bins over `[lo, hi]`; the last bin is closed.
    /// Probabilities are `(count + eps) / (N + bins·eps)`.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize, eps: f64) -> Result<Self, MetricsError> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(MetricsError::Config(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        let w = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + w * i as f64 }).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            if v < lo || v > hi || v.is_nan() {
                return Err(MetricsError::Data(format!("value {v} outside [{lo}, {hi}]")));
            }
            let b = (math::floor((v - lo) / w) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let total = values.len() as f64 + bins as f64 * eps;
        let probs = counts.iter().map(|&c| (c as f64 + eps) / total).collect();
        Ok(Self { edges, counts, probs })
    }
}

/// Histograms of two samples over their pooled min–max range.
pub fn shared_histograms(a: &[f64], b: &[f64], bins: usize, eps: f64) -> Result<(Histogram, Histogram), MetricsError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in a.iter().chain(b) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return Err(MetricsError::Undefined("no values to histogram"));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    Ok((Histogram::new(a, lo, hi, bins, eps)?, Histogram::new(b, lo, hi, bins, eps)?))
}

fn kl2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * math::log2(pi / mi))
        .sum()
}

/// Jensen–Shannon divergence in bits.
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64, MetricsError> {
    if p.edges != q.edges {
        return Err(MetricsError::Config("histograms have different bin edges".into()));
    }
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * kl2(&p.probs, &m) + 0.5 * kl2(&q.probs, &m);
    Ok(v.clamp(0.0, 1.0))
}

fn jsd_of(a: &[f64], b: &[f64], cfg: &MetricsConfig) -> Result<f64, MetricsError> {
    let (p, q) = shared_histograms(a, b, cfg.bins, cfg.epsilon)?;
    jsd(&p, &q)
}

/// Sum of consecutive-point geodesic distances.
pub fn trip_distance_m(points: &[LonLat]) -> f64 {
    points.windows(2).map(|w| haversine_m(w[0], w[1])).sum()
}

pub fn step_distances_m(points: &[LonLat]) -> Vec<f64> {
    points.windows(2).map(|w| haversine_m(w[0], w[1])).collect()
}

/// Root-mean-square distance from the centroid, in a local plane at the
/// centroid's latitude.
pub fn radius_m(points: &[LonLat]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let clon = points.iter().map(|p| p.lon).sum::<f64>() / n;
    let clat = points.iter().map(|p| p.lat).sum::<f64>() / n;
    let (kx, ky) = meters_per_degree(clat);
    let ss: f64 = points
        .iter()
        .map(|p| {
            let dx = (p.lon - clon) * kx;
            let dy = (p.lat - clat) * ky;
            dx * dx + dy * dy
        })
        .sum();
    math::sqrt(ss / n)
}

/// A trajectory under evaluation with the route it follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrajectory {
    pub points: Vec<LonLat>,
    pub route: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLevel {
    pub t_dist: f64,
    pub s_dist: f64,
    pub radius: f64,
    /// Trajectories with fewer than two points, skipped.
    pub excluded_real: usize,
    pub excluded_gen: usize,
}

struct Scalars {
    trip: Vec<f64>,
    steps: Vec<f64>,
    radius: Vec<f64>,
    excluded: usize,
}

fn scalars(data: &[EvalTrajectory]) -> Scalars {
    let mut s = Scalars {
        trip: Vec::new(),
        steps: Vec::new(),
        radius: Vec::new(),
        excluded: 0,
    };
    for t in data {
        if t.points.len() < 2 {
            s.excluded += 1;
            continue;
        }
        s.trip.push(trip_distance_m(&t.points));
        s.steps.extend(step_distances_m(&t.points));
        s.radius.push(radius_m(&t.points));
    }
    s
}

pub fn point_level(real: &[EvalTrajectory], gen: &[EvalTrajectory], cfg: &MetricsConfig) -> Result<PointLevel, MetricsError> {
    if real.is_empty() || gen.is_empty() {
        return Err(MetricsError::Undefined("empty dataset"));
    }
    let (a, b) = (scalars(real), scalars(gen));
    if a.trip.is_empty() || b.trip.is_empty() {
        return Err(MetricsError::Undefined("no trajectory with two or more points"));
    }
    Ok(PointLevel {
        t_dist: jsd_of(&a.trip, &b.trip, cfg)?,
        s_dist: jsd_of(&a.steps, &b.steps, cfg)?,
        radius: jsd_of(&a.radius, &b.radius, cfg)?,
        excluded_real: a.excluded,
        excluded_gen: b.excluded,
    })
}

/// Cosine similarity of two count maps over the union of their keys.
pub fn cosine_counts(a: &BTreeMap<usize, u64>, b: &BTreeMap<usize, u64>) -> Result<f64, MetricsError> {
    let norm = |m: &BTreeMap<usize, u64>| math::sqrt(m.values().map(|&c| (c as f64) * (c as f64)).sum());
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::Undefined("empty occupancy"));
    }
    let dot: f64 = a.iter().filter_map(|(k, &c)| b.get(k).map(|&d| c as f64 * d as f64)).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The `k` keys with the highest counts; ties go to the smaller key.
pub fn top_k(m: &BTreeMap<usize, u64>, k: usize) -> Vec<usize> {
    let mut v: Vec<(usize, u64)> = m.iter().filter(|(_, &c)| c > 0).map(|(&k, &c)| (k, c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(k, _)| k).collect()
}

/// F1 of the generated top-k set against the real one.
pub fn top_k_f1(real: &[usize], gen: &[usize]) -> f64 {
    if real.is_empty() && gen.is_empty() {
        return 1.0;
    }
    let hits = gen.iter().filter(|g| real.contains(g)).count();
    2.0 * hits as f64 / (real.len() + gen.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridLevel {
    pub g_den: f64,
    pub g_pat: f64,
    /// Points outside the grid, skipped.
    pub outside_real: usize,
    pub outside_gen: usize,
}

fn cell_counts(data: &[EvalTrajectory], grid: &GridSpec) -> (BTreeMap<usize, u64>, usize) {
    let mut m = BTreeMap::new();
    let mut outside = 0;
    for t in data {
        for &p in &t.points {
            match grid.index(p) {
                Some(rc) => *m.entry(grid.cell_id(rc)).or_insert(0) += 1,
                None => outside += 1,
            }
        }
    }
    (m, outside)
}

pub fn grid_level(real: &[EvalTrajectory], gen: &[EvalTrajectory], grid: &GridSpec, k: usize) -> Result<GridLevel, MetricsError> {
    if k == 0 {
        return Err(MetricsError::Config("top-k needs k ≥ 1".into()));
    }
    let (a, outside_real) = cell_counts(real, grid);
    let (b, outside_gen) = cell_counts(gen, grid);
    Ok(GridLevel {
        g_den: cosine_counts(&a, &b)?,
        g_pat: top_k_f1(&top_k(&a, k), &top_k(&b, k)),
        outside_real,
        outside_gen,
    })
}

/// Assigns each point to a segment of `route` by forward-monotone
/// projection onto the merged polyline. Returns `(segment id, distance m)`
/// per point. A projection that would move backwards stays at the previous
/// foot.
pub fn assign_to_route(points: &[LonLat], route: &Route) -> Result<Vec<(usize, f64)>, MetricsError> {
    let pl = &route.merged;
    let mut out = Vec::with_capacity(points.len());
    let (mut edge, mut prev) = (0usize, 0.0f64);
    let mut prev_foot = pl.first();
    for &p in points {
        let pr = pl
            .project_from(p, edge)
            .map_err(|e| MetricsError::Data(format!("projection failed: {e}")))?;
        if pr.abs_fraction >= prev {
            edge = pr.edge;
            prev = pr.abs_fraction;
            prev_foot = pr.foot;
        }
        out.push((route.segment_ids[route.segment_of_edge(edge)], haversine_m(p, prev_foot)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadLevel {
    pub r_den: f64,
    pub r_pat: f64,
    pub pr_dist: f64,
}

fn road_counts(data: &[EvalTrajectory], net: &RoadNetwork) -> Result<(BTreeMap<usize, u64>, Vec<f64>), MetricsError> {
    let mut m = BTreeMap::new();
    let mut dists = Vec::new();
    for (i, t) in data.iter().enumerate() {
        if t.route.is_empty() {
            return Err(MetricsError::Data(format!("trajectory {i} has no route")));
        }
        let route = net
            .route(&t.route)
            .map_err(|e| MetricsError::Data(format!("trajectory {i}: {e}")))?;
        for (seg, d) in assign_to_route(&t.points, &route)? {
            *m.entry(seg).or_insert(0) += 1;
            dists.push(d);
        }
    }
    Ok((m, dists))
}

pub fn road_level(
    real: &[EvalTrajectory],
    gen: &[EvalTrajectory],
    net: &RoadNetwork,
    cfg: &MetricsConfig,
) -> Result<RoadLevel, MetricsError> {
    if cfg.top_k == 0 {
        return Err(MetricsError::Config("top-k needs k ≥ 1".into()));
    }
    let (a, da) = road_counts(real, net)?;
    let (b, db) = road_counts(gen, net)?;
    Ok(RoadLevel {
        r_den: cosine_counts(&a, &b)?,
        r_pat: top_k_f1(&top_k(&a, cfg.top_k), &top_k(&b, cfg.top_k)),
        pr_dist: jsd_of(&da, &db, cfg)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub real: usize,
    pub gen: usize,
    pub excluded_real: usize,
    pub excluded_gen: usize,
    pub outside_grid_real: usize,
    pub outside_grid_gen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t_dist: f64,
    pub s_dist: f64,
    pub radius: f64,
    pub g_den: f64,
    pub g_pat: f64,
    pub r_den: f64,
    pub r_pat: f64,
    pub pr_dist: f64,
    pub counts: SampleCounts,
    pub config: MetricsConfig,
}

pub fn evaluate(
    real: &[EvalTrajectory],
    gen: &[EvalTrajectory],
    net: &RoadNetwork,
    grid: &GridSpec,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    let p = point_level(real, gen, cfg)?;
    let g = grid_level(real, gen, grid, cfg.top_k)?;
    let r = road_level(real, gen, net, cfg)?;
    Ok(MetricsReport {
        t_dist: p.t_dist,
        s_dist: p.s_dist,
        radius: p.radius,
        g_den: g.g_den,
        g_pat: g.g_pat,
        r_den: r.r_den,
        r_pat: r.r_pat,
        pr_dist: r.pr_dist,
        counts: SampleCounts {
            real: real.len(),
            gen: gen.len(),
            excluded_real: p.excluded_real,
            excluded_gen: p.excluded_gen,
            outside_grid_real: g.outside_real,
            outside_grid_gen: g.outside_gen,
        },
        config: cfg.clone(),
    })
}
