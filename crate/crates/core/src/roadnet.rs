//! Directed road-segment graphs, synthetic lattice cities and routes.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use thiserror::Error;

use crate::geo::{BBox, GeoError, LonLat, Polyline};
use crate::math;
use crate::rng::substream;

/// South-west corner of every synthetic city.
pub const CITY_ORIGIN: LonLat = LonLat::new(104.0, 30.6);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoadError {
    #[error("no route from segment {src} to segment {dst}")]
    NoRoute { src: usize, dst: usize },
    #[error("segments {from} and {to} are not connected")]
    Connectivity { from: usize, to: usize },
    #[error("unknown segment id {0}")]
    UnknownSegment(usize),
    #[error("segment ids must be 0..V in order; found {found} at position {position}")]
    NonContiguousIds { position: usize, found: usize },
    #[error("empty route")]
    EmptyRoute,
    #[error("invalid city parameters: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSegment {
    pub id: usize,
    pub geometry: Polyline,
    pub length_m: f64,
    /// Street name used in textual conditions.
    pub name: Option<String>,
}

impl RoadSegment {
    pub fn new(id: usize, points: Vec<LonLat>, name: Option<String>) -> Result<Self, RoadError> {
        let geometry = Polyline::new(points)?;
        Ok(Self {
            id,
            length_m: geometry.total_len_m(),
            geometry,
            name,
        })
    }

    pub fn start(&self) -> LonLat {
        self.geometry.first()
    }

    pub fn end(&self) -> LonLat {
        self.geometry.last()
    }
}

/// Directed graph over road segments: `j` is a successor of `i` when a
/// vehicle can leave `i` directly onto `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    successors: Vec<Vec<usize>>,
}

impl RoadNetwork {
    /// Builds a network from segments ordered by id and `(from, to)` pairs.
    pub fn new(segments: Vec<RoadSegment>, adjacency: &[(usize, usize)]) -> Result<Self, RoadError> {
        for (position, s) in segments.iter().enumerate() {
            if s.id != position {
                return Err(RoadError::NonContiguousIds {
                    position,
                    found: s.id,
                });
            }
        }
        let mut successors = vec![Vec::new(); segments.len()];
        for &(i, j) in adjacency {
            if i >= segments.len() {
                return Err(RoadError::UnknownSegment(i));
            }
            if j >= segments.len() {
                return Err(RoadError::UnknownSegment(j));
            }
            successors[i].push(j);
        }
        for s in &mut successors {
            s.sort_unstable();
            s.dedup();
        }
        Ok(Self {
            segments,
            successors,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn segment(&self, id: usize) -> Result<&RoadSegment, RoadError> {
        self.segments.get(id).ok_or(RoadError::UnknownSegment(id))
    }

    pub fn successors(&self, id: usize) -> &[usize] {
        &self.successors[id]
    }

    pub fn is_adjacent(&self, from: usize, to: usize) -> bool {
        self.successors
            .get(from)
            .is_some_and(|s| s.binary_search(&to).is_ok())
    }

    /// All `(from, to)` pairs sorted by `from` then `to`.
    pub fn adjacency_pairs(&self) -> Vec<(usize, usize)> {
        self.successors
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_points(self.segments.iter().flat_map(|s| s.geometry.points().iter()))
            .expect("network has segments")
    }

    /// Minimum-length path that starts with `src` and ends with `dst`, both
    /// traversed in full. Label-setting search; equal-cost labels settle in
    /// segment-id order and predecessors only change on strict improvement.
    pub fn shortest_path(&self, src: usize, dst: usize) -> Result<Route, RoadError> {
        self.segment(src)?;
        self.segment(dst)?;
        let n = self.segments.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[src] = self.segments[src].length_m;
        heap.push(Label {
            cost: dist[src],
            id: src,
        });
        while let Some(Label { cost, id }) = heap.pop() {
            if done[id] {
                continue;
            }
            done[id] = true;
            if id == dst {
                break;
            }
            for &next in &self.successors[id] {
                let c = cost + self.segments[next].length_m;
                if c < dist[next] {
                    dist[next] = c;
                    prev[next] = id;
                    heap.push(Label { cost: c, id: next });
                }
            }
        }
        if !done[dst] {
            return Err(RoadError::NoRoute { src, dst });
        }
        let mut ids = vec![dst];
        let mut cur = dst;
        while cur != src {
            cur = prev[cur];
            ids.push(cur);
        }
        ids.reverse();
        self.route(&ids)
    }

    /// Merges the geometries of consecutive, connected segments.
    pub fn route(&self, segment_ids: &[usize]) -> Result<Route, RoadError> {
        if segment_ids.is_empty() {
            return Err(RoadError::EmptyRoute);
        }
        for &id in segment_ids {
            self.segment(id)?;
        }
        for w in segment_ids.windows(2) {
            if !self.is_adjacent(w[0], w[1]) {
                return Err(RoadError::Connectivity {
                    from: w[0],
                    to: w[1],
                });
            }
        }
        let mut points: Vec<LonLat> = Vec::new();
        // vertex index where each segment ends inside `points`
        let mut seg_end_vertex = Vec::with_capacity(segment_ids.len());
        for &id in segment_ids {
            let pts = self.segments[id].geometry.points();
            let skip = usize::from(points.last() == Some(&pts[0]));
            points.extend_from_slice(&pts[skip..]);
            seg_end_vertex.push(points.len() - 1);
        }
        let merged = Polyline::new(points)?;
        let total = merged.total_len_m();
        let mut seg_cum_fraction: Vec<f64> = seg_end_vertex
            .iter()
            .map(|&v| merged.cum_len_m()[v] / total)
            .collect();
        *seg_cum_fraction.last_mut().expect("non-empty") = 1.0;
        let mut seg_first_edge = Vec::with_capacity(segment_ids.len());
        let mut start = 0;
        for &end in &seg_end_vertex {
            seg_first_edge.push(start);
            start = end;
        }
        Ok(Route {
            segment_ids: segment_ids.to_vec(),
            merged,
            seg_cum_fraction,
            seg_first_edge,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Label {
    cost: f64,
    id: usize,
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    // BinaryHeap is a max-heap: invert so the cheapest, then smallest id, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// A connected segment sequence with its merged geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub segment_ids: Vec<usize>,
    pub merged: Polyline,
    /// Cumulative length fraction at the end of each member segment.
    pub seg_cum_fraction: Vec<f64>,
    seg_first_edge: Vec<usize>,
}

impl Route {
    pub fn len_m(&self) -> f64 {
        self.merged.total_len_m()
    }

    /// Position in `segment_ids` of the segment that owns merged edge `edge`.
    pub fn segment_of_edge(&self, edge: usize) -> usize {
        self.seg_first_edge.partition_point(|&e| e <= edge).max(1) - 1
    }
}

/// Synthetic grid-of-streets city. Every lattice edge becomes two directed
/// segments; intersections are displaced by at most `jitter_frac * spacing_m`.
pub fn build_synthetic_city(
    rows: usize,
    cols: usize,
    spacing_m: f64,
    jitter_frac: f64,
    seed: u64,
) -> Result<RoadNetwork, RoadError> {
    if rows < 2 || cols < 2 {
        return Err(RoadError::InvalidParams("rows and cols must be at least 2"));
    }
    if !(spacing_m > 0.0) || !spacing_m.is_finite() {
        return Err(RoadError::InvalidParams("spacing must be positive"));
    }
    if !(0.0..0.5).contains(&jitter_frac) {
        return Err(RoadError::InvalidParams("jitter fraction must be in [0, 0.5)"));
    }
    let mut rng = substream(seed, "city");
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (mut east, mut north) = (c as f64 * spacing_m, r as f64 * spacing_m);
            if jitter_frac > 0.0 {
                let radius = jitter_frac * spacing_m * math::sqrt(rng.random::<f64>());
                let angle = core::f64::consts::TAU * rng.random::<f64>();
                east += radius * math::cos(angle);
                north += radius * math::sin(angle);
            }
            nodes.push(CITY_ORIGIN.offset_m(east, north));
        }
    }
    let node = |r: usize, c: usize| r * cols + c;
    let mut segments = Vec::new();
    let mut endpoints = Vec::new();
    let mut push = |a: usize, b: usize, name: String, segments: &mut Vec<RoadSegment>| -> Result<(), RoadError> {
        let id = segments.len();
        segments.push(RoadSegment::new(id, vec![nodes[a], nodes[b]], Some(name))?);
        endpoints.push((a, b));
        Ok(())
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                let (a, b) = (node(r, c), node(r, c + 1));
                push(a, b, format!("Street R{r}"), &mut segments)?;
                push(b, a, format!("Street R{r}"), &mut segments)?;
            }
            if r + 1 < rows {
                let (a, b) = (node(r, c), node(r + 1, c));
                push(a, b, format!("Street C{c}"), &mut segments)?;
                push(b, a, format!("Street C{c}"), &mut segments)?;
            }
        }
    }
    let mut leaving = vec![Vec::new(); rows * cols];
    for (id, &(a, _)) in endpoints.iter().enumerate() {
        leaving[a].push(id);
    }
    let adjacency: Vec<(usize, usize)> = endpoints
        .iter()
        .enumerate()
        .flat_map(|(i, &(_, b))| leaving[b].iter().map(move |&j| (i, j)))
        .collect();
    RoadNetwork::new(segments, &adjacency)
}

/// Min-max normalized linestring of a segment, the spatial input of the road
/// context encoder.
pub fn segment_spatial_input(seg: &RoadSegment, bbox: &BBox) -> Vec<[f64; 2]> {
    seg.geometry.points().iter().map(|&p| bbox.normalize(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> RoadNetwork {
        let o = CITY_ORIGIN;
        let pts: Vec<LonLat> = (0..4).map(|k| o.offset_m(100.0 * k as f64, 0.0)).collect();
        let segs = (0..3)
            .map(|k| RoadSegment::new(k, vec![pts[k], pts[k + 1]], None).unwrap())
            .collect();
        RoadNetwork::new(segs, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn lattice_counts() {
        let net = build_synthetic_city(2, 2, 100.0, 0.0, 1).unwrap();
        assert_eq!(net.num_segments(), 8);
        let net = build_synthetic_city(20, 20, 100.0, 0.2, 1).unwrap();
        assert_eq!(net.num_segments(), 2 * (2 * 20 * 19));
    }

    #[test]
    fn city_is_deterministic_per_seed() {
        let a = build_synthetic_city(5, 4, 150.0, 0.3, 9).unwrap();
        let b = build_synthetic_city(5, 4, 150.0, 0.3, 9).unwrap();
        let c = build_synthetic_city(5, 4, 150.0, 0.3, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_city_params() {
        assert!(build_synthetic_city(1, 5, 100.0, 0.0, 0).is_err());
        assert!(build_synthetic_city(3, 3, 0.0, 0.0, 0).is_err());
        assert!(build_synthetic_city(3, 3, 100.0, 0.5, 0).is_err());
    }

    #[test]
    fn trivial_and_corridor_paths() {
        let net = corridor();
        assert_eq!(net.shortest_path(1, 1).unwrap().segment_ids, vec![1]);
        assert_eq!(net.shortest_path(0, 2).unwrap().segment_ids, vec![0, 1, 2]);
        assert_eq!(
            net.shortest_path(2, 0).unwrap_err(),
            RoadError::NoRoute { src: 2, dst: 0 }
        );
    }

    #[test]
    fn route_fractions() {
        let net = corridor();
        let one = net.route(&[0]).unwrap();
        assert_eq!(one.merged, net.segment(0).unwrap().geometry);
        assert_eq!(one.seg_cum_fraction, vec![1.0]);
        let two = net.route(&[0, 1]).unwrap();
        assert!((two.seg_cum_fraction[0] - 0.5).abs() < 1e-9);
        assert_eq!(two.merged.points().len(), 3);
        let three = net.route(&[0, 1, 2]).unwrap();
        for (i, f) in three.seg_cum_fraction.iter().enumerate() {
            assert!((f - (i + 1) as f64 / 3.0).abs() < 1e-9);
        }
        let total: f64 = (0..3).map(|k| net.segment(k).unwrap().length_m).sum();
        assert!((three.len_m() - total).abs() <= 1e-6 * total);
        assert_eq!(three.segment_of_edge(0), 0);
        assert_eq!(three.segment_of_edge(2), 2);
    }

    #[test]
    fn non_adjacent_route_is_rejected() {
        let net = corridor();
        assert_eq!(
            net.route(&[0, 2]).unwrap_err(),
            RoadError::Connectivity { from: 0, to: 2 }
        );
        assert_eq!(net.route(&[]).unwrap_err(), RoadError::EmptyRoute);
        assert_eq!(net.route(&[7]).unwrap_err(), RoadError::UnknownSegment(7));
    }

    #[test]
    fn spatial_input_normalization() {
        let net = corridor();
        let bbox = net.bbox();
        let first = segment_spatial_input(net.segment(0).unwrap(), &bbox);
        assert_eq!(first[0][0], 0.0);
        let last = segment_spatial_input(net.segment(2).unwrap(), &bbox);
        assert_eq!(last[1][0], 1.0);
        let square = BBox {
            min_lon: 0.0,
            min_lat: 0.0,
            max_lon: 2.0,
            max_lat: 2.0,
        };
        let seg = RoadSegment::new(0, vec![LonLat::new(1.0, 1.0), LonLat::new(2.0, 2.0)], None).unwrap();
        assert_eq!(segment_spatial_input(&seg, &square), vec![[0.5, 0.5], [1.0, 1.0]]);
    }
}
