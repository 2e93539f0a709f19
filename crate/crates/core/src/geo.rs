//! Geodesic and local-plane geometry: distances, polylines, projections and
//! grid indexing.
//!
//! Distances are great-circle (haversine) on a sphere of radius
//! [`EARTH_RADIUS_M`]. Projections work in a local equirectangular plane
//! centred on the query point, which is accurate at city scale and keeps the
//! per-edge projection linear. Along an edge, positions are parameterised by
//! linear interpolation of longitude and latitude, so a foot at edge parameter
//! `t` sits exactly at `a + t (b - a)`.

use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

const DEG: f64 = PI / 180.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("invalid coordinate ({lon}, {lat})")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("degenerate geometry: {0}")]
    Geometry(&'static str),
    #[error("fraction {0} outside [0, 1]")]
    Domain(f64),
}

/// A WGS84 position in degrees. Serialized as `[lon, lat]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub const fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }

    pub fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }

    fn check(&self) -> Result<(), GeoError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate {
                lon: self.lon,
                lat: self.lat,
            })
        }
    }

    pub fn lerp(self, other: LonLat, t: f64) -> LonLat {
        LonLat {
            lon: self.lon + t * (other.lon - self.lon),
            lat: self.lat + t * (other.lat - self.lat),
        }
    }

    /// Moves the point by `east_m`/`north_m` meters in the local plane.
    pub fn offset_m(self, east_m: f64, north_m: f64) -> LonLat {
        let (kx, ky) = meters_per_degree(self.lat);
        LonLat {
            lon: self.lon + east_m / kx,
            lat: self.lat + north_m / ky,
        }
    }
}

impl From<[f64; 2]> for LonLat {
    fn from(v: [f64; 2]) -> Self {
        LonLat { lon: v[0], lat: v[1] }
    }
}

impl From<LonLat> for [f64; 2] {
    fn from(p: LonLat) -> Self {
        [p.lon, p.lat]
    }
}

/// Meters per degree of longitude and latitude at `lat_deg` in the local plane.
pub fn meters_per_degree(lat_deg: f64) -> (f64, f64) {
    let ky = EARTH_RADIUS_M * DEG;
    (ky * math::cos(lat_deg * DEG), ky)
}

/// Haversine distance without input validation.
pub fn haversine_m(a: LonLat, b: LonLat) -> f64 {
    let dlat = (b.lat - a.lat) * DEG;
    let dlon = (b.lon - a.lon) * DEG;
    let s1 = math::sin(dlat * 0.5);
    let s2 = math::sin(dlon * 0.5);
    let h = s1 * s1 + math::cos(a.lat * DEG) * math::cos(b.lat * DEG) * s2 * s2;
    2.0 * EARTH_RADIUS_M * math::asin(math::sqrt(h.clamp(0.0, 1.0)))
}

/// Great-circle distance in meters.
pub fn geodesic_m(a: LonLat, b: LonLat) -> Result<f64, GeoError> {
    a.check()?;
    b.check()?;
    Ok(haversine_m(a, b))
}

/// Axis-aligned lon/lat box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn from_points<'a, I: IntoIterator<Item = &'a LonLat>>(points: I) -> Option<BBox> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = BBox {
            min_lon: first.lon,
            min_lat: first.lat,
            max_lon: first.lon,
            max_lat: first.lat,
        };
        for p in it {
            b.min_lon = b.min_lon.min(p.lon);
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lon = b.max_lon.max(p.lon);
            b.max_lat = b.max_lat.max(p.lat);
        }
        Some(b)
    }

    /// Grows the box by `margin_m` meters on every side.
    pub fn padded_m(&self, margin_m: f64) -> BBox {
        let (kx, ky) = meters_per_degree(0.5 * (self.min_lat + self.max_lat));
        BBox {
            min_lon: self.min_lon - margin_m / kx,
            min_lat: self.min_lat - margin_m / ky,
            max_lon: self.max_lon + margin_m / kx,
            max_lat: self.max_lat + margin_m / ky,
        }
    }

    pub fn contains(&self, p: LonLat) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    pub fn south_west(&self) -> LonLat {
        LonLat::new(self.min_lon, self.min_lat)
    }

    pub fn lon_extent(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn lat_extent(&self) -> f64 {
        self.max_lat - self.min_lat
    }

    /// Min-max normalizes `p` to the unit square.
    pub fn normalize(&self, p: LonLat) -> [f64; 2] {
        [
            (p.lon - self.min_lon) / self.lon_extent(),
            (p.lat - self.min_lat) / self.lat_extent(),
        ]
    }

    pub fn denormalize(&self, q: [f64; 2]) -> LonLat {
        LonLat {
            lon: self.min_lon + q[0] * self.lon_extent(),
            lat: self.min_lat + q[1] * self.lat_extent(),
        }
    }
}

/// An ordered point list with cumulative geodesic lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<LonLat>,
    cum_len_m: Vec<f64>,
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Index of the edge holding the foot.
    pub edge: usize,
    /// Parameter of the foot along that edge, in `[0, 1]`.
    pub t: f64,
    /// Arc-length fraction of the foot along the whole polyline.
    pub abs_fraction: f64,
    pub foot: LonLat,
    pub dist_m: f64,
}

impl Polyline {
    pub fn new(points: Vec<LonLat>) -> Result<Self, GeoError> {
        if points.len() < 2 {
            return Err(GeoError::Geometry("polyline needs at least two points"));
        }
        for p in &points {
            p.check()?;
        }
        let mut cum_len_m = Vec::with_capacity(points.len());
        cum_len_m.push(0.0);
        let mut acc = 0.0;
        for w in points.windows(2) {
            acc += haversine_m(w[0], w[1]);
            cum_len_m.push(acc);
        }
        if !(acc > 0.0) {
            return Err(GeoError::Geometry("zero-length polyline"));
        }
        Ok(Self { points, cum_len_m })
    }

    pub fn points(&self) -> &[LonLat] {
        &self.points
    }

    pub fn cum_len_m(&self) -> &[f64] {
        &self.cum_len_m
    }

    pub fn total_len_m(&self) -> f64 {
        self.cum_len_m[self.cum_len_m.len() - 1]
    }

    pub fn num_edges(&self) -> usize {
        self.points.len() - 1
    }

    pub fn first(&self) -> LonLat {
        self.points[0]
    }

    pub fn last(&self) -> LonLat {
        self.points[self.points.len() - 1]
    }

    /// Closest point on the polyline to `p`.
    ///
    /// Each edge is solved in the local plane around `p` with the foot clamped
    /// to the edge; the global minimum wins and ties go to the smaller edge
    /// index.
    pub fn project(&self, p: LonLat) -> Result<Projection, GeoError> {
        self.project_from(p, 0)
    }

    /// Like [`Polyline::project`] but only considers edges `start_edge..`.
    pub fn project_from(&self, p: LonLat, start_edge: usize) -> Result<Projection, GeoError> {
        p.check()?;
        let start_edge = start_edge.min(self.num_edges() - 1);
        let (kx, ky) = meters_per_degree(p.lat);
        let mut best: Option<(usize, f64, f64)> = None;
        for e in start_edge..self.num_edges() {
            let a = self.points[e];
            let b = self.points[e + 1];
            let ax = (a.lon - p.lon) * kx;
            let ay = (a.lat - p.lat) * ky;
            let dx = (b.lon - a.lon) * kx;
            let dy = (b.lat - a.lat) * ky;
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let fx = ax + t * dx;
            let fy = ay + t * dy;
            let d2 = fx * fx + fy * fy;
            if best.is_none_or(|(_, _, bd)| d2 < bd) {
                best = Some((e, t, d2));
            }
        }
        let (edge, t, _) = best.ok_or(GeoError::Geometry("polyline has no edges"))?;
        let foot = self.points[edge].lerp(self.points[edge + 1], t);
        let along = self.cum_len_m[edge] + t * (self.cum_len_m[edge + 1] - self.cum_len_m[edge]);
        Ok(Projection {
            edge,
            t,
            abs_fraction: (along / self.total_len_m()).clamp(0.0, 1.0),
            foot,
            dist_m: haversine_m(p, foot),
        })
    }

    /// Edge index and edge parameter of the arc-length fraction `t`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64), GeoError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(GeoError::Domain(t));
        }
        let target = t * self.total_len_m();
        let last_edge = self.num_edges() - 1;
        let edge = (self.cum_len_m.partition_point(|&c| c <= target).max(1) - 1).min(last_edge);
        let len = self.cum_len_m[edge + 1] - self.cum_len_m[edge];
        let u = if len > 0.0 {
            ((target - self.cum_len_m[edge]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Ok((edge, u))
    }

    /// Point at arc-length fraction `t`, linear along each edge.
    pub fn point_at_fraction(&self, t: f64) -> Result<LonLat, GeoError> {
        let (edge, u) = self.locate(t)?;
        Ok(self.points[edge].lerp(self.points[edge + 1], u))
    }
}

/// Square metric grid anchored at a south-west origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: LonLat,
    pub cell_m: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    /// Smallest grid with `cell_m` cells covering `bbox`.
    pub fn covering(bbox: &BBox, cell_m: f64) -> Result<GridSpec, GeoError> {
        if !(cell_m > 0.0) || !cell_m.is_finite() {
            return Err(GeoError::Geometry("cell size must be positive"));
        }
        let origin = bbox.south_west();
        let (kx, ky) = meters_per_degree(origin.lat);
        let width = bbox.lon_extent() * kx;
        let height = bbox.lat_extent() * ky;
        Ok(GridSpec {
            origin,
            cell_m,
            rows: (math::floor(height / cell_m) as usize) + 1,
            cols: (math::floor(width / cell_m) as usize) + 1,
        })
    }

    /// `(row, col)` of the half-open cell holding `p`, or `None` outside the grid.
    pub fn index(&self, p: LonLat) -> Option<(usize, usize)> {
        let (kx, ky) = meters_per_degree(self.origin.lat);
        let north = (p.lat - self.origin.lat) * ky;
        let east = (p.lon - self.origin.lon) * kx;
        if !(north >= 0.0 && east >= 0.0) {
            return None;
        }
        let row = math::floor(north / self.cell_m) as usize;
        let col = math::floor(east / self.cell_m) as usize;
        (row < self.rows && col < self.cols).then_some((row, col))
    }

    /// Row-major cell id.
    pub fn cell_id(&self, rc: (usize, usize)) -> usize {
        rc.0 * self.cols + rc.1
    }

    /// The point `north_m`/`east_m` meters from the grid origin.
    pub fn offset_from_origin(&self, north_m: f64, east_m: f64) -> LonLat {
        let (kx, ky) = meters_per_degree(self.origin.lat);
        LonLat::new(self.origin.lon + east_m / kx, self.origin.lat + north_m / ky)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn chengdu() -> LonLat {
        LonLat::new(104.06, 30.66)
    }

    #[test]
    fn identity_distance_is_zero() {
        assert_eq!(geodesic_m(LonLat::new(0.0, 0.0), LonLat::new(0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn one_degree_on_equator_matches_reference() {
        // Extended-precision haversine: 2R asin(sin(pi/360)) evaluated by
        // series to 30 digits.
        // asin(sin(x)) == x for |x| < pi/2, so the exact value is R * pi / 180.
        let oracle = 6_371_008.8_f64 * core::f64::consts::PI / 180.0;
        let d = geodesic_m(LonLat::new(0.0, 0.0), LonLat::new(1.0, 0.0)).unwrap();
        assert!(((d - oracle) / oracle).abs() < 1e-9, "{d} vs {oracle}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = geodesic_m(LonLat::new(f64::NAN, 0.0), LonLat::new(0.0, 0.0)).unwrap_err();
        assert!(matches!(err, GeoError::InvalidCoordinate { .. }));
    }

    #[test]
    fn projection_of_midpoint() {
        let o = chengdu();
        let pl = Polyline::new(vec![o, o.offset_m(100.0, 0.0), o.offset_m(100.0, 100.0)]).unwrap();
        let mid = pl.point_at_fraction(0.5).unwrap();
        let pr = pl.project(mid).unwrap();
        assert!((pr.abs_fraction - 0.5).abs() < 1e-9);
        assert!(pr.dist_m < 1e-6);
    }

    #[test]
    fn projection_clamps_beyond_last_vertex() {
        let o = chengdu();
        let pl = Polyline::new(vec![o, o.offset_m(100.0, 0.0), o.offset_m(200.0, 0.0)]).unwrap();
        let beyond = o.offset_m(260.0, 0.0);
        let pr = pl.project(beyond).unwrap();
        assert_eq!(pr.abs_fraction, 1.0);
        assert_eq!(pr.foot, pl.last());
    }

    #[test]
    fn zero_length_polyline_is_rejected() {
        let o = chengdu();
        assert!(matches!(Polyline::new(vec![o, o]), Err(GeoError::Geometry(_))));
        assert!(matches!(Polyline::new(vec![o]), Err(GeoError::Geometry(_))));
    }

    #[test]
    fn fraction_endpoints_and_linearity() {
        let o = chengdu();
        let b = o.offset_m(300.0, 400.0);
        let pl = Polyline::new(vec![o, b]).unwrap();
        assert_eq!(pl.point_at_fraction(0.0).unwrap(), o);
        assert_eq!(pl.point_at_fraction(1.0).unwrap(), b);
        let q = pl.point_at_fraction(0.25).unwrap();
        let expect = o.lerp(b, 0.25);
        assert!((q.lon - expect.lon).abs() < 1e-12 && (q.lat - expect.lat).abs() < 1e-12);
        assert!(matches!(pl.point_at_fraction(1.5), Err(GeoError::Domain(_))));
        assert!(matches!(pl.point_at_fraction(-0.1), Err(GeoError::Domain(_))));
    }

    #[test]
    fn grid_index_rules() {
        let g = GridSpec {
            origin: chengdu(),
            cell_m: 100.0,
            rows: 10,
            cols: 10,
        };
        assert_eq!(g.index(g.origin), Some((0, 0)));
        let eps = 1e-6;
        assert_eq!(g.index(g.offset_from_origin(100.0 - eps, 100.0 - eps)), Some((0, 0)));
        assert_eq!(g.index(g.offset_from_origin(150.0, 250.0)), Some((1, 2)));
        assert_eq!(g.index(g.offset_from_origin(-1.0, 5.0)), None);
        assert_eq!(g.index(g.offset_from_origin(5.0, 1001.0)), None);
    }

    fn city_point() -> impl Strategy<Value = LonLat> {
        (103.9f64..104.2, 30.5f64..30.8).prop_map(|(lon, lat)| LonLat::new(lon, lat))
    }

    proptest! {
        #[test]
        fn geodesic_is_symmetric_and_metric(a in city_point(), b in city_point(), c in city_point()) {
            let ab = geodesic_m(a, b).unwrap();
            let ba = geodesic_m(b, a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
            let ac = geodesic_m(a, c).unwrap();
            let cb = geodesic_m(c, b).unwrap();
            prop_assert!(ab <= (ac + cb) * (1.0 + 1e-9));
        }

        #[test]
        fn project_then_locate_is_identity(
            legs in proptest::collection::vec((-300.0f64..300.0, -300.0f64..300.0), 1..6),
            t in 0.0f64..=1.0,
        ) {
            let mut pts = vec![chengdu()];
            for (e, n) in legs {
                let last = *pts.last().unwrap();
                pts.push(last.offset_m(e + 1.0, n));
            }
            let pl = Polyline::new(pts).unwrap();
            let q = pl.point_at_fraction(t).unwrap();
            let pr = pl.project(q).unwrap();
            let back = pl.point_at_fraction(pr.abs_fraction).unwrap();
            prop_assert!((back.lon - q.lon).abs() < 1e-9 && (back.lat - q.lat).abs() < 1e-9);
        }

        #[test]
        fn grid_cells_partition_the_box(north in 0.0f64..999.0, east in 0.0f64..999.0) {
            let g = GridSpec { origin: chengdu(), cell_m: 100.0, rows: 10, cols: 10 };
            let (r, c) = g.index(g.offset_from_origin(north, east)).unwrap();
            prop_assert!(r < 10 && c < 10);
            // the cell's own corners bracket the point
            prop_assert!((r as f64) * 100.0 <= north + 1e-6 && north < (r as f64 + 1.0) * 100.0 + 1e-6);
            prop_assert!((c as f64) * 100.0 <= east + 1e-6 && east < (c as f64 + 1.0) * 100.0 + 1e-6);
        }
    }
}
