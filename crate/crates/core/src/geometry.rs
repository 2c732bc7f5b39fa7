//! Polygon geometry in local planar kilometres.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geo::{location_offset, GeoPoint, LocationOffset, KM_PER_DEG};

pub type Pt = [f64; 2];

/// Exterior ring of a tract; stored open (the closing vertex is dropped).
#[derive(Clone, Debug, PartialEq)]
pub struct TractPolygon {
    ring: Vec<GeoPoint>,
}

impl TractPolygon {
    pub fn new(mut ring: Vec<GeoPoint>) -> Result<Self> {
        if ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        let mut distinct = ring.clone();
        distinct.sort_by(|a, b| a.lon.total_cmp(&b.lon).then(a.lat.total_cmp(&b.lat)));
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(Error::Geometry(format!(
                "polygon needs 3 distinct vertices, got {}",
                distinct.len()
            )));
        }
        let poly = Self { ring };
        if poly.ring.len() <= 64 {
            let pts: Vec<Pt> = poly.ring.iter().map(|p| [p.lon, p.lat]).collect();
            if self_intersects(&pts) {
                return Err(Error::Geometry("self-intersecting ring".into()));
            }
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.ring
    }

    /// Vertices in planar km relative to `origin` (x east, y north).
    pub fn project(&self, origin: GeoPoint) -> Vec<Pt> {
        self.ring
            .iter()
            .map(|&p| {
                let [dy, dx] = location_offset(p, origin).km();
                [dx, dy]
            })
            .collect()
    }
}

/// Signed shoelace area, positive for counter-clockwise rings.
pub fn signed_area(pts: &[Pt]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for i in 0..n {
        let [x0, y0] = pts[i];
        let [x1, y1] = pts[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

pub fn perimeter(pts: &[Pt]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let [x0, y0] = pts[i];
            let [x1, y1] = pts[(i + 1) % n];
            (x1 - x0).hypot(y1 - y0)
        })
        .sum()
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
pub fn convex_hull(pts: &[Pt]) -> Vec<Pt> {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut hull: Vec<Pt> = Vec::with_capacity(2 * p.len());
    for &q in &p {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
            hull.pop();
        }
        hull.push(q);
    }
    let lower = hull.len() + 1;
    for &q in p.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
            hull.pop();
        }
        hull.push(q);
    }
    hull.pop();
    hull
}

/// Area-weighted centroid.
pub fn centroid(pts: &[Pt]) -> Pt {
    let n = pts.len();
    let a = signed_area(pts);
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let [x0, y0] = pts[i];
        let [x1, y1] = pts[(i + 1) % n];
        let c = x0 * y1 - x1 * y0;
        cx += (x0 + x1) * c;
        cy += (y0 + y1) * c;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// Even-odd point-in-polygon test.
pub fn contains(pts: &[Pt], q: Pt) -> bool {
    let n = pts.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (pts[i], pts[j]);
        if (a[1] > q[1]) != (b[1] > q[1]) {
            let x = a[0] + (q[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if q[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn on_segment(a: Pt, b: Pt, q: Pt) -> bool {
    q[0] >= a[0].min(b[0]) && q[0] <= a[0].max(b[0]) && q[1] >= a[1].min(b[1]) && q[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test.
pub fn segments_intersect(a: Pt, b: Pt, c: Pt, d: Pt) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// True when two non-adjacent edges of the ring touch.
pub fn self_intersects(pts: &[Pt]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

/// Axis-aligned box `[min_x, min_y, max_x, max_y]`.
pub type BoxKm = [f64; 4];

/// Polygon-box intersection: edge crossings or containment either way.
pub fn intersects_box(pts: &[Pt], bx: BoxKm) -> bool {
    let [x0, y0, x1, y1] = bx;
    let inside = |p: &Pt| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1;
    if pts.iter().any(inside) {
        return true;
    }
    let corners = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
    if corners.iter().any(|&c| contains(pts, c)) {
        return true;
    }
    let n = pts.len();
    for i in 0..n {
        for k in 0..4 {
            if segments_intersect(pts[i], pts[(i + 1) % n], corners[k], corners[(k + 1) % 4]) {
                return true;
            }
        }
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometrySummary {
    pub area: f64,
    pub perimeter: f64,
    pub hull_area: f64,
    /// `ln(1 + area)`
    pub log_area: f64,
    /// `4 pi A / P^2`
    pub compactness: f64,
    /// `A / H`
    pub hull_ratio: f64,
}

impl GeometrySummary {
    pub fn from_planar(pts: &[Pt]) -> Result<Self> {
        let area = signed_area(pts).abs();
        if !(area > 0.0) {
            return Err(Error::Geometry("zero-area polygon".into()));
        }
        let per = perimeter(pts);
        let hull_area = signed_area(&convex_hull(pts)).abs().max(area);
        Ok(Self {
            area,
            perimeter: per,
            hull_area,
            log_area: area.ln_1p(),
            compactness: 4.0 * PI * area / (per * per),
            hull_ratio: area / hull_area,
        })
    }
}

pub fn geometry_summary(poly: &TractPolygon, origin: GeoPoint) -> Result<GeometrySummary> {
    GeometrySummary::from_planar(&poly.project(origin))
}

/// `[dp_lat, dp_lon, mu, kappa, rho]` for one tract.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TractSummary(pub [f64; 5]);

impl TractSummary {
    pub fn new(offset: LocationOffset, g: &GeometrySummary) -> Self {
        Self([offset.0[0], offset.0[1], g.log_area, g.compactness, g.hull_ratio])
    }
}

/// Converts planar km (relative to `origin`) back to geographic points.
pub fn unproject(pts: &[Pt], origin: GeoPoint) -> Vec<GeoPoint> {
    let c = origin.lat.to_radians().cos();
    pts.iter()
        .map(|&[x, y]| GeoPoint {
            lon: origin.lon + x / (KM_PER_DEG * c),
            lat: origin.lat + y / KM_PER_DEG,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ORIGIN: GeoPoint = GeoPoint { lon: -100.0, lat: 40.0 };

    fn poly(pts: &[Pt]) -> TractPolygon {
        TractPolygon::new(unproject(pts, ORIGIN)).unwrap()
    }

    #[test]
    fn unit_square() {
        let s = geometry_summary(&poly(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), ORIGIN).unwrap();
        assert!((s.area - 1.0).abs() < 1e-9);
        assert!((s.perimeter - 4.0).abs() < 1e-9);
        assert!((s.compactness - PI / 4.0).abs() < 1e-9);
        assert!((s.hull_ratio - 1.0).abs() < 1e-12);
        assert!((s.log_area - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn regular_polygon_approaches_circle() {
        let n = 64;
        let pts: Vec<Pt> = (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                [t.cos(), t.sin()]
            })
            .collect();
        let s = GeometrySummary::from_planar(&pts).unwrap();
        let nf = n as f64;
        let area = nf / 2.0 * (2.0 * PI / nf).sin();
        let per = 2.0 * nf * (PI / nf).sin();
        assert!((s.area - area).abs() < 1e-12);
        assert!((s.perimeter - per).abs() < 1e-12);
        assert!((s.compactness - 1.0).abs() < 0.005);
    }

    #[test]
    fn l_shape_hull_ratio() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.5, 0.5], [0.5, 1.0], [0.0, 1.0]];
        let s = GeometrySummary::from_planar(&pts).unwrap();
        assert!((s.area - 0.75).abs() < 1e-12);
        assert!((s.hull_area - 0.875).abs() < 1e-12);
        assert!((s.hull_ratio - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn hull_drops_collinear() {
        let pts = [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(convex_hull(&pts).len(), 4);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(GeometrySummary::from_planar(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).is_err());
        let p = |x, y| GeoPoint { lon: x, lat: y };
        assert!(TractPolygon::new(vec![p(0.0, 0.0), p(1.0, 0.0), p(0.0, 0.0)]).is_err());
        // bow tie
        assert!(TractPolygon::new(vec![p(0.0, 0.0), p(1.0, 1.0), p(1.0, 0.0), p(0.0, 1.0)]).is_err());
    }

    #[test]
    fn closing_vertex_dropped() {
        let p = |x, y| GeoPoint { lon: x, lat: y };
        let t = TractPolygon::new(vec![p(0.0, 0.0), p(0.1, 0.0), p(0.1, 0.1), p(0.0, 0.0)]).unwrap();
        assert_eq!(t.vertices().len(), 3);
    }

    #[test]
    fn box_intersection() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(intersects_box(&sq, [0.5, 0.5, 2.0, 2.0]));
        assert!(intersects_box(&sq, [-1.0, -1.0, 2.0, 2.0]));
        assert!(intersects_box(&sq, [0.2, 0.2, 0.4, 0.4]));
        assert!(intersects_box(&sq, [-1.0, 0.4, 2.0, 0.6]));
        assert!(!intersects_box(&sq, [1.5, 1.5, 2.0, 2.0]));
    }

    #[test]
    fn centroid_of_square() {
        let c = centroid(&[[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]]);
        assert_eq!(c, [1.0, 1.0]);
    }
}
