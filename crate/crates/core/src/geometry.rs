//! Coordinate systems: camera-to-world homographies, the agent-centric frame
//! and destination feature vectors.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(self, other: Point) -> Point {
        Point::new(self.x + other.x, self.y + other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned box `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min <= x_max && y_min <= y_max) {
            return Err(GtpError::contract(format!(
                "empty box [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_points(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(GtpError::contract("bounding box of no points"));
        }
        let mut b = BBox {
            x_min: f64::INFINITY,
            y_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in points {
            b.x_min = b.x_min.min(p.x);
            b.y_min = b.y_min.min(p.y);
            b.x_max = b.x_max.max(p.x);
            b.y_max = b.y_max.max(p.y);
        }
        Ok(b)
    }

    /// Corners in counter-clockwise order starting at `(x_min, y_min)`.
    pub fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x_min, self.y_min),
            Point::new(self.x_max, self.y_min),
            Point::new(self.x_max, self.y_max),
            Point::new(self.x_min, self.y_max),
        ]
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance(&self, p: Point) -> f64 {
        let dx = (self.x_min - p.x).max(0.0).max(p.x - self.x_max);
        let dy = (self.y_min - p.y).max(0.0).max(p.y - self.y_max);
        dx.hypot(dy)
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// 3×3 matrix taking homogeneous image coordinates to world metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

const MIN_W: f64 = 1e-12;

impl Homography {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let matrix = Matrix3::from_fn(|r, c| rows[r][c]);
        let det = matrix.determinant();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(GtpError::contract(format!("homography is singular (det = {det:e})")));
        }
        Ok(Homography { matrix })
    }

    pub fn identity() -> Self {
        Homography {
            matrix: Matrix3::identity(),
        }
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn inverse(&self) -> Homography {
        Homography {
            matrix: self.matrix.try_inverse().expect("checked invertible at construction"),
        }
    }

    fn project(m: &Matrix3<f64>, p: Point) -> Result<Point> {
        let v = m * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < MIN_W {
            return Err(GtpError::DegenerateProjection(v.z));
        }
        Ok(Point::new(v.x / v.z, v.y / v.z))
    }

    pub fn image_to_world(&self, pixel: Point) -> Result<Point> {
        Self::project(&self.matrix, pixel)
    }

    pub fn world_to_image(&self, world: Point) -> Result<Point> {
        Self::project(&self.inverse().matrix, world)
    }

    /// Parses three lines of three whitespace-separated numbers.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let values: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let values = values.map_err(|e| GtpError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if values.len() != 3 {
                return Err(GtpError::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected 3 values, found {}", values.len()),
                });
            }
            rows.push([values[0], values[1], values[2]]);
        }
        if rows.len() != 3 {
            return Err(GtpError::Parse {
                path: origin.to_path_buf(),
                line: rows.len(),
                msg: format!("expected 3 rows, found {}", rows.len()),
            });
        }
        Homography::new([rows[0], rows[1], rows[2]])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Homography::new(rows).map_err(serde::de::Error::custom)
    }
}

/// Distance below which two observed points count as the same place.
pub const STATIONARY_EPS: f64 = 1e-6;

/// Rigid frame rooted at the last observed position, rotated so that the
/// direction back toward the first observation becomes `(-1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentFrame {
    pub root: Point,
    /// Counter-clockwise rotation applied after translating by `-root`.
    pub rotation: f64,
}

impl AgentFrame {
    pub fn identity() -> Self {
        AgentFrame {
            root: Point::ORIGIN,
            rotation: 0.0,
        }
    }

    /// Builds the frame of an observed trajectory.
    ///
    /// When `q_1` sits on the root (within [`STATIONARY_EPS`]) the most recent
    /// earlier point that is distinct from the root orients the frame instead;
    /// if every point coincides the rotation is zero.
    pub fn from_observed(observed: &[Point]) -> Result<Self> {
        let Some(&root) = observed.last() else {
            return Err(GtpError::contract("agent frame of an empty trajectory"));
        };
        let first = observed[0];
        let back = if first.dist(root) >= STATIONARY_EPS {
            Some(first.sub(root))
        } else {
            observed
                .iter()
                .rev()
                .skip(1)
                .find(|p| p.dist(root) >= STATIONARY_EPS)
                .map(|p| p.sub(root))
        };
        let rotation = match back {
            Some(v) => normalize_angle(PI - v.y.atan2(v.x)),
            None => 0.0,
        };
        Ok(AgentFrame { root, rotation })
    }

    pub fn to_frame(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let d = p.sub(self.root);
        Point::new(c * d.x - s * d.y, s * d.x + c * d.y)
    }

    pub fn from_frame(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        Point::new(c * p.x + s * p.y, -s * p.x + c * p.y).add(self.root)
    }

    pub fn to_frame_all(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|p| self.to_frame(*p)).collect()
    }

    pub fn from_frame_all(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|p| self.from_frame(*p)).collect()
    }
}

/// Whether `p` lies in the convex polygon with cyclically ordered `corners`
/// (either orientation, boundary included).
pub fn convex_contains(corners: &[Point], p: Point) -> bool {
    let n = corners.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (a, b) = (corners[i], corners[(i + 1) % n]);
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if cross.abs() <= 1e-12 {
            // on the edge line: inside only if within the segment's extent
            let within = p.x >= a.x.min(b.x) - 1e-12
                && p.x <= a.x.max(b.x) + 1e-12
                && p.y >= a.y.min(b.y) - 1e-12
                && p.y <= a.y.max(b.y) + 1e-12;
            if within {
                return true;
            }
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    // degenerate polygons (points, segments) contain only their boundary
    sign != 0.0 && n >= 3 && polygon_area(corners).abs() > 0.0
}

fn polygon_area(corners: &[Point]) -> f64 {
    let n = corners.len();
    (0..n)
        .map(|i| {
            let (a, b) = (corners[i], corners[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        * 0.5
}

/// Distance from `p` to a convex polygon (zero inside).
pub fn convex_distance(corners: &[Point], p: Point) -> f64 {
    if convex_contains(corners, p) {
        return 0.0;
    }
    let n = corners.len();
    (0..n)
        .map(|i| segment_distance(corners[i], corners[(i + 1) % n], p))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(a: Point, b: Point, p: Point) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2).clamp(0.0, 1.0);
    p.dist(Point::new(a.x + t * ab.x, a.y + t * ab.y))
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Destination attributes as seen from the agent:
/// `(x_min, y_min, x_max, y_max, θ_min, θ_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationFeatureVec {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl DestinationFeatureVec {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            self.theta_min,
            self.theta_max,
        ]
    }

    /// Features of a region outline (cyclic world corners) seen from `frame`.
    pub fn compute(frame: &AgentFrame, world_corners: &[Point; 4]) -> Self {
        let corners = world_corners.map(|c| frame.to_frame(c));
        let b = BBox::from_points(&corners).expect("four corners");
        let (theta_min, theta_max) = if convex_contains(world_corners, frame.root) {
            log::debug!("agent root lies inside destination box; using full angular range");
            (-PI, PI)
        } else {
            covering_arc(&corners.map(|c| c.y.atan2(c.x)))
        };
        DestinationFeatureVec {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            theta_min,
            theta_max,
        }
    }
}

/// Smallest arc containing every angle, as `(start, end)` with `end - start`
/// minimal and the arc's midpoint wrapped into `(-π, π]`.
pub fn covering_arc(angles: &[f64]) -> (f64, f64) {
    let mut a: Vec<f64> = angles.iter().map(|v| normalize_angle(*v)).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    // the arc is the complement of the widest gap between neighbours
    let mut best_gap = a[0] + 2.0 * PI - a[n - 1];
    let mut start = a[0];
    for i in 1..n {
        let gap = a[i] - a[i - 1];
        if gap > best_gap {
            best_gap = gap;
            start = a[i];
        }
    }
    let width = 2.0 * PI - best_gap;
    let mid = normalize_angle(start + 0.5 * width);
    (mid - 0.5 * width, mid + 0.5 * width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol
    }

    #[test]
    fn homography_cases() {
        let p = Point::new(3.0, 4.0);
        assert_eq!(Homography::identity().image_to_world(p).unwrap(), p);
        let h = Homography::new([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(h.image_to_world(p).unwrap(), Point::new(6.0, 8.0));
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(h.image_to_world(p).unwrap(), Point::new(1.5, 2.0));
    }

    #[test]
    fn homography_degenerate_projection() {
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            h.image_to_world(Point::new(-1.0, 5.0)),
            Err(GtpError::DegenerateProjection(_))
        ));
    }

    #[test]
    fn singular_homography_rejected() {
        assert!(Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn homography_text_format() {
        let text = "2.8e-02 2.0e-03 -4.6\n 8.0e-04 2.5e-02 -5.2\n3.4e-04 4.6e-05 4.6e-01\n";
        let h = Homography::parse(text, Path::new("H.txt")).unwrap();
        assert_eq!(h.rows()[2][2], 0.46);
        assert!(Homography::parse("1 0 0\n0 1\n0 0 1", Path::new("bad")).is_err());
    }

    #[test]
    fn agent_frame_half_turn() {
        let observed: Vec<Point> = (0..5).rev().map(|i| Point::new(i as f64 * 0.5, 0.0)).collect();
        let frame = AgentFrame::from_observed(&observed).unwrap();
        assert!(close(frame.to_frame(Point::new(1.0, 1.0)), Point::new(-1.0, -1.0), 1e-12));
        assert_eq!(frame.to_frame(Point::new(0.0, 0.0)), Point::ORIGIN);
    }

    #[test]
    fn agent_frame_translation_only() {
        let frame = AgentFrame {
            root: Point::new(5.0, 5.0),
            rotation: 0.0,
        };
        assert_eq!(frame.to_frame(Point::new(6.0, 5.0)), Point::new(1.0, 0.0));
        let p = Point::new(0.3, -7.0);
        assert_eq!(AgentFrame::identity().to_frame(p), p);
    }

    #[test]
    fn agent_frame_stationary_fallbacks() {
        // q_1 equals the root, an interior point is distinct
        let observed = [Point::new(1.0, 1.0), Point::new(1.0, 3.0), Point::new(1.0, 1.0)];
        let frame = AgentFrame::from_observed(&observed).unwrap();
        let d = frame.to_frame(Point::new(1.0, 3.0));
        assert!(close(Point::new(d.x / d.norm(), d.y / d.norm()), Point::new(-1.0, 0.0), 1e-12));

        let still = [Point::new(2.0, 2.0); 4];
        let frame = AgentFrame::from_observed(&still).unwrap();
        assert_eq!(frame.rotation, 0.0);
        assert!(AgentFrame::from_observed(&[]).is_err());
    }

    #[test]
    fn destination_features_symmetric_box() {
        let b = BBox::new(1.0, -1.0, 2.0, 1.0).unwrap();
        let d = DestinationFeatureVec::compute(&AgentFrame::identity(), &b.corners());
        let expected = [1.0, -1.0, 2.0, 1.0, -FRAC_PI_4, FRAC_PI_4];
        for (a, e) in d.to_array().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{:?}", d);
        }
    }

    #[test]
    fn destination_features_point_box() {
        let b = BBox::new(1.0, 0.0, 1.0, 0.0).unwrap();
        let d = DestinationFeatureVec::compute(&AgentFrame::identity(), &b.corners());
        assert_eq!(d.to_array(), [1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn destination_containing_root_spans_full_circle() {
        let b = BBox::new(-1.0, -1.0, 1.0, 1.0).unwrap();
        let d = DestinationFeatureVec::compute(&AgentFrame::identity(), &b.corners());
        assert_eq!((d.theta_min, d.theta_max), (-PI, PI));
    }

    #[test]
    fn arc_across_the_branch_cut() {
        let deg = |v: f64| v.to_radians();
        let (lo, hi) = covering_arc(&[deg(170.0), deg(-170.0)]);
        assert!((hi - lo - deg(20.0)).abs() < 1e-12);
        // midpoint is π, which wraps to itself
        assert!((0.5 * (lo + hi) - PI).abs() < 1e-12);
    }

    /// Oracle for the angular interval: brute-force over candidate starts.
    fn brute_force_width(angles: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for s in angles {
            let width = angles
                .iter()
                .map(|a| (a - s).rem_euclid(2.0 * PI))
                .fold(0.0, f64::max);
            best = best.min(width);
        }
        best
    }

    proptest! {
        #[test]
        fn frame_is_rigid_and_invertible(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..10),
            a in (-50.0f64..50.0, -50.0f64..50.0),
            b in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            let observed: Vec<Point> = pts.into_iter().map(Point::from).collect();
            let frame = AgentFrame::from_observed(&observed).unwrap();
            let (a, b) = (Point::from(a), Point::from(b));
            let (fa, fb) = (frame.to_frame(a), frame.to_frame(b));
            prop_assert!((fa.dist(fb) - a.dist(b)).abs() < 1e-9);
            prop_assert!(close(frame.from_frame(fa), a, 1e-9));
            let root = frame.to_frame(*observed.last().unwrap());
            prop_assert!(root.x.abs() < 1e-12 && root.y.abs() < 1e-12);
            let q1 = observed[0];
            let root_w = *observed.last().unwrap();
            if q1.dist(root_w) >= STATIONARY_EPS {
                let d = frame.to_frame(q1);
                prop_assert!(close(Point::new(d.x / d.norm(), d.y / d.norm()), Point::new(-1.0, 0.0), 1e-9));
            }
            // reflections would flip the orientation of a triangle
            let c = Point::new(a.x + 1.0, a.y);
            let cross_w = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
            let fc = frame.to_frame(c);
            let cross_f = (fb.x - fa.x) * (fc.y - fa.y) - (fb.y - fa.y) * (fc.x - fa.x);
            prop_assert!((cross_w - cross_f).abs() < 1e-7);
        }

        #[test]
        fn homography_round_trip(
            x in 0.0f64..640.0, y in 0.0f64..480.0,
            h in proptest::array::uniform9(-0.05f64..0.05),
        ) {
            let rows = [[1.0 + h[0], h[1], h[2] * 100.0], [h[3], 1.0 + h[4], h[5] * 100.0], [h[6] * 1e-3, h[7] * 1e-3, 1.0 + h[8]]];
            let hom = Homography::new(rows).unwrap();
            let p = Point::new(x, y);
            let back = hom.world_to_image(hom.image_to_world(p).unwrap()).unwrap();
            prop_assert!(close(back, p, 1e-6));
        }

        #[test]
        fn arc_is_minimal_and_bounded(
            root in (-5.0f64..5.0, -5.0f64..5.0),
            corner in (-20.0f64..20.0, -20.0f64..20.0),
            size in (0.0f64..8.0, 0.0f64..8.0),
            rot in -PI..PI,
        ) {
            let b = BBox::new(corner.0, corner.1, corner.0 + size.0, corner.1 + size.1).unwrap();
            let frame = AgentFrame { root: Point::from(root), rotation: rot };
            let d = DestinationFeatureVec::compute(&frame, &b.corners());
            prop_assert!(d.x_min <= d.x_max && d.y_min <= d.y_max);
            prop_assert!(d.theta_min <= d.theta_max);
            let width = d.theta_max - d.theta_min;
            prop_assert!(width <= 2.0 * PI);
            prop_assert_eq!(convex_contains(&b.corners(), frame.root), b.contains(frame.root));
            prop_assert!((convex_distance(&b.corners(), frame.root) - b.distance(frame.root)).abs() < 1e-9);
            if b.contains(frame.root) {
                prop_assert_eq!(width, 2.0 * PI);
            } else {
                prop_assert!(width < 2.0 * PI);
                let angles: Vec<f64> = b.corners().iter().map(|c| {
                    let p = frame.to_frame(*c);
                    p.y.atan2(p.x)
                }).collect();
                prop_assert!((width - brute_force_width(&angles)).abs() < 1e-9);
                let mid = 0.5 * (d.theta_min + d.theta_max);
                prop_assert!(mid > -PI - 1e-12 && mid <= PI + 1e-12);
            }
        }

        #[test]
        fn rotating_frame_shifts_angles(
            delta in -0.5f64..0.5,
            cx in 3.0f64..10.0, cy in -2.0f64..2.0,
        ) {
            // box well inside the right half-plane so no wrap occurs
            let b = BBox::new(cx, cy, cx + 1.0, cy + 1.0).unwrap();
            let base = DestinationFeatureVec::compute(&AgentFrame::identity(), &b.corners());
            let turned = DestinationFeatureVec::compute(&AgentFrame { root: Point::ORIGIN, rotation: -delta }, &b.corners());
            // frame rotated by δ: world points appear rotated by -δ
            prop_assert!((turned.theta_min - (base.theta_min - delta)).abs() < 1e-9);
            prop_assert!((turned.theta_max - (base.theta_max - delta)).abs() < 1e-9);
        }
    }
}
