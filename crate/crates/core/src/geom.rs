//! 2D geometry primitives shared by the simulator, lidar, and planner.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// 2D vector / point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction, or zero if the norm is ~0.
    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n < 1e-12 {
            Vec2::ZERO
        } else {
            self * (1.0 / n)
        }
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn from_angle(a: f64) -> Vec2 {
        Vec2::new(a.cos(), a.sin())
    }

    /// Rotate counter-clockwise by `a` radians.
    pub fn rotated(self, a: f64) -> Vec2 {
        let (s, c) = a.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl std::ops::Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl std::ops::AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

/// Robot pose: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Vec2,
    /// Heading in radians, normalized to (-pi, pi].
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            pos: Vec2::new(x, y),
            heading: wrap_angle(heading),
        }
    }

    /// World point at polar offset (d, theta) in this pose's frame.
    /// theta = 0 is straight ahead, positive counter-clockwise.
    pub fn polar_offset(&self, d: f64, theta: f64) -> Vec2 {
        self.pos + Vec2::from_angle(self.heading + theta) * d
    }

    /// Polar coordinates (d, theta) of a world point in this pose's frame.
    pub fn to_polar(&self, p: Vec2) -> (f64, f64) {
        let rel = p - self.pos;
        (rel.norm(), wrap_angle(rel.angle() - self.heading))
    }
}

/// Line segment between two points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Segment { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }
}

/// Normalize an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Closest point on segment `s` to point `p`.
pub fn segment_closest_point(p: Vec2, s: &Segment) -> Vec2 {
    let ab = s.b - s.a;
    let len_sq = ab.norm_sq();
    if len_sq < 1e-24 {
        return s.a;
    }
    let t = ((p - s.a).dot(ab) / len_sq).clamp(0.0, 1.0);
    s.a + ab * t
}

/// Distance from point `p` to segment `s`.
pub fn point_segment_dist(p: Vec2, s: &Segment) -> f64 {
    p.dist(segment_closest_point(p, s))
}

/// Distance between two segments (0 if they intersect).
pub fn segment_segment_dist(s1: &Segment, s2: &Segment) -> f64 {
    if segments_intersect(s1, s2) {
        return 0.0;
    }
    point_segment_dist(s1.a, s2)
        .min(point_segment_dist(s1.b, s2))
        .min(point_segment_dist(s2.a, s1))
        .min(point_segment_dist(s2.b, s1))
}

fn segments_intersect(s1: &Segment, s2: &Segment) -> bool {
    let d1 = s1.b - s1.a;
    let d2 = s2.b - s2.a;
    let denom = d1.cross(d2);
    let diff = s2.a - s1.a;
    if denom.abs() < 1e-15 {
        // Parallel; overlap handled by the endpoint-distance fallback.
        return false;
    }
    let t = diff.cross(d2) / denom;
    let u = diff.cross(d1) / denom;
    (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
}

/// Intersection distance of a ray (origin `o`, unit direction `d`) with a
/// segment; `None` when the ray misses.
pub fn ray_segment_hit(o: Vec2, d: Vec2, s: &Segment) -> Option<f64> {
    let e = s.b - s.a;
    let denom = d.cross(e);
    if denom.abs() < 1e-15 {
        return None;
    }
    let diff = s.a - o;
    let t = diff.cross(e) / denom;
    let u = diff.cross(d) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Intersection distance of a ray with a circle boundary; `None` on miss.
/// An origin inside the circle reports the exit distance.
pub fn ray_circle_hit(o: Vec2, d: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let oc = o - center;
    let b = oc.dot(d);
    let c = oc.norm_sq() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(t1)
    } else {
        None
    }
}

/// Even-odd test for point containment in a polygon.
pub fn point_in_polygon(p: Vec2, verts: &[Vec2]) -> bool {
    let n = verts.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (vi, vj) = (verts[i], verts[j]);
        if (vi.y > p.y) != (vj.y > p.y) {
            let x_cross = vj.x + (p.y - vj.y) / (vi.y - vj.y) * (vi.x - vj.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Distance from a point to a solid polygon (0 when inside).
pub fn point_polygon_dist(p: Vec2, verts: &[Vec2]) -> f64 {
    if point_in_polygon(p, verts) {
        return 0.0;
    }
    let n = verts.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let s = Segment::new(verts[i], verts[(i + 1) % n]);
        best = best.min(point_segment_dist(p, &s));
    }
    best
}

/// Axis-aligned rectangle given by two corners (normalized on construction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Rect {
            min: Vec2::new(a.x.min(b.x), a.y.min(b.y)),
            max: Vec2::new(a.x.max(b.x), a.y.max(b.y)),
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    /// The four boundary edges, counter-clockwise from the bottom edge.
    pub fn edges(&self) -> [Segment; 4] {
        let bl = self.min;
        let br = Vec2::new(self.max.x, self.min.y);
        let tr = self.max;
        let tl = Vec2::new(self.min.x, self.max.y);
        [
            Segment::new(bl, br),
            Segment::new(br, tr),
            Segment::new(tr, tl),
            Segment::new(tl, bl),
        ]
    }

    /// Distance from a point to this rectangle's boundary or 0 inside.
    pub fn dist_to_solid(&self, p: Vec2) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        dx.hypot(dy)
    }
}

/// Distance between a segment and a solid axis-aligned rectangle
/// (0 when they touch or overlap).
pub fn segment_rect_dist(s: &Segment, r: &Rect) -> f64 {
    if r.contains(s.a) || r.contains(s.b) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for e in r.edges() {
        best = best.min(segment_segment_dist(s, &e));
        if best == 0.0 {
            return 0.0;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-12);
        for k in -20..20 {
            let a = 0.3 + k as f64 * TAU;
            assert!((wrap_angle(a) - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn point_segment_basic() {
        let s = Segment::new(Vec2::new(0.0, 0.0), Vec2::new(2.0, 0.0));
        assert!((point_segment_dist(Vec2::new(1.0, 1.0), &s) - 1.0).abs() < 1e-12);
        assert!((point_segment_dist(Vec2::new(-1.0, 0.0), &s) - 1.0).abs() < 1e-12);
        assert!((point_segment_dist(Vec2::new(3.0, 0.0), &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ray_hits_segment() {
        let s = Segment::new(Vec2::new(2.0, -1.0), Vec2::new(2.0, 1.0));
        let t = ray_segment_hit(Vec2::ZERO, Vec2::new(1.0, 0.0), &s).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!(ray_segment_hit(Vec2::ZERO, Vec2::new(-1.0, 0.0), &s).is_none());
    }

    #[test]
    fn ray_hits_circle() {
        let t = ray_circle_hit(Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(3.0, 0.0), 1.0).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        // From inside: exit distance.
        let t = ray_circle_hit(Vec2::new(3.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(3.0, 0.0), 1.0)
            .unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(ray_circle_hit(Vec2::ZERO, Vec2::new(0.0, 1.0), Vec2::new(3.0, 0.0), 1.0).is_none());
    }

    #[test]
    fn polygon_containment() {
        let square = [
            Vec2::new(0.0, 0.0),
            Vec2::new(2.0, 0.0),
            Vec2::new(2.0, 2.0),
            Vec2::new(0.0, 2.0),
        ];
        assert!(point_in_polygon(Vec2::new(1.0, 1.0), &square));
        assert!(!point_in_polygon(Vec2::new(3.0, 1.0), &square));
        assert!((point_polygon_dist(Vec2::new(3.0, 1.0), &square) - 1.0).abs() < 1e-12);
        assert_eq!(point_polygon_dist(Vec2::new(1.0, 1.0), &square), 0.0);
    }

    #[test]
    fn segment_rect_contact() {
        let r = Rect::new(Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0));
        let crossing = Segment::new(Vec2::new(-1.0, 0.5), Vec2::new(2.0, 0.5));
        assert_eq!(segment_rect_dist(&crossing, &r), 0.0);
        let outside = Segment::new(Vec2::new(2.0, 0.0), Vec2::new(2.0, 1.0));
        assert!((segment_rect_dist(&outside, &r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polar_round_trip() {
        let pose = Pose::new(1.0, 2.0, 0.7);
        let p = pose.polar_offset(3.0, -0.4);
        let (d, th) = pose.to_polar(p);
        assert!((d - 3.0).abs() < 1e-12);
        assert!((th - -0.4).abs() < 1e-12);
    }
}
