//! Single-line 360 degree lidar simulation by raycasting.
//!
//! 1080 rays cover the full circle; ray bearings run from -pi counter
//! clockwise in the robot frame, so the middle ray (index 540) points along
//! the heading. Ranges are clamped to the sensor window [0.3, 6.0] and a
//! miss reports the maximum range.

use crate::geom::{ray_circle_hit, ray_segment_hit, Pose, Vec2};
use crate::ped::PedestrianState;
use crate::world::WorldModel;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

pub const N_RAYS: usize = 1080;
pub const RANGE_MIN: f64 = 0.3;
pub const RANGE_MAX: f64 = 6.0;
pub const ANGLE_INCREMENT: f64 = TAU / N_RAYS as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub ranges: Vec<f64>,
    pub angle_min: f64,
    pub angle_increment: f64,
    pub stamp: f64,
}

impl LidarScan {
    /// Scan with every range set to the same value; handy in tests.
    pub fn uniform(range: f64, stamp: f64) -> Self {
        LidarScan {
            ranges: vec![range; N_RAYS],
            angle_min: -PI,
            angle_increment: ANGLE_INCREMENT,
            stamp,
        }
    }

    pub fn from_ranges(ranges: Vec<f64>, stamp: f64) -> Self {
        assert_eq!(ranges.len(), N_RAYS, "scan must have {} rays", N_RAYS);
        LidarScan {
            ranges,
            angle_min: -PI,
            angle_increment: ANGLE_INCREMENT,
            stamp,
        }
    }

    /// Bearing of ray `i` in the robot frame.
    pub fn bearing(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment
    }
}

/// Distance along one ray to the nearest surface, unclamped; `None` on miss.
fn raycast(world: &WorldModel, peds: &[PedestrianState], origin: Vec2, dir: Vec2) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: Option<f64>| {
        if let Some(t) = t {
            if best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        }
    };
    for s in world.boundary_segments().iter().chain(world.walls.iter()) {
        consider(ray_segment_hit(origin, dir, s));
    }
    for c in &world.circles {
        consider(ray_circle_hit(origin, dir, c.center, c.radius));
    }
    for poly in &world.polygons {
        let n = poly.verts.len();
        for i in 0..n {
            let s = crate::geom::Segment::new(poly.verts[i], poly.verts[(i + 1) % n]);
            consider(ray_segment_hit(origin, dir, &s));
        }
    }
    for p in peds {
        consider(ray_circle_hit(origin, dir, p.pos, p.radius));
    }
    best
}

/// Noise-free scan from the given pose.
pub fn scan(world: &WorldModel, peds: &[PedestrianState], pose: Pose, stamp: f64) -> LidarScan {
    let mut ranges = Vec::with_capacity(N_RAYS);
    for i in 0..N_RAYS {
        let bearing = -PI + i as f64 * ANGLE_INCREMENT;
        let dir = Vec2::from_angle(pose.heading + bearing);
        let r = raycast(world, peds, pose.pos, dir).unwrap_or(RANGE_MAX);
        ranges.push(r.clamp(RANGE_MIN, RANGE_MAX));
    }
    LidarScan::from_ranges(ranges, stamp)
}

/// Scan with zero-mean Gaussian range noise applied before clamping.
pub fn scan_noisy(
    world: &WorldModel,
    peds: &[PedestrianState],
    pose: Pose,
    stamp: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> LidarScan {
    if sigma <= 0.0 {
        return scan(world, peds, pose, stamp);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite");
    let mut out = scan(world, peds, pose, stamp);
    for r in &mut out.ranges {
        *r = (*r + normal.sample(rng)).clamp(RANGE_MIN, RANGE_MAX);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Segment;
    use crate::world::{Circle, WorldModel};

    fn open_world() -> WorldModel {
        WorldModel {
            bounds: crate::geom::Rect::new(Vec2::new(-10.0, -10.0), Vec2::new(10.0, 10.0)),
            walls: Vec::new(),
            circles: Vec::new(),
            polygons: Vec::new(),
        }
    }

    #[test]
    fn open_space_reads_max_range() {
        let s = scan(&open_world(), &[], Pose::new(0.0, 0.0, 0.0), 0.0);
        assert_eq!(s.ranges.len(), N_RAYS);
        assert!(s.ranges.iter().all(|&r| r == RANGE_MAX));
    }

    #[test]
    fn wall_ahead_reads_its_distance() {
        let mut w = open_world();
        w.walls.push(Segment::new(Vec2::new(2.0, -10.0), Vec2::new(2.0, 10.0)));
        let s = scan(&w, &[], Pose::new(0.0, 0.0, 0.0), 0.0);
        // Bearing 0 is ray 540; bearing pi wraps to ray 0.
        assert!((s.ranges[540] - 2.0).abs() < 1e-12);
        assert_eq!(s.ranges[0], RANGE_MAX);
        assert!((s.bearing(540)).abs() < 1e-12);
    }

    #[test]
    fn close_surface_clamps_low() {
        let mut w = open_world();
        w.walls.push(Segment::new(Vec2::new(0.1, -1.0), Vec2::new(0.1, 1.0)));
        let s = scan(&w, &[], Pose::new(0.0, 0.0, 0.0), 0.0);
        assert_eq!(s.ranges[540], RANGE_MIN);
    }

    #[test]
    fn pedestrian_blocks_ray() {
        let w = open_world();
        let ped = PedestrianState::standing(Vec2::new(3.0, 0.0), 0.8);
        let s = scan(&w, &[ped], Pose::new(0.0, 0.0, 0.0), 0.0);
        assert!((s.ranges[540] - (3.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn rotation_by_ray_multiples_shifts_ranges() {
        let mut w = open_world();
        w.circles.push(Circle {
            center: Vec2::new(3.0, 1.0),
            radius: 0.5,
        });
        w.walls.push(Segment::new(Vec2::new(-2.0, -4.0), Vec2::new(4.0, -4.0)));
        let base = scan(&w, &[], Pose::new(0.0, 0.0, 0.0), 0.0);
        for k in [1usize, 17, 400, 1079] {
            let rotated = scan(
                &w,
                &[],
                Pose::new(0.0, 0.0, k as f64 * ANGLE_INCREMENT),
                0.0,
            );
            for i in 0..N_RAYS {
                let j = (i + k) % N_RAYS;
                assert!(
                    (rotated.ranges[i] - base.ranges[j]).abs() < 1e-9,
                    "k={} i={}: {} vs {}",
                    k,
                    i,
                    rotated.ranges[i],
                    base.ranges[j]
                );
            }
        }
    }

    #[test]
    fn added_geometry_never_increases_ranges() {
        let mut w = open_world();
        w.walls.push(Segment::new(Vec2::new(-2.0, 3.0), Vec2::new(5.0, 3.0)));
        let before = scan(&w, &[], Pose::new(0.3, -0.2, 0.4), 0.0);
        w.circles.push(Circle {
            center: Vec2::new(2.0, -1.0),
            radius: 0.8,
        });
        let after = scan(&w, &[], Pose::new(0.3, -0.2, 0.4), 0.0);
        for i in 0..N_RAYS {
            assert!(after.ranges[i] <= before.ranges[i] + 1e-12);
        }
    }

    #[test]
    fn mirrored_world_mirrors_ranges() {
        // Mirror across the heading axis (y -> -y with heading 0 at origin).
        let mut w = open_world();
        w.circles.push(Circle {
            center: Vec2::new(2.0, 1.5),
            radius: 0.6,
        });
        w.walls.push(Segment::new(Vec2::new(-1.0, 2.0), Vec2::new(3.0, 4.0)));
        let mut m = open_world();
        m.circles.push(Circle {
            center: Vec2::new(2.0, -1.5),
            radius: 0.6,
        });
        m.walls.push(Segment::new(Vec2::new(-1.0, -2.0), Vec2::new(3.0, -4.0)));
        let a = scan(&w, &[], Pose::new(0.0, 0.0, 0.0), 0.0);
        let b = scan(&m, &[], Pose::new(0.0, 0.0, 0.0), 0.0);
        for i in 0..N_RAYS {
            let j = (N_RAYS - i) % N_RAYS;
            assert!((a.ranges[i] - b.ranges[j]).abs() < 1e-9, "i={}", i);
        }
    }

    #[test]
    fn noisy_scan_stays_clamped_and_deterministic() {
        let mut w = open_world();
        w.walls.push(Segment::new(Vec2::new(2.0, -10.0), Vec2::new(2.0, 10.0)));
        let pose = Pose::new(0.0, 0.0, 0.0);
        let mut r1 = crate::rng::stream(5, 1);
        let mut r2 = crate::rng::stream(5, 1);
        let a = scan_noisy(&w, &[], pose, 0.0, 0.05, &mut r1);
        let b = scan_noisy(&w, &[], pose, 0.0, 0.05, &mut r2);
        assert_eq!(a, b);
        assert!(a.ranges.iter().all(|&r| (RANGE_MIN..=RANGE_MAX).contains(&r)));
        assert!(a.ranges[540] != 2.0, "noise should perturb the reading");
    }
}
