//! Social-force pedestrians.
//!
//! Each pedestrian relaxes toward its desired velocity and is pushed away
//! from other pedestrians, the robot, and static geometry by exponential
//! repulsion along the center line. Integration is semi-implicit Euler at
//! the simulation dt; speed is capped at 1.3 times the desired speed.

use crate::geom::{segment_closest_point, Vec2};
use crate::world::{PedestrianSpec, RobotState, WorldModel};
use serde::{Deserialize, Serialize};

/// Default pedestrian body radius in meters.
pub const DEFAULT_PED_RADIUS: f64 = 0.25;
/// Default relaxation time toward the desired velocity.
pub const DEFAULT_TAU: f64 = 0.5;
/// Speed cap as a multiple of the desired speed.
pub const SPEED_CAP_FACTOR: f64 = 1.3;
/// Distance at which a waypoint counts as reached.
const WAYPOINT_TOLERANCE: f64 = 0.3;

/// Repulsion parameters shared by all pedestrians in a scenario.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SfmParams {
    /// Repulsion strength in m/s^2.
    pub a: f64,
    /// Repulsion range in m.
    pub b: f64,
    pub tau: f64,
    pub radius: f64,
}

impl Default for SfmParams {
    fn default() -> Self {
        SfmParams {
            a: 2.0,
            b: 0.3,
            tau: DEFAULT_TAU,
            radius: DEFAULT_PED_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub pos: Vec2,
    pub vel: Vec2,
    pub v0: f64,
    pub radius: f64,
    pub tau: f64,
    /// Targets visited in order; the pedestrian loops through them when
    /// `loops` is set, otherwise it stops after the last one.
    pub route: Vec<Vec2>,
    pub route_idx: usize,
    pub loops: bool,
    pub stopped: bool,
}

impl PedestrianState {
    pub fn from_spec(spec: &PedestrianSpec, params: &SfmParams) -> Self {
        let mut route = vec![spec.goal];
        route.extend(spec.waypoints.iter().copied());
        PedestrianState {
            pos: spec.start,
            vel: Vec2::ZERO,
            v0: spec.desired_speed,
            radius: params.radius,
            tau: params.tau,
            loops: !spec.waypoints.is_empty(),
            route,
            route_idx: 0,
            stopped: false,
        }
    }

    /// A pedestrian standing still with no goal; useful as a static dynamic
    /// obstacle in tests.
    pub fn standing(pos: Vec2, v0: f64) -> Self {
        PedestrianState {
            pos,
            vel: Vec2::ZERO,
            v0,
            radius: DEFAULT_PED_RADIUS,
            tau: DEFAULT_TAU,
            route: vec![pos],
            route_idx: 0,
            loops: false,
            stopped: true,
        }
    }

    pub fn current_target(&self) -> Vec2 {
        self.route[self.route_idx]
    }

    /// Desired velocity: v0 toward the current target, or zero when stopped.
    fn desired_velocity(&self) -> Vec2 {
        if self.stopped {
            return Vec2::ZERO;
        }
        (self.current_target() - self.pos).normalized() * self.v0
    }
}

/// Exponential body-force magnitude between surfaces separated by
/// `gap = d - r_sum` (negative when overlapping).
fn repulsion_mag(params: &SfmParams, gap: f64) -> f64 {
    params.a * (-gap / params.b).exp()
}

/// Repulsive acceleration on a pedestrian at `p` from a point obstacle at
/// `q` with combined radius `r_sum`.
fn point_repulsion(params: &SfmParams, p: Vec2, q: Vec2, r_sum: f64) -> Vec2 {
    let diff = p - q;
    let d = diff.norm();
    if d < 1e-9 {
        // Coincident centers have no defined direction; skip.
        return Vec2::ZERO;
    }
    diff * (repulsion_mag(params, d - r_sum) / d)
}

/// Total repulsion from static geometry: nearest point of each wall,
/// boundary edge, circle, and polygon.
fn static_repulsion(params: &SfmParams, world: &WorldModel, ped: &PedestrianState) -> Vec2 {
    let mut f = Vec2::ZERO;
    let p = ped.pos;
    for s in world.boundary_segments().iter().chain(world.walls.iter()) {
        f += point_repulsion(params, p, segment_closest_point(p, s), ped.radius);
    }
    for c in &world.circles {
        f += point_repulsion(params, p, c.center, ped.radius + c.radius);
    }
    for poly in &world.polygons {
        let mut best = Vec2::ZERO;
        let mut best_d = f64::INFINITY;
        let n = poly.verts.len();
        for i in 0..n {
            let s = crate::geom::Segment::new(poly.verts[i], poly.verts[(i + 1) % n]);
            let q = segment_closest_point(p, &s);
            let d = p.dist(q);
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        if best_d.is_finite() {
            f += point_repulsion(params, p, best, ped.radius);
        }
    }
    f
}

/// Advance every pedestrian by one step. Forces are computed from the input
/// snapshot, so ordering within the list does not matter.
pub fn step_pedestrians(
    peds: &[PedestrianState],
    world: &WorldModel,
    robot: &RobotState,
    params: &SfmParams,
    dt: f64,
) -> Vec<PedestrianState> {
    assert!(dt > 0.0, "dt must be positive");
    let mut out = Vec::with_capacity(peds.len());
    for (i, ped) in peds.iter().enumerate() {
        let mut acc = (ped.desired_velocity() - ped.vel) * (1.0 / ped.tau);
        for (j, other) in peds.iter().enumerate() {
            if i != j {
                acc += point_repulsion(params, ped.pos, other.pos, ped.radius + other.radius);
            }
        }
        acc += point_repulsion(params, ped.pos, robot.pos, ped.radius + robot.radius);
        acc += static_repulsion(params, world, ped);

        let mut next = ped.clone();
        next.vel = ped.vel + acc * dt;
        let cap = SPEED_CAP_FACTOR * ped.v0;
        let speed = next.vel.norm();
        if speed > cap {
            next.vel = next.vel * (cap / speed);
        }
        next.pos = ped.pos + next.vel * dt;

        if !next.stopped && next.pos.dist(next.current_target()) < WAYPOINT_TOLERANCE {
            if next.loops {
                next.route_idx = (next.route_idx + 1) % next.route.len();
            } else if next.route_idx + 1 < next.route.len() {
                next.route_idx += 1;
            } else {
                next.stopped = true;
            }
        }
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::world::{RobotState, WorldModel, DEFAULT_ROBOT_RADIUS};

    fn far_robot() -> RobotState {
        RobotState::at(Pose::new(5.0, 5.0, 0.0), DEFAULT_ROBOT_RADIUS)
    }

    fn big_world() -> WorldModel {
        WorldModel::empty(1000.0, 1000.0)
    }

    fn walker(pos: Vec2, goal: Vec2, v0: f64) -> PedestrianState {
        PedestrianState {
            pos,
            vel: Vec2::ZERO,
            v0,
            radius: DEFAULT_PED_RADIUS,
            tau: DEFAULT_TAU,
            route: vec![goal],
            route_idx: 0,
            loops: false,
            stopped: false,
        }
    }

    #[test]
    fn equilibrium_at_desired_velocity() {
        // Moving at v0 straight toward a distant goal with nothing nearby:
        // the driving force vanishes and repulsion is negligible.
        let mut p = walker(Vec2::new(500.0, 400.0), Vec2::new(500.0, 900.0), 0.8);
        p.vel = Vec2::new(0.0, 0.8);
        let next = step_pedestrians(&[p.clone()], &big_world(), &far_robot(), &SfmParams::default(), 0.1);
        assert!((next[0].vel - p.vel).norm() < 1e-6);
    }

    #[test]
    fn driving_acceleration_from_rest() {
        // v0 = 0.8 toward +x from rest, tau = 0.5: acceleration 1.6 m/s^2,
        // so one 0.1 s step adds 0.16 m/s.
        let p = walker(Vec2::new(300.0, 500.0), Vec2::new(900.0, 500.0), 0.8);
        let next = step_pedestrians(&[p], &big_world(), &far_robot(), &SfmParams::default(), 0.1);
        assert!((next[0].vel.x - 0.16).abs() < 1e-6);
        assert!(next[0].vel.y.abs() < 1e-9);
    }

    #[test]
    fn zero_repulsion_matches_discrete_relaxation() {
        // With A = 0 the update is linear: v_{n+1} = v_n + dt/tau (v0 - v_n),
        // so v_n = v0 (1 - (1 - dt/tau)^n). Checked to 1e-9.
        let params = SfmParams {
            a: 0.0,
            ..SfmParams::default()
        };
        let dt = 0.1;
        let v0 = 1.2;
        let mut peds = vec![walker(Vec2::new(100.0, 500.0), Vec2::new(900.0, 500.0), v0)];
        let world = big_world();
        let robot = far_robot();
        let k = 1.0 - dt / params.tau;
        for n in 1..=40 {
            peds = step_pedestrians(&peds, &world, &robot, &params, dt);
            let expect = v0 * (1.0 - k.powi(n));
            assert!(
                (peds[0].vel.x - expect).abs() < 1e-9,
                "step {}: {} vs {}",
                n,
                peds[0].vel.x,
                expect
            );
        }
    }

    #[test]
    fn pairwise_repulsion_is_newton_symmetric() {
        let params = SfmParams::default();
        let a = Vec2::new(500.0, 500.0);
        let b = Vec2::new(500.9, 500.4);
        let fab = point_repulsion(&params, a, b, 0.5);
        let fba = point_repulsion(&params, b, a, 0.5);
        assert!((fab + fba).norm() < 1e-12);
    }

    #[test]
    fn head_on_pair_separates_laterally() {
        // Two pedestrians approaching head-on with 0.1 m lateral offset:
        // repulsion pushes them further apart laterally.
        let mut p1 = walker(Vec2::new(499.0, 500.0), Vec2::new(510.0, 500.0), 0.8);
        let mut p2 = walker(Vec2::new(501.0, 500.1), Vec2::new(490.0, 500.1), 0.8);
        p1.vel = Vec2::new(0.8, 0.0);
        p2.vel = Vec2::new(-0.8, 0.0);
        let before = (p1.pos.y - p2.pos.y).abs();
        let next = step_pedestrians(
            &[p1, p2],
            &big_world(),
            &far_robot(),
            &SfmParams::default(),
            0.1,
        );
        let after = (next[0].pos.y - next[1].pos.y).abs();
        assert!(after > before, "lateral separation {} -> {}", before, after);
    }

    #[test]
    fn speed_never_exceeds_cap() {
        let params = SfmParams {
            a: 50.0,
            ..SfmParams::default()
        };
        let mut peds = vec![
            walker(Vec2::new(499.8, 500.0), Vec2::new(900.0, 500.0), 0.5),
            walker(Vec2::new(500.2, 500.0), Vec2::new(100.0, 500.0), 0.5),
        ];
        let world = big_world();
        let robot = far_robot();
        for _ in 0..50 {
            peds = step_pedestrians(&peds, &world, &robot, &params, 0.1);
            for p in &peds {
                assert!(p.vel.norm() <= SPEED_CAP_FACTOR * p.v0 + 1e-12);
            }
        }
    }

    #[test]
    fn robot_repels_pedestrian() {
        // Standing pedestrian (zero desired velocity) with the robot just to
        // its right: the only force is repulsion, pointing -x.
        let p = PedestrianState::standing(Vec2::new(500.0, 500.0), 0.8);
        let robot = RobotState::at(Pose::new(500.4, 500.0, 0.0), DEFAULT_ROBOT_RADIUS);
        let next = step_pedestrians(&[p], &big_world(), &robot, &SfmParams::default(), 0.1);
        assert!(next[0].vel.x < 0.0);
    }

    #[test]
    fn waypoint_loop_advances() {
        let mut p = walker(Vec2::new(500.0, 500.0), Vec2::new(500.5, 500.0), 1.0);
        p.route = vec![Vec2::new(500.5, 500.0), Vec2::new(500.5, 500.5)];
        p.loops = true;
        p.pos = Vec2::new(500.45, 500.0);
        let next = step_pedestrians(&[p], &big_world(), &far_robot(), &SfmParams::default(), 0.1);
        assert_eq!(next[0].route_idx, 1);
        assert!(!next[0].stopped);
    }

    #[test]
    fn non_looping_pedestrian_stops_at_goal() {
        let mut peds = vec![walker(Vec2::new(500.0, 500.0), Vec2::new(501.0, 500.0), 1.0)];
        let world = big_world();
        let robot = far_robot();
        for _ in 0..100 {
            peds = step_pedestrians(&peds, &world, &robot, &SfmParams::default(), 0.1);
        }
        assert!(peds[0].stopped);
        assert!(peds[0].vel.norm() < 0.05);
        assert!(peds[0].pos.dist(Vec2::new(501.0, 500.0)) < WAYPOINT_TOLERANCE + 0.05);
    }

    #[test]
    fn wall_repulsion_pushes_away() {
        // Standing pedestrian near the bottom boundary gets pushed up.
        let p = PedestrianState::standing(Vec2::new(500.0, 0.3), 0.8);
        let next = step_pedestrians(&[p], &big_world(), &far_robot(), &SfmParams::default(), 0.1);
        assert!(next[0].vel.y > 0.0);
    }
}
