//! 2D world model, differential-drive kinematics, collision detection, and
//! scenario loading.
//!
//! The world file format is line oriented; `#` starts a comment:
//!
//! ```text
//! bounds x0 y0 x1 y1
//! wall x0 y0 x1 y1
//! circle cx cy r
//! poly x0 y0 x1 y1 x2 y2 ...
//! robot x y theta
//! goal x y
//! ped x y gx gy v0
//! ped_wp x y          # extra waypoint for the preceding ped (loops)
//! horizon N
//! dt s
//! ```

use crate::geom::{
    point_in_polygon, point_polygon_dist, point_segment_dist, wrap_angle, Pose, Rect, Segment, Vec2,
};
use crate::ped::PedestrianState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default robot footprint radius in meters (TurtleBot3-Burger class).
pub const DEFAULT_ROBOT_RADIUS: f64 = 0.105;
/// Maximum commanded linear velocity in m/s.
pub const DEFAULT_V_MAX: f64 = 0.22;
/// Maximum commanded angular velocity in rad/s.
pub const DEFAULT_OMEGA_MAX: f64 = 2.84;
/// Default control step in seconds (10 Hz).
pub const DEFAULT_DT: f64 = 0.1;
/// Default episode horizon in control steps.
pub const DEFAULT_HORIZON: usize = 600;

/// Kinematic envelope used when clamping commands.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KinematicLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        KinematicLimits {
            v_max: DEFAULT_V_MAX,
            omega_max: DEFAULT_OMEGA_MAX,
        }
    }
}

/// Static world geometry: bounding rectangle, walls, and solid obstacles.
///
/// The rectangle boundary acts as four implicit walls; `boundary_segments`
/// exposes them for raycasting and collision queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldModel {
    pub bounds: Rect,
    pub walls: Vec<Segment>,
    pub circles: Vec<Circle>,
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub verts: Vec<Vec2>,
}

impl WorldModel {
    /// Empty rectangular room.
    pub fn empty(width: f64, height: f64) -> Self {
        WorldModel {
            bounds: Rect::new(Vec2::ZERO, Vec2::new(width, height)),
            walls: Vec::new(),
            circles: Vec::new(),
            polygons: Vec::new(),
        }
    }

    pub fn boundary_segments(&self) -> [Segment; 4] {
        self.bounds.edges()
    }

    /// Distance from a point to the nearest static surface (walls, obstacle
    /// boundaries, or the outer boundary). Points inside a solid obstacle
    /// report 0.
    pub fn static_clearance(&self, p: Vec2) -> f64 {
        let mut best = f64::INFINITY;
        for s in self.boundary_segments() {
            best = best.min(point_segment_dist(p, &s));
        }
        for w in &self.walls {
            best = best.min(point_segment_dist(p, w));
        }
        for c in &self.circles {
            best = best.min((p.dist(c.center) - c.radius).max(0.0));
        }
        for poly in &self.polygons {
            best = best.min(point_polygon_dist(p, &poly.verts));
        }
        best
    }

    /// True when `p` lies inside the bounds and inside no solid obstacle.
    pub fn point_in_free_space(&self, p: Vec2) -> bool {
        if !self.bounds.contains(p) {
            return false;
        }
        for c in &self.circles {
            if p.dist(c.center) < c.radius {
                return false;
            }
        }
        for poly in &self.polygons {
            if point_in_polygon(p, &poly.verts) {
                return false;
            }
        }
        true
    }
}

/// Robot state: pose plus current wheel speeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pos: Vec2,
    /// Heading in radians, kept in (-pi, pi].
    pub heading: f64,
    pub v: f64,
    pub omega: f64,
    pub radius: f64,
}

impl RobotState {
    pub fn at(pose: Pose, radius: f64) -> Self {
        RobotState {
            pos: pose.pos,
            heading: pose.heading,
            v: 0.0,
            omega: 0.0,
            radius,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose {
            pos: self.pos,
            heading: self.heading,
        }
    }
}

/// Per-pedestrian scenario entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianSpec {
    pub start: Vec2,
    pub goal: Vec2,
    pub desired_speed: f64,
    /// Extra waypoints after `goal`; non-empty means the pedestrian loops
    /// through goal -> waypoints -> goal forever, otherwise it stops at goal.
    pub waypoints: Vec<Vec2>,
}

/// A fully validated scenario: world, robot start, goal, pedestrians, horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub world: WorldModel,
    pub robot_start: Pose,
    pub goal: Vec2,
    pub pedestrians: Vec<PedestrianSpec>,
    pub horizon_steps: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
}

fn parse_floats(line: usize, parts: &[&str], n: usize) -> Result<Vec<f64>, WorldError> {
    if parts.len() != n {
        return Err(WorldError::Parse {
            line,
            msg: format!("expected {} numeric fields, got {}", n, parts.len()),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| WorldError::Parse {
                line,
                msg: format!("invalid number '{}'", p),
            })
        })
        .collect()
}

/// Parse and validate a scenario from world-file text.
pub fn load_scenario(text: &str) -> Result<ScenarioSpec, WorldError> {
    let mut bounds: Option<Rect> = None;
    let mut walls = Vec::new();
    let mut circles = Vec::new();
    let mut polygons = Vec::new();
    let mut robot: Option<Pose> = None;
    let mut goal: Option<Vec2> = None;
    let mut peds: Vec<PedestrianSpec> = Vec::new();
    let mut horizon = DEFAULT_HORIZON;
    let mut dt = DEFAULT_DT;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut parts = line.split_whitespace();
        let Some(kind) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        match kind {
            "bounds" => {
                let v = parse_floats(line_no, &rest, 4)?;
                if bounds.is_some() {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "duplicate bounds record".into(),
                    });
                }
                bounds = Some(Rect::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3])));
            }
            "wall" => {
                let v = parse_floats(line_no, &rest, 4)?;
                walls.push(Segment::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3])));
            }
            "circle" => {
                let v = parse_floats(line_no, &rest, 3)?;
                if v[2] <= 0.0 {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "circle radius must be positive".into(),
                    });
                }
                circles.push(Circle {
                    center: Vec2::new(v[0], v[1]),
                    radius: v[2],
                });
            }
            "poly" => {
                if rest.len() < 6 || rest.len() % 2 != 0 {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "poly needs at least 3 x,y pairs".into(),
                    });
                }
                let v = parse_floats(line_no, &rest, rest.len())?;
                let verts = v.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect();
                polygons.push(Polygon { verts });
            }
            "robot" => {
                let v = parse_floats(line_no, &rest, 3)?;
                if robot.is_some() {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "duplicate robot record".into(),
                    });
                }
                robot = Some(Pose::new(v[0], v[1], v[2]));
            }
            "goal" => {
                let v = parse_floats(line_no, &rest, 2)?;
                if goal.is_some() {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "duplicate goal record".into(),
                    });
                }
                goal = Some(Vec2::new(v[0], v[1]));
            }
            "ped" => {
                let v = parse_floats(line_no, &rest, 5)?;
                if v[4] <= 0.0 {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "pedestrian desired speed must be positive".into(),
                    });
                }
                peds.push(PedestrianSpec {
                    start: Vec2::new(v[0], v[1]),
                    goal: Vec2::new(v[2], v[3]),
                    desired_speed: v[4],
                    waypoints: Vec::new(),
                });
            }
            "ped_wp" => {
                let v = parse_floats(line_no, &rest, 2)?;
                match peds.last_mut() {
                    Some(p) => p.waypoints.push(Vec2::new(v[0], v[1])),
                    None => {
                        return Err(WorldError::Parse {
                            line: line_no,
                            msg: "ped_wp without a preceding ped record".into(),
                        })
                    }
                }
            }
            "horizon" => {
                if rest.len() != 1 {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "horizon takes one integer".into(),
                    });
                }
                horizon = rest[0].parse::<usize>().map_err(|_| WorldError::Parse {
                    line: line_no,
                    msg: format!("invalid horizon '{}'", rest[0]),
                })?;
            }
            "dt" => {
                let v = parse_floats(line_no, &rest, 1)?;
                dt = v[0];
            }
            other => {
                return Err(WorldError::Parse {
                    line: line_no,
                    msg: format!("unknown record type '{}'", other),
                })
            }
        }
    }

    let bounds = bounds.ok_or(WorldError::Validation("missing bounds record".into()))?;
    let robot_start = robot.ok_or(WorldError::Validation("missing robot record".into()))?;
    let goal = goal.ok_or(WorldError::Validation("missing goal record".into()))?;

    let world = WorldModel {
        bounds,
        walls,
        circles,
        polygons,
    };
    let spec = ScenarioSpec {
        world,
        robot_start,
        goal,
        pedestrians: peds,
        horizon_steps: horizon,
        dt,
        seed: 0,
    };
    validate_scenario(&spec)?;
    Ok(spec)
}

/// Check every `ScenarioSpec` invariant; called by `load_scenario` and usable
/// on programmatically built scenarios.
pub fn validate_scenario(spec: &ScenarioSpec) -> Result<(), WorldError> {
    let w = &spec.world;
    if spec.horizon_steps == 0 {
        return Err(WorldError::Validation("horizon must be positive".into()));
    }
    if !(spec.dt > 0.0) {
        return Err(WorldError::Validation("dt must be positive".into()));
    }
    for (i, s) in w.walls.iter().enumerate() {
        if !s.a.is_finite() || !s.b.is_finite() {
            return Err(WorldError::Validation(format!(
                "wall {} has non-finite endpoint",
                i
            )));
        }
        if !w.bounds.contains(s.a) || !w.bounds.contains(s.b) {
            return Err(WorldError::Validation(format!(
                "wall {} outside bounds",
                i
            )));
        }
    }
    for (i, c) in w.circles.iter().enumerate() {
        let ok = w.bounds.contains(Vec2::new(c.center.x - c.radius, c.center.y - c.radius))
            && w.bounds.contains(Vec2::new(c.center.x + c.radius, c.center.y + c.radius));
        if !ok {
            return Err(WorldError::Validation(format!(
                "circle {} outside bounds",
                i
            )));
        }
    }
    for (i, p) in w.polygons.iter().enumerate() {
        if p.verts.iter().any(|v| !w.bounds.contains(*v)) {
            return Err(WorldError::Validation(format!("poly {} outside bounds", i)));
        }
    }
    if !w.bounds.contains(spec.goal) {
        return Err(WorldError::Validation("goal outside bounds".into()));
    }
    if !w.point_in_free_space(spec.goal) {
        return Err(WorldError::Validation("goal inside obstacle".into()));
    }
    if !w.point_in_free_space(spec.robot_start.pos) {
        return Err(WorldError::Validation(
            "robot start outside free space".into(),
        ));
    }
    if w.static_clearance(spec.robot_start.pos) < DEFAULT_ROBOT_RADIUS {
        return Err(WorldError::Validation(
            "robot start too close to geometry".into(),
        ));
    }
    for (i, p) in spec.pedestrians.iter().enumerate() {
        if !w.point_in_free_space(p.start) {
            return Err(WorldError::Validation(format!(
                "pedestrian {} start outside free space",
                i
            )));
        }
    }
    // Goal reachability on the 0.5 m oracle grid (uninflated).
    let grid = crate::planning::rasterize(w, 0.0);
    if crate::planning::astar_dist(&grid, spec.robot_start.pos, spec.goal).is_none() {
        return Err(WorldError::Validation(
            "goal unreachable on oracle grid".into(),
        ));
    }
    Ok(())
}

/// Advance the robot by one control step using exact unicycle integration.
///
/// The command is clamped to `[0, v_max] x [-omega_max, omega_max]` first.
/// For nonzero omega the pose follows a circular arc of radius v/omega;
/// otherwise a straight line.
pub fn step_robot(
    state: &RobotState,
    cmd: (f64, f64),
    dt: f64,
    limits: &KinematicLimits,
) -> RobotState {
    let v = if cmd.0.is_finite() { cmd.0 } else { 0.0 }.clamp(0.0, limits.v_max);
    let omega = if cmd.1.is_finite() { cmd.1 } else { 0.0 }
        .clamp(-limits.omega_max, limits.omega_max);

    let mut next = *state;
    next.v = v;
    next.omega = omega;
    if omega.abs() < 1e-12 {
        next.pos = state.pos + Vec2::from_angle(state.heading) * (v * dt);
    } else {
        let r = v / omega;
        let th0 = state.heading;
        let th1 = th0 + omega * dt;
        next.pos = state.pos + Vec2::new(r * (th1.sin() - th0.sin()), -r * (th1.cos() - th0.cos()));
        next.heading = wrap_angle(th1);
    }
    if omega.abs() < 1e-12 {
        next.heading = wrap_angle(state.heading);
    }
    next
}

/// Geometry class a contact belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactKind {
    /// File walls first, then the four boundary edges (ids continue past the
    /// last file wall).
    Wall,
    /// Circle obstacles first, then polygons.
    Static,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub kind: ContactKind,
    pub id: usize,
}

/// Result of a collision query. Contact does not terminate an episode; the
/// metrics layer counts rising edges of `in_contact`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub in_contact: bool,
    pub contacts: Vec<Contact>,
}

/// Report every geometry element strictly closer to the robot center than the
/// robot radius (plus the pedestrian radius for pedestrians).
pub fn collision_check(
    world: &WorldModel,
    robot: &RobotState,
    peds: &[PedestrianState],
) -> CollisionReport {
    let mut contacts = Vec::new();
    let p = robot.pos;
    let r = robot.radius;
    let n_walls = world.walls.len();
    for (i, w) in world.walls.iter().enumerate() {
        if point_segment_dist(p, w) < r {
            contacts.push(Contact {
                kind: ContactKind::Wall,
                id: i,
            });
        }
    }
    for (i, s) in world.boundary_segments().iter().enumerate() {
        if point_segment_dist(p, s) < r {
            contacts.push(Contact {
                kind: ContactKind::Wall,
                id: n_walls + i,
            });
        }
    }
    let n_circles = world.circles.len();
    for (i, c) in world.circles.iter().enumerate() {
        if p.dist(c.center) < r + c.radius {
            contacts.push(Contact {
                kind: ContactKind::Static,
                id: i,
            });
        }
    }
    for (i, poly) in world.polygons.iter().enumerate() {
        if point_polygon_dist(p, &poly.verts) < r {
            contacts.push(Contact {
                kind: ContactKind::Static,
                id: n_circles + i,
            });
        }
    }
    for (i, ped) in peds.iter().enumerate() {
        if p.dist(ped.pos) < r + ped.radius {
            contacts.push(Contact {
                kind: ContactKind::Pedestrian,
                id: i,
            });
        }
    }
    CollisionReport {
        in_contact: !contacts.is_empty(),
        contacts,
    }
}
