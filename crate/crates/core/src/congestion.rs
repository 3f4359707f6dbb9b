//! Congestion-driven sub-goal scheduling.
//!
//! A scan-wide congestion scalar drives a dynamic update threshold: the
//! closer the robot gets to its current sub-goal (or the longer it lingers),
//! the sooner a new one is requested. Sub-goals live on a 15x15 polar sector
//! grid around the robot, filtered by an action mask built from the local
//! obstacle map.

use crate::geom::{Pose, Vec2};
use crate::lidar::{LidarScan, RANGE_MIN};
use crate::perception::{traverse_cells, CellState, LocalObstacleMap, MAP_HALF, MAP_RES};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Safety distance: log base of the congestion measure and the obstacle-list
/// cutoff.
pub const SAFETY_DISTANCE: f64 = 3.0;
/// Linear coefficients of the update threshold.
pub const THRESHOLD_ALPHA: f64 = 0.25;
pub const THRESHOLD_BETA: f64 = 0.25;
/// Clip window of the update threshold in meters.
pub const D_U_MIN: f64 = 0.5;
pub const D_U_MAX: f64 = 2.0;
/// A sub-goal older than this (simulation seconds) is forcibly replaced.
pub const FORCED_UPDATE_SECS: f64 = 30.0;
/// Minimum clearance between a sector center and any occupied cell.
const MASK_CLEARANCE: f64 = 0.3;

/// Scan-wide congestion: mean over rays of 1 / log_d_s(l + 1), with ranges
/// floored at the sensor minimum so the logarithm stays away from zero.
pub fn congestion(scan: &LidarScan, d_s: f64) -> f64 {
    assert!(d_s > 1.0, "log base must exceed 1");
    let ln_ds = d_s.ln();
    let sum: f64 = scan
        .ranges
        .iter()
        .map(|&l| ln_ds / (l.max(RANGE_MIN) + 1.0).ln())
        .sum();
    sum / scan.ranges.len() as f64
}

/// Sub-goal update distance threshold, linear in congestion and clipped.
pub fn update_threshold(c: f64) -> f64 {
    assert!(c >= 0.0, "congestion is non-negative");
    (THRESHOLD_ALPHA * c + THRESHOLD_BETA).clamp(D_U_MIN, D_U_MAX)
}

/// An intermediate target in robot-frame polar coordinates, with its world
/// position frozen at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubGoal {
    pub d_sg: f64,
    pub theta_sg: f64,
    pub world_point: Vec2,
}

impl SubGoal {
    pub fn from_sector(grid: &SectorGrid, idx: usize, pose: &Pose) -> SubGoal {
        let (d_sg, theta_sg) = sector_polar(grid, idx);
        SubGoal {
            d_sg,
            theta_sg,
            world_point: subgoal_to_world(pose, d_sg, theta_sg),
        }
    }
}

/// Polar discretization of the reachable annulus: 15 distance rings over
/// [0.3, 6.0] m by 15 angular wedges over the full circle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SectorGrid {
    pub n_dist: usize,
    pub n_ang: usize,
    pub d_lo: f64,
    pub d_hi: f64,
}

impl Default for SectorGrid {
    fn default() -> Self {
        SectorGrid {
            n_dist: 15,
            n_ang: 15,
            d_lo: 0.3,
            d_hi: 6.0,
        }
    }
}

impl SectorGrid {
    pub fn len(&self) -> usize {
        self.n_dist * self.n_ang
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Center (distance, bearing) of sector `idx`; ring-major layout.
pub fn sector_polar(grid: &SectorGrid, idx: usize) -> (f64, f64) {
    assert!(idx < grid.len(), "sector index {} out of range", idx);
    let ring = idx / grid.n_ang;
    let wedge = idx % grid.n_ang;
    let d = grid.d_lo + (ring as f64 + 0.5) * (grid.d_hi - grid.d_lo) / grid.n_dist as f64;
    let theta = -PI + (wedge as f64 + 0.5) * TAU / grid.n_ang as f64;
    (d, theta)
}

/// Sector containing the polar point (d, theta); clamps d into the annulus.
pub fn polar_to_sector(grid: &SectorGrid, d: f64, theta: f64) -> usize {
    let ring_f = (d - grid.d_lo) / ((grid.d_hi - grid.d_lo) / grid.n_dist as f64);
    let ring = (ring_f.floor() as i64).clamp(0, grid.n_dist as i64 - 1) as usize;
    let wedge_f = (crate::geom::wrap_angle(theta) + PI) / (TAU / grid.n_ang as f64);
    let wedge = (wedge_f.floor() as i64).rem_euclid(grid.n_ang as i64) as usize;
    ring * grid.n_ang + wedge
}

/// World position of a robot-frame polar offset.
pub fn subgoal_to_world(pose: &Pose, d: f64, theta: f64) -> Vec2 {
    pose.polar_offset(d, theta)
}

/// Sub-goal bookkeeping carried across an episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateState {
    pub current: Option<SubGoal>,
    pub t_last_update: f64,
    pub c_t: f64,
    pub d_u: f64,
}

impl Default for UpdateState {
    fn default() -> Self {
        UpdateState {
            current: None,
            t_last_update: 0.0,
            c_t: 0.0,
            d_u: D_U_MIN,
        }
    }
}

impl UpdateState {
    /// Refresh congestion and threshold from the current scan.
    pub fn observe(&mut self, scan: &LidarScan) {
        self.c_t = congestion(scan, SAFETY_DISTANCE);
        self.d_u = update_threshold(self.c_t);
    }

    pub fn adopt(&mut self, sub_goal: SubGoal, now: f64) {
        self.current = Some(sub_goal);
        self.t_last_update = now;
    }
}

/// True when a new sub-goal is needed: none yet, the robot is within the
/// update threshold of the current one, or the 30 s timeout elapsed.
pub fn should_update(state: &UpdateState, robot: Vec2, now: f64) -> bool {
    match &state.current {
        None => true,
        Some(g) => {
            robot.dist(g.world_point) < state.d_u
                || now - state.t_last_update >= FORCED_UPDATE_SECS
        }
    }
}

/// Per-sector feasibility flags (true = selectable).
#[derive(Debug, Clone)]
pub struct ActionMask {
    pub allowed: Vec<bool>,
    /// Set when every sector failed the rules and one was force-allowed.
    pub forced: bool,
}

impl ActionMask {
    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// Mask sectors that are statically undesirable: center cell not free, a
/// straight approach corridor crossing an occupied cell, or an occupied cell
/// within the clearance radius of the center. If nothing survives, the
/// nearest sector with a free center (falling back to any non-occupied
/// center, then sector 0) is force-allowed so the policy always has a move.
pub fn action_mask(lomap: &LocalObstacleMap, grid: &SectorGrid) -> ActionMask {
    let n = grid.len();
    let mut allowed = vec![false; n];
    let occupied: Vec<(f64, f64)> = {
        let mut v = Vec::new();
        for cu in 0..crate::perception::MAP_SIZE {
            for cv in 0..crate::perception::MAP_SIZE {
                if lomap.get(cu, cv) == CellState::Occupied {
                    v.push(LocalObstacleMap::cell_center(cu, cv));
                }
            }
        }
        v
    };
    let mut center_state = vec![CellState::Unknown; n];
    for idx in 0..n {
        let (d, theta) = sector_polar(grid, idx);
        let (u, v) = (d * theta.cos(), d * theta.sin());
        let Some((cu, cv)) = LocalObstacleMap::cell_of(u, v) else {
            continue;
        };
        center_state[idx] = lomap.get(cu, cv);
        if center_state[idx] != CellState::Free {
            continue;
        }
        let corridor_blocked = traverse_cells((
            (u + MAP_HALF) / MAP_RES,
            (v + MAP_HALF) / MAP_RES,
        ))
        .iter()
        .any(|&(a, b)| lomap.get(a, b) == CellState::Occupied);
        if corridor_blocked {
            continue;
        }
        let too_close = occupied
            .iter()
            .any(|&(ou, ov)| (u - ou).hypot(v - ov) < MASK_CLEARANCE);
        if too_close {
            continue;
        }
        allowed[idx] = true;
    }
    let mut forced = false;
    if allowed.iter().all(|&a| !a) {
        forced = true;
        let pick = |want: &dyn Fn(CellState) -> bool| -> Option<usize> {
            let mut best: Option<(f64, usize)> = None;
            for idx in 0..n {
                if !want(center_state[idx]) {
                    continue;
                }
                let (d, _) = sector_polar(grid, idx);
                if best.map_or(true, |(bd, bi)| d < bd || (d == bd && idx < bi)) {
                    best = Some((d, idx));
                }
            }
            best.map(|(_, idx)| idx)
        };
        let idx = pick(&|s| s == CellState::Free)
            .or_else(|| pick(&|s| s != CellState::Occupied))
            .unwrap_or(0);
        allowed[idx] = true;
    }
    ActionMask { allowed, forced }
}
