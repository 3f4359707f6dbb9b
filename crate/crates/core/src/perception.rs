//! Scan preprocessing into the two policy observation encodings.
//!
//! The sub-goal policy consumes a stack of robot-centric tri-state occupancy
//! grids (one per control step, newest first). The motion policy consumes a
//! min-pooled 36-ray scan re-encoded as a threat-sorted obstacle list.

use crate::lidar::{LidarScan, N_RAYS, RANGE_MAX};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Obstacle map side length in cells.
pub const MAP_SIZE: usize = 60;
/// Obstacle map resolution in meters per cell.
pub const MAP_RES: f64 = 0.2;
/// Half-extent of the map window in meters.
pub const MAP_HALF: f64 = 6.0;
/// Number of min-pooled bins.
pub const N_BINS: usize = 36;
/// Rays folded into each bin.
pub const BIN_WIDTH: usize = N_RAYS / N_BINS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellState {
    Free = 0,
    Occupied = 1,
    Unknown = 2,
}

/// Robot-centric tri-state occupancy grid built from a single scan.
///
/// Coordinates are (u, v) with u along the heading and v to the robot's
/// left, each spanning [-6, 6) m; cell index = floor((coord + 6) / 0.2).
/// The robot sits at the corner of cell (30, 30).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalObstacleMap {
    cells: Vec<CellState>,
}

impl Default for LocalObstacleMap {
    fn default() -> Self {
        LocalObstacleMap {
            cells: vec![CellState::Unknown; MAP_SIZE * MAP_SIZE],
        }
    }
}

impl LocalObstacleMap {
    /// Rebuild a map from a full row-major cell vector.
    pub fn from_cells(cells: Vec<CellState>) -> LocalObstacleMap {
        assert_eq!(cells.len(), MAP_SIZE * MAP_SIZE, "cell count mismatch");
        LocalObstacleMap { cells }
    }

    pub fn get(&self, cu: usize, cv: usize) -> CellState {
        self.cells[cu * MAP_SIZE + cv]
    }

    fn set(&mut self, cu: usize, cv: usize, s: CellState) {
        self.cells[cu * MAP_SIZE + cv] = s;
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    /// Cell containing robot-frame point (u, v), or `None` outside the window.
    pub fn cell_of(u: f64, v: f64) -> Option<(usize, usize)> {
        let cu = ((u + MAP_HALF) / MAP_RES).floor();
        let cv = ((v + MAP_HALF) / MAP_RES).floor();
        if cu < 0.0 || cv < 0.0 || cu >= MAP_SIZE as f64 || cv >= MAP_SIZE as f64 {
            return None;
        }
        Some((cu as usize, cv as usize))
    }

    /// Robot-frame center of a cell.
    pub fn cell_center(cu: usize, cv: usize) -> (f64, f64) {
        (
            -MAP_HALF + (cu as f64 + 0.5) * MAP_RES,
            -MAP_HALF + (cv as f64 + 0.5) * MAP_RES,
        )
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut n = [0usize; 3];
        for c in &self.cells {
            n[*c as usize] += 1;
        }
        (n[0], n[1], n[2])
    }

    /// PGM (P2) text rendering, heading-up: row 0 is farthest forward and
    /// image-left is the robot's left. 0=free, 100=occupied, 255=unknown.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", MAP_SIZE, MAP_SIZE);
        for row in 0..MAP_SIZE {
            let cu = MAP_SIZE - 1 - row;
            let mut line = String::with_capacity(MAP_SIZE * 4);
            for col in 0..MAP_SIZE {
                let cv = MAP_SIZE - 1 - col;
                let val = match self.get(cu, cv) {
                    CellState::Free => 0,
                    CellState::Occupied => 100,
                    CellState::Unknown => 255,
                };
                if col > 0 {
                    line.push(' ');
                }
                line.push_str(&val.to_string());
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Cells crossed by the segment from the robot (grid coordinate (30, 30)) to
/// `end` in cell units, in order, clipped to the grid. Ends at the cell
/// containing `end` when it lies inside the grid.
pub(crate) fn traverse_cells(end: (f64, f64)) -> Vec<(usize, usize)> {
    let start = (MAP_SIZE as f64 * 0.5, MAP_SIZE as f64 * 0.5);
    let d = (end.0 - start.0, end.1 - start.1);
    let target = (end.0.floor() as i64, end.1.floor() as i64);
    let mut cell = (start.0.floor() as i64, start.1.floor() as i64);
    let step = (d.0.signum() as i64, d.1.signum() as i64);
    let inv = (
        if d.0 != 0.0 { 1.0 / d.0 } else { f64::INFINITY },
        if d.1 != 0.0 { 1.0 / d.1 } else { f64::INFINITY },
    );
    let mut t_max = (
        if d.0 > 0.0 {
            ((cell.0 + 1) as f64 - start.0) * inv.0
        } else if d.0 < 0.0 {
            (cell.0 as f64 - start.0) * inv.0
        } else {
            f64::INFINITY
        },
        if d.1 > 0.0 {
            ((cell.1 + 1) as f64 - start.1) * inv.1
        } else if d.1 < 0.0 {
            (cell.1 as f64 - start.1) * inv.1
        } else {
            f64::INFINITY
        },
    );
    let t_delta = (inv.0.abs(), inv.1.abs());
    let mut out = Vec::with_capacity(64);
    for _ in 0..4 * MAP_SIZE {
        let in_grid = cell.0 >= 0
            && cell.1 >= 0
            && cell.0 < MAP_SIZE as i64
            && cell.1 < MAP_SIZE as i64;
        if in_grid {
            out.push((cell.0 as usize, cell.1 as usize));
        }
        if cell == target {
            break;
        }
        let t = t_max.0.min(t_max.1);
        if t > 1.0 {
            break;
        }
        if t_max.0 <= t_max.1 {
            cell.0 += step.0;
            t_max.0 += t_delta.0;
        } else {
            cell.1 += step.1;
            t_max.1 += t_delta.1;
        }
        if !in_grid && (cell.0 < -1 || cell.1 < -1) {
            break;
        }
    }
    out
}

/// Build the tri-state map from one scan: cells crossed by a ray before its
/// hit are free, hit cells (range strictly below max) are occupied, and
/// everything else stays unknown.
pub fn build_lomap(scan: &LidarScan) -> LocalObstacleMap {
    let mut map = LocalObstacleMap::default();
    let mut hits: Vec<(usize, usize)> = Vec::with_capacity(N_RAYS);
    for i in 0..N_RAYS {
        let r = scan.ranges[i];
        let b = scan.bearing(i);
        let end_u = (r * b.cos() + MAP_HALF) / MAP_RES;
        let end_v = (r * b.sin() + MAP_HALF) / MAP_RES;
        let cells = traverse_cells((end_u, end_v));
        let hit = r < RANGE_MAX;
        let n = cells.len();
        let free_upto = if hit { n.saturating_sub(1) } else { n };
        for &(cu, cv) in &cells[..free_upto] {
            map.set(cu, cv, CellState::Free);
        }
        if hit {
            if let Some(&(cu, cv)) = cells.last() {
                hits.push((cu, cv));
            }
        }
    }
    // Occupied endpoints overwrite free marks from neighboring rays.
    for (cu, cv) in hits {
        map.set(cu, cv, CellState::Occupied);
    }
    map
}

/// Four newest-first obstacle maps; the episode's first map fills all slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleMapStack {
    pub frames: [LocalObstacleMap; 4],
}

impl ObstacleMapStack {
    pub fn bootstrap(first: LocalObstacleMap) -> Self {
        ObstacleMapStack {
            frames: [first.clone(), first.clone(), first.clone(), first],
        }
    }

    pub fn push(&self, new: LocalObstacleMap) -> Self {
        ObstacleMapStack {
            frames: [
                new,
                self.frames[0].clone(),
                self.frames[1].clone(),
                self.frames[2].clone(),
            ],
        }
    }

    pub fn newest(&self) -> &LocalObstacleMap {
        &self.frames[0]
    }
}

/// 36-bin min-pooled scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseScan {
    pub ranges36: [f64; N_BINS],
    pub bearings36: [f64; N_BINS],
}

/// Fold the 1080-ray scan into 36 bins, keeping each bin's minimum range.
pub fn minpool(scan: &LidarScan) -> SparseScan {
    assert_eq!(scan.ranges.len(), N_RAYS);
    let mut ranges36 = [RANGE_MAX; N_BINS];
    let mut bearings36 = [0.0; N_BINS];
    for k in 0..N_BINS {
        let lo = k * BIN_WIDTH;
        let mut m = scan.ranges[lo];
        for i in lo + 1..lo + BIN_WIDTH {
            if scan.ranges[i] < m {
                m = scan.ranges[i];
            }
        }
        ranges36[k] = m;
        bearings36[k] = -PI + (lo as f64 + BIN_WIDTH as f64 * 0.5) * scan.angle_increment;
    }
    SparseScan { ranges36, bearings36 }
}

/// Obstacle list sorted ascending in threat: larger distance first, ties
/// broken by larger bearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleList {
    /// (distance m, bearing rad) pairs, all with distance below the safety
    /// threshold used at construction.
    pub entries: Vec<(f64, f64)>,
}

impl ObstacleList {
    /// Fixed-width network encoding: 36 (d, theta) pairs, real entries first,
    /// then sentinel rows (d_s, 0).
    pub fn padded_flat(&self, d_s: f64) -> [f64; 2 * N_BINS] {
        let mut out = [0.0; 2 * N_BINS];
        for k in 0..N_BINS {
            let (d, th) = self.entries.get(k).copied().unwrap_or((d_s, 0.0));
            out[2 * k] = d;
            out[2 * k + 1] = th;
        }
        out
    }
}

/// Keep bins closer than `d_s` and sort them by the threat order.
pub fn encode_obstacles(sparse: &SparseScan, d_s: f64) -> ObstacleList {
    assert!(d_s > crate::lidar::RANGE_MIN, "threshold below sensor minimum");
    let mut entries: Vec<(f64, f64)> = (0..N_BINS)
        .filter(|&k| sparse.ranges36[k] < d_s)
        .map(|k| (sparse.ranges36[k], sparse.bearings36[k]))
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    ObstacleList { entries }
}

/// Pack tri-state cells two bits each for compact replay storage.
pub fn pack_cells(cells: &[CellState]) -> Vec<u8> {
    let mut out = vec![0u8; (cells.len() + 3) / 4];
    for (i, c) in cells.iter().enumerate() {
        out[i / 4] |= (*c as u8) << ((i % 4) * 2);
    }
    out
}

pub fn unpack_cells(packed: &[u8], len: usize) -> Vec<CellState> {
    (0..len)
        .map(|i| match (packed[i / 4] >> ((i % 4) * 2)) & 0b11 {
            0 => CellState::Free,
            1 => CellState::Occupied,
            _ => CellState::Unknown,
        })
        .collect()
}
