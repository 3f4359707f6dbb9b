//! Grid path-length oracle used for reward shaping and metric denominators.
//!
//! Distances come from 8-connected A* on a 0.5 m occupancy grid (straight
//! step 0.5 m, diagonal 0.5*sqrt(2) m, octile heuristic, no corner cutting).
//! Path costs are carried as exact (straight, diagonal) step counts, so the
//! returned distance is order independent and A* agrees bit for bit with a
//! plain Dijkstra over the same grid.

use crate::geom::{point_in_polygon, segment_rect_dist, Rect, Vec2};
use crate::world::WorldModel;
use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Grid resolution in meters per cell.
pub const RESOLUTION: f64 = 0.5;
/// Diagonal step length in meters.
const DIAG: f64 = std::f64::consts::SQRT_2 * 0.5;
/// Maximum snap distance when a query point lands in an occupied cell.
const SNAP_RADIUS: f64 = 1.0;

/// Boolean occupancy grid at 0.5 m resolution covering a world's bounds.
#[derive(Debug, Clone)]
pub struct OccGrid05 {
    pub origin: Vec2,
    pub nx: usize,
    pub ny: usize,
    occ: Vec<bool>,
}

impl OccGrid05 {
    /// Build directly from row-major occupancy flags (index = iy*nx + ix).
    pub fn from_cells(origin: Vec2, nx: usize, ny: usize, occ: Vec<bool>) -> Self {
        assert_eq!(occ.len(), nx * ny, "occupancy length must equal nx*ny");
        OccGrid05 { origin, nx, ny, occ }
    }

    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.occ[iy * self.nx + ix]
    }

    /// Cell containing a world point, clamped to the grid.
    pub fn cell_of(&self, p: Vec2) -> (usize, usize) {
        let ix = ((p.x - self.origin.x) / RESOLUTION).floor() as i64;
        let iy = ((p.y - self.origin.y) / RESOLUTION).floor() as i64;
        (
            ix.clamp(0, self.nx as i64 - 1) as usize,
            iy.clamp(0, self.ny as i64 - 1) as usize,
        )
    }

    pub fn center(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (ix as f64 + 0.5) * RESOLUTION,
            self.origin.y + (iy as f64 + 0.5) * RESOLUTION,
        )
    }

    pub fn occupied_count(&self) -> usize {
        self.occ.iter().filter(|&&o| o).count()
    }
}

/// Exact path cost as straight and diagonal step counts. Because sqrt(2) is
/// irrational, two different count pairs never have the same length, so
/// comparisons are exact integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCost {
    pub straight: u32,
    pub diagonal: u32,
}

impl StepCost {
    pub const ZERO: StepCost = StepCost { straight: 0, diagonal: 0 };

    pub fn meters(self) -> f64 {
        self.straight as f64 * RESOLUTION + self.diagonal as f64 * DIAG
    }

    fn plus_straight(self) -> StepCost {
        StepCost { straight: self.straight + 1, ..self }
    }

    fn plus_diagonal(self) -> StepCost {
        StepCost { diagonal: self.diagonal + 1, ..self }
    }

    fn add(self, o: StepCost) -> StepCost {
        StepCost {
            straight: self.straight + o.straight,
            diagonal: self.diagonal + o.diagonal,
        }
    }
}

impl Ord for StepCost {
    /// Compare a + b*sqrt(2) against c + e*sqrt(2) exactly by comparing
    /// (a-c) with (e-b)*sqrt(2) via squaring.
    fn cmp(&self, o: &StepCost) -> Ordering {
        let da = self.straight as i64 - o.straight as i64;
        let db = o.diagonal as i64 - self.diagonal as i64;
        match (da >= 0, db >= 0) {
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            (true, true) => {
                if da == 0 && db == 0 {
                    Ordering::Equal
                } else {
                    (da * da).cmp(&(2 * db * db))
                }
            }
            (false, false) => (2 * db * db).cmp(&(da * da)),
        }
    }
}

impl PartialOrd for StepCost {
    fn partial_cmp(&self, o: &StepCost) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn polygon_near_rect(verts: &[Vec2], rect: &Rect, tol: f64) -> bool {
    if point_in_polygon(Vec2::new(
        (rect.min.x + rect.max.x) * 0.5,
        (rect.min.y + rect.max.y) * 0.5,
    ), verts)
    {
        return true;
    }
    let n = verts.len();
    for i in 0..n {
        let s = crate::geom::Segment::new(verts[i], verts[(i + 1) % n]);
        if segment_rect_dist(&s, rect) <= tol {
            return true;
        }
    }
    false
}

/// Rasterize world geometry onto the 0.5 m grid. A cell is occupied when any
/// wall, circle, or polygon inflated by `inflation` touches the cell square.
/// The outer boundary is not rasterized; leaving the grid is simply illegal.
pub fn rasterize(world: &WorldModel, inflation: f64) -> OccGrid05 {
    assert!(inflation >= 0.0, "inflation must be non-negative");
    let origin = world.bounds.min;
    let nx = ((world.bounds.width() / RESOLUTION) - 1e-9).ceil().max(1.0) as usize;
    let ny = ((world.bounds.height() / RESOLUTION) - 1e-9).ceil().max(1.0) as usize;
    let mut occ = vec![false; nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            let rect = Rect::new(
                Vec2::new(
                    origin.x + ix as f64 * RESOLUTION,
                    origin.y + iy as f64 * RESOLUTION,
                ),
                Vec2::new(
                    origin.x + (ix + 1) as f64 * RESOLUTION,
                    origin.y + (iy + 1) as f64 * RESOLUTION,
                ),
            );
            let mut hit = world
                .walls
                .iter()
                .any(|w| segment_rect_dist(w, &rect) <= inflation);
            hit = hit
                || world
                    .circles
                    .iter()
                    .any(|c| rect.dist_to_solid(c.center) <= inflation + c.radius);
            hit = hit
                || world
                    .polygons
                    .iter()
                    .any(|p| polygon_near_rect(&p.verts, &rect, inflation));
            occ[iy * nx + ix] = hit;
        }
    }
    OccGrid05::from_cells(origin, nx, ny, occ)
}

/// Nearest free cell to `p` within the snap radius, ties broken by smaller
/// center distance then row-major index.
fn snap(grid: &OccGrid05, p: Vec2) -> Option<usize> {
    let (ix, iy) = grid.cell_of(p);
    if !grid.is_occupied(ix, iy) {
        return Some(iy * grid.nx + ix);
    }
    let reach = (SNAP_RADIUS / RESOLUTION).ceil() as i64;
    let mut best: Option<(f64, usize)> = None;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let cx = ix as i64 + dx;
            let cy = iy as i64 + dy;
            if cx < 0 || cy < 0 || cx >= grid.nx as i64 || cy >= grid.ny as i64 {
                continue;
            }
            let (cx, cy) = (cx as usize, cy as usize);
            if grid.is_occupied(cx, cy) {
                continue;
            }
            let d = p.dist(grid.center(cx, cy));
            if d > SNAP_RADIUS {
                continue;
            }
            let idx = cy * grid.nx + cx;
            if best.map_or(true, |(bd, bi)| d < bd || (d == bd && idx < bi)) {
                best = Some((d, idx));
            }
        }
    }
    best.map(|(_, idx)| idx)
}

const STEPS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

#[derive(PartialEq, Eq)]
struct OpenNode {
    f: StepCost,
    g: StepCost,
    idx: usize,
}

impl Ord for OpenNode {
    // Max-heap: the node popped first has lower f, then higher g, then lower
    // row-major index.
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.cmp(&self.f)
            .then_with(|| self.g.cmp(&o.g))
            .then_with(|| o.idx.cmp(&self.idx))
    }
}

impl PartialOrd for OpenNode {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn octile(ax: usize, ay: usize, bx: usize, by: usize) -> StepCost {
    let dx = (ax as i64 - bx as i64).unsigned_abs() as u32;
    let dy = (ay as i64 - by as i64).unsigned_abs() as u32;
    StepCost {
        straight: dx.max(dy) - dx.min(dy),
        diagonal: dx.min(dy),
    }
}

/// Shortest 8-connected path length in meters between two world points, or
/// `None` when disconnected. Points in occupied cells snap to the nearest
/// free cell within 1 m.
pub fn astar_dist(grid: &OccGrid05, a: Vec2, b: Vec2) -> Option<f64> {
    astar_cost(grid, a, b).map(StepCost::meters)
}

pub fn astar_cost(grid: &OccGrid05, a: Vec2, b: Vec2) -> Option<StepCost> {
    let start = snap(grid, a)?;
    let goal = snap(grid, b)?;
    if start == goal {
        return Some(StepCost::ZERO);
    }
    let (gx, gy) = (goal % grid.nx, goal / grid.nx);
    let mut best_g: Vec<Option<StepCost>> = vec![None; grid.nx * grid.ny];
    let mut heap = BinaryHeap::new();
    best_g[start] = Some(StepCost::ZERO);
    heap.push(OpenNode {
        f: octile(start % grid.nx, start / grid.nx, gx, gy),
        g: StepCost::ZERO,
        idx: start,
    });
    while let Some(node) = heap.pop() {
        if best_g[node.idx] != Some(node.g) {
            continue;
        }
        if node.idx == goal {
            return Some(node.g);
        }
        let (ix, iy) = (node.idx % grid.nx, node.idx / grid.nx);
        for (dx, dy) in STEPS {
            let nx = ix as i64 + dx;
            let ny = iy as i64 + dy;
            if nx < 0 || ny < 0 || nx >= grid.nx as i64 || ny >= grid.ny as i64 {
                continue;
            }
            let (nxu, nyu) = (nx as usize, ny as usize);
            if grid.is_occupied(nxu, nyu) {
                continue;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal
                && (grid.is_occupied(nxu, iy) || grid.is_occupied(ix, nyu))
            {
                // No corner cutting: both orthogonal neighbors must be free.
                continue;
            }
            let ng = if diagonal {
                node.g.plus_diagonal()
            } else {
                node.g.plus_straight()
            };
            let nidx = nyu * grid.nx + nxu;
            if best_g[nidx].map_or(true, |cur| ng < cur) {
                best_g[nidx] = Some(ng);
                heap.push(OpenNode {
                    f: ng.add(octile(nxu, nyu, gx, gy)),
                    g: ng,
                    idx: nidx,
                });
            }
        }
    }
    None
}

/// Time to traverse `dist` at full speed.
pub fn shortest_time(dist: f64, v_max: f64) -> f64 {
    assert!(v_max > 0.0, "v_max must be positive");
    dist / v_max
}

/// Counted handle around the reward-shaping grid (inflation 0). Training
/// rewards query through this; eval runs assert the counter stays at zero,
/// which is the mapless guarantee.
#[derive(Debug)]
pub struct PlanningOracle {
    pub grid: OccGrid05,
    calls: Cell<u64>,
}

impl PlanningOracle {
    pub fn new(world: &WorldModel) -> Self {
        PlanningOracle::with_inflation(world, 0.0)
    }

    /// Oracle over a grid inflated by the given radius, for feasibility-aware
    /// reference paths.
    pub fn with_inflation(world: &WorldModel, inflation: f64) -> Self {
        PlanningOracle {
            grid: rasterize(world, inflation),
            calls: Cell::new(0),
        }
    }

    pub fn distance(&self, a: Vec2, b: Vec2) -> Option<f64> {
        self.calls.set(self.calls.get() + 1);
        astar_dist(&self.grid, a, b)
    }

    pub fn call_count(&self) -> u64 {
        self.calls.get()
    }

    pub fn reset_calls(&self) {
        self.calls.set(0);
    }
}

/// Reference implementations kept separate from the production path so tests
/// can cross-check against independently written code.
pub mod test_support {
    use super::*;

    /// Plain Dijkstra (no heuristic) over the same grid and step costs.
    pub fn dijkstra_dist(grid: &OccGrid05, a: Vec2, b: Vec2) -> Option<f64> {
        let start = super::snap(grid, a)?;
        let goal = super::snap(grid, b)?;
        let n = grid.nx * grid.ny;
        let mut dist: Vec<Option<StepCost>> = vec![None; n];
        let mut done = vec![false; n];
        dist[start] = Some(StepCost::ZERO);
        loop {
            // Linear scan for the unsettled node with smallest tentative cost.
            let mut u: Option<usize> = None;
            for i in 0..n {
                if done[i] || dist[i].is_none() {
                    continue;
                }
                match u {
                    None => u = Some(i),
                    Some(j) => {
                        if dist[i].unwrap() < dist[j].unwrap() {
                            u = Some(i);
                        }
                    }
                }
            }
            let Some(u) = u else { break };
            done[u] = true;
            if u == goal {
                break;
            }
            let (ix, iy) = (u % grid.nx, u / grid.nx);
            for (dx, dy) in super::STEPS {
                let nx = ix as i64 + dx;
                let ny = iy as i64 + dy;
                if nx < 0 || ny < 0 || nx >= grid.nx as i64 || ny >= grid.ny as i64 {
                    continue;
                }
                let (nxu, nyu) = (nx as usize, ny as usize);
                if grid.is_occupied(nxu, nyu) {
                    continue;
                }
                let diagonal = dx != 0 && dy != 0;
                if diagonal && (grid.is_occupied(nxu, iy) || grid.is_occupied(ix, nyu)) {
                    continue;
                }
                let cand = if diagonal {
                    dist[u].unwrap().plus_diagonal()
                } else {
                    dist[u].unwrap().plus_straight()
                };
                let v = nyu * grid.nx + nxu;
                if dist[v].map_or(true, |cur| cand < cur) {
                    dist[v] = Some(cand);
                }
            }
        }
        dist[goal].map(StepCost::meters)
    }

    /// Random occupancy grid for oracle cross-checks. Cells are occupied
    /// independently with probability `p`.
    pub fn random_grid(nx: usize, ny: usize, p: f64, rng: &mut impl rand::Rng) -> OccGrid05 {
        let occ = (0..nx * ny).map(|_| rng.gen::<f64>() < p).collect();
        OccGrid05::from_cells(Vec2::ZERO, nx, ny, occ)
    }
}
