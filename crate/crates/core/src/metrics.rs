//! Episode logging and navigation metrics: success rate, collision-free
//! success rate, collision count, and the path- and time-weighted success
//! ratios against reference-planner denominators.

use crate::geom::Vec2;
use crate::planning::{shortest_time, PlanningOracle};
use serde::Serialize;

/// One logged control step: post-step state, active sub-goal, congestion
/// readings, and the contact flag.
#[derive(Debug, Clone, Copy)]
pub struct StepRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
    pub subgoal_x: f64,
    pub subgoal_y: f64,
    pub congestion: f64,
    pub threshold: f64,
    pub collision: bool,
}

/// Finalized per-episode record with reference denominators.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub rows: Vec<StepRow>,
    pub dt: f64,
    pub success: bool,
    /// Realized path length, meters.
    pub path_length: f64,
    /// Realized duration, seconds (steps times dt).
    pub duration: f64,
    /// Reference shortest path, None when the planner finds no route.
    pub optimal_dist: Option<f64>,
    /// Reference shortest time at top speed.
    pub optimal_time: Option<f64>,
    pub collision_count: u32,
}

/// Count rising edges of the contact flag, with an implicit clear state
/// before the first step.
pub fn rising_edges(flags: impl IntoIterator<Item = bool>) -> u32 {
    let mut count = 0;
    let mut prev = false;
    for f in flags {
        if f && !prev {
            count += 1;
        }
        prev = f;
    }
    count
}

/// Fold raw step rows into an episode record; queries the reference
/// planner once for the denominators. An unreachable reference marks the
/// episode failed regardless of where the robot ended up.
pub fn finalize_episode(
    start: Vec2,
    rows: Vec<StepRow>,
    dt: f64,
    goal: Vec2,
    d_limit: f64,
    v_max: f64,
    oracle: &PlanningOracle,
) -> EpisodeLog {
    let mut path_length = 0.0;
    let mut prev = start;
    for r in &rows {
        let p = Vec2 { x: r.x, y: r.y };
        path_length += prev.dist(p);
        prev = p;
    }
    let reached = prev.dist(goal) < d_limit;
    let optimal_dist = oracle.distance(start, goal);
    let optimal_time = optimal_dist.map(|d| shortest_time(d, v_max));
    let collision_count = rising_edges(rows.iter().map(|r| r.collision));
    EpisodeLog {
        duration: rows.len() as f64 * dt,
        success: reached && optimal_dist.is_some(),
        rows,
        dt,
        path_length,
        optimal_dist,
        optimal_time,
        collision_count,
    }
}

fn weighted_term(success: bool, realized: f64, optimal: Option<f64>) -> f64 {
    if !success {
        return 0.0;
    }
    match optimal {
        Some(opt) => {
            let denom = realized.max(opt);
            if denom > 0.0 {
                opt / denom
            } else {
                1.0
            }
        }
        None => 0.0,
    }
}

/// Success weighted by path length, in [0, 1].
pub fn spl(episodes: &[EpisodeLog]) -> f64 {
    assert!(!episodes.is_empty());
    episodes
        .iter()
        .map(|e| weighted_term(e.success, e.path_length, e.optimal_dist))
        .sum::<f64>()
        / episodes.len() as f64
}

/// Success weighted by navigation time, in [0, 1].
pub fn snt(episodes: &[EpisodeLog]) -> f64 {
    assert!(!episodes.is_empty());
    episodes
        .iter()
        .map(|e| weighted_term(e.success, e.duration, e.optimal_time))
        .sum::<f64>()
        / episodes.len() as f64
}

/// Aggregate navigation metrics over an evaluation set; ratio columns are
/// percentages and collision count is a per-episode mean that can exceed 1.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub sr: f64,
    pub srn: f64,
    pub ct: f64,
    pub spl: f64,
    pub snt: f64,
    pub n: usize,
}

/// Fold an episode set into the aggregate report.
pub fn aggregate(episodes: &[EpisodeLog]) -> MetricsReport {
    assert!(!episodes.is_empty());
    let n = episodes.len();
    let succ = episodes.iter().filter(|e| e.success).count();
    let clean = episodes
        .iter()
        .filter(|e| e.success && e.collision_count == 0)
        .count();
    let ct = episodes.iter().map(|e| e.collision_count as f64).sum::<f64>() / n as f64;
    MetricsReport {
        sr: 100.0 * succ as f64 / n as f64,
        srn: 100.0 * clean as f64 / n as f64,
        ct,
        spl: 100.0 * spl(episodes),
        snt: 100.0 * snt(episodes),
        n,
    }
}

impl MetricsReport {
    /// JSON document with the metric fields plus the configuration hash.
    pub fn to_json(&self, config_hash: &str) -> String {
        let doc = serde_json::json!({
            "sr": self.sr,
            "srn": self.srn,
            "ct": self.ct,
            "spl": self.spl,
            "snt": self.snt,
            "n": self.n,
            "config_hash": config_hash,
        });
        serde_json::to_string_pretty(&doc).expect("metrics serialization")
    }
}

/// CSV header matching [`episode_csv`] rows.
pub const EPISODE_CSV_HEADER: &str =
    "t,x,y,theta,v,omega,subgoal_x,subgoal_y,congestion,threshold,collision";

/// One CSV document per episode, one row per control step.
pub fn episode_csv(log: &EpisodeLog) -> String {
    let mut out = String::from(EPISODE_CSV_HEADER);
    out.push('\n');
    for r in &log.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.x,
            r.y,
            r.theta,
            r.v,
            r.omega,
            r.subgoal_x,
            r.subgoal_y,
            r.congestion,
            r.threshold,
            r.collision as u8
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldModel;

    fn row(x: f64, y: f64, collision: bool) -> StepRow {
        StepRow {
            t: 0.0,
            x,
            y,
            theta: 0.0,
            v: 0.0,
            omega: 0.0,
            subgoal_x: 0.0,
            subgoal_y: 0.0,
            congestion: 0.0,
            threshold: 0.5,
            collision,
        }
    }

    fn synthetic(success: bool, p: f64, pt: Option<f64>, q: f64, t: Option<f64>, cc: u32) -> EpisodeLog {
        EpisodeLog {
            rows: Vec::new(),
            dt: 0.1,
            success,
            path_length: p,
            duration: q,
            optimal_dist: pt,
            optimal_time: t,
            collision_count: cc,
        }
    }

    fn open_world() -> WorldModel {
        WorldModel::empty(10.0, 10.0)
    }

    #[test]
    fn straight_run_measures_path_and_success() {
        let world = open_world();
        let oracle = PlanningOracle::with_inflation(&world, 0.105);
        let start = Vec2 { x: 2.0, y: 5.0 };
        let goal = Vec2 { x: 4.0, y: 5.0 };
        let rows: Vec<StepRow> = (1..=10)
            .map(|k| row(2.0 + 0.2 * k as f64, 5.0, false))
            .collect();
        let log = finalize_episode(start, rows, 1.0, goal, 0.5, 0.22, &oracle);
        assert!((log.path_length - 2.0).abs() < 1e-9);
        assert!((log.duration - 10.0).abs() < 1e-12);
        assert!(log.success);
        assert_eq!(log.collision_count, 0);
        assert!(log.optimal_dist.is_some());
    }

    #[test]
    fn stationary_episode_fails_with_zero_path() {
        let world = open_world();
        let oracle = PlanningOracle::with_inflation(&world, 0.105);
        let start = Vec2 { x: 2.0, y: 5.0 };
        let rows = vec![row(2.0, 5.0, false); 5];
        let log = finalize_episode(start, rows, 0.1, Vec2 { x: 8.0, y: 5.0 }, 0.5, 0.22, &oracle);
        assert_eq!(log.path_length, 0.0);
        assert!(!log.success);
    }

    #[test]
    fn collision_count_is_rising_edges() {
        assert_eq!(rising_edges([false, true, true, false, true]), 2);
        assert_eq!(rising_edges([true, true, true]), 1);
        assert_eq!(rising_edges(std::iter::empty::<bool>()), 0);
        let world = open_world();
        let oracle = PlanningOracle::with_inflation(&world, 0.105);
        let flags = [false, true, true, false, true];
        let rows: Vec<StepRow> = flags.iter().map(|&c| row(2.0, 5.0, c)).collect();
        let log = finalize_episode(
            Vec2 { x: 2.0, y: 5.0 },
            rows,
            0.1,
            Vec2 { x: 8.0, y: 5.0 },
            0.5,
            0.22,
            &oracle,
        );
        assert_eq!(log.collision_count, 2);
    }

    #[test]
    fn unreachable_reference_marks_failure() {
        // A wall splits the room; goal on the far side.
        let mut world = open_world();
        world.walls.push(crate::geom::Segment {
            a: Vec2 { x: 5.0, y: 0.0 },
            b: Vec2 { x: 5.0, y: 10.0 },
        });
        let oracle = PlanningOracle::with_inflation(&world, 0.105);
        let start = Vec2 { x: 2.0, y: 5.0 };
        let goal = Vec2 { x: 8.0, y: 5.0 };
        // Pretend the robot teleported next to the goal anyway.
        let rows = vec![row(8.0, 5.0, false)];
        let log = finalize_episode(start, rows, 0.1, goal, 0.5, 0.22, &oracle);
        assert!(log.optimal_dist.is_none());
        assert!(!log.success);
        let r = aggregate(&[log]);
        assert_eq!(r.sr, 0.0);
        assert_eq!(r.spl, 0.0);
        assert_eq!(r.snt, 0.0);
    }

    #[test]
    fn spl_unit_cases() {
        let optimal = synthetic(true, 3.0, Some(3.0), 10.0, Some(10.0), 0);
        assert_eq!(spl(&[optimal.clone()]), 1.0);
        let fail = synthetic(false, 3.0, Some(3.0), 10.0, Some(10.0), 0);
        assert_eq!(spl(&[optimal.clone(), fail]), 0.5);
        let detour = synthetic(true, 6.0, Some(3.0), 10.0, Some(10.0), 0);
        assert_eq!(spl(&[detour]), 0.5);
    }

    #[test]
    fn snt_unit_cases() {
        let optimal = synthetic(true, 3.0, Some(3.0), 10.0, Some(10.0), 0);
        assert_eq!(snt(&[optimal]), 1.0);
        let slow = synthetic(true, 3.0, Some(3.0), 20.0, Some(10.0), 0);
        assert_eq!(snt(&[slow]), 0.5);
        let fail = synthetic(false, 3.0, Some(3.0), 20.0, Some(10.0), 0);
        assert_eq!(snt(&[fail]), 0.0);
    }

    #[test]
    fn aggregate_hand_case() {
        let messy = synthetic(true, 3.0, Some(3.0), 10.0, Some(10.0), 1);
        let clean = synthetic(true, 3.0, Some(3.0), 10.0, Some(10.0), 0);
        let r = aggregate(&[messy, clean]);
        assert_eq!(r.sr, 100.0);
        assert_eq!(r.srn, 50.0);
        assert_eq!(r.ct, 0.5);
    }

    #[test]
    fn randomized_sets_respect_metric_bounds() {
        use rand::Rng;
        let mut rng = crate::rng::stream(21, 0);
        for _ in 0..100 {
            let n = rng.gen_range(1..=30);
            let eps: Vec<EpisodeLog> = (0..n)
                .map(|_| {
                    let pt = rng.gen_range(0.5..10.0);
                    let p = pt * rng.gen_range(1.0..3.0);
                    let t = pt / 0.22;
                    let q = t * rng.gen_range(1.0..3.0);
                    let reachable = rng.gen::<f64>() < 0.9;
                    synthetic(
                        rng.gen::<f64>() < 0.6 && reachable,
                        p,
                        reachable.then_some(pt),
                        q,
                        reachable.then_some(t),
                        rng.gen_range(0..3),
                    )
                })
                .collect();
            let r = aggregate(&eps);
            assert!(r.srn <= r.sr + 1e-12);
            assert!(r.spl <= r.sr + 1e-9);
            assert!(r.snt <= r.sr + 1e-9);
            assert!((0.0..=100.0).contains(&r.spl));
            assert!((0.0..=100.0).contains(&r.snt));
        }
    }

    #[test]
    fn spl_is_scale_invariant() {
        let eps: Vec<EpisodeLog> = vec![
            synthetic(true, 4.0, Some(3.0), 10.0, Some(10.0), 0),
            synthetic(true, 2.0, Some(2.0), 5.0, Some(5.0), 0),
            synthetic(false, 9.0, Some(3.0), 9.0, Some(9.0), 1),
        ];
        let scaled: Vec<EpisodeLog> = eps
            .iter()
            .map(|e| {
                let mut s = e.clone();
                s.path_length *= 7.5;
                s.optimal_dist = s.optimal_dist.map(|d| d * 7.5);
                s
            })
            .collect();
        assert!((spl(&eps) - spl(&scaled)).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips_row_count() {
        let world = open_world();
        let oracle = PlanningOracle::with_inflation(&world, 0.105);
        let rows: Vec<StepRow> = (1..=4).map(|k| row(2.0 + 0.1 * k as f64, 5.0, false)).collect();
        let log = finalize_episode(
            Vec2 { x: 2.0, y: 5.0 },
            rows,
            0.1,
            Vec2 { x: 8.0, y: 5.0 },
            0.5,
            0.22,
            &oracle,
        );
        let csv = episode_csv(&log);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with(EPISODE_CSV_HEADER));
        let json = aggregate(&[log]).to_json("abc123");
        assert!(json.contains("\"config_hash\": \"abc123\""));
        assert!(json.contains("\"n\": 1"));
    }
}
