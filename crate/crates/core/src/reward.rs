//! Reward functions for both policy levels.
//!
//! Both levels share the same shape: an arrival bonus, a constant per-step
//! penalty, and a potential term proportional to the drop in distance to the
//! target. The sub-goal level adds a penalty for picking an unusable
//! sub-goal. The motion level deliberately has no collision term; collisions
//! are handled as a cost constraint by its optimizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_arrive_val: f64,
    pub r_step_val: f64,
    pub r_out_val: f64,
    pub mu: f64,
    /// Arrival radius in meters (strict inequality).
    pub d_limit: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            r_arrive_val: 100.0,
            r_step_val: -1.0,
            r_out_val: -20.0,
            mu: 1.0,
            d_limit: 0.5,
        }
    }
}

/// Sub-goal selection reward. `d_t` is the Euclidean distance to the final
/// goal; the shaping term uses grid path distances, and an unreachable path
/// (either endpoint) contributes nothing and marks the sub-goal invalid.
pub fn high_reward(
    d_t: f64,
    d_prev_astar: Option<f64>,
    d_now_astar: Option<f64>,
    invalid_subgoal: bool,
    cfg: &RewardConfig,
) -> f64 {
    let mut invalid = invalid_subgoal;
    let r_dist = match (d_prev_astar, d_now_astar) {
        (Some(prev), Some(now)) => cfg.mu * (prev - now),
        _ => {
            invalid = true;
            0.0
        }
    };
    let r_arrival = if d_t < cfg.d_limit { cfg.r_arrive_val } else { 0.0 };
    let r_out = if invalid { cfg.r_out_val } else { 0.0 };
    r_arrival + cfg.r_step_val + r_dist + r_out
}

/// Per-step motion reward toward the current sub-goal. Collision state is
/// intentionally not an input.
pub fn low_reward(d_t_sub: f64, d_prev: f64, d_now: f64, cfg: &RewardConfig) -> f64 {
    let r_arrival = if d_t_sub < cfg.d_limit { cfg.r_arrive_val } else { 0.0 };
    r_arrival + cfg.r_step_val + cfg.mu * (d_prev - d_now)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn high_reward_worked_values() {
        let cfg = RewardConfig::default();
        let r = high_reward(0.3, Some(1.0), Some(0.3), false, &cfg);
        assert!((r - 99.7).abs() < 1e-12);
        let r = high_reward(4.0, Some(5.0), Some(4.0), false, &cfg);
        assert!(r.abs() < 1e-12);
        let r = high_reward(4.0, Some(4.0), Some(4.0), true, &cfg);
        assert!((r - -21.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_path_zeroes_shaping_and_penalizes() {
        let cfg = RewardConfig::default();
        let r = high_reward(4.0, Some(5.0), None, false, &cfg);
        assert!((r - -21.0).abs() < 1e-12);
        let r = high_reward(4.0, None, None, false, &cfg);
        assert!((r - -21.0).abs() < 1e-12);
    }

    #[test]
    fn arrival_is_strict() {
        let cfg = RewardConfig::default();
        let at_limit = high_reward(0.5, Some(1.0), Some(1.0), false, &cfg);
        assert!((at_limit - -1.0).abs() < 1e-12);
        let inside = high_reward(0.4999, Some(1.0), Some(1.0), false, &cfg);
        assert!((inside - 99.0).abs() < 1e-12);
    }

    #[test]
    fn low_reward_worked_values() {
        let cfg = RewardConfig::default();
        let r = low_reward(0.4, 0.5, 0.4, &cfg);
        assert!((r - 99.1).abs() < 1e-12);
        let r = low_reward(2.0, 2.022, 2.0, &cfg);
        assert!((r - -0.978).abs() < 1e-12);
        let r = low_reward(2.0, 2.0, 2.0, &cfg);
        assert!((r - -1.0).abs() < 1e-12);
    }

    #[test]
    fn shaping_telescopes_over_segments() {
        let cfg = RewardConfig::default();
        let mut rng = crate::rng::stream(31, 0);
        for _ in 0..50 {
            let mut d: Vec<f64> = vec![rng.gen_range(1.0..8.0)];
            for _ in 0..40 {
                let last = *d.last().unwrap();
                d.push((last + rng.gen_range(-0.05..0.03)).max(0.6));
            }
            let mut sum = 0.0;
            for w in d.windows(2) {
                // Cruising far from the goal: only step and shaping terms.
                sum += low_reward(w[1], w[0], w[1], &cfg) - cfg.r_step_val;
            }
            let expect = cfg.mu * (d[0] - d[d.len() - 1]);
            assert!((sum - expect).abs() < 1e-9);
        }
    }
}
