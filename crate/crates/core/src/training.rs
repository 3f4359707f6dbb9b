//! Trainers for both policy levels: value learning over sub-goal sectors
//! with a scripted motion stub and hindsight relabeling, and constrained
//! policy optimization of the motion policy on randomized arenas.

use crate::config::RunConfig;
use crate::congestion::{
    action_mask, should_update, SectorGrid, SubGoal, UpdateState, SAFETY_DISTANCE,
};
use crate::geom::{Pose, Vec2};
use crate::high_policy::{
    her_relabel, init_nets, masked_argmax, train_step, HighObs, HighTransition, QNet, ReplayBuffer,
};
use crate::low_policy::{
    act, build_obs, gae, LowNets, ObsHistory, RolloutBatch, ENC_WIDTH, FRAME_WIDTH, HIST_SLOTS,
};
use crate::metrics::rising_edges;
use crate::perception::{build_lomap, encode_obstacles, minpool, ObstacleMapStack};
use crate::planning::PlanningOracle;
use crate::reward::{high_reward, low_reward};
use crate::runner::{jitter_pose, LowController, RunError, ScriptedController, Sim};
use crate::tensor::TensorError;
use crate::world::{
    Circle, PedestrianSpec, ScenarioSpec, WorldModel, DEFAULT_ROBOT_RADIUS,
};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

/// Cap on control steps spent pursuing one training sub-goal.
const LOW_SEGMENT_CAP: usize = 250;

/// Per-episode training curve row for the sub-goal level.
#[derive(Debug, Clone)]
pub struct HighCurveRow {
    pub episode: usize,
    /// Optimizer step counter at the end of the episode; continues across
    /// resumed runs.
    pub grad_step: u64,
    pub env_steps: usize,
    pub decisions: usize,
    pub ep_reward: f64,
    pub steps_to_goal: usize,
    pub epsilon: f64,
    pub mean_loss: f64,
}

pub struct HighTrainResult {
    pub online: QNet,
    pub target: QNet,
    pub curve: Vec<HighCurveRow>,
}

/// Epsilon-greedy over the full action set; exploration may pick masked
/// sectors on purpose so their penalty is experienced.
fn select_training(q: &[f64], mask: &crate::congestion::ActionMask, eps: f64, rng: &mut ChaCha12Rng) -> usize {
    if rng.gen::<f64>() < eps {
        rng.gen_range(0..q.len())
    } else {
        masked_argmax(q, mask)
    }
}

/// Write the sub-goal network checkpoint into a directory.
fn save_high(dir: &Path, net: &QNet) -> Result<(), RunError> {
    let mut f = std::fs::File::create(dir.join("high.ck"))?;
    net.params.save(&mut f).map_err(RunError::Checkpoint)
}

/// Write the motion policy checkpoint into a directory.
fn save_low(dir: &Path, nets: &LowNets) -> Result<(), RunError> {
    let mut f = std::fs::File::create(dir.join("low.ck"))?;
    nets.save(&mut f).map_err(RunError::Checkpoint)
}

/// Train the sub-goal value network on one scenario with the scripted
/// pursuit stub as the motion level. When `ck_dir` is set the checkpoint
/// file is refreshed periodically during training.
pub fn train_high(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    nets: (QNet, QNet),
    ck_dir: Option<&Path>,
) -> Result<HighTrainResult, RunError> {
    let (mut online, mut target) = nets;
    let hcfg = cfg.high_config();
    let rcfg = cfg.reward_config();
    let grid = SectorGrid::default();
    let sfm = crate::ped::SfmParams::default();
    let oracle = PlanningOracle::new(&spec.world);
    let mut buffer = ReplayBuffer::new(hcfg.buffer_capacity);
    let mut sel_rng = crate::rng::stream(cfg.run.seed, 60);
    let mut her_rng = crate::rng::stream(cfg.run.seed, 61);
    let mut train_rng = crate::rng::stream(cfg.run.seed, 62);
    let mut curve = Vec::with_capacity(cfg.dqn.episodes);
    let mut scripted = ScriptedController::default();
    let train_every = cfg.dqn.train_every.max(1);
    let mut decision_count = 0usize;

    for ep in 0..cfg.dqn.episodes {
        let mut ep_rng = crate::rng::stream(cfg.run.seed, 10_000 + ep as u64);
        let mut ep_spec = spec.clone();
        ep_spec.robot_start = jitter_pose(
            &spec.world,
            spec.robot_start,
            crate::runner::START_JITTER_RADIUS,
            &mut ep_rng,
        );
        let mut sim = Sim::from_scenario(&ep_spec, &sfm, cfg.sfm.desired_speed_override);
        let mut update = UpdateState::default();
        let mut scan = sim.scan();
        update.observe(&scan);
        let mut stack = ObstacleMapStack::bootstrap(build_lomap(&scan));
        let mut d_prev = oracle.distance(sim.robot.pos, sim.goal);
        let mut transitions: Vec<HighTransition> = Vec::new();
        let mut env_steps = 0usize;
        let mut arrived = false;
        let mut ep_reward = 0.0;
        let mut losses = Vec::new();
        let mut last_eps = hcfg.epsilon_at(online.params.step);

        while env_steps < sim.horizon && !arrived {
            let pose = sim.robot.pose();
            let obs = HighObs {
                stack: stack.clone(),
                goal_polar: pose.to_polar(sim.goal),
            };
            let mask = action_mask(stack.newest(), &grid);
            let q = online.q_values(&obs);
            last_eps = hcfg.epsilon_at(online.params.step);
            let a = select_training(&q, &mask, last_eps, &mut sel_rng);
            let invalid = !mask.allowed[a];
            let sg = SubGoal::from_sector(&grid, a, &pose);

            if invalid {
                // Penalized decision: hold in place for one step, then
                // decide again.
                sim.apply((0.0, 0.0), &sfm);
                env_steps += 1;
                scan = sim.scan();
                update.observe(&scan);
                stack = stack.push(build_lomap(&scan));
            } else {
                update.adopt(sg.clone(), sim.t);
                loop {
                    let subgoal_polar = sim.robot.pose().to_polar(sg.world_point);
                    let olist = encode_obstacles(&minpool(&scan), SAFETY_DISTANCE);
                    let cmd =
                        scripted.command(&olist, subgoal_polar, sim.robot.v, sim.robot.omega);
                    sim.apply(cmd, &sfm);
                    env_steps += 1;
                    scan = sim.scan();
                    update.observe(&scan);
                    stack = stack.push(build_lomap(&scan));
                    if sim.robot.pos.dist(sim.goal) < rcfg.d_limit {
                        arrived = true;
                        break;
                    }
                    if env_steps >= sim.horizon
                        || should_update(&update, sim.robot.pos, sim.t)
                    {
                        break;
                    }
                }
            }

            let pose_next = sim.robot.pose();
            let d_now = oracle.distance(pose_next.pos, sim.goal);
            let r = high_reward(pose_next.pos.dist(sim.goal), d_prev, d_now, invalid, &rcfg);
            d_prev = d_now;
            ep_reward += r;
            let t = HighTransition {
                obs,
                action: a,
                reward: r,
                next_obs: HighObs {
                    stack: stack.clone(),
                    goal_polar: pose_next.to_polar(sim.goal),
                },
                done: arrived,
                achieved_world: pose_next.pos,
                goal_world: sim.goal,
                pose_at_obs: pose,
                pose_at_next: pose_next,
                invalid_subgoal: invalid,
            };
            buffer.push(&t);
            transitions.push(t);
            decision_count += 1;

            if decision_count % train_every == 0
                && buffer.len() >= hcfg.batch_size
                && buffer.len() >= cfg.dqn.warmup
            {
                for _ in 0..cfg.dqn.train_repeats.max(1) {
                    let loss = train_step(
                        &buffer,
                        &mut online,
                        &mut target,
                        &hcfg,
                        &grid,
                        &mut train_rng,
                    )
                    .map_err(divergence)?;
                    if !loss.is_finite() {
                        return Err(RunError::Diverged(format!(
                            "non-finite value loss at step {}",
                            online.params.step
                        )));
                    }
                    losses.push(loss);
                }
            }
        }

        let extras = her_relabel(
            &transitions,
            hcfg.her_k,
            &rcfg,
            &mut |a, b| oracle.distance(a, b),
            &mut her_rng,
        );
        for t in &extras {
            buffer.push(t);
        }

        curve.push(HighCurveRow {
            episode: ep,
            grad_step: online.params.step,
            env_steps,
            decisions: transitions.len(),
            ep_reward,
            steps_to_goal: if arrived { env_steps } else { sim.horizon },
            epsilon: last_eps,
            mean_loss: if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
        });
        if let Some(dir) = ck_dir {
            if (ep + 1) % cfg.dqn.checkpoint_every.max(1) == 0 {
                save_high(dir, &online)?;
            }
        }
    }
    Ok(HighTrainResult {
        online,
        target,
        curve,
    })
}

fn divergence(e: TensorError) -> RunError {
    match e {
        TensorError::BadGradient(name) => {
            RunError::Diverged(format!("non-finite gradient in {}", name))
        }
        other => RunError::Diverged(other.to_string()),
    }
}

/// Per-update training curve row for the motion policy.
#[derive(Debug, Clone)]
pub struct LowCurveRow {
    pub update: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub mean_cost: f64,
    pub kl: f64,
    pub surrogate_improve: f64,
    /// Remaining cost budget (negative when the constraint is violated).
    pub slack: f64,
    pub recovery: bool,
    pub accepted: bool,
    pub value_loss: f64,
    pub cost_value_loss: f64,
}

pub struct LowTrainResult {
    pub nets: LowNets,
    pub curve: Vec<LowCurveRow>,
}

/// One randomized training arena: world, start pose, sub-goal point.
struct Arena {
    spec: ScenarioSpec,
    oracle: PlanningOracle,
}

/// Sample an arena whose sub-goal is reachable from the start. Difficulty
/// in [0, 1] scales obstacle count, sub-goal distance, and crowd presence.
fn random_arena(rng: &mut ChaCha12Rng, difficulty: f64) -> Arena {
    loop {
        let mut world = WorldModel::empty(8.0, 8.0);
        let n_circles = (rng.gen_range(0.0..=4.0) * difficulty).round() as usize;
        for _ in 0..n_circles {
            world.circles.push(Circle {
                center: Vec2 {
                    x: rng.gen_range(0.8..7.2),
                    y: rng.gen_range(0.8..7.2),
                },
                radius: rng.gen_range(0.2..0.5),
            });
        }
        if difficulty > 0.5 && rng.gen::<f64>() < 0.4 {
            let x = rng.gen_range(2.0..6.0);
            let y = rng.gen_range(2.0..6.0);
            let len = rng.gen_range(1.0..2.5);
            let horizontal = rng.gen::<bool>();
            let (bx, by) = if horizontal { (len, 0.0) } else { (0.0, len) };
            world.walls.push(crate::geom::Segment {
                a: Vec2 { x, y },
                b: Vec2 {
                    x: x + bx,
                    y: y + by,
                },
            });
        }

        let free = |w: &WorldModel, p: Vec2, clear: f64| {
            w.point_in_free_space(p) && w.static_clearance(p) > clear
        };
        let mut start = None;
        for _ in 0..50 {
            let p = Vec2 {
                x: rng.gen_range(0.6..7.4),
                y: rng.gen_range(0.6..7.4),
            };
            if free(&world, p, DEFAULT_ROBOT_RADIUS + 0.15) {
                start = Some(p);
                break;
            }
        }
        let Some(start) = start else { continue };
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let oracle = PlanningOracle::new(&world);

        let d_max = 1.2 + 3.6 * difficulty;
        let mut goal = None;
        for _ in 0..50 {
            let d = rng.gen_range(0.8..d_max.max(1.0));
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let p = Vec2 {
                x: start.x + d * a.cos(),
                y: start.y + d * a.sin(),
            };
            if free(&world, p, 0.3) && oracle.distance(start, p).is_some() {
                goal = Some(p);
                break;
            }
        }
        let Some(goal) = goal else { continue };

        let mut peds = Vec::new();
        if rng.gen::<f64>() < 0.5 * difficulty {
            for _ in 0..rng.gen_range(1..=2) {
                let mut pts = Vec::new();
                for _ in 0..40 {
                    let p = Vec2 {
                        x: rng.gen_range(0.6..7.4),
                        y: rng.gen_range(0.6..7.4),
                    };
                    if free(&world, p, 0.3) {
                        pts.push(p);
                        if pts.len() == 2 {
                            break;
                        }
                    }
                }
                if pts.len() == 2 {
                    peds.push(PedestrianSpec {
                        start: pts[0],
                        goal: pts[1],
                        desired_speed: rng.gen_range(0.5..1.2),
                        waypoints: vec![pts[0]],
                    });
                }
            }
        }

        return Arena {
            spec: ScenarioSpec {
                world,
                robot_start: Pose::new(start.x, start.y, heading),
                goal,
                pedestrians: peds,
                horizon_steps: LOW_SEGMENT_CAP,
                dt: crate::world::DEFAULT_DT,
                seed: 0,
            },
            oracle,
        };
    }
}

/// Roll one sub-goal pursuit episode with the stochastic policy and append
/// it to the batch. Contacts add cost but never end the episode; only
/// arrival or the segment cap do.
fn collect_episode(
    nets: &LowNets,
    arena: &Arena,
    rcfg: &crate::reward::RewardConfig,
    sfm: &crate::ped::SfmParams,
    batch: &mut RolloutBatch,
    rng: &mut ChaCha12Rng,
) {
    let mut sim = Sim::from_scenario(&arena.spec, sfm, None);
    let goal = arena.spec.goal;
    let mut hist: Option<ObsHistory> = None;
    let euclid = |p: Vec2| p.dist(goal);
    let mut d_prev = arena
        .oracle
        .distance(sim.robot.pos, goal)
        .unwrap_or_else(|| euclid(sim.robot.pos));

    let mut frames = Vec::new();
    let mut actions = Vec::new();
    let mut log_probs = Vec::new();
    let mut rewards = Vec::new();
    let mut costs = Vec::new();
    let mut dones = Vec::new();

    for step in 0..LOW_SEGMENT_CAP {
        let scan = sim.scan();
        let olist = encode_obstacles(&minpool(&scan), SAFETY_DISTANCE);
        let subgoal_polar = sim.robot.pose().to_polar(goal);
        let h = build_obs(&olist, subgoal_polar, sim.robot.v, sim.robot.omega, hist.as_ref());
        let a = act(&nets.pi, &h, true, rng);
        let contact = sim.apply(a.cmd, sfm);
        let d_t = sim.robot.pos.dist(goal);
        let d_now = arena
            .oracle
            .distance(sim.robot.pos, goal)
            .unwrap_or_else(|| euclid(sim.robot.pos));
        let r = low_reward(d_t, d_prev, d_now, rcfg);
        d_prev = d_now;
        let arrived = d_t < rcfg.d_limit;
        frames.push(h.flat());
        actions.push(a.pre_squash);
        log_probs.push(a.log_prob);
        rewards.push(r);
        costs.push(if contact { 1.0 } else { 0.0 });
        dones.push(arrived || step + 1 == LOW_SEGMENT_CAP);
        hist = Some(h);
        if arrived {
            break;
        }
    }

    // Batched critic evaluation over the episode's encoded features.
    let feats: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            let mut row = Vec::with_capacity(HIST_SLOTS * ENC_WIDTH);
            for chunk in f.chunks(FRAME_WIDTH) {
                row.extend(nets.pi.encode_frame(chunk));
            }
            row
        })
        .collect();
    let values = nets.vf.predict(&feats);
    let cost_values = nets.cf.predict(&feats);

    batch.frames.extend(frames);
    batch.actions.extend(actions);
    batch.log_probs.extend(log_probs);
    batch.rewards.extend(rewards);
    batch.costs.extend(costs);
    batch.values.extend(values);
    batch.cost_values.extend(cost_values);
    batch.dones.extend(dones);
}

/// Train the motion policy with constrained updates on randomized arenas.
/// `start_update` continues curve numbering when resuming.
pub fn train_low(
    cfg: &RunConfig,
    mut nets: LowNets,
    start_update: usize,
    ck_dir: Option<&Path>,
) -> Result<LowTrainResult, RunError> {
    let rcfg = cfg.reward_config();
    let ccfg = cfg.cpo_config();
    let vcfg = cfg.value_fit_config();
    let sfm = crate::ped::SfmParams::default();
    let mut arena_rng = crate::rng::stream(cfg.run.seed, 70);
    let mut act_rng = crate::rng::stream(cfg.run.seed, 71);
    let mut fit_rng = crate::rng::stream(cfg.run.seed, 72);
    let mut curve = Vec::with_capacity(cfg.cpo.updates);
    let mut env_steps = 0usize;

    for u in start_update..start_update + cfg.cpo.updates {
        let difficulty =
            ((u as f64 + 1.0) / (0.6 * (start_update + cfg.cpo.updates).max(1) as f64)).min(1.0);
        let mut batch = RolloutBatch::default();
        while batch.len() < cfg.cpo.steps_per_update {
            let arena = random_arena(&mut arena_rng, difficulty);
            collect_episode(&nets, &arena, &rcfg, &sfm, &mut batch, &mut act_rng);
        }
        env_steps += batch.len();
        let report = crate::low_policy::cpo_update(&mut nets, &batch, &ccfg, &vcfg, &mut fit_rng)
            .map_err(divergence)?;
        let row = LowCurveRow {
            update: u,
            env_steps,
            mean_reward: report.mean_reward,
            mean_cost: report.mean_cost,
            kl: report.cpo.kl,
            surrogate_improve: report.cpo.surrogate_improve,
            slack: ccfg.d_cost - report.mean_cost,
            recovery: report.cpo.recovery,
            accepted: report.cpo.accepted,
            value_loss: report.value_loss,
            cost_value_loss: report.cost_value_loss,
        };
        if !(row.kl.is_finite() && row.mean_reward.is_finite() && row.value_loss.is_finite()) {
            return Err(RunError::Diverged(format!(
                "non-finite diagnostics at update {}",
                u
            )));
        }
        curve.push(row);
        if let Some(dir) = ck_dir {
            if (u + 1 - start_update) % cfg.cpo.checkpoint_every.max(1) == 0 {
                save_low(dir, &nets)?;
            }
        }
    }
    Ok(LowTrainResult { nets, curve })
}

/// Serialize training curves as CSV.
pub fn high_curve_csv(rows: &[HighCurveRow]) -> String {
    let mut s = String::from(
        "episode,grad_step,env_steps,decisions,ep_reward,steps_to_goal,epsilon,mean_loss\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.episode,
            r.grad_step,
            r.env_steps,
            r.decisions,
            r.ep_reward,
            r.steps_to_goal,
            r.epsilon,
            r.mean_loss
        ));
    }
    s
}

/// Serialize motion-policy diagnostics as CSV, one row per update.
pub fn low_curve_csv(rows: &[LowCurveRow]) -> String {
    let mut s = String::from(
        "update,env_steps,mean_reward,mean_cost,kl,surrogate_improve,slack,recovery,accepted,value_loss,cost_value_loss\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.update,
            r.env_steps,
            r.mean_reward,
            r.mean_cost,
            r.kl,
            r.surrogate_improve,
            r.slack,
            r.recovery as u8,
            r.accepted as u8,
            r.value_loss,
            r.cost_value_loss
        ));
    }
    s
}

/// File-level driver for sub-goal training: resume when the checkpoint
/// exists, then write the refreshed checkpoint and curves.
pub fn run_train_high(cfg: &RunConfig) -> Result<HighTrainResult, RunError> {
    cfg.validate_scenario_path()?;
    let text = std::fs::read_to_string(&cfg.run.scenario)?;
    let spec = crate::world::load_scenario(&text)?;
    let ck = Path::new(&cfg.run.high_checkpoint);
    let nets = if !cfg.run.high_checkpoint.is_empty() && ck.exists() {
        let online = crate::runner::load_high_checkpoint(ck)?;
        let target = online.clone();
        (online, target)
    } else {
        init_nets(cfg.run.seed)
    };
    let dir = Path::new(&cfg.run.out_dir);
    std::fs::create_dir_all(dir)?;
    match train_high(cfg, &spec, nets, Some(dir)) {
        Ok(res) => {
            save_high(dir, &res.online)?;
            std::fs::write(
                dir.join("curves_high.csv"),
                stamped(&cfg.hash(), &high_curve_csv(&res.curve)),
            )?;
            Ok(res)
        }
        Err(e) => dump_divergence(dir, e),
    }
}

/// Prefix a CSV body with a comment line naming the producing config.
fn stamped(hash: &str, body: &str) -> String {
    format!("# config_hash {}\n{}", hash, body)
}

/// On divergence, leave a diagnostic file next to the other outputs.
fn dump_divergence<T>(dir: &Path, e: RunError) -> Result<T, RunError> {
    if let RunError::Diverged(msg) = &e {
        let _ = std::fs::write(dir.join("diverged.txt"), msg);
    }
    Err(e)
}

/// File-level driver for motion-policy training with resume and curves.
pub fn run_train_low(cfg: &RunConfig) -> Result<LowTrainResult, RunError> {
    let ck = Path::new(&cfg.run.low_checkpoint);
    let (nets, start_update) = if !cfg.run.low_checkpoint.is_empty() && ck.exists() {
        let nets = crate::runner::load_low_checkpoint(ck)?;
        // The reward critic's optimizer step count recovers how many
        // updates the loaded run already performed.
        let done = (nets.vf.params.step / cfg.cpo.value_iters.max(1) as u64) as usize;
        (nets, done)
    } else {
        (LowNets::new(cfg.run.seed, cfg.cpo.log_std_init), 0)
    };
    let dir = Path::new(&cfg.run.out_dir);
    std::fs::create_dir_all(dir)?;
    match train_low(cfg, nets, start_update, Some(dir)) {
        Ok(res) => {
            save_low(dir, &res.nets)?;
            std::fs::write(
                dir.join("curves_low.csv"),
                stamped(&cfg.hash(), &low_curve_csv(&res.curve)),
            )?;
            Ok(res)
        }
        Err(e) => dump_divergence(dir, e),
    }
}

/// Mean collision events per rollout batch, for contact bookkeeping tests.
pub fn batch_contact_events(batch: &RolloutBatch) -> u32 {
    rising_edges(batch.costs.iter().map(|&c| c > 0.5))
}

/// Advantage tail used by a few tests; thin wrapper so the estimator stays
/// private to the policy module.
pub fn batch_advantages(batch: &RolloutBatch, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let est = gae(batch, gamma, lam);
    (est.adv, est.cost_adv)
}
