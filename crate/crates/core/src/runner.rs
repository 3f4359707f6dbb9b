//! Deployment composition loop: congestion-triggered sub-goal selection on
//! top of the motion policy, plus the batch evaluation driver that writes
//! per-episode logs and the aggregate metrics report.

use crate::config::{ConfigError, RunConfig};
use crate::congestion::{
    action_mask, should_update, SectorGrid, SubGoal, UpdateState, SAFETY_DISTANCE,
};
use crate::geom::{Pose, Vec2};
use crate::high_policy::{masked_argmax, QNet};
use crate::lidar::{scan, LidarScan};
use crate::low_policy::{act, build_obs, safety_filter, ObsHistory, PedTrack, PolicyNet};
use crate::metrics::{aggregate, finalize_episode, EpisodeLog, MetricsReport, StepRow};
use crate::ped::{step_pedestrians, PedestrianState, SfmParams};
use crate::perception::{build_lomap, encode_obstacles, minpool, ObstacleList, ObstacleMapStack};
use crate::planning::PlanningOracle;
use crate::tensor::TensorError;
use crate::world::{
    collision_check, step_robot, validate_scenario, KinematicLimits, RobotState, ScenarioSpec,
    WorldError,
};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario: {0}")]
    Scenario(#[from] WorldError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: {0}")]
    Diverged(String),
}

/// Episode-level knobs shared by evaluation and training rollouts.
#[derive(Debug, Clone)]
pub struct EpisodeParams {
    pub d_limit: f64,
    pub safety_enabled: bool,
    pub safety_horizon: f64,
    pub sfm: SfmParams,
    pub grid: SectorGrid,
}

impl EpisodeParams {
    pub fn from_config(cfg: &RunConfig) -> EpisodeParams {
        EpisodeParams {
            d_limit: cfg.reward.d_limit,
            safety_enabled: cfg.safety.enabled,
            safety_horizon: cfg.safety.horizon,
            sfm: SfmParams::default(),
            grid: SectorGrid::default(),
        }
    }
}

/// How the sub-goal is produced each update.
pub enum Guidance<'a> {
    /// Greedy sector selection from the trained value network.
    SubGoalNet(&'a QNet),
    /// Flat baseline: the final goal is fed straight to the motion policy.
    FinalGoal,
}

/// Low-level command source driven once per control step.
pub trait LowController {
    fn reset(&mut self);
    fn command(&mut self, olist: &ObstacleList, subgoal_polar: (f64, f64), v: f64, omega: f64)
        -> (f64, f64);
}

/// Trained motion policy run deterministically.
pub struct PolicyController<'a> {
    pub net: &'a PolicyNet,
    hist: Option<ObsHistory>,
    rng: ChaCha12Rng,
}

impl<'a> PolicyController<'a> {
    pub fn new(net: &'a PolicyNet) -> Self {
        PolicyController {
            net,
            hist: None,
            rng: crate::rng::stream(0, 0),
        }
    }
}

impl<'a> LowController for PolicyController<'a> {
    fn reset(&mut self) {
        self.hist = None;
    }

    fn command(
        &mut self,
        olist: &ObstacleList,
        subgoal_polar: (f64, f64),
        v: f64,
        omega: f64,
    ) -> (f64, f64) {
        let h = build_obs(olist, subgoal_polar, v, omega, self.hist.as_ref());
        let a = act(self.net, &h, false, &mut self.rng);
        self.hist = Some(h);
        a.cmd
    }
}

/// Hand-written pursuit controller used while training the sub-goal level:
/// turn toward the sub-goal, drive when roughly facing it, stop close by.
pub struct ScriptedController {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for ScriptedController {
    fn default() -> Self {
        ScriptedController {
            v_max: crate::world::DEFAULT_V_MAX,
            omega_max: crate::world::DEFAULT_OMEGA_MAX,
        }
    }
}

impl LowController for ScriptedController {
    fn reset(&mut self) {}

    fn command(
        &mut self,
        olist: &ObstacleList,
        subgoal_polar: (f64, f64),
        _v: f64,
        _omega: f64,
    ) -> (f64, f64) {
        let (d, theta) = subgoal_polar;
        let omega = (2.5 * theta).clamp(-self.omega_max, self.omega_max);
        let mut v = self.v_max * theta.cos().max(0.0);
        // Taper on final approach and near frontal obstacles.
        v = v.min(self.v_max * (d / 0.5));
        let ahead = olist
            .entries
            .iter()
            .filter(|(_, th)| th.abs() < 0.5)
            .map(|(od, _)| *od)
            .fold(f64::INFINITY, f64::min);
        if ahead < 0.6 {
            v = v.min(self.v_max * ((ahead - 0.25) / 0.35).max(0.0));
        }
        (v, omega)
    }
}

/// Mutable simulation state advanced once per control step.
pub struct Sim {
    pub world: crate::world::WorldModel,
    pub robot: RobotState,
    pub peds: Vec<PedestrianState>,
    pub goal: Vec2,
    pub dt: f64,
    pub horizon: usize,
    pub limits: KinematicLimits,
    pub t: f64,
}

impl Sim {
    pub fn from_scenario(spec: &ScenarioSpec, sfm: &SfmParams, speed_override: Option<f64>) -> Sim {
        let peds = spec
            .pedestrians
            .iter()
            .map(|p| {
                let mut p = p.clone();
                if let Some(s) = speed_override {
                    p.desired_speed = s;
                }
                PedestrianState::from_spec(&p, sfm)
            })
            .collect();
        Sim {
            world: spec.world.clone(),
            robot: RobotState::at(spec.robot_start, crate::world::DEFAULT_ROBOT_RADIUS),
            peds,
            goal: spec.goal,
            dt: spec.dt,
            horizon: spec.horizon_steps,
            limits: KinematicLimits::default(),
            t: 0.0,
        }
    }

    pub fn scan(&self) -> LidarScan {
        scan(&self.world, &self.peds, self.robot.pose(), self.t)
    }

    /// Apply a command, advance pedestrians, and report contacts at the new
    /// state.
    pub fn apply(&mut self, cmd: (f64, f64), sfm: &SfmParams) -> bool {
        self.robot = step_robot(&self.robot, cmd, self.dt, &self.limits);
        self.peds = step_pedestrians(&self.peds, &self.world, &self.robot, sfm, self.dt);
        self.t += self.dt;
        collision_check(&self.world, &self.robot, &self.peds).in_contact
    }

    /// Observed pedestrian tracks in the robot frame.
    pub fn ped_tracks(&self) -> Vec<PedTrack> {
        let pose = self.robot.pose();
        self.peds
            .iter()
            .map(|p| {
                let rel = p.pos - pose.pos;
                PedTrack {
                    rel_pos: rel.rotated(-pose.heading),
                    rel_vel: p.vel.rotated(-pose.heading),
                    radius: p.radius,
                }
            })
            .collect()
    }
}

/// Everything the caller needs to finalize or relabel one episode.
pub struct EpisodeOutcome {
    pub rows: Vec<StepRow>,
    pub start: Vec2,
    pub reached: bool,
    /// Sub-goal adoption times and world points, in order.
    pub subgoal_events: Vec<(f64, Vec2)>,
}

fn select_subgoal(guidance: &Guidance, stack: &ObstacleMapStack, pose: &Pose, goal: Vec2, grid: &SectorGrid) -> SubGoal {
    match guidance {
        Guidance::SubGoalNet(net) => {
            let mask = action_mask(stack.newest(), grid);
            let obs = crate::high_policy::HighObs {
                stack: stack.clone(),
                goal_polar: pose.to_polar(goal),
            };
            let q = net.q_values(&obs);
            let idx = masked_argmax(&q, &mask);
            SubGoal::from_sector(grid, idx, pose)
        }
        Guidance::FinalGoal => {
            let (d, theta) = pose.to_polar(goal);
            SubGoal {
                d_sg: d,
                theta_sg: theta,
                world_point: goal,
            }
        }
    }
}

/// Run one episode of the composed stack. Per control step: scan, refresh
/// congestion and the update threshold, renew the sub-goal when triggered,
/// drive the controller against the frozen sub-goal point, filter, step.
/// No planner is consulted anywhere on this path.
pub fn run_episode(
    spec: &ScenarioSpec,
    params: &EpisodeParams,
    guidance: &Guidance,
    low: &mut dyn LowController,
    speed_override: Option<f64>,
) -> EpisodeOutcome {
    let mut sim = Sim::from_scenario(spec, &params.sfm, speed_override);
    let start = sim.robot.pos;
    let mut update = UpdateState::default();
    let mut stack: Option<ObstacleMapStack> = None;
    let mut rows = Vec::with_capacity(sim.horizon);
    let mut events = Vec::new();
    let mut reached = false;
    low.reset();

    for _ in 0..sim.horizon {
        let scan = sim.scan();
        update.observe(&scan);
        let lomap = build_lomap(&scan);
        stack = Some(match stack {
            Some(s) => s.push(lomap),
            None => ObstacleMapStack::bootstrap(lomap),
        });
        let pose = sim.robot.pose();
        if should_update(&update, pose.pos, sim.t) {
            let sg = select_subgoal(guidance, stack.as_ref().unwrap(), &pose, sim.goal, &params.grid);
            events.push((sim.t, sg.world_point));
            update.adopt(sg, sim.t);
        }
        let frozen = update.current.as_ref().expect("sub-goal set").world_point;
        let subgoal_polar = pose.to_polar(frozen);

        let olist = encode_obstacles(&minpool(&scan), SAFETY_DISTANCE);
        let mut cmd = low.command(&olist, subgoal_polar, sim.robot.v, sim.robot.omega);
        if params.safety_enabled {
            cmd = safety_filter(cmd, &olist, &sim.ped_tracks(), params.safety_horizon);
        }
        let contact = sim.apply(cmd, &params.sfm);
        rows.push(StepRow {
            t: sim.t,
            x: sim.robot.pos.x,
            y: sim.robot.pos.y,
            theta: sim.robot.heading,
            v: sim.robot.v,
            omega: sim.robot.omega,
            subgoal_x: frozen.x,
            subgoal_y: frozen.y,
            congestion: update.c_t,
            threshold: update.d_u,
            collision: contact,
        });
        if sim.robot.pos.dist(sim.goal) < params.d_limit {
            reached = true;
            break;
        }
    }
    EpisodeOutcome {
        rows,
        start,
        reached,
        subgoal_events: events,
    }
}

/// Evaluation run product: aggregate report, per-episode logs, and the
/// runtime planner-counter reading that must stay at zero.
pub struct EvalOutput {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeLog>,
    pub runtime_oracle_calls: u64,
    pub config_hash: String,
}

/// Jitter a start pose inside free space so episodes differ.
pub fn jitter_pose(
    world: &crate::world::WorldModel,
    base: Pose,
    radius: f64,
    rng: &mut ChaCha12Rng,
) -> Pose {
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    for _ in 0..20 {
        let r = radius * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let p = Vec2 {
            x: base.pos.x + r * a.cos(),
            y: base.pos.y + r * a.sin(),
        };
        if world.point_in_free_space(p)
            && world.static_clearance(p) > crate::world::DEFAULT_ROBOT_RADIUS + 0.05
        {
            return Pose::new(p.x, p.y, heading);
        }
    }
    Pose::new(base.pos.x, base.pos.y, heading)
}

/// Per-episode start randomization radius, meters.
pub const START_JITTER_RADIUS: f64 = 0.5;

/// Evaluate a scenario for a number of episodes with derived per-episode
/// seeds. The runtime loop holds a counted planner handle but never calls
/// it; the reference planner used for metric denominators is separate.
pub fn eval_scenario(
    spec: &ScenarioSpec,
    cfg: &RunConfig,
    guidance: &Guidance,
    low: &PolicyNet,
    episodes: usize,
) -> Result<EvalOutput, RunError> {
    validate_scenario(spec)?;
    let params = EpisodeParams::from_config(cfg);
    let runtime_oracle = PlanningOracle::new(&spec.world);
    let metrics_oracle =
        PlanningOracle::with_inflation(&spec.world, crate::world::DEFAULT_ROBOT_RADIUS);
    let mut logs = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut ep_rng = crate::rng::stream(cfg.run.seed, 1_000 + ep as u64);
        let mut ep_spec = spec.clone();
        ep_spec.robot_start = jitter_pose(
            &spec.world,
            spec.robot_start,
            START_JITTER_RADIUS,
            &mut ep_rng,
        );
        let mut controller = PolicyController::new(low);
        let out = run_episode(
            &ep_spec,
            &params,
            guidance,
            &mut controller,
            cfg.sfm.desired_speed_override,
        );
        logs.push(finalize_episode(
            out.start,
            out.rows,
            spec.dt,
            spec.goal,
            params.d_limit,
            crate::world::DEFAULT_V_MAX,
            &metrics_oracle,
        ));
    }
    let report = aggregate(&logs);
    Ok(EvalOutput {
        report,
        episodes: logs,
        runtime_oracle_calls: runtime_oracle.call_count(),
        config_hash: cfg.hash(),
    })
}

/// File-writing wrapper: loads the scenario and checkpoints named by the
/// config, evaluates, and writes per-episode CSVs plus the aggregate JSON.
pub fn run_eval(cfg: &RunConfig, episodes: usize) -> Result<EvalOutput, RunError> {
    cfg.validate_scenario_path()?;
    let text = std::fs::read_to_string(&cfg.run.scenario)?;
    let spec = crate::world::load_scenario(&text)?;
    let low = load_low_checkpoint(Path::new(&cfg.run.low_checkpoint))?;
    let high = if cfg.run.high_checkpoint.is_empty() {
        // Flat mode: the motion policy pursues the final goal directly.
        None
    } else {
        Some(load_high_checkpoint(Path::new(&cfg.run.high_checkpoint))?)
    };
    let guidance = match &high {
        Some(h) => Guidance::SubGoalNet(h),
        None => Guidance::FinalGoal,
    };
    let out = eval_scenario(&spec, cfg, &guidance, &low.pi, episodes)?;
    write_eval_files(cfg, &out)?;
    Ok(out)
}

/// Write per-episode CSVs and the aggregate JSON into the output directory.
pub fn write_eval_files(cfg: &RunConfig, out: &EvalOutput) -> Result<(), RunError> {
    let dir = Path::new(&cfg.run.out_dir);
    std::fs::create_dir_all(dir)?;
    for (i, log) in out.episodes.iter().enumerate() {
        std::fs::write(
            dir.join(format!("episode_{:03}.csv", i)),
            crate::metrics::episode_csv(log),
        )?;
    }
    std::fs::write(
        dir.join("metrics.json"),
        out.report.to_json(&out.config_hash),
    )?;
    Ok(())
}

/// Load the sub-goal value network from a checkpoint file.
pub fn load_high_checkpoint(path: &Path) -> Result<QNet, RunError> {
    let mut f = std::fs::File::open(path)?;
    let params = crate::tensor::ParamSet::load(&mut f)?;
    Ok(QNet { params })
}

/// Load the motion policy bundle from a checkpoint file.
pub fn load_low_checkpoint(path: &Path) -> Result<crate::low_policy::LowNets, RunError> {
    let mut f = std::fs::File::open(path)?;
    Ok(crate::low_policy::LowNets::load(&mut f)?)
}
