//! Sub-goal selection policy: dueling Q-network over local map stacks,
//! masked epsilon-greedy action choice, double-DQN targets, hindsight
//! goal relabeling, and the replay-driven training step.

use crate::congestion::{action_mask, ActionMask, SectorGrid};
use crate::geom::{Pose, Vec2};
use crate::perception::{pack_cells, unpack_cells, CellState, LocalObstacleMap, MAP_HALF, MAP_SIZE, ObstacleMapStack};
use crate::reward::{high_reward, RewardConfig};
use crate::rng;
use crate::tensor::{init_uniform, ParamSet, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Number of discrete sub-goal actions (15 rings by 15 wedges).
pub const N_ACTIONS: usize = 225;
/// Frames per observation stack.
pub const N_FRAMES: usize = 4;

/// Observation for the sub-goal policy: map history plus the final goal in
/// robot-relative polar coordinates (distance m, bearing rad).
#[derive(Debug, Clone)]
pub struct HighObs {
    pub stack: ObstacleMapStack,
    pub goal_polar: (f64, f64),
}

/// One sub-goal decision and its outcome over the following segment.
#[derive(Debug, Clone)]
pub struct HighTransition {
    pub obs: HighObs,
    pub action: usize,
    pub reward: f64,
    pub next_obs: HighObs,
    pub done: bool,
    /// Robot position when the segment ended.
    pub achieved_world: Vec2,
    pub goal_world: Vec2,
    /// Robot pose when the decision was taken; needed to recompute
    /// goal bearings under substituted goals.
    pub pose_at_obs: Pose,
    /// Robot pose when the segment ended.
    pub pose_at_next: Pose,
    /// True when the chosen sector was unreachable or otherwise rejected.
    pub invalid_subgoal: bool,
}

/// Training knobs for the sub-goal policy.
#[derive(Debug, Clone)]
pub struct HighConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub target_sync: u64,
    pub her_k: usize,
}

impl Default for HighConfig {
    fn default() -> Self {
        HighConfig {
            gamma: 0.99,
            lr: 1e-4,
            batch_size: 64,
            buffer_capacity: 100_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 30_000,
            target_sync: 1000,
            her_k: 4,
        }
    }
}

impl HighConfig {
    /// Linear exploration schedule clamped at the end value.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.eps_decay_steps == 0 || step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.eps_decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

fn cell_value(c: CellState) -> f64 {
    match c {
        CellState::Free => 0.0,
        CellState::Occupied => 1.0,
        CellState::Unknown => 0.5,
    }
}

/// Flatten a map stack into network input, one channel per frame
/// (oldest first), free 0, unknown 0.5, occupied 1.
pub fn stack_to_input(stack: &ObstacleMapStack) -> Vec<f64> {
    let mut out = Vec::with_capacity(N_FRAMES * MAP_SIZE * MAP_SIZE);
    for f in &stack.frames {
        out.extend(f.cells().iter().map(|&c| cell_value(c)));
    }
    out
}

/// Scale goal polar coordinates into network-friendly ranges.
pub fn goal_features(goal_polar: (f64, f64)) -> [f64; 2] {
    [goal_polar.0 / MAP_HALF, goal_polar.1 / std::f64::consts::PI]
}

const CONV1: (usize, usize, usize) = (16, 5, 2);
const CONV2: (usize, usize, usize) = (32, 3, 2);
const CONV3: (usize, usize, usize) = (32, 3, 2);
const FC1_OUT: usize = 256;
const GOAL_OUT: usize = 64;
const FC2_OUT: usize = 256;

fn conv_out(n: usize, k: usize, s: usize) -> usize {
    (n - k) / s + 1
}

fn flat_dim() -> usize {
    let a = conv_out(MAP_SIZE, CONV1.1, CONV1.2);
    let b = conv_out(a, CONV2.1, CONV2.2);
    let c = conv_out(b, CONV3.1, CONV3.2);
    CONV3.0 * c * c
}

/// Dueling Q-network: three strided conv layers over the map stack, a
/// small goal encoder, shared trunk, then value and advantage heads.
#[derive(Debug, Clone)]
pub struct QNet {
    pub params: ParamSet,
}

impl QNet {
    pub fn new(rng: &mut ChaCha12Rng) -> QNet {
        let mut p = ParamSet::new();
        let mut conv = |p: &mut ParamSet, name: &str, f: usize, c: usize, k: usize| {
            let fan = c * k * k;
            p.insert(&format!("{}_w", name), init_uniform(rng, &[f, c, k, k], fan));
            p.insert(&format!("{}_b", name), init_uniform(rng, &[f], fan));
        };
        conv(&mut p, "conv1", CONV1.0, N_FRAMES, CONV1.1);
        conv(&mut p, "conv2", CONV2.0, CONV1.0, CONV2.1);
        conv(&mut p, "conv3", CONV3.0, CONV2.0, CONV3.1);
        let mut fc = |p: &mut ParamSet, name: &str, i: usize, o: usize| {
            p.insert(&format!("{}_w", name), init_uniform(rng, &[i, o], i));
            p.insert(&format!("{}_b", name), init_uniform(rng, &[o], i));
        };
        fc(&mut p, "fc1", flat_dim(), FC1_OUT);
        fc(&mut p, "goal", 2, GOAL_OUT);
        fc(&mut p, "fc2", FC1_OUT + GOAL_OUT, FC2_OUT);
        fc(&mut p, "val", FC2_OUT, 1);
        fc(&mut p, "adv", FC2_OUT, N_ACTIONS);
        QNet { params: p }
    }

    /// Build the forward graph for a batch; returns the Q node and the
    /// tape handles of every parameter for gradient readout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        maps: Tensor,
        goals: Tensor,
    ) -> (Var, Vec<(String, Var)>) {
        let batch = maps.shape[0];
        assert_eq!(maps.shape, vec![batch, N_FRAMES, MAP_SIZE, MAP_SIZE]);
        assert_eq!(goals.shape, vec![batch, 2]);
        let mut handles = Vec::new();
        let pv = |tape: &mut Tape, handles: &mut Vec<(String, Var)>, name: &str| {
            let v = tape.input(self.params.get(name).clone());
            handles.push((name.to_string(), v));
            v
        };
        let x = tape.input(maps);
        let g = tape.input(goals);
        let (c1w, c1b) = (pv(tape, &mut handles, "conv1_w"), pv(tape, &mut handles, "conv1_b"));
        let (c2w, c2b) = (pv(tape, &mut handles, "conv2_w"), pv(tape, &mut handles, "conv2_b"));
        let (c3w, c3b) = (pv(tape, &mut handles, "conv3_w"), pv(tape, &mut handles, "conv3_b"));
        let (f1w, f1b) = (pv(tape, &mut handles, "fc1_w"), pv(tape, &mut handles, "fc1_b"));
        let (gw, gb) = (pv(tape, &mut handles, "goal_w"), pv(tape, &mut handles, "goal_b"));
        let (f2w, f2b) = (pv(tape, &mut handles, "fc2_w"), pv(tape, &mut handles, "fc2_b"));
        let (vw, vb) = (pv(tape, &mut handles, "val_w"), pv(tape, &mut handles, "val_b"));
        let (aw, ab) = (pv(tape, &mut handles, "adv_w"), pv(tape, &mut handles, "adv_b"));
        let h = tape.conv2d(x, c1w, c1b, CONV1.2);
        let h = tape.relu(h);
        let h = tape.conv2d(h, c2w, c2b, CONV2.2);
        let h = tape.relu(h);
        let h = tape.conv2d(h, c3w, c3b, CONV3.2);
        let h = tape.relu(h);
        let h = tape.reshape(h, &[batch, flat_dim()]);
        let h = tape.affine(h, f1w, f1b);
        let h = tape.relu(h);
        let ge = tape.affine(g, gw, gb);
        let ge = tape.relu(ge);
        let cat = tape.concat(&[h, ge]);
        let t = tape.affine(cat, f2w, f2b);
        let t = tape.relu(t);
        let v = tape.affine(t, vw, vb);
        let a = tape.affine(t, aw, ab);
        let q = tape.dueling_aggregate(v, a);
        (q, handles)
    }

    /// Q-values for a batch of observations, no gradients kept.
    pub fn q_batch(&self, obs: &[&HighObs]) -> Vec<Vec<f64>> {
        let batch = obs.len();
        let mut maps = Vec::with_capacity(batch * N_FRAMES * MAP_SIZE * MAP_SIZE);
        let mut goals = Vec::with_capacity(batch * 2);
        for o in obs {
            maps.extend(stack_to_input(&o.stack));
            goals.extend(goal_features(o.goal_polar));
        }
        let mut tape = Tape::new();
        let (q, _) = self.forward(
            &mut tape,
            Tensor::from_vec(&[batch, N_FRAMES, MAP_SIZE, MAP_SIZE], maps),
            Tensor::from_vec(&[batch, 2], goals),
        );
        tape.value(q)
            .data
            .chunks(N_ACTIONS)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Q-values for one observation.
    pub fn q_values(&self, obs: &HighObs) -> Vec<f64> {
        self.q_batch(&[obs]).pop().unwrap()
    }
}

/// Masked epsilon-greedy selection; greedy ties break to the lowest index.
pub fn select_action(q: &[f64], mask: &ActionMask, eps: f64, rng: &mut ChaCha12Rng) -> usize {
    assert_eq!(q.len(), mask.allowed.len());
    let allowed: Vec<usize> = (0..q.len()).filter(|&i| mask.allowed[i]).collect();
    assert!(!allowed.is_empty(), "mask allows no action");
    if rng.gen::<f64>() < eps {
        return allowed[rng.gen_range(0..allowed.len())];
    }
    let mut best = allowed[0];
    for &i in &allowed[1..] {
        if q[i] > q[best] {
            best = i;
        }
    }
    best
}

/// Index of the best-valued allowed action.
pub fn masked_argmax(q: &[f64], mask: &ActionMask) -> usize {
    let mut best = None;
    for (i, &ok) in mask.allowed.iter().enumerate() {
        if ok && best.map_or(true, |b: usize| q[i] > q[b]) {
            best = Some(i);
        }
    }
    best.expect("mask allows no action")
}

/// Pure double-DQN target from precomputed next-state tables.
pub fn dqn_target_from_tables(
    rewards: &[f64],
    dones: &[bool],
    next_q_online: &[Vec<f64>],
    next_q_target: &[Vec<f64>],
    next_masks: &[ActionMask],
    gamma: f64,
) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| {
            if dones[i] {
                rewards[i]
            } else {
                let a = masked_argmax(&next_q_online[i], &next_masks[i]);
                rewards[i] + gamma * next_q_target[i][a]
            }
        })
        .collect()
}

/// Double-DQN targets for a batch: the online net picks the next action,
/// the target net evaluates it, both restricted to the next-state mask.
pub fn dqn_target(
    batch: &[HighTransition],
    gamma: f64,
    online: &QNet,
    target: &QNet,
    grid: &SectorGrid,
) -> Vec<f64> {
    assert!(!batch.is_empty());
    let next_obs: Vec<&HighObs> = batch.iter().map(|t| &t.next_obs).collect();
    let q_online = online.q_batch(&next_obs);
    let q_target = target.q_batch(&next_obs);
    let masks: Vec<ActionMask> = batch
        .iter()
        .map(|t| action_mask(t.next_obs.stack.newest(), grid))
        .collect();
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
    dqn_target_from_tables(&rewards, &dones, &q_online, &q_target, &masks, gamma)
}

/// Hindsight relabeling, "future" strategy: substitute goals are achieved
/// points of same-or-later transitions in the episode; rewards, bearings,
/// and done flags are recomputed against the substitute.
pub fn her_relabel(
    episode: &[HighTransition],
    k: usize,
    cfg: &RewardConfig,
    astar: &mut dyn FnMut(Vec2, Vec2) -> Option<f64>,
    rng: &mut ChaCha12Rng,
) -> Vec<HighTransition> {
    let mut out = Vec::new();
    if k == 0 {
        return out;
    }
    for (i, t) in episode.iter().enumerate() {
        let mut candidates: Vec<usize> = (i..episode.len()).collect();
        candidates.shuffle(rng);
        candidates.truncate(k);
        for j in candidates {
            let goal = episode[j].achieved_world;
            let mut nt = t.clone();
            nt.goal_world = goal;
            nt.obs.goal_polar = nt.pose_at_obs.to_polar(goal);
            nt.next_obs.goal_polar = nt.pose_at_next.to_polar(goal);
            let d_now = nt.achieved_world.dist(goal);
            let prev = astar(nt.pose_at_obs.pos, goal);
            let now = astar(nt.achieved_world, goal);
            nt.reward = high_reward(d_now, prev, now, nt.invalid_subgoal, cfg);
            nt.done = d_now < cfg.d_limit;
            out.push(nt);
        }
    }
    out
}

#[derive(Clone)]
struct PackedObs {
    frames: Vec<Vec<u8>>,
    goal_polar: (f64, f64),
}

impl PackedObs {
    fn pack(obs: &HighObs) -> PackedObs {
        PackedObs {
            frames: obs.stack.frames.iter().map(|f| pack_cells(f.cells())).collect(),
            goal_polar: obs.goal_polar,
        }
    }

    fn unpack(&self) -> HighObs {
        let mut maps = self
            .frames
            .iter()
            .map(|p| LocalObstacleMap::from_cells(unpack_cells(p, MAP_SIZE * MAP_SIZE)));
        let first = maps.next().unwrap();
        let mut stack = ObstacleMapStack::bootstrap(first);
        for m in maps {
            stack = stack.push(m);
        }
        HighObs {
            stack,
            goal_polar: self.goal_polar,
        }
    }
}

#[derive(Clone)]
struct PackedTransition {
    obs: PackedObs,
    action: usize,
    reward: f64,
    next_obs: PackedObs,
    done: bool,
    achieved_world: Vec2,
    goal_world: Vec2,
    pose_at_obs: Pose,
    pose_at_next: Pose,
    invalid_subgoal: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling; frames are
/// stored bit-packed to keep the footprint small.
pub struct ReplayBuffer {
    items: Vec<PackedTransition>,
    capacity: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0);
        ReplayBuffer {
            items: Vec::new(),
            capacity,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: &HighTransition) {
        let packed = PackedTransition {
            obs: PackedObs::pack(&t.obs),
            action: t.action,
            reward: t.reward,
            next_obs: PackedObs::pack(&t.next_obs),
            done: t.done,
            achieved_world: t.achieved_world,
            goal_world: t.goal_world,
            pose_at_obs: t.pose_at_obs,
            pose_at_next: t.pose_at_next,
            invalid_subgoal: t.invalid_subgoal,
        };
        if self.items.len() < self.capacity {
            self.items.push(packed);
        } else {
            self.items[self.head] = packed;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut ChaCha12Rng) -> Vec<HighTransition> {
        assert!(!self.items.is_empty());
        (0..n)
            .map(|_| {
                let p = &self.items[rng.gen_range(0..self.items.len())];
                HighTransition {
                    obs: p.obs.unpack(),
                    action: p.action,
                    reward: p.reward,
                    next_obs: p.next_obs.unpack(),
                    done: p.done,
                    achieved_world: p.achieved_world,
                    goal_world: p.goal_world,
                    pose_at_obs: p.pose_at_obs,
                    pose_at_next: p.pose_at_next,
                    invalid_subgoal: p.invalid_subgoal,
                }
            })
            .collect()
    }
}

/// One optimizer step: uniform batch, double-DQN targets, smooth-L1 loss
/// on the taken actions, and a periodic online-to-target copy.
pub fn train_step(
    buffer: &ReplayBuffer,
    online: &mut QNet,
    target: &mut QNet,
    cfg: &HighConfig,
    grid: &SectorGrid,
    rng: &mut ChaCha12Rng,
) -> Result<f64, TensorError> {
    assert!(buffer.len() >= cfg.batch_size, "buffer smaller than batch");
    let batch = buffer.sample(cfg.batch_size, rng);
    let targets = dqn_target(&batch, cfg.gamma, online, target, grid);
    let n = batch.len();
    let mut maps = Vec::with_capacity(n * N_FRAMES * MAP_SIZE * MAP_SIZE);
    let mut goals = Vec::with_capacity(n * 2);
    let mut actions = Vec::with_capacity(n);
    for t in &batch {
        maps.extend(stack_to_input(&t.obs.stack));
        goals.extend(goal_features(t.obs.goal_polar));
        actions.push(t.action);
    }
    let mut tape = Tape::new();
    let (q, handles) = online.forward(
        &mut tape,
        Tensor::from_vec(&[n, N_FRAMES, MAP_SIZE, MAP_SIZE], maps),
        Tensor::from_vec(&[n, 2], goals),
    );
    let picked = tape.gather(q, &actions);
    let loss = tape.smooth_l1(picked, &targets);
    let loss_val = tape.value(loss).data[0];
    let grads = tape.backward(loss);
    let grad_list: Vec<(String, Vec<f64>)> = handles
        .iter()
        .map(|(name, var)| {
            let g = grads
                .wrt(*var)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; online.params.get(name).numel()]);
            (name.clone(), g)
        })
        .collect();
    online.params.adam_step(&grad_list, cfg.lr, 0.9, 0.999, 1e-8)?;
    if online.params.step % cfg.target_sync == 0 {
        sync_target(online, target);
    }
    Ok(loss_val)
}

/// Copy online parameter values into the target network.
pub fn sync_target(online: &QNet, target: &mut QNet) {
    let names: Vec<String> = online.params.names().map(|s| s.to_string()).collect();
    for name in names {
        target.params.set(&name, online.params.get(&name).data.clone());
    }
}

/// Deterministic seeded network pair (online clone as target).
pub fn init_nets(seed: u64) -> (QNet, QNet) {
    let mut r = rng::stream(seed, 40);
    let online = QNet::new(&mut r);
    let target = online.clone();
    (online, target)
}
