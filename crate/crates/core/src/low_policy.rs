//! Sub-goal-conditioned motion policy: frame encoding with a four-step
//! history, a squashed Gaussian command head, generalized advantage
//! estimation over reward and cost streams, the constrained policy update,
//! and the deployment-time safety command filter.

use crate::congestion::SAFETY_DISTANCE;
use crate::cpo::{cpo_step, CpoConfig, CpoDiagnostics, CpoOracle};
use crate::geom::Vec2;
use crate::perception::ObstacleList;
use crate::tensor::{init_uniform, ParamSet, Tape, Tensor, TensorError, Var};
use crate::world::{DEFAULT_OMEGA_MAX, DEFAULT_ROBOT_RADIUS, DEFAULT_V_MAX};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};

/// Width of one raw observation frame: 36 polar obstacle pairs, the
/// sub-goal polar pair, and the current command pair.
pub const FRAME_WIDTH: usize = 76;
/// Encoded width of one history slot.
pub const ENC_WIDTH: usize = 128;
/// History slots (current plus three previous steps).
pub const HIST_SLOTS: usize = 4;
/// Clearance margin enforced by the safety filter, meters.
pub const SAFETY_MARGIN: f64 = 0.2;
/// Integration substep used by the safety filter, seconds.
pub const SAFETY_SUBSTEP: f64 = 0.1;

/// Minimum rollout length accepted by a constrained update.
pub const MIN_UPDATE_STEPS: usize = 512;

const TRUNK1: usize = 256;
const TRUNK2: usize = 128;
const LOG_STD_MIN: f64 = -10.0;
const LOG_STD_MAX: f64 = 2.0;

/// Raw single-step observation before encoding.
#[derive(Debug, Clone)]
pub struct LowObs {
    pub obstacle_code: [f64; 72],
    pub subgoal_polar: (f64, f64),
    pub velocity: (f64, f64),
}

impl LowObs {
    pub fn new(olist: &ObstacleList, subgoal_polar: (f64, f64), v: f64, omega: f64) -> LowObs {
        LowObs {
            obstacle_code: olist.padded_flat(SAFETY_DISTANCE),
            subgoal_polar,
            velocity: (v, omega),
        }
    }

    /// Normalized 76-wide frame vector fed to the encoder.
    pub fn frame(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(FRAME_WIDTH);
        for pair in self.obstacle_code.chunks(2) {
            f.push(pair[0] / SAFETY_DISTANCE);
            f.push(pair[1] / std::f64::consts::PI);
        }
        f.push(self.subgoal_polar.0 / 6.0);
        f.push(self.subgoal_polar.1 / std::f64::consts::PI);
        f.push(self.velocity.0 / DEFAULT_V_MAX);
        f.push(self.velocity.1 / DEFAULT_OMEGA_MAX);
        f
    }
}

/// Sliding raw-frame history, newest slot first; the episode start
/// replicates the first frame into every slot.
#[derive(Debug, Clone)]
pub struct ObsHistory {
    frames: Vec<Vec<f64>>,
}

impl ObsHistory {
    pub fn bootstrap(frame: Vec<f64>) -> ObsHistory {
        assert_eq!(frame.len(), FRAME_WIDTH);
        ObsHistory {
            frames: vec![frame; HIST_SLOTS],
        }
    }

    pub fn push(&self, frame: Vec<f64>) -> ObsHistory {
        assert_eq!(frame.len(), FRAME_WIDTH);
        let mut frames = Vec::with_capacity(HIST_SLOTS);
        frames.push(frame);
        frames.extend(self.frames[..HIST_SLOTS - 1].iter().cloned());
        ObsHistory { frames }
    }

    /// All raw frames flattened newest first (width 304).
    pub fn flat(&self) -> Vec<f64> {
        self.frames.concat()
    }
}

/// Encode the newest observation and push it into the history.
pub fn build_obs(
    olist: &ObstacleList,
    subgoal_polar: (f64, f64),
    v: f64,
    omega: f64,
    hist: Option<&ObsHistory>,
) -> ObsHistory {
    let frame = LowObs::new(olist, subgoal_polar, v, omega).frame();
    match hist {
        Some(h) => h.push(frame),
        None => ObsHistory::bootstrap(frame),
    }
}

/// Actor network: shared frame encoder, trunk, mean head, and a
/// state-independent log standard deviation.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub params: ParamSet,
}

/// Value head over encoded features; same trunk shape as the actor.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub params: ParamSet,
}

/// Actor plus reward and cost critics.
#[derive(Debug, Clone)]
pub struct LowNets {
    pub pi: PolicyNet,
    pub vf: CriticNet,
    pub cf: CriticNet,
}

impl PolicyNet {
    pub fn new(rng: &mut ChaCha12Rng, log_std_init: f64) -> PolicyNet {
        let mut p = ParamSet::new();
        let mut fc = |p: &mut ParamSet, name: &str, i: usize, o: usize| {
            p.insert(&format!("{}_w", name), init_uniform(rng, &[i, o], i));
            p.insert(&format!("{}_b", name), init_uniform(rng, &[o], i));
        };
        fc(&mut p, "enc", FRAME_WIDTH, ENC_WIDTH);
        fc(&mut p, "pi1", HIST_SLOTS * ENC_WIDTH, TRUNK1);
        fc(&mut p, "pi2", TRUNK1, TRUNK2);
        fc(&mut p, "mean", TRUNK2, 2);
        p.insert("log_std", Tensor::from_vec(&[2], vec![log_std_init; 2]));
        PolicyNet { params: p }
    }

    /// Mean and clamped log-std graph over a batch of flat histories.
    fn graph(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        frames: Tensor,
    ) -> (Var, Var, Vec<(String, Var)>) {
        let batch = frames.shape[0];
        assert_eq!(frames.shape[1], HIST_SLOTS * FRAME_WIDTH);
        let mut handles = Vec::new();
        let pv = |tape: &mut Tape, handles: &mut Vec<(String, Var)>, name: &str| {
            let v = tape.input(params.get(name).clone());
            handles.push((name.to_string(), v));
            v
        };
        let x = tape.input(frames);
        let (ew, eb) = (pv(tape, &mut handles, "enc_w"), pv(tape, &mut handles, "enc_b"));
        let (w1, b1) = (pv(tape, &mut handles, "pi1_w"), pv(tape, &mut handles, "pi1_b"));
        let (w2, b2) = (pv(tape, &mut handles, "pi2_w"), pv(tape, &mut handles, "pi2_b"));
        let (mw, mb) = (pv(tape, &mut handles, "mean_w"), pv(tape, &mut handles, "mean_b"));
        let ls = pv(tape, &mut handles, "log_std");
        // Encode all four slots with the same weights.
        let per_slot = tape.reshape(x, &[batch * HIST_SLOTS, FRAME_WIDTH]);
        let h = tape.affine(per_slot, ew, eb);
        let h = tape.relu(h);
        let h = tape.reshape(h, &[batch, HIST_SLOTS * ENC_WIDTH]);
        let t = tape.affine(h, w1, b1);
        let t = tape.relu(t);
        let t = tape.affine(t, w2, b2);
        let t = tape.relu(t);
        let mu = tape.affine(t, mw, mb);
        let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        (mu, ls, handles)
    }

    /// Action mean and log-std values for a batch, no gradients kept.
    pub fn mean_logstd(&self, flat_frames: &[Vec<f64>]) -> (Vec<[f64; 2]>, [f64; 2]) {
        let batch = flat_frames.len();
        let data: Vec<f64> = flat_frames.concat();
        let mut tape = Tape::new();
        let (mu, ls, _) = self.graph(
            &mut tape,
            &self.params,
            Tensor::from_vec(&[batch, HIST_SLOTS * FRAME_WIDTH], data),
        );
        let mus = tape
            .value(mu)
            .data
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let lsv = tape.value(ls);
        (mus, [lsv.data[0], lsv.data[1]])
    }

    /// Encoded slot vector for one raw frame.
    pub fn encode_frame(&self, frame: &[f64]) -> Vec<f64> {
        assert_eq!(frame.len(), FRAME_WIDTH);
        let w = self.params.get("enc_w");
        let b = self.params.get("enc_b");
        let mut out = vec![0.0; ENC_WIDTH];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = b.data[j];
            for (i, &x) in frame.iter().enumerate() {
                acc += x * w.data[i * ENC_WIDTH + j];
            }
            *o = acc.max(0.0);
        }
        out
    }

    /// Network input: the four encoded history slots concatenated.
    pub fn encoded_input(&self, hist: &ObsHistory) -> Vec<f64> {
        let mut out = Vec::with_capacity(HIST_SLOTS * ENC_WIDTH);
        for f in &hist.frames {
            out.extend(self.encode_frame(f));
        }
        out
    }
}

impl CriticNet {
    pub fn new(rng: &mut ChaCha12Rng) -> CriticNet {
        let mut p = ParamSet::new();
        let mut fc = |p: &mut ParamSet, name: &str, i: usize, o: usize| {
            p.insert(&format!("{}_w", name), init_uniform(rng, &[i, o], i));
            p.insert(&format!("{}_b", name), init_uniform(rng, &[o], i));
        };
        fc(&mut p, "v1", HIST_SLOTS * ENC_WIDTH, TRUNK1);
        fc(&mut p, "v2", TRUNK1, TRUNK2);
        fc(&mut p, "v3", TRUNK2, 1);
        CriticNet { params: p }
    }

    fn graph(&self, tape: &mut Tape, feats: Tensor) -> (Var, Vec<(String, Var)>) {
        let batch = feats.shape[0];
        let mut handles = Vec::new();
        let pv = |tape: &mut Tape, handles: &mut Vec<(String, Var)>, name: &str| {
            let v = tape.input(self.params.get(name).clone());
            handles.push((name.to_string(), v));
            v
        };
        let x = tape.input(feats);
        let (w1, b1) = (pv(tape, &mut handles, "v1_w"), pv(tape, &mut handles, "v1_b"));
        let (w2, b2) = (pv(tape, &mut handles, "v2_w"), pv(tape, &mut handles, "v2_b"));
        let (w3, b3) = (pv(tape, &mut handles, "v3_w"), pv(tape, &mut handles, "v3_b"));
        let t = tape.affine(x, w1, b1);
        let t = tape.relu(t);
        let t = tape.affine(t, w2, b2);
        let t = tape.relu(t);
        let out = tape.affine(t, w3, b3);
        let out = tape.reshape(out, &[batch]);
        (out, handles)
    }

    /// Predicted values over encoded feature rows.
    pub fn predict(&self, feats: &[Vec<f64>]) -> Vec<f64> {
        let batch = feats.len();
        let data: Vec<f64> = feats.concat();
        let mut tape = Tape::new();
        let (out, _) = self.graph(
            &mut tape,
            Tensor::from_vec(&[batch, HIST_SLOTS * ENC_WIDTH], data),
        );
        tape.value(out).data.clone()
    }
}

impl LowNets {
    pub fn new(seed: u64, log_std_init: f64) -> LowNets {
        let mut r = crate::rng::stream(seed, 50);
        LowNets {
            pi: PolicyNet::new(&mut r, log_std_init),
            vf: CriticNet::new(&mut r),
            cf: CriticNet::new(&mut r),
        }
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), TensorError> {
        self.pi.params.save(w)?;
        self.vf.params.save(w)?;
        self.cf.params.save(w)
    }

    pub fn load(r: &mut impl Read) -> Result<LowNets, TensorError> {
        let pi = ParamSet::load(r)?;
        let vf = ParamSet::load(r)?;
        let cf = ParamSet::load(r)?;
        Ok(LowNets {
            pi: PolicyNet { params: pi },
            vf: CriticNet { params: vf },
            cf: CriticNet { params: cf },
        })
    }
}

/// Pre-squash sample, emitted command, and its log-density.
#[derive(Debug, Clone, Copy)]
pub struct LowAction {
    pub pre_squash: [f64; 2],
    pub cmd: (f64, f64),
    pub log_prob: f64,
}

/// Map a pre-squash sample to bounded commands.
pub fn squash(z: [f64; 2]) -> (f64, f64) {
    let v = DEFAULT_V_MAX / (1.0 + (-z[0]).exp());
    let omega = DEFAULT_OMEGA_MAX * z[1].tanh();
    (v, omega)
}

/// Diagonal Gaussian log-density in pre-squash space.
pub fn gaussian_log_prob(z: &[f64; 2], mu: &[f64; 2], log_std: &[f64; 2]) -> f64 {
    let mut lp = 0.0;
    for i in 0..2 {
        let sigma = log_std[i].exp();
        let u = (z[i] - mu[i]) / sigma;
        lp += -0.5 * u * u - log_std[i] - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    lp
}

/// Sample or take the mean command for one observation history.
pub fn act(net: &PolicyNet, hist: &ObsHistory, stochastic: bool, rng: &mut ChaCha12Rng) -> LowAction {
    let (mus, ls) = net.mean_logstd(&[hist.flat()]);
    let mu = mus[0];
    let z = if stochastic {
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        [mu[0] + ls[0].exp() * e0, mu[1] + ls[1].exp() * e1]
    } else {
        mu
    };
    LowAction {
        pre_squash: z,
        cmd: squash(z),
        log_prob: gaussian_log_prob(&z, &mu, &ls),
    }
}

/// On-policy rollout storage for one constrained update.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    /// Flat raw history per step, width 304.
    pub frames: Vec<Vec<f64>>,
    /// Pre-squash action samples.
    pub actions: Vec<[f64; 2]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Contact indicator per step, 0 or 1.
    pub costs: Vec<f64>,
    pub values: Vec<f64>,
    pub cost_values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Advantages and regression targets for both streams.
#[derive(Debug, Clone)]
pub struct GaeOut {
    pub adv: Vec<f64>,
    pub cost_adv: Vec<f64>,
    pub ret: Vec<f64>,
    pub cost_ret: Vec<f64>,
}

fn gae_stream(r: &[f64], v: &[f64], dones: &[bool], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let n = r.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let (next_v, cont) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (v[t + 1], 1.0)
        } else {
            (0.0, 0.0)
        };
        let delta = r[t] + gamma * next_v - v[t];
        acc = delta + gamma * lam * cont * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(v).map(|(a, vv)| a + vv).collect();
    (adv, ret)
}

/// Generalized advantage estimation applied independently to the reward
/// and cost streams; episodes reset at done flags.
pub fn gae(batch: &RolloutBatch, gamma: f64, lam: f64) -> GaeOut {
    assert!(!batch.is_empty());
    let (adv, ret) = gae_stream(&batch.rewards, &batch.values, &batch.dones, gamma, lam);
    let (cost_adv, cost_ret) =
        gae_stream(&batch.costs, &batch.cost_values, &batch.dones, gamma, lam);
    GaeOut {
        adv,
        cost_adv,
        ret,
        cost_ret,
    }
}

/// Mean discounted episode cost over the episodes in a batch.
pub fn discounted_episode_cost(costs: &[f64], dones: &[bool], gamma: f64) -> f64 {
    let mut sums = Vec::new();
    let mut acc = 0.0;
    let mut disc = 1.0;
    for (i, &c) in costs.iter().enumerate() {
        acc += disc * c;
        disc *= gamma;
        if dones[i] {
            sums.push(acc);
            acc = 0.0;
            disc = 1.0;
        }
    }
    if disc < 1.0 {
        sums.push(acc);
    }
    if sums.is_empty() {
        0.0
    } else {
        sums.iter().sum::<f64>() / sums.len() as f64
    }
}

struct PolicyOracle<'a> {
    template: &'a PolicyNet,
    frames: Tensor,
    actions: Vec<f64>,
    logp_old: Vec<f64>,
    adv: Vec<f64>,
    cost_adv: Vec<f64>,
    mu_old: Vec<f64>,
    ls_old: [f64; 2],
    cost_scale: f64,
    x0: Vec<f64>,
}

impl<'a> PolicyOracle<'a> {
    fn params_at(&self, x: &[f64]) -> ParamSet {
        let mut p = self.template.params.clone();
        p.unflatten(x);
        p
    }

    /// Log-density node of the stored actions under candidate parameters.
    fn logp_graph(&self, tape: &mut Tape, params: &ParamSet) -> (Var, Vec<(String, Var)>) {
        let batch = self.frames.shape[0];
        let (mu, ls, handles) = self.template.graph(tape, params, self.frames.clone());
        let z = tape.input(Tensor::from_vec(&[batch, 2], self.actions.clone()));
        let diff = tape.sub(z, mu);
        let neg_ls = tape.scale(ls, -1.0);
        let inv_sigma = tape.exp(neg_ls);
        let u = tape.mul(diff, inv_sigma);
        let u2 = tape.mul(u, u);
        let ss = tape.row_sum(u2);
        let half = tape.scale(ss, -0.5);
        let ls_row = tape.reshape(ls, &[1, 2]);
        let sum_ls = tape.row_sum(ls_row);
        let centered = tape.sub(half, sum_ls);
        let logp = tape.add_const(centered, -(2.0 * std::f64::consts::PI).ln());
        (logp, handles)
    }

    fn surrogate_graph(&self, tape: &mut Tape, params: &ParamSet, adv: &[f64], scale: f64) -> (Var, Vec<(String, Var)>) {
        let batch = self.frames.shape[0];
        let (logp, handles) = self.logp_graph(tape, params);
        let old = tape.input(Tensor::from_vec(&[batch], self.logp_old.clone()));
        let ld = tape.sub(logp, old);
        let ld = tape.clamp(ld, -20.0, 20.0);
        let ratio = tape.exp(ld);
        let a = tape.input(Tensor::from_vec(&[batch], adv.to_vec()));
        let weighted = tape.mul(ratio, a);
        let m = tape.mean_all(weighted);
        let m = tape.scale(m, scale);
        (m, handles)
    }

    fn kl_graph(&self, tape: &mut Tape, params: &ParamSet) -> (Var, Vec<(String, Var)>) {
        let batch = self.frames.shape[0];
        let (mu, ls, handles) = self.template.graph(tape, params, self.frames.clone());
        let mu_old = tape.input(Tensor::from_vec(&[batch, 2], self.mu_old.clone()));
        let dmu = tape.sub(mu_old, mu);
        let dmu2 = tape.mul(dmu, dmu);
        let var_old = tape.input(Tensor::from_vec(
            &[2],
            vec![(2.0 * self.ls_old[0]).exp(), (2.0 * self.ls_old[1]).exp()],
        ));
        let num = tape.add(dmu2, var_old);
        let neg2ls = tape.scale(ls, -2.0);
        let inv_var = tape.exp(neg2ls);
        let half_inv = tape.scale(inv_var, 0.5);
        let term = tape.mul(num, half_inv);
        let ls_old_t = tape.input(Tensor::from_vec(&[2], self.ls_old.to_vec()));
        let ls_diff = tape.sub(ls, ls_old_t);
        let shifted = tape.add(term, ls_diff);
        let full = tape.add_const(shifted, -0.5);
        let per = tape.row_sum(full);
        let m = tape.mean_all(per);
        (m, handles)
    }

    fn eval_logp(&self, x: &[f64]) -> Vec<f64> {
        let p = self.params_at(x);
        let mut tape = Tape::new();
        let (lp, _) = self.logp_graph(&mut tape, &p);
        tape.value(lp).data.clone()
    }

    fn grads_flat(&self, tape: &Tape, root: Var, handles: &[(String, Var)], params: &ParamSet) -> Vec<f64> {
        let g = tape.backward(root);
        let by_name: std::collections::BTreeMap<&str, Var> =
            handles.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let mut out = Vec::with_capacity(params.total_len());
        for name in params.names() {
            let var = by_name[name];
            match g.wrt(var) {
                Some(s) => out.extend_from_slice(s),
                None => out.extend(std::iter::repeat(0.0).take(params.get(name).numel())),
            }
        }
        out
    }
}

impl<'a> CpoOracle for PolicyOracle<'a> {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn current(&self) -> Vec<f64> {
        self.x0.clone()
    }

    fn surrogate_reward(&self, x: &[f64]) -> f64 {
        let p = self.params_at(x);
        let mut tape = Tape::new();
        let (m, _) = self.surrogate_graph(&mut tape, &p, &self.adv, 1.0);
        tape.value(m).data[0] - self.sr0()
    }

    fn surrogate_cost(&self, x: &[f64]) -> f64 {
        let p = self.params_at(x);
        let mut tape = Tape::new();
        let (m, _) = self.surrogate_graph(&mut tape, &p, &self.cost_adv, self.cost_scale);
        tape.value(m).data[0] - self.sc0()
    }

    fn kl(&self, x: &[f64]) -> f64 {
        let p = self.params_at(x);
        let mut tape = Tape::new();
        let (m, _) = self.kl_graph(&mut tape, &p);
        tape.value(m).data[0]
    }

    fn grad_surrogate_reward(&self) -> Vec<f64> {
        let p = self.params_at(&self.x0);
        let mut tape = Tape::new();
        let (m, handles) = self.surrogate_graph(&mut tape, &p, &self.adv, 1.0);
        self.grads_flat(&tape, m, &handles, &p)
    }

    fn grad_surrogate_cost(&self) -> Vec<f64> {
        let p = self.params_at(&self.x0);
        let mut tape = Tape::new();
        let (m, handles) = self.surrogate_graph(&mut tape, &p, &self.cost_adv, self.cost_scale);
        self.grads_flat(&tape, m, &handles, &p)
    }

    fn grad_kl(&self, x: &[f64]) -> Vec<f64> {
        let p = self.params_at(x);
        let mut tape = Tape::new();
        let (m, handles) = self.kl_graph(&mut tape, &p);
        self.grads_flat(&tape, m, &handles, &p)
    }
}

impl<'a> PolicyOracle<'a> {
    fn sr0(&self) -> f64 {
        // Ratio is exactly 1 at the old parameters.
        self.adv.iter().sum::<f64>() / self.adv.len() as f64
    }

    fn sc0(&self) -> f64 {
        self.cost_adv.iter().sum::<f64>() / self.cost_adv.len() as f64 * self.cost_scale
    }
}

/// Critic regression settings.
#[derive(Debug, Clone)]
pub struct ValueFitConfig {
    pub lr: f64,
    pub iters: usize,
    pub minibatch: usize,
}

impl Default for ValueFitConfig {
    fn default() -> Self {
        ValueFitConfig {
            lr: 1e-3,
            iters: 40,
            minibatch: 256,
        }
    }
}

/// Summary of one constrained policy update.
#[derive(Debug, Clone)]
pub struct LowUpdateReport {
    pub cpo: CpoDiagnostics,
    pub mean_cost: f64,
    pub mean_reward: f64,
    pub value_loss: f64,
    pub cost_value_loss: f64,
}

fn fit_critic(
    critic: &mut CriticNet,
    feats: &[Vec<f64>],
    targets: &[f64],
    cfg: &ValueFitConfig,
    rng: &mut ChaCha12Rng,
) -> Result<f64, TensorError> {
    let n = feats.len();
    let mut last = 0.0;
    for _ in 0..cfg.iters {
        let m = cfg.minibatch.min(n);
        let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let data: Vec<f64> = idx.iter().flat_map(|&i| feats[i].iter().copied()).collect();
        let tgt: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let mut tape = Tape::new();
        let (pred, handles) = critic.graph(
            &mut tape,
            Tensor::from_vec(&[m, HIST_SLOTS * ENC_WIDTH], data),
        );
        let t = tape.input(Tensor::from_vec(&[m], tgt));
        let d = tape.sub(pred, t);
        let sq = tape.mul(d, d);
        let loss = tape.mean_all(sq);
        last = tape.value(loss).data[0];
        let grads = tape.backward(loss);
        let gl: Vec<(String, Vec<f64>)> = handles
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .wrt(*var)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; critic.params.get(name).numel()]);
                (name.clone(), g)
            })
            .collect();
        critic.params.adam_step(&gl, cfg.lr, 0.9, 0.999, 1e-8)?;
    }
    Ok(last)
}

/// One full constrained update: advantages, trust-region policy step,
/// then critic regression on the realized returns.
pub fn cpo_update(
    nets: &mut LowNets,
    batch: &RolloutBatch,
    cfg: &CpoConfig,
    vcfg: &ValueFitConfig,
    rng: &mut ChaCha12Rng,
) -> Result<LowUpdateReport, TensorError> {
    assert!(
        batch.len() >= MIN_UPDATE_STEPS,
        "rollout shorter than {} steps",
        MIN_UPDATE_STEPS
    );
    let est = gae(batch, cfg.gamma, cfg.lam);
    // Normalize reward advantages; cost advantages keep their scale so the
    // constraint stays in cost units.
    let mean = est.adv.iter().sum::<f64>() / est.adv.len() as f64;
    let var = est
        .adv
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / est.adv.len() as f64;
    let std = var.sqrt().max(1e-8);
    let adv: Vec<f64> = est.adv.iter().map(|a| (a - mean) / std).collect();

    let j_cost = discounted_episode_cost(&batch.costs, &batch.dones, cfg.gamma);
    let c = j_cost - cfg.d_cost;

    let flat_frames: Vec<f64> = batch.frames.concat();
    let n = batch.len();
    let frames = Tensor::from_vec(&[n, HIST_SLOTS * FRAME_WIDTH], flat_frames);
    let (mu_rows, ls_old) = nets.pi.mean_logstd(&batch.frames);
    let mu_old: Vec<f64> = mu_rows.iter().flat_map(|m| m.iter().copied()).collect();
    let mut oracle = PolicyOracle {
        template: &nets.pi,
        frames,
        actions: batch.actions.iter().flat_map(|a| a.iter().copied()).collect(),
        logp_old: batch.log_probs.clone(),
        adv,
        cost_adv: est.cost_adv.clone(),
        mu_old,
        ls_old,
        cost_scale: 1.0 / (1.0 - cfg.gamma),
        x0: nets.pi.params.flatten(),
    };
    // Re-evaluate the old log-densities through the graph so the ratio is
    // exactly one at the current parameters.
    oracle.logp_old = oracle.eval_logp(&oracle.x0.clone());
    let out = cpo_step(&oracle, c, cfg);
    nets.pi.params.unflatten(&out.params);

    // Critic regression on features from the updated encoder, matching the
    // features the next rollout will produce.
    let feats: Vec<Vec<f64>> = batch
        .frames
        .iter()
        .map(|f| {
            let mut row = Vec::with_capacity(HIST_SLOTS * ENC_WIDTH);
            for chunk in f.chunks(FRAME_WIDTH) {
                row.extend(nets.pi.encode_frame(chunk));
            }
            row
        })
        .collect();
    let value_loss = fit_critic(&mut nets.vf, &feats, &est.ret, vcfg, rng)?;
    let cost_value_loss = fit_critic(&mut nets.cf, &feats, &est.cost_ret, vcfg, rng)?;

    Ok(LowUpdateReport {
        cpo: out.info,
        mean_cost: j_cost,
        mean_reward: batch.rewards.iter().sum::<f64>() / n as f64,
        value_loss,
        cost_value_loss,
    })
}

/// Constant-velocity pedestrian track in the robot frame.
#[derive(Debug, Clone, Copy)]
pub struct PedTrack {
    pub rel_pos: Vec2,
    pub rel_vel: Vec2,
    pub radius: f64,
}

fn advance_unicycle(pos: Vec2, heading: f64, v: f64, omega: f64, dt: f64) -> (Vec2, f64) {
    if omega.abs() < 1e-12 {
        (
            Vec2 {
                x: pos.x + v * dt * heading.cos(),
                y: pos.y + v * dt * heading.sin(),
            },
            heading,
        )
    } else {
        let radius = v / omega;
        let h1 = heading + omega * dt;
        (
            Vec2 {
                x: pos.x + radius * (h1.sin() - heading.sin()),
                y: pos.y - radius * (h1.cos() - heading.cos()),
            },
            h1,
        )
    }
}

fn min_clearance_over_horizon(
    cmd: (f64, f64),
    points: &[Vec2],
    peds: &[PedTrack],
    horizon: f64,
) -> (f64, f64) {
    // Returns (minimum predicted clearance, clearance at time zero).
    let mut pos = Vec2::ZERO;
    let mut heading = 0.0;
    let clearance = |p: Vec2, t: f64| -> f64 {
        let mut best = f64::INFINITY;
        for &q in points {
            best = best.min(p.dist(q) - DEFAULT_ROBOT_RADIUS);
        }
        for tr in peds {
            let q = Vec2 {
                x: tr.rel_pos.x + tr.rel_vel.x * t,
                y: tr.rel_pos.y + tr.rel_vel.y * t,
            };
            best = best.min(p.dist(q) - DEFAULT_ROBOT_RADIUS - tr.radius);
        }
        best
    };
    let initial = clearance(pos, 0.0);
    let mut worst = initial;
    let steps = (horizon / SAFETY_SUBSTEP).round().max(1.0) as usize;
    for k in 0..steps {
        let (p, h) = advance_unicycle(pos, heading, cmd.0, cmd.1, SAFETY_SUBSTEP);
        pos = p;
        heading = h;
        worst = worst.min(clearance(pos, (k + 1) as f64 * SAFETY_SUBSTEP));
    }
    (worst, initial)
}

/// Forward-simulate the command; when the predicted clearance drops below
/// the margin and below the current clearance, binary-search a linear
/// speed scale until safe. Turn rate passes through untouched, and an
/// already-safe command returns bit-identically.
pub fn safety_filter(
    cmd: (f64, f64),
    olist: &ObstacleList,
    peds: &[PedTrack],
    horizon: f64,
) -> (f64, f64) {
    let points: Vec<Vec2> = olist
        .entries
        .iter()
        .map(|&(d, th)| Vec2 {
            x: d * th.cos(),
            y: d * th.sin(),
        })
        .collect();
    let unsafe_at = |scale: f64| -> bool {
        let (worst, initial) = min_clearance_over_horizon(
            (cmd.0 * scale, cmd.1),
            &points,
            peds,
            horizon,
        );
        worst < SAFETY_MARGIN && worst < initial - 1e-12
    };
    if cmd.0 <= 0.0 || !unsafe_at(1.0) {
        return cmd;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if unsafe_at(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (cmd.0 * lo, cmd.1)
}
