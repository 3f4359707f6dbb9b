//! Constrained trust-region policy step: conjugate-gradient solve against
//! KL curvature, a two-constraint dual for the reward/cost tradeoff, a
//! recovery step for infeasible starts, and backtracking acceptance.

/// Problem interface for one constrained update. Candidate parameters are
/// absolute; surrogate values are changes relative to the current policy
/// (zero at the current parameters).
pub trait CpoOracle {
    fn dim(&self) -> usize;
    fn current(&self) -> Vec<f64>;
    /// Reward-surrogate change at candidate parameters.
    fn surrogate_reward(&self, x: &[f64]) -> f64;
    /// Cost-surrogate change at candidate parameters.
    fn surrogate_cost(&self, x: &[f64]) -> f64;
    /// Divergence from the current policy to the candidate.
    fn kl(&self, x: &[f64]) -> f64;
    fn grad_surrogate_reward(&self) -> Vec<f64>;
    fn grad_surrogate_cost(&self) -> Vec<f64>;
    fn grad_kl(&self, x: &[f64]) -> Vec<f64>;
}

/// Update hyperparameters; gamma/lam also drive advantage estimation.
#[derive(Debug, Clone)]
pub struct CpoConfig {
    /// Trust-region radius on estimated KL.
    pub delta: f64,
    /// Bound on expected discounted cost.
    pub d_cost: f64,
    pub cg_iters: usize,
    pub backtrack_steps: usize,
    pub backtrack_coeff: f64,
    pub gamma: f64,
    pub lam: f64,
    /// Curvature damping added to every matrix-vector product.
    pub damping: f64,
    /// Perturbation scale for curvature products.
    pub fd_eps: f64,
}

impl Default for CpoConfig {
    fn default() -> Self {
        CpoConfig {
            delta: 0.01,
            d_cost: 0.025,
            cg_iters: 10,
            backtrack_steps: 10,
            backtrack_coeff: 0.8,
            gamma: 0.99,
            lam: 0.95,
            damping: 0.1,
            fd_eps: 1e-5,
        }
    }
}

/// Per-step report used for diagnostics CSV rows and test assertions.
#[derive(Debug, Clone, Default)]
pub struct CpoDiagnostics {
    pub accepted: bool,
    pub recovery: bool,
    pub cg_fallback: bool,
    /// Constraint slack fed in: expected cost minus the limit.
    pub c: f64,
    pub kl: f64,
    pub surrogate_improve: f64,
    pub cost_change: f64,
    pub step_scale: f64,
    pub lambda: f64,
    pub nu: f64,
}

/// Outcome of one constrained step.
#[derive(Debug, Clone)]
pub struct CpoStepOutcome {
    pub params: Vec<f64>,
    /// Full proposed step before backtracking.
    pub proposed_step: Vec<f64>,
    pub info: CpoDiagnostics,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Damped curvature-vector product via central differences of the KL
/// gradient around the current parameters.
pub fn fisher_vector_product(
    o: &dyn CpoOracle,
    x0: &[f64],
    v: &[f64],
    cfg: &CpoConfig,
) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    if norm < 1e-300 {
        return vec![0.0; v.len()];
    }
    let h = cfg.fd_eps / norm;
    let mut plus = x0.to_vec();
    axpy(&mut plus, h, v);
    let mut minus = x0.to_vec();
    axpy(&mut minus, -h, v);
    let gp = o.grad_kl(&plus);
    let gm = o.grad_kl(&minus);
    gp.iter()
        .zip(&gm)
        .zip(v)
        .map(|((p, m), vi)| (p - m) / (2.0 * h) + cfg.damping * vi)
        .collect()
}

/// Conjugate gradient for H x = rhs; the flag reports clean convergence.
/// Breakdown (non-finite values or non-positive curvature) aborts with the
/// best iterate so far.
pub(crate) fn conjugate_gradient(
    avp: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    iters: usize,
    tol: f64,
) -> (Vec<f64>, bool) {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = rhs.to_vec();
    let mut rdotr = dot(&r, &r);
    if rdotr.sqrt() < tol {
        return (x, true);
    }
    for _ in 0..iters {
        let hp = avp(&p);
        let p_hp = dot(&p, &hp);
        if !p_hp.is_finite() || p_hp <= 0.0 {
            return (x, false);
        }
        let alpha = rdotr / p_hp;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &hp);
        let new_rdotr = dot(&r, &r);
        if !new_rdotr.is_finite() {
            return (x, false);
        }
        if new_rdotr.sqrt() < tol {
            return (x, true);
        }
        let beta = new_rdotr / rdotr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rdotr = new_rdotr;
    }
    (x, true)
}

struct DualPick {
    lambda: f64,
    nu: f64,
    /// True when the active piece carries a positive constraint multiplier.
    piece_a: bool,
}

/// Maximize g'x subject to b'x + c <= 0 and x'Hx/2 <= delta, given the
/// H-inverse products. Assumes the feasible, boundary-intersecting case.
/// The dual D(nu, lam) = (q - 2 nu r + nu^2 s)/(2 lam) - nu c + lam delta
/// is minimized; nu eliminates to max(0, (r + lam c)/s), leaving two
/// one-dimensional pieces split at lam c = -r.
fn solve_dual(q: f64, r: f64, s: f64, c: f64, delta: f64) -> DualPick {
    let eps = 1e-12;
    let a_val = (q - r * r / s).max(0.0);
    let b_val = (2.0 * delta - c * c / s).max(eps);
    // Piece with nu > 0 (lam c > -r).
    let d_a = |lam: f64| {
        if lam < eps {
            if a_val < eps {
                -r * c / s
            } else {
                f64::INFINITY
            }
        } else {
            a_val / (2.0 * lam) + lam * b_val / 2.0 - r * c / s
        }
    };
    // Piece with nu = 0 (lam c <= -r).
    let d_b = |lam: f64| {
        if lam < eps {
            f64::INFINITY
        } else {
            q / (2.0 * lam) + delta * lam
        }
    };
    let lam_a_raw = (a_val / b_val).sqrt();
    let lam_b_raw = (q / (2.0 * delta)).sqrt();
    let mut best: Option<(f64, f64, bool)> = None;
    let mut consider = |lam: f64, in_a: bool| {
        if lam < 0.0 {
            return;
        }
        let ok = if in_a { lam * c > -r } else { lam * c <= -r };
        if !ok {
            return;
        }
        let val = if in_a { d_a(lam) } else { d_b(lam) };
        if val.is_finite() && best.map_or(true, |(bv, _, _)| val < bv) {
            best = Some((val, lam, in_a));
        }
    };
    consider(lam_a_raw, true);
    consider(lam_b_raw, false);
    consider(0.0, true);
    // Region boundary, evaluated from both sides (the pieces agree there).
    if c.abs() > eps {
        let mid = (-r / c).max(0.0);
        consider(mid + 1e-9, true);
        consider(mid, false);
    }
    let (lambda, piece_a) = best.map_or((lam_b_raw, false), |(_, l, a)| (l, a));
    let lambda = lambda.max(eps);
    let nu = if piece_a {
        ((r + lambda * c) / s).max(0.0)
    } else {
        0.0
    };
    DualPick { lambda, nu, piece_a }
}

/// One constrained update: propose a direction from the local dual (or a
/// recovery direction when no feasible step exists), then backtrack until
/// the acceptance rules hold. Rejection returns the original parameters.
pub fn cpo_step(o: &dyn CpoOracle, c: f64, cfg: &CpoConfig) -> CpoStepOutcome {
    let x0 = o.current();
    let n = x0.len();
    let g = o.grad_surrogate_reward();
    let b = o.grad_surrogate_cost();
    let mut info = CpoDiagnostics {
        c,
        ..CpoDiagnostics::default()
    };
    let tol = 1e-10;
    let mut fallback = false;
    let solve = |rhs: &[f64], fallback: &mut bool| -> Vec<f64> {
        let mut avp = |v: &[f64]| fisher_vector_product(o, &x0, v, cfg);
        let (x, ok) = conjugate_gradient(&mut avp, rhs, cfg.cg_iters, tol);
        if ok && x.iter().all(|v| v.is_finite()) {
            x
        } else {
            *fallback = true;
            // Treat curvature as identity-scaled: fall back to the gradient.
            rhs.to_vec()
        }
    };
    let hg = solve(&g, &mut fallback);
    let q = dot(&g, &hg).max(0.0);
    let b_norm = dot(&b, &b).sqrt();
    let (hb, s) = if b_norm > 1e-10 {
        let hb = solve(&b, &mut fallback);
        let s = dot(&b, &hb);
        (hb, s)
    } else {
        (vec![0.0; n], 0.0)
    };
    let r = dot(&g, &hb);
    info.cg_fallback = fallback;

    let mut step = vec![0.0; n];
    if s <= 1e-12 {
        // Cost locally flat: plain trust-region ascent on the reward.
        if q > 1e-14 {
            let coef = (2.0 * cfg.delta / q).sqrt();
            step = hg.iter().map(|v| v * coef).collect();
            info.lambda = 1.0 / coef.max(1e-300);
        }
    } else if c > 0.0 && c * c / s > 2.0 * cfg.delta {
        // No feasible point inside the trust region: cost-reduction step.
        info.recovery = true;
        let coef = -(2.0 * cfg.delta / s).sqrt();
        step = hb.iter().map(|v| v * coef).collect();
    } else if c < 0.0 && c * c / s > 2.0 * cfg.delta {
        // Constraint boundary outside the region: unconstrained ascent.
        if q > 1e-14 {
            let coef = (2.0 * cfg.delta / q).sqrt();
            step = hg.iter().map(|v| v * coef).collect();
            info.lambda = 1.0 / coef.max(1e-300);
        }
    } else {
        let pick = solve_dual(q, r, s, c, cfg.delta);
        info.lambda = pick.lambda;
        info.nu = pick.nu;
        if pick.piece_a {
            // Split the step into the ascent component conjugate to the
            // constraint (u / lambda) and the boundary projection; when the
            // reward gradient has no off-constraint component, u is pure
            // cancellation noise and must be dropped rather than divided
            // by a vanishing lambda.
            let alpha = r / s;
            let a_val = (q - r * r / s).max(0.0);
            let degenerate = a_val <= 1e-10 * q.max(1e-300);
            for i in 0..n {
                let u = if degenerate { 0.0 } else { hg[i] - alpha * hb[i] };
                step[i] = u / pick.lambda - (c / s) * hb[i];
            }
        } else {
            for i in 0..n {
                step[i] = hg[i] / pick.lambda;
            }
        }
    }

    let kl_cap = 1.5 * cfg.delta;
    let mut params = x0.clone();
    if step.iter().any(|v| v.abs() > 0.0) {
        for k in 0..=cfg.backtrack_steps {
            let scale = cfg.backtrack_coeff.powi(k as i32);
            let mut cand = x0.clone();
            axpy(&mut cand, scale, &step);
            let kl = o.kl(&cand);
            if !kl.is_finite() || kl > kl_cap {
                continue;
            }
            let sr = o.surrogate_reward(&cand);
            let sc = o.surrogate_cost(&cand);
            if !sr.is_finite() || !sc.is_finite() {
                continue;
            }
            let ok = if info.recovery {
                sc < 0.0
            } else {
                let cost_ok = sc <= f64::max(-c, 0.0) + 1e-12;
                let reward_ok = if c < 0.0 { sr > 0.0 } else { true };
                cost_ok && reward_ok
            };
            if ok {
                info.accepted = true;
                info.kl = kl;
                info.surrogate_improve = sr;
                info.cost_change = sc;
                info.step_scale = scale;
                params = cand;
                break;
            }
        }
    }
    CpoStepOutcome {
        params,
        proposed_step: step,
        info,
    }
}

/// Dense reference solvers used by tests to cross-check the iterative path.
pub mod test_support {
    use super::*;

    /// Materialize the damped curvature matrix column by column.
    pub fn dense_curvature(o: &dyn CpoOracle, cfg: &CpoConfig) -> Vec<Vec<f64>> {
        let x0 = o.current();
        let n = x0.len();
        let mut h = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = fisher_vector_product(o, &x0, &e, cfg);
            for i in 0..n {
                h[i][j] = col[i];
            }
        }
        h
    }

    /// Partial-pivot Gaussian elimination.
    pub fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .zip(b)
            .map(|(row, &rhs)| {
                let mut r = row.clone();
                r.push(rhs);
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, piv);
            let d = m[col][col];
            assert!(d.abs() > 1e-300, "singular system");
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = m[i][col] / d;
                for j in col..=n {
                    let v = m[col][j];
                    m[i][j] -= f * v;
                }
            }
        }
        (0..n).map(|i| m[i][n] / m[i][i]).collect()
    }

    /// Closed-form trust-region step from a dense solve of the curvature
    /// system: sqrt(2 delta / g'H^-1 g) * H^-1 g.
    pub fn dense_trust_region_step(o: &dyn CpoOracle, cfg: &CpoConfig) -> Vec<f64> {
        let h = dense_curvature(o, cfg);
        let g = o.grad_surrogate_reward();
        let hg = solve_linear(&h, &g);
        let q: f64 = g.iter().zip(&hg).map(|(a, b)| a * b).sum();
        let coef = (2.0 * cfg.delta / q).sqrt();
        hg.iter().map(|v| v * coef).collect()
    }
}

/// Analytic two-action bandit: action 0 yields the listed reward and cost,
/// action 1 yields zero of both; the policy is a softmax over two logits.
pub struct BanditOracle {
    pub logits: [f64; 2],
    pub reward0: f64,
    pub cost0: f64,
}

impl BanditOracle {
    pub fn p0(logits: &[f64]) -> f64 {
        let z = logits[0] - logits[1];
        1.0 / (1.0 + (-z).exp())
    }
}

impl CpoOracle for BanditOracle {
    fn dim(&self) -> usize {
        2
    }

    fn current(&self) -> Vec<f64> {
        self.logits.to_vec()
    }

    fn surrogate_reward(&self, x: &[f64]) -> f64 {
        (Self::p0(x) - Self::p0(&self.logits)) * self.reward0
    }

    fn surrogate_cost(&self, x: &[f64]) -> f64 {
        (Self::p0(x) - Self::p0(&self.logits)) * self.cost0
    }

    fn kl(&self, x: &[f64]) -> f64 {
        let p = Self::p0(&self.logits);
        let qp = Self::p0(x).clamp(1e-12, 1.0 - 1e-12);
        let p_c = p.clamp(1e-12, 1.0 - 1e-12);
        p_c * (p_c / qp).ln() + (1.0 - p_c) * ((1.0 - p_c) / (1.0 - qp)).ln()
    }

    fn grad_surrogate_reward(&self) -> Vec<f64> {
        let p = Self::p0(&self.logits);
        let d = p * (1.0 - p) * self.reward0;
        vec![d, -d]
    }

    fn grad_surrogate_cost(&self) -> Vec<f64> {
        let p = Self::p0(&self.logits);
        let d = p * (1.0 - p) * self.cost0;
        vec![d, -d]
    }

    fn grad_kl(&self, x: &[f64]) -> Vec<f64> {
        let p = Self::p0(&self.logits).clamp(1e-12, 1.0 - 1e-12);
        let qp = Self::p0(x).clamp(1e-12, 1.0 - 1e-12);
        let dkl_dq = -p / qp + (1.0 - p) / (1.0 - qp);
        let dq = qp * (1.0 - qp);
        vec![dkl_dq * dq, -dkl_dq * dq]
    }
}

/// Run the bandit for a number of constrained iterations; returns the
/// probability of the costly action after each accepted step.
pub fn run_bandit(
    start_logits: [f64; 2],
    reward0: f64,
    cost0: f64,
    iters: usize,
    cfg: &CpoConfig,
) -> (Vec<f64>, Vec<CpoDiagnostics>) {
    let mut logits = start_logits;
    let mut ps = Vec::new();
    let mut diags = Vec::new();
    for _ in 0..iters {
        let o = BanditOracle {
            logits,
            reward0,
            cost0,
        };
        let c = BanditOracle::p0(&logits) * cost0 - cfg.d_cost;
        let out = cpo_step(&o, c, cfg);
        logits = [out.params[0], out.params[1]];
        ps.push(BanditOracle::p0(&logits));
        diags.push(out.info);
    }
    (ps, diags)
}
