//! Built-in gradient checks and closed-form oracles, run by `domac selftest`
//! and by the test suites.

use rand::Rng as _;

use crate::cdc::{quantile_critic_loss, scalar_critic_loss, CriticNet, CriticSample, QuantileLevels, TargetDistribution};
use crate::diffcore::{central_differences, max_relative_error, softmax, ActionDistribution, Init, Matrix, Mlp};
use crate::env::{transition, Action, GridConfig, GridState, Pos};
use crate::error::Result;
use crate::metrics::kld;
use crate::oma::{actor_loss, marginal_policy_exact, ActorSample, ConditionalPolicy};
use crate::oppmodel::{enumerate_actions, OpponentModel};
use crate::rng::{stream, Purpose, Rng};

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Worst relative error seen per gradient family.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientReport {
    pub actor_policy: f64,
    pub actor_models: f64,
    pub quantile_huber: f64,
    pub scalar_td: f64,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        self.actor_policy.max(self.actor_models).max(self.quantile_huber).max(self.scalar_td)
    }
}

/// Relative error of the gradient a closure accumulates into `net` against
/// central differences of `loss` over that net's flat parameters.
fn check_net(net: &Mlp, analytic: Vec<f64>, mut loss: impl FnMut(&Mlp) -> f64) -> f64 {
    let mut probe = net.clone();
    let numeric = central_differences(
        |x| {
            probe.set_flat_values(x);
            loss(&probe)
        },
        &net.flat_values(),
        FD_STEP,
    );
    max_relative_error(&analytic, &numeric)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Network inputs on a coarse lattice in `[-1, 1]`, as the environment's
/// normalised offsets are. A weight fed by an input near but not at zero has
/// a gradient below the finite-difference noise, where relative error says
/// nothing; on the lattice such gradients are either exactly zero or large.
fn lattice(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.gen_range(-5..=5)) / 5.0).collect()
}

/// A random small actor problem: policy, models and a batch of transitions.
struct ActorDraw {
    policy: ConditionalPolicy,
    models: Vec<OpponentModel>,
    obs: Vec<Vec<f64>>,
    actions: Vec<usize>,
    q: Vec<f64>,
    joints: Vec<Vec<Vec<usize>>>,
    weights: Vec<f64>,
    alpha: f64,
}

impl ActorDraw {
    fn new(rng: &mut Rng) -> Result<Self> {
        let obs_len = 4;
        let n_opp = rng.gen_range(1..=2);
        let dims: Vec<usize> = (0..n_opp).map(|_| rng.gen_range(2..=4)).collect();
        let policy = ConditionalPolicy::new(obs_len, &dims, 5, &[6, 5], Init::ScaledUniform, "pi", rng)?;
        let models = dims
            .iter()
            .enumerate()
            .map(|(k, &d)| OpponentModel::new(obs_len, n_opp, k, d, &[5], Init::ScaledUniform, "om", rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = rng.gen_range(1..=3);
        let exact = rng.gen_bool(0.5);
        let all = enumerate_actions(&dims, 1000)?;
        let joints = (0..batch)
            .map(|_| {
                if exact {
                    all.clone()
                } else {
                    (0..3).map(|_| dims.iter().map(|&d| rng.gen_range(0..d)).collect()).collect()
                }
            })
            .collect();
        Ok(ActorDraw {
            policy,
            models,
            obs: (0..batch).map(|_| lattice(rng, obs_len)).collect(),
            actions: (0..batch).map(|_| rng.gen_range(0..5)).collect(),
            q: uniform(rng, -2.0, 2.0, batch),
            joints,
            weights: uniform(rng, 0.5, 1.5, batch),
            alpha: rng.gen_range(0.0..0.2),
        })
    }

    /// Marginal probability of the taken action, written as the first
    /// conditional plus weighted deviations from it, with weights taken
    /// relative to the first joint. This equals the self-normalised mixture,
    /// and keeps invariances exact in floating point: the softmax denominator,
    /// repeated joints and opponents predicted identically in every joint all
    /// cancel without rounding, so their true zero gradients stay zero.
    fn rho(&self, policy: &ConditionalPolicy, models: &[OpponentModel], t: usize) -> f64 {
        let (base, dev) = self.rho_parts(policy, models, t);
        base + dev
    }

    /// `(π(a | â_1), ρ(a) - π(a | â_1))`. Only the second part depends on the
    /// models.
    fn rho_parts(&self, policy: &ConditionalPolicy, models: &[OpponentModel], t: usize) -> (f64, f64) {
        let obs = &self.obs[t];
        let n_opp = models.len();
        let logits: Vec<Vec<f64>> = models
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut row = obs.clone();
                row.extend((0..n_opp).map(|j| if j == k { 1.0 } else { 0.0 }));
                m.net().forward(&Matrix::from_vec(1, row.len(), row).unwrap()).unwrap().0.into_vec()
            })
            .collect();
        let joints = &self.joints[t];
        let first = &joints[0];
        let pi = |j: &[usize]| policy.conditional(obs, j).unwrap().probs()[self.actions[t]];
        let base = pi(first);
        let mut rel = Vec::with_capacity(joints.len());
        for j in joints {
            let r: f64 = j.iter().zip(first).enumerate().map(|(k, (&a, &a0))| (logits[k][a] - logits[k][a0]).exp()).product();
            rel.push((r, pi(j) - base));
        }
        let total: f64 = rel.iter().map(|(r, _)| r).sum();
        (base, rel.iter().map(|(r, dev)| r / total * dev).sum::<f64>())
    }

    /// Surrogate with coefficients frozen at `coeffs`.
    fn surrogate(&self, policy: &ConditionalPolicy, models: &[OpponentModel], coeffs: &[f64]) -> f64 {
        let total: f64 = self.weights.iter().sum();
        (0..self.obs.len()).map(|t| -self.weights[t] / total * coeffs[t] * self.rho(policy, models, t).ln()).sum()
    }

    /// The surrogate less `ln π(a | â_1)`, which is constant in the model
    /// parameters. Same model gradient, with far less rounding in the value
    /// being differenced.
    fn model_surrogate(&self, models: &[OpponentModel], coeffs: &[f64]) -> f64 {
        let total: f64 = self.weights.iter().sum();
        (0..self.obs.len())
            .map(|t| {
                let (base, dev) = self.rho_parts(&self.policy, models, t);
                -self.weights[t] / total * coeffs[t] * (dev / base).ln_1p()
            })
            .sum()
    }

    fn coefficients(&self) -> Vec<f64> {
        (0..self.obs.len())
            .map(|t| self.q[t] - self.alpha * self.rho(&self.policy, &self.models, t).ln() - self.alpha)
            .collect()
    }

    /// (policy error, worst model error).
    fn check(&self) -> Result<(f64, f64)> {
        let coeffs = self.coefficients();
        let mut policy = self.policy.clone();
        let mut models = self.models.clone();
        let samples: Vec<ActorSample<'_>> = (0..self.obs.len())
            .map(|t| ActorSample {
                obs: &self.obs[t],
                action: self.actions[t],
                q_value: self.q[t],
                joints: &self.joints[t],
                oracle: None,
                weight: self.weights[t],
            })
            .collect();
        actor_loss(&mut policy, &mut models, &samples, self.alpha)?;
        let pol_err = check_net(self.policy.net(), policy.net().flat_grads(), |net| {
            let p = ConditionalPolicy::from_net(net.clone(), self.policy.obs_len(), self.policy.opp_dims()).unwrap();
            self.surrogate(&p, &self.models, &coeffs)
        });
        let mut model_err: f64 = 0.0;
        for (k, trained) in models.iter().enumerate() {
            let err = check_net(self.models[k].net(), trained.net().flat_grads(), |net| {
                let mut ms = self.models.clone();
                ms[k] = OpponentModel::from_net(net.clone(), 4, self.models.len(), k).unwrap();
                self.model_surrogate(&ms, &coeffs)
            });
            model_err = model_err.max(err);
        }
        Ok((pol_err, model_err))
    }
}

fn random_critic(rng: &mut Rng, k: usize) -> Result<CriticNet> {
    CriticNet::new(2, 3, 5, k, QuantileLevels::Midpoint, &[6, 5], Init::ScaledUniform, "g", rng)
}

struct CriticDraw {
    obs: Vec<Vec<f64>>,
    next: Vec<Vec<f64>>,
    actions: Vec<Vec<usize>>,
    rewards: Vec<f64>,
    done: Vec<bool>,
}

impl CriticDraw {
    fn new(rng: &mut Rng) -> Self {
        // An odd batch: outside the quadratic zone the median output's
        // gradient is a sum of +-1/2 terms, and an even count can cancel
        // exactly, leaving a true zero that differences only see as noise.
        let n = [1, 3][rng.gen_range(0..2)];
        CriticDraw {
            obs: (0..n).map(|_| lattice(rng, 6)).collect(),
            next: (0..n).map(|_| lattice(rng, 6)).collect(),
            actions: (0..n).map(|_| vec![rng.gen_range(0..5), rng.gen_range(0..5)]).collect(),
            rewards: uniform(rng, -1.0, 5.0, n),
            done: (0..n).map(|_| rng.gen_bool(0.3)).collect(),
        }
    }

    fn samples(&self) -> Vec<CriticSample<'_>> {
        (0..self.obs.len())
            .map(|t| CriticSample {
                joint_obs: &self.obs[t],
                joint_actions: &self.actions[t],
                reward: self.rewards[t],
                done: self.done[t],
                joint_obs_next: &self.next[t],
            })
            .collect()
    }
}

/// Quantile Huber loss against fixed random targets, which keeps the target
/// detached as in training.
fn quantile_check(rng: &mut Rng) -> Result<f64> {
    let k = rng.gen_range(1..=5);
    let critic = random_critic(rng, k)?;
    let draw = CriticDraw::new(rng);
    let kappa = rng.gen_range(0.2..2.0);
    // Spread targets far enough that some residuals fall outside the quadratic zone.
    let targets: Vec<TargetDistribution> = (0..draw.obs.len())
        .map(|_| TargetDistribution { values: uniform(rng, -3.0, 3.0, k), greedy_action: None })
        .collect();
    let mut analytic = critic.clone();
    quantile_critic_loss(&mut analytic, &draw.samples(), &targets, kappa)?;
    Ok(check_net(critic.net(), analytic.net().flat_grads(), |net| {
        let mut c = CriticNet::from_net(net.clone(), 2, 3, 5, QuantileLevels::Midpoint).unwrap();
        quantile_critic_loss(&mut c, &draw.samples(), &targets, kappa).unwrap()
    }))
}

/// Squared TD loss with `γ = 0`, where the target does not depend on the
/// parameters and the loss is smooth.
fn scalar_check(rng: &mut Rng) -> Result<f64> {
    let critic = random_critic(rng, 1)?;
    let draw = CriticDraw::new(rng);
    let mut analytic = critic.clone();
    scalar_critic_loss(&mut analytic, &draw.samples(), 0.0, 100)?;
    Ok(check_net(critic.net(), analytic.net().flat_grads(), |net| {
        let mut c = CriticNet::from_net(net.clone(), 2, 3, 5, QuantileLevels::Midpoint).unwrap();
        scalar_critic_loss(&mut c, &draw.samples(), 0.0, 100).unwrap()
    }))
}

/// Runs `draws` random draws of every gradient check.
pub fn gradient_checks(draws: usize, seed: u64) -> Result<GradientReport> {
    let mut report = GradientReport::default();
    for d in 0..draws {
        let mut rng = stream(seed, Purpose::Test, d as u64);
        let (p, m) = ActorDraw::new(&mut rng)?.check()?;
        report.actor_policy = report.actor_policy.max(p);
        report.actor_models = report.actor_models.max(m);
        report.quantile_huber = report.quantile_huber.max(quantile_check(&mut rng)?);
        report.scalar_td = report.scalar_td.max(scalar_check(&mut rng)?);
    }
    Ok(report)
}

/// `Σ_a ∇ρ(a) · [Q(a) - α ln ρ(a) - α]` for one observation, computed by the
/// product rule through every conditional and model on an exact enumeration.
/// Returns flat gradients `(policy, model)` for a single-opponent toy.
pub fn score_function_gradient(
    policy: &ConditionalPolicy,
    model: &OpponentModel,
    obs: &[f64],
    q: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mu = model.predict(obs)?;
    let d = mu.len();
    let joints: Vec<Vec<usize>> = (0..d).map(|j| vec![j]).collect();
    let conds: Vec<ActionDistribution> = joints.iter().map(|j| policy.conditional(obs, j)).collect::<Result<_>>()?;
    let n = policy.n_actions();
    let rho: Vec<f64> = (0..n).map(|a| (0..d).map(|j| mu.probs()[j] * conds[j].probs()[a]).sum()).collect();
    let coeff: Vec<f64> = (0..n).map(|a| q[a] - alpha * rho[a].ln() - alpha).collect();

    // ∂/∂π_j logits: Σ_a c(a) μ_j π_j(a)(δ_ab - π_j(b)).
    let mut pol = policy.clone();
    pol.net_mut().zero_grad();
    for (j, joint) in joints.iter().enumerate() {
        let p = conds[j].probs();
        let mean_c: f64 = (0..n).map(|a| p[a] * coeff[a]).sum();
        let grad: Vec<f64> = (0..n).map(|b| mu.probs()[j] * p[b] * (coeff[b] - mean_c)).collect();
        let mut input = obs.to_vec();
        input.extend((0..d).map(|i| if i == joint[0] { 1.0 } else { 0.0 }));
        let (_, cache) = pol.net().forward(&Matrix::from_vec(1, input.len(), input)?)?;
        pol.net_mut().backward(&cache, &Matrix::from_vec(1, n, grad)?)?;
    }
    // ∂/∂μ logits: Σ_a c(a) Σ_j π_j(a) μ_j (δ_jm - μ_m).
    let s: Vec<f64> = (0..d).map(|j| (0..n).map(|a| coeff[a] * conds[j].probs()[a]).sum()).collect();
    let mean_s: f64 = (0..d).map(|j| mu.probs()[j] * s[j]).sum();
    let grad: Vec<f64> = (0..d).map(|m| mu.probs()[m] * (s[m] - mean_s)).collect();
    let mut mdl = model.clone();
    mdl.net_mut().zero_grad();
    let mut input = obs.to_vec();
    input.push(1.0);
    let (_, cache) = mdl.net().forward(&Matrix::from_vec(1, input.len(), input)?)?;
    mdl.net_mut().backward(&cache, &Matrix::from_vec(1, d, grad)?)?;
    Ok((pol.net().flat_grads(), mdl.net().flat_grads()))
}

/// Worst absolute difference between the surrogate's gradient (with sample
/// weights `λ_a = ρ(a)` over every action) and the negated score-function
/// expectation, over `draws` random toys.
pub fn score_function_agreement(draws: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let mut rng = stream(seed, Purpose::Test, 10_000 + d as u64);
        let obs = uniform(&mut rng, -1.0, 1.0, 4);
        let mut policy = ConditionalPolicy::new(4, &[5], 5, &[8, 8], Init::ScaledUniform, "pi", &mut rng)?;
        let mut models = vec![OpponentModel::new(4, 1, 0, 5, &[8], Init::ScaledUniform, "om", &mut rng)?];
        let q = uniform(&mut rng, -2.0, 2.0, 5);
        let alpha = rng.gen_range(0.0..0.1);
        let (want_pi, want_mu) = score_function_gradient(&policy, &models[0], &obs, &q, alpha)?;
        let exact = marginal_policy_exact(&policy, &models, &obs, 1000)?;
        let joints = exact.joints.clone();
        let samples: Vec<ActorSample<'_>> = (0..5)
            .map(|a| ActorSample { obs: &obs, action: a, q_value: q[a], joints: &joints, oracle: None, weight: exact.distribution.probs()[a] })
            .collect();
        policy.net_mut().zero_grad();
        models[0].net_mut().zero_grad();
        actor_loss(&mut policy, &mut models, &samples, alpha)?;
        // The surrogate is minimised, the estimator is an ascent direction.
        for (g, w) in policy.net().flat_grads().iter().zip(&want_pi).chain(models[0].net().flat_grads().iter().zip(&want_mu)) {
            worst = worst.max((g + w).abs());
        }
    }
    Ok(worst)
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

fn env_reward(predators: &[Pos], prey: Pos) -> Result<f64> {
    let cfg = GridConfig::pp2v1();
    let state = GridState { predators: predators.to_vec(), preys: vec![prey], prey_alive: vec![true], step_count: 0 };
    let t = transition(&cfg, &state, &[Action::Noop, Action::Noop], &[Some(Action::Noop)])?;
    Ok(t.reward)
}

/// Every built-in check with a short detail line.
pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    match gradient_checks(20, 1) {
        Ok(r) => {
            for (name, v) in [
                ("gradient: actor policy", r.actor_policy),
                ("gradient: actor opponent models", r.actor_models),
                ("gradient: quantile huber", r.quantile_huber),
                ("gradient: scalar td", r.scalar_td),
            ] {
                out.push(check(name, v < FD_TOLERANCE, format!("max relative error {v:.3e}")));
            }
        }
        Err(e) => out.push(check("gradient checks", false, e.to_string())),
    }
    match score_function_agreement(10, 2) {
        Ok(v) => out.push(check("oracle: score-function gradient", v < 1e-6, format!("max abs difference {v:.3e}"))),
        Err(e) => out.push(check("oracle: score-function gradient", false, e.to_string())),
    }
    let sm = softmax(&[0.0, 3f64.ln()]).map(|d| d.probs().to_vec()).unwrap_or_default();
    out.push(check("oracle: softmax", sm.len() == 2 && (sm[0] - 0.25).abs() < 1e-12 && (sm[1] - 0.75).abs() < 1e-12, format!("{sm:?}")));
    let kl = ActionDistribution::new(vec![0.5, 0.5])
        .and_then(|t| kld(&t, &ActionDistribution::new(vec![0.75, 0.25])?))
        .unwrap_or(f64::NAN);
    out.push(check("oracle: kld", (kl - 0.143841036).abs() < 1e-8, format!("{kl:.9}")));
    let qh = crate::cdc::quantile_huber(2.0, 0.25, 1.0);
    out.push(check("oracle: quantile huber", (qh - 0.375).abs() < 1e-15, format!("{qh}")));
    let rewards = (
        env_reward(&[Pos::new(0, 0), Pos::new(4, 4)], Pos::new(2, 2)),
        env_reward(&[Pos::new(1, 2), Pos::new(4, 4)], Pos::new(2, 2)),
        env_reward(&[Pos::new(1, 2), Pos::new(3, 2)], Pos::new(2, 2)),
    );
    let ok = matches!(rewards, (Ok(a), Ok(b), Ok(c)) if a == -0.01 && (b + 0.51).abs() < 1e-15 && (c - 4.99).abs() < 1e-15);
    out.push(check("oracle: reward rules", ok, format!("{rewards:?}")));
    out
}
