//! Centralised distributional critic.
//!
//! `G_φ(o, a)` maps the team's concatenated observations and one-hot actions
//! to `K` return samples, read as the equally weighted mixture of Diracs
//! `(1/K) Σ_j δ_{G^j}`. Sample `j` is regressed towards quantile level
//! `ω_j` with the quantile Huber loss against the distributional Bellman
//! target `r + γ G(o', a*)`, where `a*` maximises the mean of `G(o', ·)`.
//!
//! Joint actions are indexed in mixed radix with agent 0 most significant:
//! `index = Σ_i a_i · |A|^(n-1-i)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Init, Matrix, Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_JOINT_ACTION_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileLevels {
    /// `ω_j = (2j - 1) / 2K`.
    Midpoint,
    /// `ω_j = j / K`.
    Endpoint,
}

impl QuantileLevels {
    pub fn levels(self, k: usize) -> Vec<f64> {
        let kf = k as f64;
        (1..=k)
            .map(|j| match self {
                QuantileLevels::Midpoint => (2 * j - 1) as f64 / (2.0 * kf),
                QuantileLevels::Endpoint => j as f64 / kf,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    net: Mlp,
    n_agents: usize,
    obs_len: usize,
    n_actions: usize,
    levels: Vec<f64>,
}

/// `K` return samples for one `(o, a)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileEstimate {
    pub values: Vec<f64>,
}

impl QuantileEstimate {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Detached Bellman target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub values: Vec<f64>,
    /// Greedy next joint action, `None` for terminal transitions.
    pub greedy_action: Option<Vec<usize>>,
}

impl CriticNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_agents: usize,
        obs_len: usize,
        n_actions: usize,
        k: usize,
        levels: QuantileLevels,
        hidden: &[usize],
        init: Init,
        name: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("quantile count must be at least 1"));
        }
        let spec = MlpSpec::new(n_agents * (obs_len + n_actions), hidden, k);
        Ok(CriticNet { net: Mlp::new(spec, init, name, rng)?, n_agents, obs_len, n_actions, levels: levels.levels(k) })
    }

    pub fn from_net(net: Mlp, n_agents: usize, obs_len: usize, n_actions: usize, levels: QuantileLevels) -> Result<Self> {
        if net.spec().input_dim != n_agents * (obs_len + n_actions) {
            return Err(Error::config("critic network input does not match team size"));
        }
        let k = net.spec().output_dim;
        Ok(CriticNet { net, n_agents, obs_len, n_actions, levels: levels.levels(k) })
    }

    pub fn k(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn push_input(&self, joint_obs: &[f64], joint_actions: &[usize], row: &mut Vec<f64>) -> Result<()> {
        if joint_obs.len() != self.n_agents * self.obs_len || joint_actions.len() != self.n_agents {
            return Err(Error::config(format!(
                "critic expects {} observation values and {} actions, got {} and {}",
                self.n_agents * self.obs_len,
                self.n_agents,
                joint_obs.len(),
                joint_actions.len()
            )));
        }
        row.extend_from_slice(joint_obs);
        for &a in joint_actions {
            if a >= self.n_actions {
                return Err(Error::config(format!("action {a} out of range")));
            }
            row.extend((0..self.n_actions).map(|j| if j == a { 1.0 } else { 0.0 }));
        }
        Ok(())
    }

    /// Batched evaluation; row `t` of the result holds the quantiles of pair `t`.
    pub fn forward_batch(&self, pairs: &[(&[f64], &[usize])]) -> Result<(Matrix, crate::diffcore::ForwardCache)> {
        let width = self.net.spec().input_dim;
        let mut data = Vec::with_capacity(pairs.len() * width);
        for (o, a) in pairs {
            self.push_input(o, a, &mut data)?;
        }
        self.net.forward(&Matrix::from_vec(pairs.len(), width, data)?)
    }

    pub fn joint_action_count(&self) -> Option<usize> {
        (0..self.n_agents).try_fold(1usize, |acc, _| acc.checked_mul(self.n_actions))
    }

    pub fn joint_action(&self, mut index: usize) -> Vec<usize> {
        let mut a = vec![0; self.n_agents];
        for slot in (0..self.n_agents).rev() {
            a[slot] = index % self.n_actions;
            index /= self.n_actions;
        }
        a
    }

    /// Mean quantile of every joint action at `joint_obs`, by joint index.
    fn joint_means(&self, joint_obs: &[f64], cap: usize) -> Result<Vec<f64>> {
        let n = self.joint_action_count().filter(|&n| n <= cap).ok_or(Error::EnumerationCap {
            size: (self.n_actions as u128).saturating_pow(self.n_agents as u32),
            cap,
        })?;
        let actions: Vec<Vec<usize>> = (0..n).map(|i| self.joint_action(i)).collect();
        let pairs: Vec<(&[f64], &[usize])> = actions.iter().map(|a| (joint_obs, a.as_slice())).collect();
        let (out, _) = self.forward_batch(&pairs)?;
        Ok((0..n).map(|r| out.row(r).iter().sum::<f64>() / out.cols() as f64).collect())
    }
}

pub fn critic_forward(net: &CriticNet, joint_obs: &[f64], joint_actions: &[usize]) -> Result<QuantileEstimate> {
    let (out, _) = net.forward_batch(&[(joint_obs, joint_actions)])?;
    Ok(QuantileEstimate { values: out.into_vec() })
}

/// Joint action with the largest mean quantile; lowest index wins ties.
pub fn greedy_joint_action(net: &CriticNet, joint_obs_next: &[f64], cap: usize) -> Result<Vec<usize>> {
    let means = net.joint_means(joint_obs_next, cap)?;
    let mut best = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = i;
        }
    }
    Ok(net.joint_action(best))
}

/// `r + γ G(o', a*)` elementwise, or `r` everywhere when `done`.
pub fn bellman_target(net: &CriticNet, reward: f64, done: bool, joint_obs_next: &[f64], gamma: f64, cap: usize) -> Result<TargetDistribution> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if done {
        return Ok(TargetDistribution { values: vec![reward; net.k()], greedy_action: None });
    }
    let a_star = greedy_joint_action(net, joint_obs_next, cap)?;
    let next = critic_forward(net, joint_obs_next, &a_star)?;
    Ok(TargetDistribution {
        values: next.values.iter().map(|g| reward + gamma * g).collect(),
        greedy_action: Some(a_star),
    })
}

/// Huber function with threshold `kappa`.
pub fn huber(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        0.5 * u * u
    } else {
        kappa * (u.abs() - 0.5 * kappa)
    }
}

fn huber_grad(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        u
    } else {
        kappa * u.signum()
    }
}

/// `ρ_ω(u) = |ω - 1[u ≤ 0]| · L_κ(u)`.
pub fn quantile_huber(u: f64, omega: f64, kappa: f64) -> f64 {
    let indicator = if u <= 0.0 { 1.0 } else { 0.0 };
    (omega - indicator).abs() * huber(u, kappa)
}

/// `(1/K²) Σ_{j'} Σ_j ρ_{ω_j}(target_{j'} - predicted_j)` and its gradient
/// with respect to `predicted`.
pub fn quantile_huber_loss(predicted: &[f64], target: &[f64], kappa: f64, levels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if !(kappa > 0.0) {
        return Err(Error::config("kappa must be positive"));
    }
    if predicted.len() != levels.len() || target.len() != predicted.len() || predicted.is_empty() {
        return Err(Error::config("predicted, target and levels must share one positive length"));
    }
    let k = predicted.len() as f64;
    let norm = 1.0 / (k * k);
    let mut loss = 0.0;
    let mut grad = vec![0.0; predicted.len()];
    for &tgt in target {
        for ((&g, &omega), d) in predicted.iter().zip(levels).zip(grad.iter_mut()) {
            let u = tgt - g;
            let indicator = if u <= 0.0 { 1.0 } else { 0.0 };
            let w = (omega - indicator).abs();
            loss += norm * w * huber(u, kappa);
            // du/dG = -1
            *d -= norm * w * huber_grad(u, kappa);
        }
    }
    Ok((loss, grad))
}

/// One critic training transition.
#[derive(Debug, Clone, Copy)]
pub struct CriticSample<'a> {
    pub joint_obs: &'a [f64],
    pub joint_actions: &'a [usize],
    pub reward: f64,
    pub done: bool,
    pub joint_obs_next: &'a [f64],
}

/// Targets for a batch, computed from the current (detached) parameters.
pub fn batch_targets(net: &CriticNet, batch: &[CriticSample<'_>], gamma: f64, cap: usize) -> Result<Vec<TargetDistribution>> {
    batch.iter().map(|s| bellman_target(net, s.reward, s.done, s.joint_obs_next, gamma, cap)).collect()
}

/// Mean quantile Huber loss over a batch against precomputed targets.
/// Gradients are added into the critic's buffers.
pub fn quantile_critic_loss(net: &mut CriticNet, batch: &[CriticSample<'_>], targets: &[TargetDistribution], kappa: f64) -> Result<f64> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::config("critic batch must be non-empty and match its targets"));
    }
    let pairs: Vec<(&[f64], &[usize])> = batch.iter().map(|s| (s.joint_obs, s.joint_actions)).collect();
    let (out, cache) = net.forward_batch(&pairs)?;
    let n = batch.len() as f64;
    let mut grad = Matrix::zeros(out.rows(), out.cols());
    let mut total = 0.0;
    for (t, target) in targets.iter().enumerate() {
        let (l, g) = quantile_huber_loss(out.row(t), &target.values, kappa, &net.levels)?;
        total += l / n;
        grad.row_mut(t).iter_mut().zip(g).for_each(|(d, v)| *d = v / n);
    }
    if !total.is_finite() {
        return Err(Error::numeric("non-finite critic loss"));
    }
    net.net.backward(&cache, &grad)?;
    Ok(total)
}

/// Mean squared TD error of a `K = 1` critic with target
/// `r + γ (1 - done) max_a' Q(o', a')`. Gradients are added into the buffers.
pub fn scalar_critic_loss(net: &mut CriticNet, batch: &[CriticSample<'_>], gamma: f64, cap: usize) -> Result<f64> {
    if net.k() != 1 {
        return Err(Error::config(format!("scalar critic loss needs K = 1, network has K = {}", net.k())));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if batch.is_empty() {
        return Err(Error::config("empty critic batch"));
    }
    let targets: Vec<f64> = batch
        .iter()
        .map(|s| {
            if s.done {
                Ok(s.reward)
            } else {
                let best = net.joint_means(s.joint_obs_next, cap)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
                Ok(s.reward + gamma * best)
            }
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(&[f64], &[usize])> = batch.iter().map(|s| (s.joint_obs, s.joint_actions)).collect();
    let (out, cache) = net.forward_batch(&pairs)?;
    let n = batch.len() as f64;
    let mut grad = Matrix::zeros(out.rows(), 1);
    let mut total = 0.0;
    for (t, y) in targets.iter().enumerate() {
        let diff = out.row(t)[0] - y;
        total += diff * diff / n;
        grad.row_mut(t)[0] = 2.0 * diff / n;
    }
    if !total.is_finite() {
        return Err(Error::numeric("non-finite critic loss"));
    }
    net.net.backward(&cache, &grad)?;
    Ok(total)
}
