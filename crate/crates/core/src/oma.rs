//! Opponent-model-aided actor.
//!
//! The conditional policy `π(a | â, o)` sees the agent's observation followed
//! by one one-hot slot per opponent holding a predicted opponent action. The
//! acting distribution is the mixture
//!
//! ```text
//! ρ(a | o) = Σ_s π(a | â_s, o) · w_s / Σ_s w_s,     w_s = Π_k μ_k(â_sk | o)
//! ```
//!
//! over either every joint prediction (exact, where `Σ_s w_s = 1`) or `l`
//! joint predictions drawn from the opponent models (sampled, self-normalised).
//!
//! The actor minimises
//!
//! ```text
//! L = -Σ_t λ_t · c_t · ln ρ(a_t | o_t) / Σ_t λ_t,    c_t = Q_t - α ln ρ(a_t | o_t) - α
//! ```
//!
//! with `c_t` held constant. Since `ρ` depends on both the policy and the
//! opponent models, one backward pass yields the score-function gradient for
//! both parameter sets.

use crate::diffcore::{log_softmax_backward, softmax_unchecked, ActionDistribution, Init, Matrix, Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::oppmodel::{enumerate_actions, sample_from, OpponentModel};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPolicy {
    net: Mlp,
    obs_len: usize,
    opp_dims: Vec<usize>,
}

impl ConditionalPolicy {
    /// `opp_dims` lists the predicted-action slot width per opponent; empty
    /// for a policy that conditions on the observation alone.
    pub fn new(obs_len: usize, opp_dims: &[usize], n_actions: usize, hidden: &[usize], init: Init, name: &str, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(obs_len + opp_dims.iter().sum::<usize>(), hidden, n_actions);
        Ok(ConditionalPolicy { net: Mlp::new(spec, init, name, rng)?, obs_len, opp_dims: opp_dims.to_vec() })
    }

    pub fn from_net(net: Mlp, obs_len: usize, opp_dims: &[usize]) -> Result<Self> {
        if net.spec().input_dim != obs_len + opp_dims.iter().sum::<usize>() {
            return Err(Error::config("policy network input does not match observation and opponent slots"));
        }
        Ok(ConditionalPolicy { net, obs_len, opp_dims: opp_dims.to_vec() })
    }

    pub fn n_actions(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn opp_dims(&self) -> &[usize] {
        &self.opp_dims
    }

    pub fn obs_len(&self) -> usize {
        self.obs_len
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn push_input(&self, obs: &[f64], joint: &[usize], row: &mut Vec<f64>) -> Result<()> {
        if obs.len() != self.obs_len || joint.len() != self.opp_dims.len() {
            return Err(Error::config(format!(
                "policy expects {} observation values and {} predicted actions, got {} and {}",
                self.obs_len,
                self.opp_dims.len(),
                obs.len(),
                joint.len()
            )));
        }
        row.extend_from_slice(obs);
        for (&a, &d) in joint.iter().zip(&self.opp_dims) {
            if a >= d {
                return Err(Error::config(format!("predicted action {a} outside slot of width {d}")));
            }
            row.extend((0..d).map(|j| if j == a { 1.0 } else { 0.0 }));
        }
        Ok(())
    }

    /// `π(· | â, o)`.
    pub fn conditional(&self, obs: &[f64], joint: &[usize]) -> Result<ActionDistribution> {
        let mut row = Vec::new();
        self.push_input(obs, joint, &mut row)?;
        let (logits, _) = self.net.forward(&Matrix::from_vec(1, row.len(), row)?)?;
        ActionDistribution::new(softmax_unchecked(logits.as_slice()))
    }

    fn conditionals(&self, obs: &[f64], joints: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let width = self.net.spec().input_dim;
        let mut data = Vec::with_capacity(joints.len() * width);
        for j in joints {
            self.push_input(obs, j, &mut data)?;
        }
        let (logits, _) = self.net.forward(&Matrix::from_vec(joints.len(), width, data)?)?;
        Ok((0..logits.rows()).map(|r| softmax_unchecked(logits.row(r))).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPolicyResult {
    pub distribution: ActionDistribution,
    pub joints: Vec<Vec<usize>>,
    pub conditionals: Vec<ActionDistribution>,
    /// Mixture weights, normalised to sum to one.
    pub weights: Vec<f64>,
    pub mode: AggregationMode,
}

/// Mixture of `π(· | â_s, o)` over the given joint predictions, weighted by
/// `Π_k dists[k](â_sk)` and self-normalised.
pub fn marginal_from_joints(
    policy: &ConditionalPolicy,
    dists: &[ActionDistribution],
    obs: &[f64],
    joints: Vec<Vec<usize>>,
    mode: AggregationMode,
) -> Result<MarginalPolicyResult> {
    if joints.is_empty() {
        return Err(Error::config("no joint predictions to aggregate"));
    }
    if dists.len() != policy.opp_dims.len() {
        return Err(Error::config("one opponent distribution per policy slot is required"));
    }
    let raw: Vec<f64> = joints.iter().map(|j| j.iter().zip(dists).map(|(&a, d)| d.probs()[a]).product()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::numeric("joint prediction weights sum to zero"));
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let conds = policy.conditionals(obs, &joints)?;
    let mut rho = vec![0.0; policy.n_actions()];
    for (c, &w) in conds.iter().zip(&weights) {
        for (r, &p) in rho.iter_mut().zip(c) {
            *r += w * p;
        }
    }
    Ok(MarginalPolicyResult {
        distribution: ActionDistribution::new(rho)?,
        joints,
        conditionals: conds.into_iter().map(ActionDistribution::new).collect::<Result<_>>()?,
        weights,
        mode,
    })
}

fn predict_all(models: &[OpponentModel], obs: &[f64]) -> Result<Vec<ActionDistribution>> {
    models.iter().map(|m| m.predict(obs)).collect()
}

/// Exact mixture over every joint prediction.
pub fn marginal_policy_exact(policy: &ConditionalPolicy, models: &[OpponentModel], obs: &[f64], cap: usize) -> Result<MarginalPolicyResult> {
    let dists = predict_all(models, obs)?;
    let dims: Vec<usize> = dists.iter().map(ActionDistribution::len).collect();
    marginal_from_joints(policy, &dists, obs, enumerate_actions(&dims, cap)?, AggregationMode::Exact)
}

/// Self-normalised mixture over `l` joint predictions drawn from the models.
pub fn marginal_policy_sampled(
    policy: &ConditionalPolicy,
    models: &[OpponentModel],
    obs: &[f64],
    l: usize,
    rng: &mut Rng,
) -> Result<MarginalPolicyResult> {
    if l == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    let dists = predict_all(models, obs)?;
    let joints = if dists.is_empty() {
        vec![Vec::new()]
    } else {
        sample_from(&dists, l, rng).into_iter().map(|s| s.actions).collect()
    };
    marginal_from_joints(policy, &dists, obs, joints, AggregationMode::Sampled)
}

/// Draws an action from `ρ` and returns it with `ln ρ(action)`.
pub fn sample_action(result: &MarginalPolicyResult, rng: &mut Rng) -> (usize, f64) {
    let a = result.distribution.sample(rng);
    (a, result.distribution.probs()[a].ln())
}

pub fn policy_entropy(result: &MarginalPolicyResult) -> f64 {
    result.distribution.entropy()
}

/// One transition fed to [`actor_loss`].
#[derive(Debug, Clone, Copy)]
pub struct ActorSample<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    /// Critic value of the taken joint action (held constant).
    pub q_value: f64,
    /// Joint predictions forming the mixture; `[[]]` without opponents.
    pub joints: &'a [Vec<usize>],
    /// Fixed opponent distributions that replace the models for weighting.
    /// No gradient reaches the models for such samples.
    pub oracle: Option<&'a [ActionDistribution]>,
    /// Importance weight `λ_t`; 1 for ordinary on-policy data.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorLossReport {
    pub loss: f64,
    /// Mean entropy of `ρ` over the batch.
    pub entropy: f64,
    pub policy_grad_norm: f64,
    pub model_grad_norms: Vec<f64>,
}

/// Evaluates the surrogate and adds its gradient into the policy and model
/// gradient buffers.
pub fn actor_loss(
    policy: &mut ConditionalPolicy,
    models: &mut [OpponentModel],
    samples: &[ActorSample<'_>],
    alpha: f64,
) -> Result<ActorLossReport> {
    if samples.is_empty() {
        return Err(Error::config("actor loss over an empty batch"));
    }
    if models.len() != policy.opp_dims.len() {
        return Err(Error::config("one opponent model per policy slot is required"));
    }
    for (m, &d) in models.iter().zip(&policy.opp_dims) {
        if m.output_dim() != d {
            return Err(Error::config("opponent model output does not match policy slot width"));
        }
    }
    let total_weight: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total_weight > 0.0) {
        return Err(Error::numeric("sample weights must sum to a positive value"));
    }

    // Opponent model predictions for every sample whose weights come from the models.
    let modeled: Vec<usize> = (0..samples.len()).filter(|&t| samples[t].oracle.is_none()).collect();
    let mut model_row = vec![usize::MAX; samples.len()];
    for (r, &t) in modeled.iter().enumerate() {
        model_row[t] = r;
    }
    let mut model_probs = Vec::with_capacity(models.len());
    let mut model_caches = Vec::with_capacity(models.len());
    if !modeled.is_empty() && !models.is_empty() {
        let obs: Vec<&[f64]> = modeled.iter().map(|&t| samples[t].obs).collect();
        for m in models.iter() {
            let (p, c) = m.predict_batch(&obs)?;
            model_probs.push(p);
            model_caches.push(c);
        }
    }

    // Conditional policy rows, one per (transition, joint prediction).
    let width = policy.net.spec().input_dim;
    let n_actions = policy.n_actions();
    let mut offsets = Vec::with_capacity(samples.len() + 1);
    let mut data = Vec::new();
    offsets.push(0);
    for s in samples {
        if s.joints.is_empty() {
            return Err(Error::config("transition without joint predictions"));
        }
        for j in s.joints {
            policy.push_input(s.obs, j, &mut data)?;
        }
        offsets.push(offsets.last().unwrap() + s.joints.len());
    }
    let rows = *offsets.last().unwrap();
    let (logits, policy_cache) = policy.net.forward(&Matrix::from_vec(rows, width, data)?)?;
    let cond: Vec<Vec<f64>> = (0..rows).map(|r| softmax_unchecked(logits.row(r))).collect();

    let mut policy_grad = Matrix::zeros(rows, n_actions);
    let mut model_grads: Vec<Matrix> =
        models.iter().map(|m| Matrix::zeros(modeled.len(), m.output_dim())).collect();
    let mut loss = 0.0;
    let mut entropy = 0.0;
    let mut scratch = vec![0.0; n_actions];

    for (t, s) in samples.iter().enumerate() {
        if s.action >= n_actions {
            return Err(Error::config(format!("action {} out of range", s.action)));
        }
        let range = offsets[t]..offsets[t + 1];
        let raw: Vec<f64> = s
            .joints
            .iter()
            .map(|j| match s.oracle {
                Some(d) => j.iter().zip(d).map(|(&a, dk)| dk.probs()[a]).product(),
                None => j.iter().enumerate().map(|(k, &a)| model_probs[k][model_row[t]][a]).product(),
            })
            .collect();
        let w_total: f64 = raw.iter().sum();
        let mut rho = vec![0.0; n_actions];
        for (r, &w) in range.clone().zip(&raw) {
            for (acc, &p) in rho.iter_mut().zip(&cond[r]) {
                *acc += p * w / w_total;
            }
        }
        let rho_a = rho[s.action];
        let log_rho = rho_a.ln();
        let coeff = s.q_value - alpha * log_rho - alpha;
        let scale = s.weight / total_weight;
        loss -= scale * coeff * log_rho;
        entropy -= rho.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();

        // dL/dρ(a_t)
        let g = -scale * coeff / rho_a;
        for (r, &w) in range.zip(&raw) {
            let p = &cond[r];
            // Through π_s(a_t): d/dlogits = G · π_s(a) (e_a - π_s).
            let gs = g * w / w_total * p[s.action];
            let row = policy_grad.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = gs * ((j == s.action) as u8 as f64 - p[j]);
            }
            if s.oracle.is_none() {
                // Through ln w_s = Σ_k ln μ_k(â_sk).
                let d_log_w = g * (p[s.action] - rho_a) / w_total * w;
                let joint = &s.joints[r - offsets[t]];
                for (k, &a) in joint.iter().enumerate() {
                    model_grads[k].row_mut(model_row[t])[a] += d_log_w;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite actor loss {loss}")));
    }

    policy.net.backward(&policy_cache, &policy_grad)?;
    for (k, m) in models.iter_mut().enumerate() {
        if model_caches.is_empty() {
            break;
        }
        let probs = &model_probs[k];
        let grads = &mut model_grads[k];
        for r in 0..modeled.len() {
            scratch.resize(probs[r].len(), 0.0);
            log_softmax_backward(&probs[r], grads.row(r), &mut scratch);
            grads.row_mut(r).copy_from_slice(&scratch);
        }
        m.net_mut().backward(&model_caches[k], grads)?;
    }

    let norm = |net: &Mlp| net.params().iter().flat_map(|p| &p.grads).map(|g| g * g).sum::<f64>().sqrt();
    Ok(ActorLossReport {
        loss,
        entropy: entropy / samples.len() as f64,
        policy_grad_norm: norm(&policy.net),
        model_grad_norms: models.iter().map(|m| norm(m.net())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamBlock;
    use crate::oppmodel::DEFAULT_ENUMERATION_CAP;
    use crate::rng::{stream, Purpose};

    const OBS: [f64; 4] = [0.1, -0.3, 0.7, 0.2];

    fn policy(opp_dims: &[usize], seed: u64) -> ConditionalPolicy {
        ConditionalPolicy::new(4, opp_dims, 5, &[8, 8], Init::ScaledUniform, "pi", &mut stream(seed, Purpose::Test, 0)).unwrap()
    }

    fn models(n: usize, d: usize, seed: u64) -> Vec<OpponentModel> {
        (0..n)
            .map(|k| OpponentModel::new(4, n, k, d, &[8], Init::ScaledUniform, "om", &mut stream(seed, Purpose::Test, 10 + k as u64)).unwrap())
            .collect()
    }

    /// Builds a model whose output is a fixed distribution: zero weights, bias = log-probs.
    fn fixed_model(probs: &[f64]) -> OpponentModel {
        let spec = MlpSpec::new(5, &[], probs.len());
        let w = ParamBlock::zeros("w0", vec![5, probs.len()]);
        let mut b = ParamBlock::zeros("b0", vec![probs.len()]);
        b.values = probs.iter().map(|p| if *p > 0.0 { p.ln() } else { -800.0 }).collect();
        OpponentModel::from_net(Mlp::from_params(spec, vec![w, b]).unwrap(), 4, 1, 0).unwrap()
    }

    #[test]
    fn deterministic_model_gives_single_conditional() {
        let pi = policy(&[5], 1);
        let m = [fixed_model(&[1.0, 0.0, 0.0, 0.0, 0.0])];
        let r = marginal_policy_exact(&pi, &m, &OBS, DEFAULT_ENUMERATION_CAP).unwrap();
        let direct = pi.conditional(&OBS, &[0]).unwrap();
        for (a, b) in r.distribution.probs().iter().zip(direct.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut rng = stream(2, Purpose::Test, 0);
        for l in [1, 3, 17] {
            let s = marginal_policy_sampled(&pi, &m, &OBS, l, &mut rng).unwrap();
            for (a, b) in s.distribution.probs().iter().zip(direct.probs()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn convex_mixture_of_two_conditionals() {
        // π(·|â=0) = e_0, π(·|â=1) = e_1 via a linear net with large logits.
        let spec = MlpSpec::new(6, &[], 2);
        let mut w = ParamBlock::zeros("w0", vec![6, 2]);
        w.values[4 * 2] = 800.0; // slot 0 → action 0
        w.values[5 * 2 + 1] = 800.0; // slot 1 → action 1
        let pi = ConditionalPolicy::from_net(Mlp::from_params(spec, vec![w, ParamBlock::zeros("b0", vec![2])]).unwrap(), 4, &[2]).unwrap();
        let m = [fixed_model(&[0.5, 0.5])];
        let r = marginal_policy_exact(&pi, &m, &OBS, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(r.distribution.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn exact_matches_brute_force() {
        let pi = policy(&[5, 5], 3);
        let m = models(2, 5, 4);
        let r = marginal_policy_exact(&pi, &m, &OBS, DEFAULT_ENUMERATION_CAP).unwrap();
        let (m0, m1) = (m[0].predict(&OBS).unwrap(), m[1].predict(&OBS).unwrap());
        let mut rho = [0.0; 5];
        for a0 in 0..5 {
            for a1 in 0..5 {
                let c = pi.conditional(&OBS, &[a0, a1]).unwrap();
                for a in 0..5 {
                    rho[a] += c.probs()[a] * m0.probs()[a0] * m1.probs()[a1];
                }
            }
        }
        for (a, b) in r.distribution.probs().iter().zip(rho) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(r.joints.len(), 25);
        assert_eq!(r.mode, AggregationMode::Exact);
    }

    #[test]
    fn exhaustive_joints_reproduce_exact() {
        let pi = policy(&[5, 3], 5);
        let m = vec![models(2, 5, 6).remove(0), OpponentModel::new(4, 2, 1, 3, &[8], Init::ScaledUniform, "om", &mut stream(6, Purpose::Test, 99)).unwrap()];
        let exact = marginal_policy_exact(&pi, &m, &OBS, DEFAULT_ENUMERATION_CAP).unwrap();
        let dists: Vec<_> = m.iter().map(|x| x.predict(&OBS).unwrap()).collect();
        let joints = enumerate_actions(&[5, 3], DEFAULT_ENUMERATION_CAP).unwrap();
        let hooked = marginal_from_joints(&pi, &dists, &OBS, joints, AggregationMode::Sampled).unwrap();
        assert_eq!(hooked.distribution, exact.distribution);
        assert_eq!(hooked.weights, exact.weights);
    }

    #[test]
    fn no_opponents_is_plain_policy() {
        let pi = policy(&[], 7);
        let r = marginal_policy_exact(&pi, &[], &OBS, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(r.distribution, pi.conditional(&OBS, &[]).unwrap());
        let s = marginal_policy_sampled(&pi, &[], &OBS, 10, &mut stream(0, Purpose::Test, 0)).unwrap();
        assert_eq!(s.distribution, r.distribution);
    }

    #[test]
    fn sample_action_examples() {
        let pi = policy(&[], 8);
        let mut r = marginal_policy_exact(&pi, &[], &OBS, 10).unwrap();
        r.distribution = ActionDistribution::new(vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = stream(9, Purpose::Test, 0);
        assert!((0..100).all(|_| sample_action(&r, &mut rng) == (0, 0.0)));
        assert!(policy_entropy(&r).abs() < 1e-15);
        r.distribution = ActionDistribution::uniform(5);
        let (_, lp) = sample_action(&r, &mut rng);
        assert!((lp - 0.2f64.ln()).abs() < 1e-15);
        assert!((policy_entropy(&r) - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sampled_frequencies_track_distribution() {
        let pi = policy(&[5], 10);
        let m = models(1, 5, 11);
        let r = marginal_policy_exact(&pi, &m, &OBS, DEFAULT_ENUMERATION_CAP).unwrap();
        let mut rng = stream(12, Purpose::Test, 0);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_action(&r, &mut rng).0] += 1;
        }
        for (c, p) in counts.iter().zip(r.distribution.probs()) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn actor_loss_rejects_bad_batches() {
        let mut pi = policy(&[5], 13);
        let mut m = models(1, 5, 14);
        assert!(actor_loss(&mut pi, &mut m, &[], 0.01).is_err());
        let joints = vec![vec![0]];
        let s = ActorSample { obs: &OBS, action: 7, q_value: 0.0, joints: &joints, oracle: None, weight: 1.0 };
        assert!(actor_loss(&mut pi, &mut m, &[s], 0.01).is_err());
    }

    #[test]
    fn oracle_weights_leave_models_untouched() {
        let mut pi = policy(&[5], 15);
        let mut m = models(1, 5, 16);
        let joints: Vec<Vec<usize>> = (0..5).map(|a| vec![a]).collect();
        let oracle = [ActionDistribution::uniform(5)];
        let s = ActorSample { obs: &OBS, action: 2, q_value: 1.3, joints: &joints, oracle: Some(&oracle), weight: 1.0 };
        let report = actor_loss(&mut pi, &mut m, &[s], 0.01).unwrap();
        assert_eq!(report.model_grad_norms, vec![0.0]);
        assert!(report.policy_grad_norm > 0.0);
    }
}
