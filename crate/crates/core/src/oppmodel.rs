//! Imaginary opponent models.
//!
//! Each controlled agent keeps one network per opponent. A model sees only
//! the agent's own observation with a one-hot opponent ID appended, and
//! outputs a softmax over `d` predicted opponent actions.

use crate::diffcore::{softmax_unchecked, ActionDistribution, ForwardCache, Init, Matrix, Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_ENUMERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OpponentModel {
    net: Mlp,
    obs_len: usize,
    n_opponents: usize,
    opponent_id: usize,
}

impl OpponentModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        obs_len: usize,
        n_opponents: usize,
        opponent_id: usize,
        output_dim: usize,
        hidden: &[usize],
        init: Init,
        name: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        if output_dim < 2 {
            return Err(Error::config("opponent model output dimension must be at least 2"));
        }
        if opponent_id >= n_opponents {
            return Err(Error::config(format!("opponent id {opponent_id} out of range for {n_opponents} opponents")));
        }
        let spec = MlpSpec::new(obs_len + n_opponents, hidden, output_dim);
        let net = Mlp::new(spec, init, name, rng)?;
        Ok(OpponentModel { net, obs_len, n_opponents, opponent_id })
    }

    pub fn from_net(net: Mlp, obs_len: usize, n_opponents: usize, opponent_id: usize) -> Result<Self> {
        if net.spec().input_dim != obs_len + n_opponents || net.spec().output_dim < 2 {
            return Err(Error::config("opponent model network has the wrong shape"));
        }
        Ok(OpponentModel { net, obs_len, n_opponents, opponent_id })
    }

    pub fn output_dim(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn opponent_id(&self) -> usize {
        self.opponent_id
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn input_row(&self, obs: &[f64], row: &mut Vec<f64>) {
        row.extend_from_slice(obs);
        row.extend((0..self.n_opponents).map(|k| if k == self.opponent_id { 1.0 } else { 0.0 }));
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_len {
            return Err(Error::config(format!(
                "observation length {} does not match opponent model input {}",
                obs.len(),
                self.obs_len
            )));
        }
        Ok(())
    }

    /// Predicted action distribution of this model's opponent.
    pub fn predict(&self, obs: &[f64]) -> Result<ActionDistribution> {
        self.check_obs(obs)?;
        let mut row = Vec::with_capacity(self.obs_len + self.n_opponents);
        self.input_row(obs, &mut row);
        let (logits, _) = self.net.forward(&Matrix::from_vec(1, row.len(), row)?)?;
        ActionDistribution::new(softmax_unchecked(logits.as_slice()))
    }

    /// Batched prediction for training: one row of probabilities per
    /// observation, plus the cache needed for backpropagation.
    pub fn predict_batch(&self, observations: &[&[f64]]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        let width = self.obs_len + self.n_opponents;
        let mut data = Vec::with_capacity(observations.len() * width);
        for obs in observations {
            self.check_obs(obs)?;
            self.input_row(obs, &mut data);
        }
        let (logits, cache) = self.net.forward(&Matrix::from_vec(observations.len(), width, data)?)?;
        let probs = (0..logits.rows()).map(|r| softmax_unchecked(logits.row(r))).collect();
        Ok((probs, cache))
    }
}

/// One joint prediction `[â_1, ..., â_p]` with its probability under the models.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPredictionSample {
    pub actions: Vec<usize>,
    /// `Π_k μ_k(â_k)`.
    pub weight: f64,
    pub log_probs: Vec<f64>,
}

impl JointPredictionSample {
    fn from_actions(dists: &[ActionDistribution], actions: Vec<usize>) -> Self {
        let log_probs: Vec<f64> = actions.iter().zip(dists).map(|(&a, d)| d.probs()[a].ln()).collect();
        let weight = actions.iter().zip(dists).map(|(&a, d)| d.probs()[a]).product();
        JointPredictionSample { actions, weight, log_probs }
    }
}

/// Number of joint predictions, or `None` on overflow.
pub fn joint_size(dims: &[usize]) -> Option<u128> {
    dims.iter().try_fold(1u128, |acc, &d| acc.checked_mul(d as u128))
}

/// `l` independent joint draws, each opponent sampled from its own distribution.
pub fn sample_from(dists: &[ActionDistribution], l: usize, rng: &mut Rng) -> Vec<JointPredictionSample> {
    (0..l)
        .map(|_| {
            let actions = dists.iter().map(|d| d.sample(rng)).collect();
            JointPredictionSample::from_actions(dists, actions)
        })
        .collect()
}

/// Every joint prediction, first opponent varying slowest.
pub fn enumerate_from(dists: &[ActionDistribution], cap: usize) -> Result<Vec<JointPredictionSample>> {
    let dims: Vec<usize> = dists.iter().map(ActionDistribution::len).collect();
    Ok(enumerate_actions(&dims, cap)?
        .into_iter()
        .map(|actions| JointPredictionSample::from_actions(dists, actions))
        .collect())
}

/// All joint action tuples over `dims`, lexicographic with the first slot slowest.
pub fn enumerate_actions(dims: &[usize], cap: usize) -> Result<Vec<Vec<usize>>> {
    let size = joint_size(dims).unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(Error::EnumerationCap { size, cap });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut current = vec![0usize; dims.len()];
    for _ in 0..size {
        out.push(current.clone());
        for slot in (0..dims.len()).rev() {
            current[slot] += 1;
            if current[slot] < dims[slot] {
                break;
            }
            current[slot] = 0;
        }
    }
    Ok(out)
}

fn predict_all(models: &[OpponentModel], obs: &[f64]) -> Result<Vec<ActionDistribution>> {
    models.iter().map(|m| m.predict(obs)).collect()
}

pub fn sample_joint(models: &[OpponentModel], obs: &[f64], l: usize, rng: &mut Rng) -> Result<Vec<JointPredictionSample>> {
    if l == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    Ok(sample_from(&predict_all(models, obs)?, l, rng))
}

pub fn enumerate_joint(models: &[OpponentModel], obs: &[f64], cap: usize) -> Result<Vec<JointPredictionSample>> {
    let dims: Vec<usize> = models.iter().map(OpponentModel::output_dim).collect();
    let size = joint_size(&dims).unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(Error::EnumerationCap { size, cap });
    }
    enumerate_from(&predict_all(models, obs)?, cap)
}
