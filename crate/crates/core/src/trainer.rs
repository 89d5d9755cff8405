//! On-policy training loop: rollouts, per-agent critic and actor updates,
//! evaluation, and the run directory.
//!
//! Each predator owns a conditional policy, one opponent model per prey
//! (variants with models only) and a centralised critic. An update consumes
//! one batch and, for every agent in turn, takes one critic step, refreshes
//! the critic values with the new parameters, then takes one actor step that
//! moves the policy and the opponent models together.
//!
//! Randomness: in episode mode every training episode `e` draws its start
//! from `stream(seed, EnvEpisodes, e)` and its actions from
//! `stream(seed, Actions, e)`, so an episode depends only on the parameters
//! and its index. In step-window mode each worker keeps its own environment
//! and action stream across updates. Evaluation episode `e` uses
//! `stream(eval_seed, Evaluation, e)` for both.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::cdc::{batch_targets, quantile_critic_loss, scalar_critic_loss, CriticNet, CriticSample};
use crate::checkpoint::{param_hash, Checkpoint, EnvSnapshot, NamedAdam, NamedRng};
use crate::config::{OmFrozen, TrainConfig, UpdateMode};
use crate::diffcore::{adam_step, ActionDistribution, AdamState, Init, Mlp, ParamBlock};
use crate::env::{Action, GridConfig, Observation, PredatorPrey, TrajectoryRecord, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::metrics::{collect_diagnostics, OpponentDiagnostics, VisitedStep};
use crate::oma::{actor_loss, marginal_from_joints, marginal_policy_exact, marginal_policy_sampled, sample_action, ActorSample, AggregationMode, ConditionalPolicy};
use crate::oppmodel::OpponentModel;
use crate::rng::{stream, Purpose, Rng, RngState};
use crate::runlog::{AgentMetrics, MetricsRow, MetricsWriter};

pub use crate::config::AlgorithmVariant;

/// Joint predictions drawn per step by the upper-bound variant when the
/// config asks for exact enumeration, which has no meaning for true actions.
pub const UB_DEFAULT_SAMPLES: usize = 10;

const WORKER_STREAM_BASE: u64 = 1 << 48;

/// Networks and optimizer states of one controlled agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: ConditionalPolicy,
    pub models: Vec<OpponentModel>,
    pub critic: CriticNet,
    pub policy_opt: AdamState,
    pub model_opts: Vec<AdamState>,
    pub critic_opt: AdamState,
}

impl Agent {
    pub fn new(cfg: &TrainConfig, index: usize) -> Result<Self> {
        let grid = cfg.grid();
        let obs_len = grid.obs_len();
        let mut rng = stream(cfg.seed, Purpose::Init, index as u64);
        let n_opp = if cfg.variant.uses_opponent_models() { grid.n_preys } else { 0 };
        let opp_dims = vec![cfg.ablation.om_dim; n_opp];
        let prefix = format!("agent{index}");
        let policy = ConditionalPolicy::new(obs_len, &opp_dims, NUM_ACTIONS, &cfg.hidden, Init::ScaledUniform, &format!("{prefix}/pi"), &mut rng)?;
        let models = (0..n_opp)
            .map(|k| {
                OpponentModel::new(obs_len, n_opp, k, cfg.ablation.om_dim, &cfg.hidden, Init::ScaledUniform, &format!("{prefix}/om{k}"), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let critic = CriticNet::new(
            grid.n_predators,
            obs_len,
            NUM_ACTIONS,
            cfg.critic_outputs(),
            cfg.quantile_levels,
            &cfg.hidden,
            Init::ScaledUniform,
            &format!("{prefix}/critic"),
            &mut rng,
        )?;
        Ok(Agent {
            policy_opt: AdamState::new(policy.net().params(), cfg.lr_actor),
            model_opts: models.iter().map(|m| AdamState::new(m.net().params(), cfg.lr_actor)).collect(),
            critic_opt: AdamState::new(critic.net().params(), cfg.lr_critic),
            policy,
            models,
            critic,
        })
    }

    fn nets(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(self.policy.net()).chain(self.models.iter().map(|m| m.net())).chain(std::iter::once(self.critic.net()))
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![self.policy.net_mut()];
        v.extend(self.models.iter_mut().map(|m| m.net_mut()));
        v.push(self.critic.net_mut());
        v
    }

    fn optimizers(&self, index: usize) -> Vec<NamedAdam> {
        let mut v = vec![NamedAdam { name: format!("agent{index}/pi"), state: self.policy_opt.clone() }];
        v.extend(self.model_opts.iter().enumerate().map(|(k, s)| NamedAdam { name: format!("agent{index}/om{k}"), state: s.clone() }));
        v.push(NamedAdam { name: format!("agent{index}/critic"), state: self.critic_opt.clone() });
        v
    }

    fn optimizers_mut(&mut self) -> Vec<&mut AdamState> {
        let mut v = vec![&mut self.policy_opt];
        v.extend(self.model_opts.iter_mut());
        v.push(&mut self.critic_opt);
        v
    }

    pub fn policy_hash(&self) -> String {
        param_hash(self.policy.net().params())
    }

    /// Hash over every opponent-model block; the empty-input hash without models.
    pub fn models_hash(&self) -> String {
        param_hash(self.models.iter().flat_map(|m| m.net().params()))
    }

    pub fn critic_hash(&self) -> String {
        param_hash(self.critic.net().params())
    }
}

pub fn build_agents(cfg: &TrainConfig) -> Result<Vec<Agent>> {
    (0..cfg.env.n_predators).map(|i| Agent::new(cfg, i)).collect()
}

/// Copies every block whose name matches from `source` into the nets.
fn copy_blocks<'a>(nets: impl IntoIterator<Item = &'a mut Mlp>, source: &Checkpoint, required: bool) -> Result<()> {
    for net in nets {
        for b in net.params_mut() {
            match source.block(&b.name) {
                Some(s) if s.shape == b.shape => b.values.copy_from_slice(&s.values),
                Some(s) => {
                    return Err(Error::Checkpoint(format!("block {} has shape {:?}, expected {:?}", b.name, s.shape, b.shape)));
                }
                None if required => return Err(Error::Checkpoint(format!("block {} missing", b.name))),
                None => {}
            }
        }
    }
    Ok(())
}

/// Loads opponent models saved by an earlier run.
pub fn load_trained_models(agents: &mut [Agent], source: &Checkpoint) -> Result<()> {
    for a in agents.iter_mut() {
        copy_blocks(a.models.iter_mut().map(|m| m.net_mut()), source, true)?;
    }
    Ok(())
}

/// How an agent forms its joint opponent predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prediction {
    None,
    Exact { cap: usize },
    Sampled { l: usize },
    TrueActions { l: usize },
}

fn prediction(cfg: &TrainConfig) -> Prediction {
    if !cfg.variant.uses_opponent_models() {
        Prediction::None
    } else if cfg.variant.uses_true_opponent_actions() {
        Prediction::TrueActions { l: if cfg.opponent_samples == 0 { UB_DEFAULT_SAMPLES } else { cfg.opponent_samples } }
    } else if cfg.opponent_samples == 0 {
        Prediction::Exact { cap: cfg.enumeration_cap }
    } else {
        Prediction::Sampled { l: cfg.opponent_samples }
    }
}

/// Samples an action from `ρ`. Returns it with `ln ρ(action)` and the joint
/// predictions that formed the mixture (empty without models).
fn act(agent: &Agent, mode: Prediction, obs: &[f64], truth: &[Option<ActionDistribution>], rng: &mut Rng) -> Result<(usize, f64, Vec<Vec<usize>>)> {
    let result = match mode {
        Prediction::None => marginal_from_joints(&agent.policy, &[], obs, vec![Vec::new()], AggregationMode::Exact)?,
        Prediction::Exact { cap } => marginal_policy_exact(&agent.policy, &agent.models, obs, cap)?,
        Prediction::Sampled { l } => marginal_policy_sampled(&agent.policy, &agent.models, obs, l, rng)?,
        Prediction::TrueActions { l } => {
            let dists = agent.models.iter().map(|m| m.predict(obs)).collect::<Result<Vec<_>>>()?;
            let joints = (0..l)
                .map(|_| truth.iter().map(|t| t.as_ref().map_or(Action::Noop.index(), |d| d.sample(rng))).collect())
                .collect();
            marginal_from_joints(&agent.policy, &dists, obs, joints, AggregationMode::Sampled)?
        }
    };
    let (a, log_prob) = sample_action(&result, rng);
    let joints = if mode == Prediction::None { Vec::new() } else { result.joints };
    Ok((a, log_prob, joints))
}

/// Ground-truth prey distributions, queried only by the upper-bound
/// variant and by metric code.
fn prey_truth(env: &PredatorPrey) -> Result<Vec<Option<ActionDistribution>>> {
    (0..env.config().n_preys)
        .map(|k| if env.state().prey_alive[k] { env.prey_distribution(k).map(Some) } else { Ok(None) })
        .collect()
}

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_observations: Vec<Vec<f64>>,
    pub done: bool,
    /// `ln ρ(a_i | o_i)` at collection time, per agent.
    pub log_probs: Vec<f64>,
    /// Joint opponent predictions per agent; empty for variants without models.
    pub joints: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryBatch {
    pub steps: Vec<Step>,
    /// Index one past the last step of every finished episode.
    pub episode_ends: Vec<usize>,
    pub episodes_completed: usize,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn append(&mut self, other: TrajectoryBatch) {
        let offset = self.steps.len();
        self.steps.extend(other.steps);
        self.episode_ends.extend(other.episode_ends.into_iter().map(|e| e + offset));
        self.episodes_completed += other.episodes_completed;
    }
}

fn obs_vecs(obs: &[Observation]) -> Vec<Vec<f64>> {
    obs.iter().map(|o| o.0.clone()).collect()
}

/// Advances `env` by one step under the agents' policies.
fn env_step(agents: &[Agent], mode: Prediction, env: &mut PredatorPrey, rng: &mut Rng) -> Result<Step> {
    let observations = obs_vecs(&env.observations());
    let truth = if matches!(mode, Prediction::TrueActions { .. }) { prey_truth(env)? } else { Vec::new() };
    let mut actions = Vec::with_capacity(agents.len());
    let mut log_probs = Vec::with_capacity(agents.len());
    let mut joints = Vec::with_capacity(agents.len());
    for (agent, obs) in agents.iter().zip(&observations) {
        let (a, lp, j) = act(agent, mode, obs, &truth, rng)?;
        actions.push(a);
        log_probs.push(lp);
        joints.push(j);
    }
    let moves = actions.iter().map(|&a| Action::from_index(a)).collect::<Result<Vec<_>>>()?;
    let r = env.step(&moves)?;
    Ok(Step { observations, actions, reward: r.reward, next_observations: obs_vecs(&r.observations), done: r.done, log_probs, joints })
}

pub fn episode_seed(master: u64, episode: u64) -> u64 {
    stream(master, Purpose::EnvEpisodes, episode).next_u64()
}

/// Runs training episode `episode` to completion.
pub fn run_episode(agents: &[Agent], cfg: &TrainConfig, episode: u64) -> Result<TrajectoryBatch> {
    let mode = prediction(cfg);
    let mut env = PredatorPrey::new(cfg.grid())?;
    env.reset(episode_seed(cfg.seed, episode));
    let mut rng = stream(cfg.seed, Purpose::Actions, episode);
    let mut steps = Vec::with_capacity(cfg.env.max_steps);
    while !env.is_done() {
        steps.push(env_step(agents, mode, &mut env, &mut rng)?);
    }
    let n = steps.len();
    Ok(TrajectoryBatch { steps, episode_ends: vec![n], episodes_completed: 1 })
}

/// Collects episodes `first .. first + count` under the current parameters.
pub fn collect(agents: &[Agent], cfg: &TrainConfig, first: u64, count: u64) -> Result<TrajectoryBatch> {
    let parts = (first..first + count).into_par_iter().map(|e| run_episode(agents, cfg, e)).collect::<Result<Vec<_>>>()?;
    let mut batch = TrajectoryBatch::default();
    for p in parts {
        batch.append(p);
    }
    Ok(batch)
}

/// A persistent environment for step-window training.
#[derive(Debug, Clone)]
pub struct Worker {
    index: usize,
    env: PredatorPrey,
    rng: Rng,
    episodes: u64,
    started: bool,
}

impl Worker {
    pub fn new(cfg: &TrainConfig, index: usize) -> Result<Self> {
        Ok(Worker {
            index,
            env: PredatorPrey::new(cfg.grid())?,
            rng: stream(cfg.seed, Purpose::Actions, WORKER_STREAM_BASE + index as u64),
            episodes: 0,
            started: false,
        })
    }

    fn begin_episode(&mut self, master: u64) {
        let id = WORKER_STREAM_BASE + ((self.index as u64) << 32) + self.episodes;
        self.env.reset(episode_seed(master, id));
        self.episodes += 1;
        self.started = true;
    }

    /// Runs `steps` transitions, starting fresh episodes as needed.
    pub fn run(&mut self, agents: &[Agent], cfg: &TrainConfig, steps: usize) -> Result<TrajectoryBatch> {
        let mode = prediction(cfg);
        let mut batch = TrajectoryBatch::default();
        for _ in 0..steps {
            if !self.started || self.env.is_done() {
                self.begin_episode(cfg.seed);
            }
            let s = env_step(agents, mode, &mut self.env, &mut self.rng)?;
            let done = s.done;
            batch.steps.push(s);
            if done {
                batch.episode_ends.push(batch.steps.len());
                batch.episodes_completed += 1;
            }
        }
        Ok(batch)
    }

    fn snapshot(&self) -> (EnvSnapshot, NamedRng) {
        (
            EnvSnapshot {
                state: self.env.state().clone(),
                rng: RngState::capture(self.env.rng()),
                done: self.env.is_done() || !self.started,
                episodes: self.episodes,
            },
            NamedRng { name: format!("worker{}/actions", self.index), state: RngState::capture(&self.rng) },
        )
    }

    fn restore(&mut self, snap: &EnvSnapshot, rng: &RngState) {
        self.env.restore(snap.state.clone(), snap.rng.restore(), snap.done);
        self.rng = rng.restore();
        self.episodes = snap.episodes;
        self.started = snap.episodes > 0;
    }
}

/// Collects `forward_steps` transitions from every worker, in worker order.
pub fn collect_steps(agents: &[Agent], cfg: &TrainConfig, workers: &mut [Worker]) -> Result<TrajectoryBatch> {
    let parts = workers.par_iter_mut().map(|w| w.run(agents, cfg, cfg.update.forward_steps)).collect::<Result<Vec<_>>>()?;
    let mut batch = TrajectoryBatch::default();
    for p in parts {
        batch.append(p);
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentUpdate {
    pub critic_loss: f64,
    pub critic_grad_norm: f64,
    pub actor_loss: f64,
    pub policy_entropy: f64,
    pub policy_grad_norm: f64,
    pub model_grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateReport {
    pub agents: Vec<AgentUpdate>,
}

fn grad_norm(net: &Mlp) -> f64 {
    net.params().iter().flat_map(|p| &p.grads).map(|g| g * g).sum::<f64>().sqrt()
}

fn zero_grads(net: &mut Mlp) {
    net.params_mut().iter_mut().for_each(ParamBlock::zero_grad);
}

/// Critic loss of `agent` on `batch` under its current parameters; no state changes.
pub fn critic_loss_on(agent: &Agent, batch: &TrajectoryBatch, cfg: &TrainConfig) -> Result<f64> {
    let mut critic = agent.critic.clone();
    critic_step_loss(&mut critic, batch, cfg)
}

fn critic_step_loss(critic: &mut CriticNet, batch: &TrajectoryBatch, cfg: &TrainConfig) -> Result<f64> {
    let joint: Vec<(Vec<f64>, Vec<f64>)> = batch.steps.iter().map(|s| (s.observations.concat(), s.next_observations.concat())).collect();
    let samples: Vec<CriticSample<'_>> = batch
        .steps
        .iter()
        .zip(&joint)
        .map(|(s, (o, o2))| CriticSample { joint_obs: o, joint_actions: &s.actions, reward: s.reward, done: s.done, joint_obs_next: o2 })
        .collect();
    if cfg.variant.uses_distributional_critic() {
        let targets = batch_targets(critic, &samples, cfg.gamma, cfg.enumeration_cap)?;
        quantile_critic_loss(critic, &samples, &targets, cfg.kappa)
    } else {
        scalar_critic_loss(critic, &samples, cfg.gamma, cfg.enumeration_cap)
    }
}

fn check_finite(what: &str, agent: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("agent {agent}: {what} is {v}")))
    }
}

/// One update of every agent on `batch`: critic step, critic refresh, then a
/// joint actor step on the policy and (unless frozen) the opponent models.
pub fn update(agents: &mut [Agent], batch: &TrajectoryBatch, cfg: &TrainConfig) -> Result<UpdateReport> {
    if batch.is_empty() {
        return Err(Error::config("cannot update on an empty batch"));
    }
    let frozen = cfg.ablation.om_frozen != OmFrozen::Off;
    let no_joint = [Vec::new()];
    let mut report = UpdateReport::default();
    for (i, agent) in agents.iter_mut().enumerate() {
        let critic_loss = critic_step_loss(&mut agent.critic, batch, cfg)?;
        check_finite("critic loss", i, critic_loss)?;
        let critic_grad_norm = grad_norm(agent.critic.net());
        adam_step(agent.critic.net_mut().params_mut(), &mut agent.critic_opt)?;

        let pairs: Vec<(Vec<f64>, &[usize])> = batch.steps.iter().map(|s| (s.observations.concat(), s.actions.as_slice())).collect();
        let refs: Vec<(&[f64], &[usize])> = pairs.iter().map(|(o, a)| (o.as_slice(), *a)).collect();
        let (q, _) = agent.critic.forward_batch(&refs)?;
        let samples: Vec<ActorSample<'_>> = batch
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| ActorSample {
                obs: &s.observations[i],
                action: s.actions[i],
                q_value: q.row(t).iter().sum::<f64>() / q.cols() as f64,
                joints: if s.joints[i].is_empty() { &no_joint } else { &s.joints[i] },
                oracle: None,
                weight: 1.0,
            })
            .collect();
        let r = actor_loss(&mut agent.policy, &mut agent.models, &samples, cfg.alpha)?;
        check_finite("actor loss", i, r.loss)?;
        adam_step(agent.policy.net_mut().params_mut(), &mut agent.policy_opt)?;
        for (m, opt) in agent.models.iter_mut().zip(&mut agent.model_opts) {
            if frozen {
                zero_grads(m.net_mut());
            } else {
                adam_step(m.net_mut().params_mut(), opt)?;
            }
        }
        report.agents.push(AgentUpdate {
            critic_loss,
            critic_grad_norm,
            actor_loss: r.loss,
            policy_entropy: r.entropy,
            policy_grad_norm: r.policy_grad_norm,
            model_grad_norms: r.model_grad_norms,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub mean_return: f64,
    /// Population standard deviation over episodes.
    pub std_return: f64,
    pub returns: Vec<f64>,
    /// `[agent][opponent]`; empty per agent for variants without models.
    pub diagnostics: Vec<Vec<OpponentDiagnostics>>,
}

impl EvalRecord {
    /// Mean of a diagnostic over agent `i`'s opponents, `None` when undefined.
    pub fn agent_mean(&self, i: usize, f: impl Fn(&OpponentDiagnostics) -> Option<f64>) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.diagnostics.get(i)?.iter().map(f).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean of a diagnostic over every (agent, opponent) pair.
    pub fn team_mean(&self, f: impl Fn(&OpponentDiagnostics) -> Option<f64> + Copy) -> Option<f64> {
        let vals: Option<Vec<f64>> = (0..self.diagnostics.len()).map(|i| self.agent_mean(i, f)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Plays `n_episodes` with sampled actions on frozen agents.
pub fn evaluate(agents: &[Agent], cfg: &TrainConfig, n_episodes: usize, seed: u64) -> Result<EvalRecord> {
    let (rec, _) = evaluate_with_trace(agents, cfg, n_episodes, seed, false)?;
    Ok(rec)
}

/// Like [`evaluate`], optionally recording every step for a trajectory dump.
pub fn evaluate_with_trace(agents: &[Agent], cfg: &TrainConfig, n_episodes: usize, seed: u64, trace: bool) -> Result<(EvalRecord, Vec<TrajectoryRecord>)> {
    if n_episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mode = prediction(cfg);
    let grid: GridConfig = cfg.grid();
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = stream(seed, Purpose::Evaluation, e as u64);
            let mut env = PredatorPrey::new(grid.clone())?;
            env.reset(rng.next_u64());
            let mut total = 0.0;
            let mut visited = Vec::new();
            let mut traces = Vec::new();
            while !env.is_done() {
                let observations = obs_vecs(&env.observations());
                let truth = prey_truth(&env)?;
                let before = env.state().clone();
                let mut actions = Vec::with_capacity(agents.len());
                for (agent, obs) in agents.iter().zip(&observations) {
                    actions.push(Action::from_index(act(agent, mode, obs, &truth, &mut rng)?.0)?);
                }
                let r = env.step(&actions)?;
                total += r.reward;
                if trace {
                    traces.push(TrajectoryRecord {
                        episode: e,
                        step: before.step_count,
                        predators: before.predators,
                        preys: before.preys,
                        prey_alive: before.prey_alive,
                        actions: actions.clone(),
                        prey_actions: r.info.prey_actions.clone(),
                        reward: r.reward,
                        done: r.done,
                    });
                }
                visited.push(VisitedStep {
                    observations,
                    truth,
                    actions: r.info.prey_actions.iter().map(|a| a.map(Action::index)).collect(),
                });
            }
            Ok((total, visited, traces))
        })
        .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = episodes.iter().map(|(r, _, _)| *r).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let mut visited = Vec::new();
    let mut traces = Vec::new();
    for (_, v, t) in episodes {
        visited.extend(v);
        traces.extend(t);
    }
    let model_refs: Vec<&[OpponentModel]> = agents.iter().map(|a| a.models.as_slice()).collect();
    let diagnostics = collect_diagnostics(&model_refs, &visited)?;
    Ok((EvalRecord { mean_return: mean, std_return: std, returns, diagnostics }, traces))
}

/// Seed of the evaluation episodes during training. Every evaluation of a
/// run replays the same starts and random draws.
pub fn training_eval_seed(master: u64) -> u64 {
    stream(master, Purpose::Evaluation, u64::MAX).next_u64()
}

/// Training state: agents, counters and (in step-window mode) workers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub agents: Vec<Agent>,
    workers: Vec<Worker>,
    pub episode: u64,
    pub update_step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut agents = build_agents(&config)?;
        if config.variant.uses_opponent_models() && config.ablation.om_frozen == OmFrozen::Trained {
            let source = Checkpoint::load(Path::new(&config.ablation.om_checkpoint))?;
            load_trained_models(&mut agents, &source)?;
        }
        if config.variant.uses_true_opponent_actions() && config.ablation.om_dim != NUM_ACTIONS {
            return Err(Error::config("the upper-bound variant needs om_dim equal to the prey action count"));
        }
        let workers = match config.update.mode {
            UpdateMode::Episodes => Vec::new(),
            UpdateMode::Steps => (0..config.update.n_envs).map(|w| Worker::new(&config, w)).collect::<Result<_>>()?,
        };
        Ok(Trainer { config, agents, workers, episode: 0, update_step: 0 })
    }

    pub fn is_finished(&self) -> bool {
        self.episode >= self.config.episodes as u64
    }

    pub fn collect(&mut self) -> Result<TrajectoryBatch> {
        match self.config.update.mode {
            UpdateMode::Episodes => {
                let count = (self.config.update.episodes_per_update as u64).min(self.config.episodes as u64 - self.episode.min(self.config.episodes as u64));
                collect(&self.agents, &self.config, self.episode, count.max(1))
            }
            UpdateMode::Steps => collect_steps(&self.agents, &self.config, &mut self.workers),
        }
    }

    /// Collects one batch and updates on it.
    pub fn iterate(&mut self) -> Result<UpdateReport> {
        let batch = self.collect()?;
        let report = update(&mut self.agents, &batch, &self.config)?;
        self.episode += batch.episodes_completed as u64;
        self.update_step += 1;
        Ok(report)
    }

    pub fn evaluate(&self, n_episodes: usize, seed: u64) -> Result<EvalRecord> {
        evaluate(&self.agents, &self.config, n_episodes, seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut rngs = Vec::new();
        let mut envs = Vec::new();
        for w in &self.workers {
            let (e, r) = w.snapshot();
            envs.push(e);
            rngs.push(r);
        }
        Checkpoint {
            config_toml: self.config.to_toml_string(),
            variant: self.config.variant.name().to_string(),
            episode: self.episode,
            update_step: self.update_step,
            blocks: self.agents.iter().flat_map(|a| a.nets().flat_map(|n| n.params().iter().cloned()).collect::<Vec<_>>()).collect(),
            optimizers: self.agents.iter().enumerate().flat_map(|(i, a)| a.optimizers(i)).collect(),
            rngs,
            envs,
        }
    }

    /// Rebuilds a trainer from a checkpoint alone.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config = TrainConfig::from_toml_str(&ck.config_toml)?;
        if config.variant.name() != ck.variant {
            return Err(Error::Checkpoint(format!("variant {} does not match config {}", ck.variant, config.variant)));
        }
        // The stored blocks already hold any loaded models.
        let source = std::mem::replace(&mut config.ablation.om_frozen, OmFrozen::Off);
        let mut t = Trainer::new(config)?;
        t.config.ablation.om_frozen = source;
        for (i, a) in t.agents.iter_mut().enumerate() {
            copy_blocks(a.nets_mut(), ck, true)?;
            let names: Vec<String> = a.optimizers(i).into_iter().map(|o| o.name).collect();
            for (name, opt) in names.iter().zip(a.optimizers_mut()) {
                let saved = ck.optimizer(name).ok_or_else(|| Error::Checkpoint(format!("optimizer {name} missing")))?;
                if saved.m.len() != opt.m.len() || saved.m.iter().zip(&opt.m).any(|(x, y)| x.len() != y.len()) {
                    return Err(Error::Checkpoint(format!("optimizer {name} has the wrong shape")));
                }
                *opt = saved.clone();
            }
        }
        if ck.envs.len() != t.workers.len() {
            return Err(Error::Checkpoint(format!("{} environment snapshots for {} workers", ck.envs.len(), t.workers.len())));
        }
        for (w, snap) in t.workers.iter_mut().zip(&ck.envs) {
            let name = format!("worker{}/actions", w.index);
            let rng = ck.rng(&name).ok_or_else(|| Error::Checkpoint(format!("stream {name} missing")))?;
            w.restore(snap, rng);
        }
        t.episode = ck.episode;
        t.update_step = ck.update_step;
        Ok(t)
    }
}

/// Options of [`train`] that are not part of the reproducible config.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Stop after this many update steps in this call, as if interrupted.
    pub max_updates: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub episodes: u64,
    pub update_steps: u64,
    pub finished: bool,
    pub final_eval_mean_return: Option<f64>,
    pub final_eval_std_return: Option<f64>,
    pub policy_hashes: Vec<String>,
    pub model_hashes: Vec<String>,
    pub critic_hashes: Vec<String>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(run_dir: &Path, update_step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("update_{update_step:08}.ck"))
}

/// Newest checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("update_"))
            .and_then(|n| n.strip_suffix(".ck"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn metrics_row(t: &Trainer, started: Instant, report: Option<&UpdateReport>, eval: Option<&EvalRecord>) -> MetricsRow {
    let cfg = &t.config;
    let models = cfg.variant.uses_opponent_models();
    MetricsRow {
        wall_time: cfg.log.wall_time.then(|| started.elapsed().as_secs_f64()),
        episode: t.episode,
        update_step: t.update_step,
        variant: cfg.variant,
        seed: cfg.seed,
        eval_mean_return: eval.map(|e| e.mean_return),
        eval_std_return: eval.map(|e| e.std_return),
        agents: (0..cfg.env.n_predators)
            .map(|i| {
                let u = report.map(|r| &r.agents[i]);
                let om = |f: fn(&OpponentDiagnostics) -> Option<f64>| if models { eval.and_then(|e| e.agent_mean(i, f)) } else { None };
                AgentMetrics {
                    critic_loss: u.map(|u| u.critic_loss),
                    actor_loss: u.map(|u| u.actor_loss),
                    policy_entropy: u.map(|u| u.policy_entropy),
                    om_kld: om(|d| d.kld),
                    om_entropy: om(|d| d.entropy),
                    om_accuracy: om(|d| d.accuracy),
                }
            })
            .collect(),
    }
}

/// Trains into `run_dir`, writing the config snapshot, metrics.csv,
/// periodic checkpoints and, once all episodes are done, summary.json.
pub fn train(config: &TrainConfig, run_dir: &Path, opts: &TrainOptions) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(run_dir.join(CHECKPOINT_DIR))?;
    let started = Instant::now();
    let metrics_path = run_dir.join(METRICS_FILE);
    let eval_seed = training_eval_seed(config.seed);
    let resume_from = if opts.resume { latest_checkpoint(run_dir)? } else { None };

    let (mut trainer, mut writer, mut last_eval) = match resume_from {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let trainer = Trainer::from_checkpoint(&ck)?;
            if &trainer.config != config {
                return Err(Error::config(format!("config differs from the one stored in {}", path.display())));
            }
            let writer = MetricsWriter::resume(&metrics_path, config.env.n_predators, trainer.update_step)?;
            (trainer, writer, None)
        }
        None => {
            let trainer = Trainer::new(config.clone())?;
            fs::write(run_dir.join(CONFIG_FILE), config.to_toml_string())?;
            let mut writer = MetricsWriter::create(&metrics_path, config.env.n_predators)?;
            let eval = trainer.evaluate(config.eval.episodes, eval_seed)?;
            writer.write(&metrics_row(&trainer, started, None, Some(&eval)))?;
            (trainer, writer, Some(eval))
        }
    };

    let mut done_here = 0u64;
    while !trainer.is_finished() && opts.max_updates.is_none_or(|m| done_here < m) {
        let report = match trainer.iterate() {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                let mut f = File::create(run_dir.join("numeric_failure.txt"))?;
                writeln!(f, "update {} episode {}: {e}", trainer.update_step + 1, trainer.episode)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        done_here += 1;
        let finished = trainer.is_finished();
        let eval = if trainer.update_step % config.eval.every_updates as u64 == 0 || finished {
            Some(trainer.evaluate(config.eval.episodes, eval_seed)?)
        } else {
            None
        };
        writer.write(&metrics_row(&trainer, started, Some(&report), eval.as_ref()))?;
        if eval.is_some() {
            last_eval = eval;
        }
        if trainer.update_step % config.log.checkpoint_every as u64 == 0 || finished {
            trainer.checkpoint().save(&checkpoint_path(run_dir, trainer.update_step))?;
        }
    }

    let summary = RunSummary {
        variant: config.variant.name().to_string(),
        seed: config.seed,
        episodes: trainer.episode,
        update_steps: trainer.update_step,
        finished: trainer.is_finished(),
        final_eval_mean_return: last_eval.as_ref().map(|e| e.mean_return),
        final_eval_std_return: last_eval.as_ref().map(|e| e.std_return),
        policy_hashes: trainer.agents.iter().map(Agent::policy_hash).collect(),
        model_hashes: trainer.agents.iter().map(Agent::models_hash).collect(),
        critic_hashes: trainer.agents.iter().map(Agent::critic_hash).collect(),
    };
    if summary.finished {
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.into()))?;
        fs::write(run_dir.join(SUMMARY_FILE), text + "\n")?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: AlgorithmVariant) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.variant = variant;
        c.hidden = vec![16];
        c.episodes = 4;
        c.update.episodes_per_update = 2;
        c.eval.every_updates = 1;
        c.eval.episodes = 3;
        c.env.max_steps = 20;
        c.seed = 11;
        c
    }

    #[test]
    fn collection_is_deterministic_and_bounded() {
        let cfg = tiny(AlgorithmVariant::Domac);
        let agents = build_agents(&cfg).unwrap();
        let a = collect(&agents, &cfg, 0, 3).unwrap();
        assert_eq!(a, collect(&agents, &cfg, 0, 3).unwrap());
        assert!(a.len() <= 60 && a.episodes_completed == 3);
        assert_eq!(a.episode_ends.len(), 3);
        assert!(a.steps.iter().all(|s| s.joints.iter().all(|j| j.len() == 5)));
    }

    #[test]
    fn maac_batch_has_no_predictions_and_no_models() {
        let cfg = tiny(AlgorithmVariant::Maac);
        let agents = build_agents(&cfg).unwrap();
        assert!(agents.iter().all(|a| a.models.is_empty() && a.policy.opp_dims().is_empty()));
        let b = collect(&agents, &cfg, 0, 2).unwrap();
        assert!(b.steps.iter().all(|s| s.joints.iter().all(Vec::is_empty)));
    }

    #[test]
    fn ub_uses_sampled_true_actions() {
        let cfg = tiny(AlgorithmVariant::Ub);
        let agents = build_agents(&cfg).unwrap();
        let b = collect(&agents, &cfg, 0, 1).unwrap();
        assert!(b.steps.iter().all(|s| s.joints.iter().all(|j| j.len() == UB_DEFAULT_SAMPLES)));
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = tiny(AlgorithmVariant::Domac);
        let mut agents = build_agents(&cfg).unwrap();
        assert!(update(&mut agents, &TrajectoryBatch::default(), &cfg).is_err());
    }

    #[test]
    fn frozen_models_never_move() {
        let mut cfg = tiny(AlgorithmVariant::Domac);
        cfg.ablation.om_frozen = OmFrozen::Random;
        let mut t = Trainer::new(cfg).unwrap();
        let before: Vec<String> = t.agents.iter().map(Agent::models_hash).collect();
        let pol: Vec<String> = t.agents.iter().map(Agent::policy_hash).collect();
        t.iterate().unwrap();
        t.iterate().unwrap();
        assert_eq!(before, t.agents.iter().map(Agent::models_hash).collect::<Vec<_>>());
        assert_ne!(pol, t.agents.iter().map(Agent::policy_hash).collect::<Vec<_>>());
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let cfg = tiny(AlgorithmVariant::Domac);
        let agents = build_agents(&cfg).unwrap();
        let snapshot = agents.clone();
        let a = evaluate(&agents, &cfg, 4, 5).unwrap();
        assert_eq!(a, evaluate(&agents, &cfg, 4, 5).unwrap());
        assert_eq!(agents, snapshot);
        assert!(a.mean_return >= -0.51 * 20.0 && a.mean_return <= 5.0);
        assert_eq!(a.diagnostics.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let mut cfg = tiny(AlgorithmVariant::Domac);
        cfg.update.mode = UpdateMode::Steps;
        cfg.update.n_envs = 2;
        cfg.update.forward_steps = 7;
        cfg.episodes = 3;
        let mut a = Trainer::new(cfg).unwrap();
        a.iterate().unwrap();
        let ck = a.checkpoint();
        let mut b = Trainer::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(b.checkpoint().to_bytes(), ck.to_bytes());
        let ra = a.iterate().unwrap();
        let rb = b.iterate().unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    }
}
