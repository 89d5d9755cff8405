//! Run configuration and its TOML file format.
//!
//! Every key is optional; unset keys take the defaults listed on
//! [`TrainConfig::default`] (the PP-2v1 preset). Unknown keys are rejected.
//! Top-level keys cover the algorithm, and four tables group the rest:
//!
//! ```toml
//! seed = 7
//! variant = "domac"          # domac | maac | omac | dmac | ub
//! episodes = 15000
//! preset = "pp2v1"           # pp2v1 | pp4v2
//! gamma = 0.95
//! alpha = 0.01
//! quantiles = 5
//! kappa = 1.0
//! quantile_levels = "midpoint"   # midpoint | endpoint
//! opponent_samples = 0       # 0 enumerates every joint prediction
//! hidden = [64, 64, 64]
//! lr_actor = 0.00025         # policy and opponent models
//! lr_critic = 0.0001
//! enumeration_cap = 10000
//!
//! [env]                      # overrides of the preset
//! grid_size = 5
//! n_predators = 2
//! n_preys = 1
//! view_size = 5
//! max_steps = 100
//!
//! [update]
//! mode = "episodes"          # episodes | steps
//! episodes_per_update = 10
//! forward_steps = 5
//! n_envs = 1
//!
//! [eval]
//! every_updates = 100
//! episodes = 100
//!
//! [ablation]
//! mask_opponent_obs = false
//! om_dim = 5
//! om_frozen = "off"          # off | random | trained
//! om_checkpoint = ""         # source of trained models
//!
//! [log]
//! checkpoint_every = 100
//! wall_time = false
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cdc::QuantileLevels;
use crate::env::GridConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmVariant {
    /// Opponent models with a distributional critic.
    Domac,
    /// Plain actor-critic with a scalar critic.
    Maac,
    /// Opponent models with a scalar critic.
    Omac,
    /// Distributional critic without opponent models.
    Dmac,
    /// DOMAC fed with opponent actions drawn from the true prey policy.
    Ub,
}

impl AlgorithmVariant {
    pub const ALL: [AlgorithmVariant; 5] =
        [AlgorithmVariant::Domac, AlgorithmVariant::Maac, AlgorithmVariant::Omac, AlgorithmVariant::Dmac, AlgorithmVariant::Ub];

    pub fn uses_opponent_models(self) -> bool {
        matches!(self, AlgorithmVariant::Domac | AlgorithmVariant::Omac | AlgorithmVariant::Ub)
    }

    pub fn uses_distributional_critic(self) -> bool {
        matches!(self, AlgorithmVariant::Domac | AlgorithmVariant::Dmac | AlgorithmVariant::Ub)
    }

    pub fn uses_true_opponent_actions(self) -> bool {
        self == AlgorithmVariant::Ub
    }

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmVariant::Domac => "domac",
            AlgorithmVariant::Maac => "maac",
            AlgorithmVariant::Omac => "omac",
            AlgorithmVariant::Dmac => "dmac",
            AlgorithmVariant::Ub => "ub",
        }
    }
}

impl fmt::Display for AlgorithmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`, expected domac, maac, omac, dmac or ub")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Pp2v1,
    Pp4v2,
}

impl Preset {
    pub fn grid(self) -> GridConfig {
        match self {
            Preset::Pp2v1 => GridConfig::pp2v1(),
            Preset::Pp4v2 => GridConfig::pp4v2(),
        }
    }

    /// Joint predictions per step: exact enumeration for PP-2v1, ten samples for PP-4v2.
    pub fn opponent_samples(self) -> usize {
        match self {
            Preset::Pp2v1 => 0,
            Preset::Pp4v2 => 10,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pp2v1" | "pp-2v1" => Ok(Preset::Pp2v1),
            "pp4v2" | "pp-4v2" => Ok(Preset::Pp4v2),
            _ => Err(Error::config(format!("unknown preset `{s}`, expected pp2v1 or pp4v2"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Update after every `episodes_per_update` complete episodes.
    Episodes,
    /// Update after `forward_steps` steps in each of `n_envs` environments.
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmFrozen {
    /// Opponent models train with the actor.
    Off,
    /// Randomly initialised models that never change.
    Random,
    /// Models loaded from `om_checkpoint` that never change.
    Trained,
}

impl FromStr for OmFrozen {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(OmFrozen::Off),
            "random" => Ok(OmFrozen::Random),
            "trained" => Ok(OmFrozen::Trained),
            _ => Err(Error::config(format!("unknown opponent model mode `{s}`, expected off, random or trained"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub n_predators: usize,
    pub n_preys: usize,
    pub view_size: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateConfig {
    pub mode: UpdateMode,
    pub episodes_per_update: usize,
    pub forward_steps: usize,
    pub n_envs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalConfig {
    /// Evaluate after every this many update steps (and before the first).
    pub every_updates: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationConfig {
    pub mask_opponent_obs: bool,
    /// Output width `d` of every opponent model.
    pub om_dim: usize,
    pub om_frozen: OmFrozen,
    pub om_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogConfig {
    /// Save a checkpoint after every this many update steps.
    pub checkpoint_every: usize,
    /// Record elapsed seconds in metrics.csv. Off by default so that repeated
    /// runs produce byte-identical files.
    pub wall_time: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: AlgorithmVariant,
    pub episodes: usize,
    pub preset: Preset,
    pub env: EnvConfig,
    pub gamma: f64,
    pub alpha: f64,
    pub quantiles: usize,
    pub kappa: f64,
    pub quantile_levels: QuantileLevels,
    /// Joint predictions per step, 0 to enumerate them all.
    pub opponent_samples: usize,
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub enumeration_cap: usize,
    pub update: UpdateConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub log: LogConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_preset(Preset::Pp2v1)
    }
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let g = preset.grid();
        TrainConfig {
            seed: 0,
            variant: AlgorithmVariant::Domac,
            episodes: 15_000,
            preset,
            env: EnvConfig {
                grid_size: g.grid_size,
                n_predators: g.n_predators,
                n_preys: g.n_preys,
                view_size: g.view_size,
                max_steps: g.max_steps,
            },
            gamma: 0.95,
            alpha: 0.01,
            quantiles: 5,
            kappa: 1.0,
            quantile_levels: QuantileLevels::Midpoint,
            opponent_samples: preset.opponent_samples(),
            hidden: vec![64, 64, 64],
            lr_actor: 2.5e-4,
            lr_critic: 1e-4,
            enumeration_cap: 10_000,
            update: UpdateConfig { mode: UpdateMode::Episodes, episodes_per_update: 10, forward_steps: 5, n_envs: 1 },
            eval: EvalConfig { every_updates: 100, episodes: 100 },
            ablation: AblationConfig {
                mask_opponent_obs: false,
                om_dim: 5,
                om_frozen: OmFrozen::Off,
                om_checkpoint: String::new(),
            },
            log: LogConfig { checkpoint_every: 100, wall_time: false },
        }
    }

    /// Switches the preset, replacing the environment and sample-size settings.
    pub fn set_preset(&mut self, preset: Preset) {
        let fresh = TrainConfig::for_preset(preset);
        self.preset = preset;
        self.env = fresh.env;
        self.opponent_samples = fresh.opponent_samples;
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            grid_size: self.env.grid_size,
            n_predators: self.env.n_predators,
            n_preys: self.env.n_preys,
            view_size: self.env.view_size,
            max_steps: self.env.max_steps,
            mask_opponent_obs: self.ablation.mask_opponent_obs,
        }
    }

    /// Quantile count of the critic: `quantiles` for distributional variants, 1 otherwise.
    pub fn critic_outputs(&self) -> usize {
        if self.variant.uses_distributional_critic() {
            self.quantiles
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, field, msg)| Error::config(format!("{field}: {msg}")))
    }

    /// First violated range rule as `(table, key, message)`.
    fn check(&self) -> std::result::Result<(), (Option<&'static str>, &'static str, String)> {
        fn fail<T>(table: Option<&'static str>, key: &'static str, msg: impl Into<String>) -> std::result::Result<T, (Option<&'static str>, &'static str, String)> {
            Err((table, key, msg.into()))
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.seed > i64::MAX as u64 {
            return fail(None, "seed", format!("must not exceed {}", i64::MAX));
        }
        if self.episodes == 0 {
            return fail(None, "episodes", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(None, "gamma", format!("must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail(None, "alpha", format!("must be non-negative, got {}", self.alpha));
        }
        if self.quantiles == 0 {
            return fail(None, "quantiles", "must be at least 1");
        }
        if !positive(self.kappa) {
            return fail(None, "kappa", format!("must be positive, got {}", self.kappa));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail(None, "hidden", "needs at least one layer, all widths positive");
        }
        if !positive(self.lr_actor) {
            return fail(None, "lr_actor", format!("must be positive, got {}", self.lr_actor));
        }
        if !positive(self.lr_critic) {
            return fail(None, "lr_critic", format!("must be positive, got {}", self.lr_critic));
        }
        if self.enumeration_cap == 0 {
            return fail(None, "enumeration_cap", "must be at least 1");
        }
        if self.env.grid_size < 2 {
            return fail(Some("env"), "grid_size", "must be at least 2");
        }
        if self.env.n_predators == 0 {
            return fail(Some("env"), "n_predators", "must be at least 1");
        }
        if self.env.n_preys == 0 {
            return fail(Some("env"), "n_preys", "must be at least 1");
        }
        if self.env.view_size % 2 == 0 {
            return fail(Some("env"), "view_size", "must be odd and positive");
        }
        if self.env.max_steps == 0 {
            return fail(Some("env"), "max_steps", "must be at least 1");
        }
        if self.env.n_predators + self.env.n_preys > self.env.grid_size * self.env.grid_size {
            return fail(Some("env"), "grid_size", "too small to place every agent on its own cell");
        }
        if self.update.episodes_per_update == 0 {
            return fail(Some("update"), "episodes_per_update", "must be at least 1");
        }
        if self.update.forward_steps == 0 {
            return fail(Some("update"), "forward_steps", "must be at least 1");
        }
        if self.update.n_envs == 0 {
            return fail(Some("update"), "n_envs", "must be at least 1");
        }
        if self.eval.every_updates == 0 {
            return fail(Some("eval"), "every_updates", "must be at least 1");
        }
        if self.eval.episodes == 0 {
            return fail(Some("eval"), "episodes", "must be at least 1");
        }
        if self.ablation.om_dim < 2 {
            return fail(Some("ablation"), "om_dim", "must be at least 2");
        }
        if self.ablation.om_frozen == OmFrozen::Trained && self.ablation.om_checkpoint.is_empty() {
            return fail(Some("ablation"), "om_checkpoint", "is required when om_frozen = \"trained\"");
        }
        if self.log.checkpoint_every == 0 {
            return fail(Some("log"), "checkpoint_every", "must be at least 1");
        }
        Ok(())
    }

    /// Parses and validates a config document. Errors carry the line of the
    /// offending key when it can be located.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::ConfigFile(e.to_string().trim_end().to_string()))?;
        let cfg = file.resolve();
        if let Err((table, key, msg)) = cfg.check() {
            let qualified = match table {
                Some(t) => format!("{t}.{key}"),
                None => key.to_string(),
            };
            let at = locate_key(text, table, key).map(|l| format!(" (line {l})")).unwrap_or_default();
            return Err(Error::ConfigFile(format!("{qualified}{at}: {msg}")));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ConfigFile::from_config(self)).expect("config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigFile(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::ConfigFile(m) => Error::ConfigFile(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// 1-based line of `key` inside `[table]` (or the top level).
fn locate_key(text: &str, table: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(header) = t.strip_prefix('[') {
            current = Some(header.trim_end_matches(']').trim().to_string());
            continue;
        }
        if current.as_deref() != table {
            continue;
        }
        if let Some((k, _)) = t.split_once('=') {
            if k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    None
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    variant: Option<AlgorithmVariant>,
    episodes: Option<usize>,
    preset: Option<Preset>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    quantiles: Option<usize>,
    kappa: Option<f64>,
    quantile_levels: Option<QuantileLevels>,
    opponent_samples: Option<usize>,
    hidden: Option<Vec<usize>>,
    lr_actor: Option<f64>,
    lr_critic: Option<f64>,
    enumeration_cap: Option<usize>,
    env: Option<EnvFile>,
    update: Option<UpdateFile>,
    eval: Option<EvalFile>,
    ablation: Option<AblationFile>,
    log: Option<LogFile>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    grid_size: Option<usize>,
    n_predators: Option<usize>,
    n_preys: Option<usize>,
    view_size: Option<usize>,
    max_steps: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateFile {
    mode: Option<UpdateMode>,
    episodes_per_update: Option<usize>,
    forward_steps: Option<usize>,
    n_envs: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    every_updates: Option<usize>,
    episodes: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblationFile {
    mask_opponent_obs: Option<bool>,
    om_dim: Option<usize>,
    om_frozen: Option<OmFrozen>,
    om_checkpoint: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogFile {
    checkpoint_every: Option<usize>,
    wall_time: Option<bool>,
}

impl ConfigFile {
    fn resolve(self) -> TrainConfig {
        let mut c = TrainConfig::for_preset(self.preset.unwrap_or(Preset::Pp2v1));
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.variant, self.variant);
        set!(c.episodes, self.episodes);
        set!(c.gamma, self.gamma);
        set!(c.alpha, self.alpha);
        set!(c.quantiles, self.quantiles);
        set!(c.kappa, self.kappa);
        set!(c.quantile_levels, self.quantile_levels);
        set!(c.opponent_samples, self.opponent_samples);
        set!(c.hidden, self.hidden);
        set!(c.lr_actor, self.lr_actor);
        set!(c.lr_critic, self.lr_critic);
        set!(c.enumeration_cap, self.enumeration_cap);
        let env = self.env.unwrap_or_default();
        set!(c.env.grid_size, env.grid_size);
        set!(c.env.n_predators, env.n_predators);
        set!(c.env.n_preys, env.n_preys);
        set!(c.env.view_size, env.view_size);
        set!(c.env.max_steps, env.max_steps);
        let update = self.update.unwrap_or_default();
        set!(c.update.mode, update.mode);
        set!(c.update.episodes_per_update, update.episodes_per_update);
        set!(c.update.forward_steps, update.forward_steps);
        set!(c.update.n_envs, update.n_envs);
        let eval = self.eval.unwrap_or_default();
        set!(c.eval.every_updates, eval.every_updates);
        set!(c.eval.episodes, eval.episodes);
        let ablation = self.ablation.unwrap_or_default();
        set!(c.ablation.mask_opponent_obs, ablation.mask_opponent_obs);
        set!(c.ablation.om_dim, ablation.om_dim);
        set!(c.ablation.om_frozen, ablation.om_frozen);
        set!(c.ablation.om_checkpoint, ablation.om_checkpoint);
        let log = self.log.unwrap_or_default();
        set!(c.log.checkpoint_every, log.checkpoint_every);
        set!(c.log.wall_time, log.wall_time);
        c
    }

    fn from_config(c: &TrainConfig) -> Self {
        ConfigFile {
            seed: Some(c.seed),
            variant: Some(c.variant),
            episodes: Some(c.episodes),
            preset: Some(c.preset),
            gamma: Some(c.gamma),
            alpha: Some(c.alpha),
            quantiles: Some(c.quantiles),
            kappa: Some(c.kappa),
            quantile_levels: Some(c.quantile_levels),
            opponent_samples: Some(c.opponent_samples),
            hidden: Some(c.hidden.clone()),
            lr_actor: Some(c.lr_actor),
            lr_critic: Some(c.lr_critic),
            enumeration_cap: Some(c.enumeration_cap),
            env: Some(EnvFile {
                grid_size: Some(c.env.grid_size),
                n_predators: Some(c.env.n_predators),
                n_preys: Some(c.env.n_preys),
                view_size: Some(c.env.view_size),
                max_steps: Some(c.env.max_steps),
            }),
            update: Some(UpdateFile {
                mode: Some(c.update.mode),
                episodes_per_update: Some(c.update.episodes_per_update),
                forward_steps: Some(c.update.forward_steps),
                n_envs: Some(c.update.n_envs),
            }),
            eval: Some(EvalFile { every_updates: Some(c.eval.every_updates), episodes: Some(c.eval.episodes) }),
            ablation: Some(AblationFile {
                mask_opponent_obs: Some(c.ablation.mask_opponent_obs),
                om_dim: Some(c.ablation.om_dim),
                om_frozen: Some(c.ablation.om_frozen),
                om_checkpoint: Some(c.ablation.om_checkpoint.clone()),
            }),
            log: Some(LogFile { checkpoint_every: Some(c.log.checkpoint_every), wall_time: Some(c.log.wall_time) }),
        }
    }
}
