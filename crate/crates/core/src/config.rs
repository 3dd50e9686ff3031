//! Experiment configuration: a flat `key = value` text document with
//! defaults, range checks, variant presets, and a canonical resolved form.
//!
//! Unknown keys are rejected with line-precise messages. The resolved form
//! is a fixed point: parsing it reproduces an identical resolved form.

use std::collections::BTreeMap;
use std::path::Path;

use crate::env::{make_env, EnvPhysics, Environment};
use crate::planner::PlanConfig;
use crate::sac::LearnerConfig;
use crate::{Error, Result};

/// All experiment knobs, resolved (defaults filled, preset applied).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: String,
    pub seed: u64,
    pub budget: u64,
    pub out_dir: String,
    pub run_name: String,
    pub preset: String,

    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub horizon: usize,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub polyak: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_dynamics: f64,
    pub l_prior_samples: usize,
    pub alpha_clip: f64,
    pub t_q: usize,
    pub t_pi: usize,
    pub b_q: usize,
    pub b_pi: usize,
    pub buffer_capacity: usize,
    pub newsteps: u64,
    pub min_new_episodes: u64,
    pub collectors: usize,
    pub sync: bool,
    pub strict_handoff: bool,
    pub queue_capacity: usize,
    pub checkpoint_interval: u64,
    pub dump_buffer: bool,
    pub dyn_on_policy: bool,
    pub policy_on_policy: bool,

    pub pm_step_size: f64,
    pub pm_arena_half: f64,
    pub pm_reset_half: f64,
    pub valve_step_size: f64,

    pub plan_candidates: usize,
    pub plan_horizon: usize,
    pub skill_hold: usize,
    pub plan_refine_iters: usize,
    pub goal_radius: f64,
    pub elite_frac: f64,
    pub plan_progress_weight: f64,
    pub mpc_step_budget: usize,
    pub eval_count: usize,
    pub eval_horizon: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: "point_mass".into(),
            seed: 0,
            budget: 150_000,
            out_dir: "runs".into(),
            run_name: String::new(),
            preset: String::new(),
            d_z: 2,
            hidden: vec![128, 128],
            horizon: 50,
            gamma: 0.99,
            entropy_coef: 0.1,
            polyak: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_dynamics: 3e-4,
            l_prior_samples: 100,
            alpha_clip: 10.0,
            t_q: 8,
            t_pi: 128,
            b_q: 256,
            b_pi: 256,
            buffer_capacity: 2_000,
            newsteps: 500,
            min_new_episodes: 0,
            collectors: 1,
            sync: true,
            strict_handoff: false,
            queue_capacity: 64,
            checkpoint_interval: 100,
            dump_buffer: false,
            dyn_on_policy: false,
            policy_on_policy: false,
            pm_step_size: 0.05,
            pm_arena_half: 2.0,
            pm_reset_half: 0.1,
            valve_step_size: 0.1,
            plan_candidates: 64,
            plan_horizon: 4,
            skill_hold: 5,
            plan_refine_iters: 1,
            goal_radius: 0.2,
            elite_frac: 0.25,
            plan_progress_weight: 0.1,
            mpc_step_budget: 200,
            eval_count: 20,
            eval_horizon: 50,
        }
    }
}

/// The named variants: replay capacity (short/long) crossed with the clip
/// parameter, plus the two on-policy ablations.
pub const PRESETS: &[&str] = &["s1", "s10", "l1", "l10", "onpolicy-dyn", "baseline-onpolicy"];

const SHORT_CAPACITY: usize = 2_000;
const LONG_CAPACITY: usize = 50_000;

impl ExperimentConfig {
    /// Parses a config document over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.apply_preset()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
        }
        match key {
            "env" => self.env = value.to_string(),
            "seed" => self.seed = p(key, value)?,
            "budget" => self.budget = p(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "run_name" => self.run_name = value.to_string(),
            "preset" => self.preset = value.to_string(),
            "d_z" => self.d_z = p(key, value)?,
            "hidden" => {
                if value.is_empty() {
                    return Err(Error::Config("hidden layer list cannot be empty".into()));
                }
                self.hidden = value
                    .split(',')
                    .map(|v| p::<usize>(key, v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "horizon" => self.horizon = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "entropy_coef" => self.entropy_coef = p(key, value)?,
            "polyak" => self.polyak = p(key, value)?,
            "lr_actor" => self.lr_actor = p(key, value)?,
            "lr_critic" => self.lr_critic = p(key, value)?,
            "lr_dynamics" => self.lr_dynamics = p(key, value)?,
            "l_prior_samples" => self.l_prior_samples = p(key, value)?,
            "alpha_clip" => self.alpha_clip = p(key, value)?,
            "t_q" => self.t_q = p(key, value)?,
            "t_pi" => self.t_pi = p(key, value)?,
            "b_q" => self.b_q = p(key, value)?,
            "b_pi" => self.b_pi = p(key, value)?,
            "buffer_capacity" => self.buffer_capacity = p(key, value)?,
            "newsteps" => self.newsteps = p(key, value)?,
            "min_new_episodes" => self.min_new_episodes = p(key, value)?,
            "collectors" => self.collectors = p(key, value)?,
            "sync" => self.sync = p(key, value)?,
            "strict_handoff" => self.strict_handoff = p(key, value)?,
            "queue_capacity" => self.queue_capacity = p(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = p(key, value)?,
            "dump_buffer" => self.dump_buffer = p(key, value)?,
            "dyn_on_policy" => self.dyn_on_policy = p(key, value)?,
            "policy_on_policy" => self.policy_on_policy = p(key, value)?,
            "pm_step_size" => self.pm_step_size = p(key, value)?,
            "pm_arena_half" => self.pm_arena_half = p(key, value)?,
            "pm_reset_half" => self.pm_reset_half = p(key, value)?,
            "valve_step_size" => self.valve_step_size = p(key, value)?,
            "plan_candidates" => self.plan_candidates = p(key, value)?,
            "plan_horizon" => self.plan_horizon = p(key, value)?,
            "skill_hold" => self.skill_hold = p(key, value)?,
            "plan_refine_iters" => self.plan_refine_iters = p(key, value)?,
            "goal_radius" => self.goal_radius = p(key, value)?,
            "elite_frac" => self.elite_frac = p(key, value)?,
            "plan_progress_weight" => self.plan_progress_weight = p(key, value)?,
            "mpc_step_budget" => self.mpc_step_budget = p(key, value)?,
            "eval_count" => self.eval_count = p(key, value)?,
            "eval_horizon" => self.eval_horizon = p(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies the named variant on top of whatever the document set.
    pub fn apply_preset(&mut self) -> Result<()> {
        match self.preset.as_str() {
            "" => {}
            "s1" => self.set_variant(SHORT_CAPACITY, 1.0, false, false),
            "s10" => self.set_variant(SHORT_CAPACITY, 10.0, false, false),
            "l1" => self.set_variant(LONG_CAPACITY, 1.0, false, false),
            "l10" => self.set_variant(LONG_CAPACITY, 10.0, false, false),
            "onpolicy-dyn" => self.set_variant(LONG_CAPACITY, 1.0, true, false),
            "baseline-onpolicy" => self.set_variant(SHORT_CAPACITY, 1.0, true, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join("|")
                )))
            }
        }
        Ok(())
    }

    fn set_variant(&mut self, capacity: usize, alpha: f64, dyn_on: bool, pol_on: bool) {
        self.buffer_capacity = capacity;
        self.alpha_clip = alpha;
        self.dyn_on_policy = dyn_on;
        self.policy_on_policy = pol_on;
    }

    pub fn validate(&self) -> Result<()> {
        fn check(cond: bool, msg: &str) -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        }
        check(self.env == "point_mass" || self.env == "valve", "env must be point_mass or valve")?;
        check(self.d_z >= 1, "d_z must be >= 1")?;
        check(!self.hidden.is_empty() && self.hidden.iter().all(|h| *h >= 1),
            "hidden widths must be >= 1")?;
        check(self.horizon >= 1, "horizon must be >= 1")?;
        check((0.0..1.0).contains(&self.gamma), "gamma must be in [0, 1)")?;
        check(self.entropy_coef >= 0.0, "entropy_coef must be >= 0")?;
        check(self.polyak > 0.0 && self.polyak <= 1.0, "polyak must be in (0, 1]")?;
        check(self.lr_actor > 0.0 && self.lr_critic > 0.0 && self.lr_dynamics > 0.0,
            "learning rates must be positive")?;
        check(self.l_prior_samples >= 1, "l_prior_samples must be >= 1")?;
        check(self.alpha_clip >= 1.0, "alpha_clip must be >= 1")?;
        check(self.b_q >= 1 && self.b_pi >= 1, "batch sizes must be >= 1")?;
        check(self.buffer_capacity >= 1, "buffer_capacity must be >= 1")?;
        check(self.newsteps >= 1, "newsteps must be >= 1")?;
        check(self.collectors >= 1, "collectors must be >= 1")?;
        check(self.queue_capacity >= 1, "queue_capacity must be >= 1")?;
        check(self.checkpoint_interval >= 1, "checkpoint_interval must be >= 1")?;
        check(self.pm_step_size > 0.0 && self.pm_arena_half > 0.0 && self.pm_reset_half >= 0.0,
            "point-mass constants must be positive (reset half-width may be 0)")?;
        check(self.valve_step_size > 0.0, "valve_step_size must be positive")?;
        check(self.plan_candidates >= 1 && self.plan_horizon >= 1 && self.skill_hold >= 1,
            "plan candidates, horizon, and skill hold must be >= 1")?;
        check(self.goal_radius > 0.0, "goal_radius must be positive")?;
        check(self.elite_frac > 0.0 && self.elite_frac <= 1.0, "elite_frac must be in (0, 1]")?;
        check(self.plan_progress_weight >= 0.0, "plan_progress_weight must be >= 0")?;
        check(self.mpc_step_budget >= 1, "mpc_step_budget must be >= 1")?;
        check(self.eval_count >= 1 && self.eval_horizon >= 1,
            "eval count and horizon must be >= 1")?;
        if self.sync {
            check(self.collectors == 1, "sync mode requires collectors = 1")?;
        }
        Ok(())
    }

    /// Canonical resolved text: every key, sorted, one per line.
    pub fn resolved_text(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("env", self.env.clone());
        map.insert("seed", self.seed.to_string());
        map.insert("budget", self.budget.to_string());
        map.insert("out_dir", self.out_dir.clone());
        map.insert("run_name", self.run_name.clone());
        map.insert("preset", self.preset.clone());
        map.insert("d_z", self.d_z.to_string());
        map.insert(
            "hidden",
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert("horizon", self.horizon.to_string());
        map.insert("gamma", self.gamma.to_string());
        map.insert("entropy_coef", self.entropy_coef.to_string());
        map.insert("polyak", self.polyak.to_string());
        map.insert("lr_actor", self.lr_actor.to_string());
        map.insert("lr_critic", self.lr_critic.to_string());
        map.insert("lr_dynamics", self.lr_dynamics.to_string());
        map.insert("l_prior_samples", self.l_prior_samples.to_string());
        map.insert("alpha_clip", self.alpha_clip.to_string());
        map.insert("t_q", self.t_q.to_string());
        map.insert("t_pi", self.t_pi.to_string());
        map.insert("b_q", self.b_q.to_string());
        map.insert("b_pi", self.b_pi.to_string());
        map.insert("buffer_capacity", self.buffer_capacity.to_string());
        map.insert("newsteps", self.newsteps.to_string());
        map.insert("min_new_episodes", self.min_new_episodes.to_string());
        map.insert("collectors", self.collectors.to_string());
        map.insert("sync", self.sync.to_string());
        map.insert("strict_handoff", self.strict_handoff.to_string());
        map.insert("queue_capacity", self.queue_capacity.to_string());
        map.insert("checkpoint_interval", self.checkpoint_interval.to_string());
        map.insert("dump_buffer", self.dump_buffer.to_string());
        map.insert("dyn_on_policy", self.dyn_on_policy.to_string());
        map.insert("policy_on_policy", self.policy_on_policy.to_string());
        map.insert("pm_step_size", self.pm_step_size.to_string());
        map.insert("pm_arena_half", self.pm_arena_half.to_string());
        map.insert("pm_reset_half", self.pm_reset_half.to_string());
        map.insert("valve_step_size", self.valve_step_size.to_string());
        map.insert("plan_candidates", self.plan_candidates.to_string());
        map.insert("plan_horizon", self.plan_horizon.to_string());
        map.insert("skill_hold", self.skill_hold.to_string());
        map.insert("plan_refine_iters", self.plan_refine_iters.to_string());
        map.insert("goal_radius", self.goal_radius.to_string());
        map.insert("elite_frac", self.elite_frac.to_string());
        map.insert("plan_progress_weight", self.plan_progress_weight.to_string());
        map.insert("mpc_step_budget", self.mpc_step_budget.to_string());
        map.insert("eval_count", self.eval_count.to_string());
        map.insert("eval_horizon", self.eval_horizon.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// FNV-1a hash of the resolved text.
    pub fn hash(&self) -> u64 {
        fnv1a(self.resolved_text().as_bytes())
    }

    pub fn env_physics(&self) -> EnvPhysics {
        EnvPhysics {
            horizon: self.horizon,
            pm_arena_half: self.pm_arena_half,
            pm_reset_half: self.pm_reset_half,
            pm_step_size: self.pm_step_size,
            valve_step_size: self.valve_step_size,
        }
    }

    pub fn build_env(&self) -> Result<Box<dyn Environment>> {
        make_env(&self.env, &self.env_physics())
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            gamma: self.gamma,
            entropy_coef: self.entropy_coef,
            tau: self.polyak,
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
        }
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            candidates: self.plan_candidates,
            plan_horizon: self.plan_horizon,
            skill_hold: self.skill_hold,
            refine_iters: self.plan_refine_iters,
            goal_radius: self.goal_radius,
            elite_frac: self.elite_frac,
            progress_weight: self.plan_progress_weight,
        }
    }

    /// Variant label used for grouping runs in curve aggregation.
    pub fn variant_label(&self) -> String {
        if self.preset.is_empty() {
            "custom".into()
        } else {
            self.preset.clone()
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
