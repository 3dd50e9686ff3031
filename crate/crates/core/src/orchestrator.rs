//! Asynchronous collector/trainer control loop.
//!
//! Collectors hold immutable, versioned policy snapshots, sample one skill
//! per episode, and stream episodes to the single trainer through a bounded
//! queue. The trainer gates on fresh experience (`n >= s + newsteps` plus a
//! minimum-episode requirement), then runs `t_q` skill-dynamics updates with
//! clipped importance weights followed by `t_pi` soft actor-critic rounds on
//! reward-relabeled batches, and finally publishes a new snapshot.
//!
//! A fully synchronous single-threaded mode (one collector, strict
//! alternation) exists for deterministic tests; the asynchronous mode can
//! reproduce it bitwise with one collector and strict hand-off enabled.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngPositions, RoundCounters};
use crate::config::ExperimentConfig;
use crate::dads::{
    dynamics_update, sample_prior, DynamicsBatch, DynamicsModel, RewardContext, SkillVector,
};
use crate::env::Environment;
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::nn::AdamState;
use crate::replay::{relabel, weight_batch, ReplayBuffer, Transition};
use crate::sac::{actor_update, critic_targets, critic_update, target_update, Actor, CriticPair};
use crate::{Error, Result};

/// RNG stream layout derived from the master seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAINER: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_PLAN: u64 = 3;
pub const STREAM_COLLECTOR_BASE: u64 = 1000;

pub fn make_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Immutable, versioned copy of the policy used by collectors.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub actor: Actor,
    pub version: u64,
}

/// One collected episode in flight from a collector to the trainer.
#[derive(Debug, Clone)]
pub struct EpisodeMessage {
    pub transitions: Vec<Transition>,
    pub z: SkillVector,
    pub collector: usize,
    pub version: u64,
    /// Per-collector episode counter, for ordering checks.
    pub seq: u64,
    pub fault: Option<String>,
}

/// Gating state for training rounds.
#[derive(Debug, Clone, Copy)]
pub struct RoundState {
    /// Samples consumed at the last round start (`s` in the control loop).
    pub consumed_mark: u64,
    /// Total samples received (`n`).
    pub total: u64,
    pub newsteps: u64,
    pub min_new_episodes: u64,
    pub new_episodes: u64,
    pub episodes_total: u64,
}

impl RoundState {
    pub fn gate_satisfied(&self) -> bool {
        self.total >= self.consumed_mark + self.newsteps
            && self.new_episodes >= self.min_new_episodes
    }
}

/// Runs one episode under a frozen snapshot: one skill for the whole
/// episode, actions sampled from the snapshot actor, behavior log-density
/// recorded at sampling time. The stored `done` marks premature termination
/// only; horizon exhaustion bootstraps.
pub fn collect_episode(
    env: &dyn Environment,
    snapshot: &PolicySnapshot,
    rng: &mut ChaCha8Rng,
    collector: usize,
    seq: u64,
) -> EpisodeMessage {
    let d_z = snapshot.actor.d_z;
    let z = sample_prior(rng, d_z);
    let mut transitions = Vec::with_capacity(env.spec().horizon);
    let mut fault = None;

    let mut state = env.reset(rng);
    let mut step_index = 0;
    loop {
        match snapshot.actor.sample(state.coords(), z.coords(), rng) {
            Ok((action, logp)) => {
                let result = env.step(&state, &action, step_index);
                let premature = env.premature(&result.next_state);
                transitions.push(Transition {
                    s: state,
                    z: z.clone(),
                    a: action,
                    next: result.next_state.clone(),
                    logp_c: logp,
                    done: premature,
                    policy_version: snapshot.version,
                });
                state = result.next_state;
                step_index = result.step_index;
                if result.done {
                    break;
                }
            }
            Err(e) => {
                fault = Some(e.to_string());
                break;
            }
        }
    }
    EpisodeMessage { transitions, z, collector, version: snapshot.version, seq, fault }
}

/// Metrics accumulated over one training round.
#[derive(Debug, Clone, Copy)]
pub struct RoundMetrics {
    pub reward_mean: f64,
    pub dyn_log_lik: f64,
    pub w_mean: f64,
    pub w_max: f64,
    pub staleness_max: u64,
}

/// The single owner of all learnable state and the replay buffer.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub env: Box<dyn Environment>,
    pub actor: Actor,
    pub critics: CriticPair,
    pub dynamics: DynamicsModel,
    pub opt_actor: AdamState,
    pub opt_q1: AdamState,
    pub opt_q2: AdamState,
    pub opt_dynamics: AdamState,
    pub buffer: ReplayBuffer,
    /// Transitions received since the last round start.
    pub fresh: Vec<Transition>,
    pub round_state: RoundState,
    pub version: u64,
    pub rounds: u64,
    pub rng: ChaCha8Rng,
    staleness_round: u64,
    pub dropped_messages: u64,
    /// `(collector, seq)` in ingestion order, for ordering checks.
    pub ingest_log: Vec<(usize, u64)>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.build_env()?;
        let spec = env.spec().clone();
        let mut init_rng = make_rng(cfg.seed, STREAM_INIT);
        let actor = Actor::new(spec.d_s, cfg.d_z, spec.d_a, &cfg.hidden, &mut init_rng);
        let critics = CriticPair::new(spec.d_s, cfg.d_z, spec.d_a, &cfg.hidden, &mut init_rng);
        let dynamics = DynamicsModel::new(spec.d_r, cfg.d_z, &cfg.hidden, &mut init_rng);
        let opt_actor = AdamState::new(actor.params.len(), cfg.lr_actor);
        let opt_q1 = AdamState::new(critics.q1.len(), cfg.lr_critic);
        let opt_q2 = AdamState::new(critics.q2.len(), cfg.lr_critic);
        let opt_dynamics = AdamState::new(dynamics.params.len(), cfg.lr_dynamics);
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        let round_state = RoundState {
            consumed_mark: 0,
            total: 0,
            newsteps: cfg.newsteps,
            min_new_episodes: cfg.min_new_episodes,
            new_episodes: 0,
            episodes_total: 0,
        };
        let rng = make_rng(cfg.seed, STREAM_TRAINER);
        Ok(Self {
            cfg,
            env,
            actor,
            critics,
            dynamics,
            opt_actor,
            opt_q1,
            opt_q2,
            opt_dynamics,
            buffer,
            fresh: Vec::new(),
            round_state,
            version: 0,
            rounds: 0,
            rng,
            staleness_round: 0,
            dropped_messages: 0,
            ingest_log: Vec::new(),
        })
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot { actor: self.actor.clone(), version: self.version }
    }

    /// Drains one message into the buffer. Flagged or empty messages are
    /// dropped with a counter increment.
    pub fn ingest(&mut self, msg: EpisodeMessage) {
        if msg.fault.is_some() || msg.transitions.is_empty() {
            self.dropped_messages += 1;
            return;
        }
        debug_assert!(msg.version <= self.version, "message from the future");
        let staleness = self.version - msg.version;
        self.staleness_round = self.staleness_round.max(staleness);
        let len = msg.transitions.len() as u64;
        self.ingest_log.push((msg.collector, msg.seq));
        self.fresh.extend(msg.transitions.iter().cloned());
        if self.buffer.add_episode(msg.transitions).is_err() {
            self.dropped_messages += 1;
            self.fresh.truncate(self.fresh.len() - len as usize);
            return;
        }
        self.round_state.total += len;
        self.round_state.new_episodes += 1;
        self.round_state.episodes_total += 1;
    }


    /// One gated training round: `t_q` dynamics updates, then `t_pi` SAC
    /// iterations, then the bookkeeping (`s <- n`, version bump). On any
    /// failure the learner state is rolled back to the round start and the
    /// error surfaced.
    pub fn train_round(&mut self) -> Result<RoundMetrics> {
        let rollback = self.capture_rollback();
        match self.train_round_inner() {
            Ok(metrics) => Ok(metrics),
            Err(e) => {
                self.restore_rollback(rollback);
                Err(e)
            }
        }
    }

    fn train_round_inner(&mut self) -> Result<RoundMetrics> {
        let t_q = self.cfg.t_q;
        let t_pi = self.cfg.t_pi;
        let alpha = self.cfg.alpha_clip;
        let lcfg = self.cfg.learner_config();

        // This round's prior samples, shared across all relabeled batches.
        let priors: Vec<SkillVector> =
            (0..self.cfg.l_prior_samples).map(|_| sample_prior(&mut self.rng, self.cfg.d_z)).collect();

        let mut dyn_log_lik_sum = 0.0;
        let mut w_sum = 0.0;
        let mut w_count = 0usize;
        let mut w_max = f64::NEG_INFINITY;
        for _ in 0..t_q {
            let rows = sample_rows(
                &self.buffer,
                &self.fresh,
                &mut self.rng,
                self.cfg.b_q,
                self.cfg.dyn_on_policy,
            )?;
            let weights = if self.cfg.dyn_on_policy {
                vec![1.0; rows.len()]
            } else {
                weight_batch(&rows, &self.actor, alpha)?
            };
            for w in &weights {
                w_sum += w;
                w_max = w_max.max(*w);
            }
            w_count += weights.len();
            let triples: Vec<_> =
                rows.iter().map(|t| (t.s.clone(), t.z.clone(), t.next.clone())).collect();
            let mut batch = DynamicsBatch::from_rows(self.env.as_ref(), &triples);
            batch.weights = weights;
            let stats = dynamics_update(&mut self.dynamics, &batch, &mut self.opt_dynamics)
                .map_err(|e| Error::Runtime(format!("dynamics update failed: {e}")))?;
            dyn_log_lik_sum += stats.mean_log_prob;
        }

        let ctx = RewardContext::new(&self.dynamics, priors)?;
        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        for _ in 0..t_pi {
            let rows = sample_rows(
                &self.buffer,
                &self.fresh,
                &mut self.rng,
                self.cfg.b_pi,
                self.cfg.policy_on_policy,
            )?;
            let rewards = relabel(&rows, &ctx, self.env.as_ref())?;
            for r in &rewards {
                reward_sum += r;
            }
            reward_count += rewards.len();
            let y = critic_targets(&rows, &rewards, &self.actor, &self.critics, &lcfg, &mut self.rng)?;
            critic_update(&mut self.critics, &rows, &y, &mut self.opt_q1, &mut self.opt_q2)?;
            actor_update(
                &mut self.actor,
                &self.critics,
                &rows,
                &lcfg,
                &mut self.opt_actor,
                &mut self.rng,
            )?;
            target_update(&mut self.critics, lcfg.tau);
        }
        drop(ctx);

        self.round_state.consumed_mark = self.round_state.total;
        self.round_state.new_episodes = 0;
        self.fresh.clear();
        self.version += 1;
        self.rounds += 1;
        let staleness_max = self.staleness_round;
        self.staleness_round = 0;

        Ok(RoundMetrics {
            reward_mean: reward_sum / reward_count.max(1) as f64,
            dyn_log_lik: if t_q > 0 { dyn_log_lik_sum / t_q as f64 } else { f64::NAN },
            w_mean: if w_count > 0 { w_sum / w_count as f64 } else { f64::NAN },
            w_max: if w_count > 0 { w_max } else { f64::NAN },
            staleness_max,
        })
    }

    fn capture_rollback(&self) -> RollbackPoint {
        RollbackPoint {
            actor: self.actor.clone(),
            critics: self.critics.clone(),
            dynamics: self.dynamics.clone(),
            opt_actor: self.opt_actor.clone(),
            opt_q1: self.opt_q1.clone(),
            opt_q2: self.opt_q2.clone(),
            opt_dynamics: self.opt_dynamics.clone(),
            rng: self.rng.clone(),
        }
    }

    fn restore_rollback(&mut self, r: RollbackPoint) {
        self.actor = r.actor;
        self.critics = r.critics;
        self.dynamics = r.dynamics;
        self.opt_actor = r.opt_actor;
        self.opt_q1 = r.opt_q1;
        self.opt_q2 = r.opt_q2;
        self.opt_dynamics = r.opt_dynamics;
        self.rng = r.rng;
    }

    pub fn checkpoint(&self, collector_word_pos: Vec<u128>) -> Checkpoint {
        let spec = self.env.spec();
        Checkpoint {
            meta: CheckpointMeta {
                env_name: self.cfg.env.clone(),
                d_s: spec.d_s,
                d_a: spec.d_a,
                d_r: spec.d_r,
                d_z: self.cfg.d_z,
                l_prior_samples: self.cfg.l_prior_samples,
                physics: self.cfg.env_physics(),
            },
            actor: self.actor.clone(),
            critics: self.critics.clone(),
            dynamics: self.dynamics.clone(),
            opt_actor: self.opt_actor.clone(),
            opt_q1: self.opt_q1.clone(),
            opt_q2: self.opt_q2.clone(),
            opt_dynamics: self.opt_dynamics.clone(),
            counters: RoundCounters {
                consumed_mark: self.round_state.consumed_mark,
                total_samples: self.round_state.total,
                version: self.version,
                rounds: self.rounds,
                episodes: self.round_state.episodes_total,
            },
            rng: RngPositions {
                master_seed: self.cfg.seed,
                trainer_word_pos: self.rng.get_word_pos(),
                collector_word_pos,
            },
            config_hash: self.cfg.hash(),
        }
    }
}

/// Uniform sampling from the buffer, or from this round's fresh
/// transitions for the on-policy ablations.
fn sample_rows(
    buffer: &ReplayBuffer,
    fresh: &[Transition],
    rng: &mut ChaCha8Rng,
    batch: usize,
    on_policy: bool,
) -> Result<Vec<Transition>> {
    if on_policy {
        if fresh.is_empty() {
            return Err(Error::Empty("no fresh transitions for on-policy sampling".into()));
        }
        use rand::Rng;
        Ok((0..batch).map(|_| fresh[rng.random_range(0..fresh.len())].clone()).collect())
    } else {
        buffer.sample_uniform(batch, rng)
    }
}

struct RollbackPoint {
    actor: Actor,
    critics: CriticPair,
    dynamics: DynamicsModel,
    opt_actor: AdamState,
    opt_q1: AdamState,
    opt_q2: AdamState,
    opt_dynamics: AdamState,
    rng: ChaCha8Rng,
}

/// Output of a full training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub rounds: u64,
    pub total_samples: u64,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub dropped_messages: u64,
}

/// Run manifest written next to the outputs.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub checkpoints: Vec<String>,
    pub metrics: String,
    pub resolved_config: String,
    pub buffer_dump: Option<String>,
}

fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Picks the run directory: `$MI_SKILLS_OUT` overrides the configured output
/// root; the leaf is `run_name` or `<variant>-seed<k>`, uniquified.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let root = std::env::var("MI_SKILLS_OUT").unwrap_or_else(|_| cfg.out_dir.clone());
    let base = if cfg.run_name.is_empty() {
        format!("{}-seed{}", cfg.variant_label(), cfg.seed)
    } else {
        cfg.run_name.clone()
    };
    let root = PathBuf::from(root);
    std::fs::create_dir_all(&root)?;
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = root.join(format!("{base}-{k}"));
    }
    std::fs::create_dir(&dir)?;
    Ok(dir)
}

/// Trains until the sample budget is reached, writing metrics, periodic
/// checkpoints, and a manifest into `run_dir`.
pub fn run(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let started = unix_now();
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.resolved"), cfg.resolved_text())?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path)?;

    let mut trainer = Trainer::new(cfg.clone())?;
    let deterministic_timing = cfg.sync || cfg.strict_handoff;
    let clock = Instant::now();

    let mut checkpoints = Vec::new();
    let save_ckpt = |trainer: &Trainer, name: &str, collector_pos: Vec<u128>| -> Result<PathBuf> {
        let path = run_dir.join(name);
        trainer.checkpoint(collector_pos).save(&path)?;
        Ok(path)
    };
    checkpoints.push(save_ckpt(&trainer, "ckpt_round_000000.bin", vec![])?);

    if cfg.sync {
        let mut collector_rng = make_rng(cfg.seed, STREAM_COLLECTOR_BASE);
        let env = cfg.build_env()?;
        let mut seq = 0;
        while trainer.round_state.total < cfg.budget {
            while !trainer.round_state.gate_satisfied() {
                let snapshot = trainer.snapshot();
                let msg = collect_episode(env.as_ref(), &snapshot, &mut collector_rng, 0, seq);
                seq += 1;
                trainer.ingest(msg);
            }
            let round = trainer.train_round()?;
            write_round_row(
                &mut metrics,
                &trainer,
                &round,
                if deterministic_timing { 0.0 } else { clock.elapsed().as_secs_f64() },
            )?;
            if trainer.rounds % cfg.checkpoint_interval == 0 {
                let name = format!("ckpt_round_{:06}.bin", trainer.rounds);
                checkpoints.push(save_ckpt(
                    &trainer,
                    &name,
                    vec![collector_rng.get_word_pos()],
                )?);
            }
        }
        let final_path = save_ckpt(&trainer, "ckpt_final.bin", vec![collector_rng.get_word_pos()])?;
        checkpoints.push(final_path.clone());
        finish_run(
            cfg,
            run_dir,
            &trainer,
            metrics_path,
            checkpoints,
            final_path,
            started,
        )
    } else {
        run_async(cfg, run_dir, trainer, metrics, metrics_path, checkpoints, started, clock)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_async(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    mut trainer: Trainer,
    mut metrics: MetricsWriter,
    metrics_path: PathBuf,
    mut checkpoints: Vec<PathBuf>,
    started: f64,
    clock: Instant,
) -> Result<RunSummary> {
    let deterministic_timing = cfg.strict_handoff;
    let stop = Arc::new(AtomicBool::new(false));
    let mailbox = Arc::new(RwLock::new(Arc::new(trainer.snapshot())));
    let (episode_tx, episode_rx) = std::sync::mpsc::sync_channel(cfg.queue_capacity);

    // Strict hand-off: a rendezvous token must be granted before a collector
    // may read the snapshot and start an episode.
    let mut token_channels: Vec<Option<SyncSender<()>>> =
        (0..cfg.collectors).map(|_| None).collect();
    let mut handles = Vec::new();
    for i in 0..cfg.collectors {
        let env = cfg.build_env()?;
        let mut rng = make_rng(cfg.seed, STREAM_COLLECTOR_BASE + i as u64);
        let mailbox = Arc::clone(&mailbox);
        let stop = Arc::clone(&stop);
        let tx = episode_tx.clone();
        let token_rx: Option<Receiver<()>> = if cfg.strict_handoff {
            let (t_tx, t_rx) = std::sync::mpsc::sync_channel(0);
            token_channels[i] = Some(t_tx);
            Some(t_rx)
        } else {
            None
        };
        handles.push(std::thread::spawn(move || {
            let mut seq = 0u64;
            loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                if let Some(rx) = &token_rx {
                    if rx.recv().is_err() {
                        break;
                    }
                }
                let snapshot = { mailbox.read().expect("snapshot lock").clone() };
                let msg = collect_episode(env.as_ref(), &snapshot, &mut rng, i, seq);
                seq += 1;
                if tx.send(msg).is_err() {
                    break;
                }
            }
            rng.get_word_pos()
        }));
    }
    drop(episode_tx);

    let outcome = (|| -> Result<()> {
        while trainer.round_state.total < cfg.budget {
            while !trainer.round_state.gate_satisfied() {
                if cfg.strict_handoff {
                    for tx in token_channels.iter().flatten() {
                        if tx.send(()).is_err() {
                            return Err(Error::Runtime("all collectors stopped".into()));
                        }
                    }
                }
                match episode_rx.recv() {
                    Ok(msg) => trainer.ingest(msg),
                    Err(_) => return Err(Error::Runtime("all collectors stopped".into())),
                }
            }
            let round = trainer.train_round()?;
            {
                let mut slot = mailbox.write().expect("snapshot lock");
                *slot = Arc::new(trainer.snapshot());
            }
            write_round_row(
                &mut metrics,
                &trainer,
                &round,
                if deterministic_timing { 0.0 } else { clock.elapsed().as_secs_f64() },
            )?;
            if trainer.rounds % cfg.checkpoint_interval == 0 {
                let name = format!("ckpt_round_{:06}.bin", trainer.rounds);
                let path = run_dir.join(name);
                trainer.checkpoint(vec![]).save(&path)?;
                checkpoints.push(path);
            }
        }
        Ok(())
    })();

    stop.store(true, Ordering::Relaxed);
    drop(episode_rx);
    drop(token_channels);
    let mut collector_pos = Vec::new();
    for h in handles {
        if let Ok(pos) = h.join() {
            collector_pos.push(pos);
        }
    }
    outcome?;

    let final_path = run_dir.join("ckpt_final.bin");
    trainer.checkpoint(collector_pos).save(&final_path)?;
    checkpoints.push(final_path.clone());
    finish_run(cfg, run_dir, &trainer, metrics_path, checkpoints, final_path, started)
}

fn write_round_row(
    metrics: &mut MetricsWriter,
    trainer: &Trainer,
    round: &RoundMetrics,
    wall_clock_s: f64,
) -> Result<()> {
    metrics.write_row(&MetricsRow {
        round: trainer.rounds,
        samples: trainer.round_state.total,
        reward_mean: round.reward_mean,
        dyn_log_lik: round.dyn_log_lik,
        w_mean: round.w_mean,
        w_max: round.w_max,
        version: trainer.version,
        staleness_max: round.staleness_max,
        wall_clock_s,
    })
}

fn finish_run(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    trainer: &Trainer,
    metrics_path: PathBuf,
    checkpoints: Vec<PathBuf>,
    final_checkpoint: PathBuf,
    started: f64,
) -> Result<RunSummary> {
    let buffer_dump = if cfg.dump_buffer {
        let path = run_dir.join("buffer.dump");
        let spec = trainer.env.spec();
        trainer.buffer.dump(&path, spec.d_s, cfg.d_z, spec.d_a)?;
        Some("buffer.dump".to_string())
    } else {
        None
    };
    let manifest = RunManifest {
        format_version: crate::checkpoint::FORMAT_VERSION,
        config_hash: format!("{:016x}", cfg.hash()),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: unix_now(),
        checkpoints: checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
        metrics: "metrics.csv".into(),
        resolved_config: "config.resolved".into(),
        buffer_dump,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Runtime(format!("manifest: {e}")))?;
    std::fs::write(run_dir.join("manifest.json"), manifest_json)?;

    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        rounds: trainer.rounds,
        total_samples: trainer.round_state.total,
        metrics_path,
        checkpoints,
        final_checkpoint,
        dropped_messages: trainer.dropped_messages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PointMass2D;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            hidden: vec![16, 16],
            l_prior_samples: 10,
            t_q: 2,
            t_pi: 2,
            b_q: 16,
            b_pi: 16,
            budget: 1_000,
            newsteps: 500,
            buffer_capacity: 2_000,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn horizon_one_episode_has_one_transition() {
        let cfg = ExperimentConfig { horizon: 1, ..tiny_cfg() };
        let trainer = Trainer::new(cfg.clone()).unwrap();
        let env = PointMass2D::new(1, 2.0, 0.1, 0.05);
        let mut rng = make_rng(0, STREAM_COLLECTOR_BASE);
        let msg = collect_episode(&env, &trainer.snapshot(), &mut rng, 0, 0);
        assert_eq!(msg.transitions.len(), 1);
        assert!(msg.fault.is_none());
    }

    #[test]
    fn collected_episodes_are_deterministic_and_share_one_skill() {
        let cfg = tiny_cfg();
        let trainer = Trainer::new(cfg).unwrap();
        let env = PointMass2D::new(50, 2.0, 0.1, 0.05);
        let collect = || {
            let mut rng = make_rng(3, STREAM_COLLECTOR_BASE);
            collect_episode(&env, &trainer.snapshot(), &mut rng, 0, 0)
        };
        let a = collect();
        let b = collect();
        assert_eq!(a.transitions, b.transitions);
        assert_eq!(a.transitions.len(), 50);
        assert!(a.transitions.iter().all(|t| t.z == a.z));
        assert!(a.transitions.iter().all(|t| t.policy_version == 0));
        // horizon exhaustion must not mark done (bootstrapping continues)
        assert!(a.transitions.iter().all(|t| !t.done));
    }

    #[test]
    fn behavior_log_density_round_trips() {
        let cfg = tiny_cfg();
        let trainer = Trainer::new(cfg).unwrap();
        let env = PointMass2D::new(50, 2.0, 0.1, 0.05);
        let mut rng = make_rng(11, STREAM_COLLECTOR_BASE);
        let msg = collect_episode(&env, &trainer.snapshot(), &mut rng, 0, 0);
        for t in &msg.transitions {
            let recomputed =
                trainer.actor.log_prob(t.s.coords(), t.z.coords(), &t.a).unwrap();
            assert!(
                (recomputed - t.logp_c).abs() < 1e-9,
                "stored {} recomputed {recomputed}",
                t.logp_c
            );
        }
    }

    #[test]
    fn gate_consumes_exactly_newsteps_worth_of_episodes() {
        let cfg = tiny_cfg(); // horizon 50, newsteps 500
        let mut trainer = Trainer::new(cfg).unwrap();
        let env = PointMass2D::new(50, 2.0, 0.1, 0.05);
        let mut rng = make_rng(0, STREAM_COLLECTOR_BASE);
        let mut episodes = 0;
        while !trainer.round_state.gate_satisfied() {
            let msg = collect_episode(&env, &trainer.snapshot(), &mut rng, 0, episodes);
            trainer.ingest(msg);
            episodes += 1;
        }
        assert_eq!(episodes, 10);
        assert_eq!(trainer.round_state.total, 500);
    }

    #[test]
    fn zero_step_round_only_bumps_version_and_mark() {
        let mut cfg = tiny_cfg();
        cfg.t_q = 0;
        cfg.t_pi = 0;
        let mut trainer = Trainer::new(cfg).unwrap();
        let env = PointMass2D::new(50, 2.0, 0.1, 0.05);
        let mut rng = make_rng(0, STREAM_COLLECTOR_BASE);
        while !trainer.round_state.gate_satisfied() {
            let msg = collect_episode(&env, &trainer.snapshot(), &mut rng, 0, 0);
            trainer.ingest(msg);
        }
        let actor_before = trainer.actor.params.values().to_vec();
        let dyn_before = trainer.dynamics.params.values().to_vec();
        let metrics = trainer.train_round().unwrap();
        assert_eq!(trainer.actor.params.values(), &actor_before[..]);
        assert_eq!(trainer.dynamics.params.values(), &dyn_before[..]);
        assert_eq!(trainer.version, 1);
        assert_eq!(trainer.round_state.consumed_mark, trainer.round_state.total);
        assert!(metrics.reward_mean.is_nan() || metrics.reward_mean == 0.0);
        assert!(metrics.dyn_log_lik.is_nan());
    }

    #[test]
    fn faulted_messages_are_dropped_with_a_count() {
        let cfg = tiny_cfg();
        let mut trainer = Trainer::new(cfg).unwrap();
        let msg = EpisodeMessage {
            transitions: vec![],
            z: SkillVector(vec![0.0, 0.0]),
            collector: 0,
            version: 0,
            seq: 0,
            fault: Some("synthetic".into()),
        };
        trainer.ingest(msg);
        assert_eq!(trainer.dropped_messages, 1);
        assert_eq!(trainer.round_state.total, 0);
        assert!(trainer.buffer.is_empty());
    }

    #[test]
    fn failed_round_rolls_back_learner_state() {
        let mut cfg = tiny_cfg();
        // force a relabel/critic failure via an empty fresh set in the
        // on-policy ablation after clearing fresh data
        cfg.dyn_on_policy = true;
        let mut trainer = Trainer::new(cfg).unwrap();
        let env = PointMass2D::new(50, 2.0, 0.1, 0.05);
        let mut rng = make_rng(0, STREAM_COLLECTOR_BASE);
        while !trainer.round_state.gate_satisfied() {
            let msg = collect_episode(&env, &trainer.snapshot(), &mut rng, 0, 0);
            trainer.ingest(msg);
        }
        trainer.fresh.clear(); // sabotage: on-policy sampling must fail
        let actor_before = trainer.actor.params.values().to_vec();
        let rng_before = trainer.rng.clone();
        assert!(trainer.train_round().is_err());
        assert_eq!(trainer.actor.params.values(), &actor_before[..]);
        assert_eq!(trainer.rng, rng_before);
        assert_eq!(trainer.version, 0);
    }
}
