//! Skill-conditioned soft actor-critic: twin critics with Polyak-averaged
//! targets and an entropy-regularized actor trained by the reparameterized
//! pathwise gradient. The entropy coefficient is fixed (no temperature
//! tuning). Consumes reward-relabeled batches from replay.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::dist::{self, DiagGaussian};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::{
    adam_step, mlp_forward_batch, polyak_update, AdamState, ParamVector, ShapeTable,
    LOG_STD_MAX, LOG_STD_MIN, TANH_MARGIN,
};
use crate::replay::Transition;
use crate::{Error, Result};

const LOG_2PI: f64 = 1.8378770664093453;

/// Skill-conditioned policy: input `(s, z)`, output a diagonal Gaussian over
/// the pre-squash action, squashed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub params: ParamVector,
    pub d_s: usize,
    pub d_z: usize,
    pub d_a: usize,
}

impl Actor {
    pub fn new(d_s: usize, d_z: usize, d_a: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let shape = ShapeTable::mlp(d_s + d_z, hidden, 2 * d_a);
        Self { params: ParamVector::init_uniform(shape, rng), d_s, d_z, d_a }
    }

    pub fn from_params(params: ParamVector, d_s: usize, d_z: usize, d_a: usize) -> Result<Self> {
        if params.shape().input_dim() != d_s + d_z || params.shape().output_dim() != 2 * d_a {
            return Err(Error::Dim("actor parameter shape".into()));
        }
        Ok(Self { params, d_s, d_z, d_a })
    }

    fn input_row(&self, s: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.d_s || z.len() != self.d_z {
            return Err(Error::Dim(format!(
                "actor input dims: state {} (want {}), skill {} (want {})",
                s.len(),
                self.d_s,
                z.len(),
                self.d_z
            )));
        }
        let mut row = Vec::with_capacity(self.d_s + self.d_z);
        row.extend_from_slice(s);
        row.extend_from_slice(z);
        Ok(row)
    }

    /// Mean and clamped log-std heads for a batch of `(s, z)` rows.
    pub fn heads_batch(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = mlp_forward_batch(&self.params, inputs)?;
        let mu = out.slice(ndarray::s![.., ..self.d_a]).to_owned();
        let log_std = out
            .slice(ndarray::s![.., self.d_a..])
            .mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mu, log_std))
    }

    /// Pre-squash action distribution at one state-skill pair.
    pub fn dist(&self, s: &[f64], z: &[f64]) -> Result<DiagGaussian> {
        let row = self.input_row(s, z)?;
        let x = ArrayView2::from_shape((1, row.len()), &row)
            .map_err(|e| Error::Dim(e.to_string()))?;
        let (mu, log_std) = self.heads_batch(x)?;
        DiagGaussian::new(mu.row(0).to_vec(), log_std.row(0).mapv(f64::exp).to_vec())
    }

    /// Samples a squashed action and its log-probability.
    pub fn sample(&self, s: &[f64], z: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
        let d = self.dist(s, z)?;
        let noise: Vec<f64> = (0..self.d_a).map(|_| rng.sample(StandardNormal)).collect();
        dist::tanh_gaussian_sample(&d, &noise)
    }

    /// Deterministic action: the squashed mean.
    pub fn mean_action(&self, s: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.dist(s, z)?.mean.iter().map(|m| m.tanh()).collect())
    }

    /// Log-density of a stored squashed action under the current policy.
    pub fn log_prob(&self, s: &[f64], z: &[f64], action: &[f64]) -> Result<f64> {
        let d = self.dist(s, z)?;
        dist::tanh_gaussian_log_prob(&d, action)
    }
}

/// Twin critics with matching Polyak-averaged target copies. Input layout is
/// `(s, a, z)`, scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair {
    pub q1: ParamVector,
    pub q2: ParamVector,
    pub target1: ParamVector,
    pub target2: ParamVector,
    pub d_s: usize,
    pub d_z: usize,
    pub d_a: usize,
}

impl CriticPair {
    pub fn new(d_s: usize, d_z: usize, d_a: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let shape = ShapeTable::mlp(d_s + d_a + d_z, hidden, 1);
        let q1 = ParamVector::init_uniform(shape.clone(), rng);
        let q2 = ParamVector::init_uniform(shape, rng);
        let target1 = q1.clone();
        let target2 = q2.clone();
        Self { q1, q2, target1, target2, d_s, d_z, d_a }
    }

    fn batch_inputs(&self, rows: &[Transition]) -> Array2<f64> {
        build_inputs(rows.iter().map(|t| (t.s.coords(), &t.a[..], t.z.coords())))
    }

    /// `min(target1, target2)` per row of `(s, a, z)` inputs.
    pub fn target_min(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let t1 = mlp_forward_batch(&self.target1, inputs)?;
        let t2 = mlp_forward_batch(&self.target2, inputs)?;
        Ok(t1
            .column(0)
            .iter()
            .zip(t2.column(0))
            .map(|(a, b)| a.min(*b))
            .collect())
    }

    /// `min(q1, q2)` of the online critics per row.
    pub fn online_min(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let q1 = mlp_forward_batch(&self.q1, inputs)?;
        let q2 = mlp_forward_batch(&self.q2, inputs)?;
        Ok(q1
            .column(0)
            .iter()
            .zip(q2.column(0))
            .map(|(a, b)| a.min(*b))
            .collect())
    }
}

/// Polyak update of both target copies: `target <- tau q + (1 - tau) target`.
pub fn target_update(critics: &mut CriticPair, tau: f64) {
    polyak_update(&mut critics.target1, &critics.q1, tau);
    polyak_update(&mut critics.target2, &critics.q2, tau);
}

/// SAC learner knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub gamma: f64,
    /// Fixed entropy coefficient.
    pub entropy_coef: f64,
    /// Polyak rate for target updates.
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1), got {}", self.gamma)));
        }
        if self.entropy_coef < 0.0 {
            return Err(Error::Config("entropy coefficient must be >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config("tau must be in (0,1]".into()));
        }
        Ok(())
    }
}

fn build_inputs<'a>(rows: impl Iterator<Item = (&'a [f64], &'a [f64], &'a [f64])>) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = rows
        .map(|(a, b, c)| {
            let mut row = Vec::with_capacity(a.len() + b.len() + c.len());
            row.extend_from_slice(a);
            row.extend_from_slice(b);
            row.extend_from_slice(c);
            row
        })
        .collect();
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    out
}

/// Bootstrapped regression targets:
/// `y = r + gamma (1 - done) (min(target1, target2)(s', a', z) - beta log pi(a'|s', z))`
/// with one next action sampled from the actor per row.
pub fn critic_targets(
    rows: &[Transition],
    rewards: &[f64],
    actor: &Actor,
    critics: &CriticPair,
    cfg: &LearnerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    assert_eq!(rows.len(), rewards.len());
    let n = rows.len();
    let sz = build_inputs(rows.iter().map(|t| {
        (t.next.coords(), &[][..], t.z.coords())
    }));
    let (mu, log_std) = actor.heads_batch(sz.view())?;
    let d_a = actor.d_a;

    let mut actions = Array2::zeros((n, d_a));
    let mut logpi = vec![0.0; n];
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..d_a {
            let eps: f64 = rng.sample(StandardNormal);
            let std = log_std[[i, j]].exp();
            let a = (mu[[i, j]] + std * eps).tanh();
            let a_cl = a.clamp(-1.0 + TANH_MARGIN, 1.0 - TANH_MARGIN);
            lp += -log_std[[i, j]] - 0.5 * LOG_2PI - 0.5 * eps * eps;
            lp -= (1.0 - a_cl * a_cl).ln();
            actions[[i, j]] = a;
        }
        logpi[i] = lp;
    }

    let q_inputs = {
        let mut out = Array2::zeros((n, critics.d_s + d_a + critics.d_z));
        for (i, t) in rows.iter().enumerate() {
            let mut j = 0;
            for v in t.next.coords() {
                out[[i, j]] = *v;
                j += 1;
            }
            for k in 0..d_a {
                out[[i, j]] = actions[[i, k]];
                j += 1;
            }
            for v in t.z.coords() {
                out[[i, j]] = *v;
                j += 1;
            }
        }
        out
    };
    let tmin = critics.target_min(q_inputs.view())?;

    let mut y = vec![0.0; n];
    for i in 0..n {
        let not_done = if rows[i].done { 0.0 } else { 1.0 };
        y[i] = rewards[i]
            + cfg.gamma * not_done * (tmin[i] - cfg.entropy_coef * logpi[i]);
        if !y[i].is_finite() {
            return Err(Error::NonFinite(format!("critic target at batch row {i}")));
        }
    }
    Ok(y)
}

/// One Adam step per critic on the mean squared error against `targets`.
/// Returns both losses.
pub fn critic_update(
    critics: &mut CriticPair,
    rows: &[Transition],
    targets: &[f64],
    opt1: &mut AdamState,
    opt2: &mut AdamState,
) -> Result<(f64, f64)> {
    assert_eq!(rows.len(), targets.len());
    let inputs = critics.batch_inputs(rows);
    let y = Array2::from_shape_vec((targets.len(), 1), targets.to_vec())
        .map_err(|e| Error::Dim(e.to_string()))?;

    let mut tape = Tape::new();
    let set1 = tape.add_params(&critics.q1);
    let set2 = tape.add_params(&critics.q2);
    let (l1, l2) = critic_loss_graph(&mut tape, set1, set2, inputs, y);
    let loss = tape.add(l1, l2);
    let (l1v, l2v) = (tape.scalar(l1), tape.scalar(l2));
    let grads = tape.backward(loss, &[set1, set2])?;
    drop(tape);
    adam_step(opt1, &mut critics.q1, &grads[0])?;
    adam_step(opt2, &mut critics.q2, &grads[1])?;
    Ok((l1v, l2v))
}

/// Builds both critics' mean-squared-error losses against fixed targets.
pub fn critic_loss_graph(
    tape: &mut Tape<'_>,
    set1: crate::nn::tape::ParamSet,
    set2: crate::nn::tape::ParamSet,
    inputs: Array2<f64>,
    targets: Array2<f64>,
) -> (NodeId, NodeId) {
    let x = tape.constant(inputs);
    let yc = tape.constant(targets);
    let q1 = tape.mlp(set1, x);
    let q2 = tape.mlp(set2, x);
    let d1 = tape.sub(q1, yc);
    let d2 = tape.sub(q2, yc);
    let s1 = tape.square(d1);
    let s2 = tape.square(d2);
    let l1 = tape.mean(s1);
    let l2 = tape.mean(s2);
    (l1, l2)
}

/// Differentiable state-action value used by the actor update. The
/// production implementation is the clipped double-Q of a [`CriticPair`];
/// analytic values are plugged in by verification code.
pub trait ActionValue {
    /// Builds the `(n, 1)` value node for rows of `(s, z)` with the given
    /// action node.
    fn q_node<'p>(&'p self, tape: &mut Tape<'p>, s: NodeId, z: NodeId, action: NodeId) -> NodeId;
}

impl ActionValue for CriticPair {
    fn q_node<'p>(&'p self, tape: &mut Tape<'p>, s: NodeId, z: NodeId, action: NodeId) -> NodeId {
        let input = tape.concat_cols(&[s, action, z]);
        let set1 = tape.add_params(&self.q1);
        let set2 = tape.add_params(&self.q2);
        let q1 = tape.mlp(set1, input);
        let q2 = tape.mlp(set2, input);
        tape.min(q1, q2)
    }
}

/// One Adam step maximizing
/// `E_{a ~ pi}[Q(s, a, z) - beta log pi(a|s, z)]`
/// via the reparameterized sampler. Critics are frozen. Returns the loss.
pub fn actor_update(
    actor: &mut Actor,
    critics: &CriticPair,
    rows: &[Transition],
    cfg: &LearnerConfig,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    actor_update_with(actor, critics, rows, cfg, opt, rng)
}

/// [`actor_update`] generalized over the value implementation.
pub fn actor_update_with(
    actor: &mut Actor,
    value: &dyn ActionValue,
    rows: &[Transition],
    cfg: &LearnerConfig,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = rows.len();
    let d_a = actor.d_a;
    let s_arr = build_inputs(rows.iter().map(|t| (t.s.coords(), &[][..], &[][..])));
    let z_arr = build_inputs(rows.iter().map(|t| (t.z.coords(), &[][..], &[][..])));
    let sz = build_inputs(rows.iter().map(|t| (t.s.coords(), t.z.coords(), &[][..])));

    let mut noise = Array2::zeros((n, d_a));
    for i in 0..n {
        for j in 0..d_a {
            noise[[i, j]] = rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut tape = Tape::new();
    let actor_set = tape.add_params(&actor.params);
    let loss = actor_loss_graph(
        &mut tape,
        actor_set,
        value,
        d_a,
        cfg.entropy_coef,
        ActorLossInputs { states_skills: sz, states: s_arr, skills: z_arr, noise },
    );
    let loss_value = tape.scalar(loss);
    let grads = tape.backward(loss, &[actor_set])?;
    drop(tape);
    adam_step(opt, &mut actor.params, &grads[0])?;
    Ok(loss_value)
}

/// Constant inputs to one actor update step.
pub struct ActorLossInputs {
    /// `(n, d_s + d_z)` actor inputs.
    pub states_skills: Array2<f64>,
    /// `(n, d_s)` states alone, for the value network.
    pub states: Array2<f64>,
    /// `(n, d_z)` skills alone, for the value network.
    pub skills: Array2<f64>,
    /// `(n, d_a)` standard-normal reparameterization noise.
    pub noise: Array2<f64>,
}

/// Builds the actor loss
/// `-E[Q(s, a, z) - beta log pi(a|s,z)]` with `a = tanh(mu + sigma eps)`.
pub fn actor_loss_graph<'p>(
    tape: &mut Tape<'p>,
    actor_set: crate::nn::tape::ParamSet,
    value: &'p dyn ActionValue,
    d_a: usize,
    entropy_coef: f64,
    inputs: ActorLossInputs,
) -> NodeId {
    // constant part of the sampled-path Gaussian log-density
    let gauss_const = inputs.noise.mapv(|e| -0.5 * LOG_2PI - 0.5 * e * e);
    let sz_c = tape.constant(inputs.states_skills);
    let s_c = tape.constant(inputs.states);
    let z_c = tape.constant(inputs.skills);
    let eps_c = tape.constant(inputs.noise);
    let const_c = tape.constant(gauss_const);

    let out = tape.mlp(actor_set, sz_c);
    let mu = tape.slice_cols(out, 0, d_a);
    let log_std_raw = tape.slice_cols(out, d_a, d_a);
    let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
    let std = tape.exp(log_std);
    let scaled = tape.mul(std, eps_c);
    let u = tape.add(mu, scaled);
    let action = tape.tanh(u);

    // log pi = sum_j [-log_std - 0.5 log 2pi - eps^2/2 - log(1 - a_cl^2)]
    let a_cl = tape.clamp(action, -1.0 + TANH_MARGIN, 1.0 - TANH_MARGIN);
    let a_sq = tape.square(a_cl);
    let one_minus = tape.scale_shift(a_sq, -1.0, 1.0);
    let jac = tape.log(one_minus);
    let neg_ls = tape.scale_shift(log_std, -1.0, 0.0);
    let gauss = tape.add(neg_ls, const_c);
    let per_dim = tape.sub(gauss, jac);
    let logpi = tape.row_sum(per_dim);

    let q = value.q_node(tape, s_c, z_c, action);
    let ent = tape.scale_shift(logpi, entropy_coef, 0.0);
    let obj = tape.sub(q, ent);
    let mean_obj = tape.mean(obj);
    tape.scale_shift(mean_obj, -1.0, 0.0)
}
