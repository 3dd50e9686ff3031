//! Mutual-information skill machinery: the uniform skill prior, the
//! variational skill-dynamics model, the intrinsic reward, and the clipped
//! importance-sampling correction for off-policy dynamics training.
//!
//! The intrinsic reward for a transition `(s, z, s')` is
//!
//! ```text
//! r = log q(delta | s, z) - logsumexp_i log q(delta | s, z_i) + log L
//! ```
//!
//! over `L` skills drawn from the prior: transitions that are predictable
//! under the executing skill but not under others score high. Everything is
//! evaluated in log space; the direct density-ratio form underflows for
//! plausible densities.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{delta_between, reduced_delta, Environment, State};
use crate::nn::dist::DiagGaussian;
use crate::nn::tape::Tape;
use crate::nn::{adam_step, AdamState, ParamVector, ShapeTable, LOG_STD_MAX, LOG_STD_MIN};
use crate::{Error, Result};

const LOG_2PI: f64 = 1.8378770664093453;

/// Continuous latent skill in [-1, 1]^{d_z}, fixed for a whole episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillVector(pub Vec<f64>);

impl SkillVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("skill outside [-1,1]: {z:?}")));
        }
        Ok(Self(z))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

/// Draws a skill from the uniform prior over [-1, 1]^{d_z}.
pub fn sample_prior(rng: &mut ChaCha8Rng, d_z: usize) -> SkillVector {
    SkillVector((0..d_z).map(|_| rng.random_range(-1.0..=1.0)).collect())
}

/// Variational skill dynamics `q(s' | s, z)`: a diagonal Gaussian over the
/// reduced-state delta, conditioned on the reduced state and the skill.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub params: ParamVector,
    pub d_r: usize,
    pub d_z: usize,
}

impl DynamicsModel {
    pub fn new(d_r: usize, d_z: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let shape = ShapeTable::mlp(d_r + d_z, hidden, 2 * d_r);
        Self { params: ParamVector::init_uniform(shape, rng), d_r, d_z }
    }

    pub fn from_params(params: ParamVector, d_r: usize, d_z: usize) -> Result<Self> {
        if params.shape().input_dim() != d_r + d_z || params.shape().output_dim() != 2 * d_r {
            return Err(Error::Dim("dynamics parameter shape".into()));
        }
        Ok(Self { params, d_r, d_z })
    }

    /// Mean and clamped log-std heads for a batch of `(reduced, z)` inputs.
    pub fn heads(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = crate::nn::mlp_forward_batch(&self.params, inputs)?;
        let mu = out.slice(ndarray::s![.., ..self.d_r]).to_owned();
        let log_std = out
            .slice(ndarray::s![.., self.d_r..])
            .mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mu, log_std))
    }

    /// Predictive distribution over the reduced delta at one input.
    pub fn predict(&self, reduced: &[f64], z: &[f64]) -> Result<DiagGaussian> {
        let mut input = Vec::with_capacity(self.d_r + self.d_z);
        input.extend_from_slice(reduced);
        input.extend_from_slice(z);
        let x = ArrayView2::from_shape((1, input.len()), &input)
            .map_err(|e| Error::Dim(e.to_string()))?;
        let (mu, log_std) = self.heads(x)?;
        DiagGaussian::new(mu.row(0).to_vec(), log_std.row(0).mapv(f64::exp).to_vec())
    }

    /// Log-density of one observed delta under each row of a batch of
    /// `(reduced, z)` inputs.
    pub fn delta_log_prob_rows(&self, inputs: ArrayView2<f64>, delta: &[f64]) -> Result<Vec<f64>> {
        let (mu, log_std) = self.heads(inputs)?;
        let mut out = Vec::with_capacity(mu.nrows());
        for (mrow, lrow) in mu.rows().into_iter().zip(log_std.rows()) {
            let mut lp = 0.0;
            for i in 0..self.d_r {
                let ls = lrow[i];
                let inv_std = (-ls).exp();
                let d = (delta[i] - mrow[i]) * inv_std;
                lp += -ls - 0.5 * LOG_2PI - 0.5 * d * d;
            }
            out.push(lp);
        }
        Ok(out)
    }
}

/// Log-density of the observed transition `(s, z, s')` under the model,
/// with wraparound handled by the reduced-delta convention of the bound
/// environment.
pub fn dynamics_log_prob(
    model: &DynamicsModel,
    env: &dyn Environment,
    s: &State,
    z: &SkillVector,
    s_next: &State,
) -> Result<f64> {
    let reduced = env.reduce(s);
    let delta = reduced_delta(env, s, s_next);
    let mut input = Vec::with_capacity(model.d_r + model.d_z);
    input.extend_from_slice(&reduced);
    input.extend_from_slice(z.coords());
    let x = ArrayView2::from_shape((1, input.len()), &input)
        .map_err(|e| Error::Dim(e.to_string()))?;
    Ok(model.delta_log_prob_rows(x, &delta)?[0])
}

/// Frozen per-round context for intrinsic rewards: the current dynamics
/// model and this round's `L` prior samples, shared across the whole batch.
/// Rewards are memoized per transition content; the cache is sound because
/// the context is immutable for its lifetime.
pub struct RewardContext<'m> {
    model: &'m DynamicsModel,
    priors: Vec<SkillVector>,
    cache: RefCell<HashMap<Box<[u64]>, f64>>,
}

impl<'m> RewardContext<'m> {
    pub fn new(model: &'m DynamicsModel, priors: Vec<SkillVector>) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::Empty("reward context needs L >= 1 prior samples".into()));
        }
        if priors.iter().any(|p| p.dim() != model.d_z) {
            return Err(Error::Dim("prior skill dimension".into()));
        }
        Ok(Self { model, priors, cache: RefCell::new(HashMap::new()) })
    }

    pub fn l(&self) -> usize {
        self.priors.len()
    }

    pub fn priors(&self) -> &[SkillVector] {
        &self.priors
    }

    pub fn model(&self) -> &DynamicsModel {
        self.model
    }
}

/// The intrinsic reward `log q(s'|s,z) - logsumexp_i log q(s'|s,z_i) + log L`,
/// finite for all inputs.
pub fn intrinsic_reward(
    ctx: &RewardContext,
    env: &dyn Environment,
    s: &State,
    z: &SkillVector,
    s_next: &State,
) -> Result<f64> {
    let key: Box<[u64]> = s
        .coords()
        .iter()
        .chain(z.coords())
        .chain(s_next.coords())
        .map(|v| v.to_bits())
        .collect();
    if let Some(r) = ctx.cache.borrow().get(&key) {
        return Ok(*r);
    }

    let reduced = env.reduce(s);
    let delta = reduced_delta(env, s, s_next);
    let l = ctx.l();
    let d_in = ctx.model.d_r + ctx.model.d_z;
    let mut inputs = Array2::zeros((l + 1, d_in));
    for (mut row, zs) in inputs
        .rows_mut()
        .into_iter()
        .zip(std::iter::once(z).chain(ctx.priors.iter()))
    {
        for (dst, v) in row.iter_mut().zip(reduced.iter().chain(zs.coords())) {
            *dst = *v;
        }
    }
    let logq = ctx.model.delta_log_prob_rows(inputs.view(), &delta)?;
    let reward = reward_from_log_densities(logq[0], &logq[1..]);
    ctx.cache.borrow_mut().insert(key, reward);
    Ok(reward)
}

/// Combines the executing skill's log-density with the prior samples'
/// log-densities. Written so that a density constant across skills yields
/// exactly zero: `(logq_z - m) - ln(sum_i exp(logq_i - m)) + ln L` with `m`
/// the maximum over the prior samples.
pub fn reward_from_log_densities(logq_z: f64, logq_priors: &[f64]) -> f64 {
    let l = logq_priors.len();
    debug_assert!(l >= 1);
    let m = logq_priors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logq_priors.iter().map(|v| (v - m).exp()).sum();
    (logq_z - m) - sum.ln() + (l as f64).ln()
}

/// Clipped importance-sampling weight
/// `clip(exp(logp_current - logp_behavior), 1/alpha, alpha)`.
pub fn is_weight(logp_current: f64, logp_behavior: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 1.0) {
        return Err(Error::Config(format!("clip parameter alpha must be >= 1, got {alpha}")));
    }
    if !logp_current.is_finite() || !logp_behavior.is_finite() {
        return Err(Error::NonFinite(format!(
            "is_weight log-probabilities ({logp_current}, {logp_behavior})"
        )));
    }
    Ok((logp_current - logp_behavior).exp().clamp(1.0 / alpha, alpha))
}

/// One batch for a skill-dynamics update.
#[derive(Debug, Clone)]
pub struct DynamicsBatch {
    /// `(B, d_r + d_z)` rows of `(reduced state, z)`.
    pub inputs: Array2<f64>,
    /// `(B, d_r)` observed reduced deltas.
    pub deltas: Array2<f64>,
    /// Importance weights, one per row.
    pub weights: Vec<f64>,
}

impl DynamicsBatch {
    pub fn from_rows(env: &dyn Environment, rows: &[(State, SkillVector, State)]) -> Self {
        let d_r = env.spec().d_r;
        let d_z = rows.first().map(|r| r.1.dim()).unwrap_or(0);
        let mut inputs = Array2::zeros((rows.len(), d_r + d_z));
        let mut deltas = Array2::zeros((rows.len(), d_r));
        for (i, (s, z, s_next)) in rows.iter().enumerate() {
            let reduced = env.reduce(s);
            let delta = delta_between(env.spec(), &reduced, &env.reduce(s_next));
            for (j, v) in reduced.iter().chain(z.coords()).enumerate() {
                inputs[[i, j]] = *v;
            }
            for (j, v) in delta.iter().enumerate() {
                deltas[[i, j]] = *v;
            }
        }
        Self { inputs, deltas, weights: vec![1.0; rows.len()] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Statistics from one dynamics update step.
#[derive(Debug, Clone, Copy)]
pub struct DynamicsStats {
    /// The minimized objective: negative weighted mean log-likelihood.
    pub loss: f64,
    /// Unweighted mean log-likelihood of the batch before the step.
    pub mean_log_prob: f64,
}

/// One Adam step on the negative weighted mean log-likelihood
/// `-(1/B) sum_j w_j log q(delta_j | s_j, z_j)`.
pub fn dynamics_update(
    model: &mut DynamicsModel,
    batch: &DynamicsBatch,
    opt: &mut AdamState,
) -> Result<DynamicsStats> {
    if batch.is_empty() {
        return Err(Error::Empty("dynamics batch".into()));
    }
    let mut tape = Tape::new();
    let set = tape.add_params(&model.params);
    let (loss, logp) = dynamics_loss_graph(&mut tape, set, model.d_r, batch)?;
    let mean_log_prob = tape.value(logp).mean().unwrap_or(f64::NAN);
    let loss_value = tape.scalar(loss);
    let grads = tape.backward(loss, &[set])?;
    drop(tape);
    adam_step(opt, &mut model.params, &grads[0])?;
    Ok(DynamicsStats { loss: loss_value, mean_log_prob })
}

/// Builds the dynamics training loss on a tape: the negative weighted mean
/// log-likelihood of the observed deltas. Returns the loss node and the
/// per-row log-likelihood node.
pub fn dynamics_loss_graph(
    tape: &mut Tape<'_>,
    set: crate::nn::tape::ParamSet,
    d_r: usize,
    batch: &DynamicsBatch,
) -> Result<(crate::nn::tape::NodeId, crate::nn::tape::NodeId)> {
    let b = batch.len();
    let x = tape.constant(batch.inputs.clone());
    let delta = tape.constant(batch.deltas.clone());
    let w = tape.constant(
        Array2::from_shape_vec((b, 1), batch.weights.clone())
            .map_err(|e| Error::Dim(e.to_string()))?,
    );
    let out = tape.mlp(set, x);
    let mu = tape.slice_cols(out, 0, d_r);
    let log_std_raw = tape.slice_cols(out, d_r, d_r);
    let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);

    // per-dim log-density: -log_std - 0.5 log 2pi - 0.5 (delta - mu)^2 exp(-2 log_std)
    let diff = tape.sub(delta, mu);
    let sq = tape.square(diff);
    let neg2ls = tape.scale_shift(log_std, -2.0, 0.0);
    let inv_var = tape.exp(neg2ls);
    let quad = tape.mul(sq, inv_var);
    let quad_term = tape.scale_shift(quad, -0.5, 0.0);
    let ls_term = tape.scale_shift(log_std, -1.0, -0.5 * LOG_2PI);
    let per_dim = tape.add(ls_term, quad_term);
    let logp = tape.row_sum(per_dim);

    let weighted = tape.mul(w, logp);
    let mean_weighted = tape.mean(weighted);
    let loss = tape.scale_shift(mean_weighted, -1.0, 0.0);
    Ok((loss, logp))
}

/// The unbiased product-of-ratios trajectory weights: at step `t` the weight
/// is `prod_{i<=t} exp(logp_current_i - logp_behavior_i)`. Diagnostic only;
/// overflow is reported as `+inf`, never as an error.
pub fn unbiased_trajectory_weights(logp_current: &[f64], logp_behavior: &[f64]) -> Vec<f64> {
    debug_assert_eq!(logp_current.len(), logp_behavior.len());
    let mut cum = 0.0;
    logp_current
        .iter()
        .zip(logp_behavior)
        .map(|(cur, beh)| {
            cum += cur - beh;
            cum.exp()
        })
        .collect()
}
