//! Model-predictive control in skill space.
//!
//! Candidate skill sequences are rolled through the skill-dynamics model's
//! mean predictions over the reduced state, scored against a goal, and the
//! best first skill is executed through the policy before replanning.
//! Random shooting with an optional elite-refinement pass; rollouts use the
//! predicted mean only.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dads::{sample_prior, DynamicsModel, SkillVector};
use crate::env::{advance_reduced, reduced_distance, EnvSpec, Environment, State};
use crate::sac::Actor;
use crate::{Error, Result};

/// Planner knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    /// Candidate sequences per shooting pass.
    pub candidates: usize,
    /// Skills per plan.
    pub plan_horizon: usize,
    /// Environment steps each skill is held for.
    pub skill_hold: usize,
    /// Refinement passes re-sampling around the elite mean (0 = pure random
    /// shooting).
    pub refine_iters: usize,
    /// Success radius around the goal.
    pub goal_radius: f64,
    /// Fraction of candidates treated as elite when refining.
    pub elite_frac: f64,
    /// Weight of the mean per-step distance in the cost.
    pub progress_weight: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            candidates: 64,
            plan_horizon: 4,
            skill_hold: 5,
            refine_iters: 1,
            goal_radius: 0.2,
            elite_frac: 0.25,
            progress_weight: 0.1,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 1 || self.plan_horizon < 1 || self.skill_hold < 1 {
            return Err(Error::Config(
                "plan candidates, horizon, and skill hold must all be >= 1".into(),
            ));
        }
        if !(self.goal_radius > 0.0) {
            return Err(Error::Config("goal radius must be positive".into()));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(Error::Config("elite fraction must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// Target point in reduced-state space, compared with the environment's
/// reduced metric (angular on wraparound coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct Goal(pub Vec<f64>);

/// Rolls one skill sequence through the model's mean predictions, holding
/// each skill for `hold` steps. Returns all intermediate points including
/// the start.
pub fn rollout_skills(
    model: &DynamicsModel,
    spec: &EnvSpec,
    start: &[f64],
    skills: &[SkillVector],
    hold: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut point = start.to_vec();
    let mut out = Vec::with_capacity(skills.len() * hold + 1);
    out.push(point.clone());
    for z in skills {
        for _ in 0..hold {
            let dist = model.predict(&point, z.coords())?;
            if dist.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("model prediction during rollout".into()));
            }
            point = advance_reduced(spec, &point, &dist.mean);
            out.push(point.clone());
        }
    }
    Ok(out)
}

/// One candidate sequence with its evaluated cost.
#[derive(Debug, Clone)]
pub struct Plan {
    pub skills: Vec<SkillVector>,
    pub cost: f64,
    /// Index of the winning candidate in evaluation order.
    pub candidate_index: usize,
}

/// Scores a set of candidate sequences and returns the argmin, ties broken
/// by lowest candidate index. All candidates are rolled out in one batch.
pub fn evaluate_candidates(
    model: &DynamicsModel,
    spec: &EnvSpec,
    start: &[f64],
    goal: &Goal,
    cfg: &PlanConfig,
    candidates: &[Vec<SkillVector>],
) -> Result<(usize, Vec<f64>)> {
    let k = candidates.len();
    if k == 0 {
        return Err(Error::Empty("no plan candidates".into()));
    }
    let d_r = spec.d_r;
    let d_z = model.d_z;
    let steps = cfg.plan_horizon * cfg.skill_hold;

    let mut points = Array2::zeros((k, d_r));
    for mut row in points.rows_mut() {
        for (dst, v) in row.iter_mut().zip(start) {
            *dst = *v;
        }
    }
    let mut dist_sums = vec![0.0; k];
    let mut inputs = Array2::zeros((k, d_r + d_z));
    for step in 0..steps {
        let hold_idx = step / cfg.skill_hold;
        for c in 0..k {
            let z = &candidates[c][hold_idx];
            for j in 0..d_r {
                inputs[[c, j]] = points[[c, j]];
            }
            for (j, v) in z.coords().iter().enumerate() {
                inputs[[c, d_r + j]] = *v;
            }
        }
        let (mu, _) = model.heads(inputs.view())?;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("model prediction at plan step {step}")));
        }
        for c in 0..k {
            let row: Vec<f64> = points.row(c).to_vec();
            let next = advance_reduced(spec, &row, mu.row(c).as_slice().unwrap());
            for j in 0..d_r {
                points[[c, j]] = next[j];
            }
            dist_sums[c] += reduced_distance(spec, &next, &goal.0);
        }
    }

    let costs: Vec<f64> = (0..k)
        .map(|c| {
            let terminal = reduced_distance(spec, &points.row(c).to_vec(), &goal.0);
            terminal + cfg.progress_weight * dist_sums[c] / steps as f64
        })
        .collect();
    let mut best = 0;
    for (i, cost) in costs.iter().enumerate() {
        if *cost < costs[best] {
            best = i;
        }
    }
    Ok((best, costs))
}

/// Samples `K` skill sequences from the prior, optionally refines around the
/// elites, and returns the best sequence found with its predicted cost.
pub fn plan(
    model: &DynamicsModel,
    spec: &EnvSpec,
    start: &[f64],
    goal: &Goal,
    cfg: &PlanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Plan> {
    cfg.validate()?;
    let d_z = model.d_z;
    let sample_batch = |rng: &mut ChaCha8Rng| -> Vec<Vec<SkillVector>> {
        (0..cfg.candidates)
            .map(|_| (0..cfg.plan_horizon).map(|_| sample_prior(rng, d_z)).collect())
            .collect()
    };

    let mut evaluated: Vec<Vec<SkillVector>> = sample_batch(rng);
    let (mut best, mut costs) = evaluate_candidates(model, spec, start, goal, cfg, &evaluated)?;
    let mut best_cost = costs[best];

    for _ in 0..cfg.refine_iters {
        // Fit a Gaussian to the elite set per (plan position, skill dim).
        let n_elite = ((cfg.candidates as f64 * cfg.elite_frac).ceil() as usize).max(1);
        let mut order: Vec<usize> = (0..evaluated.len()).collect();
        order.sort_by(|a, b| costs[*a].partial_cmp(&costs[*b]).unwrap().then(a.cmp(b)));
        let elites = &order[..n_elite.min(order.len())];

        let dims = cfg.plan_horizon * d_z;
        let mut mean = vec![0.0; dims];
        let mut var = vec![0.0; dims];
        for &e in elites {
            for h in 0..cfg.plan_horizon {
                for j in 0..d_z {
                    mean[h * d_z + j] += evaluated[e][h].coords()[j];
                }
            }
        }
        for m in &mut mean {
            *m /= elites.len() as f64;
        }
        for &e in elites {
            for h in 0..cfg.plan_horizon {
                for j in 0..d_z {
                    let d = evaluated[e][h].coords()[j] - mean[h * d_z + j];
                    var[h * d_z + j] += d * d;
                }
            }
        }
        let refined: Vec<Vec<SkillVector>> = (0..cfg.candidates)
            .map(|_| {
                (0..cfg.plan_horizon)
                    .map(|h| {
                        let coords = (0..d_z)
                            .map(|j| {
                                let idx = h * d_z + j;
                                let std = (var[idx] / elites.len() as f64).sqrt().max(1e-3);
                                let eps: f64 = rng.sample(StandardNormal);
                                (mean[idx] + std * eps).clamp(-1.0, 1.0)
                            })
                            .collect();
                        SkillVector(coords)
                    })
                    .collect()
            })
            .collect();
        let (rb, rcosts) = evaluate_candidates(model, spec, start, goal, cfg, &refined)?;
        if rcosts[rb] < best_cost {
            best_cost = rcosts[rb];
            best = evaluated.len() + rb;
        }
        evaluated.extend(refined);
        costs.extend(rcosts);
    }

    Ok(Plan { skills: evaluated[best].clone(), cost: best_cost, candidate_index: best })
}

/// One row of an executed trajectory record.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub reduced: Vec<f64>,
    pub skill: Option<SkillVector>,
    pub distance: f64,
}

/// Result of a closed-loop execution.
#[derive(Debug, Clone)]
pub struct ExecutionResult {
    pub trajectory: Vec<TrajectoryPoint>,
    pub success: bool,
    pub steps: usize,
    pub failure_reason: Option<String>,
}

enum SkillSource<'a> {
    Planner(&'a DynamicsModel),
    RandomPrior,
}

fn execute_loop(
    env: &dyn Environment,
    actor: &Actor,
    source: SkillSource,
    goal: &Goal,
    cfg: &PlanConfig,
    rng: &mut ChaCha8Rng,
    step_budget: usize,
    start: State,
) -> Result<ExecutionResult> {
    cfg.validate()?;
    let spec = env.spec().clone();
    let mut state = start;
    let mut steps = 0usize;
    let mut trajectory = Vec::new();

    let mut reduced = env.reduce(&state);
    let mut dist = reduced_distance(&spec, &reduced, &goal.0);
    trajectory.push(TrajectoryPoint {
        step: 0,
        reduced: reduced.clone(),
        skill: None,
        distance: dist,
    });
    if dist <= cfg.goal_radius {
        return Ok(ExecutionResult { trajectory, success: true, steps: 0, failure_reason: None });
    }

    while steps < step_budget {
        let skill = match &source {
            SkillSource::Planner(model) => {
                plan(model, &spec, &reduced, goal, cfg, rng)?.skills[0].clone()
            }
            SkillSource::RandomPrior => sample_prior(rng, actor.d_z),
        };
        for _ in 0..cfg.skill_hold {
            if steps >= step_budget {
                break;
            }
            let action = actor.mean_action(state.coords(), skill.coords())?;
            let result = env.step(&state, &action, steps);
            state = result.next_state;
            steps += 1;
            reduced = env.reduce(&state);
            dist = reduced_distance(&spec, &reduced, &goal.0);
            trajectory.push(TrajectoryPoint {
                step: steps,
                reduced: reduced.clone(),
                skill: Some(skill.clone()),
                distance: dist,
            });
            if dist <= cfg.goal_radius {
                return Ok(ExecutionResult {
                    trajectory,
                    success: true,
                    steps,
                    failure_reason: None,
                });
            }
        }
    }
    Ok(ExecutionResult {
        trajectory,
        success: false,
        steps,
        failure_reason: Some("step budget exhausted".into()),
    })
}

/// Closed-loop goal reaching: plan from the current reduced state, execute
/// the first planned skill for `skill_hold` environment steps through the
/// policy, replan. Stops with success inside the goal radius, or with
/// failure once the step budget is spent.
#[allow(clippy::too_many_arguments)]
pub fn mpc_execute(
    env: &dyn Environment,
    actor: &Actor,
    model: &DynamicsModel,
    goal: &Goal,
    cfg: &PlanConfig,
    rng: &mut ChaCha8Rng,
    step_budget: usize,
    start: State,
) -> Result<ExecutionResult> {
    execute_loop(env, actor, SkillSource::Planner(model), goal, cfg, rng, step_budget, start)
}

/// Baseline for paired comparisons: the same execution loop with each
/// replanning slot filled by a skill drawn from the prior instead of the
/// planner's choice.
pub fn random_skill_execute(
    env: &dyn Environment,
    actor: &Actor,
    goal: &Goal,
    cfg: &PlanConfig,
    rng: &mut ChaCha8Rng,
    step_budget: usize,
    start: State,
) -> Result<ExecutionResult> {
    execute_loop(env, actor, SkillSource::RandomPrior, goal, cfg, rng, step_budget, start)
}
