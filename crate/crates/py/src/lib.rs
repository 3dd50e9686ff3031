//! Python bindings for the skill-discovery stack: environments, the skill
//! prior, checkpoint inspection (policy, skill dynamics, intrinsic rewards),
//! skill-space planning, and full training runs.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mi_skills::analysis::eval_skills;
use mi_skills::checkpoint::Checkpoint as CoreCheckpoint;
use mi_skills::config::ExperimentConfig;
use mi_skills::dads::{
    dynamics_log_prob, intrinsic_reward, is_weight, sample_prior, RewardContext, SkillVector,
};
use mi_skills::env::{make_env, EnvPhysics, Environment, State};
use mi_skills::orchestrator::{make_rng, prepare_run_dir, run, STREAM_EVAL, STREAM_PLAN};
use mi_skills::planner::{mpc_execute, plan, Goal, PlanConfig};

fn to_py_err(e: mi_skills::Error) -> PyErr {
    match e {
        mi_skills::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Episodic environment with explicit state passing.
#[pyclass(name = "Env")]
struct PyEnv {
    inner: Box<dyn Environment>,
}

#[pymethods]
impl PyEnv {
    /// Build an environment by name ("point_mass" or "valve").
    #[new]
    #[pyo3(signature = (name, horizon = 50))]
    fn new(name: &str, horizon: usize) -> PyResult<Self> {
        let physics = EnvPhysics { horizon, ..EnvPhysics::default() };
        Ok(Self { inner: make_env(name, &physics).map_err(to_py_err)? })
    }

    /// Draw an initial state.
    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner.reset(&mut rng).0
    }

    /// Apply one action; returns `(next_state, done, step_index)`.
    fn step(&self, state: Vec<f64>, action: Vec<f64>, step_index: usize) -> (Vec<f64>, bool, usize) {
        let r = self.inner.step(&State(state), &action, step_index);
        (r.next_state.0, r.done, r.step_index)
    }

    /// Task-relevant projection of a state.
    fn reduce(&self, state: Vec<f64>) -> Vec<f64> {
        self.inner.reduce(&State(state))
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.spec().d_s
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.spec().d_a
    }

    #[getter]
    fn reduced_dim(&self) -> usize {
        self.inner.spec().d_r
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.spec().horizon
    }
}

/// A trained checkpoint: policy, twin critics, skill dynamics, counters.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::load(&path).map_err(to_py_err)? })
    }

    #[getter]
    fn env_name(&self) -> String {
        self.inner.meta.env_name.clone()
    }

    #[getter]
    fn skill_dim(&self) -> usize {
        self.inner.meta.d_z
    }

    #[getter]
    fn total_samples(&self) -> u64 {
        self.inner.counters.total_samples
    }

    #[getter]
    fn rounds(&self) -> u64 {
        self.inner.counters.rounds
    }

    /// Policy action at `(state, skill)`: the squashed mean, or a sample.
    #[pyo3(signature = (state, skill, deterministic = true, seed = 0))]
    fn act(
        &self,
        state: Vec<f64>,
        skill: Vec<f64>,
        deterministic: bool,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        if deterministic {
            self.inner.actor.mean_action(&state, &skill).map_err(to_py_err)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(self.inner.actor.sample(&state, &skill, &mut rng).map_err(to_py_err)?.0)
        }
    }

    /// Log-density of an action under the policy.
    fn action_log_prob(&self, state: Vec<f64>, skill: Vec<f64>, action: Vec<f64>) -> PyResult<f64> {
        self.inner.actor.log_prob(&state, &skill, &action).map_err(to_py_err)
    }

    /// Predicted reduced-state delta distribution `(mean, std)`.
    fn dynamics_predict(&self, reduced: Vec<f64>, skill: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let d = self.inner.dynamics.predict(&reduced, &skill).map_err(to_py_err)?;
        Ok((d.mean, d.std))
    }

    /// Log-density of an observed transition under the skill dynamics.
    fn dynamics_log_prob(
        &self,
        state: Vec<f64>,
        skill: Vec<f64>,
        next_state: Vec<f64>,
    ) -> PyResult<f64> {
        let env = self.inner.meta.build_env().map_err(to_py_err)?;
        let z = SkillVector::new(skill).map_err(to_py_err)?;
        dynamics_log_prob(&self.inner.dynamics, env.as_ref(), &State(state), &z, &State(next_state))
            .map_err(to_py_err)
    }

    /// Intrinsic reward of a transition against `l` fresh prior samples.
    #[pyo3(signature = (state, skill, next_state, l = 100, seed = 0))]
    fn intrinsic_reward(
        &self,
        state: Vec<f64>,
        skill: Vec<f64>,
        next_state: Vec<f64>,
        l: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let env = self.inner.meta.build_env().map_err(to_py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let priors = (0..l).map(|_| sample_prior(&mut rng, self.inner.meta.d_z)).collect();
        let ctx = RewardContext::new(&self.inner.dynamics, priors).map_err(to_py_err)?;
        let z = SkillVector::new(skill).map_err(to_py_err)?;
        intrinsic_reward(&ctx, env.as_ref(), &State(state), &z, &State(next_state))
            .map_err(to_py_err)
    }

    /// Plan a skill sequence toward a goal; returns `(skills, cost)`.
    #[pyo3(signature = (start_reduced, goal, k = 64, hp = 4, hz = 5, seed = 0))]
    fn plan(
        &self,
        start_reduced: Vec<f64>,
        goal: Vec<f64>,
        k: usize,
        hp: usize,
        hz: usize,
        seed: u64,
    ) -> PyResult<(Vec<Vec<f64>>, f64)> {
        let env = self.inner.meta.build_env().map_err(to_py_err)?;
        let cfg = PlanConfig {
            candidates: k,
            plan_horizon: hp,
            skill_hold: hz,
            ..PlanConfig::default()
        };
        let mut rng = make_rng(seed, STREAM_PLAN);
        let p = plan(&self.inner.dynamics, env.spec(), &start_reduced, &Goal(goal), &cfg, &mut rng)
            .map_err(to_py_err)?;
        Ok((p.skills.into_iter().map(|z| z.0).collect(), p.cost))
    }

    /// Closed-loop goal reaching; returns a dict with success, steps, and
    /// the final distance.
    #[pyo3(signature = (goal, budget = 200, seed = 0))]
    fn mpc<'py>(&self, py: Python<'py>, goal: Vec<f64>, budget: usize, seed: u64) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let env = self.inner.meta.build_env().map_err(to_py_err)?;
        let cfg = PlanConfig::default();
        let mut rng = make_rng(seed, STREAM_PLAN);
        let start = env.reset(&mut rng);
        let result = mpc_execute(
            env.as_ref(),
            &self.inner.actor,
            &self.inner.dynamics,
            &Goal(goal),
            &cfg,
            &mut rng,
            budget,
            start,
        )
        .map_err(to_py_err)?;
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("success", result.success)?;
        dict.set_item("steps", result.steps)?;
        dict.set_item(
            "final_distance",
            result.trajectory.last().map(|p| p.distance).unwrap_or(f64::NAN),
        )?;
        Ok(dict)
    }

    /// Displacement statistics of prior-sampled skills under the
    /// deterministic policy: a list of `(skill, displacement, magnitude)`.
    #[pyo3(signature = (count = 8, horizon = 50))]
    fn eval_skills(&self, count: usize, horizon: usize) -> PyResult<Vec<(Vec<f64>, Vec<f64>, f64)>> {
        let env = self.inner.meta.build_env().map_err(to_py_err)?;
        let mut rng = make_rng(self.inner.rng.master_seed, STREAM_EVAL);
        let report =
            eval_skills(env.as_ref(), &self.inner.actor, count, horizon, &mut rng).map_err(to_py_err)?;
        Ok(report.rows.into_iter().map(|r| (r.z.0, r.displacement, r.magnitude)).collect())
    }
}

/// Draw a skill from the uniform prior over `[-1, 1]^d`.
#[pyfunction]
#[pyo3(name = "sample_prior", signature = (d_z, seed = 0))]
fn py_sample_prior(d_z: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prior(&mut rng, d_z).0
}

/// Clipped importance weight `clip(exp(logp - logp_c), 1/alpha, alpha)`.
#[pyfunction]
#[pyo3(name = "is_weight")]
fn py_is_weight(logp_current: f64, logp_behavior: f64, alpha: f64) -> PyResult<f64> {
    is_weight(logp_current, logp_behavior, alpha).map_err(to_py_err)
}

/// Run training from a config document (text, not a path); returns the run
/// directory. Blocks until the sample budget is exhausted.
#[pyfunction]
#[pyo3(name = "train")]
fn py_train(config_text: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::parse(config_text).map_err(to_py_err)?;
    let run_dir = prepare_run_dir(&cfg).map_err(to_py_err)?;
    let summary = run(&cfg, &run_dir).map_err(to_py_err)?;
    Ok(summary.run_dir.display().to_string())
}

/// Load a run's final checkpoint.
#[pyfunction]
#[pyo3(name = "load_final_checkpoint")]
fn py_load_final_checkpoint(run_dir: &str) -> PyResult<PyCheckpoint> {
    let path = Path::new(run_dir).join("ckpt_final.bin");
    Ok(PyCheckpoint { inner: CoreCheckpoint::load(&path).map_err(to_py_err)? })
}

#[pymodule]
fn mi_skills_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(py_sample_prior, m)?)?;
    m.add_function(wrap_pyfunction!(py_is_weight, m)?)?;
    m.add_function(wrap_pyfunction!(py_train, m)?)?;
    m.add_function(wrap_pyfunction!(py_load_final_checkpoint, m)?)?;
    Ok(())
}
