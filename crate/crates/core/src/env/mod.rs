//! Episodic environment abstraction and the two desk-scale environments: a
//! planar point robot and a one-dimensional rotating valve.
//!
//! Environments are deterministic given actions; all stochasticity lives in
//! `reset` and the policy. States are flat `f64` vectors. The task-relevant
//! projection used by skill dynamics is `reduce`; next-state deltas over the
//! reduced space respect wraparound coordinates.

mod point_mass;
mod tabular;
mod valve;

pub use point_mass::PointMass2D;
pub use tabular::{random_mdp, random_policy, RewardTable, TabularMdp};
pub use valve::Valve1D;

use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Static description of an environment: dimensions, horizon, and which
/// reduced coordinates are angles maintained in (-pi, pi].
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    /// Full state dimension.
    pub d_s: usize,
    /// Action dimension; actions live in [-1, 1]^{d_a}.
    pub d_a: usize,
    /// Reduced (task-relevant) dimension.
    pub d_r: usize,
    /// Episode horizon in steps.
    pub horizon: usize,
    /// Per reduced coordinate: true when the coordinate wraps around.
    pub wrap: Vec<bool>,
}

/// One environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct State(pub Vec<f64>);

impl State {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

/// Result of taking one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    /// True when the episode is over: the horizon was reached or a
    /// premature-termination predicate fired.
    pub done: bool,
    /// Index of the state just produced (1-based: after the first step of an
    /// episode this is 1).
    pub step_index: usize,
}

/// Episodic environment. Instances are single-owner; run one per collector.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Draws an initial state.
    fn reset(&self, rng: &mut ChaCha8Rng) -> State;

    /// Pure transition: applies `action` to `state`, where `step_index` is
    /// the 0-based index of the step being taken. Actions outside [-1, 1]
    /// are clipped with a logged warning.
    fn step(&self, state: &State, action: &[f64], step_index: usize) -> StepResult;

    /// Premature-termination predicate; false by default.
    fn premature(&self, _state: &State) -> bool {
        false
    }

    /// Task-relevant projection of the state (length `d_r`).
    fn reduce(&self, state: &State) -> Vec<f64>;
}

/// Maps any real angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    let r = (PI - x).rem_euclid(2.0 * PI);
    PI - r
}

/// Elementwise difference `reduce(s') - reduce(s)`, using the signed minimal
/// angular difference on wraparound coordinates.
pub fn reduced_delta(env: &dyn Environment, s: &State, s_next: &State) -> Vec<f64> {
    let a = env.reduce(s);
    let b = env.reduce(s_next);
    delta_between(env.spec(), &a, &b)
}

/// Delta between two already-reduced points.
pub fn delta_between(spec: &EnvSpec, from: &[f64], to: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to)
        .zip(&spec.wrap)
        .map(|((a, b), w)| if *w { wrap_angle(b - a) } else { b - a })
        .collect()
}

/// Advances a reduced point by a delta, re-wrapping angle coordinates.
pub fn advance_reduced(spec: &EnvSpec, point: &[f64], delta: &[f64]) -> Vec<f64> {
    point
        .iter()
        .zip(delta)
        .zip(&spec.wrap)
        .map(|((p, d), w)| if *w { wrap_angle(p + d) } else { p + d })
        .collect()
}

/// Distance between reduced points: Euclidean, with the minimal angular
/// difference on wraparound coordinates.
pub fn reduced_distance(spec: &EnvSpec, a: &[f64], b: &[f64]) -> f64 {
    delta_between(spec, a, b).iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Clips an action into [-1, 1]^d, warning once per call if any coordinate
/// was out of bounds.
pub(crate) fn clip_action(action: &[f64]) -> Vec<f64> {
    if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
        log::warn!("action out of bounds, clipping: {action:?}");
    }
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

/// Environment selection by config name.
pub fn make_env(name: &str, cfg: &EnvPhysics) -> Result<Box<dyn Environment>> {
    match name {
        "point_mass" => Ok(Box::new(PointMass2D::new(
            cfg.horizon,
            cfg.pm_arena_half,
            cfg.pm_reset_half,
            cfg.pm_step_size,
        ))),
        "valve" => Ok(Box::new(Valve1D::new(cfg.horizon, cfg.valve_step_size))),
        other => Err(Error::Config(format!("unknown env `{other}`"))),
    }
}

/// Physical constants configurable per environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvPhysics {
    pub horizon: usize,
    /// Half-width of the square arena.
    pub pm_arena_half: f64,
    /// Half-width of the centered reset box.
    pub pm_reset_half: f64,
    /// Displacement per unit action per step (dt * v_max).
    pub pm_step_size: f64,
    /// Radians per unit action per step (dt * omega_max).
    pub valve_step_size: f64,
}

impl Default for EnvPhysics {
    fn default() -> Self {
        Self {
            horizon: 50,
            pm_arena_half: 2.0,
            pm_reset_half: 0.1,
            pm_step_size: 0.05,
            valve_step_size: 0.1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    #[test]
    fn wrap_maps_boundaries_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(PI + 0.2) - (-PI + 0.2)).abs() < 1e-12);
        assert!((wrap_angle(-PI - 0.2) - (PI - 0.2)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    proptest! {
        #[test]
        fn wrap_is_a_normalizer(x in -50.0f64..50.0) {
            let w = wrap_angle(x);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
            // congruent mod 2 pi
            let k = (x - w) / (2.0 * PI);
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_uses_minimal_angle() {
        let spec = EnvSpec {
            name: "t",
            d_s: 1,
            d_a: 1,
            d_r: 1,
            horizon: 5,
            wrap: vec![true],
        };
        let d = delta_between(&spec, &[PI - 0.1], &[-PI + 0.1]);
        assert!((d[0] - 0.2).abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn reduced_round_trip_recovers_target() {
        let spec = EnvSpec {
            name: "t",
            d_s: 2,
            d_a: 1,
            d_r: 2,
            horizon: 5,
            wrap: vec![true, false],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        for _ in 0..200 {
            let a = vec![wrap_angle(rng.random_range(-9.0..9.0)), rng.random_range(-3.0..3.0)];
            let b = vec![wrap_angle(rng.random_range(-9.0..9.0)), rng.random_range(-3.0..3.0)];
            let d = delta_between(&spec, &a, &b);
            let back = advance_reduced(&spec, &a, &d);
            assert!((wrap_angle(back[0] - b[0])).abs() < 1e-12);
            assert!((back[1] - b[1]).abs() < 1e-12);
        }
    }
}
