//! Planar point robot in a square arena.
//!
//! State is `(x, y, prev_a1, prev_a2)`: position plus the last action
//! executed. Actions displace the position by `step_size` per unit action,
//! clipped to the arena. The reduced observation is the position `(x, y)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clip_action, EnvSpec, Environment, State, StepResult};

#[derive(Debug, Clone)]
pub struct PointMass2D {
    spec: EnvSpec,
    arena_half: f64,
    reset_half: f64,
    step_size: f64,
}

impl PointMass2D {
    pub fn new(horizon: usize, arena_half: f64, reset_half: f64, step_size: f64) -> Self {
        assert!(horizon >= 1);
        assert!(arena_half > 0.0 && reset_half >= 0.0 && step_size > 0.0);
        Self {
            spec: EnvSpec {
                name: "point_mass",
                d_s: 4,
                d_a: 2,
                d_r: 2,
                horizon,
                wrap: vec![false, false],
            },
            arena_half,
            reset_half,
            step_size,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn arena_half(&self) -> f64 {
        self.arena_half
    }
}

impl Environment for PointMass2D {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        let h = self.reset_half;
        let x = if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        let y = if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        State(vec![x, y, 0.0, 0.0])
    }

    fn step(&self, state: &State, action: &[f64], step_index: usize) -> StepResult {
        assert_eq!(action.len(), 2, "point mass takes 2-d actions");
        let a = clip_action(action);
        let half = self.arena_half;
        let x = (state.0[0] + self.step_size * a[0]).clamp(-half, half);
        let y = (state.0[1] + self.step_size * a[1]).clamp(-half, half);
        let next_state = State(vec![x, y, a[0], a[1]]);
        let step_index = step_index + 1;
        let done = step_index >= self.spec.horizon || self.premature(&next_state);
        StepResult { next_state, done, step_index }
    }

    fn reduce(&self, state: &State) -> Vec<f64> {
        vec![state.0[0], state.0[1]]
    }
}
