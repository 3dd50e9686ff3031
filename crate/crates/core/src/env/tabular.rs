//! Small enumerable MDP for oracle-style verification.
//!
//! Supports exhaustive trajectory enumeration at short horizons and the
//! discounted state-visitation computation, so that the equivalence between
//! trajectory-wise discounted returns and visitation-weighted expected
//! rewards can be checked exactly. Also provides exact policy evaluation by
//! linear solve and value iteration for regression targets.

use crate::{Error, Result};

/// Tabular MDP with dense transition probabilities `p(s' | s, a)`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Initial state distribution.
    p0: Vec<f64>,
    /// Episode horizon for enumeration.
    pub horizon: usize,
}

impl TabularMdp {
    pub const MAX_STATES: usize = 5;
    pub const MAX_ACTIONS: usize = 3;

    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        p0: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_states > Self::MAX_STATES {
            return Err(Error::Config(format!(
                "tabular mdp supports 1..={} states, got {n_states}",
                Self::MAX_STATES
            )));
        }
        if n_actions == 0 || n_actions > Self::MAX_ACTIONS {
            return Err(Error::Config(format!(
                "tabular mdp supports 1..={} actions, got {n_actions}",
                Self::MAX_ACTIONS
            )));
        }
        if horizon == 0 || horizon > 6 {
            return Err(Error::Config("tabular mdp horizon must be in 1..=6".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Dim("transition table size".into()));
        }
        if p0.len() != n_states {
            return Err(Error::Dim("initial distribution size".into()));
        }
        let mdp = Self { n_states, n_actions, transition, p0, horizon };
        for s in 0..n_states {
            for a in 0..n_actions {
                let row: f64 = (0..n_states).map(|s2| mdp.prob(s, a, s2)).sum();
                if (row - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "transition row (s={s}, a={a}) sums to {row}, not 1"
                    )));
                }
            }
        }
        if ((mdp.p0.iter().sum::<f64>()) - 1.0).abs() > 1e-12 {
            return Err(Error::Config("initial distribution does not sum to 1".into()));
        }
        Ok(mdp)
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn initial(&self, s: usize) -> f64 {
        self.p0[s]
    }

    /// Number of positive-probability trajectories under a policy
    /// (`policy[s][a]`, row-stochastic).
    pub fn count_trajectories(&self, policy: &[f64]) -> u64 {
        let mut count = 0;
        for s0 in 0..self.n_states {
            if self.p0[s0] > 0.0 {
                count += self.count_from(policy, s0, 0);
            }
        }
        count
    }

    fn count_from(&self, policy: &[f64], s: usize, t: usize) -> u64 {
        if t == self.horizon {
            return 1;
        }
        let mut count = 0;
        for a in 0..self.n_actions {
            if policy[s * self.n_actions + a] <= 0.0 {
                continue;
            }
            for s2 in 0..self.n_states {
                if self.prob(s, a, s2) > 0.0 {
                    count += self.count_from(policy, s2, t + 1);
                }
            }
        }
        count
    }

    /// Expected discounted return by exhaustive enumeration over all
    /// trajectories of length `horizon`: `E[sum_t gamma^t r(s_t, a_t,
    /// s_{t+1})]` under `policy` and the initial distribution.
    pub fn return_by_enumeration(&self, policy: &[f64], reward: &RewardTable, gamma: f64) -> f64 {
        let mut total = 0.0;
        for s0 in 0..self.n_states {
            if self.p0[s0] > 0.0 {
                total += self.p0[s0] * self.enumerate_from(policy, reward, gamma, s0, 0);
            }
        }
        total
    }

    fn enumerate_from(
        &self,
        policy: &[f64],
        reward: &RewardTable,
        gamma: f64,
        s: usize,
        t: usize,
    ) -> f64 {
        if t == self.horizon {
            return 0.0;
        }
        let mut acc = 0.0;
        for a in 0..self.n_actions {
            let pa = policy[s * self.n_actions + a];
            if pa <= 0.0 {
                continue;
            }
            for s2 in 0..self.n_states {
                let p = self.prob(s, a, s2);
                if p <= 0.0 {
                    continue;
                }
                let tail = self.enumerate_from(policy, reward, gamma, s2, t + 1);
                acc += pa * p * (reward.get(s, a, s2) + gamma * tail);
            }
        }
        acc
    }

    /// The same return computed through the discounted visitation weights:
    /// `sum_{t<T} gamma^t sum_s p(s_t = s) E_{a,s'}[r(s, a, s')]`.
    pub fn return_by_visitation(&self, policy: &[f64], reward: &RewardTable, gamma: f64) -> f64 {
        let mut dist = self.p0.clone();
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in 0..self.horizon {
            for s in 0..self.n_states {
                if dist[s] == 0.0 {
                    continue;
                }
                let mut expected = 0.0;
                for a in 0..self.n_actions {
                    let pa = policy[s * self.n_actions + a];
                    for s2 in 0..self.n_states {
                        expected += pa * self.prob(s, a, s2) * reward.get(s, a, s2);
                    }
                }
                total += discount * dist[s] * expected;
            }
            let mut next = vec![0.0; self.n_states];
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let w = dist[s] * policy[s * self.n_actions + a];
                    if w == 0.0 {
                        continue;
                    }
                    for s2 in 0..self.n_states {
                        next[s2] += w * self.prob(s, a, s2);
                    }
                }
            }
            dist = next;
            discount *= gamma;
        }
        total
    }

    /// Exact infinite-horizon `Q^pi` by dense linear solve of
    /// `Q = r_bar + gamma P Pi Q`.
    pub fn exact_q(&self, policy: &[f64], reward: &RewardTable, gamma: f64) -> Vec<f64> {
        let n = self.n_states * self.n_actions;
        // Build A = I - gamma * P Pi and b = expected immediate reward.
        let mut a_mat = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = s * self.n_actions + a;
                a_mat[row * n + row] += 1.0;
                for s2 in 0..self.n_states {
                    let p = self.prob(s, a, s2);
                    b[row] += p * reward.get(s, a, s2);
                    for a2 in 0..self.n_actions {
                        let col = s2 * self.n_actions + a2;
                        a_mat[row * n + col] -= gamma * p * policy[s2 * self.n_actions + a2];
                    }
                }
            }
        }
        solve_dense(&mut a_mat, &mut b, n);
        b
    }

    /// Value iteration to a fixed point (infinite-horizon, greedy).
    pub fn value_iteration(&self, reward: &RewardTable, gamma: f64, sweeps: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        for _ in 0..sweeps {
            let mut next = vec![f64::NEG_INFINITY; self.n_states];
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let mut q = 0.0;
                    for s2 in 0..self.n_states {
                        q += self.prob(s, a, s2) * (reward.get(s, a, s2) + gamma * v[s2]);
                    }
                    next[s] = next[s].max(q);
                }
            }
            v = next;
        }
        v
    }
}

/// Dense reward table `r(s, a, s')`.
#[derive(Debug, Clone)]
pub struct RewardTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions * n_states {
            return Err(Error::Dim("reward table size".into()));
        }
        Ok(Self { n_states, n_actions, values })
    }

    /// Reward depending only on the current state.
    pub fn from_state_values(n_states: usize, n_actions: usize, per_state: &[f64]) -> Self {
        let mut values = vec![0.0; n_states * n_actions * n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                for s2 in 0..n_states {
                    values[(s * n_actions + a) * n_states + s2] = per_state[s];
                }
            }
        }
        Self { n_states, n_actions, values }
    }

    pub fn get(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.values[(s * self.n_actions + a) * self.n_states + s2]
    }
}

/// Gaussian elimination with partial pivoting; solves in place, result in `b`.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        assert!(diag.abs() > 1e-12, "singular system");
        for row in col + 1..n {
            let f = a[row * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
}

/// Uniformly random dense MDP for property checks.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    rng: &mut impl rand::Rng,
) -> TabularMdp {
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut row: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            // Compensate drift so rows sum to exactly 1.
            let drift: f64 = row.iter().sum::<f64>() - 1.0;
            row[0] -= drift;
            for (s2, v) in row.iter().enumerate() {
                transition[(s * n_actions + a) * n_states + s2] = *v;
            }
        }
    }
    let mut p0: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = p0.iter().sum();
    for v in &mut p0 {
        *v /= sum;
    }
    let drift: f64 = p0.iter().sum::<f64>() - 1.0;
    p0[0] -= drift;
    TabularMdp::new(n_states, n_actions, transition, p0, horizon).expect("valid random mdp")
}

/// Uniformly random row-stochastic policy.
pub fn random_policy(n_states: usize, n_actions: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut policy = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        let mut row: Vec<f64> = (0..n_actions).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        policy[s * n_actions..(s + 1) * n_actions].copy_from_slice(&row);
    }
    policy
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_chain_has_one_trajectory_per_action_assignment() {
        // Two states, one action, deterministic cycle.
        let transition = vec![
            0.0, 1.0, // s0 -> s1
            1.0, 0.0, // s1 -> s0
        ];
        let mdp = TabularMdp::new(2, 1, transition, vec![1.0, 0.0], 4).unwrap();
        let policy = vec![1.0, 1.0];
        assert_eq!(mdp.count_trajectories(&policy), 1);
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(3, 2, 4, &mut rng);
        for s in 0..3 {
            for a in 0..2 {
                let sum: f64 = (0..3).map(|s2| mdp.prob(s, a, s2)).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_rows() {
        let transition = vec![0.5, 0.4, 1.0, 0.0];
        assert!(TabularMdp::new(2, 1, transition, vec![1.0, 0.0], 3).is_err());
    }

    #[test]
    fn enumeration_equals_visitation_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            use rand::Rng;
            let n_states = rng.random_range(2..=4);
            let n_actions = rng.random_range(1..=3);
            let horizon = rng.random_range(2..=5);
            let mdp = random_mdp(n_states, n_actions, horizon, &mut rng);
            let policy = random_policy(n_states, n_actions, &mut rng);
            let reward: Vec<f64> = (0..n_states * n_actions * n_states)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let reward = RewardTable::new(n_states, n_actions, reward).unwrap();
            let a = mdp.return_by_enumeration(&policy, &reward, 0.9);
            let b = mdp.return_by_visitation(&policy, &reward, 0.9);
            assert!((a - b).abs() < 1e-10, "enumeration {a} vs visitation {b}");
        }
    }

    #[test]
    fn exact_q_satisfies_bellman_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mdp = random_mdp(4, 3, 4, &mut rng);
        let policy = random_policy(4, 3, &mut rng);
        use rand::Rng;
        let reward: Vec<f64> =
            (0..4 * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let reward = RewardTable::new(4, 3, reward).unwrap();
        let gamma = 0.9;
        let q = mdp.exact_q(&policy, &reward, gamma);
        for s in 0..4 {
            for a in 0..3 {
                let mut rhs = 0.0;
                for s2 in 0..4 {
                    let p = mdp.prob(s, a, s2);
                    let mut v2 = 0.0;
                    for a2 in 0..3 {
                        v2 += policy[s2 * 3 + a2] * q[s2 * 3 + a2];
                    }
                    rhs += p * (reward.get(s, a, s2) + gamma * v2);
                }
                let lhs = q[s * 3 + a];
                assert!((lhs - rhs).abs() < 1e-10, "bellman residual at ({s},{a})");
            }
        }
    }
}
