//! Ring-buffer replay store with reward relabeling.
//!
//! Stored transitions never carry rewards: rewards are non-stationary (they
//! depend on the current skill-dynamics model) and are recomputed on every
//! sampled batch via [`relabel`]. Each transition stores the behavior
//! policy's log-density of the executed action, which the importance
//! correction in [`weight_batch`] compares against the current policy.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dads::{intrinsic_reward, is_weight, RewardContext, SkillVector};
use crate::env::{Environment, State};
use crate::sac::Actor;
use crate::{Error, Result};

/// One environment step: the atom of replay and learning.
///
/// `done` marks premature termination (no bootstrapping); plain horizon
/// exhaustion does not set it. `logp_c` is the behavior policy's log-density
/// of `a`, recorded at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: State,
    pub z: SkillVector,
    pub a: Vec<f64>,
    pub next: State,
    pub logp_c: f64,
    pub done: bool,
    pub policy_version: u64,
}

/// FIFO ring buffer over transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self { capacity, items: Vec::new(), cursor: 0, inserted: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total transitions ever inserted, regardless of eviction.
    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends an episode's transitions in step order, evicting oldest-first
    /// when full. The episode must be non-empty and share one skill and one
    /// policy version.
    pub fn add_episode(&mut self, episode: Vec<Transition>) -> Result<()> {
        let first = episode
            .first()
            .ok_or_else(|| Error::Empty("episode with zero transitions".into()))?;
        let z0 = first.z.clone();
        let v0 = first.policy_version;
        if episode.iter().any(|t| t.z != z0 || t.policy_version != v0) {
            return Err(Error::Config(
                "episode transitions must share one skill and one policy version".into(),
            ));
        }
        for t in episode {
            self.push(t);
        }
        Ok(())
    }

    fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    /// Contents in insertion order (oldest first).
    pub fn iter_in_order(&self) -> impl Iterator<Item = &Transition> {
        let (tail, head) = self.items.split_at(self.cursor.min(self.items.len()));
        head.iter().chain(tail.iter())
    }

    /// I.i.d. uniform sample with replacement over current contents.
    pub fn sample_uniform(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::Empty("sampling from an empty replay buffer".into()));
        }
        Ok((0..batch)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect())
    }

    /// Writes the whole buffer as a binary dump (insertion order).
    pub fn dump(&self, path: &Path, d_s: usize, d_z: usize, d_a: usize) -> Result<()> {
        let rows: Vec<Transition> = self.iter_in_order().cloned().collect();
        write_dump(path, d_s, d_z, d_a, &rows)
    }
}

/// Recomputes intrinsic rewards for a batch against the given context. The
/// output is row-aligned with the batch; transitions are not modified.
pub fn relabel(
    batch: &[Transition],
    ctx: &RewardContext,
    env: &dyn Environment,
) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| intrinsic_reward(ctx, env, &t.s, &t.z, &t.next))
        .collect()
}

/// Clipped importance weights of a batch under the current actor:
/// `w_j = clip(exp(logpi(a_j|s_j,z_j) - logp_c_j), 1/alpha, alpha)`, with the
/// current log-density evaluated through the tanh-Gaussian at the stored
/// action.
pub fn weight_batch(batch: &[Transition], actor: &Actor, alpha: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            let logp = actor.log_prob(t.s.coords(), t.z.coords(), &t.a)?;
            is_weight(logp, t.logp_c, alpha)
        })
        .collect()
}

const DUMP_MAGIC: &[u8; 8] = b"MISKDMP1";

/// Writes transitions as a versioned binary log: a header with dimensions
/// followed by fixed-width little-endian `f64` records.
pub fn write_dump(
    path: &Path,
    d_s: usize,
    d_z: usize,
    d_a: usize,
    rows: &[Transition],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DUMP_MAGIC)?;
    for dim in [1u32, d_s as u32, d_z as u32, d_a as u32] {
        f.write_all(&dim.to_le_bytes())?;
    }
    f.write_all(&(rows.len() as u64).to_le_bytes())?;
    for t in rows {
        if t.s.coords().len() != d_s || t.z.dim() != d_z || t.a.len() != d_a {
            return Err(Error::Dim("transition dims do not match dump header".into()));
        }
        let mut rec: Vec<f64> = Vec::with_capacity(2 * d_s + d_z + d_a + 3);
        rec.extend_from_slice(t.s.coords());
        rec.extend_from_slice(t.z.coords());
        rec.extend_from_slice(&t.a);
        rec.extend_from_slice(t.next.coords());
        rec.push(t.logp_c);
        rec.push(if t.done { 1.0 } else { 0.0 });
        rec.push(t.policy_version as f64);
        for v in rec {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_dump`]. Returns `(d_s, d_z, d_a, rows)`.
pub fn read_dump(path: &Path) -> Result<(usize, usize, usize, Vec<Transition>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Checkpoint("not a transition dump (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut dyn Read| -> Result<u32> {
        f.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut f)?;
    if version != 1 {
        return Err(Error::Checkpoint(format!("unsupported dump version {version}")));
    }
    let d_s = read_u32(&mut f)? as usize;
    let d_z = read_u32(&mut f)? as usize;
    let d_a = read_u32(&mut f)? as usize;
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;

    let rec_len = 2 * d_s + d_z + d_a + 3;
    let mut rows = Vec::with_capacity(count);
    let mut buf = vec![0u8; rec_len * 8];
    for _ in 0..count {
        f.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut off = 0;
        let take = |off: &mut usize, n: usize| -> Vec<f64> {
            let out = vals[*off..*off + n].to_vec();
            *off += n;
            out
        };
        let s = State(take(&mut off, d_s));
        let z = SkillVector(take(&mut off, d_z));
        let a = take(&mut off, d_a);
        let next = State(take(&mut off, d_s));
        let logp_c = vals[off];
        let done = vals[off + 1] != 0.0;
        let policy_version = vals[off + 2] as u64;
        rows.push(Transition { s, z, a, next, logp_c, done, policy_version });
    }
    Ok((d_s, d_z, d_a, rows))
}

/// Groups dump rows into episodes: a new episode starts whenever the skill
/// bits or the policy version change between consecutive rows.
pub fn split_episodes(rows: &[Transition]) -> Vec<&[Transition]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        let boundary = i == rows.len()
            || rows[i].policy_version != rows[start].policy_version
            || rows[i].z != rows[start].z;
        if boundary {
            out.push(&rows[start..i]);
            start = i;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dads::{sample_prior, DynamicsModel, RewardContext};
    use crate::env::PointMass2D;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn mk(v: f64, version: u64) -> Transition {
        Transition {
            s: State(vec![v, 0.0, 0.0, 0.0]),
            z: SkillVector(vec![0.5, -0.5]),
            a: vec![0.0, 0.0],
            next: State(vec![v + 0.01, 0.0, 0.0, 0.0]),
            logp_c: -1.0,
            done: false,
            policy_version: version,
        }
    }

    fn episode(tag: f64, len: usize) -> Vec<Transition> {
        (0..len).map(|i| mk(tag + i as f64 * 1e-3, 0)).collect()
    }

    #[test]
    fn add_preserves_order_and_size() {
        let mut buf = ReplayBuffer::new(10);
        buf.add_episode(episode(1.0, 5)).unwrap();
        assert_eq!(buf.len(), 5);
        let tags: Vec<f64> = buf.iter_in_order().map(|t| t.s.coords()[0]).collect();
        assert!(tags.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn eviction_keeps_last_capacity_in_order() {
        let mut buf = ReplayBuffer::new(4);
        buf.add_episode(episode(1.0, 3)).unwrap();
        buf.add_episode(episode(2.0, 3)).unwrap();
        assert_eq!(buf.len(), 4);
        let tags: Vec<f64> = buf.iter_in_order().map(|t| t.s.coords()[0]).collect();
        // last 4 insertions: 1.002, 2.000, 2.001, 2.002
        assert!((tags[0] - 1.002).abs() < 1e-12, "{tags:?}");
        assert!((tags[3] - 2.002).abs() < 1e-12);
    }

    #[test]
    fn inserted_counter_ignores_eviction() {
        let mut buf = ReplayBuffer::new(4);
        for k in 0..5 {
            buf.add_episode(episode(k as f64, 3)).unwrap();
        }
        assert_eq!(buf.total_inserted(), 15);
        assert_eq!(buf.len(), 4);
    }

    #[test]
    fn rejects_empty_and_mixed_episodes() {
        let mut buf = ReplayBuffer::new(4);
        assert!(matches!(buf.add_episode(vec![]), Err(Error::Empty(_))));
        let mut bad = episode(0.0, 2);
        bad[1].policy_version = 7;
        assert!(buf.add_episode(bad).is_err());
    }

    #[test]
    fn sampling_from_singleton_returns_it() {
        let mut buf = ReplayBuffer::new(4);
        buf.add_episode(episode(3.0, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in buf.sample_uniform(16, &mut rng).unwrap() {
            assert_eq!(t.s.coords()[0], 3.0);
        }
    }

    #[test]
    fn sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for k in 0..10 {
            buf.add_episode(episode(k as f64, 1)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut counts = [0u64; 10];
        for t in buf.sample_uniform(draws, &mut rng).unwrap() {
            counts[t.s.coords()[0] as usize] += 1;
        }
        // binomial sd per item
        let p = 0.1;
        let sd = ((draws as f64) * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                ((c as f64) - (draws as f64) * p).abs() < 5.0 * sd,
                "count {c} vs expectation {}",
                (draws as f64) * p
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mut buf = ReplayBuffer::new(16);
        buf.add_episode(episode(0.0, 10)).unwrap();
        let a = buf.sample_uniform(8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = buf.sample_uniform(8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_buffer_sampling_errors() {
        let buf = ReplayBuffer::new(4);
        assert!(buf.sample_uniform(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        /// FIFO eviction is total: after any insertion sequence the retained
        /// transitions are exactly the last `capacity` insertions, in order.
        #[test]
        fn fifo_retains_exactly_the_tail(
            lens in proptest::collection::vec(1usize..6, 1..8),
            cap in 1usize..12,
        ) {
            let mut buf = ReplayBuffer::new(cap);
            let mut all = Vec::new();
            for (e, len) in lens.iter().enumerate() {
                let ep: Vec<Transition> =
                    (0..*len).map(|i| mk(e as f64 + i as f64 * 1e-3, 0)).collect();
                all.extend(ep.iter().map(|t| t.s.coords()[0]));
                buf.add_episode(ep).unwrap();
            }
            let want: Vec<f64> = all.iter().rev().take(cap).rev().cloned().collect();
            let got: Vec<f64> = buf.iter_in_order().map(|t| t.s.coords()[0]).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn relabel_matches_direct_calls_bitwise() {
        let env = PointMass2D::new(50, 2.0, 0.1, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = DynamicsModel::new(2, 2, &[16, 16], &mut rng);
        let priors: Vec<_> = (0..25).map(|_| sample_prior(&mut rng, 2)).collect();
        let ctx = RewardContext::new(&model, priors).unwrap();
        let mut batch: Vec<Transition> = (0..32)
            .map(|i| {
                let mut t = mk(i as f64 * 0.01, 0);
                t.z = sample_prior(&mut rng, 2);
                t
            })
            .collect();
        // duplicated rows must relabel identically
        let dup = batch[0].clone();
        batch.push(dup);

        let rewards = relabel(&batch, &ctx, &env).unwrap();
        for (t, r) in batch.iter().zip(&rewards) {
            let direct = intrinsic_reward(&ctx, &env, &t.s, &t.z, &t.next).unwrap();
            assert_eq!(r.to_bits(), direct.to_bits());
        }
        assert_eq!(rewards[0].to_bits(), rewards[batch.len() - 1].to_bits());

        // idempotent under the same context
        let again = relabel(&batch, &ctx, &env).unwrap();
        assert!(rewards.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.dump");
        let mut buf = ReplayBuffer::new(16);
        buf.add_episode(episode(0.0, 3)).unwrap();
        let mut ep2 = episode(1.0, 2);
        for t in &mut ep2 {
            t.policy_version = 4;
            t.done = true;
        }
        buf.add_episode(ep2).unwrap();
        buf.dump(&path, 4, 2, 2).unwrap();
        let (d_s, d_z, d_a, rows) = read_dump(&path).unwrap();
        assert_eq!((d_s, d_z, d_a), (4, 2, 2));
        let orig: Vec<Transition> = buf.iter_in_order().cloned().collect();
        assert_eq!(rows, orig);

        let eps = split_episodes(&rows);
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[0].len(), 3);
        assert_eq!(eps[1].len(), 2);
    }
}
