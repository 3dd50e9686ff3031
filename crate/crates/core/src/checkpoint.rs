//! Unified checkpoint: every learned object, optimizer state, round
//! counters, and rng positions in one binary file.
//!
//! Layout: a magic tag, a format-version integer, and a manifest of section
//! names and value lengths; then one body per section holding a shape table
//! followed by the values as little-endian 64-bit floats. Integer counters
//! are stored as `f64` bit patterns so the round trip is exact.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::dads::DynamicsModel;
use crate::env::{EnvPhysics, Environment};
use crate::nn::{AdamState, LayerShape, ParamVector, ShapeTable};
use crate::sac::{Actor, CriticPair};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MISKCKP1";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild the environment and networks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub env_name: String,
    pub d_s: usize,
    pub d_a: usize,
    pub d_r: usize,
    pub d_z: usize,
    pub l_prior_samples: usize,
    pub physics: EnvPhysics,
}

impl CheckpointMeta {
    pub fn build_env(&self) -> Result<Box<dyn Environment>> {
        crate::env::make_env(&self.env_name, &self.physics)
    }
}

/// Trainer progress counters persisted across checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundCounters {
    /// Samples consumed at the last round start.
    pub consumed_mark: u64,
    /// Total samples received.
    pub total_samples: u64,
    /// Snapshot version.
    pub version: u64,
    /// Completed training rounds.
    pub rounds: u64,
    /// Episodes ingested.
    pub episodes: u64,
}

/// ChaCha stream positions for resumable randomness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngPositions {
    pub master_seed: u64,
    pub trainer_word_pos: u128,
    pub collector_word_pos: Vec<u128>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub actor: Actor,
    pub critics: CriticPair,
    pub dynamics: DynamicsModel,
    pub opt_actor: AdamState,
    pub opt_q1: AdamState,
    pub opt_q2: AdamState,
    pub opt_dynamics: AdamState,
    pub counters: RoundCounters,
    pub rng: RngPositions,
    pub config_hash: u64,
}

struct Section {
    name: String,
    shapes: Vec<LayerShape>,
    values: Vec<f64>,
}

fn param_section(name: &str, pv: &ParamVector) -> Section {
    Section {
        name: name.to_string(),
        shapes: pv.shape().layers().to_vec(),
        values: pv.values().to_vec(),
    }
}

fn flat_section(name: &str, values: Vec<f64>) -> Section {
    Section {
        name: name.to_string(),
        shapes: vec![LayerShape { rows: 1, cols: values.len() }],
        values,
    }
}

fn adam_section(name: &str, opt: &AdamState) -> Section {
    let mut values = Vec::with_capacity(2 + 2 * opt.first_moment().len());
    values.push(f64::from_bits(opt.step_count()));
    values.push(opt.lr);
    values.extend_from_slice(opt.first_moment());
    values.extend_from_slice(opt.second_moment());
    flat_section(name, values)
}

fn adam_from_section(values: &[f64]) -> Result<AdamState> {
    if values.len() < 2 || (values.len() - 2) % 2 != 0 {
        return Err(Error::Checkpoint("malformed optimizer section".into()));
    }
    let n = (values.len() - 2) / 2;
    let t = values[0].to_bits();
    let lr = values[1];
    let m = values[2..2 + n].to_vec();
    let v = values[2 + n..].to_vec();
    Ok(AdamState::restore(m, v, t, lr))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta_values = {
            let env_kind = match self.meta.env_name.as_str() {
                "point_mass" => 0.0,
                "valve" => 1.0,
                other => return Err(Error::Checkpoint(format!("unknown env `{other}`"))),
            };
            vec![
                env_kind,
                self.meta.d_s as f64,
                self.meta.d_a as f64,
                self.meta.d_r as f64,
                self.meta.d_z as f64,
                self.meta.l_prior_samples as f64,
                self.meta.physics.horizon as f64,
                self.meta.physics.pm_arena_half,
                self.meta.physics.pm_reset_half,
                self.meta.physics.pm_step_size,
                self.meta.physics.valve_step_size,
            ]
        };
        let counter_values = vec![
            f64::from_bits(self.counters.consumed_mark),
            f64::from_bits(self.counters.total_samples),
            f64::from_bits(self.counters.version),
            f64::from_bits(self.counters.rounds),
            f64::from_bits(self.counters.episodes),
        ];
        let mut rng_values = vec![
            f64::from_bits(self.rng.master_seed),
            f64::from_bits(self.rng.trainer_word_pos as u64),
            f64::from_bits((self.rng.trainer_word_pos >> 64) as u64),
            f64::from_bits(self.rng.collector_word_pos.len() as u64),
        ];
        for pos in &self.rng.collector_word_pos {
            rng_values.push(f64::from_bits(*pos as u64));
            rng_values.push(f64::from_bits((*pos >> 64) as u64));
        }

        let sections = vec![
            flat_section("meta", meta_values),
            param_section("actor", &self.actor.params),
            param_section("critic1", &self.critics.q1),
            param_section("critic2", &self.critics.q2),
            param_section("target1", &self.critics.target1),
            param_section("target2", &self.critics.target2),
            param_section("dynamics", &self.dynamics.params),
            adam_section("opt_actor", &self.opt_actor),
            adam_section("opt_critic1", &self.opt_q1),
            adam_section("opt_critic2", &self.opt_q2),
            adam_section("opt_dynamics", &self.opt_dynamics),
            flat_section("round_state", counter_values),
            flat_section("rng", rng_values),
            flat_section("config_hash", vec![f64::from_bits(self.config_hash)]),
        ];

        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(sections.len() as u32).to_le_bytes())?;
        for s in &sections {
            let name = s.name.as_bytes();
            f.write_all(&(name.len() as u16).to_le_bytes())?;
            f.write_all(name)?;
            f.write_all(&(s.values.len() as u64).to_le_bytes())?;
        }
        for s in &sections {
            f.write_all(&(s.shapes.len() as u32).to_le_bytes())?;
            for shape in &s.shapes {
                f.write_all(&(shape.rows as u32).to_le_bytes())?;
                f.write_all(&(shape.cols as u32).to_le_bytes())?;
            }
            for v in &s.values {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut f)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n_sections = read_u32(&mut f)? as usize;
        let mut names = Vec::with_capacity(n_sections);
        let mut lengths = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name_len = read_u16(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            names.push(String::from_utf8(name).map_err(|_| {
                Error::Checkpoint("section name is not valid utf-8".into())
            })?);
            lengths.push(read_u64(&mut f)? as usize);
        }
        let mut sections: HashMap<String, Section> = HashMap::new();
        for i in 0..n_sections {
            let n_shapes = read_u32(&mut f)? as usize;
            let mut shapes = Vec::with_capacity(n_shapes);
            for _ in 0..n_shapes {
                let rows = read_u32(&mut f)? as usize;
                let cols = read_u32(&mut f)? as usize;
                shapes.push(LayerShape { rows, cols });
            }
            let mut values = vec![0.0; lengths[i]];
            let mut buf = [0u8; 8];
            for v in &mut values {
                f.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            sections.insert(names[i].clone(), Section { name: names[i].clone(), shapes, values });
        }

        fn take(sections: &mut HashMap<String, Section>, name: &str) -> Result<Section> {
            sections
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
        }
        fn param(sections: &mut HashMap<String, Section>, name: &str) -> Result<ParamVector> {
            let s = take(sections, name)?;
            let shape = ShapeTable::new(s.shapes)
                .map_err(|e| Error::Checkpoint(format!("section `{name}`: {e}")))?;
            ParamVector::from_values(shape, s.values)
                .map_err(|e| Error::Checkpoint(format!("section `{name}`: {e}")))
        }

        let meta = {
            let s = take(&mut sections, "meta")?;
            let v = &s.values;
            if v.len() != 11 {
                return Err(Error::Checkpoint("meta section length".into()));
            }
            let env_name = match v[0] as i64 {
                0 => "point_mass".to_string(),
                1 => "valve".to_string(),
                k => return Err(Error::Checkpoint(format!("unknown env kind {k}"))),
            };
            CheckpointMeta {
                env_name,
                d_s: v[1] as usize,
                d_a: v[2] as usize,
                d_r: v[3] as usize,
                d_z: v[4] as usize,
                l_prior_samples: v[5] as usize,
                physics: EnvPhysics {
                    horizon: v[6] as usize,
                    pm_arena_half: v[7],
                    pm_reset_half: v[8],
                    pm_step_size: v[9],
                    valve_step_size: v[10],
                },
            }
        };

        let actor_params = param(&mut sections, "actor")?;
        let actor = Actor::from_params(actor_params, meta.d_s, meta.d_z, meta.d_a)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let critics = CriticPair {
            q1: param(&mut sections, "critic1")?,
            q2: param(&mut sections, "critic2")?,
            target1: param(&mut sections, "target1")?,
            target2: param(&mut sections, "target2")?,
            d_s: meta.d_s,
            d_z: meta.d_z,
            d_a: meta.d_a,
        };
        let dynamics =
            DynamicsModel::from_params(param(&mut sections, "dynamics")?, meta.d_r, meta.d_z)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let opt_actor = adam_from_section(&take(&mut sections, "opt_actor")?.values)?;
        let opt_q1 = adam_from_section(&take(&mut sections, "opt_critic1")?.values)?;
        let opt_q2 = adam_from_section(&take(&mut sections, "opt_critic2")?.values)?;
        let opt_dynamics = adam_from_section(&take(&mut sections, "opt_dynamics")?.values)?;

        let counters = {
            let s = take(&mut sections, "round_state")?;
            if s.values.len() != 5 {
                return Err(Error::Checkpoint("round_state section length".into()));
            }
            RoundCounters {
                consumed_mark: s.values[0].to_bits(),
                total_samples: s.values[1].to_bits(),
                version: s.values[2].to_bits(),
                rounds: s.values[3].to_bits(),
                episodes: s.values[4].to_bits(),
            }
        };
        let rng = {
            let s = take(&mut sections, "rng")?;
            if s.values.len() < 4 {
                return Err(Error::Checkpoint("rng section length".into()));
            }
            let master_seed = s.values[0].to_bits();
            let trainer_word_pos =
                (s.values[1].to_bits() as u128) | ((s.values[2].to_bits() as u128) << 64);
            let n = s.values[3].to_bits() as usize;
            if s.values.len() != 4 + 2 * n {
                return Err(Error::Checkpoint("rng section length".into()));
            }
            let collector_word_pos = (0..n)
                .map(|i| {
                    (s.values[4 + 2 * i].to_bits() as u128)
                        | ((s.values[5 + 2 * i].to_bits() as u128) << 64)
                })
                .collect();
            RngPositions { master_seed, trainer_word_pos, collector_word_pos }
        };
        let config_hash = {
            let s = take(&mut sections, "config_hash")?;
            if s.values.len() != 1 {
                return Err(Error::Checkpoint("config_hash section length".into()));
            }
            s.values[0].to_bits()
        };

        Ok(Self {
            meta,
            actor,
            critics,
            dynamics,
            opt_actor,
            opt_q1,
            opt_q2,
            opt_dynamics,
            counters,
            rng,
            config_hash,
        })
    }
}

fn read_u16(f: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    f.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
