//! Post-training analysis: skill statistics from a checkpoint, off-policy
//! weight diagnostics over a buffer dump, and cross-run curve files.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::dads::{is_weight, sample_prior, unbiased_trajectory_weights, SkillVector};
use crate::env::{reduced_delta, Environment};
use crate::metrics::{aggregate, read_metrics, resample};
use crate::replay::{split_episodes, Transition};
use crate::sac::Actor;
use crate::{Error, Result};

/// Per-skill displacement statistics.
#[derive(Debug, Clone)]
pub struct SkillRow {
    pub z: SkillVector,
    /// Total reduced-state displacement over the rollout (wrap-aware sum of
    /// per-step deltas).
    pub displacement: Vec<f64>,
    pub magnitude: f64,
}

/// Report from rolling prior-sampled skills with the deterministic policy.
#[derive(Debug, Clone)]
pub struct SkillEvalReport {
    pub rows: Vec<SkillRow>,
    pub mean_magnitude: f64,
    pub std_magnitude: f64,
    /// Histogram of pairwise angular separations between displacement
    /// directions, 15-degree bins over [0, 180].
    pub separation_histogram: Vec<(f64, usize)>,
    /// Pairwise separations in degrees, row-major upper triangle.
    pub separations_deg: Vec<f64>,
}

/// Samples `count` skills from the prior and runs each for `horizon` steps
/// with the deterministic policy mean, reporting displacement statistics.
pub fn eval_skills(
    env: &dyn Environment,
    actor: &Actor,
    count: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SkillEvalReport> {
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let z = sample_prior(rng, actor.d_z);
        let mut state = env.reset(rng);
        let mut displacement = vec![0.0; env.spec().d_r];
        for step in 0..horizon {
            let action = actor.mean_action(state.coords(), z.coords())?;
            let result = env.step(&state, &action, step);
            for (d, delta) in
                displacement.iter_mut().zip(reduced_delta(env, &state, &result.next_state))
            {
                *d += delta;
            }
            state = result.next_state;
        }
        let magnitude = displacement.iter().map(|d| d * d).sum::<f64>().sqrt();
        rows.push(SkillRow { z, displacement, magnitude });
    }

    let n = rows.len() as f64;
    let mean_magnitude = rows.iter().map(|r| r.magnitude).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.magnitude - mean_magnitude).powi(2)).sum::<f64>() / n;
    let std_magnitude = var.sqrt();

    let separations_deg = pairwise_separations_deg(&rows);
    let mut separation_histogram: Vec<(f64, usize)> =
        (0..12).map(|b| (b as f64 * 15.0, 0)).collect();
    for s in &separations_deg {
        let bin = ((s / 15.0) as usize).min(11);
        separation_histogram[bin].1 += 1;
    }

    Ok(SkillEvalReport { rows, mean_magnitude, std_magnitude, separation_histogram, separations_deg })
}

/// Angle in degrees between displacement directions for every skill pair
/// (upper triangle, row-major). Pairs involving a near-zero displacement
/// count as unseparated (0 degrees).
pub fn pairwise_separations_deg(rows: &[SkillRow]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (a, b) = (&rows[i], &rows[j]);
            if a.magnitude < 1e-9 || b.magnitude < 1e-9 {
                out.push(0.0);
                continue;
            }
            let dot: f64 =
                a.displacement.iter().zip(&b.displacement).map(|(x, y)| x * y).sum();
            let cos = (dot / (a.magnitude * b.magnitude)).clamp(-1.0, 1.0);
            out.push(cos.acos().to_degrees());
        }
    }
    out
}

/// Size of the largest skill subset whose pairwise displacement-direction
/// separations are all at least `min_deg`. Exhaustive over subsets; callers
/// keep `rows` small.
pub fn max_separated_subset(rows: &[SkillRow], min_deg: f64) -> usize {
    let n = rows.len();
    assert!(n <= 20, "subset search is exhaustive");
    let seps = pairwise_separations_deg(rows);
    let sep = |i: usize, j: usize| -> f64 {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        // index into the upper triangle
        let idx = lo * n - lo * (lo + 1) / 2 + (hi - lo - 1);
        seps[idx]
    };
    let mut best = 0usize;
    for mask in 0u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let ok = members.iter().enumerate().all(|(k, &i)| {
            members[k + 1..].iter().all(|&j| sep(i, j) >= min_deg)
        });
        if ok {
            best = size;
        }
    }
    best
}

/// Renders the skill report as a line-oriented text document.
pub fn format_skill_report(report: &SkillEvalReport) -> String {
    let mut out = String::new();
    out.push_str("# skill evaluation\n");
    out.push_str("# columns: z..., displacement..., magnitude\n");
    for r in &report.rows {
        let z: Vec<String> = r.z.coords().iter().map(|v| v.to_string()).collect();
        let d: Vec<String> = r.displacement.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("skill,{},{},{}\n", z.join(","), d.join(","), r.magnitude));
    }
    out.push_str(&format!(
        "magnitude_mean_std,{},{}\n",
        report.mean_magnitude, report.std_magnitude
    ));
    for (lo, count) in &report.separation_histogram {
        out.push_str(&format!("separation_bin,{lo},{count}\n"));
    }
    out
}

/// Per-alpha clipped-weight statistics over a dump.
#[derive(Debug, Clone)]
pub struct AlphaStats {
    pub alpha: f64,
    pub w_mean: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Fraction of weights lying exactly on a clip boundary.
    pub boundary_fraction: f64,
}

/// Per-episode cumulative product-of-ratios diagnostics.
#[derive(Debug, Clone)]
pub struct EpisodeDiag {
    pub len: usize,
    pub cumulative: Vec<f64>,
    pub overflowed: bool,
}

#[derive(Debug, Clone)]
pub struct DiagReport {
    pub per_alpha: Vec<AlphaStats>,
    pub episodes: Vec<EpisodeDiag>,
}

/// Off-policy diagnostics of a transition dump against the current actor:
/// clipped-weight distributions at alpha in {1, 10} and the unbiased
/// cumulative-product weights per episode (with overflow flags).
pub fn diag(actor: &Actor, rows: &[Transition]) -> Result<DiagReport> {
    if rows.is_empty() {
        return Err(Error::Empty("diagnostics over an empty dump".into()));
    }
    let current: Vec<f64> = rows
        .iter()
        .map(|t| actor.log_prob(t.s.coords(), t.z.coords(), &t.a))
        .collect::<Result<_>>()?;
    let behavior: Vec<f64> = rows.iter().map(|t| t.logp_c).collect();
    if behavior.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dump carries non-finite behavior log-densities".into()));
    }

    let mut per_alpha = Vec::new();
    for alpha in [1.0, 10.0] {
        let mut w_sum = 0.0;
        let mut w_min = f64::INFINITY;
        let mut w_max = f64::NEG_INFINITY;
        let mut boundary = 0usize;
        for (cur, beh) in current.iter().zip(&behavior) {
            let w = is_weight(*cur, *beh, alpha)?;
            w_sum += w;
            w_min = w_min.min(w);
            w_max = w_max.max(w);
            if w == alpha || w == 1.0 / alpha {
                boundary += 1;
            }
        }
        per_alpha.push(AlphaStats {
            alpha,
            w_mean: w_sum / rows.len() as f64,
            w_min,
            w_max,
            boundary_fraction: boundary as f64 / rows.len() as f64,
        });
    }

    let mut episodes = Vec::new();
    let mut offset = 0usize;
    for ep in split_episodes(rows) {
        let cur = &current[offset..offset + ep.len()];
        let beh = &behavior[offset..offset + ep.len()];
        offset += ep.len();
        let cumulative = unbiased_trajectory_weights(cur, beh);
        let overflowed = cumulative.iter().any(|w| w.is_infinite());
        episodes.push(EpisodeDiag { len: ep.len(), cumulative, overflowed });
    }
    Ok(DiagReport { per_alpha, episodes })
}

pub fn format_diag_report(report: &DiagReport) -> String {
    let mut out = String::new();
    out.push_str("# off-policy weight diagnostics\n");
    for a in &report.per_alpha {
        out.push_str(&format!(
            "alpha,{},mean,{},min,{},max,{},boundary_fraction,{}\n",
            a.alpha, a.w_mean, a.w_min, a.w_max, a.boundary_fraction
        ));
    }
    for (i, ep) in report.episodes.iter().enumerate() {
        let w: Vec<String> = ep.cumulative.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "episode,{},len,{},overflow,{},weights,{}\n",
            i,
            ep.len,
            ep.overflowed,
            w.join(",")
        ));
    }
    out
}

/// One run's reward curve plus identity for grouping.
#[derive(Debug, Clone)]
pub struct RunCurve {
    pub variant: String,
    pub env: String,
    pub seed: u64,
    pub samples: Vec<f64>,
    pub reward: Vec<f64>,
}

/// Loads the reward curve of a run directory (resolved config + metrics).
pub fn load_run_curve(dir: &Path) -> Result<RunCurve> {
    let cfg = crate::config::ExperimentConfig::from_file(&dir.join("config.resolved"))
        .map_err(|e| Error::Runtime(format!("run {}: {e}", dir.display())))?;
    let rows = read_metrics(&dir.join("metrics.csv"))
        .map_err(|e| Error::Runtime(format!("run {}: {e}", dir.display())))?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("run {} has an empty metrics body", dir.display())));
    }
    Ok(RunCurve {
        variant: cfg.variant_label(),
        env: cfg.env,
        seed: cfg.seed,
        samples: rows.iter().map(|r| r.samples as f64).collect(),
        reward: rows.iter().map(|r| r.reward_mean).collect(),
    })
}

/// Emits one curve file per variant: every run resampled onto a common
/// sample grid plus median/min/max aggregate columns.
pub fn plot_data(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::Empty("no run directories given".into()));
    }
    let curves: Vec<RunCurve> = run_dirs
        .iter()
        .map(|d| load_run_curve(d))
        .collect::<Result<_>>()?;
    let env0 = &curves[0].env;
    if let Some(bad) = curves.iter().find(|c| &c.env != env0) {
        return Err(Error::Config(format!(
            "mismatched environments across runs: {} vs {}",
            env0, bad.env
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let mut variants: Vec<String> = curves.iter().map(|c| c.variant.clone()).collect();
    variants.sort();
    variants.dedup();

    let mut written = Vec::new();
    for variant in variants {
        let group: Vec<&RunCurve> = curves.iter().filter(|c| c.variant == variant).collect();
        let lo = group
            .iter()
            .map(|c| c.samples[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = group
            .iter()
            .map(|c| *c.samples.last().unwrap())
            .fold(f64::INFINITY, f64::min);
        if hi < lo {
            return Err(Error::Runtime(format!(
                "variant {variant}: sample ranges do not overlap"
            )));
        }
        let grid_points = 100usize;
        let grid: Vec<f64> = (0..grid_points)
            .map(|i| lo + (hi - lo) * i as f64 / (grid_points - 1) as f64)
            .collect();
        let resampled: Vec<Vec<f64>> =
            group.iter().map(|c| resample(&c.samples, &c.reward, &grid)).collect();
        let (median, min, max) = aggregate(&resampled);

        let mut text = String::new();
        let seeds: Vec<String> = group.iter().map(|c| format!("seed{}", c.seed)).collect();
        text.push_str(&format!("samples,{},median,min,max\n", seeds.join(",")));
        for (i, g) in grid.iter().enumerate() {
            let per_seed: Vec<String> =
                resampled.iter().map(|r| r[i].to_string()).collect();
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                g,
                per_seed.join(","),
                median[i],
                min[i],
                max[i]
            ));
        }
        let path = out_dir.join(format!("curve_{variant}.csv"));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
