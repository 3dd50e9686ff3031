//! Command-line surface: train runs, skill evaluation, goal-reaching plans,
//! off-policy diagnostics, and curve extraction.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mi_skills::analysis::{diag, eval_skills, format_diag_report, format_skill_report, plot_data};
use mi_skills::checkpoint::Checkpoint;
use mi_skills::config::ExperimentConfig;
use mi_skills::orchestrator::{make_rng, prepare_run_dir, run, STREAM_EVAL, STREAM_PLAN};
use mi_skills::planner::{mpc_execute, Goal, PlanConfig};
use mi_skills::replay::read_dump;
use mi_skills::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mi-skills",
    about = "Reward-free skill discovery with off-policy training and skill-space MPC",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train skills from a config file; prints the run directory.
    Train {
        /// Path to a `key = value` config document.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's variant preset (s1|s10|l1|l10|onpolicy-dyn|baseline-onpolicy).
        #[arg(long)]
        preset: Option<String>,
        /// Force deterministic single-threaded collection.
        #[arg(long)]
        sync: bool,
    },
    /// Roll prior-sampled skills with the deterministic policy and report
    /// displacement statistics.
    EvalSkills {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reach a goal by planning in skill space with the learned dynamics.
    Plan {
        #[arg(long)]
        ckpt: PathBuf,
        /// Goal in reduced coordinates, comma-separated (e.g. `1.0,-0.5`).
        #[arg(long)]
        goal: String,
        /// Candidate sequences per planning pass.
        #[arg(long)]
        k: Option<usize>,
        /// Skills per plan.
        #[arg(long)]
        hp: Option<usize>,
        /// Environment steps each skill is held for.
        #[arg(long)]
        hz: Option<usize>,
        /// Environment step budget.
        #[arg(long)]
        budget: Option<usize>,
        /// Success radius.
        #[arg(long)]
        radius: Option<f64>,
        /// Write the trajectory record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Off-policy weight diagnostics over a buffer dump.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dump: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample run curves onto a common grid with median/min/max aggregates.
    PlotData {
        /// Run directories produced by `train`.
        dirs: Vec<PathBuf>,
        /// Output directory for curve files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) => 1,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, preset, sync } => cmd_train(config, seed, preset, sync),
        Command::EvalSkills { ckpt, count, horizon, out } => {
            cmd_eval_skills(ckpt, count, horizon, out)
        }
        Command::Plan { ckpt, goal, k, hp, hz, budget, radius, out } => {
            cmd_plan(PlanArgs { ckpt, goal, k, hp, hz, budget, radius, out })
        }
        Command::Diag { ckpt, dump, out } => cmd_diag(ckpt, dump, out),
        Command::PlotData { dirs, out } => cmd_plot_data(dirs, out),
    }
}

fn cmd_train(
    config: PathBuf,
    seed: Option<u64>,
    preset: Option<String>,
    sync: bool,
) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(preset) = preset {
        cfg.preset = preset;
        cfg.apply_preset()?;
    }
    if sync {
        cfg.sync = true;
        cfg.collectors = 1;
    }
    cfg.validate()?;
    let run_dir = prepare_run_dir(&cfg)?;
    let summary = run(&cfg, &run_dir)?;
    eprintln!(
        "finished: {} rounds, {} samples, {} dropped messages",
        summary.rounds, summary.total_samples, summary.dropped_messages
    );
    println!("{}", summary.run_dir.display());
    Ok(())
}

fn write_or_print(out: Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_eval_skills(
    ckpt: PathBuf,
    count: usize,
    horizon: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    if count == 0 || horizon == 0 {
        return Err(Error::Config("count and horizon must be >= 1".into()));
    }
    let ck = Checkpoint::load(&ckpt)?;
    let env = ck.meta.build_env()?;
    let mut rng = make_rng(ck.rng.master_seed, STREAM_EVAL);
    let report = eval_skills(env.as_ref(), &ck.actor, count, horizon, &mut rng)?;
    write_or_print(out, &format_skill_report(&report))
}

struct PlanArgs {
    ckpt: PathBuf,
    goal: String,
    k: Option<usize>,
    hp: Option<usize>,
    hz: Option<usize>,
    budget: Option<usize>,
    radius: Option<f64>,
    out: Option<PathBuf>,
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let env = ck.meta.build_env()?;
    let target: Vec<f64> = args
        .goal
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad goal coordinate `{v}`")))
        })
        .collect::<Result<_>>()?;
    if target.len() != env.spec().d_r {
        return Err(Error::Config(format!(
            "goal has {} coordinates but the environment's reduced space has {}",
            target.len(),
            env.spec().d_r
        )));
    }

    let mut cfg = PlanConfig::default();
    if let Some(k) = args.k {
        cfg.candidates = k;
    }
    if let Some(hp) = args.hp {
        cfg.plan_horizon = hp;
    }
    if let Some(hz) = args.hz {
        cfg.skill_hold = hz;
    }
    if let Some(r) = args.radius {
        cfg.goal_radius = r;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let step_budget = args.budget.unwrap_or(200);

    let mut rng = make_rng(ck.rng.master_seed, STREAM_PLAN);
    let start = env.reset(&mut rng);
    let result = mpc_execute(
        env.as_ref(),
        &ck.actor,
        &ck.dynamics,
        &Goal(target),
        &cfg,
        &mut rng,
        step_budget,
        start,
    )?;

    let mut text = String::new();
    text.push_str("# step, reduced..., skill..., distance\n");
    for p in &result.trajectory {
        let r: Vec<String> = p.reduced.iter().map(|v| v.to_string()).collect();
        let z = match &p.skill {
            Some(z) => z.coords().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            None => "-".into(),
        };
        text.push_str(&format!("{},{},{},{}\n", p.step, r.join(","), z, p.distance));
    }
    text.push_str(&format!(
        "result,success,{},steps,{}{}\n",
        result.success,
        result.steps,
        result
            .failure_reason
            .as_deref()
            .map(|r| format!(",reason,{r}"))
            .unwrap_or_default()
    ));
    write_or_print(args.out, &text)
}

fn cmd_diag(ckpt: PathBuf, dump: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(&ckpt)?;
    let (d_s, d_z, d_a, rows) = read_dump(&dump)?;
    if d_s != ck.meta.d_s || d_z != ck.meta.d_z || d_a != ck.meta.d_a {
        return Err(Error::Config(format!(
            "dump dimensions ({d_s},{d_z},{d_a}) do not match checkpoint ({},{},{})",
            ck.meta.d_s, ck.meta.d_z, ck.meta.d_a
        )));
    }
    let report = diag(&ck.actor, &rows)?;
    write_or_print(out, &format_diag_report(&report))
}

fn cmd_plot_data(dirs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::Config("plot-data needs at least one run directory".into()));
    }
    let out_dir = out.unwrap_or_else(|| {
        let root = std::env::var("MI_SKILLS_OUT").unwrap_or_else(|_| ".".into());
        PathBuf::from(root).join("plot_data")
    });
    let written = plot_data(&dirs, &out_dir)?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}
