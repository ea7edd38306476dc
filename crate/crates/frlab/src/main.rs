use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use frlab_core::agent::Agent;
use frlab_core::config::RunConfig;
use frlab_core::env::{rng_for, Env};
use frlab_core::eval::{self, Controller, ZeroAction};
use frlab_core::mcp::Ablation;
use frlab_core::observation::{obs_labels, privileged_labels, CONTACT_DIM, LATENT_DIM, MASS_DIM, OBS_DIM};
use frlab_core::plot;
use frlab_core::replay::Trajectory;
use frlab_core::terrain::{self, CurriculumState, TerrainFamily};
use frlab_core::trainer::{load_agent, MetricsWriter, Trainer};

#[derive(Parser)]
#[command(name = "frlab", version, about = "Quadruped fall-recovery training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and predictor.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated: no_mass, no_col, no_est.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory for metrics and checkpoints.
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
        /// Continue from a checkpoint (its stored config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Success rate per terrain family and level.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated family names; defaults to the config's evaluation set.
        #[arg(long)]
        families: Option<String>,
        /// `1-10` or `1,3,5`.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "success.csv")]
        out: PathBuf,
        /// Also write the per-family plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Render an SVG figure.
    Plot {
        kind: PlotKind,
        /// Input CSV (rewards, success, mcp).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "Rough")]
        family: String,
        #[arg(long, default_value_t = 5)]
        level: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print internals.
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
    /// Trajectory recording and rendering.
    Sim {
        #[command(subcommand)]
        what: Sim,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Rewards,
    Success,
    Mcp,
    Terrain,
}

#[derive(Subcommand)]
enum Inspect {
    /// Labeled dump of o, p and s after one step.
    Obs {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "Flat")]
        family: String,
        #[arg(long, default_value_t = 1)]
        level: u32,
    },
    /// Predicted vs true masses and contacts for evaluation episodes, as CSV.
    Mcp {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "Flat")]
        family: String,
        #[arg(long, default_value_t = 1)]
        level: u32,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        #[arg(long, default_value = "mcp.csv")]
        out: PathBuf,
    },
    /// Fully resolved configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Sim {
    /// Record one episode to a trajectory file.
    Record {
        /// Without a checkpoint the robot holds its initial pose.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "Flat")]
        family: String,
        #[arg(long, default_value_t = 1)]
        level: u32,
        #[arg(long, default_value_t = 250)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "trajectory.txt")]
        out: PathBuf,
    },
    /// Render a trajectory as a side-view strip.
    Replay {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, default_value = "replay.svg")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        panels: usize,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    let mut a = Ablation::default();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "no_mass" => a.no_mass = true,
            "no_col" => a.no_col = true,
            "no_est" => a.no_est = true,
            "full" => {}
            other => bail!("unknown ablation `{other}` (expected no_mass, no_col or no_est)"),
        }
    }
    Ok(a)
}

fn parse_families(s: &str) -> Result<Vec<TerrainFamily>> {
    s.split(',')
        .map(|f| f.trim().parse::<TerrainFamily>().map_err(anyhow::Error::from))
        .collect()
}

fn parse_levels(s: &str) -> Result<Vec<u32>> {
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u32, u32) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty level range `{s}`");
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|l| Ok(l.trim().parse()?)).collect()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    ablate: Option<String>,
    iterations: Option<usize>,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut trainer = match &resume {
        Some(path) => {
            if config.is_some() || seed.is_some() || ablate.is_some() {
                bail!("--resume uses the checkpoint's config; drop --config/--seed/--ablate");
            }
            Trainer::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(a) = &ablate {
                cfg.ablation = parse_ablation(a)?;
            }
            Trainer::new(cfg)?
        }
    };
    if let Some(n) = iterations {
        trainer.cfg.iterations = n;
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), trainer.cfg.to_toml_string())?;
    trainer.checkpoint_dir = Some(out.clone());
    trainer.metrics = Some(MetricsWriter::open(&out.join("metrics.csv"))?);
    info!(
        "training {} envs for {} iterations ({}), output in {}",
        trainer.cfg.num_envs,
        trainer.cfg.iterations,
        trainer.cfg.ablation.label(),
        out.display()
    );
    let start = std::time::Instant::now();
    trainer.train(|s| {
        if s.episodes > 0 {
            info!(
                "iter {:5}  {:7.0}s  return {:9.2}  success {:.3}  level {:.2}  lr {:.2e}",
                s.iteration,
                start.elapsed().as_secs_f64(),
                s.mean_episode_return,
                s.success_rate,
                s.mean_level,
                s.learning_rate
            );
        }
    })?;
    let path = out.join("final.bin");
    trainer.checkpoint().save(&path)?;
    info!("saved {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ckpt: &Path,
    families: Option<String>,
    levels: Option<String>,
    episodes: Option<usize>,
    seeds: Option<usize>,
    out: &Path,
    svg: Option<PathBuf>,
) -> Result<()> {
    let (cfg, agent) = load_agent(ckpt)?;
    let families = match families {
        Some(f) => parse_families(&f)?,
        None => cfg.eval.families.clone(),
    };
    let levels = match levels {
        Some(l) => parse_levels(&l)?,
        None => cfg.eval.levels.clone(),
    };
    let cells = eval::success_matrix(
        &agent,
        &cfg,
        &families,
        &levels,
        episodes.unwrap_or(cfg.eval.episodes),
        seeds.unwrap_or(cfg.eval.seeds),
    )?;
    let csv = eval::success_csv(&cells);
    std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    for (family, rho) in eval::level_trend(&cells) {
        println!("# {family}: Spearman(level, success) = {rho:+.3}");
    }
    if let Some(svg) = svg {
        plot::success(&plot::Table::parse(&csv)?, &svg)?;
    }
    Ok(())
}

fn inspect_obs(ckpt: Option<PathBuf>, config: Option<PathBuf>, family: &str, level: u32) -> Result<()> {
    let (cfg, agent) = match &ckpt {
        Some(p) => load_agent(p)?,
        None => {
            let cfg = load_config(config.as_deref())?;
            let agent = Agent::new(&cfg, &mut rng_for(cfg.seed, &[1]));
            (cfg, agent)
        }
    };
    let family: TerrainFamily = family.parse()?;
    let mut env = Env::new(&cfg, 0, CurriculumState::new(family, level), rng_for(cfg.seed, &[7]))?;
    env.step(&cfg, &[0.0; 12])?;
    let envs = [env];
    let inf = agent.infer(&envs, None);
    println!("# o (raw, noisy)");
    for (i, (l, v)) in obs_labels().iter().zip(&envs[0].obs).enumerate() {
        println!("o[{i:3}] {l:>14} {v:+.5}");
    }
    println!("# p (normalized o, then predictor outputs)");
    let mut labels: Vec<String> = obs_labels();
    labels.extend((0..MASS_DIM).map(|k| format!("m_hat_{k}")));
    labels.extend((0..CONTACT_DIM).map(|k| format!("c_hat_{k}")));
    labels.extend((0..LATENT_DIM).map(|k| format!("z_hat_{k}")));
    for (i, (l, v)) in labels.iter().zip(inf.p.row(0)).enumerate() {
        let tag = if i < OBS_DIM { "" } else { " *" };
        println!("p[{i:3}] {l:>14} {v:+.5}{tag}");
    }
    println!("# s (raw)");
    for (i, (l, v)) in privileged_labels().iter().zip(envs[0].privileged()).enumerate() {
        println!("s[{i:3}] {l:>14} {v:+.5}");
    }
    Ok(())
}

fn inspect_mcp(ckpt: &Path, family: &str, level: u32, episodes: usize, out: &Path) -> Result<()> {
    let (cfg, agent) = load_agent(ckpt)?;
    let run = eval::run_episodes(&agent, &cfg, family.parse()?, level, episodes, cfg.seed, Some(&agent))?;
    std::fs::write(out, eval::mcp_csv(&run.mcp)).with_context(|| format!("writing {}", out.display()))?;
    info!("{} records, success rate {:.3}", run.mcp.len(), run.success_rate());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, ablate, iterations, out, resume } => {
            train(config, seed, ablate, iterations, out, resume)
        }
        Command::Eval { ckpt, families, levels, episodes, seeds, out, svg } => {
            evaluate(&ckpt, families, levels, episodes, seeds, &out, svg)
        }
        Command::Plot { kind, input, out, family, level, seed } => {
            let table = || -> Result<plot::Table> {
                let p = input.as_deref().context("--in is required for this plot")?;
                Ok(plot::Table::load(p)?)
            };
            match kind {
                PlotKind::Rewards => plot::rewards(&table()?, &out)?,
                PlotKind::Success => plot::success(&table()?, &out)?,
                PlotKind::Mcp => plot::mcp(&table()?, &out)?,
                PlotKind::Terrain => {
                    let cfg = RunConfig::default();
                    let hf = terrain::generate(&cfg.terrain, family.parse()?, level, seed)?;
                    plot::terrain(&hf, &out)?
                }
            }
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::Inspect { what } => match what {
            Inspect::Obs { ckpt, config, family, level } => inspect_obs(ckpt, config, &family, level),
            Inspect::Mcp { ckpt, family, level, episodes, out } => inspect_mcp(&ckpt, &family, level, episodes, &out),
            Inspect::Config { config, ckpt } => {
                let cfg = match ckpt {
                    Some(p) => load_agent(&p)?.0,
                    None => load_config(config.as_deref())?,
                };
                print!("{}", cfg.to_toml_string());
                Ok(())
            }
        },
        Command::Sim { what } => match what {
            Sim::Record { ckpt, family, level, steps, seed, out } => {
                let (cfg, agent) = match &ckpt {
                    Some(p) => {
                        let (c, a) = load_agent(p)?;
                        (c, Some(a))
                    }
                    None => (RunConfig::default(), None),
                };
                let controller: &dyn Controller = match &agent {
                    Some(a) => a,
                    None => &ZeroAction,
                };
                let traj = Trajectory::record(controller, &cfg, family.parse()?, level, seed, steps)?;
                traj.save(&out)?;
                info!("recorded {} frames to {}", traj.frames.len(), out.display());
                Ok(())
            }
            Sim::Replay { traj, out, panels } => {
                plot::replay(&Trajectory::load(&traj)?, &out, panels)?;
                info!("wrote {}", out.display());
                Ok(())
            }
        },
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_lists() {
        assert_eq!(parse_levels("1-4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_levels("2, 5,9").unwrap(), vec![2, 5, 9]);
        assert!(parse_levels("5-1").is_err());
        assert!(parse_levels("x").is_err());
    }

    #[test]
    fn ablation_flags() {
        let a = parse_ablation("no_mass,no_est").unwrap();
        assert!(a.no_mass && !a.no_col && a.no_est);
        assert_eq!(parse_ablation("full").unwrap(), Ablation::default());
        assert!(parse_ablation("no_legs").is_err());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["frlab", "plot", "rewards", "--in", "m.csv", "--out", "r.svg"]).unwrap();
        assert!(matches!(cli.command, Command::Plot { kind: PlotKind::Rewards, .. }));
    }
}
