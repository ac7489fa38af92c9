use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vcdm::experiment::{
    cmd_cache_embeddings, cmd_eval, cmd_plot, cmd_sample, cmd_sweep_dim, cmd_train, EvalOptions, ExperimentConfig,
    SampleOptions, Session, TrainOptions, TrainTarget,
};
use vcdm::pipeline::Method;

#[derive(Parser)]
#[command(name = "vcdm", version, about = "Two-stage embedding-prior diffusion experiments")]
struct Cli {
    /// Experiment config (flat TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sampling method: vcdm, edm, class-cond or oracle.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    /// Number of items to sample or evaluate.
    #[arg(long, global = true)]
    count: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Aux,
    Image,
}

#[derive(Subcommand)]
enum Command {
    /// Embed every dataset image once.
    CacheEmbeddings,
    /// Train the auxiliary model or the image model of the configured method.
    Train {
        #[arg(long, value_enum)]
        which: WhichArg,
        /// Stop after this many total steps, as an interrupted run would.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Resume from this checkpoint instead of the latest retained one.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples and write a tensor dump and a preview grid.
    Sample {
        /// Class label `a` for class-conditional models.
        #[arg(long)]
        class: Option<u32>,
    },
    /// Score every retained checkpoint of the method.
    Eval,
    /// Score versus conditioning dimension across budgets and seeds.
    SweepDim,
    /// Render a loss, metric or sweep CSV to SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_flag(s).map_err(|e| e.to_string())
}

fn session(cli: &Cli) -> Result<Session> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(m) = cli.method {
        cfg.method = m;
    }
    Ok(Session::new(cfg)?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::CacheEmbeddings => {
            let s = session(&cli)?;
            let out = cmd_cache_embeddings(&s)?;
            let verb = if out.written { "wrote" } else { "complete, skipped" };
            println!("embedding cache {} ({} rows): {verb}", out.path.display(), out.rows);
        }
        Command::Train { which, stop_after, resume } => {
            let s = session(&cli)?;
            let target = match which {
                WhichArg::Aux => TrainTarget::Aux,
                WhichArg::Image => TrainTarget::Image,
            };
            let opts = TrainOptions { stop_after: *stop_after, resume_from: resume.clone() };
            let out = cmd_train(&s, target, &opts)?;
            println!("trained {} to step {} (config {})", out.which.name(), out.step, s.hash);
            if let Some(loss) = out.last_loss {
                println!("last loss {loss:.6}");
            }
            println!("loss curve {}", out.loss_csv.display());
            for p in &out.retained {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Sample { class } => {
            let s = session(&cli)?;
            let count = cli.count.unwrap_or(s.cfg.sample_count);
            let out = cmd_sample(&s, &SampleOptions { method: s.cfg.method, count, class: *class })?;
            println!("samples {}", out.samples.display());
            println!("grid {}", out.grid.display());
            let t = out.timing;
            println!(
                "timing: stage 1 {:.3} ms/item, stage 2 {:.3} ms/item, stage-1 share {:.1}%",
                t.stage1_median_ms,
                t.stage2_median_ms,
                100.0 * t.overhead_fraction
            );
        }
        Command::Eval => {
            let s = session(&cli)?;
            let n = cli.count.unwrap_or(s.cfg.eval_n);
            let rows = cmd_eval(&s, &EvalOptions { method: s.cfg.method, n })?;
            for r in &rows {
                println!("{} step {}: {} score {:.6} (n = {})", r.method, r.step, r.extractor, r.score, r.n);
            }
            println!("metrics {}", s.paths.metrics().display());
        }
        Command::SweepDim => {
            let s = session(&cli)?;
            let rows = cmd_sweep_dim(&s)?;
            println!("{} sweep rows written to {}", rows.len(), s.paths.sweep().display());
        }
        Command::Plot { input } => {
            println!("plot {}", cmd_plot(input)?.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
