//! `plan`: run planning experiments, sweeps and ablations; validate corpora;
//! export galleries; serve the rating API.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use planweave_core::backends::CACHE_MODE_ENV;
use planweave_core::corpus::{corpus_stats, load_corpus, write_rejects, ValidationRules};
use planweave_core::plan::TemplateRole;
use planweave_core::runner::{self, export_gallery, load_plans, ExperimentConfig};
use planweave_core::CacheMode;
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "plan", version, about = "Multimodal procedural planning experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Override the config's sampling / mock seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// record | replay | strict-replay | off (beats $PLANWEAVE_CACHE_MODE and the config).
    #[arg(long, global = true)]
    cache_mode: Option<CacheMode>,
    /// Worker threads for task-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate and score plans for every sampled goal × method.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Score candidate bridge templates and pick one per role.
    Robustness {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Contrast the full pipeline with its ablations.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Render plan records as static HTML pages.
    Gallery {
        /// Directory searched recursively for `*.plan` records.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Root image locators resolve against [default: INPUT].
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Check a corpus against the filtering rules and write rejects.txt.
    ValidateCorpus {
        path: PathBuf,
        /// Directory for rejects.txt [default: the corpus file's directory].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus statistics.
    Stats { path: PathBuf },
    /// Serve the pairwise rating API.
    ServeRatings {
        /// Session logs and snapshots.
        #[arg(long)]
        data: PathBuf,
        /// Plan output directory; served under /assets.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Static UI bundle served at /.
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn load_config(path: &Path, g: &Global) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = g.seed {
        c.seed = seed;
    }
    if let Some(mode) = CacheMode::from_env().map_err(anyhow::Error::msg).context(CACHE_MODE_ENV)? {
        c.cache_mode = mode;
    }
    if let Some(mode) = g.cache_mode {
        c.cache_mode = mode;
    }
    if let Some(w) = g.workers {
        c.workers = w;
    }
    c.validate()?;
    Ok(c)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let g = &cli.global;
    match cli.cmd {
        Cmd::Run { config } => {
            let c = load_config(&config, g)?;
            let o = runner::run_experiment(&c)?;
            print!("{}", o.report.to_markdown());
            println!(
                "\n{} plans ({} resumed), {} failed, {} backend calls; reports in {}",
                o.plans.len(),
                o.resumed,
                o.failures.len(),
                o.backend_calls,
                c.out_dir.display()
            );
        }
        Cmd::Robustness { config } => {
            let c = load_config(&config, g)?;
            let mut templates = c.candidates(TemplateRole::T2iBridge);
            templates.extend(c.candidates(TemplateRole::I2tBridge));
            let r = runner::run_template_robustness(&c, &templates)?;
            print!("{}", r.to_markdown());
            for s in &r.selected {
                println!("selected {}: {} ({:.4})", s.role, s.template_id, s.average);
            }
        }
        Cmd::Ablate { config } => {
            let c = load_config(&config, g)?;
            let (o, a) = runner::run_ablation(&c)?;
            print!("{}", a.to_markdown());
            println!("\n{} plans, {} failed", o.plans.len(), o.failures.len());
        }
        Cmd::Gallery { input, output, images } => {
            let plans = load_plans(&input)?;
            if plans.is_empty() {
                bail!("no .plan records under {}", input.display());
            }
            let root = images.unwrap_or_else(|| input.clone());
            let out = export_gallery(&plans, &root, &output)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} pages; open {}", out.pages.len(), out.index.display());
        }
        Cmd::ValidateCorpus { path, out } => {
            let m = load_corpus(&path, &ValidationRules::default())?;
            let dir = out.unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&dir)?;
            let rejects = write_rejects(&m, &dir)?;
            println!("{}: {} accepted, {} rejected", m.dataset, m.examples.len(), m.rejected.len());
            println!("provenance: {}", m.provenance);
            println!("rejects written to {}", rejects.display());
        }
        Cmd::Stats { path } => {
            let m = load_corpus(&path, &ValidationRules::default())?;
            let s = corpus_stats(&m)?;
            println!("dataset\t{}", s.dataset);
            println!("examples\t{}", s.examples);
            println!("rejected\t{}", s.rejected);
            println!("avg_steps\t{}", s.avg_steps_display());
            for (n, count) in &s.step_histogram {
                println!("steps={n}\t{count}");
            }
            for (cat, count) in &s.categories {
                println!("category={}\t{count}", if cat.is_empty() { "-" } else { cat });
            }
        }
        Cmd::ServeRatings { data, assets, ui, addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(planweave_rater::serve(planweave_rater::ServeOptions {
                addr,
                data_dir: data,
                assets_dir: assets,
                ui_dir: ui,
            }))?;
        }
    }
    Ok(())
}
