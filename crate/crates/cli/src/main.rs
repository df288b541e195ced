use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use vqadiff_cli::cache::Cache;
use vqadiff_cli::commands::{self, Context, EvaluateArgs, GenerateArgs};
use vqadiff_cli::config::PipelineConfig;
use vqadiff_cli::{CliError, CliResult};
use vqadiff_core::backends::TraceLog;

#[derive(Parser)]
#[command(name = "vqadiff", version, about = "Single image to posed multi-view vehicle assets")]
struct Cli {
    /// Pipeline configuration (TOML). Relative paths inside it resolve
    /// against its directory.
    #[arg(long, short, global = true, default_value = "vqadiff.toml")]
    config: PathBuf,

    /// Append one JSON line per backend call to this file.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write render manifests for an instance index, then build training
    /// pairs once every instance has been rendered.
    BuildDataset {
        /// JSON list of {instance_id, model_path, bbox_min, bbox_max}.
        #[arg(long)]
        index: PathBuf,
        /// Stop after writing the render manifests.
        #[arg(long)]
        manifests_only: bool,
    },
    /// Fine-tune the anchor and neighbor experts on a built dataset.
    TrainExperts {
        /// datasets.json written by build-dataset.
        #[arg(long)]
        datasets: PathBuf,
        /// Also copy experts.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn one photo into a 16-view asset bundle.
    Generate {
        /// Input photo (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use this description instead of asking the VQA model.
        #[arg(long)]
        prompt_override: Option<String>,
        /// Extra words appended to the description, e.g. "with a rear spoiler".
        #[arg(long)]
        prompt_suffix: Option<String>,
        /// Run an image-to-image edit with this prompt before describing
        /// the photo (style transfer, inpainting).
        #[arg(long)]
        reference_transform: Option<String>,
        /// Also copy the bundle into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a bundle against a reference photo.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Text for ITC and VQA scoring; defaults to the bundle's prompt.
        #[arg(long)]
        prompt_text: Option<String>,
        /// Also write report.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that every cached file belongs to exactly one intact entry.
    AuditCache,
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = PipelineConfig::load(&cli.config)?;
    if let Command::AuditCache = cli.command {
        let cache = Cache::open(&cfg.cache_dir());
        let report = cache.audit()?;
        println!("entries: {}", report.entries);
        if report.is_clean() {
            println!("cache is clean");
            return Ok(());
        }
        let problems = report.problems();
        for p in &problems {
            println!("{p}");
        }
        return Err(vqadiff_core::Error::Validation(problems).into());
    }

    let trace = match &cli.trace {
        Some(p) => TraceLog::to_file(p)?,
        None => TraceLog::in_memory(),
    };
    let ctx = Context::new(cfg, Arc::new(trace))?;
    match cli.command {
        Command::BuildDataset { index, manifests_only } => {
            let out = commands::build_dataset(&ctx, &index, manifests_only)?;
            for m in &out.manifests {
                println!("manifest: {}", m.display());
            }
            if let Some(d) = &out.datasets {
                println!("datasets: {}", d.display());
                println!("pairs: {}", out.pair_count);
                println!("cache: {}", if out.hit { "hit" } else { "miss" });
            }
        }
        Command::TrainExperts { datasets, out } => {
            let out = commands::train(&ctx, &datasets, out.as_deref())?;
            println!("experts: {}", out.experts_path.display());
            println!("cache: {}", if out.hit { "hit" } else { "miss" });
        }
        Command::Generate {
            image,
            seed,
            prompt_override,
            prompt_suffix,
            reference_transform,
            out,
        } => {
            let args = GenerateArgs {
                image,
                seed,
                prompt_override,
                prompt_suffix,
                reference_transform,
                out,
            };
            let out = commands::generate(&ctx, &args)?;
            println!("bundle: {}", out.bundle_dir.display());
            println!("digest: {}", out.digest);
            for w in &out.warnings {
                println!("warning: {w}");
            }
        }
        Command::Evaluate {
            bundle,
            reference,
            prompt_text,
            out,
        } => {
            let args = EvaluateArgs {
                bundle,
                reference,
                prompt_text,
                out,
            };
            let out = commands::evaluate(&ctx, &args)?;
            let r = &out.report;
            println!("report: {}", out.report_path.display());
            println!("csv: {}", out.csv_path.display());
            for (m, v) in r.values() {
                println!("{}: {v:.6}", m.as_str());
            }
            if let Some(f) = &r.fixture_delta {
                for (m, d) in &f.deltas {
                    println!("delta {}/{} {}: {d:+.6}", f.table, f.method, m.as_str());
                }
            }
        }
        Command::AuditCache => unreachable!("handled above"),
    }
    println!("backend calls: {}", ctx.calls());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: i32 = CliError::exit_code(&e);
            ExitCode::from(code as u8)
        }
    }
}
