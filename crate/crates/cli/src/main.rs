use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmce_cli::config::ExperimentConfig;
use cmce_cli::pipeline::{self, Workspace};
use cmce_cli::scenario::{self, ScenarioName};
use cmce_cli::summary;
use cmce_core::Error;

#[derive(Parser)]
#[command(
    name = "cmce",
    version,
    about = "Cross-model compatible ensemble pipeline: generate synthetic embeddings, \
             train gallery-to-query transforms, fuse galleries and evaluate them"
)]
struct Cli {
    /// Experiment configuration file (JSON); omit for the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Proceed even when the output directory holds artifacts of a
    /// different configuration.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every embedding split for the configured model roster.
    SynthGen,
    /// Train the configured transform variant on the train split.
    TrainTransform,
    /// Apply the stored transform to the stored gallery sets and fuse them.
    Fuse,
    /// Evaluate stored artifacts and write a report.
    Eval {
        /// Report name (output file stem).
        #[arg(long, default_value = "eval")]
        name: String,
        /// Fused gallery file; defaults to the pipeline's fused artifact.
        #[arg(long)]
        fused: Option<PathBuf>,
        /// Mated probe embedding file.
        #[arg(long)]
        mated: Option<PathBuf>,
        /// Nonmated probe embedding file.
        #[arg(long)]
        nonmated: Option<PathBuf>,
        /// Transform whose query net maps probes before search.
        #[arg(long)]
        transform: Option<PathBuf>,
        /// Where to write the report; defaults to <out>/reports.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Run a named scenario end to end and store its result.
    Scenario {
        /// One of: ensemble_size, diversity, fusion_variants,
        /// risk_coverage, model_update.
        name: String,
    },
    /// Summarize every stored scenario result.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> cmce_core::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::invalid_config(format!("--threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    let out = cli.out.clone().or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
        Error::invalid_config("no output directory: pass --out or set out_dir in the config")
    })?;
    let ws = Workspace::prepare(&out, cfg, cli.force)?;

    match cli.command {
        Command::SynthGen => {
            let counter = pipeline::cmd_synth_gen(&ws)?;
            println!(
                "generated {} embeddings across {} sets under {}",
                counter.total(),
                ws.cfg.models.len() * 4,
                ws.root().join("embeddings").display()
            );
        }
        Command::TrainTransform => {
            let path = pipeline::cmd_train_transform(&ws)?;
            println!("trained {} transform -> {}", ws.cfg.variant.name(), path.display());
        }
        Command::Fuse => {
            let path = pipeline::cmd_fuse(&ws)?;
            println!("fused gallery -> {}", path.display());
        }
        Command::Eval {
            name,
            fused,
            mated,
            nonmated,
            transform,
            report_dir,
        } => {
            let defaults = pipeline::default_eval_paths(&ws);
            let paths = pipeline::EvalPaths {
                fused: fused.unwrap_or(defaults.fused),
                mated: mated.unwrap_or(defaults.mated),
                nonmated: nonmated.unwrap_or(defaults.nonmated),
                transform: transform.or(defaults.transform),
            };
            let dir = match report_dir {
                Some(d) => d,
                None => ws.reports_dir()?,
            };
            let metrics = pipeline::eval_files(&ws, &paths, &dir, &name)?;
            for (far, tar, achieved) in &metrics.tar_by_far {
                println!("tar @ far {far}: {tar:.6} (achieved far {achieved:.6})");
            }
            println!("recall@1: {:.6}", metrics.recall_at_1);
            for point in metrics.risk_tar.iter().chain(&metrics.risk_recall) {
                println!(
                    "risk ({}) coverage {}: {:.6}",
                    point.policy, point.coverage, point.metric_value
                );
            }
            println!("report -> {}", dir.join(format!("{name}.report.json")).display());
        }
        Command::Scenario { name } => {
            let scenario: ScenarioName = name.parse()?;
            let result = scenario::run_scenario(&ws, scenario)?;
            println!(
                "scenario {}: {} arms x {} replicates",
                result.scenario,
                result.arms.len(),
                ws.cfg.world_seeds
            );
            for arm in &result.arms {
                let means: Vec<String> = arm
                    .means
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.6}"))
                    .collect();
                println!("  {:<18} {}", arm.arm, means.join("  "));
            }
            println!("result -> {}", scenario::result_path(&ws, scenario).display());
        }
        Command::Report => {
            let collected = summary::collect(&ws)?;
            print!("{}", summary::render_text(&collected));
            let path = summary::write_summary(&ws, &collected)?;
            println!("summary -> {}", path.display());
        }
    }
    Ok(())
}
