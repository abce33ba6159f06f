use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cropmap::pipeline::{self, PipelineConfig};
use cropmap::synthetic::SyntheticConfig;
use cropmap::{Error, Result};

/// Cropland mapping pipeline driver.
#[derive(Debug, Parser)]
#[command(name = "cropmap", version, about)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cloud masking, weekly compositing and imputation.
    Preprocess,
    /// Rasterize the training and test label polygons onto every tile.
    RasterizeLabels,
    /// Feature matrices for every label set.
    Featurize,
    /// Spatial fold assignment of the training polygons.
    Folds,
    /// Grid search over the spatial folds and final model fit.
    Train,
    /// Per-region and weighted test metrics.
    Evaluate,
    /// Permutation feature importance.
    Importance,
    /// Cropland masks for every tile.
    Predict,
    /// Empirical semivariogram and spherical fit.
    Variogram,
    /// Per-class NDVI profiles.
    Profile,
    /// All stages in order.
    Run,
    /// Write a synthetic project (scenes, labels, truth, config) to DIR.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Add a second tile used as a test region.
        #[arg(long)]
        test_tile: bool,
        #[arg(long, default_value_t = 7)]
        synth_seed: u64,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth {
        dir,
        size,
        test_tile,
        synth_seed,
    } = &cli.command
    {
        let synth = SyntheticConfig {
            size: *size,
            seed: *synth_seed,
            ..Default::default()
        };
        pipeline::write_synthetic_project(dir, &synth, *test_tile)?;
        println!("{}", dir.join("config.json").display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Preprocess => pipeline::cmd_preprocess(&cfg),
        Command::RasterizeLabels => pipeline::cmd_rasterize_labels(&cfg),
        Command::Featurize => pipeline::cmd_featurize(&cfg),
        Command::Folds => pipeline::cmd_folds(&cfg),
        Command::Train => {
            let s = pipeline::cmd_train(&cfg)?;
            println!("{}", s.selected.echo());
            println!(
                "cv accuracy={:.4} precision={:.4} recall={:.4} f1={:.4}",
                s.cv_mean.accuracy, s.cv_mean.precision, s.cv_mean.recall, s.cv_mean.f1
            );
            Ok(())
        }
        Command::Evaluate => {
            let r = pipeline::cmd_evaluate(&cfg)?;
            print!("{}", String::from_utf8_lossy(&r.to_csv()?));
            Ok(())
        }
        Command::Importance => {
            let t = pipeline::cmd_importance(&cfg)?;
            print!(
                "{}",
                String::from_utf8_lossy(&t.to_csv(Some(cfg.evaluation.importance_threshold))?)
            );
            Ok(())
        }
        Command::Predict => pipeline::cmd_predict(&cfg),
        Command::Variogram => {
            let vg = pipeline::cmd_variogram(&cfg)?;
            println!("{}", vg.sidecar_json());
            Ok(())
        }
        Command::Profile => pipeline::cmd_profile(&cfg),
        Command::Run => pipeline::run_all(&cfg),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cropmap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
