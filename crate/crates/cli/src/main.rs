use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rgbx_core::data::{generate_synthetic, save_dataset, SyntheticSpec};
use rgbx_core::train::{
    evaluate, grid_table, load_data, run_ablation_grid, train, Checkpoint, GridSpec, RunOptions, TrainConfig,
};
use rgbx_core::{Error, ParamGroup, Result, Segmenter};

#[derive(Parser)]
#[command(name = "rgbx", version, about = "RGB-X scene parsing: train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset directory or `synthetic:<n>`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Feed zeros in place of the X modality.
        #[arg(long)]
        zero_x: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run an ablation grid and write results.csv / results.txt.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Count the trainable parameters of a configured model.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        by_group: bool,
    },
    /// Generate a synthetic RGB-X dataset on disk.
    GenSynthetic {
        /// Spec file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
            quiet,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let data = load_data(&cfg)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train(
                &cfg,
                &data,
                RunOptions {
                    out_dir: Some(out.clone()),
                    resume,
                    stop_after_epoch: None,
                    verbose: !quiet,
                },
            )?;
            print!("{}", outcome.final_metrics.to_text());
            println!(
                "{} steps in {:.1}s; checkpoints in {}",
                outcome.steps,
                outcome.wall.as_secs_f64(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            zero_x,
            json,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = ck.config()?;
            cfg.set("data.train", &data)?;
            cfg.data.val = None;
            let model = ck.model()?;
            let ds = load_data(&cfg)?;
            let (_, report) = evaluate(&model, ds.eval_set(), zero_x, cfg.batch_size.max(4), cfg.metrics)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Ablate { grid, out, quiet } => {
            let spec = GridSpec::load(&grid)?;
            let results = run_ablation_grid(&spec, Some(&out), !quiet)?;
            print!("{}", grid_table(&spec.title, &results));
            println!("results in {}", out.join("results.csv").display());
        }
        Command::Params { config, by_group } => {
            let cfg = load_config(config.as_deref())?;
            let model = Segmenter::new(&cfg.model, cfg.seed)?;
            if by_group {
                for g in ParamGroup::ALL {
                    println!("{:<10} {}", g.name(), model.count_parameters(Some(g)));
                }
            }
            println!("{:<10} {}", "total", model.count_parameters(None));
        }
        Command::GenSynthetic { spec, n, seed, out } => {
            let spec = match spec {
                Some(p) => SyntheticSpec::parse(&read(&p)?)?,
                None => SyntheticSpec::default(),
            };
            let (ds, truth) = generate_synthetic(&spec, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
            save_dataset(&ds, &out)?;
            let gt = out.join("ground_truth.json");
            fs::write(&gt, truth.to_json()).map_err(|source| Error::Io { path: gt, source })?;
            println!(
                "{n} samples ({} classes, joint class {}) in {}",
                truth.num_classes,
                truth.joint_class,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
