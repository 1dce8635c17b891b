//! `disc`: generate synthetic scenes, run the completion pipeline on them,
//! score multi-scene evaluations, and run the built-in sanity checks.
//!
//! Exit codes: 0 success, 2 configuration problems, 3 a non-finite value
//! inside the pipeline, 1 anything else (including self-check failures).

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use disc_core::config::{Mode, PipelineConfig};
use disc_core::metrics::{CategoryPartition, ConfusionAccumulator};
use disc_core::nn::seeded_rng;
use disc_core::pipeline::{
    compute_losses, evaluate_scenes, run_forward, EvalOptions, ModelWeights,
};
use disc_core::scene::{generate_scene, SyntheticScene};
use disc_core::{DiscError, Result};

#[derive(Parser)]
#[command(name = "disc", version, about = "Semantic scene completion on synthetic desk-scale worlds")]
struct Cli {
    /// Override the configured run seed (weight initialization and
    /// train-time stochasticity).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured mode: `inference` or `train-step`.
    #[arg(long, global = true)]
    mode: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and write its label grid.
    Gen {
        /// Scene seed; the same seed always yields the same world.
        #[arg(long)]
        seed: u64,
        /// Configuration file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path for the label grid.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the forward pass on a generated scene and write the prediction.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed of the scene to synthesize and complete.
        #[arg(long)]
        scene: u64,
        /// Output path for the predicted label grid.
        #[arg(long)]
        out: PathBuf,
        /// Directory receiving one tensor file per pipeline stage.
        #[arg(long, value_name = "DIR")]
        dump_intermediates: Option<PathBuf>,
    },
    /// Score the model across a run of generated scenes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of scenes (seeds run seed .. seed + N - 1).
        #[arg(long)]
        scenes: usize,
        /// Optional file receiving the same report printed to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                DiscError::Config(_) => 2,
                DiscError::NonFinite(_) => 3,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>, mode: Option<&str>) -> Result<PipelineConfig> {
    let mut config = match path {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(mode) = mode {
        config.mode = Mode::parse(mode)?;
    }
    Ok(config)
}

fn synthesize(config: &PipelineConfig, seed: u64) -> Result<SyntheticScene> {
    generate_scene(
        seed,
        &config.volume,
        config.num_classes,
        config.camera.build_rig()?,
        &config.scene,
    )
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { seed, config, out } => {
            let config = load_config(config.as_deref(), cli.seed, cli.mode.as_deref())?;
            let scene = synthesize(&config, seed)?;
            let mut file = File::create(&out)?;
            scene.gt.write_binary(&mut file)?;
            let dims = scene.gt.dims();
            let occupied =
                scene.gt.labels().iter().filter(|&&l| l != 0 && l != 255).count();
            println!("scene={seed}");
            println!("dims={}x{}x{}", dims[0], dims[1], dims[2]);
            println!("classes={}", scene.gt.num_classes());
            println!("occupied={occupied}");
            Ok(0)
        }
        Command::Run { config, scene, out, dump_intermediates } => {
            let config = load_config(config.as_deref(), cli.seed, cli.mode.as_deref())?;
            let world = synthesize(&config, scene)?;
            let mut rng = seeded_rng(config.seed);
            let weights = ModelWeights::init(&config, &mut rng)?;
            let output = run_forward(&config, &world, &weights)?;

            let mut file = File::create(&out)?;
            output.pred.write_binary(&mut file)?;
            if let Some(dir) = dump_intermediates {
                std::fs::create_dir_all(&dir)?;
                for (stage, tensor) in &output.intermediates {
                    let mut file = File::create(dir.join(format!("{stage}.tens1")))?;
                    tensor.write_binary(&mut file)?;
                }
            }

            println!("seed={}", config.seed);
            println!("scene={scene}");
            println!("mode={}", config.mode.as_str());
            let partition = CategoryPartition::desk(config.num_classes)?;
            let mut accumulator =
                ConfusionAccumulator::new(config.num_classes, partition.free_id)?;
            accumulator.accumulate(&output.pred, &world.gt)?;
            print!("{}", accumulator.finalize(&partition)?.render());
            if config.mode == Mode::TrainStep {
                let (_, report) = compute_losses(&config, &world, &output)?;
                print!("{}", report.render());
            }
            Ok(0)
        }
        Command::Eval { config, scenes, report } => {
            let config = load_config(config.as_deref(), cli.seed, cli.mode.as_deref())?;
            let mut rng = seeded_rng(config.seed);
            let weights = ModelWeights::init(&config, &mut rng)?;
            let outcome =
                evaluate_scenes(&config, &weights, config.seed, scenes, EvalOptions::default())?;

            let mut text = String::new();
            text.push_str(&format!("scenes={scenes}\n"));
            text.push_str(&format!("mode={}\n", config.mode.as_str()));
            text.push_str(&outcome.metrics.render());
            if !outcome.losses.is_empty() {
                let mut mean = 0.0;
                for (offset, loss) in outcome.losses.iter().enumerate() {
                    let total = loss.get("total").unwrap_or(f64::NAN);
                    let seed = config.seed.wrapping_add(offset as u64);
                    text.push_str(&format!("loss.scene{seed}.total={total}\n"));
                    mean += total;
                }
                mean /= outcome.losses.len() as f64;
                text.push_str(&format!("loss.mean_total={mean}\n"));
            }
            print!("{text}");
            if let Some(path) = report {
                std::fs::write(path, text)?;
            }
            Ok(0)
        }
        Command::Selftest => {
            let mut failures = 0usize;
            let outcomes = disc_core::selftest::run_all();
            let total = outcomes.len();
            for (name, outcome) in outcomes {
                match outcome {
                    Ok(()) => println!("[ok] {name}"),
                    Err(msg) => {
                        failures += 1;
                        println!("[FAIL] {name}: {msg}");
                    }
                }
            }
            println!("passed {}/{total} checks", total - failures);
            Ok(if failures == 0 { 0 } else { 1 })
        }
    }
}
