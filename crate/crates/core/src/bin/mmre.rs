use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use mmre::data::{generate_synthetic, DatasetBundle, Split, SyntheticSpec};
use mmre::experiments::{self, ExperimentConfig, Variant};
use mmre::gradcheck::{self, GradCheckConfig};
use mmre::metrics::{evaluate, write_predictions, Averaging};
use mmre::train::{train_to_dir, TrainConfig};
use mmre::{checkpoint, inspect, Error, Result};

/// Multimodal relation extraction.
#[derive(Parser)]
#[command(name = "mmre", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset directory.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model and saves the best-dev checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "macro")]
        macro_avg: bool,
        /// Also writes per-sample predictions as JSONL.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Full model plus the 13 ablation rows.
    Variants {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One row per input order.
    Orders {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One row per proportion of training samples that keep their images.
    ImageProp {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])]
        props: Vec<f64>,
    },
    /// Dumps the gates and prediction for one sample as JSON.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        id: String,
        /// Dataset directory holding the sample.
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient check at toy size.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown split {s:?}; expected train, dev or test")))
}

fn table_out(config: &ExperimentConfig, name: &str) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.tsv")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: SyntheticSpec = read_json(spec.as_deref())?;
            generate_synthetic(&spec)?.into_bundle().save_dir(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { config, data, out } => {
            let mut config: TrainConfig = read_json(config.as_deref())?;
            config.data_dir = Some(data.clone());
            let bundle = DatasetBundle::load_dir(&data)?;
            let outcome = train_to_dir(&config, &bundle, &out)?;
            let f1 = outcome.best_dev().map_or(f64::NAN, |r| r.f1);
            println!("best epoch {} dev f1 {f1:.4}; checkpoint in {}", outcome.best_epoch, out.display());
        }
        Command::Eval { ckpt, data, split, macro_avg, predictions } => {
            let loaded = checkpoint::load(&ckpt)?;
            let bundle = DatasetBundle::load_dir(&data)?;
            let averaging = if macro_avg { Averaging::Macro } else { Averaging::Micro };
            let (report, records) = evaluate(&loaded.model, bundle.split(parse_split(&split)?), averaging)?;
            if let Some(path) = predictions {
                write_predictions(&path, &records)?;
            }
            println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
        }
        Command::Variants { config } => {
            let config: ExperimentConfig = read_json(config.as_deref())?;
            let bundle = experiments::load_bundle(&config)?;
            let rows = experiments::run_variants(&config, &bundle, &Variant::ABLATIONS)?;
            experiments::emit_table(&rows, Some(&table_out(&config, "variants")))?;
        }
        Command::Orders { config } => {
            let config: ExperimentConfig = read_json(config.as_deref())?;
            let bundle = experiments::load_bundle(&config)?;
            let rows = experiments::run_orders(&config, &bundle)?;
            experiments::emit_table(&rows, Some(&table_out(&config, "orders")))?;
        }
        Command::ImageProp { config, props } => {
            let config: ExperimentConfig = read_json(config.as_deref())?;
            let bundle = experiments::load_bundle(&config)?;
            let rows = experiments::run_image_proportions(&config, &bundle, &props)?;
            experiments::emit_table(&rows, Some(&table_out(&config, "image_prop")))?;
        }
        Command::Inspect { ckpt, id, data } => {
            let loaded = checkpoint::load(&ckpt)?;
            let bundle = DatasetBundle::load_dir(&data)?;
            let all = Split::ALL.into_iter().flat_map(|s| bundle.split(s).samples.iter());
            let dump = inspect::inspect_by_id(&loaded.model, all, &id)?;
            println!("{}", serde_json::to_string_pretty(&dump).expect("inspections serialize"));
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck::run(&GradCheckConfig { seed, ..Default::default() })?;
            print!("{}", report.to_tsv());
            println!("max relative error {:.3e}; {:.1?}", report.max_rel_error(), report.runtime);
            if !report.passes(1e-5) {
                return Err(Error::InvalidInput("gradient check exceeded 1e-5".into()));
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("MMRE_THREADS").ok().and_then(|v| v.parse().ok()) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool is configured once");
    }
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
