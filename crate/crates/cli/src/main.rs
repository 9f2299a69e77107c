use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mstd_core::config::RunConfig;
use mstd_core::data::{self, DatasetBundle, SplitName, DATA_MAGIC};
use mstd_core::pipeline::{self, CompareOptions, StageSelect};
use mstd_core::zoo::ModalityModel;
use mstd_core::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "mstd", version, about = "Cross-modal distillation from a mixture of specialized teachers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the configured synthetic dataset into an MSTD-DATA file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training stages and write checkpoints plus metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// all, s1, s2 or s3
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An MSTD-DATA file or a run config.
        #[arg(long)]
        data: PathBuf,
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed of the split; use the training seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every method over several seeds and print a summary table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's report seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "no_kd,kd_mm,kd_cm,mst")]
        methods: String,
        /// Comma-separated target modalities; defaults to the config's target.
        #[arg(long)]
        targets: Option<String>,
        /// Defaults to the config's report output dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-epoch mean routing probabilities of a trained run.
    RouteStats {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mstd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Usage(format!("bad {what} `{p}`"))))
        .collect()
}

/// `path` is either a dataset file or a config describing one.
fn load_data(path: &Path, seed: u64) -> Result<DatasetBundle> {
    let head = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if head.starts_with(DATA_MAGIC) {
        data::split(data::decode_bundle(&head)?, (0.6, 0.2, 0.2), seed)
    } else {
        RunConfig::load(path)?.dataset(seed)
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let bundle = match (&cfg.data.synthetic, &cfg.data.path) {
                (Some(spec), _) => data::generate(spec)?,
                (None, Some(p)) => data::load_external(p)?,
                (None, None) => return Err(Error::Config("data needs `synthetic` or `path`".into())),
            };
            data::save_bundle(&out, &bundle)?;
            println!("wrote {} samples to {}", bundle.samples(), out.display());
        }
        Cmd::Train { config, stage, seed, out } => {
            let select: StageSelect = stage.parse()?;
            let cfg = RunConfig::load(&config)?;
            let data = cfg.dataset(seed)?;
            let art = pipeline::train(&cfg, &data, seed, &out, select, pipeline::threads_from_env())?;
            for p in &art.checkpoints {
                println!("checkpoint {}", p.display());
            }
            println!("metrics {}", art.metrics.display());
            if let Some(m) = art.test {
                println!("student test OA {:.4}", m.overall_accuracy);
            }
        }
        Cmd::Eval { checkpoint: ckpt, data, split, seed } => {
            let split: SplitName = split.parse()?;
            let model = ModalityModel::from_named(checkpoint::read(&ckpt)?)?;
            let bundle = load_data(&data, seed)?;
            let m = pipeline::evaluate(&model, &bundle, split)?;
            let mut v = serde_json::to_value(&m).expect("metrics serialize");
            v["split"] = split.to_string().into();
            println!("{v}");
        }
        Cmd::Compare { config, seeds, methods, targets, out } => {
            let methods = pipeline::parse_methods(&methods)?;
            let cfg = RunConfig::load(&config)?;
            let seeds = match seeds {
                Some(s) => list(&s, "seed")?,
                None => cfg.report.seeds.clone(),
            };
            let targets = match targets {
                Some(t) => list(&t, "target")?,
                None => Vec::new(),
            };
            let out = out
                .or_else(|| cfg.report.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("mstd-compare"));
            let opts = CompareOptions {
                seeds,
                methods,
                targets,
                threads: pipeline::threads_from_env(),
            };
            let report = pipeline::compare(&cfg, &opts, &out)?;
            print!("{}", pipeline::render(&report));
        }
        Cmd::RouteStats { run_dir } => {
            print!("{}", pipeline::route_stats(&run_dir)?.to_tsv());
        }
    }
    Ok(())
}
