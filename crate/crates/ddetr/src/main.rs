//! Command-line harness: dataset generation, training, evaluation, the
//! complexity benchmark, and a gradient self-check.

use clap::{Parser, Subcommand};
use ddetr::config::RunConfig;
use ddetr::param::ParamStore;
use ddetr::transformer::{AttnKind, Mode, Model};
use ddetr::{data, train, DdError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ddetr", about = "Desk-scale deformable-attention detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Gen {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        max_objects: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// plain | refine | two_stage
        #[arg(long)]
        mode: Option<String>,
        /// deformable | dense
        #[arg(long)]
        attn: Option<String>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model config; defaults to model.json beside the checkpoint.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Write predictions as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Measure operator cost scaling and compare with the analytic model.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference spot check of the attention gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, DdError> {
    match s {
        "plain" => Ok(Mode::Plain),
        "refine" => Ok(Mode::Refine),
        "two_stage" => Ok(Mode::TwoStage),
        other => Err(DdError::Config(format!(
            "unknown mode {other:?} (expected plain | refine | two_stage)"
        ))),
    }
}

fn parse_attn(s: &str) -> Result<AttnKind, DdError> {
    match s {
        "deformable" => Ok(AttnKind::Deformable),
        "dense" => Ok(AttnKind::Dense),
        other => Err(DdError::Config(format!(
            "unknown attention kind {other:?} (expected deformable | dense)"
        ))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, DdError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run() -> Result<(), DdError> {
    match Cli::parse().command {
        Command::Gen {
            out_dir,
            config,
            n_images,
            image_size,
            max_objects,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = n_images {
                cfg.data.n_images = v;
            }
            if let Some(v) = image_size {
                cfg.data.image_size = v;
            }
            if let Some(v) = max_objects {
                cfg.data.max_objects = v;
            }
            if let Some(v) = seed {
                cfg.data.seed = v;
            }
            cfg.validate()?;
            let ds = data::generate(&cfg.data);
            data::save(&ds, &cfg.data, &out_dir)?;
            let n_objects: usize = ds.labels.iter().map(|l| l.len()).sum();
            println!(
                "wrote {} images ({} objects) to {}",
                ds.len(),
                n_objects,
                out_dir.display()
            );
        }
        Command::Train {
            data: data_dir,
            out_dir,
            config,
            epochs,
            batch_size,
            lr,
            seed,
            mode,
            attn,
            resume,
            quiet,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(m) = mode {
                cfg.model.mode = parse_mode(&m)?;
            }
            if let Some(a) = attn {
                cfg.model.attn = parse_attn(&a)?;
            }
            let ds = data::load(&data_dir)?;
            cfg.data.image_size = ds.image_size;
            cfg.data.n_images = ds.len();
            cfg.validate()?;

            std::fs::create_dir_all(&out_dir)?;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let model = Model::new(&mut store, &mut rng, &cfg.model)?;
            if let Some(ckpt) = resume {
                store.load(&ckpt)?;
            }

            let report = train::train_model(&mut store, &model, &ds, &cfg.train, |m| {
                if !quiet {
                    println!(
                        "epoch {:3} step {:5} loss {:.4} (cls {:.4} l1 {:.4} giou {:.4}) |g| {:.3e} {:.0}ms",
                        m.epoch, m.step, m.loss, m.class, m.l1, m.giou, m.grad_norm, m.wall_ms
                    );
                }
            })?;

            store.save(&out_dir.join("model.ckpt"))?;
            std::fs::write(
                out_dir.join("model.json"),
                serde_json::to_string_pretty(&cfg.model)?,
            )?;
            train::write_metrics(&out_dir.join("metrics.jsonl"), &report.metrics)?;
            train::export_curves(&out_dir.join("curves.csv"), &report.metrics)?;
            let summary = train::evaluate(&model, &store, &ds, 10)?;
            std::fs::write(
                out_dir.join("train_eval.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!(
                "final loss {:.4}; train-set AP50 {:.3} mAP {:.3}; artifacts in {}",
                report.final_loss,
                summary.ap50,
                summary.map,
                out_dir.display()
            );
        }
        Command::Eval {
            data: data_dir,
            checkpoint,
            model_config,
            predictions,
            top_k,
        } => {
            let cfg_path = model_config
                .unwrap_or_else(|| checkpoint.parent().unwrap_or(&checkpoint).join("model.json"));
            let mcfg: ddetr::transformer::ModelConfig =
                serde_json::from_str(&std::fs::read_to_string(&cfg_path)?)?;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let model = Model::new(&mut store, &mut rng, &mcfg)?;
            store.load(&checkpoint)?;
            let ds = data::load(&data_dir)?;

            if let Some(pred_path) = &predictions {
                let mut all = Vec::new();
                for (i, img) in ds.images.iter().enumerate() {
                    all.extend(train::predict(&model, &store, img, ds.image_size, i, top_k)?);
                }
                ddetr::eval::write_jsonl(pred_path, &all)?;
            }
            let summary = train::evaluate(&model, &store, &ds, top_k)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Bench { out } => {
            let report = ddetr::bench::run_bench(&ddetr::bench::BenchConfig::default())?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, &text)?;
                    println!(
                        "exponents: deform {:.3}, dense {:.3}, fixed-query {:.3} -> {}",
                        report.exponent_deform_encoder,
                        report.exponent_dense_encoder,
                        report.exponent_deform_decoder,
                        p.display()
                    );
                }
                None => println!("{text}"),
            }
        }
        Command::Gradcheck { seed } => {
            let report = ddetr::gradcheck_attention(seed)?;
            println!(
                "checked {} partials: max abs err {:.3e}, max rel err {:.3e}",
                report.n_checked, report.max_abs_err, report.max_rel_err
            );
            if !report.passes(1e-4) {
                return Err(DdError::Diverged("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
