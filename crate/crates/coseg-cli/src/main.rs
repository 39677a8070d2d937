//! Command-line interface: dataset generation, training, evaluation, pair
//! and group co-segmentation, benchmarking, gradient checking, attention
//! export.
//!
//! Progress and diagnostics go to stderr; reports and data go to files or
//! stdout. Errors exit nonzero with a single `error: ...` line on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coseg_core::checkpoint;
use coseg_core::data::{self, metrics, pnm, SyntheticConfig};
use coseg_core::error::{CosegError, Result};
use coseg_core::gradcheck;
use coseg_core::group::{self, GroupMode};
use coseg_core::model::{
    evaluate, mean_jaccard, predict_pairs, train, CosegModel, ModelConfig, TrainOptions, Variant,
};
use coseg_core::{Element, Tensor};

#[derive(Parser)]
#[command(
    name = "coseg",
    about = "Attention-based object co-segmentation: train, evaluate, and run instant group co-segmentation on synthetic shape data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Architecture config file (key=value lines); defaults to the desk model
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attention variant
    #[arg(long, value_parser = ["ca", "fca", "csa"])]
    variant: Option<String>,
    /// Float width for model numerics
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32))]
    precision: u32,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::from_kv(&fs::read_to_string(path)?)?,
            None => ModelConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.variant = Variant::from_name(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic co-segmentation dataset on disk
    GenData {
        /// Output dataset root
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        #[arg(long, default_value_t = 400)]
        train_pairs: usize,
        #[arg(long, default_value_t = 40)]
        val_pairs: usize,
        #[arg(long, default_value_t = 10)]
        test_pairs_per_class: usize,
        /// Class held out of train/val (still tested); pass "none" to disable
        #[arg(long, default_value = "ring")]
        holdout: String,
    },
    /// Train a model on a generated dataset and write a checkpoint
    Train {
        /// Dataset root (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch_pairs: usize,
        /// Adam learning rate for this run
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Stop early once validation jaccard reaches this value
        #[arg(long, default_value_t = 0.9)]
        target_val_jaccard: f64,
    },
    /// Evaluate a checkpoint on a dataset split and print a metric report
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to evaluate
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32))]
        precision: u32,
    },
    /// Co-segment two images and write both masks
    CosegPair {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for a_mask.pgm / b_mask.pgm
        #[arg(long)]
        out: PathBuf,
        image_a: PathBuf,
        image_b: PathBuf,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32))]
        precision: u32,
    },
    /// Instant group co-segmentation over every image in a directory
    CosegGroup {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of .ppm/.pgm images forming one group
        #[arg(long)]
        dir: PathBuf,
        /// Output directory for masks and the attention export
        #[arg(long)]
        out: PathBuf,
        /// Group attention reduction
        #[arg(long, default_value = "average", value_parser = ["average", "minimum"])]
        mode: String,
        /// Re-encode during segmentation instead of reusing cached features
        #[arg(long, default_value_t = false)]
        no_cache: bool,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32))]
        precision: u32,
    },
    /// Compare instant vs pairwise invocation counts and wall-clock
    Benchmark {
        /// Group sizes, comma-separated
        #[arg(long, default_value = "2,4,8,16")]
        n: String,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Write one attention vector per image in a directory
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        /// Output text file (label, then comma-separated values per line)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32))]
        precision: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

fn check_precision(precision: u32) -> Result<()> {
    if precision != 32 && precision != 64 {
        return Err(CosegError::Config(format!(
            "precision must be 32 or 64, got {}",
            precision
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            canvas,
            train_pairs,
            val_pairs,
            test_pairs_per_class,
            holdout,
        } => {
            let holdout = match holdout.as_str() {
                "none" => None,
                name => Some(data::ShapeClass::from_name(name)?),
            };
            let cfg = SyntheticConfig {
                canvas,
                seed,
                train_pairs,
                val_pairs,
                test_pairs_per_class,
                holdout,
                ..SyntheticConfig::default()
            };
            let set = data::gen_synthetic_pairset(&cfg)?;
            data::write_dataset(&out, &set)?;
            eprintln!(
                "wrote {} train, {} val, {} test pairs to {}",
                set.train.len(),
                set.val.len(),
                set.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data: data_root,
            checkpoint: ckpt_path,
            model,
            seed,
            epochs,
            batch_pairs,
            lr,
            target_val_jaccard,
        } => {
            check_precision(model.precision)?;
            let cfg = model.config()?;
            let set = data::load_dataset(&data_root)?;
            let opts = TrainOptions {
                epochs,
                batch_pairs,
                lr,
                seed,
                target_val_jaccard: Some(target_val_jaccard),
                verbose: true,
            };
            if model.precision == 32 {
                let mut m = CosegModel::<f32>::init(cfg, seed)?;
                let report = train(&mut m, &set.train, &set.val, &opts)?;
                eprintln!(
                    "trained {} epochs ({} steps), val jaccard {:.4}",
                    report.epochs_run, report.steps, report.val_jaccard
                );
                checkpoint::save(&m, None, &ckpt_path)?;
            } else {
                let mut m = CosegModel::<f64>::init(cfg, seed)?;
                let report = train(&mut m, &set.train, &set.val, &opts)?;
                eprintln!(
                    "trained {} epochs ({} steps), val jaccard {:.4}",
                    report.epochs_run, report.steps, report.val_jaccard
                );
                checkpoint::save(&m, None, &ckpt_path)?;
            }
            eprintln!("checkpoint written to {}", ckpt_path.display());
            Ok(())
        }
        Command::Eval {
            data: data_root,
            checkpoint: ckpt_path,
            split,
            out,
            precision,
        } => {
            check_precision(precision)?;
            let set = data::load_dataset(&data_root)?;
            let pairs = match split.as_str() {
                "train" => &set.train,
                "val" => &set.val,
                _ => &set.test,
            };
            let report = if precision == 32 {
                let (mut m, _) = checkpoint::load::<f32>(&ckpt_path)?;
                let rows = evaluate(&mut m, pairs, 8)?;
                eprintln!("mean jaccard {:.4}", mean_jaccard(&rows));
                metrics::format_report(&rows)
            } else {
                let (mut m, _) = checkpoint::load::<f64>(&ckpt_path)?;
                let rows = evaluate(&mut m, pairs, 8)?;
                eprintln!("mean jaccard {:.4}", mean_jaccard(&rows));
                metrics::format_report(&rows)
            };
            match out {
                Some(path) => fs::write(path, report)?,
                None => print!("{}", report),
            }
            Ok(())
        }
        Command::CosegPair {
            checkpoint: ckpt_path,
            out,
            image_a,
            image_b,
            precision,
        } => {
            check_precision(precision)?;
            if precision == 32 {
                coseg_pair_cmd::<f32>(&ckpt_path, &image_a, &image_b, &out)
            } else {
                coseg_pair_cmd::<f64>(&ckpt_path, &image_a, &image_b, &out)
            }
        }
        Command::CosegGroup {
            checkpoint: ckpt_path,
            dir,
            out,
            mode,
            no_cache,
            precision,
        } => {
            check_precision(precision)?;
            let mode = GroupMode::from_name(&mode)?;
            if precision == 32 {
                coseg_group_cmd::<f32>(&ckpt_path, &dir, &out, mode, !no_cache)
            } else {
                coseg_group_cmd::<f64>(&ckpt_path, &dir, &out, mode, !no_cache)
            }
        }
        Command::Benchmark {
            n,
            model,
            seed,
            out,
        } => {
            check_precision(model.precision)?;
            let sizes: Vec<usize> = n
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| CosegError::Config(format!("bad group size '{}'", v)))
                })
                .collect::<Result<_>>()?;
            let cfg = model.config()?;
            let report = if model.precision == 32 {
                benchmark_cmd::<f32>(cfg, seed, &sizes)?
            } else {
                benchmark_cmd::<f64>(cfg, seed, &sizes)?
            };
            match out {
                Some(path) => fs::write(path, report)?,
                None => print!("{}", report),
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let mut all_pass = true;
            for (reports, tol) in [
                (gradcheck::primitive_suite(seed)?, 1e-4),
                (gradcheck::pair_loss_suite(seed, 7)?, 1e-3),
            ] {
                for r in &reports {
                    let pass = r.passes(tol);
                    all_pass &= pass;
                    println!(
                        "gradcheck {:<40} max rel err {:>10.3e}  {}",
                        r.name,
                        r.max_rel_err,
                        if pass { "PASS" } else { "FAIL" }
                    );
                }
            }
            if !all_pass {
                return Err(CosegError::invalid("gradcheck", "one or more suites failed"));
            }
            Ok(())
        }
        Command::ExportAttention {
            checkpoint: ckpt_path,
            dir,
            out,
            precision,
        } => {
            check_precision(precision)?;
            if precision == 32 {
                export_attention_cmd::<f32>(&ckpt_path, &dir, &out)
            } else {
                export_attention_cmd::<f64>(&ckpt_path, &dir, &out)
            }
        }
    }
}

/// Sorted .ppm/.pgm files in a directory, loaded as image tensors.
fn load_image_dir<E: Element>(dir: &Path) -> Result<(Vec<String>, Vec<Tensor<E>>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CosegError::invalid(
            "load_image_dir",
            format!("no .ppm/.pgm images in {}", dir.display()),
        ));
    }
    let mut labels = Vec::with_capacity(paths.len());
    let mut tensors = Vec::with_capacity(paths.len());
    for p in paths {
        let img = pnm::load_image(&p)?;
        tensors.push(img.to_tensor::<E>());
        labels.push(p.display().to_string());
    }
    Ok((labels, tensors))
}

fn coseg_pair_cmd<E: Element>(
    ckpt: &Path,
    image_a: &Path,
    image_b: &Path,
    out: &Path,
) -> Result<()> {
    let (mut model, _) = checkpoint::load::<E>(ckpt)?;
    let a = pnm::load_image(image_a)?;
    let b = pnm::load_image(image_b)?;
    let pair = data::SamplePair {
        mask_a: data::Mask::empty(a.h, a.w),
        mask_b: data::Mask::empty(b.h, b.w),
        image_a: a,
        image_b: b,
        class: data::ShapeClass::Disk, // label unused for prediction
    };
    let (masks_a, masks_b) = predict_pairs(&mut model, &[&pair])?;
    fs::create_dir_all(out)?;
    pnm::save_mask(&masks_a[0], &out.join("a_mask.pgm"))?;
    pnm::save_mask(&masks_b[0], &out.join("b_mask.pgm"))?;
    eprintln!(
        "a: {} foreground px, b: {} foreground px",
        masks_a[0].foreground_count(),
        masks_b[0].foreground_count()
    );
    Ok(())
}

fn coseg_group_cmd<E: Element>(
    ckpt: &Path,
    dir: &Path,
    out: &Path,
    mode: GroupMode,
    cache: bool,
) -> Result<()> {
    let (mut model, _) = checkpoint::load::<E>(ckpt)?;
    let (labels, images) = load_image_dir::<E>(dir)?;
    let result = group::instant_group_coseg(&mut model, &images, mode, cache)?;
    fs::create_dir_all(out)?;
    for (label, mask) in labels.iter().zip(&result.masks) {
        let stem = Path::new(label)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        pnm::save_mask(mask, &out.join(format!("{}_mask.pgm", stem)))?;
    }
    fs::write(
        out.join("attention.csv"),
        group::format_attention_export(&labels, &result.attentions),
    )?;
    eprintln!(
        "{} images, mode {}, encoder calls {}, wall {:.1} ms",
        images.len(),
        mode.name(),
        result.counters.encoder,
        result.wall.as_secs_f64() * 1e3
    );
    Ok(())
}

fn benchmark_cmd<E: Element>(cfg: ModelConfig, seed: u64, sizes: &[usize]) -> Result<String> {
    let mut model = CosegModel::<E>::init(cfg.clone(), seed)?;
    let max_n = sizes.iter().copied().max().unwrap_or(0);
    let gen_cfg = SyntheticConfig {
        canvas: cfg.input_size,
        seed,
        ..SyntheticConfig::default()
    };
    let (images, _) = data::gen_group(&gen_cfg, data::ShapeClass::Disk, max_n, 0, seed)?;
    let tensors: Vec<Tensor<E>> = images.iter().map(|i| i.to_tensor()).collect();
    let rows = group::benchmark(&mut model, &tensors, sizes)?;
    Ok(group::format_bench_report(&rows))
}

fn export_attention_cmd<E: Element>(ckpt: &Path, dir: &Path, out: &Path) -> Result<()> {
    let (mut model, _) = checkpoint::load::<E>(ckpt)?;
    let (labels, images) = load_image_dir::<E>(dir)?;
    let mut counters = group::CallCounters::default();
    let mut attentions = Vec::with_capacity(images.len());
    for image in &images {
        let (alpha, _) = group::generate_attention(&mut model, image, &mut counters)?;
        attentions.push(alpha.iter().map(|v| v.as_f64()).collect::<Vec<f64>>());
    }
    fs::write(out, group::format_attention_export(&labels, &attentions))?;
    eprintln!("wrote {} attention vectors to {}", labels.len(), out.display());
    Ok(())
}
