//! Command-line entry point for the toolkit: architecture inspection,
//! dilation linting, desk-scale training/evaluation/inference, synthetic
//! data generation, and the ablation harness.
//!
//! Exit codes: 0 success, 1 validation/input error, 2 runtime failure.
//! `lint` also exits 1 when any disaster-severity finding is reported, so CI
//! can gate on the guidelines.

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsnet::backbone::{load_checkpoint, save_checkpoint, DSNetModel};
use dsnet::blocks::Phase;
use dsnet::config::ModelConfig;
use dsnet::data::{load_dataset, load_image, make_synthetic, save_mask};
use dsnet::error::{DsnetError, Result};
use dsnet::eval::{argmax_classes, evaluate};
use dsnet::plan::Mode;
use dsnet::rf::{analyze, lint_with_thresholds, LintThresholds};
use dsnet::tensor::Tensor;
use dsnet::train::{run_ablation, train, write_metrics_log, TrainConfig};
use ndarray::Array4;
use serde::Deserialize;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dsnet",
    version,
    about = "Dual-branch same-resolution segmentation networks with atrous-convolution linting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    power: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    /// Square crop size in pixels.
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 0.4)]
    scale_min: f64,
    #[arg(long, default_value_t = 1.6)]
    scale_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on raw samples without flip/rescale/crop.
    #[arg(long)]
    no_augment: bool,
}

impl TrainFlags {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            base_lr: self.lr,
            power: self.power,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            crop: (self.crop, self.crop),
            scale_range: (self.scale_min, self.scale_max),
            seed: self.seed,
            augment: !self.no_augment,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the context-branch receptive-field ledger and cost counts.
    Analyze {
        config: PathBuf,
        /// Input resolution as WxH (e.g. 2048x1024).
        #[arg(long, default_value = "2048x1024")]
        input_size: String,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Check the dilation guidelines; exits 1 on any disaster finding.
    Lint {
        config: PathBuf,
        #[arg(long, default_value_t = 224)]
        pretrain_size: usize,
        #[arg(long, default_value_t = 0.25)]
        warn_threshold: f64,
        #[arg(long, default_value_t = 0.40)]
        disaster_threshold: f64,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Train on a dataset directory; writes metrics.csv and model.ckpt.
    Train {
        config: PathBuf,
        data_root: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        checkpoint: PathBuf,
        data_root: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Segment one image and write the class-index mask.
    Infer {
        checkpoint: PathBuf,
        image: PathBuf,
        out_mask: PathBuf,
    },
    /// Generate a synthetic dataset of grid-aligned colored shapes.
    Synth {
        out_root: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        hw: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train config variants on identical data and compare mIoU.
    Ablate {
        base_config: PathBuf,
        variants_file: PathBuf,
        data_root: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Comma-separated list of seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Write a preset model config.
    Config {
        /// dsnet, dsnet_base, or toy.
        #[arg(long, default_value = "dsnet")]
        preset: String,
        #[arg(long, default_value_t = 19)]
        classes: usize,
        /// Output path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct VariantsFile {
    variants: Vec<VariantDef>,
}

#[derive(Deserialize)]
struct VariantDef {
    name: String,
    #[serde(default)]
    overrides: toml::Table,
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| DsnetError::Validation(format!("input size `{text}` is not WxH")))?;
    let w: usize = w
        .parse()
        .map_err(|_| DsnetError::Validation(format!("bad width in `{text}`")))?;
    let h: usize = h
        .parse()
        .map_err(|_| DsnetError::Validation(format!("bad height in `{text}`")))?;
    Ok((w, h))
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| DsnetError::Validation(format!("bad seed `{s}`")))
        })
        .collect()
}

fn check_device() -> Result<()> {
    if let Ok(device) = std::env::var("DSNET_DEVICE") {
        if !device.is_empty() && device != "cpu" {
            return Err(DsnetError::Validation(format!(
                "DSNET_DEVICE={device} is not available; this build is cpu-only"
            )));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    check_device()?;
    match cli.command {
        Command::Analyze {
            config,
            input_size,
            format,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let (w, h) = parse_size(&input_size)?;
            let report = analyze(&cfg, h, w)?;
            match format {
                Format::Table => print!("{}", report.render_text()),
                Format::Json => println!("{}", report.to_json()),
            }
            Ok(0)
        }
        Command::Lint {
            config,
            pretrain_size,
            warn_threshold,
            disaster_threshold,
            format,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let report = lint_with_thresholds(
                &cfg,
                pretrain_size,
                LintThresholds {
                    warn: warn_threshold,
                    disaster: disaster_threshold,
                },
            )?;
            match format {
                Format::Table => print!("{}", report.render_text()),
                Format::Json => println!("{}", report.to_json()),
            }
            Ok(if report.has_disaster() { 1 } else { 0 })
        }
        Command::Train {
            config,
            data_root,
            out_dir,
            flags,
        } => {
            let cfg = ModelConfig::load(&config)?;
            let dataset = load_dataset(&data_root, cfg.num_classes)?;
            let train_cfg = flags.to_config();
            std::fs::create_dir_all(&out_dir)?;
            let model = DSNetModel::build(&cfg, Mode::Segmentation, train_cfg.seed)?;
            let outcome = train(&model, &dataset, &train_cfg)?;
            write_metrics_log(&outcome.records, &out_dir.join("metrics.csv"))?;
            save_checkpoint(&model, &out_dir.join("model.ckpt"))?;
            println!(
                "trained {} iterations: final loss {:.5}, train pixel accuracy {:.4}",
                train_cfg.iterations, outcome.final_loss, outcome.train_pixel_accuracy
            );
            println!(
                "wrote {} and {}",
                out_dir.join("metrics.csv").display(),
                out_dir.join("model.ckpt").display()
            );
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data_root,
            format,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data_root, model.config().num_classes)?;
            let outcome = evaluate(&model, &dataset)?;
            match format {
                Format::Table => {
                    println!("miou           {:.4}", outcome.miou);
                    println!("pixel accuracy {:.4}", outcome.pixel_accuracy);
                    for (c, iou) in outcome.per_class_iou.iter().enumerate() {
                        match iou {
                            Some(v) => println!("class {c:<3} iou  {v:.4}"),
                            None => println!("class {c:<3} iou  (absent)"),
                        }
                    }
                }
                Format::Json => {
                    let per_class: Vec<Option<f64>> = outcome.per_class_iou.clone();
                    println!(
                        "{}",
                        serde_json::json!({
                            "miou": outcome.miou,
                            "pixel_accuracy": outcome.pixel_accuracy,
                            "per_class_iou": per_class,
                        })
                    );
                }
            }
            Ok(0)
        }
        Command::Infer {
            checkpoint,
            image,
            out_mask,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let img = load_image(&image)?;
            let (c, h, w) = img.dim();
            debug_assert_eq!(c, 3);
            let mut batch = Array4::<f64>::zeros((1, 3, h, w));
            batch.index_axis_mut(ndarray::Axis(0), 0).assign(&img);
            let logits = model.forward(&Tensor::constant(batch.into_dyn()), Phase::Eval)?;
            let mask = argmax_classes(&logits).remove(0);
            if let Some(parent) = out_mask.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_mask(&mask, &out_mask)?;
            println!("wrote {} ({}x{})", out_mask.display(), mask.dim().1, mask.dim().0);
            Ok(0)
        }
        Command::Synth {
            out_root,
            n,
            hw,
            classes,
            seed,
        } => {
            make_synthetic(&out_root, n, hw, classes, seed)?;
            println!("wrote {n} samples ({hw}x{hw}, {classes} classes) under {}", out_root.display());
            Ok(0)
        }
        Command::Ablate {
            base_config,
            variants_file,
            data_root,
            out_dir,
            seeds,
            flags,
        } => {
            let base = ModelConfig::load(&base_config)?;
            let text = std::fs::read_to_string(&variants_file).map_err(|e| {
                DsnetError::Data(format!("cannot read {}: {e}", variants_file.display()))
            })?;
            let defs: VariantsFile = toml::from_str(&text)
                .map_err(|e| DsnetError::Parse(format!("variants file: {e}")))?;
            if defs.variants.is_empty() {
                return Err(DsnetError::Validation("variants file lists no variants".into()));
            }
            let mut variants = Vec::new();
            for def in &defs.variants {
                variants.push((def.name.clone(), base.with_overrides(&def.overrides)?));
            }
            let dataset = load_dataset(&data_root, base.num_classes)?;
            let seeds = parse_seeds(&seeds)?;
            let table = run_ablation(&variants, &dataset, &flags.to_config(), &seeds)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("ablation.json"), table.to_json())?;
            print!("{}", table.render_text());
            println!("wrote {}", out_dir.join("ablation.json").display());
            Ok(0)
        }
        Command::Config {
            preset,
            classes,
            out,
        } => {
            let cfg = match preset.as_str() {
                "dsnet" => ModelConfig::dsnet(classes),
                "dsnet_base" => ModelConfig::dsnet_base(classes),
                "toy" => ModelConfig::toy(classes),
                other => {
                    return Err(DsnetError::Validation(format!(
                        "unknown preset `{other}` (expected dsnet, dsnet_base, or toy)"
                    )));
                }
            };
            match out {
                Some(path) => {
                    if let Some(parent) = path.parent() {
                        if !parent.as_os_str().is_empty() {
                            std::fs::create_dir_all(parent)?;
                        }
                    }
                    cfg.save(&path)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{}", cfg.to_toml()),
            }
            Ok(0)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
