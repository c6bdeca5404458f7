//! Command-line front end: scene synthesis, training, inference, evaluation
//! and diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use masktx::config::Config;
use masktx::dataset::{self, colorize, image_tensor, read_classes, read_manifest, read_panoptic, write_classes, write_manifest, write_panoptic, Dataset};
use masktx::gradsuite::{run_all, run_suite, Suite, DEFAULT_INSTANCES};
use masktx::inference::{panoptic_inference, Thresholds};
use masktx::pnm::{read_ppm, write_ppm};
use masktx::pq::PqAccumulator;
use masktx::slots::SlotStats;
use masktx::train::{Run, Trainer, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "masktx", version, about = "Mask-transformer panoptic segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: u64,
        /// Index of the first scene; use disjoint ranges for splits.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Train a model on a scene directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation scenes, evaluated every `train.eval_every` steps.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many steps.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Predict panoptic maps for one image or a scene directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PPM file or a directory with a manifest.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV report destination.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        /// One of tensor, transformer, losses, model; all when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-slot firing counts and mean masks of a prediction directory.
    SlotStats {
        #[arg(long)]
        pred: PathBuf,
        /// Also write slot_stats.csv and mean-mask PGMs here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Slot count; defaults to the largest segment id seen.
        #[arg(long)]
        slots: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { config, out, count, start } => {
            let cfg = Config::load(&config)?;
            let stems = dataset::synthesize(&cfg.scene, &out, start, count)?;
            println!("wrote {} scenes to {}", stems.len(), out.display());
        }
        Command::Train { config, data, out, val, resume, log_every } => train(&config, &data, &out, val, resume, log_every)?,
        Command::Infer { checkpoint, image, out } => infer(&checkpoint, &image, &out)?,
        Command::Eval { pred, gt, report } => eval(&pred, &gt, &report)?,
        Command::Gradcheck { module, instances, seed } => {
            let results = match module {
                Some(name) => {
                    let suite = Suite::parse(&name).with_context(|| {
                        format!("unknown module `{name}` (expected tensor, transformer, losses or model)")
                    })?;
                    run_suite(suite, instances, seed)?
                }
                None => run_all(instances, seed)?,
            };
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passes();
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::SlotStats { pred, out, slots } => {
            let stats = SlotStats::from_dir(&pred, slots)?;
            let csv = stats.to_csv();
            print!("{csv}");
            if let Some(dir) = out {
                stats.write_mean_masks(&dir)?;
                let path = dir.join("slot_stats.csv");
                std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train(config: &Path, data: &Path, out: &Path, val: Option<PathBuf>, resume: Option<PathBuf>, log_every: usize) -> Result<()> {
    let cfg = Config::load(config)?;
    let train_set = Dataset::load(data)?;
    if train_set.vocab != cfg.scene.vocabulary() {
        bail!("classes in {} do not match the configured scene classes", data.display());
    }
    let val_set = val.as_deref().map(Dataset::load).transpose()?;
    let trainer = match resume {
        Some(path) => {
            let mut t = Trainer::load(&path)?;
            if t.cfg.model != cfg.model || t.cfg.scene.vocabulary() != cfg.scene.vocabulary() {
                bail!("checkpoint {} was trained with a different model configuration", path.display());
            }
            t.cfg = cfg;
            t.model.cfg = t.cfg.resolved_model();
            t
        }
        None => Trainer::new(cfg)?,
    };
    let start = Instant::now();
    let total = trainer.cfg.train.steps;
    let mut run = Run { trainer, train: &train_set, val: val_set.as_ref(), out: Some(out.to_path_buf()) };
    run.run(|r, pq| {
        if log_every > 0 && (r.step % log_every == 0 || r.step == total) {
            eprintln!("[{:>7.1}s] step {}/{} lr {:.3e} {}", start.elapsed().as_secs_f64(), r.step, total, r.lr, r.values);
        }
        if let Some(p) = pq {
            eprintln!("step {} val PQ {:.4} (things {:.4}, stuff {:.4})", r.step, p.all.pq, p.things.pq, p.stuff.pq);
        }
    })?;
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn infer(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = masktx::train::load_model(checkpoint)?;
    let vocab = cfg.scene.vocabulary();
    let inputs: Vec<(String, PathBuf)> = if image.is_dir() {
        read_manifest(image)?.into_iter().map(|s| (s.clone(), image.join(format!("{s}.ppm")))).collect()
    } else {
        let stem = image.file_stem().and_then(|s| s.to_str()).context("image path has no file name")?.to_string();
        vec![(stem, image.to_path_buf())]
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let t = Thresholds::default();
    for (stem, path) in &inputs {
        let img = read_ppm(path)?;
        if (img.height, img.width) != (model.cfg.height, model.cfg.width) {
            bail!("{}: image is {}x{}, model expects {}x{}", path.display(), img.height, img.width, model.cfg.height, model.cfg.width);
        }
        let pred = model.predict(&image_tensor(&img))?;
        let map = panoptic_inference(&pred.masks, &pred.probs, img.height, img.width, &vocab, &t)?;
        write_panoptic(out, stem, &map, &vocab)?;
        write_ppm(&out.join(format!("{stem}.color.ppm")), &colorize(&map, &vocab))?;
    }
    let entries: Vec<(String, Option<u64>)> = inputs.into_iter().map(|(s, _)| (s, None)).collect();
    write_manifest(out, &entries)?;
    write_classes(out, &vocab)?;
    println!("wrote {} predictions to {}", entries.len(), out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, report: &Path) -> Result<()> {
    let vocab = read_classes(gt)?;
    let pred_vocab = read_classes(pred)?;
    if pred_vocab != vocab {
        bail!("class lists of {} and {} differ", pred.display(), gt.display());
    }
    let mut acc = PqAccumulator::new(vocab.clone());
    for stem in read_manifest(gt)? {
        let g = read_panoptic(gt, &stem, &vocab)?;
        let p = read_panoptic(pred, &stem, &vocab).with_context(|| format!("prediction for {stem}"))?;
        acc.add(&p, &g)?;
    }
    let r = acc.report();
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(report, r.to_csv()).with_context(|| format!("writing {}", report.display()))?;
    print!("{}", r.to_table());
    Ok(())
}
