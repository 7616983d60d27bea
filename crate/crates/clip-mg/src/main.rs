//! Command-line surface: dataset generation, training, evaluation, the
//! ablation runner, gradient checks, heatmap rasterization, and fusion
//! state dumps.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use clip_mg::error::Error;
use clip_mg::fusion::GateMode;
use clip_mg::harness::{evaluate, gradcheck_suite, run_ablation, train, ExperimentConfig, Profile};
use clip_mg::model::{infer, ClipMgModel, Variant};
use clip_mg::pose::{parse_pose_file, rasterize, sample_pose_frames};
use clip_mg::synth::{generate_clip, load_dataset, write_dataset, ClipSource, Split};
use clip_mg::Result;

#[derive(Parser)]
#[command(
    name = "clip-mg",
    about = "Pose-guided micro-gesture recognition: synthetic benchmark, training, and ablations",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Options shared by most subcommands; flags override the config file.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Experiment config JSON (partial files are filled with defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// full | no_pose_branch | no_pose_guidance | no_cross_attention | no_gated_fusion
    #[arg(long)]
    variant: Option<String>,
    /// toy | paper-shape
    #[arg(long)]
    profile: Option<String>,
    /// literal | convex
    #[arg(long)]
    gate_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (when absent, clips are generated in memory).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl CommonArgs {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = &self.variant {
            cfg.variant = Variant::from_str(v)?;
        }
        if let Some(p) = &self.profile {
            cfg.profile = Profile::from_str(p)?;
            cfg.synth = cfg.profile.synth();
        }
        if let Some(g) = &self.gate_mode {
            cfg.gate_mode = GateMode::from_str(g)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &self.data {
            cfg.data_dir = Some(data.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn source(&self, cfg: &ExperimentConfig) -> Result<ClipSource> {
        match &cfg.data_dir {
            Some(dir) => load_dataset(dir),
            None => Ok(ClipSource::Generated(cfg.synth.clone())),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset to disk.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one model; writes metrics.csv and the best checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Top-1 accuracy of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train all five variants and write the ablation report.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the gradient-check battery; exit code 2 on failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rasterize a pose file into heatmap volumes (f32 binary + sidecar).
    Rasterize {
        /// Pose JSON file.
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        canvas: usize,
        #[arg(long, default_value_t = 2.5)]
        sigma: f64,
    },
    /// Run one clip through the model and dump fusion intermediates.
    DumpFusion {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained checkpoint; a freshly initialized model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Clip index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output base path (.json and .bin are appended).
        #[arg(long = "dump-fusion")]
        dump_fusion: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common } => {
            let cfg = common.experiment()?;
            let out = common
                .out
                .clone()
                .or_else(|| cfg.data_dir.clone())
                .unwrap_or_else(|| PathBuf::from("dataset"));
            write_dataset(&cfg.synth, &out)?;
            println!(
                "wrote {} train / {} test clips ({} classes) to {}",
                cfg.synth.train_size,
                cfg.synth.test_size,
                cfg.synth.classes,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { common } => {
            let cfg = common.experiment()?;
            let source = common.source(&cfg)?;
            let (model, result) = train(&cfg, &source, &cfg.out_dir)?;
            println!(
                "trained {} for {} epochs in {:.1}s; best val top1 {:.2}% (epoch {})",
                cfg.variant,
                cfg.epochs,
                result.wall_seconds,
                result.best_val_top1,
                result.best_epoch
            );
            if !source.is_empty(Split::Test) {
                let top1 = evaluate(&model, &source, Split::Test)?;
                println!("test top1 {top1:.2}%");
            }
            println!("metrics: {}", result.metrics_path.display());
            println!("checkpoint: {}", result.checkpoint_path.display());
            Ok(())
        }
        Cmd::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.experiment()?;
            let source = common.source(&cfg)?;
            let model = ClipMgModel::load(&checkpoint)?;
            let split = Split::from_str(&split)?;
            let top1 = evaluate(&model, &source, split)?;
            println!("{split:?} top1 {top1:.2}%");
            Ok(())
        }
        Cmd::Ablate { common } => {
            let cfg = common.experiment()?;
            let source = common.source(&cfg)?;
            let report = run_ablation(&cfg, &source, &cfg.out_dir)?;
            print!("{}", report.to_markdown());
            println!("report: {}", cfg.out_dir.join("ablation.json").display());
            Ok(())
        }
        Cmd::Gradcheck { seed } => {
            let started = std::time::Instant::now();
            let checks = gradcheck_suite(seed, false)?;
            let mut failed = 0;
            for c in &checks {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                println!(
                    "[{status}] {:40} max_rel_err {:.3e} (tolerance {:.0e})",
                    c.name, c.max_rel_err, c.tolerance
                );
                failed += (!c.passed()) as usize;
            }
            println!(
                "{} checks in {:.1}s",
                checks.len(),
                started.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
        Cmd::Rasterize {
            pose,
            out,
            canvas,
            sigma,
        } => {
            let file = parse_pose_file(&pose)?;
            if file.clamped > 0 {
                eprintln!(
                    "warning: clamped {} out-of-range joint coordinates",
                    file.clamped
                );
            }
            std::fs::create_dir_all(&out)?;
            for raw in &file.clips {
                let clip = sample_pose_frames(raw)?;
                let volume = rasterize(&clip, (canvas, canvas), sigma)?;
                volume.write_binary(&out.join(&raw.id))?;
                println!(
                    "{}: {:?} -> {}",
                    raw.id,
                    volume.shape(),
                    out.join(&raw.id).with_extension("bin").display()
                );
            }
            Ok(())
        }
        Cmd::DumpFusion {
            common,
            checkpoint,
            index,
            split,
            dump_fusion,
        } => {
            let cfg = common.experiment()?;
            let model = match checkpoint {
                Some(path) => ClipMgModel::load(&path)?,
                None => {
                    let classes = match &cfg.data_dir {
                        Some(dir) => load_dataset(dir)?.config().classes,
                        None => cfg.synth.classes,
                    };
                    ClipMgModel::new(cfg.model_config(classes), cfg.seed)?
                }
            };
            let split = Split::from_str(&split)?;
            let clip = match &cfg.data_dir {
                Some(dir) => load_dataset(dir)?.clip(split, index)?,
                None => {
                    let offset = match split {
                        Split::Train => 0,
                        Split::Test => cfg.synth.train_size,
                    };
                    generate_clip(&cfg.synth, offset + index)?
                }
            };
            let input = clip.to_input(cfg.synth.canvas, cfg.synth.channels);
            let (probs, state) = infer(&model, &input)?;
            let state = state.ok_or_else(|| {
                Error::contract(format!(
                    "variant {} has no fusion state to dump",
                    model.cfg.variant
                ))
            })?;
            if let Some(parent) = dump_fusion.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            state.write_dump(&dump_fusion)?;
            let pred = clip_mg::harness::train::argmax(&probs);
            println!(
                "clip {} (label {}): predicted class {pred}; dumped {} tokens to {}",
                clip.id,
                clip.label,
                state.n_tokens,
                dump_fusion.display()
            );
            Ok(())
        }
    }
}
