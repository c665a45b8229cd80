//! Command-line front end: `generate`, `train`, `eval`, `export-attention`
//! and `config`, all driven by one TOML file plus `--set key=value`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::CasnModel;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, parse_file_name, scan_dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalMode, EvalReport, EvalSet};
use crate::export::{export_identification, export_pair, predict_class};
use crate::plot::LinePlot;
use crate::train::run_training;

#[derive(Debug, Parser)]
#[command(name = "casn", version, about = "Person re-identification with consistent attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.lr=0.01`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fused,
    FeatureOnly,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic re-id dataset into `data.root`
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides data.root)
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Train on `data.root`; outputs go to `train.output_dir`
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rank the gallery for every query and report CMC and mAP
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Distance mode (defaults to eval.mode)
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Keep only the first N gallery images
        #[arg(long)]
        max_gallery: Option<usize>,
        /// Output directory (default: <train.output_dir>/eval)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention maps and overlays for an image or an image pair
    ExportAttention {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single image: exports its identification attention
        #[arg(long, conflicts_with = "pair")]
        image: Option<PathBuf>,
        /// Raw identity for `--image` (default: from the file name, else the prediction)
        #[arg(long, requires = "image")]
        label: Option<u32>,
        /// Image pair: exports both Siamese attention maps and aligned profiles
        #[arg(long, num_args = 2, value_names = ["FIRST", "SECOND"])]
        pair: Option<Vec<PathBuf>>,
        /// Output directory (default: <train.output_dir>/attention)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML
    Config {
        #[command(flatten)]
        config: ConfigArgs,
        /// Start from the desk-scale synthetic settings
        #[arg(long)]
        synthetic: bool,
    },
}

/// Configuration for commands that read a checkpoint: an explicit file
/// wins, otherwise the configuration stored in the checkpoint.
fn checkpoint_config(args: &ConfigArgs, ckpt: &Checkpoint) -> Result<RunConfig> {
    match &args.config {
        Some(_) => args.load(),
        None => RunConfig::from_parts(Some(&ckpt.header.config), &args.overrides),
    }
}

fn restore(config: &RunConfig, ckpt: &Checkpoint) -> Result<CasnModel> {
    let model_cfg = config.model_config(ckpt.header.model.num_classes)?;
    ckpt.check_compatible(&model_cfg)?;
    let mut model = CasnModel::new(&model_cfg, config.seed)?;
    ckpt.load_into(&mut model)?;
    model.set_training(false);
    Ok(model)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(config: &RunConfig) -> Result<Manifest> {
    let manifest = generate_synthetic(&config.data.root, &config.synthetic_spec())?;
    println!(
        "generated {} images in {} (train {}, query {}, gallery {})",
        manifest.entries.len(),
        config.data.root.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Query),
        manifest.count(Split::Gallery)
    );
    Ok(manifest)
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let (trainer, out) = run_training(config)?;
    let last = trainer.history.last().expect("at least one epoch");
    println!("{}", last.log_line());
    println!("checkpoint: {}", out.checkpoint.display());
    println!("metrics log: {}", out.metrics_log.display());
    println!("loss curve: {} (blue L, orange L_ide, green L_ia, red L_sa)", out.loss_curve.display());
    Ok(())
}

pub fn cmd_eval(config: &RunConfig, ckpt: &Checkpoint, modes: &[EvalMode], out: &Path) -> Result<Vec<EvalReport>> {
    let model = restore(config, ckpt)?;
    let ds = scan_dataset(&config.data.root)?;
    let (h, w) = (config.data.height, config.data.width);
    let queries = EvalSet::from_samples(&ds.split(Split::Query), h, w)?;
    let mut gallery = EvalSet::from_samples(&ds.split(Split::Gallery), h, w)?;
    if config.eval.max_gallery > 0 {
        gallery = gallery.truncated(config.eval.max_gallery);
    }
    create_dir(out)?;
    let mut reports = Vec::new();
    let mut summary = String::new();
    for &mode in modes {
        let (dist, ranking, report) = evaluate(&model, &queries, &gallery, mode, &config.fusion(), config.eval.max_rank)?;
        let tag = mode.as_str();
        write(&out.join(format!("results_{tag}.txt")), &report.to_key_values())?;
        dist.combined.write(&out.join(format!("distances_{tag}")))?;
        if let Some(att) = &dist.attention {
            dist.feature.write(&out.join("distances_feature_raw"))?;
            att.write(&out.join("distances_attention_raw"))?;
        }
        let mut plot = LinePlot::new(480, 320);
        plot.y_range = Some((0.0, 1.0));
        plot.add(ranking.cmc.clone());
        plot.save(&out.join(format!("cmc_{tag}.png")))?;
        println!("{}", report.summary());
        summary.push_str(&report.summary());
        summary.push('\n');
        reports.push(report);
    }
    write(&out.join("summary.txt"), &summary)?;
    Ok(reports)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, root } => {
            let mut c = config.load()?;
            if let Some(r) = root {
                c.data.root = r;
            }
            cmd_generate(&c).map(|_| ())
        }
        Command::Train { config } => cmd_train(&config.load()?),
        Command::Eval {
            config,
            checkpoint,
            mode,
            max_gallery,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut c = checkpoint_config(&config, &ckpt)?;
            if let Some(n) = max_gallery {
                c.eval.max_gallery = n;
            }
            let modes = match mode {
                None => vec![c.eval.mode],
                Some(ModeArg::Fused) => vec![EvalMode::Fused],
                Some(ModeArg::FeatureOnly) => vec![EvalMode::FeatureOnly],
                Some(ModeArg::Both) => vec![EvalMode::FeatureOnly, EvalMode::Fused],
            };
            let out = out.unwrap_or_else(|| c.train.output_dir.join("eval"));
            cmd_eval(&c, &ckpt, &modes, &out).map(|_| ())
        }
        Command::ExportAttention {
            config,
            checkpoint,
            image,
            label,
            pair,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let c = checkpoint_config(&config, &ckpt)?;
            let model = restore(&c, &ckpt)?;
            let out = out.unwrap_or_else(|| c.train.output_dir.join("attention"));
            let size = (c.data.height, c.data.width);
            if let Some(path) = image {
                let identities = &ckpt.header.identities;
                let class = match label.or_else(|| parse_file_name(&path).ok().map(|p| p.0)) {
                    Some(raw) if identities.contains(&raw) => identities.iter().position(|&i| i == raw).expect("present"),
                    Some(raw) if label.is_some() => {
                        return Err(Error::InvalidInput(format!("identity {raw} is not a training identity")))
                    }
                    _ => predict_class(&model, &crate::data::load_image(&path, size.0, size.1)?)?,
                };
                let e = export_identification(&model, &path, class, size, &out)?;
                println!("wrote {} and {}", e.gray.display(), e.overlay.display());
            } else if let Some(p) = pair {
                let e = export_pair(
                    &model,
                    &p[0],
                    &p[1],
                    size,
                    c.attention.trim_threshold,
                    c.align_length(),
                    &out,
                )?;
                println!("wrote {}, {}", e.branch1.gray.display(), e.branch2.gray.display());
                println!("overlays {}, {}", e.branch1.overlay.display(), e.branch2.overlay.display());
                println!("profiles {} (consistency {:.6})", e.profiles.display(), e.consistency);
            } else {
                return Err(Error::InvalidInput("pass --image or --pair".into()));
            }
            Ok(())
        }
        Command::Config { config, synthetic } => {
            let c = if synthetic && config.config.is_none() {
                let base = RunConfig::synthetic("data/synthetic").to_toml();
                RunConfig::from_parts(Some(&base), &config.overrides)?
            } else {
                config.load()?
            };
            print!("{}", c.to_toml());
            Ok(())
        }
    }
}

/// Parse arguments, run, and map errors to `error[<category>]: ...` on
/// stderr with exit status 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}
