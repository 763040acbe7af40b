//! `wdsc`: train, code and evaluate the distributed stereo codec.
//!
//! The right view of each stereo pair is compressed; the left view is the
//! decoder-side image. See the repository README for the dataset layout and
//! config format.

mod config;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use wdsc_core::checkpoint;
use wdsc_core::data::{load_image, save_image};
use wdsc_core::metrics::{msssim, psnr};
use wdsc_core::model::ReconstructionMode;
use wdsc_core::train::{LogRow, LOG_HEADER};
use wdsc_core::{
    bitstream, PairSource, StereoFolder, SyntheticPairs, TrainConfig, Variant, WynerModel,
};

#[derive(Parser)]
#[command(name = "wdsc", version, about = "Distributed stereo image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config; writes a checkpoint and a CSV log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long, default_value = "model.wdck")]
        ckpt: PathBuf,
        /// Output CSV training log.
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
    },
    /// Compress one image into a .wdsc bitstream.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from a bitstream and the decoder-side image.
    Decompress {
        #[arg(long)]
        ckpt: PathBuf,
        /// Decoder-side correlated image.
        #[arg(long)]
        side: PathBuf,
        /// Input bitstream.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code every pair of a stereo folder and write per-pair RD rows.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per lambda and write a mean RD point per lambda.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated lambda values; the default is a geometric
        /// 8-point grid spanning the low-rate operating band.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "2,6,18,54,160,480,1440,4320"
        )]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Optional directory for the per-lambda checkpoints.
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
    },
    /// Decode only the common or only the private stream into an image.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        side: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mode: InspectMode,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InspectMode {
    Common,
    Private,
}

pub const RD_HEADER: &str = "bpp,psnr,msssim,lambda,alpha,beta,variant";

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Factorized => "factorized",
        Variant::Hyperprior => "hyperprior",
    }
}

struct FolderSubset {
    folder: Arc<StereoFolder>,
    indices: Vec<usize>,
}

impl PairSource for FolderSubset {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> wdsc_core::Result<wdsc_core::StereoPair> {
        self.folder.get(self.indices[index])
    }
}

/// Resolve the `[data]` section into train and validation sources.
fn data_sources(cfg: &RunConfig) -> anyhow::Result<(Box<dyn PairSource>, Box<dyn PairSource>)> {
    match cfg.data.kind.as_str() {
        "synthetic" => {
            let count = cfg.data.count.unwrap_or(128);
            let h = cfg.data.height.unwrap_or(32);
            let w = cfg.data.width.unwrap_or(64);
            let holdout = cfg.data.holdout.unwrap_or((count / 8).max(4));
            let seed = cfg.train.seed;
            Ok((
                Box::new(SyntheticPairs::new(seed, count, h, w)),
                Box::new(SyntheticPairs::new(seed ^ 0x0ff5_e75e, holdout, h, w)),
            ))
        }
        "folder" => {
            let root = cfg
                .data
                .root
                .as_ref()
                .context("data.kind = \"folder\" needs data.root")?;
            let folder = Arc::new(StereoFolder::open(root)?);
            if folder.warnings() > 0 {
                eprintln!("warning: skipped {} files in {}", folder.warnings(), root.display());
            }
            let (train_idx, test_idx) = folder.split();
            Ok((
                Box::new(FolderSubset {
                    folder: Arc::clone(&folder),
                    indices: train_idx,
                }),
                Box::new(FolderSubset {
                    folder,
                    indices: test_idx,
                }),
            ))
        }
        other => bail!("unknown data.kind {other:?} (synthetic | folder)"),
    }
}

fn run_training(
    tc: &TrainConfig,
    train_data: &dyn PairSource,
    val_data: &dyn PairSource,
    log_path: Option<&Path>,
) -> anyhow::Result<WynerModel> {
    let mut log_file = match log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)
                .with_context(|| format!("creating log {}", p.display()))?;
            writeln!(f, "{LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let every = tc.val_every.max(1);
    let mut write_row = |row: &LogRow| {
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{}", row.to_csv());
        }
        if row.iter % every == 0 {
            eprintln!(
                "iter {:>7}  loss {:>10.4}  r_x {:>8.4}  d_x {:>9.6}  lr {:.1e}",
                row.iter, row.loss, row.r_x, row.d_x, row.lr
            );
        }
    };
    let result = wdsc_core::train(tc, train_data, val_data, &mut write_row)?;
    if let Some(it) = result.diverged_at {
        eprintln!("warning: training diverged at iteration {it}; kept last good snapshot");
    }
    eprintln!("final validation loss {:.6}", result.final_val_loss);
    Ok(result.model)
}

struct RdPoint {
    bpp: f64,
    psnr: f64,
    msssim: f64,
}

fn code_pair(model: &WynerModel, pair: &wdsc_core::StereoPair) -> anyhow::Result<RdPoint> {
    let bytes = model.compress(&pair.right)?;
    let bs = bitstream::unpack(&bytes)?;
    let xhat = model.decompress(&bytes, &pair.left)?;
    Ok(RdPoint {
        bpp: bs.bpp(),
        psnr: psnr(&xhat, &pair.right)?,
        msssim: msssim(&xhat, &pair.right)?,
    })
}

fn rd_row(model: &WynerModel, p: &RdPoint) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        p.bpp,
        p.psnr,
        p.msssim,
        model.meta.lambda,
        model.meta.alpha,
        model.meta.beta,
        variant_name(model.config.variant)
    )
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train { config, ckpt, log } => {
            let cfg = RunConfig::load(&config)?;
            let tc = cfg.train_config()?;
            let (train_data, val_data) = data_sources(&cfg)?;
            let model = run_training(&tc, train_data.as_ref(), val_data.as_ref(), Some(&log))?;
            checkpoint::save(&model, &ckpt)?;
            eprintln!(
                "checkpoint {:016x} -> {}",
                checkpoint::digest(&model),
                ckpt.display()
            );
        }
        Command::Compress { ckpt, input, out } => {
            let model = checkpoint::load(&ckpt)?;
            let x = load_image(&input)?;
            let bytes = model.compress(&x)?;
            let bs = bitstream::unpack(&bytes)?;
            std::fs::write(&out, &bytes)?;
            eprintln!(
                "{} -> {} ({} bytes, {:.4} bpp)",
                input.display(),
                out.display(),
                bytes.len(),
                bs.bpp()
            );
        }
        Command::Decompress {
            ckpt,
            side,
            input,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let y = load_image(&side)?;
            let bytes = std::fs::read(&input)?;
            let xhat = model.decompress(&bytes, &y)?;
            save_image(&xhat, &out)?;
            eprintln!("{} -> {}", input.display(), out.display());
        }
        Command::Eval { ckpt, dataset, out } => {
            let model = checkpoint::load(&ckpt)?;
            let folder = StereoFolder::open(&dataset)?;
            if folder.warnings() > 0 {
                eprintln!("warning: skipped {} files", folder.warnings());
            }
            if folder.is_empty() {
                bail!("no pairs found in {}", dataset.display());
            }
            let mut f = std::fs::File::create(&out)?;
            writeln!(f, "{RD_HEADER}")?;
            for i in 0..folder.len() {
                let pair = folder.get(i)?;
                let point = code_pair(&model, &pair)?;
                writeln!(f, "{}", rd_row(&model, &point))?;
            }
            eprintln!("{} rows -> {}", folder.len(), out.display());
        }
        Command::Sweep {
            config,
            lambdas,
            out,
            ckpt_dir,
        } => {
            if lambdas.is_empty() {
                bail!("--lambdas needs at least one value");
            }
            let cfg = RunConfig::load(&config)?;
            let (train_data, val_data) = data_sources(&cfg)?;
            if let Some(dir) = &ckpt_dir {
                std::fs::create_dir_all(dir)?;
            }
            let mut f = std::fs::File::create(&out)?;
            writeln!(f, "{RD_HEADER}")?;
            for &lambda in &lambdas {
                let mut tc = cfg.train_config()?;
                tc.lambda = lambda;
                eprintln!("=== lambda {lambda} ===");
                let model = run_training(&tc, train_data.as_ref(), val_data.as_ref(), None)?;
                let mut mean = RdPoint {
                    bpp: 0.0,
                    psnr: 0.0,
                    msssim: 0.0,
                };
                let count = val_data.len();
                for i in 0..count {
                    let pair = val_data.get(i)?;
                    let p = code_pair(&model, &pair)?;
                    mean.bpp += p.bpp / count as f64;
                    mean.psnr += p.psnr / count as f64;
                    mean.msssim += p.msssim / count as f64;
                }
                writeln!(f, "{}", rd_row(&model, &mean))?;
                eprintln!(
                    "lambda {lambda}: bpp {:.4}, psnr {:.2} dB, ms-ssim {:.4}",
                    mean.bpp, mean.psnr, mean.msssim
                );
                if let Some(dir) = &ckpt_dir {
                    checkpoint::save(&model, &dir.join(format!("lambda_{lambda}.wdck")))?;
                }
            }
            eprintln!("{} points -> {}", lambdas.len(), out.display());
        }
        Command::Inspect {
            ckpt,
            side,
            input,
            mode,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let y = load_image(&side)?;
            let bytes = std::fs::read(&input)?;
            let rmode = match mode {
                InspectMode::Common => ReconstructionMode::CommonOnly,
                InspectMode::Private => ReconstructionMode::PrivateOnly,
            };
            let img = model.decompress_mode(&bytes, &y, rmode)?;
            save_image(&img, &out)?;
            eprintln!("{} -> {}", input.display(), out.display());
        }
    }
    Ok(())
}
