use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recon_ood::diffusion::{reconstruct, Denoiser};
use recon_ood::encoder::Encoder;
use recon_ood::harness::{self, layout, Run, RunConfig};
use recon_ood::params::Checkpoint;
use recon_ood::rng::derive_seed;
use recon_ood::synth::{render_class, render_ood, ImageGrid, IMAGE_SIDE};
use recon_ood::{Error, Result};

#[derive(Parser)]
#[command(name = "recon-ood", version, about = "Reconstruction-based OOD detection on synthetic images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    encoder_epochs: Option<usize>,
    #[arg(long)]
    denoiser_epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.encoder_epochs {
            cfg.encoder.epochs = v;
        }
        if let Some(v) = self.denoiser_epochs {
            cfg.denoiser.epochs = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData(ConfigArgs),
    /// Train the encoder, then the denoiser.
    Train(ConfigArgs),
    /// Score calibration and test splits and write the report.
    Evaluate(ConfigArgs),
    /// Render a report JSON as a table plus per-family PR curves.
    Report {
        report: PathBuf,
        /// Defaults to the report's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// gen-data, train and evaluate in sequence.
    All(ConfigArgs),
    /// Print the default configuration.
    DefaultConfig,
    #[command(subcommand)]
    Encoder(EncoderCommand),
    #[command(subcommand)]
    Diffusion(DiffusionCommand),
}

#[derive(Subcommand)]
enum EncoderCommand {
    /// Show embedding size, class count, temperature and accuracy.
    Info { checkpoint: PathBuf },
}

#[derive(Subcommand)]
enum DiffusionCommand {
    /// Reconstruct rendered samples and write input/output pairs as PGM.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        /// `class:<id>` or `ood:<family>`.
        #[arg(long, default_value = "class:0")]
        source: String,
        #[arg(long, default_value_t = 4)]
        count: u64,
        #[arg(long)]
        dest: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn open(args: &ConfigArgs) -> Result<Run> {
    let run = Run::open(args.resolve()?)?;
    println!("run directory: {}", run.dir.display());
    Ok(run)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => harness::cmd_gen_data(&mut open(&a)?),
        Command::Train(a) => harness::cmd_train(&mut open(&a)?),
        Command::Evaluate(a) => {
            let mut run = open(&a)?;
            harness::cmd_evaluate(&mut run)?;
            print_file(&run.path(layout::REPORT_TABLE))
        }
        Command::Report { report, out } => {
            let dir = out.unwrap_or_else(|| report.parent().unwrap_or(Path::new(".")).to_path_buf());
            let files = harness::cmd_report(&report, &dir)?;
            print_file(&files.table)
        }
        Command::All(a) => {
            let mut run = open(&a)?;
            harness::cmd_all(&mut run)?;
            print_file(&run.path(layout::REPORT_TABLE))
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_json());
            Ok(())
        }
        Command::Encoder(EncoderCommand::Info { checkpoint }) => encoder_info(&checkpoint),
        Command::Diffusion(DiffusionCommand::Sample {
            config,
            source,
            count,
            dest,
        }) => diffusion_sample(&config, &source, count, &dest),
    }
}

fn print_file(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    print!("{text}");
    Ok(())
}

fn encoder_info(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let encoder = Encoder::from_checkpoint(&ckpt)?;
    println!("embed_dim: {}", encoder.embed_dim());
    println!("num_classes: {}", encoder.num_classes());
    println!("temperature: {:.6}", encoder.temperature());
    match ckpt.meta("zero_shot_accuracy") {
        Some(a) => println!("zero_shot_accuracy: {a:.4}"),
        None => println!("zero_shot_accuracy: unknown"),
    }
    Ok(())
}

/// 8-bit binary PGM with [−1, 1] mapped onto [0, 255].
fn pgm(image: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
    out.extend(
        image
            .pixels()
            .iter()
            .map(|&p| ((p + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8),
    );
    out
}

fn diffusion_sample(args: &ConfigArgs, source: &str, count: u64, dest: &Path) -> Result<()> {
    let run = Run::open(args.resolve()?)?;
    let encoder = Encoder::from_checkpoint(&Checkpoint::load(&run.path(layout::ENCODER_CKPT))?)?;
    let denoiser = Denoiser::from_checkpoint(&Checkpoint::load(&run.path(layout::DENOISER_CKPT))?)?;
    let schedule = run.config.noise_schedule()?;
    std::fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    let label = source.replace(':', "-");
    for i in 0..count {
        let seed = derive_seed(run.config.seed ^ 0x5A3D, i);
        let image = match source.split_once(':') {
            Some(("class", id)) => {
                let id = id
                    .parse()
                    .map_err(|_| Error::Config(format!("bad class id in `{source}`")))?;
                render_class(id, seed)?
            }
            Some(("ood", family)) => render_ood(family, seed)?,
            _ => return Err(Error::Config(format!("source `{source}` is not class:<id> or ood:<family>"))),
        };
        let cond = encoder.encode_image(&image)?;
        let recon = reconstruct(&denoiser, &schedule, &image, &cond, &run.config.reconstruction_config(seed))?;
        for (kind, img) in [("input", &image), ("recon", &recon)] {
            let path = dest.join(format!("{label}-{i:03}-{kind}.pgm"));
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&pgm(img)).map_err(|e| Error::io(&path, e))?;
        }
    }
    println!("wrote {} image pairs to {}", count, dest.display());
    Ok(())
}
