use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cdsr_core::attention::Pooling;
use cdsr_core::pipeline::commands::{self, Workspace};
use cdsr_core::pipeline::config::RunConfig;
use cdsr_core::pipeline::PipelineError;

#[derive(Parser)]
#[command(name = "cdsr", version, about = "Compressed-domain selective sampling for whole-slide images")]
struct Cli {
    /// TOML run configuration; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "cdsr-run")]
    out: PathBuf,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Progress lines on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Attention,
    Mean,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic train and test slides.
    Synth,
    /// Validate tile pyramids and build tissue grids.
    Ingest {
        /// Dataset root (default: <out>/slides).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    TrainQhvae,
    TrainScorers,
    /// Stage-1 and stage-2 selection on every slide.
    Cascade {
        /// Train the codec and scorers first when their checkpoints are missing.
        #[arg(long)]
        train: bool,
    },
    Compress,
    Decompress,
    TrainL2g,
    /// Slide features of every representative patch.
    Features,
    /// Slide classification on the test split.
    Aggregate {
        /// Only this pooling (default: attention and mean).
        #[arg(long, value_enum)]
        pooling: Option<PoolArg>,
    },
    Heatmap,
    /// Reconstruction metrics; with both paths, compares two images.
    Eval {
        #[arg(long, requires = "target")]
        recon: Option<PathBuf>,
        #[arg(long, requires = "recon")]
        target: Option<PathBuf>,
    },
    /// Everything from synth to eval.
    Run,
}

fn config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Cmd::Eval { recon: Some(a), target: Some(b) } = &cli.cmd {
        let m = commands::eval_pair(a, b)?;
        println!("{}", serde_json::to_string(&m).map_err(|e| PipelineError::Invalid(e.to_string()))?);
        return Ok(());
    }
    let mut ws = Workspace::new(&cli.out, config(cli)?)?;
    ws.verbose = cli.verbose;
    match &cli.cmd {
        Cmd::Synth => println!("synth slides={}", commands::synth(&ws)?.len()),
        Cmd::Ingest { input } => {
            let r = commands::ingest(&ws, input.as_deref())?;
            println!("ingest slides={} tissue_cells={}", r.len(), r.iter().map(|x| x.tissue_cells).sum::<usize>());
        }
        Cmd::TrainQhvae => {
            let log = commands::train_qhvae(&ws)?;
            if let Some(l) = log.last() {
                println!("train-qhvae steps={} loss={:.4} psnr={:.2}", l.step, l.loss, l.psnr.unwrap_or(f64::NAN));
            }
        }
        Cmd::TrainScorers => {
            for m in commands::train_scorers(&ws)? {
                println!("train-scorers {} train_accuracy={:.3}", m.name, m.accuracy.unwrap_or(f64::NAN));
            }
        }
        Cmd::Cascade { train } => {
            if *train && !ws.path("models/qhvae.ckpt").exists() {
                commands::train_qhvae(&ws)?;
            }
            if *train && !ws.path("models/scorer-0.ckpt").exists() {
                commands::train_scorers(&ws)?;
            }
            let s = commands::cascade(&ws)?;
            for r in &s.records {
                println!("cascade {} tissue={} stage1={} representatives={}", r.slide_id, r.tissue, r.stage1, r.representatives);
            }
            println!("cascade slides={} mean_representatives={:.2}", s.records.len(), s.mean_representatives);
        }
        Cmd::Compress => {
            let m = commands::compress(&ws)?;
            let mean = |f: fn(&cdsr_core::pipeline::metrics::MetricsRecord) -> Option<f64>| m.iter().filter_map(f).sum::<f64>() / m.len().max(1) as f64;
            println!("compress patches={} mean_bpp={:.4} mean_psnr={:.2} mean_ssim={:.4}", m.len(), mean(|r| r.bpp), mean(|r| r.psnr), mean(|r| r.ssim));
        }
        Cmd::Decompress => println!("decompress patches={}", commands::decompress(&ws)?),
        Cmd::TrainL2g => {
            if let Some(l) = commands::train_l2g(&ws)?.last() {
                println!("train-l2g steps={} loss={:.4}", l.step, l.loss);
            }
        }
        Cmd::Features => println!("features rows={}", commands::features(&ws)?.len()),
        Cmd::Aggregate { pooling } => {
            let only = pooling.map(|p| match p {
                PoolArg::Attention => Pooling::Attention,
                PoolArg::Mean => Pooling::Mean,
            });
            for r in commands::aggregate(&ws, only)? {
                println!("aggregate seed={} pooling={} accuracy={:.3} auc={:.3}", r.seed, RunConfig::pooling_label(r.pooling), r.accuracy, r.auc);
            }
        }
        Cmd::Heatmap => println!("heatmap records={}", commands::heatmap(&ws)?.len()),
        Cmd::Eval { .. } => println!("eval records={}", commands::eval(&ws)?.len()),
        Cmd::Run => {
            commands::run_all(&ws)?;
            println!("run complete out={}", ws.out.display());
        }
    }
    Ok(())
}

fn error_line(kind: &str, msg: &str) {
    let msg = msg.trim().replace('\n', " ");
    eprintln!("error kind={} message={}", kind, serde_json::to_string(&msg).unwrap_or_default());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            error_line("usage", &e.kind().to_string());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
