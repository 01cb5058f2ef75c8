//! `pairdet`: command-line client of the pairdet service.
//!
//! Without `--server` an in-process server is started on a free local port,
//! so every command works offline.

mod files;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pairdet_client::Client;
use pairdet_core::api::{EvaluateRequest, ExperimentRequest, GenerateRequest, Split, TrainRequest};
use pairdet_core::harness::ExperimentKind;
use pairdet_core::Variant;

use files::{load, EvaluateFile, ExperimentFile, GenerateFile, TrainFile};

#[derive(Parser)]
#[command(name = "pairdet", version, about = "Two-frame video object detection toolkit")]
struct Cli {
    /// Base URL of a running service; an embedded one is started otherwise.
    #[arg(long, global = true, env = "PAIRDET_SERVER")]
    server: Option<String>,
    /// Log filter (tracing syntax).
    #[arg(long, global = true, default_value = "info", env = "PAIRDET_LOG")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic train/test corpus.
    Generate(GenerateArgs),
    /// Train one model and write checkpoint, RunLog and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Evaluate(EvaluateArgs),
    /// Run one of the experiment suites.
    Experiment(ExperimentArgs),
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

/// Overrides shared by `train` and `experiment`.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    offset: Option<u32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_final_fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_iou: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut pairdet_core::harness::TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        if let Some(d) = &self.dataset {
            c.dataset = Some(d.clone());
        }
        set!(variant, offset, steps, learning_rate, lr_final_fraction, batch_size, seed, lambda, gamma, eval_every, eval_iou);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    offset: Option<u32>,
    /// IoU threshold (0.7 strict, 0.5 loose).
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Variants,
    Offsets,
    Transfer,
    Fallback,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: KindArg,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    offsets: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long)]
    band: Option<f64>,
    #[arg(long)]
    transfer_ratio: Option<f64>,
    /// Transfer source corpus.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Trained Double checkpoint for `fallback`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn need<T>(v: Option<T>, what: &str) -> anyhow::Result<T> {
    v.with_context(|| format!("missing {what} (flag or config file)"))
}

async fn connect(server: Option<String>) -> anyhow::Result<Client> {
    let url = match server {
        Some(u) => u,
        None => {
            let addr = pairdet_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await?;
            format!("http://{addr}")
        }
    };
    let client = Client::new(url);
    client.health().await.with_context(|| format!("no service at {}", client.base_url()))?;
    Ok(client)
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Command::Serve { addr } = cli.command {
        pairdet_server::serve(addr).await?;
        return Ok(ExitCode::SUCCESS);
    }
    let client = connect(cli.server).await?;
    match cli.command {
        Command::Serve { .. } => unreachable!(),
        Command::Generate(a) => {
            let f: GenerateFile = load(a.config.as_deref())?;
            let mut spec = f.corpus;
            if let Some(v) = a.seed {
                spec.seed = v;
            }
            if let Some(v) = a.train_scenes {
                spec.train_scenes = v;
            }
            if let Some(v) = a.test_scenes {
                spec.test_scenes = v;
            }
            if let Some(v) = a.width {
                spec.scene.width = v;
            }
            if let Some(v) = a.height {
                spec.scene.height = v;
            }
            if let Some(v) = a.frames {
                spec.scene.num_frames = v;
            }
            let output = need(a.output.or(f.output), "output")?;
            let r = client.generate(&GenerateRequest { spec, output }).await?;
            println!(
                "wrote {} train / {} test scenes ({} boxes) to {}",
                r.train_scenes,
                r.test_scenes,
                r.annotated_boxes,
                r.output.display()
            );
        }
        Command::Train(a) => {
            let f: TrainFile = load(a.config.as_deref())?;
            let mut config = f.train;
            a.overrides.apply(&mut config);
            let output = need(a.output.or(f.output), "output")?;
            let r = client.train(&TrainRequest { config, output }).await?;
            println!(
                "trained {} steps, final loss {}, test mAP {}; checkpoint {}",
                r.steps,
                r.final_loss.map(|l| format!("{l:.4}")).unwrap_or("-".into()),
                r.map.map(|m| format!("{:.2}", m * 100.0)).unwrap_or("-".into()),
                r.checkpoint.display()
            );
        }
        Command::Evaluate(a) => {
            let f: EvaluateFile = load(a.config.as_deref())?;
            let mut config = f.train;
            if let Some(o) = a.offset {
                config.offset = o;
            }
            if let Some(iou) = a.iou.or(f.iou) {
                config.eval_iou = iou;
            }
            let split = match a.split {
                Some(SplitArg::Train) => Split::Train,
                Some(SplitArg::Test) => Split::Test,
                None => f.split,
            };
            let req = EvaluateRequest {
                checkpoint: need(a.checkpoint.or(f.checkpoint), "checkpoint")?,
                dataset: need(a.dataset.or(f.dataset), "dataset")?,
                output: need(a.output.or(f.output), "output")?,
                split,
                config,
            };
            let r = client.evaluate(&req).await?;
            println!("mAP@{} = {:.2}", r.report.iou_threshold, r.report.map * 100.0);
            for c in &r.report.classes {
                println!("  class {}: AP {:.2} (gts {}, tp {}, fp {})", c.class_id, c.ap * 100.0, c.num_gts, c.tp, c.fp);
            }
            println!("report written to {}", r.output.display());
        }
        Command::Experiment(a) => {
            let f: ExperimentFile = load(a.config.as_deref())?;
            let mut config = f.experiment;
            a.overrides.apply(&mut config.train);
            if let Some(v) = a.seeds {
                config.seeds = v;
            }
            if let Some(v) = a.offsets {
                config.offsets = v;
            }
            if let Some(v) = a.variants {
                config.variants = v;
            }
            if let Some(v) = a.band {
                config.band = v;
            }
            if let Some(v) = a.transfer_ratio {
                config.transfer_ratio = v;
            }
            if a.source.is_some() {
                config.source = a.source;
            }
            if a.checkpoint.is_some() {
                config.checkpoint = a.checkpoint;
            }
            let kind = match a.kind {
                KindArg::Variants => ExperimentKind::Variants,
                KindArg::Offsets => ExperimentKind::Offsets,
                KindArg::Transfer => ExperimentKind::Transfer,
                KindArg::Fallback => ExperimentKind::Fallback,
            };
            if config.train.dataset.is_none() {
                bail!("missing dataset (--dataset or experiment.train.dataset)");
            }
            let output = need(a.output.or(f.output), "output")?;
            let r = client.experiment(&ExperimentRequest { kind, config, output }).await?;
            for row in &r.rows {
                println!("{:<22} {:>7.2} ± {:<6.2} (n={})", row.label, row.mean, row.std, row.maps.len());
            }
            for c in &r.checks {
                let verdict = match (c.asserted, c.passed) {
                    (false, _) => "INFO",
                    (true, true) => "PASS",
                    (true, false) => "FAIL",
                };
                println!("[{verdict}] {}: {}", c.name, c.detail);
            }
            println!("report written to {}", r.output.display());
            if !r.passed {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
