use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use painter_core::branch::PreservationScale;
use painter_core::datapipe::bench::load_bench;
use painter_core::datapipe::clients::{ColorCaptioner, ColorSimilarity, HeadPhraseShortener, PromptClients};
use painter_core::datapipe::shard::{build_shard, load_sources, write_records, write_sources, ShardConfig, ShardStats};
use painter_core::datapipe::PromptConfig;
use painter_core::evalbench::{run_benchmark, ColorDetector, EvalClients, EvalConfig};
use painter_core::maskgen::MaskGenParams;
use painter_core::model::{Models, Preset};
use painter_core::par::Execution;
use painter_core::pipeline::{InpaintRequest, Inpainter, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use painter_core::raster::{load_rgb, save_rgb, BinaryMask};
use painter_core::synth;
use painter_core::trainer::{train, TrainConfig};

use painter_cli::service::{generate_mask, serve};

#[derive(Parser)]
#[command(name = "painter", version, about = "Dual-branch diffusion inpainting toolkit")]
struct Cli {
    /// Run batch work on the current thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

impl Cli {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Mask utilities.
    #[command(subcommand)]
    Mask(MaskCmd),
    /// Dataset building and inspection.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Write a freshly initialised checkpoint.
    Init {
        #[arg(long, default_value = "toy")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the branch and taps on a shard.
    Train(TrainArgs),
    /// Inpaint one image.
    Infer(InferArgs),
    /// Run the benchmark and write a metrics report.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        /// Directory of static UI assets served for non-API paths.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MaskCmd {
    /// Generate a training mask from a segmentation mask.
    Gen {
        #[arg(long)]
        seg: PathBuf,
        /// box, irr, seg or mix.
        #[arg(long, default_value = "mix")]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Write synthetic coloured-shape records.
    Synth {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write benchmark records with prompts instead of bare sources.
        #[arg(long)]
        bench: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a training shard from a source directory.
    Build {
        #[arg(long = "src", alias = "sources")]
        sources: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Similarity threshold for accepting a local prompt.
        #[arg(long)]
        threshold: Option<f64>,
        /// Use the bundled colour-statistics captioner and similarity.
        #[arg(long)]
        stub_clients: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a shard or benchmark directory.
    Stats { dir: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    preset: Preset,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines step log; defaults to `<out>/train_log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value = "")]
    negative_prompt: String,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    guidance: f64,
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    guidance: f64,
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    /// Use the bundled colour-statistics similarity and detector.
    #[arg(long)]
    stub_clients: bool,
    /// Metrics JSON destination.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = cli.execution();
    match cli.cmd {
        Cmd::Mask(MaskCmd::Gen { seg, kind, seed, out }) => {
            let seg = BinaryMask::load_png(&seg)?;
            let (mask, used) = generate_mask(&seg, &kind, seed)?;
            mask.save_png(&out)?;
            println!("{used} mask with {} pixels -> {}", mask.count(), out.display());
        }
        Cmd::Dataset(cmd) => dataset(cmd, exec)?,
        Cmd::Init { preset, seed, out } => {
            Models::init(preset, seed)?.save(&out)?;
            println!("wrote {preset} checkpoint to {}", out.display());
        }
        Cmd::Train(args) => train_cmd(args, exec)?,
        Cmd::Infer(args) => infer(args)?,
        Cmd::Eval(args) => eval(args, exec)?,
        Cmd::Serve { ckpt, host, port, static_dir } => {
            let models: Arc<dyn Inpainter> = Arc::new(Models::load(&ckpt)?);
            let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
            tokio::runtime::Runtime::new()?.block_on(serve(models, addr, static_dir))?;
        }
    }
    Ok(())
}

fn dataset(cmd: DatasetCmd, exec: Execution) -> Result<()> {
    match cmd {
        DatasetCmd::Synth { n, size, seed, bench, out } => {
            if bench {
                write_records(&out, &synth::bench_records(n, size, size, seed)?)?;
            } else {
                write_sources(&out, &synth::source_records(n, size, size, seed)?)?;
            }
            println!("wrote {n} records to {}", out.display());
        }
        DatasetCmd::Build { sources, seed, threshold, stub_clients, out } => {
            require_stubs(stub_clients)?;
            let srcs = load_sources(&sources)?;
            let mut prompt = PromptConfig::default();
            if let Some(t) = threshold {
                prompt.threshold = t;
            }
            let (captioner, shortener, similarity) = (ColorCaptioner, HeadPhraseShortener::default(), ColorSimilarity);
            let clients = PromptClients {
                captioner: &captioner,
                shortener: &shortener,
                similarity: &similarity,
            };
            let cfg = ShardConfig { seed, prompt, execution: exec };
            let stats = build_shard(&srcs, &MaskGenParams::default(), &clients, &cfg, &out)?;
            print_shard_stats(&stats);
        }
        DatasetCmd::Stats { dir } => {
            let stats_path = dir.join("stats.json");
            if stats_path.exists() {
                let stats: ShardStats = serde_json::from_str(&std::fs::read_to_string(&stats_path)?)?;
                print_shard_stats(&stats);
            }
            let bench = load_bench(&dir)?;
            println!("{} records", bench.records.len());
            for (cat, n) in &bench.category_counts {
                println!("  {cat}: {n}");
            }
        }
    }
    Ok(())
}

fn print_shard_stats(s: &ShardStats) {
    println!(
        "total {} accepted {} rejected {} failed {} (rejection rate {:.3})",
        s.total, s.accepted, s.rejected, s.failed, s.rejection_rate
    );
    for (kind, n) in &s.kinds {
        println!("  {kind}: {n}");
    }
    for f in &s.failures {
        println!("  failed {}: {}", f.id, f.error);
    }
}

fn train_cmd(args: TrainArgs, exec: Execution) -> Result<()> {
    let data = load_bench(&args.data)?.records;
    if data.is_empty() {
        bail!("no records in {}", args.data.display());
    }
    let mut models = match &args.init {
        Some(dir) => Models::load(dir)?,
        None => Models::init(args.preset, args.seed)?,
    };
    let mut cfg = TrainConfig {
        seed: args.seed,
        preset: models.preset,
        execution: exec,
        ..Default::default()
    };
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    std::fs::create_dir_all(&args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.join("train_log.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let logs = train(&data, &mut models, &cfg, Some(&mut log))?;
    log.flush()?;
    models.save(&args.out)?;
    std::fs::write(args.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        println!(
            "step {} total {:.5} -> step {} total {:.5} (diff {:.5}, atal {:.5})",
            first.step, first.total, last.step, last.total, last.diff, last.atal
        );
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let models = Models::load(&a.ckpt)?;
    let mut req = InpaintRequest::new(load_rgb(&a.image)?, BinaryMask::load_png(&a.mask)?, a.prompt);
    req.negative_prompt = a.negative_prompt;
    req.steps = a.steps;
    req.guidance = a.guidance;
    req.w = PreservationScale::new(a.w)?;
    req.seed = a.seed;
    let res = models.inpaint(&req)?;
    save_rgb(&res.image, &a.out)?;
    println!("inpainted in {:.2}s -> {}", res.seconds, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, exec: Execution) -> Result<()> {
    require_stubs(a.stub_clients)?;
    let bench = load_bench(&a.bench)?;
    let models = Models::load(&a.ckpt)?;
    let (similarity, detector) = (ColorSimilarity, ColorDetector);
    let clients = EvalClients {
        similarity: &similarity,
        detector: &detector,
        reward: None,
        aesthetic: None,
    };
    let cfg = EvalConfig {
        steps: a.steps,
        guidance: a.guidance,
        w: a.w,
        ..Default::default()
    };
    let report = run_benchmark(&bench.records, &models, &clients, &cfg, a.seed, exec);
    write_file(&a.out, &report.to_json()?)?;
    print!("{}", report.table());
    Ok(())
}

/// Only stand-in clients ship with this build; make their use explicit.
fn require_stubs(stub_clients: bool) -> Result<()> {
    if !stub_clients {
        bail!("no model-backed captioning/similarity/detection clients are bundled; pass --stub-clients to use the colour-statistics stand-ins");
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
