use clap::{Args, Parser, Subcommand};
use mars_core::cmx::{cmx_pack, cmx_unpack, CmxDescriptor, CmxMode, PackedTensor};
use mars_core::pipeline::{self, DatasetManifest, EvalMode, RunConfig};
use mars_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Multi-scale spectrogram tokenizer and next-scale autoregressive audio generator.
#[derive(Parser, Debug)]
#[command(name = "mars", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for caches, checkpoints and outputs.
    #[arg(long, global = true, default_value = "mars-run")]
    out: PathBuf,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a JSON-lines manifest and record it in the run directory.
    Ingest {
        manifest: Option<PathBuf>,
        /// Write this many synthetic notes to <out>/data and ingest them.
        #[arg(long)]
        synthesize: Option<usize>,
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
    },
    /// Build the packed-spectrogram cache.
    Preprocess,
    /// Train or resume the tokenizer.
    TrainTokenizer {
        /// Stop after this many total steps (within the configured budget).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train or resume the AR model on the frozen tokenizer.
    TrainAr {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample clips to <out>/generated.
    Generate {
        #[arg(short = 'n', long)]
        count: Option<usize>,
        /// Instrument family, class index or "unconditional".
        #[arg(long)]
        condition: Option<String>,
    },
    /// Compute the metric report.
    Evaluate {
        #[arg(long, default_value = "reconstruction")]
        mode: String,
    },
    /// Channel-multiplex MARSCMX0 tensor files.
    Cmx {
        #[command(subcommand)]
        op: CmxOp,
    },
    /// Print shapes and settings of any artifact.
    Inspect { path: PathBuf },
}

#[derive(Subcommand, Debug)]
enum CmxOp {
    /// Repack a tensor with new factors.
    Pack {
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        fh: usize,
        #[arg(long, default_value_t = 1)]
        fw: usize,
        #[arg(long, default_value = "interleave")]
        mode: String,
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
    },
    /// Undo packing, restoring the original tensor.
    Unpack {
        input: PathBuf,
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn index_path(out: &Path) -> PathBuf {
    out.join("index.jsonl")
}

/// The manifest recorded by `ingest`, else the configured one.
fn manifest(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let recorded = index_path(out);
    let path = if recorded.exists() {
        recorded
    } else if let Some(p) = &cfg.data.manifest {
        p.clone()
    } else {
        return Err(Error::MissingPrerequisite("no manifest: run ingest or set data.manifest".into()));
    };
    Ok(pipeline::ingest(&path, &cfg.data, cfg.data.frames * cfg.stft.hop)?.0)
}

fn print_pairs(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn with_suffix(input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("tensor");
    input.with_file_name(format!("{stem}.{suffix}.cmx"))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = &g.out;
    match cli.command {
        Command::Ingest {
            manifest,
            synthesize,
            seconds,
        } => {
            let cfg = load_config(g)?;
            let path = match (synthesize, manifest, &cfg.data.manifest) {
                (Some(n), _, _) => {
                    pipeline::write_synthetic_dataset(&out.join("data"), n, seconds, cfg.data.sample_rate, cfg.seed)?
                }
                (None, Some(p), _) => p,
                (None, None, Some(p)) => p.clone(),
                (None, None, None) => {
                    return Err(Error::MissingPrerequisite("no manifest given and data.manifest unset".into()))
                }
            };
            let (m, report) = pipeline::ingest(&path, &cfg.data, cfg.data.frames * cfg.stft.hop)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(index_path(out), m.to_jsonl())?;
            print_pairs(&[
                ("manifest", path.display().to_string()),
                ("train", report.train.to_string()),
                ("valid", report.valid.to_string()),
                ("test", report.test.to_string()),
                ("skipped", report.skipped.to_string()),
                ("warnings", report.warnings.len().to_string()),
            ]);
        }
        Command::Preprocess => {
            let cfg = load_config(g)?;
            let m = manifest(&cfg, out)?;
            let r = pipeline::preprocess(&m, &cfg, out)?;
            let norm = r.norm.unwrap_or_default();
            print_pairs(&[
                ("written", r.written.to_string()),
                ("skipped", r.skipped.to_string()),
                ("regenerated", r.regenerated.to_string()),
                ("failed", r.failed.len().to_string()),
                ("norm_mean", format!("{:.6}", norm.mean)),
                ("norm_std", format!("{:.6}", norm.std)),
                ("config_hash", cfg.hash_hex()),
            ]);
        }
        Command::TrainTokenizer { steps } | Command::TrainAr { steps } => {
            let cfg = load_config(g)?;
            let m = manifest(&cfg, out)?;
            let s = if matches!(cli.command, Command::TrainTokenizer { .. }) {
                pipeline::run_train_tokenizer(&m, &cfg, out, steps)?
            } else {
                pipeline::run_train_ar(&m, &cfg, out, steps)?
            };
            let f = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.6}"));
            print_pairs(&[
                ("stage", s.stage),
                ("start_step", s.start_step.to_string()),
                ("end_step", s.end_step.to_string()),
                ("first_loss", f(s.first_loss)),
                ("last_loss", f(s.last_loss)),
                ("checkpoint", s.checkpoint.display().to_string()),
            ]);
        }
        Command::Generate { count, condition } => {
            let cfg = load_config(g)?;
            let n = count.unwrap_or(cfg.generate.count);
            let cond = condition.unwrap_or_else(|| cfg.generate.condition.clone());
            for p in pipeline::run_generate(&cfg, out, n, &cond, cfg.seed)? {
                println!("wrote = {}", p.display());
            }
        }
        Command::Evaluate { mode } => {
            let cfg = load_config(g)?;
            let mode: EvalMode = mode.parse()?;
            let m = manifest(&cfg, out)?;
            print!("{}", pipeline::run_evaluate(&m, &cfg, out, mode)?.to_text());
        }
        Command::Cmx { op } => match op {
            CmxOp::Pack {
                input,
                fh,
                fw,
                mode,
                output,
            } => {
                let mode = match mode.as_str() {
                    "interleave" => CmxMode::Interleave,
                    "block" => CmxMode::Block,
                    other => return Err(Error::InvalidInput(format!("unknown cmx mode {other:?} (interleave, block)"))),
                };
                let original = cmx_unpack(&pipeline::read_cmx_file(&input)?)?;
                let d = CmxDescriptor::new(original.shape(), fh, fw, mode)?;
                let packed = cmx_pack(&original, &d)?;
                let dest = output.unwrap_or_else(|| with_suffix(&input, "packed"));
                std::fs::write(&dest, pipeline::encode_cmx_file(&packed))?;
                print_pairs(&[
                    ("in_shape", format!("{:?}", d.in_shape)),
                    ("out_shape", format!("{:?}", d.out_shape())),
                    ("wrote", dest.display().to_string()),
                ]);
            }
            CmxOp::Unpack { input, output } => {
                let original = cmx_unpack(&pipeline::read_cmx_file(&input)?)?;
                let plain = PackedTensor {
                    descriptor: CmxDescriptor::identity(original.shape()),
                    values: original,
                };
                let dest = output.unwrap_or_else(|| with_suffix(&input, "unpacked"));
                std::fs::write(&dest, pipeline::encode_cmx_file(&plain))?;
                print_pairs(&[
                    ("shape", format!("{:?}", plain.descriptor.in_shape)),
                    ("wrote", dest.display().to_string()),
                ]);
            }
        },
        Command::Inspect { path } => print!("{}", pipeline::inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error category={} message={msg:?}", e.category());
            ExitCode::FAILURE
        }
    }
}
