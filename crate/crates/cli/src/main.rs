//! `catnerf` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use catnerf::checkpoint::Checkpoint;
use catnerf::experiments::{ablate, adapt_novel_pose, evaluate, exchange_latents, gradcheck_micro};
use catnerf::kv::KeyValues;
use catnerf::losses::LossVariant;
use catnerf::synthdata::{read_dataset, write_dataset, Dataset, SceneSpec, Split};
use catnerf::train::{train_novel_view, TrainConfig};
use catnerf::txformer::FusionVariant;
use catnerf::CatError;
use clap::{Parser, Subcommand};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] CatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::Check(_) => "check",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "catnerf", version, about = "Articulated radiance fields with constant and frame-unique latents")]
struct Cli {
    /// Seed for every random draw; overrides seeds in spec and config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded bit-exact mode.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Synth {
        /// Scene spec (key = value); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the novel-view protocol.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a constant latent for the novel-pose frames of a dataset.
    AdaptPose {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset holding the novel-pose frames.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Defaults to `<ckpt>.adapted.ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one view of one frame to a PPM.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset for cameras and poses; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and score every (loss, fusion) cell.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "none,cov,corr,kld")]
        losses: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "raw,avg,tx,avg_t2,tx2")]
        fusions: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render frame t with its own and with frame t+dt's frame-unique latent.
    Exchange {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long, allow_hyphen_values = true)]
        dt: i64,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Writes `own.ppm` and `swapped.ppm` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective.
    Gradcheck {
        #[arg(long, default_value = "micro")]
        scale: String,
    },
}

fn read_kv(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    KeyValues::parse(&text).map_err(|e| CliError::Core(CatError::Format { path: path.into(), message: e.to_string() }))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

fn parse_list<T: std::str::FromStr<Err = CatError>>(items: &[String]) -> Result<Vec<T>> {
    items.iter().map(|s| s.trim().parse().map_err(CliError::from)).collect()
}

fn train_config(config: Option<&Path>, cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_kv(&read_kv(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn checkpoint_data(ckpt: &Checkpoint, data: Option<&Path>) -> Result<Dataset> {
    let dir = data
        .map(Path::to_path_buf)
        .or_else(|| ckpt.data_dir.clone())
        .ok_or_else(|| CliError::Usage("checkpoint records no dataset; pass --data".into()))?;
    Ok(read_dataset(&dir)?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec, out } => {
            let mut s = match spec {
                Some(p) => SceneSpec::from_kv(&read_kv(p)?)?,
                None => SceneSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let ds = Dataset::generate(&s)?;
            write_dataset(&ds, out)?;
            println!("wrote {} views x {} frames to {}", ds.cameras.len(), ds.frames(), out.display());
        }
        Command::Train { data, config, out } => {
            let ds = read_dataset(data)?;
            let cfg = train_config(config.as_deref(), cli)?;
            let ckpt = train_novel_view(&ds, cfg, Some(out), Some(data))?;
            println!("step {} checkpoint {}", ckpt.state.step, out.display());
        }
        Command::AdaptPose { ckpt, poses, steps, out } => {
            let trained = Checkpoint::load(ckpt)?;
            let ds = read_dataset(poses)?;
            let mut cfg = trained.config.clone();
            if let Some(s) = steps {
                cfg.adapt_steps = *s;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let adapted = adapt_novel_pose(&trained, &ds, &cfg)?;
            let path = out.clone().unwrap_or_else(|| ckpt.with_extension("adapted.ckpt"));
            adapted.ckpt.save(&path)?;
            println!("anchor penalty {:.6e} checkpoint {}", adapted.penalty, path.display());
        }
        Command::Render { ckpt, view, frame, out, data } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let ds = checkpoint_data(&ckpt, data.as_deref())?;
            let cam = ds.cameras.get(*view).ok_or_else(|| CatError::OutOfRange(format!("view {view} of {}", ds.cameras.len())))?;
            if *frame >= ds.frames() {
                return Err(CatError::OutOfRange(format!("frame {frame} of {}", ds.frames())).into());
            }
            let img = ckpt.model().render_image(&ds.context(*frame), cam, *frame, ckpt.config.points)?;
            img.quantize().write_ppm(out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { ckpt, data, split, csv } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let ds = read_dataset(data)?;
            let split: Split = split.parse()?;
            let table = evaluate(ckpt.model(), &ds, split, ckpt.config.points)?;
            if let Some(p) = csv {
                write_file(p, &table.to_csv())?;
            }
            print!("{table}");
        }
        Command::Ablate { data, losses, fusions, config, csv } => {
            let ds = read_dataset(data)?;
            let cfg = train_config(config.as_deref(), cli)?;
            let losses: Vec<LossVariant> = parse_list(losses)?;
            let fusions: Vec<FusionVariant> = parse_list(fusions)?;
            let report = ablate(&ds, &cfg, &losses, &fusions)?;
            let text = report.to_csv();
            if let Some(p) = csv {
                write_file(p, &text)?;
            }
            print!("{text}");
        }
        Command::Exchange { ckpt, frame, dt, view, data, out_dir } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let ds = checkpoint_data(&ckpt, data.as_deref())?;
            let ex = exchange_latents(ckpt.model(), &ds, *view, *frame, *dt, ckpt.config.points)?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
                ex.own.quantize().write_ppm(&dir.join("own.ppm"))?;
                ex.swapped.quantize().write_ppm(&dir.join("swapped.ppm"))?;
            }
            println!("mse {:.9e}", ex.mse);
        }
        Command::Gradcheck { scale } => {
            if scale != "micro" {
                return Err(CatError::Unknown { kind: "scale", value: scale.clone() }.into());
            }
            let r = gradcheck_micro(cli.seed.unwrap_or(0))?;
            println!(
                "max_rel_error {:.3e} worst {} checked {} parameters {} elapsed {:.2}s",
                r.fd.max_rel_error,
                r.fd.worst.as_ref().map_or("-".to_string(), |(name, i)| format!("{name}[{i}]")),
                r.fd.checked,
                r.parameters,
                r.elapsed.as_secs_f64()
            );
            if !(r.fd.max_rel_error < GRADCHECK_TOLERANCE) {
                return Err(CliError::Check(format!("max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}", r.fd.max_rel_error)));
            }
        }
    }
    Ok(())
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    eprintln!("error kind={kind} msg={msg:?}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
