//! `wmvax`: train removal networks, craft watermark vaccines and run the
//! evaluation experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wmvax::compositor::{
    composite, synth_host, synth_watermark, Placement, WatermarkAsset, ASSET_SIZE, DEFAULT_TRANSPARENCY,
    DEFAULT_WATERMARK_SIZE, HOST_SIZE,
};
use wmvax::harness::{self, ExperimentConfig, Report};
use wmvax::imaging::{load_image, quantize, save_image, save_raw, save_rgba};
use wmvax::removal::{load_checkpoint, save_checkpoint, train, RemovalModel, TrainConfig, Variant};
use wmvax::rng::{derive_seed, seeded, stream};
use wmvax::vaccine::{generate_vaccine, VaccineConfig, VaccineKind};

#[derive(Parser)]
#[command(name = "wmvax", version, about = "Watermark vaccines against blind watermark-removal networks")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (training or experiment, depending on the command).
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Output location: a directory for train/gen-data/eval-*, a file for
    /// vaccinate/watermark/remove.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a removal network and write `<out>/<variant>.ckpt`.
    Train(TrainArgs),
    /// Craft a vaccine for a host image.
    Vaccinate(VaccinateArgs),
    /// Composite a watermark onto an image.
    Watermark(WatermarkArgs),
    /// Run a removal network on an image.
    Remove(RemoveArgs),
    /// Generate synthetic hosts and watermarks as PNG files.
    GenData(GenDataArgs),
    /// Clean / random-noise / DWV / IWV comparison per model.
    EvalEffectiveness(EvalArgs),
    /// Pattern, location, size and transparency sweeps.
    EvalUniversality(EvalArgs),
    /// Cross-model transfer matrix and stacked vaccines.
    EvalTransfer(EvalArgs),
    /// JPEG and blur robustness curves.
    EvalRobustness(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "A")]
    variant: Variant,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for the training data stream (defaults to --seed).
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    val_every: Option<usize>,
}

#[derive(Args)]
struct VaccinateArgs {
    #[arg(long)]
    kind: VaccineKind,
    /// Checkpoint to attack; repeat for a stacked vaccine.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Host image (PNG).
    #[arg(long = "in")]
    input: PathBuf,
    /// L∞ budget in units of 1/255.
    #[arg(long, default_value_t = 8.0)]
    epsilon: f32,
    /// Step size in units of 1/255.
    #[arg(long, default_value_t = 2.0)]
    step: f32,
    #[arg(long, default_value_t = 50)]
    iterations: usize,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Round the vaccinated image to the 8-bit grid (PNG always does; this
    /// also applies it to the raw sidecar).
    #[arg(long)]
    quantize: bool,
}

#[derive(Args)]
struct WatermarkArgs {
    /// Image to watermark (PNG).
    #[arg(long = "in")]
    input: PathBuf,
    /// Watermark asset (RGBA PNG).
    #[arg(long)]
    watermark: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WATERMARK_SIZE)]
    size: usize,
    #[arg(long, default_value_t = DEFAULT_TRANSPARENCY)]
    alpha: f32,
    /// Column of the top-left corner (centred when omitted).
    #[arg(long, requires = "q")]
    p: Option<usize>,
    /// Row of the top-left corner.
    #[arg(long, requires = "p")]
    q: Option<usize>,
    /// Also write the ground-truth mask here.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct RemoveArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Also write the predicted mask here.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    hosts: usize,
    #[arg(long, default_value_t = 4)]
    watermarks: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoints (override the config's model list).
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    #[arg(long)]
    hosts: Option<usize>,
    #[arg(long)]
    watermarks: Option<usize>,
    /// PGD iterations (overrides the config).
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    quantize: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let Cli {
        seed,
        config,
        out,
        command,
    } = cli;
    match command {
        Command::Train(a) => cmd_train(a, seed, config, out),
        Command::Vaccinate(a) => cmd_vaccinate(a, out),
        Command::Watermark(a) => cmd_watermark(a, out),
        Command::Remove(a) => cmd_remove(a, out),
        Command::GenData(a) => cmd_gen_data(a, seed.unwrap_or(0), out),
        Command::EvalEffectiveness(a) => eval(a, seed, config, out, |c| harness::run_effectiveness(c)),
        Command::EvalUniversality(a) => eval(a, seed, config, out, |c| Ok(vec![harness::run_universality(c)?])),
        Command::EvalTransfer(a) => eval(a, seed, config, out, |c| Ok(vec![harness::run_transferability(c)?])),
        Command::EvalRobustness(a) => eval(a, seed, config, out, |c| Ok(vec![harness::run_robustness(c)?])),
    }
}

fn required_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.context("--out is required for this command")
}

fn cmd_train(a: TrainArgs, seed: Option<u64>, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::new(a.variant, seed.unwrap_or(0)),
    };
    cfg.variant = a.variant;
    if let Some(s) = seed {
        cfg.init_seed = s;
        cfg.data_seed = s;
    }
    if let Some(s) = a.data_seed {
        cfg.data_seed = s;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.val_every {
        cfg.val_every = v;
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = train(&cfg, |p| {
        if let Some(v) = p.val_loss {
            eprintln!("step {:>5}  train {:.5}  val {:.5}", p.step, p.train_loss, v);
        }
    })?;
    let path = dir.join(format!("{}.ckpt", cfg.variant));
    save_checkpoint(&model, &path)?;
    eprintln!(
        "best step {} (val {:.5}); wrote {}",
        model.meta.best_step,
        model.meta.final_val_loss.unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn load_rgb(path: &Path) -> Result<wmvax::Tensor> {
    Ok(load_image(path).with_context(|| format!("loading {}", path.display()))?.rgb)
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_vaccinate(a: VaccinateArgs, out: Option<PathBuf>) -> Result<()> {
    let out = required_out(out)?;
    let host = load_rgb(&a.input)?;
    let models = a
        .models
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<RemovalModel>>>()?;
    let refs: Vec<&RemovalModel> = models.iter().collect();
    let cfg = VaccineConfig {
        kind: a.kind,
        epsilon: a.epsilon / 255.0,
        step: a.step / 255.0,
        iterations: a.iterations,
        beta: a.beta,
    };
    let vaccine = generate_vaccine(&host, &refs, &cfg)?;
    let mut protected = vaccine.apply(&host)?;
    if a.quantize {
        protected = quantize(&protected);
    }
    save_image(&protected, &out)?;
    let delta = protected.sub(&host)?;
    let raw = sidecar(&out, ".delta.raw");
    save_raw(&delta, &raw)?;
    let trace = sidecar(&out, ".trace.json");
    let doc = serde_json::json!({
        "kind": cfg.kind,
        "epsilon": cfg.epsilon,
        "step": cfg.step,
        "iterations": cfg.iterations,
        "beta": cfg.beta,
        "models": a.models.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "loss": vaccine.trace,
    });
    fs::write(&trace, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", trace.display()))?;
    eprintln!(
        "{} loss {:.6} -> {:.6}; wrote {}, {}, {}",
        cfg.kind,
        vaccine.trace.first().copied().unwrap_or(f64::NAN),
        vaccine.trace.last().copied().unwrap_or(f64::NAN),
        out.display(),
        raw.display(),
        trace.display()
    );
    Ok(())
}

fn cmd_watermark(a: WatermarkArgs, out: Option<PathBuf>) -> Result<()> {
    let out = required_out(out)?;
    let host = load_rgb(&a.input)?;
    let asset = WatermarkAsset::load(&a.watermark).with_context(|| format!("loading {}", a.watermark.display()))?;
    let placement = match (a.p, a.q) {
        (Some(p), Some(q)) => Placement {
            p,
            q,
            u: a.size,
            v: a.size,
            alpha: a.alpha,
        },
        _ => Placement::centered(host.height(), host.width(), a.size, a.alpha),
    };
    let c = composite(&host, &asset, &placement)?;
    save_image(&c.watermarked, &out)?;
    if let Some(m) = a.mask_out {
        save_image(&c.gt_mask, &m)?;
    }
    Ok(())
}

fn cmd_remove(a: RemoveArgs, out: Option<PathBuf>) -> Result<()> {
    let out = required_out(out)?;
    let model = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let x = load_rgb(&a.input)?;
    let y = model.forward(&x)?;
    save_image(&y.restored, &out)?;
    if let Some(m) = a.mask_out {
        save_image(&y.mask, &m)?;
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| PathBuf::from("data"));
    let (hosts, marks) = (dir.join("hosts"), dir.join("watermarks"));
    fs::create_dir_all(&hosts).with_context(|| format!("creating {}", hosts.display()))?;
    fs::create_dir_all(&marks).with_context(|| format!("creating {}", marks.display()))?;
    for i in 0..a.hosts {
        let h = synth_host(&mut seeded(derive_seed(seed, &[stream::HOST, i as u64])), HOST_SIZE, HOST_SIZE);
        save_image(&h, hosts.join(format!("host_{i:04}.png")))?;
    }
    for j in 0..a.watermarks {
        let w = synth_watermark(&mut seeded(derive_seed(seed, &[stream::WATERMARK, j as u64])), ASSET_SIZE, ASSET_SIZE);
        save_rgba(w.color(), w.alpha(), marks.join(format!("wm_{j:04}.png")))?;
    }
    eprintln!("wrote {} hosts and {} watermarks under {}", a.hosts, a.watermarks, dir.display());
    Ok(())
}

fn eval(
    a: EvalArgs,
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    run: impl FnOnce(&ExperimentConfig) -> wmvax::Result<Vec<Report>>,
) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !a.models.is_empty() {
        cfg.models = a.models;
    }
    if let Some(n) = a.hosts {
        cfg.n_hosts = n;
    }
    if let Some(n) = a.watermarks {
        cfg.n_watermarks = n;
    }
    if let Some(n) = a.iterations {
        cfg.vaccine.iterations = n;
    }
    if a.quantize {
        cfg.vaccine.quantize = true;
    }
    if cfg.models.is_empty() {
        bail!("no models given; pass --model or list them in --config");
    }
    let dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("reports"));
    for report in run(&cfg)? {
        for path in report.write(&dir)? {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}
