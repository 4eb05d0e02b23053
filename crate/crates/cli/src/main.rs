use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tanet_core::autograd::{Graph, Mode};
use tanet_core::bench::{
    bench_scaling, fit_slope, to_csv, BenchSpec, Mechanism, MIN_REPS, MIN_WARMUP,
};
use tanet_core::blocks::{ToyNetConfig, Variant};
use tanet_core::checks::{
    gradient_suite, tam_agreement_suite, AGREEMENT_TOLERANCE, GRADIENT_TOLERANCE,
};
use tanet_core::io::{export_pgm, write_tsr, Selection};
use tanet_core::loss::LossConfig;
use tanet_core::oracles::{sa_flop_report, tam_flop_report};
use tanet_core::synth::{gen_dataset, palette, Dataset, Split, SynthConfig};
use tanet_core::tam::{DEFAULT_AFEM_LEVELS, DEFAULT_TAPP_LEVELS};
use tanet_core::train::{evaluate_model, load_checkpoint, save_checkpoint, train_toy, TrainConfig};
use tanet_core::Tensor;

/// Threshold attention kernels, blocks and a toy segmentation trainer.
#[derive(Parser, Debug)]
#[command(name = "tanet", version, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Seed for data generation, initialization and randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Threshold levels in the shallow enhancement block.
    #[arg(long, global = true, default_value_t = DEFAULT_AFEM_LEVELS)]
    l1: usize,
    /// Threshold levels in the pyramid pooling block.
    #[arg(long, global = true, default_value_t = DEFAULT_TAPP_LEVELS)]
    l2: usize,
    /// Auxiliary loss weight.
    #[arg(long, global = true, default_value_t = 0.5)]
    lambda: f64,
    /// Hard-example probability threshold.
    #[arg(long, global = true, default_value_t = 0.65)]
    theta: f64,
    /// Minimum number of pixels kept by hard-example mining.
    #[arg(long = "ohem-min", global = true, default_value_t = 10000)]
    ohem_min: usize,
    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Global {
    fn loss(&self) -> LossConfig {
        LossConfig {
            aux_weight: self.lambda,
            ohem_threshold: self.theta,
            ohem_min_kept: self.ohem_min,
        }
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Voronoi segmentation dataset (default out: data).
    SynthGen(SynthArgs),
    /// Train the toy segmentation network (default out: run).
    TrainToy(TrainArgs),
    /// Evaluate a checkpoint and print the metrics report as JSON.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of the attention kernel, both blocks and the loss.
    Gradcheck,
    /// Compare the optimized threshold attention with the reference oracle.
    OracleCheck(OracleArgs),
    /// Time threshold attention and dense self-attention over a pixel-count grid.
    BenchScaling(BenchArgs),
    /// Print closed-form FLOP totals of both attention mechanisms.
    BenchFlops(FlopArgs),
    /// Dump block input and output feature maps of one sample as PGM and TSR (default out: features).
    ExportFeatures(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 12)]
    sites: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VariantArg {
    Full,
    Ablated,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root written by synth-gen.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    variant: VariantArg,
    /// Skip the per-epoch validation pass.
    #[arg(long)]
    no_val: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    cases: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum MechanismArg {
    Tam,
    DenseSa,
    Both,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = MechanismArg::Both)]
    mechanism: MechanismArg,
    #[arg(long, default_value_t = 16)]
    c: usize,
    /// Threshold levels for the timed attention (the global --l2 applies to the network only).
    #[arg(long, default_value_t = 8)]
    l: usize,
    /// Smallest grid point is 2^min_exp pixels.
    #[arg(long, default_value_t = 10)]
    min_exp: u32,
    #[arg(long, default_value_t = 16)]
    max_exp: u32,
    #[arg(long, default_value_t = MIN_REPS)]
    reps: usize,
    #[arg(long, default_value_t = MIN_WARMUP)]
    warmup: usize,
}

#[derive(Args, Debug)]
struct FlopArgs {
    #[arg(long)]
    c: u64,
    #[arg(long)]
    n: u64,
    /// Threshold levels; defaults to --l2.
    #[arg(long)]
    l: Option<u64>,
    /// Print both reports as JSON instead of a summary.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample id inside the dataset.
    #[arg(long, default_value_t = 0)]
    id: usize,
    /// Export this channel instead of the channel mean.
    #[arg(long)]
    channel: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `Ok(false)` means the command ran but a check did not pass.
fn run(cli: Cli) -> anyhow::Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::SynthGen(a) => synth_gen(g, a),
        Command::TrainToy(a) => train(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Gradcheck => gradcheck(g),
        Command::OracleCheck(a) => oracle_check(g, a),
        Command::BenchScaling(a) => bench(g, a),
        Command::BenchFlops(a) => flops(g, a),
        Command::ExportFeatures(a) => export(g, a),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth_gen(g: &Global, a: SynthArgs) -> anyhow::Result<bool> {
    let cfg = SynthConfig {
        seed: g.seed,
        height: a.height,
        width: a.width,
        classes: a.classes,
        sites: a.sites,
        colors: palette(a.classes),
        noise_std: a.noise,
        train: a.train,
        val: a.val,
    };
    let root = g.out_or("data");
    let manifest = gen_dataset(&cfg, &root)?;
    println!(
        "wrote {} train and {} val samples to {}",
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        root.display()
    );
    Ok(true)
}

fn net_config(g: &Global, classes: usize, variant: VariantArg) -> ToyNetConfig {
    let variant = match variant {
        VariantArg::Full => Variant::Full,
        VariantArg::Ablated => Variant::Ablated,
    };
    let mut cfg = ToyNetConfig::new(classes, variant);
    cfg.afem.levels = g.l1;
    cfg.tapp.levels = g.l2;
    cfg
}

fn train(g: &Global, a: TrainArgs) -> anyhow::Result<bool> {
    let ds = Dataset::open(&a.data)?;
    let net_cfg = net_config(g, ds.classes(), a.variant);
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.lr,
        weight_decay: a.weight_decay,
        loss: g.loss(),
        seed: g.seed,
        validate_each_epoch: !a.no_val,
        ..TrainConfig::default()
    };
    let mut outcome = train_toy(&ds, &net_cfg, &cfg)?;
    let dir = g.out_or("run");
    save_checkpoint(&mut outcome.net, &dir)?;
    let log_path = dir.join("log.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&outcome.log)?)
        .with_context(|| format!("writing {}", log_path.display()))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "final loss {:.4}, val mIoU {}",
            last.train_loss,
            last.val_miou.map_or("-".into(), |m| format!("{m:.4}"))
        );
    }
    println!("checkpoint written to {}", dir.display());
    Ok(true)
}

fn eval(g: &Global, a: EvalArgs) -> anyhow::Result<bool> {
    let mut net = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::open(&a.data)?;
    let report = evaluate_model(&mut net, &ds, a.split.into())?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_or_print(g.out.as_deref(), &text)?;
    Ok(true)
}

fn gradcheck(g: &Global) -> anyhow::Result<bool> {
    let cases = gradient_suite(g.seed)?;
    let mut ok = true;
    for c in &cases {
        let verdict = if c.passed() { "pass" } else { "FAIL" };
        ok &= c.passed();
        println!(
            "{verdict} {:<13} max rel {:.3e}  max abs {:.3e}  ({} coordinates)",
            c.name, c.report.max_rel_error, c.report.max_abs_error, c.report.coordinates
        );
    }
    println!("tolerance {GRADIENT_TOLERANCE:e}");
    if let Some(out) = g.out.as_deref() {
        write_or_print(Some(out), &serde_json::to_string_pretty(&cases)?)?;
    }
    Ok(ok)
}

fn oracle_check(g: &Global, a: OracleArgs) -> anyhow::Result<bool> {
    if a.cases == 0 {
        bail!("--cases must be positive");
    }
    let report = tam_agreement_suite(g.seed, a.cases)?;
    for f in &report.failures {
        println!(
            "FAIL case {} (C={} H={} W={} L={}): max abs error {:.3e}",
            f.index, f.channels, f.height, f.width, f.levels, f.max_abs_error
        );
    }
    println!(
        "passed {} failed {} (max abs error {:.3e}, tolerance {AGREEMENT_TOLERANCE:e})",
        report.passed, report.failed, report.max_abs_error
    );
    Ok(report.failed == 0)
}

fn bench(g: &Global, a: BenchArgs) -> anyhow::Result<bool> {
    if a.min_exp > a.max_exp || a.max_exp > 30 {
        bail!("invalid grid exponents {}..={}", a.min_exp, a.max_exp);
    }
    let grid: Vec<usize> = (a.min_exp..=a.max_exp).map(|e| 1usize << e).collect();
    let mechanisms = match a.mechanism {
        MechanismArg::Tam => vec![Mechanism::Tam],
        MechanismArg::DenseSa => vec![Mechanism::DenseSa],
        MechanismArg::Both => vec![Mechanism::Tam, Mechanism::DenseSa],
    };
    let mut records = Vec::new();
    for mechanism in mechanisms {
        let run = bench_scaling(&BenchSpec {
            mechanism,
            grid: grid.clone(),
            channels: a.c,
            levels: a.l,
            reps: a.reps,
            warmup: a.warmup,
            seed: g.seed,
        })?;
        match fit_slope(&run.records) {
            Ok(s) => eprintln!("{} log-log slope {s:.3}", mechanism.name()),
            Err(e) => eprintln!("{} slope not fitted: {e}", mechanism.name()),
        }
        records.extend(run.records);
    }
    write_or_print(g.out.as_deref(), &to_csv(&records))?;
    Ok(true)
}

fn flops(g: &Global, a: FlopArgs) -> anyhow::Result<bool> {
    let l = a.l.unwrap_or(g.l2 as u64);
    if a.c == 0 || a.n == 0 || l == 0 {
        bail!("--c, --n and --l must be positive");
    }
    let tam = tam_flop_report(a.c, a.n, l);
    let sa = sa_flop_report(a.c, a.n);
    if a.json {
        let mut text = serde_json::to_string_pretty(&[&tam, &sa])?;
        text.push('\n');
        write_or_print(g.out.as_deref(), &text)?;
    } else {
        println!("tam      {:>20}", tam.total);
        println!("dense_sa {:>20}", sa.total);
        println!("ratio    {:>20.2}", sa.total as f64 / tam.total as f64);
    }
    Ok(true)
}

fn export(g: &Global, a: ExportArgs) -> anyhow::Result<bool> {
    let mut net = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::open(&a.data)?;
    let sample = ds.load(a.id)?;
    let dims = sample.image.dims().to_vec();
    let image = Tensor::new(
        vec![1, dims[0], dims[1], dims[2]],
        sample.image.data().to_vec(),
    )?;
    let mut graph = Graph::new();
    let x = graph.constant(image);
    let feats = net.block_features(&mut graph, x, Mode::Eval)?;
    let dir = g.out_or("features");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let selection = a.channel.map_or(Selection::Mean, Selection::Channel);
    for (name, v) in ["shallow_in", "shallow_out", "deep_in", "deep_out"]
        .iter()
        .zip(feats)
    {
        let f = graph.value(v);
        export_pgm(f, selection, dir.join(format!("{name}.pgm")))?;
        write_tsr(dir.join(format!("{name}.tsr")), f)?;
        println!("{name}: {:?}", f.dims());
    }
    Ok(true)
}
