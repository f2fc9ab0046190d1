use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qradar::baselines::Method;
use qradar::experiment::{EvalTarget, Experiment, ExperimentConfig, TrainMode};
use qradar::tensor::ModelSpec;
use qradar::Error;

#[derive(Parser)]
#[command(name = "qradar", version, about = "Quantized CNN interference mitigation experiments")]
struct Cli {
    /// Experiment configuration (flat TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Train and evaluate only this model seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and store the dataset.
    GenData,
    /// Train a model per seed.
    Train {
        #[arg(long, value_enum, default_value_t = ModeArg::Real)]
        mode: ModeArg,
        #[command(flatten)]
        quant: QuantArgs,
        #[command(flatten)]
        dist: DistArgs,
    },
    /// Score a checkpoint, a training run, a reference or a baseline on the
    /// test split.
    Evaluate {
        /// Checkpoint file to evaluate.
        #[arg(long, conflicts_with_all = ["reference", "method"])]
        checkpoint: Option<PathBuf>,
        /// Evaluate every seed of the run selected by --mode and the
        /// quantization or distribution flags.
        #[arg(long, value_enum, conflicts_with_all = ["reference", "method"])]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, conflicts_with = "method")]
        reference: Option<Reference>,
        /// Classical baseline (zeroing, imat or rfmin).
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        quant: QuantArgs,
        #[command(flatten)]
        dist: DistArgs,
        #[command(flatten)]
        baseline: BaselineArgs,
    },
    /// Run a classical mitigation method on the test split.
    Baseline {
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        baseline: BaselineArgs,
    },
    /// Print memory and operation counts of an architecture.
    ReportMemory {
        /// Architecture name such as L3-C16-B. Defaults to the configured one.
        #[arg(long)]
        arch: Option<String>,
        /// Comma-separated bit-widths, one table row each.
        #[arg(long, value_delimiter = ',', default_value = "32")]
        bits: Vec<u32>,
        /// Quantized quantities: w, a or wa.
        #[arg(long, default_value = "wa")]
        target: String,
    },
    /// Per-cell predictive uncertainty of a distribution checkpoint.
    Uncertainty {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        dist: DistArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Real,
    Qat,
    Dist,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Real => TrainMode::Real,
            ModeArg::Qat => TrainMode::Qat,
            ModeArg::Dist => TrainMode::Dist,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Clean,
    Interfered,
}

#[derive(Args)]
struct QuantArgs {
    /// none, binary or int.
    #[arg(long)]
    quant: Option<String>,
    /// Integer bit-width or "learned".
    #[arg(long)]
    bits: Option<String>,
    /// w, a or wa.
    #[arg(long)]
    target: Option<String>,
    /// none, stat or learned.
    #[arg(long)]
    range: Option<String>,
    #[arg(long)]
    gamma0: Option<f64>,
}

#[derive(Args)]
struct DistArgs {
    /// Train ternary weight distributions (same as --mode dist).
    #[arg(long)]
    dist_ternary: bool,
    #[arg(long)]
    lambda: Option<f64>,
    /// mp, s1 or s<N>.
    #[arg(long)]
    extract: Option<String>,
    /// Output file of the uncertainty grids.
    #[arg(long)]
    uncertainty_out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    det_acc: Option<f64>,
    #[arg(long)]
    imat_iters: Option<usize>,
    #[arg(long)]
    imat_decay: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl QuantArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set(&mut cfg.quant, self.quant.clone());
        set(&mut cfg.bits, self.bits.clone());
        set(&mut cfg.target, self.target.clone());
        set(&mut cfg.range, self.range.clone());
        set(&mut cfg.gamma0, self.gamma0);
        if cfg.quant == "binary" && self.bits.is_none() {
            cfg.bits = "1".into();
        }
    }
}

impl DistArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.extract, self.extract.clone());
    }
}

impl BaselineArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set(&mut cfg.det_accuracy, self.det_acc);
        set(&mut cfg.imat_iters, self.imat_iters);
        set(&mut cfg.imat_decay, self.imat_decay);
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::NonFinite(_) | Error::Tape(_) => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 4,
    }
}

fn print_eval(s: &qradar::experiment::EvalSummary) {
    println!(
        "{}: mean F1 {:.4} (precision {:.4}, recall {:.4}) over {} samples",
        s.label, s.mean_f1, s.mean_precision, s.mean_recall, s.samples
    );
    if let (Some(m), Some(o)) = (&s.memory, &s.ops) {
        println!(
            "  memory: weights {:.2} kB, activations {:.2} kB, total {:.2} kB; {:.2} MOPS",
            m.weight_kb(),
            m.activation_kb(),
            m.total_kb(),
            o.mops
        );
    }
}

fn run(cli: Cli) -> qradar::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    match cli.command {
        Command::GenData => {
            let exp = Experiment::new(cfg, &cli.out)?;
            let ds = exp.gen_data()?;
            println!(
                "wrote {} train / {} val / {} test samples to {} (config {})",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                exp.data_dir().display(),
                exp.config_hash()
            );
        }
        Command::Train { mode, quant, dist } => {
            quant.apply(&mut cfg);
            dist.apply(&mut cfg);
            let mode = if dist.dist_ternary { TrainMode::Dist } else { mode.into() };
            let exp = Experiment::new(cfg, &cli.out)?;
            let ds = exp.load_data()?;
            let cfar = exp.cfar()?;
            for &seed in &exp.cfg.seeds {
                let run = exp.train(mode, seed, &ds, &cfar)?;
                let last = run.log.last();
                println!(
                    "seed {seed}: {} epochs, final train MSE {:.6}, val F1 {}; checkpoint {}",
                    run.log.len(),
                    last.map_or(f64::NAN, |l| l.train_mse),
                    last.and_then(|l| l.val_f1).map_or("-".into(), |f| format!("{f:.4}")),
                    run.checkpoint.display()
                );
            }
        }
        Command::Evaluate {
            checkpoint,
            mode,
            reference,
            method,
            quant,
            dist,
            baseline,
        } => {
            quant.apply(&mut cfg);
            dist.apply(&mut cfg);
            baseline.apply(&mut cfg);
            set(&mut cfg.method, method.clone());
            let exp = Experiment::new(cfg, &cli.out)?;
            let ds = exp.load_data()?;
            let cfar = exp.cfar()?;
            if method.is_some() {
                print_eval(&exp.baseline(exp.cfg.method()?, &ds, &cfar)?);
            } else if let Some(path) = checkpoint {
                let mut dest = exp.out.join("eval");
                let parents: Vec<_> = path.ancestors().skip(1).take(2).filter_map(|p| p.file_name()).collect();
                if parents.is_empty() {
                    dest.push("checkpoint");
                }
                for name in parents.iter().rev() {
                    dest.push(name);
                }
                print_eval(&exp.evaluate(&EvalTarget::Checkpoint(path), &ds, &cfar, &dest)?);
            } else if let Some(r) = reference {
                let (target, name) = match r {
                    Reference::Clean => (EvalTarget::Clean, "clean"),
                    Reference::Interfered => (EvalTarget::Interfered, "interfered"),
                };
                print_eval(&exp.evaluate(&target, &ds, &cfar, &exp.out.join("eval").join(name))?);
            } else {
                let mode = if dist.dist_ternary { TrainMode::Dist } else { mode.unwrap_or(ModeArg::Real).into() };
                let tag = exp.cfg.run_tag(mode)?;
                let s = exp.evaluate_run(&tag, &ds, &cfar)?;
                for (seed, f1) in exp.cfg.seeds.iter().zip(&s.per_seed) {
                    println!("{tag} seed {seed}: mean F1 {f1:.4}");
                }
                println!("{tag}: mean F1 {:.4} +- {:.4} over {} seeds", s.f1.mean, s.f1.std, s.f1.seeds);
            }
        }
        Command::Baseline { method, baseline } => {
            baseline.apply(&mut cfg);
            set(&mut cfg.method, method);
            let exp = Experiment::new(cfg, &cli.out)?;
            let method: Method = exp.cfg.method()?;
            let ds = exp.load_data()?;
            let cfar = exp.cfar()?;
            print_eval(&exp.baseline(method, &ds, &cfar)?);
        }
        Command::ReportMemory { arch, bits, target } => {
            set(&mut cfg.arch, arch);
            let spec: ModelSpec = cfg.arch.parse()?;
            let target: qradar::quant::QuantTarget = target.parse()?;
            let exp = Experiment::new(cfg, &cli.out)?;
            println!("{:<10} {:>5} {:>7} {:>10} {:>14} {:>10} {:>8}", "model", "bits", "params", "weights_kB", "activations_kB", "total_kB", "MOPS");
            for k in bits {
                if !(1..=32).contains(&k) {
                    return Err(Error::Config(format!("bit-width must be in 1..=32, got {k}")));
                }
                let wb = if target.weights() { k } else { 32 };
                let ab = if target.activations() { k } else { 32 };
                let (m, o) = exp.report_memory(&spec, wb, ab)?;
                println!(
                    "{:<10} {:>5} {:>7} {:>10.2} {:>14.2} {:>10.2} {:>8.2}",
                    spec.to_string(),
                    k,
                    m.params,
                    m.weight_kb(),
                    m.activation_kb(),
                    m.total_kb(),
                    o.mops
                );
            }
        }
        Command::Uncertainty { checkpoint, dist } => {
            dist.apply(&mut cfg);
            let exp = Experiment::new(cfg, &cli.out)?;
            let tag = exp.cfg.run_tag(TrainMode::Dist)?;
            let seed = exp.cfg.seeds[0];
            let checkpoint = checkpoint.unwrap_or_else(|| exp.checkpoint_path(&tag, seed));
            let dest = dist
                .uncertainty_out
                .unwrap_or_else(|| exp.out.join("uncertainty").join(format!("{tag}_seed{seed}.qrck")));
            let ds = exp.load_data()?;
            let maps = exp.uncertainty(&checkpoint, &ds, &dest)?;
            let mean = maps.iter().map(|m| m.std_db.iter().sum::<f64>() / m.std_db.len() as f64).sum::<f64>()
                / maps.len().max(1) as f64;
            println!(
                "wrote uncertainty of {} samples to {} (mean std {mean:.3} dB)",
                maps.len(),
                dest.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
