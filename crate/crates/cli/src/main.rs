//! `hegraph`: synthesize tasks, train and evaluate the adapter, export adapted
//! embeddings, and run the gradient self-check.
//!
//! Every record is one line of `key=value` pairs. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hegraph_core::adapter::{forward_planned, Mode};
use hegraph_core::gradcheck::{run_suite, GRAD_TOLERANCE};
use hegraph_core::io::{load_checkpoint, load_task, save_checkpoint, write_hgaf};
use hegraph_core::par;
use hegraph_core::synth::{generate, SyntheticSpec};
use hegraph_core::train::{evaluate, EpochRecord, EvalReport, Profile, TrainConfig, Trainer, Variant};
use hegraph_core::Error;

#[derive(Parser)]
#[command(name = "hegraph", version, about = "Heterogeneous graph adapter for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task (HGAF files plus task.toml).
    Synth {
        /// TOML file with SyntheticSpec fields; omitted fields take defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an adapter and write a checkpoint.
    Train(TrainArgs),
    /// Report fused and text-only top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write adapted prompt nodes or adapted cache rows as an HGAF file.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        what: ExportWhat,
        #[arg(long)]
        out: PathBuf,
        /// Task manifest; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    AdaptedPrompts,
    AdaptedCache,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Standard,
    Long,
    Aircraft,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// base, T-N, T-P, T or full.
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    variant: Variant,
    /// Epoch and learning-rate preset, applied before the flags below.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha_pp: Option<f64>,
    #[arg(long)]
    alpha_vp: Option<f64>,
    #[arg(long)]
    alpha_np: Option<f64>,
    #[arg(long)]
    alpha_np_test: Option<f64>,
    #[arg(long)]
    beta_pn: Option<f64>,
    #[arg(long)]
    beta_vn: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress per-epoch lines.
    #[arg(long)]
    quiet: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl TrainArgs {
    fn config(&self, base: TrainConfig) -> TrainConfig {
        let mut cfg = match self.profile {
            Some(ProfileArg::Standard) => base.with_profile(Profile::Standard),
            Some(ProfileArg::Long) => base.with_profile(Profile::Long),
            Some(ProfileArg::Aircraft) => base.with_profile(Profile::Aircraft),
            None => base,
        };
        let set = |dst: &mut f64, src: Option<f64>| {
            if let Some(v) = src {
                *dst = v;
            }
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        set(&mut cfg.optimizer.lr_base, self.lr);
        set(&mut cfg.loss.lambda, self.lambda);
        set(&mut cfg.hyper.alpha_pp, self.alpha_pp);
        set(&mut cfg.hyper.alpha_vp, self.alpha_vp);
        set(&mut cfg.hyper.alpha_np_train, self.alpha_np);
        set(&mut cfg.hyper.alpha_np_test, self.alpha_np_test);
        set(&mut cfg.hyper.beta_pn, self.beta_pn);
        set(&mut cfg.hyper.beta_vn, self.beta_vn);
        set(&mut cfg.hyper.gamma, self.gamma);
        cfg
    }
}

fn config_line(cfg: &TrainConfig) -> String {
    let h = &cfg.hyper;
    format!(
        "config variant={} epochs={} lr={} warmup_lr={} batch_size={} lambda={} tau={} \
         alpha_pp={} alpha_vp={} alpha_np={} alpha_np_test={} beta_pn={} beta_vn={} gamma={} seed={}",
        cfg.variant,
        cfg.epochs,
        cfg.optimizer.lr_base,
        cfg.warmup_lr,
        cfg.batch_size,
        cfg.loss.lambda,
        cfg.loss.tau,
        h.alpha_pp,
        h.alpha_vp,
        h.alpha_np_train,
        h.alpha_np_test,
        h.beta_pn,
        h.beta_vn,
        h.gamma,
        cfg.seed
    )
}

fn accuracy_fields(r: &EvalReport) -> String {
    format!(
        "fused_acc={} text_acc={} fused_correct={} text_correct={} total={}",
        r.fused_accuracy, r.text_accuracy, r.fused_correct, r.text_correct, r.total
    )
}

fn epoch_line(r: &EpochRecord) -> String {
    let mut line = format!(
        "epoch={} steps={} lr={} loss={} text_loss={} cache_loss={} batch_loss={}",
        r.epoch, r.steps, r.last_lr, r.train.total, r.train.text_loss, r.train.cache_loss, r.mean_batch_loss
    );
    if let Some(e) = &r.eval {
        line.push(' ');
        line.push_str(&accuracy_fields(e));
    }
    line
}

fn synth(spec: &Path, out: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::Io {
        path: spec.to_path_buf(),
        source: e,
    })?;
    let spec: SyntheticSpec =
        toml::from_str(&text).map_err(|e| Error::Spec(format!("{}: {}", spec.display(), e.message().trim())))?;
    let task = generate(&spec)?;
    let manifest = task.write(out)?;
    println!(
        "synth manifest={} classes={} shots={} dim={} test={}",
        manifest.display(),
        spec.classes,
        spec.shots,
        spec.dim,
        task.test_labels.len()
    );
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<(), Failure> {
    let task = load_task(&args.manifest, args.variant)?;
    let cfg = args.config(task.config(args.variant));
    cfg.validate()?;
    println!("{}", config_line(&cfg));
    let mut trainer = Trainer::new(&task.graph, task.test.as_ref(), cfg)?;
    let manifest = std::fs::canonicalize(&args.manifest).unwrap_or_else(|_| args.manifest.clone());
    trainer.set_manifest(Some(manifest.display().to_string()));
    if !args.quiet {
        println!("{}", epoch_line(&trainer.history()[0]));
    }
    let ck = trainer.run(|r| {
        if !args.quiet {
            println!("{}", epoch_line(r));
        }
    })?;
    save_checkpoint(&args.out, &ck)?;
    let last = ck.final_record().expect("history starts with the initial record");
    let mut line = format!(
        "final variant={} epochs={} loss={} checkpoint={}",
        ck.config.variant,
        ck.epoch,
        last.train.total,
        args.out.display()
    );
    if let Some(e) = &last.eval {
        line.push(' ');
        line.push_str(&accuracy_fields(e));
    }
    println!("{line}");
    Ok(())
}

fn eval_cmd(manifest: &Path, ckpt: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(ckpt)?;
    let task = load_task(manifest, ck.config.variant)?;
    if ck.dim() != task.graph.dim() {
        return Err(Error::DimMismatch {
            context: "checkpoint against task",
            expected: task.graph.dim().to_string(),
            actual: ck.dim().to_string(),
        }
        .into());
    }
    let test = task
        .test
        .as_ref()
        .ok_or_else(|| Error::Manifest {
            field: "test".into(),
            message: format!("{} has no test split to evaluate", manifest.display()),
        })?;
    let report = evaluate(&task.graph, &ck.weights, test, &ck.config)?;
    println!("eval variant={} {}", ck.config.variant, accuracy_fields(&report));
    Ok(())
}

fn export_cmd(ckpt: &Path, what: ExportWhat, out: &Path, manifest: Option<&Path>) -> Result<(), Failure> {
    let ck = load_checkpoint(ckpt)?;
    let manifest = match manifest {
        Some(m) => m.to_path_buf(),
        None => ck.manifest.as_ref().map(PathBuf::from).ok_or_else(|| {
            Failure::Usage(format!("{} records no manifest; pass --manifest", ckpt.display()))
        })?,
    };
    let task = load_task(&manifest, ck.config.variant)?;
    if ck.dim() != task.graph.dim() {
        return Err(Error::DimMismatch {
            context: "checkpoint against task",
            expected: task.graph.dim().to_string(),
            actual: ck.dim().to_string(),
        }
        .into());
    }
    let output = forward_planned(
        &task.graph,
        &ck.weights,
        &ck.config.effective_meta_paths(),
        Mode::Test,
        ck.config.variant.plan(),
    )?;
    let (name, m) = match what {
        ExportWhat::AdaptedPrompts => ("adapted-prompts", &output.xp_tilde),
        ExportWhat::AdaptedCache => ("adapted-cache", &output.cache_tilde),
    };
    write_hgaf(m, out)?;
    println!("export what={name} rows={} dim={} path={}", m.rows(), m.cols(), out.display());
    Ok(())
}

fn check_grad(seed: u64, instances: usize) -> Result<bool, Failure> {
    if instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let report = run_suite(seed, instances)?;
    for (i, c) in report.cases.iter().enumerate() {
        println!(
            "case={i} classes={} dim={} shots={} rel_err_wn={:e} rel_err_wp={:e} rel_err_wv={:e}",
            c.classes, c.dim, c.shots, c.rel_err[0], c.rel_err[1], c.rel_err[2]
        );
    }
    let passed = report.passed();
    println!(
        "check-grad seed={seed} instances={instances} max_rel_err={:e} tolerance={GRAD_TOLERANCE:e} status={}",
        report.max_rel_err(),
        if passed { "pass" } else { "fail" }
    );
    Ok(passed)
}

fn threads_from_env() -> Result<Option<usize>, String> {
    match std::env::var("HEGRAPH_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("HEGRAPH_THREADS must be a positive integer, got `{v}`")),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    if let Err(msg) = par::configure_threads(threads) {
        eprintln!("error: HEGRAPH_THREADS: {msg}");
        return ExitCode::from(1);
    }

    let result = match &cli.command {
        Command::Synth { spec, out } => synth(spec, out).map(|_| true),
        Command::Train(args) => train_cmd(args).map(|_| true),
        Command::Eval { manifest, ckpt } => eval_cmd(manifest, ckpt).map(|_| true),
        Command::Export {
            ckpt,
            what,
            out,
            manifest,
        } => export_cmd(ckpt, *what, out, manifest.as_deref()).map(|_| true),
        Command::CheckGrad { seed, instances } => check_grad(*seed, *instances),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                _ if e.is_numeric() => 3,
                Error::Config(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
