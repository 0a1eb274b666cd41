//! Command-line interface. Numeric results go to stdout as CSV, progress
//! to stderr. Exit codes: 0 success, 1 runtime failure, 2 bad arguments.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checks::{run_suite, CheckConfig, Suite};
use crate::data::{generate_dataset, load_pair, read_gt, Manifest, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::{normalize_radius, read_xyz, PointCloud};
use crate::matcher::{
    accuracy, avg_error, predict, read_correspondence, write_colored, write_correspondence, FrameSource,
    LossConfig, ModelConfig,
};
use crate::refine::{coord_refine_baseline, lrf_refine, write_trace, RefineConfig};
use crate::train::{load_checkpoint, save_checkpoint, train, write_metrics, Checkpoint, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "equishape",
    version,
    about = "Rigid-motion-robust dense correspondence for deformable point clouds"
)]
pub struct Cli {
    /// Worker threads for per-pair parallel work [default: all cores].
    /// EQLF_THREADS overrides this flag.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic articulated shape pairs with ground truth.
    GenData(GenDataArgs),
    /// Train a model on a manifest of pairs.
    Train(TrainArgs),
    /// Match one source cloud to one target cloud.
    Match(MatchArgs),
    /// Refine the matches of one pair at test time.
    Refine(RefineArgs),
    /// Score a correspondence file against ground truth.
    Eval(EvalArgs),
    /// Run the built-in property suites on random weights.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub points: usize,
    #[arg(long, default_value_t = 5)]
    pub segments: usize,
    /// Joint rotations are drawn from [-range, range] radians; 1.2 gives
    /// the out-of-distribution split.
    #[arg(long, default_value_t = 0.6)]
    pub angle_range: f64,
    /// Tangential resampling of target points, in arc length.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Skip the random rigid motion of every target.
    #[arg(long)]
    pub aligned: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FramesArg {
    Learned,
    Covariance,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Pairs per step (published setting).
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Initial Adam rate (published setting).
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Zero-based epochs where the rate drops (published setting).
    #[arg(long, value_delimiter = ',', default_values_t = vec![6, 9])]
    pub milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_factor: f64,
    /// Graph degree (published setting).
    #[arg(long, default_value_t = 27)]
    pub k: usize,
    /// Cross-GVP layers (published setting).
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Scalar channel width (published setting).
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Vector channels per node (chosen for this implementation).
    #[arg(long, default_value_t = 16)]
    pub vector_dim: usize,
    #[arg(long, value_enum, default_value_t = FramesArg::Learned)]
    pub frames: FramesArg,
    /// Cross-construction weight (published setting).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_cc: f64,
    /// Self-construction weight (published setting).
    #[arg(long, default_value_t = 10.0)]
    pub lambda_sc: f64,
    /// Mapping weight (published setting).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_m: f64,
    /// Squared-distance scale of the mapping weights (chosen for
    /// unit-radius shapes).
    #[arg(long, default_value_t = LossConfig::default().alpha)]
    pub alpha: f64,
    /// Latent neighbors in soft construction (chosen for this
    /// implementation).
    #[arg(long, default_value_t = 10)]
    pub k_latent: usize,
    /// Fraction of pairs held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "model.eqlf")]
    pub out: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Center each cloud and scale it to unit max radius before use, the
    /// scale the synthetic training data has.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value = "corr.txt")]
    pub out: PathBuf,
    /// Also write `<PREFIX>_src.xyz` and `<PREFIX>_tgt.xyz` with RGB
    /// columns coloring corresponding points alike.
    #[arg(long, value_name = "PREFIX")]
    pub export_colored: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Lrf,
    Coord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Rate 1e-8 (published setting).
    Paper,
    /// Rate 1e-5, chosen on a validation split of unit-radius shapes.
    Tuned,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Center each cloud and scale it to unit max radius before use, the
    /// scale the synthetic training data has.
    #[arg(long)]
    pub normalize: bool,
    /// Adam steps (published setting).
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Rate preset; --lr overrides it.
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = Strategy::Lrf)]
    pub strategy: Strategy,
    #[arg(long, default_value = "corr.txt")]
    pub out: PathBuf,
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Tolerances as fractions of the target diameter.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05])]
    pub eps: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Equivariance,
    Gradients,
    All,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return 2;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let env = match std::env::var("EQLF_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("EQLF_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let Some(n) = env.or(flag) else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("thread count must be >= 1".into()));
    }
    // a pool that already exists (tests, repeated calls) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Match(a) => match_cmd(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Check(a) => check_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let spec = ShapeSpec {
        segment_count: a.segments,
        joint_angle_range: a.angle_range,
        points: a.points,
        global_transform: !a.aligned,
        surface_jitter: a.jitter,
        ..ShapeSpec::default()
    };
    let manifest = generate_dataset(&spec, a.count, a.seed, &a.out)?;
    eprintln!("wrote {} pairs", a.count);
    println!("{}", manifest.display());
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let config = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        lr: a.lr,
        lr_milestones: a.milestones,
        lr_factor: a.lr_factor,
        loss: LossConfig {
            lambda_cc: a.lambda_cc,
            lambda_sc: a.lambda_sc,
            lambda_m: a.lambda_m,
            alpha: a.alpha,
            k_latent: a.k_latent,
        },
        model: ModelConfig {
            k: a.k,
            layers: a.layers,
            scalar_dim: a.dim,
            vector_dim: a.vector_dim,
            frames: match a.frames {
                FramesArg::Learned => FrameSource::Learned,
                FramesArg::Covariance => FrameSource::Covariance,
            },
            seed: a.seed,
            ..ModelConfig::default()
        },
        seed: a.seed,
        val_fraction: a.val_fraction,
        ..TrainConfig::default()
    };
    config.validate()?;
    let pairs = Manifest::read(&a.manifest)?.load_pairs()?;
    eprintln!("training on {} pairs", pairs.len());
    let outcome = train(&pairs, &config, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  acc@0.01 {:.4}  acc@0.05 {:.4}  lr {:e}",
            m.epoch, m.loss_total, m.val_acc_001, m.val_acc_005, m.lr
        );
    })?;
    write_metrics(&a.metrics, &outcome.metrics)?;
    save_checkpoint(
        &a.out,
        &Checkpoint {
            model: config.model.clone(),
            train: Some(config),
            params: outcome.params,
            optimizer: Some(outcome.optimizer),
        },
    )?;
    eprintln!("wrote {} and {}", a.out.display(), a.metrics.display());
    Ok(0)
}

fn load_clouds(src: &Path, tgt: &Path, normalize: bool) -> Result<(PointCloud, PointCloud)> {
    let pair = load_pair(src, tgt, None)?;
    if normalize {
        return Ok((normalize_radius(&pair.source, 1.0).0, normalize_radius(&pair.target, 1.0).0));
    }
    Ok((pair.source, pair.target))
}

fn match_cmd(a: MatchArgs) -> Result<i32> {
    let (model, params) = load_checkpoint(&a.model)?.into_model()?;
    let (x, y) = load_clouds(&a.src, &a.tgt, a.normalize)?;
    let pred = predict(&model, &params, &x, &y)?;
    write_correspondence(&a.out, &pred.correspondence)?;
    if let Some(prefix) = &a.export_colored {
        let (s, t) = colored_paths(prefix);
        write_colored(&s, &t, &x, &y, &pred.correspondence)?;
    }
    eprintln!("wrote {}", a.out.display());
    Ok(0)
}

fn colored_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with("_src.xyz"), with("_tgt.xyz"))
}

fn refine_cmd(a: RefineArgs) -> Result<i32> {
    let ck = load_checkpoint(&a.model)?;
    let loss_cfg = ck.train.as_ref().map(|t| t.loss.clone()).unwrap_or_default();
    let (model, params) = ck.into_model()?;
    let (x, y) = load_clouds(&a.src, &a.tgt, a.normalize)?;
    let mut cfg = match a.preset {
        Preset::Paper => RefineConfig::paper(),
        Preset::Tuned => RefineConfig::tuned(),
    };
    cfg.steps = a.steps;
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let (corr, trace, best) = match a.strategy {
        Strategy::Lrf => {
            let out = lrf_refine(&model, &params, &x, &y, &loss_cfg, &cfg)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            (out.correspondence, out.trace, out.best_step)
        }
        Strategy::Coord => {
            let pred = predict(&model, &params, &x, &y)?;
            let (gx, gy) = model.graphs(&x, &y)?;
            let out = coord_refine_baseline((&x, &gx, &pred.f_x), (&y, &gy, &pred.f_y), &loss_cfg, &cfg)?;
            (out.correspondence, out.trace, out.best_step)
        }
    };
    write_correspondence(&a.out, &corr)?;
    write_trace(&a.trace, &trace)?;
    eprintln!(
        "loss {:.6} -> {:.6} (best step {best}); wrote {} and {}",
        trace[0].loss.total,
        trace[best].loss.total,
        a.out.display(),
        a.trace.display()
    );
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let target = read_xyz(&a.tgt)?;
    let pred = read_correspondence(&a.pred)?;
    let gt = read_gt(&a.gt, target.len())?;
    if let Some(bad) = a.eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::Config(format!("eps must lie in [0, 1], got {bad}")));
    }
    let mut out = String::from("eps,acc\n");
    for &eps in &a.eps {
        out.push_str(&format!("{eps},{}\n", accuracy(&pred.matches, &gt, &target, eps)?));
    }
    out.push_str(&format!("err,{}\n", avg_error(&pred.matches, &gt, &target)?));
    print!("{out}");
    Ok(0)
}

fn check_cmd(a: CheckArgs) -> Result<i32> {
    let suite = match a.suite {
        SuiteArg::Equivariance => Suite::Equivariance,
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::All => Suite::All,
    };
    let cfg = CheckConfig {
        seed: a.seed,
        ..CheckConfig::default()
    };
    let results = run_suite(suite, &cfg)?;
    println!("property,max_err,tolerance,passed");
    let mut failed = 0;
    for r in &results {
        println!("\"{}\",{:e},{:e},{}", r.name, r.max_err, r.tolerance, r.passed);
        if !r.passed {
            failed += 1;
            eprintln!("FAILED: {} ({})", r.name, r.detail);
        }
    }
    eprintln!("{} of {} properties passed", results.len() - failed, results.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
