//! Command-line surface: meta-train a weight-update rule, roll it out on a
//! task, run the supervised baseline, extract first-layer filters, compute
//! PCA explained-variance curves, and inspect checkpoints.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use metaplast_core::analysis::{
    extract_filters, pca_explained_variance, write_filters_csv, write_pca_csv,
};
use metaplast_core::base_model::{Activation, ArchSpec};
use metaplast_core::baseline::baseline_supervised;
use metaplast_core::checkpoint::{
    load_checkpoint, load_rule_params, load_train_state, save_rule_params, save_train_state,
};
use metaplast_core::config::{load_config, RunConfig};
use metaplast_core::dist::{run_cluster, ClusterMode};
use metaplast_core::error::{Error, Result};
use metaplast_core::rollout::rollout;
use metaplast_core::tasks::{AugmentParams, TaskSource, TaskSpec};
use metaplast_core::tensor::Tensor;
use metaplast_core::trainer::{train_until, TrainerState};

#[derive(Parser)]
#[command(name = "metaplast", version, about = "Meta-learned unsupervised weight-update rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration (overrides the profile defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named defaults when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Root seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TaskArgs {
    /// Task family: "two-moons" or "glyphs".
    #[arg(long, default_value = "two-moons")]
    task: String,
    /// Glyph grid side length.
    #[arg(long, default_value_t = 8)]
    grid: usize,
    /// Number of classes (glyphs only; two moons always has 2).
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Seed of the task itself (data identity, distinct from --seed).
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Hidden layer sizes, comma separated.
    #[arg(long, default_value = "16")]
    hidden: String,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the update rule; writes metrics and checkpoints.
    MetaTrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Meta-steps to run (default: 2000).
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        /// Parallel workers; 1 runs the sequential trainer.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Single-threaded virtual scheduler: reproducible across runs.
        #[arg(long)]
        deterministic: bool,
        /// Resume from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save a resumable checkpoint every N meta-steps (sequential only).
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Apply a trained rule to a fresh model on one task; writes CSV metrics.
    Rollout {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        task: TaskArgs,
        /// Rule-parameter checkpoint.
        #[arg(long)]
        theta: PathBuf,
        /// Inner updates to apply.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Supervised few-shot baseline on one task; prints accuracy.
    Baseline {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        task: TaskArgs,
        /// Optimization steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Roll a rule out, then write first-layer receptive fields as PGM + CSV.
    Filters {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        theta: PathBuf,
        /// Inner updates before extraction.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
    /// Cumulative explained variance of row vectors read from a CSV file.
    Pca {
        #[command(flatten)]
        common: CommonArgs,
        /// Headerless CSV, one sample per row.
        #[arg(long)]
        input: PathBuf,
    },
    /// Describe a checkpoint file.
    Info {
        /// Checkpoint path.
        path: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MetaTrain { common, steps, workers, deterministic, resume, checkpoint_every } => {
            cmd_meta_train(&common, steps, workers, deterministic, resume, checkpoint_every)
        }
        Command::Rollout { common, task, theta, steps, eval_every } => {
            cmd_rollout(&common, &task, &theta, steps, eval_every)
        }
        Command::Baseline { common, task, steps } => cmd_baseline(&common, &task, steps),
        Command::Filters { common, task, theta, steps } => {
            cmd_filters(&common, &task, &theta, steps)
        }
        Command::Pca { common, input } => cmd_pca(&common, &input),
        Command::Info { path } => cmd_info(&path),
    }
}

fn effective_config(common: &CommonArgs) -> Result<RunConfig> {
    match &common.config {
        Some(path) => load_config(path),
        None => RunConfig::from_profile(&common.profile),
    }
}

fn ensure_out(common: &CommonArgs) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    Ok(())
}

fn task_from_args(args: &TaskArgs, noise_std: f64) -> Result<TaskSpec> {
    match args.task.as_str() {
        "two-moons" => Ok(TaskSpec {
            source: TaskSource::TwoMoons { noise_std },
            n_classes: 2,
            input_dim: 2,
            permutation: vec![0, 1],
            augmentation: AugmentParams::none(),
            seed: args.task_seed,
        }),
        "glyphs" => {
            let dim = args.grid * args.grid;
            Ok(TaskSpec {
                source: TaskSource::Glyphs { grid: args.grid },
                n_classes: args.classes,
                input_dim: dim,
                permutation: (0..dim).collect(),
                augmentation: AugmentParams::none(),
                seed: args.task_seed,
            })
        }
        other => Err(Error::Config(format!(
            "unknown task {:?}; expected \"two-moons\" or \"glyphs\"",
            other
        ))),
    }
}

fn arch_from_args(args: &TaskArgs, task: &TaskSpec, embed_dim: usize) -> Result<ArchSpec> {
    let mut sizes = vec![task.input_dim];
    for part in args.hidden.split(',') {
        let n: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad hidden size {:?}", part)))?;
        sizes.push(n);
    }
    sizes.push(embed_dim);
    Ok(ArchSpec::new(sizes, Activation::Relu)?)
}

fn cmd_meta_train(
    common: &CommonArgs,
    steps: u64,
    workers: usize,
    deterministic: bool,
    resume: Option<PathBuf>,
    checkpoint_every: u64,
) -> Result<()> {
    let run = effective_config(common)?;
    ensure_out(common)?;
    let metrics_path = common.out.join("metrics.jsonl");
    let theta_path = common.out.join("theta.smup");

    if workers > 1 {
        if resume.is_some() {
            return Err(Error::Config("--resume requires --workers 1".into()));
        }
        let mode = if deterministic { ClusterMode::Deterministic } else { ClusterMode::Free };
        let mut sink = BufWriter::new(File::create(&metrics_path)?);
        let out = run_cluster(workers, &run.trainer, common.seed, steps, mode, Some(&mut sink))?;
        sink.flush()?;
        save_rule_params(&theta_path, &run.profile, &out.theta)?;
        println!(
            "meta-trained {} steps on {} workers; staleness histogram {:?}; skipped {}",
            out.metrics.len(),
            workers,
            out.staleness_histogram,
            out.skipped
        );
    } else {
        let (cfg, mut state) = match resume {
            Some(path) => {
                let (profile, cfg, state) = load_train_state(&path)?;
                if cfg != run.trainer {
                    eprintln!(
                        "note: using the configuration stored in {} (profile {})",
                        path.display(),
                        profile
                    );
                }
                (cfg, state)
            }
            None => (run.trainer.clone(), TrainerState::new(&run.trainer, common.seed)?),
        };
        let target = state.step + steps;
        let mut sink = BufWriter::new(File::create(&metrics_path)?);
        while state.step < target {
            let next = (state.step + checkpoint_every.max(1)).min(target);
            train_until(&cfg, &mut state, next, Some(&mut sink))?;
            sink.flush()?;
            let ckpt = common.out.join(format!("state_step{}.smup", state.step));
            save_train_state(&ckpt, &run.profile, &cfg, &state)?;
        }
        save_rule_params(&theta_path, &run.profile, &state.theta)?;
        println!(
            "meta-trained to step {}; skipped {} non-finite batches",
            state.step, state.adam.skipped
        );
    }
    println!("rule parameters: {}", theta_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn cmd_rollout(
    common: &CommonArgs,
    task_args: &TaskArgs,
    theta_path: &Path,
    steps: Option<usize>,
    eval_every: Option<usize>,
) -> Result<()> {
    let run = effective_config(common)?;
    ensure_out(common)?;
    let (_, theta) = load_rule_params(theta_path)?;
    let task = task_from_args(task_args, run.trainer.tasks.two_moons_noise)?;
    let arch = arch_from_args(task_args, &task, run.trainer.embed_dim)?;
    let mut cfg = run.rollout.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(e) = eval_every {
        cfg.eval_every = e;
    }
    let out = rollout(&theta, &arch, &task, &cfg, common.seed)?;
    let csv_path = common.out.join("rollout.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    out.series.write_csv(&mut w)?;
    w.flush()?;
    let last = out.series.rows.last().expect("at least the step-0 row");
    println!(
        "rollout of {} steps: accuracy {:.4} (step 0: {:.4}), objective {:.6}",
        cfg.steps, last.few_shot_accuracy, out.series.rows[0].few_shot_accuracy,
        last.meta_objective
    );
    println!("metrics: {}", csv_path.display());
    Ok(())
}

fn cmd_baseline(common: &CommonArgs, task_args: &TaskArgs, steps: Option<usize>) -> Result<()> {
    let run = effective_config(common)?;
    let task = task_from_args(task_args, run.trainer.tasks.two_moons_noise)?;
    let arch = arch_from_args(task_args, &task, run.trainer.embed_dim)?;
    let mut cfg = run.baseline.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let out = baseline_supervised(&arch, &task, &cfg, common.seed)?;
    println!(
        "supervised baseline: accuracy {:.4} after {} steps ({} labeled per class)",
        out.accuracy, cfg.steps, cfg.labeled_per_class
    );
    Ok(())
}

fn cmd_filters(
    common: &CommonArgs,
    task_args: &TaskArgs,
    theta_path: &Path,
    steps: usize,
) -> Result<()> {
    let run = effective_config(common)?;
    ensure_out(common)?;
    let (_, theta) = load_rule_params(theta_path)?;
    let task = task_from_args(task_args, run.trainer.tasks.two_moons_noise)?;
    let arch = arch_from_args(task_args, &task, run.trainer.embed_dim)?;
    let mut cfg = run.rollout.clone();
    cfg.steps = steps;
    cfg.eval_every = steps.max(1);
    let out = rollout(&theta, &arch, &task, &cfg, common.seed)?;
    let filters = extract_filters(&out.phi, &task.permutation)?;
    for f in &filters {
        std::fs::write(common.out.join(format!("filter_{:03}.pgm", f.unit)), f.to_pgm())?;
    }
    let csv_path = common.out.join("filters.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    write_filters_csv(&filters, &mut w)?;
    w.flush()?;
    println!(
        "wrote {} receptive fields ({}x{}) to {} after {} updates",
        filters.len(),
        filters[0].grid,
        filters[0].grid,
        common.out.display(),
        steps
    );
    Ok(())
}

fn cmd_pca(common: &CommonArgs, input: &Path) -> Result<()> {
    ensure_out(common)?;
    let mut text = String::new();
    File::open(input)?.read_to_string(&mut text)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row =
            row.map_err(|e| Error::Config(format!("{}:{}: {}", input.display(), lineno + 1, e)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Config(format!(
                    "{}:{}: expected {} columns, found {}",
                    input.display(),
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{} holds no data", input.display())));
    }
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let data = Tensor::new(vec![rows.len(), d], flat)?;
    let pca = pca_explained_variance(&data)?;
    let csv_path = common.out.join("pca.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    write_pca_csv(&pca, &mut w)?;
    w.flush()?;
    println!(
        "{} samples, {} components; first component explains {:.4}",
        rows.len(),
        d,
        pca.fractions[0]
    );
    println!("curve: {}", csv_path.display());
    Ok(())
}

fn cmd_info(path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    // write through a fallible handle: piping into `head` must not panic
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "profile: {}", ckpt.profile)?;
        let kind = if ckpt.meta_json.contains("\"train_state\"") {
            "training state (resumable)"
        } else {
            "rule parameters"
        };
        writeln!(w, "kind: {}", kind)?;
        writeln!(w, "arrays: {}", ckpt.arrays.len())?;
        let total: usize = ckpt.arrays.iter().map(|(_, t)| t.numel()).sum();
        for (name, t) in &ckpt.arrays {
            writeln!(w, "  {}  {:?}", name, t.shape())?;
        }
        writeln!(w, "total parameters: {}", total)
    };
    match emit() {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}
