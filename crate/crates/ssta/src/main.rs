//! Command-line front end: dataset generation, co-training, evaluation,
//! ablation suites, and frame dumps. All functionality lives in the
//! library; this binary only parses arguments and wires calls.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ssta::experiments::{
    ablate_connectivity, ablate_lifelong, ablate_messages, dump_frames, scalability_smoke,
    ComparisonTable,
};
use ssta::protocol::{
    evaluate, load_checkpoint, run_training, LifelongStrategy, MsgMode, TrainConfig,
};
use ssta::world::{generate_dataset, preset, Dataset};

#[derive(Parser)]
#[command(name = "ssta", about = "Networked self-supervised traffic advisors", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view traffic dataset directory.
    GenWorld(GenWorldArgs),
    /// Co-train a network of advisors on a dataset.
    Train(TrainArgs),
    /// Evaluate checkpoints on a dataset with streaming inference.
    Eval(EvalArgs),
    /// Run ablation suites (message type, connectivity, lifelong).
    Ablate(AblateArgs),
    /// Dump ground-truth vs prediction frames as PNGs.
    DumpFrames(DumpArgs),
}

#[derive(Args)]
struct GenWorldArgs {
    /// Number of camera views (preset worlds: 2, 4, or 8).
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// World steps to record.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per chunk file.
    #[arg(long, default_value_t = 100)]
    chunk: usize,
    /// Override the preset vehicle count.
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Expected node count (validated against the dataset views).
    #[arg(long)]
    nodes: Option<usize>,
    /// Listen-set size for the k-nearest topology.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Prediction horizon T.
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Rounds per optimizer step.
    #[arg(long, default_value_t = 10)]
    batch: usize,
    #[arg(long, default_value = "emerged")]
    msg_mode: MsgMode,
    #[arg(long, default_value = "serial")]
    scheduler: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    /// Continual training strategy (streaming single pass).
    #[arg(long)]
    lifelong: Option<LifelongStrategy>,
    /// Replay buffer capacity D for --lifelong.
    #[arg(long, default_value_t = 300)]
    buffer: usize,
    /// Message input at rollout steps beyond the first: hold | zero.
    #[arg(long, default_value = "hold")]
    rollout_msgs: String,
    /// Feed each node its own broadcast as an extra sender.
    #[arg(long)]
    self_message: bool,
    /// Keep the pretrained message head fixed during co-training.
    #[arg(long)]
    freeze_msg_head: bool,
    /// Autoencoder pretraining epochs for the message pathway (0 = off).
    #[arg(long, default_value_t = 20)]
    pretrain_epochs: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of node_<id>.ckpt files.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    /// Skip this many leading steps of the dataset.
    #[arg(long, default_value_t = 0)]
    from_step: usize,
    /// Write the metric report CSV here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// messages | connectivity | lifelong | all
    #[arg(long)]
    suite: String,
    /// Fail (exit 2) when the expected mean ordering does not hold.
    #[arg(long = "assert")]
    assert_ordering: bool,
    /// Comma-separated dataset seeds shared by all arms.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Stream length per seed.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset time of the dumped rollout.
    #[arg(long, default_value_t = 0)]
    t: usize,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenWorld(args) => gen_world(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Ablate(args) => ablate_cmd(args),
        Command::DumpFrames(args) => dump_cmd(args),
    }
}

fn gen_world(args: GenWorldArgs) -> Result<()> {
    let mut cfg = preset(args.views, args.seed).context("building world preset")?;
    if let Some(vehicles) = args.vehicles {
        cfg.vehicles = vehicles;
    }
    generate_dataset(&cfg, args.steps, args.chunk, &args.out).context("writing dataset")?;
    println!(
        "wrote {} steps of {} views to {}",
        args.steps,
        cfg.views.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset).context("loading dataset")?;
    if let Some(nodes) = args.nodes {
        if dataset.config.views.len() != nodes {
            bail!("dataset has {} views, --nodes says {}", dataset.config.views.len(), nodes);
        }
    }
    let mut cfg = TrainConfig::new(args.k);
    cfg.horizon = args.horizon;
    cfg.epochs = args.epochs;
    cfg.lr = args.lr;
    cfg.batch = args.batch;
    cfg.msg_mode = args.msg_mode;
    cfg.parallel = match args.scheduler.as_str() {
        "serial" => false,
        "parallel" => true,
        other => bail!("unknown scheduler {other:?} (serial|parallel)"),
    };
    cfg.seed = args.seed;
    cfg.lifelong = args.lifelong.map(|strategy| (strategy, args.buffer));
    cfg.rollout_msgs = match args.rollout_msgs.as_str() {
        "hold" => ssta::node::RolloutMsgs::Hold,
        "zero" => ssta::node::RolloutMsgs::Zero,
        other => bail!("unknown rollout message policy {other:?} (hold|zero)"),
    };
    cfg.self_message = args.self_message;
    cfg.freeze_msg_head = args.freeze_msg_head;
    cfg.pretrain_epochs = args.pretrain_epochs;
    run_training(&args.dataset, &args.out, &cfg, args.resume).context("training")?;
    println!("training finished; metrics and checkpoints in {}", args.out.display());
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset).context("loading dataset")?;
    let dataset =
        if args.from_step > 0 { dataset.slice(args.from_step, dataset.steps) } else { dataset };
    let mut workers = std::collections::BTreeMap::new();
    let mut mode = MsgMode::Emerged;
    for view in &dataset.config.views {
        let path = args.checkpoint.join(format!("node_{}.ckpt", view.id));
        let (worker, meta) =
            load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        mode = meta.msg_mode;
        workers.insert(view.id, worker);
    }
    let report =
        evaluate(&mut workers, &dataset, args.horizon, mode, 0).context("evaluating")?;
    print!("{}", report.table());
    if let Some(out) = args.out {
        std::fs::write(&out, report.csv()).context("writing report csv")?;
        println!("report csv written to {}", out.display());
    }
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let suites: Vec<&str> = match args.suite.as_str() {
        "all" => vec!["messages", "connectivity", "lifelong", "scalability"],
        s @ ("messages" | "connectivity" | "lifelong" | "scalability") => vec![s],
        other => bail!("unknown suite {other:?} (messages|connectivity|lifelong|all)"),
    };
    let mut failed = Vec::new();
    for suite in suites {
        if suite == "scalability" {
            let base = ssta::experiments::default_spec("scalability", args.seeds.clone());
            let rows = scalability_smoke(
                args.steps.unwrap_or(60),
                args.epochs.unwrap_or(2),
                args.seeds[0],
                &base.train,
            )?;
            let mut text = String::from("scalability (parallel scheduler)\n");
            for row in &rows {
                text.push_str(&format!(
                    "{} nodes: {:.4} s/round over {} rounds, final mse {:.6e}\n",
                    row.nodes, row.seconds_per_round, row.rounds, row.mean_mse
                ));
            }
            print!("{text}");
            std::fs::write(args.out.join("scalability.txt"), text)?;
            continue;
        }
        let mut spec = ssta::experiments::default_spec(suite, args.seeds.clone());
        if let Some(steps) = args.steps {
            spec.steps = steps;
        }
        if let Some(epochs) = args.epochs {
            spec.train.epochs = epochs;
        }
        spec.train.horizon = args.horizon;
        let result: std::result::Result<ComparisonTable, ssta::experiments::ExperimentError> =
            match suite {
                "messages" => ablate_messages(&spec, args.assert_ordering),
                "connectivity" => ablate_connectivity(&spec, args.assert_ordering),
                "lifelong" => ablate_lifelong(&spec, args.assert_ordering),
                _ => unreachable!(),
            };
        match result {
            Ok(table) => {
                print!("{}", table.table());
                std::fs::write(args.out.join(format!("{suite}.csv")), table.csv())?;
                std::fs::write(args.out.join(format!("{suite}.txt")), table.table())?;
            }
            Err(ssta::experiments::ExperimentError::AssertionFailed(detail)) => {
                eprintln!("{suite}: ordering assertion failed: {detail}");
                failed.push(suite.to_string());
            }
            Err(other) => return Err(other.into()),
        }
    }
    if !failed.is_empty() {
        std::process::exit(2);
    }
    Ok(())
}

fn dump_cmd(args: DumpArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset).context("loading dataset")?;
    let files =
        dump_frames(&args.checkpoint, &dataset, args.t, args.horizon, &args.out)
            .context("dumping frames")?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}
