use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stgformer::data::{load_dataset, synth, save_dataset, ReadingsFormat, Split, SynthSpec};
use stgformer::flops::FlopsReport;
use stgformer::model::{load_checkpoint, save_checkpoint, StgConfig, StgModel};
use stgformer::train::{evaluate, predict, train};
use stgformer::util::atomic_write;
use stgformer::verify::run_all;
use stgformer::Result;

#[derive(Parser)]
#[command(name = "stg", version, about = "Single-layer spatiotemporal graph transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic traffic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Forecast one window and write predictions.
    Predict(PredictArgs),
    /// Closed-form multiply-add analysis.
    Flops(FlopsArgs),
    /// Run the self-verification property suite.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Stgt,
    Csv,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 28)]
    days: usize,
    /// Sampling interval in minutes; must divide 1440.
    #[arg(long, default_value_t = 5)]
    interval: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fraction of readings zeroed out as missing.
    #[arg(long, default_value_t = 0.02)]
    missing_rate: f64,
    #[arg(long, value_enum, default_value = "stgt")]
    format: FormatArg,
}

#[derive(Args)]
struct ModelFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable the spatial attention branch.
    #[arg(long)]
    no_spatial_attn: bool,
    /// Disable the temporal attention branch.
    #[arg(long)]
    no_temporal_attn: bool,
    /// Disable graph propagation (K = 0).
    #[arg(long)]
    no_graph: bool,
    /// Attention mode: softmax (quadratic) or linear (factored).
    #[arg(long, value_parser = ["softmax", "linear"])]
    attn_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ModelFlags {
    fn build_config(&self, interval_minutes: usize) -> Result<StgConfig> {
        let mut cfg = match &self.config {
            Some(path) => StgConfig::from_file(path)?,
            None => StgConfig::default(),
        };
        cfg.interval_minutes = interval_minutes;
        if self.no_spatial_attn {
            cfg.use_spatial = false;
        }
        if self.no_temporal_attn {
            cfg.use_temporal = false;
        }
        if self.no_graph {
            cfg.use_graph = false;
        }
        if let Some(mode) = &self.attn_mode {
            cfg.attn = mode.parse()?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.max_epochs = epochs;
        }
        cfg.apply_env_override()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `stg synth` or hand-assembled).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Also write the per-horizon table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// First input step of the forecast window.
    #[arg(long)]
    start: usize,
    /// CSV output (`step,node,pred,truth`); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional binary tensor output of the `[S, N, 1]` forecast.
    #[arg(long)]
    tensor: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 8600)]
    nodes: u128,
    #[arg(long, default_value_t = 12)]
    steps: u128,
    #[arg(long, default_value_t = 32)]
    channels: u128,
    /// Propagation order K of the single-layer block.
    #[arg(long, default_value_t = 3)]
    order: u128,
    #[arg(long, default_value_t = 201_363)]
    edges: u128,
    /// Layer count of the quadratic-attention baseline.
    #[arg(long, default_value_t = 3)]
    layers: u128,
    /// Emit JSON only.
    #[arg(long)]
    json: bool,
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_nodes: args.nodes,
        days: args.days,
        interval_minutes: args.interval,
        seed: args.seed,
        missing_rate: args.missing_rate,
        ..SynthSpec::default()
    };
    let ds = synth(&spec)?;
    let format = match args.format {
        FormatArg::Stgt => ReadingsFormat::Stgt,
        FormatArg::Csv => ReadingsFormat::Csv,
    };
    save_dataset(&ds, &args.out, format)?;
    println!(
        "wrote {} nodes x {} steps ({} edges) to {}",
        ds.n_nodes(),
        ds.total_steps(),
        ds.graph.n_edges(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let cfg = args.model.build_config(ds.interval_minutes)?;
    let mut model = StgModel::init(&cfg, &ds.graph, 1)?;
    println!("{} parameters, {} train windows", model.count_params(), {
        let starts = ds.window_starts(Split::Train, cfg.t_in, cfg.s_out)?;
        starts.len()
    });
    let (state, stats) = train(&mut model, &ds, Some(&args.out))?;
    save_checkpoint(&model, &stats, &args.out)?;
    for (epoch, (train_loss, val_mae)) in state.history.iter().enumerate() {
        println!("epoch {:>3}: train loss {train_loss:.6}, val MAE {val_mae:.6}", epoch + 1);
    }
    println!(
        "finished after {} epochs, best val MAE {:.6}; checkpoint: {}",
        state.epochs_run,
        state.best_val_mae,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let (model, stats) = load_checkpoint(&args.checkpoint)?;
    let report = evaluate(&model, &ds, &stats, args.split.into(), args.threads.max(1))?;
    println!("{}", report.to_json_line());
    if let Some(path) = &args.csv {
        atomic_write(path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let (model, stats) = load_checkpoint(&args.checkpoint)?;
    let pred = predict(&model, &ds, &stats, args.start)?;
    if let Some(path) = &args.tensor {
        pred.save_stgt(path)?;
    }
    let (s_out, n) = (pred.shape[0], pred.shape[1]);
    let mut csv = String::from("step,node,pred,truth\n");
    for s in 0..s_out {
        let t = args.start + model.config.t_in + s;
        for i in 0..n {
            let truth = if t < ds.total_steps() {
                format!("{:?}", ds.readings.data[t * n + i])
            } else {
                String::new()
            };
            csv.push_str(&format!("{t},{i},{:?},{truth}\n", pred.data[s * n + i]));
        }
    }
    match &args.out {
        Some(path) => atomic_write(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let report = FlopsReport::build(
        args.nodes,
        args.steps,
        args.channels,
        args.order,
        args.edges,
        args.layers,
    )?;
    println!("{}", report.to_json());
    if !args.json {
        print!("{report}");
        if args.order != 1 {
            let k1 = FlopsReport::build(
                args.nodes,
                args.steps,
                args.channels,
                1,
                args.edges,
                args.layers,
            )?;
            println!(
                "  ratio at K=1              = {} (the commonly quoted per-order figure)",
                k1.ratio.rendered
            );
        }
    }
    Ok(())
}

fn cmd_verify() -> ExitCode {
    let results = run_all();
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("[{status}] {:<40} {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} properties failed", results.len());
        ExitCode::FAILURE
    } else {
        println!("all {} properties hold", results.len());
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Verify => return cmd_verify(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
