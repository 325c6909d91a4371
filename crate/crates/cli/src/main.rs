//! Command-line surface: train, eval, infer-multiturn, report.
//!
//! Exit codes: 0 ok, 2 config error, 3 i/o error, 4 simulator hard failure
//! in inference mode.

use clap::{Args, Parser, Subcommand};
use mulferl_core::checkpoint;
use mulferl_core::config::RunConfig;
use mulferl_core::env::generate_dataset;
use mulferl_core::feedback::{FeedbackError, Simulator};
use mulferl_core::metrics::read_stream;
use mulferl_core::trainer::{
    evaluate, infer_multiturn, run_training, RunMode, TrainError, TrainSummary,
};
use mulferl_core::vocab::Vocab;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_SIMULATOR: u8 = 4;

#[derive(Parser)]
#[command(
    name = "mulferl",
    about = "Multi-turn feedback-guided RL trainer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a training job from a config file.
    Train(TrainArgs),
    /// Greedy single-pass evaluation of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Test-time multi-turn refinement with a feedback simulator.
    InferMultiturn(InferArgs),
    /// Summarize metrics streams into plot-ready CSV files.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Mode override: mulferl | grpo-baseline | no-dpo | no-injection.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Split to evaluate: train | validation | test.
    #[arg(long, default_value = "validation")]
    split: String,
    /// Optional path for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Problem id from the config's dataset (searched across splits).
    #[arg(long)]
    problem_id: Option<u64>,
    /// Or a JSONL problem file (as exported by training runs).
    #[arg(long)]
    problems: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    max_turns: usize,
    /// Optional path for the machine-readable transcript (JSONL).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more metrics.jsonl paths (one per run).
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
    /// Directory for the CSV outputs.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::InferMultiturn(args) => cmd_infer(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn config_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (EXIT_CONFIG, e.to_string())
}

fn io_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (EXIT_IO, e.to_string())
}

fn train_err(e: TrainError) -> (u8, String) {
    let code = match &e {
        TrainError::Config(_) => EXIT_CONFIG,
        TrainError::Feedback(f) => match f {
            FeedbackError::MissingEndpoint | FeedbackError::MissingAuthEnv(_) => EXIT_CONFIG,
            _ => EXIT_SIMULATOR,
        },
        _ => EXIT_IO,
    };
    (code, e.to_string())
}

fn load_config(path: &Path) -> Result<RunConfig, (u8, String)> {
    RunConfig::load(path).map_err(|e| match e {
        TrainError::Io(io) => io_err(io),
        other => config_err(other),
    })
}

fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<mulferl_core::PolicyParams, (u8, String)> {
    checkpoint::load_params_checked(path, vocab).map_err(|e| match e {
        checkpoint::CheckpointError::Io(io) => io_err(io),
        other => config_err(other),
    })
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    let out_dir = args
        .out
        .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
        .ok_or_else(|| config_err("no output directory: pass --out or set out_dir"))?;
    let summary = run_training(&cfg, &out_dir).map_err(train_err)?;
    print_summary(&summary, &out_dir);
    Ok(())
}

fn parse_mode(s: &str) -> Result<RunMode, (u8, String)> {
    match s {
        "mulferl" => Ok(RunMode::Mulferl),
        "grpo-baseline" => Ok(RunMode::GrpoBaseline),
        "no-dpo" => Ok(RunMode::NoDpo),
        "no-injection" => Ok(RunMode::NoInjection),
        other => Err(config_err(format!(
            "unknown mode {other:?}; expected mulferl | grpo-baseline | no-dpo | no-injection"
        ))),
    }
}

fn print_summary(summary: &TrainSummary, out_dir: &Path) {
    println!(
        "trained mode={} seed={} steps={} final_val={:.4} best_val={:.4}{}",
        summary.mode.name(),
        summary.seed,
        summary.steps_completed,
        summary.final_val_solve_rate,
        summary.best_val_solve_rate,
        if summary.stopped_early {
            " (early stop)"
        } else {
            ""
        },
    );
    println!("outputs: {}", out_dir.display());
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let vocab = Vocab::standard();
    let params = load_checkpoint(&args.checkpoint, &vocab)?;
    let dataset = generate_dataset(cfg.dataset.n, cfg.dataset.seed, &vocab).map_err(config_err)?;
    let split = dataset
        .split(&args.split)
        .ok_or_else(|| config_err(format!("unknown split {:?}", args.split)))?;
    if split.is_empty() {
        return Err(config_err(format!("split {:?} is empty", args.split)));
    }
    let report = evaluate(&params, split, &vocab, cfg.train.max_response_len);
    println!(
        "split={} n={} solve_rate={:.4} format_rate={:.4}",
        args.split, report.n, report.solve_rate, report.format_rate
    );
    for (class, n, solved) in &report.per_class {
        let rate = *solved as f64 / (*n).max(1) as f64;
        println!("  class {class}: n={n} solved={solved} rate={rate:.4}");
    }
    if let Some(out) = args.out {
        let json = serde_json::to_string_pretty(&report).map_err(io_err)?;
        std::fs::write(out, json).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    if args.max_turns < 1 {
        return Err(config_err("max_turns must be >= 1"));
    }
    let cfg = load_config(&args.config)?;
    let vocab = Vocab::standard();
    let params = load_checkpoint(&args.checkpoint, &vocab)?;
    let simulator = Simulator::new(cfg.train.simulator.clone(), vocab.clone())
        .map_err(|e| train_err(TrainError::Feedback(e)))?;

    let problems = if let Some(path) = &args.problems {
        let file = std::fs::File::open(path).map_err(io_err)?;
        mulferl_core::env::import_jsonl(std::io::BufReader::new(file), &vocab)
            .map_err(config_err)?
    } else if let Some(id) = args.problem_id {
        let dataset =
            generate_dataset(cfg.dataset.n, cfg.dataset.seed, &vocab).map_err(config_err)?;
        let found = dataset
            .train
            .iter()
            .chain(&dataset.validation)
            .chain(&dataset.test)
            .find(|p| p.id == id)
            .cloned()
            .ok_or_else(|| config_err(format!("problem id {id} not in dataset")))?;
        vec![found]
    } else {
        return Err(config_err("pass --problem-id or --problems"));
    };

    let mut transcripts = Vec::new();
    for problem in &problems {
        let t = infer_multiturn(
            problem,
            &params,
            &simulator,
            args.max_turns,
            cfg.train.max_response_len,
            cfg.train.max_feedback_len,
            &vocab,
        )
        .map_err(train_err)?;
        println!(
            "problem {} [{}]:",
            problem.id,
            vocab.render(&problem.prompt_tokens)
        );
        for turn in &t.trace {
            println!(
                "  turn {}: reward={} format_ok={} answer_ok={}",
                turn.turn + 1,
                turn.outcome.reward,
                turn.outcome.format_ok,
                turn.outcome.answer_ok
            );
            println!("    {}", turn.rendered);
            if let Some(fb) = &turn.feedback {
                println!("    feedback: {}", vocab.render(&fb.tokens));
            }
        }
        println!(
            "  => answer={} turns_used={} verified={}",
            t.answer_rendered.as_deref().unwrap_or("(none)"),
            t.turns_used,
            t.verified
        );
        transcripts.push(t);
    }

    if let Some(out) = args.out {
        let mut lines = String::new();
        for t in &transcripts {
            lines.push_str(&serde_json::to_string(t).map_err(io_err)?);
            lines.push('\n');
        }
        std::fs::write(out, lines).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    std::fs::create_dir_all(&args.out).map_err(io_err)?;
    let mut loss_csv = String::from("run,step,grpo_loss,dpo_loss,val_solve_rate\n");
    let mut regen_csv =
        String::from("run,step,grpo,dpo,skip_allpos,skip_allfail,regenerated,simulator_calls\n");
    let mut sweep_csv = String::from(
        "run,mode,max_turns,best_val_solve_rate,final_val_solve_rate,mean_step_seconds\n",
    );

    for path in &args.metrics {
        let run = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let stream = read_stream(path).map_err(io_err)?;
        if stream.truncated {
            eprintln!(
                "warning: {} is truncated; reporting the readable prefix",
                path.display()
            );
        }
        for r in &stream.records {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            loss_csv.push_str(&format!(
                "{run},{},{},{},{}\n",
                r.step,
                fmt(r.mean_loss_grpo),
                fmt(r.mean_loss_dpo),
                fmt(r.val_solve_rate)
            ));
            let regenerated: usize = r.regen_per_turn.iter().sum();
            regen_csv.push_str(&format!(
                "{run},{},{},{},{},{},{},{}\n",
                r.step,
                r.branch_counts.grpo,
                r.branch_counts.dpo,
                r.branch_counts.skip_allpos,
                r.branch_counts.skip_allfail,
                regenerated,
                r.simulator_calls
            ));
        }
        // Sibling run summary, when present, feeds the turn-budget sweep.
        let summary_path = path.with_file_name("run_summary.json");
        if let Ok(text) = std::fs::read_to_string(&summary_path) {
            if let Ok(s) = serde_json::from_str::<TrainSummary>(&text) {
                sweep_csv.push_str(&format!(
                    "{run},{},{},{},{},{}\n",
                    s.mode.name(),
                    s.max_turns,
                    s.best_val_solve_rate,
                    s.final_val_solve_rate,
                    s.mean_step_seconds
                ));
            }
        }
    }

    std::fs::write(args.out.join("loss_curves.csv"), loss_csv).map_err(io_err)?;
    std::fs::write(args.out.join("regen_by_step.csv"), regen_csv).map_err(io_err)?;
    std::fs::write(args.out.join("turn_budget_sweep.csv"), sweep_csv).map_err(io_err)?;
    println!("report written to {}", args.out.display());
    Ok(())
}
