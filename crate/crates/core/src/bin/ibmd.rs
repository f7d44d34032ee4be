use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ibmd::cli::{load_config, run, Command};
use ibmd::{scenarios, Error};

#[derive(Parser)]
#[command(
    name = "ibmd",
    version,
    about = "Bridge matching teachers and their distilled few-step generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a bridge matching teacher on the configured coupling.
    TrainTeacher(RunArgs),
    /// Distill a teacher into a generator using corrupted samples only.
    Distill(RunArgs),
    /// Score a saved generator against its teacher over an NFE sweep.
    Eval(RunArgs),
    /// Monte Carlo check of the inverse-problem identity on an exact coupling.
    VerifyIdentity(RunArgs),
    /// Run a reference scenario (`c1`..`c12` or `all`).
    Scenario {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(cmd: Cmd) -> Result<bool, Error> {
    let (command, args) = match cmd {
        Cmd::TrainTeacher(a) => (Command::TrainTeacher, a),
        Cmd::Distill(a) => (Command::Distill, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::VerifyIdentity(a) => (Command::VerifyIdentity, a),
        Cmd::Scenario { name, seed, out } => {
            let out = out.unwrap_or_else(scenarios::default_out);
            let outcomes = scenarios::run_named(&name, seed, &out)?;
            for o in &outcomes {
                println!("{}", o.line());
            }
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("scenario_{name}.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&outcomes)? + "\n")?;
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    };
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(command.name()));
    let summary = run(command, cfg, &out)?;
    for line in &summary.lines {
        println!("{line}");
    }
    println!("artifacts: {}", summary.out_dir.display());
    Ok(summary.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let mut body = json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            if let Error::Divergence { step, loss, trace, .. } = &e {
                body["step"] = json!(step);
                body["loss"] = json!(loss);
                body["trace"] = json!(trace);
            }
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
