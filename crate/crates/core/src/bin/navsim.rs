//! Command-line front end: train either policy level, evaluate the
//! hierarchical stack, or export a recorded episode log.

use clap::{Parser, Subcommand, ValueEnum};
use navsim::config::{load_config, ConfigError, RunConfig};
use navsim::metrics::{StepRow, EPISODE_CSV_HEADER};
use navsim::runner::{run_eval, RunError};
use navsim::training::{run_train_high, run_train_low};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "navsim", version, about = "Mapless hierarchical navigation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the sub-goal selection network against a scenario file.
    TrainHigh {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the motion policy on randomized arenas.
    TrainLow {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate checkpoints and write per-episode logs plus metrics.
    Eval {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Episode count override.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Convert a recorded episode log to another format on stdout.
    Replay {
        /// Episode CSV produced by eval.
        #[arg(long)]
        log: PathBuf,
        /// Output format.
        #[arg(long, value_enum)]
        out: ReplayFormat,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum ReplayFormat {
    Svg,
    Csv,
}

/// CLI failure split by exit code: 1 for usage or config problems, 2 for
/// runtime failures.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => CliError::Usage(c.to_string()),
            RunError::Scenario(s) => CliError::Usage(format!("scenario: {}", s)),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
    }
}

/// Seed override from the environment, if present and well formed.
fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("NAVSIM_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("invalid NAVSIM_SEED value '{}'", s))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn load(path: &PathBuf) -> Result<RunConfig, CliError> {
    let seed = env_seed()?;
    Ok(load_config(path, seed)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::TrainHigh { config } => {
            let cfg = load(&config)?;
            let res = run_train_high(&cfg)?;
            let last = res.curve.last();
            println!(
                "trained {} episodes, grad steps {}, outputs in {}",
                res.curve.len(),
                last.map_or(0, |r| r.grad_step),
                cfg.run.out_dir
            );
            Ok(())
        }
        Cmd::TrainLow { config } => {
            let cfg = load(&config)?;
            let res = run_train_low(&cfg)?;
            println!(
                "trained {} updates, outputs in {}",
                res.curve.len(),
                cfg.run.out_dir
            );
            Ok(())
        }
        Cmd::Eval { config, episodes } => {
            let cfg = load(&config)?;
            let n = episodes.unwrap_or(cfg.run.episodes);
            let out = run_eval(&cfg, n)?;
            println!("{}", out.report.to_json(&out.config_hash));
            Ok(())
        }
        Cmd::Replay { log, out } => {
            let text = std::fs::read_to_string(&log)
                .map_err(|e| CliError::Usage(format!("cannot read log: {}", e)))?;
            let rows = parse_log(&text).map_err(CliError::Usage)?;
            match out {
                ReplayFormat::Csv => print!("{}", rows_csv(&rows)),
                ReplayFormat::Svg => print!("{}", rows_svg(&rows)),
            }
            Ok(())
        }
    }
}

/// Parse an episode CSV back into step rows, validating the header.
fn parse_log(text: &str) -> Result<Vec<StepRow>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty log")?;
    if header != EPISODE_CSV_HEADER {
        return Err(format!("unrecognized log header '{}'", header));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(format!("row {}: expected 11 fields, got {}", i + 1, f.len()));
        }
        let num = |j: usize| -> Result<f64, String> {
            f[j].parse()
                .map_err(|_| format!("row {}: bad number '{}'", i + 1, f[j]))
        };
        rows.push(StepRow {
            t: num(0)?,
            x: num(1)?,
            y: num(2)?,
            theta: num(3)?,
            v: num(4)?,
            omega: num(5)?,
            subgoal_x: num(6)?,
            subgoal_y: num(7)?,
            congestion: num(8)?,
            threshold: num(9)?,
            collision: num(10)? != 0.0,
        });
    }
    Ok(rows)
}

fn rows_csv(rows: &[StepRow]) -> String {
    let mut s = String::from(EPISODE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.x,
            r.y,
            r.theta,
            r.v,
            r.omega,
            r.subgoal_x,
            r.subgoal_y,
            r.congestion,
            r.threshold,
            r.collision as u8
        ));
    }
    s
}

/// Render the trajectory, sub-goal switches, and collision marks as SVG.
fn rows_svg(rows: &[StepRow]) -> String {
    const SIZE: f64 = 640.0;
    const PAD: f64 = 20.0;
    let xs = rows.iter().flat_map(|r| [r.x, r.subgoal_x]);
    let ys = rows.iter().flat_map(|r| [r.y, r.subgoal_y]);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    for y in ys {
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if rows.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-6);
    let scale = (SIZE - 2.0 * PAD) / span;
    let px = |x: f64| PAD + (x - x0) * scale;
    let py = |y: f64| SIZE - PAD - (y - y0) * scale;

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
        SIZE
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if !rows.is_empty() {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.x), py(r.y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        let first = &rows[0];
        let last = &rows[rows.len() - 1];
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"6\" fill=\"#2ca02c\"/>\n",
            px(first.x),
            py(first.y)
        ));
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"6\" fill=\"#d62728\"/>\n",
            px(last.x),
            py(last.y)
        ));
        let mut prev = (f64::NAN, f64::NAN);
        for r in rows {
            if (r.subgoal_x, r.subgoal_y) != prev {
                prev = (r.subgoal_x, r.subgoal_y);
                s.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"2\"/>\n",
                    px(r.subgoal_x),
                    py(r.subgoal_y)
                ));
            }
            if r.collision {
                s.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"6\" height=\"6\" fill=\"#d62728\"/>\n",
                    px(r.x) - 3.0,
                    py(r.y) - 3.0
                ));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
