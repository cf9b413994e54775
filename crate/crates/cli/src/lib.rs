//! Command-line front end: `train`, `theory` and `list-presets`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use smix_core::harness::{self, ConfigSource, PresetRun, RunSpec, TheorySuite};
use smix_core::Error;

/// Exit code for a finished command.
pub const EXIT_OK: i32 = 0;
/// Exit code for runtime failures and failed theory checks.
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for bad arguments, unknown presets or keys, and invalid values.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "smix", version, about = "Multi-agent lambda-return value learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a preset (every member of a sweep) or a config file.
    Train(TrainArgs),
    /// Run a tabular theory suite and write its CSV.
    Theory(TheoryArgs),
    /// Print every preset with its description.
    ListPresets,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preset name; see `list-presets`.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// TOML config file instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    /// update-gap, policy-evaluation or greedy-decomposition.
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the tool on `args` (including the program name) and returns the exit
/// code. Normal output goes to `out`, diagnostics to `err`.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a, out),
        Command::Theory(a) => theory(a, out),
        Command::ListPresets => list_presets(out),
    };
    match result {
        Ok(code) => code,
        Err(Error::Config(problems)) => {
            let _ = writeln!(err, "config error:");
            for p in problems {
                let _ = writeln!(err, "  {p}");
            }
            EXIT_CONFIG
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> smix_core::Result<i32> {
    let mut overrides = a.set;
    if let Some(seed) = a.seed {
        overrides.push(format!("seed={seed}"));
    }
    let runs = match (&a.preset, &a.config) {
        (Some(name), _) => {
            if harness::preset(name)?.run == PresetRun::Theory {
                let seed = a.seed.unwrap_or(0);
                return run_suites(&TheorySuite::ALL, seed, &a.out, out);
            }
            harness::preset_runs(name, &overrides)?
        }
        (None, Some(path)) => vec![RunSpec {
            label: String::new(),
            config: harness::load_config(ConfigSource::File(path), &overrides)?,
        }],
        (None, None) => unreachable!("clap requires --preset or --config"),
    };
    let nested = runs.len() > 1;
    for run in runs {
        let dir = if nested { a.out.join(&run.label) } else { a.out.clone() };
        let log = harness::train_to_dir(&run.config, &dir)?;
        let last = log.last().map(|r| (r.env_steps, r.eval_median_return));
        match last {
            Some((steps, median)) => writeln!(
                out,
                "{}: {steps} steps, final median return {median}, wrote {}",
                display_label(&run.label),
                dir.display()
            )?,
            None => writeln!(out, "{}: no steps, wrote {}", display_label(&run.label), dir.display())?,
        }
    }
    Ok(EXIT_OK)
}

fn display_label(label: &str) -> &str {
    if label.is_empty() {
        "config"
    } else {
        label
    }
}

fn theory(a: TheoryArgs, out: &mut dyn Write) -> smix_core::Result<i32> {
    let suite = TheorySuite::from_name(&a.suite)?;
    run_suites(&[suite], a.seed, &a.out, out)
}

fn run_suites(suites: &[TheorySuite], seed: u64, dir: &Path, out: &mut dyn Write) -> smix_core::Result<i32> {
    let mut code = EXIT_OK;
    for &s in suites {
        let passed = s.run_to_dir(seed, dir)?;
        writeln!(
            out,
            "{}: {} ({})",
            s.name(),
            if passed { "pass" } else { "FAIL" },
            dir.join(s.file_name()).display()
        )?;
        if !passed {
            code = EXIT_FAILURE;
        }
    }
    Ok(code)
}

fn list_presets(out: &mut dyn Write) -> smix_core::Result<i32> {
    for p in harness::presets() {
        writeln!(out, "{:<16} {}", p.name, p.description)?;
    }
    Ok(EXIT_OK)
}
