//! Experiment presets, layered configuration loading, and the files a run
//! leaves behind.
//!
//! A configuration is resolved in layers, later layers winning:
//!
//! 1. the preset's config, or a TOML file (flat keys; `[section]` headers are
//!    accepted and flattened, so a file may group keys for readability);
//! 2. environment variables `SMIX_SET_<KEY>=<value>` (key upper-cased, e.g.
//!    `SMIX_SET_TOTAL_STEPS=5000`);
//! 3. explicit `key=value` overrides, in order.
//!
//! Override values are parsed as TOML literals (`0.5`, `true`,
//! `"monotone_hypernet"`, `[[1, 0], [0, 0]]`); anything that does not parse
//! is taken as a bare string, so `mixer=additive` works unquoted. The extra
//! key `buffer=<b>` sets `buffer_capacity` and caps `batch_size` at `b`.
//!
//! Unknown keys, type errors and range violations are collected and returned
//! together as [`Error::Config`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::mixers::{greedy_decomposition_check, Mixer, MixerKind};
use crate::rng;
use crate::targets::{BootstrapMode, TargetKind};
use crate::theory::{self, PolicyEvaluationRow, UpdateGapRow};
use crate::trainer::{MetricsLog, TrainConfig, Trainer};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "SMIX_SET_";

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";

/// One member of a sweep: a label and the overrides that distinguish it.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<String>,
}

impl Variant {
    fn new(label: impl Into<String>, overrides: &[&str]) -> Self {
        Self {
            label: label.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PresetRun {
    /// One training run.
    Single,
    /// One training run per variant, each in its own subdirectory.
    Sweep(Vec<Variant>),
    /// The tabular theory suites; no training.
    Theory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPreset {
    pub name: &'static str,
    pub description: &'static str,
    pub config: TrainConfig,
    pub run: PresetRun,
}

fn one_step(mixer: MixerKind) -> TrainConfig {
    TrainConfig {
        mixer,
        target: TargetKind::OneStepMax,
        bootstrap: BootstrapMode::GreedyMax,
        ..TrainConfig::default()
    }
}

fn lambda_return(mixer: MixerKind) -> TrainConfig {
    TrainConfig {
        mixer,
        ..TrainConfig::default()
    }
}

pub fn presets() -> Vec<ExperimentPreset> {
    use MixerKind::*;
    let single = |name, description, config| ExperimentPreset {
        name,
        description,
        config,
        run: PresetRun::Single,
    };
    let sweep = |name, description, config, variants| ExperimentPreset {
        name,
        description,
        config,
        run: PresetRun::Sweep(variants),
    };
    vec![
        single(
            "mstep-smix",
            "m-step game, monotone hypernetwork mixer, lambda-return targets (lambda 0.8)",
            lambda_return(MonotoneHypernet),
        ),
        single(
            "mstep-qmix",
            "m-step game, monotone hypernetwork mixer, one-step greedy-max targets",
            one_step(MonotoneHypernet),
        ),
        single(
            "mstep-vdn",
            "m-step game, additive mixer, one-step greedy-max targets",
            one_step(Additive),
        ),
        single(
            "mstep-vdnr",
            "m-step game, additive mixer, lambda-return targets",
            lambda_return(Additive),
        ),
        single(
            "mstep-iql",
            "m-step game, independent learners (identity mixer), one-step greedy-max targets",
            one_step(Identity),
        ),
        single(
            "mstep-iqlr",
            "m-step game, independent learners (identity mixer), lambda-return targets",
            lambda_return(Identity),
        ),
        sweep(
            "lambda-sweep",
            "mstep-smix with lambda in {0, 0.3, 0.6, 0.8, 1}",
            lambda_return(MonotoneHypernet),
            [0.0, 0.3, 0.6, 0.8, 1.0]
                .iter()
                .map(|l| Variant::new(format!("lambda-{l}"), &[&format!("lambda={l:?}")]))
                .collect(),
        ),
        sweep(
            "nstep-sweep",
            "mstep-smix with n-step targets, n in {1, 2, 4, 8}",
            TrainConfig {
                target: TargetKind::NStep,
                ..lambda_return(MonotoneHypernet)
            },
            [1, 2, 4, 8]
                .iter()
                .map(|n| Variant::new(format!("n-{n}"), &[&format!("n_step={n}")]))
                .collect(),
        ),
        sweep(
            "buffer-sweep",
            "mstep-smix with buffer size in {4, 32, 1500}; 4 is the on-policy variant",
            lambda_return(MonotoneHypernet),
            [4, 32, 1500]
                .iter()
                .map(|b| Variant::new(format!("buffer-{b}"), &[&format!("buffer={b}")]))
                .collect(),
        ),
        sweep(
            "noabs-ablation",
            "mstep-smix and mstep-qmix with and without non-negative mixing weights",
            lambda_return(MonotoneHypernet),
            vec![
                Variant::new("smix", &[]),
                Variant::new("smix-noabs", &["enforce_nonneg=false"]),
                Variant::new("qmix", &["target=one_step_max", "bootstrap=greedy_max"]),
                Variant::new(
                    "qmix-noabs",
                    &["target=one_step_max", "bootstrap=greedy_max", "enforce_nonneg=false"],
                ),
            ],
        ),
        ExperimentPreset {
            name: "theory-suite",
            description: "tabular checks: update-gap bound, policy-evaluation convergence, greedy decomposition",
            config: TrainConfig::default(),
            run: PresetRun::Theory,
        },
    ]
}

pub fn preset(name: &str) -> Result<ExperimentPreset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(vec![format!("unknown preset `{name}`")]))
}

#[derive(Clone, Copy, Debug)]
pub enum ConfigSource<'a> {
    Preset(&'a str),
    File(&'a Path),
    Text(&'a str),
}

/// `key=value` pairs taken from `SMIX_SET_*` variables.
pub fn env_overrides() -> Vec<String> {
    let mut out: Vec<String> = std::env::vars()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|key| format!("{}={v}", key.to_ascii_lowercase()))
        })
        .collect();
    out.sort();
    out
}

/// Resolves a config from `source`, the `SMIX_SET_*` environment, and
/// `overrides`.
pub fn load_config(source: ConfigSource<'_>, overrides: &[String]) -> Result<TrainConfig> {
    let mut all = env_overrides();
    all.extend_from_slice(overrides);
    load_config_with(source, &all)
}

/// As [`load_config`] but ignoring the environment.
pub fn load_config_with(source: ConfigSource<'_>, overrides: &[String]) -> Result<TrainConfig> {
    let mut errs = Vec::new();
    let mut table = base_table(source)?;
    let known = match Value::try_from(TrainConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config serializes to a table"),
    };
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => apply_override(&mut table, k.trim(), parse_value(v.trim()), &mut errs),
            None => errs.push(format!("override `{o}` is not key=value")),
        }
    }
    let mut good = Table::new();
    for (k, v) in table {
        if !known.contains_key(&k) {
            errs.push(format!("unknown key `{k}`"));
            continue;
        }
        let mut single = Table::new();
        single.insert(k.clone(), v.clone());
        match single.try_into::<TrainConfig>() {
            Ok(_) => {
                good.insert(k, v);
            }
            Err(e) => errs.push(format!("key `{k}`: {}", e.message().trim())),
        }
    }
    let config: TrainConfig = good
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![e.message().trim().to_string()]))?;
    if let Err(Error::Config(range)) = config.validate() {
        errs.extend(range);
    }
    if errs.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(errs))
    }
}

fn base_table(source: ConfigSource<'_>) -> Result<Table> {
    match source {
        ConfigSource::Preset(name) => match Value::try_from(preset(name)?.config) {
            Ok(Value::Table(t)) => Ok(t),
            _ => unreachable!("config serializes to a table"),
        },
        ConfigSource::File(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
            parse_text(&text)
        }
        ConfigSource::Text(text) => parse_text(text),
    }
}

fn parse_text(text: &str) -> Result<Table> {
    let raw: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("config syntax: {}", e.message().trim())]))?;
    let mut flat = Table::new();
    let mut errs = Vec::new();
    for (k, v) in raw {
        let entries = match v {
            Value::Table(section) => section.into_iter().collect(),
            v => vec![(k, v)],
        };
        for (k, v) in entries {
            if flat.insert(k.clone(), v).is_some() {
                errs.push(format!("key `{k}` given twice"));
            }
        }
    }
    if errs.is_empty() {
        Ok(flat)
    } else {
        Err(Error::Config(errs))
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, key: &str, value: Value, errs: &mut Vec<String>) {
    if key != "buffer" {
        table.insert(key.to_string(), value);
        return;
    }
    let Some(b) = value.as_integer().filter(|&b| b > 0) else {
        errs.push(format!("key `buffer`: expected a positive integer, got {value}"));
        return;
    };
    table.insert("buffer_capacity".into(), Value::Integer(b));
    let batch = table
        .get("batch_size")
        .and_then(Value::as_integer)
        .unwrap_or(TrainConfig::default().batch_size as i64);
    table.insert("batch_size".into(), Value::Integer(batch.min(b)));
}

/// The resolved config as TOML; loading it back with
/// [`ConfigSource::File`] yields the same config.
pub fn config_echo(config: &TrainConfig) -> String {
    toml::to_string(config).expect("config serializes")
}

/// A labelled, fully resolved training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub config: TrainConfig,
}

/// Resolves every training run of a preset. Variant overrides are applied
/// after the environment and `overrides`. Theory presets have no runs.
pub fn preset_runs(name: &str, overrides: &[String]) -> Result<Vec<RunSpec>> {
    let p = preset(name)?;
    let mut base = env_overrides();
    base.extend_from_slice(overrides);
    match p.run {
        PresetRun::Single => Ok(vec![RunSpec {
            label: p.name.to_string(),
            config: load_config_with(ConfigSource::Preset(name), &base)?,
        }]),
        PresetRun::Sweep(variants) => variants
            .into_iter()
            .map(|v| {
                let mut all = base.clone();
                all.extend(v.overrides);
                Ok(RunSpec {
                    label: v.label,
                    config: load_config_with(ConfigSource::Preset(name), &all)?,
                })
            })
            .collect(),
        PresetRun::Theory => Ok(Vec::new()),
    }
}

/// Trains `config` and writes the config echo, metrics and final checkpoint
/// into `dir`.
pub fn train_to_dir(config: &TrainConfig, dir: &Path) -> Result<MetricsLog> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config_echo(config))?;
    let mut trainer = Trainer::new(config.clone())?;
    let log = trainer.run()?;
    fs::write(dir.join(METRICS_FILE), log.to_csv())?;
    fs::write(dir.join(CHECKPOINT_FILE), trainer.checkpoint())?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionRow {
    pub instance_id: usize,
    pub mixer: &'static str,
    pub holds: bool,
    pub brute_force_max: f64,
    pub greedy_value: f64,
    pub witness: Vec<usize>,
}

/// Agents and actions per greedy-decomposition instance.
pub const DECOMPOSITION_AGENTS: usize = 2;
pub const DECOMPOSITION_ACTIONS: usize = 5;
const DECOMPOSITION_STATE_DIM: usize = 4;

/// Brute-force greedy decomposition on random instances of the monotone
/// hypernetwork mixer (fresh parameters and state per instance), the additive
/// mixer, and the non-monotone `Q_tot = Q_1 - Q_2`.
pub fn greedy_decomposition_suite(seed: u64, instances: usize) -> Result<Vec<DecompositionRow>> {
    let (n, a) = (DECOMPOSITION_AGENTS, DECOMPOSITION_ACTIONS);
    let mut rows = Vec::new();
    for id in 0..instances {
        let mut r = rng::stream(seed, id as u64);
        let mut tables = || -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..a).map(|_| r.gen_range(-5.0..5.0)).collect())
                .collect()
        };
        let (t_mono, t_add, t_diff) = (tables(), tables(), tables());

        let mono = Mixer::new(MixerKind::MonotoneHypernet, n, DECOMPOSITION_STATE_DIM);
        let params = mono.init_params(&mut r);
        let state: Vec<f64> = (0..DECOMPOSITION_STATE_DIM).map(|_| r.gen_range(-1.0..1.0)).collect();
        let add = Mixer::new(MixerKind::Additive, n, 0);
        let add_params = add.init_params(&mut r);

        let checks = [
            (
                "monotone_hypernet",
                mono.greedy_decomposition_check(&params, &t_mono, &state)?,
            ),
            ("additive", add.greedy_decomposition_check(&add_params, &t_add, &[])?),
            ("difference", greedy_decomposition_check(|q| Ok(q[0] - q[1]), &t_diff)?),
        ];
        for (mixer, c) in checks {
            rows.push(DecompositionRow {
                instance_id: id,
                mixer,
                holds: c.holds,
                brute_force_max: c.brute_force_max,
                greedy_value: c.greedy_value,
                witness: c.witness,
            });
        }
    }
    Ok(rows)
}

/// The monotone and additive instances all hold and the difference mixer
/// fails at least once.
pub fn decomposition_suite_passed(rows: &[DecompositionRow]) -> bool {
    rows.iter().filter(|r| r.mixer != "difference").all(|r| r.holds)
        && rows.iter().any(|r| r.mixer == "difference" && !r.holds)
}

pub fn update_gap_csv(rows: &[UpdateGapRow]) -> String {
    let mut out = String::from("instance_id,eps_dist,lambda,gamma,lhs,rhs,holds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.instance_id, r.eps_dist, r.lambda, r.gamma, r.lhs, r.rhs, r.holds
        );
    }
    out
}

pub fn policy_evaluation_csv(rows: &[PolicyEvaluationRow]) -> String {
    let mut out = String::from("case,mode,lambda,gamma,eps_dist,max_err,tolerance,passed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.case, r.mode, r.lambda, r.gamma, r.eps_dist, r.max_err, r.tolerance, r.passed
        );
    }
    out
}

pub fn decomposition_csv(rows: &[DecompositionRow]) -> String {
    let mut out = String::from("instance_id,mixer,holds,brute_force_max,greedy_value,witness\n");
    for r in rows {
        let witness: Vec<String> = r.witness.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.instance_id,
            r.mixer,
            r.holds,
            r.brute_force_max,
            r.greedy_value,
            witness.join(" ")
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TheorySuite {
    UpdateGap,
    PolicyEvaluation,
    GreedyDecomposition,
}

impl TheorySuite {
    pub const ALL: [TheorySuite; 3] = [Self::UpdateGap, Self::PolicyEvaluation, Self::GreedyDecomposition];

    pub fn name(self) -> &'static str {
        match self {
            Self::UpdateGap => "update-gap",
            Self::PolicyEvaluation => "policy-evaluation",
            Self::GreedyDecomposition => "greedy-decomposition",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(vec![format!("unknown suite `{name}`")]))
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }

    /// Runs the suite and returns its CSV and whether every check passed.
    pub fn run(self, seed: u64) -> Result<(String, bool)> {
        Ok(match self {
            Self::UpdateGap => {
                let rows = theory::update_gap_suite(seed, 100, &[0.2, 0.5, 0.8])?;
                (update_gap_csv(&rows), rows.iter().all(|r| r.holds))
            }
            Self::PolicyEvaluation => {
                let rows = theory::policy_evaluation_suite(seed, 20)?;
                (policy_evaluation_csv(&rows), rows.iter().all(|r| r.passed))
            }
            Self::GreedyDecomposition => {
                let rows = greedy_decomposition_suite(seed, 100)?;
                (decomposition_csv(&rows), decomposition_suite_passed(&rows))
            }
        })
    }

    /// Runs the suite and writes its CSV into `dir`.
    pub fn run_to_dir(self, seed: u64, dir: &Path) -> Result<bool> {
        let (csv, passed) = self.run(seed)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join(self.file_name()), csv)?;
        Ok(passed)
    }
}
