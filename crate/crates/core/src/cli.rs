//! `turbo` command-line interface.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid input,
//! 3 property violation, 4 numerical abort.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{sample, write_csv};
use crate::finite_prob::{FiniteJoint, StochasticKernel};
use crate::metrics::evaluate_run;
use crate::oracle::{
    alae_term, bibae_loss, bibae_loss_via_bound, eight_terms, ibn_family_loss, preset_loss, turbo_direct,
    turbo_reverse, turbo_total, DiscretePreset, IbnVariant, IbnWeights, TermBreakdown, TurboSystem, TurboWeights,
};
use crate::train::{load_run, load_summary, train_run, write_json, RunOptions, TrainError};
use crate::verify::{run_verify, Fault, VerifyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "turbo", version, about = "Exact oracles and trainers for two-way bounded representation learning")]
pub struct Cli {
    /// Only print errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact discrete-system tools.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Train a preset from a config file.
    Train(TrainArgs),
    /// Re-evaluate a run directory at its latest checkpoint.
    Eval(EvalArgs),
    /// Merge run summaries into one table.
    Report(ReportArgs),
    /// Dump samples of a config's dataset to CSV.
    Data(DataArgs),
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Run the bound property battery on random systems.
    Verify(VerifyArgs),
    /// Print every term, bound and preset loss for a system file.
    Eval(OracleEvalArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub min_size: usize,
    #[arg(long, default_value_t = 8)]
    pub max_size: usize,
    /// Perturbations per saturation check.
    #[arg(long, default_value_t = 100)]
    pub perturbations: usize,
    /// Report file (JSON).
    #[arg(long, default_value = "verify_report.json")]
    pub out: PathBuf,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct OracleEvalArgs {
    pub system: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this global step.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Override `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub run: PathBuf,
    /// Override `eval.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output file; defaults to `<run>/eval.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) | TrainError::Invalid(_) => EXIT_INVALID,
            TrainError::NonFinite { .. } => EXIT_NUMERIC,
            TrainError::Data(_) | TrainError::Nn(_) => EXIT_INVALID,
            TrainError::Tensor(crate::autodiff::TensorError::Domain { .. }) => EXIT_NUMERIC,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let say = |s: String| {
        if !cli.quiet {
            println!("{s}");
        }
    };
    match &cli.command {
        Command::Oracle {
            command: OracleCommand::Verify(a),
        } => cmd_verify(a, say),
        Command::Oracle {
            command: OracleCommand::Eval(a),
        } => cmd_oracle_eval(a),
        Command::Train(a) => cmd_train(a, say),
        Command::Eval(a) => cmd_eval(a, say),
        Command::Report(a) => cmd_report(a),
        Command::Data(a) => cmd_data(a, say),
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display()))
}

fn cmd_verify(a: &VerifyArgs, say: impl Fn(String)) -> Result<(), CliError> {
    let cfg = VerifyConfig {
        trials: a.trials,
        seed: a.seed,
        min_size: a.min_size,
        max_size: a.max_size,
        perturbations: a.perturbations,
        fault: a.inject_fault.then_some(Fault::InflatedEncoder),
    };
    let report = run_verify(&cfg).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?;
    write_json(&a.out, &report)?;
    for p in &report.properties {
        say(format!(
            "{:<5} {:<28} max violation {:>12.3e} (tol {:.0e}, worst seed {})",
            if p.passed { "ok" } else { "FAIL" },
            p.name,
            p.max_violation,
            p.tolerance,
            p.worst_seed
        ));
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failed().map(|p| p.name.as_str()).collect();
        Err(CliError::new(EXIT_PROPERTY, format!("property violated: {}", names.join(", "))))
    }
}

/// Discrete system file: `joint[x][z]`, `enc[x][z] = q(z|x)`,
/// `dec[z][x] = p(x|z)`, optional `[weights]` and `[ibn]` tables.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub joint: toml::Spanned<Vec<Vec<f64>>>,
    pub enc: Option<toml::Spanned<Vec<Vec<f64>>>>,
    pub dec: Option<toml::Spanned<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub weights: TurboWeights,
    #[serde(default)]
    pub ibn: IbnWeights,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses a system file; errors carry the line of the offending entry.
pub fn parse_system(text: &str) -> Result<(TurboSystem, TurboWeights, IbnWeights), String> {
    let f: SystemFile = toml::from_str(text).map_err(|e| e.to_string())?;
    let at = |name: &str, span: std::ops::Range<usize>, e: &dyn std::fmt::Display| {
        format!("line {}: {name}: {e}", line_of(text, span.start))
    };
    let joint = FiniteJoint::from_rows(f.joint.get_ref().clone()).map_err(|e| at("joint", f.joint.span(), &e))?;
    let sys = match (&f.enc, &f.dec) {
        (None, None) => TurboSystem::with_true_conditionals(joint).map_err(|e| at("joint", f.joint.span(), &e))?,
        (Some(enc), Some(dec)) => {
            let k_enc = StochasticKernel::from_rows(enc.get_ref().clone()).map_err(|e| at("enc", enc.span(), &e))?;
            let k_dec = StochasticKernel::from_rows(dec.get_ref().clone()).map_err(|e| at("dec", dec.span(), &e))?;
            TurboSystem::new(joint, k_enc, k_dec).map_err(|e| at("enc/dec", enc.span(), &e))?
        }
        _ => return Err("give both enc and dec, or neither for the true conditionals".into()),
    };
    f.weights.validate().map_err(|e| format!("weights: {e}"))?;
    f.ibn.validate().map_err(|e| format!("ibn: {e}"))?;
    Ok((sys, f.weights, f.ibn))
}

fn matrix_toml(rows: impl Iterator<Item = Vec<f64>>) -> String {
    let body: Vec<String> = rows
        .map(|r| format!("  [{}],", r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[\n{}\n]", body.join("\n"))
}

/// Writes a system in the format read by [`parse_system`], values exact.
pub fn system_to_toml(sys: &TurboSystem) -> String {
    let j = sys.joint();
    let joint = matrix_toml((0..j.n_x()).map(|x| (0..j.n_z()).map(|z| j.get(x, z)).collect()));
    let enc = matrix_toml(sys.enc().rows().map(<[f64]>::to_vec));
    let dec = matrix_toml(sys.dec().rows().map(<[f64]>::to_vec));
    format!("# joint[x][z]\njoint = {joint}\n\n# enc[x][z] = q(z|x)\nenc = {enc}\n\n# dec[z][x] = p(x|z)\ndec = {dec}\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEvalOutput {
    pub n_x: usize,
    pub n_z: usize,
    pub weights: TurboWeights,
    pub ibn: IbnWeights,
    pub terms: TermBreakdown,
    pub turbo_direct: f64,
    pub turbo_reverse: f64,
    pub turbo_total: f64,
    pub bibae: f64,
    pub bibae_via_bound: f64,
    pub vae: f64,
    pub info_vae: f64,
    pub vae_gan: f64,
    pub alae_latent_kld: f64,
    /// Discrete preset losses; FLOW is absent unless the decoder is a
    /// permutation.
    pub presets: BTreeMap<String, f64>,
}

pub fn oracle_eval(sys: &TurboSystem, w: &TurboWeights, ibn: &IbnWeights) -> Result<OracleEvalOutput, String> {
    let e = |x: crate::oracle::OracleError| x.to_string();
    let mut presets = BTreeMap::new();
    for p in DiscretePreset::ALL {
        if let Ok(v) = preset_loss(sys, p, w) {
            presets.insert(p.name().to_string(), v);
        }
    }
    Ok(OracleEvalOutput {
        n_x: sys.joint().n_x(),
        n_z: sys.joint().n_z(),
        weights: *w,
        ibn: *ibn,
        terms: eight_terms(sys).map_err(e)?,
        turbo_direct: turbo_direct(sys, w).map_err(e)?,
        turbo_reverse: turbo_reverse(sys, w).map_err(e)?,
        turbo_total: turbo_total(sys, w).map_err(e)?,
        bibae: bibae_loss(sys, ibn).map_err(e)?,
        bibae_via_bound: bibae_loss_via_bound(sys, ibn).map_err(e)?,
        vae: ibn_family_loss(sys, IbnVariant::Vae, ibn).map_err(e)?,
        info_vae: ibn_family_loss(sys, IbnVariant::InfoVae, ibn).map_err(e)?,
        vae_gan: ibn_family_loss(sys, IbnVariant::VaeGan, ibn).map_err(e)?,
        alae_latent_kld: alae_term(sys).map_err(e)?,
        presets,
    })
}

fn cmd_oracle_eval(a: &OracleEvalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.system).map_err(|e| io(&a.system, e))?;
    let (sys, w, ibn) =
        parse_system(&text).map_err(|e| CliError::new(EXIT_INVALID, format!("{}: {e}", a.system.display())))?;
    let out = oracle_eval(&sys, &w, &ibn).map_err(|e| CliError::new(EXIT_INVALID, e))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out).expect("serialisable"));
        return Ok(());
    }
    let t = &out.terms;
    println!("system {} x {}", out.n_x, out.n_z);
    let rows: Vec<(&str, f64)> = vec![
        ("L_zt", t.l_zt),
        ("D_zt", t.d_zt),
        ("L_xh", t.l_xh),
        ("D_xh", t.d_xh),
        ("L_xt", t.l_xt),
        ("D_xt", t.d_xt),
        ("L_zh", t.l_zh),
        ("D_zh", t.d_zh),
        ("I_true", t.i_true),
        ("I_enc_evolving", t.i_enc_evolving),
        ("I_dec_evolving", t.i_dec_evolving),
        ("B_direct_enc", t.b_direct_enc),
        ("B_direct_dec", t.b_direct_dec),
        ("B_reverse_dec", t.b_reverse_dec),
        ("B_reverse_enc", t.b_reverse_enc),
        ("turbo_direct", out.turbo_direct),
        ("turbo_reverse", out.turbo_reverse),
        ("turbo_total", out.turbo_total),
        ("bibae", out.bibae),
        ("bibae_via_bound", out.bibae_via_bound),
        ("vae", out.vae),
        ("info_vae", out.info_vae),
        ("vae_gan", out.vae_gan),
        ("alae_latent_kld", out.alae_latent_kld),
    ];
    for (k, v) in rows {
        println!("{k:<16} {v:>14.9}");
    }
    for (k, v) in &out.presets {
        println!("preset {k:<9} {v:>14.9}");
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, say: impl Fn(String)) -> Result<(), CliError> {
    let config = match &a.config {
        Some(p) => {
            let mut c = TrainConfig::load(p).map_err(|e| CliError::new(EXIT_INVALID, format!("{}: {e}", p.display())))?;
            if let Some(s) = a.seed {
                c.run.seed = s;
                c.validate().map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?;
            }
            Some(c)
        }
        None if a.resume => None,
        None => return Err(CliError::new(EXIT_INVALID, "--config is required unless --resume is given")),
    };
    if a.resume && a.seed.is_some() && config.is_none() {
        return Err(CliError::new(EXIT_INVALID, "--seed cannot change a resumed run"));
    }
    let opts = RunOptions {
        resume: a.resume,
        max_steps: a.max_steps,
        overwrite: a.overwrite,
    };
    let out = train_run(config.as_ref(), &a.out, &opts)?;
    let s = &out.state;
    say(format!(
        "{} seed {} stopped at step {}/{} in {}",
        s.config.run.preset,
        s.config.run.seed,
        s.step,
        s.config.run.steps,
        out.dir.display()
    ));
    if let Some(sum) = out.summary {
        for (k, v) in sum.final_metrics.flatten() {
            say(format!("  {k:<16} {v:.6}"));
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, say: impl Fn(String)) -> Result<(), CliError> {
    let state = load_run(&a.run)?;
    let mut eval = state.config.eval;
    if let Some(s) = a.seed {
        eval.seed = s;
    }
    if let Some(n) = a.samples {
        if n == 0 {
            return Err(CliError::new(EXIT_INVALID, "--samples must be at least 1"));
        }
        eval.samples = n;
    }
    let rec = evaluate_run(&state, &eval)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join(crate::train::EVAL_FILE));
    write_json(&out, &rec)?;
    say(format!("step {} eval seed {} -> {}", state.step, eval.seed, out.display()));
    for (k, v) in rec.flatten() {
        say(format!("  {k:<16} {v:.6}"));
    }
    Ok(())
}

/// One row per run, one column per metric; missing cells are empty.
pub fn report_table(runs: &[PathBuf]) -> Result<String, CliError> {
    let mut rows = Vec::new();
    let mut cols = BTreeSet::new();
    for dir in runs {
        let s = load_summary(dir)?;
        let flat = s.final_metrics.flatten();
        cols.extend(flat.keys().cloned());
        rows.push((dir.display().to_string(), s, flat));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run".to_string(), "preset".into(), "family".into(), "seed".into(), "steps".into()];
    header.extend(cols.iter().cloned());
    w.write_record(&header).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
    for (name, s, flat) in rows {
        let mut rec = vec![name, s.preset.to_string(), s.family.clone(), s.seed.to_string(), s.steps.to_string()];
        rec.extend(cols.iter().map(|c| flat.get(c).map(|v| format!("{v:.6}")).unwrap_or_default()));
        w.write_record(&rec).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf8"))
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let table = report_table(&a.runs)?;
    match &a.out {
        Some(p) => std::fs::write(p, table).map_err(|e| io(p, e)),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn cmd_data(a: &DataArgs, say: impl Fn(String)) -> Result<(), CliError> {
    let c = TrainConfig::load(&a.config).map_err(|e| CliError::new(EXIT_INVALID, format!("{}: {e}", a.config.display())))?;
    let seed = a.seed.unwrap_or(c.run.seed);
    let batch = sample(&c.data, a.n, seed).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?;
    let f = std::fs::File::create(&a.out).map_err(|e| io(&a.out, e))?;
    write_csv(f, &c.data, seed, &batch).map_err(|e| io(&a.out, e))?;
    say(format!("{} rows of {} (seed {seed}) -> {}", a.n, c.data.family_name(), a.out.display()));
    Ok(())
}
