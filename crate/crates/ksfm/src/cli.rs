//! Command-line surface: `gen`, `solve`, `verify` and `bench`.
//!
//! Machine-readable output goes to stdout (or `--out`), diagnostics to stderr.
//! Exit codes: 0 ok, 1 certificate rejected, 2 bad input, 3 solver failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::Profile;
use crate::error::{Result, SfmError};
use crate::lovasz::{certificate_vector, verify_dual_certificate, CertificateBundle};
use crate::meta::{brute_force_min, solve, Mode, SolveConfig};
use crate::oracle_core::{generate_instance, GenParams, InstanceSpec, QueryLedger};

pub const EXIT_OK: i32 = 0;
pub const EXIT_REJECTED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Largest n for which bench attaches a brute-force gap.
pub const BENCH_GAP_LIMIT: usize = 20;

pub const BENCH_HEADER: &str = "n,k,mode,seed,queries,rounds,value,gap";

#[derive(Parser, Debug)]
#[command(name = "ksfm", version, about = "k-sparse submodular function minimization")]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Constant profile: desk or faithful.
    #[arg(long, global = true, default_value = "desk")]
    pub profile: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an instance file.
    Gen(GenArgs),
    /// Minimize an instance and print a JSON report.
    Solve(SolveArgs),
    /// Check a (delta, k) dual certificate exhaustively.
    Verify(VerifyArgs),
    /// Run a benchmark grid and write CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// planted, cut, coverage, modular_plus_concave or explicit.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub support: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    pub instance: PathBuf,
    #[arg(long, default_value = "parallel")]
    pub mode: String,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    pub instance: PathBuf,
    /// JSON file holding either a vector `y` or a bundle
    /// `{"permutations": [...], "weights": [...]}`.
    #[arg(long)]
    pub certificate: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    pub plan: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parameter grid for `bench`. Cell seeds are `--seed + 0 .. --seed + seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlan {
    pub family: String,
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub modes: Vec<Mode>,
    pub seeds: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub support: Option<usize>,
    #[serde(default)]
    pub density: Option<f64>,
    /// Used when `--out` is absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_eps() -> f64 {
    1e-3
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.k.is_empty() || self.modes.is_empty() {
            return Err(SfmError::Config("bench grids must be nonempty".into()));
        }
        if self.seeds == 0 {
            return Err(SfmError::Config("bench needs seeds >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct VerifyOutput {
    y: Vec<f64>,
    delta: f64,
    k: usize,
    cond1: bool,
    cond2: bool,
    worst_violation: f64,
    f_star: f64,
    neg_sum: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CertificateInput {
    Vector(Vec<f64>),
    Wrapped { y: Vec<f64> },
    Bundle(CertificateBundle),
}

fn io_err(path: &Path, e: std::io::Error) -> SfmError {
    SfmError::Io(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_instance(path: &Path) -> Result<InstanceSpec> {
    InstanceSpec::from_json(&read_file(path)?)
}

pub fn cmd_gen(args: &GenArgs, seed: u64) -> Result<String> {
    let params = GenParams { n: args.n, k: args.k, support: args.support, density: args.density };
    let g = generate_instance(&args.kind, &params, seed)?;
    let mut s = g.instance.to_json();
    s.push('\n');
    Ok(s)
}

pub fn cmd_solve(args: &SolveArgs, seed: u64, profile: Profile) -> Result<String> {
    let mode: Mode = args.mode.parse()?;
    let config = SolveConfig::new(mode, args.k, args.eps, profile, seed);
    config.validate()?;
    let f = load_instance(&args.instance)?;
    let report = solve(&f, &config)?;
    let mut s = report.to_json();
    s.push('\n');
    Ok(s)
}

/// Returns the JSON report and whether both certificate conditions hold.
pub fn cmd_verify(args: &VerifyArgs) -> Result<(String, bool)> {
    let f = load_instance(&args.instance)?;
    if args.k == 0 || !(args.delta >= 0.0) {
        return Err(SfmError::Parameter("verify needs k >= 1 and delta >= 0".into()));
    }
    let raw = read_file(&args.certificate)?;
    let input: CertificateInput = serde_json::from_str(&raw)
        .map_err(|e| SfmError::MalformedInstance(format!("certificate: {e}")))?;
    let y = match input {
        CertificateInput::Vector(y) | CertificateInput::Wrapped { y } => y,
        CertificateInput::Bundle(b) => {
            for pi in &b.permutations {
                let mut seen = vec![false; f.n()];
                if pi.len() != f.n() || pi.iter().any(|&i| i >= f.n() || std::mem::replace(&mut seen[i], true)) {
                    return Err(SfmError::Parameter("bundle entry is not a permutation of the ground set".into()));
                }
            }
            certificate_vector(&b, &f, &QueryLedger::new())?
        }
    };
    let r = verify_dual_certificate(&f, &y, args.delta, args.k)?;
    let ok = r.cond1 && r.cond2;
    let out = VerifyOutput {
        y,
        delta: args.delta,
        k: args.k,
        cond1: r.cond1,
        cond2: r.cond2,
        worst_violation: r.worst_violation,
        f_star: r.f_star,
        neg_sum: r.neg_sum,
    };
    let mut s = serde_json::to_string_pretty(&out).expect("report serializes");
    s.push('\n');
    Ok((s, ok))
}

fn bench_cell(plan: &BenchPlan, n: usize, k: usize, mode: Mode, seed: u64, profile: Profile) -> Result<String> {
    let params = GenParams { n, k, support: plan.support, density: plan.density };
    let f = generate_instance(&plan.family, &params, seed)?.instance;
    let eps = if mode == Mode::SequentialStrong { 0.0 } else { plan.eps };
    let config = SolveConfig::new(mode, k, eps, profile, seed);
    config.validate()?;
    let r = solve(&f, &config)?;
    let gap = if n <= BENCH_GAP_LIMIT { format!("{}", r.value - brute_force_min(&f)?.1) } else { String::new() };
    Ok(format!("{},{},{},{},{},{},{},{}", n, k, mode.name(), seed, r.queries, r.rounds, r.value, gap))
}

/// Runs every cell. Failed cells become rows with empty measurements and a
/// message on stderr; the sweep keeps going.
pub fn cmd_bench(plan: &BenchPlan, base_seed: u64, profile: Profile) -> Result<(String, usize)> {
    plan.validate()?;
    let mut csv = String::from(BENCH_HEADER);
    csv.push('\n');
    let mut failures = 0;
    for &n in &plan.n {
        for &k in &plan.k {
            for &mode in &plan.modes {
                for s in 0..plan.seeds {
                    let seed = base_seed.wrapping_add(s);
                    match bench_cell(plan, n, k, mode, seed, profile) {
                        Ok(row) => csv.push_str(&row),
                        Err(e) => {
                            failures += 1;
                            eprintln!("bench: n={n} k={k} mode={} seed={seed}: {e}", mode.name());
                            let _ = write!(csv, "{},{},{},{},,,,", n, k, mode.name(), seed);
                        }
                    }
                    csv.push('\n');
                }
            }
        }
    }
    Ok((csv, failures))
}

fn exit_code(e: &SfmError) -> i32 {
    if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_SOLVER
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let profile: Profile = cli.profile.parse()?;
    match &cli.command {
        Command::Gen(a) => {
            emit(a.out.as_deref(), &cmd_gen(a, cli.seed)?)?;
            Ok(EXIT_OK)
        }
        Command::Solve(a) => {
            emit(a.out.as_deref(), &cmd_solve(a, cli.seed, profile)?)?;
            Ok(EXIT_OK)
        }
        Command::Verify(a) => {
            let (s, ok) = cmd_verify(a)?;
            emit(a.out.as_deref(), &s)?;
            Ok(if ok { EXIT_OK } else { EXIT_REJECTED })
        }
        Command::Bench(a) => {
            let plan: BenchPlan = serde_json::from_str(&read_file(&a.plan)?)
                .map_err(|e| SfmError::Config(format!("bench plan: {e}")))?;
            let (csv, failures) = cmd_bench(&plan, cli.seed, profile)?;
            emit(a.out.as_deref().or(plan.out.as_deref()), &csv)?;
            if failures > 0 {
                eprintln!("bench: {failures} cell(s) failed");
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_plan_parses_and_validates() {
        let p: BenchPlan = serde_json::from_str(
            r#"{"family":"planted","n":[6,7],"k":[1,2],"modes":["parallel"],"seeds":1}"#,
        )
        .unwrap();
        assert_eq!(p.eps, 1e-3);
        p.validate().unwrap();
        let mut bad = p.clone();
        bad.seeds = 0;
        assert!(bad.validate().is_err());
        bad = p;
        bad.n.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bench_grid_row_count() {
        let p: BenchPlan = serde_json::from_str(
            r#"{"family":"planted","n":[6,7],"k":[1,2],"modes":["parallel"],"seeds":2}"#,
        )
        .unwrap();
        let (csv, failures) = cmd_bench(&p, 5, Profile::Desk).unwrap();
        assert_eq!(failures, 0);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], BENCH_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 2 * 2);
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), 8);
        }
    }

    #[test]
    fn bench_failed_cell_is_recorded() {
        let p: BenchPlan = serde_json::from_str(
            r#"{"family":"nonsense","n":[4],"k":[1],"modes":["parallel"],"seeds":1}"#,
        )
        .unwrap();
        let (csv, failures) = cmd_bench(&p, 0, Profile::Desk).unwrap();
        assert_eq!(failures, 1);
        assert_eq!(csv.lines().nth(1).unwrap(), "4,1,parallel,0,,,,");
    }

    #[test]
    fn bad_flags_exit_2() {
        assert_eq!(run(["ksfm", "gen", "--kind", "bogus", "--n", "3"]), EXIT_INPUT);
        assert_eq!(run(["ksfm", "frobnicate"]), EXIT_INPUT);
        assert_eq!(run(["ksfm", "--profile", "fast", "gen", "--kind", "cut", "--n", "3"]), EXIT_INPUT);
    }
}
