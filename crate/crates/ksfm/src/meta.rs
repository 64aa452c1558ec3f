//! Driver loop over the ring family plus brute-force reference solvers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Constants, Profile};
use crate::error::{Result, SfmError};
use crate::lovasz::CertificateBundle;
use crate::oracle_core::{
    evaluate, evaluate_mask, value_table, FunctionDef, InstanceSpec, PhaseTotals, QueryLedger, RngStream, SetFunction,
    Subset, BRUTE_FORCE_LIMIT, TOL,
};
use crate::parallel_solver::{arc_finding_parallel, dim_reduction_parallel, ArcOutcome};
use crate::ring_family::{RingFamily, TraceEvent, NEG_MARGINAL_TOL};
use crate::sequential_solver::{arc_finding_sequential, dim_reduction_sequential, stoch_dual_certificate, SamplingContext};

pub const REPORT_VERSION: u32 = 1;

/// Largest number of candidate sets the sparse brute force will enumerate.
pub const SPARSE_ENUMERATION_LIMIT: u64 = 20_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Parallel,
    SequentialWeak,
    SequentialStrong,
    BruteForce,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Parallel => "parallel",
            Mode::SequentialWeak => "sequential_weak",
            Mode::SequentialStrong => "sequential_strong",
            Mode::BruteForce => "brute_force",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = SfmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "sequential_weak" | "sequential" => Ok(Mode::SequentialWeak),
            "sequential_strong" | "strong" => Ok(Mode::SequentialStrong),
            "brute_force" | "brute" => Ok(Mode::BruteForce),
            other => Err(SfmError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub mode: Mode,
    pub eps: f64,
    pub k: usize,
    pub constants: Constants,
    pub seed: u64,
}

impl SolveConfig {
    pub fn new(mode: Mode, k: usize, eps: f64, profile: Profile, seed: u64) -> Self {
        SolveConfig { mode, eps, k, constants: Constants::for_profile(profile), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SfmError::Config("k must be >= 1".into()));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(SfmError::Config(format!("eps must be a finite nonnegative number, got {}", self.eps)));
        }
        if self.eps == 0.0 && matches!(self.mode, Mode::Parallel | Mode::SequentialWeak) {
            return Err(SfmError::Config(format!("mode {} needs eps > 0", self.mode.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    SparsityReached,
    Exhausted,
    SmallMarginals,
    BruteForce,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub outer_iterations: usize,
    pub dim_reductions: usize,
    pub contractions_from_dim_reduction: usize,
    pub scales: usize,
    pub arc_batches: usize,
    pub max_batches_per_scale: usize,
    pub certificate_permutations: usize,
    pub undersampled: usize,
    pub ignored_arcs: u64,
    pub monotonicity_violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub version: u32,
    pub mode: Mode,
    pub k: usize,
    pub eps: f64,
    pub seed: u64,
    pub profile: Profile,
    pub n: usize,
    pub minimizer: Vec<usize>,
    pub value: f64,
    pub queries: u64,
    pub rounds: u64,
    pub phases: BTreeMap<String, PhaseTotals>,
    pub exit: ExitReason,
    pub trace: Vec<TraceEvent>,
    pub diagnostics: Diagnostics,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Callbacks for invariant checking; all methods default to no-ops.
pub trait SolveObserver {
    /// After init and after every ring update.
    fn after_update(&mut self, _ring: &RingFamily<'_>) {}
    /// Right before sequential arc finding, with the certificate it will use.
    fn before_arcs(&mut self, _ring: &RingFamily<'_>, _scale: f64, _bundle: Option<&CertificateBundle>) {}
}

struct NoObserver;
impl SolveObserver for NoObserver {}

pub fn solve(f: &dyn SetFunction, config: &SolveConfig) -> Result<SolveReport> {
    solve_observed(f, config, &mut NoObserver)
}

pub fn solve_observed(f: &dyn SetFunction, config: &SolveConfig, obs: &mut dyn SolveObserver) -> Result<SolveReport> {
    config.validate()?;
    let n = f.n();
    let ledger = QueryLedger::new();
    let mut diag = Diagnostics::default();
    let mut trace = Vec::new();
    let (minimizer, exit) = if config.mode == Mode::BruteForce {
        let (s, _) = if n <= BRUTE_FORCE_LIMIT { brute_force_min(f)? } else { brute_force_sparse_min(f, config.k)? };
        (s.to_vec(), ExitReason::BruteForce)
    } else {
        run_framework(f, config, &ledger, &mut diag, &mut trace, obs)?
    };
    let since = ledger.totals();
    let value = evaluate(f, &Subset::from_indices(n, minimizer.iter().copied())?, &ledger)?;
    ledger.record_phase("report", since);
    Ok(SolveReport {
        version: REPORT_VERSION,
        mode: config.mode,
        k: config.k,
        eps: config.eps,
        seed: config.seed,
        profile: config.constants.profile,
        n,
        minimizer,
        value,
        queries: ledger.queries(),
        rounds: ledger.rounds(),
        phases: ledger.phases(),
        exit,
        trace,
        diagnostics: diag,
    })
}

fn run_framework(
    f: &dyn SetFunction,
    config: &SolveConfig,
    ledger: &QueryLedger,
    diag: &mut Diagnostics,
    trace: &mut Vec<TraceEvent>,
    obs: &mut dyn SolveObserver,
) -> Result<(Vec<usize>, ExitReason)> {
    let n = f.n();
    let k = config.k;
    let consts = &config.constants;
    let parallel = config.mode == Mode::Parallel;
    let threshold = if config.mode == Mode::SequentialStrong {
        NEG_MARGINAL_TOL
    } else {
        (config.eps / n as f64).max(NEG_MARGINAL_TOL)
    };
    let root = RngStream::new(config.seed, "solve");

    let since = ledger.totals();
    let mut ring = RingFamily::init(f, k, ledger)?;
    ledger.record_phase("init", since);
    trace.extend(ring.take_events());
    obs.after_update(&ring);

    let exit = loop {
        if ring.w_len() >= k {
            break ExitReason::SparsityReached;
        }
        if ring.exhausted() {
            break ExitReason::Exhausted;
        }
        if ring.u_inf() <= threshold {
            break ExitReason::SmallMarginals;
        }
        let outer = root.child(&format!("outer{}", diag.outer_iterations));
        diag.outer_iterations += 1;

        let since = ledger.totals();
        let t_local = {
            let view = ring.extension();
            let u = ring.u_ext_local();
            if parallel {
                dim_reduction_parallel(&view, &u, k, consts, ledger)?.t
            } else {
                let f_v = evaluate_mask(&view, &vec![true; view.n()], ledger);
                let ctx = SamplingContext::from_parts(u, f_v)?;
                let d = dim_reduction_sequential(&view, &ctx, k, consts, ledger, &outer.child("dim"))?;
                diag.certificate_permutations += d.rounds.iter().map(|r| r.permutations).sum::<usize>();
                d.t
            }
            .into_iter()
            .map(|i| view.global(i))
            .collect::<Vec<usize>>()
        };
        ledger.record_phase("dim_reduction", since);
        diag.dim_reductions += 1;

        if !t_local.is_empty() {
            diag.contractions_from_dim_reduction += t_local.len();
            let since = ledger.totals();
            ring.update_space(&Subset::from_indices(n, t_local)?, &Subset::empty(n), ledger)?;
            ledger.record_phase("update", since);
            trace.extend(ring.take_events());
            obs.after_update(&ring);
            continue;
        }

        let scale = ring.u_inf();
        diag.scales += 1;
        trace.push(TraceEvent::ScaleHalving { scale });
        let mut batches = 0usize;
        while ring.u_inf() > scale / 2.0 && !ring.exhausted() && ring.w_len() < k {
            batches += 1;
            if batches > k {
                return Err(SfmError::Invariant(format!(
                    "more than {k} arc batches at scale {scale}; an arc-finding step was unsound"
                )));
            }
            let arc_rng = outer.child(&format!("arc{batches}"));
            let since = ledger.totals();
            let outcomes = if parallel {
                arc_finding_parallel(&ring, scale, consts, ledger)?
            } else {
                let view = ring.extension();
                let f_v = evaluate_mask(&view, &vec![true; view.n()], ledger);
                let ctx = SamplingContext::from_parts(ring.u_ext_local(), f_v)?;
                let kf = k as f64;
                let phi = scale / (consts.seq_dim_divisor * kf);
                let delta = ctx.u_inf / (2.0 * consts.seq_dim_divisor * kf);
                let cert_since = ledger.totals();
                let bundle = stoch_dual_certificate(&view, &ctx, k, phi, delta, consts, ledger, &arc_rng.child("cert"))?;
                ledger.record_phase("certificate", cert_since);
                diag.certificate_permutations += bundle.len();
                obs.before_arcs(&ring, scale, Some(&bundle));
                let found = arc_finding_sequential(&ring, &ctx, &bundle, scale, consts, ledger, &arc_rng.child("find"))?;
                found.outcomes
            };
            ledger.record_phase("arc_finding", since);

            let mut discard = Vec::new();
            let mut arcs = Vec::new();
            for (p, o) in outcomes {
                match o {
                    ArcOutcome::Arcs(s) => arcs.push((p, s)),
                    ArcOutcome::Undersampled => {
                        diag.undersampled += 1;
                        discard.push(p);
                    }
                    ArcOutcome::NoArcs | ArcOutcome::SparsityExhausted => discard.push(p),
                }
            }
            let since = ledger.totals();
            ring.update_space(&Subset::empty(n), &Subset::from_indices(n, discard)?, ledger)?;
            ring.update_arcs(&arcs, ledger)?;
            ledger.record_phase("update", since);
            diag.arc_batches += 1;
            trace.extend(ring.take_events());
            obs.after_update(&ring);
        }
        diag.max_batches_per_scale = diag.max_batches_per_scale.max(batches);
    };
    diag.ignored_arcs = ring.ignored_arcs();
    diag.monotonicity_violations = ring.monotonicity_violations();
    let minimizer = match exit {
        ExitReason::SmallMarginals => (0..n).filter(|&p| !ring.d_mask()[p]).collect(),
        _ => ring.w().to_vec(),
    };
    Ok((minimizer, exit))
}

/// Tolerance for ties on an ingested instance: exact for explicit tables.
pub fn instance_tie_tolerance(inst: &InstanceSpec) -> f64 {
    match inst.def {
        FunctionDef::Explicit(_) => 0.0,
        _ => TOL,
    }
}

/// Exact minimum by enumeration; the returned set is the minimal minimizer.
pub fn brute_force_min(f: &dyn SetFunction) -> Result<(Subset, f64)> {
    brute_force_min_tol(f, TOL)
}

pub fn brute_force_min_tol(f: &dyn SetFunction, tol: f64) -> Result<(Subset, f64)> {
    let n = f.n();
    let t = value_table(f)?;
    let best = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut inter = (1u64 << n) - 1;
    for (m, &v) in t.iter().enumerate() {
        if v <= best + tol {
            inter &= m as u64;
        }
    }
    Ok((Subset::from_mask(n, inter)?, best))
}

/// Intersection of all minimizers.
pub fn minimal_minimizer(f: &dyn SetFunction) -> Result<Subset> {
    Ok(brute_force_min(f)?.0)
}

fn binomial_sum(n: usize, k: usize) -> u64 {
    let mut total: u64 = 0;
    let mut c: u64 = 1;
    for j in 0..=k.min(n) {
        total = total.saturating_add(c);
        c = c.saturating_mul((n - j) as u64) / (j as u64 + 1);
    }
    total
}

/// Best set of size at most k; ties go to the first set in size-then-lexicographic order.
pub fn brute_force_sparse_min(f: &dyn SetFunction, k: usize) -> Result<(Subset, f64)> {
    let n = f.n();
    let total = binomial_sum(n, k);
    if total > SPARSE_ENUMERATION_LIMIT {
        return Err(SfmError::SizeLimit(format!("{total} candidate sets exceed {SPARSE_ENUMERATION_LIMIT}")));
    }
    let mut best = (Vec::new(), 0.0f64);
    let mut m = vec![false; n];
    for size in 1..=k.min(n) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            for &i in &idx {
                m[i] = true;
            }
            let v = f.value_of(&m);
            for &i in &idx {
                m[i] = false;
            }
            if v < best.1 - TOL {
                best = (idx.clone(), v);
            }
            let mut i = size;
            while i > 0 && idx[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    Ok((Subset::from_indices(n, best.0)?, best.1))
}
