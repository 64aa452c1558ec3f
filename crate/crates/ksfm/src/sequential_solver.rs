//! Randomized pipeline: 1-sparse subgradient sampling, stochastic FTRL
//! certificates, and sampled dim reduction and arc finding.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{count, log_n, Constants};
use crate::error::{Result, SfmError};
use crate::lovasz::{CertificateBundle, Permutation};
use crate::oracle_core::{evaluate_chain, evaluate_mask, marginal_vector, QueryLedger, RngStream, SetFunction, TOL};
use crate::parallel_solver::{phi_schedule, ArcOutcome};
use crate::ring_family::RingFamily;

/// Marginals and `f(V)` shared by every sampler on one function.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingContext {
    pub u: Vec<f64>,
    pub u_one: f64,
    pub u_inf: f64,
    pub f_v: f64,
}

impl SamplingContext {
    /// n + 1 queries.
    pub fn new(f: &dyn SetFunction, ledger: &QueryLedger) -> Result<Self> {
        let n = f.n();
        let u = marginal_vector(f, ledger);
        let f_v = evaluate_mask(f, &vec![true; n], ledger);
        Self::from_parts(u, f_v)
    }

    pub fn from_parts(u: Vec<f64>, f_v: f64) -> Result<Self> {
        if let Some(p) = u.iter().position(|&v| v < -TOL) {
            return Err(SfmError::Invariant(format!("sampling needs u >= 0, u[{p}] = {}", u[p])));
        }
        let u_one = u.iter().map(|v| v.max(0.0)).sum();
        let u_inf = u.iter().cloned().fold(0.0, f64::max);
        Ok(SamplingContext { u, u_one, u_inf, f_v })
    }

    /// `||2u - g||_1 = 2||u||_1 - f(V)` for every permutation.
    pub fn v_norm(&self) -> f64 {
        2.0 * self.u_one - self.f_v
    }
}

/// One draw of the 1-sparse estimator `value * 1_j` of `g_π`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VSample {
    pub j: usize,
    pub value: f64,
    pub prob: f64,
}

fn check_sampling_inputs(f: &dyn SetFunction, ctx: &SamplingContext, pi: &[usize]) -> Result<()> {
    let n = f.n();
    if n == 0 {
        return Err(SfmError::Parameter("sampling needs n >= 1".into()));
    }
    if ctx.u.len() != n || pi.len() != n {
        return Err(SfmError::Parameter("sampling context or permutation has the wrong length".into()));
    }
    Ok(())
}

/// Sample `j ∝ 2u_j − (g_π)_j` by binary search over prefix sums; O(log n) queries.
pub fn v_sampling(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    pi: &[usize],
    ledger: &QueryLedger,
    rng: &mut impl Rng,
) -> Result<VSample> {
    check_sampling_inputs(f, ctx, pi)?;
    let n = f.n();
    let total = ctx.v_norm();
    if !(total > 0.0) {
        // u = 0 and f(V) = 0 forces g_π = 0.
        return Ok(VSample { j: pi[0], value: 0.0, prob: 1.0 });
    }
    let mut pu = Vec::with_capacity(n + 1);
    pu.push(0.0);
    for &e in pi {
        pu.push(pu.last().unwrap() + 2.0 * ctx.u[e]);
    }
    let empty = vec![false; n];
    let r = total * (1.0 - rng.gen::<f64>());
    let (mut lo, mut s_lo) = (0usize, 0.0f64);
    let (mut hi, mut s_hi) = (n, total);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let s = pu[mid] - evaluate_chain(f, &empty, pi, &[mid], ledger)[0];
        if s < s_lo - TOL || s > s_hi + TOL {
            return Err(SfmError::Invariant(format!(
                "negative sampling weight near position {mid}; function is not submodular or u is wrong"
            )));
        }
        if s >= r {
            hi = mid;
            s_hi = s;
        } else {
            lo = mid;
            s_lo = s;
        }
    }
    let j = pi[hi - 1];
    let v = s_hi - s_lo;
    let g = 2.0 * ctx.u[j] - v;
    let prob = v / total;
    Ok(VSample { j, value: g / prob, prob })
}

/// Iteration count and step size of one SubmodularFTRL run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtrlPlan {
    pub m: usize,
    pub eta: f64,
    pub u_inf_bound: f64,
    pub u_one_bound: f64,
}

pub fn ftrl_plan(ctx: &SamplingContext, n: usize, k: usize, phi: f64, delta: f64, consts: &Constants) -> Result<FtrlPlan> {
    if k == 0 || !(delta > 0.0) || !(phi >= 0.0) || delta > phi * (1.0 + 1e-12) {
        return Err(SfmError::Parameter(format!("need k >= 1 and 0 < delta <= phi (k={k}, phi={phi}, delta={delta})")));
    }
    let u_inf_bound = 2.0 * k as f64 * ctx.u_inf + phi;
    let u_one_bound = 2.0 * ctx.u_one + phi;
    let ln = log_n(n);
    let m = count(consts.c_ftrl * u_inf_bound * u_one_bound * ln / (delta * delta));
    let mut eta = (k as f64 * ln / (m as f64 * u_inf_bound * u_one_bound)).sqrt().min(0.25 / u_one_bound);
    if !eta.is_finite() {
        eta = 1.0;
    }
    Ok(FtrlPlan { m, eta, u_inf_bound, u_one_bound })
}

/// FTRL over the capped simplex driven by vSampling; returns the M permutations visited.
pub fn submodular_ftrl(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    k: usize,
    phi: f64,
    delta: f64,
    consts: &Constants,
    ledger: &QueryLedger,
    rng: &mut impl Rng,
) -> Result<CertificateBundle> {
    let n = f.n();
    let plan = ftrl_plan(ctx, n, k, phi, delta, consts)?;
    // Neumaier-compensated cumulative eta*h; the iterate order is ascending in it.
    let mut hs = vec![0.0f64; n];
    let mut hc = vec![0.0f64; n];
    let key = |hs: &[f64], hc: &[f64], i: usize| hs[i] + hc[i];
    let mut order: Permutation = (0..n).collect();
    let mut perms = Vec::with_capacity(plan.m);
    for t in 0..plan.m {
        let s = v_sampling(f, ctx, &order, ledger, rng)?;
        perms.push(order.clone());
        let step = plan.eta * s.value;
        if step.abs() >= 0.5 {
            return Err(SfmError::StepSize { t, value: step.abs() });
        }
        if step == 0.0 || t + 1 == plan.m {
            continue;
        }
        let j = s.j;
        let sum = hs[j] + step;
        hc[j] += if hs[j].abs() >= step.abs() { (hs[j] - sum) + step } else { (step - sum) + hs[j] };
        hs[j] = sum;
        let at = order.iter().position(|&e| e == j).expect("element in order");
        order.remove(at);
        let kj = key(&hs, &hc, j);
        let ins = order.partition_point(|&e| {
            let ke = key(&hs, &hc, e);
            ke < kj || (ke == kj && e < j)
        });
        order.insert(ins, j);
    }
    Ok(CertificateBundle::uniform(perms))
}

/// Number of FTRL repetitions in a stochastic certificate.
pub fn planned_repetitions(n: usize, k: usize, phi: f64, delta: f64, consts: &Constants) -> usize {
    let k = k as f64;
    count(consts.c_reps * k.powi(5) * phi * phi * log_n(n) / (delta * delta))
}

/// Concatenation of independent SubmodularFTRL(δ/2) runs.
pub fn stoch_dual_certificate(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    k: usize,
    phi: f64,
    delta: f64,
    consts: &Constants,
    ledger: &QueryLedger,
    rng: &RngStream,
) -> Result<CertificateBundle> {
    let n = f.n();
    ftrl_plan(ctx, n, k, phi, delta / 2.0, consts)?;
    let reps = planned_repetitions(n, k, phi, delta, consts);
    let mut jobs = Vec::with_capacity(reps);
    let mut out: Option<CertificateBundle> = None;
    for r in 0..reps {
        let job = QueryLedger::new();
        let mut rr = rng.child(&format!("rep{r}"));
        let b = submodular_ftrl(f, ctx, k, phi, delta / 2.0, consts, &job, &mut rr)?;
        jobs.push(job);
        match out.as_mut() {
            None => out = Some(b),
            Some(acc) => acc.extend(b),
        }
    }
    ledger.absorb_parallel(&jobs);
    Ok(out.expect("at least one repetition"))
}

/// Draws permutation indices according to bundle weights.
struct BundleSampler {
    uniform: bool,
    len: usize,
    dist: Option<WeightedIndex<f64>>,
}

impl BundleSampler {
    fn new(bundle: &CertificateBundle) -> Result<Self> {
        if bundle.is_empty() {
            return Err(SfmError::Parameter("empty certificate bundle".into()));
        }
        let w0 = bundle.weights[0];
        let uniform = bundle.weights.iter().all(|&w| w == w0);
        let dist = if uniform {
            None
        } else {
            Some(WeightedIndex::new(&bundle.weights).map_err(|e| SfmError::Parameter(format!("bundle weights: {e}")))?)
        };
        Ok(BundleSampler { uniform, len: bundle.len(), dist })
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        if self.uniform {
            rng.gen_range(0..self.len)
        } else {
            self.dist.as_ref().unwrap().sample(rng)
        }
    }
}

/// One draw `(p, value)` whose expectation is the bundle's certificate vector.
pub fn certificate_sample_draw(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    bundle: &CertificateBundle,
    ledger: &QueryLedger,
    rng: &mut impl Rng,
) -> Result<(usize, f64)> {
    let sampler = BundleSampler::new(bundle)?;
    let t = sampler.draw(rng);
    let s = v_sampling(f, ctx, &bundle.permutations[t], ledger, rng)?;
    Ok((s.j, s.value))
}

/// Mean of `n_samples` two-stage draws.
pub fn certificate_sample_estimate(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    bundle: &CertificateBundle,
    n_samples: usize,
    ledger: &QueryLedger,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let sampler = BundleSampler::new(bundle)?;
    let n = f.n();
    let mut z = vec![0.0; n];
    if n_samples == 0 {
        return Ok(z);
    }
    for _ in 0..n_samples {
        let t = sampler.draw(rng);
        let s = v_sampling(f, ctx, &bundle.permutations[t], ledger, rng)?;
        z[s.j] += s.value;
    }
    let inv = 1.0 / n_samples as f64;
    z.iter_mut().for_each(|v| *v *= inv);
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqRoundInfo {
    pub phi: f64,
    pub delta: f64,
    pub permutations: usize,
    pub draws: usize,
    pub found: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeqDimReduction {
    /// Elements in every minimizer (local indices), or empty.
    pub t: Vec<usize>,
    pub rounds: Vec<SeqRoundInfo>,
}

/// Sampled dim reduction with φ halving.
pub fn dim_reduction_sequential(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    k: usize,
    consts: &Constants,
    ledger: &QueryLedger,
    rng: &RngStream,
) -> Result<SeqDimReduction> {
    let n = f.n();
    let mut out = SeqDimReduction::default();
    if n == 0 || k == 0 || !(ctx.u_inf > 0.0) {
        return Ok(out);
    }
    let kf = k as f64;
    let phis = phi_schedule(ctx.u_one, ctx.u_inf, ctx.f_v, consts.seq_dim_divisor * kf, consts.max_phi_rounds);
    let draws = count(consts.c_z * kf.powi(4) * (ctx.u_one / ctx.u_inf) * log_n(n));
    for (i, &phi) in phis.iter().enumerate() {
        let delta = phi / (8.0 * kf);
        let round = rng.child(&format!("phi{i}"));
        let bundle = stoch_dual_certificate(f, ctx, k, phi, delta, consts, ledger, &round.child("cert"))?;
        let z = certificate_sample_estimate(f, ctx, &bundle, draws, ledger, &mut round.child("est"))?;
        let cut = -3.0 * phi / (8.0 * kf);
        let t: Vec<usize> = (0..n).filter(|&p| z[p] <= cut).collect();
        out.rounds.push(SeqRoundInfo { phi, delta, permutations: bundle.len(), draws, found: t.len() });
        if !t.is_empty() {
            out.t = t;
            break;
        }
    }
    Ok(out)
}

/// Samples gathered for one active element during arc finding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcSampleEntry {
    /// Local index of the active element.
    pub p: usize,
    /// Local closure `p↓` (contains p).
    pub down: Vec<usize>,
    /// Bundle indices drawn proportionally to `B_p^(t)`, at most `cap`.
    pub samples: Vec<usize>,
    pub count: u64,
    pub z_tilde: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArcSampleState {
    pub draws: usize,
    pub cap: usize,
    pub entries: Vec<ArcSampleEntry>,
}

/// One draw of `(q, ||Δ||_1 / B)` for `Δ = Δ_{π,P}`, or `None` when `Δ = 0`.
pub fn delta_draw(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    pi: &[usize],
    down: &[usize],
    ledger: &QueryLedger,
    rng: &mut impl Rng,
) -> Result<Option<(usize, f64)>> {
    check_sampling_inputs(f, ctx, pi)?;
    let n = f.n();
    let mut pos = vec![0usize; n];
    for (i, &e) in pi.iter().enumerate() {
        pos[e] = i;
    }
    let mut pmask = vec![false; n];
    for &q in down {
        pmask[q] = true;
    }
    let mut cuts: Vec<usize> = down.iter().flat_map(|&q| [pos[q], pos[q] + 1]).filter(|&c| c > 0).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let empty = vec![false; n];
    let vals = evaluate_chain(f, &empty, pi, &cuts, ledger);
    let prefix = |c: usize| if c == 0 { 0.0 } else { vals[cuts.binary_search(&c).expect("cut present")] };
    // (position, g_π(q)) sorted by position.
    let mut gp: Vec<(usize, f64)> = down.iter().map(|&q| (pos[q], prefix(pos[q] + 1) - prefix(pos[q]))).collect();
    gp.sort_unstable_by_key(|e| e.0);
    let g_down: f64 = gp.iter().map(|e| e.1).sum();
    let f_down = evaluate_mask(f, &pmask, ledger);
    let b = 2.0 * down.iter().map(|&q| ctx.u[q]).sum::<f64>() - g_down;
    if !(b > 0.0) {
        return Err(SfmError::Invariant(format!("sampling bound B = {b} is not positive")));
    }
    let norm = f_down - g_down;
    if !(norm > TOL) {
        return Ok(None);
    }
    let g_before = |i: usize| gp.iter().take_while(|e| e.0 < i).map(|e| e.1).sum::<f64>();
    let d_at = |i: usize| {
        ledger.charge_batch(2);
        let a = f.chain_values(&empty, pi, &[i])[0];
        let c = f.chain_values(&pmask, pi, &[i])[0];
        a - g_before(i) - c + f_down
    };
    let r = norm * (1.0 - rng.gen::<f64>());
    let (mut lo, mut d_lo) = (0usize, 0.0f64);
    let (mut hi, mut d_hi) = (n, norm);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let d = d_at(mid);
        if d < d_lo - TOL || d > d_hi + TOL {
            return Err(SfmError::Invariant(format!("move-to-front decrease is not monotone near position {mid}")));
        }
        if d >= r {
            hi = mid;
            d_hi = d;
        } else {
            lo = mid;
            d_lo = d;
        }
    }
    let q = pi[hi - 1];
    if pmask[q] {
        return Err(SfmError::Invariant(format!("sampled element {q} lies inside the moved set")));
    }
    Ok(Some((q, norm / b)))
}

/// Estimates `Δ_p` for every entry of `state`; output vectors use local indices.
pub fn negative_mass_estimate(
    f: &dyn SetFunction,
    ctx: &SamplingContext,
    bundle: &CertificateBundle,
    state: &ArcSampleState,
    ledger: &QueryLedger,
    rng: &RngStream,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let n = f.n();
    let mut out = Vec::with_capacity(state.entries.len());
    for e in &state.entries {
        let mut est = vec![0.0; n];
        if !e.samples.is_empty() {
            let mut r = rng.child(&format!("p{}", e.p));
            for &t in &e.samples {
                let pi = bundle
                    .permutations
                    .get(t)
                    .ok_or_else(|| SfmError::Parameter(format!("sample index {t} outside the bundle")))?;
                if let Some((q, v)) = delta_draw(f, ctx, pi, &e.down, ledger, &mut r)? {
                    est[q] += v;
                }
            }
            let scale = e.z_tilde / e.samples.len() as f64;
            est.iter_mut().for_each(|v| *v *= scale);
        }
        out.push((e.p, est));
    }
    Ok(out)
}

/// Arcs from the sampled `Δ̃_p`: every q off `p↓` with `Δ̃_p(q) >= 3/(4k) ||Δ̃_p||_1`.
pub fn arcs_from_estimate(est: &[f64], down: &[usize], k: usize) -> Vec<usize> {
    let norm: f64 = est.iter().sum();
    if !(norm > 0.0) {
        return Vec::new();
    }
    let cut = 3.0 / (4.0 * k as f64) * norm;
    (0..est.len()).filter(|q| !down.contains(q) && est[*q] > 0.0 && est[*q] >= cut).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqArcFinding {
    /// Outcomes keyed by global element.
    pub outcomes: Vec<(usize, ArcOutcome)>,
    pub state: ArcSampleState,
}

/// Oversampling arc finder over the ring extension; `bundle` and `ctx` refer to `ring.extension()`.
pub fn arc_finding_sequential(
    ring: &RingFamily<'_>,
    ctx: &SamplingContext,
    bundle: &CertificateBundle,
    scale: f64,
    consts: &Constants,
    ledger: &QueryLedger,
    rng: &RngStream,
) -> Result<SeqArcFinding> {
    let k = ring.k();
    let view = ring.extension();
    let n = view.n();
    let live = ring.live();
    let mut local = vec![usize::MAX; ring.n()];
    for (i, &p) in live.iter().enumerate() {
        local[p] = i;
    }
    let mut outcomes = Vec::new();
    let mut entries = Vec::new();
    for (i, &p) in live.iter().enumerate() {
        if ring.u_ext(p) < scale / 2.0 {
            continue;
        }
        let down = ring.down(p);
        if down.len() >= k {
            outcomes.push((p, ArcOutcome::SparsityExhausted));
            continue;
        }
        entries.push(ArcSampleEntry {
            p: i,
            down: down.iter().map(|&q| local[q]).collect(),
            samples: Vec::new(),
            count: 0,
            z_tilde: 0.0,
        });
    }
    let kf = k as f64;
    let mut state = ArcSampleState { draws: 0, cap: 0, entries };
    if state.entries.is_empty() {
        return Ok(SeqArcFinding { outcomes, state });
    }
    let ln = log_n(n);
    state.draws = count(consts.c_a * kf.powi(4) * (ctx.u_one / ctx.u_inf) * ln);
    state.cap = count(consts.c_p * kf.powi(4) * ln);
    let mut hits: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (ei, e) in state.entries.iter().enumerate() {
        for &a in &e.down {
            hits[a].push(ei);
        }
    }
    let sampler = BundleSampler::new(bundle)?;
    let mut r = rng.child("oversample");
    for _ in 0..state.draws {
        let t = sampler.draw(&mut r);
        let s = v_sampling(&view, ctx, &bundle.permutations[t], ledger, &mut r)?;
        for &ei in &hits[s.j] {
            let e = &mut state.entries[ei];
            e.count += 1;
            if e.samples.len() < state.cap {
                e.samples.push(t);
            }
        }
    }
    let vn = ctx.v_norm();
    for e in state.entries.iter_mut() {
        e.z_tilde = e.count as f64 / state.draws as f64 * vn;
    }
    let est = negative_mass_estimate(&view, ctx, bundle, &state, ledger, &rng.child("mass"))?;
    for (e, (_, d)) in state.entries.iter().zip(&est) {
        let p = view.global(e.p);
        if e.samples.len() < state.cap {
            outcomes.push((p, ArcOutcome::Undersampled));
            continue;
        }
        let s = arcs_from_estimate(d, &e.down, k);
        let outcome = if s.is_empty() {
            ArcOutcome::NoArcs
        } else {
            let mut g: Vec<usize> = s.into_iter().map(|q| view.global(q)).collect();
            g.sort_unstable();
            ArcOutcome::Arcs(g)
        };
        outcomes.push((p, outcome));
    }
    outcomes.sort_by_key(|o| o.0);
    Ok(SeqArcFinding { outcomes, state })
}
