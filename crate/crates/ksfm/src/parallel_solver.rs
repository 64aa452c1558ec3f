//! Deterministic pipeline built on truncated-subgradient mirror descent.

use serde::{Deserialize, Serialize};

use crate::config::{count, log_n, Constants};
use crate::error::{Result, SfmError};
use crate::lovasz::{neg_sum_over, permutation_of, prefix_values, subgradient_from_prefix, CertificateBundle};
use crate::oracle_core::{contract, evaluate_mask, marginal_vector, QueryLedger, SetFunction, Subset, TOL};
use crate::ring_family::RingFamily;
use crate::simplex::prox_from_log;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    pub s: f64,
    pub k: usize,
    pub phi: f64,
    pub delta: f64,
}

impl TruncationConfig {
    pub fn new(k: usize, u_inf: f64, phi: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !(phi >= 0.0) || k == 0 {
            return Err(SfmError::Parameter(format!("need k >= 1, phi >= 0, delta > 0 (k={k}, phi={phi}, delta={delta})")));
        }
        Ok(TruncationConfig { s: k as f64 * u_inf + phi, k, phi, delta })
    }
}

/// Coordinatewise `max(-s, g)`.
pub fn truncate(g: &[f64], s: f64) -> Vec<f64> {
    g.iter().map(|&v| v.max(-s)).collect()
}

#[derive(Clone, Debug)]
pub struct TruncatedCertificate {
    /// Average of the truncated subgradients.
    pub y: Vec<f64>,
    /// Permutations visited, when requested.
    pub bundle: Option<CertificateBundle>,
    pub iterations: usize,
    pub planned: usize,
    pub early_exit: bool,
    /// Smallest prefix value seen (an upper bound on the minimum).
    pub best_value: f64,
}

/// Iteration count for the truncated certificate.
pub fn planned_iterations(cfg: &TruncationConfig, n: usize, consts: &Constants) -> usize {
    let k = cfg.k as f64;
    count(consts.c_m * cfg.s * cfg.s * k * (k + 1.0) * log_n(n) / (cfg.delta * cfg.delta))
}

fn truncated_md(
    f: &dyn SetFunction,
    u: &[f64],
    cfg: &TruncationConfig,
    consts: &Constants,
    keep_bundle: bool,
    ledger: &QueryLedger,
) -> Result<TruncatedCertificate> {
    let n = f.n();
    if n == 0 || cfg.s <= 0.0 {
        return Ok(TruncatedCertificate {
            y: vec![0.0; n],
            bundle: keep_bundle.then(|| CertificateBundle::uniform(vec![(0..n).collect()])),
            iterations: 0,
            planned: 0,
            early_exit: false,
            best_value: 0.0,
        });
    }
    debug_assert_eq!(u.len(), n);
    let k = cfg.k;
    let m = planned_iterations(cfg, n, consts);
    let eta = 2.0 * (k as f64 * log_n(n)).sqrt() / (cfg.s * (m as f64 * (k as f64 + 1.0)).sqrt());
    let x0 = (k as f64 / n as f64).min(1.0);
    let mut log_x = vec![x0.ln(); n];
    let mut sum_h = vec![0.0; n];
    let mut best = 0.0f64;
    let mut perms = Vec::new();
    let mut t = 0;
    let mut early = false;
    while t < m {
        let pi = permutation_of(&log_x);
        let prefix = prefix_values(f, &pi, ledger);
        best = prefix.iter().cloned().fold(best, f64::min);
        let h = truncate(&subgradient_from_prefix(&pi, &prefix), cfg.s);
        for (a, b) in sum_h.iter_mut().zip(&h) {
            *a += b;
        }
        if keep_bundle {
            perms.push(pi);
        }
        t += 1;
        if consts.early_exit && t < m {
            let inv = 1.0 / t as f64;
            let ns = neg_sum_over(&sum_h, k + 1, 0..n) * inv;
            if ns + cfg.delta >= best + TOL {
                early = true;
                break;
            }
        }
        if t < m {
            let ly: Vec<f64> = log_x.iter().zip(&h).map(|(&a, &b)| a - eta * b).collect();
            log_x = prox_from_log(&ly, k + 1)?.log_z;
        }
    }
    let inv = 1.0 / t as f64;
    Ok(TruncatedCertificate {
        y: sum_h.into_iter().map(|v| v * inv).collect(),
        bundle: keep_bundle.then(|| CertificateBundle::uniform(perms)),
        iterations: t,
        planned: m,
        early_exit: early,
        best_value: best,
    })
}

/// A (δ,k) certificate for `f`, assuming `-φ <= f*` and `u_f >= 0`.
pub fn dual_certificate_truncated(
    f: &dyn SetFunction,
    k: usize,
    phi: f64,
    delta: f64,
    consts: &Constants,
    ledger: &QueryLedger,
) -> Result<TruncatedCertificate> {
    let u = marginal_vector(f, ledger);
    let cfg = TruncationConfig::new(k, u.iter().cloned().fold(0.0, f64::max), phi, delta)?;
    truncated_md(f, &u, &cfg, consts, true, ledger)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundInfo {
    pub phi: f64,
    pub delta: f64,
    pub iterations: usize,
    pub planned: usize,
    pub early_exit: bool,
    pub found: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DimReduction {
    /// Elements in every minimizer (local indices), or empty.
    pub t: Vec<usize>,
    pub rounds: Vec<RoundInfo>,
}

/// φ values swept by the dim-reduction loop.
pub fn phi_schedule(u_one: f64, u_inf: f64, f_v: f64, divisor: f64, cap: usize) -> Vec<f64> {
    let mut out = Vec::new();
    if !(u_inf > 0.0) {
        return out;
    }
    let mut phi = u_one - f_v;
    while phi >= u_inf / divisor && out.len() < cap {
        out.push(phi);
        phi /= 2.0;
    }
    out
}

/// Contracted elements from truncated certificates; `u` are the marginals of `f`.
pub fn dim_reduction_parallel(
    f: &dyn SetFunction,
    u: &[f64],
    k: usize,
    consts: &Constants,
    ledger: &QueryLedger,
) -> Result<DimReduction> {
    let n = f.n();
    if n == 0 || k == 0 {
        return Ok(DimReduction::default());
    }
    if u.iter().any(|&v| v < -TOL) {
        return Err(SfmError::Invariant("dim reduction needs nonnegative marginals".into()));
    }
    let u_inf = u.iter().cloned().fold(0.0, f64::max);
    let u_one: f64 = u.iter().map(|v| v.max(0.0)).sum();
    if u_inf <= 0.0 {
        return Ok(DimReduction::default());
    }
    let f_v = evaluate_mask(f, &vec![true; n], ledger);
    let phis = phi_schedule(u_one, u_inf, f_v, consts.par_dim_divisor, consts.max_phi_rounds);
    let mut jobs = Vec::with_capacity(phis.len());
    let mut out = DimReduction::default();
    let mut chosen: Option<Vec<usize>> = None;
    for &phi in &phis {
        let delta = phi / (3.0 * k as f64);
        let cfg = TruncationConfig::new(k, u_inf, phi, delta)?;
        let job = QueryLedger::new();
        let cert = truncated_md(f, u, &cfg, consts, false, &job)?;
        jobs.push(job);
        let t: Vec<usize> = (0..n).filter(|&p| cert.y[p] < -delta).collect();
        out.rounds.push(RoundInfo {
            phi,
            delta,
            iterations: cert.iterations,
            planned: cert.planned,
            early_exit: cert.early_exit,
            found: t.len(),
        });
        if chosen.is_none() && !t.is_empty() {
            chosen = Some(t);
        }
    }
    ledger.absorb_parallel(&jobs);
    out.t = chosen.unwrap_or_default();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArcOutcome {
    /// Arc endpoints (global indices).
    Arcs(Vec<usize>),
    /// Active but no arcs found.
    NoArcs,
    /// Closure already uses the whole sparsity budget.
    SparsityExhausted,
    /// Too few samples reached this element to estimate its arcs.
    Undersampled,
}

/// Arcs from every live `p` with `u_ext(p) >= scale / 2`.
pub fn arc_finding_parallel(
    ring: &RingFamily<'_>,
    scale: f64,
    consts: &Constants,
    ledger: &QueryLedger,
) -> Result<Vec<(usize, ArcOutcome)>> {
    let k = ring.k();
    let view = ring.extension();
    let live = ring.live();
    let mut local = vec![usize::MAX; ring.n()];
    for (i, &p) in live.iter().enumerate() {
        local[p] = i;
    }
    let active: Vec<usize> = live.iter().copied().filter(|&p| ring.u_ext(p) >= scale / 2.0).collect();
    let mut jobs = Vec::with_capacity(active.len());
    let mut out = Vec::with_capacity(active.len());
    for p in active {
        let down = ring.down(p);
        if down.len() >= k {
            out.push((p, ArcOutcome::SparsityExhausted));
            continue;
        }
        let job = QueryLedger::new();
        let pset = Subset::from_indices(view.n(), down.iter().map(|&q| local[q]))?;
        let g = contract(&view, &pset, &job)?;
        let u = marginal_vector(&g, &job);
        let neg: Vec<usize> = (0..g.n()).filter(|&i| u[i] < -TOL).collect();
        let found = if !neg.is_empty() {
            neg
        } else {
            dim_reduction_parallel(&g, &u, k - down.len(), consts, &job)?.t
        };
        jobs.push(job);
        let outcome = if found.is_empty() {
            ArcOutcome::NoArcs
        } else {
            let mut s: Vec<usize> = found.into_iter().map(|i| view.global(g.parent_index(i))).collect();
            s.sort_unstable();
            ArcOutcome::Arcs(s)
        };
        out.push((p, outcome));
    }
    ledger.absorb_parallel(&jobs);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lovasz::verify_dual_certificate;
    use crate::oracle_core::{generate_instance, value_table, GenParams, InstanceSpec};
    use proptest::prelude::*;

    fn minimal_minimizer(f: &dyn SetFunction) -> Vec<usize> {
        let t = value_table(f).unwrap();
        let best = t.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut inter = usize::MAX;
        for (m, &v) in t.iter().enumerate() {
            if v <= best + 1e-9 {
                inter &= m;
            }
        }
        (0..f.n()).filter(|&i| inter >> i & 1 == 1).collect()
    }

    #[test]
    fn truncate_examples() {
        assert_eq!(truncate(&[-5.0, 1.0, -1.0], 2.0), vec![-2.0, 1.0, -1.0]);
        assert_eq!(truncate(&[0.5, -0.5], 1.0), vec![0.5, -0.5]);
        assert_eq!(TruncationConfig::new(2, 1.0, 1.0, 0.1).unwrap().s, 3.0);
        assert!(TruncationConfig::new(2, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn certificate_for_modular_function() {
        let f = InstanceSpec::modular(vec![0.5, 0.2, 0.9, 0.1, 0.4]).unwrap();
        let l = QueryLedger::new();
        let c = dual_certificate_truncated(&f, 2, 0.5, 0.1, &Constants::faithful(), &l).unwrap();
        let r = verify_dual_certificate(&f, &c.y, 0.1, 2).unwrap();
        assert!(r.cond1 && r.cond2, "{r:?}");
        assert_eq!(c.iterations, c.planned);
        assert_eq!(l.rounds() as usize, 1 + c.iterations);
    }

    #[test]
    fn zero_function_gives_zero_certificate() {
        let f = InstanceSpec::modular(vec![0.0; 4]).unwrap();
        let l = QueryLedger::new();
        let c = dual_certificate_truncated(&f, 1, 0.0, 0.3, &Constants::faithful(), &l).unwrap();
        assert_eq!(c.y, vec![0.0; 4]);
        assert!(verify_dual_certificate(&f, &c.y, 0.3, 1).unwrap().cond1);
    }

    #[test]
    fn phi_schedule_starts_at_mass_gap() {
        let f = InstanceSpec::explicit(vec![0.0, 1.0, 2.0, 2.0]).unwrap();
        let l = QueryLedger::new();
        let u = marginal_vector(&f, &l);
        let fv = f.value_of(&[true, true]);
        let s = phi_schedule(u.iter().sum(), 2.0, fv, 4.0, 100);
        assert_eq!(s, vec![1.0, 0.5]);
    }

    #[test]
    fn dim_reduction_on_nonnegative_function_is_empty() {
        let f = generate_instance("cut", &GenParams::new(6, 2), 4).unwrap().instance;
        let l = QueryLedger::new();
        let u = marginal_vector(&f, &l);
        let d = dim_reduction_parallel(&f, &u, 2, &Constants::desk(), &l).unwrap();
        assert!(d.t.is_empty());
    }

    #[test]
    fn arc_finding_without_active_elements_is_free() {
        let f = generate_instance("planted", &GenParams::new(6, 2), 9).unwrap().instance;
        let l = QueryLedger::new();
        let ring = RingFamily::init(&f, 2, &l).unwrap();
        let before = l.totals();
        let out = arc_finding_parallel(&ring, f64::INFINITY, &Constants::desk(), &l).unwrap();
        assert!(out.is_empty());
        assert_eq!(l.totals(), before);
    }

    #[test]
    fn deterministic_reruns() {
        let f = generate_instance("planted", &GenParams::new(8, 2), 21).unwrap().instance;
        let run = || {
            let l = QueryLedger::new();
            let ring = RingFamily::init(&f, 2, &l).unwrap();
            let view = ring.extension();
            let d = dim_reduction_parallel(&view, &ring.u_ext_local(), 2, &Constants::desk(), &l).unwrap();
            (d, l.totals())
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn certificates_verify_when_precondition_holds(seed in any::<u64>(), n in 3usize..9, k in 1usize..3, which in 0usize..3) {
            let kind = ["planted", "cut", "coverage"][which];
            let f = generate_instance(kind, &GenParams::new(n, k), seed).unwrap().instance;
            let t = value_table(&f).unwrap();
            let fstar = t.iter().cloned().fold(f64::INFINITY, f64::min);
            let l = QueryLedger::new();
            let u = marginal_vector(&f, &l);
            prop_assume!(u.iter().all(|&v| v >= 0.0));
            let phi = -fstar + 0.1;
            let delta = 0.5 * phi.max(0.1);
            let c = dual_certificate_truncated(&f, k, phi, delta, &Constants::desk(), &l).unwrap();
            let r = verify_dual_certificate(&f, &c.y, delta, k).unwrap();
            prop_assert!(r.cond1 && r.cond2, "{:?}", r);
        }

        #[test]
        fn truncated_iterates_are_sparse_valid(seed in any::<u64>(), n in 3usize..9) {
            let k = 2;
            let f = generate_instance("planted", &GenParams::new(n, k), seed).unwrap().instance;
            let t = value_table(&f).unwrap();
            let fstar = t.iter().cloned().fold(f64::INFINITY, f64::min);
            let l = QueryLedger::new();
            let u = marginal_vector(&f, &l);
            let u_inf = u.iter().cloned().fold(0.0, f64::max);
            let s = k as f64 * u_inf - fstar;
            let mut log_x: Vec<f64> = (0..n).map(|i| ((i + 1) as f64 / n as f64).ln()).collect();
            for _ in 0..5 {
                let pi = permutation_of(&log_x);
                let g = subgradient_from_prefix(&pi, &prefix_values(&f, &pi, &l));
                let h = truncate(&g, s);
                for mask in 0usize..1 << n {
                    if mask.count_ones() as usize <= k {
                        let hs: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| h[i]).sum();
                        prop_assert!(hs <= t[mask] + 1e-9);
                    }
                }
                log_x.rotate_left(1);
            }
        }

        #[test]
        fn dim_reduction_is_sound(seed in any::<u64>(), n in 4usize..10, k in 1usize..4) {
            let f = generate_instance("planted", &GenParams::new(n, k), seed).unwrap().instance;
            let l = QueryLedger::new();
            let ring = RingFamily::init(&f, k, &l).unwrap();
            let view = ring.extension();
            let d = dim_reduction_parallel(&view, &ring.u_ext_local(), k, &Constants::desk(), &l).unwrap();
            let mm = minimal_minimizer(&f);
            prop_assert!(ring.w().to_vec().iter().all(|p| mm.contains(p)));
            let t: Vec<usize> = d.t.iter().map(|&i| view.global(i)).collect();
            prop_assert!(t.iter().all(|p| mm.contains(p)), "T {:?} vs minimal {:?}", t, mm);
        }
    }
}
