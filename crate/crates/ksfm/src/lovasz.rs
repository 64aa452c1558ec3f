//! Lovász extension, permutation subgradients and dual-certificate checks.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfmError};
use crate::oracle_core::{evaluate_chain, value_table, QueryLedger, SetFunction, Subset, TOL};

/// `order[i]` is the element in position i.
pub type Permutation = Vec<usize>;

/// Nonincreasing order of `x`, ties by ascending index.
pub fn permutation_of(x: &[f64]) -> Permutation {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

fn check_perm(pi: &[usize], n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(SfmError::Parameter(format!("permutation of length {} for n={n}", pi.len())));
    }
    let mut seen = vec![false; n];
    for &p in pi {
        if p >= n || seen[p] {
            return Err(SfmError::Parameter("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn lovasz_eval(f: &dyn SetFunction, x: &[f64], ledger: &QueryLedger) -> Result<f64> {
    let n = f.n();
    if x.len() != n || x.iter().any(|&v| !(-TOL..=1.0 + TOL).contains(&v)) {
        return Err(SfmError::Domain("lovasz_eval needs x in [0,1]^V".into()));
    }
    let pi = permutation_of(x);
    let g = subgradient(f, &pi, ledger)?;
    Ok(pi.iter().map(|&p| g[p] * x[p]).sum())
}

/// Prefix values `f(π[1..=i])`, one batch of n queries.
pub fn prefix_values(f: &dyn SetFunction, pi: &[usize], ledger: &QueryLedger) -> Vec<f64> {
    let n = f.n();
    let cuts: Vec<usize> = (1..=n).collect();
    evaluate_chain(f, &vec![false; n], pi, &cuts, ledger)
}

pub fn subgradient_from_prefix(pi: &[usize], prefix: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; pi.len()];
    let mut prev = 0.0;
    for (i, &p) in pi.iter().enumerate() {
        g[p] = prefix[i] - prev;
        prev = prefix[i];
    }
    g
}

pub fn subgradient(f: &dyn SetFunction, pi: &[usize], ledger: &QueryLedger) -> Result<Vec<f64>> {
    check_perm(pi, f.n())?;
    Ok(subgradient_from_prefix(pi, &prefix_values(f, pi, ledger)))
}

/// `(g_π)_i` from two prefix queries in one batch.
pub fn partial_subgradient(f: &dyn SetFunction, pi: &[usize], i: usize, ledger: &QueryLedger) -> Result<f64> {
    let n = f.n();
    check_perm(pi, n)?;
    let pos = pi
        .iter()
        .position(|&p| p == i)
        .ok_or_else(|| SfmError::Parameter(format!("element {i} not in permutation")))?;
    let cuts: Vec<usize> = if pos == 0 { vec![1] } else { vec![pos, pos + 1] };
    let v = evaluate_chain(f, &vec![false; n], pi, &cuts, ledger);
    Ok(if pos == 0 { v[0] } else { v[1] - v[0] })
}

/// Elements of P first, then the rest, both in their original relative order.
pub fn move_to_front(pi: &[usize], p: &[bool]) -> Permutation {
    let mut out: Vec<usize> = pi.iter().copied().filter(|&e| p[e]).collect();
    out.extend(pi.iter().copied().filter(|&e| !p[e]));
    out
}

/// `Δ_{π,P} = g_π − g_{π←P}` off P, zero on P.
pub fn delta_move(f: &dyn SetFunction, pi: &[usize], p: &Subset, ledger: &QueryLedger) -> Result<Vec<f64>> {
    let n = f.n();
    check_perm(pi, n)?;
    if p.is_empty() {
        return Ok(vec![0.0; n]);
    }
    let pm = p.to_bools();
    let g = subgradient(f, pi, ledger)?;
    let gm = subgradient(f, &move_to_front(pi, &pm), ledger)?;
    let mut d = vec![0.0; n];
    for q in 0..n {
        if pm[q] {
            continue;
        }
        let v = g[q] - gm[q];
        if v < -TOL {
            return Err(SfmError::Invariant(format!(
                "move-to-front increased coordinate {q} by {}; function is not submodular",
                -v
            )));
        }
        d[q] = v.max(0.0);
    }
    Ok(d)
}

/// Sum of the ℓ most negative entries of min(y, 0) over `members`.
pub fn neg_sum_over(y: &[f64], l: usize, members: impl Iterator<Item = usize>) -> f64 {
    let mut neg: Vec<f64> = members.map(|i| y[i]).filter(|&v| v < 0.0).collect();
    if neg.len() > l {
        neg.select_nth_unstable_by(l, |a, b| a.partial_cmp(b).unwrap());
        neg.truncate(l);
    }
    neg.iter().sum()
}

pub fn neg_sum(y: &[f64], l: usize, p: &Subset) -> Result<f64> {
    if l == 0 {
        return Err(SfmError::Parameter("neg_sum needs l >= 1".into()));
    }
    Ok(neg_sum_over(y, l, p.to_vec().into_iter()))
}

/// Weighted multiset of permutations representing `y = Σ α_t g_{π_t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateBundle {
    pub permutations: Vec<Permutation>,
    pub weights: Vec<f64>,
}

impl CertificateBundle {
    pub fn uniform(permutations: Vec<Permutation>) -> Self {
        let m = permutations.len();
        CertificateBundle { permutations, weights: vec![1.0 / m.max(1) as f64; m] }
    }

    pub fn len(&self) -> usize {
        self.permutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutations.is_empty()
    }

    pub fn extend(&mut self, other: CertificateBundle) {
        self.permutations.extend(other.permutations);
        let m = self.permutations.len();
        self.weights = vec![1.0 / m as f64; m];
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() || self.weights.len() != self.len() {
            return Err(SfmError::Parameter("bundle must be nonempty with one weight per permutation".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(SfmError::Parameter("bundle weights must be a distribution".into()));
        }
        Ok(())
    }
}

pub fn certificate_vector(bundle: &CertificateBundle, f: &dyn SetFunction, ledger: &QueryLedger) -> Result<Vec<f64>> {
    bundle.validate()?;
    let mut y = vec![0.0; f.n()];
    for (pi, &w) in bundle.permutations.iter().zip(&bundle.weights) {
        let g = subgradient(f, pi, ledger)?;
        for (a, b) in y.iter_mut().zip(g) {
            *a += w * b;
        }
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub cond1: bool,
    pub cond2: bool,
    /// Largest violation over both conditions (<= 0 when both hold).
    pub worst_violation: f64,
    pub f_star: f64,
    pub neg_sum: f64,
}

/// Exhaustive (δ,k) check with the `k+1` level.
pub fn verify_dual_certificate(f: &dyn SetFunction, y: &[f64], delta: f64, k: usize) -> Result<CertificateReport> {
    verify_dual_certificate_at(f, y, delta, k, k + 1)
}

/// Same check with the neg-sum level `l` exposed.
pub fn verify_dual_certificate_at(
    f: &dyn SetFunction,
    y: &[f64],
    delta: f64,
    k: usize,
    l: usize,
) -> Result<CertificateReport> {
    let n = f.n();
    if n > 20 {
        return Err(SfmError::SizeLimit(format!("certificate verification needs n <= 20, got {n}")));
    }
    if y.len() != n {
        return Err(SfmError::Parameter("y has the wrong length".into()));
    }
    let t = value_table(f)?;
    let f_star = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let ns = neg_sum_over(y, l, 0..n);
    let gap1 = f_star - (ns + delta);
    let mut ysum = vec![0.0; 1 << n];
    let mut gap2 = f64::NEG_INFINITY;
    for mask in 1usize..1 << n {
        let low = mask.trailing_zeros() as usize;
        ysum[mask] = ysum[mask & (mask - 1)] + y[low];
        if mask.count_ones() as usize <= k {
            gap2 = gap2.max(ysum[mask] - t[mask]);
        }
    }
    gap2 = gap2.max(0.0 - t[0]);
    Ok(CertificateReport {
        cond1: gap1 <= TOL,
        cond2: gap2 <= TOL,
        worst_violation: gap1.max(gap2),
        f_star,
        neg_sum: ns,
    })
}

pub fn in_base_polytope(f: &dyn SetFunction, y: &[f64]) -> Result<bool> {
    let n = f.n();
    if n > 20 {
        return Err(SfmError::SizeLimit(format!("base polytope check needs n <= 20, got {n}")));
    }
    let t = value_table(f)?;
    let mut ysum = vec![0.0; 1 << n];
    for mask in 1usize..1 << n {
        let low = mask.trailing_zeros() as usize;
        ysum[mask] = ysum[mask & (mask - 1)] + y[low];
        if ysum[mask] > t[mask] + TOL {
            return Ok(false);
        }
    }
    let full = (1usize << n) - 1;
    Ok((ysum[full] - t[full]).abs() <= TOL)
}
