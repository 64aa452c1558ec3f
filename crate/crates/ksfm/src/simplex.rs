//! Entropy geometry over the capped simplex `{0 <= x <= 1, sum x <= k}`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfmError};

/// Strong convexity of the entropy regularizer over the (k+1)-capped simplex.
pub fn rho(k: usize) -> f64 {
    1.0 / (k as f64 + 1.0)
}

pub fn is_capped_point(x: &[f64], k: usize) -> bool {
    x.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)) && x.iter().sum::<f64>() <= k as f64 + 1e-9
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterateTrace {
    pub points: Vec<Vec<f64>>,
    pub gradients_used: Vec<Vec<f64>>,
}

pub fn entropy(x: &[f64]) -> f64 {
    x.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

pub fn bregman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(SfmError::Domain("bregman arguments differ in length".into()));
    }
    if x.iter().any(|&v| !(v > 0.0)) || y.iter().any(|&v| !(v >= 0.0)) {
        return Err(SfmError::Domain("bregman needs x > 0 and y >= 0".into()));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| if b > 0.0 { b * (b / a).ln() } else { 0.0 } + a - b)
        .sum())
}

/// A prox output together with `ln z`.
#[derive(Clone, Debug)]
pub struct ProxOutput {
    pub z: Vec<f64>,
    pub log_z: Vec<f64>,
    pub lambda: f64,
    pub saturated: usize,
}

const SCAN_SLACK: f64 = 1e-12;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn desc_order(ly: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ly.len()).collect();
    order.sort_by(|&a, &b| ly[b].partial_cmp(&ly[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Minimizer of the entropic prox problem given `ly_j = ln x0_j - h_j`.
pub fn prox_from_log(ly: &[f64], k: usize) -> Result<ProxOutput> {
    if k == 0 {
        return Err(SfmError::Parameter("cap k must be >= 1".into()));
    }
    if ly.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(SfmError::Domain("prox input has NaN or +inf".into()));
    }
    let n = ly.len();
    let order = desc_order(ly);
    let finish = |sat: usize, lambda: f64| -> ProxOutput {
        let mut log_z: Vec<f64> = ly.iter().map(|&v| (v - lambda).min(0.0)).collect();
        for &j in &order[..sat] {
            log_z[j] = 0.0;
        }
        let z = log_z.iter().map(|v| v.exp()).collect();
        ProxOutput { z, log_z, lambda, saturated: sat }
    };
    if n <= k {
        let sat = ly.iter().filter(|&&v| v >= 0.0).count();
        return Ok(finish(sat, 0.0));
    }
    let mut suffix = vec![f64::NEG_INFINITY; n + 1];
    for i in (0..n).rev() {
        suffix[i] = log_add(ly[order[i]], suffix[i + 1]);
    }
    for i in 0..k {
        let lambda = (suffix[i] - ((k - i) as f64).ln()).max(0.0);
        if ly[order[i]] - lambda > SCAN_SLACK {
            continue;
        }
        if i >= 1 && ly[order[i - 1]] - lambda < -SCAN_SLACK {
            continue;
        }
        let out = finish(i, lambda);
        debug_assert!(ordering_holds(ly, &out.z), "prox ordering property violated");
        debug_assert!(kkt_residual_log(ly, k, &out.z) <= 1e-8, "prox KKT residual too large");
        return Ok(out);
    }
    Err(SfmError::Invariant("prox scan found no consistent saturation count".into()))
}

/// `argmin_{x in S_k} <h, x> + V_{x0}(x)`.
pub fn proximal_step(x0: &[f64], h: &[f64], k: usize) -> Result<Vec<f64>> {
    if x0.len() != h.len() {
        return Err(SfmError::Parameter("x0 and h differ in length".into()));
    }
    if x0.iter().any(|&v| !(v > 0.0)) {
        return Err(SfmError::Domain("prox center must be strictly positive".into()));
    }
    let ly: Vec<f64> = x0.iter().zip(h).map(|(&a, &b)| a.ln() - b).collect();
    Ok(prox_from_log(&ly, k)?.z)
}

fn ordering_holds(ly: &[f64], z: &[f64]) -> bool {
    let order = desc_order(ly);
    order.windows(2).all(|w| ly[w[0]] == ly[w[1]] || z[w[0]] >= z[w[1]])
}

/// Residual of the prox optimality conditions for a candidate `z`.
pub fn kkt_residual(x0: &[f64], h: &[f64], k: usize, z: &[f64]) -> f64 {
    let ly: Vec<f64> = x0.iter().zip(h).map(|(&a, &b)| a.ln() - b).collect();
    kkt_residual_log(&ly, k, z)
}

fn kkt_residual_log(ly: &[f64], k: usize, z: &[f64]) -> f64 {
    let sum: f64 = z.iter().sum();
    let mut lam = 0.0;
    let mut best = -1.0;
    for (j, &v) in z.iter().enumerate() {
        if v < 1.0 - 1e-12 && v > best && v > 0.0 {
            best = v;
            lam = ly[j] - v.ln();
        }
    }
    let mut r = (-lam).max(0.0) + (sum - k as f64).max(0.0);
    if lam > 1e-12 {
        r = r.max(lam.min(1.0) * (sum - k as f64).abs());
    }
    for (j, &v) in z.iter().enumerate() {
        r = r.max((v - 1.0).max(0.0)).max(-v);
        r = r.max((v - (ly[j] - lam).min(0.0).exp()).abs());
    }
    r
}

/// `argmin_{x in S_k} <h, x> + r(x)`.
pub fn ftrl_update(h_cumulative: &[f64], k: usize) -> Result<Vec<f64>> {
    let ly: Vec<f64> = h_cumulative.iter().map(|&v| -v - 1.0).collect();
    Ok(prox_from_log(&ly, k)?.z)
}

/// Order of `-h` decreasing, ties by ascending index.
pub fn implied_permutation(h_cumulative: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h_cumulative.len()).collect();
    order.sort_by(|&a, &b| {
        h_cumulative[a]
            .partial_cmp(&h_cumulative[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub fn mirror_descent<G>(mut grad: G, k: usize, x0: &[f64], eta: f64, m: usize) -> Result<IterateTrace>
where
    G: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    if !(eta > 0.0) || m == 0 {
        return Err(SfmError::Parameter("mirror descent needs eta > 0 and m >= 1".into()));
    }
    if x0.iter().any(|&v| !(v > 0.0)) || !is_capped_point(x0, k) {
        return Err(SfmError::Domain("mirror descent start must be interior".into()));
    }
    let mut trace = IterateTrace { points: vec![x0.to_vec()], gradients_used: Vec::with_capacity(m) };
    let mut log_x: Vec<f64> = x0.iter().map(|v| v.ln()).collect();
    for t in 0..m {
        let h = grad(trace.points.last().unwrap(), t)?;
        let ly: Vec<f64> = log_x.iter().zip(&h).map(|(&a, &b)| a - eta * b).collect();
        let out = prox_from_log(&ly, k)?;
        log_x = out.log_z;
        trace.points.push(out.z);
        trace.gradients_used.push(h);
    }
    Ok(trace)
}

pub fn stochastic_ftrl<S, R>(mut sampler: S, n: usize, k: usize, eta: f64, m: usize, rng: &mut R) -> Result<IterateTrace>
where
    S: FnMut(&[f64], usize, &mut R) -> Result<Vec<f64>>,
{
    if !(eta > 0.0) {
        return Err(SfmError::Parameter("stochastic FTRL needs eta > 0".into()));
    }
    let mut cum = vec![0.0; n];
    let mut trace = IterateTrace { points: vec![ftrl_update(&cum, k)?], gradients_used: Vec::with_capacity(m) };
    for t in 0..m {
        let h = sampler(trace.points.last().unwrap(), t, rng)?;
        let norm = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if eta * norm >= 0.5 {
            return Err(SfmError::StepSize { t, value: eta * norm });
        }
        for (c, v) in cum.iter_mut().zip(&h) {
            *c += eta * v;
        }
        trace.points.push(ftrl_update(&cum, k)?);
        trace.gradients_used.push(h);
    }
    Ok(trace)
}

/// Normalized weights `p^(0..=T)` of the multiplicative update `w <- w * exp(g)`.
pub fn multiplicative_weights(g_sequence: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = g_sequence.first().map_or(0, |g| g.len());
    let mut logw = vec![0.0; n];
    let normalize = |lw: &[f64]| {
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let mut out = vec![normalize(&logw)];
    for (t, g) in g_sequence.iter().enumerate() {
        if g.len() != n {
            return Err(SfmError::Parameter("gradient lengths differ".into()));
        }
        let norm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm > 0.5 {
            return Err(SfmError::StepSize { t, value: norm });
        }
        for (w, v) in logw.iter_mut().zip(g) {
            *w += v;
        }
        out.push(normalize(&logw));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lovasz::permutation_of;
    use crate::oracle_core::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    /// Bisection on the multiplier of the sum constraint.
    fn dual_bisection(x0: &[f64], h: &[f64], k: usize) -> Vec<f64> {
        let y: Vec<f64> = x0.iter().zip(h).map(|(a, b)| a * (-b).exp()).collect();
        let at = |lam: f64| y.iter().map(|v| (v * (-lam).exp()).min(1.0)).collect::<Vec<_>>();
        if at(0.0).iter().sum::<f64>() <= k as f64 {
            return at(0.0);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while at(hi).iter().sum::<f64>() > k as f64 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if at(mid).iter().sum::<f64>() > k as f64 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(hi)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn bregman_examples() {
        assert_eq!(bregman(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((bregman(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bregman(&[0.0, 1.0], &[0.5, 0.5]).is_err());
        let n = 5;
        let k = 2;
        let u = vec![k as f64 / n as f64; n];
        assert!((entropy(&u) - k as f64 * (0.4f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn prox_examples() {
        let x0 = [0.2, 0.5, 0.3];
        assert!(max_diff(&proximal_step(&x0, &[0.0; 3], 1).unwrap(), &x0) < 1e-15);
        let z = proximal_step(&[0.5, 0.5], &[0.0, 3f64.ln()], 1).unwrap();
        assert!(max_diff(&z, &[0.5, 1.0 / 6.0]) < 1e-15);
        let z = proximal_step(&[0.5, 0.5, 0.5], &[-5.0, -5.0, 0.0], 2).unwrap();
        assert!(is_capped_point(&z, 2));
        assert!(max_diff(&z, &dual_bisection(&[0.5; 3], &[-5.0, -5.0, 0.0], 2)) < 1e-9);
    }

    #[test]
    fn ftrl_examples() {
        let z = ftrl_update(&[0.0; 6], 2).unwrap();
        assert!(max_diff(&z, &[1.0 / 3.0; 6]) < 1e-12);
        let z = ftrl_update(&[0.0; 6], 5).unwrap();
        assert!(max_diff(&z, &[(-1f64).exp(); 6]) < 1e-12);
        let mut h = vec![0.0; 5];
        h[0] = -100.0;
        let z = ftrl_update(&h, 1).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-6);
        let hp = [0.3, -1.2, 0.7, 0.0];
        let z = ftrl_update(&hp, 2).unwrap();
        let zr = ftrl_update(&[hp[2], hp[0], hp[3], hp[1]], 2).unwrap();
        assert_eq!(zr, vec![z[2], z[0], z[3], z[1]]);
    }

    #[test]
    fn implied_permutation_examples() {
        assert_eq!(implied_permutation(&[0.0; 3]), vec![0, 1, 2]);
        assert_eq!(implied_permutation(&[2.0, -1.0, 0.0]), vec![1, 2, 0]);
    }

    #[test]
    fn saturated_ties_break_by_index_in_permutation_of() {
        let h = [-10.0, -20.0, 0.0, 0.0];
        let z = ftrl_update(&h, 3).unwrap();
        assert_eq!(&z[..2], &[1.0, 1.0]);
        assert_eq!(implied_permutation(&h), vec![1, 0, 2, 3]);
        assert_eq!(permutation_of(&z), vec![0, 1, 2, 3]);
    }

    #[test]
    fn mirror_descent_examples() {
        let x0 = [0.3, 0.3, 0.3];
        let t = mirror_descent(|_, _| Ok(vec![0.0; 3]), 1, &x0, 0.5, 4).unwrap();
        assert!(t.points.iter().all(|p| max_diff(p, &x0) < 1e-15));
        let t = mirror_descent(|_, _| Ok(vec![1.0, 0.0, -1.0]), 1, &x0, 0.2, 10).unwrap();
        for w in t.points.windows(2) {
            assert!(w[1][0] < w[0][0] && w[1][2] > w[0][2]);
        }
        assert!(mirror_descent(|_, _| Ok(vec![0.0; 3]), 1, &x0, 0.0, 4).is_err());
    }

    #[test]
    fn mirror_descent_regret_bound() {
        let mut rng = RngStream::new(7, "regret");
        for _ in 0..20 {
            let n = rng.gen_range(3..9);
            let k = rng.gen_range(1..n);
            let m = 200;
            let hs: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let eta = 0.05;
            let x0 = vec![k as f64 / n as f64; n];
            let t = mirror_descent(|_, i| Ok(hs[i].clone()), k, &x0, eta, m).unwrap();
            let mut w = vec![1e-9; n];
            for j in 0..k {
                w[j] = 1.0 - 1e-9;
            }
            let l = 1.0f64;
            let regret: f64 = (0..m)
                .map(|i| hs[i].iter().zip(&t.points[i]).zip(&w).map(|((h, x), wv)| h * (x - wv)).sum::<f64>())
                .sum();
            let bound = eta * l * l * m as f64 / (2.0 * rho(k)) + bregman(&x0, &w).unwrap() / eta;
            assert!(regret <= bound + 1e-9, "regret {regret} > bound {bound}");
        }
    }

    #[test]
    fn stochastic_ftrl_examples() {
        let mut rng = RngStream::new(1, "sftrl");
        let t = stochastic_ftrl(|_, _, _| Ok(vec![0.0; 4]), 4, 2, 0.1, 5, &mut rng).unwrap();
        assert!(t.points.iter().all(|p| max_diff(p, &t.points[0]) < 1e-15));
        let hs = [vec![1.0, -1.0, 0.5], vec![0.2, 0.1, -0.3]];
        let t = stochastic_ftrl(|_, i, _| Ok(hs[i].clone()), 3, 1, 0.2, 2, &mut rng).unwrap();
        let cum: Vec<f64> = (0..3).map(|j| 0.2 * (hs[0][j] + hs[1][j])).collect();
        assert!(max_diff(&t.points[2], &ftrl_update(&cum, 1).unwrap()) < 1e-15);
        let err = stochastic_ftrl(|_, _, _| Ok(vec![10.0, 0.0]), 2, 1, 0.1, 3, &mut rng).unwrap_err();
        assert!(matches!(err, SfmError::StepSize { t: 0, .. }));
    }

    #[test]
    fn multiplicative_weights_examples() {
        let p = multiplicative_weights(&[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!(p.iter().all(|q| max_diff(q, &[1.0 / 3.0; 3]) < 1e-15));
        let p = multiplicative_weights(&[vec![0.5, 0.0]]).unwrap();
        let e = 0.5f64.exp();
        assert!(max_diff(&p[1], &[e / (e + 1.0), 1.0 / (e + 1.0)]) < 1e-15);
        assert!(multiplicative_weights(&[vec![0.6, 0.0]]).is_err());
    }

    #[test]
    fn multiplicative_weights_order_matches_ftrl() {
        let mut rng = RngStream::new(3, "mw");
        let gs: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
        let p = multiplicative_weights(&gs).unwrap();
        let mut cum = vec![0.0; 5];
        for (t, g) in gs.iter().enumerate() {
            for (c, v) in cum.iter_mut().zip(g) {
                *c -= v;
            }
            assert_eq!(permutation_of(&p[t + 1]), implied_permutation(&cum));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn prox_matches_dual_oracle(seed in any::<u64>(), n in 1usize..13, kraw in 1usize..13, scale in 0.1f64..30.0) {
            let k = kraw.min(n.max(1));
            let mut rng = RngStream::new(seed, "prox");
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let x0: Vec<f64> = raw.iter().map(|v| (v * k as f64 / s).min(1.0) * 0.999).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            let z = proximal_step(&x0, &h, k).unwrap();
            prop_assert!(is_capped_point(&z, k));
            prop_assert!(kkt_residual(&x0, &h, k, &z) <= 1e-8);
            prop_assert!(max_diff(&z, &dual_bisection(&x0, &h, k)) <= 1e-8);
            let ly: Vec<f64> = x0.iter().zip(&h).map(|(a, b)| a.ln() - b).collect();
            for i in 0..n {
                for j in 0..n {
                    if ly[i] > ly[j] {
                        prop_assert!(z[i] >= z[j]);
                    }
                }
            }
        }

        #[test]
        fn implied_permutation_agrees_with_ftrl(seed in any::<u64>(), n in 1usize..12, scale in 0.01f64..50.0) {
            let mut rng = RngStream::new(seed, "implied");
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            let pi = implied_permutation(&h);
            for k in 1..=n {
                let z = ftrl_update(&h, k).unwrap();
                prop_assert!(pi.windows(2).all(|w| z[w[0]] >= z[w[1]]));
                if z.iter().filter(|&&v| v == 1.0).count() <= 1 {
                    prop_assert_eq!(&permutation_of(&z), &pi);
                }
            }
        }
    }
}
