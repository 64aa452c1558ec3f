//! Ring family of contracted, discarded and arc-constrained elements, and
//! the submodular extension it induces over the live elements.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfmError};
use crate::oracle_core::{evaluate_chain, evaluate_mask, evaluate_masks, QueryLedger, SetFunction, Subset};

/// Live marginals below this are contracted.
pub const NEG_MARGINAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Contraction { elements: Vec<usize> },
    Discard { elements: Vec<usize> },
    ArcBatch { arcs: usize },
    CycleMerge { elements: Vec<usize> },
    ScaleHalving { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSnapshot {
    pub w: Vec<usize>,
    pub d: Vec<usize>,
    pub down: BTreeMap<usize, Vec<usize>>,
    pub u_raw: BTreeMap<usize, f64>,
    pub u_ext: BTreeMap<usize, f64>,
}

fn pos(v: f64) -> f64 {
    v.max(0.0)
}

pub struct RingFamily<'a> {
    base: &'a dyn SetFunction,
    n: usize,
    k: usize,
    w: Vec<bool>,
    d: Vec<bool>,
    /// p↓ without W, sorted, contains p. Empty for dead p.
    down: Vec<Vec<usize>>,
    reverse: Vec<Vec<usize>>,
    u_raw: Vec<f64>,
    u_ext: Vec<f64>,
    comp_len: Vec<usize>,
    f_w: f64,
    live: Vec<usize>,
    events: Vec<TraceEvent>,
    ignored_arcs: u64,
    monotonicity_violations: u64,
}

impl<'a> RingFamily<'a> {
    /// Start from W = D = ∅ and contract negative marginals.
    pub fn init(base: &'a dyn SetFunction, k: usize, ledger: &QueryLedger) -> Result<Self> {
        if k == 0 {
            return Err(SfmError::Parameter("sparsity k must be >= 1".into()));
        }
        let n = base.n();
        let mut rf = RingFamily {
            base,
            n,
            k,
            w: vec![false; n],
            d: vec![false; n],
            down: (0..n).map(|p| vec![p]).collect(),
            reverse: (0..n).map(|p| vec![p]).collect(),
            u_raw: vec![f64::INFINITY; n],
            u_ext: vec![f64::INFINITY; n],
            comp_len: vec![1; n],
            f_w: 0.0,
            live: (0..n).collect(),
            events: Vec::new(),
            ignored_arcs: 0,
            monotonicity_violations: 0,
        };
        let all: Vec<usize> = (0..n).collect();
        rf.recompute(&all, false, ledger);
        rf.contract_negative(ledger)?;
        Ok(rf)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_live(&self, p: usize) -> bool {
        !self.w[p] && !self.d[p]
    }

    pub fn live(&self) -> &[usize] {
        &self.live
    }

    pub fn w(&self) -> Subset {
        Subset::from_bools(&self.w)
    }

    pub fn d(&self) -> Subset {
        Subset::from_bools(&self.d)
    }

    pub fn w_mask(&self) -> &[bool] {
        &self.w
    }

    pub fn d_mask(&self) -> &[bool] {
        &self.d
    }

    pub fn w_len(&self) -> usize {
        self.w.iter().filter(|&&b| b).count()
    }

    pub fn down(&self, p: usize) -> &[usize] {
        &self.down[p]
    }

    pub fn u_raw(&self, p: usize) -> f64 {
        self.u_raw[p]
    }

    pub fn u_ext(&self, p: usize) -> f64 {
        self.u_ext[p]
    }

    /// `u_ext` over live elements in local order.
    pub fn u_ext_local(&self) -> Vec<f64> {
        self.live.iter().map(|&p| self.u_ext[p]).collect()
    }

    pub fn u_inf(&self) -> f64 {
        self.live.iter().map(|&p| self.u_ext[p]).fold(0.0, f64::max)
    }

    pub fn f_w(&self) -> f64 {
        self.f_w
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn ignored_arcs(&self) -> u64 {
        self.ignored_arcs
    }

    pub fn monotonicity_violations(&self) -> u64 {
        self.monotonicity_violations
    }

    pub fn exhausted(&self) -> bool {
        self.live.is_empty()
    }

    pub fn base(&self) -> &'a dyn SetFunction {
        self.base
    }

    pub fn snapshot(&self) -> RingSnapshot {
        RingSnapshot {
            w: self.w().to_vec(),
            d: self.d().to_vec(),
            down: self.live.iter().map(|&p| (p, self.down[p].clone())).collect(),
            u_raw: self.live.iter().map(|&p| (p, self.u_raw[p])).collect(),
            u_ext: self.live.iter().map(|&p| (p, self.u_ext[p])).collect(),
        }
    }

    fn refresh_live(&mut self) {
        self.live = (0..self.n).filter(|&p| self.is_live(p)).collect();
    }

    /// Recompute marginals of `targets`, plus f(W) when `with_fw`, in one batch.
    fn recompute(&mut self, targets: &[usize], with_fw: bool, ledger: &QueryLedger) {
        let mut masks: Vec<Vec<bool>> = Vec::new();
        if with_fw {
            masks.push(self.w.clone());
        }
        let mut slots = Vec::with_capacity(targets.len());
        for &p in targets {
            let mut m = self.w.clone();
            for &q in &self.down[p] {
                m[q] = true;
            }
            let with = masks.len();
            masks.push(m.clone());
            let without = if self.down[p].len() > 1 {
                for q in self.component(p) {
                    m[q] = false;
                }
                masks.push(m);
                Some(masks.len() - 1)
            } else {
                None
            };
            slots.push((p, with, without));
        }
        let vals = evaluate_masks(self.base, &masks, ledger);
        if with_fw {
            self.f_w = vals[0];
        }
        for (p, with, without) in slots {
            let lower = without.map_or(self.f_w, |i| vals[i]);
            let raw = vals[with] - lower;
            let ext = if self.down[p].len() == 1 || raw >= 0.0 { raw } else { 0.0 };
            let comp = self.component(p);
            if comp.len() != self.comp_len[p] {
                self.comp_len[p] = comp.len();
                if comp[0] == p {
                    self.events.push(TraceEvent::CycleMerge { elements: comp });
                }
            } else if ext > self.u_ext[p] + 1e-9 {
                self.monotonicity_violations += 1;
            }
            self.u_raw[p] = raw;
            self.u_ext[p] = ext;
        }
    }

    /// Members of p↓ whose own closure contains p.
    pub fn component(&self, p: usize) -> Vec<usize> {
        self.down[p].iter().copied().filter(|&q| q == p || self.down[q].contains(&p)).collect()
    }

    fn contract_negative(&mut self, ledger: &QueryLedger) -> Result<()> {
        loop {
            let neg: Vec<usize> = self.live.iter().copied().filter(|&p| self.u_ext[p] < -NEG_MARGINAL_TOL).collect();
            if neg.is_empty() {
                return Ok(());
            }
            self.absorb_w(&neg)?;
            let live = self.live.clone();
            self.recompute(&live, true, ledger);
        }
    }

    fn absorb_w(&mut self, add: &[usize]) -> Result<()> {
        let mut newly = Vec::new();
        for &p in add {
            if self.w[p] {
                continue;
            }
            if self.d[p] {
                return Err(SfmError::InconsistentState(format!("element {p} is both contracted and discarded")));
            }
            for &q in &self.down[p].clone() {
                if self.d[q] {
                    return Err(SfmError::InconsistentState(format!("closure of {p} reaches discarded {q}")));
                }
                if !self.w[q] {
                    self.w[q] = true;
                    newly.push(q);
                }
            }
        }
        for &q in &newly {
            for r in std::mem::take(&mut self.reverse[q]) {
                self.down[r].retain(|&x| x != q);
            }
            for x in std::mem::take(&mut self.down[q]) {
                self.reverse[x].retain(|&y| y != q);
            }
        }
        newly.sort_unstable();
        if !newly.is_empty() {
            self.events.push(TraceEvent::Contraction { elements: newly });
        }
        self.refresh_live();
        Ok(())
    }

    /// Discard `start` and every live element whose closure reaches it.
    fn discard(&mut self, start: &[usize]) {
        let mut stack: Vec<usize> = start.iter().copied().filter(|&p| self.is_live(p)).collect();
        let mut gone = Vec::new();
        while let Some(p) = stack.pop() {
            if !self.is_live(p) {
                continue;
            }
            self.d[p] = true;
            gone.push(p);
            for r in std::mem::take(&mut self.reverse[p]) {
                if r != p && self.is_live(r) {
                    stack.push(r);
                }
            }
            for x in std::mem::take(&mut self.down[p]) {
                self.reverse[x].retain(|&y| y != p);
            }
        }
        gone.sort_unstable();
        if !gone.is_empty() {
            self.events.push(TraceEvent::Discard { elements: gone });
        }
        self.refresh_live();
    }

    pub fn update_space(&mut self, w_add: &Subset, d_add: &Subset, ledger: &QueryLedger) -> Result<()> {
        if w_add.n() != self.n || d_add.n() != self.n {
            return Err(SfmError::MalformedSubset("update_space subsets have the wrong ground size".into()));
        }
        let wa = w_add.to_vec();
        if let Some(&p) = wa.iter().find(|&&p| self.d[p] || d_add.contains(p)) {
            return Err(SfmError::InconsistentState(format!("cannot contract discarded element {p}")));
        }
        self.discard(&d_add.to_vec());
        if wa.iter().any(|&p| !self.w[p]) {
            self.absorb_w(&wa)?;
            let live = self.live.clone();
            self.recompute(&live, true, ledger);
        }
        self.contract_negative(ledger)
    }

    /// Add arcs `p → q` for each `(p, S_p)`, close them for k rounds and
    /// discard elements whose closure grows past k or reaches D.
    pub fn update_arcs(&mut self, arcs: &[(usize, Vec<usize>)], ledger: &QueryLedger) -> Result<()> {
        let mut changed = vec![false; self.n];
        let mut to_discard = Vec::new();
        let mut added = 0usize;
        for (p, targets) in arcs {
            let p = *p;
            if p >= self.n || !self.is_live(p) {
                self.ignored_arcs += 1;
                continue;
            }
            for &q in targets {
                if q >= self.n {
                    return Err(SfmError::MalformedSubset(format!("arc target {q} out of range")));
                }
                if self.w[q] || self.down[p].contains(&q) {
                    continue;
                }
                if self.d[q] {
                    to_discard.push(p);
                    continue;
                }
                self.down[p].push(q);
                self.reverse[q].push(p);
                changed[p] = true;
                added += 1;
            }
            self.down[p].sort_unstable();
        }
        if added > 0 {
            self.events.push(TraceEvent::ArcBatch { arcs: added });
        }
        for p in 0..self.n {
            if self.is_live(p) && self.down[p].len() > self.k {
                to_discard.push(p);
            }
        }
        self.discard(&to_discard);
        for _ in 0..self.k {
            let mut grew = false;
            let mut over = Vec::new();
            let snapshot: Vec<(usize, Vec<usize>)> = self
                .live
                .iter()
                .filter(|&&p| self.down[p].len() > 1)
                .map(|&p| {
                    let mut nd = self.down[p].clone();
                    for &q in &self.down[p] {
                        nd.extend_from_slice(&self.down[q]);
                    }
                    nd.sort_unstable();
                    nd.dedup();
                    (p, nd)
                })
                .collect();
            for (p, nd) in snapshot {
                if !self.is_live(p) || nd.len() == self.down[p].len() {
                    continue;
                }
                for &q in &nd {
                    if !self.down[p].contains(&q) {
                        self.reverse[q].push(p);
                    }
                }
                self.down[p] = nd;
                changed[p] = true;
                grew = true;
                if self.down[p].len() > self.k || self.down[p].iter().any(|&q| self.d[q]) {
                    over.push(p);
                }
            }
            self.discard(&over);
            if !grew {
                break;
            }
        }
        let targets: Vec<usize> = self.live.iter().copied().filter(|&p| changed[p]).collect();
        self.recompute(&targets, false, ledger);
        self.contract_negative(ledger)
    }

    /// `{p ∈ S : p↓ ⊆ S}` for a set of live elements.
    pub fn closure_restrict(&self, s: &Subset) -> Subset {
        let m = s.to_bools();
        let keep = s.to_vec().into_iter().filter(|&p| self.is_live(p) && self.down[p].iter().all(|&q| m[q]));
        Subset::from_indices(self.n, keep).expect("closure stays in range")
    }

    /// Counted extension value of a set of live elements (global indices).
    pub fn ext_eval(&self, s: &Subset, ledger: &QueryLedger) -> Result<f64> {
        if s.n() != self.n {
            return Err(SfmError::MalformedSubset("ext_eval subset has the wrong ground size".into()));
        }
        if let Some(p) = s.to_vec().into_iter().find(|&p| !self.is_live(p)) {
            return Err(SfmError::Domain(format!("element {p} is not live")));
        }
        let closed = self.closure_restrict(s);
        let mut m = self.w.clone();
        for p in closed.to_vec() {
            m[p] = true;
        }
        let penalty: f64 = s.to_vec().into_iter().filter(|&p| !closed.contains(p)).map(|p| pos(self.u_raw[p])).sum();
        Ok(evaluate_mask(self.base, &m, ledger) - self.f_w + penalty)
    }

    /// Subgradient of the extension along a permutation of live elements,
    /// indexed globally (zero off the live set).
    pub fn ext_subgrad(&self, pi: &[usize], ledger: &QueryLedger) -> Result<Vec<f64>> {
        let local = self.localize(pi)?;
        let view = self.extension();
        let cuts: Vec<usize> = (1..=local.len()).collect();
        let vals = evaluate_chain(&view, &vec![false; local.len()], &local, &cuts, ledger);
        let mut g = vec![0.0; self.n];
        let mut prev = 0.0;
        for (i, &p) in pi.iter().enumerate() {
            g[p] = vals[i] - prev;
            prev = vals[i];
        }
        Ok(g)
    }

    pub fn ext_partial(&self, i: usize, pi: &[usize], ledger: &QueryLedger) -> Result<f64> {
        if i >= self.n || !self.is_live(i) {
            return Err(SfmError::Domain(format!("element {i} is not live")));
        }
        let local = self.localize(pi)?;
        let at = pi.iter().position(|&p| p == i).expect("localize checked membership");
        let view = self.extension();
        let cuts = if at == 0 { vec![1] } else { vec![at, at + 1] };
        let v = evaluate_chain(&view, &vec![false; local.len()], &local, &cuts, ledger);
        Ok(if at == 0 { v[0] } else { v[1] - v[0] })
    }

    fn localize(&self, pi: &[usize]) -> Result<Vec<usize>> {
        let mut idx = vec![usize::MAX; self.n];
        for (l, &p) in self.live.iter().enumerate() {
            idx[p] = l;
        }
        let mut seen = vec![false; self.live.len()];
        let mut out = Vec::with_capacity(pi.len());
        for &p in pi {
            let l = if p < self.n { idx[p] } else { usize::MAX };
            if l == usize::MAX || seen[l] {
                return Err(SfmError::Parameter("permutation must list each live element once".into()));
            }
            seen[l] = true;
            out.push(l);
        }
        if out.len() != self.live.len() {
            return Err(SfmError::Parameter("permutation must cover the live elements".into()));
        }
        Ok(out)
    }

    /// The extension as a set function over live elements in local order.
    pub fn extension(&self) -> Extension<'_, 'a> {
        Extension { ring: self }
    }
}

/// Uncounted view of the extension; use the counted free functions on it.
pub struct Extension<'r, 'a> {
    ring: &'r RingFamily<'a>,
}

impl Extension<'_, '_> {
    /// Global index of local element `i`.
    pub fn global(&self, i: usize) -> usize {
        self.ring.live[i]
    }

    pub fn ring(&self) -> &RingFamily<'_> {
        self.ring
    }
}

struct ClosureWalk<'r, 'a> {
    ring: &'r RingFamily<'a>,
    in_s: Vec<bool>,
    missing: Vec<usize>,
    closed: Vec<usize>,
    penalty: f64,
}

impl<'r, 'a> ClosureWalk<'r, 'a> {
    fn new(ring: &'r RingFamily<'a>) -> Self {
        ClosureWalk {
            ring,
            in_s: vec![false; ring.n],
            missing: ring.down.iter().map(|d| d.len()).collect(),
            closed: Vec::new(),
            penalty: 0.0,
        }
    }

    fn add(&mut self, q: usize) {
        if self.in_s[q] {
            return;
        }
        self.in_s[q] = true;
        self.penalty += pos(self.ring.u_raw[q]);
        for &p in &self.ring.reverse[q] {
            self.missing[p] -= 1;
            if self.missing[p] == 0 && self.in_s[p] {
                self.penalty -= pos(self.ring.u_raw[p]);
                self.closed.push(p);
            }
        }
    }
}

impl SetFunction for Extension<'_, '_> {
    fn n(&self) -> usize {
        self.ring.live.len()
    }

    fn value_of(&self, members: &[bool]) -> f64 {
        let mut walk = ClosureWalk::new(self.ring);
        for (i, &b) in members.iter().enumerate() {
            if b {
                walk.add(self.ring.live[i]);
            }
        }
        let mut m = self.ring.w.clone();
        for &p in &walk.closed {
            m[p] = true;
        }
        self.ring.base.value_of(&m) - self.ring.f_w + walk.penalty
    }

    fn chain_values(&self, base: &[bool], order: &[usize], cuts: &[usize]) -> Vec<f64> {
        let ring = self.ring;
        let mut walk = ClosureWalk::new(ring);
        for (i, &b) in base.iter().enumerate() {
            if b {
                walk.add(ring.live[i]);
            }
        }
        let mut start = ring.w.clone();
        for &p in &walk.closed {
            start[p] = true;
        }
        let offset = walk.closed.len();
        let mut base_cuts = Vec::with_capacity(cuts.len());
        let mut penalties = Vec::with_capacity(cuts.len());
        let mut at = 0;
        for &c in cuts {
            while at < c {
                walk.add(ring.live[order[at]]);
                at += 1;
            }
            base_cuts.push(walk.closed.len() - offset);
            penalties.push(walk.penalty);
        }
        ring.base
            .chain_values(&start, &walk.closed[offset..], &base_cuts)
            .into_iter()
            .zip(penalties)
            .map(|(v, pen)| v - ring.f_w + pen)
            .collect()
    }
}
