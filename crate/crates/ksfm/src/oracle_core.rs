//! Ground sets, subsets, instances and the instrumented evaluation oracle.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SfmError};

/// Absolute tolerance for every threshold comparison.
pub const TOL: f64 = 1e-9;

/// Largest ground set accepted by exhaustive routines.
pub const BRUTE_FORCE_LIMIT: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundSet {
    pub n: usize,
}

impl GroundSet {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SfmError::MalformedInstance("ground set must be nonempty".into()));
        }
        Ok(GroundSet { n })
    }
}

/// A subset of `0..n`. Bitmask for n <= 64, sorted list otherwise.
#[derive(Clone, Debug)]
pub enum Subset {
    Mask { n: usize, bits: u64 },
    List { n: usize, items: Vec<usize> },
}

impl Subset {
    pub fn empty(n: usize) -> Self {
        if n <= 64 {
            Subset::Mask { n, bits: 0 }
        } else {
            Subset::List { n, items: Vec::new() }
        }
    }

    pub fn full(n: usize) -> Self {
        Subset::from_sorted_unchecked(n, (0..n).collect())
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(n: usize, it: I) -> Result<Self> {
        let mut items: Vec<usize> = it.into_iter().collect();
        if let Some(&bad) = items.iter().find(|&&i| i >= n) {
            return Err(SfmError::MalformedSubset(format!("index {bad} out of range for n={n}")));
        }
        items.sort_unstable();
        items.dedup();
        Ok(Subset::from_sorted_unchecked(n, items))
    }

    pub fn from_bools(members: &[bool]) -> Self {
        let n = members.len();
        Subset::from_sorted_unchecked(n, (0..n).filter(|&i| members[i]).collect())
    }

    pub fn from_mask(n: usize, bits: u64) -> Result<Self> {
        if n > 64 || (n < 64 && bits >> n != 0) {
            return Err(SfmError::MalformedSubset(format!("mask {bits:#x} invalid for n={n}")));
        }
        Ok(Subset::Mask { n, bits })
    }

    /// Forces the sorted-list representation regardless of n.
    pub fn as_list(&self) -> Subset {
        Subset::List { n: self.n(), items: self.to_vec() }
    }

    fn from_sorted_unchecked(n: usize, items: Vec<usize>) -> Self {
        if n <= 64 {
            let bits = items.iter().fold(0u64, |b, &i| b | (1u64 << i));
            Subset::Mask { n, bits }
        } else {
            Subset::List { n, items }
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Subset::Mask { n, .. } | Subset::List { n, .. } => *n,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Subset::Mask { bits, .. } => bits.count_ones() as usize,
            Subset::List { items, .. } => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            Subset::Mask { n, bits } => i < *n && bits >> i & 1 == 1,
            Subset::List { items, .. } => items.binary_search(&i).is_ok(),
        }
    }

    /// Members in ascending order.
    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            Subset::Mask { n, bits } => (0..*n).filter(|&i| bits >> i & 1 == 1).collect(),
            Subset::List { items, .. } => items.clone(),
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        let mut m = vec![false; self.n()];
        for i in self.to_vec() {
            m[i] = true;
        }
        m
    }

    pub fn union(&self, other: &Subset) -> Subset {
        let n = self.n().max(other.n());
        let mut v = self.to_vec();
        v.extend(other.to_vec());
        Subset::from_indices(n, v).expect("union of valid subsets")
    }

    pub fn is_subset_of(&self, other: &Subset) -> bool {
        self.to_vec().into_iter().all(|i| other.contains(i))
    }

    /// Bitmask index, only for n <= 64.
    pub fn mask(&self) -> Option<u64> {
        match self {
            Subset::Mask { bits, .. } => Some(*bits),
            Subset::List { n, items } if *n <= 64 => Some(items.iter().fold(0, |b, &i| b | 1 << i)),
            _ => None,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.n() != n {
            return Err(SfmError::MalformedSubset(format!(
                "subset over n={} used with ground set n={n}",
                self.n()
            )));
        }
        if let Subset::List { items, .. } = self {
            if items.iter().any(|&i| i >= n) || items.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SfmError::MalformedSubset("unsorted or out-of-range list".into()));
            }
        }
        Ok(())
    }
}

impl PartialEq for Subset {
    fn eq(&self, other: &Self) -> bool {
        self.n() == other.n() && self.to_vec() == other.to_vec()
    }
}
impl Eq for Subset {}

impl Hash for Subset {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.n().hash(state);
        self.to_vec().hash(state);
    }
}

/// A set function over `0..n()`, accessed without accounting.
///
/// Accounting happens in [`evaluate`], [`evaluate_batch`] and [`evaluate_chain`].
pub trait SetFunction: Send + Sync {
    fn n(&self) -> usize;

    fn value_of(&self, members: &[bool]) -> f64;

    /// `f(base ∪ order[..c])` for every `c` in `cuts` (nondecreasing).
    fn chain_values(&self, base: &[bool], order: &[usize], cuts: &[usize]) -> Vec<f64> {
        let mut m = base.to_vec();
        let mut out = Vec::with_capacity(cuts.len());
        let mut pos = 0;
        for &c in cuts {
            while pos < c {
                m[order[pos]] = true;
                pos += 1;
            }
            out.push(self.value_of(&m));
        }
        out
    }
}

impl<T: SetFunction + ?Sized> SetFunction for &T {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn value_of(&self, members: &[bool]) -> f64 {
        (**self).value_of(members)
    }
    fn chain_values(&self, base: &[bool], order: &[usize], cuts: &[usize]) -> Vec<f64> {
        (**self).chain_values(base, order, cuts)
    }
}

impl<T: SetFunction + ?Sized> SetFunction for Box<T> {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn value_of(&self, members: &[bool]) -> f64 {
        (**self).value_of(members)
    }
    fn chain_values(&self, base: &[bool], order: &[usize], cuts: &[usize]) -> Vec<f64> {
        (**self).chain_values(base, order, cuts)
    }
}

// ---------------------------------------------------------------------------
// Query ledger

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub queries: u64,
    pub rounds: u64,
}

/// Counts oracle queries and adaptive rounds.
#[derive(Debug, Default)]
pub struct QueryLedger {
    queries: AtomicU64,
    rounds: AtomicU64,
    phases: Mutex<BTreeMap<String, PhaseTotals>>,
}

impl QueryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn rounds(&self) -> u64 {
        self.rounds.load(Ordering::SeqCst)
    }

    pub fn totals(&self) -> PhaseTotals {
        PhaseTotals { queries: self.queries(), rounds: self.rounds() }
    }

    /// One adaptive batch of `b` simultaneous queries.
    pub fn charge_batch(&self, b: usize) {
        if b == 0 {
            return;
        }
        self.queries.fetch_add(b as u64, Ordering::SeqCst);
        self.rounds.fetch_add(1, Ordering::SeqCst);
    }

    /// Attribute everything charged since `since` to `label`.
    pub fn record_phase(&self, label: &str, since: PhaseTotals) {
        let now = self.totals();
        let mut phases = self.phases.lock().expect("ledger lock");
        let e = phases.entry(label.to_string()).or_default();
        e.queries += now.queries - since.queries;
        e.rounds += now.rounds - since.rounds;
    }

    /// Merge jobs that ran concurrently: queries add, depth is the max.
    pub fn absorb_parallel(&self, jobs: &[QueryLedger]) {
        let q: u64 = jobs.iter().map(|j| j.queries()).sum();
        let r = jobs.iter().map(|j| j.rounds()).max().unwrap_or(0);
        self.queries.fetch_add(q, Ordering::SeqCst);
        self.rounds.fetch_add(r, Ordering::SeqCst);
    }

    pub fn phases(&self) -> BTreeMap<String, PhaseTotals> {
        self.phases.lock().expect("ledger lock").clone()
    }
}

// ---------------------------------------------------------------------------
// Deterministic random streams

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A ChaCha stream identified by `(seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(stream_id));
        RngStream { seed, stream_id: stream_id.to_string(), rng }
    }

    pub fn child(&self, label: &str) -> Self {
        RngStream::new(self.seed, &format!("{}/{}", self.stream_id, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

// ---------------------------------------------------------------------------
// Instances

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutParams {
    /// `(u, v, w)` triples.
    pub edges: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub directed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageParams {
    /// `covers[e]` lists the items covered by element `e`.
    pub covers: Vec<Vec<usize>>,
    pub item_weights: Vec<f64>,
    #[serde(default)]
    pub penalty: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModularConcaveParams {
    pub modular: Vec<f64>,
    /// `concave[j]` is the value at cardinality `j`, length n+1.
    pub concave: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplicitParams {
    pub table: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FunctionDef {
    Cut(CutParams),
    Coverage(CoverageParams),
    ModularPlusConcave(ModularConcaveParams),
    Explicit(ExplicitParams),
}

impl FunctionDef {
    pub fn kind(&self) -> &'static str {
        match self {
            FunctionDef::Cut(_) => "cut",
            FunctionDef::Coverage(_) => "coverage",
            FunctionDef::ModularPlusConcave(_) => "modular_plus_concave",
            FunctionDef::Explicit(_) => "explicit",
        }
    }
}

/// On-disk form: `{"n", "kind", "params"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceFile {
    pub n: usize,
    pub kind: String,
    pub params: Value,
}

#[derive(Clone, Debug)]
enum Compiled {
    Cut { out_adj: Vec<Vec<(usize, f64)>>, in_adj: Vec<Vec<(usize, f64)>> },
    Coverage { n_items: usize },
    Other,
}

/// An ingested submodular instance, normalized so that f(∅) = 0.
#[derive(Clone, Debug)]
pub struct InstanceSpec {
    pub ground: GroundSet,
    pub def: FunctionDef,
    /// Raw f(∅), subtracted from every value.
    pub offset: f64,
    compiled: Compiled,
}

fn bad(msg: impl Into<String>) -> SfmError {
    SfmError::MalformedInstance(msg.into())
}

impl InstanceSpec {
    pub fn new(n: usize, def: FunctionDef) -> Result<Self> {
        let ground = GroundSet::new(n)?;
        let (offset, compiled) = match &def {
            FunctionDef::Cut(p) => {
                let mut out_adj = vec![Vec::new(); n];
                let mut in_adj = vec![Vec::new(); n];
                for &(u, v, w) in &p.edges {
                    if u >= n || v >= n {
                        return Err(bad(format!("edge ({u},{v}) out of range")));
                    }
                    if !(w >= 0.0) || !w.is_finite() {
                        return Err(bad(format!("edge ({u},{v}) has weight {w}; cut weights must be nonnegative")));
                    }
                    if u == v {
                        continue;
                    }
                    out_adj[u].push((v, w));
                    in_adj[v].push((u, w));
                }
                (0.0, Compiled::Cut { out_adj, in_adj })
            }
            FunctionDef::Coverage(p) => {
                if p.covers.len() != n {
                    return Err(bad(format!("covers has {} rows, expected {n}", p.covers.len())));
                }
                if !p.penalty.is_empty() && p.penalty.len() != n {
                    return Err(bad("penalty length must be n or empty"));
                }
                let m = p.item_weights.len();
                if p.item_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                    return Err(bad("item weights must be finite and nonnegative"));
                }
                if p.covers.iter().flatten().any(|&i| i >= m) {
                    return Err(bad("covered item index out of range"));
                }
                if p.penalty.iter().any(|x| !x.is_finite()) {
                    return Err(bad("penalty must be finite"));
                }
                (0.0, Compiled::Coverage { n_items: m })
            }
            FunctionDef::ModularPlusConcave(p) => {
                if p.modular.len() != n || p.concave.len() != n + 1 {
                    return Err(bad("modular must have length n and concave length n+1"));
                }
                if p.modular.iter().chain(&p.concave).any(|x| !x.is_finite()) {
                    return Err(bad("values must be finite"));
                }
                for j in 1..n {
                    let d2 = p.concave[j + 1] - 2.0 * p.concave[j] + p.concave[j - 1];
                    if d2 > TOL {
                        return Err(bad(format!("concave table is not concave at cardinality {j}")));
                    }
                }
                (p.concave[0], Compiled::Other)
            }
            FunctionDef::Explicit(p) => {
                if n > 20 {
                    return Err(SfmError::SizeLimit(format!("explicit tables need n <= 20, got {n}")));
                }
                if p.table.len() != 1usize << n {
                    return Err(bad(format!("table has {} entries, expected 2^{n}", p.table.len())));
                }
                if p.table.iter().any(|x| !x.is_finite()) {
                    return Err(bad("table values must be finite"));
                }
                (p.table[0], Compiled::Other)
            }
        };
        let inst = InstanceSpec { ground, def, offset, compiled };
        if let FunctionDef::Explicit(_) = inst.def {
            if !validate_submodular(&inst)? {
                return Err(bad("explicit table is not submodular"));
            }
        }
        Ok(inst)
    }

    pub fn explicit(table: Vec<f64>) -> Result<Self> {
        let n = table.len().trailing_zeros() as usize;
        if table.len() != 1 << n {
            return Err(bad("table length must be a power of two"));
        }
        InstanceSpec::new(n, FunctionDef::Explicit(ExplicitParams { table }))
    }

    pub fn modular(x: Vec<f64>) -> Result<Self> {
        let n = x.len();
        InstanceSpec::new(
            n,
            FunctionDef::ModularPlusConcave(ModularConcaveParams { modular: x, concave: vec![0.0; n + 1] }),
        )
    }

    pub fn cut(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        InstanceSpec::new(n, FunctionDef::Cut(CutParams { edges, directed: false }))
    }

    pub fn n(&self) -> usize {
        self.ground.n
    }

    pub fn to_file(&self) -> InstanceFile {
        let params = match &self.def {
            FunctionDef::Cut(p) => serde_json::to_value(p),
            FunctionDef::Coverage(p) => serde_json::to_value(p),
            FunctionDef::ModularPlusConcave(p) => serde_json::to_value(p),
            FunctionDef::Explicit(p) => serde_json::to_value(p),
        }
        .expect("params serialize");
        InstanceFile { n: self.n(), kind: self.def.kind().to_string(), params }
    }

    pub fn from_file(file: InstanceFile) -> Result<Self> {
        fn parse<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| bad(format!("bad params: {e}")))
        }
        let def = match file.kind.as_str() {
            "cut" => FunctionDef::Cut(parse(file.params)?),
            "coverage" => FunctionDef::Coverage(parse(file.params)?),
            "modular_plus_concave" => FunctionDef::ModularPlusConcave(parse(file.params)?),
            "explicit" => FunctionDef::Explicit(parse(file.params)?),
            other => return Err(bad(format!("unknown kind '{other}'"))),
        };
        InstanceSpec::new(file.n, def)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("instance serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(s).map_err(|e| bad(format!("bad json: {e}")))?;
        InstanceSpec::from_file(file)
    }

    fn raw_value(&self, m: &[bool]) -> f64 {
        match (&self.def, &self.compiled) {
            (FunctionDef::Cut(p), _) => p
                .edges
                .iter()
                .map(|&(u, v, w)| {
                    let cross = if p.directed { m[u] && !m[v] } else { m[u] != m[v] };
                    if cross {
                        w
                    } else {
                        0.0
                    }
                })
                .sum(),
            (FunctionDef::Coverage(p), Compiled::Coverage { n_items }) => {
                let mut covered = vec![false; *n_items];
                let mut v = 0.0;
                for e in (0..m.len()).filter(|&e| m[e]) {
                    for &it in &p.covers[e] {
                        if !covered[it] {
                            covered[it] = true;
                            v += p.item_weights[it];
                        }
                    }
                    if !p.penalty.is_empty() {
                        v += p.penalty[e];
                    }
                }
                v
            }
            (FunctionDef::ModularPlusConcave(p), _) => {
                let mut card = 0;
                let mut v = 0.0;
                for e in (0..m.len()).filter(|&e| m[e]) {
                    card += 1;
                    v += p.modular[e];
                }
                v + p.concave[card]
            }
            (FunctionDef::Explicit(p), _) => {
                let idx = m.iter().enumerate().fold(0usize, |b, (i, &x)| if x { b | 1 << i } else { b });
                p.table[idx]
            }
            _ => unreachable!("compiled form matches definition"),
        }
    }
}

impl SetFunction for InstanceSpec {
    fn n(&self) -> usize {
        self.ground.n
    }

    fn value_of(&self, members: &[bool]) -> f64 {
        self.raw_value(members) - self.offset
    }

    fn chain_values(&self, base: &[bool], order: &[usize], cuts: &[usize]) -> Vec<f64> {
        let mut m = base.to_vec();
        let mut out = Vec::with_capacity(cuts.len());
        match (&self.def, &self.compiled) {
            (FunctionDef::Cut(p), Compiled::Cut { out_adj, in_adj }) => {
                let mut cur = self.raw_value(&m);
                let mut pos = 0;
                for &c in cuts {
                    while pos < c {
                        let v = order[pos];
                        pos += 1;
                        if m[v] {
                            continue;
                        }
                        for &(w, wt) in &out_adj[v] {
                            if p.directed {
                                if !m[w] {
                                    cur += wt;
                                }
                            } else if m[w] {
                                cur -= wt;
                            } else {
                                cur += wt;
                            }
                        }
                        for &(w, wt) in &in_adj[v] {
                            if p.directed {
                                if m[w] {
                                    cur -= wt;
                                }
                            } else if m[w] {
                                cur -= wt;
                            } else {
                                cur += wt;
                            }
                        }
                        m[v] = true;
                    }
                    out.push(cur - self.offset);
                }
                out
            }
            (FunctionDef::Coverage(p), Compiled::Coverage { n_items }) => {
                let mut covered = vec![false; *n_items];
                let mut cur = 0.0;
                let add = |e: usize, covered: &mut Vec<bool>, cur: &mut f64| {
                    for &it in &p.covers[e] {
                        if !covered[it] {
                            covered[it] = true;
                            *cur += p.item_weights[it];
                        }
                    }
                    if !p.penalty.is_empty() {
                        *cur += p.penalty[e];
                    }
                };
                for e in 0..m.len() {
                    if m[e] {
                        add(e, &mut covered, &mut cur);
                    }
                }
                let mut pos = 0;
                for &c in cuts {
                    while pos < c {
                        let e = order[pos];
                        pos += 1;
                        if !m[e] {
                            m[e] = true;
                            add(e, &mut covered, &mut cur);
                        }
                    }
                    out.push(cur);
                }
                out
            }
            (FunctionDef::ModularPlusConcave(p), _) => {
                let mut card = m.iter().filter(|&&x| x).count();
                let mut lin: f64 = (0..m.len()).filter(|&e| m[e]).map(|e| p.modular[e]).sum();
                let mut pos = 0;
                for &c in cuts {
                    while pos < c {
                        let e = order[pos];
                        pos += 1;
                        if !m[e] {
                            m[e] = true;
                            card += 1;
                            lin += p.modular[e];
                        }
                    }
                    out.push(lin + p.concave[card] - self.offset);
                }
                out
            }
            _ => {
                let mut pos = 0;
                for &c in cuts {
                    while pos < c {
                        m[order[pos]] = true;
                        pos += 1;
                    }
                    out.push(self.value_of(&m));
                }
                out
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Counted access

pub fn evaluate(f: &dyn SetFunction, s: &Subset, ledger: &QueryLedger) -> Result<f64> {
    s.check(f.n())?;
    ledger.charge_batch(1);
    Ok(f.value_of(&s.to_bools()))
}

/// Counted evaluation on a membership vector (one query, one round).
pub fn evaluate_mask(f: &dyn SetFunction, members: &[bool], ledger: &QueryLedger) -> f64 {
    debug_assert_eq!(members.len(), f.n());
    ledger.charge_batch(1);
    f.value_of(members)
}

pub fn evaluate_batch(f: &dyn SetFunction, sets: &[Subset], ledger: &QueryLedger) -> Result<Vec<f64>> {
    for s in sets {
        s.check(f.n())?;
    }
    ledger.charge_batch(sets.len());
    Ok(sets.iter().map(|s| f.value_of(&s.to_bools())).collect())
}

/// Counted batch on membership vectors.
pub fn evaluate_masks(f: &dyn SetFunction, sets: &[Vec<bool>], ledger: &QueryLedger) -> Vec<f64> {
    ledger.charge_batch(sets.len());
    sets.iter().map(|m| f.value_of(m)).collect()
}

/// One batch holding the nested sets `base ∪ order[..c]`, one query per cut.
pub fn evaluate_chain(
    f: &dyn SetFunction,
    base: &[bool],
    order: &[usize],
    cuts: &[usize],
    ledger: &QueryLedger,
) -> Vec<f64> {
    ledger.charge_batch(cuts.len());
    f.chain_values(base, order, cuts)
}

/// `(u_f)_p = f({p})`, one batch of n queries.
pub fn marginal_vector(f: &dyn SetFunction, ledger: &QueryLedger) -> Vec<f64> {
    let n = f.n();
    ledger.charge_batch(n);
    let mut m = vec![false; n];
    (0..n)
        .map(|p| {
            m[p] = true;
            let v = f.value_of(&m);
            m[p] = false;
            v
        })
        .collect()
}

/// Uncounted values of all 2^n subsets in mask order.
pub fn value_table(f: &dyn SetFunction) -> Result<Vec<f64>> {
    let n = f.n();
    if n > BRUTE_FORCE_LIMIT {
        return Err(SfmError::SizeLimit(format!("enumeration needs n <= {BRUTE_FORCE_LIMIT}, got {n}")));
    }
    let mut table = vec![0.0; 1 << n];
    let mut m = vec![false; n];
    for mask in 0usize..1 << n {
        for (i, slot) in m.iter_mut().enumerate() {
            *slot = mask >> i & 1 == 1;
        }
        table[mask] = f.value_of(&m);
    }
    Ok(table)
}

pub fn validate_submodular(f: &dyn SetFunction) -> Result<bool> {
    let n = f.n();
    if n > 20 {
        return Err(SfmError::SizeLimit(format!("validate_submodular needs n <= 20, got {n}")));
    }
    let t = value_table(f)?;
    Ok(table_is_submodular(&t, n))
}

/// Local exchange form: f(S+i) + f(S+j) >= f(S+i+j) + f(S).
pub fn table_is_submodular(t: &[f64], n: usize) -> bool {
    for s in 0usize..1 << n {
        for i in 0..n {
            if s >> i & 1 == 1 {
                continue;
            }
            for j in i + 1..n {
                if s >> j & 1 == 1 {
                    continue;
                }
                let lhs = t[s | 1 << i] + t[s | 1 << j];
                let rhs = t[s | 1 << i | 1 << j] + t[s];
                if lhs < rhs - TOL {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Contraction

/// `f_P(S) = f(S ∪ P) − f(P)` over `V ∖ P`, reindexed to `0..n−|P|`.
pub struct Contracted<'a> {
    parent: &'a dyn SetFunction,
    keep: Vec<usize>,
    base: Vec<bool>,
    fp: f64,
}

impl<'a> Contracted<'a> {
    /// Parent index of local element `i`.
    pub fn parent_index(&self, i: usize) -> usize {
        self.keep[i]
    }

    pub fn kept(&self) -> &[usize] {
        &self.keep
    }

    pub fn contracted_value(&self) -> f64 {
        self.fp
    }

    fn lift(&self, members: &[bool]) -> Vec<bool> {
        let mut m = self.base.clone();
        for (i, &x) in members.iter().enumerate() {
            if x {
                m[self.keep[i]] = true;
            }
        }
        m
    }
}

impl SetFunction for Contracted<'_> {
    fn n(&self) -> usize {
        self.keep.len()
    }

    fn value_of(&self, members: &[bool]) -> f64 {
        self.parent.value_of(&self.lift(members)) - self.fp
    }

    fn chain_values(&self, base: &[bool], order: &[usize], cuts: &[usize]) -> Vec<f64> {
        let lifted: Vec<usize> = order.iter().map(|&i| self.keep[i]).collect();
        self.parent
            .chain_values(&self.lift(base), &lifted, cuts)
            .into_iter()
            .map(|v| v - self.fp)
            .collect()
    }
}

/// Contract `P`; computing f(P) costs one query when P is nonempty.
pub fn contract<'a>(f: &'a dyn SetFunction, p: &Subset, ledger: &QueryLedger) -> Result<Contracted<'a>> {
    p.check(f.n())?;
    let base = p.to_bools();
    let fp = if p.is_empty() { 0.0 } else { evaluate_mask(f, &base, ledger) };
    let keep = (0..f.n()).filter(|&i| !base[i]).collect();
    Ok(Contracted { parent: f, keep, base, fp })
}

// ---------------------------------------------------------------------------
// Opt-in cache

/// Memoizes values. Callers still charge the ledger per request.
pub struct Cached<F: SetFunction> {
    inner: F,
    memo: Mutex<HashMap<Vec<u64>, f64>>,
    hits: AtomicU64,
}

impl<F: SetFunction> Cached<F> {
    pub fn new(inner: F) -> Self {
        Cached { inner, memo: Mutex::new(HashMap::new()), hits: AtomicU64::new(0) }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }
}

impl<F: SetFunction> SetFunction for Cached<F> {
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn value_of(&self, members: &[bool]) -> f64 {
        let mut key = vec![0u64; members.len().div_ceil(64)];
        for (i, &x) in members.iter().enumerate() {
            if x {
                key[i / 64] |= 1 << (i % 64);
            }
        }
        if let Some(&v) = self.memo.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return v;
        }
        let v = self.inner.value_of(members);
        self.memo.lock().expect("cache lock").insert(key, v);
        v
    }
}

// ---------------------------------------------------------------------------
// Generators

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n: usize,
    /// Target sparsity for the planted family.
    #[serde(default = "one")]
    pub k: usize,
    /// Planted support size; random in `1..=k` when absent.
    #[serde(default)]
    pub support: Option<usize>,
    /// Edge or cover probability for random families.
    #[serde(default)]
    pub density: Option<f64>,
}

fn one() -> usize {
    1
}

impl GenParams {
    pub fn new(n: usize, k: usize) -> Self {
        GenParams { n, k, support: None, density: None }
    }
}

/// A generated instance plus the planted minimizer, when the family has one.
#[derive(Clone, Debug)]
pub struct Generated {
    pub instance: InstanceSpec,
    pub planted: Option<Vec<usize>>,
}

pub fn generate_instance(kind: &str, params: &GenParams, seed: u64) -> Result<Generated> {
    let n = params.n;
    if n == 0 {
        return Err(SfmError::Config("n must be positive".into()));
    }
    let mut rng = RngStream::new(seed, &format!("gen/{kind}"));
    match kind {
        "planted" => generate_planted(params, &mut rng),
        "cut" => {
            let d = params.density.unwrap_or((3.0 / n as f64).min(1.0));
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.gen::<f64>() < d {
                        edges.push((u, v, round4(rng.gen_range(0.1..1.0))));
                    }
                }
            }
            Ok(Generated { instance: InstanceSpec::cut(n, edges)?, planted: None })
        }
        "coverage" => {
            let d = params.density.unwrap_or(0.3);
            let m = n.max(2);
            let covers = (0..n)
                .map(|_| (0..m).filter(|_| rng.gen::<f64>() < d).collect())
                .collect();
            let item_weights = (0..m).map(|_| round4(rng.gen_range(0.1..1.0))).collect();
            let penalty = (0..n).map(|_| round4(rng.gen_range(-1.0..0.5))).collect();
            let inst =
                InstanceSpec::new(n, FunctionDef::Coverage(CoverageParams { covers, item_weights, penalty }))?;
            Ok(Generated { instance: inst, planted: None })
        }
        "modular_plus_concave" => {
            let modular = (0..n).map(|_| round4(rng.gen_range(-1.0..1.0))).collect();
            let a = rng.gen_range(0.0..2.0);
            // Round the increments, not the values, so concavity survives rounding.
            let mut concave = vec![0.0];
            let mut prev_step = f64::INFINITY;
            for j in 1..=n {
                let step = round4(a * ((j as f64).sqrt() - ((j - 1) as f64).sqrt())).min(prev_step);
                prev_step = step;
                concave.push(round4(concave[j - 1] + step));
            }
            let inst = InstanceSpec::new(
                n,
                FunctionDef::ModularPlusConcave(ModularConcaveParams { modular, concave }),
            )?;
            Ok(Generated { instance: inst, planted: None })
        }
        "explicit" => {
            if n > 16 {
                return Err(SfmError::Config("explicit generator supports n <= 16".into()));
            }
            let g = generate_planted(params, &mut rng)?;
            let table = value_table(&g.instance)?;
            Ok(Generated { instance: InstanceSpec::explicit(table)?, planted: g.planted })
        }
        other => Err(SfmError::Config(format!("unknown generator kind '{other}'"))),
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Coverage instance whose unique minimizer is a planted set S* with |S*| <= k.
///
/// Members carry penalty −a_p with a_p above their private coverage mass, a shared
/// hub item couples them, and every non-member has a positive penalty.
fn generate_planted(params: &GenParams, rng: &mut RngStream) -> Result<Generated> {
    let n = params.n;
    let k = params.k;
    if k == 0 {
        return Err(SfmError::Config("planted generator needs k >= 1".into()));
    }
    let s = match params.support {
        Some(s) if s > k || s > n => {
            return Err(SfmError::Config(format!("support {s} exceeds min(k, n)")));
        }
        Some(s) => s,
        None => rng.gen_range(1..=k.min(n)),
    };
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut star: Vec<usize> = perm[..s].to_vec();
    star.sort_unstable();
    let in_star: Vec<bool> = (0..n).map(|i| star.binary_search(&i).is_ok()).collect();

    let n_items = n.max(4);
    let d = params.density.unwrap_or((2.5 / n as f64).clamp(0.05, 0.5));
    let mut covers: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut item_weights: Vec<f64> = (0..n_items).map(|_| round4(rng.gen_range(0.05..0.6))).collect();
    for (e, row) in covers.iter_mut().enumerate() {
        for it in 0..n_items {
            if rng.gen::<f64>() < d {
                row.push(it);
            }
        }
        if row.is_empty() {
            row.push((e * 7 + 3) % n_items);
        }
    }
    let private_mass = |e: usize| -> f64 { covers[e].iter().map(|&it| item_weights[it]).sum() };
    let mut penalty = vec![0.0; n];
    let mut slack = 0.0;
    for e in 0..n {
        if in_star[e] {
            let r = round4(rng.gen_range(0.2..1.0));
            penalty[e] = -(round4(private_mass(e)) + r + 1e-3);
            slack += r;
        } else {
            penalty[e] = round4(rng.gen_range(0.3..1.2));
        }
    }
    // Hub item shared by all members: large hubs make single members look unattractive.
    let hub = round4(rng.gen_range(0.0..0.95) * slack);
    if hub > 0.0 {
        item_weights.push(hub);
        let hub_id = item_weights.len() - 1;
        for &e in &star {
            covers[e].push(hub_id);
        }
    }
    let inst = InstanceSpec::new(n, FunctionDef::Coverage(CoverageParams { covers, item_weights, penalty }))?;
    Ok(Generated { instance: inst, planted: Some(star) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore};
    use proptest::prelude::*;

    fn f2() -> InstanceSpec {
        InstanceSpec::explicit(vec![0.0, 1.0, 2.0, 2.0]).unwrap()
    }

    fn set(n: usize, v: &[usize]) -> Subset {
        Subset::from_indices(n, v.iter().copied()).unwrap()
    }

    #[test]
    fn explicit_table_values() {
        let f = f2();
        let l = QueryLedger::new();
        assert_eq!(evaluate(&f, &Subset::empty(2), &l).unwrap(), 0.0);
        assert_eq!(evaluate(&f, &set(2, &[0, 1]), &l).unwrap(), 2.0);
        assert_eq!(l.totals(), PhaseTotals { queries: 2, rounds: 2 });
    }

    #[test]
    fn path_cut_value() {
        let f = InstanceSpec::cut(2, vec![(0, 1, 3.0)]).unwrap();
        let l = QueryLedger::new();
        assert_eq!(evaluate(&f, &set(2, &[0]), &l).unwrap(), 3.0);
        assert_eq!(evaluate(&f, &set(2, &[0, 1]), &l).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_subset_rejected() {
        assert!(matches!(Subset::from_indices(2, [2]), Err(SfmError::MalformedSubset(_))));
        let f = f2();
        let l = QueryLedger::new();
        assert!(evaluate(&f, &Subset::empty(3), &l).is_err());
        assert_eq!(l.queries(), 0);
    }

    #[test]
    fn batch_accounting() {
        let f = f2();
        let l = QueryLedger::new();
        assert_eq!(evaluate_batch(&f, &[Subset::empty(2)], &l).unwrap(), vec![0.0]);
        assert_eq!(l.rounds(), 1);
        let v = evaluate_batch(&f, &[set(2, &[0]), set(2, &[1])], &l).unwrap();
        assert_eq!(v, vec![1.0, 2.0]);
        assert_eq!(l.totals(), PhaseTotals { queries: 3, rounds: 2 });
        assert!(evaluate_batch(&f, &[], &l).unwrap().is_empty());
        assert_eq!(l.rounds(), 2);
    }

    #[test]
    fn batch_versus_singles() {
        let f = InstanceSpec::modular(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let sing: Vec<Subset> = (0..4).map(|i| set(4, &[i])).collect();
        let a = QueryLedger::new();
        let b = QueryLedger::new();
        let vb = evaluate_batch(&f, &sing, &a).unwrap();
        let vs: Vec<f64> = sing.iter().map(|s| evaluate(&f, s, &b).unwrap()).collect();
        assert_eq!(vb, vs);
        assert_eq!(b.rounds() - a.rounds(), 3);
    }

    #[test]
    fn marginal_vectors() {
        let l = QueryLedger::new();
        assert_eq!(marginal_vector(&f2(), &l), vec![1.0, 2.0]);
        assert_eq!(l.rounds(), 1);
        let m = InstanceSpec::modular(vec![1.0, 1.0, -2.0]).unwrap();
        assert_eq!(marginal_vector(&m, &l), vec![1.0, 1.0, -2.0]);
        let z = InstanceSpec::modular(vec![0.0; 3]).unwrap();
        assert_eq!(marginal_vector(&z, &l), vec![0.0; 3]);
    }

    #[test]
    fn submodularity_checks() {
        assert!(validate_submodular(&f2()).unwrap());
        let sup = ExplicitParams { table: vec![0.0, 0.0, 0.0, 1.0] };
        let raw = InstanceSpec {
            ground: GroundSet { n: 2 },
            def: FunctionDef::Explicit(sup.clone()),
            offset: 0.0,
            compiled: Compiled::Other,
        };
        assert!(!validate_submodular(&raw).unwrap());
        assert!(InstanceSpec::explicit(sup.table).is_err());
        assert!(validate_submodular(&InstanceSpec::modular(vec![3.0, -1.0, 0.5]).unwrap()).unwrap());
        let big = InstanceSpec::modular(vec![0.0; 21]).unwrap();
        assert!(matches!(validate_submodular(&big), Err(SfmError::SizeLimit(_))));
    }

    #[test]
    fn contraction_examples() {
        let f = f2();
        let l = QueryLedger::new();
        let c = contract(&f, &set(2, &[0]), &l).unwrap();
        assert_eq!(c.n(), 1);
        assert_eq!(evaluate(&c, &set(1, &[0]), &l).unwrap(), 1.0);
        assert_eq!(evaluate(&c, &Subset::empty(1), &l).unwrap(), 0.0);
        let before = l.queries();
        let id = contract(&f, &Subset::empty(2), &l).unwrap();
        assert_eq!(l.queries(), before);
        for mask in 0..4u64 {
            let s = Subset::from_mask(2, mask).unwrap();
            assert_eq!(id.value_of(&s.to_bools()), f.value_of(&s.to_bools()));
        }
        let m = InstanceSpec::modular(vec![1.0, 2.0, 3.0]).unwrap();
        let cm = contract(&m, &set(3, &[1]), &l).unwrap();
        assert_eq!(marginal_vector(&cm, &l), vec![1.0, 3.0]);
    }

    #[test]
    fn contracted_query_is_one_underlying_query() {
        let f = f2();
        let l = QueryLedger::new();
        let c = contract(&f, &set(2, &[1]), &l).unwrap();
        let q = l.queries();
        evaluate(&c, &set(1, &[0]), &l).unwrap();
        assert_eq!(l.queries(), q + 1);
    }

    #[test]
    fn subset_representations_compare_equal() {
        let a = set(10, &[1, 4, 7]);
        assert_eq!(a, a.as_list());
        assert!(matches!(a, Subset::Mask { .. }));
        assert!(matches!(set(100, &[3]), Subset::List { .. }));
        assert_ne!(set(10, &[1]), set(11, &[1]));
    }

    #[test]
    fn planted_generator_examples() {
        let g = generate_instance("planted", &GenParams::new(8, 2), 7).unwrap();
        assert!(validate_submodular(&g.instance).unwrap());
        let star = g.planted.clone().unwrap();
        assert!(!star.is_empty() && star.len() <= 2);
        // Unique minimizer check by enumeration.
        let t = value_table(&g.instance).unwrap();
        let best = t.iter().cloned().fold(f64::INFINITY, f64::min);
        let minimizers: Vec<usize> = (0..t.len()).filter(|&m| t[m] <= best + TOL).collect();
        let star_mask = star.iter().fold(0usize, |b, &i| b | 1 << i);
        assert_eq!(minimizers, vec![star_mask]);
    }

    #[test]
    fn coverage_without_penalty_is_nonnegative() {
        let p = CoverageParams {
            covers: vec![vec![0], vec![0, 1], vec![1]],
            item_weights: vec![1.0, 2.0],
            penalty: vec![],
        };
        let f = InstanceSpec::new(3, FunctionDef::Coverage(p)).unwrap();
        let t = value_table(&f).unwrap();
        assert!(t.iter().all(|&v| v >= 0.0));
        assert_eq!(t[0], 0.0);
    }

    #[test]
    fn json_round_trip_is_stable() {
        for kind in ["planted", "cut", "coverage", "modular_plus_concave", "explicit"] {
            let g = generate_instance(kind, &GenParams::new(6, 2), 3).unwrap();
            let s1 = g.instance.to_json();
            let s2 = InstanceSpec::from_json(&s1).unwrap().to_json();
            assert_eq!(s1, s2, "{kind}");
        }
        assert!(InstanceSpec::from_json(r#"{"n":2,"kind":"nope","params":{}}"#).is_err());
    }

    #[test]
    fn generators_always_produce_valid_instances() {
        for seed in 0..300 {
            let n = 1 + (seed % 14) as usize;
            for kind in ["planted", "cut", "coverage", "modular_plus_concave"] {
                let g = generate_instance(kind, &GenParams::new(n, 2), seed).unwrap();
                if n <= 10 {
                    assert!(validate_submodular(&g.instance).unwrap(), "{kind} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn offset_normalization() {
        let f = InstanceSpec::explicit(vec![5.0, 6.0, 7.0, 7.0]).unwrap();
        assert_eq!(f.offset, 5.0);
        assert_eq!(f.value_of(&[false, false]), 0.0);
        let mpc = InstanceSpec::new(
            2,
            FunctionDef::ModularPlusConcave(ModularConcaveParams {
                modular: vec![1.0, 1.0],
                concave: vec![2.0, 3.0, 3.5],
            }),
        )
        .unwrap();
        assert_eq!(mpc.value_of(&[false, false]), 0.0);
        assert_eq!(mpc.value_of(&[true, true]), 3.5);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(9, "x");
        let mut b = RngStream::new(9, "x");
        let mut c = RngStream::new(9, "y");
        let va: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let vc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
        assert_eq!(a.counter(), 8);
    }

    #[test]
    fn cache_counts_pre_cache_queries() {
        let f = Cached::new(f2());
        let l = QueryLedger::new();
        let s = set(2, &[0]);
        evaluate(&f, &s, &l).unwrap();
        evaluate(&f, &s, &l).unwrap();
        assert_eq!(l.queries(), 2);
        assert_eq!(f.hits(), 1);
    }

    #[test]
    fn parallel_merge_takes_max_depth() {
        let l = QueryLedger::new();
        let jobs: Vec<QueryLedger> = (0..3).map(|_| QueryLedger::new()).collect();
        jobs[0].charge_batch(5);
        jobs[1].charge_batch(2);
        jobs[1].charge_batch(2);
        l.absorb_parallel(&jobs);
        assert_eq!(l.totals(), PhaseTotals { queries: 9, rounds: 2 });
    }

    fn arb_instance() -> impl Strategy<Value = InstanceSpec> {
        (2usize..9, any::<u64>(), 0usize..4).prop_map(|(n, seed, which)| {
            let kind = ["planted", "cut", "coverage", "modular_plus_concave"][which];
            generate_instance(kind, &GenParams::new(n, 2), seed).unwrap().instance
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn generated_instances_are_submodular_and_normalized(f in arb_instance()) {
            prop_assert!(validate_submodular(&f).unwrap());
            prop_assert_eq!(f.value_of(&vec![false; f.n()]), 0.0);
        }

        #[test]
        fn chain_matches_pointwise(f in arb_instance(), seed in any::<u64>()) {
            let n = f.n();
            let mut rng = RngStream::new(seed, "chain");
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let split = rng.gen_range(0..=n);
            let mut base = vec![false; n];
            for &e in &order[..split] { base[e] = true; }
            let rest = &order[split..];
            let cuts: Vec<usize> = (0..=rest.len()).collect();
            let chain = f.chain_values(&base, rest, &cuts);
            let mut m = base.clone();
            for (c, v) in cuts.iter().zip(chain) {
                if *c > 0 { m[rest[c - 1]] = true; }
                prop_assert!((f.value_of(&m) - v).abs() < 1e-9);
            }
        }

        #[test]
        fn contraction_consistency(f in arb_instance(), pm in any::<u64>(), sm in any::<u64>()) {
            let n = f.n();
            let p = Subset::from_mask(n, pm & ((1u64 << n) - 1)).unwrap();
            let l = QueryLedger::new();
            let c = contract(&f, &p, &l).unwrap();
            let local: Vec<bool> = (0..c.n()).map(|i| sm >> i & 1 == 1).collect();
            let mut full = p.to_bools();
            for (i, &x) in local.iter().enumerate() { if x { full[c.parent_index(i)] = true; } }
            let expect = f.value_of(&full) - f.value_of(&p.to_bools());
            prop_assert!((c.value_of(&local) - expect).abs() < 1e-12);
        }

        #[test]
        fn ledger_rounds_bounded_by_queries(batches in proptest::collection::vec(0usize..5, 0..20)) {
            let l = QueryLedger::new();
            let mut last = l.totals();
            for b in batches {
                l.charge_batch(b);
                let now = l.totals();
                prop_assert!(now.queries >= last.queries && now.rounds >= last.rounds);
                prop_assert!(now.rounds <= now.queries);
                last = now;
            }
        }
    }
}
