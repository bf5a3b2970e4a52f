//! Fixed enumerations behind the construction.
//!
//! Everything here is a pure function of its arguments. The one convention
//! used throughout is the Cantor pairing `(a, b) -> (a + b)(a + b + 1)/2 + b`,
//! nested to the right for longer tuples:
//!
//! ```text
//! encode(t0)          = t0
//! encode(t0, t1, ...) = pair(t0, encode(t1, ...))
//! ```
//!
//! Row 0 of the matrix is read straight off this bijection: block `i` of the
//! partition in column `m` is the set of codes whose `m`-th coordinate is `i`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Error, Result};

/// Tag written into stores and exports so that files produced under another
/// convention are rejected instead of silently misread.
pub const CONVENTION: &str = "cantor-right-nested/v1";

fn tri(s: u128) -> u128 {
    s * (s + 1) / 2
}

/// Cantor pairing.
pub fn pair(a: u64, b: u64) -> Result<u64> {
    let s = a as u128 + b as u128;
    s.checked_mul(s + 1)
        .and_then(|t| u64::try_from(t / 2 + b as u128).ok())
        .ok_or(Error::Overflow("pair"))
}

/// Inverse of [`pair`].
pub fn unpair(c: u64) -> (u64, u64) {
    // Float estimate of the diagonal, then exact correction.
    let mut s = (2.0 * c as f64).sqrt() as u128;
    let c = c as u128;
    while tri(s) > c {
        s -= 1;
    }
    while tri(s + 1) <= c {
        s += 1;
    }
    let b = c - tri(s);
    ((s - b) as u64, b as u64)
}

/// A tuple code together with the arity it was encoded at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TupleCode {
    pub code: u64,
    pub arity: usize,
}

impl TupleCode {
    pub fn of(tuple: &[u64]) -> Result<Self> {
        Ok(TupleCode {
            code: encode_tuple(tuple)?,
            arity: tuple.len(),
        })
    }

    pub fn decode(self) -> Vec<u64> {
        decode_unchecked(self.code, self.arity)
    }
}

pub fn encode_tuple(tuple: &[u64]) -> Result<u64> {
    let (&last, init) = match tuple.split_last() {
        Some(split) => split,
        None => return usage("cannot encode an empty tuple"),
    };
    init.iter().rev().try_fold(last, |acc, &t| pair(t, acc))
}

pub fn decode_tuple(code: u64, arity: usize) -> Result<Vec<u64>> {
    if arity == 0 {
        return usage("tuple arity must be at least 1");
    }
    Ok(decode_unchecked(code, arity))
}

fn decode_unchecked(mut code: u64, arity: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(arity);
    for _ in 1..arity {
        let (a, rest) = unpair(code);
        out.push(a);
        code = rest;
    }
    out.push(code);
    out
}

/// `h_m(code)`: the `coord`-th entry of the decoded tuple, without
/// materializing the others.
pub fn coordinate(code: u64, arity: usize, coord: usize) -> u64 {
    debug_assert!(coord < arity);
    let mut code = code;
    for _ in 0..coord {
        code = unpair(code).1;
    }
    if coord + 1 == arity {
        code
    } else {
        unpair(code).0
    }
}

/// Smallest code `c >= from` whose `coord`-th coordinate equals `value`.
///
/// This enumerates a row-0 block in increasing order, which is how candidate
/// scans avoid walking every natural number.
pub fn next_with_coordinate(arity: usize, coord: usize, value: u64, from: u64) -> Result<u64> {
    next_coord(arity, coord, value, from).ok_or(Error::Overflow("next_with_coordinate"))
}

fn pair_opt(a: u64, b: u64) -> Option<u64> {
    let s = a as u128 + b as u128;
    u64::try_from(tri(s) + b as u128).ok()
}

/// [`next_with_coordinate`] returning `None` once codes leave the `u64` range.
pub fn next_coord(arity: usize, coord: usize, value: u64, from: u64) -> Option<u64> {
    debug_assert!(coord < arity);
    if arity == 1 {
        return (value >= from).then_some(value);
    }
    let (a0, w0) = unpair(from);
    let s0 = a0 + w0;
    if coord == 0 {
        // On diagonal s the only code with first entry `value` is pair(value, s - value).
        if s0 < value {
            return pair_opt(value, 0);
        }
        let c = pair_opt(value, s0 - value)?;
        return if c >= from {
            Some(c)
        } else {
            pair_opt(value, s0 + 1 - value)
        };
    }
    // code = tri(s) + w on diagonal s = a + w; w must carry `value` one level down.
    if let Some(w) = next_coord(arity - 1, coord - 1, value, w0) {
        if w <= s0 {
            return pair_opt(s0 - w, w);
        }
    }
    let w_min = next_coord(arity - 1, coord - 1, value, 0)?;
    let s = (s0 + 1).max(w_min);
    pair_opt(s - w_min, w_min)
}

/// `f(l)` for row `k`: onto the `k`-tuples, with every fiber infinite since the
/// first pairing component of `l` is ignored.
pub fn row_selector(k: usize, l: u64) -> Result<Vec<u64>> {
    if k == 0 {
        return usage("row selector is undefined for row 0");
    }
    decode_tuple(unpair(l).1, k)
}

/// Position `(row, column)` of one partition. Ordering is row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageId {
    pub row: u32,
    pub column: u32,
}

impl StageId {
    pub fn new(row: u32, column: u32) -> Self {
        StageId { row, column }
    }

    /// Index in the row-major order for arity `n`.
    pub fn ordinal(self, n: usize) -> usize {
        self.row as usize * n + self.column as usize
    }

    pub fn from_ordinal(ordinal: usize, n: usize) -> Self {
        StageId::new((ordinal / n) as u32, (ordinal % n) as u32)
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.column)
    }
}

/// `(j, p, q)`: block `j` of the partition at row `p`, column `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockTriple {
    pub index: u64,
    pub row: u32,
    pub column: u32,
}

impl BlockTriple {
    pub fn new(index: u64, row: u32, column: u32) -> Self {
        BlockTriple { index, row, column }
    }

    pub fn stage(self) -> StageId {
        StageId::new(self.row, self.column)
    }

    pub fn code(self) -> Result<u64> {
        encode_tuple(&[self.index, self.row as u64, self.column as u64])
    }
}

/// A member of the index family `I` of one stage: `n - 1` blocks from
/// pairwise distinct earlier partitions, not all in the stage's column.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SigmaIndex {
    pub stage: StageId,
    /// Sorted by triple code.
    pub triples: Vec<BlockTriple>,
}

/// Checks the three membership conditions of `I` for `stage` at arity `n`.
pub fn validate_sigma(stage: StageId, triples: &[BlockTriple], n: usize) -> Result<()> {
    if triples.len() + 1 != n {
        return domain(format!(
            "sigma must have {} triples, got {}",
            n - 1,
            triples.len()
        ));
    }
    for (i, t) in triples.iter().enumerate() {
        if t.column as usize >= n {
            return domain(format!("column {} out of range for n={n}", t.column));
        }
        if t.stage() >= stage {
            return domain(format!(
                "partition {} does not precede stage {stage}",
                t.stage()
            ));
        }
        if triples[..i].iter().any(|u| u.stage() == t.stage()) {
            return domain(format!("partition {} referenced twice", t.stage()));
        }
    }
    if triples.iter().all(|t| t.column == stage.column) {
        return domain("all referenced partitions lie in the stage's own column");
    }
    Ok(())
}

/// The enumeration `tau` of `I` for one stage.
///
/// Admissible triples are ranked by their tuple code; a sigma is coded as the
/// tuple of its (sorted) triple ranks, and `tau(l)` is the member with the
/// `l`-th smallest such code. Members are found by filter-and-count and cached.
#[derive(Clone, Debug)]
pub struct SigmaEnumerator {
    stage: StageId,
    n: usize,
    /// `(pair(row, column), row, column)` of each earlier partition, sorted.
    eligible: Vec<(u64, u32, u32)>,
    members: Vec<(u64, SigmaIndex)>,
    next_code: u64,
}

impl SigmaEnumerator {
    pub fn new(stage: StageId, n: usize) -> Result<Self> {
        if n < 2 {
            return usage("arity n must be greater than 1");
        }
        if stage.column as usize >= n {
            return usage(format!("column {} out of range for n={n}", stage.column));
        }
        let mut eligible = Vec::new();
        for ord in 0..stage.ordinal(n) {
            let s = StageId::from_ordinal(ord, n);
            eligible.push((pair(s.row as u64, s.column as u64)?, s.row, s.column));
        }
        eligible.sort_unstable();
        let off_column = eligible.iter().filter(|e| e.2 != stage.column).count();
        if eligible.len() < n - 1 || off_column == 0 {
            return domain(format!("index family is empty at stage {stage} for n={n}"));
        }
        Ok(SigmaEnumerator {
            stage,
            n,
            eligible,
            members: Vec::new(),
            next_code: 0,
        })
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    // Number of admissible triples on outer diagonals below `s`.
    fn count_below(&self, s: u64) -> u64 {
        self.eligible
            .iter()
            .map(|&(w, _, _)| s.saturating_sub(w))
            .sum()
    }

    pub fn triple_rank(&self, t: BlockTriple) -> Result<u64> {
        let w = pair(t.row as u64, t.column as u64)?;
        let pos = self
            .eligible
            .iter()
            .position(|e| e.1 == t.row && e.2 == t.column);
        let Some(pos) = pos else {
            return domain(format!(
                "partition {} is not eligible at stage {}",
                t.stage(),
                self.stage
            ));
        };
        let s = t
            .index
            .checked_add(w)
            .ok_or(Error::Overflow("triple rank"))?;
        Ok(self.count_below(s) + pos as u64)
    }

    pub fn triple_unrank(&self, rank: u64) -> BlockTriple {
        // Largest s with count_below(s) <= rank.
        let (mut lo, mut hi) = (0u64, rank + self.eligible[0].0 + 2);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.count_below(mid) <= rank {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = lo;
        let idx = (rank - self.count_below(s)) as usize;
        let (w, row, column) = self.eligible[idx];
        BlockTriple::new(s - w, row, column)
    }

    fn sigma_code(&self, triples: &[BlockTriple]) -> Result<u64> {
        let mut ranks = triples
            .iter()
            .map(|&t| self.triple_rank(t))
            .collect::<Result<Vec<_>>>()?;
        ranks.sort_unstable();
        encode_tuple(&ranks)
    }

    fn candidate(&self, code: u64) -> Option<SigmaIndex> {
        let ranks = decode_unchecked(code, self.n - 1);
        if ranks.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        let triples: Vec<BlockTriple> = ranks.iter().map(|&r| self.triple_unrank(r)).collect();
        validate_sigma(self.stage, &triples, self.n).ok()?;
        Some(SigmaIndex {
            stage: self.stage,
            triples,
        })
    }

    fn extend_to(&mut self, len: usize) {
        while self.members.len() < len {
            let code = self.next_code;
            self.next_code += 1;
            if let Some(sigma) = self.candidate(code) {
                self.members.push((code, sigma));
            }
        }
    }

    /// `tau(l)`.
    pub fn get(&mut self, l: u64) -> &SigmaIndex {
        self.extend_to(l as usize + 1);
        &self.members[l as usize].1
    }

    /// Inverse of [`Self::get`].
    pub fn index_of(&mut self, sigma: &SigmaIndex) -> Result<u64> {
        if sigma.stage != self.stage {
            return domain(format!(
                "sigma belongs to stage {}, enumerator to {}",
                sigma.stage, self.stage
            ));
        }
        validate_sigma(self.stage, &sigma.triples, self.n)?;
        let code = self.sigma_code(&sigma.triples)?;
        while self.next_code <= code {
            let len = self.members.len() + 1;
            self.extend_to(len);
        }
        match self.members.binary_search_by_key(&code, |m| m.0) {
            Ok(i) => Ok(i as u64),
            Err(_) => domain("sigma is not a member of the index family"),
        }
    }
}

/// `tau(l)` for `stage`.
pub fn sigma_enumerate(stage: StageId, l: u64, n: usize) -> Result<SigmaIndex> {
    Ok(SigmaEnumerator::new(stage, n)?.get(l).clone())
}

/// Inverse of [`sigma_enumerate`].
pub fn sigma_index_of(stage: StageId, sigma: &SigmaIndex, n: usize) -> Result<u64> {
    SigmaEnumerator::new(stage, n)?.index_of(sigma)
}

/// Builds a sigma from loose triples, sorting them into canonical order.
pub fn sigma_from_triples(
    stage: StageId,
    mut triples: Vec<BlockTriple>,
    n: usize,
) -> Result<SigmaIndex> {
    validate_sigma(stage, &triples, n)?;
    triples.sort_by_key(|t| t.code().unwrap_or(u64::MAX));
    Ok(SigmaIndex { stage, triples })
}
