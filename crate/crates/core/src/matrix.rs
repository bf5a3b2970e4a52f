//! Demand-driven construction of the partitions `P_{k,m}`.
//!
//! Row 0 is closed form: block `i` of column `m` is the preimage of `i` under
//! the `m`-th coordinate of the tuple decoding. Every later stage `(k, m)` is
//! built block by block. Block `a_i` is the set of all `x_l` and `y_l` chosen
//! by the three interleaved sequences
//!
//! ```text
//! x_l = min b(l)     \ (e u D_l u {z_j : j < l})
//! y_l = x_l                                   if c(tau(l)) already met
//!       min c(tau(l)) \ (e u {z_j : j < l} u D_l u d(x_l))   otherwise
//! z_l = min b(l)     \ (e u {x_0..x_l} u {y_0..y_l} u {z_j : j < l})
//! ```
//!
//! where `e` is the union of the earlier blocks of the stage and
//! `D_l = U_{j<l} d(x_j) u d(y_j)`. A block is an infinite object, so nothing
//! is ever built "to completion": transcripts are extended on demand and every
//! query carries a fuel budget. A number's fate in block `h` is final as soon
//! as it is chosen, returned to the pool as a `z`, or covered by `d` of a
//! chosen element; an undecided number stays eligible and is eventually
//! chosen, because each later visit of a `b(l)` containing it forces a fresh
//! `x_l` at or below it.
//!
//! `d(u)` is never materialized. `u` and `v` share a set `c(sigma)` exactly
//! when they sit in the same blocks of `n - 1` earlier partitions that are not
//! all in the stage's column, so each number is reduced to its list of
//! "hit keys" (one per admissible choice of `n - 1` earlier partitions) and a
//! block remembers the keys of everything it has chosen.

use std::sync::Arc;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::codec::{
    self, coordinate, next_with_coordinate, unpair, BlockTriple, SigmaEnumerator, SigmaIndex,
    StageId,
};
use crate::error::{usage, Error, Result};

/// Names block `a_i^{k,m}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockRef {
    pub stage: StageId,
    pub index: u64,
}

impl BlockRef {
    pub fn new(row: u32, column: u32, index: u64) -> Self {
        BlockRef {
            stage: StageId::new(row, column),
            index,
        }
    }
}

impl std::fmt::Display for BlockRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "a[{}]^{}", self.index, self.stage)
    }
}

/// Answer to "which block of this partition holds `x`?".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    In(u64),
    NotIn,
    /// Fuel ran out after spending the given amount.
    Undecided(u64),
}

impl Verdict {
    pub fn is_decided(self) -> bool {
        !matches!(self, Verdict::Undecided(_))
    }
}

/// Answer to a plain set-membership question (`b(l)`, `c(sigma)`, `d(x)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Yes,
    No,
    Undecided(u64),
}

/// One recorded step of a block's construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub x: u64,
    pub y: u64,
    pub z: u64,
    /// `y` repeats `x` because `c(tau(l))` had already been met.
    pub y_reused: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub block: BlockRef,
    pub steps: Vec<Step>,
    /// Every number below this bound has a final verdict for this block.
    pub committed_bound: u64,
}

/// Result of [`MatrixState::advance_block`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Advanced {
    pub transcript: Transcript,
    pub complete: bool,
    pub fuel_spent: u64,
}

/// Members and undecided numbers of one block inside `[0, window)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Restriction {
    pub members: Vec<u64>,
    pub undecided: Vec<u64>,
}

#[derive(Debug)]
pub(crate) struct Stall;

pub(crate) type Flow<T> = std::result::Result<T, Stall>;

/// Work budget. One unit pays for one candidate probe.
#[derive(Debug)]
pub(crate) struct Fuel {
    left: u64,
    spent: u64,
}

impl Fuel {
    pub(crate) fn new(budget: u64) -> Self {
        Fuel {
            left: budget,
            spent: 0,
        }
    }

    fn tick(&mut self) -> Flow<()> {
        if self.left == 0 {
            return Err(Stall);
        }
        self.left -= 1;
        self.spent += 1;
        Ok(())
    }

    pub(crate) fn spent(&self) -> u64 {
        self.spent
    }
}

type Key = Box<[u64]>;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fate {
    Chosen,
    Excluded,
    Open,
}

#[derive(Debug, Default)]
struct BlockState {
    steps: Vec<Step>,
    hit: FxHashSet<Key>,
    /// For every proper prefix `[subset, p_0, .., p_{t-1}]` of a hit key, the
    /// largest `p_t` that follows it. Lets a hit test stop as soon as a
    /// position of the probed number is known to exceed everything recorded.
    prefix_max: FxHashMap<Key, u64>,
    zs: FxHashSet<u64>,
    x_cursor: FxHashMap<u64, u64>,
    z_cursor: FxHashMap<u64, u64>,
}

#[derive(Debug)]
struct StageState {
    id: StageId,
    /// Admissible `(n-1)`-subsets of earlier partition ordinals.
    subsets: Vec<Vec<u32>>,
    subset_lookup: FxHashMap<Vec<u32>, u32>,
    tau: SigmaEnumerator,
    blocks: Vec<BlockState>,
    owner: FxHashMap<u64, u32>,
    /// Lowest block index whose verdict for the number is not yet known to be
    /// "excluded"; absent means 0.
    first_open: FxHashMap<u64, u32>,
    keys: FxHashMap<u64, Arc<[Key]>>,
}

impl StageState {
    fn new(id: StageId, n: usize) -> Result<Self> {
        let prior = id.ordinal(n);
        let mut subsets = Vec::new();
        let mut current = Vec::with_capacity(n - 1);
        collect_subsets(prior as u32, n - 1, 0, &mut current, &mut |s: &[u32]| {
            if s.iter().any(|&o| o as usize % n != id.column as usize) {
                subsets.push(s.to_vec());
            }
        });
        let subset_lookup = subsets
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Ok(StageState {
            id,
            subsets,
            subset_lookup,
            tau: SigmaEnumerator::new(id, n)?,
            blocks: Vec::new(),
            owner: FxHashMap::default(),
            first_open: FxHashMap::default(),
            keys: FxHashMap::default(),
        })
    }

    fn ensure_block(&mut self, h: usize) {
        while self.blocks.len() <= h {
            self.blocks.push(BlockState::default());
        }
    }

    fn steps(&self, h: usize) -> usize {
        self.blocks.get(h).map_or(0, |b| b.steps.len())
    }

    fn commit(
        &mut self,
        h: usize,
        step: Step,
        sel_code: u64,
        keys: [&[Key]; 2],
    ) -> std::result::Result<(), String> {
        for v in [step.x, step.y] {
            match self.owner.insert(v, h as u32) {
                Some(prev) if prev as usize != h => {
                    return Err(format!(
                        "{v} assigned to blocks {prev} and {h} of stage {}",
                        self.id
                    ));
                }
                _ => {}
            }
        }
        let block = &mut self.blocks[h];
        for key in keys.into_iter().flatten() {
            for t in 1..key.len() {
                let slot = block.prefix_max.entry(key[..t].into()).or_insert(0);
                *slot = (*slot).max(key[t]);
            }
            block.hit.insert(key.clone());
        }
        block.steps.push(step);
        block.zs.insert(step.z);
        block.x_cursor.insert(sel_code, step.x);
        block.z_cursor.insert(sel_code, step.z);
        Ok(())
    }
}

fn collect_subsets(
    len: u32,
    size: usize,
    start: u32,
    current: &mut Vec<u32>,
    emit: &mut impl FnMut(&[u32]),
) {
    if current.len() == size {
        emit(current);
        return;
    }
    for o in start..len {
        current.push(o);
        collect_subsets(len, size, o + 1, current, emit);
        current.pop();
    }
}

// Recursion between stages and blocks can run deep; grow the stack on demand.
fn deep<T>(f: impl FnOnce() -> T) -> T {
    stacker::maybe_grow(256 * 1024, 8 * 1024 * 1024, f)
}

/// The memoized construction. All mutation goes through `&mut self`; a clone
/// is an independent snapshot.
#[derive(Debug)]
pub struct MatrixState {
    n: usize,
    schedule: Schedule,
    stages: Vec<Option<StageState>>,
}

/// Order in which blocks of a stage receive steps.
///
/// Both schedules produce identical transcripts: every `e`-membership test
/// decides the number against each earlier block exactly, whatever its
/// progress. They differ only in how much work is done ahead of demand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    /// A block steps only when a query needs its next choice.
    #[default]
    OnDemand,
    /// Block `i` steps only once every block `< i` has strictly more steps.
    RoundRobin,
}

impl MatrixState {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return usage(format!("arity n must be greater than 1, got {n}"));
        }
        Ok(MatrixState {
            n,
            schedule: Schedule::default(),
            stages: Vec::new(),
        })
    }

    pub fn with_schedule(n: usize, schedule: Schedule) -> Result<Self> {
        let mut m = Self::new(n)?;
        m.schedule = schedule;
        Ok(m)
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn check_stage(&self, stage: StageId) -> Result<()> {
        if stage.column as usize >= self.n {
            return usage(format!(
                "column {} out of range for n={}",
                stage.column, self.n
            ));
        }
        Ok(())
    }

    #[inline]
    fn stage_mut(&mut self, ord: usize) -> &mut StageState {
        if !matches!(self.stages.get(ord), Some(Some(_))) {
            self.create_stage(ord);
        }
        match &mut self.stages[ord] {
            Some(st) => st,
            None => unreachable!(),
        }
    }

    #[cold]
    fn create_stage(&mut self, ord: usize) {
        if self.stages.len() <= ord {
            self.stages.resize_with(ord + 1, || None);
        }
        let st = StageState::new(StageId::from_ordinal(ord, self.n), self.n)
            .expect("rows >= 1 always have a nonempty index family");
        self.stages[ord] = Some(st);
    }

    fn stage_ref(&self, ord: usize) -> Option<&StageState> {
        self.stages.get(ord).and_then(|s| s.as_ref())
    }

    /// Stages with at least one started block, in row-major order.
    pub fn built_stages(&self) -> Vec<StageId> {
        self.stages
            .iter()
            .flatten()
            .filter(|s| !s.blocks.is_empty())
            .map(|s| s.id)
            .collect()
    }

    pub fn block_count(&self, stage: StageId) -> usize {
        self.stage_ref(stage.ordinal(self.n))
            .map_or(0, |s| s.blocks.len())
    }

    // ---------------------------------------------------------------- queries

    /// Index of the block of `P_stage` that holds `x`.
    pub fn block_of(&mut self, stage: StageId, x: u64, fuel: u64) -> Result<Verdict> {
        Ok(self.block_of_metered(stage, x, fuel)?.0)
    }

    /// [`Self::block_of`] with doubling fuel, up to `max_fuel` in a single round.
    pub fn block_of_exact(&mut self, stage: StageId, x: u64, max_fuel: u64) -> Result<Verdict> {
        let mut budget = 1024u64.min(max_fuel.max(1));
        let mut total = 0;
        loop {
            match self.block_of(stage, x, budget)? {
                Verdict::Undecided(spent) => {
                    total += spent;
                    if budget >= max_fuel {
                        return Ok(Verdict::Undecided(total));
                    }
                    budget = budget.saturating_mul(2).min(max_fuel);
                }
                v => return Ok(v),
            }
        }
    }

    /// Point query against one block.
    ///
    /// Only blocks up to `block.index` are consulted, so this is usually much
    /// cheaper than [`Self::block_of`].
    pub fn membership(&mut self, block: BlockRef, x: u64, fuel: u64) -> Result<Verdict> {
        Ok(self.membership_metered(block, x, fuel)?.0)
    }

    /// [`Self::membership`] that also reports the fuel it used.
    pub fn membership_metered(
        &mut self,
        block: BlockRef,
        x: u64,
        fuel: u64,
    ) -> Result<(Verdict, u64)> {
        self.check_stage(block.stage)?;
        let mut fuel = Fuel::new(fuel);
        let verdict = match self.member(block.stage, block.index, x, &mut fuel) {
            Ok(true) => Verdict::In(block.index),
            Ok(false) => Verdict::NotIn,
            Err(Stall) => Verdict::Undecided(fuel.spent()),
        };
        Ok((verdict, fuel.spent()))
    }

    /// [`Self::block_of`] that also reports the fuel it used.
    pub fn block_of_metered(
        &mut self,
        stage: StageId,
        x: u64,
        fuel: u64,
    ) -> Result<(Verdict, u64)> {
        self.check_stage(stage)?;
        let mut fuel = Fuel::new(fuel);
        let verdict = match self.locate(stage, x, &mut fuel) {
            Ok(i) => Verdict::In(i),
            Err(Stall) => Verdict::Undecided(fuel.spent()),
        };
        Ok((verdict, fuel.spent()))
    }

    /// Is `v` in `b(l)` of `stage`?
    pub fn b_member(&mut self, stage: StageId, l: u64, v: u64, fuel: u64) -> Result<Decision> {
        self.check_stage(stage)?;
        let selector = codec::row_selector(stage.row as usize, l)?;
        let mut fuel = Fuel::new(fuel);
        Ok(to_decision(
            self.in_b(stage, &selector, v, &mut fuel),
            &fuel,
        ))
    }

    /// Is `v` in `c(sigma)`?
    pub fn c_member(&mut self, sigma: &SigmaIndex, v: u64, fuel: u64) -> Result<Decision> {
        codec::validate_sigma(sigma.stage, &sigma.triples, self.n)?;
        let mut fuel = Fuel::new(fuel);
        Ok(to_decision(self.in_c(&sigma.triples, v, &mut fuel), &fuel))
    }

    /// Is `v` in `d(x)` for `stage`, i.e. do `x` and `v` share some `c(sigma)`?
    pub fn d_member(&mut self, stage: StageId, x: u64, v: u64, fuel: u64) -> Result<Decision> {
        self.check_stage(stage)?;
        if stage.row == 0 {
            return usage("d(x) is only used for stages with row >= 1");
        }
        let ord = stage.ordinal(self.n);
        let mut fuel = Fuel::new(fuel);
        let shared = (|| {
            let kx = self.keys_of(ord, x, &mut fuel)?;
            let kv = self.keys_of(ord, v, &mut fuel)?;
            Ok(kx.iter().zip(kv.iter()).any(|(a, b)| a == b))
        })();
        Ok(to_decision(shared, &fuel))
    }

    /// Splits `[0, window)` into members and undecided numbers of `block`.
    pub fn restrict(&mut self, block: BlockRef, window: u64, fuel: u64) -> Result<Restriction> {
        self.check_stage(block.stage)?;
        let mut out = Restriction::default();
        if block.stage.row == 0 {
            let (m, i) = (block.stage.column as usize, block.index);
            let mut v = 0;
            while let Ok(c) = next_with_coordinate(self.n, m, i, v) {
                if c >= window {
                    break;
                }
                out.members.push(c);
                v = c + 1;
            }
            return Ok(out);
        }
        for v in 0..window {
            match self.membership(block, v, fuel)? {
                Verdict::In(_) => out.members.push(v),
                Verdict::Undecided(_) => out.undecided.push(v),
                _ => {}
            }
        }
        Ok(out)
    }

    /// Extends the transcript of `block` to at least `steps` entries.
    pub fn advance_block(&mut self, block: BlockRef, steps: usize, fuel: u64) -> Result<Advanced> {
        self.check_stage(block.stage)?;
        if block.stage.row == 0 {
            return usage("row-0 blocks are closed form and have no transcript");
        }
        let ord = block.stage.ordinal(self.n);
        let h = usize::try_from(block.index).map_err(|_| Error::Overflow("block index"))?;
        let mut fuel = Fuel::new(fuel);
        let mut complete = true;
        self.stage_mut(ord).ensure_block(h);
        while self.stage_mut(ord).steps(h) < steps {
            if self.step_block(ord, h, &mut fuel).is_err() {
                complete = false;
                break;
            }
        }
        Ok(Advanced {
            transcript: self.transcript(block).expect("block was started"),
            complete,
            fuel_spent: fuel.spent(),
        })
    }

    /// Recorded transcript of a started block.
    pub fn transcript(&self, block: BlockRef) -> Option<Transcript> {
        let st = self.stage_ref(block.stage.ordinal(self.n))?;
        let h = usize::try_from(block.index).ok()?;
        let b = st.blocks.get(h)?;
        Some(Transcript {
            block,
            steps: b.steps.clone(),
            committed_bound: self.committed_bound(st, h),
        })
    }

    // First number whose verdict for block `h` does not follow from the
    // recorded transcripts of the stage alone: not chosen by any block and
    // not a `z` of this block.
    fn committed_bound(&self, st: &StageState, h: usize) -> u64 {
        let block = &st.blocks[h];
        (0u64..)
            .find(|v| !st.owner.contains_key(v) && !block.zs.contains(v))
            .unwrap_or(u64::MAX)
    }

    // ---------------------------------------------------------------- engine

    pub(crate) fn locate(&mut self, stage: StageId, v: u64, fuel: &mut Fuel) -> Flow<u64> {
        if stage.row == 0 {
            return Ok(coordinate(v, self.n, stage.column as usize));
        }
        let ord = stage.ordinal(self.n);
        loop {
            let st = self.stage_mut(ord);
            if let Some(&b) = st.owner.get(&v) {
                return Ok(b as u64);
            }
            let h = st.first_open.get(&v).copied().unwrap_or(0) as usize;
            deep(|| self.settle(ord, h, v, fuel))?;
        }
    }

    // Is `v` in block `i` of `stage`? Decides `v` against blocks `0..=i` only.
    fn member(&mut self, stage: StageId, i: u64, v: u64, fuel: &mut Fuel) -> Flow<bool> {
        Ok(self.locate_upto(stage, v, i, fuel)? == Some(i))
    }

    // Block of `v` if its index is at most `bound`, else None.
    fn locate_upto(
        &mut self,
        stage: StageId,
        v: u64,
        bound: u64,
        fuel: &mut Fuel,
    ) -> Flow<Option<u64>> {
        if stage.row == 0 {
            let c = coordinate(v, self.n, stage.column as usize);
            return Ok((c <= bound).then_some(c));
        }
        let ord = stage.ordinal(self.n);
        loop {
            let st = self.stage_mut(ord);
            if let Some(&b) = st.owner.get(&v) {
                return Ok((b as u64 <= bound).then_some(b as u64));
            }
            let g = st.first_open.get(&v).copied().unwrap_or(0) as u64;
            if g > bound {
                return Ok(None);
            }
            deep(|| self.settle(ord, g as usize, v, fuel))?;
        }
    }

    // One unit of progress on the verdict of `v` for block `h`.
    fn settle(&mut self, ord: usize, h: usize, v: u64, fuel: &mut Fuel) -> Flow<()> {
        fuel.tick()?;
        self.stage_mut(ord).ensure_block(h);
        match self.fate(ord, h, v, None, fuel)? {
            Fate::Chosen => {}
            Fate::Excluded => {
                self.stage_mut(ord).first_open.insert(v, h as u32 + 1);
            }
            Fate::Open => self.step_block(ord, h, fuel)?,
        }
        Ok(())
    }

    fn fate(
        &mut self,
        ord: usize,
        h: usize,
        v: u64,
        extra: Option<&[Key]>,
        fuel: &mut Fuel,
    ) -> Flow<Fate> {
        let st = self.stage_mut(ord);
        if let Some(&b) = st.owner.get(&v) {
            return Ok(if b as usize == h {
                Fate::Chosen
            } else {
                Fate::Excluded
            });
        }
        if st.blocks[h].zs.contains(&v) {
            return Ok(Fate::Excluded);
        }
        let hit = self.hit_test(ord, h, v, extra.unwrap_or(&[]), fuel)?;
        Ok(if hit { Fate::Excluded } else { Fate::Open })
    }

    // Does `v` share an admissible key with something block `h` has chosen
    // (or with `extra`)? Positions of `v` are only resolved as far as the
    // recorded keys require.
    fn hit_test(
        &mut self,
        ord: usize,
        h: usize,
        v: u64,
        extra: &[Key],
        fuel: &mut Fuel,
    ) -> Flow<bool> {
        let n = self.n;
        let st = self.stage_mut(ord);
        if let Some(keys) = st.keys.get(&v) {
            let block = &st.blocks[h];
            return Ok(keys
                .iter()
                .any(|k| block.hit.contains(k) || extra.contains(k)));
        }
        let subsets = self.stage_mut(ord).subsets.len();
        let mut key: SmallVec<[u64; 8]> = SmallVec::new();
        'subsets: for si in 0..subsets {
            key.clear();
            key.push(si as u64);
            let width = self.stage_mut(ord).subsets[si].len();
            for t in 0..width {
                let recorded = self.stage_mut(ord).blocks[h]
                    .prefix_max
                    .get(key.as_slice())
                    .copied();
                let bound = extra
                    .iter()
                    .filter(|e| e[..=t] == key[..])
                    .map(|e| e[t + 1])
                    .chain(recorded)
                    .max();
                let Some(bound) = bound else {
                    continue 'subsets;
                };
                let p = self.stage_mut(ord).subsets[si][t] as usize;
                match self.locate_upto(StageId::from_ordinal(p, n), v, bound, fuel)? {
                    Some(pos) => key.push(pos),
                    None => continue 'subsets,
                }
            }
            if self.stage_mut(ord).blocks[h].hit.contains(key.as_slice())
                || extra.iter().any(|e| e[..] == key[..])
            {
                return Ok(true);
            }
        }
        Ok(false)
    }

    // Is `v` in some block of the stage with index below `h`?
    fn in_earlier(&mut self, ord: usize, h: usize, v: u64, fuel: &mut Fuel) -> Flow<bool> {
        loop {
            let st = self.stage_mut(ord);
            if let Some(&b) = st.owner.get(&v) {
                return Ok((b as usize) < h);
            }
            let g = st.first_open.get(&v).copied().unwrap_or(0) as usize;
            if g >= h {
                return Ok(false);
            }
            deep(|| self.settle(ord, g, v, fuel))?;
        }
    }

    fn positions(&mut self, ord: usize, v: u64, fuel: &mut Fuel) -> Flow<Vec<u64>> {
        let n = self.n;
        (0..ord)
            .map(|o| self.locate(StageId::from_ordinal(o, n), v, fuel))
            .collect()
    }

    fn keys_of(&mut self, ord: usize, v: u64, fuel: &mut Fuel) -> Flow<Arc<[Key]>> {
        if let Some(k) = self.stage_mut(ord).keys.get(&v) {
            return Ok(k.clone());
        }
        let pos = self.positions(ord, v, fuel)?;
        let st = self.stage_mut(ord);
        let keys: Arc<[Key]> = st
            .subsets
            .iter()
            .enumerate()
            .map(|(i, s)| {
                std::iter::once(i as u64)
                    .chain(s.iter().map(|&o| pos[o as usize]))
                    .collect::<Key>()
            })
            .collect();
        st.keys.insert(v, keys.clone());
        Ok(keys)
    }

    fn sigma_key(&mut self, ord: usize, sigma: &[BlockTriple]) -> Key {
        let n = self.n;
        let mut parts: Vec<(u32, u64)> = sigma
            .iter()
            .map(|t| (t.stage().ordinal(n) as u32, t.index))
            .collect();
        parts.sort_unstable();
        let ords: Vec<u32> = parts.iter().map(|p| p.0).collect();
        let idx = self.stage_mut(ord).subset_lookup[&ords];
        std::iter::once(idx as u64)
            .chain(parts.iter().map(|p| p.1))
            .collect()
    }

    fn in_b(&mut self, stage: StageId, selector: &[u64], v: u64, fuel: &mut Fuel) -> Flow<bool> {
        for (j, &want) in selector.iter().enumerate() {
            if !self.member(StageId::new(j as u32, stage.column), want, v, fuel)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn in_c(&mut self, triples: &[BlockTriple], v: u64, fuel: &mut Fuel) -> Flow<bool> {
        // Row-0 triples are free; check them first.
        for t in triples.iter().filter(|t| t.row == 0) {
            if !self.member(t.stage(), t.index, v, fuel)? {
                return Ok(false);
            }
        }
        for t in triples.iter().filter(|t| t.row > 0) {
            if !self.member(t.stage(), t.index, v, fuel)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    // Gives block `h` its next step. Under round-robin every earlier block of the
    // stage is first brought strictly ahead of it.
    fn step_block(&mut self, ord: usize, h: usize, fuel: &mut Fuel) -> Flow<()> {
        if self.schedule == Schedule::OnDemand {
            return deep(|| self.step_raw(ord, h, fuel));
        }
        let s = self.stage_mut(ord).steps(h);
        let lo = self.stage_mut(ord).blocks[..h].partition_point(|b| b.steps.len() > s);
        for g in lo..h {
            while self.stage_mut(ord).steps(g) <= s {
                deep(|| self.step_raw(ord, g, fuel))?;
            }
        }
        deep(|| self.step_raw(ord, h, fuel))
    }

    fn step_raw(&mut self, ord: usize, h: usize, fuel: &mut Fuel) -> Flow<()> {
        let (stage, l) = {
            let st = self.stage_mut(ord);
            (st.id, st.steps(h) as u64)
        };
        let sel_code = unpair(l).1;
        let selector = codec::decode_tuple(sel_code, stage.row as usize).expect("row >= 1");

        let x = self.scan_b(ord, h, &selector, sel_code, None, fuel)?;
        let x_keys = self.keys_of(ord, x, fuel)?;

        let sigma = self.stage_mut(ord).tau.get(l).triples.clone();
        let sigma_key = self.sigma_key(ord, &sigma);
        let met =
            self.stage_mut(ord).blocks[h].hit.contains(&sigma_key) || x_keys.contains(&sigma_key);
        let (y, y_reused) = if met {
            (x, true)
        } else {
            (self.scan_c(ord, h, &sigma, &x_keys, fuel)?, false)
        };
        let y_keys = self.keys_of(ord, y, fuel)?;

        let z = self.scan_b(ord, h, &selector, sel_code, Some((x, y)), fuel)?;

        let step = Step { x, y, z, y_reused };
        if let Err(msg) = self
            .stage_mut(ord)
            .commit(h, step, sel_code, [&x_keys, &y_keys])
        {
            panic!("construction invariant broken: {msg}");
        }
        Ok(())
    }

    // x-scan when `chosen_now` is None, z-scan otherwise. Both walk `b(l)` in
    // increasing order starting from the per-selector cursor; everything the
    // cursor has passed was rejected for a reason that never goes away.
    fn scan_b(
        &mut self,
        ord: usize,
        h: usize,
        selector: &[u64],
        sel_code: u64,
        chosen_now: Option<(u64, u64)>,
        fuel: &mut Fuel,
    ) -> Flow<u64> {
        let n = self.n;
        let column = StageId::from_ordinal(ord, n).column as usize;
        let mut from = {
            let b = &self.stage_mut(ord).blocks[h];
            let cursors = if chosen_now.is_some() {
                &b.z_cursor
            } else {
                &b.x_cursor
            };
            cursors.get(&sel_code).copied().unwrap_or(0)
        };
        loop {
            let v = codec::next_coord(n, column, selector[0], from).ok_or(Stall)?;
            let verdict = self.b_candidate(ord, h, selector, v, chosen_now, fuel);
            let b = &mut self.stage_mut(ord).blocks[h];
            let cursors = if chosen_now.is_some() {
                &mut b.z_cursor
            } else {
                &mut b.x_cursor
            };
            match verdict {
                Ok(true) => return Ok(v),
                Ok(false) => {
                    cursors.insert(sel_code, v + 1);
                    from = v + 1;
                }
                Err(Stall) => {
                    cursors.insert(sel_code, v);
                    return Err(Stall);
                }
            }
        }
    }

    fn b_candidate(
        &mut self,
        ord: usize,
        h: usize,
        selector: &[u64],
        v: u64,
        chosen_now: Option<(u64, u64)>,
        fuel: &mut Fuel,
    ) -> Flow<bool> {
        fuel.tick()?;
        let n = self.n;
        let stage = StageId::from_ordinal(ord, n);
        if self.stage_mut(ord).blocks[h].zs.contains(&v) {
            return Ok(false);
        }
        if !self.in_b(stage, selector, v, fuel)? {
            return Ok(false);
        }
        match chosen_now {
            None => {
                if self.fate(ord, h, v, None, fuel)? != Fate::Open {
                    return Ok(false);
                }
            }
            Some((x, y)) => {
                if v == x || v == y || self.stage_mut(ord).owner.get(&v) == Some(&(h as u32)) {
                    return Ok(false);
                }
            }
        }
        Ok(!self.in_earlier(ord, h, v, fuel)?)
    }

    fn scan_c(
        &mut self,
        ord: usize,
        h: usize,
        sigma: &[BlockTriple],
        x_keys: &[Key],
        fuel: &mut Fuel,
    ) -> Flow<u64> {
        let n = self.n;
        let anchor = sigma.iter().find(|t| t.row == 0).copied();
        let mut from = 0u64;
        loop {
            let v = match anchor {
                Some(t) => codec::next_coord(n, t.column as usize, t.index, from).ok_or(Stall)?,
                None => from,
            };
            from = v + 1;
            fuel.tick()?;
            if !self.in_c(sigma, v, fuel)? {
                continue;
            }
            if self.fate(ord, h, v, Some(x_keys), fuel)? != Fate::Open {
                continue;
            }
            if !self.in_earlier(ord, h, v, fuel)? {
                return Ok(v);
            }
        }
    }

    // ---------------------------------------------------------------- replay

    /// Registers a block with no steps yet. Used when loading a store.
    pub(crate) fn start_block(&mut self, block: BlockRef) {
        let ord = block.stage.ordinal(self.n);
        self.stage_mut(ord).ensure_block(block.index as usize);
    }

    /// Re-applies a recorded step without searching. Used when loading a store.
    pub(crate) fn replay_step(&mut self, block: BlockRef, step: Step, fuel: u64) -> Result<()> {
        let ord = block.stage.ordinal(self.n);
        let h = block.index as usize;
        let mut fuel = Fuel::new(fuel);
        let st = self.stage_mut(ord);
        st.ensure_block(h);
        let stall = |_| Error::Store(format!("fuel exhausted replaying {block}"));
        let x_keys = self.keys_of(ord, step.x, &mut fuel).map_err(stall)?;
        let y_keys = self.keys_of(ord, step.y, &mut fuel).map_err(stall)?;
        let st = self.stage_mut(ord);
        let sel_code = unpair(st.blocks[h].steps.len() as u64).1;
        st.commit(h, step, sel_code, [&x_keys, &y_keys])
            .map_err(Error::Store)
    }

    /// Transcripts of every started block, grouped by stage in row-major order.
    pub fn all_transcripts(&self) -> Vec<Transcript> {
        let mut out = Vec::new();
        for st in self.stages.iter().flatten() {
            for h in 0..st.blocks.len() {
                out.push(Transcript {
                    block: BlockRef {
                        stage: st.id,
                        index: h as u64,
                    },
                    steps: st.blocks[h].steps.clone(),
                    committed_bound: self.committed_bound(st, h),
                });
            }
        }
        out
    }
}

fn to_decision(r: Flow<bool>, fuel: &Fuel) -> Decision {
    match r {
        Ok(true) => Decision::Yes,
        Ok(false) => Decision::No,
        Err(Stall) => Decision::Undecided(fuel.spent()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FUEL: u64 = 1_000_000;

    #[test]
    fn rejects_small_arity() {
        assert!(matches!(MatrixState::new(1), Err(Error::Usage(_))));
        assert!(matches!(MatrixState::new(0), Err(Error::Usage(_))));
    }

    #[test]
    fn row_zero_block_of() {
        let mut m = MatrixState::new(2).unwrap();
        assert_eq!(
            m.block_of(StageId::new(0, 0), 1, 0).unwrap(),
            Verdict::In(1)
        );
        assert_eq!(
            m.block_of(StageId::new(0, 1), 2, 0).unwrap(),
            Verdict::In(1)
        );
    }

    #[test]
    fn row_zero_membership() {
        let mut m = MatrixState::new(2).unwrap();
        assert_eq!(
            m.membership(BlockRef::new(0, 0, 0), 5, 0).unwrap(),
            Verdict::In(0)
        );
        assert_eq!(
            m.membership(BlockRef::new(0, 0, 0), 1, 0).unwrap(),
            Verdict::NotIn
        );
    }

    #[test]
    fn zero_fuel_is_undecided() {
        let mut m = MatrixState::new(2).unwrap();
        assert_eq!(
            m.membership(BlockRef::new(1, 0, 0), 0, 0).unwrap(),
            Verdict::Undecided(0)
        );
        assert_eq!(
            m.b_member(StageId::new(2, 0), 0, 0, 0).unwrap(),
            Decision::Undecided(0)
        );
    }

    #[test]
    fn column_out_of_range() {
        let mut m = MatrixState::new(2).unwrap();
        assert!(matches!(
            m.block_of(StageId::new(0, 2), 0, 10),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn first_steps_of_stage_1_0() {
        // Hand replay for n = 2: b(0) = b(1) = a_0^{0,0} = {0, 2, 5, 9, ...},
        // tau(0) = {(0,0,1)}, tau(1) = {(1,0,1)}, d(u) = a_{h_1(u)}^{0,1}.
        let mut m = MatrixState::new(2).unwrap();
        let t = m.advance_block(BlockRef::new(1, 0, 0), 2, FUEL).unwrap();
        assert!(t.complete);
        assert_eq!(
            t.transcript.steps,
            vec![
                Step {
                    x: 0,
                    y: 0,
                    z: 2,
                    y_reused: true
                },
                Step {
                    x: 5,
                    y: 4,
                    z: 9,
                    y_reused: false
                },
            ]
        );
    }

    #[test]
    fn empty_advance() {
        let mut m = MatrixState::new(2).unwrap();
        let t = m.advance_block(BlockRef::new(1, 0, 0), 0, FUEL).unwrap();
        assert!(t.transcript.steps.is_empty());
    }

    #[test]
    fn b_membership() {
        let mut m = MatrixState::new(2).unwrap();
        // f(0) = (0) at row 1, so b(0) = a_0^{0,0}.
        assert_eq!(
            m.b_member(StageId::new(1, 0), 0, 5, FUEL).unwrap(),
            Decision::Yes
        );
        assert_eq!(
            m.b_member(StageId::new(1, 0), 0, 1, FUEL).unwrap(),
            Decision::No
        );
    }

    #[test]
    fn c_membership() {
        let mut m = MatrixState::new(2).unwrap();
        let sigma =
            codec::sigma_from_triples(StageId::new(1, 0), vec![BlockTriple::new(0, 0, 1)], 2)
                .unwrap();
        assert_eq!(m.c_member(&sigma, 0, FUEL).unwrap(), Decision::Yes);
        assert_eq!(m.c_member(&sigma, 2, FUEL).unwrap(), Decision::No);

        let mut m3 = MatrixState::new(3).unwrap();
        let sigma = codec::sigma_from_triples(
            StageId::new(1, 0),
            vec![BlockTriple::new(2, 0, 0), BlockTriple::new(1, 0, 2)],
            3,
        )
        .unwrap();
        // h is a bijection: the common code is the unique tuple (2, *, 1) ... with
        // column 1 free, so c(sigma) is infinite; its least element decodes to (2, 0, 1).
        let least = codec::encode_tuple(&[2, 0, 1]).unwrap();
        assert_eq!(m3.c_member(&sigma, least, FUEL).unwrap(), Decision::Yes);
    }

    #[test]
    fn d_membership() {
        let mut m = MatrixState::new(2).unwrap();
        let s = StageId::new(1, 0);
        assert_eq!(m.d_member(s, 0, 0, FUEL).unwrap(), Decision::Yes);
        assert_eq!(m.d_member(s, 0, 1, FUEL).unwrap(), Decision::Yes);
        assert_eq!(m.d_member(s, 0, 2, FUEL).unwrap(), Decision::No);
    }

    #[test]
    fn restrict_row_zero() {
        let mut m = MatrixState::new(2).unwrap();
        let r = m.restrict(BlockRef::new(0, 0, 0), 10, 0).unwrap();
        assert_eq!(r.members, vec![0, 2, 5, 9]);
        assert!(r.undecided.is_empty());
        let r = m.restrict(BlockRef::new(0, 1, 0), 10, 0).unwrap();
        assert_eq!(r.members, vec![0, 1, 3, 6]);
        let r = m.restrict(BlockRef::new(1, 0, 0), 0, 0).unwrap();
        assert_eq!(r, Restriction::default());
    }

    #[test]
    fn verdicts_are_final_under_more_fuel() {
        let mut m = MatrixState::new(2).unwrap();
        let stage = StageId::new(1, 0);
        let before: Vec<Verdict> = (0..80).map(|v| m.block_of(stage, v, 40).unwrap()).collect();
        assert!(before.iter().any(|v| !v.is_decided()));
        for (v, b) in before.into_iter().enumerate() {
            let after = m.block_of(stage, v as u64, FUEL).unwrap();
            assert!(after.is_decided());
            if b.is_decided() {
                assert_eq!(b, after);
            }
        }
    }

    #[test]
    fn schedules_agree() {
        let mut lazy = MatrixState::new(2).unwrap();
        let mut eager = MatrixState::with_schedule(2, Schedule::RoundRobin).unwrap();
        for i in 0..4 {
            let r = BlockRef::new(1, 0, i);
            let a = lazy.advance_block(r, 6, FUEL).unwrap();
            let b = eager.advance_block(r, 6, FUEL).unwrap();
            assert!(a.complete && b.complete);
            assert_eq!(a.transcript.steps, b.transcript.steps);
        }
    }

    #[test]
    fn exact_mode_resolves() {
        let mut m = MatrixState::new(2).unwrap();
        let v = m.block_of_exact(StageId::new(1, 0), 77, FUEL).unwrap();
        assert!(v.is_decided());
        assert_eq!(v, m.block_of(StageId::new(1, 0), 77, 0).unwrap());
    }

    #[test]
    fn total_on_small_windows() {
        let mut m = MatrixState::new(2).unwrap();
        for (stage, window) in [(StageId::new(1, 0), 300), (StageId::new(1, 1), 12)] {
            for v in 0..window {
                assert!(
                    m.block_of(stage, v, FUEL).unwrap().is_decided(),
                    "{stage} {v}"
                );
            }
        }
    }
}
