//! Finite-window checks of the matrix axioms.
//!
//! Every check looks at `[0, N)` only. "Infinite" is read as "has a member
//! above each requested bound", and a number whose membership could not be
//! decided within the fuel budget makes its instance inconclusive, never
//! failed. Violations carry the concrete numbers that witness them, so each
//! one can be re-checked with direct membership queries.

use rustc_hash::FxHashMap;
use serde::Serialize;
use serde_json::Value;

use crate::codec::{coordinate, next_coord, StageId};
use crate::error::{usage, Result};
use crate::matrix::{BlockRef, MatrixState, Verdict};

/// Fuel granted to a single membership query, with optional caps on the
/// fuel one check instance and one [`Checker`] may spend in total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub fuel: u64,
    pub instance: Option<u64>,
    pub pool: Option<u64>,
}

impl Limits {
    pub fn per_query(fuel: u64) -> Self {
        Limits {
            fuel,
            instance: None,
            pool: None,
        }
    }

    pub fn with_instance(self, cap: u64) -> Self {
        Limits {
            instance: Some(cap),
            ..self
        }
    }

    pub fn with_pool(self, pool: u64) -> Self {
        Limits {
            pool: Some(pool),
            ..self
        }
    }
}

/// Steps a block may be advanced while looking for a witness among its
/// chosen elements.
const WITNESS_STEPS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub refs: Vec<BlockRef>,
    pub values: Vec<u64>,
    pub window: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Report {
    pub property: String,
    pub instances: u64,
    pub violations: Vec<Violation>,
    pub undecided_instances: u64,
    /// Instances with positive evidence: a member found (singleton checks)
    /// or all bounds exceeded (infinitude checks).
    pub witnessed: u64,
    pub pass: bool,
}

impl Report {
    pub fn new(property: &str) -> Self {
        Report {
            property: property.to_string(),
            instances: 0,
            violations: Vec::new(),
            undecided_instances: 0,
            witnessed: 0,
            pass: true,
        }
    }

    pub fn absorb(&mut self, other: Report) {
        self.instances += other.instances;
        self.undecided_instances += other.undecided_instances;
        self.witnessed += other.witnessed;
        self.violations.extend(other.violations);
        self.pass = self.violations.is_empty();
    }

    fn add(&mut self, outcome: Outcome) {
        self.instances += 1;
        match outcome {
            Outcome::Witnessed => self.witnessed += 1,
            Outcome::WitnessedUndecided => {
                self.witnessed += 1;
                self.undecided_instances += 1;
            }
            Outcome::Empty => {}
            Outcome::Undecided => self.undecided_instances += 1,
            Outcome::Violated(v) => self.violations.push(v),
        }
        self.pass = self.violations.is_empty();
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("reports serialize")
    }
}

enum Outcome {
    Witnessed,
    // A member was found but other candidates stayed undecided.
    WitnessedUndecided,
    Empty,
    Undecided,
    Violated(Violation),
}

/// Members of an intersection inside a window, plus the candidates whose
/// membership stayed undecided.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Intersection {
    pub members: Vec<u64>,
    pub undecided: Vec<u64>,
}

// Candidate numbers with their status so far, and the refs left to test.
type Candidates = (Vec<(u64, Tri)>, Vec<usize>);

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tri {
    Yes,
    No,
    Unknown,
}

/// Runs checks against one matrix state, caching block restrictions.
pub struct Checker<'a> {
    state: &'a mut MatrixState,
    limits: Limits,
    spent: u64,
    instance_start: u64,
    restrictions: FxHashMap<(BlockRef, u64), Intersection>,
}

impl<'a> Checker<'a> {
    pub fn new(state: &'a mut MatrixState, limits: Limits) -> Self {
        Checker {
            state,
            limits,
            spent: 0,
            instance_start: 0,
            restrictions: FxHashMap::default(),
        }
    }

    pub fn fuel_spent(&self) -> u64 {
        self.spent
    }

    pub fn state(&mut self) -> &mut MatrixState {
        self.state
    }

    fn n(&self) -> usize {
        self.state.n()
    }

    fn budget(&self) -> u64 {
        let mut b = self.limits.fuel;
        if let Some(pool) = self.limits.pool {
            b = b.min(pool.saturating_sub(self.spent));
        }
        if let Some(cap) = self.limits.instance {
            b = b.min(cap.saturating_sub(self.spent - self.instance_start));
        }
        b
    }

    fn begin_instance(&mut self) {
        self.instance_start = self.spent;
    }

    fn member_of_all(&mut self, refs: &[BlockRef], v: u64) -> Result<Tri> {
        let all: Vec<usize> = (0..refs.len()).collect();
        self.filter(refs, &all, v, Tri::Yes)
    }

    /// A common member of `refs` in `[from, window)` found among the chosen
    /// elements of their transcripts, advancing each block a few steps.
    pub fn transcript_witness(
        &mut self,
        refs: &[BlockRef],
        from: u64,
        window: u64,
    ) -> Result<Option<u64>> {
        let mut order: Vec<BlockRef> = refs.iter().copied().filter(|r| r.stage.row > 0).collect();
        order.sort_by_key(|r| r.stage);
        for r in order {
            let mut seen = 0;
            for target in 1..=WITNESS_STEPS {
                let budget = self.budget();
                if budget == 0 {
                    return Ok(None);
                }
                let adv = self.state.advance_block(r, target, budget)?;
                self.spent += adv.fuel_spent;
                for s in &adv.transcript.steps[seen..] {
                    for v in [s.x, s.y] {
                        if (from..window).contains(&v) && self.member_of_all(refs, v)? == Tri::Yes {
                            return Ok(Some(v));
                        }
                    }
                }
                seen = adv.transcript.steps.len();
                if !adv.complete {
                    break;
                }
            }
        }
        Ok(None)
    }

    fn member(&mut self, r: BlockRef, v: u64) -> Result<Tri> {
        if r.stage.row == 0 {
            let c = coordinate(v, self.n(), r.stage.column as usize);
            return Ok(if c == r.index { Tri::Yes } else { Tri::No });
        }
        let (verdict, spent) = self.state.membership_metered(r, v, self.budget())?;
        self.spent += spent;
        Ok(match verdict {
            Verdict::In(_) => Tri::Yes,
            Verdict::NotIn => Tri::No,
            Verdict::Undecided(_) => Tri::Unknown,
        })
    }

    fn check_refs(&self, refs: &[BlockRef]) -> Result<()> {
        for r in refs {
            if r.stage.column as usize >= self.n() {
                return usage(format!("{r}: column out of range for n={}", self.n()));
            }
        }
        for (a, r) in refs.iter().enumerate() {
            if refs[..a].iter().any(|q| q.stage == r.stage) {
                return usage(format!("two blocks from partition {}", r.stage));
            }
        }
        Ok(())
    }

    // Candidates for the intersection of `refs` in `[from, window)`, in
    // increasing order, each with its status for the generating refs.
    fn candidates(&mut self, refs: &[BlockRef], from: u64, window: u64) -> Result<Candidates> {
        let n = self.n();
        let row0: Vec<usize> = (0..refs.len())
            .filter(|&i| refs[i].stage.row == 0)
            .collect();
        if let Some(&g) = row0.first() {
            let gen = refs[g];
            let mut out = Vec::new();
            let mut v = from;
            while v < window {
                let Some(c) = next_coord(n, gen.stage.column as usize, gen.index, v) else {
                    break;
                };
                if c >= window {
                    break;
                }
                let all = row0[1..]
                    .iter()
                    .all(|&i| coordinate(c, n, refs[i].stage.column as usize) == refs[i].index);
                if all {
                    out.push((c, Tri::Yes));
                }
                v = c + 1;
            }
            let rest = (0..refs.len()).filter(|i| !row0.contains(i)).collect();
            return Ok((out, rest));
        }
        let g = (0..refs.len())
            .min_by_key(|&i| refs[i].stage)
            .expect("at least one block");
        let table = self.restriction(refs[g], window)?;
        let mut out: Vec<(u64, Tri)> = table
            .members
            .iter()
            .map(|&v| (v, Tri::Yes))
            .chain(table.undecided.iter().map(|&v| (v, Tri::Unknown)))
            .filter(|&(v, _)| v >= from)
            .collect();
        out.sort_unstable_by_key(|c| c.0);
        let rest = (0..refs.len()).filter(|&i| i != g).collect();
        Ok((out, rest))
    }

    /// Members and undecided numbers of one block in `[0, window)`.
    pub fn restriction(&mut self, r: BlockRef, window: u64) -> Result<Intersection> {
        if let Some(t) = self.restrictions.get(&(r, window)) {
            return Ok(t.clone());
        }
        let mut t = Intersection::default();
        if r.stage.row == 0 {
            let rr = self.state.restrict(r, window, 0)?;
            t.members = rr.members;
        } else {
            for v in 0..window {
                match self.member(r, v)? {
                    Tri::Yes => t.members.push(v),
                    Tri::Unknown => t.undecided.push(v),
                    Tri::No => {}
                }
            }
        }
        self.restrictions.insert((r, window), t.clone());
        Ok(t)
    }

    /// `intersection of refs` restricted to `[0, window)`.
    pub fn intersection(&mut self, refs: &[BlockRef], window: u64) -> Result<Intersection> {
        self.check_refs(refs)?;
        if refs.is_empty() {
            return usage("intersection of no blocks");
        }
        let (cands, rest) = self.candidates(refs, 0, window)?;
        let mut out = Intersection::default();
        for (v, status) in cands {
            match self.filter(refs, &rest, v, status)? {
                Tri::Yes => out.members.push(v),
                Tri::Unknown => out.undecided.push(v),
                Tri::No => {}
            }
        }
        Ok(out)
    }

    fn filter(
        &mut self,
        refs: &[BlockRef],
        rest: &[usize],
        v: u64,
        mut status: Tri,
    ) -> Result<Tri> {
        // Cheapest partitions first: a definite "no" ends the test early.
        let mut order = rest.to_vec();
        order.sort_by_key(|&i| refs[i].stage);
        for i in order {
            match self.member(refs[i], v)? {
                Tri::No => return Ok(Tri::No),
                Tri::Unknown => status = Tri::Unknown,
                Tri::Yes => {}
            }
        }
        Ok(status)
    }

    // Smallest member above `bound`, if one is found below `window`.
    fn member_above(
        &mut self,
        refs: &[BlockRef],
        bound: u64,
        window: u64,
    ) -> Result<(Option<u64>, bool)> {
        self.first_member(refs, bound.saturating_add(1), window)
    }

    /// Smallest common member of `refs` in `[from, window)`, and whether an
    /// undecided candidate was skipped on the way to it.
    pub fn first_member(
        &mut self,
        refs: &[BlockRef],
        from: u64,
        window: u64,
    ) -> Result<(Option<u64>, bool)> {
        self.check_refs(refs)?;
        if refs.is_empty() {
            return usage("intersection of no blocks");
        }
        let (cands, rest) = self.candidates(refs, from, window)?;
        let mut undecided = false;
        for (v, status) in cands {
            match self.filter(refs, &rest, v, status)? {
                Tri::Yes => return Ok((Some(v), undecided)),
                Tri::Unknown => undecided = true,
                Tri::No => {}
            }
        }
        Ok((None, undecided))
    }

    /// Every `v < window` lies in exactly one block of `stage`.
    pub fn check_partition(&mut self, stage: StageId, window: u64) -> Result<Report> {
        if stage.column as usize >= self.n() {
            return usage(format!("column {} out of range", stage.column));
        }
        let mut report = Report::new("partition");
        for v in 0..window {
            self.begin_instance();
            let outcome = if stage.row == 0 {
                Outcome::Witnessed
            } else {
                let (verdict, spent) = self.state.block_of_metered(stage, v, self.budget())?;
                self.spent += spent;
                match verdict {
                    Verdict::In(i) => self.confirm_owner(stage, v, i),
                    _ => Outcome::Undecided,
                }
            };
            report.add(outcome);
        }
        Ok(report)
    }

    // The verdict must be backed by the transcripts: recorded as chosen by
    // block `i` and by no other block.
    fn confirm_owner(&mut self, stage: StageId, v: u64, i: u64) -> Outcome {
        let holders: Vec<u64> = (0..self.state.block_count(stage) as u64)
            .filter(|&h| {
                self.state
                    .transcript(BlockRef { stage, index: h })
                    .is_some_and(|t| t.steps.iter().any(|s| s.x == v || s.y == v))
            })
            .collect();
        if holders == [i] {
            Outcome::Witnessed
        } else {
            Outcome::Violated(Violation {
                refs: holders
                    .iter()
                    .map(|&h| BlockRef { stage, index: h })
                    .collect(),
                values: vec![v],
                window: v + 1,
                reason: format!("resolved to block {i}, recorded in blocks {holders:?}"),
            })
        }
    }

    /// Column-wise agreement for the chain `a^{0,m}_{i(0)}, a^{1,m}_{i(1)}, ...`.
    pub fn check_column_agreement(
        &mut self,
        m: u32,
        chain: &[u64],
        window: u64,
        bounds: &[u64],
    ) -> Result<Report> {
        if chain.is_empty() {
            return usage("chain must have length at least 1");
        }
        let refs: Vec<BlockRef> = chain
            .iter()
            .enumerate()
            .map(|(row, &i)| BlockRef::new(row as u32, m, i))
            .collect();
        self.infinitude("column_agreement", &refs, window, bounds)
    }

    /// Fewer than `n` blocks from distinct partitions meet in an infinite set.
    pub fn check_subtuple_infinite(
        &mut self,
        refs: &[BlockRef],
        window: u64,
        bounds: &[u64],
    ) -> Result<Report> {
        if refs.is_empty() || refs.len() >= self.n() {
            return usage(format!(
                "sub-tuples have between 1 and {} blocks",
                self.n() - 1
            ));
        }
        self.infinitude("subtuple_infinite", refs, window, bounds)
    }

    fn infinitude(
        &mut self,
        property: &str,
        refs: &[BlockRef],
        window: u64,
        bounds: &[u64],
    ) -> Result<Report> {
        self.check_refs(refs)?;
        self.begin_instance();
        let mut report = Report::new(property);
        let mut sorted = bounds.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut undecided = false;
        let mut failed = None;
        // A member above the largest bound witnesses every smaller bound too.
        let mut witnessed_above: Option<u64> = None;
        for &b in sorted.iter().rev() {
            if witnessed_above.is_some_and(|w| w > b) {
                continue;
            }
            if b.saturating_add(1) >= window {
                undecided = true;
                continue;
            }
            if let Some(w) = self.transcript_witness(refs, b + 1, window)? {
                witnessed_above = Some(w);
                continue;
            }
            match self.member_above(refs, b, window)? {
                (Some(w), _) => witnessed_above = Some(w),
                (None, true) => undecided = true,
                (None, false) => failed = Some(b),
            }
        }
        report.add(match failed {
            Some(b) => Outcome::Violated(Violation {
                refs: refs.to_vec(),
                values: vec![b],
                window,
                reason: format!("no member above {b} in the window, all candidates decided"),
            }),
            None if undecided => Outcome::Undecided,
            None => Outcome::Witnessed,
        });
        Ok(report)
    }

    /// `n` blocks from distinct partitions, not all in one column, share at
    /// most one number in the window.
    pub fn check_optimality(&mut self, refs: &[BlockRef], window: u64) -> Result<Report> {
        if refs.len() != self.n() {
            return usage(format!("optimality needs exactly {} blocks", self.n()));
        }
        self.check_refs(refs)?;
        if refs.iter().all(|r| r.stage.column == refs[0].stage.column) {
            return usage("blocks must come from at least two columns");
        }
        self.begin_instance();
        let witness = self.transcript_witness(refs, 0, window)?;
        let inter = self.intersection(refs, window)?;
        let mut members = inter.members;
        members.extend(witness);
        members.sort_unstable();
        members.dedup();
        let mut report = Report::new("optimality");
        report.add(if members.len() >= 2 {
            Outcome::Violated(Violation {
                refs: refs.to_vec(),
                values: members[..2].to_vec(),
                window,
                reason: "intersection has two members".into(),
            })
        } else if !inter.undecided.is_empty() {
            if members.is_empty() {
                Outcome::Undecided
            } else {
                Outcome::WitnessedUndecided
            }
        } else if members.len() == 1 {
            Outcome::Witnessed
        } else {
            Outcome::Empty
        });
        Ok(report)
    }

    /// Every instance of the three window checks with rows `< max_row` and
    /// block indices `< max_index`.
    pub fn sweep(
        &mut self,
        max_row: u32,
        max_index: u64,
        window: u64,
        bounds: &[u64],
    ) -> Result<Sweep> {
        let n = self.n();
        let mut sweep = Sweep {
            optimality: Report::new("optimality"),
            column_agreement: Report::new("column_agreement"),
            subtuple_infinite: Report::new("subtuple_infinite"),
        };
        if max_index == 0 || max_row == 0 {
            return Ok(sweep);
        }
        for refs in tuples(n, max_row, max_index, n) {
            if refs.iter().any(|r| r.stage.column != refs[0].stage.column) {
                let r = self.check_optimality(&refs, window)?;
                sweep.optimality.absorb(r);
            }
        }
        for m in 0..n as u32 {
            for len in 1..=max_row as usize {
                for chain in index_tuples(len, max_index) {
                    let r = self.check_column_agreement(m, &chain, window, bounds)?;
                    sweep.column_agreement.absorb(r);
                }
            }
        }
        for j in 2..n {
            for refs in tuples(n, max_row, max_index, j) {
                if refs.iter().any(|r| r.stage.column != refs[0].stage.column) {
                    let r = self.check_subtuple_infinite(&refs, window, bounds)?;
                    sweep.subtuple_infinite.absorb(r);
                }
            }
        }
        Ok(sweep)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Sweep {
    pub optimality: Report,
    pub column_agreement: Report,
    pub subtuple_infinite: Report,
}

impl Sweep {
    pub fn pass(&self) -> bool {
        self.optimality.pass && self.column_agreement.pass && self.subtuple_infinite.pass
    }

    pub fn undecided_instances(&self) -> u64 {
        self.optimality.undecided_instances
            + self.column_agreement.undecided_instances
            + self.subtuple_infinite.undecided_instances
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("reports serialize")
    }
}

/// All index tuples of length `len` with entries `< max_index`, in
/// lexicographic order.
pub fn index_tuples(len: usize, max_index: u64) -> Vec<Vec<u64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..max_index).map(move |i| {
                    let mut t = t.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}

/// Every choice of `size` blocks from pairwise distinct partitions with rows
/// `< max_row` and indices `< max_index`, partitions in row-major order.
pub fn tuples(n: usize, max_row: u32, max_index: u64, size: usize) -> Vec<Vec<BlockRef>> {
    let stages: Vec<StageId> = (0..max_row)
        .flat_map(|r| (0..n as u32).map(move |c| StageId::new(r, c)))
        .collect();
    let mut out = Vec::new();
    let mut pick = Vec::new();
    stage_subsets(&stages, size, 0, &mut pick, &mut |chosen: &[StageId]| {
        for idx in index_tuples(chosen.len(), max_index) {
            out.push(
                chosen
                    .iter()
                    .zip(idx)
                    .map(|(&stage, index)| BlockRef { stage, index })
                    .collect(),
            );
        }
    });
    out
}

fn stage_subsets(
    all: &[StageId],
    size: usize,
    start: usize,
    pick: &mut Vec<StageId>,
    emit: &mut impl FnMut(&[StageId]),
) {
    if pick.len() == size {
        emit(pick);
        return;
    }
    for i in start..all.len() {
        pick.push(all[i]);
        stage_subsets(all, size, i + 1, pick, emit);
        pick.pop();
    }
}
