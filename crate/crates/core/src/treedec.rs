//! Finite-depth tree fragments split into `n` nice equivalence relations.
//!
//! A node is a finite sequence of naturals; the fragment materializes the
//! nodes of height `<= depth` whose coordinates are all below `branch`. The
//! coherent family is prefix replacement, and every level is anchored at its
//! all-zero node, so transferring a partition to the successors of `s` just
//! reads the last coordinate: child `s^j` lies in block `i` of `P_{k,m}(s)`
//! iff `j` lies in `a_i^{k,m}`.
//!
//! The class of `t` under `≡_m` is the pair (class of the parent, block of the
//! last coordinate under `P_{p,m}`), `p` being the parent class's label.
//! Labels come from one counter per column: the root has label 0 and new
//! classes are numbered in breadth-first order over the materialized nodes.
//! Nodes outside the fragment get labels on first use, after every
//! materialized level up to their height has been numbered.
//!
//! Block queries that run out of fuel make the answer undecided (`None`);
//! undecided answers are cached like decided ones, so a fragment gives the
//! same answers for its whole lifetime.

use rustc_hash::FxHashMap;
use serde::Serialize;
use serde_json::{json, Value};

use crate::codec::{coordinate, encode_tuple, StageId};
use crate::error::{usage, Error, Result};
use crate::matrix::{BlockRef, MatrixState, Verdict};
use crate::oracle::{Checker, Limits};

pub type Node = Vec<u64>;

/// Numbers searched when locating the last coordinate of a class intersection.
const SEARCH_WINDOW: u64 = 1 << 16;
/// Fuel for one such search, in multiples of the per-query fuel.
const SEARCH_QUERIES: u64 = 64;

/// `ψ_{s,t}(x)`: `t` followed by the part of `x` after `s`.
pub fn shift_map(s: &[u64], t: &[u64], x: &[u64]) -> Result<Node> {
    if s.len() != t.len() {
        return usage("shift_map needs nodes of equal height");
    }
    if !x.starts_with(s) {
        return usage("shift_map argument must extend the source node");
    }
    let mut out = t.to_vec();
    out.extend_from_slice(&x[s.len()..]);
    Ok(out)
}

/// Class label of `node` under the split that uses only row 0 of the matrix:
/// the `m`-th decoded coordinate of every path entry.
pub fn simple_split(n: usize, node: &[u64], m: usize) -> Result<Vec<u64>> {
    if node.is_empty() {
        return usage("simple_split needs a node of height at least 1");
    }
    if m >= n {
        return usage(format!("column {m} out of range for n={n}"));
    }
    Ok(node.iter().map(|&x| coordinate(x, n, m)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TerLabel {
    pub column: usize,
    pub level: usize,
    pub label: u64,
}

/// Materialized members of a class, and nodes whose membership is undecided.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassMembers {
    pub members: Vec<Node>,
    pub undecided: Vec<Node>,
}

/// Members of a shifted class intersection above the first anchor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClaimReport {
    pub members: Vec<Node>,
    pub undecided: Vec<Node>,
    /// `(b, count)`: members whose new coordinates are all below `b`.
    pub growth: Vec<(u64, u64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeVerdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Outcome of comparing the two sides of the rigidity equation at one pair
/// of nodes. Children are given by their last coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeReport {
    pub s: Node,
    pub q: Node,
    pub column: usize,
    /// Children `j` with `s^j` equivalent to `s^0` in every column `< n-1`;
    /// the left side is `{q^j}` for these `j`.
    pub left: Vec<u64>,
    /// Children `j` with `q^j` equivalent to `q^0` in every column `< n-1`.
    pub right: Vec<u64>,
    /// Groups of left-side children sharing one `≡_column` class below `q`.
    pub collisions: Vec<Vec<u64>>,
    pub undecided: u64,
    pub verdict: ProbeVerdict,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TreeViolation {
    pub column: usize,
    pub nodes: Vec<Node>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TreeCheck {
    pub property: String,
    pub instances: u64,
    pub undecided: u64,
    pub violations: Vec<TreeViolation>,
}

impl TreeCheck {
    fn new(property: &str) -> Self {
        TreeCheck {
            property: property.to_string(),
            instances: 0,
            undecided: 0,
            violations: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }

    fn record(&mut self, ok: Option<bool>, column: usize, nodes: &[&[u64]], reason: &str) {
        self.instances += 1;
        match ok {
            Some(true) => {}
            None => self.undecided += 1,
            Some(false) => self.violations.push(TreeViolation {
                column,
                nodes: nodes.iter().map(|n| n.to_vec()).collect(),
                reason: reason.to_string(),
            }),
        }
    }
}

#[derive(Default)]
struct Registry {
    classes: FxHashMap<(u64, u64), u64>,
    next: u64,
}

pub struct TreeFragment<'a> {
    matrix: &'a mut MatrixState,
    depth: usize,
    branch: u64,
    limits: Limits,
    spent: u64,
    registries: Vec<Registry>,
    labels: FxHashMap<(Node, usize), Option<u64>>,
    blocks: FxHashMap<(u64, usize, u64), Option<u64>>,
    pairs: FxHashMap<(Node, Node, usize), Option<bool>>,
    numbered: usize,
}

impl<'a> TreeFragment<'a> {
    /// `limits.fuel` goes to each block query; `limits.pool` caps the total.
    pub fn new(
        matrix: &'a mut MatrixState,
        depth: usize,
        branch: u64,
        limits: Limits,
    ) -> Result<Self> {
        if depth < 1 || branch < 2 {
            return usage("tree fragments need depth >= 1 and branch bound >= 2");
        }
        let n = matrix.n();
        let registries = (0..n)
            .map(|_| Registry {
                next: 1,
                ..Default::default()
            })
            .collect();
        Ok(TreeFragment {
            matrix,
            depth,
            branch,
            limits,
            spent: 0,
            registries,
            labels: FxHashMap::default(),
            blocks: FxHashMap::default(),
            pairs: FxHashMap::default(),
            numbered: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn branch(&self) -> u64 {
        self.branch
    }

    pub fn fuel_spent(&self) -> u64 {
        self.spent
    }

    fn budget(&self) -> u64 {
        match self.limits.pool {
            Some(pool) => self.limits.fuel.min(pool.saturating_sub(self.spent)),
            None => self.limits.fuel,
        }
    }

    /// Materialized nodes of one height, in lexicographic order.
    pub fn level(&self, height: usize) -> Vec<Node> {
        let mut out = vec![Vec::new()];
        for _ in 0..height {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..self.branch).map(move |j| {
                        let mut c = p.clone();
                        c.push(j);
                        c
                    })
                })
                .collect();
        }
        out
    }

    fn check_node(&self, node: &[u64], m: usize) -> Result<()> {
        if m >= self.n() {
            return usage(format!("column {m} out of range for n={}", self.n()));
        }
        if node.len() > self.depth {
            return usage(format!(
                "node of height {} above depth {}",
                node.len(),
                self.depth
            ));
        }
        Ok(())
    }

    // Block of `v` in partition `P_{p,m}`.
    fn block(&mut self, p: u64, m: usize, v: u64) -> Result<Option<u64>> {
        if p == 0 {
            return Ok(Some(coordinate(v, self.n(), m)));
        }
        if let Some(&b) = self.blocks.get(&(p, m, v)) {
            return Ok(b);
        }
        let row = u32::try_from(p).map_err(|_| Error::Overflow("partition row"))?;
        let (verdict, spent) =
            self.matrix
                .block_of_metered(StageId::new(row, m as u32), v, self.budget())?;
        self.spent += spent;
        let b = match verdict {
            Verdict::In(i) => Some(i),
            _ => None,
        };
        self.blocks.insert((p, m, v), b);
        Ok(b)
    }

    // Numbers every materialized class up to `height`, level by level.
    fn number_levels(&mut self, height: usize) -> Result<()> {
        while self.numbered < height.min(self.depth) {
            self.numbered += 1;
            for node in self.level(self.numbered) {
                for m in 0..self.n() {
                    self.assign(&node, m)?;
                }
            }
        }
        Ok(())
    }

    fn assign(&mut self, node: &[u64], m: usize) -> Result<Option<u64>> {
        let Some((&last, parent)) = node.split_last() else {
            return Ok(Some(0));
        };
        if let Some(&l) = self.labels.get(&(node.to_vec(), m)) {
            return Ok(l);
        }
        let label = match self.assign(parent, m)? {
            None => None,
            Some(p) => match self.block(p, m, last)? {
                None => None,
                Some(b) => {
                    let reg = &mut self.registries[m];
                    let next = &mut reg.next;
                    Some(*reg.classes.entry((p, b)).or_insert_with(|| {
                        *next += 1;
                        *next - 1
                    }))
                }
            },
        };
        self.labels.insert((node.to_vec(), m), label);
        Ok(label)
    }

    /// Label of the `≡_m` class of `node`; `None` when a block query on the
    /// way stayed undecided.
    pub fn ter_label(&mut self, node: &[u64], m: usize) -> Result<Option<TerLabel>> {
        self.check_node(node, m)?;
        self.number_levels(node.len())?;
        Ok(self.assign(node, m)?.map(|label| TerLabel {
            column: m,
            level: node.len(),
            label,
        }))
    }

    fn label(&mut self, node: &[u64], m: usize) -> Result<Option<u64>> {
        Ok(self.ter_label(node, m)?.map(|l| l.label))
    }

    /// `s ≡_m t`: the parents are equivalent and the last coordinates share
    /// a block of the partition named by the parents' label.
    pub fn same_class(&mut self, s: &[u64], t: &[u64], m: usize) -> Result<Option<bool>> {
        if s.len() != t.len() {
            return usage("same_class needs nodes of equal height");
        }
        self.check_node(s, m)?;
        if s == t {
            return Ok(Some(true));
        }
        let memo = s.len() < self.depth;
        let key = (s.to_vec(), t.to_vec(), m);
        if memo {
            if let Some(&a) = self.pairs.get(&key) {
                return Ok(a);
            }
        }
        let (ps, pt) = (&s[..s.len() - 1], &t[..t.len() - 1]);
        let answer = match self.same_class(ps, pt, m)? {
            Some(false) => Some(false),
            None => None,
            Some(true) => match self.label(ps, m)? {
                None => None,
                Some(p) => {
                    let a = self.block(p, m, s[s.len() - 1])?;
                    let b = self.block(p, m, t[t.len() - 1])?;
                    a.zip(b).map(|(a, b)| a == b)
                }
            },
        };
        if memo {
            self.pairs.insert(key, answer);
        }
        Ok(answer)
    }

    /// Materialized nodes of the same height equivalent to `node`.
    pub fn class_members(&mut self, node: &[u64], m: usize) -> Result<ClassMembers> {
        self.check_node(node, m)?;
        let mut out = ClassMembers::default();
        for t in self.level(node.len()) {
            match self.same_class(node, &t, m)? {
                Some(true) => out.members.push(t),
                Some(false) => {}
                None => out.undecided.push(t),
            }
        }
        Ok(out)
    }

    /// The unique node `r` with `r ≡_m nodes[m]` for every column `m`.
    ///
    /// The answer may leave the materialized fragment. `None` when a block
    /// query or the search for the last coordinate ran out of fuel.
    pub fn intersect_classes(&mut self, nodes: &[Node]) -> Result<Option<Node>> {
        let n = self.n();
        if nodes.len() != n {
            return usage(format!("intersect_classes needs {n} nodes"));
        }
        let h = nodes[0].len();
        if h == 0 || nodes.iter().any(|t| t.len() != h) {
            return usage("intersect_classes needs nodes of one positive height");
        }
        for t in nodes {
            self.check_node(t, 0)?;
        }
        if h == 1 {
            let tuple: Vec<u64> = (0..n).map(|m| coordinate(nodes[m][0], n, m)).collect();
            return Ok(Some(vec![encode_tuple(&tuple)?]));
        }
        let parents: Vec<Node> = nodes.iter().map(|t| t[..h - 1].to_vec()).collect();
        let Some(mut r) = self.intersect_classes(&parents)? else {
            return Ok(None);
        };
        // Each nodes[m]'s parent shares r's class in column m, so its label
        // names the partition for that column.
        let mut refs = Vec::with_capacity(n);
        for (m, t) in nodes.iter().enumerate() {
            let Some(p) = self.label(&parents[m], m)? else {
                return Ok(None);
            };
            let Some(i) = self.block(p, m, t[h - 1])? else {
                return Ok(None);
            };
            let row = u32::try_from(p).map_err(|_| Error::Overflow("partition row"))?;
            refs.push(BlockRef::new(row, m as u32, i));
        }
        let mut limits = Limits::per_query(self.limits.fuel)
            .with_instance(self.limits.fuel.saturating_mul(SEARCH_QUERIES));
        if let Some(pool) = self.limits.pool {
            limits = limits.with_pool(pool.saturating_sub(self.spent));
        }
        let mut checker = Checker::new(self.matrix, limits);
        let mut found = checker.transcript_witness(&refs, 0, SEARCH_WINDOW)?;
        if found.is_none() {
            found = checker.first_member(&refs, 0, SEARCH_WINDOW)?.0;
        }
        self.spent += checker.fuel_spent();
        Ok(found.map(|v| {
            r.push(v);
            r
        }))
    }

    /// `⋂_i ψ_{s_i,s_0}''(t_i/≡_{columns[i]})` within the fragment: the
    /// extensions `u` of `s_0` with `ψ_{s_0,s_i}(u) ≡ t_i` for every `i`.
    pub fn claim_witnesses(
        &mut self,
        anchors: &[Node],
        targets: &[Node],
        columns: &[usize],
    ) -> Result<ClaimReport> {
        let k = anchors.len();
        if k == 0 || targets.len() != k || columns.len() != k {
            return usage("claim needs equally many anchors, targets and columns, at least one");
        }
        let (hs, ht) = (anchors[0].len(), targets[0].len());
        for i in 0..k {
            self.check_node(&targets[i], columns[i])?;
            if anchors[i].len() != hs || targets[i].len() != ht || ht <= hs {
                return usage("anchors and targets must each share a height, targets higher");
            }
            if !targets[i].starts_with(&anchors[i]) {
                return usage(format!("target {i} does not extend its anchor"));
            }
        }
        for i in 0..k {
            for j in i + 1..k {
                if columns[i] == columns[j]
                    && self.same_class(&anchors[i], &anchors[j], columns[i])? == Some(true)
                {
                    return usage(format!(
                        "anchors {i} and {j} are equivalent in column {}",
                        columns[i]
                    ));
                }
            }
        }
        let mut report = ClaimReport {
            members: Vec::new(),
            undecided: Vec::new(),
            growth: Vec::new(),
        };
        for tail in self.level(ht - hs) {
            let mut u = anchors[0].clone();
            u.extend_from_slice(&tail);
            let mut status = Some(true);
            for i in 0..k {
                let v = shift_map(&anchors[0], &anchors[i], &u)?;
                match self.same_class(&v, &targets[i], columns[i])? {
                    Some(true) => {}
                    Some(false) => {
                        status = Some(false);
                        break;
                    }
                    None => status = None,
                }
            }
            match status {
                Some(true) => report.members.push(u),
                Some(false) => {}
                None => report.undecided.push(u),
            }
        }
        let mut b = 2;
        loop {
            let b_eff = b.min(self.branch);
            let count = report
                .members
                .iter()
                .filter(|u| u[hs..].iter().all(|&c| c < b_eff))
                .count() as u64;
            report.growth.push((b_eff, count));
            if b_eff == self.branch {
                break;
            }
            b *= 2;
        }
        Ok(report)
    }

    /// Checks one instance of the rigidity argument: with `r = s^0`, the set
    /// `ψ_{s,q}''(children of s ∩ ⋂_{i<n-1} r/≡_i)` meets each `≡_l` class of
    /// the children of `q` at most once, while the right-hand side
    /// `children of q ∩ ⋂_{i<n-1} q^0/≡_i` has at least two members.
    pub fn rigidity_probe(&mut self, s: &[u64], q: &[u64], l: usize) -> Result<ProbeReport> {
        let n = self.n();
        if n < 3 {
            return usage("the rigidity probe needs n >= 3");
        }
        if s.len() != q.len() || s.len() >= self.depth {
            return usage("s and q need one height below the fragment depth");
        }
        self.check_node(s, l)?;
        let mut report = ProbeReport {
            s: s.to_vec(),
            q: q.to_vec(),
            column: l,
            left: Vec::new(),
            right: Vec::new(),
            collisions: Vec::new(),
            undecided: 0,
            verdict: ProbeVerdict::Inconclusive,
        };
        match (self.label(s, l)?, self.label(q, l)?) {
            (Some(a), Some(b)) if a == b => return usage("s and q share their class label"),
            (Some(_), Some(_)) => {}
            _ => {
                report.undecided += 1;
                return Ok(report);
            }
        }
        let child = |p: &[u64], j: u64| {
            let mut c = p.to_vec();
            c.push(j);
            c
        };
        let (r, qr) = (child(s, 0), child(q, 0));
        for j in 0..self.branch {
            for (base, anchor, side) in [(s, &r, 0), (q, &qr, 1)] {
                let mut status = Some(true);
                for i in 0..n - 1 {
                    match self.same_class(&child(base, j), anchor, i)? {
                        Some(true) => {}
                        Some(false) => {
                            status = Some(false);
                            break;
                        }
                        None => status = None,
                    }
                }
                match (status, side) {
                    (Some(true), 0) => report.left.push(j),
                    (Some(true), _) => report.right.push(j),
                    (None, _) => report.undecided += 1,
                    _ => {}
                }
            }
        }
        let mut groups: FxHashMap<u64, Vec<u64>> = FxHashMap::default();
        for &j in &report.left {
            match self.label(&child(q, j), l)? {
                Some(label) => groups.entry(label).or_default().push(j),
                None => report.undecided += 1,
            }
        }
        let mut collisions: Vec<Vec<u64>> = groups.into_values().filter(|g| g.len() > 1).collect();
        collisions.sort();
        report.collisions = collisions;
        report.verdict = if !report.collisions.is_empty() {
            ProbeVerdict::Fail
        } else if report.undecided == 0 && report.right.len() >= 2 {
            ProbeVerdict::Pass
        } else {
            ProbeVerdict::Inconclusive
        };
        Ok(report)
    }

    /// Exhaustive checks of the split over every materialized level.
    pub fn check_invariants(&mut self) -> Result<Vec<TreeCheck>> {
        let n = self.n();
        let mut eq = TreeCheck::new("equivalence");
        let mut order = TreeCheck::new("order_compatibility");
        let mut nice = TreeCheck::new("niceness");
        let mut inj = TreeCheck::new("label_injective");
        let mut inv = TreeCheck::new("intersection_inverts");
        for h in 1..=self.depth {
            let nodes = self.level(h);
            for m in 0..n {
                self.check_equivalence(&nodes, m, &mut eq, &mut order)?;
                if h < self.depth {
                    self.check_niceness(&nodes, m, &mut nice)?;
                }
            }
            self.check_product(&nodes, &mut inj, &mut inv)?;
        }
        Ok(vec![eq, order, nice, inj, inv])
    }

    fn check_equivalence(
        &mut self,
        nodes: &[Node],
        m: usize,
        eq: &mut TreeCheck,
        order: &mut TreeCheck,
    ) -> Result<()> {
        let len = nodes.len();
        let mut rel = vec![None; len * len];
        for a in 0..len {
            for b in 0..len {
                rel[a * len + b] = self.same_class(&nodes[a], &nodes[b], m)?;
            }
        }
        let mut parent: Vec<usize> = (0..len).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for a in 0..len {
            eq.record(rel[a * len + a], m, &[&nodes[a]], "not reflexive");
            for b in a + 1..len {
                let (x, y) = (rel[a * len + b], rel[b * len + a]);
                let sym = x.zip(y).map(|(x, y)| x == y);
                eq.record(sym, m, &[&nodes[a], &nodes[b]], "not symmetric");
                if x == Some(true) {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    parent[ra] = rb;
                    if nodes[a].len() > 1 {
                        let h = nodes[a].len() - 1;
                        let up = self.same_class(&nodes[a][..h], &nodes[b][..h], m)?;
                        order.record(
                            up,
                            m,
                            &[&nodes[a], &nodes[b]],
                            "equivalent nodes with inequivalent parents",
                        );
                    }
                }
            }
        }
        // Transitivity: every pair joined through a chain of equivalences is
        // itself equivalent.
        for a in 0..len {
            for b in a + 1..len {
                if find(&mut parent, a) == find(&mut parent, b) {
                    eq.record(
                        rel[a * len + b],
                        m,
                        &[&nodes[a], &nodes[b]],
                        "not transitive",
                    );
                }
            }
        }
        Ok(())
    }

    // Whenever s ≡_m r, every extension t of s satisfies ψ_{s,r}(t) ≡_m t.
    fn check_niceness(&mut self, nodes: &[Node], m: usize, nice: &mut TreeCheck) -> Result<()> {
        let exts: Vec<Node> = (1..=self.depth - nodes[0].len())
            .flat_map(|d| self.level(d))
            .collect();
        for s in nodes {
            for r in nodes {
                if s == r || self.same_class(s, r, m)? != Some(true) {
                    continue;
                }
                for tail in &exts {
                    let mut t = s.clone();
                    t.extend_from_slice(tail);
                    let moved = shift_map(s, r, &t)?;
                    let ok = self.same_class(&moved, &t, m)?;
                    nice.record(ok, m, &[s, r, &t], "shift does not preserve the class");
                }
            }
        }
        Ok(())
    }

    // Label tuples tell nodes apart, and intersecting the classes of any
    // materialized combination of classes lands in all of them.
    fn check_product(
        &mut self,
        nodes: &[Node],
        inj: &mut TreeCheck,
        inv: &mut TreeCheck,
    ) -> Result<()> {
        let n = self.n();
        let mut seen: FxHashMap<Vec<u64>, Node> = FxHashMap::default();
        let mut reps: Vec<Vec<Node>> = vec![Vec::new(); n];
        let mut rep_labels: Vec<Vec<u64>> = vec![Vec::new(); n];
        for t in nodes {
            let mut tuple = Vec::with_capacity(n);
            for m in 0..n {
                match self.label(t, m)? {
                    Some(l) => {
                        if !rep_labels[m].contains(&l) {
                            rep_labels[m].push(l);
                            reps[m].push(t.clone());
                        }
                        tuple.push(l);
                    }
                    None => break,
                }
            }
            if tuple.len() < n {
                inj.record(None, 0, &[t], "");
                continue;
            }
            let ok = match seen.get(&tuple) {
                Some(other) => {
                    inj.record(
                        Some(false),
                        0,
                        &[other, t],
                        "two nodes with one label tuple",
                    );
                    continue;
                }
                None => Some(true),
            };
            inj.record(ok, 0, &[t], "");
            seen.insert(tuple, t.clone());
        }
        let mut combo = vec![0usize; n];
        if reps.iter().any(|r| r.is_empty()) {
            return Ok(());
        }
        loop {
            let pick: Vec<Node> = (0..n).map(|m| reps[m][combo[m]].clone()).collect();
            let ok = match self.intersect_classes(&pick)? {
                None => None,
                Some(r) => {
                    let mut all = Some(true);
                    for (m, t) in pick.iter().enumerate() {
                        match self.same_class(&r, t, m)? {
                            Some(true) => {}
                            Some(false) => {
                                all = Some(false);
                                break;
                            }
                            None => all = None,
                        }
                    }
                    all
                }
            };
            let refs: Vec<&[u64]> = pick.iter().map(|p| p.as_slice()).collect();
            inv.record(ok, 0, &refs, "intersection misses one of the classes");
            let mut m = 0;
            while m < n {
                combo[m] += 1;
                if combo[m] < reps[m].len() {
                    break;
                }
                combo[m] = 0;
                m += 1;
            }
            if m == n {
                return Ok(());
            }
        }
    }

    /// Canonical JSON of the materialized fragment: nodes with their labels,
    /// and per column the classes `(label, parent label, block)`.
    pub fn to_json(&mut self) -> Result<Value> {
        let n = self.n();
        self.number_levels(self.depth)?;
        let mut levels = Vec::new();
        for h in 1..=self.depth {
            let mut rows = Vec::new();
            for t in self.level(h) {
                let labels: Vec<Option<u64>> =
                    (0..n).map(|m| self.labels[&(t.clone(), m)]).collect();
                rows.push(json!({"path": t, "labels": labels}));
            }
            levels.push(json!({"height": h, "nodes": rows}));
        }
        let classes: Vec<Value> = self
            .registries
            .iter()
            .map(|reg| {
                let mut cs: Vec<(u64, u64, u64)> =
                    reg.classes.iter().map(|(&(p, b), &l)| (l, p, b)).collect();
                cs.sort_unstable();
                Value::Array(
                    cs.into_iter()
                        .map(|(l, p, b)| json!({"label": l, "parent": p, "block": b}))
                        .collect(),
                )
            })
            .collect();
        Ok(json!({
            "n": n,
            "depth": self.depth,
            "branch": self.branch,
            "levels": levels,
            "classes": classes,
        }))
    }
}
