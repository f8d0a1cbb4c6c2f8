//! Forwarding decision diagrams.
//!
//! Every diagram lives in an [`FddStore`], which hash-conses nodes so that
//! structural equality coincides with handle equality. Interior nodes test
//! `field = value`; leaves hold sets of actions, each action a finite map of
//! field assignments. Tests ascend along every path under the store's
//! [`FieldOrder`], and the true branch of `f = n` never tests `f` again.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::ast::{Field, Policy, Predicate, Value, NUM_FIELDS};
use crate::interp::Packet;

/// Handle to a node in an [`FddStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fdd(u32);

impl Fdd {
    /// The empty action set, which drops every packet.
    pub const DROP: Fdd = Fdd(0);
    /// The singleton identity action set.
    pub const ID: Fdd = Fdd(1);

    pub fn index(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Fdd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A finite map of field assignments, applied simultaneously.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Action(BTreeMap<Field, Value>);

impl Action {
    pub fn identity() -> Action {
        Action(BTreeMap::new())
    }

    pub fn single(field: Field, value: Value) -> Action {
        Action(BTreeMap::from([(field, value)]))
    }

    pub fn from_pairs<I: IntoIterator<Item = (Field, Value)>>(pairs: I) -> Action {
        Action(pairs.into_iter().collect())
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, field: Field) -> Option<Value> {
        self.0.get(&field).copied()
    }

    pub fn set(&mut self, field: Field, value: Value) {
        self.0.insert(field, value);
    }

    pub fn remove(&mut self, field: Field) -> Option<Value> {
        self.0.remove(&field)
    }

    pub fn without(&self, field: Field) -> Action {
        let mut a = self.clone();
        a.0.remove(&field);
        a
    }

    pub fn iter(&self) -> impl Iterator<Item = (Field, Value)> + '_ {
        self.0.iter().map(|(f, v)| (*f, *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sequential composition: assignments in `later` win.
    pub fn then(&self, later: &Action) -> Action {
        let mut out = self.0.clone();
        out.extend(later.0.iter().map(|(f, v)| (*f, *v)));
        Action(out)
    }

    pub fn apply(&self, pk: &Packet) -> Packet {
        let mut out = *pk;
        for (f, v) in self.iter() {
            out.set(f, v);
        }
        out
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (field, v)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{field}:={v}")?;
        }
        f.write_str("}")
    }
}

pub type ActionSet = BTreeSet<Action>;

pub fn fmt_action_set(s: &ActionSet) -> String {
    let parts: Vec<String> = s.iter().map(|a| a.to_string()).collect();
    format!("{{{}}}", parts.join(", "))
}

/// A test `field = value`.
pub type Test = (Field, Value);

/// Total order on fields used to arrange tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldOrder {
    rank: [u8; NUM_FIELDS],
}

impl Default for FieldOrder {
    /// Declaration order: switch, port, the remaining OpenFlow fields, pc,
    /// vswitch, vport.
    fn default() -> Self {
        let mut rank = [0u8; NUM_FIELDS];
        for (i, f) in Field::ALL.iter().enumerate() {
            rank[f.index()] = i as u8;
        }
        FieldOrder { rank }
    }
}

impl FieldOrder {
    /// Puts `first` at the front, in the given order; every other field keeps
    /// its default relative position after them.
    pub fn with_prefix(first: &[Field]) -> FieldOrder {
        let mut seq: Vec<Field> = Vec::with_capacity(NUM_FIELDS);
        for f in first {
            if !seq.contains(f) {
                seq.push(*f);
            }
        }
        for f in Field::ALL {
            if !seq.contains(&f) {
                seq.push(f);
            }
        }
        let mut rank = [0u8; NUM_FIELDS];
        for (i, f) in seq.iter().enumerate() {
            rank[f.index()] = i as u8;
        }
        FieldOrder { rank }
    }

    /// Parses a comma-separated field list, e.g. `ip4Dst,ipProto`.
    pub fn parse(text: &str) -> Result<FieldOrder, crate::ast::UnknownField> {
        let fields = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Field>, _>>()?;
        Ok(FieldOrder::with_prefix(&fields))
    }

    pub fn rank(&self, f: Field) -> u8 {
        self.rank[f.index()]
    }

    pub fn fields(&self) -> Vec<Field> {
        let mut fs = Field::ALL.to_vec();
        fs.sort_by_key(|f| self.rank(*f));
        fs
    }

    pub fn cmp_fields(&self, a: Field, b: Field) -> Ordering {
        self.rank(a).cmp(&self.rank(b))
    }

    pub fn cmp_tests(&self, a: Test, b: Test) -> Ordering {
        (self.rank(a.0), a.1).cmp(&(self.rank(b.0), b.1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Node {
    Leaf(ActionSet),
    Branch { test: Test, hi: Fdd, lo: Fdd },
}

/// Read-only view of a node.
#[derive(Clone, Copy, Debug)]
pub enum NodeView<'a> {
    Leaf(&'a ActionSet),
    Branch { test: Test, hi: Fdd, lo: Fdd },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FddError {
    #[error("negation applied to a diagram with a non-identity action {0}")]
    InvalidNegation(String),
    #[error("star did not converge within {0} iterations")]
    StarDiverged(usize),
    #[error("test {field}={value} is out of order with respect to its children")]
    OrderViolation { field: Field, value: Value },
}

pub const STAR_ITERATION_CAP: usize = 10_000;

/// Hash-consing store with memoised diagram operations.
pub struct FddStore {
    order: FieldOrder,
    nodes: Vec<Node>,
    unique: HashMap<Node, Fdd>,
    union_memo: HashMap<(Fdd, Fdd), Fdd>,
    seq_memo: HashMap<(Fdd, Fdd), Fdd>,
    seq_act_memo: HashMap<(Action, Fdd), Fdd>,
    restrict_memo: HashMap<(Test, bool, Fdd), Fdd>,
    negate_memo: HashMap<Fdd, Fdd>,
    star_memo: HashMap<Fdd, Fdd>,
    cofactor_memo: HashMap<(Test, Fdd), Fdd>,
    star_cap: usize,
}

impl Default for FddStore {
    fn default() -> Self {
        FddStore::new(FieldOrder::default())
    }
}

impl fmt::Debug for FddStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FddStore")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl FddStore {
    pub fn new(order: FieldOrder) -> FddStore {
        let mut store = FddStore {
            order,
            nodes: Vec::new(),
            unique: HashMap::new(),
            union_memo: HashMap::new(),
            seq_memo: HashMap::new(),
            seq_act_memo: HashMap::new(),
            restrict_memo: HashMap::new(),
            negate_memo: HashMap::new(),
            star_memo: HashMap::new(),
            cofactor_memo: HashMap::new(),
            star_cap: STAR_ITERATION_CAP,
        };
        let drop = store.intern(Node::Leaf(ActionSet::new()));
        let id = store.intern(Node::Leaf(ActionSet::from([Action::identity()])));
        debug_assert_eq!((drop, id), (Fdd::DROP, Fdd::ID));
        store
    }

    pub fn order(&self) -> &FieldOrder {
        &self.order
    }

    pub fn set_star_cap(&mut self, cap: usize) {
        self.star_cap = cap;
    }

    /// Total number of interned nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn intern(&mut self, node: Node) -> Fdd {
        if let Some(&d) = self.unique.get(&node) {
            return d;
        }
        let d = Fdd(self.nodes.len() as u32);
        self.nodes.push(node.clone());
        self.unique.insert(node, d);
        d
    }

    pub fn view(&self, d: Fdd) -> NodeView<'_> {
        match &self.nodes[d.0 as usize] {
            Node::Leaf(s) => NodeView::Leaf(s),
            Node::Branch { test, hi, lo } => NodeView::Branch { test: *test, hi: *hi, lo: *lo },
        }
    }

    pub fn leaf_actions(&self, d: Fdd) -> Option<&ActionSet> {
        match &self.nodes[d.0 as usize] {
            Node::Leaf(s) => Some(s),
            Node::Branch { .. } => None,
        }
    }

    pub fn is_leaf(&self, d: Fdd) -> bool {
        matches!(self.nodes[d.0 as usize], Node::Leaf(_))
    }

    fn root(&self, d: Fdd) -> Option<Test> {
        match &self.nodes[d.0 as usize] {
            Node::Leaf(_) => None,
            Node::Branch { test, .. } => Some(*test),
        }
    }

    fn children(&self, d: Fdd) -> (Fdd, Fdd) {
        match &self.nodes[d.0 as usize] {
            Node::Branch { hi, lo, .. } => (*hi, *lo),
            Node::Leaf(_) => (d, d),
        }
    }

    pub fn leaf(&mut self, actions: ActionSet) -> Fdd {
        self.intern(Node::Leaf(actions))
    }

    pub fn action(&mut self, a: Action) -> Fdd {
        self.leaf(ActionSet::from([a]))
    }

    pub fn modify(&mut self, field: Field, value: Value) -> Fdd {
        self.action(Action::single(field, value))
    }

    pub fn test(&mut self, field: Field, value: Value) -> Fdd {
        self.mk((field, value), Fdd::ID, Fdd::DROP)
    }

    /// Smart constructor without order checks; collapses equal children.
    fn mk(&mut self, test: Test, hi: Fdd, lo: Fdd) -> Fdd {
        if hi == lo {
            return lo;
        }
        debug_assert!(self.branch_ok(test, hi, lo), "out-of-order branch on {test:?}");
        self.intern(Node::Branch { test, hi, lo })
    }

    fn branch_ok(&self, test: Test, hi: Fdd, lo: Fdd) -> bool {
        let hi_ok = match self.root(hi) {
            None => true,
            Some(t) => t.0 != test.0 && self.order.cmp_fields(test.0, t.0) == Ordering::Less,
        };
        let lo_ok = match self.root(lo) {
            None => true,
            Some(t) => self.order.cmp_tests(test, t) == Ordering::Less,
        };
        hi_ok && lo_ok
    }

    /// Checked branch constructor. Returns `lo` when both children coincide.
    pub fn branch(&mut self, test: Test, hi: Fdd, lo: Fdd) -> Result<Fdd, FddError> {
        if hi == lo {
            return Ok(lo);
        }
        if !self.branch_ok(test, hi, lo) {
            return Err(FddError::OrderViolation { field: test.0, value: test.1 });
        }
        Ok(self.intern(Node::Branch { test, hi, lo }))
    }

    /// Interns a branch with no checks at all. Intended for building
    /// malformed diagrams in tests of [`FddStore::check_wf`].
    pub fn raw_branch(&mut self, test: Test, hi: Fdd, lo: Fdd) -> Fdd {
        self.intern(Node::Branch { test, hi, lo })
    }

    // -- union ------------------------------------------------------------

    pub fn union(&mut self, a: Fdd, b: Fdd) -> Fdd {
        if a == b || b == Fdd::DROP {
            return a;
        }
        if a == Fdd::DROP {
            return b;
        }
        let key = if a < b { (a, b) } else { (b, a) };
        if let Some(&r) = self.union_memo.get(&key) {
            return r;
        }
        let r = match (self.root(a), self.root(b)) {
            (None, None) => {
                let mut s = self.leaf_actions(a).unwrap().clone();
                s.extend(self.leaf_actions(b).unwrap().iter().cloned());
                self.leaf(s)
            }
            (ta, tb) => {
                let t = match (ta, tb) {
                    (Some(x), Some(y)) => {
                        if self.order.cmp_tests(x, y) == Ordering::Greater {
                            y
                        } else {
                            x
                        }
                    }
                    (Some(x), None) | (None, Some(x)) => x,
                    (None, None) => unreachable!(),
                };
                let (ah, al) = self.split(a, t);
                let (bh, bl) = self.split(b, t);
                let hi = self.union(ah, bh);
                let lo = self.union(al, bl);
                self.mk(t, hi, lo)
            }
        };
        self.union_memo.insert(key, r);
        r
    }

    /// Cofactors of `d` with respect to a test no greater than its root.
    fn split(&self, d: Fdd, t: Test) -> (Fdd, Fdd) {
        match self.root(d) {
            Some(r) if r == t => self.children(d),
            Some(r) if r.0 == t.0 => {
                // Same field, larger value: false whenever `t` holds.
                let mut x = d;
                while let Some(rx) = self.root(x) {
                    if rx.0 != t.0 {
                        break;
                    }
                    x = self.children(x).1;
                }
                (x, d)
            }
            _ => (d, d),
        }
    }

    pub fn union_all<I: IntoIterator<Item = Fdd>>(&mut self, items: I) -> Fdd {
        let mut v: Vec<Fdd> = items.into_iter().collect();
        if v.is_empty() {
            return Fdd::DROP;
        }
        while v.len() > 1 {
            let mut next = Vec::with_capacity(v.len().div_ceil(2));
            for pair in v.chunks(2) {
                next.push(if pair.len() == 2 {
                    self.union(pair[0], pair[1])
                } else {
                    pair[0]
                });
            }
            v = next;
        }
        v[0]
    }

    // -- sequence ---------------------------------------------------------

    pub fn seq(&mut self, a: Fdd, b: Fdd) -> Fdd {
        if a == Fdd::DROP || b == Fdd::DROP {
            return Fdd::DROP;
        }
        if a == Fdd::ID {
            return b;
        }
        if b == Fdd::ID {
            return a;
        }
        if let Some(&r) = self.seq_memo.get(&(a, b)) {
            return r;
        }
        let r = match self.nodes[a.0 as usize].clone() {
            Node::Leaf(acts) => {
                let parts: Vec<Fdd> = acts.iter().map(|act| self.seq_action(act, b)).collect();
                self.union_all(parts)
            }
            Node::Branch { test, hi, lo } => {
                let x = self.seq(hi, b);
                let y = self.seq(lo, b);
                let x = self.restrict(test, true, x);
                let y = self.restrict(test, false, y);
                self.union(x, y)
            }
        };
        self.seq_memo.insert((a, b), r);
        r
    }

    fn seq_action(&mut self, act: &Action, d: Fdd) -> Fdd {
        if act.is_identity() || d == Fdd::DROP {
            return d;
        }
        let key = (act.clone(), d);
        if let Some(&r) = self.seq_act_memo.get(&key) {
            return r;
        }
        let r = match self.nodes[d.0 as usize].clone() {
            Node::Leaf(acts) => {
                let s: ActionSet = acts.iter().map(|b| act.then(b)).collect();
                self.leaf(s)
            }
            Node::Branch { test: (f, n), hi, lo } => match act.get(f) {
                Some(v) if v == n => self.seq_action(act, hi),
                Some(_) => self.seq_action(act, lo),
                None => {
                    let h = self.seq_action(act, hi);
                    let l = self.seq_action(act, lo);
                    self.mk((f, n), h, l)
                }
            },
        };
        self.seq_act_memo.insert(key, r);
        r
    }

    // -- restriction ------------------------------------------------------

    /// `sign = true` keeps `d` where the test holds and drops elsewhere;
    /// `sign = false` does the opposite.
    pub fn restrict(&mut self, t: Test, sign: bool, d: Fdd) -> Fdd {
        if d == Fdd::DROP {
            return d;
        }
        if let Some(&r) = self.restrict_memo.get(&(t, sign, d)) {
            return r;
        }
        let r = if sign { self.restrict_pos(t, d) } else { self.restrict_neg(t, d) };
        self.restrict_memo.insert((t, sign, d), r);
        r
    }

    fn restrict_pos(&mut self, t: Test, d: Fdd) -> Fdd {
        let Some(t1) = self.root(d) else {
            return self.mk(t, d, Fdd::DROP);
        };
        let (hi, lo) = self.children(d);
        if t1 == t {
            self.mk(t, hi, Fdd::DROP)
        } else if t1.0 == t.0 {
            self.restrict(t, true, lo)
        } else if self.order.cmp_fields(t.0, t1.0) == Ordering::Less {
            self.mk(t, d, Fdd::DROP)
        } else {
            let h = self.restrict(t, true, hi);
            let l = self.restrict(t, true, lo);
            self.mk(t1, h, l)
        }
    }

    fn restrict_neg(&mut self, t: Test, d: Fdd) -> Fdd {
        let Some(t1) = self.root(d) else {
            return self.mk(t, Fdd::DROP, d);
        };
        let (hi, lo) = self.children(d);
        if t1 == t {
            self.mk(t, Fdd::DROP, lo)
        } else if t1.0 == t.0 {
            if t1.1 < t.1 {
                // On the true branch of f = n1 the field cannot equal n.
                let l = self.restrict(t, false, lo);
                self.mk(t1, hi, l)
            } else {
                self.mk(t, Fdd::DROP, d)
            }
        } else if self.order.cmp_fields(t.0, t1.0) == Ordering::Less {
            self.mk(t, Fdd::DROP, d)
        } else {
            let h = self.restrict(t, false, hi);
            let l = self.restrict(t, false, lo);
            self.mk(t1, h, l)
        }
    }

    /// `if t then x else y`, for arbitrary diagrams.
    pub fn ite(&mut self, t: Test, x: Fdd, y: Fdd) -> Fdd {
        let a = self.restrict(t, true, x);
        let b = self.restrict(t, false, y);
        self.union(a, b)
    }

    // -- negation and star ------------------------------------------------

    pub fn negate(&mut self, d: Fdd) -> Result<Fdd, FddError> {
        if let Some(&r) = self.negate_memo.get(&d) {
            return Ok(r);
        }
        let r = match self.nodes[d.0 as usize].clone() {
            Node::Leaf(acts) => {
                if acts.is_empty() {
                    Fdd::ID
                } else if acts.iter().all(Action::is_identity) {
                    Fdd::DROP
                } else {
                    return Err(FddError::InvalidNegation(fmt_action_set(&acts)));
                }
            }
            Node::Branch { test, hi, lo } => {
                let h = self.negate(hi)?;
                let l = self.negate(lo)?;
                self.mk(test, h, l)
            }
        };
        self.negate_memo.insert(d, r);
        Ok(r)
    }

    pub fn star(&mut self, d: Fdd) -> Result<Fdd, FddError> {
        if d == Fdd::DROP || d == Fdd::ID {
            return Ok(Fdd::ID);
        }
        if let Some(&r) = self.star_memo.get(&d) {
            return Ok(r);
        }
        let mut x = Fdd::ID;
        for _ in 0..self.star_cap {
            let step = self.seq(d, x);
            let next = self.union(Fdd::ID, step);
            if next == x {
                self.star_memo.insert(d, x);
                return Ok(x);
            }
            x = next;
        }
        Err(FddError::StarDiverged(self.star_cap))
    }

    // -- derived operations -----------------------------------------------

    /// Partial evaluation under `field = value`: every test on `field` is
    /// decided and removed.
    pub fn specialize(&mut self, d: Fdd, field: Field, value: Value) -> Fdd {
        let Some(t) = self.root(d) else {
            return d;
        };
        if let Some(&r) = self.cofactor_memo.get(&((field, value), d)) {
            return r;
        }
        let (hi, lo) = self.children(d);
        let r = if t.0 == field {
            if t.1 == value {
                self.specialize(hi, field, value)
            } else {
                self.specialize(lo, field, value)
            }
        } else {
            let h = self.specialize(hi, field, value);
            let l = self.specialize(lo, field, value);
            self.mk(t, h, l)
        };
        self.cofactor_memo.insert(((field, value), d), r);
        r
    }

    /// Rewrites every leaf; the branch structure is kept and re-reduced.
    pub fn map_leaves<F>(&mut self, d: Fdd, mut f: F) -> Fdd
    where
        F: FnMut(&ActionSet) -> ActionSet,
    {
        let mut memo = HashMap::new();
        self.map_leaves_rec(d, &mut f, &mut memo)
    }

    fn map_leaves_rec<F>(&mut self, d: Fdd, f: &mut F, memo: &mut HashMap<Fdd, Fdd>) -> Fdd
    where
        F: FnMut(&ActionSet) -> ActionSet,
    {
        if let Some(&r) = memo.get(&d) {
            return r;
        }
        let r = match self.nodes[d.0 as usize].clone() {
            Node::Leaf(acts) => {
                let s = f(&acts);
                self.leaf(s)
            }
            Node::Branch { test, hi, lo } => {
                let h = self.map_leaves_rec(hi, f, memo);
                let l = self.map_leaves_rec(lo, f, memo);
                self.mk(test, h, l)
            }
        };
        memo.insert(d, r);
        r
    }

    // -- inspection -------------------------------------------------------

    pub fn eval(&self, d: Fdd, pk: &Packet) -> BTreeSet<Packet> {
        self.eval_leaf(d, pk).iter().map(|a| a.apply(pk)).collect()
    }

    /// The leaf reached by `pk`.
    pub fn eval_leaf(&self, d: Fdd, pk: &Packet) -> &ActionSet {
        let mut x = d;
        loop {
            match &self.nodes[x.0 as usize] {
                Node::Leaf(s) => return s,
                Node::Branch { test, hi, lo } => {
                    x = if pk.get(test.0) == test.1 { *hi } else { *lo };
                }
            }
        }
    }

    /// Well-formedness per the context rules: a test must follow the last
    /// test on the path either on a strictly smaller field, or on the same
    /// field with a smaller value taken on its false branch.
    pub fn check_wf(&self, d: Fdd) -> bool {
        let mut seen = HashSet::new();
        self.wf_rec(d, None, &mut seen)
    }

    fn wf_rec(&self, d: Fdd, last: Option<(Test, bool)>, seen: &mut HashSet<(Fdd, Option<(Test, bool)>)>) -> bool {
        if !seen.insert((d, last)) {
            return true;
        }
        match &self.nodes[d.0 as usize] {
            Node::Leaf(_) => true,
            Node::Branch { test, hi, lo } => {
                let ok = match last {
                    None => true,
                    Some(((f1, n1), b1)) => {
                        if f1 == test.0 {
                            !b1 && n1 < test.1
                        } else {
                            self.order.cmp_fields(f1, test.0) == Ordering::Less
                        }
                    }
                };
                ok && self.wf_rec(*hi, Some((*test, true)), seen)
                    && self.wf_rec(*lo, Some((*test, false)), seen)
            }
        }
    }

    /// No branch has two identical children.
    pub fn is_reduced(&self, d: Fdd) -> bool {
        self.reachable(d).into_iter().all(|x| match &self.nodes[x.0 as usize] {
            Node::Branch { hi, lo, .. } => hi != lo,
            Node::Leaf(_) => true,
        })
    }

    /// Distinct nodes reachable from `d`, in ascending handle order.
    pub fn reachable(&self, d: Fdd) -> Vec<Fdd> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![d];
        while let Some(x) = stack.pop() {
            if !seen.insert(x) {
                continue;
            }
            if let Node::Branch { hi, lo, .. } = &self.nodes[x.0 as usize] {
                stack.push(*hi);
                stack.push(*lo);
            }
        }
        seen.into_iter().collect()
    }

    /// Node count of the diagram rooted at `d`.
    pub fn size(&self, d: Fdd) -> usize {
        self.reachable(d).len()
    }

    /// Fields tested anywhere in `d`.
    pub fn tested_fields(&self, d: Fdd) -> BTreeSet<Field> {
        self.reachable(d)
            .into_iter()
            .filter_map(|x| self.root(x).map(|t| t.0))
            .collect()
    }

    /// Fields assigned by any leaf action in `d`.
    pub fn written_fields(&self, d: Fdd) -> BTreeSet<Field> {
        let mut out = BTreeSet::new();
        for x in self.reachable(d) {
            if let Node::Leaf(s) = &self.nodes[x.0 as usize] {
                for a in s {
                    out.extend(a.iter().map(|(f, _)| f));
                }
            }
        }
        out
    }

    /// Root-to-leaf paths, true branches first. Each path lists the tests
    /// taken with their outcomes.
    pub fn paths(&self, d: Fdd) -> Vec<(Vec<(Test, bool)>, Fdd)> {
        let mut out = Vec::new();
        let mut prefix = Vec::new();
        self.paths_rec(d, &mut prefix, &mut out);
        out
    }

    fn paths_rec(&self, d: Fdd, prefix: &mut Vec<(Test, bool)>, out: &mut Vec<(Vec<(Test, bool)>, Fdd)>) {
        match &self.nodes[d.0 as usize] {
            Node::Leaf(_) => out.push((prefix.clone(), d)),
            Node::Branch { test, hi, lo } => {
                prefix.push((*test, true));
                self.paths_rec(*hi, prefix, out);
                prefix.pop();
                prefix.push((*test, false));
                self.paths_rec(*lo, prefix, out);
                prefix.pop();
            }
        }
    }

    /// Deterministic text dump: one line per node, children before parents.
    pub fn dump(&self, d: Fdd) -> String {
        let mut s = String::new();
        for x in self.reachable(d) {
            match &self.nodes[x.0 as usize] {
                Node::Leaf(acts) => {
                    let _ = writeln!(s, "{x} = leaf {}", fmt_action_set(acts));
                }
                Node::Branch { test, hi, lo } => {
                    let _ = writeln!(s, "{x} = {}={} ? {hi} : {lo}", test.0, test.1);
                }
            }
        }
        let _ = writeln!(s, "root {d}");
        s
    }

    /// Reads a diagram back as a policy: `(t; hi) + (not t; lo)` at branches
    /// and a union of modification sequences at leaves.
    pub fn to_policy(&self, d: Fdd) -> Policy {
        let mut memo: HashMap<Fdd, Policy> = HashMap::new();
        self.to_policy_rec(d, &mut memo)
    }

    fn to_policy_rec(&self, d: Fdd, memo: &mut HashMap<Fdd, Policy>) -> Policy {
        if let Some(p) = memo.get(&d) {
            return p.clone();
        }
        let p = match &self.nodes[d.0 as usize] {
            Node::Leaf(acts) => Policy::union_all(acts.iter().map(|a| {
                Policy::seq_all(a.iter().map(|(f, v)| Policy::modify(f, v)))
            })),
            Node::Branch { test, hi, lo } => {
                let h = self.to_policy_rec(*hi, memo);
                let l = self.to_policy_rec(*lo, memo);
                let pos = seq_guard(Predicate::test(test.0, test.1), h);
                let neg = seq_guard(Predicate::not(Predicate::test(test.0, test.1)), l);
                match (pos.is_drop(), neg.is_drop()) {
                    (true, _) => neg,
                    (_, true) => pos,
                    _ => Policy::union(pos, neg),
                }
            }
        };
        memo.insert(d, p.clone());
        p
    }
}

fn seq_guard(a: Predicate, p: Policy) -> Policy {
    if p.is_drop() {
        p
    } else if p.is_id() {
        Policy::Filter(a)
    } else {
        Policy::seq(Policy::Filter(a), p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pk(pairs: &[(Field, Value)]) -> Packet {
        Packet::from_pairs(pairs.iter().copied())
    }

    /// All packets over fields `fs` with values `0..n`.
    fn domain(fs: &[Field], n: Value) -> Vec<Packet> {
        let mut out = vec![Packet::default()];
        for &f in fs {
            out = out
                .into_iter()
                .flat_map(|p| (0..n).map(move |v| p.with(f, v)))
                .collect();
        }
        out
    }

    #[test]
    fn branch_with_equal_children_collapses() {
        let mut s = FddStore::default();
        let d = s.modify(Field::Port, 1);
        assert_eq!(s.branch((Field::Vlan, 1), d, d).unwrap(), d);
        let a = s.branch((Field::Vlan, 1), d, Fdd::DROP).unwrap();
        let b = s.branch((Field::Vlan, 1), d, Fdd::DROP).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.size(a), 3);
    }

    #[test]
    fn branch_rejects_out_of_order_tests() {
        let mut s = FddStore::default();
        let inner = s.test(Field::Switch, 1);
        assert!(s.branch((Field::Port, 1), inner, Fdd::DROP).is_err());
        let same = s.test(Field::Port, 2);
        assert!(s.branch((Field::Port, 1), same, Fdd::DROP).is_err());
        assert!(s.branch((Field::Port, 1), Fdd::DROP, same).is_ok());
    }

    #[test]
    fn leaf_union_and_drop_unit() {
        let mut s = FddStore::default();
        let a = s.modify(Field::Port, 1);
        let b = s.modify(Field::Port, 2);
        let u = s.union(a, b);
        assert_eq!(s.leaf_actions(u).unwrap().len(), 2);
        assert_eq!(s.union(a, Fdd::DROP), a);
    }

    #[test]
    fn seq_resolves_tests_against_actions() {
        let mut s = FddStore::default();
        let m = s.modify(Field::Port, 2);
        let t = s.test(Field::Port, 2);
        assert_eq!(s.seq(m, t), m);
        assert_eq!(s.seq(Fdd::ID, t), t);
        let t3 = s.test(Field::Port, 3);
        assert_eq!(s.seq(m, t3), Fdd::DROP);
    }

    #[test]
    fn restrict_examples() {
        let mut s = FddStore::default();
        let a = s.modify(Field::Vlan, 7);
        let r = s.restrict((Field::Port, 1), true, a);
        assert_eq!(r, s.branch((Field::Port, 1), a, Fdd::DROP).unwrap());
        let b = s.modify(Field::Vlan, 8);
        let d = s.branch((Field::Port, 1), a, b).unwrap();
        let r = s.restrict((Field::Port, 1), true, d);
        assert_eq!(r, s.branch((Field::Port, 1), a, Fdd::DROP).unwrap());
    }

    #[test]
    fn negative_restrict_keeps_sibling_values() {
        let mut s = FddStore::default();
        let a = s.modify(Field::Vlan, 1);
        let b = s.modify(Field::Vlan, 2);
        let d = s.branch((Field::Port, 1), a, b).unwrap();
        let r = s.restrict((Field::Port, 2), false, d);
        for p in domain(&[Field::Port], 4) {
            let expect = if p.get(Field::Port) == 2 { BTreeSet::new() } else { s.eval(d, &p) };
            assert_eq!(s.eval(r, &p), expect);
        }
        assert!(s.check_wf(r));
        // The port=1 branch survives untouched.
        assert_eq!(s.eval(r, &pk(&[(Field::Port, 1)])).len(), 1);
    }

    #[test]
    fn negation_swaps_leaves() {
        let mut s = FddStore::default();
        assert_eq!(s.negate(Fdd::DROP).unwrap(), Fdd::ID);
        let t = s.test(Field::Port, 1);
        let n = s.negate(t).unwrap();
        assert_eq!(s.negate(n).unwrap(), t);
        let m = s.modify(Field::Port, 1);
        assert!(matches!(s.negate(m), Err(FddError::InvalidNegation(_))));
    }

    #[test]
    fn star_constants() {
        let mut s = FddStore::default();
        assert_eq!(s.star(Fdd::DROP).unwrap(), Fdd::ID);
        assert_eq!(s.star(Fdd::ID).unwrap(), Fdd::ID);
    }

    #[test]
    fn star_of_port_rewrite() {
        let mut s = FddStore::default();
        let t = s.test(Field::Port, 1);
        let m = s.modify(Field::Port, 2);
        let body = s.seq(t, m);
        let st = s.star(body).unwrap();
        for p in domain(&[Field::Port], 4) {
            let mut expect = BTreeSet::from([p]);
            if p.get(Field::Port) == 1 {
                expect.insert(p.with(Field::Port, 2));
            }
            assert_eq!(s.eval(st, &p), expect);
        }
    }

    #[test]
    fn check_wf_rejects_bad_orders() {
        let mut s = FddStore::new(FieldOrder::with_prefix(&[Field::IpProto, Field::Ip4Dst]));
        let inner = s.raw_branch((Field::IpProto, 80), Fdd::ID, Fdd::DROP);
        let bad = s.raw_branch((Field::Ip4Dst, 1), inner, Fdd::DROP);
        assert!(!s.check_wf(bad));
        let again = s.raw_branch((Field::Port, 2), Fdd::ID, Fdd::DROP);
        let retest = s.raw_branch((Field::Port, 1), again, Fdd::DROP);
        assert!(!s.check_wf(retest));
        let ok = s.raw_branch((Field::Port, 1), Fdd::DROP, again);
        assert!(s.check_wf(ok));
    }

    #[test]
    fn field_order_parsing() {
        let o = FieldOrder::parse("ip4Dst, ipProto").unwrap();
        assert_eq!(o.fields()[0], Field::Ip4Dst);
        assert_eq!(o.fields()[1], Field::IpProto);
        assert_eq!(o.fields()[2], Field::Switch);
        assert!(FieldOrder::parse("bogus").is_err());
        let d = FieldOrder::default();
        assert_eq!(d.fields(), Field::ALL.to_vec());
    }

    #[test]
    fn specialize_decides_switch_tests() {
        let mut s = FddStore::default();
        let a = s.modify(Field::Port, 1);
        let b = s.modify(Field::Port, 2);
        let d = s.branch((Field::Switch, 1), a, b).unwrap();
        assert_eq!(s.specialize(d, Field::Switch, 1), a);
        assert_eq!(s.specialize(d, Field::Switch, 5), b);
    }

    #[test]
    fn dump_is_deterministic() {
        let mut s = FddStore::default();
        let t = s.test(Field::Port, 1);
        let text = s.dump(t);
        assert!(text.contains("port=1 ? n1 : n0"));
        assert_eq!(text, s.dump(t));
    }
}
