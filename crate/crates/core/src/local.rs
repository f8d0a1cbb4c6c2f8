//! Local compilation: dup-free programs to diagrams, diagrams to
//! prioritized flow tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::ast::{self, Field, Policy, Predicate, Value};
use crate::fdd::{Action, ActionSet, Fdd, FddError, FddStore, NodeView, Test};
use crate::interp::Packet;

pub const TOP_PRIORITY: u32 = 65_535;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowRule {
    pub priority: u32,
    /// Exact-match pattern; absent fields are wildcards.
    pub pattern: Vec<(Field, Value)>,
    /// One output packet per action; empty means drop.
    pub actions: Vec<Action>,
}

impl FlowRule {
    pub fn matches(&self, pk: &Packet) -> bool {
        self.pattern.iter().all(|(f, v)| pk.get(*f) == *v)
    }

    pub fn is_catch_all(&self) -> bool {
        self.pattern.is_empty()
    }

    pub fn mentions(&self, field: Field) -> bool {
        self.pattern.iter().any(|(f, _)| *f == field)
            || self.actions.iter().any(|a| a.get(field).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTable {
    pub switch: Value,
    /// Highest priority first.
    pub rules: Vec<FlowRule>,
}

impl FlowTable {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn mentions(&self, field: Field) -> bool {
        self.rules.iter().any(|r| r.mentions(field))
    }

    /// Renames `from` to `to` in every pattern and action.
    pub fn rename_field(&mut self, from: Field, to: Field) {
        for r in &mut self.rules {
            for (f, _) in &mut r.pattern {
                if *f == from {
                    *f = to;
                }
            }
            for a in &mut r.actions {
                if let Some(v) = a.remove(from) {
                    a.set(to, v);
                }
            }
        }
    }

    pub fn to_json(&self) -> Json {
        let rules: Vec<Json> = self
            .rules
            .iter()
            .map(|r| {
                let mut m = Map::new();
                for (f, v) in &r.pattern {
                    m.insert(f.name().to_string(), json!(v));
                }
                let actions: Vec<Json> = r
                    .actions
                    .iter()
                    .map(|a| Json::Array(a.iter().map(|(f, v)| json!({ f.name(): v })).collect()))
                    .collect();
                json!({"priority": r.priority, "match": Json::Object(m), "actions": actions})
            })
            .collect();
        json!({"switch": self.switch, "rules": rules})
    }

    pub fn from_json(j: &Json) -> Result<FlowTable, String> {
        let switch = j["switch"].as_u64().ok_or("table needs a numeric `switch`")?;
        let mut rules = Vec::new();
        for r in j["rules"].as_array().ok_or("table needs a `rules` array")? {
            let priority = r["priority"].as_u64().ok_or("rule needs a `priority`")? as u32;
            let mut pattern = Vec::new();
            for (k, v) in r["match"].as_object().ok_or("rule needs a `match` object")? {
                let f: Field = k.parse().map_err(|e: ast::UnknownField| e.to_string())?;
                pattern.push((f, v.as_u64().ok_or("match values must be naturals")?));
            }
            let mut actions = Vec::new();
            for a in r["actions"].as_array().ok_or("rule needs an `actions` array")? {
                let mut act = Action::identity();
                for m in a.as_array().ok_or("each action is a list of modifications")? {
                    for (k, v) in m.as_object().ok_or("modifications are objects")? {
                        let f: Field = k.parse().map_err(|e: ast::UnknownField| e.to_string())?;
                        act.set(f, v.as_u64().ok_or("modification values must be naturals")?);
                    }
                }
                actions.push(act);
            }
            rules.push(FlowRule { priority, pattern, actions });
        }
        Ok(FlowTable { switch, rules })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocalError {
    #[error("program is not local: {}", .0.join("; "))]
    NonLocal(Vec<String>),
    #[error(transparent)]
    Fdd(#[from] FddError),
    #[error("flow tables cannot match on {0}")]
    UnsupportedMatch(Field),
}

/// Compiles a local program. Reserved fields are rejected; use
/// [`compile_policy`] to compile compiler-generated programs that use them.
pub fn compile_local(store: &mut FddStore, p: &Policy) -> Result<Fdd, LocalError> {
    let check = ast::validate_local(p);
    if !check.ok {
        return Err(LocalError::NonLocal(check.diagnostics));
    }
    compile_policy(store, p)
}

/// Compiles any dup-free program, reserved fields included.
pub fn compile_policy(store: &mut FddStore, p: &Policy) -> Result<Fdd, LocalError> {
    Ok(match p {
        Policy::Filter(a) => compile_pred(store, a)?,
        Policy::Mod(f, v) => store.modify(*f, *v),
        Policy::Union(x, y) => {
            // Flatten nested unions and combine them pairwise to keep the
            // intermediate diagrams small.
            let mut parts = Vec::new();
            collect_union(p, &mut parts);
            if parts.len() > 2 {
                let ds = parts
                    .into_iter()
                    .map(|q| compile_policy(store, q))
                    .collect::<Result<Vec<_>, _>>()?;
                store.union_all(ds)
            } else {
                let a = compile_policy(store, x)?;
                let b = compile_policy(store, y)?;
                store.union(a, b)
            }
        }
        Policy::Seq(x, y) => {
            let a = compile_policy(store, x)?;
            if a == Fdd::DROP {
                return Ok(Fdd::DROP);
            }
            let b = compile_policy(store, y)?;
            store.seq(a, b)
        }
        Policy::Star(x) => {
            let a = compile_policy(store, x)?;
            store.star(a)?
        }
        Policy::Dup(_) => return Err(LocalError::NonLocal(vec!["dup is not allowed in a local program".into()])),
        Policy::Link(..) => {
            return Err(LocalError::NonLocal(vec![format!("link `{p}` is not allowed in a local program")]))
        }
    })
}

fn collect_union<'a>(p: &'a Policy, out: &mut Vec<&'a Policy>) {
    match p {
        Policy::Union(x, y) => {
            collect_union(x, out);
            collect_union(y, out);
        }
        other => out.push(other),
    }
}

pub fn compile_pred(store: &mut FddStore, a: &Predicate) -> Result<Fdd, LocalError> {
    Ok(match a {
        Predicate::True => Fdd::ID,
        Predicate::False => Fdd::DROP,
        Predicate::Test(f, v) => store.test(*f, *v),
        Predicate::Or(x, y) => {
            let a = compile_pred(store, x)?;
            let b = compile_pred(store, y)?;
            store.union(a, b)
        }
        Predicate::And(x, y) => {
            let a = compile_pred(store, x)?;
            let b = compile_pred(store, y)?;
            store.seq(a, b)
        }
        Predicate::Not(x) => {
            let a = compile_pred(store, x)?;
            store.negate(a)?
        }
    })
}

/// Partially evaluates every `switch` test for packets located at `sw`.
/// Local programs never write `switch`, so the field is constant.
pub fn specialize_by_switch(p: &Policy, sw: Value) -> Policy {
    match p {
        Policy::Filter(a) => Policy::Filter(specialize_pred(a, sw)),
        Policy::Union(x, y) => {
            let a = specialize_by_switch(x, sw);
            let b = specialize_by_switch(y, sw);
            match (a.is_drop(), b.is_drop()) {
                (true, _) => b,
                (_, true) => a,
                _ => Policy::union(a, b),
            }
        }
        Policy::Seq(x, y) => {
            let a = specialize_by_switch(x, sw);
            if a.is_drop() {
                return a;
            }
            let b = specialize_by_switch(y, sw);
            if b.is_drop() || a.is_id() {
                b
            } else if b.is_id() {
                a
            } else {
                Policy::seq(a, b)
            }
        }
        Policy::Star(x) => {
            let a = specialize_by_switch(x, sw);
            if a.is_drop() || a.is_id() {
                Policy::id()
            } else {
                Policy::star(a)
            }
        }
        other => other.clone(),
    }
}

fn specialize_pred(a: &Predicate, sw: Value) -> Predicate {
    use Predicate::*;
    match a {
        Test(Field::Switch, v) => {
            if *v == sw {
                True
            } else {
                False
            }
        }
        Or(x, y) => match (specialize_pred(x, sw), specialize_pred(y, sw)) {
            (True, _) | (_, True) => True,
            (False, b) => b,
            (a, False) => a,
            (a, b) => Predicate::or(a, b),
        },
        And(x, y) => match (specialize_pred(x, sw), specialize_pred(y, sw)) {
            (False, _) | (_, False) => False,
            (True, b) => b,
            (a, True) => a,
            (a, b) => Predicate::and(a, b),
        },
        Not(x) => match specialize_pred(x, sw) {
            True => False,
            False => True,
            b => Predicate::not(b),
        },
        other => other.clone(),
    }
}

fn check_matchable(test: Test) -> Result<(), LocalError> {
    match test.0 {
        Field::VSwitch | Field::VPort => Err(LocalError::UnsupportedMatch(test.0)),
        _ => Ok(()),
    }
}

fn priorities(n: usize) -> impl Iterator<Item = u32> {
    let top = TOP_PRIORITY.max(n.saturating_sub(1) as u32);
    (0..n as u32).map(move |i| top - i)
}

/// One rule per root-to-leaf path, true branches first.
pub fn to_flowtable(store: &FddStore, d: Fdd, sw: Value) -> Result<FlowTable, LocalError> {
    let paths = store.paths(d);
    let mut rules = Vec::with_capacity(paths.len());
    let n = paths.len();
    for ((path, leaf), priority) in paths.into_iter().zip(priorities(n)) {
        let mut pattern = Vec::new();
        for (test, taken) in path {
            if taken {
                check_matchable(test)?;
                pattern.push(test);
            }
        }
        let actions = store.leaf_actions(leaf).unwrap().iter().cloned().collect();
        rules.push(FlowRule { priority, pattern, actions });
    }
    Ok(FlowTable { switch: sw, rules })
}

/// Emits rules by repeatedly taking the all-true leftmost path, marking
/// its leaf as covered and re-reducing, until a single leaf remains.
pub fn to_flowtable_compressed(store: &FddStore, d: Fdd, sw: Value) -> Result<FlowTable, LocalError> {
    let mut c = Compressor::default();
    let mut root = c.import(store, d, &mut HashMap::new());
    let mut emitted: Vec<(Vec<Test>, Fdd)> = Vec::new();
    loop {
        match c.nodes[root] {
            CNode::Tomb => break,
            CNode::Leaf(leaf) => {
                emitted.push((Vec::new(), leaf));
                break;
            }
            CNode::Branch { .. } => {
                let mut pattern = Vec::new();
                let leaf = c.leftmost(root, &mut pattern);
                for t in &pattern {
                    check_matchable(*t)?;
                }
                emitted.push((pattern, leaf));
                root = c.cover_leftmost(root);
            }
        }
    }
    if emitted.last().is_none_or(|(p, _)| !p.is_empty()) {
        emitted.push((Vec::new(), Fdd::DROP));
    }
    let emitted = drop_redundant_drops(emitted);
    let n = emitted.len();
    let rules = emitted
        .into_iter()
        .zip(priorities(n))
        .map(|((pattern, leaf), priority)| FlowRule {
            priority,
            pattern,
            actions: store.leaf_actions(leaf).unwrap().iter().cloned().collect(),
        })
        .collect();
    Ok(FlowTable { switch: sw, rules })
}

fn overlaps(a: &[Test], b: &[Test]) -> bool {
    a.iter().all(|(f, v)| b.iter().all(|(g, w)| f != g || v == w))
}

/// Removes drop rules that no lower forwarding rule overlaps: packets they
/// match fall through to another drop. The last rule is kept.
fn drop_redundant_drops(rules: Vec<(Vec<Test>, Fdd)>) -> Vec<(Vec<Test>, Fdd)> {
    let mut kept: Vec<(Vec<Test>, Fdd)> = Vec::with_capacity(rules.len());
    let mut forwarding: Vec<usize> = Vec::new();
    for (i, (pattern, leaf)) in rules.into_iter().rev().enumerate() {
        if leaf != Fdd::DROP {
            forwarding.push(kept.len());
        } else if i > 0 && !forwarding.iter().any(|&j| overlaps(&pattern, &kept[j].0)) {
            continue;
        }
        kept.push((pattern, leaf));
    }
    kept.reverse();
    kept
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum CNode {
    Tomb,
    Leaf(Fdd),
    Branch { test: Test, hi: usize, lo: usize },
}

/// Small interner for diagrams whose leaves may be "already covered".
#[derive(Default)]
struct Compressor {
    nodes: Vec<CNode>,
    unique: HashMap<CNode, usize>,
}

impl Compressor {
    fn intern(&mut self, n: CNode) -> usize {
        if let Some(&i) = self.unique.get(&n) {
            return i;
        }
        self.nodes.push(n);
        self.unique.insert(n, self.nodes.len() - 1);
        self.nodes.len() - 1
    }

    fn mk(&mut self, test: Test, hi: usize, lo: usize) -> usize {
        if hi == lo {
            return lo;
        }
        if self.nodes[hi] == CNode::Tomb {
            return lo;
        }
        if self.nodes[lo] == CNode::Tomb {
            return hi;
        }
        self.intern(CNode::Branch { test, hi, lo })
    }

    fn import(&mut self, store: &FddStore, d: Fdd, memo: &mut HashMap<Fdd, usize>) -> usize {
        if let Some(&i) = memo.get(&d) {
            return i;
        }
        let i = match store.view(d) {
            NodeView::Leaf(_) => self.intern(CNode::Leaf(d)),
            NodeView::Branch { test, hi, lo } => {
                let h = self.import(store, hi, memo);
                let l = self.import(store, lo, memo);
                self.mk(test, h, l)
            }
        };
        memo.insert(d, i);
        i
    }

    fn leftmost(&self, mut x: usize, pattern: &mut Vec<Test>) -> Fdd {
        loop {
            match self.nodes[x] {
                CNode::Branch { test, hi, .. } => {
                    pattern.push(test);
                    x = hi;
                }
                CNode::Leaf(leaf) => return leaf,
                CNode::Tomb => unreachable!("tombstones are reduced away"),
            }
        }
    }

    fn cover_leftmost(&mut self, x: usize) -> usize {
        match self.nodes[x] {
            CNode::Branch { test, hi, lo } => {
                let h = self.cover_leftmost(hi);
                self.mk(test, h, lo)
            }
            _ => self.intern(CNode::Tomb),
        }
    }
}

/// How per-switch tables are derived from a network-wide program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Specialization {
    /// Partially evaluate the program per switch, then build its diagram.
    Policy,
    /// Build one diagram, then take its cofactor per switch.
    Diagram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableOptions {
    pub compress: bool,
    pub specialization: Specialization,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions { compress: false, specialization: Specialization::Policy }
    }
}

/// Tables for every listed switch. Returns the tables and the total
/// diagram node count across switches.
pub fn compile_tables(
    store: &mut FddStore,
    p: &Policy,
    switches: &BTreeSet<Value>,
    opts: TableOptions,
) -> Result<(BTreeMap<Value, FlowTable>, usize), LocalError> {
    let check = ast::validate_local(p);
    if !check.ok {
        return Err(LocalError::NonLocal(check.diagnostics));
    }
    let mut tables = BTreeMap::new();
    let mut nodes = 0;
    let whole = match opts.specialization {
        Specialization::Diagram => Some(compile_policy(store, p)?),
        Specialization::Policy => None,
    };
    for &sw in switches {
        let d = match whole {
            Some(w) => store.specialize(w, Field::Switch, sw),
            None => compile_policy(store, &specialize_by_switch(p, sw))?,
        };
        nodes += store.size(d);
        let t = if opts.compress {
            to_flowtable_compressed(store, d, sw)?
        } else {
            to_flowtable(store, d, sw)?
        };
        tables.insert(sw, t);
    }
    Ok((tables, nodes))
}

/// Switch identifiers tested anywhere in `p`.
pub fn switches_of(p: &Policy) -> BTreeSet<Value> {
    p.values_of(Field::Switch)
}

/// Action sets of a table's leaves, for tests that compare tables by content.
pub fn leaf_set(actions: &[Action]) -> ActionSet {
    actions.iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::parse;
    use crate::fdd::FieldOrder;
    use crate::interp::{eval_flowtable, eval_packet};

    const CLASSIFIER: &str = "ipProto = 80; ip4Dst = 10.0.0.1; port := 1 + ipProto = 80; ip4Dst = 10.0.0.2; port := 2";

    #[test]
    fn constants() {
        let mut s = FddStore::default();
        assert_eq!(compile_local(&mut s, &Policy::drop()).unwrap(), Fdd::DROP);
        let m = compile_local(&mut s, &Policy::modify(Field::Port, 3)).unwrap();
        assert_eq!(s.leaf_actions(m).unwrap(), &ActionSet::from([Action::single(Field::Port, 3)]));
    }

    #[test]
    fn rejects_non_local() {
        let mut s = FddStore::default();
        let err = compile_local(&mut s, &parse("port := 1; dup").unwrap()).unwrap_err();
        assert!(matches!(err, LocalError::NonLocal(_)));
    }

    #[test]
    fn classifier_orders() {
        let p = parse(CLASSIFIER).unwrap();
        let mut s = FddStore::default();
        let d = compile_local(&mut s, &p).unwrap();
        match s.view(d) {
            NodeView::Branch { test, .. } => assert_eq!(test, (Field::IpProto, 80)),
            _ => panic!("expected a branch"),
        }
        let mut s2 = FddStore::new(FieldOrder::with_prefix(&[Field::Ip4Dst, Field::IpProto]));
        let d2 = compile_local(&mut s2, &p).unwrap();
        match s2.view(d2) {
            NodeView::Branch { test, hi, .. } => {
                assert_eq!(test.0, Field::Ip4Dst);
                assert!(matches!(s2.view(hi), NodeView::Branch { test: (Field::IpProto, 80), .. }));
            }
            _ => panic!("expected a branch"),
        }
    }

    #[test]
    fn classifier_table() {
        let mut s = FddStore::default();
        let d = compile_local(&mut s, &parse(CLASSIFIER).unwrap()).unwrap();
        let t = to_flowtable(&s, d, 0).unwrap();
        let pats: Vec<_> = t.rules.iter().map(|r| r.pattern.clone()).collect();
        assert_eq!(
            pats,
            vec![
                vec![(Field::IpProto, 80), (Field::Ip4Dst, 0x0a000001)],
                vec![(Field::IpProto, 80), (Field::Ip4Dst, 0x0a000002)],
                vec![(Field::IpProto, 80)],
                vec![],
            ]
        );
        assert_eq!(t.rules[0].actions, vec![Action::single(Field::Port, 1)]);
        assert!(t.rules[2].actions.is_empty() && t.rules[3].actions.is_empty());
        let c = to_flowtable_compressed(&s, d, 0).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn identity_table_is_one_rule() {
        let s = FddStore::default();
        let t = to_flowtable(&s, Fdd::ID, 4).unwrap();
        assert_eq!(t.rules.len(), 1);
        assert!(t.rules[0].is_catch_all());
        assert_eq!(t.rules[0].actions, vec![Action::identity()]);
        let c = to_flowtable_compressed(&s, Fdd::DROP, 4).unwrap();
        assert_eq!(c.rules.len(), 1);
        assert!(c.rules[0].actions.is_empty());
    }

    #[test]
    fn specialization_examples() {
        let p = parse("switch = 1; port := 1 + switch = 2; port := 2").unwrap();
        assert_eq!(specialize_by_switch(&p, 1), Policy::modify(Field::Port, 1));
        let q = parse("port = 1; port := 2").unwrap();
        assert_eq!(specialize_by_switch(&q, 7), q);
    }

    #[test]
    fn table_matches_program() {
        let p = parse("(port = 1; vlan := 2 + port = 2; (port := 1 + port := 3))*; not vlan = 3").unwrap();
        let mut s = FddStore::default();
        let d = compile_local(&mut s, &p).unwrap();
        let t = to_flowtable(&s, d, 0).unwrap();
        let c = to_flowtable_compressed(&s, d, 0).unwrap();
        assert!(c.len() <= t.len());
        for port in 0..4 {
            for vlan in 0..4 {
                let pk = Packet::from_pairs([(Field::Port, port), (Field::Vlan, vlan)]);
                let expect = eval_packet(&p, &pk).unwrap();
                assert_eq!(eval_flowtable(&t, &pk), expect);
                assert_eq!(eval_flowtable(&c, &pk), expect);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let mut s = FddStore::default();
        let d = compile_local(&mut s, &parse(CLASSIFIER).unwrap()).unwrap();
        let t = to_flowtable(&s, d, 3).unwrap();
        let j = t.to_json();
        assert_eq!(j["rules"][0]["match"]["ipProto"], 80);
        assert_eq!(j["rules"][0]["actions"][0][0]["port"], 1);
        assert_eq!(FlowTable::from_json(&j).unwrap().to_json(), j);
    }

    #[test]
    fn virtual_fields_cannot_be_matched() {
        let mut s = FddStore::default();
        let d = compile_policy(&mut s, &parse("vport = 1; port := 1").unwrap()).unwrap();
        assert_eq!(to_flowtable(&s, d, 0), Err(LocalError::UnsupportedMatch(Field::VPort)));
    }
}
