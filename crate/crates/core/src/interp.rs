//! Reference semantics. Slow on purpose: every compiler stage is checked
//! against these functions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::ast::{self, Field, Policy, Predicate, ProgramBundle, Value, NUM_FIELDS};
use crate::local::FlowTable;

/// A total assignment of values to fields; unset fields are 0.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Packet([Value; NUM_FIELDS]);

impl Packet {
    pub fn from_pairs<I: IntoIterator<Item = (Field, Value)>>(pairs: I) -> Packet {
        let mut pk = Packet::default();
        for (f, v) in pairs {
            pk.set(f, v);
        }
        pk
    }

    pub fn get(&self, f: Field) -> Value {
        self.0[f.index()]
    }

    pub fn set(&mut self, f: Field, v: Value) {
        self.0[f.index()] = v;
    }

    pub fn with(mut self, f: Field, v: Value) -> Packet {
        self.set(f, v);
        self
    }

    pub fn location(&self) -> (Value, Value) {
        (self.get(Field::Switch), self.get(Field::Port))
    }

    pub fn satisfies(&self, a: &Predicate) -> bool {
        match a {
            Predicate::True => true,
            Predicate::False => false,
            Predicate::Test(f, v) => self.get(*f) == *v,
            Predicate::Or(x, y) => self.satisfies(x) || self.satisfies(y),
            Predicate::And(x, y) => self.satisfies(x) && self.satisfies(y),
            Predicate::Not(x) => !self.satisfies(x),
        }
    }

    /// Canonical JSON: an object of the nonzero fields.
    pub fn to_json(&self) -> Json {
        let mut m = Map::new();
        for f in Field::ALL {
            let v = self.get(f);
            if v != 0 {
                m.insert(f.name().to_string(), json!(v));
            }
        }
        Json::Object(m)
    }

    pub fn from_json(j: &Json) -> Result<Packet, String> {
        let obj = j.as_object().ok_or("packet must be a JSON object")?;
        let mut pk = Packet::default();
        for (k, v) in obj {
            let f: Field = k.parse().map_err(|e: ast::UnknownField| e.to_string())?;
            let n = v.as_u64().ok_or_else(|| format!("field `{k}` must be a natural number"))?;
            pk.set(f, n);
        }
        Ok(pk)
    }
}

impl fmt::Debug for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

/// A non-empty packet sequence. The current packet is the head; the tail
/// holds packets recorded by `dup`, most recent first.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct History {
    // Oldest first; the head is the last element.
    packets: Vec<Packet>,
}

impl History {
    pub fn new(pk: Packet) -> History {
        History { packets: vec![pk] }
    }

    /// Builds a history from packets listed head first.
    pub fn from_head_first(pks: &[Packet]) -> History {
        assert!(!pks.is_empty(), "histories are non-empty");
        History { packets: pks.iter().rev().copied().collect() }
    }

    pub fn head(&self) -> &Packet {
        self.packets.last().expect("non-empty")
    }

    pub fn head_mut(&mut self) -> &mut Packet {
        self.packets.last_mut().expect("non-empty")
    }

    pub fn with_head(&self, pk: Packet) -> History {
        let mut h = self.clone();
        *h.head_mut() = pk;
        h
    }

    pub fn dup(&self) -> History {
        let mut h = self.clone();
        h.packets.push(*self.head());
        h
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Packets head first.
    pub fn head_first(&self) -> Vec<Packet> {
        self.packets.iter().rev().copied().collect()
    }

    pub fn map_packets(&self, f: impl Fn(&Packet) -> Packet) -> History {
        History { packets: self.packets.iter().map(f).collect() }
    }

    pub fn to_json(&self) -> Json {
        Json::Array(self.head_first().iter().map(Packet::to_json).collect())
    }
}

impl fmt::Debug for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpError {
    #[error("star iteration exceeded {0} set-union steps")]
    IterationCap(usize),
}

pub const DEFAULT_ITERATION_CAP: usize = 1_000_000;

/// The denotation of `p` on history `h`.
pub fn eval_policy(p: &Policy, h: &History) -> Result<BTreeSet<History>, InterpError> {
    eval_policy_with_cap(p, h, DEFAULT_ITERATION_CAP)
}

pub fn eval_policy_with_cap(p: &Policy, h: &History, cap: usize) -> Result<BTreeSet<History>, InterpError> {
    let mut budget = cap;
    eval(p, h, &mut budget, cap)
}

fn eval(p: &Policy, h: &History, budget: &mut usize, cap: usize) -> Result<BTreeSet<History>, InterpError> {
    Ok(match p {
        Policy::Filter(a) => {
            if h.head().satisfies(a) {
                BTreeSet::from([h.clone()])
            } else {
                BTreeSet::new()
            }
        }
        Policy::Mod(f, v) => BTreeSet::from([h.with_head(h.head().with(*f, *v))]),
        Policy::Union(x, y) => {
            let mut out = eval(x, h, budget, cap)?;
            out.extend(eval(y, h, budget, cap)?);
            out
        }
        Policy::Seq(x, y) => {
            let mut out = BTreeSet::new();
            for mid in eval(x, h, budget, cap)? {
                out.extend(eval(y, &mid, budget, cap)?);
            }
            out
        }
        Policy::Star(x) => {
            let mut result = BTreeSet::from([h.clone()]);
            let mut frontier = vec![h.clone()];
            while !frontier.is_empty() {
                let mut next = Vec::new();
                for g in &frontier {
                    for out in eval(x, g, budget, cap)? {
                        if *budget == 0 {
                            return Err(InterpError::IterationCap(cap));
                        }
                        *budget -= 1;
                        if result.insert(out.clone()) {
                            next.push(out);
                        }
                    }
                }
                frontier = next;
            }
            result
        }
        Policy::Dup(_) => BTreeSet::from([h.dup()]),
        Policy::Link(s1, p1, s2, p2) => {
            if h.head().location() == (*s1, *p1) {
                let moved = h.dup();
                let after = moved.with_head(moved.head().with(Field::Switch, *s2).with(Field::Port, *p2));
                BTreeSet::from([after.dup()])
            } else {
                BTreeSet::new()
            }
        }
    })
}

/// Head packets of the single-packet denotation.
pub fn eval_packet(p: &Policy, pk: &Packet) -> Result<BTreeSet<Packet>, InterpError> {
    Ok(eval_policy(p, &History::new(*pk))?
        .into_iter()
        .map(|h| *h.head())
        .collect())
}

/// First matching rule fires; no match drops.
pub fn eval_flowtable(t: &FlowTable, pk: &Packet) -> BTreeSet<Packet> {
    t.rules
        .iter()
        .find(|r| r.matches(pk))
        .map(|r| r.actions.iter().map(|a| a.apply(pk)).collect())
        .unwrap_or_default()
}

/// Outcome of a network simulation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimResult {
    /// Histories of packets that exited through the egress.
    pub delivered: BTreeSet<History>,
    /// Histories still travelling when the hop budget ran out.
    pub in_flight: BTreeSet<History>,
}

impl SimResult {
    pub fn looped(&self) -> bool {
        !self.in_flight.is_empty()
    }
}

/// Outgoing links keyed by `(switch, port)`.
pub type LinkMap = BTreeMap<(Value, Value), Vec<(Value, Value)>>;

/// Directed links `(sw, pt) -> (sw', pt')` of a topology policy, or `None`
/// if the policy is not a plain union of links.
pub fn topology_links(t: &Policy) -> Option<LinkMap> {
    fn go(p: &Policy, out: &mut LinkMap) -> bool {
        match p {
            Policy::Link(s1, p1, s2, p2) => {
                let e = out.entry((*s1, *p1)).or_default();
                if !e.contains(&(*s2, *p2)) {
                    e.push((*s2, *p2));
                }
                true
            }
            Policy::Union(a, b) => go(a, out) && go(b, out),
            Policy::Filter(Predicate::False) => true,
            _ => false,
        }
    }
    let mut out = BTreeMap::new();
    go(&ast::resugar_links(t), &mut out).then_some(out)
}

/// Runs `in; (T; t)*; T; out` where `T` applies the table of the packet's
/// current switch. Each link traversal records two history entries, as the
/// dup pair around a link does.
pub fn simulate(
    bundle: &ProgramBundle,
    tables: &BTreeMap<Value, FlowTable>,
    pk: &Packet,
    max_hops: usize,
) -> Result<SimResult, InterpError> {
    let links = topology_links(&bundle.topology);
    let mut result = SimResult::default();
    if !pk.satisfies(&bundle.ingress) {
        return Ok(result);
    }
    let mut frontier = BTreeSet::from([History::new(*pk)]);
    for hop in 0..=max_hops {
        let mut next = BTreeSet::new();
        for h in &frontier {
            let head = h.head();
            let outs = match tables.get(&head.get(Field::Switch)) {
                Some(t) => eval_flowtable(t, head),
                None => BTreeSet::new(),
            };
            for out in outs {
                let h2 = h.with_head(out);
                if out.satisfies(&bundle.egress) {
                    result.delivered.insert(h2.clone());
                }
                match &links {
                    Some(map) => {
                        for &(s2, p2) in map.get(&out.location()).into_iter().flatten() {
                            let moved = h2.dup();
                            let arrived = moved.with_head(out.with(Field::Switch, s2).with(Field::Port, p2));
                            next.insert(arrived.dup());
                        }
                    }
                    None => {
                        let t = ast::desugar_links(&bundle.topology);
                        next.extend(eval_policy(&t, &h2)?);
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        if hop == max_hops {
            result.in_flight = next;
            break;
        }
        frontier = next;
    }
    Ok(result)
}

/// Resets pc, vswitch and vport in every packet, merging histories that
/// become equal.
pub fn strip_pc(hs: &BTreeSet<History>) -> BTreeSet<History> {
    hs.iter()
        .map(|h| {
            h.map_packets(|p| {
                p.with(Field::Pc, 0).with(Field::VSwitch, 0).with(Field::VPort, 0)
            })
        })
        .collect()
}

/// Interpreter histories of the network program `in; p; out`.
pub fn eval_bundle(bundle: &ProgramBundle, pk: &Packet) -> Result<BTreeSet<History>, InterpError> {
    let prog = Policy::seq_all([
        Policy::Filter(bundle.ingress.clone()),
        bundle.program.clone(),
        Policy::Filter(bundle.egress.clone()),
    ]);
    eval_policy(&prog, &History::new(*pk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::parse;
    use crate::fdd::Action;
    use crate::local::FlowRule;

    fn pt(v: Value) -> Packet {
        Packet::default().with(Field::Port, v)
    }

    #[test]
    fn identity_and_dup() {
        let h = History::new(pt(1));
        assert_eq!(eval_policy(&Policy::id(), &h).unwrap(), BTreeSet::from([h.clone()]));
        let d = eval_policy(&Policy::dup(), &h).unwrap();
        assert_eq!(d, BTreeSet::from([History::from_head_first(&[pt(1), pt(1)])]));
    }

    #[test]
    fn swap_ports() {
        let p = parse("(port = 1; port := 2) + (port = 2; port := 1)").unwrap();
        assert_eq!(eval_packet(&p, &pt(1)).unwrap(), BTreeSet::from([pt(2)]));
    }

    #[test]
    fn link_records_both_ends() {
        let p = parse("1@2 => 2@1").unwrap();
        let start = Packet::from_pairs([(Field::Switch, 1), (Field::Port, 2)]);
        let out = eval_policy(&p, &History::new(start)).unwrap();
        let end = Packet::from_pairs([(Field::Switch, 2), (Field::Port, 1)]);
        assert_eq!(out, BTreeSet::from([History::from_head_first(&[end, end, start])]));
        let desugared = eval_policy(&ast::desugar_links(&p), &History::new(start)).unwrap();
        assert_eq!(out, desugared);
    }

    #[test]
    fn star_stabilises() {
        let p = parse("(port = 1; port := 2 + port = 2; port := 3)*").unwrap();
        assert_eq!(eval_packet(&p, &pt(1)).unwrap(), BTreeSet::from([pt(1), pt(2), pt(3)]));
    }

    #[test]
    fn iteration_cap_reports_divergence() {
        let p = parse("dup*").unwrap();
        let r = eval_policy_with_cap(&p, &History::new(pt(0)), 100);
        assert_eq!(r, Err(InterpError::IterationCap(100)));
    }

    #[test]
    fn empty_table_drops() {
        let t = FlowTable { switch: 1, rules: vec![] };
        assert!(eval_flowtable(&t, &pt(1)).is_empty());
    }

    #[test]
    fn first_matching_rule_wins() {
        let t = FlowTable {
            switch: 0,
            rules: vec![
                FlowRule {
                    priority: 2,
                    pattern: vec![(Field::Port, 1)],
                    actions: vec![Action::single(Field::Port, 9)],
                },
                FlowRule { priority: 1, pattern: vec![], actions: vec![] },
            ],
        };
        assert_eq!(eval_flowtable(&t, &pt(1)), BTreeSet::from([pt(9)]));
        assert!(eval_flowtable(&t, &pt(2)).is_empty());
    }

    #[test]
    fn strip_pc_merges() {
        let a = History::new(pt(1).with(Field::Pc, 3));
        let b = History::new(pt(1).with(Field::Pc, 4));
        let s = strip_pc(&BTreeSet::from([a, b]));
        assert_eq!(s, BTreeSet::from([History::new(pt(1))]));
        let plain = BTreeSet::from([History::new(pt(2))]);
        assert_eq!(strip_pc(&plain), plain);
        assert!(strip_pc(&BTreeSet::new()).is_empty());
    }

    #[test]
    fn packet_json_round_trip() {
        let p = Packet::from_pairs([(Field::Switch, 2), (Field::EthDst, 7)]);
        let j = p.to_json();
        assert_eq!(j, json!({"switch": 2, "ethDst": 7}));
        assert_eq!(Packet::from_json(&j).unwrap(), p);
        assert!(Packet::from_json(&json!({"nope": 1})).is_err());
    }

    #[test]
    fn topology_links_reads_unions() {
        let t = parse("1@2 => 2@1 + 2@1 => 1@2").unwrap();
        let links = topology_links(&t).unwrap();
        assert_eq!(links[&(1, 2)], vec![(2, 1)]);
        assert!(topology_links(&parse("port := 1").unwrap()).is_none());
    }
}
