//! Global compilation. A program with links is turned into an automaton
//! whose states are dup occurrences, determinized symbolically, shrunk by
//! merging identical states, and read back as a local program that keeps
//! its automaton state in the `pc` field.
//!
//! Every link `s1@p1 => s2@p2` is first rewritten to
//! `sw=s1; pt=p1; dup; sw:=s2; pt:=p2; dup; sw=s2; pt=p2`, which is
//! equivalent and places the location checks on the switch side. The two
//! dups of the i-th link get labels `2i-1` (packet on the wire) and `2i`
//! (packet arrived), so odd labels are link states and the rest, including
//! the start label 0, are switch states.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::ast::{self, Field, Policy, Predicate, ProgramBundle, Value};
use crate::fdd::{Action, ActionSet, Fdd, FddError, FddStore, NodeView, Test};
use crate::interp::{History, Packet};
use crate::local::{self, FlowTable, LocalError};

pub type StateId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GlobalError {
    #[error("program is not switch/link alternating: {0}")]
    NonBipartite(String),
    #[error("program uses the reserved field {0}")]
    ReservedField(Field),
    #[error("link state {0} does not lead to a single next switch state")]
    InconsistentLinks(StateId),
    #[error(transparent)]
    Fdd(#[from] FddError),
    #[error(transparent)]
    Local(#[from] LocalError),
}

// ---------------------------------------------------------------------------
// Preparation

/// Replaces every `Link` by its switch-side form described in the module docs.
pub fn rewrite_links(p: &Policy) -> Policy {
    match p {
        Policy::Link(s1, p1, s2, p2) => Policy::seq_all([
            Policy::test(Field::Switch, *s1),
            Policy::test(Field::Port, *p1),
            Policy::dup(),
            Policy::modify(Field::Switch, *s2),
            Policy::modify(Field::Port, *p2),
            Policy::dup(),
            Policy::test(Field::Switch, *s2),
            Policy::test(Field::Port, *p2),
        ]),
        Policy::Union(a, b) => Policy::union(rewrite_links(a), rewrite_links(b)),
        Policy::Seq(a, b) => Policy::seq(rewrite_links(a), rewrite_links(b)),
        Policy::Star(a) => Policy::star(rewrite_links(a)),
        other => other.clone(),
    }
}

/// Numbers every dup 1, 2, ... from left to right, replacing old labels.
pub fn annotate_dups(p: &Policy) -> Policy {
    fn go(p: &Policy, next: &mut u32) -> Policy {
        match p {
            Policy::Dup(_) => {
                *next += 1;
                Policy::Dup(Some(*next))
            }
            Policy::Union(a, b) => {
                let a = go(a, next);
                Policy::union(a, go(b, next))
            }
            Policy::Seq(a, b) => {
                let a = go(a, next);
                Policy::seq(a, go(b, next))
            }
            Policy::Star(a) => Policy::star(go(a, next)),
            other => other.clone(),
        }
    }
    go(p, &mut 0)
}

/// Checks that dups and switch writes only occur inside links and that no
/// reserved field other than those in `allowed` is used, then produces the
/// annotated program.
pub fn prepare(program: &Policy, allowed: &[Field]) -> Result<Policy, GlobalError> {
    let p = ast::resugar_links(program);
    check_outside_links(&p, allowed)?;
    Ok(annotate_dups(&rewrite_links(&p)))
}

fn check_outside_links(p: &Policy, allowed: &[Field]) -> Result<(), GlobalError> {
    match p {
        Policy::Dup(_) => Err(GlobalError::NonBipartite("dup outside a link".into())),
        Policy::Mod(Field::Switch, v) => {
            Err(GlobalError::NonBipartite(format!("switch := {v} outside a link")))
        }
        Policy::Mod(f, _) if f.is_reserved() && !allowed.contains(f) => Err(GlobalError::ReservedField(*f)),
        Policy::Filter(a) => {
            let mut fs = BTreeSet::new();
            a.fields(&mut fs);
            match fs.into_iter().find(|f| f.is_reserved() && !allowed.contains(f)) {
                Some(f) => Err(GlobalError::ReservedField(f)),
                None => Ok(()),
            }
        }
        Policy::Union(a, b) | Policy::Seq(a, b) => {
            check_outside_links(a, allowed)?;
            check_outside_links(b, allowed)
        }
        Policy::Star(a) => check_outside_links(a, allowed),
        Policy::Mod(..) | Policy::Link(..) => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Derivatives

fn sseq(a: Policy, b: Policy) -> Policy {
    if a.is_drop() || b.is_drop() {
        Policy::drop()
    } else if a.is_id() {
        b
    } else if b.is_id() {
        a
    } else {
        Policy::seq(a, b)
    }
}

fn sunion(a: Policy, b: Policy) -> Policy {
    if a.is_drop() {
        b
    } else if b.is_drop() || a == b {
        a
    } else {
        Policy::union(a, b)
    }
}

fn sstar(a: Policy) -> Policy {
    if a.is_drop() || a.is_id() {
        Policy::id()
    } else {
        Policy::star(a)
    }
}

/// The dup-free part of a program: what it does without passing any dup.
pub fn e_of(p: &Policy) -> Policy {
    match p {
        Policy::Filter(_) | Policy::Mod(..) => p.clone(),
        Policy::Dup(_) | Policy::Link(..) => Policy::drop(),
        Policy::Union(a, b) => sunion(e_of(a), e_of(b)),
        Policy::Seq(a, b) => {
            let x = e_of(a);
            if x.is_drop() {
                x
            } else {
                sseq(x, e_of(b))
            }
        }
        Policy::Star(a) => sstar(e_of(a)),
    }
}

/// `d; dup^label; k` is one way of passing exactly one dup first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DTriple {
    pub d: Policy,
    pub label: StateId,
    pub k: Policy,
}

/// The triples of a program, one per reachable first dup; triples whose
/// `d` is syntactically `drop` are omitted.
pub fn d_of(p: &Policy) -> Vec<DTriple> {
    match p {
        Policy::Filter(_) | Policy::Mod(..) | Policy::Link(..) => Vec::new(),
        Policy::Dup(l) => vec![DTriple { d: Policy::id(), label: l.unwrap_or(0), k: Policy::id() }],
        Policy::Union(a, b) => {
            let mut v = d_of(a);
            v.extend(d_of(b));
            v
        }
        Policy::Seq(a, b) => {
            let mut v: Vec<DTriple> = d_of(a)
                .into_iter()
                .map(|t| DTriple { k: sseq(t.k, (**b).clone()), ..t })
                .collect();
            let rest = d_of(b);
            if !rest.is_empty() {
                let ea = e_of(a);
                if !ea.is_drop() {
                    v.extend(rest.into_iter().filter_map(|t| {
                        let d = sseq(ea.clone(), t.d);
                        (!d.is_drop()).then_some(DTriple { d, ..t })
                    }));
                }
            }
            v
        }
        Policy::Star(a) => {
            let e = e_of(p);
            d_of(a)
                .into_iter()
                .filter_map(|t| {
                    let d = sseq(e.clone(), t.d);
                    (!d.is_drop()).then_some(DTriple { d, label: t.label, k: sseq(t.k, p.clone()) })
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Automata

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StateKind {
    Switch,
    Link,
}

impl StateKind {
    pub fn of_label(l: StateId) -> StateKind {
        if l % 2 == 1 {
            StateKind::Link
        } else {
            StateKind::Switch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    pub kind: StateKind,
    /// Labels of the source automaton this state stands for.
    pub members: Vec<StateId>,
    /// Packets produced when the program ends in this state.
    pub eps: Fdd,
    /// Packets passed to the next state; every action sets `pc` to the
    /// successor's id.
    pub delta: Fdd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Automaton {
    pub start: StateId,
    pub states: BTreeMap<StateId, State>,
}

fn tag_pc(store: &mut FddStore, d: Fdd, pc: Value) -> Fdd {
    store.map_leaves(d, |acts| {
        acts.iter()
            .map(|a| {
                let mut a = a.clone();
                a.set(Field::Pc, pc);
                a
            })
            .collect()
    })
}

/// Builds the automaton of an annotated program: one state per label
/// reachable from the start, with observation and continuation diagrams.
pub fn build_automaton(store: &mut FddStore, p: &Policy) -> Result<Automaton, GlobalError> {
    let mut conts: BTreeMap<StateId, Policy> = BTreeMap::from([(0, p.clone())]);
    let mut queue = VecDeque::from([0]);
    let mut states = BTreeMap::new();
    while let Some(l) = queue.pop_front() {
        let k = conts[&l].clone();
        let eps = local::compile_policy(store, &e_of(&k))?;
        let mut parts = Vec::new();
        for t in d_of(&k) {
            if t.d.contains_dup() {
                return Err(GlobalError::NonBipartite(format!("derivative of state {l} passes a dup")));
            }
            let d = local::compile_policy(store, &t.d)?;
            parts.push(tag_pc(store, d, t.label as Value));
            if let std::collections::btree_map::Entry::Vacant(e) = conts.entry(t.label) {
                e.insert(t.k);
                queue.push_back(t.label);
            }
        }
        let delta = store.union_all(parts);
        states.insert(l, State { kind: StateKind::of_label(l), members: vec![l], eps, delta });
    }
    Ok(Automaton { start: 0, states })
}

fn leaf_sets(store: &FddStore, d: Fdd) -> Vec<&ActionSet> {
    store.reachable(d).into_iter().filter_map(|x| store.leaf_actions(x)).collect()
}

/// Successor ids named by the leaves of a delta diagram.
pub fn successors(store: &FddStore, delta: Fdd) -> BTreeSet<StateId> {
    leaf_sets(store, delta)
        .into_iter()
        .flatten()
        .filter_map(|a| a.get(Field::Pc))
        .map(|v| v as StateId)
        .collect()
}

#[derive(Default)]
struct Ctx {
    pos: Vec<Test>,
    neg: Vec<Test>,
}

impl Ctx {
    fn known(&self, f: Field) -> Option<Value> {
        self.pos.iter().rev().find(|t| t.0 == f).map(|t| t.1)
    }

    /// Whether a packet in this context may have `f = n`: `Some(true)` if
    /// it must, `Some(false)` if it cannot, `None` if undecided.
    fn decides(&self, (f, n): Test) -> Option<bool> {
        match self.known(f) {
            Some(m) => Some(m == n),
            None if self.neg.contains(&(f, n)) => Some(false),
            None => None,
        }
    }
}

/// Subset construction over diagrams. A det-state's delta is the union of
/// its members' deltas, refined so that no two actions with different
/// successor sets can produce the same packet; actions with equal effect
/// are merged and point to the set of their successors.
pub fn determinize(store: &mut FddStore, a: &Automaton) -> Automaton {
    let mut ids: BTreeMap<Vec<StateId>, StateId> = BTreeMap::from([(vec![a.start], 0)]);
    let mut queue = VecDeque::from([vec![a.start]]);
    let mut states = BTreeMap::new();
    while let Some(set) = queue.pop_front() {
        let id = ids[&set];
        let eps = store.union_all(set.iter().map(|l| a.states[l].eps));
        let merged = store.union_all(set.iter().map(|l| a.states[l].delta));
        let mut assign = |labels: Vec<StateId>| -> StateId {
            let n = ids.len() as StateId;
            *ids.entry(labels.clone()).or_insert_with(|| {
                queue.push_back(labels);
                n
            })
        };
        let delta = refine(store, merged, &mut Ctx::default(), &mut assign);
        let kind = a.states[&set[0]].kind;
        let members = set.iter().flat_map(|l| a.states[l].members.iter().copied()).collect::<BTreeSet<_>>();
        states.insert(id, State { kind, members: members.into_iter().collect(), eps, delta });
    }
    Automaton { start: 0, states }
}

fn refine(store: &mut FddStore, d: Fdd, ctx: &mut Ctx, assign: &mut dyn FnMut(Vec<StateId>) -> StateId) -> Fdd {
    match store.view(d) {
        NodeView::Branch { test, hi, lo } => {
            ctx.pos.push(test);
            let h = refine(store, hi, ctx, assign);
            ctx.pos.pop();
            ctx.neg.push(test);
            let l = refine(store, lo, ctx, assign);
            ctx.neg.pop();
            store.ite(test, h, l)
        }
        NodeView::Leaf(acts) => {
            let acts = acts.clone();
            refine_leaf(store, &acts, ctx, assign)
        }
    }
}

fn refine_leaf(
    store: &mut FddStore,
    acts: &ActionSet,
    ctx: &mut Ctx,
    assign: &mut dyn FnMut(Vec<StateId>) -> StateId,
) -> Fdd {
    let mut groups: BTreeMap<Action, BTreeSet<StateId>> = BTreeMap::new();
    for a in acts {
        let pc = a.get(Field::Pc).expect("delta actions carry a successor") as StateId;
        let mut rest = a.without(Field::Pc);
        for (f, v) in a.iter() {
            if f != Field::Pc && ctx.known(f) == Some(v) {
                rest.remove(f);
            }
        }
        groups.entry(rest).or_default().insert(pc);
    }
    let gs: Vec<(&Action, &BTreeSet<StateId>)> = groups.iter().collect();
    for i in 0..gs.len() {
        for j in i + 1..gs.len() {
            if gs[i].1 == gs[j].1 {
                continue;
            }
            if let Some(t) = collision_test(gs[i].0, gs[j].0, ctx) {
                ctx.pos.push(t);
                let h = refine_leaf(store, acts, ctx, assign);
                ctx.pos.pop();
                ctx.neg.push(t);
                let l = refine_leaf(store, acts, ctx, assign);
                ctx.neg.pop();
                return store.ite(t, h, l);
            }
        }
    }
    let out: ActionSet = groups
        .into_iter()
        .map(|(mut rest, labels)| {
            rest.set(Field::Pc, assign(labels.into_iter().collect()) as Value);
            rest
        })
        .collect();
    store.leaf(out)
}

/// Two normalized actions produce the same packet exactly when every field
/// written by only one of them already holds the written value. Returns an
/// undecided such test, or `None` when the actions can never collide here.
fn collision_test(a: &Action, b: &Action, ctx: &Ctx) -> Option<Test> {
    let mut undecided = None;
    let fields: BTreeSet<Field> = a.iter().chain(b.iter()).map(|(f, _)| f).collect();
    for f in fields {
        let t = match (a.get(f), b.get(f)) {
            (Some(x), Some(y)) if x != y => return None,
            (Some(_), Some(_)) | (None, None) => continue,
            (Some(x), None) | (None, Some(x)) => (f, x),
        };
        match ctx.decides(t) {
            Some(false) => return None,
            Some(true) => {}
            None => {
                undecided.get_or_insert(t);
            }
        }
    }
    Some(undecided.expect("distinct normalized actions differ on an undecided field"))
}

fn remap_pc(store: &mut FddStore, d: Fdd, map: &HashMap<StateId, StateId>) -> Fdd {
    store.map_leaves(d, |acts| {
        acts.iter()
            .map(|a| {
                let mut a = a.clone();
                if let Some(pc) = a.get(Field::Pc) {
                    if let Some(&to) = map.get(&(pc as StateId)) {
                        a.set(Field::Pc, to as Value);
                    }
                }
                a
            })
            .collect()
    })
}

/// Repeatedly merges states whose kind, observation and continuation
/// diagrams are identical, then renumbers states densely from 0.
pub fn merge_identical_states(store: &mut FddStore, a: &Automaton) -> Automaton {
    let mut states = a.states.clone();
    loop {
        let mut reps: HashMap<(StateKind, Fdd, Fdd), StateId> = HashMap::new();
        let mut map = HashMap::new();
        for (&id, s) in &states {
            match reps.get(&(s.kind, s.eps, s.delta)) {
                Some(&r) => {
                    map.insert(id, r);
                }
                None => {
                    reps.insert((s.kind, s.eps, s.delta), id);
                }
            }
        }
        if map.is_empty() {
            break;
        }
        for (id, r) in &map {
            let gone = states.remove(id).unwrap();
            let keep = states.get_mut(r).unwrap();
            keep.members.extend(gone.members);
            keep.members.sort_unstable();
            keep.members.dedup();
        }
        for s in states.values_mut() {
            s.delta = remap_pc(store, s.delta, &map);
        }
    }
    let order: HashMap<StateId, StateId> = states.keys().enumerate().map(|(i, &id)| (id, i as StateId)).collect();
    let start = order[&a.start];
    let states = states
        .into_values()
        .enumerate()
        .map(|(i, mut s)| {
            s.delta = remap_pc(store, s.delta, &order);
            (i as StateId, s)
        })
        .collect();
    Automaton { start, states }
}

/// Checks that for each state and packet, equal output packets always go
/// to the same successor.
pub fn is_deterministic<'a>(store: &FddStore, a: &Automaton, packets: impl IntoIterator<Item = &'a Packet> + Clone) -> bool {
    a.states.values().all(|s| {
        packets.clone().into_iter().all(|pk| {
            let mut seen: BTreeMap<Packet, Value> = BTreeMap::new();
            store.eval_leaf(s.delta, pk).iter().all(|act| {
                let out = act.apply(pk);
                let pc = out.get(Field::Pc);
                *seen.entry(out.with(Field::Pc, pk.get(Field::Pc))).or_insert(pc) == pc
            })
        })
    })
}

/// Histories the automaton accepts from `pk`, taking at most `max_steps`
/// transitions; `pc` is reset in recorded packets.
pub fn accepted_histories(store: &FddStore, a: &Automaton, pk: &Packet, max_steps: usize) -> BTreeSet<History> {
    let mut out = BTreeSet::new();
    let mut frontier: BTreeSet<(StateId, History)> = BTreeSet::from([(a.start, History::new(*pk))]);
    let mut seen = frontier.clone();
    for _ in 0..=max_steps {
        let mut next = BTreeSet::new();
        for (s, h) in &frontier {
            let st = &a.states[s];
            for o in store.eval(st.eps, h.head()) {
                out.insert(h.with_head(o.with(Field::Pc, 0)));
            }
            for o in store.eval(st.delta, h.head()) {
                let succ = o.get(Field::Pc) as StateId;
                let h2 = h.with_head(o.with(Field::Pc, 0)).dup();
                if seen.insert((succ, h2.clone())) {
                    next.insert((succ, h2));
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    out
}

/// Deterministic text listing of states, diagram ids and successors.
pub fn dump_automaton(store: &FddStore, a: &Automaton) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "start {} states {}", a.start, a.states.len());
    for (id, st) in &a.states {
        let succ: Vec<String> = successors(store, st.delta).iter().map(|x| x.to_string()).collect();
        let mem: Vec<String> = st.members.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(
            s,
            "state {id} {:?} members {{{}}} eps {} delta {} -> {{{}}}",
            st.kind,
            mem.join(","),
            st.eps,
            st.delta,
            succ.join(",")
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Extraction

/// Reads the automaton back as one diagram over the original fields plus
/// `pc`. At switch state `S`, packets with `pc = S` either leave the
/// program (tagged with an unused pc so that no table matches them again)
/// or are forwarded with the pc of the switch state after the link.
pub fn extract_local(store: &mut FddStore, a: &Automaton) -> Result<Fdd, GlobalError> {
    let dead = a.states.keys().max().map_or(0, |m| *m as Value + 1);
    let mut after_link = HashMap::new();
    for (&id, s) in &a.states {
        if s.kind != StateKind::Link {
            continue;
        }
        // A link whose far end accepts nothing still carries the packet;
        // it arrives dead and no rule matches it.
        let next = match store.leaf_actions(s.delta) {
            Some(acts) if acts.is_empty() => Some(dead),
            Some(acts) if acts.len() == 1 => acts.iter().next().and_then(|x| x.get(Field::Pc)),
            _ => None,
        };
        match next {
            Some(n) => after_link.insert(id, n as StateId),
            None => return Err(GlobalError::InconsistentLinks(id)),
        };
    }
    let mut parts = Vec::new();
    for (&id, s) in &a.states {
        if s.kind != StateKind::Switch {
            continue;
        }
        for succ in successors(store, s.delta) {
            if !after_link.contains_key(&succ) {
                return Err(GlobalError::NonBipartite(format!("switch state {id} leads to switch state {succ}")));
            }
        }
        let exit = tag_pc(store, s.eps, dead);
        let fwd = remap_pc(store, s.delta, &after_link);
        let body = store.union(exit, fwd);
        parts.push(store.restrict((Field::Pc, id as Value), true, body));
    }
    Ok(store.union_all(parts))
}

// ---------------------------------------------------------------------------
// Driver

#[derive(Debug, Clone, Default)]
pub struct GlobalOptions {
    pub compress: bool,
    /// Record automaton dumps for each stage.
    pub dump_stages: bool,
    /// Reserved fields the program may use (the virtual compiler's tags).
    pub allow_reserved: Vec<Field>,
}

#[derive(Debug, Clone, Default)]
pub struct GlobalReport {
    pub automaton_states: usize,
    pub determinized_states: usize,
    pub merged_states: usize,
    pub diagram_nodes: usize,
    pub stage_times: Vec<(&'static str, Duration)>,
    pub warnings: Vec<String>,
    pub dumps: Vec<(&'static str, String)>,
}

#[derive(Debug, Clone)]
pub struct GlobalOutput {
    /// The extracted local program.
    pub local: Fdd,
    pub tables: BTreeMap<Value, FlowTable>,
    pub report: GlobalReport,
}

/// Switch identifiers mentioned by the program, its ingress and egress
/// predicates, or its topology.
pub fn bundle_switches(bundle: &ProgramBundle) -> BTreeSet<Value> {
    let mut out = bundle.program.values_of(Field::Switch);
    out.extend(Policy::Filter(bundle.ingress.clone()).values_of(Field::Switch));
    out.extend(Policy::Filter(bundle.egress.clone()).values_of(Field::Switch));
    if let Some(links) = crate::interp::topology_links(&bundle.topology) {
        for (&(s1, _), dsts) in &links {
            out.insert(s1);
            out.extend(dsts.iter().map(|d| d.0));
        }
    }
    out.extend(ast::desugar_links(&bundle.topology).values_of(Field::Switch));
    collect_links(&bundle.program, &mut |s1, _, s2, _| {
        out.insert(s1);
        out.insert(s2);
    });
    out
}

fn collect_links(p: &Policy, f: &mut impl FnMut(Value, Value, Value, Value)) {
    match p {
        Policy::Link(a, b, c, d) => f(*a, *b, *c, *d),
        Policy::Union(x, y) | Policy::Seq(x, y) => {
            collect_links(x, f);
            collect_links(y, f);
        }
        Policy::Star(x) => collect_links(x, f),
        _ => {}
    }
}

/// Links used by the program that the topology does not provide.
pub fn missing_links(bundle: &ProgramBundle) -> Vec<String> {
    let topo = crate::interp::topology_links(&bundle.topology);
    let mut out = Vec::new();
    collect_links(&ast::resugar_links(&bundle.program), &mut |s1, p1, s2, p2| {
        let ok = topo
            .as_ref()
            .is_none_or(|m| m.get(&(s1, p1)).is_some_and(|v| v.contains(&(s2, p2))));
        if !ok {
            out.push(format!("link {s1}@{p1} => {s2}@{p2} is not in the topology"));
        }
    });
    out.sort();
    out.dedup();
    out
}

/// Stage timer. `wasm32-unknown-unknown` has no clock, so there every
/// stage takes zero time.
#[derive(Clone, Copy)]
struct Stopwatch(Option<Instant>);

impl Stopwatch {
    fn start() -> Stopwatch {
        Stopwatch(if cfg!(target_arch = "wasm32") { None } else { Some(Instant::now()) })
    }

    fn elapsed(self) -> Duration {
        self.0.map_or(Duration::ZERO, |t| t.elapsed())
    }
}

/// Runs every stage up to and including extraction.
pub fn compile_global_fdd(
    store: &mut FddStore,
    bundle: &ProgramBundle,
    opts: &GlobalOptions,
    report: &mut GlobalReport,
) -> Result<Fdd, GlobalError> {
    let timed = |name: &'static str, start: Stopwatch, report: &mut GlobalReport| {
        report.stage_times.push((name, start.elapsed()));
    };
    report.warnings.extend(missing_links(bundle));

    let t = Stopwatch::start();
    let annotated = prepare(&bundle.program, &opts.allow_reserved)?;
    let nfa = build_automaton(store, &annotated)?;
    timed("automaton", t, report);
    report.automaton_states = nfa.states.len();

    let t = Stopwatch::start();
    let det = determinize(store, &nfa);
    timed("determinize", t, report);
    report.determinized_states = det.states.len();

    let t = Stopwatch::start();
    let merged = merge_identical_states(store, &det);
    timed("merge", t, report);
    report.merged_states = merged.states.len();

    if opts.dump_stages {
        report.dumps.push(("automaton", dump_automaton(store, &nfa)));
        report.dumps.push(("determinized", dump_automaton(store, &det)));
        report.dumps.push(("merged", dump_automaton(store, &merged)));
    }

    let t = Stopwatch::start();
    let d = extract_local(store, &merged)?;
    timed("extract", t, report);
    report.diagram_nodes = store.size(d);
    Ok(d)
}

/// Per-switch tables of an extracted diagram.
pub fn tables_for(
    store: &mut FddStore,
    d: Fdd,
    switches: &BTreeSet<Value>,
    compress: bool,
) -> Result<BTreeMap<Value, FlowTable>, LocalError> {
    let mut tables = BTreeMap::new();
    for &sw in switches {
        let s = store.specialize(d, Field::Switch, sw);
        let t = if compress {
            local::to_flowtable_compressed(store, s, sw)?
        } else {
            local::to_flowtable(store, s, sw)?
        };
        tables.insert(sw, t);
    }
    Ok(tables)
}

/// The full pipeline: annotate, build, determinize, merge, extract, and
/// emit one table per switch.
pub fn compile_global(store: &mut FddStore, bundle: &ProgramBundle, opts: &GlobalOptions) -> Result<GlobalOutput, GlobalError> {
    let mut report = GlobalReport::default();
    let local = compile_global_fdd(store, bundle, opts, &mut report)?;
    let t = Stopwatch::start();
    let tables = tables_for(store, local, &bundle_switches(bundle), opts.compress)?;
    report.stage_times.push(("tables", t.elapsed()));
    Ok(GlobalOutput { local, tables, report })
}

/// Total number of rules over all tables.
pub fn total_rules(tables: &BTreeMap<Value, FlowTable>) -> usize {
    tables.values().map(FlowTable::len).sum()
}

/// The ingress predicate as a policy, for building `in; p; out` terms.
pub fn filter(a: &Predicate) -> Policy {
    Policy::Filter(a.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::parse;
    use crate::interp::{eval_policy, simulate, strip_pc};

    fn loc(sw: Value, pt: Value) -> Packet {
        Packet::from_pairs([(Field::Switch, sw), (Field::Port, pt)])
    }

    fn two_path() -> ProgramBundle {
        ProgramBundle {
            program: parse("(port = 1; port := 3; 1@3 => 2@3; port := 1) + (port = 2; port := 3; 1@3 => 2@3; port := 2)").unwrap(),
            ingress: ast::parse_predicate("switch = 1; (port = 1 + port = 2)").unwrap(),
            egress: ast::parse_predicate("switch = 2; (port = 1 + port = 2)").unwrap(),
            topology: parse("1@3 => 2@3").unwrap(),
        }
    }

    #[test]
    fn e_of_rows() {
        assert!(e_of(&Policy::dup()).is_drop());
        let a = parse("port = 1").unwrap();
        assert_eq!(e_of(&a), a);
        let m = parse("(port := 1)*").unwrap();
        assert_eq!(e_of(&m), m);
    }

    #[test]
    fn d_of_rows() {
        assert_eq!(d_of(&Policy::Dup(Some(1))), vec![DTriple { d: Policy::id(), label: 1, k: Policy::id() }]);
        assert!(d_of(&parse("port = 1").unwrap()).is_empty());
    }

    #[test]
    fn annotation_numbers_links() {
        let p = prepare(&parse("1@1 => 2@1; 2@2 => 3@1").unwrap(), &[]).unwrap();
        let mut labels = Vec::new();
        fn go(p: &Policy, out: &mut Vec<u32>) {
            match p {
                Policy::Dup(Some(l)) => out.push(*l),
                Policy::Union(a, b) | Policy::Seq(a, b) => {
                    go(a, out);
                    go(b, out);
                }
                Policy::Star(a) => go(a, out),
                _ => {}
            }
        }
        go(&p, &mut labels);
        assert_eq!(labels, vec![1, 2, 3, 4]);
        assert_eq!(annotate_dups(&p), p);
        let flat = parse("port := 1").unwrap();
        assert_eq!(annotate_dups(&flat), flat);
    }

    #[test]
    fn rejects_bare_dups() {
        assert!(matches!(prepare(&parse("dup").unwrap(), &[]), Err(GlobalError::NonBipartite(_))));
        assert!(matches!(prepare(&parse("switch := 2").unwrap(), &[]), Err(GlobalError::NonBipartite(_))));
        assert!(matches!(prepare(&parse("pc := 2").unwrap(), &[]), Err(GlobalError::ReservedField(Field::Pc))));
    }

    #[test]
    fn dup_free_program_has_one_state() {
        let mut s = FddStore::default();
        let p = prepare(&parse("port := 2").unwrap(), &[]).unwrap();
        let a = build_automaton(&mut s, &p).unwrap();
        assert_eq!(a.states.len(), 1);
        assert_eq!(a.states[&0].delta, Fdd::DROP);
    }

    #[test]
    fn two_path_automaton_and_tables() {
        let b = two_path();
        let mut s = FddStore::default();
        let p = prepare(&b.program, &[]).unwrap();
        let nfa = build_automaton(&mut s, &p).unwrap();
        assert_eq!(nfa.states.len(), 5);
        let det = determinize(&mut s, &nfa);
        let merged = merge_identical_states(&mut s, &det);
        assert!(merged.states.len() <= det.states.len());
        let out = compile_global(&mut s, &b, &GlobalOptions::default()).unwrap();
        let s2_pc_rules = out.tables[&2].rules.iter().filter(|r| r.pattern.iter().any(|(f, _)| *f == Field::Pc)).count();
        assert!(s2_pc_rules >= 2);
        for port in [1, 2] {
            let r = simulate(&b, &out.tables, &loc(1, port), 8).unwrap();
            let heads: BTreeSet<_> = r.delivered.iter().map(|h| h.head().location()).collect();
            assert_eq!(heads, BTreeSet::from([(2, port)]));
            let expect = crate::interp::eval_bundle(&b, &loc(1, port)).unwrap();
            assert_eq!(strip_pc(&r.delivered), expect);
        }
    }

    #[test]
    fn automaton_accepts_program_histories() {
        let src = parse("(port = 1; port := 3 + port = 2; port := 3); 1@3 => 2@3; (port := 1 + port := 2)").unwrap();
        let mut s = FddStore::default();
        let nfa = build_automaton(&mut s, &prepare(&src, &[]).unwrap()).unwrap();
        let det = determinize(&mut s, &nfa);
        let merged = merge_identical_states(&mut s, &det);
        let pks: Vec<Packet> = (0..4).map(|p| loc(1, p)).collect();
        assert!(is_deterministic(&s, &det, &pks));
        for pk in &pks {
            let expect = eval_policy(&src, &History::new(*pk)).unwrap();
            assert_eq!(accepted_histories(&s, &nfa, pk, 10), expect);
            assert_eq!(accepted_histories(&s, &det, pk, 10), expect);
            assert_eq!(accepted_histories(&s, &merged, pk, 10), expect);
        }
    }

    #[test]
    fn duplicated_program_is_made_deterministic() {
        let b = two_path();
        let doubled = Policy::union(b.program.clone(), b.program.clone());
        let mut s = FddStore::default();
        let nfa = build_automaton(&mut s, &prepare(&doubled, &[]).unwrap()).unwrap();
        let det = determinize(&mut s, &nfa);
        let pks: Vec<Packet> = (0..4).flat_map(|sw| (0..4).map(move |p| loc(sw, p))).collect();
        assert!(is_deterministic(&s, &det, &pks));
        for pk in &pks {
            let expect = eval_policy(&b.program, &History::new(*pk)).unwrap();
            assert_eq!(accepted_histories(&s, &det, pk, 10), expect);
        }
    }

    #[test]
    fn collisions_are_split() {
        // The identity and `port := 1` collide exactly on port-1 packets.
        let src = parse("(1@1 => 2@1) + (port := 1; 1@1 => 2@1; port := 5)").unwrap();
        let mut s = FddStore::default();
        let nfa = build_automaton(&mut s, &prepare(&src, &[]).unwrap()).unwrap();
        let det = determinize(&mut s, &nfa);
        let pks: Vec<Packet> = (0..3).map(|p| loc(1, p)).collect();
        assert!(is_deterministic(&s, &det, &pks));
        for pk in &pks {
            let expect = eval_policy(&src, &History::new(*pk)).unwrap();
            assert_eq!(accepted_histories(&s, &det, pk, 10), expect);
        }
    }

    #[test]
    fn degenerate_local_case() {
        let b = ProgramBundle {
            program: parse("port = 1; port := 2").unwrap(),
            ingress: ast::parse_predicate("port = 1").unwrap(),
            egress: ast::parse_predicate("port = 2").unwrap(),
            topology: Policy::drop(),
        };
        let mut s = FddStore::default();
        let out = compile_global(&mut s, &b, &GlobalOptions::default()).unwrap();
        assert!(out.tables.is_empty());
        let t = local::to_flowtable(&s, out.local, 0).unwrap();
        assert_eq!(t.rules[0].pattern, vec![(Field::Port, 1), (Field::Pc, 0)]);
    }

    #[test]
    fn missing_links_are_reported() {
        let mut b = two_path();
        b.topology = Policy::drop();
        assert_eq!(missing_links(&b).len(), 1);
    }
}
