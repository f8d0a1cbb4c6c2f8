//! Virtual compilation.
//!
//! A virtual program runs on a virtual topology whose ports are related to
//! physical ports. Packets carry their virtual location in `vswitch` and
//! `vport`. A two-player game between the virtual program (V) and the
//! fabric (F) decides how physical packets follow virtual ones; a chosen
//! fabric is encoded as NetKAT and the assembled program goes through the
//! global compiler, after which the virtual fields are gone.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{Field, Policy, Predicate, ProgramBundle, Value};
use crate::fdd::{Fdd, FddError, FddStore};
use crate::global::{self, GlobalError, GlobalOptions, GlobalReport};
use crate::local::{FlowTable, LocalError};
use crate::topo::{locations_pred, topology_policy, Location, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dir {
    I,
    O,
}

/// A physical port, or the marker for a packet parked at an output port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PPort {
    Port(Value),
    Loop(Value),
}

impl PPort {
    pub fn number(self) -> Value {
        match self {
            PPort::Port(p) | PPort::Loop(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VLoc {
    pub sw: Value,
    pub pt: Value,
    pub dir: Dir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PLoc {
    pub sw: Value,
    pub pt: PPort,
    pub dir: Dir,
}

/// A location in the physical network graph (no loop markers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Loc {
    pub sw: Value,
    pub pt: Value,
    pub dir: Dir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GameNode {
    pub v: VLoc,
    pub p: PLoc,
}

impl GameNode {
    /// V moves where the two locations agree in direction, F elsewhere.
    pub fn is_fabric_turn(&self) -> bool {
        self.v.dir != self.p.dir
    }
}

impl fmt::Display for GameNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.p.pt {
            PPort::Port(x) => x.to_string(),
            PPort::Loop(x) => format!("Loop {x}"),
        };
        write!(
            f,
            "[({},{},{:?}); ({},{},{:?})]",
            self.v.sw, self.v.pt, self.v.dir, self.p.sw, p, self.p.dir
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    VPol,
    VTopo,
    FOut,
    FIn,
    FLoopIn,
    FLoopOut,
}

/// The virtual-physical port relation with the physical ingress and
/// egress locations.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VRelation {
    pub relation: Vec<(Location, Location)>,
    #[serde(default)]
    pub ingress: Vec<Location>,
    #[serde(default)]
    pub egress: Vec<Location>,
}

impl VRelation {
    pub fn from_json_str(text: &str) -> Result<VRelation, VirtError> {
        let r: VRelation = serde_json::from_str(text).map_err(|e| VirtError::InvalidRelation(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn physical_of(&self, v: Location) -> impl Iterator<Item = Location> + '_ {
        self.relation.iter().filter(move |(a, _)| *a == v).map(|(_, b)| *b)
    }

    pub fn virtual_of(&self, p: Location) -> impl Iterator<Item = Location> + '_ {
        self.relation.iter().filter(move |(_, b)| *b == p).map(|(a, _)| *a)
    }

    pub fn related(&self, v: Location, p: Location) -> bool {
        self.relation.contains(&(v, p))
    }

    /// Each physical ingress (egress) may stand for at most one virtual port.
    pub fn validate(&self) -> Result<(), VirtError> {
        for (what, locs) in [("ingress", &self.ingress), ("egress", &self.egress)] {
            for &l in locs {
                let vs: BTreeSet<Location> = self.virtual_of(l).collect();
                if vs.len() > 1 {
                    return Err(VirtError::InvalidRelation(format!(
                        "physical {what} {}:{} is related to {} virtual ports",
                        l.0,
                        l.1,
                        vs.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FabricMetric {
    /// Fewest distinct physical links over the whole fabric (greedy).
    Links,
    /// Fewest link traversals per path.
    Hops,
    /// Least total link weight per path.
    Distance,
}

impl FromStr for FabricMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "links" => Ok(FabricMetric::Links),
            "hops" => Ok(FabricMetric::Hops),
            "distance" => Ok(FabricMetric::Distance),
            other => Err(format!("unknown metric `{other}` (expected links, hops or distance)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VirtError {
    #[error("invalid relation: {0}")]
    InvalidRelation(String),
    #[error("no fabric exists: ingress node {0} is fatal")]
    NoFabric(String),
    #[error("virtual program rejected: {0}")]
    BadProgram(String),
    #[error("virtual fields survived compilation: {0}")]
    VirtualFieldsRemain(String),
    #[error(transparent)]
    Global(#[from] GlobalError),
    #[error(transparent)]
    Local(#[from] LocalError),
    #[error(transparent)]
    Fdd(#[from] FddError),
}

// ---------------------------------------------------------------------------
// Instrumentation

fn rename_pred(a: &Predicate, f: &impl Fn(Field) -> Field) -> Predicate {
    match a {
        Predicate::Test(x, v) => Predicate::Test(f(*x), *v),
        Predicate::Or(x, y) => Predicate::or(rename_pred(x, f), rename_pred(y, f)),
        Predicate::And(x, y) => Predicate::and(rename_pred(x, f), rename_pred(y, f)),
        Predicate::Not(x) => Predicate::not(rename_pred(x, f)),
        other => other.clone(),
    }
}

/// Renames fields in every test and modification. Links are left alone.
pub fn rename_fields(p: &Policy, f: &impl Fn(Field) -> Field) -> Policy {
    match p {
        Policy::Filter(a) => Policy::Filter(rename_pred(a, f)),
        Policy::Mod(x, v) => Policy::Mod(f(*x), *v),
        Policy::Union(a, b) => Policy::union(rename_fields(a, f), rename_fields(b, f)),
        Policy::Seq(a, b) => Policy::seq(rename_fields(a, f), rename_fields(b, f)),
        Policy::Star(a) => Policy::star(rename_fields(a, f)),
        other => other.clone(),
    }
}

fn to_virtual(f: Field) -> Field {
    match f {
        Field::Switch => Field::VSwitch,
        Field::Port => Field::VPort,
        other => other,
    }
}

/// `sw = s; pt = p; vswitch := vs; vport := vp` for each physical ingress
/// and its related virtual port. Unrelated ingresses admit nothing.
pub fn instrument_ingress(rel: &VRelation) -> Result<Policy, VirtError> {
    rel.validate()?;
    let mut terms = Vec::new();
    for &(sw, pt) in &rel.ingress {
        for (vs, vp) in rel.virtual_of((sw, pt)) {
            terms.push(Policy::seq_all([
                Policy::test(Field::Switch, sw),
                Policy::test(Field::Port, pt),
                Policy::modify(Field::VSwitch, vs),
                Policy::modify(Field::VPort, vp),
            ]));
        }
    }
    Ok(Policy::union_all(terms))
}

/// Moves the program and the virtual topology onto `vswitch`/`vport`.
/// Virtual links become plain location updates, without dups.
pub fn lift_virtual(v: &Policy, vt: &Policy) -> (Policy, Policy) {
    fn lift_links(p: &Policy) -> Policy {
        match p {
            Policy::Link(a, b, c, d) => Policy::seq_all([
                Policy::test(Field::VSwitch, *a),
                Policy::test(Field::VPort, *b),
                Policy::modify(Field::VSwitch, *c),
                Policy::modify(Field::VPort, *d),
            ]),
            Policy::Union(x, y) => Policy::union(lift_links(x), lift_links(y)),
            Policy::Seq(x, y) => Policy::seq(lift_links(x), lift_links(y)),
            Policy::Star(x) => Policy::star(lift_links(x)),
            other => other.clone(),
        }
    }
    (rename_fields(v, &to_virtual), lift_links(&rename_fields(vt, &to_virtual)))
}

// ---------------------------------------------------------------------------
// Physical graph

struct PhysGraph {
    ports: BTreeMap<Value, BTreeSet<Value>>,
    links: BTreeMap<Location, (Location, f64)>,
}

impl PhysGraph {
    fn new(t: &Topology) -> PhysGraph {
        let ports = t.switches.iter().map(|&s| (s, t.ports_of(s))).collect();
        let links = t.links.iter().map(|l| (l.src, (l.dst, l.weight_or_default()))).collect();
        PhysGraph { ports, links }
    }

    /// One step: across a switch from an input, or across a link from an output.
    fn succ(&self, l: Loc) -> Vec<(Loc, Option<(Location, f64)>)> {
        match l.dir {
            Dir::I => self
                .ports
                .get(&l.sw)
                .into_iter()
                .flatten()
                .map(|&p| (Loc { sw: l.sw, pt: p, dir: Dir::O }, None))
                .collect(),
            Dir::O => match self.links.get(&(l.sw, l.pt)) {
                Some(&(dst, w)) => vec![(Loc { sw: dst.0, pt: dst.1, dir: Dir::I }, Some(((l.sw, l.pt), w)))],
                None => vec![],
            },
        }
    }

    /// Locations reachable in one or more steps.
    fn reach_plus(&self, from: Loc) -> BTreeSet<Loc> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<Loc> = self.succ(from).into_iter().map(|x| x.0).collect();
        while let Some(l) = queue.pop_front() {
            if seen.insert(l) {
                queue.extend(self.succ(l).into_iter().map(|x| x.0));
            }
        }
        seen
    }
}

// ---------------------------------------------------------------------------
// Game graph

#[derive(Debug, Clone, Default)]
pub struct GameGraph {
    pub ingress: Vec<GameNode>,
    pub edges: BTreeMap<GameNode, Vec<(EdgeKind, GameNode)>>,
}

impl GameGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &GameNode> {
        self.edges.keys()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn successors(&self, n: &GameNode) -> &[(EdgeKind, GameNode)] {
        self.edges.get(n).map_or(&[], |v| v.as_slice())
    }
}

fn virtual_ports(rel: &VRelation, vlinks: &BTreeMap<Location, Vec<Location>>) -> BTreeMap<Value, BTreeSet<Value>> {
    let mut out: BTreeMap<Value, BTreeSet<Value>> = BTreeMap::new();
    for ((vs, vp), _) in &rel.relation {
        out.entry(*vs).or_default().insert(*vp);
    }
    for (&(s1, p1), dsts) in vlinks {
        out.entry(s1).or_default().insert(p1);
        for &(s2, p2) in dsts {
            out.entry(s2).or_default().insert(p2);
        }
    }
    out
}

fn virtual_links(vt: &Policy) -> Result<BTreeMap<Location, Vec<Location>>, VirtError> {
    crate::interp::topology_links(vt)
        .ok_or_else(|| VirtError::BadProgram("the virtual topology must be a union of links".into()))
}

/// All game nodes reachable from the ingress nodes, with their edges.
pub fn build_game_graph(rel: &VRelation, vt: &Policy, phys: &Topology) -> Result<GameGraph, VirtError> {
    let vlinks = virtual_links(vt)?;
    let vports = virtual_ports(rel, &vlinks);
    let g = PhysGraph::new(phys);
    let mut reach_cache: HashMap<Loc, BTreeSet<Loc>> = HashMap::new();
    let mut reach = |l: Loc| reach_cache.entry(l).or_insert_with(|| g.reach_plus(l)).clone();

    let mut ingress = Vec::new();
    for &(sw, pt) in &rel.ingress {
        for (vs, vp) in rel.virtual_of((sw, pt)) {
            ingress.push(GameNode {
                v: VLoc { sw: vs, pt: vp, dir: Dir::I },
                p: PLoc { sw, pt: PPort::Port(pt), dir: Dir::I },
            });
        }
    }
    ingress.sort();
    ingress.dedup();

    let mut edges: BTreeMap<GameNode, Vec<(EdgeKind, GameNode)>> = BTreeMap::new();
    let mut queue: VecDeque<GameNode> = ingress.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        if edges.contains_key(&n) {
            continue;
        }
        let mut out = Vec::new();
        let vloc = (n.v.sw, n.v.pt);
        let (sw, pn) = (n.p.sw, n.p.pt.number());
        match (n.v.dir, n.p.dir, n.p.pt) {
            (Dir::I, Dir::I, _) => {
                for &vp in vports.get(&n.v.sw).into_iter().flatten() {
                    out.push((EdgeKind::VPol, GameNode { v: VLoc { pt: vp, dir: Dir::O, ..n.v }, p: n.p }));
                }
            }
            (Dir::O, Dir::O, _) => {
                for &(vs2, vp2) in vlinks.get(&vloc).into_iter().flatten() {
                    out.push((EdgeKind::VTopo, GameNode { v: VLoc { sw: vs2, pt: vp2, dir: Dir::I }, p: n.p }));
                }
            }
            (Dir::O, Dir::I, port) => {
                let (kind, targets) = match port {
                    PPort::Port(_) => (EdgeKind::FOut, reach(Loc { sw, pt: pn, dir: Dir::I })),
                    PPort::Loop(_) => {
                        let start = Loc { sw, pt: pn, dir: Dir::O };
                        let mut r = reach(start);
                        r.insert(start);
                        (EdgeKind::FLoopOut, r)
                    }
                };
                for l in targets.into_iter().filter(|l| l.dir == Dir::O && rel.related(vloc, (l.sw, l.pt))) {
                    out.push((kind, GameNode { v: n.v, p: PLoc { sw: l.sw, pt: PPort::Port(l.pt), dir: Dir::O } }));
                }
            }
            (Dir::I, Dir::O, _) => {
                let start = Loc { sw, pt: pn, dir: Dir::O };
                for l in reach(start).into_iter().filter(|l| l.dir == Dir::I && rel.related(vloc, (l.sw, l.pt))) {
                    out.push((EdgeKind::FIn, GameNode { v: n.v, p: PLoc { sw: l.sw, pt: PPort::Port(l.pt), dir: Dir::I } }));
                }
                if rel.related(vloc, (sw, pn)) {
                    out.push((EdgeKind::FLoopIn, GameNode { v: n.v, p: PLoc { sw, pt: PPort::Loop(pn), dir: Dir::I } }));
                }
            }
        }
        for (_, m) in &out {
            if !edges.contains_key(m) {
                queue.push_back(*m);
            }
        }
        edges.insert(n, out);
    }
    Ok(GameGraph { ingress, edges })
}

/// Nodes from which F cannot always restore consistency.
pub fn fatal_nodes(g: &GameGraph) -> BTreeSet<GameNode> {
    let mut fatal = BTreeSet::new();
    loop {
        let mut changed = false;
        for (n, succ) in &g.edges {
            if fatal.contains(n) {
                continue;
            }
            let dead = if n.is_fabric_turn() {
                succ.iter().all(|(_, m)| fatal.contains(m))
            } else {
                succ.iter().any(|(_, m)| fatal.contains(m))
            };
            if dead {
                fatal.insert(*n);
                changed = true;
            }
        }
        if !changed {
            return fatal;
        }
    }
}

/// Removes fatal nodes and the edges into them.
pub fn prune_fatal(g: &GameGraph) -> GameGraph {
    let fatal = fatal_nodes(g);
    let edges = g
        .edges
        .iter()
        .filter(|(n, _)| !fatal.contains(n))
        .map(|(n, succ)| (*n, succ.iter().filter(|(_, m)| !fatal.contains(m)).copied().collect()))
        .collect();
    let ingress = g.ingress.iter().filter(|n| !fatal.contains(n)).copied().collect();
    GameGraph { ingress, edges }
}

// ---------------------------------------------------------------------------
// Fabric selection

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricEdge {
    pub kind: EdgeKind,
    pub from: GameNode,
    pub to: GameNode,
    /// Physical locations visited after the start, in order.
    pub path: Vec<Loc>,
}

impl FabricEdge {
    fn start(&self) -> Loc {
        let dir = match self.from.p.pt {
            PPort::Loop(_) => Dir::O,
            PPort::Port(_) => self.from.p.dir,
        };
        Loc { sw: self.from.p.sw, pt: self.from.p.pt.number(), dir }
    }

    /// Physical links traversed, as source locations.
    pub fn links(&self) -> Vec<(Location, Location)> {
        let mut out = Vec::new();
        let mut prev = self.start();
        for &l in &self.path {
            if prev.dir == Dir::O && l.dir == Dir::I {
                out.push(((prev.sw, prev.pt), (l.sw, l.pt)));
            }
            prev = l;
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct Fabric {
    pub nodes: BTreeSet<GameNode>,
    /// The chosen F-edge of each F-node in the fabric.
    pub edges: BTreeMap<GameNode, FabricEdge>,
}

impl Fabric {
    pub fn links(&self) -> BTreeSet<(Location, Location)> {
        self.edges.values().flat_map(FabricEdge::links).collect()
    }

    /// Edge list with chosen paths, one per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in self.edges.values() {
            let path: Vec<String> = e.path.iter().map(|l| format!("({},{},{:?})", l.sw, l.pt, l.dir)).collect();
            s.push_str(&format!("{:?} {} -> {} via [{}]\n", e.kind, e.from, e.to, path.join(" ")));
        }
        s
    }
}

#[derive(Clone, Copy)]
struct Cost(f64);

impl PartialEq for Cost {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Cheapest path from `start` to any target, ordered by metric cost, then
/// link count, then the visited locations.
fn cheapest_path(
    g: &PhysGraph,
    start: Loc,
    targets: &BTreeSet<Loc>,
    allow_empty: bool,
    metric: FabricMetric,
    used: &BTreeSet<Location>,
) -> Option<Vec<Loc>> {
    if allow_empty && targets.contains(&start) {
        return Some(Vec::new());
    }
    let mut heap = BinaryHeap::from([Reverse((Cost(0.0), 0usize, Vec::<Loc>::new(), start))]);
    let mut settled = BTreeSet::new();
    while let Some(Reverse((cost, hops, path, at))) = heap.pop() {
        if !path.is_empty() && targets.contains(&at) {
            return Some(path);
        }
        if !settled.insert(at) {
            continue;
        }
        for (next, link) in g.succ(at) {
            if settled.contains(&next) && !targets.contains(&next) {
                continue;
            }
            let (step, h) = match link {
                None => (0.0, 0),
                Some((src, w)) => {
                    let c = match metric {
                        FabricMetric::Hops => 1.0,
                        FabricMetric::Distance => w,
                        FabricMetric::Links => {
                            if used.contains(&src) {
                                0.0
                            } else {
                                1.0
                            }
                        }
                    };
                    (c, 1)
                }
            };
            let mut p = path.clone();
            p.push(next);
            heap.push(Reverse((Cost(cost.0 + step), hops + h, p, next)));
        }
    }
    None
}

/// Greedy fabric: from the ingresses, follow every V-edge and, at each
/// F-node, the single edge whose physical path is cheapest.
pub fn select_fabric(g: &GameGraph, phys: &Topology, metric: FabricMetric) -> Result<Fabric, VirtError> {
    let fatal = fatal_nodes(g);
    if let Some(n) = g.ingress.iter().find(|n| fatal.contains(n)) {
        return Err(VirtError::NoFabric(n.to_string()));
    }
    let pruned = prune_fatal(g);
    let pg = PhysGraph::new(phys);
    let mut used: BTreeSet<Location> = BTreeSet::new();
    let mut fabric = Fabric::default();
    let mut queue: VecDeque<GameNode> = pruned.ingress.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        if !fabric.nodes.insert(n) {
            continue;
        }
        let succ = pruned.successors(&n);
        if !n.is_fabric_turn() {
            queue.extend(succ.iter().map(|(_, m)| *m));
            continue;
        }
        let edge = if let Some(&(kind, to)) = succ.iter().find(|(k, _)| *k == EdgeKind::FLoopIn) {
            FabricEdge { kind, from: n, to, path: Vec::new() }
        } else {
            let targets: BTreeMap<Loc, (EdgeKind, GameNode)> = succ
                .iter()
                .map(|&(k, m)| (Loc { sw: m.p.sw, pt: m.p.pt.number(), dir: m.p.dir }, (k, m)))
                .collect();
            let probe = FabricEdge { kind: EdgeKind::FOut, from: n, to: n, path: vec![] };
            let start = probe.start();
            let keys: BTreeSet<Loc> = targets.keys().copied().collect();
            let allow_empty = matches!(n.p.pt, PPort::Loop(_));
            let path = cheapest_path(&pg, start, &keys, allow_empty, metric, &used)
                .expect("surviving F-nodes have a reachable successor");
            let end = path.last().copied().unwrap_or(start);
            let (kind, to) = targets[&end];
            FabricEdge { kind, from: n, to, path }
        };
        for (src, _) in edge.links() {
            used.insert(src);
        }
        queue.push_back(edge.to);
        fabric.edges.insert(n, edge);
    }
    Ok(fabric)
}

/// The four parts of the fabric as programs: regular F-out edges, F-out
/// edges leaving a parked packet, F-in edges that move the packet, and
/// F-in edges that park it.
#[derive(Debug, Clone)]
pub struct FabricPolicies {
    pub fout: Policy,
    pub fout_loop: Policy,
    pub fin: Policy,
    pub fin_loop: Policy,
}

fn encode_edge(e: &FabricEdge) -> Policy {
    let mut terms = vec![
        Policy::test(Field::VSwitch, e.from.v.sw),
        Policy::test(Field::VPort, e.from.v.pt),
        Policy::test(Field::Switch, e.from.p.sw),
        Policy::test(Field::Port, e.from.p.pt.number()),
    ];
    let mut prev = e.start();
    for &l in &e.path {
        if prev.dir == Dir::I {
            terms.push(Policy::modify(Field::Port, l.pt));
        } else {
            terms.push(Policy::link(prev.sw, prev.pt, l.sw, l.pt));
        }
        prev = l;
    }
    terms.push(Policy::modify(Field::VSwitch, e.to.v.sw));
    terms.push(Policy::modify(Field::VPort, e.to.v.pt));
    Policy::seq_all(terms)
}

pub fn fabric_to_policies(f: &Fabric) -> FabricPolicies {
    let pick = |kind: EdgeKind| Policy::union_all(f.edges.values().filter(|e| e.kind == kind).map(encode_edge));
    FabricPolicies {
        fout: pick(EdgeKind::FOut),
        fout_loop: pick(EdgeKind::FLoopOut),
        fin: pick(EdgeKind::FIn),
        fin_loop: pick(EdgeKind::FLoopIn),
    }
}

// ---------------------------------------------------------------------------
// Assembly

/// Puts a virtual program with links into local form with the global
/// compiler; its automaton state is kept in `vlan`.
pub fn localize_virtual(store: &mut FddStore, v: &Policy, vt: &Policy) -> Result<Policy, VirtError> {
    let mut has_links = false;
    fn scan(p: &Policy, found: &mut bool) {
        match p {
            Policy::Link(..) | Policy::Dup(_) => *found = true,
            Policy::Union(a, b) | Policy::Seq(a, b) => {
                scan(a, found);
                scan(b, found);
            }
            Policy::Star(a) => scan(a, found),
            _ => {}
        }
    }
    scan(v, &mut has_links);
    if !has_links {
        return Ok(v.clone());
    }
    if v.fields().contains(&Field::Vlan) {
        return Err(VirtError::BadProgram("a global virtual program may not use vlan".into()));
    }
    let bundle = ProgramBundle {
        program: v.clone(),
        ingress: Predicate::True,
        egress: Predicate::True,
        topology: vt.clone(),
    };
    let d = global::compile_global_fdd(store, &bundle, &GlobalOptions::default(), &mut GlobalReport::default())?;
    let p = store.to_policy(d);
    Ok(rename_fields(&p, &|f| if f == Field::Pc { Field::Vlan } else { f }))
}

/// `in'; v; fout; (vt; (fin; v; fout + fin_loop; v; fout_loop))*; out`.
pub fn assemble(rel: &VRelation, v: &Policy, vt: &Policy, f: &FabricPolicies) -> Result<Policy, VirtError> {
    let ingress = instrument_ingress(rel)?;
    let (lv, lvt) = lift_virtual(v, vt);
    let out = Policy::Filter(locations_pred(rel.egress.iter().copied()));
    let step = Policy::union(
        Policy::seq_all([f.fin.clone(), lv.clone(), f.fout.clone()]),
        Policy::seq_all([f.fin_loop.clone(), lv.clone(), f.fout_loop.clone()]),
    );
    Ok(Policy::seq_all([ingress, lv, f.fout.clone(), Policy::star(Policy::seq(lvt, step)), out]))
}

#[derive(Debug, Clone)]
pub struct VirtualOutput {
    pub fabric: Fabric,
    pub program: Policy,
    pub bundle: ProgramBundle,
    pub local: Fdd,
    pub tables: BTreeMap<Value, FlowTable>,
    pub report: GlobalReport,
    pub game_nodes: usize,
    pub pruned_nodes: usize,
}

/// The physical bundle the assembled program runs in.
pub fn physical_bundle(rel: &VRelation, phys: &Topology, program: Policy) -> ProgramBundle {
    ProgramBundle {
        program,
        ingress: locations_pred(rel.ingress.iter().copied()),
        egress: locations_pred(rel.egress.iter().copied()),
        topology: topology_policy(phys),
    }
}

pub fn compile_virtual(
    store: &mut FddStore,
    v: &Policy,
    vt: &Policy,
    rel: &VRelation,
    phys: &Topology,
    metric: FabricMetric,
    compress: bool,
) -> Result<VirtualOutput, VirtError> {
    for f in [Field::Pc, Field::VSwitch, Field::VPort] {
        if v.fields().contains(&f) {
            return Err(VirtError::BadProgram(format!("the virtual program uses {f}")));
        }
    }
    if v.written_fields().contains(&Field::Switch) && !contains_link(v) {
        return Err(VirtError::BadProgram("the virtual program writes switch".into()));
    }
    let v = localize_virtual(store, v, vt)?;
    let game = build_game_graph(rel, vt, phys)?;
    let pruned = prune_fatal(&game);
    let fabric = select_fabric(&game, phys, metric)?;
    let program = assemble(rel, &v, vt, &fabric_to_policies(&fabric))?;
    let bundle = physical_bundle(rel, phys, program.clone());

    let mut report = GlobalReport::default();
    let opts = GlobalOptions { allow_reserved: vec![Field::VSwitch, Field::VPort], ..GlobalOptions::default() };
    let d = global::compile_global_fdd(store, &bundle, &opts, &mut report)?;
    let tested = store.tested_fields(d);
    if let Some(f) = [Field::VSwitch, Field::VPort].into_iter().find(|f| tested.contains(f)) {
        return Err(VirtError::VirtualFieldsRemain(format!("tables would match on {f}")));
    }
    let local = store.map_leaves(d, |acts| {
        acts.iter().map(|a| a.without(Field::VSwitch).without(Field::VPort)).collect()
    });
    let tables = global::tables_for(store, local, &phys.switches, compress)?;
    Ok(VirtualOutput {
        fabric,
        program,
        bundle,
        local,
        tables,
        report,
        game_nodes: game.len(),
        pruned_nodes: pruned.len(),
    })
}

fn contains_link(p: &Policy) -> bool {
    match p {
        Policy::Link(..) => true,
        Policy::Union(a, b) | Policy::Seq(a, b) => contains_link(a) || contains_link(b),
        Policy::Star(a) => contains_link(a),
        _ => false,
    }
}
