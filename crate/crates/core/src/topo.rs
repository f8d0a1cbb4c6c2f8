//! Physical topologies, their JSON form, and the benchmark generators.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{Field, Policy, Predicate, ProgramBundle, Value};

pub type Location = (Value, Value);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub src: Location,
    pub dst: Location,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl Link {
    pub fn weight_or_default(&self) -> f64 {
        self.weight.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Host {
    pub id: Value,
    pub switch: Value,
    pub port: Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Topology {
    #[serde(default)]
    pub switches: BTreeSet<Value>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default)]
    pub hosts: Vec<Host>,
    /// When set, every listed link also exists in the reverse direction.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub symmetric: bool,
}

#[derive(Debug, Error)]
pub enum TopoError {
    #[error("malformed topology: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read topology file: {0}")]
    Io(#[from] std::io::Error),
    #[error("switch {0} port {1} has more than one outgoing link")]
    DuplicateEgress(Value, Value),
    #[error("link from switch {0} port {1} has a negative weight")]
    NegativeWeight(Value, Value),
    #[error("fat trees need an even arity of at least 2, got {0}")]
    OddArity(usize),
}

impl Topology {
    /// Parses and validates the JSON form, expanding symmetric links.
    pub fn from_json_str(text: &str) -> Result<Topology, TopoError> {
        let mut t: Topology = serde_json::from_str(text)?;
        if t.symmetric {
            let reversed: Vec<Link> = t
                .links
                .iter()
                .map(|l| Link { src: l.dst, dst: l.src, weight: l.weight })
                .collect();
            t.links.extend(reversed);
            t.symmetric = false;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("topologies always serialize")
    }

    pub fn validate(&mut self) -> Result<(), TopoError> {
        let mut seen = BTreeSet::new();
        for l in &self.links {
            if !seen.insert(l.src) {
                return Err(TopoError::DuplicateEgress(l.src.0, l.src.1));
            }
            if l.weight.is_some_and(|w| w.is_nan() || w < 0.0) {
                return Err(TopoError::NegativeWeight(l.src.0, l.src.1));
            }
            self.switches.insert(l.src.0);
            self.switches.insert(l.dst.0);
        }
        for h in &self.hosts {
            self.switches.insert(h.switch);
        }
        Ok(())
    }

    /// Adds a link in both directions.
    pub fn connect(&mut self, a: Location, b: Location) {
        self.switches.insert(a.0);
        self.switches.insert(b.0);
        self.links.push(Link { src: a, dst: b, weight: None });
        self.links.push(Link { src: b, dst: a, weight: None });
    }

    pub fn attach_host(&mut self, id: Value, switch: Value, port: Value) {
        self.switches.insert(switch);
        self.hosts.push(Host { id, switch, port });
    }

    pub fn link_from(&self, loc: Location) -> Option<&Link> {
        self.links.iter().find(|l| l.src == loc)
    }

    /// Every port mentioned on `sw`, by links in either direction or hosts.
    pub fn ports_of(&self, sw: Value) -> BTreeSet<Value> {
        let mut out = BTreeSet::new();
        for l in &self.links {
            if l.src.0 == sw {
                out.insert(l.src.1);
            }
            if l.dst.0 == sw {
                out.insert(l.dst.1);
            }
        }
        for h in self.hosts.iter().filter(|h| h.switch == sw) {
            out.insert(h.port);
        }
        out
    }

    pub fn host_locations(&self) -> BTreeSet<Location> {
        self.hosts.iter().map(|h| (h.switch, h.port)).collect()
    }

    /// Outgoing links grouped by source switch, sorted by source port.
    pub fn adjacency(&self) -> BTreeMap<Value, Vec<&Link>> {
        let mut adj: BTreeMap<Value, Vec<&Link>> = BTreeMap::new();
        for l in &self.links {
            adj.entry(l.src.0).or_default().push(l);
        }
        for v in adj.values_mut() {
            v.sort_by_key(|l| l.src.1);
        }
        adj
    }
}

pub fn load_topology(path: &Path) -> Result<Topology, TopoError> {
    Topology::from_json_str(&std::fs::read_to_string(path)?)
}

/// The topology as a union of links; empty topologies are `drop`.
pub fn topology_policy(t: &Topology) -> Policy {
    Policy::union_all(t.links.iter().map(|l| Policy::link(l.src.0, l.src.1, l.dst.0, l.dst.1)))
}

/// `sw = s; pt = p` summed over the given locations.
pub fn locations_pred<I: IntoIterator<Item = Location>>(locs: I) -> Predicate {
    Predicate::or_all(locs.into_iter().map(|(s, p)| {
        Predicate::and(Predicate::test(Field::Switch, s), Predicate::test(Field::Port, p))
    }))
}

/// Bundle whose ingress and egress are the host-facing ports.
pub fn host_bundle(t: &Topology, program: Policy) -> ProgramBundle {
    let hosts = locations_pred(t.host_locations());
    ProgramBundle {
        program,
        ingress: hosts.clone(),
        egress: hosts,
        topology: topology_policy(t),
    }
}

/// Switches `1..=n` in a cycle. Host `i` sits on port 1 of switch `i`;
/// port 2 leads clockwise and port 3 counter-clockwise.
pub fn ring(n: Value) -> Topology {
    let mut t = Topology::default();
    for i in 1..=n {
        t.attach_host(i, i, 1);
    }
    if n >= 2 {
        for i in 1..=n {
            let next = i % n + 1;
            if n == 2 && i == 2 {
                break;
            }
            t.connect((i, 2), (next, 3));
        }
    }
    t
}

/// Switches `1..=n` in a path, ports as in [`ring`].
pub fn line(n: Value) -> Topology {
    let mut t = Topology::default();
    for i in 1..=n {
        t.attach_host(i, i, 1);
    }
    for i in 1..n {
        t.connect((i, 2), (i + 1, 3));
    }
    t
}

/// Switch numbering of a k-ary fat tree.
#[derive(Debug, Clone, Copy)]
pub struct FatTreeLayout {
    pub k: Value,
}

impl FatTreeLayout {
    fn half(&self) -> Value {
        self.k / 2
    }

    pub fn core_count(&self) -> Value {
        self.half() * self.half()
    }

    /// Core switches are `1..=(k/2)^2`.
    pub fn core(&self, i: Value) -> Value {
        1 + i
    }

    pub fn agg(&self, pod: Value, j: Value) -> Value {
        1 + self.core_count() + pod * self.k + j
    }

    pub fn edge(&self, pod: Value, j: Value) -> Value {
        1 + self.core_count() + pod * self.k + self.half() + j
    }

    pub fn host_count(&self) -> Value {
        self.k * self.k * self.k / 4
    }

    /// Host ids start at 1 and fill edge switches in order.
    pub fn host(&self, pod: Value, edge: Value, slot: Value) -> Value {
        1 + (pod * self.half() + edge) * self.half() + slot
    }

    /// `(pod, edge, slot)` of a host id.
    pub fn host_position(&self, id: Value) -> (Value, Value, Value) {
        let h = self.half();
        let i = id - 1;
        (i / (h * h), (i / h) % h, i % h)
    }
}

/// A k-pod fat tree with a destination-routing program keyed on `ethDst`.
///
/// Ports: edge switches use `1..=k/2` for hosts and `k/2+1+j` for
/// aggregation switch `j`; aggregation switches use `1+i` for edge switch
/// `i` and `k/2+1+c` for their `c`-th core; cores use `1+pod`. Upward
/// traffic picks its uplink from its in-port, so only downward routing
/// depends on the destination.
pub fn fat_tree(k: usize) -> Result<(Topology, Policy), TopoError> {
    if k < 2 || k % 2 == 1 {
        return Err(TopoError::OddArity(k));
    }
    let lay = FatTreeLayout { k: k as Value };
    let h = lay.half();
    let mut t = Topology::default();
    for c in 0..lay.core_count() {
        t.switches.insert(lay.core(c));
    }
    for pod in 0..lay.k {
        for j in 0..h {
            for e in 0..h {
                t.connect((lay.edge(pod, e), h + 1 + j), (lay.agg(pod, j), 1 + e));
            }
            for c in 0..h {
                t.connect((lay.agg(pod, j), h + 1 + c), (lay.core(j * h + c), 1 + pod));
            }
        }
        for e in 0..h {
            for slot in 0..h {
                t.attach_host(lay.host(pod, e, slot), lay.edge(pod, e), 1 + slot);
            }
        }
    }

    let dst = |id: Value| Policy::test(Field::EthDst, id);
    let fwd = |port: Value| Policy::modify(Field::Port, port);
    let at = |sw: Value, body: Policy| Policy::seq(Policy::test(Field::Switch, sw), body);
    // Sends non-matching traffic from down port `i` to up port `k/2 + i`.
    let uplinks = |local: Vec<Value>| {
        let not_local = Policy::Filter(Predicate::not(Predicate::or_all(
            local.into_iter().map(|id| Predicate::test(Field::EthDst, id)),
        )));
        let up = Policy::union_all((1..=h).map(|i| Policy::seq(Policy::test(Field::Port, i), fwd(h + i))));
        Policy::seq(not_local, up)
    };

    let mut parts = Vec::new();
    for c in 0..lay.core_count() {
        let mut rules = Vec::new();
        for pod in 0..lay.k {
            for e in 0..h {
                for slot in 0..h {
                    rules.push(Policy::seq(dst(lay.host(pod, e, slot)), fwd(1 + pod)));
                }
            }
        }
        parts.push(at(lay.core(c), Policy::union_all(rules)));
    }
    for pod in 0..lay.k {
        let pod_hosts: Vec<Value> = (0..h).flat_map(|e| (0..h).map(move |s| (e, s))).map(|(e, s)| lay.host(pod, e, s)).collect();
        for j in 0..h {
            let mut rules: Vec<Policy> = pod_hosts
                .iter()
                .map(|&id| Policy::seq(dst(id), fwd(1 + lay.host_position(id).1)))
                .collect();
            rules.push(uplinks(pod_hosts.clone()));
            parts.push(at(lay.agg(pod, j), Policy::union_all(rules)));
        }
        for e in 0..h {
            let local: Vec<Value> = (0..h).map(|s| lay.host(pod, e, s)).collect();
            let mut rules: Vec<Policy> = local.iter().enumerate().map(|(s, &id)| Policy::seq(dst(id), fwd(1 + s as Value))).collect();
            rules.push(uplinks(local));
            parts.push(at(lay.edge(pod, e), Policy::union_all(rules)));
        }
    }
    Ok((t, Policy::union_all(parts)))
}

/// For every destination switch, the next hop from each switch along a
/// shortest-path tree rooted at the destination. Ties go to the lowest
/// neighbour switch id, then to the lowest out-port.
pub fn next_hops(t: &Topology) -> BTreeMap<Value, BTreeMap<Value, Value>> {
    let mut incoming: HashMap<Value, Vec<&Link>> = HashMap::new();
    for l in &t.links {
        incoming.entry(l.dst.0).or_default().push(l);
    }
    let mut out = BTreeMap::new();
    for &root in &t.switches {
        let dist = bfs_distances(&incoming, root);
        let mut hop = BTreeMap::new();
        for (&sw, &d) in &dist {
            if d == 0 {
                continue;
            }
            let best = t
                .links
                .iter()
                .filter(|l| l.src.0 == sw && dist.get(&l.dst.0) == Some(&(d - 1)))
                .min_by_key(|l| (l.dst.0, l.src.1));
            if let Some(l) = best {
                hop.insert(sw, l.src.1);
            }
        }
        out.insert(root, hop);
    }
    out
}

fn bfs_distances(incoming: &HashMap<Value, Vec<&Link>>, root: Value) -> BTreeMap<Value, usize> {
    let mut dist = BTreeMap::from([(root, 0usize)]);
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        let mut preds: Vec<Value> = incoming.get(&v).into_iter().flatten().map(|l| l.src.0).collect();
        preds.sort_unstable();
        for u in preds {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(u) {
                e.insert(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

/// Destination-based routing: at every switch, packets for host `d` (by
/// `ethDst`) follow the shortest-path tree rooted at `d`'s switch. Hosts
/// unreachable from some switch are skipped there and reported.
pub fn destination_routing(t: &Topology) -> (Policy, Vec<String>) {
    let hops = next_hops(t);
    let mut warnings = Vec::new();
    let mut parts = Vec::new();
    for &sw in &t.switches {
        let mut rules = Vec::new();
        for h in &t.hosts {
            let port = if h.switch == sw {
                Some(h.port)
            } else {
                hops.get(&h.switch).and_then(|m| m.get(&sw)).copied()
            };
            match port {
                Some(p) => rules.push(Policy::seq(
                    Policy::test(Field::EthDst, h.id),
                    Policy::modify(Field::Port, p),
                )),
                None => warnings.push(format!("host {} is unreachable from switch {sw}", h.id)),
            }
        }
        if !rules.is_empty() {
            parts.push(Policy::seq(Policy::test(Field::Switch, sw), Policy::union_all(rules)));
        }
    }
    (Policy::union_all(parts), warnings)
}

/// One explicit path per ordered host pair, written with links. At each
/// switch the path to a destination follows a shortest-path tree; equal
/// choices are broken by a seeded generator, once per (switch, destination).
pub fn random_global_paths(t: &Topology, seed: u64) -> ProgramBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut incoming: HashMap<Value, Vec<&Link>> = HashMap::new();
    for l in &t.links {
        incoming.entry(l.dst.0).or_default().push(l);
    }
    let mut choice: BTreeMap<(Value, Value), &Link> = BTreeMap::new();
    let roots: BTreeSet<Value> = t.hosts.iter().map(|h| h.switch).collect();
    for &root in &roots {
        let dist = bfs_distances(&incoming, root);
        for (&sw, &d) in &dist {
            if d == 0 {
                continue;
            }
            let mut options: Vec<&Link> = t
                .links
                .iter()
                .filter(|l| l.src.0 == sw && dist.get(&l.dst.0) == Some(&(d - 1)))
                .collect();
            options.sort_by_key(|l| l.src);
            let pick = options[rng.gen_range(0..options.len())];
            choice.insert((sw, root), pick);
        }
    }

    let mut paths = Vec::new();
    for a in &t.hosts {
        for b in &t.hosts {
            if a.id == b.id {
                continue;
            }
            let mut terms = vec![
                Policy::test(Field::Switch, a.switch),
                Policy::test(Field::Port, a.port),
                Policy::test(Field::EthDst, b.id),
            ];
            let mut at = a.switch;
            let mut reachable = true;
            while at != b.switch {
                match choice.get(&(at, b.switch)) {
                    Some(l) => {
                        terms.push(Policy::modify(Field::Port, l.src.1));
                        terms.push(Policy::link(l.src.0, l.src.1, l.dst.0, l.dst.1));
                        at = l.dst.0;
                    }
                    None => {
                        reachable = false;
                        break;
                    }
                }
            }
            if reachable {
                terms.push(Policy::modify(Field::Port, b.port));
                paths.push(Policy::seq_all(terms));
            }
        }
    }
    host_bundle(t, Policy::union_all(paths))
}

/// A connected pseudo-random topology: a random spanning tree plus extra
/// edges, one host per switch on port 1.
pub fn random_topology(n: Value, extra_edges: usize, seed: u64) -> Topology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Topology::default();
    let mut next_port: BTreeMap<Value, Value> = BTreeMap::new();
    let mut port = |sw: Value| {
        let p = next_port.entry(sw).or_insert(2);
        *p += 1;
        *p - 1
    };
    for i in 1..=n {
        t.attach_host(i, i, 1);
    }
    let mut edges = BTreeSet::new();
    for i in 2..=n {
        let j = rng.gen_range(1..i);
        edges.insert((j, i));
    }
    let mut attempts = 0;
    while edges.len() < (n as usize - 1) + extra_edges && attempts < 100 * (extra_edges + 1) {
        attempts += 1;
        let a = rng.gen_range(1..=n);
        let b = rng.gen_range(1..=n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    for (a, b) in edges {
        let pa = port(a);
        let pb = port(b);
        t.connect((a, pa), (b, pb));
    }
    t
}

/// Reads a program bundle: `program`, `ingress` and `egress` are NetKAT
/// text; `topology` is NetKAT text or a topology object.
pub fn bundle_from_json(j: &serde_json::Value) -> Result<ProgramBundle, String> {
    let text = |key: &str| -> Result<&str, String> {
        j.get(key).and_then(|v| v.as_str()).ok_or_else(|| format!("bundle needs a string `{key}`"))
    };
    let program = crate::ast::parse(text("program")?).map_err(|e| format!("program: {e}"))?;
    let ingress = crate::ast::parse_predicate(text("ingress")?).map_err(|e| format!("ingress: {e}"))?;
    let egress = crate::ast::parse_predicate(text("egress")?).map_err(|e| format!("egress: {e}"))?;
    let topology = match j.get("topology") {
        Some(serde_json::Value::String(s)) => crate::ast::parse(s).map_err(|e| format!("topology: {e}"))?,
        Some(obj @ serde_json::Value::Object(_)) => {
            let t = Topology::from_json_str(&obj.to_string()).map_err(|e| e.to_string())?;
            topology_policy(&t)
        }
        Some(_) => return Err("`topology` must be NetKAT text or a topology object".into()),
        None => Policy::drop(),
    };
    Ok(ProgramBundle { program, ingress, egress, topology })
}

pub fn bundle_to_json(b: &ProgramBundle) -> serde_json::Value {
    serde_json::json!({
        "program": crate::ast::pretty(&b.program),
        "ingress": crate::ast::pretty_pred(&b.ingress),
        "egress": crate::ast::pretty_pred(&b.egress),
        "topology": crate::ast::pretty(&b.topology),
    })
}

/// Fields matched by the generated access-control lists.
pub const ACL_FIELDS: [Field; 5] = [Field::Ip4Src, Field::Ip4Dst, Field::IpProto, Field::TcpSrcPort, Field::TcpDstPort];

/// An access-control list as an if-then-else chain: each entry matches at
/// least two of the five classifier fields over a small value range, so
/// entries overlap and shadow each other, and either forwards or denies.
pub fn acl_program(entries: usize, seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain: Vec<(Predicate, Policy)> = Vec::with_capacity(entries);
    for _ in 0..entries {
        let mut tests = Vec::new();
        let forced = rng.gen_range(0..ACL_FIELDS.len());
        for (i, &f) in ACL_FIELDS.iter().enumerate() {
            if i == forced || i == (forced + 1) % ACL_FIELDS.len() || rng.gen_bool(0.4) {
                tests.push(Predicate::test(f, rng.gen_range(0..6)));
            }
        }
        let action = if rng.gen_bool(0.3) {
            Policy::drop()
        } else {
            Policy::modify(Field::Port, rng.gen_range(1..=4))
        };
        chain.push((Predicate::and_all(tests), action));
    }
    let mut p = Policy::drop();
    for (m, a) in chain.into_iter().rev() {
        p = Policy::union(
            Policy::seq(Policy::Filter(m.clone()), a),
            Policy::seq(Policy::Filter(Predicate::not(m)), p),
        );
    }
    p
}
