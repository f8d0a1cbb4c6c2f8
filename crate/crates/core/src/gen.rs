//! Seeded random programs and exhaustive packet domains, shared by the
//! property tests, the acceptance suite and the benchmarks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ast::{Field, Policy, Predicate, ProgramBundle, Value};
use crate::interp::Packet;
use crate::topo::{locations_pred, topology_policy, Topology};

/// Shape of generated dup-free programs.
#[derive(Debug, Clone)]
pub struct LocalGen {
    /// Fields that may be tested.
    pub tested: Vec<Field>,
    /// Fields that may be written.
    pub written: Vec<Field>,
    /// Values are drawn from `0..values`.
    pub values: Value,
    pub max_depth: usize,
    /// Whether `*` may appear.
    pub star: bool,
}

impl LocalGen {
    /// Four fields, values 0 to 3, depth at most 6.
    pub fn standard() -> LocalGen {
        let fields = vec![Field::Port, Field::EthDst, Field::Vlan, Field::IpProto];
        LocalGen { tested: fields.clone(), written: fields, values: 4, max_depth: 6, star: true }
    }

    fn value<R: Rng>(&self, rng: &mut R) -> Value {
        rng.gen_range(0..self.values)
    }

    pub fn predicate<R: Rng>(&self, rng: &mut R, depth: usize) -> Predicate {
        if depth <= 1 || rng.gen_bool(0.4) {
            return match rng.gen_range(0..10) {
                0 => Predicate::True,
                1 => Predicate::False,
                _ => Predicate::test(*self.tested.choose(rng).unwrap(), self.value(rng)),
            };
        }
        match rng.gen_range(0..3) {
            0 => Predicate::and(self.predicate(rng, depth - 1), self.predicate(rng, depth - 1)),
            1 => Predicate::or(self.predicate(rng, depth - 1), self.predicate(rng, depth - 1)),
            _ => Predicate::not(self.predicate(rng, depth - 1)),
        }
    }

    /// A program whose syntax tree is at most `depth` deep.
    pub fn policy<R: Rng>(&self, rng: &mut R, depth: usize) -> Policy {
        if depth <= 1 || rng.gen_bool(0.25) {
            return if self.written.is_empty() || rng.gen_bool(0.5) {
                Policy::Filter(self.predicate(rng, depth))
            } else {
                Policy::modify(*self.written.choose(rng).unwrap(), self.value(rng))
            };
        }
        let choices = if self.star { 5 } else { 4 };
        match rng.gen_range(0..choices) {
            0 | 1 => Policy::union(self.policy(rng, depth - 1), self.policy(rng, depth - 1)),
            2 | 3 => Policy::seq(self.policy(rng, depth - 1), self.policy(rng, depth - 1)),
            _ => Policy::star(self.policy(rng, depth - 1)),
        }
    }

    pub fn program<R: Rng>(&self, rng: &mut R) -> Policy {
        self.policy(rng, self.max_depth)
    }

    /// Every packet over the tested and written fields.
    pub fn packets(&self) -> Vec<Packet> {
        let mut fields = self.tested.clone();
        for f in &self.written {
            if !fields.contains(f) {
                fields.push(*f);
            }
        }
        packets(&fields, 0..self.values)
    }
}

/// The cartesian product of `range` over `fields`; other fields are 0.
pub fn packets(fields: &[Field], range: std::ops::Range<Value>) -> Vec<Packet> {
    let mut out = vec![Packet::default()];
    for &f in fields {
        out = out
            .into_iter()
            .flat_map(|pk| range.clone().map(move |v| pk.with(f, v)))
            .collect();
    }
    out
}

/// A program with links drawn from `t`, at most `max_links` of them and
/// none under a star, whose local parts never write the switch. Ingress and
/// egress are the host ports.
pub fn global_bundle<R: Rng>(rng: &mut R, t: &Topology, max_links: usize) -> ProgramBundle {
    let local = LocalGen {
        tested: vec![Field::Switch, Field::Port, Field::EthDst],
        written: vec![Field::Port, Field::EthDst],
        values: 4,
        max_depth: 3,
        star: true,
    };
    let budget = rng.gen_range(1..=max_links.max(1));
    let program = global_policy(rng, t, &local, budget, 4);
    let hosts = locations_pred(t.host_locations());
    ProgramBundle { program, ingress: hosts.clone(), egress: hosts, topology: topology_policy(t) }
}

fn global_policy<R: Rng>(rng: &mut R, t: &Topology, local: &LocalGen, links: usize, depth: usize) -> Policy {
    if links == 0 {
        return local.program(rng);
    }
    if links == 1 && (depth == 0 || rng.gen_bool(0.4)) {
        let l = t.links.choose(rng).expect("topology has links");
        let hop = Policy::link(l.src.0, l.src.1, l.dst.0, l.dst.1);
        return if rng.gen_bool(0.6) { Policy::seq(Policy::modify(Field::Port, l.src.1), hop) } else { hop };
    }
    let depth = depth.saturating_sub(1);
    let left = rng.gen_range(0..=links);
    let (a, b) = (left, links - left);
    if rng.gen_bool(0.5) {
        Policy::seq(global_policy(rng, t, local, a, depth), global_policy(rng, t, local, b, depth))
    } else {
        Policy::union(global_policy(rng, t, local, a, depth), global_policy(rng, t, local, b, depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred_depth(a: &Predicate) -> usize {
        match a {
            Predicate::And(x, y) | Predicate::Or(x, y) => 1 + pred_depth(x).max(pred_depth(y)),
            Predicate::Not(x) => 1 + pred_depth(x),
            _ => 1,
        }
    }

    fn depth(p: &Policy) -> usize {
        match p {
            Policy::Filter(a) => pred_depth(a),
            Policy::Union(a, b) | Policy::Seq(a, b) => 1 + depth(a).max(depth(b)),
            Policy::Star(a) => 1 + depth(a),
            _ => 1,
        }
    }

    #[test]
    fn programs_respect_the_depth_bound() {
        let g = LocalGen::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            assert!(depth(&g.program(&mut rng)) <= g.max_depth);
        }
    }

    #[test]
    fn packet_domain_is_complete() {
        assert_eq!(LocalGen::standard().packets().len(), 256);
        assert_eq!(packets(&[], 0..4).len(), 1);
    }

    #[test]
    fn global_programs_stay_within_the_link_budget() {
        fn count(p: &Policy) -> usize {
            match p {
                Policy::Link(..) => 1,
                Policy::Union(a, b) | Policy::Seq(a, b) => count(a) + count(b),
                Policy::Star(a) => count(a),
                _ => 0,
            }
        }
        let t = crate::topo::line(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let b = global_bundle(&mut rng, &t, 3);
            assert!(count(&b.program) <= 3);
            assert!(crate::global::prepare(&b.program, &[]).is_ok());
        }
    }
}
