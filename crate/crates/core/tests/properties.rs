//! Algebraic and semantic properties of the front end, the diagram store
//! and local table generation, over seeded random programs.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use netkat::fdd::{Fdd, FddStore};
use netkat::gen::LocalGen;
use netkat::interp::{eval_flowtable, eval_packet, Packet};
use netkat::local::{self, FlowTable};
use netkat::{parse, pretty, Field, Policy};

fn small() -> LocalGen {
    LocalGen { max_depth: 4, ..LocalGen::standard() }
}

fn program(seed: u64) -> Policy {
    small().program(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn same_semantics(store: &FddStore, d: Fdd, p: &Policy, packets: &[Packet]) -> bool {
    packets.iter().all(|pk| store.eval(d, pk) == eval_packet(p, pk).unwrap())
}

/// Match patterns are conjunctions, so their order carries no meaning.
fn sorted(mut t: FlowTable) -> FlowTable {
    for r in &mut t.rules {
        r.pattern.sort();
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pretty_then_parse_is_identity_on_normal_forms(seed in any::<u64>()) {
        let p = program(seed).normalize_filters();
        prop_assert_eq!(parse(&pretty(&p)).unwrap(), p);
    }

    #[test]
    fn compiled_diagrams_agree_with_the_interpreter(seed in any::<u64>()) {
        let p = program(seed);
        let mut store = FddStore::default();
        let d = local::compile_policy(&mut store, &p).unwrap();
        prop_assert!(store.check_wf(d));
        prop_assert!(same_semantics(&store, d, &p, &small().packets()));
    }

    #[test]
    fn union_is_canonical(a in any::<u64>(), b in any::<u64>()) {
        let mut store = FddStore::default();
        let x = local::compile_policy(&mut store, &program(a)).unwrap();
        let y = local::compile_policy(&mut store, &program(b)).unwrap();
        let xy = store.union(x, y);
        prop_assert_eq!(xy, store.union(y, x));
        prop_assert_eq!(store.union(xy, x), xy);
        prop_assert_eq!(store.union(x, Fdd::DROP), x);
    }

    #[test]
    fn sequencing_has_units_and_zeros(a in any::<u64>()) {
        let mut store = FddStore::default();
        let x = local::compile_policy(&mut store, &program(a)).unwrap();
        prop_assert_eq!(store.seq(Fdd::ID, x), x);
        prop_assert_eq!(store.seq(x, Fdd::ID), x);
        prop_assert_eq!(store.seq(x, Fdd::DROP), Fdd::DROP);
        prop_assert_eq!(store.seq(Fdd::DROP, x), Fdd::DROP);
    }

    #[test]
    fn star_unfolds(a in any::<u64>()) {
        let mut store = FddStore::default();
        let x = local::compile_policy(&mut store, &program(a)).unwrap();
        let s = store.star(x).unwrap();
        let step = store.seq(x, s);
        prop_assert_eq!(store.union(Fdd::ID, step), s);
        prop_assert_eq!(store.star(s).unwrap(), s);
    }

    #[test]
    fn negation_is_an_involution_on_predicates(a in any::<u64>()) {
        let g = small();
        let pred = g.predicate(&mut ChaCha8Rng::seed_from_u64(a), 4);
        let mut store = FddStore::default();
        let d = local::compile_pred(&mut store, &pred).unwrap();
        let n = store.negate(d).unwrap();
        prop_assert_eq!(store.negate(n).unwrap(), d);
        prop_assert_eq!(store.union(d, n), Fdd::ID);
    }

    #[test]
    fn compressed_tables_are_equivalent_and_no_larger(a in any::<u64>()) {
        let p = program(a);
        let mut store = FddStore::default();
        let d = local::compile_local(&mut store, &p).unwrap();
        let naive = local::to_flowtable(&store, d, 0).unwrap();
        let packed = local::to_flowtable_compressed(&store, d, 0).unwrap();
        prop_assert!(packed.len() <= naive.len());
        for pk in small().packets() {
            prop_assert_eq!(eval_flowtable(&packed, &pk), eval_flowtable(&naive, &pk));
        }
    }

    #[test]
    fn tables_survive_json(a in any::<u64>()) {
        let mut store = FddStore::default();
        let d = local::compile_local(&mut store, &program(a)).unwrap();
        let t = local::to_flowtable(&store, d, 7).unwrap();
        prop_assert_eq!(sorted(FlowTable::from_json(&t.to_json()).unwrap()), sorted(t));
    }

    #[test]
    fn switch_specialization_agrees_with_diagram_cofactors(a in any::<u64>(), sw in 0u64..3) {
        let g = LocalGen {
            tested: vec![Field::Switch, Field::Port, Field::EthDst],
            written: vec![Field::Port, Field::EthDst],
            values: 3,
            max_depth: 4,
            star: true,
        };
        let p = g.program(&mut ChaCha8Rng::seed_from_u64(a));
        let mut store = FddStore::default();
        let whole = local::compile_policy(&mut store, &p).unwrap();
        let by_diagram = store.specialize(whole, Field::Switch, sw);
        let by_policy = local::compile_policy(&mut store, &local::specialize_by_switch(&p, sw)).unwrap();
        let packets: Vec<Packet> = g.packets().into_iter().filter(|pk| pk.get(Field::Switch) == sw).collect();
        for pk in &packets {
            prop_assert_eq!(store.eval(by_diagram, pk), store.eval(by_policy, pk));
        }
    }
}

#[test]
fn field_order_changes_shape_but_not_meaning() {
    let p = parse("ipProto = 80; ip4Dst = 10.0.0.1; port := 1 + ipProto = 80; ip4Dst = 10.0.0.2; port := 2").unwrap();
    let orders = [[Field::IpProto, Field::Ip4Dst], [Field::Ip4Dst, Field::IpProto]];
    let mut sizes = BTreeSet::new();
    for order in orders {
        let mut store = FddStore::new(netkat::FieldOrder::with_prefix(&order));
        let d = local::compile_local(&mut store, &p).unwrap();
        sizes.insert(store.size(d));
        for proto in [0, 80] {
            for dst in [0x0a00_0001, 0x0a00_0002, 3] {
                let pk = Packet::default().with(Field::IpProto, proto).with(Field::Ip4Dst, dst);
                assert_eq!(store.eval(d, &pk), eval_packet(&p, &pk).unwrap());
            }
        }
    }
    assert_eq!(sizes.len(), 2, "the two orders should give differently sized diagrams");
}
