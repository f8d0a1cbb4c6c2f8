//! Global and virtual pipeline properties, and the topology generators.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use netkat::fdd::FddStore;
use netkat::gen;
use netkat::global::{self, GlobalOptions};
use netkat::interp::{eval_policy, simulate, History, Packet};
use netkat::local::{self, TableOptions};
use netkat::topo::{self, Topology};
use netkat::{Field, Policy};

fn line_packets() -> Vec<Packet> {
    gen::packets(&[Field::Switch, Field::Port, Field::EthDst], 0..4)
        .into_iter()
        .filter(|pk| pk.get(Field::Switch) > 0)
        .collect()
}

fn bundle(seed: u64) -> netkat::ProgramBundle {
    gen::global_bundle(&mut ChaCha8Rng::seed_from_u64(seed), &topo::line(3), 3)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    /// A program is its dup-free part plus one term per first dup.
    #[test]
    fn programs_split_at_their_first_dup(seed in any::<u64>()) {
        let p = global::prepare(&bundle(seed).program, &[]).unwrap();
        let e = global::e_of(&p);
        let rebuilt = global::d_of(&p).into_iter().fold(e, |acc, t| {
            Policy::union(acc, Policy::seq_all([t.d, Policy::Dup(Some(t.label)), t.k]))
        });
        for pk in line_packets() {
            let h = History::new(pk);
            prop_assert_eq!(eval_policy(&rebuilt, &h).unwrap(), eval_policy(&p, &h).unwrap());
        }
    }

    /// Each automaton stage accepts exactly the program's histories.
    #[test]
    fn automata_accept_the_program_histories(seed in any::<u64>()) {
        let program = bundle(seed).program;
        let mut store = FddStore::default();
        let nfa = global::build_automaton(&mut store, &global::prepare(&program, &[]).unwrap()).unwrap();
        let det = global::determinize(&mut store, &nfa);
        let merged = global::merge_identical_states(&mut store, &det);
        prop_assert!(merged.states.len() <= det.states.len());
        for pk in line_packets() {
            let want = eval_policy(&program, &History::new(pk)).unwrap();
            prop_assert_eq!(&global::accepted_histories(&store, &nfa, &pk, 8), &want);
            prop_assert_eq!(&global::accepted_histories(&store, &det, &pk, 8), &want);
            prop_assert_eq!(&global::accepted_histories(&store, &merged, &pk, 8), &want);
        }
    }

    #[test]
    fn destination_routing_reaches_every_host(seed in any::<u64>(), n in 2u64..9, extra in 0usize..4) {
        let t = topo::random_topology(n, extra, seed);
        let (p, warnings) = topo::destination_routing(&t);
        prop_assert!(warnings.is_empty());
        let mut store = FddStore::default();
        let (tables, _) = local::compile_tables(&mut store, &p, &t.switches, TableOptions::default()).unwrap();
        let b = topo::host_bundle(&t, Policy::drop());
        for src in &t.hosts {
            for dst in &t.hosts {
                let pk = Packet::default().with(Field::Switch, src.switch).with(Field::Port, src.port).with(Field::EthDst, dst.id);
                let r = simulate(&b, &tables, &pk, 2 * n as usize + 2).unwrap();
                let got: BTreeSet<_> = r.delivered.iter().map(|h| h.head().location()).collect();
                prop_assert_eq!(got, BTreeSet::from([(dst.switch, dst.port)]));
            }
        }
    }
}

#[test]
fn global_paths_cover_every_pair_and_are_reproducible() {
    let t = topo::ring(5);
    let b = topo::random_global_paths(&t, 4);
    fn terms(p: &Policy) -> usize {
        match p {
            Policy::Union(a, b) => terms(a) + terms(b),
            _ => 1,
        }
    }
    assert_eq!(terms(&b.program), 5 * 4);
    assert_eq!(topo::random_global_paths(&t, 4).program, b.program);
    let mut store = FddStore::default();
    let out = global::compile_global(&mut store, &b, &GlobalOptions::default()).unwrap();
    for src in &t.hosts {
        for dst in &t.hosts {
            if src.id == dst.id {
                continue;
            }
            let pk = Packet::default().with(Field::Switch, src.switch).with(Field::Port, src.port).with(Field::EthDst, dst.id);
            let r = simulate(&b, &out.tables, &pk, 16).unwrap();
            let got: BTreeSet<_> = r.delivered.iter().map(|h| h.head().location()).collect();
            assert_eq!(got, BTreeSet::from([(dst.switch, dst.port)]));
        }
    }
}

#[test]
fn fat_tree_counts_follow_the_closed_forms() {
    for k in [2usize, 4, 6, 8] {
        let (t, _) = topo::fat_tree(k).unwrap();
        let half = k / 2;
        assert_eq!(t.switches.len(), half * half + k * k, "k = {k}");
        assert_eq!(t.hosts.len(), k * k * k / 4, "k = {k}");
    }
    assert!(topo::fat_tree(3).is_err());
    assert!(topo::fat_tree(0).is_err());
}

#[test]
fn ring_rule_volume_grows_quadratically() {
    let sizes = [4u64, 8, 16, 32, 64];
    let points: Vec<(f64, f64)> = sizes
        .iter()
        .map(|&n| {
            let t = topo::ring(n);
            let (p, _) = topo::destination_routing(&t);
            let mut store = FddStore::default();
            let (tables, _) = local::compile_tables(&mut store, &p, &t.switches, TableOptions::default()).unwrap();
            ((n as f64).ln(), (global::total_rules(&tables) as f64).ln())
        })
        .collect();
    let m = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let slope = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / points.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    assert!((slope - 2.0).abs() <= 0.2, "fitted exponent {slope}");
}

#[test]
fn links_move_packets_and_record_both_ends() {
    let t = topo::line(3);
    let p = topo::topology_policy(&t);
    for l in &t.links {
        let pk = Packet::default().with(Field::Switch, l.src.0).with(Field::Port, l.src.1);
        let out = eval_policy(&p, &History::new(pk)).unwrap();
        assert_eq!(out.len(), 1);
        let h = out.into_iter().next().unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.head().location(), l.dst);
    }
    let off = Packet::default().with(Field::Switch, 1).with(Field::Port, 1);
    assert!(eval_policy(&p, &History::new(off)).unwrap().is_empty());
    assert!(topo::topology_policy(&Topology::default()).is_drop());
}

#[test]
fn sample_topology_fixture_loads() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/sample25.json");
    let t = topo::load_topology(&path).unwrap();
    assert_eq!(t.switches.len(), 25);
    let (_, warnings) = topo::destination_routing(&t);
    assert!(warnings.is_empty());
}

#[test]
fn duplicate_egress_ports_are_rejected() {
    let text = r#"{"links":[{"src":[1,2],"dst":[2,1]},{"src":[1,2],"dst":[3,1]}]}"#;
    assert!(matches!(Topology::from_json_str(text), Err(topo::TopoError::DuplicateEgress(1, 2))));
    let neg = r#"{"links":[{"src":[1,2],"dst":[2,1],"weight":-1}]}"#;
    assert!(matches!(Topology::from_json_str(neg), Err(topo::TopoError::NegativeWeight(1, 2))));
}
