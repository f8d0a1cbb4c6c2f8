//! Benchmark suites. Each row is the mean wall-clock time of one stage over
//! the requested repeats, with the rule count of the last run.

use std::collections::BTreeSet;
use std::time::Instant;

use clap::ValueEnum;

use netkat::fdd::FddStore;
use netkat::global::{self, GlobalOptions};
use netkat::local::{self, TableOptions};
use netkat::topo;
use netkat::Value;

use crate::CliError;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Destination routing on k-pod fat trees.
    FatTree,
    /// Destination routing on rings, local compiler.
    RingLocal,
    /// Explicit host-to-host paths on rings, global compiler.
    RingGlobal,
    /// Destination routing on random connected graphs.
    Zoo,
    /// Naive and compressed tables for generated access-control lists.
    Acl,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::FatTree => "fat-tree",
            Suite::RingLocal => "ring-local",
            Suite::RingGlobal => "ring-global",
            Suite::Zoo => "zoo",
            Suite::Acl => "acl",
        }
    }

    fn default_sizes(self) -> Vec<usize> {
        match self {
            Suite::FatTree => vec![2, 4, 8],
            Suite::RingLocal | Suite::Zoo => vec![4, 8, 16, 32, 64],
            Suite::RingGlobal => vec![4, 8, 16],
            Suite::Acl => vec![25, 50, 100, 200],
        }
    }
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T, CliError>) -> Result<(f64, T), CliError> {
    let mut total = 0.0;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let r = f()?;
        total += start.elapsed().as_secs_f64() * 1e3;
        last = Some(r);
    }
    Ok((total / repeats.max(1) as f64, last.unwrap()))
}

fn local_rules(p: &netkat::Policy, switches: &BTreeSet<Value>, compress: bool) -> Result<usize, CliError> {
    let mut store = FddStore::default();
    let opts = TableOptions { compress, ..TableOptions::default() };
    let (tables, _) = local::compile_tables(&mut store, p, switches, opts)?;
    Ok(global::total_rules(&tables))
}

pub fn run(suite: Suite, sizes: &[usize], repeats: usize, seed: u64) -> Result<(), CliError> {
    let sizes = if sizes.is_empty() { suite.default_sizes() } else { sizes.to_vec() };
    println!("suite,size,stage,mean_ms,rules_total");
    let row = |size: usize, stage: &str, ms: f64, rules: usize| {
        println!("{},{size},{stage},{ms:.3},{rules}", suite.name());
    };
    for size in sizes {
        match suite {
            Suite::FatTree => {
                let (t, p) = topo::fat_tree(size).map_err(|e| CliError::Input(e.to_string()))?;
                let (ms, rules) = timed(repeats, || local_rules(&p, &t.switches, false))?;
                row(size, "local", ms, rules);
            }
            Suite::RingLocal | Suite::Zoo => {
                let t = if suite == Suite::Zoo {
                    topo::random_topology(size as Value, size / 2, seed)
                } else {
                    topo::ring(size as Value)
                };
                let (p, _) = topo::destination_routing(&t);
                let (ms, rules) = timed(repeats, || local_rules(&p, &t.switches, false))?;
                row(size, "local", ms, rules);
            }
            Suite::RingGlobal => {
                let t = topo::ring(size as Value);
                let b = topo::random_global_paths(&t, seed);
                let (p, _) = topo::destination_routing(&t);
                for compress in [false, true] {
                    let suffix = if compress { "-compressed" } else { "" };
                    let (ms, rules) = timed(repeats, || {
                        let mut store = FddStore::default();
                        let opts = GlobalOptions { compress, ..GlobalOptions::default() };
                        let out = global::compile_global(&mut store, &b, &opts)?;
                        Ok(global::total_rules(&out.tables))
                    })?;
                    row(size, &format!("global{suffix}"), ms, rules);
                    let (ms, rules) = timed(repeats, || local_rules(&p, &t.switches, compress))?;
                    row(size, &format!("local{suffix}"), ms, rules);
                }
            }
            Suite::Acl => {
                let p = topo::acl_program(size, seed);
                let sw = BTreeSet::from([0]);
                let (ms, rules) = timed(repeats, || {
                    let mut store = FddStore::default();
                    let d = local::compile_local(&mut store, &p)?;
                    Ok(local::to_flowtable(&store, d, 0)?.len())
                })?;
                row(size, "naive", ms, rules);
                let (ms, rules) = timed(repeats, || local_rules(&p, &sw, true))?;
                row(size, "compressed", ms, rules);
            }
        }
    }
    Ok(())
}
