mod bench;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value as Json};

use netkat::fdd::{FddError, FddStore, FieldOrder};
use netkat::global::{self, GlobalError, GlobalOptions, GlobalReport};
use netkat::interp::{self, Packet};
use netkat::local::{self, FlowTable, LocalError, Specialization, TableOptions};
use netkat::topo::{self, Topology};
use netkat::virt::{self, FabricMetric, VRelation, VirtError};
use netkat::{Field, Value};

#[derive(Parser)]
#[command(name = "netkat", version, about = "Compile NetKAT programs to flow tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PcField {
    Pc,
    Vlan,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SpecializeBy {
    Policy,
    Diagram,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Links,
    Hops,
    Distance,
}

impl From<Metric> for FabricMetric {
    fn from(m: Metric) -> FabricMetric {
        match m {
            Metric::Links => FabricMetric::Links,
            Metric::Hops => FabricMetric::Hops,
            Metric::Distance => FabricMetric::Distance,
        }
    }
}

#[derive(clap::Args)]
struct TableFlags {
    /// Emit tables with shadowed rules removed.
    #[arg(long)]
    compress: bool,
    /// Comma-separated field order for diagram tests, e.g. `ipProto,ip4Dst`.
    #[arg(long)]
    order: Option<String>,
    /// Write the result here instead of standard output.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a local program to one table per switch.
    CompileLocal {
        program: PathBuf,
        #[command(flatten)]
        flags: TableFlags,
        /// Switches to emit tables for; defaults to those the program tests.
        #[arg(long = "switch")]
        switches: Vec<Value>,
        #[arg(long, value_enum, default_value = "policy")]
        specialize: SpecializeBy,
        /// Compile switches on separate threads.
        #[arg(long)]
        parallel_switches: bool,
    },
    /// Compile a program bundle with links through the automaton pipeline.
    CompileGlobal {
        bundle: PathBuf,
        #[command(flatten)]
        flags: TableFlags,
        /// Include automaton dumps for each stage.
        #[arg(long)]
        dump_stages: bool,
        /// Header field that carries the automaton state in emitted tables.
        #[arg(long, value_enum, default_value = "pc")]
        pc_field: PcField,
    },
    /// Compile a virtual program onto a physical topology.
    CompileVirtual {
        program: PathBuf,
        virtual_topology: PathBuf,
        relation: PathBuf,
        physical_topology: PathBuf,
        #[arg(long, value_enum, default_value = "hops")]
        metric: Metric,
        #[command(flatten)]
        flags: TableFlags,
        #[arg(long, value_enum, default_value = "pc")]
        pc_field: PcField,
        /// Include the selected fabric in the output.
        #[arg(long)]
        dump_fabric: bool,
    },
    /// Run a packet through tables and topology.
    Simulate {
        bundle: PathBuf,
        /// Output of a compile command, or a JSON array of tables.
        tables: PathBuf,
        /// Packet as a JSON object of field values.
        #[arg(long)]
        packet: String,
        #[arg(long, default_value_t = 64)]
        max_hops: usize,
        /// Field the tables use for the automaton state.
        #[arg(long, value_enum, default_value = "pc")]
        pc_field: PcField,
    },
    /// Time a benchmark suite and print CSV.
    Bench {
        #[arg(value_enum)]
        suite: bench::Suite,
        /// Comma-separated sizes; each suite has its own defaults.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Failures mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    NoFabric(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::NoFabric(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::NoFabric(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<FddError> for CliError {
    fn from(e: FddError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<LocalError> for CliError {
    fn from(e: LocalError) -> Self {
        match e {
            LocalError::Fdd(e) => e.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<GlobalError> for CliError {
    fn from(e: GlobalError) -> Self {
        match e {
            GlobalError::NonBipartite(_) | GlobalError::ReservedField(_) => CliError::Input(e.to_string()),
            GlobalError::Local(l) => l.into(),
            GlobalError::Fdd(f) => f.into(),
            GlobalError::InconsistentLinks(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<VirtError> for CliError {
    fn from(e: VirtError) -> Self {
        match e {
            VirtError::NoFabric(_) => CliError::NoFabric(e.to_string()),
            VirtError::InvalidRelation(_) | VirtError::BadProgram(_) => CliError::Input(e.to_string()),
            VirtError::VirtualFieldsRemain(_) => CliError::Internal(e.to_string()),
            VirtError::Global(g) => g.into(),
            VirtError::Local(l) => l.into(),
            VirtError::Fdd(f) => f.into(),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<Json, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_program(path: &Path) -> Result<netkat::Policy, CliError> {
    netkat::parse(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn store_for(order: &Option<String>) -> Result<FddStore, CliError> {
    let order = match order {
        Some(text) => FieldOrder::parse(text).map_err(|e| CliError::Input(e.to_string()))?,
        None => FieldOrder::default(),
    };
    Ok(FddStore::new(order))
}

fn emit(output: &Option<PathBuf>, value: &Json) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n";
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn tables_json(tables: &BTreeMap<Value, FlowTable>) -> Json {
    Json::Array(tables.values().map(FlowTable::to_json).collect())
}

fn rules_json(tables: &BTreeMap<Value, FlowTable>) -> Json {
    json!({
        "rules_total": global::total_rules(tables),
        "rules_per_switch": tables.iter().map(|(s, t)| (s.to_string(), json!(t.len()))).collect::<serde_json::Map<_, _>>(),
    })
}

fn global_report_json(r: &GlobalReport) -> Json {
    json!({
        "automaton_states": r.automaton_states,
        "determinized_states": r.determinized_states,
        "merged_states": r.merged_states,
        "fdd_nodes": r.diagram_nodes,
        "warnings": r.warnings,
        "timings_ms": r.stage_times.iter().map(|(k, d)| (k.to_string(), json!(d.as_secs_f64() * 1e3))).collect::<serde_json::Map<_, _>>(),
    })
}

fn rename_pc(tables: &mut BTreeMap<Value, FlowTable>, pc: PcField, program_fields: &BTreeSet<Field>) -> Result<(), CliError> {
    if pc == PcField::Vlan {
        if program_fields.contains(&Field::Vlan) {
            return Err(CliError::Input("--pc-field vlan needs a program that does not use vlan".into()));
        }
        for t in tables.values_mut() {
            t.rename_field(Field::Pc, Field::Vlan);
        }
    }
    Ok(())
}

fn compile_local_cmd(
    program: &Path,
    flags: &TableFlags,
    switches: &[Value],
    specialize: SpecializeBy,
    parallel: bool,
) -> Result<(), CliError> {
    let p = read_program(program)?;
    let mut sws: BTreeSet<Value> = switches.iter().copied().collect();
    if sws.is_empty() {
        sws = local::switches_of(&p);
    }
    let opts = TableOptions {
        compress: flags.compress,
        specialization: match specialize {
            SpecializeBy::Policy => Specialization::Policy,
            SpecializeBy::Diagram => Specialization::Diagram,
        },
    };
    let start = Instant::now();
    let (tables, nodes) = if sws.is_empty() {
        // Programs that never test the switch run the same table everywhere.
        let mut store = store_for(&flags.order)?;
        let d = local::compile_local(&mut store, &p)?;
        let t = if flags.compress {
            local::to_flowtable_compressed(&store, d, 0)?
        } else {
            local::to_flowtable(&store, d, 0)?
        };
        (BTreeMap::from([(0, t)]), store.size(d))
    } else if parallel {
        compile_parallel(&p, &sws, &flags.order, opts)?
    } else {
        let mut store = store_for(&flags.order)?;
        local::compile_tables(&mut store, &p, &sws, opts)?
    };
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut report = rules_json(&tables);
    report["fdd_nodes"] = json!(nodes);
    report["timings_ms"] = json!({ "compile": elapsed });
    emit(&flags.output, &json!({ "tables": tables_json(&tables), "report": report }))
}

fn compile_parallel(
    p: &netkat::Policy,
    sws: &BTreeSet<Value>,
    order: &Option<String>,
    opts: TableOptions,
) -> Result<(BTreeMap<Value, FlowTable>, usize), CliError> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(sws.len().max(1));
    let all: Vec<Value> = sws.iter().copied().collect();
    let chunks: Vec<BTreeSet<Value>> = all.chunks(all.len().div_ceil(threads)).map(|c| c.iter().copied().collect()).collect();
    let results: Vec<Result<_, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                s.spawn(move || {
                    let mut store = store_for(order)?;
                    Ok(local::compile_tables(&mut store, p, chunk, opts)?)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("compile thread panicked")).collect()
    });
    let mut tables = BTreeMap::new();
    let mut nodes = 0;
    for r in results {
        let (t, n) = r?;
        tables.extend(t);
        nodes += n;
    }
    Ok((tables, nodes))
}

fn load_bundle(path: &Path) -> Result<netkat::ProgramBundle, CliError> {
    topo::bundle_from_json(&read_json(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn compile_global_cmd(bundle: &Path, flags: &TableFlags, dump_stages: bool, pc: PcField) -> Result<(), CliError> {
    let b = load_bundle(bundle)?;
    let mut store = store_for(&flags.order)?;
    let opts = GlobalOptions { compress: flags.compress, dump_stages, allow_reserved: vec![] };
    let mut out = global::compile_global(&mut store, &b, &opts)?;
    rename_pc(&mut out.tables, pc, &b.program.fields())?;
    let mut report = rules_json(&out.tables);
    for (k, v) in global_report_json(&out.report).as_object().unwrap() {
        report[k] = v.clone();
    }
    let mut doc = json!({ "tables": tables_json(&out.tables), "report": report });
    if dump_stages {
        doc["stages"] = out.report.dumps.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>().into();
    }
    emit(&flags.output, &doc)
}

#[allow(clippy::too_many_arguments)]
fn compile_virtual_cmd(
    program: &Path,
    vtopo: &Path,
    relation: &Path,
    phys: &Path,
    metric: Metric,
    flags: &TableFlags,
    pc: PcField,
    dump_fabric: bool,
) -> Result<(), CliError> {
    let v = read_program(program)?;
    let vt = read_program(vtopo)?;
    let rel = VRelation::from_json_str(&read(relation)?)?;
    let t = Topology::from_json_str(&read(phys)?).map_err(|e| CliError::Input(format!("{}: {e}", phys.display())))?;
    let mut store = store_for(&flags.order)?;
    let mut out = virt::compile_virtual(&mut store, &v, &vt, &rel, &t, metric.into(), flags.compress)?;
    rename_pc(&mut out.tables, pc, &v.fields())?;
    let mut report = rules_json(&out.tables);
    for (k, val) in global_report_json(&out.report).as_object().unwrap() {
        report[k] = val.clone();
    }
    report["game_nodes"] = json!(out.game_nodes);
    report["game_nodes_after_pruning"] = json!(out.pruned_nodes);
    report["fabric_links"] = json!(out.fabric.links().len());
    let mut doc = json!({ "tables": tables_json(&out.tables), "report": report });
    if dump_fabric {
        doc["fabric"] = json!(out.fabric.dump());
    }
    emit(&flags.output, &doc)
}

fn simulate_cmd(bundle: &Path, tables: &Path, packet: &str, max_hops: usize, pc: PcField) -> Result<(), CliError> {
    let b = load_bundle(bundle)?;
    let doc = read_json(tables)?;
    let list = doc.get("tables").unwrap_or(&doc);
    let arr = list.as_array().ok_or_else(|| CliError::Input("expected an array of tables".into()))?;
    let mut ts = BTreeMap::new();
    for t in arr {
        let mut table = FlowTable::from_json(t).map_err(CliError::Input)?;
        if pc == PcField::Vlan {
            table.rename_field(Field::Vlan, Field::Pc);
        }
        ts.insert(table.switch, table);
    }
    let pj: Json = serde_json::from_str(packet).map_err(|e| CliError::Input(format!("--packet: {e}")))?;
    let pk = Packet::from_json(&pj).map_err(CliError::Input)?;
    let r = interp::simulate(&b, &ts, &pk, max_hops).map_err(|e| CliError::Internal(e.to_string()))?;
    let delivered: Vec<Json> = interp::strip_pc(&r.delivered).iter().map(|h| h.to_json()).collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "delivered": delivered, "in_flight": r.in_flight.len() })).unwrap()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::CompileLocal { program, flags, switches, specialize, parallel_switches } => {
            compile_local_cmd(&program, &flags, &switches, specialize, parallel_switches)
        }
        Command::CompileGlobal { bundle, flags, dump_stages, pc_field } => {
            compile_global_cmd(&bundle, &flags, dump_stages, pc_field)
        }
        Command::CompileVirtual { program, virtual_topology, relation, physical_topology, metric, flags, pc_field, dump_fabric } => {
            compile_virtual_cmd(&program, &virtual_topology, &relation, &physical_topology, metric, &flags, pc_field, dump_fabric)
        }
        Command::Simulate { bundle, tables, packet, max_hops, pc_field } => {
            simulate_cmd(&bundle, &tables, &packet, max_hops, pc_field)
        }
        Command::Bench { suite, sizes, repeats, seed } => bench::run(suite, &sizes, repeats, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
