//! Browser bindings: compile a local program, compile a global bundle, and
//! simulate a packet through compiled tables. Inputs and outputs are JSON
//! text so the page needs no glue beyond `JSON.parse`.

use std::collections::BTreeMap;

use serde_json::{json, Value as Json};
use wasm_bindgen::prelude::*;

use netkat::fdd::FddStore;
use netkat::global::{self, GlobalOptions};
use netkat::interp::{self, Packet};
use netkat::local::{self, FlowTable, TableOptions};
use netkat::topo;

fn tables_json(tables: &BTreeMap<u64, FlowTable>) -> Json {
    Json::Array(tables.values().map(FlowTable::to_json).collect())
}

fn bundle(text: &str) -> Result<netkat::ProgramBundle, String> {
    let j: Json = serde_json::from_str(text).map_err(|e| format!("bundle: {e}"))?;
    topo::bundle_from_json(&j)
}

/// Tables for every switch the program tests, or one table for switch 0
/// when it tests none. The diagram is included as text.
#[wasm_bindgen]
pub fn compile_local(program: &str, compress: bool) -> Result<String, String> {
    let p = netkat::parse(program).map_err(|e| e.to_string())?;
    let mut store = FddStore::default();
    let d = local::compile_local(&mut store, &p).map_err(|e| e.to_string())?;
    let switches = local::switches_of(&p);
    let tables = if switches.is_empty() {
        let t = if compress { local::to_flowtable_compressed(&store, d, 0) } else { local::to_flowtable(&store, d, 0) };
        BTreeMap::from([(0, t.map_err(|e| e.to_string())?)])
    } else {
        let opts = TableOptions { compress, ..TableOptions::default() };
        local::compile_tables(&mut store, &p, &switches, opts).map_err(|e| e.to_string())?.0
    };
    let out = json!({
        "tables": tables_json(&tables),
        "rules_total": global::total_rules(&tables),
        "diagram": store.dump(d),
    });
    Ok(out.to_string())
}

/// Compiles a bundle `{"program", "ingress", "egress", "topology"}`.
#[wasm_bindgen]
pub fn compile_global(bundle_json: &str, compress: bool) -> Result<String, String> {
    let b = bundle(bundle_json)?;
    let mut store = FddStore::default();
    let opts = GlobalOptions { compress, ..GlobalOptions::default() };
    let out = global::compile_global(&mut store, &b, &opts).map_err(|e| e.to_string())?;
    let r = &out.report;
    Ok(json!({
        "tables": tables_json(&out.tables),
        "rules_total": global::total_rules(&out.tables),
        "automaton_states": r.automaton_states,
        "determinized_states": r.determinized_states,
        "merged_states": r.merged_states,
        "warnings": r.warnings,
    })
    .to_string())
}

/// Sends one packet through the tables and the bundle's topology.
#[wasm_bindgen]
pub fn simulate(bundle_json: &str, tables_json: &str, packet_json: &str) -> Result<String, String> {
    let b = bundle(bundle_json)?;
    let doc: Json = serde_json::from_str(tables_json).map_err(|e| format!("tables: {e}"))?;
    let list = doc.get("tables").unwrap_or(&doc).as_array().ok_or("expected an array of tables")?;
    let mut tables = BTreeMap::new();
    for t in list {
        let t = FlowTable::from_json(t)?;
        tables.insert(t.switch, t);
    }
    let pj: Json = serde_json::from_str(packet_json).map_err(|e| format!("packet: {e}"))?;
    let pk = Packet::from_json(&pj)?;
    let r = interp::simulate(&b, &tables, &pk, 64).map_err(|e| e.to_string())?;
    let delivered: Vec<Json> = interp::strip_pc(&r.delivered).iter().map(|h| h.to_json()).collect();
    Ok(json!({ "delivered": delivered, "in_flight": r.in_flight.len() }).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PATH: &str = r#"{
        "program": "(port = 1; port := 3; 1@3 => 2@3; port := 1) + (port = 2; port := 3; 1@3 => 2@3; port := 2)",
        "ingress": "switch = 1; (port = 1 + port = 2)",
        "egress": "switch = 2; (port = 1 + port = 2)",
        "topology": "1@3 => 2@3"
    }"#;

    #[test]
    fn local_compilation_counts_rules() {
        let out: Json = serde_json::from_str(
            &compile_local("ipProto = 80; ip4Dst = 10.0.0.1; port := 1 + ipProto = 80; ip4Dst = 10.0.0.2; port := 2", true).unwrap(),
        )
        .unwrap();
        assert_eq!(out["rules_total"], 3);
        assert!(compile_local("port := ", false).is_err());
    }

    #[test]
    fn global_tables_simulate() {
        let tables = compile_global(TWO_PATH, false).unwrap();
        let out: Json = serde_json::from_str(&simulate(TWO_PATH, &tables, r#"{"switch": 1, "port": 2}"#).unwrap()).unwrap();
        assert_eq!(out["delivered"][0][0]["port"], 2);
        assert_eq!(out["delivered"][0][0]["switch"], 2);
    }
}
