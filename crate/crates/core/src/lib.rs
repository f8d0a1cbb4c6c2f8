//! A NetKAT compiler: local programs to flow tables through forwarding
//! decision diagrams, global programs through symbolic automata, and
//! virtual programs through a fabric game, with a reference interpreter
//! and network simulator to check every stage.

pub mod ast;
pub mod fdd;
pub mod gen;
pub mod global;
pub mod interp;
pub mod local;
pub mod topo;
pub mod virt;

pub use ast::{parse, pretty, Field, Policy, Predicate, ProgramBundle, Value};
pub use fdd::{Action, ActionSet, Fdd, FddStore, FieldOrder};
pub use interp::{eval_policy, History, Packet};
pub use local::{FlowRule, FlowTable};
