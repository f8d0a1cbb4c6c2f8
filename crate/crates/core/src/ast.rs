//! NetKAT abstract syntax, the concrete text grammar, and structural checks.
//!
//! Grammar (loosest binding first):
//!
//! ```text
//! pol   ::= seq ('+' seq)*
//! seq   ::= unary (';' unary)*
//! unary ::= 'not' unary | post
//! post  ::= atom '*'*
//! atom  ::= 'id' | 'drop' | 'dup' | '(' pol ')'
//!         | field '=' value | field ':=' value
//!         | value '@' value '=>' value '@' value
//! ```
//!
//! A `+` or `;` whose operands are both filters parses as a single filter over
//! a disjunction or conjunction, so `port = 1 + port = 2` is one predicate.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header values. Widths are not enforced until table emission.
pub type Value = u64;

pub const NUM_FIELDS: usize = 15;

/// Packet header fields: the twelve OpenFlow fields followed by the three
/// fields reserved for the compiler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Field {
    Switch,
    Port,
    EthSrc,
    EthDst,
    Vlan,
    VlanPcp,
    EthTyp,
    IpProto,
    Ip4Src,
    Ip4Dst,
    TcpSrcPort,
    TcpDstPort,
    Pc,
    VSwitch,
    VPort,
}

impl Field {
    pub const ALL: [Field; NUM_FIELDS] = [
        Field::Switch,
        Field::Port,
        Field::EthSrc,
        Field::EthDst,
        Field::Vlan,
        Field::VlanPcp,
        Field::EthTyp,
        Field::IpProto,
        Field::Ip4Src,
        Field::Ip4Dst,
        Field::TcpSrcPort,
        Field::TcpDstPort,
        Field::Pc,
        Field::VSwitch,
        Field::VPort,
    ];

    /// Fields a switch can match on.
    pub const MATCHABLE: [Field; 12] = [
        Field::Switch,
        Field::Port,
        Field::EthSrc,
        Field::EthDst,
        Field::Vlan,
        Field::VlanPcp,
        Field::EthTyp,
        Field::IpProto,
        Field::Ip4Src,
        Field::Ip4Dst,
        Field::TcpSrcPort,
        Field::TcpDstPort,
    ];

    pub const RESERVED: [Field; 3] = [Field::Pc, Field::VSwitch, Field::VPort];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_reserved(self) -> bool {
        matches!(self, Field::Pc | Field::VSwitch | Field::VPort)
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::Switch => "switch",
            Field::Port => "port",
            Field::EthSrc => "ethSrc",
            Field::EthDst => "ethDst",
            Field::Vlan => "vlan",
            Field::VlanPcp => "vlanPcp",
            Field::EthTyp => "ethTyp",
            Field::IpProto => "ipProto",
            Field::Ip4Src => "ip4Src",
            Field::Ip4Dst => "ip4Dst",
            Field::TcpSrcPort => "tcpSrcPort",
            Field::TcpDstPort => "tcpDstPort",
            Field::Pc => "pc",
            Field::VSwitch => "vswitch",
            Field::VPort => "vport",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown field `{0}`")]
pub struct UnknownField(pub String);

impl From<Field> for String {
    fn from(f: Field) -> String {
        f.name().to_string()
    }
}

impl TryFrom<String> for Field {
    type Error = UnknownField;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for Field {
    type Err = UnknownField;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let field = match s {
            "switch" | "sw" => Field::Switch,
            "port" | "pt" => Field::Port,
            "ethSrc" => Field::EthSrc,
            "ethDst" => Field::EthDst,
            "vlan" => Field::Vlan,
            "vlanPcp" => Field::VlanPcp,
            "ethTyp" => Field::EthTyp,
            "ipProto" => Field::IpProto,
            "ip4Src" => Field::Ip4Src,
            "ip4Dst" => Field::Ip4Dst,
            "tcpSrcPort" => Field::TcpSrcPort,
            "tcpDstPort" => Field::TcpDstPort,
            "pc" => Field::Pc,
            "vswitch" => Field::VSwitch,
            "vport" => Field::VPort,
            _ => return Err(UnknownField(s.to_string())),
        };
        Ok(field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Predicate {
    True,
    False,
    Test(Field, Value),
    Or(Box<Predicate>, Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn test(field: Field, value: Value) -> Predicate {
        Predicate::Test(field, value)
    }

    pub fn or(a: Predicate, b: Predicate) -> Predicate {
        Predicate::Or(Box::new(a), Box::new(b))
    }

    pub fn and(a: Predicate, b: Predicate) -> Predicate {
        Predicate::And(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(a: Predicate) -> Predicate {
        Predicate::Not(Box::new(a))
    }

    /// Balanced disjunction; `False` when empty.
    pub fn or_all<I: IntoIterator<Item = Predicate>>(items: I) -> Predicate {
        let items: Vec<_> = items.into_iter().collect();
        balanced(items, Predicate::False, Predicate::or)
    }

    pub fn and_all<I: IntoIterator<Item = Predicate>>(items: I) -> Predicate {
        items
            .into_iter()
            .reduce(Predicate::and)
            .unwrap_or(Predicate::True)
    }

    pub fn fields(&self, out: &mut BTreeSet<Field>) {
        match self {
            Predicate::True | Predicate::False => {}
            Predicate::Test(f, _) => {
                out.insert(*f);
            }
            Predicate::Or(a, b) | Predicate::And(a, b) => {
                a.fields(out);
                b.fields(out);
            }
            Predicate::Not(a) => a.fields(out),
        }
    }
}

/// NetKAT programs. `Link` is sugar for the six-term dup-enclosed hop.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Policy {
    Filter(Predicate),
    Mod(Field, Value),
    Union(Box<Policy>, Box<Policy>),
    Seq(Box<Policy>, Box<Policy>),
    Star(Box<Policy>),
    Dup(Option<u32>),
    Link(Value, Value, Value, Value),
}

impl Policy {
    pub fn id() -> Policy {
        Policy::Filter(Predicate::True)
    }

    pub fn drop() -> Policy {
        Policy::Filter(Predicate::False)
    }

    pub fn test(field: Field, value: Value) -> Policy {
        Policy::Filter(Predicate::Test(field, value))
    }

    pub fn modify(field: Field, value: Value) -> Policy {
        Policy::Mod(field, value)
    }

    pub fn dup() -> Policy {
        Policy::Dup(None)
    }

    pub fn link(sw1: Value, pt1: Value, sw2: Value, pt2: Value) -> Policy {
        Policy::Link(sw1, pt1, sw2, pt2)
    }

    pub fn union(a: Policy, b: Policy) -> Policy {
        Policy::Union(Box::new(a), Box::new(b))
    }

    pub fn seq(a: Policy, b: Policy) -> Policy {
        Policy::Seq(Box::new(a), Box::new(b))
    }

    pub fn star(a: Policy) -> Policy {
        Policy::Star(Box::new(a))
    }

    /// Balanced union of many terms; `drop` when empty. Balancing keeps
    /// the recursion depth logarithmic for generated programs with
    /// thousands of summands.
    pub fn union_all<I: IntoIterator<Item = Policy>>(items: I) -> Policy {
        let items: Vec<_> = items.into_iter().collect();
        balanced(items, Policy::drop(), Policy::union)
    }

    /// Left-nested sequence; `id` when empty.
    pub fn seq_all<I: IntoIterator<Item = Policy>>(items: I) -> Policy {
        items
            .into_iter()
            .reduce(Policy::seq)
            .unwrap_or_else(Policy::id)
    }

    pub fn is_drop(&self) -> bool {
        matches!(self, Policy::Filter(Predicate::False))
    }

    pub fn is_id(&self) -> bool {
        matches!(self, Policy::Filter(Predicate::True))
    }

    /// Number of AST nodes, counting predicate nodes.
    pub fn size(&self) -> usize {
        fn pred_size(a: &Predicate) -> usize {
            match a {
                Predicate::Or(x, y) | Predicate::And(x, y) => 1 + pred_size(x) + pred_size(y),
                Predicate::Not(x) => 1 + pred_size(x),
                _ => 1,
            }
        }
        match self {
            Policy::Filter(a) => pred_size(a),
            Policy::Union(p, q) | Policy::Seq(p, q) => 1 + p.size() + q.size(),
            Policy::Star(p) => 1 + p.size(),
            _ => 1,
        }
    }

    pub fn contains_dup(&self) -> bool {
        match self {
            Policy::Dup(_) | Policy::Link(..) => true,
            Policy::Union(p, q) | Policy::Seq(p, q) => p.contains_dup() || q.contains_dup(),
            Policy::Star(p) => p.contains_dup(),
            Policy::Filter(_) | Policy::Mod(..) => false,
        }
    }

    /// Fields assigned anywhere in the program (links write `switch` and `port`).
    pub fn written_fields(&self) -> BTreeSet<Field> {
        let mut out = BTreeSet::new();
        self.collect_written(&mut out);
        out
    }

    fn collect_written(&self, out: &mut BTreeSet<Field>) {
        match self {
            Policy::Mod(f, _) => {
                out.insert(*f);
            }
            Policy::Link(..) => {
                out.insert(Field::Switch);
                out.insert(Field::Port);
            }
            Policy::Union(p, q) | Policy::Seq(p, q) => {
                p.collect_written(out);
                q.collect_written(out);
            }
            Policy::Star(p) => p.collect_written(out),
            Policy::Filter(_) | Policy::Dup(_) => {}
        }
    }

    /// Every field tested or written.
    pub fn fields(&self) -> BTreeSet<Field> {
        let mut out = BTreeSet::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields(&self, out: &mut BTreeSet<Field>) {
        match self {
            Policy::Filter(a) => a.fields(out),
            Policy::Mod(f, _) => {
                out.insert(*f);
            }
            Policy::Link(..) => {
                out.insert(Field::Switch);
                out.insert(Field::Port);
            }
            Policy::Union(p, q) | Policy::Seq(p, q) => {
                p.collect_fields(out);
                q.collect_fields(out);
            }
            Policy::Star(p) => p.collect_fields(out),
            Policy::Dup(_) => {}
        }
    }

    /// Values tested or assigned for `field`, in ascending order.
    pub fn values_of(&self, field: Field) -> BTreeSet<Value> {
        fn pred(a: &Predicate, field: Field, out: &mut BTreeSet<Value>) {
            match a {
                Predicate::Test(f, v) if *f == field => {
                    out.insert(*v);
                }
                Predicate::Or(x, y) | Predicate::And(x, y) => {
                    pred(x, field, out);
                    pred(y, field, out);
                }
                Predicate::Not(x) => pred(x, field, out),
                _ => {}
            }
        }
        fn go(p: &Policy, field: Field, out: &mut BTreeSet<Value>) {
            match p {
                Policy::Filter(a) => pred(a, field, out),
                Policy::Mod(f, v) if *f == field => {
                    out.insert(*v);
                }
                Policy::Link(s1, p1, s2, p2) => match field {
                    Field::Switch => out.extend([*s1, *s2]),
                    Field::Port => out.extend([*p1, *p2]),
                    _ => {}
                },
                Policy::Union(a, b) | Policy::Seq(a, b) => {
                    go(a, field, out);
                    go(b, field, out);
                }
                Policy::Star(a) => go(a, field, out),
                _ => {}
            }
        }
        let mut out = BTreeSet::new();
        go(self, field, &mut out);
        out
    }

    /// Folds every `+`/`;` of two filters into a single filter, bottom-up.
    /// This is the shape the parser produces.
    pub fn normalize_filters(&self) -> Policy {
        match self {
            Policy::Union(p, q) => match (p.normalize_filters(), q.normalize_filters()) {
                (Policy::Filter(a), Policy::Filter(b)) => Policy::Filter(Predicate::or(a, b)),
                (p, q) => Policy::union(p, q),
            },
            Policy::Seq(p, q) => match (p.normalize_filters(), q.normalize_filters()) {
                (Policy::Filter(a), Policy::Filter(b)) => Policy::Filter(Predicate::and(a, b)),
                (p, q) => Policy::seq(p, q),
            },
            Policy::Star(p) => Policy::star(p.normalize_filters()),
            other => other.clone(),
        }
    }

    /// Removes dup labels.
    pub fn strip_labels(&self) -> Policy {
        match self {
            Policy::Dup(_) => Policy::Dup(None),
            Policy::Union(p, q) => Policy::union(p.strip_labels(), q.strip_labels()),
            Policy::Seq(p, q) => Policy::seq(p.strip_labels(), q.strip_labels()),
            Policy::Star(p) => Policy::star(p.strip_labels()),
            other => other.clone(),
        }
    }
}

fn balanced<T>(mut items: Vec<T>, empty: T, join: fn(T, T) -> T) -> T {
    fn go<T>(items: &mut Vec<T>, join: fn(T, T) -> T) -> T {
        if items.len() == 1 {
            return items.pop().unwrap();
        }
        let mut right = items.split_off(items.len() / 2);
        let l = go(items, join);
        let r = go(&mut right, join);
        join(l, r)
    }
    if items.is_empty() {
        empty
    } else {
        go(&mut items, join)
    }
}

/// The six-term encoding of a unidirectional link.
pub fn link_expansion(sw1: Value, pt1: Value, sw2: Value, pt2: Value) -> Policy {
    Policy::seq_all([
        Policy::dup(),
        Policy::test(Field::Switch, sw1),
        Policy::test(Field::Port, pt1),
        Policy::modify(Field::Switch, sw2),
        Policy::modify(Field::Port, pt2),
        Policy::dup(),
    ])
}

/// Expands every `Link` into its dup-enclosed sequence.
pub fn desugar_links(p: &Policy) -> Policy {
    match p {
        Policy::Link(s1, p1, s2, p2) => link_expansion(*s1, *p1, *s2, *p2),
        Policy::Union(a, b) => Policy::union(desugar_links(a), desugar_links(b)),
        Policy::Seq(a, b) => Policy::seq(desugar_links(a), desugar_links(b)),
        Policy::Star(a) => Policy::star(desugar_links(a)),
        other => other.clone(),
    }
}

/// Recognises desugared links (six consecutive terms of a sequence chain)
/// and folds them back into `Link` nodes. Inverse of [`desugar_links`] on
/// its image, up to sequence association.
pub fn resugar_links(p: &Policy) -> Policy {
    match p {
        Policy::Seq(..) => {
            let mut items = Vec::new();
            flatten_seq(p, &mut items);
            let items: Vec<Policy> = items.iter().map(resugar_links).collect();
            let mut out = Vec::with_capacity(items.len());
            let mut i = 0;
            while i < items.len() {
                if let Some(link) = match_link_window(&items[i..]) {
                    out.push(link);
                    i += 6;
                } else {
                    out.push(items[i].clone());
                    i += 1;
                }
            }
            Policy::seq_all(out)
        }
        Policy::Union(a, b) => Policy::union(resugar_links(a), resugar_links(b)),
        Policy::Star(a) => Policy::star(resugar_links(a)),
        other => other.clone(),
    }
}

fn flatten_seq(p: &Policy, out: &mut Vec<Policy>) {
    match p {
        Policy::Seq(a, b) => {
            flatten_seq(a, out);
            flatten_seq(b, out);
        }
        other => out.push(other.clone()),
    }
}

fn match_link_window(w: &[Policy]) -> Option<Policy> {
    use Policy::*;
    use Predicate::Test;
    if w.len() < 6 {
        return None;
    }
    match (&w[0], &w[1], &w[2], &w[3], &w[4], &w[5]) {
        (
            Dup(_),
            Filter(Test(Field::Switch, s1)),
            Filter(Test(Field::Port, p1)),
            Mod(Field::Switch, s2),
            Mod(Field::Port, p2),
            Dup(_),
        ) => Some(Link(*s1, *p1, *s2, *p2)),
        _ => None,
    }
}

/// Outcome of [`validate_local`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalCheck {
    pub ok: bool,
    pub diagnostics: Vec<String>,
}

/// A program is local when it has no dup, never writes `switch`, and leaves
/// the reserved fields alone.
pub fn validate_local(p: &Policy) -> LocalCheck {
    validate_local_allowing(p, &[])
}

/// Like [`validate_local`], but permits matches and writes on the listed
/// reserved fields (the global compiler's output uses `pc`).
pub fn validate_local_allowing(p: &Policy, allowed: &[Field]) -> LocalCheck {
    let mut diagnostics = Vec::new();
    check_local(p, allowed, &mut diagnostics);
    LocalCheck {
        ok: diagnostics.is_empty(),
        diagnostics,
    }
}

fn check_local(p: &Policy, allowed: &[Field], diags: &mut Vec<String>) {
    let reserved = |f: Field| f.is_reserved() && !allowed.contains(&f);
    match p {
        Policy::Dup(_) => diags.push("dup is not allowed in a local program".into()),
        Policy::Link(..) => diags.push(format!("link `{p}` is not allowed in a local program")),
        Policy::Mod(Field::Switch, _) => {
            diags.push(format!("`{p}` modifies the switch field"));
        }
        Policy::Mod(f, _) if reserved(*f) => {
            diags.push(format!("`{p}` writes reserved field {f}"));
        }
        Policy::Mod(..) => {}
        Policy::Filter(a) => {
            let mut fs = BTreeSet::new();
            a.fields(&mut fs);
            for f in fs.into_iter().filter(|f| reserved(*f)) {
                diags.push(format!("`{p}` matches reserved field {f}"));
            }
        }
        Policy::Union(a, b) | Policy::Seq(a, b) => {
            check_local(a, allowed, diags);
            check_local(b, allowed, diags);
        }
        Policy::Star(a) => check_local(a, allowed, diags),
    }
}

/// A network-wide program together with its ingress, egress and topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramBundle {
    pub program: Policy,
    pub ingress: Predicate,
    pub egress: Predicate,
    pub topology: Policy,
}

// ---------------------------------------------------------------------------
// Pretty printing

const PREC_UNION: u8 = 0;
const PREC_SEQ: u8 = 1;
const PREC_NOT: u8 = 2;
const PREC_ATOM: u8 = 3;

/// Renders a policy in the concrete grammar; `parse` inverts it on
/// filter-normalized trees.
pub fn pretty(p: &Policy) -> String {
    let mut s = String::new();
    write_policy(p, PREC_UNION, &mut s);
    s
}

pub fn pretty_pred(a: &Predicate) -> String {
    let mut s = String::new();
    write_pred(a, PREC_UNION, &mut s);
    s
}

fn paren(needed: bool, s: &mut String, body: impl FnOnce(&mut String)) {
    if needed {
        s.push('(');
    }
    body(s);
    if needed {
        s.push(')');
    }
}

fn write_pred(a: &Predicate, ctx: u8, s: &mut String) {
    use std::fmt::Write;
    match a {
        Predicate::True => s.push_str("id"),
        Predicate::False => s.push_str("drop"),
        Predicate::Test(f, v) => {
            paren(ctx > PREC_NOT, s, |s| {
                let _ = write!(s, "{f} = {v}");
            });
        }
        Predicate::Or(x, y) => paren(ctx > PREC_UNION, s, |s| {
            write_pred(x, PREC_UNION, s);
            s.push_str(" + ");
            write_pred(y, PREC_SEQ, s);
        }),
        Predicate::And(x, y) => paren(ctx > PREC_SEQ, s, |s| {
            write_pred(x, PREC_SEQ, s);
            s.push_str("; ");
            write_pred(y, PREC_NOT, s);
        }),
        Predicate::Not(x) => paren(ctx > PREC_NOT, s, |s| {
            s.push_str("not ");
            write_pred(x, PREC_NOT, s);
        }),
    }
}

fn write_policy(p: &Policy, ctx: u8, s: &mut String) {
    use std::fmt::Write;
    match p {
        Policy::Filter(a) => write_pred(a, ctx, s),
        Policy::Mod(f, v) => paren(ctx > PREC_NOT, s, |s| {
            let _ = write!(s, "{f} := {v}");
        }),
        Policy::Union(a, b) => paren(ctx > PREC_UNION, s, |s| {
            write_policy(a, PREC_UNION, s);
            s.push_str(" + ");
            write_policy(b, PREC_SEQ, s);
        }),
        Policy::Seq(a, b) => paren(ctx > PREC_SEQ, s, |s| {
            write_policy(a, PREC_SEQ, s);
            s.push_str("; ");
            write_policy(b, PREC_NOT, s);
        }),
        Policy::Star(a) => {
            write_policy(a, PREC_ATOM + 1, s);
            s.push('*');
        }
        Policy::Dup(_) => s.push_str("dup"),
        Policy::Link(s1, p1, s2, p2) => paren(ctx > PREC_NOT, s, |s| {
            let _ = write!(s, "{s1}@{p1} => {s2}@{p2}");
        }),
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty(self))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty_pred(self))
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: unknown field `{name}`")]
    UnknownField { line: usize, col: usize, name: String },
    #[error("{line}:{col}: value `{text}` does not fit in 64 bits")]
    Overflow { line: usize, col: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(Value),
    Eq,
    Assign,
    Plus,
    Semi,
    Star,
    LParen,
    RParen,
    At,
    Arrow,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Num(n) => write!(f, "`{n}`"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Assign => f.write_str("`:=`"),
            Tok::Plus => f.write_str("`+`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::Star => f.write_str("`*`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::At => f.write_str("`@`"),
            Tok::Arrow => f.write_str("`=>`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let syntax = |line, col, msg: String| ParseError::Syntax { line, col, msg };
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let mut advance = |n: usize, i: &mut usize| {
            *i += n;
            col += n;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            c if c.is_whitespace() => {
                advance(1, &mut i);
                continue;
            }
            '/' if chars.get(i + 1) == Some(&'/') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '+' | ';' | '*' | '(' | ')' | '@' => {
                let tok = match c {
                    '+' => Tok::Plus,
                    ';' => Tok::Semi,
                    '*' => Tok::Star,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    _ => Tok::At,
                };
                advance(1, &mut i);
                out.push(Spanned { tok, line: tl, col: tc });
            }
            '=' => {
                if chars.get(i + 1) == Some(&'>') {
                    advance(2, &mut i);
                    out.push(Spanned { tok: Tok::Arrow, line: tl, col: tc });
                } else {
                    advance(1, &mut i);
                    out.push(Spanned { tok: Tok::Eq, line: tl, col: tc });
                }
            }
            ':' => {
                if chars.get(i + 1) == Some(&'=') {
                    advance(2, &mut i);
                    out.push(Spanned { tok: Tok::Assign, line: tl, col: tc });
                } else {
                    return Err(syntax(tl, tc, "expected `:=`".into()));
                }
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                col += i - start;
                let value = parse_number(&text).map_err(|overflow| {
                    if overflow {
                        ParseError::Overflow { line: tl, col: tc, text: text.clone() }
                    } else {
                        syntax(tl, tc, format!("malformed number `{text}`"))
                    }
                })?;
                out.push(Spanned { tok: Tok::Num(value), line: tl, col: tc });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                col += i - start;
                out.push(Spanned {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    line: tl,
                    col: tc,
                });
            }
            other => return Err(syntax(tl, tc, format!("unexpected character `{other}`"))),
        }
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

/// Decimal naturals, or dotted quads (`10.0.0.1`) read as 32-bit addresses.
/// `Err(true)` signals overflow.
fn parse_number(text: &str) -> Result<Value, bool> {
    if text.contains('.') {
        let parts: Vec<&str> = text.split('.').collect();
        if parts.len() != 4 {
            return Err(false);
        }
        let mut v: Value = 0;
        for part in parts {
            let octet: u8 = part.parse().map_err(|_| false)?;
            v = (v << 8) | Value::from(octet);
        }
        Ok(v)
    } else {
        text.parse::<Value>().map_err(|_| true)
    }
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

/// Parses a program in the concrete grammar.
pub fn parse(text: &str) -> Result<Policy, ParseError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let pol = p.union()?;
    p.expect(Tok::Eof)?;
    Ok(pol)
}

/// Parses text that must denote a predicate.
pub fn parse_predicate(text: &str) -> Result<Predicate, ParseError> {
    match parse(text)? {
        Policy::Filter(a) => Ok(a),
        other => Err(ParseError::Syntax {
            line: 1,
            col: 1,
            msg: format!("expected a predicate, found `{other}`"),
        }),
    }
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, msg: String) -> Result<T, ParseError> {
        let t = self.peek();
        Err(ParseError::Syntax { line: t.line, col: t.col, msg })
    }

    fn expect(&mut self, tok: Tok) -> Result<Spanned, ParseError> {
        if self.peek().tok == tok {
            Ok(self.bump())
        } else {
            self.error(format!("expected {tok}, found {}", self.peek().tok))
        }
    }

    fn value(&mut self) -> Result<Value, ParseError> {
        match self.peek().tok {
            Tok::Num(n) => {
                self.bump();
                Ok(n)
            }
            _ => self.error(format!("expected a value, found {}", self.peek().tok)),
        }
    }

    fn union(&mut self) -> Result<Policy, ParseError> {
        let mut acc = self.seq()?;
        while self.peek().tok == Tok::Plus {
            self.bump();
            let rhs = self.seq()?;
            acc = match (acc, rhs) {
                (Policy::Filter(a), Policy::Filter(b)) => Policy::Filter(Predicate::or(a, b)),
                (a, b) => Policy::union(a, b),
            };
        }
        Ok(acc)
    }

    fn seq(&mut self) -> Result<Policy, ParseError> {
        let mut acc = self.unary()?;
        while self.peek().tok == Tok::Semi {
            self.bump();
            let rhs = self.unary()?;
            acc = match (acc, rhs) {
                (Policy::Filter(a), Policy::Filter(b)) => Policy::Filter(Predicate::and(a, b)),
                (a, b) => Policy::seq(a, b),
            };
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Policy, ParseError> {
        if matches!(&self.peek().tok, Tok::Ident(s) if s == "not") {
            let at = self.bump();
            return match self.unary()? {
                Policy::Filter(a) => Ok(Policy::Filter(Predicate::not(a))),
                other => Err(ParseError::Syntax {
                    line: at.line,
                    col: at.col,
                    msg: format!("`not` applied to non-predicate `{other}`"),
                }),
            };
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Policy, ParseError> {
        let mut acc = self.atom()?;
        while self.peek().tok == Tok::Star {
            self.bump();
            acc = Policy::star(acc);
        }
        Ok(acc)
    }

    fn atom(&mut self) -> Result<Policy, ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::LParen => {
                self.bump();
                let p = self.union()?;
                self.expect(Tok::RParen)?;
                Ok(p)
            }
            Tok::Ident(ref name) => {
                self.bump();
                match name.as_str() {
                    "id" => return Ok(Policy::id()),
                    "drop" => return Ok(Policy::drop()),
                    "dup" => return Ok(Policy::dup()),
                    _ => {}
                }
                let field: Field = name.parse().map_err(|_| ParseError::UnknownField {
                    line: t.line,
                    col: t.col,
                    name: name.clone(),
                })?;
                match self.peek().tok {
                    Tok::Eq => {
                        self.bump();
                        Ok(Policy::test(field, self.value()?))
                    }
                    Tok::Assign => {
                        self.bump();
                        Ok(Policy::modify(field, self.value()?))
                    }
                    _ => self.error(format!(
                        "expected `=` or `:=` after field, found {}",
                        self.peek().tok
                    )),
                }
            }
            Tok::Num(sw1) => {
                self.bump();
                self.expect(Tok::At)?;
                let pt1 = self.value()?;
                self.expect(Tok::Arrow)?;
                let sw2 = self.value()?;
                self.expect(Tok::At)?;
                let pt2 = self.value()?;
                Ok(Policy::link(sw1, pt1, sw2, pt2))
            }
            _ => self.error(format!("unexpected {}", t.tok)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_test_then_modification() {
        let p = parse("port = 1 ; port := 2").unwrap();
        assert_eq!(
            p,
            Policy::seq(Policy::test(Field::Port, 1), Policy::modify(Field::Port, 2))
        );
    }

    #[test]
    fn drop_and_id_are_filters() {
        assert_eq!(parse("drop").unwrap(), Policy::Filter(Predicate::False));
        assert_eq!(parse("id").unwrap(), Policy::Filter(Predicate::True));
    }

    #[test]
    fn link_desugars_to_six_terms() {
        let p = desugar_links(&parse("1@3 => 2@3").unwrap());
        assert_eq!(p, link_expansion(1, 3, 2, 3));
        assert_eq!(
            p,
            Policy::seq_all([
                Policy::dup(),
                Policy::test(Field::Switch, 1),
                Policy::test(Field::Port, 3),
                Policy::modify(Field::Switch, 2),
                Policy::modify(Field::Port, 3),
                Policy::dup(),
            ])
        );
    }

    #[test]
    fn desugar_recurses_under_star_and_is_idempotent() {
        let p = parse("(1@1 => 2@2)* + port := 1").unwrap();
        let d = desugar_links(&p);
        assert!(!format!("{d}").contains("=>"));
        assert_eq!(desugar_links(&d), d);
        let plain = parse("port = 1; port := 2").unwrap();
        assert_eq!(desugar_links(&plain), plain);
    }

    #[test]
    fn resugar_inverts_desugar() {
        let p = parse("port := 3; 1@3 => 2@3; port := 1").unwrap();
        assert_eq!(resugar_links(&desugar_links(&p)), p);
    }

    #[test]
    fn precedence() {
        // `*` binds tighter than `not`, `not` tighter than `;`, `;` tighter than `+`.
        let p = parse("a_is_not_a_field := 1").unwrap_err();
        assert!(matches!(p, ParseError::UnknownField { .. }));
        let p = parse("port := 1 + port := 2; vlan := 3*").unwrap();
        assert_eq!(
            p,
            Policy::union(
                Policy::modify(Field::Port, 1),
                Policy::seq(
                    Policy::modify(Field::Port, 2),
                    Policy::star(Policy::modify(Field::Vlan, 3))
                )
            )
        );
        let p = parse("not port = 1; vlan = 2").unwrap();
        assert_eq!(
            p,
            Policy::Filter(Predicate::and(
                Predicate::not(Predicate::test(Field::Port, 1)),
                Predicate::test(Field::Vlan, 2)
            ))
        );
    }

    #[test]
    fn errors_carry_positions() {
        match parse("port = 1 ;\n  port :=").unwrap_err() {
            ParseError::Syntax { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            parse("port = 99999999999999999999999").unwrap_err(),
            ParseError::Overflow { .. }
        ));
        assert!(matches!(
            parse("nope = 1").unwrap_err(),
            ParseError::UnknownField { line: 1, col: 1, .. }
        ));
        assert!(parse("not port := 1").is_err());
    }

    #[test]
    fn dotted_quads() {
        assert_eq!(parse("ip4Dst = 10.0.0.1").unwrap(), Policy::test(Field::Ip4Dst, 0x0a000001));
        assert!(parse("ip4Dst = 10.0.1").is_err());
    }

    #[test]
    fn pretty_examples() {
        assert_eq!(pretty(&Policy::id()), "id");
        assert_eq!(
            pretty(&Policy::union(Policy::modify(Field::Port, 1), Policy::modify(Field::Port, 2))),
            "port := 1 + port := 2"
        );
        let p = parse("(port = 1 + port = 2)*; (vlan := 1; 1@2 => 3@4)").unwrap();
        assert_eq!(parse(&pretty(&p)).unwrap(), p);
    }

    #[test]
    fn validate_local_examples() {
        assert!(validate_local(&Policy::modify(Field::Port, 2)).ok);
        assert!(!validate_local(&Policy::dup()).ok);
        assert!(!validate_local(&Policy::modify(Field::Switch, 2)).ok);
        assert!(!validate_local(&Policy::test(Field::Pc, 2)).ok);
        assert!(validate_local_allowing(&Policy::test(Field::Pc, 2), &[Field::Pc]).ok);
        let check = validate_local(&parse("port := 1; dup; switch := 3").unwrap());
        assert_eq!(check.diagnostics.len(), 2);
    }

    #[test]
    fn local_programs_never_write_switch() {
        let p = parse("(port = 1; port := 2 + vlan := 3)*").unwrap();
        assert!(validate_local(&p).ok);
        assert!(!p.written_fields().contains(&Field::Switch));
    }

    #[test]
    fn field_order_and_counts() {
        assert_eq!(Field::MATCHABLE.len(), 12);
        assert_eq!(Field::RESERVED.len(), 3);
        assert!(Field::Switch < Field::Port && Field::TcpDstPort < Field::Pc);
        for f in Field::ALL {
            assert_eq!(f.name().parse::<Field>().unwrap(), f);
        }
    }
}
