//! Query algebra: boolean combinations of per-document predicates. There is
//! no join: whether a document matches depends only on that document (and,
//! for [`Predicate::MemberOf`], on the named collection's member set).
//!
//! Multi-valued properties use existential semantics: a comparison matches
//! when *some* value of the bag has the literal's type and satisfies the
//! operator. Negation is closed-world over the documents in the repository.

mod parser;
mod plan;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::model::{
    compare_values, write_quoted, Bag, DocumentId, DocumentKind, DocumentSnapshot, Value,
};

pub use parser::{parse, parse_literal, ParseError};
pub use plan::{
    eliminate_double_negation, flatten, normalize, plan, push_negation, BoolOp, DocAccess, NodeId,
    PlanNode, Prefetch, QueryPlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    /// Whether stored value `v` satisfies `v <op> literal`. Values of another
    /// type never do; Boolean and Bytes only support `=` and `!=`.
    pub fn test(self, v: &Value, literal: &Value) -> bool {
        use std::cmp::Ordering::*;
        if v.value_type() != literal.value_type() {
            return false;
        }
        match self {
            CmpOp::Eq => v == literal,
            CmpOp::Ne => v != literal,
            _ if !literal.value_type().is_ordered() => false,
            _ => match compare_values(v, literal) {
                None => false,
                Some(o) => match self {
                    CmpOp::Lt => o == Less,
                    CmpOp::Le => o != Greater,
                    CmpOp::Gt => o == Greater,
                    CmpOp::Ge => o != Less,
                    CmpOp::Eq | CmpOp::Ne => unreachable!(),
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cardinality {
    /// Exactly one value.
    Single,
    /// Two or more values.
    Multiple,
}

/// A leaf of the query algebra.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Predicate {
    Cmp {
        prop: String,
        op: CmpOp,
        value: Value,
    },
    Exists(String),
    Cardinality(String, Cardinality),
    HasSchema(String),
    MemberOf(DocumentId),
    /// Token is stored case-folded.
    ContentContains(String),
}

impl Predicate {
    pub fn property(&self) -> Option<&str> {
        match self {
            Predicate::Cmp { prop, .. }
            | Predicate::Exists(prop)
            | Predicate::Cardinality(prop, _) => Some(prop),
            _ => None,
        }
    }

    pub fn eval(&self, doc: &impl DocAccess) -> bool {
        match self {
            Predicate::Cmp { prop, op, value } => {
                doc.values_of(prop).iter().any(|v| op.test(v, value))
            }
            Predicate::Exists(prop) => !doc.values_of(prop).is_empty(),
            Predicate::Cardinality(prop, c) => {
                let n = doc.values_of(prop).len();
                match c {
                    Cardinality::Single => n == 1,
                    Cardinality::Multiple => n >= 2,
                }
            }
            Predicate::HasSchema(s) => doc.has_schema(s),
            Predicate::MemberOf(c) => doc.member_of(*c),
            Predicate::ContentContains(t) => doc.content_contains(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum QueryExpr {
    Pred(Predicate),
    /// Empty `And` matches every document.
    And(Vec<QueryExpr>),
    /// Empty `Or` matches nothing.
    Or(Vec<QueryExpr>),
    Not(Box<QueryExpr>),
}

impl QueryExpr {
    pub fn cmp(prop: impl Into<String>, op: CmpOp, value: impl Into<Value>) -> Self {
        QueryExpr::Pred(Predicate::Cmp { prop: prop.into(), op, value: value.into() })
    }

    pub fn exists(prop: impl Into<String>) -> Self {
        QueryExpr::Pred(Predicate::Exists(prop.into()))
    }

    pub fn cardinality(prop: impl Into<String>, c: Cardinality) -> Self {
        QueryExpr::Pred(Predicate::Cardinality(prop.into(), c))
    }

    pub fn has_schema(name: impl Into<String>) -> Self {
        QueryExpr::Pred(Predicate::HasSchema(name.into()))
    }

    pub fn member_of(collection: DocumentId) -> Self {
        QueryExpr::Pred(Predicate::MemberOf(collection))
    }

    pub fn content_contains(token: &str) -> Self {
        QueryExpr::Pred(Predicate::ContentContains(token.to_lowercase()))
    }

    pub fn and(items: impl IntoIterator<Item = QueryExpr>) -> Self {
        QueryExpr::And(items.into_iter().collect())
    }

    pub fn or(items: impl IntoIterator<Item = QueryExpr>) -> Self {
        QueryExpr::Or(items.into_iter().collect())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: QueryExpr) -> Self {
        QueryExpr::Not(Box::new(e))
    }

    /// Every leaf predicate, in syntax order.
    pub fn predicates(&self) -> Vec<&Predicate> {
        let mut out = Vec::new();
        fn walk<'a>(e: &'a QueryExpr, out: &mut Vec<&'a Predicate>) {
            match e {
                QueryExpr::Pred(p) => out.push(p),
                QueryExpr::And(xs) | QueryExpr::Or(xs) => xs.iter().for_each(|x| walk(x, out)),
                QueryExpr::Not(x) => walk(x, out),
            }
        }
        walk(self, &mut out);
        out
    }

    pub fn schemas(&self) -> BTreeSet<&str> {
        self.predicates()
            .into_iter()
            .filter_map(|p| match p {
                Predicate::HasSchema(s) => Some(s.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn depth(&self) -> usize {
        match self {
            QueryExpr::Pred(_) => 1,
            QueryExpr::And(xs) | QueryExpr::Or(xs) => {
                1 + xs.iter().map(Self::depth).max().unwrap_or(0)
            }
            QueryExpr::Not(x) => 1 + x.depth(),
        }
    }
}

impl From<Predicate> for QueryExpr {
    fn from(p: Predicate) -> Self {
        QueryExpr::Pred(p)
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '.' | '-')
}

const RESERVED: [&str; 3] = ["AND", "OR", "NOT"];

fn write_name(f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
    let mut chars = name.chars();
    let bare = chars.next().is_some_and(is_ident_start)
        && chars.all(is_ident_char)
        && !RESERVED.contains(&name);
    if bare {
        f.write_str(name)
    } else {
        write_quoted(f, name)
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Cmp { prop, op, value } => {
                write_name(f, prop)?;
                write!(f, " {} {value}", op.symbol())
            }
            Predicate::Exists(p) => {
                f.write_str("exists(")?;
                write_name(f, p)?;
                f.write_str(")")
            }
            Predicate::Cardinality(p, c) => {
                f.write_str("count(")?;
                write_name(f, p)?;
                let c = match c {
                    Cardinality::Single => "single",
                    Cardinality::Multiple => "multiple",
                };
                write!(f, ") = {c}")
            }
            Predicate::HasSchema(s) => {
                f.write_str("schema:")?;
                write_quoted(f, s)
            }
            Predicate::MemberOf(c) => write!(f, "member-of:{c}"),
            Predicate::ContentContains(t) => {
                f.write_str("content:")?;
                write_quoted(f, t)
            }
        }
    }
}

impl fmt::Display for QueryExpr {
    /// Text syntax accepted by [`parse`]. Empty `And`/`Or` have no text form
    /// and render as `()`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &QueryExpr) -> fmt::Result {
            match e {
                QueryExpr::And(_) | QueryExpr::Or(_) => write!(f, "({e})"),
                _ => write!(f, "{e}"),
            }
        }
        match self {
            QueryExpr::Pred(p) => write!(f, "{p}"),
            QueryExpr::And(xs) | QueryExpr::Or(xs) if xs.is_empty() => f.write_str("()"),
            QueryExpr::And(xs) | QueryExpr::Or(xs) => {
                let sep = if matches!(self, QueryExpr::And(_)) { " AND " } else { " OR " };
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    child(f, x)?;
                }
                Ok(())
            }
            QueryExpr::Not(x) => {
                f.write_str("NOT ")?;
                child(f, x)
            }
        }
    }
}

/// A fully materialized copy of a repository, used by the reference evaluator.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RepoView {
    pub docs: BTreeMap<DocumentId, DocumentSnapshot>,
    /// Content token index of every content document that has content.
    pub content: BTreeMap<DocumentId, BTreeSet<String>>,
    pub schemas: BTreeSet<String>,
}

/// Brute-force reference evaluation: scans every document and evaluates the
/// expression tree directly, with no rewriting or planning.
pub fn naive_eval(q: &QueryExpr, repo: &RepoView) -> Result<BTreeSet<DocumentId>> {
    for p in q.predicates() {
        match p {
            Predicate::HasSchema(s) if !repo.schemas.contains(s) => {
                return Err(Error::UnknownSchema(s.clone()))
            }
            Predicate::MemberOf(c)
                if repo.docs.get(c).map(|d| d.kind) != Some(DocumentKind::Collection) =>
            {
                return Err(Error::UnknownCollection(*c))
            }
            _ => {}
        }
    }

    fn holds(q: &QueryExpr, doc: &DocumentSnapshot, repo: &RepoView) -> bool {
        match q {
            QueryExpr::And(xs) => xs.iter().all(|x| holds(x, doc, repo)),
            QueryExpr::Or(xs) => xs.iter().any(|x| holds(x, doc, repo)),
            QueryExpr::Not(x) => !holds(x, doc, repo),
            QueryExpr::Pred(p) => {
                let bag: &Bag = match p.property() {
                    Some(name) => doc.values_of(name),
                    None => Bag::empty_ref(),
                };
                match p {
                    Predicate::Cmp { op, value, .. } => {
                        let same_type: Vec<&Value> =
                            bag.iter().filter(|v| v.value_type() == value.value_type()).collect();
                        match op {
                            CmpOp::Eq => same_type.contains(&value),
                            CmpOp::Ne => same_type.iter().any(|v| *v != value),
                            _ if !value.value_type().is_ordered() => false,
                            _ => same_type.iter().any(|v| {
                                let ord = compare_values(v, value).expect("same ordered type");
                                match op {
                                    CmpOp::Lt => ord.is_lt(),
                                    CmpOp::Le => ord.is_le(),
                                    CmpOp::Gt => ord.is_gt(),
                                    CmpOp::Ge => ord.is_ge(),
                                    CmpOp::Eq | CmpOp::Ne => unreachable!(),
                                }
                            }),
                        }
                    }
                    Predicate::Exists(_) => !bag.is_empty(),
                    Predicate::Cardinality(_, Cardinality::Single) => bag.len() == 1,
                    Predicate::Cardinality(_, Cardinality::Multiple) => bag.len() >= 2,
                    Predicate::HasSchema(s) => doc.enforced.contains(s),
                    Predicate::MemberOf(c) => repo.docs[c].members.contains(&doc.id),
                    Predicate::ContentContains(t) => {
                        repo.content.get(&doc.id).is_some_and(|tokens| tokens.contains(t))
                    }
                }
            }
        }
    }

    Ok(repo.docs.values().filter(|d| holds(q, d, repo)).map(|d| d.id).collect())
}
