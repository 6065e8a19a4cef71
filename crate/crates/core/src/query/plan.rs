//! Rule-based rewriting and the graph-structured query plan.
//!
//! `plan` normalizes the expression (double-negation elimination, negation
//! pushed to the leaves by De Morgan, nested `And`/`Or` flattened) and then
//! builds a DAG in which identical sub-expressions are a single node. Every
//! filter reads from the one `SourceScan` node.

use std::collections::{BTreeSet, HashMap};

use crate::error::Result;
use crate::model::{Bag, DocumentId};
use crate::schema::SchemaRegistry;

use super::{Predicate, QueryExpr};

/// What a plan needs to evaluate against one document.
pub trait DocAccess {
    fn values_of(&self, prop: &str) -> &Bag;
    fn has_schema(&self, name: &str) -> bool;
    fn member_of(&self, collection: DocumentId) -> bool;
    fn content_contains(&self, token: &str) -> bool;
}

/// `Not(Not(e))` becomes `e`, everywhere in the tree.
pub fn eliminate_double_negation(e: &QueryExpr) -> QueryExpr {
    match e {
        QueryExpr::Not(inner) => match inner.as_ref() {
            QueryExpr::Not(x) => eliminate_double_negation(x),
            x => QueryExpr::not(eliminate_double_negation(x)),
        },
        QueryExpr::And(xs) => QueryExpr::And(xs.iter().map(eliminate_double_negation).collect()),
        QueryExpr::Or(xs) => QueryExpr::Or(xs.iter().map(eliminate_double_negation).collect()),
        QueryExpr::Pred(_) => e.clone(),
    }
}

/// Pushes every negation down to a leaf with De Morgan's laws.
pub fn push_negation(e: &QueryExpr) -> QueryExpr {
    fn go(e: &QueryExpr, negate: bool) -> QueryExpr {
        match (e, negate) {
            (QueryExpr::Pred(_), false) => e.clone(),
            (QueryExpr::Pred(_), true) => QueryExpr::not(e.clone()),
            (QueryExpr::Not(x), n) => go(x, !n),
            (QueryExpr::And(xs), false) => {
                QueryExpr::And(xs.iter().map(|x| go(x, false)).collect())
            }
            (QueryExpr::Or(xs), false) => QueryExpr::Or(xs.iter().map(|x| go(x, false)).collect()),
            (QueryExpr::And(xs), true) => QueryExpr::Or(xs.iter().map(|x| go(x, true)).collect()),
            (QueryExpr::Or(xs), true) => QueryExpr::And(xs.iter().map(|x| go(x, true)).collect()),
        }
    }
    go(e, false)
}

/// Merges `And` children of `And` (and `Or` of `Or`) and unwraps single-child
/// combinations.
pub fn flatten(e: &QueryExpr) -> QueryExpr {
    match e {
        QueryExpr::And(xs) | QueryExpr::Or(xs) => {
            let is_and = matches!(e, QueryExpr::And(_));
            let mut out = Vec::with_capacity(xs.len());
            for x in xs.iter().map(flatten) {
                match x {
                    QueryExpr::And(ys) if is_and => out.extend(ys),
                    QueryExpr::Or(ys) if !is_and => out.extend(ys),
                    other => out.push(other),
                }
            }
            if out.len() == 1 {
                out.pop().unwrap()
            } else if is_and {
                QueryExpr::And(out)
            } else {
                QueryExpr::Or(out)
            }
        }
        QueryExpr::Not(x) => QueryExpr::not(flatten(x)),
        QueryExpr::Pred(_) => e.clone(),
    }
}

/// All rewrites in order; the result is in negation normal form.
pub fn normalize(e: &QueryExpr) -> QueryExpr {
    flatten(&push_negation(&eliminate_double_negation(e)))
}

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoolOp {
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PlanNode {
    /// Every document in the repository.
    SourceScan,
    /// Documents from `input` for which the predicate holds (or, when
    /// `negated`, does not hold).
    SliceFilter { input: NodeId, pred: Predicate, negated: bool },
    /// Intersection or union of the inputs; inputs are sorted and distinct.
    BooleanCombine { op: BoolOp, inputs: Vec<NodeId> },
}

/// Properties to materialize for each candidate document before filtering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Prefetch {
    /// Schemas touched by the query: named by a schema predicate, or
    /// containing a property the query reads.
    pub schemas: BTreeSet<String>,
    /// Every property of those schemas plus every property the query reads.
    pub properties: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    nodes: Vec<PlanNode>,
    root: NodeId,
    prefetch: Prefetch,
    collections: BTreeSet<DocumentId>,
    needs_content: bool,
}

struct Builder {
    nodes: Vec<PlanNode>,
    index: HashMap<PlanNode, NodeId>,
}

impl Builder {
    fn intern(&mut self, node: PlanNode) -> NodeId {
        if let Some(&id) = self.index.get(&node) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(node.clone());
        self.index.insert(node, id);
        id
    }

    fn build(&mut self, e: &QueryExpr) -> NodeId {
        match e {
            QueryExpr::Pred(p) => {
                self.intern(PlanNode::SliceFilter { input: 0, pred: p.clone(), negated: false })
            }
            QueryExpr::Not(x) => match x.as_ref() {
                QueryExpr::Pred(p) => {
                    self.intern(PlanNode::SliceFilter { input: 0, pred: p.clone(), negated: true })
                }
                _ => unreachable!("negation is pushed to the leaves before building"),
            },
            QueryExpr::And(xs) | QueryExpr::Or(xs) => {
                let op = if matches!(e, QueryExpr::And(_)) { BoolOp::And } else { BoolOp::Or };
                let mut inputs: Vec<NodeId> = xs.iter().map(|x| self.build(x)).collect();
                inputs.sort_unstable();
                inputs.dedup();
                if inputs.len() == 1 {
                    return inputs[0];
                }
                self.intern(PlanNode::BooleanCombine { op, inputs })
            }
        }
    }
}

/// Rewrites `q` and builds its plan. Fails on unregistered schema names.
pub fn plan(q: &QueryExpr, registry: &SchemaRegistry) -> Result<QueryPlan> {
    for s in q.schemas() {
        registry.require(s)?;
    }
    let normal = normalize(q);
    let mut b = Builder { nodes: vec![PlanNode::SourceScan], index: HashMap::new() };
    b.index.insert(PlanNode::SourceScan, 0);
    let root = b.build(&normal);

    let mut prefetch = Prefetch::default();
    let mut collections = BTreeSet::new();
    let mut needs_content = false;
    for node in &b.nodes {
        let PlanNode::SliceFilter { pred, .. } = node else { continue };
        match pred {
            Predicate::HasSchema(s) => {
                prefetch.schemas.insert(s.clone());
            }
            Predicate::MemberOf(c) => {
                collections.insert(*c);
            }
            Predicate::ContentContains(_) => needs_content = true,
            p => {
                let prop = p.property().expect("property predicate");
                prefetch.properties.insert(prop.to_owned());
                for s in registry.iter().filter(|s| s.constraints.contains_key(prop)) {
                    prefetch.schemas.insert(s.name.clone());
                }
            }
        }
    }
    for s in &prefetch.schemas {
        let schema = registry.require(s)?;
        prefetch.properties.extend(schema.properties().map(str::to_owned));
    }

    Ok(QueryPlan { nodes: b.nodes, root, prefetch, collections, needs_content })
}

impl QueryPlan {
    pub fn nodes(&self) -> &[PlanNode] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn prefetch(&self) -> &Prefetch {
        &self.prefetch
    }

    /// Collections named by membership predicates.
    pub fn collections(&self) -> &BTreeSet<DocumentId> {
        &self.collections
    }

    pub fn needs_content(&self) -> bool {
        self.needs_content
    }

    /// Whether the document passes the plan's root node.
    pub fn matches(&self, doc: &impl DocAccess) -> bool {
        let mut memo: Vec<Option<bool>> = vec![None; self.nodes.len()];
        self.eval(self.root, doc, &mut memo)
    }

    fn eval(&self, id: NodeId, doc: &impl DocAccess, memo: &mut [Option<bool>]) -> bool {
        if let Some(v) = memo[id] {
            return v;
        }
        let v = match &self.nodes[id] {
            PlanNode::SourceScan => true,
            PlanNode::SliceFilter { input, pred, negated } => {
                self.eval(*input, doc, memo) && (pred.eval(doc) != *negated)
            }
            PlanNode::BooleanCombine { op: BoolOp::And, inputs } => {
                inputs.iter().all(|&i| self.eval(i, doc, memo))
            }
            PlanNode::BooleanCombine { op: BoolOp::Or, inputs } => {
                inputs.iter().any(|&i| self.eval(i, doc, memo))
            }
        };
        memo[id] = Some(v);
        v
    }
}
