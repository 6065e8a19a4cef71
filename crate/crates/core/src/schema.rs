//! Schema registry: definition with consistency checking, conformance,
//! enforcement bookkeeping on snapshots, mutation validation and the slice
//! allocation rule used by the organization manager.
//!
//! Two schemas are *inconsistent* when they assign different constraints to
//! the same property name. Because every registered pair is consistent, a
//! property name maps to at most one constraint across the whole registry,
//! and enforcing several schemas on one document can never conflict.

use std::fmt;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{validate_name, Bag, Constraint, DocumentSnapshot, PropertySource, Schema};
use crate::store::SliceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationReason {
    /// A required property has no values.
    MissingRequired,
    /// A single-valued property has more than one value.
    TooManyValues,
    /// A mutation would remove the last value of a required property.
    TooFewValues,
    /// At least one value has the wrong type.
    WrongType,
}

impl ViolationReason {
    pub fn name(self) -> &'static str {
        match self {
            ViolationReason::MissingRequired => "MissingRequired",
            ViolationReason::TooManyValues => "TooManyValues",
            ViolationReason::TooFewValues => "TooFewValues",
            ViolationReason::WrongType => "WrongType",
        }
    }
}

impl fmt::Display for ViolationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    pub schema: String,
    pub property: String,
    pub reason: ViolationReason,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.schema, self.property, self.reason)
    }
}

/// Checks one bag against one constraint, appending any violations.
fn check_bag(schema: &str, property: &str, c: &Constraint, bag: &Bag, out: &mut Vec<Violation>) {
    let mut push = |reason| {
        out.push(Violation { schema: schema.to_owned(), property: property.to_owned(), reason })
    };
    let n = bag.len();
    if n < c.min_count() {
        push(ViolationReason::MissingRequired);
    }
    if c.max_count().is_some_and(|max| n > max) {
        push(ViolationReason::TooManyValues);
    }
    if bag.iter().any(|v| v.value_type() != c.value_type) {
        push(ViolationReason::WrongType);
    }
}

/// Registered schemas, in registration order.
#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: IndexMap<String, Schema>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `schema` after checking it against every registered schema.
    pub fn define_schema(&mut self, schema: Schema) -> Result<()> {
        self.check_definition(&schema)?;
        self.schemas.insert(schema.name.clone(), schema);
        Ok(())
    }

    /// The checks [`define_schema`](Self::define_schema) performs, without
    /// registering anything.
    pub fn check_definition(&self, schema: &Schema) -> Result<()> {
        validate_name(&schema.name)?;
        for p in schema.properties() {
            validate_name(p)?;
        }
        if self.schemas.contains_key(&schema.name) {
            return Err(Error::DuplicateName(schema.name.clone()));
        }
        for (prop, c) in &schema.constraints {
            if let Some(existing) =
                self.schemas.values().find(|e| e.constraints.get(prop).is_some_and(|ec| ec != c))
            {
                return Err(Error::InconsistentSchema {
                    existing: existing.name.clone(),
                    property: prop.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Schema> {
        self.schemas.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Schema> {
        self.get(name).ok_or_else(|| Error::UnknownSchema(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.schemas.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    /// Schemas in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Schema> {
        self.schemas.values()
    }

    /// The constraint every registered schema containing `property` agrees on.
    pub fn constraint_for(&self, property: &str) -> Option<&Constraint> {
        self.schemas.values().find_map(|s| s.constraints.get(property))
    }

    /// The slice a schema's properties are grouped into: its registration
    /// position plus one (slice 0 holds properties outside every schema).
    pub fn slice_of(&self, name: &str) -> Option<SliceId> {
        self.schemas.get_index_of(name).map(|i| SliceId(i as u32 + 1))
    }

    /// Every violation of schema `name` by `doc`; empty means it conforms.
    pub fn conforms(&self, doc: &impl PropertySource, name: &str) -> Result<Vec<Violation>> {
        let schema = self.require(name)?;
        let mut out = Vec::new();
        for (prop, c) in &schema.constraints {
            check_bag(&schema.name, prop, c, doc.values_of(prop), &mut out);
        }
        Ok(out)
    }

    /// Adds `name` to the snapshot's enforcement list if it conforms.
    /// Returns `false` when it was already enforced.
    pub fn enforce(&self, doc: &mut DocumentSnapshot, name: &str) -> Result<bool> {
        let violations = self.conforms(doc, name)?;
        if !violations.is_empty() {
            return Err(Error::NotConforming(violations));
        }
        if doc.is_enforced(name) {
            return Ok(false);
        }
        doc.enforced.push(name.to_owned());
        Ok(true)
    }

    /// Removes `name` from the enforcement list; property data is untouched.
    pub fn unenforce(doc: &mut DocumentSnapshot, name: &str) -> bool {
        let before = doc.enforced.len();
        doc.enforced.retain(|s| s != name);
        doc.enforced.len() != before
    }

    /// Checks `proposed` against every schema enforced on `current`.
    ///
    /// A required property that `current` has but `proposed` lacks is
    /// reported as [`ViolationReason::TooFewValues`].
    pub fn validate_mutation(
        &self,
        current: &DocumentSnapshot,
        proposed: &DocumentSnapshot,
    ) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        for name in &current.enforced {
            let Some(schema) = self.get(name) else { continue };
            for (prop, c) in &schema.constraints {
                let start = out.len();
                check_bag(name, prop, c, proposed.values_of(prop), &mut out);
                if !current.values_of(prop).is_empty() {
                    for v in &mut out[start..] {
                        if v.reason == ViolationReason::MissingRequired {
                            v.reason = ViolationReason::TooFewValues;
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Validates a single-property change against the enforced schemas. This
    /// is what the write path uses: a document that conforms before the change
    /// can only stop conforming on the property being changed.
    pub fn check_property(
        &self,
        enforced: &[String],
        property: &str,
        was_present: bool,
        proposed: &Bag,
    ) -> Vec<Violation> {
        let mut out = Vec::new();
        for name in enforced {
            let Some(c) = self.get(name).and_then(|s| s.constraints.get(property)) else {
                continue;
            };
            let start = out.len();
            check_bag(name, property, c, proposed, &mut out);
            if was_present {
                for v in &mut out[start..] {
                    if v.reason == ViolationReason::MissingRequired {
                        v.reason = ViolationReason::TooFewValues;
                    }
                }
            }
        }
        out
    }

    /// Slice allocation for a property seen on a document for the first time:
    /// the earliest-enforced schema containing it, else the earliest-registered
    /// one, else the default slice.
    pub fn assign_slice(&self, enforced: &[String], property: &str) -> SliceId {
        let holds =
            |name: &str| self.get(name).is_some_and(|s| s.constraints.contains_key(property));
        enforced
            .iter()
            .find(|name| holds(name))
            .or_else(|| self.schemas.keys().find(|name| holds(name)))
            .and_then(|name| self.slice_of(name))
            .unwrap_or(SliceId::DEFAULT)
    }
}
