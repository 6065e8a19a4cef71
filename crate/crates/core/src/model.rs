//! Core domain types: identifiers, typed values, bags, schemas and snapshots.
//!
//! Everything here is an immutable value type. Mutation happens in the
//! [`engine`](crate::engine), which hands out [`DocumentSnapshot`]s for reads.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use uuid::Uuid;

use crate::error::{Error, Result};

/// System-generated 128-bit document identifier, printed in UUID form.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DocumentId(u128);

impl DocumentId {
    pub const fn from_u128(raw: u128) -> Self {
        DocumentId(raw)
    }

    pub const fn as_u128(self) -> u128 {
        self.0
    }
}

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&Uuid::from_u128(self.0).hyphenated(), f)
    }
}

impl fmt::Debug for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DocumentId({self})")
    }
}

impl FromStr for DocumentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Uuid::try_parse(s)
            .map(|u| DocumentId(u.as_u128()))
            .map_err(|_| Error::InvalidValue(format!("not a document id: {s:?}")))
    }
}

/// Mints document ids. Random by default; a seeded generator produces a
/// deterministic counter sequence (`seed` in the high 64 bits).
#[derive(Debug, Clone)]
pub enum IdGenerator {
    Random,
    Seeded { seed: u64, next: u64 },
}

impl IdGenerator {
    pub fn seeded(seed: u64) -> Self {
        IdGenerator::Seeded { seed, next: 1 }
    }

    /// Moves a seeded counter past every id in `existing` that it could have minted.
    pub fn skip_existing<'a>(&mut self, existing: impl IntoIterator<Item = &'a DocumentId>) {
        if let IdGenerator::Seeded { seed, next } = self {
            for id in existing {
                let raw = id.as_u128();
                if (raw >> 64) as u64 == *seed {
                    *next = (*next).max((raw as u64).saturating_add(1));
                }
            }
        }
    }

    pub fn mint(&mut self) -> DocumentId {
        match self {
            IdGenerator::Random => DocumentId(Uuid::new_v4().as_u128()),
            IdGenerator::Seeded { seed, next } => {
                let id = DocumentId(((*seed as u128) << 64) | *next as u128);
                *next += 1;
                id
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValueType {
    Text,
    Integer,
    Float,
    Boolean,
    Timestamp,
    Bytes,
}

impl ValueType {
    pub const ALL: [ValueType; 6] = [
        ValueType::Text,
        ValueType::Integer,
        ValueType::Float,
        ValueType::Boolean,
        ValueType::Timestamp,
        ValueType::Bytes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ValueType::Text => "text",
            ValueType::Integer => "integer",
            ValueType::Float => "float",
            ValueType::Boolean => "boolean",
            ValueType::Timestamp => "timestamp",
            ValueType::Bytes => "bytes",
        }
    }

    /// Whether values of this type carry a total order (Boolean and Bytes
    /// only support equality).
    pub fn is_ordered(self) -> bool {
        !matches!(self, ValueType::Boolean | ValueType::Bytes)
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ValueType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ValueType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown value type {s:?}")))
    }
}

/// A finite 64-bit float. Equality is bit equality, order is IEEE total order.
#[derive(Clone, Copy)]
pub struct Float(f64);

impl Float {
    pub fn new(v: f64) -> Result<Self> {
        if v.is_finite() {
            Ok(Float(v))
        } else {
            Err(Error::InvalidValue(format!("float must be finite, got {v}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl PartialEq for Float {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Float {}

impl Hash for Float {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state)
    }
}

impl PartialOrd for Float {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Float {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Debug for Float {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.0, f)
    }
}

impl fmt::Display for Float {
    /// Shortest decimal that parses back to the same bits; always contains a
    /// `.` or an exponent so it reads as a float.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.0, f)
    }
}

/// UTC instant with millisecond precision, years 0000 through 9999.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

// 0000-01-01T00:00:00.000Z and 9999-12-31T23:59:59.999Z
const MIN_TIMESTAMP_MS: i64 = -62_167_219_200_000;
const MAX_TIMESTAMP_MS: i64 = 253_402_300_799_999;

impl Timestamp {
    pub fn from_millis(ms: i64) -> Result<Self> {
        if (MIN_TIMESTAMP_MS..=MAX_TIMESTAMP_MS).contains(&ms) {
            Ok(Timestamp(ms))
        } else {
            Err(Error::InvalidValue(format!("timestamp {ms}ms out of range")))
        }
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }

    fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp_millis(self.0).expect("timestamp range checked at construction")
    }

    /// Parses an RFC 3339 date-time. Any offset is accepted and normalized
    /// to UTC; precision finer than a millisecond is rejected.
    pub fn parse(s: &str) -> Result<Self> {
        let dt = DateTime::parse_from_rfc3339(s)
            .map_err(|e| Error::InvalidValue(format!("bad timestamp {s:?}: {e}")))?;
        if dt.timestamp_subsec_nanos() % 1_000_000 != 0 {
            return Err(Error::InvalidValue(format!(
                "timestamp {s:?} is more precise than a millisecond"
            )));
        }
        Timestamp::from_millis(dt.timestamp_millis())
    }

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Result<Self> {
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| Error::InvalidValue(format!("bad date {year}-{month}-{day}")))?;
        let ms = date.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp_millis();
        Timestamp::from_millis(ms)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_datetime().to_rfc3339_opts(SecondsFormat::Millis, true))
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Timestamp({self})")
    }
}

/// A typed scalar. The derived order sorts first by type, then by payload;
/// it is the canonical storage order, not the query comparison order (see
/// [`compare_values`]).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Text(String),
    Integer(i64),
    Float(Float),
    Boolean(bool),
    Timestamp(Timestamp),
    Bytes(Vec<u8>),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn float(v: f64) -> Result<Self> {
        Float::new(v).map(Value::Float)
    }

    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Text(_) => ValueType::Text,
            Value::Integer(_) => ValueType::Integer,
            Value::Float(_) => ValueType::Float,
            Value::Boolean(_) => ValueType::Boolean,
            Value::Timestamp(_) => ValueType::Timestamp,
            Value::Bytes(_) => ValueType::Bytes,
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Boolean(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_owned())
    }
}

impl From<Timestamp> for Value {
    fn from(v: Timestamp) -> Self {
        Value::Timestamp(v)
    }
}

impl fmt::Display for Value {
    /// Renders the value in query-literal syntax.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => write_quoted(f, s),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::Timestamp(t) => write!(f, "{t}"),
            Value::Bytes(b) => write!(f, "x\"{}\"", hex::encode(b)),
        }
    }
}

/// Writes `s` as a double-quoted literal with `\"`, `\\`, `\n`, `\t`, `\r` and
/// `\u{..}` escapes.
pub(crate) fn write_quoted(f: &mut impl fmt::Write, s: &str) -> fmt::Result {
    f.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            '\r' => f.write_str("\\r")?,
            c if c.is_control() => write!(f, "\\u{{{:x}}}", c as u32)?,
            c => f.write_char(c)?,
        }
    }
    f.write_char('"')
}

/// Compares two values for the query operators.
///
/// Returns `None` when the values have different types, and for unequal
/// Boolean or Bytes values (those types support equality only).
pub fn compare_values(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        (Value::Integer(x), Value::Integer(y)) => Some(x.cmp(y)),
        (Value::Float(x), Value::Float(y)) => Some(x.cmp(y)),
        (Value::Timestamp(x), Value::Timestamp(y)) => Some(x.cmp(y)),
        (Value::Boolean(x), Value::Boolean(y)) => (x == y).then_some(Ordering::Equal),
        (Value::Bytes(x), Value::Bytes(y)) => (x == y).then_some(Ordering::Equal),
        _ => None,
    }
}

/// An unordered multiset of values, kept sorted in canonical order so that
/// equality is multiset equality.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Bag(Vec<Value>);

static EMPTY_BAG: Bag = Bag(Vec::new());

impl Bag {
    pub const fn new() -> Self {
        Bag(Vec::new())
    }

    pub fn empty_ref() -> &'static Bag {
        &EMPTY_BAG
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Value> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Value] {
        &self.0
    }

    pub fn insert(&mut self, v: Value) {
        let at = self.0.partition_point(|x| x <= &v);
        self.0.insert(at, v);
    }

    /// Removes one occurrence of `v`; returns whether one was present.
    pub fn remove_one(&mut self, v: &Value) -> bool {
        match self.0.binary_search(v) {
            Ok(i) => {
                self.0.remove(i);
                true
            }
            Err(_) => false,
        }
    }

    pub fn count(&self, v: &Value) -> usize {
        let lo = self.0.partition_point(|x| x < v);
        let hi = self.0.partition_point(|x| x <= v);
        hi - lo
    }

    pub fn contains(&self, v: &Value) -> bool {
        self.0.binary_search(v).is_ok()
    }

    /// Distinct values with their multiplicities, in canonical order.
    pub fn counted(&self) -> Vec<(&Value, usize)> {
        let mut out: Vec<(&Value, usize)> = Vec::new();
        for v in &self.0 {
            match out.last_mut() {
                Some((last, n)) if *last == v => *n += 1,
                _ => out.push((v, 1)),
            }
        }
        out
    }

    pub fn into_vec(self) -> Vec<Value> {
        self.0
    }
}

impl FromIterator<Value> for Bag {
    fn from_iter<I: IntoIterator<Item = Value>>(iter: I) -> Self {
        let mut v: Vec<Value> = iter.into_iter().collect();
        v.sort();
        Bag(v)
    }
}

impl From<Vec<Value>> for Bag {
    fn from(v: Vec<Value>) -> Self {
        v.into_iter().collect()
    }
}

impl<'a> IntoIterator for &'a Bag {
    type Item = &'a Value;
    type IntoIter = std::slice::Iter<'a, Value>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Property and schema names must be non-empty. Names are case-sensitive.
pub fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        Err(Error::InvalidName(name.to_owned()))
    } else {
        Ok(())
    }
}

/// Type and arity constraint on one property of a schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub value_type: ValueType,
    /// `min_count == 1`.
    pub required: bool,
    /// `max_count` is unbounded rather than 1.
    pub multiple: bool,
}

impl Constraint {
    pub fn required_single(value_type: ValueType) -> Self {
        Constraint { value_type, required: true, multiple: false }
    }

    pub fn optional_single(value_type: ValueType) -> Self {
        Constraint { value_type, required: false, multiple: false }
    }

    pub fn optional_many(value_type: ValueType) -> Self {
        Constraint { value_type, required: false, multiple: true }
    }

    pub fn required_many(value_type: ValueType) -> Self {
        Constraint { value_type, required: true, multiple: true }
    }

    pub fn min_count(&self) -> usize {
        self.required as usize
    }

    pub fn max_count(&self) -> Option<usize> {
        (!self.multiple).then_some(1)
    }

    /// Arity in `min..max` form, e.g. `1..1` or `0..*`.
    pub fn arity(&self) -> &'static str {
        match (self.required, self.multiple) {
            (true, false) => "1..1",
            (false, false) => "0..1",
            (false, true) => "0..*",
            (true, true) => "1..*",
        }
    }

    pub fn parse_arity(s: &str) -> Result<(bool, bool)> {
        match s {
            "1..1" => Ok((true, false)),
            "0..1" => Ok((false, false)),
            "0..*" => Ok((false, true)),
            "1..*" => Ok((true, true)),
            _ => Err(Error::InvalidValue(format!(
                "arity must be one of 1..1, 0..1, 0..*, 1..*; got {s:?}"
            ))),
        }
    }
}

/// A named group of property constraints. The empty schema is legal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub name: String,
    pub constraints: BTreeMap<String, Constraint>,
}

impl Schema {
    pub fn new(name: impl Into<String>) -> Self {
        Schema { name: name.into(), constraints: BTreeMap::new() }
    }

    pub fn with(mut self, property: impl Into<String>, constraint: Constraint) -> Self {
        self.constraints.insert(property.into(), constraint);
        self
    }

    pub fn properties(&self) -> impl Iterator<Item = &str> {
        self.constraints.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DocumentKind {
    Plain,
    Collection,
    Content,
}

impl DocumentKind {
    pub fn name(self) -> &'static str {
        match self {
            DocumentKind::Plain => "plain",
            DocumentKind::Collection => "collection",
            DocumentKind::Content => "content",
        }
    }
}

impl fmt::Display for DocumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DocumentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(DocumentKind::Plain),
            "collection" => Ok(DocumentKind::Collection),
            "content" => Ok(DocumentKind::Content),
            _ => Err(Error::InvalidValue(format!("unknown document kind {s:?}"))),
        }
    }
}

/// Read access to a document's property bags.
pub trait PropertySource {
    /// The bag for `name`; empty when the property is absent.
    fn values_of(&self, name: &str) -> &Bag;
}

/// A complete, immutable view of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentSnapshot {
    pub id: DocumentId,
    pub kind: DocumentKind,
    /// Only non-empty bags are present.
    pub properties: BTreeMap<String, Bag>,
    /// Enforced schema names, in enforcement order.
    pub enforced: Vec<String>,
    pub members: BTreeSet<DocumentId>,
}

impl DocumentSnapshot {
    pub fn new(id: DocumentId, kind: DocumentKind) -> Self {
        DocumentSnapshot {
            id,
            kind,
            properties: BTreeMap::new(),
            enforced: Vec::new(),
            members: BTreeSet::new(),
        }
    }

    pub fn values_of(&self, name: &str) -> &Bag {
        self.properties.get(name).unwrap_or(&EMPTY_BAG)
    }

    pub fn is_enforced(&self, schema: &str) -> bool {
        self.enforced.iter().any(|s| s == schema)
    }

    /// Replaces the bag for `name`; an empty bag removes the property.
    pub fn set(&mut self, name: impl Into<String>, bag: Bag) {
        let name = name.into();
        if bag.is_empty() {
            self.properties.remove(&name);
        } else {
            self.properties.insert(name, bag);
        }
    }
}

impl PropertySource for DocumentSnapshot {
    fn values_of(&self, name: &str) -> &Bag {
        DocumentSnapshot::values_of(self, name)
    }
}
