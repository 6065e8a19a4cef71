//! The `HARLAND-STORE v1` checkpoint encoding.
//!
//! ```text
//! HARLAND-STORE v1
//! PROPS
//! <doc>\t<slice>\t<property>\t<value>\t<dup>        one line per property row
//! META
//! SCHEMA\t<name>[\t<property>\t<type>\t<arity>]*    registration order
//! DOC\t<doc>\t<kind>
//! ENFORCE\t<doc>\t<schema>                           enforcement order
//! SLICE\t<doc>\t<property>\t<slice>
//! MEMBER\t<collection>\t<member>
//! CONTENT
//! LOB\t<doc>\t<length>\t<token>,<token>,...
//! END <decimal CRC32C of every preceding byte>
//! ```
//!
//! Text fields escape `\t`, `\n` and `\\` with a backslash. Values are written
//! as `<type>:<text>`, with Text and Bytes hex-encoded. The encoding is
//! canonical: a file decodes only if re-encoding the result reproduces it
//! byte for byte.

use std::borrow::Cow;
use std::collections::btree_map::Entry;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Constraint, DocumentId, Float, Schema, Timestamp, Value, ValueType};

use super::{ContentRef, DocMeta, MetadataRecord, PropertyRow, RowKey, SliceId, StoreImage};

pub const MAGIC: &str = "HARLAND-STORE v1";

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStore(msg.into())
}

pub fn escape_field(s: &str) -> Cow<'_, str> {
    if !s.contains(['\t', '\n', '\\']) {
        return Cow::Borrowed(s);
    }
    let mut out = String::with_capacity(s.len() + 4);
    for c in s.chars() {
        match c {
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    Cow::Owned(out)
}

pub fn unescape_field(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            other => {
                return Err(corrupt(format!(
                    "bad escape \\{}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

pub fn encode_value(v: &Value) -> String {
    let tag = v.value_type().name();
    match v {
        Value::Text(s) => format!("{tag}:{}", hex::encode(s.as_bytes())),
        Value::Integer(i) => format!("{tag}:{i}"),
        Value::Float(x) => format!("{tag}:{x}"),
        Value::Boolean(b) => format!("{tag}:{b}"),
        Value::Timestamp(t) => format!("{tag}:{t}"),
        Value::Bytes(b) => format!("{tag}:{}", hex::encode(b)),
    }
}

/// Decodes a `<type>:<text>` field. Only the canonical spelling is accepted.
pub fn decode_value(field: &str) -> Result<Value> {
    let (tag, text) = field
        .split_once(':')
        .ok_or_else(|| corrupt(format!("value without type tag: {field:?}")))?;
    let ty: ValueType = tag.parse().map_err(|_| corrupt(format!("unknown type tag {tag:?}")))?;
    let bad = |e: &dyn std::fmt::Display| corrupt(format!("bad {tag} value {text:?}: {e}"));
    let value = match ty {
        ValueType::Text => {
            let bytes = hex::decode(text).map_err(|e| bad(&e))?;
            Value::Text(String::from_utf8(bytes).map_err(|e| bad(&e))?)
        }
        ValueType::Integer => Value::Integer(text.parse().map_err(|e| bad(&e))?),
        ValueType::Float => {
            let f: f64 = text.parse().map_err(|e| bad(&e))?;
            Value::Float(Float::new(f).map_err(|e| bad(&e))?)
        }
        ValueType::Boolean => Value::Boolean(text.parse().map_err(|e| bad(&e))?),
        ValueType::Timestamp => Value::Timestamp(Timestamp::parse(text).map_err(|e| bad(&e))?),
        ValueType::Bytes => Value::Bytes(hex::decode(text).map_err(|e| bad(&e))?),
    };
    if encode_value(&value) != field {
        return Err(corrupt(format!("non-canonical value {field:?}")));
    }
    Ok(value)
}

pub fn encode_row(row: &PropertyRow) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        row.doc,
        row.slice.0,
        escape_field(&row.prop),
        encode_value(&row.value),
        row.dup
    )
}

/// One `META` line.
pub fn encode_meta(rec: &MetadataRecord) -> String {
    match rec {
        MetadataRecord::SchemaDef(s) => {
            let mut line = format!("SCHEMA\t{}", escape_field(&s.name));
            for (p, c) in &s.constraints {
                let _ = write!(line, "\t{}\t{}\t{}", escape_field(p), c.value_type, c.arity());
            }
            line
        }
        MetadataRecord::DocumentRecord { doc, kind } => format!("DOC\t{doc}\t{kind}"),
        MetadataRecord::Enforcement { doc, schema } => {
            format!("ENFORCE\t{doc}\t{}", escape_field(schema))
        }
        MetadataRecord::SliceAssignment { doc, prop, slice } => {
            format!("SLICE\t{doc}\t{}\t{}", escape_field(prop), slice.0)
        }
        MetadataRecord::Membership { collection, member } => {
            format!("MEMBER\t{collection}\t{member}")
        }
    }
}

pub fn encode_content(c: &ContentRef) -> String {
    let tokens: Vec<&str> = c.tokens.iter().map(String::as_str).collect();
    format!("LOB\t{}\t{}\t{}", c.doc, c.length, tokens.join(","))
}

pub fn encode(image: &StoreImage) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str("PROPS\n");
    for row in image.rows() {
        out.push_str(&encode_row(&row));
        out.push('\n');
    }
    out.push_str("META\n");
    for rec in image.metadata_records() {
        out.push_str(&encode_meta(&rec));
        out.push('\n');
    }
    out.push_str("CONTENT\n");
    for c in image.content.values() {
        out.push_str(&encode_content(c));
        out.push('\n');
    }
    let crc = crc32c::crc32c(out.as_bytes());
    let _ = writeln!(out, "END {crc}");
    out.into_bytes()
}

fn parse_doc(s: &str) -> Result<DocumentId> {
    s.parse().map_err(|_| corrupt(format!("bad document id {s:?}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    // Canonical decimal only: no sign, no leading zeros.
    if s.is_empty() || s.starts_with('+') || (s.len() > 1 && s.starts_with('0')) {
        return Err(corrupt(format!("bad {what} {s:?}")));
    }
    s.parse().map_err(|_| corrupt(format!("bad {what} {s:?}")))
}

fn decode_row(line: &str) -> Result<PropertyRow> {
    let f: Vec<&str> = line.split('\t').collect();
    let [doc, slice, prop, value, dup] = f[..] else {
        return Err(corrupt(format!("property row needs 5 fields: {line:?}")));
    };
    Ok(PropertyRow {
        doc: parse_doc(doc)?,
        slice: SliceId(parse_num(slice, "slice id")?),
        prop: unescape_field(prop)?,
        value: decode_value(value)?,
        dup: parse_num(dup, "dup ordinal")?,
    })
}

fn decode_meta(line: &str) -> Result<MetadataRecord> {
    let f: Vec<&str> = line.split('\t').collect();
    let rec = match (f[0], &f[1..]) {
        ("SCHEMA", [name, rest @ ..]) if rest.len() % 3 == 0 => {
            let mut schema = Schema::new(unescape_field(name)?);
            for c in rest.chunks(3) {
                let value_type =
                    c[1].parse().map_err(|_| corrupt(format!("bad type {:?}", c[1])))?;
                let (required, multiple) = Constraint::parse_arity(c[2])
                    .map_err(|_| corrupt(format!("bad arity {:?}", c[2])))?;
                let prop = unescape_field(c[0])?;
                let constraint = Constraint { value_type, required, multiple };
                if schema.constraints.insert(prop.clone(), constraint).is_some() {
                    return Err(corrupt(format!("schema repeats property {prop:?}")));
                }
            }
            MetadataRecord::SchemaDef(schema)
        }
        ("DOC", [doc, kind]) => MetadataRecord::DocumentRecord {
            doc: parse_doc(doc)?,
            kind: kind.parse().map_err(|_| corrupt(format!("bad kind {kind:?}")))?,
        },
        ("ENFORCE", [doc, schema]) => {
            MetadataRecord::Enforcement { doc: parse_doc(doc)?, schema: unescape_field(schema)? }
        }
        ("SLICE", [doc, prop, slice]) => MetadataRecord::SliceAssignment {
            doc: parse_doc(doc)?,
            prop: unescape_field(prop)?,
            slice: SliceId(parse_num(slice, "slice id")?),
        },
        ("MEMBER", [collection, member]) => MetadataRecord::Membership {
            collection: parse_doc(collection)?,
            member: parse_doc(member)?,
        },
        _ => return Err(corrupt(format!("bad metadata record {line:?}"))),
    };
    Ok(rec)
}

fn decode_content(line: &str) -> Result<ContentRef> {
    let f: Vec<&str> = line.split('\t').collect();
    let ["LOB", doc, length, tokens] = f[..] else {
        return Err(corrupt(format!("bad content record {line:?}")));
    };
    let tokens = if tokens.is_empty() {
        Default::default()
    } else {
        tokens.split(',').map(str::to_owned).collect()
    };
    Ok(ContentRef { doc: parse_doc(doc)?, length: parse_num(length, "content length")?, tokens })
}

/// Applies a decoded metadata record to an image under construction.
fn load_meta(image: &mut StoreImage, rec: MetadataRecord) -> Result<()> {
    fn doc_meta(image: &mut StoreImage, doc: DocumentId) -> Result<&mut DocMeta> {
        image
            .docs
            .get_mut(&doc)
            .ok_or_else(|| corrupt(format!("metadata for undeclared document {doc}")))
    }
    match rec {
        MetadataRecord::SchemaDef(s) => image.schemas.push(s),
        MetadataRecord::DocumentRecord { doc, kind } => match image.docs.entry(doc) {
            Entry::Occupied(_) => return Err(corrupt(format!("document {doc} declared twice"))),
            Entry::Vacant(v) => {
                v.insert(DocMeta::new(kind));
            }
        },
        MetadataRecord::Enforcement { doc, schema } => {
            let m = doc_meta(image, doc)?;
            if m.enforced.contains(&schema) {
                return Err(corrupt(format!("{schema:?} enforced twice on {doc}")));
            }
            m.enforced.push(schema);
        }
        MetadataRecord::SliceAssignment { doc, prop, slice } => {
            if doc_meta(image, doc)?.assignments.insert(prop, slice).is_some() {
                return Err(corrupt(format!("duplicate slice assignment on {doc}")));
            }
        }
        MetadataRecord::Membership { collection, member } => {
            doc_meta(image, collection)?.members.insert(member);
        }
    }
    Ok(())
}

/// Decodes and validates a checkpoint file.
pub fn decode(bytes: &[u8]) -> Result<StoreImage> {
    if bytes.is_empty() {
        return Err(corrupt("empty checkpoint file"));
    }
    let body_end = bytes
        .strip_suffix(b"\n")
        .ok_or_else(|| corrupt("checkpoint does not end with a newline"))?;
    let trailer_start = body_end.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let trailer = std::str::from_utf8(&body_end[trailer_start..])
        .map_err(|_| corrupt("trailer is not UTF-8"))?;
    let stored: u32 = trailer
        .strip_prefix("END ")
        .ok_or_else(|| corrupt("missing END trailer"))
        .and_then(|s| parse_num(s, "checksum"))?;
    let body = &bytes[..trailer_start];
    let actual = crc32c::crc32c(body);
    if actual != stored {
        return Err(corrupt(format!("checksum mismatch: stored {stored}, computed {actual}")));
    }
    let text = std::str::from_utf8(body).map_err(|_| corrupt("checkpoint is not UTF-8"))?;
    let mut lines = text.lines();
    let expect = |header: &str, lines: &mut std::str::Lines<'_>| -> Result<()> {
        match lines.next() {
            Some(l) if l == header => Ok(()),
            other => Err(corrupt(format!("expected {header:?}, found {other:?}"))),
        }
    };
    expect(MAGIC, &mut lines)?;
    expect("PROPS", &mut lines)?;

    let mut image = StoreImage::default();
    let mut rows = Vec::new();
    let mut section = "PROPS";
    for line in lines {
        match (section, line) {
            ("PROPS", "META") => section = "META",
            ("META", "CONTENT") => section = "CONTENT",
            ("PROPS", l) => rows.push(decode_row(l)?),
            ("META", l) => load_meta(&mut image, decode_meta(l)?)?,
            (_, l) => {
                let c = decode_content(l)?;
                if image.content.insert(c.doc, c).is_some() {
                    return Err(corrupt("duplicate content record"));
                }
            }
        }
    }
    if section != "CONTENT" {
        return Err(corrupt("missing section header"));
    }
    for row in rows {
        let (key, slice) = row.into_entry();
        if image.rows.insert(key, slice).is_some() {
            return Err(corrupt("duplicate property row"));
        }
    }
    image.validate()?;
    if encode(&image) != bytes {
        return Err(corrupt("checkpoint is not in canonical form"));
    }
    Ok(image)
}

impl PropertyRow {
    fn into_entry(self) -> (RowKey, SliceId) {
        (RowKey { doc: self.doc, prop: self.prop, value: self.value, dup: self.dup }, self.slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DocumentKind;
    use proptest::prelude::*;

    #[test]
    fn escaping_round_trips() {
        for s in ["plain", "a\tb", "line\nbreak", "back\\slash", "\\t literal"] {
            let e = escape_field(s);
            assert!(!e.contains('\t') && !e.contains('\n'));
            assert_eq!(unescape_field(&e).unwrap(), s);
        }
        assert!(unescape_field("bad\\x").is_err());
        assert!(unescape_field("trailing\\").is_err());
    }

    #[test]
    fn value_encodings() {
        let ts = Timestamp::parse("2001-05-01T00:00:00Z").unwrap();
        let cases = [
            (Value::text("hi"), "text:6869"),
            (Value::Integer(-42), "integer:-42"),
            (Value::float(1.0).unwrap(), "float:1.0"),
            (Value::float(0.1).unwrap(), "float:0.1"),
            (Value::Boolean(true), "boolean:true"),
            (Value::Timestamp(ts), "timestamp:2001-05-01T00:00:00.000Z"),
            (Value::Bytes(vec![0, 255]), "bytes:00ff"),
        ];
        for (v, enc) in cases {
            assert_eq!(encode_value(&v), enc);
            assert_eq!(decode_value(enc).unwrap(), v);
        }
        for bad in [
            "integer:+1",
            "integer:01",
            "bytes:FF",
            "float:1",
            "text:zz",
            "nope:1",
            "boolean:True",
            "x",
        ] {
            assert!(decode_value(bad).is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn empty_and_truncated_files_are_corrupt() {
        assert!(matches!(decode(b""), Err(Error::CorruptStore(_))));
        let mut image = StoreImage::default();
        image.docs.insert(DocumentId::from_u128(1), DocMeta::new(DocumentKind::Plain));
        let bytes = encode(&image);
        assert_eq!(decode(&bytes).unwrap(), image);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(decode(&flipped).is_err());
    }

    #[test]
    fn empty_image_layout() {
        let bytes = encode(&StoreImage::default());
        let text = String::from_utf8(bytes.clone()).unwrap();
        let crc = crc32c::crc32c(b"HARLAND-STORE v1\nPROPS\nMETA\nCONTENT\n");
        assert_eq!(text, format!("HARLAND-STORE v1\nPROPS\nMETA\nCONTENT\nEND {crc}\n"));
    }

    proptest! {
        #[test]
        fn value_encoding_is_bit_exact(v in crate::model::tests::any_value()) {
            let enc = encode_value(&v);
            prop_assert!(!enc.contains('\t') && !enc.contains('\n'));
            let back = decode_value(&enc).unwrap();
            prop_assert_eq!(&back, &v);
            if let (Value::Float(a), Value::Float(b)) = (&v, &back) {
                prop_assert_eq!(a.get().to_bits(), b.get().to_bits());
            }
        }

        #[test]
        fn arbitrary_text_fields_round_trip(s in any::<String>()) {
            let v = Value::Text(s.clone());
            prop_assert_eq!(decode_value(&encode_value(&v)).unwrap(), v);
            prop_assert_eq!(unescape_field(&escape_field(&s)).unwrap(), s);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }
    }
}
