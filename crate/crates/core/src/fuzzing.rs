//! Checks shared by the fuzz targets and the corpus replay test. Each one
//! accepts arbitrary bytes and panics only when an invariant breaks.

use crate::query::{parse, parse_literal};
use crate::store::format::{decode, decode_value, encode, encode_value};

pub fn parse_query(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(q) = parse(text) else { return };
    let shown = q.to_string();
    let again = parse(&shown).unwrap_or_else(|e| panic!("{shown:?} does not parse: {e}"));
    assert_eq!(again, q, "round trip through {shown:?}");
}

pub fn parse_literal_text(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(v) = parse_literal(text) else { return };
    let shown = v.to_string();
    assert_eq!(parse_literal(&shown).ok(), Some(v), "round trip through {shown:?}");
}

pub fn decode_value_field(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(v) = decode_value(text) else { return };
    assert_eq!(encode_value(&v), text);
}

pub fn decode_checkpoint(data: &[u8]) {
    let Ok(image) = decode(data) else { return };
    let bytes = encode(&image);
    assert_eq!(bytes, data, "accepted a non-canonical checkpoint");
    assert_eq!(decode(&bytes).expect("re-decodes"), image);
}
