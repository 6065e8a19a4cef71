//! Recursive-descent parser for the text query syntax.
//!
//! ```text
//! expr  := conj ('OR' conj)*
//! conj  := term ('AND' term)*
//! term  := 'NOT' term | '(' expr ')' | atom
//! atom  := schema:"name" | member-of:<id> | content:"token"
//!        | exists(name) | count(name) ('='|'!=') ('single'|'multiple')
//!        | name op literal
//! op    := '=' | '!=' | '<' | '<=' | '>' | '>='
//! ```
//!
//! Literals are typed by their spelling: `"quoted"` is Text, `x"00ff"` Bytes,
//! `12` Integer, `1.5` / `1e3` Float, `2001-06-01T00:00:00Z` Timestamp and
//! `true` / `false` Boolean. Names are bare identifiers or quoted strings.

use thiserror::Error;

use crate::model::{DocumentId, Float, Timestamp, Value};

use super::{Cardinality, CmpOp, Predicate, QueryExpr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at offset {position}: {message}")]
pub struct ParseError {
    /// Byte offset into the input.
    pub position: usize,
    pub message: String,
}

type PResult<T> = Result<T, ParseError>;

fn err<T>(position: usize, message: impl Into<String>) -> PResult<T> {
    Err(ParseError { position, message: message.into() })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Op(CmpOp),
    Str(String),
    Bytes(Vec<u8>),
    Int(i64),
    Float(Float),
    Ts(Timestamp),
    Ident(String),
    /// `schema:`, `member-of:` or `content:`.
    Prefix(&'static str),
    /// The document id following `member-of:`.
    RawId(String),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::End => "end of input".into(),
            Tok::Ident(s) => format!("{s:?}"),
            other => format!("{other:?}"),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

const PREFIXES: [&str; 3] = ["schema", "member-of", "content"];

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek2(&self) -> Option<char> {
        self.src[self.pos..].chars().nth(1)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.bump();
        }
        &self.src[start..self.pos]
    }

    fn tokens(mut self) -> PResult<Vec<(Tok, usize)>> {
        let mut out = Vec::new();
        loop {
            self.take_while(char::is_whitespace);
            let start = self.pos;
            let Some(c) = self.peek() else {
                out.push((Tok::End, start));
                return Ok(out);
            };
            let tok = match c {
                '(' => {
                    self.bump();
                    Tok::LParen
                }
                ')' => {
                    self.bump();
                    Tok::RParen
                }
                '=' => {
                    self.bump();
                    Tok::Op(CmpOp::Eq)
                }
                '!' => {
                    self.bump();
                    if self.bump() != Some('=') {
                        return err(start, "expected '!='");
                    }
                    Tok::Op(CmpOp::Ne)
                }
                '<' | '>' => {
                    self.bump();
                    let eq = self.peek() == Some('=');
                    if eq {
                        self.bump();
                    }
                    Tok::Op(match (c, eq) {
                        ('<', false) => CmpOp::Lt,
                        ('<', true) => CmpOp::Le,
                        ('>', false) => CmpOp::Gt,
                        _ => CmpOp::Ge,
                    })
                }
                '"' => Tok::Str(self.string()?),
                'x' if self.peek2() == Some('"') => {
                    self.bump();
                    let hex = self.string()?;
                    match hex::decode(&hex) {
                        Ok(b) if hex.bytes().all(|c| !c.is_ascii_uppercase()) => Tok::Bytes(b),
                        _ => return err(start, "bytes literal must be lowercase hex"),
                    }
                }
                c if c.is_ascii_digit()
                    || (c == '-' && self.peek2().is_some_and(|d| d.is_ascii_digit())) =>
                {
                    self.number()?
                }
                c if super::is_ident_start(c) => {
                    let word = self.take_while(super::is_ident_char);
                    if self.peek() == Some(':') {
                        let Some(p) = PREFIXES.iter().find(|p| **p == word) else {
                            return err(start, format!("unknown prefix {word:?}"));
                        };
                        self.bump();
                        out.push((Tok::Prefix(p), start));
                        if *p == "member-of" {
                            let id_start = self.pos;
                            let id = self.take_while(|c| c.is_ascii_alphanumeric() || c == '-');
                            out.push((Tok::RawId(id.to_owned()), id_start));
                        }
                        continue;
                    }
                    Tok::Ident(word.to_owned())
                }
                other => return err(start, format!("unexpected character {other:?}")),
            };
            out.push((tok, start));
        }
    }

    fn string(&mut self) -> PResult<String> {
        let start = self.pos;
        self.bump();
        let mut out = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return err(start, "unterminated string"),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    Some('u') => {
                        if self.bump() != Some('{') {
                            return err(at, "expected '{' after \\u");
                        }
                        let digits = self.take_while(|c| c.is_ascii_hexdigit());
                        if self.bump() != Some('}') {
                            return err(at, "unterminated \\u{...} escape");
                        }
                        let ch = u32::from_str_radix(digits, 16).ok().and_then(char::from_u32);
                        match ch {
                            Some(ch) => out.push(ch),
                            None => return err(at, "invalid unicode escape"),
                        }
                    }
                    _ => return err(at, "invalid escape"),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn number(&mut self) -> PResult<Tok> {
        let start = self.pos;
        let rest = &self.src[start..];
        let b = rest.as_bytes();
        let is_date = b.len() >= 5 && b[..4].iter().all(u8::is_ascii_digit) && b[4] == b'-';
        if is_date {
            let text = self.take_while(|c| c.is_ascii_digit() || "-:.+TZ".contains(c));
            return Timestamp::parse(text).map(Tok::Ts).or_else(|e| err(start, e.to_string()));
        }
        if self.peek() == Some('-') {
            self.bump();
        }
        self.take_while(|c| c.is_ascii_digit());
        let mut float = false;
        if self.peek() == Some('.') && self.peek2().is_some_and(|c| c.is_ascii_digit()) {
            float = true;
            self.bump();
            self.take_while(|c| c.is_ascii_digit());
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let save = self.pos;
            self.bump();
            if matches!(self.peek(), Some('+' | '-')) {
                self.bump();
            }
            if self.take_while(|c| c.is_ascii_digit()).is_empty() {
                self.pos = save;
            } else {
                float = true;
            }
        }
        if self.peek().is_some_and(super::is_ident_char) {
            return err(self.pos, "malformed number");
        }
        let text = &self.src[start..self.pos];
        if float {
            let f: f64 = text.parse().or_else(|_| err(start, "malformed float"))?;
            Float::new(f).map(Tok::Float).or_else(|_| err(start, "float out of range"))
        } else {
            text.parse().map(Tok::Int).or_else(|_| err(start, "integer out of range"))
        }
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> usize {
        self.toks[self.at].1
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if t != Tok::End {
            self.at += 1;
        }
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(w) if w == kw)
    }

    fn expect(&mut self, want: Tok, what: &str) -> PResult<()> {
        let pos = self.pos();
        let got = self.next();
        if got == want {
            Ok(())
        } else {
            err(pos, format!("expected {what}, found {}", got.describe()))
        }
    }

    fn expr(&mut self) -> PResult<QueryExpr> {
        let mut items = vec![self.conj()?];
        while self.is_keyword("OR") {
            self.next();
            items.push(self.conj()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { QueryExpr::Or(items) })
    }

    fn conj(&mut self) -> PResult<QueryExpr> {
        let mut items = vec![self.term()?];
        while self.is_keyword("AND") {
            self.next();
            items.push(self.term()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { QueryExpr::And(items) })
    }

    fn term(&mut self) -> PResult<QueryExpr> {
        if self.is_keyword("NOT") {
            self.next();
            return Ok(QueryExpr::not(self.term()?));
        }
        if *self.peek() == Tok::LParen {
            self.next();
            let e = self.expr()?;
            self.expect(Tok::RParen, "')'")?;
            return Ok(e);
        }
        self.atom()
    }

    fn name(&mut self) -> PResult<String> {
        let pos = self.pos();
        match self.next() {
            Tok::Ident(w) if !super::RESERVED.contains(&w.as_str()) => Ok(w),
            Tok::Str(s) if !s.is_empty() => Ok(s),
            other => err(pos, format!("expected a property name, found {}", other.describe())),
        }
    }

    fn quoted(&mut self, what: &str) -> PResult<String> {
        let pos = self.pos();
        match self.next() {
            Tok::Str(s) if !s.is_empty() => Ok(s),
            other => err(pos, format!("expected a quoted {what}, found {}", other.describe())),
        }
    }

    fn literal(&mut self) -> PResult<Value> {
        let pos = self.pos();
        Ok(match self.next() {
            Tok::Str(s) => Value::Text(s),
            Tok::Bytes(b) => Value::Bytes(b),
            Tok::Int(i) => Value::Integer(i),
            Tok::Float(f) => Value::Float(f),
            Tok::Ts(t) => Value::Timestamp(t),
            Tok::Ident(w) if w == "true" => Value::Boolean(true),
            Tok::Ident(w) if w == "false" => Value::Boolean(false),
            other => return err(pos, format!("expected a literal, found {}", other.describe())),
        })
    }

    fn atom(&mut self) -> PResult<QueryExpr> {
        let pos = self.pos();
        let followed_by_paren = matches!(self.toks.get(self.at + 1), Some((Tok::LParen, _)));
        match self.peek().clone() {
            Tok::Prefix("schema") => {
                self.next();
                Ok(QueryExpr::has_schema(self.quoted("schema name")?))
            }
            Tok::Prefix("content") => {
                self.next();
                Ok(QueryExpr::content_contains(&self.quoted("token")?))
            }
            Tok::Prefix(_) => {
                self.next();
                let id_pos = self.pos();
                let Tok::RawId(raw) = self.next() else {
                    unreachable!("lexer emits an id after member-of:")
                };
                let id: DocumentId =
                    raw.parse().or_else(|_| err(id_pos, format!("invalid document id {raw:?}")))?;
                Ok(QueryExpr::member_of(id))
            }
            Tok::Ident(w) if w == "exists" && followed_by_paren => {
                self.next();
                self.next();
                let name = self.name()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(QueryExpr::exists(name))
            }
            Tok::Ident(w) if w == "count" && followed_by_paren => {
                self.next();
                self.next();
                let name = self.name()?;
                self.expect(Tok::RParen, "')'")?;
                let op_pos = self.pos();
                let negate = match self.next() {
                    Tok::Op(CmpOp::Eq) => false,
                    Tok::Op(CmpOp::Ne) => true,
                    other => {
                        return err(
                            op_pos,
                            format!("expected '=' or '!=', found {}", other.describe()),
                        )
                    }
                };
                let c_pos = self.pos();
                let c = match self.next() {
                    Tok::Ident(w) if w == "single" => Cardinality::Single,
                    Tok::Ident(w) if w == "multiple" => Cardinality::Multiple,
                    other => {
                        return err(
                            c_pos,
                            format!("expected 'single' or 'multiple', found {}", other.describe()),
                        )
                    }
                };
                let e = QueryExpr::cardinality(name, c);
                Ok(if negate { QueryExpr::not(e) } else { e })
            }
            Tok::Ident(_) | Tok::Str(_) => {
                let name = self.name()?;
                let op_pos = self.pos();
                let Tok::Op(op) = self.next() else {
                    return err(op_pos, "expected a comparison operator");
                };
                let value = self.literal()?;
                Ok(QueryExpr::Pred(Predicate::Cmp { prop: name, op, value }))
            }
            other => err(pos, format!("expected a predicate, found {}", other.describe())),
        }
    }
}

/// Parses a query expression.
pub fn parse(text: &str) -> Result<QueryExpr, ParseError> {
    let toks = Lexer { src: text, pos: 0 }.tokens()?;
    let mut p = Parser { toks, at: 0 };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return err(p.pos(), format!("unexpected {}", p.peek().describe()));
    }
    Ok(e)
}

/// Parses a single typed literal, e.g. a CLI property value argument.
pub fn parse_literal(text: &str) -> Result<Value, ParseError> {
    let toks = Lexer { src: text, pos: 0 }.tokens()?;
    let mut p = Parser { toks, at: 0 };
    let v = p.literal()?;
    if *p.peek() != Tok::End {
        return err(p.pos(), format!("unexpected {}", p.peek().describe()));
    }
    Ok(v)
}
