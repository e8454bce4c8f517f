//! Disassembly listing parser.
//!
//! Two listing styles are understood:
//!
//! * IDA-style listings as shipped with the Microsoft malware challenge corpus,
//!   where every line starts with a section-prefixed address
//!   (`.text:00401000 56    push    esi`);
//! * `objdump -d` output (`  401000:\t55\tpush   %ebp`).
//!
//! Only instruction mnemonics survive. Operands, labels, comments, data
//! definitions and assembler directives are dropped. Mnemonics keep their
//! dialect spelling, so AT&T size suffixes (`movl`, `cmpb`) are not folded
//! into their Intel forms.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDialect {
    KaggleAsm,
    Objdump,
}

impl fmt::Display for SourceDialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceDialect::KaggleAsm => f.write_str("kaggle_asm"),
            SourceDialect::Objdump => f.write_str("objdump"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error(
        "unrecognized listing dialect ({kaggle} IDA-style and {objdump} objdump-style lines out of {nonempty} non-empty)"
    )]
    UnrecognizedDialect {
        kaggle: usize,
        objdump: usize,
        nonempty: usize,
    },
}

/// Ordered opcode mnemonics extracted from one listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpcodeSequence {
    pub file_id: String,
    pub opcodes: Vec<String>,
    /// Source lines scanned.
    pub line_count: usize,
    /// Lines that yielded no opcode.
    pub skipped_count: usize,
}

/// Instruction prefixes emitted as tokens of their own, followed by the
/// mnemonic they modify.
const PREFIXES: &[&str] = &["lock", "rep", "repe", "repne", "repz", "repnz"];

/// Data definitions and assembler directives; a line whose first or second
/// field is one of these carries no instruction.
const DIRECTIVES: &[&str] = &[
    "db",
    "dd",
    "dw",
    "dq",
    "dt",
    "df",
    "align",
    "extrn",
    "public",
    "assume",
    "proc",
    "endp",
    "segment",
    "ends",
    "end",
    "org",
    "equ",
    "struc",
    "label",
    "include",
    "includelib",
];

/// Number of leading lines inspected by [`detect_dialect_in`].
pub const DETECT_WINDOW: usize = 64;

/// Picks the dialect that a strict majority of the non-empty lines follow.
pub fn detect_dialect<S: AsRef<str>>(first_lines: &[S]) -> Result<SourceDialect, IngestError> {
    let mut nonempty = 0;
    let mut kaggle = 0;
    let mut objdump = 0;
    for line in first_lines {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        nonempty += 1;
        if is_kaggle_line(line) {
            kaggle += 1;
        } else if is_objdump_line(line) {
            objdump += 1;
        }
    }
    if nonempty > 0 && kaggle * 2 > nonempty {
        Ok(SourceDialect::KaggleAsm)
    } else if nonempty > 0 && objdump * 2 > nonempty {
        Ok(SourceDialect::Objdump)
    } else {
        Err(IngestError::UnrecognizedDialect {
            kaggle,
            objdump,
            nonempty,
        })
    }
}

/// Runs [`detect_dialect`] over the first [`DETECT_WINDOW`] non-empty lines of `content`.
pub fn detect_dialect_in(content: &str) -> Result<SourceDialect, IngestError> {
    let head: Vec<&str> = content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .take(DETECT_WINDOW)
        .collect();
    detect_dialect(&head)
}

/// Tokens produced by one listing line: nothing, a mnemonic, or prefix
/// tokens followed by the mnemonic they modify.
pub fn tokenize_line(line: &str, dialect: SourceDialect) -> Vec<String> {
    let mut out = Vec::new();
    for_each_token(line, dialect, |t| out.push(t.into_owned()));
    out
}

/// Parses a whole listing. Never fails: lines that cannot be understood are
/// counted in `skipped_count`.
pub fn parse_file(content: &str, file_id: &str, dialect: SourceDialect) -> OpcodeSequence {
    let mut opcodes = Vec::new();
    let mut line_count = 0;
    let mut skipped_count = 0;
    for line in content.lines() {
        line_count += 1;
        let before = opcodes.len();
        for_each_token(line, dialect, |t| opcodes.push(t.into_owned()));
        if opcodes.len() == before {
            skipped_count += 1;
        }
    }
    OpcodeSequence {
        file_id: file_id.to_string(),
        opcodes,
        line_count,
        skipped_count,
    }
}

/// Per-opcode totals of one listing, as produced by [`count_file`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpcodeTally {
    pub counts: BTreeMap<String, u64>,
    pub line_count: usize,
    pub skipped_count: usize,
}

/// Same tokens as [`parse_file`], tallied per opcode without keeping the
/// sequence.
pub fn count_file(content: &str, dialect: SourceDialect) -> OpcodeTally {
    let mut tally: HashMap<Cow<'_, str>, u64> = HashMap::new();
    let mut line_count = 0;
    let mut skipped_count = 0;
    for line in content.lines() {
        line_count += 1;
        let mut emitted = false;
        for_each_token(line, dialect, |t| {
            emitted = true;
            *tally.entry(t).or_insert(0) += 1;
        });
        if !emitted {
            skipped_count += 1;
        }
    }
    OpcodeTally {
        counts: tally.into_iter().map(|(k, v)| (k.into_owned(), v)).collect(),
        line_count,
        skipped_count,
    }
}

/// Like [`parse_file`] over raw bytes; invalid UTF-8 is replaced, never fatal.
pub fn parse_bytes(content: &[u8], file_id: &str, dialect: SourceDialect) -> OpcodeSequence {
    parse_file(&String::from_utf8_lossy(content), file_id, dialect)
}

/// True for tokens of the form `[a-z][a-z0-9._]*`.
pub fn is_mnemonic(token: &str) -> bool {
    let mut bytes = token.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_lowercase() => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'.' || b == b'_')
}

fn for_each_token<'a, F>(line: &'a str, dialect: SourceDialect, emit: F)
where
    F: FnMut(Cow<'a, str>),
{
    let body = match dialect {
        SourceDialect::KaggleAsm => kaggle_body(line),
        SourceDialect::Objdump => objdump_body(line),
    };
    if let Some(body) = body {
        mnemonics(body, emit);
    }
}

/// Extracts prefix tokens and the mnemonic from an instruction text with the
/// address and raw bytes already stripped.
fn mnemonics<'a, F>(body: &'a str, mut emit: F)
where
    F: FnMut(Cow<'a, str>),
{
    let mut fields = body.split_ascii_whitespace().peekable();
    let mut first = match fields.next() {
        Some(f) => f,
        None => return,
    };
    if first.starts_with(';') || first.starts_with('#') {
        return;
    }
    if first.ends_with(':') {
        // label definition, possibly followed by an instruction
        first = match fields.next() {
            Some(f) if !f.starts_with(';') => f,
            _ => return,
        };
    }
    if is_directive(first) {
        return;
    }
    if let Some(second) = fields.peek() {
        if is_directive(second) || second.starts_with('=') || first.ends_with('=') {
            return;
        }
    }
    let mut current = Some(first);
    while let Some(field) = current {
        if field.starts_with(';') || field.starts_with('#') {
            return;
        }
        let token = lowercase(field);
        if !is_mnemonic(&token) {
            return;
        }
        let is_prefix = PREFIXES.contains(&token.as_ref());
        emit(token);
        if !is_prefix {
            return;
        }
        current = fields.next();
    }
}

fn is_directive(field: &str) -> bool {
    DIRECTIVES.iter().any(|d| d.eq_ignore_ascii_case(field))
}

fn lowercase(field: &str) -> Cow<'_, str> {
    if field.bytes().any(|b| b.is_ascii_uppercase()) {
        Cow::Owned(field.to_ascii_lowercase())
    } else {
        Cow::Borrowed(field)
    }
}

fn is_section_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'$'
}

/// Splits `.text:00401000 rest` into `rest`; `None` when the line lacks the
/// section-prefixed address.
fn kaggle_address_rest(line: &str) -> Option<&str> {
    let s = line.trim_start();
    let colon = s.find(':')?;
    let section = &s.as_bytes()[..colon];
    if section.is_empty() || section[0].is_ascii_digit() || !section.iter().all(|&b| is_section_char(b)) {
        return None;
    }
    let rest = &s[colon + 1..];
    let hex_len = rest.bytes().take_while(u8::is_ascii_hexdigit).count();
    if hex_len < 4 {
        return None;
    }
    let rest = &rest[hex_len..];
    match rest.bytes().next() {
        None => Some(rest),
        Some(b) if b.is_ascii_whitespace() => Some(rest),
        _ => None,
    }
}

fn is_kaggle_line(line: &str) -> bool {
    kaggle_address_rest(line).is_some()
}

fn is_upper_hex_byte(field: &str) -> bool {
    let f = field.strip_suffix('+').unwrap_or(field);
    f.len() == 2 && f.bytes().all(|b| b.is_ascii_digit() || (b'A'..=b'F').contains(&b))
}

fn kaggle_body(line: &str) -> Option<&str> {
    let mut rest = kaggle_address_rest(line)?;
    // raw instruction bytes are upper-case hex pairs, mnemonics are lower-case
    loop {
        let trimmed = rest.trim_start();
        let end = trimmed.find(|c: char| c.is_ascii_whitespace()).unwrap_or(trimmed.len());
        let field = &trimmed[..end];
        if field.is_empty() || !is_upper_hex_byte(field) {
            return Some(trimmed);
        }
        rest = &trimmed[end..];
    }
}

/// Splits `  401000:\t...` into the text after the colon.
fn objdump_address_rest(line: &str) -> Option<&str> {
    let s = line.trim_start();
    let hex_len = s.bytes().take_while(u8::is_ascii_hexdigit).count();
    if hex_len == 0 || s.as_bytes().get(hex_len) != Some(&b':') {
        return None;
    }
    Some(&s[hex_len + 1..])
}

fn is_lower_hex_byte(field: &str) -> bool {
    field.len() == 2 && field.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn is_byte_run(text: &str) -> bool {
    let mut any = false;
    for f in text.split_ascii_whitespace() {
        if !is_lower_hex_byte(f) {
            return false;
        }
        any = true;
    }
    any
}

fn is_objdump_line(line: &str) -> bool {
    match objdump_address_rest(line) {
        Some(rest) => {
            let rest = rest.trim_start();
            let first = rest.split_ascii_whitespace().next().unwrap_or("");
            is_lower_hex_byte(first)
        }
        None => false,
    }
}

fn objdump_body(line: &str) -> Option<&str> {
    let rest = objdump_address_rest(line)?;
    if rest.contains('\t') {
        let mut parts = rest.split('\t').filter(|p| !p.trim().is_empty());
        let first = parts.next()?;
        if is_byte_run(first) {
            // a bytes-only continuation line has no instruction column
            return parts.next();
        }
        return Some(first);
    }
    // space-separated layout: skip the leading raw bytes
    let mut rest = rest;
    loop {
        let trimmed = rest.trim_start();
        let end = trimmed.find(|c: char| c.is_ascii_whitespace()).unwrap_or(trimmed.len());
        let field = &trimmed[..end];
        if field.is_empty() || !is_lower_hex_byte(field) {
            return Some(trimmed);
        }
        rest = &trimmed[end..];
    }
}
