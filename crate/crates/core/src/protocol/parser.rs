//! Recursive-descent parser with line-level error recovery.
//!
//! Every problem is collected; parsing never stops at the first one.

use std::collections::HashMap;

use super::lexer::{tokenize, Token, TokenKind};
use super::{
    Block, Diagnostic, DiagnosticKind, Diagnostics, Item, MarkerCode, Position, ProtocolSpec, MAX_REPEAT_DEPTH,
};

/// Parses and validates protocol source text.
pub fn parse_protocol(text: &str) -> Result<ProtocolSpec, Diagnostics> {
    let mut diags = Vec::new();
    let tokens = tokenize(text, &mut diags);
    let mut parser = Parser { tokens, pos: 0, diags, markers: HashMap::new(), codes: HashMap::new() };
    let spec = parser.file();
    match spec {
        Some(spec) if parser.diags.is_empty() => Ok(spec),
        _ => {
            let mut diags = parser.diags;
            diags.sort_by_key(|d| d.position);
            Err(Diagnostics(diags))
        }
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    diags: Vec<Diagnostic>,
    /// marker name -> declaration position
    markers: HashMap<String, Position>,
    /// marker code -> declaring marker name
    codes: HashMap<u8, String>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if tok.kind != TokenKind::Eof {
            self.pos += 1;
        }
        tok
    }

    fn at_word(&self, word: &str) -> bool {
        matches!(&self.peek().kind, TokenKind::Word(w) if w == word)
    }

    fn skip_newlines(&mut self) {
        while self.peek().kind == TokenKind::Newline {
            self.pos += 1;
        }
    }

    fn syntax_error(&mut self, expected: &[&str]) {
        let tok = self.peek().clone();
        let list = expected.join(", ");
        self.diags.push(Diagnostic::at(
            tok.pos,
            DiagnosticKind::Syntax { expected: expected.iter().map(|s| s.to_string()).collect() },
            format!("expected {list}, found {}", tok.kind.describe()),
        ));
    }

    /// Skips to the end of the current line, stopping before a `}` so that
    /// brace nesting stays balanced.
    fn recover(&mut self) {
        loop {
            match self.peek().kind {
                TokenKind::Eof | TokenKind::RBrace => return,
                TokenKind::Newline => {
                    self.pos += 1;
                    return;
                }
                _ => self.pos += 1,
            }
        }
    }

    fn word(&mut self, what: &str) -> Option<(String, Position)> {
        match &self.peek().kind {
            TokenKind::Word(w) => {
                let w = w.clone();
                let pos = self.bump().pos;
                Some((w, pos))
            }
            _ => {
                self.syntax_error(&[what]);
                None
            }
        }
    }

    /// Statement terminator: newline or end of input (consumed), or a `}`
    /// closing the enclosing group (left in place).
    fn end_of_statement(&mut self) {
        match self.peek().kind {
            TokenKind::Newline => self.pos += 1,
            TokenKind::Eof | TokenKind::RBrace => {}
            _ => {
                self.syntax_error(&["end of line"]);
                self.recover();
            }
        }
    }

    fn file(&mut self) -> Option<ProtocolSpec> {
        self.skip_newlines();
        if self.peek().kind == TokenKind::Eof {
            let pos = self.peek().pos;
            self.diags.push(Diagnostic::at(pos, DiagnosticKind::NoProtocol, "no protocol"));
            return None;
        }
        let name = if self.at_word("protocol") {
            self.bump();
            match self.word("protocol name") {
                Some((name, _)) => {
                    self.end_of_statement();
                    name
                }
                None => {
                    self.recover();
                    String::new()
                }
            }
        } else {
            self.syntax_error(&["'protocol'"]);
            self.recover();
            String::new()
        };

        let mut markers = Vec::new();
        loop {
            self.skip_newlines();
            if !self.at_word("marker") {
                break;
            }
            if let Some(m) = self.marker_decl() {
                markers.push(m);
            }
        }
        let items = self.items(0, false);
        Some(ProtocolSpec { name, markers, items })
    }

    fn marker_decl(&mut self) -> Option<MarkerCode> {
        let start = self.bump().pos;
        let Some((name, name_pos)) = self.word("marker name") else {
            self.recover();
            return None;
        };
        if self.peek().kind != TokenKind::Equals {
            self.syntax_error(&["'='"]);
            self.recover();
            return None;
        }
        self.bump();
        let tok = self.peek().clone();
        let value = match &tok.kind {
            TokenKind::Number { value, suffix } if suffix.is_empty() => *value,
            _ => {
                self.syntax_error(&["integer code"]);
                self.recover();
                return None;
            }
        };
        self.bump();
        self.end_of_statement();

        let code = match value {
            Some(v @ 1..=255) => v as u8,
            _ => {
                self.diags.push(Diagnostic::at(
                    tok.pos,
                    DiagnosticKind::CodeOutOfRange,
                    format!("marker '{name}': code out of range [1,255]"),
                ));
                return None;
            }
        };
        let mut ok = true;
        if let Some(first) = self.markers.get(&name) {
            self.diags.push(Diagnostic::at(
                name_pos,
                DiagnosticKind::DuplicateMarkerName,
                format!("duplicate marker name '{name}' (first declared at line {})", first.line),
            ));
            ok = false;
        }
        if let Some(owner) = self.codes.get(&code) {
            self.diags.push(Diagnostic::at(
                tok.pos,
                DiagnosticKind::DuplicateMarkerCode,
                format!("duplicate marker code {code} (already used by '{owner}')"),
            ));
            ok = false;
        }
        if !ok {
            return None;
        }
        self.markers.insert(name.clone(), start);
        self.codes.insert(code, name.clone());
        Some(MarkerCode { name, code })
    }

    fn items(&mut self, depth: usize, in_group: bool) -> Vec<Item> {
        let mut items = Vec::new();
        loop {
            self.skip_newlines();
            let tok = self.peek().clone();
            match &tok.kind {
                TokenKind::Eof => {
                    if in_group {
                        self.syntax_error(&["'}'"]);
                    }
                    return items;
                }
                TokenKind::RBrace => {
                    self.bump();
                    if in_group {
                        return items;
                    }
                    self.diags.push(Diagnostic::at(
                        tok.pos,
                        DiagnosticKind::Syntax { expected: vec!["'block'".into(), "'repeat'".into()] },
                        "unmatched '}'",
                    ));
                }
                TokenKind::Word(w) if w == "block" => {
                    if let Some(b) = self.block() {
                        items.push(Item::Block(b));
                    }
                }
                TokenKind::Word(w) if w == "repeat" => {
                    if let Some(r) = self.repeat(depth) {
                        items.push(r);
                    }
                }
                TokenKind::Word(w) if w == "marker" => {
                    self.diags.push(Diagnostic::at(
                        tok.pos,
                        DiagnosticKind::Syntax { expected: vec!["'block'".into(), "'repeat'".into()] },
                        "marker declarations must precede blocks",
                    ));
                    self.recover();
                }
                _ => {
                    self.syntax_error(&["'block'", "'repeat'"]);
                    self.bump();
                    self.recover();
                }
            }
        }
    }

    fn repeat(&mut self, depth: usize) -> Option<Item> {
        let start = self.bump().pos;
        let tok = self.peek().clone();
        let count = match &tok.kind {
            TokenKind::Number { value, suffix } if suffix.is_empty() => *value,
            _ => {
                self.syntax_error(&["repeat count"]);
                self.recover();
                return None;
            }
        };
        self.bump();
        if self.peek().kind != TokenKind::LBrace {
            self.syntax_error(&["'{'"]);
            self.recover();
            return None;
        }
        self.bump();
        if depth + 1 > MAX_REPEAT_DEPTH {
            self.diags.push(Diagnostic::at(
                start,
                DiagnosticKind::NestingTooDeep,
                format!("repeat nesting deeper than {MAX_REPEAT_DEPTH}"),
            ));
        }
        let items = self.items(depth + 1, true);
        self.end_of_statement();
        match count {
            Some(c @ 1..) if c <= i64::from(u32::MAX) => Some(Item::Repeat { count: c as u32, items }),
            Some(c) if c > 0 => {
                self.diags.push(Diagnostic::at(
                    tok.pos,
                    DiagnosticKind::Syntax { expected: vec!["smaller repeat count".into()] },
                    "repeat count too large",
                ));
                None
            }
            _ => {
                self.diags.push(Diagnostic::at(
                    tok.pos,
                    DiagnosticKind::NonPositiveRepeat,
                    "repeat count must be positive",
                ));
                None
            }
        }
    }

    fn block(&mut self) -> Option<Block> {
        self.bump();
        let Some((label, _)) = self.word("block label") else {
            self.recover();
            return None;
        };
        let Some((onset, onset_pos)) = self.word("onset marker name") else {
            self.recover();
            return None;
        };
        let dur_tok = self.peek().clone();
        let duration = match &dur_tok.kind {
            TokenKind::Number { value, suffix } => match unit_ms(suffix) {
                Some(unit) => value.and_then(|v| if v > 0 { (v as u64).checked_mul(unit) } else { Some(0) }),
                None => {
                    self.diags.push(Diagnostic::at(
                        dur_tok.pos,
                        DiagnosticKind::Syntax { expected: vec!["'ms'".into(), "'s'".into(), "'min'".into()] },
                        format!("duration {} needs a unit (ms, s or min)", dur_tok.kind.describe()),
                    ));
                    self.recover();
                    return None;
                }
            },
            _ => {
                self.syntax_error(&["duration"]);
                self.recover();
                return None;
            }
        };
        self.bump();
        let mut offset = None;
        if self.at_word("offset") {
            self.bump();
            match self.word("offset marker name") {
                Some(o) => offset = Some(o),
                None => {
                    self.recover();
                    return None;
                }
            }
        }
        self.end_of_statement();

        let mut ok = true;
        match duration {
            Some(0) => {
                self.diags.push(Diagnostic::at(
                    dur_tok.pos,
                    DiagnosticKind::NonPositiveDuration,
                    format!("block '{label}': duration must be positive"),
                ));
                ok = false;
            }
            None => {
                self.diags.push(Diagnostic::at(
                    dur_tok.pos,
                    DiagnosticKind::Syntax { expected: vec!["smaller duration".into()] },
                    format!("block '{label}': duration too large"),
                ));
                ok = false;
            }
            Some(_) => {}
        }
        for (name, pos) in std::iter::once((&onset, onset_pos)).chain(offset.as_ref().map(|(n, p)| (n, *p))) {
            if !self.markers.contains_key(name) {
                self.diags.push(Diagnostic::at(
                    pos,
                    DiagnosticKind::UnknownMarker,
                    format!("block '{label}': unknown marker '{name}'"),
                ));
                ok = false;
            }
        }
        if !ok {
            return None;
        }
        let mut block = Block::new(label, onset, duration.unwrap_or_default());
        block.offset_marker = offset.map(|(n, _)| n);
        Some(block)
    }
}

fn unit_ms(suffix: &str) -> Option<u64> {
    match suffix {
        "ms" => Some(1),
        "s" => Some(1_000),
        "min" => Some(60_000),
        _ => None,
    }
}
