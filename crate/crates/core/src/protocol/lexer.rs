//! Tokenizer for the protocol text format.

use super::{Diagnostic, DiagnosticKind, Position};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum TokenKind {
    Word(String),
    /// Integer literal with an optional alphabetic suffix (`20s`, `500ms`).
    /// `value` is `None` when the digits overflow `i64`.
    Number {
        value: Option<i64>,
        suffix: String,
    },
    Equals,
    LBrace,
    RBrace,
    Newline,
    Eof,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub kind: TokenKind,
    pub pos: Position,
}

impl TokenKind {
    pub fn describe(&self) -> String {
        match self {
            TokenKind::Word(w) => format!("'{w}'"),
            TokenKind::Number { value: Some(v), suffix } => format!("'{v}{suffix}'"),
            TokenKind::Number { value: None, .. } => "number".to_string(),
            TokenKind::Equals => "'='".to_string(),
            TokenKind::LBrace => "'{'".to_string(),
            TokenKind::RBrace => "'}'".to_string(),
            TokenKind::Newline => "end of line".to_string(),
            TokenKind::Eof => "end of input".to_string(),
        }
    }
}

pub(crate) fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

pub(crate) fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.'
}

/// True when `s` lexes as a single word token.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if is_ident_start(c)) && chars.all(is_ident_continue)
}

/// Splits `text` into tokens. Unrecognised characters are reported and skipped.
pub(crate) fn tokenize(text: &str, diags: &mut Vec<Diagnostic>) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1u32;
    let mut column = 1u32;

    while let Some(&c) = chars.peek() {
        let pos = Position { line, column };
        match c {
            '\n' | ';' => {
                chars.next();
                tokens.push(Token { kind: TokenKind::Newline, pos });
                if c == '\n' {
                    line += 1;
                    column = 1;
                } else {
                    column += 1;
                }
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    column += 1;
                }
            }
            c if c.is_whitespace() => {
                chars.next();
                column += 1;
            }
            '=' | '{' | '}' => {
                chars.next();
                column += 1;
                let kind = match c {
                    '=' => TokenKind::Equals,
                    '{' => TokenKind::LBrace,
                    _ => TokenKind::RBrace,
                };
                tokens.push(Token { kind, pos });
            }
            c if c.is_ascii_digit() || c == '-' => {
                let mut digits = String::new();
                if c == '-' {
                    digits.push('-');
                    chars.next();
                    column += 1;
                }
                while let Some(&d) = chars.peek() {
                    if !d.is_ascii_digit() {
                        break;
                    }
                    digits.push(d);
                    chars.next();
                    column += 1;
                }
                let mut suffix = String::new();
                while let Some(&s) = chars.peek() {
                    if !s.is_ascii_alphabetic() {
                        break;
                    }
                    suffix.push(s);
                    chars.next();
                    column += 1;
                }
                if digits == "-" {
                    diags.push(Diagnostic::at(
                        pos,
                        DiagnosticKind::Syntax { expected: vec!["digits".into()] },
                        "expected digits after '-'",
                    ));
                    continue;
                }
                let value = digits.parse::<i64>().ok();
                tokens.push(Token { kind: TokenKind::Number { value, suffix }, pos });
            }
            c if is_ident_start(c) => {
                let mut word = String::new();
                while let Some(&w) = chars.peek() {
                    if !is_ident_continue(w) {
                        break;
                    }
                    word.push(w);
                    chars.next();
                    column += 1;
                }
                tokens.push(Token { kind: TokenKind::Word(word), pos });
            }
            other => {
                chars.next();
                column += 1;
                diags.push(Diagnostic::at(
                    pos,
                    DiagnosticKind::Syntax { expected: Vec::new() },
                    format!("unexpected character '{other}'"),
                ));
            }
        }
    }
    tokens.push(Token { kind: TokenKind::Eof, pos: Position { line, column } });
    tokens
}
