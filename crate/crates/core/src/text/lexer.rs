//! SQL lexer producing fixed-length normalized token sequences.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length every [`TokenSequence`] is padded or truncated to.
pub const SEQ_LEN: usize = 100;
pub const PAD_TEXT: &str = "<pad>";
pub const MAX_INPUT_BYTES: usize = 1 << 20;

static KEYWORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();

pub fn keyword_table() -> &'static HashSet<&'static str> {
    KEYWORDS.get_or_init(|| {
        include_str!("keywords.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

pub fn is_keyword(lower: &str) -> bool {
    keyword_table().contains(lower)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Keyword,
    Identifier,
    Number,
    StringLiteral,
    Operator,
    Punctuation,
    Comment,
    Unknown,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
}

impl Token {
    pub fn new(kind: TokenKind, text: impl Into<String>) -> Self {
        Token {
            kind,
            text: text.into(),
        }
    }

    pub fn pad() -> Self {
        Token::new(TokenKind::Pad, PAD_TEXT)
    }

    pub fn is_pad(&self) -> bool {
        self.kind == TokenKind::Pad
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

/// Exactly [`SEQ_LEN`] tokens; the tail beyond the lexed content is PAD.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    original_length: usize,
}

impl TokenSequence {
    /// Pads or truncates (keeping the head) to [`SEQ_LEN`].
    pub fn from_tokens(mut tokens: Vec<Token>) -> Self {
        let original_length = tokens.len();
        tokens.truncate(SEQ_LEN);
        tokens.resize(SEQ_LEN, Token::pad());
        TokenSequence {
            tokens,
            original_length,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Number of tokens the lexer produced before padding/truncation.
    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// The non-PAD prefix.
    pub fn content(&self) -> &[Token] {
        &self.tokens[..self.original_length.min(SEQ_LEN)]
    }

    pub fn texts(&self) -> Vec<&str> {
        self.content().iter().map(|t| t.text.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeOptions {
    /// Percent-decode the input once before lexing.
    pub url_decode: bool,
}

pub fn tokenize(raw: &str, options: TokenizeOptions) -> Result<TokenSequence> {
    if raw.len() > MAX_INPUT_BYTES {
        return Err(Error::invalid(format!(
            "query of {} bytes exceeds the {MAX_INPUT_BYTES}-byte limit",
            raw.len()
        )));
    }
    let tokens = if options.url_decode {
        let decoded = percent_encoding::percent_decode_str(raw).decode_utf8_lossy();
        lex(&decoded)
    } else {
        lex(raw)
    };
    Ok(TokenSequence::from_tokens(tokens))
}

/// Rebuilds text that lexes back to the same tokens: tokens are joined
/// with a space, and a newline ends every line comment.
pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens.iter().filter(|t| !t.is_pad()) {
        if !out.is_empty() && !out.ends_with('\n') {
            out.push(' ');
        }
        out.push_str(&t.text);
        if t.kind == TokenKind::Comment && !t.text.starts_with("/*") {
            out.push('\n');
        }
    }
    out
}

const OPERATORS: &[&str] = &[
    "<=>", "<=", ">=", "<>", "!=", "||", "&&", "::", ":=", "<<", ">>", "->", "=", "<", ">", "+", "-", "*", "/", "%",
    "!", "~", "^", "&", "|",
];
const PUNCTUATION: &[char] = &['(', ')', ',', ';', '.', '[', ']', '{', '}', ':', '?'];

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Lexes without padding.
pub fn lex(input: &str) -> Vec<Token> {
    let chars: Vec<char> = input.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let n = chars.len();
    let rest = |from: usize| -> String { chars[from..].iter().collect() };

    while i < n {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        // line comments
        if (c == '-' && next == Some('-')) || c == '#' {
            let end = chars[i..].iter().position(|&ch| ch == '\n').map_or(n, |p| i + p);
            let text: String = chars[i..end].iter().collect();
            out.push(Token::new(TokenKind::Comment, text.trim_end()));
            i = end;
            continue;
        }
        if c == '/' && next == Some('*') {
            match find_seq(&chars, i + 2, &['*', '/']) {
                Some(close) => {
                    let text: String = chars[i..close + 2].iter().collect();
                    out.push(Token::new(TokenKind::Comment, text));
                    i = close + 2;
                }
                None => {
                    out.push(Token::new(TokenKind::Unknown, rest(i)));
                    i = n;
                }
            }
            continue;
        }
        if c == '\'' || c == '"' {
            match scan_string(&chars, i) {
                Some(end) => {
                    out.push(Token::new(TokenKind::StringLiteral, collapse_ws(&chars[i..=end])));
                    i = end + 1;
                }
                None => {
                    // Lone quote: keep it as its own token and keep lexing so
                    // whatever follows (comments, keywords) stays visible.
                    out.push(Token::new(TokenKind::Unknown, c.to_string()));
                    i += 1;
                }
            }
            continue;
        }
        if c == '`' {
            match chars[i + 1..].iter().position(|&ch| ch == '`') {
                Some(p) => {
                    let end = i + 1 + p;
                    out.push(Token::new(TokenKind::Identifier, chars[i..=end].iter().collect::<String>()));
                    i = end + 1;
                }
                None => {
                    out.push(Token::new(TokenKind::Unknown, "`"));
                    i += 1;
                }
            }
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && next.is_some_and(|d| d.is_ascii_digit())) {
            let end = scan_number(&chars, i);
            let raw: String = chars[i..end].iter().collect();
            out.push(Token::new(TokenKind::Number, canonical_number(&raw)));
            i = end;
            continue;
        }
        if is_ident_start(c) || (c == '@' && next.is_some_and(|d| d == '@' || is_ident_start(d))) {
            let mut end = i;
            while end < n && chars[end] == '@' {
                end += 1;
            }
            while end < n && is_ident_char(chars[end]) {
                end += 1;
            }
            let text: String = chars[i..end].iter().collect();
            let lower = text.to_lowercase();
            if is_keyword(&lower) {
                out.push(Token::new(TokenKind::Keyword, lower));
            } else {
                out.push(Token::new(TokenKind::Identifier, text));
            }
            i = end;
            continue;
        }
        if let Some(op) = OPERATORS.iter().find(|op| starts_with_at(&chars, i, op)) {
            out.push(Token::new(TokenKind::Operator, *op));
            i += op.chars().count();
            continue;
        }
        if PUNCTUATION.contains(&c) {
            out.push(Token::new(TokenKind::Punctuation, c.to_string()));
            i += 1;
            continue;
        }
        out.push(Token::new(TokenKind::Unknown, c.to_string()));
        i += 1;
    }
    out
}

fn starts_with_at(chars: &[char], at: usize, pat: &str) -> bool {
    let mut k = at;
    for pc in pat.chars() {
        if chars.get(k) != Some(&pc) {
            return false;
        }
        k += 1;
    }
    true
}

fn find_seq(chars: &[char], from: usize, pat: &[char; 2]) -> Option<usize> {
    (from..chars.len().saturating_sub(1)).find(|&k| chars[k] == pat[0] && chars[k + 1] == pat[1])
}

/// Index of the closing quote of the literal opening at `start`. A doubled
/// quote or a backslash before the quote (or before a backslash) escapes.
fn scan_string(chars: &[char], start: usize) -> Option<usize> {
    let q = chars[start];
    let mut k = start + 1;
    while k < chars.len() {
        let c = chars[k];
        if c == '\\' && matches!(chars.get(k + 1), Some(&d) if d == q || d == '\\') {
            k += 2;
            continue;
        }
        if c == q {
            if chars.get(k + 1) == Some(&q) {
                k += 2;
                continue;
            }
            return Some(k);
        }
        k += 1;
    }
    None
}

fn collapse_ws(chars: &[char]) -> String {
    let mut s = String::with_capacity(chars.len());
    let mut in_ws = false;
    for &c in chars {
        if c.is_whitespace() {
            if !in_ws {
                s.push(' ');
            }
            in_ws = true;
        } else {
            s.push(c);
            in_ws = false;
        }
    }
    s
}

fn scan_number(chars: &[char], start: usize) -> usize {
    let n = chars.len();
    let mut k = start;
    if chars[k] == '0' && matches!(chars.get(k + 1), Some('x' | 'X')) && chars.get(k + 2).is_some_and(|c| c.is_ascii_hexdigit()) {
        k += 2;
        while k < n && chars[k].is_ascii_hexdigit() {
            k += 1;
        }
        return k;
    }
    while k < n && chars[k].is_ascii_digit() {
        k += 1;
    }
    if k < n && chars[k] == '.' {
        k += 1;
        while k < n && chars[k].is_ascii_digit() {
            k += 1;
        }
    }
    if k < n && matches!(chars[k], 'e' | 'E') {
        let mut e = k + 1;
        if e < n && matches!(chars[e], '+' | '-') {
            e += 1;
        }
        if e < n && chars[e].is_ascii_digit() {
            while e < n && chars[e].is_ascii_digit() {
                e += 1;
            }
            k = e;
        }
    }
    k
}

/// Canonical decimal form: `007` → `7`, `1.50` → `1.5`, `0x1A` → `26`,
/// `1e3` → `1000`.
pub fn canonical_number(raw: &str) -> String {
    if let Some(hex) = raw.strip_prefix("0x").or_else(|| raw.strip_prefix("0X")) {
        return match u128::from_str_radix(hex, 16) {
            Ok(v) => v.to_string(),
            Err(_) => raw.to_lowercase(),
        };
    }
    if raw.bytes().all(|b| b.is_ascii_digit()) {
        let trimmed = raw.trim_start_matches('0');
        return if trimmed.is_empty() { "0".into() } else { trimmed.into() };
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => {
            let a = v.abs();
            if a == 0.0 || (1e-6..1e16).contains(&a) {
                format!("{v}")
            } else {
                format!("{v:e}")
            }
        }
        _ => raw.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(q: &str, url: bool) -> Vec<String> {
        tokenize(q, TokenizeOptions { url_decode: url })
            .unwrap()
            .content()
            .iter()
            .map(|t| t.text.clone())
            .collect()
    }

    #[test]
    fn tautology_query() {
        assert_eq!(
            texts("SELECT * FROM users WHERE id=1 OR 1=1", false),
            ["select", "*", "from", "users", "where", "id", "=", "1", "or", "1", "=", "1"]
        );
        let seq = tokenize("SELECT * FROM users WHERE id=1 OR 1=1", TokenizeOptions::default()).unwrap();
        assert_eq!(seq.tokens().len(), SEQ_LEN);
        assert!(seq.tokens()[12..].iter().all(Token::is_pad));
    }

    #[test]
    fn quote_then_comment() {
        let seq = tokenize("admin'--", TokenizeOptions::default()).unwrap();
        let c = seq.content();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0], Token::new(TokenKind::Identifier, "admin"));
        assert_eq!(c[1].text, "'");
        assert_eq!(c[2], Token::new(TokenKind::Comment, "--"));
    }

    #[test]
    fn url_decoded_payload() {
        assert_eq!(texts("%27%20OR%201%3D1", true), ["'", "or", "1", "=", "1"]);
        // without decoding the percent signs survive as operators
        assert!(texts("%27%20OR%201%3D1", false).contains(&"%".to_string()));
    }

    #[test]
    fn keywords_are_case_folded_identifiers_are_not() {
        let seq = tokenize("SeLeCt Name FROM Users", TokenizeOptions::default()).unwrap();
        let c = seq.content();
        assert_eq!(c[0], Token::new(TokenKind::Keyword, "select"));
        assert_eq!(c[1], Token::new(TokenKind::Identifier, "Name"));
        assert_eq!(c[3], Token::new(TokenKind::Identifier, "Users"));
    }

    #[test]
    fn maximal_munch_operators() {
        assert_eq!(texts("a<=b<>c||d", false), ["a", "<=", "b", "<>", "c", "||", "d"]);
    }

    #[test]
    fn string_literals_keep_quotes_and_collapse_whitespace() {
        let seq = tokenize("x = 'a   b\t c' AND y = \"q\"", TokenizeOptions::default()).unwrap();
        let c = seq.content();
        assert_eq!(c[2], Token::new(TokenKind::StringLiteral, "'a b c'"));
        assert_eq!(c[6], Token::new(TokenKind::StringLiteral, "\"q\""));
        assert_eq!(texts("'it''s'", false), ["'it''s'"]);
    }

    #[test]
    fn comments() {
        assert_eq!(texts("1 /* x */ 2 # tail", false), ["1", "/* x */", "2", "# tail"]);
        let seq = tokenize("1 /* never closed", TokenizeOptions::default()).unwrap();
        assert_eq!(seq.content()[1], Token::new(TokenKind::Unknown, "/* never closed"));
    }

    #[test]
    fn numbers_canonical() {
        assert_eq!(texts("007 1.50 0x1A 1e3 .5", false), ["7", "1.5", "26", "1000", "0.5"]);
        assert_eq!(canonical_number("0"), "0");
        assert_eq!(canonical_number("000"), "0");
    }

    #[test]
    fn truncation_keeps_head() {
        let q = (0..150).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let seq = tokenize(&q, TokenizeOptions::default()).unwrap();
        assert_eq!(seq.original_length(), 150);
        assert_eq!(seq.tokens().len(), SEQ_LEN);
        assert_eq!(seq.tokens()[0].text, "t0");
        assert_eq!(seq.tokens()[99].text, "t99");
    }

    #[test]
    fn oversized_input_rejected() {
        let big = "a".repeat(MAX_INPUT_BYTES + 1);
        assert!(tokenize(&big, TokenizeOptions::default()).is_err());
    }

    #[test]
    fn detokenize_round_trips() {
        for q in [
            "SELECT a FROM t -- note\nWHERE b = 'x  y'",
            "admin'--",
            "1 UNION SELECT @@version, sleep(5) #",
            "a.b<=3.0e1 /* c */",
        ] {
            let seq = tokenize(q, TokenizeOptions::default()).unwrap();
            let again = tokenize(&detokenize(seq.tokens()), TokenizeOptions::default()).unwrap();
            assert_eq!(seq, again, "{q}");
        }
    }
}
