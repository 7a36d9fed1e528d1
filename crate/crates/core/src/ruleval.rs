//! Parsing, matching and scoring of rules in the emitted Yara subset.

use std::collections::HashMap;
use std::fmt::Write as _;

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};
use fixedbitset::FixedBitSet;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ngram::SampleSource;
use crate::rulegen::{RuleClause, YaraRule};

pub const DEFAULT_BETA: f64 = 0.001;
/// Highest false-positive rate at which a rule counts as usable.
pub const USABLE_FPR: f64 = 0.001;
pub const REPORT_HEADER: &str = "name,tp,fp,fn,tn,tpr,fpr,f_beta,usable";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Var(String),
    Int(usize),
    Hex(String),
    Punct(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
}

fn unsupported(token: impl Into<String>, line: usize) -> Error {
    Error::Unsupported {
        token: token.into(),
        line,
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut in_hex = false;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '\n' {
            line += 1;
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == '/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == '/' && bytes.get(i + 1) == Some(&b'*') {
            i += 2;
            while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                if bytes[i] == b'\n' {
                    line += 1;
                }
                i += 1;
            }
            i += 2;
            continue;
        }
        let start = i;
        if in_hex {
            if c == '}' {
                in_hex = false;
                out.push(Token { tok: Tok::Punct('}'), line });
                i += 1;
                continue;
            }
            if c.is_ascii_hexdigit() {
                while i < bytes.len() && (bytes[i] as char).is_ascii_hexdigit() {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Hex(text[start..i].to_string()),
                    line,
                });
                continue;
            }
            // wildcards, jumps, alternatives, nibble masks
            let end = text[i..]
                .find(|ch: char| ch.is_ascii_whitespace() || ch == '}')
                .map_or(text.len(), |e| i + e);
            let end = end.max(i + text[i..].chars().next().map_or(1, char::len_utf8));
            return Err(unsupported(&text[start..end], line));
        }
        match c {
            '{' => {
                // a brace right after `=` opens a hex string
                in_hex = matches!(out.last(), Some(Token { tok: Tok::Punct('='), .. }));
                out.push(Token { tok: Tok::Punct('{'), line });
                i += 1;
            }
            '}' | '(' | ')' | ',' | '=' | ':' => {
                out.push(Token { tok: Tok::Punct(c), line });
                i += 1;
            }
            '$' => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'*' {
                    return Err(unsupported(&text[start..=i], line));
                }
                out.push(Token {
                    tok: Tok::Var(text[start..i].to_string()),
                    line,
                });
            }
            _ if c.is_ascii_digit() => {
                while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let word = &text[start..i];
                let value = word
                    .parse::<usize>()
                    .map_err(|_| unsupported(word, line))?;
                out.push(Token { tok: Tok::Int(value), line });
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Word(text[start..i].to_string()),
                    line,
                });
            }
            // anything else is outside the subset; the parser reports the
            // first such lexeme it reaches
            '"' => {
                i = text[i + 1..].find('"').map_or(text.len(), |e| i + 2 + e);
                out.push(Token {
                    tok: Tok::Word(text[start..i].to_string()),
                    line,
                });
            }
            _ => {
                i = text[i..]
                    .find(|ch: char| ch.is_ascii_whitespace() || "(){},".contains(ch))
                    .map_or(text.len(), |e| i + e)
                    .max(i + text[i..].chars().next().map_or(1, char::len_utf8));
                out.push(Token {
                    tok: Tok::Word(text[start..i].to_string()),
                    line,
                });
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

const SUPPORTED_WORDS: &[&str] = &["rule", "strings", "condition", "of", "or", "all", "any"];

impl Parser {
    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map_or(1, |t| t.line)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn next(&mut self, what: &str) -> Result<Tok> {
        let line = self.line();
        let t = self.toks.get(self.pos).cloned().ok_or_else(|| Error::Parse {
            line,
            message: format!("unexpected end of input, expected {what}"),
        })?;
        self.pos += 1;
        if let Tok::Word(w) = &t.tok {
            if !SUPPORTED_WORDS.contains(&w.as_str()) && what != "rule name" {
                return Err(unsupported(w.clone(), t.line));
            }
        }
        Ok(t.tok)
    }

    fn expect_punct(&mut self, c: char) -> Result<()> {
        let line = self.line();
        match self.next(&format!("`{c}`"))? {
            Tok::Punct(p) if p == c => Ok(()),
            other => Err(Error::Parse {
                line,
                message: format!("expected `{c}`, found {}", describe(&other)),
            }),
        }
    }

    fn expect_word(&mut self, w: &str) -> Result<()> {
        let line = self.line();
        match self.next(&format!("`{w}`"))? {
            Tok::Word(x) if x == w => Ok(()),
            other => Err(Error::Parse {
                line,
                message: format!("expected `{w}`, found {}", describe(&other)),
            }),
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Word(w) => format!("`{w}`"),
        Tok::Var(v) => format!("`{v}`"),
        Tok::Int(i) => format!("`{i}`"),
        Tok::Hex(h) => format!("`{h}`"),
        Tok::Punct(c) => format!("`{c}`"),
    }
}

/// Parses one rule of the emitted subset.
pub fn parse_rule(text: &str) -> Result<YaraRule> {
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    p.expect_word("rule")?;
    let line = p.line();
    let name = match p.next("rule name")? {
        Tok::Word(w) if !w.contains('.') => w,
        other => {
            return Err(Error::Parse {
                line,
                message: format!("expected rule name, found {}", describe(&other)),
            })
        }
    };
    if let Some(Tok::Punct(':')) = p.peek() {
        return Err(unsupported("rule tags", p.line()));
    }
    p.expect_punct('{')?;
    p.expect_word("strings")?;
    p.expect_punct(':')?;

    let mut names: HashMap<String, usize> = HashMap::new();
    let mut patterns: Vec<Vec<u8>> = Vec::new();
    while let Some(Tok::Var(_)) = p.peek() {
        let line = p.line();
        let Tok::Var(var) = p.next("string name")? else { unreachable!() };
        p.expect_punct('=')?;
        p.expect_punct('{')?;
        let mut hex = String::new();
        loop {
            match p.next("hex bytes or `}`")? {
                Tok::Hex(h) => hex.push_str(&h),
                Tok::Punct('}') => break,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unexpected {} in hex string", describe(&other)),
                    })
                }
            }
        }
        if hex.is_empty() || !hex.len().is_multiple_of(2) {
            return Err(Error::Parse {
                line,
                message: format!("hex string of {var} has {} digits", hex.len()),
            });
        }
        let bytes = hex::decode(&hex).map_err(|e| Error::Parse {
            line,
            message: format!("bad hex in {var}: {e}"),
        })?;
        // modifiers such as `wide` follow the closing brace
        if let Some(Tok::Word(w)) = p.peek() {
            if w != "condition" {
                return Err(unsupported(w.clone(), p.line()));
            }
        }
        if names.insert(var.clone(), patterns.len()).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("{var} declared twice"),
            });
        }
        patterns.push(bytes);
    }
    if patterns.is_empty() {
        return Err(Error::Parse {
            line: p.line(),
            message: "rule declares no strings".into(),
        });
    }
    p.expect_word("condition")?;
    p.expect_punct(':')?;

    let mut clauses = vec![parse_clause(&mut p, &names)?];
    loop {
        match p.peek() {
            Some(Tok::Word(w)) if w == "or" => {
                p.pos += 1;
                clauses.push(parse_clause(&mut p, &names)?);
            }
            Some(Tok::Punct('}')) => {
                p.pos += 1;
                break;
            }
            Some(_) => {
                let line = p.line();
                let t = p.next("`or` or `}`")?;
                return Err(Error::Parse {
                    line,
                    message: format!("expected `or` or `}}`, found {}", describe(&t)),
                });
            }
            None => {
                return Err(Error::Parse {
                    line: p.line(),
                    message: "unterminated rule".into(),
                })
            }
        }
    }
    if p.pos < p.toks.len() {
        return Err(Error::Parse {
            line: p.line(),
            message: "trailing input after rule".into(),
        });
    }
    let rule = YaraRule {
        name,
        patterns,
        clauses,
    };
    rule.validate()?;
    Ok(rule)
}

fn parse_clause(p: &mut Parser, names: &HashMap<String, usize>) -> Result<RuleClause> {
    p.expect_punct('(')?;
    let line = p.line();
    enum Quant {
        Count(usize),
        All,
        Any,
    }
    let quant = match p.next("clause quantifier")? {
        Tok::Int(t) => Quant::Count(t),
        Tok::Word(w) if w == "all" => Quant::All,
        Tok::Word(w) if w == "any" => Quant::Any,
        Tok::Var(v) => return Err(unsupported(v, line)),
        other => {
            return Err(Error::Parse {
                line,
                message: format!("expected a count, `all` or `any`, found {}", describe(&other)),
            })
        }
    };
    p.expect_word("of")?;
    p.expect_punct('(')?;
    let mut ids = Vec::new();
    loop {
        let line = p.line();
        match p.next("string reference")? {
            Tok::Var(v) => {
                let id = *names.get(&v).ok_or_else(|| Error::Reference(v.clone()))?;
                if ids.contains(&id) {
                    return Err(Error::Parse {
                        line,
                        message: format!("{v} listed twice in one clause"),
                    });
                }
                ids.push(id);
            }
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected a string reference, found {}", describe(&other)),
                })
            }
        }
        match p.next("`,` or `)`")? {
            Tok::Punct(',') => continue,
            Tok::Punct(')') => break,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected `,` or `)`, found {}", describe(&other)),
                })
            }
        }
    }
    p.expect_punct(')')?;
    ids.sort_unstable();
    let threshold = match quant {
        Quant::Count(t) => t,
        Quant::All => ids.len(),
        Quant::Any => 1,
    };
    Ok(RuleClause {
        threshold,
        feature_ids: ids,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub matched: bool,
    pub pattern_hits: FixedBitSet,
    pub clause_satisfied: FixedBitSet,
}

/// A rule compiled for repeated scanning.
pub struct Matcher {
    rule: YaraRule,
    automaton: AhoCorasick,
}

impl Matcher {
    pub fn new(rule: &YaraRule) -> Result<Self> {
        rule.validate()?;
        let automaton = AhoCorasickBuilder::new()
            .match_kind(MatchKind::Standard)
            .build(&rule.patterns)
            .map_err(|e| Error::Internal(format!("pattern automaton: {e}")))?;
        Ok(Matcher {
            rule: rule.clone(),
            automaton,
        })
    }

    pub fn rule(&self) -> &YaraRule {
        &self.rule
    }

    pub fn scan(&self, bytes: &[u8]) -> MatchResult {
        let total = self.rule.patterns.len();
        let mut hits = FixedBitSet::with_capacity(total);
        let mut found = 0;
        for m in self.automaton.find_overlapping_iter(bytes) {
            let id = m.pattern().as_usize();
            if !hits.put(id) {
                found += 1;
                if found == total {
                    break;
                }
            }
        }
        let mut clauses = FixedBitSet::with_capacity(self.rule.clauses.len());
        for (i, c) in self.rule.clauses.iter().enumerate() {
            let present = c.feature_ids.iter().filter(|&&f| hits.contains(f)).count();
            clauses.set(i, present >= c.threshold);
        }
        MatchResult {
            matched: clauses.count_ones(..) > 0,
            pattern_hits: hits,
            clause_satisfied: clauses,
        }
    }
}

pub fn match_file(rule: &YaraRule, bytes: &[u8]) -> Result<MatchResult> {
    Ok(Matcher::new(rule)?.scan(bytes))
}

/// `((1 + b^2) tp) / ((1 + b^2) tp + b^2 fn + fp)`, zero when `tp` is zero.
pub fn f_beta(tp: u64, fp: u64, fn_: u64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let num = (1.0 + b2) * tp as f64;
    if num == 0.0 {
        return 0.0;
    }
    num / (num + b2 * fn_ as f64 + fp as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub tpr: f64,
    pub fpr: f64,
    pub f_beta: f64,
    pub beta: f64,
    pub usable: bool,
}

impl EvalReport {
    pub fn from_counts(name: &str, tp: u64, fp: u64, fn_: u64, tn: u64, beta: f64) -> Self {
        let ratio = |a: u64, b: u64| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let fpr = ratio(fp, tn);
        EvalReport {
            name: name.to_string(),
            tp,
            fp,
            fn_,
            tn,
            tpr: ratio(tp, fn_),
            fpr,
            f_beta: f_beta(tp, fp, fn_, beta),
            beta,
            usable: fpr <= USABLE_FPR,
        }
    }

    /// One comma-separated record matching [`REPORT_HEADER`].
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{}",
            self.name, self.tp, self.fp, self.fn_, self.tn, self.tpr, self.fpr, self.f_beta, self.usable
        );
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }
}

/// Number of samples in `source` the matcher fires on.
pub fn count_matches<S: SampleSource + ?Sized>(matcher: &Matcher, source: &S) -> Result<u64> {
    (0..source.sample_count())
        .into_par_iter()
        .map(|i| Ok(u64::from(matcher.scan(&source.sample(i)?).matched)))
        .sum()
}

pub fn evaluate<P, N>(rule: &YaraRule, positives: &P, negatives: &N, beta: f64) -> Result<EvalReport>
where
    P: SampleSource + ?Sized,
    N: SampleSource + ?Sized,
{
    if positives.sample_count() == 0 {
        return Err(Error::Argument("evaluation needs at least one positive sample".into()));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Argument(format!("beta must be a non-negative number, got {beta}")));
    }
    let matcher = Matcher::new(rule)?;
    let tp = count_matches(&matcher, positives)?;
    let fp = count_matches(&matcher, negatives)?;
    let fn_ = positives.sample_count() as u64 - tp;
    let tn = negatives.sample_count() as u64 - fp;
    Ok(EvalReport::from_counts(&rule.name, tp, fp, fn_, tn, beta))
}
