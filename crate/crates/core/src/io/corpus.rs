//! Seeded generator for the bundled desk corpus: templated benign CRUD
//! traffic plus injection payloads (tautology, union, error-based,
//! time-based, boolean-blind, stacked), some percent-encoded.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: String,
    pub label: u8,
}

/// Payload family of a generated query, kept for audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Crud,
    Search,
    Tautology,
    Union,
    ErrorBased,
    TimeBased,
    Blind,
    Stacked,
}

const TABLES: &[&str] = &[
    "users", "orders", "products", "accounts", "customers", "invoices", "sessions", "employees", "items", "logs",
    "payments", "reviews",
];
const COLUMNS: &[&str] = &[
    "id", "name", "email", "price", "qty", "status", "created_at", "user_id", "total", "title", "city", "age",
    "score", "role", "amount",
];
const WORDS: &[&str] = &[
    "alice", "bob", "carol", "shipped", "pending", "london", "paris", "widget", "gadget", "admin", "guest",
    "active", "closed", "blue", "report", "smith", "jones", "monthly", "archive", "draft", "order",
    "union street", "select few", "or else",
];
const FUNCS: &[&str] = &["count", "sum", "max", "min", "avg"];
const NAMES: &[&str] = &[
    "John Smith", "maria", "o'brien", "Jean-Luc", "anna k", "info@example.com", "42 Main St", "Rock & Roll",
    "don't stop", "select", "drop zone", "or", "1=1 club",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or("")
}

fn num(rng: &mut ChaCha8Rng) -> u32 {
    rng.random_range(1..5000)
}

fn cols(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.25) {
        return "*".into();
    }
    let k = rng.random_range(1..=3);
    let mut out: Vec<&str> = Vec::with_capacity(k);
    while out.len() < k {
        let c = pick(rng, COLUMNS);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.join(", ")
}

fn literal(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.5) {
        num(rng).to_string()
    } else {
        format!("'{}'", pick(rng, WORDS))
    }
}

fn benign_crud(rng: &mut ChaCha8Rng) -> String {
    let t = pick(rng, TABLES);
    let c = pick(rng, COLUMNS);
    match rng.random_range(0..9) {
        0 => format!("SELECT {} FROM {t} WHERE {c} = {}", cols(rng), literal(rng)),
        1 => format!(
            "SELECT {} FROM {t} WHERE {c} > {} ORDER BY {} DESC LIMIT {}",
            cols(rng),
            num(rng),
            pick(rng, COLUMNS),
            rng.random_range(1..100)
        ),
        2 => format!(
            "INSERT INTO {t} ({c}, {}) VALUES ({}, {})",
            pick(rng, COLUMNS),
            literal(rng),
            literal(rng)
        ),
        3 => format!("UPDATE {t} SET {c} = {} WHERE id = {}", literal(rng), num(rng)),
        4 => format!("DELETE FROM {t} WHERE id = {}", num(rng)),
        5 => format!(
            "SELECT {}({c}) FROM {t} GROUP BY {} HAVING {}({c}) > {}",
            pick(rng, FUNCS),
            pick(rng, COLUMNS),
            pick(rng, FUNCS),
            num(rng)
        ),
        6 => {
            let u = pick(rng, TABLES);
            format!(
                "SELECT a.{c}, b.{} FROM {t} a JOIN {u} b ON a.id = b.{}_id WHERE b.{} = {}",
                pick(rng, COLUMNS),
                u.trim_end_matches('s'),
                pick(rng, COLUMNS),
                literal(rng)
            )
        }
        7 => format!(
            "SELECT {} FROM {t} WHERE {c} = {} OR {} = {}",
            cols(rng),
            literal(rng),
            pick(rng, COLUMNS),
            literal(rng)
        ),
        _ => format!(
            "SELECT {} FROM {t} WHERE {c} LIKE '%{}%' -- search",
            cols(rng),
            pick(rng, WORDS)
        ),
    }
}

fn benign_search(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => pick(rng, NAMES).to_string(),
        1 => format!("{} {}", pick(rng, WORDS), num(rng)),
        2 => format!("{}@{}.com", pick(rng, WORDS).replace(' ', "."), pick(rng, TABLES)),
        _ => format!("{} {}", pick(rng, NAMES), pick(rng, WORDS)),
    }
}

fn prefix(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..5) {
        0 => "'".into(),
        1 => format!("{}'", pick(rng, WORDS)),
        2 => format!("{}", num(rng)),
        3 => "\"".into(),
        _ => "')".into(),
    }
}

fn tail(rng: &mut ChaCha8Rng) -> &'static str {
    ["--", "#", "-- -", "/*", ""][rng.random_range(0..5)]
}

fn tautology(rng: &mut ChaCha8Rng) -> String {
    let n = num(rng);
    match rng.random_range(0..6) {
        0 => format!("{} OR 1=1{}", prefix(rng), tail(rng)),
        1 => format!("{}' --", pick(rng, WORDS)),
        2 => format!("{} or '{n}'='{n}", prefix(rng)),
        3 => format!("{} OR {n}={n} {}", prefix(rng), tail(rng)),
        4 => format!("\" or \"\"=\"{}", tail(rng)),
        _ => format!(
            "SELECT * FROM {} WHERE {} = '{}' OR 'a'='a'",
            pick(rng, TABLES),
            pick(rng, COLUMNS),
            pick(rng, WORDS)
        ),
    }
}

fn union(rng: &mut ChaCha8Rng) -> String {
    let k = rng.random_range(1..=5);
    let nulls = vec!["NULL"; k].join(",");
    match rng.random_range(0..4) {
        0 => format!("{} UNION SELECT {nulls}{}", prefix(rng), tail(rng)),
        1 => format!(
            "{} UNION ALL SELECT {}, {} FROM {}{}",
            prefix(rng),
            pick(rng, COLUMNS),
            pick(rng, COLUMNS),
            pick(rng, TABLES),
            tail(rng)
        ),
        2 => format!(
            "{} union select table_name, null from information_schema.tables{}",
            prefix(rng),
            tail(rng)
        ),
        _ => format!("{} UNION SELECT @@version, {nulls}#", prefix(rng)),
    }
}

fn error_based(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!(
            "{} AND extractvalue(1, concat(0x7e, (SELECT version()))){}",
            prefix(rng),
            tail(rng)
        ),
        1 => format!("{} AND 1=convert(int, @@version){}", prefix(rng), tail(rng)),
        2 => format!(
            "{} AND updatexml(1, concat(0x7e, (SELECT user())), 1){}",
            prefix(rng),
            tail(rng)
        ),
        _ => format!(
            "{} AND (SELECT 1 FROM (SELECT count(*), concat(database(), floor(rand(0)*2)) x FROM information_schema.tables GROUP BY x) a){}",
            prefix(rng),
            tail(rng)
        ),
    }
}

fn time_based(rng: &mut ChaCha8Rng) -> String {
    let s = rng.random_range(1..10);
    match rng.random_range(0..4) {
        0 => format!("{} AND SLEEP({s}){}", prefix(rng), tail(rng)),
        1 => format!("{}; WAITFOR DELAY '0:0:{s}'{}", prefix(rng), tail(rng)),
        2 => format!("{} OR pg_sleep({s}){}", prefix(rng), tail(rng)),
        _ => format!(
            "{} AND benchmark({}000000, md5({})){}",
            prefix(rng),
            s,
            num(rng),
            tail(rng)
        ),
    }
}

fn blind(rng: &mut ChaCha8Rng) -> String {
    let n = num(rng);
    match rng.random_range(0..4) {
        0 => format!("{n} AND 1={}", rng.random_range(1..3)),
        1 => format!(
            "{} AND substring(@@version, 1, 1) = '{}'{}",
            prefix(rng),
            rng.random_range(4..9),
            tail(rng)
        ),
        2 => format!(
            "{} AND ascii(substring((SELECT {} FROM {} LIMIT 1), {}, 1)) > {}{}",
            prefix(rng),
            pick(rng, COLUMNS),
            pick(rng, TABLES),
            rng.random_range(1..9),
            rng.random_range(32..127),
            tail(rng)
        ),
        _ => format!(
            "SELECT {} FROM {} WHERE id = {n} AND length(database()) > {}",
            cols(rng),
            pick(rng, TABLES),
            rng.random_range(1..12)
        ),
    }
}

fn stacked(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => format!("{}; DROP TABLE {}{}", prefix(rng), pick(rng, TABLES), tail(rng)),
        1 => format!(
            "{}; UPDATE {} SET role = 'admin' WHERE {} = '{}'{}",
            prefix(rng),
            pick(rng, TABLES),
            pick(rng, COLUMNS),
            pick(rng, WORDS),
            tail(rng)
        ),
        _ => format!("{}; exec xp_cmdshell('dir'){}", prefix(rng), tail(rng)),
    }
}

/// Percent-encodes characters that commonly arrive encoded in URLs.
pub fn url_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len() * 2);
    for c in s.chars() {
        match c {
            ' ' => out.push_str("%20"),
            '\'' => out.push_str("%27"),
            '"' => out.push_str("%22"),
            '=' => out.push_str("%3D"),
            '#' => out.push_str("%23"),
            '(' => out.push_str("%28"),
            ')' => out.push_str("%29"),
            _ => out.push(c),
        }
    }
    out
}

/// Generates `n` labeled queries (about 45% malicious).
pub fn generate_corpus(n: usize, seed: u64) -> Vec<(LabeledQuery, Family)> {
    let mut rng = crate::rng::seeded(seed);
    (0..n)
        .map(|_| {
            let malicious = rng.random_bool(0.45);
            let (query, family) = if malicious {
                let fam = *[
                    Family::Tautology,
                    Family::Union,
                    Family::ErrorBased,
                    Family::TimeBased,
                    Family::Blind,
                    Family::Stacked,
                ]
                .choose(&mut rng)
                .expect("non-empty");
                let q = match fam {
                    Family::Tautology => tautology(&mut rng),
                    Family::Union => union(&mut rng),
                    Family::ErrorBased => error_based(&mut rng),
                    Family::TimeBased => time_based(&mut rng),
                    Family::Blind => blind(&mut rng),
                    _ => stacked(&mut rng),
                };
                let q = if rng.random_bool(0.15) { url_encode(&q) } else { q };
                (q, fam)
            } else if rng.random_bool(0.7) {
                (benign_crud(&mut rng), Family::Crud)
            } else {
                (benign_search(&mut rng), Family::Search)
            };
            (
                LabeledQuery {
                    query,
                    label: u8::from(malicious),
                },
                family,
            )
        })
        .collect()
}

/// Just the labeled queries of [`generate_corpus`].
pub fn desk_corpus(n: usize, seed: u64) -> Vec<LabeledQuery> {
    generate_corpus(n, seed).into_iter().map(|(q, _)| q).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_mixed() {
        let a = desk_corpus(500, 7);
        assert_eq!(a, desk_corpus(500, 7));
        let ones = a.iter().filter(|q| q.label == 1).count();
        assert!((150..350).contains(&ones), "{ones}");
        assert!(a.iter().all(|q| !q.query.is_empty()));
    }

    #[test]
    fn all_families_appear() {
        let c = generate_corpus(2000, 1);
        for f in [
            Family::Crud,
            Family::Search,
            Family::Tautology,
            Family::Union,
            Family::ErrorBased,
            Family::TimeBased,
            Family::Blind,
            Family::Stacked,
        ] {
            assert!(c.iter().any(|(_, g)| *g == f), "{f:?}");
        }
    }
}
