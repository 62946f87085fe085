//! Deterministic attribute normalization rules.
//!
//! Rules operate token-wise over the values of a serialized record
//! (`name: value | name: value`). Rules whose patterns are ambiguous on bare
//! numbers (years, ordinals, unit-less durations, language codes) only fire
//! inside columns whose header names their category. When no header in the
//! record names any such category, every rule falls back to pattern-only
//! matching.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::tables::FIELD_SEPARATOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleCategory {
    Time,
    Year,
    Abbreviation,
    Ordinal,
    Weight,
    Capacity,
    Custom,
}

impl RuleCategory {
    /// Header words that mark a column as holding values of this category.
    fn column_keywords(self) -> &'static [&'static str] {
        match self {
            RuleCategory::Time => &["length", "duration", "time", "runtime"],
            RuleCategory::Year => &["year", "yr"],
            RuleCategory::Abbreviation => &["language", "lang"],
            RuleCategory::Ordinal => &["number", "no", "rank", "position", "track", "order"],
            RuleCategory::Weight => &["weight", "mass"],
            RuleCategory::Capacity => &["capacity", "volume"],
            RuleCategory::Custom => &[],
        }
    }
}

impl fmt::Display for RuleCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleCategory::Time => "time",
            RuleCategory::Year => "year",
            RuleCategory::Abbreviation => "abbreviation",
            RuleCategory::Ordinal => "ordinal",
            RuleCategory::Weight => "weight",
            RuleCategory::Capacity => "capacity",
            RuleCategory::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
enum Matcher {
    Builtin,
    /// Regex replaced over whole cell values, optionally only in columns whose
    /// header contains one of `columns` (case-insensitive).
    Custom {
        pattern: Regex,
        replacement: String,
        columns: Vec<String>,
    },
}

#[derive(Debug, Clone)]
pub struct NormalizationRule {
    pub rule_id: String,
    pub category: RuleCategory,
    /// Human-readable instruction; also rendered into model prompts.
    pub instruction: String,
    matcher: Matcher,
}

impl NormalizationRule {
    fn builtin(rule_id: &str, category: RuleCategory, instruction: &str) -> Self {
        Self {
            rule_id: rule_id.to_string(),
            category,
            instruction: instruction.to_string(),
            matcher: Matcher::Builtin,
        }
    }

    /// A user-defined rewrite. The caller is responsible for the rewrite being
    /// idempotent on its own output.
    pub fn custom(
        rule_id: impl Into<String>,
        instruction: impl Into<String>,
        pattern: &str,
        replacement: impl Into<String>,
        columns: Vec<String>,
    ) -> Result<Self, regex::Error> {
        Ok(Self {
            rule_id: rule_id.into(),
            category: RuleCategory::Custom,
            instruction: instruction.into(),
            matcher: Matcher::Custom {
                pattern: Regex::new(pattern)?,
                replacement: replacement.into(),
                columns: columns.into_iter().map(|c| c.to_lowercase()).collect(),
            },
        })
    }

    /// Whether bare-number patterns of this rule need a column hint.
    fn needs_hint(&self) -> bool {
        matches!(
            self.category,
            RuleCategory::Time | RuleCategory::Year | RuleCategory::Abbreviation | RuleCategory::Ordinal
        )
    }

    fn rewrite_token(&self, token: &str, ctx: Context) -> Option<String> {
        let hinted = ctx.pattern_only || ctx.column_is(self.category);
        match self.category {
            RuleCategory::Time => rewrite_duration(token, hinted, ctx.pattern_only),
            RuleCategory::Year if hinted => rewrite_year(token),
            RuleCategory::Abbreviation if hinted => rewrite_language(token, !ctx.pattern_only),
            RuleCategory::Ordinal if hinted => rewrite_ordinal(token),
            RuleCategory::Weight => rewrite_unit(token, &WEIGHT_UNITS, "g"),
            RuleCategory::Capacity => rewrite_unit(token, &CAPACITY_UNITS, "L"),
            _ => None,
        }
    }
}

/// The built-in rule set, one rule per conversion category.
pub fn builtin_rules() -> Vec<NormalizationRule> {
    vec![
        NormalizationRule::builtin("time-seconds", RuleCategory::Time, "Convert all durations to seconds"),
        NormalizationRule::builtin(
            "year-four-digit",
            RuleCategory::Year,
            "Convert two-digit years to four-digit years",
        ),
        NormalizationRule::builtin(
            "expand-abbreviations",
            RuleCategory::Abbreviation,
            "Expand and complete abbreviations.",
        ),
        NormalizationRule::builtin(
            "ordinal-number",
            RuleCategory::Ordinal,
            "Convert numeric values to ordinal format",
        ),
        NormalizationRule::builtin("weight-grams", RuleCategory::Weight, "Unify the weight in units of g"),
        NormalizationRule::builtin("capacity-litres", RuleCategory::Capacity, "Unify the capacity in units of L"),
    ]
}

/// The built-in rule for one category.
pub fn builtin_rule(category: RuleCategory) -> Option<NormalizationRule> {
    builtin_rules().into_iter().find(|r| r.category == category)
}

#[derive(Clone, Copy)]
struct Context<'a> {
    /// Lowercased header words of the current column.
    header: &'a [String],
    pattern_only: bool,
}

impl Context<'_> {
    fn column_is(&self, category: RuleCategory) -> bool {
        header_matches(self.header, category.column_keywords())
    }
}

fn header_words(header: &str) -> Vec<String> {
    header
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn header_matches(words: &[String], keywords: &[&str]) -> bool {
    words.iter().any(|w| {
        keywords
            .iter()
            .any(|k| w == k || (k.len() >= 4 && w.contains(k)))
    })
}

/// Splits `name: value | ...` into fields. Segments without a `name: ` prefix
/// have no header.
fn split_fields(text: &str) -> Vec<(Option<&str>, &str)> {
    text.split(FIELD_SEPARATOR)
        .map(|segment| match segment.split_once(": ") {
            Some((name, value)) if !name.is_empty() && !name.contains(':') => (Some(name), value),
            _ => (None, segment),
        })
        .collect()
}

/// Applies `rules` in order to every token of `record_text`. Unmatched tokens
/// pass through unchanged; runs of whitespace inside values collapse to one space.
pub fn apply_rules(record_text: &str, rules: &[NormalizationRule]) -> String {
    if rules.is_empty() {
        return record_text.to_string();
    }
    let fields = split_fields(record_text);
    let headers: Vec<Vec<String>> = fields
        .iter()
        .map(|(name, _)| name.map(header_words).unwrap_or_default())
        .collect();
    let informative = headers.iter().any(|words| {
        rules
            .iter()
            .filter(|r| r.needs_hint())
            .any(|r| header_matches(words, r.category.column_keywords()))
    });

    let mut out = String::with_capacity(record_text.len());
    for (i, ((name, value), header)) in fields.iter().zip(&headers).enumerate() {
        if i > 0 {
            out.push_str(FIELD_SEPARATOR);
        }
        if let Some(name) = name {
            out.push_str(name);
            out.push_str(": ");
        }
        let ctx = Context {
            header,
            pattern_only: !informative,
        };
        out.push_str(&normalize_value(value, name.unwrap_or(""), rules, ctx));
    }
    out
}

fn normalize_value(value: &str, column: &str, rules: &[NormalizationRule], ctx: Context) -> String {
    let mut tokens = merge_unit_tokens(value.split_whitespace().collect());
    for token in &mut tokens {
        for rule in rules {
            if matches!(rule.matcher, Matcher::Custom { .. }) {
                continue;
            }
            let (lead, core, trail) = strip_punct(token);
            if core.is_empty() {
                continue;
            }
            if let Some(rewritten) = rule.rewrite_token(core, ctx) {
                *token = format!("{lead}{rewritten}{trail}");
            }
        }
    }
    let mut joined = tokens.join(" ");
    let column = column.to_lowercase();
    for rule in rules {
        if let Matcher::Custom {
            pattern,
            replacement,
            columns,
        } = &rule.matcher
        {
            if columns.is_empty() || columns.iter().any(|c| column.contains(c.as_str())) {
                joined = pattern.replace_all(&joined, replacement.as_str()).into_owned();
            }
        }
    }
    joined
}

/// Joins `1.5 kg` style pairs into a single token.
fn merge_unit_tokens(raw: Vec<&str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let tok = raw[i];
        if i + 1 < raw.len() && decimal_re().is_match(tok) && is_unit_word(raw[i + 1]) {
            out.push(format!("{tok}{}", raw[i + 1]));
            i += 2;
        } else {
            out.push(tok.to_string());
            i += 1;
        }
    }
    out
}

fn is_unit_word(word: &str) -> bool {
    let (_, core, _) = strip_punct(word);
    let lower = core.to_ascii_lowercase();
    WEIGHT_UNITS.iter().chain(CAPACITY_UNITS.iter()).any(|(u, _)| *u == lower)
        || SECOND_SUFFIXES.contains(&lower.as_str())
}

fn strip_punct(token: &str) -> (&str, &str, &str) {
    const LEAD: &[char] = &['(', '[', '"', '\''];
    const TRAIL: &[char] = &[',', ';', ')', ']', '"', '\''];
    let trimmed_start = token.trim_start_matches(LEAD);
    let lead = &token[..token.len() - trimmed_start.len()];
    let core = trimmed_start.trim_end_matches(TRAIL);
    let trail = &trimmed_start[core.len()..];
    (lead, core, trail)
}

fn decimal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+(?:\.\d+)?$").unwrap())
}

fn quantity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d+(?:\.\d+)?)([A-Za-z]+)$").unwrap())
}

fn clock_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:(\d{1,2}):)?(\d{1,3}):([0-5]\d)$").unwrap())
}

/// `(unit, power of ten relative to the canonical unit)`
const WEIGHT_UNITS: [(&str, i32); 3] = [("mg", -3), ("g", 0), ("kg", 3)];
const CAPACITY_UNITS: [(&str, i32); 4] = [("ml", -3), ("cl", -2), ("dl", -1), ("l", 0)];
const SECOND_SUFFIXES: [&str; 5] = ["s", "sec", "secs", "second", "seconds"];

fn rewrite_unit(token: &str, units: &[(&str, i32)], canonical: &str) -> Option<String> {
    let caps = quantity_re().captures(token)?;
    let unit = caps[2].to_ascii_lowercase();
    let (_, shift) = units.iter().find(|(u, _)| *u == unit)?;
    let value = Decimal::parse(&caps[1])?.shift(*shift);
    Some(format!("{value}{canonical}"))
}

fn rewrite_duration(token: &str, hinted: bool, pattern_only: bool) -> Option<String> {
    if let Some(caps) = clock_re().captures(token) {
        let hours: u64 = caps.get(1).map_or(Some(0), |m| m.as_str().parse().ok())?;
        let minutes: u64 = caps[2].parse().ok()?;
        let seconds: u64 = caps[3].parse().ok()?;
        return Some(format!("{}sec", hours * 3600 + minutes * 60 + seconds));
    }
    if let Some(caps) = quantity_re().captures(token) {
        let suffix = caps[2].to_ascii_lowercase();
        if !SECOND_SUFFIXES.contains(&suffix.as_str()) {
            return None;
        }
        let secs = Decimal::parse(&caps[1])?.round_to_integer();
        let out = format!("{secs}sec");
        return (out != token).then_some(out);
    }
    if !hinted || !decimal_re().is_match(token) {
        return None;
    }
    if let Some((whole, frac)) = token.split_once('.') {
        // decimal minutes
        let minutes: f64 = format!("{whole}.{frac}").parse().ok()?;
        return Some(format!("{}sec", (minutes * 60.0).round() as u64));
    }
    let n: u64 = token.parse().ok()?;
    if n >= 10_000 {
        // milliseconds
        Some(format!("{}sec", (n + 500) / 1000))
    } else if !pattern_only {
        Some(format!("{n}sec"))
    } else {
        None
    }
}

/// Two-digit years pivot at 30: `00..=29` → 20xx, `30..=99` → 19xx.
fn rewrite_year(token: &str) -> Option<String> {
    if token.len() != 2 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let yy: u32 = token.parse().ok()?;
    let century = if yy < 30 { 2000 } else { 1900 };
    Some((century + yy).to_string())
}

fn rewrite_ordinal(token: &str) -> Option<String> {
    if token.is_empty() || token.len() > 3 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let n: u32 = token.parse().ok()?;
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    Some(format!("{n}{suffix}"))
}

const LANGUAGES: &[(&[&str], &str)] = &[
    (&["En", "Eng"], "English"),
    (&["Fr", "Fre", "Fra"], "French"),
    (&["De", "Ger", "Deu"], "German"),
    (&["Es", "Spa"], "Spanish"),
    (&["Ita"], "Italian"),
    (&["Ja", "Jp", "Jpn"], "Japanese"),
    (&["Zh", "Chi", "Zho"], "Chinese"),
    (&["Pt", "Por"], "Portuguese"),
    (&["Ru", "Rus"], "Russian"),
];

fn rewrite_language(token: &str, case_insensitive: bool) -> Option<String> {
    LANGUAGES.iter().find_map(|(codes, name)| {
        codes
            .iter()
            .any(|c| {
                if case_insensitive {
                    c.eq_ignore_ascii_case(token)
                } else {
                    *c == token
                }
            })
            .then(|| name.to_string())
    })
}

/// Exact non-negative decimal: `digits × 10^exponent`. Unit conversions are
/// pure shifts of the exponent, so no rounding is ever introduced.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Decimal {
    digits: String,
    exponent: i32,
}

impl Decimal {
    fn parse(s: &str) -> Option<Self> {
        let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
        if whole.is_empty() || !whole.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return None;
        }
        Some(Self {
            digits: format!("{whole}{frac}"),
            exponent: -(frac.len() as i32),
        })
    }

    fn shift(mut self, by: i32) -> Self {
        self.exponent += by;
        self
    }

    fn round_to_integer(&self) -> String {
        let s = self.to_string();
        match s.split_once('.') {
            None => s,
            Some((whole, frac)) => {
                let mut n: u128 = whole.parse().unwrap_or(0);
                if frac.as_bytes()[0] >= b'5' {
                    n += 1;
                }
                n.to_string()
            }
        }
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut digits = self.digits.clone();
        let (whole, frac) = if self.exponent >= 0 {
            digits.extend(std::iter::repeat_n('0', self.exponent as usize));
            (digits, String::new())
        } else {
            let point = self.exponent.unsigned_abs() as usize;
            if digits.len() <= point {
                let pad = "0".repeat(point - digits.len() + 1);
                digits.insert_str(0, &pad);
            }
            let split = digits.len() - point;
            (digits[..split].to_string(), digits[split..].to_string())
        };
        let whole = whole.trim_start_matches('0');
        let whole = if whole.is_empty() { "0" } else { whole };
        let frac = frac.trim_end_matches('0');
        if frac.is_empty() {
            f.write_str(whole)
        } else {
            write!(f, "{whole}.{frac}")
        }
    }
}
