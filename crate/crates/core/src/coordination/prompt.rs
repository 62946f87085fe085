use serde::{Deserialize, Serialize};

use super::rules::NormalizationRule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Formatting guidance from samples only.
    #[default]
    Simple,
    /// Samples plus every conversion rule spelled out.
    Difficult,
}

impl std::str::FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Self::Simple),
            "difficult" => Ok(Self::Difficult),
            other => Err(Error::InvalidArgument(format!("unknown prompt style {other:?}"))),
        }
    }
}

/// System text takes `{rules}` and `{samples}`; per-record text takes `{record}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub style: PromptStyle,
    pub system_text: String,
    pub per_record_text: String,
}

const SIMPLE_SYSTEM: &str = "\
You clean records collected from several data sources so that records describing \
the same real-world entity read the same way.
The records look like these samples:
{samples}

For every input line, rewrite the record with units, time formats and \
abbreviations standardized. Keep the `name: value | name: value` layout and every \
field name. Output exactly one line per input line, in the same order, and nothing else.";

const DIFFICULT_SYSTEM: &str = "\
You clean records collected from several data sources so that records describing \
the same real-world entity read the same way.
Apply these conversion rules to every field they concern:
{rules}

The records look like these samples:
{samples}

For every input line, rewrite the record applying the rules above. Keep the \
`name: value | name: value` layout and every field name. Do not invent values for \
empty fields. Output exactly one line per input line, in the same order, and nothing else.";

impl PromptTemplate {
    pub fn for_style(style: PromptStyle) -> Self {
        let system_text = match style {
            PromptStyle::Simple => SIMPLE_SYSTEM,
            PromptStyle::Difficult => DIFFICULT_SYSTEM,
        };
        Self {
            style,
            system_text: system_text.to_string(),
            per_record_text: "{record}".to_string(),
        }
    }

    /// Renders the user message for one batch: one line per record.
    pub fn render_records<S: AsRef<str>>(&self, records: &[S]) -> Result<String> {
        let mut lines = Vec::with_capacity(records.len());
        for record in records {
            lines.push(render(&self.per_record_text, &[("record", record.as_ref())])?);
        }
        Ok(lines.join("\n"))
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::for_style(PromptStyle::Simple)
    }
}

/// Renders the system prompt from rule instructions and sample record lines.
pub fn build_prompt<S: AsRef<str>>(
    template: &PromptTemplate,
    rules: &[NormalizationRule],
    samples: &[S],
) -> Result<String> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("prompt needs at least one sample".into()));
    }
    let rules_text = rules
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}. [{}] {}", i + 1, r.category, r.instruction))
        .collect::<Vec<_>>()
        .join("\n");
    let samples_text = samples
        .iter()
        .map(|s| s.as_ref())
        .collect::<Vec<_>>()
        .join("\n");
    render(
        &template.system_text,
        &[("rules", &rules_text), ("samples", &samples_text)],
    )
}

/// Single-pass substitution of `{name}` placeholders in `template`.
/// Substituted values are never rescanned.
fn render(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .filter(|&c| after[..c].chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') && c > 0);
        match close {
            Some(close) => {
                let name = &after[..close];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::UnresolvedPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
