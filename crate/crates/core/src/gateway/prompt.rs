use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::ingest::EmailDocument;
use crate::redflag::FlagCategory;

/// Appended to a body cut at `max_body_chars`.
pub const TRUNCATION_MARKER: &str = "\n[... body truncated ...]";

const PLACEHOLDERS: [&str; 4] = ["subject", "sender", "body", "categories"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub system_text: String,
    /// May use `{subject}`, `{sender}`, `{body}` and `{categories}`; `{body}`
    /// is required.
    pub user_text_pattern: String,
    pub output_contract_text: String,
    /// Body length limit in characters.
    pub max_body_chars: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_text: "You are an email security analyst. You decide whether a message is a \
                scam (phishing, advance-fee fraud, romance, investment, tech-support, shopping, \
                lottery, tax-authority impersonation or charity fraud) or legitimate, and you \
                list the concrete red flags you see, quoting the text that shows each one."
                .to_string(),
            user_text_pattern: "Analyze the following email.\n\n\
                Sender: {sender}\n\
                Subject: {subject}\n\n\
                --- BEGIN BODY ---\n{body}\n--- END BODY ---\n\n\
                Label every red flag with exactly one of these categories: {categories}."
                .to_string(),
            output_contract_text: "Respond with exactly one JSON object and nothing else, shaped \
                as {\"verdict\": \"scam\" or \"legitimate\", \"confidence\": a number from 0 to 1, \
                \"red_flags\": [{\"category\": \"<category>\", \"evidence\": \"<verbatim text>\"}]}."
                .to_string(),
            max_body_chars: 8000,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.user_text_pattern.contains("{body}") {
            return Err(ConfigError::Invalid(
                "prompt user_text_pattern must contain {body}".into(),
            ));
        }
        Ok(())
    }
}

fn sender_line(doc: &EmailDocument) -> String {
    let s = &doc.sender;
    match (s.display_name.is_empty(), s.address.is_empty()) {
        (true, true) => "(unknown)".to_string(),
        (true, false) => s.address.clone(),
        (false, true) => format!("\"{}\"", s.display_name),
        (false, false) => format!("\"{}\" <{}>", s.display_name, s.address),
    }
}

fn truncated_body(body: &str, max_chars: usize) -> String {
    match body.char_indices().nth(max_chars) {
        Some((cut, _)) => format!("{}{}", &body[..cut], TRUNCATION_MARKER),
        None => body.to_string(),
    }
}

/// Substitute the template in one left-to-right pass, so placeholder text
/// inside the email itself is never expanded.
pub fn build_prompt(doc: &EmailDocument, template: &PromptTemplate) -> String {
    let categories = FlagCategory::ALL
        .iter()
        .map(|c| c.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let value = |name: &str| -> String {
        match name {
            "subject" => doc.subject.clone(),
            "sender" => sender_line(doc),
            "body" => truncated_body(&doc.body, template.max_body_chars),
            "categories" => categories.clone(),
            _ => unreachable!("only known placeholders are expanded"),
        }
    };

    let pattern = template.user_text_pattern.as_str();
    let mut out = String::with_capacity(pattern.len() + doc.body.len());
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name = after.find('}').map(|close| &after[..close]);
        match name {
            Some(name) if PLACEHOLDERS.contains(&name) => {
                out.push_str(&value(name));
                rest = &after[name.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);

    if !template.output_contract_text.is_empty() {
        out.push_str("\n\n");
        out.push_str(&template.output_contract_text);
    }
    out
}
