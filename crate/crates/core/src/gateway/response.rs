use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::GatewayError;
use crate::corpus::Label;
use crate::redflag::FlagCategory;

/// Candidate `{` positions tried before giving up.
const MAX_OBJECT_CANDIDATES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmFlag {
    pub category: FlagCategory,
    #[serde(default)]
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmVerdict {
    pub verdict: Label,
    /// In [0, 1].
    pub confidence: f64,
    pub red_flags: Vec<LlmFlag>,
    pub raw_response: String,
    /// Set when the structured answer could not be read and the keyword
    /// fallback produced this verdict.
    pub degraded: bool,
    /// Flags whose category was not in our vocabulary.
    #[serde(default)]
    pub dropped_flags: usize,
}

impl LlmVerdict {
    /// Verdict from free prose: scam iff it mentions "scam" or "phishing".
    pub fn from_keywords(raw: &str) -> Self {
        let lower = raw.to_lowercase();
        let verdict = if lower.contains("scam") || lower.contains("phishing") {
            Label::Scam
        } else {
            Label::Legitimate
        };
        Self {
            verdict,
            confidence: 0.5,
            red_flags: Vec::new(),
            raw_response: raw.to_string(),
            degraded: true,
            dropped_flags: 0,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} ({:.2}{})",
            self.verdict,
            self.confidence,
            if self.degraded { ", degraded" } else { "" }
        )
    }
}

fn parse_label(value: &Value) -> Option<Label> {
    let text = value.as_str()?.trim().to_lowercase();
    match text.as_str() {
        "scam" | "phishing" | "fraud" | "spam" | "malicious" => Some(Label::Scam),
        "legitimate" | "legit" | "safe" | "ham" | "benign" | "not_scam" | "not scam" => {
            Some(Label::Legitimate)
        }
        _ => None,
    }
}

fn parse_confidence(value: Option<&Value>) -> f64 {
    let raw = match value {
        Some(Value::Number(n)) => n.as_f64(),
        Some(Value::String(s)) => s.trim().trim_end_matches('%').trim().parse::<f64>().ok(),
        _ => None,
    };
    match raw {
        Some(c) if c.is_finite() => c.clamp(0.0, 1.0),
        _ => 0.5,
    }
}

fn parse_flags(value: Option<&Value>) -> (Vec<LlmFlag>, usize) {
    let Some(Value::Array(items)) = value else {
        return (Vec::new(), 0);
    };
    let mut flags = Vec::new();
    let mut dropped = 0;
    for item in items {
        let (category, evidence) = match item {
            Value::String(s) => (Some(s.as_str()), String::new()),
            Value::Object(obj) => (
                obj.get("category").and_then(Value::as_str),
                obj.get("evidence")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
            ),
            _ => (None, String::new()),
        };
        match category.map(str::parse::<FlagCategory>) {
            Some(Ok(category)) => flags.push(LlmFlag { category, evidence }),
            other => {
                log::warn!("dropping red flag with unknown category: {other:?}");
                dropped += 1;
            }
        }
    }
    (flags, dropped)
}

fn verdict_from_object(obj: &Map<String, Value>, raw: &str) -> Option<LlmVerdict> {
    let verdict = parse_label(obj.get("verdict")?)?;
    let (red_flags, dropped_flags) = parse_flags(obj.get("red_flags").or_else(|| obj.get("flags")));
    Some(LlmVerdict {
        verdict,
        confidence: parse_confidence(obj.get("confidence")),
        red_flags,
        raw_response: raw.to_string(),
        degraded: false,
        dropped_flags,
    })
}

/// Read the first JSON object carrying a recognizable `verdict` field,
/// tolerating prose and code fences around it.
pub fn parse_llm_response(raw: &str) -> Result<LlmVerdict, GatewayError> {
    for (start, _) in raw.match_indices('{').take(MAX_OBJECT_CANDIDATES) {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            if let Some(verdict) = verdict_from_object(&obj, raw) {
                return Ok(verdict);
            }
        }
    }
    Err(GatewayError::UnparseableResponse(
        "no JSON object with a verdict field".into(),
    ))
}

/// Structured parse, falling back to the keyword rule.
pub fn parse_or_fallback(raw: &str) -> LlmVerdict {
    parse_llm_response(raw).unwrap_or_else(|_| LlmVerdict::from_keywords(raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    const STRUCTURED: &str = r#"{"verdict":"scam","confidence":0.95,"red_flags":[{"category":"suspicious_link","evidence":"wwwthefitdollar.com"}]}"#;

    #[test]
    fn structured_object() {
        let v = parse_llm_response(STRUCTURED).unwrap();
        assert_eq!(v.verdict, Label::Scam);
        assert_eq!(v.confidence, 0.95);
        assert_eq!(
            v.red_flags,
            vec![LlmFlag {
                category: FlagCategory::SuspiciousLink,
                evidence: "wwwthefitdollar.com".into()
            }]
        );
        assert!(!v.degraded);
        assert_eq!(v.raw_response, STRUCTURED);
    }

    #[test]
    fn fenced_object_with_prose() {
        let wrapped = format!("Here is my analysis:\n```json\n{STRUCTURED}\n```\nStay safe!");
        let fenced = parse_llm_response(&wrapped).unwrap();
        let plain = parse_llm_response(STRUCTURED).unwrap();
        assert_eq!(
            LlmVerdict {
                raw_response: String::new(),
                ..fenced
            },
            LlmVerdict {
                raw_response: String::new(),
                ..plain
            }
        );
    }

    #[test]
    fn prose_only_is_unparseable() {
        assert!(matches!(
            parse_llm_response("I believe this is fine."),
            Err(GatewayError::UnparseableResponse(_))
        ));
        let v = parse_or_fallback("This looks like a Phishing attempt.");
        assert!(v.degraded);
        assert_eq!(v.verdict, Label::Scam);
        assert_eq!(v.confidence, 0.5);
        assert_eq!(
            parse_or_fallback("I believe this is fine.").verdict,
            Label::Legitimate
        );
    }

    #[test]
    fn unknown_categories_are_dropped_and_confidence_clamped() {
        let raw = r#"{"verdict":"Legitimate","confidence":7,"red_flags":["urgency_fear",{"category":"bad_vibes"},3]}"#;
        let v = parse_llm_response(raw).unwrap();
        assert_eq!(v.verdict, Label::Legitimate);
        assert_eq!(v.confidence, 1.0);
        assert_eq!(v.red_flags.len(), 1);
        assert_eq!(v.dropped_flags, 2);
    }

    #[test]
    fn nested_and_decoy_objects() {
        let raw = r#"{"note": "x"} then {"result": {"verdict": "scam", "confidence": "0.8"}}"#;
        let v = parse_llm_response(raw).unwrap();
        assert_eq!(v.verdict, Label::Scam);
        assert_eq!(v.confidence, 0.8);
        // Unrecognized verdict values do not count.
        assert!(parse_llm_response(r#"{"verdict": "maybe"}"#).is_err());
    }
}
