//! Email ingestion: RFC 5322 / MIME parsing, text normalization, URL
//! extraction, greeting and closing detection, and tokenization.
//!
//! Everything here is pure. An [`EmailDocument`] is immutable once built and
//! can be shared freely between threads.

use std::sync::OnceLock;

use mailparse::{MailAddr, MailHeaderMap, ParsedMail};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Number of leading lines searched for a salutation, and trailing lines
/// searched for a sign-off.
pub const EDGE_LINES: usize = 5;

/// Maximum MIME nesting depth walked when looking for a text part.
const MAX_MIME_DEPTH: usize = 2;

/// Two-label public suffixes under which registration happens one level
/// deeper (`inha.ac.kr`, not `ac.kr`).
const MULTI_LABEL_SUFFIXES: &[&str] = &[
    "ac.jp", "ac.kr", "ac.nz", "ac.uk", "co.in", "co.jp", "co.kr", "co.nz", "co.uk", "co.za", "com.au",
    "com.br", "com.cn", "com.hk", "com.mx", "com.sg", "com.tr", "com.tw", "edu.au", "go.kr", "gov.au",
    "gov.uk", "ne.jp", "ne.kr", "net.au", "or.jp", "or.kr", "org.au", "org.uk", "re.kr",
];

/// Top-level domains accepted for scheme-less hosts that do not start with
/// `www` and carry no path.
const BARE_HOST_TLDS: &[&str] = &[
    "biz", "br", "ca", "cc", "cn", "co", "com", "de", "edu", "es", "eu", "example", "fr", "gov", "in",
    "info", "invalid", "io", "it", "jp", "kr", "live", "me", "mil", "net", "nl", "online", "org", "ru",
    "shop", "site", "test", "top", "tv", "uk", "us", "xyz",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
}

/// A located piece of text. `offset` is a byte offset into the normalized body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub text: String,
    pub offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderIdentity {
    pub display_name: String,
    pub address: String,
    pub local_part: String,
    /// Lowercased.
    pub domain: String,
    /// Set when the address could not be split into local part and domain.
    pub malformed: bool,
}

impl SenderIdentity {
    /// Identity for a message with no usable sender.
    pub fn unknown() -> Self {
        Self {
            malformed: true,
            ..Self::default()
        }
    }

    pub fn from_parts(display_name: &str, address: &str) -> Self {
        let display_name = display_name.trim().trim_matches('"').trim().to_string();
        let address = address.trim().trim_matches(|c| c == '<' || c == '>').trim();
        match address.rsplit_once('@') {
            Some((local, domain))
                if !local.is_empty()
                    && !domain.is_empty()
                    && !domain.contains(char::is_whitespace)
                    && !local.contains(char::is_whitespace) =>
            {
                let domain = domain.to_lowercase();
                Self {
                    display_name,
                    address: format!("{local}@{domain}"),
                    local_part: local.to_string(),
                    domain,
                    malformed: false,
                }
            }
            _ => Self {
                display_name,
                address: address.to_string(),
                local_part: String::new(),
                domain: String::new(),
                malformed: true,
            },
        }
    }

    /// Parse a `From:`-style header value.
    pub fn parse(value: &str) -> Self {
        if value.trim().is_empty() {
            return Self::unknown();
        }
        if let Ok(list) = mailparse::addrparse(value) {
            if let Some(MailAddr::Single(info)) = list.iter().next() {
                return Self::from_parts(info.display_name.as_deref().unwrap_or(""), &info.addr);
            }
        }
        // Fall back to a hand split on `Name <addr>`.
        match (value.rfind('<'), value.rfind('>')) {
            (Some(open), Some(close)) if open < close => {
                Self::from_parts(&value[..open], &value[open + 1..close])
            }
            _ => Self::from_parts("", value),
        }
    }

    pub fn registrable_domain(&self) -> Option<String> {
        if self.malformed {
            None
        } else {
            Some(registrable_domain(&self.domain))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedUrl {
    /// Exact matched substring of the body.
    pub raw: String,
    pub host: String,
    pub registrable_domain: String,
    pub path: String,
    pub source_offset: usize,
}

impl ExtractedUrl {
    pub fn end_offset(&self) -> usize {
        self.source_offset + self.raw.len()
    }

    /// `www` glued directly onto the next label, e.g. `wwwthefitdollar.com`.
    pub fn has_glued_www(&self) -> bool {
        glued_www(&self.host)
    }

    pub fn is_ip_host(&self) -> bool {
        is_ipv4(&self.host)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmailDocument {
    pub sender: SenderIdentity,
    pub reply_to: Option<SenderIdentity>,
    pub subject: String,
    pub body: String,
    pub urls: Vec<ExtractedUrl>,
    pub salutation: Option<TextSpan>,
    pub signoff: Option<TextSpan>,
    pub tokens: Vec<String>,
    pub raw_size_bytes: usize,
}

impl EmailDocument {
    fn from_parts(
        sender: SenderIdentity,
        reply_to: Option<SenderIdentity>,
        subject: String,
        body: &str,
        raw_size_bytes: usize,
    ) -> Self {
        let body = normalize(body);
        Self {
            sender,
            reply_to,
            subject: normalize(&subject).replace('\n', " "),
            urls: extract_urls(&body),
            salutation: extract_salutation(&body),
            signoff: extract_signoff(&body),
            tokens: tokenize(&body),
            raw_size_bytes,
            body,
        }
    }

    pub fn lowercase_tokens(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.to_lowercase()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty() && self.subject.is_empty() && self.sender.address.is_empty()
    }
}

/// Parse a raw RFC 5322 message.
pub fn parse_email(raw: &[u8]) -> Result<EmailDocument, IngestError> {
    if raw.is_empty() {
        return Err(IngestError::MalformedMessage("empty input".into()));
    }
    if !starts_with_header_line(raw) {
        return Err(IngestError::MalformedMessage(
            "no recognizable header block".into(),
        ));
    }
    let mail = mailparse::parse_mail(raw).map_err(|e| IngestError::MalformedMessage(e.to_string()))?;

    let headers = mail.get_headers();
    let sender = headers
        .get_first_value("From")
        .map(|v| SenderIdentity::parse(&v))
        .unwrap_or_else(SenderIdentity::unknown);
    let reply_to = headers
        .get_first_value("Reply-To")
        .map(|v| SenderIdentity::parse(&v));
    let subject = headers.get_first_value("Subject").unwrap_or_default();
    let body = visible_text(&mail)?;

    Ok(EmailDocument::from_parts(
        sender,
        reply_to,
        subject,
        &body,
        raw.len(),
    ))
}

/// Build a document from bare text with no headers. Never fails.
pub fn parse_plaintext(text: &str) -> EmailDocument {
    EmailDocument::from_parts(SenderIdentity::unknown(), None, String::new(), text, text.len())
}

/// Parse as a message when it looks like one, otherwise as bare text.
pub fn parse_any(raw: &[u8]) -> EmailDocument {
    parse_email(raw).unwrap_or_else(|_| parse_plaintext(&decode_bytes(raw)))
}

fn starts_with_header_line(raw: &[u8]) -> bool {
    let first = raw
        .split(|&b| b == b'\n')
        .find(|line| !line.iter().all(|b| b.is_ascii_whitespace()));
    let Some(line) = first else {
        return false;
    };
    let Some(colon) = line.iter().position(|&b| b == b':') else {
        return false;
    };
    colon > 0
        && line[..colon]
            .iter()
            .all(|&b| (33..=126).contains(&b) && b != b':')
}

/// UTF-8 with a Latin-1 fallback.
fn decode_bytes(raw: &[u8]) -> String {
    match std::str::from_utf8(raw) {
        Ok(s) => s.to_string(),
        Err(_) => raw.iter().map(|&b| b as char).collect(),
    }
}

fn visible_text(mail: &ParsedMail<'_>) -> Result<String, IngestError> {
    if let Some(text) = find_part(mail, "text/plain", 0) {
        return Ok(text);
    }
    if let Some(html) = find_part(mail, "text/html", 0) {
        return Ok(strip_markup(&html));
    }
    if mail.subparts.is_empty() {
        let body = match mail.get_body() {
            Ok(b) => b,
            Err(_) => decode_bytes(mail.get_body_raw().unwrap_or_default().as_slice()),
        };
        return Ok(body);
    }
    Ok(String::new())
}

fn find_part(mail: &ParsedMail<'_>, mime: &str, depth: usize) -> Option<String> {
    if mail.subparts.is_empty() {
        if mail.ctype.mimetype.eq_ignore_ascii_case(mime) {
            return Some(match mail.get_body() {
                Ok(b) => b,
                Err(_) => decode_bytes(&mail.get_body_raw().ok()?),
            });
        }
        return None;
    }
    if depth >= MAX_MIME_DEPTH {
        return None;
    }
    mail.subparts
        .iter()
        .find_map(|part| find_part(part, mime, depth + 1))
}

/// Strip tags from a markup-only body and decode entities.
pub fn strip_markup(html: &str) -> String {
    static HIDDEN: OnceLock<Regex> = OnceLock::new();
    static BREAKS: OnceLock<Regex> = OnceLock::new();
    static TAGS: OnceLock<Regex> = OnceLock::new();
    let hidden = HIDDEN.get_or_init(|| {
        Regex::new(r"(?is)<(script|style|head)\b.*?</(script|style|head)\s*>|<!--.*?-->").unwrap()
    });
    let breaks = BREAKS
        .get_or_init(|| Regex::new(r"(?i)<br\s*/?>|</(p|div|tr|li|h[1-6]|table|blockquote)\s*>").unwrap());
    let tags = TAGS.get_or_init(|| Regex::new(r"(?s)<[^>]*>").unwrap());

    let text = hidden.replace_all(html, "");
    let text = breaks.replace_all(&text, "\n");
    let text = tags.replace_all(&text, "");
    html_escape::decode_html_entities(&text).into_owned()
}

/// Canonical composition, LF line endings, runs of blanks collapsed to one
/// space, trailing blanks trimmed, trailing blank lines dropped.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let unified = composed.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    for (i, line) in unified.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let mut pending_blank = false;
        for c in line.chars() {
            if c == ' ' || c == '\t' || c == '\u{a0}' {
                pending_blank = true;
            } else {
                if pending_blank {
                    out.push(' ');
                    pending_blank = false;
                }
                out.push(c);
            }
        }
    }
    let trimmed = out.trim_end().len();
    out.truncate(trimmed);
    out
}

/// Registrable domain: last two labels, or three under a known two-label
/// suffix. IP literals are returned unchanged.
pub fn registrable_domain(host: &str) -> String {
    let host = host.trim_end_matches('.').to_lowercase();
    if is_ipv4(&host) {
        return host;
    }
    let labels: Vec<&str> = host.split('.').collect();
    if labels.len() <= 2 {
        return host;
    }
    let last_two = labels[labels.len() - 2..].join(".");
    let keep = if MULTI_LABEL_SUFFIXES.contains(&last_two.as_str()) {
        3
    } else {
        2
    };
    labels[labels.len() - keep..].join(".")
}

pub(crate) fn is_ipv4(host: &str) -> bool {
    let parts: Vec<&str> = host.split('.').collect();
    parts.len() == 4
        && parts
            .iter()
            .all(|p| !p.is_empty() && p.len() <= 3 && p.parse::<u8>().is_ok())
}

pub(crate) fn glued_www(host: &str) -> bool {
    let bytes = host.as_bytes();
    bytes.len() > 3 && bytes[..3].eq_ignore_ascii_case(b"www") && bytes[3].is_ascii_alphabetic()
}

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?ix)
            (?P<scheme>(?:https?|ftp)://[^\s<>"'`]+)
            |
            (?P<bare>
                (?:[a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?\.)+[a-z]{2,24}
                (?::\d{1,5})?
                (?:[/?\#][^\s<>"'`]*)?
            )
            "#,
        )
        .unwrap()
    })
}

fn trim_url_tail(candidate: &str) -> &str {
    let mut s = candidate;
    loop {
        let Some(last) = s.chars().last() else {
            return s;
        };
        let strip = match last {
            '.' | ',' | ';' | ':' | '!' | '?' | '\'' | '"' | '*' => true,
            ')' => s.matches('(').count() < s.matches(')').count(),
            ']' => s.matches('[').count() < s.matches(']').count(),
            '}' => s.matches('{').count() < s.matches('}').count(),
            _ => false,
        };
        if !strip {
            return s;
        }
        s = &s[..s.len() - last.len_utf8()];
    }
}

/// Split a URL span into (host, path).
fn split_host_path(span: &str) -> (String, String) {
    let rest = match span.find("://") {
        Some(i) => &span[i + 3..],
        None => span,
    };
    let end = rest.find(['/', '?', '#']).unwrap_or(rest.len());
    let authority = &rest[..end];
    let path = rest[end..].to_string();
    let host_port = authority.rsplit('@').next().unwrap_or(authority);
    let host = match host_port.rfind(':') {
        Some(i) if host_port[i + 1..].chars().all(|c| c.is_ascii_digit()) => &host_port[..i],
        _ => host_port,
    };
    (host.trim_end_matches('.').to_lowercase(), path)
}

/// Find URLs: scheme-prefixed, bare dotted hosts, and glued-`www` hosts.
/// Offsets are strictly ascending and matches never overlap.
pub fn extract_urls(body: &str) -> Vec<ExtractedUrl> {
    let mut urls = Vec::new();
    for caps in url_regex().captures_iter(body) {
        let (m, is_scheme) = match (caps.name("scheme"), caps.name("bare")) {
            (Some(m), _) => (m, true),
            (None, Some(m)) => (m, false),
            _ => continue,
        };
        let start = m.start();
        // Preceded by a word character, '@' (mail address) or '.': part of
        // something larger.
        if let Some(prev) = body[..start].chars().last() {
            if prev == '@' || prev == '.' || prev == '_' || prev.is_alphanumeric() {
                continue;
            }
        }
        let raw = trim_url_tail(m.as_str());
        let (host, path) = split_host_path(raw);
        if host.is_empty() || !host.contains('.') {
            continue;
        }
        if !is_scheme {
            // An '@' right after the match means we matched the local part
            // of an address.
            if body[m.end()..].starts_with('@') {
                continue;
            }
            let tld_source = raw[..raw.find(['/', '?', '#', ':']).unwrap_or(raw.len())]
                .rsplit('.')
                .next()
                .unwrap_or("");
            let tld = tld_source.to_lowercase();
            let consistent_case = tld_source == tld || tld_source == tld.to_uppercase();
            let accepted = glued_www(&host)
                || host.starts_with("www.")
                || (consistent_case && (BARE_HOST_TLDS.contains(&tld.as_str()) || !path.is_empty()));
            if !accepted || is_ipv4_like_version(&host, &path) {
                continue;
            }
        }
        urls.push(ExtractedUrl {
            raw: raw.to_string(),
            registrable_domain: registrable_domain(&host),
            host,
            path,
            source_offset: start,
        });
    }
    urls
}

// Bare dotted numbers such as "1.2.3.4" are only links with a path.
fn is_ipv4_like_version(host: &str, path: &str) -> bool {
    host.split('.').all(|l| l.chars().all(|c| c.is_ascii_digit())) && path.is_empty()
}

/// Iterate lines with their byte offsets.
fn lines_with_offsets(body: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    body.split('\n').map(move |line| {
        let start = offset;
        offset += line.len() + 1;
        (start, line)
    })
}

fn greeting_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^(dear|hello|hi|greetings)\b").unwrap())
}

fn closing_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^(?:sincerely(?:\s+yours)?|yours\s+(?:sincerely|truly|faithfully)|(?:best|kind|warm|warmest)\s+regards|regards|best(?:\s+wishes)?|many\s+thanks|thanks|thank\s+you|cheers)\b\s*(?:[,.!\-:]\s*(?P<rest>.*))?$",
        )
        .unwrap()
    })
}

/// First line among the first five that opens with a greeting word, with
/// trailing punctuation removed.
pub fn extract_salutation(body: &str) -> Option<TextSpan> {
    lines_with_offsets(body)
        .take(EDGE_LINES)
        .find_map(|(offset, line)| {
            let lead = line.len() - line.trim_start().len();
            let trimmed = line.trim();
            if !greeting_regex().is_match(trimmed) {
                return None;
            }
            // The greeting ends at the first comma, colon or exclamation mark.
            let head = match trimmed.find([',', ':', '!', ';']) {
                Some(i) => &trimmed[..i],
                None => trimmed,
            };
            let text = head.trim_end_matches(['.', ' ']);
            Some(TextSpan {
                text: text.to_string(),
                offset: offset + lead,
            })
        })
}

/// Text after the final closing word within the last five lines.
pub fn extract_signoff(body: &str) -> Option<TextSpan> {
    let lines: Vec<(usize, &str)> = lines_with_offsets(body).collect();
    let first_candidate = lines.len().saturating_sub(EDGE_LINES);
    let (idx, caps_rest) =
        lines
            .iter()
            .enumerate()
            .skip(first_candidate)
            .rev()
            .find_map(|(i, (_, line))| {
                closing_regex()
                    .captures(line.trim())
                    .map(|c| (i, c.name("rest").map(|m| m.as_str().to_string())))
            })?;

    let (line_offset, line) = lines[idx];
    let mut start: Option<usize> = None;
    if let Some(rest) = caps_rest.filter(|r| !r.trim().is_empty()) {
        // Rest of the closing line; locate it verbatim.
        let rest = rest.trim();
        if let Some(pos) = line.rfind(rest) {
            start = Some(line_offset + pos);
        }
    }
    if start.is_none() {
        start = lines[idx + 1..]
            .iter()
            .find(|(_, l)| !l.trim().is_empty())
            .map(|(off, l)| off + (l.len() - l.trim_start().len()));
    }
    let start = start?;
    let text = body[start..].trim_end();
    if text.is_empty() {
        return None;
    }
    Some(TextSpan {
        text: text.to_string(),
        offset: start,
    })
}

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201c}'
                | '\u{201d}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{00ab}'
                | '\u{00bb}'
                | '\u{00a1}'
                | '\u{00bf}'
        )
}

fn is_sentence_punct(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ',' | ';' | ':')
}

/// Whitespace tokenization. Leading and trailing punctuation become separate
/// one-character tokens, and sentence punctuation glued between a letter and
/// an uppercase letter (`access.Some`) is split out.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && is_split_punct(chars[lo]) {
            tokens.push(chars[lo].to_string());
            lo += 1;
        }
        let mut trailing = Vec::new();
        while hi > lo && is_split_punct(chars[hi - 1]) {
            trailing.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        let mut word = String::new();
        let mut i = lo;
        while i < hi {
            let c = chars[i];
            let glued_boundary = is_sentence_punct(c)
                && i > lo
                && i + 1 < hi
                && chars[i - 1].is_alphabetic()
                && chars[i + 1].is_uppercase();
            if glued_boundary {
                tokens.push(std::mem::take(&mut word));
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
            i += 1;
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}
