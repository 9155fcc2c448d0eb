//! Deterministic red-flag detectors and the noisy-or heuristic score.
//!
//! Each detector emits [`RedFlag`]s that carry the verbatim evidence they
//! matched, so a reviewer can see exactly why a message scored the way it did.
//! Lexicons, brand profiles and weights all live in [`DetectorConfig`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::ingest::{extract_urls, EmailDocument, ExtractedUrl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagCategory {
    SenderBrandMismatch,
    SenderNameMismatch,
    SuspiciousLink,
    GrammarSpelling,
    UrgencyFear,
    UnusualRequest,
    GenericSalutation,
    GenericSignoff,
    NoReplyInstruction,
    LackOfPersonalization,
}

impl FlagCategory {
    pub const ALL: [FlagCategory; 10] = [
        FlagCategory::SenderBrandMismatch,
        FlagCategory::SenderNameMismatch,
        FlagCategory::SuspiciousLink,
        FlagCategory::GrammarSpelling,
        FlagCategory::UrgencyFear,
        FlagCategory::UnusualRequest,
        FlagCategory::GenericSalutation,
        FlagCategory::GenericSignoff,
        FlagCategory::NoReplyInstruction,
        FlagCategory::LackOfPersonalization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FlagCategory::SenderBrandMismatch => "sender_brand_mismatch",
            FlagCategory::SenderNameMismatch => "sender_name_mismatch",
            FlagCategory::SuspiciousLink => "suspicious_link",
            FlagCategory::GrammarSpelling => "grammar_spelling",
            FlagCategory::UrgencyFear => "urgency_fear",
            FlagCategory::UnusualRequest => "unusual_request",
            FlagCategory::GenericSalutation => "generic_salutation",
            FlagCategory::GenericSignoff => "generic_signoff",
            FlagCategory::NoReplyInstruction => "no_reply_instruction",
            FlagCategory::LackOfPersonalization => "lack_of_personalization",
        }
    }
}

impl fmt::Display for FlagCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownCategory(pub String);

impl FromStr for FlagCategory {
    type Err = UnknownCategory;

    /// Accepts the snake_case names, tolerating case, spaces and hyphens.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        FlagCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedFlag {
    pub category: FlagCategory,
    pub evidence: String,
    /// Byte offset into the normalized body; `None` for header evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrandProfile {
    pub brand_name: String,
    pub legitimate_domains: BTreeSet<String>,
}

impl BrandProfile {
    pub fn new<I, S>(brand_name: &str, domains: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            brand_name: brand_name.to_string(),
            legitimate_domains: domains.into_iter().map(|d| d.as_ref().to_lowercase()).collect(),
        }
    }

    /// Brand name lowercased with everything but letters and digits removed.
    pub fn token(&self) -> String {
        self.brand_name
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect()
    }

    pub fn owns(&self, registrable_domain: &str) -> bool {
        self.legitimate_domains.contains(registrable_domain)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.brand_name.trim().is_empty() {
            return Err(ConfigError::Invalid("brand with empty name".into()));
        }
        if self.legitimate_domains.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "brand {:?} has no legitimate domains",
                self.brand_name
            )));
        }
        if let Some(d) = self
            .legitimate_domains
            .iter()
            .find(|d| d.chars().any(char::is_uppercase) || d.is_empty())
        {
            return Err(ConfigError::Invalid(format!(
                "brand {:?}: domain {d:?} must be non-empty lowercase",
                self.brand_name
            )));
        }
        Ok(())
    }
}

pub fn default_brands() -> Vec<BrandProfile> {
    vec![
        BrandProfile::new("Rackspace", ["rackspace.com", "rackspace.co.uk"]),
        BrandProfile::new("PayPal", ["paypal.com", "paypal.me"]),
        BrandProfile::new(
            "Microsoft",
            ["microsoft.com", "outlook.com", "live.com", "office.com"],
        ),
        BrandProfile::new("Apple", ["apple.com", "icloud.com"]),
        BrandProfile::new("Amazon", ["amazon.com", "amazon.co.uk", "amazon.de"]),
        BrandProfile::new("Google", ["google.com", "gmail.com", "youtube.com"]),
        BrandProfile::new("Netflix", ["netflix.com"]),
        BrandProfile::new("DHL", ["dhl.com", "dhl.de"]),
        BrandProfile::new("FedEx", ["fedex.com"]),
        BrandProfile::new("Bank of America", ["bankofamerica.com", "bofa.com"]),
        BrandProfile::new("Wells Fargo", ["wellsfargo.com"]),
        BrandProfile::new("IRS", ["irs.gov"]),
    ]
}

/// Per-category weights in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryWeights {
    pub sender_brand_mismatch: f64,
    pub sender_name_mismatch: f64,
    pub suspicious_link: f64,
    pub grammar_spelling: f64,
    pub urgency_fear: f64,
    pub unusual_request: f64,
    pub generic_salutation: f64,
    pub generic_signoff: f64,
    pub no_reply_instruction: f64,
    pub lack_of_personalization: f64,
}

impl Default for CategoryWeights {
    fn default() -> Self {
        Self {
            sender_brand_mismatch: 0.6,
            sender_name_mismatch: 0.4,
            suspicious_link: 0.6,
            grammar_spelling: 0.3,
            urgency_fear: 0.3,
            unusual_request: 0.4,
            generic_salutation: 0.2,
            generic_signoff: 0.2,
            no_reply_instruction: 0.3,
            lack_of_personalization: 0.15,
        }
    }
}

impl CategoryWeights {
    pub fn get(&self, category: FlagCategory) -> f64 {
        match category {
            FlagCategory::SenderBrandMismatch => self.sender_brand_mismatch,
            FlagCategory::SenderNameMismatch => self.sender_name_mismatch,
            FlagCategory::SuspiciousLink => self.suspicious_link,
            FlagCategory::GrammarSpelling => self.grammar_spelling,
            FlagCategory::UrgencyFear => self.urgency_fear,
            FlagCategory::UnusualRequest => self.unusual_request,
            FlagCategory::GenericSalutation => self.generic_salutation,
            FlagCategory::GenericSignoff => self.generic_signoff,
            FlagCategory::NoReplyInstruction => self.no_reply_instruction,
            FlagCategory::LackOfPersonalization => self.lack_of_personalization,
        }
    }
}

/// Link sub-rules, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkRule {
    /// Claimed brand present and the link leaves its domains.
    OffBrandDomain,
    GluedWww,
    IpHost,
    Typosquat,
    /// Brand token inside someone else's registrable domain.
    BrandInForeignDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkRuleWeights {
    pub off_brand_domain: f64,
    pub glued_www: f64,
    pub ip_host: f64,
    pub typosquat: f64,
    pub brand_in_foreign_domain: f64,
    /// Maximum edit distance for the lookalike rule.
    pub typosquat_max_distance: usize,
    /// Brand domains shorter than this are skipped by the lookalike rule.
    pub typosquat_min_length: usize,
    /// Brand tokens shorter than this are skipped by the substring rule.
    pub brand_token_min_length: usize,
}

impl Default for LinkRuleWeights {
    fn default() -> Self {
        Self {
            off_brand_domain: 0.6,
            glued_www: 0.6,
            ip_host: 0.6,
            typosquat: 0.6,
            brand_in_foreign_domain: 0.6,
            typosquat_max_distance: 2,
            typosquat_min_length: 6,
            brand_token_min_length: 4,
        }
    }
}

impl LinkRuleWeights {
    pub fn get(&self, rule: LinkRule) -> f64 {
        match rule {
            LinkRule::OffBrandDomain => self.off_brand_domain,
            LinkRule::GluedWww => self.glued_www,
            LinkRule::IpHost => self.ip_host,
            LinkRule::Typosquat => self.typosquat,
            LinkRule::BrandInForeignDomain => self.brand_in_foreign_domain,
        }
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Editable phrase lists. Matching is case-insensitive on word boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lexicons {
    pub urgency: Vec<String>,
    pub no_reply: Vec<String>,
    pub request_actions: Vec<String>,
    /// Credential or payment terms one of which must appear for a request to count.
    pub request_targets: Vec<String>,
    pub generic_salutations: Vec<String>,
    /// Addressee words that are not a person's name.
    pub generic_addressees: Vec<String>,
    pub signoff_team_words: Vec<String>,
    pub misspellings: Vec<String>,
    /// Base-form verbs that need a participle after have/has/had.
    pub base_verbs: Vec<String>,
}

impl Default for Lexicons {
    fn default() -> Self {
        Self {
            urgency: strings(&[
                "suspended",
                "immediately",
                "deleted",
                "within 24 hours",
                "account will be closed",
                "urgent",
            ]),
            no_reply: strings(&[
                "do not reply",
                "don't reply",
                "do not respond",
                "don't respond",
                "not monitored",
                "unattended mailbox",
            ]),
            request_actions: strings(&[
                "click the link",
                "click on the link",
                "click this link",
                "click here",
                "click below",
                "verify your account",
                "verify your identity",
                "confirm your password",
                "confirm your account",
                "enter your password",
                "provide your password",
                "update your payment",
                "update your billing",
                "remove restrictions",
                "remove the restrictions",
                "restore access",
                "reactivate your account",
                "send payment",
                "wire transfer",
                "gift card",
                "pay the fee",
                "processing fee",
            ]),
            request_targets: strings(&[
                "password",
                "login",
                "log in",
                "sign in",
                "account",
                "credentials",
                "verify",
                "payment",
                "billing",
                "bank",
                "card",
                "pin",
                "social security",
                "fee",
                "transfer",
                "restrictions",
                "access",
            ]),
            generic_salutations: strings(&[
                "dear customer",
                "dear user",
                "dear sir/madam",
                "dear sir or madam",
                "valued customer",
                "dear client",
                "dear member",
                "dear account holder",
                "dear email user",
                "dear beneficiary",
            ]),
            generic_addressees: strings(&[
                "customer",
                "customers",
                "user",
                "users",
                "sir",
                "madam",
                "valued",
                "client",
                "member",
                "account",
                "holder",
                "email",
                "beneficiary",
                "friend",
                "friends",
                "all",
                "there",
                "everyone",
                "team",
                "colleague",
                "colleagues",
                "recipient",
                "subscriber",
                "dear",
                "sir/madam",
                "owner",
            ]),
            signoff_team_words: strings(&[
                "team",
                "support",
                "department",
                "staff",
                "desk",
                "helpdesk",
                "administrator",
                "admin",
                "service",
                "services",
                "center",
                "centre",
            ]),
            misspellings: strings(&[
                "acount",
                "accout",
                "adress",
                "beleive",
                "buisness",
                "definately",
                "immediatly",
                "informations",
                "occured",
                "pasword",
                "paswword",
                "recieve",
                "recieved",
                "seperate",
                "securty",
                "suspention",
                "untill",
                "verfy",
                "wich",
                "acces",
                "mesage",
                "restricion",
                "imediately",
            ]),
            base_verbs: strings(&[
                "suspend",
                "delete",
                "remove",
                "restrict",
                "send",
                "receive",
                "update",
                "verify",
                "disable",
                "deactivate",
                "terminate",
                "cancel",
                "detect",
                "confirm",
                "expire",
                "approve",
                "win",
                "give",
                "take",
                "write",
                "begin",
                "choose",
                "forget",
                "see",
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub min_urgency_hits: usize,
    pub weights: CategoryWeights,
    pub links: LinkRuleWeights,
    pub lexicons: Lexicons,
    #[serde(rename = "brand")]
    pub brands: Vec<BrandProfile>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            min_urgency_hits: 2,
            weights: CategoryWeights::default(),
            links: LinkRuleWeights::default(),
            lexicons: Lexicons::default(),
            brands: default_brands(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let in_range = |w: f64| w > 0.0 && w <= 1.0;
        for category in FlagCategory::ALL {
            let w = self.weights.get(category);
            if !in_range(w) {
                return Err(ConfigError::Invalid(format!(
                    "weight for {category} must be in (0, 1], got {w}"
                )));
            }
        }
        for rule in [
            LinkRule::OffBrandDomain,
            LinkRule::GluedWww,
            LinkRule::IpHost,
            LinkRule::Typosquat,
            LinkRule::BrandInForeignDomain,
        ] {
            let w = self.links.get(rule);
            if !in_range(w) {
                return Err(ConfigError::Invalid(format!(
                    "link rule weight {rule:?} must be in (0, 1], got {w}"
                )));
            }
        }
        if self.lexicons.urgency.is_empty() {
            return Err(ConfigError::Invalid("urgency lexicon is empty".into()));
        }
        if self.min_urgency_hits == 0 {
            return Err(ConfigError::Invalid("min_urgency_hits must be >= 1".into()));
        }
        self.brands.iter().try_for_each(BrandProfile::validate)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }
}

/// Case-insensitive phrase matcher on word boundaries, with runs of
/// whitespace inside a phrase matching any whitespace.
#[derive(Debug, Clone)]
struct Phrase {
    text: String,
    pattern: Regex,
}

impl Phrase {
    fn new(text: &str) -> Self {
        let body = text
            .split_whitespace()
            .map(regex::escape)
            .collect::<Vec<_>>()
            .join(r"\s+");
        let starts_word = text.trim().chars().next().is_some_and(char::is_alphanumeric);
        let ends_word = text.trim().chars().last().is_some_and(char::is_alphanumeric);
        let pattern = format!(
            "(?i){}{}{}",
            if starts_word { r"\b" } else { "" },
            body,
            if ends_word { r"\b" } else { "" }
        );
        Self {
            text: text.to_string(),
            pattern: Regex::new(&pattern).expect("escaped phrase is a valid pattern"),
        }
    }

    fn find<'h>(&self, haystack: &'h str) -> Option<regex::Match<'h>> {
        self.pattern.find(haystack)
    }
}

fn compile(phrases: &[String]) -> Vec<Phrase> {
    phrases
        .iter()
        .filter(|p| !p.trim().is_empty())
        .map(|p| Phrase::new(p))
        .collect()
}

/// Earliest non-overlapping matches over a phrase list; on equal starts the
/// longer match wins.
fn phrase_matches<'h>(phrases: &[Phrase], haystack: &'h str) -> Vec<regex::Match<'h>> {
    let mut all: Vec<regex::Match<'h>> = phrases
        .iter()
        .flat_map(|p| p.pattern.find_iter(haystack))
        .collect();
    all.sort_by(|a, b| a.start().cmp(&b.start()).then(b.end().cmp(&a.end())));
    let mut kept: Vec<regex::Match<'h>> = Vec::new();
    for m in all {
        if kept.last().is_none_or(|k| m.start() >= k.end()) {
            kept.push(m);
        }
    }
    kept
}

/// A compiled [`DetectorConfig`]. Build once and reuse across documents.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    urgency: Vec<Phrase>,
    no_reply: Vec<Phrase>,
    request_actions: Vec<Phrase>,
    request_targets: Vec<Phrase>,
    team_words: Vec<Phrase>,
    grammar: GrammarRules,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let lex = &config.lexicons;
        Ok(Self {
            urgency: compile(&lex.urgency),
            no_reply: compile(&lex.no_reply),
            request_actions: compile(&lex.request_actions),
            request_targets: compile(&lex.request_targets),
            team_words: compile(&lex.signoff_team_words),
            grammar: GrammarRules::new(lex),
            config,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn weight(&self, category: FlagCategory) -> f64 {
        self.config.weights.get(category)
    }

    fn flag(&self, category: FlagCategory, evidence: &str, offset: Option<usize>) -> RedFlag {
        RedFlag {
            category,
            evidence: evidence.to_string(),
            offset,
            weight: self.weight(category),
        }
    }

    /// Run every detector. Output is sorted by (category, offset).
    pub fn detect(&self, doc: &EmailDocument, brands: &[BrandProfile]) -> Vec<RedFlag> {
        let mut flags = Vec::new();
        let claimed = claimed_brand(doc, brands);

        if let (Some(brand), Some(domain)) = (claimed, doc.sender.registrable_domain()) {
            if !brand.owns(&domain) {
                flags.push(self.flag(FlagCategory::SenderBrandMismatch, &doc.sender.domain, None));
            }
        }
        if let (Some(brand), Some(domain)) = (
            mentioned_brand(&doc.sender.display_name, brands, false),
            doc.sender.registrable_domain(),
        ) {
            if !brand.owns(&domain) {
                flags.push(self.flag(FlagCategory::SenderNameMismatch, &doc.sender.display_name, None));
            }
        }

        for url in &doc.urls {
            if let Some(flag) = link_suspicion_with(url, claimed, brands, &self.config.links) {
                flags.push(flag);
            }
        }

        flags.extend(
            self.grammar
                .scan(&doc.body)
                .into_iter()
                .map(|(evidence, offset)| self.flag(FlagCategory::GrammarSpelling, evidence, Some(offset))),
        );

        if let Some(mut flag) = urgency_with(&doc.body, &self.urgency, self.config.min_urgency_hits) {
            flag.weight = self.weight(FlagCategory::UrgencyFear);
            flags.push(flag);
        }

        let body = doc.body.as_str();
        if self.request_targets.iter().any(|t| t.find(body).is_some()) {
            for m in phrase_matches(&self.request_actions, body) {
                flags.push(self.flag(FlagCategory::UnusualRequest, m.as_str(), Some(m.start())));
            }
        }

        if let Some(salutation) = &doc.salutation {
            let lowered = collapse_ws(&salutation.text.to_lowercase());
            let generic = self.config.lexicons.generic_salutations.iter().any(|g| {
                let g = collapse_ws(&g.to_lowercase());
                lowered == g || lowered.ends_with(&format!(" {g}"))
            });
            if generic {
                flags.push(self.flag(
                    FlagCategory::GenericSalutation,
                    &salutation.text,
                    Some(salutation.offset),
                ));
            }
            if !self.names_a_person(&salutation.text) {
                flags.push(self.flag(
                    FlagCategory::LackOfPersonalization,
                    &salutation.text,
                    Some(salutation.offset),
                ));
            }
        }

        if let Some(signoff) = &doc.signoff {
            if self.is_generic_signoff(&signoff.text) {
                flags.push(self.flag(FlagCategory::GenericSignoff, &signoff.text, Some(signoff.offset)));
            }
        }

        if let Some(m) = phrase_matches(&self.no_reply, body).first() {
            flags.push(self.flag(FlagCategory::NoReplyInstruction, m.as_str(), Some(m.start())));
        }

        sort_flags(&mut flags);
        flags
    }

    /// Whether the salutation addresses someone by name.
    fn names_a_person(&self, salutation: &str) -> bool {
        let generic = &self.config.lexicons.generic_addressees;
        salutation
            .split_whitespace()
            .skip(1)
            .flat_map(|w| w.split(|c: char| !c.is_alphabetic() && c != '\'' && c != '-'))
            .filter(|w| !w.is_empty())
            .any(|w| {
                w.chars().next().is_some_and(char::is_uppercase)
                    && !generic.iter().any(|g| g.eq_ignore_ascii_case(w))
            })
    }

    fn is_generic_signoff(&self, signoff: &str) -> bool {
        let lines: Vec<&str> = signoff.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let has_team = |l: &str| self.team_words.iter().any(|p| p.find(l).is_some());
        if !lines.iter().any(|l| has_team(l)) {
            return false;
        }
        let person_line = lines.iter().any(|l| !has_team(l) && looks_like_name(l));
        let contact_line = lines.iter().any(|l| is_contact_line(l));
        !person_line && !contact_line
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn looks_like_name(line: &str) -> bool {
    let words: Vec<&str> = line.split_whitespace().collect();
    (1..=4).contains(&words.len())
        && words.iter().all(|w| {
            let mut chars = w.chars();
            chars.next().is_some_and(char::is_uppercase)
                && chars.all(|c| c.is_alphabetic() || matches!(c, '.' | '-' | '\''))
        })
}

fn is_contact_line(line: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\+?\d[\d\s().-]{6,}\d|[^\s@]+@[^\s@]+\.[a-z]{2,}|\b(phone|tel|call us|contact us)\b")
            .unwrap()
    })
    .is_match(line)
}

pub(crate) fn sort_flags(flags: &mut [RedFlag]) {
    flags.sort_by(|a, b| {
        a.category
            .cmp(&b.category)
            .then(a.offset.cmp(&b.offset))
            .then_with(|| a.evidence.cmp(&b.evidence))
    });
}

/// Compiled per brand name on first use and cached for the process.
fn brand_mention_regex(brand: &BrandProfile) -> Regex {
    static CACHE: OnceLock<Mutex<HashMap<String, Regex>>> = OnceLock::new();
    let mut cache = CACHE
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    cache
        .entry(brand.brand_name.clone())
        .or_insert_with(|| {
            let body = brand
                .brand_name
                .split_whitespace()
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join(r"\s+");
            Regex::new(&format!(r"(?i)\b{body}\b")).expect("escaped brand name")
        })
        .clone()
}

/// First brand (in list order) mentioned in `text`. With
/// `require_capital`, a match only counts when its first letter is uppercase
/// in the source, so "apple pie" is not Apple.
fn mentioned_brand<'b>(
    text: &str,
    brands: &'b [BrandProfile],
    require_capital: bool,
) -> Option<&'b BrandProfile> {
    brands
        .iter()
        .find(|b| count_mentions(text, b, require_capital) > 0)
}

fn count_mentions(text: &str, brand: &BrandProfile, require_capital: bool) -> usize {
    brand_mention_regex(brand)
        .find_iter(text)
        .filter(|m| !require_capital || m.as_str().chars().next().is_some_and(char::is_uppercase))
        .count()
}

/// The brand a message claims to come from: display name, then subject,
/// then the brand mentioned most often in the body (ties go to list order).
pub fn claimed_brand<'b>(doc: &EmailDocument, brands: &'b [BrandProfile]) -> Option<&'b BrandProfile> {
    mentioned_brand(&doc.sender.display_name, brands, false)
        .or_else(|| mentioned_brand(&doc.subject, brands, false))
        .or_else(|| {
            let mut best: Option<(&BrandProfile, usize)> = None;
            for brand in brands {
                let n = count_mentions(&doc.body, brand, true);
                if n > 0 && best.is_none_or(|(_, m)| n > m) {
                    best = Some((brand, n));
                }
            }
            best.map(|(b, _)| b)
        })
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let b_chars: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b_chars.len()).collect();
    let mut cur = vec![0; b_chars.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b_chars.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b_chars.len()]
}

/// Which link sub-rules fire for `url`.
pub fn link_rules_fired(
    url: &ExtractedUrl,
    claimed: Option<&BrandProfile>,
    known: &[BrandProfile],
    rules: &LinkRuleWeights,
) -> Vec<LinkRule> {
    let domain = url.registrable_domain.as_str();
    let mut fired = Vec::new();

    if claimed.is_some_and(|b| !b.owns(domain)) {
        fired.push(LinkRule::OffBrandDomain);
    }
    if url.has_glued_www() {
        fired.push(LinkRule::GluedWww);
    }
    if url.is_ip_host() {
        fired.push(LinkRule::IpHost);
    }

    let candidates = || claimed.into_iter().chain(known.iter());
    let owned_by_someone = candidates().any(|b| b.owns(domain));
    if !owned_by_someone && !url.is_ip_host() {
        let lookalike = candidates().flat_map(|b| b.legitimate_domains.iter()).any(|d| {
            d.len() >= rules.typosquat_min_length
                && d != domain
                && levenshtein(d, domain) <= rules.typosquat_max_distance
        });
        if lookalike {
            fired.push(LinkRule::Typosquat);
        }
    }
    let foreign = candidates().any(|b| {
        let token = b.token();
        token.chars().count() >= rules.brand_token_min_length && !b.owns(domain) && domain.contains(&token)
    });
    if foreign {
        fired.push(LinkRule::BrandInForeignDomain);
    }
    fired
}

fn link_suspicion_with(
    url: &ExtractedUrl,
    claimed: Option<&BrandProfile>,
    known: &[BrandProfile],
    rules: &LinkRuleWeights,
) -> Option<RedFlag> {
    let weight = link_rules_fired(url, claimed, known, rules)
        .into_iter()
        .map(|r| rules.get(r))
        .fold(None, |acc: Option<f64>, w| Some(acc.map_or(w, |a| a.max(w))))?;
    Some(RedFlag {
        category: FlagCategory::SuspiciousLink,
        evidence: url.raw.clone(),
        offset: Some(url.source_offset),
        weight,
    })
}

/// Flag a link with default rule weights; the weight is the maximum over the
/// sub-rules that fired.
pub fn link_suspicion(url: &ExtractedUrl, claimed_brand: Option<&BrandProfile>) -> Option<RedFlag> {
    link_suspicion_with(url, claimed_brand, &default_brands(), &LinkRuleWeights::default())
}

#[derive(Debug, Clone)]
struct GrammarRules {
    participle: Regex,
    misspelling: Option<Regex>,
}

/// Grammar rule identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GrammarRule {
    /// have/has/had + base-form verb.
    MissingParticiple,
    /// Sentence punctuation glued to the next word.
    GluedSentence,
    DoubledWord,
    Misspelling,
}

impl GrammarRules {
    fn new(lex: &Lexicons) -> Self {
        let verbs = alternation(&lex.base_verbs);
        let participle =
            Regex::new(&format!(r"(?i)\b(?:have|has|had)\s+(?:{verbs})\b")).expect("escaped verb list");
        let misspelling = (!lex.misspellings.is_empty()).then(|| {
            Regex::new(&format!(r"(?i)\b(?:{})\b", alternation(&lex.misspellings)))
                .expect("escaped misspelling list")
        });
        Self {
            participle,
            misspelling,
        }
    }

    fn scan<'h>(&self, body: &'h str) -> Vec<(&'h str, usize)> {
        self.scan_rules(body)
            .into_iter()
            .map(|(_, s, o)| (s, o))
            .collect()
    }

    fn scan_rules<'h>(&self, body: &'h str) -> Vec<(GrammarRule, &'h str, usize)> {
        let mut hits = Vec::new();
        for m in self.participle.find_iter(body) {
            hits.push((GrammarRule::MissingParticiple, m.as_str(), m.start()));
        }
        for (s, o) in glued_sentences(body) {
            hits.push((GrammarRule::GluedSentence, s, o));
        }
        for (s, o) in doubled_words(body) {
            hits.push((GrammarRule::DoubledWord, s, o));
        }
        if let Some(re) = &self.misspelling {
            for m in re.find_iter(body) {
                hits.push((GrammarRule::Misspelling, m.as_str(), m.start()));
            }
        }
        hits.sort_by_key(|&(rule, _, offset)| (offset, rule));
        hits
    }
}

fn alternation(words: &[String]) -> String {
    let mut sorted: Vec<&String> = words.iter().filter(|w| !w.trim().is_empty()).collect();
    // Longest first so alternation prefers full words.
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    if sorted.is_empty() {
        // Matches nothing.
        return r"[^\s\S]".to_string();
    }
    sorted
        .iter()
        .map(|w| regex::escape(w.trim()))
        .collect::<Vec<_>>()
        .join("|")
}

/// Byte ranges of links and mail addresses, which legitimately glue
/// punctuation to letters.
fn protected_ranges(body: &str) -> Vec<(usize, usize)> {
    static ADDR: OnceLock<Regex> = OnceLock::new();
    let addr = ADDR.get_or_init(|| Regex::new(r"[^\s@<>]+@[^\s@<>]+").unwrap());
    let mut ranges: Vec<(usize, usize)> = extract_urls(body)
        .iter()
        .map(|u| (u.source_offset, u.end_offset()))
        .collect();
    ranges.extend(addr.find_iter(body).map(|m| (m.start(), m.end())));
    ranges
}

/// `word.Word`, `word!Word`, `word?word`: punctuation with no following
/// space. A lowercase letter after '.' is accepted as a file name or host
/// and not flagged.
fn glued_sentences(body: &str) -> Vec<(&str, usize)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\p{L}{2,}[.!?]\p{L}+").unwrap());
    let protected = protected_ranges(body);
    let mut hits = Vec::new();
    let mut at = 0;
    while let Some(m) = re.find_at(body, at) {
        at = m.start() + m.as_str().chars().next().map_or(1, char::len_utf8);
        let text = m.as_str();
        let Some(p) = text.find(['.', '!', '?']) else {
            continue;
        };
        let punct = text.as_bytes()[p];
        let next = text[p + 1..].chars().next().unwrap_or(' ');
        if punct == b'.' && !next.is_uppercase() {
            continue;
        }
        // Only take the match if it starts at a word boundary.
        if body[..m.start()].chars().last().is_some_and(char::is_alphabetic) {
            continue;
        }
        let overlaps = protected.iter().any(|&(s, e)| m.start() < e && s < m.end());
        if !overlaps {
            hits.push((text, m.start()));
            at = m.end();
        }
    }
    hits
}

fn doubled_words(body: &str) -> Vec<(&str, usize)> {
    static WORD: OnceLock<Regex> = OnceLock::new();
    let word = WORD.get_or_init(|| Regex::new(r"\p{L}+").unwrap());
    const ALLOWED: &[&str] = &["had", "that"];
    let words: Vec<regex::Match<'_>> = word.find_iter(body).collect();
    words
        .windows(2)
        .filter(|pair| {
            let (a, b) = (pair[0], pair[1]);
            let gap = &body[a.end()..b.start()];
            !gap.is_empty()
                && gap.chars().all(char::is_whitespace)
                && a.as_str().to_lowercase() == b.as_str().to_lowercase()
                && !ALLOWED.contains(&a.as_str().to_lowercase().as_str())
        })
        .map(|pair| (&body[pair[0].start()..pair[1].end()], pair[0].start()))
        .collect()
}

/// Grammar and spelling flags under the built-in rule set.
pub fn grammar_scan(body: &str) -> Vec<RedFlag> {
    let weight = CategoryWeights::default().grammar_spelling;
    GrammarRules::new(&Lexicons::default())
        .scan(body)
        .into_iter()
        .map(|(evidence, offset)| RedFlag {
            category: FlagCategory::GrammarSpelling,
            evidence: evidence.to_string(),
            offset: Some(offset),
            weight,
        })
        .collect()
}

/// Grammar hits annotated with the rule that produced them.
pub fn grammar_rules_fired(body: &str) -> Vec<(GrammarRule, String)> {
    GrammarRules::new(&Lexicons::default())
        .scan_rules(body)
        .into_iter()
        .map(|(r, s, _)| (r, s.to_string()))
        .collect()
}

fn urgency_with(body: &str, lexicon: &[Phrase], min_hits: usize) -> Option<RedFlag> {
    let hits: Vec<(usize, &str)> = lexicon
        .iter()
        .filter_map(|p| p.find(body).map(|m| (m.start(), m.as_str())))
        .collect();
    let distinct: BTreeSet<&str> = lexicon
        .iter()
        .filter(|p| p.find(body).is_some())
        .map(|p| p.text.as_str())
        .collect();
    if distinct.len() < min_hits.max(1) {
        return None;
    }
    let (offset, evidence) = hits.into_iter().min()?;
    Some(RedFlag {
        category: FlagCategory::UrgencyFear,
        evidence: evidence.to_string(),
        offset: Some(offset),
        weight: CategoryWeights::default().urgency_fear,
    })
}

/// Fires when at least `min_hits` distinct lexicon phrases occur; the
/// evidence is the earliest match.
pub fn urgency_scan(body: &str, lexicon: &[String], min_hits: usize) -> Option<RedFlag> {
    urgency_with(body, &compile(lexicon), min_hits)
}

/// Run all detectors with a one-off compiled config.
pub fn detect_flags(
    doc: &EmailDocument,
    brands: &[BrandProfile],
    config: &DetectorConfig,
) -> Result<Vec<RedFlag>, ConfigError> {
    Ok(Detector::new(config.clone())?.detect(doc, brands))
}

/// Noisy-or over the strongest flag in each category:
/// `1 - prod(1 - w_c)`.
pub fn heuristic_score(flags: &[RedFlag]) -> f64 {
    let mut strongest: BTreeMap<FlagCategory, f64> = BTreeMap::new();
    for flag in flags {
        let w = flag.weight.clamp(0.0, 1.0);
        strongest
            .entry(flag.category)
            .and_modify(|cur| *cur = cur.max(w))
            .or_insert(w);
    }
    let miss: f64 = strongest.values().map(|w| 1.0 - w).product();
    (1.0 - miss).clamp(0.0, 1.0)
}
