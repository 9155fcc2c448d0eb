//! Labeled corpora: loading and writing the line-oriented corpus format,
//! label aggregation, inter-annotator agreement and stratified folds.
//!
//! # File format
//!
//! UTF-8, one JSON object per line. Blank lines are ignored. A line of the
//! form `{"manifest": "..."}` records provenance. Every other line is an
//! example:
//!
//! ```text
//! {"id": "e1", "text": "Dear Customer, ...", "scam_type": "phishing",
//!  "annotations": [{"annotator_id": "ann1", "label": "scam"}]}
//! {"id": "e2", "eml_path": "mail/e2.eml", "annotations": []}
//! ```
//!
//! Exactly one of `text` or `eml_path` must be present; `eml_path` is
//! resolved against the corpus file's directory. `scam_type` is optional.
//! A `consensus` field is written on export and ignored (recomputed) on load.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{parse_any, EmailDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Scam,
    Legitimate,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Scam => "scam",
            Label::Legitimate => "legitimate",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scam" => Ok(Label::Scam),
            "legitimate" => Ok(Label::Legitimate),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consensus {
    Scam,
    Legitimate,
    Disputed,
}

impl Consensus {
    pub fn label(self) -> Option<Label> {
        match self {
            Consensus::Scam => Some(Label::Scam),
            Consensus::Legitimate => Some(Label::Legitimate),
            Consensus::Disputed => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScamType {
    Phishing,
    AdvanceFee,
    Romance,
    Investment,
    TechSupport,
    OnlineShopping,
    LotteryPrize,
    IrsImpersonation,
    Charity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorLabel {
    pub annotator_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Text(String),
    /// Path as written in the corpus file.
    EmlPath(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub id: String,
    pub payload: Payload,
    pub scam_type: Option<ScamType>,
    pub annotations: Vec<AnnotatorLabel>,
    pub consensus: Consensus,
}

impl LabeledExample {
    pub fn new(
        id: impl Into<String>,
        payload: Payload,
        scam_type: Option<ScamType>,
        annotations: Vec<AnnotatorLabel>,
    ) -> Self {
        let consensus = aggregate_labels(&annotations);
        Self {
            id: id.into(),
            payload,
            scam_type,
            annotations,
            consensus,
        }
    }

    pub fn text(id: impl Into<String>, text: impl Into<String>, labels: &[(&str, Label)]) -> Self {
        Self::new(
            id,
            Payload::Text(text.into()),
            None,
            labels
                .iter()
                .map(|(a, l)| AnnotatorLabel {
                    annotator_id: a.to_string(),
                    label: *l,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("need at least {needed} non-disputed examples, found {available}")]
    TooFewExamples { needed: usize, available: usize },
    #[error("unknown example id {0:?}")]
    UnknownExample(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eml_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scam_type: Option<ScamType>,
    #[serde(default)]
    annotations: Vec<AnnotatorLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    consensus: Option<Consensus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub examples: Vec<LabeledExample>,
    pub source_manifest: String,
    /// Directory `eml_path` payloads are resolved against.
    pub base_dir: PathBuf,
}

impl Corpus {
    pub fn new(
        examples: Vec<LabeledExample>,
        source_manifest: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for e in &examples {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self {
            examples,
            source_manifest: source_manifest.into(),
            base_dir: PathBuf::from("."),
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CorpusError> {
        let mut examples = Vec::new();
        let mut manifest: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |reason: String| CorpusError::Format {
                line: line_no,
                reason,
            };
            let record: Record = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
            if let Some(m) = record.manifest {
                if record.id.is_some() {
                    return Err(fail("manifest line must not carry an id".into()));
                }
                manifest.push(m);
                continue;
            }
            let id = record
                .id
                .filter(|id| !id.trim().is_empty())
                .ok_or_else(|| fail("missing id".into()))?;
            let payload = match (record.text, record.eml_path) {
                (Some(t), None) => Payload::Text(t),
                (None, Some(p)) => Payload::EmlPath(p),
                _ => return Err(fail("exactly one of text or eml_path is required".into())),
            };
            if let Some(a) = record
                .annotations
                .iter()
                .find(|a| a.annotator_id.trim().is_empty())
            {
                return Err(fail(format!("empty annotator_id (label {})", a.label)));
            }
            if !seen.insert(id.clone()) {
                return Err(CorpusError::DuplicateId(id));
            }
            examples.push(LabeledExample::new(
                id,
                payload,
                record.scam_type,
                record.annotations,
            ));
        }
        Ok(Self {
            examples,
            source_manifest: manifest.join("\n"),
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in self.source_manifest.lines().filter(|l| !l.is_empty()) {
            let record = Record {
                manifest: Some(line.to_string()),
                ..Record::default()
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        for e in &self.examples {
            let (text, eml_path) = match &e.payload {
                Payload::Text(t) => (Some(t.clone()), None),
                Payload::EmlPath(p) => (None, Some(p.clone())),
            };
            let record = Record {
                manifest: None,
                id: Some(e.id.clone()),
                text,
                eml_path,
                scam_type: e.scam_type,
                annotations: e.annotations.clone(),
                consensus: Some(e.consensus),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, id: &str) -> Option<&LabeledExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Parse an example's payload into a document.
    pub fn document(&self, example: &LabeledExample) -> Result<EmailDocument, CorpusError> {
        match &example.payload {
            Payload::Text(text) => Ok(crate::ingest::parse_plaintext(text)),
            Payload::EmlPath(p) => {
                let path = self.base_dir.join(p);
                let raw = std::fs::read(&path).map_err(|source| CorpusError::Io { path, source })?;
                Ok(parse_any(&raw))
            }
        }
    }

    /// Examples with a decided consensus, paired with it.
    pub fn labeled(&self) -> impl Iterator<Item = (&LabeledExample, Label)> {
        self.examples
            .iter()
            .filter_map(|e| e.consensus.label().map(|l| (e, l)))
    }

    pub fn disputed_ids(&self) -> Vec<String> {
        self.examples
            .iter()
            .filter(|e| e.consensus == Consensus::Disputed)
            .map(|e| e.id.clone())
            .collect()
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Corpus::parse(&text, &base)
}

/// Strict majority; ties and the empty list are disputed.
pub fn aggregate_labels(annotations: &[AnnotatorLabel]) -> Consensus {
    let scam = annotations.iter().filter(|a| a.label == Label::Scam).count();
    let legit = annotations.len() - scam;
    match scam.cmp(&legit) {
        std::cmp::Ordering::Greater => Consensus::Scam,
        std::cmp::Ordering::Less => Consensus::Legitimate,
        std::cmp::Ordering::Equal => Consensus::Disputed,
    }
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum KappaError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no labels to compare")]
    EmptyInput,
}

/// Cohen's kappa for two annotators over binary labels.
pub fn cohen_kappa(a: &[Label], b: &[Label]) -> Result<f64, KappaError> {
    if a.len() != b.len() {
        return Err(KappaError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(KappaError::EmptyInput);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let a_scam = a.iter().filter(|&&l| l == Label::Scam).count() as f64;
    let b_scam = b.iter().filter(|&&l| l == Label::Scam).count() as f64;
    let p_o = agree / n;
    let p_e = (a_scam / n) * (b_scam / n) + ((n - a_scam) / n) * ((n - b_scam) / n);
    if p_e == 1.0 {
        return Ok(if p_o == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairAgreement {
    pub annotator_a: String,
    pub annotator_b: String,
    pub shared_items: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub pairs: Vec<PairAgreement>,
    /// Mean kappa over all annotator pairs with shared items.
    pub mean_kappa: f64,
}

/// Pairwise kappa over items both annotators labeled.
pub fn annotator_agreement(corpus: &Corpus) -> Option<AgreementReport> {
    let mut by_annotator: BTreeMap<&str, BTreeMap<&str, Label>> = BTreeMap::new();
    for e in &corpus.examples {
        for a in &e.annotations {
            by_annotator
                .entry(a.annotator_id.as_str())
                .or_default()
                .insert(e.id.as_str(), a.label);
        }
    }
    let names: Vec<&str> = by_annotator.keys().copied().collect();
    let mut pairs = Vec::new();
    for (i, x) in names.iter().enumerate() {
        for y in &names[i + 1..] {
            let (lx, ly) = (&by_annotator[x], &by_annotator[y]);
            let (va, vb): (Vec<Label>, Vec<Label>) = lx
                .iter()
                .filter_map(|(id, l)| ly.get(id).map(|m| (*l, *m)))
                .unzip();
            if let Ok(kappa) = cohen_kappa(&va, &vb) {
                pairs.push(PairAgreement {
                    annotator_a: x.to_string(),
                    annotator_b: y.to_string(),
                    shared_items: va.len(),
                    kappa,
                });
            }
        }
    }
    if pairs.is_empty() {
        return None;
    }
    let mean_kappa = pairs.iter().map(|p| p.kappa).sum::<f64>() / pairs.len() as f64;
    Some(AgreementReport { pairs, mean_kappa })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Folds {
    pub folds: Vec<Vec<String>>,
    /// Disputed ids, left out of every fold.
    pub excluded: Vec<String>,
}

/// Deterministic stratified k-fold split over non-disputed examples.
/// Per-fold scam counts differ by at most one, as do fold sizes.
pub fn split_stratified(corpus: &Corpus, k: usize, seed: u64) -> Result<Folds, CorpusError> {
    let mut scams: Vec<String> = Vec::new();
    let mut legit: Vec<String> = Vec::new();
    for (e, label) in corpus.labeled() {
        match label {
            Label::Scam => scams.push(e.id.clone()),
            Label::Legitimate => legit.push(e.id.clone()),
        }
    }
    let available = scams.len() + legit.len();
    if k < 2 || available < k {
        return Err(CorpusError::TooFewExamples {
            needed: k.max(2),
            available,
        });
    }
    scams.sort();
    legit.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scams.shuffle(&mut rng);
    legit.shuffle(&mut rng);
    let start = rng.gen_range(0..k);

    let mut folds = vec![Vec::new(); k];
    for (i, id) in scams.into_iter().chain(legit).enumerate() {
        folds[(start + i) % k].push(id);
    }
    let mut excluded = corpus.disputed_ids();
    excluded.sort();
    Ok(Folds { folds, excluded })
}

/// Ids covered by a fold set.
pub fn fold_ids(folds: &Folds) -> BTreeSet<&str> {
    folds.folds.iter().flatten().map(String::as_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Legitimate as L, Scam as S};

    fn ann(labels: &[Label]) -> Vec<AnnotatorLabel> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| AnnotatorLabel {
                annotator_id: format!("a{i}"),
                label: *l,
            })
            .collect()
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate_labels(&ann(&[S, S, L])), Consensus::Scam);
        assert_eq!(aggregate_labels(&ann(&[S, L])), Consensus::Disputed);
        assert_eq!(aggregate_labels(&[]), Consensus::Disputed);
        assert_eq!(aggregate_labels(&ann(&[L])), Consensus::Legitimate);
    }

    #[test]
    fn kappa_fixed_points() {
        let v = [S, L, S, S, L];
        assert_eq!(cohen_kappa(&v, &v).unwrap(), 1.0);

        // 4 both-scam, 4 both-legit, one disagreement each way.
        let a = [S, S, S, S, L, L, L, L, S, L];
        let b = [S, S, S, S, L, L, L, L, L, S];
        assert!((cohen_kappa(&a, &b).unwrap() - 0.6).abs() < 1e-12);

        let a = [S; 10];
        let b = [S, S, S, S, S, L, L, L, L, L];
        assert!(cohen_kappa(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kappa_errors_and_degenerate_guard() {
        assert_eq!(cohen_kappa(&[S], &[]), Err(KappaError::LengthMismatch(1, 0)));
        assert_eq!(cohen_kappa(&[], &[]), Err(KappaError::EmptyInput));
        assert_eq!(cohen_kappa(&[L, L], &[L, L]).unwrap(), 1.0);
    }

    fn corpus_of(n: usize, scams: usize) -> Corpus {
        let examples = (0..n)
            .map(|i| {
                let label = if i < scams { S } else { L };
                LabeledExample::text(format!("e{i:02}"), format!("text {i}"), &[("a", label)])
            })
            .collect();
        Corpus::new(examples, "test").unwrap()
    }

    #[test]
    fn stratified_ten_examples_five_folds() {
        let corpus = corpus_of(10, 4);
        let folds = split_stratified(&corpus, 5, 7).unwrap();
        assert!(folds.folds.iter().all(|f| f.len() == 2));
        let mut scam_counts: Vec<usize> = folds
            .folds
            .iter()
            .map(|f| f.iter().filter(|id| id.as_str() < "e04").count())
            .collect();
        scam_counts.sort();
        assert_eq!(scam_counts, vec![0, 1, 1, 1, 1]);
        assert_eq!(folds, split_stratified(&corpus, 5, 7).unwrap());
    }

    #[test]
    fn stratified_forced_partition_and_errors() {
        let corpus = corpus_of(2, 1);
        let folds = split_stratified(&corpus, 2, 0).unwrap();
        assert!(folds.folds.iter().all(|f| f.len() == 1));
        assert!(matches!(
            split_stratified(&corpus_of(3, 1), 4, 0),
            Err(CorpusError::TooFewExamples { .. })
        ));
    }

    #[test]
    fn disputed_examples_are_excluded() {
        let mut examples: Vec<LabeledExample> = corpus_of(6, 3).examples;
        examples.push(LabeledExample::text("tie", "x", &[("a", S), ("b", L)]));
        let corpus = Corpus::new(examples, "").unwrap();
        let folds = split_stratified(&corpus, 3, 1).unwrap();
        assert_eq!(folds.excluded, vec!["tie"]);
        assert!(!fold_ids(&folds).contains("tie"));
        assert_eq!(fold_ids(&folds).len(), 6);
    }

    #[test]
    fn parse_three_lines() {
        let text = concat!(
            "{\"manifest\": \"synthetic\"}\n",
            "{\"id\":\"e1\",\"text\":\"Dear Customer\",\"scam_type\":\"phishing\",\"annotations\":[{\"annotator_id\":\"a\",\"label\":\"scam\"},{\"annotator_id\":\"b\",\"label\":\"scam\"}]}\n",
            "\n",
            "{\"id\":\"e2\",\"text\":\"Hi Bob\",\"annotations\":[{\"annotator_id\":\"a\",\"label\":\"legitimate\"}]}\n",
            "{\"id\":\"e3\",\"eml_path\":\"x.eml\",\"consensus\":\"scam\",\"annotations\":[{\"annotator_id\":\"a\",\"label\":\"scam\"},{\"annotator_id\":\"b\",\"label\":\"legitimate\"}]}\n",
        );
        let corpus = Corpus::parse(text, Path::new("/data")).unwrap();
        assert_eq!(corpus.source_manifest, "synthetic");
        let consensus: Vec<Consensus> = corpus.examples.iter().map(|e| e.consensus).collect();
        assert_eq!(
            consensus,
            vec![Consensus::Scam, Consensus::Legitimate, Consensus::Disputed]
        );
        assert_eq!(corpus.examples[0].scam_type, Some(ScamType::Phishing));
        assert_eq!(
            Corpus::parse(&corpus.to_jsonl(), Path::new("/data")).unwrap(),
            corpus
        );
    }

    #[test]
    fn parse_errors() {
        assert!(Corpus::parse("", Path::new(".")).unwrap().examples.is_empty());
        let dup = "{\"id\":\"e1\",\"text\":\"a\"}\n{\"id\":\"e1\",\"text\":\"b\"}\n";
        assert!(matches!(
            Corpus::parse(dup, Path::new(".")),
            Err(CorpusError::DuplicateId(id)) if id == "e1"
        ));
        let bad = "{\"id\":\"e1\",\"text\":\"a\"}\nnot json\n";
        assert!(matches!(
            Corpus::parse(bad, Path::new(".")),
            Err(CorpusError::Format { line: 2, .. })
        ));
        let both = "{\"id\":\"e1\",\"text\":\"a\",\"eml_path\":\"b\"}";
        assert!(matches!(
            Corpus::parse(both, Path::new(".")),
            Err(CorpusError::Format { line: 1, .. })
        ));
        let bad_type = "{\"id\":\"e1\",\"text\":\"a\",\"scam_type\":\"pyramid\"}";
        assert!(Corpus::parse(bad_type, Path::new(".")).is_err());
    }

    #[test]
    fn pairwise_agreement_mean() {
        let examples = vec![
            LabeledExample::text("1", "", &[("x", S), ("y", S), ("z", S)]),
            LabeledExample::text("2", "", &[("x", L), ("y", L), ("z", S)]),
        ];
        let corpus = Corpus::new(examples, "").unwrap();
        let report = annotator_agreement(&corpus).unwrap();
        assert_eq!(report.pairs.len(), 3);
        let xy = &report.pairs[0];
        assert_eq!((xy.annotator_a.as_str(), xy.annotator_b.as_str()), ("x", "y"));
        assert_eq!(xy.kappa, 1.0);
        let expected = report.pairs.iter().map(|p| p.kappa).sum::<f64>() / 3.0;
        assert_eq!(report.mean_kappa, expected);
    }
}
