//! Seeded input generators shared by the benchmarks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scamlens_core::corpus::{Corpus, Label, LabeledExample};
use scamlens_core::evaluation::ExampleScores;

/// `n` scores in [0, 1] with labels loosely correlated to them.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s: f64 = rng.gen();
            let label = if rng.gen_bool(0.2 + 0.6 * s) {
                Label::Scam
            } else {
                Label::Legitimate
            };
            (s, label)
        })
        .unzip()
}

/// A corpus of `n` single-annotator examples with noisy scores.
pub fn tuning_inputs(n: usize, seed: u64) -> (Corpus, BTreeMap<String, ExampleScores>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    let mut scores = BTreeMap::new();
    for i in 0..n {
        let label = if i % 2 == 0 {
            Label::Scam
        } else {
            Label::Legitimate
        };
        let id = format!("b{i:05}");
        examples.push(LabeledExample::text(&id, "", &[("a", label)]));
        let centre = if label == Label::Scam { 0.7 } else { 0.3 };
        let heuristic = (centre + rng.gen_range(-0.3..0.3f64)).clamp(0.0, 1.0);
        let llm = (centre + rng.gen_range(-0.3..0.3f64)).clamp(0.0, 1.0);
        scores.insert(
            id,
            ExampleScores {
                heuristic,
                llm: Some(llm),
            },
        );
    }
    (Corpus::new(examples, "bench").expect("ids are unique"), scores)
}

/// Phishing-style plain-text message of roughly `paragraphs` paragraphs.
pub fn long_message(paragraphs: usize) -> String {
    let mut text = String::from("Dear Customer,\n\n");
    for i in 0..paragraphs {
        text.push_str(&format!(
            "Due to unusual activity we have suspend your access.Please verify at http://secure-{i}.example.net/login immediately or your account will be deleted.\n\n"
        ));
    }
    text.push_str("Please do not reply to this email.\n\nSincerely,\nOnline Email Team\n");
    text
}
