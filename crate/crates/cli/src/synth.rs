//! Seeded synthetic data: planted triplet instances and a duplicate-question corpus.

use film::triplets::Triplet;
use film::TripletSet;
use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::PairRecord;

/// Gaussian `features × n` data with a hidden `hidden × features` map.
#[derive(Debug, Clone)]
pub struct Planted {
    pub x: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
}

impl Planted {
    pub fn new(n: usize, features: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(features, n, |_, _| rng.sample(StandardNormal));
        let hidden = DMatrix::from_fn(hidden, features, |_, _| rng.sample(StandardNormal));
        Self { x, hidden }
    }

    /// `count` random triplets oriented so the positive is closer under the hidden map.
    pub fn triplets(&self, count: usize, seed: u64) -> TripletSet {
        let y = &self.hidden * &self.x;
        let n = self.x.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let (i, j, k) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n));
            let Ok(t) = Triplet::new(i, j, k) else { continue };
            let (sj, sk) = (y.column(i).dot(&y.column(j)), y.column(i).dot(&y.column(k)));
            if sj == sk {
                continue;
            }
            out.push(if sj > sk { t } else { Triplet { anchor: i, positive: k, negative: j } });
        }
        TripletSet::new(out)
    }
}

/// Fraction of triplets whose positive is more similar than the negative under `y`.
pub fn satisfaction(y: &DMatrix<f64>, ts: &TripletSet) -> f64 {
    if ts.is_empty() {
        return 0.0;
    }
    let ok = ts
        .triplets()
        .iter()
        .filter(|t| y.column(t.anchor).dot(&y.column(t.positive)) > y.column(t.anchor).dot(&y.column(t.negative)))
        .count();
    ok as f64 / ts.len() as f64
}

#[derive(Debug, Clone)]
pub struct QuestionCorpusConfig {
    pub pairs: usize,
    pub topics: usize,
    pub intents_per_topic: usize,
    pub paraphrases: usize,
    pub positive_rate: f64,
    /// Share of negatives drawn from the same topic.
    pub near_negative_rate: f64,
    pub seed: u64,
}

impl Default for QuestionCorpusConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            topics: 60,
            intents_per_topic: 6,
            paraphrases: 6,
            positive_rate: 0.36,
            near_negative_rate: 0.6,
            seed: 0,
        }
    }
}

const OPENERS: &[&str] = &[
    "how do i",
    "what is the best way to",
    "why does",
    "can you",
    "is it possible to",
    "what should i know about",
    "where can i",
    "how can someone",
];
const FILLER: &[&str] = &["really", "quickly", "today", "still", "ever", "actually", "now", "properly"];
const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ve", "tu", "ra", "ne", "po", "si", "da", "fe", "gu", "hi", "jo", "zu", "be"];

fn word(index: usize, salt: usize) -> String {
    let mut v = index * 7919 + salt * 104_729 + 1;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYLLABLES[v % SYLLABLES.len()]);
        v /= SYLLABLES.len();
    }
    format!("{w}{index}")
}

struct Intent {
    topic: usize,
    /// Each concept has several interchangeable surface forms.
    concepts: Vec<Vec<String>>,
}

/// Duplicate-question style pairs: duplicates are paraphrases of one intent that
/// may use different synonyms; negatives come from other intents of the same or
/// another topic.
pub fn question_pairs(cfg: &QuestionCorpusConfig) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topic_words: Vec<Vec<String>> =
        (0..cfg.topics).map(|t| (0..6).map(|w| word(t * 6 + w, 1)).collect()).collect();
    let mut intents = Vec::new();
    for topic in 0..cfg.topics {
        for i in 0..cfg.intents_per_topic {
            let base = (topic * cfg.intents_per_topic + i) * 2;
            let concepts = (0..2).map(|c| (0..3).map(|f| word((base + c) * 3 + f, 2)).collect()).collect();
            intents.push(Intent { topic, concepts });
        }
    }
    let mut questions: Vec<Vec<(String, String)>> = Vec::with_capacity(intents.len());
    let mut next_id = 0usize;
    for intent in &intents {
        let mut pool = Vec::with_capacity(cfg.paraphrases);
        for _ in 0..cfg.paraphrases {
            let mut parts = vec![OPENERS.choose(&mut rng).unwrap().to_string()];
            for concept in &intent.concepts {
                parts.push(concept.choose(&mut rng).unwrap().clone());
            }
            parts.push(topic_words[intent.topic].choose(&mut rng).unwrap().clone());
            if rng.random_bool(0.5) {
                parts.push(FILLER.choose(&mut rng).unwrap().to_string());
            }
            let text = parts.join(" ") + "?";
            next_id += 1;
            pool.push((format!("q{next_id}"), text));
        }
        questions.push(pool);
    }
    let per_topic = cfg.intents_per_topic;
    let mut out = Vec::with_capacity(cfg.pairs);
    while out.len() < cfg.pairs {
        let a_intent = rng.random_range(0..intents.len());
        let pool = &questions[a_intent];
        let a = rng.random_range(0..pool.len());
        let (b_intent, b, label) = if rng.random_bool(cfg.positive_rate) {
            let b = rng.random_range(0..pool.len());
            if b == a {
                continue;
            }
            (a_intent, b, 1)
        } else {
            let other = if rng.random_bool(cfg.near_negative_rate) && per_topic > 1 {
                let topic = intents[a_intent].topic;
                topic * per_topic + rng.random_range(0..per_topic)
            } else {
                rng.random_range(0..intents.len())
            };
            if other == a_intent {
                continue;
            }
            (other, rng.random_range(0..questions[other].len()), 0)
        };
        let (id1, text1) = &questions[a_intent][a];
        let (id2, text2) = &questions[b_intent][b];
        out.push(PairRecord {
            id1: id1.clone(),
            id2: id2.clone(),
            text1: text1.clone(),
            text2: text2.clone(),
            label: Some(label),
        });
    }
    out
}

/// Tab-separated rendering with a header row.
pub fn render_pairs(records: &[PairRecord]) -> String {
    let mut s = String::from("id1\tid2\tsentence1\tsentence2\tlabel\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.id1, r.id2, r.text1, r.text2, r.label.unwrap_or(0)));
    }
    s
}
