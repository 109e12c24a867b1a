//! Synthetic document-translation task in which one ambiguous source token
//! can only be translated by looking at a marker planted earlier in the
//! document.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{DocumentPair, Vocab};

/// Source surface form of the ambiguous token.
pub const AMBIGUOUS: &str = "AMB";

/// Antecedent distances, sampled uniformly from `min..=max`; draws that do
/// not fit in the document are redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistanceDistribution {
    pub min: usize,
    pub max: usize,
}

impl Default for DistanceDistribution {
    fn default() -> Self {
        Self { min: 0, max: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub docs: usize,
    /// Sentences per document (`J`).
    pub doc_len: usize,
    pub sent_len: usize,
    /// Number of ordinary source tokens.
    pub vocab: usize,
    /// Number of marker classes (`k`).
    pub classes: usize,
    pub distance: DistanceDistribution,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { seed: 0, docs: 2000, doc_len: 6, sent_len: 6, vocab: 50, classes: 4, distance: DistanceDistribution::default() }
    }
}

/// Where the marker and the ambiguous token were planted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plant {
    pub class: usize,
    pub marker_sentence: usize,
    pub marker_position: usize,
    pub amb_sentence: usize,
    pub amb_position: usize,
}

impl Plant {
    pub fn distance(&self) -> usize {
        self.amb_sentence - self.marker_sentence
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: Vec<DocumentPair>,
    pub plants: Vec<Plant>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

/// Token ids of the synthetic vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticIds {
    pub src_word: Vec<usize>,
    pub src_marker: Vec<usize>,
    pub src_amb: usize,
    pub tgt_word: Vec<usize>,
    pub tgt_marker: Vec<usize>,
    /// Translation of the ambiguous token per class.
    pub tgt_amb: Vec<usize>,
}

/// The closed vocabularies for `vocab` ordinary tokens and `classes` markers.
pub fn synthetic_vocabs(vocab: usize, classes: usize) -> (Vocab, Vocab, SyntheticIds) {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    src.extend((0..vocab).map(|i| format!("s{i}")));
    src.extend((0..classes).map(|c| format!("M{c}")));
    src.push(AMBIGUOUS.to_string());
    tgt.extend((0..vocab).map(|i| format!("t{i}")));
    tgt.extend((0..classes).map(|c| format!("m{c}")));
    tgt.extend((0..classes).map(|c| format!("A{c}")));
    let sv = Vocab::from_tokens(src).expect("distinct tokens");
    let tv = Vocab::from_tokens(tgt).expect("distinct tokens");
    let ids = SyntheticIds {
        src_word: (0..vocab).map(|i| sv.id(&format!("s{i}"))).collect(),
        src_marker: (0..classes).map(|c| sv.id(&format!("M{c}"))).collect(),
        src_amb: sv.id(AMBIGUOUS),
        tgt_word: (0..vocab).map(|i| tv.id(&format!("t{i}"))).collect(),
        tgt_marker: (0..classes).map(|c| tv.id(&format!("m{c}"))).collect(),
        tgt_amb: (0..classes).map(|c| tv.id(&format!("A{c}"))).collect(),
    };
    (sv, tv, ids)
}

pub fn generate_synthetic_docs(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.classes < 2 || cfg.doc_len < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 classes and 2 sentences per document".into()));
    }
    if cfg.vocab == 0 || cfg.sent_len < 2 {
        return Err(Error::Config("synthetic corpus needs a non-empty vocabulary and sentences of length >= 2".into()));
    }
    if cfg.distance.min > cfg.distance.max || cfg.distance.min >= cfg.doc_len {
        return Err(Error::Config(format!(
            "distance range {}..={} has no value below doc_len={}",
            cfg.distance.min, cfg.distance.max, cfg.doc_len
        )));
    }
    let (src_vocab, tgt_vocab, ids) = synthetic_vocabs(cfg.vocab, cfg.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::with_capacity(cfg.docs);
    let mut plants = Vec::with_capacity(cfg.docs);
    for id in 0..cfg.docs {
        let class = rng.random_range(0..cfg.classes);
        let distance = loop {
            let d = rng.random_range(cfg.distance.min..=cfg.distance.max);
            if d < cfg.doc_len {
                break d;
            }
        };
        let amb_sentence = rng.random_range(distance..cfg.doc_len);
        let marker_sentence = amb_sentence - distance;
        let amb_position = rng.random_range(0..cfg.sent_len);
        let marker_position = loop {
            let p = rng.random_range(0..cfg.sent_len);
            if distance > 0 || p != amb_position {
                break p;
            }
        };
        let mut src = Vec::with_capacity(cfg.doc_len);
        let mut tgt = Vec::with_capacity(cfg.doc_len);
        for j in 0..cfg.doc_len {
            let words: Vec<usize> = (0..cfg.sent_len).map(|_| rng.random_range(0..cfg.vocab)).collect();
            let mut s: Vec<usize> = words.iter().map(|&w| ids.src_word[w]).collect();
            let mut t: Vec<usize> = words.iter().map(|&w| ids.tgt_word[w]).collect();
            if j == marker_sentence {
                s[marker_position] = ids.src_marker[class];
                t[marker_position] = ids.tgt_marker[class];
            }
            if j == amb_sentence {
                s[amb_position] = ids.src_amb;
                t[amb_position] = ids.tgt_amb[class];
            }
            src.push(s);
            tgt.push(t);
        }
        docs.push(DocumentPair { id, src, tgt });
        plants.push(Plant { class, marker_sentence, marker_position, amb_sentence, amb_position });
    }
    Ok(SyntheticCorpus { docs, plants, src_vocab, tgt_vocab })
}

/// Recovers the plant of a synthetic document from its tokens.
pub fn find_plant(doc: &DocumentPair, ids: &SyntheticIds) -> Option<Plant> {
    let mut marker = None;
    let mut amb = None;
    for (j, s) in doc.src.iter().enumerate() {
        for (p, &t) in s.iter().enumerate() {
            if let Some(c) = ids.src_marker.iter().position(|&m| m == t) {
                marker = Some((c, j, p));
            }
            if t == ids.src_amb {
                amb = Some((j, p));
            }
        }
    }
    let ((class, marker_sentence, marker_position), (amb_sentence, amb_position)) = (marker?, amb?);
    (amb_sentence >= marker_sentence).then_some(Plant { class, marker_sentence, marker_position, amb_sentence, amb_position })
}
