//! Contrastive test items: the reference translation of a sentence holding
//! the ambiguous token, plus foils that swap in every other class.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::synthetic::{Plant, SyntheticIds};
use super::{parse_kv_line, DocumentPair, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveItem {
    /// The full document; `doc.tgt[sentence]` is the correct target.
    pub doc: DocumentPair,
    pub sentence: usize,
    /// Position of the ambiguous token in the target sentence.
    pub position: usize,
    pub correct: Vec<usize>,
    /// Each differs from `correct` at `position` only.
    pub foils: Vec<Vec<usize>>,
    /// Sentences between marker and ambiguous token; 0 = same sentence.
    pub distance: usize,
}

pub fn generate_contrastive_set(docs: &[DocumentPair], plants: &[Plant], ids: &SyntheticIds) -> Result<Vec<ContrastiveItem>> {
    if docs.len() != plants.len() {
        return Err(Error::Corpus(format!("{} documents but {} plants", docs.len(), plants.len())));
    }
    docs.iter()
        .zip(plants)
        .map(|(doc, p)| {
            let correct = doc.tgt[p.amb_sentence].clone();
            if correct.get(p.amb_position) != Some(&ids.tgt_amb[p.class]) {
                return Err(Error::Corpus(format!("document {} does not hold its ambiguous token", doc.id)));
            }
            let foils = (0..ids.tgt_amb.len())
                .filter(|&c| c != p.class)
                .map(|c| {
                    let mut f = correct.clone();
                    f[p.amb_position] = ids.tgt_amb[c];
                    f
                })
                .collect();
            Ok(ContrastiveItem { doc: doc.clone(), sentence: p.amb_sentence, position: p.amb_position, correct, foils, distance: p.distance() })
        })
        .collect()
}

/// One `key=value` line per item; documents are referenced by index into
/// the corpus stored next to the items.
pub fn format_contrastive_items(items: &[ContrastiveItem], doc_index: &[usize], vocab: &Vocab) -> String {
    let mut out = String::new();
    for (item, &d) in items.iter().zip(doc_index) {
        let foils: Vec<&str> = item.foils.iter().map(|f| vocab.token(f[item.position]).unwrap_or("<unk>")).collect();
        let _ = writeln!(
            out,
            "doc={d} sentence={} position={} distance={} foils={}",
            item.sentence,
            item.position,
            item.distance,
            foils.join(",")
        );
    }
    out
}

pub fn parse_contrastive_items(text: &str, docs: &[DocumentPair], vocab: &Vocab) -> Result<Vec<ContrastiveItem>> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let kv = parse_kv_line(line);
        let bad = |what: &str| Error::Corpus(format!("contrastive line {}: {what}", n + 1));
        let num = |k: &str| -> Result<usize> { kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(&format!("missing or bad {k}"))) };
        let (d, sentence, position, distance) = (num("doc")?, num("sentence")?, num("position")?, num("distance")?);
        let doc = docs.get(d).ok_or_else(|| bad("document index out of range"))?;
        let correct = doc.tgt.get(sentence).ok_or_else(|| bad("sentence out of range"))?.clone();
        if position >= correct.len() {
            return Err(bad("position out of range"));
        }
        let foils = kv
            .get("foils")
            .ok_or_else(|| bad("missing foils"))?
            .split(',')
            .map(|tok| {
                let id = vocab.get(tok).ok_or_else(|| bad(&format!("unknown foil token {tok:?}")))?;
                let mut f = correct.clone();
                f[position] = id;
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        items.push(ContrastiveItem { doc: doc.clone(), sentence, position, correct, foils, distance });
    }
    Ok(items)
}

pub fn write_contrastive_items(path: &Path, items: &[ContrastiveItem], doc_index: &[usize], vocab: &Vocab) -> Result<()> {
    fs::write(path, format_contrastive_items(items, doc_index, vocab)).map_err(|e| Error::io(path, e))
}

pub fn read_contrastive_items(path: &Path, docs: &[DocumentPair], vocab: &Vocab) -> Result<Vec<ContrastiveItem>> {
    parse_contrastive_items(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, docs, vocab)
}
