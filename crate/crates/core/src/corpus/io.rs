use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{DocumentPair, Vocab};

/// Splits corpus text into documents of whitespace-tokenized sentences.
/// Documents are separated by one blank line.
pub fn parse_documents(text: &str) -> Result<Vec<Vec<Vec<String>>>> {
    let mut docs = Vec::new();
    let mut current: Vec<Vec<String>> = Vec::new();
    let mut blank_run = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            blank_run += 1;
            if blank_run > 1 || current.is_empty() {
                return Err(Error::Corpus(format!("line {}: empty document", n + 1)));
            }
            docs.push(std::mem::take(&mut current));
        } else {
            blank_run = 0;
            current.push(line.split_whitespace().map(str::to_string).collect());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    Ok(docs)
}

/// Aligns two parsed sides into [`DocumentPair`]s.
pub fn parse_parallel_documents(src_text: &str, tgt_text: &str, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Vec<DocumentPair>> {
    let src = parse_documents(src_text)?;
    let tgt = parse_documents(tgt_text)?;
    let mut out = Vec::with_capacity(src.len());
    for i in 0..src.len().max(tgt.len()) {
        let (s, t) = match (src.get(i), tgt.get(i)) {
            (Some(s), Some(t)) => (s, t),
            (s, _) => {
                let side = if s.is_some() { "target" } else { "source" };
                return Err(Error::Misaligned { doc: i, detail: format!("document missing on the {side} side") });
            }
        };
        if s.len() != t.len() {
            return Err(Error::Misaligned { doc: i, detail: format!("{} source vs {} target sentences", s.len(), t.len()) });
        }
        let enc = |v: &Vocab, side: &[Vec<String>]| side.iter().map(|toks| toks.iter().map(|t| v.id(t)).collect()).collect();
        out.push(DocumentPair { id: i, src: enc(src_vocab, s), tgt: enc(tgt_vocab, t) });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_parallel_documents(src_path: &Path, tgt_path: &Path, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Vec<DocumentPair>> {
    parse_parallel_documents(&read(src_path)?, &read(tgt_path)?, src_vocab, tgt_vocab)
}

/// Loads source-only documents (for translation).
pub fn load_documents(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<Vec<usize>>>> {
    Ok(parse_documents(&read(path)?)?
        .into_iter()
        .map(|d| d.iter().map(|s| s.iter().map(|t| vocab.id(t)).collect()).collect())
        .collect())
}

/// Renders documents of token ids in the corpus format.
pub fn format_documents<'a>(docs: impl IntoIterator<Item = &'a [Vec<usize>]>, vocab: &Vocab) -> String {
    let mut out = String::new();
    for (i, doc) in docs.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in doc {
            out.push_str(&vocab.decode(s));
            out.push('\n');
        }
    }
    out
}

pub fn write_parallel_documents(docs: &[DocumentPair], src_path: &Path, tgt_path: &Path, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<()> {
    let src = format_documents(docs.iter().map(|d| d.src.as_slice()), src_vocab);
    let tgt = format_documents(docs.iter().map(|d| d.tgt.as_slice()), tgt_vocab);
    fs::write(src_path, src).map_err(|e| Error::io(src_path, e))?;
    fs::write(tgt_path, tgt).map_err(|e| Error::io(tgt_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_lines_separate_documents() {
        let v = Vocab::from_tokens(["a", "b", "c"]).unwrap();
        let docs = parse_parallel_documents("a b\n\nc\n", "a b\n\nc\n", &v, &v).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].src, vec![vec![4, 5]]);
        assert_eq!(docs[1].tgt, vec![vec![6]]);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocab::from_tokens(["a"]).unwrap();
        let docs = parse_parallel_documents("a zzz\n", "a\n", &v, &v).unwrap();
        assert_eq!(docs[0].src[0], vec![4, super::super::UNK]);
    }

    #[test]
    fn misalignment_names_the_document() {
        let v = Vocab::new();
        let err = parse_parallel_documents("a\nb\n", "a\nb\nc\n", &v, &v).unwrap_err();
        assert!(matches!(err, Error::Misaligned { doc: 0, .. }));
        let err = parse_parallel_documents("a\n\nb\n", "a\n", &v, &v).unwrap_err();
        assert!(matches!(err, Error::Misaligned { doc: 1, .. }));
        assert!(parse_documents("a\n\n\nb\n").is_err());
    }

    #[test]
    fn format_round_trip() {
        let v = Vocab::from_tokens(["a", "b"]).unwrap();
        let docs = vec![DocumentPair { id: 0, src: vec![vec![4], vec![5, 4]], tgt: vec![vec![4], vec![5]] }];
        let s = format_documents(docs.iter().map(|d| d.src.as_slice()), &v);
        assert_eq!(s, "a\nb a\n");
        let back = parse_parallel_documents(&s, &format_documents(docs.iter().map(|d| d.tgt.as_slice()), &v), &v, &v).unwrap();
        assert_eq!(back, docs);
    }
}
