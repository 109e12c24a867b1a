//! Parallel documents, vocabularies, corpus files, and the synthetic
//! disambiguation task.

mod contrastive;
mod io;
mod synthetic;
mod vocab;

use std::collections::BTreeMap;

pub use contrastive::{
    format_contrastive_items, generate_contrastive_set, parse_contrastive_items, read_contrastive_items, write_contrastive_items,
    ContrastiveItem,
};
pub use io::{format_documents, load_documents, load_parallel_documents, parse_documents, parse_parallel_documents, write_parallel_documents};
pub use synthetic::{
    find_plant, generate_synthetic_docs, synthetic_vocabs, DistanceDistribution, Plant, SyntheticConfig, SyntheticCorpus, SyntheticIds,
    AMBIGUOUS,
};
pub use vocab::{Vocab, BOS, EOS, PAD, RESERVED, UNK};

/// Aligned source and target sentences of one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentPair {
    pub id: usize,
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl DocumentPair {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Space-separated `key=value` fields of one line.
pub(crate) fn parse_kv_line(line: &str) -> BTreeMap<&str, &str> {
    line.split_whitespace().filter_map(|f| f.split_once('=')).collect()
}
