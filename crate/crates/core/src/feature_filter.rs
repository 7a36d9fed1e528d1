//! Candidate gram pruning before biclustering.

use std::collections::HashMap;

use fixedbitset::FixedBitSet;

use crate::bloom_index::CountingBloomFilter;
use crate::error::{Error, Result};
use crate::ngram::{self, entropy, NGramFeature, SampleSource, TopKResult};

/// Grams at or below this entropy (bits per byte) are dropped.
pub const MIN_ENTROPY: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOccurrence {
    pub gram: NGramFeature,
    /// Bit `i` is set iff sample `i` contains the gram.
    pub file_set: FixedBitSet,
}

impl FeatureOccurrence {
    pub fn new(gram: NGramFeature, sample_count: usize, samples: &[usize]) -> Self {
        let mut file_set = FixedBitSet::with_capacity(sample_count);
        for &s in samples {
            file_set.insert(s);
        }
        FeatureOccurrence { gram, file_set }
    }

    pub fn doc_freq(&self) -> usize {
        self.file_set.count_ones(..)
    }

    /// Locates every gram of `top` in `source`, producing one occurrence per
    /// gram that appears in at least one sample.
    pub fn collect<S: SampleSource + ?Sized>(source: &S, top: &TopKResult) -> Result<Vec<Self>> {
        let grams: Vec<Vec<u8>> = top.grams.iter().map(|g| g.bytes.clone()).collect();
        let sets = ngram::containing_samples(source, &grams)?;
        let count = source.sample_count();
        Ok(top
            .grams
            .iter()
            .zip(sets)
            .filter(|(_, set)| !set.is_empty())
            .map(|(g, set)| {
                let mut gram = g.clone();
                gram.doc_freq = set.len();
                FeatureOccurrence::new(gram, count, &set)
            })
            .collect())
    }
}

/// Number of 0x00 / 0xFF bytes in the gram.
pub fn padding_bytes(gram: &[u8]) -> usize {
    gram.iter().filter(|&&b| b == 0x00 || b == 0xFF).count()
}

/// At least half of the gram is 0x00 / 0xFF.
pub fn is_padding_like(gram: &[u8]) -> bool {
    2 * padding_bytes(gram) >= gram.len()
}

/// Drops padding-like, low-entropy and background-common grams, then keeps a
/// single highest-entropy representative per distinct file set. Survivors
/// keep their input order.
pub fn filter_simple(
    candidates: &[FeatureOccurrence],
    filter: &CountingBloomFilter,
) -> Result<Vec<FeatureOccurrence>> {
    for c in candidates {
        if c.gram.bytes.len() != filter.n() {
            return Err(Error::Argument(format!(
                "candidate of length {} does not match the n = {} filter",
                c.gram.bytes.len(),
                filter.n()
            )));
        }
    }

    let mut kept: Vec<(usize, f64)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let bytes = &c.gram.bytes;
        if is_padding_like(bytes) {
            continue;
        }
        let h = entropy(bytes)?;
        if h <= MIN_ENTROPY {
            continue;
        }
        if filter.query(bytes)? > 0 {
            continue;
        }
        kept.push((i, h));
    }

    // winner per file set: max entropy, then smallest bytes
    let mut best: HashMap<&FixedBitSet, (usize, f64)> = HashMap::new();
    for &(i, h) in &kept {
        let set = &candidates[i].file_set;
        match best.get_mut(set) {
            None => {
                best.insert(set, (i, h));
            }
            Some(cur) => {
                let better = h > cur.1
                    || (h == cur.1 && candidates[i].gram.bytes < candidates[cur.0].gram.bytes);
                if better {
                    *cur = (i, h);
                }
            }
        }
    }
    Ok(kept
        .iter()
        .filter(|&&(i, _)| best[&candidates[i].file_set].0 == i)
        .map(|&(i, _)| candidates[i].clone())
        .collect())
}
