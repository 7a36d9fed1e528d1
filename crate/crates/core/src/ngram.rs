//! Large byte n-gram extraction.
//!
//! Frequencies here are document frequencies: a gram counts once per sample
//! no matter how often it repeats inside that sample. Two extraction paths
//! are provided. [`top_k_exact`] keeps every distinct gram (keyed by rolling
//! hash, verified byte-for-byte) and is used for small corpora.
//! [`top_k_hashgram`] is a two-pass, fixed-memory variant: pass one counts
//! hashes into a bucket array, pass two materialises only the grams whose
//! buckets ranked highest and counts them exactly.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::corpus::{stream_bytes, CorpusManifest};
use crate::error::{Error, Result};

/// Gram sizes considered by the pipeline.
pub const LADDER: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];

/// Multiplier of the polynomial rolling hash (odd, fixed across platforms).
pub const ROLLING_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

/// Number of buckets kept per requested gram in the second hash-gram pass.
pub const OVERSAMPLE: usize = 4;

/// Corpora up to this many bytes use the exact path under [`Strategy::Auto`].
pub const EXACT_PATH_LIMIT: u64 = 256 * 1024 * 1024;

const FILE_CHUNK: usize = 64;

pub fn is_ladder_size(n: usize) -> bool {
    LADDER.contains(&n)
}

/// Fractional bits of the fixed-point `c * log2(c)` terms.
const ENTROPY_FRAC_BITS: i32 = 40;

fn fixed_c_log_c(c: u32) -> u128 {
    if c <= 1 {
        return 0;
    }
    let x = c as f64;
    (x * x.log2() * 2f64.powi(ENTROPY_FRAC_BITS)).round() as u128
}

/// `c * log2(c)` in fixed point, tabulated up to the largest gram size.
fn c_log_c(c: u32) -> u128 {
    static TABLE: OnceLock<Vec<u128>> = OnceLock::new();
    let table = TABLE.get_or_init(|| (0..=LADDER[LADDER.len() - 1] as u32).map(fixed_c_log_c).collect());
    table.get(c as usize).copied().unwrap_or_else(|| fixed_c_log_c(c))
}

/// Shannon entropy of a byte string in bits per byte.
///
/// Computed as `log2(len) - sum(c log2 c) / len` with an integer sum, so
/// histograms that differ only by a byte permutation give identical values.
pub fn entropy(gram: &[u8]) -> Result<f64> {
    if gram.is_empty() {
        return Err(Error::Argument("entropy of an empty byte string".into()));
    }
    let mut counts = [0u32; 256];
    let mut present = [0u8; 256];
    let mut distinct = 0;
    for &b in gram {
        if counts[b as usize] == 0 {
            present[distinct] = b;
            distinct += 1;
        }
        counts[b as usize] += 1;
    }
    let weighted: u128 = present[..distinct].iter().map(|&b| c_log_c(counts[b as usize])).sum();
    if distinct == 1 {
        return Ok(0.0);
    }
    let len = gram.len() as f64;
    let h = len.log2() - weighted as f64 / 2f64.powi(ENTROPY_FRAC_BITS) / len;
    Ok(h.max(0.0))
}

/// Iterator over the polynomial hash of every length-`n` window.
///
/// `hash(w) = sum_i (w[i] + 1) * M^(n-1-i) mod 2^64`.
pub struct RollingHash<'a> {
    bytes: &'a [u8],
    n: usize,
    pos: usize,
    hash: u64,
    top_power: u64,
}

impl<'a> RollingHash<'a> {
    pub fn new(bytes: &'a [u8], n: usize) -> Self {
        assert!(n >= 1, "window size must be at least 1");
        let top_power = (1..n).fold(1u64, |acc, _| acc.wrapping_mul(ROLLING_MULTIPLIER));
        let hash = if bytes.len() >= n {
            bytes[..n].iter().fold(0u64, |h, &b| {
                h.wrapping_mul(ROLLING_MULTIPLIER).wrapping_add(b as u64 + 1)
            })
        } else {
            0
        };
        RollingHash {
            bytes,
            n,
            pos: 0,
            hash,
            top_power,
        }
    }
}

impl Iterator for RollingHash<'_> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        if self.pos + self.n > self.bytes.len() {
            return None;
        }
        let out = self.hash;
        if self.pos + self.n < self.bytes.len() {
            let leaving = self.bytes[self.pos] as u64 + 1;
            let entering = self.bytes[self.pos + self.n] as u64 + 1;
            self.hash = self
                .hash
                .wrapping_sub(leaving.wrapping_mul(self.top_power))
                .wrapping_mul(ROLLING_MULTIPLIER)
                .wrapping_add(entering);
        }
        self.pos += 1;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.bytes.len() + 1).saturating_sub(self.pos + self.n);
        (left, Some(left))
    }
}

impl ExactSizeIterator for RollingHash<'_> {}

/// One hash per window position; empty when the input is shorter than `n`.
pub fn rolling_hashes(bytes: &[u8], n: usize) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Argument("window size must be at least 1".into()));
    }
    Ok(RollingHash::new(bytes, n).collect())
}

/// Bijective 64-bit finaliser (splitmix64). Polynomial hashes have weak low
/// bits, so table keys and bucket indices go through this first.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn next_probe(key: u64) -> u64 {
    mix64(key ^ 0xA5A5_A5A5_A5A5_A5A5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramFeature {
    pub bytes: Vec<u8>,
    pub n: usize,
    pub doc_freq: usize,
    pub entropy: f64,
}

impl NGramFeature {
    pub fn new(bytes: Vec<u8>, doc_freq: usize) -> Result<Self> {
        let entropy = entropy(&bytes)?;
        Ok(NGramFeature {
            n: bytes.len(),
            bytes,
            doc_freq,
            entropy,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub n: usize,
    pub k_requested: usize,
    /// Sorted by `doc_freq` descending, then bytes ascending.
    pub grams: Vec<NGramFeature>,
    pub exact: bool,
}

/// Random access to sample bytes, either in memory or on disk.
pub trait SampleSource: Sync {
    fn sample_count(&self) -> usize;
    fn sample(&self, index: usize) -> Result<Cow<'_, [u8]>>;
    fn total_bytes(&self) -> u64;
}

impl<T: AsRef<[u8]> + Sync> SampleSource for [T] {
    fn sample_count(&self) -> usize {
        self.len()
    }

    fn sample(&self, index: usize) -> Result<Cow<'_, [u8]>> {
        Ok(Cow::Borrowed(self[index].as_ref()))
    }

    fn total_bytes(&self) -> u64 {
        self.iter().map(|s| s.as_ref().len() as u64).sum()
    }
}

impl SampleSource for CorpusManifest {
    fn sample_count(&self) -> usize {
        self.len()
    }

    fn sample(&self, index: usize) -> Result<Cow<'_, [u8]>> {
        stream_bytes(&self.samples[index], false).map(Cow::Owned)
    }

    fn total_bytes(&self) -> u64 {
        CorpusManifest::total_bytes(self)
    }
}

/// How [`top_k`] should count grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Exact below [`EXACT_PATH_LIMIT`] total bytes, hash-gram above it.
    Auto,
    Exact,
    HashGram { bucket_budget: usize },
}

pub fn default_bucket_budget(k: usize) -> usize {
    (k * 8).max(1 << 22)
}

fn gram_order(a_df: usize, a: &[u8], b_df: usize, b: &[u8]) -> Ordering {
    b_df.cmp(&a_df).then_with(|| a.cmp(b))
}

fn check_args(n: usize, k: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("gram size must be at least 1".into()));
    }
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    Ok(())
}

/// Sorts and truncates `(doc_freq, bytes)` candidates to the top `k`.
fn finish(
    mut items: Vec<(usize, &[u8])>,
    n: usize,
    k: usize,
    exact: bool,
) -> Result<TopKResult> {
    let cmp = |a: &(usize, &[u8]), b: &(usize, &[u8])| gram_order(a.0, a.1, b.0, b.1);
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
    let grams = items
        .into_iter()
        .map(|(df, bytes)| NGramFeature::new(bytes.to_vec(), df))
        .collect::<Result<Vec<_>>>()?;
    Ok(TopKResult {
        n,
        k_requested: k,
        grams,
        exact,
    })
}

/// Exact top-`k` grams by document frequency.
pub fn top_k_exact<S: SampleSource + ?Sized>(source: &S, n: usize, k: usize) -> Result<TopKResult> {
    top_k_exact_min_df(source, n, k, 1)
}

/// As [`top_k_exact`], ignoring grams found in fewer than `min_doc_freq`
/// samples. Equivalent to taking the top `k` and then dropping rare grams,
/// since the threshold is monotone in the ranking key.
pub fn top_k_exact_min_df<S: SampleSource + ?Sized>(
    source: &S,
    n: usize,
    k: usize,
    min_doc_freq: usize,
) -> Result<TopKResult> {
    check_args(n, k)?;
    let count = source.sample_count();
    let files: Vec<Cow<'_, [u8]>> = (0..count)
        .into_par_iter()
        .map(|i| source.sample(i))
        .collect::<Result<_>>()?;
    if files.len() > u32::MAX as usize || files.iter().any(|f| f.len() > u32::MAX as usize) {
        return Err(Error::Argument("corpus too large for the exact path".into()));
    }

    #[derive(Clone, Copy)]
    struct Slot {
        file: u32,
        offset: u32,
        df: u32,
        /// Last file counted, so repeats inside one file count once.
        last: u32,
    }
    let window = |file: u32, offset: u32| -> &[u8] {
        &files[file as usize][offset as usize..offset as usize + n]
    };

    let mut table: FxHashMap<u64, Slot> = FxHashMap::default();
    for chunk_start in (0..files.len()).step_by(FILE_CHUNK) {
        let chunk_end = (chunk_start + FILE_CHUNK).min(files.len());
        let per_file: Vec<Vec<u64>> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|fi| RollingHash::new(&files[fi], n).map(mix64).collect())
            .collect();
        for (fi, keys) in (chunk_start..chunk_end).zip(per_file) {
            let fi = fi as u32;
            for (offset, key) in keys.into_iter().enumerate() {
                let offset = offset as u32;
                let bytes = window(fi, offset);
                let mut key = key;
                loop {
                    match table.entry(key) {
                        Entry::Vacant(v) => {
                            v.insert(Slot {
                                file: fi,
                                offset,
                                df: 1,
                                last: fi,
                            });
                            break;
                        }
                        Entry::Occupied(mut o) => {
                            let slot = o.get_mut();
                            if window(slot.file, slot.offset) == bytes {
                                if slot.last != fi {
                                    slot.df += 1;
                                    slot.last = fi;
                                }
                                break;
                            }
                            key = next_probe(key);
                        }
                    }
                }
            }
        }
    }

    let items: Vec<(usize, &[u8])> = table
        .values()
        .filter(|s| s.df as usize >= min_doc_freq)
        .map(|s| (s.df as usize, window(s.file, s.offset)))
        .collect();
    finish(items, n, k, true)
}

/// Fixed-memory two-pass top-`k`. The result is flagged `exact = false`.
pub fn top_k_hashgram<S: SampleSource + ?Sized>(
    source: &S,
    n: usize,
    k: usize,
    bucket_budget: usize,
) -> Result<TopKResult> {
    top_k_hashgram_min_df(source, n, k, bucket_budget, 1)
}

pub fn top_k_hashgram_min_df<S: SampleSource + ?Sized>(
    source: &S,
    n: usize,
    k: usize,
    bucket_budget: usize,
    min_doc_freq: usize,
) -> Result<TopKResult> {
    check_args(n, k)?;
    if bucket_budget < 8 * k {
        return Err(Error::Argument(format!(
            "bucket budget {bucket_budget} is below 8 * k = {}",
            8 * k
        )));
    }
    let count = source.sample_count();
    let bucket_of = |key: u64| (key % bucket_budget as u64) as usize;

    // Pass 1: per-file distinct hashes into bucket counters.
    let mut counters = vec![0u32; bucket_budget];
    for chunk_start in (0..count).step_by(FILE_CHUNK) {
        let chunk_end = (chunk_start + FILE_CHUNK).min(count);
        let per_file: Vec<Vec<u64>> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|i| {
                let bytes = source.sample(i)?;
                let mut keys: Vec<u64> = RollingHash::new(&bytes, n).map(mix64).collect();
                keys.sort_unstable();
                keys.dedup();
                Ok(keys)
            })
            .collect::<Result<_>>()?;
        for keys in per_file {
            for key in keys {
                let c = &mut counters[bucket_of(key)];
                *c = c.saturating_add(1);
            }
        }
    }

    // Keep every bucket at least as full as the (k * OVERSAMPLE)-th fullest.
    let wanted = (k * OVERSAMPLE).min(bucket_budget);
    let mut sorted = counters.clone();
    sorted.select_nth_unstable_by(wanted - 1, |a, b| b.cmp(a));
    let cutoff = sorted[wanted - 1].max(min_doc_freq as u32).max(1);
    drop(sorted);
    let selected: Vec<bool> = counters.iter().map(|&c| c >= cutoff).collect();
    drop(counters);

    // Pass 2: exact document frequencies for grams in the selected buckets.
    let mut table: HashMap<Box<[u8]>, (u32, u32)> = HashMap::new();
    for chunk_start in (0..count).step_by(FILE_CHUNK) {
        let chunk_end = (chunk_start + FILE_CHUNK).min(count);
        let per_file: Vec<(Cow<'_, [u8]>, Vec<u32>)> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|i| {
                let bytes = source.sample(i)?;
                let offsets = RollingHash::new(&bytes, n)
                    .enumerate()
                    .filter(|&(_, h)| selected[bucket_of(mix64(h))])
                    .map(|(off, _)| off as u32)
                    .collect();
                Ok((bytes, offsets))
            })
            .collect::<Result<_>>()?;
        for (fi, (bytes, offsets)) in (chunk_start..chunk_end).zip(per_file) {
            let fi = fi as u32;
            for off in offsets {
                let gram = &bytes[off as usize..off as usize + n];
                match table.get_mut(gram) {
                    Some(entry) => {
                        if entry.1 != fi {
                            entry.0 += 1;
                            entry.1 = fi;
                        }
                    }
                    None => {
                        table.insert(gram.into(), (1, fi));
                    }
                }
            }
        }
    }

    let items: Vec<(usize, &[u8])> = table
        .iter()
        .filter(|(_, &(df, _))| df as usize >= min_doc_freq)
        .map(|(g, &(df, _))| (df as usize, &g[..]))
        .collect();
    finish(items, n, k, false)
}

/// Dispatches to the exact or hash-gram path.
pub fn top_k<S: SampleSource + ?Sized>(
    source: &S,
    n: usize,
    k: usize,
    min_doc_freq: usize,
    strategy: Strategy,
) -> Result<TopKResult> {
    match strategy {
        Strategy::Exact => top_k_exact_min_df(source, n, k, min_doc_freq),
        Strategy::HashGram { bucket_budget } => {
            top_k_hashgram_min_df(source, n, k, bucket_budget, min_doc_freq)
        }
        Strategy::Auto if source.total_bytes() <= EXACT_PATH_LIMIT => {
            top_k_exact_min_df(source, n, k, min_doc_freq)
        }
        Strategy::Auto => top_k_hashgram_min_df(source, n, k, default_bucket_budget(k), min_doc_freq),
    }
}

/// For each gram, the sorted ids of the samples that contain it.
pub fn containing_samples<S: SampleSource + ?Sized>(
    source: &S,
    grams: &[Vec<u8>],
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); grams.len()];
    let Some(n) = grams.first().map(Vec::len) else {
        return Ok(out);
    };
    if grams.iter().any(|g| g.len() != n) {
        return Err(Error::Argument("grams of mixed sizes".into()));
    }
    if n == 0 {
        return Err(Error::Argument("empty gram".into()));
    }
    let mut by_key: FxHashMap<u64, Vec<usize>> = FxHashMap::default();
    for (gi, g) in grams.iter().enumerate() {
        let h = RollingHash::new(g, n).next().expect("gram has one window");
        by_key.entry(mix64(h)).or_default().push(gi);
    }
    let per_file: Vec<Vec<usize>> = (0..source.sample_count())
        .into_par_iter()
        .map(|fi| {
            let bytes = source.sample(fi)?;
            let mut found = vec![false; grams.len()];
            for (off, h) in RollingHash::new(&bytes, n).enumerate() {
                if let Some(cands) = by_key.get(&mix64(h)) {
                    let w = &bytes[off..off + n];
                    for &gi in cands {
                        if !found[gi] && grams[gi] == w {
                            found[gi] = true;
                        }
                    }
                }
            }
            Ok(found
                .iter()
                .enumerate()
                .filter_map(|(gi, &f)| f.then_some(gi))
                .collect())
        })
        .collect::<Result<_>>()?;
    for (fi, hits) in per_file.into_iter().enumerate() {
        for gi in hits {
            out[gi].push(fi);
        }
    }
    Ok(out)
}
