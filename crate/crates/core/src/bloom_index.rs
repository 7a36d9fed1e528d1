//! Background-frequency index: one counting Bloom filter per gram size.
//!
//! Filters hold 16-bit saturating counters addressed by double hashing
//! (`h1 + i * h2`) over a seeded 128-bit xxh3 digest of the gram. Queries
//! return the minimum counter, so an inserted gram is never under-reported.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use xxhash_rust::xxh3::xxh3_128_with_seed;

use crate::error::{Error, Result};
use crate::ngram::{self, SampleSource, Strategy, LADDER};

pub const MAGIC: &[u8; 4] = b"AYBF";
pub const FORMAT_VERSION: u32 = 1;

pub const DEFAULT_LOG2_COUNTERS: u32 = 24;
pub const DEFAULT_NUM_HASHES: u32 = 7;
pub const DEFAULT_SEED: u64 = 0x243F_6A88_85A3_08D3;
pub const DEFAULT_TOP_K: usize = 1_000_000;
pub const DEFAULT_MIN_DOC_FRAC: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountingBloomFilter {
    n: usize,
    counters: Vec<u16>,
    num_hashes: u32,
    seed: u64,
}

impl CountingBloomFilter {
    pub fn new(n: usize, log2_counters: u32, num_hashes: u32, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("gram size must be positive".into()));
        }
        if !(2..=8).contains(&num_hashes) {
            return Err(Error::Argument(format!(
                "num_hashes must be in 2..=8, got {num_hashes}"
            )));
        }
        if log2_counters > 40 {
            return Err(Error::Argument(format!(
                "2^{log2_counters} counters is too many"
            )));
        }
        Ok(CountingBloomFilter {
            n,
            counters: vec![0; 1usize << log2_counters],
            num_hashes,
            seed,
        })
    }

    pub fn with_defaults(n: usize) -> Result<Self> {
        Self::new(n, DEFAULT_LOG2_COUNTERS, DEFAULT_NUM_HASHES, DEFAULT_SEED)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_counters(&self) -> usize {
        self.counters.len()
    }

    pub fn num_hashes(&self) -> u32 {
        self.num_hashes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counters(&self) -> &[u16] {
        &self.counters
    }

    fn check_len(&self, gram: &[u8]) -> Result<()> {
        if gram.len() != self.n {
            return Err(Error::Argument(format!(
                "gram of length {} given to the n = {} filter",
                gram.len(),
                self.n
            )));
        }
        Ok(())
    }

    fn positions(&self, gram: &[u8]) -> impl Iterator<Item = usize> {
        let digest = xxh3_128_with_seed(gram, self.seed);
        let h1 = digest as u64;
        let h2 = ((digest >> 64) as u64) | 1;
        let mask = (self.counters.len() - 1) as u64;
        (0..self.num_hashes as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) & mask) as usize)
    }

    pub fn insert(&mut self, gram: &[u8], count: u64) -> Result<()> {
        self.check_len(gram)?;
        if count == 0 {
            return Err(Error::Argument("insert count must be at least 1".into()));
        }
        let add = count.min(u16::MAX as u64) as u16;
        let positions: Vec<usize> = self.positions(gram).collect();
        for p in positions {
            self.counters[p] = self.counters[p].saturating_add(add);
        }
        Ok(())
    }

    /// Minimum over the gram's counters; 0 means definitely absent.
    pub fn query(&self, gram: &[u8]) -> Result<u16> {
        self.check_len(gram)?;
        Ok(self
            .positions(gram)
            .map(|p| self.counters[p])
            .min()
            .unwrap_or(0))
    }

    pub fn contains(&self, gram: &[u8]) -> Result<bool> {
        Ok(self.query(gram)? > 0)
    }

    /// Element-wise saturating addition of a filter with identical geometry.
    pub fn merge(&mut self, other: &CountingBloomFilter) -> Result<()> {
        if self.n != other.n
            || self.counters.len() != other.counters.len()
            || self.num_hashes != other.num_hashes
            || self.seed != other.seed
        {
            return Err(Error::Argument("cannot merge filters with different geometry".into()));
        }
        for (a, b) in self.counters.iter_mut().zip(&other.counters) {
            *a = a.saturating_add(*b);
        }
        Ok(())
    }

    /// Expected false-positive probability after `inserted` distinct grams.
    pub fn expected_fp_rate(&self, inserted: usize) -> f64 {
        let h = self.num_hashes as f64;
        (1.0 - (-h * inserted as f64 / self.counters.len() as f64).exp()).powf(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BloomIndex {
    pub filters: BTreeMap<usize, CountingBloomFilter>,
    pub train_file_count: u64,
    pub min_doc_frac: f64,
    /// Free-text description of the training corpus. Not persisted.
    pub built_from: String,
}

#[derive(Debug, Clone)]
pub struct IndexParams {
    pub k: usize,
    pub min_doc_frac: f64,
    pub log2_counters: u32,
    pub num_hashes: u32,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            k: DEFAULT_TOP_K,
            min_doc_frac: DEFAULT_MIN_DOC_FRAC,
            log2_counters: DEFAULT_LOG2_COUNTERS,
            num_hashes: DEFAULT_NUM_HASHES,
            seed: DEFAULT_SEED,
            strategy: Strategy::Auto,
        }
    }
}

/// Smallest document frequency strictly greater than `frac * files`.
pub fn min_doc_freq_for(frac: f64, files: u64) -> usize {
    let t = frac * files as f64;
    let r = t.round();
    let base = if (t - r).abs() <= 1e-9 * t.abs().max(1.0) {
        r
    } else {
        t.floor()
    };
    base.max(0.0) as usize + 1
}

impl BloomIndex {
    /// An index with an empty filter for every ladder size.
    pub fn empty(params: &IndexParams) -> Result<Self> {
        let filters = LADDER
            .iter()
            .map(|&n| {
                CountingBloomFilter::new(n, params.log2_counters, params.num_hashes, params.seed)
                    .map(|f| (n, f))
            })
            .collect::<Result<_>>()?;
        Ok(BloomIndex {
            filters,
            train_file_count: 0,
            min_doc_frac: params.min_doc_frac,
            built_from: String::new(),
        })
    }

    pub fn filter(&self, n: usize) -> Result<&CountingBloomFilter> {
        self.filters
            .get(&n)
            .ok_or_else(|| Error::Argument(format!("index has no filter for n = {n}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = CrcWriter::new(BufWriter::with_capacity(1 << 20, file));
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        let crc = w.crc;
        let mut inner = w.inner;
        inner
            .write_all(&crc.to_le_bytes())
            .and_then(|_| inner.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = CrcWriter::new(Vec::new());
        self.write_to(&mut w).expect("writing to memory cannot fail");
        let crc = w.crc;
        let mut out = w.inner;
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.train_file_count.to_le_bytes())?;
        w.write_all(&self.min_doc_frac.to_le_bytes())?;
        w.write_all(&(self.filters.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(1 << 16);
        for f in self.filters.values() {
            w.write_all(&(f.n as u32).to_le_bytes())?;
            w.write_all(&(f.counters.len() as u64).to_le_bytes())?;
            w.write_all(&f.num_hashes.to_le_bytes())?;
            w.write_all(&f.seed.to_le_bytes())?;
            for chunk in f.counters.chunks(1 << 15) {
                buf.clear();
                buf.extend(chunk.iter().flat_map(|c| c.to_le_bytes()));
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut index = Self::from_bytes(&bytes)?;
        index.built_from = path.display().to_string();
        Ok(index)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format("index file truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32c::crc32c(body) != stored {
            return Err(Error::Format("index checksum mismatch".into()));
        }

        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let train_file_count = r.u64()?;
        let min_doc_frac = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()? as usize;
        let mut filters = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let num_counters = r.u64()?;
            let num_hashes = r.u32()?;
            let seed = r.u64()?;
            if !num_counters.is_power_of_two() || !(2..=8).contains(&num_hashes) {
                return Err(Error::Format(format!("invalid geometry for n = {n}")));
            }
            let raw_len = num_counters
                .checked_mul(2)
                .and_then(|l| usize::try_from(l).ok())
                .ok_or_else(|| Error::Format("counter array too large".into()))?;
            let raw = r.take(raw_len)?;
            let counters = raw
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            let filter = CountingBloomFilter {
                n,
                counters,
                num_hashes,
                seed,
            };
            if filters.insert(n, filter).is_some() {
                return Err(Error::Format(format!("duplicate filter for n = {n}")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after last filter".into()));
        }
        if filters.keys().copied().ne(LADDER.iter().copied()) {
            return Err(Error::Format("index must hold exactly one filter per ladder size".into()));
        }
        Ok(BloomIndex {
            filters,
            train_file_count,
            min_doc_frac,
            built_from: String::new(),
        })
    }
}

struct CrcWriter<W> {
    inner: W,
    crc: u32,
}

impl<W> CrcWriter<W> {
    fn new(inner: W) -> Self {
        CrcWriter { inner, crc: 0 }
    }
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let written = self.inner.write(buf)?;
        self.crc = crc32c::crc32c_append(self.crc, &buf[..written]);
        Ok(written)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("index file truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Populates one filter per ladder size with the training corpus' top-`k`
/// grams whose document frequency exceeds `min_doc_frac` of the corpus.
pub fn build_index<S: SampleSource + ?Sized>(source: &S, params: &IndexParams) -> Result<BloomIndex> {
    let files = source.sample_count();
    if files == 0 {
        return Err(Error::EmptyCorpus("cannot build an index from zero files".into()));
    }
    if !(0.0..1.0).contains(&params.min_doc_frac) {
        return Err(Error::Argument(format!(
            "min_doc_frac must be in [0, 1), got {}",
            params.min_doc_frac
        )));
    }
    let min_df = min_doc_freq_for(params.min_doc_frac, files as u64);
    let mut index = BloomIndex::empty(params)?;
    index.train_file_count = files as u64;
    for &n in LADDER.iter() {
        let top = ngram::top_k(source, n, params.k, min_df, params.strategy)?;
        let filter = index.filters.get_mut(&n).expect("ladder filter exists");
        for g in &top.grams {
            filter.insert(&g.bytes, g.doc_freq as u64)?;
        }
        info!("n = {n}: {} background grams with df >= {min_df}", top.grams.len());
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(n: usize) -> CountingBloomFilter {
        CountingBloomFilter::new(n, 12, 4, 7).unwrap()
    }

    #[test]
    fn geometry_is_validated() {
        assert!(CountingBloomFilter::new(8, 10, 1, 0).is_err());
        assert!(CountingBloomFilter::new(8, 10, 9, 0).is_err());
        let f = CountingBloomFilter::new(8, 10, 2, 0).unwrap();
        assert_eq!(f.num_counters(), 1024);
    }

    #[test]
    fn insert_and_query() {
        let mut f = small(8);
        let g = b"ABCDEFGH";
        assert_eq!(f.query(g).unwrap(), 0);
        f.insert(g, 5).unwrap();
        assert!(f.query(g).unwrap() >= 5);
        let mut f = small(8);
        f.insert(g, 3).unwrap();
        f.insert(g, 3).unwrap();
        assert!(f.query(g).unwrap() >= 6);
        assert_eq!(f.query(g).unwrap(), f.query(g).unwrap());
    }

    #[test]
    fn counters_saturate() {
        let mut f = small(8);
        let g = b"saturate";
        f.insert(g, 40_000).unwrap();
        f.insert(g, 30_000).unwrap();
        assert_eq!(f.query(g).unwrap(), u16::MAX);
    }

    #[test]
    fn wrong_length_and_zero_count_rejected() {
        let mut f = small(8);
        assert!(matches!(f.insert(b"short", 1), Err(Error::Argument(_))));
        assert!(matches!(f.query(b"waytoolong"), Err(Error::Argument(_))));
        assert!(matches!(f.insert(b"ABCDEFGH", 0), Err(Error::Argument(_))));
    }

    #[test]
    fn no_false_negatives_and_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grams: Vec<[u8; 16]> = (0..2000).map(|_| rng.gen()).collect();
        let mut a = CountingBloomFilter::new(16, 14, 5, 3).unwrap();
        let mut b = a.clone();
        for (i, g) in grams.iter().enumerate() {
            if i % 2 == 0 {
                a.insert(g, 2).unwrap();
            } else {
                b.insert(g, 2).unwrap();
            }
        }
        a.merge(&b).unwrap();
        for g in &grams {
            assert!(a.query(g).unwrap() >= 2);
        }
        let other = CountingBloomFilter::new(16, 14, 5, 4).unwrap();
        assert!(a.merge(&other).is_err());
    }

    #[test]
    fn strict_threshold() {
        assert_eq!(min_doc_freq_for(0.001, 1000), 2);
        assert_eq!(min_doc_freq_for(0.001, 3000), 4);
        assert_eq!(min_doc_freq_for(0.001, 2500), 3);
        assert_eq!(min_doc_freq_for(0.001, 10), 1);
        assert_eq!(min_doc_freq_for(0.0, 10), 1);
    }

    fn params() -> IndexParams {
        IndexParams {
            k: 1000,
            log2_counters: 12,
            num_hashes: 4,
            ..IndexParams::default()
        }
    }

    #[test]
    fn threshold_at_one_thousand_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let twice = b"in two of them!!";
        let once = b"in only one file";
        let mut files: Vec<Vec<u8>> = (0..1000).map(|_| (0..24).map(|_| rng.gen()).collect()).collect();
        files[3].extend_from_slice(twice);
        files[700].extend_from_slice(twice);
        files[5].extend_from_slice(once);
        let index = build_index(files.as_slice(), &params()).unwrap();
        let f16 = index.filter(16).unwrap();
        assert!(f16.query(twice).unwrap() >= 2);
        assert_eq!(f16.query(once).unwrap(), 0);
        assert_eq!(index.train_file_count, 1000);
    }

    #[test]
    fn tiny_corpus_gram_everywhere() {
        let g = b"\x01\x02\x03\x04\x05\x06\x07\x08";
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let files: Vec<Vec<u8>> = (0..10)
            .map(|_| {
                let mut f: Vec<u8> = (0..40).map(|_| rng.gen()).collect();
                f.extend_from_slice(g);
                f
            })
            .collect();
        let index = build_index(files.as_slice(), &params()).unwrap();
        assert!(index.filter(8).unwrap().query(g).unwrap() >= 10);
    }

    #[test]
    fn empty_corpus_rejected() {
        let files: Vec<Vec<u8>> = Vec::new();
        assert!(matches!(
            build_index(files.as_slice(), &params()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let files: Vec<Vec<u8>> = (0..20).map(|_| (0..300).map(|_| rng.gen_range(0..3)).collect()).collect();
        let index = build_index(files.as_slice(), &params()).unwrap();
        let again = build_index(files.as_slice(), &params()).unwrap();
        let bytes = index.to_bytes();
        assert_eq!(bytes, again.to_bytes());
        let back = BloomIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, index);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.aybf");
        index.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        let loaded = BloomIndex::load(&path).unwrap();
        assert_eq!(loaded.filters, index.filters);

        assert!(matches!(
            BloomIndex::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Format(_))
        ));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(BloomIndex::from_bytes(&flipped), Err(Error::Format(_))));
        assert!(matches!(BloomIndex::from_bytes(b"AY"), Err(Error::Format(_))));
    }
}
