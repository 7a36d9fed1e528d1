//! Sample enumeration and byte access.
//!
//! A [`CorpusManifest`] is an ordered, immutable list of files. Ids are dense
//! and assigned after sorting paths lexicographically, so two scans of the
//! same tree always agree.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use log::warn;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// SHA-256 of a file's bytes.
pub type ContentDigest = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub id: usize,
    pub path: PathBuf,
    pub size_bytes: u64,
    pub content_digest: ContentDigest,
    /// Id of the first sample with identical content, if this one repeats it.
    pub duplicate_of: Option<usize>,
}

impl SampleRef {
    pub fn hex_digest(&self) -> String {
        hex::encode(self.content_digest)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub samples: Vec<SampleRef>,
    pub label: Option<String>,
    pub created_at: SystemTime,
}

impl PartialEq for CorpusManifest {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples && self.label == other.label
    }
}

impl CorpusManifest {
    /// Builds a manifest from explicit paths. Paths are sorted before ids are
    /// assigned; duplicates are flagged and optionally dropped.
    pub fn from_paths<I, P>(paths: I, dedup: bool) -> Result<Self>
    where
        I: IntoIterator<Item = P>,
        P: AsRef<Path>,
    {
        let mut paths: Vec<PathBuf> = paths.into_iter().map(|p| p.as_ref().to_path_buf()).collect();
        paths.sort();
        paths.dedup();

        let mut samples = Vec::with_capacity(paths.len());
        let mut first_by_digest: HashMap<ContentDigest, usize> = HashMap::new();
        for path in paths {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest: ContentDigest = Sha256::digest(&bytes).into();
            let id = samples.len();
            let duplicate_of = match first_by_digest.get(&digest) {
                Some(&first) => {
                    if dedup {
                        continue;
                    }
                    warn!(
                        "{} duplicates the content of sample {}",
                        path.display(),
                        first
                    );
                    Some(first)
                }
                None => {
                    first_by_digest.insert(digest, id);
                    None
                }
            };
            samples.push(SampleRef {
                id,
                path,
                size_bytes: bytes.len() as u64,
                content_digest: digest,
                duplicate_of,
            });
        }

        Ok(CorpusManifest {
            samples,
            label: None,
            created_at: SystemTime::now(),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.samples.iter().map(|s| s.size_bytes).sum()
    }

    pub fn duplicate_count(&self) -> usize {
        self.samples.iter().filter(|s| s.duplicate_of.is_some()).count()
    }

    /// Reads every sample into memory, in id order.
    pub fn load_all(&self, verify: bool) -> Result<Vec<Vec<u8>>> {
        self.samples.iter().map(|s| stream_bytes(s, verify)).collect()
    }

    /// Newline-delimited `id<TAB>hex_digest<TAB>size<TAB>path` records.
    pub fn to_tsv(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            let path = s.path.to_str().ok_or_else(|| {
                Error::Argument(format!("path is not valid UTF-8: {}", s.path.display()))
            })?;
            if path.contains('\n') || path.contains('\r') {
                return Err(Error::Argument(format!(
                    "path contains a line break: {path:?}"
                )));
            }
            writeln!(out, "{}\t{}\t{}\t{}", s.id, s.hex_digest(), s.size_bytes, path)
                .expect("writing to a String cannot fail");
        }
        Ok(out)
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        let mut first_by_digest: HashMap<ContentDigest, usize> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
            let mut fields = line.splitn(4, '\t');
            let id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("bad id"))?;
            let digest_hex = fields.next().ok_or_else(|| bad("missing digest"))?;
            let size_bytes: u64 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("bad size"))?;
            let path = fields.next().ok_or_else(|| bad("missing path"))?;
            let mut content_digest = [0u8; 32];
            hex::decode_to_slice(digest_hex, &mut content_digest).map_err(|_| bad("bad digest"))?;
            if id != samples.len() {
                return Err(bad("ids must be dense and ordered"));
            }
            let duplicate_of = match first_by_digest.get(&content_digest) {
                Some(&first) => Some(first),
                None => {
                    first_by_digest.insert(content_digest, id);
                    None
                }
            };
            samples.push(SampleRef {
                id,
                path: PathBuf::from(path),
                size_bytes,
                content_digest,
                duplicate_of,
            });
        }
        Ok(CorpusManifest {
            samples,
            label: None,
            created_at: SystemTime::now(),
        })
    }
}

/// Lists every regular file under `root` in lexicographic path order.
pub fn scan_corpus(root: &Path, recursive: bool, dedup: bool) -> Result<CorpusManifest> {
    let meta = fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a directory"),
        ));
    }

    let mut walker = WalkDir::new(root).min_depth(1);
    if !recursive {
        walker = walker.max_depth(1);
    }
    let mut paths = Vec::new();
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() {
            paths.push(entry.into_path());
        }
    }
    if paths.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no files found under {}",
            root.display()
        )));
    }

    let label = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned());
    let mut manifest = CorpusManifest::from_paths(paths, dedup)?;
    manifest.label = label;
    Ok(manifest)
}

/// Reads a sample's bytes, optionally checking them against the recorded
/// digest.
pub fn stream_bytes(sample: &SampleRef, verify: bool) -> Result<Vec<u8>> {
    let bytes = fs::read(&sample.path).map_err(|e| Error::io(&sample.path, e))?;
    if verify {
        let digest: ContentDigest = Sha256::digest(&bytes).into();
        if digest != sample.content_digest {
            return Err(Error::Integrity(format!(
                "{} changed since it was scanned",
                sample.path.display()
            )));
        }
    }
    Ok(bytes)
}
