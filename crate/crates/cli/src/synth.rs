//! Labelled synthetic corpora: random-byte files with planted family content.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigforge_core::ngram::LADDER;
use sigforge_core::Error as CoreError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthParams {
    pub families: usize,
    pub files_per_family: usize,
    pub heldout_per_family: usize,
    pub plants_per_family: usize,
    pub plant_len: usize,
    pub benign: usize,
    pub background: usize,
    /// Files per subfamily in the two-subfamily scenario; 0 skips it.
    pub subfamily_files: usize,
    pub file_size: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            families: 4,
            files_per_family: 20,
            heldout_per_family: 20,
            plants_per_family: 6,
            plant_len: 64,
            benign: 10_000,
            background: 2_000,
            subfamily_files: 10,
            file_size: 4096,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let smallest = LADDER[0];
        if self.plant_len < smallest {
            return Err(CoreError::Argument(format!(
                "plant length {} is below the smallest gram size {smallest}",
                self.plant_len
            ))
            .into());
        }
        if self.plants_per_family == 0 {
            return Err(CoreError::Argument("at least one plant per family is required".into()).into());
        }
        if self.plants_per_family * self.plant_len > self.file_size {
            return Err(CoreError::Argument(format!(
                "{} plants of {} bytes do not fit in {}-byte files",
                self.plants_per_family, self.plant_len, self.file_size
            ))
            .into());
        }
        Ok(())
    }
}

/// Where each part of a generated benchmark lives.
#[derive(Debug, Clone)]
pub struct BenchLayout {
    pub root: PathBuf,
    pub families: Vec<FamilyDirs>,
    pub subfamily: Option<FamilyDirs>,
    pub benign: PathBuf,
    pub background: PathBuf,
}

#[derive(Debug, Clone)]
pub struct FamilyDirs {
    pub label: String,
    pub train: PathBuf,
    pub heldout: PathBuf,
}

impl BenchLayout {
    pub fn new(root: &Path, params: &SynthParams) -> Self {
        let fam = |label: String, base: PathBuf| FamilyDirs {
            train: base.join("train"),
            heldout: base.join("heldout"),
            label,
        };
        BenchLayout {
            root: root.to_path_buf(),
            families: (0..params.families)
                .map(|f| {
                    let label = family_label(f);
                    let base = root.join("families").join(&label);
                    fam(label, base)
                })
                .collect(),
            subfamily: (params.subfamily_files > 0).then(|| fam("subfamily".into(), root.join("subfamily"))),
            benign: root.join("benign"),
            background: root.join("background"),
        }
    }
}

pub fn family_label(f: usize) -> String {
    format!("family_{f:02}")
}

fn random_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

/// A random file with every plant copied in, in random order, at random
/// non-overlapping offsets.
fn planted_file(rng: &mut ChaCha8Rng, plants: &[Vec<u8>], size: usize) -> Vec<u8> {
    let mut file = random_bytes(rng, size);
    let used: usize = plants.iter().map(Vec::len).sum();
    let slack = size - used;
    let mut gaps: Vec<usize> = (0..plants.len()).map(|_| rng.gen_range(0..=slack)).collect();
    gaps.sort_unstable();
    let mut order: Vec<usize> = (0..plants.len()).collect();
    order.shuffle(rng);
    let mut consumed = 0;
    for (gap, &p) in gaps.iter().zip(&order) {
        let at = gap + consumed;
        file[at..at + plants[p].len()].copy_from_slice(&plants[p]);
        consumed += plants[p].len();
    }
    file
}

struct Pending {
    path: PathBuf,
    label: String,
    split: String,
    bytes: Vec<u8>,
}

/// Writes the benchmark under `out`, which must be empty or absent.
pub fn generate_bench(out: &Path, params: &SynthParams) -> Result<BenchLayout> {
    params.validate()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?;
        if entries.next().is_some() {
            bail!(CoreError::Argument(format!("output directory {} is not empty", out.display())));
        }
    }
    let layout = BenchLayout::new(out, params);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let plant_set = |rng: &mut ChaCha8Rng| -> Vec<Vec<u8>> {
        (0..params.plants_per_family)
            .map(|_| random_bytes(rng, params.plant_len))
            .collect()
    };
    let family_plants: Vec<Vec<Vec<u8>>> = (0..params.families).map(|_| plant_set(&mut rng)).collect();
    let sub_plants: [Vec<Vec<u8>>; 2] = [plant_set(&mut rng), plant_set(&mut rng)];

    let mut files: Vec<Pending> = Vec::new();
    for (dirs, plants) in layout.families.iter().zip(&family_plants) {
        for (split, dir, count) in [
            ("train", &dirs.train, params.files_per_family),
            ("heldout", &dirs.heldout, params.heldout_per_family),
        ] {
            for i in 0..count {
                files.push(Pending {
                    path: dir.join(format!("{i:03}.bin")),
                    label: dirs.label.clone(),
                    split: split.into(),
                    bytes: planted_file(&mut rng, plants, params.file_size),
                });
            }
        }
    }
    if let Some(dirs) = &layout.subfamily {
        for (split, dir) in [("train", &dirs.train), ("heldout", &dirs.heldout)] {
            for (tag, plants) in ["a", "b"].iter().zip(&sub_plants) {
                for i in 0..params.subfamily_files {
                    files.push(Pending {
                        path: dir.join(format!("{tag}_{i:03}.bin")),
                        label: format!("{}_{tag}", dirs.label),
                        split: split.into(),
                        bytes: planted_file(&mut rng, plants, params.file_size),
                    });
                }
            }
        }
    }
    for (split, dir, count) in [
        ("benign", &layout.benign, params.benign),
        ("background", &layout.background, params.background),
    ] {
        for i in 0..count {
            files.push(Pending {
                path: dir.join(format!("{i:05}.bin")),
                label: split.into(),
                split: split.into(),
                bytes: random_bytes(&mut rng, params.file_size),
            });
        }
    }

    let mut manifest = String::from("path\tlabel\tsplit\n");
    for f in &files {
        if let Some(parent) = f.path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&f.path, &f.bytes).with_context(|| format!("writing {}", f.path.display()))?;
        let rel = f.path.strip_prefix(out).unwrap_or(&f.path);
        let _ = writeln!(manifest, "{}\t{}\t{}", rel.display(), f.label, f.split);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("manifest.tsv"), manifest).context("writing manifest.tsv")?;

    let mut plants_tsv = String::from("label\tindex\thex\n");
    let named = layout
        .families
        .iter()
        .map(|d| d.label.clone())
        .zip(&family_plants)
        .chain(
            layout
                .subfamily
                .iter()
                .flat_map(|d| ["a", "b"].map(|t| format!("{}_{t}", d.label)))
                .zip(&sub_plants),
        );
    for (label, plants) in named {
        for (i, p) in plants.iter().enumerate() {
            let _ = writeln!(plants_tsv, "{label}\t{i}\t{}", hex_string(p));
        }
    }
    fs::write(out.join("plants.tsv"), plants_tsv).context("writing plants.tsv")?;
    Ok(layout)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            families: 2,
            files_per_family: 3,
            heldout_per_family: 2,
            plants_per_family: 2,
            plant_len: 16,
            benign: 4,
            background: 3,
            subfamily_files: 2,
            file_size: 256,
            seed: 11,
        }
    }

    #[test]
    fn plants_are_embedded_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plants = vec![vec![0xAB; 40], vec![0xCD; 40], vec![0xEF; 40]];
        for _ in 0..50 {
            let f = planted_file(&mut rng, &plants, 128);
            assert_eq!(f.len(), 128);
            for p in &plants {
                assert!(f.windows(p.len()).any(|w| w == &p[..]));
            }
        }
    }

    #[test]
    fn short_plants_are_rejected() {
        let p = SynthParams { plant_len: 7, ..small() };
        let err = p.validate().unwrap_err();
        assert!(matches!(err.downcast_ref::<CoreError>(), Some(CoreError::Argument(_))));
        assert!(SynthParams { plant_len: 8, ..small() }.validate().is_ok());
    }

    #[test]
    fn layout_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let layout = generate_bench(dir.path(), &small()).unwrap();
        assert_eq!(fs::read_dir(&layout.families[1].train).unwrap().count(), 3);
        assert_eq!(fs::read_dir(&layout.families[0].heldout).unwrap().count(), 2);
        assert_eq!(fs::read_dir(&layout.subfamily.as_ref().unwrap().train).unwrap().count(), 4);
        assert_eq!(fs::read_dir(&layout.benign).unwrap().count(), 4);
        let manifest = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        // 2 * (3 + 2) + 2 * 2 * 2 + 4 + 3 files plus the header
        assert_eq!(manifest.lines().count(), 1 + 10 + 8 + 7);
        assert!(manifest.contains("families/family_01/train/002.bin\tfamily_01\ttrain"));
        let plants = fs::read_to_string(dir.path().join("plants.tsv")).unwrap();
        assert_eq!(plants.lines().count(), 1 + 2 * 2 + 2 * 2);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_bench(a.path(), &small()).unwrap();
        generate_bench(b.path(), &small()).unwrap();
        for entry in walkdir(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
        let c = tempfile::tempdir().unwrap();
        generate_bench(c.path(), &SynthParams { seed: 12, ..small() }).unwrap();
        assert_ne!(
            fs::read(a.path().join("benign/00000.bin")).unwrap(),
            fs::read(c.path().join("benign/00000.bin")).unwrap()
        );
    }

    #[test]
    fn refuses_non_empty_output() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("stale"), b"x").unwrap();
        assert!(generate_bench(dir.path(), &small()).is_err());
    }

    fn walkdir(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out
    }
}
