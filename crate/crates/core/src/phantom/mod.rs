//! Synthetic multi-sequence cardiac benchmark.
//!
//! Every subject has one anatomy (LV cavity, myocardial annulus with an
//! optional scar arc, RV crescent, background vessels). Source subjects are
//! rendered as both bSSFP-like and T2-like volumes, target subjects as
//! LGE-like volumes. Masks depend on the anatomy only, so the sequences
//! differ purely in appearance.
//!
//! A dataset directory holds `manifest.json` plus one SGVL image and mask
//! per subject and sequence. All randomness derives from the dataset seed
//! and the subject id, so generation is reproducible file for file.

mod geometry;
mod io;
mod render;

pub use geometry::{Anatomy, AnatomyConfig, SliceGeometry, SubjectGeometry, Tissue, MARGIN};
pub use io::{decode_image, decode_mask, encode_image, encode_mask, load_image, load_mask, save_image, save_mask};
pub use render::{render_domain, DomainAppearance, TissueLevel};

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{Domain, ImageVolume, LabelMask, Spacing, NUM_CLASSES};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// The canonical benchmark seed.
pub const CANONICAL_SEED: u64 = 42;

const STREAM_ANATOMY: u64 = 1;
const STREAM_SLICES: u64 = 2;
const STREAM_RENDER: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetFinetune,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::SourceVal,
        Split::TargetFinetune,
        Split::TargetTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::SourceTrain => "source-train",
            Split::SourceVal => "source-val",
            Split::TargetFinetune => "target-finetune",
            Split::TargetTest => "target-test",
        }
    }

    pub fn is_source(self) -> bool {
        matches!(self, Split::SourceTrain | Split::SourceVal)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| {
            Error::Dataset(format!(
                "unknown split `{s}`, expected one of source-train, source-val, target-finetune, target-test"
            ))
        })
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Subjects per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub source_train: usize,
    pub source_val: usize,
    pub target_finetune: usize,
    pub target_test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::SourceVal => self.source_val,
            Split::TargetFinetune => self.target_finetune,
            Split::TargetTest => self.target_test,
        }
    }
}

/// Per-sequence appearance models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearances {
    pub bssfp: DomainAppearance,
    pub t2: DomainAppearance,
    pub lge: DomainAppearance,
}

impl Appearances {
    pub fn get(&self, d: Domain) -> &DomainAppearance {
        match d {
            Domain::Bssfp => &self.bssfp,
            Domain::T2 => &self.t2,
            Domain::Lge => &self.lge,
        }
    }
}

/// Inclusive slice-count range per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRanges {
    pub bssfp: [usize; 2],
    pub t2: [usize; 2],
    pub lge: [usize; 2],
}

impl SliceRanges {
    pub fn get(&self, d: Domain) -> [usize; 2] {
        match d {
            Domain::Bssfp => self.bssfp,
            Domain::T2 => self.t2,
            Domain::Lge => self.lge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub counts: SplitCounts,
    /// Row, column and slice pitch in millimetres.
    pub spacing: [f64; 3],
    pub slices: SliceRanges,
    pub anatomy: AnatomyConfig,
    pub appearance: Appearances,
}

impl DatasetConfig {
    /// 96 x 96 slices, 16/4 source and 4/10 target subjects. Target
    /// volumes are short so that the fine-tuning pool stays small.
    pub fn desk() -> Self {
        Self {
            counts: SplitCounts {
                source_train: 16,
                source_val: 4,
                target_finetune: 4,
                target_test: 10,
            },
            spacing: [1.0, 1.0, 8.0],
            slices: SliceRanges {
                bssfp: [8, 12],
                t2: [3, 7],
                lge: [3, 6],
            },
            anatomy: AnatomyConfig::for_size(96),
            appearance: Appearances {
                bssfp: DomainAppearance::bssfp(),
                t2: DomainAppearance::t2(),
                lge: DomainAppearance::lge(),
            },
        }
    }

    /// 224 x 224 slices, 35/5 source and 5/40 target subjects.
    pub fn paper() -> Self {
        let k = 96.0 / 224.0;
        Self {
            counts: SplitCounts {
                source_train: 35,
                source_val: 5,
                target_finetune: 5,
                target_test: 40,
            },
            spacing: [k, k, 8.0],
            slices: SliceRanges {
                bssfp: [8, 12],
                t2: [3, 7],
                lge: [10, 18],
            },
            anatomy: AnatomyConfig::for_size(224),
            ..Self::desk()
        }
    }

    pub fn image_size(&self) -> usize {
        self.anatomy.image_size
    }

    pub fn spacing(&self) -> Result<Spacing> {
        let [r, c, s] = self.spacing;
        Spacing::new(r, c, s)
    }

    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            if self.counts.get(split) == 0 {
                return Err(Error::config(format!("split {split} needs at least one subject")));
            }
        }
        for d in Domain::ALL {
            let [lo, hi] = self.slices.get(d);
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("slice range [{lo}, {hi}] of {d} is invalid")));
            }
            self.appearance.get(d).validate()?;
        }
        self.spacing()?;
        self.anatomy.validate()
    }
}

pub fn source_id(i: usize) -> String {
    format!("src-{i:03}")
}

pub fn target_id(i: usize) -> String {
    format!("lge-{i:03}")
}

/// Anatomy of subject `id`, a function of `(seed, id)` only.
pub fn generate_anatomy(cfg: &AnatomyConfig, seed: u64, id: &str) -> Result<Anatomy> {
    cfg.validate()?;
    let mut rng = seed::stream(seed, &[STREAM_ANATOMY, seed::tag(id)]);
    Ok(Anatomy::random(cfg, &mut rng))
}

/// `slices` sections of subject `id` from base to apex.
pub fn generate_subject(cfg: &AnatomyConfig, seed: u64, id: &str, slices: usize) -> Result<SubjectGeometry> {
    if slices == 0 {
        return Err(Error::config("a subject needs at least one slice"));
    }
    Ok(generate_anatomy(cfg, seed, id)?.sample(slices))
}

/// Number of slices of subject `id` in `domain`.
pub fn slice_count(cfg: &DatasetConfig, seed: u64, id: &str, domain: Domain) -> usize {
    let [lo, hi] = cfg.slices.get(domain);
    seed::stream(seed, &[STREAM_SLICES, seed::tag(id), domain.tag() as u64]).random_range(lo..=hi)
}

/// Render subject `id` in `domain` exactly as [`make_dataset`] does.
pub fn render_subject(cfg: &DatasetConfig, seed: u64, id: &str, domain: Domain) -> Result<(ImageVolume, LabelMask)> {
    let geometry = generate_subject(&cfg.anatomy, seed, id, slice_count(cfg, seed, id, domain))?;
    let mut rng = seed::stream(seed, &[STREAM_RENDER, seed::tag(id), domain.tag() as u64]);
    render_domain(
        &geometry,
        domain,
        cfg.appearance.get(domain),
        cfg.spacing()?,
        id,
        &mut rng,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: Domain,
    pub split: Split,
    /// Relative to the dataset directory.
    pub image_path: String,
    pub mask_path: String,
    pub spacing: [f64; 3],
    pub slices: usize,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub config: DatasetConfig,
    pub subjects: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.subjects.iter().filter(move |e| e.split == split)
    }

    /// Distinct subject ids of a split, in manifest order.
    pub fn subject_ids(&self, split: Split) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for e in self.entries(split) {
            if !ids.contains(&e.id.as_str()) {
                ids.push(&e.id);
            }
        }
        ids
    }

    /// Split sizes match the configuration, source subjects carry both
    /// source sequences, and no subject sits in two splits of a domain.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: self.version,
                supported: MANIFEST_VERSION,
            });
        }
        for split in Split::ALL {
            let want = self.config.counts.get(split);
            let domains: &[Domain] = if split.is_source() {
                &[Domain::Bssfp, Domain::T2]
            } else {
                &[Domain::Lge]
            };
            for &d in domains {
                let n = self.entries(split).filter(|e| e.domain == d).count();
                if n != want {
                    return Err(Error::Dataset(format!(
                        "split {split} has {n} {d} volumes, config says {want}"
                    )));
                }
            }
            if let Some(e) = self.entries(split).find(|e| !domains.contains(&e.domain)) {
                return Err(Error::Dataset(format!(
                    "{} of domain {} is in split {split}",
                    e.id, e.domain
                )));
            }
        }
        let mut seen = std::collections::HashMap::new();
        for e in &self.subjects {
            if let Some(prev) = seen.insert((e.id.as_str(), e.domain), e.split) {
                return Err(Error::Dataset(format!(
                    "subject {} ({}) is listed in {prev} and {}",
                    e.id, e.domain, e.split
                )));
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Planned volumes of a dataset: (id, domain, split).
fn plan(cfg: &DatasetConfig) -> Vec<(String, Domain, Split)> {
    let c = cfg.counts;
    let mut out = Vec::new();
    for i in 0..c.source_train + c.source_val {
        let split = if i < c.source_train {
            Split::SourceTrain
        } else {
            Split::SourceVal
        };
        for d in [Domain::Bssfp, Domain::T2] {
            out.push((source_id(i), d, split));
        }
    }
    for i in 0..c.target_finetune + c.target_test {
        let split = if i < c.target_finetune {
            Split::TargetFinetune
        } else {
            Split::TargetTest
        };
        out.push((target_id(i), Domain::Lge, split));
    }
    out
}

/// Write the dataset under `dir` and return its manifest. Volumes are
/// generated in parallel; the files do not depend on scheduling.
pub fn make_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let subjects = plan(cfg)
        .into_par_iter()
        .map(|(id, domain, split)| -> Result<ManifestEntry> {
            let (image, mask) = render_subject(cfg, seed, &id, domain)?;
            let stem = format!("{id}_{domain}.sgvl");
            let (image_path, mask_path) = (format!("images/{stem}"), format!("masks/{stem}"));
            let (ib, mb) = (encode_image(&image), encode_mask(&mask));
            fs::write(dir.join(&image_path), &ib).map_err(|e| Error::io(dir.join(&image_path), e))?;
            fs::write(dir.join(&mask_path), &mb).map_err(|e| Error::io(dir.join(&mask_path), e))?;
            Ok(ManifestEntry {
                id,
                domain,
                split,
                image_path,
                mask_path,
                spacing: cfg.spacing,
                slices: image.dims().slices,
                image_sha256: sha256_hex(&ib),
                mask_sha256: sha256_hex(&mb),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        image_size: cfg.image_size(),
        num_classes: NUM_CLASSES,
        config: cfg.clone(),
        subjects,
    };
    manifest.validate()?;
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Hex sha256 of the manifest file of a dataset directory.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// One labelled volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSample {
    pub id: String,
    pub domain: Domain,
    pub image: ImageVolume,
    pub mask: LabelMask,
}

/// A dataset directory with a validated manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        manifest.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn read_checked(&self, rel: &str, sha: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != sha {
            return Err(Error::Dataset(format!(
                "{} does not match its manifest checksum",
                path.display()
            )));
        }
        Ok(bytes)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<SubjectSample> {
        let image = decode_image(
            &self.read_checked(&entry.image_path, &entry.image_sha256)?,
            &entry.id,
            entry.domain,
        )?;
        let mask = decode_mask(
            &self.read_checked(&entry.mask_path, &entry.mask_sha256)?,
            Some(self.manifest.num_classes),
        )?;
        if image.dims() != mask.dims() {
            return Err(Error::Dataset(format!(
                "{}: image {:?} and mask {:?} differ",
                entry.id,
                image.dims(),
                mask.dims()
            )));
        }
        Ok(SubjectSample {
            id: entry.id.clone(),
            domain: entry.domain,
            image,
            mask,
        })
    }

    /// All volumes of a split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SubjectSample>> {
        let entries: Vec<_> = self.manifest.entries(split).collect();
        if entries.is_empty() {
            return Err(Error::Dataset(format!("split {split} is empty")));
        }
        entries.into_iter().map(|e| self.load(e)).collect()
    }
}
