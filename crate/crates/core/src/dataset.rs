//! Directory-per-class image corpora.
//!
//! Labeled domains (non-makeup faces, evaluation frames) are laid out as
//! `root/<class name>/<image>`; class indices are the lexicographic rank of
//! the subdirectory names. The makeup domain is a flat directory of images
//! without labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// Environment variable naming an optional directory for decoded images.
pub const CACHE_ENV: &str = "ADVMAKEUP_CACHE";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DomainTag {
    /// Faces without makeup, the source domain `X`.
    NonMakeup,
    /// Faces wearing makeup, the target domain `Y`.
    Makeup,
    /// Evaluation frames of a known identity.
    Frame,
}

impl DomainTag {
    pub fn is_labeled(self) -> bool {
        !matches!(self, DomainTag::Makeup)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub domain_tag: DomainTag,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: Option<usize>,
    pub source_path: PathBuf,
    pub domain_tag: DomainTag,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.starts_with('.'))
        .unwrap_or(false)
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.retain(|p| !is_hidden(p));
    out.sort();
    Ok(out)
}

/// Decodes `path`, resizes it bilinearly to `target_size x target_size` and
/// scales to `[0, 1]`. Grayscale and alpha inputs are converted to RGB.
pub fn load_image(path: &Path, target_size: usize) -> Result<ImageTensor> {
    Ok(decode_image(path)?.resize(target_size, target_size))
}

/// Decodes `path` at its native resolution.
pub fn decode_image(path: &Path) -> Result<ImageTensor> {
    if !is_image(path) {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let format = ::image::guess_format(&bytes)
        .map_err(|_| Error::UnsupportedFormat(path.to_path_buf()))?;
    if !matches!(format, ::image::ImageFormat::Png | ::image::ImageFormat::Jpeg) {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let decoded =
        ::image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(ImageTensor::from_rgb8(&decoded.into_rgb8()))
}

/// Like [`load_image`], but consults the directory named by
/// `ADVMAKEUP_CACHE` (when set) for a previously decoded copy.
pub fn load_image_cached(path: &Path, target_size: usize) -> Result<ImageTensor> {
    let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return load_image(path, target_size);
    };
    let meta = fs::metadata(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut hasher = Sha256::new();
    hasher.update(path.to_string_lossy().as_bytes());
    hasher.update(meta.len().to_le_bytes());
    if let Ok(modified) = meta.modified() {
        if let Ok(d) = modified.duration_since(std::time::UNIX_EPOCH) {
            hasher.update(d.as_nanos().to_le_bytes());
        }
    }
    hasher.update((target_size as u64).to_le_bytes());
    let key: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let cached = dir.join(format!("{key}.f32"));
    if let Ok(raw) = fs::read(&cached) {
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Ok(img) = ImageTensor::new(target_size, target_size, data) {
            return Ok(img);
        }
    }
    let img = load_image(path, target_size)?;
    let raw: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    // a failed cache write only costs a re-decode next time
    if fs::create_dir_all(&dir).is_ok() {
        let _ = fs::write(&cached, raw);
    }
    Ok(img)
}

/// Builds a manifest for `root`. Labeled domains expect one subdirectory per
/// class; the makeup domain expects loose images.
pub fn scan_manifest(root: &Path, domain_tag: DomainTag) -> Result<DatasetManifest> {
    let children = sorted_children(root)?;
    let dirs: Vec<&PathBuf> = children.iter().filter(|p| p.is_dir()).collect();
    let files: Vec<&PathBuf> = children
        .iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect();

    let mut entries = Vec::new();
    let mut class_names = Vec::new();
    if domain_tag.is_labeled() {
        if !files.is_empty() {
            return Err(Error::MixedLayout(root.to_path_buf()));
        }
        for dir in dirs {
            let images: Vec<PathBuf> = sorted_children(dir)?
                .into_iter()
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            if images.is_empty() {
                continue;
            }
            let label = class_names.len();
            class_names.push(
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
            for img in images {
                entries.push(ManifestEntry {
                    path: img.strip_prefix(root).unwrap_or(&img).to_path_buf(),
                    label: Some(label),
                });
            }
        }
    } else {
        if !dirs.is_empty() && !files.is_empty() {
            return Err(Error::MixedLayout(root.to_path_buf()));
        }
        for img in files {
            entries.push(ManifestEntry {
                path: img.strip_prefix(root).unwrap_or(img).to_path_buf(),
                label: None,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        domain_tag,
        num_classes: class_names.len(),
        entries,
        class_names,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn full_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Checks label presence and range. Subsets (one attacker, one frame
    /// sequence) need not cover every class.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDataset(self.root.clone()));
        }
        for e in &self.entries {
            match (self.domain_tag.is_labeled(), e.label) {
                (true, Some(l)) if l < self.num_classes => {}
                (true, Some(l)) => {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        num_classes: self.num_classes,
                    })
                }
                (false, None) => {}
                (labeled, _) => {
                    return Err(Error::InvalidConfig(format!(
                        "entry {} label presence does not match domain (labeled = {labeled})",
                        e.path.display()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Entries whose label equals `label`.
    pub fn filter_label(&self, label: usize) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.label == Some(label))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Decodes every entry into memory.
    pub fn load_samples(&self, image_size: usize) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                let path = self.full_path(e);
                Ok(Sample {
                    image: load_image_cached(&path, image_size)?,
                    label: e.label,
                    source_path: path,
                    domain_tag: self.domain_tag,
                })
            })
            .collect()
    }
}

/// Index batches for one epoch. Without shuffling the order is manifest
/// order; with shuffling it is a seeded permutation. The last batch may be
/// short.
pub fn batch_indices(
    len: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Batches of manifest entries for one epoch.
pub fn batch_iter(
    manifest: &DatasetManifest,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<&ManifestEntry>> + '_> {
    let batches = batch_indices(manifest.len(), batch_size, shuffle, seed)?;
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &manifest.entries[i]).collect()))
}

/// Batches of already decoded samples for one epoch.
pub fn sample_batches(
    samples: &[Sample],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Vec<&Sample>>> {
    Ok(batch_indices(samples.len(), batch_size, shuffle, seed)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| &samples[i]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, rgb: [u8; 3]) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        ::image::RgbImage::from_pixel(8, 8, ::image::Rgb(rgb))
            .save(path)
            .unwrap();
    }

    #[test]
    fn white_and_black_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("w.png");
        let black = dir.path().join("b.png");
        write_png(&white, [255; 3]);
        write_png(&black, [0; 3]);
        let w = load_image(&white, 8).unwrap();
        let b = load_image(&black, 8).unwrap();
        assert_eq!(w.dim(), 8 * 8 * 3);
        assert!(w.data().iter().all(|&v| v == 1.0));
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(
            load_image(&missing, 8),
            Err(Error::UnreadableFile { .. })
        ));
        let txt = dir.path().join("a.txt");
        fs::write(&txt, "hi").unwrap();
        assert!(matches!(load_image(&txt, 8), Err(Error::UnsupportedFormat(_))));
        let fake = dir.path().join("fake.png");
        fs::write(&fake, "not a png at all").unwrap();
        assert!(matches!(load_image(&fake, 8), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        ::image::GrayImage::from_pixel(4, 4, ::image::Luma([51]))
            .save(&p)
            .unwrap();
        let img = load_image(&p, 4).unwrap();
        assert!(img.data().iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn scan_assigns_lexicographic_labels() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_png(&dir.path().join(format!("bob/{i}.png")), [1, 2, 3]);
        }
        for i in 0..2 {
            write_png(&dir.path().join(format!("alice/{i}.png")), [1, 2, 3]);
        }
        let m = scan_manifest(dir.path(), DomainTag::NonMakeup).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.num_classes, 2);
        assert_eq!(m.class_names, vec!["alice", "bob"]);
        assert_eq!(m.entries[0].label, Some(0));
        assert_eq!(m.entries[0].path, PathBuf::from("alice/0.png"));
        assert_eq!(m.entries[4].label, Some(1));
        m.validate().unwrap();
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_manifest(dir.path(), DomainTag::Makeup),
            Err(Error::EmptyDataset(_))
        ));
        write_png(&dir.path().join("a/0.png"), [0; 3]);
        write_png(&dir.path().join("loose.png"), [0; 3]);
        assert!(matches!(
            scan_manifest(dir.path(), DomainTag::NonMakeup),
            Err(Error::MixedLayout(_))
        ));
        assert!(matches!(
            scan_manifest(dir.path(), DomainTag::Makeup),
            Err(Error::MixedLayout(_))
        ));
    }

    #[test]
    fn flat_makeup_domain_is_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_png(&dir.path().join(format!("{i}.png")), [9; 3]);
        }
        fs::write(dir.path().join("notes.json"), "{}").unwrap();
        let m = scan_manifest(dir.path(), DomainTag::Makeup).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.num_classes, 0);
        assert!(m.entries.iter().all(|e| e.label.is_none()));
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("data/x/0.png"), [0; 3]);
        let m = scan_manifest(&dir.path().join("data"), DomainTag::Frame).unwrap();
        let p = dir.path().join("manifest.json");
        m.save_json(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["domain_tag"], "FRAME");
        assert_eq!(v["entries"][0]["label"], 0);
        assert_eq!(DatasetManifest::load_json(&p).unwrap(), m);
    }

    #[test]
    fn batches_partition_in_order() {
        let b = batch_indices(5, 2, false, 0).unwrap();
        assert_eq!(b, vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert!(batch_indices(5, 0, false, 0).is_err());
    }

    #[test]
    fn shuffled_batches_are_seeded() {
        let a = batch_indices(5, 2, true, 7).unwrap();
        let b = batch_indices(5, 2, true, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn paper_sized_epoch_has_92_batches() {
        let b = batch_indices(2286, 25, true, 1).unwrap();
        assert_eq!(b.len(), 92);
        assert_eq!(b.iter().filter(|x| x.len() == 25).count(), 91);
        assert_eq!(b.last().unwrap().len(), 11);
    }
}
