//! On-disk slide embedding collections and a synthetic dataset generator.
//!
//! A dataset is a directory holding a JSON manifest plus one binary file per
//! slide. Each slide file is laid out as:
//!
//! ```text
//! b"SLPD" | version: u32 = 1 | num_regions: u32 | dim: u32 | num_regions * dim f32
//! ```
//!
//! All integers and floats are little-endian and the payload is row-major.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SLIDE_MAGIC: [u8; 4] = *b"SLPD";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: malformed manifest: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("{}: bad magic bytes {found:?}, expected \"SLPD\"", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{}: unsupported format version {found}", path.display())]
    Version { path: PathBuf, found: u32 },
    #[error("{}: truncated file, expected {expected} bytes, found {found}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{}: dimension {found} does not match dataset d_in {expected}", path.display())]
    DimensionMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{}: non-finite value at region {region}, coordinate {coord}", path.display())]
    NonFinite {
        path: PathBuf,
        region: usize,
        coord: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One region's raw feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub features: Vec<f32>,
    pub slide_id: String,
    pub region_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub slide_id: String,
    pub regions: Vec<RegionRecord>,
    pub label: Option<usize>,
}

impl Slide {
    /// Builds a slide from a row-per-region feature list, numbering regions in order.
    pub fn from_rows(
        slide_id: impl Into<String>,
        rows: Vec<Vec<f32>>,
        label: Option<usize>,
    ) -> Self {
        let slide_id = slide_id.into();
        let regions = rows
            .into_iter()
            .enumerate()
            .map(|(region_index, features)| RegionRecord {
                features,
                slide_id: slide_id.clone(),
                region_index,
            })
            .collect();
        Slide {
            slide_id,
            regions,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Region features widened to f64, in region order.
    pub fn features_f64(&self) -> Vec<Vec<f64>> {
        self.regions
            .iter()
            .map(|r| r.features.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideDataset {
    pub slides: Vec<Slide>,
    pub d_in: usize,
    pub num_classes: Option<usize>,
}

impl SlideDataset {
    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |msg: String| Err(StoreError::Invalid(msg));
        if self.d_in == 0 {
            return invalid("d_in must be positive".into());
        }
        if self.num_classes == Some(0) {
            return invalid("num_classes must be positive when present".into());
        }
        let mut seen = HashSet::new();
        for slide in &self.slides {
            if !seen.insert(slide.slide_id.as_str()) {
                return invalid(format!("duplicate slide_id {:?}", slide.slide_id));
            }
            if slide.regions.is_empty() {
                return invalid(format!("slide {:?} has no regions", slide.slide_id));
            }
            if let Some(label) = slide.label {
                match self.num_classes {
                    None => {
                        return invalid(format!(
                            "slide {:?} is labelled but num_classes is absent",
                            slide.slide_id
                        ))
                    }
                    Some(k) if label >= k => {
                        return invalid(format!(
                            "slide {:?} label {label} >= num_classes {k}",
                            slide.slide_id
                        ))
                    }
                    _ => {}
                }
            }
            for (i, region) in slide.regions.iter().enumerate() {
                if region.region_index != i || region.slide_id != slide.slide_id {
                    return invalid(format!(
                        "slide {:?} region {i} is misnumbered or misattributed",
                        slide.slide_id
                    ));
                }
                if region.features.len() != self.d_in {
                    return invalid(format!(
                        "slide {:?} region {i} has dimension {}, expected {}",
                        slide.slide_id,
                        region.features.len(),
                        self.d_in
                    ));
                }
                if let Some(coord) = region.features.iter().position(|v| !v.is_finite()) {
                    return invalid(format!(
                        "slide {:?} region {i} coordinate {coord} is not finite",
                        slide.slide_id
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.slides.iter().map(Slide::len).sum()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.slides.iter().map(|s| s.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d_in: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub slides: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Serializes one slide's regions into the binary slide format.
pub fn encode_slide(rows: &[Vec<f32>], dim: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + rows.len() * dim * 4);
    buf.extend_from_slice(&SLIDE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Parses the binary slide format. `path` is only used to label errors.
pub fn decode_slide(bytes: &[u8], path: &Path) -> Result<(usize, Vec<Vec<f32>>), StoreError> {
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != SLIDE_MAGIC {
        return Err(StoreError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(StoreError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let num_regions = word(8) as usize;
    let dim = word(12) as usize;
    let expected = HEADER_LEN + num_regions * dim * 4;
    if bytes.len() != expected {
        return Err(StoreError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let mut rows = Vec::with_capacity(num_regions);
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for region in 0..num_regions {
        let row: Vec<f32> = values.by_ref().take(dim).collect();
        if let Some(coord) = row.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                path: path.to_path_buf(),
                region,
                coord,
            });
        }
        rows.push(row);
    }
    Ok((dim, rows))
}

pub fn read_slide_file(path: &Path) -> Result<(usize, Vec<Vec<f32>>), StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_slide(&bytes, path)
}

pub fn write_slide_file(path: &Path, rows: &[Vec<f32>], dim: usize) -> Result<(), StoreError> {
    fs::write(path, encode_slide(rows, dim)).map_err(io_err(path))
}

/// Loads a dataset from its manifest. Slide files are read in parallel but
/// the result keeps manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<SlideDataset, StoreError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(StoreError::Version {
            path: manifest_path.to_path_buf(),
            found: manifest.version,
        });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let slides = manifest
        .slides
        .par_iter()
        .map(|entry| {
            let path = base.join(&entry.path);
            let (dim, rows) = read_slide_file(&path)?;
            if dim != manifest.d_in {
                return Err(StoreError::DimensionMismatch {
                    path,
                    expected: manifest.d_in,
                    found: dim,
                });
            }
            Ok(Slide::from_rows(entry.slide_id.clone(), rows, entry.label))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = SlideDataset {
        slides,
        d_in: manifest.d_in,
        num_classes: manifest.num_classes,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// File name used for a slide inside a dataset directory.
pub fn slide_file_name(index: usize) -> String {
    format!("slide_{index:05}.slpd")
}

/// Writes `manifest.json` plus one binary file per slide into `dir`.
pub fn write_dataset(dataset: &SlideDataset, dir: &Path) -> Result<PathBuf, StoreError> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(dataset.slides.len());
    for (i, slide) in dataset.slides.iter().enumerate() {
        let name = slide_file_name(i);
        let rows: Vec<Vec<f32>> = slide.regions.iter().map(|r| r.features.clone()).collect();
        write_slide_file(&dir.join(&name), &rows, dataset.d_in)?;
        entries.push(ManifestEntry {
            slide_id: slide.slide_id.clone(),
            path: name,
            label: slide.label,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        d_in: dataset.d_in,
        num_classes: dataset.num_classes,
        slides: entries,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

/// Parameters of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_slides: usize,
    pub regions_per_slide: usize,
    pub d_in: usize,
    pub num_classes: usize,
    pub class_separation: f64,
    pub within_slide_clusters: usize,
    /// Per-coordinate std of the shared background mean of all regions.
    pub background: f64,
    /// Per-coordinate std of the dataset-wide pattern means around the
    /// background.
    pub pattern_spread: f64,
    /// Per-coordinate std of each slide's blob offset from its pattern.
    pub slide_jitter: f64,
    /// Per-coordinate std of a region around its blob mean.
    pub region_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_slides: 40,
            regions_per_slide: 30,
            d_in: 32,
            num_classes: 2,
            class_separation: 3.0,
            within_slide_clusters: 2,
            background: BACKGROUND,
            pattern_spread: PATTERN_SPREAD,
            slide_jitter: SLIDE_JITTER,
            region_noise: REGION_NOISE,
            seed: 0,
        }
    }
}

pub const BACKGROUND: f64 = 1.0;
pub const PATTERN_SPREAD: f64 = 2.0;
pub const SLIDE_JITTER: f64 = 1.0;
pub const REGION_NOISE: f64 = 1.0;

/// Generates a labelled dataset of Gaussian blobs.
///
/// Every slide mixes `within_slide_clusters` blobs. Blob `b` of any slide is
/// centred on a dataset-wide pattern mean plus per-slide jitter, shifted by
/// `class_separation` along a unit direction owned by the slide's class.
/// Class directions are mutually orthogonal whenever `num_classes <= d_in`.
/// Labels are assigned round-robin.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SlideDataset, StoreError> {
    if cfg.num_slides == 0
        || cfg.regions_per_slide == 0
        || cfg.d_in == 0
        || cfg.num_classes == 0
        || cfg.within_slide_clusters == 0
    {
        return Err(StoreError::Invalid(
            "synthetic counts must be positive".into(),
        ));
    }
    for (name, v) in [
        ("class_separation", cfg.class_separation),
        ("background", cfg.background),
        ("pattern_spread", cfg.pattern_spread),
        ("slide_jitter", cfg.slide_jitter),
        ("region_noise", cfg.region_noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(StoreError::Invalid(format!(
                "{name} must be finite and >= 0"
            )));
        }
    }
    let d = cfg.d_in;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |rng: &mut ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let directions = class_directions(&mut rng, cfg.num_classes, d);
    let mut patterns: Vec<Vec<f64>> = (0..cfg.within_slide_clusters)
        .map(|_| gauss(&mut rng, d, cfg.pattern_spread))
        .collect();
    // Patterns are centred, then moved to a shared background mean.
    let mean = crate::vector::mean(&patterns);
    let background = gauss(&mut rng, d, cfg.background);
    for p in &mut patterns {
        p.iter_mut()
            .zip(&mean)
            .zip(&background)
            .for_each(|((a, m), b)| *a += b - m);
    }

    let mut slides = Vec::with_capacity(cfg.num_slides);
    for n in 0..cfg.num_slides {
        let label = n % cfg.num_classes;
        let shift: Vec<f64> = directions[label]
            .iter()
            .map(|u| cfg.class_separation * u)
            .collect();
        let means: Vec<Vec<f64>> = patterns
            .iter()
            .map(|p| {
                let jitter = gauss(&mut rng, d, cfg.slide_jitter);
                (0..d).map(|j| p[j] + jitter[j] + shift[j]).collect()
            })
            .collect();
        // Every blob is represented, the remainder is drawn uniformly.
        let mut blob_ids: Vec<usize> = (0..cfg.regions_per_slide)
            .map(|l| {
                if l < cfg.within_slide_clusters {
                    l
                } else {
                    rng.random_range(0..cfg.within_slide_clusters)
                }
            })
            .collect();
        blob_ids.shuffle(&mut rng);
        let rows = blob_ids
            .iter()
            .map(|&b| {
                let noise = gauss(&mut rng, d, cfg.region_noise);
                (0..d).map(|j| (means[b][j] + noise[j]) as f32).collect()
            })
            .collect();
        slides.push(Slide::from_rows(format!("slide_{n:04}"), rows, Some(label)));
    }
    Ok(SlideDataset {
        slides,
        d_in: d,
        num_classes: Some(cfg.num_classes),
    })
}

/// Unit vectors, Gram-Schmidt orthonormalized while the dimension allows.
fn class_directions(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if dirs.len() < d {
            for u in &dirs {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            dirs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    dirs
}
