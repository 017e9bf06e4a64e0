//! Deterministic synthetic shapes-segmentation dataset.
//!
//! Every sample is a 3-channel image of 1–4 textured geometric shapes over a
//! noise background. Shape classes carry two deliberate structural cues:
//!
//! - classes share base colors in groups of three, so color alone cannot
//!   separate them;
//! - each class has a preferred vertical band, so absolute position is
//!   genuinely predictive.
//!
//! Generation is a pure function of `(DatasetSpec, sample_id)`; samples can
//! be produced in any order or in parallel and always yield identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, splitmix64, tags};

/// Sentinel label excluded from all losses, tokens, and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Magic bytes of the dataset container format.
pub const DATASET_MAGIC: &[u8; 4] = b"IDDS";
/// Current dataset container format version.
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters that fully determine a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// Number of classes including background (class 0).
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
    /// Share of pixels marked IGNORE along shape borders, in [0, 0.1].
    pub ignore_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 6,
            height: 64,
            width: 64,
            train_count: 2000,
            val_count: 200,
            seed: 7,
            ignore_fraction: 0.05,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be >= 2 (class 0 is background), got {}",
                self.num_classes
            )));
        }
        if self.num_classes >= IGNORE_LABEL as usize {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be < {} (labels are u8 with {} reserved), got {}",
                IGNORE_LABEL, IGNORE_LABEL, self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidSpec(format!(
                "height and width must be >= 16 so shapes are representable, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=0.1).contains(&self.ignore_fraction) {
            return Err(Error::InvalidSpec(format!(
                "ignore_fraction must lie in [0, 0.1], got {}",
                self.ignore_fraction
            )));
        }
        Ok(())
    }

    /// Errors unless the stored class count matches the requested one.
    pub fn expect_num_classes(&self, requested: usize) -> Result<()> {
        if self.num_classes != requested {
            return Err(Error::Config(format!(
                "dataset declares {} classes but {} were requested",
                self.num_classes, requested
            )));
        }
        Ok(())
    }
}

/// One image/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 3xHxW image with values in [0, 1].
    pub image: Array3<f32>,
    /// HxW class map; values in [0, num_classes) or IGNORE_LABEL.
    pub labels: Array2<u8>,
    pub sample_id: u64,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 || (h, w) != self.labels.dim() {
            return Err(Error::ShapeMismatch {
                context: "sample image vs labels",
                left: vec![c, h, w],
                right: vec![self.labels.dim().0, self.labels.dim().1],
            });
        }
        let mut foreground = false;
        for &l in self.labels.iter() {
            if l != IGNORE_LABEL && l as usize >= num_classes {
                return Err(Error::InvalidLabel {
                    label: l,
                    num_classes,
                });
            }
            if l != IGNORE_LABEL && l != 0 {
                foreground = true;
            }
        }
        if !foreground {
            return Err(Error::InvalidSpec(format!(
                "sample {} has no foreground pixel",
                self.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disk,
    Rect,
    Triangle,
    Ring,
}

impl ShapeKind {
    fn for_class(class: usize) -> ShapeKind {
        match (class - 1) % 4 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rect,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Ring,
        }
    }

    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Rect => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.7,
            ShapeKind::Triangle => {
                // apex up: width grows linearly from apex to base
                dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.55
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

/// Base colors shared between classes in groups of three; classes in the
/// same group differ only by shape and position.
fn base_color(class: usize) -> [f32; 3] {
    match (class - 1) % 3 {
        0 => [0.75, 0.30, 0.30],
        1 => [0.30, 0.72, 0.35],
        _ => [0.30, 0.40, 0.80],
    }
}

fn sample_rng(spec_seed: u64, sample_id: u64) -> ChaCha12Rng {
    let base = derive_seed(spec_seed, tags::SAMPLE);
    ChaCha12Rng::seed_from_u64(splitmix64(base ^ splitmix64(sample_id)))
}

/// Generates one sample purely from `(spec, sample_id)`.
pub fn generate_sample(spec: &DatasetSpec, sample_id: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = spec.num_classes;
    let mut rng = sample_rng(spec.seed, sample_id);

    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut labels = Array2::<u8>::zeros((h, w));

    // Noise background, class 0.
    let bg_level: f32 = 0.32 + rng.gen_range(-0.03..0.03f32);
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let noise: f32 = rng.gen_range(-0.08..0.08);
                image[[ch, y, x]] = (bg_level + noise).clamp(0.0, 1.0);
            }
        }
    }

    // Textured shapes; later shapes overwrite earlier ones.
    let num_shapes = rng.gen_range(1..=4usize);
    let min_dim = h.min(w) as f32;
    for _ in 0..num_shapes {
        let class = rng.gen_range(1..n);
        let kind = ShapeKind::for_class(class);
        let r = rng.gen_range(0.11..0.20f32) * min_dim;

        // Vertical band bias makes absolute position predictive of class.
        let band = (class as f32 - 0.5) / (n as f32 - 1.0) * h as f32;
        let cy = (band + rng.gen_range(-1.0..1.0f32) * h as f32 / 6.0).clamp(r, h as f32 - r);
        let cx = rng.gen_range(r..(w as f32 - r));

        let base = base_color(class);
        let jitter: [f32; 3] = [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        let freq = rng.gen_range(0.25..0.9f32);
        let (tx, ty) = {
            let ang: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (ang.cos(), ang.sin())
        };
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);

        for y in 0..h {
            for x in 0..w {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                if !kind.contains(dx, dy, r) {
                    continue;
                }
                labels[[y, x]] = class as u8;
                let tex = 0.08 * ((x as f32 * tx + y as f32 * ty) * freq + phase).sin();
                let speckle: f32 = rng.gen_range(-0.04..0.04);
                for ch in 0..3 {
                    image[[ch, y, x]] = (base[ch] + jitter[ch] + tex + speckle).clamp(0.0, 1.0);
                }
            }
        }
    }

    // IGNORE marks along label borders.
    if spec.ignore_fraction > 0.0 {
        let mut border: Vec<(usize, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let l = labels[[y, x]];
                let differs = (x + 1 < w && labels[[y, x + 1]] != l)
                    || (x > 0 && labels[[y, x - 1]] != l)
                    || (y + 1 < h && labels[[y + 1, x]] != l)
                    || (y > 0 && labels[[y - 1, x]] != l);
                if differs {
                    border.push((y, x));
                }
            }
        }
        border.shuffle(&mut rng);
        let target = ((spec.ignore_fraction * (h * w) as f64).round() as usize).min(border.len());
        let snapshot = labels.clone();
        for &(y, x) in border.iter().take(target) {
            labels[[y, x]] = IGNORE_LABEL;
        }
        let has_fg = labels.iter().any(|&l| l != 0 && l != IGNORE_LABEL);
        if !has_fg {
            // Degenerate case (tiny shapes fully on a border): keep labels intact.
            labels = snapshot;
        }
    }

    let sample = Sample {
        image,
        labels,
        sample_id,
    };
    sample.validate(n)?;
    Ok(sample)
}

/// Generates a full split. Train ids are `[0, train_count)`, val ids are
/// `[train_count, train_count + val_count)`.
pub fn generate_dataset(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let (start, count) = match split {
        Split::Train => (0u64, spec.train_count),
        Split::Val => (spec.train_count as u64, spec.val_count),
    };
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_sample(spec, start + i as u64))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    spec: DatasetSpec,
    split: Split,
    count: u64,
}

/// A dataset loaded from (or ready to be written to) the container format.
#[derive(Debug, Clone)]
pub struct StoredDataset {
    pub spec: DatasetSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

/// Writes samples to the versioned binary container.
///
/// Layout (all integers little-endian):
/// `"IDDS" | u32 version | u32 header_len | header JSON | records`,
/// one record per sample:
/// `u64 sample_id | f32[3*H*W] image (C,H,W row-major) | u8[H*W] labels`.
pub fn save_dataset(
    spec: &DatasetSpec,
    split: Split,
    samples: &[Sample],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    spec.validate()?;
    let p = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(p(), e))?;
    let mut out = BufWriter::new(file);

    let header = DatasetHeader {
        spec: spec.clone(),
        split,
        count: samples.len() as u64,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::format(p(), format!("header encode: {e}")))?;

    out.write_all(DATASET_MAGIC).map_err(|e| Error::io(p(), e))?;
    out.write_u32::<LittleEndian>(DATASET_VERSION)
        .map_err(|e| Error::io(p(), e))?;
    out.write_u32::<LittleEndian>(header_bytes.len() as u32)
        .map_err(|e| Error::io(p(), e))?;
    out.write_all(&header_bytes).map_err(|e| Error::io(p(), e))?;

    for s in samples {
        if s.image.dim() != (3, spec.height, spec.width) {
            return Err(Error::ShapeMismatch {
                context: "sample shape vs dataset spec",
                left: vec![s.image.dim().0, s.image.dim().1, s.image.dim().2],
                right: vec![3, spec.height, spec.width],
            });
        }
        out.write_u64::<LittleEndian>(s.sample_id)
            .map_err(|e| Error::io(p(), e))?;
        for &v in s.image.iter() {
            out.write_f32::<LittleEndian>(v).map_err(|e| Error::io(p(), e))?;
        }
        let label_bytes: Vec<u8> = s.labels.iter().copied().collect();
        out.write_all(&label_bytes).map_err(|e| Error::io(p(), e))?;
    }
    out.flush().map_err(|e| Error::io(p(), e))?;
    Ok(())
}

/// Reads a dataset container; rejects bad magic, version mismatches, and
/// truncated or oversized payloads.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<StoredDataset> {
    let path = path.as_ref();
    let p = || path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(p(), e))?;
    let mut inp = BufReader::new(file);

    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)
        .map_err(|_| Error::format(p(), "file too short for magic bytes"))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(p(), "bad magic bytes, not a dataset container"));
    }
    let version = inp
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(p(), "truncated version field"))?;
    if version != DATASET_VERSION {
        return Err(Error::format(
            p(),
            format!("format version {version} unsupported, expected {DATASET_VERSION}"),
        ));
    }
    let header_len = inp
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(p(), "truncated header length"))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    inp.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(p(), "truncated header"))?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(p(), format!("header decode: {e}")))?;
    header.spec.validate()?;

    let (h, w) = (header.spec.height, header.spec.width);
    let pixel_count = h * w;
    let mut samples = Vec::with_capacity(header.count as usize);
    for i in 0..header.count {
        let sample_id = inp
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::format(p(), format!("truncated at sample {i}")))?;
        let mut image = Vec::with_capacity(3 * pixel_count);
        for _ in 0..3 * pixel_count {
            image.push(
                inp.read_f32::<LittleEndian>()
                    .map_err(|_| Error::format(p(), format!("truncated image in sample {i}")))?,
            );
        }
        let mut label_bytes = vec![0u8; pixel_count];
        inp.read_exact(&mut label_bytes)
            .map_err(|_| Error::format(p(), format!("truncated labels in sample {i}")))?;
        for &l in &label_bytes {
            if l != IGNORE_LABEL && l as usize >= header.spec.num_classes {
                return Err(Error::InvalidLabel {
                    label: l,
                    num_classes: header.spec.num_classes,
                });
            }
        }
        samples.push(Sample {
            image: Array3::from_shape_vec((3, h, w), image).expect("sized above"),
            labels: Array2::from_shape_vec((h, w), label_bytes).expect("sized above"),
            sample_id,
        });
    }
    let mut trailing = [0u8; 1];
    match inp.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(p(), "trailing bytes after last sample")),
        Err(e) => return Err(Error::io(p(), e)),
    }
    Ok(StoredDataset {
        spec: header.spec,
        split: header.split,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 6,
            height: 32,
            width: 32,
            train_count: 12,
            val_count: 4,
            seed: 7,
            ignore_fraction: 0.05,
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let spec = small_spec();
        let a = generate_sample(&spec, 0).unwrap();
        let b = generate_sample(&spec, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_ignore_fraction_yields_no_ignores() {
        let mut spec = small_spec();
        spec.ignore_fraction = 0.0;
        for id in 0..8 {
            let s = generate_sample(&spec, id).unwrap();
            assert!(s.labels.iter().all(|&l| l != IGNORE_LABEL));
        }
    }

    #[test]
    fn labels_are_sound_and_foreground_exists() {
        let spec = small_spec();
        for id in 0..32 {
            let s = generate_sample(&spec, id).unwrap();
            s.validate(spec.num_classes).unwrap();
            for &l in s.labels.iter() {
                assert!(l == IGNORE_LABEL || (l as usize) < spec.num_classes);
            }
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn small_dims_are_rejected() {
        let mut spec = small_spec();
        spec.height = 15;
        assert!(matches!(
            generate_sample(&spec, 0),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn split_counts_and_disjoint_ids() {
        let spec = small_spec();
        let train = generate_dataset(&spec, Split::Train).unwrap();
        let val = generate_dataset(&spec, Split::Val).unwrap();
        assert_eq!(train.len(), spec.train_count);
        assert_eq!(val.len(), spec.val_count);
        let train_ids: HashSet<u64> = train.iter().map(|s| s.sample_id).collect();
        let val_ids: HashSet<u64> = val.iter().map(|s| s.sample_id).collect();
        assert!(train_ids.is_disjoint(&val_ids));
        let again = generate_dataset(&spec, Split::Train).unwrap();
        assert_eq!(train, again);
    }

    #[test]
    fn every_class_appears_and_is_balanced_over_many_samples() {
        // Oracle for the class-coverage contract: generate the set and scan.
        let spec = DatasetSpec {
            train_count: 500,
            ..DatasetSpec::default()
        };
        let mut per_class = vec![0u64; spec.num_classes];
        let mut non_ignore = 0u64;
        for id in 0..500u64 {
            let s = generate_sample(&spec, id).unwrap();
            for &l in s.labels.iter() {
                if l != IGNORE_LABEL {
                    per_class[l as usize] += 1;
                    non_ignore += 1;
                }
            }
        }
        for (class, &count) in per_class.iter().enumerate() {
            assert!(count > 0, "class {class} never appears");
            if class > 0 {
                let share = count as f64 / non_ignore as f64;
                assert!(
                    share >= 0.01,
                    "class {class} occupies {share:.4} < 1% of non-ignore pixels"
                );
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let spec = small_spec();
        let samples = generate_dataset(&spec, Split::Val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("val.idds");
        save_dataset(&spec, Split::Val, &samples, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.split, Split::Val);
        assert_eq!(loaded.samples, samples);
    }

    #[test]
    fn empty_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.idds");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let spec = small_spec();
        let samples = generate_dataset(&spec, Split::Val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.idds");
        save_dataset(&spec, Split::Val, &samples, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "got: {err}");
    }

    #[test]
    fn truncated_file_is_explicit() {
        let spec = small_spec();
        let samples = generate_dataset(&spec, Split::Val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.idds");
        save_dataset(&spec, Split::Val, &samples, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn class_count_mismatch_names_both_values() {
        let spec = small_spec();
        let err = spec.expect_num_classes(4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('4'), "got: {msg}");
    }
}
