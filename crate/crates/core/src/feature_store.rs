//! On-disk representation of patch-embedding grids, ground-truth masks and
//! dataset manifests.
//!
//! # Feature grid file (`.pefg`)
//!
//! All integers are little-endian `u32`, all payload values little-endian `f32`.
//!
//! | offset | field        |
//! |-------:|--------------|
//! |      0 | magic `PEFG` |
//! |      4 | version (=1) |
//! |      8 | layer_index  |
//! |     12 | grid_h       |
//! |     16 | grid_w       |
//! |     20 | dim          |
//! |     24 | patch_size   |
//! |     28 | orig_h       |
//! |     32 | orig_w       |
//! |     36 | pad_top      |
//! |     40 | pad_left     |
//! |     44 | pad_bottom   |
//! |     48 | pad_right    |
//! |     52 | payload: `grid_h * grid_w * dim` floats, row-major `[grid_h][grid_w][dim]` |
//!
//! Patch `i` of a backbone's token sequence is stored at row `i / grid_w`,
//! column `i % grid_w` (raster order). A file is accepted only if
//! `grid_h * patch_size == pad_top + orig_h + pad_bottom` (same for the width)
//! and every payload value is finite.
//!
//! # Masks
//!
//! 8-bit grayscale PNG at the original image resolution; any nonzero pixel is
//! anomalous.
//!
//! # Manifest
//!
//! A JSON document:
//!
//! ```json
//! {
//!   "dataset_name": "visa",
//!   "layer_pair": [8, 12],
//!   "samples": [
//!     {
//!       "sample_id": "candle/test/0001",
//!       "category": "candle",
//!       "split": "test",
//!       "label": "anomalous",
//!       "features": { "8": "feat/0001_l8.pefg", "12": "feat/0001_l12.pefg" },
//!       "mask": "masks/0001.png",
//!       "image_dims": [1036, 1036]
//!     }
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"PEFG";
pub const FEATURE_FORMAT_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 52;

/// Pixels added around an image before the backbone saw it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: u32,
    pub left: u32,
    pub bottom: u32,
    pub right: u32,
}

impl Padding {
    pub const ZERO: Padding = Padding {
        top: 0,
        left: 0,
        bottom: 0,
        right: 0,
    };

    pub fn uniform(p: u32) -> Self {
        Padding {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }
}

/// One image's patch embeddings at one Transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub layer_index: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub dim: u32,
    pub patch_size: u32,
    pub orig_h: u32,
    pub orig_w: u32,
    pub pad: Padding,
    /// Row-major `[grid_h][grid_w][dim]`.
    pub data: Vec<f32>,
}

impl FeatureGrid {
    /// Number of patches `N`.
    pub fn num_patches(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize
    }

    /// Padded image height seen by the backbone.
    pub fn padded_h(&self) -> u32 {
        self.grid_h * self.patch_size
    }

    pub fn padded_w(&self) -> u32 {
        self.grid_w * self.patch_size
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.data[index * d..(index + 1) * d]
    }

    /// Checks every invariant except payload finiteness.
    pub fn validate_geometry(&self) -> Result<()> {
        check_geometry(&Header::of(self))?;
        let expected = self.num_patches() * self.dim as usize;
        if self.data.len() != expected {
            return Err(Error::Shape(format!(
                "payload holds {} values, {}x{}x{} needs {}",
                self.data.len(),
                self.grid_h,
                self.grid_w,
                self.dim,
                expected
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        check_finite(&self.data, "feature payload")
    }
}

pub(crate) fn check_finite(values: &[f32], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            context: context.to_string(),
        }),
        None => Ok(()),
    }
}

/// Fixed-size header of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub layer_index: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub dim: u32,
    pub patch_size: u32,
    pub orig_h: u32,
    pub orig_w: u32,
    pub pad: Padding,
}

impl Header {
    fn of(grid: &FeatureGrid) -> Self {
        Header {
            version: FEATURE_FORMAT_VERSION,
            layer_index: grid.layer_index,
            grid_h: grid.grid_h,
            grid_w: grid.grid_w,
            dim: grid.dim,
            patch_size: grid.patch_size,
            orig_h: grid.orig_h,
            orig_w: grid.orig_w,
            pad: grid.pad,
        }
    }

    fn to_bytes(self) -> [u8; FEATURE_HEADER_LEN] {
        let mut out = [0u8; FEATURE_HEADER_LEN];
        out[..4].copy_from_slice(&FEATURE_MAGIC);
        let fields = [
            self.version,
            self.layer_index,
            self.grid_h,
            self.grid_w,
            self.dim,
            self.patch_size,
            self.orig_h,
            self.orig_w,
            self.pad.top,
            self.pad.left,
            self.pad.bottom,
            self.pad.right,
        ];
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        out
    }

    fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != FEATURE_MAGIC {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
                expected: FEATURE_MAGIC,
            });
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: FEATURE_HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let header = Header {
            version: field(0),
            layer_index: field(1),
            grid_h: field(2),
            grid_w: field(3),
            dim: field(4),
            patch_size: field(5),
            orig_h: field(6),
            orig_w: field(7),
            pad: Padding {
                top: field(8),
                left: field(9),
                bottom: field(10),
                right: field(11),
            },
        };
        if header.version != FEATURE_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: header.version,
                supported: FEATURE_FORMAT_VERSION,
            });
        }
        Ok(header)
    }

    pub fn payload_len(&self) -> u64 {
        self.grid_h as u64 * self.grid_w as u64 * self.dim as u64 * 4
    }
}

fn check_geometry(h: &Header) -> Result<()> {
    if h.patch_size == 0 || h.dim == 0 || h.grid_h == 0 || h.grid_w == 0 {
        return Err(Error::Geometry(format!(
            "zero-sized field (grid {}x{}, dim {}, patch {})",
            h.grid_h, h.grid_w, h.dim, h.patch_size
        )));
    }
    let axes = [
        ("height", h.grid_h, h.orig_h, h.pad.top, h.pad.bottom),
        ("width", h.grid_w, h.orig_w, h.pad.left, h.pad.right),
    ];
    for (axis, cells, orig, before, after) in axes {
        let padded = orig as u64 + before as u64 + after as u64;
        if !padded.is_multiple_of(h.patch_size as u64) {
            return Err(Error::Geometry(format!(
                "padded {axis} {orig}+{before}+{after}={padded} is not a multiple of patch size {}",
                h.patch_size
            )));
        }
        if padded / h.patch_size as u64 != cells as u64 {
            return Err(Error::Geometry(format!(
                "padded {axis} {padded} / patch size {} = {} patches, header says {cells}",
                h.patch_size,
                padded / h.patch_size as u64
            )));
        }
    }
    Ok(())
}

pub fn write_feature_grid(grid: &FeatureGrid, path: &Path) -> Result<()> {
    grid.validate()?;
    let mut bytes = Vec::with_capacity(FEATURE_HEADER_LEN + grid.data.len() * 4);
    bytes.extend_from_slice(&Header::of(grid).to_bytes());
    for v in &grid.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads only the header, validating magic, version and geometry.
pub fn read_feature_header(path: &Path) -> Result<Header> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(FEATURE_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let header = Header::parse(path, &buf)?;
    check_geometry(&header)?;
    Ok(header)
}

pub fn read_feature_grid(path: &Path) -> Result<FeatureGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = Header::parse(path, &bytes)?;
    check_geometry(&header)?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    let expected = header.payload_len();
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: FEATURE_HEADER_LEN as u64 + expected,
            found: bytes.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            found: payload.len() as u64 - expected,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_finite(&data, &path.display().to_string())?;
    Ok(FeatureGrid {
        layer_index: header.layer_index,
        grid_h: header.grid_h,
        grid_w: header.grid_w,
        dim: header.dim,
        patch_size: header.patch_size,
        orig_h: header.orig_h,
        orig_w: header.orig_w,
        pad: header.pad,
        data,
    })
}

/// Boolean ground-truth mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Reads an 8-bit grayscale mask at its original resolution.
pub fn read_mask(path: &Path, expected_dims: (u32, u32)) -> Result<BinaryMask> {
    let mask_err = |reason: String| Error::Mask {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|e| mask_err(e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(mask_err(format!(
                "unsupported pixel format {:?}, expected 8-bit grayscale",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    if (h, w) != expected_dims {
        return Err(mask_err(format!(
            "dimension mismatch: mask is {h}x{w}, image is {}x{}",
            expected_dims.0, expected_dims.1
        )));
    }
    Ok(BinaryMask {
        height: h as usize,
        width: w as usize,
        data: gray.as_raw().iter().map(|&v| v > 0).collect(),
    })
}

/// Writes a mask as 8-bit grayscale PNG (255 = anomalous).
pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer matches mask dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Mask {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Nominal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Nominal => "nominal",
            Label::Anomalous => "anomalous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub category: String,
    pub split: Split,
    pub label: Label,
    /// Layer index to feature file.
    pub features: BTreeMap<u32, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// `(orig_h, orig_w)`.
    pub image_dims: (u32, u32),
}

impl SampleRecord {
    pub fn feature_path(&self, layer: u32) -> Result<&Path> {
        self.features.get(&layer).map(PathBuf::as_path).ok_or_else(|| {
            Error::Config(format!(
                "sample {} has no features for layer {layer}",
                self.sample_id
            ))
        })
    }

    pub fn load_mask(&self) -> Result<BinaryMask> {
        match &self.mask {
            Some(p) => read_mask(p, self.image_dims),
            None => Ok(BinaryMask::empty(
                self.image_dims.0 as usize,
                self.image_dims.1 as usize,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub layer_pair: (u32, u32),
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn train(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    /// Categories in sorted order.
    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self.samples.iter().map(|s| s.category.clone()).collect();
        cats.sort();
        cats.dedup();
        cats
    }

    /// Restricts the manifest to one category.
    pub fn only_category(&self, category: &str) -> Manifest {
        Manifest {
            dataset_name: self.dataset_name.clone(),
            layer_pair: self.layer_pair,
            samples: self
                .samples
                .iter()
                .filter(|s| s.category == category)
                .cloned()
                .collect(),
        }
    }

    /// Writes the manifest as JSON, storing paths relative to its directory
    /// where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_path_buf();
        let mut out = self.clone();
        for s in &mut out.samples {
            for p in s.features.values_mut() {
                *p = rel(p);
            }
            s.mask = s.mask.as_deref().map(rel);
        }
        let text = serde_json::to_string_pretty(&out).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parses and fully validates a manifest; every violation is reported.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| Error::ManifestSyntax {
            path: path.to_path_buf(),
            source,
        })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for s in &mut manifest.samples {
        for p in s.features.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(m) = &mut s.mask {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
    }
    let violations = validate_manifest(&manifest);
    if violations.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Manifest {
            path: path.to_path_buf(),
            violations,
        })
    }
}

/// Returns every invariant violation in `manifest`, touching the filesystem
/// for existence, mask dimensions and feature headers.
pub fn validate_manifest(manifest: &Manifest) -> Vec<String> {
    let mut violations = Vec::new();
    let (j, k) = manifest.layer_pair;
    if j >= k {
        violations.push(format!("layer_pair ({j}, {k}) must satisfy j < k"));
    }
    let mut seen = HashSet::new();
    for s in &manifest.samples {
        let id = &s.sample_id;
        if !seen.insert(id.as_str()) {
            violations.push(format!("duplicate sample_id {id}"));
        }
        if s.split == Split::Train && s.label == Label::Anomalous {
            violations.push(format!("{id}: train split contains an anomalous sample"));
        }
        match (&s.mask, s.label) {
            (None, Label::Anomalous) => violations.push(format!("{id}: anomalous sample without mask")),
            (Some(_), Label::Nominal) => violations.push(format!("{id}: nominal sample has a mask")),
            _ => {}
        }
        for layer in [j, k] {
            if !s.features.contains_key(&layer) {
                violations.push(format!("{id}: no feature file for layer {layer}"));
            }
        }
        for (layer, p) in &s.features {
            if !p.is_file() {
                violations.push(format!("{id}: missing file {}", p.display()));
                continue;
            }
            match read_feature_header(p) {
                Ok(h) => {
                    if (h.orig_h, h.orig_w) != s.image_dims {
                        violations.push(format!(
                            "{id}: {} records image {}x{}, manifest says {}x{}",
                            p.display(),
                            h.orig_h,
                            h.orig_w,
                            s.image_dims.0,
                            s.image_dims.1
                        ));
                    }
                    if h.layer_index != *layer {
                        violations.push(format!(
                            "{id}: {} holds layer {}, listed under layer {layer}",
                            p.display(),
                            h.layer_index
                        ));
                    }
                }
                Err(e) => violations.push(format!("{id}: {e}")),
            }
        }
        if let Some(m) = &s.mask {
            if !m.is_file() {
                violations.push(format!("{id}: missing file {}", m.display()));
            } else {
                match image::image_dimensions(m) {
                    Ok((w, h)) if (h, w) != s.image_dims => violations.push(format!(
                        "{id}: mask {} is {h}x{w}, image is {}x{}",
                        m.display(),
                        s.image_dims.0,
                        s.image_dims.1
                    )),
                    Ok(_) => {}
                    Err(e) => violations.push(format!("{id}: mask {}: {e}", m.display())),
                }
            }
        }
    }
    violations
}

/// Keeps every test sample and exactly `shots` uniformly chosen train samples
/// per category.
pub fn sample_fewshot(manifest: &Manifest, shots: usize, seed: u64) -> Result<Manifest> {
    if shots == 0 {
        return Err(Error::FewShot("shots must be at least 1".into()));
    }
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.split == Split::Train {
            by_category.entry(&s.category).or_default().push(i);
        }
    }
    let short: Vec<String> = by_category
        .iter()
        .filter(|(_, idx)| idx.len() < shots)
        .map(|(c, idx)| format!("category {c} has {} train samples, {shots} requested", idx.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::FewShot(short.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; manifest.samples.len()];
    for idx in by_category.values() {
        for pick in rand::seq::index::sample(&mut rng, idx.len(), shots) {
            keep[idx[pick]] = true;
        }
    }
    let samples = manifest
        .samples
        .iter()
        .zip(&keep)
        .filter(|(s, &k)| s.split == Split::Test || k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(Manifest {
        dataset_name: manifest.dataset_name.clone(),
        layer_pair: manifest.layer_pair,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: u32, w: u32, dim: u32, p: u32, pad: Padding, orig: (u32, u32)) -> FeatureGrid {
        FeatureGrid {
            layer_index: 8,
            grid_h: h,
            grid_w: w,
            dim,
            patch_size: p,
            orig_h: orig.0,
            orig_w: orig.1,
            pad,
            data: (0..h * w * dim).map(|i| i as f32 * 0.5 - 3.0).collect(),
        }
    }

    #[test]
    fn default_teacher_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(74, 74, 768, 14, Padding::ZERO, (1036, 1036));
        assert_eq!(g.num_patches(), 5476);
        let path = dir.path().join("g.pefg");
        write_feature_grid(&g, &path).unwrap();
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, FEATURE_HEADER_LEN as u64 + 74 * 74 * 768 * 4);
    }

    #[test]
    fn zero_grid_roundtrip_preserves_pad() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = grid(1, 1, 4, 14, Padding { top: 1, left: 2, bottom: 3, right: 4 }, (10, 8));
        g.data = vec![0.0; 4];
        let path = dir.path().join("z.pefg");
        write_feature_grid(&g, &path).unwrap();
        let back = read_feature_grid(&path).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.pad, Padding { top: 1, left: 2, bottom: 3, right: 4 });
    }

    #[test]
    fn indivisible_geometry_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(5, 5, 2, 14, Padding { top: 0, left: 0, bottom: 1, right: 0 }, (70, 70));
        let path = dir.path().join("bad.pefg");
        let err = write_feature_grid(&g, &path).unwrap_err();
        assert!(matches!(err, Error::Geometry(ref m) if m.contains("71")), "{err}");
        assert!(!path.exists());
    }

    #[test]
    fn corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pefg");
        write_feature_grid(&grid(2, 2, 3, 1, Padding::ZERO, (2, 2)), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature_grid(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pefg");
        write_feature_grid(&grid(2, 2, 3, 1, Padding::ZERO, (2, 2)), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(read_feature_grid(&path), Err(Error::Truncated { .. })));
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(read_feature_grid(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pefg");
        write_feature_grid(&grid(1, 1, 2, 1, Padding::ZERO, (1, 1)), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[FEATURE_HEADER_LEN + 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_grid(&path),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let mut g = grid(1, 1, 2, 1, Padding::ZERO, (1, 1));
        g.data[0] = f32::INFINITY;
        assert!(write_feature_grid(&g, &path).is_err());
    }

    #[test]
    fn header_geometry_inconsistency() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pefg");
        write_feature_grid(&grid(2, 2, 1, 2, Padding::ZERO, (4, 4)), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // grid_h := 3
        bytes[12..16].copy_from_slice(&3u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature_grid(&path), Err(Error::Geometry(_))));
    }

    #[test]
    fn masks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        image::GrayImage::new(8, 8).save(&path).unwrap();
        assert_eq!(read_mask(&path, (8, 8)).unwrap().count(), 0);

        let mut img = image::GrayImage::new(8, 8);
        img.put_pixel(3, 1, image::Luma([255]));
        img.put_pixel(0, 7, image::Luma([255]));
        img.save(&path).unwrap();
        let m = read_mask(&path, (8, 8)).unwrap();
        assert_eq!(m.count(), 2);
        assert!(m.get(1, 3) && m.get(7, 0));

        let err = read_mask(&path, (16, 16)).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));

        let rgb = dir.path().join("rgb.png");
        image::RgbImage::new(8, 8).save(&rgb).unwrap();
        assert!(read_mask(&rgb, (8, 8)).unwrap_err().to_string().contains("unsupported"));
    }

    fn write_sample_files(dir: &Path, id: &str, anomalous: bool) -> SampleRecord {
        let mut features = BTreeMap::new();
        for layer in [8, 12] {
            let mut g = grid(2, 2, 3, 2, Padding::ZERO, (4, 4));
            g.layer_index = layer;
            let p = dir.join(format!("{id}_{layer}.pefg"));
            write_feature_grid(&g, &p).unwrap();
            features.insert(layer, PathBuf::from(format!("{id}_{layer}.pefg")));
        }
        let mask = anomalous.then(|| {
            let mut m = BinaryMask::empty(4, 4);
            m.set(1, 1, true);
            write_mask(&m, &dir.join(format!("{id}.png"))).unwrap();
            PathBuf::from(format!("{id}.png"))
        });
        SampleRecord {
            sample_id: id.into(),
            category: "toy".into(),
            split: if anomalous { Split::Test } else { Split::Train },
            label: if anomalous { Label::Anomalous } else { Label::Nominal },
            features,
            mask,
            image_dims: (4, 4),
        }
    }

    fn write_manifest(dir: &Path, samples: Vec<SampleRecord>) -> PathBuf {
        let m = Manifest {
            dataset_name: "toy".into(),
            layer_pair: (8, 12),
            samples,
        };
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        p
    }

    #[test]
    fn manifest_ok() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_sample_files(dir.path(), "a", false);
        let b = write_sample_files(dir.path(), "b", true);
        let m = load_manifest(&write_manifest(dir.path(), vec![a, b])).unwrap();
        assert_eq!(m.train().count(), 1);
        assert_eq!(m.test().count(), 1);
        assert!(m.samples[1].mask.as_ref().unwrap().is_absolute() || m.samples[1].mask.as_ref().unwrap().starts_with(dir.path()));
    }

    #[test]
    fn manifest_reports_every_violation() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = write_sample_files(dir.path(), "a", false);
        a.label = Label::Anomalous;
        let mut b = write_sample_files(dir.path(), "b", true);
        b.mask = None;
        let mut c = write_sample_files(dir.path(), "c", false);
        c.features.insert(12, PathBuf::from("nowhere.pefg"));
        let err = load_manifest(&write_manifest(dir.path(), vec![a, b, c])).unwrap_err();
        let Error::Manifest { violations, .. } = &err else {
            panic!("{err}")
        };
        let text = violations.join("\n");
        assert!(text.contains("train split contains an anomalous"), "{text}");
        assert!(text.contains("b: anomalous sample without mask"), "{text}");
        assert!(text.contains("missing file") && text.contains("nowhere.pefg"), "{text}");
    }

    fn fewshot_manifest(per_cat: &[(&str, usize)]) -> Manifest {
        let mut samples = Vec::new();
        for (cat, n) in per_cat {
            for i in 0..*n {
                samples.push(SampleRecord {
                    sample_id: format!("{cat}/{i}"),
                    category: cat.to_string(),
                    split: Split::Train,
                    label: Label::Nominal,
                    features: BTreeMap::new(),
                    mask: None,
                    image_dims: (1, 1),
                });
            }
            samples.push(SampleRecord {
                sample_id: format!("{cat}/test"),
                category: cat.to_string(),
                split: Split::Test,
                label: Label::Nominal,
                features: BTreeMap::new(),
                mask: None,
                image_dims: (1, 1),
            });
        }
        Manifest {
            dataset_name: "fs".into(),
            layer_pair: (8, 12),
            samples,
        }
    }

    #[test]
    fn fewshot_is_deterministic() {
        let m = fewshot_manifest(&[("a", 100)]);
        let x = sample_fewshot(&m, 5, 7).unwrap();
        let y = sample_fewshot(&m, 5, 7).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.train().count(), 5);
        assert_eq!(x.test().count(), 1);
    }

    #[test]
    fn fewshot_fifty_per_category() {
        let m = fewshot_manifest(&[("a", 80), ("b", 60)]);
        let x = sample_fewshot(&m, 50, 1).unwrap();
        for cat in ["a", "b"] {
            assert_eq!(x.train().filter(|s| s.category == cat).count(), 50);
        }
    }

    #[test]
    fn fewshot_short_category() {
        let m = fewshot_manifest(&[("big", 20), ("small", 7)]);
        let err = sample_fewshot(&m, 10, 0).unwrap_err().to_string();
        assert!(err.contains("small") && !err.contains("big"), "{err}");
    }

    #[test]
    fn fewshot_inclusion_is_uniform() {
        let (n, k, runs) = (10usize, 3usize, 4000u64);
        let m = fewshot_manifest(&[("a", n)]);
        let mut hits = vec![0u32; n];
        for seed in 0..runs {
            for s in sample_fewshot(&m, k, seed).unwrap().train() {
                let i: usize = s.sample_id.trim_start_matches("a/").parse().unwrap();
                hits[i] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let sd = (p * (1.0 - p) / runs as f64).sqrt();
        for h in hits {
            let freq = h as f64 / runs as f64;
            assert!((freq - p).abs() < 5.0 * sd, "frequency {freq} vs {p}");
        }
    }
}
