//! Bi-temporal image pairs, non-overlapping tiling, patch categories and
//! class-balance statistics.
//!
//! Rasters are stored channels-first: images are `(3, h, w)` and labels
//! `(h, w)` with values in `{0, 1}`.

pub mod io;
pub mod synthetic;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePairRecord {
    pub id: String,
    pub image_t1: Array3<u8>,
    pub image_t2: Array3<u8>,
    pub label: Array2<u8>,
}

impl ImagePairRecord {
    /// Validates alignment and maps every nonzero label value to 1.
    pub fn new(id: impl Into<String>, image_t1: Array3<u8>, image_t2: Array3<u8>, label: Array2<u8>) -> Result<Self> {
        let rec = Self { id: id.into(), image_t1, image_t2, label: label.mapv(|v| u8::from(v != 0)) };
        rec.check_shapes()?;
        Ok(rec)
    }

    pub fn height(&self) -> usize {
        self.label.nrows()
    }

    pub fn width(&self) -> usize {
        self.label.ncols()
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, w) = self.label.dim();
        let (c1, h1, w1) = self.image_t1.dim();
        if self.image_t1.dim() != self.image_t2.dim() || (h1, w1) != (h, w) || c1 != 3 {
            return Err(shape_err(format!(
                "{}: T1 {:?}, T2 {:?} and label {:?} are not aligned 3-channel rasters",
                self.id,
                self.image_t1.dim(),
                self.image_t2.dim(),
                self.label.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchCategory {
    Foreground,
    Background,
}

impl PatchCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatchCategory::Foreground => "foreground",
            PatchCategory::Background => "background",
        }
    }
}

impl std::str::FromStr for PatchCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "foreground" => Ok(Self::Foreground),
            "background" => Ok(Self::Background),
            other => Err(Error::Config(format!("unknown patch category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub parent_id: String,
    /// Top-left corner `(row, col)` in the parent raster.
    pub offset: (usize, usize),
    pub t1: Array3<u8>,
    pub t2: Array3<u8>,
    pub label: Array2<u8>,
    pub category: PatchCategory,
}

impl PatchPair {
    pub fn id(&self) -> String {
        patch_id(&self.parent_id, self.offset)
    }

    pub fn changed_pixels(&self) -> u64 {
        self.label.iter().filter(|&&v| v != 0).count() as u64
    }

    pub fn size(&self) -> usize {
        self.label.nrows()
    }
}

pub fn patch_id(parent: &str, (row, col): (usize, usize)) -> String {
    format!("{parent}@{row}_{col}")
}

/// Foreground iff at least one pixel is changed.
pub fn classify_patch(label: ArrayView2<u8>) -> PatchCategory {
    if label.iter().any(|&v| v != 0) {
        PatchCategory::Foreground
    } else {
        PatchCategory::Background
    }
}

/// Extracts the `tile x tile` patch whose top-left corner is `offset`.
pub fn extract_patch(pair: &ImagePairRecord, offset: (usize, usize), tile: usize) -> Result<PatchPair> {
    pair.check_shapes()?;
    let (r, c) = offset;
    if tile == 0 || r + tile > pair.height() || c + tile > pair.width() {
        return Err(Error::Bound(format!(
            "{}: patch at {offset:?} of size {tile} exceeds {}x{}",
            pair.id,
            pair.height(),
            pair.width()
        )));
    }
    let label = pair.label.slice(s![r..r + tile, c..c + tile]).to_owned();
    Ok(PatchPair {
        parent_id: pair.id.clone(),
        offset,
        t1: pair.image_t1.slice(s![.., r..r + tile, c..c + tile]).to_owned(),
        t2: pair.image_t2.slice(s![.., r..r + tile, c..c + tile]).to_owned(),
        category: classify_patch(label.view()),
        label,
    })
}

/// Non-overlapping `tile x tile` patches in row-major order; partial border
/// tiles are dropped.
pub fn tile_pair(pair: &ImagePairRecord, tile: usize) -> Result<Vec<PatchPair>> {
    if tile == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    pair.check_shapes()?;
    let (rows, cols) = (pair.height() / tile, pair.width() / tile);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(extract_patch(pair, (i * tile, j * tile), tile)?);
        }
    }
    Ok(out)
}

/// Places patches back at their offsets on zeroed `(height, width)` canvases.
pub fn stitch(patches: &[PatchPair], height: usize, width: usize) -> (Array3<u8>, Array3<u8>, Array2<u8>) {
    let mut t1 = Array3::zeros((3, height, width));
    let mut t2 = Array3::zeros((3, height, width));
    let mut label = Array2::zeros((height, width));
    for p in patches {
        let (r, c) = p.offset;
        let n = p.size();
        t1.slice_mut(s![.., r..r + n, c..c + n]).assign(&p.t1);
        t2.slice_mut(s![.., r..r + n, c..c + n]).assign(&p.t2);
        label.slice_mut(s![r..r + n, c..c + n]).assign(&p.label);
    }
    (t1, t2, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBalanceReport {
    pub changed_pixels: u64,
    pub unchanged_pixels: u64,
    pub changed_fraction: f64,
    pub foreground_patches: u64,
    pub background_patches: u64,
}

impl ClassBalanceReport {
    pub fn from_counts(changed: u64, unchanged: u64, foreground: u64, background: u64) -> Self {
        let total = changed + unchanged;
        Self {
            changed_pixels: changed,
            unchanged_pixels: unchanged,
            changed_fraction: if total == 0 { 0.0 } else { changed as f64 / total as f64 },
            foreground_patches: foreground,
            background_patches: background,
        }
    }

    pub fn unchanged_fraction(&self) -> f64 {
        1.0 - self.changed_fraction
    }

    /// Flat `key=value` report.
    pub fn to_text(&self) -> String {
        format!(
            "changed_pixels={}\nunchanged_pixels={}\nchanged_fraction={:.6}\nunchanged_fraction={:.6}\nforeground_patches={}\nbackground_patches={}\n",
            self.changed_pixels,
            self.unchanged_pixels,
            self.changed_fraction,
            self.unchanged_fraction(),
            self.foreground_patches,
            self.background_patches
        )
    }
}

impl std::ops::Add for ClassBalanceReport {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::from_counts(
            self.changed_pixels + o.changed_pixels,
            self.unchanged_pixels + o.unchanged_pixels,
            self.foreground_patches + o.foreground_patches,
            self.background_patches + o.background_patches,
        )
    }
}

pub fn dataset_stats(patches: &[PatchPair]) -> Result<ClassBalanceReport> {
    if patches.is_empty() {
        return Err(Error::EmptyInput("dataset_stats needs at least one patch"));
    }
    Ok(patches
        .iter()
        .map(|p| {
            let changed = p.changed_pixels();
            let fg = u64::from(p.category == PatchCategory::Foreground);
            ClassBalanceReport::from_counts(changed, p.label.len() as u64 - changed, fg, 1 - fg)
        })
        .fold(ClassBalanceReport::from_counts(0, 0, 0, 0), |a, b| a + b))
}

/// Seeded random partition into `(train, val)`; `⌊n · val_fraction⌋` items
/// go to validation.
pub fn split_dataset<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let n_val = (items.len() as f64 * val_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; items.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in items.iter().zip(is_val) {
        if v {
            val.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, val))
}

/// Stacks patches into `(t1, t2, labels)` network inputs, scaling pixels to `[0, 1]`.
pub fn batch_tensors(patches: &[&PatchPair]) -> (Tensor, Tensor, Array3<u8>) {
    let n = patches.len();
    let size = patches.first().map_or(0, |p| p.size());
    let mut t1 = Tensor::zeros((n, 3, size, size));
    let mut t2 = Tensor::zeros((n, 3, size, size));
    let mut labels = Array3::zeros((n, size, size));
    for (b, p) in patches.iter().enumerate() {
        t1.slice_mut(s![b, .., .., ..]).assign(&p.t1.mapv(|v| v as f64 / 255.0));
        t2.slice_mut(s![b, .., .., ..]).assign(&p.t2.mapv(|v| v as f64 / 255.0));
        labels.slice_mut(s![b, .., ..]).assign(&p.label);
    }
    (t1, t2, labels)
}
