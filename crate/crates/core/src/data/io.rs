//! Dataset directory loading, patch manifests and raster export.
//!
//! Directory convention: `<root>/<split>/{A,B,label}/<id>.<png|tif|tiff>`,
//! where `A` holds T1 images and `B` holds T2 images with matching file names.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{extract_patch, ClassBalanceReport, ImagePairRecord, PatchCategory, PatchPair};
use crate::error::{Error, Result};

const EXTENSIONS: &[&str] = &["png", "tif", "tiff"];

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, i, j)| raw[(i * w + j) * 3 + c]))
}

/// Reads a label raster; any nonzero value becomes 1.
pub fn read_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| u8::from(raw[i * w + j] != 0)))
}

pub fn write_rgb(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        image::Rgb([img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]])
    });
    buf.save(path)?;
    Ok(())
}

/// Writes a binary map as an 8-bit image with values 0 and 255.
pub fn write_binary(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if map[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    buf.save(path)?;
    Ok(())
}

fn find_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    EXTENSIONS.iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

/// Ids (file stems) present in `<root>/<split>/A`, sorted.
pub fn list_ids(root: &Path, split: &str) -> Result<Vec<String>> {
    let dir = root.join(split).join("A");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_record(root: &Path, split: &str, id: &str) -> Result<ImagePairRecord> {
    let base = root.join(split);
    let locate = |sub: &str| {
        find_with_stem(&base.join(sub), id)
            .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{split}/{sub}/{id}"))))
    };
    ImagePairRecord::new(id, read_rgb(&locate("A")?)?, read_rgb(&locate("B")?)?, read_label(&locate("label")?)?)
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<ImagePairRecord>> {
    list_ids(root, split)?.iter().map(|id| load_record(root, split, id)).collect()
}

/// Writes a record in the dataset directory convention (PNG).
pub fn save_record(root: &Path, split: &str, rec: &ImagePairRecord) -> Result<()> {
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(root.join(split).join(sub))?;
    }
    let file = format!("{}.png", rec.id);
    write_rgb(&root.join(split).join("A").join(&file), &rec.image_t1)?;
    write_rgb(&root.join(split).join("B").join(&file), &rec.image_t2)?;
    write_binary(&root.join(split).join("label").join(&file), &rec.label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub offset_row: usize,
    pub offset_col: usize,
    pub category: PatchCategory,
}

impl From<&PatchPair> for ManifestEntry {
    fn from(p: &PatchPair) -> Self {
        Self { id: p.parent_id.clone(), offset_row: p.offset.0, offset_col: p.offset.1, category: p.category }
    }
}

/// Line-delimited patch index with header `id,offset_row,offset_col,category`.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    r.deserialize().map(|e| e.map_err(Error::from)).collect()
}

/// Materialises manifest entries from already loaded records.
pub fn patches_from_manifest(records: &[ImagePairRecord], entries: &[ManifestEntry], tile: usize) -> Result<Vec<PatchPair>> {
    let by_id: HashMap<&str, &ImagePairRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    entries
        .iter()
        .map(|e| {
            let rec = by_id
                .get(e.id.as_str())
                .ok_or_else(|| Error::Config(format!("manifest references unknown record `{}`", e.id)))?;
            extract_patch(rec, (e.offset_row, e.offset_col), tile)
        })
        .collect()
}

/// Writes `<stem>.txt` (key=value) and `<stem>.json` next to each other.
pub fn write_stats(dir: &Path, stem: &str, stats: &ClassBalanceReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.txt")), stats.to_text())?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(stats)?)?;
    Ok(())
}
