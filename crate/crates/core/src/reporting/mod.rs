//! Error maps, training curves and ablation sweep tables.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{shape_err, Error, Result};
use crate::metrics::MetricsReport;
use crate::trainer::TrainingHistory;

pub use plot::{line_plot, PlotStyle};

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLACK: [u8; 3] = [0, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

/// TP white, FP red, TN black, FN blue.
pub fn palette(pred: bool, gt: bool) -> [u8; 3] {
    match (pred, gt) {
        (true, true) => WHITE,
        (true, false) => RED,
        (false, false) => BLACK,
        (false, true) => BLUE,
    }
}

/// Inverse of [`palette`]: `(pred, gt)` for one of the four colours.
pub fn decode_colour(rgb: [u8; 3]) -> Option<(bool, bool)> {
    match rgb {
        WHITE => Some((true, true)),
        RED => Some((true, false)),
        BLACK => Some((false, false)),
        BLUE => Some((false, true)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap(pub RgbImage);

impl ErrorMap {
    /// Saved as PNG; a lossy format would corrupt the palette.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.0.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

pub fn render_error_map(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<ErrorMap> {
    if pred.dim() != gt.dim() {
        return Err(shape_err(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let (h, w) = pred.dim();
    Ok(ErrorMap(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb(palette(pred[[i, j]] != 0, gt[[i, j]] != 0))
    })))
}

/// Columns parsed back from a history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub epoch: Vec<f64>,
    pub loss: Vec<f64>,
    pub precision: Vec<f64>,
}

pub fn parse_history_csv(text: &str) -> Result<Curves> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("history CSV lacks column `{name}`")))
    };
    let (ie, il, ip) = (col("epoch")?, col("loss")?, col("val_pre")?);
    let mut curves = Curves { epoch: Vec::new(), loss: Vec::new(), precision: Vec::new() };
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<Option<f64>> {
            let v = row.get(i).unwrap_or("").trim();
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| Error::Config(format!("bad number `{v}` in history CSV")))
            }
        };
        let e = num(ie)?.ok_or_else(|| Error::Config("history row without epoch".into()))?;
        curves.epoch.push(e);
        curves.loss.push(num(il)?.unwrap_or(f64::NAN));
        curves.precision.push(num(ip)?.unwrap_or(f64::NAN));
    }
    Ok(curves)
}

/// Renders the loss and validation-precision curves of a history CSV.
pub fn render_curves(csv_text: &str) -> Result<(RgbImage, RgbImage)> {
    let c = parse_history_csv(csv_text)?;
    let style = PlotStyle::default();
    let loss = line_plot(&c.epoch, &c.loss, &style.with_colour([200, 30, 30]));
    let precision = line_plot(&c.epoch, &c.precision, &style.with_colour([30, 60, 200]));
    Ok((loss, precision))
}

/// Writes `history.csv`, `loss.png` and `precision.png` into `dir`.
pub fn export_curves(history: &TrainingHistory, dir: &Path) -> Result<Vec<PathBuf>> {
    if history.epochs.is_empty() {
        return Err(Error::EmptyInput("history has no epochs"));
    }
    fs::create_dir_all(dir)?;
    let csv = history.to_csv();
    let csv_path = dir.join("history.csv");
    fs::write(&csv_path, &csv)?;
    let (loss, precision) = render_curves(&csv)?;
    let loss_path = dir.join("loss.png");
    let precision_path = dir.join("precision.png");
    loss.save_with_format(&loss_path, image::ImageFormat::Png)?;
    precision.save_with_format(&precision_path, image::ImageFormat::Png)?;
    Ok(vec![csv_path, loss_path, precision_path])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub report: MetricsReport,
}

/// Rows ordered by F1, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

const SWEEP_HEADER: &str = "config,f1,precision,recall,oa,kappa,iou";

pub fn sweep_table(entries: &[(String, MetricsReport)]) -> Result<SweepTable> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("sweep needs at least one entry"));
    }
    let mut rows: Vec<SweepRow> = entries.iter().map(|(n, r)| SweepRow { name: n.clone(), report: *r }).collect();
    rows.sort_by(|a, b| b.report.f1.total_cmp(&a.report.f1));
    Ok(SweepTable { rows })
}

impl SweepTable {
    /// Scores at 4 decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let m = &r.report;
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.name, m.f1, m.precision, m.recall, m.oa, m.kappa, m.iou
            ));
        }
        out
    }

    /// Aligned plain-text table with percentages, in the layout of ablation tables.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            "Config", "F1", "Pre.", "Rec.", "OA", "KC", "IoU"
        );
        for r in &self.rows {
            let m = &r.report;
            out.push_str(&format!(
                "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}\n",
                r.name,
                100.0 * m.f1,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.oa,
                100.0 * m.kappa,
                100.0 * m.iou
            ));
        }
        out
    }

    /// Parses [`SweepTable::to_csv`] output; counts are not part of the CSV and come back as 0.
    pub fn parse_csv(text: &str) -> Result<Vec<(String, [f64; 6])>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut out = Vec::new();
        for row in r.records() {
            let row = row?;
            let name = row.get(0).unwrap_or("").to_string();
            let mut vals = [0.0; 6];
            for (k, v) in vals.iter_mut().enumerate() {
                let s = row.get(k + 1).unwrap_or("");
                *v = s.parse().map_err(|_| Error::Config(format!("bad number `{s}` in sweep CSV")))?;
            }
            out.push((name, vals));
        }
        Ok(out)
    }
}
