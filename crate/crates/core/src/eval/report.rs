//! Report files: the noise table as CSV, the report as JSON, image grids as PNG.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::noise::NoiseCell;
use crate::data::RgbImage;
use crate::error::{Error, Result};

pub const NOISE_CSV_HEADER: [&str; 4] = ["dataset", "part", "t", "accuracy"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub dataset: String,
    pub clean_accuracy: f64,
    /// Additional accuracies, e.g. per-part probes (percentages).
    pub accuracies: BTreeMap<String, f64>,
    pub noise: Vec<NoiseCell>,
    /// Other scalar results (fractions, losses).
    pub metrics: BTreeMap<String, f64>,
    /// Figure files relative to the report directory.
    pub figures: Vec<String>,
    /// Resolved configuration the report was produced from.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(("clean", self.clean_accuracy))
            .chain(self.accuracies.iter().map(|(k, v)| (k.as_str(), *v)))
            .chain(self.noise.iter().map(|c| (c.part.as_str(), c.accuracy)));
        for (name, a) in all {
            if !(0.0..=100.0).contains(&a) {
                return Err(Error::Parameter(format!("accuracy {name} = {a} outside [0, 100]")));
            }
        }
        Ok(())
    }
}

/// Fixed formatting so equal results give equal bytes.
fn fmt_accuracy(a: f64) -> String {
    format!("{a:.4}")
}

pub fn write_noise_csv(path: &Path, dataset: &str, cells: &[NoiseCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(NOISE_CSV_HEADER)?;
    for c in cells {
        w.write_record([dataset, c.part.as_str(), &format!("{}", c.t), &fmt_accuracy(c.accuracy)])?;
    }
    w.flush()?;
    Ok(())
}

/// Tiles equally sized images into a `rows × cols` PNG with `pad` pixels of
/// black between cells.
pub fn save_grid_png(path: &Path, images: &[RgbImage], rows: usize, cols: usize, pad: usize) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::Dimension("empty image grid".into()))?;
    if images.len() != rows * cols {
        return Err(Error::Dimension(format!("{} images for a {rows}x{cols} grid", images.len())));
    }
    let (w, h) = (first.width(), first.height());
    let (gw, gh) = (cols * w + (cols + 1) * pad, rows * h + (rows + 1) * pad);
    let mut canvas = image::RgbImage::new(gw as u32, gh as u32);
    for (i, img) in images.iter().enumerate() {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Dimension("grid images differ in size".into()));
        }
        let (r, c) = (i / cols, i % cols);
        let (ox, oy) = (pad + c * (w + pad), pad + r * (h + pad));
        for y in 0..h {
            for x in 0..w {
                canvas.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(img.get(y, x)));
            }
        }
    }
    canvas.save(path)?;
    Ok(())
}

/// Writes `report.json` and, when the report has a noise table,
/// `noise.csv` under `dir`. Returns the written paths.
pub fn emit_report(dir: &Path, report: &EvalReport) -> Result<Vec<PathBuf>> {
    report.validate()?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if !report.noise.is_empty() {
        let p = dir.join("noise.csv");
        write_noise_csv(&p, &report.dataset, &report.noise)?;
        written.push(p);
    }
    let p = dir.join("report.json");
    fs::write(&p, serde_json::to_vec_pretty(report)?)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells() -> Vec<NoiseCell> {
        vec![
            NoiseCell { part: "clean".into(), t: 0.0, accuracy: 98.5 },
            NoiseCell { part: "content".into(), t: 1.0, accuracy: 72.36 },
            NoiseCell { part: "style".into(), t: 1.0, accuracy: 98.18 },
        ]
    }

    #[test]
    fn csv_schema_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport { dataset: "biased".into(), clean_accuracy: 98.5, noise: cells(), ..Default::default() };
        let a = emit_report(&dir.path().join("a"), &report).unwrap();
        let b = emit_report(&dir.path().join("b"), &report).unwrap();
        let text = fs::read_to_string(&a[0]).unwrap();
        assert_eq!(text.lines().next().unwrap(), "dataset,part,t,accuracy");
        assert_eq!(text.lines().nth(2).unwrap(), "biased,content,1,72.3600");
        assert_eq!(fs::read(&a[0]).unwrap(), fs::read(&b[0]).unwrap());
        assert_eq!(fs::read(&a[1]).unwrap(), fs::read(&b[1]).unwrap());
    }

    #[test]
    fn out_of_range_accuracy_rejected() {
        let report = EvalReport { clean_accuracy: 101.0, ..Default::default() };
        assert!(report.validate().is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, b"x").unwrap();
        let report = EvalReport { noise: cells(), ..Default::default() };
        assert!(matches!(emit_report(&file.join("sub"), &report), Err(Error::Io(_))));
    }

    #[test]
    fn grid_png_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(4, 3, vec![200; 36], 0).unwrap();
        let p = dir.path().join("g.png");
        save_grid_png(&p, &vec![img; 6], 2, 3, 1).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!((back.width(), back.height()), (3 * 4 + 4, 2 * 3 + 3));
        assert!(save_grid_png(&p, &[], 0, 0, 0).is_err());
    }
}
