//! Evaluation metrics, the per-step CSV log and its plots.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Probabilities;
use crate::threshold::Mask;

pub const CSV_HEADER: &str =
    "step,lr,l_sup,l_pseudo,l_cutmix,l_lower,total,mask_rate,tau,top1_err_ema,top1_err_raw,pseudo_acc";

/// One logged step. Loss terms and `mask_rate` are means over the steps
/// since the previous row; `tau` and the errors are taken at `step`.
/// Optional fields are written as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub l_sup: f64,
    pub l_pseudo: f64,
    pub l_cutmix: f64,
    pub l_lower: f64,
    pub total: f64,
    pub mask_rate: f64,
    pub tau: f64,
    pub top1_err_ema: Option<f64>,
    pub top1_err_raw: Option<f64>,
    pub pseudo_acc: Option<f64>,
}

/// Fraction of rows whose true class is not among the `k_top` most probable;
/// ranking ties go to the lower class index.
pub fn top_k_error(probs: &Probabilities, labels: &[usize], k_top: usize) -> Result<f64> {
    let (n, k) = probs.0.shape();
    if k_top == 0 || k_top > k {
        return Err(Error::config(format!("top-{k_top} error needs 1 <= k <= {k}")));
    }
    if labels.len() != n {
        return Err(Error::shape("labels and predictions differ in length"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    for (row, &label) in probs.0.iter_rows().zip(labels) {
        let p = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > p || (v == p && j < label))
            .count();
        if rank >= k_top {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n as f64)
}

pub fn utilization(mask: &Mask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.gates().iter().filter(|&&g| g).count() as f64 / mask.len() as f64
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())
        .map_err(csv_err)?;
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format {
            offset: 0,
            message: format!("unexpected metrics header `{}`", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            offset: 0,
            message: format!("csv: {other:?}"),
        },
    }
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 32;

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Line chart of `points` (x, y) with y fixed to `[0, 1]`; axes only when
/// there is nothing to draw.
fn render_series(points: &[(f64, f64)], color: Rgb<u8>) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right) = (f64::from(MARGIN), f64::from(PLOT_W - MARGIN));
    let (top, bottom) = (f64::from(MARGIN), f64::from(PLOT_H - MARGIN));
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    let grid = Rgb([220, 220, 220]);
    for q in 1..=4 {
        let y = bottom - (bottom - top) * f64::from(q) / 4.0;
        draw_line(&mut img, (left + 1.0, y), (right, y), grid);
    }
    if points.is_empty() {
        return img;
    }
    let xmax = points.iter().map(|p| p.0).fold(0.0, f64::max).max(1.0);
    let to_px = |(x, y): (f64, f64)| {
        (
            left + (right - left) * x / xmax,
            bottom - (bottom - top) * y.clamp(0.0, 1.0),
        )
    };
    for w in points.windows(2) {
        draw_line(&mut img, to_px(w[0]), to_px(w[1]), color);
    }
    if points.len() == 1 {
        let (x, y) = to_px(points[0]);
        draw_line(&mut img, (x - 2.0, y), (x + 2.0, y), color);
    }
    img
}

/// Renders `top1_accuracy.png` (EMA model) and `utilization.png` from a
/// metrics CSV and returns their paths.
pub fn emit_plots(csv_path: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let rows = read_metrics_csv(csv_path)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let acc: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.top1_err_ema.map(|e| (r.step as f64, 1.0 - e)))
        .collect();
    let util: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.mask_rate)).collect();
    let mut written = Vec::new();
    for (name, points, color) in [
        ("top1_accuracy.png", acc, Rgb([31, 119, 180])),
        ("utilization.png", util, Rgb([214, 39, 40])),
    ] {
        let path = out_dir.join(name);
        render_series(&points, color)
            .save(&path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn probs(rows: &[Vec<f64>]) -> Probabilities {
        Probabilities(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn top_k_examples() {
        let p = probs(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]]);
        assert_eq!(top_k_error(&p, &[0, 2], 1).unwrap(), 0.0);
        assert_eq!(top_k_error(&p, &[0, 1], 1).unwrap(), 0.5);
        assert_eq!(top_k_error(&p, &[2, 0], 3).unwrap(), 0.0);
        assert_eq!(top_k_error(&p, &[0, 1], 2).unwrap(), 0.0);
        assert!(top_k_error(&p, &[0, 1], 4).is_err());
        let tie = probs(&[vec![0.5, 0.5]]);
        assert_eq!(top_k_error(&tie, &[0], 1).unwrap(), 0.0);
        assert_eq!(top_k_error(&tie, &[1], 1).unwrap(), 1.0);
    }

    #[test]
    fn top_k_is_monotone() {
        let p = probs(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1], vec![0.25; 4]]);
        let labels = [0, 3, 2];
        let errs: Vec<f64> = (1..=4).map(|k| top_k_error(&p, &labels, k).unwrap()).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(&Mask::from_gates(vec![true; 4], 2)), 1.0);
        assert_eq!(utilization(&Mask::from_gates(vec![false; 4], 2)), 0.0);
        let mut g = vec![true; 10];
        g[3] = false;
        assert_eq!(utilization(&Mask::from_gates(g, 2)), 0.9);
    }

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            lr: 0.03,
            l_sup: 1.25,
            l_pseudo: 0.5,
            l_cutmix: 0.125,
            l_lower: 3.0,
            total: 1.881,
            mask_rate: 0.75,
            tau: 0.6,
            top1_err_ema: Some(0.1),
            top1_err_raw: Some(0.2),
            pseudo_acc: None,
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().trim_end(), CSV_HEADER);
        assert!(read_metrics_csv(&path).unwrap().is_empty());
        let rows = vec![row(1), row(2)];
        write_metrics_csv(&rows, &path).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    #[test]
    fn plots_are_written_even_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        write_metrics_csv(&[], &csv).unwrap();
        let out = emit_plots(&csv, dir.path().join("plots")).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|p| p.exists()));
        write_metrics_csv(&[row(10), row(20)], &csv).unwrap();
        assert_eq!(emit_plots(&csv, dir.path().join("plots")).unwrap().len(), 2);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_metrics_csv(&[], "/nonexistent-dir/x/metrics.csv").unwrap_err();
        assert!(matches!(err, Error::Io(_)), "{err:?}");
    }
}
