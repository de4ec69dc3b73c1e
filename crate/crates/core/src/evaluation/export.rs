//! Per-spot prediction maps (CSV + binary PGM) and prediction tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::SpotRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Grey level of every occupied cell when all values are equal.
const CONSTANT_LEVEL: u8 = 128;

/// P5 image over grid rows `0..=max_row` and columns `0..=max_col`. Occupied
/// cells hold min-max scaled values rounded to `0..=255`; empty cells are 0.
pub fn render_pgm(spots: &[SpotRecord], values: &[f64]) -> Result<Vec<u8>> {
    if spots.len() != values.len() {
        return Err(Error::dim("render_pgm", &[spots.len()], &[values.len()]));
    }
    if spots.is_empty() {
        return Err(Error::arg("prediction map needs at least one spot"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::arg(format!("prediction map value {v} is not finite")));
    }
    let w = spots.iter().map(|s| s.array_col).max().unwrap() + 1;
    let h = spots.iter().map(|s| s.array_row).max().unwrap() + 1;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pixels = vec![0u8; w * h];
    for (s, &v) in spots.iter().zip(values) {
        pixels[s.array_row * w + s.array_col] = if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            CONSTANT_LEVEL
        };
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Writes `spot_id,px_x,px_y,value` rows and the grid image.
pub fn export_prediction_map(spots: &[SpotRecord], values: &[f64], csv_path: &Path, image_path: &Path) -> Result<()> {
    let pgm = render_pgm(spots, values)?;
    let mut csv = String::from("spot_id,px_x,px_y,value\n");
    for (s, v) in spots.iter().zip(values) {
        writeln!(csv, "{},{},{},{}", s.spot_id, s.px_x, s.px_y, v).unwrap();
    }
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    fs::write(image_path, pgm).map_err(|e| Error::io(image_path, e))
}

/// Tab-separated `spot_id` plus one column per gene.
pub fn write_prediction_table(path: &Path, spots: &[SpotRecord], genes: &[String], pred: &Tensor) -> Result<()> {
    if pred.rows() != spots.len() || pred.cols() != genes.len() {
        return Err(Error::dim("write_prediction_table", pred.shape(), &[spots.len(), genes.len()]));
    }
    let mut s = String::from("spot_id");
    for g in genes {
        write!(s, "\t{g}").unwrap();
    }
    s.push('\n');
    for (i, spot) in spots.iter().enumerate() {
        s.push_str(&spot.spot_id);
        for v in pred.row(i) {
            write!(s, "\t{v}").unwrap();
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2() -> Vec<SpotRecord> {
        vec![
            SpotRecord::new("a", 0, 0, 0.0, 0.0),
            SpotRecord::new("b", 0, 1, 1.0, 0.0),
            SpotRecord::new("c", 1, 0, 0.0, 1.0),
            SpotRecord::new("d", 1, 1, 1.0, 1.0),
        ]
    }

    #[test]
    fn min_max_levels() {
        let img = render_pgm(&grid2(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        assert_eq!(&img[..11], b"P5\n2 2\n255\n");
        assert_eq!(&img[11..], &[0, 85, 170, 255]);
    }

    #[test]
    fn constant_values_single_level_and_gaps_zero() {
        let spots = vec![SpotRecord::new("a", 0, 0, 0.0, 0.0), SpotRecord::new("b", 1, 2, 0.0, 0.0)];
        let img = render_pgm(&spots, &[3.0, 3.0]).unwrap();
        assert_eq!(&img[..11], b"P5\n3 2\n255\n");
        assert_eq!(&img[11..], &[128, 0, 0, 0, 0, 128]);
    }

    #[test]
    fn writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let (c, p) = (dir.path().join("m.csv"), dir.path().join("m.pgm"));
        export_prediction_map(&grid2(), &[1.0, 2.0, 3.0, 4.5], &c, &p).unwrap();
        let csv = fs::read_to_string(&c).unwrap();
        assert_eq!(csv.lines().next(), Some("spot_id,px_x,px_y,value"));
        assert_eq!(csv.lines().nth(4), Some("d,1,1,4.5"));
        assert!(p.exists());
        assert!(export_prediction_map(&grid2(), &[1.0], &c, &p).is_err());
    }
}
