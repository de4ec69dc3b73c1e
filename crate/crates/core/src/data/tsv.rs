//! Tab-separated spot and expression tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{ExpressionMatrix, SpotRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SPOT_HEADER: [&str; 5] = ["spot_id", "array_row", "array_col", "px_x", "px_y"];

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.is_empty())
}

pub fn load_spot_table(path: &Path) -> Result<Vec<SpotRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut it = lines(&text);
    let (_, header) = it.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let mut idx = [0usize; 5];
    for (k, name) in SPOT_HEADER.iter().enumerate() {
        idx[k] = cols
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))?;
    }
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (lineno, line) in it {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let grid = |k: usize| -> Result<usize> {
            fields[idx[k]].parse::<usize>().map_err(|_| {
                parse_err(
                    path,
                    lineno,
                    format!("{} `{}` is not a non-negative integer", SPOT_HEADER[k], fields[idx[k]]),
                )
            })
        };
        let px = |k: usize| -> Result<f64> {
            fields[idx[k]]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    parse_err(path, lineno, format!("{} `{}` is not a number", SPOT_HEADER[k], fields[idx[k]]))
                })
        };
        let rec = SpotRecord::new(fields[idx[0]], grid(1)?, grid(2)?, px(3)?, px(4)?);
        if let Some(prev) = seen.insert(rec.grid(), lineno) {
            return Err(parse_err(
                path,
                lineno,
                format!("grid position {:?} already used on line {prev}", rec.grid()),
            ));
        }
        if let Some(prev) = ids.insert(rec.spot_id.clone(), lineno) {
            return Err(parse_err(
                path,
                lineno,
                format!("spot_id `{}` already used on line {prev}", rec.spot_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_spot_table(path: &Path, spots: &[SpotRecord]) -> Result<()> {
    let mut s = SPOT_HEADER.join("\t");
    s.push('\n');
    for r in spots {
        writeln!(s, "{}\t{}\t{}\t{}\t{}", r.spot_id, r.array_row, r.array_col, r.px_x, r.px_y).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads an expression table and reorders its rows to match `spots`.
pub fn load_expression_matrix(path: &Path, spots: &[SpotRecord]) -> Result<ExpressionMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut it = lines(&text);
    let (_, header) = it.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.first() != Some(&"spot_id") {
        return Err(parse_err(path, 1, "first column must be `spot_id`"));
    }
    if cols.len() < 2 {
        return Err(parse_err(path, 1, "no gene columns"));
    }
    let genes: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let k = genes.len();
    let order: HashMap<&str, usize> = spots
        .iter()
        .enumerate()
        .map(|(i, s)| (s.spot_id.as_str(), i))
        .collect();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; spots.len()];
    for (lineno, line) in it {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != k + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", k + 1, fields.len()),
            ));
        }
        let &i = order
            .get(fields[0])
            .ok_or_else(|| parse_err(path, lineno, format!("unknown spot_id `{}`", fields[0])))?;
        if rows[i].is_some() {
            return Err(parse_err(path, lineno, format!("duplicate spot_id `{}`", fields[0])));
        }
        let mut vals = Vec::with_capacity(k);
        for (g, cell) in fields[1..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(path, lineno, format!("gene `{}`: `{cell}` is not a number", genes[g]))
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("gene `{}`: count {v} must be finite and ≥ 0", genes[g]),
                ));
            }
            vals.push(v);
        }
        rows[i] = Some(vals);
    }
    let mut data = Vec::with_capacity(spots.len() * k);
    for (row, spot) in rows.into_iter().zip(spots) {
        let row = row.ok_or_else(|| {
            parse_err(path, 0, format!("no expression row for spot `{}`", spot.spot_id))
        })?;
        data.extend(row);
    }
    ExpressionMatrix::new(genes, Tensor::matrix(spots.len(), k, data)?)
}

pub fn write_expression_matrix(path: &Path, spots: &[SpotRecord], expr: &ExpressionMatrix) -> Result<()> {
    if spots.len() != expr.n_spots() {
        return Err(Error::dim("write_expression_matrix", &[spots.len()], expr.values.shape()));
    }
    let mut s = String::from("spot_id");
    for g in &expr.genes {
        s.push('\t');
        s.push_str(g);
    }
    s.push('\n');
    for (i, spot) in spots.iter().enumerate() {
        s.push_str(&spot.spot_id);
        for v in expr.values.row(i) {
            write!(s, "\t{v}").unwrap();
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
