//! Error and correlation metrics, gene ranking and prediction-map export.

mod export;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use export::{export_prediction_map, render_pgm, write_prediction_table};

/// Number of genes averaged into PCC(H) by default.
pub const TOP_GENES: usize = 50;

/// Mean squared error over every entry.
pub fn mse_metric(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim("mse_metric", pred.shape(), truth.shape()));
    }
    if pred.is_empty() {
        return Err(Error::arg("mse_metric of an empty matrix"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Pearson correlation of each gene column across spots. Genes whose
/// predicted or true column is constant are `None`.
pub fn pcc_per_gene(pred: &Tensor, truth: &Tensor) -> Result<Vec<Option<f64>>> {
    if pred.shape() != truth.shape() || pred.shape().len() != 2 {
        return Err(Error::dim("pcc_per_gene", pred.shape(), truth.shape()));
    }
    let (n, k) = (pred.rows(), pred.cols());
    if n < 2 {
        return Err(Error::arg(format!("correlation needs at least 2 spots, got {n}")));
    }
    let (p, t) = (pred.data(), truth.data());
    let out = (0..k)
        .map(|j| {
            let col = |x: &[f64], i: usize| x[i * k + j];
            let mp = (0..n).map(|i| col(p, i)).sum::<f64>() / n as f64;
            let mt = (0..n).map(|i| col(t, i)).sum::<f64>() / n as f64;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let dx = col(p, i) - mp;
                let dy = col(t, i) - mt;
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
            let constant = |x: &[f64]| (1..n).all(|i| col(x, i) == col(x, 0));
            if constant(p) || constant(t) || sxx == 0.0 || syy == 0.0 {
                None
            } else {
                Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
            }
        })
        .collect();
    Ok(out)
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>, what: &str) -> Result<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for v in vals.flatten() {
        s += v;
        c += 1;
    }
    if c == 0 {
        return Err(Error::UndefinedMetric(format!("{what}: no gene has a defined correlation")));
    }
    Ok(s / c as f64)
}

/// Mean of the defined per-gene correlations.
pub fn pcc_m(pcc: &[Option<f64>]) -> Result<f64> {
    mean_defined(pcc.iter().copied(), "PCC(M)")
}

/// Mean of the defined correlations among `top`.
pub fn pcc_h(pcc: &[Option<f64>], top: &[usize]) -> Result<f64> {
    if let Some(&i) = top.iter().find(|&&i| i >= pcc.len()) {
        return Err(Error::arg(format!("gene index {i} out of range for {} genes", pcc.len())));
    }
    mean_defined(top.iter().map(|&i| pcc[i]), "PCC(H)")
}

fn rank_by(score: &[Option<f64>], names: &[String], n: usize, what: &'static str) -> Result<Vec<usize>> {
    if names.len() != score.len() {
        return Err(Error::dim(what, &[score.len()], &[names.len()]));
    }
    let mut idx: Vec<usize> = (0..score.len()).filter(|&i| score[i].is_some()).collect();
    if n > idx.len() {
        return Err(Error::arg(format!(
            "{what}: asked for {n} genes but only {} have a defined score",
            idx.len()
        )));
    }
    idx.sort_by(|&a, &b| {
        let (x, y) = (score[a].unwrap(), score[b].unwrap());
        y.partial_cmp(&x)
            .unwrap_or(Ordering::Equal)
            .then_with(|| names[a].cmp(&names[b]))
    });
    idx.truncate(n);
    Ok(idx)
}

/// Indices of the `n` genes with the largest defined correlation, ties by
/// ascending gene name.
pub fn rank_predictive_genes(pcc: &[Option<f64>], names: &[String], n: usize) -> Result<Vec<usize>> {
    rank_by(pcc, names, n, "rank_predictive_genes")
}

/// Indices of the `n` genes with the largest mean true expression, ties by
/// ascending gene name.
pub fn rank_expressed_genes(truth: &Tensor, names: &[String], n: usize) -> Result<Vec<usize>> {
    let (rows, k) = (truth.rows(), truth.cols());
    let means: Vec<Option<f64>> = (0..k)
        .map(|j| Some((0..rows).map(|i| truth.data()[i * k + j]).sum::<f64>() / rows as f64))
        .collect();
    rank_by(&means, names, n, "rank_expressed_genes")
}

/// Which genes PCC(H) averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcchSelector {
    /// Largest per-gene correlation.
    #[default]
    Predictive,
    /// Largest mean true expression.
    Expressed,
}

impl std::str::FromStr for PcchSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predictive" => Ok(Self::Predictive),
            "expressed" => Ok(Self::Expressed),
            _ => Err(Error::arg(format!(
                "unknown PCC(H) selector `{s}` (predictive | expressed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub pcc_m: f64,
    pub pcc_h: f64,
    /// Genes with an undefined correlation, left out of both averages.
    pub excluded_genes: usize,
    pub pcc_per_gene: Vec<Option<f64>>,
    /// Names of the genes PCC(H) averages over, best first.
    pub top_genes: Vec<String>,
    #[serde(skip)]
    pub top_gene_indices: Vec<usize>,
}

impl MetricsReport {
    /// Scores `pred` against `truth`. PCC(H) uses `n_top` genes, fewer when
    /// fewer genes are eligible.
    pub fn compute(
        pred: &Tensor,
        truth: &Tensor,
        genes: &[String],
        selector: PcchSelector,
        n_top: usize,
    ) -> Result<Self> {
        let mse = mse_metric(pred, truth)?;
        let pcc = pcc_per_gene(pred, truth)?;
        if genes.len() != pcc.len() {
            return Err(Error::dim("MetricsReport", &[pcc.len()], &[genes.len()]));
        }
        let defined = pcc.iter().filter(|v| v.is_some()).count();
        let top = match selector {
            PcchSelector::Predictive => rank_predictive_genes(&pcc, genes, n_top.min(defined))?,
            PcchSelector::Expressed => rank_expressed_genes(truth, genes, n_top.min(genes.len()))?,
        };
        Ok(Self {
            mse,
            pcc_m: pcc_m(&pcc)?,
            pcc_h: pcc_h(&pcc, &top)?,
            excluded_genes: pcc.len() - defined,
            top_genes: top.iter().map(|&i| genes[i].clone()).collect(),
            top_gene_indices: top,
            pcc_per_gene: pcc,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
