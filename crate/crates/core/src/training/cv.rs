//! Held-out-slide cross-validation.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpotDataset;
use crate::error::{Error, Result};
use crate::evaluation::{MetricsReport, PcchSelector};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::training::{evaluate, select_genes, targets_for, train, TrainConfig, TrainSlide};

/// How slides are split into folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FoldStrategy {
    /// One fold per slide.
    LeaveOneSlideOut,
    /// One fold per distinct label, holding out every slide with that label
    /// (e.g. a patient). One label per dataset.
    Groups(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: Vec<String>,
    pub final_loss: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mse: MeanSd,
    pub pcc_m: MeanSd,
    pub pcc_h: MeanSd,
}

fn fold_members(n: usize, strategy: &FoldStrategy) -> Result<Vec<Vec<usize>>> {
    match strategy {
        FoldStrategy::LeaveOneSlideOut => {
            if n < 2 {
                return Err(Error::arg(format!(
                    "leave-one-slide-out needs at least 2 slides, got {n}"
                )));
            }
            Ok((0..n).map(|i| vec![i]).collect())
        }
        FoldStrategy::Groups(labels) => {
            if labels.len() != n {
                return Err(Error::dim("fold groups", &[n], &[labels.len()]));
            }
            let distinct: BTreeSet<&String> = labels.iter().collect();
            if distinct.len() < 2 {
                return Err(Error::arg("group folds need at least 2 distinct groups"));
            }
            Ok(distinct
                .into_iter()
                .map(|g| (0..n).filter(|&i| &labels[i] == g).collect())
                .collect())
        }
    }
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::matrix(rows, cols, data)
}

/// Trains on all but one fold and scores the fused head on the held-out
/// slides, for every fold. `template` supplies the architecture; its gene
/// count, stream widths and window size are set per fold. Folds run in
/// parallel without affecting results.
pub fn cross_validate(
    datasets: &[SpotDataset],
    template: &ModelConfig,
    cfg: &TrainConfig,
    strategy: &FoldStrategy,
    selector: PcchSelector,
    n_top: usize,
) -> Result<CvReport> {
    cfg.validate()?;
    let folds = fold_members(datasets.len(), strategy)?;
    let reports = folds
        .par_iter()
        .map(|held| -> Result<FoldReport> {
            let train_sets: Vec<&SpotDataset> = (0..datasets.len())
                .filter(|i| !held.contains(i))
                .map(|i| &datasets[i])
                .collect();
            let sel = select_genes(&train_sets, cfg.k_genes)?;
            let mut mc = template.clone();
            mc.n_genes = sel.names.len();
            mc.genes = sel.names.clone();
            mc.d_context = cfg.d_context;
            mc.stream_dims = train_sets[0].stream_dims();
            let params = ModelParams::init(mc, cfg.seed)?;
            let slides = train_sets
                .iter()
                .map(|d| Ok(TrainSlide { data: d, targets: targets_for(d, &sel)? }))
                .collect::<Result<Vec<_>>>()?;
            let mut run = train(&slides, params, cfg)?;
            run.params.quantize_f32();
            let mut preds = Vec::new();
            let mut truths = Vec::new();
            for &i in held {
                let t = targets_for(&datasets[i], &sel)?;
                let (p, _) = evaluate(&run.params, &datasets[i], &t, &sel.names, selector, n_top)?;
                preds.push(p.fused);
                truths.push(t);
            }
            let metrics = MetricsReport::compute(&stack(&preds)?, &stack(&truths)?, &sel.names, selector, n_top)?;
            Ok(FoldReport {
                held_out: held.iter().map(|&i| datasets[i].slide_id.clone()).collect(),
                final_loss: run.log.last().map(|e| e.loss.total),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&MetricsReport) -> f64| MeanSd::of(&reports.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    Ok(CvReport {
        mse: col(|m| m.mse),
        pcc_m: col(|m| m.pcc_m),
        pcc_h: col(|m| m.pcc_h),
        folds: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_arithmetic() {
        assert_eq!(fold_members(3, &FoldStrategy::LeaveOneSlideOut).unwrap().len(), 3);
        assert!(fold_members(1, &FoldStrategy::LeaveOneSlideOut).is_err());
        let g = FoldStrategy::Groups(vec!["p2".into(), "p1".into(), "p2".into()]);
        assert_eq!(fold_members(3, &g).unwrap(), vec![vec![1], vec![0, 2]]);
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanSd::of(&[5.0]).sd, 0.0);
    }
}
