//! Composite loss, Adam with step decay, the epoch loop and
//! cross-validation.

mod adam;
mod cv;
mod loss;

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{log1p_normalize, select_top_k_genes, GeneSelection, SpotDataset};
use crate::error::{Error, Result};
use crate::evaluation::{MetricsReport, PcchSelector};
use crate::model::{
    bind_params, check_dataset, global_tokens_on, spot_forward_on, ModelParams, SlideContext, SlidePredictions,
};
use crate::numerics::{GridLayout, Tape, Tensor};
use crate::rng;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use cv::{cross_validate, CvReport, FoldReport, FoldStrategy, MeanSd};
pub use loss::{
    loss_branch, loss_branch_on, loss_fused, loss_total, loss_total_on, LossParts, LossVars, Predictions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    /// Side of the context window.
    pub d_context: usize,
    /// Number of most expressed genes to predict.
    pub k_genes: usize,
    pub seed: u64,
    /// Treat the fused prediction as a constant target in branch losses.
    pub distill_detach: bool,
    /// Optional global gradient-norm cap.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            step_size: 50,
            decay: 0.9,
            batch_size: 12,
            epochs: 20,
            lambda: 0.3,
            d_context: 5,
            k_genes: 250,
            seed: 0,
            distill_detach: true,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda = {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config("lr and decay must be positive".into()));
        }
        if self.step_size == 0 || self.batch_size == 0 || self.d_context == 0 || self.k_genes == 0 {
            return Err(Error::Config("step_size, batch_size, d_context and k_genes must be positive".into()));
        }
        if self.d_context % 2 == 0 {
            return Err(Error::Config(format!("d_context must be odd, got {}", self.d_context)));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `lr · decay^⌊epoch / step_size⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay.powi((epoch / cfg.step_size) as i32)
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
}

pub const LOSS_CSV_HEADER: &str = "epoch,lr,loss_total,loss_fused,loss_spot,loss_ctx,loss_global";

/// Loss log as CSV; dropped-branch columns are left empty.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for e in log {
        let [sp, cx, gl] = e.loss.branches();
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch,
            e.lr,
            e.loss.total,
            e.loss.fused,
            opt(sp),
            opt(cx),
            opt(gl)
        )
        .unwrap();
    }
    s
}

pub fn write_loss_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}

/// Picks the `k` most expressed genes over the pooled slides, clamping `k`
/// to the number of genes. All slides must list the same genes.
pub fn select_genes(slides: &[&SpotDataset], k: usize) -> Result<GeneSelection> {
    let first = slides.first().ok_or_else(|| Error::arg("no slides"))?;
    let genes = &first.expr.genes;
    let mut rows = 0;
    let mut data = Vec::new();
    for s in slides {
        if &s.expr.genes != genes {
            return Err(Error::arg(format!(
                "slide {} lists different genes than slide {}",
                s.slide_id, first.slide_id
            )));
        }
        rows += s.len();
        data.extend_from_slice(log1p_normalize(&s.expr).data());
    }
    let pooled = Tensor::matrix(rows, genes.len(), data)?;
    select_top_k_genes(&pooled, genes, k.min(genes.len()))
}

/// Normalised expression of the selected genes, `n_spots × k`, matched by
/// gene name.
pub fn targets_for(ds: &SpotDataset, sel: &GeneSelection) -> Result<Tensor> {
    let idx = ds.expr.genes.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect::<std::collections::HashMap<_, _>>();
    let indices = sel
        .names
        .iter()
        .map(|g| {
            idx.get(g.as_str())
                .copied()
                .ok_or_else(|| Error::arg(format!("slide {} has no gene `{g}`", ds.slide_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let local = GeneSelection {
        indices,
        names: sel.names.clone(),
    };
    local.columns(&log1p_normalize(&ds.expr))
}

/// A slide paired with its regression targets.
#[derive(Debug, Clone)]
pub struct TrainSlide<'a> {
    pub data: &'a SpotDataset,
    /// `n_spots × n_genes` normalised expression.
    pub targets: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

struct Prepared<'a> {
    slide: &'a TrainSlide<'a>,
    ctx: SlideContext,
}

fn first_non_finite(params: &ModelParams, grads: &[f64]) -> Option<String> {
    let mut off = 0;
    let mut found = None;
    params.weights.for_each(|name, t| {
        let n = t.len();
        if found.is_none() && grads[off..off + n].iter().any(|g| !g.is_finite()) {
            found = Some(name);
        }
        off += n;
    });
    found
}

/// Loss and flat gradient for one target spot.
fn spot_gradient(params: &ModelParams, p: &Prepared<'_>, spot: usize, cfg: &TrainConfig) -> Result<(LossParts, Vec<f64>)> {
    let mc = &params.config;
    let mut tape = Tape::new();
    let w = bind_params(&mut tape, params);
    let global = if mc.ablation.drop_global {
        None
    } else {
        let layout = Rc::new(GridLayout::new(&p.ctx.positions)?);
        Some(global_tokens_on(&mut tape, &w, &p.ctx.pooled_image, layout)?)
    };
    let sv = spot_forward_on(&mut tape, mc, &w, p.slide.data, &p.ctx, spot, global)?;
    let k = p.slide.targets.cols();
    let g = tape.constant(Tensor::matrix(1, k, p.slide.targets.row(spot).to_vec())?);
    let lv = loss_total_on(&mut tape, &sv, g, cfg.lambda, cfg.distill_detach)?;
    let grads = tape.backward(lv.total)?;
    let mut flat = Vec::with_capacity(params.n_scalars());
    w.for_each(|_, v| match grads.get(*v) {
        Some(g) => flat.extend_from_slice(g),
        None => flat.extend(std::iter::repeat(0.0).take(tape.value(*v).len())),
    });
    Ok((lv.read(&tape), flat))
}

fn average_losses(parts: &[LossParts]) -> LossParts {
    let n = parts.len() as f64;
    let mean = |f: &dyn Fn(&LossParts) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&LossParts) -> Option<f64>| {
        parts.first().and_then(f).map(|_| parts.iter().map(|p| f(p).unwrap_or(0.0)).sum::<f64>() / n)
    };
    LossParts {
        total: mean(&|p| p.total),
        fused: mean(&|p| p.fused),
        spot: mean_opt(&|p| p.spot),
        ctx: mean_opt(&|p| p.ctx),
        global: mean_opt(&|p| p.global),
    }
}

/// Minibatch Adam over the spots of every slide.
///
/// Each epoch shuffles all (slide, spot) pairs with the run seed and walks
/// them in batches of `batch_size`, keeping a final partial batch. A batch's
/// gradient is the mean of its per-spot gradients, summed in batch order, so
/// results do not depend on the thread count. The logged epoch loss is the
/// mean per-spot loss over the epoch.
pub fn train(slides: &[TrainSlide<'_>], mut params: ModelParams, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    params.validate()?;
    if slides.is_empty() {
        return Err(Error::arg("no training slides"));
    }
    if params.config.d_context != cfg.d_context {
        return Err(Error::Config(format!(
            "model context window {} differs from training config {}",
            params.config.d_context, cfg.d_context
        )));
    }
    let mut prepared = Vec::with_capacity(slides.len());
    for s in slides {
        check_dataset(&params.config, s.data)?;
        if s.targets.shape() != [s.data.len(), params.config.n_genes] {
            return Err(Error::dim(
                "train targets",
                s.targets.shape(),
                &[s.data.len(), params.config.n_genes],
            ));
        }
        prepared.push(Prepared {
            slide: s,
            ctx: SlideContext::new(s.data)?,
        });
    }
    let mut samples: Vec<(usize, usize)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(si, p)| (0..p.slide.data.len()).map(move |i| (si, i)))
        .collect();
    let mut adam = AdamState::new(params.n_scalars());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        samples.sort_unstable();
        samples.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));
        let mut epoch_losses = Vec::with_capacity(samples.len());
        for batch in samples.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&(si, i)| spot_gradient(&params, &prepared[si], i, cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; params.n_scalars()];
            for (l, g) in &results {
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                epoch_losses.push(*l);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if let Some(block) = first_non_finite(&params, &grad) {
                return Err(Error::NonFinite { what: "gradient", block });
            }
            if let Some((l, _)) = results.iter().find(|(l, _)| !l.total.is_finite()) {
                let term = [("fused", Some(l.fused)), ("spot", l.spot), ("ctx", l.ctx), ("global", l.global)]
                    .into_iter()
                    .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
                    .map_or("total", |(n, _)| n);
                return Err(Error::NonFinite {
                    what: "loss",
                    block: format!("head.{term}"),
                });
            }
            if let Some(c) = cfg.clip_grad_norm {
                clip_grad_norm(&mut grad, c);
            }
            let mut flat = params.flatten();
            adam_step(&mut flat, &grad, &mut adam, lr)?;
            params.assign_flat(&flat)?;
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss: average_losses(&epoch_losses),
        });
    }
    Ok(TrainRun { params, log })
}

/// Mean total loss over every spot of `slide` and its flat gradient in
/// serialisation order.
pub fn slide_loss_gradient(params: &ModelParams, slide: &TrainSlide<'_>, cfg: &TrainConfig) -> Result<(LossParts, Vec<f64>)> {
    check_dataset(&params.config, slide.data)?;
    let p = Prepared {
        slide,
        ctx: SlideContext::new(slide.data)?,
    };
    let results = (0..slide.data.len())
        .into_par_iter()
        .map(|i| spot_gradient(params, &p, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; params.n_scalars()];
    let mut parts = Vec::with_capacity(results.len());
    for (l, g) in &results {
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        parts.push(*l);
    }
    let inv = 1.0 / results.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((average_losses(&parts), grad))
}

/// Predictions of every head plus metrics of the fused head.
pub fn evaluate(
    params: &ModelParams,
    ds: &SpotDataset,
    targets: &Tensor,
    genes: &[String],
    selector: PcchSelector,
    n_top: usize,
) -> Result<(SlidePredictions, MetricsReport)> {
    let pred = params.forward_slide(ds)?;
    if !pred.fused.is_finite() {
        return Err(Error::NonFinite {
            what: "prediction",
            block: "head.fused".into(),
        });
    }
    let report = MetricsReport::compute(&pred.fused, targets, genes, selector, n_top)?;
    Ok((pred, report))
}
