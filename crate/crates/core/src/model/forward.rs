//! The three branches, their fusion, and whole-slide forward passes.

use std::rc::Rc;

use rayon::prelude::*;

use crate::data::{ContextWindow, GridIndex, SpotDataset};
use crate::error::{Error, Result};
use crate::features::{feature_transform_on, FeatureBundle, Stream, View};
use crate::model::apeg::apeg_on;
use crate::model::attention::{mca_on, GuideMasks, McaOutput};
use crate::model::config::{GuideMode, ModelConfig};
use crate::model::params::{LinearHead, McaWeights, ModelParams, ModelWeights};
use crate::numerics::{GridLayout, Tape, Tensor, Var};

/// Slide-level data shared by every spot's forward pass.
#[derive(Debug, Clone)]
pub struct SlideContext {
    pub grid: GridIndex,
    pub positions: Vec<(usize, usize)>,
    /// Mean spot-view image token of each spot, `n_spots × image_dim`.
    pub pooled_image: Tensor,
}

impl SlideContext {
    pub fn new(ds: &SpotDataset) -> Result<Self> {
        let dim = ds.stream_dims().image;
        let mut data = Vec::with_capacity(ds.len() * dim);
        for f in &ds.features {
            let t = &f.spot.image;
            let mut mean = vec![0.0; dim];
            for r in 0..t.rows() {
                mean.iter_mut().zip(t.row(r)).for_each(|(m, v)| *m += v);
            }
            let inv = 1.0 / t.rows() as f64;
            data.extend(mean.into_iter().map(|m| m * inv));
        }
        Ok(Self {
            grid: GridIndex::new(&ds.spots)?,
            positions: ds.grid_positions(),
            pooled_image: Tensor::matrix(ds.len(), dim, data)?,
        })
    }

    pub fn window(&self, center: usize, d: usize) -> Result<ContextWindow> {
        let pos = *self
            .positions
            .get(center)
            .ok_or_else(|| Error::arg(format!("spot index {center} out of range")))?;
        self.grid.window(center, pos, d)
    }
}

/// Records every weight as a trainable tape input.
pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> ModelWeights<Var> {
    params.weights.map(|t| tape.param(t.clone()))
}

/// Records every weight as a constant (inference only).
pub fn bind_constants(tape: &mut Tape, params: &ModelParams) -> ModelWeights<Var> {
    params.weights.map(|t| tape.constant(t.clone()))
}

/// Tape handles of one branch's output.
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub tokens: Var,
    /// Token presence; `None` means all present.
    pub mask: Option<Vec<bool>>,
    pub pooled: Var,
    pub prediction: Var,
    pub guide: Option<McaOutput>,
}

/// Tape handles of one target spot's predictions. Dropped branches are
/// `None`.
#[derive(Debug, Clone)]
pub struct SpotVars {
    pub fused: Var,
    pub fused_tokens: Var,
    pub spot: Option<BranchVars>,
    pub ctx: Option<BranchVars>,
    pub global: Option<Var>,
}

pub fn head_on(tape: &mut Tape, head: &LinearHead<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul(x, head.weight)?;
    tape.add_row(y, head.bias)
}

#[derive(Debug, Clone, Copy)]
struct GuideFlags {
    no_edge: bool,
    no_nuclei: bool,
}

/// Combines projected image/edge/nuclei tokens per the configured guide mode.
#[allow(clippy::too_many_arguments)]
fn guide_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    block: &McaWeights<Var>,
    image: Var,
    edge: Var,
    nuclei: Var,
    mask: Option<&[bool]>,
    flags: GuideFlags,
) -> Result<(Var, Option<McaOutput>)> {
    let edge = if flags.no_edge { image } else { edge };
    let nuclei = if flags.no_nuclei { image } else { nuclei };
    match cfg.guide_mode {
        GuideMode::Mca => {
            let masks = GuideMasks { a: mask, b: mask };
            let o = mca_on(tape, edge, image, nuclei, block, masks, cfg.layer_norm_eps)?;
            Ok((o.out, Some(o)))
        }
        GuideMode::Sum => {
            let s = tape.sum(&[image, edge, nuclei])?;
            Ok((tape.layer_norm(s, block.gamma, block.beta, cfg.layer_norm_eps)?, None))
        }
        GuideMode::Concat => {
            let w = block
                .concat
                .ok_or_else(|| Error::Config("concat guide mode without concat weights".into()))?;
            let c = tape.concat_cols(&[image, edge, nuclei])?;
            let p = tape.matmul(c, w)?;
            Ok((tape.layer_norm(p, block.gamma, block.beta, cfg.layer_norm_eps)?, None))
        }
    }
}

fn project_streams(
    tape: &mut Tape,
    w: &ModelWeights<Var>,
    view: View,
    raw: [Tensor; 3],
) -> Result<[Var; 3]> {
    let mut out = Vec::with_capacity(3);
    for (s, t) in Stream::ALL.into_iter().zip(raw) {
        let x = tape.constant(t);
        out.push(feature_transform_on(tape, x, *w.proj(view, s))?);
    }
    Ok([out[0], out[1], out[2]])
}

fn finish_branch(
    tape: &mut Tape,
    head: &LinearHead<Var>,
    tokens: Var,
    mask: Option<Vec<bool>>,
    guide: Option<McaOutput>,
) -> Result<BranchVars> {
    let pooled = tape.masked_mean_rows(tokens, mask.as_deref())?;
    let prediction = head_on(tape, head, pooled)?;
    Ok(BranchVars {
        tokens,
        mask,
        pooled,
        prediction,
        guide,
    })
}

/// Spot branch: image tokens guided by the same patch's edge and nuclei
/// tokens.
pub fn spot_branch_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    bundle: &FeatureBundle,
) -> Result<BranchVars> {
    bundle.validate()?;
    let [img, edge, nuc] = project_streams(
        tape,
        w,
        View::Spot,
        [bundle.image.clone(), bundle.edge.clone(), bundle.nuclei.clone()],
    )?;
    let flags = GuideFlags {
        no_edge: cfg.ablation.no_edge_spot,
        no_nuclei: cfg.ablation.no_nuclei_spot,
    };
    let mask = bundle.mask.as_deref();
    let (tokens, guide) = guide_on(tape, cfg, &w.spot, img, edge, nuc, mask, flags)?;
    finish_branch(tape, &w.head_spot, tokens, bundle.mask.clone(), guide)
}

/// Context-view tokens of every window member concatenated in row-major
/// window order; absent members contribute zero tokens flagged false.
pub fn context_bundle(ds: &SpotDataset, window: &ContextWindow) -> Result<FeatureBundle> {
    let tokens = ds.tokens_per_stream();
    let dims = ds.stream_dims();
    let absent = FeatureBundle::absent(tokens, dims);
    let mut parts: Vec<&FeatureBundle> = Vec::with_capacity(window.members.len());
    for m in &window.members {
        parts.push(match m {
            Some(i) => &ds.features[*i].ctx,
            None => &absent,
        });
    }
    let stack = |s: Stream| -> Result<Tensor> {
        let mut data = Vec::with_capacity(parts.len() * tokens * dims.get(s));
        for p in &parts {
            data.extend_from_slice(p.stream(s).data());
        }
        Tensor::matrix(parts.len() * tokens, dims.get(s), data)
    };
    let mut mask = Vec::with_capacity(parts.len() * tokens);
    for p in &parts {
        match &p.mask {
            Some(m) => mask.extend_from_slice(m),
            None => mask.extend(std::iter::repeat(true).take(tokens)),
        }
    }
    let mut b = FeatureBundle::new(stack(Stream::Image)?, stack(Stream::Edge)?, stack(Stream::Nuclei)?)?;
    b.mask = Some(mask);
    Ok(b)
}

/// In-context branch over the `d × d` window around `window.center`.
pub fn context_branch_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    ds: &SpotDataset,
    window: &ContextWindow,
) -> Result<BranchVars> {
    if window.present() == 0 {
        return Err(Error::arg("context window has no present members"));
    }
    let bundle = context_bundle(ds, window)?;
    let [img, edge, nuc] = project_streams(tape, w, View::Context, [bundle.image, bundle.edge, bundle.nuclei])?;
    let flags = GuideFlags {
        no_edge: cfg.ablation.no_edge_ctx,
        no_nuclei: cfg.ablation.no_nuclei_ctx,
    };
    let mask = bundle.mask;
    let (tokens, guide) = guide_on(tape, cfg, &w.ctx, img, edge, nuc, mask.as_deref(), flags)?;
    finish_branch(tape, &w.head_ctx, tokens, mask, guide)
}

/// Global branch tokens: each spot's pooled image token, projected and
/// position-encoded over the slide grid. One row per spot.
pub fn global_tokens_on(
    tape: &mut Tape,
    w: &ModelWeights<Var>,
    pooled_image: &Tensor,
    layout: Rc<GridLayout>,
) -> Result<Var> {
    let x = tape.constant(pooled_image.clone());
    let x = feature_transform_on(tape, x, *w.proj(View::Spot, Stream::Image))?;
    apeg_on(tape, x, layout, w.apeg)
}

/// Fused prediction for `target`.
///
/// The global tokens are the query and the spot and context tokens the two
/// guides. A dropped guide is replaced by the query stream. Without the
/// global branch the spot (or else context) tokens become the query and the
/// fused tokens are mean-pooled.
#[allow(clippy::too_many_arguments)]
pub fn fuse_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    spot: Option<&BranchVars>,
    ctx: Option<&BranchVars>,
    global_tokens: Option<Var>,
    target: usize,
) -> Result<(Var, Var)> {
    // Attention and LayerNorm act row by row, so restricting the query to
    // the target row yields exactly that row of the full fused output.
    let (query, query_mask, pool) = match (global_tokens, spot, ctx) {
        (Some(g), _, _) => {
            let n = tape.value(g).rows();
            if target >= n {
                return Err(Error::arg(format!("target spot {target} out of range for {n} spots")));
            }
            (tape.gather_rows(g, &[target])?, None, false)
        }
        (None, Some(s), _) => (s.tokens, s.mask.clone(), true),
        (None, None, Some(c)) => (c.tokens, c.mask.clone(), true),
        (None, None, None) => return Err(Error::Config("no branch left to fuse".into())),
    };
    let (guide_a, mask_a) = match spot {
        Some(s) => (s.tokens, s.mask.clone()),
        None => (query, query_mask.clone()),
    };
    let (guide_b, mask_b) = match ctx {
        Some(c) => (c.tokens, c.mask.clone()),
        None => (query, query_mask.clone()),
    };
    let masks = GuideMasks {
        a: mask_a.as_deref(),
        b: mask_b.as_deref(),
    };
    let o = mca_on(tape, guide_a, query, guide_b, &w.fusion, masks, cfg.layer_norm_eps)?;
    let row = if pool {
        tape.masked_mean_rows(o.out, query_mask.as_deref())?
    } else {
        o.out
    };
    Ok((head_on(tape, &w.head_fused, row)?, o.out))
}

/// All predictions for one target spot. `global_tokens` must hold the
/// slide's global branch output unless that branch is dropped.
pub fn spot_forward_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    ds: &SpotDataset,
    slide: &SlideContext,
    target: usize,
    global_tokens: Option<Var>,
) -> Result<SpotVars> {
    let a = cfg.ablation;
    let spot = if a.drop_spot {
        None
    } else {
        Some(spot_branch_on(tape, cfg, w, &ds.features[target].spot)?)
    };
    let ctx = if a.drop_ctx {
        None
    } else {
        let window = slide.window(target, cfg.d_context)?;
        Some(context_branch_on(tape, cfg, w, ds, &window)?)
    };
    let global = match (a.drop_global, global_tokens) {
        (true, _) => None,
        (false, Some(g)) => {
            let row = tape.gather_rows(g, &[target])?;
            Some(head_on(tape, &w.head_global, row)?)
        }
        (false, None) => return Err(Error::arg("global tokens required when the global branch is active")),
    };
    let g = if a.drop_global { None } else { global_tokens };
    let (fused, fused_tokens) = fuse_on(tape, cfg, w, spot.as_ref(), ctx.as_ref(), g, target)?;
    Ok(SpotVars {
        fused,
        fused_tokens,
        spot,
        ctx,
        global,
    })
}

/// Plain-tensor branch output.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub tokens: Tensor,
    pub mask: Option<Vec<bool>>,
    pub pooled: Tensor,
    pub prediction: Tensor,
}

impl BranchOutput {
    fn read(tape: &Tape, b: &BranchVars) -> Self {
        Self {
            tokens: tape.value(b.tokens).clone(),
            mask: b.mask.clone(),
            pooled: tape.value(b.pooled).clone(),
            prediction: tape.value(b.prediction).clone(),
        }
    }
}

/// Global branch output over a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOutput {
    /// One position-encoded token per spot.
    pub tokens: Tensor,
    /// Per-spot global-branch predictions, `n_spots × n_genes`.
    pub predictions: Tensor,
}

/// Per-spot predictions of all heads, each `n_spots × n_genes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePredictions {
    pub fused: Tensor,
    pub spot: Option<Tensor>,
    pub ctx: Option<Tensor>,
    pub global: Option<Tensor>,
}

/// Attention matrices of the context branch's guiding block, per head.
#[derive(Debug, Clone)]
pub struct ContextAttention {
    pub edge: Vec<Tensor>,
    pub nuclei: Vec<Tensor>,
}

fn stack_rows(rows: Vec<Tensor>) -> Result<Tensor> {
    let n = rows.len();
    let k = rows.first().map_or(0, Tensor::cols);
    let data: Vec<f64> = rows.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(n, k, data)
}

impl ModelParams {
    pub fn spot_branch(&self, bundle: &FeatureBundle) -> Result<BranchOutput> {
        let mut t = Tape::new();
        let w = bind_constants(&mut t, self);
        let b = spot_branch_on(&mut t, &self.config, &w, bundle)?;
        Ok(BranchOutput::read(&t, &b))
    }

    pub fn context_branch(&self, ds: &SpotDataset, window: &ContextWindow) -> Result<(BranchOutput, Option<ContextAttention>)> {
        let mut t = Tape::new();
        let w = bind_constants(&mut t, self);
        let b = context_branch_on(&mut t, &self.config, &w, ds, window)?;
        let attn = b.guide.as_ref().map(|g| ContextAttention {
            edge: g.weights_a.iter().map(|v| t.value(*v).clone()).collect(),
            nuclei: g.weights_b.iter().map(|v| t.value(*v).clone()).collect(),
        });
        Ok((BranchOutput::read(&t, &b), attn))
    }

    pub fn global_branch(&self, pooled_image: &Tensor, grid_positions: &[(usize, usize)]) -> Result<GlobalOutput> {
        let layout = Rc::new(GridLayout::new(grid_positions)?);
        let mut t = Tape::new();
        let w = bind_constants(&mut t, self);
        let g = global_tokens_on(&mut t, &w, pooled_image, layout)?;
        let p = head_on(&mut t, &w.head_global, g)?;
        Ok(GlobalOutput {
            tokens: t.value(g).clone(),
            predictions: t.value(p).clone(),
        })
    }

    /// Fused prediction for `target` from already computed branch outputs.
    pub fn fuse(
        &self,
        spot: Option<&BranchOutput>,
        ctx: Option<&BranchOutput>,
        global: Option<&GlobalOutput>,
        target: usize,
    ) -> Result<Tensor> {
        let mut t = Tape::new();
        let w = bind_constants(&mut t, self);
        let mut lift = |b: &BranchOutput| -> Result<BranchVars> {
            let tokens = t.constant(b.tokens.clone());
            let pooled = t.constant(b.pooled.clone());
            let prediction = t.constant(b.prediction.clone());
            Ok(BranchVars {
                tokens,
                mask: b.mask.clone(),
                pooled,
                prediction,
                guide: None,
            })
        };
        let s = spot.map(&mut lift).transpose()?;
        let c = ctx.map(&mut lift).transpose()?;
        let g = global.map(|g| t.constant(g.tokens.clone()));
        let (p, _) = fuse_on(&mut t, &self.config, &w, s.as_ref(), c.as_ref(), g, target)?;
        Ok(t.value(p).clone())
    }

    /// Predictions of every head for every spot. Spots are processed in
    /// parallel; results do not depend on the thread count.
    pub fn forward_slide(&self, ds: &SpotDataset) -> Result<SlidePredictions> {
        self.validate()?;
        check_dataset(&self.config, ds)?;
        let slide = SlideContext::new(ds)?;
        let global = if self.config.ablation.drop_global {
            None
        } else {
            Some(self.global_branch(&slide.pooled_image, &slide.positions)?)
        };
        let per_spot: Vec<[Option<Tensor>; 4]> = (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let mut t = Tape::new();
                let w = bind_constants(&mut t, self);
                let g = global.as_ref().map(|g| t.constant(g.tokens.clone()));
                let o = spot_forward_on(&mut t, &self.config, &w, ds, &slide, i, g)?;
                let read = |v: Var| t.value(v).clone();
                Ok([
                    Some(read(o.fused)),
                    o.spot.as_ref().map(|b| read(b.prediction)),
                    o.ctx.as_ref().map(|b| read(b.prediction)),
                    o.global.map(read),
                ])
            })
            .collect::<Result<_>>()?;
        let column = |k: usize| -> Result<Option<Tensor>> {
            per_spot
                .iter()
                .map(|p| p[k].clone())
                .collect::<Option<Vec<_>>>()
                .map(stack_rows)
                .transpose()
        };
        Ok(SlidePredictions {
            fused: column(0)?.expect("fused prediction always present"),
            spot: column(1)?,
            ctx: column(2)?,
            global: column(3)?,
        })
    }
}

/// Checks that a dataset's feature widths match the model's projections.
pub fn check_dataset(cfg: &ModelConfig, ds: &SpotDataset) -> Result<()> {
    ds.validate()?;
    if ds.stream_dims() != cfg.stream_dims {
        return Err(Error::Config(format!(
            "dataset stream widths {:?} do not match model {:?}",
            ds.stream_dims(),
            cfg.stream_dims
        )));
    }
    Ok(())
}
