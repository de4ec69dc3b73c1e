//! Synthetic slides with a known gene program, for desk-scale end-to-end runs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{ExpressionMatrix, SpotDataset, SpotRecord};
use crate::error::{Error, Result};
use crate::features::toy::{latent_at, LATENT_DIM, PROGRAM_SEED};
use crate::features::{StreamDims, ToyExtractor};
use crate::numerics::Tensor;
use crate::rng;

/// Pixel side of one spot patch.
pub const PATCH_PX: f64 = 224.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub n_genes: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub grid_tokens: usize,
    pub dims: StreamDims,
}

impl SynthConfig {
    pub fn new(rows: usize, cols: usize, n_genes: usize, noise_sd: f64, seed: u64) -> Self {
        Self {
            rows,
            cols,
            n_genes,
            noise_sd,
            seed,
            grid_tokens: 4,
            dims: StreamDims::default(),
        }
    }
}

/// Ground truth behind a synthetic slide.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Gene program, `n_genes × (1 + LATENT_DIM)`; column 0 is the offset.
    pub weights: Tensor,
    /// Per-spot inputs of the program, `n_spots × (1 + LATENT_DIM)` with a
    /// leading constant 1.
    pub features: Tensor,
}

impl SynthTruth {
    /// Noise-free log-expression `features · weightsᵀ`.
    pub fn log_expression(&self) -> Tensor {
        crate::numerics::tensor::matmul_nt(&self.features, &self.weights).unwrap()
    }
}

/// Gene program shared by every synthetic slide with `n_genes` genes.
/// Offsets are chosen so that the log-expression stays ≥ 1 for any latent
/// state in `[0, 1]`.
fn gene_program(n_genes: usize) -> Tensor {
    let mut r = rng::stream(PROGRAM_SEED, "gene-program", &[n_genes as u64]);
    let w = LATENT_DIM + 1;
    let mut data = vec![0.0; n_genes * w];
    for g in 0..n_genes {
        let row = &mut data[g * w..(g + 1) * w];
        for v in row[1..].iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let floor: f64 = row[1..].iter().map(|v: &f64| (-v).max(0.0)).sum();
        row[0] = 1.0 + floor + r.gen_range(0.0..1.5);
    }
    Tensor::matrix(n_genes, w, data).unwrap()
}

pub fn synth_dataset(
    rows: usize,
    cols: usize,
    n_genes: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(SpotDataset, SynthTruth)> {
    synth_dataset_with(&SynthConfig::new(rows, cols, n_genes, noise_sd, seed))
}

/// Builds a `rows × cols` slide. Raw counts are
/// `max(0, round(exp(w·f + noise) − 1))` so that `log1p` of the counts is
/// close to the linear program.
pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<(SpotDataset, SynthTruth)> {
    if cfg.rows == 0 || cfg.cols == 0 || cfg.n_genes == 0 {
        return Err(Error::arg("rows, cols and n_genes must be positive"));
    }
    if !(cfg.noise_sd >= 0.0) || !cfg.noise_sd.is_finite() {
        return Err(Error::arg("noise_sd must be finite and ≥ 0"));
    }
    let n = cfg.rows * cfg.cols;
    let w = LATENT_DIM + 1;
    let weights = gene_program(cfg.n_genes);

    let mut spots = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * w);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            spots.push(SpotRecord::new(
                format!("s{r}_{c}"),
                r,
                c,
                (c as f64 + 0.5) * PATCH_PX,
                (r as f64 + 0.5) * PATCH_PX,
            ));
            features.push(1.0);
            features.extend(latent_at(cfg.seed, r, c, 0.0, 0.0));
        }
    }
    let truth = SynthTruth {
        weights,
        features: Tensor::matrix(n, w, features)?,
    };

    let log_expr = truth.log_expression();
    let mut noise = rng::stream(cfg.seed, "expr-noise", &[]);
    let counts: Vec<f64> = log_expr
        .data()
        .iter()
        .map(|&t| {
            let e: f64 = noise.sample(StandardNormal);
            ((t + cfg.noise_sd * e).exp() - 1.0).round().max(0.0)
        })
        .collect();
    let genes = (0..cfg.n_genes).map(|g| format!("GENE{g:03}")).collect();
    let expr = ExpressionMatrix::new(genes, Tensor::matrix(n, cfg.n_genes, counts)?)?;

    let provider = ToyExtractor::new(cfg.seed, cfg.grid_tokens, cfg.dims)?;
    let ds = SpotDataset::from_provider(format!("synth-{}", cfg.seed), spots, expr, &provider)?;
    Ok((ds, truth))
}
