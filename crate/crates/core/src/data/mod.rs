//! Spots, expression matrices and slide-level datasets.

mod manifest;
mod preprocess;
mod synth;
mod tsv;
mod window;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{FeatureProvider, SpotFeatures, StreamDims};
use crate::numerics::Tensor;

pub use manifest::{load_dataset, load_dataset_with, write_dataset, DatasetManifest, ProviderKind, ToySource};
pub use preprocess::{log1p_normalize, select_top_k_genes, GeneSelection};
pub use synth::{synth_dataset, synth_dataset_with, SynthConfig, SynthTruth};
pub use tsv::{load_expression_matrix, load_spot_table, write_expression_matrix, write_spot_table};
pub use window::{context_window, ContextWindow, GridIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    pub array_row: usize,
    pub array_col: usize,
    pub px_x: f64,
    pub px_y: f64,
}

impl SpotRecord {
    pub fn new(spot_id: impl Into<String>, array_row: usize, array_col: usize, px_x: f64, px_y: f64) -> Self {
        Self {
            spot_id: spot_id.into(),
            array_row,
            array_col,
            px_x,
            px_y,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.array_row, self.array_col)
    }
}

/// Raw counts, one row per spot and one column per gene.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub genes: Vec<String>,
    pub values: Tensor,
}

impl ExpressionMatrix {
    pub fn new(genes: Vec<String>, values: Tensor) -> Result<Self> {
        if values.cols() != genes.len() || values.shape().len() != 2 {
            return Err(Error::dim("expression", values.shape(), &[genes.len()]));
        }
        if let Some(v) = values.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::arg(format!("expression counts must be finite and ≥ 0, got {v}")));
        }
        Ok(Self { genes, values })
    }

    pub fn n_spots(&self) -> usize {
        self.values.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }
}

/// One slide: spots, their expression and their feature bundles.
#[derive(Debug, Clone)]
pub struct SpotDataset {
    pub slide_id: String,
    pub spots: Vec<SpotRecord>,
    pub expr: ExpressionMatrix,
    pub features: Vec<SpotFeatures>,
}

impl SpotDataset {
    pub fn new(
        slide_id: impl Into<String>,
        spots: Vec<SpotRecord>,
        expr: ExpressionMatrix,
        features: Vec<SpotFeatures>,
    ) -> Result<Self> {
        let ds = Self {
            slide_id: slide_id.into(),
            spots,
            expr,
            features,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset by running `provider` over every spot.
    pub fn from_provider(
        slide_id: impl Into<String>,
        spots: Vec<SpotRecord>,
        expr: ExpressionMatrix,
        provider: &dyn FeatureProvider,
    ) -> Result<Self> {
        let features = spots
            .par_iter()
            .map(|s| provider.extract_all(s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(slide_id, spots, expr, features)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.spots.len();
        if n == 0 {
            return Err(Error::arg("dataset has no spots"));
        }
        if self.expr.n_spots() != n || self.features.len() != n {
            return Err(Error::dim(
                "dataset",
                &[n],
                &[self.expr.n_spots(), self.features.len()],
            ));
        }
        GridIndex::new(&self.spots)?;
        let dims = self.stream_dims();
        let tokens = self.features[0].spot.tokens();
        for (f, s) in self.features.iter().zip(&self.spots) {
            for b in [&f.spot, &f.ctx] {
                b.validate()?;
                if b.dims() != dims || b.tokens() != tokens {
                    return Err(Error::arg(format!(
                        "spot {} has features {:?}×{} but slide uses {:?}×{}",
                        s.spot_id,
                        b.dims(),
                        b.tokens(),
                        dims,
                        tokens
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.spots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spots.is_empty()
    }

    pub fn stream_dims(&self) -> StreamDims {
        self.features[0].spot.dims()
    }

    pub fn tokens_per_stream(&self) -> usize {
        self.features[0].spot.tokens()
    }

    pub fn grid_positions(&self) -> Vec<(usize, usize)> {
        self.spots.iter().map(SpotRecord::grid).collect()
    }

    pub fn spot_index(&self) -> HashMap<&str, usize> {
        self.spots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.spot_id.as_str(), i))
            .collect()
    }
}
