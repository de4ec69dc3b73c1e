use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_expression_matrix, load_spot_table, write_expression_matrix, write_spot_table, SpotDataset};
use crate::error::{Error, Result};
use crate::features::{write_feature_file, FeatureProvider, PrecomputedProvider, Stream, StreamDims, ToyExtractor, View};

/// Dataset manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub slide_id: String,
    pub spots: PathBuf,
    pub expression: PathBuf,
    pub features: PathBuf,
    /// Optional grouping key for patient-level folds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient: Option<String>,
    /// Parameters that regenerate the features with the toy extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySource {
    pub seed: u64,
    pub grid_tokens: usize,
    pub dims: StreamDims,
}

/// Where feature tokens come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Recompute with the toy extractor from the manifest's `toy` block.
    Toy,
    /// Read BGFT files from the manifest's feature directory.
    #[default]
    Precomputed,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "precomputed" => Ok(Self::Precomputed),
            _ => Err(Error::arg(format!("unknown provider `{s}` (toy | precomputed)"))),
        }
    }
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// Loads spots, expression and precomputed features named by a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<(SpotDataset, DatasetManifest)> {
    load_dataset_with(manifest_path, ProviderKind::Precomputed)
}

pub fn load_dataset_with(manifest_path: &Path, provider: ProviderKind) -> Result<(SpotDataset, DatasetManifest)> {
    let m = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let spots = load_spot_table(&DatasetManifest::resolve(base, &m.spots))?;
    let expr = load_expression_matrix(&DatasetManifest::resolve(base, &m.expression), &spots)?;
    let first = spots.first().ok_or_else(|| Error::arg("spot table is empty"))?;
    let provider: Box<dyn FeatureProvider> = match provider {
        ProviderKind::Precomputed => Box::new(PrecomputedProvider::open(DatasetManifest::resolve(base, &m.features), first)?),
        ProviderKind::Toy => {
            let t = m.toy.ok_or_else(|| {
                Error::Config(format!("{}: toy provider needs a `toy` block", manifest_path.display()))
            })?;
            Box::new(ToyExtractor::new(t.seed, t.grid_tokens, t.dims)?)
        }
    };
    let ds = SpotDataset::from_provider(m.slide_id.clone(), spots, expr, provider.as_ref())?;
    Ok((ds, m))
}

/// Writes `spots.tsv`, `expression.tsv`, `features/*.bgft` and
/// `manifest.json` under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, ds: &SpotDataset, toy: Option<ToySource>) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    write_spot_table(&dir.join("spots.tsv"), &ds.spots)?;
    write_expression_matrix(&dir.join("expression.tsv"), &ds.spots, &ds.expr)?;
    for (spot, f) in ds.spots.iter().zip(&ds.features) {
        for view in View::ALL {
            for s in Stream::ALL {
                let path = PrecomputedProvider::path_for(&feat_dir, &spot.spot_id, s, view);
                write_feature_file(&path, f.view(view).stream(s))?;
            }
        }
    }
    let m = DatasetManifest {
        slide_id: ds.slide_id.clone(),
        spots: "spots.tsv".into(),
        expression: "expression.tsv".into(),
        features: "features".into(),
        patient: None,
        toy,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
