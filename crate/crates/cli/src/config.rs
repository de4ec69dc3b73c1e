//! Run configuration: a JSON document whose fields command-line flags
//! override.

use std::path::{Path, PathBuf};

use bg_triplex::data::ProviderKind;
use bg_triplex::evaluation::{PcchSelector, TOP_GENES};
use bg_triplex::model::{Ablation, GuideMode};
use bg_triplex::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// How `cv` assigns slides to folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FoldBy {
    /// One fold per slide.
    #[default]
    Slide,
    /// One fold per manifest `patient` label.
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub d_model: usize,
    pub n_heads: usize,
    /// Expected tokens per stream; checked against the data when set.
    pub tokens_per_stream: Option<usize>,
    pub provider: ProviderKind,
    pub datasets: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub guide_mode: GuideMode,
    #[serde(flatten)]
    pub ablation: Ablation,
    pub pcch_selector: PcchSelector,
    pub top_genes: usize,
    pub folds: FoldBy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            d_model: 64,
            n_heads: 4,
            tokens_per_stream: None,
            provider: ProviderKind::Precomputed,
            datasets: Vec::new(),
            output: None,
            guide_mode: GuideMode::Mca,
            ablation: Ablation::default(),
            pcch_selector: PcchSelector::Predictive,
            top_genes: TOP_GENES,
            folds: FoldBy::Slide,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative dataset and output paths resolve against
    /// its directory.
    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.datasets.iter_mut().for_each(fix);
        if let Some(o) = cfg.output.as_mut() {
            fix(o);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!(
                "n_heads = {} must be positive and divide d_model = {}",
                self.n_heads, self.d_model
            ));
        }
        let a = self.ablation;
        if a.drop_spot && a.drop_ctx && a.drop_global {
            return Err("cannot drop all three branches".into());
        }
        if self.top_genes == 0 {
            return Err("top_genes must be positive".into());
        }
        Ok(())
    }

    /// One-line summary of the effective settings.
    pub fn header(&self) -> String {
        let t = &self.train;
        let a = self.ablation;
        let flags: Vec<&str> = [
            (a.drop_spot, "drop_spot"),
            (a.drop_ctx, "drop_ctx"),
            (a.drop_global, "drop_global"),
            (a.no_edge_spot, "no_edge_spot"),
            (a.no_nuclei_spot, "no_nuclei_spot"),
            (a.no_edge_ctx, "no_edge_ctx"),
            (a.no_nuclei_ctx, "no_nuclei_ctx"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        format!(
            "epochs={} lr={} step_size={} decay={} batch_size={} lambda={} d_context={} k_genes={} seed={} \
             d_model={} n_heads={} guide_mode={} ablation={}",
            t.epochs,
            t.lr,
            t.step_size,
            t.decay,
            t.batch_size,
            t.lambda,
            t.d_context,
            t.k_genes,
            t.seed,
            self.d_model,
            self.n_heads,
            serde_json::to_value(self.guide_mode).unwrap().as_str().unwrap(),
            if flags.is_empty() { "none".to_string() } else { flags.join(",") }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_document_round_trips() {
        let text = r#"{"lr": 0.001, "drop_ctx": true, "guide_mode": "sum", "datasets": ["a/manifest.json"]}"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, text).unwrap();
        let c = RunConfig::read(&p).unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.lambda, 0.3);
        assert!(c.ablation.drop_ctx);
        assert_eq!(c.guide_mode, GuideMode::Sum);
        assert_eq!(c.datasets[0], dir.path().join("a/manifest.json"));
    }

    #[test]
    fn rejects_dropping_everything() {
        let mut c = RunConfig::default();
        c.ablation.drop_spot = true;
        c.ablation.drop_ctx = true;
        c.ablation.drop_global = true;
        assert!(c.validate().is_err());
    }
}
