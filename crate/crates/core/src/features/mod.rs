//! Per-spot feature tokens and the providers that produce them.
//!
//! A provider stands in for the pretrained image, edge and nuclei
//! extractors. Two are available: a deterministic [`ToyExtractor`] and
//! [`PrecomputedProvider`], which reads BGFT files written by an external
//! pipeline.

pub mod bgft;
mod precomputed;
pub(crate) mod toy;

use serde::{Deserialize, Serialize};

use crate::data::SpotRecord;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub use bgft::{load_feature_file, write_feature_file};
pub use precomputed::PrecomputedProvider;
pub use toy::{toy_extract, ToyExtractor, SUPPORTED_GRID_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Image,
    Edge,
    Nuclei,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Image, Stream::Edge, Stream::Nuclei];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Image => "img",
            Stream::Edge => "edge",
            Stream::Nuclei => "nuc",
        }
    }
}

/// Field of view a bundle was extracted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    /// The target patch itself.
    Spot,
    /// The patch as a member of some other spot's neighbourhood window.
    Context,
}

impl View {
    pub const ALL: [View; 2] = [View::Spot, View::Context];

    pub fn tag(self) -> &'static str {
        match self {
            View::Spot => "spot",
            View::Context => "ctx",
        }
    }
}

/// File-name stream component, e.g. `img_spot`.
pub fn stream_name(stream: Stream, view: View) -> String {
    format!("{}_{}", stream.tag(), view.tag())
}

/// Token widths of the three streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    pub image: usize,
    pub edge: usize,
    pub nuclei: usize,
}

impl StreamDims {
    pub fn get(&self, s: Stream) -> usize {
        match s {
            Stream::Image => self.image,
            Stream::Edge => self.edge,
            Stream::Nuclei => self.nuclei,
        }
    }
}

impl Default for StreamDims {
    fn default() -> Self {
        Self {
            image: 16,
            edge: 8,
            nuclei: 8,
        }
    }
}

/// Image, edge and nuclei token matrices for one field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image: Tensor,
    pub edge: Tensor,
    pub nuclei: Tensor,
    /// Per-token presence flags shared by all three streams.
    pub mask: Option<Vec<bool>>,
}

impl FeatureBundle {
    pub fn new(image: Tensor, edge: Tensor, nuclei: Tensor) -> Result<Self> {
        let b = Self {
            image,
            edge,
            nuclei,
            mask: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn stream(&self, s: Stream) -> &Tensor {
        match s {
            Stream::Image => &self.image,
            Stream::Edge => &self.edge,
            Stream::Nuclei => &self.nuclei,
        }
    }

    pub fn tokens(&self) -> usize {
        self.image.rows()
    }

    pub fn dims(&self) -> StreamDims {
        StreamDims {
            image: self.image.cols(),
            edge: self.edge.cols(),
            nuclei: self.nuclei.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in Stream::ALL {
            let t = self.stream(s);
            if t.shape().len() != 2 {
                return Err(Error::arg(format!(
                    "{} tokens must be a matrix, got {:?}",
                    s.tag(),
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::arg(format!("{} tokens contain non-finite values", s.tag())));
            }
        }
        if self.edge.rows() != self.image.rows() || self.nuclei.rows() != self.image.rows() {
            return Err(Error::dim("bundle", self.image.shape(), self.edge.shape()));
        }
        if let Some(m) = &self.mask {
            if m.len() != self.tokens() {
                return Err(Error::dim("bundle mask", self.image.shape(), &[m.len()]));
            }
        }
        Ok(())
    }

    /// All-zero bundle marked absent, used for window cells with no spot.
    pub fn absent(tokens: usize, dims: StreamDims) -> Self {
        Self {
            image: Tensor::zeros(&[tokens, dims.image]),
            edge: Tensor::zeros(&[tokens, dims.edge]),
            nuclei: Tensor::zeros(&[tokens, dims.nuclei]),
            mask: Some(vec![false; tokens]),
        }
    }
}

/// Spot-view and context-view bundles of one spot.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotFeatures {
    pub spot: FeatureBundle,
    pub ctx: FeatureBundle,
}

impl SpotFeatures {
    pub fn view(&self, v: View) -> &FeatureBundle {
        match v {
            View::Spot => &self.spot,
            View::Context => &self.ctx,
        }
    }
}

/// Source of per-spot feature bundles. Implementations must be pure: the
/// same spot and view always yield a bit-identical bundle.
pub trait FeatureProvider: Sync {
    fn extract(&self, spot: &SpotRecord, view: View) -> Result<FeatureBundle>;

    fn dims(&self) -> StreamDims;

    fn extract_all(&self, spot: &SpotRecord) -> Result<SpotFeatures> {
        Ok(SpotFeatures {
            spot: self.extract(spot, View::Spot)?,
            ctx: self.extract(spot, View::Context)?,
        })
    }
}

/// Bias-free linear map of tokens into the model width.
pub fn feature_transform(tokens: &Tensor, proj: &Tensor) -> Result<Tensor> {
    if tokens.cols() != proj.rows() {
        return Err(Error::dim("feature_transform", tokens.shape(), proj.shape()));
    }
    crate::numerics::matmul(tokens, proj)
}

/// [`feature_transform`] recorded on a tape.
pub fn feature_transform_on(tape: &mut Tape, tokens: Var, proj: Var) -> Result<Var> {
    let (t, p) = (tape.value(tokens), tape.value(proj));
    if t.cols() != p.rows() {
        return Err(Error::dim("feature_transform", t.shape(), p.shape()));
    }
    tape.matmul(tokens, proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero_projection() {
        let x = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0., 7.]).unwrap();
        assert_eq!(feature_transform(&x, &Tensor::identity(3)).unwrap(), x);
        let z = feature_transform(&x, &Tensor::zeros(&[3, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(feature_transform(&x, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn bundle_validation() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(FeatureBundle::new(a.clone(), b, a.clone()).is_err());
        let mut ok = FeatureBundle::new(a.clone(), a.clone(), a).unwrap();
        ok.mask = Some(vec![true]);
        assert!(ok.validate().is_err());
    }

    #[test]
    fn stream_names() {
        assert_eq!(stream_name(Stream::Nuclei, View::Context), "nuc_ctx");
        assert_eq!(stream_name(Stream::Image, View::Spot), "img_spot");
    }
}
