use std::path::{Path, PathBuf};

use crate::data::SpotRecord;
use crate::error::{Error, Result};
use crate::features::{
    load_feature_file, stream_name, FeatureBundle, FeatureProvider, Stream, StreamDims, View,
};

/// Reads `<prefix>/<spot_id>.<stream>.bgft` files, `stream` being one of
/// `img_spot`, `edge_spot`, `nuc_spot`, `img_ctx`, `edge_ctx`, `nuc_ctx`.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    prefix: PathBuf,
    dims: StreamDims,
}

impl PrecomputedProvider {
    /// Opens a feature directory, taking stream widths from `probe`'s
    /// spot-view files.
    pub fn open(prefix: impl Into<PathBuf>, probe: &SpotRecord) -> Result<Self> {
        let mut p = Self {
            prefix: prefix.into(),
            dims: StreamDims::default(),
        };
        p.dims = p.extract(probe, View::Spot)?.dims();
        Ok(p)
    }

    pub fn path_for(prefix: &Path, spot_id: &str, stream: Stream, view: View) -> PathBuf {
        prefix.join(format!("{spot_id}.{}.bgft", stream_name(stream, view)))
    }
}

impl FeatureProvider for PrecomputedProvider {
    fn extract(&self, spot: &SpotRecord, view: View) -> Result<FeatureBundle> {
        let load = |s: Stream| -> Result<_> {
            let path = Self::path_for(&self.prefix, &spot.spot_id, s, view);
            let t = load_feature_file(&path).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format {
                    offset,
                    msg: format!("{}: {msg}", path.display()),
                },
                other => other,
            })?;
            if t.shape().len() != 2 {
                return Err(Error::arg(format!(
                    "{}: expected tokens×dim matrix, got shape {:?}",
                    path.display(),
                    t.shape()
                )));
            }
            Ok(t)
        };
        FeatureBundle::new(load(Stream::Image)?, load(Stream::Edge)?, load(Stream::Nuclei)?)
    }

    fn dims(&self) -> StreamDims {
        self.dims
    }
}
