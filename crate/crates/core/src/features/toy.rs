use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::SpotRecord;
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureProvider, Stream, StreamDims, View};
use crate::numerics::Tensor;
use crate::rng;

pub const SUPPORTED_GRID_TOKENS: [usize; 5] = [1, 4, 9, 16, 49];

/// Width of the per-location latent tissue state.
pub const LATENT_DIM: usize = 6;

/// Seed of everything shared across slides: the stream mixing maps here and
/// the gene program in the synthetic generator.
pub(crate) const PROGRAM_SEED: u64 = 0x0b6d_7a1e_5eed;

const TOKEN_NOISE: f64 = 0.05;

/// Latent state at fractional grid location `(row + dy, col + dx)` of the
/// slide generated from `seed`: a smooth field plus a per-cell component.
/// Every coordinate lies in `[0, 1]`.
pub(crate) fn latent_at(seed: u64, row: usize, col: usize, dy: f64, dx: f64) -> [f64; LATENT_DIM] {
    let mut field = rng::stream(seed, "latent-field", &[]);
    let mut cell = rng::stream(seed, "latent-cell", &[row as u64, col as u64]);
    let (y, x) = (row as f64 + dy, col as f64 + dx);
    let mut z = [0.0; LATENT_DIM];
    for v in z.iter_mut() {
        let fy = field.gen_range(0.3..1.2) * if field.gen::<bool>() { 1.0 } else { -1.0 };
        let fx = field.gen_range(0.3..1.2) * if field.gen::<bool>() { 1.0 } else { -1.0 };
        let phase = field.gen_range(0.0..std::f64::consts::TAU);
        let u: f64 = cell.gen_range(-1.0..1.0);
        *v = 0.5 + 0.35 * (fy * y + fx * x + phase).sin() + 0.15 * u;
    }
    z
}

fn mixing_matrix(stream: Stream, view: View, width: usize) -> Vec<f64> {
    let tag = format!("mix-{}-{}", stream.tag(), view.tag());
    let mut r = rng::stream(PROGRAM_SEED, &tag, &[width as u64]);
    let scale = 1.0 / ((LATENT_DIM + 1) as f64).sqrt();
    (0..width * (LATENT_DIM + 1))
        .map(|_| r.gen_range(-1.0..1.0) * 2.0 * scale)
        .collect()
}

fn stream_input(stream: Stream, z: &[f64; LATENT_DIM]) -> [f64; LATENT_DIM + 1] {
    let mut u = [1.0; LATENT_DIM + 1];
    for (o, &v) in u.iter_mut().zip(z) {
        *o = match stream {
            Stream::Image => v,
            Stream::Edge => (std::f64::consts::PI * v).sin(),
            Stream::Nuclei => v * v,
        };
    }
    u
}

/// Deterministic stand-in for the pretrained extractors.
///
/// Each spot patch is split into a `g × g` sub-grid (`grid_tokens = g²`);
/// every sub-patch samples the slide's latent field at its location and maps
/// it through a fixed per-stream, per-view function plus keyed noise.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    seed: u64,
    side: usize,
    dims: StreamDims,
    mixing: Vec<(Stream, View, Vec<f64>)>,
}

impl ToyExtractor {
    pub fn new(seed: u64, grid_tokens: usize, dims: StreamDims) -> Result<Self> {
        if !SUPPORTED_GRID_TOKENS.contains(&grid_tokens) {
            return Err(Error::arg(format!(
                "grid_tokens must be one of {SUPPORTED_GRID_TOKENS:?}, got {grid_tokens}"
            )));
        }
        if dims.image == 0 || dims.edge == 0 || dims.nuclei == 0 {
            return Err(Error::arg("stream widths must be positive"));
        }
        let side = (grid_tokens as f64).sqrt().round() as usize;
        let mut mixing = Vec::new();
        for view in View::ALL {
            for s in Stream::ALL {
                mixing.push((s, view, mixing_matrix(s, view, dims.get(s))));
            }
        }
        Ok(Self {
            seed,
            side,
            dims,
            mixing,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid_tokens(&self) -> usize {
        self.side * self.side
    }

    fn stream_tokens(&self, spot: &SpotRecord, stream: Stream, view: View) -> Tensor {
        let width = self.dims.get(stream);
        let m = &self
            .mixing
            .iter()
            .find(|(s, v, _)| *s == stream && *v == view)
            .expect("all combinations built")
            .2;
        let g = self.side;
        let mut noise = rng::stream(
            self.seed,
            &format!("token-noise-{}-{}", stream.tag(), view.tag()),
            &[spot.array_row as u64, spot.array_col as u64],
        );
        let mut data = Vec::with_capacity(g * g * width);
        for a in 0..g {
            for b in 0..g {
                let dy = (a as f64 + 0.5) / g as f64 - 0.5;
                let dx = (b as f64 + 0.5) / g as f64 - 0.5;
                let z = latent_at(self.seed, spot.array_row, spot.array_col, dy, dx);
                let u = stream_input(stream, &z);
                for c in 0..width {
                    let row = &m[c * (LATENT_DIM + 1)..(c + 1) * (LATENT_DIM + 1)];
                    let v: f64 = row.iter().zip(&u).map(|(p, q)| p * q).sum();
                    let e: f64 = noise.sample(StandardNormal);
                    data.push(v + TOKEN_NOISE * e);
                }
            }
        }
        Tensor::matrix(g * g, width, data).unwrap()
    }
}

impl FeatureProvider for ToyExtractor {
    fn extract(&self, spot: &SpotRecord, view: View) -> Result<FeatureBundle> {
        FeatureBundle::new(
            self.stream_tokens(spot, Stream::Image, view),
            self.stream_tokens(spot, Stream::Edge, view),
            self.stream_tokens(spot, Stream::Nuclei, view),
        )
    }

    fn dims(&self) -> StreamDims {
        self.dims
    }
}

/// Spot-view bundle of the toy extractor with default stream widths.
pub fn toy_extract(spot: &SpotRecord, dataset_seed: u64, grid_tokens: usize) -> Result<FeatureBundle> {
    ToyExtractor::new(dataset_seed, grid_tokens, StreamDims::default())?.extract(spot, View::Spot)
}
