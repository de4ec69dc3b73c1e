//! Learned weights, organised as a tree generic over the leaf type so the
//! same layout serves plain tensors, tape handles and gradient buffers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{Stream, View};
use crate::model::config::{GuideMode, ModelConfig};
use crate::numerics::grid::TAPS;
use crate::numerics::Tensor;
use crate::rng;

/// Query/key/value projections of one attention head. The `_a` and `_b`
/// key/value pairs serve the two guide streams.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub w_q: T,
    pub w_k_a: T,
    pub w_v_a: T,
    pub w_k_b: T,
    pub w_v_b: T,
}

/// One guiding block: attention heads, LayerNorm affine, and (for the
/// concatenation ablation) the projection of the stacked streams.
#[derive(Debug, Clone, PartialEq)]
pub struct McaWeights<T> {
    pub heads: Vec<HeadWeights<T>>,
    pub gamma: T,
    pub beta: T,
    pub concat: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T> {
    pub weight: T,
    pub bias: T,
}

/// All weights of the network.
///
/// Fixed serialisation order (see [`ModelWeights::for_each`]):
/// 1. stream projections `proj.<stream>_<view>`, spot view first, streams
///    image, edge, nuclei;
/// 2. guiding blocks `spot`, `ctx`, `fusion`, each as heads in order
///    (`w_q, w_k_a, w_v_a, w_k_b, w_v_b`), then `gamma`, `beta`, then
///    `concat` when present;
/// 3. `apeg.kernel` (`9 × d_model`, tap-major);
/// 4. prediction heads `fused`, `spot`, `ctx`, `global`, each `weight`
///    then `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    /// Indexed `[view][stream]`.
    pub proj: [[T; 3]; 2],
    pub spot: McaWeights<T>,
    pub ctx: McaWeights<T>,
    pub fusion: McaWeights<T>,
    pub apeg: T,
    pub head_fused: LinearHead<T>,
    pub head_spot: LinearHead<T>,
    pub head_ctx: LinearHead<T>,
    pub head_global: LinearHead<T>,
}

fn view_index(v: View) -> usize {
    match v {
        View::Spot => 0,
        View::Context => 1,
    }
}

fn stream_index(s: Stream) -> usize {
    match s {
        Stream::Image => 0,
        Stream::Edge => 1,
        Stream::Nuclei => 2,
    }
}

impl<T> McaWeights<T> {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (h, hw) in self.heads.iter().enumerate() {
            f(format!("{prefix}.head{h}.w_q"), &hw.w_q);
            f(format!("{prefix}.head{h}.w_k_a"), &hw.w_k_a);
            f(format!("{prefix}.head{h}.w_v_a"), &hw.w_v_a);
            f(format!("{prefix}.head{h}.w_k_b"), &hw.w_k_b);
            f(format!("{prefix}.head{h}.w_v_b"), &hw.w_v_b);
        }
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
        if let Some(c) = &self.concat {
            f(format!("{prefix}.concat"), c);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (h, hw) in self.heads.iter_mut().enumerate() {
            f(format!("{prefix}.head{h}.w_q"), &mut hw.w_q);
            f(format!("{prefix}.head{h}.w_k_a"), &mut hw.w_k_a);
            f(format!("{prefix}.head{h}.w_v_a"), &mut hw.w_v_a);
            f(format!("{prefix}.head{h}.w_k_b"), &mut hw.w_k_b);
            f(format!("{prefix}.head{h}.w_v_b"), &mut hw.w_v_b);
        }
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
        if let Some(c) = &mut self.concat {
            f(format!("{prefix}.concat"), c);
        }
    }

    /// Structure-preserving map in serialisation order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> McaWeights<U> {
        McaWeights {
            heads: self
                .heads
                .iter()
                .map(|h| HeadWeights {
                    w_q: f(&h.w_q),
                    w_k_a: f(&h.w_k_a),
                    w_v_a: f(&h.w_v_a),
                    w_k_b: f(&h.w_k_b),
                    w_v_b: f(&h.w_v_b),
                })
                .collect(),
            gamma: f(&self.gamma),
            beta: f(&self.beta),
            concat: self.concat.as_ref().map(|c| f(c)),
        }
    }
}

impl<T> LinearHead<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearHead<U> {
        LinearHead {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> ModelWeights<T> {
    pub fn proj(&self, view: View, stream: Stream) -> &T {
        &self.proj[view_index(view)][stream_index(stream)]
    }

    /// Visits every leaf with its dotted name in serialisation order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        for v in View::ALL {
            for s in Stream::ALL {
                f(
                    format!("proj.{}_{}", s.tag(), v.tag()),
                    &self.proj[view_index(v)][stream_index(s)],
                );
            }
        }
        self.spot.for_each("spot", &mut f);
        self.ctx.for_each("ctx", &mut f);
        self.fusion.for_each("fusion", &mut f);
        f("apeg.kernel".into(), &self.apeg);
        for (name, h) in [
            ("fused", &self.head_fused),
            ("spot", &self.head_spot),
            ("ctx", &self.head_ctx),
            ("global", &self.head_global),
        ] {
            f(format!("head.{name}.weight"), &h.weight);
            f(format!("head.{name}.bias"), &h.bias);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut T)) {
        for v in View::ALL {
            for s in Stream::ALL {
                f(
                    format!("proj.{}_{}", s.tag(), v.tag()),
                    &mut self.proj[view_index(v)][stream_index(s)],
                );
            }
        }
        self.spot.for_each_mut("spot", &mut f);
        self.ctx.for_each_mut("ctx", &mut f);
        self.fusion.for_each_mut("fusion", &mut f);
        f("apeg.kernel".into(), &mut self.apeg);
        for (name, h) in [
            ("fused", &mut self.head_fused),
            ("spot", &mut self.head_spot),
            ("ctx", &mut self.head_ctx),
            ("global", &mut self.head_global),
        ] {
            f(format!("head.{name}.weight"), &mut h.weight);
            f(format!("head.{name}.bias"), &mut h.bias);
        }
    }

    /// Structure-preserving map; `f` is called in serialisation order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelWeights<U> {
        let proj = [
            [f(&self.proj[0][0]), f(&self.proj[0][1]), f(&self.proj[0][2])],
            [f(&self.proj[1][0]), f(&self.proj[1][1]), f(&self.proj[1][2])],
        ];
        let spot = self.spot.map(&mut f);
        let ctx = self.ctx.map(&mut f);
        let fusion = self.fusion.map(&mut f);
        let apeg = f(&self.apeg);
        ModelWeights {
            proj,
            spot,
            ctx,
            fusion,
            apeg,
            head_fused: self.head_fused.map(&mut f),
            head_spot: self.head_spot.map(&mut f),
            head_ctx: self.head_ctx.map(&mut f),
            head_global: self.head_global.map(&mut f),
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }
}

/// Expected shape of every leaf for a configuration, in the weight layout.
pub fn layout(cfg: &ModelConfig) -> ModelWeights<Vec<usize>> {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let k = cfg.n_genes;
    let dims = cfg.stream_dims;
    let block = |with_concat: bool| McaWeights {
        heads: (0..cfg.n_heads)
            .map(|_| HeadWeights {
                w_q: vec![d, dh],
                w_k_a: vec![d, dh],
                w_v_a: vec![d, dh],
                w_k_b: vec![d, dh],
                w_v_b: vec![d, dh],
            })
            .collect(),
        gamma: vec![d],
        beta: vec![d],
        concat: with_concat.then(|| vec![3 * d, d]),
    };
    let concat = cfg.guide_mode == GuideMode::Concat;
    let head = || LinearHead {
        weight: vec![d, k],
        bias: vec![k],
    };
    let pv = || [vec![dims.image, d], vec![dims.edge, d], vec![dims.nuclei, d]];
    ModelWeights {
        proj: [pv(), pv()],
        spot: block(concat),
        ctx: block(concat),
        fusion: block(false),
        apeg: vec![TAPS, d],
        head_fused: head(),
        head_spot: head(),
        head_ctx: head(),
        head_global: head(),
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: ModelWeights<Tensor>,
}

impl ModelParams {
    /// Seeded initialisation: matrices and head biases uniform in
    /// `±1/√fan_in`, LayerNorm `γ = 1`, `β = 0`, positional kernel zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = layout(&config);
        let d = config.d_model;
        let mut names = Vec::new();
        shapes.for_each(|name, _| names.push(name));
        let mut idx = 0;
        let weights = shapes.map(|shape| {
            let name = &names[idx];
            let mut r = rng::stream(seed, "init", &[idx as u64]);
            idx += 1;
            if name.ends_with(".gamma") {
                return Tensor::filled(shape, 1.0);
            }
            if name.ends_with(".beta") || name == "apeg.kernel" {
                return Tensor::zeros(shape);
            }
            let fan_in = if shape.len() == 2 { shape[0] } else { d };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
            Tensor::new(shape.clone(), data).unwrap()
        });
        Ok(Self { config, weights })
    }

    /// Checks every leaf against the shape the configuration implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = layout(&self.config);
        let mut want = Vec::new();
        expected.for_each(|n, s| want.push((n, s.clone())));
        let mut got = Vec::new();
        self.weights.for_each(|n, t| got.push((n, t.shape().to_vec(), t.is_finite())));
        if want.len() != got.len() {
            return Err(Error::Config(format!(
                "expected {} weight tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, ws), (gn, gs, finite)) in want.iter().zip(&got) {
            if wn != gn || ws != gs {
                return Err(Error::Config(format!("weight {gn} has shape {gs:?}, expected {wn} {ws:?}")));
            }
            if !finite {
                return Err(Error::NonFinite {
                    what: "weight",
                    block: gn.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.weights.for_each(|n, _| v.push(n));
        v
    }

    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.weights.for_each(|_, t| n += t.len());
        n
    }

    /// All weights concatenated in serialisation order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        self.weights.for_each(|_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::dim("assign_flat", &[self.n_scalars()], &[flat.len()]));
        }
        let mut off = 0;
        self.weights.for_each_mut(|_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Rounds every weight to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        self.weights.for_each_mut(|_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        });
    }
}
