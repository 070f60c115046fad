//! Query decoder: an initialization layer `g`, a weight-tied refinement
//! layer `f`, a shared prediction head and refinement-aware perturbation.

mod checkpoint;
mod layer;
mod noise;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use noise::{noise_content, noise_pos, rap_step, NoiseConfig};

use crate::geometry::{decode_to_corners, encode_corners, BBox};
use crate::grad::ImplicitMap;
use crate::losses::Prediction;
use crate::tensor::{LeafKey, ParamId, ParamStore, Result, Tape, Tensor};
use layer::{HeadParams, LayerParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid decoder config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub points_refine: usize,
    pub points_init: usize,
    pub levels: usize,
    pub heads: usize,
    pub mix_channels: usize,
    /// Independent refinement layers. 1 for weight-tied modes, `L` for the
    /// stacked baseline.
    pub refine_layers: usize,
    /// Detach the positional vector entering every refinement step.
    pub detach_position: bool,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_queries: 20,
            num_classes: 4,
            points_refine: 8,
            points_init: 16,
            levels: 2,
            heads: 2,
            mix_channels: 16,
            refine_layers: 1,
            detach_position: true,
            image_size: (32, 32),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.d_model == 0 || self.d_model % 8 != 0 {
            return bad("d_model must be a positive multiple of 8");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads must divide d_model");
        }
        if self.num_queries == 0 || self.num_classes == 0 {
            return bad("num_queries and num_classes must be positive");
        }
        if self.points_refine == 0 || self.points_init == 0 || self.mix_channels == 0 {
            return bad("sampling points and mix channels must be positive");
        }
        if self.levels == 0 || self.refine_layers == 0 {
            return bad("levels and refine_layers must be positive");
        }
        if self.image_size.0 < 2 || self.image_size.1 < 2 {
            return bad("image must be at least 2x2");
        }
        Ok(())
    }
}

/// `N x D` content and `N x 4` positional vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub content: Tensor,
    pub position: Tensor,
}

impl QuerySet {
    pub fn into_latent(self) -> Vec<Tensor> {
        vec![self.content, self.position]
    }

    pub fn from_latent(latent: &[Tensor]) -> Self {
        Self { content: latent[0].clone(), position: latent[1].clone() }
    }

    pub fn detach(&self) -> Self {
        Self { content: self.content.detach(), position: self.position.detach() }
    }

    pub fn len(&self) -> usize {
        self.content.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Condition variable: `H_l x W_l x D` grids, level `l + 1` at half the
/// resolution of level `l` (rounded up).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub image_size: (usize, usize),
}

impl FeaturePyramid {
    pub fn level_size(image_size: (usize, usize), level: usize) -> (usize, usize) {
        let f = 1usize << level;
        (image_size.0.div_ceil(f), image_size.1.div_ceil(f))
    }

    pub fn zeros(image_size: (usize, usize), levels: usize, d: usize) -> Self {
        Self {
            levels: (0..levels)
                .map(|l| {
                    let (h, w) = Self::level_size(image_size, l);
                    Tensor::zeros(vec![h, w, d])
                })
                .collect(),
            image_size,
        }
    }
}

/// Which parameter block a name belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    InitQueries,
    Init,
    Refine,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("queries") => Self::InitQueries,
            Some("init") => Self::Init,
            Some("head") => Self::Head,
            _ => Self::Refine,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    params: ParamStore,
    query_content: ParamId,
    query_position: ParamId,
    init: LayerParams,
    refine: Vec<LayerParams>,
    head: HeadParams,
}

impl Decoder {
    /// Fresh parameters drawn from a ChaCha stream seeded by `seed`.
    /// Creation order is fixed, so a one-layer stack is identical across
    /// modes.
    pub fn new(cfg: DecoderConfig, seed: u64) -> std::result::Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (n, d) = (cfg.num_queries, cfg.d_model);
        let content: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let query_content = params.add("queries.content", Tensor::new(vec![n, d], content).expect("shape"));
        let (h, w) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
        let full = encode_corners(BBox::new(0.0, 0.0, w, h)).expect("positive image").to_array();
        let position = (0..n).flat_map(|_| full).collect();
        let query_position = params.add("queries.position", Tensor::new(vec![n, 4], position).expect("shape"));
        let init = LayerParams::new(&mut params, "init", &cfg, cfg.points_init, &mut rng);
        let refine = (0..cfg.refine_layers)
            .map(|i| LayerParams::new(&mut params, &format!("refine.{i}"), &cfg, cfg.points_refine, &mut rng))
            .collect();
        let head = HeadParams::new(&mut params, &cfg, &mut rng);
        Ok(Self { cfg, params, query_content, query_position, init, refine, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_refine_layers(&self) -> usize {
        self.refine.len()
    }

    /// Parameter ids used by refinement layer `layer`.
    pub fn refine_param_ids(&self, layer: usize) -> Vec<ParamId> {
        let prefix = format!("refine.{layer}.");
        self.params.iter().filter(|(_, name, _)| name.starts_with(&prefix)).map(|(id, _, _)| id).collect()
    }

    /// Zeroes the delta head of every layer so positions never move.
    pub fn zero_position_heads(&mut self) {
        for layer in std::iter::once(&self.init).chain(&self.refine) {
            for id in [layer.delta2.weight, layer.delta2.bias] {
                let shape = self.params.get(id).shape().to_vec();
                self.params.set(id, Tensor::zeros(shape));
            }
        }
    }

    /// Learnable `y_{0-}` bound on `tape`.
    pub fn init_queries(&self, tape: &Tape) -> QuerySet {
        QuerySet {
            content: self.params.bind(tape, self.query_content),
            position: self.params.bind(tape, self.query_position),
        }
    }

    /// `g(x, y_{0-} | eta)`. The input position is not detached so the
    /// learned initial boxes receive gradient.
    pub fn init_layer(&self, tape: &Tape, x: &FeaturePyramid, y: &QuerySet) -> Result<QuerySet> {
        if tape.is_recording() {
            tape.bump("init");
        }
        let (content, position) = self.init.forward(&self.params, &self.cfg, tape, x, &y.content, &y.position)?;
        Ok(QuerySet { content, position })
    }

    /// `f(x, y | theta_layer)`.
    pub fn refine(&self, tape: &Tape, x: &FeaturePyramid, y: &QuerySet, layer: usize) -> Result<QuerySet> {
        if tape.is_recording() {
            tape.bump("refine");
        }
        let p = if self.cfg.detach_position { y.position.detach() } else { y.position.clone() };
        let (content, position) = self.refine[layer].forward(&self.params, &self.cfg, tape, x, &y.content, &p)?;
        Ok(QuerySet { content, position })
    }

    /// Class logits from content, corner boxes decoded from position.
    pub fn predict(&self, tape: &Tape, y: &QuerySet) -> Result<Prediction> {
        Ok(Prediction {
            logits: self.head.logits(&self.params, tape, &y.content)?,
            boxes: decode_to_corners(tape, &y.position)?,
        })
    }

    /// Noise-free inference: `g` then `steps` applications of layer 0.
    pub fn run(&self, x: &FeaturePyramid, steps: usize) -> Result<QuerySet> {
        let tape = Tape::new();
        let _guard = tape.no_grad();
        let mut y = self.init_layer(&tape, x, &self.init_queries(&tape))?;
        for _ in 0..steps {
            y = self.refine(&tape, x, &y, 0)?;
        }
        Ok(y)
    }
}

/// The refinement layer as an implicit map over the latent `[q, p]`.
pub struct RefineMap<'a> {
    pub decoder: &'a Decoder,
    pub features: &'a FeaturePyramid,
    pub layer: usize,
}

impl ImplicitMap for RefineMap<'_> {
    fn apply(&self, tape: &Tape, latent: &[Tensor]) -> Result<Vec<Tensor>> {
        let y = self.decoder.refine(tape, self.features, &QuerySet::from_latent(latent), self.layer)?;
        Ok(y.into_latent())
    }
}

/// The refinement layer as an implicit map over content only, with the
/// position held fixed as a keyed conditioning input.
pub struct ContentMap<'a> {
    pub decoder: &'a Decoder,
    pub features: &'a FeaturePyramid,
    pub position: Tensor,
    pub key: LeafKey,
}

impl ImplicitMap for ContentMap<'_> {
    fn apply(&self, tape: &Tape, latent: &[Tensor]) -> Result<Vec<Tensor>> {
        let position = tape.leaf(self.key, &self.position);
        let y = QuerySet { content: latent[0].clone(), position };
        Ok(vec![self.decoder.refine(tape, self.features, &y, 0)?.content])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decode_pos, PositionalVector};

    fn tiny() -> DecoderConfig {
        DecoderConfig { d_model: 16, num_queries: 4, levels: 1, ..DecoderConfig::default() }
    }

    fn random_pyramid(cfg: &DecoderConfig, seed: u64) -> FeaturePyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = FeaturePyramid::zeros(cfg.image_size, cfg.levels, cfg.d_model);
        for level in &mut x.levels {
            let data = (0..level.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
            *level = Tensor::new(level.shape().to_vec(), data).unwrap();
        }
        x
    }

    #[test]
    fn layers_preserve_shapes() {
        let cfg = DecoderConfig::default();
        let dec = Decoder::new(cfg.clone(), 0).unwrap();
        let x = random_pyramid(&cfg, 1);
        let tape = Tape::new();
        let y0 = dec.init_queries(&tape);
        let y = dec.init_layer(&tape, &x, &y0).unwrap();
        assert_eq!(y.content.shape(), &[20, 64]);
        assert_eq!(y.position.shape(), &[20, 4]);
        let y = dec.refine(&tape, &x, &y, 0).unwrap();
        assert_eq!(y.content.shape(), y0.content.shape());
        assert_eq!(y.position.shape(), y0.position.shape());
        assert_eq!(dec.predict(&tape, &y).unwrap().logits.shape(), &[20, 4]);
    }

    #[test]
    fn fresh_delta_heads_keep_positions() {
        let cfg = tiny();
        let dec = Decoder::new(cfg.clone(), 3).unwrap();
        let x = random_pyramid(&cfg, 4);
        let tape = Tape::new();
        let start = dec.init_queries(&tape);
        let mut y = dec.init_layer(&tape, &x, &start).unwrap();
        for _ in 0..5 {
            y = dec.refine(&tape, &x, &y, 0).unwrap();
            assert_eq!(y.position.data(), start.position.data());
        }
    }

    #[test]
    fn no_grad_records_nothing() {
        let cfg = tiny();
        let dec = Decoder::new(cfg.clone(), 0).unwrap();
        let x = random_pyramid(&cfg, 0);
        let tape = Tape::new();
        let _g = tape.no_grad();
        let y = dec.init_layer(&tape, &x, &dec.init_queries(&tape)).unwrap();
        dec.refine(&tape, &x, &y, 0).unwrap();
        assert_eq!(tape.node_count(), 0);
        assert_eq!(tape.counter("refine"), 0);
    }

    #[test]
    fn head_boxes_are_decoded_positions() {
        let cfg = tiny();
        let dec = Decoder::new(cfg.clone(), 0).unwrap();
        let y = dec.run(&random_pyramid(&cfg, 2), 3).unwrap();
        let pred = dec.predict(&Tape::new(), &y).unwrap();
        for i in 0..y.len() {
            let p = &y.position.data()[i * 4..i * 4 + 4];
            let b = decode_pos(PositionalVector::new(p[0], p[1], p[2], p[3])).to_corners();
            assert_eq!(pred.box_at(i), b);
        }
    }

    #[test]
    fn construction_is_seeded() {
        let a = Decoder::new(tiny(), 9).unwrap();
        let b = Decoder::new(tiny(), 9).unwrap();
        let c = Decoder::new(tiny(), 10).unwrap();
        let same = |x: &Decoder, y: &Decoder| x.params().iter().zip(y.params().iter()).all(|(p, q)| p.2 == q.2);
        assert!(same(&a, &b));
        assert!(!same(&a, &c));
    }

    #[test]
    fn stacked_layers_have_independent_parameters() {
        let cfg = DecoderConfig { refine_layers: 3, ..tiny() };
        let dec = Decoder::new(cfg, 0).unwrap();
        let ids: Vec<_> = (0..3).map(|l| dec.refine_param_ids(l)).collect();
        assert_eq!(ids[0].len(), ids[2].len());
        assert!(ids[0].iter().all(|id| !ids[1].contains(id)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Decoder::new(DecoderConfig { d_model: 12, ..tiny() }, 0).is_err());
        assert!(Decoder::new(DecoderConfig { heads: 3, ..tiny() }, 0).is_err());
        assert!(Decoder::new(DecoderConfig { levels: 0, ..tiny() }, 0).is_err());
    }
}
