//! Token embedding plus a stack of factorized layers with a CLS token.

use super::attention::AttnStats;
use super::block::{FactorizedCache, FactorizedGroups, FactorizedLayer};
use super::config::ModelConfig;
use super::nn::{add_in_place, join, LayerNorm, Linear, LnCache, Param, Params, Scalar};
use super::tokens::{PosTable, TokenInput, TOKEN_LEN};
use crate::error::Result;
use crate::rng::Stream;

/// Encoded tokens in canonical coordinate order with the CLS row last.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F> {
    pub coords: Vec<[usize; 3]>,
    /// `(coords.len() + 1) x dim`; the last row is CLS.
    pub rows: Vec<F>,
    pub dim: usize,
}

impl<F: Scalar> TokenGrid<F> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[F] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cls(&self) -> &[F] {
        self.feature(self.coords.len())
    }

    /// Row index of the token at `coord`, if present.
    pub fn find(&self, coord: [usize; 3]) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub embed: Linear<F>,
    pub cls: Param<F>,
    pub layers: Vec<FactorizedLayer<F>>,
    pub norm: LayerNorm<F>,
    pos: PosTable<F>,
    dim: usize,
    axial_window: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    raw: Vec<F>,
    groups: FactorizedGroups,
    layers: Vec<FactorizedCache<F>>,
    norm: LnCache<F>,
    rows: usize,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let embed = Linear::new(TOKEN_LEN, d, rng);
        let cls = Param::normal(&[d], 0.02, rng, false);
        let layers = (0..cfg.depth)
            .map(|_| FactorizedLayer::new(d, cfg.heads_spatial, cfg.heads_axial, cfg.ffn_ratio, rng))
            .collect();
        Ok(Self {
            embed,
            cls,
            layers,
            norm: LayerNorm::new(d),
            pos: PosTable::new(d)?,
            dim: d,
            axial_window: cfg.axial_window,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pos(&self) -> &PosTable<F> {
        &self.pos
    }

    /// Encodes the given tokens. Input order does not matter: tokens are
    /// sorted by coordinate first, so outputs depend only on the coordinate
    /// set and the token contents.
    pub fn forward(&self, input: &TokenInput<F>, stats: &mut AttnStats) -> (TokenGrid<F>, EncoderCache<F>) {
        let (input, _) = input.canonical();
        let n = input.len();
        let rows = n + 1;
        let d = self.dim;
        let mut x = self.embed.forward(&input.raw, n);
        for (i, &c) in input.coords.iter().enumerate() {
            add_in_place(&mut x[i * d..(i + 1) * d], self.pos.row(c));
        }
        x.extend_from_slice(&self.cls.value);
        let groups = FactorizedGroups::new(&input.coords, self.axial_window);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&x, rows, &groups, stats);
            caches.push(c);
            x = y;
        }
        let (y, norm) = self.norm.forward(&x, rows);
        (
            TokenGrid {
                coords: input.coords,
                rows: y,
                dim: d,
            },
            EncoderCache {
                raw: input.raw,
                groups,
                layers: caches,
                norm,
                rows,
            },
        )
    }

    /// Accumulates parameter gradients given `dL/d(output rows)`.
    pub fn backward(&mut self, cache: &EncoderCache<F>, d_out: &[F]) {
        let rows = cache.rows;
        let n = rows - 1;
        let d = self.dim;
        let mut dx = self.norm.backward(&cache.norm, d_out, rows);
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            dx = layer.backward(c, &cache.groups, &dx, rows);
        }
        add_in_place(&mut self.cls.grad, &dx[n * d..]);
        self.embed.accumulate_grads(&cache.raw, &dx[..n * d], n);
    }
}

impl<F: Scalar> Params<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(&join(prefix, "cls"), &self.cls);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(&join(prefix, "cls"), &mut self.cls);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
