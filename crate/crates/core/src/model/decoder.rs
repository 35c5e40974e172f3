//! MAE reconstruction decoder: visible encodings and a shared mask token are
//! reassembled on the full patch grid and mapped back to raw patch values.

use super::attention::AttnStats;
use super::block::{FactorizedCache, FactorizedGroups, FactorizedLayer};
use super::config::ModelConfig;
use super::encoder::TokenGrid;
use super::nn::{add_in_place, join, LayerNorm, Linear, LnCache, Param, Params, Scalar};
use super::tokens::{all_coords, PosTable, TOKEN_LEN};
use crate::error::Result;
use crate::rng::Stream;
use crate::sampling::{patch_index, N_PATCHES};

#[derive(Debug, Clone)]
pub struct MaeDecoder<F> {
    pub embed: Linear<F>,
    pub mask_token: Param<F>,
    pub layers: Vec<FactorizedLayer<F>>,
    pub norm: LayerNorm<F>,
    pub head: Linear<F>,
    pos: PosTable<F>,
    groups: FactorizedGroups,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<F> {
    enc_rows: Vec<F>,
    /// Full-grid row of each encoder row (CLS maps to `N_PATCHES`).
    slots: Vec<usize>,
    layers: Vec<FactorizedCache<F>>,
    norm: LnCache<F>,
    normed: Vec<F>,
}

impl<F: Scalar> MaeDecoder<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.decoder_dim;
        Ok(Self {
            embed: Linear::new(cfg.dim, d, rng),
            mask_token: Param::normal(&[d], 0.02, rng, false),
            layers: (0..cfg.decoder_depth)
                .map(|_| FactorizedLayer::new(d, cfg.decoder_heads, cfg.decoder_heads, cfg.ffn_ratio, rng))
                .collect(),
            norm: LayerNorm::new(d),
            head: Linear::new(d, TOKEN_LEN, rng),
            pos: PosTable::new(d)?,
            groups: FactorizedGroups::new(&all_coords(), cfg.axial_window),
            dim: d,
        })
    }

    /// Decoder input rows before the transformer layers: embedded visible
    /// tokens, the mask token elsewhere, position codes on every patch row.
    pub(crate) fn assemble(&self, enc: &TokenGrid<F>) -> (Vec<F>, Vec<F>, Vec<usize>) {
        let d = self.dim;
        let rows = N_PATCHES + 1;
        let emb = self.embed.forward(&enc.rows, enc.len() + 1);
        let mut x = Vec::with_capacity(rows * d);
        for _ in 0..N_PATCHES {
            x.extend_from_slice(&self.mask_token.value);
        }
        x.extend_from_slice(&emb[enc.len() * d..]);
        let mut slots = Vec::with_capacity(enc.len() + 1);
        for (i, c) in enc.coords.iter().enumerate() {
            let s = patch_index(c[0], c[1], c[2]);
            x[s * d..(s + 1) * d].copy_from_slice(&emb[i * d..(i + 1) * d]);
            slots.push(s);
        }
        slots.push(N_PATCHES);
        for (s, c) in all_coords().into_iter().enumerate() {
            add_in_place(&mut x[s * d..(s + 1) * d], self.pos.row(c));
        }
        (x, emb, slots)
    }

    /// Returns `N_PATCHES x TOKEN_LEN` reconstructions in patch-index order.
    pub fn forward(&self, enc: &TokenGrid<F>, stats: &mut AttnStats) -> (Vec<F>, DecoderCache<F>) {
        let rows = N_PATCHES + 1;
        let (mut x, _, slots) = self.assemble(enc);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&x, rows, &self.groups, stats);
            caches.push(c);
            x = y;
        }
        let (normed, norm) = self.norm.forward(&x[..N_PATCHES * self.dim], N_PATCHES);
        let out = self.head.forward(&normed, N_PATCHES);
        (
            out,
            DecoderCache {
                enc_rows: enc.rows.clone(),
                slots,
                layers: caches,
                norm,
                normed,
            },
        )
    }

    /// Accumulates decoder gradients and returns `dL/d(encoder rows)`.
    pub fn backward(&mut self, cache: &DecoderCache<F>, d_out: &[F]) -> Vec<F> {
        let d = self.dim;
        let rows = N_PATCHES + 1;
        let dn = self.head.backward(&cache.normed, d_out, N_PATCHES);
        let mut dx = self.norm.backward(&cache.norm, &dn, N_PATCHES);
        dx.resize(rows * d, F::zero());
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            dx = layer.backward(c, &self.groups, &dx, rows);
        }
        let mut visible = vec![false; N_PATCHES];
        let mut d_emb = Vec::with_capacity(cache.slots.len() * d);
        for &s in &cache.slots {
            d_emb.extend_from_slice(&dx[s * d..(s + 1) * d]);
            if s < N_PATCHES {
                visible[s] = true;
            }
        }
        for (s, _) in visible.iter().enumerate().filter(|(_, &v)| !v) {
            add_in_place(&mut self.mask_token.grad, &dx[s * d..(s + 1) * d]);
        }
        self.embed.backward(&cache.enc_rows, &d_emb, cache.slots.len())
    }
}

impl<F: Scalar> Params<F> for MaeDecoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(&join(prefix, "mask_token"), &self.mask_token);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
