//! Factorized-attention transformer: tokenizer, encoder, MAE decoder and
//! detection head, all with hand-written backward passes.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod detect;
pub mod encoder;
pub mod nn;
pub mod tokens;

pub use attention::AttnStats;
pub use config::ModelConfig;
pub use decoder::MaeDecoder;
pub use detect::{DetectHead, DetectOutput, Detection};
pub use encoder::{Encoder, TokenGrid};
pub use nn::{Param, Params, Scalar};
pub use tokens::{TokenInput, TOKEN_LEN};

use crate::error::Result;
use crate::rng::{purpose, stream};

use decoder::DecoderCache;
use detect::DetectCache;
use encoder::EncoderCache;
use nn::join;

fn init_stream(seed: u64, part: u64) -> crate::rng::Stream {
    stream(seed, &[purpose::INIT, part])
}

/// Encoder plus reconstruction decoder used for pre-training.
#[derive(Debug, Clone)]
pub struct MaeModel<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: MaeDecoder<F>,
}

pub struct MaeCache<F> {
    enc: EncoderCache<F>,
    dec: DecoderCache<F>,
}

impl<F: Scalar> MaeModel<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(config, &mut init_stream(seed, 0))?,
            decoder: MaeDecoder::new(config, &mut init_stream(seed, 1))?,
        })
    }

    /// Encodes the visible tokens and reconstructs all 4096 patches
    /// (`4096 x 128`, patch-index order).
    pub fn forward(&self, visible: &TokenInput<F>, stats: &mut AttnStats) -> (Vec<F>, MaeCache<F>) {
        let (grid, enc) = self.encoder.forward(visible, stats);
        let (out, dec) = self.decoder.forward(&grid, stats);
        (out, MaeCache { enc, dec })
    }

    pub fn backward(&mut self, cache: &MaeCache<F>, d_out: &[F]) {
        let d_enc = self.decoder.backward(&cache.dec, d_out);
        self.encoder.backward(&cache.enc, &d_enc);
    }
}

impl<F: Scalar> Params<F> for MaeModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Encoder plus query-based detection head used for fine-tuning and
/// inference.
#[derive(Debug, Clone)]
pub struct Detector<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub head: DetectHead<F>,
}

pub struct DetectorCache<F> {
    enc: EncoderCache<F>,
    head: DetectCache<F>,
}

impl<F: Scalar> Detector<F> {
    /// The encoder is initialised from the same stream as [`MaeModel::new`],
    /// so a from-scratch detector starts where pre-training would.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(config, &mut init_stream(seed, 0))?,
            head: DetectHead::new(config, &mut init_stream(seed, 2))?,
        })
    }

    pub fn forward(&self, input: &TokenInput<F>, stats: &mut AttnStats) -> (DetectOutput<F>, DetectorCache<F>) {
        let (grid, enc) = self.encoder.forward(input, stats);
        let (out, head) = self.head.forward(&grid, stats);
        (out, DetectorCache { enc, head })
    }

    pub fn backward(&mut self, cache: &DetectorCache<F>, grad: &DetectOutput<F>) {
        let d_enc = self.head.backward(&cache.head, grad);
        self.encoder.backward(&cache.enc, &d_enc);
    }

    pub fn detect(&self, input: &TokenInput<F>) -> Vec<Detection> {
        let (out, _) = self.forward(input, &mut AttnStats::default());
        out.decode(self.config.side_prior_mm)
    }
}

impl<F: Scalar> Params<F> for Detector<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{patch_coord, N_PATCHES};
    use rand::seq::SliceRandom;
    use rand::RngExt;

    fn random_input(n_keep: usize, seed: u64) -> TokenInput<f64> {
        let mut r = stream(seed, &[]);
        let patches: Vec<f32> = (0..N_PATCHES * TOKEN_LEN).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut idx: Vec<usize> = (0..N_PATCHES).collect();
        idx.shuffle(&mut r);
        let keep: std::collections::HashSet<usize> = idx[..n_keep].iter().copied().collect();
        TokenInput::from_patches(&patches, |t| keep.contains(&t))
    }

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 1,
            dim: 16,
            decoder_depth: 1,
            decoder_dim: 16,
            ..Default::default()
        }
    }

    fn shuffled(input: &TokenInput<f64>, seed: u64) -> TokenInput<f64> {
        let mut order: Vec<usize> = (0..input.len()).collect();
        order.shuffle(&mut stream(seed, &[]));
        let mut raw = Vec::new();
        for &i in &order {
            raw.extend_from_slice(&input.raw[i * TOKEN_LEN..(i + 1) * TOKEN_LEN]);
        }
        TokenInput {
            coords: order.iter().map(|&i| input.coords[i]).collect(),
            raw,
        }
    }

    #[test]
    fn full_grid_encoding_is_finite_with_cls() {
        let cfg = ModelConfig::default();
        let enc = Encoder::<f64>::new(&cfg, &mut stream(1, &[])).unwrap();
        let input = random_input(N_PATCHES, 2);
        let mut stats = AttnStats::default();
        let (grid, _) = enc.forward(&input, &mut stats);
        assert_eq!(grid.len(), 4096);
        assert_eq!(grid.rows.len(), 4097 * 64);
        assert!(grid.rows.iter().all(|v| v.is_finite()));
        assert!(stats.peak_score_elems <= 257 * 257);
    }

    #[test]
    fn encoder_is_invariant_to_token_order() {
        let enc = Encoder::<f64>::new(&small(), &mut stream(1, &[])).unwrap();
        let input = random_input(1024, 3);
        let (a, _) = enc.forward(&input, &mut AttnStats::default());
        let (b, _) = enc.forward(&shuffled(&input, 4), &mut AttnStats::default());
        assert_eq!(a, b);
        assert_eq!(a.len(), 1024);
    }

    #[test]
    fn decoder_reconstructs_every_patch() {
        for depth in [0, 1] {
            let cfg = ModelConfig {
                decoder_depth: depth,
                ..small()
            };
            let mae = MaeModel::<f64>::new(&cfg, 5).unwrap();
            let (out, _) = mae.forward(&random_input(1024, 6), &mut AttnStats::default());
            assert_eq!(out.len(), N_PATCHES * 128);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn masked_slots_share_the_mask_token() {
        let cfg = ModelConfig {
            decoder_depth: 0,
            ..small()
        };
        let mae = MaeModel::<f64>::new(&cfg, 5).unwrap();
        let input = random_input(1024, 7);
        let (grid, _) = mae.encoder.forward(&input, &mut AttnStats::default());
        let (x, _, _) = mae.decoder.assemble(&grid);
        let d = 16;
        let pos = PosTable::<f64>::new(d).unwrap();
        let masked: Vec<usize> = (0..N_PATCHES).filter(|&t| grid.find(patch_coord(t)).is_none()).collect();
        assert_eq!(masked.len(), 3072);
        for &t in masked.iter().take(50) {
            for c in 0..d {
                let expect = mae.decoder.mask_token.value[c] + pos.row(patch_coord(t))[c];
                assert_eq!(x[t * d + c], expect);
            }
        }
    }

    #[test]
    fn detector_emits_one_detection_per_query() {
        let det = Detector::<f64>::new(&small(), 8).unwrap();
        let input = random_input(N_PATCHES, 9);
        let mut stats = AttnStats::tracing();
        let (out, _) = det.forward(&input, &mut stats);
        assert_eq!(out.len(), 8);
        let trace = stats.trace.unwrap();
        let last = trace.last().unwrap();
        assert_eq!((last.queries.len(), last.keys.len()), (8, 8));
        let dets = out.decode(det.config.side_prior_mm);
        assert!(dets.iter().all(|d| (0.0..=1.0).contains(&d.score) && d.side_mm > 0.0));
        let (again, _) = det.forward(&shuffled(&input, 10), &mut AttnStats::default());
        assert_eq!(out, again);
    }

    use super::tokens::PosTable;
}
