//! Query-based detection head: learned queries cross-attend to the encoded
//! grid, then self-attend, then feed class, center and size heads.
//!
//! Each query's center is predicted relative to a reference point, the
//! attention-weighted mean position of the tokens it attends to (averaged
//! over heads): the center head adds an offset in logit space.

use super::attention::{attention_backward, attention_forward, AttnCache, AttnGroup, AttnStats};
use super::block::{AttnBlock, BlockCache};
use super::config::ModelConfig;
use super::encoder::TokenGrid;
use super::nn::{add_in_place, join, sigmoid, LayerNorm, Linear, LnCache, Mlp, MlpCache, Param, Params, Scalar};
use super::tokens::PosTable;
use crate::error::Result;
use crate::rng::Stream;
use crate::sampling::{CROP, GRID};

/// Raw head outputs for every query.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutput<F> {
    pub logits: Vec<F>,
    /// `n_queries x 3` pre-sigmoid centers (reference logit included).
    pub center_raw: Vec<F>,
    /// Log of side relative to the size prior.
    pub size_raw: Vec<F>,
}

/// One decoded query: score, crop-normalized `[z, y, x]` center, cube side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub center: [f64; 3],
    pub side_mm: f64,
}

impl Detection {
    /// Center in crop-local mm (voxel 0 center at 0).
    pub fn center_local_mm(&self, spacing: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| normalized_to_local_mm(self.center[a], spacing[a]))
    }
}

pub fn normalized_to_local_mm(c: f64, spacing: f64) -> f64 {
    (c * CROP as f64 - 0.5) * spacing
}

pub fn local_mm_to_normalized(mm: f64, spacing: f64) -> f64 {
    (mm / spacing + 0.5) / CROP as f64
}

impl<F: Scalar> DetectOutput<F> {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn decode(&self, side_prior_mm: f64) -> Vec<Detection> {
        (0..self.len())
            .map(|q| Detection {
                score: sigmoid(self.logits[q].f64()),
                center: std::array::from_fn(|a| sigmoid(self.center_raw[q * 3 + a].f64())),
                side_mm: self.size_raw[q].f64().exp() * side_prior_mm,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DetectHead<F> {
    pub queries: Param<F>,
    pub ln_q: LayerNorm<F>,
    pub ln_kv: LayerNorm<F>,
    pub q_proj: Linear<F>,
    pub kv_proj: Linear<F>,
    pub out_proj: Linear<F>,
    pub self_attn: AttnBlock<F>,
    pub norm: LayerNorm<F>,
    pub class_head: Mlp<F>,
    pub center_head: Mlp<F>,
    pub size_head: Mlp<F>,
    pos: PosTable<F>,
    heads: usize,
    dim: usize,
    n_queries: usize,
}

#[derive(Debug, Clone)]
pub struct DetectCache<F> {
    mem_rows: usize,
    ln_q: LnCache<F>,
    hq: Vec<F>,
    ln_kv: LnCache<F>,
    hkv: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    attn: AttnCache<F>,
    /// Normalized position of every memory row.
    pos: Vec<[f64; 3]>,
    /// Per query reference point, normalized.
    reference: Vec<[f64; 3]>,
    a: Vec<F>,
    self_attn: BlockCache<F>,
    norm: LnCache<F>,
    cls: MlpCache<F>,
    center: MlpCache<F>,
    size: MlpCache<F>,
}

impl<F: Scalar> DetectHead<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            queries: Param::normal(&[cfg.n_queries, d], 1.0, rng, false),
            ln_q: LayerNorm::new(d),
            ln_kv: LayerNorm::new(d),
            q_proj: Linear::new(d, d, rng),
            kv_proj: Linear::new(d, 2 * d, rng),
            out_proj: Linear::new(d, d, rng),
            self_attn: AttnBlock::new(d, cfg.detector_heads, cfg.ffn_ratio, rng),
            norm: LayerNorm::new(d),
            class_head: Mlp::new(d, d, 1, rng),
            center_head: Mlp::new(d, d, 3, rng),
            size_head: Mlp::new(d, d, 1, rng),
            pos: PosTable::new(d)?,
            heads: cfg.detector_heads,
            dim: d,
            n_queries: cfg.n_queries,
        })
    }

    fn query_groups(&self, mem_rows: usize) -> (Vec<AttnGroup>, Vec<AttnGroup>) {
        let nq = self.n_queries;
        (
            vec![AttnGroup::full((0..nq).collect(), (0..mem_rows).collect())],
            vec![AttnGroup::full((0..nq).collect(), (0..nq).collect())],
        )
    }

    pub fn forward(&self, enc: &TokenGrid<F>, stats: &mut AttnStats) -> (DetectOutput<F>, DetectCache<F>) {
        let d = self.dim;
        let nq = self.n_queries;
        let mem_rows = enc.len() + 1;
        let (cross, selfg) = self.query_groups(mem_rows);

        let mut mem = enc.rows.clone();
        for (i, &c) in enc.coords.iter().enumerate() {
            add_in_place(&mut mem[i * d..(i + 1) * d], self.pos.row(c));
        }
        let (hkv, ln_kv) = self.ln_kv.forward(&mem, mem_rows);
        let kv = self.kv_proj.forward(&hkv, mem_rows);
        let (k, v) = split2(&kv, mem_rows, d);
        let (hq, ln_q) = self.ln_q.forward(&self.queries.value, nq);
        let q = self.q_proj.forward(&hq, nq);
        let (a, attn) = attention_forward(&q, &k, &v, nq, d, self.heads, &cross, stats);
        let mut x = self.out_proj.forward(&a, nq);
        add_in_place(&mut x, &self.queries.value);

        let (x, self_attn) = self.self_attn.forward(&x, nq, &selfg, stats);
        let (h, norm) = self.norm.forward(&x, nq);
        let (logits, cls) = self.class_head.forward(&h, nq);
        let (mut center_raw, center) = self.center_head.forward(&h, nq);
        let pos = memory_positions(&enc.coords);
        let reference = self.reference_points(&attn, &pos);
        for (q, r) in reference.iter().enumerate() {
            for a in 0..3 {
                let c = &mut center_raw[q * 3 + a];
                *c = *c + F::of((r[a] / (1.0 - r[a])).ln());
            }
        }
        let (size_raw, size) = self.size_head.forward(&h, nq);
        (
            DetectOutput {
                logits,
                center_raw,
                size_raw,
            },
            DetectCache {
                mem_rows,
                ln_q,
                hq,
                ln_kv,
                hkv,
                q,
                k,
                v,
                attn,
                pos,
                reference,
                a,
                self_attn,
                norm,
                cls,
                center,
                size,
            },
        )
    }

    /// Accumulates head gradients given gradients w.r.t. the raw outputs and
    /// returns `dL/d(encoder rows)`.
    pub fn backward(&mut self, c: &DetectCache<F>, grad: &DetectOutput<F>) -> Vec<F> {
        let d = self.dim;
        let nq = self.n_queries;
        let (cross, selfg) = self.query_groups(c.mem_rows);
        let mut dh = self.class_head.backward(&c.cls, &grad.logits, nq);
        add_in_place(&mut dh, &self.center_head.backward(&c.center, &grad.center_raw, nq));
        add_in_place(&mut dh, &self.size_head.backward(&c.size, &grad.size_raw, nq));
        let dx = self.norm.backward(&c.norm, &dh, nq);
        let dx = self.self_attn.backward(&c.self_attn, &selfg, &dx, nq);

        add_in_place(&mut self.queries.grad, &dx);
        let da = self.out_proj.backward(&c.a, &dx, nq);
        let d_probs = self.reference_backward(c, &grad.center_raw);
        let (dq, dk, dv) = attention_backward(
            &c.q,
            &c.k,
            &c.v,
            nq,
            c.mem_rows,
            d,
            self.heads,
            &cross,
            &c.attn,
            &da,
            Some(&[d_probs]),
        );
        let dhq = self.q_proj.backward(&c.hq, &dq, nq);
        let dqv = self.ln_q.backward(&c.ln_q, &dhq, nq);
        add_in_place(&mut self.queries.grad, &dqv);
        let dkv = join2(&dk, &dv, c.mem_rows, d);
        let dhkv = self.kv_proj.backward(&c.hkv, &dkv, c.mem_rows);
        self.ln_kv.backward(&c.ln_kv, &dhkv, c.mem_rows)
    }
}

impl<F: Scalar> DetectHead<F> {
    fn reference_points(&self, attn: &AttnCache<F>, pos: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let p = &attn.probs()[0];
        let kk = pos.len();
        let nq = self.n_queries;
        let mut out = vec![[0.0; 3]; nq];
        for h in 0..self.heads {
            for (q, r) in out.iter_mut().enumerate() {
                let row = &p[(h * nq + q) * kk..(h * nq + q + 1) * kk];
                for (w, x) in row.iter().zip(pos) {
                    for a in 0..3 {
                        r[a] += w.f64() * x[a];
                    }
                }
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v *= inv));
        out
    }

    /// Gradient w.r.t. the cross-attention probabilities from the
    /// reference-logit term of the centers.
    fn reference_backward(&self, c: &DetectCache<F>, d_center_raw: &[F]) -> Vec<F> {
        let nq = self.n_queries;
        let kk = c.pos.len();
        let inv = 1.0 / self.heads as f64;
        let d_ref: Vec<[f64; 3]> = (0..nq)
            .map(|q| {
                let r = c.reference[q];
                std::array::from_fn(|a| d_center_raw[q * 3 + a].f64() / (r[a] * (1.0 - r[a])) * inv)
            })
            .collect();
        let mut dp = vec![F::zero(); self.heads * nq * kk];
        for h in 0..self.heads {
            for (q, g) in d_ref.iter().enumerate() {
                let row = &mut dp[(h * nq + q) * kk..(h * nq + q + 1) * kk];
                for (v, x) in row.iter_mut().zip(&c.pos) {
                    *v = F::of(g[0] * x[0] + g[1] * x[1] + g[2] * x[2]);
                }
            }
        }
        dp
    }
}

/// Normalized patch centers of the memory rows; the trailing CLS row sits at
/// the crop center.
fn memory_positions(coords: &[[usize; 3]]) -> Vec<[f64; 3]> {
    let patch = (CROP / GRID) as f64;
    let mut pos: Vec<[f64; 3]> = coords
        .iter()
        .map(|c| c.map(|g| (g as f64 * patch + 0.5 * patch) / CROP as f64))
        .collect();
    pos.push([0.5; 3]);
    pos
}

fn split2<F: Scalar>(kv: &[F], rows: usize, d: usize) -> (Vec<F>, Vec<F>) {
    let mut k = Vec::with_capacity(rows * d);
    let mut v = Vec::with_capacity(rows * d);
    for r in 0..rows {
        k.extend_from_slice(&kv[r * 2 * d..r * 2 * d + d]);
        v.extend_from_slice(&kv[r * 2 * d + d..(r + 1) * 2 * d]);
    }
    (k, v)
}

fn join2<F: Scalar>(k: &[F], v: &[F], rows: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * 2 * d);
    for r in 0..rows {
        out.extend_from_slice(&k[r * d..(r + 1) * d]);
        out.extend_from_slice(&v[r * d..(r + 1) * d]);
    }
    out
}

impl<F: Scalar> Params<F> for DetectHead<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "queries"), &self.queries);
        self.ln_q.visit(&join(prefix, "ln_q"), f);
        self.ln_kv.visit(&join(prefix, "ln_kv"), f);
        self.q_proj.visit(&join(prefix, "q_proj"), f);
        self.kv_proj.visit(&join(prefix, "kv_proj"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.class_head.visit(&join(prefix, "class_head"), f);
        self.center_head.visit(&join(prefix, "center_head"), f);
        self.size_head.visit(&join(prefix, "size_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "queries"), &mut self.queries);
        self.ln_q.visit_mut(&join(prefix, "ln_q"), f);
        self.ln_kv.visit_mut(&join(prefix, "ln_kv"), f);
        self.q_proj.visit_mut(&join(prefix, "q_proj"), f);
        self.kv_proj.visit_mut(&join(prefix, "kv_proj"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.class_head.visit_mut(&join(prefix, "class_head"), f);
        self.center_head.visit_mut(&join(prefix, "center_head"), f);
        self.size_head.visit_mut(&join(prefix, "size_head"), f);
    }
}
