//! Pre-norm transformer blocks and the factorized (slice, then column)
//! attention layer.

use std::collections::BTreeMap;

use super::attention::{attention_backward, attention_forward, AttnCache, AttnGroup, AttnStats};
use super::nn::{add_in_place, join, LayerNorm, Linear, LnCache, Mlp, MlpCache, Param, Params, Scalar};
use crate::rng::Stream;

/// Pre-norm self-attention followed by a pre-norm feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct AttnBlock<F> {
    pub ln1: LayerNorm<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BlockCache<F> {
    ln1: LnCache<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    attn: AttnCache<F>,
    a: Vec<F>,
    ln2: LnCache<F>,
    mlp: MlpCache<F>,
}

fn split3<F: Scalar>(qkv: &[F], rows: usize, d: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut q = Vec::with_capacity(rows * d);
    let mut k = Vec::with_capacity(rows * d);
    let mut v = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
        q.extend_from_slice(&row[..d]);
        k.extend_from_slice(&row[d..2 * d]);
        v.extend_from_slice(&row[2 * d..]);
    }
    (q, k, v)
}

fn join3<F: Scalar>(q: &[F], k: &[F], v: &[F], rows: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * 3 * d);
    for r in 0..rows {
        out.extend_from_slice(&q[r * d..(r + 1) * d]);
        out.extend_from_slice(&k[r * d..(r + 1) * d]);
        out.extend_from_slice(&v[r * d..(r + 1) * d]);
    }
    out
}

impl<F: Scalar> AttnBlock<F> {
    pub fn new(dim: usize, heads: usize, ffn_ratio: usize, rng: &mut Stream) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, ffn_ratio * dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `groups` must cover every row exactly once as a query.
    pub fn forward(&self, x: &[F], rows: usize, groups: &[AttnGroup], stats: &mut AttnStats) -> (Vec<F>, BlockCache<F>) {
        let d = self.dim;
        let (h1, ln1) = self.ln1.forward(x, rows);
        let qkv = self.qkv.forward(&h1, rows);
        let (q, k, v) = split3(&qkv, rows, d);
        let (a, attn) = attention_forward(&q, &k, &v, rows, d, self.heads, groups, stats);
        let mut x2 = self.proj.forward(&a, rows);
        add_in_place(&mut x2, x);
        let (h2, ln2) = self.ln2.forward(&x2, rows);
        let (f, mlp) = self.mlp.forward(&h2, rows);
        let mut y = x2;
        add_in_place(&mut y, &f);
        (
            y,
            BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                attn,
                a,
                ln2,
                mlp,
            },
        )
    }

    pub fn backward(&mut self, c: &BlockCache<F>, groups: &[AttnGroup], dy: &[F], rows: usize) -> Vec<F> {
        let d = self.dim;
        let dh2 = self.mlp.backward(&c.mlp, dy, rows);
        let mut dx2 = self.ln2.backward(&c.ln2, &dh2, rows);
        add_in_place(&mut dx2, dy);
        let da = self.proj.backward(&c.a, &dx2, rows);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, rows, rows, d, self.heads, groups, &c.attn, &da, None);
        let dqkv = join3(&dq, &dk, &dv, rows, d);
        let dh1 = self.qkv.backward(&c.h1, &dqkv, rows);
        let mut dx = self.ln1.backward(&c.ln1, &dh1, rows);
        add_in_place(&mut dx, &dx2);
        dx
    }
}

impl<F: Scalar> Params<F> for AttnBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Attention groups for one factorized layer over tokens at `coords`
/// (`[z, y, x]`), with the CLS token as the extra last row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorizedGroups {
    /// One group per z-slice, plus the CLS group.
    pub spatial: Vec<AttnGroup>,
    /// One group per (y, x) column, plus the CLS group.
    pub axial: Vec<AttnGroup>,
}

impl FactorizedGroups {
    /// Groups are built from the token coordinates, so masked-out tokens
    /// simply shrink (or remove) their slice and column groups. With
    /// `axial_window = Some(w)`, column attention is restricted to
    /// `|dz| <= w`.
    pub fn new(coords: &[[usize; 3]], axial_window: Option<usize>) -> Self {
        let n = coords.len();
        let cls = n;
        let mut slices: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut columns: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, c) in coords.iter().enumerate() {
            slices.entry(c[0]).or_default().push(i);
            columns.entry((c[1], c[2])).or_default().push(i);
        }
        let cls_group = AttnGroup::full(vec![cls], (0..=n).collect());
        let with_cls = |rows: &Vec<usize>| {
            let mut keys = rows.clone();
            keys.push(cls);
            keys
        };
        let mut spatial: Vec<AttnGroup> = slices
            .values()
            .map(|rows| AttnGroup::full(rows.clone(), with_cls(rows)))
            .collect();
        spatial.push(cls_group.clone());
        let mut axial: Vec<AttnGroup> = columns
            .values()
            .map(|rows| {
                let keys = with_cls(rows);
                let allowed = axial_window.map(|w| {
                    let mut a = Vec::with_capacity(rows.len() * keys.len());
                    for &qi in rows {
                        for &kj in &keys {
                            a.push(kj == cls || coords[qi][0].abs_diff(coords[kj][0]) <= w);
                        }
                    }
                    a
                });
                AttnGroup {
                    queries: rows.clone(),
                    keys,
                    allowed,
                }
            })
            .collect();
        axial.push(cls_group);
        Self { spatial, axial }
    }
}

/// Within-slice attention block followed by within-column attention block.
#[derive(Debug, Clone)]
pub struct FactorizedLayer<F> {
    pub spatial: AttnBlock<F>,
    pub axial: AttnBlock<F>,
}

#[derive(Debug, Clone, Default)]
pub struct FactorizedCache<F> {
    spatial: BlockCache<F>,
    axial: BlockCache<F>,
}

impl<F: Scalar> FactorizedLayer<F> {
    pub fn new(dim: usize, heads_spatial: usize, heads_axial: usize, ffn_ratio: usize, rng: &mut Stream) -> Self {
        Self {
            spatial: AttnBlock::new(dim, heads_spatial, ffn_ratio, rng),
            axial: AttnBlock::new(dim, heads_axial, ffn_ratio, rng),
        }
    }

    pub fn forward(&self, x: &[F], rows: usize, groups: &FactorizedGroups, stats: &mut AttnStats) -> (Vec<F>, FactorizedCache<F>) {
        let (h, spatial) = self.spatial.forward(x, rows, &groups.spatial, stats);
        let (y, axial) = self.axial.forward(&h, rows, &groups.axial, stats);
        (y, FactorizedCache { spatial, axial })
    }

    pub fn backward(&mut self, c: &FactorizedCache<F>, groups: &FactorizedGroups, dy: &[F], rows: usize) -> Vec<F> {
        let dh = self.axial.backward(&c.axial, &groups.axial, dy, rows);
        self.spatial.backward(&c.spatial, &groups.spatial, &dh, rows)
    }
}

impl<F: Scalar> Params<F> for FactorizedLayer<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.axial.visit(&join(prefix, "axial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.axial.visit_mut(&join(prefix, "axial"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn grid_coords(nz: usize, ny: usize, nx: usize) -> Vec<[usize; 3]> {
        let mut v = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    v.push([z, y, x]);
                }
            }
        }
        v
    }

    #[test]
    fn every_row_is_a_query_once_per_step() {
        let coords = grid_coords(3, 2, 2);
        let g = FactorizedGroups::new(&coords, None);
        for step in [&g.spatial, &g.axial] {
            let mut seen = vec![0; coords.len() + 1];
            for grp in step.iter() {
                for &q in &grp.queries {
                    seen[q] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
        assert_eq!(g.spatial.len(), 3 + 1);
        assert_eq!(g.axial.len(), 4 + 1);
    }

    #[test]
    fn axial_window_restricts_depth() {
        let coords = grid_coords(4, 1, 1);
        let g = FactorizedGroups::new(&coords, Some(1));
        let col = &g.axial[0];
        let a = col.allowed.as_ref().unwrap();
        assert!(a[1]);
        assert!(!a[2]);
        assert!(a[4]); // CLS key
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut r = stream(3, &[]);
        let coords = grid_coords(2, 2, 1);
        let rows = coords.len() + 1;
        let d = 6;
        let layer = FactorizedLayer::<f64>::new(d, 2, 3, 2, &mut r);
        let groups = FactorizedGroups::new(&coords, None);
        let x: Vec<f64> = (0..rows * d).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.2).collect();
        let w: Vec<f64> = (0..rows * d).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.3).collect();
        let loss = |l: &FactorizedLayer<f64>, x: &[f64]| -> f64 {
            let (y, _) = l.forward(x, rows, &groups, &mut AttnStats::default());
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer.forward(&x, rows, &groups, &mut AttnStats::default());
        let mut l2 = layer.clone();
        let dx = l2.backward(&cache, &groups, &w, rows);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let num = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-6 * (1.0 + num.abs()), "{i}: {num} vs {}", dx[i]);
        }
        // one weight of the axial qkv
        let mut lp = layer.clone();
        lp.axial.qkv.w.value[5] += h;
        let mut lm = layer.clone();
        lm.axial.qkv.w.value[5] -= h;
        let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((num - l2.axial.qkv.w.grad[5]).abs() < 1e-6 * (1.0 + num.abs()));
    }
}
