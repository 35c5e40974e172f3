//! Grouped multi-head scaled dot-product attention.
//!
//! Attention is evaluated independently per [`AttnGroup`]: every query row in
//! a group attends only to that group's key rows. Factorized attention is
//! expressed entirely through the group lists, so the largest score matrix
//! ever materialised is `max(|queries| * |keys|)` over groups.

use super::nn::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    /// Rows of the query matrix.
    pub queries: Vec<usize>,
    /// Rows of the key/value matrices.
    pub keys: Vec<usize>,
    /// Optional `queries x keys` allow-list; `None` means all pairs.
    pub allowed: Option<Vec<bool>>,
}

impl AttnGroup {
    pub fn full(queries: Vec<usize>, keys: Vec<usize>) -> Self {
        Self {
            queries,
            keys,
            allowed: None,
        }
    }

    pub fn score_elems(&self) -> usize {
        self.queries.len() * self.keys.len()
    }
}

/// Instrumentation gathered during forward passes.
#[derive(Debug, Clone, Default)]
pub struct AttnStats {
    /// Largest per-head score matrix (queries x keys) materialised.
    pub peak_score_elems: usize,
    /// When `Some`, every evaluated group is recorded.
    pub trace: Option<Vec<AttnGroup>>,
}

impl AttnStats {
    pub fn tracing() -> Self {
        Self {
            peak_score_elems: 0,
            trace: Some(Vec::new()),
        }
    }

    pub fn merge(&mut self, other: &AttnStats) {
        self.peak_score_elems = self.peak_score_elems.max(other.peak_score_elems);
        if let (Some(t), Some(o)) = (self.trace.as_mut(), other.trace.as_ref()) {
            t.extend(o.iter().cloned());
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AttnCache<F> {
    /// Per group: `heads x m x kk` softmax probabilities.
    probs: Vec<Vec<F>>,
}

impl<F> AttnCache<F> {
    /// Softmax probabilities per group, laid out `heads x queries x keys`.
    pub fn probs(&self) -> &[Vec<F>] {
        &self.probs
    }
}

fn gather<F: Scalar>(src: &[F], d: usize, rows: &[usize], col0: usize, dh: usize, out: &mut Vec<F>) {
    out.clear();
    for &r in rows {
        out.extend_from_slice(&src[r * d + col0..r * d + col0 + dh]);
    }
}

fn scatter_add<F: Scalar>(dst: &mut [F], d: usize, rows: &[usize], col0: usize, dh: usize, src: &[F]) {
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..dh {
            let o = &mut dst[r * d + col0 + c];
            *o = *o + src[i * dh + c];
        }
    }
}

/// Forward pass. `q` has `q_rows x d`, `k`/`v` share a row space; the output
/// has `q_rows x d` with rows not covered by any group left at zero.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    q_rows: usize,
    d: usize,
    heads: usize,
    groups: &[AttnGroup],
    stats: &mut AttnStats,
) -> (Vec<F>, AttnCache<F>) {
    assert_eq!(d % heads, 0, "dim must divide heads");
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![F::zero(); q_rows * d];
    let mut probs = Vec::with_capacity(groups.len());
    let (mut qh, mut kh, mut vh) = (Vec::new(), Vec::new(), Vec::new());
    let mut oh = Vec::new();
    for g in groups {
        let m = g.queries.len();
        let kk = g.keys.len();
        stats.peak_score_elems = stats.peak_score_elems.max(m * kk);
        if let Some(t) = stats.trace.as_mut() {
            t.push(g.clone());
        }
        let mut p = vec![F::zero(); heads * m * kk];
        if m == 0 || kk == 0 {
            probs.push(p);
            continue;
        }
        for h in 0..heads {
            let c0 = h * dh;
            gather(q, d, &g.queries, c0, dh, &mut qh);
            gather(k, d, &g.keys, c0, dh, &mut kh);
            gather(v, d, &g.keys, c0, dh, &mut vh);
            let s = &mut p[h * m * kk..(h + 1) * m * kk];
            F::gemm(m, dh, kk, &qh, false, &kh, true, s, false);
            for i in 0..m {
                let row = &mut s[i * kk..(i + 1) * kk];
                let mut mx = F::neg_infinity();
                match g.allowed.as_ref() {
                    None => {
                        for x in row.iter_mut() {
                            *x = *x * scale;
                            mx = mx.max(*x);
                        }
                    }
                    Some(a) => {
                        for (x, &ok) in row.iter_mut().zip(&a[i * kk..(i + 1) * kk]) {
                            *x = if ok { *x * scale } else { F::neg_infinity() };
                            mx = mx.max(*x);
                        }
                    }
                }
                if mx == F::neg_infinity() {
                    row.fill(F::zero());
                    continue;
                }
                let mut sum = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum = sum + *x;
                }
                let inv = F::one() / sum;
                for x in row.iter_mut() {
                    *x = *x * inv;
                }
            }
            oh.clear();
            oh.resize(m * dh, F::zero());
            F::gemm(m, kk, dh, s, false, &vh, false, &mut oh, false);
            for (i, &r) in g.queries.iter().enumerate() {
                out[r * d + c0..r * d + c0 + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        probs.push(p);
    }
    (out, AttnCache { probs })
}

/// Backward pass; returns `(dq, dk, dv)` with the shapes of the inputs.
/// `d_probs`, laid out like [`AttnCache::probs`], adds gradient that
/// reaches the probabilities directly rather than through the output.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    q_rows: usize,
    kv_rows: usize,
    d: usize,
    heads: usize,
    groups: &[AttnGroup],
    cache: &AttnCache<F>,
    d_out: &[F],
    d_probs: Option<&[Vec<F>]>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::zero(); q_rows * d];
    let mut dk = vec![F::zero(); kv_rows * d];
    let mut dv = vec![F::zero(); kv_rows * d];
    let (mut qh, mut kh, mut vh, mut doh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut dp = Vec::new();
    let mut buf_q = Vec::new();
    let mut buf_k = Vec::new();
    let mut buf_v = Vec::new();
    for (gi, (g, p_all)) in groups.iter().zip(&cache.probs).enumerate() {
        let m = g.queries.len();
        let kk = g.keys.len();
        if m == 0 || kk == 0 {
            continue;
        }
        for h in 0..heads {
            let c0 = h * dh;
            let p = &p_all[h * m * kk..(h + 1) * m * kk];
            gather(q, d, &g.queries, c0, dh, &mut qh);
            gather(k, d, &g.keys, c0, dh, &mut kh);
            gather(v, d, &g.keys, c0, dh, &mut vh);
            gather(d_out, d, &g.queries, c0, dh, &mut doh);
            // dV = P^T dO
            buf_v.clear();
            buf_v.resize(kk * dh, F::zero());
            F::gemm(kk, m, dh, p, true, &doh, false, &mut buf_v, false);
            // dP = dO V^T
            dp.clear();
            dp.resize(m * kk, F::zero());
            F::gemm(m, dh, kk, &doh, false, &vh, true, &mut dp, false);
            if let Some(extra) = d_probs {
                for (a, &b) in dp.iter_mut().zip(&extra[gi][h * m * kk..(h + 1) * m * kk]) {
                    *a = *a + b;
                }
            }
            // dS = P * (dP - rowsum(P * dP)), then the 1/sqrt(dh) scale
            for i in 0..m {
                let pr = &p[i * kk..(i + 1) * kk];
                let dr = &mut dp[i * kk..(i + 1) * kk];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..kk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            buf_q.clear();
            buf_q.resize(m * dh, F::zero());
            F::gemm(m, kk, dh, &dp, false, &kh, false, &mut buf_q, false);
            buf_k.clear();
            buf_k.resize(kk * dh, F::zero());
            F::gemm(kk, m, dh, &dp, true, &qh, false, &mut buf_k, false);
            scatter_add(&mut dq, d, &g.queries, c0, dh, &buf_q);
            scatter_add(&mut dk, d, &g.keys, c0, dh, &buf_k);
            scatter_add(&mut dv, d, &g.keys, c0, dh, &buf_v);
        }
    }
    (dq, dk, dv)
}
