//! Reconstruction and set-prediction objectives with analytic gradients.

use serde::Serialize;

use super::hungarian::hungarian;
use crate::error::{Error, Result};
use crate::geometry::{cube_iou, BoundingCube};
use crate::model::detect::{local_mm_to_normalized, normalized_to_local_mm};
use crate::model::nn::sigmoid;
use crate::model::{DetectOutput, Scalar, TOKEN_LEN};
use crate::sampling::{MaskPlan, MaskingParams, N_PATCHES};
use crate::synthvasc::LesionGT;

/// Values per channel within a token.
const HALF: usize = TOKEN_LEN / 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaeLoss {
    pub loss: f64,
    pub intensity: f64,
    pub distance: f64,
}

/// Masked-token MSE over arbitrary token sets. `recon` and `target` are
/// `masked.len() x 128`. The returned gradient is zero on unmasked tokens.
pub fn mae_loss_masked<F: Scalar>(
    recon: &[F],
    target: &[f32],
    masked: &[bool],
    reconstruct_distance: bool,
) -> (MaeLoss, Vec<F>) {
    let n = masked.len();
    assert_eq!(recon.len(), n * TOKEN_LEN);
    assert_eq!(target.len(), n * TOKEN_LEN);
    let n_masked = masked.iter().filter(|&&m| m).count();
    let mut grad = vec![F::zero(); recon.len()];
    if n_masked == 0 {
        return (
            MaeLoss {
                loss: 0.0,
                intensity: 0.0,
                distance: 0.0,
            },
            grad,
        );
    }
    let denom = (n_masked * HALF) as f64;
    let (mut si, mut sd) = (0.0, 0.0);
    for t in (0..n).filter(|&t| masked[t]) {
        for k in 0..TOKEN_LEN {
            let i = t * TOKEN_LEN + k;
            let e = recon[i].f64() - target[i] as f64;
            if k < HALF {
                si += e * e;
            } else {
                sd += e * e;
            }
        }
    }
    let intensity = si / denom;
    let distance = sd / denom;
    let (loss, w_int, w_dist) = if reconstruct_distance {
        (0.5 * (intensity + distance), 1.0 / denom, 1.0 / denom)
    } else {
        (intensity, 2.0 / denom, 0.0)
    };
    for t in (0..n).filter(|&t| masked[t]) {
        for k in 0..TOKEN_LEN {
            let i = t * TOKEN_LEN + k;
            let w = if k < HALF { w_int } else { w_dist };
            grad[i] = F::of(w * (recon[i].f64() - target[i] as f64));
        }
    }
    (
        MaeLoss {
            loss,
            intensity,
            distance,
        },
        grad,
    )
}

/// Full-grid MAE objective; the plan must mask exactly the configured
/// number of the 4096 patches.
pub fn mae_loss<F: Scalar>(
    recon: &[F],
    target: &[f32],
    plan: &MaskPlan,
    masking: &MaskingParams,
    reconstruct_distance: bool,
) -> Result<(MaeLoss, Vec<F>)> {
    let expected = masking.n_masked(N_PATCHES);
    let actual = plan.masked.iter().filter(|&&m| m).count();
    if plan.masked.len() != N_PATCHES || actual != expected || plan.n_masked != actual {
        return Err(Error::MaskCount { expected, actual });
    }
    Ok(mae_loss_masked(recon, target, &plan.masked, reconstruct_distance))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// Hungarian pairs `(query, gt)`.
    pub pairs: Vec<(usize, usize)>,
    /// Queries admitted by the distance rule, `(query, nearest gt)`.
    pub extra_positive: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    pub fn positives(&self) -> Vec<(usize, usize)> {
        let mut p = self.pairs.clone();
        p.extend_from_slice(&self.extra_positive);
        p.sort_unstable();
        p
    }
}

/// Hungarian pairing on center distance (mm), then every remaining query
/// whose center lies within `radius_mm` of a ground truth becomes an extra
/// positive of its nearest ground truth.
pub fn match_queries(pred_mm: &[[f64; 3]], gt_mm: &[[f64; 3]], radius_mm: f64) -> Result<MatchResult> {
    let nq = pred_mm.len();
    let ng = gt_mm.len();
    let mut cost = vec![0.0; nq * ng];
    for q in 0..nq {
        for g in 0..ng {
            cost[q * ng + g] = crate::grid::dist3(pred_mm[q], gt_mm[g]);
        }
    }
    let pairs = hungarian(&cost, nq, ng)?;
    let mut taken = vec![false; nq];
    for &(q, _) in &pairs {
        taken[q] = true;
    }
    let mut extra = Vec::new();
    let mut unmatched = Vec::new();
    for q in (0..nq).filter(|&q| !taken[q]) {
        let nearest = (0..ng)
            .map(|g| (cost[q * ng + g], g))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match nearest {
            Some((d, g)) if d < radius_mm => extra.push((q, g)),
            _ => unmatched.push(q),
        }
    }
    Ok(MatchResult {
        pairs,
        extra_positive: extra,
        unmatched_queries: unmatched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionLoss {
    pub loss: f64,
    pub bce: f64,
    pub center: f64,
    pub size: f64,
    pub iou: f64,
    pub n_positive: usize,
}

/// Ground truth for one crop in crop-local mm.
#[derive(Debug, Clone, Copy)]
pub struct DetectionTargets<'a> {
    pub lesions: &'a [LesionGT],
    pub spacing_mm: [f64; 3],
    pub side_prior_mm: f64,
    pub radius_mm: f64,
}

/// IoU of two cubes and its gradient w.r.t. the first cube's center (mm)
/// and side.
fn cube_iou_grad(p: &BoundingCube, g: &BoundingCube) -> (f64, [f64; 3], f64) {
    let mut w = [0.0; 3];
    let mut dw_dc = [0.0; 3];
    let mut dw_ds = [0.0; 3];
    for a in 0..3 {
        let (phi, plo) = (p.hi(a), p.lo(a));
        let (ghi, glo) = (g.hi(a), g.lo(a));
        let hi_is_p = phi < ghi;
        let lo_is_p = plo > glo;
        w[a] = phi.min(ghi) - plo.max(glo);
        if w[a] <= 0.0 {
            return (0.0, [0.0; 3], 0.0);
        }
        dw_dc[a] = f64::from(hi_is_p as u8) - f64::from(lo_is_p as u8);
        dw_ds[a] = 0.5 * (f64::from(hi_is_p as u8) + f64::from(lo_is_p as u8));
    }
    let inter = w[0] * w[1] * w[2];
    let va = p.volume();
    let union = va + g.volume() - inter;
    let iou = inter / union;
    let di_dinter = (va + g.volume()) / (union * union);
    let di_dva = -inter / (union * union);
    let mut dc = [0.0; 3];
    let mut ds = di_dva * 3.0 * p.side_mm * p.side_mm;
    for a in 0..3 {
        let others = w[(a + 1) % 3] * w[(a + 2) % 3];
        dc[a] = di_dinter * others * dw_dc[a];
        ds += di_dinter * others * dw_ds[a];
    }
    (iou, dc, ds)
}

fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Set-prediction loss for one crop. Returns the loss, its components, the
/// match, and the gradient w.r.t. the raw head outputs.
pub fn detection_loss<F: Scalar>(
    out: &DetectOutput<F>,
    targets: &DetectionTargets,
) -> Result<(DetectionLoss, MatchResult, DetectOutput<F>)> {
    let nq = out.len();
    let s = targets.spacing_mm;
    let centers: Vec<[f64; 3]> = (0..nq)
        .map(|q| std::array::from_fn(|a| sigmoid(out.center_raw[q * 3 + a].f64())))
        .collect();
    let sides: Vec<f64> = (0..nq).map(|q| out.size_raw[q].f64().exp() * targets.side_prior_mm).collect();
    let pred_mm: Vec<[f64; 3]> = centers
        .iter()
        .map(|c| std::array::from_fn(|a| normalized_to_local_mm(c[a], s[a])))
        .collect();
    let gt_mm: Vec<[f64; 3]> = targets.lesions.iter().map(|l| l.center_mm).collect();
    let m = match_queries(&pred_mm, &gt_mm, targets.radius_mm)?;
    let positives = m.positives();

    let mut labels = vec![0.0; nq];
    for &(q, _) in &positives {
        labels[q] = 1.0;
    }
    let mut grad = DetectOutput {
        logits: vec![F::zero(); nq],
        center_raw: vec![F::zero(); nq * 3],
        size_raw: vec![F::zero(); nq],
    };
    let mut bce = 0.0;
    let mut d_bce = vec![0.0; nq];
    for q in 0..nq {
        let x = out.logits[q].f64();
        bce += bce_with_logits(x, labels[q]);
        d_bce[q] = (sigmoid(x) - labels[q]) / nq as f64;
    }
    bce /= nq as f64;

    let np = positives.len();
    let (mut center, mut size, mut iou) = (0.0, 0.0, 0.0);
    // weight of each term in the final mean
    let tw = if np == 0 { 1.0 } else { 0.25 };
    for q in 0..nq {
        grad.logits[q] = F::of(tw * d_bce[q]);
    }
    if np > 0 {
        let npf = np as f64;
        for &(q, g) in &positives {
            let gt = &targets.lesions[g];
            let gc: [f64; 3] = std::array::from_fn(|a| local_mm_to_normalized(gt.center_mm[a], s[a]));
            let mut dc = [0.0; 3];
            for a in 0..3 {
                let e = centers[q][a] - gc[a];
                center += e * e / (3.0 * npf);
                dc[a] += 2.0 * e / (3.0 * npf);
            }
            let e = sides[q].ln() - gt.side_mm.ln();
            size += e * e / npf;
            let d_size_raw = 2.0 * e / npf;

            let pc = BoundingCube::new(pred_mm[q], sides[q]);
            let (v, dv_dmm, dv_dside) = cube_iou_grad(&pc, &gt.cube());
            debug_assert!((v - cube_iou(&pc, &gt.cube())).abs() < 1e-9);
            iou += (v - 1.0) * (v - 1.0) / npf;
            let k = 2.0 * (v - 1.0) / npf;
            for a in 0..3 {
                // d mm / d c = 64 * spacing
                dc[a] += k * dv_dmm[a] * crate::sampling::CROP as f64 * s[a];
                let c = centers[q][a];
                let gr = grad.center_raw[q * 3 + a].f64() + tw * dc[a] * c * (1.0 - c);
                grad.center_raw[q * 3 + a] = F::of(gr);
            }
            let gs = grad.size_raw[q].f64() + tw * (d_size_raw + k * dv_dside * sides[q]);
            grad.size_raw[q] = F::of(gs);
        }
    }
    let loss = if np == 0 { bce } else { 0.25 * (bce + center + size + iou) };
    Ok((
        DetectionLoss {
            loss,
            bce,
            center,
            size,
            iou,
            n_positive: np,
        },
        m,
        grad,
    ))
}
