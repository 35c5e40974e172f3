//! Lesion matching, FROC, patient-level metrics, size strata and the paired
//! permutation test.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::infer::CasePredictions;
use crate::error::{Error, Result};
use crate::geometry::cube_iou;
use crate::rng::{purpose, stream};
use crate::synthvasc::LesionGT;

/// Matching outcome for one case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMatch {
    pub case_id: String,
    /// Detection scores, descending.
    pub scores: Vec<f64>,
    pub is_tp: Vec<bool>,
    /// Per ground truth: score of the detection that claimed it.
    pub gt_hit_score: Vec<Option<f64>>,
    pub gt_diameter_mm: Vec<f64>,
    pub healthy: bool,
}

impl CaseMatch {
    pub fn n_tp_at(&self, thr: f64) -> usize {
        self.gt_hit_score.iter().filter(|s| s.is_some_and(|s| s >= thr)).count()
    }

    pub fn n_fp_at(&self, thr: f64) -> usize {
        self.scores.iter().zip(&self.is_tp).filter(|(&s, &tp)| s >= thr && !tp).count()
    }

    pub fn n_det_at(&self, thr: f64) -> usize {
        self.scores.iter().filter(|&&s| s >= thr).count()
    }
}

/// Greedy score-descending matching: a detection is a true positive when it
/// overlaps an unclaimed ground truth with IoU >= `t_iou` (the best such
/// ground truth is claimed).
pub fn match_detections(preds: &CasePredictions, gts: &[LesionGT], t_iou: f64) -> CaseMatch {
    let mut dets = preds.detections.clone();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let cubes: Vec<_> = gts.iter().map(|g| g.cube()).collect();
    let mut gt_hit_score = vec![None; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    for d in &dets {
        let dc = d.cube();
        let best = cubes
            .iter()
            .enumerate()
            .filter(|(g, _)| gt_hit_score[*g].is_none())
            .map(|(g, c)| (cube_iou(&dc, c), g))
            .filter(|&(iou, _)| iou >= t_iou)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        match best {
            Some((_, g)) => {
                gt_hit_score[g] = Some(d.score);
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }
    CaseMatch {
        case_id: preds.case_id.clone(),
        scores: dets.iter().map(|d| d.score).collect(),
        is_tp,
        gt_hit_score,
        gt_diameter_mm: gts.iter().map(|g| g.diameter_mm).collect(),
        healthy: gts.is_empty(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// In sweep order: threshold descending, fpr and se non-decreasing.
    pub points: Vec<FrocPoint>,
}

/// Sweeps every distinct score as a threshold. With no detections at all the
/// curve is the single point `(0, 0)` at threshold `+inf`.
pub fn froc(cases: &[CaseMatch]) -> Result<FrocCurve> {
    let n_gt: usize = cases.iter().map(|c| c.gt_hit_score.len()).sum();
    if n_gt == 0 {
        return Err(Error::NoLesions);
    }
    let n_scans = cases.len() as f64;
    // (score, is_tp) over all detections
    let mut events: Vec<(f64, bool)> = cases
        .iter()
        .flat_map(|c| c.scores.iter().copied().zip(c.is_tp.iter().copied()))
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    if events.is_empty() {
        return Ok(FrocCurve {
            points: vec![FrocPoint {
                threshold: f64::INFINITY,
                fpr: 0.0,
                se: 0.0,
            }],
        });
    }
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let thr = events[i].0;
        while i < events.len() && events[i].0 == thr {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: thr,
            fpr: fp as f64 / n_scans,
            se: tp as f64 / n_gt as f64,
        });
    }
    Ok(FrocCurve { points })
}

/// The point of highest sensitivity with `fpr <= budget` (the earliest in
/// sweep order among ties), or `None` when no point fits the budget.
pub fn operating_point(curve: &FrocCurve, budget: f64) -> Result<Option<FrocPoint>> {
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::NegativeBudget(budget));
    }
    let mut best: Option<FrocPoint> = None;
    for p in curve.points.iter().filter(|p| p.fpr <= budget) {
        if best.is_none_or(|b| p.se > b.se) {
            best = Some(*p);
        }
    }
    Ok(best)
}

/// Maximum sensitivity over points with `fpr <= budget`; 0 if none.
pub fn se_at_fpr(curve: &FrocCurve, budget: f64) -> Result<f64> {
    Ok(operating_point(curve, budget)?.map_or(0.0, |p| p.se))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    /// Lesion-bearing cases with at least one true detection.
    pub p_se: Option<f64>,
    /// Healthy cases with no detections; absent without healthy cases.
    pub p_sp: Option<f64>,
    pub diseased_hit: usize,
    pub diseased: usize,
    pub healthy_clean: usize,
    pub healthy: usize,
}

pub fn patient_metrics(cases: &[CaseMatch], threshold: f64) -> PatientMetrics {
    let diseased: Vec<_> = cases.iter().filter(|c| !c.healthy).collect();
    let healthy: Vec<_> = cases.iter().filter(|c| c.healthy).collect();
    let diseased_hit = diseased.iter().filter(|c| c.n_tp_at(threshold) > 0).count();
    let healthy_clean = healthy.iter().filter(|c| c.n_det_at(threshold) == 0).count();
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    PatientMetrics {
        p_se: ratio(diseased_hit, diseased.len()),
        p_sp: ratio(healthy_clean, healthy.len()),
        diseased_hit,
        diseased: diseased.len(),
        healthy_clean,
        healthy: healthy.len(),
    }
}

/// Sensitivity in the bands `[0, e0)`, `[e0, e1)`, `[e1, inf)`; `None` marks
/// a band without lesions.
pub fn strata_sensitivity(cases: &[CaseMatch], threshold: f64, edges: [f64; 2]) -> [Option<f64>; 3] {
    let mut hit = [0usize; 3];
    let mut total = [0usize; 3];
    for c in cases {
        for (s, &d) in c.gt_hit_score.iter().zip(&c.gt_diameter_mm) {
            let band = if d < edges[0] {
                0
            } else if d < edges[1] {
                1
            } else {
                2
            };
            total[band] += 1;
            if s.is_some_and(|s| s >= threshold) {
                hit[band] += 1;
            }
        }
    }
    std::array::from_fn(|b| (total[b] > 0).then(|| hit[b] as f64 / total[b] as f64))
}

/// Per-lesion hit flags at `threshold`, concatenated over cases in order.
pub fn lesion_hits(cases: &[CaseMatch], threshold: f64) -> Vec<bool> {
    cases
        .iter()
        .flat_map(|c| c.gt_hit_score.iter().map(move |s| s.is_some_and(|s| s >= threshold)))
        .collect()
}

/// Two-sided paired sign-flip test on the mean hit difference, with add-one
/// smoothing: `p = (1 + #{|T*| >= |T|}) / (1 + n_perm)`.
pub fn permutation_test(a: &[bool], b: &[bool], n_perm: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let d: Vec<i64> = a.iter().zip(b).map(|(&x, &y)| x as i64 - y as i64).collect();
    let observed = d.iter().sum::<i64>().abs();
    let mut rng = stream(seed, &[purpose::PERMUTATION]);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let t: i64 = d.iter().map(|&v| if rng.random::<bool>() { v } else { -v }).sum();
        if t.abs() >= observed {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (n_perm + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::infer::WorldDetection;

    fn det(score: f64, c: [f64; 3], side: f64) -> WorldDetection {
        WorldDetection {
            score,
            center_mm: c,
            side_mm: side,
        }
    }

    fn gt(c: [f64; 3], side: f64, diameter: f64) -> LesionGT {
        LesionGT {
            center_mm: c,
            side_mm: side,
            diameter_mm: diameter,
        }
    }

    #[test]
    fn identical_cube_is_tp_and_second_claim_is_fp() {
        let g = [gt([5.0; 3], 4.0, 4.0)];
        let p = CasePredictions::new("a", vec![det(0.9, [5.0; 3], 4.0), det(0.8, [5.2, 5.0, 5.0], 4.0)]);
        let m = match_detections(&p, &g, 0.3);
        assert_eq!(m.is_tp, vec![true, false]);
        assert_eq!(m.gt_hit_score, vec![Some(0.9)]);
    }

    #[test]
    fn iou_just_below_threshold_is_fp() {
        // unit cubes offset by s along x: IoU = (1 - s) / (1 + s)
        let s = 0.71 / 1.29;
        let g = [gt([0.0; 3], 1.0, 1.0)];
        let p = CasePredictions::new("a", vec![det(0.5, [0.0, 0.0, s], 1.0)]);
        let m = match_detections(&p, &g, 0.3);
        assert!((cube_iou(&p.detections[0].cube(), &g[0].cube()) - 0.29).abs() < 1e-12);
        assert_eq!(m.is_tp, vec![false]);
    }

    #[test]
    fn two_case_hand_curve() {
        let c1 = match_detections(
            &CasePredictions::new("1", vec![det(0.9, [5.0; 3], 2.0)]),
            &[gt([5.0; 3], 2.0, 2.0)],
            0.3,
        );
        let c2 = match_detections(
            &CasePredictions::new("2", vec![det(0.8, [20.0; 3], 2.0)]),
            &[gt([5.0; 3], 2.0, 2.0)],
            0.3,
        );
        let curve = froc(&[c1, c2]).unwrap();
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.se)).collect();
        assert_eq!(pts, vec![(0.0, 0.5), (0.5, 0.5)]);
    }

    #[test]
    fn se_at_fpr_definition() {
        let curve = FrocCurve {
            points: vec![
                FrocPoint { threshold: 0.9, fpr: 0.0, se: 0.5 },
                FrocPoint { threshold: 0.5, fpr: 0.5, se: 0.7 },
                FrocPoint { threshold: 0.1, fpr: 1.0, se: 0.9 },
            ],
        };
        assert_eq!(se_at_fpr(&curve, 0.5).unwrap(), 0.7);
        assert_eq!(se_at_fpr(&curve, f64::INFINITY).unwrap(), 0.9);
        assert!(se_at_fpr(&curve, -0.1).is_err());
        let late = FrocCurve { points: curve.points[1..].to_vec() };
        assert_eq!(se_at_fpr(&late, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn empty_predictions_and_no_lesions() {
        let m = match_detections(&CasePredictions::new("x", vec![]), &[gt([1.0; 3], 1.0, 1.0)], 0.3);
        let c = froc(&[m]).unwrap();
        assert!(c.points.iter().all(|p| p.se == 0.0));
        let h = match_detections(&CasePredictions::new("h", vec![]), &[], 0.3);
        assert!(matches!(froc(&[h]), Err(Error::NoLesions)));
    }

    #[test]
    fn patient_level() {
        let mk = |hit: bool, healthy: bool, dets: usize| CaseMatch {
            case_id: String::new(),
            scores: vec![0.9; dets],
            is_tp: (0..dets).map(|i| hit && i == 0).collect(),
            gt_hit_score: if healthy { vec![] } else { vec![hit.then_some(0.9)] },
            gt_diameter_mm: if healthy { vec![] } else { vec![4.0] },
            healthy,
        };
        let m = patient_metrics(&[mk(true, false, 1), mk(true, false, 2), mk(false, false, 0)], 0.5);
        assert!((m.p_se.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.p_sp, None);
        let m = patient_metrics(&[mk(false, true, 0), mk(false, true, 0)], 0.5);
        assert_eq!(m.p_sp, Some(1.0));
    }

    #[test]
    fn strata_boundaries() {
        let c = CaseMatch {
            case_id: String::new(),
            scores: vec![],
            is_tp: vec![],
            gt_hit_score: vec![None, Some(0.9), Some(0.9)],
            gt_diameter_mm: vec![2.9, 3.0, 8.0],
            healthy: false,
        };
        assert_eq!(strata_sensitivity(std::slice::from_ref(&c), 0.5, [3.0, 7.0]), [Some(0.0), Some(1.0), Some(1.0)]);
        let five = CaseMatch {
            gt_diameter_mm: vec![5.0; 3],
            ..c
        };
        let s = strata_sensitivity(&[five], 0.5, [3.0, 7.0]);
        assert!(s[0].is_none() && s[2].is_none());
    }

    #[test]
    fn permutation_extremes() {
        let a = vec![true; 20];
        let b = vec![false; 20];
        assert_eq!(permutation_test(&a, &a, 1000, 1).unwrap(), 1.0);
        let p = permutation_test(&a, &b, 10_000, 1).unwrap();
        assert!(p < 0.01);
        assert_eq!(p, permutation_test(&b, &a, 10_000, 1).unwrap());
        assert!(permutation_test(&a, &b[..3], 10, 1).is_err());
    }
}
