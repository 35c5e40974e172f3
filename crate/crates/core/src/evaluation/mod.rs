//! Whole-volume inference and the lesion-detection metric protocol.

pub mod infer;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use infer::{nms, sliding_window_infer, window_origins, CasePredictions, InferConfig, WorldDetection};
pub use metrics::{
    froc, lesion_hits, match_detections, operating_point, patient_metrics, permutation_test, se_at_fpr,
    strata_sensitivity, CaseMatch, FrocCurve, FrocPoint, PatientMetrics,
};

use crate::error::{io_err, Error, Result};
use crate::model::Detector;
use crate::synthvasc::LesionGT;
use crate::training::CaseSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub t_iou: f64,
    pub fpr_budget: f64,
    pub strata_edges_mm: [f64; 2],
    pub n_perm: usize,
    pub infer: InferConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t_iou: 0.3,
            fpr_budget: 0.5,
            strata_edges_mm: [3.0, 7.0],
            n_perm: 10_000,
            infer: InferConfig::default(),
        }
    }
}

/// Ground truth of one evaluation case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseTruth {
    pub case_id: String,
    pub lesions: Vec<LesionGT>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub n_lesions: usize,
    pub t_iou: f64,
    pub fpr_budget: f64,
    pub se_at_budget: f64,
    /// Operating threshold; absent when no curve point fits the budget.
    pub threshold: Option<f64>,
    pub patient: PatientMetrics,
    pub strata_edges_mm: [f64; 2],
    pub strata_se: [Option<f64>; 3],
    pub froc: FrocCurve,
    /// Per-lesion hits at the operating threshold, in case order.
    pub lesion_hits: Vec<bool>,
}

/// Runs sliding-window inference on every case; `workers > 1` spreads cases
/// over a thread pool while keeping output order.
pub fn infer_cases(model: &Detector<f32>, data: &CaseSet, cfg: &InferConfig, workers: usize) -> Result<Vec<CasePredictions>> {
    let one = |i: usize| -> Result<CasePredictions> {
        let item = data.get(i)?;
        Ok(sliding_window_infer(model, &item.case, &item.dmap, cfg))
    };
    if workers <= 1 {
        return (0..data.len()).map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..data.len()).into_par_iter().map(one).collect())
}

pub fn truths(data: &CaseSet) -> Result<Vec<CaseTruth>> {
    (0..data.len())
        .map(|i| {
            let c = data.get(i)?;
            Ok(CaseTruth {
                case_id: c.case.case_id.clone(),
                lesions: c.case.lesions.clone(),
            })
        })
        .collect()
}

/// Matches predictions to ground truth by case id; a truth case without a
/// prediction entry counts as predicting nothing.
pub fn match_all(preds: &[CasePredictions], truth: &[CaseTruth], t_iou: f64) -> Result<Vec<CaseMatch>> {
    let by_id: BTreeMap<&str, &CasePredictions> = preds.iter().map(|p| (p.case_id.as_str(), p)).collect();
    if let Some(p) = preds.iter().find(|p| !truth.iter().any(|t| t.case_id == p.case_id)) {
        return Err(Error::UnknownCase(p.case_id.clone()));
    }
    Ok(truth
        .iter()
        .map(|t| match by_id.get(t.case_id.as_str()) {
            Some(p) => match_detections(p, &t.lesions, t_iou),
            None => match_detections(&CasePredictions::new(t.case_id.clone(), vec![]), &t.lesions, t_iou),
        })
        .collect())
}

pub fn evaluate(preds: &[CasePredictions], truth: &[CaseTruth], cfg: &EvalConfig) -> Result<EvalReport> {
    let cases = match_all(preds, truth, cfg.t_iou)?;
    let curve = froc(&cases)?;
    let op = operating_point(&curve, cfg.fpr_budget)?;
    let thr = op.map_or(f64::INFINITY, |p| p.threshold);
    Ok(EvalReport {
        n_cases: cases.len(),
        n_lesions: cases.iter().map(|c| c.gt_hit_score.len()).sum(),
        t_iou: cfg.t_iou,
        fpr_budget: cfg.fpr_budget,
        se_at_budget: op.map_or(0.0, |p| p.se),
        threshold: op.map(|p| p.threshold),
        patient: patient_metrics(&cases, thr),
        strata_edges_mm: cfg.strata_edges_mm,
        strata_se: strata_sensitivity(&cases, thr, cfg.strata_edges_mm),
        froc: curve,
        lesion_hits: lesion_hits(&cases, thr),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl EvalReport {
    /// Flat `metric,value` table; absent values are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let rows: [(&str, String); 11] = [
            ("n_cases", self.n_cases.to_string()),
            ("n_lesions", self.n_lesions.to_string()),
            ("t_iou", self.t_iou.to_string()),
            ("fpr_budget", self.fpr_budget.to_string()),
            ("se_at_budget", self.se_at_budget.to_string()),
            ("threshold", opt(self.threshold)),
            ("p_se", opt(self.patient.p_se)),
            ("p_sp", opt(self.patient.p_sp)),
            ("se_small", opt(self.strata_se[0])),
            ("se_medium", opt(self.strata_se[1])),
            ("se_large", opt(self.strata_se[2])),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}

impl FrocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,se\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.se);
        }
        s
    }
}

pub fn write_predictions(path: &Path, preds: &[CasePredictions]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(preds)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<CasePredictions>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut preds: Vec<CasePredictions> = serde_json::from_str(&text)?;
    for p in &mut preds {
        *p = CasePredictions::new(std::mem::take(&mut p.case_id), std::mem::take(&mut p.detections));
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lesion(c: [f64; 3], d: f64) -> LesionGT {
        LesionGT {
            center_mm: c,
            side_mm: d,
            diameter_mm: d,
        }
    }

    fn oracle(truth: &[CaseTruth]) -> Vec<CasePredictions> {
        truth
            .iter()
            .map(|t| {
                let d = t
                    .lesions
                    .iter()
                    .map(|l| WorldDetection {
                        score: 1.0,
                        center_mm: l.center_mm,
                        side_mm: l.side_mm,
                    })
                    .collect();
                CasePredictions::new(t.case_id.clone(), d)
            })
            .collect()
    }

    fn truth() -> Vec<CaseTruth> {
        vec![
            CaseTruth {
                case_id: "a".into(),
                lesions: vec![lesion([10.0; 3], 2.0), lesion([30.0; 3], 8.0)],
            },
            CaseTruth {
                case_id: "b".into(),
                lesions: vec![lesion([20.0; 3], 5.0)],
            },
            CaseTruth {
                case_id: "h".into(),
                lesions: vec![],
            },
        ]
    }

    #[test]
    fn oracle_scores_perfectly() {
        let t = truth();
        let r = evaluate(&oracle(&t), &t, &EvalConfig::default()).unwrap();
        assert!(r.froc.points.contains(&FrocPoint { threshold: 1.0, fpr: 0.0, se: 1.0 }));
        assert_eq!(r.se_at_budget, 1.0);
        assert_eq!(r.patient.p_se, Some(1.0));
        assert_eq!(r.patient.p_sp, Some(1.0));
        assert_eq!(r.strata_se, [Some(1.0); 3]);
        assert_eq!(r.lesion_hits, vec![true; 3]);
    }

    #[test]
    fn unknown_case_is_rejected() {
        let t = truth();
        let p = vec![CasePredictions::new("zzz", vec![])];
        assert!(matches!(evaluate(&p, &t, &EvalConfig::default()), Err(Error::UnknownCase(_))));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = oracle(&truth());
        write_predictions(&path, &p).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), p);
    }

    #[test]
    fn csv_layout() {
        let t = truth();
        let r = evaluate(&oracle(&t), &t, &EvalConfig::default()).unwrap();
        assert!(r.to_csv().starts_with("metric,value\nn_cases,3\n"));
        assert_eq!(r.froc.to_csv(), "threshold,fpr,se\n1,0,1\n");
    }
}
