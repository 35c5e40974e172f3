//! Whole-volume inference by overlapping windows plus cube NMS.

use serde::{Deserialize, Serialize};

use crate::geometry::{cube_iou, BoundingCube, DistanceMap};
use crate::model::{Detector, TokenInput};
use crate::sampling::{extract_crop, CROP};
use crate::synthvasc::Case;

/// A detection in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldDetection {
    pub score: f64,
    pub center_mm: [f64; 3],
    pub side_mm: f64,
}

impl WorldDetection {
    pub fn cube(&self) -> BoundingCube {
        BoundingCube::new(self.center_mm, self.side_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePredictions {
    pub case_id: String,
    /// Sorted by descending score.
    pub detections: Vec<WorldDetection>,
}

impl CasePredictions {
    pub fn new(case_id: impl Into<String>, mut detections: Vec<WorldDetection>) -> Self {
        sort_by_score(&mut detections);
        Self {
            case_id: case_id.into(),
            detections,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub stride: usize,
    /// Overlap above which a lower-scored cube is suppressed.
    pub nms_iou: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            stride: 32,
            nms_iou: 0.25,
        }
    }
}

fn sort_by_score(d: &mut [WorldDetection]) {
    d.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.center_mm.partial_cmp(&b.center_mm).unwrap_or(std::cmp::Ordering::Equal)));
}

/// Window origins along one axis: `ceil((dim - 64) / stride) + 1` windows
/// with the last flush against the far edge, or one centred window when the
/// axis is shorter than the window.
pub fn window_origins(dim: usize, stride: usize) -> Vec<isize> {
    if dim <= CROP {
        return vec![-(((CROP - dim) / 2) as isize)];
    }
    let span = dim - CROP;
    let n = span.div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(span) as isize).collect()
}

/// Greedy score-ordered suppression.
pub fn nms(mut dets: Vec<WorldDetection>, iou: f64) -> Vec<WorldDetection> {
    sort_by_score(&mut dets);
    let mut keep: Vec<WorldDetection> = Vec::new();
    for d in dets {
        let c = d.cube();
        if keep.iter().all(|k| cube_iou(&k.cube(), &c) <= iou) {
            keep.push(d);
        }
    }
    keep
}

pub fn sliding_window_infer(model: &Detector<f32>, case: &Case, dmap: &DistanceMap, cfg: &InferConfig) -> CasePredictions {
    let dims = case.dims();
    let axes = dims.map(|d| window_origins(d, cfg.stride));
    let mut all = Vec::new();
    for &oz in &axes[0] {
        for &oy in &axes[1] {
            for &ox in &axes[2] {
                let crop = extract_crop(case, dmap, [oz, oy, ox]);
                let origin_mm = crop.origin_mm();
                let input = TokenInput::<f32>::from_crop(&crop, |_| true);
                for d in model.detect(&input) {
                    let local = d.center_local_mm(case.spacing_mm);
                    all.push(WorldDetection {
                        score: d.score,
                        center_mm: std::array::from_fn(|a| origin_mm[a] + local[a]),
                        side_mm: d.side_mm,
                    });
                }
            }
        }
    }
    CasePredictions::new(case.case_id.clone(), nms(all, cfg.nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(window_origins(64, 32), vec![0]);
        assert_eq!(window_origins(128, 32), vec![0, 32, 64]);
        assert_eq!(window_origins(96, 32), vec![0, 32]);
        assert_eq!(window_origins(100, 32), vec![0, 32, 36]);
        assert_eq!(window_origins(40, 32), vec![-12]);
    }

    #[test]
    fn duplicate_is_suppressed() {
        let a = WorldDetection {
            score: 0.9,
            center_mm: [10.0, 10.0, 10.0],
            side_mm: 4.0,
        };
        let b = WorldDetection {
            score: 0.7,
            center_mm: [10.4, 10.0, 9.8],
            ..a
        };
        let far = WorldDetection {
            score: 0.8,
            center_mm: [30.0, 10.0, 10.0],
            ..a
        };
        let kept = nms(vec![b, far, a], 0.25);
        assert_eq!(kept, vec![a, far]);
    }
}
