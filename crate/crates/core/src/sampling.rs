//! Artery-constrained crop extraction and artery-biased patch masking.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{scale_distance, DistanceMap};
use crate::grid::{Grid3, Spacing};
use crate::rng::Stream;
use crate::synthvasc::{Case, LesionGT};

/// Crop edge length in voxels.
pub const CROP: usize = 64;
/// Patch edge length in voxels.
pub const PATCH: usize = 4;
/// Patches per crop axis.
pub const GRID: usize = CROP / PATCH;
/// Patches per crop.
pub const N_PATCHES: usize = GRID * GRID * GRID;
/// Voxels per crop channel.
pub const CROP_VOXELS: usize = CROP * CROP * CROP;
pub const N_CHANNELS: usize = 2;

/// Distance-channel value used outside the parent volume (far from any artery).
const PAD_DISTANCE: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropPolicy {
    /// Minimum fraction of crop voxels inside the artery mask; 0 disables the constraint.
    pub min_artery_fraction: f64,
    pub max_attempts: usize,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            min_artery_fraction: 0.10,
            max_attempts: 1000,
        }
    }
}

/// A two-channel 64^3 sub-volume. `channels` is channel-major, each channel
/// z-major: channel 0 intensity, channel 1 scaled distance.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub channels: Vec<f32>,
    pub origin_voxel: [isize; 3],
    /// Artery fraction of each 4^3 patch, patch grid in z-major order.
    pub patch_artery_frac: Vec<f32>,
    /// Artery fraction of the whole crop.
    pub artery_fraction: f64,
    /// Lesions whose cube intersects the crop, in crop-local mm
    /// (voxel `origin_voxel` at the local origin).
    pub gt_lesions_local: Vec<LesionGT>,
    pub spacing_mm: Spacing,
}

impl CropSample {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c * CROP_VOXELS..(c + 1) * CROP_VOXELS]
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin_voxel[a] as f64 * self.spacing_mm[a])
    }

    /// Lesions whose centre lies inside the crop extent.
    pub fn lesions_centered_inside(&self) -> Vec<LesionGT> {
        self.gt_lesions_local
            .iter()
            .filter(|l| {
                (0..3).all(|a| {
                    let v = l.center_mm[a] / self.spacing_mm[a];
                    v >= -0.5 && v < CROP as f64 - 0.5
                })
            })
            .copied()
            .collect()
    }
}

/// Precomputed per-case state for repeated crop sampling.
pub struct CropSampler<'a> {
    case: &'a Case,
    dmap: &'a DistanceMap,
    /// Inclusive summed-area table of the artery mask, dims + 1 per axis.
    sat: Vec<u32>,
    sat_dims: [usize; 3],
}

impl<'a> CropSampler<'a> {
    pub fn new(case: &'a Case, dmap: &'a DistanceMap) -> Result<Self> {
        let dims = case.dims();
        if dims.iter().any(|&d| d < CROP) {
            return Err(Error::VolumeTooSmall { dims, needed: CROP });
        }
        let sd = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let mut sat = vec![0u32; sd[0] * sd[1] * sd[2]];
        let at = |z: usize, y: usize, x: usize| (z * sd[1] + y) * sd[2] + x;
        for z in 1..sd[0] {
            for y in 1..sd[1] {
                for x in 1..sd[2] {
                    let v = *case.artery_mask.get(z - 1, y - 1, x - 1) as u32;
                    sat[at(z, y, x)] = v + sat[at(z - 1, y, x)] + sat[at(z, y - 1, x)]
                        + sat[at(z, y, x - 1)]
                        - sat[at(z - 1, y - 1, x)]
                        - sat[at(z - 1, y, x - 1)]
                        - sat[at(z, y - 1, x - 1)]
                        + sat[at(z - 1, y - 1, x - 1)];
                }
            }
        }
        Ok(Self {
            case,
            dmap,
            sat,
            sat_dims: sd,
        })
    }

    /// Number of artery voxels in the in-bounds block `[o, o + CROP)`.
    pub fn artery_count(&self, o: [usize; 3]) -> u32 {
        let sd = self.sat_dims;
        let at = |z: usize, y: usize, x: usize| self.sat[(z * sd[1] + y) * sd[2] + x];
        let (z0, y0, x0) = (o[0], o[1], o[2]);
        let (z1, y1, x1) = (o[0] + CROP, o[1] + CROP, o[2] + CROP);
        // inclusion-exclusion in i64 to avoid intermediate underflow
        let s = at(z1, y1, x1) as i64 - at(z0, y1, x1) as i64 - at(z1, y0, x1) as i64
            - at(z1, y1, x0) as i64
            + at(z0, y0, x1) as i64
            + at(z0, y1, x0) as i64
            + at(z1, y0, x0) as i64
            - at(z0, y0, x0) as i64;
        s as u32
    }

    pub fn artery_fraction(&self, o: [usize; 3]) -> f64 {
        self.artery_count(o) as f64 / CROP_VOXELS as f64
    }

    /// Uniform rejection sampling over in-bounds origins.
    pub fn sample(&self, policy: &CropPolicy, rng: &mut Stream) -> Result<CropSample> {
        let dims = self.case.dims();
        let attempts = policy.max_attempts.max(1);
        for _ in 0..attempts {
            let o = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - CROP));
            if policy.min_artery_fraction <= 0.0
                || self.artery_fraction(o) >= policy.min_artery_fraction
            {
                return Ok(self.extract(o.map(|v| v as isize)));
            }
        }
        Err(Error::NoValidCrop {
            attempts,
            min_fraction: policy.min_artery_fraction,
        })
    }

    pub fn extract(&self, origin: [isize; 3]) -> CropSample {
        extract_crop(self.case, self.dmap, origin)
    }
}

/// Convenience wrapper: builds a [`CropSampler`] and draws one crop.
pub fn sample_crop(
    case: &Case,
    dmap: &DistanceMap,
    policy: &CropPolicy,
    rng: &mut Stream,
) -> Result<CropSample> {
    CropSampler::new(case, dmap)?.sample(policy, rng)
}

/// Cuts the 64^3 crop at `origin`; voxels outside the parent read as
/// background (intensity 0, far distance, no artery).
pub fn extract_crop(case: &Case, dmap: &DistanceMap, origin: [isize; 3]) -> CropSample {
    let size = [CROP; 3];
    let vol = case.volume.crop(origin, size, 0.0);
    let dist = dmap.values.crop(origin, size, f64::INFINITY);
    let mask = case.artery_mask.crop(origin, size, false);

    let mut channels = Vec::with_capacity(N_CHANNELS * CROP_VOXELS);
    channels.extend_from_slice(vol.as_slice());
    channels.extend(dist.as_slice().iter().map(|&d| {
        if d.is_infinite() && d > 0.0 {
            PAD_DISTANCE
        } else {
            scale_distance(d)
        }
    }));

    let patch_artery_frac = patch_fractions(&mask);
    let artery_fraction =
        mask.as_slice().iter().filter(|&&m| m).count() as f64 / CROP_VOXELS as f64;

    let spacing = case.spacing_mm;
    let origin_mm = [0, 1, 2].map(|a| origin[a] as f64 * spacing[a]);
    let crop_lo = [0, 1, 2].map(|a| -0.5 * spacing[a]);
    let crop_hi = [0, 1, 2].map(|a| (CROP as f64 - 0.5) * spacing[a]);
    let gt_lesions_local = case
        .lesions
        .iter()
        .map(|l| LesionGT {
            center_mm: [0, 1, 2].map(|a| l.center_mm[a] - origin_mm[a]),
            ..*l
        })
        .filter(|l| {
            let c = l.cube();
            (0..3).all(|a| c.hi(a) > crop_lo[a] && c.lo(a) < crop_hi[a])
        })
        .collect();

    CropSample {
        channels,
        origin_voxel: origin,
        patch_artery_frac,
        artery_fraction,
        gt_lesions_local,
        spacing_mm: spacing,
    }
}

/// Artery fraction per 4^3 patch of a 64^3 mask.
pub fn patch_fractions(mask: &Grid3<bool>) -> Vec<f32> {
    let mut counts = vec![0u32; N_PATCHES];
    for (i, &m) in mask.as_slice().iter().enumerate() {
        if m {
            let [z, y, x] = mask.coord(i);
            counts[patch_index(z / PATCH, y / PATCH, x / PATCH)] += 1;
        }
    }
    let per = (PATCH * PATCH * PATCH) as f32;
    counts.into_iter().map(|c| c as f32 / per).collect()
}

#[inline]
pub fn patch_index(pz: usize, py: usize, px: usize) -> usize {
    (pz * GRID + py) * GRID + px
}

#[inline]
pub fn patch_coord(i: usize) -> [usize; 3] {
    [i / (GRID * GRID), (i / GRID) % GRID, i % GRID]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingParams {
    pub ratio: f64,
    /// Exponent on the patch artery fraction; 0 gives uniform masking.
    pub beta: f64,
    /// Weight floor so artery-free patches stay maskable.
    pub epsilon: f64,
    /// Deterministic top-k by weight instead of weighted sampling.
    pub top_k: bool,
}

impl Default for MaskingParams {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            beta: 1.0,
            epsilon: 0.05,
            top_k: false,
        }
    }
}

impl MaskingParams {
    pub fn uniform() -> Self {
        Self {
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn n_masked(&self, n: usize) -> usize {
        (self.ratio * n as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub n_masked: usize,
}

impl MaskPlan {
    pub fn all_visible(n: usize) -> Self {
        Self {
            masked: vec![false; n],
            n_masked: 0,
        }
    }

    pub fn from_masked(masked: Vec<bool>) -> Self {
        let n_masked = masked.iter().filter(|&&m| m).count();
        Self { masked, n_masked }
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// One `0`/`1` character per patch, scan order.
    pub fn to_bitstring(&self) -> String {
        self.masked.iter().map(|&m| if m { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Option<Self> {
        let masked = s
            .chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self::from_masked(masked))
    }
}

/// Masking weight `epsilon + frac^beta` (with `0^0 = 1`).
#[inline]
pub fn mask_weight(frac: f64, params: &MaskingParams) -> f64 {
    let b = if params.beta == 0.0 { 1.0 } else { frac.max(0.0).powf(params.beta) };
    params.epsilon + b
}

/// Draws exactly `round(ratio * n)` patches without replacement, with
/// inclusion biased by artery fraction (Efraimidis-Spirakis exponential keys).
pub fn plan_mask(patch_artery_frac: &[f32], params: &MaskingParams, rng: &mut Stream) -> Result<MaskPlan> {
    if !(params.ratio > 0.0 && params.ratio < 1.0) {
        return Err(Error::MaskRatio(params.ratio));
    }
    let n = patch_artery_frac.len();
    let k = params.n_masked(n);
    let mut keyed: Vec<(f64, usize)> = if params.top_k {
        patch_artery_frac
            .iter()
            .enumerate()
            .map(|(i, &f)| (-mask_weight(f as f64, params), i))
            .collect()
    } else {
        patch_artery_frac
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let u: f64 = rng.random();
                // Exp(1) / w: smallest keys win
                let e = -(1.0 - u).ln();
                (e / mask_weight(f as f64, params), i)
            })
            .collect()
    };
    let mut masked = vec![false; n];
    if k > 0 {
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        keyed.select_nth_unstable_by(k - 1, cmp);
        for &(_, i) in &keyed[..k] {
            masked[i] = true;
        }
    }
    Ok(MaskPlan { masked, n_masked: k })
}
