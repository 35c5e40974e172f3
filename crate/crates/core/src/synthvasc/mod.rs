//! Synthetic vascular phantoms: smooth random tubes with spherical bulges
//! attached to their centrelines, standing in for head CT angiography.
//!
//! A case is a pure function of `(params, case_index)`; every call draws
//! from its own seed-derived stream, so cases can be generated in any order
//! or in parallel.

mod io;

pub use io::{
    read_case, read_distance_map, read_manifest, write_case, write_distance_map, write_manifest,
    CaseSidecar, CASE_SIDECAR, DISTANCE_PAYLOAD, DISTANCE_SIDECAR, VOLUME_PAYLOAD, ARTERY_PAYLOAD,
};

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{voxels_to_cube, BoundingCube};
use crate::grid::{dist3, Dims, Grid3, Spacing};
use crate::rng::{self, purpose, Stream};

/// Smallest admissible extent per axis: one full model crop.
pub const MIN_DIM: usize = 64;

/// Background and vessel intensity levels. These are arbitrary contrast
/// choices for the phantom, not calibrated Hounsfield values.
const BACKGROUND_LEVEL: f32 = 0.15;
const VESSEL_BAND: (f32, f32) = (0.75, 0.9);
const LESION_DRAWS: usize = 20;
const LESION_SPOTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionGT {
    pub center_mm: [f64; 3],
    pub side_mm: f64,
    pub diameter_mm: f64,
}

impl LesionGT {
    pub fn cube(&self) -> BoundingCube {
        BoundingCube::new(self.center_mm, self.side_mm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub volume: Grid3<f32>,
    pub artery_mask: Grid3<bool>,
    pub spacing_mm: Spacing,
    pub lesions: Vec<LesionGT>,
    pub is_healthy: bool,
}

impl Case {
    pub fn dims(&self) -> Dims {
        self.volume.dims()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub volume_dims: Dims,
    pub spacing_mm: Spacing,
    /// Inclusive range.
    pub n_vessels: [usize; 2],
    pub vessel_radius_mm: [f64; 2],
    /// Inclusive range; `[0, 0]` yields healthy cases.
    pub n_lesions: [usize; 2],
    pub lesion_diameter_mm: [f64; 2],
    pub noise_std: f64,
    pub seed: u64,
    /// Include lesion voxels in the artery mask, as a vessel segmenter would.
    pub lesion_in_artery_mask: bool,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            volume_dims: [96, 96, 96],
            spacing_mm: [0.4, 0.4, 0.4],
            n_vessels: [8, 12],
            vessel_radius_mm: [0.6, 2.2],
            n_lesions: [0, 3],
            lesion_diameter_mm: [2.0, 8.0],
            noise_std: 0.05,
            seed: 0,
            lesion_in_artery_mask: true,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.volume_dims.iter().any(|&d| d < MIN_DIM) {
            return bad(format!(
                "volume_dims {:?}: every axis must be at least {MIN_DIM}",
                self.volume_dims
            ));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing_mm {:?} must be positive", self.spacing_mm));
        }
        if self.n_vessels[0] > self.n_vessels[1] || self.n_vessels[1] == 0 {
            return bad(format!("n_vessels {:?} is empty", self.n_vessels));
        }
        if self.n_lesions[0] > self.n_lesions[1] {
            return bad(format!("n_lesions {:?} is empty", self.n_lesions));
        }
        let [r0, r1] = self.vessel_radius_mm;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("vessel_radius_mm {:?} is invalid", self.vessel_radius_mm));
        }
        let [d0, d1] = self.lesion_diameter_mm;
        if !(d0 > 0.0 && d0 <= d1) {
            return bad(format!("lesion_diameter_mm {:?} is invalid", self.lesion_diameter_mm));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        Ok(())
    }

    fn extent_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.volume_dims[a] - 1) as f64 * self.spacing_mm[a])
    }
}

/// Uniform Catmull-Rom spline through control points (world mm).
struct Centerline {
    points: Vec<[f64; 3]>,
    r_start: f64,
    r_end: f64,
}

impl Centerline {
    fn segments(&self) -> usize {
        self.points.len() - 1
    }

    /// Position at `t` in `[0, 1]` along the whole curve.
    fn at(&self, t: f64) -> [f64; 3] {
        let n = self.segments();
        let u = (t.clamp(0.0, 1.0) * n as f64).min(n as f64 - 1e-12);
        let i = u.floor() as usize;
        let s = u - i as f64;
        let p = |k: isize| self.points[k.clamp(0, self.points.len() as isize - 1) as usize];
        let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
        let s2 = s * s;
        let s3 = s2 * s;
        [0, 1, 2].map(|a| {
            0.5 * (2.0 * p1[a]
                + (-p0[a] + p2[a]) * s
                + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * s2
                + (-p0[a] + 3.0 * p1[a] - 3.0 * p2[a] + p3[a]) * s3)
        })
    }

    /// Radius varies smoothly (smoothstep) between the two end radii.
    fn radius(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let w = t * t * (3.0 - 2.0 * t);
        self.r_start + (self.r_end - self.r_start) * w
    }

    fn length_estimate(&self) -> f64 {
        let mut len = 0.0;
        let mut prev = self.at(0.0);
        for k in 1..=256 {
            let p = self.at(k as f64 / 256.0);
            len += dist3(prev, p);
            prev = p;
        }
        len
    }
}

/// Minimum over spheres of (distance to sphere surface), in mm.
struct SurfaceField {
    field: Grid3<f32>,
    spacing: Spacing,
}

impl SurfaceField {
    fn new(dims: Dims, spacing: Spacing) -> Self {
        Self {
            field: Grid3::filled(dims, f32::INFINITY),
            spacing,
        }
    }

    fn splat_sphere(&mut self, center: [f64; 3], radius: f64, margin_mm: f64) {
        let dims = self.field.dims();
        let reach = radius + margin_mm;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = ((center[a] - reach) / self.spacing[a]).floor().max(0.0);
            let h = ((center[a] + reach) / self.spacing[a]).ceil().min(dims[a] as f64 - 1.0);
            if h < l {
                return;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        for z in lo[0]..=hi[0] {
            let dz = z as f64 * self.spacing[0] - center[0];
            for y in lo[1]..=hi[1] {
                let dy = y as f64 * self.spacing[1] - center[1];
                let row = self.field.index(z, y, 0);
                let data = self.field.as_mut_slice();
                for x in lo[2]..=hi[2] {
                    let dx = x as f64 * self.spacing[2] - center[2];
                    let d = ((dz * dz + dy * dy + dx * dx).sqrt() - radius) as f32;
                    let cell = &mut data[row + x];
                    if d < *cell {
                        *cell = d;
                    }
                }
            }
        }
    }
}

fn sample_usize(rng: &mut Stream, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn sample_f64(rng: &mut Stream, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn random_centerline(rng: &mut Stream, params: &PhantomParams, extent: [f64; 3]) -> Centerline {
    // Enter through one face, leave through the opposite one, wander in between.
    let axis = rng.random_range(0..3usize);
    let n_ctrl = rng.random_range(4..=6usize);
    let mut points = Vec::with_capacity(n_ctrl);
    for k in 0..n_ctrl {
        let f = k as f64 / (n_ctrl - 1) as f64;
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = if a == axis {
                // slight overshoot so the tube crosses the faces
                (-0.05 + 1.1 * f) * extent[a]
            } else {
                rng.random_range(0.15..0.85) * extent[a]
            };
        }
        points.push(p);
    }
    Centerline {
        points,
        r_start: sample_f64(rng, params.vessel_radius_mm),
        r_end: sample_f64(rng, params.vessel_radius_mm),
    }
}

/// Generates case `case_index` of the synthetic dataset described by `params`.
pub fn generate_case(params: &PhantomParams, case_index: u64) -> Result<Case> {
    params.validate()?;
    let dims = params.volume_dims;
    let spacing = params.spacing_mm;
    let extent = params.extent_mm();
    let min_extent = extent.iter().copied().fold(f64::INFINITY, f64::min);
    let min_vox = spacing.iter().copied().fold(f64::INFINITY, f64::min);
    if 2.0 * params.vessel_radius_mm[1] + 4.0 * min_vox > min_extent {
        return Err(Error::Generation(format!(
            "volume extent {min_extent:.2} mm cannot hold a vessel of radius {:.2} mm",
            params.vessel_radius_mm[1]
        )));
    }

    let mut rng = rng::stream(params.seed, &[purpose::PHANTOM, case_index]);
    let n_vessels = sample_usize(&mut rng, params.n_vessels);
    let vessels: Vec<Centerline> = (0..n_vessels)
        .map(|_| random_centerline(&mut rng, params, extent))
        .collect();

    let mut field = SurfaceField::new(dims, spacing);
    for v in &vessels {
        let step = 0.5 * min_vox;
        let n = (v.length_estimate() / step).ceil().max(2.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            field.splat_sphere(v.at(t), v.radius(t), 2.0 * min_vox);
        }
    }
    let vessel_mask = field.field.map(|&d| d <= 0.0);

    let n_lesions = sample_usize(&mut rng, params.n_lesions);
    let mut lesions = Vec::with_capacity(n_lesions);
    let mut lesion_mask = Grid3::filled(dims, false);
    let mut placed: Vec<([f64; 3], f64)> = Vec::new();
    for li in 0..n_lesions {
        // The sphere must bulge past the vessel wall by half a voxel, so a
        // diameter that fits nowhere is redrawn.
        let mut accepted = None;
        'draw: for _ in 0..LESION_DRAWS {
            let r = 0.5 * sample_f64(&mut rng, params.lesion_diameter_mm);
            for _ in 0..LESION_SPOTS {
                let v = &vessels[rng.random_range(0..vessels.len())];
                let t = rng.random_range(0.1..0.9);
                let c = v.at(t);
                let bulges = r >= v.radius(t) + 0.5 * min_vox;
                let inside = (0..3).all(|a| c[a] - r >= min_vox && c[a] + r <= extent[a] - min_vox);
                let clear = placed
                    .iter()
                    .all(|&(pc, pr)| dist3(pc, c) > pr + r + 1.0);
                if bulges && inside && clear {
                    accepted = Some((c, r));
                    break 'draw;
                }
            }
        }
        let (c, r) = accepted.ok_or_else(|| {
            Error::Generation(format!(
                "could not place lesion {li} of case {case_index} inside {dims:?}"
            ))
        })?;
        placed.push((c, r));
        field.splat_sphere(c, r, 2.0 * min_vox);

        let mut voxels = Vec::new();
        let lo = [0, 1, 2].map(|a| ((c[a] - r) / spacing[a]).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| (((c[a] + r) / spacing[a]).ceil() as usize).min(dims[a] - 1));
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]];
                    if dist3(p, c) <= r {
                        voxels.push([z, y, x]);
                        *lesion_mask.get_mut(z, y, x) = true;
                    }
                }
            }
        }
        let cube = if voxels.is_empty() {
            // sub-voxel sphere between centres; fall back to the analytic cube
            BoundingCube::new(c, 2.0 * r)
        } else {
            voxels_to_cube(&voxels, spacing)
        };
        lesions.push(LesionGT {
            center_mm: cube.center_mm,
            side_mm: cube.side_mm,
            diameter_mm: 2.0 * r,
        });
    }

    let artery_mask = if params.lesion_in_artery_mask {
        let mut m = vessel_mask;
        for (a, &l) in m.as_mut_slice().iter_mut().zip(lesion_mask.as_slice()) {
            *a |= l;
        }
        m
    } else {
        vessel_mask
    };

    let band = rng.random_range(VESSEL_BAND.0..VESSEL_BAND.1);
    let noise = Normal::new(0.0f32, params.noise_std as f32)
        .map_err(|e| Error::InvalidParams(format!("noise_std: {e}")))?;
    let mut noise_rng = rng::stream(params.seed, &[purpose::PHANTOM, case_index, 1]);
    let edge = min_vox as f32;
    let volume = field.field.map(|&d| {
        let occ = (0.5 - d / edge).clamp(0.0, 1.0);
        let clean = BACKGROUND_LEVEL + (band - BACKGROUND_LEVEL) * occ;
        let n = if params.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
        (clean + n).clamp(0.0, 1.0)
    });

    Ok(Case {
        case_id: format!("case_{case_index:05}"),
        volume,
        artery_mask,
        spacing_mm: spacing,
        is_healthy: lesions.is_empty(),
        lesions,
    })
}
