//! Signed distance maps, component-to-cube conversion and cube overlap.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::grid::{Grid3, Spacing};

/// Distances below this clip value (mm) are saturated before scaling.
pub const DIST_CLIP_MIN_MM: f64 = -2.0;
/// Distances above this clip value (mm) are saturated before scaling.
pub const DIST_CLIP_MAX_MM: f64 = 20.0;

/// Axis-aligned cube in world millimetres (`[z, y, x]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingCube {
    pub center_mm: [f64; 3],
    pub side_mm: f64,
}

impl BoundingCube {
    pub fn new(center_mm: [f64; 3], side_mm: f64) -> Self {
        Self { center_mm, side_mm }
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.center_mm[axis] - 0.5 * self.side_mm
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.center_mm[axis] + 0.5 * self.side_mm
    }

    pub fn volume(&self) -> f64 {
        self.side_mm.powi(3)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo(a) - 1e-9 && p[a] <= self.hi(a) + 1e-9)
    }
}

/// Signed Euclidean distance (mm) to the artery boundary.
///
/// Outside the artery the value is the distance from the voxel centre to the
/// nearest artery voxel centre. Inside, it is minus the distance to the
/// nearest artery voxel that touches background (6-neighbourhood, with the
/// grid exterior counted as background), so boundary voxels read exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub values: Grid3<f64>,
    pub spacing_mm: Spacing,
    /// False when the mask had no foreground; every value is then `+inf`.
    pub has_artery: bool,
}

impl DistanceMap {
    /// Model-input representation: clipped to `[-2, 20]` mm, scaled to `[-0.1, 1.0]`.
    pub fn scaled(&self) -> Grid3<f32> {
        self.values.map(|&d| scale_distance(d))
    }
}

#[inline]
pub fn scale_distance(d_mm: f64) -> f32 {
    (d_mm.clamp(DIST_CLIP_MIN_MM, DIST_CLIP_MAX_MM) / DIST_CLIP_MAX_MM) as f32
}

/// Exact squared EDT along one line with sample spacing `h`
/// (Felzenszwalb & Huttenlocher lower envelope). `f` holds squared
/// distances in mm^2, `f64::INFINITY` for "no site".
fn edt_1d(f: &mut [f64], h: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * h;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let pq = pos(q);
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let r = v[k as usize];
            let pr = pos(r);
            let s = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out[..n].fill(f64::INFINITY);
    } else {
        let mut j = 0usize;
        for (q, o) in out.iter_mut().enumerate().take(n) {
            let pq = pos(q);
            while z[j + 1] < pq {
                j += 1;
            }
            let r = v[j];
            let d = pq - pos(r);
            *o = d * d + f[r];
        }
    }
    f[..n].copy_from_slice(&out[..n]);
}

/// Squared EDT (mm^2) to the set of `true` sites, separable over the three axes.
fn squared_edt(sites: &Grid3<bool>, spacing: Spacing) -> Grid3<f64> {
    let dims = sites.dims();
    let mut g = sites.map(|&s| if s { 0.0 } else { f64::INFINITY });
    let maxn = dims.iter().copied().max().unwrap_or(0);
    let mut line = vec![0.0; maxn];
    let mut v = vec![0usize; maxn];
    let mut zb = vec![0.0; maxn + 1];
    let mut out = vec![0.0; maxn];
    let [nz, ny, nx] = dims;
    let data = g.as_mut_slice();
    // x lines are contiguous
    for zy in 0..nz * ny {
        let row = &mut data[zy * nx..(zy + 1) * nx];
        edt_1d(row, spacing[2], &mut v, &mut zb, &mut out);
    }
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = data[(z * ny + y) * nx + x];
            }
            edt_1d(&mut line[..ny], spacing[1], &mut v, &mut zb, &mut out);
            for y in 0..ny {
                data[(z * ny + y) * nx + x] = line[y];
            }
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = data[(z * ny + y) * nx + x];
            }
            edt_1d(&mut line[..nz], spacing[0], &mut v, &mut zb, &mut out);
            for z in 0..nz {
                data[(z * ny + y) * nx + x] = line[z];
            }
        }
    }
    g
}

/// Foreground voxels with at least one background 6-neighbour; the grid
/// exterior counts as background.
pub fn boundary_voxels(mask: &Grid3<bool>) -> Grid3<bool> {
    let [nz, ny, nx] = mask.dims();
    let mut out = Grid3::filled(mask.dims(), false);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !*mask.get(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
                let b = edge
                    || !*mask.get(z - 1, y, x)
                    || !*mask.get(z + 1, y, x)
                    || !*mask.get(z, y - 1, x)
                    || !*mask.get(z, y + 1, x)
                    || !*mask.get(z, y, x - 1)
                    || !*mask.get(z, y, x + 1);
                *out.get_mut(z, y, x) = b;
            }
        }
    }
    out
}

/// Exact signed Euclidean distance map under anisotropic spacing, linear in
/// the voxel count. Negative (or zero) inside the mask, positive outside.
pub fn signed_distance_map(mask: &Grid3<bool>, spacing_mm: Spacing) -> DistanceMap {
    let has_artery = mask.as_slice().iter().any(|&m| m);
    if !has_artery {
        return DistanceMap {
            values: Grid3::filled(mask.dims(), f64::INFINITY),
            spacing_mm,
            has_artery,
        };
    }
    let outside = squared_edt(mask, spacing_mm);
    let inside = squared_edt(&boundary_voxels(mask), spacing_mm);
    let mut values = outside;
    for ((v, &m), &di) in values
        .as_mut_slice()
        .iter_mut()
        .zip(mask.as_slice())
        .zip(inside.as_slice())
    {
        *v = if m { -di.sqrt() } else { v.sqrt() };
    }
    DistanceMap {
        values,
        spacing_mm,
        has_artery,
    }
}

/// 26-connected components of `mask`, each converted to its tight bounding
/// cube. Components are ordered by their first voxel in scan order.
pub fn mask_to_cubes(mask: &Grid3<bool>, spacing_mm: Spacing) -> Vec<BoundingCube> {
    connected_components(mask)
        .iter()
        .map(|voxels| voxels_to_cube(voxels, spacing_mm))
        .collect()
}

/// Tight bounding box of the voxel set, expanded symmetrically about its
/// centre to a cube whose side is the largest box extent.
pub fn voxels_to_cube(voxels: &[[usize; 3]], spacing_mm: Spacing) -> BoundingCube {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for v in voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let mut center = [0.0; 3];
    let mut side: f64 = 0.0;
    for a in 0..3 {
        center[a] = 0.5 * (lo[a] + hi[a]) as f64 * spacing_mm[a];
        side = side.max((hi[a] - lo[a] + 1) as f64 * spacing_mm[a]);
    }
    BoundingCube::new(center, side)
}

/// Voxel lists of the 26-connected components, in first-voxel scan order.
pub fn connected_components(mask: &Grid3<bool>) -> Vec<Vec<[usize; 3]>> {
    let dims = mask.dims();
    let mut seen = Grid3::filled(dims, false);
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask.as_slice()[start] || seen.as_slice()[start] {
            continue;
        }
        seen.as_mut_slice()[start] = true;
        queue.push_back(mask.coord(start));
        let mut comp = Vec::new();
        while let Some(c) = queue.pop_front() {
            comp.push(c);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let p = [c[0] as isize + dz, c[1] as isize + dy, c[2] as isize + dx];
                        if !mask.contains(p) {
                            continue;
                        }
                        let i = mask.index(p[0] as usize, p[1] as usize, p[2] as usize);
                        if mask.as_slice()[i] && !seen.as_slice()[i] {
                            seen.as_mut_slice()[i] = true;
                            queue.push_back([p[0] as usize, p[1] as usize, p[2] as usize]);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Intersection over union of two axis-aligned cubes.
pub fn cube_iou(a: &BoundingCube, b: &BoundingCube) -> f64 {
    let mut inter = 1.0;
    for axis in 0..3 {
        let w = a.hi(axis).min(b.hi(axis)) - a.lo(axis).max(b.lo(axis));
        if w <= 0.0 {
            return 0.0;
        }
        inter *= w;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
