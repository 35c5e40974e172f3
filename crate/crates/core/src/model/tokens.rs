//! Patch tokenization and the parameter-free 3D sinusoidal position code.

use crate::error::{Error, Result};
use crate::sampling::{patch_coord, patch_index, CropSample, CROP, CROP_VOXELS, GRID, N_CHANNELS, N_PATCHES, PATCH};

use super::nn::Scalar;

/// Values per token: 4^3 voxels in each of the two channels.
pub const TOKEN_LEN: usize = PATCH * PATCH * PATCH * N_CHANNELS;

/// Sine/cosine code of a `[z, y, x]` coordinate. Each axis gets a group of
/// `dim / 6` sine channels followed by as many cosine channels at geometric
/// frequencies; widths that are not a multiple of 6 leave the trailing
/// `dim % 6` channels at zero.
pub fn positional_encoding(coord: [usize; 3], dim: usize) -> Result<Vec<f64>> {
    if dim < 6 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding width {dim} must be even and at least 6"
        )));
    }
    let half = dim / 6;
    let per_axis = 2 * half;
    let mut out = vec![0.0; dim];
    for (axis, &p) in coord.iter().enumerate() {
        let base = axis * per_axis;
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            let a = p as f64 * omega;
            out[base + i] = a.sin();
            out[base + half + i] = a.cos();
        }
    }
    Ok(out)
}

/// Precomputed encodings for every coordinate of the 16^3 patch grid.
#[derive(Debug, Clone)]
pub struct PosTable<F> {
    dim: usize,
    table: Vec<F>,
}

impl<F: Scalar> PosTable<F> {
    pub fn new(dim: usize) -> Result<Self> {
        let mut table = Vec::with_capacity(N_PATCHES * dim);
        for i in 0..N_PATCHES {
            let pe = positional_encoding(patch_coord(i), dim)?;
            table.extend(pe.into_iter().map(F::of));
        }
        Ok(Self { dim, table })
    }

    pub fn row(&self, coord: [usize; 3]) -> &[F] {
        let i = patch_index(coord[0], coord[1], coord[2]);
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Splits a two-channel 64^3 crop into 4096 tokens of 128 raw values
/// (channel, dz, dy, dx order within a token), tokens in z-major patch order.
pub fn patchify(channels: &[f32]) -> Vec<f32> {
    assert_eq!(channels.len(), N_CHANNELS * CROP_VOXELS);
    let mut out = vec![0.0; N_PATCHES * TOKEN_LEN];
    for t in 0..N_PATCHES {
        let [pz, py, px] = patch_coord(t);
        let dst = &mut out[t * TOKEN_LEN..(t + 1) * TOKEN_LEN];
        let mut k = 0;
        for c in 0..N_CHANNELS {
            for dz in 0..PATCH {
                for dy in 0..PATCH {
                    let z = pz * PATCH + dz;
                    let y = py * PATCH + dy;
                    let src = c * CROP_VOXELS + (z * CROP + y) * CROP + px * PATCH;
                    dst[k..k + PATCH].copy_from_slice(&channels[src..src + PATCH]);
                    k += PATCH;
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f32]) -> Vec<f32> {
    assert_eq!(tokens.len(), N_PATCHES * TOKEN_LEN);
    let mut out = vec![0.0; N_CHANNELS * CROP_VOXELS];
    for t in 0..N_PATCHES {
        let [pz, py, px] = patch_coord(t);
        let src = &tokens[t * TOKEN_LEN..(t + 1) * TOKEN_LEN];
        let mut k = 0;
        for c in 0..N_CHANNELS {
            for dz in 0..PATCH {
                for dy in 0..PATCH {
                    let z = pz * PATCH + dz;
                    let y = py * PATCH + dy;
                    let dst = c * CROP_VOXELS + (z * CROP + y) * CROP + px * PATCH;
                    out[dst..dst + PATCH].copy_from_slice(&src[k..k + PATCH]);
                    k += PATCH;
                }
            }
        }
    }
    out
}

/// Raw (unprojected) tokens fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInput<F> {
    pub coords: Vec<[usize; 3]>,
    /// `coords.len() x TOKEN_LEN`.
    pub raw: Vec<F>,
}

impl<F: Scalar> TokenInput<F> {
    /// Tokens of `crop` whose patch index satisfies `keep`.
    pub fn from_crop(crop: &CropSample, keep: impl Fn(usize) -> bool) -> Self {
        Self::from_patches(&patchify(&crop.channels), keep)
    }

    pub fn from_patches(patches: &[f32], keep: impl Fn(usize) -> bool) -> Self {
        let mut coords = Vec::new();
        let mut raw = Vec::new();
        for t in 0..N_PATCHES {
            if keep(t) {
                coords.push(patch_coord(t));
                raw.extend(patches[t * TOKEN_LEN..(t + 1) * TOKEN_LEN].iter().map(|&v| F::of(v as f64)));
            }
        }
        Self { coords, raw }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Same tokens in canonical (z-major coordinate) order, plus the
    /// permutation applied: `order[i]` is the source index of row `i`.
    pub fn canonical(&self) -> (Self, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.coords[i]);
        let coords = order.iter().map(|&i| self.coords[i]).collect();
        let mut raw = Vec::with_capacity(self.raw.len());
        for &i in &order {
            raw.extend_from_slice(&self.raw[i * TOKEN_LEN..(i + 1) * TOKEN_LEN]);
        }
        (Self { coords, raw }, order)
    }
}

/// Grid coordinate of every patch, scan order.
pub fn all_coords() -> Vec<[usize; 3]> {
    (0..GRID * GRID * GRID).map(patch_coord).collect()
}
