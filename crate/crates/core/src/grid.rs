//! Dense 3D grids stored in z-major (z, y, x) order.

use serde::{Deserialize, Serialize};

/// Grid extent as `[z, y, x]`.
pub type Dims = [usize; 3];

/// Physical voxel size in millimetres, `[z, y, x]`.
pub type Spacing = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }
}

impl<T> Grid3<T> {
    /// Wraps an existing buffer. Returns `None` when the length does not match `dims`.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Option<Self> {
        (data.len() == dims[0] * dims[1] * dims[2]).then_some(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Inverse of [`Grid3::index`].
    #[inline]
    pub fn coord(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let z = i / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> &T {
        &self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn get_mut(&mut self, z: usize, y: usize, x: usize) -> &mut T {
        let i = self.index(z, y, x);
        &mut self.data[i]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn contains(&self, p: [isize; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }
}

impl<T: Copy + Default> Grid3<T> {
    /// Copies the sub-block starting at `origin` with extent `size`.
    /// Voxels outside the parent read as `fill`.
    pub fn crop(&self, origin: [isize; 3], size: Dims, fill: T) -> Grid3<T> {
        let mut out = Grid3::filled(size, fill);
        for z in 0..size[0] {
            let pz = origin[0] + z as isize;
            if pz < 0 || pz as usize >= self.dims[0] {
                continue;
            }
            for y in 0..size[1] {
                let py = origin[1] + y as isize;
                if py < 0 || py as usize >= self.dims[1] {
                    continue;
                }
                for x in 0..size[2] {
                    let px = origin[2] + x as isize;
                    if px < 0 || px as usize >= self.dims[2] {
                        continue;
                    }
                    *out.get_mut(z, y, x) = *self.get(pz as usize, py as usize, px as usize);
                }
            }
        }
        out
    }
}

/// World position (mm) of a voxel centre. Voxel `[0, 0, 0]` sits at the origin.
#[inline]
pub fn voxel_to_mm(v: [f64; 3], spacing: Spacing) -> [f64; 3] {
    [v[0] * spacing[0], v[1] * spacing[1], v[2] * spacing[2]]
}

#[inline]
pub fn mm_to_voxel(p: [f64; 3], spacing: Spacing) -> [f64; 3] {
    [p[0] / spacing[0], p[1] / spacing[1], p[2] / spacing[2]]
}

#[inline]
pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coord_are_inverse() {
        let g = Grid3::filled([3, 4, 5], 0u8);
        for i in 0..g.len() {
            let [z, y, x] = g.coord(i);
            assert_eq!(g.index(z, y, x), i);
        }
    }

    #[test]
    fn crop_pads_outside() {
        let mut g = Grid3::filled([2, 2, 2], 1.0f32);
        *g.get_mut(1, 1, 1) = 5.0;
        let c = g.crop([1, 1, 1], [2, 2, 2], -1.0);
        assert_eq!(*c.get(0, 0, 0), 5.0);
        assert_eq!(*c.get(1, 1, 1), -1.0);
    }
}
