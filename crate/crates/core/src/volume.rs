//! Voxel grids and small centered kernels.
//!
//! Everything is stored x-fastest: `index = x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pitch that maps the 6-voxel sphere onto ~0.13 degrees of visual angle.
pub const DEFAULT_PITCH_DVA: f64 = 0.13 / 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    /// Voxel counts `(nx, ny, nz)`.
    pub dims: [usize; 3],
    /// Degrees of visual angle per voxel, isotropic in-plane.
    pub pitch_dva: f64,
    /// Index of slice 0 within the parent stack (non-zero for extracted slices).
    #[serde(default)]
    pub first_slice: usize,
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], pitch_dva: f64) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid("dims", format!("all dims must be >= 1, got {dims:?}")));
        }
        if !(pitch_dva.is_finite() && pitch_dva > 0.0) {
            return Err(Error::invalid("pitch_dva", format!("must be finite and > 0, got {pitch_dva}")));
        }
        Ok(VolumeGeometry {
            dims,
            pitch_dva,
            first_slice: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn is_2d(&self) -> bool {
        self.dims[2] == 1
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let plane = self.plane_len();
        let z = index / plane;
        let rem = index % plane;
        [rem % self.dims[0], rem / self.dims[0], z]
    }

    pub fn contains(&self, loc: [usize; 3]) -> bool {
        loc.iter().zip(self.dims.iter()).all(|(&l, &d)| l < d)
    }

    pub fn voxels_per_dva(&self) -> f64 {
        1.0 / self.pitch_dva
    }

    /// Nyquist frequency in cycles per degree.
    pub fn nyquist_cpd(&self) -> f64 {
        0.5 / self.pitch_dva
    }

    /// In-plane distance between two voxels, in degrees of visual angle.
    pub fn planar_distance_dva(&self, a: [usize; 3], b: [usize; 3]) -> f64 {
        let dx = a[0] as f64 - b[0] as f64;
        let dy = a[1] as f64 - b[1] as f64;
        (dx * dx + dy * dy).sqrt() * self.pitch_dva
    }

    pub fn with_dims(&self, dims: [usize; 3]) -> Self {
        VolumeGeometry { dims, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: VolumeGeometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(geometry: VolumeGeometry) -> Self {
        Volume {
            data: vec![0.0; geometry.len()],
            geometry,
        }
    }

    pub fn filled(geometry: VolumeGeometry, value: f64) -> Self {
        Volume {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    pub fn from_data(geometry: VolumeGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "volume data has {} voxels, geometry {:?} needs {}",
                data.len(),
                geometry.dims,
                geometry.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("voxels", format!("non-finite value at index {i}")));
        }
        Ok(Volume { geometry, data })
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = v;
    }

    /// Copy of slice `z` as a 2D volume.
    pub fn plane(&self, z: usize) -> Volume {
        let n = self.geometry.plane_len();
        let mut geometry = self.geometry.with_dims([self.geometry.dims[0], self.geometry.dims[1], 1]);
        geometry.first_slice = self.geometry.first_slice + z;
        Volume {
            geometry,
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }
}

/// A small dense array addressed by signed offsets from a center voxel.
///
/// Signal profiles, channel patches and templates are all kernels; the
/// center is the voxel that lands on the scanned location.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    dims: [usize; 3],
    center: [usize; 3],
    data: Vec<f64>,
}

impl Kernel {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Kernel {
            center: [dims[0] / 2, dims[1] / 2, dims[2] / 2],
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
            dims,
        }
    }

    /// Odd-sized kernel with half-widths `half`, filled from offsets.
    pub fn from_fn(half: [usize; 3], f: impl Fn(isize, isize, isize) -> f64) -> Self {
        let dims = [2 * half[0] + 1, 2 * half[1] + 1, 2 * half[2] + 1];
        let mut k = Kernel::zeros(dims);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let v = f(
                        x as isize - half[0] as isize,
                        y as isize - half[1] as isize,
                        z as isize - half[2] as isize,
                    );
                    k.data[x + dims[0] * (y + dims[1] * z)] = v;
                }
            }
        }
        k
    }

    pub fn from_data(dims: [usize; 3], center: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!("kernel data length {} does not match dims {dims:?}", data.len())));
        }
        if (0..3).any(|a| center[a] >= dims[a]) {
            return Err(Error::Shape(format!("kernel center {center:?} outside dims {dims:?}")));
        }
        Ok(Kernel { dims, center, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn center(&self) -> [usize; 3] {
        self.center
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Smallest and largest offsets along each axis.
    pub fn extent(&self) -> ([isize; 3], [isize; 3]) {
        let lo = [
            -(self.center[0] as isize),
            -(self.center[1] as isize),
            -(self.center[2] as isize),
        ];
        let hi = [
            (self.dims[0] - 1 - self.center[0]) as isize,
            (self.dims[1] - 1 - self.center[1]) as isize,
            (self.dims[2] - 1 - self.center[2]) as isize,
        ];
        (lo, hi)
    }

    #[inline]
    pub fn get(&self, dx: isize, dy: isize, dz: isize) -> f64 {
        let x = dx + self.center[0] as isize;
        let y = dy + self.center[1] as isize;
        let z = dz + self.center[2] as isize;
        if x < 0 || y < 0 || z < 0 {
            return 0.0;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return 0.0;
        }
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Visits every stored entry as `(dx, dy, dz, value)`.
    pub fn for_each(&self, mut f: impl FnMut(isize, isize, isize, f64)) {
        let (lo, _) = self.extent();
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                let row = self.dims[0] * (y + self.dims[1] * z);
                for x in 0..self.dims[0] {
                    f(
                        x as isize + lo[0],
                        y as isize + lo[1],
                        z as isize + lo[2],
                        self.data[row + x],
                    );
                }
            }
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Kernel {
        Kernel {
            dims: self.dims,
            center: self.center,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Inner product of two kernels aligned at their centers.
    pub fn dot(&self, other: &Kernel) -> f64 {
        let mut acc = 0.0;
        self.for_each(|dx, dy, dz, v| {
            if v != 0.0 {
                acc += v * other.get(dx, dy, dz);
            }
        });
        acc
    }

    /// The 2D plane at offset `dz`, as a kernel with `nz = 1`.
    pub fn plane(&self, dz: isize) -> Kernel {
        let mut out = Kernel {
            dims: [self.dims[0], self.dims[1], 1],
            center: [self.center[0], self.center[1], 0],
            data: vec![0.0; self.dims[0] * self.dims[1]],
        };
        let z = dz + self.center[2] as isize;
        if z >= 0 && (z as usize) < self.dims[2] {
            let n = self.dims[0] * self.dims[1];
            let z = z as usize;
            out.data.copy_from_slice(&self.data[z * n..(z + 1) * n]);
        }
        out
    }

    /// Re-samples onto an odd box with the given half-widths (zero padded or cropped).
    pub fn recentered(&self, half: [usize; 3]) -> Kernel {
        Kernel::from_fn(half, |dx, dy, dz| self.get(dx, dy, dz))
    }

    /// Stacks 2D kernels of identical shape along z, centered on the middle plane.
    pub fn stack(planes: &[Kernel]) -> Result<Kernel> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero planes".into()))?;
        let [nx, ny, _] = first.dims;
        let n = nx * ny;
        let mut data = Vec::with_capacity(n * planes.len());
        for p in planes {
            if p.dims != [nx, ny, 1] || p.center[..2] != first.center[..2] {
                return Err(Error::Shape("stacked planes must share in-plane shape and center".into()));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Kernel {
            dims: [nx, ny, planes.len()],
            center: [first.center[0], first.center[1], planes.len() / 2],
            data,
        })
    }

    /// Places the kernel on a periodic grid with offset zero at index 0.
    ///
    /// Offsets outside the grid's centered range `[-n/2, n - n/2 - 1]` are
    /// dropped, so kernels larger than the grid are clipped, never aliased.
    pub fn embed_wrapped(&self, grid: [usize; 3]) -> Vec<f64> {
        let mut out = vec![0.0; grid[0] * grid[1] * grid[2]];
        let lo: [isize; 3] = [
            -((grid[0] / 2) as isize),
            -((grid[1] / 2) as isize),
            -((grid[2] / 2) as isize),
        ];
        let hi: [isize; 3] = [
            (grid[0] - grid[0] / 2) as isize - 1,
            (grid[1] - grid[1] / 2) as isize - 1,
            (grid[2] - grid[2] / 2) as isize - 1,
        ];
        self.for_each(|dx, dy, dz, v| {
            if v == 0.0 {
                return;
            }
            let d = [dx, dy, dz];
            if (0..3).any(|a| d[a] < lo[a] || d[a] > hi[a]) {
                return;
            }
            let ix = dx.rem_euclid(grid[0] as isize) as usize;
            let iy = dy.rem_euclid(grid[1] as isize) as usize;
            let iz = dz.rem_euclid(grid[2] as isize) as usize;
            out[ix + grid[0] * (iy + grid[1] * iz)] = v;
        });
        out
    }

    /// Inverse of [`Kernel::embed_wrapped`]: reads offsets within `half` of the origin.
    pub fn from_wrapped(field: &[f64], grid: [usize; 3], half: [usize; 3]) -> Kernel {
        Kernel::from_fn(half, |dx, dy, dz| {
            let ix = dx.rem_euclid(grid[0] as isize) as usize;
            let iy = dy.rem_euclid(grid[1] as isize) as usize;
            let iz = dz.rem_euclid(grid[2] as isize) as usize;
            field[ix + grid[0] * (iy + grid[1] * iz)]
        })
    }
}
