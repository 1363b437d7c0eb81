//! Separable N-D FFTs on the periodic voxel grid.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Cached forward/inverse plans for one grid shape.
///
/// Axes of length 1 are skipped, so `nz = 1` grids are plain 2D transforms.
#[derive(Clone)]
pub struct FftGrid {
    dims: [usize; 3],
    forward: [Option<Arc<dyn Fft<f64>>>; 3],
    inverse: [Option<Arc<dyn Fft<f64>>>; 3],
}

impl std::fmt::Debug for FftGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftGrid").field("dims", &self.dims).finish()
    }
}

impl FftGrid {
    pub fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let mut forward: [Option<Arc<dyn Fft<f64>>>; 3] = [None, None, None];
        let mut inverse: [Option<Arc<dyn Fft<f64>>>; 3] = [None, None, None];
        for a in 0..3 {
            if dims[a] > 1 {
                forward[a] = Some(planner.plan_fft_forward(dims[a]));
                inverse[a] = Some(planner.plan_fft_inverse(dims[a]));
            }
        }
        FftGrid {
            dims,
            forward,
            inverse,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.forward);
    }

    /// Inverse transform in place, scaled by `1/N` so it undoes [`FftGrid::forward`].
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inverse);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut spectrum);
        spectrum.into_iter().map(|c| c.re).collect()
    }

    /// Circular cross-correlation `out[v] = sum_u k[u] g[v + u]` from spectra.
    ///
    /// `kernel_hat` is the spectrum of a kernel embedded with
    /// [`crate::volume::Kernel::embed_wrapped`].
    pub fn correlate(&self, kernel_hat: &[Complex64], image_hat: &[Complex64]) -> Vec<f64> {
        let prod: Vec<Complex64> = kernel_hat
            .iter()
            .zip(image_hat)
            .map(|(k, g)| k.conj() * g)
            .collect();
        self.inverse_real(prod)
    }

    /// Signed wrapped frequency index along `axis` for bin `k`.
    #[inline]
    pub fn signed_index(&self, axis: usize, k: usize) -> f64 {
        signed_index(self.dims[axis], k)
    }

    fn run(&self, data: &mut [Complex64], plans: &[Option<Arc<dyn Fft<f64>>>; 3]) {
        let [nx, ny, nz] = self.dims;
        assert_eq!(data.len(), nx * ny * nz, "buffer does not match grid");
        if let Some(p) = &plans[0] {
            p.process(data);
        }
        if let Some(p) = &plans[1] {
            let mut line = vec![Complex64::default(); ny];
            let mut scratch = vec![Complex64::default(); p.get_inplace_scratch_len()];
            for z in 0..nz {
                let plane = &mut data[z * nx * ny..(z + 1) * nx * ny];
                for x in 0..nx {
                    for y in 0..ny {
                        line[y] = plane[x + nx * y];
                    }
                    p.process_with_scratch(&mut line, &mut scratch);
                    for y in 0..ny {
                        plane[x + nx * y] = line[y];
                    }
                }
            }
        }
        if let Some(p) = &plans[2] {
            let plane = nx * ny;
            let mut line = vec![Complex64::default(); nz];
            let mut scratch = vec![Complex64::default(); p.get_inplace_scratch_len()];
            for i in 0..plane {
                for z in 0..nz {
                    line[z] = data[i + plane * z];
                }
                p.process_with_scratch(&mut line, &mut scratch);
                for z in 0..nz {
                    data[i + plane * z] = line[z];
                }
            }
        }
    }
}

#[inline]
pub fn signed_index(n: usize, k: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Kernel;

    fn naive_dft(dims: [usize; 3], data: &[f64]) -> Vec<Complex64> {
        let [nx, ny, nz] = dims;
        let mut out = vec![Complex64::default(); data.len()];
        for kz in 0..nz {
            for ky in 0..ny {
                for kx in 0..nx {
                    let mut acc = Complex64::default();
                    for z in 0..nz {
                        for y in 0..ny {
                            for x in 0..nx {
                                let ph = -2.0
                                    * std::f64::consts::PI
                                    * ((kx * x) as f64 / nx as f64
                                        + (ky * y) as f64 / ny as f64
                                        + (kz * z) as f64 / nz as f64);
                                acc += data[x + nx * (y + ny * z)] * Complex64::from_polar(1.0, ph);
                            }
                        }
                    }
                    out[kx + nx * (ky + ny * kz)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        let dims = [5, 4, 3];
        let data: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let grid = FftGrid::new(dims);
        let fast = grid.forward_real(&data);
        let slow = naive_dft(dims, &data);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
        let back = grid.inverse_real(fast);
        for (a, b) in back.iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correlate_matches_direct_sum() {
        let dims = [8, 7, 4];
        let grid = FftGrid::new(dims);
        let g: Vec<f64> = (0..grid.len()).map(|i| ((i * 13) % 17) as f64).collect();
        let k = Kernel::from_fn([1, 2, 1], |x, y, z| (x + 2 * y - z) as f64 + 0.5);
        let out = grid.correlate(&grid.forward_real(&k.embed_wrapped(dims)), &grid.forward_real(&g));
        let at = |x: isize, y: isize, z: isize| {
            let xi = x.rem_euclid(8) as usize;
            let yi = y.rem_euclid(7) as usize;
            let zi = z.rem_euclid(4) as usize;
            g[xi + 8 * (yi + 7 * zi)]
        };
        for &(x, y, z) in &[(0usize, 0usize, 0usize), (3, 4, 2), (7, 6, 3)] {
            let mut direct = 0.0;
            k.for_each(|dx, dy, dz, w| direct += w * at(x as isize + dx, y as isize + dy, z as isize + dz));
            let got = out[x + 8 * (y + 7 * z)];
            assert!((got - direct).abs() < 1e-9, "{got} vs {direct}");
        }
    }

    #[test]
    fn flat_axes_are_skipped() {
        let grid = FftGrid::new([4, 4, 1]);
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let spec = grid.forward_real(&data);
        assert!((spec[0].re - 120.0).abs() < 1e-12);
    }
}
