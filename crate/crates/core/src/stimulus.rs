//! Power-law noise backgrounds, signal profiles and trial stimuli.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_index, FftGrid};
use crate::rng::SeedStream;
use crate::volume::{Kernel, Volume, VolumeGeometry};

/// Recorded in stimulus metadata: the filtered field is rescaled so its RMS
/// about zero equals `sigma` before the mean is added.
pub const NORMALIZATION_FLAG: &str = "post-filter-rms";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Power-spectrum exponent: power falls as `1/f^exponent`.
    pub exponent: f64,
    pub mean: f64,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            exponent: 2.8,
            mean: 128.0,
            sigma: 25.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.exponent.is_finite() && self.exponent >= 0.0) {
            return Err(Error::invalid("noise.exponent", format!("must be finite and >= 0, got {}", self.exponent)));
        }
        if !self.mean.is_finite() {
            return Err(Error::invalid("noise.mean", "must be finite"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::invalid("noise.sigma", format!("must be finite and > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        NoiseSpec { seed, ..*self }
    }
}

/// Filter amplitude `max(|k|, 1)^(-exponent/2)` on wrapped integer indices.
///
/// The DC bin gets the amplitude of the first harmonic, so the background
/// mean fluctuates from trial to trial like any other low frequency.
pub fn power_law_amplitude(dims: [usize; 3], exponent: f64) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for kz in 0..nz {
        let fz = signed_index(nz, kz);
        for ky in 0..ny {
            let fy = signed_index(ny, ky);
            for kx in 0..nx {
                let fx = signed_index(nx, kx);
                let r = (fx * fx + fy * fy + fz * fz).sqrt().max(1.0);
                out.push(r.powf(-0.5 * exponent));
            }
        }
    }
    out
}

/// Stationary noise power per DFT bin.
///
/// With this normalization the voxel covariance is the circulant matrix with
/// eigenvalues `power`, so voxel variance is `mean(power)` and
/// `E|DFT(n)_k|^2 = N * power_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpectrum {
    dims: [usize; 3],
    power: Vec<f64>,
}

impl NoiseSpectrum {
    pub fn power_law(spec: &NoiseSpec, dims: [usize; 3]) -> Self {
        let amp = power_law_amplitude(dims, spec.exponent);
        let mean_sq = amp.iter().map(|a| a * a).sum::<f64>() / amp.len() as f64;
        let var = spec.sigma * spec.sigma;
        NoiseSpectrum {
            dims,
            power: amp.iter().map(|a| var * a * a / mean_sq).collect(),
        }
    }

    pub fn white(sigma: f64, dims: [usize; 3]) -> Self {
        NoiseSpectrum {
            dims,
            power: vec![sigma * sigma; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_power(dims: [usize; 3], power: Vec<f64>) -> Result<Self> {
        if power.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape("power spectrum length does not match dims".into()));
        }
        if power.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("power", "entries must be finite and >= 0"));
        }
        Ok(NoiseSpectrum { dims, power })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    pub fn variance(&self) -> f64 {
        self.power.iter().sum::<f64>() / self.power.len() as f64
    }

    /// Spectrum of a single slice: the mean over the slice-axis frequencies.
    pub fn marginal_2d(&self) -> NoiseSpectrum {
        let [nx, ny, nz] = self.dims;
        let plane = nx * ny;
        let mut power = vec![0.0; plane];
        for z in 0..nz {
            for (p, v) in power.iter_mut().zip(&self.power[z * plane..(z + 1) * plane]) {
                *p += v;
            }
        }
        for p in power.iter_mut() {
            *p /= nz as f64;
        }
        NoiseSpectrum {
            dims: [nx, ny, 1],
            power,
        }
    }

    /// Power with values below `1e-12 * max` raised to that floor.
    pub fn floored(&self) -> Vec<f64> {
        let max = self.power.iter().copied().fold(0.0, f64::max);
        let floor = 1e-12 * max;
        self.power.iter().map(|&p| p.max(floor)).collect()
    }

    /// `w^T K w` for a field with spectrum `w_hat`.
    pub fn quadratic_form(&self, w_hat: &[Complex64]) -> f64 {
        let n = self.power.len() as f64;
        self.power.iter().zip(w_hat).map(|(p, w)| p * w.norm_sqr()).sum::<f64>() / n
    }

    /// `s^T K^{-1} s` with the floored spectrum.
    pub fn inverse_quadratic_form(&self, s_hat: &[Complex64]) -> f64 {
        let n = self.power.len() as f64;
        self.floored().iter().zip(s_hat).map(|(p, s)| s.norm_sqr() / p).sum::<f64>() / n
    }

    /// `a^T K b` for two real fields given by their spectra.
    pub fn cross_form(&self, a_hat: &[Complex64], b_hat: &[Complex64]) -> f64 {
        let n = self.power.len() as f64;
        self.power
            .iter()
            .zip(a_hat.iter().zip(b_hat))
            .map(|(p, (a, b))| p * (a.conj() * b).re)
            .sum::<f64>()
            / n
    }
}

/// A noise volume together with its DFT, so scanning does not re-transform.
#[derive(Clone, Debug)]
pub struct NoiseRealization {
    pub volume: Volume,
    pub spectrum: Vec<Complex64>,
}

fn check_noise_geometry(geom: &VolumeGeometry) -> Result<()> {
    if geom.dims[0] < 2 || geom.dims[1] < 2 {
        return Err(Error::invalid(
            "dims",
            format!("noise needs at least 2 voxels along x and y, got {:?}", geom.dims),
        ));
    }
    Ok(())
}

/// Filtered-noise spectrum (mean included at DC) for the given seed.
pub fn noise_spectrum_realization(spec: &NoiseSpec, grid: &FftGrid, amplitude: &[f64]) -> Vec<Complex64> {
    let n = grid.len();
    let mut rng = SeedStream::new(spec.seed).rng();
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    grid.forward(&mut buf);
    let mut energy = 0.0;
    for (c, a) in buf.iter_mut().zip(amplitude) {
        *c *= *a;
        energy += c.norm_sqr();
    }
    // Parseval: sum |x|^2 = energy / N, so the RMS about zero is sqrt(energy) / N.
    let rms = energy.sqrt() / n as f64;
    let gain = if rms > 0.0 { spec.sigma / rms } else { 0.0 };
    for c in buf.iter_mut() {
        *c *= gain;
    }
    buf[0] += Complex64::new(spec.mean * n as f64, 0.0);
    buf
}

/// Generates a noise volume and keeps its spectrum.
pub fn generate_noise(spec: &NoiseSpec, geom: &VolumeGeometry, grid: &FftGrid) -> Result<NoiseRealization> {
    spec.validate()?;
    check_noise_geometry(geom)?;
    if grid.dims() != geom.dims {
        return Err(Error::Shape(format!("FFT grid {:?} does not match volume {:?}", grid.dims(), geom.dims)));
    }
    let amplitude = power_law_amplitude(geom.dims, spec.exponent);
    let spectrum = noise_spectrum_realization(spec, grid, &amplitude);
    let data = grid.inverse_real(spectrum.clone());
    Ok(NoiseRealization {
        volume: Volume::from_data(*geom, data)?,
        spectrum,
    })
}

/// Gaussian field with exactly the covariance of `spectrum`, plus `mean`.
///
/// No renormalization is applied; used where a stationary field with a
/// known spectrum is needed directly (for example a single slice drawn
/// from the marginal spectrum of a stack).
pub fn generate_from_spectrum(spectrum: &NoiseSpectrum, mean: f64, seed: u64, grid: &FftGrid) -> Vec<Complex64> {
    let n = grid.len();
    let mut rng = SeedStream::new(seed).rng();
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    grid.forward(&mut buf);
    for (c, p) in buf.iter_mut().zip(spectrum.power()) {
        *c *= p.sqrt();
    }
    buf[0] += Complex64::new(mean * n as f64, 0.0);
    buf
}

pub fn generate_noise_volume(spec: &NoiseSpec, geom: &VolumeGeometry) -> Result<Volume> {
    check_noise_geometry(geom)?;
    let grid = FftGrid::new(geom.dims);
    Ok(generate_noise(spec, geom, &grid)?.volume)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    #[serde(alias = "mcalc")]
    Microcalcification,
    Mass,
}

impl SignalKind {
    pub const ALL: [SignalKind; 2] = [SignalKind::Microcalcification, SignalKind::Mass];

    /// Sphere diameter or Gaussian sigma, in voxels.
    pub fn default_size(&self) -> f64 {
        match self {
            SignalKind::Microcalcification => 6.0,
            SignalKind::Mass => 10.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SignalKind::Microcalcification => "mcalc",
            SignalKind::Mass => "mass",
        }
    }
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub kind: SignalKind,
    /// Diameter (sphere) or standard deviation (Gaussian) in voxels.
    pub size: f64,
    /// Peak amplitude as a fraction of the background mean.
    pub contrast: f64,
}

impl SignalSpec {
    pub fn new(kind: SignalKind, contrast: f64) -> Self {
        SignalSpec {
            kind,
            size: kind.default_size(),
            contrast,
        }
    }

    pub fn with_contrast(&self, contrast: f64) -> Self {
        SignalSpec { contrast, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size.is_finite() && self.size > 0.0) {
            return Err(Error::invalid("signal.size", format!("must be > 0, got {}", self.size)));
        }
        if !(self.contrast.is_finite() && self.contrast >= 0.0) {
            return Err(Error::invalid("signal.contrast", format!("must be >= 0, got {}", self.contrast)));
        }
        Ok(())
    }

    /// Half-width of the untruncated support, in voxels.
    pub fn support_half_width(&self) -> usize {
        match self.kind {
            SignalKind::Microcalcification => (self.size / 2.0).ceil() as usize,
            SignalKind::Mass => (3.0 * self.size).ceil() as usize,
        }
    }
}

/// Signal profile with peak `contrast * mean`, centered on its kernel.
///
/// The Gaussian is truncated to a cube of half-width `3 sigma`. Any axis on
/// which the support exceeds the volume is cropped to the largest centered
/// odd extent that fits (the 20-voxel-sigma mass in a 32-slice stack).
pub fn make_signal_profile(spec: &SignalSpec, mean: f64, geom: &VolumeGeometry) -> Result<Kernel> {
    spec.validate()?;
    let h = spec.support_half_width();
    let half = [
        h.min((geom.dims[0] - 1) / 2),
        h.min((geom.dims[1] - 1) / 2),
        h.min((geom.dims[2] - 1) / 2),
    ];
    if geom.dims[0] < 2 * h + 1 || geom.dims[1] < 2 * h + 1 {
        return Err(Error::invalid(
            "signal.size",
            format!("in-plane support {} voxels does not fit dims {:?}", 2 * h + 1, geom.dims),
        ));
    }
    let peak = spec.contrast * mean;
    let kernel = match spec.kind {
        SignalKind::Microcalcification => {
            let r2max = (spec.size / 2.0) * (spec.size / 2.0);
            Kernel::from_fn(half, |x, y, z| {
                let r2 = (x * x + y * y + z * z) as f64;
                if r2 <= r2max {
                    peak
                } else {
                    0.0
                }
            })
        }
        SignalKind::Mass => {
            let s2 = 2.0 * spec.size * spec.size;
            Kernel::from_fn(half, |x, y, z| {
                let r2 = (x * x + y * y + z * z) as f64;
                peak * (-r2 / s2).exp()
            })
        }
    };
    Ok(kernel)
}

/// Adds `signal` centered at `loc`; support falling outside the volume is dropped.
pub fn embed_signal(bg: &Volume, signal: &Kernel, loc: [usize; 3]) -> Result<Volume> {
    let mut out = bg.clone();
    add_kernel(&mut out, signal, loc, 1.0)?;
    Ok(out)
}

/// In-place `volume += scale * kernel` centered at `loc`, clipped at the volume faces.
pub fn add_kernel(volume: &mut Volume, kernel: &Kernel, loc: [usize; 3], scale: f64) -> Result<()> {
    let geom = *volume.geometry();
    if !geom.contains(loc) {
        return Err(Error::OutOfBounds { loc, dims: geom.dims });
    }
    let data = volume.data_mut();
    kernel.for_each(|dx, dy, dz, v| {
        if v == 0.0 {
            return;
        }
        let x = loc[0] as isize + dx;
        let y = loc[1] as isize + dy;
        let z = loc[2] as isize + dz;
        if x < 0 || y < 0 || z < 0 {
            return;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= geom.dims[0] || y >= geom.dims[1] || z >= geom.dims[2] {
            return;
        }
        data[geom.index(x, y, z)] += scale * v;
    });
    Ok(())
}

/// Inclusive box of admissible signal centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRegion {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl PlacementRegion {
    /// Centers whose full support fits, plus `extra_margin` in-plane.
    ///
    /// When the support cannot fit along the slice axis (the mass in a thin
    /// stack), the slice margin falls back to `fallback_depth` so the slice
    /// template still fits.
    pub fn for_signal(
        geom: &VolumeGeometry,
        spec: &SignalSpec,
        extra_margin: usize,
        fallback_depth: usize,
    ) -> Result<Self> {
        let h = spec.support_half_width();
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let d = geom.dims[a];
            let mut m = if a < 2 { h + extra_margin } else { h };
            if a == 2 {
                if d == 1 {
                    m = 0;
                } else if 2 * m + 1 > d {
                    m = fallback_depth.min((d - 1) / 2);
                }
            }
            if 2 * m + 1 > d {
                return Err(Error::invalid(
                    "placement",
                    format!("margin {m} leaves no admissible centers along axis {a} of {d}"),
                ));
            }
            lo[a] = m;
            hi[a] = d - 1 - m;
        }
        Ok(PlacementRegion { lo, hi })
    }

    pub fn contains(&self, loc: [usize; 3]) -> bool {
        (0..3).all(|a| loc[a] >= self.lo[a] && loc[a] <= self.hi[a])
    }

    pub fn count(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a] + 1).product()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 3] {
        [
            rng.gen_range(self.lo[0]..=self.hi[0]),
            rng.gen_range(self.lo[1]..=self.hi[1]),
            rng.gen_range(self.lo[2]..=self.hi[2]),
        ]
    }

    /// Restriction to one slice (for 2D stimuli cut from a stack).
    pub fn planar(&self) -> PlacementRegion {
        PlacementRegion {
            lo: [self.lo[0], self.lo[1], 0],
            hi: [self.hi[0], self.hi[1], 0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrialStimulus {
    pub volume: Volume,
    pub present: bool,
    pub location: Option<[usize; 3]>,
    pub signal: SignalSpec,
}

impl TrialStimulus {
    pub fn absent(volume: Volume, signal: SignalSpec) -> Self {
        TrialStimulus {
            volume,
            present: false,
            location: None,
            signal,
        }
    }

    pub fn present(bg: &Volume, profile: &Kernel, signal: SignalSpec, loc: [usize; 3]) -> Result<Self> {
        Ok(TrialStimulus {
            volume: embed_signal(bg, profile, loc)?,
            present: true,
            location: Some(loc),
            signal,
        })
    }
}

/// The signal's central slice for present trials, the middle slice otherwise.
pub fn extract_2d_slice(stim: &TrialStimulus) -> TrialStimulus {
    let nz = stim.volume.dims()[2];
    let z = stim.location.map(|l| l[2]).unwrap_or(nz / 2);
    TrialStimulus {
        volume: stim.volume.plane(z),
        present: stim.present,
        location: stim.location.map(|l| [l[0], l[1], 0]),
        signal: stim.signal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(dims: [usize; 3]) -> VolumeGeometry {
        VolumeGeometry::new(dims, crate::volume::DEFAULT_PITCH_DVA).unwrap()
    }

    #[test]
    fn rms_about_zero_is_sigma() {
        let spec = NoiseSpec {
            seed: 3,
            ..NoiseSpec::default()
        };
        let g = geom([32, 32, 8]);
        let v = generate_noise_volume(&spec, &g).unwrap();
        let ms = v.data().iter().map(|x| (x - spec.mean).powi(2)).sum::<f64>() / v.data().len() as f64;
        assert!((ms.sqrt() - spec.sigma).abs() < 1e-9);
    }

    #[test]
    fn rejects_flat_planes() {
        assert!(generate_noise_volume(&NoiseSpec::default(), &geom([1, 16, 16])).is_err());
        assert!(generate_noise_volume(&NoiseSpec::default(), &geom([16, 16, 1])).is_ok());
        let bad = NoiseSpec {
            exponent: -1.0,
            ..NoiseSpec::default()
        };
        assert!(generate_noise_volume(&bad, &geom([8, 8, 8])).is_err());
    }

    #[test]
    fn spectrum_variance_matches_sigma() {
        let s = NoiseSpectrum::power_law(&NoiseSpec::default(), [16, 16, 4]);
        assert!((s.variance() - 625.0).abs() < 1e-9);
        assert!((s.marginal_2d().variance() - 625.0).abs() < 1e-9);
    }

    #[test]
    fn sphere_support_and_peak() {
        let p = make_signal_profile(&SignalSpec::new(SignalKind::Microcalcification, 1.0), 128.0, &geom([32, 32, 32])).unwrap();
        let mut count = 0;
        p.for_each(|x, y, z, v| {
            let inside = ((x * x + y * y + z * z) as f64) <= 9.0;
            assert_eq!(v != 0.0, inside);
            if inside {
                assert_eq!(v, 128.0);
                count += 1;
            }
        });
        assert_eq!(count, 123);
    }

    #[test]
    fn mass_is_cropped_to_thin_stack() {
        let p = make_signal_profile(&SignalSpec::new(SignalKind::Mass, 0.65), 128.0, &geom([64, 64, 32])).unwrap();
        assert_eq!(p.dims(), [61, 61, 31]);
        assert!((p.get(0, 0, 0) - 83.2).abs() < 1e-12);
        assert!((p.get(10, 0, 0) - 83.2 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn placement_falls_back_on_thin_axis() {
        let g = geom([256, 256, 32]);
        let r = PlacementRegion::for_signal(&g, &SignalSpec::new(SignalKind::Mass, 0.5), 0, 2).unwrap();
        assert_eq!(r.lo, [30, 30, 2]);
        assert_eq!(r.hi, [225, 225, 29]);
        let r = PlacementRegion::for_signal(&g, &SignalSpec::new(SignalKind::Microcalcification, 0.5), 0, 2).unwrap();
        assert_eq!(r.lo, [3, 3, 3]);
    }

    #[test]
    fn extraction_picks_signal_slice() {
        let g = geom([8, 8, 100]);
        let bg = Volume::from_data(g, (0..g.len()).map(|i| i as f64).collect()).unwrap();
        let spec = SignalSpec::new(SignalKind::Microcalcification, 0.0);
        let absent = extract_2d_slice(&TrialStimulus::absent(bg.clone(), spec));
        assert_eq!(absent.volume.geometry().first_slice, 50);
        let k = Kernel::zeros([1, 1, 1]);
        let present = extract_2d_slice(&TrialStimulus::present(&bg, &k, spec, [4, 4, 40]).unwrap());
        assert_eq!(present.volume.geometry().first_slice, 40);
        assert_eq!(present.volume.data(), bg.plane(40).data());
    }
}
