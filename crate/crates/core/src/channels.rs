//! Spatial channel banks: Gabor, Laguerre-Gauss and difference-of-Gaussians.
//!
//! Every channel is a 2D kernel with unit L2 norm on an odd square patch.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_index, FftGrid};
use crate::volume::Kernel;

/// Foveal frequencies (cpd) for the foveated observer.
pub const FOVEAL_FREQUENCIES: [f64; 6] = [32.0, 16.0, 8.0, 4.0, 2.0, 1.0];
/// Frequencies (cpd) for the standard Gabor CHO.
pub const STANDARD_FREQUENCIES: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
pub const DEFAULT_ORIENTATIONS: usize = 8;
pub const LG_ORDERS: [usize; 4] = [0, 3, 9, 17];
pub const LG_WIDTHS: [f64; 4] = [5.0, 10.0, 20.0, 40.0];
pub const ENERGY_FRACTION: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelFamily {
    Gabor,
    LaguerreGauss,
    Dog,
}

/// Sampling of channel patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub pitch_dva: f64,
    /// Largest allowed patch side; forced odd.
    pub max_side: usize,
}

impl PatchSpec {
    pub fn new(pitch_dva: f64, max_side: usize) -> Self {
        let max_side = if max_side.is_multiple_of(2) { max_side.saturating_sub(1) } else { max_side };
        PatchSpec {
            pitch_dva,
            max_side: max_side.max(1),
        }
    }

    /// The largest odd patch that fits a `width x height` image.
    pub fn for_image(pitch_dva: f64, width: usize, height: usize) -> Self {
        PatchSpec::new(pitch_dva, width.min(height))
    }

    pub fn nyquist_cpd(&self) -> f64 {
        0.5 / self.pitch_dva
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoveationParams {
    pub alpha: f64,
    pub beta: f64,
    /// Internal-noise SD as a multiple of the template-response SD.
    pub k: f64,
}

impl Default for FoveationParams {
    fn default() -> Self {
        FoveationParams {
            alpha: 0.7063,
            beta: 1.6953,
            k: 2.7813,
        }
    }
}

impl FoveationParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("k", self.k)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("foveation.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Frequency divisor `1 + alpha * E^beta` at eccentricity `E` (dva).
    pub fn scaling(&self, eccentricity: f64) -> f64 {
        if eccentricity <= 0.0 {
            1.0
        } else {
            1.0 + self.alpha * eccentricity.powf(self.beta)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BankParams {
    Gabor {
        /// Center frequencies actually used (cpd), after any scaling.
        frequencies: Vec<f64>,
        orientations: usize,
        /// Divisor applied to the base frequencies.
        scaling: f64,
    },
    LaguerreGauss {
        orders: Vec<usize>,
        widths: Vec<f64>,
        literal: bool,
    },
    Dog {
        sigma0: f64,
        alpha: f64,
        q: f64,
        orders: Vec<u32>,
        literal: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBank {
    params: BankParams,
    pitch_dva: f64,
    side: usize,
    channels: Vec<Kernel>,
}

impl ChannelBank {
    pub fn family(&self) -> ChannelFamily {
        match self.params {
            BankParams::Gabor { .. } => ChannelFamily::Gabor,
            BankParams::LaguerreGauss { .. } => ChannelFamily::LaguerreGauss,
            BankParams::Dog { .. } => ChannelFamily::Dog,
        }
    }

    pub fn params(&self) -> &BankParams {
        &self.params
    }

    pub fn pitch_dva(&self) -> f64 {
        self.pitch_dva
    }

    /// Odd side length of every channel patch, in voxels.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[Kernel] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &Kernel {
        &self.channels[i]
    }

    /// Builds a bank from arbitrary profiles; each must be a centered odd square.
    pub fn from_profiles(params: BankParams, pitch_dva: f64, channels: Vec<Kernel>) -> Result<Self> {
        let side = channels.first().map(|k| k.dims()[0]).unwrap_or(1);
        for (i, k) in channels.iter().enumerate() {
            let d = k.dims();
            if d != [side, side, 1] || side.is_multiple_of(2) || k.center() != [side / 2, side / 2, 0] {
                return Err(Error::Shape(format!("channel {i} is not a centered odd {side}x{side} patch")));
            }
            if k.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("channels", format!("channel {i} has non-finite entries")));
            }
            if k.data().iter().all(|v| *v == 0.0) {
                return Err(Error::invalid("channels", format!("channel {i} is identically zero")));
            }
        }
        Ok(ChannelBank {
            params,
            pitch_dva,
            side,
            channels,
        })
    }

    /// `T^T patch`: one inner product per channel.
    pub fn response(&self, patch: &Kernel) -> Result<Vec<f64>> {
        if patch.dims() != [self.side, self.side, 1] {
            return Err(Error::Shape(format!(
                "patch {:?} does not match bank side {}",
                patch.dims(),
                self.side
            )));
        }
        Ok(self
            .channels
            .iter()
            .map(|c| c.data().iter().zip(patch.data()).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `T v`: a patch-sized combination of channels.
    pub fn combine(&self, weights: &[f64]) -> Kernel {
        let mut out = Kernel::zeros([self.side, self.side, 1]);
        for (c, w) in self.channels.iter().zip(weights) {
            for (o, v) in out.data_mut().iter_mut().zip(c.data()) {
                *o += w * v;
            }
        }
        out
    }

    /// Channel spectra on a 2D grid of the given size.
    pub fn spectra(&self, grid: &FftGrid) -> Vec<Vec<rustfft::num_complex::Complex64>> {
        self.channels
            .iter()
            .map(|c| grid.forward_real(&c.embed_wrapped(grid.dims())))
            .collect()
    }
}

/// Free-function form of [`ChannelBank::response`].
pub fn channel_response(bank: &ChannelBank, patch: &Kernel) -> Result<Vec<f64>> {
    bank.response(patch)
}

/// Gaussian envelope SD (dva) of a one-octave Gabor at `frequency` cpd.
///
/// Half-amplitude bandwidth of one octave means the spectral Gaussian drops
/// to half at `f/3` from the center; that pins the spatial SD to
/// `sqrt(ln2/2)/pi * 3/f`.
pub fn gabor_sigma_dva(frequency: f64) -> f64 {
    let b: f64 = 1.0;
    (LN_2 / 2.0).sqrt() / PI * (2f64.powf(b) + 1.0) / (2f64.powf(b) - 1.0) / frequency
}

/// Envelope full width at half maximum, the `W` of the Gabor formula.
pub fn gabor_width_dva(frequency: f64) -> f64 {
    2.0 * (2.0 * LN_2).sqrt() * gabor_sigma_dva(frequency)
}

fn gabor_value(x: f64, y: f64, frequency: f64, theta: f64, width: f64) -> f64 {
    let r2 = x * x + y * y;
    (-4.0 * LN_2 * r2 / (width * width)).exp() * (2.0 * PI * frequency * (x * theta.cos() + y * theta.sin())).cos()
}

fn sample_square(max_side: usize, f: impl Fn(isize, isize) -> f64) -> Kernel {
    let h = max_side / 2;
    Kernel::from_fn([h, h, 0], |x, y, _| f(x, y))
}

/// Smallest odd side holding `ENERGY_FRACTION` of the energy of every profile.
fn shared_side(profiles: &[Kernel]) -> usize {
    let mut side = 1;
    for p in profiles {
        let h = p.dims()[0] / 2;
        let mut ring = vec![0.0; h + 1];
        p.for_each(|x, y, _, v| ring[x.unsigned_abs().max(y.unsigned_abs())] += v * v);
        let total: f64 = ring.iter().sum();
        let mut acc = 0.0;
        for (m, e) in ring.iter().enumerate() {
            acc += e;
            if acc >= ENERGY_FRACTION * total {
                side = side.max(2 * m + 1);
                break;
            }
        }
    }
    side
}

fn finish(params: BankParams, patch: &PatchSpec, raw: Vec<Kernel>) -> Result<ChannelBank> {
    let side = shared_side(&raw);
    let h = side / 2;
    let channels = raw
        .into_iter()
        .map(|k| {
            let k = k.recentered([h, h, 0]);
            let norm = k.norm_sq().sqrt();
            if norm > 0.0 {
                k.scaled(1.0 / norm)
            } else {
                k
            }
        })
        .collect();
    ChannelBank::from_profiles(params, patch.pitch_dva, channels)
}

fn gabor_profiles(frequencies: &[f64], orientations: usize, patch: &PatchSpec) -> Vec<Kernel> {
    let mut out = Vec::with_capacity(frequencies.len() * orientations);
    for &f in frequencies {
        let w = gabor_width_dva(f);
        for o in 0..orientations {
            let theta = PI * o as f64 / orientations as f64;
            out.push(sample_square(patch.max_side, |x, y| {
                gabor_value(x as f64 * patch.pitch_dva, y as f64 * patch.pitch_dva, f, theta, w)
            }));
        }
    }
    out
}

/// Even-phase one-octave Gabor channels; rejects frequencies at or above Nyquist.
pub fn gabor_bank(frequencies: &[f64], orientations: usize, patch: &PatchSpec) -> Result<ChannelBank> {
    if orientations == 0 || frequencies.is_empty() {
        return Err(Error::invalid("gabor", "need at least one frequency and one orientation"));
    }
    let nyquist = patch.nyquist_cpd();
    for &f in frequencies {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::invalid("gabor.frequencies", format!("{f} is not a positive frequency")));
        }
        if f >= nyquist {
            return Err(Error::AboveNyquist { frequency: f, nyquist });
        }
    }
    let params = BankParams::Gabor {
        frequencies: frequencies.to_vec(),
        orientations,
        scaling: 1.0,
    };
    finish(params, patch, gabor_profiles(frequencies, orientations, patch))
}

/// Drops frequencies the patch pitch cannot represent, logging each one.
pub fn resolvable_frequencies(frequencies: &[f64], patch: &PatchSpec) -> Vec<f64> {
    let nyquist = patch.nyquist_cpd();
    frequencies
        .iter()
        .copied()
        .filter(|&f| {
            let ok = f < nyquist;
            if !ok {
                log::warn!("dropping {f} cpd channel: Nyquist is {nyquist:.2} cpd at this pitch");
            }
            ok
        })
        .collect()
}

/// Gabor bank with every base frequency divided by `params.scaling(E)`.
///
/// Base frequencies are expected to be resolvable already; scaling only
/// lowers them, so the bank at any eccentricity keeps the foveal channel count.
pub fn scaled_gabor_bank(
    base_frequencies: &[f64],
    orientations: usize,
    eccentricity: f64,
    params: &FoveationParams,
    patch: &PatchSpec,
) -> Result<ChannelBank> {
    if !(eccentricity.is_finite() && eccentricity >= 0.0) {
        return Err(Error::invalid("eccentricity", format!("must be >= 0, got {eccentricity}")));
    }
    let scaling = params.scaling(eccentricity);
    if scaling == 1.0 {
        return gabor_bank(base_frequencies, orientations, patch);
    }
    let freqs: Vec<f64> = base_frequencies.iter().map(|f| f / scaling).collect();
    let mut bank = gabor_bank(&freqs, orientations, patch)?;
    if let BankParams::Gabor { scaling: s, .. } = &mut bank.params {
        *s = scaling;
    }
    Ok(bank)
}

/// Laguerre polynomial `L_j(x)` by the three-term recurrence.
pub fn laguerre(j: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if j == 0 {
        return prev;
    }
    let mut cur = 1.0 - x;
    for n in 1..j {
        let next = ((2 * n + 1) as f64 - x) * cur / (n + 1) as f64 - n as f64 * prev / (n + 1) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

/// Laguerre-Gauss value at radius `r` (voxels).
///
/// The standard form scales the radius by `a^2`; `literal` uses `a` itself
/// inside the exponent and polynomial argument.
pub fn laguerre_gauss_value(j: usize, a: f64, r: f64, literal: bool) -> f64 {
    let denom = if literal { a } else { a * a };
    let t = PI * r * r / denom;
    2f64.sqrt() / a * (-t).exp() * laguerre(j, 2.0 * t)
}

pub fn laguerre_gauss_bank(orders: &[usize], widths: &[f64], literal: bool, patch: &PatchSpec) -> Result<ChannelBank> {
    if orders.is_empty() || widths.is_empty() {
        return Err(Error::invalid("laguerre_gauss", "need at least one order and one width"));
    }
    if let Some(a) = widths.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::invalid("laguerre_gauss.widths", format!("{a} is not positive")));
    }
    let mut raw = Vec::new();
    for &a in widths {
        for &j in orders {
            raw.push(sample_square(patch.max_side, |x, y| {
                laguerre_gauss_value(j, a, ((x * x + y * y) as f64).sqrt(), literal)
            }));
        }
    }
    let params = BankParams::LaguerreGauss {
        orders: orders.to_vec(),
        widths: widths.to_vec(),
        literal,
    };
    finish(params, patch, raw)
}

/// Radial DoG gain at frequency `rho` (cycles per voxel).
///
/// `literal` places `Q` as `exp(-rho^2 / (Q 2 sigma^2))`; otherwise the wide
/// Gaussian has SD `Q sigma`.
pub fn dog_gain(rho: f64, sigma: f64, q: f64, literal: bool) -> f64 {
    let wide = if literal {
        (-rho * rho / (q * 2.0 * sigma * sigma)).exp()
    } else {
        (-rho * rho / (2.0 * (q * sigma) * (q * sigma))).exp()
    };
    wide - (-rho * rho / (2.0 * sigma * sigma)).exp()
}

/// DoG channels defined as radial band-pass gains in the frequency domain.
///
/// `sigma_n = sigma0 * alpha^n` in cycles per voxel; the spatial profile is
/// the inverse DFT of the gain on a `max_side` square.
pub fn dog_bank(sigma0: f64, alpha: f64, q: f64, orders: &[u32], literal: bool, patch: &PatchSpec) -> Result<ChannelBank> {
    if !(q.is_finite() && q > 1.0) {
        return Err(Error::invalid("dog.q", format!("must be > 1, got {q}")));
    }
    if !(sigma0 > 0.0 && alpha > 0.0) || orders.is_empty() {
        return Err(Error::invalid("dog", "sigma0 and alpha must be > 0 with at least one order"));
    }
    let n = patch.max_side;
    let grid = FftGrid::new([n, n, 1]);
    let h = n / 2;
    let mut raw = Vec::with_capacity(orders.len());
    for &order in orders {
        let sigma = sigma0 * alpha.powi(order as i32);
        let mut spec = Vec::with_capacity(n * n);
        for ky in 0..n {
            let fy = signed_index(n, ky) / n as f64;
            for kx in 0..n {
                let fx = signed_index(n, kx) / n as f64;
                let g = dog_gain((fx * fx + fy * fy).sqrt(), sigma, q, literal);
                spec.push(rustfft::num_complex::Complex64::new(g, 0.0));
            }
        }
        let field = grid.inverse_real(spec);
        raw.push(Kernel::from_wrapped(&field, [n, n, 1], [h, h, 0]));
    }
    let params = BankParams::Dog {
        sigma0,
        alpha,
        q,
        orders: orders.to_vec(),
        literal,
    };
    finish(params, patch, raw)
}

pub fn default_dog_bank(patch: &PatchSpec) -> Result<ChannelBank> {
    let orders: Vec<u32> = (1..=10).collect();
    dog_bank(0.005, 1.4, 1.67, &orders, true, patch)
}

pub fn default_laguerre_gauss_bank(patch: &PatchSpec) -> Result<ChannelBank> {
    laguerre_gauss_bank(&LG_ORDERS, &LG_WIDTHS, false, patch)
}

pub fn default_gabor_bank(patch: &PatchSpec) -> Result<ChannelBank> {
    gabor_bank(&resolvable_frequencies(&STANDARD_FREQUENCIES, patch), DEFAULT_ORIENTATIONS, patch)
}
