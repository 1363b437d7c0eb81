//! Linear observer templates, scanning responses and likelihood decisions.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelBank;
use crate::error::{Error, Result};
use crate::fft::{signed_index, FftGrid};
use crate::stimulus::{NoiseSpectrum, PlacementRegion};
use crate::volume::{Kernel, Volume};

/// Slices combined into a hybrid 3D template (centered on the signal's slice).
pub const DEFAULT_TEMPLATE_SLICES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    Io,
    Npw,
    Npwe,
    ChoGabor,
    ChoLg,
    ChoDog,
    #[serde(alias = "fsm")]
    Fcho,
}

impl ObserverKind {
    pub const STANDARD: [ObserverKind; 6] = [
        ObserverKind::Io,
        ObserverKind::Npw,
        ObserverKind::Npwe,
        ObserverKind::ChoGabor,
        ObserverKind::ChoLg,
        ObserverKind::ChoDog,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ObserverKind::Io => "io",
            ObserverKind::Npw => "npw",
            ObserverKind::Npwe => "npwe",
            ObserverKind::ChoGabor => "cho_gabor",
            ObserverKind::ChoLg => "cho_lg",
            ObserverKind::ChoDog => "cho_dog",
            ObserverKind::Fcho => "fcho",
        }
    }

    /// Search decision rule: the ideal observer sums likelihood ratios over
    /// locations, every other observer takes the maximum.
    pub fn rule(&self) -> DecisionRule {
        match self {
            ObserverKind::Io => DecisionRule::Sum,
            _ => DecisionRule::Max,
        }
    }
}

impl std::fmt::Display for ObserverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ObserverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let all = [
            ObserverKind::Io,
            ObserverKind::Npw,
            ObserverKind::Npwe,
            ObserverKind::ChoGabor,
            ObserverKind::ChoLg,
            ObserverKind::ChoDog,
            ObserverKind::Fcho,
        ];
        let s = if s == "fsm" { "fcho" } else { s };
        all.into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::invalid("observer", format!("unknown observer `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    Sum,
    Max,
}

/// A linear filter applied by correlation: response at `v` is `sum_u w[u] g[v+u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub kind: ObserverKind,
    pub kernel: Kernel,
}

impl Template {
    pub fn new(kind: ObserverKind, kernel: Kernel) -> Result<Self> {
        if kernel.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("template", "non-finite entries"));
        }
        Ok(Template { kind, kernel })
    }

    /// Number of slices the template spans.
    pub fn depth(&self) -> usize {
        self.kernel.dims()[2]
    }

    /// Half-depth in slices (the largest |dz| with stored weights).
    pub fn half_depth(&self) -> usize {
        let (lo, hi) = self.kernel.extent();
        (-lo[2]).max(hi[2]) as usize
    }

    /// Spectrum of the template on a periodic grid.
    pub fn spectrum(&self, grid: &FftGrid) -> Vec<Complex64> {
        grid.forward_real(&self.kernel.embed_wrapped(grid.dims()))
    }

    /// Response to a noiseless signal centered under the template (`w^T s`).
    pub fn signal_response(&self, signal: &Kernel) -> f64 {
        if self.kernel.len() <= signal.len() {
            self.kernel.dot(signal)
        } else {
            signal.dot(&self.kernel)
        }
    }
}

/// Full periodic field `w` from its spectrum, stored as a grid-sized kernel.
fn kernel_from_spectrum(grid: &FftGrid, spectrum: Vec<Complex64>) -> Kernel {
    let dims = grid.dims();
    let field = grid.inverse_real(spectrum);
    let center = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut data = vec![0.0; field.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let sx = (x + dims[0] - center[0]) % dims[0];
                let sy = (y + dims[1] - center[1]) % dims[1];
                let sz = (z + dims[2] - center[2]) % dims[2];
                data[x + dims[0] * (y + dims[1] * z)] = field[sx + dims[0] * (sy + dims[1] * sz)];
            }
        }
    }
    Kernel::from_data(dims, center, data).expect("grid-sized kernel is well formed")
}

/// Prewhitening template `K^{-1} s`, solved in the frequency domain.
pub fn io_template(spectrum: &NoiseSpectrum, signal: &Kernel) -> Template {
    let grid = FftGrid::new(spectrum.dims());
    let mut s_hat = grid.forward_real(&signal.embed_wrapped(grid.dims()));
    for (s, p) in s_hat.iter_mut().zip(spectrum.floored()) {
        *s /= p;
    }
    Template {
        kind: ObserverKind::Io,
        kernel: kernel_from_spectrum(&grid, s_hat),
    }
}

/// The matched filter: the template is the signal itself.
pub fn npw_template(signal: &Kernel) -> Template {
    Template {
        kind: ObserverKind::Npw,
        kernel: signal.clone(),
    }
}

/// Radial contrast-sensitivity filter `rho^a exp(-b rho^c)`, `rho` in cpd.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EyeFilter {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EyeFilter {
    fn default() -> Self {
        EyeFilter {
            alpha: 1.4,
            beta: 0.013,
            gamma: 2.6,
        }
    }
}

impl EyeFilter {
    pub fn gain(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            return 0.0;
        }
        rho.powf(self.alpha) * (-self.beta * rho.powf(self.gamma)).exp()
    }

    /// Frequency of peak gain, `(alpha / (beta gamma))^(1/gamma)`.
    pub fn peak_frequency(&self) -> f64 {
        (self.alpha / (self.beta * self.gamma)).powf(1.0 / self.gamma)
    }
}

/// Planes `-h..=h` of `signal` where `h = slices / 2`.
fn signal_planes(signal: &Kernel, slices: usize) -> Vec<(isize, Kernel)> {
    let h = (slices / 2) as isize;
    (-h..=h).map(|dz| (dz, signal.plane(dz))).collect()
}

fn check_slices(slices: usize) -> Result<()> {
    if slices == 0 || slices.is_multiple_of(2) {
        return Err(Error::invalid("template.slices", format!("must be odd and >= 1, got {slices}")));
    }
    Ok(())
}

/// Eye-filtered matched filter built slice by slice on an `nx x ny` plane.
pub fn npwe_template(
    signal: &Kernel,
    eye: &EyeFilter,
    plane: [usize; 2],
    pitch_dva: f64,
    slices: usize,
) -> Result<Template> {
    check_slices(slices)?;
    let dims = [plane[0], plane[1], 1];
    let grid = FftGrid::new(dims);
    let mut filter = Vec::with_capacity(grid.len());
    for ky in 0..plane[1] {
        let fy = signed_index(plane[1], ky) / (plane[1] as f64 * pitch_dva);
        for kx in 0..plane[0] {
            let fx = signed_index(plane[0], kx) / (plane[0] as f64 * pitch_dva);
            let g = eye.gain((fx * fx + fy * fy).sqrt());
            filter.push(g * g);
        }
    }
    let mut planes = Vec::with_capacity(slices);
    for (_, p) in signal_planes(signal, slices) {
        let mut hat = grid.forward_real(&p.embed_wrapped(dims));
        for (h, f) in hat.iter_mut().zip(&filter) {
            *h *= *f;
        }
        planes.push(kernel_from_spectrum(&grid, hat));
    }
    Template::new(ObserverKind::Npwe, Kernel::stack(&planes)?)
}

/// Channel covariance `T^T K T` for one slice, from the plane spectrum.
pub fn channel_covariance(bank: &ChannelBank, spectrum2d: &NoiseSpectrum) -> Result<DMatrix<f64>> {
    let dims = spectrum2d.dims();
    if dims[2] != 1 {
        return Err(Error::Shape("channel covariance needs a single-plane spectrum".into()));
    }
    if bank.side() > dims[0] || bank.side() > dims[1] {
        return Err(Error::Shape(format!("channel side {} exceeds plane {:?}", bank.side(), dims)));
    }
    let grid = FftGrid::new(dims);
    let spectra = bank.spectra(&grid);
    let n = spectra.len();
    let mut kv = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = spectrum2d.cross_form(&spectra[i], &spectra[j]);
            kv[(i, j)] = v;
            kv[(j, i)] = v;
        }
    }
    Ok(kv)
}

/// Sample covariance of channel-response vectors (one per row).
pub fn sample_channel_covariance(responses: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = responses.len();
    let n = responses.first().map(|r| r.len()).unwrap_or(0);
    if m < 2 || n == 0 {
        return Err(Error::invalid("responses", "need at least two response vectors"));
    }
    let mut mean = vec![0.0; n];
    for r in responses {
        for (a, b) in mean.iter_mut().zip(r) {
            *a += b / m as f64;
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    for r in responses {
        for i in 0..n {
            let di = r[i] - mean[i];
            for j in i..n {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] / (m - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Channel responses of a periodic plane at `center`.
pub fn channel_responses_at(bank: &ChannelBank, plane: &Volume, center: [usize; 2]) -> Vec<f64> {
    let [nx, ny, _] = plane.dims();
    let h = (bank.side() / 2) as isize;
    let patch = Kernel::from_fn([h as usize, h as usize, 0], |dx, dy, _| {
        let x = (center[0] as isize + dx).rem_euclid(nx as isize) as usize;
        let y = (center[1] as isize + dy).rem_euclid(ny as isize) as usize;
        plane.get(x, y, 0)
    });
    bank.response(&patch).expect("patch built at bank side")
}

/// Cholesky solve, adding a ridge only if the factorization fails.
///
/// Returns the solution and the ridge used (0 when none was needed).
pub fn solve_spd(kv: &DMatrix<f64>, rhs: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, f64)> {
    let n = kv.nrows();
    let scale = (0..n).map(|i| kv[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let mut ridge = 0.0;
    for attempt in 0..12 {
        let mut m = kv.clone();
        for i in 0..n {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            if ridge > 0.0 {
                log::warn!("channel covariance regularized with ridge {ridge:.3e}");
            }
            return Ok((rhs.iter().map(|b| ch.solve(b)).collect(), ridge));
        }
        ridge = scale * 1e-12 * 10f64.powi(attempt);
    }
    Err(Error::Singular("channel covariance is not positive definite even with ridge".into()))
}

/// A Hotelling template in channel space, with its solve diagnostics.
#[derive(Clone, Debug)]
pub struct ChannelTemplate {
    pub template: Template,
    pub covariance: DMatrix<f64>,
    pub ridge: f64,
    /// Channel weights per slice, `K_v^{-1} v_n`.
    pub weights: Vec<Vec<f64>>,
}

/// Hybrid channelized Hotelling template from a given channel covariance.
pub fn cho_template_with_covariance(
    kind: ObserverKind,
    bank: &ChannelBank,
    covariance: DMatrix<f64>,
    signal: &Kernel,
    slices: usize,
) -> Result<ChannelTemplate> {
    check_slices(slices)?;
    let h = bank.side() / 2;
    let mut rhs = Vec::with_capacity(slices);
    for (_, p) in signal_planes(signal, slices) {
        let patch = p.recentered([h, h, 0]);
        rhs.push(DVector::from_vec(bank.response(&patch)?));
    }
    let (sol, ridge) = solve_spd(&covariance, &rhs)?;
    let planes: Vec<Kernel> = sol.iter().map(|w| bank.combine(w.as_slice())).collect();
    Ok(ChannelTemplate {
        template: Template::new(kind, Kernel::stack(&planes)?)?,
        covariance,
        ridge,
        weights: sol.into_iter().map(|w| w.as_slice().to_vec()).collect(),
    })
}

/// Hybrid channelized Hotelling template with the analytic channel covariance.
pub fn cho_template(
    kind: ObserverKind,
    bank: &ChannelBank,
    spectrum2d: &NoiseSpectrum,
    signal: &Kernel,
    slices: usize,
) -> Result<ChannelTemplate> {
    let kv = channel_covariance(bank, spectrum2d)?;
    cho_template_with_covariance(kind, bank, kv, signal, slices)
}

/// Response field `w * g` over the whole (periodic) volume.
pub fn scan_respond(template: &Template, volume: &Volume) -> Volume {
    let grid = FftGrid::new(volume.dims());
    let w_hat = template.spectrum(&grid);
    let g_hat = grid.forward_real(volume.data());
    Volume::from_data(*volume.geometry(), grid.correlate(&w_hat, &g_hat)).expect("same geometry")
}

/// Equal-variance Gaussian model of the template response at one location.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseStats {
    pub mean_absent: f64,
    pub mean_present: f64,
    /// Total response SD, internal noise included.
    pub sigma: f64,
    /// SD of the template response to the background alone.
    pub template_sigma: f64,
}

impl ResponseStats {
    pub fn new(mean_absent: f64, mean_present: f64, template_sigma: f64, internal_gain: f64) -> Result<Self> {
        let sigma = template_sigma * (1.0 + internal_gain * internal_gain).sqrt();
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("response SD must be > 0, got {sigma}")));
        }
        Ok(ResponseStats {
            mean_absent,
            mean_present,
            sigma,
            template_sigma,
        })
    }

    /// Analytic statistics of `template` against stationary noise.
    pub fn analytic(
        template: &Template,
        spectrum: &NoiseSpectrum,
        signal: &Kernel,
        background_mean: f64,
        internal_gain: f64,
    ) -> Result<Self> {
        let grid = FftGrid::new(spectrum.dims());
        let w_hat = template.spectrum(&grid);
        let var = spectrum.quadratic_form(&w_hat);
        let base = background_mean * template.kernel.sum();
        Self::new(base, base + template.signal_response(signal), var.sqrt(), internal_gain)
    }

    pub fn delta(&self) -> f64 {
        self.mean_present - self.mean_absent
    }

    pub fn dprime(&self) -> f64 {
        self.delta() / self.sigma
    }

    pub fn internal_sigma(&self) -> f64 {
        (self.sigma * self.sigma - self.template_sigma * self.template_sigma).max(0.0).sqrt()
    }

    /// `log LR = delta (lambda - midpoint) / sigma^2`.
    #[inline]
    pub fn log_lr(&self, lambda: f64) -> f64 {
        let mid = 0.5 * (self.mean_present + self.mean_absent);
        self.delta() * (lambda - mid) / (self.sigma * self.sigma)
    }

    /// Same statistics with the signal scaled by `factor`.
    pub fn with_signal_scale(&self, factor: f64) -> Self {
        ResponseStats {
            mean_present: self.mean_absent + factor * self.delta(),
            ..*self
        }
    }
}

/// Log likelihood ratios over a box of scanned locations.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodField {
    pub region: PlacementRegion,
    /// x-fastest over the region.
    pub log_lr: Vec<f64>,
}

impl LikelihoodField {
    pub fn dims(&self) -> [usize; 3] {
        [
            self.region.hi[0] - self.region.lo[0] + 1,
            self.region.hi[1] - self.region.lo[1] + 1,
            self.region.hi[2] - self.region.lo[2] + 1,
        ]
    }

    pub fn location(&self, i: usize) -> [usize; 3] {
        let d = self.dims();
        let x = i % d[0];
        let y = (i / d[0]) % d[1];
        let z = i / (d[0] * d[1]);
        [x + self.region.lo[0], y + self.region.lo[1], z + self.region.lo[2]]
    }
}

/// Log LR of every response in `region`.
pub fn likelihood_ratio_field(responses: &Volume, stats: &ResponseStats, region: &PlacementRegion) -> Result<LikelihoodField> {
    if !(stats.sigma > 0.0) {
        return Err(Error::invalid("sigma", "must be > 0"));
    }
    if !responses.geometry().contains(region.hi) {
        return Err(Error::OutOfBounds {
            loc: region.hi,
            dims: responses.dims(),
        });
    }
    let mut log_lr = Vec::with_capacity(region.count());
    for z in region.lo[2]..=region.hi[2] {
        for y in region.lo[1]..=region.hi[1] {
            for x in region.lo[0]..=region.hi[0] {
                log_lr.push(stats.log_lr(responses.get(x, y, z)));
            }
        }
    }
    Ok(LikelihoodField { region: *region, log_lr })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Log of the sum (or maximum) of likelihood ratios.
    pub statistic: f64,
    /// Location of the largest likelihood ratio.
    pub location: [usize; 3],
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.into_iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn decide(field: &LikelihoodField, rule: DecisionRule) -> Result<Decision> {
    if field.log_lr.is_empty() {
        return Err(Error::invalid("field", "empty scan region"));
    }
    let best = argmax(&field.log_lr);
    let statistic = match rule {
        DecisionRule::Max => field.log_lr[best],
        DecisionRule::Sum => log_sum_exp(field.log_lr.iter().copied()),
    };
    Ok(Decision {
        statistic,
        location: field.location(best),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeGeometry;

    #[test]
    fn eye_filter_peak() {
        let e = EyeFilter::default();
        assert_eq!(e.gain(0.0), 0.0);
        let p = e.peak_frequency();
        assert!((p - 4.19).abs() < 0.01);
        assert!(e.gain(p) > e.gain(p * 0.99) && e.gain(p) > e.gain(p * 1.01));
    }

    #[test]
    fn io_in_white_noise_is_scaled_signal() {
        let spec = NoiseSpectrum::white(2.0, [16, 16, 1]);
        let s = Kernel::from_fn([2, 2, 0], |x, y, _| (5 - x * x - y * y) as f64);
        let t = io_template(&spec, &s);
        let back = t.kernel.recentered([2, 2, 0]);
        for (a, b) in back.data().iter().zip(s.data()) {
            assert!((a - b / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_midpoint_and_peak() {
        let st = ResponseStats::new(1.0, 3.0, 0.5, 0.0).unwrap();
        assert!(st.log_lr(2.0).abs() < 1e-15);
        let d = st.dprime();
        assert!((st.log_lr(3.0) - d * d / 2.0).abs() < 1e-12);
    }

    #[test]
    fn internal_noise_keeps_means() {
        let a = ResponseStats::new(0.0, 2.0, 1.0, 0.0).unwrap();
        let b = ResponseStats::new(0.0, 2.0, 1.0, 2.7813).unwrap();
        assert_eq!(a.delta(), b.delta());
        assert!((b.dprime() - 2.0 / (1.0f64 + 2.7813 * 2.7813).sqrt()).abs() < 1e-12);
        assert!((b.internal_sigma() - 2.7813).abs() < 1e-9);
    }

    #[test]
    fn single_voxel_sum_equals_max() {
        let g = VolumeGeometry::new([3, 3, 1], 0.1).unwrap();
        let v = Volume::from_data(g, (0..9).map(|i| i as f64).collect()).unwrap();
        let region = PlacementRegion { lo: [1, 1, 0], hi: [1, 1, 0] };
        let st = ResponseStats::new(0.0, 1.0, 1.0, 0.0).unwrap();
        let f = likelihood_ratio_field(&v, &st, &region).unwrap();
        let a = decide(&f, DecisionRule::Sum).unwrap();
        let b = decide(&f, DecisionRule::Max).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-12);
        assert_eq!(a.location, [1, 1, 0]);
    }

    #[test]
    fn delta_template_returns_image() {
        let g = VolumeGeometry::new([6, 5, 4], 0.1).unwrap();
        let v = Volume::from_data(g, (0..g.len()).map(|i| (i * 7 % 13) as f64).collect()).unwrap();
        let t = Template::new(ObserverKind::Npw, Kernel::from_fn([0, 0, 0], |_, _, _| 1.0)).unwrap();
        let r = scan_respond(&t, &v);
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
