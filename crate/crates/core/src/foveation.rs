//! Eccentricity ladders of foveated channelized templates, internal noise,
//! detectability versus eccentricity, and fitting the foveation parameters.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::channels::{resolvable_frequencies, scaled_gabor_bank, FoveationParams, PatchSpec, DEFAULT_ORIENTATIONS, FOVEAL_FREQUENCIES};
use crate::error::{Error, Result};
use crate::fft::FftGrid;
use crate::observers::{channel_covariance, cho_template, ObserverKind, ResponseStats, Template};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::rng::SeedStream;
use crate::stats::{ln_normal_cdf, normal_cdf};
use crate::stimulus::{generate_from_spectrum, NoiseSpectrum, SignalKind};
use crate::volume::Kernel;

pub const BAND_COUNT: usize = 10;
/// Signal contrast of the forced-fixation task.
pub const FORCED_FIXATION_CONTRAST: f64 = 0.65;

/// Additive Gaussian internal noise with SD `gain * template_sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InternalNoiseModel {
    pub gain: f64,
}

impl InternalNoiseModel {
    pub fn sd(&self, template_sigma: f64) -> f64 {
        self.gain * template_sigma
    }

    pub fn sample<R: Rng + ?Sized>(&self, template_sigma: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        z * self.sd(template_sigma)
    }
}

/// Channel set shared by every band before eccentricity scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub base_frequencies: Vec<f64>,
    pub orientations: usize,
    /// Slices per template (1 for planar stimuli).
    pub slices: usize,
}

impl LadderSpec {
    /// Foveal frequency preset restricted to what the patch pitch resolves.
    pub fn foveal(patch: &PatchSpec, slices: usize) -> Self {
        LadderSpec {
            base_frequencies: resolvable_frequencies(&FOVEAL_FREQUENCIES, patch),
            orientations: DEFAULT_ORIENTATIONS,
            slices,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Band {
    pub eccentricity: f64,
    pub scaling: f64,
    pub template: Template,
    /// Statistics at unit contrast, internal noise included in `sigma`.
    pub stats: ResponseStats,
    pub channel_side: usize,
}

impl Band {
    pub fn dprime(&self, contrast: f64) -> f64 {
        contrast * self.stats.dprime()
    }
}

#[derive(Clone, Debug)]
pub struct EccentricityLadder {
    pub params: FoveationParams,
    pub bands: Vec<Band>,
    pub noise: InternalNoiseModel,
}

/// Nearest integer band for an eccentricity in dva, clamped to the last band.
pub fn band_index(eccentricity: f64) -> usize {
    if !(eccentricity > 0.0) {
        return 0;
    }
    (eccentricity.round() as usize).min(BAND_COUNT - 1)
}

impl EccentricityLadder {
    pub fn band(&self, eccentricity: f64) -> &Band {
        &self.bands[band_index(eccentricity)]
    }

    /// Analytic d' per band at `contrast`.
    pub fn dprime_curve(&self, contrast: f64) -> Vec<f64> {
        self.bands.iter().map(|b| b.dprime(contrast)).collect()
    }
}

/// Builds one foveated template at the given eccentricity.
///
/// `spectrum` is the noise of the stimulus the template scans (a stack or a
/// plane); the channel covariance always uses the single-plane marginal.
pub fn build_band(
    signal_unit: &Kernel,
    spectrum: &NoiseSpectrum,
    background_mean: f64,
    params: &FoveationParams,
    spec: &LadderSpec,
    patch: &PatchSpec,
    eccentricity: f64,
) -> Result<Band> {
    let plane = spectrum.marginal_2d();
    let bank = scaled_gabor_bank(&spec.base_frequencies, spec.orientations, eccentricity, params, patch)?;
    let kv = channel_covariance(&bank, &plane)?;
    let cho = crate::observers::cho_template_with_covariance(ObserverKind::Fcho, &bank, kv, signal_unit, spec.slices)?;
    let stats = ResponseStats::analytic(&cho.template, spectrum, signal_unit, background_mean, params.k)?;
    Ok(Band {
        eccentricity,
        scaling: params.scaling(eccentricity),
        template: cho.template,
        stats,
        channel_side: bank.side(),
    })
}

pub fn build_ladder(
    signal_unit: &Kernel,
    spectrum: &NoiseSpectrum,
    background_mean: f64,
    params: &FoveationParams,
    spec: &LadderSpec,
    patch: &PatchSpec,
) -> Result<EccentricityLadder> {
    params.validate()?;
    let bands = (0..BAND_COUNT)
        .map(|e| build_band(signal_unit, spectrum, background_mean, params, spec, patch, e as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(EccentricityLadder {
        params: *params,
        bands,
        noise: InternalNoiseModel { gain: params.k },
    })
}

/// The foveal standard CHO template the first band must reproduce.
pub fn foveal_cho(signal_unit: &Kernel, spectrum: &NoiseSpectrum, spec: &LadderSpec, patch: &PatchSpec) -> Result<Template> {
    let bank = crate::channels::gabor_bank(&spec.base_frequencies, spec.orientations, patch)?;
    Ok(cho_template(ObserverKind::Fcho, &bank, &spectrum.marginal_2d(), signal_unit, spec.slices)?.template)
}

/// Monte-Carlo yes/no outcome for one band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandOutcome {
    pub eccentricity: f64,
    pub analytic: f64,
    pub n_present: u64,
    pub n_absent: u64,
    pub hits: u64,
    pub false_alarms: u64,
}

impl BandOutcome {
    pub fn dprime(&self) -> f64 {
        crate::stats::dprime_from_counts(self.hits, self.n_present, self.false_alarms, self.n_absent)
    }
}

/// Forced-fixation simulation on planar noise drawn from `plane_spectrum`.
///
/// Each trial draws one background, places the cued location at the plane
/// center, and scores every band on that shared background with its own
/// internal-noise draw; the criterion sits at the likelihood-ratio midpoint.
pub fn dprime_vs_eccentricity(
    ladder: &EccentricityLadder,
    plane_spectrum: &NoiseSpectrum,
    background_mean: f64,
    contrast: f64,
    trials: usize,
    stream: SeedStream,
) -> Result<Vec<BandOutcome>> {
    let dims = plane_spectrum.dims();
    if dims[2] != 1 {
        return Err(Error::Shape("forced-fixation simulation needs a single-plane spectrum".into()));
    }
    if ladder.bands.iter().any(|b| b.template.depth() != 1) {
        return Err(Error::Shape("forced-fixation simulation needs planar templates".into()));
    }
    let grid = FftGrid::new(dims);
    let center = [dims[0] / 2, dims[1] / 2];
    let mut out: Vec<BandOutcome> = ladder
        .bands
        .iter()
        .map(|b| BandOutcome {
            eccentricity: b.eccentricity,
            analytic: b.dprime(contrast),
            n_present: 0,
            n_absent: 0,
            hits: 0,
            false_alarms: 0,
        })
        .collect();
    for t in 0..trials {
        let trial = stream.index(t as u64);
        let present = trial.child("truth").rng().gen_bool(0.5);
        let field = grid.inverse_real(generate_from_spectrum(plane_spectrum, background_mean, trial.child("noise").seed(), &grid));
        let mut internal = trial.child("internal").rng();
        for (band, o) in ladder.bands.iter().zip(out.iter_mut()) {
            let mut lambda = 0.0;
            band.template.kernel.for_each(|dx, dy, _, w| {
                let x = (center[0] as isize + dx).rem_euclid(dims[0] as isize) as usize;
                let y = (center[1] as isize + dy).rem_euclid(dims[1] as isize) as usize;
                lambda += w * field[x + dims[0] * y];
            });
            if present {
                lambda += contrast * band.stats.delta();
            }
            lambda += ladder.noise.sample(band.stats.template_sigma, &mut internal);
            let stats = band.stats.with_signal_scale(contrast);
            let yes = stats.log_lr(lambda) > 0.0;
            if present {
                o.n_present += 1;
                o.hits += yes as u64;
            } else {
                o.n_absent += 1;
                o.false_alarms += yes as u64;
            }
        }
    }
    Ok(out)
}

/// One forced-fixation condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub signal: SignalKind,
    pub eccentricity_dva: f64,
    pub n_trials: u64,
    pub n_hits: u64,
    pub n_fa: u64,
    pub n_present: u64,
    pub n_absent: u64,
    /// Signal contrast; the forced-fixation contrast when the column is absent.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
}

fn default_contrast() -> f64 {
    FORCED_FIXATION_CONTRAST
}

impl DatasetRow {
    fn validate(&self, line: usize) -> Result<()> {
        let bad = |reason: String| Error::Dataset { line, reason };
        if self.n_present == 0 || self.n_absent == 0 {
            return Err(bad("present and absent counts must be > 0".into()));
        }
        if self.n_present + self.n_absent != self.n_trials {
            return Err(bad(format!(
                "n_present + n_absent = {} but n_trials = {}",
                self.n_present + self.n_absent,
                self.n_trials
            )));
        }
        if self.n_hits > self.n_present || self.n_fa > self.n_absent {
            return Err(bad("hit or false-alarm count exceeds its trial count".into()));
        }
        if !(self.eccentricity_dva.is_finite() && self.eccentricity_dva >= 0.0) {
            return Err(bad(format!("eccentricity {} must be >= 0", self.eccentricity_dva)));
        }
        if !(self.contrast.is_finite() && self.contrast >= 0.0) {
            return Err(bad(format!("contrast {} must be >= 0", self.contrast)));
        }
        Ok(())
    }

    pub fn hit_rate(&self) -> f64 {
        self.n_hits as f64 / self.n_present as f64
    }

    pub fn false_alarm_rate(&self) -> f64 {
        self.n_fa as f64 / self.n_absent as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EccentricityDataset {
    pub rows: Vec<DatasetRow>,
}

impl EccentricityDataset {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<DatasetRow>().enumerate() {
            let line = i + 2;
            let row = rec.map_err(|e| Error::Dataset {
                line,
                reason: e.to_string(),
            })?;
            row.validate(line)?;
            rows.push(row);
        }
        Ok(EccentricityDataset { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn signals(&self) -> Vec<SignalKind> {
        let mut s: Vec<SignalKind> = self.rows.iter().map(|r| r.signal).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn eccentricities(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.rows.iter().map(|r| r.eccentricity_dva).collect();
        e.sort_by(|a, b| a.total_cmp(b));
        e.dedup();
        e
    }
}

/// External-noise d' per unit contrast as a function of the frequency
/// divisor, tabulated on a log grid per signal.
///
/// Foveated d' depends on `(alpha, beta)` only through the divisor, so one
/// table serves every objective evaluation of the fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DprimeTable {
    pub log_scaling: Vec<f64>,
    pub signals: Vec<SignalKind>,
    /// `values[signal][i]` at `exp(log_scaling[i])`.
    pub values: Vec<Vec<f64>>,
}

impl DprimeTable {
    /// Tabulates planar foveated templates for each signal at `points`
    /// divisors spaced evenly in log from 1 to `max_scaling`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        signals: &[(SignalKind, Kernel)],
        spectrum: &NoiseSpectrum,
        background_mean: f64,
        spec: &LadderSpec,
        patch: &PatchSpec,
        max_scaling: f64,
        points: usize,
    ) -> Result<Self> {
        if points < 2 || !(max_scaling > 1.0) {
            return Err(Error::invalid("table", "need >= 2 points and max_scaling > 1"));
        }
        let plane = spectrum.marginal_2d();
        let lmax = max_scaling.ln();
        let log_scaling: Vec<f64> = (0..points).map(|i| lmax * i as f64 / (points - 1) as f64).collect();
        let mut values = vec![Vec::with_capacity(points); signals.len()];
        for &ls in &log_scaling {
            let freqs: Vec<f64> = spec.base_frequencies.iter().map(|f| f / ls.exp()).collect();
            let bank = crate::channels::gabor_bank(&freqs, spec.orientations, patch)?;
            let kv = channel_covariance(&bank, &plane)?;
            for (j, (_, s)) in signals.iter().enumerate() {
                let t = crate::observers::cho_template_with_covariance(ObserverKind::Fcho, &bank, kv.clone(), s, spec.slices)?;
                let st = ResponseStats::analytic(&t.template, spectrum, s, background_mean, 0.0)?;
                values[j].push(st.dprime());
            }
        }
        Ok(DprimeTable {
            log_scaling,
            signals: signals.iter().map(|(k, _)| *k).collect(),
            values,
        })
    }

    /// Linear interpolation in log divisor, clamped to the table ends.
    pub fn external_dprime(&self, signal: SignalKind, scaling: f64) -> Option<f64> {
        let j = self.signals.iter().position(|s| *s == signal)?;
        let v = &self.values[j];
        let x = scaling.max(1.0).ln();
        let n = self.log_scaling.len();
        if x >= self.log_scaling[n - 1] {
            return Some(v[n - 1]);
        }
        let step = self.log_scaling[1] - self.log_scaling[0];
        let i = ((x / step).floor() as usize).min(n - 2);
        let t = (x - self.log_scaling[i]) / step;
        Some(v[i] * (1.0 - t) + v[i + 1] * t)
    }

    /// Model d' at eccentricity `e` and `contrast` under `params`.
    pub fn dprime(&self, signal: SignalKind, e: f64, contrast: f64, params: &FoveationParams) -> Option<f64> {
        let base = self.external_dprime(signal, params.scaling(e))?;
        Some(contrast * base / (1.0 + params.k * params.k).sqrt())
    }
}

/// Binomial log-likelihood of one row at detectability `d` and criterion `k`.
fn row_log_likelihood(row: &DatasetRow, d: f64, k: f64) -> f64 {
    let hits = row.n_hits as f64;
    let misses = (row.n_present - row.n_hits) as f64;
    let fas = row.n_fa as f64;
    let crs = (row.n_absent - row.n_fa) as f64;
    hits * ln_normal_cdf(d - k) + misses * ln_normal_cdf(k - d) + fas * ln_normal_cdf(-k) + crs * ln_normal_cdf(k)
}

/// Row log-likelihood maximized over the criterion (concave, golden section).
pub fn profiled_log_likelihood(row: &DatasetRow, d: f64) -> f64 {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = ((-10.0f64).min(d - 10.0), 10.0f64.max(d + 10.0));
    let f = |k: f64| row_log_likelihood(row, d, k);
    let mut c = b - phi * (b - a);
    let mut e = a + phi * (b - a);
    let (mut fc, mut fe) = (f(c), f(e));
    for _ in 0..80 {
        if fc > fe {
            b = e;
            e = c;
            fe = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + phi * (b - a);
            fe = f(e);
        }
    }
    fc.max(fe)
}

/// Total profiled log-likelihood of a dataset under `params`.
pub fn dataset_log_likelihood(data: &EccentricityDataset, table: &DprimeTable, params: &FoveationParams) -> Result<f64> {
    let mut ll = 0.0;
    for row in &data.rows {
        let d = table
            .dprime(row.signal, row.eccentricity_dva, row.contrast, params)
            .ok_or_else(|| Error::invalid("dataset", format!("no d' table for signal {}", row.signal)))?;
        ll += profiled_log_likelihood(row, d);
    }
    Ok(ll)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FoveationParams,
    pub log_likelihood: f64,
    pub converged: bool,
    pub evaluations: usize,
    /// Best objective (negative log-likelihood) after each accepted simplex step.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOptions {
    pub starts: Vec<FoveationParams>,
    pub max_evaluations: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: vec![
                FoveationParams::default(),
                FoveationParams { alpha: 0.2, beta: 1.0, k: 1.0 },
                FoveationParams { alpha: 1.5, beta: 2.5, k: 4.0 },
                FoveationParams { alpha: 0.5, beta: 0.5, k: 0.5 },
            ],
            max_evaluations: 3000,
            tolerance: 1e-9,
        }
    }
}

/// Maximum-likelihood `(alpha, beta, K)` by multistart Nelder-Mead.
///
/// Infeasible points (any parameter negative) score `+inf`, so the simplex
/// never leaves the feasible region.
pub fn fit_foveation_params(data: &EccentricityDataset, table: &DprimeTable, options: &FitOptions) -> Result<FitResult> {
    if data.eccentricities().len() < 3 {
        return Err(Error::invalid("dataset", "need at least 3 eccentricities"));
    }
    for s in data.signals() {
        if !table.signals.contains(&s) {
            return Err(Error::invalid("dataset", format!("no d' table for signal {s}")));
        }
    }
    let objective = |x: &[f64]| -> f64 {
        if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return f64::INFINITY;
        }
        let p = FoveationParams {
            alpha: x[0],
            beta: x[1],
            k: x[2],
        };
        match dataset_log_likelihood(data, table, &p) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    };
    let mut best: Option<FitResult> = None;
    for start in &options.starts {
        let x0 = [start.alpha, start.beta, start.k];
        let steps = [0.25 * start.alpha.max(0.2), 0.25 * start.beta.max(0.2), 0.25 * start.k.max(0.2)];
        let nm = nelder_mead(
            objective,
            &x0,
            &steps,
            &NelderMeadOptions {
                max_evaluations: options.max_evaluations,
                tolerance: options.tolerance,
            },
        );
        let candidate = FitResult {
            params: FoveationParams {
                alpha: nm.x[0],
                beta: nm.x[1],
                k: nm.x[2],
            },
            log_likelihood: -nm.value,
            converged: nm.converged,
            evaluations: nm.evaluations,
            history: nm.history,
        };
        if best.as_ref().is_none_or(|b| candidate.log_likelihood > b.log_likelihood) {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| Error::invalid("fit.starts", "need at least one starting point"))
}

/// Yes/no counts drawn from the model with an unbiased criterion (`d'/2`).
pub fn synthesize_dataset(
    table: &DprimeTable,
    params: &FoveationParams,
    eccentricities: &[f64],
    trials_per_point: u64,
    contrast: f64,
    stream: SeedStream,
) -> Result<EccentricityDataset> {
    let mut rows = Vec::new();
    for (si, &signal) in table.signals.iter().enumerate() {
        for (ei, &e) in eccentricities.iter().enumerate() {
            let d = table
                .dprime(signal, e, contrast, params)
                .ok_or_else(|| Error::invalid("signal", "missing table"))?;
            let n_present = trials_per_point / 2;
            let n_absent = trials_per_point - n_present;
            let mut rng = stream.index((si * 1000 + ei) as u64).rng();
            let hr = normal_cdf(d / 2.0);
            let far = normal_cdf(-d / 2.0);
            let hits = Binomial::new(n_present, hr).map_err(|e| Error::invalid("rate", e.to_string()))?.sample(&mut rng);
            let fas = Binomial::new(n_absent, far).map_err(|e| Error::invalid("rate", e.to_string()))?.sample(&mut rng);
            rows.push(DatasetRow {
                signal,
                eccentricity_dva: e,
                n_trials: trials_per_point,
                n_hits: hits,
                n_fa: fas,
                n_present,
                n_absent,
                contrast,
            });
        }
    }
    Ok(EccentricityDataset { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_assignment() {
        assert_eq!(band_index(0.0), 0);
        assert_eq!(band_index(0.49), 0);
        assert_eq!(band_index(0.5), 1);
        assert_eq!(band_index(7.6), 8);
        assert_eq!(band_index(8.0), 8);
        assert_eq!(band_index(42.0), 9);
    }

    #[test]
    fn dataset_parsing_reports_lines() {
        let good = "signal,eccentricity_dva,n_trials,n_hits,n_fa,n_present,n_absent\nmcalc,0,100,40,5,50,50\nmass,2.5,10,3,1,5,5\n";
        let d = EccentricityDataset::from_reader(good.as_bytes()).unwrap();
        assert_eq!(d.rows.len(), 2);
        assert_eq!(d.rows[1].signal, SignalKind::Mass);
        assert_eq!(d.rows[1].contrast, FORCED_FIXATION_CONTRAST);
        let bad = "signal,eccentricity_dva,n_trials,n_hits,n_fa,n_present,n_absent\nmcalc,0,100,40,5,50,50\nmass,1,10,9,1,5,5\n";
        match EccentricityDataset::from_reader(bad.as_bytes()) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn profiled_criterion_matches_grid() {
        let row = DatasetRow {
            signal: SignalKind::Mass,
            eccentricity_dva: 0.0,
            n_trials: 200,
            n_hits: 70,
            n_fa: 20,
            n_present: 100,
            n_absent: 100,
            contrast: 0.65,
        };
        let d = 1.2;
        let grid_best = (0..20001)
            .map(|i| -5.0 + i as f64 * 5e-4)
            .map(|k| row_log_likelihood(&row, d, k))
            .fold(f64::NEG_INFINITY, f64::max);
        let p = profiled_log_likelihood(&row, d);
        assert!(p >= grid_best - 1e-9 && p - grid_best < 1e-4, "{p} vs {grid_best}");
    }
}
