//! Experiment orchestration: trial plans, standard-observer and search-model
//! runs, contrast matching, metrics and error classification.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channels::{default_dog_bank, default_gabor_bank, default_laguerre_gauss_bank, PatchSpec};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::fft::FftGrid;
use crate::foveation::{build_ladder, dprime_vs_eccentricity, LadderSpec};
use crate::observers::{
    cho_template, io_template, log_sum_exp, npw_template, npwe_template, DecisionRule, ObserverKind, ResponseStats,
    Template,
};
use crate::rng::SeedStream;
use crate::search::{
    best_threshold, cued_log_lr, run_fsm_trial, train_thresholds, FixationTrace, Fixation, FoveatedScanner, FsmMode,
    FsmOutcome, ScrollPolicy, SignalPlanes, SliceSpectra, StopReason, StoppingRule, TrainedThresholds, TrainingRecord,
    MAX_THRESHOLD_INDEX,
};
use crate::stats::{dprime_from_counts, proportion_se};
use crate::stimulus::{
    add_kernel, make_signal_profile, noise_spectrum_realization, power_law_amplitude, NoiseSpectrum, PlacementRegion,
    SignalKind, SignalSpec,
};
use crate::volume::{Kernel, Volume, VolumeGeometry};

/// In-plane tolerance for "fixated the signal".
pub const FIXATION_TOLERANCE_DVA: f64 = 1.0;
/// Half-extent in slices of the signal for error classification.
pub const SIGNAL_SLICE_HALF_EXTENT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lke,
    Search,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub signal: SignalKind,
    pub task: Task,
    pub three_d: bool,
}

impl Condition {
    pub fn new(signal: SignalKind, task: Task, three_d: bool) -> Self {
        Condition { signal, task, three_d }
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            self.signal.label(),
            match self.task {
                Task::Lke => "lke",
                Task::Search => "search",
            },
            if self.three_d { "3d" } else { "2d" }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Hit,
    CorrectRejection,
    FalseAlarm,
    SearchError,
    RecognitionError,
    /// A miss by an observer that keeps no fixation trace.
    Miss,
}

/// Classifies one trial. Misses need the fixation trace in search mode.
///
/// A miss is a search error when no fixation came within 1 dva in-plane of
/// the signal on a slice inside its 5-slice extent.
pub fn classify_errors(
    task: Task,
    present: bool,
    decision: bool,
    fixations: Option<&[Fixation]>,
    signal_location: Option<[usize; 3]>,
    geometry: &VolumeGeometry,
) -> Result<ErrorClass> {
    Ok(match (present, decision) {
        (true, true) => ErrorClass::Hit,
        (false, false) => ErrorClass::CorrectRejection,
        (false, true) => ErrorClass::FalseAlarm,
        (true, false) => {
            if task == Task::Lke {
                return Ok(ErrorClass::RecognitionError);
            }
            let fixes = fixations.ok_or_else(|| Error::invalid("fixations", "search-mode miss without a fixation trace"))?;
            let loc = signal_location.ok_or_else(|| Error::invalid("signal_location", "present trial without a location"))?;
            let fixated = fixes.iter().any(|f| {
                f.slice.abs_diff(loc[2]) <= SIGNAL_SLICE_HALF_EXTENT
                    && geometry.planar_distance_dva([f.x, f.y, 0], [loc[0], loc[1], 0]) <= FIXATION_TOLERANCE_DVA
            });
            if fixated {
                ErrorClass::RecognitionError
            } else {
                ErrorClass::SearchError
            }
        }
    })
}

/// Yes/no d' with rates clamped to `[1/(2n), 1 - 1/(2n)]`.
pub fn dprime_yesno(hits: u64, misses: u64, false_alarms: u64, correct_rejections: u64) -> Result<f64> {
    let np = hits + misses;
    let na = false_alarms + correct_rejections;
    if np == 0 || na == 0 {
        return Err(Error::invalid("trials", "need present and absent trials"));
    }
    Ok(dprime_from_counts(hits, np, false_alarms, na))
}

/// `(c_io / c_obs)^2` at matched performance.
pub fn statistical_efficiency(c_io: f64, c_obs: f64) -> Result<f64> {
    if !(c_io > 0.0 && c_obs > 0.0) {
        return Err(Error::invalid("contrast", "efficiency needs positive contrasts"));
    }
    Ok((c_io / c_obs).powi(2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub tolerance: f64,
    pub min_bracket: f64,
    pub max_contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub contrast: f64,
    pub pc: f64,
    pub se: f64,
    pub target: f64,
    pub evaluations: usize,
    /// False when the target lies outside `[PC(0), PC(max_contrast)]`.
    pub converged: bool,
}

/// Bisection on contrast for a target proportion correct.
///
/// `pc_at` returns `(PC, SE)` at a contrast. Stops when `|PC - target|` is
/// within tolerance or the bracket is narrower than `min_bracket`.
pub fn match_contrast(mut pc_at: impl FnMut(f64) -> (f64, f64), target: f64, opts: &MatchOptions) -> Result<MatchResult> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid("target", format!("target PC must lie in (0, 1), got {target}")));
    }
    let mut evaluations = 0;
    let mut eval = |c: f64| {
        evaluations += 1;
        pc_at(c)
    };
    let (pc0, se0) = eval(0.0);
    if pc0 >= target - opts.tolerance {
        return Ok(MatchResult {
            contrast: 0.0,
            pc: pc0,
            se: se0,
            target,
            evaluations,
            converged: true,
        });
    }
    let (mut lo, mut hi) = (0.0, opts.max_contrast.min(1.0));
    let mut at_hi = eval(hi);
    while at_hi.0 < target - opts.tolerance && hi < opts.max_contrast {
        lo = hi;
        hi = (2.0 * hi).min(opts.max_contrast);
        at_hi = eval(hi);
    }
    if at_hi.0 < target - opts.tolerance {
        return Ok(MatchResult {
            contrast: hi,
            pc: at_hi.0,
            se: at_hi.1,
            target,
            evaluations,
            converged: false,
        });
    }
    let mut best = (hi, at_hi);
    while hi - lo > opts.min_bracket {
        if (best.1 .0 - target).abs() <= opts.tolerance {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let r = eval(mid);
        if (r.0 - target).abs() < (best.1 .0 - target).abs() {
            best = (mid, r);
        }
        if r.0 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MatchResult {
        contrast: best.0,
        pc: best.1 .0,
        se: best.1 .1,
        target,
        evaluations,
        converged: true,
    })
}

/// One planned trial, shared by every observer and task of a signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub index: usize,
    pub noise_seed: u64,
    pub present: bool,
    /// Signal center when present, cued location otherwise.
    pub location: [usize; 3],
    pub internal_seed: u64,
}

impl TrialPlan {
    pub fn signal_location(&self) -> Option<[usize; 3]> {
        self.present.then_some(self.location)
    }

    /// Slice shown in the 2D condition.
    pub fn display_slice(&self, nz: usize) -> usize {
        if self.present {
            self.location[2]
        } else {
            nz / 2
        }
    }
}

/// Alternating present/absent trials; noise seeds depend only on the index
/// so both signals see the same backgrounds.
pub fn plan_trials(stream: &SeedStream, n: usize, signal: SignalKind, region: &PlacementRegion) -> Vec<TrialPlan> {
    (0..n)
        .map(|i| {
            let t = stream.index(i as u64);
            let mut rng = t.child("location").child(signal.label()).rng();
            TrialPlan {
                index: i,
                noise_seed: t.child("noise").seed(),
                present: i % 2 == 0,
                location: region.sample(&mut rng),
                internal_seed: t.child("internal").child(signal.label()).seed(),
            }
        })
        .collect()
}

/// Geometry, spectra and signal profiles shared by every run of a config.
pub struct Setup {
    pub config: ExperimentConfig,
    pub geometry: VolumeGeometry,
    pub plane_geometry: VolumeGeometry,
    pub grid: FftGrid,
    pub plane_grid: FftGrid,
    pub spectrum: NoiseSpectrum,
    pub plane_spectrum: NoiseSpectrum,
    pub amplitude: Vec<f64>,
    pub patch: PatchSpec,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let config = config.normalized();
        let geometry = VolumeGeometry::new(config.geometry.dims, config.geometry.pitch_dva)?;
        let [nx, ny, _] = geometry.dims;
        let plane_geometry = geometry.with_dims([nx, ny, 1]);
        let noise = config.noise.spec(config.seed);
        let spectrum = NoiseSpectrum::power_law(&noise, geometry.dims);
        let plane_spectrum = spectrum.marginal_2d();
        Ok(Setup {
            grid: FftGrid::new(geometry.dims),
            plane_grid: FftGrid::new(plane_geometry.dims),
            amplitude: power_law_amplitude(geometry.dims, noise.exponent),
            patch: PatchSpec::for_image(geometry.pitch_dva, nx, ny),
            spectrum,
            plane_spectrum,
            geometry,
            plane_geometry,
            config,
        })
    }

    pub fn mean(&self) -> f64 {
        self.config.noise.mean
    }

    pub fn signal_spec(&self, signal: SignalKind) -> SignalSpec {
        SignalSpec::new(signal, 1.0)
    }

    /// Unit-contrast profile in gray levels.
    pub fn profile(&self, signal: SignalKind) -> Result<Kernel> {
        make_signal_profile(&self.signal_spec(signal), self.mean(), &self.geometry)
    }

    pub fn region(&self, signal: SignalKind) -> Result<PlacementRegion> {
        PlacementRegion::for_signal(&self.geometry, &self.signal_spec(signal), 0, SIGNAL_SLICE_HALF_EXTENT)
    }

    /// DFT of the stack background of a trial (mean included).
    pub fn noise_hat(&self, plan: &TrialPlan) -> Vec<Complex64> {
        noise_spectrum_realization(&self.config.noise.spec(plan.noise_seed), &self.grid, &self.amplitude)
    }

    pub fn stream(&self, name: &str) -> SeedStream {
        SeedStream::new(self.config.seed).child(name)
    }
}

fn three_d_of(cond: &Condition) -> bool {
    cond.three_d
}

/// A standard linear observer bound to one signal and dimensionality.
pub struct StandardObserver {
    pub kind: ObserverKind,
    pub three_d: bool,
    pub template: Template,
    /// Response statistics at unit contrast, no internal noise.
    pub stats: ResponseStats,
    template_hat: Vec<Complex64>,
}

pub fn build_standard_observer(setup: &Setup, kind: ObserverKind, signal: &Kernel, three_d: bool) -> Result<StandardObserver> {
    let (spectrum, grid, sig, slices) = if three_d {
        (&setup.spectrum, &setup.grid, signal.clone(), setup.config.template_slices)
    } else {
        (&setup.plane_spectrum, &setup.plane_grid, signal.plane(0), 1)
    };
    let [nx, ny, _] = setup.geometry.dims;
    let plane = &setup.plane_spectrum;
    let template = match kind {
        ObserverKind::Io => io_template(spectrum, &sig),
        ObserverKind::Npw => npw_template(&sig),
        ObserverKind::Npwe => npwe_template(&sig, &setup.config.eye_filter, [nx, ny], setup.geometry.pitch_dva, slices)?,
        ObserverKind::ChoGabor => cho_template(kind, &default_gabor_bank(&setup.patch)?, plane, &sig, slices)?.template,
        ObserverKind::ChoLg => cho_template(kind, &default_laguerre_gauss_bank(&setup.patch)?, plane, &sig, slices)?.template,
        ObserverKind::ChoDog => cho_template(kind, &default_dog_bank(&setup.patch)?, plane, &sig, slices)?.template,
        ObserverKind::Fcho => return Err(Error::invalid("observer", "the search model is not a scanning linear observer")),
    };
    let stats = ResponseStats::analytic(&template, spectrum, &sig, setup.mean(), 0.0)?;
    let template_hat = template.spectrum(grid);
    Ok(StandardObserver {
        kind,
        three_d,
        template,
        stats,
        template_hat,
    })
}

/// Upper envelope of the response lines `n_v + c r_v` over `c >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseEnvelope {
    /// `(n, r, voxel)` sorted by increasing `r`.
    pub lines: Vec<(f64, f64, usize)>,
}

impl ResponseEnvelope {
    /// Exact envelope of the lines; only lines that win somewhere in
    /// `[0, c_max]` are candidates.
    pub fn new(points: impl Iterator<Item = (f64, f64, usize)> + Clone, c_max: f64) -> Self {
        let mut first = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0usize);
        for p in points.clone() {
            if p.0 > first.0 || (p.0 == first.0 && p.1 > first.1) {
                first = p;
            }
        }
        let bar = first.0 + c_max * first.1;
        let mut cand: Vec<(f64, f64, usize)> = points.filter(|p| p.1 > first.1 && p.0 + c_max * p.1 > bar).collect();
        cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
        let mut hull: Vec<(f64, f64, usize)> = vec![first];
        for p in cand {
            if hull.last().is_some_and(|h| h.1 == p.1) {
                continue;
            }
            while hull.len() >= 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                // b is redundant when it lies on or below the chord a-p
                let cross = (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
                if cross >= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        ResponseEnvelope { lines: hull }
    }

    /// Maximum response at contrast `c` and its voxel (first line on ties).
    pub fn eval(&self, c: f64) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for &(n, r, v) in &self.lines {
            let x = n + c * r;
            if x > best.0 {
                best = (x, v);
            }
        }
        best
    }
}

const SUM_TOP_BACKGROUND: usize = 256;
const SUM_TOP_SIGNAL: usize = 1024;
const SUM_BINS_BACKGROUND: usize = 1024;
const SUM_BINS_SIGNAL: usize = 256;

/// Compressed response field for the summed-likelihood decision.
///
/// The largest background responses and the largest signal responses are
/// kept exactly; the remaining voxels are pooled in a sparse 2D histogram
/// over (background, signal) response with per-bin means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumSummary {
    pub count: usize,
    pub exact: Vec<(f64, f64)>,
    /// `(count, mean n, mean r)` per non-empty bin.
    pub bins: Vec<(u32, f64, f64)>,
}

impl SumSummary {
    pub fn new(points: &[(f64, f64)]) -> Self {
        let n = points.len();
        let mut keep = vec![false; n];
        let mut order: Vec<usize> = (0..n).collect();
        let k = SUM_TOP_BACKGROUND.min(n);
        if k > 0 {
            order.select_nth_unstable_by(n - k, |&a, &b| points[a].0.total_cmp(&points[b].0));
            for &i in &order[n - k..] {
                keep[i] = true;
            }
        }
        let k = SUM_TOP_SIGNAL.min(n);
        if k > 0 && points.iter().any(|p| p.1 != 0.0) {
            order.select_nth_unstable_by(n - k, |&a, &b| points[a].1.total_cmp(&points[b].1));
            for &i in &order[n - k..] {
                keep[i] = true;
            }
        }
        let mut exact = Vec::new();
        let (mut nlo, mut nhi, mut rlo, mut rhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            if keep[i] {
                exact.push(*p);
            } else {
                nlo = nlo.min(p.0);
                nhi = nhi.max(p.0);
                rlo = rlo.min(p.1);
                rhi = rhi.max(p.1);
            }
        }
        let wn = ((nhi - nlo) / SUM_BINS_BACKGROUND as f64).max(f64::MIN_POSITIVE);
        let wr = ((rhi - rlo) / SUM_BINS_SIGNAL as f64).max(f64::MIN_POSITIVE);
        let mut map: std::collections::BTreeMap<(usize, usize), (u32, f64, f64)> = Default::default();
        for (i, p) in points.iter().enumerate() {
            if keep[i] {
                continue;
            }
            let bn = (((p.0 - nlo) / wn) as usize).min(SUM_BINS_BACKGROUND - 1);
            let br = (((p.1 - rlo) / wr) as usize).min(SUM_BINS_SIGNAL - 1);
            let e = map.entry((bn, br)).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += p.0;
            e.2 += p.1;
        }
        let bins = map.into_values().map(|(k, sn, sr)| (k, sn / k as f64, sr / k as f64)).collect();
        SumSummary { count: n, exact, bins }
    }

    /// `log mean_v LR_v` at contrast `c` for unit-contrast statistics.
    pub fn log_mean_lr(&self, stats: &ResponseStats, c: f64) -> f64 {
        let s = stats.with_signal_scale(c);
        let terms = self
            .exact
            .iter()
            .map(|&(n, r)| s.log_lr(n + c * r))
            .chain(self.bins.iter().map(|&(k, n, r)| (k as f64).ln() + s.log_lr(n + c * r)));
        log_sum_exp(terms.collect::<Vec<f64>>()) - (self.count as f64).ln()
    }
}

/// Contrast-free summary of one trial for one standard observer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTrial {
    pub plan: TrialPlan,
    /// Background and unit-signal responses at the cued location.
    pub cue: (f64, f64),
    pub envelope: ResponseEnvelope,
    pub sum: Option<SumSummary>,
}

/// Decision of a standard observer on one summarized trial.
pub fn linear_statistic(obs_stats: &ResponseStats, rule: DecisionRule, task: Task, t: &LinearTrial, c: f64) -> (f64, usize) {
    match task {
        Task::Lke => {
            let s = obs_stats.with_signal_scale(c);
            (s.log_lr(t.cue.0 + c * t.cue.1), 0)
        }
        Task::Search => {
            let (m, v) = t.envelope.eval(c);
            match rule {
                DecisionRule::Max => (obs_stats.with_signal_scale(c).log_lr(m), v),
                DecisionRule::Sum => (t.sum.as_ref().map_or(f64::NAN, |s| s.log_mean_lr(obs_stats, c)), v),
            }
        }
    }
}

fn region_indices(region: &PlacementRegion, dims: [usize; 3]) -> Vec<usize> {
    let mut out = Vec::with_capacity(region.count());
    for z in region.lo[2]..=region.hi[2] {
        for y in region.lo[1]..=region.hi[1] {
            for x in region.lo[0]..=region.hi[0] {
                out.push(x + dims[0] * (y + dims[1] * z));
            }
        }
    }
    out
}

/// Summaries of every trial for a set of observers sharing one condition family.
pub struct LinearRun {
    pub signal: SignalKind,
    pub three_d: bool,
    pub observers: Vec<StandardObserver>,
    /// `trials[observer][trial]`.
    pub trials: Vec<Vec<LinearTrial>>,
}

/// Scans every planned trial with every observer and keeps contrast-free summaries.
pub fn simulate_linear(
    setup: &Setup,
    signal: SignalKind,
    three_d: bool,
    kinds: &[ObserverKind],
    plans: &[TrialPlan],
) -> Result<LinearRun> {
    let profile = setup.profile(signal)?;
    let observers = kinds
        .iter()
        .map(|&k| build_standard_observer(setup, k, &profile, three_d))
        .collect::<Result<Vec<_>>>()?;
    let region = setup.region(signal)?;
    let (geom, grid) = if three_d {
        (setup.geometry, &setup.grid)
    } else {
        (setup.plane_geometry, &setup.plane_grid)
    };
    let region = if three_d { region } else { region.planar() };
    let indices = region_indices(&region, geom.dims);
    let c_max = setup.config.matching.max_contrast.max(setup.config.contrast());
    let plane_signal = profile.plane(0);
    let nz = setup.geometry.dims[2];
    let per_trial: Vec<Vec<LinearTrial>> = plans
        .par_iter()
        .map(|plan| -> Result<Vec<LinearTrial>> {
            let stack_hat = setup.noise_hat(plan);
            let (noise_hat, loc) = if three_d {
                (stack_hat, plan.location)
            } else {
                let z = plan.display_slice(nz);
                let slices = SliceSpectra::from_volume_spectrum(&stack_hat, setup.geometry.dims).single(z);
                (slices.slices.into_iter().next().expect("one slice"), [plan.location[0], plan.location[1], 0])
            };
            let signal_hat = if plan.present {
                let mut vol = Volume::zeros(geom);
                add_kernel(&mut vol, if three_d { &profile } else { &plane_signal }, loc, 1.0)?;
                Some(grid.forward_real(vol.data()))
            } else {
                None
            };
            let cue = geom.index(loc[0], loc[1], loc[2]);
            Ok(observers
                .iter()
                .map(|obs| {
                    let n = grid.correlate(&obs.template_hat, &noise_hat);
                    let r = signal_hat.as_ref().map(|s| grid.correlate(&obs.template_hat, s));
                    let rv = |i: usize| r.as_ref().map_or(0.0, |r| r[i]);
                    let points = indices.iter().map(|&i| (n[i], rv(i), i));
                    let envelope = ResponseEnvelope::new(points, c_max);
                    let sum = (obs.kind.rule() == DecisionRule::Sum).then(|| {
                        let pts: Vec<(f64, f64)> = indices.iter().map(|&i| (n[i], rv(i))).collect();
                        SumSummary::new(&pts)
                    });
                    LinearTrial {
                        plan: *plan,
                        cue: (n[cue], rv(cue)),
                        envelope,
                        sum,
                    }
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trials: Vec<Vec<LinearTrial>> = (0..observers.len()).map(|_| Vec::with_capacity(plans.len())).collect();
    for row in per_trial {
        for (o, t) in row.into_iter().enumerate() {
            trials[o].push(t);
        }
    }
    Ok(LinearRun {
        signal,
        three_d,
        observers,
        trials,
    })
}

/// Proportion correct of one observer on a summarized condition.
///
/// Cued decisions and summed likelihoods use the Bayes criterion (log LR > 0);
/// maximum-response decisions use the PC-maximizing criterion on these trials.
pub fn linear_pc(run: &LinearRun, observer: usize, task: Task, c: f64) -> (f64, f64, Vec<(bool, f64, usize)>) {
    let obs = &run.observers[observer];
    let stats: Vec<(f64, usize)> = run.trials[observer]
        .iter()
        .map(|t| linear_statistic(&obs.stats, obs.kind.rule(), task, t, c))
        .collect();
    let threshold = if task == Task::Search && obs.kind.rule() == DecisionRule::Max {
        let mut pres = Vec::new();
        let mut abs = Vec::new();
        for (t, s) in run.trials[observer].iter().zip(&stats) {
            if t.plan.present {
                pres.push(s.0);
            } else {
                abs.push(s.0);
            }
        }
        best_threshold(&pres, &abs).0
    } else {
        0.0
    };
    let decisions: Vec<(bool, f64, usize)> = stats.iter().map(|&(s, v)| (s > threshold, s, v)).collect();
    let n = decisions.len();
    let correct = run.trials[observer]
        .iter()
        .zip(&decisions)
        .filter(|(t, d)| t.plan.present == d.0)
        .count();
    let pc = correct as f64 / n as f64;
    (pc, proportion_se(pc, n), decisions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub experiment: String,
    pub observer: String,
    pub condition: Condition,
    pub trial: usize,
    pub noise_seed: u64,
    pub present: bool,
    pub contrast: f64,
    pub decision: bool,
    pub statistic: f64,
    pub location: [usize; 3],
    pub signal_location: Option<[usize; 3]>,
    pub error_class: ErrorClass,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fixations: Option<Vec<Fixation>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stop_reason: Option<StopReason>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub explored_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub observer: String,
    pub condition: Condition,
    pub contrast: f64,
    pub matched: bool,
    pub n: usize,
    pub pc: f64,
    pub se: f64,
    pub dprime: f64,
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_rejections: u64,
    pub search_errors: u64,
    pub recognition_errors: u64,
    pub efficiency: Option<f64>,
}

impl Metrics {
    pub fn from_records(records: &[TrialRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::invalid("records", "no records"))?;
        let count = |c: ErrorClass| records.iter().filter(|r| r.error_class == c).count() as u64;
        let hits = count(ErrorClass::Hit);
        let crs = count(ErrorClass::CorrectRejection);
        let fas = count(ErrorClass::FalseAlarm);
        let search = count(ErrorClass::SearchError);
        let recog = count(ErrorClass::RecognitionError);
        let misses = search + recog + count(ErrorClass::Miss);
        let n = records.len();
        let pc = (hits + crs) as f64 / n as f64;
        Ok(Metrics {
            observer: first.observer.clone(),
            condition: first.condition,
            contrast: first.contrast,
            matched: false,
            n,
            pc,
            se: proportion_se(pc, n),
            dprime: dprime_yesno(hits, misses, fas, crs).unwrap_or(f64::NAN),
            hits,
            misses,
            false_alarms: fas,
            correct_rejections: crs,
            search_errors: search,
            recognition_errors: recog,
            efficiency: None,
        })
    }

    /// Non-overlapping one-SE bars with `self` above `other`.
    pub fn exceeds(&self, other: &Metrics) -> bool {
        self.pc - self.se > other.pc + other.se
    }
}

fn linear_records(
    experiment: ExperimentKind,
    run: &LinearRun,
    observer: usize,
    task: Task,
    c: f64,
    setup: &Setup,
) -> Result<Vec<TrialRecord>> {
    let (_, _, decisions) = linear_pc(run, observer, task, c);
    let geom = if run.three_d { setup.geometry } else { setup.plane_geometry };
    let condition = Condition::new(run.signal, task, run.three_d);
    run.trials[observer]
        .iter()
        .zip(decisions)
        .map(|(t, (yes, stat, voxel))| {
            let plan = t.plan;
            let loc3 = if run.three_d { plan.location } else { [plan.location[0], plan.location[1], 0] };
            let location = if task == Task::Lke { loc3 } else { geom.coords(voxel) };
            let class = match (plan.present, yes) {
                (true, false) if task == Task::Search => ErrorClass::Miss,
                _ => classify_errors(task, plan.present, yes, None, plan.present.then_some(loc3), &geom)?,
            };
            Ok(TrialRecord {
                experiment: experiment.label().into(),
                observer: run.observers[observer].kind.label().into(),
                condition,
                trial: plan.index,
                noise_seed: plan.noise_seed,
                present: plan.present,
                contrast: c,
                decision: yes,
                statistic: stat,
                location,
                signal_location: plan.present.then_some(loc3),
                error_class: class,
                fixations: None,
                stop_reason: None,
                explored_fraction: None,
            })
        })
        .collect()
}

/// A ready-to-run search model for one condition.
pub struct SearchModel {
    pub condition: Condition,
    pub contrast: f64,
    pub scanner: FoveatedScanner,
    /// Band statistics at the model contrast.
    pub stats: Vec<ResponseStats>,
    pub signal_planes: SignalPlanes,
    pub rule: StoppingRule,
    pub policy: ScrollPolicy,
    pub final_threshold: f64,
    pub max_fixations: usize,
}

impl SearchModel {
    pub fn new(setup: &Setup, condition: Condition, contrast: f64) -> Result<Self> {
        let profile = setup.profile(condition.signal)?;
        let cfg = &setup.config;
        let (sig, spectrum, geom, slices) = if condition.three_d {
            (profile, &setup.spectrum, setup.geometry, cfg.template_slices)
        } else {
            (profile.plane(0), &setup.plane_spectrum, setup.plane_geometry, 1)
        };
        let ladder = build_ladder(
            &sig,
            spectrum,
            setup.mean(),
            &cfg.foveation,
            &LadderSpec::foveal(&setup.patch, slices),
            &setup.patch,
        )?;
        let mut scanner = FoveatedScanner::new(ladder, geom, setup.region(condition.signal)?)?;
        scanner.ior_radius_dva = cfg.search.ior_radius_dva;
        let stats = scanner.ladder.bands.iter().map(|b| b.stats.with_signal_scale(contrast)).collect();
        let [nx, ny, _] = setup.geometry.dims;
        let mut rule = StoppingRule::coverage_only(cfg.search.coverage.get(condition.signal, condition.three_d));
        rule.ufov_radius_dva = cfg.search.ufov_radius_dva;
        Ok(SearchModel {
            condition,
            contrast,
            scanner,
            stats,
            signal_planes: SignalPlanes::new(&sig, [nx, ny]),
            rule,
            policy: ScrollPolicy {
                trigger_fraction: cfg.search.scroll_fraction.get(condition.signal),
            },
            final_threshold: 0.0,
            max_fixations: cfg.search.max_fixations,
        })
    }

    /// Per-slice spectra of the displayed stimulus of a trial.
    pub fn stimulus(&self, setup: &Setup, plan: &TrialPlan) -> SliceSpectra {
        let hat = setup.noise_hat(plan);
        let mut slices = SliceSpectra::from_volume_spectrum(&hat, setup.geometry.dims);
        let mut loc = plan.location;
        if !self.condition.three_d {
            slices = slices.single(plan.display_slice(setup.geometry.dims[2]));
            loc[2] = 0;
        }
        if plan.present {
            slices.add_signal(&self.signal_planes, loc, self.contrast);
        }
        slices
    }

    pub fn run_trial(&self, setup: &Setup, plan: &TrialPlan, rule: &StoppingRule, policy: &ScrollPolicy) -> Result<FsmOutcome> {
        let slices = self.stimulus(setup, plan);
        run_fsm_trial(
            &self.scanner,
            &slices,
            &self.stats,
            FsmMode::Map {
                rule,
                policy,
                max_fixations: self.max_fixations,
            },
            self.final_threshold,
            SeedStream::new(plan.internal_seed).rng(),
        )
    }

    pub fn replay_trial(&self, setup: &Setup, plan: &TrialPlan, trace: &[Fixation]) -> Result<FsmOutcome> {
        let slices = self.stimulus(setup, plan);
        run_fsm_trial(
            &self.scanner,
            &slices,
            &self.stats,
            FsmMode::Replay(trace),
            self.final_threshold,
            SeedStream::new(plan.internal_seed).rng(),
        )
    }

    /// Cued single-fixation log likelihood ratio.
    pub fn cued_trial(&self, setup: &Setup, plan: &TrialPlan) -> f64 {
        let slices = self.stimulus(setup, plan);
        let mut loc = plan.location;
        if !self.condition.three_d {
            loc[2] = 0;
        }
        let mut rng = SeedStream::new(plan.internal_seed).rng();
        cued_log_lr(&self.scanner, &slices, &self.stats, loc, &mut rng)
    }
}

/// Threshold training summary for one search condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub condition: Condition,
    pub contrast: f64,
    pub trials: usize,
    pub per_count: TrainedThresholds,
    pub final_threshold: f64,
    /// PC of the final threshold on the training trials.
    pub training_pc: f64,
    /// Records the per-count thresholds were trained on.
    pub per_count_records: Vec<TrainingRecord>,
    /// Final-pass statistics, kept for auditing the threshold choice.
    pub training_statistics: Vec<(bool, f64)>,
    pub training_records: Vec<TrainingRecord>,
}

fn outcomes(model: &SearchModel, setup: &Setup, plans: &[TrialPlan], rule: &StoppingRule, policy: &ScrollPolicy) -> Result<Vec<FsmOutcome>> {
    plans.par_iter().map(|p| model.run_trial(setup, p, rule, policy)).collect()
}

fn training_records(plans: &[TrialPlan], outs: &[FsmOutcome]) -> Vec<TrainingRecord> {
    plans
        .iter()
        .zip(outs)
        .map(|(p, o)| TrainingRecord {
            present: p.present,
            events: o.events.clone(),
        })
        .collect()
}

/// Trains the per-count stopping thresholds and the final criterion.
///
/// First pass: coverage stopping with pure drilling, giving the single-
/// fixation threshold. Second pass: saccades triggered relative to that
/// threshold, evidence stopping off, giving thresholds per fixation count.
/// Third pass: the full rule, giving the final yes/no criterion.
pub fn train_search_model(model: &mut SearchModel, setup: &Setup, plans: &[TrialPlan]) -> Result<TrainingReport> {
    let open = StoppingRule {
        thresholds: vec![f64::INFINITY; MAX_THRESHOLD_INDEX + 1],
        ..model.rule.clone()
    };
    let first = outcomes(model, setup, plans, &open, &model.policy)?;
    let recs = training_records(plans, &first);
    let (per_count, per_count_records) = if model.condition.three_d {
        let pass_a = train_thresholds(&recs)?;
        let trigger = StoppingRule {
            thresholds: vec![pass_a.thresholds[1]; MAX_THRESHOLD_INDEX + 1],
            ..open.clone()
        };
        // evidence stopping stays off; only the saccade trigger uses the trained value
        let second: Vec<FsmOutcome> = plans
            .par_iter()
            .map(|p| {
                let slices = model.stimulus(setup, p);
                crate::search::run_fsm_trial_with_trigger(
                    &model.scanner,
                    &slices,
                    &model.stats,
                    &open,
                    &model.policy,
                    trigger.foveal_threshold(),
                    model.max_fixations,
                    SeedStream::new(p.internal_seed).rng(),
                )
            })
            .collect::<Result<_>>()?;
        let recs = training_records(plans, &second);
        (train_thresholds(&recs)?, recs)
    } else {
        (train_thresholds(&recs)?, recs)
    };
    model.rule.thresholds = per_count.thresholds.clone();
    let rule = model.rule.clone();
    let third = outcomes(model, setup, plans, &rule, &model.policy)?;
    let stats: Vec<(bool, f64)> = plans.iter().zip(&third).map(|(p, o)| (p.present, o.decision.statistic)).collect();
    let pres: Vec<f64> = stats.iter().filter(|s| s.0).map(|s| s.1).collect();
    let abs: Vec<f64> = stats.iter().filter(|s| !s.0).map(|s| s.1).collect();
    let (threshold, pc) = best_threshold(&pres, &abs);
    model.final_threshold = threshold;
    Ok(TrainingReport {
        condition: model.condition,
        contrast: model.contrast,
        trials: plans.len(),
        per_count,
        final_threshold: threshold,
        training_pc: pc,
        per_count_records,
        training_statistics: stats,
        training_records: training_records(plans, &third),
    })
}

pub fn search_records(
    experiment: ExperimentKind,
    model: &SearchModel,
    setup: &Setup,
    plans: &[TrialPlan],
) -> Result<Vec<TrialRecord>> {
    let geom = if model.condition.three_d { setup.geometry } else { setup.plane_geometry };
    let rule = model.rule.clone();
    let outs = outcomes(model, setup, plans, &rule, &model.policy)?;
    plans
        .iter()
        .zip(outs)
        .map(|(p, o)| {
            let mut loc = p.location;
            if !model.condition.three_d {
                loc[2] = 0;
            }
            let sig_loc = p.present.then_some(loc);
            let class = classify_errors(Task::Search, p.present, o.decision.present, Some(&o.fixations), sig_loc, &geom)?;
            Ok(TrialRecord {
                experiment: experiment.label().into(),
                observer: ObserverKind::Fcho.label().into(),
                condition: model.condition,
                trial: p.index,
                noise_seed: p.noise_seed,
                present: p.present,
                contrast: model.contrast,
                decision: o.decision.present,
                statistic: o.decision.statistic,
                location: o.decision.location,
                signal_location: sig_loc,
                error_class: class,
                fixations: Some(o.fixations),
                stop_reason: Some(o.stop_reason),
                explored_fraction: Some(o.explored_fraction),
            })
        })
        .collect()
}

pub fn cued_records(experiment: ExperimentKind, model: &SearchModel, setup: &Setup, plans: &[TrialPlan]) -> Result<Vec<TrialRecord>> {
    let geom = if model.condition.three_d { setup.geometry } else { setup.plane_geometry };
    let stats: Vec<f64> = plans.par_iter().map(|p| model.cued_trial(setup, p)).collect();
    plans
        .iter()
        .zip(stats)
        .map(|(p, s)| {
            let yes = s > 0.0;
            Ok(TrialRecord {
                experiment: experiment.label().into(),
                observer: ObserverKind::Fcho.label().into(),
                condition: model.condition,
                trial: p.index,
                noise_seed: p.noise_seed,
                present: p.present,
                contrast: model.contrast,
                decision: yes,
                statistic: s,
                location: p.location,
                signal_location: p.signal_location(),
                error_class: classify_errors(Task::Lke, p.present, yes, None, p.signal_location(), &geom)?,
                fixations: None,
                stop_reason: None,
                explored_fraction: None,
            })
        })
        .collect()
}

/// Forced-fixation d' for one band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccentricityRow {
    pub signal: SignalKind,
    pub eccentricity_dva: f64,
    pub analytic_dprime: f64,
    pub dprime: f64,
    pub n_present: u64,
    pub n_absent: u64,
    pub hits: u64,
    pub false_alarms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub observer: String,
    pub matched_on: Condition,
    pub result: MatchResult,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<TrialRecord>,
    pub metrics: Vec<Metrics>,
    pub matches: Vec<MatchRecord>,
    pub training: Vec<TrainingReport>,
    pub eccentricity: Vec<EccentricityRow>,
}

impl ExperimentResult {
    pub fn metric(&self, observer: &str, condition: Condition) -> Option<&Metrics> {
        self.metrics.iter().find(|m| m.observer == observer && m.condition == condition)
    }

    /// One JSON record per line.
    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "observer", "signal", "task", "dims", "contrast", "matched", "n", "pc", "se", "dprime", "hits", "misses",
            "false_alarms", "correct_rejections", "search_errors", "recognition_errors", "efficiency",
        ])
        .map_err(|e| Error::Io(e.into()))?;
        for m in &self.metrics {
            let c = m.condition;
            out.write_record([
                m.observer.clone(),
                c.signal.label().into(),
                if c.task == Task::Lke { "lke".into() } else { "search".into() },
                if c.three_d { "3d".into() } else { "2d".into() },
                format!("{}", m.contrast),
                m.matched.to_string(),
                m.n.to_string(),
                format!("{}", m.pc),
                format!("{}", m.se),
                format!("{}", m.dprime),
                m.hits.to_string(),
                m.misses.to_string(),
                m.false_alarms.to_string(),
                m.correct_rejections.to_string(),
                m.search_errors.to_string(),
                m.recognition_errors.to_string(),
                m.efficiency.map(|e| e.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Conditions scored by an experiment.
pub fn experiment_conditions(kind: ExperimentKind, signals: &[SignalKind]) -> Vec<Condition> {
    let mut out = Vec::new();
    for &s in signals {
        match kind {
            ExperimentKind::Lke3dVsSearch3d => {
                out.push(Condition::new(s, Task::Lke, true));
                out.push(Condition::new(s, Task::Search, true));
            }
            ExperimentKind::Search2dVs3d => {
                out.push(Condition::new(s, Task::Search, true));
                out.push(Condition::new(s, Task::Search, false));
            }
            ExperimentKind::ForcedFixation => {}
        }
    }
    out
}

/// Standard-observer summaries for the stack and slice versions of each signal.
pub struct LinearStudy {
    pub runs: Vec<LinearRun>,
}

impl LinearStudy {
    pub fn run(&self, signal: SignalKind, three_d: bool) -> Option<&LinearRun> {
        self.runs.iter().find(|r| r.signal == signal && r.three_d == three_d)
    }
}

pub fn evaluation_plans(setup: &Setup, signal: SignalKind) -> Result<Vec<TrialPlan>> {
    Ok(plan_trials(&setup.stream("evaluation"), setup.config.trials, signal, &setup.region(signal)?))
}

pub fn training_plans(setup: &Setup, signal: SignalKind) -> Result<Vec<TrialPlan>> {
    Ok(plan_trials(&setup.stream("training"), setup.config.training_trials, signal, &setup.region(signal)?))
}

/// Runs the scanning linear observers of a config on every condition it needs.
pub fn simulate_linear_study(setup: &Setup, conditions: &[Condition]) -> Result<LinearStudy> {
    let kinds: Vec<ObserverKind> = setup.config.observers.iter().copied().filter(|k| *k != ObserverKind::Fcho).collect();
    let mut runs = Vec::new();
    if kinds.is_empty() {
        return Ok(LinearStudy { runs });
    }
    for &signal in &setup.config.signals {
        let plans = evaluation_plans(setup, signal)?;
        for three_d in [true, false] {
            if conditions.iter().any(|c| c.signal == signal && three_d_of(c) == three_d) {
                log::info!("scanning {} {} trials ({})", plans.len(), signal.label(), if three_d { "3d" } else { "2d" });
                runs.push(simulate_linear(setup, signal, three_d, &kinds, &plans)?);
            }
        }
    }
    Ok(LinearStudy { runs })
}

fn match_opts(setup: &Setup) -> MatchOptions {
    MatchOptions {
        tolerance: setup.config.matching.tolerance,
        min_bracket: setup.config.matching.min_bracket,
        max_contrast: setup.config.matching.max_contrast,
    }
}

/// Contrast per (observer, condition) following the matching protocol.
///
/// Cued vs search: per task, the contrast matching the mass target is used
/// for both signals. Slice vs stack: per signal, the contrast matching the
/// stack-search target is used for both dimensionalities.
pub fn matched_contrasts(
    setup: &Setup,
    study: &LinearStudy,
    kind: ExperimentKind,
    conditions: &[Condition],
) -> Result<(Vec<(usize, Condition, f64, bool)>, Vec<MatchRecord>)> {
    let cfg = &setup.config;
    let opts = match_opts(setup);
    let mut out = Vec::new();
    let mut records = Vec::new();
    let n_obs = study.runs.first().map_or(0, |r| r.observers.len());
    for o in 0..n_obs {
        let label = study.runs[0].observers[o].kind.label().to_string();
        let mut cache: Vec<(Condition, f64)> = Vec::new();
        let mut find = |cond: Condition, target: f64| -> Result<Option<f64>> {
            if let Some((_, c)) = cache.iter().find(|(k, _)| *k == cond) {
                return Ok(Some(*c));
            }
            let Some(run) = study.run(cond.signal, cond.three_d) else {
                return Ok(None);
            };
            let res = match_contrast(
                |c| {
                    let (pc, se, _) = linear_pc(run, o, cond.task, c);
                    (pc, se)
                },
                target,
                &opts,
            )?;
            let c = res.contrast;
            cache.push((cond, c));
            records.push(MatchRecord {
                observer: label.clone(),
                matched_on: cond,
                result: res,
            });
            Ok(Some(c))
        };
        for cond in conditions {
            let matched = if !cfg.matching.enabled {
                None
            } else {
                match kind {
                    ExperimentKind::Lke3dVsSearch3d if cfg.signals.contains(&SignalKind::Mass) => {
                        let target = if cond.task == Task::Lke { cfg.matching.lke_mass } else { cfg.matching.search3d_mass };
                        find(Condition::new(SignalKind::Mass, cond.task, true), target)?
                    }
                    ExperimentKind::Search2dVs3d => {
                        find(Condition::new(cond.signal, Task::Search, true), cfg.matching.search3d.get(cond.signal))?
                    }
                    _ => None,
                }
            };
            out.push((o, *cond, matched.unwrap_or(cfg.contrast()), matched.is_some()));
        }
    }
    Ok((out, records))
}

/// Runs a configured experiment end to end.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let setup = Setup::new(config)?;
    let kind = setup.config.experiment;
    if kind == ExperimentKind::ForcedFixation {
        return Ok(ExperimentResult {
            eccentricity: forced_fixation(&setup)?,
            ..Default::default()
        });
    }
    let conditions = experiment_conditions(kind, &setup.config.signals);
    run_conditions(&setup, &conditions)
}

/// Scores every configured observer on a subset of conditions of the configured experiment.
pub fn run_conditions(setup: &Setup, conditions: &[Condition]) -> Result<ExperimentResult> {
    let kind = setup.config.experiment;
    let mut result = ExperimentResult::default();
    let study = simulate_linear_study(setup, conditions)?;
    evaluate_linear(setup, &study, kind, conditions, &mut result)?;
    if setup.config.observers.contains(&ObserverKind::Fcho) {
        evaluate_search_model(setup, kind, conditions, &mut result)?;
    }
    Ok(result)
}

/// Metrics per (observer, condition, contrast) in order of first appearance.
pub fn metrics_from_records(records: &[TrialRecord]) -> Result<Vec<Metrics>> {
    let mut groups: Vec<((String, Condition, u64), Vec<TrialRecord>)> = Vec::new();
    for r in records {
        let key = (r.observer.clone(), r.condition, r.contrast.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.clone()),
            None => groups.push((key, vec![r.clone()])),
        }
    }
    groups.iter().map(|(_, v)| Metrics::from_records(v)).collect()
}

/// Scores the scanning linear observers of a study for one experiment.
pub fn evaluate_linear(
    setup: &Setup,
    study: &LinearStudy,
    kind: ExperimentKind,
    conditions: &[Condition],
    result: &mut ExperimentResult,
) -> Result<()> {
    let (contrasts, matches) = matched_contrasts(setup, study, kind, conditions)?;
    result.matches.extend(matches);
    let mut io_contrast: Vec<(Condition, f64)> = Vec::new();
    let mut metrics = Vec::new();
    for (o, cond, c, matched) in contrasts {
        let Some(run) = study.run(cond.signal, cond.three_d) else { continue };
        let records = linear_records(kind, run, o, cond.task, c, setup)?;
        let mut m = Metrics::from_records(&records)?;
        m.matched = matched;
        if run.observers[o].kind == ObserverKind::Io {
            io_contrast.push((cond, c));
        }
        metrics.push(m);
        result.records.extend(records);
    }
    for m in &mut metrics {
        if !m.matched {
            continue;
        }
        if let Some((_, cio)) = io_contrast.iter().find(|(c, _)| *c == m.condition) {
            m.efficiency = statistical_efficiency(*cio, m.contrast).ok();
        }
    }
    result.metrics.extend(metrics);
    Ok(())
}

/// Trains and evaluates the search model on each condition at the experiment contrast.
pub fn evaluate_search_model(
    setup: &Setup,
    kind: ExperimentKind,
    conditions: &[Condition],
    result: &mut ExperimentResult,
) -> Result<()> {
    let contrast = setup.config.contrast();
    for cond in conditions {
        log::info!("search model on {}", cond.label());
        let mut model = SearchModel::new(setup, *cond, contrast)?;
        let plans = evaluation_plans(setup, cond.signal)?;
        let records = match cond.task {
            Task::Lke => cued_records(kind, &model, setup, &plans)?,
            Task::Search => {
                let train = training_plans(setup, cond.signal)?;
                let report = train_search_model(&mut model, setup, &train)?;
                result.training.push(report);
                search_records(kind, &model, setup, &plans)?
            }
        };
        result.metrics.push(Metrics::from_records(&records)?);
        result.records.extend(records);
    }
    Ok(())
}

/// Forced-fixation d' per band on planar stimuli.
pub fn forced_fixation(setup: &Setup) -> Result<Vec<EccentricityRow>> {
    let mut rows = Vec::new();
    let contrast = setup.config.contrast();
    for &signal in &setup.config.signals {
        let sig = setup.profile(signal)?.plane(0);
        let ladder = build_ladder(
            &sig,
            &setup.plane_spectrum,
            setup.mean(),
            &setup.config.foveation,
            &LadderSpec::foveal(&setup.patch, 1),
            &setup.patch,
        )?;
        let outcomes = dprime_vs_eccentricity(
            &ladder,
            &setup.plane_spectrum,
            setup.mean(),
            contrast,
            setup.config.trials,
            setup.stream("forced_fixation").child(signal.label()),
        )?;
        for o in outcomes {
            if !setup.config.eccentricities.iter().any(|e| (e - o.eccentricity).abs() < 1e-9) {
                continue;
            }
            rows.push(EccentricityRow {
                signal,
                eccentricity_dva: o.eccentricity,
                analytic_dprime: o.analytic,
                dprime: o.dprime(),
                n_present: o.n_present,
                n_absent: o.n_absent,
                hits: o.hits,
                false_alarms: o.false_alarms,
            });
        }
    }
    Ok(rows)
}

/// Replays recorded fixations through the search model, one trace per trial index.
pub fn replay_experiment(setup: &Setup, condition: Condition, trace: &FixationTrace) -> Result<Vec<TrialRecord>> {
    let mut model = SearchModel::new(setup, condition, setup.config.contrast())?;
    let train = training_plans(setup, condition.signal)?;
    train_search_model(&mut model, setup, &train)?;
    let plans = evaluation_plans(setup, condition.signal)?;
    let geom = if condition.three_d { setup.geometry } else { setup.plane_geometry };
    let mut out = Vec::new();
    for (&trial, fixes) in &trace.trials {
        let plan = plans
            .get(trial as usize)
            .ok_or_else(|| Error::Trace { line: 0, reason: format!("trial {trial} exceeds the {} planned trials", plans.len()) })?;
        let o = model.replay_trial(setup, plan, fixes)?;
        let mut loc = plan.location;
        if !condition.three_d {
            loc[2] = 0;
        }
        let sig_loc = plan.present.then_some(loc);
        out.push(TrialRecord {
            experiment: "replay".into(),
            observer: ObserverKind::Fcho.label().into(),
            condition,
            trial: plan.index,
            noise_seed: plan.noise_seed,
            present: plan.present,
            contrast: model.contrast,
            decision: o.decision.present,
            statistic: o.decision.statistic,
            location: o.decision.location,
            signal_location: sig_loc,
            error_class: classify_errors(Task::Search, plan.present, o.decision.present, Some(&o.fixations), sig_loc, &geom)?,
            fixations: Some(o.fixations),
            stop_reason: Some(o.stop_reason),
            explored_fraction: Some(o.explored_fraction),
        });
    }
    Ok(out)
}

/// Random-walk synthetic fixation traces for exercising replay.
pub fn synthetic_trace(geometry: &VolumeGeometry, trials: usize, fixations: usize, stream: &SeedStream) -> FixationTrace {
    let mut trace = FixationTrace::default();
    for t in 0..trials {
        let mut rng = stream.index(t as u64).rng();
        let mut fixes = Vec::with_capacity(fixations);
        for n in 0..fixations {
            fixes.push(Fixation {
                x: rng.gen_range(0..geometry.dims[0]),
                y: rng.gen_range(0..geometry.dims[1]),
                slice: rng.gen_range(0..geometry.dims[2]),
                duration_ms: rng.gen_range(20.0..600.0),
                n,
            });
        }
        trace.trials.insert(t as u64, fixes);
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dprime_examples() {
        let d = dprime_yesno(84, 16, 16, 84).unwrap();
        assert!((d - 1.9891).abs() < 1e-3, "{d}");
        assert_eq!(dprime_yesno(30, 70, 30, 70).unwrap(), 0.0);
        assert!(dprime_yesno(0, 0, 3, 4).is_err());
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(statistical_efficiency(0.3, 0.3).unwrap(), 1.0);
        assert!((statistical_efficiency(0.3, 0.45).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(statistical_efficiency(0.6, 0.9).unwrap(), statistical_efficiency(0.3, 0.45).unwrap());
    }

    #[test]
    fn matching_on_a_smooth_curve() {
        let pc = |c: f64| (crate::stats::normal_cdf(3.0 * c / 2.0), 0.0);
        let opts = MatchOptions {
            tolerance: 0.01,
            min_bracket: 1e-4,
            max_contrast: 4.0,
        };
        let r = match_contrast(pc, 0.8, &opts).unwrap();
        assert!(r.converged && (r.pc - 0.8).abs() <= 0.01);
        let r = match_contrast(pc, 0.5, &opts).unwrap();
        assert_eq!(r.contrast, 0.0);
        let flat = |_c: f64| (0.6, 0.0);
        assert!(!match_contrast(flat, 0.9, &opts).unwrap().converged);
    }

    #[test]
    fn envelope_matches_brute_force() {
        let pts = [(1.0, 0.0, 0), (0.5, 1.0, 1), (0.9, 0.3, 2), (-1.0, 3.0, 3), (0.2, 1.0, 4), (1.0, -1.0, 5)];
        let env = ResponseEnvelope::new(pts.iter().copied(), 4.0);
        for i in 0..=400 {
            let c = i as f64 * 0.01;
            let brute = pts.iter().map(|p| p.0 + c * p.1).fold(f64::NEG_INFINITY, f64::max);
            assert!((env.eval(c).0 - brute).abs() < 1e-12, "c={c}");
        }
    }

    #[test]
    fn sum_summary_tracks_exact_log_mean() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<(f64, f64)> = (0..200_000)
            .map(|i| {
                let d = (i as f64 - 1000.0) / 40.0;
                (g.sample(&mut rng), 20.0 * (-d * d).exp())
            })
            .collect();
        let summary = SumSummary::new(&pts);
        assert!(summary.exact.len() + summary.bins.len() < 20_000);
        let stats = ResponseStats::new(0.0, 20.0, 20f64.sqrt(), 0.0).unwrap();
        for c in [0.0, 0.05, 0.2, 0.5, 1.0] {
            let s = stats.with_signal_scale(c);
            let exact = log_sum_exp(pts.iter().map(|&(n, r)| s.log_lr(n + c * r)).collect::<Vec<_>>()) - (pts.len() as f64).ln();
            let approx = summary.log_mean_lr(&stats, c);
            assert!((exact - approx).abs() < 1e-2, "c={c}: {exact} vs {approx}");
        }
    }

    #[test]
    fn error_classes() {
        let g = VolumeGeometry::new([256, 256, 32], crate::volume::DEFAULT_PITCH_DVA).unwrap();
        let loc = Some([100, 100, 10]);
        let px_per_dva = 1.0 / g.pitch_dva;
        let far = Fixation {
            x: 100 + (3.0 * px_per_dva) as usize,
            y: 100,
            slice: 10,
            duration_ms: 0.0,
            n: 0,
        };
        let near = Fixation {
            x: 100 + (0.4 * px_per_dva) as usize,
            ..far
        };
        assert_eq!(classify_errors(Task::Search, true, false, Some(&[far]), loc, &g).unwrap(), ErrorClass::SearchError);
        assert_eq!(classify_errors(Task::Search, true, false, Some(&[near]), loc, &g).unwrap(), ErrorClass::RecognitionError);
        let off_slice = Fixation { slice: 14, ..near };
        assert_eq!(classify_errors(Task::Search, true, false, Some(&[off_slice]), loc, &g).unwrap(), ErrorClass::SearchError);
        assert_eq!(classify_errors(Task::Search, true, true, None, loc, &g).unwrap(), ErrorClass::Hit);
        assert!(classify_errors(Task::Search, true, false, None, loc, &g).is_err());
    }
}
