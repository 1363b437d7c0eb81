//! The foveated search model: per-fixation foveated responses, likelihood
//! integration across fixations, MAP saccades with inhibition of return,
//! scrolling, stopping rules, decisions and trace replay.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::FftGrid;
use crate::foveation::{band_index, EccentricityLadder, BAND_COUNT};
use crate::observers::{argmax, ResponseStats};
use crate::stimulus::{PlacementRegion, SignalKind};
use crate::volume::{Kernel, VolumeGeometry};

/// Depth shifts evaluated around the displayed slice.
pub const SHIFTS: [isize; 5] = [-2, -1, 0, 1, 2];
/// Largest per-slice fixation count with its own threshold.
pub const MAX_THRESHOLD_INDEX: usize = 30;
/// Fixations shorter than this are discarded when reading traces.
pub const MIN_FIXATION_MS: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: usize,
    pub y: usize,
    pub slice: usize,
    #[serde(default)]
    pub duration_ms: f64,
    /// Ordinal position within the trial.
    pub n: usize,
}

/// Fixations grouped by trial id, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixationTrace {
    pub trials: BTreeMap<u64, Vec<Fixation>>,
    /// Set when the file held no fixation rows at all.
    pub empty: bool,
    pub dropped_short: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct TraceRow {
    trial: u64,
    n: usize,
    x: usize,
    y: usize,
    slice: usize,
    duration_ms: f64,
}

/// Reads `trial,n,x,y,slice,duration_ms` rows, dropping fixations under 50 ms.
pub fn ingest_trace<R: Read>(reader: R) -> Result<FixationTrace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Trace { line: 1, reason: e.to_string() })?
        .clone();
    let expected = ["trial", "n", "x", "y", "slice", "duration_ms"];
    if !headers.is_empty() && headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Trace {
            line: 1,
            reason: format!("header must be `{}`", expected.join(",")),
        });
    }
    let mut trace = FixationTrace::default();
    let mut rows = 0usize;
    for (i, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::Trace { line, reason: e.to_string() })?;
        if !(row.duration_ms.is_finite() && row.duration_ms >= 0.0) {
            return Err(Error::Trace {
                line,
                reason: format!("duration {} must be >= 0", row.duration_ms),
            });
        }
        rows += 1;
        if row.duration_ms < MIN_FIXATION_MS {
            trace.dropped_short += 1;
            continue;
        }
        trace.trials.entry(row.trial).or_default().push(Fixation {
            x: row.x,
            y: row.y,
            slice: row.slice,
            duration_ms: row.duration_ms,
            n: row.n,
        });
    }
    trace.empty = rows == 0;
    Ok(trace)
}

pub fn write_trace<W: Write>(writer: W, trace: &FixationTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if trace.trials.values().all(|f| f.is_empty()) {
        w.write_record(["trial", "n", "x", "y", "slice", "duration_ms"])
            .map_err(|e| Error::Io(e.into()))?;
    }
    for (trial, fixes) in &trace.trials {
        for f in fixes {
            w.serialize(TraceRow {
                trial: *trial,
                n: f.n,
                x: f.x,
                y: f.y,
                slice: f.slice,
                duration_ms: f.duration_ms,
            })
            .map_err(|e| Error::Io(e.into()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Stopping thresholds and explored-volume limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    /// `thresholds[n]` applies after the n-th fixation on a slice (log units).
    pub thresholds: Vec<f64>,
    pub coverage_fraction: f64,
    pub ufov_radius_dva: f64,
}

impl StoppingRule {
    /// Explored fraction at which search ends without a confident find.
    pub fn default_coverage(signal: SignalKind, three_d: bool) -> f64 {
        match (signal, three_d) {
            (SignalKind::Microcalcification, true) => 0.25,
            (SignalKind::Mass, true) => 0.10,
            (SignalKind::Microcalcification, false) => 0.80,
            (SignalKind::Mass, false) => 0.60,
        }
    }

    /// A rule that only stops on coverage.
    pub fn coverage_only(coverage_fraction: f64) -> Self {
        StoppingRule {
            thresholds: vec![f64::INFINITY; MAX_THRESHOLD_INDEX + 1],
            coverage_fraction,
            ufov_radius_dva: 2.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != MAX_THRESHOLD_INDEX + 1 || self.thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::invalid("stopping.thresholds", "need 31 non-NaN thresholds"));
        }
        if !(self.coverage_fraction > 0.0 && self.coverage_fraction <= 1.0) {
            return Err(Error::invalid("stopping.coverage_fraction", "must lie in (0, 1]"));
        }
        if !(self.ufov_radius_dva > 0.0) {
            return Err(Error::invalid("stopping.ufov_radius_dva", "must be > 0"));
        }
        Ok(())
    }

    /// Threshold for `n` fixations on the current slice, clamped to the last.
    pub fn threshold(&self, n: usize) -> f64 {
        self.thresholds[n.min(MAX_THRESHOLD_INDEX)]
    }

    /// Threshold for the first fixation on a slice.
    pub fn foveal_threshold(&self) -> f64 {
        self.threshold(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrollPolicy {
    /// Saccade instead of scrolling when the fixation's best log LR exceeds
    /// this fraction of the foveal threshold.
    pub trigger_fraction: f64,
}

impl ScrollPolicy {
    pub fn default_for(signal: SignalKind) -> Self {
        ScrollPolicy {
            trigger_fraction: match signal {
                SignalKind::Microcalcification => 0.35,
                SignalKind::Mass => 0.70,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    Coverage,
    FixationBudget,
    TraceEnd,
    Cued,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Scroll { to: usize },
    Saccade,
}

/// Per-band template spectra on the image plane, ready for slice-wise scanning.
pub struct FoveatedScanner {
    pub geometry: VolumeGeometry,
    pub ladder: EccentricityLadder,
    plane_grid: FftGrid,
    /// `[band][plane]` spectra of template planes `-h..=h`.
    template_planes: Vec<Vec<Vec<Complex64>>>,
    half_depth: usize,
    /// In-plane region whose voxels are evaluated.
    pub region: PlacementRegion,
    pub ior_radius_dva: f64,
    pub shifts: Vec<isize>,
}

impl FoveatedScanner {
    pub fn new(ladder: EccentricityLadder, geometry: VolumeGeometry, region: PlacementRegion) -> Result<Self> {
        let dims = [geometry.dims[0], geometry.dims[1], 1];
        let plane_grid = FftGrid::new(dims);
        let half_depth = ladder.bands.iter().map(|b| b.template.half_depth()).max().unwrap_or(0);
        if 2 * half_depth + 1 > geometry.dims[2] {
            return Err(Error::Shape(format!(
                "template depth {} exceeds {} slices",
                2 * half_depth + 1,
                geometry.dims[2]
            )));
        }
        let h = half_depth as isize;
        let template_planes = ladder
            .bands
            .iter()
            .map(|b| {
                (-h..=h)
                    .map(|dz| plane_grid.forward_real(&b.template.kernel.plane(dz).embed_wrapped(dims)))
                    .collect()
            })
            .collect();
        let shifts = if geometry.dims[2] == 1 { vec![0] } else { SHIFTS.to_vec() };
        Ok(FoveatedScanner {
            geometry,
            ladder,
            plane_grid,
            template_planes,
            half_depth,
            region: region.planar(),
            ior_radius_dva: 1.0,
            shifts,
        })
    }

    pub fn half_depth(&self) -> usize {
        self.half_depth
    }

    pub fn plane_len(&self) -> usize {
        self.geometry.plane_len()
    }

    /// Whether a template centered on `z` lies inside the stack.
    pub fn center_valid(&self, z: isize) -> bool {
        z >= self.half_depth as isize && z + (self.half_depth as isize) < self.geometry.dims[2] as isize
    }

    pub fn region_contains(&self, x: usize, y: usize) -> bool {
        x >= self.region.lo[0] && x <= self.region.hi[0] && y >= self.region.lo[1] && y <= self.region.hi[1]
    }

    /// Band index per in-plane voxel for a fixation at `(fx, fy)`.
    pub fn band_map(&self, fx: usize, fy: usize) -> Vec<u8> {
        let [nx, ny, _] = self.geometry.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                let e = self.geometry.planar_distance_dva([x, y, 0], [fx, fy, 0]);
                out.push(band_index(e) as u8);
            }
        }
        out
    }
}

/// Per-slice 2D spectra of one stimulus.
pub struct SliceSpectra {
    pub slices: Vec<Vec<Complex64>>,
}

impl SliceSpectra {
    /// Splits a full 3D spectrum into per-slice plane spectra.
    pub fn from_volume_spectrum(spectrum: &[Complex64], dims: [usize; 3]) -> Self {
        let [nx, ny, nz] = dims;
        let plane = nx * ny;
        let mut data = spectrum.to_vec();
        if nz > 1 {
            let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(nz);
            let mut line = vec![Complex64::default(); nz];
            let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
            let scale = 1.0 / nz as f64;
            for i in 0..plane {
                for z in 0..nz {
                    line[z] = data[i + plane * z];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for z in 0..nz {
                    data[i + plane * z] = line[z] * scale;
                }
            }
        }
        SliceSpectra {
            slices: data.chunks(plane).map(|c| c.to_vec()).collect(),
        }
    }

    /// Keeps only slice `z` (for planar stimuli cut from a stack).
    pub fn single(mut self, z: usize) -> Self {
        let s = self.slices.swap_remove(z);
        SliceSpectra { slices: vec![s] }
    }

    /// Adds `scale * signal` centered at `loc`, clipped at the stack faces.
    pub fn add_signal(&mut self, signal: &SignalPlanes, loc: [usize; 3], scale: f64) {
        let [nx, ny] = signal.plane_dims;
        let ramp_x: Vec<Complex64> = (0..nx)
            .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * loc[0]) as f64 / nx as f64))
            .collect();
        let ramp_y: Vec<Complex64> = (0..ny)
            .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * loc[1]) as f64 / ny as f64))
            .collect();
        let nz = self.slices.len() as isize;
        for (dz, spec) in &signal.planes {
            let z = loc[2] as isize + dz;
            if z < 0 || z >= nz {
                continue;
            }
            let target = &mut self.slices[z as usize];
            for ky in 0..ny {
                let ry = ramp_y[ky] * scale;
                for kx in 0..nx {
                    let i = kx + nx * ky;
                    target[i] += spec[i] * ramp_x[kx] * ry;
                }
            }
        }
    }
}

/// Plane spectra of a signal profile, embedded at the in-plane origin.
pub struct SignalPlanes {
    pub plane_dims: [usize; 2],
    pub planes: Vec<(isize, Vec<Complex64>)>,
}

impl SignalPlanes {
    pub fn new(signal: &Kernel, plane_dims: [usize; 2]) -> Self {
        let dims = [plane_dims[0], plane_dims[1], 1];
        let grid = FftGrid::new(dims);
        let (lo, hi) = signal.extent();
        let planes = (lo[2]..=hi[2])
            .map(|dz| (dz, grid.forward_real(&signal.plane(dz).embed_wrapped(dims))))
            .collect();
        SignalPlanes { plane_dims, planes }
    }
}

/// Lazily computed band responses for one stimulus.
pub struct ResponseCache<'a> {
    scanner: &'a FoveatedScanner,
    slices: &'a SliceSpectra,
    cache: HashMap<(usize, usize), Vec<f64>>,
}

impl<'a> ResponseCache<'a> {
    pub fn new(scanner: &'a FoveatedScanner, slices: &'a SliceSpectra) -> Self {
        ResponseCache {
            scanner,
            slices,
            cache: HashMap::new(),
        }
    }

    /// Template response of `band` centered on slice `center` (must be valid).
    pub fn response(&mut self, band: usize, center: usize) -> &[f64] {
        let scanner = self.scanner;
        let slices = self.slices;
        self.cache.entry((band, center)).or_insert_with(|| {
            let h = scanner.half_depth as isize;
            let n = scanner.plane_len();
            let mut acc = vec![Complex64::default(); n];
            for (i, dz) in (-h..=h).enumerate() {
                let z = (center as isize + dz) as usize;
                let w = &scanner.template_planes[band][i];
                let g = &slices.slices[z];
                for ((a, w), g) in acc.iter_mut().zip(w).zip(g) {
                    *a += w.conj() * g;
                }
            }
            scanner.plane_grid.inverse_real(acc)
        })
    }

    pub fn computed(&self) -> usize {
        self.cache.len()
    }
}

/// Foveated responses of one fixation on its displayed slice.
pub struct FixationResponse {
    /// `max_delta lambda_{v,delta}` per in-plane voxel (`-inf` outside the region).
    pub lambda: Vec<f64>,
    pub log_lr: Vec<f64>,
    /// Band used at each voxel.
    pub bands: Vec<u8>,
}

impl FixationResponse {
    pub fn max_log_lr(&self) -> f64 {
        self.log_lr.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Search bookkeeping for one trial.
pub struct SearchState {
    pub geometry: VolumeGeometry,
    pub fixation: Fixation,
    pub direction: isize,
    /// Accumulated log likelihood ratio per displayed slice.
    pub log_lambda: Vec<Option<Vec<f64>>>,
    pub fixations_on_slice: Vec<usize>,
    pub history: Vec<Fixation>,
    explored: Vec<bool>,
    explored_count: usize,
    pub rng: ChaCha8Rng,
    /// `(fixations on slice, max log Lambda on slice)` after each fixation.
    pub events: Vec<(usize, f64)>,
}

impl SearchState {
    pub fn new(geometry: VolumeGeometry, start: Fixation, rng: ChaCha8Rng) -> Self {
        let nz = geometry.dims[2];
        SearchState {
            geometry,
            fixation: start,
            direction: 1,
            log_lambda: vec![None; nz],
            fixations_on_slice: vec![0; nz],
            history: Vec::new(),
            explored: vec![false; geometry.len()],
            explored_count: 0,
            rng,
            events: Vec::new(),
        }
    }

    /// Fixation at the center of the first slice.
    pub fn initial_fixation(geometry: &VolumeGeometry) -> Fixation {
        Fixation {
            x: geometry.dims[0] / 2,
            y: geometry.dims[1] / 2,
            slice: 0,
            duration_ms: 0.0,
            n: 0,
        }
    }

    pub fn explored_fraction(&self) -> f64 {
        self.explored_count as f64 / self.explored.len() as f64
    }

    pub fn current_slice(&self) -> usize {
        self.fixation.slice
    }

    /// Marks the useful field of view around the current fixation on its slice.
    pub fn stamp_coverage(&mut self, radius_dva: f64) {
        let r = radius_dva / self.geometry.pitch_dva;
        let ri = r.floor() as isize;
        let [nx, ny, _] = self.geometry.dims;
        let f = self.fixation;
        let base = f.slice * nx * ny;
        for dy in -ri..=ri {
            let y = f.y as isize + dy;
            if y < 0 || y >= ny as isize {
                continue;
            }
            for dx in -ri..=ri {
                let x = f.x as isize + dx;
                if x < 0 || x >= nx as isize || ((dx * dx + dy * dy) as f64) > r * r {
                    continue;
                }
                let i = base + x as usize + nx * y as usize;
                if !self.explored[i] {
                    self.explored[i] = true;
                    self.explored_count += 1;
                }
            }
        }
    }

    pub fn slice_max(&self, z: usize) -> f64 {
        self.log_lambda[z]
            .as_ref()
            .map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Foveated response field for the current fixation.
///
/// Each voxel uses the band of its eccentricity; each valid depth shift gets
/// its own internal-noise draw and the largest shifted response is kept.
pub fn process_fixation(
    state: &mut SearchState,
    scanner: &FoveatedScanner,
    cache: &mut ResponseCache<'_>,
    stats: &[ResponseStats],
) -> FixationResponse {
    let [nx, ny, _] = scanner.geometry.dims;
    let f = state.fixation;
    let bands = scanner.band_map(f.x, f.y);
    let mut lambda = vec![f64::NEG_INFINITY; nx * ny];
    let mut used = [false; BAND_COUNT];
    for y in scanner.region.lo[1]..=scanner.region.hi[1] {
        for x in scanner.region.lo[0]..=scanner.region.hi[0] {
            used[bands[x + nx * y] as usize] = true;
        }
    }
    for &delta in &scanner.shifts {
        let center = f.slice as isize + delta;
        if !scanner.center_valid(center) {
            continue;
        }
        for b in 0..BAND_COUNT {
            if !used[b] {
                continue;
            }
            let sd = scanner.ladder.noise.sd(stats[b].template_sigma);
            let resp = cache.response(b, center as usize);
            for y in scanner.region.lo[1]..=scanner.region.hi[1] {
                for x in scanner.region.lo[0]..=scanner.region.hi[0] {
                    let i = x + nx * y;
                    if bands[i] as usize != b {
                        continue;
                    }
                    let eps: f64 = state.rng.sample::<f64, _>(StandardNormal) * sd;
                    let v = resp[i] + eps;
                    if v > lambda[i] {
                        lambda[i] = v;
                    }
                }
            }
        }
    }
    let mut log_lr = vec![f64::NEG_INFINITY; nx * ny];
    for y in scanner.region.lo[1]..=scanner.region.hi[1] {
        for x in scanner.region.lo[0]..=scanner.region.hi[0] {
            let i = x + nx * y;
            if lambda[i].is_finite() {
                log_lr[i] = stats[bands[i] as usize].log_lr(lambda[i]);
            }
        }
    }
    let _ = ny;
    FixationResponse { lambda, log_lr, bands }
}

/// Adds one fixation's log LR to the running product on its slice.
pub fn integrate_fixations(state: &mut SearchState, response: &FixationResponse) {
    let z = state.fixation.slice;
    let acc = state.log_lambda[z].get_or_insert_with(|| vec![0.0; response.log_lr.len()]);
    for (a, l) in acc.iter_mut().zip(&response.log_lr) {
        *a += l;
    }
    state.fixations_on_slice[z] += 1;
    state.history.push(state.fixation);
    let n = state.fixations_on_slice[z];
    let m = state.slice_max(z);
    state.events.push((n, m));
}

/// Median of the finite values.
fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Next fixation on the current slice: argmax of the accumulated evidence
/// after voxels near earlier fixations on this slice are cut to the median.
pub fn map_next_fixation(state: &SearchState, scanner: &FoveatedScanner) -> Fixation {
    let z = state.fixation.slice;
    let [nx, _, _] = scanner.geometry.dims;
    let mut field = match &state.log_lambda[z] {
        Some(f) => f.clone(),
        None => return state.fixation,
    };
    let med = median(&field);
    let r = scanner.ior_radius_dva / scanner.geometry.pitch_dva;
    let ri = r.floor() as isize;
    for prior in state.history.iter().filter(|f| f.slice == z) {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dx * dx + dy * dy) as f64) > r * r {
                    continue;
                }
                let x = prior.x as isize + dx;
                let y = prior.y as isize + dy;
                if x < 0 || y < 0 || x >= nx as isize || y >= scanner.geometry.dims[1] as isize {
                    continue;
                }
                let i = x as usize + nx * y as usize;
                if field[i] > med {
                    field[i] = med;
                }
            }
        }
    }
    let best = argmax(&field);
    Fixation {
        x: best % nx,
        y: best / nx,
        slice: z,
        duration_ms: 0.0,
        n: state.history.len(),
    }
}

/// Stop check after a fixation: evidence threshold first, then coverage.
pub fn should_stop(state: &SearchState, rule: &StoppingRule) -> Option<StopReason> {
    let z = state.fixation.slice;
    let n = state.fixations_on_slice[z];
    if n > 0 && state.slice_max(z) > rule.threshold(n) {
        return Some(StopReason::Threshold);
    }
    if state.explored_fraction() > rule.coverage_fraction {
        return Some(StopReason::Coverage);
    }
    None
}

/// Drill to the next slice unless the last fixation found strong evidence.
///
/// The direction reverses at the first and last slice.
pub fn scroll_step(state: &mut SearchState, fixation_max_log_lr: f64, policy: &ScrollPolicy, foveal_threshold: f64) -> Action {
    let nz = state.geometry.dims[2];
    if nz > 1 && fixation_max_log_lr <= policy.trigger_fraction * foveal_threshold {
        let z = state.fixation.slice as isize;
        let mut next = z + state.direction;
        if next < 0 || next >= nz as isize {
            state.direction = -state.direction;
            next = z + state.direction;
        }
        Action::Scroll { to: next as usize }
    } else {
        Action::Saccade
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsmDecision {
    pub present: bool,
    /// Largest accumulated log likelihood ratio over all slices.
    pub statistic: f64,
    pub location: [usize; 3],
}

pub fn fsm_decision(state: &SearchState, threshold: f64) -> FsmDecision {
    let nx = state.geometry.dims[0];
    let mut best = f64::NEG_INFINITY;
    let mut loc = [state.fixation.x, state.fixation.y, state.fixation.slice];
    for (z, f) in state.log_lambda.iter().enumerate() {
        if let Some(f) = f {
            let i = argmax(f);
            if f[i] > best {
                best = f[i];
                loc = [i % nx, i / nx, z];
            }
        }
    }
    FsmDecision {
        present: best > threshold,
        statistic: best,
        location: loc,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsmOutcome {
    pub decision: FsmDecision,
    pub stop_reason: StopReason,
    pub fixations: Vec<Fixation>,
    pub explored_fraction: f64,
    pub events: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub enum FsmMode<'a> {
    Map {
        rule: &'a StoppingRule,
        policy: &'a ScrollPolicy,
        max_fixations: usize,
    },
    Replay(&'a [Fixation]),
}

/// Runs one search over a prepared stimulus.
pub fn run_fsm_trial(
    scanner: &FoveatedScanner,
    slices: &SliceSpectra,
    stats: &[ResponseStats],
    mode: FsmMode<'_>,
    final_threshold: f64,
    rng: ChaCha8Rng,
) -> Result<FsmOutcome> {
    let geometry = scanner.geometry;
    if slices.slices.len() != geometry.dims[2] {
        return Err(Error::Shape("slice spectra do not match the scanner geometry".into()));
    }
    let mut cache = ResponseCache::new(scanner, slices);
    let (mut state, stop_reason) = match mode {
        FsmMode::Map {
            rule,
            policy,
            max_fixations,
        } => {
            rule.validate()?;
            map_search(scanner, &mut cache, stats, rule, policy, rule.foveal_threshold(), max_fixations, rng)
        }
        FsmMode::Replay(trace) => {
            let mut state = SearchState::new(geometry, SearchState::initial_fixation(&geometry), rng);
            for (i, f) in trace.iter().enumerate() {
                if !geometry.contains([f.x, f.y, f.slice]) {
                    return Err(Error::Trace {
                        line: i + 1,
                        reason: format!("fixation {:?} outside volume {:?}", [f.x, f.y, f.slice], geometry.dims),
                    });
                }
                state.fixation = *f;
                let resp = process_fixation(&mut state, scanner, &mut cache, stats);
                integrate_fixations(&mut state, &resp);
                state.stamp_coverage(2.5);
            }
            (state, StopReason::TraceEnd)
        }
    };
    let decision = fsm_decision(&state, final_threshold);
    Ok(FsmOutcome {
        decision,
        stop_reason,
        fixations: std::mem::take(&mut state.history),
        explored_fraction: state.explored_fraction(),
        events: std::mem::take(&mut state.events),
    })
}

#[allow(clippy::too_many_arguments)]
fn map_search(
    scanner: &FoveatedScanner,
    cache: &mut ResponseCache<'_>,
    stats: &[ResponseStats],
    rule: &StoppingRule,
    policy: &ScrollPolicy,
    trigger_threshold: f64,
    max_fixations: usize,
    rng: ChaCha8Rng,
) -> (SearchState, StopReason) {
    let geometry = scanner.geometry;
    let mut state = SearchState::new(geometry, SearchState::initial_fixation(&geometry), rng);
    let reason = loop {
        let resp = process_fixation(&mut state, scanner, cache, stats);
        integrate_fixations(&mut state, &resp);
        state.stamp_coverage(rule.ufov_radius_dva);
        if let Some(r) = should_stop(&state, rule) {
            break r;
        }
        if state.history.len() >= max_fixations {
            break StopReason::FixationBudget;
        }
        let n = state.history.len();
        match scroll_step(&mut state, resp.max_log_lr(), policy, trigger_threshold) {
            Action::Scroll { to } => {
                state.fixation = Fixation {
                    slice: to,
                    n,
                    ..state.fixation
                };
            }
            Action::Saccade => {
                let mut next = map_next_fixation(&state, scanner);
                next.n = n;
                state.fixation = next;
            }
        }
    };
    (state, reason)
}

/// MAP search whose saccade trigger uses `trigger_threshold` instead of the
/// rule's own foveal threshold (used while the rule is being trained).
#[allow(clippy::too_many_arguments)]
pub fn run_fsm_trial_with_trigger(
    scanner: &FoveatedScanner,
    slices: &SliceSpectra,
    stats: &[ResponseStats],
    rule: &StoppingRule,
    policy: &ScrollPolicy,
    trigger_threshold: f64,
    max_fixations: usize,
    rng: ChaCha8Rng,
) -> Result<FsmOutcome> {
    rule.validate()?;
    let mut cache = ResponseCache::new(scanner, slices);
    let (mut state, stop_reason) = map_search(scanner, &mut cache, stats, rule, policy, trigger_threshold, max_fixations, rng);
    Ok(FsmOutcome {
        decision: fsm_decision(&state, f64::INFINITY),
        stop_reason,
        fixations: std::mem::take(&mut state.history),
        explored_fraction: state.explored_fraction(),
        events: std::mem::take(&mut state.events),
    })
}

/// Foveal response at a cued location (one fixation, no search).
///
/// Returns the log likelihood ratio of the cued voxel on the cued slice.
pub fn cued_log_lr(
    scanner: &FoveatedScanner,
    slices: &SliceSpectra,
    stats: &[ResponseStats],
    cue: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut cache = ResponseCache::new(scanner, slices);
    let nx = scanner.geometry.dims[0];
    let z = cue[2].clamp(scanner.half_depth, scanner.geometry.dims[2] - 1 - scanner.half_depth);
    let r = cache.response(0, z)[cue[0] + nx * cue[1]];
    let eps: f64 = rng.sample::<f64, _>(StandardNormal) * scanner.ladder.noise.sd(stats[0].template_sigma);
    stats[0].log_lr(r + eps)
}

/// PC-maximizing threshold for "present iff value > threshold".
///
/// Candidates are midpoints between consecutive distinct values plus both
/// ends; ties in PC go to the smallest threshold. Returns `(threshold, pc)`.
pub fn best_threshold(present: &[f64], absent: &[f64]) -> (f64, f64) {
    let mut all: Vec<(f64, bool)> = present
        .iter()
        .map(|&v| (v, true))
        .chain(absent.iter().map(|&v| (v, false)))
        .collect();
    let n = all.len();
    if n == 0 {
        return (0.0, f64::NAN);
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // threshold below everything: every trial called present
    let mut correct = present.len() as i64;
    let mut best = (f64::NEG_INFINITY, correct);
    let mut i = 0;
    while i < n {
        let v = all[i].0;
        while i < n && all[i].0 == v {
            correct += if all[i].1 { -1 } else { 1 };
            i += 1;
        }
        let t = if i < n {
            if v.is_finite() && all[i].0.is_finite() {
                0.5 * (v + all[i].0)
            } else {
                v
            }
        } else {
            f64::INFINITY
        };
        if correct > best.1 {
            best = (t, correct);
        }
    }
    (best.0, best.1 as f64 / n as f64)
}

/// Per-trial search summary used for threshold training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub present: bool,
    pub events: Vec<(usize, f64)>,
}

impl TrainingRecord {
    /// Largest slice evidence seen at per-slice count `n` (clamped at 30).
    pub fn value_at(&self, n: usize) -> Option<f64> {
        self.events
            .iter()
            .filter(|(k, _)| (*k).min(MAX_THRESHOLD_INDEX) == n)
            .map(|(_, v)| *v)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Weighted pool-adjacent-violators fit, nondecreasing.
fn isotonic_increasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (v2, w2, c2) = blocks[blocks.len() - 1];
            let (v1, w1, c1) = blocks[blocks.len() - 2];
            if v1 <= v2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            let last = blocks.last_mut().expect("two blocks present");
            *last = ((v1 * w1 + v2 * w2) / w, w, c1 + c2);
        }
    }
    blocks.into_iter().flat_map(|(v, _, c)| std::iter::repeat_n(v, c)).collect()
}

/// Monotone fit in whichever direction leaves the smaller weighted error.
pub fn isotonic_smooth(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let up = isotonic_increasing(values, weights);
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    let down: Vec<f64> = isotonic_increasing(&neg, weights).into_iter().map(|v| -v).collect();
    let sse = |fit: &[f64]| -> f64 {
        fit.iter()
            .zip(values)
            .zip(weights)
            .map(|((f, v), w)| w * (f - v) * (f - v))
            .sum()
    };
    if sse(&up) <= sse(&down) {
        up
    } else {
        down
    }
}

/// Result of threshold training with the raw per-count optima kept for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedThresholds {
    pub thresholds: Vec<f64>,
    pub raw: Vec<Option<f64>>,
    pub raw_pc: Vec<Option<f64>>,
    pub support: Vec<usize>,
}

/// Minimum trials per count (and per class) before a count gets its own threshold.
pub const MIN_TRIALS_PER_COUNT: usize = 10;

/// Per-count PC-maximizing thresholds, isotonically smoothed across counts;
/// counts with too little data inherit the nearest trained threshold.
pub fn train_thresholds(records: &[TrainingRecord]) -> Result<TrainedThresholds> {
    let k = MAX_THRESHOLD_INDEX + 1;
    let mut raw = vec![None; k];
    let mut raw_pc = vec![None; k];
    let mut support = vec![0; k];
    for n in 1..k {
        let mut pres = Vec::new();
        let mut abs = Vec::new();
        for r in records {
            if let Some(v) = r.value_at(n) {
                if r.present {
                    pres.push(v);
                } else {
                    abs.push(v);
                }
            }
        }
        support[n] = pres.len() + abs.len();
        if pres.len() >= MIN_TRIALS_PER_COUNT && abs.len() >= MIN_TRIALS_PER_COUNT {
            let (t, pc) = best_threshold(&pres, &abs);
            if t.is_finite() {
                raw[n] = Some(t);
                raw_pc[n] = Some(pc);
            }
        }
    }
    let trained: Vec<usize> = (0..k).filter(|&n| raw[n].is_some()).collect();
    if trained.is_empty() {
        return Err(Error::invalid("training", "no fixation count had enough present and absent trials"));
    }
    let vals: Vec<f64> = trained.iter().map(|&n| raw[n].unwrap()).collect();
    let wts: Vec<f64> = trained.iter().map(|&n| support[n] as f64).collect();
    let smooth = isotonic_smooth(&vals, &wts);
    let mut thresholds = vec![0.0; k];
    for (n, t) in thresholds.iter_mut().enumerate() {
        let j = trained
            .iter()
            .enumerate()
            .min_by_key(|(_, &m)| (m as isize - n as isize).unsigned_abs())
            .map(|(j, _)| j)
            .expect("non-empty");
        *t = smooth[j];
    }
    Ok(TrainedThresholds {
        thresholds,
        raw,
        raw_pc,
        support,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_sweep_separable() {
        let (t, pc) = best_threshold(&[5.0, 6.0, 7.0], &[1.0, 2.0, 3.0]);
        assert_eq!(pc, 1.0);
        assert!(t > 3.0 && t < 5.0);
    }

    #[test]
    fn threshold_sweep_matches_brute_force() {
        let pres = [0.3, 1.2, 2.2, 0.9, -0.4, 1.7, 1.7];
        let abs = [0.1, -1.0, 0.95, 0.2, 1.8, -0.3];
        let (t, pc) = best_threshold(&pres, &abs);
        let score = |t: f64| {
            (pres.iter().filter(|&&v| v > t).count() + abs.iter().filter(|&&v| v <= t).count()) as f64 / 13.0
        };
        assert!((score(t) - pc).abs() < 1e-15);
        let brute = (0..4001).map(|i| -2.0 + i as f64 * 1e-3).map(score).fold(0.0, f64::max);
        assert!((pc - brute).abs() < 1e-12);
    }

    #[test]
    fn isotonic_fixes_violations() {
        let fit = isotonic_smooth(&[1.0, 3.0, 2.0, 4.0], &[1.0; 4]);
        assert_eq!(fit, vec![1.0, 2.5, 2.5, 4.0]);
        let fit = isotonic_smooth(&[4.0, 2.0, 3.0, 1.0], &[1.0; 4]);
        assert_eq!(fit, vec![4.0, 2.5, 2.5, 1.0]);
    }

    #[test]
    fn trace_round_trip_and_short_fixations() {
        let mut text = String::from("trial,n,x,y,slice,duration_ms\n");
        for i in 0..10 {
            let d = if i == 4 { 40.0 } else { 180.0 + i as f64 };
            text.push_str(&format!("3,{i},{},{},{},{d}\n", 10 + i, 20 + i, i % 3));
        }
        let t = ingest_trace(text.as_bytes()).unwrap();
        assert_eq!(t.trials[&3].len(), 9);
        assert_eq!(t.dropped_short, 1);
        let mut buf = Vec::new();
        write_trace(&mut buf, &t).unwrap();
        let back = ingest_trace(buf.as_slice()).unwrap();
        assert_eq!(back.trials, t.trials);
        let empty = ingest_trace("trial,n,x,y,slice,duration_ms\n".as_bytes()).unwrap();
        assert!(empty.empty && empty.trials.is_empty());
        let bad = "trial,n,x,y,slice,duration_ms\n1,0,3,4,0,100\n1,1,x,4,0,100\n";
        match ingest_trace(bad.as_bytes()) {
            Err(Error::Trace { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
