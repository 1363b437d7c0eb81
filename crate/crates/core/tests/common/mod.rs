#![allow(dead_code)]

use std::sync::OnceLock;

use fovsearch_core::config::ExperimentConfig;
use fovsearch_core::harness::{plan_trials, Condition, SearchModel, Setup, Task, TrialPlan};
use fovsearch_core::search::{
    integrate_fixations, process_fixation, run_fsm_trial, Fixation, FsmMode, ResponseCache, ScrollPolicy, SearchState,
    SliceSpectra, StopReason, StoppingRule, MAX_THRESHOLD_INDEX,
};
use fovsearch_core::{SeedStream, SignalKind};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub const SMALL_DIMS: [usize; 3] = [64, 64, 12];

pub fn small_config(k: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.geometry.dims = SMALL_DIMS;
    cfg.trials = 20;
    cfg.training_trials = 20;
    cfg.seed = 11;
    cfg.foveation.k = k;
    cfg
}

/// Microcalcification stack search on a small geometry.
pub struct Bench {
    pub setup: Setup,
    pub model: SearchModel,
}

impl Bench {
    pub fn new(k: f64, contrast: f64) -> Self {
        let setup = Setup::new(&small_config(k)).expect("small setup");
        let model = SearchModel::new(&setup, Condition::new(SignalKind::Microcalcification, Task::Search, true), contrast).expect("model");
        Bench { setup, model }
    }

    pub fn plan(&self, seed: u64, present: bool) -> TrialPlan {
        let region = self.setup.region(SignalKind::Microcalcification).unwrap();
        let plans = plan_trials(&SeedStream::new(seed), 2, SignalKind::Microcalcification, &region);
        if present {
            plans[0]
        } else {
            plans[1]
        }
    }
}

pub fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| Bench::new(2.7813, 0.45))
}

pub fn noiseless_bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| Bench::new(0.0, 1.0))
}

pub fn fixation_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (0..SMALL_DIMS[0], 0..SMALL_DIMS[1], 0..SMALL_DIMS[2])
}

pub fn trace_strategy(max_len: usize) -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    prop::collection::vec(fixation_strategy(), 1..max_len)
}

fn to_fixations(trace: &[(usize, usize, usize)]) -> Vec<Fixation> {
    trace
        .iter()
        .enumerate()
        .map(|(n, &(x, y, slice))| Fixation {
            x,
            y,
            slice,
            duration_ms: 200.0,
            n,
        })
        .collect()
}

/// Accumulated slice evidence equals the log of the product of per-fixation
/// likelihood ratios wherever that product is representable.
pub fn check_log_domain_identity(seed: u64, present: bool, trace: &[(usize, usize, usize)]) -> Result<(), TestCaseError> {
    let b = bench();
    let plan = b.plan(seed, present);
    let slices = b.model.stimulus(&b.setup, &plan);
    let mut cache = ResponseCache::new(&b.model.scanner, &slices);
    let geom = b.model.scanner.geometry;
    let mut state = SearchState::new(geom, SearchState::initial_fixation(&geom), SeedStream::new(seed).rng());
    let mut per_slice: Vec<Vec<Vec<f64>>> = vec![Vec::new(); geom.dims[2]];
    for f in to_fixations(trace) {
        state.fixation = f;
        let resp = process_fixation(&mut state, &b.model.scanner, &mut cache, &b.model.stats);
        per_slice[f.slice].push(resp.log_lr.clone());
        integrate_fixations(&mut state, &resp);
    }
    let mut checked = 0;
    for (z, fields) in per_slice.iter().enumerate() {
        if fields.is_empty() {
            prop_assert!(state.log_lambda[z].is_none());
            continue;
        }
        let acc = state.log_lambda[z].as_ref().expect("visited slice has evidence");
        for i in (0..acc.len()).step_by(37) {
            let product: f64 = fields.iter().map(|f| f[i].exp()).product();
            if !(product.is_normal()) {
                continue;
            }
            let direct = product.ln();
            prop_assert!(
                (direct - acc[i]).abs() <= 1e-10 * acc[i].abs().max(1.0),
                "slice {z} voxel {i}: ln prod {direct} vs accumulated {}",
                acc[i]
            );
            checked += 1;
        }
    }
    prop_assert!(checked > 0);
    Ok(())
}

/// Bouncing slice order 0, 1, .., nz-1, nz-2, .., 0, 1, ..
pub fn boustrophedon(nz: usize, len: usize) -> Vec<usize> {
    if nz == 1 {
        return vec![0; len];
    }
    let period = 2 * (nz - 1);
    (0..len)
        .map(|t| {
            let s = t % period;
            if s < nz {
                s
            } else {
                period - s
            }
        })
        .collect()
}

/// On a uniform stack with an unreachable evidence bar the model only scrolls.
pub fn check_boustrophedon(budget: usize, trigger_fraction: f64) -> Result<(), TestCaseError> {
    let b = bench();
    let geom = b.model.scanner.geometry;
    let grid = &b.setup.grid;
    let hat = grid.forward_real(&vec![b.setup.mean(); geom.len()]);
    let slices = SliceSpectra::from_volume_spectrum(&hat, geom.dims);
    let rule = StoppingRule {
        thresholds: vec![1e12; MAX_THRESHOLD_INDEX + 1],
        coverage_fraction: 1.0,
        ufov_radius_dva: 2.5,
    };
    let policy = ScrollPolicy { trigger_fraction };
    let out = run_fsm_trial(
        &b.model.scanner,
        &slices,
        &b.model.stats,
        FsmMode::Map {
            rule: &rule,
            policy: &policy,
            max_fixations: budget,
        },
        0.0,
        SeedStream::new(budget as u64).rng(),
    )
    .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(out.stop_reason, StopReason::FixationBudget);
    let visited: Vec<usize> = out.fixations.iter().map(|f| f.slice).collect();
    prop_assert_eq!(visited, boustrophedon(geom.dims[2], budget));
    let center = SearchState::initial_fixation(&geom);
    prop_assert!(out.fixations.iter().all(|f| f.x == center.x && f.y == center.y));
    Ok(())
}

/// Explored fraction never decreases, stays in [0, 1] and ignores repeats.
pub fn check_coverage_monotone(trace: &[(usize, usize, usize)], radius_dva: f64) -> Result<(), TestCaseError> {
    let geom = bench().model.scanner.geometry;
    let mut state = SearchState::new(geom, SearchState::initial_fixation(&geom), SeedStream::new(1).rng());
    let mut last = 0.0;
    for f in to_fixations(trace) {
        state.fixation = f;
        state.stamp_coverage(radius_dva);
        let now = state.explored_fraction();
        prop_assert!(now >= last && now <= 1.0, "{last} -> {now}");
        state.stamp_coverage(radius_dva);
        prop_assert_eq!(state.explored_fraction(), now);
        last = now;
    }
    prop_assert!(last > 0.0);
    Ok(())
}

/// Replaying a trace produces exactly one fixation per trace entry.
pub fn check_replay_count(seed: u64, present: bool, trace: &[(usize, usize, usize)]) -> Result<(), TestCaseError> {
    let b = bench();
    let plan = b.plan(seed, present);
    let fixes = to_fixations(trace);
    let out = b
        .model
        .replay_trial(&b.setup, &plan, &fixes)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(out.stop_reason, StopReason::TraceEnd);
    prop_assert_eq!(out.fixations.len(), fixes.len());
    prop_assert_eq!(out.events.len(), fixes.len());
    for (a, f) in out.fixations.iter().zip(&fixes) {
        prop_assert_eq!((a.x, a.y, a.slice), (f.x, f.y, f.slice));
    }
    Ok(())
}
