mod common;

use common::*;
use fovsearch_core::search::{map_next_fixation, process_fixation, Fixation, ResponseCache, SearchState};
use fovsearch_core::SeedStream;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn log_evidence_is_log_of_product(seed in 0u64..1000, present: bool, trace in trace_strategy(10)) {
        check_log_domain_identity(seed, present, &trace)?;
    }

    #[test]
    fn quiet_stack_scrolls_back_and_forth(budget in 1usize..50, trigger in 0.05f64..1.0) {
        check_boustrophedon(budget, trigger)?;
    }

    #[test]
    fn coverage_never_shrinks(trace in trace_strategy(30), radius in 0.05f64..3.0) {
        check_coverage_monotone(&trace, radius)?;
    }

    #[test]
    fn replay_keeps_every_fixation(seed in 0u64..1000, present: bool, trace in trace_strategy(8)) {
        check_replay_count(seed, present, &trace)?;
    }
}

#[test]
fn boustrophedon_reference() {
    assert_eq!(boustrophedon(4, 10), vec![0, 1, 2, 3, 2, 1, 0, 1, 2, 3]);
    assert_eq!(boustrophedon(1, 3), vec![0, 0, 0]);
}

fn fixate(b: &Bench, plan: &fovsearch_core::harness::TrialPlan, at: Fixation) -> (Vec<f64>, Vec<u8>) {
    let slices = b.model.stimulus(&b.setup, plan);
    let mut cache = ResponseCache::new(&b.model.scanner, &slices);
    let geom = b.model.scanner.geometry;
    let mut state = SearchState::new(geom, at, SeedStream::new(3).rng());
    let r = process_fixation(&mut state, &b.model.scanner, &mut cache, &b.model.stats);
    (r.log_lr, r.bands)
}

#[test]
fn noiseless_model_peaks_at_the_signal() {
    let b = noiseless_bench();
    let geom = b.model.scanner.geometry;
    for seed in 0..4 {
        let plan = b.plan(seed, true);
        let loc = plan.location;
        let at = Fixation {
            x: loc[0],
            y: loc[1],
            slice: loc[2],
            duration_ms: 0.0,
            n: 0,
        };
        let (log_lr, _) = fixate(b, &plan, at);
        let best = fovsearch_core::observers::argmax(&log_lr);
        let found = [best % geom.dims[0], best / geom.dims[0], loc[2]];
        assert!(geom.planar_distance_dva(found, loc) < 0.1, "found {found:?} signal {loc:?}");
    }
}

#[test]
fn depth_shifts_recover_an_off_slice_signal() {
    let mut b = Bench::new(0.0, 1.0);
    let plan = b.plan(5, true);
    let loc = plan.location;
    let nz = b.model.scanner.geometry.dims[2];
    let off = if loc[2] + 1 < nz { loc[2] + 1 } else { loc[2] - 1 };
    let at = Fixation {
        x: loc[0],
        y: loc[1],
        slice: off,
        duration_ms: 0.0,
        n: 0,
    };
    let i = loc[0] + b.model.scanner.geometry.dims[0] * loc[1];
    let shifted = fixate(&b, &plan, at).0[i];
    b.model.scanner.shifts = vec![0];
    let fixed = fixate(&b, &plan, at).0[i];
    assert!(fixed.is_finite() || !b.model.scanner.center_valid(off as isize));
    assert!(shifted > fixed, "with shifts {shifted}, centered only {fixed}");
}

#[test]
fn far_voxels_use_coarser_bands() {
    let b = noiseless_bench();
    let geom = b.model.scanner.geometry;
    let (_, bands) = fixate(b, &b.plan(0, false), Fixation { x: 0, y: 0, slice: 6, duration_ms: 0.0, n: 0 });
    let corner = (geom.dims[0] - 1) + geom.dims[0] * (geom.dims[1] - 1);
    let e = geom.planar_distance_dva([0, 0, 0], [geom.dims[0] - 1, geom.dims[1] - 1, 0]);
    assert_eq!(bands[0], 0);
    assert_eq!(bands[corner] as usize, fovsearch_core::foveation::band_index(e));
    assert!(bands[corner] > 0);
}

#[test]
fn inhibition_of_return_avoids_recent_fixations() {
    let b = bench();
    let geom = b.model.scanner.geometry;
    let r = b.model.scanner.ior_radius_dva;
    let mut rng = SeedStream::new(9).rng();
    for _ in 0..50 {
        let mut state = SearchState::new(geom, SearchState::initial_fixation(&geom), SeedStream::new(1).rng());
        let field: Vec<f64> = (0..geom.plane_len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        state.log_lambda[3] = Some(field.clone());
        for n in 0..2 {
            let f = Fixation {
                x: rng.gen_range(0..geom.dims[0]),
                y: rng.gen_range(0..geom.dims[1]),
                slice: 3,
                duration_ms: 0.0,
                n,
            };
            state.history.push(f);
        }
        state.fixation = *state.history.last().unwrap();
        let near = |x: usize, y: usize| {
            state
                .history
                .iter()
                .any(|p| geom.planar_distance_dva([x, y, 0], [p.x, p.y, 0]) <= r)
        };
        let mut sorted = field.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let free_best = (0..field.len())
            .filter(|&i| !near(i % geom.dims[0], i / geom.dims[0]))
            .map(|i| field[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let next = map_next_fixation(&state, &b.model.scanner);
        assert_eq!(next.slice, 3);
        if free_best > median {
            assert!(!near(next.x, next.y), "next fixation inside an inhibited disc");
            assert_eq!(field[next.x + geom.dims[0] * next.y], free_best);
        }
    }
}
