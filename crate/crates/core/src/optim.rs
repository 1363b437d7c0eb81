//! Thin wrapper over the `argmin` Nelder-Mead solver.

use std::sync::{Arc, Mutex};

use argmin::core::observers::{Observe, ObserverMode};
use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason, TerminationStatus, KV};
use argmin::solver::neldermead::NelderMead;

#[derive(Clone, Debug)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// Stop when the SD of the simplex values falls below this.
    pub tolerance: f64,
}

#[derive(Clone, Debug)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
    /// Best value after each iteration.
    pub history: Vec<f64>,
}

struct Objective<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, ArgminError> {
        Ok((self.0)(p))
    }
}

struct History(Arc<Mutex<Vec<f64>>>);

impl<I: State<Float = f64>> Observe<I> for History {
    fn observe_iter(&mut self, state: &I, _kv: &KV) -> Result<(), ArgminError> {
        self.0.lock().expect("history lock").push(state.get_best_cost());
        Ok(())
    }
}

/// Minimizes `f` from `x0` with an axis-aligned initial simplex of size `steps`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], steps: &[f64], options: &NelderMeadOptions) -> NelderMeadResult {
    let mut simplex = vec![x0.to_vec()];
    for (i, s) in steps.iter().enumerate() {
        let mut v = x0.to_vec();
        v[i] += s;
        simplex.push(v);
    }
    let fallback = NelderMeadResult {
        value: f(x0),
        x: x0.to_vec(),
        converged: false,
        evaluations: 1,
        history: Vec::new(),
    };
    let solver = match NelderMead::new(simplex).with_sd_tolerance(options.tolerance) {
        Ok(s) => s,
        Err(_) => return fallback,
    };
    let history = Arc::new(Mutex::new(Vec::new()));
    let run = Executor::new(Objective(f), solver)
        .configure(|st| st.max_iters(options.max_evaluations as u64))
        .add_observer(History(history.clone()), ObserverMode::Always)
        .run();
    let Ok(res) = run else { return fallback };
    let state = res.state();
    let converged = matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverConverged)
    );
    let evaluations = state.get_func_counts().get("cost_count").copied().unwrap_or(0) as usize;
    let history = history.lock().expect("history lock").clone();
    NelderMeadResult {
        x: state.get_best_param().cloned().unwrap_or_else(|| x0.to_vec()),
        value: state.get_best_cost(),
        converged,
        evaluations,
        history,
    }
}
