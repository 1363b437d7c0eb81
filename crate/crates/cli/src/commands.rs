use std::collections::BTreeMap;
use std::fs::File;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use fovsearch_core::config::{ExperimentConfig, ExperimentKind};
use fovsearch_core::foveation::{
    build_ladder, fit_foveation_params, synthesize_dataset, DatasetRow, DprimeTable, EccentricityDataset, FitOptions,
    LadderSpec,
};
use fovsearch_core::harness::{
    build_standard_observer, evaluation_plans, experiment_conditions, forced_fixation, matched_contrasts,
    metrics_from_records, replay_experiment, run_conditions, simulate_linear_study, train_search_model, training_plans,
    Condition, ExperimentResult, SearchModel, Setup, Task, TrialRecord,
};
use fovsearch_core::io::{read_json_lines, write_json_lines, write_kernel, write_volume, StimulusRecord, VolumeMeta};
use fovsearch_core::observers::ObserverKind;
use fovsearch_core::search::ingest_trace;
use fovsearch_core::stats::dprime_from_counts;
use fovsearch_core::stimulus::add_kernel;
use fovsearch_core::{Kernel, SeedStream, SignalKind, Volume};
use serde::{Deserialize, Serialize};

use crate::{parse_signal, plot, Execute, Outputs};

fn signal_arg(s: &Option<String>, cfg: &ExperimentConfig) -> Result<SignalKind> {
    match s {
        Some(s) => parse_signal(s),
        None => cfg.signals.first().copied().context("config lists no signals"),
    }
}

fn write_result(out: &mut Outputs, result: &ExperimentResult) -> Result<()> {
    result.write_records(out.create("records.jsonl")?)?;
    result.write_metrics_csv(out.create("metrics.csv")?)?;
    if !result.matches.is_empty() {
        out.write_json("matches.json", &result.matches)?;
    }
    if !result.training.is_empty() {
        out.write_json("training.json", &result.training)?;
    }
    for m in &result.metrics {
        log::info!(
            "{:<10} {:<22} c={:.4} PC {:.3} ± {:.3} d' {:.3}",
            m.observer,
            m.condition.label(),
            m.contrast,
            m.pc,
            m.se,
            m.dprime
        );
    }
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct GenStimuli {
    /// Trials per signal; defaults to the configured trial count.
    #[arg(long)]
    pub count: Option<usize>,
    /// Write only the displayed slice of each trial.
    #[arg(long)]
    pub two_d: bool,
}

impl Execute for GenStimuli {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        let setup = Setup::new(cfg)?;
        let contrast = cfg.contrast();
        let count = self.count.unwrap_or(cfg.trials);
        let mut records = Vec::new();
        for &signal in &cfg.signals {
            let profile = setup.profile(signal)?;
            let mut plans = evaluation_plans(&setup, signal)?;
            if count > plans.len() {
                let mut c = cfg.clone();
                c.trials = count;
                plans = evaluation_plans(&Setup::new(&c)?, signal)?;
            }
            for plan in plans.iter().take(count) {
                let data = setup.grid.inverse_real(setup.noise_hat(plan));
                let mut vol = Volume::from_data(setup.geometry, data)?;
                if plan.present {
                    add_kernel(&mut vol, &profile, plan.location, contrast)?;
                }
                let mut location = plan.location;
                if self.two_d {
                    vol = vol.plane(plan.display_slice(setup.geometry.dims[2]));
                    location[2] = 0;
                }
                let name = format!("stimuli/{}_{:04}", signal.label(), plan.index);
                let mut meta = VolumeMeta::stimulus(vol.geometry(), &cfg.noise.spec(plan.noise_seed));
                meta.dims = vol.dims();
                out.file(&format!("{name}.raw"))?;
                out.file(&format!("{name}.json"))?;
                write_volume(&out.dir.join(&name), &vol, &meta)?;
                records.push(StimulusRecord {
                    trial: plan.index,
                    noise_seed: plan.noise_seed,
                    signal,
                    contrast: if plan.present { contrast } else { 0.0 },
                    present: plan.present,
                    location,
                    three_d: !self.two_d,
                    file: format!("{name}.raw"),
                });
            }
        }
        write_json_lines(out.create("stimuli.jsonl")?, &records)?;
        log::info!("wrote {} stimuli", records.len());
        Ok(())
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct BuildObserver {
    /// Signal the templates are built for; defaults to the first configured signal.
    #[arg(long)]
    pub signal: Option<String>,
    /// Build slice templates instead of stack templates.
    #[arg(long)]
    pub two_d: bool,
}

#[derive(Serialize)]
struct ObserverSummary {
    observer: String,
    signal: SignalKind,
    three_d: bool,
    template: String,
    template_sigma: f64,
    mean_absent: f64,
    mean_present: f64,
    dprime_unit_contrast: f64,
    dprime_at_contrast: f64,
}

impl Execute for BuildObserver {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        let setup = Setup::new(cfg)?;
        let signal = signal_arg(&self.signal, cfg)?;
        let profile = setup.profile(signal)?;
        let contrast = cfg.contrast();
        let pitch = setup.geometry.pitch_dva;
        let mut summary = Vec::new();
        let save = |out: &mut Outputs, label: &str, kernel: &Kernel| -> Result<String> {
            let name = format!("templates/{}_{}", signal.label(), label);
            out.file(&format!("{name}.raw"))?;
            out.file(&format!("{name}.json"))?;
            write_kernel(&out.dir.join(&name), kernel, &VolumeMeta::template(pitch, kernel, label))?;
            Ok(format!("{name}.raw"))
        };
        for &kind in &cfg.observers {
            if kind == ObserverKind::Fcho {
                let (sig, spectrum) =
                    if self.two_d { (profile.plane(0), &setup.plane_spectrum) } else { (profile.clone(), &setup.spectrum) };
                let ladder = build_ladder(
                    &sig,
                    spectrum,
                    setup.mean(),
                    &cfg.foveation,
                    &LadderSpec::foveal(&setup.patch, if self.two_d { 1 } else { cfg.template_slices }),
                    &setup.patch,
                )?;
                for band in &ladder.bands {
                    let label = format!("fcho_e{}", band.eccentricity);
                    let file = save(out, &label, &band.template.kernel)?;
                    summary.push(ObserverSummary {
                        observer: label,
                        signal,
                        three_d: !self.two_d,
                        template: file,
                        template_sigma: band.stats.template_sigma,
                        mean_absent: band.stats.mean_absent,
                        mean_present: band.stats.mean_present,
                        dprime_unit_contrast: band.dprime(1.0),
                        dprime_at_contrast: band.dprime(contrast),
                    });
                }
                continue;
            }
            let obs = build_standard_observer(&setup, kind, &profile, !self.two_d)?;
            let file = save(out, kind.label(), &obs.template.kernel)?;
            let d = obs.stats.dprime();
            log::info!("{:<10} d' at unit contrast {d:.3}", kind.label());
            summary.push(ObserverSummary {
                observer: kind.label().into(),
                signal,
                three_d: !self.two_d,
                template: file,
                template_sigma: obs.stats.template_sigma,
                mean_absent: obs.stats.mean_absent,
                mean_present: obs.stats.mean_present,
                dprime_unit_contrast: d,
                dprime_at_contrast: d * contrast,
            });
        }
        out.write_json("observers.json", &summary)?;
        Ok(())
    }
}

/// Cued stack task for every configured signal.
#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct RunLke {}

impl Execute for RunLke {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        let setup = Setup::new(cfg)?;
        let conditions: Vec<Condition> = cfg.signals.iter().map(|&s| Condition::new(s, Task::Lke, true)).collect();
        write_result(out, &run_conditions(&setup, &conditions)?)
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct RunSearch {
    /// Fixation trace CSV (`trial,n,x,y,slice,duration_ms`) to replay instead of free search.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Replay on single slices rather than stacks.
    #[arg(long)]
    pub two_d: bool,
}

impl Execute for RunSearch {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        let setup = Setup::new(cfg)?;
        let mut result = ExperimentResult::default();
        if let Some(path) = &self.trace {
            let file = File::open(path).with_context(|| format!("cannot open trace {}", path.display()))?;
            let trace = ingest_trace(file).with_context(|| format!("invalid trace {}", path.display()))?;
            if trace.empty {
                bail!("trace {} holds no fixations", path.display());
            }
            if trace.dropped_short > 0 {
                log::warn!("dropped {} fixations shorter than 50 ms", trace.dropped_short);
            }
            for &signal in &cfg.signals {
                let cond = Condition::new(signal, Task::Search, !self.two_d);
                result.records.extend(replay_experiment(&setup, cond, &trace)?);
            }
            result.metrics = metrics_from_records(&result.records)?;
        } else {
            let kind = match cfg.experiment {
                ExperimentKind::ForcedFixation => ExperimentKind::Search2dVs3d,
                k => k,
            };
            let conditions: Vec<Condition> =
                experiment_conditions(kind, &cfg.signals).into_iter().filter(|c| c.task == Task::Search).collect();
            result = run_conditions(&setup, &conditions)?;
        }
        write_result(out, &result)
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct FitFovea {
    /// Yes/no counts CSV (`signal,eccentricity_dva,n_trials,n_hits,n_fa,n_present,n_absent[,contrast]`).
    #[arg(long, conflicts_with = "synthetic_trials")]
    pub data: Option<PathBuf>,
    /// Fit counts drawn from the configured parameters, this many trials per point.
    #[arg(long)]
    pub synthetic_trials: Option<u64>,
    /// Divisor grid size of the d' table.
    #[arg(long, default_value_t = 64)]
    pub table_points: usize,
    /// Largest tabulated channel-frequency divisor.
    #[arg(long, default_value_t = 64.0)]
    pub max_scaling: f64,
}

#[derive(Serialize)]
struct EccentricityPoint {
    signal: SignalKind,
    eccentricity_dva: f64,
    observed_dprime: f64,
    model_dprime: f64,
    n_trials: u64,
}

impl Execute for FitFovea {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        let setup = Setup::new(cfg)?;
        let data = match &self.data {
            Some(path) => EccentricityDataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()))?,
            None => EccentricityDataset { rows: Vec::new() },
        };
        let signals = if data.rows.is_empty() { cfg.signals.clone() } else { data.signals() };
        let kernels: Vec<(SignalKind, Kernel)> =
            signals.iter().map(|&s| Ok((s, setup.profile(s)?.plane(0)))).collect::<Result<_>>()?;
        log::info!("tabulating d' at {} divisors up to {}", self.table_points, self.max_scaling);
        let table = DprimeTable::build(
            &kernels,
            &setup.plane_spectrum,
            setup.mean(),
            &LadderSpec::foveal(&setup.patch, 1),
            &setup.patch,
            self.max_scaling,
            self.table_points,
        )?;
        let data = if self.data.is_some() {
            data
        } else if let Some(n) = self.synthetic_trials {
            synthesize_dataset(
                &table,
                &cfg.foveation,
                &cfg.eccentricities,
                n,
                cfg.contrast(),
                SeedStream::new(cfg.seed).child("synthetic_dataset"),
            )?
        } else {
            let contrast = cfg.contrast();
            let rows = forced_fixation(&setup)?;
            EccentricityDataset {
                rows: rows
                    .into_iter()
                    .map(|r| DatasetRow {
                        signal: r.signal,
                        eccentricity_dva: r.eccentricity_dva,
                        n_trials: r.n_present + r.n_absent,
                        n_hits: r.hits,
                        n_fa: r.false_alarms,
                        n_present: r.n_present,
                        n_absent: r.n_absent,
                        contrast,
                    })
                    .collect(),
            }
        };
        if self.data.is_none() {
            data.write_csv(&out.file("dataset.csv")?)?;
        }
        let fit = fit_foveation_params(&data, &table, &FitOptions::default())?;
        let p = fit.params;
        log::info!(
            "alpha {:.4} beta {:.4} K {:.4} log-likelihood {:.3}",
            p.alpha,
            p.beta,
            p.k,
            fit.log_likelihood
        );
        out.write_json("fit.json", &fit)?;
        let mut w = csv::Writer::from_writer(out.create("eccentricity.csv")?);
        for row in &data.rows {
            w.serialize(EccentricityPoint {
                signal: row.signal,
                eccentricity_dva: row.eccentricity_dva,
                observed_dprime: observed_dprime(row),
                model_dprime: table.dprime(row.signal, row.eccentricity_dva, row.contrast, &p).unwrap_or(f64::NAN),
                n_trials: row.n_trials,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn observed_dprime(row: &DatasetRow) -> f64 {
    dprime_from_counts(row.n_hits, row.n_present, row.n_fa, row.n_absent)
}

/// Trains the stopping thresholds of every search condition of the experiment.
#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct TrainThresholds {}

#[derive(Serialize)]
struct ThresholdRow {
    condition: String,
    fixations: usize,
    threshold: f64,
}

impl Execute for TrainThresholds {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        let setup = Setup::new(cfg)?;
        let kind = match cfg.experiment {
            ExperimentKind::ForcedFixation => ExperimentKind::Search2dVs3d,
            k => k,
        };
        let mut reports = Vec::new();
        let mut rows = Vec::new();
        for cond in experiment_conditions(kind, &cfg.signals).into_iter().filter(|c| c.task == Task::Search) {
            log::info!("training {}", cond.label());
            let mut model = SearchModel::new(&setup, cond, cfg.contrast())?;
            let report = train_search_model(&mut model, &setup, &training_plans(&setup, cond.signal)?)?;
            log::info!("final threshold {:.4}, training PC {:.3}", report.final_threshold, report.training_pc);
            for (n, t) in report.per_count.thresholds.iter().enumerate() {
                rows.push(ThresholdRow {
                    condition: cond.label(),
                    fixations: n,
                    threshold: *t,
                });
            }
            reports.push(report);
        }
        let mut w = csv::Writer::from_writer(out.create("thresholds.csv")?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        out.write_json("training.json", &reports)?;
        Ok(())
    }
}

/// Matched contrasts of the standard observers for the configured experiment.
#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct MatchContrast {}

#[derive(Serialize)]
struct ContrastRow {
    observer: String,
    condition: String,
    contrast: f64,
    matched: bool,
}

impl Execute for MatchContrast {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        if cfg.experiment == ExperimentKind::ForcedFixation {
            bail!("forced_fixation has no matching protocol; choose lke3d_vs_search3d or search2d_vs_3d");
        }
        let setup = Setup::new(cfg)?;
        let conditions = experiment_conditions(cfg.experiment, &cfg.signals);
        let study = simulate_linear_study(&setup, &conditions)?;
        let (contrasts, records) = matched_contrasts(&setup, &study, cfg.experiment, &conditions)?;
        let labels: Vec<&str> = study.runs.first().map_or(Vec::new(), |r| r.observers.iter().map(|o| o.kind.label()).collect());
        let mut w = csv::Writer::from_writer(out.create("contrasts.csv")?);
        for (o, cond, c, matched) in contrasts {
            w.serialize(ContrastRow {
                observer: labels[o].to_string(),
                condition: cond.label(),
                contrast: c,
                matched,
            })?;
        }
        w.flush()?;
        out.write_json("matches.json", &records)?;
        Ok(())
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct Analyze {
    /// Trial records as JSON lines, as written by run-lke or run-search.
    #[arg(long)]
    pub records: PathBuf,
}

impl Execute for Analyze {
    fn execute(&self, _cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        let file = File::open(&self.records).with_context(|| format!("cannot open records {}", self.records.display()))?;
        let records: Vec<TrialRecord> =
            read_json_lines(file).with_context(|| format!("invalid records {}", self.records.display()))?;
        let result = ExperimentResult {
            metrics: metrics_from_records(&records)?,
            ..Default::default()
        };
        result.write_metrics_csv(out.create("metrics.csv")?)?;
        let mut classes: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for r in &records {
            let key = format!("{} {}", r.observer, r.condition.label());
            let class = serde_json::to_value(r.error_class)?.as_str().unwrap_or_default().to_string();
            *classes.entry(key).or_default().entry(class).or_default() += 1;
        }
        out.write_json("error_classes.json", &classes)?;
        Ok(())
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct Plot {
    /// Metrics CSV to draw as PC bars.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Eccentricity CSV from fit-fovea to draw as d' curves.
    #[arg(long)]
    pub eccentricity: Option<PathBuf>,
}

impl Execute for Plot {
    fn execute(&self, _cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
        if self.metrics.is_none() && self.eccentricity.is_none() {
            bail!("plot needs --metrics and/or --eccentricity");
        }
        if let Some(path) = &self.metrics {
            let bars = plot::read_metric_bars(path)?;
            plot::write_bar_csv(&out.file("pc_bars.csv")?, &bars)?;
            plot::draw_pc_bars(&out.file("pc_bars.svg")?, &bars)?;
        }
        if let Some(path) = &self.eccentricity {
            let points = plot::read_eccentricity(path)?;
            plot::write_eccentricity_csv(&out.file("dprime_eccentricity.csv")?, &points)?;
            plot::draw_eccentricity(&out.file("dprime_eccentricity.svg")?, &points)?;
        }
        Ok(())
    }
}
