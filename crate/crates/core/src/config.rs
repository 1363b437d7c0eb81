//! Experiment configuration: JSON schema, defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::observers::{EyeFilter, ObserverKind};
use crate::stimulus::{NoiseSpec, SignalKind};
use crate::volume::DEFAULT_PITCH_DVA;
use crate::channels::FoveationParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[serde(rename = "lke3d_vs_search3d")]
    Lke3dVsSearch3d,
    #[serde(rename = "search2d_vs_3d")]
    Search2dVs3d,
    ForcedFixation,
}

impl ExperimentKind {
    /// Signal contrast shown to human readers in this experiment.
    pub fn default_contrast(&self) -> f64 {
        match self {
            ExperimentKind::Lke3dVsSearch3d => 0.45,
            ExperimentKind::Search2dVs3d | ExperimentKind::ForcedFixation => 0.65,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ExperimentKind::Lke3dVsSearch3d => "lke3d_vs_search3d",
            ExperimentKind::Search2dVs3d => "search2d_vs_3d",
            ExperimentKind::ForcedFixation => "forced_fixation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub dims: [usize; 3],
    pub pitch_dva: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            dims: [256, 256, 32],
            pitch_dva: DEFAULT_PITCH_DVA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub exponent: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let n = NoiseSpec::default();
        NoiseConfig {
            exponent: n.exponent,
            mean: n.mean,
            sigma: n.sigma,
        }
    }
}

impl NoiseConfig {
    pub fn spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            exponent: self.exponent,
            mean: self.mean,
            sigma: self.sigma,
            seed,
        }
    }
}

/// A value per (signal, dimensionality).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerCondition {
    pub mcalc_3d: f64,
    pub mass_3d: f64,
    pub mcalc_2d: f64,
    pub mass_2d: f64,
}

impl PerCondition {
    pub fn get(&self, signal: SignalKind, three_d: bool) -> f64 {
        match (signal, three_d) {
            (SignalKind::Microcalcification, true) => self.mcalc_3d,
            (SignalKind::Mass, true) => self.mass_3d,
            (SignalKind::Microcalcification, false) => self.mcalc_2d,
            (SignalKind::Mass, false) => self.mass_2d,
        }
    }

    fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("mcalc_3d", self.mcalc_3d),
            ("mass_3d", self.mass_3d),
            ("mcalc_2d", self.mcalc_2d),
            ("mass_2d", self.mass_2d),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerSignal {
    pub mcalc: f64,
    pub mass: f64,
}

impl PerSignal {
    pub fn get(&self, signal: SignalKind) -> f64 {
        match signal {
            SignalKind::Microcalcification => self.mcalc,
            SignalKind::Mass => self.mass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub coverage: PerCondition,
    pub scroll_fraction: PerSignal,
    pub ufov_radius_dva: f64,
    pub ior_radius_dva: f64,
    pub max_fixations: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            coverage: PerCondition {
                mcalc_3d: 0.25,
                mass_3d: 0.10,
                mcalc_2d: 0.80,
                mass_2d: 0.60,
            },
            scroll_fraction: PerSignal { mcalc: 0.35, mass: 0.70 },
            ufov_radius_dva: 2.5,
            ior_radius_dva: 1.0,
            max_fixations: 200,
        }
    }
}

/// Target proportions correct for contrast matching of standard observers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    pub enabled: bool,
    /// Mass PC targets for the cued and the search task.
    pub lke_mass: f64,
    pub search3d_mass: f64,
    /// 3D search PC targets per signal for the 2D/3D comparison.
    pub search3d: PerSignal,
    pub tolerance: f64,
    pub min_bracket: f64,
    pub max_contrast: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            enabled: true,
            lke_mass: 0.62,
            search3d_mass: 0.70,
            search3d: PerSignal { mcalc: 0.62, mass: 0.78 },
            tolerance: 0.01,
            min_bracket: 1e-4,
            max_contrast: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub observers: Vec<ObserverKind>,
    pub signals: Vec<SignalKind>,
    /// Signal contrast; `null` selects the experiment's default.
    pub contrast: Option<f64>,
    pub geometry: GeometryConfig,
    pub trials: usize,
    pub training_trials: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub eye_filter: EyeFilter,
    pub foveation: FoveationParams,
    pub template_slices: usize,
    pub search: SearchConfig,
    pub matching: MatchingConfig,
    /// Forced-fixation eccentricities (dva).
    pub eccentricities: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut observers = ObserverKind::STANDARD.to_vec();
        observers.push(ObserverKind::Fcho);
        ExperimentConfig {
            experiment: ExperimentKind::Lke3dVsSearch3d,
            observers,
            signals: SignalKind::ALL.to_vec(),
            contrast: None,
            geometry: GeometryConfig::default(),
            trials: 300,
            training_trials: 200,
            seed: 0,
            noise: NoiseConfig::default(),
            eye_filter: EyeFilter::default(),
            foveation: FoveationParams::default(),
            template_slices: 5,
            search: SearchConfig::default(),
            matching: MatchingConfig::default(),
            eccentricities: (0..10).map(f64::from).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn contrast(&self) -> f64 {
        self.contrast.unwrap_or_else(|| self.experiment.default_contrast())
    }

    /// Fills every defaulted value so the snapshot is self-describing.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.contrast = Some(self.contrast());
        c.observers.sort();
        c.observers.dedup();
        c.signals.sort_by_key(|s| s.label());
        c.signals.dedup();
        c
    }

    /// Every range violation, each prefixed with its key path.
    pub fn errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |path: &str, ok: bool, what: &str| {
            if !ok {
                errs.push(format!("{path}: {what}"));
            }
        };
        check("noise.exponent", self.noise.exponent.is_finite() && self.noise.exponent >= 0.0, "must be >= 0");
        check("noise.sigma", self.noise.sigma.is_finite() && self.noise.sigma > 0.0, "must be > 0");
        check("noise.mean", self.noise.mean.is_finite() && self.noise.mean > 0.0, "must be > 0");
        if let Some(c) = self.contrast {
            check("contrast", c.is_finite() && c >= 0.0, "must be >= 0");
        }
        check("geometry.dims", self.geometry.dims.iter().all(|&d| d >= 1), "all dims must be >= 1");
        check("geometry.dims", self.geometry.dims[0] >= 2 && self.geometry.dims[1] >= 2, "x and y need at least 2 voxels");
        check("geometry.pitch_dva", self.geometry.pitch_dva.is_finite() && self.geometry.pitch_dva > 0.0, "must be > 0");
        check("trials", self.trials >= 1, "must be >= 1");
        check("training_trials", self.training_trials >= 1, "must be >= 1");
        check("observers", !self.observers.is_empty(), "must list at least one observer");
        check("signals", !self.signals.is_empty(), "must list at least one signal");
        check("template_slices", self.template_slices % 2 == 1, "must be odd");
        for (name, v) in [
            ("eye_filter.alpha", self.eye_filter.alpha),
            ("eye_filter.beta", self.eye_filter.beta),
            ("eye_filter.gamma", self.eye_filter.gamma),
            ("foveation.alpha", self.foveation.alpha),
            ("foveation.beta", self.foveation.beta),
            ("foveation.k", self.foveation.k),
        ] {
            check(name, v.is_finite() && v >= 0.0, "must be finite and >= 0");
        }
        for (name, v) in self.search.coverage.entries() {
            check(&format!("search.coverage.{name}"), v > 0.0 && v <= 1.0, "must lie in (0, 1]");
        }
        for (name, v) in [("mcalc", self.search.scroll_fraction.mcalc), ("mass", self.search.scroll_fraction.mass)] {
            check(&format!("search.scroll_fraction.{name}"), v.is_finite() && v > 0.0, "must be > 0");
        }
        check("search.ufov_radius_dva", self.search.ufov_radius_dva > 0.0, "must be > 0");
        check("search.ior_radius_dva", self.search.ior_radius_dva >= 0.0, "must be >= 0");
        check("search.max_fixations", self.search.max_fixations >= 1, "must be >= 1");
        for (name, v) in [
            ("matching.lke_mass", self.matching.lke_mass),
            ("matching.search3d_mass", self.matching.search3d_mass),
            ("matching.search3d.mcalc", self.matching.search3d.mcalc),
            ("matching.search3d.mass", self.matching.search3d.mass),
        ] {
            check(name, (0.5..1.0).contains(&v), "target PC must lie in [0.5, 1)");
        }
        check("matching.tolerance", self.matching.tolerance > 0.0, "must be > 0");
        check("matching.min_bracket", self.matching.min_bracket > 0.0, "must be > 0");
        check("matching.max_contrast", self.matching.max_contrast > 0.0, "must be > 0");
        check("eccentricities", self.eccentricities.iter().all(|e| e.is_finite() && *e >= 0.0), "must be >= 0");
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Parses, rejects unknown keys, fills defaults and validates.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text)?
        };
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let reference = serde_json::to_value(ExperimentConfig::default())?;
        let mut errs = Vec::new();
        unknown_keys(&value, &reference, "", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Config(vec![format!("{}: {}", e.path(), e.inner())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn unknown_keys(value: &Value, reference: &Value, path: &str, errs: &mut Vec<String>) {
    if let (Value::Object(map), Value::Object(known)) = (value, reference) {
        for (k, v) in map {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match known.get(k) {
                Some(r) => unknown_keys(v, r, &p, errs),
                None => errs.push(format!("{p}: unknown key")),
            }
        }
    }
}
