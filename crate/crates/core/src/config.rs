//! Run configuration.
//!
//! Grammar, one statement per line:
//!
//! ```text
//! line      := blank | comment | setting
//! comment   := '#' any*
//! setting   := section '.' key ws* '=' ws* value
//! value     := scalar | scalar (',' scalar)*
//! ```
//!
//! Unknown keys, duplicates and unparsable values are rejected with the line
//! number. `--override section.key=value` uses the same syntax.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::assimilation::ObservationSetup;
use crate::ensemble::{BaseProtocol, PerturbationSpec};
use crate::error::{Error, Result};
use crate::forecast::FilterMode;
use crate::kernels::{KernelFamily, KernelSpec, MeasureNorm};
use crate::qg::{Forcing, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub p: usize,
    pub p_test: usize,
    pub n_pod: usize,
    pub variance_factor: f64,
    pub amplitude: f64,
    pub spin_up: f64,
    pub horizon: f64,
    pub output_every: f64,
    pub seed_training: u64,
    pub seed_test: u64,
    pub base_seed: u64,
    pub base_noise: f64,
    pub base_time: f64,
    pub base_snapshots: usize,
    pub base_snapshot_every: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let base = BaseProtocol::default();
        let pert = PerturbationSpec::default();
        EnsembleConfig {
            p: 100,
            p_test: 100,
            n_pod: pert.n_pod,
            variance_factor: pert.variance_factor,
            amplitude: pert.amplitude,
            spin_up: 0.03,
            horizon: 0.3,
            output_every: 0.01,
            seed_training: 11,
            seed_test: 12,
            base_seed: base.seed,
            base_noise: base.noise_amplitude,
            base_time: base.t_establish,
            base_snapshots: base.n_snapshots,
            base_snapshot_every: base.snapshot_every,
        }
    }
}

impl EnsembleConfig {
    pub fn base_protocol(&self) -> BaseProtocol {
        BaseProtocol {
            noise_amplitude: self.base_noise,
            seed: self.base_seed,
            t_establish: self.base_time,
            n_snapshots: self.base_snapshots,
            snapshot_every: self.base_snapshot_every,
        }
    }

    pub fn perturbation(&self) -> PerturbationSpec {
        PerturbationSpec {
            n_pod: self.n_pod,
            variance_factor: self.variance_factor,
            amplitude: self.amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub families: Vec<KernelFamily>,
    pub ell_g: f64,
    pub jitter_rel: f64,
    pub center_anomalies: bool,
    pub measure_norm: MeasureNorm,
}

impl Default for KernelConfig {
    fn default() -> Self {
        let k = KernelSpec::default();
        KernelConfig {
            families: vec![KernelFamily::Empirical, KernelFamily::Gaussian],
            ell_g: k.ell_g,
            jitter_rel: k.jitter_rel,
            center_anomalies: k.center_anomalies,
            measure_norm: k.measure_norm,
        }
    }
}

impl KernelConfig {
    pub fn spec(&self, family: KernelFamily) -> KernelSpec {
        KernelSpec {
            family,
            ell_g: self.ell_g,
            center_anomalies: self.center_anomalies,
            jitter_rel: self.jitter_rel,
            measure_norm: self.measure_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanConfig {
    /// Extra output times at which spectra are recomputed and their sorted
    /// `|omega|` averaged. Experimental.
    pub average_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub c: f64,
    pub sigma_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastConfig {
    pub filter_mode: FilterMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssimConfig {
    pub columns: Vec<f64>,
    pub obs_start: f64,
    pub obs_end: f64,
    pub obs_every: f64,
    pub single_time: f64,
    pub noise_frac: f64,
    pub ell_loc: f64,
    pub alpha: f64,
    pub seed: u64,
    pub jitter_rel: f64,
}

impl Default for AssimConfig {
    fn default() -> Self {
        let s = ObservationSetup::default();
        AssimConfig {
            columns: s.columns,
            obs_start: 0.0,
            obs_end: 0.12,
            obs_every: 0.01,
            single_time: 0.06,
            noise_frac: s.noise_frac,
            ell_loc: s.ell_loc,
            alpha: s.alpha,
            seed: s.seed,
            jitter_rel: s.jitter_rel,
        }
    }
}

impl AssimConfig {
    pub fn obs_times(&self) -> Vec<f64> {
        let n = ((self.obs_end - self.obs_start) / self.obs_every).round() as usize;
        (0..=n).map(|k| self.obs_start + k as f64 * self.obs_every).collect()
    }

    pub fn setup(&self) -> ObservationSetup {
        ObservationSetup {
            columns: self.columns.clone(),
            obs_times: self.obs_times(),
            noise_frac: self.noise_frac,
            ell_loc: self.ell_loc,
            alpha: self.alpha,
            seed: self.seed,
            jitter_rel: self.jitter_rel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelParams,
    pub ensemble: EnsembleConfig,
    pub kernel: KernelConfig,
    pub koopman: KoopmanConfig,
    pub lyapunov: LyapunovConfig,
    pub forecast: ForecastConfig,
    pub assim: AssimConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelParams::default(),
            ensemble: EnsembleConfig::default(),
            kernel: KernelConfig::default(),
            koopman: KoopmanConfig {
                average_times: Vec::new(),
            },
            lyapunov: LyapunovConfig {
                c: crate::lyapunov::DEFAULT_AMPLIFICATION,
                sigma_threshold: crate::lyapunov::DEFAULT_SIGMA_THRESHOLD,
            },
            forecast: ForecastConfig {
                filter_mode: FilterMode::MeanAnchored,
            },
            assim: AssimConfig::default(),
            output_dir: PathBuf::from("output"),
        }
    }
}

/// Pipeline stages; each artifact is stamped with the hash of the config
/// sections its stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Spinup,
    Ensemble,
    Koopman,
    Lyapunov,
    Reconstruct,
    Assimilate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Spinup,
        Stage::Ensemble,
        Stage::Koopman,
        Stage::Lyapunov,
        Stage::Reconstruct,
        Stage::Assimilate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Spinup => "spinup",
            Stage::Ensemble => "ensemble",
            Stage::Koopman => "koopman",
            Stage::Lyapunov => "lyapunov",
            Stage::Reconstruct => "reconstruct",
            Stage::Assimilate => "assimilate",
        }
    }

    /// Key prefixes whose values feed this stage.
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Spinup => &["model.", "ensemble.base_"],
            Stage::Ensemble => &["model.", "ensemble."],
            Stage::Koopman => &["model.", "ensemble.", "kernel.", "koopman.", "lyapunov."],
            Stage::Lyapunov => &["model.", "ensemble.", "kernel.", "koopman.", "lyapunov."],
            Stage::Reconstruct => &["model.", "ensemble.", "kernel.", "koopman.", "lyapunov.", "forecast."],
            Stage::Assimilate => &["model.", "ensemble.", "assim."],
        }
    }
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

fn parse_f64(v: &str, line: usize, key: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| !x.is_nan())
        .ok_or_else(|| cfg_err(line, format!("{key}: `{v}` is not a number")))
}

fn parse_usize(v: &str, line: usize, key: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| cfg_err(line, format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_u64(v: &str, line: usize, key: &str) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| cfg_err(line, format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_bool(v: &str, line: usize, key: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(line, format!("{key}: `{v}` is not true/false"))),
    }
}

fn parse_list(v: &str, line: usize, key: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_f64(s.trim(), line, key)).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| crate::io::fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (key, value) = split_setting(s).ok_or_else(|| cfg_err(line, format!("expected `section.key = value`, got `{s}`")))?;
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(cfg_err(line, format!("{key} already set on line {prev}")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `section.key=value` overrides; errors report line 0.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = split_setting(o.trim()).ok_or_else(|| cfg_err(0, format!("override `{o}` is not `section.key=value`")))?;
            self.set(key, value, 0)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        let e = &mut self.ensemble;
        let k = &mut self.kernel;
        let a = &mut self.assim;
        match key {
            "model.rossby" => m.rossby = parse_f64(v, line, key)?,
            "model.munk_ratio" => m.munk_ratio = parse_f64(v, line, key)?,
            "model.domain_length" => m.domain_length = parse_f64(v, line, key)?,
            "model.nx" => m.nx = parse_usize(v, line, key)?,
            "model.ny" => m.ny = parse_usize(v, line, key)?,
            "model.dt" => m.dt = parse_f64(v, line, key)?,
            "model.forcing" => {
                m.forcing = match v {
                    "none" => Forcing::None,
                    "sine" => Forcing::Sine {
                        amplitude: match m.forcing {
                            Forcing::Sine { amplitude } => amplitude,
                            Forcing::None => 1.0,
                        },
                    },
                    _ => return Err(cfg_err(line, format!("{key}: `{v}` is not sine/none"))),
                }
            }
            "model.forcing_amplitude" => {
                let amp = parse_f64(v, line, key)?;
                if let Forcing::Sine { amplitude } = &mut m.forcing {
                    *amplitude = amp;
                }
            }
            "model.divergence_guard" => m.divergence_guard = parse_f64(v, line, key)?,
            "ensemble.p" => e.p = parse_usize(v, line, key)?,
            "ensemble.p_test" => e.p_test = parse_usize(v, line, key)?,
            "ensemble.n_pod" => e.n_pod = parse_usize(v, line, key)?,
            "ensemble.variance_factor" => e.variance_factor = parse_f64(v, line, key)?,
            "ensemble.amplitude" => e.amplitude = parse_f64(v, line, key)?,
            "ensemble.spin_up" => e.spin_up = parse_f64(v, line, key)?,
            "ensemble.horizon" => e.horizon = parse_f64(v, line, key)?,
            "ensemble.output_every" => e.output_every = parse_f64(v, line, key)?,
            "ensemble.seed_training" => e.seed_training = parse_u64(v, line, key)?,
            "ensemble.seed_test" => e.seed_test = parse_u64(v, line, key)?,
            "ensemble.base_seed" => e.base_seed = parse_u64(v, line, key)?,
            "ensemble.base_noise" => e.base_noise = parse_f64(v, line, key)?,
            "ensemble.base_time" => e.base_time = parse_f64(v, line, key)?,
            "ensemble.base_snapshots" => e.base_snapshots = parse_usize(v, line, key)?,
            "ensemble.base_snapshot_every" => e.base_snapshot_every = parse_f64(v, line, key)?,
            "kernel.families" => {
                k.families = v
                    .split(',')
                    .map(|s| {
                        KernelFamily::parse(s.trim()).ok_or_else(|| cfg_err(line, format!("{key}: unknown kernel `{}`", s.trim())))
                    })
                    .collect::<Result<_>>()?
            }
            "kernel.ell_g" => k.ell_g = parse_f64(v, line, key)?,
            "kernel.jitter_rel" => k.jitter_rel = parse_f64(v, line, key)?,
            "kernel.center_anomalies" => k.center_anomalies = parse_bool(v, line, key)?,
            "kernel.measure_norm" => {
                k.measure_norm = MeasureNorm::parse(v).ok_or_else(|| cfg_err(line, format!("{key}: `{v}` is not none/one_over_p")))?
            }
            "koopman.average_times" => self.koopman.average_times = parse_list(v, line, key)?,
            "lyapunov.c" => self.lyapunov.c = parse_f64(v, line, key)?,
            "lyapunov.sigma_threshold" => self.lyapunov.sigma_threshold = parse_f64(v, line, key)?,
            "forecast.filter_mode" => {
                self.forecast.filter_mode =
                    FilterMode::parse(v).ok_or_else(|| cfg_err(line, format!("{key}: `{v}` is not literal/mean_anchored")))?
            }
            "assim.columns" => a.columns = parse_list(v, line, key)?,
            "assim.obs_start" => a.obs_start = parse_f64(v, line, key)?,
            "assim.obs_end" => a.obs_end = parse_f64(v, line, key)?,
            "assim.obs_every" => a.obs_every = parse_f64(v, line, key)?,
            "assim.single_time" => a.single_time = parse_f64(v, line, key)?,
            "assim.noise_frac" => a.noise_frac = parse_f64(v, line, key)?,
            "assim.ell_loc" => a.ell_loc = parse_f64(v, line, key)?,
            "assim.alpha" => a.alpha = parse_f64(v, line, key)?,
            "assim.seed" => a.seed = parse_u64(v, line, key)?,
            "assim.jitter_rel" => a.jitter_rel = parse_f64(v, line, key)?,
            "io.output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(cfg_err(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| cfg_err(0, msg);
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        let e = &self.ensemble;
        if e.p < 2 || e.p_test < 1 {
            return Err(bad(format!("need p >= 2 and p_test >= 1, got {} and {}", e.p, e.p_test)));
        }
        if e.n_pod == 0 || e.n_pod > e.base_snapshots {
            return Err(bad(format!("n_pod={} must lie in [1, base_snapshots={}]", e.n_pod, e.base_snapshots)));
        }
        if e.seed_training == e.seed_test {
            return Err(bad("training and test seeds must differ".into()));
        }
        for (name, v) in [("spin_up", e.spin_up), ("base_time", e.base_time)] {
            if !(v >= 0.0) {
                return Err(bad(format!("ensemble.{name} must be >= 0")));
            }
        }
        if !(e.amplitude >= 0.0) {
            return Err(bad("ensemble.amplitude must be >= 0".into()));
        }
        for (name, v) in [
            ("horizon", e.horizon),
            ("output_every", e.output_every),
            ("base_snapshot_every", e.base_snapshot_every),
            ("variance_factor", e.variance_factor),
        ] {
            if !(v > 0.0) {
                return Err(bad(format!("ensemble.{name} must be positive")));
            }
        }
        if self.kernel.families.is_empty() {
            return Err(bad("kernel.families is empty".into()));
        }
        self.kernel
            .spec(KernelFamily::Gaussian)
            .validate()
            .map_err(|e| bad(e.to_string()))?;
        if !(self.lyapunov.c > 1.0) || !(self.lyapunov.sigma_threshold >= 0.0) {
            return Err(bad("lyapunov.c must exceed 1 and sigma_threshold be >= 0".into()));
        }
        let a = &self.assim;
        if !(a.obs_every > 0.0) || a.obs_end < a.obs_start || a.obs_start < 0.0 || a.obs_end > e.horizon + 1e-12 {
            return Err(bad("assim observation window must lie inside [0, horizon]".into()));
        }
        if !a.obs_times().iter().any(|t| (t - a.single_time).abs() < 1e-9) {
            return Err(bad(format!("assim.single_time={} is not an observation time", a.single_time)));
        }
        let grid = self.model.grid();
        a.setup().validate(&grid).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Every setting in canonical `key=value` form, sorted by key.
    pub fn canonical(&self) -> Vec<(String, String)> {
        use crate::io::fmt_f64 as f;
        let m = &self.model;
        let e = &self.ensemble;
        let k = &self.kernel;
        let a = &self.assim;
        let (forcing, famp) = match m.forcing {
            Forcing::Sine { amplitude } => ("sine", amplitude),
            Forcing::None => ("none", 0.0),
        };
        let mut out: Vec<(String, String)> = vec![
            ("model.rossby", f(m.rossby)),
            ("model.munk_ratio", f(m.munk_ratio)),
            ("model.domain_length", f(m.domain_length)),
            ("model.nx", m.nx.to_string()),
            ("model.ny", m.ny.to_string()),
            ("model.dt", f(m.dt)),
            ("model.forcing", forcing.to_string()),
            ("model.forcing_amplitude", f(famp)),
            ("model.divergence_guard", f(m.divergence_guard)),
            ("ensemble.p", e.p.to_string()),
            ("ensemble.p_test", e.p_test.to_string()),
            ("ensemble.n_pod", e.n_pod.to_string()),
            ("ensemble.variance_factor", f(e.variance_factor)),
            ("ensemble.amplitude", f(e.amplitude)),
            ("ensemble.spin_up", f(e.spin_up)),
            ("ensemble.horizon", f(e.horizon)),
            ("ensemble.output_every", f(e.output_every)),
            ("ensemble.seed_training", e.seed_training.to_string()),
            ("ensemble.seed_test", e.seed_test.to_string()),
            ("ensemble.base_seed", e.base_seed.to_string()),
            ("ensemble.base_noise", f(e.base_noise)),
            ("ensemble.base_time", f(e.base_time)),
            ("ensemble.base_snapshots", e.base_snapshots.to_string()),
            ("ensemble.base_snapshot_every", f(e.base_snapshot_every)),
            ("kernel.families", k.families.iter().map(|x| x.name()).collect::<Vec<_>>().join(",")),
            ("kernel.ell_g", f(k.ell_g)),
            ("kernel.jitter_rel", f(k.jitter_rel)),
            ("kernel.center_anomalies", k.center_anomalies.to_string()),
            ("kernel.measure_norm", k.measure_norm.name().to_string()),
            ("koopman.average_times", fmt_list(&self.koopman.average_times)),
            ("lyapunov.c", f(self.lyapunov.c)),
            ("lyapunov.sigma_threshold", f(self.lyapunov.sigma_threshold)),
            ("forecast.filter_mode", self.forecast.filter_mode.name().to_string()),
            ("assim.columns", fmt_list(&a.columns)),
            ("assim.obs_start", f(a.obs_start)),
            ("assim.obs_end", f(a.obs_end)),
            ("assim.obs_every", f(a.obs_every)),
            ("assim.single_time", f(a.single_time)),
            ("assim.noise_frac", f(a.noise_frac)),
            ("assim.ell_loc", f(a.ell_loc)),
            ("assim.alpha", f(a.alpha)),
            ("assim.seed", a.seed.to_string()),
            ("assim.jitter_rel", f(a.jitter_rel)),
            ("io.output_dir", self.output_dir.display().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.sort();
        out
    }

    /// Render as a config file that parses back to `self`.
    pub fn render(&self) -> String {
        self.canonical().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 (first 16 hex digits) of the settings `stage` depends on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            if stage.prefixes().iter().any(|p| k.starts_with(p)) {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    /// Reduced ensemble sizes for desk-scale runs.
    pub fn apply_fast_profile(&mut self) {
        self.ensemble.p = 40;
        self.ensemble.p_test = 40;
    }
}

fn split_setting(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    let (section, name) = k.split_once('.')?;
    if section.is_empty() || name.is_empty() || k.contains(char::is_whitespace) {
        return None;
    }
    Some((k, v.trim()))
}
