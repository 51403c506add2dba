//! Run configuration: a line-oriented `key = value` format with `[section]`
//! headers. `#` starts a comment. Lists are comma- or space-separated.
//!
//! ```text
//! [model]
//! name = nonlinear-scalar
//!
//! [prior]
//! kind = uniform
//! lower = 0
//! upper = 1
//!
//! [noise]
//! variance = 1e-3
//!
//! [design]
//! xi = 1.0
//! n_e = 1
//!
//! [estimator]
//! name = dlmcis
//! tol = 1, 0.3, 0.1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use eigdesign_core::{build_model, EstimatorKind, ExperimentSpec, NoiseSpec, Prior};
use serde::Serialize;

use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorConfig {
    Normal { mean: Vec<f64>, variance: Vec<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

impl PriorConfig {
    pub fn build(&self) -> eigdesign_core::Result<Prior> {
        match self {
            PriorConfig::Normal { mean, variance } => Prior::normal_diag(mean.clone(), variance.clone()),
            PriorConfig::Uniform { lower, upper } => Prior::uniform(lower.clone(), upper.clone()),
        }
    }
}

/// Evenly spaced values of the first design component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DesignGrid {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl DesignGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lower];
        }
        let step = (self.upper - self.lower) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lower + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PilotConfig {
    pub n: usize,
    pub m: usize,
    /// Pilot mesh size; a second run at `h/2` gives the discretization constant.
    pub h: Option<f64>,
    pub reference_m: usize,
    /// Outer samples of the MCLA pilot (paired MCLA vs DLMCIS comparison).
    pub bias_n: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self { n: 100, m: 100, h: None, reference_m: 1000, bias_n: 10_000 }
    }
}

/// Sample sizes given directly, bypassing the tuner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExplicitSetting {
    pub n: usize,
    pub m: usize,
    pub h: Option<f64>,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: String,
    pub model_params: BTreeMap<String, f64>,
    pub prior: PriorConfig,
    pub noise: NoiseSpec,
    pub design: Vec<f64>,
    pub grid: Option<DesignGrid>,
    pub n_e: usize,
    pub estimator: EstimatorKind,
    pub tols: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub force_kappa1: bool,
    /// Replicates per tolerance; commands pick their own default when absent.
    pub replicates: Option<usize>,
    pub pilot: PilotConfig,
    pub explicit: Option<ExplicitSetting>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Experiment at the configured design.
    pub fn spec(&self) -> eigdesign_core::Result<ExperimentSpec> {
        self.spec_at(&self.design)
    }

    /// Experiment at design `xi`, with the noise resolved for that design.
    pub fn spec_at(&self, xi: &[f64]) -> eigdesign_core::Result<ExperimentSpec> {
        let model = build_model(&self.model, &self.model_params)?;
        let noise = self.noise.resolve(xi, model.response_dim())?;
        ExperimentSpec::new(model, self.prior.build()?, noise, xi.to_vec(), self.n_e)
    }

    /// Design points of the grid, or the single configured design.
    pub fn design_points(&self) -> Vec<Vec<f64>> {
        match self.grid {
            Some(g) => g
                .values()
                .into_iter()
                .map(|x| {
                    let mut xi = self.design.clone();
                    if xi.is_empty() {
                        xi.push(x);
                    } else {
                        xi[0] = x;
                    }
                    xi
                })
                .collect(),
            None => vec![self.design.clone()],
        }
    }
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

type Sections = BTreeMap<String, BTreeMap<String, Entry>>;

const SECTIONS: [&str; 7] = ["model", "prior", "noise", "design", "estimator", "pilot", "output"];

fn lex(text: &str) -> Result<Sections, ConfigError> {
    let mut sections: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line, "section", format!("unterminated section header '{body}'")))?
                .trim()
                .to_ascii_lowercase();
            if !SECTIONS.contains(&name.as_str()) {
                return Err(ConfigError::at(
                    line,
                    "section",
                    format!("unknown section [{name}] (expected one of {})", SECTIONS.join(", ")),
                ));
            }
            sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(ConfigError::at(line, "syntax", format!("expected 'key = value', found '{body}'")));
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        let Some(section) = &current else {
            return Err(ConfigError::at(line, &key, "key appears before any [section] header"));
        };
        if key.is_empty() {
            return Err(ConfigError::at(line, "syntax", "empty key"));
        }
        let table = sections.get_mut(section).expect("section registered");
        if let Some(prev) = table.get(&key) {
            return Err(ConfigError::at(line, &format!("{section}.{key}"), format!("duplicate key (first set on line {})", prev.line)));
        }
        table.insert(key, Entry { line, value, used: false });
    }
    Ok(sections)
}

struct Reader {
    sections: Sections,
}

impl Reader {
    fn raw(&mut self, section: &str, key: &str) -> Option<(usize, String)> {
        let e = self.sections.get_mut(section)?.get_mut(key)?;
        e.used = true;
        Some((e.line, e.value.clone()))
    }

    fn field(section: &str, key: &str) -> String {
        format!("{section}.{key}")
    }

    fn parse<T: std::str::FromStr>(&mut self, section: &str, key: &str, what: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| ConfigError::at(line, &Self::field(section, key), format!("expected {what}, found '{v}'"))),
        }
    }

    fn f64(&mut self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        self.parse(section, key, "a number")
    }

    fn usize(&mut self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        self.parse(section, key, "a non-negative integer")
    }

    fn bool(&mut self, section: &str, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, v)) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => Ok(Some(true)),
                "false" | "no" | "0" => Ok(Some(false)),
                _ => Err(ConfigError::at(line, &Self::field(section, key), format!("expected true or false, found '{v}'"))),
            },
        }
    }

    fn list(&mut self, section: &str, key: &str) -> Result<Option<(usize, Vec<f64>)>, ConfigError> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, v)) => {
                let items: Result<Vec<f64>, _> =
                    v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(str::parse).collect();
                match items {
                    Ok(xs) if !xs.is_empty() => Ok(Some((line, xs))),
                    _ => Err(ConfigError::at(line, &Self::field(section, key), format!("expected a list of numbers, found '{v}'"))),
                }
            }
        }
    }

    fn required_list(&mut self, section: &str, key: &str) -> Result<(usize, Vec<f64>), ConfigError> {
        self.list(section, key)?.ok_or_else(|| ConfigError::missing(&Self::field(section, key)))
    }

    fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        self.sections.get(section)?.get(key).map(|e| e.line)
    }

    fn leftover(&self) -> Option<(usize, String)> {
        self.sections
            .iter()
            .filter(|(s, _)| s.as_str() != "model")
            .flat_map(|(s, t)| t.iter().filter(|(_, e)| !e.used).map(move |(k, e)| (e.line, format!("{s}.{k}"))))
            .min()
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut r = Reader { sections: lex(text)? };

        let (model_line, model) = r.raw("model", "name").ok_or_else(|| ConfigError::missing("model.name"))?;
        let mut model_params = BTreeMap::new();
        let param_keys: Vec<String> = r.sections["model"].keys().filter(|k| k.as_str() != "name").cloned().collect();
        for k in param_keys {
            let v = r.f64("model", &k)?.expect("key present");
            model_params.insert(k, v);
        }
        let model_built = build_model(&model, &model_params).map_err(|e| ConfigError::at(model_line, "model.name", e.to_string()))?;

        let prior_kind = r.raw("prior", "kind").ok_or_else(|| ConfigError::missing("prior.kind"))?;
        let prior = match prior_kind.1.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => {
                let (_, mean) = r.required_list("prior", "mean")?;
                let (line, variance) = r.required_list("prior", "variance")?;
                if variance.len() != mean.len() {
                    return Err(ConfigError::at(line, "prior.variance", format!("{} variances for {} means", variance.len(), mean.len())));
                }
                PriorConfig::Normal { mean, variance }
            }
            "uniform" => {
                let (_, lower) = r.required_list("prior", "lower")?;
                let (line, upper) = r.required_list("prior", "upper")?;
                if upper.len() != lower.len() {
                    return Err(ConfigError::at(line, "prior.upper", format!("{} upper bounds for {} lower bounds", upper.len(), lower.len())));
                }
                PriorConfig::Uniform { lower, upper }
            }
            other => {
                return Err(ConfigError::at(prior_kind.0, "prior.kind", format!("unknown prior '{other}' (expected normal or uniform)")))
            }
        };
        let prior_line = prior_kind.0;
        let built_prior = prior.build().map_err(|e| ConfigError::at(prior_line, "prior", e.to_string()))?;
        if built_prior.dim() != model_built.param_dim() {
            return Err(ConfigError::at(
                prior_line,
                "prior",
                format!("model '{model}' has {} parameters but the prior has {}", model_built.param_dim(), built_prior.dim()),
            ));
        }

        let noise = match r.list("noise", "variance")? {
            Some((line, v)) => {
                if v.iter().any(|x| !(*x > 0.0)) {
                    return Err(ConfigError::at(line, "noise.variance", "variances must be positive"));
                }
                NoiseSpec::Fixed(v)
            }
            None => {
                let base = r.f64("noise", "std_base")?.ok_or_else(|| ConfigError::missing("noise.variance or noise.std_base"))?;
                let slope = r.f64("noise", "std_slope")?.unwrap_or(0.0);
                let pivot = r.f64("noise", "std_pivot")?.unwrap_or(0.0);
                NoiseSpec::DesignAffineStd { base, slope, pivot }
            }
        };

        let design = r.list("design", "xi")?.map(|(_, v)| v).unwrap_or_default();
        let grid = match (r.f64("design", "grid_lower")?, r.f64("design", "grid_upper")?, r.usize("design", "grid_points")?) {
            (None, None, None) => None,
            (Some(lower), Some(upper), points) => {
                let points = points.unwrap_or(21);
                let line = r.line_of("design", "grid_upper");
                if points == 0 {
                    return Err(ConfigError { line: r.line_of("design", "grid_points"), field: "design.grid_points".into(), message: "grid must have at least one point".into() });
                }
                if !(lower <= upper) || (points > 1 && lower == upper) {
                    return Err(ConfigError { line, field: "design.grid_upper".into(), message: format!("grid bounds must be ordered, got [{lower}, {upper}]") });
                }
                Some(DesignGrid { lower, upper, points })
            }
            _ => return Err(ConfigError::missing("design.grid_lower and design.grid_upper")),
        };
        if design.is_empty() && grid.is_none() {
            return Err(ConfigError::missing("design.xi or design.grid_lower/grid_upper"));
        }
        let design = if design.is_empty() { vec![grid.expect("grid present").lower] } else { design };
        if design.len() != model_built.design_dim() {
            return Err(ConfigError {
                line: r.line_of("design", "xi"),
                field: "design.xi".into(),
                message: format!("model '{model}' takes {} design components, got {}", model_built.design_dim(), design.len()),
            });
        }
        let n_e = r.usize("design", "n_e")?.unwrap_or(1);
        if n_e == 0 {
            return Err(ConfigError { line: r.line_of("design", "n_e"), field: "design.n_e".into(), message: "N_e must be at least 1".into() });
        }

        let estimator = match r.raw("estimator", "name") {
            Some((line, v)) => v.parse::<EstimatorKind>().map_err(|e| ConfigError::at(line, "estimator.name", e.to_string()))?,
            None => EstimatorKind::Dlmcis,
        };
        let tols = match r.list("estimator", "tol")? {
            Some((line, v)) => {
                if v.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    return Err(ConfigError::at(line, "estimator.tol", "tolerances must be positive and finite"));
                }
                v
            }
            None => vec![0.1],
        };
        let alpha = r.f64("estimator", "alpha")?.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ConfigError { line: r.line_of("estimator", "alpha"), field: "estimator.alpha".into(), message: format!("alpha must lie in (0, 1), got {alpha}") });
        }
        let seed = r.parse::<u64>("estimator", "seed", "an unsigned 64-bit integer")?.unwrap_or(0);
        let force_kappa1 = r.bool("estimator", "force_kappa1")?.unwrap_or(false);
        let replicates = r.usize("estimator", "replicates")?;

        let explicit = match r.usize("estimator", "n")? {
            Some(n) => {
                let m = r.usize("estimator", "m")?.unwrap_or(1);
                let h = r.f64("estimator", "h")?;
                let kappa = r.f64("estimator", "kappa")?;
                if n == 0 || m == 0 {
                    return Err(ConfigError { line: r.line_of("estimator", "n"), field: "estimator.n".into(), message: "sample sizes must be at least 1".into() });
                }
                Some(ExplicitSetting { n, m, h, kappa })
            }
            None => {
                if let Some(line) = ["m", "h", "kappa"].iter().find_map(|k| r.line_of("estimator", k)) {
                    return Err(ConfigError::at(line, "estimator.n", "explicit settings need estimator.n"));
                }
                None
            }
        };

        let defaults = PilotConfig::default();
        let mut pilot = PilotConfig {
            n: r.usize("pilot", "n")?.unwrap_or(defaults.n),
            m: r.usize("pilot", "m")?.unwrap_or(defaults.m),
            h: r.f64("pilot", "h")?,
            reference_m: r.usize("pilot", "reference_m")?.unwrap_or(defaults.reference_m),
            bias_n: r.usize("pilot", "bias_n")?.unwrap_or(defaults.bias_n),
        };
        if pilot.n < 2 || pilot.m < 1 {
            return Err(ConfigError { line: r.line_of("pilot", "n"), field: "pilot.n".into(), message: "pilot needs n >= 2 and m >= 1".into() });
        }
        if pilot.bias_n < 2 {
            return Err(ConfigError { line: r.line_of("pilot", "bias_n"), field: "pilot.bias_n".into(), message: "needs at least 2 outer samples".into() });
        }
        if pilot.h.is_none() && model_built.work_exponent() > 0.0 {
            pilot.h = Some(0.5);
        }

        let out_dir = r.raw("output", "dir").map(|(_, v)| PathBuf::from(v)).unwrap_or_else(|| PathBuf::from("out"));

        if let Some((line, key)) = r.leftover() {
            return Err(ConfigError::at(line, &key, "unknown key"));
        }
        Ok(Self {
            model,
            model_params,
            prior,
            noise,
            design,
            grid,
            n_e,
            estimator,
            tols,
            alpha,
            seed,
            force_kappa1,
            replicates,
            pilot,
            explicit,
            out_dir,
        })
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} on {} (N_e = {}, design {:?})", self.estimator, format_tols(&self.tols), self.model, self.n_e, self.design)
    }
}

fn format_tols(t: &[f64]) -> String {
    let parts: Vec<String> = t.iter().map(|v| format!("{v}")).collect();
    format!("TOL [{}]", parts.join(", "))
}
