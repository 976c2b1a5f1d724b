//! Flat `key = value` run configuration.

use dgtd::dg::{HMode, Material, Profile};
use dgtd::mesh::{load_mesh, Mesh2D};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("config key `{key}`: {msg}")]
    Key { key: String, msg: String },
    #[error("cannot read config {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

fn key_err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Key { key: key.to_string(), msg: msg.into() }
}

const KNOWN_KEYS: &[&str] = &[
    "mesh", "k", "alpha", "h_mode", "epsilon", "mu", "scheme", "dt", "steps", "initial", "seed",
    "threads", "out", "power_iterations", "degrees", "modes", "spurious_alphas", "repetitions",
];

/// Raw key-value pairs; later entries override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(key_err(key, "unknown key"));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| key_err(pair, "expected key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| key_err(key, format!("cannot parse `{v}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum MeshSource {
    Structured(usize),
    File(PathBuf),
}

impl MeshSource {
    pub fn build(&self) -> Result<Mesh2D, ConfigError> {
        match self {
            MeshSource::Structured(n) => Ok(Mesh2D::structured_square(*n)),
            MeshSource::File(p) => load_mesh(p).map_err(|e| key_err("mesh", e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Value(f64),
    /// `(k+1)^2`
    DegreeSquared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep {
    Fixed(f64),
    /// Fraction of the estimated stability bound.
    Auto(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initial {
    Zero,
    Mode(usize, usize),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mesh: MeshSource,
    pub k: usize,
    pub alpha: Alpha,
    pub h_mode: HMode,
    pub epsilon: Material,
    pub mu: Material,
    pub scheme: dgtd::analysis::Scheme,
    pub dt: TimeStep,
    pub steps: usize,
    pub initial: Initial,
    pub power_iterations: usize,
}

fn material(raw: &RawConfig, key: &str) -> Result<Material, ConfigError> {
    match raw.get(key) {
        None => Ok(Material::Constant(1.0)),
        Some(v) => {
            if let Some(p) = Profile::from_name(v) {
                return Ok(Material::Profile(p));
            }
            match v.parse::<f64>() {
                Ok(c) if c > 0.0 && c.is_finite() => Ok(Material::Constant(c)),
                Ok(_) => Err(key_err(key, "must be positive")),
                Err(_) => Err(key_err(key, format!("expected a number, linear_x or linear_y, got `{v}`"))),
            }
        }
    }
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let mesh = match raw.get("mesh") {
            None => MeshSource::Structured(4),
            Some(v) => match v.strip_prefix("structured:") {
                Some(n) => {
                    let n: usize = n.trim().parse().map_err(|_| key_err("mesh", format!("bad size in `{v}`")))?;
                    if n == 0 {
                        return Err(key_err("mesh", "structured size must be positive"));
                    }
                    MeshSource::Structured(n)
                }
                None => MeshSource::File(PathBuf::from(v)),
            },
        };
        let alpha = match raw.get("alpha") {
            None | Some("p2") => Alpha::DegreeSquared,
            Some(v) => match v.parse::<f64>() {
                Ok(a) if a >= 0.0 && a.is_finite() => Alpha::Value(a),
                _ => return Err(key_err("alpha", format!("expected a nonnegative number or p2, got `{v}`"))),
            },
        };
        let h_mode = match raw.get("h_mode").unwrap_or("face") {
            "face" => HMode::Face,
            "element" => HMode::Element,
            v => return Err(key_err("h_mode", format!("expected face or element, got `{v}`"))),
        };
        let scheme = match raw.get("scheme").unwrap_or("leapfrog") {
            "leapfrog" => dgtd::analysis::Scheme::Leapfrog,
            "symplectic_euler" => dgtd::analysis::Scheme::SymplecticEuler,
            v => return Err(key_err("scheme", format!("expected leapfrog or symplectic_euler, got `{v}`"))),
        };
        let dt = match raw.get("dt").unwrap_or("auto*0.5") {
            v if v.starts_with("auto") => {
                let rest = v["auto".len()..].trim();
                let factor = if rest.is_empty() {
                    0.5
                } else {
                    let f = rest.strip_prefix('*').ok_or_else(|| key_err("dt", "expected auto or auto*<factor>"))?;
                    f.trim().parse::<f64>().map_err(|_| key_err("dt", format!("bad factor in `{v}`")))?
                };
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(key_err("dt", "safety factor must be positive"));
                }
                TimeStep::Auto(factor)
            }
            v => match v.parse::<f64>() {
                Ok(d) if d > 0.0 && d.is_finite() => TimeStep::Fixed(d),
                _ => return Err(key_err("dt", format!("expected a positive number or auto, got `{v}`"))),
            },
        };
        let initial = match raw.get("initial").unwrap_or("mode(1,1)") {
            "zero" => Initial::Zero,
            v => {
                let inner = v
                    .strip_prefix("mode(")
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| key_err("initial", format!("expected zero or mode(m,n), got `{v}`")))?;
                let mut it = inner.split(',').map(|s| s.trim().parse::<usize>());
                match (it.next(), it.next(), it.next()) {
                    (Some(Ok(m)), Some(Ok(n)), None) if m > 0 && n > 0 => Initial::Mode(m, n),
                    _ => return Err(key_err("initial", format!("bad mode `{v}`"))),
                }
            }
        };
        let power_iterations = raw.parsed("power_iterations", 500usize)?;
        if power_iterations == 0 {
            return Err(key_err("power_iterations", "must be at least 1"));
        }
        Ok(RunConfig {
            mesh,
            k: raw.parsed("k", 2usize)?,
            alpha,
            h_mode,
            epsilon: material(raw, "epsilon")?,
            mu: material(raw, "mu")?,
            scheme,
            dt,
            steps: raw.parsed("steps", 1000usize)?,
            initial,
            power_iterations,
        })
    }

    pub fn alpha_value(&self) -> f64 {
        match self.alpha {
            Alpha::Value(a) => a,
            Alpha::DegreeSquared => ((self.k + 1) * (self.k + 1)) as f64,
        }
    }
}

/// Parse `a..b`, `a..b:step` or a comma list of integers.
pub fn parse_range(raw: &RawConfig, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
    let Some(v) = raw.get(key) else {
        return Ok(default.to_vec());
    };
    let bad = || key_err(key, format!("expected a..b, a..b:step or a list, got `{v}`"));
    let out: Vec<usize> = if let Some((a, rest)) = v.split_once("..") {
        let (b, step) = rest.split_once(':').unwrap_or((rest, "1"));
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        let step: usize = step.trim().parse().map_err(|_| bad())?;
        if step == 0 || b < a {
            return Err(bad());
        }
        (a..=b).step_by(step).collect()
    } else {
        v.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_floats(raw: &RawConfig, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
    match raw.get(key) {
        None => Ok(default.to_vec()),
        Some(v) => v
            .split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<f64>().map_err(|_| key_err(key, format!("cannot parse `{s}`")))
            })
            .collect(),
    }
}

pub fn parse_usize(raw: &RawConfig, key: &str, default: usize) -> Result<usize, ConfigError> {
    raw.parsed(key, default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut raw = RawConfig::parse("# run\nk = 3 # degree\nmesh = structured:4\n\ndt = auto*0.25\n").unwrap();
        raw.set_pair("steps=7").unwrap();
        let cfg = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.dt, TimeStep::Auto(0.25));
        assert!(matches!(cfg.mesh, MeshSource::Structured(4)));
        assert_eq!(cfg.alpha_value(), 16.0);
        assert_eq!(cfg.initial, Initial::Mode(1, 1));
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("k = -1", "k"),
            ("alpha = -2", "alpha"),
            ("h_mode = cell", "h_mode"),
            ("epsilon = wavy", "epsilon"),
            ("initial = mode(0,1)", "initial"),
            ("colour = red", "colour"),
            ("dt = auto*x", "dt"),
        ] {
            let err = RawConfig::parse(text).and_then(|r| RunConfig::from_raw(&r)).unwrap_err();
            assert!(err.to_string().contains(&format!("`{key}`")), "{err}");
        }
        assert!(matches!(RawConfig::parse("nonsense"), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn ranges() {
        let raw = RawConfig::parse("degrees = 8..32:8\nmodes = 1,2,5").unwrap();
        assert_eq!(parse_range(&raw, "degrees", &[]).unwrap(), vec![8, 16, 24, 32]);
        assert_eq!(parse_range(&raw, "modes", &[]).unwrap(), vec![1, 2, 5]);
        assert_eq!(parse_range(&raw, "k", &[3]).unwrap(), vec![3]);
    }
}
