//! Line-based run configuration.
//!
//! ```text
//! # Euclidean plane
//! [manifold]
//! dimension = 2
//! sigma = "r"
//! rho = "1"
//! potential = "0"
//!
//! [numerics]
//! radii = 4, 6, 8, 10
//! dt = 1e-3
//!
//! [outputs]
//! csv_dir = "out"
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::expr::RadialExpr;
use crate::manifold::ManifoldSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Section {
    Manifold,
    Numerics,
    Outputs,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Manifold => "manifold",
            Section::Numerics => "numerics",
            Section::Outputs => "outputs",
        })
    }
}

fn section_of(key: &str) -> Option<Section> {
    Some(match key {
        "dimension" | "sigma" | "rho" | "potential" => Section::Manifold,
        "r_max" | "radii" | "nodes" | "dt" | "t_end" | "alpha" => Section::Numerics,
        "report" | "csv_dir" | "verbosity" => Section::Outputs,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Numerics {
    /// Largest radius for the boundedness test.
    pub r_max: f64,
    /// Exhaustion radii; the last one is the semigroup domain.
    pub radii: Vec<f64>,
    /// Cells of the single semigroup run.
    pub nodes: usize,
    pub dt: f64,
    /// Semigroup horizon, also the probe time of the sweep.
    pub t_end: f64,
    pub alpha: Vec<f64>,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            r_max: 2f64.powi(30),
            radii: vec![4.0, 6.0, 8.0, 10.0],
            nodes: 512,
            dt: 1e-3,
            t_end: 1.0,
            alpha: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outputs {
    pub report: Option<PathBuf>,
    pub csv_dir: Option<PathBuf>,
    pub verbosity: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifold: ManifoldSpec,
    pub numerics: Numerics,
    pub outputs: Outputs,
}

struct Entry {
    line: usize,
    value: String,
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let entries = scan(text)?;
    let mut errors = Vec::new();
    let get = |key: &str| entries.get(key);

    let dimension = match get("dimension") {
        None => {
            errors.push("missing key `dimension`".to_string());
            None
        }
        Some(e) => match e.value.parse::<u32>() {
            Ok(n) if n >= 2 => Some(n),
            _ => {
                errors.push(format!(
                    "line {}: dimension must be an integer ≥ 2, got `{}`",
                    e.line, e.value
                ));
                None
            }
        },
    };
    let mut expression = |key: &str, default: Option<&str>| -> Option<RadialExpr> {
        let (line, raw) = match (entries.get(key), default) {
            (Some(e), _) => (e.line, e.value.as_str()),
            (None, Some(d)) => return Some(RadialExpr::parse(d).expect("default expression")),
            (None, None) => {
                errors.push(format!("missing key `{key}`"));
                return None;
            }
        };
        let Some(inner) = unquote(raw) else {
            errors.push(format!("line {line}: `{key}` must be a double-quoted expression"));
            return None;
        };
        RadialExpr::parse(inner)
            .map_err(|e| errors.push(format!("line {line}: {key}: {e}")))
            .ok()
    };
    let sigma = expression("sigma", None);
    let rho = expression("rho", Some("1"));
    let potential = expression("potential", Some("0"));

    let mut numerics = Numerics::default();
    let mut positive = |key: &str, slot: &mut f64| {
        if let Some(e) = entries.get(key) {
            match e.value.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => *slot = x,
                _ => errors.push(format!(
                    "line {}: {key} must be a positive number, got `{}`",
                    e.line, e.value
                )),
            }
        }
    };
    positive("r_max", &mut numerics.r_max);
    positive("dt", &mut numerics.dt);
    positive("t_end", &mut numerics.t_end);
    let mut list = |key: &str, slot: &mut Vec<f64>| {
        if let Some(e) = entries.get(key) {
            let parsed: Result<Vec<f64>, _> = e.value.split(',').map(|s| s.trim().parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.is_empty() => errors.push(format!("line {}: {key} is empty", e.line)),
                Ok(v) if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) => {
                    errors.push(format!("line {}: {key} entries must be positive", e.line))
                }
                Ok(v) => *slot = v,
                Err(_) => errors.push(format!(
                    "line {}: {key} must be a comma-separated list of numbers",
                    e.line
                )),
            }
        }
    };
    list("radii", &mut numerics.radii);
    list("alpha", &mut numerics.alpha);
    if !numerics.radii.windows(2).all(|w| w[0] < w[1]) {
        errors.push("radii must be strictly increasing".to_string());
    }
    if let Some(e) = entries.get("nodes") {
        match e.value.parse::<usize>() {
            Ok(n) if n > 0 => numerics.nodes = n,
            _ => errors.push(format!(
                "line {}: nodes must be a positive integer, got `{}`",
                e.line, e.value
            )),
        }
    }

    let mut outputs = Outputs::default();
    let path = |key: &str| {
        entries
            .get(key)
            .map(|e| PathBuf::from(unquote(&e.value).unwrap_or(&e.value)))
    };
    outputs.report = path("report");
    outputs.csv_dir = path("csv_dir");
    if let Some(e) = entries.get("verbosity") {
        match e.value.parse::<u8>() {
            Ok(v) if v <= 2 => outputs.verbosity = v,
            _ => errors.push(format!(
                "line {}: verbosity must be 0, 1 or 2, got `{}`",
                e.line, e.value
            )),
        }
    }

    let manifold = match (dimension, sigma, rho, potential) {
        (Some(n), Some(s), Some(r), Some(v)) => match ManifoldSpec::new(n, s, r, v) {
            Ok(m) => {
                errors.extend(m.validate().into_iter().map(|v| v.message));
                Some(m)
            }
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        },
        _ => None,
    };
    match manifold {
        Some(manifold) if errors.is_empty() => Ok(RunConfig {
            manifold,
            numerics,
            outputs,
        }),
        _ => Err(ConfigError::Invalid(errors)),
    }
}

fn unquote(s: &str) -> Option<&str> {
    s.strip_prefix('"')?.strip_suffix('"')
}

/// Split into `key → (line, raw value)`, rejecting structural problems.
fn scan(text: &str) -> Result<HashMap<String, Entry>, ConfigError> {
    let mut section = None;
    let mut out: HashMap<String, Entry> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| ConfigError::Parse { line, message };
        let content = strip_comment(raw).trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = Some(match name.trim() {
                "manifold" => Section::Manifold,
                "numerics" => Section::Numerics,
                "outputs" => Section::Outputs,
                other => return Err(err(format!("unknown section `[{other}]`"))),
            });
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(format!("expected `key = value`, found `{content}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(home) = section_of(key) else {
            return Err(err(format!("unknown key `{key}`")));
        };
        match section {
            None => return Err(err(format!("key `{key}` appears before any section header"))),
            Some(s) if s != home => return Err(err(format!("key `{key}` belongs in [{home}], not [{s}]"))),
            _ => {}
        }
        if value.is_empty() {
            return Err(err(format!("key `{key}` has no value")));
        }
        if let Some(first) = out.get(key) {
            return Err(err(format!("duplicate key `{key}` (first set on line {})", first.line)));
        }
        out.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
            },
        );
    }
    Ok(out)
}

/// Drop a `#` comment that is not inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[manifold]\ndimension = 2\nsigma = \"r\"\nrho = \"1\"\npotential = \"0\"\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.manifold.n, 2);
        assert_eq!(c.numerics, Numerics::default());
        assert_eq!(c.outputs, Outputs::default());
    }

    #[test]
    fn full_config() {
        let text = format!(
            "# header\n{MINIMAL}\n[numerics]\nr_max = 1024 # inline\nradii = 4, 5, 6\nnodes = 256\ndt = 5e-4\nt_end = 2\nalpha = 0.5, 1, 2\n[outputs]\nreport = \"out/report.txt\"\ncsv_dir = \"out\"\nverbosity = 2\n"
        );
        let c = parse_config(&text).unwrap();
        assert_eq!(c.numerics.radii, vec![4.0, 5.0, 6.0]);
        assert_eq!(c.numerics.alpha, vec![0.5, 1.0, 2.0]);
        assert_eq!(c.numerics.nodes, 256);
        assert_eq!(c.numerics.r_max, 1024.0);
        assert_eq!(c.outputs.csv_dir, Some(PathBuf::from("out")));
        assert_eq!(c.outputs.verbosity, 2);
    }

    #[test]
    fn duplicate_key_names_the_line() {
        let text = format!("{MINIMAL}sigma = \"r\"\n");
        match parse_config(&text).unwrap_err() {
            ConfigError::Parse { line, message } => {
                assert_eq!(line, 6);
                assert!(message.contains("duplicate"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_and_misplaced_keys() {
        let e = parse_config("[manifold]\ncolour = 3\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }), "{e}");
        let e = parse_config("[outputs]\ndt = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }), "{e}");
        let e = parse_config("dimension = 2\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn negative_potential_fails_validation() {
        let text = MINIMAL.replace("potential = \"0\"", "potential = \"-r\"");
        match parse_config(&text).unwrap_err() {
            ConfigError::Invalid(list) => assert!(list.iter().any(|m| m.contains("nonnegative")), "{list:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn validation_errors_are_aggregated() {
        let text = format!("{MINIMAL}[numerics]\nt_end = 0\nradii = 6, 4\nalpha = x\n");
        match parse_config(&text).unwrap_err() {
            ConfigError::Invalid(list) => assert_eq!(list.len(), 3, "{list:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unquoted_expression_is_rejected() {
        let text = MINIMAL.replace("sigma = \"r\"", "sigma = r");
        assert!(matches!(parse_config(&text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_inside_quotes_is_kept() {
        assert_eq!(strip_comment("a = \"x#y\" # c"), "a = \"x#y\" ");
    }
}
