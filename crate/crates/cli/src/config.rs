//! Layered settings: a `key = value` file with `[section]` headers, then
//! command-line flags on top.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Every key a config file may set, as `section.key`.
const KNOWN_KEYS: &[&str] = &[
    "protocol.n",
    "protocol.theta",
    "channel.eta",
    "channel.eta_grid",
    "channel.lambda",
    "sdp.level",
    "sdp.gap_tol",
    "gram.file",
    "gram.mode",
    "gram.samples",
    "gram.theta_min",
    "gram.theta_max",
    "gram.points",
    "scan.jobs",
    "scan.coarse",
    "scan.iterations",
    "attack.kind",
    "attack.d",
    "simulate.strategy",
    "simulate.rounds",
    "simulate.seed",
    "simulate.shards",
    "simulate.transcript",
    "output.path",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    /// Directory that relative paths in the file are resolved against.
    base: PathBuf,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let file = ini::Ini::load_from_file(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (section, props) in file.iter() {
            for (key, value) in props.iter() {
                let full = match section {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                if !KNOWN_KEYS.contains(&full.as_str()) {
                    return Err(CliError::Config(format!(
                        "unknown config key {full:?} in {}",
                        path.display()
                    )));
                }
                values.insert(full, value.trim().to_string());
            }
        }
        Ok(Self {
            values,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// The flag if given, else the config entry, parsed.
    pub fn get<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Config(format!("config {key} = {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn require<T>(&self, flag: Option<T>, key: &str, flag_name: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(flag, key)?.ok_or_else(|| {
            CliError::Config(format!("missing {flag_name} (or {key} in the config file)"))
        })
    }

    /// Paths from the file are relative to the file; flags are used as given.
    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.or_else(|| self.values.get(key).map(|v| self.base.join(v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaArg {
    Value(f64),
    Optimize,
}

impl FromStr for ThetaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("optimize") {
            return Ok(ThetaArg::Optimize);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| format!("theta must be a number or \"optimize\", got {s:?}"))?;
        if !v.is_finite() {
            return Err(format!("theta must be finite, got {s}"));
        }
        Ok(ThetaArg::Value(v))
    }
}

/// `start:stop:count` (inclusive, evenly spaced) or a comma-separated list.
/// Values must be finite and strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid(pub Vec<f64>);

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let values = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').map(str::trim).collect();
            let [a, b, k] = parts[..] else {
                return Err(format!("grid {s:?} is not start:stop:count"));
            };
            let a: f64 = a.parse().map_err(|_| format!("bad grid start {a:?}"))?;
            let b: f64 = b.parse().map_err(|_| format!("bad grid stop {b:?}"))?;
            let k: usize = k.parse().map_err(|_| format!("bad grid count {k:?}"))?;
            match k {
                0 => return Err("grid count must be at least 1".into()),
                1 => vec![a],
                _ => (0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect(),
            }
        } else {
            s.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad grid value {v:?}")))
                .collect::<Result<Vec<_>, _>>()?
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format!("grid {s:?} has non-finite values"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!("grid {s:?} must be strictly increasing"));
        }
        Ok(Grid(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn grid_forms() {
        assert_eq!("0.5:1:3".parse::<Grid>().unwrap().0, vec![0.5, 0.75, 1.0]);
        assert_eq!("0.6, 0.8,1".parse::<Grid>().unwrap().0, vec![0.6, 0.8, 1.0]);
        assert_eq!("0.7:0.7:1".parse::<Grid>().unwrap().0, vec![0.7]);
        assert!("1:0.5:3".parse::<Grid>().is_err());
        assert!("0.5:1".parse::<Grid>().is_err());
        assert!("0.5,nan".parse::<Grid>().is_err());
        assert!("0.5:1:0".parse::<Grid>().is_err());
    }

    #[test]
    fn theta_forms() {
        assert_eq!("optimize".parse::<ThetaArg>().unwrap(), ThetaArg::Optimize);
        assert_eq!("0.5".parse::<ThetaArg>().unwrap(), ThetaArg::Value(0.5));
        assert!("pi".parse::<ThetaArg>().is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "[protocol]\nn = 3\n[channel]\neta = 0.8\n[gram]\nfile = g.json").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.get::<usize>(None, "protocol.n").unwrap(), Some(3));
        assert_eq!(s.get(Some(2usize), "protocol.n").unwrap(), Some(2));
        assert_eq!(s.get::<f64>(None, "channel.lambda").unwrap(), None);
        assert_eq!(s.path(None, "gram.file").unwrap(), dir.path().join("g.json"));
        assert!(s.require::<f64>(None, "channel.lambda", "--lambda").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "[protocol]\nnn = 3\n").unwrap();
        assert!(matches!(Settings::load(Some(&path)), Err(CliError::Config(_))));
        let path = dir.path().join("typed.conf");
        std::fs::write(&path, "[protocol]\nn = three\n").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert!(s.get::<usize>(None, "protocol.n").is_err());
    }
}
