//! Sectioned run configuration: bundled profiles, INI files and
//! `section.key=value` overrides, canonicalised and hashed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ini::Ini;
use sha2::{Digest, Sha256};

use roetrace_core::heat::{geometric_grid, MomentSource};
use roetrace_core::trace::LimitProcedure;
use roetrace_core::{Exhaustion, KernelOperator, SpaceModel, SpaceSpec};

pub const PROFILES: [(&str, &str); 3] = [
    ("z1", include_str!("../profiles/z1.ini")),
    ("z2", include_str!("../profiles/z2.ini")),
    ("strip", include_str!("../profiles/strip.ini")),
];

const SECTIONS: [(&str, &[&str]); 8] = [
    ("space", &["kind", "d", "dim", "window", "fiber", "degree", "depth", "length", "mesh"]),
    ("exhaustion", &["first", "last", "stride", "probes"]),
    ("operator", &["kind", "t", "eps", "values"]),
    ("limit", &["mode", "tail", "deflate", "tolerance", "indices"]),
    ("heat", &["tmin", "tmax", "points", "eps", "source", "probes"]),
    ("spectral", &["method", "degree", "lmin", "lmax", "points", "betti_tol"]),
    ("trace", &["schedule", "n", "mesh_ratio", "measured"]),
    ("verify", &["seed", "trials"]),
];

/// Configuration problem; always reported with exit status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Command failure with its exit status: 2 for usage, configuration and
/// window problems, 1 for numerical and I/O failures.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

impl From<roetrace_core::Error> for Failure {
    fn from(e: roetrace_core::Error) -> Self {
        use roetrace_core::Error as E;
        let code = match e {
            E::Numerical { .. } | E::Precision { .. } => 1,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(format!("io: {e}"))
    }
}

/// Canonical run configuration: section -> key -> raw value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        let text = PROFILES
            .iter()
            .find(|p| p.0 == name)
            .map(|p| p.1)
            .ok_or_else(|| err(format!("unknown profile `{name}` (known: z1, z2, strip)")))?;
        Self::parse(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| err(format!("parse error: {e}")))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(err("keys outside of a section"));
                }
                continue;
            };
            for (k, v) in props.iter() {
                cfg.set(section, k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Layers `other` on top of `self`.
    pub fn merge(&mut self, other: &RunConfig) {
        for (s, props) in &other.sections {
            let dst = self.sections.entry(s.clone()).or_default();
            for (k, v) in props {
                dst.insert(k.clone(), v.clone());
            }
        }
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let allowed = SECTIONS
            .iter()
            .find(|s| s.0 == section)
            .ok_or_else(|| err(format!("unknown section [{section}]")))?
            .1;
        if !allowed.contains(&key) {
            return Err(err(format!("unknown key `{key}` in [{section}]")));
        }
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (path, value) = spec.split_once('=').ok_or_else(|| err(format!("override `{spec}` is not section.key=value")))?;
        let (section, key) =
            path.trim().split_once('.').ok_or_else(|| err(format!("override `{spec}` is not section.key=value")))?;
        self.set(section, key, value)
    }

    /// Canonical text: sorted sections and keys. Hash input and the
    /// `.config` artifact.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (s, props) in &self.sections {
            out.push_str(&format!("[{s}]\n"));
            for (k, v) in props {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|p| p.get(key)).map(|s| s.as_str())
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| err(format!("[{section}] {key} = `{v}` is not valid"))),
        }
    }

    pub fn list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.raw(section, key) else { return Ok(None) };
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().map_err(|_| err(format!("[{section}] {key}: `{s}` is not a number"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.get("verify", "seed", 0)
    }

    pub fn space(&self) -> Result<Arc<SpaceModel>, Failure> {
        let pairs: Vec<(&str, &str)> = self
            .sections
            .get("space")
            .map(|p| p.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect())
            .unwrap_or_default();
        let spec = SpaceSpec::from_pairs(pairs)?;
        Ok(Arc::new(SpaceModel::new(spec)?))
    }

    pub fn exhaustion(&self, space: &SpaceModel) -> Result<Exhaustion, Failure> {
        let w = space.window();
        let first = self.get("exhaustion", "first", (w / 4).max(1))?;
        let last = self.get("exhaustion", "last", (3 * w / 4).max(first))?;
        let stride = self.get("exhaustion", "stride", ((last - first) / 8).max(1))?;
        let probes = self.list("exhaustion", "probes")?.unwrap_or_else(|| vec![space.step()]);
        Ok(Exhaustion::centered(space, first, last, stride, &probes)?)
    }

    pub fn limit(&self) -> Result<LimitProcedure, ConfigError> {
        let mut lim = match self.raw("limit", "mode").unwrap_or("cesaro") {
            "cesaro" => LimitProcedure::cesaro(),
            "envelope" => LimitProcedure::envelope(),
            "subsequence" => {
                let idx = self
                    .list("limit", "indices")?
                    .ok_or_else(|| err("[limit] mode = subsequence needs `indices`"))?
                    .into_iter()
                    .map(|x| x as usize)
                    .collect();
                LimitProcedure::subsequence(idx)
            }
            other => return Err(err(format!("[limit] unknown mode `{other}`"))),
        };
        if let Some(tail) = self.raw("limit", "tail") {
            lim = lim.with_tail(tail.parse().map_err(|_| err("[limit] tail must be an integer"))?);
        }
        let deflate: usize = self.get("limit", "deflate", 0)?;
        if deflate > 0 {
            lim = lim.with_deflation(deflate);
        }
        if let Some(tol) = self.raw("limit", "tolerance") {
            lim = lim.with_tolerance(tol.parse().map_err(|_| err("[limit] tolerance must be numeric"))?);
        }
        Ok(lim)
    }

    /// The operator named in `[operator]`.
    pub fn operator(&self, space: &Arc<SpaceModel>) -> Result<KernelOperator, Failure> {
        let fiber = space.fiber();
        let lap = || KernelOperator::laplacian(space.clone(), fiber);
        match self.raw("operator", "kind").unwrap_or("heat") {
            "laplacian" => Ok(lap().mark_positive("graph Laplacian")),
            "identity" => Ok(KernelOperator::identity(space.clone(), fiber).mark_positive("identity")),
            "heat" => {
                let t = self.get("operator", "t", 1.0)?;
                let eps = self.get("operator", "eps", 1e-13)?;
                Ok(roetrace_core::heat::heat_operator(&lap(), t, eps)?)
            }
            "periodic-diagonal" => {
                let vals = self.list("operator", "values")?.unwrap_or_else(|| vec![1.0, 3.0]);
                if vals.is_empty() || vals.iter().any(|v| *v < 0.0) {
                    return Err(err("[operator] values must be a non-empty list of non-negative numbers").into());
                }
                let diag: Vec<f64> = (0..space.len())
                    .map(|x| {
                        let i = space.coords(x).first().copied().unwrap_or(x as i64).rem_euclid(vals.len() as i64);
                        vals[i as usize]
                    })
                    .collect();
                Ok(KernelOperator::diagonal(space.clone(), fiber, &diag)?.mark_positive("non-negative diagonal"))
            }
            other => Err(err(format!("[operator] unknown kind `{other}`")).into()),
        }
    }

    pub fn heat_times(&self) -> Result<Vec<f64>, Failure> {
        let tmin = self.get("heat", "tmin", 0.1)?;
        let tmax = self.get("heat", "tmax", 100.0)?;
        let points = self.get("heat", "points", 13)?;
        Ok(geometric_grid(tmin, tmax, points)?)
    }

    pub fn heat_eps(&self) -> Result<f64, ConfigError> {
        self.get("heat", "eps", 1e-12)
    }

    pub fn moment_source(&self) -> Result<MomentSource, ConfigError> {
        match self.raw("heat", "source").unwrap_or("site") {
            "site" => Ok(MomentSource::HomogeneousSite),
            "average" => Ok(MomentSource::SiteAverage),
            "stochastic" => Ok(MomentSource::Stochastic { probes: self.get("heat", "probes", 32)?, seed: self.seed()? }),
            other => Err(err(format!("[heat] unknown source `{other}`"))),
        }
    }

    /// Increasing λ grid of `[spectral]`.
    pub fn lambda_grid(&self) -> Result<Vec<f64>, Failure> {
        let lmin = self.get("spectral", "lmin", 1e-3)?;
        let lmax = self.get("spectral", "lmax", 1.0)?;
        let points = self.get("spectral", "points", 31)?;
        Ok(geometric_grid(lmin, lmax, points)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_file_values() {
        let mut c = RunConfig::profile("z1").unwrap();
        c.apply_override("space.window=100").unwrap();
        assert_eq!(c.raw("space", "window"), Some("100"));
        assert!(c.apply_override("space.colour=red").is_err());
        assert!(c.apply_override("nosuch.key=1").is_err());
        assert!(c.apply_override("no-equals").is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::parse("[space]\nkind = lattice\nd = 1\n").unwrap();
        let b = RunConfig::parse("[space]\nd=1\nkind=lattice\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse("[space]\nd=2\nkind=lattice\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn every_profile_builds() {
        for (name, _) in PROFILES {
            let c = RunConfig::profile(name).unwrap();
            let s = c.space().unwrap();
            c.exhaustion(&s).unwrap();
            c.limit().unwrap();
            c.heat_times().unwrap();
            c.lambda_grid().unwrap();
        }
    }
}
