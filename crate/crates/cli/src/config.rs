//! Line-oriented `key = value` run configuration.
//!
//! Keys are dotted (`train.epochs`). `#` starts a comment. Command-line
//! flags of the form `--key value` or `--key=value` override file values.
//! Keys whose default depends on the problem start as `auto` and are
//! replaced by concrete values once the problem is known, so the echo of a
//! resolved configuration reproduces the run exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nfem_core::problem::{Geometry, Problem, ProblemKind};
use nfem_core::unet::{ModelMode, UNetConfig};
use nfem_core::training::TrainConfig;
use nfem_fem::Material;

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Text,
    Uint,
    Float,
    Bool,
    Problem,
    Mode,
    UintList,
    FloatList,
}

const AUTO: &str = "auto";

/// Every accepted key with its type and default.
const SCHEMA: &[(&str, Kind, &str)] = &[
    ("problem", Kind::Problem, "beam2d"),
    ("output", Kind::Text, "out"),
    ("geometry.nodes", Kind::UintList, AUTO),
    ("geometry.lengths", Kind::FloatList, AUTO),
    ("geometry.arms", Kind::UintList, AUTO),
    ("material.e", Kind::Float, "500"),
    ("material.nu", Kind::Float, "0.4"),
    ("dataset.path", Kind::Text, ""),
    ("dataset.count", Kind::Uint, "1000"),
    ("dataset.force_min", Kind::Float, "-2.5"),
    ("dataset.force_max", Kind::Float, "2.5"),
    ("dataset.seed", Kind::Uint, "0"),
    ("dataset.noise_threshold", Kind::Float, "0"),
    ("dataset.noise_level", Kind::Float, "0"),
    ("dataset.noise_seed", Kind::Uint, "0"),
    ("dataset.test_fraction", Kind::Float, "0.05"),
    ("dataset.split_seed", Kind::Uint, "0"),
    ("model.mode", Kind::Mode, "deterministic"),
    ("model.levels", Kind::Uint, AUTO),
    ("model.channels", Kind::Uint, "32"),
    ("model.convs_per_level", Kind::Uint, "2"),
    ("model.input_pad", Kind::Uint, "2"),
    ("model.constant_channels", Kind::Bool, "false"),
    ("model.prior_sigma", Kind::Float, "0.1"),
    ("model.seed", Kind::Uint, "0"),
    ("model.checkpoint", Kind::Text, ""),
    ("train.epochs", Kind::Uint, AUTO),
    ("train.batch_size", Kind::Uint, "4"),
    ("train.lr", Kind::Float, "0.0001"),
    ("train.mc_samples", Kind::Uint, "1"),
    ("train.kl_scale", Kind::Float, AUTO),
    ("train.seed", Kind::Uint, "0"),
    ("eval.passes", Kind::Uint, "300"),
    ("eval.seed", Kind::Uint, "0"),
    ("eval.vtk_cases", Kind::Uint, "3"),
    ("sweep.node", Kind::Uint, AUTO),
    ("sweep.direction", Kind::FloatList, AUTO),
    ("sweep.min", Kind::Float, "-8"),
    ("sweep.max", Kind::Float, "8"),
    ("sweep.steps", Kind::Uint, "33"),
    ("ablate.strategies", Kind::Text, "preferred,gmsh-like,random"),
    ("ablate.random_seed", Kind::Uint, "7"),
    ("ablate.channels", Kind::UintList, "8,16,32"),
    ("bench.forces", Kind::FloatList, "0.5,1,2,4,8"),
    ("bench.repeats", Kind::Uint, "3"),
];

/// Keys that may keep the value `auto` after resolution.
const STAYS_AUTO: &[&str] = &["train.kl_scale"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Source {
    Default,
    Line(usize),
    Flag,
}

impl Source {
    fn describe(&self, key: &str) -> String {
        match self {
            Source::Default => format!("default of '{key}'"),
            Source::Line(n) => format!("line {n}"),
            Source::Flag => format!("flag --{key}"),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    source: Source,
}

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, kind, _)| *kind)
}

fn check_type(kind: Kind, value: &str) -> std::result::Result<(), String> {
    if value == AUTO {
        return Ok(());
    }
    let list = |v: &str, f: &dyn Fn(&str) -> bool| v.split(',').all(|s| f(s.trim()));
    let ok = match kind {
        Kind::Text => true,
        Kind::Uint => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Problem => value.parse::<ProblemKind>().is_ok(),
        Kind::Mode => value.parse::<ModelMode>().is_ok(),
        Kind::UintList => value == "none" || list(value, &|s| s.parse::<u64>().is_ok()),
        Kind::FloatList => list(value, &|s| s.parse::<f64>().is_ok_and(f64::is_finite)),
    };
    if ok {
        Ok(())
    } else {
        let expected = match kind {
            Kind::Text => "text",
            Kind::Uint => "a non-negative integer",
            Kind::Float => "a finite number",
            Kind::Bool => "true or false",
            Kind::Problem => "beam2d, lshape2d or beam3d",
            Kind::Mode => "deterministic, mle or vb",
            Kind::UintList => "a comma-separated list of integers",
            Kind::FloatList => "a comma-separated list of numbers",
        };
        Err(format!("expected {expected}, got '{value}'"))
    }
}

/// Resolved configuration of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    entries: BTreeMap<&'static str, Entry>,
}

impl RunConfig {
    /// All defaults, resolved.
    pub fn defaults() -> Result<Self> {
        Self::parse("", &[])
    }

    /// Reads `path` (if any) and applies `flags`.
    pub fn load(path: Option<&Path>, flags: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, flags)
    }

    pub fn parse(text: &str, flags: &[String]) -> Result<Self> {
        let mut entries: BTreeMap<&'static str, Entry> = SCHEMA
            .iter()
            .map(|(k, _, d)| {
                (
                    *k,
                    Entry {
                        value: d.to_string(),
                        source: Source::Default,
                    },
                )
            })
            .collect();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                CliError::config(Some(line), format!("expected 'key = value', got '{content}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(CliError::config(
                    Some(line),
                    format!("duplicate key '{key}' (first set on line {prev})"),
                ));
            }
            Self::set(&mut entries, key, value, Source::Line(line))?;
        }
        let mut it = flags.iter();
        while let Some(flag) = it.next() {
            let name = flag.strip_prefix("--").ok_or_else(|| {
                CliError::config(None, format!("unexpected argument '{flag}'"))
            })?;
            let (key, value) = match name.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| {
                        CliError::config(None, format!("flag --{name} needs a value"))
                    })?;
                    (name.to_string(), v.clone())
                }
            };
            Self::set(&mut entries, &key, value.trim(), Source::Flag)?;
        }
        let mut cfg = Self { entries };
        cfg.resolve_auto()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(entries: &mut BTreeMap<&'static str, Entry>, key: &str, value: &str, source: Source) -> Result<()> {
        let (&k, entry) = entries.iter_mut().find(|(k, _)| **k == key).ok_or_else(|| {
            let at = match source {
                Source::Line(n) => Some(n),
                _ => None,
            };
            CliError::config(at, format!("unknown key '{key}'"))
        })?;
        let line = match source {
            Source::Line(n) => Some(n),
            _ => None,
        };
        if value.is_empty() && kind_of(k) != Some(Kind::Text) {
            return Err(CliError::config(line, format!("missing value for '{k}'")));
        }
        check_type(kind_of(k).unwrap(), value)
            .map_err(|m| CliError::config(line, format!("'{k}': {m}")))?;
        *entry = Entry {
            value: value.to_string(),
            source,
        };
        Ok(())
    }

    fn entry(&self, key: &str) -> &Entry {
        self.entries
            .get(key)
            .unwrap_or_else(|| panic!("configuration key '{key}' is not in the schema"))
    }

    fn invalid(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        let e = self.entry(key);
        let line = match e.source {
            Source::Line(n) => Some(n),
            _ => None,
        };
        let msg = format!("'{key}' ({}): {msg}", e.source.describe(key));
        CliError::config(line, msg)
    }

    pub fn text(&self, key: &str) -> &str {
        &self.entry(key).value
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        self.text(key)
            .parse()
            .map_err(|_| self.invalid(key, format!("cannot read '{}'", self.text(key))))
    }

    pub fn uint(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        self.parsed(key)
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.text(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| self.invalid(key, format!("cannot read '{s}'")))
            })
            .collect()
    }

    pub fn problem_kind(&self) -> Result<ProblemKind> {
        self.parsed("problem")
    }

    fn set_auto(&mut self, key: &'static str, value: String) {
        let e = self.entries.get_mut(key).unwrap();
        if e.value == AUTO {
            e.value = value;
        }
    }

    fn resolve_auto(&mut self) -> Result<()> {
        let kind = self.problem_kind()?;
        let geo = Geometry::default_for(kind);
        let join = |v: &[String]| v.join(",");
        self.set_auto(
            "geometry.nodes",
            join(&geo.node_counts.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        );
        self.set_auto(
            "geometry.lengths",
            join(&geo.lengths.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        );
        self.set_auto(
            "geometry.arms",
            geo.arms
                .map(|a| format!("{},{}", a[0], a[1]))
                .unwrap_or_else(|| "none".into()),
        );
        let dim = kind.dim();
        let grid: Vec<usize> = self.list("geometry.nodes")?;
        self.set_auto("model.levels", UNetConfig::new(&grid, ModelMode::Deterministic).levels.to_string());
        self.set_auto("train.epochs", TrainConfig::for_dim(dim).epochs.to_string());
        self.set_auto("sweep.direction", if dim == 3 { "0,-1,0" } else { "0,-1" }.into());
        if self.text("sweep.node") == AUTO {
            let node = self.problem()?.monitored_node();
            self.set_auto("sweep.node", node.to_string());
        }
        for (k, _, _) in SCHEMA {
            if self.text(k) == AUTO && !STAYS_AUTO.contains(k) {
                return Err(self.invalid(k, "could not resolve 'auto'"));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.material()?;
        let kind = self.problem_kind()?;
        let dim = kind.dim();
        if self.list::<usize>("geometry.nodes")?.len() != dim {
            return Err(self.invalid("geometry.nodes", format!("{kind} needs {dim} node counts")));
        }
        self.problem()?;
        let (lo, hi) = (self.float("dataset.force_min")?, self.float("dataset.force_max")?);
        if lo > hi {
            return Err(self.invalid("dataset.force_max", format!("must not be below force_min {lo}")));
        }
        let frac = self.float("dataset.test_fraction")?;
        if !(frac > 0.0 && frac < 1.0) {
            return Err(self.invalid("dataset.test_fraction", "must lie in (0, 1)"));
        }
        let level = self.float("dataset.noise_level")?;
        if !(0.0..1.0).contains(&level) {
            return Err(self.invalid("dataset.noise_level", "must satisfy 0 <= level < 1"));
        }
        if self.uint("dataset.count")? == 0 {
            return Err(self.invalid("dataset.count", "must be at least 1"));
        }
        if let Err(e) = self.unet_config() {
            let key = ["model.input_pad", "model.levels", "geometry.nodes"]
                .into_iter()
                .find(|k| self.entry(k).source != Source::Default)
                .unwrap_or("model.levels");
            return Err(self.invalid(key, e));
        }
        self.train_config()?
            .validate()
            .map_err(|e| self.invalid("train.batch_size", e))?;
        if self.uint("eval.passes")? < 2 {
            return Err(self.invalid("eval.passes", "needs at least 2 passes"));
        }
        if self.list::<f64>("sweep.direction")?.len() != dim {
            return Err(self.invalid("sweep.direction", format!("needs {dim} components")));
        }
        if self.uint("sweep.steps")? < 2 {
            return Err(self.invalid("sweep.steps", "needs at least 2 steps"));
        }
        self.strategies()?;
        Ok(())
    }

    pub fn material(&self) -> Result<Material> {
        let e = self.float("material.e")?;
        let nu = self.float("material.nu")?;
        Material::new(e, nu).map_err(|err| {
            let key = if e > 0.0 { "material.nu" } else { "material.e" };
            self.invalid(key, err)
        })
    }

    pub fn problem(&self) -> Result<Problem> {
        let kind = self.problem_kind()?;
        let arms = match self.text("geometry.arms") {
            "none" => None,
            _ => {
                let a: Vec<usize> = self.list("geometry.arms")?;
                if a.len() != 2 {
                    return Err(self.invalid("geometry.arms", "needs 2 values"));
                }
                Some([a[0], a[1]])
            }
        };
        let geometry = Geometry {
            node_counts: self.list("geometry.nodes")?,
            lengths: self.list("geometry.lengths")?,
            arms,
        };
        Problem::new(kind, geometry, self.material()?).map_err(|e| self.invalid("geometry.nodes", e))
    }

    pub fn mode(&self) -> Result<ModelMode> {
        self.parsed("model.mode")
    }

    pub fn unet_config(&self) -> Result<UNetConfig> {
        let grid: Vec<usize> = self.list("geometry.nodes")?;
        let mut cfg = UNetConfig::new(&grid, self.mode()?);
        cfg.levels = self.uint("model.levels")?;
        cfg.base_channels = self.uint("model.channels")?;
        cfg.convs_per_level = self.uint("model.convs_per_level")?;
        cfg.input_pad = self.uint("model.input_pad")?;
        cfg.constant_channels = self.flag("model.constant_channels")?;
        cfg.prior_sigma = self.float("model.prior_sigma")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.uint("train.epochs")?,
            batch_size: self.uint("train.batch_size")?,
            lr: self.float("train.lr")?,
            mc_samples: self.uint("train.mc_samples")?,
            kl_scale: match self.text("train.kl_scale") {
                AUTO => None,
                _ => Some(self.float("train.kl_scale")?),
            },
            seed: self.u64("train.seed")?,
        })
    }

    pub fn strategies(&self) -> Result<Vec<nfem_core::dataset::OrderingStrategy>> {
        use nfem_core::dataset::OrderingStrategy;
        let seed = self.u64("ablate.random_seed")?;
        self.text("ablate.strategies")
            .split(',')
            .map(|s| match s.trim() {
                "preferred" => Ok(OrderingStrategy::Preferred),
                "gmsh-like" => Ok(OrderingStrategy::GmshLike),
                "random" => Ok(OrderingStrategy::Random(seed)),
                other => Err(self.invalid(
                    "ablate.strategies",
                    format!("unknown strategy '{other}' (expected preferred, gmsh-like or random)"),
                )),
            })
            .collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.text("output"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        match self.text("dataset.path") {
            "" => self.output_dir().join("dataset.nfds"),
            p => PathBuf::from(p),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.text("model.checkpoint") {
            "" => self.output_dir().join("model.nfw"),
            p => PathBuf::from(p),
        }
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in SCHEMA {
            let _ = writeln!(out, "{k} = {}", self.text(k));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_keys_are_unique_and_defaults_typecheck() {
        let mut keys: Vec<_> = SCHEMA.iter().map(|s| s.0).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), SCHEMA.len());
        for (k, kind, d) in SCHEMA {
            assert!(check_type(*kind, d).is_ok(), "{k}");
        }
    }

    #[test]
    fn auto_values_resolve_per_problem() {
        let c = RunConfig::parse("problem = beam3d\n", &[]).unwrap();
        assert_eq!(c.text("train.epochs"), "75");
        assert_eq!(c.text("model.levels"), "4");
        assert_eq!(c.text("geometry.nodes"), "28,12,12");
        assert_eq!(c.text("sweep.direction"), "0,-1,0");
        let c = RunConfig::defaults().unwrap();
        assert_eq!(c.text("train.epochs"), "600");
        assert_eq!(c.text("geometry.arms"), "none");
        assert_eq!(c.text("train.kl_scale"), "auto");
    }
}
