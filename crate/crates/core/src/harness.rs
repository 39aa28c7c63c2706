//! Configuration, orchestration and persistence behind the `ks-lab` CLI.
//!
//! Run configs are TOML files with the sections `[grid]`, `[model]`,
//! `[data]`, `[phi]`, `[output]`, `[run]` and `[sweep]`; see the README for
//! every key. Problems are reported with the offending `section.key`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convergence::{self, CosineBasis, SmoothingReport, SweepReport};
use crate::error::{Error, Result};
use crate::estimates::{check_bounds, BoundReport, EstimateSeries};
use crate::grid::{integrate, Field, GridSpec};
use crate::rough_data::{sample_u0, sample_v0, tail_mass, ApproxFamily, DatumKind, RoughDatumSpec, SignalKind};
use crate::solver::{run, ModelParams, RunOptions, RunOutput, SimState};
use crate::weight_phi::{build_weight, WeightPhi};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok = 0,
    ConfigError = 2,
    NumericalAbort = 3,
    BoundFailure = 4,
}

impl Outcome {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn worst(self, other: Outcome) -> Outcome {
        if other.code() > self.code() {
            other
        } else {
            self
        }
    }
}

/// Largest accepted spread `max/min` of ∫Φ(u₀ε) over the family.
pub const PHI_SPREAD_MAX: f64 = 1.5;
/// Relative tolerance of the weight invariants (discretisation of Φ).
pub const PHI_INVARIANT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub chi: f64,
    pub kappa: f64,
    pub mu: f64,
    pub eps: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt_max: f64,
    pub cfl: f64,
    pub tol: f64,
    pub saturated_source: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub spec: RoughDatumSpec,
    /// ε values whose initial data shape the weight Φ.
    pub family_eps: Vec<f64>,
    pub rescale_guard: bool,
    pub q0: f64,
    /// Start from the raw samples of u₀, v₀ instead of the ε-member.
    pub raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiConfig {
    pub enabled: bool,
    pub k_max: usize,
    pub x_max: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub snapshot_times: Vec<f64>,
    /// Adds snapshots at 2^{−j}, j = 1..=ladder_depth.
    pub ladder_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    pub nx: Vec<usize>,
    pub t_probe: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub phi: PhiConfig,
    pub output: OutputConfig,
    pub jobs: usize,
    pub sweep: SweepConfig,
}

/// Typed access to one TOML section that remembers which keys were read.
struct Section<'a> {
    name: &'static str,
    table: Option<&'a toml::Table>,
    used: BTreeSet<&'static str>,
}

impl<'a> Section<'a> {
    fn new(root: &'a toml::Table, name: &'static str) -> Result<Self> {
        let table = match root.get(name) {
            None => None,
            Some(toml::Value::Table(t)) => Some(t),
            Some(_) => return Err(Error::config(name, "must be a section")),
        };
        Ok(Self {
            name,
            table,
            used: BTreeSet::new(),
        })
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a toml::Value> {
        self.used.insert(key);
        self.table.and_then(|t| t.get(key))
    }

    fn num(&self, key: &str, v: &toml::Value) -> Result<f64> {
        match v {
            toml::Value::Float(x) => Ok(*x),
            toml::Value::Integer(i) => Ok(*i as f64),
            _ => Err(Error::config(self.key(key), "must be a number")),
        }
    }

    fn f64(&mut self, key: &'static str) -> Result<f64> {
        let v = self.raw(key).ok_or_else(|| Error::config(self.key(key), "missing required key"))?;
        let x = self.num(key, v)?;
        if !x.is_finite() {
            return Err(Error::config(self.key(key), "must be finite"));
        }
        Ok(x)
    }

    fn f64_or(&mut self, key: &'static str, default: f64) -> Result<f64> {
        match self.table.and_then(|t| t.get(key)) {
            None => {
                self.used.insert(key);
                Ok(default)
            }
            Some(_) => self.f64(key),
        }
    }

    fn usize_opt(&mut self, key: &'static str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(_) => Err(Error::config(self.key(key), "must be a nonnegative integer")),
        }
    }

    fn usize(&mut self, key: &'static str) -> Result<usize> {
        self.usize_opt(key)?
            .ok_or_else(|| Error::config(self.key(key), "missing required key"))
    }

    fn usize_or(&mut self, key: &'static str, default: usize) -> Result<usize> {
        Ok(self.usize_opt(key)?.unwrap_or(default))
    }

    fn bool_or(&mut self, key: &'static str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(Error::config(self.key(key), "must be true or false")),
        }
    }

    fn str_opt(&mut self, key: &'static str) -> Result<Option<&'a str>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(Error::config(self.key(key), "must be a string")),
        }
    }

    fn array(&mut self, key: &'static str) -> Result<Option<&'a Vec<toml::Value>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::Array(a)) => Ok(Some(a)),
            Some(_) => Err(Error::config(self.key(key), "must be an array")),
        }
    }

    fn f64_list(&mut self, key: &'static str) -> Result<Option<Vec<f64>>> {
        let Some(a) = self.array(key)? else { return Ok(None) };
        a.iter().map(|v| self.num(key, v)).collect::<Result<Vec<_>>>().map(Some)
    }

    fn usize_list(&mut self, key: &'static str) -> Result<Option<Vec<usize>>> {
        let Some(a) = self.array(key)? else { return Ok(None) };
        a.iter()
            .map(|v| match v {
                toml::Value::Integer(i) if *i > 0 => Ok(*i as usize),
                _ => Err(Error::config(self.key(key), "must hold positive integers")),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn points(&mut self, key: &'static str) -> Result<Option<Vec<(f64, f64)>>> {
        let Some(a) = self.array(key)? else { return Ok(None) };
        a.iter()
            .map(|p| match p {
                toml::Value::Array(xy) if xy.len() == 2 => Ok((self.num(key, &xy[0])?, self.num(key, &xy[1])?)),
                _ => Err(Error::config(self.key(key), "must be a list of [x, y] pairs")),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Rejects keys that were never read (typos).
    fn finish(self) -> Result<()> {
        if let Some(t) = self.table {
            if let Some(k) = t.keys().find(|k| !self.used.contains(k.as_str())) {
                return Err(Error::config(format!("{}.{k}", self.name), "unknown key"));
            }
        }
        Ok(())
    }
}

fn default_family_eps() -> Vec<f64> {
    (2..=8).map(|k| 0.5f64.powi(k)).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses and validates; relative output directories are resolved
    /// against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        const SECTIONS: [&str; 7] = ["grid", "model", "data", "phi", "output", "run", "sweep"];
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::config(k.as_str(), "unknown section"));
        }

        let mut s = Section::new(&root, "grid")?;
        let nx = s.usize("nx")?;
        let grid = GridConfig {
            nx,
            ny: s.usize_or("ny", nx)?,
            lx: s.f64_or("lx", 1.0)?,
            ly: s.f64_or("ly", 1.0)?,
        };
        s.finish()?;
        let spec_grid = GridSpec::new(grid.nx, grid.ny, grid.lx, grid.ly).map_err(|e| Error::config("grid", e.to_string()))?;

        let mut s = Section::new(&root, "model")?;
        let model = ModelConfig {
            chi: s.f64("chi")?,
            kappa: s.f64("kappa")?,
            mu: s.f64("mu")?,
            eps: s.f64("eps")?,
            t_end: s.f64("T")?,
            dt_max: s.f64_or("dt_max", 1e-3)?,
            cfl: s.f64_or("cfl", 0.2)?,
            tol: s.f64_or("tol", 0.05)?,
            saturated_source: s.bool_or("saturated_source", true)?,
        };
        s.finish()?;
        if !(model.tol >= 0.0) {
            return Err(Error::config("model.tol", "must be >= 0"));
        }

        let mut s = Section::new(&root, "data")?;
        let kind: DatumKind = s
            .str_opt("kind")?
            .ok_or_else(|| Error::config("data.kind", "missing required key"))?
            .parse()
            .map_err(|e: String| Error::config("data.kind", e.to_string()))?;
        let centers = s.points("centers")?.unwrap_or_else(|| match kind {
            DatumKind::Smooth => Vec::new(),
            _ => vec![(grid.lx / 2.0, grid.ly / 2.0)],
        });
        let v_kind: SignalKind = match s.str_opt("v_kind")? {
            Some(v) => v.parse().map_err(|e: String| Error::config("data.v_kind", e.to_string()))?,
            None => SignalKind::CosineMix,
        };
        let spec = RoughDatumSpec {
            kind,
            centers,
            alpha: s.f64_or("alpha", if kind == DatumKind::Smooth { 0.0 } else { 1.0 })?,
            amplitude: s.f64("amplitude")?,
            v_kind,
            v_amplitude: s.f64_or("v_amplitude", 1.0)?,
        };
        let data = DataConfig {
            spec,
            family_eps: s.f64_list("family_eps")?.unwrap_or_else(default_family_eps),
            rescale_guard: s.bool_or("rescale_guard", true)?,
            q0: s.f64_or("q0", 4.0)?,
            raw: s.bool_or("raw", false)?,
        };
        s.finish()?;
        data.spec
            .validate(&spec_grid)
            .map_err(|e| Error::config("data", e.to_string()))?;
        if data.family_eps.is_empty() || data.family_eps.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::config("data.family_eps", "must be a nonempty list of positive values"));
        }
        if !(data.q0 > 2.0) {
            return Err(Error::config("data.q0", "must exceed 2"));
        }

        let mut s = Section::new(&root, "phi")?;
        let phi = PhiConfig {
            enabled: s.bool_or("enabled", true)?,
            k_max: s.usize_or("k_max", 10)?,
            x_max: s.f64_or("x_max", 2f64.powi(20))?,
            step: s.f64_or("step", 1e-3)?,
        };
        s.finish()?;
        if phi.k_max == 0 {
            return Err(Error::config("phi.k_max", "must be at least 1"));
        }
        if !(phi.x_max > 1.0) {
            return Err(Error::config("phi.x_max", "must exceed 1"));
        }
        if !(phi.step > 0.0 && phi.step < 1.0) {
            return Err(Error::config("phi.step", "must lie in (0, 1)"));
        }

        let mut s = Section::new(&root, "output")?;
        let dir = s.str_opt("directory")?.unwrap_or("ks-lab-out");
        let output = OutputConfig {
            directory: base.join(dir),
            snapshot_times: s.f64_list("snapshot_times")?.unwrap_or_default(),
            ladder_depth: s.usize_or("ladder_depth", 0)?,
        };
        s.finish()?;
        if output.snapshot_times.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::config("output.snapshot_times", "times must be >= 0"));
        }
        if output.ladder_depth > 40 {
            return Err(Error::config("output.ladder_depth", "must be at most 40"));
        }

        let mut s = Section::new(&root, "run")?;
        let jobs = s.usize_or("jobs", 1)?;
        s.finish()?;
        if jobs == 0 {
            return Err(Error::config("run.jobs", "must be at least 1"));
        }

        let mut s = Section::new(&root, "sweep")?;
        let sweep = SweepConfig {
            eps: s.f64_list("eps")?.unwrap_or_default(),
            nx: s.usize_list("nx")?.unwrap_or_default(),
            t_probe: s.f64_or("t_probe", 0.5)?,
            tau: s.f64_or("tau", 0.1)?,
        };
        s.finish()?;

        let cfg = RunConfig {
            grid,
            model,
            data,
            phi,
            output,
            jobs,
            sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that hold for configs however they were built (also after
    /// command-line overrides).
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid_spec()?;
        self.params().validate()?;
        self.data
            .spec
            .validate(&grid)
            .map_err(|e| Error::config("data", e.to_string()))?;
        if self.sweep.eps.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::config("sweep.eps", "values must be positive"));
        }
        if self.sweep.nx.iter().any(|&n| n < 8) {
            return Err(Error::config("sweep.nx", "resolutions must be at least 8"));
        }
        if !(self.sweep.t_probe > 0.0) {
            return Err(Error::config("sweep.t_probe", "must be positive"));
        }
        if !(self.sweep.tau > 0.0) {
            return Err(Error::config("sweep.tau", "must be positive"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.nx, self.grid.ny, self.grid.lx, self.grid.ly)
            .map_err(|e| Error::config("grid", e.to_string()))
    }

    pub fn params(&self) -> ModelParams {
        let m = &self.model;
        ModelParams {
            chi: m.chi,
            kappa: m.kappa,
            mu: m.mu,
            eps: m.eps,
            t_end: m.t_end,
            dt_max: m.dt_max,
            cfl: m.cfl,
            saturated_source: m.saturated_source,
        }
    }

    pub fn family(&self) -> ApproxFamily {
        let mut f = ApproxFamily::new(self.data.spec.clone());
        f.rescale_guard = self.data.rescale_guard;
        f.q0 = self.data.q0;
        f
    }

    /// Whether the run starts from raw samples rather than a family member.
    pub fn uses_raw_data(&self) -> bool {
        self.data.raw || self.model.eps == 0.0
    }

    /// Same config at another resolution, keeping the aspect ratio of cells.
    pub fn with_resolution(&self, nx: usize) -> Self {
        let mut c = self.clone();
        c.grid.ny = (self.grid.ny * nx).div_ceil(self.grid.nx);
        c.grid.nx = nx;
        c
    }
}

/// `(u₀, v₀)` of a config: the ε-member, or the raw samples.
pub fn initial_fields(cfg: &RunConfig) -> Result<(Field, Field)> {
    let grid = cfg.grid_spec()?;
    if cfg.uses_raw_data() {
        Ok((sample_u0(&cfg.data.spec, &grid)?, sample_v0(&cfg.data.spec, &grid)))
    } else {
        let m = cfg.family().member(&grid, cfg.model.eps)?;
        Ok((m.u, m.v))
    }
}

/// The ε values whose initial data define Φ: the configured family plus the
/// run's own ε.
pub fn weight_family_eps(cfg: &RunConfig) -> Vec<f64> {
    let mut eps = cfg.data.family_eps.clone();
    if cfg.model.eps > 0.0 && !eps.contains(&cfg.model.eps) {
        eps.push(cfg.model.eps);
    }
    eps
}

/// Φ adapted to the family `{u₀ε}` on the run grid, with ∫Φ(u₀ε) per member.
pub fn build_family_weight(cfg: &RunConfig) -> Result<(WeightPhi, Vec<(f64, f64)>)> {
    let grid = cfg.grid_spec()?;
    let family = cfg.family();
    let members: Vec<(f64, Field)> = weight_family_eps(cfg)
        .into_iter()
        .map(|e| family.member(&grid, e).map(|m| (e, m.u)))
        .collect::<Result<_>>()?;
    let phi = build_weight(
        |m| members.iter().map(|(_, u)| tail_mass(u, m)).fold(0.0, f64::max),
        cfg.phi.k_max,
        cfg.phi.x_max,
        cfg.phi.step,
    )?;
    let integrals = members
        .iter()
        .map(|(e, u)| (*e, integrate(&u.map(|x| phi.value(x)))))
        .collect();
    Ok((phi, integrals))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub t: f64,
    pub u: String,
    pub v: String,
}

/// Written last into every output directory. `files` maps each artifact's
/// relative path to its SHA-256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_format: u32,
    pub command: String,
    pub status: String,
    pub abort: Option<String>,
    pub config: RunConfig,
    pub versions: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
    pub snapshots: Vec<SnapshotEntry>,
    /// Member run directories of a sweep, relative to this directory.
    pub members: Vec<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("ks-lab".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("phi_format".into(), "1".into());
        versions.insert("series_columns".into(), crate::estimates::COLUMNS.len().to_string());
        Self {
            manifest_format: 1,
            command: command.into(),
            status: "ok".into(),
            abort: None,
            config: cfg.clone(),
            versions,
            files: BTreeMap::new(),
            snapshots: Vec::new(),
            members: Vec::new(),
        }
    }

    fn record(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let hash = sha256_file(&dir.join(rel))?;
        self.files.insert(rel.into(), hash);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_field(path: &Path, f: &Field, t: f64) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_csv(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// A finished run and where it was written.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub output: RunOutput,
    pub report: BoundReport,
    pub phi: Option<WeightPhi>,
}

impl RunArtifacts {
    pub fn outcome(&self) -> Outcome {
        if self.output.abort.is_some() {
            Outcome::NumericalAbort
        } else if !self.report.all_pass() {
            Outcome::BoundFailure
        } else {
            Outcome::Ok
        }
    }
}

/// Snapshot times requested by a config.
pub fn snapshot_times(cfg: &RunConfig) -> Vec<f64> {
    let mut times = cfg.output.snapshot_times.clone();
    times.extend(convergence::ladder(cfg.output.ladder_depth));
    times
}

/// Integrates a config in memory (no files).
pub fn simulate(cfg: &RunConfig, extra_snapshots: &[f64]) -> Result<(RunOutput, Option<WeightPhi>)> {
    cfg.validate()?;
    let (u0, v0) = initial_fields(cfg)?;
    let phi = if cfg.phi.enabled {
        Some(build_family_weight(cfg)?.0)
    } else {
        None
    };
    let mut times = snapshot_times(cfg);
    times.extend_from_slice(extra_snapshots);
    let options = RunOptions {
        snapshot_times: times,
        phi: phi.as_ref(),
    };
    let output = run(SimState::new(u0, v0)?, &cfg.params(), &options)?;
    Ok((output, phi))
}

/// Runs a config and writes series, snapshots, bound report, weight and
/// manifest into `dir`.
pub fn execute_run(cfg: &RunConfig, dir: &Path, extra_snapshots: &[f64]) -> Result<RunArtifacts> {
    let (output, phi) = simulate(cfg, extra_snapshots)?;
    let report = check_bounds(&output.series, &cfg.params(), cfg.grid_spec()?.area(), cfg.model.tol);
    fs::create_dir_all(dir.join("snapshots"))?;
    let mut manifest = Manifest::new("run", cfg);

    let mut w = std::io::BufWriter::new(fs::File::create(dir.join("series.csv"))?);
    output.series.write_csv(&mut w)?;
    w.flush()?;
    drop(w);
    manifest.record(dir, "series.csv")?;

    for (k, s) in output.snapshots.iter().enumerate() {
        let (u, v) = (format!("snapshots/u_{k:04}.csv"), format!("snapshots/v_{k:04}.csv"));
        write_field(&dir.join(&u), &s.u, s.t)?;
        write_field(&dir.join(&v), &s.v, s.t)?;
        manifest.record(dir, &u)?;
        manifest.record(dir, &v)?;
        manifest.snapshots.push(SnapshotEntry { t: s.t, u, v });
    }

    write_json(&dir.join("bound_report.json"), &report)?;
    fs::write(dir.join("bound_report.txt"), report.to_string())?;
    manifest.record(dir, "bound_report.json")?;
    manifest.record(dir, "bound_report.txt")?;

    if let Some(phi) = &phi {
        write_json(&dir.join("phi.json"), &phi.to_file())?;
        manifest.record(dir, "phi.json")?;
    }

    let artifacts = RunArtifacts {
        dir: dir.to_path_buf(),
        output,
        report,
        phi,
    };
    manifest.status = match artifacts.outcome() {
        Outcome::Ok => "ok",
        Outcome::NumericalAbort => "aborted",
        _ => "bounds_failed",
    }
    .into();
    manifest.abort = artifacts.output.abort.clone();
    manifest.write(dir)?;
    Ok(artifacts)
}

/// Resolves the worker count: explicit flag, then `KS_LAB_JOBS`, then the
/// config.
pub fn resolve_jobs(flag: Option<usize>, cfg: &RunConfig) -> Result<usize> {
    if let Some(j) = flag {
        return if j == 0 {
            Err(Error::config("--jobs", "must be at least 1"))
        } else {
            Ok(j)
        };
    }
    if let Ok(v) = std::env::var("KS_LAB_JOBS") {
        return match v.trim().parse::<usize>() {
            Ok(j) if j > 0 => Ok(j),
            _ => Err(Error::config("KS_LAB_JOBS", format!("must be a positive integer, got `{v}`"))),
        };
    }
    Ok(cfg.jobs)
}

fn error_outcome(e: &Error) -> Outcome {
    match e {
        Error::NonFinite { .. } => Outcome::NumericalAbort,
        Error::Integrity(_) => Outcome::BoundFailure,
        Error::Weight(_) => Outcome::BoundFailure,
        _ => Outcome::ConfigError,
    }
}

fn fail(e: Error) -> Outcome {
    eprintln!("error: {e}");
    error_outcome(&e)
}

/// Command-line overrides shared by `run` and `sweep`.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub eps: Vec<f64>,
    pub nx: Vec<usize>,
    pub jobs: Option<usize>,
}

/// `ks-lab run`.
pub fn cmd_run(config: &Path, overrides: &Overrides) -> Outcome {
    let result = (|| -> Result<RunArtifacts> {
        let mut cfg = RunConfig::load(config)?;
        match overrides.eps.as_slice() {
            [] => {}
            [e] => cfg.model.eps = *e,
            _ => return Err(Error::config("--eps", "run takes a single value; use sweep for lists")),
        }
        match overrides.nx.as_slice() {
            [] => {}
            [n] => cfg = cfg.with_resolution(*n),
            _ => return Err(Error::config("--nx", "run takes a single value; use sweep for lists")),
        }
        cfg.validate()?;
        let dir = cfg.output.directory.clone();
        execute_run(&cfg, &dir, &[])
    })();
    match result {
        Ok(a) => {
            print!("{}", a.report);
            if let Some(msg) = &a.output.abort {
                eprintln!("run aborted: {msg}");
            }
            println!("wrote {}", a.dir.display());
            a.outcome()
        }
        Err(e) => fail(e),
    }
}

/// Member name of a sweep run directory.
fn member_dir(prefix: &str, value: impl std::fmt::Display) -> String {
    format!("{prefix}_{value}")
}

/// Contents of `sweep_report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "sweep", rename_all = "snake_case")]
pub enum SweepFile {
    Eps {
        report: SweepReport,
        members: Vec<String>,
    },
    Resolution {
        report: SmoothingReport,
        members: Vec<String>,
    },
}

/// `ks-lab sweep`: an ε-sweep into `<output.directory>/sweep_eps` if ε values
/// are given (flag or config), otherwise a resolution sweep (smoothing probe)
/// into `<output.directory>/sweep_nx`.
pub fn cmd_sweep(config: &Path, overrides: &Overrides) -> Outcome {
    let result = (|| -> Result<Outcome> {
        let cfg = RunConfig::load(config)?;
        let jobs = resolve_jobs(overrides.jobs, &cfg)?;
        // a list on the command line selects the sweep kind
        let (eps, nx) = match (overrides.eps.is_empty(), overrides.nx.is_empty()) {
            (true, true) => (cfg.sweep.eps.clone(), cfg.sweep.nx.clone()),
            (false, true) => (overrides.eps.clone(), Vec::new()),
            (true, false) => (Vec::new(), overrides.nx.clone()),
            (false, false) => return Err(Error::config("--eps", "give either --eps or --nx, not both")),
        };
        if !eps.is_empty() {
            if eps.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::config("sweep.eps", "values must be positive"));
            }
            run_eps_sweep(&cfg, eps, jobs)
        } else if !nx.is_empty() {
            if nx.iter().any(|&n| n < 8) {
                return Err(Error::config("sweep.nx", "resolutions must be at least 8"));
            }
            run_resolution_sweep(&cfg, nx, jobs)
        } else {
            Err(Error::config("sweep.eps", "no eps or nx list given"))
        }
    })();
    result.unwrap_or_else(fail)
}

fn run_members(jobs: usize, members: Vec<(RunConfig, PathBuf, Vec<f64>)>) -> Vec<Result<RunArtifacts>> {
    let tasks: Vec<Box<dyn FnOnce() -> Result<RunArtifacts> + Send>> = members
        .into_iter()
        .map(|(c, d, extra)| Box::new(move || execute_run(&c, &d, &extra)) as Box<dyn FnOnce() -> _ + Send>)
        .collect();
    convergence::run_parallel(tasks, jobs)
}

fn finish_sweep(cfg: &RunConfig, dir: &Path, file: &SweepFile, names: &[String]) -> Result<()> {
    write_json(&dir.join("sweep_report.json"), file)?;
    let mut manifest = Manifest::new("sweep", cfg);
    manifest.record(dir, "sweep_report.json")?;
    for n in names {
        manifest.record(dir, &format!("{n}/manifest.json"))?;
    }
    manifest.members = names.to_vec();
    manifest.write(dir)
}

fn run_eps_sweep(cfg: &RunConfig, mut eps: Vec<f64>, jobs: usize) -> Result<Outcome> {
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.dedup();
    let dir = cfg.output.directory.join("sweep_eps");
    fs::create_dir_all(&dir)?;
    let t_probe = cfg.sweep.t_probe;
    let mut members = Vec::new();
    let mut names = Vec::new();
    for &e in &eps {
        let mut c = cfg.clone();
        c.model.eps = e;
        c.data.raw = false;
        let name = member_dir("eps", e);
        members.push((c, dir.join(&name), vec![t_probe]));
        names.push(name);
    }
    let mut limit = cfg.clone();
    limit.model.eps = 0.0;
    limit.data.raw = true;
    let limit_name = member_dir("eps", 0);
    members.push((limit, dir.join(&limit_name), vec![t_probe]));
    names.push(limit_name);

    let results: Vec<RunArtifacts> = run_members(jobs, members).into_iter().collect::<Result<_>>()?;
    let mut outcome = Outcome::Ok;
    for a in &results {
        outcome = outcome.worst(a.outcome());
    }
    if outcome == Outcome::NumericalAbort {
        finish_sweep(cfg, &dir, &SweepFile::Eps { report: empty_sweep(&eps, t_probe), members: names.clone() }, &names)?;
        return Ok(outcome);
    }
    let (limit_run, member_runs) = results.split_last().unwrap();
    let pairs: Vec<(f64, &RunOutput)> = eps.iter().copied().zip(member_runs.iter().map(|a| &a.output)).collect();
    let report = convergence::eps_sweep(&pairs, Some(&limit_run.output), t_probe)?;
    println!("eps sweep at t = {t_probe}");
    println!("{:>10} {:>14} {:>14}", "eps", "d_k (L2)", "dist to eps=0");
    for (k, e) in report.eps.iter().enumerate() {
        let d = report.du_l2.get(k).map_or("-".to_string(), |d| format!("{d:.6e}"));
        println!("{e:>10} {d:>14} {:>14.6e}", report.limit_distance[k]);
    }
    if !report.passes() {
        outcome = outcome.worst(Outcome::BoundFailure);
    }
    finish_sweep(cfg, &dir, &SweepFile::Eps { report, members: names.clone() }, &names)?;
    Ok(outcome)
}

fn empty_sweep(eps: &[f64], t_probe: f64) -> SweepReport {
    SweepReport {
        t_probe,
        eps: eps.to_vec(),
        du_l2: Vec::new(),
        du_sup: Vec::new(),
        dv_l2: Vec::new(),
        limit_distance: Vec::new(),
        differences_decreasing: false,
        limit_distance_decreasing: false,
    }
}

fn run_resolution_sweep(cfg: &RunConfig, mut nx: Vec<usize>, jobs: usize) -> Result<Outcome> {
    nx.sort_unstable();
    nx.dedup();
    let dir = cfg.output.directory.join("sweep_nx");
    fs::create_dir_all(&dir)?;
    let tau = cfg.sweep.tau;
    let mut members = Vec::new();
    let mut names = Vec::new();
    for &n in &nx {
        let mut c = cfg.with_resolution(n);
        c.data.raw = true;
        c.model.t_end = tau;
        c.output.ladder_depth = 0;
        c.output.snapshot_times.clear();
        let name = member_dir("nx", n);
        members.push((c, dir.join(&name), Vec::new()));
        names.push(name);
    }
    let results: Vec<RunArtifacts> = run_members(jobs, members).into_iter().collect::<Result<_>>()?;
    let mut outcome = Outcome::Ok;
    for a in &results {
        outcome = outcome.worst(a.outcome());
    }
    if outcome == Outcome::NumericalAbort || results.len() < 2 {
        return Err(Error::config("sweep.nx", "resolution sweep needs at least two completed resolutions"));
    }
    let runs: Vec<&RunOutput> = results.iter().map(|a| &a.output).collect();
    let report = convergence::smoothing_probe(&runs, tau, cfg.data.spec.is_rougher_than_l2())?;
    println!("smoothing probe, tau = {tau}");
    println!("{:>6} {:>14} {:>14} {:>14}", "nx", "sup u(0)", "sup u(tau)", "|grad u(tau)|");
    for r in &report.rows {
        println!("{:>6} {:>14.6e} {:>14.6e} {:>14.6e}", r.nx, r.sup_initial, r.sup_tau, r.gradu_l2_tau);
    }
    println!("verdict: {}", if report.verdict { "smoothing observed" } else { "not established" });
    if !report.verdict {
        outcome = outcome.worst(Outcome::BoundFailure);
    }
    finish_sweep(cfg, &dir, &SweepFile::Resolution { report, members: names.clone() }, &names)?;
    Ok(outcome)
}

/// Contents of `phi_report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiReport {
    pub invariants: crate::weight_phi::PhiInvariants,
    /// `(ε, ∫Φ(u₀ε))`.
    pub family_integrals: Vec<(f64, f64)>,
    pub spread: f64,
    pub pass: bool,
}

/// Builds Φ for a config and checks it.
pub fn phi_report(cfg: &RunConfig) -> Result<(WeightPhi, PhiReport)> {
    let (phi, family_integrals) = build_family_weight(cfg)?;
    let invariants = phi.invariants();
    let values: Vec<f64> = family_integrals.iter().map(|p| p.1).collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = if lo > 0.0 { hi / lo } else if hi == 0.0 { 1.0 } else { f64::INFINITY };
    let pass = invariants.passes(PHI_INVARIANT_TOL) && spread <= PHI_SPREAD_MAX;
    Ok((
        phi,
        PhiReport {
            invariants,
            family_integrals,
            spread,
            pass,
        },
    ))
}

/// `ks-lab phi`: writes into `<output.directory>/phi`.
pub fn cmd_phi(config: &Path) -> Outcome {
    let result = (|| -> Result<Outcome> {
        let cfg = RunConfig::load(config)?;
        let (phi, report) = phi_report(&cfg)?;
        let dir = cfg.output.directory.join("phi");
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("phi.json"), &phi.to_file())?;
        write_json(&dir.join("phi_report.json"), &report)?;
        let mut manifest = Manifest::new("phi", &cfg);
        manifest.record(&dir, "phi.json")?;
        manifest.record(&dir, "phi_report.json")?;
        manifest.status = if report.pass { "ok" } else { "bounds_failed" }.into();
        manifest.write(&dir)?;
        let inv = &report.invariants;
        println!("knots            {:?}", phi.psi_spec().knots());
        println!("max x Phi''(x)   {:.6}", inv.max_x_second);
        println!("max psi          {:.3e}", inv.max_psi);
        println!("knot ratios      {:?}", inv.knot_ratios);
        for (e, v) in &report.family_integrals {
            println!("int Phi(u0e)     eps = {e:<12} {v:.6}");
        }
        println!("spread           {:.4} (limit {PHI_SPREAD_MAX})", report.spread);
        println!("{}", if report.pass { "PASS" } else { "FAIL" });
        Ok(if report.pass { Outcome::Ok } else { Outcome::BoundFailure })
    })();
    result.unwrap_or_else(fail)
}

/// Re-checks a run directory: every listed hash, then the bound report
/// recomputed from the stored series.
pub fn verify_dir(dir: &Path) -> Result<BoundReport> {
    let manifest = Manifest::load(dir)?;
    for (rel, hash) in &manifest.files {
        let path = dir.join(rel);
        let actual = sha256_file(&path).map_err(|e| Error::Integrity(format!("{rel}: {e}")))?;
        if &actual != hash {
            return Err(Error::Integrity(format!("{rel}: content hash mismatch")));
        }
    }
    if manifest.command != "run" {
        return Err(Error::Integrity(format!("{} holds a `{}` result, not a run", dir.display(), manifest.command)));
    }
    let series = EstimateSeries::read_csv(BufReader::new(fs::File::open(dir.join("series.csv"))?))?;
    let cfg = &manifest.config;
    let report = check_bounds(&series, &cfg.params(), cfg.grid_spec()?.area(), cfg.model.tol);
    let stored: BoundReport = serde_json::from_str(&fs::read_to_string(dir.join("bound_report.json"))?)?;
    if stored.checks.len() != report.checks.len() {
        return Err(Error::Integrity("recomputed bound report has a different set of checks".into()));
    }
    if let Some((s, r)) = stored.checks.iter().zip(&report.checks).find(|(s, r)| s != r) {
        return Err(Error::Integrity(format!(
            "check `{}`: stored margin {:e} ({}), recomputed {:e} ({})",
            s.id,
            s.margin,
            if s.pass { "pass" } else { "fail" },
            r.margin,
            if r.pass { "pass" } else { "fail" }
        )));
    }
    Ok(report)
}

/// `ks-lab verify`.
pub fn cmd_verify(dir: &Path) -> Outcome {
    match verify_dir(dir) {
        Ok(report) => {
            print!("{report}");
            if report.all_pass() {
                println!("verified {}", dir.display());
                Outcome::Ok
            } else {
                Outcome::BoundFailure
            }
        }
        Err(e) => fail(e),
    }
}

/// One line of `ks-lab report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub id: String,
    pub margin: f64,
    pub pass: bool,
}

/// Collects the bound checks of a run directory, or of every member of a
/// sweep directory.
pub fn collect_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let manifest = Manifest::load(dir)?;
    let mut rows = Vec::new();
    match manifest.command.as_str() {
        "run" => {
            let report: BoundReport = serde_json::from_str(&fs::read_to_string(dir.join("bound_report.json"))?)?;
            for c in report.checks {
                rows.push(ReportRow {
                    run: dir.display().to_string(),
                    id: c.id,
                    margin: c.margin,
                    pass: c.pass,
                });
            }
        }
        "sweep" => {
            for m in &manifest.members {
                rows.extend(collect_report(&dir.join(m))?);
            }
        }
        other => {
            return Err(Error::Integrity(format!("{}: nothing to report for `{other}`", dir.display())));
        }
    }
    Ok(rows)
}

/// `ks-lab report`.
pub fn cmd_report(dirs: &[PathBuf]) -> Outcome {
    let mut rows = Vec::new();
    for d in dirs {
        match collect_report(d) {
            Ok(r) => rows.extend(r),
            Err(e) => return fail(e),
        }
    }
    println!("{:<40} {:<15} {:>12}  ok", "run", "check", "margin");
    for r in &rows {
        println!(
            "{:<40} {:<15} {:>12.4e}  {}",
            r.run,
            r.id,
            r.margin,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if rows.iter().all(|r| r.pass) {
        Outcome::Ok
    } else {
        Outcome::BoundFailure
    }
}

/// Weak-trace and v-trace tables of a run with ladder snapshots.
pub fn trace_tables(
    output: &RunOutput,
    depth: usize,
) -> Result<(convergence::TraceTable, Vec<convergence::VTraceRow>)> {
    let grid = *output.final_state.u.grid();
    let basis = CosineBasis::new(&grid);
    Ok((
        convergence::weak_initial_trace(output, &basis, depth)?,
        convergence::v_initial_trace(output, depth)?,
    ))
}
