//! Timeseries ingestion, run configuration and output manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::SweepEngine;
use crate::conic::SolverSettings;
use crate::der::ObjectiveWeights;
use crate::error::{Error, Result};
use crate::hca::{DeviceTemplates, HcaConfig, HcaMode};
use crate::network::Network;
use crate::opf::ScenarioData;
use crate::scenarios::NoiseLevels;
use crate::ssp::SspConfig;

// ---------------------------------------------------------------------------
// Timeseries

/// Uniformly spaced channels read from one CSV file. `values[c][t]` is
/// column `c` at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeseries {
    pub timestamps: Vec<NaiveDateTime>,
    pub dt_hours: f64,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

const TIME_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.naive_utc());
    }
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| Error::Timeseries(format!("unrecognized timestamp '{s}'")))
}

fn parse_value(s: &str, at: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Timeseries(format!("bad value '{s}' at {at}")))?;
    if !v.is_finite() {
        return Err(Error::Timeseries(format!("non-finite value at {at}")));
    }
    Ok(v)
}

fn check_spacing(ts: &[NaiveDateTime], dt_hours: f64, source: &str) -> Result<()> {
    let step = (dt_hours * 3600.0).round() as i64;
    for w in ts.windows(2) {
        let gap = (w[1] - w[0]).num_seconds();
        if gap != step {
            return Err(Error::Timeseries(format!(
                "{source}: irregular spacing after {}: next sample {} is {gap} s later, expected {step} s",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

impl Timeseries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// The only value column.
    pub fn single(&self) -> Result<&[f64]> {
        match self.values.as_slice() {
            [v] => Ok(v),
            _ => Err(Error::Dimension(format!("expected one value column, found {}", self.columns.len()))),
        }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().position(|c| c == name).map(|i| self.values[i].as_slice())
    }

    /// Per-bus matrix `[bus][t]` in network order. Columns are matched by
    /// bus id or name; a missing slack column reads as zeros.
    pub fn by_bus(&self, net: &Network) -> Result<Vec<Vec<f64>>> {
        net.buses
            .iter()
            .map(|b| {
                let found = self.column(&b.id.to_string()).or_else(|| self.column(&b.name));
                match found {
                    Some(v) => Ok(v.to_vec()),
                    None if b.is_slack => Ok(vec![0.0; self.len()]),
                    None => Err(Error::MissingProfile(format!("no column for bus {} ({})", b.id, b.name))),
                }
            })
            .collect()
    }

    /// Step index of the first sample within its day.
    pub fn first_step_of_day(&self) -> usize {
        self.timestamps.first().map_or(0, |t| {
            let secs = t.time().num_seconds_from_midnight() as f64;
            (secs / (self.dt_hours * 3600.0)).round() as usize
        })
    }
}

/// Reads a wide `(timestamp, value...)` or long `(timestamp, bus_id,
/// value)` CSV file whose samples are spaced exactly `dt_hours` apart.
pub fn load_timeseries(path: impl AsRef<Path>, dt_hours: f64) -> Result<Timeseries> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_timeseries(&text, dt_hours, &path.display().to_string())
}

pub fn parse_timeseries(text: &str, dt_hours: f64, source: &str) -> Result<Timeseries> {
    if !(dt_hours > 0.0 && dt_hours.is_finite()) {
        return Err(Error::Parameter(format!("dt must be positive, got {dt_hours}")));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Timeseries(format!("{source}: need a timestamp and at least one value column")));
    }
    let long = header.len() == 3 && matches!(header[1].to_ascii_lowercase().as_str(), "bus_id" | "bus");
    let ts = if long {
        parse_long(&mut reader, dt_hours, source)?
    } else {
        parse_wide(&mut reader, &header, dt_hours, source)?
    };
    if ts.is_empty() {
        return Err(Error::Timeseries(format!("{source}: no samples")));
    }
    check_spacing(&ts.timestamps, dt_hours, source)?;
    Ok(ts)
}

fn parse_wide(reader: &mut csv::Reader<&[u8]>, header: &[String], dt_hours: f64, source: &str) -> Result<Timeseries> {
    let mut ts = Timeseries {
        timestamps: Vec::new(),
        dt_hours,
        columns: header[1..].to_vec(),
        values: vec![Vec::new(); header.len() - 1],
    };
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Timeseries(format!("{source}: row {} has {} fields, expected {}", row + 2, rec.len(), header.len())));
        }
        let t = parse_timestamp(&rec[0])?;
        for (c, field) in rec.iter().skip(1).enumerate() {
            let at = format!("{source} {t} column {}", header[c + 1]);
            ts.values[c].push(parse_value(field, &at)?);
        }
        ts.timestamps.push(t);
    }
    Ok(ts)
}

fn parse_long(reader: &mut csv::Reader<&[u8]>, dt_hours: f64, source: &str) -> Result<Timeseries> {
    let mut per_bus: BTreeMap<String, Vec<(NaiveDateTime, f64)>> = BTreeMap::new();
    let mut order = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Timeseries(format!("{source}: long rows need timestamp, bus_id, value")));
        }
        let t = parse_timestamp(&rec[0])?;
        let bus = rec[1].to_string();
        let v = parse_value(&rec[2], &format!("{source} {t} bus {bus}"))?;
        per_bus
            .entry(bus.clone())
            .or_insert_with(|| {
                order.push(bus);
                Vec::new()
            })
            .push((t, v));
    }
    let Some(first) = order.first() else {
        return Ok(Timeseries {
            timestamps: Vec::new(),
            dt_hours,
            columns: Vec::new(),
            values: Vec::new(),
        });
    };
    let mut timestamps: Vec<NaiveDateTime> = per_bus[first].iter().map(|p| p.0).collect();
    timestamps.sort();
    let mut values = Vec::with_capacity(order.len());
    for bus in &order {
        let mut rows = per_bus[bus].clone();
        rows.sort_by_key(|p| p.0);
        let times: Vec<NaiveDateTime> = rows.iter().map(|p| p.0).collect();
        if times != timestamps {
            let missing = timestamps
                .iter()
                .find(|t| !times.contains(t))
                .map(|t| t.to_string())
                .unwrap_or_else(|| "an extra timestamp".into());
            return Err(Error::Timeseries(format!("{source}: bus {bus} lacks {missing}")));
        }
        values.push(rows.into_iter().map(|p| p.1).collect());
    }
    Ok(Timeseries {
        timestamps,
        dt_hours,
        columns: order,
        values,
    })
}

/// Input profile files; all share the step `dt_hours` of the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilePaths {
    /// PV availability as a fraction of rating.
    pub solar: Option<PathBuf>,
    /// Outdoor temperature (°C).
    pub temperature: Option<PathBuf>,
    /// Price ($/kWh).
    pub lmp: Option<PathBuf>,
    /// Per-bus active load (kW).
    pub loads: Option<PathBuf>,
    /// Per-bus reactive load (kvar); defaults to each bus's nominal ratio.
    pub loads_q: Option<PathBuf>,
    pub baseline_bs: Option<PathBuf>,
    pub baseline_ev: Option<PathBuf>,
    pub baseline_hp: Option<PathBuf>,
}

impl ProfilePaths {
    pub fn files(&self) -> Vec<(&'static str, &Path)> {
        [
            ("solar", &self.solar),
            ("temperature", &self.temperature),
            ("lmp", &self.lmp),
            ("loads", &self.loads),
            ("loads_q", &self.loads_q),
            ("baseline_bs", &self.baseline_bs),
            ("baseline_ev", &self.baseline_ev),
            ("baseline_hp", &self.baseline_hp),
        ]
        .into_iter()
        .filter_map(|(n, p)| p.as_deref().map(|p| (n, p)))
        .collect()
    }
}

fn truncate(v: &[f64], horizon: usize, name: &str) -> Result<Vec<f64>> {
    if v.len() < horizon {
        return Err(Error::Timeseries(format!("{name} holds {} steps, the horizon needs {horizon}", v.len())));
    }
    Ok(v[..horizon].to_vec())
}

/// Baseline scenario from profile files. The horizon defaults to the
/// shortest series; every series must cover it.
pub fn baseline_from_profiles(net: &Network, paths: &ProfilePaths, dt_hours: f64, horizon: Option<usize>) -> Result<ScenarioData> {
    let need = |p: &Option<PathBuf>, name: &str| -> Result<Timeseries> {
        let p = p.as_ref().ok_or_else(|| Error::MissingProfile(name.to_string()))?;
        load_timeseries(p, dt_hours)
    };
    let solar = need(&paths.solar, "solar")?;
    let temp = need(&paths.temperature, "temperature")?;
    let lmp = need(&paths.lmp, "lmp")?;
    let loads = need(&paths.loads, "loads")?;
    let optional = |p: &Option<PathBuf>| p.as_ref().map(|p| load_timeseries(p, dt_hours)).transpose();
    let loads_q = optional(&paths.loads_q)?;
    let extra = [optional(&paths.baseline_bs)?, optional(&paths.baseline_ev)?, optional(&paths.baseline_hp)?];
    let mut series: Vec<&Timeseries> = vec![&solar, &temp, &lmp, &loads];
    series.extend(loads_q.iter());
    series.extend(extra.iter().flatten());
    let start = solar.timestamps[0];
    if let Some(s) = series.iter().find(|s| s.timestamps[0] != start) {
        return Err(Error::Timeseries(format!("profiles start at different times ({start} and {})", s.timestamps[0])));
    }
    let shortest = series.iter().map(|s| s.len()).min().unwrap_or(0);
    let h = horizon.unwrap_or(shortest);
    if h == 0 {
        return Err(Error::Parameter("horizon must be at least one step".into()));
    }
    let per_bus = |ts: &Timeseries, name: &str| -> Result<Vec<Vec<f64>>> {
        ts.by_bus(net)?.iter().map(|row| truncate(row, h, name)).collect()
    };
    let load_p = per_bus(&loads, "loads")?;
    let load_q = match &loads_q {
        Some(q) => per_bus(q, "loads_q")?,
        None => net
            .buses
            .iter()
            .zip(&load_p)
            .map(|(b, row)| {
                let ratio = if b.nominal_load_p > 0.0 { b.nominal_load_q / b.nominal_load_p } else { 0.0 };
                row.iter().map(|p| p * ratio).collect()
            })
            .collect(),
    };
    let [bs, ev, hp] = &extra;
    let scen = ScenarioData {
        dt: dt_hours,
        t0: solar.first_step_of_day(),
        alpha_pv: truncate(solar.single()?, h, "solar")?,
        t_out: truncate(temp.single()?, h, "temperature")?,
        lmp: truncate(lmp.single()?, h, "lmp")?,
        load_p,
        load_q,
        baseline_bs: bs.as_ref().map(|t| per_bus(t, "baseline_bs")).transpose()?,
        baseline_ev: ev.as_ref().map(|t| per_bus(t, "baseline_ev")).transpose()?,
        baseline_hp: hp.as_ref().map(|t| per_bus(t, "baseline_hp")).transpose()?,
        probability: 1.0,
    };
    scen.validate(net)?;
    Ok(scen)
}

// ---------------------------------------------------------------------------
// Run configuration

/// Grid of a BS × HP sweep (percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub bs: Vec<f64>,
    pub hp: Vec<f64>,
    pub engine: SweepEngine,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            bs: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            hp: vec![0.0, 30.0, 60.0, 90.0],
            engine: SweepEngine::Iterative,
        }
    }
}

/// Everything a command needs besides its flags. Relative paths are
/// resolved against the configuration file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: Option<PathBuf>,
    /// Scenario directory as written by `ScenarioSet::save_dir`.
    pub scenarios: Option<PathBuf>,
    /// Baseline profiles, used when no scenario directory is given.
    pub profiles: Option<ProfilePaths>,
    pub dt_hours: f64,
    pub horizon: Option<usize>,
    /// Scenarios drawn around the baseline when none are given.
    pub scenario_count: usize,
    pub noise: Option<NoiseLevels>,
    pub seed: u64,
    pub weights: ObjectiveWeights,
    pub templates: DeviceTemplates,
    /// Overrides the solver settings of every engine when set.
    pub settings: Option<SolverSettings>,
    pub hca: HcaConfig,
    pub ssp: SspConfig,
    pub sweep: SweepGrid,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: None,
            scenarios: None,
            profiles: None,
            dt_hours: 1.0,
            horizon: None,
            scenario_count: 30,
            noise: None,
            seed: 0,
            weights: ObjectiveWeights::default(),
            templates: DeviceTemplates::default(),
            settings: None,
            hca: HcaConfig::default(),
            ssp: SspConfig::default(),
            sweep: SweepGrid::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads a configuration file, resolves its paths and checks that
    /// they exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.network);
        fix(&mut self.scenarios);
        if let Some(pr) = &mut self.profiles {
            for p in [
                &mut pr.solar,
                &mut pr.temperature,
                &mut pr.lmp,
                &mut pr.loads,
                &mut pr.loads_q,
                &mut pr.baseline_bs,
                &mut pr.baseline_ev,
                &mut pr.baseline_hp,
            ] {
                fix(p);
            }
        }
        if self.out.is_relative() {
            self.out = base.join(&self.out);
        }
    }

    /// Paths referenced by the configuration.
    pub fn inputs(&self) -> Vec<(String, PathBuf)> {
        let mut out = Vec::new();
        if let Some(p) = &self.network {
            out.push(("network".to_string(), p.clone()));
        }
        if let Some(p) = &self.scenarios {
            out.push(("scenarios".to_string(), p.clone()));
        }
        if let Some(pr) = &self.profiles {
            out.extend(pr.files().into_iter().map(|(n, p)| (n.to_string(), p.to_path_buf())));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in self.inputs() {
            if !p.exists() {
                return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{name} input not found"))));
            }
        }
        if !(self.dt_hours > 0.0 && self.dt_hours.is_finite()) {
            return Err(Error::Parameter(format!("dt_hours must be positive, got {}", self.dt_hours)));
        }
        if self.scenario_count == 0 {
            return Err(Error::Parameter("scenario_count must be at least 1".into()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        self.hca.validate()?;
        self.ssp.validate()?;
        Ok(())
    }

    /// HCA settings with the run-wide seed, templates and solver overrides.
    pub fn hca_config(&self, mode: HcaMode) -> HcaConfig {
        let mut c = HcaConfig {
            mode,
            seed: self.seed,
            templates: self.templates.clone(),
            ..self.hca.clone()
        };
        if let Some(s) = &self.settings {
            c.opf.settings = s.clone();
        }
        c.opf.weights = self.weights.clone();
        c
    }

    pub fn ssp_config(&self, mode: HcaMode) -> SspConfig {
        let mut c = SspConfig {
            mode,
            templates: self.templates.clone(),
            ..self.ssp.clone()
        };
        if let Some(s) = &self.settings {
            c.settings = s.clone();
        }
        c.opf.weights = self.weights.clone();
        c
    }
}

// ---------------------------------------------------------------------------
// Manifest

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file, or of a directory's files in name order.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut h = Sha256::new();
        for p in entries {
            h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            h.update([0]);
            h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
            h.update([0]);
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
    }
}

/// Machine-readable record of a run. It holds no wall-clock data, so
/// identical inputs give an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// Input name → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 over all input hashes, in name order.
    pub input_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            input_hash: sha256_hex(b""),
            seeds: BTreeMap::new(),
            config,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), hash_path(path)?);
        self.refresh_hash();
        Ok(())
    }

    /// Records in-memory input data (e.g. a bundled fixture).
    pub fn add_input_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.insert(name.to_string(), sha256_hex(bytes));
        self.refresh_hash();
    }

    fn refresh_hash(&mut self) {
        let mut h = Sha256::new();
        for (k, v) in &self.inputs {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        self.input_hash = hex::encode(h.finalize());
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Writes `contents` to `dir/name`, creating `dir`, and records the name.
pub fn write_output(dir: &Path, name: &str, contents: &str, manifest: &mut Manifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    if !manifest.outputs.iter().any(|o| o == name) {
        manifest.outputs.push(name.to_string());
    }
    Ok(path)
}
