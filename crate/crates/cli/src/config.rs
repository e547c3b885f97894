//! Flat `key = value` configuration over every module's parameters.
//!
//! Keys are dotted paths into the serialized parameter structs, e.g.
//! `anchor.icp.max_iterations`. A file sets values first, then command-line
//! `key=value` arguments override them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mapanchor::change::ChangeParams;
use mapanchor::isc::IscParams;
use mapanchor::ogm::{GridParams, SamplingParams};
use mapanchor::pipeline::PipelineConfig;
use mapanchor::session::DEFAULT_ODOMETRY_VARIANCE;
use mapanchor::sim::{LidarModel, MapToSessionParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map2sdConfig {
    /// Sensor height above the floor, meters.
    pub sensor_height: f64,
    /// First scan location is the one nearest this (x, y).
    pub start: [f64; 2],
}

impl Default for Map2sdConfig {
    fn default() -> Self {
        let d = MapToSessionParams::default();
        Self { sensor_height: d.sensor_height, start: d.start }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    /// Keep keyframes at least this many seconds apart; 0 keeps all.
    pub min_time_gap: f64,
    /// Variance of every odometry edge component.
    pub odometry_variance: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { min_time_gap: 0.0, odometry_variance: DEFAULT_ODOMETRY_VARIANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Maximum timestamp difference for pairing poses, seconds.
    pub max_time_diff: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_time_diff: 0.01 }
    }
}

/// Every configurable parameter. The descriptor parameters are shared by
/// `map2sd`, `mkquery` and `anchor`; the LiDAR noise seed comes from `--seed`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub grid: GridParams,
    pub sampling: SamplingParams,
    pub map2sd: Map2sdConfig,
    pub lidar: LidarModel,
    pub isc: IscParams,
    pub query: QueryConfig,
    pub anchor: PipelineConfig,
    pub diff: ChangeParams,
    pub eval: EvalConfig,
}

const SECTIONS: [(&str, &str); 9] = [
    ("grid", "occupancy grid extraction (map2sd)"),
    ("sampling", "scan location sampling on the grid skeleton (map2sd)"),
    ("map2sd", "reference session simulation (map2sd)"),
    ("lidar", "simulated LiDAR (map2sd)"),
    ("isc", "scan descriptors (map2sd, mkquery, anchor)"),
    ("query", "query session loading (mkquery)"),
    ("anchor", "alignment pipeline (anchor)"),
    ("diff", "change detection (diff)"),
    ("eval", "trajectory evaluation (eval)"),
];

// keys owned by another section or by a command-line flag
const HIDDEN: [&str; 2] = ["anchor.isc.", "lidar.noise_seed"];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&format!("{prefix}.{k}"), x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(section: &str, flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    let prefix = format!("{section}.");
    for (key, v) in flat.iter().filter(|(k, _)| k.starts_with(&prefix)) {
        let parts: Vec<&str> = key[prefix.len()..].split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("sections nest objects only");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("parameters serialize")
}

fn section<T: DeserializeOwned>(name: &str, flat: &BTreeMap<String, Value>, base: &T) -> Result<T, ConfigError>
where
    T: Serialize,
{
    // hidden keys keep their values from `base`
    let mut full = BTreeMap::new();
    flatten(name, &to_value(base), &mut full);
    for (k, v) in flat.iter().filter(|(k, _)| k.starts_with(&format!("{name}."))) {
        full.insert(k.clone(), v.clone());
    }
    serde_json::from_value(unflatten(name, &full)).map_err(|e| ConfigError(format!("section {name}: {e}")))
}

fn parse_scalar(key: &str, default: &Value, text: &str) -> Result<Value, ConfigError> {
    let bad = || ConfigError(format!("{key}: cannot parse {text:?} (default {default})"));
    let t = text.trim();
    Ok(match default {
        Value::Bool(_) => Value::Bool(t.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(t.parse::<u64>().map_err(|_| bad())?),
        Value::Number(n) if n.is_i64() => Value::from(t.parse::<i64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let x: f64 = t.parse().map_err(|_| bad())?;
            if !x.is_finite() {
                return Err(ConfigError(format!("{key}: value must be finite")));
            }
            Value::from(x)
        }
        Value::String(_) => Value::String(t.to_string()),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::from(0.0));
            let parts: Vec<Value> = t.split(',').map(|s| parse_scalar(key, &proto, s)).collect::<Result<_, _>>()?;
            if parts.len() != items.len() {
                return Err(ConfigError(format!("{key}: expected {} comma-separated values", items.len())));
            }
            Value::Array(parts)
        }
        Value::Null | Value::Object(_) => return Err(bad()),
    })
}

fn render(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::Number(n) if n.is_f64() => format!("{:?}", n.as_f64().expect("f64")),
        other => other.to_string(),
    }
}

impl Config {
    fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("grid", &to_value(&self.grid), &mut out);
        flatten("sampling", &to_value(&self.sampling), &mut out);
        flatten("map2sd", &to_value(&self.map2sd), &mut out);
        flatten("lidar", &to_value(&self.lidar), &mut out);
        flatten("isc", &to_value(&self.isc), &mut out);
        flatten("query", &to_value(&self.query), &mut out);
        flatten("anchor", &to_value(&self.anchor), &mut out);
        flatten("diff", &to_value(&self.diff), &mut out);
        flatten("eval", &to_value(&self.eval), &mut out);
        out.retain(|k, _| !HIDDEN.iter().any(|h| k.starts_with(h)));
        out
    }

    /// Defaults, then the file's entries, then `overrides` (`key=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config, ConfigError> {
        let mut flat = Config::default().flat();
        let mut set = |key: &str, value: &str, at: &str| -> Result<(), ConfigError> {
            let default = flat.get(key).ok_or_else(|| ConfigError(format!("{at}unknown config key {key:?}")))?;
            let v = parse_scalar(key, default, value).map_err(|e| ConfigError(format!("{at}{}", e.0)))?;
            flat.insert(key.to_string(), v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let at = format!("{}:{}: ", path.display(), i + 1);
                let (k, v) = line.split_once('=').ok_or_else(|| ConfigError(format!("{at}expected key = value")))?;
                set(k.trim(), v, &at)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError(format!("expected key=value, got {o:?}")))?;
            set(k.trim(), v, "")?;
        }
        let d = Config::default();
        let mut c = Config {
            grid: section("grid", &flat, &d.grid)?,
            sampling: section("sampling", &flat, &d.sampling)?,
            map2sd: section("map2sd", &flat, &d.map2sd)?,
            lidar: section("lidar", &flat, &d.lidar)?,
            isc: section("isc", &flat, &d.isc)?,
            query: section("query", &flat, &d.query)?,
            anchor: section("anchor", &flat, &d.anchor)?,
            diff: section("diff", &flat, &d.diff)?,
            eval: section("eval", &flat, &d.eval)?,
        };
        c.anchor.isc = c.isc.clone();
        Ok(c)
    }

    /// Every parameter checked up front, so that bad values fail before any
    /// work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |e: mapanchor::Error| ConfigError(format!("invalid configuration: {e}"));
        self.grid.validate().map_err(err)?;
        self.lidar.validate().map_err(err)?;
        self.isc.validate().map_err(err)?;
        self.anchor.validate().map_err(err)?;
        self.diff.validate().map_err(err)?;
        let s = &self.sampling;
        if !(s.line_spacing > 0.0 && s.min_spacing >= 0.0) {
            return Err(ConfigError("invalid configuration: need sampling.line_spacing > 0 and sampling.min_spacing >= 0".into()));
        }
        if !(self.query.min_time_gap >= 0.0 && self.query.odometry_variance > 0.0) {
            return Err(ConfigError("invalid configuration: need query.min_time_gap >= 0 and query.odometry_variance > 0".into()));
        }
        if !(self.eval.max_time_diff >= 0.0) {
            return Err(ConfigError("invalid configuration: need eval.max_time_diff >= 0".into()));
        }
        Ok(())
    }

    pub fn map_to_session(&self, seed: u64) -> MapToSessionParams {
        MapToSessionParams {
            grid: self.grid,
            sampling: self.sampling,
            sensor_height: self.map2sd.sensor_height,
            start: self.map2sd.start,
            lidar: LidarModel { noise_seed: seed, ..self.lidar },
            isc: self.isc.clone(),
        }
    }

    /// The flat view as `key = value` lines, one section per block.
    pub fn to_text(&self) -> String {
        let flat = self.flat();
        let mut s = String::new();
        for (name, about) in SECTIONS {
            let _ = writeln!(s, "# {name}: {about}");
            for (k, v) in flat.iter().filter(|(k, _)| k.starts_with(&format!("{name}."))) {
                let _ = writeln!(s, "{k} = {}", render(v));
            }
            s.push('\n');
        }
        s
    }
}

/// Help text listing every key with its default.
pub fn key_reference() -> String {
    let mut s = String::from(
        "CONFIGURATION\n\
         A config file holds `key = value` lines (`#` starts a comment); trailing\n\
         `key=value` arguments override it. Lists are comma-separated. Unknown keys\n\
         are rejected. Keys and defaults:\n\n",
    );
    for line in Config::default().to_text().lines() {
        if !line.is_empty() {
            let _ = writeln!(s, "  {line}");
        } else {
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, Config::default().to_text()).unwrap();
        assert_eq!(Config::load(Some(&p), &[]).unwrap(), Config::default());
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "grid.resolution = 0.1  # coarse\n\nanchor.knn_k=3\n").unwrap();
        let c = Config::load(Some(&p), &["anchor.knn_k=7".into(), "lidar.vertical_fov=-25,0".into(), "anchor.enable_knn_loops=false".into()]).unwrap();
        assert_eq!(c.grid.resolution, 0.1);
        assert_eq!(c.anchor.knn_k, 7);
        assert_eq!(c.lidar.vertical_fov, [-25.0, 0.0]);
        assert!(!c.anchor.enable_knn_loops);
    }

    #[test]
    fn isc_is_shared_with_the_pipeline() {
        let c = Config::load(None, &["isc.num_sectors=30".into()]).unwrap();
        assert_eq!(c.anchor.isc.num_sectors, 30);
        assert!(Config::load(None, &["anchor.isc.num_sectors=30".into()]).is_err());
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(Config::load(None, &["grid.resolutio=0.1".into()]).unwrap_err().0.contains("unknown config key"));
        assert!(Config::load(None, &["anchor.knn_k=-1".into()]).is_err());
        assert!(Config::load(None, &["anchor.knn_k=2.5".into()]).is_err());
        assert!(Config::load(None, &["lidar.vertical_fov=1".into()]).is_err());
        assert!(Config::load(None, &["grid.resolution=nan".into()]).is_err());
        assert!(Config::load(None, &["lidar.noise_seed=3".into()]).is_err());
        assert!(Config::load(None, &["noequals".into()]).is_err());
        let c = Config::load(None, &["grid.resolution=0".into()]).unwrap();
        assert!(c.validate().is_err());
        assert!(Config::default().validate().is_ok());
    }

    #[test]
    fn reference_lists_every_key() {
        let text = key_reference();
        for k in Config::default().flat().keys() {
            assert!(text.contains(&format!("  {k} = ")), "{k}");
        }
    }
}
