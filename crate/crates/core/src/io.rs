//! MovingAI map/scenario parsing, run configuration, and metrics output.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{EnvConfig, GridMap};
use crate::learner::LearnerConfig;
use crate::neural::{AdamWConfig, NetConfig};
use crate::observe::ObsConfig;
use crate::orchestrator::TrainConfig;
use crate::radio::Deployment;
use crate::replay::ReplayConfig;
use crate::reward::RewardConfig;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("map parse error at line {line}: {message}")]
    Map { line: usize, message: String },
    #[error("scenario parse error at row {row}: {message}")]
    Scen { row: usize, message: String },
    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error(transparent)]
    File(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One MovingAI benchmark scenario row.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub bucket: u32,
    pub map_name: String,
    pub map_width: usize,
    pub map_height: usize,
    pub start: (i32, i32),
    pub goal: (i32, i32),
    pub optimal_length: f64,
}

/// Parse a MovingAI `.map` file.
///
/// `.`, `G` and `S` are passable; `@`, `O`, `T`, `W` are impassable.
pub fn parse_map(text: &str) -> Result<GridMap, IoError> {
    let err = |line: usize, message: String| IoError::Map { line, message };
    let mut lines = text.lines().enumerate();
    let mut height: Option<usize> = None;
    let mut width: Option<usize> = None;

    let (_, first) = lines
        .next()
        .ok_or_else(|| err(1, "empty input".into()))?;
    if first.trim() != "type octile" {
        return Err(err(1, format!("expected 'type octile', got '{}'", first.trim())));
    }
    for _ in 0..2 {
        let (i, line) = lines
            .next()
            .ok_or_else(|| err(2, "missing height/width header".into()))?;
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let val: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(i + 1, format!("bad dimension line '{line}'")))?;
        match key {
            "height" => height = Some(val),
            "width" => width = Some(val),
            other => return Err(err(i + 1, format!("unexpected header key '{other}'"))),
        }
    }
    let height = height.ok_or_else(|| err(3, "missing height header".into()))?;
    let width = width.ok_or_else(|| err(3, "missing width header".into()))?;
    let (i, map_line) = lines
        .next()
        .ok_or_else(|| err(4, "missing 'map' header".into()))?;
    if map_line.trim() != "map" {
        return Err(err(i + 1, format!("expected 'map', got '{}'", map_line.trim())));
    }

    // dimensions are untrusted; the body itself bounds the allocation
    let declared = width
        .checked_mul(height)
        .filter(|&n| n <= text.len().max(1))
        .ok_or_else(|| {
            err(2, format!("declared {width}x{height} exceeds the provided body"))
        })?;
    let mut cells = Vec::with_capacity(declared);
    let mut rows = 0usize;
    for (i, line) in lines {
        if line.is_empty() && rows == height {
            continue; // trailing blank lines
        }
        if rows == height {
            return Err(err(i + 1, "extra rows after declared height".into()));
        }
        if line.chars().count() != width {
            return Err(err(
                i + 1,
                format!("row has {} glyphs, expected {width}", line.chars().count()),
            ));
        }
        for g in line.chars() {
            match g {
                '.' | 'G' | 'S' => cells.push(0),
                '@' | 'O' | 'T' | 'W' => cells.push(1),
                other => return Err(err(i + 1, format!("unknown glyph '{other}'"))),
            }
        }
        rows += 1;
    }
    if rows != height {
        return Err(err(
            4 + rows,
            format!("truncated body: {rows} rows, expected {height}"),
        ));
    }
    GridMap::new(width, height, cells, 1.0)
        .map_err(|e| err(0, e.to_string()))
}

/// Serialize a grid back to MovingAI text (`.` / `@` glyphs only).
pub fn serialize_map(map: &GridMap) -> String {
    let mut out = format!("type octile\nheight {}\nwidth {}\nmap\n", map.height(), map.width());
    for y in 0..map.height() {
        for x in 0..map.width() {
            out.push(if map.raw_cells()[y * map.width() + x] == 1 { '@' } else { '.' });
        }
        out.push('\n');
    }
    out
}

/// Parse a MovingAI `.scen` file into ordered scenarios.
pub fn parse_scen(text: &str) -> Result<Vec<Scenario>, IoError> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    if !first.trim().starts_with("version") {
        return Err(IoError::Scen {
            row: 0,
            message: format!("expected 'version' header, got '{first}'"),
        });
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(IoError::Scen {
                row: row + 1,
                message: format!("expected 9 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_int = |s: &str, name: &str| -> Result<i64, IoError> {
            s.trim().parse().map_err(|_| IoError::Scen {
                row: row + 1,
                message: format!("bad {name} value '{s}'"),
            })
        };
        let scen = Scenario {
            bucket: parse_int(fields[0], "bucket")? as u32,
            map_name: fields[1].to_string(),
            map_width: parse_int(fields[2], "width")? as usize,
            map_height: parse_int(fields[3], "height")? as usize,
            start: (parse_int(fields[4], "start x")? as i32, parse_int(fields[5], "start y")? as i32),
            goal: (parse_int(fields[6], "goal x")? as i32, parse_int(fields[7], "goal y")? as i32),
            optimal_length: fields[8].trim().parse().map_err(|_| IoError::Scen {
                row: row + 1,
                message: format!("bad optimal length '{}'", fields[8]),
            })?,
        };
        for (name, (x, y)) in [("start", scen.start), ("goal", scen.goal)] {
            if x < 0 || y < 0 || x as usize >= scen.map_width || y as usize >= scen.map_height {
                return Err(IoError::Scen {
                    row: row + 1,
                    message: format!("{name} ({x}, {y}) outside {}x{}", scen.map_width, scen.map_height),
                });
            }
        }
        out.push(scen);
    }
    Ok(out)
}

/// Every tunable of every module, as named sections with Table 1-4 defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: ConfigVersion,
    pub env: EnvConfig,
    pub obs: ObsConfig,
    pub reward: RewardConfig,
    pub radio: Deployment,
    pub replay: ReplayConfig,
    pub net: NetConfig,
    pub optimizer: AdamWConfig,
    pub learner: LearnerConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(transparent)]
pub struct ConfigVersion(pub u32);

impl Default for ConfigVersion {
    fn default() -> Self {
        ConfigVersion(1)
    }
}

/// Collect every unknown key in `value` against the key set of `schema`.
fn unknown_keys(value: &toml::Value, schema: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(vt), Some(st)) = (value.as_table(), schema.as_table()) else {
        return;
    };
    let known: BTreeSet<&str> = st.keys().map(String::as_str).collect();
    for (k, v) in vt {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match st.get(k.as_str()) {
            Some(sv) => unknown_keys(v, sv, &path, out),
            None => {
                if !known.contains(k.as_str()) {
                    out.push(format!("unknown key '{path}'"));
                }
            }
        }
    }
}

/// Parse a TOML run config, reporting all schema violations at once.
/// Missing keys take documented defaults; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig, IoError> {
    let value: toml::Value = text
        .parse()
        .map_err(|e: toml::de::Error| IoError::Config(vec![e.to_string()]))?;
    let schema = toml::Value::try_from(RunConfig::default())
        .expect("default config serializes");
    let mut violations = Vec::new();
    unknown_keys(&value, &schema, "", &mut violations);
    if value.get("version").is_some_and(|v| v.as_integer() != Some(1)) {
        violations.push(format!("unsupported config version {:?}", value.get("version")));
    }
    // per-section type errors, so several bad sections all get reported
    let table = value.as_table().cloned().unwrap_or_default();
    for (k, v) in &table {
        if schema.get(k).is_some() && k != "version" {
            let merged = toml::Value::Table({
                let mut t = toml::map::Map::new();
                t.insert(k.clone(), v.clone());
                t
            });
            if let Err(e) = merged.try_into::<RunConfig>() {
                violations.push(format!("section [{k}]: {e}"));
            }
        }
    }
    if !violations.is_empty() {
        return Err(IoError::Config(violations));
    }
    value
        .try_into()
        .map_err(|e: toml::de::Error| IoError::Config(vec![e.to_string()]))
}

pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn dump_config(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

/// One per-episode stats row appended to the metrics CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StatsRecord {
    pub episode: u64,
    pub stage: usize,
    pub steps: u32,
    pub reward: f64,
    pub success: bool,
    pub mean_sinr_db: f64,
    pub blackout_steps: u64,
}

/// Append records as headered CSV; the header is written only when the file
/// is new or empty.
pub fn write_metrics(records: &[StatsRecord], path: &Path) -> Result<(), IoError> {
    let need_header = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(need_header)
        .from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StatsRecord>, IoError> {
    let mut out = Vec::new();
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_map_round_trip() {
        let text = "type octile\nheight 2\nwidth 2\nmap\n.@\n..\n";
        let map = parse_map(text).unwrap();
        assert!(map.is_blocked(1, 0));
        assert!(map.is_passable(0, 0));
        assert_eq!(serialize_map(&map), text);
    }

    #[test]
    fn warehouse_fixture_dimensions() {
        let map = parse_map(include_str!("../assets/warehouse-161x63.map")).unwrap();
        assert_eq!((map.width(), map.height()), (161, 63));
        let round = serialize_map(&map);
        let reparsed = parse_map(&round).unwrap();
        assert_eq!(map.raw_cells(), reparsed.raw_cells());
    }

    #[test]
    fn map_errors_carry_line_numbers() {
        let e = parse_map("type octile\nheight 2\nwidth 2\nmap\n.@\n").unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        let e = parse_map("type octile\nheight 2\nwidth 2\nmap\n.X\n..\n").unwrap_err();
        assert!(e.to_string().contains("line 5"), "{e}");
        let e = parse_map("type octile\nheight 2\nwidth 2\nmap\n.@.\n..\n").unwrap_err();
        assert!(e.to_string().contains("expected 2"), "{e}");
    }

    #[test]
    fn parse_map_never_panics_on_garbage() {
        let inputs = [
            "",
            "\0\0\0",
            "type octile",
            "type octile\nheight x\nwidth 2\nmap\n",
            "type octile\nheight 99999999\nwidth 99999999\nmap\n.",
            "garbage\nmore garbage",
        ];
        for text in inputs {
            let _ = parse_map(text);
        }
    }

    #[test]
    fn scen_single_row() {
        let text = "version 1\n0\tmaze.map\t10\t10\t1\t2\t3\t4\t4.82842712\n";
        let s = parse_scen(text).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].start, (1, 2));
        assert_eq!(s[0].goal, (3, 4));
        assert!((s[0].optimal_length - 4.82842712).abs() < 1e-9);
    }

    #[test]
    fn scen_rejects_out_of_bounds_goal() {
        let text = "version 1\n0\tmaze.map\t10\t10\t1\t2\t10\t4\t4.0\n";
        let e = parse_scen(text).unwrap_err();
        assert!(e.to_string().contains("goal"), "{e}");
    }

    #[test]
    fn scen_order_preserved() {
        let mut text = String::from("version 1\n");
        for i in 0..50 {
            text.push_str(&format!("0\tm.map\t64\t64\t{i}\t0\t0\t{i}\t{i}.0\n"));
        }
        let s = parse_scen(&text).unwrap();
        assert_eq!(s.len(), 50);
        for (i, row) in s.iter().enumerate() {
            assert_eq!(row.start.0, i as i32);
        }
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.reward.goal, 2.0);
        assert_eq!(cfg.learner.eps_horizon, 5_000_000);
        assert_eq!(cfg.replay.capacity, 2_000_000);
    }

    #[test]
    fn config_override_applies() {
        let cfg = parse_config("[learner]\ndiscount = 0.95\n").unwrap();
        assert_eq!(cfg.learner.discount, 0.95);
        assert_eq!(cfg.learner.tau, 0.005);
    }

    #[test]
    fn config_unknown_keys_all_reported() {
        let e = parse_config("[learner]\nbogus = 1\nfake = 2\n[nosuch]\nx = 1\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("learner.bogus"), "{msg}");
        assert!(msg.contains("learner.fake"), "{msg}");
        assert!(msg.contains("nosuch"), "{msg}");
    }

    #[test]
    fn config_defaulting_is_idempotent() {
        let cfg = parse_config("[reward]\ngoal = 3.5\n").unwrap();
        let dumped = dump_config(&cfg);
        let reparsed = parse_config(&dumped).unwrap();
        assert_eq!(cfg, reparsed);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let records: Vec<StatsRecord> = (0..5)
            .map(|i| StatsRecord {
                episode: i,
                stage: 0,
                steps: 10 + i as u32,
                reward: i as f64 * 0.5,
                success: i % 2 == 0,
                mean_sinr_db: 12.5,
                blackout_steps: i,
            })
            .collect();
        write_metrics(&records[..3], &path).unwrap();
        write_metrics(&records[3..], &path).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), records);
    }
}
