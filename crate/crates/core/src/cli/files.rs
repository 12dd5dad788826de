//! CSV files with `# key=value` header lines, and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::Config;
use crate::error::{Error, Result};
use crate::model::{Alternative, CorrectionMode, Dataset, Observation, SampledSet};

pub const CONFIG_HASH: &str = "config_hash";
pub const DATASET_HASH: &str = "dataset_hash";

/// A parsed output file: header entries and CSV records.
#[derive(Debug)]
pub struct Table {
    pub headers: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn header(&self, path: &Path, key: &str) -> Result<&str> {
        self.headers
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, format!("missing '# {key}=' header")))
    }

    pub fn column(&self, path: &Path, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::format(path, format!("missing column '{name}'")))
    }
}

/// Accumulates CSV records in memory so each file is written in one go.
pub struct CsvOut {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvOut {
    pub fn new(columns: &[String]) -> Self {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        writer.write_record(columns).expect("in-memory write");
        Self { writer }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.writer.into_inner().expect("in-memory flush")
    }
}

/// Shortest round-trip decimal; `-0` is written as `0`.
pub fn fmt(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x}")
    }
}

pub fn write_table(path: &Path, headers: &[(&str, &str)], body: Vec<u8>) -> Result<()> {
    let mut out = Vec::with_capacity(body.len() + 128);
    for (k, v) in headers {
        out.extend_from_slice(format!("# {k}={v}\n").as_bytes());
    }
    out.extend(body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut headers = BTreeMap::new();
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let Some(rest) = line.strip_prefix("# ") else { break };
        let (k, v) = rest
            .trim_end()
            .split_once('=')
            .ok_or_else(|| Error::format(path, "malformed header line"))?;
        headers.insert(k.to_string(), v.to_string());
        body_start += line.len();
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(text[body_start..].as_bytes());
    let columns = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(String::from).collect())
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok(Table { headers, columns, rows })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes `<file>.manifest`: the command, the config hash, the seed and the
/// canonical config under a `config.` prefix.
pub fn write_manifest(path: &Path, command: &str, config: &Config, extra: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    text.push_str(&format!("file = {name}\ncommand = {command}\n{CONFIG_HASH} = {}\n", config.hash()));
    if let Some(seed) = config.get("seed") {
        text.push_str(&format!("seed = {seed}\n"));
    }
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for line in config.canonical().lines() {
        text.push_str(&format!("config.{line}\n"));
    }
    let mpath = manifest_path(path);
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Reads a manifest back; returns the recorded hash and the embedded
/// config.
pub fn read_manifest(path: &Path) -> Result<(String, Config)> {
    let mpath = manifest_path(path);
    let m = Config::load(&mpath).map_err(|e| match e {
        Error::Config(reason) => Error::format(&mpath, reason),
        other => other,
    })?;
    let hash = m
        .get(CONFIG_HASH)
        .ok_or_else(|| Error::format(&mpath, "manifest lacks config_hash"))?
        .to_string();
    let mut embedded = Config::default();
    for key in m.keys() {
        if let Some(inner) = key.strip_prefix("config.") {
            embedded.set(inner, m.get(key).unwrap_or_default());
        }
    }
    Ok((hash, embedded))
}

/// Reads an input produced by an earlier command and refuses it when its
/// header hash disagrees with its manifest, or with `expected` when given.
pub fn read_checked(path: &Path, expected: Option<&str>) -> Result<Table> {
    let table = read_table(path)?;
    let file_hash = table.header(path, CONFIG_HASH)?.to_string();
    let (manifest_hash, embedded) = read_manifest(path)?;
    if file_hash != manifest_hash || embedded.hash() != manifest_hash {
        return Err(Error::Config(format!(
            "refusing {}: config hash in file ({file_hash}) does not match its manifest",
            path.display()
        )));
    }
    if let Some(exp) = expected {
        if exp != file_hash {
            return Err(Error::Config(format!(
                "refusing {}: expected config hash {exp}, found {file_hash}",
                path.display()
            )));
        }
    }
    Ok(table)
}

fn parse_field<T: std::str::FromStr>(path: &Path, row: usize, name: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("row {}: bad {name} '{v}'", row + 1)))
}

pub fn dataset_columns(k: usize) -> Vec<String> {
    ["obs_id", "individual_id", "alt_id", "chosen"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=k).map(|d| format!("x{d}")))
        .collect()
}

pub fn dataset_body(ds: &Dataset) -> Vec<u8> {
    let mut out = CsvOut::new(&dataset_columns(ds.k()));
    for obs in ds.observations() {
        for alt in &obs.alternatives {
            let mut row = vec![
                obs.obs_id.to_string(),
                obs.individual_id.to_string(),
                alt.id.to_string(),
                ((alt.id == obs.chosen) as u8).to_string(),
            ];
            row.extend(alt.attributes.iter().map(|x| fmt(*x)));
            out.row(row);
        }
    }
    out.into_bytes()
}

/// Parses a long-format dataset; rows of one observation must be
/// contiguous with `alt_id = 0..J-1` and exactly one chosen alternative.
pub fn parse_dataset(path: &Path, table: &Table) -> Result<Dataset> {
    let k = table.columns.len().saturating_sub(4);
    if k == 0 || table.columns != dataset_columns(k) {
        return Err(Error::format(path, "expected columns obs_id,individual_id,alt_id,chosen,x1..xK"));
    }
    let mut observations = Vec::new();
    let mut current: Option<(usize, usize, Vec<Alternative>, Option<usize>)> = None;
    let finish = |cur: (usize, usize, Vec<Alternative>, Option<usize>)| -> Result<Observation> {
        let (obs_id, indiv, alts, chosen) = cur;
        let chosen = chosen.ok_or_else(|| Error::format(path, format!("observation {obs_id} has no chosen alternative")))?;
        Observation::new(obs_id, indiv, alts, chosen).map_err(|e| Error::format(path, e.to_string()))
    };
    for (r, row) in table.rows.iter().enumerate() {
        let obs_id: usize = parse_field(path, r, "obs_id", &row[0])?;
        let indiv: usize = parse_field(path, r, "individual_id", &row[1])?;
        let alt_id: usize = parse_field(path, r, "alt_id", &row[2])?;
        let chosen: u8 = parse_field(path, r, "chosen", &row[3])?;
        let attributes = row[4..]
            .iter()
            .map(|v| parse_field::<f64>(path, r, "attribute", v))
            .collect::<Result<Vec<_>>>()?;
        if current.as_ref().is_some_and(|c| c.0 != obs_id) {
            observations.push(finish(current.take().expect("checked"))?);
        }
        let cur = current.get_or_insert_with(|| (obs_id, indiv, Vec::new(), None));
        if cur.1 != indiv {
            return Err(Error::format(path, format!("row {}: individual changes within observation", r + 1)));
        }
        match chosen {
            0 => {}
            1 if cur.3.is_none() => cur.3 = Some(alt_id),
            _ => return Err(Error::format(path, format!("row {}: invalid chosen flag", r + 1))),
        }
        cur.2.push(Alternative { id: alt_id, attributes });
    }
    if let Some(cur) = current {
        observations.push(finish(cur)?);
    }
    Dataset::new(observations).map_err(|e| Error::format(path, e.to_string()))
}

pub fn sets_body(ds: &Dataset, sets: &[SampledSet]) -> Vec<u8> {
    let mut out = CsvOut::new(&["obs_id".into(), "alt_id".into(), "log_cond_prob".into()]);
    for (obs, set) in ds.observations().iter().zip(sets) {
        for (id, l) in set.member_ids().iter().zip(set.log_cond_prob()) {
            out.row([obs.obs_id.to_string(), id.to_string(), fmt(*l)]);
        }
    }
    out.into_bytes()
}

/// Parses sampled sets aligned with the dataset's observation order.
pub fn parse_sets(path: &Path, table: &Table, ds: &Dataset) -> Result<Vec<SampledSet>> {
    if table.columns != ["obs_id", "alt_id", "log_cond_prob"] {
        return Err(Error::format(path, "expected columns obs_id,alt_id,log_cond_prob"));
    }
    let mut groups: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
    for (r, row) in table.rows.iter().enumerate() {
        let obs_id: usize = parse_field(path, r, "obs_id", &row[0])?;
        let alt: usize = parse_field(path, r, "alt_id", &row[1])?;
        let l: f64 = parse_field(path, r, "log_cond_prob", &row[2])?;
        match groups.last_mut() {
            Some(g) if g.0 == obs_id => {
                g.1.push(alt);
                g.2.push(l);
            }
            _ => groups.push((obs_id, vec![alt], vec![l])),
        }
    }
    if groups.len() != ds.len() {
        return Err(Error::format(path, format!("{} sets for {} observations", groups.len(), ds.len())));
    }
    groups
        .into_iter()
        .zip(ds.observations())
        .map(|((obs_id, members, lcp), obs)| {
            if obs_id != obs.obs_id {
                return Err(Error::format(path, format!("set for obs {obs_id} out of order")));
            }
            SampledSet::new(members, lcp, CorrectionMode::McFadden, obs.chosen)
                .map_err(|e| Error::format(path, format!("obs {obs_id}: {e}")))
        })
        .collect()
}

/// One long-format report record.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
    pub context: String,
}

pub fn report_body(rows: &[ReportRow]) -> Vec<u8> {
    let cols: Vec<String> = ["run_id", "config_hash", "metric", "value", "context"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut out = CsvOut::new(&cols);
    for r in rows {
        out.row([r.run_id.as_str(), r.config_hash.as_str(), r.metric.as_str(), fmt(r.value).as_str(), r.context.as_str()]);
    }
    out.into_bytes()
}

pub fn parse_report(path: &Path, table: &Table) -> Result<Vec<ReportRow>> {
    if table.columns != ["run_id", "config_hash", "metric", "value", "context"] {
        return Err(Error::format(path, "not a report file"));
    }
    table
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            Ok(ReportRow {
                run_id: row[0].clone(),
                config_hash: row[1].clone(),
                metric: row[2].clone(),
                value: parse_field(path, r, "value", &row[3])?,
                context: row[4].clone(),
            })
        })
        .collect()
}
