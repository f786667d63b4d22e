//! Result files: one CSV row per query in completion order, followed by
//! `#`-prefixed `key=value` metadata lines.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ail_core::workload::PRNG_NAME;
use ail_core::{ExperimentConfig, ExperimentResult, QueryMetrics};
use anyhow::{anyhow, bail, Context, Result};

pub const HEADER: [&str; 6] = ["seq", "client", "response_ns", "wait_ns", "crack_ns", "result"];

/// What a result file records about its run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub config: ExperimentConfig,
    pub elapsed_ns: u64,
    pub queries_per_second: f64,
    pub total_wait_ns: u64,
    pub total_crack_ns: u64,
    pub prng: String,
    /// Set when the column came from a file rather than the generator.
    pub column_file: Option<String>,
}

impl RunMeta {
    pub fn from_result(result: &ExperimentResult, column_file: Option<&Path>) -> Self {
        Self {
            config: result.config,
            elapsed_ns: result.elapsed_ns,
            queries_per_second: result.queries_per_second,
            total_wait_ns: result.total_wait_ns(),
            total_crack_ns: result.total_crack_ns(),
            prng: PRNG_NAME.to_string(),
            column_file: column_file.map(|p| p.display().to_string()),
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.config;
        let mut out = vec![
            ("tuples", c.n_tuples.to_string()),
            ("method", c.method.to_string()),
            ("latch", c.latching.to_string()),
            ("policy", c.policy.to_string()),
            ("clients", c.clients.to_string()),
            ("queries", c.total_queries.to_string()),
            ("selectivity", c.selectivity.to_string()),
            ("agg", c.agg.to_string()),
            ("seed", c.seed.to_string()),
            ("run_capacity", c.run_capacity.map_or("default".into(), |v| v.to_string())),
            ("elapsed_ns", self.elapsed_ns.to_string()),
            ("queries_per_second", format!("{:.3}", self.queries_per_second)),
            ("total_wait_ns", self.total_wait_ns.to_string()),
            ("total_crack_ns", self.total_crack_ns.to_string()),
            ("prng", self.prng.clone()),
        ];
        if let Some(f) = &self.column_file {
            out.push(("column_file", f.clone()));
        }
        out
    }

    fn from_entries(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            map.get(key)
                .map(String::as_str)
                .ok_or_else(|| anyhow!("metadata line '# {key}=...' is missing"))
        }
        fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let raw = get(map, key)?;
            raw.parse()
                .map_err(|e| anyhow!("metadata '{key}={raw}' does not parse: {e}"))
        }
        let run_capacity = match get(map, "run_capacity")? {
            "default" => None,
            _ => Some(parse(map, "run_capacity")?),
        };
        Ok(Self {
            config: ExperimentConfig {
                n_tuples: parse(map, "tuples")?,
                method: parse(map, "method")?,
                latching: parse(map, "latch")?,
                policy: parse(map, "policy")?,
                clients: parse(map, "clients")?,
                total_queries: parse(map, "queries")?,
                selectivity: parse(map, "selectivity")?,
                agg: parse(map, "agg")?,
                seed: parse(map, "seed")?,
                run_capacity,
            },
            elapsed_ns: parse(map, "elapsed_ns")?,
            queries_per_second: parse(map, "queries_per_second")?,
            total_wait_ns: parse(map, "total_wait_ns")?,
            total_crack_ns: parse(map, "total_crack_ns")?,
            prng: get(map, "prng")?.to_string(),
            column_file: map.get("column_file").cloned(),
        })
    }
}

/// A parsed result file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub meta: RunMeta,
    pub rows: Vec<QueryMetrics>,
}

impl RunFile {
    pub fn label(&self) -> String {
        let c = &self.meta.config;
        format!("{} ({} latches)", c.method, c.latching)
    }
}

pub fn write_csv<W: Write>(out: W, meta: &RunMeta, rows: &[QueryMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for m in rows {
        w.write_record([
            m.seq.to_string(),
            m.client_id.to_string(),
            m.response_ns.to_string(),
            m.wait_ns.to_string(),
            m.crack_ns.to_string(),
            m.result.to_string(),
        ])?;
    }
    let mut out = w.into_inner().map_err(|e| anyhow!("flushing CSV rows: {}", e.error()))?;
    for (k, v) in meta.entries() {
        writeln!(out, "# {k}={v}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv(result: &ExperimentResult, column_file: Option<&Path>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(std::io::BufWriter::new(file), &RunMeta::from_result(result, column_file), &result.metrics)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn parse_csv<R: Read>(mut input: R) -> Result<RunFile> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| anyhow!("metadata line '{line}' is not key=value"))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        bail!("unexpected header {:?}, expected {}", header, HEADER.join(","));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> Result<&str> {
            rec.get(j)
                .ok_or_else(|| anyhow!("row {} has {} fields, expected 6", i + 1, rec.len()))
        };
        let num = |j: usize| -> Result<u64> {
            field(j)?
                .parse()
                .with_context(|| format!("row {} column {}", i + 1, HEADER[j]))
        };
        if rec.len() != HEADER.len() {
            bail!("row {} has {} fields, expected 6", i + 1, rec.len());
        }
        rows.push(QueryMetrics {
            seq: num(0)?,
            client_id: num(1)?
                .try_into()
                .with_context(|| format!("row {} client", i + 1))?,
            response_ns: num(2)?,
            wait_ns: num(3)?,
            crack_ns: num(4)?,
            result: field(5)?
                .parse()
                .with_context(|| format!("row {} column result", i + 1))?,
            completed_ns: 0,
        });
    }
    Ok(RunFile {
        meta: RunMeta::from_entries(&meta)?,
        rows,
    })
}

pub fn read_csv(path: &Path) -> Result<RunFile> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_csv(f).with_context(|| format!("parsing {}", path.display()))
}
