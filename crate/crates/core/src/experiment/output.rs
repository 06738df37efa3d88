use std::cmp::Ordering;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::OutputFormat;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "kind,N,M,c,d,metric,value,stderr,config_hash,timestamp";

/// One measured quantity at one grid cell. Coordinates that do not apply
/// (e.g. `M` for a minimizer gap, `N` for a fitted slope) are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: String,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub c: usize,
    pub d: usize,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub config_hash: String,
    pub timestamp: String,
}

impl ResultRow {
    fn sort_key(&self) -> (&str, usize, Option<usize>, Option<usize>, usize, &str) {
        (&self.kind, self.c, self.n, self.m, self.d, &self.metric)
    }
}

/// Deterministic emission order: kind, c, N, M, d, metric, then value.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.sort_key()
            .cmp(&b.sort_key())
            .then_with(|| a.value.partial_cmp(&b.value).unwrap_or(Ordering::Equal))
    });
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_fields(row: &ResultRow) -> [String; 10] {
    [
        row.kind.clone(),
        fmt_opt(row.n),
        fmt_opt(row.m),
        row.c.to_string(),
        row.d.to_string(),
        row.metric.clone(),
        fmt_float(row.value),
        row.stderr.map(fmt_float).unwrap_or_default(),
        row.config_hash.clone(),
        row.timestamp.clone(),
    ]
}

/// Writes rows; with `header` the CSV header goes first. JSONL has no header.
pub fn write_rows<W: Write>(out: W, rows: &[ResultRow], format: OutputFormat, header: bool) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            if header {
                w.write_record(CSV_HEADER.split(','))?;
            }
            for row in rows {
                w.write_record(csv_fields(row))?;
            }
            w.flush()?;
        }
        OutputFormat::Jsonl => {
            let mut out = out;
            for row in rows {
                serde_json::to_writer(&mut out, row)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// Writes `rows` to `path`. When appending to a non-empty CSV file the header
/// is not repeated.
pub fn emit_results(rows: &[ResultRow], path: &Path, format: OutputFormat, append: bool) -> Result<()> {
    let has_content = append && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    write_rows(std::io::BufWriter::new(file), rows, format, !has_content)
}

fn parse_opt<T: std::str::FromStr>(s: &str, what: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::InvalidArgument(format!("cannot parse {what} from {s:?}")))
}

fn parse_req<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    parse_opt(s, what)?.ok_or_else(|| Error::InvalidArgument(format!("missing {what}")))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidArgument(format!("unexpected header {:?}", header.join(","))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        rows.push(ResultRow {
            kind: f(0).to_string(),
            n: parse_opt(f(1), "N")?,
            m: parse_opt(f(2), "M")?,
            c: parse_req(f(3), "c")?,
            d: parse_req(f(4), "d")?,
            metric: f(5).to_string(),
            value: parse_req(f(6), "value")?,
            stderr: parse_opt(f(7), "stderr")?,
            config_hash: f(8).to_string(),
            timestamp: f(9).to_string(),
        });
    }
    Ok(rows)
}

pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

pub fn read_rows(path: &Path, format: OutputFormat) -> Result<Vec<ResultRow>> {
    let file = std::fs::File::open(path)?;
    match format {
        OutputFormat::Csv => read_csv(file),
        OutputFormat::Jsonl => read_jsonl(file),
    }
}
