//! One CSV row per training run.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

const HEAD: [&str; 9] = [
    "run_id",
    "world",
    "scenario",
    "beta",
    "temperature_init",
    "temperature_trainable",
    "temperature_final",
    "depth",
    "seed",
];
const TAIL: [&str; 8] = [
    "urr_mean",
    "cka",
    "mi_essence",
    "essence_accuracy",
    "loss_final",
    "wall_seconds",
    "status",
    "error",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Failed,
}

impl RunStatus {
    fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub run_id: String,
    pub world: String,
    /// Withheld factor names joined with `+`.
    pub scenario: String,
    pub beta: f64,
    pub temperature_init: f64,
    pub temperature_trainable: bool,
    pub temperature_final: f64,
    pub depth: usize,
    pub seed: u64,
    /// One entry per world factor; `None` for provided factors.
    pub urr: Vec<(String, Option<f64>)>,
    pub urr_mean: f64,
    pub cka: f64,
    pub mi_essence: f64,
    pub essence_accuracy: f64,
    pub loss_final: f64,
    pub wall_seconds: f64,
    pub status: RunStatus,
    pub error: String,
}

/// Header for a world with the given factor names.
pub fn columns(factors: &[String]) -> Vec<String> {
    HEAD.iter()
        .map(|s| s.to_string())
        .chain(factors.iter().map(|f| format!("urr_{f}")))
        .chain(TAIL.iter().map(|s| s.to_string()))
        .collect()
}

fn float(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn parse_float(s: &str, col: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::config(format!("column {col}: bad number {s:?}")))
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn factors(&self) -> Vec<String> {
        self.urr.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn urr_of(&self, factor: &str) -> Option<f64> {
        self.urr.iter().find(|(n, _)| n == factor).and_then(|(_, v)| *v)
    }

    pub fn to_record(&self) -> Vec<String> {
        let mut r = vec![
            self.run_id.clone(),
            self.world.clone(),
            self.scenario.clone(),
            float(self.beta),
            float(self.temperature_init),
            u8::from(self.temperature_trainable).to_string(),
            float(self.temperature_final),
            self.depth.to_string(),
            self.seed.to_string(),
        ];
        r.extend(self.urr.iter().map(|(_, v)| v.map(float).unwrap_or_default()));
        r.extend([
            float(self.urr_mean),
            float(self.cka),
            float(self.mi_essence),
            float(self.essence_accuracy),
            float(self.loss_final),
            float(self.wall_seconds),
            self.status.as_str().to_string(),
            self.error.clone(),
        ]);
        r
    }

    fn from_record(factors: &[String], rec: &csv::StringRecord) -> Result<Self> {
        let want = HEAD.len() + factors.len() + TAIL.len();
        if rec.len() != want {
            return Err(Error::config(format!("row has {} fields, header has {want}", rec.len())));
        }
        let get = |i: usize| rec.get(i).unwrap_or_default();
        let f = |i: usize, name: &str| parse_float(get(i), name);
        let k = HEAD.len() + factors.len();
        let urr = factors
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let s = get(HEAD.len() + j);
                let v = if s.is_empty() { None } else { Some(parse_float(s, name)?) };
                Ok((name.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        let status = match get(k + 6) {
            "ok" => RunStatus::Ok,
            "failed" => RunStatus::Failed,
            other => return Err(Error::config(format!("unknown status {other:?}"))),
        };
        Ok(Self {
            run_id: get(0).to_string(),
            world: get(1).to_string(),
            scenario: get(2).to_string(),
            beta: f(3, "beta")?,
            temperature_init: f(4, "temperature_init")?,
            temperature_trainable: get(5) == "1",
            temperature_final: f(6, "temperature_final")?,
            depth: get(7)
                .parse()
                .map_err(|_| Error::config(format!("bad depth {:?}", get(7))))?,
            seed: get(8)
                .parse()
                .map_err(|_| Error::config(format!("bad seed {:?}", get(8))))?,
            urr,
            urr_mean: f(k, "urr_mean")?,
            cka: f(k + 1, "cka")?,
            mi_essence: f(k + 2, "mi_essence")?,
            essence_accuracy: f(k + 3, "essence_accuracy")?,
            loss_final: f(k + 4, "loss_final")?,
            wall_seconds: f(k + 5, "wall_seconds")?,
            status,
            error: get(k + 7).to_string(),
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::config(format!("csv: {other:?}")),
    }
}

/// Factor names encoded in a header, or an error if the header does not
/// follow the row schema.
pub fn factors_from_header(header: &csv::StringRecord) -> Result<Vec<String>> {
    let cols: Vec<&str> = header.iter().collect();
    let n = cols.len();
    let ok = n >= HEAD.len() + TAIL.len()
        && cols[..HEAD.len()] == HEAD
        && cols[n - TAIL.len()..] == TAIL
        && cols[HEAD.len()..n - TAIL.len()].iter().all(|c| c.starts_with("urr_"));
    if !ok {
        return Err(Error::config(format!("unexpected CSV header: {}", cols.join(","))));
    }
    Ok(cols[HEAD.len()..n - TAIL.len()]
        .iter()
        .map(|c| c["urr_".len()..].to_string())
        .collect())
}

/// Reads every row of a runs file, returning the factor names and rows.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<SweepRow>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_error)?;
    let factors = factors_from_header(rdr.headers().map_err(csv_error)?)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(SweepRow::from_record(&factors, &rec.map_err(csv_error)?)?);
    }
    Ok((factors, rows))
}

/// Appends rows to a runs file, writing the header first if the file is
/// new and checking it otherwise.
pub struct RowWriter {
    inner: csv::Writer<File>,
}

impl RowWriter {
    pub fn open(path: &Path, factors: &[String]) -> Result<Self> {
        let header = columns(factors);
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        if exists {
            let mut first = String::new();
            BufReader::new(File::open(path)?).read_line(&mut first)?;
            let found = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(first.as_bytes())
                .records()
                .next()
                .transpose()
                .map_err(csv_error)?
                .unwrap_or_default();
            if found.iter().ne(header.iter().map(String::as_str)) {
                return Err(Error::config(format!(
                    "{} has a different header; refusing to append",
                    path.display()
                )));
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            inner.write_record(&header).map_err(csv_error)?;
            inner.flush()?;
        }
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &SweepRow) -> Result<()> {
        self.inner.write_record(row.to_record()).map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Writes a small table (header plus rows) to `path`.
pub fn write_table<W: Write>(out: W, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
