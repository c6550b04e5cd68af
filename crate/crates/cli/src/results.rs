//! Results CSV: one row per (model, deviation kind, p).

use std::path::Path;

use faultlab_core::experiment::ResultRow;
use faultlab_core::fault::DeviationKind;
use faultlab_core::{Architecture, ModelSpec, Pooling};

use crate::error::{CliError, Result};

pub const HEADER: [&str; 14] = [
    "model_id",
    "kind",
    "p",
    "realizations",
    "mean_error",
    "ci95",
    "n_params",
    "L",
    "N",
    "C",
    "P",
    "F",
    "pool",
    "seed",
];

/// Output order: kind, p, model size, then id.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(a.p.total_cmp(&b.p))
            .then(a.n_params.cmp(&b.n_params))
            .then(a.model_id.cmp(&b.model_id))
    });
}

fn fields(row: &ResultRow) -> [String; 14] {
    let blank = String::new;
    let (l, n, c, p, f, pool) = match *row.spec.arch() {
        Architecture::Mlp { layers, neurons } => (layers.to_string(), neurons.to_string(), blank(), blank(), blank(), blank()),
        Architecture::Cnn {
            layers,
            kernel,
            pool_size,
            feature_maps,
            pooling,
            ..
        } => (
            layers.to_string(),
            blank(),
            kernel.to_string(),
            pool_size.to_string(),
            feature_maps.to_string(),
            pooling.to_string(),
        ),
    };
    [
        row.model_id.clone(),
        row.kind.to_string(),
        row.p.to_string(),
        row.realizations.to_string(),
        row.mean_error.to_string(),
        row.ci95.to_string(),
        row.n_params.to_string(),
        l,
        n,
        c,
        p,
        f,
        pool,
        row.seed.to_string(),
    ]
}

/// Rows rendered in the given order. Floats use Rust's shortest
/// round-trip formatting, so output is byte-stable.
pub fn to_csv(rows: &[ResultRow]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for row in rows {
        w.write_record(fields(row)).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_results(&bytes, path)
}

pub fn parse_results(bytes: &[u8], origin: &Path) -> Result<Vec<ResultRow>> {
    let err = |line: u64, message: String| CliError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut records = r.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| err(1, e.to_string()))?,
        None => return Err(err(1, "empty file".into())),
    };
    if header.iter().ne(HEADER) {
        return Err(err(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(parse_row(&rec).map_err(|m| err(line, m))?);
    }
    Ok(rows)
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<ResultRow, String> {
    let get = |i: usize| rec.get(i).unwrap_or("");
    fn num<T: std::str::FromStr>(name: &str, v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("bad {name} `{v}`"))
    }
    let kind: DeviationKind = num("kind", get(1))?;
    let p: f64 = num("p", get(2))?;
    let mean_error: f64 = num("mean_error", get(4))?;
    let ci95: f64 = num("ci95", get(5))?;
    for (name, v) in [("p", p), ("mean_error", mean_error)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} {v} outside [0, 1]"));
        }
    }
    if !(ci95 >= 0.0 && ci95.is_finite()) {
        return Err(format!("bad ci95 `{}`", get(5)));
    }
    let layers: usize = num("L", get(7))?;
    let spec = if get(8).is_empty() {
        let pooling: Pooling = num("pool", get(12))?;
        ModelSpec::cnn(layers, num("C", get(9))?, num("P", get(10))?, num("F", get(11))?, pooling)
    } else {
        ModelSpec::mlp(layers, num("N", get(8))?)
    }
    .map_err(|e| e.to_string())?;
    let model_id = get(0).to_string();
    if model_id.is_empty() {
        return Err("empty model_id".into());
    }
    Ok(ResultRow {
        model_id,
        spec,
        n_params: num("n_params", get(6))?,
        kind,
        p,
        realizations: num("realizations", get(3))?,
        mean_error,
        ci95,
        seed: num("seed", get(13))?,
    })
}
