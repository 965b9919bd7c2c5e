//! Serialization of instances and result tables.
//!
//! Instances: a JSON document `{config, X, beta0, eps, y}` with `X` row-major
//! and every real printed with 17 significant digits, or a little-endian
//! binary container for large `p`. Tables: CSV, or JSON with one object per
//! CSV row.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Instance, ModelConfig};

fn fmt_real(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::Format(format!("cannot serialize non-finite value {v}")));
    }
    Ok(format!("{v:.16e}"))
}

fn fmt_vec(out: &mut String, v: impl Iterator<Item = f64>) -> Result<()> {
    out.push('[');
    for (i, x) in v.enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_real(x)?);
    }
    out.push(']');
    Ok(())
}

pub fn instance_to_json(instance: &Instance) -> Result<String> {
    let c = &instance.config;
    let mut s = String::new();
    s.push_str(&format!("{{\"config\":{{\"p\":{},\"n\":{},\"delta\":{},\"seed\":{}}},\"X\":[", c.p, c.n, fmt_real(c.delta)?, c.seed));
    for i in 0..instance.n() {
        if i > 0 {
            s.push(',');
        }
        fmt_vec(&mut s, instance.x.row(i).iter().copied())?;
    }
    s.push_str("],\"beta0\":");
    fmt_vec(&mut s, instance.beta0.iter().copied())?;
    s.push_str(",\"eps\":");
    fmt_vec(&mut s, instance.eps.iter().copied())?;
    s.push_str(",\"y\":");
    fmt_vec(&mut s, instance.y.iter().copied())?;
    s.push('}');
    Ok(s)
}

#[derive(Deserialize)]
struct InstanceDoc {
    config: ModelConfig,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    beta0: Vec<f64>,
    eps: Vec<f64>,
    y: Vec<f64>,
}

/// Parse an instance document; `y` must equal `Xβ₀ + ε` to `1e-12` relative.
pub fn instance_from_json(text: &str) -> Result<Instance> {
    let doc: InstanceDoc = serde_json::from_str(text)?;
    let (p, n) = (doc.config.p, doc.config.n);
    if doc.x.len() != n || doc.x.iter().any(|r| r.len() != p) {
        return Err(Error::Format(format!("X must be {n} rows of {p} entries")));
    }
    if doc.beta0.len() != p || doc.eps.len() != n || doc.y.len() != n {
        return Err(Error::Format("beta0, eps or y has the wrong length".into()));
    }
    let x = DMatrix::from_fn(n, p, |i, j| doc.x[i][j]);
    let inst = Instance::from_parts(doc.config, x, DVector::from_vec(doc.beta0), DVector::from_vec(doc.eps))?;
    check_y(&inst, &DVector::from_vec(doc.y))?;
    Ok(inst)
}

fn check_y(inst: &Instance, y: &DVector<f64>) -> Result<()> {
    let scale = y.amax().max(1.0);
    let err = (&inst.y - y).amax();
    if err > 1e-12 * scale {
        return Err(Error::Format(format!("stored y disagrees with Xβ₀ + ε by {err:.3e}")));
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"TAPSPH01";

/// Binary layout (little endian): magic, `p`, `n`, `seed` as `u64`, `delta`,
/// then `X` row-major, `β₀`, `ε`, `y` as `f64`.
pub fn write_instance_binary<W: Write>(instance: &Instance, mut w: W) -> Result<()> {
    let c = &instance.config;
    w.write_all(MAGIC)?;
    for v in [c.p as u64, c.n as u64, c.seed] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.delta.to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * (c.n * c.p + c.p + 2 * c.n));
    for i in 0..c.n {
        for j in 0..c.p {
            buf.extend_from_slice(&instance.x[(i, j)].to_le_bytes());
        }
    }
    for v in instance.beta0.iter().chain(instance.eps.iter()).chain(instance.y.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_instance_binary<R: Read>(mut r: R) -> Result<Instance> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tapsphere binary instance".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let p = u64::from_le_bytes(next(&mut r)?) as usize;
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let seed = u64::from_le_bytes(next(&mut r)?);
    let delta = f64::from_le_bytes(next(&mut r)?);
    let config = ModelConfig::new(p, n, delta, seed)?;
    let mut reals = |count: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; 8 * count];
        r.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
    };
    let xs = reals(n * p)?;
    let x = DMatrix::from_row_slice(n, p, &xs);
    let beta0 = DVector::from_vec(reals(p)?);
    let eps = DVector::from_vec(reals(n)?);
    let y = DVector::from_vec(reals(n)?);
    let inst = Instance::from_parts(config, x, beta0, eps)?;
    check_y(&inst, &y)?;
    Ok(inst)
}

/// One table cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Empty,
    Int(i64),
    Real(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Real(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    /// CSV text. Reals use the shortest representation that round-trips.
    pub fn to_text(&self) -> String {
        match self {
            Cell::Empty => String::new(),
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{v:?}"),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Cell::Empty => Value::Null,
            Cell::Int(v) => Value::from(*v),
            Cell::Real(v) => serde_json::Number::from_f64(*v).map(Value::Number).unwrap_or(Value::Null),
            Cell::Text(s) => Value::from(s.clone()),
            Cell::Bool(b) => Value::from(*b),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        // seeds are shown as unsigned text so they never wrap
        Cell::Text(v.to_string())
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}
impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map(Into::into).unwrap_or(Cell::Empty)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::InvalidArgument(format!("unknown format '{s}' (expected csv or json)"))),
        }
    }
}

/// Streaming writer for a fixed set of columns.
pub struct TableWriter<W: Write> {
    columns: Vec<String>,
    format: Format,
    out: W,
    rows: usize,
}

impl<W: Write> TableWriter<W> {
    pub fn new(columns: Vec<String>, format: Format, mut out: W) -> Result<Self> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&columns).map_err(csv_err)?;
                out.write_all(&w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
            }
            Format::Json => out.write_all(b"[")?,
        }
        Ok(TableWriter { columns, format, out, rows: 0 })
    }

    pub fn write_row(&mut self, row: &[Cell]) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Format(format!("row has {} cells, table has {} columns", row.len(), self.columns.len())));
        }
        match self.format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(row.iter().map(Cell::to_text)).map_err(csv_err)?;
                self.out.write_all(&w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
            }
            Format::Json => {
                let obj: serde_json::Map<String, Value> = self.columns.iter().cloned().zip(row.iter().map(Cell::to_json)).collect();
                let sep = if self.rows == 0 { "\n" } else { ",\n" };
                self.out.write_all(sep.as_bytes())?;
                serde_json::to_writer(&mut self.out, &obj)?;
            }
        }
        self.rows += 1;
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.format == Format::Json {
            self.out.write_all(b"\n]\n")?;
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// An in-memory table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of a column as reals (non-numeric cells are skipped).
    pub fn reals(&self, name: &str) -> Vec<f64> {
        match self.column(name) {
            Some(j) => self.rows.iter().filter_map(|r| r[j].as_f64()).collect(),
            None => Vec::new(),
        }
    }

    pub fn write<W: Write>(&self, format: Format, out: W) -> Result<W> {
        let mut w = TableWriter::new(self.columns.clone(), format, out)?;
        for r in &self.rows {
            w.write_row(r)?;
        }
        w.finish()
    }

    pub fn to_bytes(&self, format: Format) -> Result<Vec<u8>> {
        self.write(format, Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_instance;

    #[test]
    fn json_round_trip_is_exact() {
        let i = generate_instance(&ModelConfig::new(5, 7, 0.5, 3).unwrap()).unwrap();
        let back = instance_from_json(&instance_to_json(&i).unwrap()).unwrap();
        assert_eq!(back.x, i.x);
        assert_eq!(back.beta0, i.beta0);
        assert_eq!(back.y, i.y);
        assert_eq!(back.config, i.config);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let i = generate_instance(&ModelConfig::new(6, 4, 2.0, 9).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_instance_binary(&i, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 32 + 8 * (24 + 6 + 8));
        let back = read_instance_binary(buf.as_slice()).unwrap();
        assert_eq!(back.x, i.x);
        assert_eq!(back.eps, i.eps);
        buf[0] = b'X';
        assert!(read_instance_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn tampered_y_is_rejected() {
        let i = generate_instance(&ModelConfig::new(3, 3, 1.0, 1).unwrap()).unwrap();
        let text = instance_to_json(&i).unwrap();
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["y"][0] = Value::from(1e3);
        assert!(instance_from_json(&v.to_string()).is_err());
    }

    #[test]
    fn table_formats_mirror_each_other() {
        let mut t = Table::new(&["p", "value", "note"]);
        t.rows.push(vec![Cell::from(3usize), Cell::from(0.1), Cell::from("a,b")]);
        t.rows.push(vec![Cell::from(4usize), Cell::Empty, Cell::from(true)]);
        let csv = String::from_utf8(t.to_bytes(Format::Csv).unwrap()).unwrap();
        assert_eq!(csv, "p,value,note\n3,0.1,\"a,b\"\n4,,true\n");
        let json: Value = serde_json::from_slice(&t.to_bytes(Format::Json).unwrap()).unwrap();
        assert_eq!(json.as_array().unwrap().len(), 2);
        assert_eq!(json[0]["value"], Value::from(0.1));
        assert!(json[1]["value"].is_null());
    }
}
