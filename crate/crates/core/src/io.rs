//! CSV and JSON plumbing shared by every stage.
//!
//! CSV outputs begin with a `# config_hash: <hex>` comment line; readers skip
//! `#` lines, so files stay loadable by ordinary CSV tools that honour
//! comments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HASH_PREFIX: &str = "# config_hash: ";

fn reader_builder() -> csv::ReaderBuilder {
    let mut b = csv::ReaderBuilder::new();
    b.comment(Some(b'#')).trim(csv::Trim::All);
    b
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads every row of a headed CSV file into `T`.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(BufReader::new(file), path)
}

pub fn read_csv_from<T: DeserializeOwned, R: Read>(reader: R, path: &Path) -> Result<Vec<T>> {
    let mut rdr = reader_builder().from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                let row = record
                    .deserialize(Some(&headers))
                    .map_err(|e| parse_error(path, line, csv_message(&e)))?;
                out.push(row);
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(parse_error(path, line, csv_message(&e)));
            }
        }
    }
    Ok(out)
}

fn csv_message(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => match err.field() {
            Some(f) => format!("field {}: {}", f + 1, err.kind()),
            None => err.kind().to_string(),
        },
        _ => e.to_string(),
    }
}

/// Returns the config hash recorded in a CSV header comment, if any.
pub fn read_config_hash(path: &Path) -> Result<Option<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    std::io::BufRead::read_line(&mut BufReader::new(file), &mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(first
        .trim_end()
        .strip_prefix(HASH_PREFIX)
        .map(|h| h.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], config_hash: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    if let Some(h) = config_hash {
        writeln!(buf, "{HASH_PREFIX}{h}").map_err(|e| Error::io(path, e))?;
    }
    write_csv_rows(&mut buf, rows).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    buf.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv_rows<T: Serialize, W: Write>(w: W, rows: &[T]) -> std::result::Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a CSV whose columns are only known at run time.
pub fn write_table(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
    config_hash: Option<&str>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    if let Some(h) = config_hash {
        writeln!(buf, "{HASH_PREFIX}{h}").map_err(|e| Error::io(path, e))?;
    }
    let mut wtr = csv::Writer::from_writer(&mut buf);
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    wtr.write_record(header).map_err(err)?;
    for r in rows {
        wtr.write_record(&r).map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    drop(wtr);
    buf.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headed numeric CSV as (header, rows).
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = reader_builder().from_reader(BufReader::new(file));
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec
            .iter()
            .enumerate()
            .map(|(k, s)| {
                s.parse::<f64>()
                    .map_err(|_| parse_error(path, line, format!("field {}: not a number: {s:?}", k + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(parse_error(path, line, "row length differs from header"));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line() as u64, e.to_string()))
}

/// Key under which JSON artifacts record the configuration hash.
pub const HASH_KEY: &str = "config_hash";

/// Writes `value`, which must serialize to an object, with a leading
/// `config_hash` member.
pub fn write_json_hashed<T: Serialize>(path: &Path, value: &T, hash: &str) -> Result<()> {
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let body = match serde_json::to_value(value).map_err(|e| bad(e.to_string()))? {
        serde_json::Value::Object(m) => m,
        _ => return Err(bad("expected a JSON object".into())),
    };
    let mut out = serde_json::Map::new();
    out.insert(HASH_KEY.into(), serde_json::Value::String(hash.into()));
    out.extend(body);
    write_json(path, &serde_json::Value::Object(out))
}

/// Reads a document written by [`write_json_hashed`], returning the value
/// and the recorded hash.
pub fn read_json_hashed<T: DeserializeOwned>(path: &Path) -> Result<(T, Option<String>)> {
    let mut v: serde_json::Value = read_json(path)?;
    let hash = v
        .as_object_mut()
        .and_then(|m| m.remove(HASH_KEY))
        .and_then(|h| h.as_str().map(str::to_string));
    let value = serde_json::from_value(v).map_err(|e| parse_error(path, 0, e.to_string()))?;
    Ok((value, hash))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Shortest round-trip decimal form of a float.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
