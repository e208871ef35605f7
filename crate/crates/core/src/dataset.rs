//! CSV ingestion and atomic file output.
//!
//! Datasets are one row per timestep with a header `d0,d1,...,d{n-1}[,label]`.
//! An empty cell is a missing value.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::SensorFrame;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, bool)> {
    let mut dims = 0;
    let mut has_label = false;
    for (i, name) in header.iter().enumerate() {
        let name = name.trim();
        if name == "label" {
            if i + 1 != header.len() {
                return Err(Error::Data("the label column must come last".into()));
            }
            has_label = true;
        } else if name == format!("d{dims}") {
            dims += 1;
        } else {
            return Err(Error::Data(format!("unexpected column `{name}` at position {i}, expected `d{dims}`")));
        }
    }
    if dims == 0 {
        return Err(Error::Data("dataset has no sensor columns".into()));
    }
    Ok((dims, has_label))
}

/// Parses a dataset from any reader.
pub fn read_frame<R: std::io::Read>(reader: R) -> Result<SensorFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let (dims, has_label) = parse_header(rdr.headers()?)?;
    let mut values = Vec::new();
    let mut labels = has_label.then(Vec::new);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for d in 0..dims {
            let cell = rec.get(d).unwrap_or("").trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {}: `{cell}` in d{d} is not a number", row + 1)))?
            };
            if v.is_infinite() {
                return Err(Error::Data(format!("row {}: infinite value in d{d}", row + 1)));
            }
            values.push(v);
        }
        if let Some(labels) = labels.as_mut() {
            let cell = rec.get(dims).unwrap_or("").trim();
            let l = cell
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("row {}: label `{cell}` is not a non-negative integer", row + 1)))?;
            labels.push(l);
        }
    }
    if values.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    SensorFrame::new(values, dims, labels)
}

pub fn read_frame_csv(path: &Path) -> Result<SensorFrame> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open dataset `{}`: {e}", path.display())))?;
    read_frame(std::io::BufReader::new(file))
}

/// Serializes `frame` in the dataset CSV layout. Missing values become empty cells.
pub fn frame_to_csv(frame: &SensorFrame) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..frame.dims()).map(|d| format!("d{d}")).collect();
    if frame.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for t in 0..frame.timesteps() {
        row.clear();
        for d in 0..frame.dims() {
            let v = frame.values()[t * frame.dims() + d];
            row.push(if v.is_nan() { String::new() } else { v.to_string() });
        }
        if let Some(l) = frame.labels() {
            row.push(l[t].to_string());
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_frame_csv(frame: &SensorFrame, path: &Path) -> Result<()> {
    write_atomic(path, &frame_to_csv(frame)?)
}
