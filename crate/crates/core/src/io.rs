//! CSV encoding of datasets and fitted curves.
//!
//! The header selects the dataset kind:
//!
//! | header            | dataset                         |
//! |-------------------|---------------------------------|
//! | `x,y`             | regression / quantile           |
//! | `x`               | density sample                  |
//! | `x,time,event`    | censored survival (`event` 0/1) |
//! | `lambda,I`        | periodogram (T inferred)        |

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::models::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Xy,
    Points,
    Survival,
    Periodogram,
}

fn layout(header: &csv::StringRecord) -> Result<Layout> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    match cols.as_slice() {
        ["x", "y"] => Ok(Layout::Xy),
        ["x"] => Ok(Layout::Points),
        ["x", "time", "event"] => Ok(Layout::Survival),
        ["lambda", "I"] => Ok(Layout::Periodogram),
        _ => Err(Error::Parse {
            line: 1,
            msg: format!("unrecognized header {:?}; expected x,y | x | x,time,event | lambda,I", cols.join(",")),
        }),
    }
}

fn field_f64(rec: &csv::StringRecord, i: usize, line: usize) -> Result<f64> {
    let raw = rec.get(i).unwrap_or("").trim();
    let v: f64 = raw.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("column {} is not a number: {raw:?}", i + 1),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("column {} is not finite", i + 1),
        });
    }
    Ok(v)
}

fn field_bool(rec: &csv::StringRecord, i: usize, line: usize) -> Result<bool> {
    match rec.get(i).unwrap_or("").trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        raw => Err(Error::Parse {
            line,
            msg: format!("event indicator must be 0 or 1, got {raw:?}"),
        }),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            msg: format!("expected {expected_len} fields, found {len}"),
        },
        csv::ErrorKind::Utf8 { .. } => Error::Parse {
            line,
            msg: "invalid UTF-8".into(),
        },
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Reads a dataset, choosing its kind from the header row.
pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let kind = layout(&header)?;
    let mut cols: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut events = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        match kind {
            Layout::Points => cols[0].push(field_f64(&rec, 0, line)?),
            Layout::Xy | Layout::Periodogram => {
                cols[0].push(field_f64(&rec, 0, line)?);
                cols[1].push(field_f64(&rec, 1, line)?);
            }
            Layout::Survival => {
                cols[0].push(field_f64(&rec, 0, line)?);
                let t = field_f64(&rec, 1, line)?;
                if t < 0.0 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("negative time {t}"),
                    });
                }
                cols[1].push(t);
                events.push(field_bool(&rec, 2, line)?);
            }
        }
    }
    let [a, b] = cols;
    if a.is_empty() {
        return Err(Error::EmptySample);
    }
    match kind {
        Layout::Xy => Ok(Dataset::XY { x: a, y: b }),
        Layout::Points => Ok(Dataset::Points { x: a }),
        Layout::Survival => Ok(Dataset::Survival {
            x: a,
            time: b,
            event: events,
        }),
        Layout::Periodogram => Dataset::periodogram_infer(a, b),
    }
}

pub fn parse_dataset_csv(text: &str) -> Result<Dataset> {
    read_dataset(text.as_bytes())
}

/// Writes a dataset in the layout [`read_dataset`] accepts. Values use the
/// shortest representation that round-trips exactly.
pub fn write_dataset<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let e = |e: csv::Error| csv_error(e);
    match data {
        Dataset::XY { x, y } => {
            w.write_record(["x", "y"]).map_err(e)?;
            for (a, b) in x.iter().zip(y) {
                w.write_record([a.to_string(), b.to_string()]).map_err(e)?;
            }
        }
        Dataset::Points { x } => {
            w.write_record(["x"]).map_err(e)?;
            for a in x {
                w.write_record([a.to_string()]).map_err(e)?;
            }
        }
        Dataset::Survival { x, time, event } => {
            w.write_record(["x", "time", "event"]).map_err(e)?;
            for ((a, t), d) in x.iter().zip(time).zip(event) {
                w.write_record([a.to_string(), t.to_string(), u8::from(*d).to_string()]).map_err(e)?;
            }
        }
        Dataset::Periodogram { lambda, value, .. } => {
            w.write_record(["lambda", "I"]).map_err(e)?;
            for (a, b) in lambda.iter().zip(value) {
                w.write_record([a.to_string(), b.to_string()]).map_err(e)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `x,eta_hat` rows.
pub fn write_curve<W: Write>(xs: &[f64], values: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "eta_hat"]).map_err(csv_error)?;
    for (a, b) in xs.iter().zip(values) {
        w.write_record([a.to_string(), b.to_string()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
