//! Numeric formatting and file emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::{Number, Value};

use securelat_core::RunTrace;

use crate::CliError;

pub const SIG_DIGITS: usize = 12;

/// Decimal text with at most twelve significant digits.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{:.*e}", SIG_DIGITS - 1, x).parse().unwrap_or(x);
    if rounded == 0.0 {
        return "0".into();
    }
    let mag = rounded.abs();
    if (1e-6..1e15).contains(&mag) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

fn num_value(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    Number::from_str(&fmt_num(x)).map(Value::Number).unwrap_or(Value::Null)
}

/// Rewrites every float in `v` to twelve significant digits.
pub fn round_numbers(v: &mut Value) {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(x) = n.as_f64() {
                *v = num_value(x);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_numbers),
        Value::Object(map) => map.values_mut().for_each(round_numbers),
        _ => {}
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    round_numbers(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut f = fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Writes to a temporary name and renames, so a present manifest means a finished run.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
    let tmp = format!(".{name}.partial");
    write_file(dir, &tmp, contents)?;
    let path = dir.join(name);
    fs::rename(dir.join(&tmp), &path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

pub const DATASET_HEADER: [&str; 6] = ["t", "e_d", "e_d_dot", "e_phi", "e_phi_dot", "u"];
pub const TRACE_HEADER: [&str; 12] = [
    "t", "e_d", "e_d_dot", "e_phi", "e_phi_dot", "u", "alpha_att", "alpha_hat", "S", "triggered", "delay_steps", "V_lkf",
];

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn dataset_csv(dt: f64, states: &[Vec<f64>], inputs: &[f64]) -> Result<Vec<u8>, CliError> {
    let rows = states.iter().zip(inputs).enumerate().map(|(k, (x, u))| {
        let mut r = vec![fmt_num(k as f64 * dt)];
        r.extend(x.iter().map(|v| fmt_num(*v)));
        r.push(fmt_num(*u));
        r
    });
    csv_bytes(&DATASET_HEADER, rows)
}

pub fn trace_csv(trace: &RunTrace) -> Result<Vec<u8>, CliError> {
    let rows = trace.records.iter().map(|r| {
        let mut row = vec![fmt_num(r.t)];
        row.extend(r.state.iter().map(|v| fmt_num(*v)));
        row.extend([
            fmt_num(r.u),
            fmt_num(r.alpha_att),
            fmt_num(r.alpha_hat),
            fmt_num(r.surface_s),
            u8::from(r.triggered).to_string(),
            r.delay_steps.to_string(),
            fmt_num(r.v_lkf),
        ]);
        row
    });
    csv_bytes(&TRACE_HEADER, rows)
}

/// Dataset rows as `(dt, states, inputs)`; errors carry the 1-based line number.
pub fn read_dataset(path: &Path) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != DATASET_HEADER {
        return Err(CliError::Config(format!("{}: line 1: expected header {}", path.display(), DATASET_HEADER.join(","))));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Config(format!("{}: line {line}: {e}", path.display())))?;
        let vals: Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| CliError::Config(format!("{}: line {line}: {e}", path.display())))?;
        if vals.len() != 6 || vals.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Config(format!("{}: line {line}: expected 6 finite fields", path.display())));
        }
        times.push(vals[0]);
        states.push(vals[1..5].to_vec());
        inputs.push(vals[5]);
    }
    let dt = if times.len() >= 2 { times[1] - times[0] } else { 0.0 };
    Ok((dt, states, inputs))
}
