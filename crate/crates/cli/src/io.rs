//! File formats. Recordings are CSV `time_s,sc_us`, events `onset_s,label`,
//! SNA traces `time_s,sna`. Values are written with 9 significant digits and
//! times rounded to the nanosecond; JSON keeps full precision.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use udm::signal::EventSchedule;
use udm::{SnaSignal, UniformSeries};

use crate::error::{CliError, CliResult};

pub const RECORDING_HEADER: [&str; 2] = ["time_s", "sc_us"];
pub const EVENTS_HEADER: [&str; 2] = ["onset_s", "label"];
pub const SNA_HEADER: [&str; 2] = ["time_s", "sna"];

/// Largest deviation of a time stamp from the uniform grid, seconds.
pub const TIME_TOLERANCE: f64 = 1e-6;

pub fn format_value(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().expect("a formatted float parses");
    format!("{rounded}")
}

pub fn format_time(t: f64) -> String {
    format!("{}", (t * 1e9).round() / 1e9)
}

/// Data rows of a CSV file with the given header, each with its line number.
fn read_rows(path: &Path, header: &[&str]) -> CliResult<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::from(e).in_file(path))?;
    let found = reader.headers().map_err(|e| CliError::from(e).in_file(path))?.clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(CliError::usage(format!(
            "line 1: expected header `{}`, found `{}`",
            header.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        ))
        .in_file(path));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::from(e).in_file(path))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(CliError::usage(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                record.len()
            ))
            .in_file(path));
        }
        rows.push((line, record));
    }
    Ok(rows)
}

fn parse_number(field: &str, line: u64, path: &Path) -> CliResult<f64> {
    match field.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(CliError::usage(format!("line {line}: `{field}` is not a finite number")).in_file(path)),
    }
}

/// Two-column numeric table on a uniform time grid: `(start, interval,
/// values)`. The rate is snapped to the nearest 1e-6 Hz and every time stamp
/// must lie within [`TIME_TOLERANCE`] of the grid.
fn read_uniform(path: &Path, header: &[&str]) -> CliResult<(f64, f64, Vec<f64>)> {
    let rows = read_rows(path, header)?;
    let mut times = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for (line, record) in &rows {
        times.push((*line, parse_number(&record[0], *line, path)?));
        values.push(parse_number(&record[1], *line, path)?);
    }
    if times.len() < 2 {
        return Err(CliError::usage("at least two samples are needed to infer the sample rate").in_file(path));
    }
    let start = times[0].1;
    let span = times[times.len() - 1].1 - start;
    if !(span > 0.0) {
        return Err(CliError::usage("time column must increase").in_file(path));
    }
    let rate = ((times.len() - 1) as f64 / span * 1e6).round() / 1e6;
    let interval = 1.0 / rate;
    for (i, (line, t)) in times.iter().enumerate() {
        if (t - (start + i as f64 * interval)).abs() > TIME_TOLERANCE {
            return Err(CliError::usage(format!("line {line}: time {t} is off the uniform {rate} Hz grid")).in_file(path));
        }
    }
    Ok((start, interval, values))
}

pub fn read_recording(path: &Path) -> CliResult<UniformSeries> {
    let (start, interval, values) = read_uniform(path, &RECORDING_HEADER)?;
    UniformSeries::with_start(values, interval, start).map_err(|e| CliError::from(e).in_file(path))
}

pub fn read_sna(path: &Path) -> CliResult<SnaSignal> {
    let (start, interval, values) = read_uniform(path, &SNA_HEADER)?;
    SnaSignal::with_start(values, interval, start).map_err(|e| CliError::from(e).in_file(path))
}

pub fn read_events(path: &Path) -> CliResult<EventSchedule> {
    let rows = read_rows(path, &EVENTS_HEADER)?;
    let mut onsets = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (line, record) in &rows {
        onsets.push(parse_number(&record[0], *line, path)?);
        labels.push(record[1].to_string());
    }
    EventSchedule::new(onsets, labels).map_err(|e| CliError::from(e).in_file(path))
}

/// Write a table whose first column is time; `columns` hold the remaining
/// values, one vector per column.
pub fn write_columns(path: &Path, header: &[&str], start: f64, interval: f64, columns: &[&[f64]]) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    let len = columns.first().map_or(0, |c| c.len());
    for i in 0..len {
        let mut row = vec![format_time(start + i as f64 * interval)];
        row.extend(columns.iter().map(|c| format_value(c[i])));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_recording(path: &Path, series: &UniformSeries) -> CliResult<()> {
    write_columns(
        path,
        &RECORDING_HEADER,
        series.start_time(),
        series.sample_interval(),
        &[series.samples()],
    )
}

pub fn write_sna(path: &Path, sna: &SnaSignal) -> CliResult<()> {
    write_columns(path, &SNA_HEADER, sna.start_time(), sna.sample_interval(), &[sna.values()])
}

pub fn write_events(path: &Path, events: &EventSchedule) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(EVENTS_HEADER)?;
    for (onset, label) in events.iter() {
        writer.write_record([format_time(onset).as_str(), label])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(e).in_file(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::from(e).in_file(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::from(e).in_file(path))
}
