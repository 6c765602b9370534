//! Meter readings, minute aggregation and the CSV exchange format.
//!
//! The CSV schema is `timestamp,power_w,occupied`. A timestamp is either an
//! integer count of seconds since the Unix epoch (typical of 1 Hz exports)
//! or an ISO-8601 date-time such as `2012-06-01T00:00`, `2012-06-01 00:00:00`
//! or `2012-06-01T00:00:00Z`. Times without an offset are taken as UTC.
//! `occupied` is `0` or `1`.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw meter reading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub power_w: f64,
    pub occupied: bool,
}

/// One aggregated minute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinuteRecord {
    /// Minutes since the Unix epoch.
    pub minute: i64,
    pub power_w: f64,
    pub occupied: bool,
}

/// Minute-resolution series. Minutes without readings are absent, so
/// consecutive records may be more than one minute apart.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeterSeries {
    pub household: String,
    pub period: String,
    pub records: Vec<MinuteRecord>,
}

impl MeterSeries {
    /// Checks ordering and value ranges.
    pub fn validate(&self) -> Result<()> {
        for pair in self.records.windows(2) {
            if pair[1].minute <= pair[0].minute {
                return Err(Error::Data(format!(
                    "minutes must be strictly increasing ({} follows {})",
                    pair[1].minute, pair[0].minute
                )));
            }
        }
        if let Some(r) = self.records.iter().find(|r| !r.power_w.is_finite() || r.power_w < 0.0) {
            return Err(Error::Data(format!(
                "invalid power {} at minute {}",
                r.power_w, r.minute
            )));
        }
        Ok(())
    }
}

/// Averages readings into minutes. A minute's power is the mean of the
/// readings that fall inside it; its occupancy is the majority status,
/// with ties counted as occupied. Readings must be sorted by time.
pub fn aggregate_to_minutes(readings: &[Reading]) -> Result<Vec<MinuteRecord>> {
    if readings.is_empty() {
        return Err(Error::Data("cannot aggregate an empty series".into()));
    }
    let mut out: Vec<MinuteRecord> = Vec::new();
    let mut current: Option<(i64, f64, usize, usize)> = None;
    let flush = |out: &mut Vec<MinuteRecord>, (minute, sum, n, occ): (i64, f64, usize, usize)| {
        out.push(MinuteRecord {
            minute,
            power_w: sum / n as f64,
            occupied: 2 * occ >= n,
        })
    };
    let mut last_ts = i64::MIN;
    for r in readings {
        if r.timestamp <= last_ts {
            return Err(Error::Data(format!(
                "timestamps must be strictly increasing ({} follows {last_ts})",
                r.timestamp
            )));
        }
        last_ts = r.timestamp;
        let minute = r.timestamp.div_euclid(60);
        match current.as_mut() {
            Some(acc) if acc.0 == minute => {
                acc.1 += r.power_w;
                acc.2 += 1;
                acc.3 += usize::from(r.occupied);
            }
            _ => {
                if let Some(acc) = current.take() {
                    flush(&mut out, acc);
                }
                current = Some((minute, r.power_w, 1, usize::from(r.occupied)));
            }
        }
    }
    if let Some(acc) = current {
        flush(&mut out, acc);
    }
    Ok(out)
}

fn parse_timestamp(field: &str) -> Option<i64> {
    let field = field.trim();
    if !field.is_empty() && field.bytes().all(|b| b.is_ascii_digit()) {
        return field.parse().ok();
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(field) {
        return Some(dt.timestamp());
    }
    let field = field.trim_end_matches('Z');
    [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|fmt| NaiveDateTime::parse_from_str(field, fmt).ok())
    .map(|dt| dt.and_utc().timestamp())
}

#[derive(Deserialize)]
struct CsvRow {
    timestamp: String,
    power_w: f64,
    occupied: u8,
}

/// Parses readings from CSV text. `origin` names the source in errors.
pub fn read_readings(reader: impl Read, origin: &Path) -> Result<Vec<Reading>> {
    let input_err = |message: String| Error::Input {
        path: origin.to_path_buf(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| input_err(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(input_err("file is empty".into()));
    }
    let expected = ["timestamp", "power_w", "occupied"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(input_err(format!(
            "expected header `timestamp,power_w,occupied`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| input_err(format!("line {line}: {e}")))?;
        let timestamp = parse_timestamp(&row.timestamp)
            .ok_or_else(|| input_err(format!("line {line}: unrecognised timestamp `{}`", row.timestamp)))?;
        if !row.power_w.is_finite() || row.power_w < 0.0 {
            return Err(input_err(format!("line {line}: invalid power {}", row.power_w)));
        }
        let occupied = match row.occupied {
            0 => false,
            1 => true,
            other => {
                return Err(input_err(format!(
                    "line {line}: occupied must be 0 or 1, found {other}"
                )))
            }
        };
        out.push(Reading {
            timestamp,
            power_w: row.power_w,
            occupied,
        });
    }
    if out.is_empty() {
        return Err(input_err("no readings".into()));
    }
    Ok(out)
}

/// Reads a CSV file and aggregates it to minutes.
pub fn load_series(path: &Path, household: &str) -> Result<MeterSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let readings = read_readings(std::io::BufReader::new(file), path)?;
    let records = aggregate_to_minutes(&readings).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(MeterSeries {
        household: household.to_string(),
        period: String::new(),
        records,
    })
}

/// Writes minute records with ISO-8601 minute timestamps.
pub fn write_series(series: &MeterSeries, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("writing csv: {e}"));
    w.write_record(["timestamp", "power_w", "occupied"]).map_err(csv_err)?;
    for r in &series.records {
        let ts = DateTime::from_timestamp(r.minute * 60, 0)
            .ok_or_else(|| Error::Data(format!("minute {} is out of range", r.minute)))?;
        w.write_record([
            ts.format("%Y-%m-%dT%H:%M").to_string(),
            format!("{:.3}", r.power_w),
            u8::from(r.occupied).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reading(ts: i64, p: f64, occ: bool) -> Reading {
        Reading {
            timestamp: ts,
            power_w: p,
            occupied: occ,
        }
    }

    #[test]
    fn constant_minute_averages_to_itself() {
        let r: Vec<_> = (0..60).map(|s| reading(6000 + s, 100.0, true)).collect();
        let m = aggregate_to_minutes(&r).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].minute, m[0].power_w), (100, 100.0));
    }

    #[test]
    fn ramp_averages_to_midpoint() {
        let r: Vec<_> = (0..60).map(|s| reading(s, s as f64, false)).collect();
        assert_eq!(aggregate_to_minutes(&r).unwrap()[0].power_w, 29.5);
    }

    #[test]
    fn partial_minute_averages_present_readings_only() {
        let r: Vec<_> = (0..60)
            .step_by(2)
            .map(|s| reading(120 + s, (s * s) as f64, s < 30))
            .collect();
        let m = aggregate_to_minutes(&r).unwrap();
        let want = (0..60).step_by(2).map(|s| (s * s) as f64).sum::<f64>() / 30.0;
        assert_eq!(m[0].power_w, want);
        assert!(m[0].occupied, "15/15 split resolves to occupied");
    }

    #[test]
    fn gaps_leave_missing_minutes() {
        let r = vec![reading(0, 1.0, true), reading(185, 2.0, false)];
        let m = aggregate_to_minutes(&r).unwrap();
        assert_eq!(m.iter().map(|r| r.minute).collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn empty_and_unordered_inputs_are_rejected() {
        assert!(aggregate_to_minutes(&[]).is_err());
        assert!(aggregate_to_minutes(&[reading(5, 1.0, true), reading(5, 1.0, true)]).is_err());
    }

    #[test]
    fn timestamp_formats() {
        assert_eq!(parse_timestamp("1338508800"), Some(1338508800));
        for s in [
            "2012-06-01T00:00",
            "2012-06-01 00:00:00",
            "2012-06-01T00:00:00Z",
            "2012-06-01T02:00:00+02:00",
        ] {
            assert_eq!(parse_timestamp(s), Some(1338508800), "{s}");
        }
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn csv_round_trip() {
        let series = MeterSeries {
            household: "h".into(),
            period: String::new(),
            records: (0..3)
                .map(|i| MinuteRecord {
                    minute: 22_308_480 + i,
                    power_w: 10.5 * i as f64,
                    occupied: i % 2 == 0,
                })
                .collect(),
        };
        let mut buf = Vec::new();
        write_series(&series, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(
            text.starts_with("timestamp,power_w,occupied\n2012-06-01T00:00,0.000,1\n"),
            "{text}"
        );
        let back = aggregate_to_minutes(&read_readings(&buf[..], Path::new("x.csv")).unwrap()).unwrap();
        assert_eq!(back, series.records);
    }

    #[test]
    fn malformed_csv_names_the_file() {
        let err = read_readings(&b""[..], Path::new("empty.csv")).unwrap_err();
        assert!(err.to_string().contains("empty.csv"));
        let err = read_readings(&b"timestamp,power_w,occupied\n0,-1,1\n"[..], Path::new("neg.csv")).unwrap_err();
        assert!(err.to_string().contains("neg.csv") && err.to_string().contains("line 2"));
        let err = read_readings(&b"a,b\n1,2\n"[..], Path::new("hdr.csv")).unwrap_err();
        assert!(err.to_string().contains("expected header"));
    }
}
