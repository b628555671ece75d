use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kpi::{Kpi, K};

/// One timestamped row of raw KPI measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct KpiRecord {
    /// Milliseconds since stream start.
    pub timestamp: f64,
    pub values: [Option<f64>; K],
}

impl KpiRecord {
    pub fn new(timestamp: f64) -> Self {
        Self {
            timestamp,
            values: [None; K],
        }
    }

    pub fn get(&self, kpi: Kpi) -> Option<f64> {
        self.values[kpi.index()]
    }

    pub fn set(&mut self, kpi: Kpi, value: Option<f64>) {
        self.values[kpi.index()] = value;
    }

    pub fn absent_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

/// Maps the timestamp and each KPI onto header names of a delimited log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnSchema {
    pub timestamp: String,
    pub columns: BTreeMap<Kpi, String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            columns: Kpi::ALL
                .iter()
                .map(|k| (*k, k.name().to_string()))
                .collect(),
        }
    }
}

impl ColumnSchema {
    pub fn column(&self, kpi: Kpi) -> &str {
        self.columns.get(&kpi).map_or(kpi.name(), String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedLog {
    pub records: Vec<KpiRecord>,
    /// Rows discarded because the timestamp was missing or unparseable.
    pub dropped_rows: usize,
}

pub fn parse_kpi_log(path: &Path, schema: &ColumnSchema) -> Result<ParsedLog> {
    let file = File::open(path)?;
    parse_kpi_reader(file, schema)
}

fn parse_cell(cell: Option<&str>) -> Option<f64> {
    cell.and_then(|c| c.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

pub fn parse_kpi_reader<R: Read>(reader: R, schema: &ColumnSchema) -> Result<ParsedLog> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let ts_col = find(&schema.timestamp)
        .ok_or_else(|| Error::Schema(format!("missing timestamp column `{}`", schema.timestamp)))?;
    let mut cols = [0usize; K];
    for kpi in Kpi::ALL {
        let name = schema.column(kpi);
        cols[kpi.index()] =
            find(name).ok_or_else(|| Error::Schema(format!("missing KPI column `{name}`")))?;
    }

    let mut records = Vec::new();
    let mut dropped_rows = 0;
    for row in rdr.records() {
        let row = row?;
        let ts = parse_cell(row.get(ts_col)).filter(|t| *t >= 0.0);
        let Some(timestamp) = ts else {
            dropped_rows += 1;
            continue;
        };
        let mut rec = KpiRecord::new(timestamp);
        for (slot, &c) in rec.values.iter_mut().zip(&cols) {
            *slot = parse_cell(row.get(c));
        }
        records.push(rec);
    }
    Ok(ParsedLog {
        records,
        dropped_rows,
    })
}

/// Writes records in the format [`parse_kpi_reader`] reads. Absent values
/// are empty cells.
pub fn write_kpi_log<W: Write>(
    writer: W,
    records: &[KpiRecord],
    schema: &ColumnSchema,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.timestamp.clone()];
    header.extend(Kpi::ALL.iter().map(|k| schema.column(*k).to_string()));
    w.write_record(&header)?;
    let mut cells = Vec::with_capacity(K + 1);
    for rec in records {
        cells.clear();
        cells.push(format!("{}", rec.timestamp));
        cells.extend(
            rec.values
                .iter()
                .map(|v| v.map(|x| format!("{x}")).unwrap_or_default()),
        );
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> String {
        let mut h = vec!["timestamp".to_string()];
        h.extend(Kpi::ALL.iter().map(|k| k.name().to_string()));
        h.join(",")
    }

    fn full_row(ts: &str) -> String {
        let mut cells = vec![ts.to_string()];
        cells.extend((0..K).map(|i| format!("{}.5", i)));
        cells.join(",")
    }

    #[test]
    fn complete_row() {
        let text = format!("{}\n{}\n", header(), full_row("0"));
        let log = parse_kpi_reader(text.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].absent_count(), 0);
        assert_eq!(log.records[0].get(Kpi::Rsrp), Some(1.5));
        assert_eq!(log.dropped_rows, 0);
    }

    #[test]
    fn empty_delay_cell_is_absent() {
        let mut cells: Vec<String> = vec!["20".into()];
        cells.extend((0..K).map(|i| {
            if i == Kpi::PacketDelay.index() {
                String::new()
            } else {
                "1".into()
            }
        }));
        let text = format!("{}\n{}\n", header(), cells.join(","));
        let log = parse_kpi_reader(text.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(log.records[0].get(Kpi::PacketDelay), None);
        assert_eq!(log.records[0].absent_count(), 1);
    }

    #[test]
    fn bad_timestamp_rows_are_dropped_and_counted() {
        let text = format!(
            "{}\n{}\n{}\n{}\n",
            header(),
            full_row("0"),
            full_row("abc"),
            full_row("40")
        );
        let log = parse_kpi_reader(text.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.dropped_rows, 1);
    }

    #[test]
    fn garbage_cell_becomes_absent() {
        let mut cells: Vec<String> = vec!["0".into()];
        cells.extend((0..K).map(|i| if i == 2 { "n/a".into() } else { "3".into() }));
        let text = format!("{}\n{}\n", header(), cells.join(","));
        let log = parse_kpi_reader(text.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(log.records[0].get(Kpi::Sinr), None);
    }

    #[test]
    fn missing_timestamp_column_names_it() {
        let text = header().replace("timestamp", "time") + "\n";
        let err = parse_kpi_reader(text.as_bytes(), &ColumnSchema::default()).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("timestamp")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_kpi_log(
            Path::new("/definitely/not/here.csv"),
            &ColumnSchema::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn custom_schema_maps_names() {
        let mut schema = ColumnSchema::default();
        schema.timestamp = "t_ms".into();
        schema.columns.insert(Kpi::Rsrq, "RSRQ_dB".into());
        let text = format!(
            "{}\n{}\n",
            header()
                .replace("timestamp", "t_ms")
                .replace("rsrq", "RSRQ_dB"),
            full_row("0")
        );
        let log = parse_kpi_reader(text.as_bytes(), &schema).unwrap();
        assert_eq!(log.records[0].get(Kpi::Rsrq), Some(7.5));
    }

    #[test]
    fn write_then_parse() {
        let mut rec = KpiRecord::new(40.0);
        rec.set(Kpi::Bler, Some(0.125));
        let mut buf = Vec::new();
        write_kpi_log(&mut buf, &[rec.clone()], &ColumnSchema::default()).unwrap();
        let log = parse_kpi_reader(buf.as_slice(), &ColumnSchema::default()).unwrap();
        assert_eq!(log.records, vec![rec]);
    }
}
