//! CSV layout: `source_id,timestamp,x,y,target,f0,...,fM`. Sources with fewer
//! features leave their trailing feature cells empty. The timestamp column is
//! optional and defaults to 0.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{MultiSourceDataset, Sample, SourceDataset};
use crate::error::{DmspError, Result};
use crate::geometry::GeoPoint;

pub fn load_csv(path: impl AsRef<Path>) -> Result<MultiSourceDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DmspError::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<MultiSourceDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DmspError::SchemaViolation(e.to_string()))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        column(name).ok_or_else(|| DmspError::SchemaViolation(format!("missing column `{name}`")))
    };
    let source_col = require("source_id")?;
    let x_col = require("x")?;
    let y_col = require("y")?;
    let target_col = require("target")?;
    let timestamp_col = column("timestamp");

    let mut feature_cols = Vec::new();
    while let Some(c) = column(&format!("f{}", feature_cols.len())) {
        feature_cols.push(c);
    }
    if let Some(h) = headers.iter().find(|h| {
        h.strip_prefix('f')
            .is_some_and(|n| n.parse::<usize>().is_ok_and(|n| n >= feature_cols.len()))
    }) {
        return Err(DmspError::SchemaViolation(format!(
            "feature column `{h}` without contiguous predecessors"
        )));
    }

    let mut grouped: BTreeMap<usize, (usize, Vec<Sample>)> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DmspError::Parse {
            row,
            message: e.to_string(),
        })?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            let text = cell(c);
            let v: f64 = text.parse().map_err(|_| DmspError::Parse {
                row,
                message: format!("non-numeric cell `{text}` in column `{}`", &headers[c]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DmspError::Parse {
                    row,
                    message: format!("non-finite cell `{text}` in column `{}`", &headers[c]),
                })
            }
        };
        let source_id: usize = cell(source_col).parse().map_err(|_| DmspError::Parse {
            row,
            message: format!("invalid source_id `{}`", cell(source_col)),
        })?;
        let timestamp: i64 = match timestamp_col {
            Some(c) if !cell(c).is_empty() => cell(c).parse().map_err(|_| DmspError::Parse {
                row,
                message: format!("invalid timestamp `{}`", cell(c)),
            })?,
            _ => 0,
        };
        let present = feature_cols
            .iter()
            .take_while(|&&c| !cell(c).is_empty())
            .count();
        if feature_cols[present..].iter().any(|&c| !cell(c).is_empty()) {
            return Err(DmspError::RaggedFeatures {
                source_id,
                row,
                expected: present,
                found: feature_cols.iter().filter(|&&c| !cell(c).is_empty()).count(),
            });
        }
        let features = feature_cols[..present]
            .iter()
            .map(|&c| number(c))
            .collect::<Result<Vec<_>>>()?;
        let sample = Sample {
            location: GeoPoint::new(number(x_col)?, number(y_col)?),
            features,
            target: number(target_col)?,
            timestamp,
        };
        let entry = grouped.entry(source_id).or_insert((present, Vec::new()));
        if entry.0 != present {
            return Err(DmspError::RaggedFeatures {
                source_id,
                row,
                expected: entry.0,
                found: present,
            });
        }
        entry.1.push(sample);
    }

    let sources = grouped
        .into_iter()
        .map(|(id, (dim, samples))| SourceDataset::new(id, format!("source_{id}"), dim, samples))
        .collect::<Result<Vec<_>>>()?;
    MultiSourceDataset::new(sources)
}

pub fn save_csv(dataset: &MultiSourceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| DmspError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(dataset, &mut w).map_err(|e| DmspError::io(path, e))?;
    w.flush().map_err(|e| DmspError::io(path, e))
}

/// Writes with shortest round-trip float formatting.
pub fn write_csv<W: Write>(dataset: &MultiSourceDataset, w: &mut W) -> std::io::Result<()> {
    let width = dataset.feature_dims().into_iter().max().unwrap_or(0);
    let mut header = String::from("source_id,timestamp,x,y,target");
    for f in 0..width {
        header.push_str(&format!(",f{f}"));
    }
    writeln!(w, "{header}")?;
    for src in dataset.sources() {
        for s in src.samples() {
            write!(
                w,
                "{},{},{},{},{}",
                src.source_id(),
                s.timestamp,
                s.location.x,
                s.location.y,
                s.target
            )?;
            for f in 0..width {
                match s.features.get(f) {
                    Some(v) => write!(w, ",{v}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
    }
    Ok(())
}
