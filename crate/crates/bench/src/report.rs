//! Fused/reference ratios from one or more benchmark CSVs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::record::{read_records_file, BenchRecord, Mode, Variant};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub op: String,
    pub shape: String,
    /// reference median / fused median.
    pub speedup: f64,
    /// fused peak / reference peak. FLCE compares logits-tagged bytes only.
    pub mem_ratio: f64,
    pub dtype: String,
    pub mode: Mode,
}

fn peak(r: &BenchRecord) -> u64 {
    if r.op == "flce" {
        r.peak_logits_bytes
    } else {
        r.peak_bytes
    }
}

/// Pair fused and reference records by `(op, shape, dtype, mode)`. Later
/// records replace earlier ones; unpaired keys are dropped.
pub fn aggregate(records: &[BenchRecord]) -> Vec<ReportRow> {
    type Key = (String, String, String, Mode);
    let mut pairs: BTreeMap<Key, (Option<&BenchRecord>, Option<&BenchRecord>)> = BTreeMap::new();
    for r in records {
        let slot = pairs.entry((r.op.clone(), r.shape.clone(), r.dtype.clone(), r.mode)).or_default();
        match r.variant {
            Variant::Fused => slot.0 = Some(r),
            Variant::Reference => slot.1 = Some(r),
        }
    }
    pairs
        .into_iter()
        .filter_map(|((op, shape, dtype, mode), pair)| {
            let (f, r) = (pair.0?, pair.1?);
            Some(ReportRow {
                op,
                shape,
                speedup: r.median_ns / f.median_ns,
                mem_ratio: peak(f) as f64 / peak(r) as f64,
                dtype,
                mode,
            })
        })
        .collect()
}

pub fn cmd_report<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<ReportRow>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_records_file(p.as_ref())?);
    }
    Ok(aggregate(&all))
}

pub fn write_report<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
