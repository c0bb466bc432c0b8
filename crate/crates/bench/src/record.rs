use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fused,
    Reference,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fused => "fused",
            Variant::Reference => "reference",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Serial,
    Parallel,
}

/// One timed `(op, shape, variant)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: String,
    /// `rows x cols` for row-wise kernels, `rows x vocab` for the loss kernels.
    pub shape: String,
    pub rows: usize,
    pub cols: usize,
    pub variant: Variant,
    pub dtype: String,
    pub mode: Mode,
    pub median_ns: f64,
    pub q20_ns: f64,
    pub q80_ns: f64,
    /// Ledger high-water mark over all tracked buffers.
    pub peak_bytes: u64,
    /// High-water mark of logits-tagged buffers alone.
    pub peak_logits_bytes: u64,
    pub repeats: usize,
}

pub const SCHEMA: [&str; 13] = [
    "op",
    "shape",
    "rows",
    "cols",
    "variant",
    "dtype",
    "mode",
    "median_ns",
    "q20_ns",
    "q80_ns",
    "peak_bytes",
    "peak_logits_bytes",
    "repeats",
];

pub fn write_records<W: Write>(w: W, records: &[BenchRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record(SCHEMA)?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Read records, rejecting any file whose header is not exactly [`SCHEMA`].
pub fn read_records<R: Read>(r: R, origin: &str) -> Result<Vec<BenchRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if !header.iter().eq(SCHEMA.iter().copied()) {
        return Err(BenchError::SchemaMismatch {
            path: origin.to_owned(),
            found: header.iter().collect::<Vec<_>>().join(","),
            expected: SCHEMA.join(","),
        });
    }
    rdr.deserialize().map(|r| r.map_err(BenchError::from)).collect()
}

pub fn read_records_file(path: &Path) -> Result<Vec<BenchRecord>> {
    let f = std::fs::File::open(path)?;
    read_records(f, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> BenchRecord {
        BenchRecord {
            op: "rmsnorm".into(),
            shape: "512x4096".into(),
            rows: 512,
            cols: 4096,
            variant: Variant::Fused,
            dtype: "f32".into(),
            mode: Mode::Serial,
            median_ns: 10.0,
            q20_ns: 9.0,
            q80_ns: 12.5,
            peak_bytes: 100,
            peak_logits_bytes: 0,
            repeats: 10,
        }
    }

    #[test]
    fn roundtrip() {
        let recs = vec![sample(), BenchRecord { variant: Variant::Reference, ..sample() }];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&SCHEMA.join(",")));
        assert_eq!(read_records(buf.as_slice(), "mem").unwrap(), recs);
    }

    #[test]
    fn empty_file_keeps_header() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[]).unwrap();
        assert!(read_records(buf.as_slice(), "mem").unwrap().is_empty());
    }

    #[test]
    fn schema_mismatch() {
        let err = read_records("op,shape,speed\nx,y,1\n".as_bytes(), "bad.csv").unwrap_err();
        assert!(matches!(err, BenchError::SchemaMismatch { .. }));
    }
}
