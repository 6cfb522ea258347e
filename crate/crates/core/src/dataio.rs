//! Binary dataset container, split verification and CSV tables.
//!
//! Dataset layout (all little-endian):
//!
//! ```text
//! magic    4 bytes  "RGN1"
//! version  u32      1
//! count    u64      number of records
//! record   label u8, condition u8, split u8, timestamp f64,
//!          40 x 20 f64 PDP (tap-major), rss flag u8, [20 f64 RSS]
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{Condition, RainLabel};
use crate::dataset::{LabeledDataset, PdpMatrix, Record, Split};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"RGN1";
pub const DATASET_VERSION: u32 = 1;
pub const MATRIX_TAPS: usize = 40;
pub const MATRIX_SNAPSHOTS: usize = 20;

pub fn write_dataset<W: Write>(ds: &LabeledDataset, w: &mut W) -> Result<()> {
    let io = |e| Error::io("<writer>", e);
    w.write_all(&DATASET_MAGIC).map_err(io)?;
    w.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.records.len() as u64).to_le_bytes())
        .map_err(io)?;
    for (i, r) in ds.records.iter().enumerate() {
        if r.pdp.n_taps() != MATRIX_TAPS || r.pdp.n_snapshots() != MATRIX_SNAPSHOTS {
            return Err(Error::InvalidArgument(format!(
                "record {i}: PDP matrix is {}x{}, the format stores {MATRIX_TAPS}x{MATRIX_SNAPSHOTS}",
                r.pdp.n_taps(),
                r.pdp.n_snapshots()
            )));
        }
        if let Some(rss) = &r.rss {
            if rss.len() != MATRIX_SNAPSHOTS {
                return Err(Error::InvalidArgument(format!(
                    "record {i}: RSS window has {} values, expected {MATRIX_SNAPSHOTS}",
                    rss.len()
                )));
            }
        }
        let mut buf = Vec::with_capacity(12 + 8 * (MATRIX_TAPS + 1) * MATRIX_SNAPSHOTS);
        buf.push(r.label.index() as u8);
        buf.push(r.condition.code());
        buf.push(r.split.code());
        buf.extend_from_slice(&r.timestamp.to_le_bytes());
        for v in r.pdp.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match &r.rss {
            Some(rss) => {
                buf.push(1);
                for v in rss {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::io("<reader>", e),
    })
}

fn read_u8<R: Read>(r: &mut R, what: &'static str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_bytes(r, &mut b, what)?;
    Ok(b[0])
}

fn read_f64s<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 8];
    read_bytes(r, &mut raw, what)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<LabeledDataset> {
    let mut magic = [0u8; 4];
    read_bytes(r, &mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: DATASET_MAGIC,
        });
    }
    let mut b4 = [0u8; 4];
    read_bytes(r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut b8 = [0u8; 8];
    read_bytes(r, &mut b8, "record count")?;
    let count = u64::from_le_bytes(b8);

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let label_code = read_u8(r, "record header")?;
        let cond_code = read_u8(r, "record header")?;
        let split_code = read_u8(r, "record header")?;
        let label = RainLabel::from_index(label_code as usize)
            .ok_or_else(|| Error::Malformed(format!("record {i}: label {label_code}")))?;
        let condition = Condition::from_code(cond_code)
            .ok_or_else(|| Error::Malformed(format!("record {i}: condition {cond_code}")))?;
        let split = Split::from_code(split_code)
            .ok_or_else(|| Error::Malformed(format!("record {i}: split {split_code}")))?;
        let timestamp = read_f64s(r, 1, "record header")?[0];
        let pdp = read_f64s(r, MATRIX_TAPS * MATRIX_SNAPSHOTS, "PDP payload")?;
        if pdp.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Malformed(format!(
                "record {i}: PDP has negative or non-finite values"
            )));
        }
        let rss = match read_u8(r, "RSS flag")? {
            0 => None,
            1 => Some(read_f64s(r, MATRIX_SNAPSHOTS, "RSS payload")?),
            f => return Err(Error::Malformed(format!("record {i}: RSS flag {f}"))),
        };
        records.push(Record {
            label,
            condition,
            split,
            timestamp,
            pdp: PdpMatrix::from_vec(MATRIX_TAPS, MATRIX_SNAPSHOTS, pdp)?,
            rss,
        });
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Malformed(
                "trailing bytes after the last record".into(),
            ))
        }
        Err(e) => return Err(Error::io("<reader>", e)),
    }
    Ok(LabeledDataset { records })
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut BufReader::new(file))
}

/// A train/test pair of windows that overlap or sit too close together.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitViolation {
    pub train_timestamp: f64,
    pub test_timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitReport {
    pub counts: BTreeMap<(RainLabel, Split), usize>,
    pub violations: Vec<SplitViolation>,
}

impl SplitReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, label: RainLabel, split: Split) -> usize {
        self.counts.get(&(label, split)).copied().unwrap_or(0)
    }
}

/// Checks that every test window starts at least one full window of silence
/// away from every training window, i.e. `|t_train - t_test| >= 2 * window`.
pub fn verify_split(ds: &LabeledDataset) -> SplitReport {
    let mut report = SplitReport::default();
    for r in &ds.records {
        *report.counts.entry((r.label, r.split)).or_insert(0) += 1;
    }
    let mut train: Vec<(f64, f64)> = ds
        .split(Split::Train)
        .map(|r| (r.timestamp, r.pdp.n_snapshots() as f64))
        .collect();
    train.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max_len = train.iter().map(|t| t.1).fold(0.0, f64::max);
    for te in ds.split(Split::Test) {
        let w_te = te.pdp.n_snapshots() as f64;
        let reach = 2.0 * max_len.max(w_te);
        let lo = train.partition_point(|t| t.0 <= te.timestamp - reach);
        for &(t_tr, w_tr) in &train[lo..] {
            if t_tr >= te.timestamp + reach {
                break;
            }
            let margin = 2.0 * w_tr.max(w_te);
            if (t_tr - te.timestamp).abs() < margin {
                report.violations.push(SplitViolation {
                    train_timestamp: t_tr,
                    test_timestamp: te.timestamp,
                });
            }
        }
    }
    report
}

/// Writes a CSV file with a header row.
pub fn write_csv<P: AsRef<Path>>(path: P, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV file into its header and rows.
pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(
            rec.map_err(|e| csv_err(path, e))?
                .iter()
                .map(str::to_string)
                .collect(),
        );
    }
    Ok((header, rows))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Malformed(format!("{}: {e}", path.display()))
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Two-column `(t, value)` series.
pub fn write_series_csv<P: AsRef<Path>>(path: P, t: &[f64], values: &[f64]) -> Result<()> {
    if t.len() != values.len() {
        return Err(Error::InvalidArgument(
            "series columns differ in length".into(),
        ));
    }
    let rows: Vec<Vec<String>> = t
        .iter()
        .zip(values)
        .map(|(a, b)| vec![fmt_f64(*a), fmt_f64(*b)])
        .collect();
    write_csv(path, &["t", "value"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(split: Split, t: f64) -> Record {
        Record {
            label: RainLabel::ModerateRain,
            condition: Condition {
                nlos: true,
                high_wind: false,
            },
            split,
            timestamp: t,
            pdp: PdpMatrix::from_vec(40, 20, (0..800).map(|i| i as f64 * 0.5).collect()).unwrap(),
            rss: if t as i64 % 2 == 0 {
                Some(vec![-40.25; 20])
            } else {
                None
            },
        }
    }

    #[test]
    fn round_trip_in_memory() {
        let ds = LabeledDataset {
            records: vec![record(Split::Train, 0.0), record(Split::Test, 41.0)],
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn error_taxonomy() {
        let ds = LabeledDataset {
            records: vec![record(Split::Train, 0.0)],
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            read_dataset(&mut &cut[..]),
            Err(Error::Truncated(_))
        ));

        let mut bad = buf.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let err = read_dataset(&mut bad.as_slice()).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found, .. } if &found == b"XXXX"));
        assert!(err.to_string().contains("88, 88, 88, 88") || err.to_string().contains("XXXX"));

        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(
            read_dataset(&mut v2.as_slice()),
            Err(Error::UnsupportedVersion(2))
        ));

        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(
            read_dataset(&mut extra.as_slice()),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn wrong_shape_is_not_written() {
        let mut r = record(Split::Train, 0.0);
        r.pdp = PdpMatrix::from_vec(40, 4, vec![0.0; 160]).unwrap();
        let ds = LabeledDataset { records: vec![r] };
        assert!(write_dataset(&ds, &mut Vec::new()).is_err());
    }

    #[test]
    fn split_violations_are_listed() {
        let ds = LabeledDataset {
            records: vec![
                record(Split::Train, 0.0),
                record(Split::Test, 30.0),
                record(Split::Test, 40.0),
            ],
        };
        let rep = verify_split(&ds);
        assert_eq!(
            rep.violations,
            vec![SplitViolation {
                train_timestamp: 0.0,
                test_timestamp: 30.0
            }]
        );
        assert_eq!(rep.count(RainLabel::ModerateRain, Split::Test), 2);
        assert!(verify_split(&LabeledDataset::default()).counts.is_empty());
    }
}
