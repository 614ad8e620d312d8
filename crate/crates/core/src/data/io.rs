//! Binary feature file (`CMRF`, version 1) and CSV import.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "CMRF" | u32 version | u64 N | u32 d_i | u32 d_t | u8 has_labels
//! N x ( f32 x d_i image | f32 x d_t text | u32 label (if has_labels) | u8 flags )
//! ```
//!
//! Flag bits: 0 = clean subset, 1 = injected noisy, 2..=3 = split
//! (0 train, 1 query, 2 retrieval). Record ids are positional.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, FeatureRecord, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMRF";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_CLEAN: u8 = 1;
const FLAG_NOISY: u8 = 1 << 1;
const SPLIT_SHIFT: u8 = 2;

fn split_code(split: Split) -> u8 {
    match split {
        Split::Train => 0,
        Split::Query => 1,
        Split::Retrieval => 2,
    }
}

pub fn write_features<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    ds.validate()?;
    let d_i = u32::try_from(ds.d_i).map_err(|_| Error::Data("d_i exceeds u32".into()))?;
    let d_t = u32::try_from(ds.d_t).map_err(|_| Error::Data("d_t exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(25 + ds.len() * (4 * (ds.d_i + ds.d_t) + 5));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&d_i.to_le_bytes());
    buf.extend_from_slice(&d_t.to_le_bytes());
    buf.push(u8::from(ds.has_labels));
    for r in &ds.records {
        for v in r.image.iter().chain(&r.text) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if ds.has_labels {
            buf.extend_from_slice(&r.label.to_le_bytes());
        }
        let mut flags = split_code(r.split) << SPLIT_SHIFT;
        if r.is_clean_subset {
            flags |= FLAG_CLEAN;
        }
        if r.is_injected_noisy {
            flags |= FLAG_NOISY;
        }
        buf.push(flags);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_features(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_features(ds, std::io::BufWriter::new(file))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let raw = self.take(4 * n, what)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: (start + 4 * k) as u64,
                message: format!("non-finite value in {what}"),
            });
        }
        Ok(vals)
    }
}

/// Parses a complete feature file image. Fails without returning partial data.
pub fn read_features(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected CMRF".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = r.u64("record count")?;
    let d_i = r.u32("d_i")? as usize;
    let d_t = r.u32("d_t")? as usize;
    if d_i == 0 || d_t == 0 {
        return Err(Error::Format {
            offset: 16,
            message: "feature dimensions must be positive".into(),
        });
    }
    let has_labels = match r.u8("has_labels")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: 24,
                message: format!("has_labels byte is {other}"),
            })
        }
    };
    let record_bytes = 4 * (d_i + d_t) + if has_labels { 4 } else { 0 } + 1;
    let remaining = (bytes.len() - r.pos) as u64;
    if n.checked_mul(record_bytes as u64)
        .is_none_or(|need| need > remaining)
    {
        let whole = remaining / record_bytes as u64;
        return Err(Error::Format {
            offset: r.pos as u64 + whole * record_bytes as u64,
            message: format!(
                "truncated: header declares {n} records, file holds {whole} complete records"
            ),
        });
    }
    let mut records = Vec::with_capacity(n as usize);
    for id in 0..n {
        let image = r.f32s(d_i, "image features")?;
        let text = r.f32s(d_t, "text features")?;
        let label = if has_labels { r.u32("label")? } else { 0 };
        let flags_at = r.pos;
        let flags = r.u8("flags")?;
        let split = match (flags >> SPLIT_SHIFT) & 0b11 {
            0 => Split::Train,
            1 => Split::Query,
            2 => Split::Retrieval,
            _ => {
                return Err(Error::Format {
                    offset: flags_at as u64,
                    message: "invalid split code".into(),
                })
            }
        };
        if flags >> 4 != 0 {
            return Err(Error::Format {
                offset: flags_at as u64,
                message: "reserved flag bits set".into(),
            });
        }
        let is_clean_subset = flags & FLAG_CLEAN != 0;
        let is_injected_noisy = flags & FLAG_NOISY != 0;
        if is_clean_subset && is_injected_noisy {
            return Err(Error::Format {
                offset: flags_at as u64,
                message: "record is both clean and noisy".into(),
            });
        }
        records.push(FeatureRecord {
            id,
            image,
            text,
            label,
            split,
            is_clean_subset,
            is_injected_noisy,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last record"));
    }
    let ds = Dataset {
        d_i,
        d_t,
        has_labels,
        records,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    read_features(&fs::read(path)?)
}

/// Imports `id,label,img_0..img_{d_i-1},txt_0..txt_{d_t-1}` rows. All records
/// land in the train split with no flags set.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("id") || headers.get(1) != Some("label") {
        return Err(Error::Data("csv header must start with id,label".into()));
    }
    let d_i = headers.iter().filter(|h| h.starts_with("img_")).count();
    let d_t = headers.iter().filter(|h| h.starts_with("txt_")).count();
    if d_i == 0 || d_t == 0 || headers.len() != 2 + d_i + d_t {
        return Err(Error::Data(
            "csv header must list img_* then txt_* columns".into(),
        ));
    }
    for (k, h) in headers.iter().skip(2).enumerate() {
        let expected = if k < d_i {
            format!("img_{k}")
        } else {
            format!("txt_{}", k - d_i)
        };
        if h != expected {
            return Err(Error::Data(format!(
                "csv column {} is {h:?}, expected {expected:?}",
                k + 2
            )));
        }
    }
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let parse_err =
            |col: usize| Error::Data(format!("csv row {}: cannot parse column {col}", line + 2));
        let id: u64 = row[0].trim().parse().map_err(|_| parse_err(0))?;
        if !seen.insert(id) {
            return Err(Error::Data(format!(
                "csv row {}: duplicate id {id}",
                line + 2
            )));
        }
        let label: u32 = row[1].trim().parse().map_err(|_| parse_err(1))?;
        let mut vals = Vec::with_capacity(d_i + d_t);
        for col in 2..row.len() {
            vals.push(row[col].trim().parse::<f32>().map_err(|_| parse_err(col))?);
        }
        let text = vals.split_off(d_i);
        records.push(FeatureRecord {
            id,
            image: vals,
            text,
            label,
            split: Split::Train,
            is_clean_subset: false,
            is_injected_noisy: false,
        });
    }
    let ds = Dataset {
        d_i,
        d_t,
        has_labels: true,
        records,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, inject_noise, select_clean_subset, split, SynthConfig};

    fn prepared() -> Dataset {
        let ds = generate_synthetic(&SynthConfig {
            num_classes: 3,
            samples_per_class: 10,
            d_i: 5,
            d_t: 4,
            ..Default::default()
        })
        .unwrap();
        let ds = split(ds, (0.6, 0.2, 0.2), 1).unwrap();
        let ds = select_clean_subset(ds, 0.25, 1).unwrap();
        inject_noise(ds, 0.3, 1).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ds = prepared();
        let mut bytes = Vec::new();
        write_features(&ds, &mut bytes).unwrap();
        assert_eq!(read_features(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_reports_offset() {
        let ds = prepared();
        let mut bytes = Vec::new();
        write_features(&ds, &mut bytes).unwrap();
        for cut in [2, 10, 25, bytes.len() - 1] {
            match read_features(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let ds = prepared();
        let mut bytes = Vec::new();
        write_features(&ds, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_features(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            read_features(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(read_features(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn unlabeled_files_round_trip() {
        let mut ds = prepared();
        ds.has_labels = false;
        ds.records.iter_mut().for_each(|r| r.label = 0);
        let mut bytes = Vec::new();
        write_features(&ds, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 25 + ds.len() * (4 * 9 + 1));
        assert_eq!(read_features(&bytes).unwrap(), ds);
    }
}
