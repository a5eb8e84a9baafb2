//! Replay files: recorded per-pass logits.
//!
//! Layout: `"STTR"`, version byte `0x01`, then `M`, `N`, `C` as `u32` LE,
//! then `M` records of `[label: u32 LE][N*C f32 LE, pass-major]`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"STTR";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("bad magic {0:?}, expected \"STTR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported replay version 0x{0:02x}")]
    BadVersion(u8),
    #[error("replay file truncated in the header")]
    TruncatedHeader,
    #[error("replay file truncated in record {record}")]
    Truncated { record: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("replay I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("replay write failed: {0}")]
    Write(#[from] io::Error),
}

/// Labels and logits for `M` samples by `N` passes by `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayData {
    pub num_passes: usize,
    pub num_classes: usize,
    pub labels: Vec<u32>,
    /// Flattened `M x N x C`, pass-major within each sample.
    pub logits: Vec<f32>,
}

impl ReplayData {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn record_len(&self) -> usize {
        self.num_passes * self.num_classes
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        let len = self.record_len();
        &self.logits[index * len..(index + 1) * len]
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if self.labels.is_empty() || self.num_passes == 0 || self.num_classes == 0 {
            return Err(ReplayError::DimensionMismatch("M, N and C must all be at least 1".into()));
        }
        for (name, v) in [
            ("M", self.labels.len()),
            ("N", self.num_passes),
            ("C", self.num_classes),
        ] {
            if u32::try_from(v).is_err() {
                return Err(ReplayError::DimensionMismatch(format!("{name} = {v} does not fit in u32")));
            }
        }
        if self.logits.len() != self.labels.len() * self.record_len() {
            return Err(ReplayError::DimensionMismatch(format!(
                "{} logits for M={} N={} C={}",
                self.logits.len(),
                self.labels.len(),
                self.num_passes,
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Streaming writer: header first, then one record per sample.
pub struct ReplayWriter<W: Write> {
    out: W,
    num_samples: usize,
    record_len: usize,
    written: usize,
}

impl<W: Write> ReplayWriter<W> {
    pub fn new(mut out: W, num_samples: usize, num_passes: usize, num_classes: usize) -> Result<Self, ReplayError> {
        let dims: Vec<u32> = [num_samples, num_passes, num_classes]
            .iter()
            .map(|&v| u32::try_from(v).ok().filter(|v| *v >= 1))
            .collect::<Option<_>>()
            .ok_or_else(|| ReplayError::DimensionMismatch("M, N and C must be in 1..=u32::MAX".into()))?;
        out.write_all(&MAGIC)?;
        out.write_all(&[VERSION])?;
        for d in dims {
            out.write_all(&d.to_le_bytes())?;
        }
        Ok(Self {
            out,
            num_samples,
            record_len: num_passes * num_classes,
            written: 0,
        })
    }

    pub fn write_record(&mut self, label: u32, logits: &[f32]) -> Result<(), ReplayError> {
        if self.written == self.num_samples {
            return Err(ReplayError::DimensionMismatch(format!(
                "header declares {} records",
                self.num_samples
            )));
        }
        if logits.len() != self.record_len {
            return Err(ReplayError::DimensionMismatch(format!(
                "record {} has {} values, expected {}",
                self.written,
                logits.len(),
                self.record_len
            )));
        }
        let mut buf = Vec::with_capacity(4 + 4 * logits.len());
        buf.extend_from_slice(&label.to_le_bytes());
        for v in logits {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, ReplayError> {
        if self.written != self.num_samples {
            return Err(ReplayError::DimensionMismatch(format!(
                "wrote {} of {} records",
                self.written, self.num_samples
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// A file written under a `.partial` name and renamed into place on
/// `commit`. Dropping it uncommitted removes the partial file.
pub struct AtomicFile {
    partial: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl AtomicFile {
    pub fn create(target: &Path) -> Result<(Self, File), ReplayError> {
        let mut name = target.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let partial = target.with_file_name(name);
        let file = File::create(&partial).map_err(|source| ReplayError::Io {
            path: partial.clone(),
            source,
        })?;
        Ok((
            Self {
                partial,
                target: target.to_path_buf(),
                committed: false,
            },
            file,
        ))
    }

    pub fn commit(mut self) -> Result<(), ReplayError> {
        fs::rename(&self.partial, &self.target).map_err(|source| ReplayError::Io {
            path: self.target.clone(),
            source,
        })?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for AtomicFile {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_file(&self.partial);
        }
    }
}

pub fn replay_write(path: &Path, data: &ReplayData) -> Result<(), ReplayError> {
    data.validate()?;
    let (guard, file) = AtomicFile::create(path)?;
    let mut writer = ReplayWriter::new(BufWriter::new(file), data.num_samples(), data.num_passes, data.num_classes)?;
    for (i, &label) in data.labels.iter().enumerate() {
        writer.write_record(label, data.sample(i))?;
    }
    let buf = writer.finish()?;
    buf.into_inner()
        .map_err(|e| ReplayError::Write(e.into_error()))?
        .sync_all()?;
    guard.commit()
}

pub fn replay_read(path: &Path) -> Result<ReplayData, ReplayError> {
    let bytes = fs::read(path).map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_replay(&bytes)
}

pub fn parse_replay(bytes: &[u8]) -> Result<ReplayData, ReplayError> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(ReplayError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ReplayError::TruncatedHeader);
    }
    if bytes[4] != VERSION {
        return Err(ReplayError::BadVersion(bytes[4]));
    }
    let dim = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let (m, n, c) = (dim(5), dim(9), dim(13));
    if m == 0 || n == 0 || c == 0 {
        return Err(ReplayError::DimensionMismatch(format!("header M={m} N={n} C={c}")));
    }
    let record_bytes = 4 + 4 * n * c;
    let body = &bytes[HEADER_LEN..];
    let expected = m * record_bytes;
    if body.len() < expected {
        return Err(ReplayError::Truncated {
            record: body.len() / record_bytes,
        });
    }
    if body.len() > expected {
        return Err(ReplayError::DimensionMismatch(format!(
            "{} trailing bytes after {m} records",
            body.len() - expected
        )));
    }
    let mut labels = Vec::with_capacity(m);
    let mut logits = Vec::with_capacity(m * n * c);
    for record in body.chunks_exact(record_bytes) {
        labels.push(u32::from_le_bytes(record[..4].try_into().expect("4 bytes")));
        logits.extend(
            record[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
        );
    }
    Ok(ReplayData {
        num_passes: n,
        num_classes: c,
        labels,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_data() -> ReplayData {
        ReplayData {
            num_passes: 2,
            num_classes: 4,
            labels: vec![0, 3, 1],
            logits: (0..24).map(|i| i as f32 * 0.37 - 3.1).collect(),
        }
    }

    fn encode(data: &ReplayData) -> Vec<u8> {
        let mut w = ReplayWriter::new(Vec::new(), data.num_samples(), data.num_passes, data.num_classes).unwrap();
        for (i, &l) in data.labels.iter().enumerate() {
            w.write_record(l, data.sample(i)).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.sttr");
        let data = sample_data();
        replay_write(&path, &data).unwrap();
        let back = replay_read(&path).unwrap();
        assert_eq!(back, data);
        assert!(!dir.path().join("run.sttr.partial").exists());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_data());
        assert_eq!(&bytes[..5], b"STTR\x01");
        assert_eq!(&bytes[5..17], &[3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * (4 + 32));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample_data());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(parse_replay(&bytes), Err(ReplayError::BadMagic(m)) if &m == b"XXXX"));
        let mut bytes = encode(&sample_data());
        bytes[4] = 2;
        assert!(matches!(parse_replay(&bytes), Err(ReplayError::BadVersion(2))));
    }

    #[test]
    fn truncation_names_record() {
        let bytes = encode(&sample_data());
        let cut = HEADER_LEN + 36 + 10;
        assert!(matches!(parse_replay(&bytes[..cut]), Err(ReplayError::Truncated { record: 1 })));
        assert!(matches!(parse_replay(&bytes[..9]), Err(ReplayError::TruncatedHeader)));
    }

    #[test]
    fn dimension_errors() {
        let mut bytes = encode(&sample_data());
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(parse_replay(&bytes), Err(ReplayError::DimensionMismatch(_))));

        let mut w = ReplayWriter::new(Vec::new(), 1, 2, 2).unwrap();
        assert!(matches!(w.write_record(0, &[1.0; 3]), Err(ReplayError::DimensionMismatch(_))));
        assert!(matches!(w.finish(), Err(ReplayError::DimensionMismatch(_))));

        let mut bad = sample_data();
        bad.logits.pop();
        let dir = tempfile::tempdir().unwrap();
        assert!(replay_write(&dir.path().join("x"), &bad).is_err());
    }

    #[test]
    fn failed_write_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.sttr");
        {
            let (_guard, mut file) = AtomicFile::create(&target).unwrap();
            file.write_all(b"STTR").unwrap();
            // guard dropped without commit
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    proptest! {
        #[test]
        fn bitwise_roundtrip(m in 1usize..5, n in 1usize..4, c in 1usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let logits = (0..m * n * c)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f32::from_bits((state >> 32) as u32)
                })
                .collect();
            let data = ReplayData {
                num_passes: n,
                num_classes: c,
                labels: (0..m as u32).collect(),
                logits,
            };
            let back = parse_replay(&encode(&data)).unwrap();
            prop_assert_eq!(back.labels, data.labels);
            prop_assert_eq!(
                back.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                data.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
