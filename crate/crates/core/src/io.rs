//! On-disk formats: the binary snapshot container, CSV tables with a config
//! hash comment, and `key = value` manifests.
//!
//! Container record, little-endian:
//! `"WLND"`, version `u32`, `nx u32`, `ny u32`, time `f64`, kind `u8`, then
//! `nx*ny` `f64` values with x fastest. Files may hold several records back
//! to back. Matrices use kind 3 with `nx = ncols`, `ny = nrows`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::field::{Field2D, FieldKind, Grid};
use crate::koopman::C64;

pub const MAGIC: &[u8; 4] = b"WLND";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub nx: usize,
    pub ny: usize,
    pub time: f64,
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

impl Record {
    pub fn from_field(f: &Field2D, time: f64) -> Self {
        Record {
            nx: f.grid.nx,
            ny: f.grid.ny,
            time,
            kind: f.kind,
            values: f.values.clone(),
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>, tag: f64) -> Self {
        let (r, c) = m.shape();
        Record {
            nx: c,
            ny: r,
            time: tag,
            kind: FieldKind::Matrix,
            values: (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect(),
        }
    }

    pub fn into_field(self, length: f64) -> Result<Field2D> {
        if self.kind == FieldKind::Matrix {
            return Err(Error::InvalidParam("matrix record read as a field".into()));
        }
        let grid = Grid::new(self.nx, self.ny, length)?;
        Field2D::from_values(grid, self.kind, self.values)
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.ny, self.nx, &self.values)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.nx as u32).to_le_bytes());
        out.extend_from_slice(&(self.ny as u32).to_le_bytes());
        out.extend_from_slice(&self.time.to_le_bytes());
        out.push(self.kind.tag());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        r.encode(&mut out);
    }
    out
}

pub fn decode_records(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < HEADER_LEN {
            return Err(bad(format!("truncated header at byte {pos}")));
        }
        let h = &bytes[pos..pos + HEADER_LEN];
        if &h[0..4] != MAGIC {
            return Err(bad(format!("bad magic at byte {pos}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let nx = u32_at(8) as usize;
        let ny = u32_at(12) as usize;
        let time = f64::from_le_bytes(h[16..24].try_into().unwrap());
        let kind = FieldKind::from_tag(h[24]).ok_or_else(|| bad(format!("unknown kind tag {}", h[24])))?;
        pos += HEADER_LEN;
        let n = nx * ny;
        if bytes.len() - pos < 8 * n {
            return Err(bad(format!("truncated payload: need {} values", n)));
        }
        let values = bytes[pos..pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * n;
        out.push(Record {
            nx,
            ny,
            time,
            kind,
            values,
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    write_bytes(path, &encode_records(records))
}

pub fn read_records(path: &Path, prerequisite: &'static str) -> Result<Vec<Record>> {
    decode_records(&read_bytes(path, prerequisite)?, path)
}

/// Write a trajectory (or any field list) as concatenated records.
pub fn write_fields(path: &Path, times: &[f64], fields: &[Field2D]) -> Result<()> {
    let recs: Vec<Record> = times.iter().zip(fields).map(|(t, f)| Record::from_field(f, *t)).collect();
    write_records(path, &recs)
}

pub fn read_fields(path: &Path, length: f64, prerequisite: &'static str) -> Result<(Vec<f64>, Vec<Field2D>)> {
    let recs = read_records(path, prerequisite)?;
    let mut times = Vec::with_capacity(recs.len());
    let mut fields = Vec::with_capacity(recs.len());
    for r in recs {
        times.push(r.time);
        fields.push(r.into_field(length)?);
    }
    Ok((times, fields))
}

/// Complex matrices are stored as a real record (tag 0) then an imaginary
/// record (tag 1).
pub fn write_complex_matrix(path: &Path, m: &DMatrix<C64>) -> Result<()> {
    write_records(
        path,
        &[
            Record::from_matrix(&m.map(|z| z.re), 0.0),
            Record::from_matrix(&m.map(|z| z.im), 1.0),
        ],
    )
}

pub fn read_complex_matrix(path: &Path, prerequisite: &'static str) -> Result<DMatrix<C64>> {
    let mut recs = read_records(path, prerequisite)?;
    if recs.len() != 2 || recs.iter().any(|r| r.kind != FieldKind::Matrix) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "expected a real and an imaginary matrix record".into(),
        });
    }
    let im = recs.pop().unwrap().into_matrix();
    let re = recs.pop().unwrap().into_matrix();
    Ok(re.zip_map(&im, C64::new))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a whole file; a missing file becomes [`Error::MissingPrerequisite`]
/// naming the subcommand that produces it.
pub fn read_bytes(path: &Path, prerequisite: &'static str) -> Result<Vec<u8>> {
    let mut f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingPrerequisite {
                path: path.to_path_buf(),
                subcommand: prerequisite,
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub config_hash: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(config_hash: &str, header: &[&str]) -> Self {
        Table {
            config_hash: config_hash.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_floats(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|&v| fmt_f64(v)).collect());
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = format!("# config_hash={}\n{}\n", self.config_hash, self.header.join(","));
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.render().as_bytes())
    }

    pub fn read(path: &Path, prerequisite: &'static str) -> Result<Self> {
        let bytes = read_bytes(path, prerequisite)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: "not UTF-8".into(),
        })?;
        let mut lines = text.lines();
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let config_hash = lines
            .next()
            .and_then(|l| l.strip_prefix("# config_hash="))
            .ok_or_else(|| bad("missing config hash line"))?
            .to_string();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| bad("missing header row"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Ok(Table {
            config_hash,
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn float_column(&self, name: &str, path: &Path) -> Result<Vec<f64>> {
        let c = self.column(name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("no column {name}"),
        })?;
        self.rows
            .iter()
            .map(|r| {
                r.get(c).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("bad value in column {name}"),
                })
            })
            .collect()
    }
}

/// Sorted `key = value` text file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.render().as_bytes())
    }

    pub fn read(path: &Path, prerequisite: &'static str) -> Result<Self> {
        let text = String::from_utf8(read_bytes(path, prerequisite)?).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: "not UTF-8".into(),
        })?;
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: expected `key = value`", n + 1),
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing key {key}"),
        })
    }

    /// Fail with [`Error::HashMismatch`] unless the recorded hash matches.
    pub fn check_hash(&self, path: &Path, expected: &str, subcommand: &'static str) -> Result<()> {
        let found = self.require("config_hash", path)?;
        if found != expected {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
                found: found.to_string(),
                expected: expected.to_string(),
                subcommand,
            });
        }
        Ok(())
    }
}

pub fn join(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let g = Grid::new(8, 9, 1.0).unwrap();
        let f = Field2D::from_fn(g, FieldKind::Streamfunction, |x, y| x + 10.0 * y);
        let bytes = encode_records(&[Record::from_field(&f, 0.25)]);
        assert_eq!(&bytes[0..4], b"WLND");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 9);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 0.25);
        assert_eq!(bytes[24], 1);
        assert_eq!(bytes.len(), 25 + 8 * 72);
        // second value is (x = dx, y = -1)
        let v1 = f64::from_le_bytes(bytes[33..41].try_into().unwrap());
        assert_eq!(v1, f.at(1, 0));
    }

    #[test]
    fn corrupted_files_rejected() {
        let p = Path::new("x");
        assert!(decode_records(b"WLNX", p).is_err());
        let g = Grid::new(8, 8, 1.0).unwrap();
        let mut bytes = encode_records(&[Record::from_field(&Field2D::zeros(g, FieldKind::Vorticity), 0.0)]);
        bytes.pop();
        assert!(decode_records(&bytes, p).is_err());
        let mut bytes = encode_records(&[Record::from_field(&Field2D::zeros(g, FieldKind::Vorticity), 0.0)]);
        bytes[24] = 9;
        assert!(decode_records(&bytes, p).is_err());
    }

    #[test]
    fn missing_file_names_prerequisite() {
        let err = read_bytes(Path::new("/nonexistent/definitely/not/here"), "spinup").unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("spinup"));
    }

    #[test]
    fn manifest_hash_mismatch_detected() {
        let mut m = Manifest::default();
        m.set("config_hash", "abc");
        let back = {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.txt");
            m.write(&p).unwrap();
            Manifest::read(&p, "spinup").unwrap()
        };
        assert_eq!(back, m);
        assert!(back.check_hash(Path::new("m"), "abc", "spinup").is_ok());
        let e = back.check_hash(Path::new("m"), "abd", "spinup").unwrap_err();
        assert!(matches!(e, Error::HashMismatch { .. }));
    }

    proptest! {
        #[test]
        fn floats_round_trip_through_text(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(!v.is_nan());
            let back: f64 = fmt_f64(v).parse().unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }

        #[test]
        fn records_round_trip(nx in 8usize..12, ny in 8usize..12, t in -1e3f64..1e3, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::new(nx, ny, 1.0).unwrap();
            let vals = (0..g.len()).map(|_| rng.random_range(-1e6..1e6)).collect();
            let f = Field2D::from_values(g, FieldKind::PotentialVorticity, vals).unwrap();
            let m = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
            let bytes = encode_records(&[Record::from_field(&f, t), Record::from_matrix(&m, 2.0)]);
            let mut recs = decode_records(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(recs.pop().unwrap().into_matrix(), m);
            let r = recs.pop().unwrap();
            prop_assert_eq!(r.time, t);
            prop_assert_eq!(r.into_field(1.0).unwrap(), f);
        }
    }
}
