//! Datasets: synthetic generation, the binary on-disk format, CSV import and
//! label files.
//!
//! Binary layout (little-endian): magic `0xDA7A` u16, format version u8,
//! kind u8 (0 dense, 1 sparse counts), dim u32, N u64, then N rows. Dense
//! rows are `dim` f64 values; sparse rows are `nnz` u32 followed by `nnz`
//! (index u32, count u32) pairs. A truth flag u8 follows; when it is 1, N
//! u64 labels come last.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::expfam::{FamilyKind, FamilySpec};
use crate::rng::stream_rng;

pub const DATA_MAGIC: u16 = 0xDA7A;
pub const DATA_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic 0x{0:04x}")]
    BadMagic(u16),
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dataset kind {0}")]
    UnknownKind(u8),
    #[error("file ends before the declared data")]
    Truncated,
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },
    #[error("dataset has no rows")]
    Empty,
    #[error("expected {expected} truth labels, got {got}")]
    TruthLength { expected: usize, got: usize },
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: cannot parse label {text:?}")]
    BadLabel { line: usize, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Real-valued rows (gaussian family).
    Dense,
    /// Nonnegative integer count rows (multinomial family).
    Counts,
}

/// Generator settings for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub clusters: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Means are drawn uniformly from `[-half_width, half_width]^dim`.
    pub half_width: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            clusters: 10,
            min_size: 1000,
            max_size: 2000,
            dim: 2,
            sigma: 1.0,
            seed: 1,
            half_width: 50.0,
        }
    }
}

/// Rows stored densely in row-major order (counts are stored as f64).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DataKind,
    dim: usize,
    values: Vec<f64>,
    pub truth: Option<Vec<u64>>,
    pub meta: Option<SyntheticParams>,
}

impl Dataset {
    pub fn new(kind: DataKind, dim: usize, values: Vec<f64>, truth: Option<Vec<u64>>) -> Result<Self, DataError> {
        if dim == 0 || values.is_empty() {
            return Err(DataError::Empty);
        }
        if !values.len().is_multiple_of(dim) {
            return Err(DataError::InvalidRow {
                row: values.len() / dim,
                reason: format!("incomplete row of dimension {dim}"),
            });
        }
        for (row, r) in values.chunks_exact(dim).enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { row });
            }
            if kind == DataKind::Counts {
                if r.iter()
                    .any(|&v| v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX))
                {
                    return Err(DataError::InvalidRow {
                        row,
                        reason: "counts must be nonnegative integers".into(),
                    });
                }
                if r.iter().all(|&v| v == 0.0) {
                    return Err(DataError::InvalidRow {
                        row,
                        reason: "empty document".into(),
                    });
                }
            }
        }
        let n = values.len() / dim;
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(DataError::TruthLength {
                    expected: n,
                    got: t.len(),
                });
            }
        }
        Ok(Dataset {
            kind,
            dim,
            values,
            truth,
            meta: None,
        })
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Whether `spec` can model this data.
    pub fn matches(&self, spec: &FamilySpec) -> bool {
        let kind_ok = matches!(
            (self.kind, &spec.kind),
            (DataKind::Dense, FamilyKind::Gaussian { .. }) | (DataKind::Counts, FamilyKind::Multinomial { .. })
        );
        kind_ok && spec.dim == self.dim
    }

    /// Keeps the first `n` rows.
    pub fn truncate(&mut self, n: usize) {
        self.values.truncate(n * self.dim);
        if let Some(t) = &mut self.truth {
            t.truncate(n);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DataError> {
        w.write_all(&DATA_MAGIC.to_le_bytes())?;
        w.write_all(&[DATA_VERSION, self.kind_byte()])?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for row in self.rows() {
            match self.kind {
                DataKind::Dense => {
                    for v in row {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                DataKind::Counts => {
                    let nnz = row.iter().filter(|&&v| v != 0.0).count() as u32;
                    w.write_all(&nnz.to_le_bytes())?;
                    for (i, &v) in row.iter().enumerate().filter(|(_, &v)| v != 0.0) {
                        w.write_all(&(i as u32).to_le_bytes())?;
                        w.write_all(&(v as u32).to_le_bytes())?;
                    }
                }
            }
        }
        match &self.truth {
            Some(t) => {
                w.write_all(&[1])?;
                for &l in t {
                    w.write_all(&l.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    fn kind_byte(&self) -> u8 {
        match self.kind {
            DataKind::Dense => 0,
            DataKind::Counts => 1,
        }
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DataError> {
        let magic = u16::from_le_bytes(read_array(r)?);
        if magic != DATA_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let [version, kind] = read_array(r)?;
        if version != DATA_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let kind = match kind {
            0 => DataKind::Dense,
            1 => DataKind::Counts,
            k => return Err(DataError::UnknownKind(k)),
        };
        let dim = u32::from_le_bytes(read_array(r)?) as usize;
        let n = u64::from_le_bytes(read_array(r)?) as usize;
        if dim == 0 || n == 0 {
            return Err(DataError::Empty);
        }
        // grow as rows arrive so a corrupt N cannot force a huge allocation
        let mut values = Vec::new();
        for row in 0..n {
            match kind {
                DataKind::Dense => {
                    for _ in 0..dim {
                        let v = f64::from_le_bytes(read_array(r)?);
                        if !v.is_finite() {
                            return Err(DataError::NonFinite { row });
                        }
                        values.push(v);
                    }
                }
                DataKind::Counts => {
                    let start = values.len();
                    values.resize(start + dim, 0.0);
                    let nnz = u32::from_le_bytes(read_array(r)?);
                    for _ in 0..nnz {
                        let idx = u32::from_le_bytes(read_array(r)?) as usize;
                        let cnt = u32::from_le_bytes(read_array(r)?);
                        if idx >= dim {
                            return Err(DataError::InvalidRow {
                                row,
                                reason: format!("index {idx} out of range"),
                            });
                        }
                        values[start + idx] += f64::from(cnt);
                    }
                }
            }
        }
        let [flag] = read_array(r)?;
        let truth = match flag {
            0 => None,
            1 => Some(
                (0..n)
                    .map(|_| read_array(r).map(u64::from_le_bytes))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            _ => {
                return Err(DataError::InvalidRow {
                    row: n,
                    reason: "bad truth flag".into(),
                })
            }
        };
        Dataset::new(kind, dim, values, truth)
    }

    /// Reads dense rows from a CSV file. A first record that does not parse
    /// as numbers is treated as a header. The dimension is the column count.
    pub fn import_csv(path: &Path) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut values = Vec::new();
        let mut dim = 0;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(row) => {
                    if dim == 0 {
                        dim = row.len();
                    } else if row.len() != dim {
                        return Err(DataError::InvalidRow {
                            row: values.len() / dim,
                            reason: format!("{} columns, expected {dim}", row.len()),
                        });
                    }
                    values.extend(row);
                }
                Err(_) if i == 0 => continue,
                Err(e) => {
                    return Err(DataError::InvalidRow {
                        row: values.len().checked_div(dim).unwrap_or(0),
                        reason: e.to_string(),
                    })
                }
            }
        }
        if dim == 0 {
            return Err(DataError::Empty);
        }
        Dataset::new(DataKind::Dense, dim, values, None)
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], DataError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DataError::Truncated,
        _ => DataError::Io(e),
    })?;
    Ok(buf)
}

/// Well-separated-by-default isotropic Gaussian clusters with uniformly
/// drawn means and sizes. Rows are shuffled; the truth labels follow them.
pub fn gen_synthetic(p: &SyntheticParams) -> Result<Dataset, DataError> {
    if p.clusters == 0 || p.dim == 0 {
        return Err(DataError::InvalidParams("clusters and dim must be positive".into()));
    }
    if p.min_size == 0 || p.min_size > p.max_size {
        return Err(DataError::InvalidParams(format!(
            "size range [{}, {}]",
            p.min_size, p.max_size
        )));
    }
    if !(p.sigma > 0.0 && p.sigma.is_finite()) || !(p.half_width >= 0.0 && p.half_width.is_finite()) {
        return Err(DataError::InvalidParams(
            "sigma must be positive and the box finite".into(),
        ));
    }
    let mut rng = stream_rng(p.seed, 0, 0);
    let noise = Normal::new(0.0, p.sigma).expect("sigma validated");
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::new();
    for k in 0..p.clusters {
        let mean: Vec<f64> = (0..p.dim)
            .map(|_| rng.random_range(-p.half_width..=p.half_width))
            .collect();
        let size = rng.random_range(p.min_size..=p.max_size);
        for _ in 0..size {
            rows.push((k as u64, mean.iter().map(|m| m + noise.sample(&mut rng)).collect()));
        }
    }
    rows.shuffle(&mut rng);
    let truth = rows.iter().map(|r| r.0).collect();
    let values = rows.into_iter().flat_map(|r| r.1).collect();
    let mut ds = Dataset::new(DataKind::Dense, p.dim, values, Some(truth))?;
    ds.meta = Some(p.clone());
    Ok(ds)
}

/// One label per line.
pub fn write_labels(path: &Path, labels: &[u64]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one label per line; blank lines are skipped.
pub fn read_labels(path: &Path) -> Result<Vec<u64>, DataError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|_| DataError::BadLabel {
            line: i + 1,
            text: t.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticParams {
        SyntheticParams {
            clusters: 3,
            min_size: 5,
            max_size: 9,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn generator_is_deterministic_and_sized() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert!((15..=27).contains(&a.len()));
        let truth = a.truth.as_ref().unwrap();
        for k in 0..3u64 {
            let n = truth.iter().filter(|&&l| l == k).count();
            assert!((5..=9).contains(&n));
        }
    }

    #[test]
    fn single_cluster_has_one_label() {
        let ds = gen_synthetic(&SyntheticParams { clusters: 1, ..small() }).unwrap();
        assert!(ds.truth.unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn generator_rejects_bad_range() {
        assert!(matches!(
            gen_synthetic(&SyntheticParams {
                min_size: 10,
                max_size: 5,
                ..small()
            }),
            Err(DataError::InvalidParams(_))
        ));
    }

    #[test]
    fn binary_round_trip_dense_and_sparse() {
        let dense = gen_synthetic(&small()).unwrap();
        let mut buf = Vec::new();
        dense.write_to(&mut buf).unwrap();
        let mut back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        back.meta = dense.meta.clone();
        assert_eq!(back, dense);

        let counts = Dataset::new(DataKind::Counts, 4, vec![2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 7.0], None).unwrap();
        let mut buf = Vec::new();
        counts.write_to(&mut buf).unwrap();
        // header 16 + rows (4 + 2*8) + (4 + 8) + flag 1
        assert_eq!(buf.len(), 16 + 20 + 12 + 1);
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), counts);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = gen_synthetic(&small()).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert!(matches!(
            Dataset::read_from(&mut &buf[..buf.len() - 3]),
            Err(DataError::Truncated)
        ));
        let mut bad = buf.clone();
        bad[0] = 0;
        assert!(matches!(
            Dataset::read_from(&mut bad.as_slice()),
            Err(DataError::BadMagic(_))
        ));
        let mut nan = buf.clone();
        nan[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            Dataset::read_from(&mut nan.as_slice()),
            Err(DataError::NonFinite { row: 0 })
        ));
        assert!(matches!(
            Dataset::new(DataKind::Dense, 1, vec![f64::INFINITY], None),
            Err(DataError::NonFinite { row: 0 })
        ));
    }

    #[test]
    fn csv_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x,y,z\n1,2,3\n4.5, -1, 0\n").unwrap();
        let ds = Dataset::import_csv(&p).unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.values(), &[1.0, 2.0, 3.0, 4.5, -1.0, 0.0]);
        std::fs::write(&p, "1,2\n3,nan\n").unwrap();
        assert!(matches!(Dataset::import_csv(&p), Err(DataError::NonFinite { row: 1 })));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        write_labels(&p, &[3, 1, 4]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![3, 1, 4]);
    }
}
