//! Sparse row-major containers for the three data modalities (bag-of-words
//! counts, binary interactions, labelled feature vectors), their text file
//! formats, token-level held-out splitting and seeded minibatching.
//!
//! Rows are documents, users or samples; columns are words, items or labels.
//! All containers are immutable after construction.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid matrix: {0}")]
    Invalid(String),
}

/// Compressed sparse row storage of a non-negative integer matrix.
///
/// Zeros are never stored. Row totals are cached at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCountMatrix {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    counts: Vec<u32>,
    totals: Vec<u64>,
}

impl SparseCountMatrix {
    /// Builds a matrix from per-row `(column, count)` lists. Entries within a
    /// row may come in any order; duplicates are summed and zero counts dropped.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, u32)>>) -> Result<Self, DataError> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut counts = Vec::new();
        let mut totals = Vec::with_capacity(rows.len());
        indptr.push(0);
        for (j, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut total = 0u64;
            let mut last: Option<u32> = None;
            for (col, count) in row {
                if col as usize >= n_cols {
                    return Err(DataError::Invalid(format!(
                        "row {j}: column {col} out of range for {n_cols} columns"
                    )));
                }
                if count == 0 {
                    continue;
                }
                total += u64::from(count);
                if last == Some(col) {
                    let c = counts.last_mut().expect("entry exists");
                    *c = u32::checked_add(*c, count).ok_or_else(|| {
                        DataError::Invalid(format!("row {j}: count overflow at column {col}"))
                    })?;
                } else {
                    indices.push(col);
                    counts.push(count);
                    last = Some(col);
                }
            }
            totals.push(total);
            indptr.push(indices.len());
        }
        Ok(Self {
            n_cols,
            indptr,
            indices,
            counts,
            totals,
        })
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            counts: Vec::new(),
            totals: vec![0; n_rows],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.totals.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Column indices and counts of row `j`.
    pub fn row(&self, j: usize) -> (&[u32], &[u32]) {
        let (a, b) = (self.indptr[j], self.indptr[j + 1]);
        (&self.indices[a..b], &self.counts[a..b])
    }

    pub fn row_entries(&self, j: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        let (idx, cnt) = self.row(j);
        idx.iter().zip(cnt).map(|(&i, &c)| (i as usize, c))
    }

    pub fn row_total(&self, j: usize) -> u64 {
        self.totals[j]
    }

    pub fn totals(&self) -> &[u64] {
        &self.totals
    }

    pub fn get(&self, j: usize, col: usize) -> u32 {
        let (idx, cnt) = self.row(j);
        match idx.binary_search(&(col as u32)) {
            Ok(k) => cnt[k],
            Err(_) => 0,
        }
    }

    /// Dense copy of row `j` as floats.
    pub fn dense_row(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (c, n) in self.row_entries(j) {
            out[c] = f64::from(n);
        }
        out
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut counts = Vec::new();
        let mut totals = Vec::with_capacity(rows.len());
        indptr.push(0);
        for &j in rows {
            let (idx, cnt) = self.row(j);
            indices.extend_from_slice(idx);
            counts.extend_from_slice(cnt);
            totals.push(self.totals[j]);
            indptr.push(indices.len());
        }
        Self {
            n_cols: self.n_cols,
            indptr,
            indices,
            counts,
            totals,
        }
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn is_binary(&self) -> bool {
        self.counts.iter().all(|&c| c == 1)
    }

    /// Sorted `(row, col, count)` triplets, 0-based.
    pub fn triplets(&self) -> Vec<(usize, usize, u32)> {
        (0..self.n_rows())
            .flat_map(|j| self.row_entries(j).map(move |(c, n)| (j, c, n)))
            .collect()
    }
}

/// A count matrix whose stored entries are all exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix(SparseCountMatrix);

impl BinaryMatrix {
    /// Clamps every stored count to one.
    pub fn from_counts(m: SparseCountMatrix) -> Self {
        if m.is_binary() {
            return Self(m);
        }
        let rows = (0..m.n_rows())
            .map(|j| m.row(j).0.iter().map(|&c| (c, 1)).collect())
            .collect();
        Self(SparseCountMatrix::from_rows(m.n_cols(), rows).expect("indices already validated"))
    }

    pub fn from_rows(n_cols: usize, rows: Vec<Vec<u32>>) -> Result<Self, DataError> {
        let rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(|c| (c, 1)).collect())
            .collect();
        Ok(Self::from_counts(SparseCountMatrix::from_rows(
            n_cols, rows,
        )?))
    }

    pub fn as_counts(&self) -> &SparseCountMatrix {
        &self.0
    }

    pub fn into_counts(self) -> SparseCountMatrix {
        self.0
    }

    pub fn n_rows(&self) -> usize {
        self.0.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.0.n_cols()
    }

    pub fn row(&self, j: usize) -> &[u32] {
        self.0.row(j).0
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select_rows(rows))
    }
}

/// Sparse real-valued feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_dims: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(n_dims: usize, rows: Vec<Vec<(u32, f64)>>) -> Result<Self, DataError> {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (j, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(i, _)| i);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(DataError::Invalid(format!(
                        "row {j}: duplicate feature index {}",
                        w[0].0
                    )));
                }
            }
            for (i, v) in row {
                if i as usize >= n_dims {
                    return Err(DataError::Invalid(format!(
                        "row {j}: feature index {i} out of range for {n_dims} dims"
                    )));
                }
                if !v.is_finite() {
                    return Err(DataError::Invalid(format!(
                        "row {j}: non-finite feature value"
                    )));
                }
                indices.push(i);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            n_dims,
            indptr,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn row(&self, j: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[j], self.indptr[j + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn dense_row(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dims];
        let (idx, val) = self.row(j);
        for (&i, &v) in idx.iter().zip(val) {
            out[i as usize] = v;
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for &j in rows {
            let (idx, val) = self.row(j);
            indices.extend_from_slice(idx);
            values.extend_from_slice(val);
            indptr.push(indices.len());
        }
        Self {
            n_dims: self.n_dims,
            indptr,
            indices,
            values,
        }
    }
}

/// Result of [`split_heldout`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutSplit {
    pub observed: SparseCountMatrix,
    pub heldout: SparseCountMatrix,
    pub seed: u64,
    pub fraction: f64,
}

fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_fields<const N: usize>(
    path: &Path,
    line_no: usize,
    line: &str,
    what: &str,
) -> Result<[u64; N], DataError> {
    let mut out = [0u64; N];
    let mut it = line.split_whitespace();
    for slot in out.iter_mut() {
        let tok = it
            .next()
            .ok_or_else(|| parse_err(path, line_no, format!("expected {N} fields ({what})")))?;
        *slot = tok
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad integer {tok:?} ({what})")))?;
    }
    if it.next().is_some() {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {N} fields ({what})"),
        ));
    }
    Ok(out)
}

/// Reads a bag-of-words triplet file: header `N V NNZ`, then `doc word count`
/// lines with 1-based ids. Duplicate triplets are summed.
pub fn load_bow(path: &Path) -> Result<SparseCountMatrix, DataError> {
    let text = read_file(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header \"N V NNZ\""))?;
    let [n, v, nnz] = parse_fields::<3>(path, hline, header, "N V NNZ")?;
    let (n, v) = (n as usize, v as usize);
    let mut rows: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    let mut seen = 0u64;
    for (line_no, line) in lines {
        let [doc, word, count] = parse_fields::<3>(path, line_no, line, "doc word count")?;
        if doc == 0 || doc as usize > n {
            return Err(parse_err(
                path,
                line_no,
                format!("document id {doc} outside 1..={n}"),
            ));
        }
        if word == 0 || word as usize > v {
            return Err(parse_err(
                path,
                line_no,
                format!("word id {word} outside 1..={v}"),
            ));
        }
        if count == 0 {
            return Err(parse_err(path, line_no, "count must be positive"));
        }
        let count =
            u32::try_from(count).map_err(|_| parse_err(path, line_no, "count exceeds 32 bits"))?;
        rows[doc as usize - 1].push((word as u32 - 1, count));
        seen += 1;
    }
    if seen != nnz {
        return Err(parse_err(
            path,
            hline,
            format!("header declares {nnz} triplets but file has {seen}"),
        ));
    }
    SparseCountMatrix::from_rows(v, rows)
}

/// Reads a binary interaction file (bag-of-words layout). Counts above one are
/// clamped to one with a warning.
pub fn load_binary(path: &Path) -> Result<BinaryMatrix, DataError> {
    let m = load_bow(path)?;
    if !m.is_binary() {
        warn!(
            "{}: counts greater than 1 clamped to 1 (max count {})",
            path.display(),
            m.max_count()
        );
    }
    Ok(BinaryMatrix::from_counts(m))
}

/// Writes the bag-of-words triplet format with canonical (row, column) order.
pub fn save_bow(m: &SparseCountMatrix, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{} {} {}", m.n_rows(), m.n_cols(), m.nnz()).map_err(io_err)?;
    for (j, c, n) in m.triplets() {
        writeln!(w, "{} {} {}", j + 1, c + 1, n).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a multi-label file: header `N D L`, then one line per sample of the
/// form `l1,l2,... i1:v1 i2:v2 ...` with 0-based indices. The label field may
/// be empty, in which case the line starts with whitespace.
pub fn load_multilabel(path: &Path) -> Result<(FeatureMatrix, BinaryMatrix), DataError> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| parse_err(path, 1, "missing header \"N D L\""))?;
    let [n, d, l] = parse_fields::<3>(path, hline, header.trim(), "N D L")?;
    let (n, d, l) = (n as usize, d as usize, l as usize);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace().peekable();
        let mut row_labels = Vec::new();
        // A leading token without ':' is the label list.
        let label_field = if line.starts_with(char::is_whitespace) {
            None
        } else {
            match tokens.peek() {
                Some(t) if !t.contains(':') => tokens.next(),
                _ => None,
            }
        };
        if let Some(field) = label_field {
            for tok in field.split(',').filter(|t| !t.is_empty()) {
                let lab: usize = tok
                    .parse()
                    .map_err(|_| parse_err(path, line_no, format!("bad label {tok:?}")))?;
                if lab >= l {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("label {lab} not below label count {l}"),
                    ));
                }
                row_labels.push(lab as u32);
            }
        }
        let mut row_feats = Vec::new();
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, line_no, format!("bad feature {tok:?}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad feature index {i:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad feature value {v:?}")))?;
            if i >= d {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("feature index {i} not below dimension {d}"),
                ));
            }
            if !v.is_finite() {
                return Err(parse_err(path, line_no, "non-finite feature value"));
            }
            row_feats.push((i as u32, v));
        }
        row_labels.sort_unstable();
        row_labels.dedup();
        features.push(row_feats);
        labels.push(row_labels);
    }
    if features.len() != n {
        return Err(parse_err(
            path,
            hline,
            format!("header declares {n} rows but file has {}", features.len()),
        ));
    }
    let features =
        FeatureMatrix::from_rows(d, features).map_err(|e| parse_err(path, hline, e.to_string()))?;
    let labels = BinaryMatrix::from_rows(l, labels)?;
    Ok((features, labels))
}

/// Writes the multi-label format read by [`load_multilabel`].
pub fn save_multilabel(
    features: &FeatureMatrix,
    labels: &BinaryMatrix,
    path: &Path,
) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if features.n_rows() != labels.n_rows() {
        return Err(DataError::Invalid(
            "feature and label row counts differ".into(),
        ));
    }
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "{} {} {}",
        features.n_rows(),
        features.n_dims(),
        labels.n_cols()
    )
    .map_err(io_err)?;
    for j in 0..features.n_rows() {
        let labs: Vec<String> = labels.row(j).iter().map(|l| l.to_string()).collect();
        let (idx, val) = features.row(j);
        let feats: Vec<String> = idx
            .iter()
            .zip(val)
            .map(|(i, v)| format!("{i}:{v}"))
            .collect();
        writeln!(w, "{} {}", labs.join(","), feats.join(" ")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Splits every word token of every row into observed or held-out, each token
/// going to the held-out part with probability `fraction`.
pub fn split_heldout(
    m: &SparseCountMatrix,
    fraction: f64,
    seed: u64,
) -> Result<HeldoutSplit, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "held-out fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed = Vec::with_capacity(m.n_rows());
    let mut heldout = Vec::with_capacity(m.n_rows());
    for j in 0..m.n_rows() {
        let mut obs = Vec::new();
        let mut held = Vec::new();
        for (c, n) in m.row_entries(j) {
            let h = (0..n).filter(|_| rng.random_bool(fraction)).count() as u32;
            if h > 0 {
                held.push((c as u32, h));
            }
            if n > h {
                obs.push((c as u32, n - h));
            }
        }
        observed.push(obs);
        heldout.push(held);
    }
    Ok(HeldoutSplit {
        observed: SparseCountMatrix::from_rows(m.n_cols(), observed)?,
        heldout: SparseCountMatrix::from_rows(m.n_cols(), heldout)?,
        seed,
        fraction,
    })
}

/// Seeded shuffle of `0..n_rows` cut into consecutive batches.
pub fn minibatches(n_rows: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
