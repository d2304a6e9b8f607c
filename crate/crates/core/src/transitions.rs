//! Sparse transition statistics over training sessions.
//!
//! Counts are log-compressed and then normalized twice: per source (each
//! row is the distribution of successors) and per target (each column is the
//! distribution of predecessors). Both views are kept in compressed form so
//! a source's successors and a target's predecessors are each available in
//! time proportional to their number of entries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::corpus::{Session, TrackId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How raw counts are compressed before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogMode {
    /// `ln(1 + c)`: every observed transition keeps positive weight.
    #[default]
    Log1p,
    /// `ln(c)` on nonzero counts; count-1 transitions map to 0 and leave the support.
    LogNonzero,
}

impl FromStr for LogMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log1p" => Ok(LogMode::Log1p),
            "log_nonzero" => Ok(LogMode::LogNonzero),
            other => Err(Error::config(format!("unknown log mode {other:?} (expected log1p or log_nonzero)"))),
        }
    }
}

impl fmt::Display for LogMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogMode::Log1p => "log1p",
            LogMode::LogNonzero => "log_nonzero",
        })
    }
}

/// Observed adjacent-pair counts. Only positive counts are stored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransitionCounts {
    dim: usize,
    entries: BTreeMap<(TrackId, TrackId), u64>,
}

impl TransitionCounts {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, source: TrackId, target: TrackId) -> u64 {
        self.entries.get(&(source, target)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TrackId, TrackId, u64)> + '_ {
        self.entries.iter().map(|(&(s, t), &c)| (s, t, c))
    }

    /// Adds `count` occurrences of `source → target`.
    pub fn add(&mut self, source: TrackId, target: TrackId, count: u64) -> Result<()> {
        for id in [source, target] {
            if id as usize >= self.dim {
                return Err(Error::Index { index: id as usize, bound: self.dim });
            }
        }
        if count > 0 {
            *self.entries.entry((source, target)).or_insert(0) += count;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &TransitionCounts) -> Result<()> {
        for (s, t, c) in other.iter() {
            self.add(s, t, c)?;
        }
        Ok(())
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (s, t, c) in self.iter() {
            writeln!(w, "{s}\t{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R, dim: usize) -> Result<Self> {
        let mut counts = Self::new(dim);
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse { line: n + 1, message: m };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", f.len())));
            }
            let s = f[0].parse().map_err(|_| bad(format!("invalid source {:?}", f[0])))?;
            let t = f[1].parse().map_err(|_| bad(format!("invalid target {:?}", f[1])))?;
            let c = f[2].parse().map_err(|_| bad(format!("invalid count {:?}", f[2])))?;
            counts.add(s, t, c).map_err(|e| bad(e.to_string()))?;
        }
        Ok(counts)
    }
}

/// Counts every adjacent pair across `sessions` (self-transitions included).
pub fn build_counts(sessions: &[Session], dim: usize) -> Result<TransitionCounts> {
    let mut counts = TransitionCounts::new(dim);
    for s in sessions {
        for w in s.tracks.windows(2) {
            counts.add(w[0], w[1], 1)?;
        }
    }
    Ok(counts)
}

/// Compressed sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<TrackId>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(TrackId, TrackId, T)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices: Vec<TrackId> = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(TrackId, TrackId)> = None;
        for (r, c, v) in triplets {
            assert!((r as usize) < n_rows && (c as usize) < n_cols, "triplet out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indptr[r as usize + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Self { n_rows, n_cols, indptr, indices, values }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices (ascending) and values of row `r`.
    pub fn row(&self, r: usize) -> (&[TrackId], &[T]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: TrackId) -> T {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(T::zero(), |k| vals[k])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (TrackId, TrackId, T)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (idx, vals) = self.row(r);
            idx.iter().zip(vals).map(move |(&c, &v)| (r as TrackId, c, v))
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.n_cols, self.n_rows, self.triplets().map(|(r, c, v)| (c, r, v)).collect())
    }

    /// Divides every nonempty row by its sum.
    fn row_normalized(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.n_rows {
            let (a, b) = (self.indptr[r], self.indptr[r + 1]);
            let sum: T = out.values[a..b].iter().copied().sum();
            if sum > T::zero() {
                for v in &mut out.values[a..b] {
                    *v /= sum;
                }
            }
        }
        out
    }
}

/// Log-compresses stored counts. Zero results are not stored.
pub fn log_transform<T: Scalar>(counts: &TransitionCounts, mode: LogMode) -> CsrMatrix<T> {
    let triplets = counts
        .iter()
        .filter_map(|(s, t, c)| {
            let c = c as f64;
            let v = match mode {
                LogMode::Log1p => c.ln_1p(),
                LogMode::LogNonzero => c.ln(),
            };
            (v > 0.0).then(|| (s, t, T::lit(v)))
        })
        .collect();
    CsrMatrix::from_triplets(counts.dim(), counts.dim(), triplets)
}

/// Source-wise and target-wise normalized transition matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTransitions<T> {
    /// Row `i`: distribution over successors of source `i`.
    row_norm: CsrMatrix<T>,
    /// Row `j`: distribution over predecessors of target `j`
    /// (the column-normalized matrix stored transposed).
    col_norm_by_target: CsrMatrix<T>,
}

pub fn normalize<T: Scalar>(log_matrix: &CsrMatrix<T>) -> NormalizedTransitions<T> {
    NormalizedTransitions {
        row_norm: log_matrix.row_normalized(),
        col_norm_by_target: log_matrix.transpose().row_normalized(),
    }
}

impl<T: Scalar> NormalizedTransitions<T> {
    pub fn from_counts(counts: &TransitionCounts, mode: LogMode) -> Self {
        normalize(&log_transform(counts, mode))
    }

    pub fn from_sessions(sessions: &[Session], dim: usize, mode: LogMode) -> Result<Self> {
        Ok(Self::from_counts(&build_counts(sessions, dim)?, mode))
    }

    pub fn dim(&self) -> usize {
        self.row_norm.n_rows()
    }

    /// Successors of `source` with their source-normalized probabilities.
    pub fn successors(&self, source: TrackId) -> (&[TrackId], &[T]) {
        self.row_norm.row(source as usize)
    }

    /// Predecessors of `target` with their target-normalized probabilities.
    pub fn predecessors(&self, target: TrackId) -> (&[TrackId], &[T]) {
        self.col_norm_by_target.row(target as usize)
    }

    /// Row-normalized entry `(source, target)`.
    pub fn row_prob(&self, source: TrackId, target: TrackId) -> T {
        self.row_norm.get(source as usize, target)
    }

    /// Column-normalized entry `(source, target)`.
    pub fn col_prob(&self, source: TrackId, target: TrackId) -> T {
        self.col_norm_by_target.get(target as usize, source)
    }

    pub fn row_norm(&self) -> &CsrMatrix<T> {
        &self.row_norm
    }

    /// The column-normalized matrix, transposed (row `j` = column `j`).
    pub fn col_norm_transposed(&self) -> &CsrMatrix<T> {
        &self.col_norm_by_target
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(tracks: &[TrackId]) -> Session {
        Session::new("s", tracks.to_vec(), false)
    }

    #[test]
    fn counts_adjacent_pairs() {
        let c = build_counts(&[s(&[0, 1, 2]), s(&[0, 1])], 3).unwrap();
        assert_eq!(c.nnz(), 2);
        assert_eq!(c.get(0, 1), 2);
        assert_eq!(c.get(1, 2), 1);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn self_transitions_kept_and_empty_input_empty() {
        let c = build_counts(&[s(&[4, 4])], 5).unwrap();
        assert_eq!(c.get(4, 4), 1);
        assert_eq!(build_counts(&[], 5).unwrap().nnz(), 0);
    }

    #[test]
    fn out_of_range_track_is_an_error() {
        assert!(build_counts(&[s(&[0, 9])], 3).is_err());
    }

    #[test]
    fn log1p_values() {
        let mut c = TransitionCounts::new(3);
        c.add(0, 1, 1).unwrap();
        let m: CsrMatrix<f64> = log_transform(&c, LogMode::Log1p);
        assert!((m.get(0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.nnz(), 1);
    }

    #[test]
    fn log1p_of_e_minus_one_is_one() {
        // Counts are integral; check the transform itself at c = e - 1.
        let c = std::f64::consts::E - 1.0;
        assert!((c.ln_1p() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_nonzero_drops_singletons() {
        let mut c = TransitionCounts::new(3);
        c.add(0, 1, 1).unwrap();
        c.add(0, 2, 3).unwrap();
        let m: CsrMatrix<f64> = log_transform(&c, LogMode::LogNonzero);
        assert_eq!(m.nnz(), 1);
        assert!((m.get(0, 2) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn row_normalization_is_proportional() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 3.0), (1, 1, 2.0)]);
        let n = normalize(&m);
        assert_eq!(n.row_prob(0, 0), 0.25);
        assert_eq!(n.row_prob(0, 2), 0.75);
        assert_eq!(n.row_prob(1, 1), 1.0);
        // Column 0 has a single predecessor.
        assert_eq!(n.col_prob(0, 0), 1.0);
    }

    #[test]
    fn log_modes_parse() {
        assert_eq!("log1p".parse::<LogMode>().unwrap(), LogMode::Log1p);
        assert_eq!("log_nonzero".parse::<LogMode>().unwrap(), LogMode::LogNonzero);
        assert!("ln".parse::<LogMode>().is_err());
        assert_eq!(LogMode::LogNonzero.to_string(), "log_nonzero");
    }

    #[test]
    fn counts_tsv_round_trip() {
        let c = build_counts(&[s(&[0, 1, 2, 0]), s(&[2, 0])], 3).unwrap();
        let mut buf = Vec::new();
        c.write_tsv(&mut buf).unwrap();
        assert_eq!(TransitionCounts::read_tsv(&buf[..], 3).unwrap(), c);
    }

    proptest! {
        #[test]
        fn rows_and_columns_are_stochastic(
            entries in prop::collection::vec((0u32..40, 0u32..40, 1u64..50), 0..300)
        ) {
            let mut c = TransitionCounts::new(40);
            for (s, t, n) in entries {
                c.add(s, t, n).unwrap();
            }
            let n: NormalizedTransitions<f64> = NormalizedTransitions::from_counts(&c, LogMode::Log1p);
            for i in 0..40 {
                let (_, v) = n.successors(i);
                if !v.is_empty() {
                    prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
                let (_, v) = n.predecessors(i);
                if !v.is_empty() {
                    prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn higher_count_means_higher_probability(a in 1u64..1000, b in 1u64..1000) {
            let mut c = TransitionCounts::new(3);
            c.add(0, 1, a).unwrap();
            c.add(0, 2, b).unwrap();
            let n: NormalizedTransitions<f64> = NormalizedTransitions::from_counts(&c, LogMode::Log1p);
            if a > b {
                prop_assert!(n.row_prob(0, 1) > n.row_prob(0, 2));
            }
        }

        #[test]
        fn counts_ignore_session_order(
            sessions in prop::collection::vec(prop::collection::vec(0u32..10, 2..6), 1..8),
            rot in 0usize..8,
        ) {
            let a: Vec<Session> = sessions.iter().map(|t| s(t)).collect();
            let mut b = a.clone();
            let k = rot % b.len();
            b.rotate_left(k);
            b.reverse();
            prop_assert_eq!(build_counts(&a, 10).unwrap(), build_counts(&b, 10).unwrap());
        }
    }
}
