//! Ranking metrics and corpus statistics.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::corpus::{Session, TrackId, TrainingInstance};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [5, 10];

/// 1-based rank of `target`: one plus the number of tracks scoring strictly
/// higher, plus the number tied with it that have a smaller id.
pub fn rank_of_target<T: PartialOrd + Copy>(scores: &[T], target: TrackId) -> usize {
    let t = target as usize;
    let s = scores[t];
    let higher = scores.iter().filter(|&&x| x > s).count();
    let tied_before = scores[..t].iter().filter(|&&x| x == s).count();
    1 + higher + tied_before
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    All,
    Shuffle,
    NonShuffle,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::All, Segment::Shuffle, Segment::NonShuffle];

    pub fn name(self) -> &'static str {
        match self {
            Segment::All => "all",
            Segment::Shuffle => "shuffle",
            Segment::NonShuffle => "non_shuffle",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Recall,
    Mrr,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Recall, Metric::Mrr, Metric::Ndcg];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Mrr => "mrr",
            Metric::Ndcg => "ndcg",
        }
    }

    pub fn at(self, rank: usize, k: usize) -> f64 {
        match self {
            Metric::Recall => recall_at_k(rank, k),
            Metric::Mrr => mrr_at_k(rank, k),
            Metric::Ndcg => ndcg_at_k(rank, k),
        }
    }
}

/// Running sums for one segment.
#[derive(Clone, Debug, PartialEq)]
struct Accumulator {
    count: usize,
    // sums[metric][k index]
    sums: [Vec<f64>; 3],
}

impl Accumulator {
    fn new(n_ks: usize) -> Self {
        Self { count: 0, sums: [vec![0.0; n_ks], vec![0.0; n_ks], vec![0.0; n_ks]] }
    }
}

/// Averaged metrics overall and per shuffle segment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    ks: Vec<usize>,
    segments: [Accumulator; 3],
}

impl MetricsReport {
    /// Aggregates `(rank, shuffle)` pairs in order.
    pub fn from_ranks(ranks: &[(usize, bool)], ks: &[usize]) -> Self {
        let mut segments = [Accumulator::new(ks.len()), Accumulator::new(ks.len()), Accumulator::new(ks.len())];
        for &(rank, shuffle) in ranks {
            let seg = if shuffle { Segment::Shuffle } else { Segment::NonShuffle };
            for s in [Segment::All, seg] {
                let acc = &mut segments[s.index()];
                acc.count += 1;
                for (mi, m) in Metric::ALL.iter().enumerate() {
                    for (ki, &k) in ks.iter().enumerate() {
                        acc.sums[mi][ki] += m.at(rank, k);
                    }
                }
            }
        }
        Self { ks: ks.to_vec(), segments }
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.segments[segment.index()].count
    }

    /// Mean metric over the segment; `None` if the segment is empty or `k`
    /// was not requested.
    pub fn get(&self, segment: Segment, metric: Metric, k: usize) -> Option<f64> {
        let ki = self.ks.iter().position(|&x| x == k)?;
        let acc = &self.segments[segment.index()];
        if acc.count == 0 {
            return None;
        }
        let mi = Metric::ALL.iter().position(|&m| m == metric).expect("metric listed");
        Some(acc.sums[mi][ki] / acc.count as f64)
    }

    pub fn mrr(&self, segment: Segment, k: usize) -> Option<f64> {
        self.get(segment, Metric::Mrr, k)
    }

    /// `segment,metric,K,value,count`; absent values are written as an empty field.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "segment,metric,K,value,count")?;
        for seg in Segment::ALL {
            for m in Metric::ALL {
                for &k in &self.ks {
                    let value = self.get(seg, m, k).map(|v| format!("{v}")).unwrap_or_default();
                    writeln!(w, "{},{},{},{},{}", seg.name(), m.name(), k, value, self.count(seg))?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12} {:>7}", "segment", "count")?;
        for m in Metric::ALL {
            for &k in &self.ks {
                write!(f, " {:>10}", format!("{}@{}", m.name(), k))?;
            }
        }
        writeln!(f)?;
        for seg in Segment::ALL {
            write!(f, "{:<12} {:>7}", seg.name(), self.count(seg))?;
            for m in Metric::ALL {
                for &k in &self.ks {
                    match self.get(seg, m, k) {
                        Some(v) => write!(f, " {v:>10.4}")?,
                        None => write!(f, " {:>10}", "-")?,
                    }
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Ranks every instance with `scorer` in parallel; aggregation follows
/// instance order so results do not depend on thread count.
pub fn evaluate_with<T, F>(instances: &[TrainingInstance], ks: &[usize], scorer: F) -> Result<MetricsReport>
where
    T: PartialOrd + Copy,
    F: Fn(&TrainingInstance) -> Result<Vec<T>> + Sync,
{
    let ranks: Vec<(usize, bool)> = instances
        .par_iter()
        .map(|inst| {
            let scores = scorer(inst)?;
            if inst.label as usize >= scores.len() {
                return Err(Error::Index { index: inst.label as usize, bound: scores.len() });
            }
            Ok((rank_of_target(&scores, inst.label), inst.shuffle))
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_ranks(&ranks, ks))
}

/// Model metrics at [`DEFAULT_KS`].
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, instances: &[TrainingInstance]) -> Result<MetricsReport> {
    evaluate_with(instances, &DEFAULT_KS, |inst| params.score(&inst.prefix))
}

/// Percentage of adjacent pairs whose `(source, target)` occurs exactly once
/// across `sessions`.
pub fn unique_transition_rate<S: AsRef<[TrackId]>>(sessions: &[S]) -> Result<f64> {
    let mut counts: HashMap<(TrackId, TrackId), u64> = HashMap::new();
    let mut total = 0u64;
    for s in sessions {
        for w in s.as_ref().windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no transitions in session set".into()));
    }
    let unique = counts.values().filter(|&&c| c == 1).count();
    Ok(unique as f64 / total as f64 * 100.0)
}

impl AsRef<[TrackId]> for Session {
    fn as_ref(&self) -> &[TrackId] {
        &self.tracks
    }
}

/// Scores every track by how often it is a training label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopularityBaseline {
    counts: Vec<u64>,
}

impl PopularityBaseline {
    pub fn scores(&self) -> &[u64] {
        &self.counts
    }

    pub fn evaluate(&self, instances: &[TrainingInstance], ks: &[usize]) -> Result<MetricsReport> {
        evaluate_with(instances, ks, |_| Ok(self.counts.clone()))
    }
}

pub fn popularity_baseline(train: &[TrainingInstance], vocab_size: usize) -> Result<PopularityBaseline> {
    let mut counts = vec![0u64; vocab_size];
    for inst in train {
        let l = inst.label as usize;
        if l >= vocab_size {
            return Err(Error::Index { index: l, bound: vocab_size });
        }
        counts[l] += 1;
    }
    Ok(PopularityBaseline { counts })
}
