//! Augmented views of sessions.
//!
//! Shuffle sessions get transition-based insertion: for every gap between
//! consecutive tracks `s → t`, a candidate `v` is weighted by the product of
//! the source-normalized probability of `s → v` and the target-normalized
//! probability of `v → t`, renormalized over the candidates with positive
//! weight. One candidate is drawn per gap with a nonempty support and the
//! draws are interleaved into the session, subject to the length cap.
//!
//! Non-shuffle sessions get reorder augmentation: a contiguous window
//! covering a fraction `gamma` of the session is permuted.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::corpus::TrackId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::transitions::NormalizedTransitions;

/// Insertion probabilities for one gap; empty when no track links the gap's
/// source to its target.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRow<T> {
    pub tracks: Vec<TrackId>,
    pub probs: Vec<T>,
}

impl<T: Scalar> CandidateRow<T> {
    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn prob(&self, track: TrackId) -> T {
        self.tracks.iter().position(|&t| t == track).map_or(T::zero(), |k| self.probs[k])
    }

    /// Draws one track by inverse-CDF sampling; `None` for an empty row.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<TrackId> {
        let last = self.tracks.len().checked_sub(1)?;
        let total: T = self.probs.iter().copied().sum();
        let u = T::lit(rng.gen::<f64>()) * total;
        let mut acc = T::zero();
        for (k, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(self.tracks[k]);
            }
        }
        // u landed on the rounding slack above the final partial sum.
        self.probs.iter().rposition(|&p| p > T::zero()).map(|k| self.tracks[k]).or(Some(self.tracks[last]))
    }
}

/// One [`CandidateRow`] per gap of a session.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateDistribution<T> {
    pub rows: Vec<CandidateRow<T>>,
}

/// Per-gap choice: a track to insert, or nothing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionPlan(pub Vec<Option<TrackId>>);

impl InsertionPlan {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn chosen(&self) -> usize {
        self.0.iter().filter(|c| c.is_some()).count()
    }
}

/// Candidate weights for every gap of `tracks`.
pub fn candidate_distribution<T: Scalar>(
    tracks: &[TrackId],
    transitions: &NormalizedTransitions<T>,
) -> CandidateDistribution<T> {
    let rows = tracks
        .windows(2)
        .map(|gap| {
            let (succ, p_out) = transitions.successors(gap[0]);
            let (pred, p_in) = transitions.predecessors(gap[1]);
            // Both index lists are ascending: merge-join on the candidate track.
            let mut row = CandidateRow { tracks: Vec::new(), probs: Vec::new() };
            let (mut i, mut j) = (0, 0);
            while i < succ.len() && j < pred.len() {
                match succ[i].cmp(&pred[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        let w = p_out[i] * p_in[j];
                        if w > T::zero() {
                            row.tracks.push(succ[i]);
                            row.probs.push(w);
                        }
                        i += 1;
                        j += 1;
                    }
                }
            }
            let total: T = row.probs.iter().copied().sum();
            for p in &mut row.probs {
                *p /= total;
            }
            row
        })
        .collect();
    CandidateDistribution { rows }
}

/// One categorical draw per nonempty gap.
pub fn sample_insertions<T: Scalar, R: Rng + ?Sized>(dist: &CandidateDistribution<T>, rng: &mut R) -> InsertionPlan {
    InsertionPlan(dist.rows.iter().map(|row| row.sample(rng)).collect())
}

/// Interleaves the planned tracks into their gaps. When more tracks are
/// planned than `max_len - tracks.len()` slots allow, a uniformly random
/// subset of the planned insertions of exactly that size is kept.
pub fn insert<R: Rng + ?Sized>(tracks: &[TrackId], plan: &InsertionPlan, max_len: usize, rng: &mut R) -> Vec<TrackId> {
    debug_assert_eq!(plan.len(), tracks.len().saturating_sub(1));
    let slots = max_len.saturating_sub(tracks.len());
    let chosen: Vec<usize> = (0..plan.len()).filter(|&i| plan.0[i].is_some()).collect();
    let mut keep = vec![false; plan.len()];
    if chosen.len() <= slots {
        for &g in &chosen {
            keep[g] = true;
        }
    } else {
        for k in index::sample(rng, chosen.len(), slots) {
            keep[chosen[k]] = true;
        }
    }
    let mut out = Vec::with_capacity(tracks.len() + slots.min(chosen.len()));
    for (i, &t) in tracks.iter().enumerate() {
        out.push(t);
        if let Some(Some(c)) = plan.0.get(i) {
            if keep[i] {
                out.push(*c);
            }
        }
    }
    out
}

/// Candidate distribution, sampling and capped insertion in one step.
pub fn transition_augment<T: Scalar, R: Rng + ?Sized>(
    tracks: &[TrackId],
    transitions: &NormalizedTransitions<T>,
    max_len: usize,
    rng: &mut R,
) -> Vec<TrackId> {
    if tracks.len() < 2 {
        return tracks.to_vec();
    }
    let dist = candidate_distribution(tracks, transitions);
    let plan = sample_insertions(&dist, rng);
    insert(tracks, &plan, max_len, rng)
}

pub fn validate_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("reorder gamma must lie in (0, 1], got {gamma}")))
    }
}

/// Permutes a random contiguous window of `floor(gamma * len)` tracks.
pub fn reorder_augment<R: Rng + ?Sized>(tracks: &[TrackId], gamma: f64, rng: &mut R) -> Result<Vec<TrackId>> {
    validate_gamma(gamma)?;
    let mut out = tracks.to_vec();
    let window = (gamma * tracks.len() as f64).floor() as usize;
    if window < 2 {
        return Ok(out);
    }
    let start = rng.gen_range(0..=tracks.len() - window);
    out[start..start + window].shuffle(rng);
    Ok(out)
}

/// Which augmentation applies to which kind of session.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub gamma: f64,
    pub max_len: usize,
    /// Transition-based insertion on shuffle sessions.
    pub transition: bool,
    /// Reorder on non-shuffle sessions.
    pub reorder: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { gamma: 0.5, max_len: crate::corpus::MAX_LEN, transition: true, reorder: true }
    }
}

/// Augmented view of a track sequence; the input unchanged when the relevant
/// augmentation is switched off.
pub fn augment_tracks<T: Scalar, R: Rng + ?Sized>(
    tracks: &[TrackId],
    shuffle: bool,
    transitions: &NormalizedTransitions<T>,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<TrackId>> {
    match (shuffle, config.transition, config.reorder) {
        (true, true, _) => Ok(transition_augment(tracks, transitions, config.max_len, rng)),
        (false, _, true) => reorder_augment(tracks, config.gamma, rng),
        _ => Ok(tracks.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Session;
    use crate::rng::seeded;
    use crate::transitions::{CsrMatrix, LogMode};
    use proptest::prelude::*;

    fn chain(pairs: &[(TrackId, TrackId)], dim: usize) -> NormalizedTransitions<f64> {
        let sessions: Vec<Session> = pairs.iter().map(|&(a, b)| Session::new("x", vec![a, b], false)).collect();
        NormalizedTransitions::from_sessions(&sessions, dim, LogMode::Log1p).unwrap()
    }

    #[test]
    fn dominant_bridge_track_gets_most_weight() {
        // 3 -> 8 and 8 -> 4 are frequent; 3 -> 5 -> 4 exists but rarely.
        let mut pairs = Vec::new();
        for _ in 0..20 {
            pairs.push((3, 8));
            pairs.push((8, 4));
        }
        pairs.extend([(3, 5), (5, 4), (5, 6), (7, 4), (3, 7)]);
        let t = chain(&pairs, 10);
        let d = candidate_distribution(&[3, 4], &t);
        assert_eq!(d.rows.len(), 1);
        let row = &d.rows[0];
        let p8 = row.prob(8);
        assert!(row.tracks.iter().all(|&v| v == 8 || row.prob(v) < p8), "{row:?}");
        assert!(p8 > 0.5);
    }

    #[test]
    fn source_without_successors_gives_empty_row() {
        let t = chain(&[(0, 1)], 3);
        let d = candidate_distribution(&[2, 0], &t);
        assert!(d.rows[0].is_empty());
        let plan = sample_insertions(&d, &mut seeded(0));
        assert_eq!(plan, InsertionPlan(vec![None]));
        assert_eq!(insert(&[2, 0], &plan, 20, &mut seeded(0)), vec![2, 0]);
    }

    #[test]
    fn hadamard_weights_match_hand_computation() {
        let m = CsrMatrix::from_triplets(
            3,
            3,
            vec![(0, 1, 1.0), (0, 2, 3.0), (1, 0, 2.0), (1, 2, 2.0), (2, 0, 1.0), (2, 1, 1.0), (2, 2, 2.0)],
        );
        let t = crate::transitions::normalize(&m);
        // Row-normalized: r[0] = {1: .25, 2: .75}; r[2] = {0: .25, 1: .25, 2: .5}.
        // Column-normalized into target 0: sources {1: 2/3, 2: 1/3}.
        // Gap (0 -> 0): v=1: .25 * 2/3, v=2: .75 * 1/3.
        let w1: f64 = 0.25 * (2.0 / 3.0);
        let w2 = 0.75 * (1.0 / 3.0);
        let d = candidate_distribution(&[0, 0], &t);
        assert_eq!(d.rows[0].tracks, vec![1, 2]);
        assert!((d.rows[0].probs[0] - w1 / (w1 + w2)).abs() < 1e-12);
        assert!((d.rows[0].probs[1] - w2 / (w1 + w2)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_row_always_returns_its_track() {
        let row = CandidateRow { tracks: vec![7], probs: vec![1.0] };
        let mut rng = seeded(3);
        assert!((0..1000).all(|_| row.sample(&mut rng) == Some(7)));
    }

    #[test]
    fn two_point_row_frequencies() {
        let row = CandidateRow { tracks: vec![1, 2], probs: vec![0.7, 0.3] };
        let mut rng = seeded(11);
        let n = 100_000;
        let ones = (0..n).filter(|_| row.sample(&mut rng) == Some(1)).count();
        let f = ones as f64 / n as f64;
        assert!((f - 0.7).abs() <= 0.01, "{f}");
    }

    #[test]
    fn insert_interleaves_into_gaps() {
        let out = insert(&[1, 2, 3], &InsertionPlan(vec![Some(9), None]), 20, &mut seeded(0));
        assert_eq!(out, vec![1, 9, 2, 3]);
    }

    #[test]
    fn full_session_gets_no_insertions() {
        let tracks: Vec<TrackId> = (0..20).collect();
        let plan = InsertionPlan(vec![Some(99); 19]);
        assert_eq!(insert(&tracks, &plan, 20, &mut seeded(0)), tracks);
    }

    #[test]
    fn capped_insertion_is_uniform_over_chosen() {
        let tracks: Vec<TrackId> = (0..19).collect();
        let mut gaps = vec![None; 18];
        for (k, g) in [1usize, 4, 7, 10, 13].iter().enumerate() {
            gaps[*g] = Some(100 + k as TrackId);
        }
        let plan = InsertionPlan(gaps);
        let mut hits = [0usize; 5];
        let trials = 20_000;
        for seed in 0..trials {
            let out = insert(&tracks, &plan, 20, &mut seeded(seed));
            assert_eq!(out.len(), 20);
            let extra: Vec<_> = out.iter().filter(|&&t| t >= 100).collect();
            assert_eq!(extra.len(), 1);
            hits[(*extra[0] - 100) as usize] += 1;
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.2).abs() < 0.015, "{hits:?}");
        }
    }

    #[test]
    fn deterministic_tables_give_predictable_output() {
        let t = chain(&[(0, 5), (5, 1), (1, 6), (6, 2)], 7);
        let out = transition_augment(&[0, 1, 2], &t, 20, &mut seeded(42));
        assert_eq!(out, vec![0, 5, 1, 6, 2]);
    }

    #[test]
    fn small_gamma_window_is_identity() {
        let tracks = vec![1, 2, 3];
        assert_eq!(reorder_augment(&tracks, 0.3, &mut seeded(0)).unwrap(), tracks);
    }

    #[test]
    fn gamma_out_of_range_is_rejected() {
        for g in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(reorder_augment(&[1, 2, 3], g, &mut seeded(0)).is_err());
        }
        for g in [0.3, 0.5, 0.7, 0.9, 1.0] {
            assert!(validate_gamma(g).is_ok());
        }
    }

    #[test]
    fn augment_dispatch_respects_flags() {
        let t = chain(&[(0, 5), (5, 1)], 7);
        let off = AugmentConfig { transition: false, reorder: false, ..Default::default() };
        assert_eq!(augment_tracks(&[0, 1], true, &t, &off, &mut seeded(0)).unwrap(), vec![0, 1]);
        let on = AugmentConfig::default();
        assert_eq!(augment_tracks(&[0, 1], true, &t, &on, &mut seeded(0)).unwrap(), vec![0, 5, 1]);
        let r = augment_tracks(&[0, 1, 2, 3], false, &t, &on, &mut seeded(0)).unwrap();
        assert_eq!(r.len(), 4);
    }

    proptest! {
        #[test]
        fn insertion_preserves_original_order_and_cap(
            tracks in prop::collection::vec(0u32..30, 2..20),
            seed in 0u64..1000,
            max_len in 2usize..25,
        ) {
            let sessions: Vec<Session> = (0..30u32)
                .map(|i| Session::new("c", vec![i, (i * 7 + 3) % 30, (i * 11 + 5) % 30], false))
                .collect();
            let t: NormalizedTransitions<f64> = NormalizedTransitions::from_sessions(&sessions, 30, LogMode::Log1p).unwrap();
            let out = transition_augment(&tracks, &t, max_len, &mut seeded(seed));
            prop_assert!(out.len() <= max_len.max(tracks.len()));
            // Original is a subsequence of the output.
            let mut it = out.iter();
            for x in &tracks {
                prop_assert!(it.any(|y| y == x));
            }
            let again = transition_augment(&tracks, &t, max_len, &mut seeded(seed));
            prop_assert_eq!(out, again);
        }

        #[test]
        fn reorder_preserves_multiset_and_length(
            tracks in prop::collection::vec(0u32..50, 1..20),
            gamma in 0.01f64..=1.0,
            seed in 0u64..1000,
        ) {
            let out = reorder_augment(&tracks, gamma, &mut seeded(seed)).unwrap();
            prop_assert_eq!(out.len(), tracks.len());
            let (mut a, mut b) = (tracks.clone(), out);
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
