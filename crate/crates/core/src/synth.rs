//! Synthetic listening logs with a known Markov structure.
//!
//! Tracks are split into equal contiguous clusters. From track `i` the next
//! track is drawn as follows: with probability `within_cluster_prob` it stays
//! in `i`'s cluster, where `successor_mass` of that goes to `i`'s preferred
//! successors (uniformly) and the rest is spread uniformly over the cluster;
//! otherwise it is uniform over all tracks.
//!
//! Non-shuffle sessions are walks on this chain starting in the session's
//! cluster. Shuffle sessions draw distinct tracks from the cluster in random
//! order, and each play is skipped with probability `skip_prob_shuffle`.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{PlayEvent, RawSession, TrackId};
use crate::error::{Error, Result};
use crate::rng::{seeded, stream_for_indices};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_tracks: usize,
    pub n_clusters: usize,
    pub n_sessions: usize,
    /// Inclusive bounds on the number of plays per session.
    pub session_len_range: (usize, usize),
    pub shuffle_fraction: f64,
    pub skip_prob_shuffle: f64,
    pub within_cluster_prob: f64,
    /// Preferred successors per track.
    pub n_successors: usize,
    /// Share of the within-cluster mass on the preferred successors.
    pub successor_mass: f64,
    /// Sessions get a uniform day in `0..n_days`.
    pub n_days: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tracks: 2000,
            n_clusters: 20,
            n_sessions: 20_000,
            session_len_range: (5, 20),
            shuffle_fraction: 0.4,
            skip_prob_shuffle: 0.3,
            within_cluster_prob: 0.9,
            n_successors: 5,
            successor_mass: 0.8,
            n_days: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_clusters == 0 || self.n_tracks == 0 || !self.n_tracks.is_multiple_of(self.n_clusters) {
            return err(format!("n_clusters ({}) must divide n_tracks ({})", self.n_clusters, self.n_tracks));
        }
        let (lo, hi) = self.session_len_range;
        if lo < 2 || lo > hi {
            return err(format!("session_len_range ({lo}, {hi}) must satisfy 2 <= min <= max"));
        }
        for (name, p) in [
            ("shuffle_fraction", self.shuffle_fraction),
            ("skip_prob_shuffle", self.skip_prob_shuffle),
            ("within_cluster_prob", self.within_cluster_prob),
            ("successor_mass", self.successor_mass),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.skip_prob_shuffle >= 1.0 {
            return err("skip_prob_shuffle must be below 1".into());
        }
        if self.n_successors == 0 || self.n_successors > self.cluster_size() {
            return err(format!("n_successors must lie in [1, {}]", self.cluster_size()));
        }
        if self.n_days == 0 {
            return err("n_days must be at least 1".into());
        }
        Ok(())
    }

    pub fn cluster_size(&self) -> usize {
        self.n_tracks / self.n_clusters.max(1)
    }
}

/// Ground-truth transition chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    n_tracks: usize,
    cluster_size: usize,
    within: f64,
    successor_mass: f64,
    successors: Vec<Vec<TrackId>>,
}

impl Catalog {
    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn cluster_of(&self, track: TrackId) -> usize {
        track as usize / self.cluster_size
    }

    pub fn cluster_tracks(&self, cluster: usize) -> std::ops::Range<TrackId> {
        let lo = (cluster * self.cluster_size) as TrackId;
        lo..lo + self.cluster_size as TrackId
    }

    pub fn successors(&self, track: TrackId) -> &[TrackId] {
        &self.successors[track as usize]
    }

    /// Exact probability of `to` following `from`.
    pub fn prob(&self, from: TrackId, to: TrackId) -> f64 {
        let mut p = (1.0 - self.within) / self.n_tracks as f64;
        if self.cluster_of(from) == self.cluster_of(to) {
            p += self.within * (1.0 - self.successor_mass) / self.cluster_size as f64;
            let succ = &self.successors[from as usize];
            let hits = succ.iter().filter(|&&s| s == to).count();
            p += self.within * self.successor_mass * hits as f64 / succ.len() as f64;
        }
        p
    }

    pub fn next<R: Rng + ?Sized>(&self, from: TrackId, rng: &mut R) -> TrackId {
        if rng.gen::<f64>() < self.within {
            if rng.gen::<f64>() < self.successor_mass {
                *self.successors[from as usize].choose(rng).expect("nonempty successor list")
            } else {
                rng.gen_range(self.cluster_tracks(self.cluster_of(from)))
            }
        } else {
            rng.gen_range(0..self.n_tracks as TrackId)
        }
    }
}

pub fn generate_catalog<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<Catalog> {
    config.validate()?;
    let cs = config.cluster_size();
    let successors = (0..config.n_tracks)
        .map(|i| {
            let base = (i / cs * cs) as TrackId;
            rand::seq::index::sample(rng, cs, config.n_successors).into_iter().map(|k| base + k as TrackId).collect()
        })
        .collect();
    Ok(Catalog {
        n_tracks: config.n_tracks,
        cluster_size: cs,
        within: config.within_cluster_prob,
        successor_mass: config.successor_mass,
        successors,
    })
}

pub fn track_uri(track: TrackId) -> String {
    format!("track:{track:05}")
}

/// Ground-truth track behind a [`track_uri`].
pub fn parse_track_uri(uri: &str) -> Option<TrackId> {
    uri.strip_prefix("track:")?.parse().ok()
}

fn generate_session(catalog: &Catalog, config: &SynthConfig, index: usize) -> RawSession {
    let mut rng = stream_for_indices(config.seed, &[index as u64]);
    let shuffle = rng.gen::<f64>() < config.shuffle_fraction;
    let (lo, hi) = config.session_len_range;
    let len = rng.gen_range(lo..=hi);
    let cluster = rng.gen_range(0..config.n_clusters);
    let day = rng.gen_range(0..config.n_days) as i64;
    let (tracks, skips): (Vec<TrackId>, Vec<bool>) = if shuffle {
        let pool: Vec<TrackId> = catalog.cluster_tracks(cluster).collect();
        let mut picked: Vec<TrackId> = pool.choose_multiple(&mut rng, len.min(pool.len())).copied().collect();
        picked.shuffle(&mut rng);
        let skips = picked.iter().map(|_| rng.gen::<f64>() < config.skip_prob_shuffle).collect();
        (picked, skips)
    } else {
        let mut cur = rng.gen_range(catalog.cluster_tracks(cluster));
        let mut walk = Vec::with_capacity(len);
        walk.push(cur);
        while walk.len() < len {
            cur = catalog.next(cur, &mut rng);
            walk.push(cur);
        }
        (walk, vec![false; len])
    };
    let events = tracks
        .iter()
        .zip(skips)
        .enumerate()
        .map(|(i, (&t, skipped))| PlayEvent { track_uri: track_uri(t), position: i as u32 + 1, skipped, shuffle, day })
        .collect();
    RawSession { id: format!("s{index:07}"), events }
}

/// Sessions in id order; each session draws from its own seeded stream.
pub fn generate_sessions(catalog: &Catalog, config: &SynthConfig) -> Result<Vec<RawSession>> {
    config.validate()?;
    Ok((0..config.n_sessions).into_par_iter().map(|i| generate_session(catalog, config, i)).collect())
}

/// Catalog and sessions from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<(Catalog, Vec<RawSession>)> {
    let catalog = generate_catalog(config, &mut seeded(config.seed))?;
    let sessions = generate_sessions(&catalog, config)?;
    Ok((catalog, sessions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_log;
    use crate::eval::unique_transition_rate;

    fn small() -> SynthConfig {
        SynthConfig { n_tracks: 60, n_clusters: 3, n_sessions: 2000, ..Default::default() }
    }

    fn ids(s: &RawSession) -> Vec<TrackId> {
        s.events.iter().map(|e| parse_track_uri(&e.track_uri).unwrap()).collect()
    }

    #[test]
    fn rows_sum_to_one() {
        let c = small();
        let cat = generate_catalog(&c, &mut seeded(1)).unwrap();
        for i in 0..c.n_tracks as TrackId {
            let s: f64 = (0..c.n_tracks as TrackId).map(|j| cat.prob(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_within_probability_never_leaves_cluster() {
        let c = SynthConfig { within_cluster_prob: 1.0, ..small() };
        let (cat, sessions) = generate(&c).unwrap();
        for s in sessions.iter().filter(|s| !s.events[0].shuffle) {
            let t = ids(s);
            assert!(t.iter().all(|&x| cat.cluster_of(x) == cat.cluster_of(t[0])));
        }
    }

    #[test]
    fn cluster_occupancy_is_uniform() {
        let c = SynthConfig { within_cluster_prob: 0.5, ..small() };
        let cat = generate_catalog(&c, &mut seeded(2)).unwrap();
        let mut rng = seeded(3);
        let mut counts = vec![0f64; c.n_clusters];
        let mut cur = 0;
        let steps = 60_000;
        for _ in 0..steps {
            cur = cat.next(cur, &mut rng);
            counts[cat.cluster_of(cur)] += 1.0;
        }
        let expect = steps as f64 / c.n_clusters as f64;
        let chi2: f64 = counts.iter().map(|o| (o - expect).powi(2) / expect).sum();
        // Autocorrelated draws inflate the statistic; a loose bound still catches bias.
        assert!(chi2 < 60.0, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn walks_converge_to_the_chain() {
        let c = SynthConfig { n_tracks: 20, n_clusters: 2, n_sessions: 10_000, shuffle_fraction: 0.0, ..Default::default() };
        let (cat, sessions) = generate(&c).unwrap();
        let n = c.n_tracks;
        let mut counts = vec![vec![0f64; n]; n];
        for s in &sessions {
            for w in ids(s).windows(2) {
                counts[w[0] as usize][w[1] as usize] += 1.0;
            }
        }
        for (i, row) in counts.iter().enumerate() {
            let total: f64 = row.iter().sum();
            let tv: f64 = row.iter().enumerate().map(|(j, c)| (c / total - cat.prob(i as TrackId, j as TrackId)).abs()).sum::<f64>() / 2.0;
            assert!(tv <= 0.05, "row {i}: tv {tv} over {total} transitions");
        }
    }

    #[test]
    fn shuffle_fraction_within_binomial_noise() {
        let (_, sessions) = generate(&small()).unwrap();
        let k = sessions.iter().filter(|s| s.events[0].shuffle).count() as f64;
        let n = sessions.len() as f64;
        let sd = (n * 0.4 * 0.6).sqrt();
        assert!((k - 0.4 * n).abs() < 4.0 * sd, "{k} of {n}");
    }

    #[test]
    fn shuffle_sessions_have_distinct_tracks_and_some_skips() {
        let (cat, sessions) = generate(&small()).unwrap();
        let mut skips = 0;
        for s in sessions.iter().filter(|s| s.events[0].shuffle) {
            let mut t = ids(s);
            assert!(t.iter().all(|&x| cat.cluster_of(x) == cat.cluster_of(t[0])));
            t.sort_unstable();
            t.dedup();
            assert_eq!(t.len(), s.events.len());
            skips += s.events.iter().filter(|e| e.skipped).count();
        }
        assert!(skips > 0);
    }

    #[test]
    fn reproducible_bytes() {
        let c = small();
        let bytes = |c: &SynthConfig| {
            let (_, s) = generate(c).unwrap();
            let mut b = Vec::new();
            write_log(&mut b, &s).unwrap();
            b
        };
        assert_eq!(bytes(&c), bytes(&c));
        assert_ne!(bytes(&c), bytes(&SynthConfig { seed: 1, ..c }));
    }

    #[test]
    fn shuffle_sessions_have_more_unique_transitions() {
        let (_, sessions) = generate(&SynthConfig { n_sessions: 4000, ..Default::default() }).unwrap();
        let (shuf, plain): (Vec<_>, Vec<_>) = sessions.iter().map(ids).zip(&sessions).partition(|(_, s)| s.events[0].shuffle);
        let rate = |v: Vec<(Vec<TrackId>, &RawSession)>| unique_transition_rate(&v.into_iter().map(|x| x.0).collect::<Vec<_>>()).unwrap();
        let (rs, rn) = (rate(shuf), rate(plain));
        assert!(rs > rn, "shuffle {rs} vs non-shuffle {rn}");
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(SynthConfig { n_clusters: 7, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { shuffle_fraction: 1.5, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { session_len_range: (1, 3), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn uri_round_trip() {
        assert_eq!(parse_track_uri(&track_uri(42)), Some(42));
        assert_eq!(parse_track_uri("other"), None);
    }
}
