use muse::augment::{augment_tracks, reorder_augment, transition_augment, AugmentConfig};
use muse::checkpoint::{read_checkpoint, write_checkpoint};
use muse::corpus::{parse_log, write_log, SplitSpec, TrackId};
use muse::eval::{evaluate, unique_transition_rate};
use muse::pipeline::prepare;
use muse::rng::{seeded, stream_for_key};
use muse::synth::{generate, SynthConfig};
use muse::trainer::{fit, TrainConfig};
use muse::transitions::LogMode;
use muse::{Params, Transitions};
use proptest::prelude::*;

fn small_corpus(seed: u64) -> muse::pipeline::Dataset {
    let cfg = SynthConfig { n_tracks: 40, n_clusters: 4, n_sessions: 400, seed, ..Default::default() };
    let (_, raw) = generate(&cfg).unwrap();
    prepare(raw, &SplitSpec::three_day(0), 2, 20)
}

fn is_subsequence(short: &[TrackId], long: &[TrackId]) -> bool {
    let mut it = long.iter();
    short.iter().all(|x| it.any(|y| y == x))
}

#[test]
fn log_survives_a_write_parse_cycle() {
    let cfg = SynthConfig { n_tracks: 30, n_clusters: 3, n_sessions: 200, seed: 2, ..Default::default() };
    let (_, raw) = generate(&cfg).unwrap();
    let mut buf = Vec::new();
    write_log(&mut buf, &raw).unwrap();
    let back = parse_log(buf.as_slice()).unwrap();
    assert_eq!(back.len(), raw.len());
    let mut again = Vec::new();
    write_log(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn augmentation_lowers_shuffle_unique_rate_on_synthetic_data() {
    let ds = small_corpus(5);
    let trans: Transitions = ds.transitions(LogMode::Log1p).unwrap();
    let shuffle: Vec<_> = ds.sessions.train.iter().filter(|s| s.shuffle).collect();
    let before: Vec<&[TrackId]> = shuffle.iter().map(|s| s.tracks.as_slice()).collect();
    let after: Vec<Vec<TrackId>> = shuffle
        .iter()
        .map(|s| transition_augment(&s.tracks, &trans, 20, &mut stream_for_key(0, &s.id)))
        .collect();
    for (b, a) in before.iter().zip(&after) {
        assert!(is_subsequence(b, a));
        assert!(a.len() <= 20);
    }
    assert!(unique_transition_rate(&after).unwrap() < unique_transition_rate(&before).unwrap());
}

#[test]
fn trained_checkpoint_reloads_to_identical_scores() {
    let ds = small_corpus(7);
    let inst = ds.instances();
    let trans = ds.transitions(LogMode::Log1p).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        hidden_dim: 6,
        batch_size: 32,
        learning_rate: 0.01,
        optimizer: muse::optim::OptimizerKind::Adam,
        ..Default::default()
    };
    let (params, report) = fit::<f64>(&inst.train, &inst.valid, &trans, ds.vocab.len(), &cfg).unwrap();
    assert_eq!(report.epochs.len(), 1);
    let mut bytes = Vec::new();
    write_checkpoint(&params, &mut bytes).unwrap();
    let back: Params = read_checkpoint(bytes.as_slice()).unwrap();
    let a = evaluate(&params, &inst.test).unwrap();
    let b = evaluate(&back, &inst.test).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reorder_keeps_multiset(tracks in prop::collection::vec(0u32..50, 1..20), gamma in 0.01f64..=1.0, seed: u64) {
        let out = reorder_augment(&tracks, gamma, &mut seeded(seed)).unwrap();
        let (mut a, mut b) = (tracks.clone(), out.clone());
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augmented_views_respect_max_len(seed in 0u64..20, max_len in 2usize..25) {
        let ds = small_corpus(3);
        let trans = ds.transitions::<f64>(LogMode::Log1p).unwrap();
        let cfg = AugmentConfig { max_len, ..Default::default() };
        for s in ds.sessions.train.iter().take(30) {
            let out = augment_tracks(&s.tracks, s.shuffle, &trans, &cfg, &mut stream_for_key(seed, &s.id)).unwrap();
            prop_assert!(out.len() <= max_len.max(s.len()));
            if s.shuffle {
                prop_assert!(is_subsequence(&s.tracks, &out));
            } else {
                prop_assert_eq!(out.len(), s.len());
            }
        }
    }
}
