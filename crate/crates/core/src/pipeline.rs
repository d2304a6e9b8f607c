//! Raw sessions to train/valid/test data.

use crate::corpus::{
    build_vocabulary, expand_all, preprocess, split_by_day, RawSession, Session, SplitSpec, Splits, TrainingInstance,
    Vocabulary,
};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::transitions::{LogMode, NormalizedTransitions};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub sessions: Splits<Session>,
}

/// Splits by day, builds the vocabulary from the training split and
/// preprocesses every split against it.
pub fn prepare(raw: Vec<RawSession>, split: &SplitSpec, min_count: u64, max_len: usize) -> Dataset {
    let parts = split_by_day(raw, split);
    let vocab = build_vocabulary(&parts.train, min_count);
    let sessions = Splits {
        train: preprocess(&parts.train, &vocab, max_len),
        valid: preprocess(&parts.valid, &vocab, max_len),
        test: preprocess(&parts.test, &vocab, max_len),
    };
    Dataset { vocab, sessions }
}

impl Dataset {
    pub fn instances(&self) -> Splits<TrainingInstance> {
        Splits {
            train: expand_all(&self.sessions.train),
            valid: expand_all(&self.sessions.valid),
            test: expand_all(&self.sessions.test),
        }
    }

    /// Transition statistics of the training split.
    pub fn transitions<T: Scalar>(&self, mode: LogMode) -> Result<NormalizedTransitions<T>> {
        NormalizedTransitions::from_sessions(&self.sessions.train, self.vocab.len(), mode)
    }
}
