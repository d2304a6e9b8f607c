//! Dual-view training loop.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{augment_tracks, validate_gamma, AugmentConfig};
use crate::autodiff::{Tape, Var};
use crate::corpus::{TrackId, TrainingInstance, MAX_LEN};
use crate::encoder::{aggregate, embed, encode, logits, ModelParams, ParamVars, SessionGraph};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Segment};
use crate::losses::{align_loss, matching_loss, rec_loss, total_loss, LossConfig};
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::rng::{seeded, stable_hash, stream_for_indices};
use crate::scalar::Scalar;
use crate::transitions::{LogMode, NormalizedTransitions};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub loss: LossConfig,
    /// Fraction of a non-shuffle session that is reordered.
    pub gamma: f64,
    /// Transition-based insertion on shuffle sessions.
    pub augment_shuffle: bool,
    /// Reordering on non-shuffle sessions.
    pub augment_nonshuffle: bool,
    pub log_mode: LogMode,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 512,
            learning_rate: 1e-3,
            seed: 0,
            hidden_dim: 100,
            max_len: MAX_LEN,
            loss: LossConfig::default(),
            gamma: 0.5,
            augment_shuffle: true,
            augment_nonshuffle: true,
            log_mode: LogMode::Log1p,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            clip_norm: 5.0,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
        "hidden_dim",
        "max_len",
        "alpha",
        "lambda",
        "mu",
        "nu",
        "kappa",
        "warmup_epochs",
        "variance_eps",
        "gamma",
        "augment_shuffle",
        "augment_nonshuffle",
        "log_mode",
        "optimizer",
        "momentum",
        "clip_norm",
    ];

    /// Sets one field by its configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "alpha" => self.loss.alpha = parse_value(key, v)?,
            "lambda" => self.loss.lambda = parse_value(key, v)?,
            "mu" => self.loss.mu = parse_value(key, v)?,
            "nu" => self.loss.nu = parse_value(key, v)?,
            "kappa" => self.loss.kappa = parse_value(key, v)?,
            "warmup_epochs" => self.loss.warmup_epochs = parse_value(key, v)?,
            "variance_eps" => self.loss.variance_eps = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "augment_shuffle" => self.augment_shuffle = parse_bool(key, v)?,
            "augment_nonshuffle" => self.augment_nonshuffle = parse_bool(key, v)?,
            "log_mode" => self.log_mode = v.parse()?,
            "optimizer" => self.optimizer = v.parse()?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected `key = value`, got `{line}`") })?;
            self.set(k, v).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Renders the configuration in the format read by [`apply_kv`](Self::apply_kv).
    pub fn to_kv(&self) -> String {
        let l = &self.loss;
        format!(
            "epochs = {}\nbatch_size = {}\nlearning_rate = {}\nseed = {}\nhidden_dim = {}\nmax_len = {}\n\
             alpha = {}\nlambda = {}\nmu = {}\nnu = {}\nkappa = {}\nwarmup_epochs = {}\nvariance_eps = {}\n\
             gamma = {}\naugment_shuffle = {}\naugment_nonshuffle = {}\nlog_mode = {}\noptimizer = {}\n\
             momentum = {}\nclip_norm = {}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.seed,
            self.hidden_dim,
            self.max_len,
            l.alpha,
            l.lambda,
            l.mu,
            l.nu,
            l.kappa,
            l.warmup_epochs,
            l.variance_eps,
            self.gamma,
            self.augment_shuffle,
            self.augment_nonshuffle,
            self.log_mode,
            self.optimizer,
            self.momentum,
            self.clip_norm,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        validate_gamma(self.gamma)?;
        self.loss.validate()
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            gamma: self.gamma,
            max_len: self.max_len,
            transition: self.augment_shuffle,
            reorder: self.augment_nonshuffle,
        }
    }
}

/// Original and augmented prefix of one training instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewPair {
    pub original: Vec<TrackId>,
    pub augmented: Vec<TrackId>,
    pub label: TrackId,
    pub shuffle: bool,
}

pub fn make_views<T: Scalar, R: rand::Rng + ?Sized>(
    instance: &TrainingInstance,
    transitions: &NormalizedTransitions<T>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<ViewPair> {
    let augmented = augment_tracks(&instance.prefix, instance.shuffle, transitions, &config.augment_config(), rng)?;
    Ok(ViewPair { original: instance.prefix.clone(), augmented, label: instance.label, shuffle: instance.shuffle })
}

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub matching: f64,
    pub align: f64,
    /// Parts of `matching`.
    pub item: f64,
    pub similarity: f64,
    pub vicreg: f64,
}

impl LossBreakdown {
    /// `α·matching + (1−α)·align + rec`.
    pub fn recombined(&self, alpha: f64) -> f64 {
        alpha * self.matching + (1.0 - alpha) * self.align + self.rec
    }

    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.total += w * other.total;
        self.rec += w * other.rec;
        self.matching += w * other.matching;
        self.align += w * other.align;
        self.item += w * other.item;
        self.similarity += w * other.similarity;
        self.vicreg += w * other.vicreg;
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("item-matching", self.item),
            ("similarity-matching", self.similarity),
            ("vicreg", self.vicreg),
            ("align", self.align),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Loss of one batch recorded on a tape.
pub struct Objective {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Parameter registration read by each encoder pass, in call order.
    pub encoder_reads: Vec<u64>,
}

fn encode_view<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, tracks: &[TrackId], reads: &mut Vec<u64>) -> Result<(Var, Var)> {
    reads.push(pv.token());
    let e = embed(tape, pv, tracks, None)?;
    let graph = SessionGraph::build(tracks);
    let h = encode(tape, e, &graph, pv)?;
    let z = aggregate(tape, h, tracks.len(), pv)?;
    Ok((h, z))
}

/// `α·mean(matching) + (1−α)·align + mean(rec)` over a batch, with both
/// views encoded by the same parameter registration `pv`.
pub fn batch_objective<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    batch: &[ViewPair],
    loss: &LossConfig,
    include_similarity: bool,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let n = batch.len();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut reads = Vec::with_capacity(2 * n);
    let mut zs = Vec::with_capacity(n);
    let mut zs_aug = Vec::with_capacity(n);
    let mut matching_terms = Vec::with_capacity(n);
    let mut bd = LossBreakdown::default();
    for view in batch {
        let (h, z) = encode_view(tape, pv, &view.original, &mut reads)?;
        let (h_aug, z_aug) = encode_view(tape, pv, &view.augmented, &mut reads)?;
        let m = matching_loss(tape, h, h_aug, &view.original, &view.augmented, loss, include_similarity);
        bd.item += m.item.as_f64();
        bd.similarity += m.similarity.as_f64();
        bd.vicreg += m.vicreg.as_f64();
        matching_terms.push(m.loss);
        zs.push(z);
        zs_aug.push(z_aug);
    }
    bd.item /= n as f64;
    bd.similarity /= n as f64;
    bd.vicreg /= n as f64;

    let stacked = tape.stack_rows(&matching_terms);
    let msum = tape.sum(stacked);
    let matching = tape.scale(msum, inv_n);

    let z = tape.stack_rows(&zs);
    let z_aug = tape.stack_rows(&zs_aug);
    let align = align_loss(tape, z, z_aug, loss).loss;

    let scores = logits(tape, z, pv);
    let labels: Vec<TrackId> = batch.iter().map(|v| v.label).collect();
    let rec = rec_loss(tape, scores, &labels)?;

    let total = total_loss(tape, matching, align, rec, loss.alpha);
    bd.matching = tape.value(matching).item().as_f64();
    bd.align = tape.value(align).item().as_f64();
    bd.rec = tape.value(rec).item().as_f64();
    bd.total = tape.value(total).item().as_f64();
    Ok(Objective { loss: total, breakdown: bd, encoder_reads: reads })
}

/// Position of a step within a run, for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepIndex {
    pub epoch: usize,
    pub step: usize,
}

/// One optimizer update on `batch`. Non-finite losses abort with the name of
/// the first offending component; parameters are left untouched in that case.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    optimizer: &mut Optimizer<T>,
    batch: &[ViewPair],
    config: &TrainConfig,
    include_similarity: bool,
    at: StepIndex,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let obj = batch_objective(&mut tape, &pv, batch, &config.loss, include_similarity)?;
    if let Some(component) = obj.breakdown.non_finite() {
        return Err(Error::Diverged { component, epoch: at.epoch, step: at.step });
    }
    let mut grads = tape.backward(obj.loss);
    let mut g = pv.collect_grads(&mut grads);
    let norm = clip_global_norm(&mut g, T::lit(config.clip_norm));
    if !norm.is_finite() {
        return Err(Error::Diverged { component: "gradient", epoch: at.epoch, step: at.step });
    }
    optimizer.step(params, &g);
    Ok(obj.breakdown)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Instance-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub steps: Vec<LossBreakdown>,
    /// `None` without validation data.
    pub valid_mrr5: Option<f64>,
    /// Hash of the parameters at the end of the epoch.
    pub param_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainReport {
    /// `epoch,loss_total,loss_rec,loss_match,loss_align,valid_mrr5`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss_total,loss_rec,loss_match,loss_align,valid_mrr5")?;
        for e in &self.epochs {
            let mrr = e.valid_mrr5.map(|v| v.to_string()).unwrap_or_default();
            let l = &e.loss;
            writeln!(w, "{},{},{},{},{},{}", e.epoch, l.total, l.rec, l.matching, l.align, mrr)?;
        }
        Ok(())
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.epochs {
            let mark = if e.epoch == self.best_epoch { " *" } else { "" };
            let mrr = e.valid_mrr5.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "epoch {:>3}  total {:.5}  rec {:.5}  match {:.5}  align {:.5}  valid mrr@5 {}{}",
                e.epoch, e.loss.total, e.loss.rec, e.loss.matching, e.loss.align, mrr, mark
            )?;
        }
        Ok(())
    }
}

/// Stable hash of every parameter value.
pub fn param_hash<T: Scalar>(params: &ModelParams<T>) -> u64 {
    let mut bytes = Vec::new();
    for t in params.tensors() {
        for &x in t.as_slice() {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    stable_hash(&bytes)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const VIEW_STREAM: u64 = 0x5649_4557;

/// Trains from a seeded initialization and returns the parameters of the
/// epoch with the best validation MRR@5 (the last epoch without validation
/// data).
pub fn fit<T: Scalar>(
    train: &[TrainingInstance],
    valid: &[TrainingInstance],
    transitions: &NormalizedTransitions<T>,
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    if config.epochs == 0 {
        return Err(Error::config("epochs must be at least 1"));
    }
    let mut params = ModelParams::init(vocab_size, config.hidden_dim, &mut seeded(config.seed));
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.momentum, &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_for_indices(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let include_similarity = epoch >= config.loss.warmup_epochs;
        let mut steps = Vec::new();
        let mut mean = LossBreakdown::default();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let views: Vec<ViewPair> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_for_indices(config.seed, &[VIEW_STREAM, epoch as u64, i as u64]);
                    make_views(&train[i], transitions, config, &mut rng)
                })
                .collect::<Result<_>>()?;
            let bd = train_step(&mut params, &mut optimizer, &views, config, include_similarity, StepIndex { epoch, step })?;
            mean.add_scaled(&bd, chunk.len() as f64 / train.len() as f64);
            steps.push(bd);
        }
        if !params.is_finite() {
            return Err(Error::Diverged { component: "parameter", epoch, step: steps.len() });
        }
        let valid_mrr5 = if valid.is_empty() {
            None
        } else {
            evaluate(&params, valid)?.mrr(Segment::All, 5)
        };
        let score = valid_mrr5.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || valid_mrr5.is_none()) {
            best = Some((score, epoch, params.clone()));
        }
        log::info!(
            "epoch {epoch}: total {:.5} rec {:.5} match {:.5} align {:.5} valid mrr@5 {:?}",
            mean.total,
            mean.rec,
            mean.matching,
            mean.align,
            valid_mrr5
        );
        records.push(EpochRecord { epoch, loss: mean, steps, valid_mrr5, param_hash: param_hash(&params) });
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok((best_params, TrainReport { epochs: records, best_epoch }))
}
