//! Training objectives.
//!
//! * item matching: squared distance between representations of the same
//!   track in the original and augmented views;
//! * similarity matching: squared distance between each representation and
//!   its nearest neighbour in the other view, restricted to the `kappa`
//!   closest pairs in each direction;
//! * VICReg: invariance, variance floor and covariance decorrelation terms;
//! * alignment: VICReg between the batch of session representations of the
//!   two views;
//! * recommendation: categorical cross-entropy of the next track.
//!
//! All losses are recorded on a [`Tape`] and return a `1 × 1` node.

use crate::autodiff::{Tape, Var};
use crate::corpus::TrackId;
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the matching loss against the alignment loss.
    pub alpha: f64,
    /// Invariance coefficient.
    pub lambda: f64,
    /// Variance coefficient.
    pub mu: f64,
    /// Covariance coefficient.
    pub nu: f64,
    /// Nearest-neighbour pairs kept per direction.
    pub kappa: usize,
    /// Epochs trained with item matching only.
    pub warmup_epochs: usize,
    pub variance_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.2, lambda: 1.0, mu: 1.0, nu: 10.0, kappa: 5, warmup_epochs: 1, variance_eps: 1e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("nu", self.nu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        if self.kappa == 0 {
            return Err(Error::config("kappa must be at least 1"));
        }
        if self.variance_eps.is_nan() || self.variance_eps <= 0.0 {
            return Err(Error::config(format!("variance_eps must be positive, got {}", self.variance_eps)));
        }
        Ok(())
    }
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.scalar_constant(T::zero())
}

/// Sum over `pairs` of `‖a[i] − b[k]‖²`.
fn paired_sq_dist<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, pairs: &[(usize, usize)]) -> Var {
    if pairs.is_empty() {
        return zero(tape);
    }
    let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ga = tape.gather_rows(a, &ia);
    let gb = tape.gather_rows(b, &ib);
    let diff = tape.sub(ga, gb);
    tape.sum_squares(diff)
}

/// Every `(t, k)` with `original[t] == augmented[k]`.
pub fn item_pairs(original: &[TrackId], augmented: &[TrackId]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (t, x) in original.iter().enumerate() {
        for (k, y) in augmented.iter().enumerate() {
            if x == y {
                pairs.push((t, k));
            }
        }
    }
    pairs
}

/// `(1/|S|) Σ_{t,k: x_t = x̃_k} ‖h_t − h̃_k‖²`. Rows of `h`/`h_aug` past the
/// session lengths are padding and never read.
pub fn item_matching_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    h_aug: Var,
    original: &[TrackId],
    augmented: &[TrackId],
) -> Var {
    let pairs = item_pairs(original, augmented);
    if original.is_empty() {
        return zero(tape);
    }
    let s = paired_sq_dist(tape, h, h_aug, &pairs);
    tape.scale(s, T::one() / T::from_usize_lossy(original.len()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair<T> {
    /// Row in the original view.
    pub original: usize,
    /// Row in the augmented view.
    pub augmented: usize,
    pub distance: T,
}

/// Nearest-neighbour pairs in both directions, each truncated to `kappa`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPairs<T> {
    /// Each original row with its nearest augmented row.
    pub forward: Vec<MatchedPair<T>>,
    /// Each augmented row with its nearest original row.
    pub backward: Vec<MatchedPair<T>>,
}

fn nearest<T: Scalar>(query: &[T], pool: &Matrix<T>, n: usize) -> (usize, T) {
    let mut best = (0, squared_distance(query, pool.row(0)));
    for k in 1..n {
        let d = squared_distance(query, pool.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Squared-Euclidean nearest neighbours between the first `n` rows of `h`
/// and the first `n_aug` rows of `h_aug`. The `kappa` closest pairs per
/// direction are kept; ties go to the lower index.
pub fn nn_pairs<T: Scalar>(h: &Matrix<T>, n: usize, h_aug: &Matrix<T>, n_aug: usize, kappa: usize) -> MatchedPairs<T> {
    if n == 0 || n_aug == 0 {
        return MatchedPairs { forward: Vec::new(), backward: Vec::new() };
    }
    let mut forward: Vec<MatchedPair<T>> = (0..n)
        .map(|i| {
            let (k, d) = nearest(h.row(i), h_aug, n_aug);
            MatchedPair { original: i, augmented: k, distance: d }
        })
        .collect();
    let mut backward: Vec<MatchedPair<T>> = (0..n_aug)
        .map(|k| {
            let (i, d) = nearest(h_aug.row(k), h, n);
            MatchedPair { original: i, augmented: k, distance: d }
        })
        .collect();
    // Stable sort keeps index order among equal distances.
    forward.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap_or(std::cmp::Ordering::Equal));
    backward.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap_or(std::cmp::Ordering::Equal));
    forward.truncate(kappa);
    backward.truncate(kappa);
    MatchedPairs { forward, backward }
}

/// Sum of squared distances over both directions of `pairs`.
pub fn similarity_matching_loss<T: Scalar>(tape: &mut Tape<T>, h: Var, h_aug: Var, pairs: &MatchedPairs<T>) -> Var {
    let all: Vec<(usize, usize)> =
        pairs.forward.iter().chain(&pairs.backward).map(|p| (p.original, p.augmented)).collect();
    paired_sq_dist(tape, h, h_aug, &all)
}

/// VICReg loss with its individual (unweighted) terms.
#[derive(Clone, Copy, Debug)]
pub struct VicregOutput<T> {
    pub loss: Var,
    /// `s`: mean over pairs of `‖a − b‖² / d`.
    pub invariance: T,
    /// `v(A) + v(B)`.
    pub variance: T,
    /// `c(A) + c(B)`.
    pub covariance: T,
    /// A matrix had fewer than two rows; its variance and covariance terms are zero.
    pub degenerate: bool,
}

/// `(v(M), c(M))` of the first `n` rows of `m`, or `None` when `n < 2`.
fn variance_covariance<T: Scalar>(tape: &mut Tape<T>, m: Var, n: usize, eps: T) -> Option<(Var, Var)> {
    if n < 2 {
        return None;
    }
    let d = tape.shape(m).1;
    let inv_d = T::one() / T::from_usize_lossy(d);
    let rows = tape.head_rows(m, n);
    let col_sum = tape.sum_rows(rows);
    let mean = tape.scale(col_sum, T::one() / T::from_usize_lossy(n));
    let mean_rep = tape.repeat_rows(mean, n);
    let centered = tape.sub(rows, mean_rep);
    let inv_n1 = T::one() / T::from_usize_lossy(n - 1);

    let sq = tape.mul(centered, centered);
    let ss = tape.sum_rows(sq);
    let var_eps = tape.affine(ss, inv_n1, eps);
    let std = tape.sqrt(var_eps);
    let shortfall = tape.affine(std, -T::one(), T::one());
    let hinge = tape.relu(shortfall);
    let hsum = tape.sum(hinge);
    let v = tape.scale(hsum, inv_d);

    let gram = tape.matmul_t(centered, true, centered, false);
    let cov = tape.scale(gram, inv_n1);
    let off = tape.zero_diag(cov);
    let csum = tape.sum_squares(off);
    let c = tape.scale(csum, inv_d);
    Some((v, c))
}

/// `λ·s(A,B) + μ·[v(A)+v(B)] + ν·[c(A)+c(B)]` over the first `n_a`/`n_b`
/// rows, with the invariance term taken over `pairs` of row indices.
pub fn vicreg<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    n_a: usize,
    b: Var,
    n_b: usize,
    pairs: &[(usize, usize)],
    config: &LossConfig,
) -> VicregOutput<T> {
    let d = tape.shape(a).1;
    let eps = T::lit(config.variance_eps);
    let s = if pairs.is_empty() {
        zero(tape)
    } else {
        let sq = paired_sq_dist(tape, a, b, pairs);
        tape.scale(sq, T::one() / T::from_usize_lossy(pairs.len() * d))
    };
    let mut degenerate = false;
    let mut v_terms = Vec::new();
    let mut c_terms = Vec::new();
    for (m, n) in [(a, n_a), (b, n_b)] {
        match variance_covariance(tape, m, n, eps) {
            Some((v, c)) => {
                v_terms.push(v);
                c_terms.push(c);
            }
            None => degenerate = true,
        }
    }
    if degenerate {
        log::trace!("vicreg: matrix with fewer than two rows, variance/covariance set to 0");
    }
    let sum = |tape: &mut Tape<T>, terms: &[Var]| match terms {
        [] => zero(tape),
        [x] => *x,
        [x, y] => tape.add(*x, *y),
        _ => unreachable!(),
    };
    let v = sum(tape, &v_terms);
    let c = sum(tape, &c_terms);
    let (sv, vv, cv) = (tape.value(s).item(), tape.value(v).item(), tape.value(c).item());
    let ls = tape.scale(s, T::lit(config.lambda));
    let lv = tape.scale(v, T::lit(config.mu));
    let lc = tape.scale(c, T::lit(config.nu));
    let partial = tape.add(ls, lv);
    let loss = tape.add(partial, lc);
    VicregOutput { loss, invariance: sv, variance: vv, covariance: cv, degenerate }
}

/// Matching loss of one session with its components.
#[derive(Clone, Copy, Debug)]
pub struct MatchingOutput<T> {
    pub loss: Var,
    pub item: T,
    pub similarity: T,
    pub vicreg: T,
}

/// `L_item + L_sim + L_VICReg(H, H̃)`; `L_sim` is left out while
/// `include_similarity` is false (warm-up).
pub fn matching_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    h_aug: Var,
    original: &[TrackId],
    augmented: &[TrackId],
    config: &LossConfig,
    include_similarity: bool,
) -> MatchingOutput<T> {
    let item = item_matching_loss(tape, h, h_aug, original, augmented);
    let sim = if include_similarity {
        let pairs = nn_pairs(tape.value(h), original.len(), tape.value(h_aug), augmented.len(), config.kappa);
        similarity_matching_loss(tape, h, h_aug, &pairs)
    } else {
        zero(tape)
    };
    let pairs = item_pairs(original, augmented);
    let vic = vicreg(tape, h, original.len(), h_aug, augmented.len(), &pairs, config);
    let (iv, sv, vv) = (tape.value(item).item(), tape.value(sim).item(), tape.value(vic.loss).item());
    let partial = tape.add(item, sim);
    let loss = tape.add(partial, vic.loss);
    MatchingOutput { loss, item: iv, similarity: sv, vicreg: vv }
}

/// VICReg between the batch of session representations `z` and `z̃`
/// (`B × d` each), pairing row `i` with row `i`.
pub fn align_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, z_aug: Var, config: &LossConfig) -> VicregOutput<T> {
    let n = tape.shape(z).0;
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    vicreg(tape, z, n, z_aug, n, &pairs, config)
}

/// Mean categorical cross-entropy of `targets` under row-wise softmax of
/// `logits` (`B × |V|`), computed in the log domain.
pub fn rec_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[TrackId]) -> Result<Var> {
    let (rows, cols) = tape.shape(logits);
    if rows != targets.len() {
        return Err(Error::Dimension(format!("{rows} logit rows for {} targets", targets.len())));
    }
    for &t in targets {
        if t as usize >= cols {
            return Err(Error::Index { index: t as usize, bound: cols });
        }
    }
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.pick(ls, targets.iter().enumerate().map(|(r, &t)| (r, t as usize)).collect());
    let s = tape.sum(picked);
    Ok(tape.scale(s, -T::one() / T::from_usize_lossy(rows)))
}

/// `α·L_matching + (1−α)·L_align + L_rec`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, matching: Var, align: Var, rec: Var, alpha: f64) -> Var {
    let m = tape.scale(matching, T::lit(alpha));
    let a = tape.scale(align, T::lit(1.0 - alpha));
    let ma = tape.add(m, a);
    tape.add(ma, rec)
}
