//! Session encoder: embedding lookup, one gated message-passing step over the
//! session graph, additive-attention aggregation and dot-product scoring.
//!
//! Row convention: a set of `n` track representations is an `n × d` matrix.
//! Weight matrices are stored in the column-vector orientation (`W · h`) and
//! applied as `H · Wᵀ`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::TrackId;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Named parameter tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Param {
    /// `|V| × d` track embedding table.
    Embeddings,
    /// Incoming-message transform, `d × d`.
    MsgInW,
    MsgInB,
    /// Outgoing-message transform, `d × d`.
    MsgOutW,
    MsgOutB,
    /// Update gate: message weights `d × 2d`, state weights `d × d`, bias.
    UpdateW,
    UpdateU,
    UpdateB,
    /// Reset gate.
    ResetW,
    ResetU,
    ResetB,
    /// Candidate state.
    CandW,
    CandU,
    CandB,
    /// Attention vector `d × 1`.
    AttnW1,
    /// Attention transform of each track, `d × d`.
    AttnW2,
    /// Attention transform of the last track, `d × d`.
    AttnW3,
    AttnB,
    /// Local/global fusion, `d × 2d`.
    Fusion,
}

impl Param {
    pub const ALL: [Param; 19] = [
        Param::Embeddings,
        Param::MsgInW,
        Param::MsgInB,
        Param::MsgOutW,
        Param::MsgOutB,
        Param::UpdateW,
        Param::UpdateU,
        Param::UpdateB,
        Param::ResetW,
        Param::ResetU,
        Param::ResetB,
        Param::CandW,
        Param::CandU,
        Param::CandB,
        Param::AttnW1,
        Param::AttnW2,
        Param::AttnW3,
        Param::AttnB,
        Param::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::Embeddings => "embeddings",
            Param::MsgInW => "msg_in.w",
            Param::MsgInB => "msg_in.b",
            Param::MsgOutW => "msg_out.w",
            Param::MsgOutB => "msg_out.b",
            Param::UpdateW => "update.w",
            Param::UpdateU => "update.u",
            Param::UpdateB => "update.b",
            Param::ResetW => "reset.w",
            Param::ResetU => "reset.u",
            Param::ResetB => "reset.b",
            Param::CandW => "cand.w",
            Param::CandU => "cand.u",
            Param::CandB => "cand.b",
            Param::AttnW1 => "attn.w1",
            Param::AttnW2 => "attn.w2",
            Param::AttnW3 => "attn.w3",
            Param::AttnB => "attn.b",
            Param::Fusion => "fusion.w4",
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, vocab_size: usize, d: usize) -> (usize, usize) {
        match self {
            Param::Embeddings => (vocab_size, d),
            Param::MsgInW | Param::MsgOutW | Param::UpdateU | Param::ResetU | Param::CandU => (d, d),
            Param::AttnW2 | Param::AttnW3 => (d, d),
            Param::UpdateW | Param::ResetW | Param::CandW | Param::Fusion => (d, 2 * d),
            Param::AttnW1 => (d, 1),
            Param::MsgInB | Param::MsgOutB | Param::UpdateB | Param::ResetB | Param::CandB | Param::AttnB => (1, d),
        }
    }
}

/// All learnable tensors of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    vocab_size: usize,
    hidden_dim: usize,
    tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(vocab_size: usize, hidden_dim: usize) -> Self {
        let tensors = Param::ALL
            .iter()
            .map(|p| {
                let (r, c) = p.shape(vocab_size, hidden_dim);
                Matrix::zeros(r, c)
            })
            .collect();
        Self { vocab_size, hidden_dim, tensors }
    }

    /// Every entry uniform in `[-1/√d, 1/√d]`.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab_size, hidden_dim);
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        for t in &mut p.tensors {
            for x in t.as_mut_slice() {
                *x = T::lit(rng.gen_range(-bound..=bound));
            }
        }
        p
    }

    /// Assembles parameters from tensors in [`Param::ALL`] order.
    pub fn from_tensors(vocab_size: usize, hidden_dim: usize, tensors: Vec<Matrix<T>>) -> Result<Self> {
        if tensors.len() != Param::ALL.len() {
            return Err(Error::Dimension(format!("expected {} tensors, got {}", Param::ALL.len(), tensors.len())));
        }
        for (p, t) in Param::ALL.iter().zip(&tensors) {
            if t.shape() != p.shape(vocab_size, hidden_dim) {
                return Err(Error::Dimension(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.shape(vocab_size, hidden_dim)
                )));
            }
        }
        Ok(Self { vocab_size, hidden_dim, tensors })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn get(&self, p: Param) -> &Matrix<T> {
        &self.tensors[p.index()]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Matrix<T> {
        &mut self.tensors[p.index()]
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }

    /// Records every tensor as a differentiable input.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        self.register_with(tape, true, true)
    }

    /// Records the tensors as constants; with `embeddings = false` the
    /// (large) embedding table is left off the tape.
    pub fn register_frozen(&self, tape: &mut Tape<T>, embeddings: bool) -> ParamVars {
        self.register_with(tape, false, embeddings)
    }

    fn register_with(&self, tape: &mut Tape<T>, trainable: bool, embeddings: bool) -> ParamVars {
        let vars = Param::ALL
            .iter()
            .map(|&p| {
                if p == Param::Embeddings && !embeddings {
                    return None;
                }
                let m = self.get(p).clone();
                Some(if trainable { tape.param(m) } else { tape.constant(m) })
            })
            .collect();
        ParamVars { vars, hidden_dim: self.hidden_dim, vocab_size: self.vocab_size, token: next_token() }
    }

    /// Embedding rows for `tracks`, zero rows for padding up to `pad_to`.
    pub fn embed_values(&self, tracks: &[TrackId], pad_to: Option<usize>) -> Result<Matrix<T>> {
        let idx = padded_indices(tracks, pad_to, self.vocab_size)?;
        let e = self.get(Param::Embeddings);
        let mut out = Matrix::zeros(idx.len(), self.hidden_dim);
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out.row_mut(r).copy_from_slice(e.row(i));
            }
        }
        Ok(out)
    }

    /// Track representations and session representation of `tracks`.
    pub fn represent(&self, tracks: &[TrackId]) -> Result<(Matrix<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let pv = self.register_frozen(&mut tape, false);
        let e = tape.constant(self.embed_values(tracks, None)?);
        let graph = SessionGraph::build(tracks);
        let h = encode(&mut tape, e, &graph, &pv)?;
        let z = aggregate(&mut tape, h, tracks.len(), &pv)?;
        Ok((tape.value(h).clone(), tape.value(z).as_slice().to_vec()))
    }

    /// Logits `zᵀ e_v` for every track.
    pub fn logits(&self, z: &[T]) -> Vec<T> {
        let e = self.get(Param::Embeddings);
        (0..self.vocab_size).map(|v| e.row(v).iter().zip(z).map(|(&a, &b)| a * b).sum()).collect()
    }

    /// Next-track logits for a prefix.
    pub fn score(&self, prefix: &[TrackId]) -> Result<Vec<T>> {
        let (_, z) = self.represent(prefix)?;
        Ok(self.logits(&z))
    }
}

fn next_token() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Option<Var>>,
    hidden_dim: usize,
    vocab_size: usize,
    token: u64,
}

impl ParamVars {
    /// Handles for tensors already on a tape, one per [`Param::ALL`] entry.
    pub fn from_vars(vocab_size: usize, hidden_dim: usize, vars: &[Var]) -> Result<Self> {
        if vars.len() != Param::ALL.len() {
            return Err(Error::Dimension(format!("{} parameter handles, expected {}", vars.len(), Param::ALL.len())));
        }
        Ok(Self { vars: vars.iter().copied().map(Some).collect(), hidden_dim, vocab_size, token: next_token() })
    }

    pub fn var(&self, p: Param) -> Var {
        self.vars[p.index()].unwrap_or_else(|| panic!("{} not registered on this tape", p.name()))
    }

    pub fn try_var(&self, p: Param) -> Option<Var> {
        self.vars[p.index()]
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Identity of this registration; equal tokens mean the same parameter
    /// nodes are being read.
    pub fn token(&self) -> u64 {
        self.token
    }

    /// Gradients of every tensor, zeros where nothing flowed.
    pub fn collect_grads<T: Scalar>(&self, grads: &mut crate::autodiff::Gradients<T>) -> Vec<Matrix<T>> {
        Param::ALL
            .iter()
            .map(|&p| {
                let (r, c) = p.shape(self.vocab_size, self.hidden_dim);
                match self.try_var(p) {
                    Some(v) => grads.take_or_zeros(v, r, c),
                    None => Matrix::zeros(r, c),
                }
            })
            .collect()
    }
}

fn padded_indices(tracks: &[TrackId], pad_to: Option<usize>, vocab_size: usize) -> Result<Vec<Option<usize>>> {
    let n = pad_to.unwrap_or(tracks.len()).max(tracks.len());
    let mut idx = Vec::with_capacity(n);
    for &t in tracks {
        if t as usize >= vocab_size {
            return Err(Error::Index { index: t as usize, bound: vocab_size });
        }
        idx.push(Some(t as usize));
    }
    idx.resize(n, None);
    Ok(idx)
}

/// Embedding lookup; rows beyond the session (up to `pad_to`) are zero.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    tracks: &[TrackId],
    pad_to: Option<usize>,
) -> Result<Var> {
    let idx = padded_indices(tracks, pad_to, params.vocab_size)?;
    Ok(tape.gather_rows_opt(params.var(Param::Embeddings), idx))
}

/// Directed graph of a session's distinct tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionGraph {
    /// Distinct tracks in order of first appearance.
    pub nodes: Vec<TrackId>,
    /// `a_out[i][j]`: edge `i → j`, normalized by the out-degree of `i`.
    pub a_out: Vec<Vec<f64>>,
    /// `a_in[i][j]`: edge `j → i`, normalized by the in-degree of `i`.
    pub a_in: Vec<Vec<f64>>,
    /// Node index of every sequence position.
    pub position_map: Vec<usize>,
}

impl SessionGraph {
    /// Binary adjacency over adjacent pairs, then degree normalization.
    pub fn build(tracks: &[TrackId]) -> Self {
        let mut index: HashMap<TrackId, usize> = HashMap::new();
        let mut nodes = Vec::new();
        let position_map: Vec<usize> = tracks
            .iter()
            .map(|&t| {
                *index.entry(t).or_insert_with(|| {
                    nodes.push(t);
                    nodes.len() - 1
                })
            })
            .collect();
        let n = nodes.len();
        let mut edge = vec![vec![false; n]; n];
        for w in position_map.windows(2) {
            edge[w[0]][w[1]] = true;
        }
        let mut a_out = vec![vec![0.0; n]; n];
        let mut a_in = vec![vec![0.0; n]; n];
        for i in 0..n {
            let out_deg = edge[i].iter().filter(|&&e| e).count();
            let in_deg = (0..n).filter(|&j| edge[j][i]).count();
            for j in 0..n {
                if edge[i][j] {
                    a_out[i][j] = 1.0 / out_deg as f64;
                }
                if edge[j][i] {
                    a_in[i][j] = 1.0 / in_deg as f64;
                }
            }
        }
        Self { nodes, a_out, a_in, position_map }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Same graph with node `i` moved to position `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        assert_eq!(perm.len(), n, "permutation length");
        let mut nodes = vec![0; n];
        let mut a_out = vec![vec![0.0; n]; n];
        let mut a_in = vec![vec![0.0; n]; n];
        for i in 0..n {
            nodes[perm[i]] = self.nodes[i];
            for j in 0..n {
                a_out[perm[i]][perm[j]] = self.a_out[i][j];
                a_in[perm[i]][perm[j]] = self.a_in[i][j];
            }
        }
        let position_map = self.position_map.iter().map(|&k| perm[k]).collect();
        Self { nodes, a_out, a_in, position_map }
    }

    /// First sequence position at which each node occurs.
    fn first_positions(&self) -> Vec<usize> {
        let mut first = vec![usize::MAX; self.n_nodes()];
        for (pos, &k) in self.position_map.iter().enumerate() {
            if first[k] == usize::MAX {
                first[k] = pos;
            }
        }
        first
    }
}

fn adjacency<T: Scalar>(a: &[Vec<f64>]) -> Matrix<T> {
    let n = a.len();
    Matrix::from_vec(n, n, a.iter().flatten().map(|&x| T::lit(x)).collect())
}

/// `x · Wᵀ + b` with the bias broadcast over rows.
fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = tape.matmul_t(x, false, w, true);
    match b {
        Some(b) => {
            let rows = tape.shape(y).0;
            let bb = tape.repeat_rows(b, rows);
            tape.add(y, bb)
        }
        None => y,
    }
}

fn gate<T: Scalar>(tape: &mut Tape<T>, msg: Var, state: Var, params: &ParamVars, w: Param, u: Param, b: Param) -> Var {
    let a = linear(tape, msg, params.var(w), Some(params.var(b)));
    let s = linear(tape, state, params.var(u), None);
    tape.add(a, s)
}

/// One gated message-passing step; returns one row per sequence position.
///
/// `embedded` holds one embedding row per position (extra padding rows are
/// ignored).
pub fn encode<T: Scalar>(tape: &mut Tape<T>, embedded: Var, graph: &SessionGraph, params: &ParamVars) -> Result<Var> {
    let d = params.hidden_dim();
    let (rows, cols) = tape.shape(embedded);
    if cols != d {
        return Err(Error::Dimension(format!("embedding width {cols} but hidden dim {d}")));
    }
    if rows < graph.position_map.len() {
        return Err(Error::Dimension(format!(
            "{rows} embedding rows for a session of length {}",
            graph.position_map.len()
        )));
    }
    if graph.n_nodes() == 0 {
        return Err(Error::EmptyInput("cannot encode an empty session".into()));
    }
    let state = tape.gather_rows(embedded, &graph.first_positions());
    let a_in = tape.constant(adjacency(&graph.a_in));
    let a_out = tape.constant(adjacency(&graph.a_out));

    let in_agg = tape.matmul(a_in, state);
    let m_in = linear(tape, in_agg, params.var(Param::MsgInW), Some(params.var(Param::MsgInB)));
    let out_agg = tape.matmul(a_out, state);
    let m_out = linear(tape, out_agg, params.var(Param::MsgOutW), Some(params.var(Param::MsgOutB)));
    let msg = tape.concat_cols(m_in, m_out);

    let u_pre = gate(tape, msg, state, params, Param::UpdateW, Param::UpdateU, Param::UpdateB);
    let update = tape.sigmoid(u_pre);
    let r_pre = gate(tape, msg, state, params, Param::ResetW, Param::ResetU, Param::ResetB);
    let reset = tape.sigmoid(r_pre);
    let gated = tape.mul(reset, state);
    let c_pre = gate(tape, msg, gated, params, Param::CandW, Param::CandU, Param::CandB);
    let cand = tape.tanh(c_pre);

    // (1 - u) ⊙ x + u ⊙ c  =  x + u ⊙ (c - x)
    let delta = tape.sub(cand, state);
    let step = tape.mul(update, delta);
    let new_state = tape.add(state, step);
    Ok(tape.gather_rows(new_state, &graph.position_map))
}

/// Session representation from the first `valid` rows of `h`:
/// `W4 · [h_last ; Σ β_i h_i]` with `β_i = W1ᵀ σ(W2 h_i + W3 h_last + b)`.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, h: Var, valid: usize, params: &ParamVars) -> Result<Var> {
    let (rows, cols) = tape.shape(h);
    if valid == 0 || valid > rows {
        return Err(Error::Dimension(format!("{valid} valid rows of {rows}")));
    }
    if cols != params.hidden_dim() {
        return Err(Error::Dimension(format!("representation width {cols} but hidden dim {}", params.hidden_dim())));
    }
    let hv = tape.head_rows(h, valid);
    let last = tape.gather_rows(hv, &[valid - 1]);
    let per_track = linear(tape, hv, params.var(Param::AttnW2), None);
    let last_term = linear(tape, last, params.var(Param::AttnW3), Some(params.var(Param::AttnB)));
    let last_rep = tape.repeat_rows(last_term, valid);
    let pre = tape.add(per_track, last_rep);
    let act = tape.sigmoid(pre);
    let beta = tape.matmul(act, params.var(Param::AttnW1));
    let global = tape.matmul_t(beta, true, hv, false);
    let fused = tape.concat_cols(last, global);
    Ok(linear(tape, fused, params.var(Param::Fusion), None))
}

/// Logits of every track for each row of `z` (`B × |V|`).
pub fn logits<T: Scalar>(tape: &mut Tape<T>, z: Var, params: &ParamVars) -> Var {
    tape.matmul_t(z, false, params.var(Param::Embeddings), true)
}

/// Logits and softmax probabilities for a session representation.
pub fn predict_scores<T: Scalar>(z: &[T], params: &ModelParams<T>) -> (Vec<T>, Vec<T>) {
    let logits = params.logits(z);
    let probs = softmax(&logits);
    (logits, probs)
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn embedding_lookup_and_padding() {
        let mut p = ModelParams::<f64>::init(5, 3, &mut seeded(0));
        p.get_mut(Param::Embeddings).row_mut(2).copy_from_slice(&[1.0, 2.0, 3.0]);
        let e = p.embed_values(&[2], None).unwrap();
        assert_eq!(e.row(0), &[1.0, 2.0, 3.0]);
        let padded = p.embed_values(&[2, 4, 2], Some(20)).unwrap();
        assert_eq!(padded.rows(), 20);
        assert_eq!(padded.row(0), padded.row(2));
        assert!((3..20).all(|r| padded.row(r).iter().all(|&x| x == 0.0)));

        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let v = embed(&mut tape, &pv, &[2, 4, 2], Some(20)).unwrap();
        assert_eq!(tape.value(v), &padded);
        assert!(matches!(embed(&mut tape, &pv, &[5], None), Err(Error::Index { index: 5, bound: 5 })));
    }

    #[test]
    fn graph_of_revisiting_session() {
        let g = SessionGraph::build(&[10, 11, 10, 12]);
        assert_eq!(g.nodes, vec![10, 11, 12]);
        assert_eq!(g.position_map, vec![0, 1, 0, 2]);
        assert_eq!(g.a_out[0], vec![0.0, 0.5, 0.5]);
        assert_eq!(g.a_out[1], vec![1.0, 0.0, 0.0]);
        // a has one predecessor (b); b has one (a); c has one (a).
        assert_eq!(g.a_in[0], vec![0.0, 1.0, 0.0]);
        assert_eq!(g.a_in[2], vec![1.0, 0.0, 0.0]);
        for row in g.a_out.iter().chain(&g.a_in) {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_track_graph_has_no_edges() {
        let g = SessionGraph::build(&[3]);
        assert_eq!(g.n_nodes(), 1);
        assert_eq!(g.a_out, vec![vec![0.0]]);
        assert_eq!(g.a_in, vec![vec![0.0]]);
    }

    #[test]
    fn repeated_edge_is_binary() {
        assert_eq!(SessionGraph::build(&[1, 2, 1, 2]).a_out, SessionGraph::build(&[1, 2, 1]).a_out);
        let g = SessionGraph::build(&[1, 2, 1, 2, 3]);
        assert_eq!(g.a_out[1], vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn zero_weights_halve_the_embeddings() {
        let mut p = ModelParams::<f64>::zeros(4, 2);
        let e = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0], vec![3.0, 0.0], vec![-1.0, 1.0]]);
        *p.get_mut(Param::Embeddings) = e.clone();
        let (h, _) = p.represent(&[0, 1, 3, 1]).unwrap();
        let expect = [[0.5, -1.0], [0.25, 2.0], [-0.5, 0.5], [0.25, 2.0]];
        for (r, row) in expect.iter().enumerate() {
            assert_eq!(h.row(r), row);
        }
    }

    #[test]
    fn single_node_uses_only_self_terms() {
        // With no edges, messages reduce to the biases; changing message
        // weights must not change the output.
        let mut p = ModelParams::<f64>::init(3, 4, &mut seeded(5));
        let (h1, _) = p.represent(&[1]).unwrap();
        *p.get_mut(Param::MsgInW) = Matrix::filled(4, 4, 9.0);
        *p.get_mut(Param::MsgOutW) = Matrix::filled(4, 4, -9.0);
        let (h2, _) = p.represent(&[1]).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = ModelParams::<f64>::init(3, 4, &mut seeded(5));
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let bad = tape.constant(Matrix::zeros(2, 3));
        let g = SessionGraph::build(&[0, 1]);
        assert!(matches!(encode(&mut tape, bad, &g, &pv), Err(Error::Dimension(_))));
    }

    #[test]
    fn encode_is_equivariant_to_node_relabeling() {
        let p = ModelParams::<f64>::init(8, 4, &mut seeded(9));
        let tracks = [3, 5, 3, 7, 1, 5];
        let g = SessionGraph::build(&tracks);
        let run = |g: &SessionGraph| {
            let mut tape = Tape::new();
            let pv = p.register(&mut tape);
            let e = embed(&mut tape, &pv, &tracks, None).unwrap();
            let h = encode(&mut tape, e, g, &pv).unwrap();
            tape.value(h).clone()
        };
        let base = run(&g);
        let permuted = run(&g.relabeled(&[2, 0, 3, 1]));
        for (a, b) in base.as_slice().iter().zip(permuted.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_aggregation() {
        let p = ModelParams::<f64>::init(3, 3, &mut seeded(1));
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let h = tape.constant(Matrix::from_rows(&[vec![0.3, -0.2, 0.9]]));
        let z = aggregate(&mut tape, h, 1, &pv).unwrap();
        // β = W1ᵀ σ(W2 h + W3 h + b); z = W4 [h ; β h].
        let hv = [0.3, -0.2, 0.9];
        let (w1, w2, w3, b, w4) = (
            p.get(Param::AttnW1),
            p.get(Param::AttnW2),
            p.get(Param::AttnW3),
            p.get(Param::AttnB),
            p.get(Param::Fusion),
        );
        let mut beta = 0.0;
        for i in 0..3 {
            let pre: f64 = (0..3).map(|j| (w2.get(i, j) + w3.get(i, j)) * hv[j]).sum::<f64>() + b.get(0, i);
            beta += w1.get(i, 0) * crate::scalar::sigmoid(pre);
        }
        let cat: Vec<f64> = hv.iter().copied().chain(hv.iter().map(|x| beta * x)).collect();
        for i in 0..3 {
            let zi: f64 = (0..6).map(|j| w4.get(i, j) * cat[j]).sum();
            assert!((tape.value(z).get(0, i) - zi).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_attention_vector_drops_global_part() {
        let mut p = ModelParams::<f64>::init(3, 2, &mut seeded(2));
        *p.get_mut(Param::AttnW1) = Matrix::zeros(2, 1);
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let h = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]));
        let z = aggregate(&mut tape, h, 2, &pv).unwrap();
        let w4 = p.get(Param::Fusion);
        for i in 0..2 {
            let expect = w4.get(i, 0) * -0.5 + w4.get(i, 1) * 0.25;
            assert!((tape.value(z).get(0, i) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn padding_rows_do_not_change_aggregation() {
        let p = ModelParams::<f64>::init(6, 4, &mut seeded(3));
        let (h, z) = p.represent(&[0, 2, 4]).unwrap();
        let mut padded = Matrix::zeros(20, 4);
        for r in 0..3 {
            padded.row_mut(r).copy_from_slice(h.row(r));
        }
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let hv = tape.constant(padded);
        let zp = aggregate(&mut tape, hv, 3, &pv).unwrap();
        assert_eq!(tape.value(zp).as_slice(), &z[..]);
    }

    #[test]
    fn scoring_properties() {
        let mut p = ModelParams::<f64>::zeros(4, 4);
        let mut e = Matrix::zeros(4, 4);
        for i in 0..4 {
            e.set(i, i, 1.0);
        }
        *p.get_mut(Param::Embeddings) = e;
        let z = vec![0.0, 0.0, 10.0, 0.0];
        let (logits, probs) = predict_scores(&z, &p);
        let argmax = (0..4).max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap()).unwrap();
        assert_eq!(argmax, 2);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|&x| x > 0.0));
        let (_, uniform) = predict_scores(&[0.0; 4], &p);
        assert!(uniform.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let shifted: Vec<f64> = logits.iter().map(|x| x + 123.0).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let p = ModelParams::<f32>::init(10, 8, &mut seeded(4));
        let scores = p.score(&[1, 2, 3, 2]).unwrap();
        assert_eq!(scores.len(), 10);
        let probs = softmax(&scores);
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let p64: ModelParams<f64> = p.cast();
        let s64 = p64.score(&[1, 2, 3, 2]).unwrap();
        for (a, b) in scores.iter().zip(&s64) {
            assert!((f64::from(*a) - b).abs() < 1e-4);
        }
    }
}
