//! Query/video similarity and the bi-directional max-margin ranking loss.

use thiserror::Error;

use crate::encoders::{QueryRepr, VideoRepr, MODALITIES};
use crate::tensor::{CustomOp, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("ranking loss needs at least 2 items, got {0}")]
    BatchTooSmall(usize),
    #[error("video {video} has no present modality")]
    NoModality { video: usize },
    #[error("query/video embedding widths differ: {query} vs {video}")]
    WidthMismatch { query: usize, video: usize },
    #[error("margin must be >= 0, got {0}")]
    NegativeMargin(f64),
    #[error("mixture weights of query {query} vanish over the video's present modalities")]
    DegenerateWeights { query: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// `Nq x Nv` score matrix; row `i` is query `i`, column `j` is video `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != rows * cols {
            return Err(TensorError::DataLength {
                shape: vec![rows, cols],
                got: scores.len(),
            }
            .into());
        }
        Ok(Self { rows, cols, scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let scores: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, scores)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            scores: self.scores.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl TryFrom<&Tensor> for SimilarityMatrix {
    type Error = ObjectiveError;

    fn try_from(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2().ok_or_else(|| TensorError::NotMatrix {
            op: "similarity_matrix",
            shape: t.shape().to_vec(),
        })?;
        Self::new(r, c, t.data().to_vec())
    }
}

/// Mixture weights of `w` restricted to modalities present in the video,
/// renormalized to sum to one.
pub fn renormalized_weights(weights: &[f64; 3], present: &[bool; 3]) -> Option<[f64; 3]> {
    let total: f64 = weights.iter().zip(present).filter(|(_, p)| **p).map(|(w, _)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut out = [0.0; 3];
    for m in 0..3 {
        if present[m] {
            out[m] = weights[m] / total;
        }
    }
    Some(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `s = Σ_m w̃_m (q_m · v_m)` with `w̃` renormalized over the video's nonzero parts.
pub fn similarity(q: &QueryRepr, v: &VideoRepr) -> Result<f64> {
    let present = v.present();
    if !present.iter().any(|p| *p) {
        return Err(ObjectiveError::NoModality { video: 0 });
    }
    let w = renormalized_weights(&q.weights, &present)
        .ok_or(ObjectiveError::DegenerateWeights { query: 0 })?;
    let mut s = 0.0;
    for m in MODALITIES {
        let (qm, vm) = (q.part(m), v.part(m));
        if qm.len() != vm.len() {
            return Err(ObjectiveError::WidthMismatch {
                query: qm.len(),
                video: vm.len(),
            });
        }
        if present[m.index()] {
            s += w[m.index()] * dot(qm, vm);
        }
    }
    Ok(s)
}

pub fn similarity_matrix(queries: &[QueryRepr], videos: &[VideoRepr]) -> Result<SimilarityMatrix> {
    for (j, v) in videos.iter().enumerate() {
        if !v.present().iter().any(|p| *p) {
            return Err(ObjectiveError::NoModality { video: j });
        }
    }
    let mut scores = Vec::with_capacity(queries.len() * videos.len());
    for (i, q) in queries.iter().enumerate() {
        for (j, v) in videos.iter().enumerate() {
            scores.push(similarity(q, v).map_err(|e| match e {
                ObjectiveError::NoModality { .. } => ObjectiveError::NoModality { video: j },
                ObjectiveError::DegenerateWeights { .. } => {
                    ObjectiveError::DegenerateWeights { query: i }
                }
                other => other,
            })?);
        }
    }
    SimilarityMatrix::new(queries.len(), videos.len(), scores)
}

fn check_square(rows: usize, cols: usize, margin: f64) -> Result<()> {
    if rows != cols {
        return Err(ObjectiveError::NonSquare { rows, cols });
    }
    if rows < 2 {
        return Err(ObjectiveError::BatchTooSmall(rows));
    }
    if !(margin >= 0.0) {
        return Err(ObjectiveError::NegativeMargin(margin));
    }
    Ok(())
}

fn loss_and_grad(s: &[f64], b: usize, margin: f64, want_grad: bool) -> (f64, Vec<f64>) {
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; b * b] } else { Vec::new() };
    for i in 0..b {
        let sii = s[i * b + i];
        for j in 0..b {
            if j == i {
                continue;
            }
            let row_term = s[i * b + j] - sii + margin;
            let col_term = s[j * b + i] - sii + margin;
            total += row_term.max(0.0) + col_term.max(0.0);
            if want_grad {
                if row_term > 0.0 {
                    grad[i * b + j] += inv_b;
                    grad[i * b + i] -= inv_b;
                }
                if col_term > 0.0 {
                    grad[j * b + i] += inv_b;
                    grad[i * b + i] -= inv_b;
                }
            }
        }
    }
    (total / b as f64, grad)
}

/// `L = (1/B) Σ_i Σ_{j≠i} [max(0, s_ij − s_ii + m) + max(0, s_ji − s_ii + m)]`.
pub fn bidirectional_max_margin_loss(s: &SimilarityMatrix, margin: f64) -> Result<f64> {
    check_square(s.rows, s.cols, margin)?;
    Ok(loss_and_grad(&s.scores, s.rows, margin, false).0)
}

/// Subgradient of the ranking loss with respect to every score; the hinge at
/// exactly zero contributes nothing.
pub fn max_margin_loss_grad(s: &SimilarityMatrix, margin: f64) -> Result<Vec<f64>> {
    check_square(s.rows, s.cols, margin)?;
    Ok(loss_and_grad(&s.scores, s.rows, margin, true).1)
}

struct RankingLossOp {
    margin: f64,
}

impl CustomOp for RankingLossOp {
    fn name(&self) -> &'static str {
        "max_margin_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gs) = grads[0].as_mut() {
            let b = inputs[0].rows();
            let (_, local) = loss_and_grad(inputs[0].data(), b, self.margin, true);
            for (g, l) in gs.iter_mut().zip(local) {
                *g += grad_out[0] * l;
            }
        }
    }
}

/// Records the ranking loss of a `[B, B]` score node.
pub fn ranking_loss(g: &mut Graph, scores: Var, margin: f64) -> Result<Var> {
    let t = g.value(scores);
    let (r, c) = t.dims2().ok_or_else(|| TensorError::NotMatrix {
        op: "max_margin_loss",
        shape: t.shape().to_vec(),
    })?;
    check_square(r, c, margin)?;
    let (loss, _) = loss_and_grad(t.data(), r, margin, false);
    Ok(g.custom(&[scores], Tensor::scalar(loss), Box::new(RankingLossOp { margin })))
}

struct MixtureSimilarityOp {
    /// `[Nv][3]` presence derived from nonzero video parts.
    present: Vec<[bool; 3]>,
    /// Renormalizer `D_ij = Σ_m w_im p_jm`.
    denom: Vec<f64>,
    /// Per-modality cosine matrices `S_m`, each `Nq x Nv`.
    cosines: [Vec<f64>; 3],
}

impl CustomOp for MixtureSimilarityOp {
    fn name(&self) -> &'static str {
        "mixture_similarity"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let w = inputs[6].data();
        let (nq, nv) = (output.rows(), output.cols());
        let s = output.data();
        for m in 0..3 {
            let (q, v) = (inputs[m], inputs[3 + m]);
            let d = q.cols();
            // dS_m = G ⊙ w_im p_jm / D_ij
            let mut ds = vec![0.0; nq * nv];
            for i in 0..nq {
                for j in 0..nv {
                    if self.present[j][m] {
                        ds[i * nv + j] = g[i * nv + j] * w[i * 3 + m] / self.denom[i * nv + j];
                    }
                }
            }
            if let Some(gq) = grads[m].as_mut() {
                for i in 0..nq {
                    for j in 0..nv {
                        let c = ds[i * nv + j];
                        if c != 0.0 {
                            for k in 0..d {
                                gq[i * d + k] += c * v.data()[j * d + k];
                            }
                        }
                    }
                }
            }
            if let Some(gv) = grads[3 + m].as_mut() {
                for i in 0..nq {
                    for j in 0..nv {
                        let c = ds[i * nv + j];
                        if c != 0.0 {
                            for k in 0..d {
                                gv[j * d + k] += c * q.data()[i * d + k];
                            }
                        }
                    }
                }
            }
            if let Some(gw) = grads[6].as_mut() {
                let sm = &self.cosines[m];
                for i in 0..nq {
                    let mut acc = 0.0;
                    for j in 0..nv {
                        if self.present[j][m] {
                            let ij = i * nv + j;
                            acc += g[ij] * (sm[ij] - s[ij]) / self.denom[ij];
                        }
                    }
                    gw[i * 3 + m] += acc;
                }
            }
        }
    }
}

/// Records the `Nq x Nv` similarity matrix between query parts `q[m]`
/// (`Nq x d`), query mixture weights `weights` (`Nq x 3`) and video parts
/// `v[m]` (`Nv x d`). A video part that is exactly zero counts as absent.
pub fn mixture_similarity(g: &mut Graph, q: [Var; 3], weights: Var, v: [Var; 3]) -> Result<Var> {
    let nq = g.value(q[0]).rows();
    let nv = g.value(v[0]).rows();
    for m in 0..3 {
        let (tq, tv) = (g.value(q[m]), g.value(v[m]));
        if tq.cols() != tv.cols() {
            return Err(ObjectiveError::WidthMismatch {
                query: tq.cols(),
                video: tv.cols(),
            });
        }
        if tq.rows() != nq || tv.rows() != nv {
            return Err(TensorError::ShapeMismatch {
                op: "mixture_similarity",
                left: tq.shape().to_vec(),
                right: tv.shape().to_vec(),
            }
            .into());
        }
    }
    let tw = g.value(weights);
    if tw.dims2() != Some((nq, 3)) {
        return Err(TensorError::ShapeMismatch {
            op: "mixture_similarity",
            left: vec![nq, 3],
            right: tw.shape().to_vec(),
        }
        .into());
    }
    let w = tw.data().to_vec();
    let mut present = vec![[false; 3]; nv];
    for (j, p) in present.iter_mut().enumerate() {
        for m in 0..3 {
            p[m] = g.value(v[m]).row_slice(j).iter().any(|x| *x != 0.0);
        }
        if !p.iter().any(|x| *x) {
            return Err(ObjectiveError::NoModality { video: j });
        }
    }
    let mut cosines: [Vec<f64>; 3] = Default::default();
    for m in 0..3 {
        let (tq, tv) = (g.value(q[m]), g.value(v[m]));
        let mut sm = vec![0.0; nq * nv];
        for i in 0..nq {
            for j in 0..nv {
                if present[j][m] {
                    sm[i * nv + j] = dot(tq.row_slice(i), tv.row_slice(j));
                }
            }
        }
        cosines[m] = sm;
    }
    let mut denom = vec![0.0; nq * nv];
    let mut out = vec![0.0; nq * nv];
    for i in 0..nq {
        for j in 0..nv {
            let ij = i * nv + j;
            let mut dsum = 0.0;
            let mut acc = 0.0;
            for m in 0..3 {
                if present[j][m] {
                    dsum += w[i * 3 + m];
                    acc += w[i * 3 + m] * cosines[m][ij];
                }
            }
            if dsum <= 0.0 {
                return Err(ObjectiveError::DegenerateWeights { query: i });
            }
            denom[ij] = dsum;
            out[ij] = acc / dsum;
        }
    }
    let output = Tensor::matrix(nq, nv, out)?;
    let mut inputs = Vec::with_capacity(7);
    inputs.extend_from_slice(&q);
    inputs.extend_from_slice(&v);
    inputs.push(weights);
    Ok(g.custom(
        &inputs,
        output,
        Box::new(MixtureSimilarityOp {
            present,
            denom,
            cosines,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    /// Literal transcription of the loss as a double loop.
    fn naive_loss(s: &[Vec<f64>], m: f64) -> f64 {
        let b = s.len();
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    total += (s[i][j] - s[i][i] + m).max(0.0) + (s[j][i] - s[i][i] + m).max(0.0);
                }
            }
        }
        total / b as f64
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn loss_examples() {
        let eye = SimilarityMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(bidirectional_max_margin_loss(&eye, 0.05).unwrap(), 0.0);
        let s = SimilarityMatrix::from_rows(&[vec![0.5, 0.6], vec![0.4, 0.7]]).unwrap();
        let l = bidirectional_max_margin_loss(&s, 0.2).unwrap();
        // i=0: (0.6-0.5+0.2)+(0.4-0.5+0.2) = 0.4; i=1: (0.4-0.7+0.2)^+ + (0.6-0.7+0.2) = 0.1
        assert!((l - 0.25).abs() < 1e-15, "{l}");
    }

    #[test]
    fn loss_errors() {
        let s = SimilarityMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            bidirectional_max_margin_loss(&s, 0.1),
            Err(ObjectiveError::NonSquare { rows: 2, cols: 3 })
        ));
        let s = SimilarityMatrix::new(1, 1, vec![0.0]).unwrap();
        assert!(matches!(bidirectional_max_margin_loss(&s, 0.1), Err(ObjectiveError::BatchTooSmall(1))));
    }

    #[test]
    fn loss_matches_double_loop_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let b = rng.random_range(2..=16);
            let rows: Vec<Vec<f64>> =
                (0..b).map(|_| (0..b).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let m = rng.random_range(0.0..0.5);
            let s = SimilarityMatrix::from_rows(&rows).unwrap();
            assert_eq!(bidirectional_max_margin_loss(&s, m).unwrap(), naive_loss(&rows, m));
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::matrix(4, 4, data).unwrap();
        let c = grad_check(|g, v| ranking_loss(g, v, 0.2).map_err(|e| TensorError::Invalid(e.to_string())), &x, 1e-5)
            .unwrap();
        assert!(c.max_rel_error < 1e-4, "{}", c.max_rel_error);
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parts: [Vec<f64>; 3] =
            std::array::from_fn(|_| unit((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let q = QueryRepr::new(parts.clone(), [0.2, 0.3, 0.5]);
        let v = VideoRepr::new(parts);
        assert!((similarity(&q, &v).unwrap() - 1.0).abs() < 1e-12);

        let w = renormalized_weights(&[0.5, 0.25, 0.25], &[true, true, false]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15 && w[2] == 0.0);

        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let q = QueryRepr::new([e(0), e(1), e(2)], [0.2, 0.3, 0.5]);
        let v = VideoRepr::new([e(1), e(2), e(3)]);
        assert_eq!(similarity(&q, &v).unwrap(), 0.0);

        let v = VideoRepr::new([vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]);
        assert!(matches!(similarity(&q, &v), Err(ObjectiveError::NoModality { .. })));
    }

    fn random_reprs(rng: &mut ChaCha8Rng, n: usize, d: usize, drop: Option<usize>) -> (Vec<QueryRepr>, Vec<VideoRepr>) {
        let mut qs = Vec::new();
        let mut vs = Vec::new();
        for _ in 0..n {
            let qp: [Vec<f64>; 3] = std::array::from_fn(|_| unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()));
            let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..1.0));
            let t: f64 = raw.iter().sum();
            qs.push(QueryRepr::new(qp, raw.map(|x| x / t)));
            let vp: [Vec<f64>; 3] = std::array::from_fn(|m| {
                if Some(m) == drop {
                    vec![0.0; d]
                } else {
                    unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                }
            });
            vs.push(VideoRepr::new(vp));
        }
        (qs, vs)
    }

    fn record(g: &mut Graph, qs: &[QueryRepr], vs: &[VideoRepr], track: bool) -> ([Var; 3], Var, [Var; 3]) {
        let d = qs[0].part_len();
        let mut leaf = |rows: Vec<f64>, n: usize, c: usize| {
            g.leaf(Tensor::matrix(n, c, rows).unwrap().with_requires_grad(track))
        };
        let q: [Var; 3] = std::array::from_fn(|m| {
            leaf(qs.iter().flat_map(|r| r.parts[m].clone()).collect(), qs.len(), d)
        });
        let w = leaf(qs.iter().flat_map(|r| r.weights).collect(), qs.len(), 3);
        let v: [Var; 3] = std::array::from_fn(|m| {
            leaf(vs.iter().flat_map(|r| r.parts[m].clone()).collect(), vs.len(), d)
        });
        (q, w, v)
    }

    #[test]
    fn graph_similarity_matches_pairwise_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for drop in [None, Some(2)] {
            let (qs, vs) = random_reprs(&mut rng, 5, 6, drop);
            let oracle = similarity_matrix(&qs, &vs).unwrap();
            let mut g = Graph::new();
            let (q, w, v) = record(&mut g, &qs, &vs, false);
            let s = mixture_similarity(&mut g, q, w, v).unwrap();
            for (a, b) in g.value(s).data().iter().zip(oracle.scores()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn graph_similarity_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (qs, vs) = random_reprs(&mut rng, 4, 3, Some(1));
        // Perturb every input in turn through one packed leaf.
        for which in 0..7 {
            let mut g0 = Graph::new();
            let (q, w, v) = record(&mut g0, &qs, &vs, false);
            let all = [q[0], q[1], q[2], v[0], v[1], v[2], w];
            let target = g0.value(all[which]).clone();
            if which == 4 {
                continue; // the absent modality column carries no signal
            }
            let check = grad_check(
                |g, x| {
                    let (q, w, v) = record(g, &qs, &vs, false);
                    let mut all = [q[0], q[1], q[2], v[0], v[1], v[2], w];
                    all[which] = x;
                    let s = mixture_similarity(g, [all[0], all[1], all[2]], all[6], [all[3], all[4], all[5]])
                        .map_err(|e| TensorError::Invalid(e.to_string()))?;
                    ranking_loss(g, s, 0.3).map_err(|e| TensorError::Invalid(e.to_string()))
                },
                &target,
                1e-6,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "input {which}: {}", check.max_rel_error);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy};

        fn square() -> impl Strategy<Value = Vec<Vec<f64>>> {
            (2usize..9).prop_flat_map(|b| {
                proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, b), b)
            })
        }

        proptest! {
            #[test]
            fn loss_is_nonnegative_and_zero_iff_margins_hold(rows in square(), m in 0.0f64..0.5) {
                let s = SimilarityMatrix::from_rows(&rows).unwrap();
                let l = bidirectional_max_margin_loss(&s, m).unwrap();
                prop_assert!(l >= 0.0);
                let b = rows.len();
                let satisfied = (0..b).all(|i| (0..b).filter(|&j| j != i).all(|j| {
                    rows[i][i] >= rows[i][j] + m && rows[i][i] >= rows[j][i] + m
                }));
                prop_assert_eq!(l == 0.0, satisfied);
            }

            #[test]
            fn loss_shift_invariant(rows in square(), m in 0.0f64..0.5, c in -3.0f64..3.0) {
                let s = SimilarityMatrix::from_rows(&rows).unwrap();
                let shifted = s.map(|v| v + c);
                let a = bidirectional_max_margin_loss(&s, m).unwrap();
                let b = bidirectional_max_margin_loss(&shifted, m).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }

            #[test]
            fn loss_symmetric_under_joint_permutation(rows in square(), m in 0.0f64..0.5, seed in 0u64..1000) {
                let b = rows.len();
                let mut perm: Vec<usize> = (0..b).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..b).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let permuted: Vec<Vec<f64>> =
                    (0..b).map(|i| (0..b).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
                let a = bidirectional_max_margin_loss(&SimilarityMatrix::from_rows(&rows).unwrap(), m).unwrap();
                let c = bidirectional_max_margin_loss(&SimilarityMatrix::from_rows(&permuted).unwrap(), m).unwrap();
                prop_assert!((a - c).abs() < 1e-12);
            }
        }
    }
}
