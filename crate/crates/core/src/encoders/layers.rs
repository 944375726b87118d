use log::debug;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, Session};
use crate::tensor::{Result, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_matrix(format!("{name}.w"), input, output, rng),
            b: store.add_const(format!("{name}.b"), output, 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.graph.matmul(x, w)?;
        s.graph.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), d, 1.0),
            bias: store.add_const(format!("{name}.bias"), d, 0.0),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.graph.layer_norm(x, g, b, 1e-12)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

/// Post-norm transformer encoder stack with GELU feed-forward.
#[derive(Debug, Clone)]
pub struct Transformer {
    layers: Vec<EncoderLayer>,
    heads: usize,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, layers: usize, heads: usize, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    query: Linear::new(store, &format!("{p}.attn.query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}.attn.key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}.attn.value"), d, d, rng),
                    out: Linear::new(store, &format!("{p}.attn.out"), d, d, rng),
                    norm1: Norm::new(store, &format!("{p}.norm1"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, d_ff, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), d_ff, d, rng),
                    norm2: Norm::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Self { layers, heads }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let d = s.graph.value(x).cols();
            let dh = d / self.heads;
            let q = layer.query.forward(s, x)?;
            let k = layer.key.forward(s, x)?;
            let v = layer.value.forward(s, x)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = s.graph.slice(q, 1, h * dh, dh)?;
                let kh = s.graph.slice(k, 1, h * dh, dh)?;
                let vh = s.graph.slice(v, 1, h * dh, dh)?;
                let scores = s.graph.matmul_nt(qh, kh)?;
                let scores = s.graph.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = s.graph.softmax(scores, 1)?;
                let attn = s.dropout(attn)?;
                heads.push(s.graph.matmul(attn, vh)?);
            }
            let ctx = if heads.len() == 1 { heads[0] } else { s.graph.concat(&heads, 1)? };
            let att = layer.out.forward(s, ctx)?;
            let att = s.dropout(att)?;
            let res = s.graph.add(x, att)?;
            let h1 = layer.norm1.forward(s, res)?;
            let f = layer.ff1.forward(s, h1)?;
            let f = s.graph.gelu(f);
            let f = layer.ff2.forward(s, f)?;
            let f = s.dropout(f)?;
            let res = s.graph.add(h1, f)?;
            x = layer.norm2.forward(s, res)?;
        }
        Ok(x)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Gated embedding unit: `h = W₁x + b₁`, `g = σ(W₂h + b₂)`, `out = (h⊙g)/‖h⊙g‖`.
#[derive(Debug, Clone, Copy)]
pub struct Geu {
    pub proj: Linear,
    pub gate: Linear,
}

impl Geu {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), input, d, rng),
            gate: Linear::new(store, &format!("{name}.gate"), d, d, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.proj.forward(s, x)?;
        let g = self.gate.forward(s, h)?;
        let g = s.graph.sigmoid(g);
        let hg = s.graph.mul(h, g)?;
        let out = s.graph.l2_normalize_rows(hg)?;
        let t = s.graph.value(out);
        for i in 0..t.rows() {
            if t.row_slice(i).iter().all(|v| *v == 0.0) {
                debug!("gated embedding unit produced a zero vector (row {i})");
            }
        }
        Ok(out)
    }
}

/// Soft-assignment residual aggregation of a variable-length set.
#[derive(Debug, Clone, Copy)]
pub struct NetVlad {
    pub assign: Linear,
    pub centers: ParamId,
    pub clusters: usize,
}

impl NetVlad {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, clusters: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            assign: Linear::new(store, &format!("{name}.assign"), d, clusters, rng),
            centers: store.add_normal(format!("{name}.centers"), clusters, d, 0.1, rng),
            clusters,
        }
    }

    pub fn output_dim(&self, d: usize) -> usize {
        self.clusters * d
    }

    /// `[L, d] -> [1, K·d]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let d = s.graph.value(x).cols();
        let logits = self.assign.forward(s, x)?;
        let a = s.graph.softmax(logits, 1)?; // [L, K]
        let at = s.graph.transpose(a)?;
        let weighted = s.graph.matmul(at, x)?; // [K, d] = Σ_x a_k(x) x
        let mass = s.graph.sum_axis(a, 0)?; // [1, K]
        let mass = s.graph.reshape(mass, vec![self.clusters, 1])?;
        let c = s.p(self.centers);
        let shifted = s.graph.mul_col(c, mass)?; // Σ_x a_k(x) c_k
        let resid = s.graph.sub(weighted, shifted)?;
        let intra = s.graph.l2_normalize_rows(resid)?;
        let flat = s.graph.reshape(intra, vec![1, self.clusters * d])?;
        s.graph.l2_normalize_rows(flat)
    }
}

/// Linear head followed by a softmax over the three modalities.
#[derive(Debug, Clone, Copy)]
pub struct MixtureHead {
    pub linear: Linear,
}

impl MixtureHead {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(store, name, input, 3, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let l = self.linear.forward(s, x)?;
        s.graph.softmax(l, 1)
    }
}

/// Applies a gated embedding unit to a plain vector.
pub fn gated_embedding_unit(store: &ParamStore, geu: &Geu, x: &[f64]) -> Result<Vec<f64>> {
    let mut s = Session::eval(store);
    let v = s.graph.constant(Tensor::row(x.to_vec()));
    let out = geu.forward(&mut s, v)?;
    Ok(s.graph.value(out).data().to_vec())
}

/// Aggregates a set of `d`-dim vectors with NetVLAD.
pub fn netvlad_aggregate(store: &ParamStore, vlad: &NetVlad, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if embeddings.is_empty() {
        return Err(crate::tensor::TensorError::Empty { op: "netvlad_aggregate" });
    }
    let d = embeddings.first().map_or(0, Vec::len);
    let data: Vec<f64> = embeddings.iter().flatten().copied().collect();
    let mut s = Session::eval(store);
    let x = s.graph.constant(Tensor::matrix(embeddings.len(), d, data)?);
    let out = vlad.forward(&mut s, x)?;
    Ok(s.graph.value(out).data().to_vec())
}
